//! Pretext training, evaluation, localization heatmaps and fine-tuning.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Stage;
use crate::data::{batch_iter, derive_seed, Batch, ClipGeometry, Dataset, SyncSample};
use crate::encoders::{AvsModel, ForwardOptions, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{cross_entropy_logits, OptimizerConfig, OptimizerState, ParamStore};
use crate::ops::softmax_rows;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// What a training or evaluation run predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Synchronized (1) or shifted (0).
    Sync,
    /// `meta.class` of each sample.
    Class,
}

fn labels(samples: &[&SyncSample], target: Target) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match target {
            Target::Sync => Ok(s.label),
            Target::Class => s
                .meta
                .class
                .ok_or_else(|| Error::InvalidArgument("sample has no class label".into())),
        })
        .collect()
}

fn make_batch(ds: &Dataset, idx: &[usize], target: Target) -> Result<Batch> {
    let samples: Vec<&SyncSample> = idx.iter().map(|&i| &ds.samples[i]).collect();
    let mut b = Batch::from_samples(&ds.geometry, samples.iter().copied());
    b.labels = labels(&samples, target)?;
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Evaluate every this many steps (and after the last one).
    pub eval_every: usize,
    /// Stop once training accuracy at an evaluation reaches this value.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
    /// Measure accuracy on the whole training set at each evaluation.
    #[serde(default = "yes")]
    pub eval_train: bool,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// SGD momentum 0.9, lr 0.01, weight decay 1e-5, batch 8.
    pub fn pretext() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            optimizer: OptimizerConfig::sgd(0.01, 0.9, 1e-5),
            eval_every: 100,
            stop_at_train_accuracy: None,
            eval_train: true,
        }
    }

    /// Adam 3e-4 halved every 1000 steps.
    pub fn finetune() -> Self {
        let mut optimizer = OptimizerConfig::adam(3e-4);
        optimizer.halve_every = Some(1000);
        TrainConfig {
            steps: 600,
            batch_size: 8,
            optimizer,
            eval_every: 100,
            stop_at_train_accuracy: None,
            eval_train: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    pub seconds: f64,
    pub checkpoint: Option<PathBuf>,
    pub config_hash: String,
    pub seed: u64,
    pub best_val_accuracy: Option<f64>,
    pub final_train_accuracy: Option<f64>,
}

impl TrainReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Shared loop: minibatch cross-entropy, periodic evaluation, best-val
/// selection. On return `model` holds the best-validation parameters (the
/// final ones without a validation set), which are also written to
/// `checkpoint` when given.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &mut AvsModel,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    target: Target,
    vision_only: bool,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.geometry != model.config.encoder.clip {
        return Err(Error::ConfigMismatch("dataset geometry differs from model clip geometry".into()));
    }
    let start = Instant::now();
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 3));
    let batch_size = cfg.batch_size.min(train.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut curve = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut final_train = None;
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let eval_every = cfg.eval_every.max(1);

    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = batch_iter(train.len(), batch_size, seed, epoch, true)?;
            queue.reverse();
            epoch += 1;
        }
        let idx = queue.pop().expect("epoch has batches");
        let batch = make_batch(train, &idx, target)?;
        let tape = Tape::new();
        let b = model.params.bind(&tape, true);
        let a = tape.constant(batch.audio);
        let f = tape.constant(batch.frames);
        let opts = ForwardOptions {
            train: true,
            record: false,
        };
        let out = model.forward(&b, (!vision_only).then_some(&a), &f, opts, &mut rng)?;
        let loss = cross_entropy_logits(&out.logits, &batch.labels)?;
        let l = loss.item();
        if !l.is_finite() {
            return Err(Error::DivergenceDetected(step));
        }
        losses.push(l);
        loss.backward()?;
        opt.step(&mut model.params, &b.grads())?;

        let done = step + 1 == cfg.steps;
        if (step + 1) % eval_every == 0 || done {
            let train_acc = if cfg.eval_train {
                Some(evaluate(model, train, target, vision_only)?)
            } else {
                None
            };
            let val_acc = val.map(|v| evaluate(model, v, target, vision_only)).transpose()?;
            if let Some(acc) = val_acc {
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, model.params.clone()));
                }
            }
            final_train = train_acc;
            curve.push(CurvePoint {
                step: step + 1,
                train_accuracy: train_acc,
                val_accuracy: val_acc,
            });
            if let (Some(goal), Some(acc)) = (cfg.stop_at_train_accuracy, train_acc) {
                if acc >= goal {
                    break;
                }
            }
        }
    }
    let best_val_accuracy = best.as_ref().map(|(a, _)| *a);
    if let Some((_, params)) = best {
        model.params = params;
    }
    if let Some(path) = checkpoint {
        model.save(path)?;
    }
    Ok(TrainReport {
        steps: losses.len(),
        losses,
        curve,
        seconds: start.elapsed().as_secs_f64(),
        checkpoint: checkpoint.map(Path::to_path_buf),
        config_hash: model.config.hash(),
        seed,
        best_val_accuracy,
        final_train_accuracy: final_train,
    })
}

/// Trains a fresh model (initialised from `seed`) on synchronization labels.
pub fn train_pretext(
    train: &Dataset,
    val: Option<&Dataset>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(AvsModel, TrainReport)> {
    let mut model = AvsModel::new(model_cfg.clone(), seed)?;
    let report = train_loop(&mut model, train, val, cfg, Target::Sync, false, seed, checkpoint)?;
    Ok((model, report))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of argmax predictions from a `[N, C]` logit table.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err!("logits {:?} for {} labels", s, labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = logits
        .data()
        .chunks(s[1])
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

const EVAL_BATCH: usize = 32;

/// Eval-mode logits for every sample, in order.
pub fn predict_logits(model: &AvsModel, ds: &Dataset, vision_only: bool) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut classes = model.config.head.classes;
    for idx in batch_iter(ds.len(), EVAL_BATCH, 0, 0, false)? {
        let batch = ds.batch(&idx);
        let l = model.logits((!vision_only).then_some(&batch.audio), &batch.frames)?;
        classes = l.shape()[1];
        data.extend_from_slice(l.data());
    }
    Tensor::new([ds.len(), classes], data)
}

pub fn evaluate(model: &AvsModel, ds: &Dataset, target: Target, vision_only: bool) -> Result<f64> {
    let logits = predict_logits(model, ds, vision_only)?;
    let refs: Vec<&SyncSample> = ds.samples.iter().collect();
    accuracy_from_logits(&logits, &labels(&refs, target)?)
}

/// Synchronization accuracy in eval mode.
pub fn evaluate_sync(ds: &Dataset, model: &AvsModel) -> Result<f64> {
    evaluate(model, ds, Target::Sync, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapSource {
    Cam,
    Attention { layer: usize, head: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub source: HeatmapSource,
    /// Raw nonnegative scores `[H', W']`.
    pub grid: Tensor,
    /// Bilinear upsampling to `[H, W]`, min-max normalized.
    pub upsampled: Tensor,
}

impl Heatmap {
    fn build(source: HeatmapSource, grid: Tensor, height: usize, width: usize) -> Heatmap {
        let upsampled = normalize(&bilinear(&grid, height, width));
        Heatmap {
            source,
            grid,
            upsampled,
        }
    }

    /// `(row, col)` of the largest upsampled value, first in raster order.
    pub fn peak_pixel(&self) -> (usize, usize) {
        let w = self.upsampled.shape()[1];
        let i = argmax(self.upsampled.data());
        (i / w, i % w)
    }

    /// Source-grid cell holding the peak for a `cells × cells` layout.
    pub fn peak_cell(&self, cells: usize) -> [usize; 2] {
        let (h, w) = (self.upsampled.shape()[0], self.upsampled.shape()[1]);
        let (y, x) = self.peak_pixel();
        [y * cells / h, x * cells / w]
    }
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn bilinear(grid: &Tensor, height: usize, width: usize) -> Tensor {
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let g = grid.data();
    let coord = |i: usize, out: usize, src: usize| {
        let c = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(src - 1), c - lo as f64)
    };
    Tensor::from_fn([height, width], |i| {
        let (y0, y1, fy) = coord(i / width, height, gh);
        let (x0, x1, fx) = coord(i % width, width, gw);
        let top = g[y0 * gw + x0] * (1.0 - fx) + g[y0 * gw + x1] * fx;
        let bottom = g[y1 * gw + x0] * (1.0 - fx) + g[y1 * gw + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(t: &Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Tensor::zeros(t.shape().to_vec());
    }
    Tensor::from_fn(t.shape().to_vec(), |i| (t.data()[i] - lo) / span)
}

fn single(sample: &SyncSample, geom: &ClipGeometry) -> Batch {
    Batch::from_samples(geom, std::iter::once(sample))
}

/// Class activation map for the "synchronized" logit at `frame_index`.
///
/// The head is linearised at this sample's relu pattern, which is exact for
/// a piecewise-linear head: `w = W1[visual slot] · (mask ∘ W2[:, 1])`.
/// Each post-attention visual token at the grid time covering the frame then
/// scores `relu(w · h)`.
pub fn cam_heatmap(model: &AvsModel, sample: &SyncSample, frame_index: usize) -> Result<Heatmap> {
    let cfg = &model.config;
    if !cfg.head.gap {
        return Err(Error::NoGapPathway);
    }
    let geom = cfg.encoder.clip;
    if frame_index >= geom.frames {
        return Err(Error::InvalidArgument(format!(
            "frame {frame_index} of a {}-frame clip",
            geom.frames
        )));
    }
    let batch = single(sample, &geom);
    let tape = Tape::new();
    let b = model.params.bind(&tape, false);
    let a = tape.constant(batch.audio);
    let f = tape.constant(batch.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&b, Some(&a), &f, ForwardOptions::default(), &mut rng)?;
    let d = cfg.d();
    let hidden = out.hidden.value();
    let (w1, w2) = model.head_weights();
    let (nh, nc) = (cfg.head.hidden, cfg.head.classes);
    let pos = 1.min(nc - 1);
    let w: Vec<f64> = (0..d)
        .map(|c| {
            (0..nh)
                .filter(|&j| hidden[j] > 0.0)
                .map(|j| w1.data()[(d + c) * nh + j] * w2.data()[j * nc + pos])
                .sum()
        })
        .collect();
    let [gt, gh, gw] = out.grid;
    let t = frame_index * gt / geom.frames;
    let tokens = out.visual_tokens.value();
    let grid = Tensor::from_fn([gh, gw], |i| {
        let tok = &tokens[(t * gh * gw + i) * d..][..d];
        tok.iter().zip(&w).map(|(h, wc)| h * wc).sum::<f64>().max(0.0)
    });
    Ok(Heatmap::build(HeatmapSource::Cam, grid, geom.height, geom.width))
}

/// Spatial attention maps from the audio-query direction of `layer`.
///
/// Weights over visual keys are averaged across audio queries and summed
/// over grid time, so each raw grid is a distribution over `H'×W'`.
/// `head: None` returns one map per head.
pub fn attention_heatmaps(model: &AvsModel, sample: &SyncSample, layer: usize, head: Option<usize>) -> Result<Vec<Heatmap>> {
    let geom = model.config.encoder.clip;
    let batch = single(sample, &geom);
    let tape = Tape::new();
    let b = model.params.bind(&tape, false);
    let a = tape.constant(batch.audio);
    let f = tape.constant(batch.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = ForwardOptions {
        train: false,
        record: true,
    };
    let out = model.forward(&b, Some(&a), &f, opts, &mut rng)?;
    let rec = out
        .records
        .iter()
        .find(|r| r.layer == layer && r.stage == Stage::AudioQuery)
        .ok_or(Error::NoAttentionRecord)?;
    let s = rec.weights.shape();
    let (m, nq, nk) = (s[0], s[2], s[3]);
    let [gt, gh, gw] = out.grid;
    if nk != gt * gh * gw {
        return Err(shape_err!("{nk} visual keys for grid {:?}", out.grid));
    }
    let heads: Vec<usize> = match head {
        Some(h) if h >= m => {
            return Err(Error::InvalidArgument(format!("head {h} of {m}")));
        }
        Some(h) => vec![h],
        None => (0..m).collect(),
    };
    let w = rec.weights.data();
    Ok(heads
        .into_iter()
        .map(|h| {
            let base = h * nq * nk;
            let mut grid = vec![0.0; gh * gw];
            for q in 0..nq {
                for k in 0..nk {
                    grid[k % (gh * gw)] += w[base + q * nk + k] / nq as f64;
                }
            }
            let grid = Tensor::new([gh, gw], grid).expect("grid size");
            Heatmap::build(HeatmapSource::Attention { layer, head: h }, grid, geom.height, geom.width)
        })
        .collect())
}

/// Pointing-game hit: `peak` within the 3×3 cell neighbourhood of `truth`.
pub fn pointing_hit(peak: [usize; 2], truth: [usize; 2]) -> bool {
    peak[0].abs_diff(truth[0]) <= 1 && peak[1].abs_diff(truth[1]) <= 1
}

/// Distinct true cells claimed by a set of peaks. Each peak goes to the
/// nearest true cell (squared cell distance, ties to the earlier cell)
/// inside its neighbourhood.
pub fn covered_cells(peaks: &[[usize; 2]], truths: &[[usize; 2]]) -> usize {
    let mut hit = vec![false; truths.len()];
    for p in peaks {
        let nearest = truths
            .iter()
            .enumerate()
            .filter(|(_, t)| pointing_hit(*p, **t))
            .min_by_key(|(_, t)| {
                let dy = p[0].abs_diff(t[0]);
                let dx = p[1].abs_diff(t[1]);
                dy * dy + dx * dx
            });
        if let Some((i, _)) = nearest {
            hit[i] = true;
        }
    }
    hit.iter().filter(|&&h| h).count()
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "{magic}\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PGM of a 2D map, min-max normalized.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(shape_err!("PGM needs a 2D map, got {:?}", s));
    }
    let bytes: Vec<u8> = normalize(map).data().iter().map(|&v| to_byte(v)).collect();
    write_netpbm(path, "P5", s[1], s[0], &bytes)
}

/// Binary PPM of `frame` (`[H, W, 3]` in `[0, 1]`) with the heatmap blended
/// in at alpha 0.5 (red for high, blue for low).
pub fn write_overlay_ppm(path: &Path, frame: &[f32], heat: &Tensor) -> Result<()> {
    let (h, w) = (heat.shape()[0], heat.shape()[1]);
    if frame.len() != h * w * 3 {
        return Err(shape_err!("frame of {} values for a {}×{} heatmap", frame.len(), h, w));
    }
    let mut bytes = Vec::with_capacity(h * w * 3);
    for (i, &v) in heat.data().iter().enumerate() {
        let color = [v, 0.0, 1.0 - v];
        for c in 0..3 {
            bytes.push(to_byte(0.5 * frame[i * 3 + c] as f64 + 0.5 * color[c]));
        }
    }
    write_netpbm(path, "P6", w, h, &bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init<'a> {
    Scratch,
    /// Pretext checkpoint; its config must equal the target config with a
    /// two-class head.
    Pretrained(&'a Path),
}

/// Fine-tunes on class labels with a fresh `n_classes` head (dropout 0.5).
/// With `vision_only` the audio tokens are zeroed.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classifier(
    train: &Dataset,
    test: Option<&Dataset>,
    backbone: &ModelConfig,
    init: Init<'_>,
    n_classes: usize,
    cfg: &TrainConfig,
    vision_only: bool,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(AvsModel, TrainReport)> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!("{n_classes} classes; at least 2 required")));
    }
    let mut model_cfg = backbone.clone();
    model_cfg.head.classes = n_classes;
    model_cfg.head.dropout = 0.5;
    let mut model = AvsModel::new(model_cfg, seed)?;
    if let Init::Pretrained(path) = init {
        let mut pre_cfg = backbone.clone();
        pre_cfg.head.classes = 2;
        let (store, manifest) = ParamStore::load(path)?;
        if manifest.config_hash != pre_cfg.hash() {
            return Err(Error::ConfigHashMismatch {
                expected: pre_cfg.hash(),
                found: manifest.config_hash,
            });
        }
        let mut backbone_only = ParamStore::new();
        for p in store.params().iter().filter(|p| !p.name.starts_with("head.")) {
            backbone_only.add(p.name.clone(), p.value.clone(), p.decay)?;
        }
        model.params.load_matching(&backbone_only);
    }
    let report = train_loop(&mut model, train, test, cfg, Target::Class, vision_only, seed, checkpoint)?;
    Ok((model, report))
}

/// Start offsets `round(i·slack/(n−1))`; a single offset when `slack == 0`.
pub fn subclip_offsets(slack: usize, n: usize) -> Vec<usize> {
    if slack == 0 || n <= 1 {
        return vec![0];
    }
    (0..n)
        .map(|i| ((i * slack) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Video-level class probabilities: mean softmax over `n_subclips` equally
/// spaced subclips. `audio` is `[S_long, 2]`, `frames` `[t_long, H, W, 3]`.
pub fn predict_video(model: &AvsModel, audio: &Tensor, frames: &Tensor, n_subclips: usize) -> Result<Vec<f64>> {
    let g = model.config.encoder.clip;
    let (fs, as_) = (frames.shape(), audio.shape());
    if fs.len() != 4 || fs[1..] != [g.height, g.width, g.visual_channels] {
        return Err(shape_err!("long frames {:?}", fs));
    }
    if fs[0] < g.frames {
        return Err(Error::TooShort(format!("{} frames, one subclip needs {}", fs[0], g.frames)));
    }
    let per_frame = g.audio_samples / g.frames;
    if as_.len() != 2 || as_[1] != g.audio_channels || as_[0] != fs[0] * per_frame {
        return Err(shape_err!("long audio {:?} for {} frames", as_, fs[0]));
    }
    let offsets = subclip_offsets(fs[0] - g.frames, n_subclips);
    let frame_len = g.height * g.width * g.visual_channels;
    let mut fdata = Vec::with_capacity(offsets.len() * g.frames_len());
    let mut adata = Vec::with_capacity(offsets.len() * g.audio_len());
    for &o in &offsets {
        fdata.extend_from_slice(&frames.data()[o * frame_len..(o + g.frames) * frame_len]);
        let a0 = o * per_frame * g.audio_channels;
        adata.extend_from_slice(&audio.data()[a0..a0 + g.audio_len()]);
    }
    let n = offsets.len();
    let f = Tensor::new([n, g.frames, g.height, g.width, g.visual_channels], fdata)?;
    let a = Tensor::new([n, g.audio_samples, g.audio_channels], adata)?;
    let logits = model.logits(Some(&a), &f)?;
    let c = logits.shape()[1];
    let probs = softmax_rows(logits.data(), c);
    Ok((0..c)
        .map(|k| probs.iter().skip(k).step_by(c).sum::<f64>() / n as f64)
        .collect())
}
