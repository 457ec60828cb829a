//! Audio and visual encoders, the fusion head and the assembled model.
//!
//! Both encoders keep a token sequence: the audio stack collapses a stereo
//! waveform into `T_a` temporal tokens, the visual stack turns a clip into a
//! `(T', H', W')` grid flattened into `T_v` tokens. Each token is projected to
//! the shared width `d` and receives a sinusoidal position code before the
//! co-attention stack.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{co_attention_stack, AttentionRecord, CoAttentionConfig, CoAttentionParams, Variant};
use crate::data::ClipGeometry;
use crate::error::{shape_err, Error, Result};
use crate::nn::params::{he_normal, xavier_uniform, Bound, ParamId, ParamStore};
use crate::nn::{avgpool3d, conv3d, dropout, linear, Conv3dSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

/// One stage of an encoder stack. Convolutions are followed by relu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderLayer {
    Conv(Conv3dSpec),
    Pool(PoolSpec),
}

fn conv(out: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> EncoderLayer {
    EncoderLayer::Conv(Conv3dSpec::new(out, kernel, stride, padding))
}

/// 1D audio convolution over the reshaped waveform.
fn conv1(out: usize, k: usize, s: usize, p: usize) -> EncoderLayer {
    conv(out, [k, 1, 1], [s, 1, 1], [p, 0, 0])
}

fn pool(window: [usize; 3], stride: [usize; 3]) -> EncoderLayer {
    EncoderLayer::Pool(PoolSpec { window, stride })
}

/// Spatio-temporal extent and channel count after a layer list.
pub fn stack_output(input: [usize; 3], channels: usize, layers: &[EncoderLayer]) -> Result<([usize; 3], usize)> {
    let (mut dims, mut c) = (input, channels);
    for l in layers {
        match l {
            EncoderLayer::Conv(s) => {
                dims = s.output_dims(dims)?;
                c = s.out_channels;
            }
            EncoderLayer::Pool(p) => {
                let s = Conv3dSpec::new(c, p.window, p.stride, [0; 3]);
                dims = s.output_dims(dims)?;
            }
        }
    }
    Ok((dims, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub scale: Scale,
    pub clip: ClipGeometry,
    pub audio_layers: Vec<EncoderLayer>,
    pub visual_layers: Vec<EncoderLayer>,
    pub positional: Positional,
}

impl EncoderConfig {
    /// 8×32×32 RGB frames and 4096 stereo samples per clip.
    pub fn desk() -> Self {
        EncoderConfig {
            scale: Scale::Desk,
            clip: ClipGeometry::desk(),
            audio_layers: vec![
                conv1(16, 9, 4, 4),
                pool([4, 1, 1], [4, 1, 1]),
                conv1(32, 5, 2, 2),
                conv1(32, 5, 2, 2),
                conv1(64, 3, 2, 1),
            ],
            visual_layers: vec![
                conv(16, [3, 5, 5], [1, 2, 2], [1, 2, 2]),
                pool([1, 2, 2], [1, 2, 2]),
                conv(32, [3, 3, 3], [2, 2, 2], [1, 1, 1]),
                conv(32, [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ],
            positional: Positional::Sinusoidal,
        }
    }

    /// 224×224 crops, 4.2 s at 21 kHz. Constructible for shape arithmetic.
    pub fn paper() -> Self {
        EncoderConfig {
            scale: Scale::Paper,
            clip: ClipGeometry {
                frames: 125,
                height: 224,
                width: 224,
                audio_samples: 88_200,
                audio_channels: 2,
                visual_channels: 3,
            },
            audio_layers: vec![
                conv1(64, 65, 4, 32),
                pool([4, 1, 1], [4, 1, 1]),
                conv1(128, 15, 4, 7),
                conv1(128, 15, 1, 7),
                conv1(128, 15, 4, 7),
                conv1(128, 15, 1, 7),
                conv1(256, 15, 4, 7),
                conv1(256, 15, 1, 7),
                pool([3, 1, 1], [3, 1, 1]),
                conv1(128, 3, 1, 1),
            ],
            visual_layers: vec![
                conv(64, [5, 7, 7], [1, 1, 1], [2, 3, 3]),
                pool([1, 3, 3], [1, 2, 2]),
                conv(64, [3, 3, 3], [2, 2, 2], [1, 1, 1]),
                conv(64, [3, 3, 3], [2, 2, 2], [1, 1, 1]),
                conv(64, [3, 3, 3], [2, 2, 2], [1, 1, 1]),
                conv(64, [3, 3, 3], [2, 2, 2], [1, 1, 1]),
            ],
            positional: Positional::Sinusoidal,
        }
    }

    /// Three tokens per stream; used by gradient checks.
    pub fn micro() -> Self {
        EncoderConfig {
            scale: Scale::Micro,
            clip: ClipGeometry {
                frames: 3,
                height: 4,
                width: 4,
                audio_samples: 12,
                audio_channels: 2,
                visual_channels: 3,
            },
            audio_layers: vec![conv1(4, 3, 2, 1), pool([2, 1, 1], [2, 1, 1])],
            visual_layers: vec![conv(4, [1, 2, 2], [1, 1, 1], [0, 0, 0]), pool([1, 3, 3], [1, 1, 1])],
            positional: Positional::Sinusoidal,
        }
    }

    /// `(T_a, channels)` after the audio stack.
    pub fn audio_grid(&self) -> Result<(usize, usize)> {
        let (dims, c) = stack_output([self.clip.audio_samples, 1, 1], self.clip.audio_channels, &self.audio_layers)?;
        if dims[1] != 1 || dims[2] != 1 {
            return Err(Error::ConfigMismatch("audio layers must keep unit spatial extent".into()));
        }
        Ok((dims[0], c))
    }

    /// `((T', H', W'), channels)` after the visual stack.
    pub fn visual_grid(&self) -> Result<([usize; 3], usize)> {
        let g = &self.clip;
        stack_output([g.frames, g.height, g.width], g.visual_channels, &self.visual_layers)
    }

    pub fn audio_tokens(&self) -> Result<usize> {
        Ok(self.audio_grid()?.0)
    }

    pub fn visual_tokens(&self) -> Result<usize> {
        let ([t, h, w], _) = self.visual_grid()?;
        Ok(t * h * w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
    /// Pool each stream over its tokens before the head. Without it the
    /// token sequences are flattened, which disables CAM.
    #[serde(default = "yes")]
    pub gap: bool,
    #[serde(default = "two_classes")]
    pub classes: usize,
}

fn yes() -> bool {
    true
}
fn two_classes() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: CoAttentionConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// d=64, m=4, L=1, ffn=128.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            attention: CoAttentionConfig::new(64, 4, 1, variant),
            head: HeadConfig {
                hidden: 64,
                dropout: 0.1,
                gap: true,
                classes: 2,
            },
        }
    }

    pub fn paper(variant: Variant) -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper(),
            attention: CoAttentionConfig::new(512, 8, 1, variant),
            head: HeadConfig {
                hidden: 512,
                dropout: 0.5,
                gap: true,
                classes: 2,
            },
        }
    }

    /// d=8, m=2, three tokens per stream.
    pub fn micro(variant: Variant) -> Self {
        ModelConfig {
            encoder: EncoderConfig::micro(),
            attention: CoAttentionConfig::new(8, 2, 1, variant),
            head: HeadConfig {
                hidden: 6,
                dropout: 0.0,
                gap: true,
                classes: 2,
            },
        }
    }

    pub fn d(&self) -> usize {
        self.attention.d
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.encoder.audio_grid()?;
        self.encoder.visual_grid()?;
        if self.head.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "{} classes; at least 2 required",
                self.head.classes
            )));
        }
        if self.head.hidden == 0 {
            return Err(Error::ConfigMismatch("head hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return Err(Error::InvalidProbability(self.head.dropout));
        }
        Ok(())
    }

    /// SHA-256 over the architecture (dropout excluded), hex encoded.
    pub fn hash(&self) -> String {
        let mut arch = self.clone();
        arch.head.dropout = 0.0;
        let json = serde_json::to_vec(&arch).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sinusoidal codes of width `d` for tokens at clip-relative times and,
/// optionally, frame-relative (row, col) positions.
///
/// The first `2·⌊d/4⌋` channels hold (sin, cos) time pairs at frequencies
/// from 0.5 to 16 cycles per clip. The rest split evenly into row and column
/// pairs (0.5 to 2 cycles per frame); audio tokens leave them at zero, so
/// both streams share one time code.
pub fn positional_encoding(d: usize, times: &[f64], spatial: Option<&[(f64, f64)]>) -> Vec<f64> {
    let tp = d / 4;
    let sp = (d - 2 * tp) / 4;
    let freq = |j: usize, n: usize, top: f64| {
        if n <= 1 {
            0.5
        } else {
            0.5 * (top / 0.5f64).powf(j as f64 / (n - 1) as f64)
        }
    };
    let mut out = vec![0.0; times.len() * d];
    for (i, &tau) in times.iter().enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        for j in 0..tp {
            let a = 2.0 * PI * freq(j, tp, 16.0) * tau;
            row[2 * j] = a.sin();
            row[2 * j + 1] = a.cos();
        }
        if let Some(sp_pos) = spatial {
            let (y, x) = sp_pos[i];
            for j in 0..sp {
                let f = freq(j, sp, 2.0);
                let (ay, ax) = (2.0 * PI * f * y, 2.0 * PI * f * x);
                let r = 2 * tp + 2 * j;
                let c = 2 * tp + 2 * sp + 2 * j;
                row[r] = ay.sin();
                row[r + 1] = ay.cos();
                row[c] = ax.sin();
                row[c + 1] = ax.cos();
            }
        }
    }
    out
}

fn audio_positions(d: usize, n: usize) -> Vec<f64> {
    let times: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    positional_encoding(d, &times, None)
}

fn visual_positions(d: usize, [t, h, w]: [usize; 3]) -> Vec<f64> {
    let mut times = Vec::with_capacity(t * h * w);
    let mut spatial = Vec::with_capacity(t * h * w);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                times.push((ti as f64 + 0.5) / t as f64);
                spatial.push(((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64));
            }
        }
    }
    positional_encoding(d, &times, Some(&spatial))
}

/// Adds a `[n, d]` code to every batch element of `[B, n, d]` tokens.
fn add_positions<'t>(tokens: Var<'t>, code: &[f64]) -> Result<Var<'t>> {
    let shape = tokens.shape();
    let per = code.len();
    let tiled: Vec<f64> = (0..shape[0]).flat_map(|_| code.iter().copied()).collect();
    if per * shape[0] != tokens.numel() {
        return Err(shape_err!("position code of {per} values for tokens {:?}", shape));
    }
    let pe = tokens.tape().constant(Tensor::new(shape, tiled)?);
    tokens.add(&pe)
}

#[derive(Debug, Clone, Copy)]
enum LayerParams {
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: [usize; 3],
        padding: [usize; 3],
    },
    Pool(PoolSpec),
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    layers: Vec<LayerParams>,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl EncoderParams {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        layers: &[EncoderLayer],
        in_channels: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut c = in_channels;
        let mut out = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            match l {
                EncoderLayer::Conv(s) => {
                    let shape = s.weight_shape(c);
                    let fan_in = shape[..4].iter().product();
                    let weight = store.add(format!("{prefix}.conv{i}.weight"), he_normal(&shape, fan_in, rng), true)?;
                    let bias = if s.bias {
                        Some(store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros([s.out_channels]), false)?)
                    } else {
                        None
                    };
                    out.push(LayerParams::Conv {
                        weight,
                        bias,
                        stride: s.stride,
                        padding: s.padding,
                    });
                    c = s.out_channels;
                }
                EncoderLayer::Pool(p) => out.push(LayerParams::Pool(*p)),
            }
        }
        let proj_w = store.add(format!("{prefix}.proj.weight"), xavier_uniform(&[c, d], c, d, rng), true)?;
        let proj_b = store.add(format!("{prefix}.proj.bias"), Tensor::zeros([d]), false)?;
        Ok(EncoderParams {
            layers: out,
            proj_w,
            proj_b,
        })
    }

    /// Conv/pool stack on `[B, T, H, W, C]`.
    fn stack<'t>(&self, x: Var<'t>, b: &Bound<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for l in &self.layers {
            h = match *l {
                LayerParams::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let bias = bias.map(|id| b.get(id));
                    conv3d(&h, &b.get(weight), bias.as_ref(), stride, padding)?.relu()
                }
                LayerParams::Pool(p) => avgpool3d(&h, p.window, p.stride)?,
            };
        }
        Ok(h)
    }

    fn project<'t>(&self, tokens: &Var<'t>, b: &Bound<'t>) -> Result<Var<'t>> {
        linear(tokens, &b.get(self.proj_w), Some(&b.get(self.proj_b)))
    }
}

/// `[B, S, 2]` waveform to `[B, T_a, d]` tokens.
pub fn audio_encode<'t>(waveform: &Var<'t>, cfg: &EncoderConfig, p: &EncoderParams, b: &Bound<'t>, d: usize) -> Result<Var<'t>> {
    let s = waveform.shape();
    let g = &cfg.clip;
    if s.len() != 3 || s[1] != g.audio_samples || s[2] != g.audio_channels {
        return Err(shape_err!(
            "audio {:?}, expected [B, {}, {}]",
            s,
            g.audio_samples,
            g.audio_channels
        ));
    }
    let x = waveform.reshape(&[s[0], s[1], 1, 1, s[2]])?;
    let h = p.stack(x, b)?;
    let hs = h.shape();
    let tokens = p.project(&h.reshape(&[hs[0], hs[1], hs[4]])?, b)?;
    match cfg.positional {
        Positional::Sinusoidal => add_positions(tokens, &audio_positions(d, hs[1])),
        Positional::None => Ok(tokens),
    }
}

/// `[B, t, H, W, 3]` frames to `[B, T'·H'·W', d]` tokens and the grid.
pub fn visual_encode<'t>(
    frames: &Var<'t>,
    cfg: &EncoderConfig,
    p: &EncoderParams,
    b: &Bound<'t>,
    d: usize,
) -> Result<(Var<'t>, [usize; 3])> {
    let s = frames.shape();
    let g = &cfg.clip;
    if s[..] != [s.first().copied().unwrap_or(0), g.frames, g.height, g.width, g.visual_channels] {
        return Err(shape_err!(
            "frames {:?}, expected [B, {}, {}, {}, {}]",
            s,
            g.frames,
            g.height,
            g.width,
            g.visual_channels
        ));
    }
    let h = p.stack(*frames, b)?;
    let hs = h.shape();
    let grid = [hs[1], hs[2], hs[3]];
    let tokens = p.project(&h.reshape(&[hs[0], hs[1] * hs[2] * hs[3], hs[4]])?, b)?;
    let tokens = match cfg.positional {
        Positional::Sinusoidal => add_positions(tokens, &visual_positions(d, grid))?,
        Positional::None => tokens,
    };
    Ok((tokens, grid))
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl HeadParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, c) = (cfg.hidden, cfg.classes);
        Ok(HeadParams {
            fc1_w: store.add(format!("{prefix}.fc1.weight"), he_normal(&[input, h], input, rng), true)?,
            fc1_b: store.add(format!("{prefix}.fc1.bias"), Tensor::zeros([h]), false)?,
            fc2_w: store.add(format!("{prefix}.fc2.weight"), xavier_uniform(&[h, c], h, c, rng), true)?,
            fc2_b: store.add(format!("{prefix}.fc2.bias"), Tensor::zeros([c]), false)?,
        })
    }
}

/// Head output plus the first layer's pre-activation (for CAM).
pub struct HeadOutput<'t> {
    pub logits: Var<'t>,
    pub hidden: Var<'t>,
}

/// Pools (or flattens) both streams, concatenates and applies
/// `fc → relu → dropout → fc`.
pub fn fusion_head<'t, R: Rng + ?Sized>(
    audio: &Var<'t>,
    visual: &Var<'t>,
    p: &HeadParams,
    cfg: &HeadConfig,
    b: &Bound<'t>,
    train: bool,
    rng: &mut R,
) -> Result<HeadOutput<'t>> {
    let (a, v) = if cfg.gap {
        (audio.mean(1)?, visual.mean(1)?)
    } else {
        (audio.flatten_from(1)?, visual.flatten_from(1)?)
    };
    let z = Var::concat(&[a, v], 1)?;
    let hidden = linear(&z, &b.get(p.fc1_w), Some(&b.get(p.fc1_b)))?;
    let h = dropout(&hidden.relu(), cfg.dropout, train, rng)?;
    let logits = linear(&h, &b.get(p.fc2_w), Some(&b.get(p.fc2_b)))?;
    Ok(HeadOutput { logits, hidden })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    pub train: bool,
    /// Copy attention weights out of the stack.
    pub record: bool,
}

pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// Attended audio tokens `[B, T_a, d]`.
    pub audio_tokens: Var<'t>,
    /// Attended visual tokens `[B, T_v, d]`.
    pub visual_tokens: Var<'t>,
    /// First head layer before relu.
    pub hidden: Var<'t>,
    pub records: Vec<AttentionRecord>,
    pub grid: [usize; 3],
}

/// Parameters and wiring of the full synchronization network.
#[derive(Debug, Clone)]
pub struct AvsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    audio: EncoderParams,
    visual: EncoderParams,
    stack: CoAttentionParams,
    head: HeadParams,
}

impl AvsModel {
    /// Fresh model with seeded initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d();
        let enc = &config.encoder;
        let audio = EncoderParams::register(&mut store, "audio", &enc.audio_layers, enc.clip.audio_channels, d, &mut rng)?;
        let visual = EncoderParams::register(&mut store, "visual", &enc.visual_layers, enc.clip.visual_channels, d, &mut rng)?;
        let stack = CoAttentionParams::register(&mut store, "coattn", &config.attention, &mut rng)?;
        let head_in = if config.head.gap {
            2 * d
        } else {
            (enc.audio_tokens()? + enc.visual_tokens()?) * d
        };
        let head = HeadParams::register(&mut store, "head", head_in, &config.head, &mut rng)?;
        Ok(AvsModel {
            config,
            params: store,
            audio,
            visual,
            stack,
            head,
        })
    }

    /// Rebuilds a model around stored parameter values; names and shapes
    /// must match the config exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = AvsModel::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} stored parameters, config defines {}",
                params.len(),
                model.params.len()
            )));
        }
        if model.params.load_matching(&params) != model.params.len() {
            return Err(Error::ConfigMismatch("stored parameter names or shapes differ from config".into()));
        }
        Ok(model)
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.head
    }

    pub fn head_weights(&self) -> (&Tensor, &Tensor) {
        (self.params.get(self.head.fc1_w), self.params.get(self.head.fc2_w))
    }

    /// Scalars in the co-attention stack.
    pub fn stack_param_count(&self) -> usize {
        self.params.count("coattn.")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_value(&self.config)?;
        self.params.save_with_config(path, &self.config.hash(), Some(json))
    }

    /// Loads a checkpoint using the config embedded in it.
    pub fn load(path: &Path) -> Result<Self> {
        let (store, manifest) = ParamStore::load(path)?;
        let json = manifest
            .config
            .ok_or_else(|| Error::CorruptFile("checkpoint has no embedded config".into()))?;
        let config: ModelConfig = serde_json::from_value(json)?;
        if config.hash() != manifest.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: config.hash(),
                found: manifest.config_hash,
            });
        }
        AvsModel::from_params(config, store)
    }

    /// Loads a checkpoint that must have been written for `config`.
    pub fn load_expecting(path: &Path, config: &ModelConfig) -> Result<Self> {
        let (store, manifest) = ParamStore::load(path)?;
        if config.hash() != manifest.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: config.hash(),
                found: manifest.config_hash,
            });
        }
        AvsModel::from_params(config.clone(), store)
    }

    /// Full forward pass. `audio: None` feeds all-zero audio tokens, which
    /// reduces the cross stage to attention over an empty signal.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        b: &Bound<'t>,
        audio: Option<&Var<'t>>,
        frames: &Var<'t>,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Forward<'t>> {
        let d = self.config.d();
        let enc = &self.config.encoder;
        let (hv, grid) = visual_encode(frames, enc, &self.visual, b, d)?;
        let batch = frames.shape()[0];
        let ha = match audio {
            Some(a) => {
                if a.shape().first() != Some(&batch) {
                    return Err(shape_err!("audio batch {:?} vs frames batch {batch}", a.shape()));
                }
                audio_encode(a, enc, &self.audio, b, d)?
            }
            None => frames.tape().constant(Tensor::zeros([batch, enc.audio_tokens()?, d])),
        };
        let (ha, hv, records) = co_attention_stack(&ha, &hv, &self.config.attention, &self.stack, b, opts.record)?;
        let out = fusion_head(&ha, &hv, &self.head, &self.config.head, b, opts.train, rng)?;
        Ok(Forward {
            logits: out.logits,
            audio_tokens: ha,
            visual_tokens: hv,
            hidden: out.hidden,
            records,
            grid,
        })
    }

    /// Eval-mode logits `[B, classes]` without gradient bookkeeping.
    pub fn logits(&self, audio: Option<&Tensor>, frames: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, false);
        let a = audio.map(|a| tape.constant(a.clone()));
        let f = tape.constant(frames.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&b, a.as_ref(), &f, ForwardOptions::default(), &mut rng)?;
        Ok(out.logits.to_tensor())
    }
}
