//! Synthetic audio-visual worlds and synchronization pairs.
//!
//! A world is a timeline of sound events, each tied to a fixed cell of the
//! frame and a per-source tone. A clip spans one clip-unit of time: `frames`
//! video frames and `audio_samples` stereo samples. Positive pairs take audio
//! and video from the same window; negatives shift the audio window by
//! `[SHIFT_MIN, SHIFT_MAX]` clip-units in either direction.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{container, read_record, record_len, write_record, DType, Tensor};

/// Shortest negative shift: 2.0 s over a 4.2 s clip.
pub const SHIFT_MIN: f64 = 2.0 / 4.2;
/// Longest negative shift: 5.8 s over a 4.2 s clip.
pub const SHIFT_MAX: f64 = 5.8 / 4.2;

const BACKGROUND: f64 = 0.1;
const SOURCE_COLORS: [[f64; 3]; 3] = [[1.0, 0.55, 0.25], [0.25, 1.0, 0.55], [0.55, 0.25, 1.0]];

/// Deterministic seed derivation (splitmix64 finaliser over the inputs).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shape of one clip. One clip spans one clip-unit of time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_samples: usize,
    #[serde(default = "two")]
    pub audio_channels: usize,
    #[serde(default = "three")]
    pub visual_channels: usize,
}

fn two() -> usize {
    2
}
fn three() -> usize {
    3
}

impl ClipGeometry {
    pub fn desk() -> Self {
        ClipGeometry {
            frames: 8,
            height: 32,
            width: 32,
            audio_samples: 4096,
            audio_channels: 2,
            visual_channels: 3,
        }
    }

    pub fn audio_len(&self) -> usize {
        self.audio_samples * self.audio_channels
    }

    pub fn frames_len(&self) -> usize {
        self.frames * self.height * self.width * self.visual_channels
    }

    pub fn audio_shape(&self) -> [usize; 2] {
        [self.audio_samples, self.audio_channels]
    }

    pub fn frames_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.visual_channels]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub duration_units: f64,
    /// Cells per side of the square source grid.
    pub grid: usize,
    /// (row, col) cell of each source.
    pub source_positions: Vec<[usize; 2]>,
    /// Mean events per clip-unit per source.
    pub event_rate: f64,
    /// Tone per source in cycles per clip-unit.
    pub tone_frequencies: Vec<f64>,
    pub noise_level: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn n_sources(&self) -> usize {
        self.source_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sources();
        if !(1..=3).contains(&n) {
            return Err(Error::InvalidSpec(format!("{n} sources, expected 1..=3")));
        }
        if self.tone_frequencies.len() != n {
            return Err(Error::InvalidSpec("one tone per source required".into()));
        }
        if !(self.event_rate > 0.0) {
            return Err(Error::InvalidSpec(format!("event rate {}", self.event_rate)));
        }
        if !(self.duration_units > 0.0) || !(self.noise_level >= 0.0) {
            return Err(Error::InvalidSpec("duration and noise must be positive".into()));
        }
        for (i, p) in self.source_positions.iter().enumerate() {
            if p[0] >= self.grid || p[1] >= self.grid {
                return Err(Error::InvalidSpec(format!("source {i} at {p:?} outside grid")));
            }
            if self.source_positions[..i].contains(p) {
                return Err(Error::InvalidSpec(format!("source positions repeat {p:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub source: usize,
    pub time: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// Sorted by time.
    pub events: Vec<Event>,
}

/// Poisson event train per source.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = Exp::new(spec.event_rate).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut events = Vec::new();
    for source in 0..spec.n_sources() {
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= spec.duration_units {
                break;
            }
            events.push(Event {
                source,
                time: t,
                amplitude: rng.random_range(0.6..1.0),
            });
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(World {
        spec: spec.clone(),
        events,
    })
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Raised-cosine envelope with half-width `w`.
fn envelope(tau: f64, w: f64) -> f64 {
    if tau.abs() >= w {
        0.0
    } else {
        0.5 * (1.0 + (PI * tau / w).cos())
    }
}

/// Ground truth for one visually rendered event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub source: usize,
    /// (row, col) on the source grid.
    pub cell: [usize; 2],
    /// Frame where the event peaks (clamped to the clip).
    pub frame: usize,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedClip {
    /// `[S, channels]`
    pub audio: Vec<f32>,
    /// `[t, H, W, channels]`, values in `[0, 1]`.
    pub frames: Vec<f32>,
    pub regions: Vec<Region>,
}

fn check_window(world: &World, start: f64) -> Result<()> {
    let d = world.spec.duration_units;
    if start < 0.0 || start + 1.0 > d + 1e-12 {
        return Err(Error::WindowOutOfRange {
            start,
            end: start + 1.0,
            duration: d,
        });
    }
    Ok(())
}

/// Renders a one-unit video window and a one-unit audio window of `world`.
pub fn render_clip(
    world: &World,
    video_start: f64,
    audio_start: f64,
    geom: &ClipGeometry,
    noise_seed: u64,
) -> Result<RenderedClip> {
    check_window(world, video_start)?;
    check_window(world, audio_start)?;
    let spec = &world.spec;
    let fps = geom.frames as f64;
    let rate = geom.audio_samples as f64;
    let half = 1.0 / fps;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);

    let mut mono = vec![0.0f64; geom.audio_samples];
    for e in &world.events {
        if e.time + half <= audio_start || e.time - half >= audio_start + 1.0 {
            continue;
        }
        let f = spec.tone_frequencies[e.source];
        let lo = (((e.time - half - audio_start) * rate).floor().max(0.0)) as usize;
        let hi = (((e.time + half - audio_start) * rate).ceil() as usize + 1).min(geom.audio_samples);
        for (j, m) in mono.iter_mut().enumerate().take(hi).skip(lo) {
            let tau = audio_start + j as f64 / rate - e.time;
            *m += e.amplitude * envelope(tau, half) * (2.0 * PI * f * tau).cos();
        }
    }
    let mut audio = Vec::with_capacity(geom.audio_len());
    for m in mono {
        let n: f64 = if spec.noise_level > 0.0 {
            spec.noise_level * gauss(&mut rng)
        } else {
            0.0
        };
        let v = (m + n) as f32;
        audio.extend(std::iter::repeat_n(v, geom.audio_channels));
    }

    let (h, w, c) = (geom.height, geom.width, geom.visual_channels);
    let cell_h = h as f64 / spec.grid as f64;
    let cell_w = w as f64 / spec.grid as f64;
    let sigma = cell_h.min(cell_w) / 3.0;
    let mut frames = vec![0.0f64; geom.frames_len()];
    let mut regions = Vec::new();
    for e in &world.events {
        if e.time + half <= video_start || e.time - half >= video_start + 1.0 {
            continue;
        }
        let [row, col] = spec.source_positions[e.source];
        let (cy, cx) = ((row as f64 + 0.5) * cell_h, (col as f64 + 0.5) * cell_w);
        let color = SOURCE_COLORS[e.source % SOURCE_COLORS.len()];
        let mut visible = false;
        for fi in 0..geom.frames {
            let k = e.amplitude * envelope(video_start + fi as f64 / fps - e.time, half);
            if k <= 0.0 {
                continue;
            }
            visible = true;
            let base = fi * h * w * c;
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    let g = k * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    if g < 1e-6 {
                        continue;
                    }
                    let p = base + (y * w + x) * c;
                    for ch in 0..c {
                        frames[p + ch] += g * color[ch % 3];
                    }
                }
            }
        }
        if visible {
            let peak = ((e.time - video_start) * fps).round().clamp(0.0, (geom.frames - 1) as f64);
            regions.push(Region {
                source: e.source,
                cell: [row, col],
                frame: peak as usize,
                time: e.time,
            });
        }
    }
    let pixel_noise = 0.5 * spec.noise_level;
    let frames = frames
        .into_iter()
        .map(|v| {
            let n: f64 = if pixel_noise > 0.0 {
                pixel_noise * gauss(&mut rng)
            } else {
                0.0
            };
            (BACKGROUND + v + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(RenderedClip {
        audio,
        frames,
        regions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub world_seed: u64,
    pub video_start: f64,
    pub audio_start: f64,
    /// `audio_start − video_start`; zero exactly for positives.
    pub audio_shift: f64,
    pub source_positions: Vec<[usize; 2]>,
    pub regions: Vec<Region>,
    /// Downstream class, when the sample belongs to a labelled set.
    #[serde(default)]
    pub class: Option<usize>,
}

/// One (audio, frames, label) triple. Storage is `f32`; rendering rounds to
/// `f32` so dataset files round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncSample {
    pub audio: Vec<f32>,
    pub frames: Vec<f32>,
    /// 1 = synchronized.
    pub label: usize,
    pub meta: SampleMeta,
}

/// Draws a positive or negative (probability 1/2 each) pair from `world`.
pub fn make_pair<R: Rng + ?Sized>(world: &World, rng: &mut R, geom: &ClipGeometry) -> Result<SyncSample> {
    let positive = rng.random_bool(0.5);
    make_pair_with_label(world, rng, geom, positive)
}

pub fn make_pair_with_label<R: Rng + ?Sized>(
    world: &World,
    rng: &mut R,
    geom: &ClipGeometry,
    positive: bool,
) -> Result<SyncSample> {
    let d = world.spec.duration_units;
    if d - 1.0 < SHIFT_MAX {
        return Err(Error::WindowOutOfRange {
            start: 0.0,
            end: 1.0 + SHIFT_MAX,
            duration: d,
        });
    }
    let (video_start, audio_start) = if positive {
        let v = rng.random_range(0.0..=d - 1.0);
        (v, v)
    } else {
        let shift = rng.random_range(SHIFT_MIN..=SHIFT_MAX);
        if rng.random_bool(0.5) {
            let v = rng.random_range(0.0..=d - 1.0 - shift);
            (v, v + shift)
        } else {
            let v = rng.random_range(shift..=d - 1.0);
            (v, v - shift)
        }
    };
    let clip = render_clip(world, video_start, audio_start, geom, rng.random())?;
    Ok(SyncSample {
        audio: clip.audio,
        frames: clip.frames,
        label: usize::from(positive),
        meta: SampleMeta {
            world_seed: world.spec.seed,
            video_start,
            audio_start,
            audio_shift: if positive { 0.0 } else { audio_start - video_start },
            source_positions: world.spec.source_positions.clone(),
            regions: clip.regions,
            class: None,
        },
    })
}

/// Generation parameters for a dataset of synchronization pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    pub duration_units: f64,
    pub grid: usize,
    /// Inclusive range of sources per world.
    pub min_sources: usize,
    pub max_sources: usize,
    pub event_rate: f64,
    pub noise_level: f64,
    /// Tone palette; source `i` of a world uses entry `i`.
    pub tones: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 256,
            seed: 0,
            duration_units: 4.0,
            grid: 4,
            min_sources: 1,
            max_sources: 2,
            event_rate: 3.0,
            noise_level: 0.05,
            tones: vec![200.0, 400.0, 700.0],
        }
    }
}

impl DataConfig {
    /// World spec for world `index` with a given source count; positions are
    /// distinct random cells.
    pub fn world_spec(&self, index: u64, n_sources: usize) -> WorldSpec {
        let world_seed = derive_seed(self.seed, index, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(world_seed, 1, 0));
        let mut cells: Vec<[usize; 2]> = (0..self.grid * self.grid)
            .map(|i| [i / self.grid, i % self.grid])
            .collect();
        cells.shuffle(&mut rng);
        cells.truncate(n_sources);
        WorldSpec {
            duration_units: self.duration_units,
            grid: self.grid,
            source_positions: cells,
            event_rate: self.event_rate,
            tone_frequencies: self.tones.iter().copied().take(n_sources).collect(),
            noise_level: self.noise_level,
            seed: world_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.min_sources == 0 || self.min_sources > self.max_sources || self.max_sources > 3 {
            return Err(Error::InvalidSpec(format!(
                "source range {}..={}",
                self.min_sources, self.max_sources
            )));
        }
        if self.tones.len() < self.max_sources {
            return Err(Error::InvalidSpec("tone palette shorter than max_sources".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: ClipGeometry,
    pub config: DataConfig,
    pub samples: Vec<SyncSample>,
}

/// Generates `cfg.count` pairs, one fresh world per sample.
pub fn generate_dataset(cfg: &DataConfig, geom: &ClipGeometry) -> Result<Dataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i, 1));
        let n = rng.random_range(cfg.min_sources..=cfg.max_sources);
        let world = generate_world(&cfg.world_spec(i, n))?;
        samples.push(make_pair(&world, &mut rng, geom)?);
    }
    Ok(Dataset {
        geometry: *geom,
        config: cfg.clone(),
        samples,
    })
}

/// Labelled set for downstream classification. Every world has one source;
/// class `2·tone + (col ≥ grid/2)` combines the source tone (first two
/// palette entries) with the half of the frame it sits in. All clips are
/// synchronized.
pub fn generate_action_dataset(cfg: &DataConfig, geom: &ClipGeometry, seed_offset: u64) -> Result<Dataset> {
    if cfg.tones.len() < 2 {
        return Err(Error::InvalidSpec("action classes need two tones".into()));
    }
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count as u64 {
        let index = i + seed_offset;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index, 7));
        let class = rng.random_range(0..4usize);
        let (tone, right) = (class / 2, class % 2 == 1);
        let half = cfg.grid / 2;
        let col = if right {
            rng.random_range(half..cfg.grid)
        } else {
            rng.random_range(0..half)
        };
        let row = rng.random_range(0..cfg.grid);
        let spec = WorldSpec {
            duration_units: cfg.duration_units,
            grid: cfg.grid,
            source_positions: vec![[row, col]],
            event_rate: cfg.event_rate,
            tone_frequencies: vec![cfg.tones[tone]],
            noise_level: cfg.noise_level,
            seed: derive_seed(cfg.seed, index, 8),
        };
        let world = generate_world(&spec)?;
        let mut s = make_pair_with_label(&world, &mut rng, geom, true)?;
        s.meta.class = Some(class);
        samples.push(s);
    }
    Ok(Dataset {
        geometry: *geom,
        config: cfg.clone(),
        samples,
    })
}

/// Stacked tensors for a set of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, S, channels]`
    pub audio: Tensor,
    /// `[B, t, H, W, channels]`
    pub frames: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_samples<'a>(geom: &ClipGeometry, samples: impl IntoIterator<Item = &'a SyncSample>) -> Batch {
        let mut audio = Vec::new();
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            audio.extend(s.audio.iter().map(|&v| v as f64));
            frames.extend(s.frames.iter().map(|&v| v as f64));
            labels.push(s.label);
        }
        let b = labels.len();
        let [sa, ca] = geom.audio_shape();
        let [t, h, w, c] = geom.frames_shape();
        Batch {
            audio: Tensor::new([b, sa, ca], audio).expect("audio geometry"),
            frames: Tensor::new([b, t, h, w, c], frames).expect("frame geometry"),
            labels,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::from_samples(&self.geometry, indices.iter().map(|&i| &self.samples[i]))
    }

    /// Index batches for one epoch. Training order is a seeded permutation
    /// and drops the final partial batch; evaluation order is sequential and
    /// keeps it.
    pub fn batch_indices(&self, batch_size: usize, shuffle_seed: u64, epoch: u64, train: bool) -> Result<Vec<Vec<usize>>> {
        batch_iter(self.len(), batch_size, shuffle_seed, epoch, train)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut records = Vec::new();
        for s in &self.samples {
            if s.audio.len() != self.geometry.audio_len() || s.frames.len() != self.geometry.frames_len() {
                return Err(shape_err!("sample tensors do not match dataset geometry"));
            }
            let audio: Vec<f64> = s.audio.iter().map(|&v| v as f64).collect();
            let frames: Vec<f64> = s.frames.iter().map(|&v| v as f64).collect();
            write_record(&mut records, &self.geometry.audio_shape(), &audio, DType::F32)?;
            write_record(&mut records, &self.geometry.frames_shape(), &frames, DType::F32)?;
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            count: self.samples.len(),
            geometry: self.geometry,
            config: self.config.clone(),
            labels: self.samples.iter().map(|s| s.label).collect(),
            meta: self.samples.iter().map(|s| s.meta.clone()).collect(),
        };
        container::write(path, &manifest, &records)
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let (m, records): (DatasetManifest, Vec<u8>) = container::read(path)?;
        if m.format != DATASET_FORMAT {
            return Err(Error::CorruptFile(format!("unexpected dataset format {}", m.format)));
        }
        if m.labels.len() != m.count || m.meta.len() != m.count {
            return Err(Error::CorruptFile(format!(
                "manifest count {} with {} labels and {} meta entries",
                m.count,
                m.labels.len(),
                m.meta.len()
            )));
        }
        let geom = m.geometry;
        let per_sample = record_len(&geom.audio_shape(), DType::F32) + record_len(&geom.frames_shape(), DType::F32);
        if records.len() != per_sample * m.count {
            return Err(Error::CorruptFile(format!(
                "{} record bytes for {} samples of {} bytes",
                records.len(),
                m.count,
                per_sample
            )));
        }
        let mut cursor = records.as_slice();
        let mut samples = Vec::with_capacity(m.count);
        for (label, meta) in m.labels.into_iter().zip(m.meta) {
            let (ashape, audio) = read_record(&mut cursor)?;
            let (fshape, frames) = read_record(&mut cursor)?;
            if ashape != geom.audio_shape() || fshape != geom.frames_shape() {
                return Err(shape_err!(
                    "record shapes {:?} / {:?} do not match geometry",
                    ashape,
                    fshape
                ));
            }
            samples.push(SyncSample {
                audio: audio.into_iter().map(|v| v as f32).collect(),
                frames: frames.into_iter().map(|v| v as f32).collect(),
                label,
                meta,
            });
        }
        Ok(Dataset {
            geometry: geom,
            config: m.config,
            samples,
        })
    }
}

pub const DATASET_FORMAT: &str = "coattn-dataset-v1";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    count: usize,
    geometry: ClipGeometry,
    config: DataConfig,
    labels: Vec<usize>,
    meta: Vec<SampleMeta>,
}

/// Index batches over `n` items; see [`Dataset::batch_indices`].
pub fn batch_iter(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64, train: bool) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if train {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_seed, epoch, 2));
        order.shuffle(&mut rng);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if train && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    Ok(batches)
}

/// Non-learned synchronization detector.
///
/// Correlates the per-frame audio envelope with per-frame visual activity
/// (brightness above each pixel's minimum over the clip) and predicts
/// "synchronized" when the Pearson correlation exceeds a threshold.
pub mod matched_filter {
    use super::{ClipGeometry, SyncSample};

    pub const THRESHOLD: f64 = 0.5;

    /// RMS of the first audio channel in a one-frame window around each
    /// frame time.
    pub fn audio_envelope(audio: &[f32], geom: &ClipGeometry) -> Vec<f64> {
        let per_frame = geom.audio_samples as f64 / geom.frames as f64;
        (0..geom.frames)
            .map(|i| {
                let lo = ((i as f64 - 0.5) * per_frame).max(0.0) as usize;
                let hi = (((i as f64 + 0.5) * per_frame) as usize).min(geom.audio_samples);
                let n = (hi - lo).max(1) as f64;
                let e: f64 = (lo..hi)
                    .map(|j| {
                        let v = audio[j * geom.audio_channels] as f64;
                        v * v
                    })
                    .sum();
                (e / n).sqrt()
            })
            .collect()
    }

    pub fn visual_activity(frames: &[f32], geom: &ClipGeometry) -> Vec<f64> {
        let px = geom.height * geom.width * geom.visual_channels;
        let mut floor = vec![f32::INFINITY; px];
        for f in frames.chunks_exact(px) {
            floor.iter_mut().zip(f).for_each(|(m, &v)| *m = m.min(v));
        }
        frames
            .chunks_exact(px)
            .map(|f| f.iter().zip(&floor).map(|(&v, &m)| (v - m) as f64).sum())
            .collect()
    }

    /// Pearson correlation, or `None` when either series is flat.
    pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        let (sa, sb) = (va.sqrt(), vb.sqrt());
        let scale_a = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale_b = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        if sa <= 1e-9 * scale_a.max(1e-12) || sb <= 1e-9 * scale_b.max(1e-12) {
            return None;
        }
        Some(cov / (sa * sb))
    }

    /// Predicted label for one sample.
    pub fn predict(sample: &SyncSample, geom: &ClipGeometry) -> usize {
        let env = audio_envelope(&sample.audio, geom);
        let act = visual_activity(&sample.frames, geom);
        match correlation(&env, &act) {
            Some(r) => usize::from(r > THRESHOLD),
            // Nothing happens in at least one stream: call it synchronized
            // only if both are quiet.
            None => usize::from(act.iter().all(|&v| v < 1.0) && env.iter().all(|&v| v < 0.2)),
        }
    }

    pub fn accuracy(samples: &[SyncSample], geom: &ClipGeometry) -> f64 {
        let hits = samples.iter().filter(|s| predict(s, geom) == s.label).count();
        hits as f64 / samples.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> WorldSpec {
        WorldSpec {
            duration_units: 4.0,
            grid: 4,
            source_positions: vec![[1, 2]],
            event_rate: 3.0,
            tone_frequencies: vec![200.0],
            noise_level: 0.05,
            seed,
        }
    }

    #[test]
    fn world_is_seed_deterministic() {
        let a = generate_world(&spec(5)).unwrap();
        let b = generate_world(&spec(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.events, generate_world(&spec(6)).unwrap().events);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0);
        s.source_positions.clear();
        s.tone_frequencies.clear();
        assert!(matches!(generate_world(&s), Err(Error::InvalidSpec(_))));
        let mut s = spec(0);
        s.event_rate = 0.0;
        assert!(generate_world(&s).is_err());
        let mut s = spec(0);
        s.source_positions = vec![[0, 0], [0, 0]];
        s.tone_frequencies = vec![1.0, 2.0];
        assert!(generate_world(&s).is_err());
    }

    #[test]
    fn empty_world_renders_noise_and_background() {
        let world = World {
            spec: spec(0),
            events: vec![],
        };
        let g = ClipGeometry::desk();
        let clip = render_clip(&world, 0.5, 1.0, &g, 3).unwrap();
        assert!(clip.regions.is_empty());
        assert!(clip.audio.iter().any(|&v| v != 0.0));
        let mut quiet = world.clone();
        quiet.spec.noise_level = 0.0;
        let clip = render_clip(&quiet, 0.5, 1.0, &g, 3).unwrap();
        assert!(clip.audio.iter().all(|&v| v == 0.0));
        assert!(clip.frames.iter().all(|&v| v == BACKGROUND as f32));
    }

    #[test]
    fn single_event_peaks_on_grid() {
        let g = ClipGeometry::desk();
        let mut s = spec(0);
        s.noise_level = 0.0;
        // Event at 0.5 + 3/8 units: frame 3 of a clip starting at 0.5.
        let t = 0.5 + 3.0 / 8.0;
        let world = World {
            spec: s,
            events: vec![Event {
                source: 0,
                time: t,
                amplitude: 1.0,
            }],
        };
        let clip = render_clip(&world, 0.5, 0.5, &g, 0).unwrap();
        let act = matched_filter::visual_activity(&clip.frames, &g);
        let peak_frame = (0..8).max_by(|&a, &b| act[a].total_cmp(&act[b])).unwrap();
        assert_eq!(peak_frame, 3);
        assert_eq!(clip.regions.len(), 1);
        assert_eq!(clip.regions[0].frame, 3);
        assert_eq!(clip.regions[0].cell, [1, 2]);
        let peak_sample = (0..g.audio_samples)
            .max_by(|&a, &b| clip.audio[2 * a].abs().total_cmp(&clip.audio[2 * b].abs()))
            .unwrap();
        assert_eq!(peak_sample, (3.0 / 8.0 * 4096.0) as usize);
        // Outside the burst support the waveform is exactly zero.
        let half = 4096 / 8;
        for j in (0..g.audio_samples).filter(|&j| (j as isize - 1536).unsigned_abs() >= half) {
            assert_eq!(clip.audio[2 * j], 0.0);
        }
        // Stereo duplication.
        assert!(clip.audio.chunks(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn windows_must_fit() {
        let world = generate_world(&spec(1)).unwrap();
        let g = ClipGeometry::desk();
        assert!(matches!(
            render_clip(&world, 3.5, 0.0, &g, 0),
            Err(Error::WindowOutOfRange { .. })
        ));
        assert!(render_clip(&world, -0.1, 0.0, &g, 0).is_err());
        let mut short = world.clone();
        short.spec.duration_units = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_pair(&short, &mut rng, &g).is_err());
    }

    #[test]
    fn positives_have_zero_shift() {
        let world = generate_world(&spec(2)).unwrap();
        let g = ClipGeometry::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = make_pair(&world, &mut rng, &g).unwrap();
            assert_eq!(s.label == 1, s.meta.audio_shift == 0.0);
            if s.label == 0 {
                let shift = s.meta.audio_shift.abs();
                assert!((SHIFT_MIN..=SHIFT_MAX).contains(&shift));
            }
        }
    }

    #[test]
    fn batches_cover_every_index() {
        let b = batch_iter(10, 3, 4, 0, false).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
        let t = batch_iter(10, 3, 4, 0, true).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t, batch_iter(10, 3, 4, 0, true).unwrap());
        assert_ne!(t, batch_iter(10, 3, 4, 1, true).unwrap());
        let mut all = batch_iter(12, 4, 9, 3, true).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert!(matches!(batch_iter(0, 3, 0, 0, true), Err(Error::EmptyDataset)));
    }

    #[test]
    fn dataset_file_round_trip() {
        let cfg = DataConfig {
            count: 3,
            ..DataConfig::default()
        };
        let g = ClipGeometry::desk();
        let ds = generate_dataset(&cfg, &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), ds);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::CorruptFile(_))));
    }
}
