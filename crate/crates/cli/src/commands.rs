use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use coattn::data::{derive_seed, generate_action_dataset, generate_dataset, DataConfig, Dataset};
use coattn::encoders::AvsModel;
use coattn::tasks::{self, Init};
use coattn::Error;
use serde::Serialize;

use crate::config::{self, RunConfig};
use crate::Common;

/// A usage problem (exit code 1) as opposed to a runtime failure (2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

/// Per-run state: effective config and the files this run created.
pub struct Ctx {
    pub cfg: RunConfig,
    out: Option<PathBuf>,
    created_dir: bool,
    created: Vec<PathBuf>,
}

impl Ctx {
    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| usage("this subcommand needs --out DIR"))
    }

    /// Path inside the output directory, remembered for cleanup.
    fn output(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.out_dir()?.join(name);
        self.created.push(p.clone());
        Ok(p)
    }

    fn cleanup(&self) {
        if let Some(dir) = &self.out {
            if self.created_dir {
                let _ = fs::remove_dir_all(dir);
            } else {
                for p in &self.created {
                    let _ = fs::remove_file(p);
                }
            }
        }
    }
}

pub fn run(common: &Common, body: impl FnOnce(&mut Ctx) -> Result<()>) -> Result<(), Failure> {
    let cfg = config::load(common.config.as_deref(), &common.overrides, common.seed)
        .map_err(|error| Failure { code: 1, error })?;
    let mut ctx = Ctx {
        cfg,
        out: common.out.clone(),
        created_dir: false,
        created: Vec::new(),
    };
    let result = prepare(&mut ctx).and_then(|()| body(&mut ctx));
    result.map_err(|error| {
        ctx.cleanup();
        let code = if error.downcast_ref::<Usage>().is_some() { 1 } else { 2 };
        Failure { code, error }
    })
}

fn prepare(ctx: &mut Ctx) -> Result<()> {
    if let Some(dir) = ctx.out.clone() {
        if !dir.exists() {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            ctx.created_dir = true;
        }
        let path = ctx.output("config.json")?;
        fs::write(&path, serde_json::to_vec_pretty(&ctx.cfg)?)?;
    }
    Ok(())
}

fn geometry(cfg: &RunConfig) -> coattn::data::ClipGeometry {
    cfg.model.encoder.clip
}

fn held_out(data: &DataConfig, count: usize) -> DataConfig {
    DataConfig {
        count,
        seed: derive_seed(data.seed, 1, 9),
        ..data.clone()
    }
}

fn load_or_generate(path: Option<&Path>, data: &DataConfig, cfg: &RunConfig) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::read(p).with_context(|| format!("reading dataset {}", p.display())),
        None => Ok(generate_dataset(data, &geometry(cfg))?),
    }
}

fn checkpoint(cfg: &RunConfig) -> Result<&Path> {
    cfg.inputs
        .checkpoint
        .as_deref()
        .ok_or_else(|| usage("set inputs.checkpoint to a trained model"))
}

pub fn gen_data(ctx: &mut Ctx, action: bool) -> Result<()> {
    let g = geometry(&ctx.cfg);
    let ds = if action {
        generate_action_dataset(&ctx.cfg.data, &g, 0)?
    } else {
        generate_dataset(&ctx.cfg.data, &g)?
    };
    let path = ctx.output("dataset.bin")?;
    ds.write(&path)?;
    println!("{} samples -> {}", ds.len(), path.display());
    Ok(())
}

pub fn train_pretext(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let ckpt = ctx.output("model.ckpt")?;
    let report_path = ctx.output("report.json")?;
    let train = load_or_generate(cfg.inputs.train.as_deref(), &cfg.data, &cfg)?;
    let val = match (&cfg.inputs.val, cfg.val_count) {
        (Some(p), _) => Some(Dataset::read(p)?),
        (None, 0) => None,
        (None, n) => Some(generate_dataset(&held_out(&cfg.data, n), &geometry(&cfg))?),
    };
    let (_, report) = tasks::train_pretext(&train, val.as_ref(), &cfg.model, &cfg.train, cfg.seed, Some(&ckpt))?;
    report.write_json(&report_path)?;
    println!(
        "steps {} train_acc {} val_acc {} seconds {:.1}",
        report.steps,
        fmt_opt(report.final_train_accuracy),
        fmt_opt(report.best_val_accuracy),
        report.seconds
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |a| format!("{a:.4}"))
}

pub fn eval_sync(ctx: &mut Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let model = AvsModel::load(checkpoint(cfg)?)?;
    let ds = match cfg.inputs.dataset.as_deref() {
        Some(p) => Dataset::read(p)?,
        None => generate_dataset(&cfg.data, &model.config.encoder.clip)?,
    };
    println!("{:.6}", tasks::evaluate_sync(&ds, &model)?);
    Ok(())
}

pub fn localize(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    ctx.out_dir()?;
    let model = AvsModel::load(checkpoint(&cfg)?)?;
    let ds = match cfg.inputs.dataset.as_deref() {
        Some(p) => Dataset::read(p)?,
        None => {
            let data = DataConfig {
                count: cfg.localize.samples,
                ..cfg.data.clone()
            };
            generate_dataset(&data, &model.config.encoder.clip)?
        }
    };
    let g = ds.geometry;
    let frame_len = g.height * g.width * g.visual_channels;
    let cells = ds.config.grid;
    let (mut hits, mut scored) = (0, 0);
    for (i, s) in ds.samples.iter().enumerate().take(cfg.localize.samples) {
        let frame = s.meta.regions.first().map_or(g.frames / 2, |r| r.frame);
        let pixels = &s.frames[frame * frame_len..(frame + 1) * frame_len];
        let cam = tasks::cam_heatmap(&model, s, frame)?;
        tasks::write_pgm(&ctx.output(&format!("sample{i:03}_cam.pgm"))?, &cam.grid)?;
        tasks::write_overlay_ppm(&ctx.output(&format!("sample{i:03}_cam.ppm"))?, pixels, &cam.upsampled)?;
        if let Some(r) = s.meta.regions.first() {
            scored += 1;
            hits += usize::from(tasks::pointing_hit(cam.peak_cell(cells), r.cell));
        }
        match tasks::attention_heatmaps(&model, s, cfg.localize.layer, cfg.localize.head) {
            Ok(maps) => {
                for m in maps {
                    let h = match m.source {
                        tasks::HeatmapSource::Attention { head, .. } => head,
                        tasks::HeatmapSource::Cam => unreachable!(),
                    };
                    tasks::write_pgm(&ctx.output(&format!("sample{i:03}_head{h}.pgm"))?, &m.grid)?;
                    tasks::write_overlay_ppm(&ctx.output(&format!("sample{i:03}_head{h}.ppm"))?, pixels, &m.upsampled)?;
                }
            }
            Err(Error::NoAttentionRecord) if i == 0 => {
                eprintln!("note: no audio-query attention in this variant; writing CAM only");
            }
            Err(Error::NoAttentionRecord) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if scored > 0 {
        println!("cam pointing {hits}/{scored}");
    }
    Ok(())
}

pub fn finetune(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let ckpt = ctx.output("model.ckpt")?;
    let report_path = ctx.output("report.json")?;
    let f = &cfg.finetune;
    let g = geometry(&cfg);
    let train_cfg = DataConfig {
        count: f.train_count,
        ..cfg.data.clone()
    };
    let test_cfg = DataConfig {
        count: f.test_count,
        ..cfg.data.clone()
    };
    let train = generate_action_dataset(&train_cfg, &g, 0)?;
    let test = generate_action_dataset(&test_cfg, &g, 1 << 32)?;
    let init = match cfg.inputs.checkpoint.as_deref() {
        Some(p) => Init::Pretrained(p),
        None => Init::Scratch,
    };
    let (_, report) = tasks::finetune_classifier(
        &train,
        Some(&test),
        &cfg.model,
        init,
        f.classes,
        &f.train,
        f.vision_only,
        cfg.seed,
        Some(&ckpt),
    )?;
    report.write_json(&report_path)?;
    println!("test_acc {}", fmt_opt(report.best_val_accuracy));
    Ok(())
}

pub fn gradcheck(ctx: &mut Ctx) -> Result<()> {
    let g = &ctx.cfg.gradcheck;
    let results = coattn::gradcheck::standard_suite(g.eps, g.coords_per_input)?;
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    for (name, err) in &results {
        eprintln!("{name:<24} {err:.3e}");
    }
    if ctx.out.is_some() {
        let path = ctx.output("gradcheck.json")?;
        fs::write(path, serde_json::to_vec_pretty(&results)?)?;
    }
    println!("{worst:e}");
    if worst >= 1e-4 {
        return Err(anyhow!("max relative error {worst:e} exceeds 1e-4"));
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    #[serde(rename = "L")]
    depth: usize,
    #[serde(rename = "A")]
    heads: usize,
    params: usize,
    val_acc: f64,
    steps: usize,
    seconds: f64,
}

pub fn ablate(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let path = ctx.output("ablation.csv")?;
    let a = &cfg.ablate;
    let g = geometry(&cfg);
    let train = generate_dataset(
        &DataConfig {
            count: a.train_count,
            ..cfg.data.clone()
        },
        &g,
    )?;
    let val = generate_dataset(&held_out(&cfg.data, a.val_count), &g)?;
    let mut writer = csv::Writer::from_path(&path)?;
    for &variant in &a.variants {
        for &depth in &a.depths {
            for &heads in &a.heads {
                let mut model_cfg = cfg.model.clone();
                model_cfg.attention.variant = variant;
                model_cfg.attention.depth = depth;
                model_cfg.attention.heads = heads;
                model_cfg.validate()?;
                let start = Instant::now();
                let (model, report) = tasks::train_pretext(&train, None, &model_cfg, &a.train, cfg.seed, None)?;
                let val_acc = tasks::evaluate_sync(&val, &model)?;
                let row = AblationRow {
                    variant: variant.name(),
                    depth,
                    heads,
                    params: model.stack_param_count(),
                    val_acc,
                    steps: report.steps,
                    seconds: start.elapsed().as_secs_f64(),
                };
                eprintln!("{} L={} A={} val_acc={:.4}", row.variant, depth, heads, val_acc);
                writer.serialize(row)?;
                writer.flush()?;
            }
        }
    }
    writer.flush()?;
    println!("{}", path.display());
    Ok(())
}
