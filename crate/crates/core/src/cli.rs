//! Command-line entry point: training, evaluation, prediction, ablation
//! sweeps, dataset analysis, repeat-protocol reports, and desk-scale
//! fixtures (synthetic dataset generation, toy backbone export).
//!
//! Configuration resolves in three layers: built-in defaults, then a JSON
//! config file, then command-line flags. Every artifact-writing command
//! drops the resolved configuration as `config.lock` next to its outputs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::{make_toy_backbone, Backbone, BackboneConfig};
use crate::data::{
    self, load_manifest, split_by_prompt, write_manifest, DatasetSplit, DiskProvider,
    ImageProvider, ManifestFormat, RgbImage, SampleRecord,
};
use crate::error::{Error, Result};
use crate::metrics::{self, CorrelationReport};
use crate::scoring::{self, AntonymPair, CachedPair};
use crate::training::{
    self, fit, AblationFlags, AlignmentMode, ConfigFingerprint, TrainConfig, TrainableState,
};

// ── resolved configuration ───────────────────────────────────────────

/// Everything a run needs, after merging defaults, config file, and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seed for the deterministic toy backbone (ignored when
    /// `backbone_path` is set).
    pub backbone_seed: u64,
    /// Load a saved backbone checkpoint instead of generating a toy one.
    pub backbone_path: Option<PathBuf>,
    pub backbone: BackboneConfig,
    pub manifest: Option<PathBuf>,
    pub format: ManifestFormat,
    /// Root for relative image paths; defaults to the manifest's directory.
    pub image_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Trainable-state checkpoint to read; defaults to out_dir/state.ckpt.
    pub state: Option<PathBuf>,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub train: TrainConfig,
    /// Random crops averaged per image at evaluation time.
    pub eval_crops: usize,
    /// Re-split/retrain rounds for the report command.
    pub repeats: usize,
    /// Four-parameter logistic remap before PLCC.
    pub logistic_fit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone_seed: 0,
            backbone_path: None,
            backbone: BackboneConfig::default(),
            manifest: None,
            format: ManifestFormat::Canonical,
            image_root: None,
            out_dir: PathBuf::from("agiqa-out"),
            state: None,
            split_ratio: 0.8,
            split_seed: 0,
            train: TrainConfig::default(),
            eval_crops: 10,
            repeats: 10,
            logistic_fit: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_crops == 0 {
            return Err(Error::InvalidConfig("eval_crops must be >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        self.train.validate()
    }

    fn state_path(&self) -> PathBuf {
        self.state.clone().unwrap_or_else(|| self.out_dir.join("state.ckpt"))
    }
}

// ── flags ────────────────────────────────────────────────────────────

#[derive(Debug, Args, Default)]
struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest layout: canonical, agiqa3k, or aigciqa2023.
    #[arg(long)]
    format: Option<ManifestFormat>,
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Trainable-state checkpoint (defaults to OUT_DIR/state.ckpt).
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long)]
    backbone_seed: Option<u64>,
    /// Saved backbone checkpoint; omits the toy backbone.
    #[arg(long)]
    backbone_path: Option<PathBuf>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    prompt_length: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    /// Training seed (prompt init, shuffling, crops).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_crops: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    logistic_fit: Option<bool>,
    /// blind or text-conditioned auxiliary alignment.
    #[arg(long, value_parser = parse_alignment_mode)]
    alignment_mode: Option<AlignmentMode>,
    #[arg(long, value_name = "BOOL")]
    textual_prompts: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    visual_prompts: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    conditioning: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    auxiliary_task: Option<bool>,
}

fn parse_alignment_mode(s: &str) -> std::result::Result<AlignmentMode, String> {
    match s {
        "blind" => Ok(AlignmentMode::Blind),
        "text-conditioned" | "text_conditioned" => Ok(AlignmentMode::TextConditioned),
        other => Err(format!("unknown alignment mode {other} (blind, text-conditioned)")),
    }
}

impl RunArgs {
    /// defaults <- config file <- flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &self.manifest {
            cfg.manifest = Some(v.clone());
        }
        if let Some(v) = self.format {
            cfg.format = v;
        }
        if let Some(v) = &self.image_root {
            cfg.image_root = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.state {
            cfg.state = Some(v.clone());
        }
        if let Some(v) = self.backbone_seed {
            cfg.backbone_seed = v;
        }
        if let Some(v) = &self.backbone_path {
            cfg.backbone_path = Some(v.clone());
        }
        if let Some(v) = self.split_ratio {
            cfg.split_ratio = v;
        }
        if let Some(v) = self.split_seed {
            cfg.split_seed = v;
        }
        if let Some(v) = self.prompt_length {
            cfg.train.prompt_length = v;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.crop_size {
            cfg.train.crop_size = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.eval_crops {
            cfg.eval_crops = v;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = self.logistic_fit {
            cfg.logistic_fit = v;
        }
        if let Some(v) = self.alignment_mode {
            cfg.train.alignment_mode = v;
        }
        if let Some(v) = self.textual_prompts {
            cfg.train.ablation.textual_prompts = v;
        }
        if let Some(v) = self.visual_prompts {
            cfg.train.ablation.visual_prompts = v;
        }
        if let Some(v) = self.conditioning {
            cfg.train.ablation.conditioning = v;
        }
        if let Some(v) = self.auxiliary_task {
            cfg.train.ablation.auxiliary_task = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "agiqa",
    version,
    about = "Prompt-learned blind quality assessment for AI-generated images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train prompts and couplers; writes state.ckpt, train.log, config.lock.
    Train(RunArgs),
    /// Evaluate a trained state on the test split; writes report files.
    Eval(RunArgs),
    /// Score images with a trained state.
    Predict(PredictArgs),
    /// Run the five-variant component ablation grid.
    Ablate(RunArgs),
    /// Per-generator agreement between alignment and perceptual scores.
    Analyze(RunArgs),
    /// Repeat protocol: re-split, retrain, evaluate; aggregate the repeats.
    Report(RunArgs),
    /// Generate the deterministic synthetic dataset on disk.
    Synth(SynthArgs),
    /// Write the seeded toy backbone as a loadable checkpoint.
    ExportBackbone(ExportBackboneArgs),
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also print the alignment score per image.
    #[arg(long)]
    with_align: bool,
    /// User prompt for text-conditioned alignment scoring.
    #[arg(long)]
    prompt: Option<String>,
    /// Images to score.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_images: usize,
    #[arg(long, default_value_t = 8)]
    n_groups: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExportBackboneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Destination checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

// ── shared plumbing ──────────────────────────────────────────────────

fn resolve_backbone(cfg: &RunConfig) -> Result<Backbone> {
    match &cfg.backbone_path {
        Some(path) => Backbone::load_pretrained(path),
        None => make_toy_backbone(cfg.backbone_seed, &cfg.backbone),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<(Vec<SampleRecord>, DiskProvider)> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--manifest is required for this command".into()))?;
    let records = load_manifest(manifest, cfg.format)?;
    let root = match &cfg.image_root {
        Some(r) => r.clone(),
        None => manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    Ok((records, DiskProvider { root }))
}

fn write_lock(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))?;
    fs::write(cfg.out_dir.join("config.lock"), text + "\n")?;
    Ok(())
}

fn expected_fingerprint(backbone: &Backbone, cfg: &RunConfig) -> ConfigFingerprint {
    ConfigFingerprint { backbone: backbone.cfg, train: cfg.train }
}

/// The seeded crop set every scoring command uses for one image.
fn image_crops(image: &RgbImage, path_key: &str, cfg: &RunConfig) -> Result<Vec<RgbImage>> {
    let mut rng = data::crop_rng(cfg.train.seed, path_key);
    (0..cfg.eval_crops).map(|_| data::sample_crop(image, cfg.train.crop_size, &mut rng)).collect()
}

fn mean_percept_score(
    backbone: &Backbone,
    crops: &[RgbImage],
    visual_prompts: &[crate::mat::Mat],
    cached: &CachedPair,
) -> Result<f64> {
    let mut acc = 0.0;
    for crop in crops {
        acc += scoring::score_image_cached(backbone, crop, visual_prompts, cached)?.value;
    }
    Ok(acc / crops.len() as f64)
}

/// Per-image mean-of-crops perceptual scores and normalized targets over
/// the test split.
fn score_test_split(
    backbone: &Backbone,
    state: &TrainableState,
    split: &DatasetSplit,
    provider: &dyn ImageProvider,
    cfg: &RunConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let head = state.percept_head(AntonymPair::percept_default())?;
    let cached = head.encode_pair(backbone)?;
    let mut predictions = Vec::with_capacity(split.test.len());
    let mut targets = Vec::with_capacity(split.test.len());
    let mut cache: HashMap<&str, RgbImage> = HashMap::new();
    for r in &split.test {
        if !cache.contains_key(r.image_path.as_str()) {
            cache.insert(&r.image_path, provider.load(&r.image_path)?);
        }
        let crops = image_crops(&cache[r.image_path.as_str()], &r.image_path, cfg)?;
        predictions.push(mean_percept_score(backbone, &crops, &head.visual_prompts, &cached)?);
        targets.push(split.normalizer.normalize_percept(r.mos_percept));
    }
    Ok((predictions, targets))
}

fn write_report_files(cfg: &RunConfig, report: &CorrelationReport) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("report.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let emit = |w: &mut csv::Writer<fs::File>, row: &str, t: [f64; 3], n: usize| {
        w.write_record([
            row,
            &t[0].to_string(),
            &t[1].to_string(),
            &t[2].to_string(),
            &n.to_string(),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    };
    w.write_record(["row", "srcc", "plcc", "krcc", "n"])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for (i, r) in report.repeats.iter().enumerate() {
        emit(&mut w, &format!("repeat{i}"), [r.triple.srcc, r.triple.plcc, r.triple.krcc], r.n)?;
    }
    emit(&mut w, "mean", [report.srcc, report.plcc, report.krcc], report.n)?;
    emit(
        &mut w,
        "stddev",
        [report.stddev.srcc, report.stddev.plcc, report.stddev.krcc],
        report.repeats.len(),
    )?;
    w.flush()?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    fs::write(cfg.out_dir.join("report.json"), json + "\n")?;
    Ok(())
}

// ── commands ─────────────────────────────────────────────────────────

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let backbone = resolve_backbone(cfg)?;
    let (records, provider) = load_dataset(cfg)?;
    let split = split_by_prompt(&records, cfg.split_ratio, cfg.split_seed)?;
    let (state, log) = fit(&backbone, &split, &provider, &cfg.train)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut lines = String::new();
    for e in &log {
        println!(
            "epoch {}: loss_percept={:.6} loss_align={:.6} loss_total={:.6} ({:.2}s)",
            e.epoch, e.loss_percept, e.loss_align, e.loss_total, e.wall_seconds
        );
        // Wall time stays out of the file so reruns produce identical logs.
        lines.push_str(&format!(
            "epoch={} loss_percept={} loss_align={} loss_total={}\n",
            e.epoch, e.loss_percept, e.loss_align, e.loss_total
        ));
    }
    lines.push_str(&format!("steps={}\n", state.step_count));
    fs::write(cfg.out_dir.join("train.log"), lines)?;
    training::save_state(&cfg.out_dir.join("state.ckpt"), &state)?;
    write_lock(cfg)?;
    println!(
        "trained {} steps over {} images; wrote {}",
        state.step_count,
        split.train.len(),
        cfg.out_dir.join("state.ckpt").display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let backbone = resolve_backbone(cfg)?;
    let (records, provider) = load_dataset(cfg)?;
    let split = split_by_prompt(&records, cfg.split_ratio, cfg.split_seed)?;
    let state = training::load_state(&cfg.state_path())?;
    state.fingerprint.check_shapes(&expected_fingerprint(&backbone, cfg))?;
    let (predictions, targets) = score_test_split(&backbone, &state, &split, &provider, cfg)?;
    let report = metrics::evaluate(&[(predictions, targets)], cfg.logistic_fit)?;
    write_report_files(cfg, &report)?;
    write_lock(cfg)?;
    println!(
        "test n={}: srcc={:.4} plcc={:.4} krcc={:.4}",
        report.n, report.srcc, report.plcc, report.krcc
    );
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> Result<()> {
    let backbone = resolve_backbone(cfg)?;
    let state = training::load_state(&cfg.state_path())?;
    state.fingerprint.check_shapes(&expected_fingerprint(&backbone, cfg))?;
    let provider = DiskProvider {
        root: cfg.image_root.clone().unwrap_or_else(|| PathBuf::from(".")),
    };
    let percept_head = state.percept_head(AntonymPair::percept_default())?;
    let percept_cached = percept_head.encode_pair(&backbone)?;
    let align_head = state.align_head(AntonymPair::align_default())?;
    let align_cached = align_head.encode_pair(&backbone)?;
    let mode = state.fingerprint.train.alignment_mode;
    for path in &args.images {
        let key = path.to_string_lossy();
        let image = provider.load(&key)?;
        let crops = image_crops(&image, &key, cfg)?;
        let percept =
            mean_percept_score(&backbone, &crops, &percept_head.visual_prompts, &percept_cached)?;
        if args.with_align {
            let align = match mode {
                AlignmentMode::Blind => mean_percept_score(
                    &backbone,
                    &crops,
                    &align_head.visual_prompts,
                    &align_cached,
                )?,
                AlignmentMode::TextConditioned => {
                    let prompt = args.prompt.as_ref().ok_or_else(|| {
                        Error::InvalidConfig(
                            "--prompt is required for text-conditioned alignment".into(),
                        )
                    })?;
                    let tokens = backbone.tokenize(prompt);
                    let mut acc = 0.0;
                    for crop in &crops {
                        acc += scoring::score_alignment_text_conditioned(
                            &backbone,
                            crop,
                            &tokens,
                            &align_head.visual_prompts,
                        )?
                        .value;
                    }
                    acc / crops.len() as f64
                }
            };
            println!("{}\t{}\t{}", key, percept, align);
        } else {
            println!("{}\t{}", key, percept);
        }
    }
    Ok(())
}

/// The component grid: no prompts, textual only, textual+visual, the full
/// coupled model, and the text-conditioned alignment variant.
fn ablation_grid() -> Vec<(&'static str, AblationFlags, AlignmentMode, bool)> {
    let a1 = AblationFlags {
        textual_prompts: true,
        visual_prompts: false,
        conditioning: false,
        auxiliary_task: false,
    };
    let a2 = AblationFlags { visual_prompts: true, ..a1 };
    vec![
        ("zero-shot", AblationFlags::zero_shot(), AlignmentMode::Blind, false),
        ("textual", a1, AlignmentMode::Blind, true),
        ("textual+visual", a2, AlignmentMode::Blind, true),
        ("full", AblationFlags::default(), AlignmentMode::Blind, true),
        ("text-conditioned", AblationFlags::default(), AlignmentMode::TextConditioned, true),
    ]
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let backbone = resolve_backbone(cfg)?;
    let (records, provider) = load_dataset(cfg)?;
    let split = split_by_prompt(&records, cfg.split_ratio, cfg.split_seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("ablation.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    w.write_record(["variant", "srcc", "plcc", "krcc", "train_seconds", "eval_seconds"])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for (name, flags, mode, trains) in ablation_grid() {
        let mut train_cfg = cfg.train;
        train_cfg.ablation = flags;
        train_cfg.alignment_mode = mode;
        if !trains {
            train_cfg.epochs = 0;
        }
        let t0 = Instant::now();
        let (state, _) = fit(&backbone, &split, &provider, &train_cfg)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let mut eval_cfg = cfg.clone();
        eval_cfg.train = train_cfg;
        let (predictions, targets) =
            score_test_split(&backbone, &state, &split, &provider, &eval_cfg)?;
        let triple = metrics::correlation_triple(&predictions, &targets, cfg.logistic_fit)?;
        let eval_seconds = t1.elapsed().as_secs_f64();
        println!(
            "{name}: srcc={:.4} plcc={:.4} krcc={:.4} (train {:.2}s, eval {:.2}s)",
            triple.srcc, triple.plcc, triple.krcc, train_seconds, eval_seconds
        );
        w.write_record([
            name,
            &triple.srcc.to_string(),
            &triple.plcc.to_string(),
            &triple.krcc.to_string(),
            &train_seconds.to_string(),
            &eval_seconds.to_string(),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    w.flush()?;
    write_lock(cfg)?;
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--manifest is required for this command".into()))?;
    let records = load_manifest(manifest, cfg.format)?;
    let table = metrics::alignment_perception_analysis(&records)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("analysis.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    w.write_record(["generator", "n", "srcc", "note"])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for row in &table.rows {
        let srcc = row.srcc.map(|v| v.to_string()).unwrap_or_default();
        let note = row.note.clone().unwrap_or_default();
        w.write_record([row.generator.as_str(), &row.n.to_string(), &srcc, &note])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        println!("{}: n={} srcc={}", row.generator, row.n, if srcc.is_empty() { "-" } else { &srcc });
    }
    w.write_record(["overall", &table.overall_n.to_string(), &table.overall_srcc.to_string(), ""])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    w.flush()?;
    write_lock(cfg)?;
    println!("overall: n={} srcc={}", table.overall_n, table.overall_srcc);
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let backbone = resolve_backbone(cfg)?;
    let (records, provider) = load_dataset(cfg)?;
    let mut pairs = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let split = split_by_prompt(&records, cfg.split_ratio, cfg.split_seed + r as u64)?;
        let (state, _) = fit(&backbone, &split, &provider, &cfg.train)?;
        let pair = {
            let (predictions, targets) =
                score_test_split(&backbone, &state, &split, &provider, cfg)?;
            (predictions, targets)
        };
        let triple = metrics::correlation_triple(&pair.0, &pair.1, cfg.logistic_fit)?;
        println!(
            "repeat {r}: n={} srcc={:.4} plcc={:.4} krcc={:.4}",
            pair.0.len(),
            triple.srcc,
            triple.plcc,
            triple.krcc
        );
        pairs.push(pair);
    }
    let report = metrics::evaluate(&pairs, cfg.logistic_fit)?;
    write_report_files(cfg, &report)?;
    write_lock(cfg)?;
    println!(
        "mean over {} repeats: srcc={:.4} plcc={:.4} krcc={:.4} (stddev {:.4}/{:.4}/{:.4})",
        report.repeats.len(),
        report.srcc,
        report.plcc,
        report.krcc,
        report.stddev.srcc,
        report.stddev.plcc,
        report.stddev.krcc
    );
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let ds = data::make_synthetic_dataset(args.seed, args.n_images, args.n_groups)?;
    fs::create_dir_all(args.out_dir.join("synthetic"))?;
    for (path, image) in &ds.images {
        image.save_png(&args.out_dir.join(path))?;
    }
    let manifest = args.out_dir.join("manifest.csv");
    write_manifest(&manifest, &ds.records)?;
    println!("wrote {} images and {}", ds.images.len(), manifest.display());
    Ok(())
}

fn cmd_export_backbone(cfg: &RunConfig, out: &Path) -> Result<()> {
    let backbone = make_toy_backbone(cfg.backbone_seed, &cfg.backbone)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    backbone.save(out)?;
    println!("wrote backbone (seed {}) to {}", cfg.backbone_seed, out.display());
    Ok(())
}

// ── entry point ──────────────────────────────────────────────────────

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(&args.resolve()?),
        Command::Eval(args) => cmd_eval(&args.resolve()?),
        Command::Predict(args) => cmd_predict(&args.run.resolve()?, args),
        Command::Ablate(args) => cmd_ablate(&args.resolve()?),
        Command::Analyze(args) => cmd_analyze(&args.resolve()?),
        Command::Report(args) => cmd_report(&args.resolve()?),
        Command::Synth(args) => cmd_synth(args),
        Command::ExportBackbone(args) => cmd_export_backbone(&args.run.resolve()?, &args.out),
    }
}

/// Parse arguments, run the command, return the process exit code
/// (0 success, 2 usage/input error, 3 numerical abort).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
