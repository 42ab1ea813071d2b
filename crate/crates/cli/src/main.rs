//! `nmae`: index, pretrain, visualize, selftest and synthetic-world commands.
//!
//! Exit codes: 0 success, 1 a checked property failed, 2 usage or I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use nmae_core::augmentation::FileSource;
use nmae_core::geo_index::{build_index_with, read_metadata, NeighborIndex};
use nmae_core::imagery::save_png;
use nmae_core::masking::MaskConfig;
use nmae_core::model::{load_checkpoint, MaskedAutoencoder};
use nmae_core::pipeline::Dataset;
use nmae_core::selftest::{run_selftest, Fault};
use nmae_core::synthetic::{generate, verify_consistency, OverlapMode, WorldSpec};
use nmae_core::trainer::{pretrain, PretrainConfig};
use nmae_core::visibility::WeightPolicy;
use nmae_core::visualize::{panel_pair, render_panels};
use nmae_core::Execution;

#[derive(Parser)]
#[command(
    name = "nmae",
    version,
    about = "Masked autoencoder pretraining on geospatially neighboring image pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the neighbor lookup table from image metadata.
    Index(IndexArgs),
    /// Pretrain the masked autoencoder.
    Pretrain(PretrainArgs),
    /// Render reconstruction panels for one pair.
    Visualize(VisualizeArgs),
    /// Run the built-in gradient, geometry and partition checks.
    Selftest(SelftestArgs),
    /// Render a synthetic world and cut it into georeferenced tiles.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexFormat {
    Binary,
    Json,
}

#[derive(Args)]
struct IndexArgs {
    /// Metadata file, one JSON record per line.
    #[arg(long)]
    meta: PathBuf,
    /// IoU threshold; pairs need IoU strictly above it.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
    /// Output format; defaults to JSON for `.json` paths, binary otherwise.
    #[arg(long, value_enum)]
    format: Option<IndexFormat>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    meta: PathBuf,
    /// Neighbor index (binary or `.json`). Built on the fly when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Threshold used when the index is built on the fly.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// JSON config with `model` and `train` sections; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// `mask=<m1>,<m2>` or `weights=<policy>`; may be repeated.
    #[arg(long)]
    ablation: Vec<Ablation>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    /// Two image ids separated by a comma.
    #[arg(long)]
    pair: String,
    /// Output PNG; a JSON summary is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ours")]
    policy: WeightPolicy,
    /// Mask ratio bounds as `<m1>,<m2>`.
    #[arg(long, default_value = "0.75,0.85")]
    mask: String,
    /// Let the second image show exactly the patches the first one hides.
    #[arg(long)]
    complementary: bool,
}

#[derive(Args)]
struct SelftestArgs {
    /// Deliberately break one code path (`weight-detachment`).
    #[arg(long)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON world spec; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    world_px: Option<usize>,
    #[arg(long)]
    tile_px: Option<usize>,
    #[arg(long)]
    tiles: Option<usize>,
    #[arg(long)]
    stride_px: Option<usize>,
    #[arg(long, value_parser = parse_overlap)]
    overlap: Option<OverlapMode>,
    #[arg(long)]
    revisit_noise: Option<f64>,
    /// Check that overlapping tiles agree on their shared ground.
    #[arg(long)]
    verify: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Ablation {
    Mask(MaskConfig),
    Weights(WeightPolicy),
}

impl FromStr for Ablation {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some(("mask", v)) => Ok(Ablation::Mask(parse_mask(v)?)),
            Some(("weights", v)) => Ok(Ablation::Weights(v.parse()?)),
            _ => bail!("expected mask=<m1>,<m2> or weights=<policy>, got `{s}`"),
        }
    }
}

fn parse_mask(s: &str) -> Result<MaskConfig> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| anyhow!("expected <m1>,<m2>, got `{s}`"))?;
    Ok(MaskConfig::new(a.trim().parse()?, b.trim().parse()?)?)
}

fn parse_overlap(s: &str) -> Result<OverlapMode> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| anyhow!("unknown overlap mode `{s}` (grid_adjacent, random_jitter, revisit)"))
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    PropertyFailed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = execution().and_then(|exec| match cli.command {
        Command::Index(a) => cmd_index(a, exec),
        Command::Pretrain(a) => cmd_pretrain(a, exec),
        Command::Visualize(a) => cmd_visualize(a),
        Command::Selftest(a) => cmd_selftest(a, exec),
        Command::Generate(a) => cmd_generate(a),
    });
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::PropertyFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out = format!("{out}: {text}");
        }
    }
    out
}

/// `NMAE_THREADS` caps the worker pool; 1 selects the sequential path.
fn execution() -> Result<Execution> {
    let Ok(raw) = std::env::var("NMAE_THREADS") else {
        return Ok(Execution::default());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("NMAE_THREADS must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        bail!("NMAE_THREADS must be at least 1");
    }
    if n == 1 || !Execution::parallel_available() {
        return Ok(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(Execution::Parallel)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn load_index(path: &Path) -> Result<NeighborIndex> {
    if is_json(path) {
        read_json(path)
    } else {
        NeighborIndex::load(path).with_context(|| format!("loading index {}", path.display()))
    }
}

fn load_dataset(meta: &Path) -> Result<Dataset> {
    let records = read_metadata(meta).with_context(|| format!("reading metadata {}", meta.display()))?;
    let root = meta.parent().unwrap_or(Path::new("."));
    Ok(Dataset::load(records, &FileSource::new(root))?)
}

fn cmd_index(args: IndexArgs, exec: Execution) -> Result<Status> {
    let records = read_metadata(&args.meta).with_context(|| format!("reading metadata {}", args.meta.display()))?;
    let index = build_index_with(&records, args.alpha, exec)?;
    match args.format.unwrap_or(if is_json(&args.out) {
        IndexFormat::Json
    } else {
        IndexFormat::Binary
    }) {
        IndexFormat::Json => index.save_json(&args.out)?,
        IndexFormat::Binary => index.save(&args.out)?,
    }
    println!("{} images, alpha {}", index.len(), args.alpha);
    println!("neighbors  images");
    for (degree, count) in index.degree_histogram().iter().enumerate() {
        if *count > 0 {
            println!("{degree:>9}  {count}");
        }
    }
    Ok(Status::Ok)
}

fn pretrain_config(args: &PretrainArgs) -> Result<PretrainConfig> {
    let mut config: PretrainConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => PretrainConfig::default(),
    };
    for ablation in &args.ablation {
        match ablation {
            Ablation::Mask(m) => config.train.mask = *m,
            Ablation::Weights(p) => config.train.policy = *p,
        }
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
        config.train.warmup_epochs = config.train.warmup_epochs.min(epochs);
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_pretrain(args: PretrainArgs, exec: Execution) -> Result<Status> {
    let config = pretrain_config(&args)?;
    let dataset = load_dataset(&args.meta)?;
    let index = match &args.index {
        Some(path) => load_index(path)?,
        None => build_index_with(dataset.records(), args.alpha, exec)?,
    };
    log::info!(
        "{} images, policy {}, mask {:?}, {} threads",
        dataset.len(),
        config.train.policy,
        config.train.mask,
        exec.num_threads()
    );
    let out = pretrain(&dataset, &index, config, &args.out_dir, args.resume, exec)?;
    match (out.history.first(), out.history.last()) {
        (Some(first), Some(last)) => println!(
            "{} steps, loss {:.5} -> {:.5}; checkpoint {}, metrics {}",
            out.history.len(),
            first.loss,
            last.loss,
            out.checkpoint.display(),
            out.metrics.display()
        ),
        _ => println!("no steps run; checkpoint {}", out.checkpoint.display()),
    }
    Ok(Status::Ok)
}

fn cmd_visualize(args: VisualizeArgs) -> Result<Status> {
    let (a, b) = args
        .pair
        .split_once(',')
        .ok_or_else(|| anyhow!("--pair expects two ids separated by a comma"))?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = MaskedAutoencoder::from_checkpoint(&ckpt)?;
    let dataset = load_dataset(&args.meta)?;
    let cfg = &model.config;
    let pair = panel_pair(
        &dataset,
        (a.trim(), b.trim()),
        cfg.input_size,
        cfg.patch_size,
        &parse_mask(&args.mask)?,
        args.seed,
        args.complementary,
    )?;
    let panels = render_panels(&model, &pair, args.policy)?;
    save_png(&args.out, panels.image.view())?;
    let sidecar = args.out.with_extension("json");
    fs::write(&sidecar, serde_json::to_string_pretty(&panels.summary)?)
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!("wrote {} and {}", args.out.display(), sidecar.display());
    Ok(Status::Ok)
}

fn cmd_selftest(args: SelftestArgs, exec: Execution) -> Result<Status> {
    let outcomes = run_selftest(args.inject_fault, exec);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(Status::Ok)
    } else {
        eprintln!("failing properties: {}", failed.join(", "));
        Ok(Status::PropertyFailed)
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<Status> {
    let mut spec: WorldSpec = match &args.config {
        Some(path) => read_json(path)?,
        None => WorldSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.world_px {
        spec.world_px = v;
    }
    if let Some(v) = args.tile_px {
        spec.tile_px = v;
    }
    if let Some(v) = args.tiles {
        spec.n_tiles = v;
    }
    if let Some(v) = args.stride_px {
        spec.stride_px = v;
    }
    if let Some(v) = args.overlap {
        spec.overlap_mode = v;
    }
    if let Some(v) = args.revisit_noise {
        spec.revisit_noise = v;
    }
    spec.validate()?;
    let world = generate(&spec, &args.out_dir)?;
    println!("{} tiles, metadata {}", world.records.len(), world.metadata.display());
    if !args.verify {
        return Ok(Status::Ok);
    }
    let report = verify_consistency(
        &world.records,
        &FileSource::new(&args.out_dir),
        spec.revisit_noise,
        200,
        spec.seed,
    )?;
    let failures = report.failures();
    println!(
        "consistency: {} pairs checked, {} over tolerance {:.4}",
        report.pairs.len(),
        failures.len(),
        report.tolerance
    );
    for f in &failures {
        println!("  {} / {}: mean abs diff {:.4}", f.a, f.b, f.mean_abs_diff);
    }
    Ok(if report.passed() {
        Status::Ok
    } else {
        Status::PropertyFailed
    })
}
