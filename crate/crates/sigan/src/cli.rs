//! Command-line entry point: dataset generation, corpus statistics, training,
//! evaluation, and single-image inference.
//!
//! Exit codes: 0 success (including `--help`), 1 usage or configuration
//! error, 2 missing or malformed data, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array3;
use serde::Serialize;

use crate::data::{digest_of, SixTuple};
use crate::eval::{evaluate, restore_generator, write_comparison_grid};
use crate::model::Checkpoint;
use crate::scene::{render_six_tuple, sample_paired_specs, sample_spec};
use crate::store::{
    compute_stats, default_bin_edges, load_all, load_image_png, load_mask_png, read_manifest,
    write_manifest, write_sample, DatasetManifest, Histogram, MANIFEST_VERSION,
};
use crate::trainer::{ablation_row, fit, TrainConfig};
use crate::{Error, Result};

/// Env var supplying the seed when `--seed` is not given.
pub const SEED_ENV: &str = "SIGAN_SEED";
const METRICS_FILE: &str = "metrics.json";
const RESOLVED_CONFIG_FILE: &str = "train_config.json";

#[derive(Debug, Parser)]
#[command(
    name = "sigan",
    version,
    about = "Object-illumination harmonization: synthesize datasets, train the relighting GAN, evaluate, and relight composites"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of composite/ground-truth six-tuples
    Gen(GenArgs),
    /// Summarize a dataset: area-ratio histograms and an illumination probability map
    Stats(StatsArgs),
    /// Train the relighting GAN on a generated dataset
    Train(TrainArgs),
    /// Score a checkpoint against a dataset (RMSE / PSNR / SSIM, with the unedited-composite baseline)
    Eval(EvalArgs),
    /// Relight one composite image with a trained checkpoint
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of scenes to generate (doubled by --paired)
    #[arg(long)]
    pub count: usize,
    /// Base RNG seed; scene k uses seed+k [default: $SIGAN_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side in pixels (multiple of 32 to be trainable)
    #[arg(long, default_value_t = 256)]
    pub side: usize,
    /// Emit two samples per scene, identical except for the object light,
    /// and record the pairing in the manifest
    #[arg(long)]
    pub paired: bool,
    /// Output dataset directory (created if absent)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset directory (as written by `sigan gen`)
    pub dir: PathBuf,
    /// Output JSON path; PNG renderings land next to it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (as written by `sigan gen`)
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; omitted fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for checkpoints and the loss log
    #[arg(long)]
    pub out: PathBuf,
    /// Seed override (beats $SIGAN_SEED, which beats the config file)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation row: a label such as `basic` or `full`, or a 1-based index
    #[arg(long, value_name = "ROW")]
    pub ablation: Option<String>,
    /// Stop after this many optimization steps
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Epoch count override
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Resume from a checkpoint written by an earlier run
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory (as written by `sigan gen`)
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to score
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory for metrics.json (and grids/ with --grids)
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config describing the checkpointed model; omitted fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write per-sample composite|relit|ground-truth comparison strips
    #[arg(long)]
    pub grids: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Composite image PNG (object pasted without illumination adjustment)
    #[arg(long)]
    pub composite: PathBuf,
    /// Binary object mask PNG (white = inserted object)
    #[arg(long)]
    pub object_mask: PathBuf,
    /// Binary background mask PNG (white = background)
    #[arg(long)]
    pub background_mask: PathBuf,
    /// Checkpoint to relight with
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output PNG path for the relit image; predicted illumination maps land
    /// next to it as <stem>.object_illum.png and <stem>.background_illum.png
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config describing the checkpointed model; omitted fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parse argv and run; the return value is the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Stats(args) => cmd_stats(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Infer(args) => cmd_infer(&args),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}"))),
        Err(_) => Ok(None),
    }
}

/// Fingerprint of the generation recipe, recorded in the manifest so reruns
/// are recognizable.
#[derive(Serialize)]
struct GenRecipe {
    count: usize,
    seed: u64,
    side: usize,
    paired: bool,
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let recipe = GenRecipe { count: args.count, seed, side: args.side, paired: args.paired };

    let mut tuples: Vec<SixTuple> = Vec::new();
    let mut pair_map = std::collections::BTreeMap::new();
    for k in 0..args.count {
        let scene_seed = seed.wrapping_add(k as u64);
        if args.paired {
            let (a, b) = sample_paired_specs(scene_seed, args.side)?;
            let (ta, tb) = (render_six_tuple(&a)?, render_six_tuple(&b)?);
            pair_map.insert(ta.sample_id.clone(), tb.sample_id.clone());
            pair_map.insert(tb.sample_id.clone(), ta.sample_id.clone());
            tuples.push(ta);
            tuples.push(tb);
        } else {
            tuples.push(render_six_tuple(&sample_spec(scene_seed, args.side)?)?);
        }
    }

    let envmap_dim = tuples[0].object_illum.radiance.dim();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        sample_ids: tuples.iter().map(|t| t.sample_id.clone()).collect(),
        image_side: args.side,
        envmap_shape: (envmap_dim.1, envmap_dim.2),
        generator_config_digest: digest_of(&recipe),
        pair_map: args.paired.then_some(pair_map),
    };
    manifest.validate()?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for tuple in &tuples {
        write_sample(&args.out, tuple)?;
    }
    write_manifest(&args.out, &manifest)?;
    println!(
        "wrote {} samples ({} scenes{}) to {}",
        tuples.len(),
        args.count,
        if args.paired { ", paired" } else { "" },
        args.out.display()
    );
    Ok(())
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let manifest = read_manifest(&args.dir)?;
    let samples = load_all(&args.dir, &manifest)?;
    let stats = compute_stats(&samples, &default_bin_edges())?;

    let json = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::Runtime(format!("stats serialization failed: {e}")))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&args.out, json).map_err(|e| Error::io(&args.out, e))?;

    let object_png = sibling(&args.out, "object_ratio.png");
    let shadow_png = sibling(&args.out, "shadow_ratio.png");
    let prob_png = sibling(&args.out, "illum_probability.png");
    write_histogram_png(&object_png, &stats.object_ratio_histogram)?;
    write_histogram_png(&shadow_png, &stats.shadow_ratio_histogram)?;
    let prob = &stats.illum_probability_map;
    let (h, w) = prob.dim();
    let mut gray = Array3::<f32>::zeros((3, h, w));
    for ch in 0..3 {
        gray.index_axis_mut(ndarray::Axis(0), ch).assign(prob);
    }
    write_array_png(&prob_png, &gray, true)?;
    println!(
        "stats for {} samples: {} plus {}, {}, {}",
        samples.len(),
        args.out.display(),
        object_png.display(),
        shadow_png.display(),
        prob_png.display()
    );
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let body = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&body)
                .map_err(|e| Error::Config(format!("{}: bad training config: {e}", p.display())))
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_train_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    } else if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(row) = &args.ablation {
        let selected = ablation_row(&cfg, row)?;
        println!("ablation row: {}", selected.label);
        cfg = selected.config;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(max_steps) = args.max_steps {
        cfg.max_steps = Some(max_steps);
    }
    cfg.validate()?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let resolved = args.out.join(RESOLVED_CONFIG_FILE);
    let json = serde_json::to_string_pretty(&cfg)
        .map_err(|e| Error::Runtime(format!("config serialization failed: {e}")))?;
    fs::write(&resolved, json).map_err(|e| Error::io(&resolved, e))?;

    let outcome = fit(&cfg, &args.data, &args.out, args.resume.as_deref())?;
    match outcome.last_report {
        Some(r) => println!(
            "trained {} steps; final l_total {:.6}; checkpoint {}",
            outcome.steps_run,
            r.l_total,
            outcome.final_checkpoint.display()
        ),
        None => println!(
            "nothing to do (already at {} steps); checkpoint {}",
            outcome.steps_run,
            outcome.final_checkpoint.display()
        ),
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_train_config(args.config.as_deref())?;
    let manifest = read_manifest(&args.data)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let grid_dir = args.grids.then(|| args.out.join("grids"));
    let report = evaluate(
        &cfg.model,
        &ckpt,
        &manifest.sample_ids,
        &args.data,
        grid_dir.as_deref(),
    )?;
    let path = args.out.join(METRICS_FILE);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Runtime(format!("report serialization failed: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    println!(
        "evaluated {} samples: relit rmse {:.6} (baseline {:.6}), ssim {:.4} (baseline {:.4}); report {}",
        report.per_sample.len(),
        report.aggregate.rmse,
        report.baseline.rmse,
        report.aggregate.ssim,
        report.baseline.ssim,
        path.display()
    );
    Ok(())
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let cfg = load_train_config(args.config.as_deref())?;
    let side = cfg.model.image_side;
    let composite = load_image_png(&args.composite, side)?;
    let object_mask = load_mask_png(&args.object_mask, side)?;
    let background_mask = load_mask_png(&args.background_mask, side)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (net, params) = restore_generator(&cfg.model, &ckpt)?;
    let out = net.infer(&params, &composite, &object_mask, &background_mask)?;

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_comparison_grid(&args.out, &[&out.relit])?;
    let obj_png = sibling(&args.out, "object_illum.png");
    let bg_png = sibling(&args.out, "background_illum.png");
    write_array_png(&obj_png, &out.obj_illum_pred.radiance, true)?;
    write_array_png(&bg_png, &out.bg_illum_pred.radiance, true)?;
    println!(
        "relit image {}; illumination maps {}, {}",
        args.out.display(),
        obj_png.display(),
        bg_png.display()
    );
    Ok(())
}

/// `report.json` + `suffix` → `report.suffix` in the same directory.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Write a `3 x H x W` array as an 8-bit PNG. With `normalize`, values are
/// scaled so the array maximum maps to white (radiance maps are unbounded);
/// otherwise values are clamped to `[0, 1]`.
fn write_array_png(path: &Path, array: &Array3<f32>, normalize: bool) -> Result<()> {
    let (c, h, w) = array.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::Config(format!("png source must be 3 x H x W, got {:?}", array.dim())));
    }
    let peak = if normalize {
        array.iter().cloned().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE)
    } else {
        1.0
    };
    let mut raw = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let v = (array[[ch, row, col]] / peak).clamp(0.0, 1.0);
                raw.push((v * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized to array dimensions");
    buf.save(path)
        .map_err(|e| Error::Data(format!("{}: png write failed: {e}", path.display())))
}

const HISTOGRAM_BAR_WIDTH: usize = 12;
const HISTOGRAM_HEIGHT: usize = 128;

/// Render a histogram as a bar chart PNG: white background, dark bars, one
/// bar per bin, heights proportional to the largest count.
fn write_histogram_png(path: &Path, hist: &Histogram) -> Result<()> {
    let bins = hist.counts.len();
    if bins == 0 {
        return Err(Error::Config("histogram has no bins".into()));
    }
    let (w, h) = (bins * HISTOGRAM_BAR_WIDTH, HISTOGRAM_HEIGHT);
    let peak = hist.counts.iter().copied().max().unwrap_or(0).max(1);
    let mut canvas = Array3::<f32>::ones((3, h, w));
    for (bin, &count) in hist.counts.iter().enumerate() {
        let bar = (count as f64 / peak as f64 * (h - 1) as f64).round() as usize;
        for row in (h - bar)..h {
            // One blank column between bars keeps bins visually separate.
            for col in (bin * HISTOGRAM_BAR_WIDTH)..((bin + 1) * HISTOGRAM_BAR_WIDTH - 1) {
                canvas[[0, row, col]] = 0.15;
                canvas[[1, row, col]] = 0.25;
                canvas[[2, row, col]] = 0.45;
            }
        }
    }
    write_array_png(path, &canvas, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_declaration_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sibling_renames_next_to_the_original() {
        let p = sibling(Path::new("/tmp/run/report.json"), "object_ratio.png");
        assert_eq!(p, Path::new("/tmp/run/report.object_ratio.png"));
        let q = sibling(Path::new("out.png"), "background_illum.png");
        assert_eq!(q, Path::new("out.background_illum.png"));
    }

    #[test]
    fn histogram_png_rejects_empty_histograms() {
        let dir = tempfile::tempdir().unwrap();
        let hist = Histogram { edges: vec![0.0], counts: vec![] };
        assert!(write_histogram_png(&dir.path().join("h.png"), &hist).is_err());
    }

    #[test]
    fn array_png_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut a = Array3::<f32>::zeros((3, 4, 6));
        a[[0, 0, 0]] = 1.0;
        a[[1, 2, 3]] = 0.5;
        write_array_png(&path, &a, false).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (6, 4));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(3, 2).0, [0, 128, 0]);
    }

    #[test]
    fn normalized_png_maps_the_peak_to_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.png");
        let mut a = Array3::<f32>::zeros((3, 2, 2));
        a[[0, 0, 0]] = 8.0;
        a[[1, 0, 0]] = 4.0;
        write_array_png(&path, &a, true).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(0, 0).0, [255, 128, 0]);
    }
}
