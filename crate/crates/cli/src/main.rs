//! Command-line entry point wiring dataset generation, training, K-selection,
//! translation, and evaluation into reproducible runs.

use clap::{Args, Parser, Subcommand};
use gmm_translate::error::Error as CoreError;
use gmm_translate::eval::{
    default_threshold, latent_cluster_dump, structure_metrics, translate_image, Direction,
    StructureMetrics,
};
use gmm_translate::networks::Domain;
use gmm_translate::phantom_data::{
    build_dataset, load_dataset, read_image, write_image, Dataset, PhantomSpec,
};
use gmm_translate::training::{
    load_checkpoint, select_k, train, Checkpoint, TrainConfig,
};
use gmm_translate::SeedStream;
use rand::SeedableRng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "gmmtrans",
    version,
    about = "Patch-based unpaired image translation with a shared Gaussian-mixture latent space"
)]
struct Cli {
    /// Worker threads (overrides the GMMTRANS_THREADS environment variable;
    /// default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain phantom dataset.
    Dataset(DatasetArgs),
    /// Train a translation model.
    Train(TrainArgs),
    /// Translate one image through a trained checkpoint.
    Translate(TranslateArgs),
    /// Evaluate a checkpoint on paired validation/test images.
    Eval(EvalArgs),
    /// Sweep the mixture component count K on the validation split.
    SelectK(SelectKArgs),
    /// Export encoded patch latents for cluster inspection.
    DumpLatent(DumpLatentArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 70)]
    train_a: usize,
    #[arg(long, default_value_t = 70)]
    train_b: usize,
    #[arg(long, default_value_t = 10)]
    val: usize,
    #[arg(long, default_value_t = 20)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    image_size: usize,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    vessel_shift: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (as produced by `dataset`).
    #[arg(long)]
    data: PathBuf,
    /// Run output directory (loss log, checkpoints, run manifest).
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint written by an identical config.
    #[arg(long)]
    resume: Option<PathBuf>,

    // flag overrides, one per config key
    #[arg(long)]
    lambda0: Option<String>,
    #[arg(long)]
    lambda1: Option<String>,
    #[arg(long)]
    lambda2: Option<String>,
    #[arg(long)]
    lambda3: Option<String>,
    #[arg(long)]
    lambda4: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    latent_dim: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    #[arg(long)]
    channel_widths: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    mixture_logits: Option<String>,
    #[arg(long)]
    patches_per_image: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    learning_rate_gen: Option<String>,
    #[arg(long)]
    learning_rate_disc: Option<String>,
    #[arg(long)]
    temperature_start: Option<String>,
    #[arg(long)]
    temperature_end: Option<String>,
    #[arg(long)]
    kl_estimator: Option<String>,
    #[arg(long)]
    kl_samples: Option<String>,
    #[arg(long)]
    max_grad_norm: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    checkpoint_interval: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("lambda0", &self.lambda0),
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("lambda3", &self.lambda3),
            ("lambda4", &self.lambda4),
            ("k", &self.k),
            ("latent_dim", &self.latent_dim),
            ("patch_size", &self.patch_size),
            ("channel_widths", &self.channel_widths),
            ("activation", &self.activation),
            ("mixture_logits", &self.mixture_logits),
            ("patches_per_image", &self.patches_per_image),
            ("batch_size", &self.batch_size),
            ("steps", &self.steps),
            ("learning_rate_gen", &self.learning_rate_gen),
            ("learning_rate_disc", &self.learning_rate_disc),
            ("temperature_start", &self.temperature_start),
            ("temperature_end", &self.temperature_end),
            ("kl_estimator", &self.kl_estimator),
            ("kl_samples", &self.kl_samples),
            ("max_grad_norm", &self.max_grad_norm),
            ("seed", &self.seed),
            ("checkpoint_interval", &self.checkpoint_interval),
        ]
    }
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Translation direction: 1to2 or 2to1.
    #[arg(long = "dir")]
    direction: String,
    /// Output image path (default: `<input stem>_<dir>.png` next to the input).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tiling stride (default: patch_size / 2).
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long = "dir", default_value = "1to2")]
    direction: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stride: Option<usize>,
    /// Detection threshold (default: midpoint between the default phantom's
    /// organ and plaque intensity ranges).
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write the translated images into the output directory.
    #[arg(long, default_value_t = false)]
    save_images: bool,
}

#[derive(Args)]
struct SelectKArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated K values, e.g. 1,8,25.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct DumpLatentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to sample patches from.
    #[arg(long, default_value = "train_a")]
    split: String,
    /// Domain whose encoder is used (1 or 2).
    #[arg(long, default_value_t = 1)]
    domain: u8,
    /// Number of patches to encode.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Reproducibility record written into every run directory.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    config_sha256: Option<String>,
    dataset_manifest_sha256: Option<String>,
    code_version: String,
    seed: u64,
    outputs: Vec<String>,
    duration_ms: u128,
}

fn sha256_file(path: &Path) -> Option<String> {
    let bytes = std::fs::read(path).ok()?;
    Some(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CoreError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join("run_manifest.json"), json)?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("GMMTRANS_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(num_threads_default);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();

    let (stage, result) = match &cli.command {
        Command::Dataset(args) => ("dataset", cmd_dataset(args)),
        Command::Train(args) => ("train", cmd_train(args)),
        Command::Translate(args) => ("translate", cmd_translate(args)),
        Command::Eval(args) => ("eval", cmd_eval(args)),
        Command::SelectK(args) => ("select-k", cmd_select_k(args)),
        Command::DumpLatent(args) => ("dump-latent", cmd_dump_latent(args)),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error in stage '{stage}': {e}");
            let code = match e {
                CoreError::Config(_) | CoreError::Incompatible(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn num_threads_default() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn cmd_dataset(args: &DatasetArgs) -> Result<(), CoreError> {
    let start = Instant::now();
    let mut spec = PhantomSpec {
        image_size: args.image_size,
        ..PhantomSpec::default()
    };
    if let Some(s) = args.noise_sigma {
        spec.noise_sigma = s;
    }
    if let Some(s) = args.vessel_shift {
        spec.vessel_intensity_shift = s;
    }
    build_dataset(
        &spec,
        args.train_a,
        args.train_b,
        args.val,
        args.test,
        &args.out,
        args.seed,
    )?;
    let manifest = RunManifest {
        command: "dataset".into(),
        config_path: None,
        config_sha256: None,
        dataset_manifest_sha256: sha256_file(&args.out.join("manifest.json")),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        outputs: vec![args.out.display().to_string()],
        duration_ms: start.elapsed().as_millis(),
    };
    write_run_manifest(&args.out, &manifest)?;
    println!(
        "dataset: {} train_a + {} train_b + {} val + {} test images in {}",
        args.train_a,
        args.train_b,
        args.val,
        args.test,
        args.out.display()
    );
    Ok(())
}

fn load_config_with_overrides(
    config: &Option<PathBuf>,
    overrides: &[(&'static str, &Option<String>)],
) -> Result<(TrainConfig, Option<String>), CoreError> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            TrainConfig::from_config_text(&text)?
        }
        None => TrainConfig::default(),
    };
    let mut bad = Vec::new();
    for (key, value) in overrides {
        if let Some(v) = value {
            if let Err(e) = cfg.set_key(key, v) {
                bad.push(e.to_string());
            }
        }
    }
    if !bad.is_empty() {
        return Err(CoreError::Config(bad.join("; ")));
    }
    cfg.validate()?;
    Ok((cfg, config.as_ref().map(|p| p.display().to_string())))
}

fn cmd_train(args: &TrainArgs) -> Result<(), CoreError> {
    let start = Instant::now();
    let (cfg, config_path) = load_config_with_overrides(&args.config, &args.overrides())?;
    let dataset = load_dataset(&args.data)?;
    let resume: Option<Checkpoint> = match &args.resume {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let artifacts = train(&dataset, &cfg, Some(&args.out), resume)?;
    // persist the effective config next to the run outputs
    std::fs::write(args.out.join("config.cfg"), cfg.to_config_text())?;
    let manifest = RunManifest {
        command: "train".into(),
        config_path,
        config_sha256: args.config.as_deref().and_then(sha256_file),
        dataset_manifest_sha256: sha256_file(&args.data.join("manifest.json")),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        outputs: vec![
            args.out.join("final.ckpt").display().to_string(),
            args.out.join("loss_log.jsonl").display().to_string(),
        ],
        duration_ms: start.elapsed().as_millis(),
    };
    write_run_manifest(&args.out, &manifest)?;
    let last = artifacts.log.last();
    println!(
        "train: {} steps done, final total_gen {:.4}, total_disc {:.4}",
        artifacts.checkpoint.step,
        last.map_or(f64::NAN, |r| r.report.total_gen),
        last.map_or(f64::NAN, |r| r.report.total_disc),
    );
    Ok(())
}

fn cmd_translate(args: &TranslateArgs) -> Result<(), CoreError> {
    let start = Instant::now();
    let direction = Direction::parse(&args.direction)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let image = read_image(&args.input)?;
    let stride = args.stride.unwrap_or(ckpt.config.patch_size / 2);
    let result = translate_image(&ckpt.bundle, &image, direction, stride)?;
    let out_path = match &args.out {
        Some(p) => p.clone(),
        None => {
            let stem = args
                .input
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "translated".into());
            args.input
                .with_file_name(format!("{stem}_{}.png", direction.name()))
        }
    };
    write_image(&result.output, &out_path)?;
    let run_dir = out_path.parent().unwrap_or(Path::new("."));
    let manifest = RunManifest {
        command: "translate".into(),
        config_path: None,
        config_sha256: None,
        dataset_manifest_sha256: None,
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: ckpt.config.seed,
        outputs: vec![out_path.display().to_string()],
        duration_ms: start.elapsed().as_millis(),
    };
    write_run_manifest(run_dir, &manifest)?;
    let mean_score = result.patch_scores.iter().sum::<f64>() / result.patch_scores.len() as f64;
    println!(
        "translate: {} -> {} ({} patches, mean target realness {:.3})",
        args.input.display(),
        out_path.display(),
        result.patch_scores.len(),
        mean_score
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    direction: String,
    split: String,
    threshold: f64,
    stride: usize,
    images: Vec<StructureMetrics>,
    aggregate: Aggregate,
}

#[derive(Serialize)]
struct Aggregate {
    count: usize,
    precision_mean: f64,
    precision_std: f64,
    recall_mean: f64,
    recall_std: f64,
    dice_mean: f64,
    dice_std: f64,
    retention_mean: f64,
    retention_std: f64,
    plaque_mae_mean: f64,
    plaque_mae_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CoreError> {
    use rayon::prelude::*;
    let start = Instant::now();
    let direction = Direction::parse(&args.direction)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let dataset: Dataset = load_dataset(&args.data)?;
    let pairs = match args.split.as_str() {
        "test" => &dataset.test,
        "val" => &dataset.val,
        other => {
            return Err(CoreError::Config(format!(
                "split must be val or test, got '{other}'"
            )))
        }
    };
    if pairs.is_empty() {
        return Err(CoreError::Contract(format!(
            "no pairs in split '{}'",
            args.split
        )));
    }
    let stride = args.stride.unwrap_or(ckpt.config.patch_size / 2);
    let threshold = args
        .threshold
        .unwrap_or_else(|| default_threshold(&PhantomSpec::default()));
    std::fs::create_dir_all(&args.out)?;

    // per-image evaluation in parallel, aggregated in index order
    let results: Result<Vec<(StructureMetrics, gmm_translate::eval::TranslationResult)>, CoreError> =
        pairs
            .par_iter()
            .map(|pair| {
                let input = match direction {
                    Direction::OneToTwo => &pair.image_a,
                    Direction::TwoToOne => &pair.image_b,
                };
                let t = translate_image(&ckpt.bundle, input, direction, stride)?;
                let m = structure_metrics(&t.output, pair, direction, threshold)?;
                Ok((m, t))
            })
            .collect();
    let results = results?;
    if args.save_images {
        for (i, (_, t)) in results.iter().enumerate() {
            write_image(
                &t.output,
                &args.out.join(format!("{i:04}_{}.png", direction.name())),
            )?;
        }
    }
    let images: Vec<StructureMetrics> = results.into_iter().map(|(m, _)| m).collect();
    let agg = {
        let col = |f: fn(&StructureMetrics) -> f64| -> Vec<f64> { images.iter().map(f).collect() };
        let (pm, ps) = mean_std(&col(|m| m.precision));
        let (rm, rs) = mean_std(&col(|m| m.recall));
        let (dm, dstd) = mean_std(&col(|m| m.dice));
        let (tm, ts) = mean_std(&col(|m| m.plaque_retention));
        let (mm, ms) = mean_std(&col(|m| m.plaque_mae));
        Aggregate {
            count: images.len(),
            precision_mean: pm,
            precision_std: ps,
            recall_mean: rm,
            recall_std: rs,
            dice_mean: dm,
            dice_std: dstd,
            retention_mean: tm,
            retention_std: ts,
            plaque_mae_mean: mm,
            plaque_mae_std: ms,
        }
    };
    println!(
        "eval[{} {}]: dice {:.3} +/- {:.3}, retention {:.3} +/- {:.3}, precision {:.3}, recall {:.3}",
        args.split,
        direction.name(),
        agg.dice_mean,
        agg.dice_std,
        agg.retention_mean,
        agg.retention_std,
        agg.precision_mean,
        agg.recall_mean
    );
    let out = EvalOutput {
        direction: direction.name().into(),
        split: args.split.clone(),
        threshold,
        stride,
        images,
        aggregate: agg,
    };
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&out)?,
    )?;
    let manifest = RunManifest {
        command: "eval".into(),
        config_path: None,
        config_sha256: None,
        dataset_manifest_sha256: sha256_file(&args.data.join("manifest.json")),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: ckpt.config.seed,
        outputs: vec![args.out.join("metrics.json").display().to_string()],
        duration_ms: start.elapsed().as_millis(),
    };
    write_run_manifest(&args.out, &manifest)?;
    Ok(())
}

fn cmd_select_k(args: &SelectKArgs) -> Result<(), CoreError> {
    let start = Instant::now();
    let (cfg, config_path) = load_config_with_overrides(&args.config, &[])?;
    let grid: Result<Vec<usize>, CoreError> = args
        .grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CoreError::Config(format!("bad K value '{s}' in --grid")))
        })
        .collect();
    let grid = grid?;
    let dataset = load_dataset(&args.data)?;
    let threshold = args
        .threshold
        .unwrap_or_else(|| default_threshold(&PhantomSpec::default()));
    let (best, table) = select_k(&dataset, &cfg, &grid, threshold)?;
    println!("{:>5} {:>8} {:>10} {:>10} {:>8}", "K", "dice", "retention", "precision", "recall");
    for row in &table {
        println!(
            "{:>5} {:>8.4} {:>10.4} {:>10.4} {:>8.4}",
            row.k, row.dice, row.retention, row.precision, row.recall
        );
    }
    println!("selected K = {best}");
    std::fs::create_dir_all(&args.out)?;
    #[derive(Serialize)]
    struct SelectKOutput<'a> {
        best_k: usize,
        table: &'a [gmm_translate::training::KMetrics],
    }
    std::fs::write(
        args.out.join("select_k.json"),
        serde_json::to_string_pretty(&SelectKOutput {
            best_k: best,
            table: &table,
        })?,
    )?;
    let manifest = RunManifest {
        command: "select-k".into(),
        config_path,
        config_sha256: args.config.as_deref().and_then(sha256_file),
        dataset_manifest_sha256: sha256_file(&args.data.join("manifest.json")),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        outputs: vec![args.out.join("select_k.json").display().to_string()],
        duration_ms: start.elapsed().as_millis(),
    };
    write_run_manifest(&args.out, &manifest)?;
    Ok(())
}

fn cmd_dump_latent(args: &DumpLatentArgs) -> Result<(), CoreError> {
    let start = Instant::now();
    let ckpt = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset(&args.data)?;
    let domain = Domain::from_id(args.domain)?;
    if (args.split == "train_a" && domain != Domain::D1)
        || (args.split == "train_b" && domain != Domain::D2)
    {
        return Err(CoreError::Config(format!(
            "split {} holds domain-{} images; pass a matching --domain",
            args.split,
            if args.split == "train_a" { 1 } else { 2 }
        )));
    }
    let images: Vec<ndarray::Array2<f64>> = match args.split.as_str() {
        "train_a" => dataset.train_a.clone(),
        "train_b" => dataset.train_b.clone(),
        "val" | "test" => {
            let pairs = if args.split == "val" {
                &dataset.val
            } else {
                &dataset.test
            };
            pairs
                .iter()
                .map(|p| match domain {
                    Domain::D1 => p.image_a.clone(),
                    Domain::D2 => p.image_b.clone(),
                })
                .collect()
        }
        other => {
            return Err(CoreError::Config(format!(
                "split must be train_a, train_b, val or test, got '{other}'"
            )))
        }
    };
    let mut rng = SeedStream::seed_from_u64(args.seed);
    let rows = latent_cluster_dump(&ckpt.bundle, &images, domain, args.n, &mut rng, &args.out)?;
    let run_dir = args.out.parent().unwrap_or(Path::new("."));
    let manifest = RunManifest {
        command: "dump-latent".into(),
        config_path: None,
        config_sha256: None,
        dataset_manifest_sha256: sha256_file(&args.data.join("manifest.json")),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        outputs: vec![args.out.display().to_string()],
        duration_ms: start.elapsed().as_millis(),
    };
    write_run_manifest(run_dir, &manifest)?;
    println!("dump-latent: wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}
