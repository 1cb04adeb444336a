//! Command-line interface: train, score, calibrate, evaluate, reconstruct.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::autoencoder::{self, load_model, save_model, ArchitectureSpec, ModelParams};
use crate::config::RunConfig;
use crate::dataio::{load_image, load_mask, save_image, save_mask, write_anomaly_map};
use crate::error::{Result, TexanomError};
use crate::metrics;
use crate::pipeline::{
    self, binarize_and_erode, calibrate_threshold, reconstruct_full, score_image,
    CalibrationRecord, InferenceConfig,
};

#[derive(Parser)]
#[command(
    name = "texanom",
    about = "Texture anomaly detection with a CW-SSIM-trained convolutional autoencoder",
    version
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Force single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an autoencoder from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score one image: write its anomaly map (and a mask with --gamma).
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output anomaly-map file; a PNG preview is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Optional run configuration for inference settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Threshold; when set, also writes a binary mask PNG.
        #[arg(long)]
        gamma: Option<f64>,
        /// Disk radius for the post-threshold morphology.
        #[arg(long)]
        erode_radius: Option<usize>,
    },
    /// Calibrate the detection threshold on the validation images.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output JSON record.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the full protocol over the test set.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Detection threshold; alternative to --calibration.
        #[arg(long)]
        gamma: Option<f64>,
        /// Calibration JSON produced by `calibrate`.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Output report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also dump every test image's anomaly map into this directory.
        #[arg(long)]
        maps_dir: Option<PathBuf>,
        #[arg(long)]
        erode_radius: Option<usize>,
    },
    /// Reconstruct one image through the autoencoder and save it as PNG.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses the process arguments, runs the command, and returns the exit
/// code: 0 success, 2 usage/config error, 3 runtime/numerical error.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TEXANOM_LOG")).init();
    let cli = Cli::parse();
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        // a second initialization in the same process is harmless: the pool
        // is only built once and later calls fail silently
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out, seed } => cmd_train(&config, out, seed),
        Command::Score {
            model,
            image,
            out,
            config,
            gamma,
            erode_radius,
        } => cmd_score(&model, &image, &out, config.as_deref(), gamma, erode_radius),
        Command::Calibrate { config, model, out } => cmd_calibrate(&config, &model, &out),
        Command::Evaluate {
            config,
            model,
            gamma,
            calibration,
            out,
            maps_dir,
            erode_radius,
        } => cmd_evaluate(
            &config,
            &model,
            gamma,
            calibration.as_deref(),
            &out,
            maps_dir.as_deref(),
            erode_radius,
        ),
        Command::Reconstruct {
            model,
            image,
            out,
            config,
        } => cmd_reconstruct(&model, &image, &out, config.as_deref()),
    }
}

fn inference_config(config: Option<&Path>) -> Result<InferenceConfig> {
    match config {
        Some(path) => Ok(RunConfig::load(path)?.inference),
        None => Ok(InferenceConfig::default()),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| TexanomError::io(parent.display().to_string(), e))?;
        }
    }
    Ok(())
}

fn cmd_train(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.output_dir.as_os_str().is_empty() {
        return Err(TexanomError::Config(
            "output_dir: no output directory configured (set it or pass --out)".into(),
        ));
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| TexanomError::io(cfg.output_dir.display().to_string(), e))?;
    let index = cfg.resolve_dataset()?;
    let spec = ArchitectureSpec::with_encoder_channels(&cfg.architecture.encoder_channels);
    log::info!(
        "training {} parameters on {} images",
        spec.param_count(),
        index.train_normal.len()
    );
    // the single top-level seed drives sampling, init, and shuffling
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let output = autoencoder::train(&index, &spec, &train_cfg)?;
    save_model(&output.params, cfg.output_dir.join("model.cwae"))?;
    let csv_path = cfg.output_dir.join("loss.csv");
    let mut csv = std::fs::File::create(&csv_path)
        .map_err(|e| TexanomError::io(csv_path.display().to_string(), e))?;
    writeln!(csv, "epoch,loss").map_err(|e| TexanomError::io(csv_path.display().to_string(), e))?;
    for (epoch, loss) in output.loss_history.iter().enumerate() {
        writeln!(csv, "{epoch},{loss}")
            .map_err(|e| TexanomError::io(csv_path.display().to_string(), e))?;
    }
    cfg.save(cfg.output_dir.join("config.toml"))?;
    Ok(())
}

fn cmd_score(
    model_path: &Path,
    image_path: &Path,
    out: &Path,
    config: Option<&Path>,
    gamma: Option<f64>,
    erode_radius: Option<usize>,
) -> Result<()> {
    let model = load_model(model_path)?;
    let image = load_image(image_path)?;
    let mut cfg = inference_config(config)?;
    if let Some(r) = erode_radius {
        cfg.erode_radius = r;
    }
    let (_, map) = score_image(&image, &model, &cfg)?;
    ensure_parent(out)?;
    write_anomaly_map(&map, out)?;
    if let Some(g) = gamma {
        let mask = binarize_and_erode(&map, g, cfg.erode_radius, cfg.morphology);
        let mask_path = out.with_extension("mask.png");
        save_mask(&mask, &mask_path)?;
    }
    Ok(())
}

fn validation_hash(paths: &[(PathBuf, PathBuf)]) -> String {
    let mut hasher = Sha256::new();
    for (img, mask) in paths {
        hasher.update(img.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(mask.to_string_lossy().as_bytes());
        hasher.update([0]);
    }
    format!("{:x}", hasher.finalize())
}

fn cmd_calibrate(config_path: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let model = load_model(model_path)?;
    let index = cfg.resolve_dataset()?;
    if index.validation_defective.is_empty() {
        return Err(TexanomError::Config(
            "dataset.validation: calibration needs at least one validation image".into(),
        ));
    }
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for (img_path, mask_path) in &index.validation_defective {
        let image = load_image(img_path)?;
        let (_, map) = score_image(&image, &model, &cfg.inference)?;
        maps.push(map);
        masks.push(load_mask(mask_path)?);
    }
    let pool = pipeline::pool_normal_scores(&maps, &masks)?;
    let gamma = calibrate_threshold(&pool, cfg.inference.target_fpr)?;
    let record = CalibrationRecord {
        gamma,
        target_fpr: cfg.inference.target_fpr,
        validation_hash: validation_hash(&index.validation_defective),
    };
    ensure_parent(out)?;
    record.save(out)?;
    log::info!("gamma = {gamma}");
    Ok(())
}

fn score_test_set(
    cfg: &RunConfig,
    model: &ModelParams,
    maps_dir: Option<&Path>,
) -> Result<(Vec<Array2<f64>>, Vec<Array2<u8>>)> {
    let index = cfg.resolve_dataset()?;
    if index.test.is_empty() {
        return Err(TexanomError::Config(
            "dataset.root: the test set is empty".into(),
        ));
    }
    if let Some(dir) = maps_dir {
        std::fs::create_dir_all(dir).map_err(|e| TexanomError::io(dir.display().to_string(), e))?;
    }
    let mut maps = Vec::new();
    let mut gts = Vec::new();
    for (img_path, mask_path) in &index.test {
        let image = load_image(img_path)?;
        let (_, map) = score_image(&image, model, &cfg.inference)?;
        let gt = match mask_path {
            Some(p) => load_mask(p)?,
            // images from test/good are normal everywhere
            None => Array2::zeros(image.shape()),
        };
        if let Some(dir) = maps_dir {
            let stem = img_path.file_stem().unwrap().to_string_lossy();
            let class = img_path
                .parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default();
            write_anomaly_map(&map, dir.join(format!("{class}_{stem}.tam")))?;
        }
        maps.push(map);
        gts.push(gt);
    }
    Ok((maps, gts))
}

fn cmd_evaluate(
    config_path: &Path,
    model_path: &Path,
    gamma: Option<f64>,
    calibration: Option<&Path>,
    out: &Path,
    maps_dir: Option<&Path>,
    erode_radius: Option<usize>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(r) = erode_radius {
        cfg.inference.erode_radius = r;
    }
    let gamma = match (gamma, calibration) {
        (Some(g), _) => g,
        (None, Some(path)) => CalibrationRecord::load(path)?.gamma,
        (None, None) => {
            return Err(TexanomError::Config(
                "pass --gamma or --calibration to set the detection threshold".into(),
            ))
        }
    };
    let model = load_model(model_path)?;
    let (maps, gts) = score_test_set(&cfg, &model, maps_dir)?;
    let preds: Vec<Array2<u8>> = maps
        .iter()
        .map(|m| binarize_and_erode(m, gamma, cfg.inference.erode_radius, cfg.inference.morphology))
        .collect();
    let report = metrics::evaluate(
        &maps,
        &gts,
        &preds,
        gamma,
        cfg.evaluation.connectivity,
        &cfg.hash(),
    )?;
    ensure_parent(out)?;
    report.save(out)?;
    log::info!(
        "auc = {:.4}, normalized partial auc = {:.4}, median coverage = {:.4}",
        report.auc,
        report.normalized_auc_03,
        report.median_coverage
    );
    Ok(())
}

fn cmd_reconstruct(
    model_path: &Path,
    image_path: &Path,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let model = load_model(model_path)?;
    let image = load_image(image_path)?;
    let cfg = inference_config(config)?;
    let recon = reconstruct_full(&image, &model, &cfg)?;
    ensure_parent(out)?;
    save_image(&recon, out)
}
