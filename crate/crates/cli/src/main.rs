//! `egosag` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egosag::config::RunConfig;
use egosag::data::{
    load_checkpoint, load_manifest, read_clip_block, read_clip_features, read_clip_sidecar, read_ply, read_scene,
    restore_params, synth_dataset, write_ply, SynthConfig,
};
use egosag::metrics::{filter_predictions, ClassMode, PredictionDump};
use egosag::model::{ClipInput, PreparedScene};
use egosag::pointcloud::PointCloudScene;
use egosag::train::{evaluate, load_samples, output_dir, Trainer, DTYPE};
use egosag::{Error, Result};

#[derive(Parser)]
#[command(name = "egosag", version, about = "Ground scene affordance regions from egocentric interaction clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (TOML). Unset keys take their defaults; `EGOSAG_*` variables override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, fully reproducible execution.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `data.train_manifest`, validating on `data.val_manifest`.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Pool all classes instead of matching by predicted class.
        #[arg(long)]
        class_agnostic: bool,
    },
    /// Predict affordance masks for one scene and clip.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene `.ply`; a `.json` sidecar next to it is optional.
        #[arg(long)]
        scene: PathBuf,
        /// Raw clip (`.egsc`) or precomputed features (`.egsf`).
        #[arg(long)]
        clip: PathBuf,
        /// Score threshold, overriding `loss.tau`.
        #[arg(long, allow_negative_numbers = true)]
        tau: Option<f64>,
        /// Also write the scene with predicted points colored red.
        #[arg(long)]
        export_ply: bool,
    },
    /// Generate a synthetic dataset with train and val manifests.
    SynthData {
        /// `tiny` or `default`.
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// TOML overrides of the preset's fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingFile(_) | Error::Format { .. } | Error::VersionMismatch { .. } | Error::ConfigHashMismatch { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { common } => train(&common),
        Command::Eval { common, checkpoint, manifest, class_agnostic } => {
            eval(&common, &checkpoint, &manifest, class_agnostic)
        }
        Command::Predict { common, checkpoint, scene, clip, tau, export_ply } => {
            predict(&common, &checkpoint, &scene, &clip, tau, export_ply)
        }
        Command::SynthData { preset, config, seed, output } => synth(&preset, config.as_deref(), seed, &output),
    }
}

fn apply_common(mut cfg: RunConfig, common: &Common) -> Result<RunConfig> {
    if let Some(seed) = common.seed {
        cfg.optim.seed = seed;
    }
    if common.deterministic {
        cfg.optim.deterministic = true;
    }
    if let Some(out) = &common.output {
        cfg.output = out.clone();
    }
    if cfg.optim.deterministic {
        // Must happen before the first tensor operation starts the thread pool.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The run config: `--config` when given, otherwise the one stored in the checkpoint.
fn resolve_config(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let cfg = match (&common.config, checkpoint) {
        (Some(path), _) => RunConfig::load(Some(path))?,
        (None, Some(ck)) => RunConfig::load_str(&load_checkpoint(ck, None)?.config, &ck.display().to_string())?,
        (None, None) => RunConfig::load(None)?,
    };
    apply_common(cfg, common)
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn required_manifest(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config { path: key.into(), message: "required for training".into() })
}

fn train(common: &Common) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let out = output_dir(&cfg, None);
    write_snapshot(&cfg, &out)?;
    let train_manifest = load_manifest(&required_manifest(&cfg.data.train_manifest, "data.train_manifest")?)?;
    let train = load_samples(&train_manifest, &cfg)?;
    let val = match &cfg.data.val_manifest {
        Some(p) => load_samples(&load_manifest(p)?, &cfg)?,
        None => Vec::new(),
    };
    tracing::info!(train = train.len(), val = val.len(), out = %out.display(), "training");
    let mut trainer = Trainer::new(&cfg)?;
    let report = trainer.fit(&train, &val, Some(&out))?;
    let summary = serde_json::json!({
        "steps": report.steps.len(),
        "first_loss": report.first_loss(),
        "last_loss": report.last_loss(),
        "best_val_map": report.best_val_map,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, manifest: &Path, class_agnostic: bool) -> Result<()> {
    let cfg = resolve_config(common, Some(checkpoint))?;
    let out = output_dir(&cfg, None);
    write_snapshot(&cfg, &out)?;
    let trainer = Trainer::from_checkpoint(&cfg, checkpoint)?;
    let samples = load_samples(&load_manifest(manifest)?, &cfg)?;
    let mode = if class_agnostic { ClassMode::Agnostic } else { ClassMode::Aware };
    let report = evaluate(&trainer.model, &samples, &cfg, mode)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report.metrics)? + "\n")?;
    println!("{}", report.metrics.to_table());
    Ok(())
}

fn load_scene(path: &Path) -> Result<PointCloudScene> {
    if path.with_extension("json").exists() {
        return read_scene(path);
    }
    let (coords, colors) = read_ply(path)?;
    PointCloudScene::unlabeled(file_stem(path), coords, colors)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_clip(path: &Path) -> Result<(String, ClipInput)> {
    let clip_id = match read_clip_sidecar(path) {
        Ok(side) => side.clip_id,
        Err(Error::MissingFile(_)) => file_stem(path),
        Err(e) => return Err(e),
    };
    let input = match path.extension().and_then(|e| e.to_str()) {
        Some("egsf") => ClipInput::from_grid(&read_clip_features(path)?, DTYPE, &candle_core::Device::Cpu)?,
        _ => ClipInput::Raw(read_clip_block(path)?),
    };
    Ok((clip_id, input))
}

fn predict(common: &Common, checkpoint: &Path, scene: &Path, clip: &Path, tau: Option<f64>, export_ply: bool) -> Result<()> {
    let mut cfg = resolve_config(common, Some(checkpoint))?;
    if let Some(t) = tau {
        cfg.loss.tau = t;
    }
    let out = output_dir(&cfg, None);
    write_snapshot(&cfg, &out)?;
    let ck = load_checkpoint(checkpoint, Some(&cfg.arch().hash()))?;
    let trainer = Trainer::new(&cfg)?;
    restore_params(&trainer.ps, &ck.params)?;
    let scene = load_scene(scene)?;
    let (clip_id, input) = load_clip(clip)?;
    let prepared = PreparedScene::new(scene, &cfg, DTYPE, &candle_core::Device::Cpu)?;
    let output = trainer.model.forward(&prepared, &input, &clip_id)?;
    let pred = filter_predictions(output.last(), &prepared.sp, &cfg.loss)?;
    let dump = PredictionDump::new(prepared.scene.scene_id(), &clip_id, &pred);
    let dump_path = out.join("prediction.json");
    std::fs::write(&dump_path, serde_json::to_string_pretty(&dump)? + "\n")?;
    if export_ply {
        let mut colors = prepared.scene.colors().to_vec();
        for m in &dump.predictions {
            for &i in &m.point_indices {
                colors[i] = [1.0, 0.0, 0.0];
            }
        }
        write_ply(&out.join(format!("{}_pred.ply", prepared.scene.scene_id())), prepared.scene.coords(), &colors)?;
    }
    println!("{} masks -> {}", dump.predictions.len(), dump_path.display());
    Ok(())
}

fn synth(preset: &str, config: Option<&Path>, seed: Option<u64>, output: &Path) -> Result<()> {
    let base = SynthConfig::preset(preset)?;
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|_| Error::MissingFile(p.to_path_buf()))?;
            SynthConfig::from_toml_str(&text, &base)?
        }
        None => base,
    };
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    let ds = synth_dataset(&cfg)?;
    ds.write(output)?;
    println!(
        "{} scenes, {} clips, {} train / {} val pairs -> {}",
        ds.scenes.len(),
        ds.clips.len(),
        ds.train.pairs.len(),
        ds.val.pairs.len(),
        output.display()
    );
    Ok(())
}
