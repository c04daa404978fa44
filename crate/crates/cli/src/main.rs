use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rtcan_core::checkpoint;
use rtcan_core::data::{load_manifest, make_split, Split};
use rtcan_core::predict::{overlay, predict_images};
use rtcan_core::synth::{generate_dataset, Difficulty, SynthOptions};
use rtcan_core::train::{self, select_best, Precision};
use rtcan_core::RunConfig;
use rtcan_tensor::Scalar;

#[derive(Parser)]
#[command(name = "rtcan", version, about = "RGB-thermal gas plume segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground-truth masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "easy")]
        difficulty: Difficulty,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 160)]
        width: usize,
        /// Also assign train/val/test splits with this train+val fraction.
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Share of the train+val block held out for validation.
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long)]
        force: bool,
    },
    /// Assign train/val/test splits in an existing manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, keep the best checkpoint and score it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Require the checkpoint to match this run config's model section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path (default: eval_<split>.json beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Write mask.png and overlay.png for one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train schemes A, B and C and tabulate their test scores.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            count,
            seed,
            difficulty,
            height,
            width,
            train_fraction,
            val_fraction,
            force,
        } => {
            ensure_fresh_dir(&out, force)?;
            let opts = SynthOptions {
                count: count as usize,
                seed,
                difficulty,
                height,
                width,
            };
            let mut manifest = generate_dataset(&out, &opts)?;
            if let Some(f) = train_fraction {
                manifest = make_split(&manifest, f, val_fraction, seed)?;
            }
            println!("{}", manifest.save()?.display());
        }
        Command::Split {
            manifest,
            train_fraction,
            val_fraction,
            seed,
        } => {
            let m = load_manifest(&manifest)?;
            let m = make_split(&m, train_fraction, val_fraction, seed)?;
            let path = m.save()?;
            println!(
                "{}: train {}, val {}, test {}",
                path.display(),
                m.ids(Split::Train).len(),
                m.ids(Split::Val).len(),
                m.ids(Split::Test).len()
            );
        }
        Command::Train { config, force } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.train.precision {
                Precision::F32 => cmd_train::<f32>(&cfg, force)?,
                Precision::F64 => cmd_train::<f64>(&cfg, force)?,
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            config,
            out,
            force,
        } => {
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new(""))
                    .join(format!("eval_{}.json", split_name(split)))
            });
            ensure_writable(&out, force)?;
            let expected = config.map(|p| RunConfig::load(&p)).transpose()?.map(|c| c.model);
            let manifest = load_manifest(&manifest)?;
            let meta = checkpoint::read_meta(&checkpoint)?;
            let eval = if meta.dtype == "F64" {
                train::evaluate::<f64>(&checkpoint, &manifest, split, expected.as_ref())?
            } else {
                train::evaluate::<f32>(&checkpoint, &manifest, split, expected.as_ref())?
            };
            let json = eval.report.to_json_string();
            write(&out, &json)?;
            print!("{json}");
        }
        Command::Predict {
            checkpoint,
            rgb,
            thermal,
            out,
            force,
        } => {
            let meta = checkpoint::read_meta(&checkpoint)?;
            if meta.dtype == "F64" {
                cmd_predict::<f64>(&checkpoint, &rgb, &thermal, &out, force)?
            } else {
                cmd_predict::<f32>(&checkpoint, &rgb, &thermal, &out, force)?
            }
        }
        Command::Ablate { config, force } => {
            let cfg = RunConfig::load(&config)?;
            ensure_fresh_dir(&cfg.output.directory, force)?;
            let manifest = load_manifest(&cfg.data.manifest)?;
            let table = match cfg.train.precision {
                Precision::F32 => train::run_ablation::<f32>(&cfg, &manifest)?,
                Precision::F64 => train::run_ablation::<f64>(&cfg, &manifest)?,
            };
            let dir = &cfg.output.directory;
            write(&dir.join("ablation.json"), &table.to_json())?;
            let text = table.to_text();
            write(&dir.join("ablation.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::Unassigned => "unassigned",
    }
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.output.directory;
    ensure_fresh_dir(dir, force)?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    if manifest.ids(Split::Test).is_empty() {
        bail!("manifest {} has no test split", cfg.data.manifest.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt_dir = dir.join(train::CHECKPOINT_DIR);
    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir).with_context(|| format!("clearing {}", ckpt_dir.display()))?;
    }
    write(&dir.join("config.toml"), &cfg.to_toml_string())?;

    let outcome = train::train::<T>(cfg, &manifest)?;
    let best = select_best(&outcome.history, cfg.train.selection_metric)
        .context("no epoch was validated")?;
    let src = dir.join(best.checkpoint_path.as_deref().context("best epoch has no checkpoint")?);
    let dst = dir.join("best.safetensors");
    copy(&src, &dst)?;
    copy(&checkpoint::sidecar_path(&src), &checkpoint::sidecar_path(&dst))?;
    log::info!("best epoch {} -> {}", best.epoch, dst.display());

    let eval = train::evaluate::<T>(&dst, &manifest, Split::Test, Some(&cfg.model))?;
    let json = eval.report.to_json_string();
    write(&dir.join("test_report.json"), &json)?;
    write(
        &dir.join("test_diagnostics.json"),
        &(serde_json::to_string_pretty(&eval.diagnostics)? + "\n"),
    )?;
    print!("{json}");
    Ok(())
}

fn cmd_predict<T: Scalar>(ckpt: &Path, rgb: &Path, thermal: &Path, out: &Path, force: bool) -> Result<()> {
    let mask_out = out.join("mask.png");
    let overlay_out = out.join("overlay.png");
    ensure_writable(&mask_out, force)?;
    ensure_writable(&overlay_out, force)?;
    let (model, meta) = checkpoint::load::<T>(ckpt)?;
    let rgb = image::open(rgb).with_context(|| format!("decoding {}", rgb.display()))?.to_rgb8();
    let thermal = image::open(thermal)
        .with_context(|| format!("decoding {}", thermal.display()))?
        .to_luma8();
    let mask = predict_images(&model, &meta.preprocess, &rgb, &thermal)?;
    let blended = overlay(&rgb, &mask)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut stored = mask;
    for p in stored.pixels_mut() {
        p.0[0] *= 255;
    }
    stored.save(&mask_out).with_context(|| format!("writing {}", mask_out.display()))?;
    blended.save(&overlay_out).with_context(|| format!("writing {}", overlay_out.display()))?;
    log::info!("{} parameters, wrote {} and {}", model.num_parameters(), mask_out.display(), overlay_out.display());
    Ok(())
}

fn ensure_fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if !force && dir.is_dir() && fs::read_dir(dir)?.next().is_some() {
        bail!("{} is not empty; pass --force to overwrite", dir.display());
    }
    Ok(())
}

fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).with_context(|| format!("copying {} to {}", from.display(), to.display()))?;
    Ok(())
}
