mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use smcyclegan::checkpoint::{Container, ModuleKind};
use smcyclegan::data::{generate_toy_domains, load_dataset, load_image_dir};
use smcyclegan::evaluation::{evaluate_fid, extractor_from_id};
use smcyclegan::image::{DomainTag, ValueRange};
use smcyclegan::networks::Generator;
use smcyclegan::segmenter::{train_segmenter, Segmenter};
use smcyclegan::training::{train, MaskSource, Start};
use smcyclegan::Error;

use crate::config::RunConfig;

const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Semantic-aware mask CycleGAN: toy data, segmenter and translator training, evaluation.
#[derive(Parser, Debug)]
#[command(name = "smcyclegan", version)]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for toy data, segmenter and translator training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Training checkpoint to resume from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,

    /// Output directory (overrides the configured one).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Direction {
    /// X to Y with G.
    X2y,
    /// Y to X with F.
    Y2x,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic two-domain toy dataset.
    MakeToyData,
    /// Train the U-Net segmenter on image/mask pairs.
    TrainSegmenter,
    /// Train the translators.
    Train,
    /// Translate a folder of images with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "x2y")]
        direction: Direction,
    },
    /// Print the FID between two image folders.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Feature extractor id; defaults to the configured one.
        #[arg(long)]
        extractor: Option<String>,
    },
    /// Plot the loss curve and sample grid of a finished run.
    Report,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Data(_) | Error::Shape(_) => 2,
                Error::Io { .. } | Error::Codec { .. } => 3,
                Error::Checkpoint(_) => 4,
                Error::Numeric(_) => 5,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config(format!("{what} is not set")).into())
}

fn write_effective_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    let path = dir.join(EFFECTIVE_CONFIG);
    fs::write(&path, cfg.to_toml()).map_err(|source| Error::Io { path, source })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.resume.is_some() && !matches!(cli.command, Command::Train) {
        return Err(Error::Config("--resume only applies to `train`".into()).into());
    }
    match cli.command {
        Command::MakeToyData => {
            if let Some(out) = &cli.out {
                cfg.paths.data_root = Some(out.clone());
            }
            let root = require(&cfg.paths.data_root, "output path (--out or paths.data_root)")?;
            write_effective_config(&cfg, &root)?;
            generate_toy_domains(&cfg.toy, &root)?;
            println!("wrote {} images per domain to {}", cfg.toy.count, root.display());
        }
        Command::TrainSegmenter => {
            let out = resolve_run_dir(&mut cfg, &cli.out)?;
            write_effective_config(&cfg, &out)?;
            let root = require(&cfg.paths.data_root, "paths.data_root")?;
            let mut pairs = Vec::new();
            for domain in [DomainTag::Art, DomainTag::Real] {
                if !root.join(domain.mask_dir()).is_dir() {
                    continue;
                }
                let ds = load_dataset(&root, domain, cfg.data.image_size, true)?;
                pairs.extend(ds.images.into_iter().zip(ds.masks.unwrap_or_default()));
            }
            if pairs.is_empty() {
                return Err(Error::Data(format!("no mask folders under {}", root.display())).into());
            }
            let outcome = train_segmenter(&pairs, &cfg.segmenter)?;
            let ckpt = out.join("segmenter.smcg");
            outcome.segmenter.save(&ckpt)?;
            let losses = out.join("segmenter_losses.json");
            fs::write(&losses, serde_json::to_string(&outcome.epoch_losses)?)
                .map_err(|source| Error::Io { path: losses, source })?;
            println!("{}", ckpt.display());
        }
        Command::Train => {
            let out = resolve_run_dir(&mut cfg, &cli.out)?;
            write_effective_config(&cfg, &out)?;
            let root = require(&cfg.paths.data_root, "paths.data_root")?;
            let with_masks = cfg.train.uses_masks() && cfg.train.mask_source == MaskSource::GroundTruth;
            let data_x = load_dataset(&root, DomainTag::Art, cfg.data.image_size, with_masks)?;
            let data_y = load_dataset(&root, DomainTag::Real, cfg.data.image_size, with_masks)?;
            let start = match &cli.resume {
                Some(path) => Start::Resume(path.clone()),
                None => {
                    let needs_seg = cfg.train.uses_masks() && cfg.train.mask_source == MaskSource::Segmenter;
                    let seg = match (&cfg.paths.segmenter_checkpoint, needs_seg) {
                        (Some(path), true) => Some(Segmenter::load(path)?),
                        (None, true) => {
                            return Err(Error::Config("paths.segmenter_checkpoint is required for segmenter masks".into()).into())
                        }
                        _ => None,
                    };
                    Start::Fresh(seg)
                }
            };
            let outcome = train(&cfg.train, &data_x, &data_y, start, &out)?;
            println!("{}", outcome.final_checkpoint.display());
        }
        Command::Translate { checkpoint, input, direction } => {
            let out = resolve_run_dir(&mut cfg, &cli.out)?;
            write_effective_config(&cfg, &out)?;
            let container = Container::load(&checkpoint)?;
            let kind = match direction {
                Direction::X2y => ModuleKind::GenG,
                Direction::Y2x => ModuleKind::GenF,
            };
            let generator = Generator::from_section(container.section(kind)?)?;
            let (names, images, _) = load_image_dir(&input, ValueRange::Symmetric)?;
            for (name, img) in names.iter().zip(&images) {
                let path = out.join(Path::new(name).with_extension("png"));
                generator.generate(img).with_context(|| format!("translating {name}"))?.save_png(&path)?;
            }
            println!("translated {} images into {}", images.len(), out.display());
        }
        Command::Evaluate { generated, reference, extractor } => {
            let out = resolve_run_dir(&mut cfg, &cli.out)?;
            if let Some(id) = extractor {
                cfg.evaluation.extractor = id;
            }
            write_effective_config(&cfg, &out)?;
            let fx = extractor_from_id(&cfg.evaluation.extractor)?;
            let report = evaluate_fid(&generated, &reference, fx.as_ref())?;
            let path = out.join("fid_report.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|source| Error::Io { path, source })?;
            println!("{:.6}", report.fid);
        }
        Command::Report => {
            let run_dir = resolve_run_dir(&mut cfg, &cli.out)?;
            if !run_dir.is_dir() {
                return Err(Error::Io {
                    path: run_dir.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
                }
                .into());
            }
            let report_dir = run_dir.join("report");
            write_effective_config(&cfg, &report_dir)?;
            let summary = report::build(&run_dir, &report_dir)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(())
}

fn resolve_run_dir(cfg: &mut RunConfig, out: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(out) = out {
        cfg.paths.run_dir = Some(out.clone());
    }
    require(&cfg.paths.run_dir, "output directory (--out or paths.run_dir)")
}
