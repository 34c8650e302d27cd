//! `shsas` — file-based pipeline driver.
//!
//! Stages communicate through files (.sast transients, .shsg grids, .shsf
//! checkpoints, .obj/.ply geometry, .json reports), so every experiment is a
//! sequence of subcommands that can be re-run, diffed, and cached. Settings
//! resolve as profile defaults <- config file <- flags. Exit codes: 0 ok,
//! 2 usage, 3 data error, 4 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shsas_core::config::{self, ConfigError, Profile, RunConfig};
use shsas_core::geometry::SensorPose;
use shsas_core::io::{self, IoError};
use shsas_core::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "shsas", version, about = "Synthetic aperture sonar simulation and reconstruction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Args)]
struct Common {
    /// Baseline defaults: `simulated` (clean data, ToF loss only) or
    /// `airsas-like` (20 dB noise, regularizers on).
    #[arg(long, global = true, default_value = "simulated")]
    profile: Profile,

    /// Partial JSON config overlaid onto the profile defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Print the fully resolved config as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    /// Cap on worker threads (env: SHSAS_THREADS). 1 guarantees
    /// byte-identical reruns; outputs are deterministic either way.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Override every stage seed (simulation noise, field init, training
    /// batches, cloud sampling) with one value.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate raw transient measurements of a scene (JSON or OBJ).
    Simulate {
        scene: PathBuf,
        out: PathBuf,
    },
    /// Remove the transmit pulse: raw container -> complex container.
    Deconvolve {
        input: PathBuf,
        out: PathBuf,
    },
    /// Delay-and-sum a complex container onto a voxel grid.
    Backproject {
        input: PathBuf,
        out: PathBuf,
        /// Also write voxel centers above the configured threshold as PLY.
        #[arg(long, value_name = "FILE")]
        cloud: Option<PathBuf>,
    },
    /// Fit the volumetric scattering field to a complex container.
    Train {
        input: PathBuf,
        out: PathBuf,
        /// Write the loss/checkpoint report as JSON.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Five comma-separated loss weights (ToF, sparsity, TV density,
        /// TV scatter, TV phase).
        #[arg(long, value_delimiter = ',', value_name = "L1,..,L5")]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        lr: Option<f64>,
        /// Spherical-harmonic degree of the fitted field (0..=3).
        #[arg(long)]
        l_max: Option<usize>,
    },
    /// Expand a checkpoint into a density grid, isosurface meshes, and
    /// surface-sampled point clouds.
    Extract {
        ckpt: PathBuf,
        /// Output stem: writes <stem>.shsg and <stem>_iso<NNN>.obj/.ply.
        out_stem: PathBuf,
        /// Isosurface levels as fractions of the density maximum.
        #[arg(long, value_delimiter = ',', value_name = "F1,F2,..")]
        iso: Option<Vec<f64>>,
    },
    /// Chamfer/IoU/precision/F1 of a reconstruction against a reference
    /// (.ply clouds or .obj meshes).
    Evaluate {
        recon: PathBuf,
        reference: PathBuf,
        /// Write the metric report as JSON (always printed to stdout).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Synthesize the transient a checkpoint predicts at a pose.
    NovelView {
        ckpt: PathBuf,
        /// Held-out evaluation: take pose, bins and ground truth from this
        /// complex container at --pose-index.
        #[arg(long, value_name = "FILE", requires = "pose_index")]
        truth: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        pose_index: Option<usize>,
        /// Pure synthesis: read the pose from a JSON file (requires --bins).
        #[arg(long, value_name = "FILE", conflicts_with = "truth")]
        pose_json: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        bins: Option<usize>,
        /// Write the predicted trace as a single-pose complex container.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Write the error report as JSON (always printed to stdout).
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(ConfigError),
    Io(IoError),
    Pipeline(PipelineError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}
impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}
impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Pipeline(e) if e.is_divergence() => 4,
            _ => 3,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SHSAS_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| usage(format!("SHSAS_THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common, cmd: &Option<Cmd>) -> Result<(), CliError> {
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
        cfg.render.seed = seed;
        cfg.train.seed = seed;
        cfg.field.init_seed = seed;
        cfg.extract.sample_seed = seed;
        cfg.aperture.subsample_seed = seed;
    }
    match cmd {
        Some(Cmd::Train {
            iterations,
            lambdas,
            lr,
            l_max,
            ..
        }) => {
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            if let Some(ls) = lambdas {
                cfg.train.lambdas = <[f64; 5]>::try_from(ls.as_slice())
                    .map_err(|_| usage(format!("--lambdas needs 5 values, got {}", ls.len())))?;
            }
            if let Some(lr) = lr {
                cfg.train.lr = *lr;
            }
            if let Some(l) = l_max {
                cfg.field.l_max = *l;
            }
        }
        Some(Cmd::Extract { iso, .. }) => {
            if let Some(fr) = iso {
                cfg.extract.iso_fractions = fr.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("summaries always serialize")
    );
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = thread_count(cli.common.threads)? {
        shsas_core::configure_threads(n);
    }
    let mut cfg = config::resolve(cli.common.profile, cli.common.config.as_deref())?;
    apply_overrides(&mut cfg, &cli.common, &cli.cmd)?;

    if cli.common.dump_config {
        print_json(&cfg);
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        return Err(usage(
            "no subcommand given (try --help, or --dump-config to inspect settings)",
        ));
    };

    match cmd {
        Cmd::Simulate { scene, out } => {
            let summary = pipeline::simulate(&cfg, &scene, &out)?;
            print_json(&summary);
        }
        Cmd::Deconvolve { input, out } => {
            let summary = pipeline::deconvolve(&cfg, &input, &out)?;
            print_json(&summary);
        }
        Cmd::Backproject { input, out, cloud } => {
            let summary = pipeline::backproject_stage(&cfg, &input, &out, cloud.as_deref())?;
            print_json(&summary);
        }
        Cmd::Train {
            input, out, report, ..
        } => {
            let train_report = pipeline::train_stage(&cfg, &input, &out, report.as_deref())?;
            print_json(&train_report);
        }
        Cmd::Extract { ckpt, out_stem, .. } => {
            let summary = pipeline::extract_stage(&cfg, &ckpt, &out_stem)?;
            print_json(&summary);
        }
        Cmd::Evaluate {
            recon,
            reference,
            out,
        } => {
            let report = pipeline::evaluate_stage(&cfg, &recon, &reference, out.as_deref())?;
            print_json(&report);
        }
        Cmd::NovelView {
            ckpt,
            truth,
            pose_index,
            pose_json,
            bins,
            out,
            report,
        } => {
            let nv = match (truth, pose_json) {
                (Some(truth_path), None) => {
                    let idx = pose_index.expect("clap enforces requires=pose_index");
                    let cont = io::read_sast(&truth_path)?;
                    let ms = cont.analytic_measurements().ok_or_else(|| {
                        CliError::Pipeline(PipelineError::Stage(format!(
                            "{}: ground truth must be a complex (deconvolved) container",
                            truth_path.display()
                        )))
                    })?;
                    if idx >= ms.len() {
                        return Err(usage(format!(
                            "--pose-index {idx} out of range ({} poses)",
                            ms.len()
                        )));
                    }
                    pipeline::novel_view_stage(
                        &cfg,
                        &ckpt,
                        &cont.aperture.poses[idx],
                        ms[idx].len(),
                        cont.f_s,
                        cont.c,
                        out.as_deref(),
                        Some(&ms[idx].samples),
                    )?
                }
                (None, Some(pose_path)) => {
                    let pose: SensorPose = io::read_json(&pose_path)?;
                    let n_bins = bins.ok_or_else(|| usage("--pose-json requires --bins"))?;
                    pipeline::novel_view_stage(
                        &cfg,
                        &ckpt,
                        &pose,
                        n_bins,
                        cfg.render.f_s,
                        cfg.render.c,
                        out.as_deref(),
                        None,
                    )?
                }
                _ => {
                    return Err(usage(
                        "novel-view needs either --truth FILE --pose-index N or --pose-json FILE --bins N",
                    ))
                }
            };
            if nv.outside_field {
                eprintln!("warning: beam axis misses the field bounds; predicted trace is likely zero");
            }
            if let Some(path) = report {
                io::write_json(path, &nv)?;
            }
            print_json(&nv);
        }
    }
    Ok(())
}
