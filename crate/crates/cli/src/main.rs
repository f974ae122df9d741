//! `focusfuse`: batch front end for training, scoring, fusion and evaluation.
//!
//! Exit codes: 0 success, 2 user or input error, 3 model file error,
//! 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{EvalInput, MaskSpec, ModelLoad, SharpSource, TrainOutputs};
use config::Settings;

#[derive(Parser)]
#[command(name = "focusfuse", version, about = "Multi-focus image fusion")]
struct Cli {
    /// Config file of `key = value` lines (falls back to $FOCUSFUSE_CONFIG).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads; 1 gives the reference sequential path.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long)]
    sigma_xy: Option<usize>,
    #[arg(long)]
    sigma_in: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    cg_tol: Option<f64>,
    #[arg(long)]
    cg_max_iters: Option<usize>,
    #[arg(long)]
    bistoch_iters: Option<usize>,
    /// Confidence threshold on the rescaled score spread.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    sigmoid_mean: Option<f64>,
    #[arg(long)]
    sigmoid_slope: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the quality network on a directory of sharp images.
    Train {
        /// Directory of pristine .pgm/.png images.
        images: PathBuf,
        /// Model file to write.
        #[arg(short, long)]
        out: PathBuf,
        /// Defaults to the model path with extension `.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Per-image label record; defaults to extension `.labels.csv`.
        #[arg(long)]
        provenance_csv: Option<PathBuf>,
        /// External label table (CSV: filename,sigma,label).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Comma-separated blur sigmas.
        #[arg(long)]
        sigmas: Option<String>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fuse two or more source images.
    Fuse {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory; receives fused.pgm.
        #[arg(short, long)]
        out: PathBuf,
        /// Also write scores, masks, confidence, weights and difference maps.
        #[arg(long)]
        dump_intermediates: bool,
        /// Directory of case subdirectories, each holding the sources
        /// (every image except fused.* and gt.*).
        #[arg(long, value_name = "DIR")]
        batch: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Evaluate a fusion: CSV row of q_g, q_nmi, ncie and optional psnr.
    Eval {
        /// SOURCE1 SOURCE2 FUSED
        files: Vec<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Row label; defaults to the fused file stem.
        #[arg(long)]
        name: Option<String>,
        /// Directory of case subdirectories (two sources, fused.*, optional gt.*).
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Look for <case>/fused.* here instead of inside each case.
        #[arg(long)]
        fused_dir: Option<PathBuf>,
        /// Human-readable table instead of CSV.
        #[arg(long)]
        table: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Per-pixel quality score map (lower is sharper).
    Score {
        image: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// .f32map for raw values, .pgm for an 8-bit rendering.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Build a synthetic multi-focus pair: I1.pgm, I2.pgm, gt.pgm.
    Synth {
        /// Sharp source image.
        #[arg(required_unless_present = "texture_size", conflicts_with = "texture_size")]
        sharp: Option<PathBuf>,
        /// Generate a square procedural texture of this size from --seed.
        #[arg(long, value_name = "N")]
        texture_size: Option<usize>,
        /// Half-plane mask through the center, angle in degrees.
        #[arg(long, value_name = "DEG", conflicts_with = "mask")]
        half_plane: Option<f64>,
        /// Binary mask image; I1 is sharp where it is set.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        sigma_blur: Option<f64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Normalized difference maps between a fused image and its sources.
    Diff {
        fused: PathBuf,
        #[arg(required = true)]
        sources: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

type Overrides = Vec<(&'static str, String)>;

fn push<T: ToString>(o: &mut Overrides, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        o.push((key, v.to_string()));
    }
}

impl SolverArgs {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "sigma_xy", &self.sigma_xy);
        push(o, "sigma_in", &self.sigma_in);
        push(o, "lambda", &self.lambda);
        push(o, "cg_tol", &self.cg_tol);
        push(o, "cg_max_iters", &self.cg_max_iters);
        push(o, "bistoch_iters", &self.bistoch_iters);
        push(o, "threshold", &self.threshold);
        push(o, "sigmoid_mean", &self.sigmoid_mean);
        push(o, "sigmoid_slope", &self.sigmoid_slope);
    }
}

fn path_string(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::new();
        push(&mut o, "threads", &self.threads);
        push(&mut o, "seed", &self.seed);
        if self.verbose {
            o.push(("verbose", "true".into()));
        }
        match &self.command {
            Command::Train {
                labels,
                sigmas,
                learning_rate,
                batch_size,
                epochs,
                ..
            } => {
                push(&mut o, "labels", &path_string(labels));
                push(&mut o, "sigmas", sigmas);
                push(&mut o, "learning_rate", learning_rate);
                push(&mut o, "batch_size", batch_size);
                push(&mut o, "epochs", epochs);
            }
            Command::Fuse {
                model,
                dump_intermediates,
                solver,
                ..
            } => {
                push(&mut o, "model", &path_string(model));
                if *dump_intermediates {
                    o.push(("dump_intermediates", "true".into()));
                }
                solver.overrides(&mut o);
            }
            Command::Score { model, .. } => push(&mut o, "model", &path_string(model)),
            Command::Synth { sigma_blur, .. } => push(&mut o, "sigma_blur", sigma_blur),
            Command::Eval { .. } | Command::Diff { .. } => {}
        }
        o
    }
}

fn run(cli: &Cli, settings: &Settings) -> Result<()> {
    match &cli.command {
        Command::Train {
            images,
            out,
            loss_csv,
            provenance_csv,
            ..
        } => commands::cmd_train(
            settings,
            images,
            &TrainOutputs {
                model: out,
                loss_csv: loss_csv.as_deref(),
                provenance_csv: provenance_csv.as_deref(),
            },
        ),
        Command::Fuse {
            inputs, out, batch, ..
        } => commands::cmd_fuse(settings, inputs, batch.as_deref(), out),
        Command::Score { image, out, .. } => commands::cmd_score(settings, image, out),
        Command::Eval {
            files,
            gt,
            name,
            dir,
            fused_dir,
            table,
            out,
        } => commands::cmd_eval(&EvalInput {
            files,
            gt: gt.as_deref(),
            name: name.as_deref(),
            dir: dir.as_deref(),
            fused_dir: fused_dir.as_deref(),
            table: *table,
            out: out.as_deref(),
        }),
        Command::Synth {
            sharp,
            texture_size,
            half_plane,
            mask,
            out,
            ..
        } => {
            let sharp = match (sharp, texture_size) {
                (Some(p), _) => SharpSource::File(p),
                (None, Some(n)) => SharpSource::Texture(*n),
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let mask = match mask {
                Some(p) => MaskSpec::File(p),
                None => MaskSpec::HalfPlane(half_plane.unwrap_or(0.0)),
            };
            commands::cmd_synth(settings, sharp, mask, out)
        }
        Command::Diff { fused, sources, out } => commands::cmd_diff(fused, sources, out),
    }
}

fn core_code(e: &focusfuse_core::Error) -> u8 {
    use focusfuse_core::Error as E;
    match e {
        E::Stage { source, .. } => core_code(source),
        E::Model(_) => 3,
        E::Numeric(_) | E::Diverged { .. } => 4,
        _ => 2,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ModelLoad>().is_some() {
        return 3;
    }
    err.chain()
        .find_map(|c| c.downcast_ref::<focusfuse_core::Error>())
        .map(core_code)
        .unwrap_or(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = Settings::resolve(cli.config.as_deref(), &cli.overrides()).and_then(|settings| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.threads)
            .build()?;
        pool.install(|| run(&cli, &settings))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
