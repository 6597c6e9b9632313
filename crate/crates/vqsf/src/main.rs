//! Thin command-line front end; all behavior lives in the library's `cli`
//! module. Exit codes: 0 success, 1 usage error, 2 data/format error,
//! 3 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqsf::cli::{self, CompleteOptions, EvalOptions};
use vqsf::config::RunConfig;

#[derive(Parser)]
#[command(name = "vqsf", version, about = "Sparse quantized shape codes with autoregressive completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set seed=7 (repeatable; wins over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> vqsf::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset (manifest, clouds, scans, targets).
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the sparse quantized autoencoder.
    TrainVqdif {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint (step-exact).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the completion transformer on sequences from a frozen autoencoder.
    TrainShapeformer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Autoencoder checkpoint used to encode the training pairs.
        #[arg(long)]
        vqdif: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode an XYZ cloud into a sparse sequence file.
    Encode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        vqdif: PathBuf,
        /// Input cloud (.xyz).
        input: PathBuf,
        /// Output sequence (.vqsq).
        #[arg(long, default_value = "sequence.vqsq")]
        out: PathBuf,
    },
    /// Sample shape completions for a partial scan.
    Complete {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        vqdif: PathBuf,
        #[arg(long)]
        shapeformer: PathBuf,
        /// Partial scan (.xyz).
        scan: PathBuf,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        num_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Cap on generated tuples per sample.
        #[arg(long)]
        max_len: Option<usize>,
        /// Output directory for completion_XX.{obj,vqsq}.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a sequence (or re-encode a cloud) to a mesh.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        vqdif: PathBuf,
        /// Input .vqsq sequence or .xyz cloud.
        input: PathBuf,
        #[arg(long, default_value = "reconstruction.obj")]
        out: PathBuf,
    },
    /// Evaluate completions on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Generate completions with these checkpoints...
        #[arg(long, requires = "shapeformer")]
        vqdif: Option<PathBuf>,
        #[arg(long, requires = "vqdif")]
        shapeformer: Option<PathBuf>,
        /// ...or read them from this directory.
        #[arg(long, conflicts_with_all = ["vqdif", "shapeformer"])]
        completions: Option<PathBuf>,
    },
    /// Verify every differentiable op against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn run() -> vqsf::Result<bool> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; everything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            std::process::exit(code);
        }
    };
    match cli.command {
        Command::GenData { config } => {
            cli::cmd_gen_data(&config.load()?)?;
        }
        Command::TrainVqdif { config, resume } => {
            cli::cmd_train_vqdif(&config.load()?, resume.as_deref())?;
        }
        Command::TrainShapeformer { config, vqdif, resume } => {
            cli::cmd_train_shapeformer(&config.load()?, &vqdif, resume.as_deref())?;
        }
        Command::Encode {
            config,
            vqdif,
            input,
            out,
        } => {
            cli::cmd_encode(&config.load()?, &input, &vqdif, &out)?;
        }
        Command::Complete {
            config,
            vqdif,
            shapeformer,
            scan,
            top_p,
            num_samples,
            seed,
            max_len,
            out,
        } => {
            let cfg = config.load()?;
            let mut options = CompleteOptions::from_config(
                &cfg,
                out.unwrap_or_else(|| cfg.output_dir().join("samples")),
            );
            if let Some(p) = top_p {
                options.top_p = p;
            }
            if let Some(k) = num_samples {
                options.num_samples = k;
            }
            if let Some(s) = seed {
                options.seed = s;
            }
            if let Some(m) = max_len {
                options.max_tuples = m;
            }
            cli::cmd_complete(&cfg, &scan, &vqdif, &shapeformer, &options)?;
        }
        Command::Reconstruct {
            config,
            vqdif,
            input,
            out,
        } => {
            cli::cmd_reconstruct(&config.load()?, &input, &vqdif, &out)?;
        }
        Command::Eval {
            config,
            vqdif,
            shapeformer,
            completions,
        } => {
            let options = EvalOptions {
                vqdif_checkpoint: vqdif,
                shapeformer_checkpoint: shapeformer,
                completions_dir: completions,
            };
            cli::cmd_eval(&config.load()?, &options)?;
        }
        Command::GradCheck {
            tolerance,
            cases,
            seed,
        } => {
            return cli::cmd_grad_check(tolerance, cases, seed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
