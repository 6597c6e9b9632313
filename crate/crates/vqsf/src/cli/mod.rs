//! Command implementations behind the `vqsf` binary: dataset generation,
//! training, inference, evaluation, and the gradient self-check. The
//! binary only parses arguments; everything it does lives here so library
//! users and tests can drive the same paths.

mod data;
mod evaluate;
mod infer;
mod train;

pub use data::{cmd_gen_data, load_samples, LoadedSample};
pub use evaluate::{cmd_eval, EvalOptions, EvalSummary};
pub use infer::{cmd_complete, cmd_encode, cmd_reconstruct, CompleteOptions};
pub use train::{cmd_train_shapeformer, cmd_train_vqdif};

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::{Error, Result};

/// The run directory layout: resolved config at the root, then
/// `data/`, `checkpoints/`, `logs/`, `samples/`, `eval/`.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates (or reuses) the directory and echoes the resolved config.
    pub fn create(config: &RunConfig) -> Result<RunDir> {
        let root = config.output_dir();
        for sub in ["", "data", "checkpoints", "logs", "samples", "eval"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let resolved = root.join("config.resolved");
        std::fs::write(&resolved, config.to_toml()).map_err(|e| Error::io(&resolved, e))?;
        Ok(RunDir { root })
    }

    pub fn open(root: &Path) -> RunDir {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Runs the finite-difference sweep over every op; prints one line per op
/// and returns whether all passed.
pub fn cmd_grad_check(tolerance: f64, cases: usize, seed: u64) -> Result<bool> {
    let t0 = std::time::Instant::now();
    let reports = crate::autodiff::gradcheck::check_all(tolerance, cases, seed);
    let mut all = true;
    for r in &reports {
        println!(
            "{:28} cases={:3} max_rel_error={:<12.3e} {}",
            r.op,
            r.cases,
            r.max_rel_error,
            if r.pass { "pass" } else { "FAIL" }
        );
        all &= r.pass;
    }
    println!(
        "checked {} ops in {:.1?}; tolerance {tolerance:.0e}; {}",
        reports.len(),
        t0.elapsed(),
        if all { "all passed" } else { "FAILURES PRESENT" }
    );
    Ok(all)
}
