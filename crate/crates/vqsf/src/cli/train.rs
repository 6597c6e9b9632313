//! Training commands with step-exact resume.
//!
//! Checkpoints carry, next to the model tensors, the optimizer moments,
//! the step counter, and the training RNG state, so a resumed run replays
//! the exact step sequence an uninterrupted run would have produced.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_pcg::Pcg64;

use super::data::{load_samples, LoadedSample};
use super::RunDir;
use crate::autodiff::{Adam, AdamConfig, Element, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointElement};
use crate::config::RunConfig;
use crate::geometry::Split;
use crate::rng::{stream_rng, RngState, Stream};
use crate::shapeformer::ShapeFormer;
use crate::vqdif::{SparseSeq, TrainItem, Vqdif};
use crate::{Error, Result};

fn save_train_state<E: Element + CheckpointElement>(
    ck: &mut Checkpoint,
    adam: &Adam<E>,
    rng: &Pcg64,
    step: usize,
) {
    ck.insert_u64s("train/step", &[step as u64]);
    ck.insert_u64s("train/adam_step", &[adam.step_count()]);
    let limbs = RngState::capture(rng).to_limbs();
    ck.insert_u64s("train/rng", &limbs.map(u64::from));
    for (name, (m, v)) in adam.moments() {
        ck.insert_slice(&format!("adam/m/{name}"), m);
        ck.insert_slice(&format!("adam/v/{name}"), v);
    }
}

fn load_train_state<E: Element + CheckpointElement>(
    ck: &Checkpoint,
    adam: &mut Adam<E>,
) -> Result<(usize, Pcg64)> {
    let step = ck.get_u64s("train/step")?[0] as usize;
    adam.set_step_count(ck.get_u64s("train/adam_step")?[0]);
    let limbs_u64 = ck.get_u64s("train/rng")?;
    if limbs_u64.len() != 8 {
        return Err(Error::CheckpointMismatch("bad rng state length".into()));
    }
    let mut limbs = [0u32; 8];
    for (l, &v) in limbs.iter_mut().zip(&limbs_u64) {
        *l = v as u32;
    }
    let rng = RngState::from_limbs(&limbs).restore();
    let mut names = Vec::new();
    for (name, _) in ck.with_prefix("adam/m/") {
        names.push(name.trim_start_matches("adam/m/").to_string());
    }
    for name in names {
        let m: Tensor<E> = ck.get(&format!("adam/m/{name}"))?;
        let v: Tensor<E> = ck.get(&format!("adam/v/{name}"))?;
        adam.restore_moments(&name, m.data().to_vec(), v.data().to_vec());
    }
    Ok((step, rng))
}

struct LossLog {
    file: std::fs::File,
}

impl LossLog {
    fn open(path: &Path, header: &str, fresh: bool) -> Result<LossLog> {
        let exists = path.exists();
        let mut options = std::fs::OpenOptions::new();
        if fresh {
            options.write(true).create(true).truncate(true);
        } else {
            options.append(true).create(true);
        }
        let mut file = options.open(path).map_err(|e| Error::io(path, e))?;
        if fresh || !exists {
            writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        }
        Ok(LossLog { file })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io("loss log", e))
    }
}

/// Trains the autoencoder on the train split; emits
/// `logs/vqdif_loss.csv` and `checkpoints/vqdif.vqsf`.
pub fn cmd_train_vqdif(config: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    config.validate()?;
    match config.precision.as_str() {
        "f64" => train_vqdif_impl::<f64>(config, resume),
        _ => train_vqdif_impl::<f32>(config, resume),
    }
}

fn train_vqdif_impl<E: Element + CheckpointElement>(
    config: &RunConfig,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let run = RunDir::create(config)?;
    let samples = load_samples(&run, config, Split::Train)?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.vqdif_lr,
        ..AdamConfig::default()
    });
    let (mut model, mut rng, start_step) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let model = Vqdif::<E>::load_from(&ck, config.vqdif_config()?)?;
            let (step, rng) = load_train_state(&ck, &mut adam)?;
            (model, rng, step)
        }
        None => (
            Vqdif::<E>::new(config.vqdif_config()?, config.seed)?,
            stream_rng(config.seed, Stream::Train),
            0,
        ),
    };
    let mut log = LossLog::open(
        &run.logs().join("vqdif_loss.csv"),
        "step,bce,commit,total",
        resume.is_none(),
    )?;
    let final_path = run.checkpoints().join("vqdif.vqsf");
    let t0 = std::time::Instant::now();
    for step in start_step..config.vqdif_steps {
        let lr = config.vqdif_lr * config.vqdif_lr_decay.powi((step / config.vqdif_lr_decay_every) as i32);
        // Draw the batch: a sample plus a random slice of its target pool.
        let mut drawn = Vec::with_capacity(config.vqdif_batch_size);
        for _ in 0..config.vqdif_batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            let t = config.vqdif_targets_per_step.min(s.targets.len());
            let mut queries = Vec::with_capacity(t);
            let mut occ = Vec::with_capacity(t);
            for _ in 0..t {
                let i = rng.random_range(0..s.targets.len());
                queries.push(s.targets.points[i]);
                occ.push(f64::from(s.targets.occupied[i]));
            }
            drawn.push((&s.complete, queries, occ));
        }
        let batch: Vec<TrainItem> = drawn
            .iter()
            .map(|(cloud, queries, occ)| TrainItem {
                cloud,
                queries,
                occupancies: occ,
            })
            .collect();
        let losses = model.train_step(&batch, &mut adam, lr, &mut rng).map_err(|e| match e {
            Error::NonFinite { context } => Error::Divergence {
                step,
                detail: context,
            },
            other => other,
        })?;
        log.row(&format!(
            "{step},{:.6},{:.6},{:.6}",
            losses.bce, losses.commit, losses.total
        ))?;
        if (step + 1) % config.log_every == 0 {
            println!(
                "vqdif step {:>6}/{}: bce {:.4} commit {:.4} total {:.4} ({:.1?})",
                step + 1,
                config.vqdif_steps,
                losses.bce,
                losses.commit,
                losses.total,
                t0.elapsed()
            );
        }
        if (step + 1) % config.checkpoint_every == 0 || step + 1 == config.vqdif_steps {
            let mut ck = Checkpoint::new();
            model.save_into(&mut ck);
            save_train_state(&mut ck, &adam, &rng, step + 1);
            ck.write(&final_path)?;
        }
    }
    println!(
        "vqdif training done: {} steps in {:.1?} -> {}",
        config.vqdif_steps,
        t0.elapsed(),
        final_path.display()
    );
    Ok(final_path)
}

/// Encodes every (scan, complete) pair of the train split with a frozen
/// autoencoder checkpoint, then trains the completion transformer.
pub fn cmd_train_shapeformer(
    config: &RunConfig,
    vqdif_checkpoint: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    config.validate()?;
    match config.precision.as_str() {
        "f64" => train_shapeformer_impl::<f64>(config, vqdif_checkpoint, resume),
        _ => train_shapeformer_impl::<f32>(config, vqdif_checkpoint, resume),
    }
}

/// Sequence pairs for the train split under a frozen encoder.
pub(crate) fn encode_pairs<E: Element>(
    vqdif: &Vqdif<E>,
    samples: &[LoadedSample],
    max_seq_len: usize,
) -> Result<(Vec<(SparseSeq, SparseSeq)>, usize)> {
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for s in samples {
        let (complete_seq, _) = vqdif.encode(&s.complete)?;
        for scan in &s.scans {
            let (partial_seq, _) = vqdif.encode(scan)?;
            if partial_seq.len() + complete_seq.len() + 2 > max_seq_len {
                skipped += 1;
                continue;
            }
            pairs.push((partial_seq, complete_seq.clone()));
        }
    }
    Ok((pairs, skipped))
}

fn train_shapeformer_impl<E: Element + CheckpointElement>(
    config: &RunConfig,
    vqdif_checkpoint: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let run = RunDir::create(config)?;
    let vqdif = Vqdif::<E>::load_from(&Checkpoint::read(vqdif_checkpoint)?, config.vqdif_config()?)?;
    let samples = load_samples(&run, config, Split::Train)?;
    let (pairs, skipped) = encode_pairs(&vqdif, &samples, config.shapeformer_max_seq_len)?;
    if skipped > 0 {
        eprintln!("warning: {skipped} pairs exceeded max_seq_len and were skipped");
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "no sequence pairs fit the transformer length budget".into(),
        ));
    }
    println!("training on {} sequence pairs", pairs.len());
    let mut adam = Adam::new(AdamConfig {
        lr: config.shapeformer_lr,
        ..AdamConfig::default()
    });
    let (mut model, mut rng, start_step) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let model = ShapeFormer::<E>::load_from(&ck, config.shapeformer_config()?)?;
            let (step, rng) = load_train_state(&ck, &mut adam)?;
            (model, rng, step)
        }
        None => (
            ShapeFormer::<E>::new(config.shapeformer_config()?, config.seed)?,
            stream_rng(config.seed, Stream::Train),
            0,
        ),
    };
    let mut log = LossLog::open(
        &run.logs().join("shapeformer_loss.csv"),
        "step,nll",
        resume.is_none(),
    )?;
    let final_path = run.checkpoints().join("shapeformer.vqsf");
    let t0 = std::time::Instant::now();
    for step in start_step..config.shapeformer_steps {
        let batch: Vec<(&SparseSeq, &SparseSeq)> = (0..config.shapeformer_batch_size)
            .map(|_| {
                let (p, c) = &pairs[rng.random_range(0..pairs.len())];
                (p, c)
            })
            .collect();
        let nll = model
            .train_step(&batch, &mut adam, config.shapeformer_lr, &mut rng)
            .map_err(|e| match e {
                Error::NonFinite { context } => Error::Divergence {
                    step,
                    detail: context,
                },
                other => other,
            })?;
        log.row(&format!("{step},{nll:.6}"))?;
        if (step + 1) % config.log_every == 0 {
            println!(
                "shapeformer step {:>6}/{}: nll {:.4} ({:.1?})",
                step + 1,
                config.shapeformer_steps,
                nll,
                t0.elapsed()
            );
        }
        if (step + 1) % config.checkpoint_every == 0 || step + 1 == config.shapeformer_steps {
            let mut ck = Checkpoint::new();
            model.save_into(&mut ck);
            save_train_state(&mut ck, &adam, &rng, step + 1);
            ck.write(&final_path)?;
        }
    }
    println!(
        "shapeformer training done: {} steps in {:.1?} -> {}",
        config.shapeformer_steps,
        t0.elapsed(),
        final_path.display()
    );
    Ok(final_path)
}
