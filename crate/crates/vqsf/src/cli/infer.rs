//! Inference commands: encode, complete, reconstruct.

use std::path::{Path, PathBuf};

use crate::autodiff::Element;
use crate::checkpoint::{Checkpoint, CheckpointElement};
use crate::config::RunConfig;
use crate::geometry::{read_xyz, write_obj};
use crate::rng::{indexed_rng, Stream};
use crate::shapeformer::ShapeFormer;
use crate::vqdif::{SparseSeq, Vqdif};
use crate::{Error, Result};

/// Encodes a cloud file into a `.vqsq` sequence file; reports the length
/// and packed size.
pub fn cmd_encode(config: &RunConfig, input: &Path, vqdif_checkpoint: &Path, out: &Path) -> Result<()> {
    config.validate()?;
    match config.precision.as_str() {
        "f64" => encode_impl::<f64>(config, input, vqdif_checkpoint, out),
        _ => encode_impl::<f32>(config, input, vqdif_checkpoint, out),
    }
}

fn encode_impl<E: Element + CheckpointElement>(
    config: &RunConfig,
    input: &Path,
    vqdif_checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let vqdif = Vqdif::<E>::load_from(&Checkpoint::read(vqdif_checkpoint)?, config.vqdif_config()?)?;
    let cloud = read_xyz(input)?;
    let (seq, _) = vqdif.encode(&cloud)?;
    seq.write(out)?;
    println!(
        "encoded {} points -> {} tuples (R={}, V={}), packed {} bytes",
        cloud.len(),
        seq.len(),
        seq.resolution(),
        seq.vocab(),
        seq.packed_size_bytes()
    );
    Ok(())
}

pub struct CompleteOptions {
    pub top_p: f64,
    pub num_samples: usize,
    pub seed: u64,
    pub max_tuples: usize,
    pub out_dir: PathBuf,
}

impl CompleteOptions {
    pub fn from_config(config: &RunConfig, out_dir: PathBuf) -> Self {
        CompleteOptions {
            top_p: config.top_p,
            num_samples: config.num_samples,
            seed: config.seed,
            max_tuples: config.max_tuples,
            out_dir,
        }
    }
}

/// Completes a partial scan: encodes it, samples `num_samples` completion
/// sequences, decodes each to a mesh. Emits `completion_XX.{vqsq,obj}`
/// and returns the mesh paths.
pub fn cmd_complete(
    config: &RunConfig,
    scan: &Path,
    vqdif_checkpoint: &Path,
    shapeformer_checkpoint: &Path,
    options: &CompleteOptions,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    match config.precision.as_str() {
        "f64" => complete_impl::<f64>(config, scan, vqdif_checkpoint, shapeformer_checkpoint, options),
        _ => complete_impl::<f32>(config, scan, vqdif_checkpoint, shapeformer_checkpoint, options),
    }
}

/// Both checkpoints must agree on the sequence geometry before any model
/// loads.
fn cross_check_geometry(vq: &Checkpoint, sf: &Checkpoint) -> Result<()> {
    let a = vq.get_u64s("vqdif/meta/rv")?;
    let b = sf.get_u64s("shapeformer/meta/rv")?;
    if a != b {
        return Err(Error::CheckpointMismatch(format!(
            "autoencoder checkpoint has R={} V={}, transformer checkpoint has R={} V={}",
            a.first().copied().unwrap_or(0),
            a.get(1).copied().unwrap_or(0),
            b.first().copied().unwrap_or(0),
            b.get(1).copied().unwrap_or(0)
        )));
    }
    Ok(())
}

fn complete_impl<E: Element + CheckpointElement>(
    config: &RunConfig,
    scan: &Path,
    vqdif_checkpoint: &Path,
    shapeformer_checkpoint: &Path,
    options: &CompleteOptions,
) -> Result<Vec<PathBuf>> {
    let vq_ck = Checkpoint::read(vqdif_checkpoint)?;
    let sf_ck = Checkpoint::read(shapeformer_checkpoint)?;
    cross_check_geometry(&vq_ck, &sf_ck)?;
    let vqdif = Vqdif::<E>::load_from(&vq_ck, config.vqdif_config()?)?;
    let model = ShapeFormer::<E>::load_from(&sf_ck, config.shapeformer_config()?)?;
    let cloud = read_xyz(scan)?;
    let (partial, _) = vqdif.encode(&cloud)?;
    std::fs::create_dir_all(&options.out_dir).map_err(|e| Error::io(&options.out_dir, e))?;
    let mut paths = Vec::with_capacity(options.num_samples);
    for i in 0..options.num_samples {
        let t0 = std::time::Instant::now();
        let mut rng = indexed_rng(options.seed, Stream::Sample, i as u64);
        let completion = model.sample_completion(&partial, options.top_p, options.max_tuples, &mut rng)?;
        if completion.truncated {
            eprintln!("warning: sample {i} hit the length cap before END; returning the truncated sequence");
        }
        let mesh = vqdif.reconstruct(&completion.seq, config.reconstruct_resolution)?;
        let seq_path = options.out_dir.join(format!("completion_{i:02}.vqsq"));
        let obj_path = options.out_dir.join(format!("completion_{i:02}.obj"));
        completion.seq.write(&seq_path)?;
        write_obj(&mesh, &obj_path)?;
        println!(
            "sample {i}: {} tuples, {} vertices, {} triangles in {:.2?}",
            completion.seq.len(),
            mesh.vertices.len(),
            mesh.triangles.len(),
            t0.elapsed()
        );
        paths.push(obj_path);
    }
    Ok(paths)
}

/// Decodes a `.vqsq` sequence (or encodes a `.xyz` cloud first) and
/// extracts the 0.5 iso-surface mesh.
pub fn cmd_reconstruct(config: &RunConfig, input: &Path, vqdif_checkpoint: &Path, out: &Path) -> Result<()> {
    config.validate()?;
    match config.precision.as_str() {
        "f64" => reconstruct_impl::<f64>(config, input, vqdif_checkpoint, out),
        _ => reconstruct_impl::<f32>(config, input, vqdif_checkpoint, out),
    }
}

fn reconstruct_impl<E: Element + CheckpointElement>(
    config: &RunConfig,
    input: &Path,
    vqdif_checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let vqdif = Vqdif::<E>::load_from(&Checkpoint::read(vqdif_checkpoint)?, config.vqdif_config()?)?;
    let seq = match input.extension().and_then(|e| e.to_str()) {
        Some("vqsq") => SparseSeq::read(input)?,
        _ => {
            let cloud = read_xyz(input)?;
            vqdif.encode(&cloud)?.0
        }
    };
    let mesh = vqdif.reconstruct(&seq, config.reconstruct_resolution)?;
    write_obj(&mesh, out)?;
    println!(
        "reconstructed {} tuples -> {} vertices, {} triangles ({} packed bytes)",
        seq.len(),
        mesh.vertices.len(),
        mesh.triangles.len(),
        seq.packed_size_bytes()
    );
    Ok(())
}
