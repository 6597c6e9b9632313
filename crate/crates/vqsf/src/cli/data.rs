//! Dataset generation and loading.
//!
//! `gen-data` writes, per sample: the complete surface cloud (`.xyz`), one
//! scan cloud per view (`.xyz`), and an occupancy-target pool (`.bin`,
//! magic `VQOT`). Everything derives from the manifest recipes, so the
//! same seed regenerates identical bytes.

use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::RunDir;
use crate::config::RunConfig;
use crate::geometry::{
    fibonacci_viewpoints, read_xyz, write_xyz, DatasetPlan, Manifest, OccupancyTargets, PointCloud,
    SampleRecord, Split, SurfaceSampler, VirtualScanner,
};
use crate::rng::{indexed_rng, Stream};
use crate::{Error, Result};

const TARGETS_MAGIC: &[u8; 4] = b"VQOT";

fn write_targets(targets: &OccupancyTargets, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(8 + targets.len() * 13);
    out.extend_from_slice(TARGETS_MAGIC);
    out.extend_from_slice(&(targets.len() as u32).to_le_bytes());
    for (p, &occ) in targets.points.iter().zip(&targets.occupied) {
        for &c in p {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out.push(u8::from(occ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_targets(path: &Path) -> Result<OccupancyTargets> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != TARGETS_MAGIC {
        return Err(Error::format(path, "not a VQOT occupancy-target file"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + count * 13 {
        return Err(Error::format(path, "truncated occupancy-target file"));
    }
    let mut points = Vec::with_capacity(count);
    let mut occupied = Vec::with_capacity(count);
    for rec in bytes[8..].chunks_exact(13) {
        let mut p = [0.0f64; 3];
        for (a, slot) in p.iter_mut().enumerate() {
            let v = f32::from_le_bytes(rec[a * 4..(a + 1) * 4].try_into().unwrap()) as f64;
            // f32 storage can round a clamped coordinate back onto 1.0.
            *slot = v.clamp(0.0, 1.0 - 1e-7);
        }
        points.push(p);
        occupied.push(rec[12] != 0);
    }
    Ok(OccupancyTargets { points, occupied })
}

fn jitter_scan(cloud: PointCloud, sigma: f64, rng: &mut rand_pcg::Pcg64) -> Result<PointCloud> {
    if sigma <= 0.0 {
        return Ok(cloud);
    }
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in q.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *c = (*c + sigma * z).clamp(0.0, 1.0 - 1e-9);
            }
            q
        })
        .collect();
    PointCloud::new(points)
}

/// Viewpoints for one sample: test shapes get the fixed fibonacci + axis
/// set, train/val shapes get random directions.
fn sample_viewpoints(record: &SampleRecord, config: &RunConfig) -> Result<Vec<[f64; 3]>> {
    match record.split {
        Split::Test => Ok(fibonacci_viewpoints(config.data_test_views)?),
        _ => {
            let mut rng = indexed_rng(record.recipe.seed, Stream::Data, 0x90);
            Ok((0..config.data_train_views)
                .map(|_| {
                    loop {
                        let v = [
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                        ];
                        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        if n > 1e-6 {
                            return [v[0] / n, v[1] / n, v[2] / n];
                        }
                    }
                })
                .collect())
        }
    }
}

fn generate_sample(record: &SampleRecord, config: &RunConfig, data_dir: &Path) -> Result<()> {
    let shape = record.recipe.build()?;
    let sampler = SurfaceSampler::new(&shape)?;
    let seed = record.recipe.seed;
    let id = record.id();

    let mut rng = indexed_rng(seed, Stream::Data, 0x10);
    let complete = sampler.sample(config.data_cloud_points, &mut rng)?;
    write_xyz(&complete, &data_dir.join(format!("{id}_complete.xyz")))?;

    let mut rng = indexed_rng(seed, Stream::Data, 0x11);
    let targets = crate::geometry::sample_occupancy_targets(
        &sampler,
        config.data_targets,
        config.data_sigma_near,
        config.data_sigma_far,
        config.data_uniform_frac,
        &mut rng,
    )?;
    write_targets(&targets, &data_dir.join(format!("{id}_targets.bin")))?;

    let mut dense_rng = indexed_rng(seed, Stream::Data, 0x12);
    let dense = sampler.sample(20_000.max(config.data_scan_points), &mut dense_rng)?;
    let scanner = VirtualScanner::with_dense(&shape, dense);
    for (v, viewpoint) in sample_viewpoints(record, config)?.into_iter().enumerate() {
        let mut rng = indexed_rng(seed, Stream::Data, 0x100 + v as u64);
        let scan = scanner.scan(viewpoint, config.data_scan_points, &mut rng)?;
        let scan = jitter_scan(scan, config.data_scan_noise, &mut rng)?;
        write_xyz(&scan, &data_dir.join(format!("{id}_scan{v:02}.xyz")))?;
    }
    Ok(())
}

/// Generates the dataset into `<output_dir>/data/`: manifest plus per-sample
/// clouds, scans, and occupancy targets. Returns the manifest path.
pub fn cmd_gen_data(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let run = RunDir::create(config)?;
    let data_dir = run.data();
    let plan = DatasetPlan {
        kinds: config.shape_kinds()?,
        counts: [config.data_train, config.data_val, config.data_test],
        seed: config.seed,
        resolution: config.resolution,
        // A pair plus its END sentinels must fit the transformer budget
        // even when the partial half is nearly as long as the complete one.
        max_voxels: (config.shapeformer_max_seq_len.saturating_sub(2)) / 2,
    };
    let manifest = plan.generate()?;
    let manifest_path = data_dir.join("manifest.txt");
    manifest.write(&manifest_path)?;
    manifest
        .samples
        .par_iter()
        .map(|record| generate_sample(record, config, &data_dir))
        .collect::<Result<Vec<_>>>()?;
    println!(
        "dataset: {} train / {} val / {} test samples under {}",
        config.data_train,
        config.data_val,
        config.data_test,
        data_dir.display()
    );
    Ok(manifest_path)
}

/// One dataset sample loaded back from disk.
pub struct LoadedSample {
    pub record: SampleRecord,
    pub complete: PointCloud,
    pub targets: OccupancyTargets,
    pub scans: Vec<PointCloud>,
}

/// Loads every sample of a split with its artifacts.
pub fn load_samples(run: &RunDir, config: &RunConfig, split: Split) -> Result<Vec<LoadedSample>> {
    let data_dir = run.data();
    let manifest = Manifest::read(&data_dir.join("manifest.txt"))?;
    let mut out = Vec::new();
    for record in manifest.of_split(split) {
        let id = record.id();
        let complete = read_xyz(&data_dir.join(format!("{id}_complete.xyz")))?;
        let targets = read_targets(&data_dir.join(format!("{id}_targets.bin")))?;
        let views = match split {
            Split::Test => config.data_test_views,
            _ => config.data_train_views,
        };
        let mut scans = Vec::with_capacity(views);
        for v in 0..views {
            scans.push(read_xyz(&data_dir.join(format!("{id}_scan{v:02}.xyz")))?);
        }
        out.push(LoadedSample {
            record: record.clone(),
            complete,
            targets,
            scans,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {} samples in {}",
            split.name(),
            data_dir.display()
        )));
    }
    Ok(out)
}
