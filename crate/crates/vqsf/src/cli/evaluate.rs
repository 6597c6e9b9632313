//! The evaluation command: per-completion accuracy/faithfulness rows, a
//! per-shape diversity/quality summary, and the ambiguity-based view
//! ranking.
//!
//! Conventions: `cd` is Chamfer-L2 (squared, both directions) between the
//! completion cloud and the ground-truth cloud; `f1` the F-score at 1% of
//! the ground-truth bbox diagonal; `uhd` the unidirectional Hausdorff from
//! the scan to the completion; `tmd` the total mutual difference over one
//! scan's completion set; `mmd` the per-shape mean over views of the best
//! completion's Chamfer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Element;
use crate::checkpoint::{Checkpoint, CheckpointElement};
use crate::config::RunConfig;
use crate::geometry::{read_obj, read_xyz, write_obj, PointCloud, Split};
use crate::metrics::{chamfer_l2, fscore, mmd, rank_views, tmd, uhd};
use crate::rng::{indexed_rng, Stream};
use crate::shapeformer::ShapeFormer;
use crate::vqdif::Vqdif;
use crate::{Error, Result};

use super::data::load_samples;
use super::RunDir;

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Generate completions with these checkpoints instead of reading an
    /// existing directory.
    pub vqdif_checkpoint: Option<PathBuf>,
    pub shapeformer_checkpoint: Option<PathBuf>,
    /// Directory of `<id>_view<v>_sample<s>.{obj,xyz}` files when not
    /// generating.
    pub completions_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalSummary {
    pub sample_rows: usize,
    pub mean_cd: f64,
    pub mean_f1: f64,
    pub mean_uhd: f64,
    pub mean_tmd: f64,
    pub mean_mmd: f64,
    pub high_half_mean_ambiguity: f64,
    pub low_half_mean_ambiguity: f64,
    pub csv_path: PathBuf,
}

/// Loads a completion as a point cloud; meshes are resampled to
/// `eval_points` with a seed derived from the file name.
fn completion_cloud(path: &Path, eval_points: usize, seed: u64) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => read_xyz(path),
        _ => {
            let mesh = read_obj(path)?;
            if mesh.is_empty() {
                return Err(Error::format(path, "completion mesh is empty"));
            }
            let mut rng = indexed_rng(seed, Stream::Data, 0xe7a);
            mesh.sample_points(eval_points, &mut rng)
        }
    }
}

pub fn cmd_eval(config: &RunConfig, options: &EvalOptions) -> Result<EvalSummary> {
    config.validate()?;
    match config.precision.as_str() {
        "f64" => eval_impl::<f64>(config, options),
        _ => eval_impl::<f32>(config, options),
    }
}

fn eval_impl<E: Element + CheckpointElement>(config: &RunConfig, options: &EvalOptions) -> Result<EvalSummary> {
    let run = RunDir::open(&config.output_dir());
    let samples = load_samples(&run, config, Split::Test)?;
    let eval_dir = run.eval();
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;

    // Optional generation pass.
    let models: Option<(Vqdif<E>, ShapeFormer<E>)> = match (&options.vqdif_checkpoint, &options.shapeformer_checkpoint)
    {
        (Some(vq), Some(sf)) => {
            let vq_ck = Checkpoint::read(vq)?;
            let sf_ck = Checkpoint::read(sf)?;
            Some((
                Vqdif::load_from(&vq_ck, config.vqdif_config()?)?,
                ShapeFormer::load_from(&sf_ck, config.shapeformer_config()?)?,
            ))
        }
        (None, None) => None,
        _ => {
            return Err(Error::InvalidArgument(
                "eval needs both checkpoints (to generate) or neither (to read completions)".into(),
            ))
        }
    };
    let completions_dir = match (&models, &options.completions_dir) {
        (Some(_), _) => {
            let dir = eval_dir.join("completions");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            dir
        }
        (None, Some(dir)) => dir.clone(),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "eval needs either checkpoints or --completions".into(),
            ))
        }
    };

    // Ambiguity ranking over every view of every shape.
    let mut ambiguity_csv = String::from("shape,view,ambiguity,half\n");
    let mut high_sum = 0.0;
    let mut high_n = 0usize;
    let mut low_sum = 0.0;
    let mut low_n = 0usize;
    let mut view_ambiguity: Vec<Vec<f64>> = Vec::new();
    for s in &samples {
        let ranking = rank_views(&s.complete, &s.scans)?;
        let mut per_view = vec![0.0; s.scans.len()];
        for (rank, &(view, amb)) in ranking.ranked.iter().enumerate() {
            per_view[view] = amb;
            let half = if rank < ranking.split { "high" } else { "low" };
            if rank < ranking.split {
                high_sum += amb;
                high_n += 1;
            } else {
                low_sum += amb;
                low_n += 1;
            }
            writeln!(ambiguity_csv, "{},{view},{amb},{half}", s.record.id()).unwrap();
        }
        view_ambiguity.push(per_view);
    }
    let ambiguity_path = eval_dir.join("ambiguity.csv");
    std::fs::write(&ambiguity_path, ambiguity_csv).map_err(|e| Error::io(&ambiguity_path, e))?;

    // Per-completion metrics over the evaluated views.
    let mut csv = String::from("kind,shape,view,sample,cd,f1,uhd,ambiguity,tmd,mmd\n");
    let mut summary = EvalSummary::default();
    let mut tmd_n = 0usize;
    let mut all_completions: Vec<PointCloud> = Vec::new();
    let mut mmd_sum = 0.0;
    for (si, s) in samples.iter().enumerate() {
        let id = s.record.id();
        let mut best_per_view = Vec::new();
        for v in 0..config.eval_views.min(s.scans.len()) {
            let scan = &s.scans[v];
            let mut clouds = Vec::with_capacity(config.num_samples);
            for k in 0..config.num_samples {
                let path_base = completions_dir.join(format!("{id}_view{v:02}_sample{k:02}"));
                let cloud = if let Some((vqdif, model)) = &models {
                    let (partial, _) = vqdif.encode(scan)?;
                    let mut rng = indexed_rng(
                        config.seed,
                        Stream::Sample,
                        ((si as u64) << 20) | ((v as u64) << 8) | k as u64,
                    );
                    let done = model.sample_completion(&partial, config.top_p, config.max_tuples, &mut rng)?;
                    let mesh = vqdif.reconstruct(&done.seq, config.reconstruct_resolution)?;
                    let obj = path_base.with_extension("obj");
                    write_obj(&mesh, &obj)?;
                    completion_cloud(&obj, config.eval_points, s.record.recipe.seed ^ (v as u64) << 8 ^ k as u64)?
                } else {
                    let obj = path_base.with_extension("obj");
                    let xyz = path_base.with_extension("xyz");
                    let path = if obj.exists() { obj } else { xyz };
                    completion_cloud(&path, config.eval_points, s.record.recipe.seed ^ (v as u64) << 8 ^ k as u64)?
                };
                let cd = chamfer_l2(&cloud, &s.complete)?;
                let f1 = fscore(&cloud, &s.complete, None)?;
                let fidelity = uhd(scan, &cloud)?;
                let amb = view_ambiguity[si][v];
                writeln!(
                    csv,
                    "sample,{id},{v},{k},{cd},{f1},{fidelity},{amb},,"
                )
                .unwrap();
                summary.sample_rows += 1;
                summary.mean_cd += cd;
                summary.mean_f1 += f1;
                summary.mean_uhd += fidelity;
                clouds.push(cloud);
            }
            if clouds.len() >= 2 {
                let t = tmd(&clouds)?;
                writeln!(csv, "tmd,{id},{v},,,,,,{t},").unwrap();
                summary.mean_tmd += t;
                tmd_n += 1;
            }
            let mut best = f64::INFINITY;
            for c in &clouds {
                best = best.min(chamfer_l2(c, &s.complete)?);
            }
            best_per_view.push(best);
            all_completions.extend(clouds);
        }
        if !best_per_view.is_empty() {
            let shape_mmd = best_per_view.iter().sum::<f64>() / best_per_view.len() as f64;
            writeln!(csv, "mmd,{id},,,,,,,,{shape_mmd}").unwrap();
            mmd_sum += shape_mmd;
        }
    }
    // A set-level sanity value over everything evaluated (documented as the
    // generated-vs-reference matching distance).
    let references: Vec<PointCloud> = samples.iter().map(|s| s.complete.clone()).collect();
    let set_mmd = if all_completions.is_empty() {
        0.0
    } else {
        mmd(&all_completions, &references)?
    };

    if summary.sample_rows > 0 {
        summary.mean_cd /= summary.sample_rows as f64;
        summary.mean_f1 /= summary.sample_rows as f64;
        summary.mean_uhd /= summary.sample_rows as f64;
    }
    if tmd_n > 0 {
        summary.mean_tmd /= tmd_n as f64;
    }
    summary.mean_mmd = mmd_sum / samples.len() as f64;
    summary.high_half_mean_ambiguity = if high_n > 0 { high_sum / high_n as f64 } else { 0.0 };
    summary.low_half_mean_ambiguity = if low_n > 0 { low_sum / low_n as f64 } else { 0.0 };

    let csv_path = eval_dir.join("metrics.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    summary.csv_path = csv_path.clone();

    let text = format!(
        "samples evaluated: {}\nmean cd:  {:.6}\nmean f1:  {:.4}\nmean uhd: {:.4}\nmean tmd: {:.6}\nmean mmd (per shape): {:.6}\nset mmd: {:.6}\nmean ambiguity high half: {:.4}\nmean ambiguity low half:  {:.4}\n",
        summary.sample_rows,
        summary.mean_cd,
        summary.mean_f1,
        summary.mean_uhd,
        summary.mean_tmd,
        summary.mean_mmd,
        set_mmd,
        summary.high_half_mean_ambiguity,
        summary.low_half_mean_ambiguity,
    );
    let summary_path = eval_dir.join("summary.txt");
    std::fs::write(&summary_path, &text).map_err(|e| Error::io(&summary_path, e))?;
    print!("{text}");
    Ok(summary)
}
