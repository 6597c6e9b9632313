//! The sparse quantized autoencoder: a minimal-receptive-field point
//! encoder, the codebook bottleneck, and an occupancy decoder.

use rand_pcg::Pcg64;

use super::codebook::Codebook;
use super::seq::SparseSeq;
use crate::autodiff::{Element, Graph, ParamBinder as Binder, ParamStore, Tensor, TensorRef};
use crate::checkpoint::{Checkpoint, CheckpointElement};
use crate::geometry::{ravel, voxelize, marching_cubes, Mesh, PointCloud, ScalarField};
use crate::rng::{indexed_rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct VqdifConfig {
    /// Resolution of the point-pooling grid.
    pub base_resolution: usize,
    /// Feature (sequence) resolution R.
    pub feature_resolution: usize,
    /// Per-point feature width of the local pooled encoder.
    pub point_feature_dim: usize,
    /// Codebook feature dimension D.
    pub feature_dim: usize,
    /// Codebook vocabulary V.
    pub codebook_size: usize,
    /// Output channels of each kernel=stride downsampling stage; the last
    /// must equal `feature_dim`.
    pub encoder_channels: Vec<usize>,
    /// Channels per U-Net level, coarse levels last; length = depth + 1.
    pub unet_channels: Vec<usize>,
    /// Channels of each 2x upsampler stage back to base resolution.
    pub upsampler_channels: Vec<usize>,
    /// Kernel size (1 or 3) of each upsampler stage.
    pub upsampler_kernels: Vec<usize>,
    /// Hidden widths of the per-query implicit MLP.
    pub implicit_hidden: Vec<usize>,
    /// Commitment loss weight.
    pub beta: f64,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    /// Codebook entries unused this many consecutive steps are reseeded.
    pub dead_code_steps: u32,
}

impl Default for VqdifConfig {
    fn default() -> Self {
        VqdifConfig {
            base_resolution: 32,
            feature_resolution: 8,
            point_feature_dim: 32,
            feature_dim: 32,
            codebook_size: 256,
            encoder_channels: vec![32, 32],
            unet_channels: vec![32, 64, 128],
            upsampler_channels: vec![24, 16],
            upsampler_kernels: vec![3, 1],
            implicit_hidden: vec![64, 64, 64],
            beta: 0.01,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            dead_code_steps: 200,
        }
    }
}

impl VqdifConfig {
    /// Number of kernel=stride halvings between base and feature grids.
    pub fn encoder_stages(&self) -> usize {
        (self.base_resolution / self.feature_resolution).trailing_zeros() as usize
    }

    pub fn unet_depth(&self) -> usize {
        self.unet_channels.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        let (b, r) = (self.base_resolution, self.feature_resolution);
        if r < 2 || r > 32 {
            return err(format!("feature resolution {r} out of range [2, 32]"));
        }
        if b > 64 || b % r != 0 || !(b / r).is_power_of_two() && b != r {
            return err(format!("base {b} must be R times a power of two, at most 64"));
        }
        let stages = self.encoder_stages();
        if self.encoder_channels.len() != stages {
            return err(format!(
                "{} encoder stages need {} channel entries, got {}",
                stages,
                stages,
                self.encoder_channels.len()
            ));
        }
        let produced = *self.encoder_channels.last().unwrap_or(&self.point_feature_dim);
        if produced != self.feature_dim {
            return err(format!(
                "encoder output channels {produced} must equal feature dim {}",
                self.feature_dim
            ));
        }
        if self.unet_channels.is_empty() {
            return err("unet needs at least one level".into());
        }
        let depth = self.unet_depth();
        if r % (1 << depth) != 0 {
            return err(format!("unet depth {depth} too deep for feature resolution {r}"));
        }
        if self.upsampler_channels.len() != stages || self.upsampler_kernels.len() != stages {
            return err(format!(
                "upsampler needs {} stage entries to mirror the encoder",
                stages
            ));
        }
        if self.upsampler_kernels.iter().any(|&k| k != 1 && k != 3) {
            return err("upsampler kernels must be 1 or 3".into());
        }
        if self.implicit_hidden.is_empty() {
            return err("implicit decoder needs at least one hidden layer".into());
        }
        if self.beta < 0.0 {
            return err(format!("beta {} must be >= 0", self.beta));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return err(format!("ema decay {} out of (0,1]", self.ema_decay));
        }
        Ok(())
    }

    /// Channels entering the implicit decoder.
    fn query_feature_dim(&self) -> usize {
        *self
            .upsampler_channels
            .last()
            .unwrap_or_else(|| self.unet_channels.first().unwrap())
    }
}

pub struct Vqdif<E: Element> {
    pub config: VqdifConfig,
    pub params: ParamStore<E>,
    pub codebook: Codebook<E>,
}

impl<E: Element> Vqdif<E> {
    pub fn new(config: VqdifConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = indexed_rng(seed, Stream::Init, 1);
        let mut params = ParamStore::new();
        init_params(&config, &mut params, &mut rng);
        let codebook = Codebook::init(
            config.codebook_size,
            config.feature_dim,
            config.ema_decay,
            config.ema_epsilon,
            config.dead_code_steps,
            &mut rng,
        );
        Ok(Vqdif {
            config,
            params,
            codebook,
        })
    }

    /// Encodes a cloud into its sparse quantized sequence, also returning
    /// the pre-quantization feature rows (K x D).
    pub fn encode(&self, cloud: &PointCloud) -> Result<(SparseSeq, Vec<E>)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        let (kept, z) = encode_features(&mut g, &mut binder, &self.config, cloud)?;
        let z_data = g.value(z).data().to_vec();
        let assignments = self.codebook.quantize_rows(&z_data)?;
        let entries = kept
            .iter()
            .zip(&assignments)
            .map(|(&c, &v)| (c as u32, v as u32))
            .collect();
        let seq = SparseSeq::new(
            entries,
            self.config.feature_resolution as u16,
            self.config.codebook_size as u32,
        )?;
        Ok((seq, z_data))
    }

    /// Decoder feature grid for a sequence, as plain tensor data.
    pub fn feature_grid(&self, seq: &SparseSeq) -> Result<Tensor<E>> {
        if seq.resolution() as usize != self.config.feature_resolution
            || seq.vocab() as usize != self.config.codebook_size
        {
            return Err(Error::CheckpointMismatch(format!(
                "sequence is R={} V={}, model expects R={} V={}",
                seq.resolution(),
                seq.vocab(),
                self.config.feature_resolution,
                self.config.codebook_size
            )));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        let kept: Vec<usize> = seq.coords().map(|c| c as usize).collect();
        let mut rows = Vec::with_capacity(seq.len() * self.config.feature_dim);
        for v in seq.values() {
            rows.extend_from_slice(self.codebook.entry(v as usize));
        }
        let rows = g.constant(Tensor::new(vec![seq.len(), self.config.feature_dim], rows))?;
        let grid = decode_feature_grid(&mut g, &mut binder, &self.config, &kept, rows)?;
        Ok(g.value(grid).clone())
    }

    /// Occupancy probabilities at query points, in `(0,1)`.
    pub fn decode(&self, seq: &SparseSeq, queries: &[[f64; 3]]) -> Result<Vec<f64>> {
        let grid = self.feature_grid(seq)?;
        self.query_grid(&grid, queries)
    }

    /// Queries a precomputed feature grid (see [`Vqdif::feature_grid`]).
    pub fn query_grid(&self, grid: &Tensor<E>, queries: &[[f64; 3]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(16_384.max(1)) {
            let mut g = Graph::new();
            let mut binder = Binder::new(&self.params, false);
            let grid_id = g.constant(grid.clone())?;
            let logits = query_logits(&mut g, &mut binder, &self.config, grid_id, chunk)?;
            let probs = g.sigmoid(logits)?;
            out.extend(g.value(probs).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    /// Dense occupancy field at `res^3` cell centers.
    pub fn occupancy_field(&self, seq: &SparseSeq, res: usize) -> Result<ScalarField> {
        let grid = self.feature_grid(seq)?;
        let mut queries = Vec::with_capacity(res * res * res);
        for x in 0..res {
            for y in 0..res {
                for z in 0..res {
                    queries.push([
                        (x as f64 + 0.5) / res as f64,
                        (y as f64 + 0.5) / res as f64,
                        (z as f64 + 0.5) / res as f64,
                    ]);
                }
            }
        }
        let values = self.query_grid(&grid, &queries)?;
        Ok(ScalarField::new(res, values))
    }

    /// Decodes the sequence over a dense grid and extracts the 0.5
    /// iso-surface.
    pub fn reconstruct(&self, seq: &SparseSeq, res: usize) -> Result<Mesh> {
        let field = self.occupancy_field(seq, res)?;
        Ok(marching_cubes(&field, 0.5))
    }

    pub fn save_into(&self, ck: &mut Checkpoint)
    where
        E: CheckpointElement,
    {
        for (name, tensor) in self.params.iter() {
            ck.insert(name, tensor);
        }
        ck.insert(
            "vqdif/codebook/e",
            &Tensor::new(
                vec![self.config.codebook_size, self.config.feature_dim],
                self.codebook.embeddings().to_vec(),
            ),
        );
        ck.insert(
            "vqdif/codebook/N",
            &Tensor::new(vec![self.config.codebook_size], self.codebook.ema_count().to_vec()),
        );
        ck.insert(
            "vqdif/codebook/m",
            &Tensor::new(
                vec![self.config.codebook_size, self.config.feature_dim],
                self.codebook.ema_sum().to_vec(),
            ),
        );
        ck.insert_u64s(
            "vqdif/meta/rv",
            &[
                self.config.feature_resolution as u64,
                self.config.codebook_size as u64,
            ],
        );
    }

    pub fn load_from(ck: &Checkpoint, config: VqdifConfig) -> Result<Self>
    where
        E: CheckpointElement,
    {
        config.validate()?;
        let meta = ck.get_u64s("vqdif/meta/rv")?;
        if meta.len() != 2
            || meta[0] != config.feature_resolution as u64
            || meta[1] != config.codebook_size as u64
        {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has R={} V={}, config wants R={} V={}",
                meta.first().copied().unwrap_or(0),
                meta.get(1).copied().unwrap_or(0),
                config.feature_resolution,
                config.codebook_size
            )));
        }
        let mut fresh = Vqdif::new(config, 0)?;
        let names: Vec<String> = fresh.params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let loaded: Tensor<E> = ck.get(&name)?;
            let expected = fresh.params.get(&name)?.shape().to_vec();
            if loaded.shape() != expected {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor `{name}` has shape {:?}, expected {expected:?}",
                    loaded.shape()
                )));
            }
            fresh.params.insert(&name, loaded);
        }
        let e: Tensor<E> = ck.get("vqdif/codebook/e")?;
        let n: Tensor<E> = ck.get("vqdif/codebook/N")?;
        let m: Tensor<E> = ck.get("vqdif/codebook/m")?;
        fresh.codebook = Codebook::from_parts(
            e.data().to_vec(),
            n.data().to_vec(),
            m.data().to_vec(),
            fresh.config.ema_decay,
            fresh.config.ema_epsilon,
            fresh.config.dead_code_steps,
        )?;
        Ok(fresh)
    }
}

fn init_params<E: Element>(config: &VqdifConfig, params: &mut ParamStore<E>, rng: &mut Pcg64) {
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let f = config.point_feature_dim;
    params.init_normal("vqdif/encoder/point0/w", vec![3, f], he(3), rng);
    params.init_zeros("vqdif/encoder/point0/b", vec![f]);
    params.init_normal("vqdif/encoder/point1/w", vec![f, f], he(f), rng);
    params.init_zeros("vqdif/encoder/point1/b", vec![f]);
    let mut c_in = f;
    for (i, &c_out) in config.encoder_channels.iter().enumerate() {
        params.init_normal(
            &format!("vqdif/encoder/down{i}/w"),
            vec![c_out, c_in, 2, 2, 2],
            he(c_in * 8),
            rng,
        );
        params.init_zeros(&format!("vqdif/encoder/down{i}/b"), vec![c_out]);
        c_in = c_out;
    }

    params.init_zeros("vqdif/decoder/fill", vec![1, config.feature_dim]);
    let uc = &config.unet_channels;
    params.init_normal(
        "vqdif/decoder/unet/in/w",
        vec![uc[0], config.feature_dim, 3, 3, 3],
        he(config.feature_dim * 27),
        rng,
    );
    params.init_zeros("vqdif/decoder/unet/in/b", vec![uc[0]]);
    for i in 1..uc.len() {
        params.init_normal(
            &format!("vqdif/decoder/unet/down{i}/w"),
            vec![uc[i], uc[i - 1], 2, 2, 2],
            he(uc[i - 1] * 8),
            rng,
        );
        params.init_zeros(&format!("vqdif/decoder/unet/down{i}/b"), vec![uc[i]]);
        params.init_normal(
            &format!("vqdif/decoder/unet/enc{i}/w"),
            vec![uc[i], uc[i], 3, 3, 3],
            he(uc[i] * 27),
            rng,
        );
        params.init_zeros(&format!("vqdif/decoder/unet/enc{i}/b"), vec![uc[i]]);
    }
    for i in (0..config.unet_depth()).rev() {
        params.init_normal(
            &format!("vqdif/decoder/unet/up{i}/w"),
            vec![uc[i], uc[i + 1], 3, 3, 3],
            he(uc[i + 1] * 27),
            rng,
        );
        params.init_zeros(&format!("vqdif/decoder/unet/up{i}/b"), vec![uc[i]]);
        params.init_normal(
            &format!("vqdif/decoder/unet/merge{i}/w"),
            vec![uc[i], 2 * uc[i], 3, 3, 3],
            he(2 * uc[i] * 27),
            rng,
        );
        params.init_zeros(&format!("vqdif/decoder/unet/merge{i}/b"), vec![uc[i]]);
    }
    let mut prev = uc[0];
    for (j, (&c, &k)) in config
        .upsampler_channels
        .iter()
        .zip(&config.upsampler_kernels)
        .enumerate()
    {
        params.init_normal(
            &format!("vqdif/decoder/ups{j}/w"),
            vec![c, prev, k, k, k],
            he(prev * k * k * k),
            rng,
        );
        params.init_zeros(&format!("vqdif/decoder/ups{j}/b"), vec![c]);
        prev = c;
    }
    let mut d_in = config.query_feature_dim() + 3;
    for (l, &h) in config.implicit_hidden.iter().enumerate() {
        params.init_normal(&format!("vqdif/decoder/implicit{l}/w"), vec![d_in, h], he(d_in), rng);
        params.init_zeros(&format!("vqdif/decoder/implicit{l}/b"), vec![h]);
        d_in = h;
    }
    params.init_normal(
        "vqdif/decoder/implicit_out/w",
        vec![d_in, 1],
        1.0 / (d_in as f64).sqrt(),
        rng,
    );
    params.init_zeros("vqdif/decoder/implicit_out/b", vec![1]);
}

/// Point encoder: per-point MLP, scatter-max into the base grid, then
/// kernel=stride convolutions down to the feature grid. Each feature cell
/// sees exactly the points of its own cell, so the kept features are the
/// occupied cells of `voxelize(cloud, R)` and nothing else.
pub(crate) fn encode_features<E: Element>(
    g: &mut Graph<E>,
    binder: &mut Binder<E>,
    config: &VqdifConfig,
    cloud: &PointCloud,
) -> Result<(Vec<usize>, TensorRef)> {
    let base = config.base_resolution;
    let r = config.feature_resolution;
    let n = cloud.len();
    let mut point_data = Vec::with_capacity(n * 3);
    let mut base_ids = Vec::with_capacity(n);
    for p in cloud.points() {
        point_data.extend(p.iter().map(|&x| E::from_f64(x)));
        let cell = [
            (p[0] * base as f64) as usize,
            (p[1] * base as f64) as usize,
            (p[2] * base as f64) as usize,
        ];
        base_ids.push(ravel(cell, base));
    }
    let points = g.constant(Tensor::new(vec![n, 3], point_data))?;
    let w0 = binder.get(g, "vqdif/encoder/point0/w")?;
    let b0 = binder.get(g, "vqdif/encoder/point0/b")?;
    let w1 = binder.get(g, "vqdif/encoder/point1/w")?;
    let b1 = binder.get(g, "vqdif/encoder/point1/b")?;
    let h = g.linear(points, w0, b0)?;
    let h = g.relu(h)?;
    let h = g.linear(h, w1, b1)?;
    let pooled = g.scatter_max_pool(h, &base_ids, base * base * base)?;
    let pooled_t = g.permute(pooled, &[1, 0])?;
    let mut grid = g.reshape(pooled_t, vec![config.point_feature_dim, base, base, base])?;
    let stages = config.encoder_stages();
    for i in 0..stages {
        let w = binder.get(g, &format!("vqdif/encoder/down{i}/w"))?;
        let b = binder.get(g, &format!("vqdif/encoder/down{i}/b"))?;
        grid = g.conv3d(grid, w, Some(b), 2, 0)?;
        if i + 1 < stages {
            grid = g.relu(grid)?;
        }
    }
    let kept: Vec<usize> = voxelize(cloud, r)?.into_iter().map(|c| ravel(c, r)).collect();
    let rows = g.reshape(grid, vec![config.feature_dim, r * r * r])?;
    let rows = g.permute(rows, &[1, 0])?;
    let z = g.gather_rows(rows, &kept)?;
    Ok((kept, z))
}

/// Scatters sequence features into the R^3 grid (empty cells get the
/// learned fill vector), runs the U-Net and the upsampler, and returns the
/// dense feature grid the implicit decoder samples from.
pub(crate) fn decode_feature_grid<E: Element>(
    g: &mut Graph<E>,
    binder: &mut Binder<E>,
    config: &VqdifConfig,
    kept: &[usize],
    rows: TensorRef,
) -> Result<TensorRef> {
    let r = config.feature_resolution;
    let d = config.feature_dim;
    let cells = r * r * r;
    let fill = binder.get(g, "vqdif/decoder/fill")?;
    let ones = g.constant(Tensor::full(vec![cells, 1], E::one()))?;
    let filled = g.matmul(ones, fill)?;
    let grid_rows = g.scatter_rows(filled, kept, rows)?;
    let grid_t = g.permute(grid_rows, &[1, 0])?;
    let mut x = g.reshape(grid_t, vec![d, r, r, r])?;

    // U-Net down path with skips.
    let w = binder.get(g, "vqdif/decoder/unet/in/w")?;
    let b = binder.get(g, "vqdif/decoder/unet/in/b")?;
    x = g.conv3d(x, w, Some(b), 1, 1)?;
    x = g.relu(x)?;
    let depth = config.unet_depth();
    let mut skips = vec![x];
    for i in 1..=depth {
        let wd = binder.get(g, &format!("vqdif/decoder/unet/down{i}/w"))?;
        let bd = binder.get(g, &format!("vqdif/decoder/unet/down{i}/b"))?;
        let mut y = g.conv3d(*skips.last().unwrap(), wd, Some(bd), 2, 0)?;
        y = g.relu(y)?;
        let we = binder.get(g, &format!("vqdif/decoder/unet/enc{i}/w"))?;
        let be = binder.get(g, &format!("vqdif/decoder/unet/enc{i}/b"))?;
        y = g.conv3d(y, we, Some(be), 1, 1)?;
        y = g.relu(y)?;
        skips.push(y);
    }
    let mut y = *skips.last().unwrap();
    for i in (0..depth).rev() {
        y = g.upsample_nearest2(y)?;
        let wu = binder.get(g, &format!("vqdif/decoder/unet/up{i}/w"))?;
        let bu = binder.get(g, &format!("vqdif/decoder/unet/up{i}/b"))?;
        y = g.conv3d(y, wu, Some(bu), 1, 1)?;
        y = g.relu(y)?;
        let merged = g.concat(&[y, skips[i]], 0)?;
        let wm = binder.get(g, &format!("vqdif/decoder/unet/merge{i}/w"))?;
        let bm = binder.get(g, &format!("vqdif/decoder/unet/merge{i}/b"))?;
        y = g.conv3d(merged, wm, Some(bm), 1, 1)?;
        y = g.relu(y)?;
    }

    // Upsampler back to base resolution, mirroring the encoder stage count.
    for (j, &k) in config.upsampler_kernels.iter().enumerate() {
        y = g.upsample_nearest2(y)?;
        let w = binder.get(g, &format!("vqdif/decoder/ups{j}/w"))?;
        let b = binder.get(g, &format!("vqdif/decoder/ups{j}/b"))?;
        y = g.conv3d(y, w, Some(b), 1, k / 2)?;
        y = g.relu(y)?;
    }
    Ok(y)
}

/// Implicit decoder: trilinear local feature plus the query coordinates
/// through an MLP to a single occupancy logit per query.
pub(crate) fn query_logits<E: Element>(
    g: &mut Graph<E>,
    binder: &mut Binder<E>,
    config: &VqdifConfig,
    feature_grid: TensorRef,
    queries: &[[f64; 3]],
) -> Result<TensorRef> {
    let feat = g.trilinear_sample(feature_grid, queries)?;
    let mut xyz = Vec::with_capacity(queries.len() * 3);
    for q in queries {
        xyz.extend(q.iter().map(|&x| E::from_f64(x)));
    }
    let xyz = g.constant(Tensor::new(vec![queries.len(), 3], xyz))?;
    let mut h = g.concat(&[feat, xyz], 1)?;
    for l in 0..config.implicit_hidden.len() {
        let w = binder.get(g, &format!("vqdif/decoder/implicit{l}/w"))?;
        let b = binder.get(g, &format!("vqdif/decoder/implicit{l}/b"))?;
        h = g.linear(h, w, b)?;
        h = g.relu(h)?;
    }
    let w = binder.get(g, "vqdif/decoder/implicit_out/w")?;
    let b = binder.get(g, "vqdif/decoder/implicit_out/b")?;
    g.linear(h, w, b)
}
