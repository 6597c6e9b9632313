//! The two-stream decoder-only transformer over sparse shape sequences.
//!
//! Stream one (the coordinate transformer) reads the additively mixed
//! token embeddings through causally masked blocks; its head predicts the
//! next element's coordinate. Its output features, additively mixed with
//! the embedding of that next coordinate, feed stream two (the value
//! transformer), whose head predicts the next element's codebook index —
//! realizing `p(c_i | past)` and `p(v_i | c_i, past)`.

use rand_pcg::Pcg64;

use super::tokens::{self, TokenStream};
use crate::autodiff::{Element, Graph, ParamStore, Tensor, TensorRef};
use crate::checkpoint::{Checkpoint, CheckpointElement};
use crate::rng::{indexed_rng, Stream};
use crate::vqdif::SparseSeq;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ShapeFormerConfig {
    /// Sequence grid resolution R (coordinate ids live in `[0, R^3)`).
    pub resolution: usize,
    /// Codebook vocabulary V.
    pub vocab: usize,
    pub blocks_coord: usize,
    pub blocks_value: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Training-time probability of dropping each partial-segment tuple.
    pub mask_prob: f64,
}

impl Default for ShapeFormerConfig {
    fn default() -> Self {
        ShapeFormerConfig {
            resolution: 8,
            vocab: 256,
            blocks_coord: 4,
            blocks_value: 2,
            heads: 4,
            embed_dim: 128,
            max_seq_len: 160,
            dropout: 0.0,
            mask_prob: 0.3,
        }
    }
}

impl ShapeFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.embed_dim % self.heads != 0 {
            return err(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.blocks_coord == 0 || self.blocks_value == 0 {
            return err("both transformers need at least one block".into());
        }
        if self.resolution < 2 || self.resolution > 32 {
            return err(format!("resolution {} out of range [2, 32]", self.resolution));
        }
        if self.max_seq_len < 4 {
            return err("max sequence length must be at least 4".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} out of [0,1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return err(format!("mask prob {} out of [0,1]", self.mask_prob));
        }
        Ok(())
    }
}

/// Categorical distributions over the next element.
#[derive(Debug, Clone)]
pub struct NextElementDistribution {
    /// Over coordinate ids plus END (index `R^3`).
    pub p_coord: Vec<f64>,
    /// Over codebook indices.
    pub p_value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ShapeFormer<E: Element> {
    pub config: ShapeFormerConfig,
    pub params: ParamStore<E>,
}

pub(crate) struct StreamLogits {
    pub coord: TensorRef,
    pub value: TensorRef,
}

impl<E: Element> ShapeFormer<E> {
    pub fn new(config: ShapeFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = indexed_rng(seed, Stream::Init, 2);
        let mut params = ParamStore::new();
        init_params(&config, &mut params, &mut rng);
        Ok(ShapeFormer { config, params })
    }

    /// Teacher-forced forward pass: per-position distributions over the
    /// next coordinate and (conditioned on the true next coordinate) the
    /// next value.
    pub fn forward(&self, stream: &TokenStream) -> Result<Vec<NextElementDistribution>> {
        let mut g = Graph::new();
        let mut binder = crate::autodiff::ParamBinder::new(&self.params, false);
        let logits = forward_logits(&mut g, &mut binder, &self.config, stream, None)?;
        let pc = g.softmax(logits.coord)?;
        let pv = g.softmax(logits.value)?;
        let n_c = tokens::coord_out_vocab(self.config.resolution);
        let n_v = self.config.vocab;
        let pc_data = g.value(pc).data();
        let pv_data = g.value(pv).data();
        Ok((0..stream.len())
            .map(|i| NextElementDistribution {
                p_coord: pc_data[i * n_c..(i + 1) * n_c].iter().map(|v| v.as_f64()).collect(),
                p_value: pv_data[i * n_v..(i + 1) * n_v].iter().map(|v| v.as_f64()).collect(),
            })
            .collect())
    }

    /// Mean over loss positions of the summed coordinate and value
    /// negative log-likelihoods (END positions contribute only the
    /// coordinate term).
    pub fn nll(&self, stream: &TokenStream) -> Result<f64> {
        let mut g = Graph::new();
        let mut binder = crate::autodiff::ParamBinder::new(&self.params, false);
        let node = self.nll_node(&mut g, &mut binder, stream, None)?;
        Ok(g.value(node).scalar_value().as_f64())
    }

    pub(crate) fn nll_node(
        &self,
        g: &mut Graph<E>,
        binder: &mut crate::autodiff::ParamBinder<E>,
        stream: &TokenStream,
        dropout_rng: Option<&mut Pcg64>,
    ) -> Result<TensorRef> {
        let count = stream.loss_count();
        if count == 0 {
            return Err(Error::InvalidArgument("stream has no loss positions".into()));
        }
        let logits = forward_logits(g, binder, &self.config, stream, dropout_rng)?;
        let ce_c = g.cross_entropy_sum(logits.coord, &stream.coord_targets(), &stream.loss_mask)?;
        let ce_v = g.cross_entropy_sum(logits.value, &stream.value_targets(), &stream.value_loss_mask())?;
        let total = g.add(ce_c, ce_v)?;
        g.scale(total, 1.0 / count as f64)
    }

    pub fn save_into(&self, ck: &mut Checkpoint)
    where
        E: CheckpointElement,
    {
        for (name, tensor) in self.params.iter() {
            ck.insert(name, tensor);
        }
        ck.insert_u64s(
            "shapeformer/meta/rv",
            &[self.config.resolution as u64, self.config.vocab as u64],
        );
    }

    pub fn load_from(ck: &Checkpoint, config: ShapeFormerConfig) -> Result<Self>
    where
        E: CheckpointElement,
    {
        config.validate()?;
        let meta = ck.get_u64s("shapeformer/meta/rv")?;
        if meta.len() != 2 || meta[0] != config.resolution as u64 || meta[1] != config.vocab as u64 {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has R={} V={}, config wants R={} V={}",
                meta.first().copied().unwrap_or(0),
                meta.get(1).copied().unwrap_or(0),
                config.resolution,
                config.vocab
            )));
        }
        let mut fresh = ShapeFormer::new(config, 0)?;
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
        Ok(fresh)
    }

    /// Validates a prefix sequence against this model's geometry.
    pub fn check_sequence(&self, seq: &SparseSeq) -> Result<()> {
        if seq.resolution() as usize != self.config.resolution || seq.vocab() as usize != self.config.vocab {
            return Err(Error::CheckpointMismatch(format!(
                "sequence is R={} V={}, model expects R={} V={}",
                seq.resolution(),
                seq.vocab(),
                self.config.resolution,
                self.config.vocab
            )));
        }
        Ok(())
    }
}

fn init_params<E: Element>(config: &ShapeFormerConfig, params: &mut ParamStore<E>, rng: &mut Pcg64) {
    let d = config.embed_dim;
    let std = 0.02;
    let n_coord = tokens::coord_vocab(config.resolution);
    let n_value = tokens::value_vocab(config.vocab);
    params.init_normal("shapeformer/emb/coord", vec![n_coord, d], std, rng);
    params.init_normal("shapeformer/emb/value", vec![n_value, d], std, rng);
    params.init_normal("shapeformer/emb/pos", vec![config.max_seq_len, d], std, rng);
    params.init_normal("shapeformer/emb/segment", vec![2, d], std, rng);
    params.init_normal("shapeformer/emb/next_coord", vec![n_coord, d], std, rng);
    for (prefix, blocks) in [("c", config.blocks_coord), ("v", config.blocks_value)] {
        for i in 0..blocks {
            let p = format!("shapeformer/blk{prefix}{i}");
            for ln in ["ln1", "ln2"] {
                params.insert(&format!("{p}/{ln}_g"), Tensor::full(vec![d], E::one()));
                params.init_zeros(&format!("{p}/{ln}_b"), vec![d]);
            }
            for w in ["q", "k", "v", "proj"] {
                params.init_normal(&format!("{p}/{w}/w"), vec![d, d], std, rng);
                params.init_zeros(&format!("{p}/{w}/b"), vec![d]);
            }
            params.init_normal(&format!("{p}/mlp0/w"), vec![d, 4 * d], std, rng);
            params.init_zeros(&format!("{p}/mlp0/b"), vec![4 * d]);
            params.init_normal(&format!("{p}/mlp1/w"), vec![4 * d, d], std, rng);
            params.init_zeros(&format!("{p}/mlp1/b"), vec![d]);
        }
        params.insert(&format!("shapeformer/final{prefix}_g"), Tensor::full(vec![d], E::one()));
        params.init_zeros(&format!("shapeformer/final{prefix}_b"), vec![d]);
    }
    params.init_normal("shapeformer/head_c0/w", vec![d, d], std, rng);
    params.init_zeros("shapeformer/head_c0/b", vec![d]);
    params.init_normal(
        "shapeformer/head_c1/w",
        vec![d, tokens::coord_out_vocab(config.resolution)],
        std,
        rng,
    );
    params.init_zeros(
        "shapeformer/head_c1/b",
        vec![tokens::coord_out_vocab(config.resolution)],
    );
    params.init_normal("shapeformer/head_v0/w", vec![d, d], std, rng);
    params.init_zeros("shapeformer/head_v0/b", vec![d]);
    params.init_normal("shapeformer/head_v1/w", vec![d, config.vocab], std, rng);
    params.init_zeros("shapeformer/head_v1/b", vec![config.vocab]);
}

fn layer_norm_affine<E: Element>(
    g: &mut Graph<E>,
    binder: &mut crate::autodiff::ParamBinder<E>,
    x: TensorRef,
    gain: &str,
    bias: &str,
) -> Result<TensorRef> {
    let normed = g.layer_norm(x, 1e-5)?;
    let gain = binder.get(g, gain)?;
    let bias = binder.get(g, bias)?;
    let scaled = g.mul_broadcast(normed, gain)?;
    g.add_broadcast(scaled, bias)
}

fn dropout_mask<E: Element>(
    g: &mut Graph<E>,
    x: TensorRef,
    p: f64,
    rng: &mut Option<&mut Pcg64>,
) -> Result<TensorRef> {
    use rand::RngExt;
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p <= 0.0 {
        return Ok(x);
    }
    let n = g.value(x).numel();
    let shape = g.value(x).shape().to_vec();
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<E> = (0..n)
        .map(|_| {
            if rng.random_bool(p) {
                E::zero()
            } else {
                E::from_f64(scale)
            }
        })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask))?;
    g.mul(x, mask)
}

/// One pre-norm causal block: attention plus MLP, each with a residual.
fn causal_block<E: Element>(
    g: &mut Graph<E>,
    binder: &mut crate::autodiff::ParamBinder<E>,
    config: &ShapeFormerConfig,
    prefix: &str,
    x: TensorRef,
    dropout_rng: &mut Option<&mut Pcg64>,
) -> Result<TensorRef> {
    let d = config.embed_dim;
    let heads = config.heads;
    let dh = d / heads;
    let len = g.value(x).shape()[0];

    let t = layer_norm_affine(g, binder, x, &format!("{prefix}/ln1_g"), &format!("{prefix}/ln1_b"))?;
    let mut qkv = Vec::with_capacity(3);
    for w in ["q", "k", "v"] {
        let ww = binder.get(g, &format!("{prefix}/{w}/w"))?;
        let wb = binder.get(g, &format!("{prefix}/{w}/b"))?;
        let proj = g.linear(t, ww, wb)?;
        // [L, D] -> [H, L, dh]
        let split = g.reshape(proj, vec![len, heads, dh])?;
        qkv.push(g.permute(split, &[1, 0, 2])?);
    }
    let kt = g.permute(qkv[1], &[0, 2, 1])?;
    let scores = g.matmul(qkv[0], kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    // Causal mask: position i attends to j <= i.
    let mut mask = vec![false; heads * len * len];
    for h in 0..heads {
        for i in 0..len {
            for j in i + 1..len {
                mask[(h * len + i) * len + j] = true;
            }
        }
    }
    let masked = g.masked_fill(scores, &mask, -1e9)?;
    let attn = g.softmax(masked)?;
    let ctx = g.matmul(attn, qkv[2])?;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, vec![len, d])?;
    let pw = binder.get(g, &format!("{prefix}/proj/w"))?;
    let pb = binder.get(g, &format!("{prefix}/proj/b"))?;
    let ctx = g.linear(ctx, pw, pb)?;
    let ctx = dropout_mask(g, ctx, config.dropout, dropout_rng)?;
    let x = g.add(x, ctx)?;

    let t = layer_norm_affine(g, binder, x, &format!("{prefix}/ln2_g"), &format!("{prefix}/ln2_b"))?;
    let w0 = binder.get(g, &format!("{prefix}/mlp0/w"))?;
    let b0 = binder.get(g, &format!("{prefix}/mlp0/b"))?;
    let w1 = binder.get(g, &format!("{prefix}/mlp1/w"))?;
    let b1 = binder.get(g, &format!("{prefix}/mlp1/b"))?;
    let h = g.linear(t, w0, b0)?;
    let h = g.relu(h)?;
    let h = g.linear(h, w1, b1)?;
    let h = dropout_mask(g, h, config.dropout, dropout_rng)?;
    g.add(x, h)
}

fn two_layer_head<E: Element>(
    g: &mut Graph<E>,
    binder: &mut crate::autodiff::ParamBinder<E>,
    x: TensorRef,
    first: &str,
    second: &str,
) -> Result<TensorRef> {
    let w0 = binder.get(g, &format!("{first}/w"))?;
    let b0 = binder.get(g, &format!("{first}/b"))?;
    let h = g.linear(x, w0, b0)?;
    let h = g.relu(h)?;
    let w1 = binder.get(g, &format!("{second}/w"))?;
    let b1 = binder.get(g, &format!("{second}/b"))?;
    g.linear(h, w1, b1)
}

/// The full two-stream pass, producing next-coordinate logits and
/// next-value logits per position.
pub(crate) fn forward_logits<E: Element>(
    g: &mut Graph<E>,
    binder: &mut crate::autodiff::ParamBinder<E>,
    config: &ShapeFormerConfig,
    stream: &TokenStream,
    mut dropout_rng: Option<&mut Pcg64>,
) -> Result<StreamLogits> {
    if stream.is_empty() {
        return Err(Error::InvalidArgument("empty token stream".into()));
    }
    if stream.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: stream.len(),
            max: config.max_seq_len,
        });
    }
    if stream.resolution != config.resolution || stream.vocab != config.vocab {
        return Err(Error::InvalidArgument(format!(
            "stream geometry R={} V={} does not match model R={} V={}",
            stream.resolution, stream.vocab, config.resolution, config.vocab
        )));
    }
    let len = stream.len();
    let positions: Vec<usize> = (0..len).collect();
    let coord_table = binder.get(g, "shapeformer/emb/coord")?;
    let value_table = binder.get(g, "shapeformer/emb/value")?;
    let pos_table = binder.get(g, "shapeformer/emb/pos")?;
    let seg_table = binder.get(g, "shapeformer/emb/segment")?;
    let e_coord = g.embedding(coord_table, &stream.coords)?;
    let e_value = g.embedding(value_table, &stream.values)?;
    let e_pos = g.embedding(pos_table, &positions)?;
    let e_seg = g.embedding(seg_table, &stream.segments)?;
    let mut x = g.add(e_coord, e_value)?;
    x = g.add(x, e_pos)?;
    x = g.add(x, e_seg)?;

    for i in 0..config.blocks_coord {
        x = causal_block(g, binder, config, &format!("shapeformer/blkc{i}"), x, &mut dropout_rng)?;
    }
    let h = layer_norm_affine(g, binder, x, "shapeformer/finalc_g", "shapeformer/finalc_b")?;
    let coord_logits = two_layer_head(g, binder, h, "shapeformer/head_c0", "shapeformer/head_c1")?;

    // Value stream: coordinate features mixed with the next element's
    // coordinate embedding.
    let next_table = binder.get(g, "shapeformer/emb/next_coord")?;
    let e_next = g.embedding(next_table, &stream.next_coords())?;
    let mut y = g.add(h, e_next)?;
    for i in 0..config.blocks_value {
        y = causal_block(g, binder, config, &format!("shapeformer/blkv{i}"), y, &mut dropout_rng)?;
    }
    let u = layer_norm_affine(g, binder, y, "shapeformer/finalv_g", "shapeformer/finalv_b")?;
    let value_logits = two_layer_head(g, binder, u, "shapeformer/head_v0", "shapeformer/head_v1")?;

    Ok(StreamLogits {
        coord: coord_logits,
        value: value_logits,
    })
}
