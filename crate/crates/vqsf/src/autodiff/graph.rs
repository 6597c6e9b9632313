use super::kernels::{self, Conv3dDims};
use super::{strides, Element, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

enum Op<E: Element> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    /// `b`'s shape is a suffix of `a`'s; `b` is tiled over the leading dims.
    AddBroadcast {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MulBroadcast {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        dims: Conv3dDims,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        rstd: Vec<E>,
    },
    /// Row gather; doubles as embedding lookup.
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    ScatterMaxPool {
        feats: usize,
        /// Per output slot, the index of the point that won the max, or -1.
        argmax: Vec<i64>,
    },
    ScatterRows {
        base: usize,
        rows: usize,
        ids: Vec<usize>,
    },
    Trilinear {
        grid: usize,
        /// Per query point: 8 (flat spatial index, weight) pairs.
        corners: Vec<[(usize, f64); 8]>,
    },
    UpsampleNearest2 {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    SumAll {
        a: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<E>,
    },
    CrossEntropySum {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    needs_grad: bool,
    param_name: Option<String>,
    op: Op<E>,
}

/// A tape of recorded operations. Build the forward pass through the
/// methods below, then call [`Graph::backward`] on a scalar loss.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    check_finite: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            // NaN/Inf checks after every op; silent divergence is the
            // dominant failure mode, so debug builds always pay for this.
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool, op_name: &'static str) -> Result<TensorRef> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("forward output of {op_name}"),
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            param_name: None,
            op,
        });
        Ok(TensorRef(self.nodes.len() - 1))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, t: TensorRef) -> &Tensor<E> {
        &self.nodes[t.0].value
    }

    /// Gradient of the last `backward` w.r.t. this node, if any flowed.
    pub fn grad(&self, t: TensorRef) -> Option<&[E]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Gradients of all named parameter leaves, in insertion order.
    pub fn named_grads(&self) -> impl Iterator<Item = (&str, &[E])> {
        self.nodes.iter().filter_map(|n| match (&n.param_name, &n.grad) {
            (Some(name), Some(g)) => Some((name.as_str(), g.as_slice())),
            _ => None,
        })
    }

    // ---- leaves ----

    pub fn constant(&mut self, value: Tensor<E>) -> Result<TensorRef> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn input(&mut self, value: Tensor<E>, requires_grad: bool) -> Result<TensorRef> {
        self.push(value, Op::Leaf, requires_grad, "input")
    }

    /// A differentiable leaf carrying a parameter name, so its gradient can
    /// be collected by name after `backward`.
    pub fn param(&mut self, name: &str, value: Tensor<E>) -> Result<TensorRef> {
        let id = self.push(value, Op::Leaf, true, "param")?;
        self.nodes[id.0].param_name = Some(name.to_string());
        Ok(id)
    }

    /// A named leaf that does not accumulate gradients (frozen weights).
    pub fn frozen(&mut self, value: Tensor<E>) -> Result<TensorRef> {
        self.push(value, Op::Leaf, false, "frozen")
    }

    // ---- elementwise and linear algebra ----

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Add { a: a.0, b: b.0 }, ng, "add")
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape (e.g. bias add).
    pub fn add_broadcast(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(vb.shape(), va.shape()) {
            return Err(shape_err(
                "add_broadcast",
                format!("{:?} not a suffix of {:?}", vb.shape(), va.shape()),
            ));
        }
        let blen = vb.numel().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % blen])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::AddBroadcast { a: a.0, b: b.0 }, ng, "add_broadcast")
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, ng, "mul")
    }

    /// `a * b` with `b` broadcast over leading dims of `a` (e.g. layernorm gain).
    pub fn mul_broadcast(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(vb.shape(), va.shape()) {
            return Err(shape_err(
                "mul_broadcast",
                format!("{:?} not a suffix of {:?}", vb.shape(), va.shape()),
            ));
        }
        let blen = vb.numel().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb.data()[i % blen])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::MulBroadcast { a: a.0, b: b.0 }, ng, "mul_broadcast")
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        let va = self.value(a);
        let cc = E::from_f64(c);
        let data = va.data().iter().map(|&x| x * cc).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Scale { a: a.0, c }, ng, "scale")
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`; leading
    /// batch dims must match exactly.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let data = kernels::matmul(va.data(), vb.data(), batch, m, k, n);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(
            Tensor::new(shape, data),
            Op::Matmul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
            ng,
            "matmul",
        )
    }

    /// `x @ w + bias` for 2-D `x`.
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, bias)
    }

    /// Direct 3D convolution. `x` is `[C_in, D, H, W]`, `w` is
    /// `[C_out, C_in, k, k, k]`; cubic kernel, uniform stride and zero padding.
    /// Output extent per axis is `(in + 2*pad - k) / stride + 1`.
    pub fn conv3d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        bias: Option<TensorRef>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(shape_err("conv3d", format!("input {sx:?}, weight {sw:?}")));
        }
        let k = sw[2];
        if stride == 0 || sx[1] + 2 * pad < k || sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(shape_err(
                "conv3d",
                format!("kernel {k} stride {stride} pad {pad} on input {sx:?}"),
            ));
        }
        let dims = Conv3dDims {
            ci: sx[0],
            co: sw[0],
            in_d: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            k,
            stride,
            pad,
            out_d: Conv3dDims::out_extent(sx[1], k, stride, pad),
            out_h: Conv3dDims::out_extent(sx[2], k, stride, pad),
            out_w: Conv3dDims::out_extent(sx[3], k, stride, pad),
        };
        let bias_slice = match bias {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [dims.co] {
                    return Err(shape_err("conv3d", format!("bias {:?} vs C_out {}", vb.shape(), dims.co)));
                }
                Some(b.0)
            }
            None => None,
        };
        let data = kernels::conv3d(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            bias_slice.map(|b| self.nodes[b].value.data()),
            &dims,
        );
        let shape = vec![dims.co, dims.out_d, dims.out_h, dims.out_w];
        let ng = self.needs(x.0) || self.needs(w.0) || bias_slice.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            Tensor::new(shape, data),
            Op::Conv3d {
                x: x.0,
                w: w.0,
                bias: bias_slice,
                dims,
            },
            ng,
            "conv3d",
        )
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Relu { a: a.0 }, ng, "relu")
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> Result<TensorRef> {
        let va = self.value(a);
        let one = E::one();
        let data = va.data().iter().map(|&x| one / (one + (-x).exp())).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Sigmoid { a: a.0 }, ng, "sigmoid")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: TensorRef) -> Result<TensorRef> {
        let va = self.value(a);
        let last = *va.shape().last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        if last == 0 {
            return Err(shape_err("softmax", "zero-length last axis".into()));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(last) {
            let m = row.iter().fold(E::neg_infinity(), |acc, &v| acc.max(v));
            let mut s = E::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Softmax { a: a.0 }, ng, "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine
    /// part; apply gain/bias with `mul_broadcast`/`add_broadcast`).
    pub fn layer_norm(&mut self, a: TensorRef, eps: f64) -> Result<TensorRef> {
        let va = self.value(a);
        let last = *va.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if last == 0 {
            return Err(shape_err("layer_norm", "zero-length last axis".into()));
        }
                let inv_n = E::from_f64(1.0 / last as f64);
        let epse = E::from_f64(eps);
        let mut data = va.data().to_vec();
        let mut rstds = Vec::with_capacity(va.numel() / last);
        for row in data.chunks_mut(last) {
            let mean = row.iter().fold(E::zero(), |a, &v| a + v) * inv_n;
            let var = row
                .iter()
                .fold(E::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_n;
            let rstd = E::one() / (var + epse).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0);
        self.push(
            out,
            Op::LayerNorm {
                a: a.0,
                rstd: rstds,
            },
            ng,
            "layer_norm",
        )
    }

    /// Embedding lookup: rows of a `[V, D]` table selected by id.
    pub fn embedding(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        self.gather_rows(table, ids)
    }

    /// Gathers rows `ids` from a 2-D tensor.
    pub fn gather_rows(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let vt = self.value(table);
        let st = vt.shape();
        if st.len() != 2 {
            return Err(shape_err("gather_rows", format!("table must be 2-D, got {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: id {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data);
        let ng = self.needs(table.0);
        self.push(
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
            "gather_rows",
        )
    }

    /// Max-pools per-point features `[N, D]` into `n_cells` grid cells.
    /// Empty cells stay zero. Ties resolve to the lowest point index, and
    /// the backward pass routes gradient only to each cell's winning point.
    pub fn scatter_max_pool(&mut self, feats: TensorRef, cell_ids: &[usize], n_cells: usize) -> Result<TensorRef> {
        let vf = self.value(feats);
        let sf = vf.shape();
        if sf.len() != 2 || sf[0] != cell_ids.len() {
            return Err(shape_err(
                "scatter_max_pool",
                format!("features {sf:?} vs {} ids", cell_ids.len()),
            ));
        }
        let d = sf[1];
        if let Some(&bad) = cell_ids.iter().find(|&&c| c >= n_cells) {
            return Err(Error::InvalidArgument(format!(
                "scatter_max_pool: cell id {bad} out of range {n_cells}"
            )));
        }
        let mut out = vec![E::zero(); n_cells * d];
        let mut argmax = vec![-1i64; n_cells * d];
        for (p, &c) in cell_ids.iter().enumerate() {
            let row = &vf.data()[p * d..(p + 1) * d];
            for (j, &v) in row.iter().enumerate() {
                let slot = c * d + j;
                if argmax[slot] < 0 || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = p as i64;
                }
            }
        }
        let ng = self.needs(feats.0);
        self.push(
            Tensor::new(vec![n_cells, d], out),
            Op::ScatterMaxPool { feats: feats.0, argmax },
            ng,
            "scatter_max_pool",
        )
    }

    /// Copies `base` and overwrites row `ids[k]` with `rows[k]`. Ids must be
    /// distinct.
    pub fn scatter_rows(&mut self, base: TensorRef, ids: &[usize], rows: TensorRef) -> Result<TensorRef> {
        let (vb, vr) = (self.value(base), self.value(rows));
        let (sb, sr) = (vb.shape(), vr.shape());
        if sb.len() != 2 || sr.len() != 2 || sb[1] != sr[1] || sr[0] != ids.len() {
            return Err(shape_err(
                "scatter_rows",
                format!("base {sb:?}, rows {sr:?}, {} ids", ids.len()),
            ));
        }
        let d = sb[1];
        let mut seen = vec![false; sb[0]];
        for &i in ids {
            if i >= sb[0] {
                return Err(Error::InvalidArgument(format!(
                    "scatter_rows: id {i} out of range for {} rows",
                    sb[0]
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("scatter_rows: duplicate id {i}")));
            }
        }
        let mut data = vb.data().to_vec();
        for (k, &i) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&vr.data()[k * d..(k + 1) * d]);
        }
        let ng = self.needs(base.0) || self.needs(rows.0);
        self.push(
            Tensor::new(sb.to_vec(), data),
            Op::ScatterRows {
                base: base.0,
                rows: rows.0,
                ids: ids.to_vec(),
            },
            ng,
            "scatter_rows",
        )
    }

    /// Trilinear interpolation of a `[C, G, G, G]` feature grid at points in
    /// `[0,1)^3`. Grid samples live at cell centers `(i + 0.5) / G`; borders
    /// clamp. Output is `[T, C]`.
    pub fn trilinear_sample(&mut self, grid: TensorRef, points: &[[f64; 3]]) -> Result<TensorRef> {
        let vg = self.value(grid);
        let sg = vg.shape();
        if sg.len() != 4 || sg[1] != sg[2] || sg[2] != sg[3] {
            return Err(shape_err("trilinear_sample", format!("grid {sg:?}")));
        }
        let (c, g) = (sg[0], sg[1]);
        let gv = g * g * g;
        let mut corners = Vec::with_capacity(points.len());
        for p in points {
            if p.iter().any(|&x| !(0.0..1.0).contains(&x)) {
                return Err(Error::InvalidArgument(format!(
                    "trilinear_sample: query {p:?} outside [0,1)^3"
                )));
            }
            let mut idx = [[0usize; 2]; 3];
            let mut frac = [0.0f64; 3];
            for a in 0..3 {
                let u = p[a] * g as f64 - 0.5;
                let uf = u.floor();
                let i0 = (uf as isize).clamp(0, g as isize - 1) as usize;
                let i1 = ((uf as isize) + 1).clamp(0, g as isize - 1) as usize;
                idx[a] = [i0, i1];
                frac[a] = (u - uf).clamp(0.0, 1.0);
            }
            let mut cs = [(0usize, 0.0f64); 8];
            for (ci, corner) in cs.iter_mut().enumerate() {
                let (bx, by, bz) = (ci & 1, (ci >> 1) & 1, (ci >> 2) & 1);
                let w = (if bx == 1 { frac[0] } else { 1.0 - frac[0] })
                    * (if by == 1 { frac[1] } else { 1.0 - frac[1] })
                    * (if bz == 1 { frac[2] } else { 1.0 - frac[2] });
                let sp = (idx[0][bx] * g + idx[1][by]) * g + idx[2][bz];
                *corner = (sp, w);
            }
            corners.push(cs);
        }
        let mut out = vec![E::zero(); points.len() * c];
        for (t, cs) in corners.iter().enumerate() {
            for ch in 0..c {
                let base = ch * gv;
                let mut acc = E::zero();
                for &(sp, w) in cs {
                    acc = acc + vg.data()[base + sp] * E::from_f64(w);
                }
                out[t * c + ch] = acc;
            }
        }
        let ng = self.needs(grid.0);
        self.push(
            Tensor::new(vec![points.len(), c], out),
            Op::Trilinear { grid: grid.0, corners },
            ng,
            "trilinear_sample",
        )
    }

    /// Nearest-neighbor 2x upsampling of a `[C, D, H, W]` grid.
    pub fn upsample_nearest2(&mut self, a: TensorRef) -> Result<TensorRef> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 {
            return Err(shape_err("upsample_nearest2", format!("{s:?}")));
        }
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let (d2, h2, w2) = (d * 2, h * 2, w * 2);
        let mut out = vec![E::zero(); c * d2 * h2 * w2];
        for ch in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    let in_base = ((ch * d + z / 2) * h + y / 2) * w;
                    let out_base = ((ch * d2 + z) * h2 + y) * w2;
                    for x in 0..w2 {
                        out[out_base + x] = va.data()[in_base + x / 2];
                    }
                }
            }
        }
        let ng = self.needs(a.0);
        self.push(
            Tensor::new(vec![c, d2, h2, w2], out),
            Op::UpsampleNearest2 { a: a.0 },
            ng,
            "upsample_nearest2",
        )
    }

    pub fn reshape(&mut self, a: TensorRef, new_shape: Vec<usize>) -> Result<TensorRef> {
        let va = self.value(a);
        let numel: usize = new_shape.iter().product();
        if numel != va.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({} elems) -> {:?} ({} elems)", va.shape(), va.numel(), new_shape, numel),
            ));
        }
        let out = Tensor::new(new_shape, va.data().to_vec());
        let ng = self.needs(a.0);
        self.push(out, Op::Reshape { a: a.0 }, ng, "reshape")
    }

    pub fn permute(&mut self, a: TensorRef, perm: &[usize]) -> Result<TensorRef> {
        let va = self.value(a);
        let s = va.shape();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..s.len()).collect::<Vec<_>>() {
            return Err(shape_err("permute", format!("perm {perm:?} for rank {}", s.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_data(va.data(), s, perm);
        let ng = self.needs(a.0);
        self.push(
            Tensor::new(out_shape, data),
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            ng,
            "permute",
        )
    }

    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let alen = v.shape()[axis];
                let block = alen * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p.0));
        self.push(
            Tensor::new(out_shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            ng,
            "concat",
        )
    }

    /// Replaces elements where `mask` is true with `value`; gradient is
    /// blocked there.
    pub fn masked_fill(&mut self, a: TensorRef, mask: &[bool], value: f64) -> Result<TensorRef> {
        let va = self.value(a);
        if mask.len() != va.numel() {
            return Err(shape_err(
                "masked_fill",
                format!("mask len {} vs {} elems", mask.len(), va.numel()),
            ));
        }
        let fv = E::from_f64(value);
        let data = va
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fv } else { x })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a.0);
        self.push(
            out,
            Op::MaskedFill {
                a: a.0,
                mask: mask.to_vec(),
            },
            ng,
            "masked_fill",
        )
    }

    pub fn sum_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let va = self.value(a);
        let s = va.data().iter().fold(E::zero(), |acc, &v| acc + v);
        let ng = self.needs(a.0);
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, ng, "sum_all")
    }

    pub fn mean_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Numerically stable binary cross-entropy with logits, averaged over
    /// all elements. Targets are constants.
    pub fn bce_with_logits(&mut self, logits: TensorRef, targets: &[f64]) -> Result<TensorRef> {
        let vl = self.value(logits);
        if targets.len() != vl.numel() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} targets vs {} logits", targets.len(), vl.numel()),
            ));
        }
        let n = vl.numel().max(1);
        let mut acc = 0.0f64;
        for (&x, &t) in vl.data().iter().zip(targets) {
            let xf = x.as_f64();
            acc += xf.max(0.0) - xf * t + (-xf.abs()).exp().ln_1p();
        }
        let loss = E::from_f64(acc / n as f64);
        let ng = self.needs(logits.0);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.iter().map(|&t| E::from_f64(t)).collect(),
            },
            ng,
            "bce_with_logits",
        )
    }

    /// Sum over rows with `mask[i]` of `-log softmax(logits[i])[targets[i]]`.
    /// The caller divides by whatever count realizes its mean convention.
    pub fn cross_entropy_sum(
        &mut self,
        logits: TensorRef,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorRef> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(shape_err(
                "cross_entropy_sum",
                format!("logits {s:?}, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        let c = s[1];
        let mut acc = 0.0f64;
        for (i, row) in vl.data().chunks(c).enumerate() {
            if !mask[i] {
                continue;
            }
            if targets[i] >= c {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy_sum: target {} out of range {c}",
                    targets[i]
                )));
            }
            let m = row.iter().fold(E::neg_infinity(), |a, &v| a.max(v)).as_f64();
            let lse = m + row.iter().map(|&v| (v.as_f64() - m).exp()).sum::<f64>().ln();
            acc += lse - row[targets[i]].as_f64();
        }
        let ng = self.needs(logits.0);
        self.push(
            Tensor::scalar(E::from_f64(acc)),
            Op::CrossEntropySum {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
            "cross_entropy_sum",
        )
    }

    // ---- backward ----

    /// Accumulates `d loss / d node` into every recorded node that needs a
    /// gradient. `loss` must be scalar and connected to at least one
    /// differentiable leaf.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::InvalidArgument(
                "backward: loss is detached from all differentiable inputs".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let gout = node.grad.as_ref().unwrap();
            step_backward(before, node, gout);
        }
        if self.check_finite {
            for (i, n) in self.nodes.iter().enumerate() {
                if let Some(g) = &n.grad {
                    let s = g.iter().fold(E::zero(), |a, &v| a + v.abs());
                    if !s.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("gradient of node {i}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn permute_data<E: Element>(data: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![E::zero(); data.len()];
    let mut coords = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut in_idx = 0;
        for (d, &c) in coords.iter().enumerate() {
            in_idx += c * in_strides[perm[d]];
        }
        *o = data[in_idx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn accum<E: Element>(nodes: &mut [Node<E>], id: usize, f: impl FnOnce(&mut [E])) {
    if !nodes[id].needs_grad {
        return;
    }
    let numel = nodes[id].value.numel();
    let g = nodes[id].grad.get_or_insert_with(|| vec![E::zero(); numel]);
    f(g);
}

fn step_backward<E: Element>(before: &mut [Node<E>], node: &Node<E>, gout: &[E]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accum(before, *a, |g| {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = *gi + go;
                }
            });
            accum(before, *b, |g| {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = *gi + go;
                }
            });
        }
        Op::AddBroadcast { a, b } => {
            accum(before, *a, |g| {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = *gi + go;
                }
            });
            accum(before, *b, |g| {
                let blen = g.len().max(1);
                for (i, &go) in gout.iter().enumerate() {
                    g[i % blen] = g[i % blen] + go;
                }
            });
        }
        Op::Mul { a, b } => {
            let (ai, bi) = (*a, *b);
            let bv: Vec<E> = before[bi].value.data().to_vec();
            let av: Vec<E> = before[ai].value.data().to_vec();
            accum(before, ai, |g| {
                for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(&bv) {
                    *gi = *gi + go * y;
                }
            });
            accum(before, bi, |g| {
                for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&av) {
                    *gi = *gi + go * x;
                }
            });
        }
        Op::MulBroadcast { a, b } => {
            let (ai, bi) = (*a, *b);
            let bv: Vec<E> = before[bi].value.data().to_vec();
            let av: Vec<E> = before[ai].value.data().to_vec();
            let blen = bv.len().max(1);
            accum(before, ai, |g| {
                for (i, (gi, &go)) in g.iter_mut().zip(gout).enumerate() {
                    *gi = *gi + go * bv[i % blen];
                }
            });
            accum(before, bi, |g| {
                for (i, &go) in gout.iter().enumerate() {
                    g[i % blen] = g[i % blen] + go * av[i];
                }
            });
        }
        Op::Scale { a, c } => {
            let cc = E::from_f64(*c);
            accum(before, *a, |g| {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = *gi + go * cc;
                }
            });
        }
        Op::Matmul { a, b, batch, m, k, n } => {
            let (ai, bi) = (*a, *b);
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            if before[ai].needs_grad {
                let da = kernels::matmul_grad_a(gout, before[bi].value.data(), batch, m, k, n);
                accum(before, ai, |g| {
                    for (gi, &d) in g.iter_mut().zip(&da) {
                        *gi = *gi + d;
                    }
                });
            }
            if before[bi].needs_grad {
                let db = kernels::matmul_grad_b(gout, before[ai].value.data(), batch, m, k, n);
                accum(before, bi, |g| {
                    for (gi, &d) in g.iter_mut().zip(&db) {
                        *gi = *gi + d;
                    }
                });
            }
        }
        Op::Conv3d { x, w, bias, dims } => {
            let (xi, wi) = (*x, *w);
            if before[xi].needs_grad {
                let dx = kernels::conv3d_grad_x(gout, before[wi].value.data(), dims);
                accum(before, xi, |g| {
                    for (gi, &d) in g.iter_mut().zip(&dx) {
                        *gi = *gi + d;
                    }
                });
            }
            let need_w = before[wi].needs_grad;
            let need_b = bias.map(|b| before[b].needs_grad).unwrap_or(false);
            if need_w || need_b {
                let (dw, db) = kernels::conv3d_grad_w(gout, before[xi].value.data(), dims);
                if need_w {
                    accum(before, wi, |g| {
                        for (gi, &d) in g.iter_mut().zip(&dw) {
                            *gi = *gi + d;
                        }
                    });
                }
                if let Some(b) = bias {
                    accum(before, *b, |g| {
                        for (gi, &d) in g.iter_mut().zip(&db) {
                            *gi = *gi + d;
                        }
                    });
                }
            }
        }
        Op::Relu { a } => {
            let av: Vec<E> = before[*a].value.data().to_vec();
            accum(before, *a, |g| {
                for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&av) {
                    if x > E::zero() {
                        *gi = *gi + go;
                    }
                }
            });
        }
        Op::Sigmoid { a } => {
            let y = node.value.data();
            accum(before, *a, |g| {
                for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                    *gi = *gi + go * yv * (E::one() - yv);
                }
            });
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let last = *node.value.shape().last().unwrap();
            accum(before, *a, |g| {
                for r in 0..y.len() / last {
                    let row = &y[r * last..(r + 1) * last];
                    let go_row = &gout[r * last..(r + 1) * last];
                    let dot = row
                        .iter()
                        .zip(go_row)
                        .fold(E::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    let g_row = &mut g[r * last..(r + 1) * last];
                    for ((gi, &yv), &gv) in g_row.iter_mut().zip(row).zip(go_row) {
                        *gi = *gi + yv * (gv - dot);
                    }
                }
            });
        }
        Op::LayerNorm { a, rstd } => {
            let y = node.value.data();
            let last = *node.value.shape().last().unwrap();
            let inv_n = E::from_f64(1.0 / last as f64);
            accum(before, *a, |g| {
                for r in 0..y.len() / last {
                    let y_row = &y[r * last..(r + 1) * last];
                    let go_row = &gout[r * last..(r + 1) * last];
                    let mean_g = go_row.iter().fold(E::zero(), |acc, &v| acc + v) * inv_n;
                    let mean_gy = y_row
                        .iter()
                        .zip(go_row)
                        .fold(E::zero(), |acc, (&yv, &gv)| acc + yv * gv)
                        * inv_n;
                    let rs = rstd[r];
                    let g_row = &mut g[r * last..(r + 1) * last];
                    for ((gi, &yv), &gv) in g_row.iter_mut().zip(y_row).zip(go_row) {
                        *gi = *gi + rs * (gv - mean_g - yv * mean_gy);
                    }
                }
            });
        }
        Op::Gather { table, ids } => {
            let d = node.value.shape()[1];
            accum(before, *table, |g| {
                for (k, &i) in ids.iter().enumerate() {
                    let src = &gout[k * d..(k + 1) * d];
                    let dst = &mut g[i * d..(i + 1) * d];
                    for (gi, &go) in dst.iter_mut().zip(src) {
                        *gi = *gi + go;
                    }
                }
            });
        }
        Op::ScatterMaxPool { feats, argmax } => {
            let d = node.value.shape()[1];
            accum(before, *feats, |g| {
                for (slot, &p) in argmax.iter().enumerate() {
                    if p >= 0 {
                        let j = slot % d;
                        let gi = &mut g[(p as usize) * d + j];
                        *gi = *gi + gout[slot];
                    }
                }
            });
        }
        Op::ScatterRows { base, rows, ids } => {
            let d = node.value.shape()[1];
            accum(before, *rows, |g| {
                for (k, &i) in ids.iter().enumerate() {
                    let src = &gout[i * d..(i + 1) * d];
                    let dst = &mut g[k * d..(k + 1) * d];
                    for (gi, &go) in dst.iter_mut().zip(src) {
                        *gi = *gi + go;
                    }
                }
            });
            accum(before, *base, |g| {
                let mut overwritten = vec![false; g.len() / d];
                for &i in ids {
                    overwritten[i] = true;
                }
                for (r, skip) in overwritten.iter().enumerate() {
                    if !skip {
                        let src = &gout[r * d..(r + 1) * d];
                        let dst = &mut g[r * d..(r + 1) * d];
                        for (gi, &go) in dst.iter_mut().zip(src) {
                            *gi = *gi + go;
                        }
                    }
                }
            });
        }
        Op::Trilinear { grid, corners } => {
            let c = node.value.shape()[1];
            let gv = before[*grid].value.numel() / c;
            accum(before, *grid, |g| {
                for (t, cs) in corners.iter().enumerate() {
                    for ch in 0..c {
                        let go = gout[t * c + ch];
                        for &(sp, w) in cs {
                            let gi = &mut g[ch * gv + sp];
                            *gi = *gi + go * E::from_f64(w);
                        }
                    }
                }
            });
        }
        Op::UpsampleNearest2 { a } => {
            let s = node.value.shape().to_vec();
            let (c, d2, h2, w2) = (s[0], s[1], s[2], s[3]);
            accum(before, *a, |g| {
                let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
                for ch in 0..c {
                    for z in 0..d2 {
                        for y in 0..h2 {
                            let out_base = ((ch * d2 + z) * h2 + y) * w2;
                            let in_base = ((ch * d + z / 2) * h + y / 2) * w;
                            for x in 0..w2 {
                                let gi = &mut g[in_base + x / 2];
                                *gi = *gi + gout[out_base + x];
                            }
                        }
                    }
                }
            });
        }
        Op::Reshape { a } => {
            accum(before, *a, |g| {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = *gi + go;
                }
            });
        }
        Op::Permute { a, perm } => {
            let in_shape = before[*a].value.shape().to_vec();
            // Inverse permutation maps output grads back to input layout.
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
            let back = permute_data(gout, &out_shape, &inv);
            accum(before, *a, |g| {
                for (gi, &go) in g.iter_mut().zip(&back) {
                    *gi = *gi + go;
                }
            });
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape().to_vec();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let mut axis_offset = 0usize;
            let total_axis = out_shape[*axis];
            for &p in parts {
                let alen = before[p].value.shape()[*axis];
                accum(before, p, |g| {
                    for o in 0..outer {
                        let src =
                            &gout[(o * total_axis + axis_offset) * inner..(o * total_axis + axis_offset + alen) * inner];
                        let dst = &mut g[o * alen * inner..(o + 1) * alen * inner];
                        for (gi, &go) in dst.iter_mut().zip(src) {
                            *gi = *gi + go;
                        }
                    }
                });
                axis_offset += alen;
            }
        }
        Op::MaskedFill { a, mask } => {
            accum(before, *a, |g| {
                for ((gi, &go), &m) in g.iter_mut().zip(gout).zip(mask) {
                    if !m {
                        *gi = *gi + go;
                    }
                }
            });
        }
        Op::SumAll { a } => {
            let go = gout[0];
            accum(before, *a, |g| {
                for gi in g.iter_mut() {
                    *gi = *gi + go;
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            let go = gout[0];
            let xv: Vec<E> = before[*logits].value.data().to_vec();
            let n = E::from_f64(1.0 / xv.len().max(1) as f64);
            accum(before, *logits, |g| {
                for ((gi, &x), &t) in g.iter_mut().zip(&xv).zip(targets) {
                    let sig = E::one() / (E::one() + (-x).exp());
                    *gi = *gi + go * n * (sig - t);
                }
            });
        }
        Op::CrossEntropySum { logits, targets, mask } => {
            let go = gout[0];
            let li = *logits;
            let c = before[li].value.shape()[1];
            let xv: Vec<E> = before[li].value.data().to_vec();
            accum(before, li, |g| {
                for (i, row) in xv.chunks(c).enumerate() {
                    if !mask[i] {
                        continue;
                    }
                    let m = row.iter().fold(E::neg_infinity(), |a, &v| a.max(v));
                    let s = row.iter().fold(E::zero(), |a, &v| a + (v - m).exp());
                    let g_row = &mut g[i * c..(i + 1) * c];
                    for (j, (gi, &x)) in g_row.iter_mut().zip(row).enumerate() {
                        let p = (x - m).exp() / s;
                        let delta = if j == targets[i] { E::one() } else { E::zero() };
                        *gi = *gi + go * (p - delta);
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, vals)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]), true).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn elementwise_square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(vec![3], &[1.0, 2.0, 3.0]), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(vec![3], &[0.0, 0.0, 0.0]), false).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g
            .input(t64(vec![2, 4], &[0.3, -1.2, 2.0, 0.7, -0.5, 0.1, 0.2, -2.0]), false)
            .unwrap();
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut g = Graph::<f64>::new();
        let x = g
            .input(t64(vec![2, 5], &[3.0, -1.0, 2.5, 0.3, 9.0, -2.0, 4.0, 0.0, 1.0, 1.5]), false)
            .unwrap();
        let y = g.layer_norm(x, 1e-10).unwrap();
        for row in g.value(y).data().chunks(5) {
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn bce_with_logits_at_zero_logit() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(vec![1], &[0.0]), true).unwrap();
        let loss = g.bce_with_logits(x, &[1.0]).unwrap();
        assert!((g.value(loss).scalar_value() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(vec![2], &[1.0, 2.0]), true).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn detached_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(vec![2], &[1.0, 2.0]), false).unwrap();
        let loss = g.sum_all(x).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn nan_input_is_hard_error() {
        let mut g = Graph::<f64>::new().with_finite_checks(true);
        let x = g.input(t64(vec![2], &[1.0, 2.0]), false).unwrap();
        let bad = g.scale(x, f64::NAN);
        assert!(matches!(bad, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn scatter_max_routes_gradient_to_argmax_only() {
        let mut g = Graph::<f64>::new();
        // Two cells; points 0,1 -> cell 0, point 2 -> cell 1.
        let feats = g
            .input(t64(vec![3, 2], &[1.0, 5.0, 2.0, 4.0, 7.0, -1.0]), true)
            .unwrap();
        let pooled = g.scatter_max_pool(feats, &[0, 0, 1], 2).unwrap();
        assert_eq!(g.value(pooled).data(), &[2.0, 5.0, 7.0, -1.0]);
        let loss = g.sum_all(pooled).unwrap();
        g.backward(loss).unwrap();
        // Cell 0 col 0 won by point 1; col 1 by point 0; cell 1 both by point 2.
        assert_eq!(g.grad(feats).unwrap(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn scatter_max_breaks_ties_to_lowest_index() {
        let mut g = Graph::<f64>::new();
        let feats = g.input(t64(vec![2, 1], &[3.0, 3.0]), true).unwrap();
        let pooled = g.scatter_max_pool(feats, &[0, 0], 1).unwrap();
        let loss = g.sum_all(pooled).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(feats).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn matmul_chain_backward_matches_manual() {
        // loss = sum((x @ w)); d/dw = x^T broadcast.
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let w = g.input(t64(vec![2, 2], &[0.1, 0.2, 0.3, 0.4]), true).unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        // dW[p, j] = sum_i x[i, p]
        assert_eq!(g.grad(w).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]), true).unwrap();
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[1., 4., 2., 5., 3., 6.]);
        let z = g.mul(y, y).unwrap();
        let loss = g.sum_all(z).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4., 6., 8., 10., 12.]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t64(vec![2, 1], &[1., 2.]), true).unwrap();
        let b = g.input(t64(vec![2, 2], &[3., 4., 5., 6.]), true).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let sc = g.mul(c, c).unwrap();
        let loss = g.sum_all(sc).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2., 4.]);
        assert_eq!(g.grad(b).unwrap(), &[6., 8., 10., 12.]);
    }

    #[test]
    fn trilinear_at_cell_center_is_exact() {
        let mut g = Graph::<f64>::new();
        let mut vals = vec![0.0; 8];
        vals[(1 * 2 + 0) * 2 + 1] = 3.5; // cell (1,0,1) of a 2^3 grid
        let grid = g.input(Tensor::from_f64s(vec![1, 2, 2, 2], &vals), false).unwrap();
        let y = g.trilinear_sample(grid, &[[0.75, 0.25, 0.75]]).unwrap();
        assert!((g.value(y).data()[0] - 3.5).abs() < 1e-12);
    }
}
