//! Raw numeric kernels behind the graph operations.
//!
//! All kernels write each output element from exactly one task, so the
//! rayon parallelism here cannot introduce nondeterminism.

use rayon::prelude::*;

use super::Element;

/// Batched matmul: `a` is [batch, m, k], `b` is [batch, k, n] (batch may be 1
/// collapsed away by the caller). Output [batch, m, n].
pub fn matmul<E: Element>(
    a: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut out = vec![E::zero(); batch * m * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(row_idx, out_row)| {
            let bi = row_idx / m;
            let i = row_idx % m;
            let a_row = &a[bi * m * k + i * k..bi * m * k + (i + 1) * k];
            let b_mat = &b[bi * k * n..(bi + 1) * k * n];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b_mat[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        });
    out
}

/// Dot product with four fixed-order lanes; the explicit reassociation
/// lets the compiler vectorize while keeping results bit-deterministic.
#[inline]
pub(crate) fn dot_lanes<E: Element>(a: &[E], b: &[E]) -> E {
    let mut lanes = [E::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let off = i * 4;
        lanes[0] = lanes[0] + a[off] * b[off];
        lanes[1] = lanes[1] + a[off + 1] * b[off + 1];
        lanes[2] = lanes[2] + a[off + 2] * b[off + 2];
        lanes[3] = lanes[3] + a[off + 3] * b[off + 3];
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for i in chunks * 4..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

/// dA = dOut @ B^T, per batch. dA is [batch, m, k].
pub fn matmul_grad_a<E: Element>(
    dout: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut da = vec![E::zero(); batch * m * k];
    da.par_chunks_mut(k)
        .enumerate()
        .for_each(|(row_idx, da_row)| {
            let bi = row_idx / m;
            let i = row_idx % m;
            let dout_row = &dout[bi * m * n + i * n..bi * m * n + (i + 1) * n];
            let b_mat = &b[bi * k * n..(bi + 1) * k * n];
            for (p, dv) in da_row.iter_mut().enumerate() {
                *dv = dot_lanes(dout_row, &b_mat[p * n..(p + 1) * n]);
            }
        });
    da
}

/// dB = A^T @ dOut, per batch. dB is [batch, k, n].
pub fn matmul_grad_b<E: Element>(
    dout: &[E],
    a: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut db = vec![E::zero(); batch * k * n];
    db.par_chunks_mut(k * n).enumerate().for_each(|(bi, db_mat)| {
        let a_mat = &a[bi * m * k..(bi + 1) * m * k];
        let dout_mat = &dout[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let dout_row = &dout_mat[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_mat[i * k + p];
                let db_row = &mut db_mat[p * n..(p + 1) * n];
                for (o, &d) in db_row.iter_mut().zip(dout_row) {
                    *o = *o + av * d;
                }
            }
        }
    });
    db
}

/// Valid output range along one axis so that `o*stride + kk - pad` stays
/// inside `[0, in_extent)`.
fn out_range(out_extent: usize, in_extent: usize, stride: usize, pad: usize, kk: usize) -> (usize, usize) {
    // o*stride >= pad - kk  and  o*stride <= in_extent - 1 - kk + pad
    let lo = if pad > kk {
        (pad - kk).div_ceil(stride)
    } else {
        0
    };
    let hi_num = in_extent + pad;
    let hi = if hi_num > kk {
        ((hi_num - 1 - kk) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(out_extent), hi)
}

pub struct Conv3dDims {
    pub ci: usize,
    pub co: usize,
    pub in_d: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_d: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv3dDims {
    pub fn out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
        (inp + 2 * pad - k) / stride + 1
    }
}

/// Direct 3D convolution: x [Ci, D, H, W], w [Co, Ci, k, k, k] -> [Co, D', H', W'].
pub fn conv3d<E: Element>(x: &[E], w: &[E], bias: Option<&[E]>, d: &Conv3dDims) -> Vec<E> {
    let out_vol = d.out_d * d.out_h * d.out_w;
    let in_vol = d.in_d * d.in_h * d.in_w;
    let kvol = d.k * d.k * d.k;
    let mut out = vec![E::zero(); d.co * out_vol];
    out.par_chunks_mut(out_vol).enumerate().for_each(|(co, out_c)| {
        if let Some(b) = bias {
            let bv = b[co];
            for o in out_c.iter_mut() {
                *o = bv;
            }
        }
        for ci in 0..d.ci {
            let x_c = &x[ci * in_vol..(ci + 1) * in_vol];
            let w_base = (co * d.ci + ci) * kvol;
            for kz in 0..d.k {
                let (z0, z1) = out_range(d.out_d, d.in_d, d.stride, d.pad, kz);
                for ky in 0..d.k {
                    let (y0, y1) = out_range(d.out_h, d.in_h, d.stride, d.pad, ky);
                    for kx in 0..d.k {
                        let (x0, x1) = out_range(d.out_w, d.in_w, d.stride, d.pad, kx);
                        let wv = w[w_base + (kz * d.k + ky) * d.k + kx];
                        for oz in z0..z1 {
                            let iz = oz * d.stride + kz - d.pad;
                            for oy in y0..y1 {
                                let iy = oy * d.stride + ky - d.pad;
                                let out_row = &mut out_c
                                    [(oz * d.out_h + oy) * d.out_w + x0..(oz * d.out_h + oy) * d.out_w + x1];
                                let in_base = (iz * d.in_h + iy) * d.in_w + x0 * d.stride + kx - d.pad;
                                if d.stride == 1 {
                                    let in_row = &x_c[in_base..in_base + (x1 - x0)];
                                    for (o, &iv) in out_row.iter_mut().zip(in_row) {
                                        *o = *o + wv * iv;
                                    }
                                } else {
                                    for (j, o) in out_row.iter_mut().enumerate() {
                                        *o = *o + wv * x_c[in_base + j * d.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient w.r.t. the convolution input. Parallel over input channels.
pub fn conv3d_grad_x<E: Element>(dout: &[E], w: &[E], d: &Conv3dDims) -> Vec<E> {
    let out_vol = d.out_d * d.out_h * d.out_w;
    let in_vol = d.in_d * d.in_h * d.in_w;
    let kvol = d.k * d.k * d.k;
    let mut dx = vec![E::zero(); d.ci * in_vol];
    dx.par_chunks_mut(in_vol).enumerate().for_each(|(ci, dx_c)| {
        for co in 0..d.co {
            let dout_c = &dout[co * out_vol..(co + 1) * out_vol];
            let w_base = (co * d.ci + ci) * kvol;
            for kz in 0..d.k {
                let (z0, z1) = out_range(d.out_d, d.in_d, d.stride, d.pad, kz);
                for ky in 0..d.k {
                    let (y0, y1) = out_range(d.out_h, d.in_h, d.stride, d.pad, ky);
                    for kx in 0..d.k {
                        let (x0, x1) = out_range(d.out_w, d.in_w, d.stride, d.pad, kx);
                        let wv = w[w_base + (kz * d.k + ky) * d.k + kx];
                        for oz in z0..z1 {
                            let iz = oz * d.stride + kz - d.pad;
                            for oy in y0..y1 {
                                let iy = oy * d.stride + ky - d.pad;
                                let dout_row =
                                    &dout_c[(oz * d.out_h + oy) * d.out_w + x0..(oz * d.out_h + oy) * d.out_w + x1];
                                let in_base = (iz * d.in_h + iy) * d.in_w + x0 * d.stride + kx - d.pad;
                                if d.stride == 1 {
                                    let dx_row = &mut dx_c[in_base..in_base + (x1 - x0)];
                                    for (o, &g) in dx_row.iter_mut().zip(dout_row) {
                                        *o = *o + wv * g;
                                    }
                                } else {
                                    for (j, &g) in dout_row.iter().enumerate() {
                                        let t = &mut dx_c[in_base + j * d.stride];
                                        *t = *t + wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient w.r.t. the convolution weights (and bias). Parallel over output
/// channels; each task owns one dW slice.
pub fn conv3d_grad_w<E: Element>(dout: &[E], x: &[E], d: &Conv3dDims) -> (Vec<E>, Vec<E>) {
    let out_vol = d.out_d * d.out_h * d.out_w;
    let in_vol = d.in_d * d.in_h * d.in_w;
    let kvol = d.k * d.k * d.k;
    let mut dw = vec![E::zero(); d.co * d.ci * kvol];
    let mut dbias = vec![E::zero(); d.co];
    dw.par_chunks_mut(d.ci * kvol)
        .zip(dbias.par_iter_mut())
        .enumerate()
        .for_each(|(co, (dw_c, db))| {
            let dout_c = &dout[co * out_vol..(co + 1) * out_vol];
            *db = dout_c.iter().fold(E::zero(), |a, &v| a + v);
            for ci in 0..d.ci {
                let x_c = &x[ci * in_vol..(ci + 1) * in_vol];
                for kz in 0..d.k {
                    let (z0, z1) = out_range(d.out_d, d.in_d, d.stride, d.pad, kz);
                    for ky in 0..d.k {
                        let (y0, y1) = out_range(d.out_h, d.in_h, d.stride, d.pad, ky);
                        for kx in 0..d.k {
                            let (x0, x1) = out_range(d.out_w, d.in_w, d.stride, d.pad, kx);
                            let mut acc = E::zero();
                            for oz in z0..z1 {
                                let iz = oz * d.stride + kz - d.pad;
                                for oy in y0..y1 {
                                    let iy = oy * d.stride + ky - d.pad;
                                    let dout_row = &dout_c
                                        [(oz * d.out_h + oy) * d.out_w + x0..(oz * d.out_h + oy) * d.out_w + x1];
                                    let in_base = (iz * d.in_h + iy) * d.in_w + x0 * d.stride + kx - d.pad;
                                    if d.stride == 1 {
                                        let in_row = &x_c[in_base..in_base + (x1 - x0)];
                                        acc = acc + dot_lanes(dout_row, in_row);
                                    } else {
                                        for (j, &g) in dout_row.iter().enumerate() {
                                            acc = acc + g * x_c[in_base + j * d.stride];
                                        }
                                    }
                                }
                            }
                            dw_c[ci * kvol + (kz * d.k + ky) * d.k + kx] = acc;
                        }
                    }
                }
            }
        });
    (dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        // [1,2;3,4] @ [5,6;7,8] = [19,22;43,50]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        let c = matmul(&a, &b, 1, 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv3d_identity_kernel() {
        // 1x1x1 kernel with identity channel mixing leaves the grid intact.
        let d = Conv3dDims {
            ci: 2,
            co: 2,
            in_d: 3,
            in_h: 3,
            in_w: 3,
            k: 1,
            stride: 1,
            pad: 0,
            out_d: 3,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f64> = (0..2 * 27).map(|i| i as f64 * 0.1).collect();
        let mut w = vec![0.0f64; 2 * 2];
        w[0] = 1.0; // co=0, ci=0
        w[3] = 1.0; // co=1, ci=1
        let y = conv3d(&x, &w, None, &d);
        assert_eq!(x, y);
    }

    #[test]
    fn conv3d_output_extent() {
        assert_eq!(Conv3dDims::out_extent(5, 2, 1, 0), 4);
        assert_eq!(Conv3dDims::out_extent(8, 2, 2, 0), 4);
        assert_eq!(Conv3dDims::out_extent(5, 3, 1, 1), 5);
    }
}
