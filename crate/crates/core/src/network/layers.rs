//! Layer primitives with hand-derived reverse-mode gradients.
//!
//! Activations are `[channel, freq, frame]` tensors. All convolutions act
//! along the frame axis only; the frequency axis rides along as an
//! independent spatial dimension. Each layer exposes a forward pass that
//! returns a context with exactly the values its backward pass needs.

use ndarray::{s, Array2, Array3};

use super::kernels;
use super::layout::{ParamLayout, TensorId};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Branch-free exp over a slice, accurate to ~1e-11 relative.
///
/// exp(x) = 2^k * exp(r) with k = round(x / ln 2) and |r| <= ln(2)/2; the
/// residual uses a degree-9 Taylor polynomial and 2^k is assembled directly
/// in the exponent bits. Written as a plain data-parallel loop so the
/// auto-vectorizer can widen it; libm's exp is a scalar call and costs
/// several times more on the softmax matrices.
/// Branch-free exp on a fixed 8-lane block; the shape maps straight onto
/// one AVX-512 vector (or two AVX2 ones).
#[inline(always)]
fn exp8(block: &mut [f64; 8]) {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2: f64 = std::f64::consts::LN_2;
    // 2^52 + 2^51: adding it rounds a small f64 to the nearest integer held
    // in the low mantissa bits, sidestepping the saturating float-to-int
    // cast that the vectorizer refuses to widen.
    const MAGIC: f64 = 6755399441055744.0;
    let magic_bits = MAGIC.to_bits() as i64;
    for v in block.iter_mut() {
        // Inputs are max-subtracted (<= 0); the clamp keeps 2^k in normal
        // range, flushing would-be subnormals to ~3e-308.
        let x = (*v).max(-708.0);
        let t = x.mul_add(LOG2E, MAGIC);
        let k = t - MAGIC;
        let r = k.mul_add(-LN2, x);
        let p = r
            .mul_add(1.0 / 362880.0, 1.0 / 40320.0)
            .mul_add(r, 1.0 / 5040.0)
            .mul_add(r, 1.0 / 720.0)
            .mul_add(r, 1.0 / 120.0)
            .mul_add(r, 1.0 / 24.0)
            .mul_add(r, 1.0 / 6.0)
            .mul_add(r, 0.5)
            .mul_add(r, 1.0)
            .mul_add(r, 1.0);
        let k_int = (t.to_bits() as i64).wrapping_sub(magic_bits);
        let bits = ((k_int + 1023) << 52) as u64;
        *v = p * f64::from_bits(bits);
    }
}

/// [`exp8`] over an arbitrary slice.
pub(crate) fn exp_slice(xs: &mut [f64]) {
    let mut chunks = xs.chunks_exact_mut(8);
    for chunk in &mut chunks {
        let mut block = [0.0f64; 8];
        block.copy_from_slice(chunk);
        exp8(&mut block);
        chunk.copy_from_slice(&block);
    }
    for v in chunks.into_remainder() {
        let mut one = [*v; 8];
        exp8(&mut one);
        *v = one[0];
    }
}

/// In-place numerically-stable softmax of `scale * row`.
///
/// Three passes: row max, a fused scale/exp/accumulate pass in 8-wide
/// blocks (lane-ordered partial sums keep the result deterministic), and
/// the final normalization. The softmax matrices are the biggest tensors
/// in the network, so the pass count is what this function optimizes.
pub(crate) fn softmax_row(row: &mut [f64], scale: f64) {
    // Lane-wise max so the reduction vectorizes.
    let mut max_lanes = [f64::NEG_INFINITY; 8];
    let chunks = row.chunks_exact(8);
    let rem = chunks.remainder();
    for chunk in chunks {
        for (m, &v) in max_lanes.iter_mut().zip(chunk.iter()) {
            *m = m.max(v);
        }
    }
    let mut max = f64::NEG_INFINITY;
    for &m in &max_lanes {
        max = max.max(m);
    }
    for &v in rem {
        max = max.max(v);
    }
    max *= scale;

    let mut lanes = [0.0f64; 8];
    let mut chunks = row.chunks_exact_mut(8);
    for chunk in &mut chunks {
        let mut block = [0.0f64; 8];
        block.copy_from_slice(chunk);
        for b in block.iter_mut() {
            *b = *b * scale - max;
        }
        exp8(&mut block);
        for (lane, &b) in lanes.iter_mut().zip(block.iter()) {
            *lane += b;
        }
        chunk.copy_from_slice(&block);
    }
    let mut sum: f64 = lanes.iter().sum();
    for val in chunks.into_remainder() {
        *val = *val * scale - max;
        let mut one = [*val; 8];
        exp8(&mut one);
        *val = one[0];
        sum += one[0];
    }

    let inv = 1.0 / sum;
    for val in row.iter_mut() {
        *val *= inv;
    }
}

/// x * sigmoid(x), applied elementwise.
pub fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// Backward of [`silu`] given the forward *input*.
pub fn silu_backward(x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

fn silu_scalar(v: f64) -> f64 {
    v * sigmoid(v)
}

fn silu_grad_scalar(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

// ---------------------------------------------------------------------------
// Convolution along frames (optionally strided), via im2col + GEMM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: TensorId,
    pub b: TensorId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCtx {
    /// im2col matrix [F*T_out, C_in*K].
    cols: Array2<f64>,
    t_in: usize,
}

impl Conv {
    pub fn same(w: TensorId, b: TensorId, c_in: usize, c_out: usize, k: usize) -> Conv {
        Conv {
            w,
            b,
            c_in,
            c_out,
            k,
            stride: 1,
            pad: (k - 1) / 2,
        }
    }

    pub fn halving(w: TensorId, b: TensorId, c_in: usize, c_out: usize, k: usize) -> Conv {
        Conv {
            w,
            b,
            c_in,
            c_out,
            k,
            stride: 2,
            pad: (k - 1) / 2,
        }
    }

    fn t_out(&self, t_in: usize) -> usize {
        (t_in + 2 * self.pad - self.k) / self.stride + 1
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (_, f_dim, t_in) = x.dim();
        let t_out = self.t_out(t_in);
        let mut cols = Array2::zeros((f_dim * t_out, self.c_in * self.k));
        for f in 0..f_dim {
            for t in 0..t_out {
                let row = f * t_out + t;
                for ci in 0..self.c_in {
                    for kk in 0..self.k {
                        let pos = t * self.stride + kk;
                        if pos >= self.pad && pos - self.pad < t_in {
                            cols[[row, ci * self.k + kk]] = x[[ci, f, pos - self.pad]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        x: &Array3<f64>,
    ) -> (Array3<f64>, ConvCtx) {
        let (_, f_dim, t_in) = x.dim();
        let t_out = self.t_out(t_in);
        let cols = self.im2col(x);
        let w = Array2::from_shape_vec(
            (self.c_out, self.c_in * self.k),
            layout.slice(self.w, params).to_vec(),
        )
        .expect("conv weight shape");
        let bias = layout.slice(self.b, params);
        // [F*T_out, C_in*K] x [C_in*K, C_out]
        let y = cols.dot(&w.t());
        let mut out = Array3::zeros((self.c_out, f_dim, t_out));
        for c in 0..self.c_out {
            for f in 0..f_dim {
                for t in 0..t_out {
                    out[[c, f, t]] = y[[f * t_out + t, c]] + bias[c];
                }
            }
        }
        (out, ConvCtx { cols, t_in })
    }

    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        ctx: &ConvCtx,
        dy: &Array3<f64>,
        grads: &mut [f64],
    ) -> Array3<f64> {
        let (_, f_dim, t_out) = dy.dim();
        // Repack dy as [F*T_out, C_out].
        let mut dy_mat = Array2::zeros((f_dim * t_out, self.c_out));
        for c in 0..self.c_out {
            for f in 0..f_dim {
                for t in 0..t_out {
                    dy_mat[[f * t_out + t, c]] = dy[[c, f, t]];
                }
            }
        }
        // dW = dYᵀ · cols, db = column sums of dY.
        let dw = dy_mat.t().dot(&ctx.cols);
        {
            let gw = layout.slice_mut(self.w, grads);
            for (g, d) in gw.iter_mut().zip(dw.iter()) {
                *g += d;
            }
            let gb = layout.slice_mut(self.b, grads);
            for c in 0..self.c_out {
                gb[c] += dy_mat.column(c).sum();
            }
        }
        // dCols = dY · W, then scatter back (col2im).
        let w = Array2::from_shape_vec(
            (self.c_out, self.c_in * self.k),
            layout.slice(self.w, params).to_vec(),
        )
        .expect("conv weight shape");
        let dcols = dy_mat.dot(&w);
        let mut dx = Array3::zeros((self.c_in, f_dim, ctx.t_in));
        for f in 0..f_dim {
            for t in 0..t_out {
                let row = f * t_out + t;
                for ci in 0..self.c_in {
                    for kk in 0..self.k {
                        let pos = t * self.stride + kk;
                        if pos >= self.pad && pos - self.pad < ctx.t_in {
                            dx[[ci, f, pos - self.pad]] += dcols[[row, ci * self.k + kk]];
                        }
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Frame-doubling transposed convolution (stride 2), as conv over a
// zero-stuffed signal
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvTranspose {
    inner: Conv,
}

pub struct ConvTransposeCtx {
    conv: ConvCtx,
    t_in: usize,
}

impl ConvTranspose {
    /// Kernel 4, stride 2, effective padding 1: maps T frames to exactly 2T.
    pub fn doubling(w: TensorId, b: TensorId, c_in: usize, c_out: usize) -> ConvTranspose {
        ConvTranspose {
            inner: Conv {
                w,
                b,
                c_in,
                c_out,
                k: 4,
                stride: 1,
                pad: 2,
            },
        }
    }

    fn stuff(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, f_dim, t_in) = x.dim();
        let mut stuffed = Array3::zeros((c, f_dim, 2 * t_in - 1));
        for ci in 0..c {
            for f in 0..f_dim {
                for t in 0..t_in {
                    stuffed[[ci, f, 2 * t]] = x[[ci, f, t]];
                }
            }
        }
        stuffed
    }

    pub fn forward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        x: &Array3<f64>,
    ) -> (Array3<f64>, ConvTransposeCtx) {
        let t_in = x.dim().2;
        let stuffed = self.stuff(x);
        let (out, conv) = self.inner.forward(layout, params, &stuffed);
        debug_assert_eq!(out.dim().2, 2 * t_in);
        (out, ConvTransposeCtx { conv, t_in })
    }

    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        ctx: &ConvTransposeCtx,
        dy: &Array3<f64>,
        grads: &mut [f64],
    ) -> Array3<f64> {
        let d_stuffed = self.inner.backward(layout, params, &ctx.conv, dy, grads);
        let (c, f_dim, _) = d_stuffed.dim();
        let mut dx = Array3::zeros((c, f_dim, ctx.t_in));
        for ci in 0..c {
            for f in 0..f_dim {
                for t in 0..ctx.t_in {
                    dx[[ci, f, t]] = d_stuffed[[ci, f, 2 * t]];
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: TensorId,
    pub beta: TensorId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCtx {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn forward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        x: &Array3<f64>,
    ) -> (Array3<f64>, GroupNormCtx) {
        let (c, f_dim, t_dim) = x.dim();
        debug_assert_eq!(c, self.channels);
        let gsize = self.channels / self.groups;
        let cells = (gsize * f_dim * t_dim) as f64;
        let gamma = layout.slice(self.gamma, params);
        let beta = layout.slice(self.beta, params);
        let mut xhat = Array3::zeros((c, f_dim, t_dim));
        let mut out = Array3::zeros((c, f_dim, t_dim));
        let mut inv_std = vec![0.0; self.groups];
        for g in 0..self.groups {
            let range = g * gsize..(g + 1) * gsize;
            let block = x.slice(s![range.clone(), .., ..]);
            let mean = block.sum() / cells;
            let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cells;
            let istd = 1.0 / (var + GN_EPS).sqrt();
            inv_std[g] = istd;
            for ci in range {
                for f in 0..f_dim {
                    for t in 0..t_dim {
                        let h = (x[[ci, f, t]] - mean) * istd;
                        xhat[[ci, f, t]] = h;
                        out[[ci, f, t]] = gamma[ci] * h + beta[ci];
                    }
                }
            }
        }
        (out, GroupNormCtx { xhat, inv_std })
    }

    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        ctx: &GroupNormCtx,
        dy: &Array3<f64>,
        grads: &mut [f64],
    ) -> Array3<f64> {
        let (c, f_dim, t_dim) = dy.dim();
        let gsize = self.channels / self.groups;
        let cells = (gsize * f_dim * t_dim) as f64;
        let gamma = layout.slice(self.gamma, params);
        {
            let ggamma = layout.slice_mut(self.gamma, grads);
            for ci in 0..c {
                let mut acc = 0.0;
                for f in 0..f_dim {
                    for t in 0..t_dim {
                        acc += dy[[ci, f, t]] * ctx.xhat[[ci, f, t]];
                    }
                }
                ggamma[ci] += acc;
            }
        }
        {
            let gbeta = layout.slice_mut(self.beta, grads);
            for ci in 0..c {
                let mut acc = 0.0;
                for f in 0..f_dim {
                    for t in 0..t_dim {
                        acc += dy[[ci, f, t]];
                    }
                }
                gbeta[ci] += acc;
            }
        }
        let mut dx = Array3::zeros((c, f_dim, t_dim));
        for g in 0..self.groups {
            let range = g * gsize..(g + 1) * gsize;
            // g_cell = gamma_c * dy; two group-wide means complete the formula.
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for ci in range.clone() {
                for f in 0..f_dim {
                    for t in 0..t_dim {
                        let gc = gamma[ci] * dy[[ci, f, t]];
                        mean_g += gc;
                        mean_gx += gc * ctx.xhat[[ci, f, t]];
                    }
                }
            }
            mean_g /= cells;
            mean_gx /= cells;
            let istd = ctx.inv_std[g];
            for ci in range {
                for f in 0..f_dim {
                    for t in 0..t_dim {
                        let gc = gamma[ci] * dy[[ci, f, t]];
                        dx[[ci, f, t]] =
                            istd * (gc - mean_g - ctx.xhat[[ci, f, t]] * mean_gx);
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over flattened (freq x frame) positions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Attention {
    pub norm: GroupNorm,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub heads: usize,
}

pub struct AttentionCtx {
    gn: GroupNormCtx,
    /// Normalized input flattened to [N, C].
    xn: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Unnormalized softmax weights per head, [N, N] each; the row sums live
    /// in `inv_sums` as reciprocals and normalization happens on the fly.
    pub(crate) attn: Vec<Array2<f64>>,
    pub(crate) inv_sums: Vec<Vec<f64>>,
    o: Array2<f64>,
}

impl Attention {
    fn proj(
        layout: &ParamLayout,
        params: &[f64],
        x: &Array2<f64>,
        w: TensorId,
        b: TensorId,
        c: usize,
    ) -> Array2<f64> {
        let wm = Array2::from_shape_vec((c, c), layout.slice(w, params).to_vec())
            .expect("projection weight");
        let bias = layout.slice(b, params);
        let mut y = x.dot(&wm);
        for mut row in y.rows_mut() {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        y
    }

    pub fn forward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        x: &Array3<f64>,
    ) -> (Array3<f64>, AttentionCtx) {
        let (c, f_dim, t_dim) = x.dim();
        let n = f_dim * t_dim;
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();

        let (normed, gn) = self.norm.forward(layout, params, x);
        // Flatten [C, F, T] -> [N, C]: a plain transpose of the row-major data.
        let flat = normed.as_slice().expect("contiguous activation");
        let mut xn = Array2::zeros((n, c));
        {
            let xs = xn.as_slice_mut().expect("contiguous xn");
            for ci in 0..c {
                let src = &flat[ci * n..(ci + 1) * n];
                for (pos, &v) in src.iter().enumerate() {
                    xs[pos * c + ci] = v;
                }
            }
        }
        let q = Self::proj(layout, params, &xn, self.wq, self.bq, c);
        let k = Self::proj(layout, params, &xn, self.wk, self.bk, c);
        let v = Self::proj(layout, params, &xn, self.wv, self.bv, c);

        let mut o = Array2::zeros((n, c));
        let mut attn = Vec::with_capacity(self.heads);
        let mut inv_sums = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            // Contiguous per-head copies keep the GEMMs on the fast path.
            let qh = q.slice(cols).to_owned();
            let kh = k.slice(cols).to_owned();
            let vh = v.slice(cols).to_owned();
            let mut scores = qh.dot(&kh.t());
            let maxes = kernels::row_maxes(&scores);
            let sums = kernels::exp_rows(&mut scores, &maxes, scale);
            let inv: Vec<f64> = sums.iter().map(|s| 1.0 / s).collect();
            let mut oh = scores.dot(&vh);
            kernels::scale_rows(&mut oh, &inv);
            o.slice_mut(cols).assign(&oh);
            attn.push(scores);
            inv_sums.push(inv);
        }
        let y = Self::proj(layout, params, &o, self.wo, self.bo, c);

        // Residual add, back to [C, F, T].
        let mut out = x.clone();
        {
            let os = out.as_slice_mut().expect("contiguous out");
            let ys = y.as_slice().expect("contiguous y");
            for ci in 0..c {
                let dst = &mut os[ci * n..(ci + 1) * n];
                for (pos, dv) in dst.iter_mut().enumerate() {
                    *dv += ys[pos * c + ci];
                }
            }
        }
        (
            out,
            AttentionCtx {
                gn,
                xn,
                q,
                k,
                v,
                attn,
                inv_sums,
                o,
            },
        )
    }

    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        ctx: &AttentionCtx,
        dy: &Array3<f64>,
        grads: &mut [f64],
    ) -> Array3<f64> {
        let (c, f_dim, t_dim) = dy.dim();
        let n = f_dim * t_dim;
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();

        let _ = (f_dim, t_dim);
        // dY flattened to [N, C].
        let mut dy_mat = Array2::zeros((n, c));
        {
            let src = dy.as_slice().expect("contiguous dy");
            let dst = dy_mat.as_slice_mut().expect("contiguous dy_mat");
            for ci in 0..c {
                let col = &src[ci * n..(ci + 1) * n];
                for (pos, &v) in col.iter().enumerate() {
                    dst[pos * c + ci] = v;
                }
            }
        }
        // Output projection.
        let wo = Array2::from_shape_vec((c, c), layout.slice(self.wo, params).to_vec())
            .expect("wo shape");
        {
            let gwo = layout.slice_mut(self.wo, grads);
            let dwo = ctx.o.t().dot(&dy_mat);
            for (g, dv) in gwo.iter_mut().zip(dwo.iter()) {
                *g += dv;
            }
            let gbo = layout.slice_mut(self.bo, grads);
            for ci in 0..c {
                gbo[ci] += dy_mat.column(ci).sum();
            }
        }
        let d_o = dy_mat.dot(&wo.t());

        let mut dq = Array2::zeros((n, c));
        let mut dk = Array2::zeros((n, c));
        let mut dv = Array2::zeros((n, c));
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let u = &ctx.attn[h];
            let inv = &ctx.inv_sums[h];
            let doh = d_o.slice(cols).to_owned();
            let vh = ctx.v.slice(cols).to_owned();
            let qh = ctx.q.slice(cols).to_owned();
            let kh = ctx.k.slice(cols).to_owned();

            // dV = Pᵀ dO with P = diag(inv) U, folded as a row scale on dO.
            let mut doh_scaled = doh.clone();
            kernels::scale_rows(&mut doh_scaled, inv);
            dv.slice_mut(cols).assign(&u.t().dot(&doh_scaled));
            // dP = dO Vᵀ, then softmax backward row by row with the
            // normalization applied on the fly:
            // dS = scale * P ∘ (dP - rowdot(dP, P)).
            let mut dp = doh.dot(&vh.t());
            {
                let dp_s = dp.as_slice_mut().expect("contiguous dp");
                let u_s = u.as_slice().expect("contiguous attn");
                for ((dp_row, u_row), &iv) in dp_s
                    .chunks_exact_mut(n)
                    .zip(u_s.chunks_exact(n))
                    .zip(inv.iter())
                {
                    let mut dot = 0.0;
                    for (x, y) in dp_row.iter().zip(u_row.iter()) {
                        dot += x * y;
                    }
                    dot *= iv;
                    let s_iv = scale * iv;
                    for (dval, &uval) in dp_row.iter_mut().zip(u_row.iter()) {
                        *dval = s_iv * uval * (*dval - dot);
                    }
                }
            }
            let ds = dp; // renamed: now holds dS
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }

        // Input projections: accumulate weight grads, propagate to xn.
        let mut dxn = Array2::zeros((n, c));
        for (w, b, dmat) in [
            (self.wq, self.bq, &dq),
            (self.wk, self.bk, &dk),
            (self.wv, self.bv, &dv),
        ] {
            let wm = Array2::from_shape_vec((c, c), layout.slice(w, params).to_vec())
                .expect("proj weight");
            {
                let gw = layout.slice_mut(w, grads);
                let dw = ctx.xn.t().dot(dmat);
                for (g, dv_) in gw.iter_mut().zip(dw.iter()) {
                    *g += dv_;
                }
                let gb = layout.slice_mut(b, grads);
                for ci in 0..c {
                    gb[ci] += dmat.column(ci).sum();
                }
            }
            dxn = dxn + dmat.dot(&wm.t());
        }

        // Back to [C, F, T] and through the norm; add the residual branch.
        let mut d_normed = Array3::zeros((c, f_dim, t_dim));
        {
            let dst = d_normed.as_slice_mut().expect("contiguous d_normed");
            let src = dxn.as_slice().expect("contiguous dxn");
            for ci in 0..c {
                let col = &mut dst[ci * n..(ci + 1) * n];
                for (pos, dv) in col.iter_mut().enumerate() {
                    *dv = src[pos * c + ci];
                }
            }
        }
        let mut dx = self
            .norm
            .backward(layout, params, &ctx.gn, &d_normed, grads);
        dx += dy;
        dx
    }
}

// ---------------------------------------------------------------------------
// ResNet block with step-embedding shift
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv,
    /// Projects the shared embedding to a per-channel shift.
    pub emb_w: TensorId,
    pub emb_b: TensorId,
    pub gn2: GroupNorm,
    pub conv2: Conv,
    /// 1x1 shortcut when input and output channels differ.
    pub shortcut: Option<Conv>,
    pub c_out: usize,
    pub emb_dim: usize,
}

pub struct ResBlockCtx {
    gn1: GroupNormCtx,
    pre1: Array3<f64>,
    conv1: ConvCtx,
    gn2: GroupNormCtx,
    pre2: Array3<f64>,
    conv2: ConvCtx,
    shortcut: Option<ConvCtx>,
}

impl ResBlock {
    pub fn forward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        x: &Array3<f64>,
        emb: &[f64],
    ) -> (Array3<f64>, ResBlockCtx) {
        let (h1, gn1) = self.gn1.forward(layout, params, x);
        let a1 = silu(&h1);
        let (mut c1, conv1) = self.conv1.forward(layout, params, &a1);

        // Learned per-channel shift from the step embedding.
        let ew = layout.slice(self.emb_w, params);
        let eb = layout.slice(self.emb_b, params);
        for c in 0..self.c_out {
            let mut shift = eb[c];
            for (j, &e) in emb.iter().enumerate() {
                shift += ew[c * self.emb_dim + j] * e;
            }
            c1.slice_mut(s![c, .., ..]).mapv_inplace(|v| v + shift);
        }

        let (h2, gn2) = self.gn2.forward(layout, params, &c1);
        let a2 = silu(&h2);
        let (c2, conv2) = self.conv2.forward(layout, params, &a2);

        let (short, short_ctx) = match &self.shortcut {
            Some(conv) => {
                let (s, ctx) = conv.forward(layout, params, x);
                (s, Some(ctx))
            }
            None => (x.clone(), None),
        };
        (
            c2 + &short,
            ResBlockCtx {
                gn1,
                pre1: h1,
                conv1,
                gn2,
                pre2: h2,
                conv2,
                shortcut: short_ctx,
            },
        )
    }

    /// Returns the input gradient; the embedding gradient is accumulated
    /// into `demb`.
    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        ctx: &ResBlockCtx,
        dy: &Array3<f64>,
        emb: &[f64],
        demb: &mut [f64],
        grads: &mut [f64],
    ) -> Array3<f64> {
        // Main branch.
        let da2 = self.conv2.backward(layout, params, &ctx.conv2, dy, grads);
        let dh2 = silu_backward(&ctx.pre2, &da2);
        let dc1 = self.gn2.backward(layout, params, &ctx.gn2, &dh2, grads);

        // Embedding shift: gradient is the per-channel sum of dc1.
        {
            let gw = layout.slice_mut(self.emb_w, grads);
            let mut dshift = vec![0.0; self.c_out];
            for c in 0..self.c_out {
                dshift[c] = dc1.slice(s![c, .., ..]).sum();
            }
            for c in 0..self.c_out {
                for (j, &e) in emb.iter().enumerate() {
                    gw[c * self.emb_dim + j] += dshift[c] * e;
                }
            }
            let gb = layout.slice_mut(self.emb_b, grads);
            for c in 0..self.c_out {
                gb[c] += dshift[c];
            }
            let ew = layout.slice(self.emb_w, params);
            for (j, dval) in demb.iter_mut().enumerate() {
                for (c, &ds) in dshift.iter().enumerate() {
                    *dval += ew[c * self.emb_dim + j] * ds;
                }
            }
        }

        let da1 = self.conv1.backward(layout, params, &ctx.conv1, &dc1, grads);
        let dh1 = silu_backward(&ctx.pre1, &da1);
        let mut dx = self.gn1.backward(layout, params, &ctx.gn1, &dh1, grads);

        // Shortcut branch.
        match (&self.shortcut, &ctx.shortcut) {
            (Some(conv), Some(sctx)) => {
                dx += &conv.backward(layout, params, sctx, dy, grads);
            }
            _ => {
                dx += dy;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Small dense layer for the embedding pathway
// ---------------------------------------------------------------------------

pub fn linear_forward(
    layout: &ParamLayout,
    params: &[f64],
    w: TensorId,
    b: TensorId,
    x: &[f64],
    out_dim: usize,
) -> Vec<f64> {
    let wm = layout.slice(w, params);
    let bias = layout.slice(b, params);
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            let mut acc = bias[o];
            for (j, &v) in x.iter().enumerate() {
                acc += wm[o * in_dim + j] * v;
            }
            acc
        })
        .collect()
}

pub fn linear_backward(
    layout: &ParamLayout,
    params: &[f64],
    w: TensorId,
    b: TensorId,
    x: &[f64],
    dy: &[f64],
    grads: &mut [f64],
) -> Vec<f64> {
    let in_dim = x.len();
    {
        let gw = layout.slice_mut(w, grads);
        for (o, &d) in dy.iter().enumerate() {
            for (j, &v) in x.iter().enumerate() {
                gw[o * in_dim + j] += d * v;
            }
        }
        let gb = layout.slice_mut(b, grads);
        for (o, &d) in dy.iter().enumerate() {
            gb[o] += d;
        }
    }
    let wm = layout.slice(w, params);
    (0..in_dim)
        .map(|j| dy.iter().enumerate().map(|(o, &d)| wm[o * in_dim + j] * d).sum())
        .collect()
}

/// SiLU over a plain vector, returning (output, input copy for backward).
pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu_scalar(v)).collect()
}

pub fn silu_vec_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| d * silu_grad_scalar(v))
        .collect()
}
