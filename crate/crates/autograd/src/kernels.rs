//! Forward/backward kernels for the fused ops.

use crate::scalar::{gemm, MatRef};
use crate::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// View of head `h` of item `b` in a `[B, N, D]` tensor.
    fn head<'a, T>(&self, data: &'a [T], n: usize, b: usize, h: usize) -> MatRef<'a, T> {
        MatRef { data, offset: b * n * self.dim + h * self.head_dim(), rows: n, cols: self.head_dim(), rs: self.dim, cs: 1 }
    }

    fn map_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.nq * self.nk
    }
}

/// Scaled dot-product attention weights `softmax(scale * q k^T)` per head, `[B, H, Nq, Nk]`.
/// Masked keys (`key_mask[b * nk + j] == true`) receive exactly zero weight.
pub(crate) fn attn_weights_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    dims: AttnDims,
    scale: T,
    key_mask: Option<&[bool]>,
) -> Vec<T> {
    let AttnDims { batch, nq, nk, heads, .. } = dims;
    let mut out = vec![T::zero(); batch * heads * nq * nk];
    for b in 0..batch {
        for h in 0..heads {
            let off = dims.map_offset(b, h);
            gemm(scale, dims.head(q, nq, b, h), dims.head(k, nk, b, h).t(), T::zero(), &mut out, off, nk, 1);
            let mask = key_mask.map(|m| &m[b * nk..(b + 1) * nk]);
            for row in out[off..off + nq * nk].chunks_exact_mut(nk) {
                softmax_row(row, mask);
            }
        }
    }
    out
}

/// Sum with independent lanes so the reduction can vectorize.
fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    acc.iter().copied().sum::<T>() + rest.iter().copied().sum::<T>()
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn lane_max<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    acc.iter().chain(rest).copied().fold(T::neg_infinity(), |m, x| if x > m { x } else { m })
}

fn softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let max = match mask {
        None => lane_max(row),
        Some(mask) => row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| !m)
            .fold(T::neg_infinity(), |m, (&x, _)| if x > m { x } else { m }),
    };
    for x in row.iter_mut() {
        *x -= max;
    }
    T::exp_in_place(row);
    if let Some(mask) = mask {
        for (x, &m) in row.iter_mut().zip(mask) {
            if m {
                *x = T::zero();
            }
        }
    }
    let inv = T::one() / lane_sum(row);
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Returns `(dq, dk)` given upstream `d_attn` and forward weights `attn`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_weights_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    attn: &[T],
    d_attn: &[T],
    dims: AttnDims,
    scale: T,
    need_q: bool,
    need_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let AttnDims { batch, nq, nk, heads, dim } = dims;
    // softmax backward: ds = a * (da - <da, a>)
    let mut ds = vec![T::zero(); attn.len()];
    for ((ds_row, a_row), da_row) in ds.chunks_exact_mut(nk).zip(attn.chunks_exact(nk)).zip(d_attn.chunks_exact(nk)) {
        let dot = lane_dot(a_row, da_row);
        for ((o, &a), &d) in ds_row.iter_mut().zip(a_row).zip(da_row) {
            *o = a * (d - dot);
        }
    }
    let mut dq = need_q.then(|| vec![T::zero(); batch * nq * dim]);
    let mut dk = need_k.then(|| vec![T::zero(); batch * nk * dim]);
    let hd = dims.head_dim();
    for b in 0..batch {
        for h in 0..heads {
            let ds_bh = MatRef::dense(&ds, dims.map_offset(b, h), nq, nk);
            if let Some(dq) = dq.as_mut() {
                gemm(scale, ds_bh, dims.head(k, nk, b, h), T::zero(), dq, b * nq * dim + h * hd, dim, 1);
            }
            if let Some(dk) = dk.as_mut() {
                gemm(scale, ds_bh.t(), dims.head(q, nq, b, h), T::zero(), dk, b * nk * dim + h * hd, dim, 1);
            }
        }
    }
    (dq, dk)
}

/// `out[b, :, head h] = attn[b, h] @ v[b, :, head h]`, output `[B, Nq, D]`.
pub(crate) fn attn_apply_forward<T: Scalar>(attn: &[T], v: &[T], dims: AttnDims) -> Vec<T> {
    let AttnDims { batch, nq, nk, heads, dim } = dims;
    let mut out = vec![T::zero(); batch * nq * dim];
    for b in 0..batch {
        for h in 0..heads {
            let a = MatRef::dense(attn, dims.map_offset(b, h), nq, nk);
            gemm(T::one(), a, dims.head(v, nk, b, h), T::zero(), &mut out, b * nq * dim + h * dims.head_dim(), dim, 1);
        }
    }
    out
}

/// Returns `(d_attn, dv)`.
pub(crate) fn attn_apply_backward<T: Scalar>(
    attn: &[T],
    v: &[T],
    d_out: &[T],
    dims: AttnDims,
    need_attn: bool,
    need_v: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let AttnDims { batch, nq, nk, heads, dim } = dims;
    let hd = dims.head_dim();
    let mut da = need_attn.then(|| vec![T::zero(); attn.len()]);
    let mut dv = need_v.then(|| vec![T::zero(); batch * nk * dim]);
    for b in 0..batch {
        for h in 0..heads {
            let d_out_bh = dims.head(d_out, nq, b, h);
            if let Some(da) = da.as_mut() {
                gemm(T::one(), d_out_bh, dims.head(v, nk, b, h).t(), T::zero(), da, dims.map_offset(b, h), nk, 1);
            }
            if let Some(dv) = dv.as_mut() {
                let a = MatRef::dense(attn, dims.map_offset(b, h), nq, nk);
                gemm(T::one(), a.t(), d_out_bh, T::zero(), dv, b * nk * dim + h * hd, dim, 1);
            }
        }
    }
    (da, dv)
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm over the trailing dimension `n`. Returns `(y, mean, rstd)`.
pub(crate) fn layer_norm_forward<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], n: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let nf = T::from_real(n as f64);
    let eps = T::from_real(LAYER_NORM_EPS);
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..n {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    let nf = T::from_real(n as f64);
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for (r, ((xr, dyr), dxr)) in x.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)).enumerate() {
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..n {
            xhat[i] = (xr[i] - mean[r]) * rstd[r];
            dxhat[i] = dyr[i] * gamma[i];
            dgamma[i] += dyr[i] * xhat[i];
            dbeta[i] += dyr[i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat[i];
        }
        for i in 0..n {
            dxr[i] = rstd[r] / nf * (nf * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Visit every `(col_row, out_pos, in_index)` triple whose input pixel is inside the image.
fn for_each_tap(d: &ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    let (ho, wo) = d.out_hw();
    let k = d.kernel;
    for c in 0..d.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oy in 0..ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.width as isize {
                            continue;
                        }
                        f(row, oy * wo + ox, (c * d.height + iy as usize) * d.width + ix as usize);
                    }
                }
            }
        }
    }
}

/// Convolution via im2col. Returns `(out [B, O, Ho, Wo], cols)`; `cols` is kept for backward.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], d: ConvDims) -> (Vec<T>, Vec<T>) {
    let (ho, wo) = d.out_hw();
    let npos = ho * wo;
    let kr = d.col_rows();
    let in_len = d.in_ch * d.height * d.width;
    let mut cols = vec![T::zero(); d.batch * kr * npos];
    let mut out = vec![T::zero(); d.batch * d.out_ch * npos];
    for b in 0..d.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let col = &mut cols[b * kr * npos..(b + 1) * kr * npos];
        for_each_tap(&d, |row, pos, idx| col[row * npos + pos] = xb[idx]);
        let ob = &mut out[b * d.out_ch * npos..(b + 1) * d.out_ch * npos];
        for (o, chunk) in ob.chunks_exact_mut(npos).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(
            T::one(),
            MatRef::dense(w, 0, d.out_ch, kr),
            MatRef::dense(&cols, b * kr * npos, kr, npos),
            T::one(),
            &mut out,
            b * d.out_ch * npos,
            npos,
            1,
        );
    }
    (out, cols)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    w: &[T],
    cols: &[T],
    d_out: &[T],
    d: ConvDims,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (ho, wo) = d.out_hw();
    let npos = ho * wo;
    let kr = d.col_rows();
    let in_len = d.in_ch * d.height * d.width;
    let mut dw = vec![T::zero(); d.out_ch * kr];
    let mut db = vec![T::zero(); d.out_ch];
    let mut dx = need_x.then(|| vec![T::zero(); d.batch * in_len]);
    let mut dcol = vec![T::zero(); kr * npos];
    for b in 0..d.batch {
        let dob = MatRef::dense(d_out, b * d.out_ch * npos, d.out_ch, npos);
        for (o, chunk) in d_out[b * d.out_ch * npos..(b + 1) * d.out_ch * npos].chunks_exact(npos).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        gemm(T::one(), dob, MatRef::dense(cols, b * kr * npos, kr, npos).t(), T::one(), &mut dw, 0, kr, 1);
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), MatRef::dense(w, 0, d.out_ch, kr).t(), dob, T::zero(), &mut dcol, 0, npos, 1);
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            for_each_tap(&d, |row, pos, idx| dxb[idx] += dcol[row * npos + pos]);
        }
    }
    (dx, dw, db)
}
