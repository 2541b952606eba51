//! Plain loop kernels shared by the autodiff graph and the inference path.
//!
//! Every kernel computes each output row from that row's inputs only, with a
//! fixed summation order. Processing positions one at a time or in a batch
//! therefore yields bit-identical rows, which the speculative engine relies on.

use super::tensor::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        // Four terms per sweep, still added left to right.
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for ((((ov, &x0), &x1), &x2), &x3) in o.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *ov = *ov + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
            kk += 4;
        }
        for (kk, &av) in arow.iter().enumerate().skip(kk) {
            let brow = &b[kk * n..(kk + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a, b, &mut out);
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_bt_acc(m, k, n, a, b, &mut out);
    out
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_bt_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out[i * n..(i + 1) * n].iter_mut().enumerate() {
            *o = *o + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight fixed partial sums.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail = ca.remainder().iter().zip(cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in tail {
        s = s + x * y;
    }
    s
}

/// `dB[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn gemm_at_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], g: &[T], out: &mut [T]) {
    let mut i = 0;
    while i + 4 <= m {
        let g0 = &g[i * n..(i + 1) * n];
        let g1 = &g[(i + 1) * n..(i + 2) * n];
        let g2 = &g[(i + 2) * n..(i + 3) * n];
        let g3 = &g[(i + 3) * n..(i + 4) * n];
        for kk in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + kk],
                a[(i + 1) * k + kk],
                a[(i + 2) * k + kk],
                a[(i + 3) * k + kk],
            );
            let o = &mut out[kk * n..(kk + 1) * n];
            for ((((ov, &x0), &x1), &x2), &x3) in o.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3) {
                *ov = *ov + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
        }
        i += 4;
    }
    for i in i..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let o = &mut out[kk * n..(kk + 1) * n];
            for (ov, &gv) in o.iter_mut().zip(grow) {
                *ov = *ov + av * gv;
            }
        }
    }
}

/// Numerically stabilized softmax of one row, in place.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-softmax of one row into a new vector.
pub fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    let lse = max + sum.ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Softmax over the last axis of a row-major matrix with `cols` columns.
pub fn softmax<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_row(row);
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

fn tanh<T: Scalar>(z: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = tanh(inner);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Row-wise layer norm. Returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let n = T::from_usize(cols).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for c in 0..cols {
            let h = (row[c] - mean) * rstd;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstds)
}

/// Which keys each query row may attend to.
///
/// Keys are laid out as consecutive segments `(start, len)`; query row `r`
/// sees the first `min(limits[r], len)` keys of every segment. A single
/// segment with `limits[r] = offset + r + 1` is ordinary causal masking;
/// several equal-length segments with `limits[r] = i` give the strictly-past
/// view over a flattened group of layer caches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub segments: Vec<(usize, usize)>,
    pub limits: Vec<usize>,
}

impl AttnMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            segments: vec![(0, keys)],
            limits: vec![keys; queries],
        }
    }

    pub fn causal(offset: usize, queries: usize, keys: usize) -> Self {
        Self {
            segments: vec![(0, keys)],
            limits: (0..queries).map(|r| offset + r + 1).collect(),
        }
    }

    /// `n_segments` concatenated blocks of `seg_len` keys each.
    pub fn grouped(n_segments: usize, seg_len: usize, limits: Vec<usize>) -> Self {
        Self {
            segments: (0..n_segments).map(|s| (s * seg_len, seg_len)).collect(),
            limits,
        }
    }

    pub fn key_span(&self) -> usize {
        self.segments.iter().map(|&(s, l)| s + l).max().unwrap_or(0)
    }

    /// Key indices visible to query row `r`, in summation order.
    pub fn keys_for(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        let lim = self.limits[r];
        self.segments.iter().flat_map(move |&(s, l)| s..s + lim.min(l))
    }

    pub fn visible(&self, r: usize) -> usize {
        let lim = self.limits[r];
        self.segments.iter().map(|&(_, l)| lim.min(l)).sum()
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[P×d]`, `k`/`v` are `[S×d]`, heads split `d` into contiguous
/// `d/heads` chunks. Returns the output `[P×d]` and the attention weights,
/// stored per row as `heads × visible(r)` values.
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    mask: &AttnMask,
) -> (Vec<T>, Vec<T>) {
    let p = q.len() / d;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); p * d];
    let mut probs = Vec::new();
    let mut keys = Vec::new();
    for r in 0..p {
        keys.clear();
        keys.extend(mask.keys_for(r));
        for h in 0..heads {
            let qh = &q[r * d + h * dh..r * d + (h + 1) * dh];
            let start = probs.len();
            for &key in &keys {
                let kh = &k[key * d + h * dh..key * d + (h + 1) * dh];
                let mut s = T::zero();
                for c in 0..dh {
                    s = s + qh[c] * kh[c];
                }
                probs.push(s * scale);
            }
            let row = &mut probs[start..];
            if !row.is_empty() {
                softmax_row(row);
            }
            let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
            for (j, &key) in keys.iter().enumerate() {
                let pj = probs[start + j];
                let vh = &v[key * d + h * dh..key * d + (h + 1) * dh];
                for c in 0..dh {
                    o[c] = o[c] + pj * vh[c];
                }
            }
        }
    }
    (out, probs)
}

/// Backward pass of [`attention`], accumulating into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    d: usize,
    heads: usize,
    mask: &AttnMask,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let p = q.len() / d;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut offset = 0;
    let mut keys = Vec::new();
    let mut ds = Vec::new();
    for r in 0..p {
        keys.clear();
        keys.extend(mask.keys_for(r));
        let n = keys.len();
        for h in 0..heads {
            let pr = &probs[offset..offset + n];
            offset += n;
            let go = &dout[r * d + h * dh..r * d + (h + 1) * dh];
            ds.clear();
            let mut dot = T::zero();
            for (j, &key) in keys.iter().enumerate() {
                let vh = &v[key * d + h * dh..key * d + (h + 1) * dh];
                let mut dp = T::zero();
                for c in 0..dh {
                    dp = dp + go[c] * vh[c];
                }
                ds.push(dp);
                dot = dot + pr[j] * dp;
                let dvh = &mut dv[key * d + h * dh..key * d + (h + 1) * dh];
                for c in 0..dh {
                    dvh[c] = dvh[c] + pr[j] * go[c];
                }
            }
            for j in 0..n {
                ds[j] = pr[j] * (ds[j] - dot) * scale;
            }
            for (j, &key) in keys.iter().enumerate() {
                let kh = &k[key * d + h * dh..key * d + (h + 1) * dh];
                let qh = &q[r * d + h * dh..r * d + (h + 1) * dh];
                let dqh = &mut dq[r * d + h * dh..r * d + (h + 1) * dh];
                for c in 0..dh {
                    dqh[c] = dqh[c] + ds[j] * kh[c];
                }
                let dkh = &mut dk[key * d + h * dh..key * d + (h + 1) * dh];
                for c in 0..dh {
                    dkh[c] = dkh[c] + ds[j] * qh[c];
                }
            }
        }
    }
}
