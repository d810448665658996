// Plain-slice kernels shared by the forward and backward passes.
// Layouts are row-major; every loop runs in a fixed order so results are
// reproducible bit for bit.

use super::Scalar;

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[k,n] += a[m,k]^T * dy[m,n]
pub(crate) fn matmul_at_b_acc<T: Scalar>(a: &[T], dy: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &g) in orow.iter_mut().zip(dyrow) {
                *o += av * g;
            }
        }
    }
}

/// out[m,k] += dy[m,n] * b[k,n]^T
pub(crate) fn matmul_a_bt_acc<T: Scalar>(dy: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&g, &bv) in dyrow.iter().zip(brow) {
                acc += g * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// Splits `shape` around two axes `lo < hi` into
/// (outer, shape[lo], mid, shape[hi], inner).
pub(crate) fn swap_dims(shape: &[usize], lo: usize, hi: usize) -> [usize; 5] {
    let outer = shape[..lo].iter().product();
    let mid = shape[lo + 1..hi].iter().product();
    let inner = shape[hi + 1..].iter().product();
    [outer, shape[lo], mid, shape[hi], inner]
}

/// Swaps the axes described by `dims` (see [`swap_dims`]).
pub(crate) fn swap_axes<T: Scalar>(x: &[T], dims: [usize; 5]) -> Vec<T> {
    let [outer, da, mid, db, inner] = dims;
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..da {
            for m in 0..mid {
                for j in 0..db {
                    let src = (((o * da + i) * mid + m) * db + j) * inner;
                    let dst = (((o * db + j) * mid + m) * da + i) * inner;
                    out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                }
            }
        }
    }
    out
}

/// Sum (or mean) over the middle axis of an (outer, n, inner) view,
/// accumulated in f64 in index order.
pub(crate) fn reduce<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize, mean: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(outer * inner);
    let mut acc = vec![0.0f64; inner];
    for o in 0..outer {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..n {
            let base = (o * n + i) * inner;
            for (a, v) in acc.iter_mut().zip(&x[base..base + inner]) {
                *a += v.f64();
            }
        }
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        out.extend(acc.iter().map(|&a| T::of(a * scale)));
    }
    out
}

/// Softmax over the middle axis of an (outer, n, inner) view with the row
/// maximum subtracted first. Internals run in f64.
pub(crate) fn softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0.0f64; n];
    for o in 0..outer {
        for r in 0..inner {
            let at = |i: usize| (o * n + i) * inner + r;
            let max = (0..n).map(|i| x[at(i)].f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = (x[at(i)].f64() - max).exp();
                sum += *b;
            }
            for (i, b) in buf.iter().enumerate() {
                out[at(i)] = T::of(b / sum);
            }
        }
    }
    out
}

/// dx = y * (dy - sum(dy * y)) along the softmax axis.
pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for r in 0..inner {
            let at = |i: usize| (o * n + i) * inner + r;
            let dot: f64 = (0..n).map(|i| dy[at(i)].f64() * y[at(i)].f64()).sum();
            for i in 0..n {
                let k = at(i);
                dx[k] += T::of(y[k].f64() * (dy[k].f64() - dot));
            }
        }
    }
}

/// Layer normalisation over rows of length `d` (population variance, eps
/// inside the square root). Returns (output, normalised input, 1/std per row).
pub(crate) fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks_exact(d) {
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd.push(T::of(inv));
        for (j, v) in row.iter().enumerate() {
            let h = (v.f64() - mean) * inv;
            xhat.push(T::of(h));
            out.push(T::of(h * gain[j].f64() + bias[j].f64()));
        }
    }
    (out, xhat, rstd)
}

/// Accumulates gradients for layer normalisation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    if let Some(dgain) = dgain {
        for (dyr, hr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
            for j in 0..d {
                dgain[j] += dyr[j] * hr[j];
            }
        }
    }
    if let Some(dbias) = dbias {
        for dyr in dy.chunks_exact(d) {
            for j in 0..d {
                dbias[j] += dyr[j];
            }
        }
    }
    if let Some(dx) = dx {
        let mut g = vec![0.0f64; d];
        for (r, (dyr, hr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
            let mut mean_g = 0.0;
            let mut mean_gh = 0.0;
            for j in 0..d {
                g[j] = dyr[j].f64() * gain[j].f64();
                mean_g += g[j];
                mean_gh += g[j] * hr[j].f64();
            }
            mean_g /= d as f64;
            mean_gh /= d as f64;
            let inv = rstd[r].f64();
            for j in 0..d {
                dx[r * d + j] += T::of(inv * (g[j] - mean_g - hr[j].f64() * mean_gh));
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh form.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable binary cross-entropy on a logit: max(z,0) - z*y + ln(1 + e^-|z|).
pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_matches_manual_transpose() {
        // 2x3 -> 3x2
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let y = swap_axes(&x, swap_dims(&[2, 3], 0, 1));
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn gelu_known_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn bce_saturates() {
        assert!(bce_with_logit(20.0, 1.0) < 1e-8);
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }
}
