//! Numeric kernels shared by the tape and by callers that do not need gradients.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Exact (erf-based) GeLU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("gelu input"));
    }
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| gelu_scalar(v)).collect())
}

/// Normalizes `x` over its length and applies the affine `gamma`/`beta`.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Result<Vec<T>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: vec![x.len()],
            rhs: vec![gamma.len(), beta.len()],
        });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let mut out = vec![T::zero(); x.len()];
    normalize_row(x, gamma, beta, T::lit(eps), &mut out, None);
    Ok(out)
}

/// Writes the normalized row into `out`; optionally stores `xhat` and returns `1/sigma`.
pub(crate) fn normalize_row<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    xhat_out: Option<&mut [T]>,
) -> T {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    match xhat_out {
        Some(xhat) => {
            for i in 0..x.len() {
                xhat[i] = (x[i] - mean) * rstd;
                out[i] = xhat[i] * gamma[i] + beta[i];
            }
        }
        None => {
            for i in 0..x.len() {
                out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
            }
        }
    }
    rstd
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Mean negative log-softmax over the rows whose target is not `ignore_index`.
///
/// The returned gradient rows are `softmax(logits) - onehot(target)` (zero for
/// ignored rows), i.e. the gradient of the *summed* loss; divide by the number
/// of counted rows for the gradient of the mean.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[i64],
    ignore_index: i64,
) -> Result<(T, Tensor<T>, usize)> {
    let (rows, classes) = logits.dims2()?;
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut grad = vec![T::zero(); rows * classes];
    let mut total = T::zero();
    let mut counted = 0usize;
    for (r, &target) in targets.iter().enumerate() {
        if target == ignore_index {
            continue;
        }
        if target < 0 || target as usize >= classes {
            return Err(Error::IndexOutOfRange {
                what: "class target",
                index: target.max(0) as usize,
                len: classes,
            });
        }
        let row = logits.row(r);
        let g = &mut grad[r * classes..(r + 1) * classes];
        g.copy_from_slice(row);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total = total + log_z - row[target as usize];
        softmax_in_place(g);
        g[target as usize] = g[target as usize] - T::one();
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::invalid("every cross-entropy target is ignored"));
    }
    let loss = total / T::lit(counted as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, Tensor::new(vec![rows, classes], grad)?, counted))
}

/// Multi-head scaled dot-product attention over `[n, hidden]` projections.
///
/// `key_mask[j] == false` excludes key `j` (its logit is treated as −∞, so its
/// probability is exactly zero). Returns the `[n, hidden]` context and the
/// probabilities laid out as `[heads][n][n]`.
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    hidden: usize,
    heads: usize,
    key_mask: &[bool],
) -> Result<(Vec<T>, Vec<T>)> {
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "hidden size {hidden} not divisible by {heads} heads"
        )));
    }
    if key_mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: vec![n, hidden],
            rhs: vec![key_mask.len()],
        });
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(Error::invalid("attention mask excludes every key"));
    }
    let dh = hidden / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); heads * n * n];
    let mut out = vec![T::zero(); n * hidden];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let qi = &q[i * hidden + off..i * hidden + off + dh];
            let mut max = T::neg_infinity();
            for j in 0..n {
                if key_mask[j] {
                    let kj = &k[j * hidden + off..j * hidden + off + dh];
                    let s = dot(qi, kj) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
            }
            let mut total = T::zero();
            for j in 0..n {
                if key_mask[j] {
                    p[j] = (p[j] - max).exp();
                    total = total + p[j];
                } else {
                    p[j] = T::zero();
                }
            }
            let o = &mut out[i * hidden + off..i * hidden + off + dh];
            for j in 0..n {
                if !key_mask[j] {
                    continue;
                }
                p[j] = p[j] / total;
                let vj = &v[j * hidden + off..j * hidden + off + dh];
                for d in 0..dh {
                    o[d] = o[d] + p[j] * vj[d];
                }
            }
        }
    }
    Ok((out, probs))
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `[m,k] x [k,n]`
pub(crate) fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                o[j] = o[j] + aip * brow[j];
            }
        }
    }
    out
}

/// `[m,k] x [n,k]^T`
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `[m,k]^T x [m,n]`
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                o[j] = o[j] + aip * brow[j];
            }
        }
    }
    out
}
