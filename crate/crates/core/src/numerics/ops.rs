//! Forward kernels shared by the graph and by plain-tensor callers.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Indices, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise softmax over the last axis with max subtraction.
///
/// `mask` is added to the logits before normalization; its shape must be a
/// suffix of the input shape and its entries are `0` or `-inf`.
pub fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() < 1 {
        return Err(Error::Invalid("softmax needs rank >= 1".into()));
    }
    let n = *x.shape().last().unwrap();
    if let Some(m) = mask {
        if m.rank() > x.rank() || x.shape()[x.rank() - m.rank()..] != *m.shape() {
            return Err(Error::shape("softmax mask", x.shape(), m.shape()));
        }
    }
    let mut out = x.to_vec();
    let mlen = mask.map_or(1, |m| m.len());
    for (r, row) in out.chunks_mut(n).enumerate() {
        if let Some(m) = mask {
            let off = (r * n) % mlen;
            row.iter_mut().zip(&m.data()[off..off + n]).for_each(|(v, m)| *v += m);
        }
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `n×n` additive mask with `-inf` strictly above the diagonal.
pub fn causal_mask(n: usize) -> Result<Tensor> {
    Tensor::from_fn(&[n, n], |idx| if idx % n > idx / n { f64::NEG_INFINITY } else { 0.0 })
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_parts(x, gain, bias, eps).map(|(y, _, _)| y)
}

/// Returns the output, the normalized input and per-row `1/sqrt(var+eps)`.
pub(crate) fn layer_norm_parts(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = *x.shape().last().ok_or_else(|| Error::Invalid("layer_norm needs rank >= 1".into()))?;
    if gain.shape() != [d] {
        return Err(Error::shape("layer_norm gain", x.shape(), gain.shape()));
    }
    if bias.shape() != [d] {
        return Err(Error::shape("layer_norm bias", x.shape(), bias.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.len() / d;
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (c, v) in row.iter().enumerate() {
            let h = (v - mean) * inv;
            normalized.push(h);
            out.push(h * gain.data()[c] + bias.data()[c]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        Tensor::from_parts(x.shape().to_vec(), normalized),
        inv_std,
    ))
}

/// Looks up rows of a `rows×d` table; the result has shape
/// `indices.shape + [d]`.
pub fn gather_rows(table: &Tensor, indices: &Indices) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: table.shape().to_vec(),
            reason: "gather table must be rank 2".into(),
        });
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices.data() {
        if i >= rows {
            return Err(Error::IndexOutOfRange { index: i, bound: rows });
        }
        out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    let mut shape = indices.shape().to_vec();
    shape.push(d);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) struct SmoothedCe {
    pub loss: f64,
    pub probs: Tensor,
    pub count: usize,
}

pub(crate) fn smoothed_ce_parts(logits: &Tensor, targets: &Indices, smoothing: f64, ignore: Option<usize>) -> Result<SmoothedCe> {
    let v = *logits.shape().last().ok_or_else(|| Error::Invalid("logits need a class axis".into()))?;
    if logits.shape()[..logits.rank() - 1] != *targets.shape() {
        return Err(Error::shape("label_smoothed_ce", logits.shape(), targets.shape()));
    }
    if v < 2 {
        return Err(Error::Invalid("label smoothing needs at least two classes".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Invalid(format!("label smoothing must be in [0, 1), got {smoothing}")));
    }
    let off = smoothing / (v - 1) as f64;
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    let mut count = 0;
    for (row, &t) in logits.data().chunks(v).zip(targets.data()) {
        if t >= v {
            return Err(Error::IndexOutOfRange { index: t, bound: v });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum_exp.ln();
        probs.extend(row.iter().map(|x| (x - lse).exp()));
        if Some(t) == ignore {
            continue;
        }
        count += 1;
        let mut row_loss = 0.0;
        for (c, x) in row.iter().enumerate() {
            let q = if c == t { 1.0 - smoothing } else { off };
            if q != 0.0 {
                row_loss -= q * (x - lse);
            }
        }
        total += row_loss;
    }
    if count == 0 {
        return Err(Error::Invalid("no non-ignored targets".into()));
    }
    Ok(SmoothedCe {
        loss: total / count as f64,
        probs: Tensor::from_parts(logits.shape().to_vec(), probs),
        count,
    })
}

/// Mean cross-entropy against targets smoothed to `1 - ε` on the true class
/// and `ε / (V - 1)` on every other class.
pub fn label_smoothed_ce(logits: &Tensor, targets: &Indices, smoothing: f64, ignore: Option<usize>) -> Result<f64> {
    smoothed_ce_parts(logits, targets, smoothing, ignore).map(|p| p.loss)
}

/// Entropy of the smoothed target distribution; a lower bound for
/// [`label_smoothed_ce`].
pub fn smoothed_target_entropy(classes: usize, smoothing: f64) -> f64 {
    let mut h = 0.0;
    if smoothing < 1.0 {
        h -= (1.0 - smoothing) * (1.0 - smoothing).ln();
    }
    if smoothing > 0.0 {
        let off = smoothing / (classes - 1) as f64;
        h -= smoothing * off.ln();
    }
    h
}

pub(crate) fn pair_project(x: &Tensor, w: &Tensor, edges: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 3 || x.shape()[2] != w.shape()[1] {
        return Err(Error::shape("pair_project", x.shape(), w.shape()));
    }
    let (b, n, dx) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h, dz) = (w.shape()[0], w.shape()[2]);
    let groups = match edges {
        Some(e) => {
            let g = e.shape()[0];
            if e.shape() != [g, n, n, dz] || h % g != 0 {
                return Err(Error::shape("pair_project edges", e.shape(), &[h, n, n, dz]));
            }
            g
        }
        None => 1,
    };
    let per_group = h / groups;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; b * h * n * n * dz];
    let mut pos = 0;
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..n {
                for j in 0..n {
                    let cell = &mut out[pos..pos + dz];
                    let xrow = &xd[(bi * n + j) * dx..(bi * n + j + 1) * dx];
                    for (p, &xv) in xrow.iter().enumerate() {
                        let wrow = &wd[(hi * dx + p) * dz..(hi * dx + p + 1) * dz];
                        cell.iter_mut().zip(wrow).for_each(|(c, w)| *c += xv * w);
                    }
                    if let Some(e) = edges {
                        let off = (((hi / per_group) * n + i) * n + j) * dz;
                        cell.iter_mut().zip(&e.data()[off..off + dz]).for_each(|(c, e)| *c += e);
                    }
                    pos += dz;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, h, n, n, dz], out))
}

pub(crate) fn pair_dot(q: &Tensor, keys: &Tensor) -> Result<Tensor> {
    if q.rank() != 4 || keys.rank() != 5 {
        return Err(Error::shape("pair_dot", q.shape(), keys.shape()));
    }
    let (b, h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    if keys.shape() != [b, h, n, n, d] {
        return Err(Error::shape("pair_dot", q.shape(), keys.shape()));
    }
    let rows = b * h * n;
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let qrow = &q.data()[r * d..(r + 1) * d];
        for j in 0..n {
            let k = &keys.data()[(r * n + j) * d..(r * n + j + 1) * d];
            out.push(qrow.iter().zip(k).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Tensor::from_parts(vec![b, h, n, n], out))
}

pub(crate) fn pair_weighted_sum(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
    if weights.rank() != 4 || values.rank() != 5 {
        return Err(Error::shape("pair_weighted_sum", weights.shape(), values.shape()));
    }
    let (b, h, n) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    let d = values.shape()[4];
    if weights.shape()[3] != n || values.shape()[..4] != [b, h, n, n] {
        return Err(Error::shape("pair_weighted_sum", weights.shape(), values.shape()));
    }
    let rows = b * h * n;
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..n {
            let a = weights.data()[r * n + j];
            let v = &values.data()[(r * n + j) * d..(r * n + j + 1) * d];
            orow.iter_mut().zip(v).for_each(|(o, v)| *o += a * v);
        }
    }
    Ok(Tensor::from_parts(vec![b, h, n, d], out))
}
