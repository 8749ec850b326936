//! Standalone numeric kernels. The graph ops call into these so that the
//! eager and differentiable paths share one implementation.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Default floor for [`l2_normalize`].
pub const L2_EPS: f64 = 1e-6;
/// Variance epsilon for group and layer normalization.
pub const NORM_EPS: f64 = 1e-5;

/// `ln Σ exp(v_i)` with max subtraction, accumulated in `f64`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("logsumexp of an empty vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logsumexp input must be finite"));
    }
    Ok(lse_slice(values))
}

pub(crate) fn lse_slice<R: Real>(values: &[R]) -> f64 {
    let max = values
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v.to_f64() - max).exp()).sum();
    max + sum.ln()
}

/// `v / max(‖v‖₂, eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(eps);
    v.iter().map(|x| x / denom).collect()
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = lse_slice(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Shape bookkeeping for group normalization over a `[B, ..., C]` tensor.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GroupLayout {
    pub batch: usize,
    pub spatial: usize,
    pub channels: usize,
    pub groups: usize,
}

impl GroupLayout {
    pub fn new(shape: &[usize], groups: usize) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::invalid(format!(
                "group norm needs rank >= 2, got {shape:?}"
            )));
        }
        let batch = shape[0];
        let channels = *shape.last().unwrap();
        let spatial = shape[1..shape.len() - 1].iter().product();
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(GroupLayout {
            batch,
            spatial,
            channels,
            groups,
        })
    }

    pub fn per_group(&self) -> usize {
        self.channels / self.groups
    }

    /// Number of elements each (batch, group) statistic is computed over.
    pub fn count(&self) -> usize {
        self.spatial * self.per_group()
    }
}

/// Per-(batch, group) mean and reciprocal standard deviation.
pub(crate) fn group_stats<R: Real>(x: &[R], lay: &GroupLayout, eps: f64) -> Vec<(f64, f64)> {
    let cpg = lay.per_group();
    let mut stats = Vec::with_capacity(lay.batch * lay.groups);
    for b in 0..lay.batch {
        let base = b * lay.spatial * lay.channels;
        for g in 0..lay.groups {
            let mut sum = 0.0f64;
            for s in 0..lay.spatial {
                let off = base + s * lay.channels + g * cpg;
                for c in 0..cpg {
                    sum += x[off + c].to_f64();
                }
            }
            let mean = sum / lay.count() as f64;
            let mut var = 0.0f64;
            for s in 0..lay.spatial {
                let off = base + s * lay.channels + g * cpg;
                for c in 0..cpg {
                    let d = x[off + c].to_f64() - mean;
                    var += d * d;
                }
            }
            var /= lay.count() as f64;
            stats.push((mean, 1.0 / (var + eps).sqrt()));
        }
    }
    stats
}

pub(crate) fn group_norm_forward<R: Real>(
    x: &[R],
    lay: &GroupLayout,
    gamma: &[R],
    beta: &[R],
    stats: &[(f64, f64)],
) -> Vec<R> {
    let cpg = lay.per_group();
    let mut out = vec![R::ZERO; x.len()];
    for b in 0..lay.batch {
        let base = b * lay.spatial * lay.channels;
        for s in 0..lay.spatial {
            let off = base + s * lay.channels;
            for c in 0..lay.channels {
                let (mean, rstd) = stats[b * lay.groups + c / cpg];
                let xhat = (x[off + c].to_f64() - mean) * rstd;
                out[off + c] = R::from_f64(xhat * gamma[c].to_f64() + beta[c].to_f64());
            }
        }
    }
    out
}

/// Group normalization of a `[B, ..., C]` tensor with per-channel affine.
pub fn group_norm<R: Real>(
    x: &Tensor<R>,
    groups: usize,
    gamma: &[R],
    beta: &[R],
) -> Result<Tensor<R>> {
    let lay = GroupLayout::new(x.shape(), groups)?;
    if gamma.len() != lay.channels || beta.len() != lay.channels {
        return Err(Error::invalid("group norm affine length must equal channels"));
    }
    let stats = group_stats(x.data(), &lay, NORM_EPS);
    Tensor::new(
        x.shape().to_vec(),
        group_norm_forward(x.data(), &lay, gamma, beta, &stats),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(logsumexp(&[5.0]).unwrap(), 5.0);
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((logsumexp(&[1.0, 2.0, 3.0]).unwrap() - direct).abs() < 1e-12);
        assert!((direct - 3.407606).abs() < 1e-6);
        assert!(matches!(logsumexp(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let v = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0], 1e-6), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0], 1e-6), vec![1.0, 0.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0], 1e-6), vec![0.0, 0.0]);
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let x = Tensor::<f32>::full(&[1, 2, 2, 8], 3.5);
        let y = group_norm(&x, 2, &[1.0; 8], &[0.0; 8]).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 6]);
        assert!(group_norm(&x, 4, &[1.0; 6], &[0.0; 6]).is_err());
    }
}
