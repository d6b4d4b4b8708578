//! Cross-domain alignment: linear (mean-embedding) MMD over per-domain
//! penultimate features, and its combination with cross-entropy.

use crate::error::{Error, Result};
use crate::manifest::Label;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Penultimate features of one domain's sub-batch.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain: usize,
    pub features: Tensor<f64>,
    pub labels: Vec<Label>,
}

impl DomainBatch {
    fn rows(&self) -> Result<(usize, usize)> {
        match *self.features.dims() {
            [n, d] if n > 0 => Ok((n, d)),
            ref dims => Err(Error::InvalidArgument(format!(
                "domain {} batch must be non-empty [n, D], got {dims:?}",
                self.domain
            ))),
        }
    }

    fn mean(&self) -> Result<Vec<f64>> {
        let (n, d) = self.rows()?;
        let mut m = vec![0.0; d];
        for row in self.features.data().chunks(d) {
            m.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        Ok(m)
    }
}

/// `1/(K(K-1)) * sum over ordered pairs d != j of |mean_d - mean_j|^2`.
pub fn mmd_distance(batches: &[DomainBatch]) -> Result<f64> {
    let k = batches.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("alignment needs at least 2 domains, got {k}")));
    }
    let means = batches.iter().map(DomainBatch::mean).collect::<Result<Vec<_>>>()?;
    let d = means[0].len();
    if means.iter().any(|m| m.len() != d) {
        return Err(Error::shape("mmd_distance", "domains disagree on feature dim"));
    }
    let mut total = 0.0;
    for (a, ma) in means.iter().enumerate() {
        for (b, mb) in means.iter().enumerate() {
            if a != b {
                total += ma.iter().zip(mb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
        }
    }
    Ok(total / (k * (k - 1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cda: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(ce: f64, cda: f64, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    Ok(LossBreakdown { ce, cda, lambda, total: ce + lambda * cda })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be a finite value >= 0, got {lambda}")));
    }
    Ok(())
}

/// Graph-level `ce + lambda * mmd(features, groups)`. Returns
/// `(total, ce, cda)` handles.
pub fn total_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    features: Var,
    groups: &[Vec<usize>],
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    check_lambda(lambda)?;
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let cda = g.mmd(features, groups)?;
    let weighted = g.scale(cda, lambda)?;
    let total = g.add(ce, weighted)?;
    Ok((total, ce, cda))
}
