//! Partial-likelihood type estimators and their variance estimates.
//!
//! * [`cox`]: full-cohort Cox partial likelihood.
//! * [`thomas`]: Thomas' partial likelihood on the sampled risk sets.
//! * [`proposed`]: the kernel-weighted estimator that pools controls from
//!   neighbouring failure times.
//!
//! Each score is a sum of "observed minus weighted mean" terms, and minus its
//! Jacobian is a sum of weighted covariance matrices, so every score is
//! monotone and [`crate::solver`] finds its unique root.

pub mod cox;
pub mod proposed;
pub mod thomas;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{add_outer, matrix_from_row_major, symmetrize};
use crate::solver::NewtonOutcome;

pub use cox::{cox_fit, cox_score_info, CoxRiskSets, RiskSetEvent};
pub use proposed::{
    compute_s, compute_weights, estimate_b, proposed_fit, proposed_score_deriv, ProposedFit,
    ProposedOptions, SMoments, WeightReference, WeightTable,
};
pub use thomas::{thomas_fit, thomas_score_info};

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta_hat: Vec<f64>,
    /// `-U'(beta_hat) / n`, the normalized information.
    pub sigma_hat: DMatrix<f64>,
    /// `(-U'(beta_hat))^{-1}`, the estimated variance of `beta_hat`.
    pub vcov: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_score_norm: f64,
}

impl FitResult {
    pub(crate) fn from_outcome(outcome: NewtonOutcome, n: usize) -> Result<Self> {
        let info = symmetrize(&(-&outcome.jacobian));
        let vcov = info
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Conditioning("information at the root is not positive definite".into()))?;
        Ok(FitResult {
            final_score_norm: outcome.score_norm(),
            beta_hat: outcome.root,
            sigma_hat: info / n as f64,
            vcov,
            iterations: outcome.iterations,
            converged: outcome.converged,
        })
    }

    pub fn dim(&self) -> usize {
        self.beta_hat.len()
    }

    /// Standard errors, `sqrt(diag(vcov))`.
    pub fn std_errors(&self) -> Vec<f64> {
        self.vcov.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

/// Weighted mean and covariance of a set of covariate rows.
pub(crate) struct Moments {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
}

/// Moments of `rows` under weights `w`. When every row is identical the mean
/// is that row and the covariance exactly zero.
pub(crate) fn weighted_moments<'a, I>(d: usize, rows: I) -> Moments
where
    I: Iterator<Item = (&'a [f64], f64)> + Clone,
{
    let mut total = 0.0;
    let mut sum = vec![0.0; d];
    let mut first: Option<&[f64]> = None;
    let mut all_same = true;
    for (z, w) in rows.clone() {
        total += w;
        for (s, v) in sum.iter_mut().zip(z) {
            *s += w * v;
        }
        match first {
            None => first = Some(z),
            Some(f) => all_same &= f == z,
        }
    }
    let mut cov = vec![0.0; d * d];
    if all_same {
        let mean = first.map_or_else(|| vec![0.0; d], <[f64]>::to_vec);
        return Moments { mean, cov };
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / total).collect();
    let mut centered = vec![0.0; d];
    for (z, w) in rows {
        for ((c, v), m) in centered.iter_mut().zip(z).zip(&mean) {
            *c = v - m;
        }
        add_outer(&mut cov, &centered, w / total);
    }
    Moments { mean, cov }
}

pub(crate) fn row_major_to_matrix(d: usize, buf: &[f64]) -> DMatrix<f64> {
    matrix_from_row_major(d, buf)
}

pub(crate) fn check_beta(beta: &[f64], d: usize) -> Result<()> {
    if beta.len() != d {
        return Err(Error::Dimension {
            expected: d,
            found: beta.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_have_zero_covariance() {
        let rows: Vec<Vec<f64>> = vec![vec![0.3, -1.1]; 5];
        let m = weighted_moments(2, rows.iter().map(|r| (r.as_slice(), 0.7)));
        assert_eq!(m.mean, vec![0.3, -1.1]);
        assert!(m.cov.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn two_point_moments() {
        let rows = [vec![0.0], vec![1.0]];
        let m = weighted_moments(1, rows.iter().map(|r| (r.as_slice(), 1.0)));
        assert!((m.mean[0] - 0.5).abs() < 1e-15);
        assert!((m.cov[0] - 0.25).abs() < 1e-15);
    }
}
