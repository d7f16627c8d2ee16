//! Thomas' partial likelihood: the Cox likelihood with each risk set
//! replaced by the case and its own sampled controls.

use nalgebra::DMatrix;

use super::{check_beta, row_major_to_matrix, weighted_moments, FitResult};
use crate::error::Result;
use crate::linalg::dot;
use crate::model::{NccDataset, NccRecord};
use crate::solver::{newton_solve, SolverOptions};

fn record_rows(r: &NccRecord) -> impl Iterator<Item = &[f64]> + Clone {
    std::iter::once(r.z_case.as_slice()).chain(r.controls.iter().map(|c| c.z.as_slice()))
}

fn score_info(ncc: &NccDataset, beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let d = ncc.dim();
    let mut score = vec![0.0; d];
    let mut info = vec![0.0; d * d];
    for r in ncc.records() {
        let shift = record_rows(r).map(|z| dot(beta, z)).fold(f64::NEG_INFINITY, f64::max);
        let mom = weighted_moments(d, record_rows(r).map(|z| (z, (dot(beta, z) - shift).exp())));
        for ((s, z), m) in score.iter_mut().zip(&r.z_case).zip(&mom.mean) {
            *s += z - m;
        }
        for (a, c) in info.iter_mut().zip(&mom.cov) {
            *a += c;
        }
    }
    (score, row_major_to_matrix(d, &info))
}

/// Thomas score `U_P(beta)` and information `-U_P'(beta)`.
pub fn thomas_score_info(ncc: &NccDataset, beta: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_beta(beta, ncc.dim())?;
    Ok(score_info(ncc, beta))
}

/// Newton root of the Thomas score from zero; `sigma_hat` is normalized by
/// the cohort size.
pub fn thomas_fit(ncc: &NccDataset, options: Option<SolverOptions>) -> Result<FitResult> {
    let d = ncc.dim();
    let mut opts = options.unwrap_or_default();
    if opts.initial.len() != d {
        opts.initial = vec![0.0; d];
    }
    let outcome = newton_solve(
        |b| {
            let (s, info) = score_info(ncc, b);
            (s, -info)
        },
        &opts,
    )?;
    FitResult::from_outcome(outcome, ncc.n())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, NonConvergence};
    use crate::model::{Control, ShortfallPolicy};

    fn record(t: f64, case_id: u64, z_case: f64, controls: &[(u64, f64)]) -> NccRecord {
        NccRecord {
            t,
            case_id,
            z_case: vec![z_case],
            controls: controls.iter().map(|&(id, z)| Control { id, z: vec![z] }).collect(),
        }
    }

    #[test]
    fn single_pair_closed_form() {
        // one case z=1, one control z=0: U = 1 - e^b / (1 + e^b)
        let ds = NccDataset::new(vec![record(0.5, 0, 1.0, &[(1, 0.0)])], 10, 1, 1.0, ShortfallPolicy::Drop).unwrap();
        for b in [-1.0, 0.0, 0.7] {
            let (s, info) = thomas_score_info(&ds, &[b]).unwrap();
            let p = b.exp() / (1.0 + b.exp());
            assert!((s[0] - (1.0 - p)).abs() < 1e-15);
            assert!((info[(0, 0)] - p * (1.0 - p)).abs() < 1e-15);
        }
    }

    #[test]
    fn discordant_pairs_balance() {
        // z_case - z_control = +1 on one record and -1 on the other: root at 0
        let recs = vec![record(0.2, 0, 1.0, &[(5, 0.0)]), record(0.4, 1, 0.0, &[(6, 1.0)])];
        let ds = NccDataset::new(recs, 10, 1, 1.0, ShortfallPolicy::Drop).unwrap();
        let fit = thomas_fit(&ds, None).unwrap();
        assert!(fit.beta_hat[0].abs() < 1e-12);
        // information 2 * 1/4 at beta = 0, normalized by n = 10
        assert!((fit.sigma_hat[(0, 0)] - 0.05).abs() < 1e-15);
        assert!((fit.vcov[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equal_covariates_give_no_information() {
        let recs = vec![record(0.2, 0, 0.3, &[(5, 0.3), (6, 0.3)])];
        let ds = NccDataset::new(recs, 10, 2, 1.0, ShortfallPolicy::Drop).unwrap();
        let (s, _) = thomas_score_info(&ds, &[1.3]).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(matches!(
            thomas_fit(&ds, None),
            Err(Error::NonConvergence {
                reason: NonConvergence::NoInformation,
                ..
            })
        ));
    }

    #[test]
    fn wrong_beta_dimension() {
        let ds = NccDataset::new(vec![record(0.5, 0, 1.0, &[(1, 0.0)])], 10, 1, 1.0, ShortfallPolicy::Drop).unwrap();
        assert!(matches!(
            thomas_score_info(&ds, &[0.0, 0.0]),
            Err(Error::Dimension { expected: 1, found: 2 })
        ));
    }
}
