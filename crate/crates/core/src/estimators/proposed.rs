//! Kernel-weighted estimator pooling the controls of neighbouring failure
//! times.
//!
//! `b(t)`, the mean relative risk among subjects at risk, is estimated by
//! smoothing `sum_j exp(beta_ref'z_j)` over the controls sampled at failure
//! times near `t`. Each subject's weight is then
//! `w = m b / (exp(beta_ref'z) + m b)`, and the score compares each case with
//! the weighted mean of the smoothed control pool:
//!
//! ```text
//! U(beta) = sum_i w_case(i) [z_case(i) - S1(t_i, beta) / S0(t_i, beta)]
//! S_k(t, beta) = (1/n) sum_s psi(t - s) sum_{controls j at s} w_j z_j^k exp(beta'z_j)
//! ```
//!
//! Only controls enter `S_k`; the record at `s = t` is included.

use nalgebra::DMatrix;

use super::{check_beta, row_major_to_matrix, thomas_fit, weighted_moments, FitResult};
use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelConfig};
use crate::linalg::{add_outer, dot, is_positive_definite, symmetrize};
use crate::model::NccDataset;
use crate::solver::{newton_solve, SolverOptions};

/// Estimated `b` and the resulting weights at a reference `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub beta_ref: Vec<f64>,
    /// Failure time of each record.
    pub times: Vec<f64>,
    /// `b_hat` at each record's failure time.
    pub bhat: Vec<f64>,
    pub w_case: Vec<f64>,
    /// `w_control[r][k]` is the weight of the `k`-th control of record `r`.
    pub w_control: Vec<Vec<f64>>,
}

impl WeightTable {
    /// `b_hat` at a failure time of the dataset.
    pub fn bhat_at(&self, t: f64) -> Option<f64> {
        let k = self.times.partition_point(|&s| s < t);
        (k < self.times.len() && self.times[k] == t).then(|| self.bhat[k])
    }

    pub fn all_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_case.iter().chain(self.w_control.iter().flatten()).copied()
    }
}

/// `S_0`, `S_1` and `S_2` at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct SMoments {
    pub s0: f64,
    pub s1: Vec<f64>,
    pub s2: DMatrix<f64>,
}

impl SMoments {
    pub fn ratio(&self) -> Vec<f64> {
        self.s1.iter().map(|v| v / self.s0).collect()
    }
}

/// Which `beta` the weights are referenced to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightReference {
    /// Frozen at Thomas' estimate; the score is monotone with a unique root.
    #[default]
    Pilot,
    /// Recomputed at every iterate; roots need not be unique.
    SelfReferenced,
}

impl std::str::FromStr for WeightReference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pilot" => Ok(WeightReference::Pilot),
            "self" => Ok(WeightReference::SelfReferenced),
            other => Err(Error::invalid(format!("unknown weight reference '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposedOptions {
    pub weight_ref: WeightReference,
    /// `initial` is ignored; the iteration starts at the pilot estimate.
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposedFit {
    pub fit: FitResult,
    /// Thomas' estimate; `None` only when the self-referenced variant ran
    /// without a convergent pilot.
    pub pilot: Option<FitResult>,
    /// Weights at the final reference.
    pub weights: WeightTable,
    /// Self-referenced variant only: whether the full score, weights
    /// included, is locally decreasing at the root.
    pub locally_monotone: Option<bool>,
}

/// Records whose failure times fall in the kernel window around `t`, with
/// their kernel weights.
fn window(times: &[f64], kernel: &Kernel, t: f64) -> Vec<(usize, f64)> {
    let reach = kernel.reach() * (1.0 + 1e-9);
    let lo = times.partition_point(|&s| s < t - reach);
    let hi = times.partition_point(|&s| s <= t + reach);
    (lo..hi)
        .filter_map(|r| {
            let psi = kernel.weight(t - times[r]);
            (psi > 0.0).then_some((r, psi))
        })
        .collect()
}

struct Smoother {
    times: Vec<f64>,
    windows: Vec<Vec<(usize, f64)>>,
}

impl Smoother {
    fn new(ncc: &NccDataset, kernel: &Kernel) -> Self {
        let times: Vec<f64> = ncc.times().collect();
        let windows = times.iter().map(|&t| window(&times, kernel, t)).collect();
        Smoother { times, windows }
    }
}

/// Largest `beta'z` over all controls.
fn control_shift(ncc: &NccDataset, beta: &[f64]) -> f64 {
    ncc.records()
        .iter()
        .flat_map(|r| &r.controls)
        .map(|c| dot(beta, &c.z))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `sum_j exp(beta'z_j - shift)` over the controls of each record.
fn control_exp_sums(ncc: &NccDataset, beta: &[f64], shift: f64) -> Vec<f64> {
    ncc.records()
        .iter()
        .map(|r| r.controls.iter().map(|c| (dot(beta, &c.z) - shift).exp()).sum())
        .collect()
}

/// Shifted `b_hat`, i.e. `b_hat * exp(-shift)`, over a window.
fn shifted_bhat(ncc: &NccDataset, sums: &[f64], win: &[(usize, f64)]) -> f64 {
    let records = ncc.records();
    let (num, den) = win.iter().fold((0.0, 0.0), |(n, d), &(r, psi)| {
        (n + psi * sums[r], d + psi * records[r].m() as f64)
    });
    num / den
}

/// Kernel estimate of `b(t)` at reference `beta_ref`.
pub fn estimate_b(ncc: &NccDataset, t: f64, beta_ref: &[f64], kernel: &Kernel) -> Result<f64> {
    check_beta(beta_ref, ncc.dim())?;
    if !(0.0..=ncc.tau()).contains(&t) {
        return Err(Error::Domain { t, tau: ncc.tau() });
    }
    let times: Vec<f64> = ncc.times().collect();
    let win = window(&times, kernel, t);
    if win.is_empty() {
        return Err(Error::EmptyWindow { t });
    }
    let shift = control_shift(ncc, beta_ref);
    let sums = control_exp_sums(ncc, beta_ref, shift);
    Ok(shifted_bhat(ncc, &sums, &win) * shift.exp())
}

fn weights_with(ncc: &NccDataset, smoother: &Smoother, beta_ref: &[f64]) -> WeightTable {
    let shift = control_shift(ncc, beta_ref);
    let sums = control_exp_sums(ncc, beta_ref, shift);
    let scale = shift.exp();
    let mut bhat = Vec::with_capacity(ncc.len());
    let mut w_case = Vec::with_capacity(ncc.len());
    let mut w_control = Vec::with_capacity(ncc.len());
    for (r, rec) in ncc.records().iter().enumerate() {
        let b = shifted_bhat(ncc, &sums, &smoother.windows[r]);
        let mb = rec.m() as f64 * b;
        let w = |z: &[f64]| mb / ((dot(beta_ref, z) - shift).exp() + mb);
        bhat.push(b * scale);
        w_case.push(w(&rec.z_case));
        w_control.push(rec.controls.iter().map(|c| w(&c.z)).collect());
    }
    WeightTable {
        beta_ref: beta_ref.to_vec(),
        times: smoother.times.clone(),
        bhat,
        w_case,
        w_control,
    }
}

/// `b_hat` and the case and control weights at reference `beta_ref`.
pub fn compute_weights(ncc: &NccDataset, beta_ref: &[f64], kernel: &Kernel) -> Result<WeightTable> {
    check_beta(beta_ref, ncc.dim())?;
    Ok(weights_with(ncc, &Smoother::new(ncc, kernel), beta_ref))
}

fn check_weights(ncc: &NccDataset, weights: &WeightTable) -> Result<()> {
    let shape_ok = weights.w_case.len() == ncc.len()
        && weights
            .w_control
            .iter()
            .zip(ncc.records())
            .all(|(w, r)| w.len() == r.controls.len());
    if !shape_ok {
        return Err(Error::invalid("weight table does not match the dataset"));
    }
    Ok(())
}

/// `S_0`, `S_1`, `S_2` at time `t`, including the `1/n` factor.
pub fn compute_s(
    ncc: &NccDataset,
    t: f64,
    beta: &[f64],
    weights: &WeightTable,
    kernel: &Kernel,
) -> Result<SMoments> {
    check_beta(beta, ncc.dim())?;
    check_weights(ncc, weights)?;
    if !(0.0..=ncc.tau()).contains(&t) {
        return Err(Error::Domain { t, tau: ncc.tau() });
    }
    let times: Vec<f64> = ncc.times().collect();
    let win = window(&times, kernel, t);
    if win.is_empty() {
        return Err(Error::EmptyWindow { t });
    }
    let d = ncc.dim();
    let inv_n = 1.0 / ncc.n() as f64;
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d * d];
    for &(r, psi) in &win {
        let rec = &ncc.records()[r];
        for (c, w) in rec.controls.iter().zip(&weights.w_control[r]) {
            let a = inv_n * psi * w * dot(beta, &c.z).exp();
            s0 += a;
            for (s, z) in s1.iter_mut().zip(&c.z) {
                *s += a * z;
            }
            add_outer(&mut s2, &c.z, a);
        }
    }
    Ok(SMoments {
        s0,
        s1,
        s2: row_major_to_matrix(d, &s2),
    })
}

/// Score and its Jacobian with the weights held fixed.
fn score_deriv_with(
    ncc: &NccDataset,
    smoother: &Smoother,
    beta: &[f64],
    weights: &WeightTable,
) -> (Vec<f64>, DMatrix<f64>) {
    let d = ncc.dim();
    let records = ncc.records();
    let shift = control_shift(ncc, beta);
    // w_j exp(beta'z_j - shift) per control
    let a: Vec<Vec<f64>> = records
        .iter()
        .zip(&weights.w_control)
        .map(|(rec, ws)| {
            rec.controls
                .iter()
                .zip(ws)
                .map(|(c, w)| w * (dot(beta, &c.z) - shift).exp())
                .collect()
        })
        .collect();
    let mut score = vec![0.0; d];
    let mut deriv = vec![0.0; d * d];
    for (i, rec) in records.iter().enumerate() {
        let pool = smoother.windows[i].iter().flat_map(|&(r, psi)| {
            records[r]
                .controls
                .iter()
                .zip(&a[r])
                .map(move |(c, ac)| (c.z.as_slice(), psi * ac))
        });
        let mom = weighted_moments(d, pool);
        let wc = weights.w_case[i];
        for ((s, z), m) in score.iter_mut().zip(&rec.z_case).zip(&mom.mean) {
            *s += wc * (z - m);
        }
        for (acc, c) in deriv.iter_mut().zip(&mom.cov) {
            *acc -= wc * c;
        }
    }
    (score, row_major_to_matrix(d, &deriv))
}

/// Proposed score `U(beta)` and `U'(beta)` with `weights` held fixed.
pub fn proposed_score_deriv(
    ncc: &NccDataset,
    beta: &[f64],
    weights: &WeightTable,
    kernel: &Kernel,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_beta(beta, ncc.dim())?;
    check_weights(ncc, weights)?;
    Ok(score_deriv_with(ncc, &Smoother::new(ncc, kernel), beta, weights))
}

/// Central-difference Jacobian of the self-referenced score.
fn self_referenced_jacobian(ncc: &NccDataset, smoother: &Smoother, beta: &[f64]) -> DMatrix<f64> {
    let d = beta.len();
    let mut jac = DMatrix::zeros(d, d);
    for k in 0..d {
        let h = 1e-5 * (1.0 + beta[k].abs());
        let mut plus = beta.to_vec();
        let mut minus = beta.to_vec();
        plus[k] += h;
        minus[k] -= h;
        let (sp, _) = score_deriv_with(ncc, smoother, &plus, &weights_with(ncc, smoother, &plus));
        let (sm, _) = score_deriv_with(ncc, smoother, &minus, &weights_with(ncc, smoother, &minus));
        for j in 0..d {
            jac[(j, k)] = (sp[j] - sm[j]) / (2.0 * h);
        }
    }
    jac
}

/// Thomas pilot, weights at the pilot, then the Newton root of the
/// proposed score. `sigma_hat = -U'(beta_hat) / n`.
pub fn proposed_fit(ncc: &NccDataset, kernel: &KernelConfig, options: &ProposedOptions) -> Result<ProposedFit> {
    let kernel = kernel.resolve(ncc.n())?;
    let smoother = Smoother::new(ncc, &kernel);
    let d = ncc.dim();
    let pilot_opts = SolverOptions {
        initial: vec![0.0; d],
        ..options.solver.clone()
    };
    let pilot = match (thomas_fit(ncc, Some(pilot_opts)), options.weight_ref) {
        (Ok(p), _) => Some(p),
        (Err(e), WeightReference::Pilot) => return Err(e),
        (Err(e), WeightReference::SelfReferenced) => {
            log::debug!("pilot fit failed ({e}); self-referenced iteration starts at zero");
            None
        }
    };
    let start = pilot.as_ref().map_or_else(|| vec![0.0; d], |p| p.beta_hat.clone());
    let opts = SolverOptions {
        initial: start.clone(),
        ..options.solver.clone()
    };

    match options.weight_ref {
        WeightReference::Pilot => {
            let weights = weights_with(ncc, &smoother, &start);
            let outcome = newton_solve(|b| score_deriv_with(ncc, &smoother, b, &weights), &opts)?;
            Ok(ProposedFit {
                fit: FitResult::from_outcome(outcome, ncc.n())?,
                pilot,
                weights,
                locally_monotone: None,
            })
        }
        WeightReference::SelfReferenced => {
            let outcome = newton_solve(
                |b| score_deriv_with(ncc, &smoother, b, &weights_with(ncc, &smoother, b)),
                &opts,
            )?;
            let weights = weights_with(ncc, &smoother, &outcome.root);
            let full = self_referenced_jacobian(ncc, &smoother, &outcome.root);
            let monotone = is_positive_definite(&symmetrize(&-full));
            if !monotone {
                log::warn!("self-referenced root at {:?} is not locally monotone", outcome.root);
            }
            Ok(ProposedFit {
                fit: FitResult::from_outcome(outcome, ncc.n())?,
                pilot,
                weights,
                locally_monotone: Some(monotone),
            })
        }
    }
}
