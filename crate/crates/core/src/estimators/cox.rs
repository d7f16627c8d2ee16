//! Full-cohort Cox partial likelihood.

use nalgebra::DMatrix;

use super::{check_beta, row_major_to_matrix, weighted_moments, FitResult};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::Cohort;
use crate::solver::{newton_solve, SolverOptions};

/// Covariates of the whole risk set at one failure time.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSetEvent {
    pub t: f64,
    /// Row of the case within `members`.
    pub case: usize,
    /// Row-major covariates of every subject at risk, `k x d`.
    pub members: Vec<f64>,
}

impl RiskSetEvent {
    pub fn size(&self, d: usize) -> usize {
        self.members.len() / d
    }
}

/// Risk sets `R_t = {j : Y_j >= t}` evaluated at every failure time.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxRiskSets {
    dim: usize,
    n: usize,
    events: Vec<RiskSetEvent>,
}

impl CoxRiskSets {
    pub fn new(dim: usize, n: usize, mut events: Vec<RiskSetEvent>) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::invalid("no failures"));
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        if let Some(w) = events.windows(2).find(|w| w[0].t == w[1].t) {
            return Err(Error::TiedFailureTimes { t: w[0].t });
        }
        for e in &events {
            if dim == 0 || e.members.len() % dim != 0 || e.case >= e.size(dim) {
                return Err(Error::invalid(format!("malformed risk set at t = {}", e.t)));
            }
        }
        Ok(CoxRiskSets { dim, n, events })
    }

    pub fn from_cohort(cohort: &Cohort) -> Result<Self> {
        let d = cohort.dim();
        let subjects = cohort.subjects();
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        order.sort_by(|&a, &b| subjects[a].y.total_cmp(&subjects[b].y));
        let mut events = Vec::with_capacity(cohort.failures());
        let mut buf = vec![0.0; d];
        for &i in order.iter().filter(|&&i| subjects[i].delta) {
            let t = subjects[i].y;
            let start = order.partition_point(|&j| subjects[j].y < t);
            let at_risk = &order[start..];
            let mut members = Vec::with_capacity(at_risk.len() * d);
            let mut case = 0;
            for (row, &j) in at_risk.iter().enumerate() {
                if j == i {
                    case = row;
                }
                subjects[j].path.eval_into(t, &mut buf);
                members.extend_from_slice(&buf);
            }
            events.push(RiskSetEvent { t, case, members });
        }
        CoxRiskSets::new(d, cohort.len(), events)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn events(&self) -> &[RiskSetEvent] {
        &self.events
    }
}

/// Cox score `U_C(beta)` and information `-U_C'(beta)`.
pub fn cox_score_info(risk_sets: &CoxRiskSets, beta: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_beta(beta, risk_sets.dim)?;
    Ok(score_info(risk_sets, beta))
}

fn score_info(risk_sets: &CoxRiskSets, beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let d = risk_sets.dim;
    let mut score = vec![0.0; d];
    let mut info = vec![0.0; d * d];
    for e in &risk_sets.events {
        let rows = || e.members.chunks_exact(d);
        let shift = rows().map(|z| dot(beta, z)).fold(f64::NEG_INFINITY, f64::max);
        let mom = weighted_moments(d, rows().map(|z| (z, (dot(beta, z) - shift).exp())));
        let case = &e.members[e.case * d..(e.case + 1) * d];
        for ((s, z), m) in score.iter_mut().zip(case).zip(&mom.mean) {
            *s += z - m;
        }
        for (a, c) in info.iter_mut().zip(&mom.cov) {
            *a += c;
        }
    }
    (score, row_major_to_matrix(d, &info))
}

/// Newton root of the Cox score from zero.
pub fn cox_fit(risk_sets: &CoxRiskSets, options: Option<SolverOptions>) -> Result<FitResult> {
    let d = risk_sets.dim;
    let mut opts = options.unwrap_or_default();
    if opts.initial.len() != d {
        opts.initial = vec![0.0; d];
    }
    let outcome = newton_solve(
        |b| {
            let (s, info) = score_info(risk_sets, b);
            (s, -info)
        },
        &opts,
    )?;
    FitResult::from_outcome(outcome, risk_sets.n)
}
