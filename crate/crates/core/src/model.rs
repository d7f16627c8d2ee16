//! Cohort and nested case-control data types.
//!
//! A [`Cohort`] holds the full follow-up of every subject. An [`NccDataset`]
//! holds only what a time-restricted nested case-control study ascertains:
//! each failure time, the case's covariate at that time, and the covariates of
//! the controls sampled from the risk set at that time.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

pub type SubjectId = u64;

/// A subject's covariate trajectory `Z(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariatePath {
    /// `Z(t) = intercept + slope * t`, componentwise.
    LinearInTime { slope: Vec<f64>, intercept: Vec<f64> },
    /// Step function, left-continuous: on `(b[k-1], b[k]]` the value is
    /// `values[k]`, with `values.len() == breakpoints.len() + 1`.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl CovariatePath {
    pub fn constant(value: Vec<f64>) -> Self {
        let slope = vec![0.0; value.len()];
        CovariatePath::LinearInTime {
            slope,
            intercept: value,
        }
    }

    pub fn linear(slope: Vec<f64>, intercept: Vec<f64>) -> Result<Self> {
        if slope.len() != intercept.len() {
            return Err(Error::Dimension {
                expected: intercept.len(),
                found: slope.len(),
            });
        }
        if slope.is_empty() {
            return Err(Error::invalid("covariate dimension must be at least 1"));
        }
        if slope.iter().chain(&intercept).any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariate path coefficients must be finite"));
        }
        Ok(CovariatePath::LinearInTime { slope, intercept })
    }

    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != breakpoints.len() + 1 {
            return Err(Error::invalid(format!(
                "piecewise path needs {} segment values, got {}",
                breakpoints.len() + 1,
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        let d = values[0].len();
        if d == 0 {
            return Err(Error::invalid("covariate dimension must be at least 1"));
        }
        if let Some(v) = values.iter().find(|v| v.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: v.len(),
            });
        }
        if values.iter().flatten().chain(&breakpoints).any(|v| !v.is_finite()) {
            return Err(Error::invalid("piecewise path entries must be finite"));
        }
        Ok(CovariatePath::PiecewiseConstant {
            breakpoints,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariatePath::LinearInTime { intercept, .. } => intercept.len(),
            CovariatePath::PiecewiseConstant { values, .. } => values[0].len(),
        }
    }

    /// Unchecked evaluation into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            CovariatePath::LinearInTime { slope, intercept } => {
                for ((o, a), b) in out.iter_mut().zip(slope).zip(intercept) {
                    *o = b + a * t;
                }
            }
            CovariatePath::PiecewiseConstant {
                breakpoints,
                values,
            } => {
                let seg = breakpoints.partition_point(|&b| b < t);
                out.copy_from_slice(&values[seg]);
            }
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }

    /// `sup_{t in [0, tau]} max_k |Z_k(t)|`.
    pub fn sup_norm(&self, tau: f64) -> f64 {
        match self {
            CovariatePath::LinearInTime { slope, intercept } => slope
                .iter()
                .zip(intercept)
                .map(|(a, b)| b.abs().max((b + a * tau).abs()))
                .fold(0.0, f64::max),
            CovariatePath::PiecewiseConstant {
                breakpoints,
                values,
            } => {
                // segments starting at or beyond tau are never reached
                let reachable = breakpoints.partition_point(|&b| b < tau) + 1;
                values[..reachable]
                    .iter()
                    .flatten()
                    .fold(0.0, |acc, v| acc.max(v.abs()))
            }
        }
    }
}

/// Evaluates `path` at `t`, rejecting times outside `[0, tau]`.
pub fn eval_cov(path: &CovariatePath, t: f64, tau: f64) -> Result<Vec<f64>> {
    if !(0.0..=tau).contains(&t) {
        return Err(Error::Domain { t, tau });
    }
    Ok(path.eval(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: SubjectId,
    /// Observed time, `min(T, C, tau)`.
    pub y: f64,
    pub delta: bool,
    pub path: CovariatePath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    subjects: Vec<Subject>,
    tau: f64,
    dim: usize,
}

impl Cohort {
    /// Builds a cohort, checking ids, dimensions, observation times and
    /// that no two failures share a time.
    pub fn new(subjects: Vec<Subject>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("horizon tau must be positive, got {tau}")));
        }
        let first = subjects
            .first()
            .ok_or_else(|| Error::invalid("cohort has no subjects"))?;
        let dim = first.path.dim();
        let mut ids = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            if !ids.insert(s.id) {
                return Err(Error::invalid(format!("duplicate subject id {}", s.id)));
            }
            if s.path.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: s.path.dim(),
                });
            }
            // A subject censored at time zero is allowed; a failure must happen after the origin.
            let lower_ok = if s.delta { s.y > 0.0 } else { s.y >= 0.0 };
            if !(lower_ok && s.y <= tau) {
                return Err(Error::invalid(format!(
                    "subject {} has observed time {} outside the follow-up window",
                    s.id, s.y
                )));
            }
        }
        let mut failure_times: Vec<f64> =
            subjects.iter().filter(|s| s.delta).map(|s| s.y).collect();
        failure_times.sort_by(f64::total_cmp);
        if let Some(w) = failure_times.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::TiedFailureTimes { t: w[0] });
        }
        Ok(Cohort { subjects, tau, dim })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn failures(&self) -> usize {
        self.subjects.iter().filter(|s| s.delta).count()
    }

    pub fn censoring_proportion(&self) -> f64 {
        1.0 - self.failures() as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub id: SubjectId,
    pub z: Vec<f64>,
}

/// One sampled failure time.
#[derive(Debug, Clone, PartialEq)]
pub struct NccRecord {
    pub t: f64,
    pub case_id: SubjectId,
    pub z_case: Vec<f64>,
    pub controls: Vec<Control>,
}

impl NccRecord {
    pub fn m(&self) -> usize {
        self.controls.len()
    }
}

/// What to do when fewer than `m` subjects remain at risk besides the case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShortfallPolicy {
    /// Omit the failure time from the sample.
    #[default]
    Drop,
    /// Keep every available subject; the record carries `m_r < m` controls.
    Adapt,
}

impl std::str::FromStr for ShortfallPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(ShortfallPolicy::Drop),
            "adapt" => Ok(ShortfallPolicy::Adapt),
            other => Err(Error::invalid(format!("unknown shortfall policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnsortedTimes { record: usize },
    TiedTimes { record: usize, t: f64 },
    TimeOutOfRange { record: usize, t: f64 },
    DimensionMismatch { record: usize },
    CaseAmongControls { record: usize, case_id: SubjectId },
    DuplicateControl { record: usize, id: SubjectId },
    NoControls { record: usize },
    ControlCount { record: usize, found: usize, expected: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsortedTimes { record } => {
                write!(f, "record {record}: failure times not ascending")
            }
            Violation::TiedTimes { record, t } => {
                write!(f, "record {record}: tied failure times (t = {t})")
            }
            Violation::TimeOutOfRange { record, t } => {
                write!(f, "record {record}: failure time {t} outside (0, tau]")
            }
            Violation::DimensionMismatch { record } => {
                write!(f, "record {record}: covariate dimension mismatch")
            }
            Violation::CaseAmongControls { record, case_id } => {
                write!(f, "record {record}: case sampled as own control (id {case_id})")
            }
            Violation::DuplicateControl { record, id } => {
                write!(f, "record {record}: control {id} sampled twice")
            }
            Violation::NoControls { record } => write!(f, "record {record}: no controls"),
            Violation::ControlCount {
                record,
                found,
                expected,
            } => write!(
                f,
                "record {record}: {found} controls, design requires {expected}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_tie(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::TiedTimes { .. }))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return f.write_str("pass");
        }
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Time-restricted nested case-control sample drawn from a cohort of size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NccDataset {
    records: Vec<NccRecord>,
    n: usize,
    m: usize,
    tau: f64,
    dim: usize,
    policy: ShortfallPolicy,
}

impl NccDataset {
    /// Orders records by failure time, then validates; any violation is an
    /// error. Tied failure times map to [`Error::TiedFailureTimes`].
    pub fn new(
        mut records: Vec<NccRecord>,
        n: usize,
        m: usize,
        tau: f64,
        policy: ShortfallPolicy,
    ) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.z_case.len())
            .ok_or_else(|| Error::invalid("dataset has no records"))?;
        if m == 0 {
            return Err(Error::invalid("design control count m must be at least 1"));
        }
        if n < m + 1 {
            return Err(Error::invalid(format!("cohort size {n} is below m + 1 = {}", m + 1)));
        }
        records.sort_by(|a, b| a.t.total_cmp(&b.t));
        let ds = NccDataset {
            records,
            n,
            m,
            tau,
            dim,
            policy,
        };
        let report = validate_ncc(&ds);
        if !report.passed() {
            if let Some(Violation::TiedTimes { t, .. }) = report
                .violations
                .iter()
                .find(|v| matches!(v, Violation::TiedTimes { .. }))
            {
                return Err(Error::TiedFailureTimes { t: *t });
            }
            return Err(Error::Validation(report));
        }
        Ok(ds)
    }

    /// Builds without validation; [`validate_ncc`] reports what is wrong.
    pub fn new_unchecked(
        records: Vec<NccRecord>,
        n: usize,
        m: usize,
        tau: f64,
        policy: ShortfallPolicy,
    ) -> Self {
        let dim = records.first().map_or(0, |r| r.z_case.len());
        NccDataset {
            records,
            n,
            m,
            tau,
            dim,
            policy,
        }
    }

    pub fn records(&self) -> &[NccRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn policy(&self) -> ShortfallPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.t)
    }

    /// Same data with every covariate shifted by `c`.
    pub fn shifted(&self, c: &[f64]) -> Self {
        let shift = |z: &[f64]| z.iter().zip(c).map(|(a, b)| a + b).collect::<Vec<_>>();
        let records = self
            .records
            .iter()
            .map(|r| NccRecord {
                t: r.t,
                case_id: r.case_id,
                z_case: shift(&r.z_case),
                controls: r
                    .controls
                    .iter()
                    .map(|c| Control {
                        id: c.id,
                        z: shift(&c.z),
                    })
                    .collect(),
            })
            .collect();
        NccDataset { records, ..*self }
    }
}

/// Structural checks on a nested case-control dataset. Violations are
/// collected, not raised.
pub fn validate_ncc(ds: &NccDataset) -> ValidationReport {
    let mut violations = Vec::new();
    let d = ds.dim;
    for (k, r) in ds.records.iter().enumerate() {
        if k > 0 {
            let prev = ds.records[k - 1].t;
            if r.t == prev {
                violations.push(Violation::TiedTimes { record: k, t: r.t });
            } else if r.t < prev {
                violations.push(Violation::UnsortedTimes { record: k });
            }
        }
        if !(r.t > 0.0 && r.t <= ds.tau) {
            violations.push(Violation::TimeOutOfRange { record: k, t: r.t });
        }
        let dims_ok = r.z_case.len() == d
            && r.controls.iter().all(|c| c.z.len() == d)
            && r.z_case.iter().chain(r.controls.iter().flat_map(|c| &c.z)).all(|v| v.is_finite());
        if !dims_ok {
            violations.push(Violation::DimensionMismatch { record: k });
        }
        if r.controls.iter().any(|c| c.id == r.case_id) {
            violations.push(Violation::CaseAmongControls {
                record: k,
                case_id: r.case_id,
            });
        }
        let mut seen = HashSet::with_capacity(r.controls.len());
        for c in &r.controls {
            if !seen.insert(c.id) {
                violations.push(Violation::DuplicateControl { record: k, id: c.id });
            }
        }
        let m_r = r.controls.len();
        if m_r == 0 {
            violations.push(Violation::NoControls { record: k });
        } else {
            let count_ok = match ds.policy {
                ShortfallPolicy::Drop => m_r == ds.m,
                ShortfallPolicy::Adapt => m_r <= ds.m,
            };
            if !count_ok {
                violations.push(Violation::ControlCount {
                    record: k,
                    found: m_r,
                    expected: ds.m,
                });
            }
        }
    }
    ValidationReport { violations }
}
