//! Cohort generation under the proportional hazards model and risk-set
//! sampling of nested case-control data.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Uniform};

use crate::error::{Error, Result};
use crate::model::{
    Cohort, Control, CovariatePath, NccDataset, NccRecord, ShortfallPolicy, Subject, SubjectId,
};
use crate::rng::{derive_seed, purpose, substream};

/// Subject-level latent draws from which the covariate path is built.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

/// Law of the covariate process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateLaw {
    /// `Z_k(t) = slope_scale * t * u1_k + u2_k` with `u1_k, u2_k` iid
    /// uniform on `[-half_width, half_width]`.
    UniformLinear { slope_scale: f64, half_width: f64 },
}

impl Default for CovariateLaw {
    fn default() -> Self {
        CovariateLaw::UniformLinear {
            slope_scale: 4.0,
            half_width: 1.0,
        }
    }
}

impl CovariateLaw {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, dim: usize) -> Latent {
        match *self {
            CovariateLaw::UniformLinear { half_width, .. } => {
                let u = Uniform::new_inclusive(-half_width, half_width)
                    .expect("half width validated positive");
                let u1 = (0..dim).map(|_| u.sample(rng)).collect();
                let u2 = (0..dim).map(|_| u.sample(rng)).collect();
                Latent { u1, u2 }
            }
        }
    }

    pub fn path(&self, latent: &Latent) -> CovariatePath {
        match *self {
            CovariateLaw::UniformLinear { slope_scale, .. } => CovariatePath::LinearInTime {
                slope: latent.u1.iter().map(|u| slope_scale * u).collect(),
                intercept: latent.u2.clone(),
            },
        }
    }

    /// Recovers the latent draws from a path built by [`CovariateLaw::path`].
    pub fn latent_of(&self, path: &CovariatePath) -> Option<Latent> {
        match (*self, path) {
            (
                CovariateLaw::UniformLinear { slope_scale, .. },
                CovariatePath::LinearInTime { slope, intercept },
            ) => Some(Latent {
                u1: slope.iter().map(|s| s / slope_scale).collect(),
                u2: intercept.clone(),
            }),
            _ => None,
        }
    }

    /// Almost-sure bound on `|Z_k(t)|` over `[0, tau]`.
    pub fn bound(&self, tau: f64) -> f64 {
        match *self {
            CovariateLaw::UniformLinear {
                slope_scale,
                half_width,
            } => half_width * (slope_scale.abs() * tau + 1.0),
        }
    }
}

/// How the upper end of the random censoring interval is formed from `Z(t_ref)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundForm {
    /// `min(cap, |Z(t_ref)|)`.
    Absolute,
    /// `min(cap, Z(t_ref))`, zero when negative.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Censoring {
    Fixed { time: f64 },
    /// `C | Z ~ Uniform[0, bound(Z_1(t_ref))]`; the first covariate component is used.
    Random { t_ref: f64, cap: f64, form: BoundForm },
}

impl Censoring {
    pub fn fixed(time: f64) -> Self {
        Censoring::Fixed { time }
    }

    pub fn random_abs_z(t_ref: f64, cap: f64) -> Self {
        Censoring::Random {
            t_ref,
            cap,
            form: BoundForm::Absolute,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Censoring::Fixed { .. } => "fixed",
            Censoring::Random {
                form: BoundForm::Absolute,
                ..
            } => "random",
            Censoring::Random {
                form: BoundForm::Signed,
                ..
            } => "random_signed",
        }
    }
}

/// One simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub beta: Vec<f64>,
    pub n: usize,
    pub m: usize,
    /// Constant baseline hazard.
    pub baseline_hazard: f64,
    pub covariate_law: CovariateLaw,
    pub censoring: Censoring,
    pub tau: f64,
    pub shortfall: ShortfallPolicy,
}

impl ScenarioConfig {
    /// The scalar design with `Z(t) = 4 t u1 + u2`, unit baseline hazard,
    /// `tau = 1` and `n = 200`.
    pub fn table1(beta: f64, m: usize, censoring: Censoring) -> Self {
        ScenarioConfig {
            beta: vec![beta],
            n: 200,
            m,
            baseline_hazard: 1.0,
            covariate_law: CovariateLaw::default(),
            censoring,
            tau: 1.0,
            shortfall: ShortfallPolicy::Drop,
        }
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("beta must be a non-empty finite vector"));
        }
        if !(self.baseline_hazard > 0.0 && self.baseline_hazard.is_finite()) {
            return Err(Error::invalid("baseline hazard must be positive and finite"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.n < self.m + 1 {
            return Err(Error::invalid(format!(
                "n = {} must be at least m + 1 = {}",
                self.n,
                self.m + 1
            )));
        }
        let CovariateLaw::UniformLinear {
            slope_scale,
            half_width,
        } = self.covariate_law;
        if !(half_width > 0.0 && half_width.is_finite() && slope_scale.is_finite()) {
            return Err(Error::invalid("covariate law parameters must be finite, half width positive"));
        }
        match self.censoring {
            Censoring::Fixed { time } if !(time >= 0.0) => {
                Err(Error::invalid("fixed censoring time must be nonnegative"))
            }
            Censoring::Random { t_ref, cap, .. } if !(cap > 0.0 && (0.0..=self.tau).contains(&t_ref)) => {
                Err(Error::invalid("random censoring needs cap > 0 and t_ref in [0, tau]"))
            }
            _ => Ok(()),
        }
    }

    pub fn path_for(&self, latent: &Latent) -> CovariatePath {
        self.covariate_law.path(latent)
    }

    pub fn cumulative_hazard(&self, latent: &Latent, t: f64) -> f64 {
        cumulative_hazard(&self.beta, self.baseline_hazard, &self.path_for(latent), t)
    }

    pub fn invert_hazard(&self, latent: &Latent, e: f64) -> f64 {
        invert_hazard(
            &self.beta,
            self.baseline_hazard,
            &self.path_for(latent),
            e,
            self.tau,
        )
    }

    /// Draws one subject's latent variables, failure time and censoring time.
    pub fn draw_subject<R: Rng + ?Sized>(&self, rng: &mut R) -> (Latent, f64, f64) {
        let latent = self.covariate_law.draw(rng, self.dim());
        let path = self.path_for(&latent);
        let e: f64 = Exp1.sample(rng);
        let t = invert_hazard(&self.beta, self.baseline_hazard, &path, e, self.tau);
        let c = draw_censoring(&self.censoring, &path, rng);
        (latent, t, c)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `expm1(x) / x`, continuous at zero.
fn expm1_ratio(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.exp_m1() / x
    }
}

/// `ln_1p(x) / x`, continuous at zero.
fn ln1p_ratio(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.ln_1p() / x
    }
}

/// Cumulative hazard `int_0^t lambda0 exp{beta' Z(s)} ds`, in closed form
/// for both path families.
pub fn cumulative_hazard(beta: &[f64], baseline: f64, path: &CovariatePath, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    match path {
        CovariatePath::LinearInTime { slope, intercept } => {
            let a = dot(beta, slope);
            let b = dot(beta, intercept);
            baseline * b.exp() * t * expm1_ratio(a * t)
        }
        CovariatePath::PiecewiseConstant {
            breakpoints,
            values,
        } => {
            let mut total = 0.0;
            let mut start = 0.0;
            for (k, v) in values.iter().enumerate() {
                let end = breakpoints.get(k).map_or(t, |&b| b.min(t));
                if end > start {
                    total += baseline * dot(beta, v).exp() * (end - start);
                    start = end;
                }
                if start >= t {
                    break;
                }
            }
            total
        }
    }
}

/// Failure time solving `Lambda(T) = e`, or `f64::INFINITY` when
/// `Lambda(tau) < e` (no failure within follow-up).
pub fn invert_hazard(beta: &[f64], baseline: f64, path: &CovariatePath, e: f64, tau: f64) -> f64 {
    let t = match path {
        CovariatePath::LinearInTime { slope, intercept } => {
            let a = dot(beta, slope);
            let scale = baseline * dot(beta, intercept).exp();
            let x = a * e / scale;
            if x <= -1.0 {
                f64::INFINITY
            } else {
                e / scale * ln1p_ratio(x)
            }
        }
        CovariatePath::PiecewiseConstant {
            breakpoints,
            values,
        } => {
            let mut remaining = e;
            let mut start = 0.0;
            let mut hit = f64::INFINITY;
            for (k, v) in values.iter().enumerate() {
                let end = breakpoints.get(k).map_or(tau, |&b| b.min(tau));
                let rate = baseline * dot(beta, v).exp();
                if end > start {
                    let mass = rate * (end - start);
                    if mass >= remaining {
                        hit = start + remaining / rate;
                        break;
                    }
                    remaining -= mass;
                    start = end;
                }
                if start >= tau {
                    break;
                }
            }
            hit
        }
    };
    if t > tau {
        f64::INFINITY
    } else {
        t
    }
}

/// Draws a censoring time for a subject with covariate path `path`.
pub fn draw_censoring<R: Rng + ?Sized>(censoring: &Censoring, path: &CovariatePath, rng: &mut R) -> f64 {
    match *censoring {
        Censoring::Fixed { time } => time,
        Censoring::Random { t_ref, cap, form } => {
            let z = path.eval(t_ref)[0];
            let upper = match form {
                BoundForm::Absolute => cap.min(z.abs()),
                BoundForm::Signed => cap.min(z).max(0.0),
            };
            if upper <= 0.0 {
                0.0
            } else {
                rng.random::<f64>() * upper
            }
        }
    }
}

fn observe(scenario: &ScenarioConfig, id: SubjectId, latent: &Latent, t: f64, c: f64) -> Subject {
    let end = c.min(scenario.tau);
    let delta = t <= end;
    Subject {
        id,
        y: if delta { t } else { end },
        delta,
        path: scenario.path_for(latent),
    }
}

/// Generates `n` independent subjects. Subject `i` uses its own substream,
/// so the result depends only on `(scenario, n, seed)`.
pub fn generate_cohort(scenario: &ScenarioConfig, n: usize, seed: u64) -> Result<Cohort> {
    scenario.validate()?;
    if n == 0 {
        return Err(Error::invalid("cohort size must be at least 1"));
    }
    let mut subjects: Vec<Subject> = (0..n as u64)
        .map(|i| {
            let mut rng = substream(seed, purpose::SUBJECT, i);
            let (latent, t, c) = scenario.draw_subject(&mut rng);
            observe(scenario, i, &latent, t, c)
        })
        .collect();

    // Failure-time ties have probability zero; redraw the later subject of any tie.
    let mut attempt = 0u64;
    loop {
        let mut failures: Vec<(f64, usize)> = subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.delta)
            .map(|(k, s)| (s.y, k))
            .collect();
        failures.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let tied: Vec<usize> = failures
            .windows(2)
            .filter(|w| w[0].0 == w[1].0)
            .map(|w| w[1].1)
            .collect();
        if tied.is_empty() {
            break;
        }
        attempt += 1;
        for k in tied {
            let id = subjects[k].id;
            let mut rng = substream(derive_seed(seed, purpose::SUBJECT_RETRY, attempt), purpose::SUBJECT, id);
            let (latent, t, c) = scenario.draw_subject(&mut rng);
            subjects[k] = observe(scenario, id, &latent, t, c);
        }
    }
    Cohort::new(subjects, scenario.tau)
}

/// Draws `m` controls uniformly without replacement from the risk set
/// `{j : Y_j >= Y_i, j != i}` at every failure time `Y_i`, recording
/// covariates at that time only.
pub fn sample_ncc(cohort: &Cohort, m: usize, seed: u64, policy: ShortfallPolicy) -> Result<NccDataset> {
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let subjects = cohort.subjects();
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.sort_by(|&a, &b| {
        subjects[a]
            .y
            .total_cmp(&subjects[b].y)
            .then(subjects[a].id.cmp(&subjects[b].id))
    });

    let mut records = Vec::new();
    let mut candidates = Vec::with_capacity(subjects.len());
    for &i in order.iter().filter(|&&i| subjects[i].delta) {
        let case = &subjects[i];
        let start = order.partition_point(|&j| subjects[j].y < case.y);
        candidates.clear();
        candidates.extend(order[start..].iter().copied().filter(|&j| j != i));

        let take = if candidates.len() >= m {
            m
        } else {
            match policy {
                ShortfallPolicy::Drop => {
                    warn!(
                        "dropping failure at t = {}: {} subjects at risk besides the case, m = {m}",
                        case.y,
                        candidates.len()
                    );
                    continue;
                }
                ShortfallPolicy::Adapt if candidates.is_empty() => {
                    warn!("dropping failure at t = {}: risk set holds only the case", case.y);
                    continue;
                }
                ShortfallPolicy::Adapt => candidates.len(),
            }
        };
        let mut rng = substream(seed, purpose::CONTROLS, case.id);
        let picked = rand::seq::index::sample(&mut rng, candidates.len(), take);
        let mut controls: Vec<Control> = picked
            .iter()
            .map(|k| {
                let s = &subjects[candidates[k]];
                Control {
                    id: s.id,
                    z: s.path.eval(case.y),
                }
            })
            .collect();
        controls.sort_by_key(|c| c.id);
        records.push(NccRecord {
            t: case.y,
            case_id: case.id,
            z_case: case.path.eval(case.y),
            controls,
        });
    }
    if records.is_empty() {
        return Err(Error::invalid("no failure time has an available control"));
    }
    NccDataset::new(records, cohort.len(), m, cohort.tau(), policy)
}
