//! Monte Carlo evaluation of the population quantities behind the
//! asymptotic variances: the risk-set means `mu(t)` and `g(t)`, the relative
//! risk level `b(t)`, and the information matrices `Sigma_C` (full cohort),
//! `Sigma_P = Sigma_C - Sigma_a` (Thomas) and `Sigma` (kernel-weighted).
//!
//! Everything is computed from [`ScenarioConfig`] alone and shares no code
//! with the estimators, so it serves as an independent check on them.
//!
//! Expectations conditional on `m + 1` subjects being jointly at risk use a
//! second sample whose at-risk members are grouped into consecutive tuples.
//! Standard errors of the integrated matrices are batch means.

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{add_outer, min_eigenpair, symmetrize, sym_eigenvalues};
use crate::model::CovariatePath;
use crate::rng::{purpose, substream};
use crate::sim::ScenarioConfig;

pub const MIN_DRAWS: usize = 10_000;
const BATCH: usize = 4096;

/// `points` equally spaced times on `[0, tau]`.
pub fn uniform_grid(tau: f64, points: usize) -> Vec<f64> {
    let step = tau / (points - 1) as f64;
    (0..points).map(|k| k as f64 * step).collect()
}

fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; grid.len()];
    for k in 1..grid.len() {
        let half = 0.5 * (grid[k] - grid[k - 1]);
        w[k - 1] += half;
        w[k] += half;
    }
    w
}

fn check_grid(grid: &[f64], tau: f64) -> Result<()> {
    let ok = grid.len() >= 2
        && grid[0] >= 0.0
        && grid[grid.len() - 1] <= tau
        && grid.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(Error::invalid("time grid must be strictly increasing within [0, tau] with at least 2 points"));
    }
    Ok(())
}

/// One simulated subject: linear covariate path and observed time.
struct Draw {
    slope: Vec<f64>,
    intercept: Vec<f64>,
    y: f64,
}

impl Draw {
    fn z_at(&self, t: f64, out: &mut [f64]) {
        for ((o, s), c) in out.iter_mut().zip(&self.slope).zip(&self.intercept) {
            *o = s * t + c;
        }
    }

    /// Number of grid points at which the subject is at risk.
    fn horizon(&self, grid: &[f64]) -> usize {
        grid.partition_point(|&t| t <= self.y)
    }
}

fn simulate(scenario: &ScenarioConfig, count: usize, seed: u64, tag: u64) -> Vec<Draw> {
    let mut out = Vec::with_capacity(count);
    for batch in 0..count.div_ceil(BATCH) {
        let mut rng = substream(seed, tag, batch as u64);
        let size = BATCH.min(count - batch * BATCH);
        for _ in 0..size {
            let (latent, t, c) = scenario.draw_subject(&mut rng);
            let CovariatePath::LinearInTime { slope, intercept } = scenario.path_for(&latent) else {
                unreachable!("covariate law yields linear paths")
            };
            out.push(Draw {
                slope,
                intercept,
                y: t.min(c).min(scenario.tau),
            });
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Risk-set curves on a time grid, each with a Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Baselines {
    pub grid: Vec<f64>,
    pub draws: usize,
    /// `pr(Y >= t)`.
    pub at_risk: Vec<f64>,
    pub at_risk_se: Vec<f64>,
    /// `E[exp(beta'Z) | Y >= t]`.
    pub b: Vec<f64>,
    pub b_se: Vec<f64>,
    /// `E[Z e Y] / E[e Y]` with `e = exp(beta'Z(t))`, per grid point.
    pub mu: Vec<Vec<f64>>,
    pub mu_se: Vec<Vec<f64>>,
    /// `E[w Z e Y] / E[w e Y]` with `w = m b / (e + m b)`.
    pub g: Vec<Vec<f64>>,
    pub g_se: Vec<Vec<f64>>,
}

impl Baselines {
    /// Limiting weight `m b(t) / (exp(beta'z) + m b(t))` at grid point `k`.
    pub fn w_tilde(&self, k: usize, m: usize, e: f64) -> f64 {
        let mb = m as f64 * self.b[k];
        mb / (e + mb)
    }
}

/// Per-grid sums of `v`, `v z`, `v z z'` and of the squares needed for the
/// linearized standard error of the ratio `sum(v z) / sum(v)`.
#[derive(Clone)]
struct GridSums {
    d: usize,
    count: Vec<f64>,
    s0: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    q0: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
}

impl GridSums {
    fn new(g: usize, d: usize) -> Self {
        GridSums {
            d,
            count: vec![0.0; g],
            s0: vec![0.0; g],
            s1: vec![0.0; g * d],
            s2: vec![0.0; g * d * d],
            q0: vec![0.0; g],
            q1: vec![0.0; g * d],
            q2: vec![0.0; g * d],
        }
    }

    fn add(&mut self, k: usize, z: &[f64], v: f64) {
        let d = self.d;
        self.count[k] += 1.0;
        self.s0[k] += v;
        self.q0[k] += v * v;
        for (c, zc) in z.iter().enumerate() {
            self.s1[k * d + c] += zc * v;
            self.q1[k * d + c] += zc * v * v;
            self.q2[k * d + c] += zc * zc * v * v;
        }
        add_outer(&mut self.s2[k * d * d..(k + 1) * d * d], z, v);
    }

    fn merge(&mut self, other: &GridSums) {
        for (a, b) in [
            (&mut self.count, &other.count),
            (&mut self.s0, &other.s0),
            (&mut self.s1, &other.s1),
            (&mut self.s2, &other.s2),
            (&mut self.q0, &other.q0),
            (&mut self.q1, &other.q1),
            (&mut self.q2, &other.q2),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Ratio and its standard error at grid point `k`, over `n` draws.
    fn ratio(&self, k: usize, n: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let a0 = self.s0[k] / n;
        let mut ratio = vec![f64::NAN; d];
        let mut se = vec![f64::NAN; d];
        if a0 > 0.0 {
            for c in 0..d {
                let r = self.s1[k * d + c] / self.s0[k];
                let m2 = (self.q2[k * d + c] - 2.0 * r * self.q1[k * d + c] + r * r * self.q0[k]) / n;
                ratio[c] = r;
                se[c] = (m2.max(0.0) / n).sqrt() / a0;
            }
        }
        (ratio, se)
    }

    /// `int [S2 - S1 S1' / S0] dt / n` with integration weights `tw`.
    fn integrated_covariance(&self, tw: &[f64], n: f64, out: &mut [f64]) {
        let d = self.d;
        out.iter_mut().for_each(|x| *x = 0.0);
        for (k, w) in tw.iter().enumerate() {
            if self.s0[k] <= 0.0 {
                continue;
            }
            let s1 = &self.s1[k * d..(k + 1) * d];
            for i in 0..d {
                for j in 0..d {
                    let c = self.s2[k * d * d + i * d + j] - s1[i] * s1[j] / self.s0[k];
                    out[i * d + j] += w * c / n;
                }
            }
        }
    }
}

/// Number of batches behind the batch-means standard errors of the
/// integrated matrices.
const SE_BATCHES: usize = 100;

fn batch_ranges(count: usize) -> Vec<std::ops::Range<usize>> {
    let b = SE_BATCHES.min(count);
    (0..b).map(|i| (i * count / b)..((i + 1) * count / b)).collect()
}

/// `exp(beta'Z(t_k))` along the grid for one draw, using a constant ratio
/// on uniform grids.
fn exp_path(beta: &[f64], dr: &Draw, grid: &[f64], uniform: Option<f64>, out: &mut Vec<f64>) {
    let horizon = dr.horizon(grid);
    out.clear();
    match uniform {
        Some(step) if horizon > 0 => {
            let a = dot(beta, &dr.slope);
            let ratio = (a * step).exp();
            let mut e = (dot(beta, &dr.intercept) + a * grid[0]).exp();
            for _ in 0..horizon {
                out.push(e);
                e *= ratio;
            }
        }
        _ => {
            let mut z = vec![0.0; beta.len()];
            for &t in &grid[..horizon] {
                dr.z_at(t, &mut z);
                out.push(dot(beta, &z).exp());
            }
        }
    }
}

fn uniform_step(grid: &[f64]) -> Option<f64> {
    let step = grid[1] - grid[0];
    grid.windows(2)
        .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-12 * step.max(1.0))
        .then_some(step)
}

/// Single-draw sums: batch sums for `e` (giving `mu`, `Sigma_C`) and for
/// `w e` (giving `g`, `Sigma`).
struct SinglePass {
    base: Baselines,
    plain: Vec<GridSums>,
    weighted: Vec<GridSums>,
}

fn single_pass(scenario: &ScenarioConfig, grid: &[f64], draws: &[Draw]) -> SinglePass {
    let d = scenario.dim();
    let g = grid.len();
    let n = draws.len() as f64;
    let beta = &scenario.beta;
    let uniform = uniform_step(grid);
    let ranges = batch_ranges(draws.len());
    let mut z = vec![0.0; d];
    let mut e = Vec::with_capacity(g);

    let mut plain: Vec<GridSums> = Vec::with_capacity(ranges.len());
    for r in &ranges {
        let mut sums = GridSums::new(g, d);
        for dr in &draws[r.clone()] {
            exp_path(beta, dr, grid, uniform, &mut e);
            for (k, &ek) in e.iter().enumerate() {
                dr.z_at(grid[k], &mut z);
                sums.add(k, &z, ek);
            }
        }
        plain.push(sums);
    }
    let mut all = GridSums::new(g, d);
    plain.iter().for_each(|s| all.merge(s));

    let at_risk: Vec<f64> = all.count.iter().map(|c| c / n).collect();
    let at_risk_se = at_risk.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
    let mut b = vec![f64::NAN; g];
    let mut b_se = vec![f64::NAN; g];
    let (mut mu, mut mu_se) = (Vec::with_capacity(g), Vec::with_capacity(g));
    for k in 0..g {
        if all.count[k] > 0.0 {
            b[k] = all.s0[k] / all.count[k];
            let m2 = (all.q0[k] - 2.0 * b[k] * all.s0[k] + b[k] * b[k] * all.count[k]) / n;
            b_se[k] = (m2.max(0.0) / n).sqrt() / at_risk[k];
        } else {
            warn!("no simulated subject at risk at t = {}", grid[k]);
        }
        let (r, s) = all.ratio(k, n);
        mu.push(r);
        mu_se.push(s);
    }

    let m = scenario.m as f64;
    let mut weighted: Vec<GridSums> = Vec::with_capacity(ranges.len());
    for r in &ranges {
        let mut sums = GridSums::new(g, d);
        for dr in &draws[r.clone()] {
            exp_path(beta, dr, grid, uniform, &mut e);
            for (k, &ek) in e.iter().enumerate() {
                dr.z_at(grid[k], &mut z);
                let w = m * b[k] / (ek + m * b[k]);
                sums.add(k, &z, w * ek);
            }
        }
        weighted.push(sums);
    }
    let mut wall = GridSums::new(g, d);
    weighted.iter().for_each(|s| wall.merge(s));
    let (mut gv, mut g_se) = (Vec::with_capacity(g), Vec::with_capacity(g));
    for k in 0..g {
        let (r, s) = wall.ratio(k, n);
        gv.push(r);
        g_se.push(s);
    }

    SinglePass {
        base: Baselines {
            grid: grid.to_vec(),
            draws: draws.len(),
            at_risk,
            at_risk_se,
            b,
            b_se,
            mu,
            mu_se,
            g: gv,
            g_se,
        },
        plain,
        weighted,
    }
}

/// Monte Carlo estimates of `mu`, `g`, `b` and `pr(Y >= t)` on `grid`.
pub fn mc_baselines(scenario: &ScenarioConfig, grid: &[f64], draws: usize, seed: u64) -> Result<Baselines> {
    scenario.validate()?;
    check_grid(grid, scenario.tau)?;
    if draws < MIN_DRAWS {
        return Err(Error::invalid(format!("need at least {MIN_DRAWS} draws, got {draws}")));
    }
    let sample = simulate(scenario, draws, seed, purpose::THEORY_SINGLE);
    Ok(single_pass(scenario, grid, &sample).base)
}

/// Sample mean and covariance-of-the-mean of stacked vectors.
struct MeanCov {
    n: f64,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl MeanCov {
    fn new(len: usize) -> Self {
        MeanCov {
            n: 0.0,
            sum: vec![0.0; len],
            outer: vec![0.0; len * len],
        }
    }

    fn add(&mut self, v: &[f64]) {
        self.n += 1.0;
        for (s, x) in self.sum.iter_mut().zip(v) {
            *s += x;
        }
        add_outer(&mut self.outer, v, 1.0);
    }

    /// Covariance of the sample mean.
    fn cov_of_mean(&self) -> DMatrix<f64> {
        let len = self.sum.len();
        let mean: Vec<f64> = self.sum.iter().map(|s| s / self.n).collect();
        let c = DMatrix::from_fn(len, len, |i, j| {
            let raw = self.outer[i * len + j] / self.n - mean[i] * mean[j];
            raw / (self.n - 1.0)
        });
        symmetrize(&c)
    }
}

/// Information matrices of the three estimators for one design.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub beta: Vec<f64>,
    pub m: usize,
    pub censoring: String,
    /// Curves on the grid actually integrated over, after truncation.
    pub baselines: Baselines,
    /// Requested grid end; differs from the last grid point when truncated.
    pub requested_end: f64,
    /// Independent draws behind the jointly-at-risk expectations.
    pub tuple_draws: usize,
    pub sigma_c: DMatrix<f64>,
    pub sigma_a: DMatrix<f64>,
    /// `sigma_c - sigma_a`.
    pub sigma_p: DMatrix<f64>,
    /// `Sigma_P` from the `E[(Z_1 - mu - Psi)^2 e_1 | all at risk]` form.
    pub sigma_p_alt: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub se_c: DMatrix<f64>,
    pub se_a: DMatrix<f64>,
    pub se_p: DMatrix<f64>,
    pub se_p_alt: DMatrix<f64>,
    pub se: DMatrix<f64>,
    /// Covariance of `(vec Sigma_C, vec Sigma)`.
    pub single_cov: DMatrix<f64>,
    /// Covariance of `(vec Sigma_a, vec Sigma_P alt)`; independent of `single_cov`.
    pub tuple_cov: DMatrix<f64>,
}

impl TheoryReport {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn grid(&self) -> &[f64] {
        &self.baselines.grid
    }

    pub fn truncated(&self) -> bool {
        self.baselines.grid.last().copied() != Some(self.requested_end)
    }

    /// Standard error of `<L_c, Sigma_C> + <L_s, Sigma> + <L_a, Sigma_a>`,
    /// each `L` a `d x d` coefficient matrix.
    pub fn linear_se(&self, l_c: &DMatrix<f64>, l_s: &DMatrix<f64>, l_a: &DMatrix<f64>) -> f64 {
        let d = self.dim();
        let dd = d * d;
        let mut single = vec![0.0; 2 * dd];
        let mut tuple = vec![0.0; 2 * dd];
        for i in 0..d {
            for j in 0..d {
                single[i * d + j] = l_c[(i, j)];
                single[dd + i * d + j] = l_s[(i, j)];
                tuple[i * d + j] = l_a[(i, j)];
            }
        }
        self.combination_se(&single, &tuple)
    }

    /// `Sigma_P_alt - (Sigma_C - Sigma_a)` with entrywise standard errors
    /// that account for `Sigma_a` and `Sigma_P_alt` sharing one tuple sample.
    pub fn remark_gap(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.dim();
        let dd = d * d;
        let gap = &self.sigma_p_alt - (&self.sigma_c - &self.sigma_a);
        let se = DMatrix::from_fn(d, d, |i, j| {
            let mut single = vec![0.0; 2 * dd];
            let mut tuple = vec![0.0; 2 * dd];
            single[i * d + j] = -1.0;
            tuple[i * d + j] = 1.0;
            tuple[dd + i * d + j] = 1.0;
            self.combination_se(&single, &tuple)
        });
        (gap, se)
    }

    /// Standard error of `<a, (vec Sigma_C, vec Sigma)> + <b, (vec Sigma_a, vec Sigma_P_alt)>`.
    fn combination_se(&self, single: &[f64], tuple: &[f64]) -> f64 {
        let quad = |cov: &DMatrix<f64>, v: &[f64]| {
            let mut s = 0.0;
            for i in 0..v.len() {
                for j in 0..v.len() {
                    s += v[i] * cov[(i, j)] * v[j];
                }
            }
            s
        };
        (quad(&self.single_cov, single) + quad(&self.tuple_cov, tuple)).max(0.0).sqrt()
    }
}

fn matrix(d: usize, flat: &[f64]) -> DMatrix<f64> {
    symmetrize(&DMatrix::from_row_slice(d, d, flat))
}

fn se_matrix(d: usize, cov: &DMatrix<f64>, offset: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| cov[(offset + i * d + j, offset + i * d + j)].max(0.0).sqrt())
}

/// Expected number of jointly-at-risk tuples per batch below which a grid
/// point is dropped.
const MIN_TUPLES_PER_BATCH: f64 = 5.0;

/// Per-grid sums over jointly-at-risk tuples of one batch.
struct TupleSums {
    count: Vec<f64>,
    a: Vec<f64>,
    alt: Vec<f64>,
}

/// Groups the at-risk draws of `draws`, in draw order, into consecutive
/// `(m + 1)`-tuples at each grid point: iid samples from the joint law given
/// all members at risk.
fn tuple_pass(scenario: &ScenarioConfig, base: &Baselines, draws: &[Draw]) -> TupleSums {
    let d = scenario.dim();
    let dd = d * d;
    let m1 = scenario.m + 1;
    let grid = &base.grid;
    let g = grid.len();
    let beta = &scenario.beta;
    let inv_m1 = 1.0 / m1 as f64;
    let mut sums = TupleSums {
        count: vec![0.0; g],
        a: vec![0.0; g * dd],
        alt: vec![0.0; g * dd],
    };
    let mut active: Vec<usize> = (0..draws.len()).collect();
    let mut e = vec![0.0; m1];
    let mut centered = vec![0.0; m1 * d];
    let mut z = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut dz = vec![0.0; d];
    for k in 0..g {
        let t = grid[k];
        active.retain(|&i| draws[i].y >= t);
        let mu = &base.mu[k];
        for tuple in active.chunks_exact(m1) {
            v.iter_mut().for_each(|x| *x = 0.0);
            let mut total = 0.0;
            for (j, &i) in tuple.iter().enumerate() {
                draws[i].z_at(t, &mut z);
                e[j] = dot(beta, &z).exp();
                total += e[j];
                for c in 0..d {
                    let zc = z[c] - mu[c];
                    centered[j * d + c] = zc;
                    v[c] += zc * e[j];
                }
            }
            sums.count[k] += 1.0;
            add_outer(&mut sums.a[k * dd..(k + 1) * dd], &v, inv_m1 / total);
            for j in 0..m1 {
                for c in 0..d {
                    dz[c] = centered[j * d + c] - v[c] / total;
                }
                add_outer(&mut sums.alt[k * dd..(k + 1) * dd], &dz, inv_m1 * e[j]);
            }
        }
    }
    sums
}

/// `int p(t) E[f | all at risk] lambda0 dt`, for the two tuple integrands.
/// Grid points where `sums` has no tuple fall back to `pooled`.
fn integrate_tuples(sums: &TupleSums, pooled: Option<&TupleSums>, base: &Baselines, tw: &[f64], dd: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * dd];
    for (k, w) in tw.iter().enumerate() {
        let src = match (sums.count[k] > 0.0, pooled) {
            (true, _) => sums,
            (false, Some(p)) => p,
            (false, None) => continue,
        };
        let scale = w * base.at_risk[k] / src.count[k];
        for c in 0..dd {
            out[c] += scale * src.a[k * dd + c];
            out[dd + c] += scale * src.alt[k * dd + c];
        }
    }
    out
}

/// Monte Carlo evaluation of `Sigma_C`, `Sigma_a`, `Sigma_P` and `Sigma` by
/// trapezoid integration over `grid`. Two independent samples of `draws`
/// subjects are simulated: one for the single-subject expectations, one
/// grouped into jointly-at-risk tuples.
pub fn mc_sigma(scenario: &ScenarioConfig, grid: &[f64], draws: usize, seed: u64) -> Result<TheoryReport> {
    scenario.validate()?;
    check_grid(grid, scenario.tau)?;
    if draws < MIN_DRAWS {
        return Err(Error::invalid(format!("need at least {MIN_DRAWS} draws, got {draws}")));
    }
    let d = scenario.dim();
    let dd = d * d;
    let m1 = scenario.m + 1;

    let singles = simulate(scenario, draws, seed, purpose::THEORY_SINGLE);
    let at_risk = {
        let mut count = vec![0.0; grid.len()];
        for dr in &singles {
            count[..dr.horizon(grid)].iter_mut().for_each(|c| *c += 1.0);
        }
        count
    };
    let per_batch = draws as f64 / SE_BATCHES.min(draws) as f64;
    let keep = at_risk
        .iter()
        .position(|c| c / draws as f64 * per_batch / (m1 as f64) < MIN_TUPLES_PER_BATCH)
        .unwrap_or(grid.len());
    if keep < 2 {
        return Err(Error::invalid("too few subjects at risk to integrate over the grid"));
    }
    if keep < grid.len() {
        warn!(
            "grid truncated after t = {}: fewer than {MIN_TUPLES_PER_BATCH} expected {m1}-tuples at risk per batch",
            grid[keep - 1]
        );
    }
    let requested_end = grid[grid.len() - 1];
    let grid = &grid[..keep];
    let pass = single_pass(scenario, grid, &singles);
    drop(singles);
    let base = pass.base;
    let tw: Vec<f64> = trapezoid_weights(grid)
        .iter()
        .map(|w| w * scenario.baseline_hazard)
        .collect();

    let n_batch = |r: &std::ops::Range<usize>| r.len() as f64;
    let ranges = batch_ranges(draws);
    let mut single = MeanCov::new(2 * dd);
    let mut stacked = vec![0.0; 2 * dd];
    for ((p, w), r) in pass.plain.iter().zip(&pass.weighted).zip(&ranges) {
        p.integrated_covariance(&tw, n_batch(r), &mut stacked[..dd]);
        w.integrated_covariance(&tw, n_batch(r), &mut stacked[dd..]);
        single.add(&stacked);
    }
    let mut all_plain = GridSums::new(grid.len(), d);
    let mut all_weighted = GridSums::new(grid.len(), d);
    pass.plain.iter().for_each(|s| all_plain.merge(s));
    pass.weighted.iter().for_each(|s| all_weighted.merge(s));
    let mut sc = vec![0.0; dd];
    let mut sw = vec![0.0; dd];
    all_plain.integrated_covariance(&tw, draws as f64, &mut sc);
    all_weighted.integrated_covariance(&tw, draws as f64, &mut sw);

    let tuple_sample = simulate(scenario, draws, seed, purpose::THEORY_TUPLE);
    let batches: Vec<TupleSums> = ranges
        .iter()
        .map(|r| tuple_pass(scenario, &base, &tuple_sample[r.clone()]))
        .collect();
    let mut pooled = TupleSums {
        count: vec![0.0; grid.len()],
        a: vec![0.0; grid.len() * dd],
        alt: vec![0.0; grid.len() * dd],
    };
    for b in &batches {
        for (x, y) in pooled.count.iter_mut().zip(&b.count) {
            *x += y;
        }
        for (x, y) in pooled.a.iter_mut().zip(&b.a) {
            *x += y;
        }
        for (x, y) in pooled.alt.iter_mut().zip(&b.alt) {
            *x += y;
        }
    }
    let mut tuple = MeanCov::new(2 * dd);
    for b in &batches {
        tuple.add(&integrate_tuples(b, Some(&pooled), &base, &tw, dd));
    }
    let t_point = integrate_tuples(&pooled, None, &base, &tw, dd);

    let single_cov = single.cov_of_mean();
    let tuple_cov = tuple.cov_of_mean();
    let sigma_c = matrix(d, &sc);
    let sigma = matrix(d, &sw);
    let sigma_a = matrix(d, &t_point[..dd]);
    let sigma_p_alt = matrix(d, &t_point[dd..]);
    let se_c = se_matrix(d, &single_cov, 0);
    let se = se_matrix(d, &single_cov, dd);
    let se_a = se_matrix(d, &tuple_cov, 0);
    let se_p_alt = se_matrix(d, &tuple_cov, dd);
    let se_p = se_c.zip_map(&se_a, |a, b| (a * a + b * b).sqrt());

    Ok(TheoryReport {
        beta: scenario.beta.clone(),
        m: scenario.m,
        censoring: scenario.censoring.label().to_string(),
        baselines: base,
        requested_end,
        tuple_draws: draws,
        sigma_p: &sigma_c - &sigma_a,
        sigma_c,
        sigma_a,
        sigma_p_alt,
        sigma,
        se_c,
        se_a,
        se_p,
        se_p_alt,
        se,
        single_cov,
        tuple_cov,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Equality,
    Strict,
    Inconclusive,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Equality => "equality",
            Verdict::Strict => "strict",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropositionReport {
    /// Eigenvalues of `Sigma_P^{-1} - Sigma^{-1}`, ascending.
    pub eigenvalues: Vec<f64>,
    /// Delta-method standard errors of `eigenvalues`.
    pub eigenvalue_se: Vec<f64>,
    pub min_eigenvalue: f64,
    pub min_eigenvalue_se: f64,
    pub tol: Vec<f64>,
    pub verdict: Verdict,
}

fn spd_inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Conditioning(format!("{name} is not positive definite")))
}

/// Compares `Sigma_P^{-1}` with `Sigma^{-1}`. With `tol = None` each
/// eigenvalue is judged against three of its standard errors.
pub fn check_proposition(report: &TheoryReport, tol: Option<f64>) -> Result<PropositionReport> {
    let p_inv = spd_inverse(&report.sigma_p, "Sigma_P")?;
    let s_inv = spd_inverse(&report.sigma, "Sigma")?;
    let diff = symmetrize(&(&p_inv - &s_inv));
    let eig = nalgebra::SymmetricEigen::new(diff);
    let mut pairs: Vec<(f64, f64)> = (0..report.dim())
        .map(|k| {
            let v = eig.eigenvectors.column(k).into_owned();
            let a = &p_inv * &v;
            let c = &s_inv * &v;
            let aa = &a * a.transpose();
            let cc = &c * c.transpose();
            // d lambda = -a' dSigma_C a + a' dSigma_a a + c' dSigma c
            (eig.eigenvalues[k], report.linear_se(&(-&aa), &cc, &aa))
        })
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let eigenvalue_se: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let tol: Vec<f64> = eigenvalue_se.iter().map(|s| tol.unwrap_or(3.0 * s)).collect();
    let verdict = if eigenvalues.iter().zip(&tol).all(|(l, t)| l.abs() <= *t) {
        Verdict::Equality
    } else if eigenvalues[0] > tol[0] {
        Verdict::Strict
    } else {
        Verdict::Inconclusive
    };
    Ok(PropositionReport {
        min_eigenvalue: eigenvalues[0],
        min_eigenvalue_se: eigenvalue_se[0],
        eigenvalues,
        eigenvalue_se,
        tol,
        verdict,
    })
}

/// Asymptotic efficiency of the kernel-weighted estimator relative to
/// Thomas' for one design.
#[derive(Debug, Clone, PartialEq)]
pub struct AreRow {
    pub beta: Vec<f64>,
    pub m: usize,
    pub censoring: String,
    /// Generalized eigenvalues of `Sigma` relative to `Sigma_P`, ascending;
    /// the scalar `Sigma / Sigma_P` when `d = 1`.
    pub are: Vec<f64>,
    pub are_se: Vec<f64>,
}

pub fn are_row(report: &TheoryReport) -> Result<AreRow> {
    let chol = report
        .sigma_p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning("Sigma_P is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("Sigma_P factor is singular".into()))?;
    let reduced = symmetrize(&(&l_inv * &report.sigma * l_inv.transpose()));
    let eig = nalgebra::SymmetricEigen::new(reduced);
    let mut pairs: Vec<(f64, f64)> = (0..report.dim())
        .map(|k| {
            let rho = eig.eigenvalues[k];
            // v with Sigma v = rho Sigma_P v and v' Sigma_P v = 1
            let v = l_inv.transpose() * eig.eigenvectors.column(k);
            let vv = &v * v.transpose();
            // d rho = v' dSigma v - rho (v' dSigma_C v - v' dSigma_a v)
            let se = report.linear_se(&(&vv * -rho), &vv, &(&vv * rho));
            (rho, se)
        })
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(AreRow {
        beta: report.beta.clone(),
        m: report.m,
        censoring: report.censoring.clone(),
        are: pairs.iter().map(|p| p.0).collect(),
        are_se: pairs.iter().map(|p| p.1).collect(),
    })
}

/// [`mc_sigma`] and [`are_row`] over a list of designs.
pub fn are_report(scenarios: &[ScenarioConfig], grid: &[f64], draws: usize, seed: u64) -> Result<Vec<AreRow>> {
    scenarios
        .iter()
        .map(|sc| are_row(&mc_sigma(sc, grid, draws, seed)?))
        .collect()
}

/// Smallest eigenvalue of a symmetric matrix, for callers checking
/// positive definiteness of report matrices.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    min_eigenpair(m).0
}

/// All eigenvalues, ascending.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    sym_eigenvalues(m)
}
