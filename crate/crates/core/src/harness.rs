//! Monte Carlo study runner: replications of one design, their summaries,
//! and the full 18-block comparison against the published simulation table.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{cox_fit, proposed_fit, thomas_fit, CoxRiskSets, FitResult, ProposedOptions};
use crate::kernel::KernelConfig;
use crate::rng::{derive_seed, purpose};
use crate::sim::{generate_cohort, sample_ncc, Censoring, ScenarioConfig};

/// Share of non-convergent replications above which a summary is flagged.
pub const DEGENERATE_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Cox,
    Thomas,
    Proposed,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Cox, Estimator::Thomas, Estimator::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Cox => "cox",
            Estimator::Thomas => "thomas",
            Estimator::Proposed => "proposed",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HarnessOptions {
    pub kernel: KernelConfig,
    pub proposed: ProposedOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub beta_hat: Vec<f64>,
    pub vcov: DMatrix<f64>,
}

impl From<FitResult> for Estimate {
    fn from(f: FitResult) -> Self {
        Estimate {
            beta_hat: f.beta_hat,
            vcov: f.vcov,
        }
    }
}

/// Outcome of one simulated cohort: each estimator's fit, or the reason it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub cen_prop: f64,
    pub fits: [std::result::Result<Estimate, String>; 3],
}

impl ReplicationRecord {
    pub fn fit(&self, e: Estimator) -> std::result::Result<&Estimate, &str> {
        self.fits[e.index()].as_ref().map_err(String::as_str)
    }
}

/// Cohort seed of replication `rep`. It does not depend on the design, so
/// designs differing only in `m` share their cohorts.
pub fn cohort_seed(master_seed: u64, rep: usize) -> u64 {
    derive_seed(derive_seed(master_seed, purpose::REPLICATION, rep as u64), purpose::COHORT, 0)
}

pub fn sample_seed(master_seed: u64, rep: usize) -> u64 {
    derive_seed(derive_seed(master_seed, purpose::REPLICATION, rep as u64), purpose::SAMPLE, 0)
}

/// Simulates one cohort, fits Cox to it, samples controls and fits Thomas'
/// and the kernel-weighted estimator. Fit failures are recorded.
pub fn run_replication(
    scenario: &ScenarioConfig,
    rep: usize,
    master_seed: u64,
    options: &HarnessOptions,
) -> Result<ReplicationRecord> {
    let cohort = generate_cohort(scenario, scenario.n, cohort_seed(master_seed, rep))?;
    let cen_prop = cohort.censoring_proportion();
    let keep = |r: Result<FitResult>| r.map(Estimate::from).map_err(|e| e.to_string());
    let cox = keep(CoxRiskSets::from_cohort(&cohort).and_then(|rs| cox_fit(&rs, None)));
    let (thomas, proposed) = match sample_ncc(&cohort, scenario.m, sample_seed(master_seed, rep), scenario.shortfall) {
        Ok(ncc) => (
            keep(thomas_fit(&ncc, None)),
            keep(proposed_fit(&ncc, &options.kernel, &options.proposed).map(|p| p.fit)),
        ),
        Err(e) => (Err(e.to_string()), Err(e.to_string())),
    };
    Ok(ReplicationRecord {
        rep,
        cen_prop,
        fits: [cox, thomas, proposed],
    })
}

/// Runs replications `0..reps`, in order, on `threads` worker threads
/// (0 picks the default). Results do not depend on the thread count.
pub fn run_replications(
    scenario: &ScenarioConfig,
    reps: usize,
    master_seed: u64,
    threads: usize,
    options: &HarnessOptions,
) -> Result<Vec<ReplicationRecord>> {
    scenario.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|rep| run_replication(scenario, rep, master_seed, options))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    /// Mean of `beta_hat`, per component.
    pub ave_est: Vec<f64>,
    /// Sample variance of `beta_hat` with divisor `k - 1`, per component.
    pub emp_var: Vec<f64>,
    /// Mean of the estimated variances `diag(vcov)`.
    pub est_var: Vec<f64>,
    /// More than [`DEGENERATE_FAILURE_RATE`] of the replications failed.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub beta: Vec<f64>,
    pub m: usize,
    pub censoring: String,
    pub reps: usize,
    pub seed: u64,
    pub cen_prop: f64,
    pub estimators: Vec<EstimatorSummary>,
}

impl ScenarioSummary {
    pub fn get(&self, e: Estimator) -> &EstimatorSummary {
        &self.estimators[e.index()]
    }
}

/// Short identifier of a design, e.g. `b1_m2_fixed`.
pub fn scenario_id(scenario: &ScenarioConfig) -> String {
    let beta: Vec<String> = scenario.beta.iter().map(|b| format!("{b}")).collect();
    format!("b{}_m{}_{}", beta.join(":"), scenario.m, scenario.censoring.label())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Moments over the successful replications of each estimator.
pub fn summarize(scenario: &ScenarioConfig, records: &[ReplicationRecord], seed: u64) -> ScenarioSummary {
    let d = scenario.dim();
    let estimators = Estimator::ALL
        .iter()
        .map(|&e| {
            let ok: Vec<&Estimate> = records.iter().filter_map(|r| r.fit(e).ok()).collect();
            let failures = records.len() - ok.len();
            let comp = |f: &dyn Fn(&Estimate) -> f64| ok.iter().map(|x| f(x)).collect::<Vec<f64>>();
            let ave_est = (0..d).map(|c| mean(&comp(&|x| x.beta_hat[c]))).collect();
            let emp_var = (0..d).map(|c| sample_variance(&comp(&|x| x.beta_hat[c]))).collect();
            let est_var = (0..d).map(|c| mean(&comp(&|x| x.vcov[(c, c)]))).collect();
            if failures > 0 {
                log::info!("{}: {failures} of {} {} fits failed", scenario_id(scenario), records.len(), e.name());
            }
            EstimatorSummary {
                estimator: e,
                successes: ok.len(),
                failures,
                ave_est,
                emp_var,
                est_var,
                degenerate: failures as f64 > DEGENERATE_FAILURE_RATE * records.len() as f64,
            }
        })
        .collect();
    ScenarioSummary {
        scenario: scenario_id(scenario),
        beta: scenario.beta.clone(),
        m: scenario.m,
        censoring: scenario.censoring.label().to_string(),
        reps: records.len(),
        seed,
        cen_prop: mean(&records.iter().map(|r| r.cen_prop).collect::<Vec<_>>()),
        estimators,
    }
}

pub fn run_scenario(
    scenario: &ScenarioConfig,
    reps: usize,
    master_seed: u64,
    threads: usize,
    options: &HarnessOptions,
) -> Result<ScenarioSummary> {
    if reps < 2 {
        return Err(Error::invalid("need at least 2 replications"));
    }
    let records = run_replications(scenario, reps, master_seed, threads, options)?;
    Ok(summarize(scenario, &records, master_seed))
}

/// Footnote of the published simulation table.
pub const TABLE1_FOOTNOTE: &str = "\u{201c}Ave Est\u{201d} and \u{201c}Emp Var\u{201d} stand for the averages and empirical variances of the estimates over 2000 simulations. \u{201c}Est Var\u{201d} stands for the average of the estimated variances over 2000 simulations. \u{201c}Cen Prop\u{201d} stands for the proportion of censoring. \u{201c}Cox,\u{201d} \u{201c}Thomas\u{201d} and \u{201c}Proposed\u{201d} refer, respectively, to the Cox estimate based on full cohort data, Thomas\u{2019} estimate and the proposed estimates based on time-restricted n-c-c data.";

/// One published cell triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCell {
    pub ave_est: f64,
    pub emp_var: f64,
    pub est_var: f64,
}

/// `(censoring, beta, m, estimator, ave_est, emp_var, est_var)`; `m = 0`
/// marks the full-cohort row shared by all `m`.
type Row = (&'static str, u8, u8, Estimator, f64, f64, f64);

#[rustfmt::skip]
const TABLE1: &[Row] = &[
    ("fixed", 0, 0, Estimator::Cox, -0.004, 0.013, 0.012),
    ("fixed", 1, 0, Estimator::Cox, 1.012, 0.030, 0.029),
    ("fixed", 2, 0, Estimator::Cox, 2.025, 0.067, 0.063),
    ("fixed", 0, 1, Estimator::Thomas, -0.003, 0.026, 0.025),
    ("fixed", 1, 1, Estimator::Thomas, 1.039, 0.089, 0.087),
    ("fixed", 2, 1, Estimator::Thomas, 2.127, 0.316, 0.299),
    ("fixed", 0, 1, Estimator::Proposed, -0.004, 0.025, 0.027),
    ("fixed", 1, 1, Estimator::Proposed, 0.989, 0.065, 0.081),
    ("fixed", 2, 1, Estimator::Proposed, 1.962, 0.162, 0.197),
    ("fixed", 0, 2, Estimator::Thomas, -0.003, 0.019, 0.018),
    ("fixed", 1, 2, Estimator::Thomas, 1.034, 0.059, 0.058),
    ("fixed", 2, 2, Estimator::Thomas, 2.096, 0.189, 0.174),
    ("fixed", 0, 2, Estimator::Proposed, -0.003, 0.019, 0.019),
    ("fixed", 1, 2, Estimator::Proposed, 1.031, 0.049, 0.056),
    ("fixed", 2, 2, Estimator::Proposed, 2.028, 0.123, 0.140),
    ("fixed", 0, 3, Estimator::Thomas, -0.001, 0.017, 0.016),
    ("fixed", 1, 3, Estimator::Thomas, 1.034, 0.054, 0.048),
    ("fixed", 2, 3, Estimator::Thomas, 2.073, 0.142, 0.134),
    ("fixed", 0, 3, Estimator::Proposed, -0.001, 0.017, 0.017),
    ("fixed", 1, 3, Estimator::Proposed, 1.039, 0.047, 0.048),
    ("fixed", 2, 3, Estimator::Proposed, 2.041, 0.106, 0.116),
    ("random", 0, 0, Estimator::Cox, -0.007, 0.059, 0.056),
    ("random", 1, 0, Estimator::Cox, 1.009, 0.080, 0.079),
    ("random", 2, 0, Estimator::Cox, 2.018, 0.124, 0.121),
    ("random", 0, 1, Estimator::Thomas, 0.009, 0.138, 0.123),
    ("random", 1, 1, Estimator::Thomas, 1.106, 0.336, 0.301),
    ("random", 2, 1, Estimator::Thomas, 2.231, 0.845, 0.880),
    ("random", 0, 1, Estimator::Proposed, -0.001, 0.126, 0.147),
    ("random", 1, 1, Estimator::Proposed, 0.991, 0.195, 0.276),
    ("random", 2, 1, Estimator::Proposed, 1.963, 0.376, 0.453),
    ("random", 0, 2, Estimator::Thomas, -0.011, 0.094, 0.087),
    ("random", 1, 2, Estimator::Thomas, 1.063, 0.189, 0.176),
    ("random", 2, 2, Estimator::Thomas, 2.159, 0.481, 0.435),
    ("random", 0, 2, Estimator::Proposed, -0.013, 0.095, 0.095),
    ("random", 1, 2, Estimator::Proposed, 1.031, 0.145, 0.176),
    ("random", 2, 2, Estimator::Proposed, 2.024, 0.256, 0.300),
    ("random", 0, 3, Estimator::Thomas, -0.003, 0.082, 0.078),
    ("random", 1, 3, Estimator::Thomas, 1.069, 0.154, 0.144),
    ("random", 2, 3, Estimator::Thomas, 2.137, 0.370, 0.334),
    ("random", 0, 3, Estimator::Proposed, -0.006, 0.082, 0.082),
    ("random", 1, 3, Estimator::Proposed, 1.057, 0.133, 0.147),
    ("random", 2, 3, Estimator::Proposed, 2.043, 0.205, 0.243),
];

/// `(censoring, beta, cen_prop)`.
const TABLE1_CEN_PROP: &[(&str, u8, f64)] = &[
    ("fixed", 0, 0.368),
    ("fixed", 1, 0.603),
    ("fixed", 2, 0.667),
    ("random", 0, 0.771),
    ("random", 1, 0.849),
    ("random", 2, 0.843),
];

/// The published simulation table.
pub struct Table1Reference;

impl Table1Reference {
    pub fn cell(censoring: &str, beta: u8, m: usize, estimator: Estimator) -> Option<ReferenceCell> {
        let m_key = if estimator == Estimator::Cox { 0 } else { m as u8 };
        TABLE1
            .iter()
            .find(|r| r.0 == censoring && r.1 == beta && r.2 == m_key && r.3 == estimator)
            .map(|r| ReferenceCell {
                ave_est: r.4,
                emp_var: r.5,
                est_var: r.6,
            })
    }

    pub fn cen_prop(censoring: &str, beta: u8) -> Option<f64> {
        TABLE1_CEN_PROP
            .iter()
            .find(|r| r.0 == censoring && r.1 == beta)
            .map(|r| r.2)
    }

    pub fn footnote() -> &'static str {
        TABLE1_FOOTNOTE
    }
}

/// The 18 designs of the published table, in `(censoring, beta, m)` order.
pub fn table1_scenarios() -> Vec<ScenarioConfig> {
    let mut out = Vec::with_capacity(18);
    for censoring in [Censoring::fixed(1.0), Censoring::random_abs_z(0.25, 1.0)] {
        for beta in [0.0, 1.0, 2.0] {
            for m in 1..=3 {
                out.push(ScenarioConfig::table1(beta, m, censoring));
            }
        }
    }
    out
}

/// One design's summary beside the published numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1Block {
    pub beta: u8,
    pub m: usize,
    pub censoring: String,
    pub summary: ScenarioSummary,
    pub paper_cen_prop: f64,
    pub paper: [ReferenceCell; 3],
}

impl Table1Block {
    pub fn paper_cell(&self, e: Estimator) -> ReferenceCell {
        self.paper[e.index()]
    }

    /// `emp_var(a) / emp_var(b)` for the first component.
    pub fn var_ratio(&self, a: Estimator, b: Estimator) -> f64 {
        self.summary.get(a).emp_var[0] / self.summary.get(b).emp_var[0]
    }

    pub fn paper_var_ratio(&self, a: Estimator, b: Estimator) -> f64 {
        self.paper_cell(a).emp_var / self.paper_cell(b).emp_var
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Report {
    pub reps: usize,
    pub seed: u64,
    pub blocks: Vec<Table1Block>,
}

impl Table1Report {
    pub fn block(&self, censoring: &str, beta: u8, m: usize) -> Option<&Table1Block> {
        self.blocks
            .iter()
            .find(|b| b.censoring == censoring && b.beta == beta && b.m == m)
    }
}

/// Runs all 18 designs with `reps` replications each.
pub fn replicate_table1(master_seed: u64, reps: usize, threads: usize, options: &HarnessOptions) -> Result<Table1Report> {
    let mut blocks = Vec::with_capacity(18);
    for sc in table1_scenarios() {
        let beta = sc.beta[0] as u8;
        let label = sc.censoring.label();
        log::info!("running {} ({reps} replications)", scenario_id(&sc));
        let summary = run_scenario(&sc, reps, master_seed, threads, options)?;
        let cell = |e| Table1Reference::cell(label, beta, sc.m, e).expect("table covers every design");
        blocks.push(Table1Block {
            beta,
            m: sc.m,
            censoring: label.to_string(),
            paper_cen_prop: Table1Reference::cen_prop(label, beta).expect("table covers every design"),
            paper: [cell(Estimator::Cox), cell(Estimator::Thomas), cell(Estimator::Proposed)],
            summary,
        });
    }
    Ok(Table1Report {
        reps,
        seed: master_seed,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ShortfallPolicy;

    #[test]
    fn reference_table_is_complete() {
        assert_eq!(TABLE1.len(), 42);
        for sc in table1_scenarios() {
            let label = sc.censoring.label();
            for e in Estimator::ALL {
                assert!(Table1Reference::cell(label, sc.beta[0] as u8, sc.m, e).is_some());
            }
            assert!(Table1Reference::cen_prop(label, sc.beta[0] as u8).is_some());
        }
        let c = Table1Reference::cell("fixed", 1, 1, Estimator::Proposed).unwrap();
        assert_eq!((c.ave_est, c.emp_var, c.est_var), (0.989, 0.065, 0.081));
    }

    #[test]
    fn replication_is_deterministic() {
        let sc = ScenarioConfig::table1(1.0, 2, Censoring::fixed(1.0));
        let opts = HarnessOptions::default();
        let a = run_replication(&sc, 4, 99, &opts).unwrap();
        let b = run_replication(&sc, 4, 99, &opts).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, run_replication(&sc, 5, 99, &opts).unwrap());
    }

    #[test]
    fn cohorts_shared_across_m() {
        let opts = HarnessOptions::default();
        let a = run_replication(&ScenarioConfig::table1(1.0, 1, Censoring::fixed(1.0)), 0, 3, &opts).unwrap();
        let b = run_replication(&ScenarioConfig::table1(1.0, 3, Censoring::fixed(1.0)), 0, 3, &opts).unwrap();
        assert_eq!(a.fit(Estimator::Cox), b.fit(Estimator::Cox));
        assert_eq!(a.cen_prop, b.cen_prop);
    }

    #[test]
    fn null_design_thomas_and_proposed_close() {
        let sc = ScenarioConfig::table1(0.0, 3, Censoring::fixed(1.0));
        let r = run_replication(&sc, 0, 17, &HarnessOptions::default()).unwrap();
        let t = r.fit(Estimator::Thomas).unwrap().beta_hat[0];
        let p = r.fit(Estimator::Proposed).unwrap().beta_hat[0];
        assert!((t - p).abs() < 0.1, "{t} vs {p}");
    }

    #[test]
    fn full_risk_set_sampling_reproduces_cox() {
        let mut sc = ScenarioConfig::table1(1.0, 39, Censoring::fixed(1.0));
        sc.n = 40;
        sc.shortfall = ShortfallPolicy::Adapt;
        let r = run_replication(&sc, 0, 8, &HarnessOptions::default()).unwrap();
        let c = r.fit(Estimator::Cox).unwrap();
        let t = r.fit(Estimator::Thomas).unwrap();
        assert!((c.beta_hat[0] - t.beta_hat[0]).abs() <= 1e-9);
        assert!((c.vcov[(0, 0)] - t.vcov[(0, 0)]).abs() <= 1e-9);
    }

    #[test]
    fn two_replication_variance_by_hand() {
        let sc = ScenarioConfig::table1(1.0, 1, Censoring::fixed(1.0));
        let opts = HarnessOptions::default();
        let records = run_replications(&sc, 2, 5, 1, &opts).unwrap();
        let s = summarize(&sc, &records, 5);
        for e in Estimator::ALL {
            let x0 = records[0].fit(e).unwrap().beta_hat[0];
            let x1 = records[1].fit(e).unwrap().beta_hat[0];
            let by_hand = (x0 - x1) * (x0 - x1) / 2.0;
            assert!((s.get(e).emp_var[0] - by_hand).abs() <= 1e-15 * by_hand.max(1.0));
            assert_eq!(s.get(e).successes + s.get(e).failures, 2);
        }
        assert!(run_scenario(&sc, 1, 5, 1, &opts).is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let sc = ScenarioConfig::table1(2.0, 1, Censoring::random_abs_z(0.25, 1.0));
        let opts = HarnessOptions::default();
        let one = run_replications(&sc, 12, 21, 1, &opts).unwrap();
        let four = run_replications(&sc, 12, 21, 4, &opts).unwrap();
        assert_eq!(one, four);
        assert_eq!(summarize(&sc, &one, 21), summarize(&sc, &four, 21));
    }
}
