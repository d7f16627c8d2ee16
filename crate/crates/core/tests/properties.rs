//! Randomized invariants of the estimators, sampler, serialization and harness.

use nalgebra::DMatrix;
use proptest::prelude::*;

use ncc_core::estimators::{
    compute_s, compute_weights, cox_score_info, proposed_score_deriv, thomas_score_info, CoxRiskSets, ProposedOptions,
};
use ncc_core::harness::{run_replications, summarize, HarnessOptions};
use ncc_core::io;
use ncc_core::model::validate_ncc;
use ncc_core::theory::min_eigenvalue;
use ncc_core::{
    cox_fit, generate_cohort, proposed_fit, sample_ncc, thomas_fit, Censoring, Cohort, CovariatePath, KernelConfig,
    KernelShape, NccDataset, ScenarioConfig, ShortfallPolicy, Subject,
};

#[derive(Debug, Clone)]
struct Design {
    beta: Vec<f64>,
    m: usize,
    random: bool,
    n: usize,
    seed: u64,
}

impl Design {
    fn scenario(&self) -> ScenarioConfig {
        let c = if self.random {
            Censoring::random_abs_z(0.25, 1.0)
        } else {
            Censoring::fixed(1.0)
        };
        let mut sc = ScenarioConfig::table1(0.0, self.m, c);
        sc.beta = self.beta.clone();
        sc.n = self.n;
        sc
    }

    fn data(&self) -> (Cohort, NccDataset) {
        let sc = self.scenario();
        let cohort = generate_cohort(&sc, sc.n, self.seed).unwrap();
        let ncc = sample_ncc(&cohort, self.m, self.seed ^ 0x9e37, ShortfallPolicy::Drop).unwrap();
        (cohort, ncc)
    }
}

fn design(max_dim: usize) -> impl Strategy<Value = Design> {
    (
        prop::collection::vec(-1.0f64..2.0, 1..=max_dim),
        1usize..=3,
        any::<bool>(),
        80usize..200,
        any::<u64>(),
    )
        .prop_map(|(beta, m, random, n, seed)| Design {
            beta,
            m,
            random,
            n,
            seed,
        })
}

fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, rel: f64) -> bool {
    (a - b).amax() <= rel * b.amax().max(1e-300)
}

fn shifted_cohort(cohort: &Cohort, c: &[f64]) -> Cohort {
    let subjects = cohort
        .subjects()
        .iter()
        .map(|s| {
            let path = match &s.path {
                CovariatePath::LinearInTime { slope, intercept } => CovariatePath::LinearInTime {
                    slope: slope.clone(),
                    intercept: intercept.iter().zip(c).map(|(a, b)| a + b).collect(),
                },
                other => panic!("unexpected path {other:?}"),
            };
            Subject { path, ..s.clone() }
        })
        .collect();
    Cohort::new(subjects, cohort.tau()).unwrap()
}

fn default_kernel(n: usize) -> ncc_core::Kernel {
    KernelConfig::default().resolve(n).unwrap()
}

/// Central differences of `score` at `beta`, column by column.
fn fd_jacobian(beta: &[f64], score: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let d = beta.len();
    let mut j = DMatrix::zeros(d, d);
    for k in 0..d {
        let h = 1e-5;
        let mut p = beta.to_vec();
        let mut q = beta.to_vec();
        p[k] += h;
        q[k] -= h;
        let (sp, sq) = (score(&p), score(&q));
        for i in 0..d {
            j[(i, k)] = (sp[i] - sq[i]) / (2.0 * h);
        }
    }
    j
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn score_vanishes_at_every_reported_root(d in design(2)) {
        let (cohort, ncc) = d.data();
        let rs = CoxRiskSets::from_cohort(&cohort).unwrap();
        if let Ok(f) = cox_fit(&rs, None) {
            prop_assert!(f.final_score_norm <= 1e-9);
            prop_assert!(sup(&cox_score_info(&rs, &f.beta_hat).unwrap().0) <= 1e-9);
        }
        if let Ok(f) = thomas_fit(&ncc, None) {
            prop_assert!(sup(&thomas_score_info(&ncc, &f.beta_hat).unwrap().0) <= 1e-9);
        }
        if let Ok(p) = proposed_fit(&ncc, &KernelConfig::default(), &ProposedOptions::default()) {
            let (s, _) = proposed_score_deriv(&ncc, &p.fit.beta_hat, &p.weights, &default_kernel(ncc.n())).unwrap();
            prop_assert!(p.fit.final_score_norm <= 1e-9);
            prop_assert!(sup(&s) <= 1e-9);
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences(d in design(2), probe in prop::collection::vec(-1.5f64..2.5, 2)) {
        let (cohort, ncc) = d.data();
        let beta = &probe[..d.beta.len()];
        let rs = CoxRiskSets::from_cohort(&cohort).unwrap();
        let info = cox_score_info(&rs, beta).unwrap().1;
        let fd = fd_jacobian(beta, |b| cox_score_info(&rs, b).unwrap().0);
        prop_assert!(rel_close(&-fd, &info, 1e-6));

        let info = thomas_score_info(&ncc, beta).unwrap().1;
        let fd = fd_jacobian(beta, |b| thomas_score_info(&ncc, b).unwrap().0);
        prop_assert!(rel_close(&-fd, &info, 1e-6));

        for shape in [KernelShape::Indicator, KernelShape::Epanechnikov] {
            let kernel = KernelConfig { shape, ..KernelConfig::default() }.resolve(ncc.n()).unwrap();
            let w = compute_weights(&ncc, &d.beta, &kernel).unwrap();
            let deriv = proposed_score_deriv(&ncc, beta, &w, &kernel).unwrap().1;
            let fd = fd_jacobian(beta, |b| proposed_score_deriv(&ncc, b, &w, &kernel).unwrap().0);
            prop_assert!(rel_close(&fd, &deriv, 1e-6));
        }
    }

    #[test]
    fn minus_derivative_is_psd(d in design(2), probes in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 10)) {
        let (cohort, ncc) = d.data();
        let rs = CoxRiskSets::from_cohort(&cohort).unwrap();
        let kernel = default_kernel(ncc.n());
        let w = compute_weights(&ncc, &d.beta, &kernel).unwrap();
        for probe in &probes {
            let beta = &probe[..d.beta.len()];
            let mats = [
                cox_score_info(&rs, beta).unwrap().1,
                thomas_score_info(&ncc, beta).unwrap().1,
                -proposed_score_deriv(&ncc, beta, &w, &kernel).unwrap().1,
            ];
            for m in mats {
                prop_assert!(min_eigenvalue(&m) >= -1e-10 * m.amax().max(1.0));
            }
        }
    }

    #[test]
    fn weights_in_unit_interval(d in design(2), beta_ref in prop::collection::vec(-2.0f64..2.0, 2)) {
        let (_, ncc) = d.data();
        let w = compute_weights(&ncc, &beta_ref[..d.beta.len()], &default_kernel(ncc.n())).unwrap();
        prop_assert!(w.bhat.iter().all(|&b| b > 0.0 && b.is_finite()));
        prop_assert!(w.all_weights().all(|x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn covariate_shift_leaves_estimates_unchanged(d in design(2), shift in prop::collection::vec(-3.0f64..3.0, 2)) {
        let c = &shift[..d.beta.len()];
        let (cohort, ncc) = d.data();
        let moved = ncc.shifted(c);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-8);

        let rs = CoxRiskSets::from_cohort(&cohort).unwrap();
        let rs_moved = CoxRiskSets::from_cohort(&shifted_cohort(&cohort, c)).unwrap();
        if let (Ok(a), Ok(b)) = (cox_fit(&rs, None), cox_fit(&rs_moved, None)) {
            prop_assert!(close(&a.beta_hat, &b.beta_hat));
        }
        if let (Ok(a), Ok(b)) = (thomas_fit(&ncc, None), thomas_fit(&moved, None)) {
            prop_assert!(close(&a.beta_hat, &b.beta_hat));
        }
        let opts = ProposedOptions::default();
        if let (Ok(a), Ok(b)) = (proposed_fit(&ncc, &KernelConfig::default(), &opts), proposed_fit(&moved, &KernelConfig::default(), &opts)) {
            prop_assert!(close(&a.fit.beta_hat, &b.fit.beta_hat));
            // same reference: b_hat scales by exp(beta_ref'c), weights do not move
            let kernel = default_kernel(ncc.n());
            let wa = compute_weights(&ncc, &a.weights.beta_ref, &kernel).unwrap();
            let wb = compute_weights(&moved, &a.weights.beta_ref, &kernel).unwrap();
            let factor = a.weights.beta_ref.iter().zip(c).map(|(x, y)| x * y).sum::<f64>().exp();
            for (x, y) in wa.bhat.iter().zip(&wb.bhat) {
                prop_assert!((x * factor - y).abs() <= 1e-9 * y);
            }
            for (x, y) in wa.all_weights().zip(wb.all_weights()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn kernel_height_cancels(d in design(1), height in 0.01f64..100.0) {
        let (_, ncc) = d.data();
        let base = KernelConfig { shape: KernelShape::Epanechnikov, ..KernelConfig::default() };
        let tall = KernelConfig { height, ..base };
        let (k1, k2) = (base.resolve(ncc.n()).unwrap(), tall.resolve(ncc.n()).unwrap());
        let w1 = compute_weights(&ncc, &d.beta, &k1).unwrap();
        let w2 = compute_weights(&ncc, &d.beta, &k2).unwrap();
        for (a, b) in w1.bhat.iter().zip(&w2.bhat) {
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }
        for t in ncc.times().step_by(5) {
            let r1 = compute_s(&ncc, t, &d.beta, &w1, &k1).unwrap().ratio();
            let r2 = compute_s(&ncc, t, &d.beta, &w2, &k2).unwrap().ratio();
            prop_assert!((r1[0] - r2[0]).abs() <= 1e-12 * (1.0 + r1[0].abs()));
        }
        let opts = ProposedOptions::default();
        if let (Ok(a), Ok(b)) = (proposed_fit(&ncc, &base, &opts), proposed_fit(&ncc, &tall, &opts)) {
            prop_assert!((a.fit.beta_hat[0] - b.fit.beta_hat[0]).abs() <= 1e-10);
        }
    }

    #[test]
    fn reordering_changes_nothing(d in design(1)) {
        let (_, ncc) = d.data();
        let mut records: Vec<_> = ncc.records().to_vec();
        records.reverse();
        for r in &mut records {
            r.controls.reverse();
        }
        let perm = NccDataset::new(records, ncc.n(), ncc.m(), ncc.tau(), ncc.policy()).unwrap();
        let opts = ProposedOptions::default();
        if let (Ok(a), Ok(b)) = (proposed_fit(&ncc, &KernelConfig::default(), &opts), proposed_fit(&perm, &KernelConfig::default(), &opts)) {
            prop_assert!((a.fit.beta_hat[0] - b.fit.beta_hat[0]).abs() <= 1e-12);
            prop_assert!((a.fit.vcov[(0, 0)] - b.fit.vcov[(0, 0)]).abs() <= 1e-12 * a.fit.vcov[(0, 0)]);
        }
        if let (Ok(a), Ok(b)) = (thomas_fit(&ncc, None), thomas_fit(&perm, None)) {
            prop_assert!((a.beta_hat[0] - b.beta_hat[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_risk_set_sampling_is_cox(beta in -1.0f64..2.0, random in any::<bool>(), n in 20usize..60, seed in any::<u64>()) {
        let d = Design { beta: vec![beta], m: n - 1, random, n, seed };
        let sc = d.scenario();
        let cohort = generate_cohort(&sc, n, seed).unwrap();
        let ncc = sample_ncc(&cohort, n - 1, seed, ShortfallPolicy::Adapt).unwrap();
        let rs = CoxRiskSets::from_cohort(&cohort).unwrap();
        for probe in [-1.0, 0.0, 0.7] {
            let (s1, i1) = cox_score_info(&rs, &[probe]).unwrap();
            let (s2, i2) = thomas_score_info(&ncc, &[probe]).unwrap();
            prop_assert!((s1[0] - s2[0]).abs() <= 1e-9 && (i1[(0, 0)] - i2[(0, 0)]).abs() <= 1e-9);
        }
        if let (Ok(c), Ok(t)) = (cox_fit(&rs, None), thomas_fit(&ncc, None)) {
            prop_assert!((c.beta_hat[0] - t.beta_hat[0]).abs() <= 1e-9);
            prop_assert!((c.vcov[(0, 0)] - t.vcov[(0, 0)]).abs() <= 1e-9);
        }
    }

    #[test]
    fn sampled_data_is_valid(d in design(2), adapt in any::<bool>()) {
        let sc = d.scenario();
        let cohort = generate_cohort(&sc, sc.n, d.seed).unwrap();
        let policy = if adapt { ShortfallPolicy::Adapt } else { ShortfallPolicy::Drop };
        let ncc = sample_ncc(&cohort, d.m, d.seed, policy).unwrap();
        prop_assert!(validate_ncc(&ncc).passed());
        for r in ncc.records() {
            prop_assert!(r.controls.iter().all(|c| c.id != r.case_id));
        }
        // one record per failure with at least one (drop: m) other subject at risk
        let ys: Vec<f64> = cohort.subjects().iter().map(|s| s.y).collect();
        let need = if adapt { 1 } else { d.m };
        let expected = cohort
            .subjects()
            .iter()
            .filter(|s| s.delta && ys.iter().filter(|&&y| y >= s.y).count() > need)
            .count();
        prop_assert_eq!(ncc.len(), expected);
        for s in cohort.subjects() {
            for k in 0..=1000 {
                let t = k as f64 / 1000.0;
                let z = s.path.eval(t);
                prop_assert!(z.iter().all(|x| x.abs() <= 5.0));
                prop_assert_eq!(z, s.path.eval(t));
            }
        }
    }

    #[test]
    fn serialization_round_trips(d in design(2)) {
        let dir = tempfile::tempdir().unwrap();
        let sc = d.scenario();
        prop_assert_eq!(io::parse_config(&io::format_config(&sc)).unwrap(), sc.clone());
        let (cohort, ncc) = d.data();
        let pc = dir.path().join("cohort.csv");
        io::write_cohort(&pc, &cohort, &sc.covariate_law).unwrap();
        prop_assert_eq!(io::read_cohort(&pc, &sc.covariate_law, sc.tau).unwrap(), cohort);
        let pn = dir.path().join("ncc.csv");
        io::write_ncc(&pn, &ncc).unwrap();
        prop_assert_eq!(io::read_ncc(&pn, ncc.n(), Some(ncc.m()), ncc.tau()).unwrap(), ncc);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn parallel_runs_are_deterministic(d in design(1), threads in 2usize..5) {
        let sc = d.scenario();
        let opts = HarnessOptions::default();
        let serial = run_replications(&sc, 6, d.seed, 1, &opts).unwrap();
        let parallel = run_replications(&sc, 6, d.seed, threads, &opts).unwrap();
        prop_assert_eq!(&serial, &parallel);
        prop_assert_eq!(summarize(&sc, &serial, d.seed), summarize(&sc, &parallel, d.seed));
    }
}
