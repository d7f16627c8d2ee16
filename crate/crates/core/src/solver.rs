//! Damped Newton iteration for monotone estimating equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, NonConvergence};
use crate::linalg::{rcond, sup_norm};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Sup-norm threshold on the score at the root.
    pub tol: f64,
    pub max_iter: usize,
    /// Maximum number of step halvings per iteration.
    pub damping: usize,
    /// Largest Newton correction (sup-norm, relative to `1 + |x|`) still
    /// accepted at a root. Diverging iterates on separable data drive the
    /// score to zero while the corrections stay of order one.
    pub step_tol: f64,
    pub initial: Vec<f64>,
}

impl SolverOptions {
    pub fn starting_at(initial: Vec<f64>) -> Self {
        SolverOptions {
            initial,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), Error> {
        if !(self.tol > 0.0) || self.max_iter == 0 || self.initial.is_empty() {
            return Err(Error::invalid("solver needs tol > 0, max_iter >= 1 and a non-empty start"));
        }
        Ok(())
    }
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-9,
            max_iter: 50,
            damping: 30,
            step_tol: 1e-6,
            initial: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub root: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub score: Vec<f64>,
    pub jacobian: DMatrix<f64>,
    /// Accepted iterates after the starting point.
    pub trace: Vec<Vec<f64>>,
}

impl NewtonOutcome {
    pub fn score_norm(&self) -> f64 {
        sup_norm(&self.score)
    }
}

/// Relative reciprocal condition below which a Jacobian counts as singular.
const SINGULAR_RCOND: f64 = 1e-13;
/// Smallest singular value of the Jacobian at a root, relative to the largest
/// at the start, below which the root is rejected. On separable data the
/// score underflows to exactly zero while the information vanishes.
const VANISHING_INFORMATION: f64 = 1e-10;

fn newton_step(jac: &DMatrix<f64>, score: &[f64]) -> Option<Vec<f64>> {
    if rcond(jac) < SINGULAR_RCOND {
        return None;
    }
    let rhs = DVector::from_column_slice(score);
    jac.clone().lu().solve(&rhs).map(|s| s.iter().map(|v| -v).collect())
}

fn singular_error(jac: &DMatrix<f64>, at: &[f64], iterations: usize, score: &[f64]) -> Error {
    let reason = if jac.iter().all(|v| v.abs() < 1e-300) {
        NonConvergence::NoInformation
    } else {
        NonConvergence::SingularInformation
    };
    Error::NonConvergence {
        reason,
        last: at.to_vec(),
        iterations,
        score_norm: sup_norm(score),
    }
}

/// Newton iteration with step halving on a jointly evaluated score and
/// Jacobian. Converges when `|score|_inf <= tol` and the next Newton
/// correction is negligible.
pub fn newton_solve<F>(mut eval: F, options: &SolverOptions) -> Result<NewtonOutcome, Error>
where
    F: FnMut(&[f64]) -> (Vec<f64>, DMatrix<f64>),
{
    options.validate()?;
    let mut x = options.initial.clone();
    let (mut score, mut jac) = eval(&x);
    let mut norm = sup_norm(&score);
    let mut trace = Vec::new();
    let info_scale = jac.singular_values().max();

    for iter in 0..=options.max_iter {
        if !norm.is_finite() {
            return Err(Error::NonConvergence {
                reason: NonConvergence::Stalled,
                last: x,
                iterations: iter,
                score_norm: norm,
            });
        }
        let Some(step) = newton_step(&jac, &score) else {
            return Err(singular_error(&jac, &x, iter, &score));
        };
        let scale = 1.0 + sup_norm(&x);
        if norm <= options.tol && sup_norm(&step) <= options.step_tol * scale {
            if jac.singular_values().min() < VANISHING_INFORMATION * info_scale {
                return Err(Error::NonConvergence {
                    reason: NonConvergence::SingularInformation,
                    last: x,
                    iterations: iter,
                    score_norm: norm,
                });
            }
            return Ok(NewtonOutcome {
                root: x,
                iterations: iter,
                converged: true,
                score,
                jacobian: jac,
                trace,
            });
        }
        if iter == options.max_iter {
            break;
        }

        let mut factor = 1.0;
        let mut accepted = false;
        for _ in 0..=options.damping {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + factor * s).collect();
            let (s_new, j_new) = eval(&cand);
            let n_new = sup_norm(&s_new);
            if n_new < norm || (n_new <= options.tol && n_new <= norm) {
                x = cand;
                score = s_new;
                jac = j_new;
                norm = n_new;
                accepted = true;
                break;
            }
            factor *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                reason: NonConvergence::Stalled,
                last: x,
                iterations: iter,
                score_norm: norm,
            });
        }
        trace.push(x.clone());
    }
    Err(Error::NonConvergence {
        reason: NonConvergence::MaxIterations,
        last: x,
        iterations: options.max_iter,
        score_norm: norm,
    })
}

/// [`newton_solve`] with separate score and Jacobian functions.
pub fn newton_root<S, J>(mut score_fn: S, mut deriv_fn: J, options: &SolverOptions) -> Result<NewtonOutcome, Error>
where
    S: FnMut(&[f64]) -> Vec<f64>,
    J: FnMut(&[f64]) -> DMatrix<f64>,
{
    newton_solve(|x| (score_fn(x), deriv_fn(x)), options)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn opts(x0: f64) -> SolverOptions {
        SolverOptions::starting_at(vec![x0])
    }

    #[test]
    fn linear_score_in_one_step() {
        let out = newton_root(|x| vec![-3.0 * x[0] + 6.0], |_| scalar(-3.0), &opts(0.0)).unwrap();
        assert_eq!(out.root, vec![2.0]);
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        // f decreasing, f(lo) > 0 > f(hi)
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cubic_matches_bisection() {
        let f = |x: f64| -x * x * x - x + 2.0;
        let oracle = bisect(f, -5.0, 5.0);
        assert!((oracle - 1.0).abs() < 1e-12);
        let out = newton_root(|x| vec![f(x[0])], |x| scalar(-3.0 * x[0] * x[0] - 1.0), &opts(0.0)).unwrap();
        assert!((out.root[0] - oracle).abs() < 1e-9);
        assert!(out.score_norm() <= 1e-9);
    }

    #[test]
    fn positive_score_has_no_root() {
        let err = newton_root(
            |x| vec![1.0 / (1.0 + x[0].exp())],
            |x| {
                let e = x[0].exp();
                scalar(-e / ((1.0 + e) * (1.0 + e)))
            },
            &opts(0.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }), "{err}");
    }

    #[test]
    fn zero_jacobian_is_no_information() {
        let err = newton_root(|_| vec![0.0], |_| scalar(0.0), &opts(0.0)).unwrap_err();
        assert!(matches!(
            err,
            Error::NonConvergence {
                reason: NonConvergence::NoInformation,
                ..
            }
        ));
    }

    #[test]
    fn two_dimensional_linear_system() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 0.5, 0.5, -1.0]);
        let b = [1.0, -3.0];
        let out = newton_solve(
            |x| {
                let s = vec![
                    a[(0, 0)] * x[0] + a[(0, 1)] * x[1] + b[0],
                    a[(1, 0)] * x[0] + a[(1, 1)] * x[1] + b[1],
                ];
                (s, a.clone())
            },
            &SolverOptions::starting_at(vec![0.0, 0.0]),
        )
        .unwrap();
        assert!(out.score_norm() < 1e-12);
    }

    #[test]
    fn trace_is_monotone_in_score() {
        let f = |x: f64| (2.0 - x).tanh() * 3.0 - 0.1 * x;
        let df = |x: f64| -3.0 / (2.0 - x).cosh().powi(2) - 0.1;
        let out = newton_root(|x| vec![f(x[0])], |x| scalar(df(x[0])), &opts(-8.0)).unwrap();
        let norms: Vec<f64> = std::iter::once(-8.0)
            .chain(out.trace.iter().map(|x| x[0]))
            .map(|x| f(x).abs())
            .collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.trace.len() <= SolverOptions::default().max_iter);
    }

    #[test]
    fn rejects_bad_options() {
        let mut o = opts(0.0);
        o.tol = 0.0;
        assert!(newton_root(|x| vec![x[0]], |_| scalar(1.0), &o).is_err());
    }
}
