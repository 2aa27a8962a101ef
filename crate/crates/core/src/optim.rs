//! The center's maximizers: BFGS with backtracking line search for the plain
//! federated path and Adam for the differentially private path.
//!
//! Both maximize; the BFGS machinery internally works on the negated
//! objective so the usual positive-definite inverse-Hessian bookkeeping
//! applies unchanged.

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Exponential-moment state of an Adam ascent run.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps_hat: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self::with_settings(dim, 0.9, 0.999, 1e-8)
    }

    pub fn with_settings(dim: usize, beta1: f64, beta2: f64, eps_hat: f64) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, beta1, beta2, eps_hat }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam ascent step. Returns the parameter delta to ADD;
/// `lr` supplies the per-coordinate learning rate (constant within each
/// parameter block in practice).
pub fn adam_step(state: &mut AdamState, grad: &[f64], lr: &[f64]) -> Result<Vec<f64>> {
    if grad.len() != state.m.len() || lr.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam dimensions disagree: state {}, grad {}, lr {}",
            state.m.len(),
            grad.len(),
            lr.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut delta = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        delta[i] = lr[i] * m_hat / (v_hat.sqrt() + state.eps_hat);
    }
    Ok(delta)
}

// ---------------------------------------------------------------------------
// BFGS
// ---------------------------------------------------------------------------

/// Dense inverse-Hessian approximation plus the last accepted point.
#[derive(Debug, Clone)]
pub struct BfgsState {
    h: Vec<f64>, // dim × dim, row-major, symmetric
    dim: usize,
}

impl BfgsState {
    pub fn identity(dim: usize) -> Self {
        let mut h = vec![0.0; dim * dim];
        for i in 0..dim {
            h[i * dim + i] = 1.0;
        }
        Self { h, dim }
    }

    fn reset(&mut self) {
        self.h.fill(0.0);
        for i in 0..self.dim {
            self.h[i * self.dim + i] = 1.0;
        }
    }

    fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.h[i * self.dim..(i + 1) * self.dim];
            out[i] = row.iter().zip(g).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// BFGS update for a maximization run: `y` is g_old − g_new (the
    /// gradient difference of the negated objective). Skipped unless the
    /// curvature product exceeds the guard.
    fn update(&mut self, s: &[f64], y: &[f64]) -> bool {
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        if sy <= 1e-10 {
            return false;
        }
        let rho = 1.0 / sy;
        let dim = self.dim;
        let hy = self.apply(y);
        let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
        // H ← H − ρ(s (Hy)ᵀ + (Hy) sᵀ) + ρ²(yᵀHy) s sᵀ + ρ s sᵀ
        for i in 0..dim {
            for j in 0..dim {
                self.h[i * dim + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                    + (rho * rho * yhy + rho) * s[i] * s[j];
            }
        }
        true
    }

    /// Largest absolute asymmetry, for tests.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..i {
                worst = worst.max((self.h[i * self.dim + j] - self.h[j * self.dim + i]).abs());
            }
        }
        worst
    }
}

/// Line-search and termination settings.
#[derive(Debug, Clone)]
pub struct BfgsConfig {
    /// Sup-norm gradient tolerance.
    pub tol: f64,
    pub max_iter: u32,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: u32,
}

impl BfgsConfig {
    pub fn new(tol: f64, max_iter: u32) -> Self {
        Self { tol, max_iter, armijo_c: 1e-4, shrink: 0.5, max_backtracks: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: u32,
    /// Total oracle calls (each one is a communication round when federated).
    pub evals: u32,
    pub converged: bool,
    /// Iterations where the line search failed and a small gradient step was
    /// taken instead.
    pub fallback_rounds: u32,
    /// (value, sup-norm gradient) after each iteration.
    pub trace: Vec<(f64, f64)>,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Maximize via BFGS with Armijo backtracking.
///
/// The oracle receives a point and whether a gradient is needed; it must
/// always return the objective value and may skip the gradient only when not
/// requested (value-only line-search probes). An oracle error aborts the
/// run.
pub fn bfgs_maximize<O>(oracle: O, x0: &[f64], tol: f64, max_iter: u32) -> Result<BfgsOutcome>
where
    O: FnMut(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    bfgs_maximize_projected(oracle, |_: &mut [f64]| {}, x0, &BfgsConfig::new(tol, max_iter))
}

/// Maximize with a projection applied to every trial point before
/// evaluation (identification constraints, positivity floors). The
/// projection must be idempotent.
pub fn bfgs_maximize_projected<O, P>(
    mut oracle: O,
    mut project: P,
    x0: &[f64],
    cfg: &BfgsConfig,
) -> Result<BfgsOutcome>
where
    O: FnMut(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
    P: FnMut(&mut [f64]),
{
    let dim = x0.len();
    let mut x = x0.to_vec();
    project(&mut x);
    let mut evals = 1u32;
    let (mut f, g0) = oracle(&x, true)?;
    let mut g = g0.expect("oracle must return a gradient when asked");
    let mut state = BfgsState::identity(dim);
    let mut fallback_rounds = 0u32;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0u32;

    for _ in 0..cfg.max_iter {
        if sup_norm(&g) < cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir = state.apply(&g);
        let ascent: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        if !ascent.is_finite() || ascent <= 0.0 {
            // Stale curvature; fall back to steepest ascent.
            state.reset();
            dir = g.clone();
        }

        let mut step = 1.0f64;
        let mut accepted: Option<(Vec<f64>, f64, Option<Vec<f64>>)> = None;
        for bt in 0..=cfg.max_backtracks {
            let mut x_try: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            project(&mut x_try);
            // Predicted gain along the realized (post-projection) step.
            let realized: f64 =
                g.iter().zip(x_try.iter().zip(&x)).map(|(gi, (ti, xi))| gi * (ti - xi)).sum();
            let want_grad = bt == 0;
            evals += 1;
            let (f_try, g_try) = oracle(&x_try, want_grad)?;
            if realized > 0.0 && f_try.is_finite() && f_try >= f + cfg.armijo_c * realized {
                accepted = Some((x_try, f_try, g_try));
                break;
            }
            step *= cfg.shrink;
        }

        let (x_new, f_new, g_new_opt) = match accepted {
            Some(v) => v,
            None => {
                // Line search exhausted: take a small gradient-ascent step
                // and flag the round.
                fallback_rounds += 1;
                let scale = 1e-6 / sup_norm(&g).max(1e-12);
                let mut x_fb: Vec<f64> =
                    x.iter().zip(&g).map(|(xi, gi)| xi + scale * gi).collect();
                project(&mut x_fb);
                evals += 1;
                let (f_fb, g_fb) = oracle(&x_fb, true)?;
                state.reset();
                (x_fb, f_fb, g_fb)
            }
        };
        let g_new = match g_new_opt {
            Some(g) => g,
            None => {
                evals += 1;
                let (_, g) = oracle(&x_new, true)?;
                g.expect("oracle must return a gradient when asked")
            }
        };

        let s_vec: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y_vec: Vec<f64> = g.iter().zip(&g_new).map(|(old, new)| old - new).collect();
        state.update(&s_vec, &y_vec);

        x = x_new;
        f = f_new;
        g = g_new;
        trace.push((f, sup_norm(&g)));
    }
    if !converged {
        converged = sup_norm(&g) < cfg.tol;
    }

    Ok(BfgsOutcome { x, value: f, grad: g, iterations, evals, converged, fallback_rounds, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_gives_zero_delta() {
        let mut state = AdamState::new(3);
        let delta = adam_step(&mut state, &[0.0; 3], &[0.1; 3]).unwrap();
        assert_eq!(delta, vec![0.0; 3]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // t=1, g=1: m̂ = 1, v̂ = 1, delta = η·1/(1 + ε̂).
        let mut state = AdamState::new(1);
        let delta = adam_step(&mut state, &[1.0], &[0.1]).unwrap();
        assert!((delta[0] - 0.099_999_999_000_000_01).abs() < 1e-15);
        assert!(delta[0] > 0.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut state = AdamState::new(2);
            let mut out = Vec::new();
            for g in [[0.4, -1.0], [0.2, 0.3], [-0.7, 0.9]] {
                out.push(adam_step(&mut state, &g, &[0.05, 0.01]).unwrap());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_degenerates_to_sign_ascent_without_momentum() {
        let mut state = AdamState::with_settings(2, 0.0, 0.0, 1e-8);
        let delta = adam_step(&mut state, &[3.0, -0.25], &[0.1, 0.1]).unwrap();
        assert!((delta[0] - 0.1).abs() < 1e-7);
        assert!((delta[1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_dimension_mismatch() {
        let mut state = AdamState::new(2);
        assert!(adam_step(&mut state, &[1.0], &[0.1, 0.1]).is_err());
        assert!(adam_step(&mut state, &[1.0, 1.0], &[0.1]).is_err());
    }

    #[test]
    fn bfgs_solves_concave_quadratic() {
        let out = bfgs_maximize(
            |x, _| Ok((-(x[0] - 3.0) * (x[0] - 3.0), Some(vec![-2.0 * (x[0] - 3.0)]))),
            &[0.0],
            1e-8,
            100,
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 3.0).abs() < 1e-6);
        // Accepted steps never decreased the objective.
        for w in out.trace.windows(2) {
            assert!(w[1].0 >= w[0].0 - 1e-12);
        }
    }

    #[test]
    fn bfgs_handles_condition_number_100() {
        let c = [1.0, -2.0];
        let out = bfgs_maximize(
            |x, _| {
                let d0 = x[0] - c[0];
                let d1 = x[1] - c[1];
                Ok((
                    -(d0 * d0 + 100.0 * d1 * d1),
                    Some(vec![-2.0 * d0, -200.0 * d1]),
                ))
            },
            &[10.0, 10.0],
            1e-6,
            50,
        )
        .unwrap();
        assert!(out.converged, "did not converge in 50 iterations");
        assert!(out.iterations < 50);
        assert!((out.x[0] - c[0]).abs() < 1e-4);
        assert!((out.x[1] - c[1]).abs() < 1e-4);
    }

    #[test]
    fn bfgs_returns_immediately_when_already_converged() {
        let out = bfgs_maximize(
            |x, _| Ok((-(x[0] * x[0]), Some(vec![-2.0 * x[0]]))),
            &[1e-9],
            1e-4,
            100,
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, vec![1e-9]);
    }

    #[test]
    fn bfgs_inverse_hessian_stays_symmetric() {
        let mut state = BfgsState::identity(3);
        state.update(&[0.5, -0.2, 0.1], &[0.4, -0.1, 0.3]);
        state.update(&[0.1, 0.3, -0.2], &[0.2, 0.2, -0.1]);
        assert!(state.asymmetry() < 1e-14);
        // Curvature guard: a non-positive product is skipped.
        let before = state.h.clone();
        assert!(!state.update(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]));
        assert_eq!(state.h, before);
    }

    #[test]
    fn bfgs_is_deterministic() {
        let run = || {
            bfgs_maximize(
                |x, _| {
                    let d0 = x[0] - 0.7;
                    let d1 = x[1] + 1.3;
                    Ok((-(3.0 * d0 * d0 + d1 * d1), Some(vec![-6.0 * d0, -2.0 * d1])))
                },
                &[5.0, -5.0],
                1e-10,
                200,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.x, b.x);
        assert_eq!(a.evals, b.evals);
    }
}
