//! Per-student differential privacy mechanics: Poisson subsampling, ℓ2
//! clipping, the central Gaussian mechanism, and the MAP ridge penalty.
//!
//! Noise is added once per round at the center; schools only subsample and
//! clip. Gradient sums are never rescaled by the expected subsample size —
//! Adam's adaptive scaling absorbs the magnitude.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Hyper-parameters of the differentially private path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpConfig {
    /// Poisson sampling rate for students, in (0, 1].
    pub q_s: f64,
    /// ℓ2 clipping norm C.
    pub clip: f64,
    /// Noise multiplier; the mechanism adds N(0, (σC)²) per coordinate.
    pub sigma: f64,
    /// Target δ of the reported (ε, δ) guarantee.
    pub delta: f64,
    /// Maximum rounds R.
    pub max_rounds: u32,
    /// Prior standard deviations of the MAP penalty.
    pub tau_a: f64,
    pub tau_beta: f64,
    pub tau_s: f64,
    /// Per-block Adam learning rates.
    pub eta_a: f64,
    pub eta_beta: f64,
    pub eta_s: f64,
    /// Stop when the penalized gradient sup-norm and the relative parameter
    /// change both fall below this.
    pub eps_stop: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            q_s: 0.5,
            clip: 1.0,
            sigma: 1.0,
            delta: 1e-6,
            max_rounds: 300,
            tau_a: 1.0,
            tau_beta: 1.0,
            tau_s: 1.0,
            eta_a: 0.05,
            eta_beta: 0.05,
            eta_s: 0.05,
            eps_stop: 1e-3,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_s > 0.0 && self.q_s <= 1.0) {
            return Err(Error::Config(format!("q_s must be in (0, 1], got {}", self.q_s)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        for (name, tau) in [("tau_a", self.tau_a), ("tau_beta", self.tau_beta), ("tau_s", self.tau_s)] {
            if !(tau > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {tau}")));
            }
        }
        for (name, eta) in [("eta_a", self.eta_a), ("eta_beta", self.eta_beta), ("eta_s", self.eta_s)] {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {eta}")));
            }
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Indices of the students included this round; each index enters
/// independently with probability `q_s`.
pub fn poisson_subsample<R: Rng>(n_students: usize, q_s: f64, rng: &mut R) -> Vec<usize> {
    if q_s >= 1.0 {
        return (0..n_students).collect();
    }
    (0..n_students).filter(|_| rng.random_bool(q_s)).collect()
}

/// Scale `g` so its ℓ2 norm is at most `c`; unchanged (bitwise) when already
/// within the bound.
pub fn clip_l2(g: &[f64], c: f64) -> Vec<f64> {
    let norm = l2_norm(g);
    if norm <= c || norm == 0.0 {
        g.to_vec()
    } else {
        let scale = c / norm;
        g.iter().map(|v| v * scale).collect()
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Add i.i.d. N(0, (σC)²) noise to every coordinate.
pub fn gaussian_mechanism<R: Rng>(g: &[f64], sigma: f64, c: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma * c).expect("sigma * clip must be finite and nonnegative");
    g.iter().map(|v| v + normal.sample(rng)).collect()
}

/// The ridge term (a/τ_a², β/τ_β², s/τ_s²) subtracted from the noisy
/// aggregate to form the MAP gradient.
pub fn map_penalty(
    a: &[f64],
    beta: &[f64],
    s: &[f64],
    tau_a: f64,
    tau_beta: f64,
    tau_s: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + beta.len() + s.len());
    out.extend(a.iter().map(|v| v / (tau_a * tau_a)));
    out.extend(beta.iter().map(|v| v / (tau_beta * tau_beta)));
    out.extend(s.iter().map(|v| v / (tau_s * tau_s)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    #[test]
    fn subsample_rate_one_takes_everyone() {
        let mut rng = stream(1, &[tag::SUBSAMPLE]);
        let idx = poisson_subsample(100, 1.0, &mut rng);
        assert_eq!(idx, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_concentrates_around_expected_size() {
        // Binomial(1e5, 0.5): sd = sqrt(n p q) ≈ 158. Average 30 draws and
        // demand the mean lands within 3 standard errors.
        let n = 100_000;
        let reps = 30;
        let mut total = 0usize;
        for r in 0..reps {
            let mut rng = stream(7, &[tag::SUBSAMPLE, r]);
            total += poisson_subsample(n, 0.5, &mut rng).len();
        }
        let mean = total as f64 / reps as f64;
        let se = (n as f64 * 0.25).sqrt() / (reps as f64).sqrt();
        assert!((mean - 50_000.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn subsample_replays_under_fixed_seed() {
        let draw = || {
            let mut rng = stream(9, &[tag::SUBSAMPLE, 4]);
            poisson_subsample(1000, 0.3, &mut rng)
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn clip_scales_to_exact_norm() {
        let g = vec![3.0, 4.0]; // norm 5
        let clipped = clip_l2(&g, 2.5);
        assert!((l2_norm(&clipped) - 2.5).abs() < 1e-12);
        // Direction preserved.
        assert!((clipped[0] / clipped[1] - 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn clip_is_identity_within_bound() {
        let g = vec![0.3, -0.4];
        assert_eq!(clip_l2(&g, 1.0), g);
        assert_eq!(clip_l2(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn clip_is_idempotent() {
        let g = vec![5.0, -12.0, 3.5];
        let once = clip_l2(&g, 2.0);
        assert_eq!(clip_l2(&once, 2.0), once);
    }

    #[test]
    fn gaussian_mechanism_vanishing_noise() {
        let mut rng = stream(5, &[tag::NOISE]);
        let g = vec![1.0, -2.0, 0.5];
        let noisy = gaussian_mechanism(&g, 1e-12, 1.0, &mut rng);
        for (a, b) in noisy.iter().zip(&g) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_mechanism_empirical_sd() {
        let mut rng = stream(11, &[tag::NOISE]);
        let n = 100_000;
        let zeros = vec![0.0; n];
        let noisy = gaussian_mechanism(&zeros, 2.0, 1.5, &mut rng);
        let var = noisy.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        assert!((sd - 3.0).abs() / 3.0 < 0.02, "sd {sd}");
    }

    #[test]
    fn gaussian_mechanism_replays_under_fixed_seed() {
        let draw = || {
            let mut rng = stream(13, &[tag::NOISE, 2]);
            gaussian_mechanism(&[0.0; 8], 1.0, 1.0, &mut rng)
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn map_penalty_values() {
        assert_eq!(
            map_penalty(&[0.0], &[0.0], &[0.0], 1.0, 1.0, 1.0),
            vec![0.0, 0.0, 0.0]
        );
        // a = τ_a² gives a unit penalty coordinate.
        let p = map_penalty(&[4.0], &[], &[], 2.0, 1.0, 1.0);
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn map_penalty_is_linear() {
        let a = [0.3, -0.7];
        let b = [1.1];
        let s = [0.4, 0.0, -0.4];
        let one = map_penalty(&a, &b, &s, 1.3, 0.8, 2.0);
        let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let b2: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
        let s2: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let two = map_penalty(&a2, &b2, &s2, 1.3, 0.8, 2.0);
        for (x, y) in one.iter().zip(&two) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn replacing_one_student_moves_clipped_sum_at_most_2c() {
        let c = 1.0;
        let mut rng = stream(17, &[99]);
        for _ in 0..50 {
            let grads: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let replacement: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let sum = |gs: &[Vec<f64>]| -> Vec<f64> {
                let mut acc = vec![0.0; 5];
                for g in gs {
                    for (a, v) in acc.iter_mut().zip(clip_l2(g, c)) {
                        *a += v;
                    }
                }
                acc
            };
            let base = sum(&grads);
            let mut swapped = grads.clone();
            swapped[3] = replacement;
            let alt = sum(&swapped);
            let diff: Vec<f64> = base.iter().zip(&alt).map(|(a, b)| a - b).collect();
            assert!(l2_norm(&diff) <= 2.0 * c + 1e-12);
        }
    }
}
