//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-round privacy is bounded at integer orders α with the binomial-sum
//! upper bound
//!
//! ε(α) = (1/(α−1)) · log Σ_{k=0}^{α} C(α,k) (1−q)^{α−k} q^k exp((k²−k)/(2σ²)),
//!
//! evaluated in log space so large orders do not overflow. Curves compose by
//! elementwise addition over rounds and convert to an (ε, δ) guarantee by
//! minimizing ε(α) + log(1/δ)/(α−1) over the order grid.

use crate::error::{Error, Result};
use crate::irt::logsumexp;
use serde::{Deserialize, Serialize};

/// Default integer order grid, 2..=64.
pub fn default_orders() -> Vec<u32> {
    (2..=64).collect()
}

/// RDP values sampled on an integer order grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<u32>,
    pub eps: Vec<f64>,
}

impl RdpCurve {
    pub fn zero(orders: &[u32]) -> Self {
        Self { orders: orders.to_vec(), eps: vec![0.0; orders.len()] }
    }
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// One round's RDP of the Poisson-subsampled Gaussian mechanism at integer
/// order `alpha`.
pub fn rdp_subsampled_gaussian(q_s: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::Contract(format!("order must be an integer >= 2, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&q_s) {
        return Err(Error::Contract(format!("q_s must be in [0, 1], got {q_s}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    let a = alpha as f64;
    let ln_q = q_s.ln();
    let ln_1mq = (1.0 - q_s).ln(); // -inf at q_s = 1, which drops the k < alpha terms
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    for k in 0..=alpha {
        let kf = k as f64;
        let mut t = ln_binomial(alpha, k) + (kf * kf - kf) / (2.0 * sigma * sigma);
        if k > 0 {
            t += kf * ln_q;
        }
        if k < alpha {
            t += (a - kf) * ln_1mq;
        }
        if t > f64::NEG_INFINITY {
            terms.push(t);
        }
    }
    Ok((logsumexp(&terms) / (a - 1.0)).max(0.0))
}

/// RDP curve of one round over an order grid.
pub fn curve_for_round(q_s: f64, sigma: f64, orders: &[u32]) -> Result<RdpCurve> {
    let eps = orders
        .iter()
        .map(|&a| rdp_subsampled_gaussian(q_s, sigma, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(RdpCurve { orders: orders.to_vec(), eps })
}

/// Compose per-round curves by elementwise summation. All curves must share
/// one order grid.
pub fn compose(curves: &[RdpCurve]) -> Result<RdpCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Contract("cannot compose an empty curve list".into()))?;
    let mut total = RdpCurve::zero(&first.orders);
    for curve in curves {
        if curve.orders != total.orders {
            return Err(Error::Contract("composed curves must share the order grid".into()));
        }
        for (acc, e) in total.eps.iter_mut().zip(&curve.eps) {
            *acc += e;
        }
    }
    Ok(total)
}

/// Convert a composed curve to the ε of an (ε, δ) guarantee:
/// min over the grid of ε(α) + log(1/δ)/(α−1).
pub fn to_eps_delta(curve: &RdpCurve, delta: f64) -> f64 {
    let ln_inv_delta = (1.0 / delta).ln();
    curve
        .orders
        .iter()
        .zip(&curve.eps)
        .map(|(&a, &e)| e + ln_inv_delta / (a as f64 - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// The realized privacy spend of a run: per-round curves, their composition,
/// and the converted guarantee for the rounds actually executed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub orders: Vec<u32>,
    pub per_round: Vec<Vec<f64>>,
    pub eps_alpha: Vec<f64>,
    pub epsilon: f64,
    pub delta: f64,
    pub rounds: u32,
}

/// Build the ledger for `rounds` executed rounds of one mechanism.
pub fn ledger_for(q_s: f64, sigma: f64, rounds: u32, delta: f64, orders: &[u32]) -> Result<PrivacyLedger> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Contract(format!("delta must be in (0, 1), got {delta}")));
    }
    if rounds == 0 {
        return Ok(PrivacyLedger {
            orders: orders.to_vec(),
            per_round: Vec::new(),
            eps_alpha: vec![0.0; orders.len()],
            epsilon: 0.0,
            delta,
            rounds: 0,
        });
    }
    let round_curve = curve_for_round(q_s, sigma, orders)?;
    let per_round: Vec<RdpCurve> = (0..rounds).map(|_| round_curve.clone()).collect();
    let composed = compose(&per_round)?;
    let epsilon = to_eps_delta(&composed, delta);
    Ok(PrivacyLedger {
        orders: orders.to_vec(),
        per_round: per_round.into_iter().map(|c| c.eps).collect(),
        eps_alpha: composed.eps,
        epsilon,
        delta,
        rounds,
    })
}
