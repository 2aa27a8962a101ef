//! Measurement-model math.
//!
//! Response probabilities for the two-parameter logistic (2PL) model with an
//! additive school effect and for the partial credit model (PCM), the
//! quadrature grid used to integrate abilities against the standard normal
//! prior, marginal log-likelihoods, bin posteriors, per-student gradients in
//! both the natural-α and log-α parametrizations, and EAP ability scores.
//!
//! All likelihood evaluation happens in log space; the product form of the
//! conditional likelihood is never evaluated in probability space, so rows
//! with many items do not underflow.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default grid half-width. 21 uniform nodes over ±4 cover > 0.9999 of the
/// prior mass.
pub const DEFAULT_THETA0: f64 = 4.0;
/// Default node count.
pub const DEFAULT_NODES: u32 = 21;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without underflow on either tail.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[inline]
pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

fn check_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {value}")))
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Discrimination and difficulty of a dichotomous item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemParams2PL {
    /// Discrimination, logit units per ability unit. Strictly positive.
    pub alpha: f64,
    /// Difficulty, ability units.
    pub beta: f64,
}

impl ItemParams2PL {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        check_finite("alpha", alpha)?;
        check_finite("beta", beta)?;
        if alpha <= 0.0 {
            return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(Self { alpha, beta })
    }
}

/// Discrimination and ordered step parameters of a polytomous item with
/// `betas.len() + 1` score categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemParamsPCM {
    pub alpha: f64,
    pub betas: Vec<f64>,
}

impl ItemParamsPCM {
    pub fn new(alpha: f64, betas: Vec<f64>) -> Result<Self> {
        check_finite("alpha", alpha)?;
        if alpha <= 0.0 {
            return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
        }
        if betas.is_empty() {
            return Err(Error::Domain("an item needs at least one step parameter".into()));
        }
        for (h, b) in betas.iter().enumerate() {
            check_finite(&format!("betas[{h}]"), *b)?;
        }
        Ok(Self { alpha, betas })
    }

    /// Number of score categories `C_j`.
    pub fn n_categories(&self) -> usize {
        self.betas.len() + 1
    }
}

/// The item side of a model: either all-2PL or all-PCM.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemBank {
    TwoPl(Vec<ItemParams2PL>),
    Pcm(Vec<ItemParamsPCM>),
}

impl ItemBank {
    pub fn two_pl(alpha: &[f64], beta: &[f64]) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::Contract(format!(
                "alpha has {} entries but beta has {}",
                alpha.len(),
                beta.len()
            )));
        }
        let items = alpha
            .iter()
            .zip(beta)
            .map(|(&a, &b)| ItemParams2PL::new(a, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::TwoPl(items))
    }

    pub fn pcm(items: Vec<ItemParamsPCM>) -> Self {
        Self::Pcm(items)
    }

    pub fn n_items(&self) -> usize {
        match self {
            Self::TwoPl(v) => v.len(),
            Self::Pcm(v) => v.len(),
        }
    }

    /// Category count per item (2 for every 2PL item).
    pub fn categories(&self) -> Vec<u32> {
        match self {
            Self::TwoPl(v) => vec![2; v.len()],
            Self::Pcm(v) => v.iter().map(|it| it.n_categories() as u32).collect(),
        }
    }

    /// Total number of difficulty/step parameters (J for 2PL, Σ (C_j − 1)
    /// for PCM).
    pub fn n_step_params(&self) -> usize {
        match self {
            Self::TwoPl(v) => v.len(),
            Self::Pcm(v) => v.iter().map(|it| it.betas.len()).sum(),
        }
    }
}

/// Equally spaced ability nodes with standard-normal bin masses.
///
/// `weights[n]` is the prior mass of the bin centered at `nodes[n]`; the
/// weights sum to slightly less than one (the mass outside ±(θ0 + h/2) is
/// dropped, not renormalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub theta0: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.theta0 / (self.nodes.len() as f64 - 1.0)
    }
}

/// Build the quadrature grid: `q` nodes uniform on [−θ0, θ0], each weighted
/// by the normal mass of its half-spacing bin.
pub fn build_grid(theta0: f64, q: u32) -> Result<QuadratureGrid> {
    if !(theta0.is_finite() && theta0 > 0.0) {
        return Err(Error::Config(format!("theta0 must be positive, got {theta0}")));
    }
    if q < 2 {
        return Err(Error::Config(format!("need at least 2 quadrature nodes, got {q}")));
    }
    let q = q as usize;
    let h = 2.0 * theta0 / (q as f64 - 1.0);
    let nodes: Vec<f64> = (0..q).map(|n| -theta0 + n as f64 * h).collect();
    let weights: Vec<f64> = nodes
        .iter()
        .map(|&v| normal_cdf(v + h / 2.0) - normal_cdf(v - h / 2.0))
        .collect();
    Ok(QuadratureGrid { theta0, nodes, weights })
}

/// One school's response table: `n_students × n_items` scores with the
/// per-item category counts. Every cell is present and in range.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    data: Vec<u32>,
    n_students: usize,
    n_items: usize,
    categories: Vec<u32>,
}

impl ResponseMatrix {
    pub fn new(rows: Vec<Vec<u32>>, categories: Vec<u32>) -> Result<Self> {
        let n_items = categories.len();
        if categories.iter().any(|&c| c < 2) {
            return Err(Error::Validation("every item needs at least 2 categories".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n_items);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_items {
                return Err(Error::Validation(format!(
                    "row {i} has {} cells, expected {n_items}",
                    row.len()
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                if x >= categories[j] {
                    return Err(Error::Validation(format!(
                        "row {i}, item {j}: score {x} out of range for {} categories",
                        categories[j]
                    )));
                }
            }
            data.extend_from_slice(row);
        }
        Ok(Self { data, n_students: rows.len(), n_items, categories })
    }

    /// Dichotomous responses (two categories everywhere).
    pub fn dichotomous(rows: Vec<Vec<u32>>, n_items: usize) -> Result<Self> {
        Self::new(rows, vec![2; n_items])
    }

    pub fn n_students(&self) -> usize {
        self.n_students
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn categories(&self) -> &[u32] {
        &self.categories
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.n_items..(i + 1) * self.n_items]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.data.chunks_exact(self.n_items.max(1)).take(self.n_students)
    }

    /// Replace row `i` wholesale (used by the contamination harness).
    pub fn set_row(&mut self, i: usize, row: &[u32]) -> Result<()> {
        if row.len() != self.n_items {
            return Err(Error::Validation("row length mismatch".into()));
        }
        for (j, &x) in row.iter().enumerate() {
            if x >= self.categories[j] {
                return Err(Error::Validation("score out of range".into()));
            }
        }
        self.data[i * self.n_items..(i + 1) * self.n_items].copy_from_slice(row);
        Ok(())
    }

    /// Check this matrix against an item bank.
    pub fn check_bank(&self, items: &ItemBank) -> Result<()> {
        if items.n_items() != self.n_items {
            return Err(Error::Contract(format!(
                "bank has {} items, matrix has {}",
                items.n_items(),
                self.n_items
            )));
        }
        if items.categories() != self.categories {
            return Err(Error::Contract("category counts differ between bank and matrix".into()));
        }
        Ok(())
    }
}

/// Which parameter the discrimination gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parametrization {
    /// d/dα_j.
    NaturalAlpha,
    /// d/da_j with α_j = exp(a_j); the chain rule multiplies by α_j.
    LogAlpha,
}

/// One student's contribution to the log-likelihood gradient.
///
/// `d_beta` holds the per-item difficulty gradient for 2PL banks, or the
/// concatenated step gradients for PCM banks.
#[derive(Debug, Clone, PartialEq)]
pub struct PerStudentGradient {
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
    pub d_s: f64,
    pub parametrization: Parametrization,
}

impl PerStudentGradient {
    /// `[d_alpha | d_beta | d_s]` as one vector.
    pub fn stacked(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_alpha.len() + self.d_beta.len() + 1);
        out.extend_from_slice(&self.d_alpha);
        out.extend_from_slice(&self.d_beta);
        out.push(self.d_s);
        out
    }

    pub fn dim(&self) -> usize {
        self.d_alpha.len() + self.d_beta.len() + 1
    }
}

// ---------------------------------------------------------------------------
// Probabilities
// ---------------------------------------------------------------------------

/// 2PL correct-response probability σ(α(θ + s − β)).
pub fn prob_2pl(alpha: f64, beta: f64, s: f64, theta: f64) -> Result<f64> {
    check_finite("alpha", alpha)?;
    check_finite("beta", beta)?;
    check_finite("s", s)?;
    check_finite("theta", theta)?;
    if alpha <= 0.0 {
        return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(sigmoid(alpha * (theta + s - beta)))
}

/// PCM category probabilities for one item; the returned vector has one
/// entry per score 0..C_j−1 and sums to one.
///
/// The cumulative sum for score 0 is empty by convention, so the score-0
/// numerator is always exp(0).
pub fn prob_pcm(item: &ItemParamsPCM, s: f64, theta: f64) -> Result<Vec<f64>> {
    check_finite("s", s)?;
    check_finite("theta", theta)?;
    check_finite("alpha", item.alpha)?;
    if item.alpha <= 0.0 {
        return Err(Error::Domain(format!("alpha must be > 0, got {}", item.alpha)));
    }
    for (h, b) in item.betas.iter().enumerate() {
        check_finite(&format!("betas[{h}]"), *b)?;
    }
    let cum = pcm_cumulative(item, s, theta);
    let lse = logsumexp(&cum);
    Ok(cum.iter().map(|c| (c - lse).exp()).collect())
}

/// Cumulative logit sums S_z = Σ_{h≤z} α(θ + s − β_h), S_0 = 0.
fn pcm_cumulative(item: &ItemParamsPCM, s: f64, theta: f64) -> Vec<f64> {
    let mut cum = Vec::with_capacity(item.n_categories());
    cum.push(0.0);
    let mut acc = 0.0;
    for &b in &item.betas {
        acc += item.alpha * (theta + s - b);
        cum.push(acc);
    }
    cum
}

// ---------------------------------------------------------------------------
// Node tables
// ---------------------------------------------------------------------------

/// Per-item, per-node quantities reused across every student of a school in
/// one round. The single-row public operations go through the same tables so
/// school sums and per-student calls agree bit for bit.
pub(crate) struct NodeTables<'g> {
    pub grid: &'g QuadratureGrid,
    ln_weights: Vec<f64>,
    kind: TableKind,
}

enum TableKind {
    TwoPl {
        alpha: Vec<f64>,
        // pi, log_p, log_q, dev are J×q row-major; dev[j*q+n] = V(n)+s−β_j.
        pi: Vec<f64>,
        log_p: Vec<f64>,
        log_q: Vec<f64>,
        dev: Vec<f64>,
    },
    Pcm {
        alpha: Vec<f64>,
        n_cats: Vec<usize>,
        cat_offset: Vec<usize>,
        step_offset: Vec<usize>,
        // log_prob: per (j, n, c); cum_dev: per (j, n, c) with T_0 = 0;
        // mean_dev/mean_cat: per (j, n); tail: per (j, n, h) = Σ_{c≥h} π_c.
        log_prob: Vec<f64>,
        cum_dev: Vec<f64>,
        mean_dev: Vec<f64>,
        mean_cat: Vec<f64>,
        tail: Vec<f64>,
    },
}

impl<'g> NodeTables<'g> {
    pub fn for_bank(items: &ItemBank, s: f64, grid: &'g QuadratureGrid) -> Self {
        match items {
            ItemBank::TwoPl(v) => Self::from_2pl(v, s, grid),
            ItemBank::Pcm(v) => Self::from_pcm(v, s, grid),
        }
    }

    pub fn from_2pl(items: &[ItemParams2PL], s: f64, grid: &'g QuadratureGrid) -> Self {
        let q = grid.n_nodes();
        let j_count = items.len();
        let mut pi = vec![0.0; j_count * q];
        let mut log_p = vec![0.0; j_count * q];
        let mut log_q = vec![0.0; j_count * q];
        let mut dev = vec![0.0; j_count * q];
        for (j, it) in items.iter().enumerate() {
            for (n, &v) in grid.nodes.iter().enumerate() {
                let d = v + s - it.beta;
                let z = it.alpha * d;
                let idx = j * q + n;
                dev[idx] = d;
                pi[idx] = sigmoid(z);
                log_p[idx] = log_sigmoid(z);
                log_q[idx] = log_sigmoid(-z);
            }
        }
        NodeTables {
            grid,
            ln_weights: grid.weights.iter().map(|w| w.ln()).collect(),
            kind: TableKind::TwoPl {
                alpha: items.iter().map(|it| it.alpha).collect(),
                pi,
                log_p,
                log_q,
                dev,
            },
        }
    }

    pub fn from_pcm(items: &[ItemParamsPCM], s: f64, grid: &'g QuadratureGrid) -> Self {
        let q = grid.n_nodes();
        let mut n_cats = Vec::with_capacity(items.len());
        let mut cat_offset = Vec::with_capacity(items.len());
        let mut step_offset = Vec::with_capacity(items.len());
        let mut total_cats = 0usize;
        let mut total_steps = 0usize;
        for it in items {
            n_cats.push(it.n_categories());
            cat_offset.push(total_cats);
            step_offset.push(total_steps);
            total_cats += it.n_categories();
            total_steps += it.betas.len();
        }
        let mut log_prob = vec![0.0; total_cats * q];
        let mut prob = vec![0.0; total_cats * q];
        let mut cum_dev = vec![0.0; total_cats * q];
        let mut mean_dev = vec![0.0; items.len() * q];
        let mut mean_cat = vec![0.0; items.len() * q];
        let mut tail = vec![0.0; total_steps * q];
        for (j, it) in items.iter().enumerate() {
            let cats = it.n_categories();
            for (n, &v) in grid.nodes.iter().enumerate() {
                let cum = pcm_cumulative(it, s, v);
                let lse = logsumexp(&cum);
                let base = (cat_offset[j] + 0) * q; // category c lives at (cat_offset[j]+c)*q + n
                let mut t_acc = 0.0;
                let mut m_dev = 0.0;
                let mut m_cat = 0.0;
                for c in 0..cats {
                    let lp = cum[c] - lse;
                    let p = lp.exp();
                    log_prob[base + c * q + n] = lp;
                    prob[base + c * q + n] = p;
                    if c > 0 {
                        t_acc += v + s - it.betas[c - 1];
                    }
                    cum_dev[base + c * q + n] = t_acc;
                    m_dev += p * t_acc;
                    m_cat += p * c as f64;
                }
                mean_dev[j * q + n] = m_dev;
                mean_cat[j * q + n] = m_cat;
                // tail[h] = Σ_{c≥h} π_c for h = 1..C_j−1
                let mut acc = 0.0;
                for h in (1..cats).rev() {
                    acc += prob[base + h * q + n];
                    tail[(step_offset[j] + h - 1) * q + n] = acc;
                }
            }
        }
        NodeTables {
            grid,
            ln_weights: grid.weights.iter().map(|w| w.ln()).collect(),
            kind: TableKind::Pcm {
                alpha: items.iter().map(|it| it.alpha).collect(),
                n_cats,
                cat_offset,
                step_offset,
                log_prob,
                cum_dev,
                mean_dev,
                mean_cat,
                tail,
            },
        }
    }

    /// Per-node log conditional likelihood of a row.
    fn log_conditional(&self, row: &[u32]) -> Vec<f64> {
        let q = self.grid.n_nodes();
        let mut lc = vec![0.0; q];
        match &self.kind {
            TableKind::TwoPl { log_p, log_q, .. } => {
                for (j, &x) in row.iter().enumerate() {
                    let table = if x == 1 { log_p } else { log_q };
                    let base = j * q;
                    for (n, v) in lc.iter_mut().enumerate() {
                        *v += table[base + n];
                    }
                }
            }
            TableKind::Pcm { cat_offset, log_prob, .. } => {
                for (j, &x) in row.iter().enumerate() {
                    let base = (cat_offset[j] + x as usize) * q;
                    for (n, v) in lc.iter_mut().enumerate() {
                        *v += log_prob[base + n];
                    }
                }
            }
        }
        lc
    }

    /// Normalized bin posterior and marginal log-likelihood of a row.
    pub fn posterior_and_loglik(&self, row: &[u32]) -> (Vec<f64>, f64) {
        let mut joint = self.log_conditional(row);
        for (v, lw) in joint.iter_mut().zip(&self.ln_weights) {
            *v += lw;
        }
        let logmarg = logsumexp(&joint);
        let mut post: Vec<f64> = joint.iter().map(|v| (v - logmarg).exp()).collect();
        let total: f64 = post.iter().sum();
        for p in &mut post {
            *p /= total;
        }
        (post, logmarg)
    }

    pub fn loglik(&self, row: &[u32]) -> f64 {
        let mut joint = self.log_conditional(row);
        for (v, lw) in joint.iter_mut().zip(&self.ln_weights) {
            *v += lw;
        }
        logsumexp(&joint)
    }

    /// Gradient of the row's marginal log-likelihood given its posterior.
    pub fn gradient_given_posterior(
        &self,
        row: &[u32],
        post: &[f64],
        parametrization: Parametrization,
    ) -> PerStudentGradient {
        let q = self.grid.n_nodes();
        match &self.kind {
            TableKind::TwoPl { alpha, pi, dev, .. } => {
                let j_count = alpha.len();
                let mut d_alpha = vec![0.0; j_count];
                let mut d_beta = vec![0.0; j_count];
                let mut d_s = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    let base = j * q;
                    let xf = x as f64;
                    let mut resid = 0.0; // Σ_n (x − π) p(n)
                    let mut slope = 0.0; // Σ_n (x − π)(V + s − β) p(n)
                    for n in 0..q {
                        let r = (xf - pi[base + n]) * post[n];
                        resid += r;
                        slope += r * dev[base + n];
                    }
                    d_alpha[j] = match parametrization {
                        Parametrization::NaturalAlpha => slope,
                        Parametrization::LogAlpha => alpha[j] * slope,
                    };
                    d_beta[j] = -(alpha[j] * resid);
                    d_s += alpha[j] * resid;
                }
                PerStudentGradient { d_alpha, d_beta, d_s, parametrization }
            }
            TableKind::Pcm {
                alpha,
                n_cats,
                cat_offset,
                step_offset,
                cum_dev,
                mean_dev,
                mean_cat,
                tail,
                ..
            } => {
                let j_count = alpha.len();
                let n_steps: usize = n_cats.iter().map(|c| c - 1).sum();
                let mut d_alpha = vec![0.0; j_count];
                let mut d_beta = vec![0.0; n_steps];
                let mut d_s = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    let x = x as usize;
                    let obs_base = (cat_offset[j] + x) * q;
                    let mut slope = 0.0;
                    let mut score_resid = 0.0; // Σ_n (x − E[c]) p(n)
                    for n in 0..q {
                        slope += (cum_dev[obs_base + n] - mean_dev[j * q + n]) * post[n];
                        score_resid += (x as f64 - mean_cat[j * q + n]) * post[n];
                    }
                    d_alpha[j] = match parametrization {
                        Parametrization::NaturalAlpha => slope,
                        Parametrization::LogAlpha => alpha[j] * slope,
                    };
                    for h in 1..n_cats[j] {
                        let ind = if h <= x { 1.0 } else { 0.0 };
                        let mut acc = 0.0;
                        for n in 0..q {
                            acc += (ind - tail[(step_offset[j] + h - 1) * q + n]) * post[n];
                        }
                        d_beta[step_offset[j] + h - 1] = -(alpha[j] * acc);
                    }
                    d_s += alpha[j] * score_resid;
                }
                PerStudentGradient { d_alpha, d_beta, d_s, parametrization }
            }
        }
    }

    pub fn eap_given_posterior(&self, post: &[f64]) -> (f64, f64) {
        let mean: f64 = post.iter().zip(&self.grid.nodes).map(|(p, v)| p * v).sum();
        let var: f64 = post
            .iter()
            .zip(&self.grid.nodes)
            .map(|(p, v)| p * (v - mean) * (v - mean))
            .sum();
        (mean, var.max(0.0).sqrt())
    }
}

fn check_row(row: &[u32], items: &ItemBank) -> Result<()> {
    if row.len() != items.n_items() {
        return Err(Error::Validation(format!(
            "row has {} cells, bank has {} items",
            row.len(),
            items.n_items()
        )));
    }
    let cats = items.categories();
    for ((j, &x), &c) in row.iter().enumerate().zip(&cats) {
        if x >= c {
            return Err(Error::Validation(format!(
                "item {j}: score {x} out of range for {c} categories"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Row-level operations
// ---------------------------------------------------------------------------

/// Marginal log-likelihood log p̃(x) of one response row: the log of the
/// weight-mixed conditional likelihood over the grid, evaluated with
/// log-sum-exp.
pub fn marginal_loglik(row: &[u32], items: &ItemBank, s: f64, grid: &QuadratureGrid) -> Result<f64> {
    check_row(row, items)?;
    check_finite("s", s)?;
    Ok(NodeTables::for_bank(items, s, grid).loglik(row))
}

/// Bin posterior p(n) ∝ p(x | V(n)) A(n), normalized to sum to one.
pub fn bin_posterior(row: &[u32], items: &ItemBank, s: f64, grid: &QuadratureGrid) -> Result<Vec<f64>> {
    check_row(row, items)?;
    check_finite("s", s)?;
    Ok(NodeTables::for_bank(items, s, grid).posterior_and_loglik(row).0)
}

/// Per-student gradient of the 2PL marginal log-likelihood.
pub fn student_gradient_2pl(
    row: &[u32],
    items: &[ItemParams2PL],
    s: f64,
    grid: &QuadratureGrid,
    parametrization: Parametrization,
) -> Result<PerStudentGradient> {
    let bank = ItemBank::TwoPl(items.to_vec());
    check_row(row, &bank)?;
    check_finite("s", s)?;
    let tables = NodeTables::from_2pl(items, s, grid);
    let (post, _) = tables.posterior_and_loglik(row);
    Ok(tables.gradient_given_posterior(row, &post, parametrization))
}

/// Per-student gradient of the PCM marginal log-likelihood (natural α).
pub fn student_gradient_pcm(
    row: &[u32],
    items: &[ItemParamsPCM],
    s: f64,
    grid: &QuadratureGrid,
) -> Result<PerStudentGradient> {
    let bank = ItemBank::Pcm(items.to_vec());
    check_row(row, &bank)?;
    check_finite("s", s)?;
    let tables = NodeTables::from_pcm(items, s, grid);
    let (post, _) = tables.posterior_and_loglik(row);
    Ok(tables.gradient_given_posterior(row, &post, Parametrization::NaturalAlpha))
}

/// Expected-a-posteriori ability score and posterior standard deviation.
pub fn eap_ability(row: &[u32], items: &ItemBank, s: f64, grid: &QuadratureGrid) -> Result<(f64, f64)> {
    check_row(row, items)?;
    check_finite("s", s)?;
    let tables = NodeTables::for_bank(items, s, grid);
    let (post, _) = tables.posterior_and_loglik(row);
    Ok(tables.eap_given_posterior(&post))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_grid() -> QuadratureGrid {
        build_grid(DEFAULT_THETA0, DEFAULT_NODES).unwrap()
    }

    #[test]
    fn prob_2pl_zero_logit_is_half() {
        assert_eq!(prob_2pl(1.0, 0.0, 0.0, 0.0).unwrap(), 0.5);
        assert_eq!(prob_2pl(2.0, 1.0, 0.0, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn prob_2pl_matches_high_precision_sigmoid() {
        // σ(2), computed with 50-digit arithmetic.
        let p = prob_2pl(1.0, 0.0, 1.0, 1.0).unwrap();
        assert!((p - 0.880_797_077_977_882_4).abs() < 1e-15);
    }

    #[test]
    fn prob_2pl_rejects_bad_inputs() {
        assert!(prob_2pl(f64::NAN, 0.0, 0.0, 0.0).is_err());
        assert!(prob_2pl(1.0, f64::INFINITY, 0.0, 0.0).is_err());
        assert!(prob_2pl(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(prob_2pl(-1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn prob_2pl_monotone_in_theta_and_s() {
        let lo = prob_2pl(1.3, 0.2, 0.0, -0.5).unwrap();
        let hi = prob_2pl(1.3, 0.2, 0.0, 0.5).unwrap();
        assert!(hi > lo);
        let lo = prob_2pl(1.3, 0.2, -0.5, 0.1).unwrap();
        let hi = prob_2pl(1.3, 0.2, 0.5, 0.1).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn pcm_two_categories_reduces_to_2pl() {
        let item = ItemParamsPCM::new(1.7, vec![0.4]).unwrap();
        for theta in [-2.0, -0.3, 0.0, 1.1, 3.0] {
            let p2 = prob_2pl(1.7, 0.4, 0.25, theta).unwrap();
            let pcm = prob_pcm(&item, 0.25, theta).unwrap();
            assert!((pcm[0] - (1.0 - p2)).abs() < 1e-12);
            assert!((pcm[1] - p2).abs() < 1e-12);
        }
    }

    #[test]
    fn pcm_zero_deviations_are_uniform() {
        let item = ItemParamsPCM::new(2.3, vec![0.7, 0.7, 0.7]).unwrap();
        let p = prob_pcm(&item, 0.2, 0.5).unwrap(); // theta + s = beta_h for all h
        for v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn pcm_direct_evaluation_example() {
        // α=1, betas=[−1, 1], s=0, θ=0: cumulative sums (0, 1, 0), so the
        // normalized vector is (1, e, 1)/(2 + e). Values from 50-digit
        // arithmetic.
        let item = ItemParamsPCM::new(1.0, vec![-1.0, 1.0]).unwrap();
        let p = prob_pcm(&item, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.211_941_557_617_085_45).abs() < 1e-12);
        assert!((p[1] - 0.576_116_884_765_829_1).abs() < 1e-12);
        assert!((p[2] - 0.211_941_557_617_085_45).abs() < 1e-12);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_nodes_and_weights() {
        let g = build_grid(4.0, 21).unwrap();
        assert_eq!(g.nodes[0], -4.0);
        assert_eq!(g.nodes[20], 4.0);
        assert!((g.spacing() - 0.4).abs() < 1e-15);
        // Σ A(n) = Φ(4.2) − Φ(−4.2), 50-digit value.
        let total: f64 = g.weights.iter().sum();
        assert!((total - 0.999_973_308_501_968_2).abs() < 1e-12);
        assert!(total <= 1.0);
    }

    #[test]
    fn grid_two_node_edge_case() {
        let g = build_grid(1.0, 2).unwrap();
        assert_eq!(g.nodes, vec![-1.0, 1.0]);
        // A(1) = Φ(0) − Φ(−2), 50-digit value.
        assert!((g.weights[0] - 0.477_249_868_051_820_79).abs() < 1e-13);
        assert_eq!(g.weights[0], g.weights[1]);
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(build_grid(4.0, 1).is_err());
        assert!(build_grid(4.0, 0).is_err());
        assert!(build_grid(0.0, 21).is_err());
        assert!(build_grid(-1.0, 21).is_err());
    }

    #[test]
    fn empty_row_loglik_is_log_total_weight() {
        let grid = default_grid();
        let bank = ItemBank::two_pl(&[], &[]).unwrap();
        let ll = marginal_loglik(&[], &bank, 0.0, &grid).unwrap();
        let expect = grid.weights.iter().sum::<f64>().ln();
        assert!((ll - expect).abs() < 1e-14);
    }

    #[test]
    fn single_item_symmetry() {
        let grid = default_grid();
        let bank = ItemBank::two_pl(&[1.0], &[0.0]).unwrap();
        let l1 = marginal_loglik(&[1], &bank, 0.0, &grid).unwrap();
        let l0 = marginal_loglik(&[0], &bank, 0.0, &grid).unwrap();
        assert!((l1 - l0).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_naive_summation() {
        // Direct probability-space evaluation, no log-sum-exp.
        let grid = default_grid();
        let alpha = [0.8, 1.4, 2.0, 1.1, 0.6];
        let beta = [-1.2, -0.4, 0.0, 0.7, 1.5];
        let bank = ItemBank::two_pl(&alpha, &beta).unwrap();
        let row = [1u32, 0, 1, 1, 0];
        let s = 0.3;
        let mut naive = 0.0;
        for (n, &v) in grid.nodes.iter().enumerate() {
            let mut cond = 1.0;
            for j in 0..5 {
                let p = sigmoid(alpha[j] * (v + s - beta[j]));
                cond *= if row[j] == 1 { p } else { 1.0 - p };
            }
            naive += cond * grid.weights[n];
        }
        let ll = marginal_loglik(&row, &bank, s, &grid).unwrap();
        assert!((ll - naive.ln()).abs() < 1e-10);
    }

    #[test]
    fn empty_row_posterior_is_normalized_prior() {
        let grid = default_grid();
        let bank = ItemBank::two_pl(&[], &[]).unwrap();
        let post = bin_posterior(&[], &bank, 0.0, &grid).unwrap();
        let total: f64 = grid.weights.iter().sum();
        for (p, w) in post.iter().zip(&grid.weights) {
            assert!((p - w / total).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_sums_to_one_and_is_nonnegative() {
        let grid = default_grid();
        let bank = ItemBank::two_pl(&[1.2, 0.7, 1.9], &[-0.5, 0.2, 1.0]).unwrap();
        for row in [[1u32, 1, 1], [0, 0, 0], [1, 0, 1]] {
            let post = bin_posterior(&row, &bank, -0.2, &grid).unwrap();
            let sum: f64 = post.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(post.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn correct_answer_raises_posterior_mean() {
        let grid = default_grid();
        let bank = ItemBank::two_pl(&[1.0], &[0.0]).unwrap();
        let prior_mean: f64 = {
            let tot: f64 = grid.weights.iter().sum();
            grid.nodes.iter().zip(&grid.weights).map(|(v, w)| v * w / tot).sum()
        };
        let post = bin_posterior(&[1], &bank, 0.0, &grid).unwrap();
        let mean: f64 = post.iter().zip(&grid.nodes).map(|(p, v)| p * v).sum();
        assert!(mean > prior_mean);
    }

    #[test]
    fn school_effect_gradient_mirrors_difficulty_sum() {
        let grid = default_grid();
        let items = [
            ItemParams2PL::new(1.2, -0.5).unwrap(),
            ItemParams2PL::new(0.7, 0.2).unwrap(),
            ItemParams2PL::new(1.9, 1.0).unwrap(),
        ];
        let g = student_gradient_2pl(&[1, 0, 1], &items, 0.4, &grid, Parametrization::NaturalAlpha)
            .unwrap();
        let minus_beta_sum: f64 = -g.d_beta.iter().sum::<f64>();
        assert_eq!(g.d_s, minus_beta_sum);
    }

    #[test]
    fn log_alpha_chain_rule_is_exact() {
        let grid = default_grid();
        let items = [
            ItemParams2PL::new(1.2, -0.5).unwrap(),
            ItemParams2PL::new(0.7, 0.2).unwrap(),
        ];
        for row in [[1u32, 0], [0, 0], [1, 1]] {
            let nat =
                student_gradient_2pl(&row, &items, 0.1, &grid, Parametrization::NaturalAlpha).unwrap();
            let log =
                student_gradient_2pl(&row, &items, 0.1, &grid, Parametrization::LogAlpha).unwrap();
            for j in 0..2 {
                assert_eq!(log.d_alpha[j], items[j].alpha * nat.d_alpha[j]);
            }
            assert_eq!(log.d_beta, nat.d_beta);
            assert_eq!(log.d_s, nat.d_s);
        }
    }

    #[test]
    fn pcm_gradient_reduces_to_2pl_at_two_categories() {
        let grid = default_grid();
        let pcm = vec![
            ItemParamsPCM::new(1.2, vec![-0.5]).unwrap(),
            ItemParamsPCM::new(0.7, vec![0.2]).unwrap(),
        ];
        let tpl = [
            ItemParams2PL::new(1.2, -0.5).unwrap(),
            ItemParams2PL::new(0.7, 0.2).unwrap(),
        ];
        for row in [[1u32, 0], [0, 0], [1, 1]] {
            let gp = student_gradient_pcm(&row, &pcm, 0.3, &grid).unwrap();
            let g2 = student_gradient_2pl(&row, &tpl, 0.3, &grid, Parametrization::NaturalAlpha)
                .unwrap();
            for j in 0..2 {
                assert!((gp.d_alpha[j] - g2.d_alpha[j]).abs() < 1e-10);
                assert!((gp.d_beta[j] - g2.d_beta[j]).abs() < 1e-10);
            }
            assert!((gp.d_s - g2.d_s).abs() < 1e-10);
        }
    }

    #[test]
    fn pcm_step_gradients_sum_against_school_effect() {
        let grid = default_grid();
        // Single item: the step-gradient sum must equal minus the item's
        // school-effect contribution, which here is all of d_s.
        let items = vec![ItemParamsPCM::new(1.4, vec![-0.8, 0.1, 0.9]).unwrap()];
        for x in 0..4u32 {
            let g = student_gradient_pcm(&[x], &items, -0.2, &grid).unwrap();
            let step_sum: f64 = g.d_beta.iter().sum();
            assert!((step_sum + g.d_s).abs() < 1e-12);
        }
    }

    #[test]
    fn eap_empty_row_is_centered() {
        let grid = default_grid();
        let bank = ItemBank::two_pl(&[], &[]).unwrap();
        let (mean, sd) = eap_ability(&[], &bank, 0.0, &grid).unwrap();
        assert!(mean.abs() < 1e-14);
        assert!(sd > 0.9 && sd < 1.1);
    }

    #[test]
    fn eap_all_correct_is_positive_and_bounded() {
        let grid = default_grid();
        let bank = ItemBank::two_pl(&[1.0, 1.3, 0.8], &[-1.0, 0.0, 1.0]).unwrap();
        let (mean, _) = eap_ability(&[1, 1, 1], &bank, 0.0, &grid).unwrap();
        assert!(mean > 0.0);
        assert!(mean >= -grid.theta0 && mean <= grid.theta0);
        let (lo, _) = eap_ability(&[0, 0, 0], &bank, 0.0, &grid).unwrap();
        assert!(lo < 0.0);
        assert!(lo >= -grid.theta0);
    }

    #[test]
    fn response_matrix_validation() {
        assert!(ResponseMatrix::new(vec![vec![0, 1], vec![1, 2]], vec![2, 2]).is_err());
        assert!(ResponseMatrix::new(vec![vec![0, 1], vec![1]], vec![2, 2]).is_err());
        assert!(ResponseMatrix::new(vec![vec![0, 1]], vec![2, 1]).is_err());
        let m = ResponseMatrix::new(vec![vec![0, 2], vec![1, 0]], vec![2, 3]).unwrap();
        assert_eq!(m.row(0), &[0, 2]);
        assert_eq!(m.n_students(), 2);
    }
}
