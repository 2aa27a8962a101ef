//! Simulation harness: data generation, contamination, the meta-analysis
//! and random-effect baselines, recovery metrics, and the three study
//! designs at desk scale.
//!
//! Every study is deterministic under its master seed: items are drawn once
//! per data design and held fixed across replications, abilities and
//! responses draw from per-replication streams, and replications run in
//! parallel on independent streams.

use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::federation::{
    center_fit_dp, center_fit_plain, DpFit, DpOptions, LocalSchool, ModelKind, PlainFit,
    PlainOptions, SchoolCompute, SchoolHandle,
};
use crate::irt::{build_grid, ItemBank, ResponseMatrix, DEFAULT_NODES, DEFAULT_THETA0};
use crate::rng::{derive_seed, stream, tag};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// Configuration and generation
// ---------------------------------------------------------------------------

/// Extreme-row contamination applied per school after sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Contamination {
    None,
    /// A ⌊rate·N_k⌋ subset of rows answers 0 everywhere.
    Zeros { rate: f64 },
    /// A ⌊rate·N_k⌋ subset of rows answers the top category everywhere.
    Ones { rate: f64 },
}

impl Contamination {
    pub fn rate(&self) -> f64 {
        match self {
            Contamination::None => 0.0,
            Contamination::Zeros { rate } | Contamination::Ones { rate } => *rate,
        }
    }
}

/// One data design: dimensions, truth ranges, school effects, contamination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub n_items: usize,
    pub n_schools: usize,
    pub students_per_school: usize,
    pub replications: usize,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub s_true: Vec<f64>,
    pub contamination: Contamination,
    pub seed: u64,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_schools == 0 || self.students_per_school == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("need at least one replication".into()));
        }
        for (name, (lo, hi)) in [("alpha", self.alpha_range), ("beta", self.beta_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("invalid {name} range [{lo}, {hi})")));
            }
        }
        if self.alpha_range.0 <= 0.0 {
            return Err(Error::Config("alpha range must be positive".into()));
        }
        if self.s_true.len() != self.n_schools {
            return Err(Error::Config(format!(
                "s_true has {} entries for {} schools",
                self.s_true.len(),
                self.n_schools
            )));
        }
        let rate = self.contamination.rate();
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("contamination rate {rate} outside [0, 1]")));
        }
        Ok(())
    }

    /// Identifies the data design independent of contamination, so cells
    /// that share a design (e.g. one contamination ladder) reuse the same
    /// clean draws.
    fn data_key(&self) -> u64 {
        let mut key = derive_seed(
            self.seed,
            &[
                self.n_items as u64,
                self.n_schools as u64,
                self.students_per_school as u64,
                self.alpha_range.0.to_bits(),
                self.alpha_range.1.to_bits(),
                self.beta_range.0.to_bits(),
                self.beta_range.1.to_bits(),
            ],
        );
        for s in &self.s_true {
            key = derive_seed(key, &[s.to_bits()]);
        }
        key
    }
}

/// The generating parameters of a study condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub s: Vec<f64>,
}

/// Item parameters for a design, fixed across its replications. Uniform
/// draws use the half-open convention [lo, hi).
pub fn draw_item_params(cfg: &StudyConfig) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream(cfg.seed, &[tag::ITEMS, cfg.data_key()]);
    let alpha = (0..cfg.n_items)
        .map(|_| rng.random_range(cfg.alpha_range.0..cfg.alpha_range.1))
        .collect();
    let beta = (0..cfg.n_items)
        .map(|_| rng.random_range(cfg.beta_range.0..cfg.beta_range.1))
        .collect();
    (alpha, beta)
}

/// One replication's data: per-school response matrices, the abilities that
/// produced them, and the truth.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub schools: Vec<ResponseMatrix>,
    pub thetas: Vec<Vec<f64>>,
    pub truth: TrueParams,
}

/// Simulate one replication under the 2PL model: θ ~ N(0, 1) per student,
/// responses Bernoulli with each school's effect applied, then the
/// configured contamination.
pub fn generate_dataset(cfg: &StudyConfig, replication: usize) -> Result<GeneratedData> {
    cfg.validate()?;
    let key = cfg.data_key();
    let (alpha, beta) = draw_item_params(cfg);
    let rep = replication as u64;
    let mut schools = Vec::with_capacity(cfg.n_schools);
    let mut thetas = Vec::with_capacity(cfg.n_schools);
    for k in 0..cfg.n_schools {
        let mut theta_rng = stream(cfg.seed, &[tag::THETA, key, rep, k as u64]);
        let mut resp_rng = stream(cfg.seed, &[tag::RESPONSES, key, rep, k as u64]);
        let theta: Vec<f64> =
            (0..cfg.students_per_school).map(|_| StandardNormal.sample(&mut theta_rng)).collect();
        let rows: Vec<Vec<u32>> = theta
            .iter()
            .map(|&t| {
                (0..cfg.n_items)
                    .map(|j| {
                        let p = crate::irt::sigmoid(alpha[j] * (t + cfg.s_true[k] - beta[j]));
                        u32::from(resp_rng.random_bool(p))
                    })
                    .collect()
            })
            .collect();
        let matrix = ResponseMatrix::dichotomous(rows, cfg.n_items)?;
        let matrix = match cfg.contamination {
            Contamination::None => matrix,
            Contamination::Zeros { rate } => {
                let mut rng = stream(cfg.seed, &[tag::CONTAMINATION, key, rep, k as u64]);
                contaminate(&matrix, ContaminationKind::Zeros, rate, &mut rng)?
            }
            Contamination::Ones { rate } => {
                let mut rng = stream(cfg.seed, &[tag::CONTAMINATION, key, rep, k as u64]);
                contaminate(&matrix, ContaminationKind::Ones, rate, &mut rng)?
            }
        };
        schools.push(matrix);
        thetas.push(theta);
    }
    Ok(GeneratedData {
        schools,
        thetas,
        truth: TrueParams { alpha, beta, s: cfg.s_true.clone() },
    })
}

/// Which constant row replaces the selected students.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContaminationKind {
    Zeros,
    Ones,
}

/// Replace ⌊rho·N⌋ randomly chosen rows with a constant row.
pub fn contaminate<R: Rng>(
    matrix: &ResponseMatrix,
    kind: ContaminationKind,
    rho: f64,
    rng: &mut R,
) -> Result<ResponseMatrix> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("contamination rate {rho} outside [0, 1]")));
    }
    let n = matrix.n_students();
    let m = (rho * n as f64).floor() as usize;
    let mut out = matrix.clone();
    if m == 0 {
        return Ok(out);
    }
    // Partial Fisher-Yates: the first m entries are a uniform m-subset, and
    // nested across increasing rho under a shared stream.
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let row: Vec<u32> = match kind {
        ContaminationKind::Zeros => vec![0; matrix.n_items()],
        ContaminationKind::Ones => matrix.categories().iter().map(|&c| c - 1).collect(),
    };
    for &i in &order[..m] {
        out.set_row(i, &row)?;
    }
    Ok(out)
}

/// Sample-size-weighted average of per-school local estimates.
pub fn meta_baseline(
    local: &[(Vec<f64>, Vec<f64>)],
    weights: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if local.is_empty() || local.len() != weights.len() {
        return Err(Error::Contract("one local estimate and weight per school".into()));
    }
    let n_items = local[0].0.len();
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut alpha = vec![0.0; n_items];
    let mut beta = vec![0.0; n_items];
    for ((a, b), &w) in local.iter().zip(weights) {
        if a.len() != n_items || b.len() != n_items {
            return Err(Error::Contract("local estimates have mixed lengths".into()));
        }
        let w = w as f64 / total;
        for j in 0..n_items {
            alpha[j] += w * a[j];
            beta[j] += w * b[j];
        }
    }
    Ok((alpha, beta))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// One replication's parameter estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationEstimate {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub s: Option<Vec<f64>>,
}

/// Recovery metrics over a set of replications. MSE averages squared error
/// over items (or schools) and replications; bias drops the square.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse_alpha: f64,
    pub mse_beta: f64,
    pub bias_alpha: f64,
    pub bias_beta: f64,
    pub mse_s: Option<Vec<f64>>,
    pub bias_s: Option<Vec<f64>>,
    pub per_replication: Vec<ReplicationEstimate>,
}

fn family_errors(estimates: &[&Vec<f64>], truth: &[f64]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut signed = 0.0;
    let mut count = 0usize;
    for est in estimates {
        for (e, t) in est.iter().zip(truth) {
            let d = e - t;
            sq += d * d;
            signed += d;
            count += 1;
        }
    }
    (sq / count as f64, signed / count as f64)
}

/// Score replications against the truth.
pub fn score_replications(
    estimates: &[ReplicationEstimate],
    truth: &TrueParams,
) -> Result<MetricReport> {
    if estimates.is_empty() {
        return Err(Error::Contract("need at least one replication".into()));
    }
    for est in estimates {
        if est.alpha.len() != truth.alpha.len() || est.beta.len() != truth.beta.len() {
            return Err(Error::Contract("estimate dimensions do not match the truth".into()));
        }
    }
    let alphas: Vec<&Vec<f64>> = estimates.iter().map(|e| &e.alpha).collect();
    let betas: Vec<&Vec<f64>> = estimates.iter().map(|e| &e.beta).collect();
    let (mse_alpha, bias_alpha) = family_errors(&alphas, &truth.alpha);
    let (mse_beta, bias_beta) = family_errors(&betas, &truth.beta);

    let (mse_s, bias_s) = if estimates.iter().all(|e| e.s.is_some()) {
        let t = estimates.len() as f64;
        let k_count = truth.s.len();
        let mut mse = vec![0.0; k_count];
        let mut bias = vec![0.0; k_count];
        for est in estimates {
            let s = est.s.as_ref().unwrap();
            if s.len() != k_count {
                return Err(Error::Contract(
                    "school-effect estimates have the wrong length".into(),
                ));
            }
            for k in 0..k_count {
                let d = s[k] - truth.s[k];
                mse[k] += d * d / t;
                bias[k] += d / t;
            }
        }
        (Some(mse), Some(bias))
    } else {
        (None, None)
    };

    Ok(MetricReport {
        mse_alpha,
        mse_beta,
        bias_alpha,
        bias_beta,
        mse_s,
        bias_s,
        per_replication: estimates.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Estimation methods
// ---------------------------------------------------------------------------

/// Estimation route run against a replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Pool every school's rows at the center and fit with s ≡ 0.
    Central,
    /// Gradient-federated fit (exact sums).
    Federated,
    /// Differentially private federated fit.
    FederatedDp,
    /// Per-school local fits, sample-size-weighted average.
    Meta,
    /// Items fit with s ≡ 0; school effects read off as mean EAP ability.
    RandomEffect,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Central => "central",
            Method::Federated => "federated",
            Method::FederatedDp => "federated-dp",
            Method::Meta => "meta",
            Method::RandomEffect => "random-effect",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "central" => Ok(Method::Central),
            "federated" => Ok(Method::Federated),
            "federated-dp" => Ok(Method::FederatedDp),
            "meta" => Ok(Method::Meta),
            "random-effect" => Ok(Method::RandomEffect),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn local_handles(schools: &[ResponseMatrix]) -> Vec<Box<dyn SchoolHandle>> {
    schools
        .iter()
        .enumerate()
        .map(|(k, m)| {
            Box::new(LocalSchool::new(SchoolCompute::new(k as u32, m.clone())))
                as Box<dyn SchoolHandle>
        })
        .collect()
}

/// Federated plain fit over in-process schools.
pub fn fit_federated(
    schools: &[ResponseMatrix],
    estimate_s: bool,
    tol: f64,
    max_rounds: u32,
) -> Result<PlainFit> {
    let mut handles = local_handles(schools);
    center_fit_plain(
        &mut handles,
        &PlainOptions {
            model: ModelKind::TwoPl,
            theta0: DEFAULT_THETA0,
            q: DEFAULT_NODES,
            tol,
            max_rounds,
            estimate_s,
        },
    )
}

/// Pool all rows into one site and fit with the school effect pinned at
/// zero.
pub fn fit_pooled(schools: &[ResponseMatrix], tol: f64, max_rounds: u32) -> Result<PlainFit> {
    let n_items = schools[0].n_items();
    let rows: Vec<Vec<u32>> = schools
        .iter()
        .flat_map(|m| m.rows().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect();
    let pooled = ResponseMatrix::dichotomous(rows, n_items)?;
    fit_federated(std::slice::from_ref(&pooled), false, tol, max_rounds)
}

/// Differentially private federated fit over in-process schools.
pub fn fit_dp(
    schools: &[ResponseMatrix],
    dp: &DpConfig,
    master_seed: u64,
    estimate_s: bool,
) -> Result<DpFit> {
    let mut handles = local_handles(schools);
    center_fit_dp(
        &mut handles,
        &DpOptions {
            dp: dp.clone(),
            theta0: DEFAULT_THETA0,
            q: DEFAULT_NODES,
            estimate_s,
            master_seed,
        },
    )
}

/// Per-school local fits averaged by sample size.
pub fn fit_meta(
    schools: &[ResponseMatrix],
    tol: f64,
    max_rounds: u32,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut locals = Vec::with_capacity(schools.len());
    let mut weights = Vec::with_capacity(schools.len());
    for m in schools {
        let fit = fit_federated(std::slice::from_ref(m), false, tol, max_rounds)?;
        locals.push((fit.alpha, fit.beta));
        weights.push(m.n_students());
    }
    meta_baseline(&locals, &weights)
}

/// Fit items with s ≡ 0, then score each school as the mean EAP ability of
/// its students.
pub fn fit_random_effect(
    schools: &[ResponseMatrix],
    tol: f64,
    max_rounds: u32,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let fit = fit_federated(schools, false, tol, max_rounds)?;
    let bank = ItemBank::two_pl(&fit.alpha, &fit.beta)?;
    let grid = build_grid(DEFAULT_THETA0, DEFAULT_NODES)?;
    let mut s_hat = Vec::with_capacity(schools.len());
    for (k, m) in schools.iter().enumerate() {
        let compute = SchoolCompute::new(k as u32, m.clone());
        let scores = compute.eap_scores(&bank, 0.0, &grid)?;
        s_hat.push(scores.iter().map(|(mean, _)| mean).sum::<f64>() / scores.len().max(1) as f64);
    }
    Ok((fit.alpha, fit.beta, s_hat))
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

/// Scale knobs of a study run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOptions {
    pub replications: usize,
    pub methods: Vec<Method>,
    /// Per-school sizes (study 1 only).
    pub n_k_list: Vec<usize>,
    /// Contamination rates (study 3 only).
    pub rhos: Vec<f64>,
    pub seed: u64,
    pub tol: f64,
    pub max_rounds: u32,
    pub dp: DpConfig,
}

/// Desk-scale defaults for a study (the original designs use T = 100).
pub fn study_defaults(study: u8) -> Result<StudyOptions> {
    let base = StudyOptions {
        replications: 20,
        methods: vec![],
        n_k_list: vec![50, 100, 300],
        rhos: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        seed: 20_240_501,
        tol: 1e-4,
        max_rounds: 500,
        dp: DpConfig::default(),
    };
    match study {
        1 => Ok(StudyOptions {
            methods: vec![Method::Federated, Method::FederatedDp, Method::Central, Method::Meta],
            ..base
        }),
        2 => Ok(StudyOptions {
            methods: vec![Method::Federated, Method::FederatedDp, Method::RandomEffect],
            ..base
        }),
        3 => Ok(StudyOptions { methods: vec![Method::Federated, Method::FederatedDp], ..base }),
        other => Err(Error::Config(format!("unknown study {other}; expected 1, 2 or 3"))),
    }
}

/// One (method, sample-size, contamination) cell of a condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub method: Method,
    pub n_k: usize,
    pub rho: f64,
    pub metrics: MetricReport,
}

/// All cells of one truth condition, plus the generating parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub label: String,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub truth: TrueParams,
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: u8,
    pub seed: u64,
    pub replications: usize,
    pub conditions: Vec<ConditionReport>,
}

impl StudyReport {
    /// Look up a cell's metrics.
    pub fn cell(&self, label: &str, method: Method, n_k: usize, rho: f64) -> Option<&MetricReport> {
        self.conditions.iter().find(|c| c.label == label).and_then(|c| {
            c.cells
                .iter()
                .find(|cell| cell.method == method && cell.n_k == n_k && cell.rho == rho)
                .map(|cell| &cell.metrics)
        })
    }
}

struct CellSpec {
    cfg: StudyConfig,
    estimate_s: bool,
    rho: f64,
}

fn run_cell(
    spec: &CellSpec,
    opts: &StudyOptions,
) -> Result<Vec<(Method, Vec<ReplicationEstimate>)>> {
    let key = spec.cfg.data_key();
    let per_rep: Vec<Vec<(Method, ReplicationEstimate)>> = (0..opts.replications)
        .into_par_iter()
        .map(|rep| -> Result<Vec<(Method, ReplicationEstimate)>> {
            let data = generate_dataset(&spec.cfg, rep)?;
            let mut out = Vec::with_capacity(opts.methods.len());
            for &method in &opts.methods {
                let est = match method {
                    Method::Central => {
                        let fit = fit_pooled(&data.schools, opts.tol, opts.max_rounds)?;
                        ReplicationEstimate { alpha: fit.alpha, beta: fit.beta, s: None }
                    }
                    Method::Federated => {
                        let fit = fit_federated(
                            &data.schools,
                            spec.estimate_s,
                            opts.tol,
                            opts.max_rounds,
                        )?;
                        let s = spec.estimate_s.then_some(fit.s);
                        ReplicationEstimate { alpha: fit.alpha, beta: fit.beta, s }
                    }
                    Method::FederatedDp => {
                        let master = derive_seed(
                            spec.cfg.seed,
                            &[tag::FIT, key, spec.rho.to_bits(), rep as u64],
                        );
                        let fit = fit_dp(&data.schools, &opts.dp, master, spec.estimate_s)?;
                        let s = spec.estimate_s.then_some(fit.s);
                        ReplicationEstimate { alpha: fit.alpha, beta: fit.beta, s }
                    }
                    Method::Meta => {
                        let (alpha, beta) = fit_meta(&data.schools, opts.tol, opts.max_rounds)?;
                        ReplicationEstimate { alpha, beta, s: None }
                    }
                    Method::RandomEffect => {
                        let (alpha, beta, s) =
                            fit_random_effect(&data.schools, opts.tol, opts.max_rounds)?;
                        ReplicationEstimate { alpha, beta, s: Some(s) }
                    }
                };
                out.push((method, est));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: Vec<(Method, Vec<ReplicationEstimate>)> =
        opts.methods.iter().map(|&m| (m, Vec::with_capacity(opts.replications))).collect();
    for rep_out in per_rep {
        for (slot, (method, est)) in grouped.iter_mut().zip(rep_out) {
            debug_assert_eq!(slot.0, method);
            slot.1.push(est);
        }
    }
    Ok(grouped)
}

/// Run one study and optionally write its per-condition CSV/JSON reports.
pub fn run_study(study: u8, opts: &StudyOptions, out_dir: Option<&Path>) -> Result<StudyReport> {
    if opts.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let mut conditions = Vec::new();
    match study {
        1 => {
            // Four truth conditions crossing high/low discrimination and
            // difficulty; school effects zero and held fixed in the fits.
            let ranges = [
                ((1.0, 2.0), (0.0, 1.0)),
                ((1.0, 2.0), (-1.0, 0.0)),
                ((0.5, 1.0), (0.0, 1.0)),
                ((0.5, 1.0), (-1.0, 0.0)),
            ];
            for (alpha_range, beta_range) in ranges {
                let label = format!(
                    "alpha_{:.1}-{:.1}_beta_{:.1}-{:.1}",
                    alpha_range.0, alpha_range.1, beta_range.0, beta_range.1
                );
                let mut cells = Vec::new();
                let mut truth: Option<TrueParams> = None;
                for &n_k in &opts.n_k_list {
                    let cfg = StudyConfig {
                        n_items: 10,
                        n_schools: 10,
                        students_per_school: n_k,
                        replications: opts.replications,
                        alpha_range,
                        beta_range,
                        s_true: vec![0.0; 10],
                        contamination: Contamination::None,
                        seed: opts.seed,
                    };
                    let spec = CellSpec { cfg, estimate_s: false, rho: 0.0 };
                    let (a, b) = draw_item_params(&spec.cfg);
                    let cell_truth = TrueParams { alpha: a, beta: b, s: vec![0.0; 10] };
                    for (method, estimates) in run_cell(&spec, opts)? {
                        let metrics = score_replications(&estimates, &cell_truth)?;
                        cells.push(CellReport { method, n_k, rho: 0.0, metrics });
                    }
                    truth.get_or_insert(cell_truth);
                }
                conditions.push(ConditionReport {
                    label,
                    alpha_range,
                    beta_range,
                    truth: truth.unwrap(),
                    cells,
                });
            }
        }
        2 => {
            let alpha_range = (0.5, 2.0);
            let beta_range = (-1.0, 1.0);
            let cfg = StudyConfig {
                n_items: 10,
                n_schools: 5,
                students_per_school: 100,
                replications: opts.replications,
                alpha_range,
                beta_range,
                s_true: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
                contamination: Contamination::None,
                seed: opts.seed,
            };
            let (a, b) = draw_item_params(&cfg);
            let truth = TrueParams { alpha: a, beta: b, s: cfg.s_true.clone() };
            let spec = CellSpec { cfg, estimate_s: true, rho: 0.0 };
            let mut cells = Vec::new();
            for (method, estimates) in run_cell(&spec, opts)? {
                let metrics = score_replications(&estimates, &truth)?;
                cells.push(CellReport { method, n_k: 100, rho: 0.0, metrics });
            }
            conditions.push(ConditionReport {
                label: "fixed_school_effects".into(),
                alpha_range,
                beta_range,
                truth,
                cells,
            });
        }
        3 => {
            let alpha_range = (0.5, 2.0);
            let beta_range = (-1.0, 1.0);
            for kind in [ContaminationKind::Zeros, ContaminationKind::Ones] {
                let label = match kind {
                    ContaminationKind::Zeros => "zeros".to_string(),
                    ContaminationKind::Ones => "ones".to_string(),
                };
                let mut cells = Vec::new();
                let mut truth: Option<TrueParams> = None;
                for &rho in &opts.rhos {
                    let contamination = match kind {
                        ContaminationKind::Zeros => Contamination::Zeros { rate: rho },
                        ContaminationKind::Ones => Contamination::Ones { rate: rho },
                    };
                    let cfg = StudyConfig {
                        n_items: 10,
                        n_schools: 10,
                        students_per_school: 100,
                        replications: opts.replications,
                        alpha_range,
                        beta_range,
                        s_true: vec![0.0; 10],
                        contamination,
                        seed: opts.seed,
                    };
                    let spec = CellSpec { cfg, estimate_s: false, rho };
                    let (a, b) = draw_item_params(&spec.cfg);
                    let cell_truth = TrueParams { alpha: a, beta: b, s: vec![0.0; 10] };
                    for (method, estimates) in run_cell(&spec, opts)? {
                        let metrics = score_replications(&estimates, &cell_truth)?;
                        cells.push(CellReport { method, n_k: 100, rho, metrics });
                    }
                    truth.get_or_insert(cell_truth);
                }
                conditions.push(ConditionReport {
                    label,
                    alpha_range,
                    beta_range,
                    truth: truth.unwrap(),
                    cells,
                });
            }
        }
        other => return Err(Error::Config(format!("unknown study {other}; expected 1, 2 or 3"))),
    }

    let report =
        StudyReport { study, seed: opts.seed, replications: opts.replications, conditions };
    if let Some(dir) = out_dir {
        write_study_reports(&report, opts, dir)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

fn per_replication_rows(
    truth: &TrueParams,
    metrics: &MetricReport,
) -> Vec<(String, usize, f64, f64)> {
    let mut rows = Vec::new();
    let fam = |est: &[f64], truth: &[f64]| -> (f64, f64) {
        let n = est.len().max(1) as f64;
        let mut sq = 0.0;
        let mut signed = 0.0;
        for (e, t) in est.iter().zip(truth) {
            let d = e - t;
            sq += d * d;
            signed += d;
        }
        (sq / n, signed / n)
    };
    for (rep, est) in metrics.per_replication.iter().enumerate() {
        let (mse_a, bias_a) = fam(&est.alpha, &truth.alpha);
        rows.push(("alpha".to_string(), rep, mse_a, bias_a));
        let (mse_b, bias_b) = fam(&est.beta, &truth.beta);
        rows.push(("beta".to_string(), rep, mse_b, bias_b));
        if let Some(s) = &est.s {
            let (mse_s, bias_s) = fam(s, &truth.s);
            rows.push(("s".to_string(), rep, mse_s, bias_s));
        }
    }
    rows
}

/// One CSV and one JSON mirror per condition, plus a run manifest carrying
/// the master seed.
pub fn write_study_reports(report: &StudyReport, opts: &StudyOptions, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "study": report.study,
        "seed": report.seed,
        "replications": report.replications,
        "methods": opts.methods,
        "n_k_list": opts.n_k_list,
        "rhos": opts.rhos,
        "tol": opts.tol,
        "dp": opts.dp,
    });
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;

    for cond in &report.conditions {
        let base = format!("study{}_{}", report.study, cond.label);
        let mut csv = String::from("method,n_k,rho,target,replication,mse,bias\n");
        for cell in &cond.cells {
            for (target, rep, mse, bias) in per_replication_rows(&cond.truth, &cell.metrics) {
                csv.push_str(&format!(
                    "{},{},{},{},{},{:.12e},{:.12e}\n",
                    cell.method, cell.n_k, cell.rho, target, rep, mse, bias
                ));
            }
        }
        std::fs::write(dir.join(format!("{base}.csv")), csv)?;
        let mut f = std::fs::File::create(dir.join(format!("{base}.json")))?;
        serde_json::to_writer_pretty(&mut f, cond)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> StudyConfig {
        StudyConfig {
            n_items: 3,
            n_schools: 2,
            students_per_school: 25,
            replications: 2,
            alpha_range: (0.8, 1.6),
            beta_range: (-0.5, 0.5),
            s_true: vec![0.3, -0.3],
            contamination: Contamination::None,
            seed: 99,
        }
    }

    #[test]
    fn datasets_replay_under_fixed_seed() {
        let cfg = tiny_cfg();
        let a = generate_dataset(&cfg, 1).unwrap();
        let b = generate_dataset(&cfg, 1).unwrap();
        assert_eq!(a.schools, b.schools);
        assert_eq!(a.thetas, b.thetas);
        let c = generate_dataset(&cfg, 2).unwrap();
        assert_ne!(a.schools, c.schools);
        // Items stay fixed across replications.
        assert_eq!(a.truth, c.truth);
    }

    #[test]
    fn empirical_proportions_match_the_model() {
        // Per-item proportion correct vs the quadrature-integrated model
        // probability on a fine grid, within 3 Monte-Carlo standard errors.
        let cfg = StudyConfig {
            n_items: 3,
            n_schools: 1,
            students_per_school: 100_000,
            replications: 1,
            alpha_range: (0.8, 1.8),
            beta_range: (-1.0, 1.0),
            s_true: vec![0.0],
            contamination: Contamination::None,
            seed: 7,
        };
        let data = generate_dataset(&cfg, 0).unwrap();
        let fine = build_grid(8.0, 801).unwrap();
        for j in 0..3 {
            let model_p: f64 = fine
                .nodes
                .iter()
                .zip(&fine.weights)
                .map(|(&v, &w)| {
                    crate::irt::sigmoid(data.truth.alpha[j] * (v - data.truth.beta[j])) * w
                })
                .sum();
            let emp: f64 = data.schools[0].rows().map(|r| r[j] as f64).sum::<f64>()
                / cfg.students_per_school as f64;
            let se = (model_p * (1.0 - model_p) / cfg.students_per_school as f64).sqrt();
            assert!(
                (emp - model_p).abs() < 3.0 * se,
                "item {j}: empirical {emp}, model {model_p}"
            );
        }
    }

    #[test]
    fn school_means_increase_with_the_school_effect() {
        let cfg = StudyConfig {
            n_items: 5,
            n_schools: 5,
            students_per_school: 5000,
            replications: 1,
            alpha_range: (0.8, 1.6),
            beta_range: (-0.5, 0.5),
            s_true: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            contamination: Contamination::None,
            seed: 11,
        };
        let data = generate_dataset(&cfg, 0).unwrap();
        let means: Vec<f64> = data
            .schools
            .iter()
            .map(|m| {
                m.rows().map(|r| r.iter().sum::<u32>() as f64).sum::<f64>() / m.n_students() as f64
            })
            .collect();
        for w in means.windows(2) {
            assert!(w[1] > w[0], "school mean scores {means:?} not increasing");
        }
    }

    #[test]
    fn contamination_rate_edge_cases() {
        let cfg = tiny_cfg();
        let data = generate_dataset(&cfg, 0).unwrap();
        let m = &data.schools[0];
        let mut rng = stream(1, &[2]);
        let same = contaminate(m, ContaminationKind::Zeros, 0.0, &mut rng).unwrap();
        assert_eq!(&same, m);
        let zeros = contaminate(m, ContaminationKind::Zeros, 1.0, &mut rng).unwrap();
        assert!(zeros.rows().all(|r| r.iter().all(|&x| x == 0)));
        let m100 = ResponseMatrix::dichotomous(vec![vec![1, 1]; 100], 2).unwrap();
        let hit = contaminate(&m100, ContaminationKind::Zeros, 0.3, &mut rng).unwrap();
        let constant_rows = hit.rows().filter(|r| r.iter().all(|&x| x == 0)).count();
        assert_eq!(constant_rows, 30);
    }

    #[test]
    fn meta_baseline_weighted_average() {
        let locals = vec![(vec![1.0], vec![0.0]), (vec![2.0], vec![1.0])];
        let (a, b) = meta_baseline(&locals, &[100, 300]).unwrap();
        assert!((a[0] - 1.75).abs() < 1e-12);
        assert!((b[0] - 0.75).abs() < 1e-12);
        // Equal locals collapse to that value.
        let locals = vec![(vec![1.3], vec![0.2]), (vec![1.3], vec![0.2])];
        let (a, _) = meta_baseline(&locals, &[10, 990]).unwrap();
        assert!((a[0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn scoring_identities() {
        let truth = TrueParams { alpha: vec![1.0, 2.0], beta: vec![0.0, 0.5], s: vec![] };
        // Perfect estimates: zero error.
        let perfect =
            vec![ReplicationEstimate { alpha: vec![1.0, 2.0], beta: vec![0.0, 0.5], s: None }; 3];
        let r = score_replications(&perfect, &truth).unwrap();
        assert_eq!(r.mse_alpha, 0.0);
        assert_eq!(r.bias_beta, 0.0);

        // Constant offset c: bias = c, MSE = c².
        let offset =
            vec![ReplicationEstimate { alpha: vec![1.2, 2.2], beta: vec![0.2, 0.7], s: None }; 4];
        let r = score_replications(&offset, &truth).unwrap();
        assert!((r.bias_alpha - 0.2).abs() < 1e-12);
        assert!((r.mse_alpha - 0.04).abs() < 1e-12);

        // MSE = bias² + population variance of the errors.
        let mixed = vec![
            ReplicationEstimate { alpha: vec![1.1, 2.3], beta: vec![0.0, 0.5], s: None },
            ReplicationEstimate { alpha: vec![0.8, 1.9], beta: vec![0.1, 0.4], s: None },
            ReplicationEstimate { alpha: vec![1.4, 2.0], beta: vec![-0.2, 0.6], s: None },
        ];
        let r = score_replications(&mixed, &truth).unwrap();
        let errs: Vec<f64> = mixed
            .iter()
            .flat_map(|e| e.alpha.iter().zip(&truth.alpha).map(|(a, t)| a - t))
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / errs.len() as f64;
        assert!((r.mse_alpha - (r.bias_alpha * r.bias_alpha + var)).abs() < 1e-12);
        assert!(r.mse_alpha >= r.bias_alpha * r.bias_alpha);
    }

    #[test]
    fn study_defaults_reject_unknown_ids() {
        assert!(study_defaults(4).is_err());
        assert!(study_defaults(0).is_err());
        assert_eq!(study_defaults(2).unwrap().methods.len(), 3);
    }
}
