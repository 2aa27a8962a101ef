//! The center role: enrollment, the lock-step round loop, and the two
//! estimation drivers — BFGS over exact gradient sums (plain) and
//! MAP-penalized Adam over noised masked aggregates (differentially
//! private).
//!
//! The global parameter vector is laid out `[α (or a) | β | s]`, items in
//! index order, then schools in school-id order. After every accepted
//! update the school-effect block is recentered to sum to zero.

use crate::accountant::{default_orders, ledger_for, PrivacyLedger};
use crate::dp::{gaussian_mechanism, map_penalty, DpConfig};
use crate::error::{Error, Result};
use crate::federation::messages::{
    bank_to_vectors, DpSetup, GradientMessage, ModelKind, Payload, RoundMessage, SessionSetup,
};
use crate::federation::school::SchoolCompute;
use crate::federation::transport::{recv_message, send_message, FrameIo};
use crate::irt::{build_grid, ItemBank, QuadratureGrid};
use crate::optim::{adam_step, bfgs_maximize_projected, AdamState, BfgsConfig};
use crate::rng::{derive_seed, stream, tag};
use crate::secure_agg::{aggregate_and_decode, build_schedules, MaskedShare};
use std::collections::VecDeque;

/// Index bookkeeping for the stacked global vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_items: usize,
    /// J for 2PL; Σ (C_j − 1) for PCM.
    pub n_steps: usize,
    pub n_schools: usize,
}

impl ParamLayout {
    pub fn new(model: ModelKind, categories: &[u32], n_schools: usize) -> Self {
        let n_items = categories.len();
        let n_steps = match model {
            ModelKind::TwoPl => n_items,
            ModelKind::Pcm => categories.iter().map(|&c| c as usize - 1).sum(),
        };
        Self { n_items, n_steps, n_schools }
    }

    pub fn dim(&self) -> usize {
        self.n_items + self.n_steps + self.n_schools
    }

    pub fn alpha(&self) -> std::ops::Range<usize> {
        0..self.n_items
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        self.n_items..self.n_items + self.n_steps
    }

    pub fn s(&self) -> std::ops::Range<usize> {
        self.n_items + self.n_steps..self.dim()
    }
}

/// A school's answer to a plain-round broadcast.
#[derive(Debug, Clone)]
pub enum SchoolReply {
    Grads(GradientMessage),
    Loglik { school_id: u32, loglik: f64 },
}

/// The center's view of one school, independent of whether it computes
/// in-process or across a transport.
pub trait SchoolHandle {
    fn id(&self) -> u32;
    fn n_students(&self) -> usize;
    fn categories(&self) -> Vec<u32>;
    fn setup(&mut self, setup: &SessionSetup) -> Result<()>;
    fn eval_plain(
        &mut self,
        round: u64,
        bank: &ItemBank,
        s_k: f64,
        want_grad: bool,
    ) -> Result<SchoolReply>;
    fn eval_dp(&mut self, round: u64, bank: &ItemBank, s_k: f64) -> Result<MaskedShare>;
    fn finish(&mut self, round: u64, bank: &ItemBank, s_k: f64) -> Result<()>;
}

// ---------------------------------------------------------------------------
// In-process school
// ---------------------------------------------------------------------------

/// A school computed in-process (central mode and the simulation harness).
/// Every derived quantity matches the remote path bit for bit.
pub struct LocalSchool {
    compute: SchoolCompute,
    grid: Option<QuadratureGrid>,
    dp: Option<DpSetup>,
}

impl LocalSchool {
    pub fn new(compute: SchoolCompute) -> Self {
        Self { compute, grid: None, dp: None }
    }
}

impl SchoolHandle for LocalSchool {
    fn id(&self) -> u32 {
        self.compute.school_id
    }

    fn n_students(&self) -> usize {
        self.compute.matrix().n_students()
    }

    fn categories(&self) -> Vec<u32> {
        self.compute.matrix().categories().to_vec()
    }

    fn setup(&mut self, setup: &SessionSetup) -> Result<()> {
        if setup.categories != self.categories() {
            return Err(Error::Protocol("setup categories do not match local data".into()));
        }
        self.grid = Some(build_grid(setup.theta0, setup.q)?);
        self.dp = setup.dp.clone();
        Ok(())
    }

    fn eval_plain(
        &mut self,
        round: u64,
        bank: &ItemBank,
        s_k: f64,
        want_grad: bool,
    ) -> Result<SchoolReply> {
        let grid = self.grid.as_ref().ok_or_else(|| Error::Protocol("school not set up".into()))?;
        if want_grad {
            let msg = super::school::school_round_plain(&self.compute, bank, s_k, grid, round)?;
            Ok(SchoolReply::Grads(msg))
        } else {
            let loglik = self.compute.loglik_only(bank, s_k, grid)?;
            Ok(SchoolReply::Loglik { school_id: self.id(), loglik })
        }
    }

    fn eval_dp(&mut self, round: u64, bank: &ItemBank, s_k: f64) -> Result<MaskedShare> {
        let grid = self.grid.as_ref().ok_or_else(|| Error::Protocol("school not set up".into()))?;
        let dp = self.dp.as_ref().ok_or_else(|| Error::Protocol("not a DP session".into()))?;
        let mut rng = stream(dp.school_seed, &[round]);
        super::school::school_round_dp(
            &self.compute,
            bank,
            s_k,
            grid,
            dp.q_s,
            dp.clip,
            &dp.schedule,
            dp.s_slot as usize,
            round,
            &mut rng,
        )
    }

    fn finish(&mut self, _round: u64, _bank: &ItemBank, _s_k: f64) -> Result<()> {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Remote school
// ---------------------------------------------------------------------------

/// A school reached over a framed transport (TCP or loopback).
pub struct RemoteSchool {
    io: Box<dyn FrameIo + Send>,
    school_id: u32,
    n_students: u32,
    categories: Vec<u32>,
}

impl RemoteSchool {
    /// Accept a school's HELLO on a fresh connection.
    pub fn accept(mut io: Box<dyn FrameIo + Send>) -> Result<Self> {
        match recv_message(io.as_mut())?.payload {
            Payload::Hello { school_id, n_students, categories } => {
                Ok(Self { io, school_id, n_students, categories })
            }
            other => Err(Error::Protocol(format!("expected HELLO, got {other:?}"))),
        }
    }

    fn expect_reply(&mut self, round: u64) -> Result<Payload> {
        let msg = recv_message(self.io.as_mut())?;
        if let Payload::Abort { reason } = msg.payload {
            return Err(Error::Protocol(format!("school {} aborted: {reason}", self.school_id)));
        }
        if msg.round != round {
            return Err(Error::Protocol(format!(
                "school {} answered round {} during round {round}",
                self.school_id, msg.round
            )));
        }
        Ok(msg.payload)
    }
}

impl SchoolHandle for RemoteSchool {
    fn id(&self) -> u32 {
        self.school_id
    }

    fn n_students(&self) -> usize {
        self.n_students as usize
    }

    fn categories(&self) -> Vec<u32> {
        self.categories.clone()
    }

    fn setup(&mut self, setup: &SessionSetup) -> Result<()> {
        send_message(self.io.as_mut(), &RoundMessage::new(0, Payload::Setup(setup.clone())))
    }

    fn eval_plain(
        &mut self,
        round: u64,
        bank: &ItemBank,
        s_k: f64,
        want_grad: bool,
    ) -> Result<SchoolReply> {
        let (alpha, beta) = bank_to_vectors(bank);
        send_message(
            self.io.as_mut(),
            &RoundMessage::new(round, Payload::Params { alpha, beta, s_k, want_grad }),
        )?;
        match self.expect_reply(round)? {
            Payload::Grads(g) => Ok(SchoolReply::Grads(g)),
            Payload::Loglik { school_id, loglik } => Ok(SchoolReply::Loglik { school_id, loglik }),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    fn eval_dp(&mut self, round: u64, bank: &ItemBank, s_k: f64) -> Result<MaskedShare> {
        let (alpha, beta) = bank_to_vectors(bank);
        send_message(
            self.io.as_mut(),
            &RoundMessage::new(round, Payload::Params { alpha, beta, s_k, want_grad: true }),
        )?;
        match self.expect_reply(round)? {
            Payload::Share(share) => Ok(share),
            other => Err(Error::Protocol(format!("expected MASKED_SHARE, got {other:?}"))),
        }
    }

    fn finish(&mut self, round: u64, bank: &ItemBank, s_k: f64) -> Result<()> {
        let (alpha, beta) = bank_to_vectors(bank);
        send_message(
            self.io.as_mut(),
            &RoundMessage::new(round, Payload::Done { alpha, beta, s_k }),
        )
    }
}

// ---------------------------------------------------------------------------
// Enrollment
// ---------------------------------------------------------------------------

fn enroll(schools: &mut [Box<dyn SchoolHandle>], model: ModelKind) -> Result<Vec<u32>> {
    if schools.is_empty() {
        return Err(Error::Config("no schools enrolled".into()));
    }
    schools.sort_by_key(|h| h.id());
    let ids: Vec<u32> = schools.iter().map(|h| h.id()).collect();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            return Err(Error::Protocol(format!("duplicate school id {}", w[0])));
        }
    }
    let categories = schools[0].categories();
    for h in schools.iter().skip(1) {
        if h.categories() != categories {
            return Err(Error::Protocol(format!(
                "school {} reports different item categories",
                h.id()
            )));
        }
    }
    if model == ModelKind::TwoPl && categories.iter().any(|&c| c != 2) {
        return Err(Error::Config("2pl calibration requires dichotomous data".into()));
    }
    Ok(ids)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

// ---------------------------------------------------------------------------
// Plain estimation
// ---------------------------------------------------------------------------

/// Settings of the plain (non-private) federated fit.
#[derive(Debug, Clone)]
pub struct PlainOptions {
    pub model: ModelKind,
    pub theta0: f64,
    pub q: u32,
    /// Sup-norm gradient tolerance.
    pub tol: f64,
    /// Maximum BFGS iterations.
    pub max_rounds: u32,
    /// Estimate school effects; when false they stay pinned at zero.
    pub estimate_s: bool,
}

impl Default for PlainOptions {
    fn default() -> Self {
        Self {
            model: ModelKind::TwoPl,
            theta0: crate::irt::DEFAULT_THETA0,
            q: crate::irt::DEFAULT_NODES,
            tol: 1e-4,
            max_rounds: 500,
            estimate_s: true,
        }
    }
}

/// Natural discriminations stay at least this far above zero under BFGS.
const ALPHA_FLOOR: f64 = 1e-3;

/// Result of a plain federated fit.
#[derive(Debug, Clone)]
pub struct PlainFit {
    pub model: ModelKind,
    pub categories: Vec<u32>,
    pub alpha: Vec<f64>,
    /// Difficulties (2PL) or concatenated steps (PCM).
    pub beta: Vec<f64>,
    pub s: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    /// BFGS iterations taken.
    pub iterations: u32,
    /// Communication rounds spent (one per objective/gradient evaluation).
    pub comm_rounds: u32,
    pub fallback_rounds: u32,
    pub final_grad_sup: f64,
    /// (objective, gradient sup-norm) after each iteration.
    pub trace: Vec<(f64, f64)>,
}

fn bank_from_x(
    model: ModelKind,
    categories: &[u32],
    layout: &ParamLayout,
    x: &[f64],
) -> Result<ItemBank> {
    crate::federation::messages::bank_from_vectors(
        model,
        categories,
        &x[layout.alpha()],
        &x[layout.beta()],
    )
    .map_err(|e| Error::Contract(format!("invalid trial point: {e}")))
}

/// Estimate by BFGS over exact summed gradients (Algorithm pair: school
/// gradient rounds + center quasi-Newton updates). Initialization: α = 1,
/// β = 0, s = 0.
pub fn center_fit_plain(
    schools: &mut [Box<dyn SchoolHandle>],
    opts: &PlainOptions,
) -> Result<PlainFit> {
    enroll(schools, opts.model)?;
    let categories = schools[0].categories();
    let layout = ParamLayout::new(opts.model, &categories, schools.len());
    let setup = SessionSetup {
        n_schools: schools.len() as u32,
        model: opts.model,
        categories: categories.clone(),
        theta0: opts.theta0,
        q: opts.q,
        dp: None,
    };
    for h in schools.iter_mut() {
        h.setup(&setup)?;
    }

    let mut x0 = vec![0.0; layout.dim()];
    x0[layout.alpha()].fill(1.0);

    let mut round: u64 = 0;
    let grad_dim = layout.n_items + layout.n_steps + 1;
    let estimate_s = opts.estimate_s;
    let s_start = layout.s().start;

    let oracle = |x: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let bank = bank_from_x(opts.model, &categories, &layout, x)?;
        round += 1;
        let mut value = 0.0;
        let mut grad = if want_grad { Some(vec![0.0; layout.dim()]) } else { None };
        for (k, handle) in schools.iter_mut().enumerate() {
            let reply = handle.eval_plain(round, &bank, x[s_start + k], want_grad)?;
            match reply {
                SchoolReply::Grads(msg) => {
                    if msg.grad.len() != grad_dim {
                        return Err(Error::Protocol(format!(
                            "school {} sent a gradient of dimension {}, expected {grad_dim}",
                            msg.school_id,
                            msg.grad.len()
                        )));
                    }
                    if msg.grad.iter().any(|v| !v.is_finite()) || !msg.loglik.is_finite() {
                        return Err(Error::Protocol(format!(
                            "school {} sent non-finite values",
                            msg.school_id
                        )));
                    }
                    value += msg.loglik;
                    if let Some(g) = grad.as_mut() {
                        for i in 0..grad_dim - 1 {
                            g[i] += msg.grad[i];
                        }
                        g[s_start + k] = msg.grad[grad_dim - 1];
                    }
                }
                SchoolReply::Loglik { loglik, .. } => {
                    if want_grad {
                        return Err(Error::Protocol(
                            "school sent a value-only reply to a gradient request".into(),
                        ));
                    }
                    value += loglik;
                }
            }
        }
        if let (Some(g), false) = (grad.as_mut(), estimate_s) {
            g[s_start..].fill(0.0);
        }
        Ok((value, grad))
    };

    let project = |x: &mut [f64]| {
        for a in &mut x[layout.alpha()] {
            if *a < ALPHA_FLOOR {
                *a = ALPHA_FLOOR;
            }
        }
        if estimate_s {
            let m = mean(&x[layout.s()]);
            for s in &mut x[layout.s()] {
                *s -= m;
            }
        } else {
            x[layout.s()].fill(0.0);
        }
    };

    let cfg = BfgsConfig::new(opts.tol, opts.max_rounds);
    let outcome = bfgs_maximize_projected(oracle, project, &x0, &cfg)?;

    let bank = bank_from_x(opts.model, &categories, &layout, &outcome.x)?;
    let s: Vec<f64> = outcome.x[layout.s()].to_vec();
    for (k, handle) in schools.iter_mut().enumerate() {
        handle.finish(round + 1, &bank, s[k])?;
    }
    let (alpha, beta) = bank_to_vectors(&bank);
    Ok(PlainFit {
        model: opts.model,
        categories,
        alpha,
        beta,
        s,
        loglik: outcome.value,
        converged: outcome.converged,
        iterations: outcome.iterations,
        comm_rounds: outcome.evals,
        fallback_rounds: outcome.fallback_rounds,
        final_grad_sup: sup(&outcome.grad),
        trace: outcome.trace,
    })
}

// ---------------------------------------------------------------------------
// Differentially private estimation
// ---------------------------------------------------------------------------

/// Settings of the DP federated fit (2PL only).
#[derive(Debug, Clone)]
pub struct DpOptions {
    pub dp: DpConfig,
    pub theta0: f64,
    pub q: u32,
    pub estimate_s: bool,
    /// Seeds the center noise stream, the mask seeds, and each school's
    /// subsampling stream.
    pub master_seed: u64,
}

impl DpOptions {
    pub fn new(dp: DpConfig, master_seed: u64) -> Self {
        Self {
            dp,
            theta0: crate::irt::DEFAULT_THETA0,
            q: crate::irt::DEFAULT_NODES,
            estimate_s: true,
            master_seed,
        }
    }
}

/// During the first rounds α is clamped to this interval.
const ALPHA_CLAMP: (f64, f64) = (0.2, 3.0);
const ALPHA_CLAMP_ROUNDS: u64 = 10;
/// Window of the Polyak average reported at the end.
const POLYAK_WINDOW: usize = 10;

/// Result of a DP federated fit; parameters are the Polyak average of the
/// last rounds.
#[derive(Debug, Clone)]
pub struct DpFit {
    pub categories: Vec<u32>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub s: Vec<f64>,
    /// Rounds actually executed (the accountant composes over these).
    pub rounds_executed: u32,
    pub stopped_early: bool,
    pub ledger: PrivacyLedger,
    /// (penalized-gradient sup-norm, relative parameter change) per round.
    pub trace: Vec<(f64, f64)>,
}

/// Estimate by MAP-penalized Adam over noised secure aggregates
/// (initialization a = 0 so α = 1, β = 0, s = 0).
pub fn center_fit_dp(schools: &mut [Box<dyn SchoolHandle>], opts: &DpOptions) -> Result<DpFit> {
    opts.dp.validate()?;
    enroll(schools, ModelKind::TwoPl)?;
    let categories = schools[0].categories();
    let n_items = categories.len();
    let n_schools = schools.len();
    let layout = ParamLayout::new(ModelKind::TwoPl, &categories, n_schools);
    let ids: Vec<u32> = schools.iter().map(|h| h.id()).collect();

    let schedules = build_schedules(opts.master_seed, &ids)?;
    for (slot, handle) in schools.iter_mut().enumerate() {
        let setup = SessionSetup {
            n_schools: n_schools as u32,
            model: ModelKind::TwoPl,
            categories: categories.clone(),
            theta0: opts.theta0,
            q: opts.q,
            dp: Some(DpSetup {
                q_s: opts.dp.q_s,
                clip: opts.dp.clip,
                school_seed: derive_seed(opts.master_seed, &[tag::SCHOOL_SEED, handle.id() as u64]),
                s_slot: slot as u32,
                schedule: schedules[slot].clone(),
            }),
        };
        handle.setup(&setup)?;
    }

    let dim = layout.dim();
    let mut a = vec![0.0; n_items];
    let mut beta = vec![0.0; n_items];
    let mut s = vec![0.0; n_schools];
    let mut adam = AdamState::new(dim);
    let mut polyak: VecDeque<(Vec<f64>, Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut noise_rng = stream(opts.master_seed, &[tag::NOISE]);
    let mut lr = vec![0.0; dim];
    lr[layout.alpha()].fill(opts.dp.eta_a);
    lr[layout.beta()].fill(opts.dp.eta_beta);
    lr[layout.s()].fill(opts.dp.eta_s);

    let mut trace = Vec::new();
    let mut stopped_early = false;
    let mut executed: u32 = 0;

    let spend_note = |rounds: u32| -> String {
        match ledger_for(opts.dp.q_s, opts.dp.sigma, rounds, opts.dp.delta, &default_orders()) {
            Ok(l) => format!("privacy spend for {rounds} executed rounds: epsilon {:.6} at delta {:.1e}", l.epsilon, l.delta),
            Err(_) => format!("{rounds} rounds executed"),
        }
    };

    for t in 1..=opts.dp.max_rounds {
        let round = t as u64;
        let alpha: Vec<f64> = a.iter().map(|v: &f64| v.exp()).collect();
        let bank =
            ItemBank::two_pl(&alpha, &beta).map_err(|e| Error::Contract(e.to_string()))?;

        let mut shares = Vec::with_capacity(n_schools);
        for (k, handle) in schools.iter_mut().enumerate() {
            match handle.eval_dp(round, &bank, s[k]) {
                Ok(share) => shares.push(share),
                Err(e) => {
                    return Err(Error::Protocol(format!(
                        "round {t} aborted ({e}); {}",
                        spend_note(executed)
                    )))
                }
            }
        }
        // The noisy aggregate counts against the budget as soon as it is
        // formed.
        executed = t;
        let aggregate = aggregate_and_decode(&shares, &ids)
            .map_err(|e| Error::Protocol(format!("round {t}: {e}; {}", spend_note(executed))))?;
        let noisy = gaussian_mechanism(&aggregate, opts.dp.sigma, opts.dp.clip, &mut noise_rng);
        let penalty = map_penalty(&a, &beta, &s, opts.dp.tau_a, opts.dp.tau_beta, opts.dp.tau_s);
        let mut g_map: Vec<f64> = noisy.iter().zip(&penalty).map(|(n, p)| n - p).collect();
        if !opts.estimate_s {
            g_map[layout.s()].fill(0.0);
        }

        let delta = adam_step(&mut adam, &g_map, &lr)?;
        let (a_old, beta_old, s_old) = (a.clone(), beta.clone(), s.clone());
        for (v, d) in a.iter_mut().zip(&delta[layout.alpha()]) {
            *v += d;
        }
        for (v, d) in beta.iter_mut().zip(&delta[layout.beta()]) {
            *v += d;
        }
        if opts.estimate_s {
            for (v, d) in s.iter_mut().zip(&delta[layout.s()]) {
                *v += d;
            }
        }
        let mut alpha_now: Vec<f64> = a.iter().map(|v: &f64| v.exp()).collect();
        if round <= ALPHA_CLAMP_ROUNDS {
            for (al, av) in alpha_now.iter_mut().zip(a.iter_mut()) {
                let clamped = al.clamp(ALPHA_CLAMP.0, ALPHA_CLAMP.1);
                if clamped != *al {
                    *al = clamped;
                    *av = clamped.ln();
                }
            }
        }
        if opts.estimate_s {
            let m = mean(&s);
            for v in &mut s {
                *v -= m;
            }
        }
        polyak.push_back((alpha_now.clone(), beta.clone(), s.clone()));
        if polyak.len() > POLYAK_WINDOW {
            polyak.pop_front();
        }

        let rel_change = {
            let mut num: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for (new, old) in a
                .iter()
                .chain(beta.iter())
                .chain(s.iter())
                .zip(a_old.iter().chain(beta_old.iter()).chain(s_old.iter()))
            {
                num = num.max((new - old).abs());
                scale = scale.max(new.abs());
            }
            num / (1.0 + scale)
        };
        let g_sup = sup(&g_map);
        trace.push((g_sup, rel_change));
        if g_sup < opts.dp.eps_stop && rel_change < opts.dp.eps_stop {
            stopped_early = true;
            break;
        }
    }

    // Polyak average over the buffered snapshots.
    let count = polyak.len().max(1) as f64;
    let mut alpha_avg = vec![0.0; n_items];
    let mut beta_avg = vec![0.0; n_items];
    let mut s_avg = vec![0.0; n_schools];
    for (al, be, sv) in &polyak {
        for (acc, v) in alpha_avg.iter_mut().zip(al) {
            *acc += v / count;
        }
        for (acc, v) in beta_avg.iter_mut().zip(be) {
            *acc += v / count;
        }
        for (acc, v) in s_avg.iter_mut().zip(sv) {
            *acc += v / count;
        }
    }

    let ledger = ledger_for(opts.dp.q_s, opts.dp.sigma, executed, opts.dp.delta, &default_orders())?;
    let final_bank =
        ItemBank::two_pl(&alpha_avg, &beta_avg).map_err(|e| Error::Contract(e.to_string()))?;
    for (k, handle) in schools.iter_mut().enumerate() {
        handle.finish(executed as u64 + 1, &final_bank, s_avg[k])?;
    }

    Ok(DpFit {
        categories,
        alpha: alpha_avg,
        beta: beta_avg,
        s: s_avg,
        rounds_executed: executed,
        stopped_early,
        ledger,
        trace,
    })
}
