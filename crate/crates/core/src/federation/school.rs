//! The school role: local gradient computation (plain and differentially
//! private) and the protocol loop a school node runs against a center.
//!
//! A school never transmits raw responses; it sends summed gradients with
//! its local log-likelihood in plain mode, and masked fixed-point shares of
//! clipped per-student gradient sums in DP mode.

use crate::dp::{clip_l2, l2_norm, poisson_subsample};
use crate::error::{Error, Result};
use crate::federation::messages::{
    bank_from_vectors, DpSetup, GradientMessage, Payload, RoundMessage, SessionSetup,
};
use crate::federation::transport::{recv_message, send_message, FrameIo};
use crate::irt::{
    build_grid, ItemBank, NodeTables, Parametrization, QuadratureGrid, ResponseMatrix,
};
use crate::secure_agg::{encode_and_mask, MaskedShare, PairwiseMaskSchedule};
use rand::Rng;

/// One school's data plus the per-round computations over it.
pub struct SchoolCompute {
    pub school_id: u32,
    matrix: ResponseMatrix,
}

impl SchoolCompute {
    pub fn new(school_id: u32, matrix: ResponseMatrix) -> Self {
        Self { school_id, matrix }
    }

    pub fn matrix(&self) -> &ResponseMatrix {
        &self.matrix
    }

    /// Summed natural-parametrization gradient and local log-likelihood.
    /// The gradient layout is `[d_alpha | d_beta | d_s]`.
    pub fn round_plain(
        &self,
        bank: &ItemBank,
        s_k: f64,
        grid: &QuadratureGrid,
    ) -> Result<(Vec<f64>, f64)> {
        self.matrix.check_bank(bank)?;
        let tables = NodeTables::for_bank(bank, s_k, grid);
        let dim = bank.n_items() + bank.n_step_params() + 1;
        let mut grad = vec![0.0; dim];
        let mut loglik = 0.0;
        for row in self.matrix.rows() {
            let (post, ll) = tables.posterior_and_loglik(row);
            loglik += ll;
            let g = tables.gradient_given_posterior(row, &post, Parametrization::NaturalAlpha);
            accumulate(&mut grad, &g.stacked());
        }
        Ok((grad, loglik))
    }

    /// Local log-likelihood only (line-search probes).
    pub fn loglik_only(&self, bank: &ItemBank, s_k: f64, grid: &QuadratureGrid) -> Result<f64> {
        self.matrix.check_bank(bank)?;
        let tables = NodeTables::for_bank(bank, s_k, grid);
        Ok(self.matrix.rows().map(|row| tables.loglik(row)).sum())
    }

    /// Poisson-subsampled, per-student clipped gradient sum in the log-α
    /// parametrization. 2PL sessions only.
    pub fn round_dp<R: Rng>(
        &self,
        bank: &ItemBank,
        s_k: f64,
        grid: &QuadratureGrid,
        q_s: f64,
        clip: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let ItemBank::TwoPl(_) = bank else {
            return Err(Error::Config(
                "the differentially private path supports the 2PL model only".into(),
            ));
        };
        self.matrix.check_bank(bank)?;
        let tables = NodeTables::for_bank(bank, s_k, grid);
        let dim = 2 * bank.n_items() + 1;
        let mut sum = vec![0.0; dim];
        for i in poisson_subsample(self.matrix.n_students(), q_s, rng) {
            let row = self.matrix.row(i);
            let (post, _) = tables.posterior_and_loglik(row);
            let g = tables.gradient_given_posterior(row, &post, Parametrization::LogAlpha);
            let clipped = clip_l2(&g.stacked(), clip);
            debug_assert!(l2_norm(&clipped) <= clip * (1.0 + 1e-9));
            accumulate(&mut sum, &clipped);
        }
        Ok(sum)
    }

    /// EAP ability score and posterior sd per student.
    pub fn eap_scores(&self, bank: &ItemBank, s_k: f64, grid: &QuadratureGrid) -> Result<Vec<(f64, f64)>> {
        self.matrix.check_bank(bank)?;
        let tables = NodeTables::for_bank(bank, s_k, grid);
        Ok(self
            .matrix
            .rows()
            .map(|row| {
                let (post, _) = tables.posterior_and_loglik(row);
                tables.eap_given_posterior(&post)
            })
            .collect())
    }
}

fn accumulate(acc: &mut [f64], term: &[f64]) {
    for (a, t) in acc.iter_mut().zip(term) {
        *a += t;
    }
}

/// A school's plain round as one message.
pub fn school_round_plain(
    compute: &SchoolCompute,
    bank: &ItemBank,
    s_k: f64,
    grid: &QuadratureGrid,
    round: u64,
) -> Result<GradientMessage> {
    let (grad, loglik) = compute.round_plain(bank, s_k, grid)?;
    Ok(GradientMessage { school_id: compute.school_id, round, grad, loglik })
}

/// A school's DP round: subsample, clip, sum, embed the school-effect entry
/// into this school's slot, then mask and encode.
#[allow(clippy::too_many_arguments)]
pub fn school_round_dp<R: Rng>(
    compute: &SchoolCompute,
    bank: &ItemBank,
    s_k: f64,
    grid: &QuadratureGrid,
    q_s: f64,
    clip: f64,
    schedule: &PairwiseMaskSchedule,
    s_slot: usize,
    round: u64,
    rng: &mut R,
) -> Result<MaskedShare> {
    let sum = compute.round_dp(bank, s_k, grid, q_s, clip, rng)?;
    let n_items = bank.n_items();
    let n_schools = schedule.n_schools as usize;
    if s_slot >= n_schools {
        return Err(Error::Contract(format!("s_slot {s_slot} out of range for {n_schools} schools")));
    }
    // [d_a | d_beta | one-hot school-effect block]: the pairwise masks still
    // cancel columnwise, and the center's aggregate carries every school's
    // own-effect gradient in its slot.
    let mut embedded = vec![0.0; 2 * n_items + n_schools];
    embedded[..2 * n_items].copy_from_slice(&sum[..2 * n_items]);
    embedded[2 * n_items + s_slot] = sum[2 * n_items];
    encode_and_mask(&embedded, schedule, round)
}

/// Outcome of a school session: the final broadcast parameters.
#[derive(Debug, Clone)]
pub struct SessionEnd {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub s_k: f64,
    pub rounds_served: u64,
}

fn abort<T: FrameIo + ?Sized>(io: &mut T, round: u64, reason: String) -> Error {
    let _ = send_message(io, &RoundMessage::new(round, Payload::Abort { reason: reason.clone() }));
    Error::Protocol(reason)
}

/// Run the school side of a calibration session over any transport.
///
/// Enrolls with HELLO, accepts the SETUP, then answers PARAMS broadcasts
/// lock-step until DONE.
pub fn school_session<T: FrameIo + ?Sized>(
    io: &mut T,
    school_id: u32,
    matrix: ResponseMatrix,
) -> Result<SessionEnd> {
    let categories = matrix.categories().to_vec();
    send_message(
        io,
        &RoundMessage::new(
            0,
            Payload::Hello {
                school_id,
                n_students: matrix.n_students() as u32,
                categories: categories.clone(),
            },
        ),
    )?;
    let setup: SessionSetup = match recv_message(io)?.payload {
        Payload::Setup(s) => s,
        Payload::Abort { reason } => return Err(Error::Protocol(reason)),
        other => return Err(abort(io, 0, format!("expected SETUP, got {other:?}"))),
    };
    if setup.categories != categories {
        return Err(abort(io, 0, "setup categories do not match local data".into()));
    }
    if let Some(dp) = &setup.dp {
        if dp.schedule.school_id != school_id {
            return Err(abort(io, 0, "mask schedule addressed to a different school".into()));
        }
    }
    let grid = build_grid(setup.theta0, setup.q)?;
    let compute = SchoolCompute::new(school_id, matrix);
    let mut rounds_served = 0u64;

    loop {
        let msg = recv_message(io)?;
        match msg.payload {
            Payload::Params { alpha, beta, s_k, want_grad } => {
                let bank = match bank_from_vectors(setup.model, &setup.categories, &alpha, &beta) {
                    Ok(b) => b,
                    Err(e) => return Err(abort(io, msg.round, e.to_string())),
                };
                let reply = match &setup.dp {
                    None => {
                        if want_grad {
                            match school_round_plain(&compute, &bank, s_k, &grid, msg.round) {
                                Ok(g) => Payload::Grads(g),
                                Err(e) => return Err(abort(io, msg.round, e.to_string())),
                            }
                        } else {
                            match compute.loglik_only(&bank, s_k, &grid) {
                                Ok(ll) => Payload::Loglik { school_id, loglik: ll },
                                Err(e) => return Err(abort(io, msg.round, e.to_string())),
                            }
                        }
                    }
                    Some(DpSetup { q_s, clip, school_seed, s_slot, schedule }) => {
                        let mut rng = crate::rng::stream(*school_seed, &[msg.round]);
                        match school_round_dp(
                            &compute,
                            &bank,
                            s_k,
                            &grid,
                            *q_s,
                            *clip,
                            schedule,
                            *s_slot as usize,
                            msg.round,
                            &mut rng,
                        ) {
                            Ok(share) => Payload::Share(share),
                            Err(e) => return Err(abort(io, msg.round, e.to_string())),
                        }
                    }
                };
                send_message(io, &RoundMessage::new(msg.round, reply))?;
                rounds_served += 1;
            }
            Payload::Done { alpha, beta, s_k } => {
                return Ok(SessionEnd { alpha, beta, s_k, rounds_served });
            }
            Payload::Abort { reason } => return Err(Error::Protocol(reason)),
            other => return Err(abort(io, msg.round, format!("unexpected message {other:?}"))),
        }
    }
}
