//! Wire schema of the round protocol.
//!
//! Every frame carries one `RoundMessage`: a protocol version, a round
//! counter, and a typed payload. Frames are 4-byte big-endian length
//! prefixes followed by UTF-8 JSON; floating point values round-trip
//! losslessly through the shortest-representation encoder.

use crate::error::{Error, Result};
use crate::irt::{ItemBank, ItemParamsPCM};
use crate::secure_agg::{MaskedShare, PairwiseMaskSchedule};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// Which measurement model a session calibrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[serde(rename = "2pl")]
    TwoPl,
    Pcm,
}

/// A school's summed gradient for one round: the item blocks plus its own
/// school-effect derivative as the final entry, and the local
/// log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMessage {
    pub school_id: u32,
    pub round: u64,
    pub grad: Vec<f64>,
    pub loglik: f64,
}

/// Differentially private session parameters handed to one school at setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSetup {
    pub q_s: f64,
    pub clip: f64,
    /// Seed of this school's subsampling stream; round r uses substream r.
    pub school_seed: u64,
    /// Index of this school's slot in the aggregated school-effect block.
    pub s_slot: u32,
    pub schedule: PairwiseMaskSchedule,
}

/// Session-wide constants broadcast once after enrollment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSetup {
    pub n_schools: u32,
    pub model: ModelKind,
    pub categories: Vec<u32>,
    pub theta0: f64,
    pub q: u32,
    pub dp: Option<DpSetup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Payload {
    #[serde(rename = "HELLO")]
    Hello { school_id: u32, n_students: u32, categories: Vec<u32> },
    #[serde(rename = "SETUP")]
    Setup(SessionSetup),
    #[serde(rename = "PARAMS")]
    Params { alpha: Vec<f64>, beta: Vec<f64>, s_k: f64, want_grad: bool },
    #[serde(rename = "GRADS")]
    Grads(GradientMessage),
    #[serde(rename = "LOGLIK")]
    Loglik { school_id: u32, loglik: f64 },
    #[serde(rename = "MASKED_SHARE")]
    Share(MaskedShare),
    #[serde(rename = "DONE")]
    Done { alpha: Vec<f64>, beta: Vec<f64>, s_k: f64 },
    #[serde(rename = "ABORT")]
    Abort { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub protocol_version: u32,
    pub round: u64,
    pub payload: Payload,
}

impl RoundMessage {
    pub fn new(round: u64, payload: Payload) -> Self {
        Self { protocol_version: PROTOCOL_VERSION, round, payload }
    }
}

/// Rebuild an item bank from broadcast parameter vectors. For PCM the beta
/// vector concatenates each item's steps in item order.
pub fn bank_from_vectors(
    model: ModelKind,
    categories: &[u32],
    alpha: &[f64],
    beta: &[f64],
) -> Result<ItemBank> {
    let n_items = categories.len();
    if alpha.len() != n_items {
        return Err(Error::Protocol(format!(
            "broadcast has {} discriminations for {} items",
            alpha.len(),
            n_items
        )));
    }
    match model {
        ModelKind::TwoPl => {
            if categories.iter().any(|&c| c != 2) {
                return Err(Error::Protocol("2pl session requires dichotomous items".into()));
            }
            if beta.len() != n_items {
                return Err(Error::Protocol(format!(
                    "broadcast has {} difficulties for {} items",
                    beta.len(),
                    n_items
                )));
            }
            ItemBank::two_pl(alpha, beta).map_err(|e| Error::Protocol(e.to_string()))
        }
        ModelKind::Pcm => {
            let expect: usize = categories.iter().map(|&c| c as usize - 1).sum();
            if beta.len() != expect {
                return Err(Error::Protocol(format!(
                    "broadcast has {} step parameters, expected {expect}",
                    beta.len()
                )));
            }
            let mut items = Vec::with_capacity(n_items);
            let mut offset = 0usize;
            for (j, &c) in categories.iter().enumerate() {
                let steps = c as usize - 1;
                let item = ItemParamsPCM::new(alpha[j], beta[offset..offset + steps].to_vec())
                    .map_err(|e| Error::Protocol(e.to_string()))?;
                items.push(item);
                offset += steps;
            }
            Ok(ItemBank::Pcm(items))
        }
    }
}

/// Flatten a bank back into broadcast vectors.
pub fn bank_to_vectors(bank: &ItemBank) -> (Vec<f64>, Vec<f64>) {
    match bank {
        ItemBank::TwoPl(items) => (
            items.iter().map(|it| it.alpha).collect(),
            items.iter().map(|it| it.beta).collect(),
        ),
        ItemBank::Pcm(items) => (
            items.iter().map(|it| it.alpha).collect(),
            items.iter().flat_map(|it| it.betas.iter().copied()).collect(),
        ),
    }
}
