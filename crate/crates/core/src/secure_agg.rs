//! Additive-mask secure aggregation over fixed-point integers.
//!
//! Schools encode their gradient sums as signed 64-bit fixed-point words
//! (scale 2²⁰) and add pairwise pseudorandom masks that cancel exactly, in
//! wrapping integer arithmetic, once every school's share is summed. The
//! center therefore sees only the aggregate; the only reconstruction error
//! is the initial quantization, bounded by one half step per school.
//!
//! Floating-point masking would not cancel exactly, which is why the
//! payload is integer. Pairwise seeds are handed out by the server during
//! setup (honest-but-curious model); cryptographic key agreement is out of
//! scope.

use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Fixed-point scale: values are rounded to multiples of 2⁻²⁰.
pub const FIXED_POINT_SCALE: f64 = (1u64 << 20) as f64;

/// One school's masked contribution for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedShare {
    pub school_id: u32,
    pub round: u64,
    pub payload: Vec<u64>,
}

/// A pairwise mask partner: the shared stream seed and whether this school
/// adds (+1) or subtracts (−1) the common words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPair {
    pub other_id: u32,
    pub seed: u64,
    pub sign: i8,
}

/// Everything one school needs to mask its shares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseMaskSchedule {
    pub school_id: u32,
    pub n_schools: u32,
    pub pairs: Vec<MaskPair>,
}

/// Server-side construction of all schools' schedules. For each ordered pair
/// (k, l) with k < l the shared seed comes from the master stream; the
/// lower id adds the mask words and the higher id subtracts them.
pub fn build_schedules(master_seed: u64, school_ids: &[u32]) -> Result<Vec<PairwiseMaskSchedule>> {
    let mut sorted = school_ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != school_ids.len() {
        return Err(Error::Protocol("duplicate school ids in mask setup".into()));
    }
    let n = school_ids.len() as u32;
    let mut schedules: Vec<PairwiseMaskSchedule> = school_ids
        .iter()
        .map(|&id| PairwiseMaskSchedule { school_id: id, n_schools: n, pairs: Vec::new() })
        .collect();
    for (i, &k) in school_ids.iter().enumerate() {
        for &l in &school_ids[i + 1..] {
            let (lo, hi) = if k < l { (k, l) } else { (l, k) };
            let seed = stream(master_seed, &[tag::MASK, lo as u64, hi as u64]).next_u64();
            for sched in schedules.iter_mut() {
                if sched.school_id == lo {
                    sched.pairs.push(MaskPair { other_id: hi, seed, sign: 1 });
                } else if sched.school_id == hi {
                    sched.pairs.push(MaskPair { other_id: lo, seed, sign: -1 });
                }
            }
        }
    }
    Ok(schedules)
}

fn encode_word(value: f64, n_schools: u32) -> Result<i64> {
    if !value.is_finite() {
        return Err(Error::Range(format!("cannot encode non-finite value {value}")));
    }
    let fixed = (value * FIXED_POINT_SCALE).round();
    let headroom = (i64::MAX / n_schools.max(1) as i64) as f64;
    if fixed.abs() > headroom {
        return Err(Error::Range(format!(
            "value {value} exceeds fixed-point headroom for {n_schools} schools; \
             raise clipping or lower the scale"
        )));
    }
    Ok(fixed as i64)
}

/// Quantize a real vector and apply this school's net pairwise masks.
pub fn encode_and_mask(
    values: &[f64],
    schedule: &PairwiseMaskSchedule,
    round: u64,
) -> Result<MaskedShare> {
    let mut payload: Vec<u64> = values
        .iter()
        .map(|&v| encode_word(v, schedule.n_schools).map(|w| w as u64))
        .collect::<Result<Vec<_>>>()?;
    for pair in &schedule.pairs {
        let mut mask_rng = stream(pair.seed, &[round]);
        for word in payload.iter_mut() {
            let mask = mask_rng.next_u64();
            *word = if pair.sign >= 0 { word.wrapping_add(mask) } else { word.wrapping_sub(mask) };
        }
    }
    Ok(MaskedShare { school_id: schedule.school_id, round, payload })
}

/// Sum one share per enrolled school and decode the aggregate back to reals.
/// Aborts on a missing or duplicate school, a round mismatch, or ragged
/// payloads.
pub fn aggregate_and_decode(shares: &[MaskedShare], enrolled: &[u32]) -> Result<Vec<f64>> {
    if shares.len() != enrolled.len() {
        return Err(Error::Protocol(format!(
            "round needs one share per school: got {} of {}",
            shares.len(),
            enrolled.len()
        )));
    }
    let mut seen: Vec<u32> = shares.iter().map(|s| s.school_id).collect();
    seen.sort_unstable();
    let mut expected = enrolled.to_vec();
    expected.sort_unstable();
    if seen != expected {
        return Err(Error::Protocol(format!(
            "share school ids {seen:?} do not match enrollment {expected:?}"
        )));
    }
    let round = shares[0].round;
    let len = shares[0].payload.len();
    let mut acc = vec![0u64; len];
    for share in shares {
        if share.round != round {
            return Err(Error::Protocol(format!(
                "share from school {} is for round {}, expected {round}",
                share.school_id, share.round
            )));
        }
        if share.payload.len() != len {
            return Err(Error::Protocol("masked shares have inconsistent lengths".into()));
        }
        for (a, &w) in acc.iter_mut().zip(&share.payload) {
            *a = a.wrapping_add(w);
        }
    }
    Ok(acc.into_iter().map(|w| (w as i64) as f64 / FIXED_POINT_SCALE).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_school_masks_cancel_exactly() {
        let schedules = build_schedules(77, &[0, 1]).unwrap();
        let a = encode_and_mask(&[3.0, 5.0], &schedules[0], 4).unwrap();
        let b = encode_and_mask(&[-1.0, 2.0], &schedules[1], 4).unwrap();
        let sum = aggregate_and_decode(&[a, b], &[0, 1]).unwrap();
        assert_eq!(sum, vec![2.0, 7.0]);
    }

    #[test]
    fn single_school_share_is_bare_fixed_point() {
        let schedules = build_schedules(1, &[9]).unwrap();
        assert!(schedules[0].pairs.is_empty());
        let share = encode_and_mask(&[1.5, -0.25], &schedules[0], 0).unwrap();
        assert_eq!(share.payload[0], ((1.5 * FIXED_POINT_SCALE) as i64) as u64);
        let decoded = aggregate_and_decode(&[share], &[9]).unwrap();
        assert!((decoded[0] - 1.5).abs() < 1.0 / FIXED_POINT_SCALE);
        assert!((decoded[1] + 0.25).abs() < 1.0 / FIXED_POINT_SCALE);
    }

    #[test]
    fn aggregate_matches_plain_sum_within_quantization() {
        use rand::Rng;
        let ids: Vec<u32> = (0..10).collect();
        let schedules = build_schedules(123, &ids).unwrap();
        let mut rng = crate::rng::stream(5, &[1]);
        for round in 0..50u64 {
            let vectors: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..7).map(|_| rng.random_range(-100.0..100.0)).collect())
                .collect();
            let shares: Vec<MaskedShare> = vectors
                .iter()
                .zip(&schedules)
                .map(|(v, sched)| encode_and_mask(v, sched, round).unwrap())
                .collect();
            let decoded = aggregate_and_decode(&shares, &ids).unwrap();
            for c in 0..7 {
                let plain: f64 = vectors.iter().map(|v| v[c]).sum();
                assert!(
                    (decoded[c] - plain).abs() <= 10.0 / FIXED_POINT_SCALE,
                    "round {round} coord {c}: {} vs {plain}",
                    decoded[c]
                );
            }
        }
    }

    #[test]
    fn all_zero_vectors_decode_to_zero() {
        let ids = [0u32, 1, 2];
        let schedules = build_schedules(9, &ids).unwrap();
        let shares: Vec<MaskedShare> = schedules
            .iter()
            .map(|s| encode_and_mask(&[0.0; 4], s, 1).unwrap())
            .collect();
        let decoded = aggregate_and_decode(&shares, &ids).unwrap();
        assert_eq!(decoded, vec![0.0; 4]);
    }

    #[test]
    fn missing_and_duplicate_schools_abort() {
        let ids = [0u32, 1, 2];
        let schedules = build_schedules(9, &ids).unwrap();
        let shares: Vec<MaskedShare> = schedules
            .iter()
            .map(|s| encode_and_mask(&[1.0], s, 1).unwrap())
            .collect();
        assert!(aggregate_and_decode(&shares[..2], &ids).is_err());
        let mut dup = shares.clone();
        dup[2] = dup[1].clone();
        assert!(aggregate_and_decode(&dup, &ids).is_err());
    }

    #[test]
    fn round_mismatch_aborts() {
        let ids = [0u32, 1];
        let schedules = build_schedules(9, &ids).unwrap();
        let a = encode_and_mask(&[1.0], &schedules[0], 1).unwrap();
        let b = encode_and_mask(&[1.0], &schedules[1], 2).unwrap();
        assert!(aggregate_and_decode(&[a, b], &ids).is_err());
    }

    #[test]
    fn oversized_values_are_rejected() {
        let schedules = build_schedules(3, &[0, 1]).unwrap();
        let too_big = (i64::MAX as f64) / FIXED_POINT_SCALE;
        assert!(encode_and_mask(&[too_big], &schedules[0], 0).is_err());
        assert!(encode_and_mask(&[f64::NAN], &schedules[0], 0).is_err());
    }

    #[test]
    fn masked_words_look_uniform() {
        // Histogram the top three bits of a masked constant: 8 buckets over
        // 8192 words should each hold about 1024.
        let schedules = build_schedules(2024, &[0, 1]).unwrap();
        let mut buckets = [0usize; 8];
        for round in 0..1024u64 {
            let share = encode_and_mask(&[42.0; 8], &schedules[0], round).unwrap();
            for w in share.payload {
                buckets[(w >> 61) as usize] += 1;
            }
        }
        for (b, count) in buckets.iter().enumerate() {
            assert!((819..=1229).contains(count), "bucket {b} holds {count}");
        }
    }

    #[test]
    fn masks_differ_across_rounds() {
        let schedules = build_schedules(7, &[0, 1]).unwrap();
        let a = encode_and_mask(&[1.0, 2.0], &schedules[0], 1).unwrap();
        let b = encode_and_mask(&[1.0, 2.0], &schedules[0], 2).unwrap();
        assert_ne!(a.payload, b.payload);
    }
}
