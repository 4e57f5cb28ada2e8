//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use envmon::storage::{Consolidation, TierSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Bit-at-a-time CRC, polynomial x^8 + x^5 + x^4 + 1 shifted in LSB first.
pub fn crc8_bitwise(bytes: &[u8]) -> u8 {
    let mut crc = 0u8;
    for &byte in bytes {
        for i in 0..8 {
            let mix = (crc ^ (byte >> i)) & 1;
            crc >>= 1;
            if mix == 1 {
                crc ^= 0x8C;
            }
        }
    }
    crc
}

/// Expected tier contents computed from the whole sample history at once.
pub fn oracle_tier(samples: &[(i64, f64)], raw_step_ms: i64, spec: TierSpec) -> Vec<(i64, f64)> {
    let w_ms = spec.step_s as i64 * 1000;
    let mut out = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        let w = samples[i].0.div_euclid(w_ms);
        let mut j = i;
        while j < samples.len() && samples[j].0.div_euclid(w_ms) == w {
            j += 1;
        }
        let group = &samples[i..j];
        // a sample within one raw step of the window end closes it early
        let cut = group.iter().position(|&(ts, _)| ts + raw_step_ms >= (w + 1) * w_ms);
        let used = match cut {
            Some(k) => &group[..=k],
            None => group,
        };
        let closed = cut.is_some() || j < samples.len();
        if closed {
            let vals = used.iter().map(|s| s.1);
            let v = match spec.consolidation {
                Consolidation::Avg => {
                    let mut sum = 0.0;
                    for x in vals {
                        sum += x;
                    }
                    sum / used.len() as f64
                }
                Consolidation::Min => vals.fold(f64::INFINITY, f64::min),
                Consolidation::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                Consolidation::Last => used.last().unwrap().1,
            };
            out.push((w * w_ms, v));
        }
        i = j;
    }
    let keep = out.len().saturating_sub(spec.capacity as usize);
    out.split_off(keep)
}

pub fn oracle_archive(samples: &[(i64, f64)], tiers: &[TierSpec]) -> Vec<Vec<(i64, f64)>> {
    let raw_step_ms = tiers[0].step_s as i64 * 1000;
    let keep = samples.len().saturating_sub(tiers[0].capacity as usize);
    let mut out = vec![samples[keep..].to_vec()];
    for t in &tiers[1..] {
        out.push(oracle_tier(samples, raw_step_ms, *t));
    }
    out
}

pub fn history(rng: &mut ChaCha8Rng, n: usize) -> Vec<(i64, f64)> {
    let mut ts: i64 = rng.random_range(-100_000..100_000);
    (0..n)
        .map(|_| {
            // mostly 1 s cadence, with jitter, bursts and outages
            ts += match rng.random_range(0..20) {
                0 => rng.random_range(1..500),
                1 => rng.random_range(5_000..200_000),
                _ => rng.random_range(900..1_100),
            };
            (ts, rng.random_range(-50.0..50.0))
        })
        .collect()
}

