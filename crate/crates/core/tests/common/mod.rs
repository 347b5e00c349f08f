// SPDX-License-Identifier: Apache-2.0

//! Brute-force oracles and random generators shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use apb_triage::apb::{ApbTransaction, SignalMap};
use apb_triage::forest::{FeatureMatrix, FeatureVector, Split};
use apb_triage::vcd::{FourState, Timescale, VarDecl, VcdDocument};
use rand::seq::SliceRandom;
use rand::Rng;

/// Pair-counting AUC: P(score_pos > score_neg) + 0.5 * P(tie).
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut halves: u64 = 0;
    let (mut np, mut nn) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                halves += 2;
            } else if scores[i] == scores[j] {
                halves += 1;
            }
        }
    }
    (halves as f64 / 2.0) / ((np * nn) as f64)
}

fn gini(w: [f64; 2]) -> f64 {
    let t = w[0] + w[1];
    if t == 0.0 {
        return 0.0;
    }
    let (p, q) = (w[0] / t, w[1] / t);
    1.0 - p * p - q * q
}

/// Every eligible split (feature, midpoint threshold) with its weighted Gini
/// decrease, by direct enumeration.
#[allow(clippy::needless_range_loop)]
pub fn enumerate_splits(
    x: &[Vec<u8>],
    y: &[bool],
    weights: &[f64],
    rows: &[u32],
    min_leaf: usize,
) -> Vec<Split> {
    let n_features = x[0].len();
    let mut parent = [0.0; 2];
    for &r in rows {
        parent[y[r as usize] as usize] += weights[r as usize];
    }
    let total = parent[0] + parent[1];
    let mut out = Vec::new();
    for f in 0..n_features {
        let mut values: Vec<u8> = rows.iter().map(|&r| x[r as usize][f]).collect();
        values.sort_unstable();
        values.dedup();
        for pair in values.windows(2) {
            let threshold = (pair[0] as f64 + pair[1] as f64) / 2.0;
            let mut left = [0.0; 2];
            let mut right = [0.0; 2];
            let (mut nl, mut nr) = (0, 0);
            for &r in rows {
                let side = if (x[r as usize][f] as f64) <= threshold {
                    nl += 1;
                    &mut left
                } else {
                    nr += 1;
                    &mut right
                };
                side[y[r as usize] as usize] += weights[r as usize];
            }
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let wl = left[0] + left[1];
            let wr = right[0] + right[1];
            let decrease = gini(parent) - (wl / total) * gini(left) - (wr / total) * gini(right);
            out.push(Split {
                feature: f,
                threshold,
                decrease,
            });
        }
    }
    out
}

/// A random best-split instance: up to `max_rows` rows (with bootstrap-style
/// duplicates) and `n_features` small-valued features.
pub struct SplitInstance {
    pub x: Vec<Vec<u8>>,
    pub y: Vec<bool>,
    pub weights: Vec<f64>,
    pub rows: Vec<u32>,
    pub min_leaf: usize,
}

impl SplitInstance {
    pub fn random<R: Rng>(rng: &mut R, max_rows: usize, n_features: usize) -> Self {
        let n = rng.gen_range(1..=max_rows);
        let x: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..n_features).map(|_| rng.gen_range(0..4)).collect())
            .collect();
        let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let w_choices = [0.5, 1.0, 1.25, 2.0];
        let weights: Vec<f64> = (0..n).map(|_| *w_choices.choose(rng).unwrap()).collect();
        let m = rng.gen_range(1..=max_rows);
        let rows: Vec<u32> = (0..m).map(|_| rng.gen_range(0..n as u32)).collect();
        let min_leaf = rng.gen_range(1..=2);
        Self {
            x,
            y,
            weights,
            rows,
            min_leaf,
        }
    }

    pub fn matrix(&self) -> FeatureMatrix {
        let rows: Vec<FeatureVector> = self.x.iter().cloned().map(FeatureVector).collect();
        FeatureMatrix::from_rows(&rows).unwrap()
    }
}

/// Checks a `best_split` result against enumeration. Returns a description
/// of the mismatch, if any.
pub fn check_split(inst: &SplitInstance, got: Option<Split>) -> Result<(), String> {
    const TOL: f64 = 1e-9;
    let all = enumerate_splits(&inst.x, &inst.y, &inst.weights, &inst.rows, inst.min_leaf);
    let best = all
        .iter()
        .map(|s| s.decrease)
        .fold(f64::NEG_INFINITY, f64::max);
    match got {
        None => {
            if best > TOL {
                return Err(format!("missed a split with decrease {best}"));
            }
            Ok(())
        }
        Some(s) => {
            let own = all
                .iter()
                .find(|c| c.feature == s.feature && c.threshold == s.threshold)
                .ok_or_else(|| format!("returned ineligible split {s:?}"))?;
            if (own.decrease - s.decrease).abs() > TOL {
                return Err(format!(
                    "reported decrease {} but enumeration gives {}",
                    s.decrease, own.decrease
                ));
            }
            if best - own.decrease > TOL {
                return Err(format!("split {s:?} is not optimal; best is {best}"));
            }
            Ok(())
        }
    }
}

pub fn random_bits<R: Rng>(rng: &mut R, width: u32) -> Vec<FourState> {
    (0..width)
        .map(|_| match rng.gen_range(0..10) {
            0 => FourState::X,
            1 => FourState::Z,
            2..=5 => FourState::Zero,
            _ => FourState::One,
        })
        .collect()
}

fn random_name<R: Rng>(rng: &mut R) -> String {
    const HEAD: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_";
    const TAIL: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789_";
    let mut s = String::new();
    s.push(*HEAD.choose(rng).unwrap() as char);
    for _ in 0..rng.gen_range(0..6) {
        s.push(*TAIL.choose(rng).unwrap() as char);
    }
    s
}

fn random_id<R: Rng>(rng: &mut R) -> String {
    // printable ASCII; `$` only as a one-character code
    let len = rng.gen_range(1..=3);
    if len == 1 {
        return (rng.gen_range(b'!'..=b'~') as char).to_string();
    }
    (0..len)
        .map(|_| loop {
            let c = rng.gen_range(b'!'..=b'~') as char;
            if c != '$' {
                break c;
            }
        })
        .collect()
}

/// A random well-formed document: nested scopes, mixed widths, four-state
/// values, several changes per timestamp.
pub fn random_document<R: Rng>(rng: &mut R) -> VcdDocument {
    let units = ["s", "ms", "us", "ns", "ps", "fs"];
    let timescale = Timescale {
        magnitude: *[1, 10, 100].choose(rng).unwrap(),
        unit: units.choose(rng).unwrap().to_string(),
    };
    let scopes: Vec<String> = (0..3).map(|_| random_name(rng)).collect();
    let n_vars = rng.gen_range(1..=8);
    let mut vars = Vec::new();
    let mut ids = std::collections::HashSet::new();
    while vars.len() < n_vars {
        let id = random_id(rng);
        if !ids.insert(id.clone()) {
            continue;
        }
        let depth = rng.gen_range(0..=2);
        let mut path: Vec<String> = (0..depth)
            .map(|_| scopes.choose(rng).unwrap().clone())
            .collect();
        path.push(random_name(rng));
        let width = *[1u32, 1, 2, 4, 8, 13, 32, 64].choose(rng).unwrap();
        let kind = *["wire", "reg"].choose(rng).unwrap();
        vars.push(VarDecl::new(&id, width, &path.join("."), kind));
    }
    let mut doc = VcdDocument::new(timescale, vars.clone()).unwrap();
    let mut t = rng.gen_range(0..5u64);
    for _ in 0..rng.gen_range(0..40) {
        t += rng.gen_range(0..3) * rng.gen_range(1..50);
        let v = vars.choose(rng).unwrap();
        doc.push_change(t, &v.id_code, random_bits(rng, v.width))
            .unwrap();
    }
    doc
}

/// Transactions whose times can be scheduled by `synth_waveform` at
/// `period`: first time at least one period, gaps of at least two.
pub fn random_transactions<R: Rng>(
    rng: &mut R,
    max_len: usize,
    period: u64,
) -> Vec<ApbTransaction> {
    let n = rng.gen_range(0..=max_len);
    let mut t = period + rng.gen_range(0..3) * period;
    (0..n)
        .map(|i| {
            if i > 0 {
                t += 2 * period + rng.gen_range(0..3) * rng.gen_range(0..=period);
            }
            ApbTransaction {
                address: rng.gen(),
                data: rng.gen(),
                is_write: rng.gen_bool(0.5),
                time: t,
            }
        })
        .collect()
}

pub fn map_with_pready() -> SignalMap {
    SignalMap {
        pready: Some("apb.PREADY".to_string()),
        ..SignalMap::default()
    }
}
