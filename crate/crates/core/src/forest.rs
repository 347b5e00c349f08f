// SPDX-License-Identifier: Apache-2.0

//! Binary random forest over small-integer features, and the featurization
//! of bus samples.
//!
//! Trees are CART-style with weighted Gini impurity. Each tree draws its
//! bootstrap and per-node feature subsets from its own ChaCha substream
//! `(base_seed, tree index)`, so a trained forest is bit-identical for any
//! number of worker threads.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apb::{Sample, SAMPLE_LEN};
use crate::faultgen::{Field, PAIR_COUNT};

/// Raw bit block: `feature[t * 32 + b]` is bit `b` of transaction `t`.
pub const RAW_BITS: usize = SAMPLE_LEN * 32;
const STATS: usize = 32 + PAIR_COUNT as usize + 3;

/// Splits with a smaller impurity decrease are treated as no improvement.
pub const MIN_DECREASE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForestError {
    #[error("impurity of an empty partition is undefined")]
    EmptyPartition,
    #[error("training labels contain a single class")]
    SingleClassInput,
    #[error("training set is empty")]
    EmptyInput,
    #[error("{what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("feature vector has {got} entries, model expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("model format version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
}

/// Which columns [`featurize`] produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FeatureLayout {
    /// The 640 raw bits only.
    RawBits,
    /// The 640 raw bits, then per-column and per-pair statistics over the
    /// 20 transactions:
    ///
    /// | index | value |
    /// |---|---|
    /// | 640 + b | transactions with bit `b` set |
    /// | 672 + i | transactions where bits `i + 1` and `i` differ |
    /// | 703 | minimum of the 31 disagreement counts |
    /// | 704 | minimum over pairs of transactions where the pair is not `00` |
    /// | 705 | maximum over pairs of transactions where the pair is `11` |
    ///
    /// Every statistic is zero on an all-zero field.
    #[default]
    BitsWithPairStats,
}

impl FeatureLayout {
    pub fn width(self) -> usize {
        match self {
            FeatureLayout::RawBits => RAW_BITS,
            FeatureLayout::BitsWithPairStats => RAW_BITS + STATS,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureLayout::RawBits => 0,
            FeatureLayout::BitsWithPairStats => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureLayout::RawBits),
            1 => Some(FeatureLayout::BitsWithPairStats),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureVector(pub Vec<u8>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

pub fn featurize(s: &Sample, field: Field, layout: FeatureLayout) -> FeatureVector {
    let words = field.words(s);
    let mut f = Vec::with_capacity(layout.width());
    for w in words {
        f.extend((0..32).map(|b| ((w >> b) & 1) as u8));
    }
    if layout == FeatureLayout::BitsWithPairStats {
        for b in 0..32 {
            f.push(words.iter().filter(|&&w| (w >> b) & 1 == 1).count() as u8);
        }
        let mut min_disagree = u8::MAX;
        let mut min_nonzero = u8::MAX;
        let mut max_ones = 0u8;
        for p in 0..PAIR_COUNT as u32 {
            let (mut disagree, mut nonzero, mut ones) = (0u8, 0u8, 0u8);
            for w in words {
                match (w >> p) & 0b11 {
                    0b00 => {}
                    0b11 => {
                        nonzero += 1;
                        ones += 1;
                    }
                    _ => {
                        nonzero += 1;
                        disagree += 1;
                    }
                }
            }
            f.push(disagree);
            min_disagree = min_disagree.min(disagree);
            min_nonzero = min_nonzero.min(nonzero);
            max_ones = max_ones.max(ones);
        }
        f.extend([min_disagree, min_nonzero, max_ones]);
    }
    debug_assert_eq!(f.len(), layout.width());
    FeatureVector(f)
}

/// `1 - p0^2 - p1^2` over weighted class totals.
pub fn gini(w_neg: f64, w_pos: f64) -> Result<f64, ForestError> {
    let total = w_neg + w_pos;
    if total <= 0.0 {
        return Err(ForestError::EmptyPartition);
    }
    Ok(gini_unchecked(w_neg, w_pos, total))
}

#[inline]
fn gini_unchecked(w_neg: f64, w_pos: f64, total: f64) -> f64 {
    let p0 = w_neg / total;
    let p1 = w_pos / total;
    1.0 - p0 * p0 - p1 * p1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxFeatures {
    /// `floor(sqrt(feature count))`, at least 1.
    Sqrt,
    Fixed(u32),
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((n_features as f64).sqrt().floor() as usize).max(1),
            MaxFeatures::Fixed(k) => k as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWeight {
    /// `w_c = n / (2 * n_c)` over the full training set.
    Balanced,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub tree_count: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub class_weight: ClassWeight,
    pub base_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tree_count: 200,
            max_depth: 15,
            min_samples_split: 5,
            min_samples_leaf: 2,
            max_features: MaxFeatures::Sqrt,
            class_weight: ClassWeight::Balanced,
            base_seed: 42,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, n_features: usize) -> Result<(), ForestError> {
        let bad = |m: &str| Err(ForestError::InvalidHyperparams(m.to_string()));
        if self.tree_count == 0 {
            return bad("tree_count must be positive");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if self.min_samples_split < 2 {
            return bad("min_samples_split must be at least 2");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be positive");
        }
        let k = self.max_features.resolve(n_features);
        if k == 0 || k > n_features {
            return bad("features per split must be in 1..=feature count");
        }
        Ok(())
    }
}

/// Column-major matrix of small non-negative integer features.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_features: usize,
    columns: Vec<u8>,
    max_value: Vec<u8>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[FeatureVector]) -> Result<Self, ForestError> {
        let n_rows = rows.len();
        let n_features = rows.first().map_or(0, |r| r.len());
        let mut columns = vec![0u8; n_rows * n_features];
        let mut max_value = vec![0u8; n_features];
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_features {
                return Err(ForestError::WidthMismatch {
                    expected: n_features,
                    got: row.len(),
                });
            }
            for (f, &v) in row.0.iter().enumerate() {
                columns[f * n_rows + r] = v;
                max_value[f] = max_value[f].max(v);
            }
        }
        Ok(Self {
            n_rows,
            n_features,
            columns,
            max_value,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn column(&self, f: usize) -> &[u8] {
        &self.columns[f * self.n_rows..(f + 1) * self.n_rows]
    }

    #[inline]
    pub fn get(&self, row: usize, f: usize) -> u8 {
        self.columns[f * self.n_rows + row]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// `gini(parent) - sum_c (W_c / W) * gini(child_c)` with sample weights.
    pub decrease: f64,
}

/// Scratch space for [`best_split`], reused across nodes.
#[derive(Debug, Clone)]
pub struct SplitScratch {
    weight: Vec<[f64; 2]>,
    count: Vec<u32>,
}

impl Default for SplitScratch {
    fn default() -> Self {
        Self {
            weight: vec![[0.0; 2]; 256],
            count: vec![0; 256],
        }
    }
}

/// Best weighted-Gini split of `rows` (duplicates allowed) over the
/// `candidates` features. Rows go left when `value <= threshold`, with
/// thresholds at midpoints between adjacent observed values (0.5 for binary
/// features). Children with fewer than `min_samples_leaf` rows make a split
/// ineligible. Ties go to the lowest feature index, then lowest threshold.
pub fn best_split(
    x: &FeatureMatrix,
    y: &[bool],
    weights: &[f64],
    rows: &[u32],
    candidates: &[usize],
    min_samples_leaf: usize,
    scratch: &mut SplitScratch,
) -> Option<Split> {
    let (mut w_neg, mut w_pos) = (0.0, 0.0);
    for &r in rows {
        if y[r as usize] {
            w_pos += weights[r as usize];
        } else {
            w_neg += weights[r as usize];
        }
    }
    let total = w_neg + w_pos;
    if total <= 0.0 {
        return None;
    }
    let parent = gini_unchecked(w_neg, w_pos, total);
    let n = rows.len();

    let mut sorted: Vec<usize> = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut best: Option<Split> = None;
    for f in sorted {
        let top = x.max_value[f] as usize;
        if top == 0 {
            continue;
        }
        let col = x.column(f);
        let hist = &mut scratch.weight[..=top];
        let cnt = &mut scratch.count[..=top];
        hist.fill([0.0; 2]);
        cnt.fill(0);
        for &r in rows {
            let v = col[r as usize] as usize;
            hist[v][y[r as usize] as usize] += weights[r as usize];
            cnt[v] += 1;
        }

        let (mut l_neg, mut l_pos, mut l_n) = (0.0, 0.0, 0usize);
        let mut v = 0;
        while v <= top {
            if cnt[v] == 0 {
                v += 1;
                continue;
            }
            l_neg += hist[v][0];
            l_pos += hist[v][1];
            l_n += cnt[v] as usize;
            let Some(next) = (v + 1..=top).find(|&u| cnt[u] > 0) else {
                break;
            };
            if l_n >= min_samples_leaf && n - l_n >= min_samples_leaf {
                let l_w = l_neg + l_pos;
                let r_neg = w_neg - l_neg;
                let r_pos = w_pos - l_pos;
                let r_w = total - l_w;
                if l_w > 0.0 && r_w > 0.0 {
                    let child = (l_w / total) * gini_unchecked(l_neg, l_pos, l_w)
                        + (r_w / total) * gini_unchecked(r_neg, r_pos, r_w);
                    let decrease = parent - child;
                    if decrease > MIN_DECREASE
                        && best.is_none_or(|b| decrease > b.decrease + MIN_DECREASE)
                    {
                        best = Some(Split {
                            feature: f,
                            threshold: (v + next) as f64 / 2.0,
                            decrease,
                        });
                    }
                }
            }
            v = next;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        /// Weighted fraction of positive rows that reached the leaf.
        value: f64,
        /// Training rows (with bootstrap multiplicity) in the leaf.
        samples: u32,
    },
}

/// Flat tree; node 0 is the root and children follow their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, samples: 0 }],
        }
    }

    pub fn stump(feature: u32, threshold: f64, left: f64, right: f64) -> Self {
        Self {
            nodes: vec![
                Node::Split {
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                },
                Node::Leaf {
                    value: left,
                    samples: 0,
                },
                Node::Leaf {
                    value: right,
                    samples: 0,
                },
            ],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn predict(&self, x: &[u8]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if (x[feature as usize] as f64) <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, u32)> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            Node::Leaf { value, samples } => Some((value, samples)),
            _ => None,
        })
    }

    fn max_feature(&self) -> Option<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                _ => None,
            })
            .max()
    }
}

/// Which cascade stage a forest serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Oor,
    Addr,
    D0,
    D1,
    Custom,
}

impl Task {
    pub fn code(self) -> u8 {
        match self {
            Task::Oor => 0,
            Task::Addr => 1,
            Task::D0 => 2,
            Task::D1 => 3,
            Task::Custom => 255,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Task::Oor),
            1 => Some(Task::Addr),
            2 => Some(Task::D0),
            3 => Some(Task::D1),
            255 => Some(Task::Custom),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Oor => "oor",
            Task::Addr => "addr",
            Task::D0 => "d0",
            Task::D1 => "d1",
            Task::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Task::Oor, Task::Addr, Task::D0, Task::D1, Task::Custom]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub hyperparams: Hyperparams,
    pub task: Task,
    /// Positive when `predict_proba >= threshold`.
    pub threshold: f64,
    pub n_features: usize,
}

impl Forest {
    pub fn from_trees(
        trees: Vec<Tree>,
        hyperparams: Hyperparams,
        task: Task,
        n_features: usize,
    ) -> Self {
        Self {
            trees,
            hyperparams,
            task,
            threshold: 0.5,
            n_features,
        }
    }

    pub fn with_task(mut self, task: Task) -> Self {
        self.task = task;
        self
    }

    /// Mean of the trees' leaf values.
    pub fn predict_proba(&self, x: &[u8]) -> Result<f64, ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::WidthMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn classify(&self, x: &[u8]) -> Result<bool, ForestError> {
        Ok(self.predict_proba(x)? >= self.threshold)
    }
}

/// Substream for tree `t`: the bootstrap draw and every feature subset of
/// that tree come from here.
pub fn tree_rng(base_seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(t as u64);
    rng
}

/// Bootstrap rows for tree `t` over `n` training rows.
pub fn bootstrap_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..n) as u32).collect()
}

pub fn class_weights(y: &[bool], scheme: ClassWeight) -> [f64; 2] {
    match scheme {
        ClassWeight::Uniform => [1.0, 1.0],
        ClassWeight::Balanced => {
            let n = y.len() as f64;
            let pos = y.iter().filter(|&&b| b).count() as f64;
            let neg = n - pos;
            [n / (2.0 * neg), n / (2.0 * pos)]
        }
    }
}

struct TreeBuilder<'a> {
    x: &'a FeatureMatrix,
    y: &'a [bool],
    weights: &'a [f64],
    hp: &'a Hyperparams,
    k: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    scratch: SplitScratch,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: &mut [u32], depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let (mut w_neg, mut w_pos) = (0.0, 0.0);
        for &r in rows.iter() {
            if self.y[r as usize] {
                w_pos += self.weights[r as usize];
            } else {
                w_neg += self.weights[r as usize];
            }
        }
        let leaf = Node::Leaf {
            value: w_pos / (w_neg + w_pos),
            samples: rows.len() as u32,
        };
        self.nodes.push(leaf);
        if depth >= self.hp.max_depth
            || rows.len() < self.hp.min_samples_split
            || w_neg == 0.0
            || w_pos == 0.0
        {
            return id;
        }
        let candidates = index::sample(&mut self.rng, self.x.n_features(), self.k).into_vec();
        let Some(split) = best_split(
            self.x,
            self.y,
            self.weights,
            rows,
            &candidates,
            self.hp.min_samples_leaf,
            &mut self.scratch,
        ) else {
            return id;
        };

        let col = self.x.column(split.feature);
        let mut mid = 0;
        for i in 0..rows.len() {
            if (col[rows[i] as usize] as f64) <= split.threshold {
                rows.swap(i, mid);
                mid += 1;
            }
        }
        let (l, r) = rows.split_at_mut(mid);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

pub fn train_forest(
    x: &[FeatureVector],
    y: &[bool],
    hp: &Hyperparams,
) -> Result<Forest, ForestError> {
    if x.len() != y.len() {
        return Err(ForestError::LengthMismatch {
            what: "feature rows vs labels",
            left: x.len(),
            right: y.len(),
        });
    }
    train_forest_matrix(&FeatureMatrix::from_rows(x)?, y, hp)
}

/// Trains on a prepared matrix. Runs trees on the current rayon pool.
pub fn train_forest_matrix(
    x: &FeatureMatrix,
    y: &[bool],
    hp: &Hyperparams,
) -> Result<Forest, ForestError> {
    if x.n_rows() != y.len() {
        return Err(ForestError::LengthMismatch {
            what: "feature rows vs labels",
            left: x.n_rows(),
            right: y.len(),
        });
    }
    if y.is_empty() {
        return Err(ForestError::EmptyInput);
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(ForestError::SingleClassInput);
    }
    hp.validate(x.n_features())?;

    let cw = class_weights(y, hp.class_weight);
    let weights: Vec<f64> = y.iter().map(|&b| cw[b as usize]).collect();
    let k = hp.max_features.resolve(x.n_features());
    let n = y.len();

    let trees = (0..hp.tree_count)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(hp.base_seed, t);
            let mut rows = bootstrap_rows(&mut rng, n);
            let mut b = TreeBuilder {
                x,
                y,
                weights: &weights,
                hp,
                k,
                rng,
                nodes: Vec::new(),
                scratch: SplitScratch::default(),
            };
            b.grow(&mut rows, 0);
            Tree { nodes: b.nodes }
        })
        .collect();

    Ok(Forest::from_trees(
        trees,
        hp.clone(),
        Task::Custom,
        x.n_features(),
    ))
}

// ---------------------------------------------------------------------------
// Model file

pub const FOREST_MAGIC: &[u8; 4] = b"APBF";
pub const FOREST_VERSION: u16 = 1;

pub(crate) struct ByteWriter(pub Vec<u8>);

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ForestError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ForestError::CorruptModel("unexpected end of data".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, ForestError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, ForestError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, ForestError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, ForestError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Checks `magic | version` and the trailing SHA-256 over everything in
/// between, returning the payload.
pub(crate) fn open_envelope<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u16,
) -> Result<&'a [u8], ForestError> {
    if bytes.len() < 6 || &bytes[..4] != magic {
        return Err(ForestError::CorruptModel("bad magic".into()));
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(ForestError::VersionMismatch {
            found,
            expected: version,
        });
    }
    if bytes.len() < 6 + 32 {
        return Err(ForestError::CorruptModel("truncated".into()));
    }
    let (payload, digest) = bytes[6..].split_at(bytes.len() - 6 - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(ForestError::CorruptModel("checksum mismatch".into()));
    }
    Ok(payload)
}

pub(crate) fn seal_envelope(magic: &[u8; 4], version: u16, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 38);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&Sha256::digest(payload));
    out
}

fn write_forest_payload(f: &Forest, w: &mut ByteWriter) {
    let hp = &f.hyperparams;
    w.u8(f.task.code());
    w.u32(f.n_features as u32);
    w.f64(f.threshold);
    w.u32(hp.tree_count as u32);
    w.u32(hp.max_depth as u32);
    w.u32(hp.min_samples_split as u32);
    w.u32(hp.min_samples_leaf as u32);
    match hp.max_features {
        MaxFeatures::Sqrt => {
            w.u8(0);
            w.u32(0);
        }
        MaxFeatures::Fixed(k) => {
            w.u8(1);
            w.u32(k);
        }
    }
    w.u8(match hp.class_weight {
        ClassWeight::Balanced => 0,
        ClassWeight::Uniform => 1,
    });
    w.u64(hp.base_seed);
    w.u32(f.trees.len() as u32);
    for t in &f.trees {
        w.u32(t.nodes.len() as u32);
        for n in &t.nodes {
            match *n {
                Node::Leaf { value, samples } => {
                    w.u8(0);
                    w.f64(value);
                    w.u32(samples);
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    w.u8(1);
                    w.u32(feature);
                    w.f64(threshold);
                    w.u32(left);
                    w.u32(right);
                }
            }
        }
    }
}

fn read_forest_payload(r: &mut ByteReader<'_>) -> Result<Forest, ForestError> {
    let corrupt = |m: &str| ForestError::CorruptModel(m.to_string());
    let task = Task::from_code(r.u8()?).ok_or_else(|| corrupt("unknown task"))?;
    let n_features = r.u32()? as usize;
    let threshold = r.f64()?;
    let tree_count = r.u32()? as usize;
    let max_depth = r.u32()? as usize;
    let min_samples_split = r.u32()? as usize;
    let min_samples_leaf = r.u32()? as usize;
    let max_features = match (r.u8()?, r.u32()?) {
        (0, _) => MaxFeatures::Sqrt,
        (1, k) => MaxFeatures::Fixed(k),
        _ => return Err(corrupt("unknown max_features")),
    };
    let class_weight = match r.u8()? {
        0 => ClassWeight::Balanced,
        1 => ClassWeight::Uniform,
        _ => return Err(corrupt("unknown class weighting")),
    };
    let base_seed = r.u64()?;
    let n_trees = r.u32()? as usize;
    if n_trees == 0 {
        return Err(corrupt("forest without trees"));
    }
    let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
    for _ in 0..n_trees {
        let n_nodes = r.u32()? as usize;
        if n_nodes == 0 || n_nodes > r.remaining() {
            return Err(corrupt("bad node count"));
        }
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let node = match r.u8()? {
                0 => Node::Leaf {
                    value: r.f64()?,
                    samples: r.u32()?,
                },
                1 => {
                    let feature = r.u32()?;
                    let threshold = r.f64()?;
                    let left = r.u32()?;
                    let right = r.u32()?;
                    let ok = |c: u32| (c as usize) > i && (c as usize) < n_nodes;
                    if !ok(left) || !ok(right) || feature as usize >= n_features {
                        return Err(corrupt("dangling split"));
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
                _ => return Err(corrupt("unknown node tag")),
            };
            nodes.push(node);
        }
        let tree = Tree { nodes };
        debug_assert!(tree.max_feature().is_none_or(|f| (f as usize) < n_features));
        trees.push(tree);
    }
    Ok(Forest {
        trees,
        hyperparams: Hyperparams {
            tree_count,
            max_depth,
            min_samples_split,
            min_samples_leaf,
            max_features,
            class_weight,
            base_seed,
        },
        task,
        threshold,
        n_features,
    })
}

pub fn save_forest(f: &Forest) -> Vec<u8> {
    let mut w = ByteWriter(Vec::new());
    write_forest_payload(f, &mut w);
    seal_envelope(FOREST_MAGIC, FOREST_VERSION, &w.0)
}

pub fn load_forest(bytes: &[u8]) -> Result<Forest, ForestError> {
    let payload = open_envelope(bytes, FOREST_MAGIC, FOREST_VERSION)?;
    let mut r = ByteReader::new(payload);
    let f = read_forest_payload(&mut r)?;
    if r.remaining() != 0 {
        return Err(ForestError::CorruptModel("trailing bytes".into()));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apb::ApbTransaction;

    fn sample_with(words: [u32; SAMPLE_LEN], field: Field) -> Sample {
        let txns = words.map(|w| ApbTransaction {
            address: if field == Field::Address { w } else { 0 },
            data: if field == Field::Data { w } else { 0 },
            is_write: true,
            time: 0,
        });
        Sample::new(txns, None)
    }

    #[test]
    fn featurize_layout() {
        let mut words = [0u32; SAMPLE_LEN];
        words[0] = 0x8A;
        let s = sample_with(words, Field::Address);
        for layout in [FeatureLayout::RawBits, FeatureLayout::BitsWithPairStats] {
            let f = featurize(&s, Field::Address, layout);
            assert_eq!(f.len(), layout.width());
            let set: Vec<usize> = (0..32).filter(|&i| f.0[i] == 1).collect();
            assert_eq!(set, vec![1, 3, 7]);
            assert!(f.0[32..RAW_BITS].iter().all(|&v| v == 0));
        }
        assert_eq!(FeatureLayout::BitsWithPairStats.width(), 706);
    }

    #[test]
    fn all_zero_field_is_zero_vector() {
        let s = sample_with([0; SAMPLE_LEN], Field::Data);
        for layout in [FeatureLayout::RawBits, FeatureLayout::BitsWithPairStats] {
            assert!(featurize(&s, Field::Data, layout).0.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn permuting_transactions_permutes_blocks() {
        let words: [u32; SAMPLE_LEN] =
            std::array::from_fn(|i| (i as u32).wrapping_mul(0x9E37_79B9));
        let mut rev = words;
        rev.reverse();
        let a = featurize(
            &sample_with(words, Field::Data),
            Field::Data,
            FeatureLayout::BitsWithPairStats,
        );
        let b = featurize(
            &sample_with(rev, Field::Data),
            Field::Data,
            FeatureLayout::BitsWithPairStats,
        );
        for t in 0..SAMPLE_LEN {
            assert_eq!(
                a.0[t * 32..t * 32 + 32],
                b.0[(19 - t) * 32..(19 - t) * 32 + 32]
            );
        }
        assert_eq!(a.0[RAW_BITS..], b.0[RAW_BITS..]);
    }

    #[test]
    fn stats_block_values() {
        // bit 0 always set, bit 1 never: pair 0 always disagrees, pair 1 is
        // 00 in every transaction.
        let s = sample_with([0b1; SAMPLE_LEN], Field::Data);
        let f = featurize(&s, Field::Data, FeatureLayout::BitsWithPairStats).0;
        assert_eq!(f[RAW_BITS], 20);
        assert_eq!(f[RAW_BITS + 1], 0);
        assert_eq!(f[RAW_BITS + 32], 20);
        assert_eq!(f[RAW_BITS + 33], 0);
        assert_eq!(f[RAW_BITS + 63], 0); // min disagreement
        assert_eq!(f[RAW_BITS + 64], 0); // some pair never leaves 00
        assert_eq!(f[RAW_BITS + 65], 0); // no pair is ever 11
        let s = sample_with([u32::MAX; SAMPLE_LEN], Field::Data);
        let f = featurize(&s, Field::Data, FeatureLayout::BitsWithPairStats).0;
        assert_eq!(f[RAW_BITS + 64], 20);
        assert_eq!(f[RAW_BITS + 65], 20);
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(10.0, 0.0).unwrap(), 0.0);
        assert_eq!(gini(5.0, 5.0).unwrap(), 0.5);
        assert_eq!(gini(3.0, 1.0).unwrap(), 0.375);
        assert_eq!(gini(0.0, 0.0), Err(ForestError::EmptyPartition));
    }

    fn matrix(rows: &[&[u8]]) -> FeatureMatrix {
        let v: Vec<FeatureVector> = rows.iter().map(|r| FeatureVector(r.to_vec())).collect();
        FeatureMatrix::from_rows(&v).unwrap()
    }

    #[test]
    fn perfect_separator_is_found() {
        let x = matrix(&[
            &[0, 1, 0],
            &[1, 1, 1],
            &[0, 0, 0],
            &[1, 0, 1],
            &[1, 1, 0],
            &[0, 0, 1],
        ]);
        let y = [false, true, false, true, true, false];
        let rows: Vec<u32> = (0..6).collect();
        let s = best_split(
            &x,
            &y,
            &[1.0; 6],
            &rows,
            &[0, 1, 2],
            2,
            &mut SplitScratch::default(),
        )
        .unwrap();
        assert_eq!(s.feature, 0);
        assert_eq!(s.threshold, 0.5);
        assert_eq!(s.decrease, 0.5);
    }

    #[test]
    fn constant_features_give_no_split() {
        let x = matrix(&[&[1, 0], &[1, 0], &[1, 0], &[1, 0]]);
        let rows: Vec<u32> = (0..4).collect();
        let y = [true, false, true, false];
        assert!(best_split(
            &x,
            &y,
            &[1.0; 4],
            &rows,
            &[0, 1],
            1,
            &mut SplitScratch::default()
        )
        .is_none());
    }

    #[test]
    fn min_leaf_blocks_small_children() {
        let x = matrix(&[&[1], &[0], &[0], &[0]]);
        let y = [true, false, false, false];
        let rows: Vec<u32> = (0..4).collect();
        let mut sc = SplitScratch::default();
        assert!(best_split(&x, &y, &[1.0; 4], &rows, &[0], 2, &mut sc).is_none());
        assert!(best_split(&x, &y, &[1.0; 4], &rows, &[0], 1, &mut sc).is_some());
    }

    #[test]
    fn integer_features_use_midpoints() {
        let x = matrix(&[&[0], &[3], &[7], &[20]]);
        let y = [false, false, true, true];
        let rows: Vec<u32> = (0..4).collect();
        let s = best_split(
            &x,
            &y,
            &[1.0; 4],
            &rows,
            &[0],
            1,
            &mut SplitScratch::default(),
        )
        .unwrap();
        assert_eq!(s.threshold, 5.0);
    }

    #[test]
    fn balanced_weights() {
        assert_eq!(
            class_weights(&[true, false, true, false], ClassWeight::Balanced),
            [1.0, 1.0]
        );
        assert_eq!(
            class_weights(&[true, false, false, false], ClassWeight::Balanced),
            [4.0 / 6.0, 2.0]
        );
    }

    fn toy(n: usize, seed: u64) -> (Vec<FeatureVector>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let row: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2)).collect();
            y.push(row[5] == 1);
            x.push(FeatureVector(row));
        }
        (x, y)
    }

    fn small_hp() -> Hyperparams {
        Hyperparams {
            tree_count: 25,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn separable_toy_problem() {
        let (x, y) = toy(300, 1);
        let f = train_forest(&x, &y, &Hyperparams::default()).unwrap();
        assert_eq!(f.trees.len(), 200);
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(f.classify(xi.as_slice()).unwrap(), yi);
        }
        let (hx, hy) = toy(100, 2);
        for (xi, &yi) in hx.iter().zip(&hy) {
            let p = f.predict_proba(xi.as_slice()).unwrap();
            if yi {
                assert!(p >= 0.75, "{p}");
            } else {
                assert!(p <= 0.25, "{p}");
            }
        }
    }

    #[test]
    fn structural_bounds_hold() {
        let (x, y) = toy(400, 3);
        let hp = Hyperparams {
            max_depth: 3,
            ..small_hp()
        };
        // label is noisy so trees want to go deep
        let y: Vec<bool> = y
            .iter()
            .enumerate()
            .map(|(i, &b)| b ^ (i % 7 == 0))
            .collect();
        let f = train_forest(&x, &y, &hp).unwrap();
        for t in &f.trees {
            assert!(t.depth() <= 3);
            assert!(t.leaves().all(|(v, n)| (0.0..=1.0).contains(&v) && n >= 2));
        }
    }

    #[test]
    fn training_errors() {
        let (x, _) = toy(10, 4);
        assert_eq!(
            train_forest(&x, &[true; 10], &small_hp()).unwrap_err(),
            ForestError::SingleClassInput
        );
        assert_eq!(
            train_forest(&[], &[], &small_hp()).unwrap_err(),
            ForestError::EmptyInput
        );
        assert!(matches!(
            train_forest(&x, &[true; 3], &small_hp()),
            Err(ForestError::LengthMismatch { .. })
        ));
        let hp = Hyperparams {
            max_features: MaxFeatures::Fixed(99),
            ..small_hp()
        };
        let y: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert!(matches!(
            train_forest(&x, &y, &hp),
            Err(ForestError::InvalidHyperparams(_))
        ));
    }

    #[test]
    fn training_is_independent_of_worker_count() {
        let (x, y) = toy(200, 5);
        let y: Vec<bool> = y
            .iter()
            .enumerate()
            .map(|(i, &b)| b ^ (i % 5 == 0))
            .collect();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| train_forest(&x, &y, &small_hp()).unwrap());
        let b = four.install(|| train_forest(&x, &y, &small_hp()).unwrap());
        assert_eq!(save_forest(&a), save_forest(&b));
    }

    #[test]
    fn bootstrap_depends_only_on_seed_tree_and_n() {
        let a = bootstrap_rows(&mut tree_rng(42, 7), 50);
        let b = bootstrap_rows(&mut tree_rng(42, 7), 50);
        let c = bootstrap_rows(&mut tree_rng(42, 8), 50);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn prediction_width_is_checked() {
        let f = Forest::from_trees(
            vec![Tree::leaf(0.25)],
            Hyperparams::default(),
            Task::Custom,
            4,
        );
        assert_eq!(f.predict_proba(&[0; 4]).unwrap(), 0.25);
        assert_eq!(
            f.predict_proba(&[0; 3]),
            Err(ForestError::WidthMismatch {
                expected: 4,
                got: 3
            })
        );
    }

    #[test]
    fn identical_trees_and_duplicates() {
        let stump = Tree::stump(0, 0.5, 0.2, 0.9);
        let f = Forest::from_trees(
            vec![stump.clone(); 5],
            Hyperparams::default(),
            Task::Custom,
            1,
        );
        assert_eq!(f.predict_proba(&[1]).unwrap(), 0.9);
        let mut mixed = Forest::from_trees(
            vec![stump.clone(), Tree::leaf(0.0)],
            Hyperparams::default(),
            Task::Custom,
            1,
        );
        let before = mixed.predict_proba(&[1]).unwrap();
        mixed.trees.push(stump);
        let after = mixed.predict_proba(&[1]).unwrap();
        assert!(before < after && after < 0.9);
    }

    #[test]
    fn threshold_flips_exactly() {
        let mut f = Forest::from_trees(
            vec![Tree::leaf(0.5)],
            Hyperparams::default(),
            Task::Custom,
            1,
        );
        assert!(f.classify(&[0]).unwrap());
        f.threshold = 0.5 + f64::EPSILON;
        assert!(!f.classify(&[0]).unwrap());
    }

    #[test]
    fn model_file_round_trip_and_corruption() {
        let (x, y) = toy(120, 6);
        let f = train_forest(&x, &y, &small_hp())
            .unwrap()
            .with_task(Task::D1);
        let bytes = save_forest(&f);
        let back = load_forest(&bytes).unwrap();
        assert_eq!(back, f);

        assert!(matches!(
            load_forest(&bytes[..bytes.len() - 1]),
            Err(ForestError::CorruptModel(_))
        ));
        assert!(matches!(
            load_forest(&bytes[..3]),
            Err(ForestError::CorruptModel(_))
        ));
        let mut bumped = bytes.clone();
        bumped[4] += 1;
        assert_eq!(
            load_forest(&bumped),
            Err(ForestError::VersionMismatch {
                found: 2,
                expected: 1
            })
        );
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(
            load_forest(&flipped),
            Err(ForestError::CorruptModel(_))
        ));
    }
}
