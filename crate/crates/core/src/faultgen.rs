// SPDX-License-Identifier: Apache-2.0

//! Labeled corpus generation: clean traffic plus the three bus fault models
//! (out-of-range requests, wired-OR address shorts, stuck data pairs), and a
//! rule-based stuck-pair detector.

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apb::{canonical_times, ApbTransaction, Label, Sample, SAMPLE_LEN};

/// Access-phase spacing used for generated transactions.
pub const DEFAULT_PERIOD: u64 = 10;
pub const DATASET_FORMAT: &str = "apb-triage-dataset";
pub const DATASET_VERSION: u32 = 1;
/// Adjacent pairs on a 32-bit bus: pair `i` is bits `i + 1` and `i`.
pub const PAIR_COUNT: u8 = 31;
pub const OOR_TXN_COUNT_POLICY: &str = "uniform 1..20";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FaultGenError {
    #[error("address map must contain at least one range")]
    EmptyMap,
    #[error("range 0x{base:08x}..=0x{last:08x} is inverted")]
    InvertedRange { base: u32, last: u32 },
    #[error("ranges 0x{0:08x} and 0x{1:08x} overlap")]
    OverlappingRanges(u32, u32),
    #[error("address map covers the whole 32-bit space; no out-of-range address exists")]
    MapCoversFullSpace,
    #[error("no adjacent address pair can be shorted without leaving the address map")]
    NoEligiblePair,
    #[error("read fraction {0} is outside [0, 1]")]
    ReadFraction(f64),
    #[error("generation spec requests zero samples")]
    EmptySpec,
    #[error("dataset line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("dataset I/O: {0}")]
    Io(String),
}

/// Valid completer address ranges, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u32, u32)>", into = "Vec<(u32, u32)>")]
pub struct AddressMap {
    ranges: Vec<(u32, u32)>,
}

impl TryFrom<Vec<(u32, u32)>> for AddressMap {
    type Error = FaultGenError;
    fn try_from(ranges: Vec<(u32, u32)>) -> Result<Self, Self::Error> {
        Self::new(ranges)
    }
}

impl From<AddressMap> for Vec<(u32, u32)> {
    fn from(m: AddressMap) -> Self {
        m.ranges
    }
}

impl Default for AddressMap {
    /// Single completer owning the lower half of the address space.
    fn default() -> Self {
        Self {
            ranges: vec![(0x0000_0000, 0x7FFF_FFFF)],
        }
    }
}

impl AddressMap {
    /// Ranges are sorted on construction. A map covering all 2^32 addresses
    /// is accepted here but rejected by [`inject_out_of_range`].
    pub fn new(mut ranges: Vec<(u32, u32)>) -> Result<Self, FaultGenError> {
        if ranges.is_empty() {
            return Err(FaultGenError::EmptyMap);
        }
        for &(base, last) in &ranges {
            if base > last {
                return Err(FaultGenError::InvertedRange { base, last });
            }
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(FaultGenError::OverlappingRanges(w[0].0, w[1].0));
            }
        }
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[(u32, u32)] {
        &self.ranges
    }

    pub fn contains(&self, address: u32) -> bool {
        self.ranges
            .iter()
            .any(|&(base, last)| base <= address && address <= last)
    }

    fn valid_size(&self) -> u64 {
        self.ranges
            .iter()
            .map(|&(b, l)| l as u64 - b as u64 + 1)
            .sum()
    }

    /// Gaps between (and around) the valid ranges.
    fn complement(&self) -> Vec<(u32, u32)> {
        let mut gaps = Vec::new();
        let mut next: u64 = 0;
        for &(base, last) in &self.ranges {
            if (base as u64) > next {
                gaps.push((next as u32, base - 1));
            }
            next = last as u64 + 1;
        }
        if next <= u32::MAX as u64 {
            gaps.push((next as u32, u32::MAX));
        }
        gaps
    }

    pub fn sample_valid<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        pick_uniform(&self.ranges, self.valid_size(), rng)
    }

    pub fn sample_invalid<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<u32, FaultGenError> {
        let gaps = self.complement();
        let size: u64 = gaps.iter().map(|&(b, l)| l as u64 - b as u64 + 1).sum();
        if size == 0 {
            return Err(FaultGenError::MapCoversFullSpace);
        }
        Ok(pick_uniform(&gaps, size, rng))
    }
}

fn pick_uniform<R: Rng + ?Sized>(ranges: &[(u32, u32)], total: u64, rng: &mut R) -> u32 {
    let mut k = rng.gen_range(0..total);
    for &(base, last) in ranges {
        let len = last as u64 - base as u64 + 1;
        if k < len {
            return (base as u64 + k) as u32;
        }
        k -= len;
    }
    unreachable!("offset within total size")
}

/// Constant value forced onto a stuck data pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StuckPattern {
    #[serde(rename = "00")]
    Zeros,
    #[serde(rename = "11")]
    Ones,
}

impl StuckPattern {
    pub fn label(self) -> Label {
        match self {
            StuckPattern::Zeros => Label::DataError0,
            StuckPattern::Ones => Label::DataError1,
        }
    }
}

#[inline]
fn pair_mask(pair: u8) -> u32 {
    debug_assert!(pair < PAIR_COUNT);
    0b11 << pair
}

/// Both lines of the pair carry the OR of their driven values.
pub fn wired_or(word: u32, pair: u8) -> u32 {
    let m = pair_mask(pair);
    if word & m != 0 {
        word | m
    } else {
        word
    }
}

pub fn force_pair(word: u32, pair: u8, pattern: StuckPattern) -> u32 {
    let m = pair_mask(pair);
    match pattern {
        StuckPattern::Zeros => word & !m,
        StuckPattern::Ones => word | m,
    }
}

/// Twenty uniform transfers inside `map`, labeled `no_error`.
pub fn gen_clean_sample<R: Rng + ?Sized>(
    rng: &mut R,
    map: &AddressMap,
    read_fraction: f64,
) -> Sample {
    let mut txns = [ApbTransaction {
        address: 0,
        data: 0,
        is_write: true,
        time: 0,
    }; SAMPLE_LEN];
    for t in txns.iter_mut() {
        t.address = map.sample_valid(rng);
        t.data = rng.gen();
        t.is_write = !(read_fraction > 0.0 && rng.gen_bool(read_fraction));
    }
    canonical_times(&mut txns, DEFAULT_PERIOD);
    Sample::new(txns, Some(Label::NoError))
}

/// Moves `k ~ U{1..20}` distinct transactions outside the map.
pub fn inject_out_of_range<R: Rng + ?Sized>(
    s: &Sample,
    map: &AddressMap,
    rng: &mut R,
) -> Result<Sample, FaultGenError> {
    let k = rng.gen_range(1..=SAMPLE_LEN);
    inject_out_of_range_at(s, map, &index::sample(rng, SAMPLE_LEN, k).into_vec(), rng)
}

/// Replaces the addresses at `positions` with uniform out-of-map draws.
pub fn inject_out_of_range_at<R: Rng + ?Sized>(
    s: &Sample,
    map: &AddressMap,
    positions: &[usize],
    rng: &mut R,
) -> Result<Sample, FaultGenError> {
    let mut out = s.clone();
    for &p in positions {
        out.transactions[p].address = map.sample_invalid(rng)?;
    }
    Ok(out.with_label(Label::OutOfRangeError))
}

/// Wired-OR short on one adjacent address pair, applied to every
/// transaction. The pair is drawn among those that keep the sample inside
/// `map`, so a short never doubles as an out-of-range access.
pub fn inject_address_short<R: Rng + ?Sized>(
    s: &Sample,
    map: &AddressMap,
    rng: &mut R,
) -> Result<Sample, FaultGenError> {
    let eligible: Vec<u8> = (0..PAIR_COUNT)
        .filter(|&p| {
            s.transactions
                .iter()
                .all(|t| map.contains(wired_or(t.address, p)))
        })
        .collect();
    let pair = *eligible.choose(rng).ok_or(FaultGenError::NoEligiblePair)?;
    Ok(inject_address_short_at(s, pair))
}

pub fn inject_address_short_at(s: &Sample, pair: u8) -> Sample {
    let mut out = s.clone();
    for t in out.transactions.iter_mut() {
        t.address = wired_or(t.address, pair);
    }
    out.with_label(Label::AddressError)
}

/// Forces one adjacent data pair (uniform over the 31 pairs) to `pattern`
/// in every transaction.
pub fn inject_data_stuck<R: Rng + ?Sized>(
    s: &Sample,
    rng: &mut R,
    pattern: StuckPattern,
) -> Sample {
    let pair = rng.gen_range(0..PAIR_COUNT);
    inject_data_stuck_at(s, pair, pattern)
}

pub fn inject_data_stuck_at(s: &Sample, pair: u8, pattern: StuckPattern) -> Sample {
    let mut out = s.clone();
    for t in out.transactions.iter_mut() {
        t.data = force_pair(t.data, pair, pattern);
    }
    out.with_label(pattern.label())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Address,
    Data,
}

impl Field {
    pub fn words(self, s: &Sample) -> [u32; SAMPLE_LEN] {
        match self {
            Field::Address => s.addresses(),
            Field::Data => s.data(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairPattern {
    Zeros,
    Ones,
    EqualMixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StuckPair {
    pub pair: u8,
    pub pattern: PairPattern,
}

/// Lowest adjacent pair whose two bits agree in every transaction.
pub fn stuck_pair_oracle(s: &Sample, field: Field) -> Option<StuckPair> {
    let words = field.words(s);
    (0..PAIR_COUNT).find_map(|pair| {
        let m = pair_mask(pair);
        let mut zeros = true;
        let mut ones = true;
        for w in words {
            match w & m {
                0 => ones = false,
                x if x == m => zeros = false,
                _ => return None,
            }
        }
        let pattern = match (zeros, ones) {
            (true, _) => PairPattern::Zeros,
            (_, true) => PairPattern::Ones,
            _ => PairPattern::EqualMixed,
        };
        Some(StuckPair { pair, pattern })
    })
}

/// Requested sample count per label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub no_error: usize,
    pub out_of_range_error: usize,
    pub address_error: usize,
    pub data_error_0: usize,
    pub data_error_1: usize,
}

impl LabelCounts {
    pub fn uniform(n: usize) -> Self {
        Self {
            no_error: n,
            out_of_range_error: n,
            address_error: n,
            data_error_0: n,
            data_error_1: n,
        }
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::NoError => self.no_error,
            Label::OutOfRangeError => self.out_of_range_error,
            Label::AddressError => self.address_error,
            Label::DataError0 => self.data_error_0,
            Label::DataError1 => self.data_error_1,
        }
    }

    pub fn set(&mut self, label: Label, n: usize) {
        match label {
            Label::NoError => self.no_error = n,
            Label::OutOfRangeError => self.out_of_range_error = n,
            Label::AddressError => self.address_error = n,
            Label::DataError0 => self.data_error_0 = n,
            Label::DataError1 => self.data_error_1 = n,
        }
    }

    pub fn total(&self) -> usize {
        Label::ALL.iter().map(|&l| self.get(l)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub counts: LabelCounts,
    pub seed: u64,
    pub address_map: AddressMap,
    pub read_fraction: f64,
    pub oor_txn_count_policy: String,
}

impl GenSpec {
    pub fn new(counts: LabelCounts, seed: u64) -> Self {
        Self {
            counts,
            seed,
            address_map: AddressMap::default(),
            read_fraction: 0.0,
            oor_txn_count_policy: OOR_TXN_COUNT_POLICY.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), FaultGenError> {
        if self.counts.total() == 0 {
            return Err(FaultGenError::EmptySpec);
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(FaultGenError::ReadFraction(self.read_fraction));
        }
        if self.counts.out_of_range_error > 0 && self.address_map.valid_size() == 1 << 32 {
            return Err(FaultGenError::MapCoversFullSpace);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GenSpec,
    pub samples: Vec<Sample>,
}

/// Deterministic substream for sample `index`; stream 0 is reserved for the
/// label shuffle.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates one labeled sample of class `label`.
pub fn gen_labeled_sample<R: Rng + ?Sized>(
    label: Label,
    map: &AddressMap,
    read_fraction: f64,
    rng: &mut R,
) -> Result<Sample, FaultGenError> {
    let clean = gen_clean_sample(rng, map, read_fraction);
    match label {
        Label::NoError => Ok(clean),
        Label::OutOfRangeError => inject_out_of_range(&clean, map, rng),
        Label::AddressError => inject_address_short(&clean, map, rng),
        Label::DataError0 => Ok(inject_data_stuck(&clean, rng, StuckPattern::Zeros)),
        Label::DataError1 => Ok(inject_data_stuck(&clean, rng, StuckPattern::Ones)),
    }
}

/// Builds the dataset. Labels are shuffled on the seed's base stream; each
/// sample then draws from its own `(seed, index)` substream, so the output
/// is the same for any rayon worker count.
pub fn generate_dataset(spec: &GenSpec) -> Result<Dataset, FaultGenError> {
    spec.validate()?;
    let mut labels: Vec<Label> = Label::ALL
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, spec.counts.get(l)))
        .collect();
    let mut base = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut base);

    let samples = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = sample_rng(spec.seed, i);
            gen_labeled_sample(label, &spec.address_map, spec.read_fraction, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    spec: GenSpec,
}

#[derive(Serialize, Deserialize)]
struct TxnRecord {
    addr: String,
    data: String,
    w: bool,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    label: Label,
    txns: Vec<TxnRecord>,
}

fn parse_hex(s: &str) -> Option<u32> {
    let digits = s.strip_prefix("0x")?;
    if digits.len() != 8 {
        return None;
    }
    u32::from_str_radix(digits, 16).ok()
}

impl Dataset {
    pub fn count(&self, label: Label) -> usize {
        self.samples
            .iter()
            .filter(|s| s.label == Some(label))
            .count()
    }

    /// JSON-Lines: a header line, then one sample per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            seed: self.spec.seed,
            spec: self.spec.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            let rec = SampleRecord {
                label: s.label.expect("dataset samples are labeled"),
                txns: s
                    .transactions
                    .iter()
                    .map(|t| TxnRecord {
                        addr: format!("0x{:08x}", t.address),
                        data: format!("0x{:08x}", t.data),
                        w: t.is_write,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, FaultGenError> {
        let mut lines = r.lines().enumerate();
        let fmt_err = |line: usize, detail: String| FaultGenError::Format { line, detail };
        let (_, first) = lines
            .next()
            .ok_or_else(|| fmt_err(1, "empty file".into()))?;
        let first = first.map_err(|e| FaultGenError::Io(e.to_string()))?;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| fmt_err(1, format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(fmt_err(
                1,
                format!("unsupported dataset {} v{}", header.format, header.version),
            ));
        }
        let mut samples = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| FaultGenError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord =
                serde_json::from_str(&line).map_err(|e| fmt_err(n + 1, e.to_string()))?;
            let mut txns = Vec::with_capacity(SAMPLE_LEN);
            for t in &rec.txns {
                let address = parse_hex(&t.addr)
                    .ok_or_else(|| fmt_err(n + 1, format!("bad address `{}`", t.addr)))?;
                let data = parse_hex(&t.data)
                    .ok_or_else(|| fmt_err(n + 1, format!("bad data `{}`", t.data)))?;
                txns.push(ApbTransaction {
                    address,
                    data,
                    is_write: t.w,
                    time: 0,
                });
            }
            canonical_times(&mut txns, DEFAULT_PERIOD);
            let sample = Sample::from_slice(&txns, Some(rec.label)).map_err(|len| {
                fmt_err(n + 1, format!("{len} transactions, expected {SAMPLE_LEN}"))
            })?;
            samples.push(sample);
        }
        Ok(Dataset {
            spec: header.spec,
            samples,
        })
    }
}
