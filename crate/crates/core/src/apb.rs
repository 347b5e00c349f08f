// SPDX-License-Identifier: Apache-2.0

//! APB transfer reconstruction from waveforms, and the inverse: waveform
//! synthesis from a transfer list.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vcd::{self, FourState, Timescale, VarDecl, VcdDocument, VcdError};

/// Transactions per diagnosis window.
pub const SAMPLE_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Psel,
    Penable,
    Pwrite,
    Paddr,
    Pwdata,
    Prdata,
    Pready,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Psel => "PSEL",
            Role::Penable => "PENABLE",
            Role::Pwrite => "PWRITE",
            Role::Paddr => "PADDR",
            Role::Pwdata => "PWDATA",
            Role::Prdata => "PRDATA",
            Role::Pready => "PREADY",
        }
    }

    pub fn width(self) -> u32 {
        match self {
            Role::Paddr | Role::Pwdata | Role::Prdata => 32,
            _ => 1,
        }
    }
}

/// Binds each APB role to a VCD id code or hierarchical reference.
/// Serialized as a flat JSON object keyed by role name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalMap {
    #[serde(rename = "PSEL")]
    pub psel: String,
    #[serde(rename = "PENABLE")]
    pub penable: String,
    #[serde(rename = "PWRITE")]
    pub pwrite: String,
    #[serde(rename = "PADDR")]
    pub paddr: String,
    #[serde(rename = "PWDATA")]
    pub pwdata: String,
    #[serde(rename = "PRDATA")]
    pub prdata: String,
    #[serde(rename = "PREADY", default, skip_serializing_if = "Option::is_none")]
    pub pready: Option<String>,
}

impl Default for SignalMap {
    /// Hierarchical names used by [`synth_waveform`] output.
    fn default() -> Self {
        Self {
            psel: "apb.PSEL".into(),
            penable: "apb.PENABLE".into(),
            pwrite: "apb.PWRITE".into(),
            paddr: "apb.PADDR".into(),
            pwdata: "apb.PWDATA".into(),
            prdata: "apb.PRDATA".into(),
            pready: None,
        }
    }
}

impl SignalMap {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("signal map serializes")
    }

    pub fn binding(&self, role: Role) -> Option<&str> {
        match role {
            Role::Psel => Some(&self.psel),
            Role::Penable => Some(&self.penable),
            Role::Pwrite => Some(&self.pwrite),
            Role::Paddr => Some(&self.paddr),
            Role::Pwdata => Some(&self.pwdata),
            Role::Prdata => Some(&self.prdata),
            Role::Pready => self.pready.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ApbTransaction {
    pub address: u32,
    pub data: u32,
    pub is_write: bool,
    pub time: u64,
}

impl fmt::Display for ApbTransaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = if self.is_write { "WRITE" } else { "READ" };
        write!(
            f,
            "{dir} addr=0x{:08X} data=0x{:08X}",
            self.address, self.data
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NoError,
    OutOfRangeError,
    AddressError,
    #[serde(rename = "data_error_0")]
    DataError0,
    #[serde(rename = "data_error_1")]
    DataError1,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::NoError,
        Label::OutOfRangeError,
        Label::AddressError,
        Label::DataError0,
        Label::DataError1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NoError => "no_error",
            Label::OutOfRangeError => "out_of_range_error",
            Label::AddressError => "address_error",
            Label::DataError0 => "data_error_0",
            Label::DataError1 => "data_error_1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }

    /// Reporting view: both stuck-data labels collapse into `data_error`.
    pub fn merged(self) -> ReportClass {
        match self {
            Label::NoError => ReportClass::NoError,
            Label::OutOfRangeError => ReportClass::OutOfRangeError,
            Label::AddressError => ReportClass::AddressError,
            Label::DataError0 | Label::DataError1 => ReportClass::DataError,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Merged reporting category. Never used as a training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReportClass {
    OutOfRangeError,
    AddressError,
    DataError,
    NoError,
}

impl ReportClass {
    pub const ALL: [ReportClass; 4] = [
        ReportClass::OutOfRangeError,
        ReportClass::AddressError,
        ReportClass::DataError,
        ReportClass::NoError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportClass::OutOfRangeError => "out_of_range_error",
            ReportClass::AddressError => "address_error",
            ReportClass::DataError => "data_error",
            ReportClass::NoError => "no_error",
        }
    }
}

impl fmt::Display for ReportClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Exactly [`SAMPLE_LEN`] consecutive transfers, optionally labeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub transactions: [ApbTransaction; SAMPLE_LEN],
    pub label: Option<Label>,
}

impl Sample {
    pub fn new(transactions: [ApbTransaction; SAMPLE_LEN], label: Option<Label>) -> Self {
        Self {
            transactions,
            label,
        }
    }

    /// Fails with the actual length when it is not [`SAMPLE_LEN`].
    pub fn from_slice(txns: &[ApbTransaction], label: Option<Label>) -> Result<Self, usize> {
        let transactions: [ApbTransaction; SAMPLE_LEN] = txns.try_into().map_err(|_| txns.len())?;
        Ok(Self::new(transactions, label))
    }

    pub fn addresses(&self) -> [u32; SAMPLE_LEN] {
        self.transactions.map(|t| t.address)
    }

    pub fn data(&self) -> [u32; SAMPLE_LEN] {
        self.transactions.map(|t| t.data)
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApbError {
    #[error("signal map binds {role} to `{binding}`, which is not in the waveform")]
    MissingSignal { role: &'static str, binding: String },
    #[error("{role} is declared {got} bits wide, expected {expected}")]
    SignalWidth {
        role: &'static str,
        expected: u32,
        got: u32,
    },
    #[error("X/Z on {role} at time {time}")]
    XInPayload { role: &'static str, time: u64 },
    #[error("protocol violation at time {time}: {detail}")]
    ProtocolViolation { time: u64, detail: &'static str },
    #[error("cannot schedule transaction {index} at time {time} with period {period}")]
    UnschedulableTimes {
        index: usize,
        time: u64,
        period: u64,
    },
    #[error(transparent)]
    Vcd(#[from] VcdError),
}

struct Bound {
    role: Role,
    id: String,
}

fn resolve(doc: &VcdDocument, map: &SignalMap, role: Role) -> Result<Option<Bound>, ApbError> {
    let Some(binding) = map.binding(role) else {
        return Ok(None);
    };
    let var = doc
        .var(binding)
        .or_else(|| doc.var_by_reference(binding))
        .ok_or_else(|| ApbError::MissingSignal {
            role: role.name(),
            binding: binding.to_string(),
        })?;
    if var.width != role.width() {
        return Err(ApbError::SignalWidth {
            role: role.name(),
            expected: role.width(),
            got: var.width,
        });
    }
    Ok(Some(Bound {
        role,
        id: var.id_code.clone(),
    }))
}

impl Bound {
    fn bit(&self, doc: &VcdDocument, time: u64) -> Result<Option<bool>, ApbError> {
        let v = doc.signal_value_at(&self.id, time)?;
        Ok(match v[0] {
            FourState::One => Some(true),
            FourState::Zero => Some(false),
            _ => None,
        })
    }

    fn word(&self, doc: &VcdDocument, time: u64) -> Result<u32, ApbError> {
        let v = doc.signal_value_at(&self.id, time)?;
        vcd::to_u64(&v)
            .map(|w| w as u32)
            .ok_or(ApbError::XInPayload {
                role: self.role.name(),
                time,
            })
    }
}

/// Recovers one transaction per completed access phase.
///
/// Address and direction come from the last setup-phase sample
/// (PSEL=1, PENABLE=0) before the PENABLE rising edge. Write data is PWDATA
/// at the edge; read data is PRDATA at completion. With PREADY mapped, the
/// transfer completes at the first time PREADY is high at or after the edge.
/// Control signals that are X/Z are treated as inactive.
pub fn extract_transactions(
    doc: &VcdDocument,
    map: &SignalMap,
) -> Result<Vec<ApbTransaction>, ApbError> {
    let need = |role| resolve(doc, map, role).map(|b| b.expect("required roles are always bound"));
    let psel = need(Role::Psel)?;
    let penable = need(Role::Penable)?;
    let pwrite = need(Role::Pwrite)?;
    let paddr = need(Role::Paddr)?;
    let pwdata = need(Role::Pwdata)?;
    let prdata = need(Role::Prdata)?;
    let pready = resolve(doc, map, Role::Pready)?;

    let mut times = BTreeSet::new();
    for b in [&psel, &penable, &pwrite, &paddr, &pwdata, &prdata]
        .into_iter()
        .chain(pready.as_ref())
    {
        times.extend(doc.change_times(&b.id)?);
    }

    struct Pending {
        address: u32,
        is_write: bool,
        data: Option<u32>,
    }

    let mut out = Vec::new();
    let mut setup: Option<(u32, bool)> = None;
    let mut pending: Option<Pending> = None;
    let mut prev_enable = false;

    for &t in &times {
        let sel = psel.bit(doc, t)?.unwrap_or(false);
        let en = penable.bit(doc, t)?.unwrap_or(false);
        if en && !sel {
            return Err(ApbError::ProtocolViolation {
                time: t,
                detail: "PENABLE high while PSEL low",
            });
        }

        if sel && !en {
            if pending.is_some() {
                return Err(ApbError::ProtocolViolation {
                    time: t,
                    detail: "PENABLE dropped before PREADY completed the transfer",
                });
            }
            let is_write = pwrite.bit(doc, t)?.ok_or(ApbError::XInPayload {
                role: Role::Pwrite.name(),
                time: t,
            })?;
            setup = Some((paddr.word(doc, t)?, is_write));
        } else if sel && en && !prev_enable {
            let (address, is_write) = setup.take().ok_or(ApbError::ProtocolViolation {
                time: t,
                detail: "access phase without a preceding setup phase",
            })?;
            let data = if is_write {
                Some(pwdata.word(doc, t)?)
            } else {
                None
            };
            pending = Some(Pending {
                address,
                is_write,
                data,
            });
        } else if !sel {
            if pending.is_some() {
                return Err(ApbError::ProtocolViolation {
                    time: t,
                    detail: "PSEL dropped before PREADY completed the transfer",
                });
            }
            setup = None;
        }

        if sel && en {
            let ready = match &pready {
                Some(b) => b.bit(doc, t)?.unwrap_or(false),
                None => true,
            };
            if ready {
                if let Some(p) = pending.take() {
                    let data = match p.data {
                        Some(d) => d,
                        None => prdata.word(doc, t)?,
                    };
                    out.push(ApbTransaction {
                        address: p.address,
                        data,
                        is_write: p.is_write,
                        time: t,
                    });
                }
            }
        }
        prev_enable = en;
    }
    Ok(out)
}

/// Warning carried by [`group_samples`] when the input length is not a
/// multiple of [`SAMPLE_LEN`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{remaining} trailing transactions do not fill a {SAMPLE_LEN}-transaction window")]
pub struct ShortTail {
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Windows {
    pub samples: Vec<Sample>,
    pub short_tail: Option<ShortTail>,
}

/// Splits a transfer list into consecutive, non-overlapping windows.
pub fn group_samples(txns: &[ApbTransaction]) -> Windows {
    let chunks = txns.chunks_exact(SAMPLE_LEN);
    let remaining = chunks.remainder().len();
    let samples = chunks
        .map(|c| Sample::from_slice(c, None).expect("chunks_exact yields full windows"))
        .collect();
    Windows {
        samples,
        short_tail: (remaining > 0).then_some(ShortTail { remaining }),
    }
}

/// Id codes used by [`synth_waveform`], in [`Role`] order.
const SYNTH_IDS: [&str; 7] = ["!", "\"", "#", "$", "%", "&", "'"];

/// Builds a zero-wait-state APB waveform for `txns`.
///
/// Each transfer occupies a setup phase at `time - period` and an access
/// phase at `time`. Transfers closer than `2 * period` apart cannot be
/// scheduled. When `map` binds PREADY it is driven high throughout.
pub fn synth_waveform(
    txns: &[ApbTransaction],
    map: &SignalMap,
    period: u64,
) -> Result<VcdDocument, ApbError> {
    if period == 0 {
        return Err(ApbError::UnschedulableTimes {
            index: 0,
            time: 0,
            period,
        });
    }
    for (i, t) in txns.iter().enumerate() {
        let min = match i {
            0 => period,
            _ => txns[i - 1].time + 2 * period,
        };
        if t.time < min {
            return Err(ApbError::UnschedulableTimes {
                index: i,
                time: t.time,
                period,
            });
        }
    }

    let mut roles = vec![
        Role::Psel,
        Role::Penable,
        Role::Pwrite,
        Role::Paddr,
        Role::Pwdata,
        Role::Prdata,
    ];
    if map.pready.is_some() {
        roles.push(Role::Pready);
    }
    let vars: Vec<VarDecl> = roles
        .iter()
        .zip(SYNTH_IDS)
        .map(|(&r, id)| VarDecl::new(id, r.width(), map.binding(r).unwrap(), "wire"))
        .collect();
    let mut doc = VcdDocument::new(Timescale::default(), vars)?;

    // [psel, penable, pwrite, paddr, pwdata, prdata, pready]
    let mut state = [0u64, 0, 0, 0, 0, 0, 1];
    let mut emitted: Option<[u64; 7]> = None;
    let mut flush = |doc: &mut VcdDocument, time: u64, state: &[u64; 7]| -> Result<(), VcdError> {
        for (i, &role) in roles.iter().enumerate() {
            if emitted.is_none_or(|e| e[i] != state[i]) {
                doc.push_change(time, SYNTH_IDS[i], vcd::from_u64(state[i], role.width()))?;
            }
        }
        emitted = Some(*state);
        Ok(())
    };

    // Idle from time 0 unless the first setup starts there.
    if txns.first().is_none_or(|t| t.time > period) {
        flush(&mut doc, 0, &state)?;
    }
    for (i, t) in txns.iter().enumerate() {
        let setup = t.time - period;
        let back_to_back = i > 0 && setup == txns[i - 1].time + period;
        if i > 0 && !back_to_back {
            // return to idle after the previous access
            state[0] = 0;
            state[1] = 0;
            flush(&mut doc, txns[i - 1].time + period, &state)?;
        }
        state[0] = 1;
        state[1] = 0;
        state[2] = t.is_write as u64;
        state[3] = t.address as u64;
        if t.is_write {
            state[4] = t.data as u64;
        }
        flush(&mut doc, setup, &state)?;

        state[1] = 1;
        if !t.is_write {
            state[5] = t.data as u64;
        }
        flush(&mut doc, t.time, &state)?;
    }
    if let Some(last) = txns.last() {
        state[0] = 0;
        state[1] = 0;
        flush(&mut doc, last.time + period, &state)?;
    }
    Ok(doc)
}

/// Assigns canonical access times `(2k + 1) * period`, the tightest
/// back-to-back schedule [`synth_waveform`] accepts.
pub fn canonical_times(txns: &mut [ApbTransaction], period: u64) {
    for (k, t) in txns.iter_mut().enumerate() {
        t.time = (2 * k as u64 + 1) * period;
    }
}
