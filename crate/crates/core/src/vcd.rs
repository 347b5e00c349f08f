// SPDX-License-Identifier: Apache-2.0

//! Value Change Dump reader/writer for the subset of IEEE-1364 that bus
//! traces need: `$timescale`, `$scope`/`$upscope`, `$var`,
//! `$enddefinitions`, `$dumpvars` blocks, scalar and binary-vector changes.
//!
//! Scopes are flattened into dotted hierarchical references
//! (`tb.dut.PADDR`). Every signal reads as all-X until its first change.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FourState {
    Zero,
    One,
    X,
    Z,
}

impl FourState {
    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '0' => Some(FourState::Zero),
            '1' => Some(FourState::One),
            'x' | 'X' => Some(FourState::X),
            'z' | 'Z' => Some(FourState::Z),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            FourState::Zero => '0',
            FourState::One => '1',
            FourState::X => 'x',
            FourState::Z => 'z',
        }
    }

    pub fn is_known(self) -> bool {
        matches!(self, FourState::Zero | FourState::One)
    }
}

/// Converts an MSB-first vector to an integer, `None` if any bit is X/Z or
/// the vector is wider than 64 bits.
pub fn to_u64(bits: &[FourState]) -> Option<u64> {
    if bits.len() > 64 {
        return None;
    }
    bits.iter().try_fold(0u64, |acc, b| match b {
        FourState::Zero => Some(acc << 1),
        FourState::One => Some((acc << 1) | 1),
        _ => None,
    })
}

/// MSB-first vector of `width` bits holding the low bits of `value`.
pub fn from_u64(value: u64, width: u32) -> Vec<FourState> {
    (0..width)
        .rev()
        .map(|b| {
            if b < 64 && (value >> b) & 1 == 1 {
                FourState::One
            } else {
                FourState::Zero
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarDecl {
    pub id_code: String,
    pub width: u32,
    /// Dotted hierarchical name, scopes included.
    pub reference: String,
    pub var_kind: String,
}

impl VarDecl {
    pub fn new(id_code: &str, width: u32, reference: &str, var_kind: &str) -> Self {
        Self {
            id_code: id_code.to_string(),
            width,
            reference: reference.to_string(),
            var_kind: var_kind.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueChange {
    pub time: u64,
    pub id_code: String,
    /// MSB-first, exactly the declared width.
    pub value: Vec<FourState>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timescale {
    pub magnitude: u32,
    pub unit: String,
}

impl Default for Timescale {
    fn default() -> Self {
        Self {
            magnitude: 1,
            unit: "ns".to_string(),
        }
    }
}

impl fmt::Display for Timescale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.magnitude, self.unit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VcdError {
    #[error("value change references undeclared id code `{id}`")]
    UnknownIdCode { id: String },
    #[error("value for `{id}` has {got} bits but the variable is declared with {declared}")]
    WidthMismatch {
        id: String,
        declared: u32,
        got: usize,
    },
    #[error("line {line}: {detail}")]
    MalformedDirective { line: usize, detail: String },
    #[error("timestamp {found} follows later timestamp {previous}")]
    NonMonotonicTime { previous: u64, found: u64 },
}

fn malformed(line: usize, detail: impl Into<String>) -> VcdError {
    VcdError::MalformedDirective {
        line,
        detail: detail.into(),
    }
}

/// A parsed or constructed waveform. Immutable once built; changes are kept
/// in global time order with a per-variable index for queries.
#[derive(Debug, Clone, Default)]
pub struct VcdDocument {
    timescale: Timescale,
    vars: Vec<VarDecl>,
    changes: Vec<ValueChange>,
    by_id: HashMap<String, usize>,
    // positions into `changes`, per var
    per_var: Vec<Vec<usize>>,
}

impl PartialEq for VcdDocument {
    fn eq(&self, other: &Self) -> bool {
        self.timescale == other.timescale
            && self.vars == other.vars
            && self.changes == other.changes
    }
}

impl Eq for VcdDocument {}

impl VcdDocument {
    pub fn new(timescale: Timescale, vars: Vec<VarDecl>) -> Result<Self, VcdError> {
        let mut by_id = HashMap::with_capacity(vars.len());
        for (i, v) in vars.iter().enumerate() {
            if v.width == 0 {
                return Err(malformed(
                    0,
                    format!("variable `{}` has zero width", v.reference),
                ));
            }
            if v.id_code.is_empty() || !v.id_code.chars().all(|c| c.is_ascii_graphic()) {
                return Err(malformed(0, format!("invalid id code `{}`", v.id_code)));
            }
            if by_id.insert(v.id_code.clone(), i).is_some() {
                return Err(malformed(0, format!("duplicate id code `{}`", v.id_code)));
            }
        }
        let per_var = vec![Vec::new(); vars.len()];
        Ok(Self {
            timescale,
            vars,
            changes: Vec::new(),
            by_id,
            per_var,
        })
    }

    /// Appends a change. Shorter vectors are left-extended; times must not
    /// decrease.
    pub fn push_change(
        &mut self,
        time: u64,
        id_code: &str,
        value: Vec<FourState>,
    ) -> Result<(), VcdError> {
        let idx = self.var_index(id_code)?;
        let width = self.vars[idx].width;
        let value = extend_to_width(value, width).map_err(|got| VcdError::WidthMismatch {
            id: id_code.to_string(),
            declared: width,
            got,
        })?;
        if let Some(last) = self.changes.last() {
            if time < last.time {
                return Err(VcdError::NonMonotonicTime {
                    previous: last.time,
                    found: time,
                });
            }
        }
        self.per_var[idx].push(self.changes.len());
        self.changes.push(ValueChange {
            time,
            id_code: id_code.to_string(),
            value,
        });
        Ok(())
    }

    pub fn timescale(&self) -> &Timescale {
        &self.timescale
    }

    pub fn vars(&self) -> &[VarDecl] {
        &self.vars
    }

    pub fn changes(&self) -> &[ValueChange] {
        &self.changes
    }

    pub fn var(&self, id_code: &str) -> Option<&VarDecl> {
        self.by_id.get(id_code).map(|&i| &self.vars[i])
    }

    /// Looks a variable up by hierarchical reference.
    pub fn var_by_reference(&self, reference: &str) -> Option<&VarDecl> {
        self.vars.iter().find(|v| v.reference == reference)
    }

    fn var_index(&self, id_code: &str) -> Result<usize, VcdError> {
        self.by_id
            .get(id_code)
            .copied()
            .ok_or_else(|| VcdError::UnknownIdCode {
                id: id_code.to_string(),
            })
    }

    /// Value of the latest change at or before `time`; all-X before the
    /// first change.
    pub fn signal_value_at(&self, id_code: &str, time: u64) -> Result<Vec<FourState>, VcdError> {
        let idx = self.var_index(id_code)?;
        let positions = &self.per_var[idx];
        let n = positions.partition_point(|&p| self.changes[p].time <= time);
        Ok(match n {
            0 => vec![FourState::X; self.vars[idx].width as usize],
            n => self.changes[positions[n - 1]].value.clone(),
        })
    }

    /// Times at which `id_code` changes, in order (may repeat).
    pub fn change_times(&self, id_code: &str) -> Result<Vec<u64>, VcdError> {
        let idx = self.var_index(id_code)?;
        Ok(self.per_var[idx]
            .iter()
            .map(|&p| self.changes[p].time)
            .collect())
    }
}

/// Left-extends `value` to `width` per IEEE 1364: a leading 0/1 pads with 0,
/// a leading X or Z pads with itself. Returns the offending length when the
/// value is wider than declared.
fn extend_to_width(mut value: Vec<FourState>, width: u32) -> Result<Vec<FourState>, usize> {
    let width = width as usize;
    if value.len() > width {
        return Err(value.len());
    }
    if value.len() == width {
        return Ok(value);
    }
    let pad = match value.first() {
        None | Some(FourState::Zero) | Some(FourState::One) => FourState::Zero,
        Some(&s) => s,
    };
    let mut out = vec![pad; width - value.len()];
    out.append(&mut value);
    Ok(out)
}

struct Tokens<'a> {
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let iter: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .flat_map(|(n, l)| l.split_whitespace().map(move |t| (n + 1, t))),
        );
        Self {
            inner: iter.peekable(),
            line: 1,
        }
    }

    fn next(&mut self) -> Option<&'a str> {
        let (line, tok) = self.inner.next()?;
        self.line = line;
        Some(tok)
    }

    /// Collects tokens up to the closing `$end` of `directive`.
    fn until_end(&mut self, directive: &str) -> Result<Vec<&'a str>, VcdError> {
        let start = self.line;
        let mut out = Vec::new();
        loop {
            match self.next() {
                Some("$end") => return Ok(out),
                Some(t) => out.push(t),
                None => return Err(malformed(start, format!("unterminated {directive}"))),
            }
        }
    }
}

fn parse_timescale(tokens: &[&str], line: usize) -> Result<Timescale, VcdError> {
    let joined: String = tokens.concat();
    let split = joined
        .find(|c: char| !c.is_ascii_digit())
        .ok_or_else(|| malformed(line, "timescale without a unit"))?;
    let (mag, unit) = joined.split_at(split);
    let magnitude: u32 = mag
        .parse()
        .map_err(|_| malformed(line, format!("bad timescale magnitude `{joined}`")))?;
    if !matches!(magnitude, 1 | 10 | 100) {
        return Err(malformed(
            line,
            format!("timescale magnitude {magnitude} is not 1, 10 or 100"),
        ));
    }
    if !matches!(unit, "s" | "ms" | "us" | "ns" | "ps" | "fs") {
        return Err(malformed(line, format!("unknown timescale unit `{unit}`")));
    }
    Ok(Timescale {
        magnitude,
        unit: unit.to_string(),
    })
}

fn parse_bits(text: &str, line: usize) -> Result<Vec<FourState>, VcdError> {
    if text.is_empty() {
        return Err(malformed(line, "empty vector value"));
    }
    text.chars()
        .map(|c| FourState::from_char(c).ok_or_else(|| malformed(line, format!("bad bit `{c}`"))))
        .collect()
}

/// Parses VCD text into a document.
pub fn parse_vcd(text: &str) -> Result<VcdDocument, VcdError> {
    let mut toks = Tokens::new(text);
    let mut timescale = Timescale::default();
    let mut scopes: Vec<String> = Vec::new();
    let mut vars: Vec<VarDecl> = Vec::new();
    let mut saw_end = false;

    while let Some(tok) = toks.next() {
        let line = toks.line;
        match tok {
            "$timescale" => {
                let body = toks.until_end("$timescale")?;
                timescale = parse_timescale(&body, line)?;
            }
            "$scope" => {
                let body = toks.until_end("$scope")?;
                match body.as_slice() {
                    [_kind, name] => scopes.push((*name).to_string()),
                    _ => return Err(malformed(line, "expected `$scope <kind> <name> $end`")),
                }
            }
            "$upscope" => {
                toks.until_end("$upscope")?;
                if scopes.pop().is_none() {
                    return Err(malformed(line, "$upscope without an open scope"));
                }
            }
            "$var" => {
                let body = toks.until_end("$var")?;
                // kind width id name [range]
                if body.len() < 4 || body.len() > 5 {
                    return Err(malformed(
                        line,
                        "expected `$var <kind> <width> <id> <name> [range] $end`",
                    ));
                }
                let width: u32 = body[1]
                    .parse()
                    .ok()
                    .filter(|&w| w > 0)
                    .ok_or_else(|| malformed(line, format!("bad width `{}`", body[1])))?;
                let mut reference = scopes.join(".");
                if !reference.is_empty() {
                    reference.push('.');
                }
                reference.push_str(body[3]);
                vars.push(VarDecl::new(body[2], width, &reference, body[0]));
            }
            "$enddefinitions" => {
                toks.until_end("$enddefinitions")?;
                saw_end = true;
                break;
            }
            "$date" | "$version" | "$comment" => {
                toks.until_end(tok)?;
            }
            other => {
                return Err(malformed(line, format!("unexpected `{other}` in header")));
            }
        }
    }
    if !saw_end {
        return Err(malformed(toks.line, "missing $enddefinitions"));
    }
    let mut doc = VcdDocument::new(timescale, vars).map_err(|e| match e {
        VcdError::MalformedDirective { detail, .. } => malformed(toks.line, detail),
        e => e,
    })?;

    let mut now: Option<u64> = None;
    while let Some(tok) = toks.next() {
        let line = toks.line;
        match tok {
            "$dumpvars" | "$end" => {}
            "$comment" => {
                toks.until_end("$comment")?;
            }
            t if t.starts_with('#') => {
                let time: u64 = t[1..]
                    .parse()
                    .map_err(|_| malformed(line, format!("bad timestamp `{t}`")))?;
                if let Some(prev) = now {
                    if time < prev {
                        return Err(VcdError::NonMonotonicTime {
                            previous: prev,
                            found: time,
                        });
                    }
                }
                now = Some(time);
            }
            t if t.starts_with(['b', 'B']) => {
                let bits = parse_bits(&t[1..], line)?;
                let id = toks
                    .next()
                    .ok_or_else(|| malformed(line, "vector change without an id code"))?;
                let time =
                    now.ok_or_else(|| malformed(line, "value change before the first timestamp"))?;
                doc.push_change(time, id, bits)?;
            }
            t if t.starts_with(['r', 'R']) => {
                return Err(malformed(line, "real value changes are not supported"));
            }
            t if t.starts_with('$') => {
                return Err(malformed(line, format!("unsupported directive `{t}`")));
            }
            t => {
                let mut chars = t.chars();
                let state = chars
                    .next()
                    .and_then(FourState::from_char)
                    .ok_or_else(|| malformed(line, format!("unrecognized token `{t}`")))?;
                let id = chars.as_str();
                if id.is_empty() {
                    return Err(malformed(
                        line,
                        format!("scalar change `{t}` without an id code"),
                    ));
                }
                let time =
                    now.ok_or_else(|| malformed(line, "value change before the first timestamp"))?;
                doc.push_change(time, id, vec![state])?;
            }
        }
    }
    Ok(doc)
}

fn scope_path(reference: &str) -> (Vec<&str>, &str) {
    let mut parts: Vec<&str> = reference.split('.').collect();
    let name = parts.pop().unwrap_or(reference);
    (parts, name)
}

/// Renders a document as VCD text. Vectors are always written at full
/// declared width, so the output re-parses to an equal document.
pub fn emit_vcd(doc: &VcdDocument) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "$timescale {} $end", doc.timescale);
    let mut open: Vec<&str> = Vec::new();
    for v in &doc.vars {
        let (path, name) = scope_path(&v.reference);
        let common = open.iter().zip(&path).take_while(|(a, b)| a == b).count();
        while open.len() > common {
            open.pop();
            out.push_str("$upscope $end\n");
        }
        for s in &path[common..] {
            let _ = writeln!(out, "$scope module {s} $end");
            open.push(s);
        }
        let _ = writeln!(
            out,
            "$var {} {} {} {} $end",
            v.var_kind, v.width, v.id_code, name
        );
    }
    for _ in open {
        out.push_str("$upscope $end\n");
    }
    out.push_str("$enddefinitions $end\n");

    let mut current: Option<u64> = None;
    for c in &doc.changes {
        if current != Some(c.time) {
            let _ = writeln!(out, "#{}", c.time);
            current = Some(c.time);
        }
        let bits: String = c.value.iter().map(|b| b.as_char()).collect();
        if c.value.len() == 1 {
            let _ = writeln!(out, "{bits}{}", c.id_code);
        } else {
            let _ = writeln!(out, "b{bits} {}", c.id_code);
        }
    }
    out
}
