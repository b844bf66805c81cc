//! Per-token sufficient statistics and the `mint-trace` line format.
//!
//! A trace file is JSON Lines. The first line is a header
//! `{"format":"mint-trace","task":"mia","version":1}`, every following line is
//! one [`DocumentTrace`]. Output is canonical: object keys are emitted in
//! lexicographic order and floats use the shortest representation that
//! round-trips, so `write(read(f))` reproduces a canonical `f` byte for byte.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "mint-trace";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mia,
    Mgtd,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mia => "mia",
            Task::Mgtd => "mgtd",
        }
    }

    /// The (H1, H0) label pair of the task.
    pub fn labels(self) -> (Label, Label) {
        match self {
            Task::Mia => (Label::Member, Label::Nonmember),
            Task::Mgtd => (Label::Machine, Label::Human),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mia" => Ok(Task::Mia),
            "mgtd" => Ok(Task::Mgtd),
            _ => Err(Error::config(format!(
                "unknown task `{s}` (expected mia or mgtd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Member,
    Nonmember,
    Human,
    Machine,
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Member => "member",
            Label::Nonmember => "nonmember",
            Label::Human => "human",
            Label::Machine => "machine",
            Label::Unlabeled => "unlabeled",
        }
    }

    /// `Some(true)` for H1 (member / machine), `Some(false)` for H0.
    pub fn is_positive(self) -> Option<bool> {
        match self {
            Label::Member | Label::Machine => Some(true),
            Label::Nonmember | Label::Human => Some(false),
            Label::Unlabeled => None,
        }
    }

    pub fn task(self) -> Option<Task> {
        match self {
            Label::Member | Label::Nonmember => Some(Task::Mia),
            Label::Human | Label::Machine => Some(Task::Mgtd),
            Label::Unlabeled => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Label::Member,
            Label::Nonmember,
            Label::Human,
            Label::Machine,
            Label::Unlabeled,
        ]
        .into_iter()
        .find(|l| l.as_str() == s)
        .ok_or_else(|| Error::data(format!("unknown label `{s}`")))
    }
}

/// Statistics of one position under the target model. All logs are natural.
///
/// Fields are declared in lexicographic order; serialization relies on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenObservation {
    /// Cross-entropy of the reference model against the target distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    /// Log-probability with the task-defined context prepended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_logp: Option<f64>,
    /// Log of the smoothed unigram corpus frequency of the token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_logp: Option<f64>,
    pub logp: f64,
    /// Expected log-probability under the position's distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// 1-based rank of the observed token.
    pub rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_logp: Option<f64>,
    /// Standard deviation of the log-probability under the position's distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub token_id: u32,
}

impl TokenObservation {
    /// An observation carrying only the mandatory fields.
    pub fn new(token_id: u32, logp: f64, rank: u32) -> Self {
        TokenObservation {
            ce: None,
            cond_logp: None,
            freq_logp: None,
            logp,
            mu: None,
            rank,
            ref_logp: None,
            sigma: None,
            token_id,
        }
    }

    pub fn get(&self, field: Field) -> Option<f64> {
        match field {
            Field::Mu => self.mu,
            Field::Sigma => self.sigma,
            Field::RefLogp => self.ref_logp,
            Field::Ce => self.ce,
            Field::FreqLogp => self.freq_logp,
            Field::CondLogp => self.cond_logp,
            Field::TextB64 | Field::Perturbations | Field::Samples => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentTrace {
    pub doc_id: String,
    pub domain: String,
    pub label: Label,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbations: Vec<Vec<TokenObservation>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<Vec<f64>>,
    #[serde(
        rename = "text_b64",
        default,
        skip_serializing_if = "Option::is_none",
        with = "b64"
    )]
    pub text_bytes: Option<Vec<u8>>,
    pub tokens: Vec<TokenObservation>,
}

impl DocumentTrace {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn logps(&self) -> impl Iterator<Item = f64> + '_ {
        self.tokens.iter().map(|t| t.logp)
    }
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => s.serialize_str(&STANDARD.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let encoded = String::deserialize(d)?;
        STANDARD
            .decode(encoded.as_bytes())
            .map(Some)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub task: Task,
    pub traces: Vec<DocumentTrace>,
    pub metadata: BTreeMap<String, String>,
}

impl TraceSet {
    pub fn new(task: Task) -> Self {
        TraceSet {
            task,
            traces: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Optional trace content a method may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Mu,
    Sigma,
    RefLogp,
    Ce,
    FreqLogp,
    CondLogp,
    TextB64,
    Perturbations,
    Samples,
}

impl Field {
    pub const ALL: [Field; 9] = [
        Field::Mu,
        Field::Sigma,
        Field::RefLogp,
        Field::Ce,
        Field::FreqLogp,
        Field::CondLogp,
        Field::TextB64,
        Field::Perturbations,
        Field::Samples,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Mu => "mu",
            Field::Sigma => "sigma",
            Field::RefLogp => "ref_logp",
            Field::Ce => "ce",
            Field::FreqLogp => "freq_logp",
            Field::CondLogp => "cond_logp",
            Field::TextB64 => "text_b64",
            Field::Perturbations => "perturbations",
            Field::Samples => "samples",
        }
    }

    fn is_token_level(self) -> bool {
        !matches!(self, Field::TextB64 | Field::Perturbations | Field::Samples)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown trace field `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Document,
    Token(usize),
    Perturbation { trace: usize, token: usize },
    Sample { sample: usize, position: usize },
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Document => f.write_str("doc"),
            Location::Token(i) => write!(f, "token{i}"),
            Location::Perturbation { trace, token } => {
                write!(f, "perturbation{trace}.token{token}")
            }
            Location::Sample { sample, position } => write!(f, "sample{sample}.pos{position}"),
        }
    }
}

/// A broken invariant or a missing field. `Display` gives the short tag form,
/// e.g. `missing:ce@token0` or `invariant:sigma≥0`.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Missing {
        field: Field,
        location: Location,
    },
    Invariant {
        rule: &'static str,
        location: Location,
    },
}

impl Violation {
    pub fn location(&self) -> Location {
        match self {
            Violation::Missing { location, .. } | Violation::Invariant { location, .. } => {
                *location
            }
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Missing { field, location } => write!(f, "missing:{field}@{location}"),
            Violation::Invariant { rule, .. } => write!(f, "invariant:{rule}"),
        }
    }
}

fn check_token(tok: &TokenObservation, location: Location, out: &mut Vec<Violation>) {
    let mut bad = |rule| out.push(Violation::Invariant { rule, location });
    if !(tok.logp.is_finite() && tok.logp <= 0.0) {
        bad("logp≤0");
    }
    if tok.rank < 1 {
        bad("rank≥1");
    }
    if let Some(mu) = tok.mu {
        if !(mu.is_finite() && mu <= 0.0) {
            bad("mu≤0");
        }
    }
    if let Some(sigma) = tok.sigma {
        if !(sigma.is_finite() && sigma >= 0.0) {
            bad("sigma≥0");
        }
    }
    if let Some(v) = tok.ref_logp {
        if !(v.is_finite() && v <= 0.0) {
            bad("ref_logp≤0");
        }
    }
    if let Some(v) = tok.ce {
        if !(v.is_finite() && v >= 0.0) {
            bad("ce≥0");
        }
    }
    if let Some(v) = tok.freq_logp {
        if !(v.is_finite() && v < 0.0) {
            bad("freq_logp<0");
        }
    }
    if let Some(v) = tok.cond_logp {
        if !(v.is_finite() && v <= 0.0) {
            bad("cond_logp≤0");
        }
    }
}

/// Lists every broken invariant and every field of `required` that is absent.
/// Token-level fields must be present on every token of the main trace; only
/// the first gap per field is reported.
pub fn validate_trace(t: &DocumentTrace, required: &[Field]) -> Vec<Violation> {
    let mut out = Vec::new();
    if t.tokens.is_empty() {
        out.push(Violation::Invariant {
            rule: "tokens non-empty",
            location: Location::Document,
        });
    }
    for (i, tok) in t.tokens.iter().enumerate() {
        check_token(tok, Location::Token(i), &mut out);
    }
    for (j, pert) in t.perturbations.iter().enumerate() {
        if pert.is_empty() {
            out.push(Violation::Invariant {
                rule: "perturbation non-empty",
                location: Location::Perturbation { trace: j, token: 0 },
            });
        }
        for (i, tok) in pert.iter().enumerate() {
            check_token(tok, Location::Perturbation { trace: j, token: i }, &mut out);
        }
    }
    for (j, sample) in t.samples.iter().enumerate() {
        if sample.len() != t.tokens.len() {
            out.push(Violation::Invariant {
                rule: "sample length = n",
                location: Location::Sample {
                    sample: j,
                    position: 0,
                },
            });
        }
        if let Some(pos) = sample.iter().position(|v| !(v.is_finite() && *v <= 0.0)) {
            out.push(Violation::Invariant {
                rule: "sample logp≤0",
                location: Location::Sample {
                    sample: j,
                    position: pos,
                },
            });
        }
    }
    for &field in required {
        let missing_at = match field {
            Field::TextB64 => t.text_bytes.is_none().then_some(Location::Document),
            Field::Perturbations => t.perturbations.is_empty().then_some(Location::Document),
            Field::Samples => t.samples.is_empty().then_some(Location::Document),
            f => {
                debug_assert!(f.is_token_level());
                t.tokens
                    .iter()
                    .position(|tok| tok.get(f).is_none())
                    .map(Location::Token)
            }
        };
        if let Some(location) = missing_at {
            out.push(Violation::Missing { field, location });
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
    task: Task,
    version: u32,
}

/// Streams documents out of a trace file, one line at a time.
///
/// Each document is validated against the invariants as it is read; the
/// first failure is reported with its 1-based line number.
pub struct TraceReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    task: Task,
    metadata: BTreeMap<String, String>,
    seen: HashSet<String>,
    check_invariants: bool,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(source: R) -> Result<Self> {
        let mut lines = source.lines();
        let first = match lines.next() {
            Some(line) => line.map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header line".into(),
                })
            }
        };
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != FORMAT_NAME {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected format `{}`", header.format),
            });
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported version {}", header.version),
            });
        }
        Ok(TraceReader {
            lines,
            line_no: 1,
            task: header.task,
            metadata: header.metadata,
            seen: HashSet::new(),
            check_invariants: true,
        })
    }

    /// Stops rejecting documents that break token invariants, so a caller
    /// can collect every violation with [`validate_trace`].
    pub fn skip_invariant_checks(mut self) -> Self {
        self.check_invariants = false;
        self
    }

    /// 1-based line number of the most recently read line.
    pub fn line_no(&self) -> usize {
        self.line_no
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    fn parse_line(&mut self, text: &str) -> Result<DocumentTrace> {
        let line = self.line_no;
        let doc: DocumentTrace = serde_json::from_str(text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if let Some(v) = validate_trace(&doc, &[])
            .first()
            .filter(|_| self.check_invariants)
        {
            return Err(Error::Parse {
                line,
                message: format!("invariant violation {v} at {}", v.location()),
            });
        }
        if let Some(task) = doc.label.task() {
            if task != self.task {
                return Err(Error::Parse {
                    line,
                    message: format!("label {} does not belong to task {}", doc.label, self.task),
                });
            }
        }
        if !self.seen.insert(doc.doc_id.clone()) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate doc_id `{}`", doc.doc_id),
            });
        }
        Ok(doc)
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<DocumentTrace>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let text = match line {
                Ok(t) => t,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line: self.line_no,
                        message: e.to_string(),
                    }))
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            return Some(self.parse_line(&text));
        }
    }
}

pub fn read_traces<R: BufRead>(source: R) -> Result<TraceSet> {
    let mut reader = TraceReader::new(source)?;
    let mut traces = Vec::new();
    for doc in reader.by_ref() {
        traces.push(doc?);
    }
    Ok(TraceSet {
        task: reader.task,
        traces,
        metadata: reader.metadata,
    })
}

/// Writes the header eagerly, then one canonical line per document.
pub struct TraceWriter<W: Write> {
    sink: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut sink: W, task: Task, metadata: &BTreeMap<String, String>) -> Result<Self> {
        let header = Header {
            format: FORMAT_NAME.to_string(),
            metadata: metadata.clone(),
            task,
            version: FORMAT_VERSION,
        };
        write_json_line(&mut sink, &header)?;
        Ok(TraceWriter { sink })
    }

    pub fn write(&mut self, doc: &DocumentTrace) -> Result<()> {
        write_json_line(&mut self.sink, doc)
    }

    pub fn finish(mut self) -> Result<W> {
        self.sink
            .flush()
            .map_err(|e| Error::io("flushing trace output", e))?;
        Ok(self.sink)
    }
}

pub(crate) fn write_json_line<W: Write, T: Serialize>(sink: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *sink, value).map_err(|e| match e.io_error_kind() {
        Some(kind) => Error::io("writing output", std::io::Error::from(kind)),
        None => Error::data(format!("serialization failed: {e}")),
    })?;
    sink.write_all(b"\n")
        .map_err(|e| Error::io("writing output", e))
}

pub fn write_traces<W: Write>(ts: &TraceSet, sink: W) -> Result<()> {
    let mut writer = TraceWriter::new(sink, ts.task, &ts.metadata)?;
    for doc in &ts.traces {
        writer.write(doc)?;
    }
    writer.finish()?;
    Ok(())
}
