//! Arousal signal sources: trace replay, deterministic synthesis and
//! time-ordered merging of several sources into one stream.
//!
//! Timestamps are session-relative integer milliseconds. Every source keeps
//! strictly increasing timestamps; values outside a source's valid range are
//! rejected rather than clamped.
//!
//! Synthetic noise is drawn from ChaCha8 (`rand_chacha`, seeded through
//! `SeedableRng::seed_from_u64`) and shaped with the cosine branch of the
//! Box–Muller transform, one 64-bit draw pair per sample. Both pieces are
//! fully specified algorithms, so a stream can be regenerated bit-for-bit by
//! any implementation that follows them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header line of the trace CSV format.
pub const TRACE_HEADER: &str = "timestamp_ms,source_id,value";

/// Identifier of a signal source (`"hr"`, `"face"`, ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceId(pub String);

impl SourceId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SourceId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    HeartRateBpm,
    FacialArousal,
    FacialValence,
    SelfReportArousal,
    ExternalScalar,
}

impl SourceKind {
    /// Nominal sampling rate used when a descriptor does not set one.
    /// Self-report is event driven; 5 Hz matches the UI slider emission rate.
    pub fn default_rate_hz(self) -> f64 {
        match self {
            SourceKind::HeartRateBpm => 10.0,
            SourceKind::FacialArousal | SourceKind::FacialValence => 30.0,
            SourceKind::SelfReportArousal => 5.0,
            SourceKind::ExternalScalar => 10.0,
        }
    }

    pub fn default_range(self) -> ValidRange {
        match self {
            SourceKind::HeartRateBpm => ValidRange { lo: 30.0, hi: 220.0 },
            SourceKind::FacialArousal | SourceKind::FacialValence => {
                ValidRange { lo: -1.0, hi: 1.0 }
            }
            SourceKind::SelfReportArousal => ValidRange { lo: -1.0, hi: 1.0 },
            SourceKind::ExternalScalar => ValidRange {
                lo: f64::MIN,
                hi: f64::MAX,
            },
        }
    }

    pub fn default_units(self) -> &'static str {
        match self {
            SourceKind::HeartRateBpm => "bpm",
            _ => "",
        }
    }
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ValidRange {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for ValidRange {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<ValidRange> for [f64; 2] {
    fn from(r: ValidRange) -> Self {
        [r.lo, r.hi]
    }
}

impl ValidRange {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDescriptor {
    pub source_id: SourceId,
    pub kind: SourceKind,
    #[serde(default)]
    pub units: String,
    pub expected_rate_hz: f64,
    pub valid_range: ValidRange,
}

impl SourceDescriptor {
    /// Descriptor with the kind's default rate, range and units.
    pub fn with_defaults(source_id: impl Into<String>, kind: SourceKind) -> Self {
        Self {
            source_id: SourceId::new(source_id),
            kind,
            units: kind.default_units().to_owned(),
            expected_rate_hz: kind.default_rate_hz(),
            valid_range: kind.default_range(),
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.source_id.0.is_empty() {
            return Err(SignalError::InvalidDescriptor("empty source_id".into()));
        }
        if !(self.valid_range.lo < self.valid_range.hi) {
            return Err(SignalError::InvalidDescriptor(format!(
                "{}: valid_range lo must be below hi",
                self.source_id
            )));
        }
        if !(self.expected_rate_hz > 0.0) || !self.expected_rate_hz.is_finite() {
            return Err(SignalError::InvalidDescriptor(format!(
                "{}: expected_rate_hz must be positive",
                self.source_id
            )));
        }
        Ok(())
    }
}

/// One timestamped scalar reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    pub source_id: SourceId,
    pub timestamp_ms: u64,
    pub value: f64,
}

impl SignalSample {
    pub fn new(source_id: impl Into<String>, timestamp_ms: u64, value: f64) -> Self {
        Self {
            source_id: SourceId::new(source_id),
            timestamp_ms,
            value,
        }
    }
}

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("source {source_id}: timestamp {timestamp_ms} does not increase past {previous_ms}")]
    NonMonotonicTimestamp {
        source_id: SourceId,
        timestamp_ms: u64,
        previous_ms: u64,
    },
    #[error("source {source_id}: value {value} at {timestamp_ms} ms outside [{lo}, {hi}]")]
    OutOfRange {
        source_id: SourceId,
        timestamp_ms: u64,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{path}:{line}: unknown source {source_id}")]
    UnknownSource {
        path: PathBuf,
        line: u64,
        source_id: SourceId,
    },
    #[error("invalid source descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("invalid synth spec: {0}")]
    InvalidSynth(String),
}

/// Per-source admission check shared by trace replay and live ingestion.
#[derive(Debug, Clone)]
pub struct SampleGate {
    descriptor: SourceDescriptor,
    last_ms: Option<u64>,
}

impl SampleGate {
    pub fn new(descriptor: SourceDescriptor) -> Self {
        Self {
            descriptor,
            last_ms: None,
        }
    }

    pub fn descriptor(&self) -> &SourceDescriptor {
        &self.descriptor
    }

    pub fn admit(&mut self, timestamp_ms: u64, value: f64) -> Result<SignalSample, SignalError> {
        let id = &self.descriptor.source_id;
        if let Some(prev) = self.last_ms {
            if timestamp_ms <= prev {
                return Err(SignalError::NonMonotonicTimestamp {
                    source_id: id.clone(),
                    timestamp_ms,
                    previous_ms: prev,
                });
            }
        }
        let range = self.descriptor.valid_range;
        if !value.is_finite() || !range.contains(value) {
            return Err(SignalError::OutOfRange {
                source_id: id.clone(),
                timestamp_ms,
                value,
                lo: range.lo,
                hi: range.hi,
            });
        }
        self.last_ms = Some(timestamp_ms);
        Ok(SignalSample {
            source_id: id.clone(),
            timestamp_ms,
            value,
        })
    }
}

/// Live ingestion front: routes samples to their source gate and counts
/// rejections.
#[derive(Debug, Clone, Default)]
pub struct Ingestor {
    gates: BTreeMap<SourceId, SampleGate>,
    pub rejected_out_of_range: u64,
    pub rejected_non_monotonic: u64,
    pub rejected_unknown: u64,
}

impl Ingestor {
    pub fn new(descriptors: &[SourceDescriptor]) -> Self {
        Self {
            gates: descriptors
                .iter()
                .map(|d| (d.source_id.clone(), SampleGate::new(d.clone())))
                .collect(),
            ..Self::default()
        }
    }

    pub fn ingest(
        &mut self,
        source_id: &SourceId,
        timestamp_ms: u64,
        value: f64,
    ) -> Result<SignalSample, SignalError> {
        let Some(gate) = self.gates.get_mut(source_id) else {
            self.rejected_unknown += 1;
            return Err(SignalError::InvalidDescriptor(format!(
                "unknown source {source_id}"
            )));
        };
        let res = gate.admit(timestamp_ms, value);
        match &res {
            Err(SignalError::OutOfRange { .. }) => self.rejected_out_of_range += 1,
            Err(SignalError::NonMonotonicTimestamp { .. }) => self.rejected_non_monotonic += 1,
            _ => {}
        }
        res
    }
}

/// Pull stream over one source's rows of a trace file.
///
/// Rows belonging to other sources are skipped; they are validated by the
/// reader opened for their own descriptor.
pub struct TraceReader {
    path: PathBuf,
    records: csv::StringRecordsIntoIter<BufReader<File>>,
    gate: SampleGate,
    known: Option<Vec<SourceId>>,
    done: bool,
}

/// Opens a trace CSV and yields the samples of `descriptor`'s source in file
/// order.
pub fn open_trace(path: &Path, descriptor: &SourceDescriptor) -> Result<TraceReader, SignalError> {
    descriptor.validate()?;
    let file = File::open(path).map_err(|source| SignalError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let header = rdr.headers().map_err(|e| SignalError::Parse {
        path: path.to_owned(),
        line: 1,
        reason: e.to_string(),
    })?;
    let cols: Vec<&str> = header.iter().collect();
    if cols != ["timestamp_ms", "source_id", "value"] {
        return Err(SignalError::Parse {
            path: path.to_owned(),
            line: 1,
            reason: format!("expected header `{TRACE_HEADER}`"),
        });
    }
    Ok(TraceReader {
        path: path.to_owned(),
        records: rdr.into_records(),
        gate: SampleGate::new(descriptor.clone()),
        known: None,
        done: false,
    })
}

impl TraceReader {
    /// Makes rows naming a source outside `known` an error instead of skipping them.
    pub fn strict_sources(mut self, known: Vec<SourceId>) -> Self {
        self.known = Some(known);
        self
    }

    fn parse_error(&self, line: u64, reason: impl Into<String>) -> SignalError {
        SignalError::Parse {
            path: self.path.clone(),
            line,
            reason: reason.into(),
        }
    }
}

impl Iterator for TraceReader {
    type Item = Result<SignalSample, SignalError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let record = match self.records.next()? {
                Ok(r) => r,
                Err(e) => {
                    self.done = true;
                    let line = e.position().map_or(0, |p| p.line());
                    return Some(Err(self.parse_error(line, e.to_string())));
                }
            };
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != 3 {
                self.done = true;
                return Some(Err(self.parse_error(line, "expected 3 fields")));
            }
            let sid = SourceId::new(record[1].trim());
            if sid != self.gate.descriptor().source_id {
                if let Some(known) = &self.known {
                    if !known.contains(&sid) {
                        self.done = true;
                        return Some(Err(SignalError::UnknownSource {
                            path: self.path.clone(),
                            line,
                            source_id: sid,
                        }));
                    }
                }
                continue;
            }
            let ts = match record[0].trim().parse::<u64>() {
                Ok(t) => t,
                Err(e) => {
                    self.done = true;
                    return Some(Err(self.parse_error(line, format!("timestamp_ms: {e}"))));
                }
            };
            let value = match record[2].trim().parse::<f64>() {
                Ok(v) => v,
                Err(e) => {
                    self.done = true;
                    return Some(Err(self.parse_error(line, format!("value: {e}"))));
                }
            };
            let res = self.gate.admit(ts, value);
            if res.is_err() {
                self.done = true;
            }
            return Some(res);
        }
    }
}

/// Writes samples in the trace CSV format (LF endings, shortest round-trip
/// decimal representation).
pub fn write_trace<W: Write>(mut out: W, samples: &[SignalSample]) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for s in samples {
        writeln!(out, "{},{},{:?}", s.timestamp_ms, s.source_id, s.value)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub start_ms: u64,
    pub duration_ms: u64,
    pub delta: f64,
}

impl Burst {
    fn active_at(&self, t: u64) -> bool {
        t >= self.start_ms && t < self.start_ms + self.duration_ms
    }
}

/// Parameters of a synthetic test signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub source_id: SourceId,
    pub baseline: f64,
    #[serde(default)]
    pub noise_sd: f64,
    pub rate_hz: f64,
    pub duration_ms: u64,
    #[serde(default)]
    pub bursts: Vec<Burst>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: &str| Err(SignalError::InvalidSynth(m.to_owned()));
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad("noise_sd must be non-negative");
        }
        // Above 1 kHz, rounding to whole milliseconds would repeat timestamps.
        if !(self.rate_hz > 0.0 && self.rate_hz <= 1000.0) {
            return bad("rate_hz must lie in (0, 1000]");
        }
        if self.duration_ms == 0 {
            return bad("duration_ms must be positive");
        }
        if !self.baseline.is_finite() {
            return bad("baseline must be finite");
        }
        for b in &self.bursts {
            if b.start_ms + b.duration_ms > self.duration_ms {
                return bad("burst extends past duration_ms");
            }
            if !b.delta.is_finite() {
                return bad("burst delta must be finite");
            }
        }
        Ok(())
    }
}

/// Deterministic standard-normal generator: ChaCha8 + Box–Muller (cosine
/// branch only).
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in (0, 1].
    fn open_unit(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_standard(&mut self) -> f64 {
        let u1 = self.open_unit();
        let u2 = self.open_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Pull stream of synthesized samples.
#[derive(Debug, Clone)]
pub struct SynthStream {
    spec: SynthSpec,
    noise: GaussianNoise,
    index: u64,
}

impl Iterator for SynthStream {
    type Item = SignalSample;

    fn next(&mut self) -> Option<SignalSample> {
        let t = (self.index as f64 * 1000.0 / self.spec.rate_hz).round() as u64;
        if t >= self.spec.duration_ms {
            return None;
        }
        self.index += 1;
        let deltas: f64 = self
            .spec
            .bursts
            .iter()
            .filter(|b| b.active_at(t))
            .map(|b| b.delta)
            .sum();
        let noise = self.noise.next_standard() * self.spec.noise_sd;
        Some(SignalSample {
            source_id: self.spec.source_id.clone(),
            timestamp_ms: t,
            value: self.spec.baseline + deltas + noise,
        })
    }
}

/// Synthesizes a test signal: samples at `round(i * 1000 / rate_hz)` ms with
/// value `baseline + active burst deltas + N(0, noise_sd)`.
pub fn synth_trace(spec: &SynthSpec) -> Result<SynthStream, SignalError> {
    spec.validate()?;
    Ok(SynthStream {
        spec: spec.clone(),
        noise: GaussianNoise::new(spec.seed),
        index: 0,
    })
}

struct Head<E> {
    sample: SignalSample,
    stream: usize,
    _marker: std::marker::PhantomData<E>,
}

impl<E> PartialEq for Head<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Head<E> {}

impl<E> PartialOrd for Head<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Head<E> {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest sample.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.sample.timestamp_ms, &other.sample.source_id, other.stream).cmp(&(
            self.sample.timestamp_ms,
            &self.sample.source_id,
            self.stream,
        ))
    }
}

/// K-way merge of individually time-ordered streams. Ties on timestamp go to
/// the lexicographically smaller source id, then to the earlier stream.
pub struct MergedStream<I, E>
where
    I: Iterator<Item = Result<SignalSample, E>>,
{
    streams: Vec<I>,
    heap: BinaryHeap<Head<E>>,
    pending_error: Option<E>,
    primed: bool,
}

pub fn merge_streams<I, E>(streams: Vec<I>) -> MergedStream<I, E>
where
    I: Iterator<Item = Result<SignalSample, E>>,
{
    MergedStream {
        heap: BinaryHeap::with_capacity(streams.len()),
        streams,
        pending_error: None,
        primed: false,
    }
}

impl<I, E> MergedStream<I, E>
where
    I: Iterator<Item = Result<SignalSample, E>>,
{
    fn pull(&mut self, idx: usize) {
        if self.pending_error.is_some() {
            return;
        }
        match self.streams[idx].next() {
            Some(Ok(sample)) => self.heap.push(Head {
                sample,
                stream: idx,
                _marker: std::marker::PhantomData,
            }),
            Some(Err(e)) => self.pending_error = Some(e),
            None => {}
        }
    }
}

impl<I, E> Iterator for MergedStream<I, E>
where
    I: Iterator<Item = Result<SignalSample, E>>,
{
    type Item = Result<SignalSample, E>;

    fn next(&mut self) -> Option<Self::Item> {
        if !self.primed {
            self.primed = true;
            for i in 0..self.streams.len() {
                self.pull(i);
            }
        }
        if let Some(e) = self.pending_error.take() {
            self.heap.clear();
            return Some(Err(e));
        }
        let head = self.heap.pop()?;
        self.pull(head.stream);
        Some(Ok(head.sample))
    }
}

/// Reads every configured source from every trace file and merges them.
/// Rows naming an unconfigured source are an error.
pub fn load_traces(
    paths: &[PathBuf],
    descriptors: &[SourceDescriptor],
) -> Result<Vec<SignalSample>, SignalError> {
    let known: Vec<SourceId> = descriptors.iter().map(|d| d.source_id.clone()).collect();
    let mut readers = Vec::new();
    for path in paths {
        for d in descriptors {
            readers.push(open_trace(path, d)?.strict_sources(known.clone()));
        }
    }
    merge_streams(readers).collect()
}
