//! Append-only replay trace, EMR-style report, and deterministic replay.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::boundary::RecoveredUtterance;
use crate::config::RunConfig;
use crate::extract::StateEvent;
use crate::extract::{CurrentState, FieldSchema, Polarity};
use crate::planner::{GapSignal, GoalState, ScoredCandidate};
use crate::retrieval::{Anchor, RetrievalIndex, Retrieved};
use crate::session::{
    BeliefSnapshot, Domain, ReportDelta, RetrievalSnapshot, SelectedRecord, Session, SessionSpec, TurnInput,
    TurnSummary, TurnUpdate,
};
use crate::util::sha256_hex;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("expected seq {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("corrupt trace record at seq {seq}: {message}")]
    CorruptRecord { seq: u64, message: String },
    #[error("trace header missing or malformed: {0}")]
    BadHeader(String),
    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u32),
    #[error("config hash {found} does not match trace {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("replay failed at turn {turn}: {message}")]
    Replay { turn: u32, message: String },
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Utterance,
    Events,
    BeliefSnapshot,
    RetrievalResult,
    Candidates,
    SelectedAction,
    ReportDelta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub action_id: String,
    pub seed: u64,
    pub draws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub seq: u64,
    pub turn: u32,
    pub record_kind: RecordKind,
    pub payload: Value,
    #[serde(default)]
    pub anchors: Vec<Anchor>,
    #[serde(default)]
    pub rng_positions: Vec<RngPosition>,
}

impl ReplayRecord {
    fn new(seq: u64, turn: u32, record_kind: RecordKind, payload: &impl Serialize) -> Self {
        Self {
            seq,
            turn,
            record_kind,
            payload: serde_json::to_value(payload).expect("payload serializes"),
            anchors: Vec::new(),
            rng_positions: Vec::new(),
        }
    }

    pub fn report_delta(seq: u64, turn: u32, delta: &ReportDelta) -> Self {
        Self::new(seq, turn, RecordKind::ReportDelta, delta)
    }

    fn decode<T: for<'de> Deserialize<'de>>(&self) -> Result<T, TraceError> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| TraceError::CorruptRecord { seq: self.seq, message: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    #[serde(rename = "type")]
    pub kind: String,
    pub format_version: u32,
    pub config_hash: String,
    pub case_hash: String,
    pub case_id: String,
    pub seed: u64,
    pub config: RunConfig,
    pub spec: SessionSpec,
}

impl TraceHeader {
    pub fn new(cfg: &RunConfig, spec: &SessionSpec, seed: u64) -> Self {
        Self {
            kind: "trace_header".into(),
            format_version: FORMAT_VERSION,
            config_hash: cfg.hash(),
            case_hash: sha256_hex(serde_json::to_string(spec).expect("spec serializes").as_bytes()),
            case_id: spec.case_id.clone(),
            seed,
            config: cfg.clone(),
            spec: spec.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLog {
    pub header: TraceHeader,
    records: Vec<ReplayRecord>,
}

#[derive(Serialize, Deserialize)]
struct UtterancePayload {
    input: TurnInput,
    utterances: Vec<RecoveredUtterance>,
}

#[derive(Serialize, Deserialize)]
struct EventsPayload {
    events: Vec<StateEvent>,
}

#[derive(Serialize, Deserialize)]
struct CandidatesPayload {
    gaps: Vec<GapSignal>,
    candidates: Vec<ScoredCandidate>,
}

impl TraceLog {
    pub fn new(header: TraceHeader) -> Self {
        Self { header, records: Vec::new() }
    }

    pub fn records(&self) -> &[ReplayRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.records.last().map_or(1, |r| r.seq + 1)
    }

    pub fn append(&mut self, r: ReplayRecord) -> Result<(), TraceError> {
        let expected = self.next_seq();
        if r.seq != expected {
            return Err(TraceError::SeqGap { expected, got: r.seq });
        }
        self.records.push(r);
        Ok(())
    }

    /// Records of one turn, in order.
    pub fn turn_records(&self, turn: u32) -> Vec<&ReplayRecord> {
        self.records.iter().filter(|r| r.turn == turn).collect()
    }

    /// Turns that carry pipeline input, ascending.
    pub fn turns(&self) -> Vec<u32> {
        let set: BTreeSet<u32> =
            self.records.iter().filter(|r| r.record_kind == RecordKind::Utterance).map(|r| r.turn).collect();
        set.into_iter().collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Self, TraceError> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| TraceError::BadHeader("empty trace".into()))?;
        let header: TraceHeader = serde_json::from_str(first).map_err(|e| TraceError::BadHeader(e.to_string()))?;
        if header.kind != "trace_header" {
            return Err(TraceError::BadHeader(format!("first line has type {:?}", header.kind)));
        }
        if header.format_version != FORMAT_VERSION {
            return Err(TraceError::UnsupportedVersion(header.format_version));
        }
        let mut log = TraceLog::new(header);
        for line in lines {
            let seq = log.next_seq();
            let r: ReplayRecord =
                serde_json::from_str(line).map_err(|e| TraceError::CorruptRecord { seq, message: e.to_string() })?;
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| TraceError::Io(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, TraceError> {
        let s = std::fs::read_to_string(path).map_err(|e| TraceError::Io(e.to_string()))?;
        Self::from_jsonl(&s)
    }

    /// Seeds recorded for a turn's candidate scoring.
    pub fn seeds(&self, turn: u32) -> BTreeMap<String, u64> {
        self.records
            .iter()
            .filter(|r| r.turn == turn && r.record_kind == RecordKind::Candidates)
            .flat_map(|r| r.rng_positions.iter().map(|p| (p.action_id.clone(), p.seed)))
            .collect()
    }
}

impl TurnUpdate {
    /// Trace records for this turn, numbered from `first_seq`.
    pub fn to_records(&self, first_seq: u64) -> Vec<ReplayRecord> {
        let t = self.turn;
        let mut seq = first_seq;
        let mut next = || {
            let s = seq;
            seq += 1;
            s
        };
        let mut out = vec![
            ReplayRecord::new(
                next(),
                t,
                RecordKind::Utterance,
                &UtterancePayload { input: self.input.clone(), utterances: self.utterances.clone() },
            ),
            ReplayRecord::new(next(), t, RecordKind::Events, &EventsPayload { events: self.events.clone() }),
            ReplayRecord::new(next(), t, RecordKind::BeliefSnapshot, &self.belief),
        ];
        let mut r = ReplayRecord::new(next(), t, RecordKind::RetrievalResult, &self.retrieval);
        r.anchors = self.retrieval.results.iter().map(|x| x.anchor.clone()).collect();
        out.push(r);
        let mut r = ReplayRecord::new(
            next(),
            t,
            RecordKind::Candidates,
            &CandidatesPayload { gaps: self.gaps.clone(), candidates: self.candidates.clone() },
        );
        r.anchors = self.candidates.iter().flat_map(|c| c.action.anchors.iter().cloned()).collect();
        r.rng_positions = self
            .candidates
            .iter()
            .map(|c| RngPosition {
                action_id: c.action.action_id.clone(),
                seed: c.estimate.seed,
                draws: c.estimate.draws,
            })
            .collect();
        out.push(r);
        if let Some(sel) = &self.selected {
            let mut r = ReplayRecord::new(next(), t, RecordKind::SelectedAction, sel);
            r.anchors = sel.action.anchors.clone();
            r.rng_positions = vec![RngPosition {
                action_id: sel.action.action_id.clone(),
                seed: sel.estimate.seed,
                draws: sel.estimate.draws,
            }];
            out.push(r);
        }
        out.push(ReplayRecord::report_delta(next(), t, &self.report_delta));
        out
    }

    /// Rebuilds a turn update from that turn's records.
    pub fn from_records(records: &[&ReplayRecord]) -> Result<Self, TraceError> {
        let first = records.first().ok_or(TraceError::BadHeader("no records for turn".into()))?;
        let find = |kind: RecordKind| {
            records.iter().find(|r| r.record_kind == kind).ok_or_else(|| TraceError::CorruptRecord {
                seq: first.seq,
                message: format!("turn {} lacks a {kind:?} record", first.turn),
            })
        };
        let utt: UtterancePayload = find(RecordKind::Utterance)?.decode()?;
        let events: EventsPayload = find(RecordKind::Events)?.decode()?;
        let belief: BeliefSnapshot = find(RecordKind::BeliefSnapshot)?.decode()?;
        let retrieval: RetrievalSnapshot = find(RecordKind::RetrievalResult)?.decode()?;
        let cands: CandidatesPayload = find(RecordKind::Candidates)?.decode()?;
        let selected: Option<SelectedRecord> =
            match records.iter().find(|r| r.record_kind == RecordKind::SelectedAction) {
                Some(r) => Some(r.decode()?),
                None => None,
            };
        let report_delta: ReportDelta = find(RecordKind::ReportDelta)?.decode()?;
        Ok(TurnUpdate {
            turn: first.turn,
            input: utt.input,
            utterances: utt.utterances,
            events: events.events,
            belief,
            retrieval,
            gaps: cands.gaps,
            candidates: cands.candidates,
            selected,
            report_delta,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotValue {
    pub value: String,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<String>,
    pub source_turn: u32,
    /// Token sequence range the value was extracted from.
    pub source_span: (u64, u64),
    pub anchors: Vec<Anchor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskStatus {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskItem {
    pub risk_id: String,
    pub status: RiskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closing_action: Option<String>,
    pub anchors: Vec<Anchor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeSection {
    pub section_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmrReport {
    pub case_id: String,
    pub slot_values: BTreeMap<String, SlotValue>,
    pub risk_items: Vec<RiskItem>,
    pub narrative_sections: Vec<NarrativeSection>,
    pub generated_at_turn: u32,
}

impl EmrReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const SECTIONS: [&str; 5] =
    ["presenting_complaint", "history_of_present_illness", "background", "investigations", "risk_assessment"];
const EMPTY_SECTION: &str = "(none recorded)";

fn retrieved_in(trace: &TraceLog) -> Vec<Retrieved> {
    trace
        .records()
        .iter()
        .filter(|r| r.record_kind == RecordKind::RetrievalResult)
        .filter_map(|r| serde_json::from_value::<RetrievalSnapshot>(r.payload.clone()).ok())
        .flat_map(|s| s.results)
        .collect()
}

fn tagged_anchors(retrieved: &[Retrieved], index: &RetrievalIndex, tag: &str) -> Vec<Anchor> {
    let set: BTreeSet<Anchor> = retrieved
        .iter()
        .filter(|r| index.object(&r.object_id).is_some_and(|o| o.tags.contains(tag)))
        .map(|r| r.anchor.clone())
        .collect();
    set.into_iter().collect()
}

fn humanize(id: &str) -> String {
    id.replace('_', " ")
}

/// Builds the report from the current state, closed risks (risk id ->
/// closing action) and the evidence retrieved so far.
#[allow(clippy::too_many_arguments)]
pub fn generate_report(
    case_id: &str,
    state: &CurrentState,
    goal: &GoalState,
    closed: &BTreeMap<String, String>,
    trace: &TraceLog,
    index: &RetrievalIndex,
    schema: &FieldSchema,
    turn: u32,
) -> EmrReport {
    let retrieved = retrieved_in(trace);
    let slot_values: BTreeMap<String, SlotValue> = state
        .slots
        .iter()
        .map(|(f, e)| {
            let v = SlotValue {
                value: e.value.clone(),
                polarity: e.polarity,
                temporal: e.temporal.clone(),
                source_turn: e.source_turn,
                source_span: e.source_span,
                anchors: tagged_anchors(&retrieved, index, &format!("field:{f}")),
            };
            (f.clone(), v)
        })
        .collect();

    let mut risk_ids: BTreeSet<&str> = closed.keys().map(String::as_str).collect();
    risk_ids.extend(goal.risk_checks.iter().filter(|r| r.triggered(state)).map(|r| r.risk_id.as_str()));
    let risk_items: Vec<RiskItem> = risk_ids
        .into_iter()
        .map(|id| RiskItem {
            risk_id: id.to_string(),
            status: if closed.contains_key(id) { RiskStatus::Closed } else { RiskStatus::Open },
            closing_action: closed.get(id).cloned(),
            anchors: tagged_anchors(&retrieved, index, &format!("risk:{id}")),
        })
        .collect();

    let mut lines: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (f, v) in &slot_values {
        let section = schema.field(f).map_or("background", |d| d.kind.section());
        let mut line = match v.polarity {
            Polarity::Asserted if v.value == "present" => humanize(f),
            Polarity::Asserted => format!("{}: {}", humanize(f), humanize(&v.value)),
            Polarity::Negated if v.value == "present" => format!("denies {}", humanize(f)),
            Polarity::Negated => format!("{}: not {}", humanize(f), humanize(&v.value)),
        };
        if let Some(t) = &v.temporal {
            line.push_str(&format!(" ({})", humanize(t)));
        }
        lines.entry(section).or_default().push(line);
    }
    for r in &risk_items {
        let line = match (&r.status, &r.closing_action) {
            (RiskStatus::Closed, Some(a)) => format!("{} closed by {a}", humanize(&r.risk_id)),
            _ => format!("{} open", humanize(&r.risk_id)),
        };
        lines.entry("risk_assessment").or_default().push(line);
    }
    let narrative_sections = SECTIONS
        .iter()
        .map(|s| NarrativeSection {
            section_id: s.to_string(),
            text: lines.get(s).map_or_else(|| EMPTY_SECTION.to_string(), |l| format!("{}.", l.join("; "))),
        })
        .collect();

    EmrReport { case_id: case_id.to_string(), slot_values, risk_items, narrative_sections, generated_at_turn: turn }
}

/// Per-turn sequences reconstructed from a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Replayed {
    pub summaries: Vec<TurnSummary>,
    pub updates: Vec<TurnUpdate>,
}

/// Re-executes every recorded turn with the recorded planner seeds.
pub fn replay(log: &TraceLog, cfg: &RunConfig, domain: Arc<Domain>) -> Result<Replayed, TraceError> {
    let found = cfg.hash();
    if found != log.header.config_hash {
        return Err(TraceError::ConfigMismatch { expected: log.header.config_hash.clone(), found });
    }
    let fail = |turn: u32| move |e: crate::session::SessionError| TraceError::Replay { turn, message: e.to_string() };
    let mut session = Session::new(domain, log.header.spec.clone(), cfg.clone(), log.header.seed).map_err(fail(0))?;
    for turn in log.turns() {
        let recs = log.turn_records(turn);
        let utt = recs.iter().find(|r| r.record_kind == RecordKind::Utterance).expect("turn listed by utterance");
        let payload: UtterancePayload = utt.decode()?;
        session.push_turn_with_seeds(payload.input, &log.seeds(turn)).map_err(fail(turn))?;
    }
    Ok(Replayed { summaries: session.summaries().to_vec(), updates: session.updates().to_vec() })
}

/// Per-turn summaries as written in the log, with slots folded from the
/// recorded events.
pub fn recorded_summaries(log: &TraceLog, schema: &FieldSchema) -> Result<Vec<TurnSummary>, TraceError> {
    let mut state = CurrentState::default();
    let mut out = Vec::new();
    for turn in log.turns() {
        let u = TurnUpdate::from_records(&log.turn_records(turn))?;
        state.apply(schema, &u.events).map_err(|e| TraceError::Replay { turn, message: e.to_string() })?;
        out.push(TurnSummary {
            turn,
            slots: state.slots.clone(),
            raw: u.belief.raw,
            fused: u.belief.fused,
            smoothed: u.belief.smoothed,
            selected: u.selected.map(|s| s.action.action_id),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub turn: u32,
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayVerdict {
    pub matches: bool,
    pub divergence: Option<Divergence>,
}

const BELIEF_TOL: f64 = 1e-12;

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= BELIEF_TOL)
}

/// Compares per-turn states, beliefs and actions; reports the first
/// divergent (turn, field).
pub fn verify_replay(live: &[TurnSummary], replayed: &[TurnSummary]) -> ReplayVerdict {
    let diverge = |turn: u32, field: &str| ReplayVerdict {
        matches: false,
        divergence: Some(Divergence { turn, field: field.to_string() }),
    };
    for i in 0..live.len().max(replayed.len()) {
        let (a, b) = match (live.get(i), replayed.get(i)) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) | (None, Some(a)) => return diverge(a.turn, "missing_turn"),
            (None, None) => unreachable!(),
        };
        if a.turn != b.turn {
            return diverge(a.turn.min(b.turn), "missing_turn");
        }
        if a.slots != b.slots {
            return diverge(a.turn, "state");
        }
        if !(close(&a.raw, &b.raw) && close(&a.fused, &b.fused) && close(&a.smoothed, &b.smoothed)) {
            return diverge(a.turn, "belief");
        }
        if a.selected != b.selected {
            return diverge(a.turn, "action");
        }
    }
    ReplayVerdict { matches: true, divergence: None }
}
