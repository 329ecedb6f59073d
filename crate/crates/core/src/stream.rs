//! Streamed token input.
//!
//! A stream is a header record followed by one record per recognised token.
//! The JSONL wire format keeps a fixed field order so that parsing and
//! re-serialising a canonical file reproduces it byte for byte.
//!
//! [`Synthesizer`] stands in for the speech front end: it turns a scripted
//! dialogue into timed tokens with seeded pauses and confidences.

use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STREAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Doctor,
    Patient,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Doctor => "doctor",
            Role::Patient => "patient",
        }
    }
}

/// One recognised token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub seq: u64,
    pub text: String,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
    /// Gap before the next token; 0 for the last token of a stream.
    pub pause_after_ms: u64,
    #[serde(rename = "conf")]
    pub confidence: f64,
    pub role: Role,
}

impl TokenEvent {
    fn validate(&self) -> Result<(), String> {
        if self.text.is_empty() || self.text.chars().any(char::is_whitespace) {
            return Err(format!("token text {:?} must be a single non-empty word", self.text));
        }
        if self.t_end_ms < self.t_start_ms {
            return Err("t_end_ms precedes t_start_ms".into());
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0,1]", self.confidence));
        }
        Ok(())
    }
}

/// A parsed stream file.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub session_id: String,
    pub tokens: Vec<TokenEvent>,
}

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("malformed record on line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("sequence number {0} does not increase")]
    NonMonotonicSeq(u64),
    #[error("stream does not start with a header record")]
    MissingHeader,
    #[error("script has no tokens")]
    EmptyScript,
    #[error("io error: {0}")]
    Io(String),
}

// Field order here is the wire order.
#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum WireRecord {
    Header { format_version: u32, session_id: String },
    Token { seq: u64, text: String, t_start_ms: u64, t_end_ms: u64, pause_after_ms: u64, conf: f64, role: Role },
}

pub fn parse_stream<R: BufRead>(source: R) -> Result<TokenStream, StreamError> {
    let mut session_id = None;
    let mut tokens: Vec<TokenEvent> = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| StreamError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: WireRecord = serde_json::from_str(&line).map_err(|e| {
            if session_id.is_none() {
                StreamError::MissingHeader
            } else {
                StreamError::MalformedRecord { line_no, reason: e.to_string() }
            }
        })?;
        match (record, session_id.is_some()) {
            (WireRecord::Header { format_version, session_id: sid }, false) => {
                if format_version != STREAM_FORMAT_VERSION {
                    return Err(StreamError::MalformedRecord {
                        line_no,
                        reason: format!("unsupported format_version {format_version}"),
                    });
                }
                session_id = Some(sid);
            }
            (WireRecord::Header { .. }, true) => {
                return Err(StreamError::MalformedRecord { line_no, reason: "duplicate header".into() })
            }
            (WireRecord::Token { .. }, false) => return Err(StreamError::MissingHeader),
            (WireRecord::Token { seq, text, t_start_ms, t_end_ms, pause_after_ms, conf, role }, true) => {
                let token = TokenEvent { seq, text, t_start_ms, t_end_ms, pause_after_ms, confidence: conf, role };
                token.validate().map_err(|reason| StreamError::MalformedRecord { line_no, reason })?;
                if let Some(prev) = tokens.last() {
                    if token.seq <= prev.seq {
                        return Err(StreamError::NonMonotonicSeq(token.seq));
                    }
                }
                tokens.push(token);
            }
        }
    }
    match session_id {
        Some(session_id) => Ok(TokenStream { session_id, tokens }),
        None => Err(StreamError::MissingHeader),
    }
}

pub fn serialize_stream(stream: &TokenStream) -> String {
    let mut out = String::new();
    let header = WireRecord::Header { format_version: STREAM_FORMAT_VERSION, session_id: stream.session_id.clone() };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for t in &stream.tokens {
        let rec = WireRecord::Token {
            seq: t.seq,
            text: t.text.clone(),
            t_start_ms: t.t_start_ms,
            t_end_ms: t.t_end_ms,
            pause_after_ms: t.pause_after_ms,
            conf: t.confidence,
            role: t.role,
        };
        out.push_str(&serde_json::to_string(&rec).expect("token serializes"));
        out.push('\n');
    }
    out
}

/// Explicit pause (and optional confidence) after one token of a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PauseMark {
    /// Token index within the turn.
    pub after: usize,
    pub pause_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptTurn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pauses: Vec<PauseMark>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub drop_rate: f64,
    /// Multiplier applied to every generated confidence.
    pub conf_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDialogue {
    pub case_id: String,
    pub turns: Vec<ScriptTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_profile: Option<NoiseProfile>,
}

/// Where a synthesized token came from in the script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenOrigin {
    pub turn: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PauseRanges {
    pub intra_turn_ms: (u64, u64),
    pub inter_turn_ms: (u64, u64),
}

impl Default for PauseRanges {
    fn default() -> Self {
        Self { intra_turn_ms: (80, 240), inter_turn_ms: (600, 1400) }
    }
}

/// Seeded token generator. Keeps a running clock and sequence counter so a
/// session can keep appending turns to one logical stream.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    rng: ChaCha8Rng,
    clock_ms: u64,
    next_seq: u64,
    pauses: PauseRanges,
}

struct RawToken {
    text: String,
    start: u64,
    end: u64,
    conf: f64,
    role: Role,
    origin: TokenOrigin,
    dropped: bool,
}

impl Synthesizer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), clock_ms: 0, next_seq: 1, pauses: PauseRanges::default() }
    }

    pub fn with_offset(mut self, clock_ms: u64, next_seq: u64) -> Self {
        self.clock_ms = clock_ms;
        self.next_seq = next_seq;
        self
    }

    pub fn with_pauses(mut self, pauses: PauseRanges) -> Self {
        self.pauses = pauses;
        self
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    /// Synthesizes a whole script. Returns tokens and their script origins.
    pub fn run(&mut self, script: &ScriptedDialogue) -> Result<(Vec<TokenEvent>, Vec<TokenOrigin>), StreamError> {
        let noise = script.noise_profile;
        let mut raw = Vec::new();
        for (turn_idx, turn) in script.turns.iter().enumerate() {
            let words: Vec<&str> = turn.text.split_whitespace().collect();
            for (j, word) in words.iter().enumerate() {
                let duration = 90 + 35 * word.chars().count() as u64 + self.rng.random_range(0..60);
                let mut conf: f64 = self.rng.random_range(0.86..0.99);
                let last_in_turn = j + 1 == words.len();
                let mut pause = if last_in_turn {
                    let (lo, hi) = self.pauses.inter_turn_ms;
                    self.rng.random_range(lo..=hi)
                } else {
                    let (lo, hi) = self.pauses.intra_turn_ms;
                    self.rng.random_range(lo..=hi)
                };
                // Drawn unconditionally so the random sequence does not depend on the noise profile.
                let drop_draw: f64 = self.rng.random();
                if let Some(mark) = turn.pauses.iter().find(|m| m.after == j) {
                    if !last_in_turn {
                        pause = mark.pause_ms;
                    }
                    if let Some(c) = mark.conf {
                        conf = c;
                    }
                }
                let mut dropped = false;
                if let Some(n) = noise {
                    conf = (conf * n.conf_factor).clamp(0.0, 1.0);
                    dropped = drop_draw < n.drop_rate;
                }
                let start = self.clock_ms;
                let end = start + duration;
                self.clock_ms = end + pause;
                raw.push(RawToken {
                    text: word.to_lowercase(),
                    start,
                    end,
                    conf,
                    role: turn.role,
                    origin: TokenOrigin { turn: turn_idx, index: j },
                    dropped,
                });
            }
        }
        let kept: Vec<RawToken> = raw.into_iter().filter(|t| !t.dropped).collect();
        if kept.is_empty() {
            return Err(StreamError::EmptyScript);
        }
        let mut tokens = Vec::with_capacity(kept.len());
        let mut origins = Vec::with_capacity(kept.len());
        for (i, t) in kept.iter().enumerate() {
            let pause_after_ms = kept.get(i + 1).map_or(0, |next| next.start - t.end);
            tokens.push(TokenEvent {
                seq: self.next_seq,
                text: t.text.clone(),
                t_start_ms: t.start,
                t_end_ms: t.end,
                pause_after_ms,
                confidence: t.conf,
                role: t.role,
            });
            origins.push(t.origin);
            self.next_seq += 1;
        }
        Ok((tokens, origins))
    }
}

/// Deterministic synthetic stream for a script: a pure function of `(script, seed)`.
pub fn synthesize_stream(script: &ScriptedDialogue, seed: u64) -> Result<Vec<TokenEvent>, StreamError> {
    if script.turns.is_empty() {
        return Err(StreamError::EmptyScript);
    }
    Synthesizer::new(seed).run(script).map(|(tokens, _)| tokens)
}
