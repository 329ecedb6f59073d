//! Utterance boundary and terminal punctuation restoration.
//!
//! Every gap between two tokens is a candidate boundary. Four cues are read
//! off a small window around the gap (pause length, lexical cue words, a
//! speaker change and a local confidence dip), combined linearly with a bias
//! and squashed through a logistic. A boundary fires when the probability
//! reaches the threshold; speaker changes always split.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Prf;
use crate::stream::{Role, TokenEvent};

#[derive(Debug, Error, PartialEq)]
pub enum BoundaryError {
    #[error("token stream is empty")]
    EmptyStream,
    #[error("invalid cue weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CueWeights {
    pub alpha_pause: f64,
    pub alpha_lexical: f64,
    pub alpha_role: f64,
    pub alpha_quality: f64,
    pub bias: f64,
    pub threshold: f64,
}

impl Default for CueWeights {
    fn default() -> Self {
        Self { alpha_pause: 2.2, alpha_lexical: 1.4, alpha_role: 3.0, alpha_quality: 0.6, bias: -1.5, threshold: 0.5 }
    }
}

impl CueWeights {
    pub fn validate(&self) -> Result<(), BoundaryError> {
        let all = [self.alpha_pause, self.alpha_lexical, self.alpha_role, self.alpha_quality, self.bias];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(BoundaryError::InvalidWeights("weights must be finite".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(BoundaryError::InvalidWeights(format!("threshold {} outside (0,1)", self.threshold)));
        }
        Ok(())
    }
}

/// Window and normalisation settings for cue extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueConfig {
    /// Pause length at which the pause cue saturates.
    pub p_max_ms: u64,
    /// Half-width of the confidence context window.
    pub window: usize,
}

impl Default for CueConfig {
    fn default() -> Self {
        Self { p_max_ms: 800, window: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CueVector {
    pub p: f64,
    pub l: f64,
    pub r: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PunctuationAblation {
    /// Split only where the speaker changes.
    None,
    PauseOnly,
    PauseLexical,
    Full,
}

impl PunctuationAblation {
    pub const ALL: [PunctuationAblation; 4] = [
        PunctuationAblation::None,
        PunctuationAblation::PauseOnly,
        PunctuationAblation::PauseLexical,
        PunctuationAblation::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PunctuationAblation::None => "none",
            PunctuationAblation::PauseOnly => "pause_only",
            PunctuationAblation::PauseLexical => "pause_lexical",
            PunctuationAblation::Full => "full",
        }
    }

    fn mask(self, c: CueVector) -> CueVector {
        match self {
            PunctuationAblation::None => CueVector::default(),
            PunctuationAblation::PauseOnly => CueVector { p: c.p, ..CueVector::default() },
            PunctuationAblation::PauseLexical => CueVector { q: 0.0, ..c },
            PunctuationAblation::Full => c,
        }
    }
}

impl std::str::FromStr for PunctuationAblation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| format!("unknown punctuation setting {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalMark {
    Period,
    Question,
}

/// Weighted cue lists. Words are matched case-insensitively against single tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub initial_cues: Vec<(String, f64)>,
    pub terminal_cues: Vec<(String, f64)>,
    pub interrogatives: Vec<String>,
}

impl Lexicon {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    fn lookup(list: &[(String, f64)], word: &str) -> f64 {
        list.iter()
            .filter(|(w, _)| w.eq_ignore_ascii_case(word))
            .map(|(_, weight)| weight.clamp(0.0, 1.0))
            .fold(0.0, f64::max)
    }

    pub fn initial_weight(&self, word: &str) -> f64 {
        Self::lookup(&self.initial_cues, word)
    }

    pub fn terminal_weight(&self, word: &str) -> f64 {
        Self::lookup(&self.terminal_cues, word)
    }

    pub fn is_interrogative(&self, word: &str) -> bool {
        self.interrogatives.iter().any(|w| w.eq_ignore_ascii_case(word))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredUtterance {
    pub tokens: Vec<TokenEvent>,
    pub role: Role,
    pub terminal_mark: TerminalMark,
    pub boundary_prob: f64,
    pub start_seq: u64,
    pub end_seq: u64,
}

impl RecoveredUtterance {
    /// Token text joined with spaces and the restored terminal mark.
    pub fn text(&self) -> String {
        let body = self.tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
        match self.terminal_mark {
            TerminalMark::Period => format!("{body}."),
            TerminalMark::Question => format!("{body}?"),
        }
    }
}

/// Cues for the gap after `tokens[i]`.
pub fn cue_scores(tokens: &[TokenEvent], i: usize, lexicon: &Lexicon, cfg: &CueConfig) -> CueVector {
    let cur = &tokens[i];
    let next = tokens.get(i + 1);
    let p = match next {
        None => 1.0,
        Some(_) if cfg.p_max_ms == 0 => 1.0,
        Some(_) => (cur.pause_after_ms as f64 / cfg.p_max_ms as f64).min(1.0),
    };
    let initial = next.map_or(0.0, |n| lexicon.initial_weight(&n.text));
    let l = initial.max(lexicon.terminal_weight(&cur.text));
    let r = match next {
        None => 1.0,
        Some(n) if n.role != cur.role => 1.0,
        Some(_) => 0.0,
    };
    let lo = i.saturating_sub(cfg.window);
    let hi = (i + cfg.window).min(tokens.len() - 1);
    let neighbours: Vec<f64> = (lo..=hi).filter(|&j| j != i).map(|j| tokens[j].confidence).collect();
    let q = if neighbours.is_empty() {
        0.0
    } else {
        let ctx = neighbours.iter().sum::<f64>() / neighbours.len() as f64;
        if ctx > 0.0 {
            ((ctx - cur.confidence) / ctx).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };
    CueVector { p, l, r, q }
}

pub fn boundary_score(c: CueVector, w: &CueWeights) -> f64 {
    w.alpha_pause * c.p + w.alpha_lexical * c.l + w.alpha_role * c.r + w.alpha_quality * c.q + w.bias
}

/// Logistic function, evaluated without overflow for large |b|.
pub fn boundary_prob(b: f64) -> f64 {
    if b >= 0.0 {
        1.0 / (1.0 + (-b).exp())
    } else {
        let e = b.exp();
        e / (1.0 + e)
    }
}

pub fn segment(
    tokens: &[TokenEvent],
    weights: &CueWeights,
    lexicon: &Lexicon,
    ablation: PunctuationAblation,
    cfg: &CueConfig,
) -> Result<Vec<RecoveredUtterance>, BoundaryError> {
    if tokens.is_empty() {
        return Err(BoundaryError::EmptyStream);
    }
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..tokens.len() {
        let last = i + 1 == tokens.len();
        let role_change = !last && tokens[i + 1].role != tokens[i].role;
        let cues = ablation.mask(cue_scores(tokens, i, lexicon, cfg));
        let prob = boundary_prob(boundary_score(cues, weights));
        let fires = match ablation {
            PunctuationAblation::None => false,
            _ => prob >= weights.threshold,
        };
        if last || role_change || fires {
            let span = &tokens[start..=i];
            let terminal_mark = if span.iter().any(|t| lexicon.is_interrogative(&t.text)) {
                TerminalMark::Question
            } else {
                TerminalMark::Period
            };
            let boundary_prob = if last || role_change { prob.max(boundary_prob(weights.alpha_role)) } else { prob };
            out.push(RecoveredUtterance {
                tokens: span.to_vec(),
                role: span[0].role,
                terminal_mark,
                boundary_prob,
                start_seq: span[0].seq,
                end_seq: span[span.len() - 1].seq,
            });
            start = i + 1;
        }
    }
    Ok(out)
}

/// Token indices (into the segmented slice) after which a boundary was
/// placed, excluding the end of the stream.
pub fn boundary_positions(utterances: &[RecoveredUtterance]) -> BTreeSet<usize> {
    let mut positions = BTreeSet::new();
    let mut idx = 0;
    for (n, u) in utterances.iter().enumerate() {
        idx += u.tokens.len();
        if n + 1 < utterances.len() {
            positions.insert(idx - 1);
        }
    }
    positions
}

/// Boundary precision/recall with one-to-one matching. Pairs within
/// `tolerance_tokens` are matched greedily, closest first.
pub fn boundary_prf(predicted: &BTreeSet<usize>, gold: &BTreeSet<usize>, tolerance_tokens: usize) -> Prf {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for &p in predicted {
        for &g in gold {
            let d = p.abs_diff(g);
            if d <= tolerance_tokens {
                pairs.push((d, p, g));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_p = HashSet::new();
    let mut used_g = HashSet::new();
    let mut tp = 0;
    for (_, p, g) in pairs {
        if used_p.contains(&p) || used_g.contains(&g) {
            continue;
        }
        used_p.insert(p);
        used_g.insert(g);
        tp += 1;
    }
    Prf::from_counts(tp, predicted.len() - tp, gold.len() - tp)
}
