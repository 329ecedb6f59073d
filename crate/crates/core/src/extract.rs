//! Schema-driven stateful extraction.
//!
//! Utterances are scanned for schema synonyms (longest match first). Each
//! match becomes a typed [`StateEvent`]; a negation cue shortly before the
//! match flips its polarity. Exam fields are only read from clinician
//! utterances, every other field only from patient utterances.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::RecoveredUtterance;
use crate::metrics::Prf;
use crate::stream::Role;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Symptom,
    Onset,
    Location,
    Severity,
    Modifier,
    Exam,
    History,
    RiskFlag,
}

impl FieldKind {
    pub fn source_role(self) -> Role {
        match self {
            FieldKind::Exam => Role::Doctor,
            _ => Role::Patient,
        }
    }

    /// Report section the field is rendered under.
    pub fn section(self) -> &'static str {
        match self {
            FieldKind::Symptom => "presenting_complaint",
            FieldKind::Onset | FieldKind::Location | FieldKind::Severity | FieldKind::Modifier => {
                "history_of_present_illness"
            }
            FieldKind::History | FieldKind::RiskFlag => "background",
            FieldKind::Exam => "investigations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDef {
    pub field_id: String,
    pub kind: FieldKind,
    /// Allowed normalized values; empty means free text.
    #[serde(default)]
    pub values: Vec<String>,
    #[serde(default)]
    pub required_for_goal: bool,
    /// Question used when the planner asks about this field.
    #[serde(default)]
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synonym {
    pub surface: String,
    pub field_id: String,
    pub value: String,
}

fn default_negation_window() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub fields: Vec<FieldDef>,
    pub synonyms: Vec<Synonym>,
    pub negation_cues: Vec<String>,
    #[serde(default)]
    pub temporal_cues: Vec<(String, String)>,
    #[serde(default = "default_negation_window")]
    pub negation_window: usize,
}

impl FieldSchema {
    pub fn from_json(s: &str) -> Result<Self, ExtractError> {
        let schema: FieldSchema = serde_json::from_str(s).map_err(|e| ExtractError::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        let mut seen = HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.field_id.as_str()) {
                return Err(ExtractError::InvalidSchema(format!("duplicate field {:?}", f.field_id)));
            }
        }
        for syn in &self.synonyms {
            let field = self.field(&syn.field_id).ok_or_else(|| {
                ExtractError::InvalidSchema(format!("synonym {:?} targets unknown field", syn.surface))
            })?;
            if !field.values.is_empty() && !field.values.contains(&syn.value) {
                return Err(ExtractError::InvalidSchema(format!(
                    "synonym {:?} maps to undeclared value {:?} of {}",
                    syn.surface, syn.value, syn.field_id
                )));
            }
            if syn.surface.split_whitespace().next().is_none() {
                return Err(ExtractError::InvalidSchema("empty synonym surface".into()));
            }
        }
        Ok(())
    }

    pub fn field(&self, field_id: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.field_id == field_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Asserted,
    Negated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEvent {
    pub field_id: String,
    pub value: String,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<String>,
    pub source_turn: u32,
    /// Inclusive token seq range.
    pub source_span: (u64, u64),
    pub confidence: f64,
}

impl StateEvent {
    pub fn key(&self) -> (&str, &str, Polarity) {
        (&self.field_id, &self.value, self.polarity)
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn extract_events(u: &RecoveredUtterance, schema: &FieldSchema, turn: u32) -> Vec<StateEvent> {
    let tokens: Vec<String> = u.tokens.iter().map(|t| t.text.to_lowercase()).collect();
    let mut surfaces: Vec<(Vec<String>, &Synonym)> = schema
        .synonyms
        .iter()
        .filter(|s| schema.field(&s.field_id).is_some_and(|f| f.kind.source_role() == u.role))
        .map(|s| (words(&s.surface), s))
        .collect();
    // Longest surface wins; ties keep schema order.
    surfaces.sort_by(|a, b| b.0.len().cmp(&a.0.len()));

    let temporal = schema.temporal_cues.iter().find_map(|(surface, qualifier)| {
        let w = words(surface);
        contains_seq(&tokens, &w).then(|| qualifier.clone())
    });
    let negation: HashSet<String> = schema.negation_cues.iter().map(|c| c.to_lowercase()).collect();

    let mut events: Vec<StateEvent> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = surfaces.iter().find(|(w, _)| !w.is_empty() && tokens[i..].starts_with(w));
        let Some((w, syn)) = hit else {
            i += 1;
            continue;
        };
        let len = w.len();
        let lo = i.saturating_sub(schema.negation_window);
        let negated = tokens[lo..i].iter().any(|t| negation.contains(t));
        let polarity = if negated { Polarity::Negated } else { Polarity::Asserted };
        let span = &u.tokens[i..i + len];
        let confidence = span.iter().map(|t| t.confidence).sum::<f64>() / len as f64;
        let dup = events.iter().any(|e| e.field_id == syn.field_id && e.value == syn.value);
        if !dup {
            events.push(StateEvent {
                field_id: syn.field_id.clone(),
                value: syn.value.clone(),
                polarity,
                temporal: temporal.clone(),
                source_turn: turn,
                source_span: (span[0].seq, span[len - 1].seq),
                confidence,
            });
        }
        i += len;
    }
    events
}

fn contains_seq(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Accumulated consultation state: last event per field plus full history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurrentState {
    pub slots: BTreeMap<String, StateEvent>,
    pub history: Vec<StateEvent>,
}

impl CurrentState {
    /// Applies events in order; either all are applied or none.
    pub fn apply(&mut self, schema: &FieldSchema, events: &[StateEvent]) -> Result<(), ExtractError> {
        if let Some(bad) = events.iter().find(|e| schema.field(&e.field_id).is_none()) {
            return Err(ExtractError::UnknownField(bad.field_id.clone()));
        }
        for e in events {
            self.slots.insert(e.field_id.clone(), e.clone());
            self.history.push(e.clone());
        }
        Ok(())
    }

    pub fn is_filled(&self, field_id: &str) -> bool {
        self.slots.contains_key(field_id)
    }

    pub fn holds(&self, field_id: &str, value: &str, polarity: Polarity) -> bool {
        self.slots.get(field_id).is_some_and(|e| e.value == value && e.polarity == polarity)
    }
}

pub fn apply_events(
    mut state: CurrentState,
    events: &[StateEvent],
    schema: &FieldSchema,
) -> Result<CurrentState, ExtractError> {
    state.apply(schema, events)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Matches predicted against gold events on `(field, value, polarity)` with
/// a turn tolerance of one. Within each key, both sides are walked in turn
/// order and each prediction takes the earliest gold event still in reach,
/// which is a maximum matching for this window shape.
pub fn match_events(pred: &[StateEvent], gold: &[StateEvent]) -> MatchCounts {
    type Key = (String, String, Polarity);
    let mut groups: BTreeMap<Key, (Vec<u32>, Vec<u32>)> = BTreeMap::new();
    for e in pred {
        let k = (e.field_id.clone(), e.value.clone(), e.polarity);
        groups.entry(k).or_default().0.push(e.source_turn);
    }
    for e in gold {
        let k = (e.field_id.clone(), e.value.clone(), e.polarity);
        groups.entry(k).or_default().1.push(e.source_turn);
    }
    let mut tp = 0;
    for (mut p, mut g) in groups.into_values() {
        p.sort_unstable();
        g.sort_unstable();
        let mut gi = 0;
        for &pt in &p {
            while gi < g.len() && g[gi] + 1 < pt {
                gi += 1;
            }
            if gi < g.len() && g[gi] <= pt + 1 {
                tp += 1;
                gi += 1;
            }
        }
    }
    MatchCounts { tp, fp: pred.len() - tp, fn_: gold.len() - tp }
}

pub fn event_prf(c: MatchCounts) -> Prf {
    Prf::from_counts(c.tp, c.fp, c.fn_)
}
