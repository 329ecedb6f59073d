//! Pilot cases and the shared suite they run against.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{Polarity, StateEvent};
use crate::planner::{resolve_models, AnswerSpec, GoalState, PreferredAction};
use crate::retrieval::eval::Qrels;
use crate::retrieval::RetrievalConfig;
use crate::session::{Domain, SessionSpec};
use crate::stream::{ScriptedDialogue, TokenOrigin};

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("case {case_id}: {message}")]
    Invalid { case_id: String, message: String },
    #[error("cannot parse {0}")]
    Parse(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldItem {
    pub field_id: String,
    pub value: String,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEvent {
    pub field_id: String,
    pub value: String,
    pub polarity: Polarity,
    /// Scripted exchange (session turn) the event is stated in.
    pub turn: u32,
}

/// Boundary after token `after` of script turn `turn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldBoundary {
    pub turn: usize,
    pub after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotCase {
    pub case_id: String,
    pub true_hypothesis: String,
    pub script: ScriptedDialogue,
    pub gold_events: Vec<GoldEvent>,
    pub gold_items: Vec<GoldItem>,
    pub goal: GoalState,
    #[serde(default)]
    pub gold_risks: Vec<String>,
    pub gold_boundaries: Vec<GoldBoundary>,
    pub preferred_actions: Vec<PreferredAction>,
    /// Answer tables keyed by action target.
    #[serde(default)]
    pub observation_models: BTreeMap<String, Vec<AnswerSpec>>,
    #[serde(default)]
    pub query_ids: Vec<String>,
}

impl PilotCase {
    pub fn from_json(s: &str) -> Result<Self, CaseError> {
        serde_json::from_str(s).map_err(|e| CaseError::Parse(e.to_string()))
    }

    pub fn invalid(&self, message: impl Into<String>) -> CaseError {
        CaseError::Invalid { case_id: self.case_id.clone(), message: message.into() }
    }

    pub fn validate(&self, domain: &Domain, qrels: &Qrels) -> Result<(), CaseError> {
        if domain.hypotheses.index_of(&self.true_hypothesis).is_none() {
            return Err(self.invalid(format!("unknown true hypothesis {:?}", self.true_hypothesis)));
        }
        self.goal.validate(&domain.schema).map_err(|e| self.invalid(e.to_string()))?;
        let fields = self.gold_events.iter().map(|e| &e.field_id).chain(self.gold_items.iter().map(|i| &i.field_id));
        for f in fields {
            if domain.schema.field(f).is_none() {
                return Err(self.invalid(format!("unknown field {f:?}")));
            }
        }
        for r in &self.gold_risks {
            if self.goal.risk(r).is_none() {
                return Err(self.invalid(format!("gold risk {r:?} is not a goal risk check")));
            }
        }
        for b in &self.gold_boundaries {
            let ok = self.script.turns.get(b.turn).is_some_and(|t| b.after < t.text.split_whitespace().count());
            if !ok {
                return Err(self.invalid(format!("gold boundary {b:?} outside the script")));
            }
        }
        for q in &self.query_ids {
            if !qrels.entries.contains_key(q) {
                return Err(self.invalid(format!("unknown query {q:?}")));
            }
        }
        if self.gold_items.is_empty() || self.gold_events.is_empty() || self.preferred_actions.is_empty() {
            return Err(self.invalid("gold lists must be nonempty"));
        }
        let exchanges = self.exchanges().len() as u32;
        if let Some(p) = self.preferred_actions.iter().find(|p| p.turn == 0 || p.turn > exchanges) {
            return Err(self.invalid(format!("preferred action for turn {} outside the script", p.turn)));
        }
        resolve_models(&self.observation_models, &domain.hypotheses).map_err(|e| self.invalid(e.to_string()))?;
        Ok(())
    }

    /// Script turn ranges, each ending on a patient turn. One range is one
    /// session turn.
    pub fn exchanges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, t) in self.script.turns.iter().enumerate() {
            if t.role == crate::stream::Role::Patient {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.script.turns.len() {
            out.push(start..self.script.turns.len());
        }
        out
    }

    pub fn session_spec(&self, domain: &Domain) -> Result<SessionSpec, CaseError> {
        Ok(SessionSpec {
            case_id: self.case_id.clone(),
            goal: self.goal.clone(),
            observation_models: resolve_models(&self.observation_models, &domain.hypotheses)
                .map_err(|e| self.invalid(e.to_string()))?,
        })
    }

    pub fn gold_state_events(&self) -> Vec<StateEvent> {
        self.gold_events
            .iter()
            .map(|g| StateEvent {
                field_id: g.field_id.clone(),
                value: g.value.clone(),
                polarity: g.polarity,
                temporal: None,
                source_turn: g.turn,
                source_span: (0, 0),
                confidence: 1.0,
            })
            .collect()
    }

    /// Gold boundary positions within one synthesized slice. A boundary
    /// after a dropped token moves to the nearest kept token before it; the
    /// end of the slice is excluded.
    pub fn gold_positions(&self, origins: &[TokenOrigin]) -> BTreeSet<usize> {
        let gold: BTreeSet<GoldBoundary> = self.gold_boundaries.iter().copied().collect();
        let mut out = BTreeSet::new();
        for (i, o) in origins.iter().enumerate() {
            let here = (o.turn, o.index);
            let until = origins.get(i + 1).map(|n| (n.turn, n.index));
            let hit = gold.iter().any(|g| {
                let g = (g.turn, g.after);
                g >= here && until.is_none_or(|u| g < u)
            });
            if hit && i + 1 < origins.len() {
                out.insert(i);
            }
        }
        out
    }
}

/// Shared domain, judgments and cases.
#[derive(Debug, Clone)]
pub struct Suite {
    pub domain: Arc<Domain>,
    pub qrels: Qrels,
    pub cases: Vec<PilotCase>,
}

const BUNDLED_SCHEMA: &str = include_str!("../data/suite/schema.json");
const BUNDLED_LEXICON: &str = include_str!("../data/suite/lexicon.json");
const BUNDLED_HYPOTHESES: &str = include_str!("../data/suite/hypotheses.json");
const BUNDLED_CORPUS: &str = include_str!("../data/suite/corpus.jsonl");
const BUNDLED_QRELS: &str = include_str!("../data/suite/qrels.jsonl");
const BUNDLED_CASES: [&str; 6] = [
    include_str!("../data/suite/cases/acs_01.json"),
    include_str!("../data/suite/cases/acs_02.json"),
    include_str!("../data/suite/cases/gerd_01.json"),
    include_str!("../data/suite/cases/msk_01.json"),
    include_str!("../data/suite/cases/biliary_01.json"),
    include_str!("../data/suite/cases/pud_01.json"),
];

impl Suite {
    pub fn from_parts(
        schema: &str,
        lexicon: &str,
        hypotheses: &str,
        corpus: &str,
        qrels: &str,
        cases: &[String],
        retrieval: RetrievalConfig,
    ) -> Result<Self, CaseError> {
        let domain = Domain::from_sources(schema, lexicon, hypotheses, corpus, retrieval)
            .map_err(|e| CaseError::Parse(e.to_string()))?;
        let qrels = Qrels::from_jsonl(qrels).map_err(|e| CaseError::Parse(e.to_string()))?;
        let mut parsed = Vec::with_capacity(cases.len());
        for c in cases {
            let case = PilotCase::from_json(c)?;
            case.validate(&domain, &qrels)?;
            parsed.push(case);
        }
        parsed.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Ok(Self { domain: Arc::new(domain), qrels, cases: parsed })
    }

    /// The suite compiled into the library.
    pub fn bundled(retrieval: RetrievalConfig) -> Result<Self, CaseError> {
        let cases: Vec<String> = BUNDLED_CASES.iter().map(|s| s.to_string()).collect();
        Self::from_parts(
            BUNDLED_SCHEMA,
            BUNDLED_LEXICON,
            BUNDLED_HYPOTHESES,
            BUNDLED_CORPUS,
            BUNDLED_QRELS,
            &cases,
            retrieval,
        )
    }

    /// Loads `schema.json`, `lexicon.json`, `hypotheses.json`,
    /// `corpus.jsonl`, `qrels.jsonl` and every `cases/*.json`.
    pub fn load(dir: &Path, retrieval: RetrievalConfig) -> Result<Self, CaseError> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| CaseError::Io(format!("{}: {e}", dir.join(name).display())))
        };
        let case_dir = dir.join("cases");
        let mut paths: Vec<_> = std::fs::read_dir(&case_dir)
            .map_err(|e| CaseError::Io(format!("{}: {e}", case_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let cases = paths
            .iter()
            .map(|p| std::fs::read_to_string(p).map_err(|e| CaseError::Io(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(
            &read("schema.json")?,
            &read("lexicon.json")?,
            &read("hypotheses.json")?,
            &read("corpus.jsonl")?,
            &read("qrels.jsonl")?,
            &cases,
            retrieval,
        )
    }

    pub fn case(&self, case_id: &str) -> Option<&PilotCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }
}
