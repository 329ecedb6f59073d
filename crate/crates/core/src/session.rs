//! Per-turn pipeline driver.
//!
//! A [`Session`] owns the consultation state for one dialogue and runs
//! every stage for each pushed turn: boundary restoration, extraction,
//! retrieval, belief stabilization and planning. Each turn produces a
//! [`TurnUpdate`] and the matching trace records.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{concentration, stabilize, temperature_scale, BeliefError, Hypothesis, HypothesisSet, ScoreBundle};
use crate::boundary::{segment, BoundaryError, Lexicon, RecoveredUtterance};
use crate::config::{Effective, Policy, RunConfig};
use crate::extract::{extract_events, CurrentState, ExtractError, FieldKind, FieldSchema, Polarity, StateEvent};
use crate::planner::{
    derive_gaps, estimate_eig, generate_candidates, select_action, ActionKind, CandidateAction, CandidateContext,
    EigEstimate, GapSignal, GoalState, ObservationModel, PlannerError, ScoredCandidate,
};
use crate::retrieval::{
    build_index, objectify, parse_corpus, retrieve, tokenize, KnowledgeObject, RetrievalConfig, RetrievalError,
    RetrievalIndex, Retrieved, TagLexicon,
};
use crate::stream::{Role, ScriptTurn, ScriptedDialogue, StreamError, Synthesizer, TokenEvent};
use crate::trace::{generate_report, EmrReport, ReplayRecord, TraceError, TraceHeader, TraceLog};
use crate::util::mix_seed;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("turn {got} already processed (next is {expected})")]
    DuplicateTurn { expected: u32, got: u32 },
    #[error("turn {got} skips ahead (next is {expected})")]
    TurnGap { expected: u32, got: u32 },
    #[error("no recorded seed for action {0:?}")]
    MissingSeed(String),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Error)]
#[error("invalid domain data: {0}")]
pub struct DomainError(pub String);

/// Rule evidence: a state fact that supports a hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub field_id: String,
    pub value: String,
    #[serde(default = "asserted")]
    pub polarity: Polarity,
    pub weight: f64,
}

fn asserted() -> Polarity {
    Polarity::Asserted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisProfile {
    pub id: String,
    pub name: String,
    /// Keyword (possibly multi-word) and logit contribution per occurrence.
    #[serde(default)]
    pub keywords: Vec<(String, f64)>,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, Deserialize)]
struct HypothesesFile {
    hypotheses: Vec<HypothesisProfile>,
}

/// Shared, read-only domain knowledge: schema, lexicon, hypotheses and the
/// retrieval index.
#[derive(Debug, Clone)]
pub struct Domain {
    pub schema: FieldSchema,
    pub lexicon: Lexicon,
    pub hypotheses: HypothesisSet,
    pub profiles: Vec<HypothesisProfile>,
    pub objects: Vec<KnowledgeObject>,
    pub index: RetrievalIndex,
}

impl Domain {
    pub fn from_sources(
        schema: &str,
        lexicon: &str,
        hypotheses: &str,
        corpus: &str,
        retrieval: RetrievalConfig,
    ) -> Result<Self, DomainError> {
        let err = |what: &str, e: &dyn std::fmt::Display| DomainError(format!("{what}: {e}"));
        let schema = FieldSchema::from_json(schema).map_err(|e| err("schema", &e))?;
        let lexicon = Lexicon::from_json(lexicon).map_err(|e| err("lexicon", &e))?;
        let file: HypothesesFile = serde_json::from_str(hypotheses).map_err(|e| err("hypotheses", &e))?;
        let set = HypothesisSet::new(
            file.hypotheses.iter().map(|h| Hypothesis { id: h.id.clone(), name: h.name.clone() }).collect(),
        )
        .map_err(|e| err("hypotheses", &e))?;
        for rule in file.hypotheses.iter().flat_map(|h| &h.rules) {
            if schema.field(&rule.field_id).is_none() {
                return Err(DomainError(format!("rule on unknown field {:?}", rule.field_id)));
            }
        }
        let blocks = parse_corpus(corpus).map_err(|e| err("corpus", &e))?;
        let objects = objectify(&blocks, &TagLexicon::default()).map_err(|e| err("corpus", &e))?;
        let index = build_index(objects.clone(), retrieval).map_err(|e| err("corpus", &e))?;
        Ok(Self { schema, lexicon, hypotheses: set, profiles: file.hypotheses, objects, index })
    }

    /// Same domain with the index rebuilt for another retrieval config.
    pub fn with_retrieval(&self, cfg: RetrievalConfig) -> Result<Self, DomainError> {
        let index = build_index(self.objects.clone(), cfg).map_err(|e| DomainError(e.to_string()))?;
        Ok(Self { index, ..self.clone() })
    }
}

/// Case-specific inputs to a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub case_id: String,
    pub goal: GoalState,
    #[serde(default)]
    pub observation_models: BTreeMap<String, ObservationModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Concluded,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnInput {
    pub turn: u32,
    pub tokens: Vec<TokenEvent>,
    /// Action whose prompt this turn responds to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answering: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub raw: Vec<f64>,
    pub fused: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub temperature: f64,
    pub scores: ScoreBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSnapshot {
    pub query: String,
    pub results: Vec<Retrieved>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRecord {
    pub action: CandidateAction,
    pub estimate: EigEstimate,
    /// The target was already filled or closed when the action was chosen.
    pub target_satisfied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub changed_slots: Vec<StateEvent>,
    pub closed_risks: Vec<String>,
    pub goal_satisfied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_report: Option<EmrReport>,
}

/// Everything one turn produced. Mirrors that turn's trace records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnUpdate {
    pub turn: u32,
    pub input: TurnInput,
    pub utterances: Vec<RecoveredUtterance>,
    pub events: Vec<StateEvent>,
    pub belief: BeliefSnapshot,
    pub retrieval: RetrievalSnapshot,
    pub gaps: Vec<GapSignal>,
    pub candidates: Vec<ScoredCandidate>,
    pub selected: Option<SelectedRecord>,
    pub report_delta: ReportDelta,
}

/// Per-turn values compared by replay verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub turn: u32,
    pub slots: BTreeMap<String, StateEvent>,
    pub raw: Vec<f64>,
    pub fused: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub selected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub turn: u32,
    pub stage: String,
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub case_id: String,
    pub turn: u32,
    pub status: SessionStatus,
    pub state: CurrentState,
    pub belief: Vec<f64>,
    pub gaps: Vec<GapSignal>,
    pub closed_risks: BTreeMap<String, String>,
    pub report: EmrReport,
}

pub struct Session {
    domain: Arc<Domain>,
    spec: SessionSpec,
    cfg: RunConfig,
    eff: Effective,
    seed: u64,
    status: SessionStatus,
    turn: u32,
    state: CurrentState,
    /// Closed risk id -> closing action id.
    closed: BTreeMap<String, String>,
    smoothed: Vec<f64>,
    recent: Vec<Vec<f64>>,
    previous: Option<String>,
    issued: BTreeMap<String, u32>,
    prev_patient_words: Vec<String>,
    clock_ms: u64,
    next_seq: u64,
    trace: TraceLog,
    updates: Vec<TurnUpdate>,
    summaries: Vec<TurnSummary>,
    timings: Vec<StageTiming>,
    auto_conclude: bool,
}

fn count_phrase(words: &[String], phrase: &str) -> usize {
    let p: Vec<String> = tokenize(phrase);
    if p.is_empty() || p.len() > words.len() {
        return 0;
    }
    words.windows(p.len()).filter(|w| *w == p.as_slice()).count()
}

impl Session {
    pub fn new(domain: Arc<Domain>, spec: SessionSpec, cfg: RunConfig, seed: u64) -> Result<Self, SessionError> {
        cfg.validate().map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        spec.goal.validate(&domain.schema).map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        for (target, model) in &spec.observation_models {
            model.validate(target, domain.hypotheses.len()).map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        }
        let domain = if domain.index.config == cfg.retrieval {
            domain
        } else {
            Arc::new(domain.with_retrieval(cfg.retrieval).map_err(|e| SessionError::InvalidConfig(e.to_string()))?)
        };
        let trace = TraceLog::new(TraceHeader::new(&cfg, &spec, seed));
        let prior = domain.hypotheses.uniform();
        Ok(Self {
            eff: cfg.effective(),
            recent: vec![prior.clone()],
            smoothed: prior,
            domain,
            spec,
            cfg,
            seed,
            status: SessionStatus::Open,
            turn: 0,
            state: CurrentState::default(),
            closed: BTreeMap::new(),
            previous: None,
            issued: BTreeMap::new(),
            prev_patient_words: Vec::new(),
            clock_ms: 0,
            next_seq: 1,
            trace,
            updates: Vec::new(),
            summaries: Vec::new(),
            timings: Vec::new(),
            auto_conclude: false,
        })
    }

    /// Close the session as soon as a turn selects `conclude`.
    pub fn with_auto_conclude(mut self, on: bool) -> Self {
        self.auto_conclude = on;
        self
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn state(&self) -> &CurrentState {
        &self.state
    }

    pub fn belief(&self) -> &[f64] {
        &self.smoothed
    }

    pub fn closed_risks(&self) -> &BTreeMap<String, String> {
        &self.closed
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn updates(&self) -> &[TurnUpdate] {
        &self.updates
    }

    pub fn summaries(&self) -> &[TurnSummary] {
        &self.summaries
    }

    pub fn timings(&self) -> &[StageTiming] {
        &self.timings
    }

    pub fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn effective(&self) -> Effective {
        self.eff
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Times each action has been answered so far.
    pub fn issued(&self) -> &BTreeMap<String, u32> {
        &self.issued
    }

    /// Tokenizes typed text for the next turn with synthetic timings.
    pub fn text_input(&self, parts: &[(Role, &str)], answering: Option<String>) -> Result<TurnInput, SessionError> {
        let turn = self.turn + 1;
        let script = ScriptedDialogue {
            case_id: self.spec.case_id.clone(),
            turns: parts
                .iter()
                .filter(|(_, text)| !text.trim().is_empty())
                .map(|(role, text)| ScriptTurn { role: *role, text: text.to_string(), pauses: vec![] })
                .collect(),
            noise_profile: None,
        };
        let (tokens, _) = Synthesizer::new(mix_seed(self.seed, turn, "text"))
            .with_offset(self.clock_ms, self.next_seq)
            .run(&script)?;
        Ok(TurnInput { turn, tokens, answering })
    }

    pub fn push_turn(&mut self, input: TurnInput) -> Result<TurnUpdate, SessionError> {
        self.run_turn(input, None)
    }

    /// Runs a turn with information-gain seeds taken from a recorded trace.
    pub fn push_turn_with_seeds(
        &mut self,
        input: TurnInput,
        seeds: &BTreeMap<String, u64>,
    ) -> Result<TurnUpdate, SessionError> {
        self.run_turn(input, Some(seeds))
    }

    fn time(&mut self, turn: u32, stage: &str, started: Instant) {
        let micros = started.elapsed().as_micros() as u64;
        tracing::debug!(turn, stage, micros, "stage finished");
        self.timings.push(StageTiming { turn, stage: stage.to_string(), micros });
    }

    fn run_turn(
        &mut self,
        input: TurnInput,
        seeds: Option<&BTreeMap<String, u64>>,
    ) -> Result<TurnUpdate, SessionError> {
        let saved = (self.issued.clone(), self.closed.clone());
        let out = self.run_turn_inner(input, seeds);
        if out.is_err() {
            (self.issued, self.closed) = saved;
        }
        out
    }

    fn run_turn_inner(
        &mut self,
        input: TurnInput,
        seeds: Option<&BTreeMap<String, u64>>,
    ) -> Result<TurnUpdate, SessionError> {
        if self.status != SessionStatus::Open {
            return Err(SessionError::SessionClosed);
        }
        let expected = self.turn + 1;
        if input.turn < expected {
            return Err(SessionError::DuplicateTurn { expected, got: input.turn });
        }
        if input.turn > expected {
            return Err(SessionError::TurnGap { expected, got: input.turn });
        }
        let turn = input.turn;
        let domain = Arc::clone(&self.domain);
        let cfg = self.cfg.clone();

        let started = Instant::now();
        let utterances = segment(
            &input.tokens,
            &cfg.boundary.weights,
            &domain.lexicon,
            cfg.harness.punctuation,
            &cfg.boundary.cues(),
        )?;
        self.time(turn, "boundary", started);

        let started = Instant::now();
        let events: Vec<StateEvent> = utterances.iter().flat_map(|u| extract_events(u, &domain.schema, turn)).collect();
        let mut next_state = self.state.clone();
        next_state.apply(&domain.schema, &events)?;
        let changed_slots: Vec<StateEvent> = next_state
            .slots
            .iter()
            .filter(|(f, e)| self.state.slots.get(*f) != Some(*e))
            .map(|(_, e)| e.clone())
            .collect();
        self.time(turn, "extraction", started);

        let started = Instant::now();
        let patient_words: Vec<String> =
            input.tokens.iter().filter(|t| t.role == Role::Patient).flat_map(|t| tokenize(&t.text)).collect();
        let mut query_parts = patient_words.clone();
        for e in next_state.slots.values().filter(|e| e.polarity == Polarity::Asserted) {
            query_parts.extend(tokenize(&e.field_id.replace('_', " ")));
        }
        let query = query_parts.join(" ");
        let results = if query.is_empty() {
            Vec::new()
        } else {
            retrieve(&domain.index, &query, cfg.retrieval.top_k, self.eff.retrieval_mode)?
        };
        self.time(turn, "retrieval", started);

        let started = Instant::now();
        let scores = self.score_bundle(&domain, &input.tokens, &patient_words, &next_state, &results)?;
        let step = stabilize(self.eff.stage, &self.smoothed, &self.recent, &scores, &cfg.stabilizer)?;
        self.time(turn, "belief", started);

        let started = Instant::now();
        let mut newly_closed = Vec::new();
        if let Some(id) = &input.answering {
            *self.issued.entry(id.clone()).or_default() += 1;
            if let Some(risk) = id.strip_prefix("risk_close:") {
                if self.spec.goal.risk(risk).is_some() && !self.closed.contains_key(risk) {
                    self.closed.insert(risk.to_string(), id.clone());
                    newly_closed.push(risk.to_string());
                }
            }
        }
        let closed_set: BTreeSet<String> = self.closed.keys().cloned().collect();
        let (gaps, mut candidates) = match self.eff.policy {
            Policy::None => (Vec::new(), Vec::new()),
            Policy::Eig => {
                let gaps = derive_gaps(&next_state, &self.spec.goal, &step.smoothed, &closed_set);
                let ctx = CandidateContext {
                    schema: &domain.schema,
                    goal: &self.spec.goal,
                    state: &next_state,
                    index: &domain.index,
                    retrieved: &results,
                    models: &self.spec.observation_models,
                    n_hypotheses: domain.hypotheses.len(),
                    issued: &self.issued,
                };
                let cands = generate_candidates(&gaps, &ctx, &cfg.planner);
                (gaps, cands)
            }
            Policy::Template => {
                let gaps = derive_gaps(&next_state, &self.spec.goal, &step.smoothed, &closed_set);
                (gaps, vec![self.template_action(&domain, &next_state)])
            }
        };
        let mut scored = Vec::with_capacity(candidates.len());
        for c in candidates.drain(..) {
            let seed = match seeds {
                Some(map) => *map.get(&c.action_id).ok_or_else(|| SessionError::MissingSeed(c.action_id.clone()))?,
                None => mix_seed(self.seed, turn, &c.action_id),
            };
            let estimate = estimate_eig(&c, &step.smoothed, &cfg.planner, seed)?;
            scored.push(ScoredCandidate { action: CandidateAction { observation_model: None, ..c }, estimate });
        }
        let selected = if scored.is_empty() {
            None
        } else {
            let idx = match self.eff.policy {
                Policy::Template => 0,
                _ => select_action(
                    &scored,
                    self.previous.as_deref(),
                    self.eff.conservative,
                    cfg.planner.conservative_margin,
                )?,
            };
            let pick = &scored[idx];
            let target_satisfied = match pick.action.kind {
                ActionKind::RiskClose => self.closed.contains_key(&pick.action.target),
                ActionKind::Conclude => false,
                _ => next_state.is_filled(&pick.action.target),
            };
            Some(SelectedRecord { action: pick.action.clone(), estimate: pick.estimate, target_satisfied })
        };
        self.time(turn, "planning", started);

        if let Some(sel) = &selected {
            self.previous = Some(sel.action.action_id.clone());
            if self.auto_conclude && sel.action.kind == ActionKind::Conclude {
                self.status = SessionStatus::Concluded;
            }
        }
        let closed_set: BTreeSet<String> = self.closed.keys().cloned().collect();
        let report_delta = ReportDelta {
            changed_slots,
            closed_risks: newly_closed,
            goal_satisfied: self.spec.goal.satisfied(&next_state, &closed_set),
            final_report: None,
        };

        self.state = next_state;
        self.smoothed = step.smoothed.clone();
        self.recent.push(step.smoothed.clone());
        let keep = cfg.stabilizer.volatility_window;
        if self.recent.len() > keep {
            self.recent.drain(..self.recent.len() - keep);
        }
        self.prev_patient_words = patient_words;
        if let Some(last) = input.tokens.last() {
            self.next_seq = self.next_seq.max(last.seq + 1);
            self.clock_ms = self.clock_ms.max(last.t_end_ms + 1000);
        }
        self.turn = turn;

        let update = TurnUpdate {
            turn,
            input,
            utterances,
            events,
            belief: BeliefSnapshot {
                raw: step.raw.clone(),
                fused: step.fused.clone(),
                smoothed: step.smoothed.clone(),
                temperature: step.temperature,
                scores,
            },
            retrieval: RetrievalSnapshot { query, results },
            gaps,
            candidates: scored,
            selected,
            report_delta,
        };
        let started = Instant::now();
        for r in update.to_records(self.trace.next_seq()) {
            self.trace.append(r)?;
        }
        self.time(turn, "report", started);
        self.summaries.push(TurnSummary {
            turn,
            slots: self.state.slots.clone(),
            raw: step.raw,
            fused: step.fused,
            smoothed: step.smoothed,
            selected: update.selected.as_ref().map(|s| s.action.action_id.clone()),
        });
        self.updates.push(update.clone());
        Ok(update)
    }

    fn score_bundle(
        &self,
        domain: &Domain,
        tokens: &[TokenEvent],
        patient_words: &[String],
        state: &CurrentState,
        results: &[Retrieved],
    ) -> Result<ScoreBundle, SessionError> {
        let quality = if tokens.is_empty() {
            1.0
        } else {
            tokens.iter().map(|t| t.confidence).sum::<f64>() / tokens.len() as f64
        };
        let raw_logits: Vec<f64> = domain
            .profiles
            .iter()
            .map(|p| {
                p.keywords
                    .iter()
                    .map(|(kw, w)| {
                        w * (count_phrase(patient_words, kw) as f64
                            + 0.5 * count_phrase(&self.prev_patient_words, kw) as f64)
                    })
                    .sum()
            })
            .collect();
        let rule_logits: Vec<f64> = domain
            .profiles
            .iter()
            .map(|p| p.rules.iter().filter(|r| state.holds(&r.field_id, &r.value, r.polarity)).map(|r| r.weight).sum())
            .collect();
        let s_rule = temperature_scale(&rule_logits, 1.0)?;
        let mut s_retrieval = vec![0.05; domain.profiles.len()];
        for r in results {
            if let Some(obj) = domain.index.object(&r.object_id) {
                for (h, p) in domain.profiles.iter().enumerate() {
                    if obj.tags.contains(&format!("hyp:{}", p.id)) {
                        s_retrieval[h] += r.score;
                    }
                }
            }
        }
        let total: f64 = s_retrieval.iter().sum();
        for x in s_retrieval.iter_mut() {
            *x /= total;
        }
        Ok(ScoreBundle { rule_confidence: concentration(&s_rule), s_rule, s_retrieval, raw_logits, quality })
    }

    /// Next item of the fixed question order: required slots, then
    /// discriminating slots, then triggered risks, then conclude.
    fn template_action(&self, domain: &Domain, state: &CurrentState) -> CandidateAction {
        let goal = &self.spec.goal;
        let asked = |a: &CandidateAction| self.issued.contains_key(&a.action_id);
        let prompt = |f: &str| {
            domain
                .schema
                .field(f)
                .map(|d| d.prompt.clone())
                .filter(|p| !p.is_empty())
                .unwrap_or_else(|| format!("can you tell me about {}", f.replace('_', " ")))
        };
        let mut order: Vec<CandidateAction> = Vec::new();
        for f in &goal.required_slots {
            let exam = domain.schema.field(f).is_some_and(|d| d.kind == FieldKind::Exam);
            let kind = if exam { ActionKind::RecommendExam } else { ActionKind::Ask };
            order.push(CandidateAction::new(kind, f, prompt(f)));
        }
        for f in &goal.discriminating_slots {
            order.push(CandidateAction::new(ActionKind::Verify, f, prompt(f)));
        }
        for r in goal.risk_checks.iter().filter(|r| r.triggered(state) && !self.closed.contains_key(&r.risk_id)) {
            order.push(CandidateAction::new(ActionKind::RiskClose, &r.risk_id, r.prompt.clone()));
        }
        let mut action = order.into_iter().find(|a| !asked(a)).unwrap_or_else(|| {
            CandidateAction::new(ActionKind::Conclude, "session", "thank you, that is all i need".into())
        });
        action.observation_model = Some(
            self.spec
                .observation_models
                .get(&action.target)
                .cloned()
                .unwrap_or_else(|| ObservationModel::uninformative(domain.hypotheses.len())),
        );
        action
    }

    pub fn report(&self) -> EmrReport {
        generate_report(
            &self.spec.case_id,
            &self.state,
            &self.spec.goal,
            &self.closed,
            &self.trace,
            &self.domain.index,
            &self.domain.schema,
            self.turn,
        )
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let closed: BTreeSet<String> = self.closed.keys().cloned().collect();
        let gaps = if self.eff.policy == Policy::None {
            Vec::new()
        } else {
            derive_gaps(&self.state, &self.spec.goal, &self.smoothed, &closed)
        };
        SessionSnapshot {
            case_id: self.spec.case_id.clone(),
            turn: self.turn,
            status: self.status,
            state: self.state.clone(),
            belief: self.smoothed.clone(),
            gaps,
            closed_risks: self.closed.clone(),
            report: self.report(),
        }
    }

    /// Closes the session and appends the final report record.
    pub fn finish(&mut self) -> Result<EmrReport, SessionError> {
        let report = self.report();
        if self.status == SessionStatus::Open {
            self.status = SessionStatus::Concluded;
        }
        let closed: BTreeSet<String> = self.closed.keys().cloned().collect();
        let delta = ReportDelta {
            changed_slots: Vec::new(),
            closed_risks: Vec::new(),
            goal_satisfied: self.spec.goal.satisfied(&self.state, &closed),
            final_report: Some(report.clone()),
        };
        let seq = self.trace.next_seq();
        self.trace.append(ReplayRecord::report_delta(seq, self.turn, &delta))?;
        Ok(report)
    }

    pub fn abort(&mut self) {
        self.status = SessionStatus::Aborted;
    }
}
