//! Gap-driven action planning.
//!
//! The current state is compared with a [`GoalState`] to produce typed
//! [`GapSignal`]s. Each gap yields candidate actions, which are scored by a
//! Monte Carlo estimate of expected information gain with a variance
//! penalty, then selected with a hard risk-closing override and optional
//! margin-gated switching.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{entropy, HypothesisSet};
use crate::extract::{CurrentState, FieldKind, FieldSchema, Polarity};
use crate::retrieval::{Anchor, ObjectKind, RetrievalIndex, Retrieved};
use crate::stream::Role;

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("action {0:?} has no observation model")]
    NoObservationModel(String),
    #[error("no candidate actions")]
    EmptyCandidates,
    #[error("trace and gold disagree at turn {0}")]
    TurnMisalignment(u32),
    #[error("invalid goal: {0}")]
    InvalidGoal(String),
    #[error("invalid observation model for {target:?}: {reason}")]
    InvalidObservationModel { target: String, reason: String },
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Ask,
    Verify,
    RecommendExam,
    RiskClose,
    Conclude,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Ask => "ask",
            ActionKind::Verify => "verify",
            ActionKind::RecommendExam => "recommend_exam",
            ActionKind::RiskClose => "risk_close",
            ActionKind::Conclude => "conclude",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerCondition {
    pub field_id: String,
    pub value: String,
    #[serde(default = "asserted")]
    pub polarity: Polarity,
}

fn asserted() -> Polarity {
    Polarity::Asserted
}

fn risk_close() -> ActionKind {
    ActionKind::RiskClose
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskCheck {
    pub risk_id: String,
    /// All conditions must hold for the check to trigger.
    pub trigger: Vec<TriggerCondition>,
    #[serde(default = "risk_close")]
    pub closing_kind: ActionKind,
    pub prompt: String,
}

impl RiskCheck {
    pub fn triggered(&self, state: &CurrentState) -> bool {
        !self.trigger.is_empty() && self.trigger.iter().all(|c| state.holds(&c.field_id, &c.value, c.polarity))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalState {
    pub required_slots: BTreeSet<String>,
    /// Fields worth verifying when the belief is not yet confident, in order.
    #[serde(default)]
    pub discriminating_slots: Vec<String>,
    #[serde(default)]
    pub risk_checks: Vec<RiskCheck>,
    pub confidence_floor: f64,
}

impl GoalState {
    pub fn validate(&self, schema: &FieldSchema) -> Result<(), PlannerError> {
        for f in self.required_slots.iter().chain(&self.discriminating_slots) {
            if schema.field(f).is_none() {
                return Err(PlannerError::InvalidGoal(format!("unknown field {f:?}")));
            }
        }
        let mut ids = BTreeSet::new();
        for r in &self.risk_checks {
            if !ids.insert(r.risk_id.as_str()) {
                return Err(PlannerError::InvalidGoal(format!("duplicate risk {:?}", r.risk_id)));
            }
            if r.closing_kind != ActionKind::RiskClose {
                return Err(PlannerError::InvalidGoal(format!("risk {:?} must close with risk_close", r.risk_id)));
            }
            if let Some(c) = r.trigger.iter().find(|c| schema.field(&c.field_id).is_none()) {
                return Err(PlannerError::InvalidGoal(format!(
                    "risk {:?} triggers on unknown field {:?}",
                    r.risk_id, c.field_id
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(PlannerError::InvalidGoal("confidence_floor outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn risk(&self, risk_id: &str) -> Option<&RiskCheck> {
        self.risk_checks.iter().find(|r| r.risk_id == risk_id)
    }

    /// Required slots filled and every triggered risk closed.
    pub fn satisfied(&self, state: &CurrentState, closed: &BTreeSet<String>) -> bool {
        self.required_slots.iter().all(|f| state.is_filled(f))
            && self.risk_checks.iter().all(|r| !r.triggered(state) || closed.contains(&r.risk_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapKind {
    MissingSlot,
    UnresolvedRisk,
    LowConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSignal {
    pub kind: GapKind,
    pub target: String,
    pub priority: f64,
}

pub fn derive_gaps(
    state: &CurrentState,
    goal: &GoalState,
    belief: &[f64],
    closed_risks: &BTreeSet<String>,
) -> Vec<GapSignal> {
    let mut gaps = Vec::new();
    for r in &goal.risk_checks {
        if r.triggered(state) && !closed_risks.contains(&r.risk_id) {
            gaps.push(GapSignal { kind: GapKind::UnresolvedRisk, target: r.risk_id.clone(), priority: 3.0 });
        }
    }
    for f in &goal.required_slots {
        if !state.is_filled(f) {
            gaps.push(GapSignal { kind: GapKind::MissingSlot, target: f.clone(), priority: 2.0 });
        }
    }
    let max = belief.iter().copied().fold(0.0, f64::max);
    if max < goal.confidence_floor {
        let target =
            goal.discriminating_slots.iter().find(|f| !state.is_filled(f) && !goal.required_slots.contains(*f));
        if let Some(t) = target {
            gaps.push(GapSignal { kind: GapKind::LowConfidence, target: t.clone(), priority: 1.0 });
        }
    }
    gaps.sort_by(|a, b| b.priority.total_cmp(&a.priority).then_with(|| a.target.cmp(&b.target)));
    gaps
}

/// One simulated answer and its probability under each hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub id: String,
    pub text: String,
    #[serde(default = "patient")]
    pub role: Role,
    pub likelihood: Vec<f64>,
}

fn patient() -> Role {
    Role::Patient
}

/// Answer distribution per hypothesis. `answers[o].likelihood[h]` is
/// P(o | h); each hypothesis column sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub answers: Vec<Answer>,
}

impl ObservationModel {
    /// A single "don't know" answer under every hypothesis.
    pub fn uninformative(n_hypotheses: usize) -> Self {
        Self {
            answers: vec![Answer {
                id: "unsure".into(),
                text: "i am not sure".into(),
                role: Role::Patient,
                likelihood: vec![1.0; n_hypotheses],
            }],
        }
    }

    pub fn validate(&self, target: &str, n_hypotheses: usize) -> Result<(), PlannerError> {
        let bad = |reason: String| Err(PlannerError::InvalidObservationModel { target: target.to_string(), reason });
        if self.answers.is_empty() {
            return bad("no answers".into());
        }
        for a in &self.answers {
            if a.likelihood.len() != n_hypotheses {
                return bad(format!("answer {:?} has {} likelihoods", a.id, a.likelihood.len()));
            }
            if a.likelihood.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("answer {:?} has a likelihood outside [0,1]", a.id));
            }
        }
        for h in 0..n_hypotheses {
            let s: f64 = self.answers.iter().map(|a| a.likelihood[h]).sum();
            if (s - 1.0).abs() > 1e-6 {
                return bad(format!("likelihoods for hypothesis {h} sum to {s}"));
            }
        }
        Ok(())
    }

    /// Samples an answer index given the true hypothesis.
    pub fn sample(&self, hypothesis: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, a) in self.answers.iter().enumerate() {
            acc += a.likelihood[hypothesis];
            if u < acc {
                return i;
            }
        }
        self.answers.len() - 1
    }
}

/// Observation models as stored in case files: likelihoods keyed by
/// hypothesis id, models keyed by action target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpec {
    pub id: String,
    pub text: String,
    #[serde(default = "patient")]
    pub role: Role,
    pub likelihood: BTreeMap<String, f64>,
}

pub fn resolve_models(
    specs: &BTreeMap<String, Vec<AnswerSpec>>,
    hypotheses: &HypothesisSet,
) -> Result<BTreeMap<String, ObservationModel>, PlannerError> {
    let mut out = BTreeMap::new();
    for (target, answers) in specs {
        let mut resolved = Vec::with_capacity(answers.len());
        for a in answers {
            if let Some(unknown) = a.likelihood.keys().find(|h| hypotheses.index_of(h).is_none()) {
                return Err(PlannerError::InvalidObservationModel {
                    target: target.clone(),
                    reason: format!("unknown hypothesis {unknown:?}"),
                });
            }
            let likelihood = hypotheses.ids().map(|h| a.likelihood.get(h).copied().unwrap_or(0.0)).collect();
            resolved.push(Answer { id: a.id.clone(), text: a.text.clone(), role: a.role, likelihood });
        }
        let model = ObservationModel { answers: resolved };
        model.validate(target, hypotheses.len())?;
        out.insert(target.clone(), model);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAction {
    pub action_id: String,
    pub kind: ActionKind,
    pub target: String,
    pub prompt_text: String,
    #[serde(default)]
    pub anchors: Vec<Anchor>,
    #[serde(skip)]
    pub observation_model: Option<ObservationModel>,
}

impl CandidateAction {
    pub fn new(kind: ActionKind, target: &str, prompt_text: String) -> Self {
        Self {
            action_id: format!("{}:{}", kind.as_str(), target),
            kind,
            target: target.to_string(),
            prompt_text,
            anchors: Vec::new(),
            observation_model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Variance penalty on the simulated posterior entropies.
    pub eta: f64,
    pub mc_samples: usize,
    pub rng_seed: u64,
    pub conservative: bool,
    pub conservative_margin: f64,
    pub max_prompts_per_turn: usize,
    /// An ask/verify/exam/risk action is withdrawn after this many issues.
    pub max_asks_per_target: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            mc_samples: 64,
            rng_seed: 0,
            conservative: true,
            conservative_margin: 0.05,
            max_prompts_per_turn: 8,
            max_asks_per_target: 2,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::InvalidConfig(m.to_string()));
        if !(self.eta >= 0.0) {
            return bad("eta must be non-negative");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if !(self.conservative_margin >= 0.0) {
            return bad("conservative_margin must be non-negative");
        }
        if self.max_prompts_per_turn == 0 {
            return bad("max_prompts_per_turn must be at least 1");
        }
        if self.max_asks_per_target == 0 {
            return bad("max_asks_per_target must be at least 1");
        }
        Ok(())
    }
}

/// Everything candidate generation reads besides the gaps.
pub struct CandidateContext<'a> {
    pub schema: &'a FieldSchema,
    pub goal: &'a GoalState,
    pub state: &'a CurrentState,
    pub index: &'a RetrievalIndex,
    pub retrieved: &'a [Retrieved],
    pub models: &'a BTreeMap<String, ObservationModel>,
    pub n_hypotheses: usize,
    /// Times each action id has been issued so far.
    pub issued: &'a BTreeMap<String, u32>,
}

fn field_prompt(schema: &FieldSchema, field_id: &str) -> String {
    match schema.field(field_id) {
        Some(f) if !f.prompt.is_empty() => f.prompt.clone(),
        _ => format!("can you tell me about {}", field_id.replace('_', " ")),
    }
}

pub fn generate_candidates(
    gaps: &[GapSignal],
    ctx: &CandidateContext<'_>,
    cfg: &PlannerConfig,
) -> Vec<CandidateAction> {
    let mut out: Vec<CandidateAction> = Vec::new();
    let exhausted = |a: &CandidateAction| ctx.issued.get(&a.action_id).copied().unwrap_or(0) >= cfg.max_asks_per_target;
    let with_model = |mut a: CandidateAction| {
        a.observation_model = Some(
            ctx.models.get(&a.target).cloned().unwrap_or_else(|| ObservationModel::uninformative(ctx.n_hypotheses)),
        );
        a
    };
    for g in gaps {
        let action = match g.kind {
            GapKind::UnresolvedRisk => {
                let prompt = ctx.goal.risk(&g.target).map(|r| r.prompt.clone()).unwrap_or_default();
                CandidateAction::new(ActionKind::RiskClose, &g.target, prompt)
            }
            GapKind::MissingSlot => {
                let is_exam = ctx.schema.field(&g.target).is_some_and(|f| f.kind == FieldKind::Exam);
                let kind = if is_exam { ActionKind::RecommendExam } else { ActionKind::Ask };
                CandidateAction::new(kind, &g.target, field_prompt(ctx.schema, &g.target))
            }
            GapKind::LowConfidence => {
                CandidateAction::new(ActionKind::Verify, &g.target, field_prompt(ctx.schema, &g.target))
            }
        };
        if !exhausted(&action) && !out.iter().any(|a| a.action_id == action.action_id) {
            out.push(with_model(action));
        }
    }
    let gap_actions = out.len();
    if !gaps.is_empty() {
        for r in ctx.retrieved {
            let Some(obj) = ctx.index.object(&r.object_id) else { continue };
            if obj.kind != ObjectKind::ExamUnit {
                continue;
            }
            let Some(field) = obj.tag_value("field") else { continue };
            if ctx.schema.field(field).is_none_or(|f| f.kind != FieldKind::Exam) || ctx.state.is_filled(field) {
                continue;
            }
            let mut action = CandidateAction::new(ActionKind::RecommendExam, field, field_prompt(ctx.schema, field));
            if let Some(existing) = out.iter_mut().find(|a| a.action_id == action.action_id) {
                if !existing.anchors.contains(&obj.anchor) {
                    existing.anchors.push(obj.anchor.clone());
                }
                continue;
            }
            action.anchors.push(obj.anchor.clone());
            if !exhausted(&action) {
                out.push(with_model(action));
            }
        }
    }
    if gaps.is_empty() || gap_actions == 0 {
        out.push(with_model(CandidateAction::new(
            ActionKind::Conclude,
            "session",
            "thank you, that is all i need".into(),
        )));
    }
    if out.len() > cfg.max_prompts_per_turn {
        let mut kept = 0;
        out.retain(|a| {
            let keep =
                a.kind == ActionKind::RiskClose || a.kind == ActionKind::Conclude || kept < cfg.max_prompts_per_turn;
            if keep && a.kind != ActionKind::RiskClose && a.kind != ActionKind::Conclude {
                kept += 1;
            }
            keep
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    pub eig: f64,
    pub h0: f64,
    pub h_bar: f64,
    pub v: f64,
    pub seed: u64,
    /// Random numbers consumed.
    pub draws: u64,
}

fn posterior(prior: &[f64], lik: &[f64]) -> Vec<f64> {
    let mut post: Vec<f64> = prior.iter().zip(lik).map(|(p, l)| p * l).collect();
    let z: f64 = post.iter().sum();
    if z > 0.0 {
        for p in post.iter_mut() {
            *p /= z;
        }
        post
    } else {
        prior.to_vec()
    }
}

fn sample_index(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn estimate_eig(
    action: &CandidateAction,
    belief: &[f64],
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<EigEstimate, PlannerError> {
    let model =
        action.observation_model.as_ref().ok_or_else(|| PlannerError::NoObservationModel(action.action_id.clone()))?;
    let h0 = entropy(belief);
    let answer_entropy: Vec<f64> = model.answers.iter().map(|a| entropy(&posterior(belief, &a.likelihood))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.mc_samples.max(1);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let h = sample_index(belief.iter().copied(), rng.random::<f64>());
        let o = sample_index(model.answers.iter().map(|a| a.likelihood[h]), rng.random::<f64>());
        samples.push(answer_entropy[o]);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let v = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    // Expected posterior entropy never exceeds H0.
    let h_bar = mean.min(h0);
    Ok(EigEstimate { eig: h0 - h_bar - cfg.eta * v, h0, h_bar, v, seed, draws: 2 * n as u64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub action: CandidateAction,
    pub estimate: EigEstimate,
}

fn best_by_score<'a>(cands: impl Iterator<Item = (usize, &'a ScoredCandidate)>) -> Option<usize> {
    cands
        .max_by(|(_, a), (_, b)| {
            a.estimate.eig.total_cmp(&b.estimate.eig).then_with(|| b.action.action_id.cmp(&a.action.action_id))
        })
        .map(|(i, _)| i)
}

/// Index of the selected candidate.
pub fn select_action(
    candidates: &[ScoredCandidate],
    previous: Option<&str>,
    conservative: bool,
    margin: f64,
) -> Result<usize, PlannerError> {
    if candidates.is_empty() {
        return Err(PlannerError::EmptyCandidates);
    }
    let risk = best_by_score(candidates.iter().enumerate().filter(|(_, c)| c.action.kind == ActionKind::RiskClose));
    if let Some(i) = risk {
        return Ok(i);
    }
    let best = best_by_score(candidates.iter().enumerate()).expect("nonempty");
    if conservative {
        if let Some(p) = previous.and_then(|id| candidates.iter().position(|c| c.action.action_id == id)) {
            if p != best && candidates[best].estimate.eig < candidates[p].estimate.eig + margin {
                return Ok(p);
            }
        }
    }
    Ok(best)
}

/// Gold next-action expectation for one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferredAction {
    pub turn: u32,
    pub kinds: BTreeSet<ActionKind>,
    #[serde(default)]
    pub risk_due: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedAction {
    pub turn: u32,
    pub kind: ActionKind,
    pub target: String,
}

/// Turns whose selected action misses the preferred kinds or a due risk
/// closure. Each turn counts at most once.
pub fn count_wrong_actions(selected: &[SelectedAction], gold: &[PreferredAction]) -> Result<usize, PlannerError> {
    let by_turn: BTreeMap<u32, &SelectedAction> = selected.iter().map(|s| (s.turn, s)).collect();
    let mut wrong = 0;
    for g in gold {
        let s = by_turn.get(&g.turn).ok_or(PlannerError::TurnMisalignment(g.turn))?;
        let kind_miss = !g.kinds.contains(&s.kind);
        let risk_miss = g.risk_due.as_ref().is_some_and(|r| !(s.kind == ActionKind::RiskClose && &s.target == r));
        if kind_miss || risk_miss {
            wrong += 1;
        }
    }
    Ok(wrong)
}
