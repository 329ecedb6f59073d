//! Runs pilot cases under baseline configurations and computes the
//! end-to-end metric layers and ablation tables.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{volatility, StabilizerStage};
use crate::boundary::{boundary_positions, boundary_prf, PunctuationAblation};
use crate::case::{CaseError, PilotCase, Suite};
use crate::config::{Baseline, Policy, RunConfig};
use crate::extract::{match_events, CurrentState, MatchCounts};
use crate::metrics::{CountedRate, Prf};
use crate::planner::{count_wrong_actions, ActionKind, ObservationModel, SelectedAction};
use crate::retrieval::eval::{evaluate, ndcg_at_k, run_queries, QrelEntry, Qrels, RankedResults, RetrievalMetrics};
use crate::session::{Domain, Session, SessionError, StageTiming, TurnSummary, TurnUpdate};
use crate::stream::{Role, Synthesizer, TokenOrigin};
use crate::trace::{EmrReport, TraceLog};
use crate::util::mix_seed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("case {case_id}: {message}")]
    Metric { case_id: String, message: String },
}

/// A planner prompt put to the simulated patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub turn: u32,
    pub action_id: String,
    pub kind: ActionKind,
    pub target: String,
    pub redundant: bool,
    pub answer_id: String,
}

#[derive(Debug, Clone)]
pub struct CaseRun {
    pub case_id: String,
    pub baseline: Baseline,
    pub seed: u64,
    pub policy: Policy,
    pub updates: Vec<TurnUpdate>,
    pub summaries: Vec<TurnSummary>,
    /// Token origins of each scripted turn's input.
    pub scripted_origins: Vec<Vec<TokenOrigin>>,
    pub prompts: Vec<PromptRecord>,
    pub final_state: CurrentState,
    pub closed_risks: BTreeMap<String, String>,
    pub concluded: bool,
    pub turn_cap_reached: bool,
    pub report: EmrReport,
    pub trace: TraceLog,
    pub timings: Vec<StageTiming>,
    pub prior: Vec<f64>,
}

impl CaseRun {
    pub fn scripted_turns(&self) -> usize {
        self.scripted_origins.len()
    }

    pub fn scripted_updates(&self) -> &[TurnUpdate] {
        &self.updates[..self.scripted_turns().min(self.updates.len())]
    }
}

/// Drives one case: scripted turns first, then the simulated patient
/// answers planner prompts until `conclude` or the turn cap.
pub fn run_case(case: &PilotCase, domain: &Arc<Domain>, cfg: &RunConfig, seed: u64) -> Result<CaseRun, HarnessError> {
    let spec = case.session_spec(domain)?;
    let true_h =
        domain.hypotheses.index_of(&case.true_hypothesis).ok_or_else(|| case.invalid("unknown true hypothesis"))?;
    let mut session = Session::new(Arc::clone(domain), spec, cfg.clone(), seed)?;
    let prior = session.belief().to_vec();
    let (tokens, origins) = Synthesizer::new(seed).run(&case.script).map_err(SessionError::from)?;

    let mut scripted_origins = Vec::new();
    for range in case.exchanges() {
        let idx: Vec<usize> = (0..tokens.len()).filter(|&i| range.contains(&origins[i].turn)).collect();
        if idx.is_empty() {
            continue;
        }
        let input = crate::session::TurnInput {
            turn: session.turn() + 1,
            tokens: idx.iter().map(|&i| tokens[i].clone()).collect(),
            answering: None,
        };
        scripted_origins.push(idx.iter().map(|&i| origins[i]).collect());
        session.push_turn(input)?;
    }

    let cap = cfg.harness.turn_cap;
    let mut prompts = Vec::new();
    let mut concluded = false;
    while session.turn() < cap {
        let Some(sel) = session.updates().last().and_then(|u| u.selected.clone()) else { break };
        if sel.action.kind == ActionKind::Conclude {
            concluded = true;
            break;
        }
        let model = session
            .spec()
            .observation_models
            .get(&sel.action.target)
            .cloned()
            .unwrap_or_else(|| ObservationModel::uninformative(domain.hypotheses.len()));
        let asked_before = session.issued().get(&sel.action.action_id).copied().unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, asked_before, &sel.action.action_id));
        let answer = &model.answers[model.sample(true_h, &mut rng)];
        prompts.push(PromptRecord {
            turn: session.turn() + 1,
            action_id: sel.action.action_id.clone(),
            kind: sel.action.kind,
            target: sel.action.target.clone(),
            redundant: sel.target_satisfied,
            answer_id: answer.id.clone(),
        });
        let input = session.text_input(
            &[(Role::Doctor, sel.action.prompt_text.as_str()), (answer.role, answer.text.as_str())],
            Some(sel.action.action_id.clone()),
        )?;
        session.push_turn(input)?;
    }
    if !concluded {
        concluded = session
            .updates()
            .last()
            .and_then(|u| u.selected.as_ref())
            .is_some_and(|s| s.action.kind == ActionKind::Conclude);
    }
    let policy = session.effective().policy;
    let turn_cap_reached = policy != Policy::None && !concluded && session.turn() >= cap;
    if turn_cap_reached {
        tracing::info!(case = %case.case_id, cap, "turn cap reached");
    }
    let report = session.finish()?;
    Ok(CaseRun {
        case_id: case.case_id.clone(),
        baseline: cfg.harness.baseline,
        seed,
        policy,
        updates: session.updates().to_vec(),
        summaries: session.summaries().to_vec(),
        scripted_origins,
        prompts,
        final_state: session.state().clone(),
        closed_risks: session.closed_risks().clone(),
        concluded,
        turn_cap_reached,
        report,
        trace: session.trace().clone(),
        timings: session.timings().to_vec(),
        prior,
    })
}

/// Raw counts behind the end-to-end rates of one case run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub covered_items: usize,
    pub gold_items: usize,
    pub structural_hits: usize,
    pub structural_slots: usize,
    pub risks_closed: usize,
    pub gold_risks: usize,
    pub redundant_prompts: usize,
    pub prompts: usize,
    pub t_goal: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TGoal {
    /// Mean over runs that reached the goal; `None` when none did.
    pub mean: Option<f64>,
    pub reached: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEnd {
    pub coverage: CountedRate,
    pub structural_completeness: CountedRate,
    pub risk_recall: CountedRate,
    pub redundancy: CountedRate,
    pub t_goal: TGoal,
}

/// Pools raw counts over runs; every rate is its count ratio.
pub fn end_to_end_metrics(outcomes: &[CaseOutcome]) -> EndToEnd {
    let sum = |f: fn(&CaseOutcome) -> usize| outcomes.iter().map(f).sum::<usize>();
    let reached: Vec<u32> = outcomes.iter().filter_map(|o| o.t_goal).collect();
    EndToEnd {
        coverage: CountedRate::new(sum(|o| o.covered_items), sum(|o| o.gold_items)),
        structural_completeness: CountedRate::new(sum(|o| o.structural_hits), sum(|o| o.structural_slots)),
        risk_recall: CountedRate::new(sum(|o| o.risks_closed), sum(|o| o.gold_risks)),
        redundancy: CountedRate::new(sum(|o| o.redundant_prompts), sum(|o| o.prompts)),
        t_goal: TGoal {
            mean: (!reached.is_empty())
                .then(|| reached.iter().map(|&t| f64::from(t)).sum::<f64>() / reached.len() as f64),
            reached: reached.len(),
            runs: outcomes.len(),
        },
    }
}

pub fn case_outcome(case: &PilotCase, run: &CaseRun) -> CaseOutcome {
    let state = &run.final_state;
    let covered = case.gold_items.iter().filter(|g| state.holds(&g.field_id, &g.value, g.polarity)).count();
    let gold_for: BTreeMap<&str, _> = case.gold_items.iter().map(|g| (g.field_id.as_str(), g)).collect();
    let structural_hits = case
        .goal
        .required_slots
        .iter()
        .filter(|s| match gold_for.get(s.as_str()) {
            Some(g) => state.holds(&g.field_id, &g.value, g.polarity),
            None => state.is_filled(s),
        })
        .count();
    let t_goal = match run.policy {
        Policy::None => None,
        _ => run.updates.iter().find(|u| u.report_delta.goal_satisfied).map(|u| u.turn),
    };
    CaseOutcome {
        covered_items: covered,
        gold_items: case.gold_items.len(),
        structural_hits,
        structural_slots: case.goal.required_slots.len(),
        risks_closed: case.gold_risks.iter().filter(|r| run.closed_risks.contains_key(*r)).count(),
        gold_risks: case.gold_risks.len(),
        redundant_prompts: run.prompts.iter().filter(|p| p.redundant).count(),
        prompts: run.prompts.len(),
        t_goal,
    }
}

/// Belief-layer and action-layer numbers over the scripted turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub extraction: MatchCounts,
    pub volatility: f64,
    /// Mean variance term of the selected actions; `None` without a planner.
    pub eig_variance: Option<f64>,
    pub wrong_actions: Option<usize>,
    pub scored_turns: usize,
    pub action_utility_placeholder: Option<f64>,
    pub boundary: MatchCounts,
    pub session_ndcg: f64,
}

pub fn turn_metrics(
    case: &PilotCase,
    run: &CaseRun,
    qrels: &Qrels,
    k: usize,
    n_hypotheses: usize,
) -> Result<TurnMetrics, HarnessError> {
    let scripted = run.scripted_updates();
    let err = |message: String| HarnessError::Metric { case_id: case.case_id.clone(), message };

    let pred: Vec<_> = scripted.iter().flat_map(|u| u.events.iter().cloned()).collect();
    let extraction = match_events(&pred, &case.gold_state_events());

    let mut beliefs = vec![run.prior.clone()];
    beliefs.extend(scripted.iter().map(|u| u.belief.smoothed.clone()));
    let volatility = volatility(&beliefs).map_err(|e| err(e.to_string()))?;

    let selected: Vec<_> = scripted.iter().filter_map(|u| u.selected.as_ref().map(|s| (u.turn, s))).collect();
    let (eig_variance, wrong_actions, action_utility_placeholder) = if run.policy == Policy::None {
        (None, None, None)
    } else {
        let n = selected.len().max(1) as f64;
        let v = selected.iter().map(|(_, s)| s.estimate.v).sum::<f64>() / n;
        let sel: Vec<SelectedAction> = selected
            .iter()
            .map(|(t, s)| SelectedAction { turn: *t, kind: s.action.kind, target: s.action.target.clone() })
            .collect();
        let wrong = count_wrong_actions(&sel, &case.preferred_actions).map_err(|e| err(e.to_string()))?;
        let scale = (n_hypotheses as f64).log2();
        let util = selected.iter().map(|(_, s)| s.estimate.eig / scale).sum::<f64>() / n;
        (Some(v), Some(wrong), Some(util))
    };

    let mut boundary = MatchCounts::default();
    for (u, origins) in scripted.iter().zip(&run.scripted_origins) {
        let p: Prf = boundary_prf(&boundary_positions(&u.utterances), &case.gold_positions(origins), 0);
        boundary.tp += p.tp;
        boundary.fp += p.fp;
        boundary.fn_ += p.fn_;
    }

    let relevant: BTreeSet<String> = case
        .query_ids
        .iter()
        .filter_map(|q| qrels.entries.get(q))
        .flat_map(|e| e.relevant_objects.iter().cloned())
        .collect();
    let mut turn_qrels = Qrels::default();
    let mut ranked = RankedResults::new();
    for u in scripted.iter().filter(|u| !u.retrieval.results.is_empty()) {
        let id = format!("{}#{}", case.case_id, u.turn);
        turn_qrels.entries.insert(
            id.clone(),
            QrelEntry {
                query_id: id.clone(),
                query: u.retrieval.query.clone(),
                relevant_objects: relevant.clone(),
                relevant_paths: vec![],
            },
        );
        ranked.insert(id, u.retrieval.results.iter().map(|r| r.object_id.clone()).collect());
    }
    let session_ndcg = ndcg_at_k(&ranked, &turn_qrels, k).map_err(|e| err(e.to_string()))?;

    Ok(TurnMetrics {
        extraction,
        volatility,
        eig_variance,
        wrong_actions,
        scored_turns: case.preferred_actions.len(),
        action_utility_placeholder,
        boundary,
        session_ndcg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case_id: String,
    pub seed: u64,
    pub outcome: CaseOutcome,
    pub turns: TurnMetrics,
    pub prompts: usize,
    pub concluded: bool,
    pub turn_cap_reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub baseline: Baseline,
    pub seeds: Vec<u64>,
    pub end_to_end: EndToEnd,
    pub extraction: Prf,
    pub retrieval: RetrievalMetrics,
    pub volatility: f64,
    pub eig_variance: Option<f64>,
    pub wrong_actions: Option<usize>,
    pub scored_turns: usize,
    /// Mean selected information gain over log2 of the hypothesis count.
    /// Non-normative.
    pub action_utility_placeholder: Option<f64>,
    pub runs: Vec<RunRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs every case under every seed for one configuration.
pub fn run_suite(suite: &Suite, cfg: &RunConfig) -> Result<Vec<(usize, CaseRun)>, HarnessError> {
    let mut out = Vec::new();
    for (i, case) in suite.cases.iter().enumerate() {
        for &seed in &cfg.harness.seeds {
            out.push((i, run_case(case, &suite.domain, cfg, seed)?));
        }
    }
    Ok(out)
}

pub fn evaluate_baseline(suite: &Suite, cfg: &RunConfig) -> Result<MetricsReport, HarnessError> {
    let runs = run_suite(suite, cfg)?;
    let k = cfg.harness.metric_k;
    let n_h = suite.domain.hypotheses.len();
    let mut records = Vec::with_capacity(runs.len());
    for (i, run) in &runs {
        let case = &suite.cases[*i];
        records.push(RunRecord {
            case_id: case.case_id.clone(),
            seed: run.seed,
            outcome: case_outcome(case, run),
            turns: turn_metrics(case, run, &suite.qrels, k, n_h)?,
            prompts: run.prompts.len(),
            concluded: run.concluded,
            turn_cap_reached: run.turn_cap_reached,
        });
    }
    let outcomes: Vec<CaseOutcome> = records.iter().map(|r| r.outcome).collect();
    let counts = records.iter().fold(MatchCounts::default(), |mut acc, r| {
        acc.tp += r.turns.extraction.tp;
        acc.fp += r.turns.extraction.fp;
        acc.fn_ += r.turns.extraction.fn_;
        acc
    });

    let ids: BTreeSet<String> = suite.cases.iter().flat_map(|c| c.query_ids.iter().cloned()).collect();
    let qrels = suite.qrels.subset(&ids);
    let index = if suite.domain.index.config == cfg.retrieval {
        suite.domain.index.clone()
    } else {
        suite
            .domain
            .with_retrieval(cfg.retrieval)
            .map_err(|e| HarnessError::Metric { case_id: "*".into(), message: e.to_string() })?
            .index
    };
    let metric_err =
        |e: crate::retrieval::RetrievalError| HarnessError::Metric { case_id: "*".into(), message: e.to_string() };
    let ranked = run_queries(&index, &qrels, k, cfg.effective().retrieval_mode).map_err(metric_err)?;
    let retrieval = evaluate(&ranked, &qrels, &index, k).map_err(metric_err)?;

    let planned = cfg.effective().policy != Policy::None;
    Ok(MetricsReport {
        baseline: cfg.harness.baseline,
        seeds: cfg.harness.seeds.clone(),
        end_to_end: end_to_end_metrics(&outcomes),
        extraction: Prf::from_counts(counts.tp, counts.fp, counts.fn_),
        retrieval,
        volatility: mean(records.iter().map(|r| r.turns.volatility)),
        eig_variance: planned.then(|| mean(records.iter().filter_map(|r| r.turns.eig_variance))),
        wrong_actions: planned.then(|| records.iter().filter_map(|r| r.turns.wrong_actions).sum()),
        scored_turns: records.iter().map(|r| r.turns.scored_turns).sum(),
        action_utility_placeholder: planned
            .then(|| mean(records.iter().filter_map(|r| r.turns.action_utility_placeholder))),
        runs: records,
    })
}

pub fn evaluate_baselines(
    suite: &Suite,
    cfg: &RunConfig,
    baselines: &[Baseline],
) -> Result<Vec<MetricsReport>, HarnessError> {
    baselines.iter().map(|b| evaluate_baseline(suite, &cfg.with_baseline(*b))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefRow {
    pub stage: StabilizerStage,
    pub volatility: f64,
    pub eig_variance: f64,
    pub wrong_actions: usize,
    pub scored_turns: usize,
}

/// One row per stage, full system otherwise, same cases and seeds.
pub fn ablate_belief(
    suite: &Suite,
    base: &RunConfig,
    stages: &[StabilizerStage],
) -> Result<Vec<BeliefRow>, HarnessError> {
    stages
        .iter()
        .map(|&stage| {
            let mut cfg = base.with_baseline(Baseline::Full);
            cfg.harness.stage = stage;
            let r = evaluate_baseline(suite, &cfg)?;
            Ok(BeliefRow {
                stage,
                volatility: r.volatility,
                eig_variance: r.eig_variance.unwrap_or(0.0),
                wrong_actions: r.wrong_actions.unwrap_or(0),
                scored_turns: r.scored_turns,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PunctuationRow {
    pub setting: PunctuationAblation,
    pub boundary: Prf,
    pub state: Prf,
    /// Mean nDCG of per-turn retrieval against the case's relevant objects.
    pub retrieval_ndcg: f64,
    pub action_accuracy: CountedRate,
}

pub fn ablate_punctuation(
    suite: &Suite,
    base: &RunConfig,
    settings: &[PunctuationAblation],
) -> Result<Vec<PunctuationRow>, HarnessError> {
    settings
        .iter()
        .map(|&setting| {
            let mut cfg = base.with_baseline(Baseline::Full);
            cfg.harness.punctuation = setting;
            let r = evaluate_baseline(suite, &cfg)?;
            let sum = |f: fn(&TurnMetrics) -> MatchCounts| {
                r.runs.iter().fold(MatchCounts::default(), |mut acc, x| {
                    let c = f(&x.turns);
                    acc.tp += c.tp;
                    acc.fp += c.fp;
                    acc.fn_ += c.fn_;
                    acc
                })
            };
            let b = sum(|t| t.boundary);
            let s = sum(|t| t.extraction);
            let wrong = r.wrong_actions.unwrap_or(0);
            Ok(PunctuationRow {
                setting,
                boundary: Prf::from_counts(b.tp, b.fp, b.fn_),
                state: Prf::from_counts(s.tp, s.fp, s.fn_),
                retrieval_ndcg: mean(r.runs.iter().map(|x| x.turns.session_ndcg)),
                action_accuracy: CountedRate::new(r.scored_turns - wrong, r.scored_turns),
            })
        })
        .collect()
}
