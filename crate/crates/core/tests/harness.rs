use std::path::Path;

use consult_core::belief::StabilizerStage;
use consult_core::boundary::PunctuationAblation;
use consult_core::case::{CaseError, GoldBoundary, PilotCase, Suite};
use consult_core::config::{Baseline, RunConfig};
use consult_core::harness::{
    ablate_belief, ablate_punctuation, case_outcome, end_to_end_metrics, evaluate_baseline, run_case, CaseOutcome,
};
use consult_core::retrieval::eval::{evaluate, run_queries};
use consult_core::retrieval::RetrievalConfig;
use consult_core::stream::{Role, TokenOrigin};
use consult_core::trace::verify_replay;

fn suite() -> Suite {
    Suite::bundled(RetrievalConfig::default()).unwrap()
}

fn one_seed() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.harness.seeds = vec![7];
    cfg
}

#[test]
fn paper_counts_give_paper_rates() {
    let o = CaseOutcome {
        covered_items: 150,
        gold_items: 180,
        structural_hits: 114,
        structural_slots: 140,
        risks_closed: 48,
        gold_risks: 60,
        redundant_prompts: 15,
        prompts: 95,
        t_goal: None,
    };
    let e = end_to_end_metrics(&[o]);
    assert!((e.coverage.rate - 0.833).abs() <= 5e-4);
    assert!((e.structural_completeness.rate - 0.814).abs() <= 5e-4);
    assert!((e.risk_recall.rate - 0.800).abs() <= 5e-4);
    assert!((e.redundancy.rate - 0.158).abs() <= 5e-4);
    assert_eq!((e.coverage.hits, e.coverage.total), (150, 180));
    assert_eq!(e.t_goal.mean, None);
}

#[test]
fn pooled_counts_are_summed_before_dividing() {
    let a = CaseOutcome { covered_items: 1, gold_items: 1, prompts: 3, redundant_prompts: 3, ..Default::default() };
    let b = CaseOutcome { covered_items: 0, gold_items: 3, prompts: 1, t_goal: Some(4), ..Default::default() };
    let e = end_to_end_metrics(&[a, b]);
    assert_eq!(e.coverage.rate, 0.25);
    assert_eq!(e.redundancy.rate, 0.75);
    assert_eq!((e.t_goal.mean, e.t_goal.reached, e.t_goal.runs), (Some(4.0), 1, 2));
}

#[test]
fn perfect_outcome_scores_full_marks() {
    let o = CaseOutcome {
        covered_items: 12,
        gold_items: 12,
        structural_hits: 5,
        structural_slots: 5,
        risks_closed: 2,
        gold_risks: 2,
        redundant_prompts: 0,
        prompts: 6,
        t_goal: Some(5),
    };
    let e = end_to_end_metrics(&[o]);
    let rates = [e.coverage.rate, e.structural_completeness.rate, e.risk_recall.rate, e.redundancy.rate];
    assert_eq!(rates, [1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn t_goal_is_the_first_satisfied_turn() {
    let suite = suite();
    let case = &suite.cases[0];
    let mut run = run_case(case, &suite.domain, &RunConfig::default(), 7).unwrap();
    assert!(run.updates.len() >= 6);
    for u in run.updates.iter_mut() {
        u.report_delta.goal_satisfied = u.turn >= 5;
    }
    assert_eq!(case_outcome(case, &run).t_goal, Some(5));
    for u in run.updates.iter_mut() {
        u.report_delta.goal_satisfied = false;
    }
    assert_eq!(case_outcome(case, &run).t_goal, None);
}

#[test]
fn direct_baseline_issues_no_prompts() {
    let suite = suite();
    let cfg = RunConfig::default().with_baseline(Baseline::Direct);
    for case in &suite.cases {
        let run = run_case(case, &suite.domain, &cfg, 7).unwrap();
        assert!(run.prompts.is_empty());
        let o = case_outcome(case, &run);
        assert_eq!((o.prompts, o.t_goal), (0, None));
        assert!(!run.turn_cap_reached);
    }
}

#[test]
fn full_system_concludes_before_the_cap() {
    let suite = suite();
    let cfg = RunConfig::default();
    for case in &suite.cases {
        for &seed in &cfg.harness.seeds {
            let run = run_case(case, &suite.domain, &cfg, seed).unwrap();
            assert!(run.concluded && !run.turn_cap_reached, "{} seed {seed}", case.case_id);
            assert!(run.updates.len() < cfg.harness.turn_cap as usize);
        }
    }
}

#[test]
fn repeated_runs_are_identical() {
    let suite = suite();
    for b in [Baseline::ChunkRag, Baseline::RuleTemplate, Baseline::Full] {
        let cfg = RunConfig::default().with_baseline(b);
        let x = run_case(&suite.cases[1], &suite.domain, &cfg, 11).unwrap();
        let y = run_case(&suite.cases[1], &suite.domain, &cfg, 11).unwrap();
        assert!(verify_replay(&x.summaries, &y.summaries).matches);
        assert_eq!(x.prompts, y.prompts);
    }
}

#[test]
fn report_rates_equal_count_ratios() {
    let suite = suite();
    let r = evaluate_baseline(&suite, &one_seed()).unwrap();
    let e = &r.end_to_end;
    for c in [e.coverage, e.structural_completeness, e.risk_recall, e.redundancy] {
        assert!((c.rate - c.hits as f64 / c.total as f64).abs() <= 1e-9);
    }
    let x = &r.extraction;
    assert!((x.precision - x.tp as f64 / (x.tp + x.fp) as f64).abs() <= 1e-9);
    assert!((x.recall - x.tp as f64 / (x.tp + x.fn_) as f64).abs() <= 1e-9);
}

#[test]
fn harness_retrieval_metrics_match_the_retrieval_module() {
    let suite = suite();
    let cfg = one_seed();
    let r = evaluate_baseline(&suite, &cfg).unwrap();
    let ids: std::collections::BTreeSet<String> =
        suite.cases.iter().flat_map(|c| c.query_ids.iter().cloned()).collect();
    let qrels = suite.qrels.subset(&ids);
    let ranked = run_queries(&suite.domain.index, &qrels, 5, cfg.effective().retrieval_mode).unwrap();
    assert_eq!(r.retrieval, evaluate(&ranked, &qrels, &suite.domain.index, 5).unwrap());
}

#[test]
fn ablation_tables_have_one_row_per_setting() {
    let suite = suite();
    let cfg = one_seed();
    let rows = ablate_belief(&suite, &cfg, &[StabilizerStage::Temp]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].stage, StabilizerStage::Temp);

    let a = ablate_punctuation(&suite, &cfg, &PunctuationAblation::ALL).unwrap();
    let b = ablate_punctuation(&suite, &cfg, &PunctuationAblation::ALL).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    for row in &a {
        for f in [row.boundary.f1, row.state.f1, row.retrieval_ndcg, row.action_accuracy.rate] {
            assert!((0.0..=1.0).contains(&f));
        }
    }
}

#[test]
fn bundled_suite_is_valid_and_matches_the_data_dir() {
    let suite = suite();
    assert!(suite.cases.len() >= 5);
    for case in &suite.cases {
        case.validate(&suite.domain, &suite.qrels).unwrap();
        for r in case.exchanges() {
            assert_eq!(case.script.turns[r.end - 1].role, Role::Patient, "{}", case.case_id);
        }
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/suite");
    let loaded = Suite::load(&dir, RetrievalConfig::default()).unwrap();
    assert_eq!(loaded.cases, suite.cases);
}

#[test]
fn invalid_cases_are_rejected() {
    let suite = suite();
    let mut case = suite.cases[0].clone();
    case.gold_items[0].field_id = "no_such_field".into();
    assert!(matches!(case.validate(&suite.domain, &suite.qrels), Err(CaseError::Invalid { .. })));

    let mut case = suite.cases[0].clone();
    case.true_hypothesis = "flu".into();
    assert!(case.validate(&suite.domain, &suite.qrels).is_err());

    let mut case = suite.cases[0].clone();
    case.gold_boundaries.push(GoldBoundary { turn: 0, after: 999 });
    assert!(case.validate(&suite.domain, &suite.qrels).is_err());

    let mut case = suite.cases[0].clone();
    case.query_ids.push("q999".into());
    assert!(case.validate(&suite.domain, &suite.qrels).is_err());

    let mut case: PilotCase = suite.cases[0].clone();
    case.preferred_actions.clear();
    assert!(case.validate(&suite.domain, &suite.qrels).is_err());

    assert!(matches!(PilotCase::from_json("{"), Err(CaseError::Parse(_))));
}

#[test]
fn gold_boundaries_follow_dropped_tokens() {
    let suite = suite();
    let mut case = suite.cases[0].clone();
    case.gold_boundaries = vec![GoldBoundary { turn: 0, after: 2 }, GoldBoundary { turn: 0, after: 5 }];
    let o = |index: usize| TokenOrigin { turn: 0, index };
    // tokens 2 and 4 were dropped; 5 is the last kept token of the slice
    let origins = [o(0), o(1), o(3), o(5)];
    let got: Vec<usize> = case.gold_positions(&origins).into_iter().collect();
    assert_eq!(got, vec![1]);
    let origins = [o(0), o(1), o(2), o(3), o(5), o(6)];
    let got: Vec<usize> = case.gold_positions(&origins).into_iter().collect();
    assert_eq!(got, vec![2, 4]);
}
