use std::collections::BTreeMap;
use std::sync::Arc;

use consult_core::case::Suite;
use consult_core::config::RunConfig;
use consult_core::extract::{CurrentState, Polarity, StateEvent};
use consult_core::harness::run_case;
use consult_core::retrieval::{parse_corpus, Anchor, RetrievalConfig};
use consult_core::session::{ReportDelta, Session, TurnSummary};
use consult_core::trace::{
    generate_report, recorded_summaries, replay, verify_replay, Divergence, RecordKind, ReplayRecord, TraceError,
    TraceHeader, TraceLog, SECTIONS,
};

fn suite() -> Suite {
    Suite::bundled(RetrievalConfig::default()).unwrap()
}

fn empty_log(suite: &Suite) -> TraceLog {
    let spec = suite.cases[0].session_spec(&suite.domain).unwrap();
    TraceLog::new(TraceHeader::new(&RunConfig::default(), &spec, 0))
}

fn delta(seq: u64) -> ReplayRecord {
    ReplayRecord::report_delta(seq, 0, &ReportDelta::default())
}

#[test]
fn append_enforces_contiguous_seq() {
    let suite = suite();
    let mut log = empty_log(&suite);
    log.append(delta(1)).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log.append(delta(3)), Err(TraceError::SeqGap { expected: 2, got: 3 }));
    assert_eq!(log.append(delta(1)), Err(TraceError::SeqGap { expected: 2, got: 1 }));
    assert_eq!(log.len(), 1);
}

#[test]
fn appended_records_read_back_in_order() {
    let suite = suite();
    let mut log = empty_log(&suite);
    let recs: Vec<ReplayRecord> = (1..=6)
        .map(|seq| {
            let d = ReportDelta { closed_risks: vec![format!("r{seq}")], ..Default::default() };
            ReplayRecord::report_delta(seq, seq as u32, &d)
        })
        .collect();
    for r in &recs {
        log.append(r.clone()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    log.write(&path).unwrap();
    let back = TraceLog::read(&path).unwrap();
    assert_eq!(back.records(), recs.as_slice());
    assert_eq!(back.header, log.header);
}

#[test]
fn malformed_trace_files_are_rejected() {
    let suite = suite();
    let mut log = empty_log(&suite);
    log.append(delta(1)).unwrap();
    let text = log.to_jsonl();
    assert!(matches!(TraceLog::from_jsonl(""), Err(TraceError::BadHeader(_))));
    let no_header: String = text.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert!(matches!(TraceLog::from_jsonl(&no_header), Err(TraceError::BadHeader(_))));
    let v2 = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
    assert_eq!(TraceLog::from_jsonl(&v2), Err(TraceError::UnsupportedVersion(2)));
    let corrupt = format!("{text}{{not json\n");
    assert!(matches!(TraceLog::from_jsonl(&corrupt), Err(TraceError::CorruptRecord { seq: 2, .. })));
    let gap = text.replace("\"seq\":1", "\"seq\":4");
    assert!(matches!(TraceLog::from_jsonl(&gap), Err(TraceError::SeqGap { expected: 1, got: 4 })));
}

#[test]
fn header_is_the_first_line() {
    let suite = suite();
    let text = empty_log(&suite).to_jsonl();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["type"], "trace_header");
    assert_eq!(first["format_version"], 1);
    assert_eq!(first["config_hash"], RunConfig::default().hash());
}

#[test]
fn empty_session_replays_to_empty_sequences() {
    let suite = suite();
    let spec = suite.cases[0].session_spec(&suite.domain).unwrap();
    let cfg = RunConfig::default();
    let mut s = Session::new(Arc::clone(&suite.domain), spec, cfg.clone(), 1).unwrap();
    s.finish().unwrap();
    assert_eq!(s.trace().len(), 1);
    assert_eq!(s.trace().records()[0].record_kind, RecordKind::ReportDelta);
    let r = replay(s.trace(), &cfg, Arc::clone(&suite.domain)).unwrap();
    assert!(r.summaries.is_empty() && r.updates.is_empty());
}

#[test]
fn config_hash_mismatch_refuses_replay() {
    let suite = suite();
    let cfg = RunConfig::default();
    let run = run_case(&suite.cases[0], &suite.domain, &cfg, 7).unwrap();
    let mut other = cfg.clone();
    other.stabilizer.lambda = 0.75;
    let err = replay(&run.trace, &other, Arc::clone(&suite.domain)).unwrap_err();
    assert_eq!(err, TraceError::ConfigMismatch { expected: cfg.hash(), found: other.hash() });
}

#[test]
fn live_run_and_replay_agree() {
    let suite = suite();
    let cfg = RunConfig::default();
    for case in &suite.cases {
        let run = run_case(case, &suite.domain, &cfg, 11).unwrap();
        let text = run.trace.to_jsonl();
        let log = TraceLog::from_jsonl(&text).unwrap();
        let r = replay(&log, &cfg, Arc::clone(&suite.domain)).unwrap();
        let verdict = verify_replay(&run.summaries, &r.summaries);
        assert!(verdict.matches, "{}: {:?}", case.case_id, verdict.divergence);
        assert_eq!(r.updates, run.updates, "{}", case.case_id);
        assert_eq!(recorded_summaries(&log, &suite.domain.schema).unwrap(), run.summaries, "{}", case.case_id);
    }
}

fn summary(turn: u32, smoothed: Vec<f64>, selected: &str) -> TurnSummary {
    TurnSummary {
        turn,
        slots: BTreeMap::new(),
        raw: smoothed.clone(),
        fused: smoothed.clone(),
        smoothed,
        selected: Some(selected.into()),
    }
}

#[test]
fn verify_replay_reports_first_divergence() {
    let live: Vec<TurnSummary> = (1..=4).map(|t| summary(t, vec![0.5, 0.5], "ask:onset")).collect();
    assert!(verify_replay(&live, &live.clone()).matches);
    assert!(verify_replay(&[], &[]).matches);

    let mut nudged = live.clone();
    nudged[2].smoothed = vec![0.5 + 1e-6, 0.5 - 1e-6];
    let v = verify_replay(&live, &nudged);
    assert!(!v.matches);
    assert_eq!(v.divergence, Some(Divergence { turn: 3, field: "belief".into() }));

    let v = verify_replay(&live, &live[..2]);
    assert_eq!(v.divergence, Some(Divergence { turn: 3, field: "missing_turn".into() }));

    let mut other = live.clone();
    other[1].selected = Some("conclude:session".into());
    assert_eq!(verify_replay(&live, &other).divergence, Some(Divergence { turn: 2, field: "action".into() }));

    let mut slots = live.clone();
    slots[0].slots.insert("onset".into(), event("onset", "sudden"));
    assert_eq!(verify_replay(&live, &slots).divergence, Some(Divergence { turn: 1, field: "state".into() }));
}

fn event(field: &str, value: &str) -> StateEvent {
    StateEvent {
        field_id: field.into(),
        value: value.into(),
        polarity: Polarity::Asserted,
        temporal: None,
        source_turn: 1,
        source_span: (4, 6),
        confidence: 1.0,
    }
}

#[test]
fn empty_state_renders_empty_sections() {
    let suite = suite();
    let log = empty_log(&suite);
    let goal = &suite.cases[0].goal;
    let r = generate_report(
        "c",
        &CurrentState::default(),
        goal,
        &BTreeMap::new(),
        &log,
        &suite.domain.index,
        &suite.domain.schema,
        0,
    );
    assert!(r.slot_values.is_empty() && r.risk_items.is_empty());
    let ids: Vec<&str> = r.narrative_sections.iter().map(|s| s.section_id.as_str()).collect();
    assert_eq!(ids, SECTIONS);
    assert!(r.narrative_sections.iter().all(|s| s.text == "(none recorded)"));
}

#[test]
fn one_symptom_gives_one_slot_with_its_span() {
    let suite = suite();
    let log = empty_log(&suite);
    let mut state = CurrentState::default();
    state.apply(&suite.domain.schema, &[event("chest_pain", "present")]).unwrap();
    let goal = &suite.cases[0].goal;
    let r = generate_report("c", &state, goal, &BTreeMap::new(), &log, &suite.domain.index, &suite.domain.schema, 1);
    assert_eq!(r.slot_values.len(), 1);
    let v = &r.slot_values["chest_pain"];
    assert_eq!((v.source_turn, v.source_span), (1, (4, 6)));
    let again =
        generate_report("c", &state, goal, &BTreeMap::new(), &log, &suite.domain.index, &suite.domain.schema, 1);
    assert_eq!(r.to_json(), again.to_json());
}

#[test]
fn report_is_byte_stable_across_runs() {
    let suite = suite();
    let cfg = RunConfig::default();
    let a = run_case(&suite.cases[0], &suite.domain, &cfg, 7).unwrap();
    let b = run_case(&suite.cases[0], &suite.domain, &cfg, 7).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
}

#[test]
fn trace_structure_invariants_hold() {
    let suite = suite();
    let cfg = RunConfig::default();
    let blocks = parse_corpus(include_str!("../data/suite/corpus.jsonl")).unwrap();
    let resolves = |a: &Anchor| {
        blocks.iter().any(|b| {
            b.document_id == a.document_id
                && b.page_no == a.page_no
                && b.block_id == a.block_id
                && a.span.0 <= a.span.1
                && a.span.1 <= b.text.chars().count()
        })
    };
    for case in &suite.cases {
        let run = run_case(case, &suite.domain, &cfg, 23).unwrap();
        let recs = run.trace.records();
        assert!(recs.windows(2).all(|w| w[1].seq == w[0].seq + 1));
        for (i, r) in recs.iter().enumerate() {
            assert!(r.anchors.iter().all(resolves), "{}: unresolvable anchor at seq {}", case.case_id, r.seq);
            if r.record_kind == RecordKind::SelectedAction {
                assert!(recs[..i].iter().any(|p| p.turn == r.turn && p.record_kind == RecordKind::Candidates));
            }
        }
        for u in &run.updates {
            let n = recs.iter().filter(|r| r.turn == u.turn && r.record_kind == RecordKind::SelectedAction).count();
            assert_eq!(n, usize::from(u.selected.is_some()));
        }
        for v in run.report.slot_values.values() {
            assert!(v.anchors.iter().all(resolves));
        }
        for r in &run.report.risk_items {
            assert!(r.anchors.iter().all(resolves));
            if r.closing_action.is_some() || !r.anchors.is_empty() {
                continue;
            }
            assert_ne!(r.status, consult_core::trace::RiskStatus::Closed);
        }
        let events: Vec<&StateEvent> = run.updates.iter().flat_map(|u| &u.events).collect();
        for (f, v) in &run.report.slot_values {
            assert!(events.iter().any(|e| &e.field_id == f && e.value == v.value && e.source_turn == v.source_turn));
        }
    }
}
