//! Ranked-retrieval metrics over binary relevance judgments.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{retrieve, RetrievalError, RetrievalIndex, RetrievalMode};
use crate::metrics::CountedRate;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelEntry {
    pub query_id: String,
    pub query: String,
    pub relevant_objects: BTreeSet<String>,
    #[serde(default)]
    pub relevant_paths: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    pub entries: BTreeMap<String, QrelEntry>,
}

impl Qrels {
    pub fn from_jsonl(s: &str) -> Result<Self, RetrievalError> {
        let mut entries = BTreeMap::new();
        for (i, line) in s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: QrelEntry = serde_json::from_str(line)
                .map_err(|e| RetrievalError::InvalidCorpus(format!("qrels line {}: {e}", i + 1)))?;
            entries.insert(e.query_id.clone(), e);
        }
        Ok(Self { entries })
    }

    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Qrels {
        let entries = ids.into_iter().filter_map(|id| self.entries.get(id).map(|e| (id.clone(), e.clone()))).collect();
        Qrels { entries }
    }

    /// Queries with at least one relevant object.
    pub fn scored(&self) -> impl Iterator<Item = &QrelEntry> {
        self.entries.values().filter(|e| !e.relevant_objects.is_empty())
    }
}

/// query_id -> ranked object ids.
pub type RankedResults = BTreeMap<String, Vec<String>>;

fn ranking<'a>(results: &'a RankedResults, qid: &str, k: usize) -> Result<&'a [String], RetrievalError> {
    let r = results.get(qid).ok_or_else(|| RetrievalError::MissingQuery(qid.to_string()))?;
    Ok(&r[..k.min(r.len())])
}

pub fn recall_at_k(results: &RankedResults, qrels: &Qrels, k: usize) -> Result<CountedRate, RetrievalError> {
    let mut hits = 0;
    let mut total = 0;
    for q in qrels.scored() {
        total += 1;
        if ranking(results, &q.query_id, k)?.iter().any(|o| q.relevant_objects.contains(o)) {
            hits += 1;
        }
    }
    Ok(CountedRate::new(hits, total))
}

pub fn mrr_at_k(results: &RankedResults, qrels: &Qrels, k: usize) -> Result<f64, RetrievalError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for q in qrels.scored() {
        n += 1;
        if let Some(pos) = ranking(results, &q.query_id, k)?.iter().position(|o| q.relevant_objects.contains(o)) {
            sum += 1.0 / (pos + 1) as f64;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn dcg(rels: impl Iterator<Item = bool>) -> f64 {
    rels.enumerate().filter(|(_, r)| *r).map(|(i, _)| 1.0 / ((i + 2) as f64).log2()).sum()
}

pub fn ndcg_at_k(results: &RankedResults, qrels: &Qrels, k: usize) -> Result<f64, RetrievalError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for q in qrels.scored() {
        n += 1;
        let top = ranking(results, &q.query_id, k)?;
        let ideal = dcg((0..k.min(q.relevant_objects.len())).map(|_| true));
        if ideal > 0.0 {
            sum += dcg(top.iter().map(|o| q.relevant_objects.contains(o))) / ideal;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRates {
    pub object: CountedRate,
    /// Only queries that carry at least one relevant path are scored.
    pub path: CountedRate,
}

pub fn object_and_path_hits(
    results: &RankedResults,
    qrels: &Qrels,
    index: &RetrievalIndex,
    k: usize,
) -> Result<HitRates, RetrievalError> {
    let object = recall_at_k(results, qrels, k)?;
    let (mut hits, mut total) = (0, 0);
    for q in qrels.scored().filter(|q| !q.relevant_paths.is_empty()) {
        total += 1;
        let top: BTreeSet<&String> = ranking(results, &q.query_id, k)?.iter().collect();
        let hit = q.relevant_paths.iter().any(|path| {
            !path.is_empty()
                && path.iter().all(|o| top.contains(o))
                && path.windows(2).all(|w| index.adjacent(&w[0], &w[1]))
        });
        if hit {
            hits += 1;
        }
    }
    Ok(HitRates { object, path: CountedRate::new(hits, total) })
}

/// Ranks every qrels query against the index.
pub fn run_queries(
    index: &RetrievalIndex,
    qrels: &Qrels,
    k: usize,
    mode: RetrievalMode,
) -> Result<RankedResults, RetrievalError> {
    qrels
        .entries
        .values()
        .map(|q| {
            Ok((q.query_id.clone(), retrieve(index, &q.query, k, mode)?.into_iter().map(|r| r.object_id).collect()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub k: usize,
    pub recall: CountedRate,
    pub mrr: f64,
    pub ndcg: f64,
    pub hits: HitRates,
}

pub fn evaluate(
    results: &RankedResults,
    qrels: &Qrels,
    index: &RetrievalIndex,
    k: usize,
) -> Result<RetrievalMetrics, RetrievalError> {
    Ok(RetrievalMetrics {
        k,
        recall: recall_at_k(results, qrels, k)?,
        mrr: mrr_at_k(results, qrels, k)?,
        ndcg: ndcg_at_k(results, qrels, k)?,
        hits: object_and_path_hits(results, qrels, index, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str, rel: &[&str]) -> QrelEntry {
        QrelEntry {
            query_id: id.into(),
            query: id.into(),
            relevant_objects: rel.iter().map(|s| s.to_string()).collect(),
            relevant_paths: vec![],
        }
    }

    fn qrels(entries: Vec<QrelEntry>) -> Qrels {
        Qrels { entries: entries.into_iter().map(|e| (e.query_id.clone(), e)).collect() }
    }

    fn ranked(pairs: &[(&str, &[&str])]) -> RankedResults {
        pairs.iter().map(|(q, r)| (q.to_string(), r.iter().map(|s| s.to_string()).collect())).collect()
    }

    #[test]
    fn recall_boundary_rank() {
        let qs = qrels(vec![q("q1", &["f"])]);
        let r = ranked(&[("q1", &["a", "b", "c", "d", "e", "f"])]);
        assert_eq!(recall_at_k(&r, &qs, 5).unwrap().hits, 0);
        assert_eq!(recall_at_k(&r, &qs, 6).unwrap().rate, 1.0);
        assert_eq!(recall_at_k(&ranked(&[]), &qs, 5), Err(RetrievalError::MissingQuery("q1".into())));
    }

    #[test]
    fn mrr_examples() {
        let one = qrels(vec![q("q1", &["a"])]);
        assert_eq!(mrr_at_k(&ranked(&[("q1", &["a", "b"])]), &one, 5).unwrap(), 1.0);
        assert!((mrr_at_k(&ranked(&[("q1", &["x", "y", "a"])]), &one, 5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let two = qrels(vec![q("q1", &["a"]), q("q2", &["z"])]);
        let r = ranked(&[("q1", &["x", "a"]), ("q2", &["x", "y"])]);
        assert!((mrr_at_k(&r, &two, 5).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ndcg_examples() {
        let qs = qrels(vec![q("q1", &["a", "c"])]);
        assert!((ndcg_at_k(&ranked(&[("q1", &["a", "c", "b"])]), &qs, 3).unwrap() - 1.0).abs() < 1e-12);
        let v = ndcg_at_k(&ranked(&[("q1", &["a", "b", "c"])]), &qs, 3).unwrap();
        // ideal ordering enumerated: rel at ranks 1,2
        let oracle = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.9198).abs() < 1e-3);
        assert_eq!(ndcg_at_k(&ranked(&[("q1", &["x", "y"])]), &qs, 3).unwrap(), 0.0);
    }

    #[test]
    fn unscored_paths_report_zero() {
        use crate::retrieval::{build_index, objectify, Block, RetrievalConfig, TagLexicon};
        let blocks: Vec<Block> = ["a", "b"]
            .iter()
            .map(|id| Block {
                document_id: "d".into(),
                page_no: 1,
                block_id: id.to_string(),
                text: format!("text {id}"),
                kind_hint: None,
                tags: vec![],
                edges: if *id == "a" { vec![("rel".into(), "d/b".into())] } else { vec![] },
            })
            .collect();
        let idx = build_index(objectify(&blocks, &TagLexicon::default()).unwrap(), RetrievalConfig::default()).unwrap();
        let mut qs = qrels(vec![q("q1", &["d/a"])]);
        let r = ranked(&[("q1", &["d/a", "d/b"])]);
        let h = object_and_path_hits(&r, &qs, &idx, 5).unwrap();
        assert_eq!((h.path.hits, h.path.total, h.path.rate), (0, 0, 0.0));
        qs.entries.get_mut("q1").unwrap().relevant_paths = vec![vec!["d/a".into(), "d/b".into()]];
        let h = object_and_path_hits(&r, &qs, &idx, 5).unwrap();
        assert_eq!((h.path.hits, h.path.total), (1, 1));
    }
}
