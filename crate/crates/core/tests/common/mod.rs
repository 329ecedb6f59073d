#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use consult_core::retrieval::{tokenize, Block, Embedder, HashedTrigramEmbedder, RetrievalConfig};
use proptest::prelude::*;

pub const VOCAB: [&str; 12] =
    ["chest", "pain", "burning", "meal", "sweat", "ecg", "troponin", "stool", "black", "fever", "press", "walk"];

/// Up to eight blocks of words from a small vocabulary, random undirected
/// edges, and a query.
pub fn small_corpus() -> impl Strategy<Value = (Vec<Block>, String)> {
    (1usize..=8)
        .prop_flat_map(|n| {
            let texts = prop::collection::vec(prop::collection::vec(0..VOCAB.len(), 1..7), n);
            let edges = prop::collection::vec((0..n, 0..n), 0..(2 * n));
            let query = prop::collection::vec(0..VOCAB.len(), 1..4);
            (texts, edges, query)
        })
        .prop_map(|(texts, edges, query)| {
            let mut blocks: Vec<Block> = texts
                .iter()
                .enumerate()
                .map(|(i, words)| Block {
                    document_id: "doc".into(),
                    page_no: 1,
                    block_id: format!("b{i}"),
                    text: words.iter().map(|&w| VOCAB[w]).collect::<Vec<_>>().join(" "),
                    kind_hint: None,
                    tags: vec![],
                    edges: vec![],
                })
                .collect();
            for (a, b) in edges {
                blocks[a].edges.push(("related".into(), format!("doc/b{b}")));
            }
            let q = query.iter().map(|&w| VOCAB[w]).collect::<Vec<_>>().join(" ");
            (blocks, q)
        })
}

/// Scores every object with the hybrid formula directly and sorts by
/// (score desc, id asc).
pub fn exhaustive_rank(blocks: &[Block], query: &str, cfg: &RetrievalConfig) -> Vec<(String, f64)> {
    let ids: Vec<String> = blocks.iter().map(|b| format!("{}/{}", b.document_id, b.block_id)).collect();
    let docs: Vec<Vec<String>> = blocks.iter().map(|b| tokenize(&b.text)).collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let terms: BTreeSet<String> = tokenize(query).into_iter().collect();

    let lex: Vec<f64> = docs
        .iter()
        .map(|d| {
            terms
                .iter()
                .map(|t| {
                    let tf = d.iter().filter(|w| *w == t).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    idf * tf * (cfg.k1 + 1.0) / (tf + cfg.k1 * (1.0 - cfg.b + cfg.b * d.len() as f64 / avg))
                })
                .sum()
        })
        .collect();
    let max_lex = lex.iter().copied().fold(0.0, f64::max);

    let mut order: Vec<usize> = (0..docs.len()).filter(|&i| lex[i] > 0.0).collect();
    order.sort_by(|&a, &b| lex[b].partial_cmp(&lex[a]).unwrap().then(ids[a].cmp(&ids[b])));
    order.truncate(cfg.seed_count);

    let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut adj = vec![BTreeSet::new(); docs.len()];
    for (i, b) in blocks.iter().enumerate() {
        for (_, t) in &b.edges {
            let j = pos[t.as_str()];
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut depth: Vec<Option<usize>> = vec![None; docs.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &s in &order {
        depth[s] = Some(0);
        queue.push_back(s);
    }
    while let Some(i) = queue.pop_front() {
        let d = depth[i].unwrap();
        if d == cfg.max_depth {
            continue;
        }
        for &j in &adj[i] {
            if depth[j].is_none() {
                depth[j] = Some(d + 1);
                queue.push_back(j);
            }
        }
    }

    let emb = HashedTrigramEmbedder { dim: cfg.embed_dim };
    let qv = emb.embed(query);
    let raw: Vec<f64> = (0..docs.len())
        .map(|i| {
            let l = if max_lex > 0.0 { lex[i] / max_lex } else { 0.0 };
            let v: f64 = emb.embed(&blocks[i].text).iter().zip(&qv).map(|(a, b)| a * b).sum();
            let g = match depth[i] {
                Some(d) if d > 0 => cfg.path_bonus / d as f64,
                _ => 0.0,
            };
            cfg.w_lex * l + cfg.w_vec * v + cfg.w_graph * g
        })
        .collect();
    let top = raw.iter().copied().fold(0.0, f64::max);
    let mut out: Vec<(String, f64)> =
        ids.into_iter().zip(raw).map(|(id, s)| (id, if top > 0.0 { s / top } else { 0.0 })).collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

fn h2(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum()
}

/// Expected posterior entropy by enumeration over answers.
pub fn exact_h_bar(belief: &[f64], likelihood: &[Vec<f64>]) -> f64 {
    likelihood
        .iter()
        .map(|l| {
            let joint: Vec<f64> = belief.iter().zip(l).map(|(b, x)| b * x).collect();
            let z: f64 = joint.iter().sum();
            if z == 0.0 {
                return 0.0;
            }
            let post: Vec<f64> = joint.iter().map(|j| j / z).collect();
            z * h2(&post)
        })
        .sum()
}

/// F1 from raw counts, written out without the library helper.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}
