//! Objectified knowledge store and hybrid retrieval.
//!
//! Offline, pre-parsed document blocks are turned into typed
//! [`KnowledgeObject`]s with anchors and indexed three ways: a lexical
//! inverted index, unit vectors from an [`Embedder`], and an object graph.
//! Online, [`retrieve`] ranks objects either lexically or by a fused score
//! that adds vector similarity and a bonus for graph proximity to the best
//! lexical matches.

mod embed;
pub mod eval;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{dot, Embedder, HashedTrigramEmbedder};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("duplicate block {block_id:?} in document {document_id:?}")]
    DuplicateBlock { document_id: String, block_id: String },
    #[error("edge from {0:?} points to missing object {1:?}")]
    DanglingEdge(String, String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("query {0:?} has no results")]
    MissingQuery(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Anchor {
    pub document_id: String,
    pub page_no: u32,
    pub block_id: String,
    /// Character offsets into the block text, end exclusive.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    SymptomUnit,
    ExamUnit,
    DiagnosisUnit,
    RiskRuleUnit,
    CaseSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub relation: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeObject {
    pub object_id: String,
    pub kind: ObjectKind,
    pub text: String,
    pub tags: BTreeSet<String>,
    pub anchor: Anchor,
    pub edges: Vec<Edge>,
}

impl KnowledgeObject {
    /// Value of the first `prefix:value` tag.
    pub fn tag_value(&self, prefix: &str) -> Option<&str> {
        self.tags.iter().find_map(|t| t.strip_prefix(prefix)?.strip_prefix(':'))
    }
}

/// One pre-parsed document block, as found in the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub document_id: String,
    pub page_no: u32,
    pub block_id: String,
    pub text: String,
    #[serde(default)]
    pub kind_hint: Option<ObjectKind>,
    #[serde(default)]
    pub tags: Vec<String>,
    /// `[relation, target object id]` pairs.
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

pub fn object_id(document_id: &str, block_id: &str) -> String {
    format!("{document_id}/{block_id}")
}

/// Maps words in block text to tags during objectification.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagLexicon {
    pub entries: Vec<(String, String)>,
}

fn kind_from_tags(tags: &BTreeSet<String>) -> ObjectKind {
    let has = |t: &str| tags.contains(t);
    if has("risk") {
        ObjectKind::RiskRuleUnit
    } else if has("exam") {
        ObjectKind::ExamUnit
    } else if has("diagnosis") {
        ObjectKind::DiagnosisUnit
    } else if has("case") {
        ObjectKind::CaseSummary
    } else {
        ObjectKind::SymptomUnit
    }
}

pub fn parse_corpus(jsonl: &str) -> Result<Vec<Block>, RetrievalError> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RetrievalError::InvalidCorpus(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn objectify(blocks: &[Block], tag_lexicon: &TagLexicon) -> Result<Vec<KnowledgeObject>, RetrievalError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        if !seen.insert((b.document_id.as_str(), b.block_id.as_str())) {
            return Err(RetrievalError::DuplicateBlock {
                document_id: b.document_id.clone(),
                block_id: b.block_id.clone(),
            });
        }
        if b.text.is_empty() {
            return Err(RetrievalError::InvalidCorpus(format!("block {} has no text", b.block_id)));
        }
        let mut tags: BTreeSet<String> = b.tags.iter().cloned().collect();
        let words = tokenize(&b.text);
        for (surface, tag) in &tag_lexicon.entries {
            if words.iter().any(|w| w == surface) {
                tags.insert(tag.clone());
            }
        }
        let kind = b.kind_hint.unwrap_or_else(|| kind_from_tags(&tags));
        out.push(KnowledgeObject {
            object_id: object_id(&b.document_id, &b.block_id),
            kind,
            text: b.text.clone(),
            tags,
            anchor: Anchor {
                document_id: b.document_id.clone(),
                page_no: b.page_no,
                block_id: b.block_id.clone(),
                span: (0, b.text.chars().count()),
            },
            edges: b
                .edges
                .iter()
                .map(|(relation, target)| Edge { relation: relation.clone(), target: target.clone() })
                .collect(),
        });
    }
    Ok(out)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub w_lex: f64,
    pub w_vec: f64,
    pub w_graph: f64,
    /// Term-frequency saturation of the lexical scorer.
    pub k1: f64,
    /// Length normalisation of the lexical scorer.
    pub b: f64,
    /// Number of top lexical hits that seed the graph bonus.
    pub seed_count: usize,
    /// Bonus scale; a candidate at depth d gets `path_bonus / d`.
    pub path_bonus: f64,
    pub max_depth: usize,
    pub embed_dim: usize,
    /// Results requested per turn by the online pipeline.
    pub top_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            w_lex: 0.5,
            w_vec: 0.30,
            w_graph: 1.0,
            k1: 1.2,
            b: 0.75,
            seed_count: 3,
            path_bonus: 0.15,
            max_depth: 2,
            embed_dim: 256,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    ChunkOnly,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Posting {
    object: usize,
    tf: u32,
}

/// Immutable after [`build_index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub format_version: u32,
    pub config: RetrievalConfig,
    objects: Vec<KnowledgeObject>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_len: Vec<usize>,
    avg_len: f64,
    vectors: Vec<Vec<f64>>,
    adjacency: Vec<Vec<usize>>,
}

pub fn build_index(objects: Vec<KnowledgeObject>, cfg: RetrievalConfig) -> Result<RetrievalIndex, RetrievalError> {
    let embedder = HashedTrigramEmbedder { dim: cfg.embed_dim };
    build_index_with(objects, cfg, &embedder)
}

pub fn build_index_with(
    mut objects: Vec<KnowledgeObject>,
    cfg: RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<RetrievalIndex, RetrievalError> {
    objects.sort_by(|a, b| a.object_id.cmp(&b.object_id));
    if let Some(w) = objects.windows(2).find(|w| w[0].object_id == w[1].object_id) {
        return Err(RetrievalError::InvalidCorpus(format!("duplicate object {}", w[0].object_id)));
    }
    let pos: BTreeMap<&str, usize> = objects.iter().enumerate().map(|(i, o)| (o.object_id.as_str(), i)).collect();
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); objects.len()];
    for (i, o) in objects.iter().enumerate() {
        for e in &o.edges {
            let j = *pos
                .get(e.target.as_str())
                .ok_or_else(|| RetrievalError::DanglingEdge(o.object_id.clone(), e.target.clone()))?;
            if i != j {
                adjacency[i].insert(j);
                adjacency[j].insert(i);
            }
        }
    }
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_len = Vec::with_capacity(objects.len());
    for (i, o) in objects.iter().enumerate() {
        let toks = tokenize(&o.text);
        doc_len.push(toks.len());
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in toks {
            *tf.entry(t).or_default() += 1;
        }
        for (term, n) in tf {
            postings.entry(term).or_default().push(Posting { object: i, tf: n });
        }
    }
    let avg_len = if doc_len.is_empty() { 0.0 } else { doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64 };
    let vectors = objects.iter().map(|o| embedder.embed(&o.text)).collect();
    Ok(RetrievalIndex {
        format_version: INDEX_FORMAT_VERSION,
        config: cfg,
        objects,
        postings,
        doc_len,
        avg_len,
        vectors,
        adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub object_id: String,
    pub score: f64,
    pub anchor: Anchor,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn objects(&self) -> &[KnowledgeObject] {
        &self.objects
    }

    pub fn object(&self, id: &str) -> Option<&KnowledgeObject> {
        self.position(id).map(|i| &self.objects[i])
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.objects.binary_search_by(|o| o.object_id.as_str().cmp(id)).ok()
    }

    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.vectors[i].as_slice())
    }

    /// Graph neighbours, ignoring edge direction.
    pub fn neighbours(&self, id: &str) -> Vec<&str> {
        self.position(id)
            .map(|i| self.adjacency[i].iter().map(|&j| self.objects[j].object_id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn adjacent(&self, a: &str, b: &str) -> bool {
        match (self.position(a), self.position(b)) {
            (Some(i), Some(j)) => self.adjacency[i].binary_search(&j).is_ok(),
            _ => false,
        }
    }

    /// Whether the anchor points at an existing block and an in-range span.
    pub fn resolves(&self, anchor: &Anchor) -> bool {
        self.objects.iter().any(|o| {
            o.anchor.document_id == anchor.document_id
                && o.anchor.block_id == anchor.block_id
                && o.anchor.page_no == anchor.page_no
                && anchor.span.0 < anchor.span.1
                && anchor.span.1 <= o.text.chars().count()
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, RetrievalError> {
        let idx: RetrievalIndex = serde_json::from_str(s).map_err(|e| RetrievalError::InvalidCorpus(e.to_string()))?;
        if idx.format_version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::UnsupportedVersion(idx.format_version));
        }
        Ok(idx)
    }

    fn lexical_scores(&self, query_terms: &BTreeSet<String>) -> Vec<f64> {
        let n = self.objects.len() as f64;
        let mut scores = vec![0.0; self.objects.len()];
        let (k1, b) = (self.config.k1, self.config.b);
        for term in query_terms {
            let Some(list) = self.postings.get(term) else { continue };
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for p in list {
                let tf = f64::from(p.tf);
                let len_norm = if self.avg_len > 0.0 { self.doc_len[p.object] as f64 / self.avg_len } else { 0.0 };
                scores[p.object] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm));
            }
        }
        scores
    }

    /// Shortest undirected distance from any seed, up to `max_depth`.
    fn depths_from(&self, seeds: &[usize]) -> Vec<Option<usize>> {
        let mut depth = vec![None; self.objects.len()];
        let mut queue = VecDeque::new();
        for &s in seeds {
            depth[s] = Some(0);
            queue.push_back(s);
        }
        while let Some(i) = queue.pop_front() {
            let d = depth[i].unwrap_or(0);
            if d >= self.config.max_depth {
                continue;
            }
            for &j in &self.adjacency[i] {
                if depth[j].is_none() {
                    depth[j] = Some(d + 1);
                    queue.push_back(j);
                }
            }
        }
        depth
    }
}

pub fn retrieve(
    index: &RetrievalIndex,
    query: &str,
    k: usize,
    mode: RetrievalMode,
) -> Result<Vec<Retrieved>, RetrievalError> {
    let embedder = HashedTrigramEmbedder { dim: index.config.embed_dim };
    retrieve_with(index, query, k, mode, &embedder)
}

pub fn retrieve_with(
    index: &RetrievalIndex,
    query: &str,
    k: usize,
    mode: RetrievalMode,
    embedder: &dyn Embedder,
) -> Result<Vec<Retrieved>, RetrievalError> {
    let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
    if terms.is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let lex = index.lexical_scores(&terms);
    let max_lex = lex.iter().copied().fold(0.0, f64::max);
    let norm_lex: Vec<f64> = lex.iter().map(|&s| if max_lex > 0.0 { s / max_lex } else { 0.0 }).collect();

    let raw: Vec<f64> = match mode {
        RetrievalMode::ChunkOnly => norm_lex,
        RetrievalMode::Hybrid => {
            let cfg = &index.config;
            let mut seeds: Vec<usize> = (0..index.len()).filter(|&i| lex[i] > 0.0).collect();
            seeds.sort_by(|&a, &b| lex[b].total_cmp(&lex[a]).then(a.cmp(&b)));
            seeds.truncate(cfg.seed_count);
            let depths = index.depths_from(&seeds);
            let qv = embedder.embed(query);
            (0..index.len())
                .map(|i| {
                    let bonus = match depths[i] {
                        Some(d) if d >= 1 => cfg.path_bonus / d as f64,
                        _ => 0.0,
                    };
                    cfg.w_lex * norm_lex[i] + cfg.w_vec * dot(&qv, &index.vectors[i]) + cfg.w_graph * bonus
                })
                .collect()
        }
    };
    let max = raw.iter().copied().fold(0.0, f64::max);
    let mut ranked: Vec<(usize, f64)> =
        raw.into_iter().map(|s| if max > 0.0 { s / max } else { 0.0 }).enumerate().collect();
    // objects are stored sorted by id, so index order is the id tie-break
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(i, score)| Retrieved {
            object_id: index.objects[i].object_id.clone(),
            score,
            anchor: index.objects[i].anchor.clone(),
        })
        .collect())
}
