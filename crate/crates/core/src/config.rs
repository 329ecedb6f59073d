//! Run configuration: one TOML file with `stabilizer`, `planner`,
//! `boundary`, `retrieval` and `harness` sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{StabilizerConfig, StabilizerStage};
use crate::boundary::{CueConfig, CueWeights, PunctuationAblation};
use crate::planner::PlannerConfig;
use crate::retrieval::{RetrievalConfig, RetrievalMode};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "A_direct")]
    Direct,
    #[serde(rename = "B_chunk_rag")]
    ChunkRag,
    #[serde(rename = "C_rule_template")]
    RuleTemplate,
    #[serde(rename = "D_full")]
    Full,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Direct, Baseline::ChunkRag, Baseline::RuleTemplate, Baseline::Full];

    pub fn letter(self) -> char {
        match self {
            Baseline::Direct => 'A',
            Baseline::ChunkRag => 'B',
            Baseline::RuleTemplate => 'C',
            Baseline::Full => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Baseline> {
        Baseline::ALL.into_iter().find(|b| b.letter() == c.to_ascii_uppercase())
    }
}

/// How the next action is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// No planner and no interaction.
    None,
    /// Fixed question order, no information-gain ranking.
    Template,
    /// Gap-driven candidates ranked by information gain.
    Eig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryConfig {
    #[serde(flatten)]
    pub weights: CueWeights,
    pub p_max_ms: u64,
    pub window: usize,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        let cues = CueConfig::default();
        Self { weights: CueWeights::default(), p_max_ms: cues.p_max_ms, window: cues.window }
    }
}

impl BoundaryConfig {
    pub fn cues(&self) -> CueConfig {
        CueConfig { p_max_ms: self.p_max_ms, window: self.window }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub baseline: Baseline,
    pub punctuation: PunctuationAblation,
    pub stage: StabilizerStage,
    pub seeds: Vec<u64>,
    pub turn_cap: u32,
    /// Cutoff for the retrieval metrics.
    pub metric_k: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            baseline: Baseline::Full,
            punctuation: PunctuationAblation::Full,
            stage: StabilizerStage::Full,
            seeds: vec![7, 11, 23],
            turn_cap: 20,
            metric_k: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub harness: HarnessConfig,
    pub stabilizer: StabilizerConfig,
    pub planner: PlannerConfig,
    pub boundary: BoundaryConfig,
    pub retrieval: RetrievalConfig,
}

/// Settings after baseline overrides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Effective {
    pub policy: Policy,
    pub retrieval_mode: RetrievalMode,
    pub stage: StabilizerStage,
    pub conservative: bool,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.stabilizer.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.planner.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.boundary.weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let r = &self.retrieval;
        if [r.w_lex, r.w_vec, r.w_graph, r.k1, r.b, r.path_bonus].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(ConfigError::Invalid("retrieval weights must be finite and non-negative".into()));
        }
        if r.top_k == 0 || r.embed_dim == 0 {
            return Err(ConfigError::Invalid("retrieval top_k and embed_dim must be positive".into()));
        }
        if self.harness.turn_cap == 0 || self.harness.metric_k == 0 {
            return Err(ConfigError::Invalid("turn_cap and metric_k must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn effective(&self) -> Effective {
        let stage = self.harness.stage;
        let conservative = self.planner.conservative && stage.conservative();
        match self.harness.baseline {
            Baseline::Direct => {
                Effective { policy: Policy::None, retrieval_mode: RetrievalMode::Hybrid, stage, conservative: false }
            }
            Baseline::ChunkRag => Effective {
                policy: Policy::Eig,
                retrieval_mode: RetrievalMode::ChunkOnly,
                stage: StabilizerStage::Raw,
                conservative: false,
            },
            Baseline::RuleTemplate => Effective {
                policy: Policy::Template,
                retrieval_mode: RetrievalMode::Hybrid,
                stage,
                conservative: false,
            },
            Baseline::Full => {
                Effective { policy: Policy::Eig, retrieval_mode: RetrievalMode::Hybrid, stage, conservative }
            }
        }
    }

    pub fn with_baseline(&self, baseline: Baseline) -> Self {
        let mut c = self.clone();
        c.harness.baseline = baseline;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("[stabilizer]\nlambda = 0.75\n[harness]\nbaseline = \"B_chunk_rag\"\n").unwrap();
        assert_eq!(cfg.stabilizer.lambda, 0.75);
        assert_eq!(cfg.harness.baseline, Baseline::ChunkRag);
        assert_eq!(cfg.planner.mc_samples, 64);
        let e = cfg.effective();
        assert_eq!((e.retrieval_mode, e.stage), (RetrievalMode::ChunkOnly, StabilizerStage::Raw));
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        assert!(matches!(RunConfig::from_toml("[stabilizer]\nlambda = 0.95\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[stabilizer\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn shipped_file_equals_defaults() {
        let shipped = include_str!("../../../config/default.toml");
        assert_eq!(RunConfig::from_toml(shipped).unwrap(), RunConfig::default());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.planner.eta = 0.25;
        assert_ne!(a.hash(), b.hash());
    }
}
