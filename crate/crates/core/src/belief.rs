//! Belief stabilization: temperature scaling, four-source fusion,
//! exponential smoothing, dynamic temperature, entropy and volatility.
//!
//! All distributions are plain `f64` slices over a fixed [`HypothesisSet`]
//! order. Entropies are in bits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BeliefError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least two beliefs, got {0}")]
    TooShort(usize),
    #[error("invalid stabilizer config: {0}")]
    InvalidConfig(String),
    #[error("invalid hypothesis set: {0}")]
    InvalidHypotheses(String),
}

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
}

impl HypothesisSet {
    pub fn new(hypotheses: Vec<Hypothesis>) -> Result<Self, BeliefError> {
        if hypotheses.len() < 2 {
            return Err(BeliefError::InvalidHypotheses("need at least two hypotheses".into()));
        }
        let mut ids: Vec<&str> = hypotheses.iter().map(|h| h.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(BeliefError::InvalidHypotheses("duplicate hypothesis id".into()));
        }
        Ok(Self { hypotheses })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.hypotheses.iter().position(|h| h.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hypotheses.iter().map(|h| h.id.as_str())
    }

    pub fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.len() as f64; self.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeliefVariant {
    Raw,
    Fused,
    Smoothed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub dist: Vec<f64>,
    pub turn: u32,
    pub variant: BeliefVariant,
}

impl BeliefState {
    pub fn new(dist: Vec<f64>, turn: u32, variant: BeliefVariant) -> Self {
        Self { dist, turn, variant }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.dist)
    }

    pub fn max(&self) -> f64 {
        self.dist.iter().copied().fold(0.0, f64::max)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn is_distribution(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0 && x.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() <= SUM_TOL
}

/// Clips negative rounding residue and rescales to sum exactly one.
fn renormalize(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v.iter_mut() {
            *x /= s;
        }
    }
    v
}

/// Stabilizer stages, in ablation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilizerStage {
    /// Untempered softmax of the model logits.
    Raw,
    /// Static temperature.
    Temp,
    /// Static temperature plus exponential smoothing.
    TempSmooth,
    /// As above with margin-gated action switching.
    TempSmoothConservative,
    /// Dynamic temperature, four-source fusion, smoothing and gating.
    Full,
}

impl StabilizerStage {
    pub const ALL: [StabilizerStage; 5] = [
        StabilizerStage::Raw,
        StabilizerStage::Temp,
        StabilizerStage::TempSmooth,
        StabilizerStage::TempSmoothConservative,
        StabilizerStage::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StabilizerStage::Raw => "raw",
            StabilizerStage::Temp => "temp",
            StabilizerStage::TempSmooth => "temp_smooth",
            StabilizerStage::TempSmoothConservative => "temp_smooth_conservative",
            StabilizerStage::Full => "full",
        }
    }

    pub fn smooths(self) -> bool {
        self >= StabilizerStage::TempSmooth
    }

    pub fn conservative(self) -> bool {
        self >= StabilizerStage::TempSmoothConservative
    }
}

impl std::str::FromStr for StabilizerStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown stabilizer stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilizerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub t_base: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub w_quality: f64,
    pub w_rule: f64,
    pub w_volatility: f64,
    pub volatility_window: usize,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.30,
            beta: 0.20,
            gamma: 0.20,
            delta: 0.30,
            lambda: 0.8,
            t_base: 1.2,
            t_min: 0.8,
            t_max: 2.5,
            w_quality: 0.5,
            w_rule: 0.3,
            w_volatility: 2.0,
            volatility_window: 3,
        }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<(), BeliefError> {
        let invalid = |m: String| Err(BeliefError::InvalidConfig(m));
        let weights = [self.alpha, self.beta, self.gamma, self.delta];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid("fusion weights must be non-negative".into());
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
            return invalid(format!("fusion weights sum to {}", weights.iter().sum::<f64>()));
        }
        if !(0.7..=0.9).contains(&self.lambda) {
            return invalid(format!("lambda {} outside [0.7, 0.9]", self.lambda));
        }
        if !(self.t_min > 0.0 && self.t_min <= self.t_base && self.t_base <= self.t_max) {
            return invalid("need 0 < t_min <= t_base <= t_max".into());
        }
        if [self.w_quality, self.w_rule, self.w_volatility].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid("temperature gains must be non-negative".into());
        }
        if self.volatility_window < 2 {
            return invalid("volatility_window must be at least 2".into());
        }
        Ok(())
    }
}

/// Source scores for one fusion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub s_rule: Vec<f64>,
    pub s_retrieval: Vec<f64>,
    pub raw_logits: Vec<f64>,
    pub quality: f64,
    pub rule_confidence: f64,
}

pub fn temperature_scale(z: &[f64], t: f64) -> Result<Vec<f64>, BeliefError> {
    if !(t > 0.0) {
        return Err(BeliefError::NonPositiveTemperature(t));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&zi| ((zi - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

pub fn adapt_temperature(cfg: &StabilizerConfig, quality: f64, rule_confidence: f64, recent_volatility: f64) -> f64 {
    let factor =
        1.0 + cfg.w_quality * (1.0 - quality) - cfg.w_rule * rule_confidence + cfg.w_volatility * recent_volatility;
    (cfg.t_base * factor).clamp(cfg.t_min, cfg.t_max)
}

fn check_dims(expected: usize, vs: &[&[f64]]) -> Result<(), BeliefError> {
    for v in vs {
        if v.len() != expected {
            return Err(BeliefError::DimensionMismatch { expected, got: v.len() });
        }
    }
    Ok(())
}

/// Convex combination of the previous smoothed belief with rule, retrieval
/// and tempered model scores.
pub fn fuse(
    prior: &[f64],
    scores: &ScoreBundle,
    cfg: &StabilizerConfig,
    temperature: f64,
) -> Result<Vec<f64>, BeliefError> {
    let n = prior.len();
    check_dims(n, &[&scores.s_rule, &scores.s_retrieval, &scores.raw_logits])?;
    let s_llm = temperature_scale(&scores.raw_logits, temperature)?;
    let fused = (0..n)
        .map(|h| {
            cfg.alpha * prior[h]
                + cfg.beta * scores.s_rule[h]
                + cfg.gamma * scores.s_retrieval[h]
                + cfg.delta * s_llm[h]
        })
        .collect();
    Ok(renormalize(fused))
}

pub fn smooth(prev: &[f64], fused: &[f64], lambda: f64) -> Result<Vec<f64>, BeliefError> {
    check_dims(prev.len(), &[fused])?;
    let out = prev.iter().zip(fused).map(|(p, f)| lambda * p + (1.0 - lambda) * f).collect();
    Ok(renormalize(out))
}

pub fn entropy(dist: &[f64]) -> f64 {
    dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum::<f64>().max(0.0)
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean adjacent-step L1 change.
pub fn volatility(seq: &[Vec<f64>]) -> Result<f64, BeliefError> {
    if seq.len() < 2 {
        return Err(BeliefError::TooShort(seq.len()));
    }
    let n = seq[0].len();
    for v in seq {
        check_dims(n, &[v])?;
    }
    let total: f64 = seq.windows(2).map(|w| l1(&w[1], &w[0])).sum();
    Ok(total / (seq.len() - 1) as f64)
}

/// Volatility over the beliefs of the requested variant.
pub fn volatility_of(seq: &[BeliefState], variant: BeliefVariant) -> Result<f64, BeliefError> {
    let dists: Vec<Vec<f64>> = seq.iter().filter(|b| b.variant == variant).map(|b| b.dist.clone()).collect();
    volatility(&dists)
}

/// 1 minus normalised entropy: 0 for uniform, 1 for a point mass.
pub fn concentration(dist: &[f64]) -> f64 {
    if dist.len() < 2 {
        return 1.0;
    }
    (1.0 - entropy(dist) / (dist.len() as f64).log2()).clamp(0.0, 1.0)
}

/// Output of one stabilizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizedStep {
    pub raw: Vec<f64>,
    pub fused: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub temperature: f64,
}

/// Runs one turn of the stabilizer for the given stage. `prev` is the
/// previous smoothed belief and `recent` the recent smoothed history used
/// for the volatility input of the dynamic temperature.
pub fn stabilize(
    stage: StabilizerStage,
    prev: &[f64],
    recent: &[Vec<f64>],
    scores: &ScoreBundle,
    cfg: &StabilizerConfig,
) -> Result<StabilizedStep, BeliefError> {
    check_dims(prev.len(), &[&scores.raw_logits])?;
    let raw = temperature_scale(&scores.raw_logits, 1.0)?;
    let step = match stage {
        StabilizerStage::Raw => StabilizedStep { fused: raw.clone(), smoothed: raw.clone(), raw, temperature: 1.0 },
        StabilizerStage::Temp => {
            let s = temperature_scale(&scores.raw_logits, cfg.t_base)?;
            StabilizedStep { fused: s.clone(), smoothed: s, raw, temperature: cfg.t_base }
        }
        StabilizerStage::TempSmooth | StabilizerStage::TempSmoothConservative => {
            let s = temperature_scale(&scores.raw_logits, cfg.t_base)?;
            let smoothed = smooth(prev, &s, cfg.lambda)?;
            StabilizedStep { fused: s, smoothed, raw, temperature: cfg.t_base }
        }
        StabilizerStage::Full => {
            let window = recent.len().min(cfg.volatility_window);
            let recent_vol = if window >= 2 { volatility(&recent[recent.len() - window..])? } else { 0.0 };
            let t = adapt_temperature(cfg, scores.quality, scores.rule_confidence, recent_vol);
            let fused = fuse(prev, scores, cfg, t)?;
            let smoothed = smooth(prev, &fused, cfg.lambda)?;
            StabilizedStep { raw, fused, smoothed, temperature: t }
        }
    };
    Ok(step)
}
