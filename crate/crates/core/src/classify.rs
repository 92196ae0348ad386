//! Weighted k-nearest-neighbor voting.
//!
//! A neighbor at zero-based rank `i` and cosine distance `d_i` contributes a
//! weight to its label's score:
//!
//! | scheme     | weight                                              |
//! |------------|-----------------------------------------------------|
//! | Plurality  | `1`                                                 |
//! | Distance   | `exp(-d_i)^xi`                                      |
//! | Softmax    | `exp(s_i / tau) / sum_j exp(s_j / tau)`, `s = 1 - d` |
//! | Rank       | `1 / (alpha + i)`                                   |
//!
//! Weights are optionally multiplied by a per-entry reliability factor. The
//! predicted label is the highest-scoring one, ties going to the smaller
//! label id.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queries::QuerySet;
use crate::search::{Neighbor, NeighborSet, Retriever};
use crate::store::VisualMemory;
use crate::vector::{Distance, LabelId};

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_XI: f64 = 1.0;
/// Neighbors considered by the plurality-count confidence.
pub const CONFIDENCE_DEPTH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Plurality,
    Distance,
    Softmax,
    Rank,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Plurality, Scheme::Distance, Scheme::Softmax, Scheme::Rank];

    /// Name of the scheme's tunable hyperparameter, if it has one.
    pub fn hyperparameter(self) -> Option<&'static str> {
        match self {
            Scheme::Plurality => None,
            Scheme::Distance => Some("xi"),
            Scheme::Softmax => Some("tau"),
            Scheme::Rank => Some("alpha"),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Plurality => "plurality",
            Scheme::Distance => "distance",
            Scheme::Softmax => "softmax",
            Scheme::Rank => "rank",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plurality" => Ok(Scheme::Plurality),
            "distance" => Ok(Scheme::Distance),
            "softmax" => Ok(Scheme::Softmax),
            "rank" => Ok(Scheme::Rank),
            other => Err(Error::InvalidConfig(format!("unknown voting scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteConfig {
    pub scheme: Scheme,
    pub k: usize,
    pub alpha: f64,
    pub tau: f64,
    pub xi: f64,
}

impl VoteConfig {
    pub fn new(scheme: Scheme, k: usize) -> Self {
        VoteConfig {
            scheme,
            k,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            xi: DEFAULT_XI,
        }
    }

    pub fn with_k(self, k: usize) -> Self {
        VoteConfig { k, ..self }
    }

    /// Sets the scheme's own hyperparameter (no-op for plurality).
    pub fn with_hyperparameter(self, value: f64) -> Self {
        match self.scheme {
            Scheme::Plurality => self,
            Scheme::Distance => VoteConfig { xi: value, ..self },
            Scheme::Softmax => VoteConfig { tau: value, ..self },
            Scheme::Rank => VoteConfig { alpha: value, ..self },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::InvalidConfig(format!("xi must be >= 0, got {}", self.xi)));
        }
        Ok(())
    }
}

/// Per-entry reliability factor, `1.0` when unknown.
pub trait Reliability: Sync {
    fn gamma(&self, id: u64) -> f64;
}

impl Reliability for VisualMemory {
    fn gamma(&self, id: u64) -> f64 {
        self.row_of(id).map_or(1.0, |row| VisualMemory::gamma(self, row))
    }
}

impl Reliability for HashMap<u64, f64> {
    fn gamma(&self, id: u64) -> f64 {
        self.get(&id).copied().unwrap_or(1.0)
    }
}

/// Weight of the neighbor at `rank` with distance `distance`, given the
/// distances of all neighbors being aggregated (only softmax needs them).
pub fn weight(config: &VoteConfig, rank: usize, distance: Distance, neighbor_distances: &[Distance]) -> f64 {
    match config.scheme {
        Scheme::Plurality => 1.0,
        Scheme::Distance => (-distance.value()).exp().powf(config.xi),
        Scheme::Softmax => {
            let max_sim = neighbor_distances
                .iter()
                .map(|d| 1.0 - d.value())
                .fold(1.0 - distance.value(), f64::max);
            let z: f64 = neighbor_distances
                .iter()
                .map(|d| ((1.0 - d.value() - max_sim) / config.tau).exp())
                .sum();
            ((1.0 - distance.value() - max_sim) / config.tau).exp() / z
        }
        Scheme::Rank => 1.0 / (config.alpha + rank as f64),
    }
}

/// Weights for a prefix of neighbors, in rank order.
pub fn weights(config: &VoteConfig, neighbors: &[Neighbor]) -> Vec<f64> {
    match config.scheme {
        Scheme::Softmax => {
            let sims: Vec<f64> = neighbors.iter().map(|n| 1.0 - n.distance.value()).collect();
            let max_sim = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = sims.iter().map(|s| ((s - max_sim) / config.tau).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        }
        _ => neighbors
            .iter()
            .enumerate()
            .map(|(i, n)| weight(config, i, n.distance, &[]))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub label: LabelId,
    /// Aggregate score per label present among the neighbors, by label id.
    pub scores: Vec<(LabelId, f64)>,
    /// Count of the most frequent label among the first
    /// `min(k, 100)` neighbors.
    pub confidence: u32,
}

impl Prediction {
    pub fn score(&self, label: LabelId) -> f64 {
        self.scores
            .iter()
            .find(|(l, _)| *l == label)
            .map_or(0.0, |(_, s)| *s)
    }
}

/// Aggregates the first `config.k` neighbors (fewer if the set is shorter).
pub fn classify(neighbors: &NeighborSet, config: &VoteConfig, reliability: Option<&dyn Reliability>) -> Result<Prediction> {
    classify_items(&neighbors.items, config, reliability)
}

pub(crate) fn classify_items(items: &[Neighbor], config: &VoteConfig, reliability: Option<&dyn Reliability>) -> Result<Prediction> {
    if items.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    let used = &items[..config.k.clamp(1, items.len())];
    let w = weights(config, used);

    let mut scores: BTreeMap<LabelId, f64> = BTreeMap::new();
    for (n, w) in used.iter().zip(w) {
        let gamma = reliability.map_or(1.0, |r| r.gamma(n.id));
        *scores.entry(n.label).or_insert(0.0) += w * gamma;
    }
    let mut best = (LabelId::MAX, f64::NEG_INFINITY);
    for (&label, &score) in &scores {
        if score > best.1 {
            best = (label, score);
        }
    }

    let mut counts: HashMap<LabelId, u32> = HashMap::new();
    for n in &used[..used.len().min(CONFIDENCE_DEPTH)] {
        *counts.entry(n.label).or_insert(0) += 1;
    }
    let confidence = counts.values().copied().max().unwrap_or(0);

    Ok(Prediction {
        label: best.0,
        scores: scores.into_iter().collect(),
        confidence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop neighbors whose id equals the query id.
    pub exclude_self: bool,
    /// Multiply weights by the memory's per-entry reliability.
    pub use_reliability: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exclude_self: false,
            use_reliability: true,
        }
    }
}

/// Top-1 accuracy for every `k` in `1..=k_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyCurve {
    pub config: VoteConfig,
    pub queries: usize,
    /// `accuracy[k - 1]` is the accuracy when aggregating `k` neighbors.
    pub accuracy: Vec<f64>,
}

impl AccuracyCurve {
    pub fn at(&self, k: usize) -> f64 {
        self.accuracy[k - 1]
    }

    pub fn k_max(&self) -> usize {
        self.accuracy.len()
    }

    /// `(k, accuracy)` of the best k; the smallest such k on ties.
    pub fn best(&self) -> (usize, f64) {
        let mut best = (1, f64::NEG_INFINITY);
        for (i, &a) in self.accuracy.iter().enumerate() {
            if a > best.1 {
                best = (i + 1, a);
            }
        }
        best
    }
}

/// Fraction of queries correctly classified at each `k` in `1..=k_max`, from
/// precomputed neighbor sets. Each `k` is an independent [`classify`] call.
pub fn accuracy_by_k(
    sets: &[NeighborSet],
    truth: &[Option<LabelId>],
    config: &VoteConfig,
    k_max: usize,
    reliability: Option<&dyn Reliability>,
) -> Result<Vec<f64>> {
    assert_eq!(sets.len(), truth.len());
    config.validate()?;
    let per_query: Vec<Vec<bool>> = sets
        .par_iter()
        .zip(truth.par_iter())
        .map(|(set, t)| {
            (1..=k_max)
                .map(|k| {
                    let p = classify_items(&set.items, &config.with_k(k), reliability)?;
                    Ok(Some(p.label) == *t)
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<_>>()?;
    let mut correct = vec![0usize; k_max];
    for row in &per_query {
        for (c, &ok) in correct.iter_mut().zip(row) {
            *c += usize::from(ok);
        }
    }
    let n = sets.len().max(1) as f64;
    Ok(correct.into_iter().map(|c| c as f64 / n).collect())
}

/// Retrieves `config.k` neighbors once per query and reports accuracy for
/// every k up to it.
pub fn evaluate(retriever: Retriever<'_>, queries: &QuerySet, config: &VoteConfig, options: EvalOptions) -> Result<AccuracyCurve> {
    config.validate()?;
    let memory = retriever.memory();
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let sets = retriever.search_excluding(queries, config.k, options.exclude_self)?;
    let truth = queries.label_ids(memory);
    let reliability: Option<&dyn Reliability> = options.use_reliability.then_some(memory as &dyn Reliability);
    let accuracy = accuracy_by_k(&sets, &truth, config, config.k, reliability)?;
    Ok(AccuracyCurve {
        config: *config,
        queries: queries.len(),
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub scheme: Scheme,
    pub value: f64,
    pub best_k: usize,
    pub best_accuracy: f64,
}

/// For each hyperparameter value, the best accuracy over `k` in `1..=k_max`.
pub fn sweep(
    retriever: Retriever<'_>,
    queries: &QuerySet,
    base: &VoteConfig,
    grid: &[f64],
    options: EvalOptions,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("hyperparameter grid is empty".into()));
    }
    base.validate()?;
    let configs: Vec<VoteConfig> = grid.iter().map(|&v| base.with_hyperparameter(v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let memory = retriever.memory();
    let sets = retriever.search_excluding(queries, base.k, options.exclude_self)?;
    let truth = queries.label_ids(memory);
    let reliability: Option<&dyn Reliability> = options.use_reliability.then_some(memory as &dyn Reliability);
    grid.iter()
        .zip(&configs)
        .map(|(&value, config)| {
            let curve = AccuracyCurve {
                config: *config,
                queries: queries.len(),
                accuracy: accuracy_by_k(&sets, &truth, config, base.k, reliability)?,
            };
            let (best_k, best_accuracy) = curve.best();
            Ok(SweepRow {
                scheme: base.scheme,
                value,
                best_k,
                best_accuracy,
            })
        })
        .collect()
}
