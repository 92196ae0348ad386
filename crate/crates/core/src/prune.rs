//! Sample-quality estimation by self-querying, and hard/soft memory pruning.
//!
//! Every entry is used once as a query against the memory it lives in (its
//! own match removed). When the vote gets the entry's label wrong, each
//! neighbor that is blamed for the error has its wrong-vote count `v`
//! incremented. Hard pruning deletes entries with `v >= threshold`; soft
//! pruning keeps them but scales their vote by `gamma = d / (c + v)`
//! (`gamma = 1` when `v = 0`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{accuracy_by_k, classify_items, Reliability, Scheme, VoteConfig};
use crate::error::{Error, Result};
use crate::queries::QuerySet;
use crate::search::{exact_search_batch, Retriever};
use crate::store::VisualMemory;
use crate::vector::LabelId;

pub const DEFAULT_K_RETRIEVE: usize = 100;
pub const DEFAULT_HARD_THRESHOLD: u32 = 128;
pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_D: f64 = 1.75;

/// Queries retrieved per batch during estimation; bounds peak memory.
const ESTIMATE_CHUNK: usize = 4096;

/// Which neighbors of a misclassified self-query are charged a wrong vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlameRule {
    /// Neighbors whose label differs from the query's label.
    WrongLabel,
    /// Neighbors carrying the (wrong) predicted label.
    PredictedLabel,
}

impl std::str::FromStr for BlameRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrong-label" => Ok(BlameRule::WrongLabel),
            "predicted-label" => Ok(BlameRule::PredictedLabel),
            other => Err(Error::InvalidConfig(format!("unknown blame rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub k_retrieve: usize,
    /// Voting used for the inner self-classification; its `k` is replaced
    /// by `k_retrieve`.
    pub vote: VoteConfig,
    pub blame: BlameRule,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            k_retrieve: DEFAULT_K_RETRIEVE,
            vote: VoteConfig::new(Scheme::Rank, DEFAULT_K_RETRIEVE),
            blame: BlameRule::WrongLabel,
        }
    }
}

/// `d / (c + v)` for `v >= 1`, otherwise `1`.
pub fn reliability_factor(v: u32, c: f64, d: f64) -> f64 {
    if v == 0 {
        1.0
    } else {
        d / (c + f64::from(v))
    }
}

fn check_soft_params(c: f64, d: f64) -> Result<()> {
    if !(c > 0.0 && d > 0.0 && c.is_finite() && d.is_finite()) || d / (c + 1.0) > 1.0 {
        return Err(Error::InvalidConfig(format!(
            "soft pruning needs c > 0, d > 0 and d / (c + 1) <= 1 (got c = {c}, d = {d})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub generation: u64,
    pub digest: u64,
    pub config: PruneConfig,
    pub queries: usize,
    pub misclassified: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub header: ReportHeader,
    /// `(id, v)` in memory row order.
    pub votes: Vec<(u64, u32)>,
}

#[derive(Serialize, Deserialize)]
struct VoteRecord {
    id: u64,
    v: u32,
}

impl ReliabilityReport {
    pub fn total_votes(&self) -> u64 {
        self.votes.iter().map(|&(_, v)| u64::from(v)).sum()
    }

    /// Ids with `v > 0`.
    pub fn flagged(&self) -> impl Iterator<Item = u64> + '_ {
        self.votes.iter().filter(|(_, v)| *v > 0).map(|(id, _)| *id)
    }

    fn check_fresh(&self, memory: &VisualMemory) -> Result<()> {
        if self.header.generation != memory.generation() || self.header.digest != memory.digest() {
            return Err(Error::StaleReport {
                report: self.header.generation,
                memory: memory.generation(),
            });
        }
        Ok(())
    }

    /// `reliability.jsonl`: a parameter header line, then one `{id, v}` per
    /// entry.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", serde_json::to_string(&self.header).expect("header serializes")).map_err(io)?;
        for &(id, v) in &self.votes {
            writeln!(w, "{}", serde_json::to_string(&VoteRecord { id, v }).expect("record serializes")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "missing header line"))?
            .map_err(|e| Error::io(path, e))?;
        let header: ReportHeader =
            serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        let mut votes = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VoteRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
            votes.push((rec.id, rec.v));
        }
        Ok(ReliabilityReport { header, votes })
    }
}

/// Self-queries every entry and counts wrong votes.
pub fn estimate_reliability(memory: &VisualMemory, config: &PruneConfig) -> Result<ReliabilityReport> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if config.k_retrieve == 0 {
        return Err(Error::InvalidConfig("k_retrieve must be at least 1".into()));
    }
    if config.k_retrieve + 1 > memory.len() {
        return Err(Error::MemoryTooSmall {
            need: config.k_retrieve + 1,
            have: memory.len(),
        });
    }
    let vote = config.vote.with_k(config.k_retrieve);
    vote.validate()?;

    let all = QuerySet::from_memory(memory);
    let mut counts = vec![0u32; memory.len()];
    let mut misclassified = 0usize;
    for start in (0..memory.len()).step_by(ESTIMATE_CHUNK) {
        let end = (start + ESTIMATE_CHUNK).min(memory.len());
        let mut chunk = QuerySet::new(memory.dims());
        for row in start..end {
            chunk.push(all.id(row), all.vector(row), all.label(row), None)?;
        }
        let sets = exact_search_batch(memory, &chunk, config.k_retrieve + 1)?;
        let blamed: Vec<Vec<usize>> = sets
            .into_par_iter()
            .enumerate()
            .map(|(i, set)| {
                let row = start + i;
                let own_id = memory.id(row);
                let set = set.without(own_id, config.k_retrieve);
                assert!(set.ids().all(|id| id != own_id), "self-match must not vote");
                let truth: LabelId = memory.label(row);
                let pred = classify_items(&set.items, &vote, None)?;
                if pred.label == truth {
                    return Ok(Vec::new());
                }
                Ok(set
                    .items
                    .iter()
                    .filter(|n| match config.blame {
                        BlameRule::WrongLabel => n.label != truth,
                        BlameRule::PredictedLabel => n.label == pred.label,
                    })
                    .map(|n| memory.row_of(n.id).expect("neighbor exists"))
                    .collect())
            })
            .collect::<Result<_>>()?;
        for rows in blamed {
            if !rows.is_empty() {
                misclassified += 1;
            }
            for r in rows {
                counts[r] += 1;
            }
        }
    }

    Ok(ReliabilityReport {
        header: ReportHeader {
            generation: memory.generation(),
            digest: memory.digest(),
            config: *config,
            queries: memory.len(),
            misclassified,
        },
        votes: memory.ids().iter().copied().zip(counts).collect(),
    })
}

/// Removes every entry with `v >= threshold`; returns the removed ids.
pub fn hard_prune(memory: &mut VisualMemory, report: &ReliabilityReport, threshold: u32) -> Result<Vec<u64>> {
    if threshold == 0 {
        return Err(Error::InvalidThreshold(threshold));
    }
    report.check_fresh(memory)?;
    let doomed: Vec<u64> = report
        .votes
        .iter()
        .filter(|(_, v)| *v >= threshold)
        .map(|(id, _)| *id)
        .collect();
    memory.remove(&doomed)?;
    Ok(doomed)
}

/// Stores `v` and `gamma = d / (c + v)` on every entry.
pub fn soft_prune(memory: &mut VisualMemory, report: &ReliabilityReport, c: f64, d: f64) -> Result<()> {
    check_soft_params(c, d)?;
    report.check_fresh(memory)?;
    for &(id, v) in &report.votes {
        let row = memory.row_of(id).ok_or(Error::UnknownId(id))?;
        memory.set_reliability(row, v, reliability_factor(v, c, d));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PruningVariant {
    None,
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruningRow {
    pub variant: PruningVariant,
    pub scheme: Scheme,
    pub memory_size: usize,
    pub best_k: usize,
    pub best_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub k_max: usize,
    pub threshold: u32,
    pub c: f64,
    pub d: f64,
    pub exclude_self: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            k_max: 100,
            threshold: DEFAULT_HARD_THRESHOLD,
            c: DEFAULT_C,
            d: DEFAULT_D,
            exclude_self: false,
        }
    }
}

/// Best accuracy over `k in 1..=k_max` for each scheme with no, hard and
/// soft pruning. `base` supplies the non-k hyperparameters of every scheme.
pub fn compare_pruning(
    memory: &VisualMemory,
    queries: &QuerySet,
    schemes: &[Scheme],
    base: &VoteConfig,
    report: &ReliabilityReport,
    options: CompareOptions,
) -> Result<Vec<PruningRow>> {
    report.check_fresh(memory)?;
    let k_max = options.k_max;

    let mut hard = memory.clone();
    hard_prune(&mut hard, report, options.threshold)?;
    let mut soft = memory.clone();
    soft_prune(&mut soft, report, options.c, options.d)?;

    let full_sets = Retriever::Exact(memory).search_excluding(queries, k_max, options.exclude_self)?;
    let hard_sets = Retriever::Exact(&hard).search_excluding(queries, k_max, options.exclude_self)?;
    let truth_full = queries.label_ids(memory);
    let truth_hard = queries.label_ids(&hard);

    let mut rows = Vec::new();
    for (variant, sets, truth, mem, reliability) in [
        (PruningVariant::None, &full_sets, &truth_full, memory, None),
        (PruningVariant::Hard, &hard_sets, &truth_hard, &hard, None),
        (PruningVariant::Soft, &full_sets, &truth_full, &soft, Some(&soft as &dyn Reliability)),
    ] {
        for &scheme in schemes {
            let config = VoteConfig { scheme, ..*base }.with_k(k_max);
            let acc = accuracy_by_k(sets, truth, &config, k_max, reliability)?;
            let (best_k, best_accuracy) = acc
                .iter()
                .enumerate()
                .fold((1, f64::NEG_INFINITY), |b, (i, &a)| if a > b.1 { (i + 1, a) } else { b });
            rows.push(PruningRow {
                variant,
                scheme,
                memory_size: mem.len(),
                best_k,
                best_accuracy,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::exact_search;
    use crate::store::MemoryEntry;
    use crate::vector::{normalize, EmbeddingVector};
    use approx::assert_abs_diff_eq;

    fn two_clusters(poison: bool) -> VisualMemory {
        let mut m = VisualMemory::new(3).unwrap();
        let mut entries = Vec::new();
        for i in 0..20u64 {
            let t = i as f32 * 0.01;
            entries.push(MemoryEntry::new(i, normalize(&[1.0, t, 0.0]).unwrap(), "a"));
            entries.push(MemoryEntry::new(100 + i, normalize(&[0.0, t, 1.0]).unwrap(), "b"));
        }
        if poison {
            // labeled "b" but sits in the middle of cluster "a"
            entries.push(MemoryEntry::new(999, normalize(&[1.0, 0.095, 0.0]).unwrap(), "b"));
        }
        m.insert(entries).unwrap();
        m
    }

    fn cfg(k: usize) -> PruneConfig {
        PruneConfig {
            k_retrieve: k,
            ..PruneConfig::default()
        }
    }

    #[test]
    fn gamma_values() {
        assert_eq!(reliability_factor(0, 1.0, 1.75), 1.0);
        assert_eq!(reliability_factor(1, 1.0, 1.75), 0.875);
        assert_abs_diff_eq!(reliability_factor(10, 1.0, 1.75), 1.75 / 11.0, epsilon = 1e-15);
        assert_abs_diff_eq!(reliability_factor(100, 1.0, 1.75), 1.75 / 101.0, epsilon = 1e-15);
        for v in 1..500 {
            assert!(reliability_factor(v + 1, 1.0, 1.75) <= reliability_factor(v, 1.0, 1.75));
            assert!(reliability_factor(v, 1.0, 1.75) > 0.0);
        }
    }

    #[test]
    fn clean_memory_has_no_wrong_votes() {
        let m = two_clusters(false);
        let r = estimate_reliability(&m, &cfg(5)).unwrap();
        assert_eq!(r.total_votes(), 0);
        assert_eq!(r.header.misclassified, 0);
    }

    /// Direct simulation: with k = 5, which self-queries are misclassified and
    /// whom do they blame?
    #[test]
    fn poisoned_entry_is_charged() {
        let m = two_clusters(true);
        let r = estimate_reliability(&m, &cfg(5)).unwrap();
        let v = |id: u64| r.votes.iter().find(|(i, _)| *i == id).unwrap().1;

        // Recompute by brute force: a query is misclassified iff the rank
        // vote over its 5 other nearest neighbors disagrees with its label.
        let mut expected = std::collections::HashMap::<u64, u32>::new();
        for row in 0..m.len() {
            let q = EmbeddingVector::from_normalized(m.vector(row).to_vec()).unwrap();
            let set = exact_search(&m, &q, 6).unwrap().without(m.id(row), 5);
            let mut score = [0.0f64; 2];
            for n in &set.items {
                score[n.label as usize] += 1.0 / (2.0 + n.rank as f64);
            }
            let pred = if score[1] > score[0] { 1 } else { 0 };
            if pred != m.label(row) {
                for n in set.items.iter().filter(|n| n.label != m.label(row)) {
                    *expected.entry(n.id).or_default() += 1;
                }
            }
        }
        for (id, got) in &r.votes {
            assert_eq!(*got, expected.get(id).copied().unwrap_or(0), "id {id}");
        }
        // the poisoned query itself is misclassified and the "a" entries
        // around it are charged; the poisoned entry is never rewarded
        assert!(r.header.misclassified >= 1);
        assert!(r.total_votes() <= (r.header.misclassified * 5) as u64);
        assert_eq!(v(100), 0);
    }

    #[test]
    fn too_small_and_empty() {
        let m = two_clusters(false);
        assert!(matches!(estimate_reliability(&m, &cfg(40)), Err(Error::MemoryTooSmall { .. })));
        let e = VisualMemory::new(3).unwrap();
        assert!(matches!(estimate_reliability(&e, &cfg(1)), Err(Error::EmptyMemory)));
    }

    #[test]
    fn hard_and_soft_pruning() {
        let m = two_clusters(true);
        let r = estimate_reliability(&m, &cfg(5)).unwrap();

        let mut same = m.clone();
        assert!(hard_prune(&mut same, &r, u32::MAX).unwrap().is_empty());
        assert_eq!(same, m);

        let mut z = m.clone();
        assert!(matches!(hard_prune(&mut z, &r, 0), Err(Error::InvalidThreshold(0))));

        let mut hard = m.clone();
        let removed = hard_prune(&mut hard, &r, 1).unwrap();
        assert_eq!(removed.len(), r.flagged().count());
        let qs = QuerySet::from_memory(&m);
        for set in exact_search_batch(&hard, &qs, hard.len()).unwrap() {
            assert!(set.ids().all(|id| !removed.contains(&id)));
        }
        // stale after mutation
        assert!(matches!(hard_prune(&mut hard, &r, 1), Err(Error::StaleReport { .. })));
        assert!(matches!(soft_prune(&mut hard, &r, 1.0, 1.75), Err(Error::StaleReport { .. })));

        let mut soft = m.clone();
        soft_prune(&mut soft, &r, 1.0, 1.75).unwrap();
        for &(id, v) in &r.votes {
            let row = soft.row_of(id).unwrap();
            assert_eq!(soft.wrong_votes(row), v);
            assert_eq!(soft.gamma(row), reliability_factor(v, 1.0, 1.75));
        }
        assert!(soft_prune(&mut m.clone(), &r, 1.0, 3.0).is_err());
    }

    #[test]
    fn report_round_trip() {
        let m = two_clusters(true);
        let r = estimate_reliability(&m, &cfg(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("reliability.jsonl");
        r.save(&p).unwrap();
        assert_eq!(ReliabilityReport::load(&p).unwrap(), r);
    }

    #[test]
    fn compare_on_clean_memory_is_flat() {
        let m = two_clusters(false);
        let r = estimate_reliability(&m, &cfg(5)).unwrap();
        let qs = QuerySet::from_memory(&m);
        let rows = compare_pruning(
            &m,
            &qs,
            &[Scheme::Plurality, Scheme::Rank],
            &VoteConfig::new(Scheme::Rank, 10),
            &r,
            CompareOptions {
                k_max: 10,
                exclude_self: true,
                ..CompareOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        for scheme in [Scheme::Plurality, Scheme::Rank] {
            let accs: Vec<f64> = rows.iter().filter(|r| r.scheme == scheme).map(|r| r.best_accuracy).collect();
            assert!(accs.iter().all(|&a| a == accs[0]));
        }
    }
}
