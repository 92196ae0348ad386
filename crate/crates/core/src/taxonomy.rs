//! Label taxonomies and hierarchical prediction by greedy descent.
//!
//! At every level the query's distances to each child's examples are compared
//! against the distances among those examples with a two-sample KS test; the
//! child whose distributions match best (largest p-value) is followed.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ks::ks_two_sample;
use crate::queries::QuerySet;
use crate::store::{MemoryEntry, VisualMemory};
use crate::vector::{dot, Distance, EmbeddingVector};

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

/// Upper bound on sampled pairs per node for the in-node distance sample.
pub const MAX_IN_PAIRS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
struct Node {
    name: String,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    depth: usize,
}

/// A rooted tree with every leaf at the same depth. Children keep the order
/// in which they were first declared.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyTree {
    nodes: Vec<Node>,
    depth: usize,
}

impl TaxonomyTree {
    /// Builds the trie of `/`-joined paths, one per line. Blank lines are
    /// ignored; `ROOT` itself is implicit.
    pub fn parse(text: &str) -> Result<Self> {
        let mut nodes = vec![Node {
            name: "ROOT".into(),
            parent: None,
            children: Vec::new(),
            depth: 0,
        }];
        let mut child_of: HashMap<(NodeId, String), NodeId> = HashMap::new();
        let mut depth = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('/').collect();
            if parts.iter().any(|p| p.trim().is_empty()) {
                return Err(Error::InvalidTaxonomy(format!("line {}: empty path segment", lineno + 1)));
            }
            match depth {
                None => depth = Some(parts.len()),
                Some(d) if d != parts.len() => {
                    return Err(Error::InvalidTaxonomy(format!(
                        "line {}: path has {} levels, expected {d}",
                        lineno + 1,
                        parts.len()
                    )))
                }
                _ => {}
            }
            let mut cur = ROOT;
            for part in parts {
                let key = (cur, part.trim().to_owned());
                cur = match child_of.get(&key) {
                    Some(&n) => n,
                    None => {
                        let id = nodes.len();
                        let d = nodes[cur].depth + 1;
                        nodes.push(Node {
                            name: key.1.clone(),
                            parent: Some(cur),
                            children: Vec::new(),
                            depth: d,
                        });
                        nodes[cur].children.push(id);
                        child_of.insert(key, id);
                        id
                    }
                };
            }
        }
        Ok(TaxonomyTree {
            nodes,
            depth: depth.unwrap_or(0),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Number of levels below `ROOT`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn name(&self, node: NodeId) -> &str {
        &self.nodes[node].name
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.nodes[node].parent
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.nodes[node].children
    }

    /// Depth of `node`; `ROOT` is level 0.
    pub fn level(&self, node: NodeId) -> usize {
        self.nodes[node].depth
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.nodes[node].children.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        (1..self.nodes.len()).filter(|&n| self.is_leaf(n))
    }

    /// Node ids from `ROOT` down to `node`, inclusive.
    pub fn path_to(&self, node: NodeId) -> Vec<NodeId> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Names below `ROOT` along `path`.
    pub fn path_names(&self, path: &[NodeId]) -> Vec<String> {
        path.iter()
            .filter(|&&n| n != ROOT)
            .map(|&n| self.nodes[n].name.clone())
            .collect()
    }

    /// Follows `names` (without `ROOT`) down from the root.
    pub fn resolve(&self, names: &[String]) -> Option<NodeId> {
        let mut cur = ROOT;
        for name in names {
            cur = *self.nodes[cur]
                .children
                .iter()
                .find(|&&c| self.nodes[c].name == *name)?;
        }
        Some(cur)
    }

    /// The unique leaf named `name`, if there is exactly one.
    pub fn leaf_by_name(&self, name: &str) -> Option<NodeId> {
        let mut found = self.leaves().filter(|&n| self.nodes[n].name == name);
        let first = found.next()?;
        found.next().is_none().then_some(first)
    }

    /// Leaf for a full name path, or for a bare leaf name.
    pub fn find_leaf(&self, spec: &str) -> Option<NodeId> {
        if spec.contains('/') {
            let names: Vec<String> = spec.split('/').map(|s| s.trim().to_owned()).collect();
            self.resolve(&names).filter(|&n| self.is_leaf(n))
        } else {
            self.leaf_by_name(spec)
        }
    }
}

/// What to do with a child that has no examples in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyPolicy {
    /// Fail with `EmptyCandidate`.
    #[default]
    Strict,
    /// Drop it from the candidates.
    Skip,
}

/// Memory rows grouped by tree node, with cached in-node distance samples.
pub struct TaxonomyIndex<'a> {
    tree: &'a TaxonomyTree,
    memory: &'a VisualMemory,
    rows: Vec<Vec<usize>>,
    in_dist: Vec<OnceLock<Vec<f64>>>,
    seed: u64,
}

impl<'a> TaxonomyIndex<'a> {
    /// Places every memory entry at the leaf its taxonomy path names. Entries
    /// without a path fall back to the leaf whose name equals their label.
    pub fn new(tree: &'a TaxonomyTree, memory: &'a VisualMemory, seed: u64) -> Result<Self> {
        let mut rows = vec![Vec::new(); tree.len()];
        for row in 0..memory.len() {
            let leaf = match memory.taxonomy_path(row) {
                Some(path) => tree.resolve(path).filter(|&n| tree.is_leaf(n)).ok_or_else(|| {
                    Error::InvalidTaxonomy(format!("id {}: path {} is not a leaf of the tree", memory.id(row), path.join("/")))
                })?,
                None => {
                    let label = memory.labels().name(memory.label(row));
                    tree.leaf_by_name(label).ok_or_else(|| {
                        Error::InvalidTaxonomy(format!("id {}: no taxonomy path and no leaf named '{label}'", memory.id(row)))
                    })?
                }
            };
            let mut cur = Some(leaf);
            while let Some(n) = cur {
                rows[n].push(row);
                cur = tree.parent(n);
            }
        }
        Ok(TaxonomyIndex {
            tree,
            memory,
            in_dist: (0..tree.len()).map(|_| OnceLock::new()).collect(),
            rows,
            seed,
        })
    }

    pub fn tree(&self) -> &TaxonomyTree {
        self.tree
    }

    /// Memory rows in the subtree of `node`.
    pub fn examples(&self, node: NodeId) -> &[usize] {
        &self.rows[node]
    }

    fn distance(&self, a: &[f32], row: usize) -> f64 {
        Distance::from_dot(dot(a, self.memory.vector(row))).value()
    }

    /// Pairwise distances among the examples of `node`, self-pairs excluded.
    /// All pairs are used up to [`MAX_IN_PAIRS`]; beyond that a seeded sample
    /// of distinct pairs. A single example has no pair and yields `[0.0]`,
    /// the distance of the example to itself.
    pub fn in_distances(&self, node: NodeId) -> &[f64] {
        self.in_dist[node].get_or_init(|| {
            let rows = &self.rows[node];
            let m = rows.len();
            match m {
                0 => Vec::new(),
                1 => vec![0.0],
                _ => {
                    let total = m * (m - 1) / 2;
                    let pair_at = |t: usize| {
                        let (i, j) = unrank_pair(t, m);
                        self.distance(self.memory.vector(rows[i]), rows[j])
                    };
                    if total <= MAX_IN_PAIRS {
                        (0..total).map(pair_at).collect()
                    } else {
                        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                        let mut picks = sample(&mut rng, total, MAX_IN_PAIRS).into_vec();
                        picks.sort_unstable();
                        picks.into_iter().map(pair_at).collect()
                    }
                }
            }
        })
    }

    /// Distances from `x` to every example of `node`.
    pub fn cross_distances(&self, x: &[f32], node: NodeId) -> Vec<f64> {
        self.rows[node].iter().map(|&r| self.distance(x, r)).collect()
    }

    /// Greedy descent from `ROOT`; returns node ids `ROOT..=leaf`.
    pub fn predict(&self, x: &EmbeddingVector, policy: EmptyPolicy) -> Result<Vec<NodeId>> {
        if x.dims() != self.memory.dims() {
            return Err(Error::DimMismatch {
                expected: self.memory.dims(),
                found: x.dims(),
            });
        }
        self.predict_slice(x.as_slice(), policy)
    }

    fn predict_slice(&self, x: &[f32], policy: EmptyPolicy) -> Result<Vec<NodeId>> {
        let tree = self.tree;
        if tree.children(ROOT).is_empty() {
            return Err(Error::NoChildren("ROOT".into()));
        }
        let mut path = vec![ROOT];
        let mut cur = ROOT;
        while !tree.is_leaf(cur) {
            let children = tree.children(cur);
            if children.len() == 1 {
                cur = children[0];
                path.push(cur);
                continue;
            }
            let mut candidates = Vec::with_capacity(children.len());
            for &c in children {
                if self.rows[c].is_empty() {
                    match policy {
                        EmptyPolicy::Strict => return Err(Error::EmptyCandidate(tree.name(c).to_owned())),
                        EmptyPolicy::Skip => continue,
                    }
                }
                candidates.push(c);
            }
            if candidates.is_empty() {
                return Err(Error::EmptyCandidate(format!("every child of {}", tree.name(cur))));
            }
            let p_values: Vec<f64> = candidates
                .par_iter()
                .map(|&c| {
                    let cross = self.cross_distances(x, c);
                    Ok(ks_two_sample(&cross, self.in_distances(c))?.p_value)
                })
                .collect::<Result<_>>()?;
            let mut best = candidates[0];
            let mut max_p = f64::NEG_INFINITY;
            for (&c, &p) in candidates.iter().zip(&p_values) {
                if p > max_p {
                    max_p = p;
                    best = c;
                }
            }
            cur = best;
            path.push(cur);
        }
        Ok(path)
    }

    /// Predicts every query of a set (in parallel, order preserved).
    pub fn predict_all(&self, queries: &QuerySet, policy: EmptyPolicy) -> Result<Vec<Vec<NodeId>>> {
        if queries.dims() != self.memory.dims() {
            return Err(Error::DimMismatch {
                expected: self.memory.dims(),
                found: queries.dims(),
            });
        }
        (0..queries.len())
            .into_par_iter()
            .map(|q| self.predict_slice(queries.vector(q), policy))
            .collect()
    }
}

/// Maps a linear index over `{(i, j) : i < j < m}` (row-major) to its pair.
fn unrank_pair(t: usize, m: usize) -> (usize, usize) {
    // Row i starts at offset i*m - i*(i+1)/2.
    let start = |i: usize| i * m - i * (i + 1) / 2;
    let b = 2.0 * m as f64 - 1.0;
    let mut i = ((b - (b * b - 8.0 * t as f64).max(0.0).sqrt()) / 2.0).floor() as usize;
    i = i.min(m - 2);
    while i > 0 && start(i) > t {
        i -= 1;
    }
    while i + 1 < m - 1 && start(i + 1) <= t {
        i += 1;
    }
    (i, i + 1 + t - start(i))
}

/// One-shot convenience over [`TaxonomyIndex::predict`] with strict candidates.
pub fn hierarchical_predict(x: &EmbeddingVector, memory: &VisualMemory, tree: &TaxonomyTree, seed: u64) -> Result<Vec<NodeId>> {
    if tree.children(ROOT).is_empty() {
        return Err(Error::NoChildren("ROOT".into()));
    }
    TaxonomyIndex::new(tree, memory, seed)?.predict(x, EmptyPolicy::Strict)
}

#[derive(Debug, Clone)]
pub struct GranularityConfig {
    pub ladder: Vec<usize>,
    /// Target exemplars held out as queries.
    pub holdouts: usize,
    pub seed: u64,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        GranularityConfig {
            ladder: vec![0, 1, 5, 10, 25, 50],
            holdouts: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GranularityStep {
    pub exemplars: usize,
    /// Accuracy at levels `1..=depth`.
    pub accuracy: Vec<f64>,
    /// Accuracy of always predicting the most frequent node of each level.
    pub baseline: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GranularityReport {
    pub targets: Vec<String>,
    pub queries: usize,
    pub steps: Vec<GranularityStep>,
}

/// Adds growing numbers of exemplars of one leaf to a memory that otherwise
/// lacks it and measures per-level accuracy on held-out examples of that leaf.
///
/// The leaf's entries in `memory` are shuffled (seeded): the first
/// `config.holdouts` become queries, the rest the exemplar pool. Ladder steps
/// take nested prefixes of the pool. Empty candidates are skipped, so at zero
/// exemplars the leaf cannot be predicted.
pub fn granularity_experiment(
    memory: &VisualMemory,
    tree: &TaxonomyTree,
    target: NodeId,
    config: &GranularityConfig,
) -> Result<GranularityReport> {
    let target_path = tree.path_to(target);
    if !tree.is_leaf(target) || target == ROOT {
        return Err(Error::InvalidTaxonomy(format!("{} is not a leaf", tree.name(target))));
    }
    let full = TaxonomyIndex::new(tree, memory, config.seed)?;
    let mut target_rows = full.examples(target).to_vec();
    let need = config.holdouts + config.ladder.iter().copied().max().unwrap_or(0);
    if config.holdouts == 0 || target_rows.len() < need {
        return Err(Error::InvalidConfig(format!(
            "leaf {} has {} entries; {} holdouts plus a ladder up to {} need {need}",
            tree.name(target),
            target_rows.len(),
            config.holdouts,
            need - config.holdouts
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    target_rows.shuffle(&mut rng);
    let (held, pool) = target_rows.split_at(config.holdouts);

    let mut queries = QuerySet::new(memory.dims());
    for &r in held {
        let label = memory.labels().name(memory.label(r));
        queries.push(memory.id(r), memory.vector(r), label, memory.taxonomy_path(r).map(<[String]>::to_vec))?;
    }
    let target_ids: Vec<u64> = target_rows.iter().map(|&r| memory.id(r)).collect();
    let mut base = memory.clone();
    base.remove(&target_ids)?;
    let pool_entries: Vec<MemoryEntry> = pool.iter().map(|&r| memory.entry(memory.id(r)).expect("row exists")).collect();

    let depth = tree.depth();
    let mut steps = Vec::with_capacity(config.ladder.len());
    for &n in &config.ladder {
        let mut mem = base.clone();
        mem.insert(pool_entries[..n].to_vec())?;
        let index = TaxonomyIndex::new(tree, &mem, config.seed)?;
        let paths = index.predict_all(&queries, EmptyPolicy::Skip)?;
        let accuracy = (1..=depth)
            .map(|l| paths.iter().filter(|p| p[l] == target_path[l]).count() as f64 / paths.len() as f64)
            .collect();
        let baseline = (1..=depth)
            .map(|l| {
                let majority = (1..tree.len())
                    .filter(|&node| tree.level(node) == l)
                    .max_by(|&a, &b| index.examples(a).len().cmp(&index.examples(b).len()).then(b.cmp(&a)))
                    .expect("level is populated");
                if majority == target_path[l] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        steps.push(GranularityStep {
            exemplars: n,
            accuracy,
            baseline,
        });
    }
    Ok(GranularityReport {
        targets: vec![tree.path_names(&target_path).join("/")],
        queries: queries.len(),
        steps,
    })
}

/// Runs [`granularity_experiment`] for several leaves and averages every
/// step across them.
pub fn granularity_over_targets(
    memory: &VisualMemory,
    tree: &TaxonomyTree,
    targets: &[NodeId],
    config: &GranularityConfig,
) -> Result<GranularityReport> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no target leaves".into()));
    }
    let reports: Vec<GranularityReport> = targets
        .iter()
        .map(|&t| granularity_experiment(memory, tree, t, config))
        .collect::<Result<_>>()?;
    let n = reports.len() as f64;
    let mut steps = reports[0].steps.clone();
    for (s, step) in steps.iter_mut().enumerate() {
        for l in 0..step.accuracy.len() {
            step.accuracy[l] = reports.iter().map(|r| r.steps[s].accuracy[l]).sum::<f64>() / n;
            step.baseline[l] = reports.iter().map(|r| r.steps[s].baseline[l]).sum::<f64>() / n;
        }
    }
    Ok(GranularityReport {
        targets: reports.iter().flat_map(|r| r.targets.clone()).collect(),
        queries: reports.iter().map(|r| r.queries).sum(),
        steps,
    })
}

/// A seeded choice of `count` distinct leaves, in ascending node order.
pub fn sample_leaves(tree: &TaxonomyTree, count: usize, seed: u64) -> Vec<NodeId> {
    let leaves: Vec<NodeId> = tree.leaves().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<NodeId> = sample(&mut rng, leaves.len(), count.min(leaves.len()))
        .into_iter()
        .map(|i| leaves[i])
        .collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::normalize;

    const PATHS: &str = "A/x/1\nA/x/2\nA/y/3\nB/z/4\n";

    #[test]
    fn parse_trie() {
        let t = TaxonomyTree::parse(PATHS).unwrap();
        assert_eq!(t.depth(), 3);
        assert_eq!(t.children(ROOT).len(), 2);
        let leaf = t.find_leaf("A/y/3").unwrap();
        assert_eq!(t.path_names(&t.path_to(leaf)), vec!["A", "y", "3"]);
        assert_eq!(t.leaves().count(), 4);
        assert_eq!(t.find_leaf("4"), t.resolve(&["B".into(), "z".into(), "4".into()]));
        // declared order is kept
        assert_eq!(t.name(t.children(ROOT)[0]), "A");
        assert!(TaxonomyTree::parse("A/b\nC\n").is_err());
        assert!(TaxonomyTree::parse("A//b\n").is_err());
    }

    #[test]
    fn unrank_covers_all_pairs() {
        for m in 2..40 {
            let mut expect = Vec::new();
            for i in 0..m {
                for j in i + 1..m {
                    expect.push((i, j));
                }
            }
            let got: Vec<_> = (0..expect.len()).map(|t| unrank_pair(t, m)).collect();
            assert_eq!(got, expect, "m = {m}");
        }
        let m = 1_000_000;
        let last = m * (m - 1) / 2 - 1;
        assert_eq!(unrank_pair(last, m), (m - 2, m - 1));
    }

    fn memory_for(tree_text: &str, points: &[(&str, [f32; 3])]) -> (TaxonomyTree, VisualMemory) {
        let t = TaxonomyTree::parse(tree_text).unwrap();
        let mut m = VisualMemory::new(3).unwrap();
        m.insert(
            points
                .iter()
                .enumerate()
                .map(|(i, (path, v))| {
                    let names: Vec<String> = path.split('/').map(String::from).collect();
                    let label = names.last().unwrap().clone();
                    MemoryEntry::new(i as u64, normalize(v).unwrap(), label).with_taxonomy(names)
                })
                .collect(),
        )
        .unwrap();
        (t, m)
    }

    #[test]
    fn single_leaf_tree() {
        let (t, m) = memory_for("A/b\n", &[("A/b", [1.0, 0.0, 0.0])]);
        let q = normalize(&[0.0, 1.0, 0.0]).unwrap();
        let path = hierarchical_predict(&q, &m, &t, 0).unwrap();
        assert_eq!(t.path_names(&path), vec!["A", "b"]);
    }

    #[test]
    fn empty_candidates() {
        let (t, m) = memory_for("A/b\nC/d\n", &[("A/b", [1.0, 0.0, 0.0])]);
        let q = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(hierarchical_predict(&q, &m, &t, 0), Err(Error::EmptyCandidate(_))));
        let idx = TaxonomyIndex::new(&t, &m, 0).unwrap();
        let path = idx.predict(&q, EmptyPolicy::Skip).unwrap();
        assert_eq!(t.path_names(&path), vec!["A", "b"]);

        let empty = TaxonomyTree::parse("").unwrap();
        assert!(matches!(hierarchical_predict(&q, &m, &empty, 0), Err(Error::NoChildren(_))));
    }

    #[test]
    fn in_distances_exclude_self_pairs_and_cap() {
        let pts: Vec<(&str, [f32; 3])> = (0..100).map(|i| ("A/b", [1.0, i as f32 * 0.01, 0.0])).collect();
        let (t, m) = memory_for("A/b\n", &pts);
        let idx = TaxonomyIndex::new(&t, &m, 3).unwrap();
        let leaf = t.find_leaf("A/b").unwrap();
        let d = idx.in_distances(leaf);
        assert_eq!(d.len(), MAX_IN_PAIRS);
        assert!(d.iter().all(|&x| x > 0.0));
        let idx2 = TaxonomyIndex::new(&t, &m, 3).unwrap();
        assert_eq!(idx2.in_distances(leaf), d);

        let (t, m) = memory_for("A/b\n", &pts[..10]);
        let idx = TaxonomyIndex::new(&t, &m, 3).unwrap();
        assert_eq!(idx.in_distances(t.find_leaf("b").unwrap()).len(), 45);
    }

    #[test]
    fn separated_clusters_route_correctly() {
        let mut pts = Vec::new();
        let centers = [("A/a1", [1.0, 0.0, 0.0]), ("A/a2", [0.9, 0.3, 0.0]), ("B/b1", [0.0, 0.0, 1.0]), ("B/b2", [0.0, 0.3, 0.9])];
        for (path, c) in centers {
            for i in 0..12 {
                let e = (i as f32 - 6.0) * 0.005;
                pts.push((path, [c[0] + e, c[1] - e, c[2] + e * 0.5]));
            }
        }
        let (t, m) = memory_for("A/a1\nA/a2\nB/b1\nB/b2\n", &pts);
        let idx = TaxonomyIndex::new(&t, &m, 0).unwrap();
        for (path, c) in centers {
            let q = normalize(&[c[0] + 0.002, c[1], c[2] - 0.001]).unwrap();
            let got = idx.predict(&q, EmptyPolicy::Strict).unwrap();
            assert_eq!(t.path_names(&got).join("/"), path);
        }
    }
}
