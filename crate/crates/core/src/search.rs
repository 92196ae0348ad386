//! Exact k-nearest-neighbor retrieval.
//!
//! Queries are processed in blocks: each memory row is loaded once per block
//! and scored against every query in it, which is the matrix-matrix shape of
//! a `queries x memory` product. Ties at equal distance go to the smaller id.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::AnnIndex;
use crate::queries::QuerySet;
use crate::store::VisualMemory;
use crate::vector::{dot, Distance, EmbeddingVector, LabelId};

/// Queries scored together against each memory row.
pub const DEFAULT_BLOCK_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor {
    pub id: u64,
    pub label: LabelId,
    pub distance: Distance,
    pub rank: usize,
}

/// Distance-ordered retrieval result for one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborSet {
    pub query_id: Option<u64>,
    pub items: Vec<Neighbor>,
}

impl NeighborSet {
    fn from_candidates(memory: &VisualMemory, query_id: Option<u64>, cands: Vec<Candidate>) -> Self {
        let items: Vec<Neighbor> = cands
            .into_iter()
            .enumerate()
            .map(|(rank, c)| Neighbor {
                id: c.id,
                label: memory.label(c.row),
                distance: Distance::new(c.dist),
                rank,
            })
            .collect();
        let set = NeighborSet { query_id, items };
        debug_assert!(set.is_well_ordered());
        set
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.items.iter().map(|n| n.id)
    }

    /// Distances non-decreasing, ties by ascending id, ranks `0..len`.
    pub fn is_well_ordered(&self) -> bool {
        self.items.iter().enumerate().all(|(i, n)| n.rank == i)
            && self.items.windows(2).all(|w| {
                let (a, b) = (&w[0], &w[1]);
                a.distance.value() < b.distance.value()
                    || (a.distance.value() == b.distance.value() && a.id < b.id)
            })
    }

    /// Drops every item with the given id, keeps the first `k` of the rest
    /// and renumbers ranks.
    pub fn without(mut self, id: u64, k: usize) -> NeighborSet {
        self.items.retain(|n| n.id != id);
        self.items.truncate(k);
        for (rank, n) in self.items.iter_mut().enumerate() {
            n.rank = rank;
        }
        self
    }

    pub fn truncated(mut self, k: usize) -> NeighborSet {
        self.items.truncate(k);
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    /// `1 - dot`, clamped to `[0, 2]`.
    pub dist: f64,
    pub id: u64,
    pub row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

/// Bounded max-heap holding the `k` best candidates seen so far.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    pub fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

fn check_query(memory: &VisualMemory, dims: usize, k: usize) -> Result<()> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if dims != memory.dims() {
        return Err(Error::DimMismatch {
            expected: memory.dims(),
            found: dims,
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    Ok(())
}

/// The `k` entries closest to `query` (k is clamped to the memory size).
pub fn exact_search(memory: &VisualMemory, query: &EmbeddingVector, k: usize) -> Result<NeighborSet> {
    check_query(memory, query.dims(), k)?;
    let mut top = TopK::new(k.min(memory.len()));
    for row in 0..memory.len() {
        top.push(Candidate {
            dist: Distance::from_dot(dot(query.as_slice(), memory.vector(row))).value(),
            id: memory.id(row),
            row,
        });
    }
    Ok(NeighborSet::from_candidates(memory, None, top.into_sorted()))
}

/// Exact search for a whole query set with the default block size.
pub fn exact_search_batch(memory: &VisualMemory, queries: &QuerySet, k: usize) -> Result<Vec<NeighborSet>> {
    exact_search_blocked(memory, queries, k, DEFAULT_BLOCK_SIZE)
}

pub fn exact_search_blocked(
    memory: &VisualMemory,
    queries: &QuerySet,
    k: usize,
    block_size: usize,
) -> Result<Vec<NeighborSet>> {
    check_query(memory, queries.dims(), k)?;
    if block_size == 0 {
        return Err(Error::InvalidConfig("block size must be at least 1".into()));
    }
    let k = k.min(memory.len());
    let starts: Vec<usize> = (0..queries.len()).step_by(block_size).collect();
    let blocks: Vec<Vec<NeighborSet>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + block_size).min(queries.len());
            let mut tops: Vec<TopK> = (start..end).map(|_| TopK::new(k)).collect();
            for row in 0..memory.len() {
                let v = memory.vector(row);
                let id = memory.id(row);
                for (q, top) in (start..end).zip(tops.iter_mut()) {
                    top.push(Candidate {
                        dist: Distance::from_dot(dot(queries.vector(q), v)).value(),
                        id,
                        row,
                    });
                }
            }
            (start..end)
                .zip(tops)
                .map(|(q, top)| NeighborSet::from_candidates(memory, Some(queries.id(q)), top.into_sorted()))
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// Exact-scores an explicit set of rows; used by the partitioned index.
pub(crate) fn score_rows(
    memory: &VisualMemory,
    query: &[f32],
    rows: impl Iterator<Item = usize>,
    k: usize,
) -> Vec<Candidate> {
    let mut top = TopK::new(k);
    for row in rows {
        top.push(Candidate {
            dist: Distance::from_dot(dot(query, memory.vector(row))).value(),
            id: memory.id(row),
            row,
        });
    }
    top.into_sorted()
}

pub(crate) fn neighbor_set(memory: &VisualMemory, query_id: Option<u64>, cands: Vec<Candidate>) -> NeighborSet {
    NeighborSet::from_candidates(memory, query_id, cands)
}

/// Either retrieval path, behind one interface.
#[derive(Clone, Copy)]
pub enum Retriever<'a> {
    Exact(&'a VisualMemory),
    Ann {
        index: &'a AnnIndex,
        memory: &'a VisualMemory,
        probes: usize,
    },
}

impl<'a> Retriever<'a> {
    pub fn memory(&self) -> &'a VisualMemory {
        match self {
            Retriever::Exact(m) => m,
            Retriever::Ann { memory, .. } => memory,
        }
    }

    pub fn search(&self, queries: &QuerySet, k: usize) -> Result<Vec<NeighborSet>> {
        match *self {
            Retriever::Exact(m) => exact_search_batch(m, queries, k),
            Retriever::Ann { index, memory, probes } => index.search_batch(memory, queries, k, probes),
        }
    }

    /// Retrieves `k` neighbors per query; with `exclude_self`, neighbors
    /// sharing the query's id are dropped first.
    pub fn search_excluding(&self, queries: &QuerySet, k: usize, exclude_self: bool) -> Result<Vec<NeighborSet>> {
        if !exclude_self {
            return self.search(queries, k);
        }
        let sets = self.search(queries, k + 1)?;
        Ok(sets
            .into_iter()
            .enumerate()
            .map(|(q, s)| s.without(queries.id(q), k))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemoryEntry;
    use crate::vector::normalize;

    fn memory(rows: &[[f32; 2]]) -> VisualMemory {
        let mut m = VisualMemory::new(2).unwrap();
        m.insert(
            rows.iter()
                .enumerate()
                .map(|(i, v)| MemoryEntry::new(i as u64 * 10, normalize(v).unwrap(), format!("l{}", i % 2)))
                .collect(),
        )
        .unwrap();
        m
    }

    #[test]
    fn self_query_is_rank_zero() {
        let m = memory(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let q = normalize(&[0.0, 1.0]).unwrap();
        let s = exact_search(&m, &q, 2).unwrap();
        assert_eq!(s.items[0].id, 10);
        assert_eq!(s.items[0].distance.value(), 0.0);
        assert_eq!(s.items[1].id, 20);
        assert!(s.is_well_ordered());
    }

    #[test]
    fn ties_break_by_id_and_k_is_clamped() {
        // duplicate vectors at ids 0 and 20
        let m = memory(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let q = normalize(&[1.0, 0.0]).unwrap();
        let s = exact_search(&m, &q, 10).unwrap();
        assert_eq!(s.ids().collect::<Vec<_>>(), vec![0, 20, 10]);
    }

    #[test]
    fn errors() {
        let empty = VisualMemory::new(2).unwrap();
        let q = normalize(&[1.0, 0.0]).unwrap();
        assert!(matches!(exact_search(&empty, &q, 1), Err(Error::EmptyMemory)));
        let m = memory(&[[1.0, 0.0]]);
        let q3 = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(exact_search(&m, &q3, 1), Err(Error::DimMismatch { .. })));
        assert!(exact_search(&m, &q, 0).is_err());
    }

    #[test]
    fn block_size_does_not_change_results() {
        let rows: Vec<[f32; 2]> = (0..50).map(|i| [(i as f32).cos(), (i as f32 * 0.7).sin()]).collect();
        let m = memory(&rows);
        let qs = QuerySet::from_memory(&m);
        let a = exact_search_blocked(&m, &qs, 7, 1).unwrap();
        let b = exact_search_blocked(&m, &qs, 7, 256).unwrap();
        let c = exact_search_blocked(&m, &qs, 7, 13).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        for (q, s) in a.iter().enumerate() {
            let single = exact_search(&m, &EmbeddingVector::from_normalized(qs.vector(q).to_vec()).unwrap(), 7).unwrap();
            assert_eq!(s.items, single.items);
        }
    }

    #[test]
    fn exclude_self_drops_query_id() {
        let m = memory(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]);
        let qs = QuerySet::from_memory(&m);
        let sets = Retriever::Exact(&m).search_excluding(&qs, 2, true).unwrap();
        for (q, s) in sets.iter().enumerate() {
            assert_eq!(s.len(), 2);
            assert!(s.ids().all(|id| id != qs.id(q)));
            assert!(s.is_well_ordered());
        }
    }
}
