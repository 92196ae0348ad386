//! Inverted-file approximate index: spherical k-means partitions the memory,
//! a query probes the partitions with the nearest centroids and exact-scores
//! their members.
//!
//! An index is tied to the memory generation (and id digest) it was built
//! from; searching a mutated memory fails with [`Error::StaleIndex`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::queries::QuerySet;
use crate::search::{neighbor_set, score_rows, NeighborSet};
use crate::store::VisualMemory;
use crate::vector::{dot, EmbeddingVector};

pub const INDEX_MAGIC: &[u8; 4] = b"VIDX";
pub const INDEX_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.bin";
pub const KMEANS_ITERATIONS: u32 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IndexParams {
    pub partitions: usize,
    pub iterations: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    dims: usize,
    params: IndexParams,
    centroids: Vec<f32>,
    members: Vec<Vec<u64>>,
    generation: u64,
    digest: u64,
}

/// `ceil(sqrt(count))`, at least 1.
pub fn default_partitions(count: usize) -> usize {
    ((count as f64).sqrt().ceil() as usize).max(1)
}

/// `max(1, ceil(0.1 * partitions))`.
pub fn default_probes(partitions: usize) -> usize {
    ((partitions as f64 * 0.1).ceil() as usize).max(1)
}

fn nearest_centroid(centroids: &[f32], dims: usize, v: &[f32]) -> u32 {
    let mut best = 0u32;
    let mut best_dot = f64::NEG_INFINITY;
    for (c, centroid) in centroids.chunks_exact(dims).enumerate() {
        let d = dot(v, centroid);
        if d > best_dot {
            best_dot = d;
            best = c as u32;
        }
    }
    best
}

fn assign(memory: &VisualMemory, centroids: &[f32]) -> Vec<u32> {
    let dims = memory.dims();
    (0..memory.len())
        .into_par_iter()
        .map(|row| nearest_centroid(centroids, dims, memory.vector(row)))
        .collect()
}

impl AnnIndex {
    /// Runs seeded spherical k-means (fixed iteration count) and assigns every
    /// entry to its nearest centroid. `partitions` defaults to
    /// `ceil(sqrt(count))` and is capped at the memory size.
    pub fn build(memory: &VisualMemory, partitions: Option<usize>, seed: u64) -> Result<AnnIndex> {
        if memory.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let p = partitions.unwrap_or_else(|| default_partitions(memory.len()));
        if p == 0 {
            return Err(Error::InvalidConfig("partitions must be at least 1".into()));
        }
        let p = p.min(memory.len());
        let dims = memory.dims();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids: Vec<f32> = Vec::with_capacity(p * dims);
        for row in sample(&mut rng, memory.len(), p) {
            centroids.extend_from_slice(memory.vector(row));
        }

        for _ in 0..KMEANS_ITERATIONS {
            let assignment = assign(memory, &centroids);
            let mut sums = vec![0.0f64; p * dims];
            for (row, &c) in assignment.iter().enumerate() {
                let acc = &mut sums[c as usize * dims..(c as usize + 1) * dims];
                for (a, &x) in acc.iter_mut().zip(memory.vector(row)) {
                    *a += f64::from(x);
                }
            }
            for (c, sum) in sums.chunks_exact(dims).enumerate() {
                let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
                // empty or cancelled clusters keep their previous centroid
                if norm > 1e-12 {
                    for (dst, &s) in centroids[c * dims..(c + 1) * dims].iter_mut().zip(sum) {
                        *dst = (s / norm) as f32;
                    }
                }
            }
        }

        let assignment = assign(memory, &centroids);
        let mut members = vec![Vec::new(); p];
        for (row, &c) in assignment.iter().enumerate() {
            members[c as usize].push(memory.id(row));
        }
        Ok(AnnIndex {
            dims,
            params: IndexParams {
                partitions: p,
                iterations: KMEANS_ITERATIONS,
                seed,
            },
            centroids,
            members,
            generation: memory.generation(),
            digest: memory.digest(),
        })
    }

    pub fn partitions(&self) -> usize {
        self.params.partitions
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn members(&self, partition: usize) -> &[u64] {
        &self.members[partition]
    }

    pub fn centroid(&self, partition: usize) -> &[f32] {
        &self.centroids[partition * self.dims..(partition + 1) * self.dims]
    }

    pub fn default_probes(&self) -> usize {
        default_probes(self.partitions())
    }

    pub fn check_fresh(&self, memory: &VisualMemory) -> Result<()> {
        if self.generation != memory.generation() || self.digest != memory.digest() {
            return Err(Error::StaleIndex {
                index: self.generation,
                memory: memory.generation(),
            });
        }
        Ok(())
    }

    /// Partitions visited for `query`: the `probes` nearest centroids, ties to
    /// the lower partition number.
    pub fn probed_partitions(&self, query: &[f32], probes: usize) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dims)
            .enumerate()
            .map(|(c, centroid)| (dot(query, centroid), c))
            .collect();
        let probes = probes.min(scored.len());
        let by_score = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if probes < scored.len() {
            scored.select_nth_unstable_by(probes, by_score);
            scored.truncate(probes);
        }
        scored.sort_by(by_score);
        scored.into_iter().map(|(_, c)| c).collect()
    }

    fn check_search(&self, memory: &VisualMemory, dims: usize, k: usize, probes: usize) -> Result<()> {
        if memory.is_empty() {
            return Err(Error::EmptyMemory);
        }
        self.check_fresh(memory)?;
        if dims != self.dims {
            return Err(Error::DimMismatch {
                expected: self.dims,
                found: dims,
            });
        }
        if k == 0 || probes == 0 {
            return Err(Error::InvalidConfig("k and probes must be at least 1".into()));
        }
        Ok(())
    }

    fn search_one(&self, memory: &VisualMemory, query: &[f32], query_id: Option<u64>, k: usize, probes: usize) -> NeighborSet {
        let parts = self.probed_partitions(query, probes);
        let rows = parts.iter().flat_map(|&p| {
            self.members[p]
                .iter()
                .map(|id| memory.row_of(*id).expect("fresh index members exist in memory"))
        });
        neighbor_set(memory, query_id, score_rows(memory, query, rows, k))
    }

    pub fn search(&self, memory: &VisualMemory, query: &EmbeddingVector, k: usize, probes: usize) -> Result<NeighborSet> {
        self.check_search(memory, query.dims(), k, probes)?;
        Ok(self.search_one(memory, query.as_slice(), None, k, probes))
    }

    pub fn search_batch(&self, memory: &VisualMemory, queries: &QuerySet, k: usize, probes: usize) -> Result<Vec<NeighborSet>> {
        self.check_search(memory, queries.dims(), k, probes)?;
        Ok((0..queries.len())
            .into_par_iter()
            .map(|q| self.search_one(memory, queries.vector(q), Some(queries.id(q)), k, probes))
            .collect())
    }

    /// Writes `index.bin`: header, centroids, then one member list per
    /// partition. Little-endian throughout.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_all(&INDEX_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dims as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.params.partitions as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&self.params.iterations.to_le_bytes()).map_err(io)?;
        w.write_all(&self.params.seed.to_le_bytes()).map_err(io)?;
        w.write_all(&self.generation.to_le_bytes()).map_err(io)?;
        w.write_all(&self.digest.to_le_bytes()).map_err(io)?;
        for v in &self.centroids {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for list in &self.members {
            w.write_all(&(list.len() as u64).to_le_bytes()).map_err(io)?;
            for id in list {
                w.write_all(&id.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AnnIndex> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut offset = 0u64;
        let mut take = |n: usize, offset: &mut u64| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(path, format!("truncated at offset {offset}")))?;
            *offset += n as u64;
            Ok(buf)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());

        let header = take(44, &mut offset)?;
        if &header[0..4] != INDEX_MAGIC {
            return Err(Error::format(path, "bad magic at offset 0"));
        }
        let version = u32_at(&header[4..8]);
        if version != INDEX_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let dims = u32_at(&header[8..12]) as usize;
        let partitions = u32_at(&header[12..16]) as usize;
        let iterations = u32_at(&header[16..20]);
        let seed = u64_at(&header[20..28]);
        let generation = u64_at(&header[28..36]);
        let digest = u64_at(&header[36..44]);
        if dims == 0 || partitions == 0 {
            return Err(Error::format(path, "zero dims or partitions"));
        }

        let raw = take(partitions * dims * 4, &mut offset)?;
        let centroids: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut members = Vec::with_capacity(partitions);
        for _ in 0..partitions {
            let n = u64_at(&take(8, &mut offset)?) as usize;
            let raw = take(n * 8, &mut offset)?;
            members.push(raw.chunks_exact(8).map(u64_at).collect());
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::format(path, format!("trailing bytes at offset {offset}")));
        }
        Ok(AnnIndex {
            dims,
            params: IndexParams {
                partitions,
                iterations,
                seed,
            },
            centroids,
            members,
            generation,
            digest,
        })
    }
}
