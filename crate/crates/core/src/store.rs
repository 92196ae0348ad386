//! The visual memory: labeled unit vectors, with insertion, physical deletion
//! and per-class subsampling.
//!
//! Rows are kept contiguous (`count * dims` floats) so searches are a single
//! linear scan. Every structural mutation bumps [`VisualMemory::generation`],
//! which indexes and reliability reports use to detect staleness.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pack::{timestamp_now, Manifest, MetaRecord, Pack, FORMAT_VERSION};
use crate::vector::{normalize, EmbeddingVector, Label, LabelId};

/// One row of a memory, in owned form.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub id: u64,
    pub vector: EmbeddingVector,
    pub label: String,
    pub taxonomy_path: Option<Vec<String>>,
    pub wrong_votes: u32,
    pub gamma: f64,
}

impl MemoryEntry {
    pub fn new(id: u64, vector: EmbeddingVector, label: impl Into<String>) -> Self {
        MemoryEntry {
            id,
            vector,
            label: label.into(),
            taxonomy_path: None,
            wrong_votes: 0,
            gamma: 1.0,
        }
    }

    pub fn with_taxonomy(mut self, path: Vec<String>) -> Self {
        self.taxonomy_path = Some(path);
        self
    }
}

/// Append-only name <-> id table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    names: Vec<String>,
    by_name: HashMap<String, LabelId>,
}

impl LabelTable {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = Label> + '_ {
        self.names.iter().enumerate().map(|(i, n)| Label {
            id: i as LabelId,
            name: n.clone(),
        })
    }

    fn intern(&mut self, name: &str) -> LabelId {
        if let Some(id) = self.by_name.get(name) {
            return *id;
        }
        let id = self.names.len() as LabelId;
        self.names.push(name.to_owned());
        self.by_name.insert(name.to_owned(), id);
        id
    }
}

#[derive(Debug, Clone)]
pub struct VisualMemory {
    dims: usize,
    vectors: Vec<f32>,
    ids: Vec<u64>,
    labels: Vec<LabelId>,
    taxonomy: Vec<Option<Vec<String>>>,
    wrong_votes: Vec<u32>,
    gamma: Vec<f64>,
    row_of: HashMap<u64, usize>,
    label_table: LabelTable,
    generation: u64,
    digest: u64,
    created_at: String,
}

impl PartialEq for VisualMemory {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.ids == other.ids
            && self.vectors == other.vectors
            && self.labels == other.labels
            && self.taxonomy == other.taxonomy
            && self.wrong_votes == other.wrong_votes
            && self.gamma == other.gamma
            && self.label_table == other.label_table
    }
}

impl VisualMemory {
    /// An empty memory of the given dimensionality.
    pub fn new(dims: usize) -> Result<Self> {
        if dims == 0 {
            return Err(Error::InvalidConfig("dims must be at least 1".into()));
        }
        Ok(VisualMemory {
            dims,
            vectors: Vec::new(),
            ids: Vec::new(),
            labels: Vec::new(),
            taxonomy: Vec::new(),
            wrong_votes: Vec::new(),
            gamma: Vec::new(),
            row_of: HashMap::new(),
            label_table: LabelTable::default(),
            generation: 0,
            digest: id_digest(&[]),
            created_at: timestamp_now(),
        })
    }

    /// Builds a memory from an embedding pack, normalizing every row.
    ///
    /// Label ids follow the pack's label table when it carries one, otherwise
    /// they are assigned in ascending name order.
    pub fn build(pack: &Pack) -> Result<Self> {
        if pack.count() == 0 {
            return Err(Error::format("vectors.bin", "pack holds no rows"));
        }
        Self::from_pack(pack, true)
    }

    pub fn build_from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        Self::build(&Pack::read(dir)?)
    }

    /// Reads a saved memory. Rows are taken verbatim, so `load(save(m))`
    /// reproduces `m` bit for bit.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let pack = Pack::read(dir)?;
        Self::from_pack(&pack, false)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.to_pack().write(dir)
    }

    fn from_pack(pack: &Pack, normalize_rows: bool) -> Result<Self> {
        let mut mem = VisualMemory::new(pack.dims)?;
        mem.created_at = pack.manifest.created_at.clone();
        mem.generation = pack.manifest.generation.unwrap_or(0);
        match &pack.manifest.labels {
            Some(names) => names.iter().for_each(|n| {
                mem.label_table.intern(n);
            }),
            None => {
                let names: std::collections::BTreeSet<&str> =
                    pack.meta.iter().map(|r| r.label_name.as_str()).collect();
                names.into_iter().for_each(|n| {
                    mem.label_table.intern(n);
                });
            }
        }

        mem.vectors.reserve(pack.vectors.len());
        for (row, rec) in pack.meta.iter().enumerate() {
            let raw = pack.row(row);
            if normalize_rows {
                let v = normalize(raw)
                    .map_err(|e| Error::format("vectors.bin", format!("row {row}: {e}")))?;
                mem.vectors.extend_from_slice(v.as_slice());
            } else {
                mem.vectors.extend_from_slice(raw);
            }
            let v = rec.v.unwrap_or(0);
            let gamma = rec.gamma.unwrap_or(1.0);
            if v == 0 && gamma != 1.0 {
                return Err(Error::format(
                    "meta.jsonl",
                    format!("id {}: gamma {gamma} with zero wrong votes", rec.id),
                ));
            }
            mem.row_of.insert(rec.id, row);
            mem.ids.push(rec.id);
            mem.labels.push(mem.label_table.intern(&rec.label_name));
            mem.taxonomy.push(rec.taxonomy_path.clone());
            mem.wrong_votes.push(v);
            mem.gamma.push(gamma);
        }
        mem.digest = id_digest(&mem.ids);
        Ok(mem)
    }

    pub fn to_pack(&self) -> Pack {
        let meta = (0..self.len())
            .map(|row| {
                let v = self.wrong_votes[row];
                MetaRecord {
                    id: self.ids[row],
                    label_name: self.label_table.name(self.labels[row]).to_owned(),
                    taxonomy_path: self.taxonomy[row].clone(),
                    v: (v > 0).then_some(v),
                    gamma: (v > 0).then_some(self.gamma[row]),
                }
            })
            .collect();
        Pack {
            dims: self.dims,
            vectors: self.vectors.clone(),
            meta,
            manifest: Manifest {
                version: FORMAT_VERSION,
                count: self.len() as u64,
                dims: self.dims as u32,
                label_count: self.label_table.len() as u64,
                created_at: self.created_at.clone(),
                labels: Some(self.label_table.names().to_vec()),
                generation: Some(self.generation),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Bumped by every insert/remove; indexes and reports key off it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Order-sensitive hash of the row ids.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn created_at(&self) -> &str {
        &self.created_at
    }

    pub fn labels(&self) -> &LabelTable {
        &self.label_table
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// All rows, row-major.
    pub fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    #[inline]
    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dims..(row + 1) * self.dims]
    }

    #[inline]
    pub fn id(&self, row: usize) -> u64 {
        self.ids[row]
    }

    #[inline]
    pub fn label(&self, row: usize) -> LabelId {
        self.labels[row]
    }

    pub fn taxonomy_path(&self, row: usize) -> Option<&[String]> {
        self.taxonomy[row].as_deref()
    }

    pub fn wrong_votes(&self, row: usize) -> u32 {
        self.wrong_votes[row]
    }

    #[inline]
    pub fn gamma(&self, row: usize) -> f64 {
        self.gamma[row]
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.row_of.get(&id).copied()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.row_of.contains_key(&id)
    }

    pub fn entry(&self, id: u64) -> Option<MemoryEntry> {
        let row = self.row_of(id)?;
        Some(MemoryEntry {
            id,
            vector: EmbeddingVector::from_normalized(self.vector(row).to_vec()).ok()?,
            label: self.label_table.name(self.labels[row]).to_owned(),
            taxonomy_path: self.taxonomy[row].clone(),
            wrong_votes: self.wrong_votes[row],
            gamma: self.gamma[row],
        })
    }

    /// Number of entries per label id (zero for labels with no entries left).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_table.len()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Adds entries. The whole batch is validated before anything changes.
    pub fn insert(&mut self, entries: Vec<MemoryEntry>) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut batch = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.vector.dims() != self.dims {
                return Err(Error::DimMismatch {
                    expected: self.dims,
                    found: e.vector.dims(),
                });
            }
            if self.contains(e.id) || !batch.insert(e.id) {
                return Err(Error::DuplicateId(e.id));
            }
            if !(e.gamma > 0.0 && e.gamma <= 1.0) || (e.wrong_votes == 0 && e.gamma != 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "entry {}: gamma {} with {} wrong votes",
                    e.id, e.gamma, e.wrong_votes
                )));
            }
        }
        for e in entries {
            let row = self.ids.len();
            self.vectors.extend_from_slice(e.vector.as_slice());
            self.row_of.insert(e.id, row);
            self.ids.push(e.id);
            self.labels.push(self.label_table.intern(&e.label));
            self.taxonomy.push(e.taxonomy_path);
            self.wrong_votes.push(e.wrong_votes);
            self.gamma.push(e.gamma);
        }
        self.mutated();
        Ok(())
    }

    /// Physically deletes entries. Unknown ids abort the whole call.
    pub fn remove(&mut self, ids: &[u64]) -> Result<()> {
        let doomed: HashSet<u64> = ids.iter().copied().collect();
        if let Some(&missing) = ids.iter().find(|id| !self.contains(**id)) {
            return Err(Error::UnknownId(missing));
        }
        if doomed.is_empty() {
            return Ok(());
        }
        self.retain_rows(|id| !doomed.contains(&id));
        self.mutated();
        Ok(())
    }

    /// Keeps `min(per_class, class size)` entries of every label, chosen by
    /// seeded uniform sampling over the class's ids sorted ascending.
    pub fn subsample(&self, per_class: usize, seed: u64) -> Result<VisualMemory> {
        if per_class == 0 {
            return Err(Error::InvalidConfig("per_class must be at least 1".into()));
        }
        let mut by_label: BTreeMap<LabelId, Vec<u64>> = BTreeMap::new();
        for row in 0..self.len() {
            by_label.entry(self.labels[row]).or_default().push(self.ids[row]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = HashSet::new();
        for ids in by_label.values_mut() {
            if ids.len() <= per_class {
                keep.extend(ids.iter().copied());
                continue;
            }
            ids.sort_unstable();
            for i in sample(&mut rng, ids.len(), per_class) {
                keep.insert(ids[i]);
            }
        }
        let mut out = self.clone();
        if keep.len() != self.len() {
            out.retain_rows(|id| keep.contains(&id));
            out.mutated();
        }
        Ok(out)
    }

    /// Overwrites the wrong-vote count and reliability of one row. Does not
    /// change the generation: neither value affects retrieval.
    pub(crate) fn set_reliability(&mut self, row: usize, wrong_votes: u32, gamma: f64) {
        debug_assert!(gamma > 0.0 && gamma <= 1.0);
        self.wrong_votes[row] = wrong_votes;
        self.gamma[row] = gamma;
    }

    fn retain_rows(&mut self, mut keep: impl FnMut(u64) -> bool) {
        let dims = self.dims;
        let mut w = 0;
        for r in 0..self.ids.len() {
            if !keep(self.ids[r]) {
                continue;
            }
            if w != r {
                self.vectors.copy_within(r * dims..(r + 1) * dims, w * dims);
                self.ids[w] = self.ids[r];
                self.labels[w] = self.labels[r];
                self.taxonomy.swap(w, r);
                self.wrong_votes[w] = self.wrong_votes[r];
                self.gamma[w] = self.gamma[r];
            }
            w += 1;
        }
        self.vectors.truncate(w * dims);
        self.ids.truncate(w);
        self.labels.truncate(w);
        self.taxonomy.truncate(w);
        self.wrong_votes.truncate(w);
        self.gamma.truncate(w);
        self.row_of = self.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    }

    fn mutated(&mut self) {
        self.generation += 1;
        self.digest = id_digest(&self.ids);
    }
}

/// FNV-1a over the little-endian bytes of each id.
fn id_digest(ids: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in ids {
        for b in id.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u64, v: &[f32], label: &str) -> MemoryEntry {
        MemoryEntry::new(id, normalize(v).unwrap(), label)
    }

    fn pack_of(rows: &[(&[f32], &str)]) -> Pack {
        let dims = rows[0].0.len();
        Pack {
            dims,
            vectors: rows.iter().flat_map(|(v, _)| v.iter().copied()).collect(),
            meta: rows
                .iter()
                .enumerate()
                .map(|(i, (_, l))| MetaRecord {
                    id: i as u64,
                    label_name: l.to_string(),
                    taxonomy_path: None,
                    v: None,
                    gamma: None,
                })
                .collect(),
            manifest: Manifest {
                version: 1,
                count: rows.len() as u64,
                dims: dims as u32,
                label_count: 0,
                created_at: "t".into(),
                labels: None,
                generation: None,
            },
        }
    }

    #[test]
    fn build_normalizes_and_sorts_labels() {
        let rows: Vec<(Vec<f32>, &str)> = (0..10)
            .map(|i| (vec![i as f32 + 1.0, 2.0, 0.0, -1.0], if i % 2 == 0 { "zebra" } else { "ant" }))
            .collect();
        let refs: Vec<(&[f32], &str)> = rows.iter().map(|(v, l)| (v.as_slice(), *l)).collect();
        let m = VisualMemory::build(&pack_of(&refs)).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.dims(), 4);
        assert_eq!(m.labels().names(), &["ant".to_string(), "zebra".to_string()]);
        for r in 0..m.len() {
            let n: f64 = m.vector(r).iter().map(|x| f64::from(*x).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn build_rejects_zero_row() {
        let p = pack_of(&[(&[1.0, 0.0], "a"), (&[0.0, 0.0], "b")]);
        assert!(matches!(VisualMemory::build(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn insert_registers_new_labels_and_bumps_generation() {
        let mut m = VisualMemory::new(2).unwrap();
        m.insert(vec![entry(1, &[1.0, 0.0], "a"), entry(2, &[0.0, 1.0], "b")])
            .unwrap();
        assert_eq!(m.generation(), 1);
        assert_eq!(m.labels().len(), 2);

        m.insert(vec![]).unwrap();
        assert_eq!(m.generation(), 1);

        assert!(matches!(
            m.insert(vec![entry(1, &[1.0, 1.0], "c")]),
            Err(Error::DuplicateId(1))
        ));
        assert!(matches!(
            m.insert(vec![entry(3, &[1.0, 1.0], "c"), entry(3, &[1.0, 0.0], "c")]),
            Err(Error::DuplicateId(3))
        ));
        assert!(matches!(
            m.insert(vec![entry(4, &[1.0, 1.0, 1.0], "c")]),
            Err(Error::DimMismatch { .. })
        ));
        // failed batches leave no trace
        assert_eq!(m.len(), 2);
        assert_eq!(m.labels().len(), 2);
    }

    #[test]
    fn insert_new_classes_grows_label_table() {
        let mut m = VisualMemory::new(3).unwrap();
        let base: Vec<MemoryEntry> = (0..1000)
            .map(|i| entry(i, &[1.0, i as f32, 0.5], &format!("in{i}")))
            .collect();
        m.insert(base).unwrap();
        let ood: Vec<MemoryEntry> = (0..64)
            .map(|i| entry(10_000 + i, &[0.0, 1.0, i as f32], &format!("ood{i}")))
            .collect();
        m.insert(ood).unwrap();
        assert_eq!(m.labels().len(), 1064);
    }

    #[test]
    fn remove_is_physical_and_keeps_labels() {
        let mut m = VisualMemory::new(2).unwrap();
        m.insert(vec![
            entry(5, &[1.0, 0.0], "a"),
            entry(6, &[0.0, 1.0], "b"),
            entry(7, &[1.0, 1.0], "a"),
        ])
        .unwrap();
        let g = m.generation();
        m.remove(&[6]).unwrap();
        assert_eq!(m.ids(), &[5, 7]);
        assert_eq!(m.row_of(7), Some(1));
        assert!(!m.contains(6));
        assert_eq!(m.labels().len(), 2);
        assert_eq!(m.class_counts(), vec![2, 0]);
        assert_eq!(m.generation(), g + 1);
        assert_eq!(m.raw_vectors().len(), 4);

        assert!(matches!(m.remove(&[5, 99]), Err(Error::UnknownId(99))));
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn subsample_rules() {
        let mut m = VisualMemory::new(2).unwrap();
        let entries: Vec<MemoryEntry> = (0..300)
            .map(|i| entry(i, &[1.0, i as f32], &format!("c{}", i % 3)))
            .collect();
        m.insert(entries).unwrap();

        let one = m.subsample(1, 7).unwrap();
        assert_eq!(one.len(), 3);
        assert_eq!(one.class_counts(), vec![1, 1, 1]);

        let ten = m.subsample(10, 7).unwrap();
        assert_eq!(ten.class_counts(), vec![10, 10, 10]);
        assert_eq!(ten, m.subsample(10, 7).unwrap());
        assert_eq!(ten.subsample(10, 7).unwrap(), ten);
        assert_ne!(ten.ids(), m.subsample(10, 8).unwrap().ids());

        let all = m.subsample(100, 1).unwrap();
        assert_eq!(all, m);
        assert_eq!(all.generation(), m.generation());

        assert!(m.subsample(0, 1).is_err());
    }

    #[test]
    fn save_load_round_trip_keeps_reliability() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = VisualMemory::new(3).unwrap();
        m.insert(vec![
            entry(1, &[1.0, 2.0, 3.0], "a").with_taxonomy(vec!["k".into(), "a".into()]),
            entry(2, &[3.0, 2.0, 1.0], "b"),
        ])
        .unwrap();
        m.set_reliability(0, 1, 1.75 / 2.0);
        m.save(dir.path()).unwrap();
        let back = VisualMemory::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.gamma(0), 0.875);
        assert_eq!(back.wrong_votes(0), 1);
        assert_eq!(back.generation(), m.generation());
        assert_eq!(back.digest(), m.digest());
    }
}
