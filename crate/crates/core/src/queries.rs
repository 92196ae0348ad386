use std::path::Path;

use crate::error::{Error, Result};
use crate::pack::Pack;
use crate::store::VisualMemory;
use crate::vector::{normalize, LabelId};

/// A labeled batch of unit query vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    dims: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    labels: Vec<String>,
    taxonomy: Vec<Option<Vec<String>>>,
}

impl QuerySet {
    pub fn new(dims: usize) -> Self {
        QuerySet {
            dims,
            ids: Vec::new(),
            vectors: Vec::new(),
            labels: Vec::new(),
            taxonomy: Vec::new(),
        }
    }

    /// Normalizes every row of an embedding pack.
    pub fn from_pack(pack: &Pack) -> Result<Self> {
        let mut qs = QuerySet::new(pack.dims);
        for (row, rec) in pack.meta.iter().enumerate() {
            let v = normalize(pack.row(row))
                .map_err(|e| Error::format("vectors.bin", format!("row {row}: {e}")))?;
            qs.push(rec.id, v.as_slice(), &rec.label_name, rec.taxonomy_path.clone())?;
        }
        Ok(qs)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_pack(&Pack::read(dir)?)
    }

    /// Uses every memory entry as a query (self-query).
    pub fn from_memory(memory: &VisualMemory) -> Self {
        let labels = memory.labels();
        QuerySet {
            dims: memory.dims(),
            ids: memory.ids().to_vec(),
            vectors: memory.raw_vectors().to_vec(),
            labels: (0..memory.len())
                .map(|r| labels.name(memory.label(r)).to_owned())
                .collect(),
            taxonomy: (0..memory.len())
                .map(|r| memory.taxonomy_path(r).map(<[String]>::to_vec))
                .collect(),
        }
    }

    /// Appends a query; `vector` must already be unit-norm.
    pub fn push(
        &mut self,
        id: u64,
        vector: &[f32],
        label: &str,
        taxonomy_path: Option<Vec<String>>,
    ) -> Result<()> {
        if vector.len() != self.dims {
            return Err(Error::DimMismatch {
                expected: self.dims,
                found: vector.len(),
            });
        }
        self.ids.push(id);
        self.vectors.extend_from_slice(vector);
        self.labels.push(label.to_owned());
        self.taxonomy.push(taxonomy_path);
        Ok(())
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

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dims..(i + 1) * self.dims]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn taxonomy_path(&self, i: usize) -> Option<&[String]> {
        self.taxonomy[i].as_deref()
    }

    /// The first `n` queries.
    pub fn head(&self, n: usize) -> QuerySet {
        let n = n.min(self.len());
        QuerySet {
            dims: self.dims,
            ids: self.ids[..n].to_vec(),
            vectors: self.vectors[..n * self.dims].to_vec(),
            labels: self.labels[..n].to_vec(),
            taxonomy: self.taxonomy[..n].to_vec(),
        }
    }

    /// Query labels resolved against a memory's label table. Labels the
    /// memory has never seen map to `None` and can never be predicted.
    pub fn label_ids(&self, memory: &VisualMemory) -> Vec<Option<LabelId>> {
        self.labels.iter().map(|l| memory.labels().id(l)).collect()
    }
}
