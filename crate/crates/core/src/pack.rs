//! On-disk pack format shared by embedding packs and saved memories.
//!
//! A pack is a directory holding three files:
//!
//! ```text
//! vectors.bin    "VMEM" | version u32 LE (=1) | dims u32 LE | count u64 LE
//!                | count * dims f32 LE, row-major
//! meta.jsonl     one {id, label_name, taxonomy_path?, v?, gamma?} per row,
//!                in row order
//! manifest.json  {version, count, dims, label_count, created_at, ...}
//! ```
//!
//! Saved memories add two optional manifest fields, `labels` (the label table
//! in id order) and `generation`; readers that do not know them ignore them.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VMEM";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 20;

pub const VECTORS_FILE: &str = "vectors.bin";
pub const META_FILE: &str = "meta.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub id: u64,
    pub label_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy_path: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: u64,
    pub dims: u32,
    pub label_count: u64,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<u64>,
}

/// An in-memory copy of a pack directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Pack {
    pub dims: usize,
    /// Row-major, `count * dims` values.
    pub vectors: Vec<f32>,
    pub meta: Vec<MetaRecord>,
    pub manifest: Manifest,
}

/// Summary returned by [`validate_pack`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PackSummary {
    pub count: u64,
    pub dims: u32,
    pub label_count: usize,
}

/// Creation timestamp for new packs. Honors `SOURCE_DATE_EPOCH` so that
/// repeated runs can produce byte-identical output.
pub fn timestamp_now() -> String {
    let from_env = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    from_env
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl Pack {
    pub fn count(&self) -> usize {
        self.meta.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dims..(i + 1) * self.dims]
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Pack> {
        let dir = dir.as_ref();
        let (dims, vectors) = read_vectors(&dir.join(VECTORS_FILE))?;
        let count = vectors.len() / dims;
        let meta_path = dir.join(META_FILE);
        let meta = read_meta(&meta_path)?;
        if meta.len() != count {
            return Err(Error::format(
                meta_path,
                format!("{} metadata rows but vectors.bin holds {count}", meta.len()),
            ));
        }
        let mut seen = HashSet::with_capacity(count);
        for rec in &meta {
            if !seen.insert(rec.id) {
                return Err(Error::format(&meta_path, format!("duplicate id {}", rec.id)));
            }
        }

        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest = read_manifest(&manifest_path)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported version {}", manifest.version),
            ));
        }
        if manifest.count != count as u64 || manifest.dims as usize != dims {
            return Err(Error::format(
                &manifest_path,
                format!(
                    "manifest says count {} dims {}, vectors.bin has count {count} dims {dims}",
                    manifest.count, manifest.dims
                ),
            ));
        }
        if let Some(labels) = &manifest.labels {
            let known: HashSet<&str> = labels.iter().map(String::as_str).collect();
            if known.len() != labels.len() {
                return Err(Error::format(&manifest_path, "label table has duplicates"));
            }
            if let Some(rec) = meta.iter().find(|r| !known.contains(r.label_name.as_str())) {
                return Err(Error::format(
                    &manifest_path,
                    format!("label '{}' missing from label table", rec.label_name),
                ));
            }
        }
        Ok(Pack {
            dims,
            vectors,
            meta,
            manifest,
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_vectors(&dir.join(VECTORS_FILE), self.dims, &self.vectors)?;

        let meta_path = dir.join(META_FILE);
        let mut w = create(&meta_path)?;
        for rec in &self.meta {
            let line = serde_json::to_string(rec).expect("meta record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(&meta_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&meta_path, e))?;

        let manifest_path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads `vectors.bin`, returning `(dims, values)`.
pub fn read_vectors(path: &Path) -> Result<(usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);

    let mut header = [0u8; HEADER_LEN as usize];
    if file_len < HEADER_LEN {
        return Err(Error::format(
            path,
            format!("truncated header: {file_len} bytes, need {HEADER_LEN}"),
        ));
    }
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic at offset 0"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version} at offset 4"),
        ));
    }
    let dims = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    if dims == 0 {
        return Err(Error::format(path, "dims is zero at offset 8"));
    }
    let expected = (count as u128) * (dims as u128) * 4 + u128::from(HEADER_LEN);
    if u128::from(file_len) != expected {
        return Err(Error::format(
            path,
            format!(
                "header declares {count} rows x {dims} dims ({expected} bytes) but file has {file_len} bytes; data ends at offset {file_len}"
            ),
        ));
    }

    let total = count as usize * dims;
    let mut values = Vec::with_capacity(total);
    let mut buf = vec![0u8; 1 << 16];
    while values.len() < total {
        let want = ((total - values.len()) * 4).min(buf.len());
        r.read_exact(&mut buf[..want])
            .map_err(|e| Error::io(path, e))?;
        for chunk in buf[..want].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                let offset = HEADER_LEN + 4 * values.len() as u64;
                return Err(Error::format(
                    path,
                    format!("non-finite value at offset {offset}"),
                ));
            }
            values.push(v);
        }
    }
    Ok((dims, values))
}

pub fn write_vectors(path: &Path, dims: usize, values: &[f32]) -> Result<()> {
    assert!(dims > 0 && values.len().is_multiple_of(dims));
    let mut w = create(path)?;
    let count = (values.len() / dims) as u64;
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(dims as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_meta(path: &Path) -> Result<Vec<MetaRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetaRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        if let Some(g) = rec.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::format(
                    path,
                    format!("line {}: gamma {g} outside (0, 1]", lineno + 1),
                ));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Checks every structural rule of a pack without keeping it.
pub fn validate_pack(dir: impl AsRef<Path>) -> Result<PackSummary> {
    let pack = Pack::read(dir)?;
    let labels: HashSet<&str> = pack.meta.iter().map(|r| r.label_name.as_str()).collect();
    Ok(PackSummary {
        count: pack.count() as u64,
        dims: pack.dims as u32,
        label_count: labels.len(),
    })
}
