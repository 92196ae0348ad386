//! Seeded synthetic embedding packs: Gaussian clusters on the unit sphere,
//! optional label noise and an optional uniform taxonomy.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{Manifest, MetaRecord, Pack, FORMAT_VERSION};
use crate::vector::normalize;

pub const NOISE_FILE: &str = "noise.txt";
pub const TAXONOMY_FILE: &str = "taxonomy.txt";

/// Relative weight of each deeper level's offset in a taxonomy fixture.
const BRANCH_DECAY: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    /// Standard deviation of the per-component Gaussian noise around a unit
    /// class center.
    pub spread: f64,
    /// Fraction of memory labels reassigned to a different class.
    pub noise: f64,
    /// `(depth, fanout)`; requires `classes == fanout^depth`.
    pub taxonomy: Option<(usize, usize)>,
    /// Clean query rows generated per class.
    pub queries_per_class: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            classes: 10,
            per_class: 100,
            dims: 64,
            spread: 0.05,
            noise: 0.0,
            taxonomy: None,
            queries_per_class: 0,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.classes == 0 || self.per_class == 0 || self.dims == 0 {
            return bad("classes, per_class and dims must all be at least 1".into());
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return bad(format!("spread must be finite and non-negative, got {}", self.spread));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1), got {}", self.noise));
        }
        if self.noise > 0.0 && self.classes < 2 {
            return bad("label noise needs at least 2 classes".into());
        }
        if let Some((depth, fanout)) = self.taxonomy {
            if depth == 0 || fanout == 0 {
                return bad("taxonomy depth and fanout must be at least 1".into());
            }
            match (fanout as u64).checked_pow(depth as u32) {
                Some(n) if n == self.classes as u64 => {}
                _ => return bad(format!("taxonomy {fanout}^{depth} leaves does not match {} classes", self.classes)),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub memory: Pack,
    pub queries: Option<Pack>,
    /// Ids whose label was reassigned, ascending.
    pub noised: Vec<u64>,
    /// Path file content, one `/`-joined path per leaf.
    pub taxonomy: Option<String>,
}

/// Fixtures carry a fixed creation time so their bytes depend on the seed
/// alone (`SOURCE_DATE_EPOCH` overrides it).
fn fixture_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or(0);
    chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn gaussian(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

struct Classes {
    names: Vec<String>,
    paths: Vec<Option<Vec<String>>>,
    centers: Vec<Vec<f64>>,
}

fn class_layout(spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> Classes {
    let width = (spec.classes - 1).to_string().len();
    match spec.taxonomy {
        None => Classes {
            names: (0..spec.classes).map(|c| format!("c{c:0width$}")).collect(),
            paths: vec![None; spec.classes],
            centers: (0..spec.classes).map(|_| unit(&gaussian(rng, spec.dims))).collect(),
        },
        Some((depth, fanout)) => {
            // Level-by-level: each node's center is its parent's plus a
            // random direction scaled by BRANCH_DECAY^level.
            let mut level: Vec<(Vec<String>, Vec<f64>)> = vec![(Vec::new(), vec![0.0; spec.dims])];
            for l in 1..=depth {
                let scale = BRANCH_DECAY.powi(l as i32 - 1);
                let mut next = Vec::with_capacity(level.len() * fanout);
                let mut counter = 0usize;
                for (path, center) in &level {
                    for _ in 0..fanout {
                        let dir = unit(&gaussian(rng, spec.dims));
                        let c: Vec<f64> = center.iter().zip(&dir).map(|(a, d)| a + scale * d).collect();
                        let lw = (fanout.pow(l as u32) - 1).to_string().len();
                        let mut p = path.clone();
                        p.push(format!("L{l}_{counter:0lw$}"));
                        counter += 1;
                        next.push((p, c));
                    }
                }
                level = next;
            }
            Classes {
                names: level.iter().map(|(p, _)| p.last().expect("depth >= 1").clone()).collect(),
                paths: level.iter().map(|(p, _)| Some(p.clone())).collect(),
                centers: level.iter().map(|(_, c)| unit(c)).collect(),
            }
        }
    }
}

fn sample_row(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Vec<f32> {
    loop {
        let raw: Vec<f32> = center
            .iter()
            .map(|&c| (c + spread * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        if let Ok(v) = normalize(&raw) {
            return v.into_inner();
        }
    }
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = class_layout(spec, &mut rng);
    let created_at = fixture_timestamp();

    let n = spec.classes * spec.per_class;
    let mut vectors = Vec::with_capacity(n * spec.dims);
    let mut classes = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.per_class {
            vectors.extend(sample_row(&mut rng, &layout.centers[c], spec.spread));
            classes.push(c);
        }
    }

    let n_noised = (spec.noise * n as f64).round() as usize;
    let mut noised: Vec<usize> = sample(&mut rng, n, n_noised).into_vec();
    noised.sort_unstable();
    for &row in &noised {
        let shift = rng.random_range(1..spec.classes);
        classes[row] = (classes[row] + shift) % spec.classes;
    }

    let meta = |id: u64, c: usize| MetaRecord {
        id,
        label_name: layout.names[c].clone(),
        taxonomy_path: layout.paths[c].clone(),
        v: None,
        gamma: None,
    };
    let manifest = |count: usize| Manifest {
        version: FORMAT_VERSION,
        count: count as u64,
        dims: spec.dims as u32,
        label_count: spec.classes as u64,
        created_at: created_at.clone(),
        labels: Some(layout.names.clone()),
        generation: None,
    };
    let memory = Pack {
        dims: spec.dims,
        vectors,
        meta: classes.iter().enumerate().map(|(i, &c)| meta(i as u64, c)).collect(),
        manifest: manifest(n),
    };

    let queries = (spec.queries_per_class > 0).then(|| {
        let q = spec.classes * spec.queries_per_class;
        let mut qv = Vec::with_capacity(q * spec.dims);
        let mut qm = Vec::with_capacity(q);
        for c in 0..spec.classes {
            for _ in 0..spec.queries_per_class {
                qv.extend(sample_row(&mut rng, &layout.centers[c], spec.spread));
                qm.push(meta((n + qm.len()) as u64, c));
            }
        }
        Pack {
            dims: spec.dims,
            vectors: qv,
            meta: qm,
            manifest: manifest(q),
        }
    });

    let taxonomy = spec.taxonomy.map(|_| {
        layout
            .paths
            .iter()
            .map(|p| p.as_ref().expect("taxonomy paths").join("/") + "\n")
            .collect::<String>()
    });

    Ok(Fixture {
        spec: spec.clone(),
        memory,
        queries,
        noised: noised.into_iter().map(|r| r as u64).collect(),
        taxonomy,
    })
}

impl Fixture {
    /// Writes `memory/`, `queries/` (when present), `noise.txt` and
    /// `taxonomy.txt` (when present) under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.memory.write(dir.join("memory"))?;
        if let Some(q) = &self.queries {
            q.write(dir.join("queries"))?;
        }
        let noise: String = self.noised.iter().map(|id| format!("{id}\n")).collect();
        let p = dir.join(NOISE_FILE);
        std::fs::write(&p, noise).map_err(|e| Error::io(&p, e))?;
        if let Some(t) = &self.taxonomy {
            let p = dir.join(TAXONOMY_FILE);
            std::fs::write(&p, t).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::TaxonomyTree;

    #[test]
    fn deterministic_and_shaped() {
        let spec = FixtureSpec {
            classes: 5,
            per_class: 7,
            dims: 8,
            noise: 0.2,
            queries_per_class: 2,
            seed: 9,
            ..FixtureSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.memory.count(), 35);
        assert_eq!(a.noised.len(), 7);
        assert_eq!(a.queries.as_ref().unwrap().count(), 10);
        assert_eq!(a.queries.as_ref().unwrap().meta[0].id, 35);
        for row in 0..a.memory.count() {
            let norm: f64 = a.memory.row(row).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        // noised rows carry a label other than their generating class
        for &id in &a.noised {
            let c = id as usize / 7;
            assert_ne!(a.memory.meta[id as usize].label_name, format!("c{c}"));
        }
        let c = generate(&FixtureSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.memory.vectors, c.memory.vectors);
    }

    #[test]
    fn taxonomy_fixture() {
        let spec = FixtureSpec {
            classes: 8,
            per_class: 2,
            dims: 16,
            taxonomy: Some((3, 2)),
            ..FixtureSpec::default()
        };
        let f = generate(&spec).unwrap();
        let tree = TaxonomyTree::parse(f.taxonomy.as_ref().unwrap()).unwrap();
        assert_eq!(tree.depth(), 3);
        assert_eq!(tree.leaves().count(), 8);
        for rec in &f.memory.meta {
            let path = rec.taxonomy_path.as_ref().unwrap();
            assert!(tree.resolve(path).is_some());
            assert_eq!(path.last().unwrap(), &rec.label_name);
        }
    }

    #[test]
    fn invalid_specs() {
        let ok = FixtureSpec::default();
        for bad in [
            FixtureSpec { classes: 0, ..ok.clone() },
            FixtureSpec { noise: 1.0, ..ok.clone() },
            FixtureSpec { noise: -0.1, ..ok.clone() },
            FixtureSpec { spread: f64::NAN, ..ok.clone() },
            FixtureSpec { taxonomy: Some((2, 3)), ..ok.clone() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::InvalidSpec(_))));
        }
    }
}
