//! Measurements over retrieval results: per-index neighbor reliability, hit
//! rate, calibration, scaling-law fits, out-of-distribution distance
//! statistics and residual (compositional) queries.

use rayon::prelude::*;
use serde::Serialize;

use crate::classify::{classify_items, evaluate, EvalOptions, Scheme, VoteConfig};
use crate::error::{Error, Result};
use crate::queries::QuerySet;
use crate::search::{exact_search, NeighborSet, Retriever};
use crate::store::VisualMemory;
use crate::vector::{normalize, EmbeddingVector, LabelId};

/// Neighbors inspected for calibration confidence.
pub const CALIBRATION_DEPTH: usize = 100;

/// Residual norms below this are degenerate.
pub const MIN_RESIDUAL_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    /// `y = a + b ln(x + 1)`
    Logarithmic,
    /// `log10 y = m log10 x + q`
    LogLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveFit {
    pub model: FitModel,
    pub intercept: f64,
    pub slope: f64,
    /// Residual sum of squares in the fitted space.
    pub rss: f64,
    pub n: usize,
}

impl CurveFit {
    pub fn predict(&self, x: f64) -> f64 {
        match self.model {
            FitModel::Logarithmic => self.intercept + self.slope * (x + 1.0).ln(),
            FitModel::LogLog => 10f64.powf(self.slope * x.log10() + self.intercept),
        }
    }
}

/// Ordinary least squares line `y = intercept + slope x`.
fn line_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return Err(Error::DegenerateFit(format!("need at least 2 points, got {}", xs.len())));
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all x values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Ok((intercept, slope, rss))
}

/// Fits `a + b ln(i + 1)` to `values[i]`.
pub fn fit_logarithmic(values: &[f64]) -> Result<CurveFit> {
    let xs: Vec<f64> = (0..values.len()).map(|i| (i as f64 + 1.0).ln()).collect();
    let (intercept, slope, rss) = line_fit(&xs, values)?;
    Ok(CurveFit {
        model: FitModel::Logarithmic,
        intercept,
        slope,
        rss,
        n: values.len(),
    })
}

/// Least-squares line through `(log10 size, log10 error)`.
pub fn fit_scaling(points: &[(f64, f64)]) -> Result<CurveFit> {
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::DegenerateFit(format!("point ({x}, {y}) is not strictly positive")));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<f64> = pts.iter().map(|p| p.0.log10()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.log10()).collect();
    let (intercept, slope, rss) = line_fit(&xs, &ys)?;
    Ok(CurveFit {
        model: FitModel::LogLog,
        intercept,
        slope,
        rss,
        n: pts.len(),
    })
}

fn check_depth(memory: &VisualMemory, k_max: usize) -> Result<()> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if k_max == 0 {
        return Err(Error::InvalidConfig("k_max must be at least 1".into()));
    }
    if k_max > memory.len() {
        return Err(Error::MemoryTooSmall {
            need: k_max,
            have: memory.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityCurve {
    pub queries: usize,
    /// Accuracy of the neighbor at each index `0..k_max`.
    pub accuracy: Vec<f64>,
    pub fit: CurveFit,
}

/// Fraction of queries whose `i`-th neighbor carries the true label.
pub fn reliability_from_sets(sets: &[NeighborSet], truth: &[Option<LabelId>], k_max: usize) -> Vec<f64> {
    let mut hits = vec![0usize; k_max];
    for (set, t) in sets.iter().zip(truth) {
        for (i, n) in set.items.iter().take(k_max).enumerate() {
            hits[i] += usize::from(Some(n.label) == *t);
        }
    }
    let n = sets.len().max(1) as f64;
    hits.into_iter().map(|h| h as f64 / n).collect()
}

pub fn reliability_at_k(retriever: Retriever<'_>, queries: &QuerySet, k_max: usize, exclude_self: bool) -> Result<ReliabilityCurve> {
    let memory = retriever.memory();
    check_depth(memory, k_max)?;
    let sets = retriever.search_excluding(queries, k_max, exclude_self)?;
    let accuracy = reliability_from_sets(&sets, &queries.label_ids(memory), k_max);
    let fit = fit_logarithmic(&accuracy)?;
    Ok(ReliabilityCurve {
        queries: queries.len(),
        accuracy,
        fit,
    })
}

/// Probability that the true label occurs among the first `k` neighbor
/// labels, for `k = 1..=k_max`.
pub fn hit_rate_from_sets(sets: &[NeighborSet], truth: &[Option<LabelId>], k_max: usize) -> Vec<f64> {
    // First index at which the true label appears; a hit for every k beyond.
    let mut first_hit = vec![0usize; k_max + 1];
    for (set, t) in sets.iter().zip(truth) {
        if let Some(i) = set.items.iter().take(k_max).position(|n| Some(n.label) == *t) {
            first_hit[i + 1] += 1;
        }
    }
    let n = sets.len().max(1) as f64;
    let mut acc = 0usize;
    (1..=k_max)
        .map(|k| {
            acc += first_hit[k];
            acc as f64 / n
        })
        .collect()
}

pub fn hit_rate(retriever: Retriever<'_>, queries: &QuerySet, k_max: usize, exclude_self: bool) -> Result<Vec<f64>> {
    let memory = retriever.memory();
    check_depth(memory, k_max)?;
    let sets = retriever.search_excluding(queries, k_max, exclude_self)?;
    Ok(hit_rate_from_sets(&sets, &queries.label_ids(memory), k_max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    /// Inclusive lower confidence bound.
    pub lo: u32,
    /// Inclusive upper confidence bound.
    pub hi: u32,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationTable {
    pub bin_width: u32,
    pub prediction: VoteConfig,
    pub total: usize,
    pub bins: Vec<CalibrationBin>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrateOptions {
    pub bin_width: u32,
    /// Classifier whose correctness is binned; its `k` is capped at 100.
    pub prediction: VoteConfig,
    pub exclude_self: bool,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            bin_width: 10,
            prediction: VoteConfig::new(Scheme::Plurality, CALIBRATION_DEPTH),
            exclude_self: false,
        }
    }
}

/// Bins queries by the count of the plurality label among their first 100
/// neighbors and reports the accuracy inside each bin.
pub fn calibrate(retriever: Retriever<'_>, queries: &QuerySet, options: CalibrateOptions) -> Result<CalibrationTable> {
    let memory = retriever.memory();
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if memory.len() < CALIBRATION_DEPTH {
        return Err(Error::MemoryTooSmall {
            need: CALIBRATION_DEPTH,
            have: memory.len(),
        });
    }
    let w = options.bin_width;
    if w == 0 || w > CALIBRATION_DEPTH as u32 {
        return Err(Error::InvalidConfig(format!("bin width must be in 1..=100, got {w}")));
    }
    let prediction = options.prediction.with_k(options.prediction.k.min(CALIBRATION_DEPTH));
    prediction.validate()?;
    let sets = retriever.search_excluding(queries, CALIBRATION_DEPTH, options.exclude_self)?;
    let truth = queries.label_ids(memory);
    let per_query: Vec<(u32, bool)> = sets
        .par_iter()
        .zip(truth.par_iter())
        .map(|(set, t)| {
            let confidence = classify_items(&set.items, &VoteConfig::new(Scheme::Plurality, CALIBRATION_DEPTH), None)?.confidence;
            let p = classify_items(&set.items, &prediction, None)?;
            Ok((confidence, Some(p.label) == *t))
        })
        .collect::<Result<_>>()?;

    let nbins = (CALIBRATION_DEPTH as u32).div_ceil(w) as usize;
    let mut bins: Vec<CalibrationBin> = (0..nbins as u32)
        .map(|b| CalibrationBin {
            lo: b * w,
            hi: if b as usize + 1 == nbins { CALIBRATION_DEPTH as u32 } else { (b + 1) * w - 1 },
            count: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    for (conf, ok) in per_query {
        let b = ((conf / w) as usize).min(nbins - 1);
        bins[b].count += 1;
        bins[b].correct += usize::from(ok);
    }
    for b in &mut bins {
        b.accuracy = (b.count > 0).then(|| b.correct as f64 / b.count as f64);
    }
    Ok(CalibrationTable {
        bin_width: w,
        prediction,
        total: queries.len(),
        bins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub per_class: usize,
    pub size: usize,
    pub accuracy: f64,
    pub error: f64,
}

/// Evaluates `config` on seeded per-class subsamples of `memory`. Each
/// target size is divided evenly over the classes (at least one each).
pub fn scaling_sweep(
    memory: &VisualMemory,
    queries: &QuerySet,
    sizes: &[usize],
    config: &VoteConfig,
    seed: u64,
) -> Result<Vec<ScalingPoint>> {
    let classes = memory.labels().len().max(1);
    sizes
        .iter()
        .map(|&size| {
            let per_class = (size / classes).max(1);
            let sub = memory.subsample(per_class, seed)?;
            let k = config.k.min(sub.len());
            let curve = evaluate(Retriever::Exact(&sub), queries, &config.with_k(k), EvalOptions::default())?;
            let accuracy = curve.at(k);
            Ok(ScalingPoint {
                per_class,
                size: sub.len(),
                accuracy,
                error: 1.0 - accuracy,
            })
        })
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodStats {
    pub name: String,
    pub queries: usize,
    pub k: usize,
    /// Per-query mean distance to the first `k` neighbors.
    pub means: Vec<f64>,
    /// Per-query median distance to the first `k` neighbors.
    pub medians: Vec<f64>,
    pub mean_of_means: f64,
    pub median_of_means: f64,
    pub mean_of_medians: f64,
    pub median_of_medians: f64,
}

/// Mean and median neighbor distance per query, summarized per named pack.
pub fn ood_distance_stats(retriever: Retriever<'_>, packs: &[(String, QuerySet)], k: usize) -> Result<Vec<OodStats>> {
    let memory = retriever.memory();
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let k = k.min(memory.len());
    packs
        .iter()
        .map(|(name, qs)| {
            if qs.is_empty() {
                return Err(Error::InvalidConfig(format!("query pack '{name}' is empty")));
            }
            let sets = retriever.search(qs, k)?;
            let (means, medians): (Vec<f64>, Vec<f64>) = sets
                .iter()
                .map(|s| {
                    let mut d: Vec<f64> = s.items.iter().map(|n| n.distance.value()).collect();
                    d.sort_by(f64::total_cmp);
                    (mean(&d), median(&d))
                })
                .unzip();
            let mut sm = means.clone();
            sm.sort_by(f64::total_cmp);
            let mut sd = medians.clone();
            sd.sort_by(f64::total_cmp);
            Ok(OodStats {
                name: name.clone(),
                queries: qs.len(),
                k,
                mean_of_means: mean(&sm),
                median_of_means: median(&sm),
                mean_of_medians: mean(&sd),
                median_of_medians: median(&sd),
                means,
                medians,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualResult {
    pub primary: NeighborSet,
    /// Id of the nearest neighbor that was subtracted.
    pub subtracted: u64,
    /// `|q - z0|` before renormalization.
    pub residual_norm: f64,
    pub residual: NeighborSet,
}

/// Subtracts the nearest neighbor from the query, renormalizes and searches
/// again with that neighbor excluded.
pub fn residual_query(memory: &VisualMemory, query: &EmbeddingVector, k: usize) -> Result<ResidualResult> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if memory.len() < 2 {
        return Err(Error::MemoryTooSmall { need: 2, have: memory.len() });
    }
    let primary = exact_search(memory, query, k)?;
    let z0 = primary.items[0].id;
    let z = memory.vector(memory.row_of(z0).expect("neighbor exists"));
    let raw: Vec<f64> = query.as_slice().iter().zip(z).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect();
    let residual_norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if residual_norm < MIN_RESIDUAL_NORM {
        return Err(Error::DegenerateResidual { norm: residual_norm });
    }
    let r: Vec<f32> = raw.iter().map(|&x| x as f32).collect();
    let r = normalize(&r)?;
    let residual = exact_search(memory, &r, k + 1)?.without(z0, k);
    Ok(ResidualResult {
        primary,
        subtracted: z0,
        residual_norm,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemoryEntry;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn scaling_fit_recovers_line() {
        let pts: Vec<(f64, f64)> = [1e2, 3e2, 1e3, 1e4, 5e4, 1e5, 1e6]
            .iter()
            .map(|&x: &f64| (x, 10f64.powf(-0.9434 * x.log10() + 2.0704)))
            .collect();
        let f = fit_scaling(&pts).unwrap();
        assert_abs_diff_eq!(f.slope, -0.9434, epsilon = 1e-9);
        assert_abs_diff_eq!(f.intercept, 2.0704, epsilon = 1e-9);
        assert!(f.rss >= 0.0 && f.rss < 1e-20);
    }

    #[test]
    fn two_points_interpolate() {
        let f = fit_scaling(&[(10.0, 0.5), (1000.0, 0.05)]).unwrap();
        assert_abs_diff_eq!(f.slope, -0.5, epsilon = 1e-12);
        assert!(f.rss < 1e-25);
        assert!(matches!(fit_scaling(&[(10.0, 0.5), (10.0, 0.1)]), Err(Error::DegenerateFit(_))));
        assert!(fit_scaling(&[(10.0, 0.5)]).is_err());
        assert!(fit_scaling(&[(10.0, 0.0), (20.0, 0.1)]).is_err());
    }

    #[test]
    fn log_fit() {
        let vals: Vec<f64> = (0..50).map(|i| 0.9 - 0.05 * ((i as f64) + 1.0).ln()).collect();
        let f = fit_logarithmic(&vals).unwrap();
        assert_abs_diff_eq!(f.intercept, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(f.slope, -0.05, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn scaling_fit_order_invariant(mut pts in prop::collection::vec((1.0f64..1e6, 1e-4f64..1.0), 2..20), seed in any::<u64>()) {
            prop_assume!(pts.iter().any(|p| p.0 != pts[0].0));
            let a = fit_scaling(&pts).unwrap();
            use rand::{seq::SliceRandom, SeedableRng};
            pts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = fit_scaling(&pts).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    fn axis(dims: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dims];
        v[i] = 1.0;
        v
    }

    #[test]
    fn residual_examples() {
        let mut m = VisualMemory::new(4).unwrap();
        m.insert((0..4).map(|i| MemoryEntry::new(i as u64, normalize(&axis(4, i)).unwrap(), format!("c{i}"))).collect())
            .unwrap();
        let q = normalize(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(residual_query(&m, &q, 2), Err(Error::DegenerateResidual { .. })));

        let q = normalize(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        let r = residual_query(&m, &q, 3).unwrap();
        // ties between concepts 0 and 2 go to the smaller id
        assert_eq!(r.subtracted, 0);
        assert_eq!(r.residual.items[0].id, 2);
        assert!(r.residual.ids().all(|id| id != 0));
        assert_eq!(r.residual.len(), 3);

        // <normalize(r), z0> = (<q, z0> - 1) / |r|
        let z0 = m.vector(0);
        let rn = normalize(&q.as_slice().iter().zip(z0).map(|(a, b)| a - b).collect::<Vec<_>>()).unwrap();
        let lhs = crate::vector::dot(rn.as_slice(), z0);
        let rhs = (crate::vector::dot(q.as_slice(), z0) - 1.0) / r.residual_norm;
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6);
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[1.0, 2.0, 10.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn hit_rate_counts_first_occurrence() {
        use crate::search::Neighbor;
        use crate::vector::Distance;
        let set = |labels: &[LabelId]| NeighborSet {
            query_id: None,
            items: labels
                .iter()
                .enumerate()
                .map(|(rank, &label)| Neighbor { id: rank as u64, label, distance: Distance::new(rank as f64 * 0.1), rank })
                .collect(),
        };
        let sets = vec![set(&[1, 0, 0]), set(&[0, 0, 1]), set(&[2, 2, 2])];
        let truth = vec![Some(0), Some(0), Some(0)];
        assert_eq!(hit_rate_from_sets(&sets, &truth, 3), vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(reliability_from_sets(&sets, &truth, 3), vec![1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]);
    }
}
