//! Two-sample Kolmogorov-Smirnov test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

/// `sup |F_a - F_b|` over all thresholds. Equal values in either sample are
/// consumed together before the gap is measured.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(sorted_statistic(&a, &b))
}

fn sorted_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution,
/// `Q(l) = 2 sum_{j>=1} (-1)^(j-1) exp(-2 j^2 l^2)`.
///
/// The alternating series converges slowly for small `l`; there the
/// equivalent Jacobi form `1 - sqrt(2 pi)/l sum exp(-(2j-1)^2 pi^2 / (8 l^2))`
/// is used instead.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut sum = 0.0;
        for j in 1..=8 {
            let m = (2 * j - 1) as f64;
            sum += (-m * m * pi2 / (8.0 * lambda * lambda)).exp();
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for j in 1..=100 {
            let jf = j as f64;
            let term = (-2.0 * jf * jf * lambda * lambda).exp();
            sum += sign * term;
            if term < 1e-18 {
                break;
            }
            sign = -sign;
        }
        2.0 * sum
    };
    q.clamp(0.0, 1.0)
}

/// Asymptotic p-value for statistic `d` with sample sizes `n1`, `n2`.
pub fn asymptotic_p_value(d: f64, n1: usize, n2: usize) -> f64 {
    let ne = (n1 as f64 * n2 as f64) / (n1 as f64 + n2 as f64);
    let sq = ne.sqrt();
    kolmogorov_survival((sq + 0.12 + 0.11 / sq) * d)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let statistic = ks_statistic(a, b)?;
    Ok(KsResult {
        statistic,
        p_value: asymptotic_p_value(statistic, a.len(), b.len()),
        n1: a.len(),
        n2: b.len(),
    })
}

/// Permutation-test variant: the p-value is the fraction of `permutations`
/// seeded relabelings of the pooled sample whose statistic reaches the
/// observed one. Slow; meant for validating the asymptotic path.
pub fn ks_permutation(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> Result<KsResult> {
    let statistic = ks_statistic(a, b)?;
    if permutations == 0 {
        return Err(Error::InvalidConfig("permutations must be at least 1".into()));
    }
    let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-12;
    let mut hits = 0usize;
    let (mut x, mut y) = (Vec::with_capacity(a.len()), Vec::with_capacity(b.len()));
    for _ in 0..permutations {
        pool.shuffle(&mut rng);
        x.clear();
        y.clear();
        x.extend_from_slice(&pool[..a.len()]);
        y.extend_from_slice(&pool[a.len()..]);
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        if sorted_statistic(&x, &y) >= statistic - tol {
            hits += 1;
        }
    }
    Ok(KsResult {
        statistic,
        p_value: hits as f64 / permutations as f64,
        n1: a.len(),
        n2: b.len(),
    })
}
