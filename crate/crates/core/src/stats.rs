//! Sample statistics: moments, multivariate energy distance and the
//! fixed-seed permutation test used by the verification suite.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn std_error_of_mean(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the sample variance under approximate normality:
/// `s^2 sqrt(2 / (n - 1))`.
pub fn std_error_of_variance(xs: &[f64]) -> f64 {
    variance(xs) * (2.0 / (xs.len() as f64 - 1.0)).sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` between two point clouds
/// (rows of dimension `dim`).
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let m = y.len();
    if n == 0 || m == 0 {
        return 0.0;
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += dist(a, b);
        }
    }
    let mut xx = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            xx += dist(&x[i], &x[j]);
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            yy += dist(&y[i], &y[j]);
        }
    }
    2.0 * xy / (n as f64 * m as f64) - 2.0 * xx / (n as f64 * n as f64)
        - 2.0 * yy / (m as f64 * m as f64)
}

#[derive(Debug, Clone)]
pub struct PermutationTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_permutations: usize,
}

/// Two-sample permutation test on the energy distance with a fixed seed, so
/// repeated runs are deterministic. The pairwise distance matrix is computed
/// once; permutations only re-partition indices.
pub fn energy_permutation_test(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    n_permutations: usize,
    seed: u64,
) -> PermutationTestResult {
    let n = x.len();
    let m = y.len();
    let total = n + m;
    let pool: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).chain(y.iter().map(|v| v.as_slice())).collect();
    let mut dmat = vec![0.0; total * total];
    for i in 0..total {
        for j in (i + 1)..total {
            let d = dist(pool[i], pool[j]);
            dmat[i * total + j] = d;
            dmat[j * total + i] = d;
        }
    }
    let stat_of = |idx: &[usize]| -> f64 {
        // First n indices form the X group, the rest the Y group.
        let (gx, gy) = idx.split_at(n);
        let mut xy = 0.0;
        for &i in gx {
            for &j in gy {
                xy += dmat[i * total + j];
            }
        }
        let mut xx = 0.0;
        for a in 0..n {
            for b in (a + 1)..n {
                xx += dmat[gx[a] * total + gx[b]];
            }
        }
        let mut yy = 0.0;
        for a in 0..m {
            for b in (a + 1)..m {
                yy += dmat[gy[a] * total + gy[b]];
            }
        }
        2.0 * xy / (n as f64 * m as f64)
            - 2.0 * xx / (n as f64 * n as f64)
            - 2.0 * yy / (m as f64 * m as f64)
    };
    let identity: Vec<usize> = (0..total).collect();
    let observed = stat_of(&identity);
    // Pre-generate permutations sequentially for determinism, evaluate in parallel.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..n_permutations)
        .map(|_| {
            let mut idx = identity.clone();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let exceed = perms.par_iter().filter(|p| stat_of(p) >= observed).count();
    let p_value = (exceed as f64 + 1.0) / (n_permutations as f64 + 1.0);
    PermutationTestResult { statistic: observed, p_value, n_permutations }
}

/// Concentration of a planar cloud on a closed curve: fit a star-shaped curve
/// around the centroid (median radius per angular bin, linearly interpolated)
/// and return the fraction of points within `threshold` of it radially.
pub fn closed_curve_concentration(points: &[Vec<f64>], n_bins: usize, threshold: f64) -> f64 {
    assert!(points.iter().all(|p| p.len() == 2), "planar clouds only");
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let cx = mean(&points.iter().map(|p| p[0]).collect::<Vec<_>>());
    let cy = mean(&points.iter().map(|p| p[1]).collect::<Vec<_>>());
    let polar: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            let dx = p[0] - cx;
            let dy = p[1] - cy;
            (dy.atan2(dx), (dx * dx + dy * dy).sqrt())
        })
        .collect();
    let two_pi = std::f64::consts::TAU;
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for &(th, r) in &polar {
        let idx = (((th + two_pi) % two_pi) / two_pi * n_bins as f64) as usize % n_bins;
        bins[idx].push(r);
    }
    let medians: Vec<Option<f64>> = bins
        .iter()
        .map(|b| {
            if b.is_empty() {
                return None;
            }
            let mut v = b.clone();
            v.sort_by(|a, c| a.partial_cmp(c).unwrap());
            Some(v[v.len() / 2])
        })
        .collect();
    // Fill empty bins by the nearest occupied neighbour around the circle.
    let filled: Vec<f64> = (0..n_bins)
        .map(|i| {
            if let Some(m) = medians[i] {
                return m;
            }
            for off in 1..n_bins {
                for cand in [(i + off) % n_bins, (i + n_bins - off % n_bins) % n_bins] {
                    if let Some(m) = medians[cand] {
                        return m;
                    }
                }
            }
            0.0
        })
        .collect();
    let within = polar
        .iter()
        .filter(|&&(th, r)| {
            let x = ((th + two_pi) % two_pi) / two_pi * n_bins as f64 - 0.5;
            let i0 = x.floor().rem_euclid(n_bins as f64) as usize;
            let i1 = (i0 + 1) % n_bins;
            let frac = x - x.floor();
            let r_hat = filled[i0] * (1.0 - frac) + filled[i1] * frac;
            (r - r_hat).abs() <= threshold
        })
        .count();
    within as f64 / n as f64
}

/// Least-squares slope of y against x.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    num / den
}
