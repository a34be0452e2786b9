//! Small Monte-Carlo summaries shared by the simulation modules.

use serde::Serialize;

/// A sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::INFINITY
        };
        Estimate { mean, se, n }
    }

    /// Distance from `target` in units of standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.se == 0.0 {
            if self.mean == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - target).abs() / self.se
        }
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.mean - target).abs() <= n_se * self.se
    }
}

/// Sample variance with a standard error from the per-sample squared deviations.
pub fn variance_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2) * n as f64 / (n - 1) as f64).collect();
    Estimate::from_samples(&sq)
}

pub fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Histogram on `[lo, hi)` normalised to a density; rows are (left, right, density).
pub fn histogram(xs: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<(f64, f64, f64)> {
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in xs {
        if x >= lo && x < hi {
            let k = (((x - lo) / w) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    let n = xs.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (lo + k as f64 * w, lo + (k + 1) as f64 * w, c as f64 / (n * w)))
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical value of the two-sample KS statistic at level `alpha`.
pub fn ks_critical(na: usize, nb: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((na + nb) as f64 / (na as f64 * nb as f64)).sqrt()
}

/// Energy distance between two 1-D samples (V-statistic form).
pub fn energy_distance(a: &[f64], b: &[f64]) -> f64 {
    2.0 * mean_abs_diff_cross(a, b) - mean_abs_diff_self(a) - mean_abs_diff_self(b)
}

fn mean_abs_diff_self(a: &[f64]) -> f64 {
    // sum_{i,j} |a_i - a_j| via sorting
    let mut s = a.to_vec();
    s.sort_by(|x, y| x.total_cmp(y));
    let n = s.len() as f64;
    let total: f64 = s.iter().enumerate().map(|(k, x)| x * (2.0 * k as f64 - n + 1.0)).sum();
    2.0 * total / (n * n)
}

fn mean_abs_diff_cross(a: &[f64], b: &[f64]) -> f64 {
    let mut sb = b.to_vec();
    sb.sort_by(|x, y| x.total_cmp(y));
    let mut prefix = Vec::with_capacity(sb.len() + 1);
    prefix.push(0.0);
    for x in &sb {
        prefix.push(prefix.last().unwrap() + x);
    }
    let nb = sb.len();
    let total_b = prefix[nb];
    let mut acc = 0.0;
    for &x in a {
        let k = sb.partition_point(|y| *y < x);
        let below = x * k as f64 - prefix[k];
        let above = (total_b - prefix[k]) - x * (nb - k) as f64;
        acc += below + above;
    }
    acc / (a.len() as f64 * nb as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_distance_matches_brute_force() {
        let a = [0.1, -0.4, 2.0, 0.7];
        let b = [1.0, 0.3, -1.2];
        let brute = |x: &[f64], y: &[f64]| {
            let mut s = 0.0;
            for p in x {
                for q in y {
                    s += (p - q).abs();
                }
            }
            s / (x.len() * y.len()) as f64
        };
        let e = 2.0 * brute(&a, &b) - brute(&a, &a) - brute(&b, &b);
        assert!((energy_distance(&a, &b) - e).abs() < 1e-12);
    }

    #[test]
    fn histogram_integrates_to_one() {
        let xs: Vec<f64> = (0..1000).map(|k| k as f64 / 1000.0).collect();
        let h = histogram(&xs, 10, 0.0, 1.0);
        let mass: f64 = h.iter().map(|(l, r, d)| (r - l) * d).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ks_identical_samples_is_zero() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
    }
}
