//! Small numerical helpers shared by the experiments.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn line_fit(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LineFit {
        slope,
        intercept,
        r2,
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(x)
}

/// Kolmogorov distance between a discrete law (support sorted ascending) and the
/// standard normal after standardization by `mean` and `sd`.
pub fn kolmogorov_discrete(support: &[f64], probs: &[f64], mean: f64, sd: f64) -> f64 {
    let mut cdf = 0.0;
    let mut worst: f64 = 0.0;
    for (x, p) in support.iter().zip(probs) {
        let phi = std_normal_cdf((x - mean) / sd);
        worst = worst.max((cdf - phi).abs());
        cdf += p;
        worst = worst.max((cdf - phi).abs());
    }
    worst
}

/// Collapses weighted values to a sorted support with summed probabilities.
pub fn collapse(mut pairs: Vec<(f64, f64)>, tol: f64) -> (Vec<f64>, Vec<f64>) {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut xs: Vec<f64> = Vec::new();
    let mut ps: Vec<f64> = Vec::new();
    for (x, p) in pairs {
        match xs.last() {
            Some(&last) if (x - last).abs() <= tol => *ps.last_mut().expect("nonempty") += p,
            _ => {
                xs.push(x);
                ps.push(p);
            }
        }
    }
    (xs, ps)
}

/// Half-width of the Dvoretzky–Kiefer–Wolfowitz band at confidence `1 - alpha`.
pub fn dkw_halfwidth(samples: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * samples as f64)).sqrt()
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in it {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v).collect();
        let f = line_fit(&x, &y);
        assert!((f.slope + 2.0).abs() < 1e-14 && (f.intercept - 1.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn kolmogorov_of_fair_coin() {
        // one fair coin standardized: jumps at -1 and 1, worst gap at 0-/0+
        let d = kolmogorov_discrete(&[0.0, 1.0], &[0.5, 0.5], 0.5, 0.5);
        let expected = 0.5 - std_normal_cdf(-1.0);
        assert!((d - expected).abs() < 1e-12);
    }

    #[test]
    fn collapse_merges() {
        let (x, p) = collapse(vec![(1.0, 0.2), (0.0, 0.3), (1.0 + 1e-13, 0.5)], 1e-9);
        assert_eq!(x.len(), 2);
        assert!((p[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn compensated() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }
}
