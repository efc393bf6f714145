//! Small statistics toolkit: moments, least squares, seeded bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Linear-interpolated quantile of the finite values.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn ols(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Some(LinearFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bootstrap {
    pub estimate: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Resamples whole rows (seeds) with replacement and reports the standard
/// deviation and 95% percentile interval of `stat`.
pub fn bootstrap<T>(rows: &[T], stat: impl Fn(&[&T]) -> f64, resamples: usize, seed: u64) -> Bootstrap {
    let all: Vec<&T> = rows.iter().collect();
    let estimate = stat(&all);
    if rows.len() < 2 || resamples == 0 {
        return Bootstrap { estimate, std: 0.0, lo: estimate, hi: estimate };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(resamples);
    let mut pick: Vec<&T> = Vec::with_capacity(rows.len());
    for _ in 0..resamples {
        pick.clear();
        for _ in 0..rows.len() {
            pick.push(&rows[rng.gen_range(0..rows.len())]);
        }
        vals.push(stat(&pick));
    }
    Bootstrap {
        estimate,
        std: std_dev(&vals),
        lo: quantile(&vals, 0.025),
        hi: quantile(&vals, 0.975),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((std_dev(&xs) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(median(&xs), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 3.0, 5.0];
        let f = ols(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(ols(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn bootstrap_of_constant_rows_has_zero_spread() {
        let rows = vec![2.0; 10];
        let b = bootstrap(&rows, |r| r.iter().map(|v| **v).sum::<f64>() / r.len() as f64, 200, 1);
        assert_eq!(b.std, 0.0);
        assert_eq!(b.estimate, 2.0);
    }

    #[test]
    fn bootstrap_mean_std_close_to_standard_error() {
        let rows: Vec<f64> = (0..400).map(|k| ((k * 37) % 101) as f64).collect();
        let se = std_dev(&rows) / (rows.len() as f64).sqrt();
        let b = bootstrap(&rows, |r| r.iter().map(|v| **v).sum::<f64>() / r.len() as f64, 2000, 9);
        assert!((b.std / se - 1.0).abs() < 0.1, "{} vs {}", b.std, se);
        assert!(b.lo < b.estimate && b.estimate < b.hi);
    }
}
