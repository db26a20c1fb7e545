//! Two-sample and goodness-of-fit tests used by the experiments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use xicoal::rng::Rng as StreamRng;
use xicoal::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestStat {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov tail `P(K > λ)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Effective-size-corrected asymptotic p-value for a KS statistic.
fn ks_p(d: f64, ne: f64) -> f64 {
    if d == 0.0 {
        return 1.0;
    }
    let r = ne.sqrt();
    kolmogorov_q((r + 0.12 + 0.11 / r) * d)
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("NaN in sample".into()));
    }
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    Ok(v)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestStat> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS needs two nonempty samples".into()));
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    Ok(TestStat {
        statistic: d,
        p_value: ks_p(d, ne),
    })
}

pub fn ks_one_sample(a: &[f64], cdf: impl Fn(f64) -> f64) -> Result<TestStat> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("KS needs a nonempty sample".into()));
    }
    let a = sorted(a)?;
    let n = a.len() as f64;
    let d = a
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    Ok(TestStat {
        statistic: d,
        p_value: ks_p(d, n),
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy distance `nm/(n+m) · (2E|X−Y| − E|X−X'| − E|Y−Y'|)` with a
/// permutation p-value over `permutations` relabellings (stream `seed`).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> Result<TestStat> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("energy distance needs two nonempty samples".into()));
    }
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = a.len();
    let total = pooled.len();
    let mut dist = vec![0.0; total * total];
    for i in 0..total {
        for j in (i + 1)..total {
            let v = euclid(pooled[i], pooled[j]);
            dist[i * total + j] = v;
            dist[j * total + i] = v;
        }
    }
    let stat = |idx: &[usize]| {
        let (xa, xb) = idx.split_at(n);
        let m = xb.len();
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for &i in xa {
            let row = &dist[i * total..(i + 1) * total];
            for &j in xb {
                ab += row[j];
            }
            for &j in xa {
                aa += row[j];
            }
        }
        for &i in xb {
            let row = &dist[i * total..(i + 1) * total];
            for &j in xb {
                bb += row[j];
            }
        }
        let (nf, mf) = (n as f64, m as f64);
        let e = 2.0 * ab / (nf * mf) - aa / (nf * nf) - bb / (mf * mf);
        nf * mf / (nf + mf) * e
    };
    let mut idx: Vec<usize> = (0..total).collect();
    let observed = stat(&idx);
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut above = 0usize;
    for _ in 0..permutations {
        idx.shuffle(&mut rng);
        if stat(&idx) >= observed - 1e-12 * observed.abs() {
            above += 1;
        }
    }
    Ok(TestStat {
        statistic: observed,
        p_value: (1 + above) as f64 / (1 + permutations) as f64,
    })
}

/// Pearson goodness of fit of `counts` against category probabilities;
/// categories with zero probability must be empty.
pub fn chi_square_gof(counts: &[usize], probs: &[f64]) -> Result<TestStat> {
    if counts.len() != probs.len() || counts.is_empty() {
        return Err(Error::InvalidArgument("counts and probabilities must match".into()));
    }
    let total: usize = counts.iter().sum();
    let mut chi2 = 0.0;
    let mut cats = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 0.0 {
            if c > 0 {
                return Ok(TestStat { statistic: f64::INFINITY, p_value: 0.0 });
            }
            continue;
        }
        let e = total as f64 * p;
        chi2 += (c as f64 - e).powi(2) / e;
        cats += 1;
    }
    Ok(TestStat {
        statistic: chi2,
        p_value: chi_p(chi2, cats),
    })
}

/// Homogeneity of two count vectors over the same categories.
pub fn chi_square_two_sample(a: &[usize], b: &[usize]) -> Result<TestStat> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument("count vectors must match".into()));
    }
    let (na, nb) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let mut chi2 = 0.0;
    let mut cats = 0;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        cats += 1;
        let (ea, eb) = (col * na / (na + nb), col * nb / (na + nb));
        chi2 += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    Ok(TestStat {
        statistic: chi2,
        p_value: chi_p(chi2, cats),
    })
}

fn chi_p(chi2: f64, cats: usize) -> f64 {
    if cats < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cats - 1) as f64).expect("positive dof").cdf(chi2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use xicoal::rng::stream_rng;

    fn uniforms(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn identical_samples() {
        let a = uniforms(1, 500);
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn calibration_same_law() {
        let r = ks_two_sample(&uniforms(2, 10_000), &uniforms(3, 10_000)).unwrap();
        assert!(r.p_value > 0.01, "{r:?}");
    }

    #[test]
    fn calibration_shifted_law() {
        let a = uniforms(4, 10_000);
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert!(r.p_value < 1e-6, "{r:?}");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(ks_two_sample(&[], &[1.0]).is_err());
        assert!(ks_one_sample(&[], |x| x).is_err());
    }

    #[test]
    fn kolmogorov_tail_values() {
        // P(K > 1.36) ≈ 0.049, P(K > 1.63) ≈ 0.0098
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_q(1.628) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn one_sample_uniform() {
        let r = ks_one_sample(&uniforms(5, 5000), |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(r.p_value > 0.01);
        let r = ks_one_sample(&uniforms(5, 5000), |x| (x * x).clamp(0.0, 1.0)).unwrap();
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn energy_distance_detects_shift() {
        let pts = |seed, shift: f64| -> Vec<Vec<f64>> {
            let mut rng = stream_rng(seed, 0);
            (0..150).map(|_| vec![rng.random::<f64>() + shift, rng.random::<f64>()]).collect()
        };
        let same = energy_distance(&pts(6, 0.0), &pts(7, 0.0), 199, 0).unwrap();
        assert!(same.p_value > 0.01, "{same:?}");
        let moved = energy_distance(&pts(6, 0.0), &pts(7, 0.3), 199, 0).unwrap();
        assert!(moved.p_value <= 0.005, "{moved:?}");
    }

    #[test]
    fn chi_square_examples() {
        let r = chi_square_gof(&[25, 25, 50], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let r = chi_square_gof(&[1, 0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.p_value, 0.0);
        let r = chi_square_two_sample(&[30, 70], &[30, 70]).unwrap();
        assert_eq!(r.statistic, 0.0);
        let r = chi_square_two_sample(&[90, 10], &[10, 90]).unwrap();
        assert!(r.p_value < 1e-6);
    }
}
