//! Exchangeable offspring laws and their per-generation merger probabilities.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use xicoal::combinatorics::MergerSignature;
use xicoal::rates::{RateTable, TableKind};
use xicoal::rng::Rng as StreamRng;
use xicoal::{Error, Result};

pub type OffspringSampler = Arc<dyn Fn(&mut dyn RngCore) -> Vec<u32> + Send + Sync>;

/// Monte Carlo draws used for laws without a closed form.
pub const MC_DRAWS: usize = 1_000_000;

/// Law of the offspring vector `(O_1, …, O_N)`. All variants are
/// exchangeable: realizations are uniformly permuted.
#[derive(Clone)]
pub enum OffspringLaw {
    /// Everyone has exactly one child.
    Trivial { n: usize },
    /// One individual has two children, another none.
    PairResampling { n: usize },
    /// One individual has `k` children, `k − 1` others none.
    DiracFamily { n: usize, k: usize },
    /// Mixture of fixed count multisets `(weight, counts)`; omitted entries are zero.
    Multiset { n: usize, components: Vec<(f64, Vec<u32>)> },
    /// Arbitrary sampler returning `N` counts summing to `N`.
    Custom { n: usize, name: String, sampler: OffspringSampler },
}

impl fmt::Debug for OffspringLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl OffspringLaw {
    pub fn population(&self) -> usize {
        match self {
            OffspringLaw::Trivial { n }
            | OffspringLaw::PairResampling { n }
            | OffspringLaw::DiracFamily { n, .. }
            | OffspringLaw::Multiset { n, .. }
            | OffspringLaw::Custom { n, .. } => *n,
        }
    }

    pub fn name(&self) -> String {
        match self {
            OffspringLaw::Trivial { n } => format!("trivial(N={n})"),
            OffspringLaw::PairResampling { n } => format!("pair-resampling(N={n})"),
            OffspringLaw::DiracFamily { n, k } => format!("dirac-family(N={n},K={k})"),
            OffspringLaw::Multiset { n, components } => format!("multiset(N={n},{} components)", components.len()),
            OffspringLaw::Custom { n, name, .. } => format!("custom:{name}(N={n})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.population();
        if n == 0 {
            return Err(Error::InvalidArgument("population size must be positive".into()));
        }
        if let OffspringLaw::DiracFamily { k, .. } = self {
            if *k == 0 || *k > n {
                return Err(Error::InvalidArgument(format!("family size {k} with N = {n}")));
            }
        }
        if let OffspringLaw::PairResampling { .. } = self {
            if n < 2 {
                return Err(Error::InvalidArgument("pair resampling needs N ≥ 2".into()));
            }
        }
        if let OffspringLaw::Multiset { components, .. } = self {
            if components.is_empty() {
                return Err(Error::InvalidArgument("empty mixture".into()));
            }
            for (w, c) in components {
                let sum: u64 = c.iter().map(|&v| v as u64).sum();
                if !(*w > 0.0 && w.is_finite()) || c.len() > n || sum != n as u64 {
                    return Err(Error::InvalidArgument(format!("component ({w}, {c:?}) for N = {n}")));
                }
            }
        }
        Ok(())
    }

    /// Fixed-count mixture form, when the law has one.
    fn components(&self) -> Option<Vec<(f64, Vec<u32>)>> {
        let dirac = |n: usize, k: usize| {
            let mut c = vec![k as u32];
            c.extend(std::iter::repeat_n(1, n - k));
            vec![(1.0, c)]
        };
        match self {
            OffspringLaw::Trivial { n } => Some(dirac(*n, 1)),
            OffspringLaw::PairResampling { n } => Some(dirac(*n, 2)),
            OffspringLaw::DiracFamily { n, k } => Some(dirac(*n, *k)),
            OffspringLaw::Multiset { components, .. } => {
                let tot: f64 = components.iter().map(|c| c.0).sum();
                Some(components.iter().map(|(w, c)| (w / tot, c.clone())).collect())
            }
            OffspringLaw::Custom { .. } => None,
        }
    }

    /// One realization of `(O_1, …, O_N)`.
    pub fn sample(&self, rng: &mut dyn RngCore) -> Result<Vec<u32>> {
        let n = self.population();
        let mut o = match self {
            OffspringLaw::Custom { sampler, .. } => {
                let o = sampler(rng);
                let sum: u64 = o.iter().map(|&v| v as u64).sum();
                if o.len() != n || sum != n as u64 {
                    return Err(Error::InvalidArgument(format!("offspring draw {o:?} is not a vector of N = {n} counts summing to N")));
                }
                o
            }
            _ => {
                let comps = self.components().expect("non-custom law");
                let mut u: f64 = rng.random::<f64>() * comps.iter().map(|c| c.0).sum::<f64>();
                let mut pick = &comps[comps.len() - 1].1;
                for (w, c) in &comps {
                    if u < *w {
                        pick = c;
                        break;
                    }
                    u -= w;
                }
                let mut o = pick.clone();
                o.resize(n, 0);
                o
            }
        };
        o.shuffle(rng);
        Ok(o)
    }

    /// Sizes of the families with at least two members in one realization.
    pub(crate) fn family_sizes(&self, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let o = match self {
            OffspringLaw::Custom { .. } => self.sample(rng)?,
            _ => {
                // order is irrelevant here, so skip the shuffle
                let comps = self.components().expect("non-custom law");
                if comps.len() == 1 {
                    comps[0].1.clone()
                } else {
                    self.sample(rng)?
                }
            }
        };
        Ok(o.into_iter().filter(|&v| v >= 2).map(|v| v as usize).collect())
    }
}

/// `p^N_{n,k⃗}` with its Monte Carlo standard error (zero when exact).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PRate {
    pub value: f64,
    pub std_error: f64,
}

fn falling(x: u64, k: usize) -> f64 {
    (0..k as u64).map(|i| x.saturating_sub(i) as f64).product()
}

/// Probability that a particular `(n, k⃗)`-merger happens in one
/// reproduction event. Exact for fixed-count laws; Monte Carlo with
/// [`MC_DRAWS`] draws from stream `seed` for custom samplers.
pub fn cannings_p_rates(law: &OffspringLaw, n: usize, sig: &MergerSignature, seed: u64) -> Result<PRate> {
    law.validate()?;
    let big_n = law.population();
    if n > big_n || sig.total() > n {
        return Err(Error::InvalidArgument(format!("signature {sig} with n = {n} exceeds N = {big_n}")));
    }
    // factorial-moment orders: k_1..k_m, then 1 for each unmerged lineage
    let mut ks: Vec<usize> = sig.groups().iter().map(|&k| k as usize).collect();
    ks.extend(std::iter::repeat_n(1, n - sig.total()));
    let nn = falling(big_n as u64, n);

    match law.components() {
        Some(comps) => {
            let mut value = 0.0;
            for (w, c) in comps {
                value += w * distinct_tuple_sum(&c, big_n, &ks) / nn;
            }
            Ok(PRate { value, std_error: 0.0 })
        }
        None => {
            let pref = falling(big_n as u64, ks.len()) / nn;
            let mut rng = StreamRng::seed_from_u64(seed);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..MC_DRAWS {
                let o = law.sample(&mut rng)?;
                let v: f64 = ks.iter().zip(&o).map(|(&k, &c)| falling(c as u64, k)).product::<f64>() * pref;
                s += v;
                s2 += v * v;
            }
            let m = MC_DRAWS as f64;
            let mean = s / m;
            let var = (s2 / m - mean * mean).max(0.0);
            Ok(PRate {
                value: mean,
                std_error: (var / m).sqrt(),
            })
        }
    }
}

/// `Σ_{distinct i_1..i_r} Π_j (c_{i_j})_{k_j}` over a count vector padded
/// with zeros to length `big_n`, grouped by distinct count values.
fn distinct_tuple_sum(c: &[u32], big_n: usize, ks: &[usize]) -> f64 {
    let mut vals: Vec<(u32, u64)> = Vec::new();
    for &v in c {
        match vals.iter_mut().find(|e| e.0 == v) {
            Some(e) => e.1 += 1,
            None => vals.push((v, 1)),
        }
    }
    let zeros = (big_n - c.len()) as u64;
    if zeros > 0 {
        match vals.iter_mut().find(|e| e.0 == 0) {
            Some(e) => e.1 += zeros,
            None => vals.push((0, zeros)),
        }
    }
    fn rec(vals: &mut [(u32, u64)], ks: &[usize]) -> f64 {
        let Some((&k, rest)) = ks.split_first() else {
            return 1.0;
        };
        let mut total = 0.0;
        for i in 0..vals.len() {
            let (v, m) = vals[i];
            let f = falling(v as u64, k);
            if m == 0 || f == 0.0 {
                continue;
            }
            vals[i].1 -= 1;
            total += m as f64 * f * rec(vals, rest);
            vals[i].1 += 1;
        }
        total
    }
    rec(&mut vals, ks)
}

/// Rates `T_N · p^N_{n,k⃗}` for `n ≤ n_max`, with the largest Monte Carlo
/// standard error among the entries (scaled by `T_N`).
pub fn cannings_rate_table(law: &OffspringLaw, t_n: f64, n_max: usize, seed: u64) -> Result<(RateTable, f64)> {
    if !(t_n > 0.0 && t_n.is_finite()) {
        return Err(Error::InvalidArgument(format!("event rate {t_n}")));
    }
    let mut worst: f64 = 0.0;
    let table = RateTable::from_fn(TableKind::Xi, n_max, |n, sig| {
        let p = cannings_p_rates(law, n, sig, seed)?;
        worst = worst.max(p.std_error * t_n);
        Ok(p.value * t_n)
    })?;
    Ok((table, worst))
}

/// Quick estimate of the pair coalescence rate `T_N p^N_{2,(2)}`, used to
/// size warm-up periods.
pub(crate) fn pair_rate(law: &OffspringLaw, t_n: f64, rng: &mut dyn RngCore) -> Result<f64> {
    let big_n = law.population();
    if big_n < 2 {
        return Ok(0.0);
    }
    if law.components().is_some() {
        return Ok(t_n * cannings_p_rates(law, 2, &MergerSignature::binary(), 0)?.value);
    }
    let draws = 10_000;
    let mut s = 0.0;
    for _ in 0..draws {
        let o = law.sample(rng)?;
        s += o.iter().map(|&c| falling(c as u64, 2)).sum::<f64>();
    }
    Ok(t_n * s / draws as f64 / (big_n * (big_n - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(ks: &[u32]) -> MergerSignature {
        MergerSignature::new(ks.to_vec()).unwrap()
    }

    #[test]
    fn trivial_law_never_merges() {
        let law = OffspringLaw::Trivial { n: 12 };
        for n in 2..=6 {
            for s in MergerSignature::all(n) {
                assert_eq!(cannings_p_rates(&law, n, &s, 0).unwrap().value, 0.0);
            }
        }
    }

    #[test]
    fn pair_resampling_pair_rate() {
        for big_n in [2usize, 5, 30] {
            let law = OffspringLaw::PairResampling { n: big_n };
            let p = cannings_p_rates(&law, 2, &MergerSignature::binary(), 0).unwrap().value;
            let want = 2.0 / (big_n * (big_n - 1)) as f64;
            assert!((p - want).abs() < 1e-15 * want.max(1.0), "{p} vs {want}");
        }
        let law = OffspringLaw::PairResampling { n: 30 };
        assert_eq!(cannings_p_rates(&law, 3, &sig(&[3]), 0).unwrap().value, 0.0);
        assert_eq!(cannings_p_rates(&law, 4, &sig(&[2, 2]), 0).unwrap().value, 0.0);
    }

    #[test]
    fn dirac_law_merges_everyone() {
        let big_n = 9;
        let law = OffspringLaw::DiracFamily { n: big_n, k: big_n };
        for n in 2..=big_n {
            let p = cannings_p_rates(&law, n, &sig(&[n as u32]), 0).unwrap().value;
            assert!((p - 1.0).abs() < 1e-12, "n = {n}: {p}");
        }
    }

    #[test]
    fn dirac_family_matches_hypergeometric() {
        // a given pair both descend from the big family: (K)_2/(N)_2
        let law = OffspringLaw::DiracFamily { n: 20, k: 5 };
        let p = cannings_p_rates(&law, 2, &MergerSignature::binary(), 0).unwrap().value;
        assert!((p - 20.0 / 380.0).abs() < 1e-15);
        // a given triple merges fully: (K)_3/(N)_3
        let p = cannings_p_rates(&law, 3, &sig(&[3]), 0).unwrap().value;
        assert!((p - 60.0 / 6840.0).abs() < 1e-15);
    }

    #[test]
    fn probabilities_of_a_partition_sum_to_one() {
        // Σ over coarsenings of the n singletons (including none) is 1
        let law = OffspringLaw::Multiset {
            n: 10,
            components: vec![(0.5, vec![3, 3, 2, 1, 1]), (0.5, vec![4, 2, 1, 1, 1, 1])],
        };
        for n in 2..=5 {
            let mut tot = 0.0;
            for s in MergerSignature::all(n) {
                let p = cannings_p_rates(&law, n, &s, 0).unwrap().value;
                tot += xicoal::combinatorics::count_mergers(n, &s) as f64 * p;
            }
            // probability nobody shares a parent
            let c = [3u32, 3, 2, 1, 1, 0, 0, 0, 0, 0];
            let d = [4u32, 2, 1, 1, 1, 1, 0, 0, 0, 0];
            let none = 0.5 * distinct_tuple_sum(&c, 10, &vec![1; n]) / falling(10, n)
                + 0.5 * distinct_tuple_sum(&d, 10, &vec![1; n]) / falling(10, n);
            assert!((tot + none - 1.0).abs() < 1e-12, "n = {n}: {}", tot + none);
        }
    }

    #[test]
    fn monte_carlo_matches_exact() {
        let base = OffspringLaw::DiracFamily { n: 8, k: 3 };
        let inner = base.clone();
        let custom = OffspringLaw::Custom {
            n: 8,
            name: "family3".into(),
            sampler: Arc::new(move |r: &mut dyn RngCore| inner.sample(r).unwrap()),
        };
        for (n, s) in [(2, sig(&[2])), (3, sig(&[3])), (3, sig(&[2]))] {
            let e = cannings_p_rates(&base, n, &s, 0).unwrap().value;
            let m = cannings_p_rates(&custom, n, &s, 11).unwrap();
            assert!(m.std_error > 0.0);
            assert!((m.value - e).abs() < 4.0 * m.std_error, "{s}: {} ± {} vs {e}", m.value, m.std_error);
        }
    }

    #[test]
    fn signature_larger_than_population_is_rejected() {
        let law = OffspringLaw::PairResampling { n: 3 };
        assert!(cannings_p_rates(&law, 4, &sig(&[2]), 0).is_err());
    }

    #[test]
    fn rate_table_scaling_gives_kingman() {
        let big_n = 30;
        let (t, err) = cannings_rate_table(&OffspringLaw::PairResampling { n: big_n }, 435.0, 4, 0).unwrap();
        assert_eq!(err, 0.0);
        assert!((t.rate(2, &MergerSignature::binary()) - 1.0).abs() < 1e-12);
        assert!((t.total(4) - 6.0).abs() < 1e-12);
        assert_eq!(t.rate(4, &sig(&[2, 2])), 0.0);
    }

    #[test]
    fn custom_sampler_is_checked() {
        let bad = OffspringLaw::Custom {
            n: 4,
            name: "bad".into(),
            sampler: Arc::new(|_r: &mut dyn RngCore| vec![2, 2, 2, 0]),
        };
        let mut rng = StreamRng::seed_from_u64(1);
        assert!(bad.sample(&mut rng).is_err());
    }
}
