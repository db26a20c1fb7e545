//! Λ and Ξ measures, the merger rates they induce, and the non-spatial
//! coalescent (its sampler and its time density).

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::combinatorics::{count_mergers, merger_signature, Forest, MergerSignature, Partition};
use crate::error::{Error, Result};

/// Parametric density part of a Λ measure: `mass · Beta(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPart {
    pub a: f64,
    pub b: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LambdaMeasure {
    /// `(p, w)`: mass `w` at location `p`.
    pub atoms: Vec<(f64, f64)>,
    pub density: Option<BetaPart>,
}

impl LambdaMeasure {
    pub fn kingman(a: f64) -> Self {
        LambdaMeasure {
            atoms: vec![(0.0, a)],
            density: None,
        }
    }

    pub fn dirac(p: f64, w: f64) -> Self {
        LambdaMeasure {
            atoms: vec![(p, w)],
            density: None,
        }
    }

    pub fn uniform(mass: f64) -> Self {
        LambdaMeasure {
            atoms: Vec::new(),
            density: Some(BetaPart { a: 1.0, b: 1.0, mass }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &(p, w) in &self.atoms {
            if !(0.0..=1.0).contains(&p) || !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidMeasure(format!("atom ({p}, {w})")));
            }
        }
        if let Some(d) = self.density {
            if !(d.a > 0.0 && d.b > 0.0 && d.mass > 0.0 && d.mass.is_finite()) {
                return Err(Error::InvalidMeasure(format!("density {d:?}")));
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum::<f64>() + self.density.map_or(0.0, |d| d.mass)
    }

    /// The Ξ measure obtained by pushing forward under `p ↦ (p, 0, …)`.
    /// Only atomic measures embed into the finite-atom representation.
    pub fn to_xi(&self) -> Result<XiMeasure> {
        if self.density.is_some() {
            return Err(Error::InvalidMeasure("density parts have no finite-atom Ξ form".into()));
        }
        let mut x = XiMeasure::default();
        for &(p, w) in &self.atoms {
            if p == 0.0 {
                x.kingman += w;
            } else {
                x.atoms.push(XiAtom { xi: vec![p], mass: w });
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiAtom {
    pub xi: Vec<f64>,
    pub mass: f64,
}

impl XiAtom {
    pub fn sum(&self) -> f64 {
        self.xi.iter().sum()
    }

    pub fn square_norm(&self) -> f64 {
        self.xi.iter().map(|v| v * v).sum()
    }
}

/// `Ξ = a δ_0 + Σ w_j δ_{ξ_j}` with finitely supported atoms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct XiMeasure {
    pub kingman: f64,
    pub atoms: Vec<XiAtom>,
}

impl XiMeasure {
    pub fn validate(&self) -> Result<()> {
        if !(self.kingman >= 0.0 && self.kingman.is_finite()) {
            return Err(Error::InvalidMeasure(format!("kingman mass {}", self.kingman)));
        }
        for a in &self.atoms {
            let ok = a.mass > 0.0
                && a.mass.is_finite()
                && a.xi.iter().all(|&v| v >= 0.0)
                && a.xi.windows(2).all(|w| w[0] >= w[1])
                && a.sum() <= 1.0 + 1e-12
                && a.square_norm() > 0.0;
            if !ok {
                return Err(Error::InvalidMeasure(format!("atom {:?}", a)));
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.kingman + self.atoms.iter().map(|a| a.mass).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Measure {
    Lambda(LambdaMeasure),
    Xi(XiMeasure),
}

impl Measure {
    pub fn kingman() -> Self {
        Measure::Lambda(LambdaMeasure::kingman(1.0))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Measure::Lambda(l) => l.validate(),
            Measure::Xi(x) => x.validate(),
        }
    }

    pub fn rate(&self, n: usize, sig: &MergerSignature) -> Result<f64> {
        match self {
            Measure::Lambda(l) => {
                if sig.num_groups() == 1 {
                    lambda_rate(l, n, sig.groups()[0] as usize)
                } else if sig.total() <= n {
                    Ok(0.0)
                } else {
                    Err(Error::InvalidRate(format!("{sig} with n = {n}")))
                }
            }
            Measure::Xi(x) => xi_rate(x, n, sig),
        }
    }
}

/// JSON description of a Λ or Ξ measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub kind: MeasureKind,
    #[serde(default)]
    pub kingman: f64,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensitySpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    Lambda,
    Xi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    pub name: DensityName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    pub mass: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityName {
    Uniform,
    Beta,
}

impl MeasureSpec {
    pub fn kingman() -> Self {
        MeasureSpec {
            kind: MeasureKind::Lambda,
            kingman: 1.0,
            atoms: Vec::new(),
            density: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidMeasure(e.to_string()))
    }

    pub fn to_measure(&self) -> Result<Measure> {
        let m = match self.kind {
            MeasureKind::Lambda => {
                let mut l = LambdaMeasure::default();
                if self.kingman > 0.0 {
                    l.atoms.push((0.0, self.kingman));
                }
                for a in &self.atoms {
                    match (a.p, &a.xi) {
                        (Some(p), None) => l.atoms.push((p, a.mass)),
                        (None, Some(x)) if x.len() == 1 => l.atoms.push((x[0], a.mass)),
                        _ => return Err(Error::InvalidMeasure("Λ atoms take a single location p".into())),
                    }
                }
                if let Some(d) = &self.density {
                    let (a, b) = match d.name {
                        DensityName::Uniform => (1.0, 1.0),
                        DensityName::Beta => match (d.a, d.b) {
                            (Some(a), Some(b)) => (a, b),
                            _ => return Err(Error::InvalidMeasure("beta density needs a and b".into())),
                        },
                    };
                    l.density = Some(BetaPart { a, b, mass: d.mass });
                }
                Measure::Lambda(l)
            }
            MeasureKind::Xi => {
                if self.density.is_some() {
                    return Err(Error::InvalidMeasure("Ξ measures are atomic".into()));
                }
                let mut x = XiMeasure {
                    kingman: self.kingman,
                    atoms: Vec::new(),
                };
                for a in &self.atoms {
                    let mut xi = match (a.p, &a.xi) {
                        (None, Some(v)) => v.clone(),
                        (Some(p), None) => vec![p],
                        _ => return Err(Error::InvalidMeasure("atom needs exactly one of xi, p".into())),
                    };
                    xi.retain(|&v| v != 0.0);
                    x.atoms.push(XiAtom { xi, mass: a.mass });
                }
                Measure::Xi(x)
            }
        };
        m.validate()?;
        Ok(m)
    }
}

/// `λ_{n,k} = ∫ p^{k−2}(1−p)^{n−k} Λ(dp)`.
pub fn lambda_rate(l: &LambdaMeasure, n: usize, k: usize) -> Result<f64> {
    if k < 2 || k > n {
        return Err(Error::InvalidRate(format!("(n, k) = ({n}, {k})")));
    }
    let mut r = 0.0;
    for &(p, w) in &l.atoms {
        r += w * p.powi(k as i32 - 2) * (1.0 - p).powi((n - k) as i32);
    }
    if let Some(d) = l.density {
        let lb = ln_beta(d.a + (k - 2) as f64, d.b + (n - k) as f64) - ln_beta(d.a, d.b);
        r += d.mass * lb.exp();
    }
    Ok(r)
}

/// Rate of one specific `(n, k⃗)`-merger under `Ξ`, with the Kingman mass
/// added to the binary rate.
pub fn xi_rate(x: &XiMeasure, n: usize, sig: &MergerSignature) -> Result<f64> {
    if sig.total() > n {
        return Err(Error::InvalidRate(format!("{sig} with n = {n}")));
    }
    let mut r = if sig.groups() == [2] { x.kingman } else { 0.0 };
    for a in &x.atoms {
        let sq = a.square_norm();
        if sq <= 0.0 {
            return Err(Error::InvalidMeasure("atom with (ξ,ξ) = 0".into()));
        }
        r += a.mass * xi_atom_integrand(&a.xi, n, sig.groups()) / sq;
    }
    Ok(r)
}

/// `Σ_l C(s,l)(1−|ξ|)^{s−l} Σ_{i_1≠…≠i_{m+l}} ξ_{i_1}^{k_1}…ξ_{i_m}^{k_m} ξ_{i_{m+1}}…ξ_{i_{m+l}}`.
fn xi_atom_integrand(xi: &[f64], n: usize, ks: &[u32]) -> f64 {
    let s = n - ks.iter().map(|&k| k as usize).sum::<usize>();
    let rest = (1.0 - xi.iter().sum::<f64>()).max(0.0);
    let mut used = vec![false; xi.len()];
    let mut total = 0.0;
    assign_groups(xi, ks, 0, 1.0, &mut used, &mut |weight, used| {
        // ordered distinct singleton indices among the unused ones: l!·e_l
        let free: Vec<f64> = xi.iter().zip(used).filter(|(_, &u)| !u).map(|(&v, _)| v).collect();
        let e = elementary_symmetric(&free, s);
        let mut fact = 1.0;
        let mut binom = 1.0;
        let mut acc = 0.0;
        for l in 0..=s.min(free.len()) {
            if l > 0 {
                fact *= l as f64;
                binom = binom * (s - l + 1) as f64 / l as f64;
            }
            acc += binom * rest.powi((s - l) as i32) * fact * e[l];
        }
        total += weight * acc;
    });
    total
}

fn assign_groups<F: FnMut(f64, &[bool])>(xi: &[f64], ks: &[u32], g: usize, weight: f64, used: &mut [bool], visit: &mut F) {
    if g == ks.len() {
        visit(weight, used);
        return;
    }
    for i in 0..xi.len() {
        if !used[i] {
            used[i] = true;
            assign_groups(xi, ks, g + 1, weight * xi[i].powi(ks[g] as i32), used, visit);
            used[i] = false;
        }
    }
}

/// `e_0, …, e_s` of the given values (zero beyond their count).
fn elementary_symmetric(v: &[f64], s: usize) -> Vec<f64> {
    let mut e = vec![0.0; s + 1];
    e[0] = 1.0;
    for &x in v {
        for l in (1..=s).rev() {
            e[l] += e[l - 1] * x;
        }
    }
    e
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Lambda,
    Xi,
}

/// Rates of every specific `(n, k⃗)`-merger for `2 ≤ n ≤ n_max`, with totals
/// `λ_n = Σ count·rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    kind: TableKind,
    n_max: usize,
    rates: BTreeMap<(usize, MergerSignature), f64>,
    totals: Vec<f64>,
}

impl RateTable {
    pub fn from_fn<F>(kind: TableKind, n_max: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &MergerSignature) -> Result<f64>,
    {
        if n_max < 2 {
            return Err(Error::InvalidArgument("n_max must be at least 2".into()));
        }
        let mut rates = BTreeMap::new();
        for n in 2..=n_max {
            for sig in MergerSignature::all(n) {
                let r = f(n, &sig)?;
                if !(r >= 0.0 && r.is_finite()) {
                    return Err(Error::InvalidRate(format!("rate {r} for {sig} at n = {n}")));
                }
                rates.insert((n, sig), r);
            }
        }
        let mut t = RateTable {
            kind,
            n_max,
            rates,
            totals: Vec::new(),
        };
        t.recompute_totals();
        Ok(t)
    }

    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn rate(&self, n: usize, sig: &MergerSignature) -> f64 {
        *self.rates.get(&(n, sig.clone())).unwrap_or_else(|| panic!("no rate for {sig} at n = {n} (n_max {})", self.n_max))
    }

    /// Total jump rate `λ_n` with `n` lineages (zero for `n ≤ 1`).
    pub fn total(&self, n: usize) -> f64 {
        if n <= 1 {
            0.0
        } else {
            self.totals[n]
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &MergerSignature, f64)> {
        self.rates.iter().map(|((n, s), r)| (*n, s, *r))
    }

    /// Overwrite one rate (totals are updated); used to inject faults.
    pub fn set_rate(&mut self, n: usize, sig: &MergerSignature, r: f64) {
        self.rates.insert((n, sig.clone()), r);
        self.recompute_totals();
    }

    pub fn recomputed_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.n_max + 1];
        for ((n, s), r) in &self.rates {
            totals[*n] += count_mergers(*n, s) as f64 * r;
        }
        totals
    }

    fn recompute_totals(&mut self) {
        self.totals = self.recomputed_totals();
    }

    /// Rate of the transition `p → q`.
    pub fn transition_rate(&self, p: &Partition, q: &Partition) -> Result<f64> {
        let sig = merger_signature(p, q)?;
        Ok(self.rate(p.len(), &sig))
    }

    pub fn is_absorbing(&self, n: usize) -> bool {
        self.total(n) == 0.0
    }
}

pub fn build_rate_table(m: &Measure, n_max: usize) -> Result<RateTable> {
    m.validate()?;
    let kind = match m {
        Measure::Lambda(_) => TableKind::Lambda,
        Measure::Xi(_) => TableKind::Xi,
    };
    RateTable::from_fn(kind, n_max, |n, s| m.rate(n, s))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub n: usize,
    pub signature: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub checks: Vec<IdentityCheck>,
    pub pass: bool,
}

impl ConsistencyReport {
    pub fn failures(&self) -> impl Iterator<Item = &IdentityCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Check sampling consistency of the table: the Λ recursion
/// `λ_{n,k} = λ_{n+1,k} + λ_{n+1,k+1}` for Λ tables, and for Ξ tables the
/// identity summing over where one added lineage can go.
pub fn check_consistency(t: &RateTable, tol: f64) -> ConsistencyReport {
    let mut checks = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);
    for n in 2..t.n_max() {
        match t.kind() {
            TableKind::Lambda => {
                for k in 2..=n {
                    let s = MergerSignature::new(vec![k as u32]).expect("k ≥ 2");
                    let s1 = MergerSignature::new(vec![k as u32 + 1]).expect("k ≥ 2");
                    let lhs = t.rate(n, &s);
                    let rhs = t.rate(n + 1, &s) + t.rate(n + 1, &s1);
                    checks.push(IdentityCheck {
                        n,
                        signature: s.to_string(),
                        lhs,
                        rhs,
                        pass: close(lhs, rhs),
                    });
                }
            }
            TableKind::Xi => {
                for s in MergerSignature::all(n) {
                    let lhs = t.rate(n, &s);
                    let mut rhs = t.rate(n + 1, &s);
                    for i in 0..s.num_groups() {
                        let mut ks = s.groups().to_vec();
                        ks[i] += 1;
                        rhs += t.rate(n + 1, &MergerSignature::new(ks).expect("valid"));
                    }
                    let free = n - s.total();
                    if free > 0 {
                        let mut ks = s.groups().to_vec();
                        ks.push(2);
                        rhs += free as f64 * t.rate(n + 1, &MergerSignature::new(ks).expect("valid"));
                    }
                    checks.push(IdentityCheck {
                        n,
                        signature: s.to_string(),
                        lhs,
                        rhs,
                        pass: close(lhs, rhs),
                    });
                }
            }
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    ConsistencyReport { checks, pass }
}

/// Exact draw of the non-spatial coalescent started from `p0`: the forest and
/// its merge times (`times[0] = 0`, one entry per level).
pub fn sample_nonspatial_path<R: Rng + ?Sized>(t: &RateTable, p0: &Partition, rng: &mut R) -> (Forest, Vec<f64>) {
    let mut levels = vec![p0.clone()];
    let mut times = vec![0.0];
    loop {
        let cur = levels.last().expect("nonempty");
        let n = cur.len();
        let total = t.total(n);
        if n <= 1 || total <= 0.0 {
            break;
        }
        let hold = Exp::new(total).expect("positive rate").sample(rng);
        let next = random_coarsening(t, cur, rng);
        times.push(times.last().expect("nonempty") + hold);
        levels.push(next);
    }
    (Forest::new(levels).expect("strictly coarsening"), times)
}

/// A coarsening of `p` drawn with probability proportional to its rate.
pub fn random_coarsening<R: Rng + ?Sized>(t: &RateTable, p: &Partition, rng: &mut R) -> Partition {
    let n = p.len();
    let mut u = rng.random::<f64>() * t.total(n);
    let sigs = MergerSignature::all(n);
    let mut chosen = sigs.last().expect("n ≥ 2").clone();
    for s in &sigs {
        let w = count_mergers(n, s) as f64 * t.rate(n, s);
        if w > 0.0 {
            chosen = s.clone();
            if u < w {
                break;
            }
            u -= w;
        }
    }
    // uniform realisation: shuffle blocks, cut consecutive groups
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut groups = Vec::new();
    let mut pos = 0;
    for &k in chosen.groups() {
        groups.push(idx[pos..pos + k as usize].to_vec());
        pos += k as usize;
    }
    p.merge_groups(&groups).expect("valid groups")
}

/// `f_tm(F, τ) = ∏ λ_{π_i,π_{i+1}} e^{−λ_{π_i}(τ_{i+1}−τ_i)}`, zero unless the
/// root partition is absorbing.
pub fn ftm_density(t: &RateTable, f: &Forest, times: &[f64]) -> Result<f64> {
    validate_times(f, times)?;
    if t.total(f.roots().len()) > 0.0 {
        return Ok(0.0);
    }
    let mut d = 1.0;
    for i in 0..f.num_merges() {
        let n = f.levels()[i].len();
        d *= t.rate(n, &f.signature(i)) * (-t.total(n) * (times[i + 1] - times[i])).exp();
    }
    Ok(d)
}

pub fn validate_times(f: &Forest, times: &[f64]) -> Result<()> {
    if times.len() != f.levels().len() || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidDecoration(format!(
            "times {times:?} do not decorate a forest with {} levels",
            f.levels().len()
        )));
    }
    Ok(())
}
