//! The normalisation `N(x) = Σ_F ∫ f_tm(F, τ) g(F, τ, x) dτ`, its
//! log-gradient, the no-merge transition density and the resampling law `μ`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::combinatorics::{enumerate_coarsenings, Forest, Partition};
use crate::error::{Error, Result};
use crate::kernels::{kernel_1d_with_derivative, torus_kernel, wrap, KernelMethod, SpatialConfig, TorusPoint};
use crate::quad::{exp_map, integrate_vec, QuadOptions};
use crate::rates::{sample_nonspatial_path, validate_times, RateTable};
use crate::rng::stream_rng;
use crate::tree::{spatial_integral_g, spatial_integral_g_grad_log};

/// Smallest separation (in `d ≥ 2`) below which estimates are flagged.
pub const NEAR_DIAGONAL: f64 = 1e-3;

/// A forest with merge times and one location per node (leaves included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoratedForest {
    pub forest: Forest,
    pub times: Vec<f64>,
    pub xi: Vec<TorusPoint>,
}

/// `∏_u p(τ_{pr(u)} − τ_u, ξ_u − ξ_{pr(u)})` over nodes with a parent.
pub fn fsp_density(f: &Forest, times: &[f64], xi: &[TorusPoint], x: &SpatialConfig) -> Result<f64> {
    validate_times(f, times)?;
    if xi.len() != f.nodes().len() || f.leaves() != x.partition() {
        return Err(Error::InvalidDecoration("space decoration does not match the forest".into()));
    }
    for (i, p) in x.positions().iter().enumerate() {
        if &xi[i] != p {
            return Err(Error::InvalidDecoration(format!("leaf {i} is not at its sampled position")));
        }
    }
    let m = KernelMethod::default();
    let mut v = 1.0;
    for (u, node) in f.nodes().iter().enumerate() {
        if let Some(p) = node.parent {
            let ell = times[f.nodes()[p].birth] - times[node.birth];
            v *= torus_kernel(ell, &xi[p].displacement_to(&xi[u]), m)?;
        }
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMethod {
    /// Closed form where one exists, quadrature for forests with at most
    /// two merges, Monte Carlo for the rest.
    Auto,
    /// Like `Auto` but never uses a closed form.
    Quadrature,
    /// Monte Carlo over the non-spatial coalescent for every forest.
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormOptions {
    pub method: NormMethod,
    pub rel_tol: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions {
            method: NormMethod::Auto,
            rel_tol: 1e-7,
            mc_samples: 20_000,
            seed: 0,
        }
    }
}

impl NormOptions {
    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        NormOptions {
            method: NormMethod::MonteCarlo,
            mc_samples: samples,
            seed,
            ..Default::default()
        }
    }

    pub fn quadrature() -> Self {
        NormOptions {
            method: NormMethod::Quadrature,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    Closed,
    Quadrature,
    MonteCarlo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForestEstimate {
    pub forest: Forest,
    pub value: f64,
    pub std_error: f64,
    pub method: EstimateMethod,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizationEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: EstimateMethod,
    pub per_forest: Vec<ForestEstimate>,
    /// Set when two lineages are closer than [`NEAR_DIAGONAL`] in `d ≥ 2`.
    pub near_diagonal: bool,
}

/// `N` for a pair at displacement `Δ` when the binary rate is `λ` in `d = 1`:
/// `(√λ/2) cosh(√λ(1/2 − |Δ|)) / sinh(√λ/2)`.
pub fn pair_n_closed(lambda: f64, delta: f64) -> f64 {
    let a = lambda.sqrt();
    let r = crate::kernels::centered(delta).abs();
    0.5 * a * (a * (0.5 - r)).cosh() / (0.5 * a).sinh()
}

/// Derivative of `log N` in `Δ` for the closed-form pair.
pub fn pair_dlog_closed(lambda: f64, delta: f64) -> f64 {
    let a = lambda.sqrt();
    let c = crate::kernels::centered(delta);
    -a * (a * (0.5 - c.abs())).tanh() * c.signum()
}

/// Pair normalisation `∫ λ e^{−λt} p_{2t}(Δ) dt` in any dimension and its
/// gradient in `Δ`, by the trapezoid rule in `s = ln t` (the integrand decays
/// doubly exponentially at both ends).
pub fn pair_n_with_grad(lambda: f64, disp: &[f64]) -> (f64, Vec<f64>) {
    let m = KernelMethod::default();
    let r2: f64 = disp.iter().map(|v| crate::kernels::centered(*v).powi(2)).sum::<f64>().max(1e-16);
    let (lo, hi) = ((r2 / 200.0).ln(), (40.0 / lambda).ln());
    let steps = ((hi - lo) / 0.35).ceil().max(8.0) as usize;
    let h = (hi - lo) / steps as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; disp.len()];
    let mut parts = vec![(0.0, 0.0); disp.len()];
    for i in 0..=steps {
        let s = lo + h * i as f64;
        let t = s.exp();
        let mut w = lambda * (-lambda * t).exp() * t * h;
        if i == 0 || i == steps {
            w *= 0.5;
        }
        let mut prod = 1.0;
        for (c, &dc) in disp.iter().enumerate() {
            parts[c] = kernel_1d_with_derivative(2.0 * t, dc, m);
            prod *= parts[c].0;
        }
        value += w * prod;
        for c in 0..disp.len() {
            grad[c] += w * prod * parts[c].1 / parts[c].0;
        }
    }
    (value, grad)
}

fn absorbing(t: &RateTable, p: &Partition) -> bool {
    t.total(p.len()) == 0.0
}

/// Forests from `p0` with at most `max_merges` merges, positive rates
/// throughout and an absorbing root.
pub fn short_forests(p0: &Partition, t: &RateTable, max_merges: usize) -> Vec<Forest> {
    let mut out = Vec::new();
    if absorbing(t, p0) {
        out.push(Forest::trivial(p0.clone()));
        return out;
    }
    let mut stack = vec![vec![p0.clone()]];
    while let Some(chain) = stack.pop() {
        let last = chain.last().expect("nonempty");
        for q in enumerate_coarsenings(last) {
            if t.transition_rate(last, &q).expect("coarsening") <= 0.0 {
                continue;
            }
            let mut next = chain.clone();
            next.push(q.clone());
            if absorbing(t, &q) {
                out.push(Forest::new(next).expect("strict chain"));
            } else if next.len() <= max_merges {
                stack.push(next);
            }
        }
    }
    out.sort_by_key(|f| f.to_string());
    out
}

/// `∫ f_tm(F, τ) h(τ) dτ` for a forest with at most two merges, componentwise
/// in the vector returned by `h`.
pub fn forest_time_integral<H>(f: &Forest, t: &RateTable, width: usize, mut h: H, rel_tol: f64) -> Result<Vec<f64>>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let lv = f.levels();
    let mut failure: Option<Error> = None;
    let mut guard = |taus: &[f64], width: usize| -> Vec<f64> {
        match h(taus) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                vec![f64::NAN; width]
            }
        }
    };
    let opts = QuadOptions::rel(rel_tol);
    let out = match f.num_merges() {
        0 => return Ok(if absorbing(t, &lv[0]) { h(&[0.0])? } else { vec![0.0; width] }),
        1 => {
            let (n0, r) = (lv[0].len(), t.rate(lv[0].len(), &f.signature(0)));
            let l0 = t.total(n0);
            if r <= 0.0 || !absorbing(t, &lv[1]) {
                return Ok(vec![0.0; width]);
            }
            let v = integrate_vec(|u| guard(&[0.0, exp_map(u, l0)], width), 0.0, 1.0, opts)?;
            v.into_iter().map(|x| x * r / l0).collect()
        }
        2 => {
            let (n0, n1) = (lv[0].len(), lv[1].len());
            let (r1, r2) = (t.rate(n0, &f.signature(0)), t.rate(n1, &f.signature(1)));
            let (l0, l1) = (t.total(n0), t.total(n1));
            if r1 <= 0.0 || r2 <= 0.0 || !absorbing(t, &lv[2]) {
                return Ok(vec![0.0; width]);
            }
            let inner_opts = QuadOptions::rel(rel_tol);
            let mut inner_failure: Option<Error> = None;
            let v = integrate_vec(
                |u1| {
                    let t1 = exp_map(u1, l0);
                    match integrate_vec(|u2| guard(&[0.0, t1, t1 + exp_map(u2, l1)], width), 0.0, 1.0, inner_opts) {
                        Ok(v) => v,
                        Err(e) => {
                            inner_failure.get_or_insert(e);
                            vec![f64::NAN; width]
                        }
                    }
                },
                0.0,
                1.0,
                opts,
            );
            if let Some(e) = inner_failure {
                return Err(e);
            }
            v?.into_iter().map(|x| x * r1 / l0 * r2 / l1).collect()
        }
        m => return Err(Error::InvalidArgument(format!("quadrature over {m} merge times is not supported"))),
    };
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(out)
}

struct McAccumulator {
    forest: Forest,
    sum: Vec<f64>,
    sum_sq: f64,
}

/// Monte Carlo over the non-spatial coalescent: per-forest sums of `h`
/// restricted to forests with at least `min_merges` merges.
fn monte_carlo<H>(x: &SpatialConfig, t: &RateTable, samples: usize, seed: u64, min_merges: usize, mut h: H) -> Result<BTreeMap<String, McAccumulator>>
where
    H: FnMut(&Forest, &[f64]) -> Result<Vec<f64>>,
{
    let mut rng = stream_rng(seed, 0x4e);
    let mut acc: BTreeMap<String, McAccumulator> = BTreeMap::new();
    for _ in 0..samples {
        let (f, times) = sample_nonspatial_path(t, x.partition(), &mut rng);
        if f.num_merges() < min_merges {
            continue;
        }
        let v = h(&f, &times)?;
        let e = acc.entry(f.to_string()).or_insert_with(|| McAccumulator {
            forest: f.clone(),
            sum: vec![0.0; v.len()],
            sum_sq: 0.0,
        });
        for (s, vi) in e.sum.iter_mut().zip(&v) {
            *s += vi;
        }
        e.sum_sq += v[0] * v[0];
    }
    Ok(acc)
}

fn check_size(x: &SpatialConfig, t: &RateTable) -> Result<()> {
    if x.len() > t.n_max() {
        return Err(Error::InvalidArgument(format!(
            "{} lineages exceed the rate table (n_max = {})",
            x.len(),
            t.n_max()
        )));
    }
    Ok(())
}

fn near_diagonal(x: &SpatialConfig) -> bool {
    x.dim() >= 2 && x.len() >= 2 && x.min_separation() < NEAR_DIAGONAL
}

/// `N(x)` with per-forest values and standard errors.
pub fn normalization_n(x: &SpatialConfig, t: &RateTable, opts: &NormOptions) -> Result<NormalizationEstimate> {
    check_size(x, t)?;
    let n = x.len();
    let flag = near_diagonal(x);
    let single = |value: f64, forest: Forest, method: EstimateMethod| NormalizationEstimate {
        value,
        std_error: 0.0,
        method,
        per_forest: vec![ForestEstimate {
            forest,
            value,
            std_error: 0.0,
            method,
        }],
        near_diagonal: flag,
    };
    if absorbing(t, x.partition()) {
        return Ok(single(1.0, Forest::trivial(x.partition().clone()), EstimateMethod::Closed));
    }
    if n == 2 && opts.method != NormMethod::MonteCarlo {
        let cherry = Forest::new(vec![x.partition().clone(), Partition::from_blocks(vec![x.partition().blocks()[0].union(&x.partition().blocks()[1])])?])?;
        let disp = x.positions()[0].displacement_to(&x.positions()[1]);
        let lambda = t.total(2);
        return Ok(if x.dim() == 1 && opts.method == NormMethod::Auto {
            single(pair_n_closed(lambda, disp[0]), cherry, EstimateMethod::Closed)
        } else {
            single(pair_n_with_grad(lambda, &disp).0, cherry, EstimateMethod::Quadrature)
        });
    }
    let mut per_forest = Vec::new();
    let mut value = 0.0;
    let mut var = 0.0;
    let quad_merges = if opts.method == NormMethod::MonteCarlo { 0 } else { 2 };
    if quad_merges > 0 {
        for f in short_forests(x.partition(), t, quad_merges) {
            let v = forest_time_integral(&f, t, 1, |taus| Ok(vec![spatial_integral_g(&f, taus, x)?]), opts.rel_tol)?[0];
            value += v;
            per_forest.push(ForestEstimate {
                forest: f,
                value: v,
                std_error: 0.0,
                method: EstimateMethod::Quadrature,
            });
        }
    }
    let mut used_mc = false;
    if opts.method == NormMethod::MonteCarlo || n > 3 {
        used_mc = true;
        let m = opts.mc_samples.max(2) as f64;
        let acc = monte_carlo(x, t, opts.mc_samples.max(2), opts.seed, quad_merges + 1, |f, taus| Ok(vec![spatial_integral_g(f, taus, x)?]))?;
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for (_, a) in acc {
            let mean = a.sum[0] / m;
            let se = ((a.sum_sq / m - mean * mean).max(0.0) / (m - 1.0)).sqrt();
            total += a.sum[0];
            total_sq += a.sum_sq;
            per_forest.push(ForestEstimate {
                forest: a.forest,
                value: mean,
                std_error: se,
                method: EstimateMethod::MonteCarlo,
            });
        }
        // forests are disjoint events, so the pooled second moment is the sum
        let mean = total / m;
        var = (total_sq / m - mean * mean).max(0.0) / (m - 1.0);
        value += mean;
    }
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite normalisation at {:?}", x.positions())));
    }
    Ok(NormalizationEstimate {
        value,
        std_error: var.sqrt(),
        method: if used_mc { EstimateMethod::MonteCarlo } else { EstimateMethod::Quadrature },
        per_forest,
        near_diagonal: flag,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub n: f64,
    /// `∇ log N`, one `d`-vector per lineage.
    pub grad: Vec<Vec<f64>>,
    pub near_diagonal: bool,
}

/// `∇ log N(x)`; value and gradient share their time samples.
pub fn grad_log_n(x: &SpatialConfig, t: &RateTable, opts: &NormOptions) -> Result<DriftEstimate> {
    check_size(x, t)?;
    let n = x.len();
    let d = x.dim();
    let flag = near_diagonal(x);
    if absorbing(t, x.partition()) {
        return Ok(DriftEstimate {
            n: 1.0,
            grad: vec![vec![0.0; d]; n],
            near_diagonal: flag,
        });
    }
    if n == 2 && opts.method != NormMethod::MonteCarlo {
        let disp = x.positions()[0].displacement_to(&x.positions()[1]);
        let lambda = t.total(2);
        let (value, g) = if d == 1 && opts.method == NormMethod::Auto {
            (pair_n_closed(lambda, disp[0]), vec![pair_dlog_closed(lambda, disp[0])])
        } else {
            let (v, g) = pair_n_with_grad(lambda, &disp);
            (v, g.into_iter().map(|gi| gi / v).collect())
        };
        // Δ = x₂ − x₁
        return Ok(DriftEstimate {
            n: value,
            grad: vec![g.iter().map(|v| -v).collect(), g],
            near_diagonal: flag,
        });
    }
    let width = 1 + n * d;
    let integrand = |f: &Forest, taus: &[f64]| -> Result<Vec<f64>> {
        let (g, gl) = spatial_integral_g_grad_log(f, taus, x)?;
        if g == 0.0 {
            // underflow: ∇ log g is not representable but g ∇ log g vanishes
            return Ok(vec![0.0; width]);
        }
        let mut v = Vec::with_capacity(width);
        v.push(g);
        for row in gl {
            v.extend(row.into_iter().map(|c| c * g));
        }
        Ok(v)
    };
    let mut total = vec![0.0; width];
    let quad_merges = if opts.method == NormMethod::MonteCarlo { 0 } else { 2 };
    if quad_merges > 0 {
        for f in short_forests(x.partition(), t, quad_merges) {
            let v = forest_time_integral(&f, t, width, |taus| integrand(&f, taus), opts.rel_tol)?;
            for (a, b) in total.iter_mut().zip(v) {
                *a += b;
            }
        }
    }
    if opts.method == NormMethod::MonteCarlo || n > 3 {
        let m = opts.mc_samples.max(2) as f64;
        let acc = monte_carlo(x, t, opts.mc_samples.max(2), opts.seed, quad_merges + 1, |f, taus| integrand(f, taus))?;
        for (_, a) in acc {
            for (tot, s) in total.iter_mut().zip(&a.sum) {
                *tot += s / m;
            }
        }
    }
    if !(total[0] > 0.0) || total.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("degenerate normalisation at {:?}", x.positions())));
    }
    let grad = (0..n).map(|i| (0..d).map(|c| total[1 + i * d + c] / total[0]).collect()).collect();
    Ok(DriftEstimate {
        n: total[0],
        grad,
        near_diagonal: flag,
    })
}

/// Density of moving from `x` to `y` in time `s` without any merge:
/// `e^{−λ_π s} (N(y)/N(x)) ∏_u p_s(y_u − x_u)`.
pub fn transition_density_no_merge(x: &SpatialConfig, y: &SpatialConfig, s: f64, t: &RateTable, opts: &NormOptions) -> Result<f64> {
    if x.partition() != y.partition() {
        return Err(Error::InvalidArgument("configurations carry different partitions".into()));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument("time must be positive".into()));
    }
    let lambda = t.total(x.len());
    let decay = (-lambda * s).exp();
    if decay == 0.0 {
        return Ok(0.0);
    }
    let m = KernelMethod::default();
    let mut heat = 1.0;
    for (a, b) in x.positions().iter().zip(y.positions()) {
        heat *= torus_kernel(s, &a.displacement_to(b), m)?;
    }
    let ratio = normalization_n(y, t, opts)?.value / normalization_n(x, t, opts)?.value;
    Ok(decay * ratio * heat)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuOptions {
    /// Grid size for inverse-CDF sampling in `d = 1` given one point.
    pub grid: usize,
    /// Uniform nodes of the rejection envelope in `d = 1` given two or more
    /// points (the conditioning points are added as nodes).
    pub envelope_grid: usize,
    /// Envelope height over the larger endpoint value of each cell.
    pub envelope_slack: f64,
    pub burn_in: usize,
    /// Half-width of the uniform random-walk proposal per coordinate.
    pub step: f64,
    pub norm: NormOptions,
}

impl Default for MuOptions {
    fn default() -> Self {
        MuOptions {
            grid: 4096,
            envelope_grid: 64,
            envelope_slack: 1.15,
            burn_in: 400,
            step: 0.5,
            norm: NormOptions::default(),
        }
    }
}

/// Unnormalised density `y ↦ N(x, y)` of the resampling law `μ_x`.
pub fn mu_density(x: &SpatialConfig, y: &TorusPoint, t: &RateTable, opts: &NormOptions) -> Result<f64> {
    if x.len() == 1 {
        let lambda = t.total(2);
        if lambda == 0.0 {
            return Ok(1.0);
        }
        let disp = x.positions()[0].displacement_to(y);
        return Ok(if disp.len() == 1 { pair_n_closed(lambda, disp[0]) } else { pair_n_with_grad(lambda, &disp).0 });
    }
    match x.extended(y.clone()) {
        Ok(xy) => Ok(normalization_n(&xy, t, opts)?.value),
        Err(Error::CoincidentPoints) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Draw `y` from `μ_x(dy) ∝ N(x, y) dy`.
pub fn sample_mu<R: Rng + ?Sized>(x: &SpatialConfig, t: &RateTable, opts: &MuOptions, rng: &mut R) -> Result<TorusPoint> {
    check_size(&x.extended(TorusPoint::new(vec![0.5; x.dim()])).unwrap_or_else(|_| x.clone()), t)?;
    let mut norm = opts.norm;
    if x.dim() == 1 && x.len() > 1 {
        return MuEnvelope::new(x, t, opts, rng)?.draw(rng);
    }
    if x.dim() == 1 {
        let g = opts.grid;
        let mut cdf = Vec::with_capacity(g + 1);
        cdf.push(0.0);
        for i in 0..g {
            norm.seed = rng.random();
            let y = TorusPoint::new(vec![(i as f64 + 0.5) / g as f64]);
            let v = mu_density(x, &y, t, &norm)?;
            cdf.push(cdf[i] + v.max(0.0));
        }
        let total = cdf[g];
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numerical("resampling density has no mass".into()));
        }
        let u = rng.random::<f64>() * total;
        let i = (cdf.partition_point(|&c| c <= u).max(1) - 1).min(g - 1);
        return Ok(TorusPoint::new(vec![(i as f64 + rng.random::<f64>()) / g as f64]));
    }
    metropolis_mu(x, t, opts, rng)
}

/// Rejection sampler for `μ_x` in `d = 1` with a piecewise-constant
/// envelope over cells between grid nodes and the conditioning points
/// (where `N(x, ·)` peaks). A draw above the envelope is reported, not
/// absorbed.
pub struct MuEnvelope<'a> {
    x: SpatialConfig,
    t: &'a RateTable,
    norm: NormOptions,
    cells: Vec<(f64, f64, f64)>,
    cum: Vec<f64>,
}

impl<'a> MuEnvelope<'a> {
    pub fn new<R: Rng + ?Sized>(x: &SpatialConfig, t: &'a RateTable, opts: &MuOptions, rng: &mut R) -> Result<Self> {
        if x.dim() != 1 {
            return Err(Error::InvalidArgument("envelope sampler is for d = 1".into()));
        }
        let mut norm = opts.norm;
        let g = opts.envelope_grid.max(2);
        let mut nodes: Vec<f64> = (0..g).map(|i| i as f64 / g as f64).collect();
        nodes.extend(x.positions().iter().map(|p| p.coords()[0]));
        nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        nodes.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        let mut vals = Vec::with_capacity(nodes.len());
        for &y in &nodes {
            norm.seed = rng.random();
            // nudge off the conditioning points themselves
            vals.push(mu_density(x, &TorusPoint::new(vec![wrap(y + 1e-9)]), t, &norm)?.max(0.0));
        }
        let m = nodes.len();
        let mut cells = Vec::with_capacity(m);
        let mut cum = vec![0.0];
        for i in 0..m {
            let (a, b) = (nodes[i], if i + 1 < m { nodes[i + 1] } else { 1.0 + nodes[0] });
            let h = opts.envelope_slack * vals[i].max(vals[(i + 1) % m]);
            cells.push((a, b, h));
            cum.push(cum[i] + h * (b - a));
        }
        let total = cum[m];
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numerical("resampling density has no mass".into()));
        }
        Ok(MuEnvelope { x: x.clone(), t, norm, cells, cum })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TorusPoint> {
        let m = self.cells.len();
        let total = self.cum[m];
        let mut norm = self.norm;
        for _ in 0..10_000 {
            let u = rng.random::<f64>() * total;
            let i = (self.cum.partition_point(|&c| c <= u).max(1) - 1).min(m - 1);
            let (a, b, h) = self.cells[i];
            let y = TorusPoint::new(vec![wrap(a + rng.random::<f64>() * (b - a))]);
            norm.seed = rng.random();
            let v = mu_density(&self.x, &y, self.t, &norm)?;
            if v > h {
                return Err(Error::Diagnostics(format!("resampling density {v} exceeds envelope {h} near {}", y.coords()[0])));
            }
            if rng.random::<f64>() * h < v {
                return Ok(y);
            }
        }
        Err(Error::Diagnostics("rejection sampler made no progress".into()))
    }
}

/// Random-walk Metropolis on the torus targeting `N(x, ·)`; with Monte Carlo
/// estimates of `N` this is the pseudo-marginal chain (estimates are kept
/// with their states).
fn metropolis_mu<R: Rng + ?Sized>(x: &SpatialConfig, t: &RateTable, opts: &MuOptions, rng: &mut R) -> Result<TorusPoint> {
    let d = x.dim();
    let mut norm = opts.norm;
    let mut cur = TorusPoint::new((0..d).map(|_| rng.random::<f64>()).collect());
    norm.seed = rng.random();
    let mut cur_v = mu_density(x, &cur, t, &norm)?;
    let mut accepted = 0usize;
    for _ in 0..opts.burn_in {
        let step: Vec<f64> = (0..d).map(|_| opts.step * (2.0 * rng.random::<f64>() - 1.0)).collect();
        let prop = cur.shifted(&step);
        norm.seed = rng.random();
        let v = mu_density(x, &prop, t, &norm)?;
        if rng.random::<f64>() * cur_v < v {
            cur = prop;
            cur_v = v;
            accepted += 1;
        }
    }
    let rate = accepted as f64 / opts.burn_in.max(1) as f64;
    // a proposal covering the whole torus accepts almost everything when
    // N(x, ·) is flat, which is not a mixing failure
    if rate < 0.1 || (rate > 0.9 && opts.step < 0.5) {
        return Err(Error::Diagnostics(format!("Metropolis acceptance rate {rate:.3} outside [0.1, 0.9]")));
    }
    Ok(cur)
}

/// Positions of `n` lineages drawn sequentially: the first uniform, each
/// next from `μ` given those already placed. The joint density is `∝ N`.
pub fn sample_stationary<R: Rng + ?Sized>(n: usize, d: usize, t: &RateTable, opts: &MuOptions, rng: &mut R) -> Result<SpatialConfig> {
    let first = TorusPoint::new((0..d).map(|_| rng.random::<f64>()).collect());
    let mut x = SpatialConfig::new(Partition::singletons(1), vec![first])?;
    while x.len() < n {
        let y = sample_mu(&x, t, opts, rng)?;
        x = x.extended(y)?;
    }
    Ok(x)
}

/// `N(x) / ∫ N` over a grid in `d = 1` for one free lineage; used by tests.
pub fn mu_grid_density(x: &SpatialConfig, t: &RateTable, grid: usize, opts: &NormOptions) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(grid);
    for i in 0..grid {
        let y = TorusPoint::new(vec![wrap((i as f64 + 0.5) / grid as f64)]);
        v.push(mu_density(x, &y, t, opts)?);
    }
    let total: f64 = v.iter().sum::<f64>() / grid as f64;
    Ok(v.into_iter().map(|a| a / total).collect())
}

#[allow(dead_code)]
fn pair_n_by_quadrature(lambda: f64, disp: &[f64]) -> f64 {
    let m = KernelMethod::default();
    crate::quad::integrate_exponential(|s| torus_kernel(2.0 * s, disp, m).expect("positive time"), lambda, QuadOptions::rel(1e-12))
        .expect("finite")
        .value
}
