//! Draws of the Brownian spatial coalescent: decorated forests (exact or by
//! importance resampling), lineage paths along them, and the SDE sampler
//! driven by `∇ log N`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::combinatorics::{Block, Forest, Partition};
use crate::error::{Error, Result};
use crate::kernels::{centered, torus_bridge_offset, wrap, SpatialConfig, TorusPoint};
use crate::normalization::{grad_log_n, normalization_n, pair_n_with_grad, short_forests, DecoratedForest, EstimateMethod, NormOptions};
use crate::quad::{exp_map, integrate, QuadOptions, TabulatedDensity};
use crate::rates::{sample_nonspatial_path, RateTable};
use crate::tree::{sample_space_decoration, spatial_integral_g};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightedSample {
    pub sample: DecoratedForest,
    pub log_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Exact,
    Sir,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Quadrature tolerance for `N_F` and the merge-time tables.
    pub rel_tol: f64,
    /// Proposals per importance-resampling batch.
    pub batch: usize,
    /// Smallest acceptable effective sample size as a fraction of `batch`.
    pub ess_fraction: f64,
    /// Monte Carlo settings for forests with three or more merges.
    pub norm: NormOptions,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            rel_tol: 1e-6,
            batch: 512,
            ess_fraction: 0.2,
            norm: NormOptions::default(),
        }
    }
}

fn log_weight(g: f64) -> f64 {
    g.max(f64::MIN_POSITIVE).ln()
}

/// Importance proposals: `(F, τ)` from the non-spatial coalescent, whose
/// density is `f_tm`, so the weight is `g(F, τ, x)`; `ξ` drawn exactly.
pub fn sir_proposals<R: Rng + ?Sized>(x: &SpatialConfig, t: &RateTable, batch: usize, rng: &mut R) -> Result<Vec<WeightedSample>> {
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (f, times) = sample_nonspatial_path(t, x.partition(), rng);
        let g = spatial_integral_g(&f, &times, x)?;
        let xi = sample_space_decoration(&f, &times, x, rng)?;
        out.push(WeightedSample {
            sample: DecoratedForest { forest: f, times, xi },
            log_weight: log_weight(g),
        });
    }
    Ok(out)
}

/// Effective sample size `(Σw)² / Σw²` of log weights.
pub fn effective_sample_size(log_w: &[f64]) -> f64 {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}

/// Systematic resampling: `len` indices with one shared uniform offset.
pub fn systematic_resample<R: Rng + ?Sized>(log_w: &[f64], len: usize, rng: &mut R) -> Vec<usize> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let u0: f64 = rng.random();
    let mut out = Vec::with_capacity(len);
    let mut acc = w[0];
    let mut i = 0;
    for k in 0..len {
        let target = (u0 + k as f64) / len as f64 * total;
        while acc < target && i + 1 < w.len() {
            i += 1;
            acc += w[i];
        }
        out.push(i);
    }
    out
}

/// One importance-resampling batch: `batch` unweighted draws.
pub fn sample_sir<R: Rng + ?Sized>(x: &SpatialConfig, t: &RateTable, opts: &SamplerOptions, rng: &mut R) -> Result<Vec<DecoratedForest>> {
    let props = sir_proposals(x, t, opts.batch, rng)?;
    let lw: Vec<f64> = props.iter().map(|p| p.log_weight).collect();
    let ess = effective_sample_size(&lw);
    if ess < opts.ess_fraction * opts.batch as f64 {
        return Err(Error::Diagnostics(format!("effective sample size {ess:.1} below {:.1}", opts.ess_fraction * opts.batch as f64)));
    }
    Ok(systematic_resample(&lw, opts.batch, rng).into_iter().map(|i| props[i].sample.clone()).collect())
}

enum Component {
    Trivial(Forest),
    /// One merge: table of `u` with `τ₁ = exp_map(u, λ₀)`.
    One { forest: Forest, l0: f64, table: TabulatedDensity },
    /// Two merges: marginal table of `u₁`; the conditional of `u₂` is
    /// tabulated per draw.
    Two { forest: Forest, l0: f64, l1: f64, table: TabulatedDensity },
    /// Forests with three or more merges, drawn by importance resampling.
    Rest,
}

/// Exact sampler for a fixed start: forests with at most two merges are
/// chosen with probability `N_F / N` and their merge times drawn from
/// tabulated `f_tm · g`; longer forests share the remaining mass and are
/// drawn by importance resampling restricted to them.
pub struct ExactSampler {
    x: SpatialConfig,
    t: RateTable,
    opts: SamplerOptions,
    comps: Vec<Component>,
    weights: Vec<f64>,
}

impl ExactSampler {
    pub fn new(x: &SpatialConfig, t: &RateTable, opts: &SamplerOptions) -> Result<Self> {
        let qo = QuadOptions::rel(opts.rel_tol);
        let mut comps = Vec::new();
        let mut weights = Vec::new();
        if t.total(x.len()) == 0.0 {
            comps.push(Component::Trivial(Forest::trivial(x.partition().clone())));
            weights.push(1.0);
        }
        for f in if comps.is_empty() { short_forests(x.partition(), t, 2) } else { vec![] } {
            let lv = f.levels();
            let (n0, n1) = (lv[0].len(), lv[1].len());
            let l0 = t.total(n0);
            let r0 = t.rate(n0, &f.signature(0));
            if f.num_merges() == 1 {
                let q = integrate(|u| spatial_integral_g(&f, &[0.0, exp_map(u, l0)], x).unwrap_or(f64::NAN), 0.0, 1.0, qo)?;
                weights.push(r0 / l0 * q.value);
                comps.push(Component::One {
                    forest: f,
                    l0,
                    table: TabulatedDensity::from_quadrature(&q)?,
                });
            } else {
                let l1 = t.total(n1);
                let r1 = t.rate(n1, &f.signature(1));
                let q = integrate(
                    |u1| {
                        let t1 = exp_map(u1, l0);
                        integrate(|u2| spatial_integral_g(&f, &[0.0, t1, t1 + exp_map(u2, l1)], x).unwrap_or(f64::NAN), 0.0, 1.0, qo)
                            .map(|q| q.value)
                            .unwrap_or(f64::NAN)
                    },
                    0.0,
                    1.0,
                    qo,
                )?;
                weights.push(r0 / l0 * r1 / l1 * q.value);
                comps.push(Component::Two {
                    forest: f,
                    l0,
                    l1,
                    table: TabulatedDensity::from_quadrature(&q)?,
                });
            }
        }
        if comps.is_empty() || x.len() > 3 {
            let est = normalization_n(x, t, &NormOptions { method: crate::normalization::NormMethod::MonteCarlo, ..opts.norm })?;
            let rest: f64 = est
                .per_forest
                .iter()
                .filter(|fe| fe.method == EstimateMethod::MonteCarlo && fe.forest.num_merges() >= 3)
                .map(|fe| fe.value)
                .sum();
            if rest > 0.0 {
                comps.push(Component::Rest);
                weights.push(rest);
            }
        }
        if !weights.iter().all(|w| w.is_finite()) || !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::Numerical(format!("no sampling mass at {:?}", x.positions())));
        }
        Ok(ExactSampler {
            x: x.clone(),
            t: t.clone(),
            opts: *opts,
            comps,
            weights,
        })
    }

    /// `N(x)` as seen by the sampler (quadrature part plus the Monte Carlo rest).
    pub fn normalization(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Forests and their selection probabilities (the long ones pooled as `None`).
    pub fn forest_probabilities(&self) -> Vec<(Option<&Forest>, f64)> {
        let total = self.normalization();
        self.comps
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| {
                let f = match c {
                    Component::Trivial(f) | Component::One { forest: f, .. } | Component::Two { forest: f, .. } => Some(f),
                    Component::Rest => None,
                };
                (f, w / total)
            })
            .collect()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DecoratedForest> {
        let total = self.normalization();
        let mut u = rng.random::<f64>() * total;
        let mut pick = self.comps.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let (forest, times) = match &self.comps[pick] {
            Component::Trivial(f) => {
                return Ok(DecoratedForest {
                    forest: f.clone(),
                    times: vec![0.0],
                    xi: self.x.positions().to_vec(),
                })
            }
            Component::One { forest, l0, table } => (forest, vec![0.0, exp_map(table.quantile(rng.random()), *l0)]),
            Component::Two { forest, l0, l1, table } => {
                let t1 = exp_map(table.quantile(rng.random()), *l0);
                let q = integrate(
                    |u2| spatial_integral_g(forest, &[0.0, t1, t1 + exp_map(u2, *l1)], &self.x).unwrap_or(f64::NAN),
                    0.0,
                    1.0,
                    QuadOptions::rel(self.opts.rel_tol),
                )?;
                let cond = TabulatedDensity::from_quadrature(&q)?;
                (forest, vec![0.0, t1, t1 + exp_map(cond.quantile(rng.random()), *l1)])
            }
            Component::Rest => return self.draw_long(rng),
        };
        let xi = sample_space_decoration(forest, &times, &self.x, rng)?;
        Ok(DecoratedForest {
            forest: forest.clone(),
            times,
            xi,
        })
    }

    fn draw_long<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DecoratedForest> {
        let mut props = Vec::with_capacity(self.opts.batch);
        let mut tries = 0usize;
        while props.len() < self.opts.batch {
            tries += 1;
            if tries > 1000 * self.opts.batch {
                return Err(Error::Diagnostics("forests with three or more merges are too rare to resample".into()));
            }
            let (f, times) = sample_nonspatial_path(&self.t, self.x.partition(), rng);
            if f.num_merges() < 3 {
                continue;
            }
            let g = spatial_integral_g(&f, &times, &self.x)?;
            props.push((f, times, log_weight(g)));
        }
        let lw: Vec<f64> = props.iter().map(|p| p.2).collect();
        let ess = effective_sample_size(&lw);
        if ess < self.opts.ess_fraction * self.opts.batch as f64 {
            return Err(Error::Diagnostics(format!("effective sample size {ess:.1} below threshold")));
        }
        let i = systematic_resample(&lw, 1, rng)[0];
        let (f, times, _) = props.swap_remove(i);
        let xi = sample_space_decoration(&f, &times, &self.x, rng)?;
        Ok(DecoratedForest { forest: f, times, xi })
    }
}

/// One decorated forest started from `x`. For many draws from the same start
/// build an [`ExactSampler`] once.
pub fn sample_decorated_forest<R: Rng + ?Sized>(x: &SpatialConfig, t: &RateTable, scheme: Scheme, opts: &SamplerOptions, rng: &mut R) -> Result<DecoratedForest> {
    if x.len() > t.n_max() {
        return Err(Error::InvalidArgument(format!("{} lineages exceed the rate table", x.len())));
    }
    match scheme {
        Scheme::Exact => ExactSampler::new(x, t, opts)?.draw(rng),
        Scheme::Sir => Ok(sample_sir(x, t, opts, rng)?.swap_remove(0)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEvent {
    pub time: f64,
    pub partition: Partition,
    /// Locations of the blocks formed at this event.
    pub locations: Vec<(Block, TorusPoint)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePath {
    pub node: usize,
    pub block: Block,
    pub birth: f64,
    pub end: f64,
    /// `(time, location)`: the birth point, grid points inside, and the end point.
    pub points: Vec<(f64, TorusPoint)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMeta {
    pub seed: Option<u64>,
    pub rates: String,
    pub method: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoalescentPath {
    pub dim: usize,
    pub start: SpatialConfig,
    pub events: Vec<PathEvent>,
    pub paths: Vec<NodePath>,
    pub meta: PathMeta,
}

impl CoalescentPath {
    pub fn first_merge_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.time)
    }

    /// Number of lineages just after time `s`.
    pub fn lineages_at(&self, s: f64) -> usize {
        self.events.iter().take_while(|e| e.time <= s).last().map_or(self.start.len(), |e| e.partition.len())
    }
}

fn grid_between(a: f64, b: f64, dt: f64) -> impl Iterator<Item = f64> {
    let first = (a / dt).floor() as i64 + 1;
    (first..).map(move |j| j as f64 * dt).take_while(move |&s| s < b - 1e-12 * dt)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Euclidean Brownian bridge from `(s0, a)` to `(s1, b)` observed at `times`.
fn bridge_points<R: Rng + ?Sized>(s0: f64, a: &[f64], s1: f64, b: &[f64], times: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
    let mut cur = a.to_vec();
    let mut s = s0;
    let mut out = Vec::with_capacity(times.len());
    for &u in times {
        let (h, rem) = (u - s, s1 - s);
        let sd = (h * (rem - h) / rem).max(0.0).sqrt();
        for c in 0..cur.len() {
            cur[c] += (b[c] - cur[c]) * h / rem + sd * normal(rng);
        }
        out.push(cur.clone());
        s = u;
    }
    out
}

fn torus(v: &[f64]) -> TorusPoint {
    TorusPoint::new(v.to_vec())
}

/// Lineage paths along a decorated forest: torus Brownian bridges on every
/// branch (lattice offset, then a Euclidean bridge) and free Brownian motion
/// after each root, observed on a uniform grid up to `horizon`.
pub fn sample_paths<R: Rng + ?Sized>(df: &DecoratedForest, x: &SpatialConfig, horizon: f64, grid_dt: f64, rng: &mut R) -> Result<CoalescentPath> {
    if !(grid_dt > 0.0) {
        return Err(Error::InvalidArgument("grid step must be positive".into()));
    }
    let f = &df.forest;
    let last = *df.times.last().expect("nonempty");
    if horizon < last {
        return Err(Error::InvalidArgument(format!("horizon {horizon} precedes the last merge at {last}")));
    }
    let nodes = f.nodes();
    let mut paths = Vec::with_capacity(nodes.len());
    for (u, node) in nodes.iter().enumerate() {
        let birth = df.times[node.birth];
        let a = df.xi[u].coords();
        let mut points = vec![(birth, df.xi[u].clone())];
        let end;
        match node.parent {
            Some(p) => {
                end = df.times[nodes[p].birth];
                let k = torus_bridge_offset(&df.xi[u], &df.xi[p], end - birth, rng)?;
                let b: Vec<f64> = df.xi[p].coords().iter().zip(&k).map(|(v, k)| v + *k as f64).collect();
                let grid: Vec<f64> = grid_between(birth, end, grid_dt).collect();
                for (s, v) in grid.iter().zip(bridge_points(birth, a, end, &b, &grid, rng)) {
                    points.push((*s, torus(&v)));
                }
                points.push((end, df.xi[p].clone()));
            }
            None => {
                end = horizon;
                let mut cur = a.to_vec();
                let mut s = birth;
                for g in grid_between(birth, horizon, grid_dt).chain(std::iter::once(horizon)) {
                    if g <= s {
                        continue;
                    }
                    let sd = (g - s).sqrt();
                    for c in cur.iter_mut() {
                        *c += sd * normal(rng);
                    }
                    points.push((g, torus(&cur)));
                    s = g;
                }
            }
        }
        paths.push(NodePath {
            node: u,
            block: node.block.clone(),
            birth,
            end,
            points,
        });
    }
    let events = (1..f.levels().len())
        .map(|i| PathEvent {
            time: df.times[i],
            partition: f.levels()[i].clone(),
            locations: f.nodes_born_at(i).map(|u| (nodes[u].block.clone(), df.xi[u].clone())).collect(),
        })
        .collect();
    Ok(CoalescentPath {
        dim: x.dim(),
        start: x.clone(),
        events,
        paths,
        meta: PathMeta {
            seed: None,
            rates: String::new(),
            method: "exact".into(),
        },
    })
}

/// Exact lineage configuration at time `s` along a decorated forest (bridge
/// marginals on the live branches).
pub fn state_at<R: Rng + ?Sized>(df: &DecoratedForest, s: f64, rng: &mut R) -> Result<SpatialConfig> {
    let f = &df.forest;
    let level = df.times.iter().take_while(|&&t| t <= s).count().max(1) - 1;
    let nodes = f.nodes();
    let mut pos = Vec::new();
    for b in f.levels()[level].blocks() {
        let u = f.node_of(b).expect("level block is a node");
        let birth = df.times[nodes[u].birth];
        let a = df.xi[u].coords();
        let h = s - birth;
        let v: Vec<f64> = match nodes[u].parent {
            Some(p) => {
                let end = df.times[nodes[p].birth];
                let k = torus_bridge_offset(&df.xi[u], &df.xi[p], end - birth, rng)?;
                let b: Vec<f64> = df.xi[p].coords().iter().zip(&k).map(|(v, k)| v + *k as f64).collect();
                bridge_points(birth, a, end, &b, &[s], rng).swap_remove(0)
            }
            None => a.iter().map(|c| c + h.sqrt() * normal(rng)).collect(),
        };
        pos.push(torus(&v));
    }
    SpatialConfig::new(f.levels()[level].clone(), pos)
}

/// Configurations at several increasing times, jointly consistent: each
/// branch draws one lattice offset and one bridge through all its times.
pub fn states_at<R: Rng + ?Sized>(df: &DecoratedForest, times: &[f64], rng: &mut R) -> Result<Vec<SpatialConfig>> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&s| s < 0.0) {
        return Err(Error::InvalidArgument("observation times must be increasing and nonnegative".into()));
    }
    let f = &df.forest;
    let nodes = f.nodes();
    let level_at = |s: f64| df.times.iter().take_while(|&&t| t <= s).count().max(1) - 1;
    let mut at: Vec<Vec<Option<TorusPoint>>> = vec![vec![None; nodes.len()]; times.len()];
    for (u, node) in nodes.iter().enumerate() {
        let birth = df.times[node.birth];
        let end = node.parent.map(|p| df.times[nodes[p].birth]);
        let idx: Vec<usize> = (0..times.len())
            .filter(|&i| {
                let lv = level_at(times[i]);
                lv >= node.birth && node.death.is_none_or(|d| lv < d)
            })
            .collect();
        if idx.is_empty() {
            continue;
        }
        let ts: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
        let a = df.xi[u].coords();
        let pts = match (node.parent, end) {
            (Some(p), Some(end)) => {
                let k = torus_bridge_offset(&df.xi[u], &df.xi[p], end - birth, rng)?;
                let b: Vec<f64> = df.xi[p].coords().iter().zip(&k).map(|(v, k)| v + *k as f64).collect();
                bridge_points(birth, a, end, &b, &ts, rng)
            }
            _ => {
                let mut cur = a.to_vec();
                let mut s = birth;
                ts.iter()
                    .map(|&g| {
                        let sd = (g - s).max(0.0).sqrt();
                        for c in cur.iter_mut() {
                            *c += sd * normal(rng);
                        }
                        s = g;
                        cur.clone()
                    })
                    .collect()
            }
        };
        for (&i, v) in idx.iter().zip(pts) {
            at[i][u] = Some(torus(&v));
        }
    }
    times
        .iter()
        .zip(at)
        .map(|(&s, row)| {
            let p = f.levels()[level_at(s)].clone();
            let pos = p.blocks().iter().map(|b| row[f.node_of(b).expect("level block is a node")].clone().expect("live node observed")).collect();
            SpatialConfig::new(p, pos)
        })
        .collect()
}

/// Pair drift `∇_Δ log N(Δ)` in `d = 2` on a periodic grid, interpolated by
/// bicubic Catmull–Rom splines; separations below `DIRECT_RADIUS` are
/// evaluated directly since `N` is singular on the diagonal.
pub struct PairDriftTable {
    lambda: f64,
    m: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

const DIRECT_RADIUS: f64 = 0.04;

impl PairDriftTable {
    pub fn new(lambda: f64, m: usize) -> Self {
        assert!(m % 2 == 0, "grid size must be even");
        let half = m / 2;
        let mut gx = vec![0.0; m * m];
        let mut gy = vec![0.0; m * m];
        let idx = |i: i64, j: i64| (i.rem_euclid(m as i64) as usize) * m + j.rem_euclid(m as i64) as usize;
        for i in 0..=half {
            for j in 0..=half {
                let d = [i as f64 / m as f64, j as f64 / m as f64];
                let (v, g) = if i == 0 && j == 0 { (1.0, vec![0.0, 0.0]) } else { pair_n_with_grad(lambda, &d) };
                // odd in its own coordinate, even in the other; zero on the
                // symmetry lines Δ_c ∈ {0, 1/2}
                let (a, b) = (
                    if i == 0 || i == half { 0.0 } else { g[0] / v },
                    if j == 0 || j == half { 0.0 } else { g[1] / v },
                );
                for (si, sj) in [(1i64, 1i64), (-1, 1), (1, -1), (-1, -1)] {
                    let k = idx(si * i as i64, sj * j as i64);
                    gx[k] = si as f64 * a;
                    gy[k] = sj as f64 * b;
                }
            }
        }
        PairDriftTable { lambda, m, gx, gy }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `∇_Δ log N` at displacement `Δ = x₂ − x₁`.
    pub fn grad(&self, delta: &[f64]) -> [f64; 2] {
        let d = [centered(delta[0]), centered(delta[1])];
        if d[0].hypot(d[1]) < DIRECT_RADIUS {
            let (v, g) = pair_n_with_grad(self.lambda, &d);
            return [g[0] / v, g[1] / v];
        }
        let m = self.m as f64;
        let (fx, fy) = (wrap(d[0]) * m, wrap(d[1]) * m);
        let (i0, j0) = (fx.floor() as i64, fy.floor() as i64);
        let (tx, ty) = (fx - i0 as f64, fy - j0 as f64);
        let wx = catmull_rom(tx);
        let wy = catmull_rom(ty);
        let mm = self.m as i64;
        let mut out = [0.0; 2];
        for (a, wa) in wx.iter().enumerate() {
            for (b, wb) in wy.iter().enumerate() {
                let k = ((i0 + a as i64 - 1).rem_euclid(mm) as usize) * self.m + (j0 + b as i64 - 1).rem_euclid(mm) as usize;
                out[0] += wa * wb * self.gx[k];
                out[1] += wa * wb * self.gy[k];
            }
        }
        out
    }
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeOptions {
    pub dt: f64,
    pub merge_radius: f64,
    /// Integration stops here if lineages remain.
    pub horizon: f64,
    /// Step sizes below this abort the run.
    pub min_dt: f64,
    /// Spacing of recorded path points.
    pub record_dt: f64,
    pub rule: MergeRule,
    /// Used by [`MergeRule::ExactHandoff`].
    pub handoff: SamplerOptions,
    pub norm: NormOptions,
}

/// What happens when lineages come within the merge radius.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    /// Merge at once at the group mean.
    Mean,
    /// Draw the next merge event (time, location, positions of all
    /// lineages) from the exact sampler started at the current state.
    ExactHandoff,
}

impl Default for SdeOptions {
    fn default() -> Self {
        SdeOptions {
            dt: 1e-4,
            merge_radius: 5e-3,
            horizon: 50.0,
            min_dt: 1e-12,
            record_dt: 0.01,
            rule: MergeRule::Mean,
            handoff: SamplerOptions::default(),
            norm: NormOptions::default(),
        }
    }
}

struct Live {
    block: Block,
    pos: Vec<f64>,
    path: NodePath,
}

/// Euler–Maruyama for `dZ = dB + ∇ log N(Z) dt` with steps shrunk to
/// `(r_min / 4)²` near the diagonal. Lineages closer than `merge_radius`
/// merge at their mean; no merges happen once the state is absorbing. Pass a
/// [`PairDriftTable`] to speed up two-lineage runs in `d = 2`.
pub fn sde_sample<R: Rng + ?Sized>(x: &SpatialConfig, t: &RateTable, opts: &SdeOptions, table: Option<&PairDriftTable>, rng: &mut R) -> Result<CoalescentPath> {
    let d = x.dim();
    if d < 2 {
        return Err(Error::InvalidArgument("the SDE sampler needs d ≥ 2".into()));
    }
    if x.len() >= 2 && x.min_separation() == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    if let Some(tb) = table {
        if d != 2 || (tb.lambda() - t.total(2)).abs() > 1e-12 * tb.lambda().max(1.0) {
            return Err(Error::InvalidArgument("drift table does not match the rates or dimension".into()));
        }
    }
    let mut live: Vec<Live> = x
        .partition()
        .blocks()
        .iter()
        .zip(x.positions())
        .enumerate()
        .map(|(i, (b, p))| Live {
            block: b.clone(),
            pos: p.coords().to_vec(),
            path: NodePath {
                node: i,
                block: b.clone(),
                birth: 0.0,
                end: 0.0,
                points: vec![(0.0, p.clone())],
            },
        })
        .collect();
    let mut next_node = live.len();
    let mut done = Vec::new();
    let mut events = Vec::new();
    let mut s = 0.0;
    let mut next_record = opts.record_dt;
    while s < opts.horizon {
        let n = live.len();
        let absorbing = t.total(n) == 0.0;
        if n <= 1 {
            break;
        }
        let cap = (opts.horizon - s).min(next_record - s);
        let (h, drift, order) = if absorbing {
            (opts.dt.min(cap), vec![vec![0.0; d]; n], (0..n).collect::<Vec<_>>())
        } else {
            let cfg = SpatialConfig::new(
                Partition::from_blocks(live.iter().map(|l| l.block.clone()).collect())?,
                live.iter().map(|l| torus(&l.pos)).collect(),
            )?;
            // SpatialConfig orders lineages by block; map back to `live`
            let order: Vec<usize> = cfg.partition().blocks().iter().map(|b| live.iter().position(|l| &l.block == b).expect("present")).collect();
            let h = opts.dt.min((0.25 * cfg.min_separation()).powi(2));
            if h < opts.min_dt {
                return Err(Error::Numerical(format!("step size underflow at t = {s} with positions {:?}", cfg.positions())));
            }
            let drift = match table {
                Some(tb) if n == 2 => {
                    let g = tb.grad(&cfg.positions()[0].displacement_to(&cfg.positions()[1]));
                    vec![vec![-g[0], -g[1]], vec![g[0], g[1]]]
                }
                _ => grad_log_n(&cfg, t, &opts.norm)?.grad,
            };
            (h.min(cap), drift, order)
        };
        for (k, &li) in order.iter().enumerate() {
            for c in 0..d {
                live[li].pos[c] += drift[k][c] * h + h.sqrt() * normal(rng);
            }
        }
        s += h;
        if s >= next_record - 1e-15 {
            for l in live.iter_mut() {
                l.path.points.push((s, torus(&l.pos)));
            }
            next_record += opts.record_dt;
        }
        if absorbing {
            continue;
        }
        let groups = close_groups(&live, opts.merge_radius);
        if groups.iter().all(|g| g.len() < 2) {
            continue;
        }
        let next: Vec<(Block, Vec<f64>)> = match opts.rule {
            MergeRule::Mean => groups
                .iter()
                .map(|g| {
                    let base = &live[g[0]].pos;
                    let mut mean = vec![0.0; d];
                    for &i in g {
                        for c in 0..d {
                            mean[c] += (base[c] + centered(live[i].pos[c] - base[c])) / g.len() as f64;
                        }
                    }
                    let block = g[1..].iter().fold(live[g[0]].block.clone(), |b, &i| b.union(&live[i].block));
                    (block, mean)
                })
                .collect(),
            MergeRule::ExactHandoff => {
                let cfg = live_config(&live)?;
                let df = ExactSampler::new(&cfg, t, &opts.handoff)?.draw(rng)?;
                let tau = df.times[1];
                if s + tau >= opts.horizon {
                    let st = state_at(&df, opts.horizon - s, rng)?;
                    for (b, p) in st.partition().blocks().iter().zip(st.positions()) {
                        let l = live.iter_mut().find(|l| &l.block == b).expect("no merge before the horizon");
                        l.pos = p.coords().to_vec();
                    }
                    s = opts.horizon;
                    break;
                }
                s += tau;
                let st = state_at(&df, tau, rng)?;
                st.partition().blocks().iter().cloned().zip(st.positions().iter().map(|p| p.coords().to_vec())).collect()
            }
        };
        let locations = advance(&mut live, next, s, &mut next_node, &mut done);
        events.push(PathEvent {
            time: s,
            partition: Partition::from_blocks(live.iter().map(|l| l.block.clone()).collect())?,
            locations,
        });
    }
    for mut l in live {
        l.path.end = s;
        if l.path.points.last().map(|p| p.0) != Some(s) {
            l.path.points.push((s, torus(&l.pos)));
        }
        done.push(l.path);
    }
    done.sort_by_key(|p| p.node);
    Ok(CoalescentPath {
        dim: d,
        start: x.clone(),
        events,
        paths: done,
        meta: PathMeta {
            seed: None,
            rates: String::new(),
            method: "sde".into(),
        },
    })
}

fn live_config(live: &[Live]) -> Result<SpatialConfig> {
    let mut pairs: Vec<(&Block, TorusPoint)> = live.iter().map(|l| (&l.block, torus(&l.pos))).collect();
    pairs.sort_by_key(|p| p.0.min());
    SpatialConfig::new(
        Partition::from_blocks(pairs.iter().map(|p| p.0.clone()).collect())?,
        pairs.into_iter().map(|p| p.1).collect(),
    )
}

/// Move to the lineage set `next` at time `s`: blocks already alive take the
/// given position, new blocks close the paths of their constituents. Returns
/// the locations of the new blocks.
fn advance(live: &mut Vec<Live>, next: Vec<(Block, Vec<f64>)>, s: f64, next_node: &mut usize, done: &mut Vec<NodePath>) -> Vec<(Block, TorusPoint)> {
    let mut old = std::mem::take(live);
    let mut born = Vec::new();
    for (block, pos) in next {
        let p = torus(&pos);
        if let Some(i) = old.iter().position(|l| l.block == block) {
            let mut l = old.swap_remove(i);
            l.pos = pos;
            l.path.points.push((s, p));
            live.push(l);
            continue;
        }
        let (ended, rest): (Vec<Live>, Vec<Live>) = old.into_iter().partition(|l| l.block.is_subset(&block));
        old = rest;
        for mut l in ended {
            l.path.end = s;
            l.path.points.push((s, p.clone()));
            done.push(l.path);
        }
        born.push((block.clone(), p.clone()));
        live.push(Live {
            block: block.clone(),
            pos,
            path: NodePath {
                node: *next_node,
                block,
                birth: s,
                end: s,
                points: vec![(s, p)],
            },
        });
        *next_node += 1;
    }
    born
}

/// Connected components of the "closer than `r`" graph.
fn close_groups(live: &[Live], r: f64) -> Vec<Vec<usize>> {
    let n = live.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut i = i;
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            let dist2: f64 = live[i].pos.iter().zip(&live[j].pos).map(|(a, b)| centered(a - b).powi(2)).sum();
            if dist2 < r * r {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let root = find(&mut parent, i);
        groups[root].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn fmt_point(p: &TorusPoint) -> String {
    p.coords().iter().map(|c| format!("{c:.12}")).collect::<Vec<_>>().join(";")
}

/// Rows `replicate,time,node_id,coord_0,…` for every recorded path point.
pub fn write_paths_csv<W: Write>(w: &mut csv::Writer<W>, replicate: usize, path: &CoalescentPath, header: bool) -> Result<()> {
    if header {
        let mut h = vec!["replicate".to_string(), "time".into(), "node_id".into()];
        h.extend((0..path.dim).map(|c| format!("coord_{c}")));
        w.write_record(&h).map_err(io_err)?;
    }
    for np in &path.paths {
        for (s, p) in &np.points {
            let mut row = vec![replicate.to_string(), format!("{s:.12}"), np.node.to_string()];
            row.extend(p.coords().iter().map(|c| format!("{c:.12}")));
            w.write_record(&row).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Rows `replicate,time,signature,locations`; locations are `block@x;y`
/// entries separated by spaces.
pub fn write_events_csv<W: Write>(w: &mut csv::Writer<W>, replicate: usize, path: &CoalescentPath, header: bool) -> Result<()> {
    if header {
        w.write_record(["replicate", "time", "signature", "locations"]).map_err(io_err)?;
    }
    let mut prev = path.start.partition().clone();
    for e in &path.events {
        let sig = crate::combinatorics::merger_signature(&prev, &e.partition)?;
        let locs = e.locations.iter().map(|(b, p)| format!("{b}@{}", fmt_point(p))).collect::<Vec<_>>().join(" ");
        w.write_record([replicate.to_string(), format!("{:.12}", e.time), sig.to_string(), locs]).map_err(io_err)?;
        prev = e.partition.clone();
    }
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{torus_kernel, torus_kernel_1d, KernelMethod};
    use crate::normalization::{pair_n_closed, transition_density_no_merge};
    use crate::rates::{build_rate_table, Measure, TableKind};
    use crate::rng::stream_rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn kingman(n: usize) -> RateTable {
        build_rate_table(&Measure::kingman(), n).unwrap()
    }

    fn cfg(pos: &[&[f64]]) -> SpatialConfig {
        SpatialConfig::singletons(pos.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    /// One-sample KS statistic against a CDF.
    fn ks(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Critical value at α = 0.01.
    fn ks_crit(n: usize) -> f64 {
        1.628 / (n as f64).sqrt()
    }

    fn pair_time_cdf(delta: f64) -> impl Fn(f64) -> f64 {
        let total = pair_n_closed(1.0, delta);
        move |s: f64| {
            integrate(|t| (-t).exp() * torus_kernel_1d(2.0 * t, delta, KernelMethod::default()), 0.0, s, QuadOptions::rel(1e-10)).unwrap().value / total
        }
    }

    #[test]
    fn single_lineage_is_trivial() {
        let t = kingman(2);
        let x = cfg(&[&[0.4, 0.1]]);
        let mut rng = stream_rng(1, 0);
        for scheme in [Scheme::Exact, Scheme::Sir] {
            let df = sample_decorated_forest(&x, &t, scheme, &SamplerOptions { batch: 8, ..Default::default() }, &mut rng).unwrap();
            assert!(df.forest.is_trivial());
            assert_eq!(df.times, vec![0.0]);
        }
        let props = sir_proposals(&x, &t, 4, &mut rng).unwrap();
        assert!(props.iter().all(|p| p.log_weight == 0.0));
    }

    #[test]
    fn pair_merge_time_matches_wright_malecot() {
        let t = kingman(2);
        let x = cfg(&[&[0.1], &[0.4]]);
        let s = ExactSampler::new(&x, &t, &SamplerOptions::default()).unwrap();
        assert!(((s.normalization() - pair_n_closed(1.0, 0.3)) / s.normalization()).abs() < 1e-6);
        let mut rng = stream_rng(2, 0);
        let draws: Vec<f64> = (0..10_000).map(|_| s.draw(&mut rng).unwrap().times[1]).collect();
        let cdf = pair_time_cdf(0.3);
        let d = ks(draws, cdf);
        assert!(d < ks_crit(10_000), "KS {d}");
    }

    #[test]
    fn pair_merge_location_in_a_time_window() {
        let t = kingman(2);
        let x = cfg(&[&[0.1], &[0.4]]);
        let s = ExactSampler::new(&x, &t, &SamplerOptions::default()).unwrap();
        let mut rng = stream_rng(3, 0);
        let bins = 20;
        let mut counts = vec![0usize; bins];
        let mut total = 0usize;
        while total < 4000 {
            let df = s.draw(&mut rng).unwrap();
            if (0.4..0.6).contains(&df.times[1]) {
                let z = df.xi[2].coords()[0];
                counts[((z * bins as f64) as usize).min(bins - 1)] += 1;
                total += 1;
            }
        }
        // window-averaged density of z: ∫ over the window of the merge-time
        // density times p_t(z − x₁)p_t(z − x₂)/p_{2t}(Δ)
        let m = KernelMethod::default();
        let dens = |z: f64| {
            integrate(|tt| (-tt).exp() * torus_kernel_1d(tt, z - 0.1, m) * torus_kernel_1d(tt, z - 0.4, m), 0.4, 0.6, QuadOptions::rel(1e-9)).unwrap().value
        };
        let mass: Vec<f64> = (0..bins)
            .map(|b| integrate(dens, b as f64 / bins as f64, (b + 1) as f64 / bins as f64, QuadOptions::rel(1e-8)).unwrap().value)
            .collect();
        let sum: f64 = mass.iter().sum();
        let chi2: f64 = (0..bins)
            .map(|b| {
                let e = mass[b] / sum * total as f64;
                (counts[b] as f64 - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}");
    }

    #[test]
    fn three_lineage_forest_frequencies() {
        let t = kingman(3);
        let x = cfg(&[&[0.1], &[0.2], &[0.6]]);
        let s = ExactSampler::new(&x, &t, &SamplerOptions::default()).unwrap();
        let est = normalization_n(&x, &t, &NormOptions::default()).unwrap();
        assert!(((s.normalization() - est.value) / est.value).abs() < 1e-5);
        let probs = s.forest_probabilities();
        let mut rng = stream_rng(4, 0);
        let reps = 3000;
        let mut counts = vec![0usize; probs.len()];
        let mut first = Vec::new();
        for _ in 0..reps {
            let df = s.draw(&mut rng).unwrap();
            let k = probs.iter().position(|(f, _)| *f == Some(&df.forest)).unwrap();
            counts[k] += 1;
            first.push(df.times[1]);
        }
        let chi2: f64 = probs.iter().zip(&counts).map(|((_, p), &c)| (c as f64 - p * reps as f64).powi(2) / (p * reps as f64)).sum();
        let pv = 1.0 - ChiSquared::new((probs.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(pv > 0.01, "chi2 {chi2}");
        // same law from importance resampling
        let sir: Vec<f64> = (0..6)
            .flat_map(|_| sample_sir(&x, &t, &SamplerOptions { batch: 500, ..Default::default() }, &mut rng).unwrap())
            .map(|df| df.times[1])
            .collect();
        let d = two_sample_ks(first, sir.clone());
        let (n, m) = (reps as f64, sir.len() as f64);
        assert!(d < 1.628 * ((n + m) / (n * m)).sqrt(), "KS {d}");
    }

    fn two_sample_ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn sir_weights_are_unbiased() {
        let t = kingman(2);
        let x = cfg(&[&[0.2, 0.3], &[0.45, 0.5]]);
        let mut rng = stream_rng(5, 0);
        let props = sir_proposals(&x, &t, 100_000, &mut rng).unwrap();
        let w: Vec<f64> = props.iter().map(|p| p.log_weight.exp()).collect();
        let h: Vec<f64> = props.iter().map(|p| p.sample.times[1]).collect();
        let sw: f64 = w.iter().sum();
        let est = w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() / sw;
        let resid: f64 = w.iter().zip(&h).map(|(a, b)| (a * (b - est)).powi(2)).sum::<f64>();
        let se = resid.sqrt() / sw;
        let disp = [0.25, 0.2];
        let m = KernelMethod::default();
        let k = |tt: f64| (-tt).exp() * torus_kernel(2.0 * tt, &disp, m).unwrap();
        let num = integrate(|tt| tt * k(tt), 0.0, 60.0, QuadOptions::rel(1e-10)).unwrap().value;
        let den = integrate(k, 0.0, 60.0, QuadOptions::rel(1e-10)).unwrap().value;
        assert!((est - num / den).abs() < 3.0 * se, "{est} ± {se} vs {}", num / den);
    }

    #[test]
    fn ess_and_systematic_resampling() {
        assert!((effective_sample_size(&[0.0; 10]) - 10.0).abs() < 1e-12);
        assert!((effective_sample_size(&[0.0, -1000.0, -1000.0]) - 1.0).abs() < 1e-12);
        let mut rng = stream_rng(6, 0);
        let idx = systematic_resample(&[0.0, 3f64.ln(), f64::NEG_INFINITY], 8, &mut rng);
        assert_eq!(idx.iter().filter(|&&i| i == 0).count(), 2);
        assert_eq!(idx.iter().filter(|&&i| i == 1).count(), 6);
        let zero = RateTable::from_fn(TableKind::Xi, 2, |_, _| Ok(0.0)).unwrap();
        let x = cfg(&[&[0.1], &[0.5]]);
        let df = sample_decorated_forest(&x, &zero, Scheme::Exact, &SamplerOptions::default(), &mut rng).unwrap();
        assert!(df.forest.is_trivial());
    }

    #[test]
    fn free_motion_has_brownian_increments() {
        let x = cfg(&[&[0.3, 0.7]]);
        let df = DecoratedForest {
            forest: Forest::trivial(x.partition().clone()),
            times: vec![0.0],
            xi: x.positions().to_vec(),
        };
        let mut rng = stream_rng(7, 0);
        let p = sample_paths(&df, &x, 1000.0, 0.01, &mut rng).unwrap();
        let pts = &p.paths[0].points;
        let mut sq = Vec::new();
        for w in pts.windows(2) {
            let dt = w[1].0 - w[0].0;
            if (dt - 0.01).abs() < 1e-9 {
                sq.push(w[0].1.displacement_to(&w[1].1).iter().map(|v| v * v).sum::<f64>());
            }
        }
        let n = sq.len() as f64;
        let mean = sq.iter().sum::<f64>() / n;
        let sd = (sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt() / n.sqrt();
        assert!(n > 99_000.0);
        assert!((mean - 0.02).abs() < 3.0 * sd, "{mean} ± {sd}");
    }

    #[test]
    fn bridges_end_on_their_parents() {
        let t = kingman(3);
        let x = cfg(&[&[0.1, 0.9], &[0.2, 0.1], &[0.7, 0.5]]);
        let mut rng = stream_rng(8, 0);
        let df = sample_decorated_forest(&x, &t, Scheme::Exact, &SamplerOptions::default(), &mut rng).unwrap();
        let last = *df.times.last().unwrap();
        let p = sample_paths(&df, &x, last + 0.5, 0.003, &mut rng).unwrap();
        for np in &p.paths {
            let node = &df.forest.nodes()[np.node];
            assert_eq!(np.points[0].1, df.xi[np.node]);
            if let Some(par) = node.parent {
                let (s, end) = np.points.last().unwrap();
                assert_eq!(*s, df.times[df.forest.nodes()[par].birth]);
                assert!(end.distance(&df.xi[par]) < 1e-12);
            } else {
                assert_eq!(np.points.last().unwrap().0, last + 0.5);
            }
            assert!(np.points.iter().all(|(_, q)| q.coords().iter().all(|c| (0.0..1.0).contains(c))));
        }
        assert_eq!(p.events.len(), df.forest.num_merges());
        assert!(sample_paths(&df, &x, last + 0.5, 0.0, &mut rng).is_err());
        assert!(sample_paths(&df, &x, last * 0.5, 0.1, &mut rng).is_err());
    }

    #[test]
    fn short_bridge_midpoint_moments() {
        // a branch of length 0.02 from 0.95 to 0.05, observed at its midpoint
        let a = TorusPoint::new(vec![0.95]);
        let b = TorusPoint::new(vec![0.05]);
        let mut rng = stream_rng(9, 0);
        let reps = 20_000;
        let mut vals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let k = torus_bridge_offset(&a, &b, 0.02, &mut rng).unwrap();
            let end = [b.coords()[0] + k[0] as f64];
            let v = bridge_points(0.0, a.coords(), 0.02, &end, &[0.01], &mut rng)[0][0];
            vals.push(centered(v - 1.0));
        }
        let n = reps as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // wrapped midpoint of 0.95 and 0.05 is 0
        assert!(mean.abs() < 3.0 * (0.005 / n).sqrt(), "{mean}");
        assert!((var - 0.005).abs() < 3.0 * 0.005 * (2.0 / n).sqrt(), "{var}");
    }

    #[test]
    fn no_merge_probability_matches_sampler() {
        let t = kingman(2);
        let x = cfg(&[&[0.2], &[0.5]]);
        let s = 0.5;
        let opts = NormOptions::default();
        let inner = |y1: f64| {
            integrate(
                |y2| transition_density_no_merge(&x, &cfg(&[&[y1], &[y2]]), s, &t, &opts).unwrap_or(0.0),
                0.0,
                1.0,
                QuadOptions::rel(1e-7),
            )
            .unwrap()
            .value
        };
        let p = integrate(inner, 0.0, 1.0, QuadOptions::rel(1e-6)).unwrap().value;
        let ex = ExactSampler::new(&x, &t, &SamplerOptions::default()).unwrap();
        let mut rng = stream_rng(10, 0);
        let reps = 20_000;
        let hits = (0..reps).filter(|_| ex.draw(&mut rng).unwrap().times[1] > s).count() as f64 / reps as f64;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((hits - p).abs() < 3.0 * se, "{hits} vs {p}");
    }

    #[test]
    fn pair_drift_table_matches_direct_evaluation() {
        let tb = PairDriftTable::new(1.0, 128);
        let mut rng = stream_rng(11, 0);
        for _ in 0..200 {
            let d = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            if d[0].hypot(d[1]) < DIRECT_RADIUS {
                continue;
            }
            let (v, g) = pair_n_with_grad(1.0, &d);
            let got = tb.grad(&d);
            let scale = (g[0] / v).hypot(g[1] / v).max(0.1);
            for c in 0..2 {
                assert!((got[c] - g[c] / v).abs() < 2e-3 * scale, "{d:?}: {got:?} vs {}", g[c] / v);
            }
        }
    }

    #[test]
    fn sde_drift_points_at_the_partner() {
        let tb = PairDriftTable::new(1.0, 64);
        let g = tb.grad(&[0.1, 0.0]);
        assert!(g[0] < 0.0 && g[1].abs() < 1e-12);
        // Δ = x₂ − x₁ = 0.1 ê₁: lineage 1 moves along +ê₁
        let g = tb.grad(&[-0.9, 0.0]);
        assert!(g[0] < 0.0);
    }

    #[test]
    fn sde_without_rates_gives_independent_motions() {
        let zero = RateTable::from_fn(TableKind::Xi, 2, |_, _| Ok(0.0)).unwrap();
        let x = cfg(&[&[0.2, 0.2], &[0.7, 0.7]]);
        let opts = SdeOptions {
            dt: 1e-2,
            horizon: 0.1,
            record_dt: 0.1,
            ..Default::default()
        };
        let mut rng = stream_rng(12, 0);
        let reps = 4000;
        let mut prod = Vec::with_capacity(reps);
        for _ in 0..reps {
            let p = sde_sample(&x, &zero, &opts, None, &mut rng).unwrap();
            assert!(p.events.is_empty());
            let a = x.positions()[0].displacement_to(&p.paths[0].points.last().unwrap().1)[0];
            let b = x.positions()[1].displacement_to(&p.paths[1].points.last().unwrap().1)[0];
            prod.push(a * b);
        }
        let n = reps as f64;
        let mean = prod.iter().sum::<f64>() / n;
        let sd = (prod.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * sd, "{mean} ± {sd}");
        assert!(sde_sample(&cfg(&[&[0.2], &[0.7]]), &zero, &opts, None, &mut rng).is_err());
    }

    #[test]
    fn sde_pair_runs_merge() {
        let t = kingman(2);
        let tb = PairDriftTable::new(1.0, 64);
        let x = cfg(&[&[0.2, 0.2], &[0.25, 0.2]]);
        let mut rng = stream_rng(13, 0);
        let p = sde_sample(&x, &t, &SdeOptions::default(), Some(&tb), &mut rng).unwrap();
        assert_eq!(p.events.len(), 1);
        assert_eq!(p.events[0].partition.len(), 1);
        assert_eq!(p.paths.len(), 3);
        let mut buf = csv::Writer::from_writer(Vec::new());
        write_events_csv(&mut buf, 0, &p, true).unwrap();
        let text = String::from_utf8(buf.into_inner().unwrap()).unwrap();
        assert!(text.starts_with("replicate,time,signature,locations\n0,"));
    }

    #[test]
    fn sde_with_exact_handoff_matches_pair_law() {
        let t = kingman(2);
        let tb = PairDriftTable::new(1.0, 128);
        let x = cfg(&[&[0.3, 0.5], &[0.4, 0.5]]);
        let opts = SdeOptions {
            dt: 4e-4,
            merge_radius: 0.02,
            record_dt: 1.0,
            rule: MergeRule::ExactHandoff,
            ..Default::default()
        };
        let mut rng = stream_rng(15, 0);
        let draws: Vec<f64> = (0..600).map(|_| sde_sample(&x, &t, &opts, Some(&tb), &mut rng).unwrap().first_merge_time().unwrap()).collect();
        let m = KernelMethod::default();
        let k = |tt: f64| (-tt).exp() * torus_kernel(2.0 * tt, &[0.1, 0.0], m).unwrap();
        let total = integrate(k, 0.0, 60.0, QuadOptions::rel(1e-10)).unwrap().value;
        let d = ks(draws, |s| integrate(k, 0.0, s, QuadOptions::rel(1e-9)).unwrap().value / total);
        assert!(d < ks_crit(600), "KS {d}");
    }

    #[test]
    fn state_at_keeps_the_partition() {
        let t = kingman(3);
        let x = cfg(&[&[0.1], &[0.2], &[0.6]]);
        let mut rng = stream_rng(14, 0);
        let df = sample_decorated_forest(&x, &t, Scheme::Exact, &SamplerOptions::default(), &mut rng).unwrap();
        let mid = 0.5 * (df.times[1] + df.times[2]);
        let st = state_at(&df, mid, &mut rng).unwrap();
        assert_eq!(st.partition(), &df.forest.levels()[1]);
        let st0 = state_at(&df, 0.0, &mut rng).unwrap();
        assert_eq!(st0.positions(), x.positions());
    }

    #[test]
    fn states_at_is_one_consistent_path() {
        let t = kingman(3);
        let x = cfg(&[&[0.1], &[0.2], &[0.6]]);
        let mut rng = stream_rng(15, 0);
        let df = sample_decorated_forest(&x, &t, Scheme::Exact, &SamplerOptions::default(), &mut rng).unwrap();
        let t1 = df.times[1];
        let s = 0.5 * t1;
        let merged = df.forest.nodes_born_at(1).next().unwrap();
        let (mut one, mut many) = (Vec::new(), Vec::new());
        for _ in 0..2000 {
            let st = states_at(&df, &[0.0, s, s + 1e-8, t1], &mut rng).unwrap();
            assert_eq!(st[0].positions(), x.positions());
            assert_eq!(st[3].partition(), &df.forest.levels()[1]);
            let b = st[3].partition().block_of(Block::min(&df.forest.nodes()[merged].block)).unwrap();
            assert_eq!(st[3].positions()[b], df.xi[merged]);
            // nearby times see nearby positions
            assert!(st[1].positions()[0].distance(&st[2].positions()[0]) < 1e-3);
            many.push(st[1].positions()[0].coords()[0]);
            one.push(state_at(&df, s, &mut rng).unwrap().positions()[0].coords()[0]);
        }
        let d = two_sample_ks(one, many);
        assert!(d < 1.628 * (2.0f64 / 2000.0).sqrt(), "KS {d}");
    }
}
