//! Integrals of products of torus heat kernels along a forest, and exact
//! sampling of the internal locations.
//!
//! Work is per coordinate. Each node passes its parent a message, a function
//! of the parent's location, kept either as a mixture of periodised Gaussians
//! with a common variance (short branches) or as a truncated Fourier series
//! (long branches). Gaussian messages combine exactly through the heat-kernel
//! product rule; anything involving a Fourier message combines by convolution
//! of coefficients.

use std::f64::consts::PI;

use num_dual::{Dual64, DualNum};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::combinatorics::Forest;
use crate::error::{Error, Result};
use crate::kernels::{node_times, wrap, SpatialConfig, TorusPoint};
use crate::rates::validate_times;

/// Branches shorter than this keep Gaussian messages.
const GAUSS_LIMIT: f64 = 0.01;
/// `e^{-46} ≈ 1e-20`: truncation level for image sums and Fourier tails.
const TAIL: f64 = 46.0;
const MAX_BAND: usize = 1 << 14;
const PRUNE: f64 = 1e-25;

pub trait Scalar: DualNum<Primitive = f64> + Copy {}
impl<T: DualNum<Primitive = f64> + Copy> Scalar for T {}

fn c<S: Scalar>(v: f64) -> S {
    S::from(v)
}

/// Fourier bandwidth after which `e^{-2π²k²s}` is below `e^{-46}`.
pub fn bandwidth(s: f64) -> usize {
    (TAIL / (2.0 * PI * PI * s)).sqrt().ceil().max(1.0) as usize
}

#[derive(Clone, Copy, Debug)]
struct Cx<S> {
    re: S,
    im: S,
}

impl<S: Scalar> Cx<S> {
    fn zero() -> Self {
        Cx { re: c(0.0), im: c(0.0) }
    }
    fn mul(self, o: Self) -> Self {
        Cx {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }
    fn add(self, o: Self) -> Self {
        Cx {
            re: self.re + o.re,
            im: self.im + o.im,
        }
    }
    fn scale(self, s: f64) -> Self {
        Cx {
            re: self.re * s,
            im: self.im * s,
        }
    }
}

/// `y ↦ Σ w P_var(y − μ)` with `P_var` the periodised Gaussian.
#[derive(Clone, Debug)]
struct Gauss<S> {
    var: f64,
    comps: Vec<(S, S)>,
}

/// `y ↦ Σ_{|k| ≤ band} c_k e^{2πiky}`, stored from `−band` to `band`.
#[derive(Clone, Debug)]
struct Fourier<S> {
    band: usize,
    coef: Vec<Cx<S>>,
}

impl<S: Scalar> Fourier<S> {
    fn at(&self, k: i64) -> Cx<S> {
        if k.unsigned_abs() as usize > self.band {
            Cx::zero()
        } else {
            self.coef[(k + self.band as i64) as usize]
        }
    }

    fn convolve(&self, o: &Fourier<S>, out_band: usize) -> Fourier<S> {
        let band = out_band.min(self.band + o.band);
        let mut coef = vec![Cx::zero(); 2 * band + 1];
        for (i, &a) in self.coef.iter().enumerate() {
            let ka = i as i64 - self.band as i64;
            for (j, &b) in o.coef.iter().enumerate() {
                let k = ka + j as i64 - o.band as i64;
                if k.unsigned_abs() as usize <= band {
                    let idx = (k + band as i64) as usize;
                    coef[idx] = coef[idx].add(a.mul(b));
                }
            }
        }
        Fourier { band, coef }
    }

    fn damp(mut self, ell: f64) -> Self {
        for (i, cf) in self.coef.iter_mut().enumerate() {
            let k = i as f64 - self.band as f64;
            *cf = cf.scale((-2.0 * PI * PI * k * k * ell).exp());
        }
        self
    }

    fn truncated(self, band: usize) -> Self {
        if band >= self.band {
            return self;
        }
        let off = self.band - band;
        Fourier {
            band,
            coef: self.coef[off..off + 2 * band + 1].to_vec(),
        }
    }
}

fn pbar_s<S: Scalar>(v: f64, x: S) -> S {
    (x * x * (-0.5 / v)).exp() * (1.0 / (2.0 * PI * v).sqrt())
}

fn wrap_s<S: Scalar>(x: S) -> S {
    x - x.re().floor()
}

impl<S: Scalar> Gauss<S> {
    fn point(var: f64, x: S) -> Self {
        Gauss {
            var,
            comps: vec![(c(1.0), wrap_s(x))],
        }
    }

    /// Exact product of two periodised-Gaussian mixtures.
    fn times(&self, o: &Gauss<S>) -> Gauss<S> {
        let v = self.var + o.var;
        let var = self.var * o.var / v;
        let reach = (2.0 * v * TAIL).sqrt();
        let mut comps = Vec::new();
        for &(wa, ma) in &self.comps {
            for &(wb, mb) in &o.comps {
                let d = ma - mb;
                // always keep the nearest images so tiny values stay relative
                let lo = ((-d.re() - reach).ceil() as i64).min((-d.re()).floor() as i64);
                let hi = ((-d.re() + reach).floor() as i64).max((-d.re()).ceil() as i64);
                for m in lo..=hi {
                    let w = wa * wb * pbar_s(v, d + m as f64);
                    let mean = (ma * o.var + (mb - m as f64) * self.var) * (1.0 / v);
                    comps.push((w, wrap_s(mean)));
                }
            }
        }
        let top = comps.iter().map(|c| c.0.re()).fold(0.0, f64::max);
        if top > 0.0 {
            comps.retain(|c| c.0.re() > PRUNE * top);
        }
        Gauss { var, comps }
    }

    fn coefficient(&self, k: i64) -> Cx<S> {
        let kf = k as f64;
        let damp = (-2.0 * PI * PI * kf * kf * self.var).exp();
        let mut acc = Cx::zero();
        for &(w, mu) in &self.comps {
            let ph = mu * (-2.0 * PI * kf);
            acc = acc.add(Cx {
                re: w * ph.cos() * damp,
                im: w * ph.sin() * damp,
            });
        }
        acc
    }

    fn to_fourier(&self, band: usize) -> Fourier<S> {
        let b = band as i64;
        Fourier {
            band,
            coef: (-b..=b).map(|k| self.coefficient(k)).collect(),
        }
    }

    fn mass(&self) -> S {
        self.comps.iter().fold(c(0.0), |a, w| a + w.0)
    }
}

#[derive(Clone, Debug)]
enum Message<S> {
    Gauss(Gauss<S>),
    Fourier(Fourier<S>),
}

/// Product of the incoming messages at one node.
#[derive(Clone, Debug)]
struct Product<S> {
    gauss: Option<Gauss<S>>,
    fourier: Option<Fourier<S>>,
}

impl<S: Scalar> Product<S> {
    fn combine(msgs: Vec<Message<S>>) -> Result<Self> {
        let mut gauss: Option<Gauss<S>> = None;
        let mut fourier: Option<Fourier<S>> = None;
        for m in msgs {
            match m {
                Message::Gauss(g) => gauss = Some(gauss.map_or(g.clone(), |h| h.times(&g))),
                Message::Fourier(f) => {
                    fourier = Some(match fourier {
                        None => f,
                        Some(h) => {
                            if h.band + f.band > MAX_BAND {
                                return Err(Error::Numerical(format!(
                                    "Fourier bandwidth {} exceeds {MAX_BAND}",
                                    h.band + f.band
                                )));
                            }
                            h.convolve(&f, usize::MAX)
                        }
                    })
                }
            }
        }
        Ok(Product { gauss, fourier })
    }

    /// Fourier coefficients of the product for `|k| ≤ band`.
    fn coefficients(&self, band: usize) -> Fourier<S> {
        match (&self.gauss, &self.fourier) {
            (Some(g), None) => g.to_fourier(band),
            (None, Some(f)) => f.clone().truncated(band),
            (Some(g), Some(f)) => g.to_fourier(band + f.band).convolve(f, band),
            (None, None) => unreachable!("internal nodes have children"),
        }
    }

    /// Message sent across a branch of length `ell`.
    fn propagate(&self, ell: f64) -> Result<Message<S>> {
        match (&self.gauss, &self.fourier) {
            (Some(g), None) => {
                let var = g.var + ell;
                if var < GAUSS_LIMIT {
                    Ok(Message::Gauss(Gauss {
                        var,
                        comps: g.comps.clone(),
                    }))
                } else {
                    let h = Gauss {
                        var,
                        comps: g.comps.clone(),
                    };
                    Ok(Message::Fourier(h.to_fourier(bandwidth(var))))
                }
            }
            (None, Some(f)) => Ok(Message::Fourier(f.clone().truncated(bandwidth(ell)).damp(ell))),
            (Some(g), Some(f)) => {
                let band = (bandwidth(g.var + ell) + f.band).min(bandwidth(ell));
                if band > MAX_BAND {
                    return Err(Error::Numerical(format!("Fourier bandwidth {band} exceeds {MAX_BAND}")));
                }
                Ok(Message::Fourier(self.coefficients(band).damp(ell)))
            }
            (None, None) => unreachable!("internal nodes have children"),
        }
    }

    /// `∫_0^1` of the product.
    fn integral(&self) -> S {
        match (&self.gauss, &self.fourier) {
            (Some(g), None) => g.mass(),
            (None, Some(f)) => f.at(0).re,
            (Some(_), Some(_)) => self.coefficients(0).coef[0].re,
            (None, None) => unreachable!("internal nodes have children"),
        }
    }
}

fn leaf_message<S: Scalar>(x: S, ell: f64) -> Message<S> {
    let g = Gauss::point(ell, x);
    if ell < GAUSS_LIMIT {
        Message::Gauss(g)
    } else {
        Message::Fourier(g.to_fourier(bandwidth(ell)))
    }
}

/// Node times and branch lengths of a decorated forest.
struct Shape<'a> {
    forest: &'a Forest,
    times: Vec<f64>,
}

impl<'a> Shape<'a> {
    fn new(f: &'a Forest, tau: &[f64], x: &SpatialConfig) -> Result<Self> {
        validate_times(f, tau)?;
        if f.leaves() != x.partition() {
            return Err(Error::InvalidArgument(format!(
                "forest leaves {} differ from the configuration {}",
                f.leaves(),
                x.partition()
            )));
        }
        Ok(Shape {
            forest: f,
            times: node_times(f, tau),
        })
    }

    fn edge(&self, u: usize) -> Option<f64> {
        self.forest.nodes()[u].parent.map(|p| self.times[p] - self.times[u])
    }

    /// Upward pass in one coordinate; returns the per-node products and the
    /// integral (product over tree components).
    fn upward<S: Scalar>(&self, xs: &[S]) -> Result<(Vec<Option<Product<S>>>, S)> {
        let nodes = self.forest.nodes();
        let mut msgs: Vec<Option<Message<S>>> = vec![None; nodes.len()];
        let mut prods: Vec<Option<Product<S>>> = vec![None; nodes.len()];
        let mut value: S = c(1.0);
        for (v, node) in nodes.iter().enumerate() {
            if node.is_leaf() {
                if let Some(ell) = self.edge(v) {
                    msgs[v] = Some(leaf_message(xs[v], ell));
                }
                continue;
            }
            let incoming = node.children.iter().map(|&u| msgs[u].take().expect("child message")).collect();
            let prod = Product::combine(incoming)?;
            match self.edge(v) {
                Some(ell) => msgs[v] = Some(prod.propagate(ell)?),
                None => value *= prod.integral(),
            }
            prods[v] = Some(prod);
        }
        Ok((prods, value))
    }
}

/// `g(F, τ, x) = ∫ f_sp(ξ | τ, x) dξ` over internal locations on the torus.
/// Equals 1 for the trivial forest.
pub fn spatial_integral_g(f: &Forest, tau: &[f64], x: &SpatialConfig) -> Result<f64> {
    let shape = Shape::new(f, tau, x)?;
    if f.is_trivial() {
        return Ok(1.0);
    }
    let mut g = 1.0;
    for coord in 0..x.dim() {
        let xs: Vec<f64> = x.positions().iter().map(|p| p.coords()[coord]).collect();
        g *= shape.upward::<f64>(&xs)?.1;
    }
    Ok(g)
}

/// `g` together with `∇_x log g` (one `d`-vector per leaf).
pub fn spatial_integral_g_grad_log(f: &Forest, tau: &[f64], x: &SpatialConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    let shape = Shape::new(f, tau, x)?;
    let n = x.len();
    let d = x.dim();
    let mut grad = vec![vec![0.0; d]; n];
    if f.is_trivial() {
        return Ok((1.0, grad));
    }
    let mut g = 1.0;
    for coord in 0..d {
        let xs: Vec<f64> = x.positions().iter().map(|p| p.coords()[coord]).collect();
        g *= shape.upward::<f64>(&xs)?.1;
        for j in 0..n {
            let duals: Vec<Dual64> = xs.iter().enumerate().map(|(i, &v)| Dual64::new(v, if i == j { 1.0 } else { 0.0 })).collect();
            let gc = shape.upward::<Dual64>(&duals)?.1;
            grad[j][coord] = gc.eps / gc.re;
        }
    }
    Ok((g, grad))
}

/// Exact draw of the internal locations given `(F, τ)`: the density is
/// `∝ f_sp(ξ | τ, x)`. Returns one point per forest node (leaves at `x`).
pub fn sample_space_decoration<R: Rng + ?Sized>(f: &Forest, tau: &[f64], x: &SpatialConfig, rng: &mut R) -> Result<Vec<TorusPoint>> {
    let shape = Shape::new(f, tau, x)?;
    let nodes = f.nodes();
    let d = x.dim();
    let mut coords = vec![vec![0.0; d]; nodes.len()];
    for coord in 0..d {
        let xs: Vec<f64> = x.positions().iter().map(|p| p.coords()[coord]).collect();
        let (prods, _) = shape.upward::<f64>(&xs)?;
        for v in (0..nodes.len()).rev() {
            if nodes[v].is_leaf() {
                coords[v][coord] = xs[v];
                continue;
            }
            let prod = prods[v].as_ref().expect("internal product");
            let y = match nodes[v].parent {
                None => sample_product(prod.gauss.clone(), prod.fourier.as_ref(), rng)?,
                Some(p) => {
                    let ell = shape.edge(v).expect("has parent");
                    let kernel = Gauss::point(ell, coords[p][coord]);
                    let g = match &prod.gauss {
                        Some(h) => kernel.times(h),
                        None => kernel,
                    };
                    sample_product(Some(g), prod.fourier.as_ref(), rng)?
                }
            };
            coords[v][coord] = y;
        }
    }
    Ok(coords.into_iter().map(TorusPoint::new).collect())
}

fn sample_gauss<R: Rng + ?Sized>(g: &Gauss<f64>, rng: &mut R) -> f64 {
    let total = g.mass();
    let mut u = rng.random::<f64>() * total;
    let mut mean = g.comps.last().expect("nonempty mixture").1;
    for &(w, m) in &g.comps {
        if u < w {
            mean = m;
            break;
        }
        u -= w;
    }
    let z: f64 = StandardNormal.sample(rng);
    wrap(mean + g.var.sqrt() * z)
}

/// Sample from the density `∝ G(y)·F(y)` on `[0, 1)`.
fn sample_product<R: Rng + ?Sized>(g: Option<Gauss<f64>>, f: Option<&Fourier<f64>>, rng: &mut R) -> Result<f64> {
    match (g, f) {
        (Some(g), None) => Ok(sample_gauss(&g, rng)),
        (None, Some(f)) => fourier_inverse_cdf(f, rng.random::<f64>()),
        (Some(g), Some(f)) => {
            let bound: f64 = f.coef.iter().map(|c| c.re.hypot(c.im)).sum();
            let band = bandwidth(g.var) + f.band;
            let tries = if band <= 4096 { 64 } else { 10_000_000 };
            for _ in 0..tries {
                let y = sample_gauss(&g, rng);
                if rng.random::<f64>() * bound < fourier_eval(f, y).0 {
                    return Ok(y);
                }
            }
            if band > MAX_BAND {
                return Err(Error::Numerical("rejection sampler exhausted".into()));
            }
            let prod = Product {
                gauss: Some(g),
                fourier: Some(f.clone()),
            };
            fourier_inverse_cdf(&prod.coefficients(band), rng.random::<f64>())
        }
        (None, None) => Ok(rng.random::<f64>()),
    }
}

/// Density value and `CDF − y·c_0` terms at `y` for a real Fourier series.
fn fourier_eval(f: &Fourier<f64>, y: f64) -> (f64, f64) {
    let c0 = f.at(0).re;
    let (mut dens, mut cdf) = (c0, 0.0);
    let step = (2.0 * PI * y).sin_cos();
    let (mut s, mut cs) = (0.0f64, 1.0f64);
    for k in 1..=f.band as i64 {
        let ns = s * step.1 + cs * step.0;
        let nc = cs * step.1 - s * step.0;
        s = ns;
        cs = nc;
        let ck = f.at(k);
        // 2 Re[c_k e^{2πiky}]
        dens += 2.0 * (ck.re * cs - ck.im * s);
        // 2 Re[c_k (e^{2πiky} − 1)/(2πik)]
        let w = 2.0 * PI * k as f64;
        cdf += 2.0 * (ck.re * s + ck.im * (cs - 1.0)) / w;
    }
    (dens, cdf)
}

fn fourier_inverse_cdf(f: &Fourier<f64>, u: f64) -> Result<f64> {
    let c0 = f.at(0).re;
    if !(c0 > 0.0) {
        return Err(Error::Numerical("Fourier density with non-positive mass".into()));
    }
    let target = u * c0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut y = u;
    for _ in 0..200 {
        let (dens, extra) = fourier_eval(f, y);
        let r = c0 * y + extra - target;
        if r.abs() < 1e-15 * c0 {
            break;
        }
        if r > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        if hi - lo < 1e-14 {
            break;
        }
        let newton = y - r / dens;
        y = if dens > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok(wrap(y))
}
