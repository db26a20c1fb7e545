//! Adaptive Gauss–Kronrod (7/15) quadrature and tabulated inverse-CDF sampling.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Abscissae of the 15-point Kronrod rule mapped to `[a, b]`, ascending.
pub fn kronrod_nodes(a: f64, b: f64) -> [f64; 15] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut x = [0.0; 15];
    for i in 0..7 {
        x[i] = c - h * XGK[i];
        x[14 - i] = c + h * XGK[i];
    }
    x[7] = c;
    x
}

/// Kronrod weights matching [`kronrod_nodes`] on `[a, b]`.
pub fn kronrod_weights(a: f64, b: f64) -> [f64; 15] {
    let h = 0.5 * (b - a);
    let mut w = [0.0; 15];
    for i in 0..7 {
        w[i] = h * WGK[i];
        w[14 - i] = h * WGK[i];
    }
    w[7] = h * WGK[7];
    w
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub a: f64,
    pub b: f64,
    pub integral: f64,
    pub error: f64,
    /// Integrand values at the Kronrod nodes of the segment.
    pub values: [f64; 15],
}

impl PartialEq for Segment {
    fn eq(&self, o: &Self) -> bool {
        self.error == o.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Segment {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&o.error)
    }
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Segment {
    let x = kronrod_nodes(a, b);
    let mut values = [0.0; 15];
    for i in 0..15 {
        values[i] = f(x[i]);
    }
    let h = 0.5 * (b - a);
    let mut k = WGK[7] * values[7];
    let mut g = WG[3] * values[7];
    for i in 0..7 {
        let s = values[i] + values[14 - i];
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    Segment {
        a,
        b,
        integral: k * h,
        error: ((k - g) * h).abs(),
        values,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_segments: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            abs_tol: 1e-14,
            rel_tol: 1e-10,
            max_segments: 2000,
        }
    }
}

impl QuadOptions {
    pub fn rel(rel_tol: f64) -> Self {
        QuadOptions {
            rel_tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub segments: Vec<Segment>,
}

/// Globally adaptive integration of `f` over `[a, b]`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<Quadrature> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Numerical("infinite integration bounds".into()));
    }
    if a == b {
        return Ok(Quadrature {
            value: 0.0,
            error: 0.0,
            segments: Vec::new(),
        });
    }
    let mut heap = BinaryHeap::new();
    let first = gk15(&mut f, a, b);
    let mut value = first.integral;
    let mut error = first.error;
    heap.push(first);
    while error > opts.abs_tol.max(opts.rel_tol * value.abs()) {
        if heap.len() >= opts.max_segments {
            break;
        }
        let worst = heap.pop().expect("nonempty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            heap.push(worst);
            break;
        }
        let l = gk15(&mut f, worst.a, mid);
        let r = gk15(&mut f, mid, worst.b);
        value += l.integral + r.integral - worst.integral;
        error += l.error + r.error - worst.error;
        heap.push(l);
        heap.push(r);
    }
    // re-sum to avoid drift from incremental updates
    let mut segments = heap.into_vec();
    segments.sort_by(|x, y| x.a.total_cmp(&y.a));
    let value: f64 = segments.iter().map(|s| s.integral).sum();
    let error: f64 = segments.iter().map(|s| s.error).sum();
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite integral".into()));
    }
    Ok(Quadrature { value, error, segments })
}

struct VecSegment {
    a: f64,
    b: f64,
    integral: Vec<f64>,
    error: Vec<f64>,
    priority: f64,
}

fn gk15_vec<F: FnMut(f64) -> Vec<f64>>(f: &mut F, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let x = kronrod_nodes(a, b);
    let vals: Vec<Vec<f64>> = x.iter().map(|&xi| f(xi)).collect();
    let m = vals[0].len();
    let h = 0.5 * (b - a);
    let mut integral = vec![0.0; m];
    let mut error = vec![0.0; m];
    for c in 0..m {
        let mut k = WGK[7] * vals[7][c];
        let mut g = WG[3] * vals[7][c];
        for i in 0..7 {
            let s = vals[i][c] + vals[14 - i][c];
            k += WGK[i] * s;
            if i % 2 == 1 {
                g += WG[i / 2] * s;
            }
        }
        integral[c] = k * h;
        error[c] = ((k - g) * h).abs();
    }
    (integral, error)
}

/// Adaptive integration of a vector-valued integrand. Each component is
/// judged against `rel_tol` times the larger of its own magnitude and a
/// thousandth of the largest component, so components that vanish by
/// symmetry do not stall refinement.
pub fn integrate_vec<F: FnMut(f64) -> Vec<f64>>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<Vec<f64>> {
    let (i0, e0) = gk15_vec(&mut f, a, b);
    let m = i0.len();
    let mut segs = vec![VecSegment {
        a,
        b,
        integral: i0,
        error: e0,
        priority: 0.0,
    }];
    loop {
        let total: Vec<f64> = (0..m).map(|c| segs.iter().map(|s| s.integral[c]).sum()).collect();
        let err: Vec<f64> = (0..m).map(|c| segs.iter().map(|s| s.error[c]).sum()).collect();
        let top = total.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale: Vec<f64> = total.iter().map(|v| opts.abs_tol.max(opts.rel_tol * v.abs().max(1e-3 * top))).collect();
        if (0..m).all(|c| err[c] <= scale[c]) || segs.len() >= opts.max_segments {
            if total.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite integral".into()));
            }
            return Ok(total);
        }
        for s in segs.iter_mut() {
            s.priority = (0..m).map(|c| s.error[c] / scale[c]).fold(0.0, f64::max);
        }
        let worst = (0..segs.len()).max_by(|&i, &j| segs[i].priority.total_cmp(&segs[j].priority)).expect("nonempty");
        let w = segs.swap_remove(worst);
        let mid = 0.5 * (w.a + w.b);
        if mid <= w.a || mid >= w.b {
            segs.push(w);
            let total: Vec<f64> = (0..m).map(|c| segs.iter().map(|s| s.integral[c]).sum()).collect();
            return Ok(total);
        }
        for (lo, hi) in [(w.a, mid), (mid, w.b)] {
            let (integral, error) = gk15_vec(&mut f, lo, hi);
            segs.push(VecSegment {
                a: lo,
                b: hi,
                integral,
                error,
                priority: 0.0,
            });
        }
    }
}

/// `∫_0^∞ λ e^{−λt} h(t) dt`, computed on `[0,1]` after `t = −ln(1−u)/λ`.
pub fn integrate_exponential<F: FnMut(f64) -> f64>(mut h: F, lambda: f64, opts: QuadOptions) -> Result<Quadrature> {
    integrate(|u| h(exp_map(u, lambda)), 0.0, 1.0, opts)
}

/// The map `u ↦ −ln(1−u)/λ` from `[0,1)` to `[0,∞)`.
pub fn exp_map(u: f64, lambda: f64) -> f64 {
    -(-u).ln_1p() / lambda
}

/// Piecewise-linear density tabulated on the nodes of an adaptive partition;
/// sampling inverts its exact (piecewise-quadratic) CDF.
#[derive(Clone, Debug)]
pub struct TabulatedDensity {
    xs: Vec<f64>,
    fs: Vec<f64>,
    cdf: Vec<f64>,
}

impl TabulatedDensity {
    pub fn from_points(xs: Vec<f64>, fs: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != fs.len() {
            return Err(Error::Numerical("density table needs at least two points".into()));
        }
        let mut cdf = vec![0.0; xs.len()];
        for i in 1..xs.len() {
            let w = xs[i] - xs[i - 1];
            if w < 0.0 || fs[i] < 0.0 || !fs[i].is_finite() {
                return Err(Error::Numerical("invalid density table".into()));
            }
            cdf[i] = cdf[i - 1] + 0.5 * w * (fs[i] + fs[i - 1]);
        }
        if cdf[xs.len() - 1] <= 0.0 {
            return Err(Error::Numerical("density integrates to zero".into()));
        }
        Ok(TabulatedDensity { xs, fs, cdf })
    }

    /// Tabulate on the Kronrod nodes of the segments, extended by constants to
    /// the segment end points (the integrand is never evaluated there) and
    /// rescaled so each segment carries its quadrature mass.
    pub fn from_quadrature(q: &Quadrature) -> Result<Self> {
        let mut xs = Vec::new();
        let mut fs = Vec::new();
        for s in &q.segments {
            let nodes = kronrod_nodes(s.a, s.b);
            let mut px = Vec::with_capacity(17);
            let mut pf = Vec::with_capacity(17);
            px.push(s.a);
            pf.push(s.values[0].max(0.0));
            for i in 0..15 {
                px.push(nodes[i]);
                pf.push(s.values[i].max(0.0));
            }
            px.push(s.b);
            pf.push(s.values[14].max(0.0));
            let trap: f64 = (1..px.len()).map(|i| 0.5 * (px[i] - px[i - 1]) * (pf[i] + pf[i - 1])).sum();
            let scale = if trap > 0.0 { s.integral.max(0.0) / trap } else { 0.0 };
            xs.extend(px);
            fs.extend(pf.into_iter().map(|f| f * scale));
        }
        Self::from_points(xs, fs)
    }

    pub fn total(&self) -> f64 {
        *self.cdf.last().expect("nonempty")
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return 0.0;
        }
        let n = self.xs.len();
        if x >= self.xs[n - 1] {
            return 1.0;
        }
        let i = self.xs.partition_point(|&v| v <= x) - 1;
        let w = self.xs[i + 1] - self.xs[i];
        let s = x - self.xs[i];
        let slope = if w > 0.0 { (self.fs[i + 1] - self.fs[i]) / w } else { 0.0 };
        (self.cdf[i] + self.fs[i] * s + 0.5 * slope * s * s) / self.total()
    }

    /// Quantile for `u ∈ [0,1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let target = u * self.total();
        let i = (self.cdf.partition_point(|&c| c <= target)).clamp(1, self.xs.len() - 1) - 1;
        let w = self.xs[i + 1] - self.xs[i];
        if w <= 0.0 {
            return self.xs[i];
        }
        let rem = target - self.cdf[i];
        let f0 = self.fs[i];
        let slope = (self.fs[i + 1] - f0) / w;
        let s = if slope.abs() < 1e-14 * (f0 + 1e-300) / w {
            if f0 > 0.0 {
                rem / f0
            } else {
                0.0
            }
        } else {
            // solve f0 s + slope s²/2 = rem for the root in [0, w]
            let disc = (f0 * f0 + 2.0 * slope * rem).max(0.0);
            2.0 * rem / (f0 + disc.sqrt())
        };
        self.xs[i] + s.clamp(0.0, w)
    }
}
