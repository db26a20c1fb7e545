//! Heat kernels on the flat torus `[0,1)^d` and on `ℝ^d`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::combinatorics::{Forest, Partition};
use crate::error::{Error, Result};

/// Wrap a real into `[0, 1)`.
pub fn wrap(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Signed representative of `x` modulo 1 in `[-1/2, 1/2)`.
pub fn centered(x: f64) -> f64 {
    let y = wrap(x + 0.5) - 0.5;
    if y < -0.5 {
        y + 1.0
    } else {
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        TorusPoint {
            coords: coords.into_iter().map(wrap).collect(),
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Shortest displacement `other − self`, componentwise in `[-1/2, 1/2)`.
    pub fn displacement_to(&self, other: &TorusPoint) -> Vec<f64> {
        self.coords.iter().zip(&other.coords).map(|(a, b)| centered(b - a)).collect()
    }

    pub fn distance(&self, other: &TorusPoint) -> f64 {
        self.displacement_to(other).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn shifted(&self, v: &[f64]) -> TorusPoint {
        TorusPoint::new(self.coords.iter().zip(v).map(|(a, b)| a + b).collect())
    }
}

/// Lineage positions, one point per block of the partition (in block order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct SpatialConfig {
    partition: Partition,
    positions: Vec<TorusPoint>,
}

#[derive(Deserialize)]
struct RawConfig {
    partition: Partition,
    positions: Vec<TorusPoint>,
}

impl TryFrom<RawConfig> for SpatialConfig {
    type Error = Error;
    fn try_from(r: RawConfig) -> Result<Self> {
        SpatialConfig::new(r.partition, r.positions)
    }
}

impl SpatialConfig {
    /// Validates membership in the state space: in `d = 1` at most one pair of
    /// blocks may share a location, in `d ≥ 2` none may.
    pub fn new(partition: Partition, positions: Vec<TorusPoint>) -> Result<Self> {
        if partition.len() != positions.len() || positions.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} blocks but {} positions",
                partition.len(),
                positions.len()
            )));
        }
        let d = positions[0].dim();
        if d == 0 || positions.iter().any(|p| p.dim() != d) {
            return Err(Error::InvalidArgument("positions must share a positive dimension".into()));
        }
        let mut coincident = 0;
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                if positions[i] == positions[j] {
                    coincident += 1;
                }
            }
        }
        if (d == 1 && coincident > 1) || (d >= 2 && coincident > 0) {
            return Err(Error::CoincidentPoints);
        }
        Ok(SpatialConfig { partition, positions })
    }

    /// Singleton blocks `{1}, …, {n}` at the given coordinates.
    pub fn singletons(coords: Vec<Vec<f64>>) -> Result<Self> {
        let n = coords.len();
        Self::new(Partition::singletons(n), coords.into_iter().map(TorusPoint::new).collect())
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn positions(&self) -> &[TorusPoint] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions[0].dim()
    }

    pub fn min_separation(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                m = m.min(self.positions[i].distance(&self.positions[j]));
            }
        }
        m
    }

    /// Same partition, every position shifted by `v`.
    pub fn translated(&self, v: &[f64]) -> SpatialConfig {
        SpatialConfig {
            partition: self.partition.clone(),
            positions: self.positions.iter().map(|p| p.shifted(v)).collect(),
        }
    }

    /// Append a new singleton block with the next unused label at `y`.
    pub fn extended(&self, y: TorusPoint) -> Result<SpatialConfig> {
        let next = self.partition.ground_set().into_iter().max().unwrap_or(0) + 1;
        let mut blocks: Vec<Vec<u32>> = self.partition.blocks().iter().map(|b| b.labels().to_vec()).collect();
        blocks.push(vec![next]);
        let partition = Partition::new(blocks)?;
        // block order is by minimum label, so the new block is last
        let mut positions = self.positions.clone();
        positions.push(y);
        SpatialConfig::new(partition, positions)
    }

    /// Replace the position of the `i`-th block.
    pub fn with_position(&self, i: usize, p: TorusPoint) -> SpatialConfig {
        let mut positions = self.positions.clone();
        positions[i] = p;
        SpatialConfig {
            partition: self.partition.clone(),
            positions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelVariant {
    ImageSum,
    Fourier,
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelMethod {
    pub variant: KernelVariant,
    pub cutoff: usize,
}

impl Default for KernelMethod {
    fn default() -> Self {
        KernelMethod {
            variant: KernelVariant::Auto,
            cutoff: 12,
        }
    }
}

impl KernelMethod {
    pub fn image(cutoff: usize) -> Self {
        KernelMethod {
            variant: KernelVariant::ImageSum,
            cutoff,
        }
    }

    pub fn fourier(cutoff: usize) -> Self {
        KernelMethod {
            variant: KernelVariant::Fourier,
            cutoff,
        }
    }

    fn use_images(&self, t: f64) -> bool {
        match self.variant {
            KernelVariant::ImageSum => true,
            KernelVariant::Fourier => false,
            KernelVariant::Auto => t < 1.0 / (2.0 * PI),
        }
    }
}

/// One-dimensional Gaussian density with variance `t`.
pub fn pbar_1d(t: f64, x: f64) -> f64 {
    (-x * x / (2.0 * t)).exp() / (2.0 * PI * t).sqrt()
}

/// `d`-dimensional Gaussian density with covariance `t·I`.
pub fn pbar(t: f64, x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (-r2 / (2.0 * t)).exp() / (2.0 * PI * t).powf(x.len() as f64 / 2.0)
}

/// Wrapped kernel and its derivative in one dimension.
pub fn kernel_1d_with_derivative(t: f64, x: f64, m: KernelMethod) -> (f64, f64) {
    let k = m.cutoff as i64;
    if m.use_images(t) {
        let x = centered(x);
        // images beyond this reach contribute below e^{-46} of the total
        let reach = ((92.0 * t).sqrt().ceil() as i64 + 1).min(k);
        let (mut v, mut dv) = (0.0, 0.0);
        for j in -reach..=reach {
            let y = x + j as f64;
            let g = pbar_1d(t, y);
            v += g;
            dv -= g * y / t;
        }
        (v, dv)
    } else {
        let (mut v, mut dv) = (1.0, 0.0);
        let reach = ((46.0 / (2.0 * PI * PI * t)).sqrt().ceil() as i64).min(k);
        for j in 1..=reach {
            let w = 2.0 * PI * j as f64;
            let e = 2.0 * (-0.5 * w * w * t).exp();
            v += e * (w * x).cos();
            dv -= e * w * (w * x).sin();
        }
        (v, dv)
    }
}

pub fn torus_kernel_1d(t: f64, x: f64, m: KernelMethod) -> f64 {
    kernel_1d_with_derivative(t, x, m).0
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("kernel time {t} must be positive")))
    }
}

/// `p_t(x)` for a displacement `x` (any real vector; only its class mod ℤ^d matters).
pub fn torus_kernel(t: f64, x: &[f64], m: KernelMethod) -> Result<f64> {
    check_time(t)?;
    if m.cutoff < 1 {
        return Err(Error::InvalidArgument("kernel cutoff must be at least 1".into()));
    }
    Ok(x.iter().map(|&xi| torus_kernel_1d(t, xi, m)).product())
}

/// `∇ log p_t(x)`.
pub fn torus_kernel_grad_log(t: f64, x: &[f64], m: KernelMethod) -> Result<Vec<f64>> {
    check_time(t)?;
    Ok(x.iter()
        .map(|&xi| {
            let (v, dv) = kernel_1d_with_derivative(t, xi, m);
            dv / v
        })
        .collect())
}

/// Collapse `∏ p̄_{s_i}(x_i − z)` into a single Gaussian in `z`: returns
/// `(s, x̄)` with `1/s = Σ 1/s_i` and `x̄ = Σ (s/s_i) x_i`.
pub fn gaussian_product_collapse(xs: &[Vec<f64>], ss: &[f64]) -> Result<(f64, Vec<f64>)> {
    if xs.is_empty() || xs.len() != ss.len() {
        return Err(Error::InvalidArgument("need matching, nonempty points and variances".into()));
    }
    if ss.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("variances must be positive".into()));
    }
    let s = 1.0 / ss.iter().map(|s| 1.0 / s).sum::<f64>();
    let d = xs[0].len();
    let mut xbar = vec![0.0; d];
    for (x, si) in xs.iter().zip(ss) {
        for c in 0..d {
            xbar[c] += s / si * x[c];
        }
    }
    Ok((s, xbar))
}

/// Merge time of every node: `times[birth]`.
pub fn node_times(f: &Forest, times: &[f64]) -> Vec<f64> {
    f.nodes().iter().map(|n| times[n.birth]).collect()
}

/// Integral of the Gaussian branch factors over `ℝ^d` internal locations,
/// by the leaves-to-root `(r_v, x̄_v)` recursion. `leafpos` is indexed like
/// the blocks of the leaf partition.
pub fn euclidean_tree_integral(f: &Forest, times: &[f64], leafpos: &[Vec<f64>]) -> Result<f64> {
    let (value, _) = euclidean_tree_recursion(f, times, leafpos)?;
    Ok(value)
}

/// The recursion itself; also returns `(r_v, x̄_v)` per node.
pub fn euclidean_tree_recursion(f: &Forest, times: &[f64], leafpos: &[Vec<f64>]) -> Result<(f64, Vec<(f64, Vec<f64>)>)> {
    if f.is_trivial() {
        return Err(Error::InvalidForest("trivial forest has no internal nodes".into()));
    }
    crate::rates::validate_times(f, times)?;
    if leafpos.len() != f.leaves().len() {
        return Err(Error::InvalidArgument("one position per leaf required".into()));
    }
    let tn = node_times(f, times);
    let mut rx: Vec<(f64, Vec<f64>)> = Vec::with_capacity(f.nodes().len());
    let mut value = 1.0;
    // children always precede parents in node order
    for (v, node) in f.nodes().iter().enumerate() {
        if node.is_leaf() {
            rx.push((0.0, leafpos[v].clone()));
            continue;
        }
        let ss: Vec<f64> = node.children.iter().map(|&u| rx[u].0 + tn[v] - tn[u]).collect();
        if ss.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidDecoration("non-positive branch length".into()));
        }
        let xs: Vec<Vec<f64>> = node.children.iter().map(|&u| rx[u].1.clone()).collect();
        let (r, xbar) = gaussian_product_collapse(&xs, &ss)?;
        let mut term = 1.0 / pbar(r, &vec![0.0; xbar.len()]);
        for (x, s) in xs.iter().zip(&ss) {
            let diff: Vec<f64> = xbar.iter().zip(x).map(|(a, b)| a - b).collect();
            term *= pbar(*s, &diff);
        }
        value *= term;
        rx.push((r, xbar));
    }
    Ok((value, rx))
}

/// Half-width of the lattice window used for image offsets at time `t`.
pub fn image_cutoff(t: f64) -> i64 {
    (12.0f64).max((2.0 * t * 46.0).sqrt().ceil() + 1.0) as i64
}

/// Sample `k ∈ ℤ^d` with probability `∝ p̄_T(b − a + k)`; the Euclidean
/// bridge from `a` to `b + k` then wraps to a torus bridge.
pub fn torus_bridge_offset<R: Rng + ?Sized>(a: &TorusPoint, b: &TorusPoint, t: f64, rng: &mut R) -> Result<Vec<i64>> {
    check_time(t)?;
    let kmax = image_cutoff(t);
    let mut out = Vec::with_capacity(a.dim());
    for (&ac, &bc) in a.coords().iter().zip(b.coords()) {
        let delta = bc - ac;
        let weights = image_weights(delta, t, kmax);
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        out.push(pick as i64 - kmax);
    }
    Ok(out)
}

/// Unnormalised weights `p̄_t(δ + k)` for `k = −kmax..=kmax`.
pub fn image_weights(delta: f64, t: f64, kmax: i64) -> Vec<f64> {
    (-kmax..=kmax).map(|k| pbar_1d(t, delta + k as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{integrate, QuadOptions};
    use crate::rng::stream_rng;
    use proptest::prelude::{prop_assert, proptest};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn wrapping() {
        assert_eq!(wrap(1.25), 0.25);
        assert_eq!(wrap(-0.25), 0.75);
        assert_eq!(wrap(-1e-18), 0.0);
        assert!((centered(0.7) + 0.3).abs() < 1e-15);
        let a = TorusPoint::new(vec![0.95, 0.1]);
        let b = TorusPoint::new(vec![0.05, 0.2]);
        let d = a.displacement_to(&b);
        assert!((d[0] - 0.1).abs() < 1e-12 && (d[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn coincidence_rule() {
        let p = |v: f64| TorusPoint::new(vec![v]);
        assert!(SpatialConfig::new(Partition::singletons(3), vec![p(0.1), p(0.1), p(0.5)]).is_ok());
        assert_eq!(
            SpatialConfig::new(Partition::singletons(3), vec![p(0.1), p(0.1), p(0.1)]),
            Err(Error::CoincidentPoints)
        );
        let q = |a: f64, b: f64| TorusPoint::new(vec![a, b]);
        assert_eq!(
            SpatialConfig::new(Partition::singletons(2), vec![q(0.1, 0.2), q(0.1, 0.2)]),
            Err(Error::CoincidentPoints)
        );
    }

    #[test]
    fn kernel_is_a_density() {
        for &t in &[0.01, 0.1, 1.0] {
            let q = integrate(|x| torus_kernel_1d(t, x, KernelMethod::default()), 0.0, 1.0, QuadOptions::rel(1e-13)).unwrap();
            assert!((q.value - 1.0).abs() < 1e-10, "t = {t}: {}", q.value);
            // d = 2 factorises, so the double integral is the square
            let q2 = integrate(
                |y| {
                    integrate(|x| torus_kernel(t, &[x, y], KernelMethod::default()).unwrap(), 0.0, 1.0, QuadOptions::rel(1e-13))
                        .unwrap()
                        .value
                },
                0.0,
                1.0,
                QuadOptions::rel(1e-12),
            )
            .unwrap();
            assert!((q2.value - 1.0).abs() < 1e-10, "t = {t}: {}", q2.value);
        }
    }

    #[test]
    fn converges_to_uniform() {
        for i in 0..50 {
            let x = i as f64 / 50.0;
            assert!((torus_kernel(50.0, &[x], KernelMethod::default()).unwrap() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn image_and_fourier_agree() {
        let a = torus_kernel(0.25, &[0.3], KernelMethod::image(12)).unwrap();
        let b = torus_kernel(0.25, &[0.3], KernelMethod::fourier(12)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(torus_kernel(0.0, &[0.3], KernelMethod::default()).is_err());
        assert!(torus_kernel(-1.0, &[0.3], KernelMethod::default()).is_err());
    }

    #[test]
    fn grad_log_examples() {
        let m = KernelMethod::default();
        assert_eq!(torus_kernel_grad_log(0.3, &[0.0, 0.0], m).unwrap(), vec![0.0, 0.0]);
        let x = [0.1, 0.4];
        let g = torus_kernel_grad_log(0.2, &x, m).unwrap();
        let h = 1e-5;
        for c in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let fd = (torus_kernel(0.2, &xp, m).unwrap().ln() - torus_kernel(0.2, &xm, m).unwrap().ln()) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-6, "{fd} vs {}", g[c]);
        }
    }

    #[test]
    fn semigroup_property() {
        let m = KernelMethod::default();
        for &(s, t, x) in &[(0.05, 0.1, 0.3), (0.2, 0.5, 0.0), (0.01, 0.02, 0.45)] {
            let q = integrate(
                |z| torus_kernel_1d(s, x - z, m) * torus_kernel_1d(t, z, m),
                0.0,
                1.0,
                QuadOptions::rel(1e-13),
            )
            .unwrap();
            assert!((q.value - torus_kernel_1d(s + t, x, m)).abs() < 1e-8);
        }
    }

    #[test]
    fn small_time_matches_euclidean() {
        let m = KernelMethod::default();
        for i in 0..=20 {
            let x = -0.2 + 0.02 * i as f64;
            for &t in &[0.001, 0.005, 0.01] {
                assert!((torus_kernel_1d(t, x, m) - pbar_1d(t, x)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn collapse_examples() {
        let (s, x) = gaussian_product_collapse(&[vec![0.0, 1.0], vec![1.0, 3.0]], &[0.4, 0.4]).unwrap();
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(x, vec![0.5, 2.0]);
        let (s, x) = gaussian_product_collapse(&[vec![0.3]], &[0.7]).unwrap();
        assert_eq!((s, x), (0.7, vec![0.3]));
        assert!(gaussian_product_collapse(&[], &[]).is_err());
    }

    #[test]
    fn collapse_identity_random() {
        let mut rng = stream_rng(2, 0);
        for _ in 0..50 {
            let n = rng.random_range(1..5);
            let d = rng.random_range(1..4);
            let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let ss: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
            let (s, xbar) = gaussian_product_collapse(&xs, &ss).unwrap();
            let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u - v).collect::<Vec<_>>();
            let lhs: f64 = xs.iter().zip(&ss).map(|(x, si)| pbar(*si, &sub(x, &z))).product();
            let rhs = pbar(s, &sub(&z, &xbar)) / pbar(s, &vec![0.0; d])
                * xs.iter().zip(&ss).map(|(x, si)| pbar(*si, &sub(x, &xbar))).product::<f64>();
            assert!(((lhs - rhs) / lhs).abs() < 1e-12);
        }
    }

    fn part(b: &[&[u32]]) -> Partition {
        Partition::new(b.iter().map(|v| v.to_vec()).collect()).unwrap()
    }

    #[test]
    fn cherry_and_star() {
        let cherry = Forest::new(vec![Partition::singletons(2), part(&[&[1, 2]])]).unwrap();
        let v = euclidean_tree_integral(&cherry, &[0.0, 0.3], &[vec![0.1, 0.2], vec![-0.2, 0.4]]).unwrap();
        assert!((v - pbar(0.6, &[0.3, -0.2])).abs() < 1e-14);

        let star = Forest::new(vec![Partition::singletons(3), part(&[&[1, 2, 3]])]).unwrap();
        let pos = vec![vec![0.0], vec![0.3], vec![0.9]];
        let (_, rx) = euclidean_tree_recursion(&star, &[0.0, 0.6], &pos).unwrap();
        assert!((rx[3].0 - 0.2).abs() < 1e-15);
        assert!((rx[3].1[0] - 0.4).abs() < 1e-15);
        assert!(euclidean_tree_integral(&Forest::trivial(Partition::singletons(2)), &[0.0], &pos[..2]).is_err());
    }

    #[test]
    fn comb_matches_numerical_integration() {
        // ((1,2) at τ1, then 3 at τ2); internal locations z1, z2 on ℝ
        let f = Forest::new(vec![Partition::singletons(3), part(&[&[1, 2], &[3]]), part(&[&[1, 2, 3]])]).unwrap();
        let (t1, t2) = (0.2, 0.5);
        let x = [0.0, 0.3, -0.4];
        let closed = euclidean_tree_integral(&f, &[0.0, t1, t2], &[vec![x[0]], vec![x[1]], vec![x[2]]]).unwrap();
        let inner = |z2: f64| {
            integrate(
                |z1| pbar_1d(t1, x[0] - z1) * pbar_1d(t1, x[1] - z1) * pbar_1d(t2 - t1, z1 - z2),
                -8.0,
                8.0,
                QuadOptions::rel(1e-12),
            )
            .unwrap()
            .value
                * pbar_1d(t2, x[2] - z2)
        };
        let num = integrate(inner, -8.0, 8.0, QuadOptions::rel(1e-11)).unwrap().value;
        assert!(((closed - num) / num).abs() < 1e-6, "{closed} vs {num}");
    }

    #[test]
    fn bridge_offsets() {
        let mut rng = stream_rng(3, 1);
        let a = TorusPoint::new(vec![0.3]);
        for _ in 0..1000 {
            assert_eq!(torus_bridge_offset(&a, &a, 1e-4, &mut rng).unwrap(), vec![0]);
        }
        // χ² against the image weights at T = 10
        let b = TorusPoint::new(vec![0.8]);
        let t = 10.0;
        let kmax = image_cutoff(t);
        let w = image_weights(0.5, t, kmax);
        let total: f64 = w.iter().sum();
        let reps = 100_000;
        let mut counts = vec![0usize; w.len()];
        for _ in 0..reps {
            let k = torus_bridge_offset(&a, &b, t, &mut rng).unwrap()[0];
            counts[(k + kmax) as usize] += 1;
        }
        // pool the tails into cells with expectation ≥ 5
        let (mut chi2, mut cells, mut acc_o, mut acc_e) = (0.0, 0usize, 0.0, 0.0);
        for (c, wi) in counts.iter().zip(&w) {
            acc_o += *c as f64;
            acc_e += wi / total * reps as f64;
            if acc_e >= 5.0 {
                chi2 += (acc_o - acc_e).powi(2) / acc_e;
                cells += 1;
                acc_o = 0.0;
                acc_e = 0.0;
            }
        }
        let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} on {cells} cells");
    }

    #[test]
    fn bridge_offset_symmetry() {
        let a = TorusPoint::new(vec![0.1, 0.7]);
        let b = TorusPoint::new(vec![0.6, 0.2]);
        let mut r1 = stream_rng(4, 0);
        let mut r2 = stream_rng(4, 1);
        let reps = 20_000;
        let (mut s1, mut s2) = (vec![0i64; 2], vec![0i64; 2]);
        for _ in 0..reps {
            let k = torus_bridge_offset(&a, &b, 0.5, &mut r1).unwrap();
            let j = torus_bridge_offset(&b, &a, 0.5, &mut r2).unwrap();
            for c in 0..2 {
                s1[c] += k[c];
                s2[c] -= j[c];
            }
        }
        // the mean offsets agree within sampling noise
        for c in 0..2 {
            let diff = (s1[c] - s2[c]) as f64 / reps as f64;
            assert!(diff.abs() < 0.05, "{diff}");
        }
    }

    proptest! {
        #[test]
        fn antisymmetric_gradient(x in -0.5f64..0.5, t in 0.005f64..3.0) {
            let m = KernelMethod::default();
            let a = torus_kernel_grad_log(t, &[x], m).unwrap()[0];
            let b = torus_kernel_grad_log(t, &[-x], m).unwrap()[0];
            prop_assert!((a + b).abs() < 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn tree_integral_translation_invariant(a in -1.0f64..1.0, s in -3.0f64..3.0, t1 in 0.01f64..1.0, dt in 0.01f64..1.0) {
            let f = Forest::new(vec![Partition::singletons(3), part(&[&[1, 3], &[2]]), part(&[&[1, 2, 3]])]).unwrap();
            let pos = vec![vec![a, 0.1], vec![0.2, -0.3], vec![0.5, a * a]];
            let shifted: Vec<Vec<f64>> = pos.iter().map(|p| p.iter().map(|v| v + s).collect()).collect();
            let v1 = euclidean_tree_integral(&f, &[0.0, t1, t1 + dt], &pos).unwrap();
            let v2 = euclidean_tree_integral(&f, &[0.0, t1, t1 + dt], &shifted).unwrap();
            prop_assert!(((v1 - v2) / v1).abs() < 1e-12);
        }

        #[test]
        fn r_strictly_inside(t1 in 0.01f64..1.0, dt in 0.01f64..1.0) {
            let f = Forest::new(vec![Partition::singletons(4), part(&[&[1, 2], &[3], &[4]]), part(&[&[1, 2, 3, 4]])]).unwrap();
            let pos = vec![vec![0.0], vec![0.1], vec![0.2], vec![0.3]];
            let times = [0.0, t1, t1 + dt];
            let (_, rx) = euclidean_tree_recursion(&f, &times, &pos).unwrap();
            let tn = node_times(&f, &times);
            for (v, n) in f.nodes().iter().enumerate() {
                if !n.is_leaf() {
                    prop_assert!(rx[v].0 > 0.0 && rx[v].0 < tn[v]);
                }
            }
        }
    }
}
