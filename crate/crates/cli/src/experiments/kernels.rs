//! Heat-kernel checks: two series representations, the semigroup law, the
//! Gaussian product collapse and the tree integral against quadrature.

use rand::Rng;
use xicoal::combinatorics::{Forest, Partition};
use xicoal::kernels::{euclidean_tree_integral, gaussian_product_collapse, pbar, pbar_1d, torus_kernel, torus_kernel_1d, KernelMethod};
use xicoal::quad::{integrate, QuadOptions};
use xicoal::rng::stream_rng;
use xicoal::Result;

use super::Ctx;

fn part(b: &[&[u32]]) -> Result<Partition> {
    Partition::new(b.iter().map(|v| v.to_vec()).collect())
}

pub(super) fn run(ctx: &mut Ctx) -> Result<()> {
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        // t log-spaced over [0.02, 2]
        let t = 0.02 * 100f64.powf(i as f64 / 9.0);
        for j in 0..10 {
            let x = j as f64 / 18.0;
            let a = torus_kernel(t, &[x], KernelMethod::image(12))?;
            let b = torus_kernel(t, &[x], KernelMethod::fourier(12))?;
            worst = worst.max((a - b).abs());
        }
    }
    ctx.check("image-vs-fourier", worst, 1e-12, "100 (t, x) points, t ∈ [0.02, 2]");

    let m = KernelMethod::default();
    let mut worst: f64 = 0.0;
    for &(s, t, x) in &[(0.05, 0.1, 0.3), (0.2, 0.5, 0.0), (0.01, 0.02, 0.45), (0.003, 0.3, 0.1), (1.0, 0.7, 0.25)] {
        let q = integrate(|z| torus_kernel_1d(s, x - z, m) * torus_kernel_1d(t, z, m), 0.0, 1.0, QuadOptions::rel(1e-13))?;
        worst = worst.max((q.value - torus_kernel_1d(s + t, x, m)).abs());
    }
    ctx.check("semigroup", worst, 1e-8, "∫ p_s(x − z) p_t(z) dz vs p_{s+t}(x)");

    let mut rng = stream_rng(ctx.stream_seed(1), 0);
    let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u - v).collect::<Vec<_>>();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..5);
        let d = rng.random_range(1..4);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let ss: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let (s, xbar) = gaussian_product_collapse(&xs, &ss)?;
        let lhs: f64 = xs.iter().zip(&ss).map(|(x, si)| pbar(*si, &sub(x, &z))).product();
        let rhs = pbar(s, &sub(&z, &xbar)) / pbar(s, &vec![0.0; d]) * xs.iter().zip(&ss).map(|(x, si)| pbar(*si, &sub(x, &xbar))).product::<f64>();
        worst = worst.max(((lhs - rhs) / lhs).abs());
    }
    ctx.check("product-collapse", worst, 1e-12, "relative, 50 random configurations");

    let comb = Forest::new(vec![Partition::singletons(3), part(&[&[1, 2], &[3]])?, part(&[&[1, 2, 3]])?])?;
    let star = Forest::new(vec![Partition::singletons(3), part(&[&[1, 2, 3]])?])?;
    let trees = if ctx.quick() { 2 } else { 5 };
    let mut worst: f64 = 0.0;
    for _ in 0..trees {
        let t1 = 0.05 + 0.5 * rng.random::<f64>();
        let t2 = t1 + 0.05 + 0.5 * rng.random::<f64>();
        let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
        let leaves: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let (lo, hi) = (-8.0, 8.0);

        let closed = euclidean_tree_integral(&comb, &[0.0, t1, t2], &leaves)?;
        let inner = |z2: f64| {
            integrate(|z1| pbar_1d(t1, x[0] - z1) * pbar_1d(t1, x[1] - z1) * pbar_1d(t2 - t1, z1 - z2), lo, hi, QuadOptions::rel(1e-12))
                .map(|q| q.value * pbar_1d(t2, x[2] - z2))
                .unwrap_or(f64::NAN)
        };
        let num = integrate(inner, lo, hi, QuadOptions::rel(1e-10))?.value;
        worst = worst.max(((closed - num) / num).abs());

        let closed = euclidean_tree_integral(&star, &[0.0, t1], &leaves)?;
        let num = integrate(|z| x.iter().map(|xi| pbar_1d(t1, xi - z)).product::<f64>(), lo, hi, QuadOptions::rel(1e-12))?.value;
        worst = worst.max(((closed - num) / num).abs());
    }
    ctx.check("tree-integral-3-leaves", worst, 1e-6, format!("comb and star trees, {trees} draws each"));
    Ok(())
}
