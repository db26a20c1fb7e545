//! Identities of the normalising function `N`.

use xicoal::combinatorics::Partition;
use xicoal::kernels::{torus_kernel_1d, KernelMethod, SpatialConfig, TorusPoint};
use xicoal::normalization::{normalization_n, pair_n_closed, NormMethod, NormOptions};
use xicoal::quad::{integrate, QuadOptions};
use xicoal::rates::{build_rate_table, LambdaMeasure, Measure};
use xicoal::Result;

use super::Ctx;

fn points(xs: &[f64]) -> Result<SpatialConfig> {
    SpatialConfig::singletons(xs.iter().map(|&x| vec![x]).collect())
}

/// Combined σ. A quadrature estimate counts with its requested relative
/// tolerance; its Gauss–Kronrod error estimate is not a standard error.
fn sigma(errs: &[f64]) -> f64 {
    errs.iter().map(|e| e * e).sum::<f64>().sqrt()
}

pub(super) fn run(ctx: &mut Ctx) -> Result<()> {
    let quick = ctx.quick();
    let kingman = build_rate_table(&Measure::kingman(), 4)?;
    let quad = |rel_tol: f64| NormOptions {
        method: NormMethod::Quadrature,
        rel_tol,
        ..NormOptions::default()
    };

    if ctx.first_attempt() {
        let mut dev: f64 = 0.0;
        let single = [
            SpatialConfig::singletons(vec![vec![0.3]])?,
            SpatialConfig::singletons(vec![vec![0.3, 0.9]])?,
            SpatialConfig::new(Partition::new(vec![vec![1, 2, 3]])?, vec![TorusPoint::new(vec![0.1])])?,
        ];
        let beta = build_rate_table(&Measure::Lambda(LambdaMeasure::uniform(1.0)), 4)?;
        for x in &single {
            for t in [&kingman, &beta] {
                for opts in [NormOptions::default(), quad(1e-7), NormOptions::monte_carlo(100, 1)] {
                    dev = dev.max((normalization_n(x, t, &opts)?.value - 1.0).abs());
                }
            }
        }
        ctx.check("single-block-is-one", dev, 0.0, "every method, d ∈ {1, 2}");

        for delta in [0.05, 0.3, 0.5] {
            let est = normalization_n(&points(&[0.0, delta])?, &kingman, &quad(1e-10))?;
            // ∫ e^{−t} p_{2t}(Δ) dt, split where the integrand changes scale
            let f = |t: f64| (-t).exp() * torus_kernel_1d(2.0 * t, delta, KernelMethod::default());
            let mut oracle = 0.0;
            for (a, b) in [(0.0, 0.01), (0.01, 1.0), (1.0, 10.0), (10.0, 60.0)] {
                oracle += integrate(f, a, b, QuadOptions::rel(1e-12))?.value;
            }
            let s = sigma(&[1e-10 * est.value, 1e-12 * oracle]);
            ctx.within_3_sigma(&format!("pair-quadrature-delta-{delta}"), est.value, oracle, s, false, "N vs ∫ e^{−t} p_{2t}(Δ) dt");
            let closed = pair_n_closed(1.0, delta);
            ctx.check(&format!("pair-closed-form-delta-{delta}"), (closed / oracle - 1.0).abs(), 1e-9, "closed form vs quadrature");
        }
    }

    let samples = if quick { 20_000 } else { 200_000 };
    let est = normalization_n(&points(&[0.0, 0.3])?, &kingman, &NormOptions::monte_carlo(samples, ctx.stream_seed(1)))?;
    let closed = pair_n_closed(1.0, 0.3);
    ctx.within_3_sigma("pair-monte-carlo", est.value, closed, est.std_error, true, format!("{samples} non-spatial draws"));

    if !ctx.first_attempt() {
        return Ok(());
    }
    let mixture = Measure::Lambda(LambdaMeasure {
        atoms: vec![(0.0, 0.5), (0.5, 1.0)],
        density: None,
    });
    let mut cases = vec![("kingman", kingman.clone())];
    if !quick {
        cases.push(("kingman-plus-dirac", build_rate_table(&mixture, 4)?));
    }
    let (inner, outer) = if quick { (1e-5, 1e-4) } else { (1e-8, 1e-7) };
    let (x1, x2) = (0.2, 0.5);
    for (name, t) in cases {
        let pair = normalization_n(&points(&[x1, x2])?, &t, &quad(1e-10))?;
        let mut failure = None;
        let h = |y: f64| normalization_n(&points(&[x1, x2, y])?, &t, &quad(inner)).map(|e| e.value);
        let mut total = 0.0;
        // N(x₁, x₂, ·) has kinks at the conditioning points
        for (a, b) in [(0.0, x1), (x1, x2), (x2, 1.0)] {
            let q = integrate(
                |y| {
                    h(y).unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        f64::NAN
                    })
                },
                a,
                b,
                QuadOptions::rel(outer),
            );
            if let Some(e) = failure.take() {
                return Err(e);
            }
            total += q?.value;
        }
        let s = sigma(&[outer * total, inner * total, 1e-10 * pair.value]);
        ctx.within_3_sigma(&format!("marginal-identity-{name}"), total, pair.value, s, false, format!("∫ N(x₁, x₂, y) dy vs N(x₁, x₂), diff {:e}", total - pair.value));
    }
    Ok(())
}
