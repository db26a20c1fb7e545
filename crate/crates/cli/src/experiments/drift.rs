//! The drift `∇ log N`: finite differences, the small-separation scaling of
//! the pair drift in `d = 2`, and the Euler–Maruyama sampler built on it.

use rand::Rng;
use xicoal::kernels::SpatialConfig;
use xicoal::normalization::{grad_log_n, normalization_n, pair_n_with_grad, NormMethod, NormOptions};
use xicoal::rates::{build_rate_table, Measure, RateTable};
use xicoal::rng::stream_rng;
use xicoal::sampler::{sde_sample, ExactSampler, MergeRule, PairDriftTable, SamplerOptions, SdeOptions};
use xicoal::Result;

use super::Ctx;
use crate::pool::par_map;
use crate::stats::ks_two_sample;

fn random_config<R: Rng>(n: usize, d: usize, min_sep: f64, rng: &mut R) -> Result<SpatialConfig> {
    loop {
        let x = SpatialConfig::singletons((0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect())?;
        if x.min_separation() >= min_sep {
            return Ok(x);
        }
    }
}

/// Largest deviation from central differences of `log N`, relative to the
/// largest gradient component.
fn fd_error(x: &SpatialConfig, t: &RateTable, opts: &NormOptions, h: f64) -> Result<f64> {
    let g = grad_log_n(x, t, opts)?.grad;
    let log_n = |y: &SpatialConfig| normalization_n(y, t, opts).map(|e| e.value.ln());
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1e-12;
    for (i, gi) in g.iter().enumerate() {
        for (c, &gic) in gi.iter().enumerate() {
            let mut e = vec![0.0; x.dim()];
            e[c] = h;
            let plus = x.with_position(i, x.positions()[i].shifted(&e));
            e[c] = -h;
            let minus = x.with_position(i, x.positions()[i].shifted(&e));
            let fd = (log_n(&plus)? - log_n(&minus)?) / (2.0 * h);
            worst = worst.max((fd - gic).abs());
            scale = scale.max(gic.abs());
        }
    }
    Ok(worst / scale)
}

pub(super) fn run(ctx: &mut Ctx) -> Result<()> {
    let quick = ctx.quick();
    let kingman2 = build_rate_table(&Measure::kingman(), 2)?;

    if ctx.first_attempt() {
        let kingman3 = build_rate_table(&Measure::kingman(), 3)?;
        let opts = NormOptions {
            method: NormMethod::Quadrature,
            rel_tol: 1e-9,
            ..NormOptions::default()
        };
        let mut rng = stream_rng(ctx.stream_seed(1), 0);
        let per_kind = if quick { 1 } else { 5 };
        let mut worst: f64 = 0.0;
        for _ in 0..per_kind {
            worst = worst.max(fd_error(&random_config(3, 1, 0.05, &mut rng)?, &kingman3, &opts, 1e-3)?);
            worst = worst.max(fd_error(&random_config(2, 2, 0.05, &mut rng)?, &kingman2, &opts, 1e-3)?);
        }
        ctx.check("gradient-vs-finite-differences", worst, 1e-3, format!("{} configurations (d = 1, n = 3 and d = 2, n = 2), h = 1e-3", 2 * per_kind));

        let rs: Vec<f64> = (0..9).map(|i| 0.02 * 5f64.powf(i as f64 / 8.0)).collect();
        let (lx, ly): (Vec<f64>, Vec<f64>) = rs
            .iter()
            .map(|&r| {
                let (v, g) = pair_n_with_grad(1.0, &[r, 0.0]);
                (r.ln(), (g[0].hypot(g[1]) / v).ln())
            })
            .unzip();
        let (mx, my) = (lx.iter().sum::<f64>() / 9.0, ly.iter().sum::<f64>() / 9.0);
        let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
        ctx.check("pair-drift-slope", (slope + 1.0).abs(), 0.15, format!("log–log slope {slope:.4} over r ∈ [0.02, 0.1]"));
        ctx.samples("pair-drift", "log_r", &lx);
        ctx.samples("pair-drift", "log_drift", &ly);
    }

    let reps = ctx.replicates(if quick { 40 } else { 400 });
    let x = SpatialConfig::singletons(vec![vec![0.2, 0.2], vec![0.3, 0.2]])?;
    let table = PairDriftTable::new(kingman2.total(2), 128);
    let exact = ExactSampler::new(&x, &kingman2, &SamplerOptions::default())?;
    let seed = ctx.stream_seed(2);
    let exact_t: Vec<f64> = par_map(reps, |r| exact.draw(&mut stream_rng(seed, r as u64)).map(|df| df.times[1])).into_iter().collect::<Result<_>>()?;

    let sde = |rule: MergeRule, seed: u64| -> Result<Vec<f64>> {
        let opts = SdeOptions { rule, ..SdeOptions::default() };
        par_map(reps, |r| {
            let p = sde_sample(&x, &kingman2, &opts, Some(&table), &mut stream_rng(seed, r as u64))?;
            Ok(p.first_merge_time().unwrap_or(f64::INFINITY))
        })
        .into_iter()
        .collect()
    };
    let mean_t = sde(MergeRule::Mean, ctx.stream_seed(3))?;
    ctx.test("sde-mean-merge-ks", ks_two_sample(&mean_t, &exact_t)?, format!("dt = 1e-4, radius 5e-3, {reps} paths; discretisation-limited"));
    let handoff_t = sde(MergeRule::ExactHandoff, ctx.stream_seed(4))?;
    ctx.diagnostic("sde-exact-handoff-ks", ks_two_sample(&handoff_t, &exact_t)?, "same drift, exact merge on entering the radius");

    ctx.samples("exact", "merge_time", &exact_t);
    ctx.samples("sde-mean", "merge_time", &mean_t);
    ctx.samples("sde-handoff", "merge_time", &handoff_t);
    Ok(())
}
