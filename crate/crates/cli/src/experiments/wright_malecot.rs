//! Pair coalescence times from the exact sampler against the quadrature CDF
//! of `λ e^{−λt} p_{2t}(Δ) / N`.

use xicoal::kernels::{torus_kernel, KernelMethod, SpatialConfig};
use xicoal::quad::{integrate, QuadOptions};
use xicoal::rates::build_rate_table;
use xicoal::rng::stream_rng;
use xicoal::sampler::{ExactSampler, SamplerOptions};
use xicoal::{Error, Result};

use super::Ctx;
use crate::pool::par_map;
use crate::stats::ks_one_sample;

pub(super) fn run(ctx: &mut Ctx) -> Result<()> {
    let d = ctx.spec.d.unwrap_or(1);
    let delta = ctx.knob("delta", 0.3);
    let reps = ctx.replicates(10_000);
    let table = build_rate_table(&ctx.spec.measure.to_measure()?, 2)?;
    let lambda = table.total(2);
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument("the pair never coalesces under this measure".into()));
    }
    let mut disp = vec![0.0; d];
    disp[0] = delta;
    let x = SpatialConfig::singletons(vec![vec![0.0; d], disp.clone()])?;

    let sampler = ExactSampler::new(&x, &table, &SamplerOptions::default())?;
    let seed = ctx.stream_seed(1);
    let draws: Vec<f64> = par_map(reps, |r| sampler.draw(&mut stream_rng(seed, r as u64)).map(|df| df.times[1])).into_iter().collect::<Result<_>>()?;

    let dens = |s: f64| lambda * (-lambda * s).exp() * torus_kernel(2.0 * s, &disp, KernelMethod::default()).unwrap_or(f64::NAN);
    let opts = QuadOptions::rel(1e-11);
    let mut sorted = draws.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut cum = Vec::with_capacity(reps);
    let mut acc = 0.0;
    let mut prev = 0.0;
    for &t in &sorted {
        if t > prev {
            acc += integrate(dens, prev, t, opts)?.value;
            prev = t;
        }
        cum.push(acc);
    }
    let tail_end = prev.max(1.0) + 60.0 / lambda;
    let total = acc + integrate(dens, prev, tail_end, opts)?.value;
    let cdf = |t: f64| {
        let i = sorted.partition_point(|&s| s < t);
        cum[i.min(reps - 1)] / total
    };
    let r = ks_one_sample(&draws, cdf)?;
    ctx.test("merge-time-ks", r, format!("{reps} draws, Δ = {delta}, d = {d}"));
    ctx.samples("exact-sampler", "merge_time", &draws);
    Ok(())
}
