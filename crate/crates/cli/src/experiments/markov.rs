//! Markov property of the spatial coalescent: restarting the exact sampler
//! from the state at `t₀` gives the same law after `t₀` as running straight.

use xicoal::combinatorics::Forest;
use xicoal::kernels::SpatialConfig;
use xicoal::rates::build_rate_table;
use xicoal::rng::stream_rng;
use xicoal::sampler::{state_at, ExactSampler, SamplerOptions};
use xicoal::Result;

use super::Ctx;
use crate::pool::par_map;
use crate::stats::{chi_square_two_sample, ks_two_sample};

/// Blocks alive at time `s` of a forest with level times `times`.
fn lineages(f: &Forest, times: &[f64], s: f64) -> usize {
    let j = times.iter().rposition(|&t| t <= s).unwrap_or(0);
    f.levels()[j].len()
}

pub(super) fn run(ctx: &mut Ctx) -> Result<()> {
    let n = ctx.spec.n.unwrap_or(3);
    let t0 = ctx.knob("t0", 0.2);
    let t1 = t0 + ctx.knob("gap", 0.3);
    let reps = ctx.replicates(1000);
    let table = build_rate_table(&ctx.spec.measure.to_measure()?, n)?;
    let coords: Vec<Vec<f64>> = (0..n).map(|i| vec![0.1 + 0.8 * i as f64 / n as f64]).collect();
    let x = SpatialConfig::singletons(coords)?;
    // merge-time tables at 1e-4 are still accurate to ~1e-6
    let opts = SamplerOptions {
        rel_tol: 1e-4,
        ..SamplerOptions::default()
    };
    let sampler = ExactSampler::new(&x, &table, &opts)?;

    // (first merge after t₀ if any, lineages at t₁)
    let seed = ctx.stream_seed(1);
    let straight: Vec<(Option<f64>, usize)> = par_map(reps, |r| {
        let df = sampler.draw(&mut stream_rng(seed, r as u64))?;
        let next = df.times.iter().skip(1).find(|&&t| t > t0).copied();
        Ok((next, lineages(&df.forest, &df.times, t1)))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let seed = ctx.stream_seed(2);
    let rerooted: Vec<(Option<f64>, usize)> = par_map(reps, |r| {
        let mut rng = stream_rng(seed, r as u64);
        let df = sampler.draw(&mut rng)?;
        let y = state_at(&df, t0, &mut rng)?;
        if y.len() == 1 {
            return Ok((None, 1));
        }
        let df2 = ExactSampler::new(&y, &table, &opts)?.draw(&mut rng)?;
        Ok((df2.times.get(1).map(|t| t0 + t), lineages(&df2.forest, &df2.times, t1 - t0)))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let times = |v: &[(Option<f64>, usize)]| v.iter().filter_map(|p| p.0).collect::<Vec<f64>>();
    let counts = |v: &[(Option<f64>, usize)]| {
        let mut c = vec![0usize; n];
        for p in v {
            c[p.1 - 1] += 1;
        }
        c
    };
    let (a, b) = (times(&straight), times(&rerooted));
    ctx.test("first-merge-after-t0-ks", ks_two_sample(&a, &b)?, format!("t0 = {t0}, {} vs {} merges", a.len(), b.len()));
    let (ca, cb) = (counts(&straight), counts(&rerooted));
    ctx.test("lineages-at-t1-chi2", chi_square_two_sample(&ca, &cb)?, format!("t1 = {t1}: {ca:?} vs {cb:?}"));
    ctx.samples("straight", "first_merge_after_t0", &a);
    ctx.samples("rerooted", "first_merge_after_t0", &b);
    ctx.samples("straight", "lineages_at_t1", &straight.iter().map(|p| p.1 as f64).collect::<Vec<_>>());
    ctx.samples("rerooted", "lineages_at_t1", &rerooted.iter().map(|p| p.1 as f64).collect::<Vec<_>>());
    Ok(())
}
