//! Stationarity of the resampling reversal and its agreement with the
//! time-reversed forward model.

use xicoal::kernels::{centered, TorusPoint};
use xicoal::rates::build_rate_table;
use xicoal::rng::stream_rng;
use xicoal::Result;
use xicoal_forward::{cannings_simulate, OffspringLaw, RunOptions};
use xicoal_reversal::{simulate_reversal, write_epochs_csv, write_observations_csv, ReversalOptions, ReversalRun};

use super::Ctx;
use crate::pool::par_map;
use crate::stats::{energy_distance, ks_two_sample};

fn gap(a: &TorusPoint, b: &TorusPoint) -> f64 {
    centered(b.coords()[0] - a.coords()[0])
}

pub(super) fn run(ctx: &mut Ctx) -> Result<()> {
    let n = ctx.spec.n.unwrap_or(2);
    let horizon = ctx.spec.horizon.unwrap_or(2.0);
    let reps = ctx.replicates(1000);
    let big_n = ctx.knob("population", 30.0) as usize;
    let steps = 4;
    let dt = horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();

    let measure = ctx.spec.measure.to_measure()?;
    let table = build_rate_table(&measure, n)?;
    let mut opts = ReversalOptions::new(horizon);
    opts.observe = times.clone();
    let seed = ctx.stream_seed(1);
    let runs: Vec<ReversalRun> = par_map(reps, |r| simulate_reversal(&table, n, 1, &opts, &mut stream_rng(seed, r as u64))).into_iter().collect::<Result<_>>()?;

    if ctx.first_attempt() {
        let bad = runs
            .iter()
            .filter(|run| {
                run.observations.len() != times.len()
                    || run.observations.iter().any(|(_, p)| p.len() != n)
                    || run.trace.iter().any(|s| s.positions.len() != n)
                    || run.final_state.positions.len() != n
                    || run.epochs.windows(2).any(|w| w[1].start < w[0].start)
            })
            .count();
        ctx.check_that("level-count-constant", bad as f64, bad == 0, format!("{n} levels in every state of {reps} runs"));
    }

    // disjoint halves keep the two samples independent
    let half = reps / 2;
    let flat = |ps: &[TorusPoint]| ps.iter().flat_map(|p| p.coords().to_vec()).collect::<Vec<f64>>();
    let start: Vec<Vec<f64>> = runs[..half].iter().map(|r| flat(&r.observations[0].1)).collect();
    let end: Vec<Vec<f64>> = runs[half..2 * half].iter().map(|r| flat(&r.observations[steps].1)).collect();
    ctx.test("start-vs-horizon-energy", energy_distance(&start, &end, 499, ctx.stream_seed(2))?, format!("{half} vs {half} runs, positions of all levels"));

    // Cannings levels coincide with lookdown levels, so its first n levels
    // read backward from time 0 should match the reversal
    let cannings: Vec<Vec<Vec<TorusPoint>>> = if n == 2 && ctx.spec.measure == xicoal::rates::MeasureSpec::kingman() {
        let law = OffspringLaw::PairResampling { n: big_n };
        let t_n = (big_n * (big_n - 1) / 2) as f64;
        let seed = ctx.stream_seed(3);
        par_map(reps, |r| {
            let run = cannings_simulate(&law, t_n, &RunOptions::new(1, horizon).record(dt, n), &mut stream_rng(seed, r as u64))?;
            Ok(run.trajectories.iter().rev().cloned().collect())
        })
        .into_iter()
        .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    for (k, &s) in times.iter().enumerate() {
        let rev_sep: Vec<f64> = runs.iter().map(|r| gap(&r.observations[k].1[0], &r.observations[k].1[1])).collect();
        ctx.samples(&format!("reversal-t{s}"), "separation", &rev_sep);
        if cannings.is_empty() {
            continue;
        }
        let fwd_sep: Vec<f64> = cannings.iter().map(|c| gap(&c[k][0], &c[k][1])).collect();
        ctx.test(&format!("separation-ks-t{s}"), ks_two_sample(&rev_sep, &fwd_sep)?, "level 2 − level 1");
        ctx.samples(&format!("cannings-t{s}"), "separation", &fwd_sep);
        if k == 0 {
            continue;
        }
        for l in 0..n {
            let rev: Vec<f64> = runs.iter().map(|r| gap(&r.observations[0].1[l], &r.observations[k].1[l])).collect();
            let fwd: Vec<f64> = cannings.iter().map(|c| gap(&c[0][l], &c[k][l])).collect();
            ctx.test(&format!("level{}-displacement-ks-t{s}", l + 1), ks_two_sample(&rev, &fwd)?, "displacement since time 0");
        }
    }

    if ctx.first_attempt() {
        for (r, run) in runs.iter().take(50).enumerate() {
            ctx.with_csv("events.csv", |w, header| write_epochs_csv(w, r, run, header))?;
            ctx.with_csv("trajectories.csv", |w, header| write_observations_csv(w, r, run, header))?;
        }
    }
    Ok(())
}
