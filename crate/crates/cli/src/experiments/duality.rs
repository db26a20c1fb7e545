//! Genealogies extracted from the forward Cannings model against the exact
//! spatial coalescent with rates `T_N p^N`, started from the same positions.

use xicoal::combinatorics::Partition;
use xicoal::kernels::centered;
use xicoal::rng::stream_rng;
use xicoal::sampler::{write_events_csv, write_paths_csv, CoalescentPath, ExactSampler, SamplerOptions};
use xicoal::Result;
use xicoal_forward::{cannings_rate_table, cannings_simulate, extract_genealogy, OffspringLaw, RunOptions};

use super::Ctx;
use crate::pool::par_map;
use crate::stats::{chi_square_two_sample, energy_distance, ks_two_sample};

struct Pair {
    forward: (f64, f64, usize),
    exact: (f64, f64, usize),
    genealogy: CoalescentPath,
}

/// Index of the first-merge partition among the coarsenings of `n` singletons.
fn category(p: &Partition, cats: &[Partition]) -> usize {
    cats.iter().position(|c| c == p).expect("a coarsening")
}

pub(super) fn run(ctx: &mut Ctx) -> Result<()> {
    let big_n = ctx.knob("population", 30.0) as usize;
    let dim = ctx.spec.d.unwrap_or(1);
    let horizon = ctx.spec.horizon.unwrap_or(25.0);
    let law = OffspringLaw::PairResampling { n: big_n };
    let t_n = (big_n * (big_n - 1) / 2) as f64;
    let sizes: Vec<usize> = match ctx.spec.n {
        Some(n) => vec![n],
        None => vec![2, 3],
    };
    let opts = SamplerOptions {
        rel_tol: 1e-5,
        ..SamplerOptions::default()
    };
    for (tag, &n) in sizes.iter().enumerate() {
        let reps = ctx.replicates(if n == 2 { 1000 } else { 500 });
        let (table, _) = cannings_rate_table(&law, t_n, n, 0)?;
        let cats = xicoal::combinatorics::enumerate_coarsenings(&Partition::singletons(n));
        let seed = ctx.stream_seed(tag as u64);
        let rows: Vec<Pair> = par_map(reps, |r| -> Result<Pair> {
            let mut rng = stream_rng(seed, r as u64);
            let run = cannings_simulate(&law, t_n, &RunOptions::new(dim, horizon).record(horizon, n), &mut rng)?;
            let g = extract_genealogy(&run, n)?;
            let x = g.path.start.clone();
            let origin = |block_min: u32| x.positions()[block_min as usize - 1].clone();
            let forward = match g.path.events.first() {
                Some(e) => {
                    let (b, loc) = &e.locations[0];
                    (e.time, centered(origin(b.labels()[0]).displacement_to(loc)[0]), category(&e.partition, &cats))
                }
                None => (f64::INFINITY, 0.0, 0),
            };
            let df = ExactSampler::new(&x, &table, &opts)?.draw(&mut rng)?;
            let node = df.forest.nodes_born_at(1).next().expect("a first merge");
            let block = &df.forest.nodes()[node].block;
            let exact = (
                df.times[1],
                centered(origin(block.labels()[0]).displacement_to(&df.xi[node])[0]),
                category(&df.forest.levels()[1], &cats),
            );
            Ok(Pair { forward, exact, genealogy: g.path })
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let incomplete = rows.iter().filter(|p| !p.forward.0.is_finite()).count();
        let rows: Vec<&Pair> = rows.iter().filter(|p| p.forward.0.is_finite()).collect();
        let col = |f: &dyn Fn(&Pair) -> f64| rows.iter().map(|p| f(p)).collect::<Vec<f64>>();
        let (ft, et) = (col(&|p| p.forward.0), col(&|p| p.exact.0));
        let (fl, el) = (col(&|p| p.forward.1), col(&|p| p.exact.1));
        let note = format!("N = {big_n}, {} replicates, {incomplete} without a merge in the horizon", rows.len());

        ctx.test(&format!("n{n}-first-merge-time-ks"), ks_two_sample(&ft, &et)?, note.clone());
        ctx.test(&format!("n{n}-displacement-ks"), ks_two_sample(&fl, &el)?, note.clone());
        if n > 2 {
            let (mut a, mut b) = (vec![0usize; cats.len()], vec![0usize; cats.len()]);
            for p in &rows {
                a[p.forward.2] += 1;
                b[p.exact.2] += 1;
            }
            ctx.test(&format!("n{n}-block-structure-chi2"), chi_square_two_sample(&a, &b)?, format!("{a:?} vs {b:?}"));
        }
        let joint = |t: &[f64], l: &[f64]| t.iter().zip(l).map(|(&u, &v)| vec![u, v]).collect::<Vec<_>>();
        let (fj, ej) = (joint(&ft, &fl), joint(&et, &el));
        let m = fj.len().min(400);
        ctx.diagnostic(&format!("n{n}-joint-energy"), energy_distance(&fj[..m], &ej[..m], 199, ctx.stream_seed(50 + tag as u64))?, "(time, displacement)");

        let series = format!("n{n}");
        ctx.samples(&format!("{series}-forward"), "merge_time", &ft);
        ctx.samples(&format!("{series}-forward"), "displacement", &fl);
        ctx.samples(&format!("{series}-exact"), "merge_time", &et);
        ctx.samples(&format!("{series}-exact"), "displacement", &el);
        // extracted genealogies of the first few replicates of the first size
        if ctx.first_attempt() && tag == 0 {
            for (r, p) in rows.iter().take(20).enumerate() {
                ctx.with_csv("events.csv", |w, header| write_events_csv(w, r, &p.genealogy, header))?;
                ctx.with_csv("trajectories.csv", |w, header| write_paths_csv(w, r, &p.genealogy, header))?;
            }
        }
    }
    Ok(())
}
