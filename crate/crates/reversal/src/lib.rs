//! The `n`-level spatial coalescent with resampling: run the exact
//! coalescent to its first merge, refill the vacated levels from the
//! conditional stationary law, repeat. Its law is the time reversal of the
//! first `n` levels of the dual forward model.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use xicoal::combinatorics::{merger_signature, Block, MergerSignature, Partition};
use xicoal::kernels::{SpatialConfig, TorusPoint};
use xicoal::normalization::{sample_mu, sample_stationary, MuOptions};
use xicoal::rates::RateTable;
use xicoal::sampler::{states_at, ExactSampler, SamplerOptions};
use xicoal::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversalState {
    /// Positions of levels `1..=n`.
    pub positions: Vec<TorusPoint>,
    /// Completed merge-and-resample cycles.
    pub epoch: usize,
    pub clock: f64,
}

/// One cycle: exact coalescent from `start` until its first merge (or the
/// horizon), followed by resampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub index: usize,
    pub start: f64,
    /// Clock time of the merge ending this epoch; `None` if the horizon came first.
    pub merge_time: Option<f64>,
    pub signature: Option<MergerSignature>,
    /// Partition right after the merge.
    pub merged: Option<Partition>,
    pub resampled_levels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReversalOptions {
    pub horizon: f64,
    /// Clock times at which all level positions are reported, increasing.
    pub observe: Vec<f64>,
    pub sampler: SamplerOptions,
    pub mu: MuOptions,
}

impl ReversalOptions {
    pub fn new(horizon: f64) -> Self {
        ReversalOptions {
            horizon,
            observe: Vec::new(),
            sampler: SamplerOptions::default(),
            mu: MuOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReversalRun {
    pub n: usize,
    pub dim: usize,
    pub epochs: Vec<Epoch>,
    /// Initial state and the state after every resampling.
    pub trace: Vec<ReversalState>,
    /// `(clock, positions of levels 1..=n)` at each requested time.
    pub observations: Vec<(f64, Vec<TorusPoint>)>,
    pub final_state: ReversalState,
}

/// Refill a post-merge configuration to `n` singleton levels. Each block
/// keeps its position at its lowest label; the remaining labels are drawn
/// in ascending order from `μ` given every position placed so far.
/// Returns the level positions and the redrawn labels.
pub fn resample_levels<R: Rng + ?Sized>(post: &SpatialConfig, t: &RateTable, mu: &MuOptions, rng: &mut R) -> Result<(Vec<TorusPoint>, Vec<u32>)> {
    let n = post.partition().ground_set().len();
    let mut slots: Vec<Option<TorusPoint>> = vec![None; n];
    for (b, p) in post.partition().blocks().iter().zip(post.positions()) {
        slots[Block::min(b) as usize - 1] = Some(p.clone());
    }
    if post.partition().ground_set() != (1..=n as u32).collect::<Vec<_>>() {
        return Err(Error::InvalidPartition("levels must be labelled 1..n".into()));
    }
    let vacated: Vec<u32> = (1..=n as u32).filter(|&l| slots[l as usize - 1].is_none()).collect();
    for &l in &vacated {
        let placed: Vec<Vec<f64>> = slots.iter().flatten().map(|p| p.coords().to_vec()).collect();
        let y = sample_mu(&SpatialConfig::singletons(placed)?, t, mu, rng)?;
        slots[l as usize - 1] = Some(y);
    }
    Ok((slots.into_iter().map(|p| p.expect("filled")).collect(), vacated))
}

/// Run from a stationary start (levels drawn sequentially from `μ`).
pub fn simulate_reversal<R: Rng + ?Sized>(t: &RateTable, n: usize, d: usize, opts: &ReversalOptions, rng: &mut R) -> Result<ReversalRun> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("need n ≥ 1 and d ≥ 1".into()));
    }
    let x = sample_stationary(n, d, t, &opts.mu, rng)?;
    simulate_reversal_from(&x, t, opts, rng)
}

/// Run from given level positions (a singleton configuration labelled `1..n`).
pub fn simulate_reversal_from<R: Rng + ?Sized>(x0: &SpatialConfig, t: &RateTable, opts: &ReversalOptions, rng: &mut R) -> Result<ReversalRun> {
    let n = x0.len();
    if x0.partition() != &Partition::singletons(n) {
        return Err(Error::InvalidPartition("start must be singleton levels 1..n".into()));
    }
    if n > t.n_max() && n > 1 {
        return Err(Error::EnumerationBound(n, t.n_max()));
    }
    if !(opts.horizon > 0.0 && opts.horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon {}", opts.horizon)));
    }
    if opts.observe.windows(2).any(|w| w[1] < w[0]) || opts.observe.iter().any(|&s| !(0.0..=opts.horizon).contains(&s)) {
        return Err(Error::InvalidArgument("observation times must be increasing within [0, horizon]".into()));
    }

    let mut state = ReversalState {
        positions: x0.positions().to_vec(),
        epoch: 0,
        clock: 0.0,
    };
    let mut trace = vec![state.clone()];
    let mut epochs = Vec::new();
    let mut observations = Vec::new();
    let mut next_obs = 0;

    loop {
        let x = SpatialConfig::singletons(state.positions.iter().map(|p| p.coords().to_vec()).collect())?;
        let df = ExactSampler::new(&x, t, &opts.sampler)?.draw(rng)?;
        let merge_at = df.times.get(1).map(|&s| state.clock + s);
        let end = merge_at.map_or(opts.horizon, |m| m.min(opts.horizon));

        // left-continuous: an observation at the merge instant sees the pre-merge state
        let mut local = Vec::new();
        while next_obs < opts.observe.len() && (opts.observe[next_obs] < end || (end == opts.horizon && opts.observe[next_obs] <= end)) {
            local.push(opts.observe[next_obs] - state.clock);
            next_obs += 1;
        }
        let n_obs = local.len();
        local.push(match df.times.get(1) {
            Some(&s) if state.clock + s < opts.horizon => s,
            _ => opts.horizon - state.clock,
        });
        let states = states_at(&df, &local, rng)?;
        for (s, st) in local[..n_obs].iter().zip(&states) {
            observations.push((state.clock + s, st.positions().to_vec()));
        }
        let last = states.last().expect("end state");

        match merge_at {
            Some(m) if m < opts.horizon => {
                let p0 = Partition::singletons(n);
                let sig = merger_signature(&p0, last.partition())?;
                let (positions, vacated) = resample_levels(last, t, &opts.mu, rng)?;
                epochs.push(Epoch {
                    index: state.epoch,
                    start: state.clock,
                    merge_time: Some(m),
                    signature: Some(sig),
                    merged: Some(last.partition().clone()),
                    resampled_levels: vacated,
                });
                state = ReversalState {
                    positions,
                    epoch: state.epoch + 1,
                    clock: m,
                };
                trace.push(state.clone());
            }
            _ => {
                epochs.push(Epoch {
                    index: state.epoch,
                    start: state.clock,
                    merge_time: None,
                    signature: None,
                    merged: None,
                    resampled_levels: Vec::new(),
                });
                state = ReversalState {
                    positions: last.positions().to_vec(),
                    epoch: state.epoch,
                    clock: opts.horizon,
                };
                break;
            }
        }
    }
    Ok(ReversalRun {
        n,
        dim: x0.dim(),
        epochs,
        trace,
        observations,
        final_state: state,
    })
}

/// Rows `replicate,epoch,merge_time,signature,resampled_levels` for every
/// completed epoch; resampled levels are separated by `;`.
pub fn write_epochs_csv<W: Write>(w: &mut csv::Writer<W>, replicate: usize, run: &ReversalRun, header: bool) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    if header {
        w.write_record(["replicate", "epoch", "merge_time", "signature", "resampled_levels"]).map_err(io)?;
    }
    for e in &run.epochs {
        let (Some(m), Some(s)) = (e.merge_time, &e.signature) else {
            continue;
        };
        let levels = e.resampled_levels.iter().map(u32::to_string).collect::<Vec<_>>().join(";");
        w.write_record([replicate.to_string(), e.index.to_string(), format!("{m:.12}"), s.to_string(), levels]).map_err(io)?;
    }
    Ok(())
}

/// Rows `replicate,time,level,coord_0,…` for the observed positions.
pub fn write_observations_csv<W: Write>(w: &mut csv::Writer<W>, replicate: usize, run: &ReversalRun, header: bool) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    if header {
        let mut h = vec!["replicate".to_string(), "time".into(), "level".into()];
        h.extend((0..run.dim).map(|c| format!("coord_{c}")));
        w.write_record(&h).map_err(io)?;
    }
    for (s, ps) in &run.observations {
        for (l, p) in ps.iter().enumerate() {
            let mut row = vec![replicate.to_string(), format!("{s:.12}"), (l + 1).to_string()];
            row.extend(p.coords().iter().map(|c| format!("{c:.12}")));
            w.write_record(&row).map_err(io)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use xicoal::normalization::{mu_grid_density, NormOptions};
    use xicoal::rates::{build_rate_table, Measure};
    use xicoal::rng::stream_rng;

    fn kingman(n: usize) -> RateTable {
        build_rate_table(&Measure::kingman(), n).unwrap()
    }

    #[test]
    fn merge_of_lowest_pair_redraws_level_two_only() {
        let t = kingman(3);
        let post = SpatialConfig::new(
            Partition::new(vec![vec![1, 2], vec![3]]).unwrap(),
            vec![TorusPoint::new(vec![0.25]), TorusPoint::new(vec![0.7])],
        )
        .unwrap();
        let mut rng = stream_rng(1, 0);
        let (pos, j) = resample_levels(&post, &t, &MuOptions::default(), &mut rng).unwrap();
        assert_eq!(j, vec![2]);
        assert_eq!(pos[0], TorusPoint::new(vec![0.25]));
        assert_eq!(pos[2], TorusPoint::new(vec![0.7]));
        assert_eq!(pos.len(), 3);
    }

    #[test]
    fn redrawn_level_follows_n_profile() {
        // one survivor at 0.2 and one redrawn level; χ² against the grid density
        let t = kingman(2);
        let post = SpatialConfig::new(Partition::new(vec![vec![1, 2]]).unwrap(), vec![TorusPoint::new(vec![0.2])]).unwrap();
        let bins = 20;
        let dens = mu_grid_density(&SpatialConfig::singletons(vec![vec![0.2]]).unwrap(), &t, 2000, &NormOptions::default()).unwrap();
        let expect: Vec<f64> = (0..bins).map(|b| dens[b * 100..(b + 1) * 100].iter().sum::<f64>() / 2000.0).collect();
        let mut rng = stream_rng(2, 0);
        let draws = 4000;
        let mut hist = vec![0usize; bins];
        for _ in 0..draws {
            let (pos, _) = resample_levels(&post, &t, &MuOptions::default(), &mut rng).unwrap();
            hist[((pos[1].coords()[0] * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let chi2: f64 = hist.iter().zip(&expect).map(|(&o, &p)| (o as f64 - draws as f64 * p).powi(2) / (draws as f64 * p)).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "χ² {chi2}, p {p}");
    }

    #[test]
    fn single_level_is_uniform_brownian_motion() {
        let t = kingman(2);
        let reps = 400;
        let mut xs = Vec::new();
        for r in 0..reps {
            let mut rng = stream_rng(3, r);
            let run = simulate_reversal(&t, 1, 1, &ReversalOptions::new(0.3), &mut rng).unwrap();
            assert!(run.epochs.iter().all(|e| e.merge_time.is_none()));
            xs.push(run.final_state.positions[0].coords()[0]);
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let d = xs.iter().enumerate().map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n)).fold(0.0, f64::max);
        assert!(d < 1.628 / n.sqrt(), "KS {d}");
    }

    #[test]
    fn level_count_is_constant_and_clock_increases() {
        let t = kingman(3);
        let mut rng = stream_rng(4, 0);
        let mut opts = ReversalOptions::new(1.5);
        opts.observe = vec![0.0, 0.5, 1.0, 1.5];
        opts.sampler.rel_tol = 1e-4;
        opts.mu.norm.rel_tol = 1e-4;
        let run = simulate_reversal(&t, 3, 1, &opts, &mut rng).unwrap();
        assert!(run.epochs.len() > 1);
        assert!(run.trace.iter().all(|s| s.positions.len() == 3));
        assert!(run.observations.iter().all(|o| o.1.len() == 3));
        assert_eq!(run.observations.len(), 4);
        for w in run.trace.windows(2) {
            assert!(w[1].clock > w[0].clock);
            assert_eq!(w[1].epoch, w[0].epoch + 1);
        }
        for e in &run.epochs {
            if let (Some(m), Some(p)) = (e.merge_time, &e.merged) {
                let mins: Vec<u32> = p.blocks().iter().map(Block::min).collect();
                assert!(e.resampled_levels.iter().all(|l| !mins.contains(l)));
                assert_eq!(e.resampled_levels.len() + p.len(), 3);
                assert!(m > e.start);
            }
        }
        let mut buf = csv::Writer::from_writer(Vec::new());
        write_epochs_csv(&mut buf, 0, &run, true).unwrap();
        let text = String::from_utf8(buf.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().count(), run.epochs.len());
    }
}
