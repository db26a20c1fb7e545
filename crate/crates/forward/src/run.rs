//! Forward simulation of the spatial Cannings model and the lookdown
//! particle system on the torus.
//!
//! Levels move as independent Brownian motions, advanced lazily: a level's
//! position is only brought up to date when it is read, overwritten or
//! recorded. At an event every member of a group takes the position of the
//! lowest level in the group.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use xicoal::kernels::{wrap, TorusPoint};
use xicoal::rates::{LambdaMeasure, Measure, XiMeasure};
use xicoal::{Error, Result};

use crate::offspring::{pair_rate, OffspringLaw};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Reproduction,
    Lookdown,
    Atom { index: usize },
}

/// One event. `groups` hold 1-based levels in increasing order; every member
/// copies the first. `sources` is the position of each group's first level
/// at the event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardEvent {
    pub time: f64,
    pub kind: EventKind,
    pub groups: Vec<Vec<u32>>,
    pub sources: Vec<TorusPoint>,
}

impl ForwardEvent {
    /// `(destination, source)` pairs, 1-based.
    pub fn copies(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.groups.iter().flat_map(|g| g[1..].iter().map(move |&d| (d, g[0])))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: String,
    pub seed: Option<u64>,
    pub warm_up: f64,
}

/// A run over `[−horizon, 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardRun {
    pub dim: usize,
    pub levels: usize,
    pub horizon: f64,
    /// Grid times `−horizon + k·record_dt`, ending exactly at 0.
    pub grid: Vec<f64>,
    /// `trajectories[k][ℓ]` is the position of level `ℓ + 1` at `grid[k]`,
    /// for the first `recorded_levels` levels.
    pub trajectories: Vec<Vec<TorusPoint>>,
    pub recorded_levels: usize,
    pub events: Vec<ForwardEvent>,
    pub meta: RunMeta,
}

impl ForwardRun {
    /// Positions of all recorded levels at time 0.
    pub fn final_positions(&self) -> &[TorusPoint] {
        self.trajectories.last().expect("grid ends at 0")
    }

    /// Recorded position of `level` (1-based) at grid index `k`.
    pub fn position(&self, k: usize, level: u32) -> &TorusPoint {
        &self.trajectories[k][level as usize - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub dim: usize,
    pub horizon: f64,
    /// Recording step; the grid always contains `−horizon` and 0.
    pub record_dt: f64,
    /// Number of lowest levels whose trajectories are recorded (capped at
    /// the number of levels).
    pub record_levels: usize,
    /// Overrides the default warm-up `max(20, 10/λ₂)`.
    pub warm_up: Option<f64>,
    pub seed: Option<u64>,
}

impl RunOptions {
    pub fn new(dim: usize, horizon: f64) -> Self {
        RunOptions {
            dim,
            horizon,
            record_dt: horizon,
            record_levels: usize::MAX,
            warm_up: None,
            seed: None,
        }
    }

    pub fn record(mut self, dt: f64, levels: usize) -> Self {
        self.record_dt = dt;
        self.record_levels = levels;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon {}", self.horizon)));
        }
        if !(self.record_dt > 0.0) {
            return Err(Error::InvalidArgument(format!("record step {}", self.record_dt)));
        }
        if let Some(w) = self.warm_up {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("warm-up {w}")));
            }
        }
        Ok(())
    }
}

fn warm_up_length(pair_rate: f64) -> f64 {
    if pair_rate > 0.0 {
        (10.0 / pair_rate).max(20.0)
    } else {
        20.0
    }
}

/// Lazily advanced torus Brownian motions.
struct Particles {
    pos: Vec<Vec<f64>>,
    last: Vec<f64>,
}

impl Particles {
    fn uniform<R: Rng + ?Sized>(levels: usize, dim: usize, t0: f64, rng: &mut R) -> Self {
        Particles {
            pos: (0..levels).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect(),
            last: vec![t0; levels],
        }
    }

    fn advance<R: Rng + ?Sized>(&mut self, i: usize, t: f64, rng: &mut R) {
        let dt = t - self.last[i];
        if dt > 0.0 {
            let sd = dt.sqrt();
            for c in self.pos[i].iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *c = wrap(*c + sd * z);
            }
        }
        self.last[i] = t;
    }

    /// Apply one event at time `t`; returns the source positions.
    fn apply<R: Rng + ?Sized>(&mut self, groups: &[Vec<u32>], t: f64, rng: &mut R) -> Vec<TorusPoint> {
        let mut sources = Vec::with_capacity(groups.len());
        for g in groups {
            let src = g[0] as usize - 1;
            self.advance(src, t, rng);
            for &d in &g[1..] {
                let d = d as usize - 1;
                self.pos[d] = self.pos[src].clone();
                self.last[d] = t;
            }
            sources.push(TorusPoint::new(self.pos[src].clone()));
        }
        sources
    }

    fn snapshot<R: Rng + ?Sized>(&mut self, k: usize, t: f64, rng: &mut R) -> Vec<TorusPoint> {
        (0..k)
            .map(|i| {
                self.advance(i, t, rng);
                TorusPoint::new(self.pos[i].clone())
            })
            .collect()
    }
}

fn grid(horizon: f64, dt: f64) -> Vec<f64> {
    let steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut g: Vec<f64> = (0..steps).map(|k| -horizon + k as f64 * dt).collect();
    g.push(0.0);
    g
}

/// Shared driver: Poisson events at total rate `rate`, each drawn by `draw`.
fn drive<R, F>(levels: usize, rate: f64, opts: &RunOptions, warm: f64, model: String, rng: &mut R, mut draw: F) -> Result<ForwardRun>
where
    R: RngCore,
    F: FnMut(&mut R) -> Result<(EventKind, Vec<Vec<u32>>)>,
{
    opts.validate()?;
    let start = -opts.horizon - warm;
    let mut parts = Particles::uniform(levels, opts.dim, start, rng);
    let times = grid(opts.horizon, opts.record_dt);
    let rec = opts.record_levels.min(levels);
    let mut traj = Vec::with_capacity(times.len());
    let mut events = Vec::new();
    let gap = if rate > 0.0 { Some(Exp::new(rate).map_err(|e| Error::InvalidRate(e.to_string()))?) } else { None };

    let mut t = start;
    let mut next_grid = 0;
    loop {
        let next = match &gap {
            Some(g) => t + g.sample(rng),
            None => f64::INFINITY,
        };
        while next_grid < times.len() && times[next_grid] <= next {
            traj.push(parts.snapshot(rec, times[next_grid], rng));
            next_grid += 1;
        }
        if next > 0.0 {
            break;
        }
        t = next;
        let (kind, groups) = draw(rng)?;
        let sources = parts.apply(&groups, t, rng);
        if t >= -opts.horizon {
            events.push(ForwardEvent { time: t, kind, groups, sources });
        }
    }
    Ok(ForwardRun {
        dim: opts.dim,
        levels,
        horizon: opts.horizon,
        grid: times,
        trajectories: traj,
        recorded_levels: rec,
        events,
        meta: RunMeta {
            model,
            seed: opts.seed,
            warm_up: warm,
        },
    })
}

/// Spatial Cannings model with `N` levels: at rate `t_n` draw an offspring
/// vector, split the levels uniformly into families of those sizes, and let
/// each family copy its lowest level.
pub fn cannings_simulate<R: RngCore>(law: &OffspringLaw, t_n: f64, opts: &RunOptions, rng: &mut R) -> Result<ForwardRun> {
    law.validate()?;
    if !(t_n >= 0.0 && t_n.is_finite()) {
        return Err(Error::InvalidArgument(format!("event rate {t_n}")));
    }
    let big_n = law.population();
    let warm = match opts.warm_up {
        Some(w) => w,
        None => warm_up_length(pair_rate(law, t_n, rng)?),
    };
    let mut perm: Vec<u32> = (1..=big_n as u32).collect();
    drive(big_n, t_n, opts, warm, law.name(), rng, |rng| {
        let sizes = law.family_sizes(rng)?;
        // partial Fisher-Yates: the first Σ sizes entries are a uniform draw
        let used: usize = sizes.iter().sum();
        for i in 0..used {
            let j = rng.random_range(i..big_n);
            perm.swap(i, j);
        }
        let mut groups = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for s in sizes {
            let mut g = perm[at..at + s].to_vec();
            g.sort_unstable();
            groups.push(g);
            at += s;
        }
        Ok((EventKind::Reproduction, groups))
    })
}

/// Lookdown construction for the first `n` levels of a Λ- or Ξ-Fleming-Viot
/// process with a Kingman part and finitely many atoms.
pub fn lookdown_simulate<R: RngCore>(measure: &Measure, n: usize, opts: &RunOptions, rng: &mut R) -> Result<ForwardRun> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one level".into()));
    }
    measure.validate()?;
    let xi: XiMeasure = match measure {
        Measure::Lambda(l) => l.to_xi()?,
        Measure::Xi(x) => x.clone(),
    };
    let pairs = n * (n - 1) / 2;
    let mut channels = vec![xi.kingman * pairs as f64];
    channels.extend(xi.atoms.iter().map(|a| a.mass / a.square_norm()));
    let rate: f64 = channels.iter().sum();
    let warm = opts.warm_up.unwrap_or_else(|| warm_up_length(xi.total_mass()));
    let model = match measure {
        Measure::Lambda(l) => format!("lookdown-lambda{}", describe_lambda(l)),
        Measure::Xi(_) => format!("lookdown-xi(kingman={},atoms={})", xi.kingman, xi.atoms.len()),
    };
    drive(n, rate, opts, warm, model, rng, |rng| {
        let mut u = rng.random::<f64>() * rate;
        let mut ch = channels.len() - 1;
        for (i, &c) in channels.iter().enumerate() {
            if u < c {
                ch = i;
                break;
            }
            u -= c;
        }
        if ch == 0 {
            let i = rng.random_range(1..=n as u32);
            let mut j = rng.random_range(1..n as u32);
            if j >= i {
                j += 1;
            }
            return Ok((EventKind::Lookdown, vec![vec![i.min(j), i.max(j)]]));
        }
        let atom = &xi.atoms[ch - 1];
        let mut baskets: Vec<Vec<u32>> = vec![Vec::new(); atom.xi.len()];
        for level in 1..=n as u32 {
            let mut v = rng.random::<f64>();
            for (b, &p) in atom.xi.iter().enumerate() {
                if v < p {
                    baskets[b].push(level);
                    break;
                }
                v -= p;
            }
        }
        baskets.retain(|b| !b.is_empty());
        Ok((EventKind::Atom { index: ch - 1 }, baskets))
    })
}

fn describe_lambda(l: &LambdaMeasure) -> String {
    let atoms: Vec<String> = l.atoms.iter().map(|(p, w)| format!("{w}@{p}")).collect();
    format!("({})", atoms.join(","))
}

/// One JSON object per event: `{"time", "kind", "groups", "sources"}`.
pub fn write_events_jsonl<W: Write>(run: &ForwardRun, mut w: W) -> Result<()> {
    for e in &run.events {
        let line = serde_json::to_string(e).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_events_jsonl<R: BufRead>(r: R) -> Result<Vec<ForwardEvent>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Io(e.to_string()))?);
    }
    Ok(out)
}

/// Rows `replicate,time,level,coord_0,…` for every recorded grid point.
pub fn write_trajectories_csv<W: Write>(w: &mut csv::Writer<W>, replicate: usize, run: &ForwardRun, header: bool) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    if header {
        let mut h = vec!["replicate".to_string(), "time".into(), "level".into()];
        h.extend((0..run.dim).map(|c| format!("coord_{c}")));
        w.write_record(&h).map_err(io)?;
    }
    for (t, row) in run.grid.iter().zip(&run.trajectories) {
        for (l, p) in row.iter().enumerate() {
            let mut rec = vec![replicate.to_string(), format!("{t:.12}"), (l + 1).to_string()];
            rec.extend(p.coords().iter().map(|c| format!("{c:.12}")));
            w.write_record(&rec).map_err(io)?;
        }
    }
    Ok(())
}
