//! Backward tracing of ancestral levels through a forward event log.

use std::collections::BTreeMap;

use xicoal::combinatorics::{Block, Partition};
use xicoal::kernels::{SpatialConfig, TorusPoint};
use xicoal::sampler::{CoalescentPath, NodePath, PathEvent, PathMeta};
use xicoal::{Error, Result};

use crate::run::ForwardRun;

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedGenealogy {
    /// Times are backward from 0, so an event at forward time `τ` sits at `−τ`.
    pub path: CoalescentPath,
    /// Whether the sample coalesced to a single block within the horizon.
    pub complete: bool,
    /// Ancestral level of each final block at the horizon.
    pub ancestors: Vec<(Block, u32)>,
}

struct Node {
    block: Block,
    birth: f64,
    birth_point: TorusPoint,
    end: f64,
    end_point: Option<TorusPoint>,
    /// `(level, from, to)` in backward time.
    segments: Vec<(u32, f64, f64)>,
}

/// Genealogy of levels `1..=n` at time 0, traced back to `−horizon`.
pub fn extract_genealogy(run: &ForwardRun, n: usize) -> Result<ExtractedGenealogy> {
    if n == 0 || n > run.levels {
        return Err(Error::InvalidArgument(format!("sample of {n} from {} levels", run.levels)));
    }
    if n > run.recorded_levels {
        return Err(Error::InvalidArgument(format!("only {} levels were recorded", run.recorded_levels)));
    }
    let horizon = run.horizon;
    let start = SpatialConfig::singletons(run.final_positions()[..n].iter().map(|p| p.coords().to_vec()).collect())?;

    let mut nodes: Vec<Node> = (0..n)
        .map(|i| Node {
            block: Block::singleton(i as u32 + 1),
            birth: 0.0,
            birth_point: run.final_positions()[i].clone(),
            end: horizon,
            end_point: None,
            segments: Vec::new(),
        })
        .collect();
    // live lineages: (node index, current ancestral level, segment start)
    let mut live: Vec<(usize, u32, f64)> = (0..n).map(|i| (i, i as u32 + 1, 0.0)).collect();
    let mut events = Vec::new();

    for e in run.events.iter().rev() {
        let s = -e.time;
        let mut src_of: BTreeMap<u32, (u32, usize)> = BTreeMap::new();
        for (gi, g) in e.groups.iter().enumerate() {
            for &d in &g[1..] {
                src_of.insert(d, (g[0], gi));
            }
        }
        if live.iter().all(|l| !src_of.contains_key(&l.1)) {
            continue;
        }
        // regroup by new ancestral level
        let mut by_level: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, l) in live.iter_mut().enumerate() {
            if let Some(&(src, _)) = src_of.get(&l.1) {
                nodes[l.0].segments.push((l.1, l.2, s));
                l.1 = src;
                l.2 = s;
            }
            by_level.entry(l.1).or_default().push(i);
        }
        if by_level.values().all(|v| v.len() == 1) {
            continue;
        }
        let mut next = Vec::with_capacity(by_level.len());
        let mut locations = Vec::new();
        for (level, members) in by_level {
            if members.len() == 1 {
                next.push(live[members[0]]);
                continue;
            }
            // the merged lineages meet at the source level of this event
            let gi = e.groups.iter().position(|g| g[0] == level).expect("merge happens at a source level");
            let at = e.sources[gi].clone();
            let mut labels = Vec::new();
            for &m in &members {
                let (ni, lv, from) = live[m];
                let node = &mut nodes[ni];
                node.segments.push((lv, from, s));
                node.end = s;
                node.end_point = Some(at.clone());
                labels.extend_from_slice(node.block.labels());
            }
            let block = Block::new(labels);
            locations.push((block.clone(), at.clone()));
            nodes.push(Node {
                block,
                birth: s,
                birth_point: at,
                end: horizon,
                end_point: None,
                segments: Vec::new(),
            });
            next.push((nodes.len() - 1, level, s));
        }
        live = next;
        let partition = Partition::from_blocks(live.iter().map(|l| nodes[l.0].block.clone()).collect())?;
        events.push(PathEvent { time: s, partition, locations });
    }
    for &(ni, lv, from) in &live {
        nodes[ni].segments.push((lv, from, horizon));
        nodes[ni].end_point = Some(run.position(0, lv).clone());
    }

    let paths = nodes
        .iter()
        .enumerate()
        .map(|(id, nd)| {
            let mut points = vec![(nd.birth, nd.birth_point.clone())];
            // grid is increasing in forward time, so walk it backwards
            for k in (0..run.grid.len()).rev() {
                let s = -run.grid[k];
                if s <= nd.birth || s >= nd.end {
                    continue;
                }
                let lv = nd.segments.iter().find(|seg| seg.1 <= s && s < seg.2).expect("segments cover the node").0;
                points.push((s, run.position(k, lv).clone()));
            }
            points.push((nd.end, nd.end_point.clone().expect("every node ends")));
            NodePath {
                node: id,
                block: nd.block.clone(),
                birth: nd.birth,
                end: nd.end,
                points,
            }
        })
        .collect();

    let ancestors = live.iter().map(|l| (nodes[l.0].block.clone(), l.1)).collect();
    Ok(ExtractedGenealogy {
        path: CoalescentPath {
            dim: run.dim,
            start,
            events,
            paths,
            meta: PathMeta {
                seed: run.meta.seed,
                rates: run.meta.model.clone(),
                method: "forward-extraction".into(),
            },
        },
        complete: live.len() == 1,
        ancestors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::OffspringLaw;
    use crate::run::{cannings_simulate, lookdown_simulate, RunOptions};
    use xicoal::kernels::centered;
    use xicoal::rates::{Measure, XiAtom, XiMeasure};
    use xicoal::rng::stream_rng;

    #[test]
    fn single_level_is_the_reversed_trajectory() {
        let mut rng = stream_rng(10, 0);
        let opts = RunOptions::new(2, 4.0).record(0.25, 3);
        let run = cannings_simulate(&OffspringLaw::PairResampling { n: 3 }, 3.0, &opts, &mut rng).unwrap();
        let g = extract_genealogy(&run, 1).unwrap();
        assert!(g.path.events.is_empty());
        assert!(g.complete);
        let pts = &g.path.paths[0].points;
        assert_eq!(pts.len(), run.grid.len());
        for (k, (s, p)) in pts.iter().enumerate() {
            let j = run.grid.len() - 1 - k;
            assert!((s + run.grid[j]).abs() < 1e-12);
            assert_eq!(p, run.position(j, 1));
        }
    }

    #[test]
    fn partitions_coarsen_and_paths_are_continuous() {
        let x = Measure::Xi(XiMeasure {
            kingman: 0.5,
            atoms: vec![XiAtom { xi: vec![0.5, 0.3], mass: 1.0 }],
        });
        for r in 0..20 {
            let mut rng = stream_rng(11, r);
            let opts = RunOptions::new(2, 30.0).record(0.05, 6);
            let run = lookdown_simulate(&x, 6, &opts, &mut rng).unwrap();
            let g = extract_genealogy(&run, 6).unwrap();
            let mut prev = g.path.start.partition().clone();
            let mut t = 0.0;
            for e in &g.path.events {
                assert!(e.partition.coarsens(&prev) && e.partition != prev);
                assert!(e.time > t);
                t = e.time;
                prev = e.partition.clone();
            }
            // a parent starts where its children end
            let by_block: BTreeMap<_, _> = g.path.paths.iter().map(|p| (p.block.clone(), p)).collect();
            for p in &g.path.paths {
                if p.block.len() > 1 {
                    for c in g.path.paths.iter().filter(|c| c.end == p.birth && c.block.is_subset(&p.block)) {
                        assert_eq!(c.points.last().unwrap().1, p.points[0].1);
                    }
                }
                for w in p.points.windows(2) {
                    assert!(w[1].0 >= w[0].0);
                    // grid-spaced Brownian steps stay small
                    let jump: f64 = w[0].1.coords().iter().zip(w[1].1.coords()).map(|(a, b)| centered(a - b).abs()).fold(0.0, f64::max);
                    assert!(jump < 0.5, "jump {jump} in {}", p.block);
                }
            }
            assert!(by_block.len() == g.path.paths.len());
        }
    }

    #[test]
    fn merge_location_is_the_source_position() {
        let mut rng = stream_rng(12, 0);
        let opts = RunOptions::new(1, 10.0);
        let run = lookdown_simulate(&Measure::kingman(), 2, &opts, &mut rng).unwrap();
        let g = extract_genealogy(&run, 2).unwrap();
        // with two levels the last lookdown is the coalescence
        let last = run.events.last().unwrap();
        assert_eq!(g.path.events[0].time, -last.time);
        assert_eq!(g.path.events[0].locations[0].1, last.sources[0]);
        assert!(g.complete);
    }

    #[test]
    fn partial_genealogy_is_flagged() {
        let mut rng = stream_rng(13, 0);
        let run = cannings_simulate(&OffspringLaw::Trivial { n: 4 }, 10.0, &RunOptions::new(1, 1.0), &mut rng).unwrap();
        let g = extract_genealogy(&run, 4).unwrap();
        assert!(!g.complete);
        assert_eq!(g.ancestors.len(), 4);
        assert!(extract_genealogy(&run, 5).is_err());
    }
}
