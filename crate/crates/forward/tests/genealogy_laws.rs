use statrs::distribution::{ChiSquared, ContinuousCDF};
use xicoal::combinatorics::{merger_signature, MergerSignature, Partition};
use xicoal::kernels::{centered, SpatialConfig};
use xicoal::normalization::pair_n_closed;
use xicoal::rates::sample_nonspatial_path;
use xicoal::rng::stream_rng;
use xicoal::sampler::{ExactSampler, SamplerOptions};
use xicoal_forward::{cannings_rate_table, cannings_simulate, extract_genealogy, OffspringLaw, RunOptions};

fn ks2(mut a: Vec<f64>, mut b: Vec<f64>) -> (f64, f64) {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    // α = 0.01 critical value
    (d, 1.628 * ((n + m) as f64 / (n * m) as f64).sqrt())
}

#[test]
fn pair_genealogy_matches_exact_sampler() {
    let big_n = 30;
    let law = OffspringLaw::PairResampling { n: big_n };
    let t_n = (big_n * (big_n - 1) / 2) as f64;
    let (table, _) = cannings_rate_table(&law, t_n, 2, 0).unwrap();
    let opts = SamplerOptions::default();
    let reps = 300;
    let (mut ft, mut et, mut fl, mut el) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in 0..reps {
        let mut rng = stream_rng(100, r);
        let run = cannings_simulate(&law, t_n, &RunOptions::new(1, 25.0).record(25.0, 2), &mut rng).unwrap();
        let g = extract_genealogy(&run, 2).unwrap();
        assert!(g.complete);
        let x = g.path.start.clone();
        let e = &g.path.events[0];
        ft.push(e.time);
        fl.push(centered(e.locations[0].1.coords()[0] - x.positions()[0].coords()[0]));

        let df = ExactSampler::new(&x, &table, &opts).unwrap().draw(&mut rng).unwrap();
        let root = df.forest.nodes_born_at(1).next().unwrap();
        et.push(df.times[1]);
        el.push(centered(df.xi[root].coords()[0] - x.positions()[0].coords()[0]));
    }
    let (d, crit) = ks2(ft, et);
    assert!(d < crit, "merge time KS {d} ≥ {crit}");
    let (d, crit) = ks2(fl, el);
    assert!(d < crit, "merge location KS {d} ≥ {crit}");
}

#[test]
fn block_projection_matches_nonspatial_coalescent() {
    let law = OffspringLaw::Multiset {
        n: 12,
        components: vec![(1.0, {
            let mut c = vec![3, 2];
            c.extend([1; 7]);
            c
        })],
    };
    let t_n = 10.0;
    let n = 4;
    let (table, _) = cannings_rate_table(&law, t_n, n, 0).unwrap();
    let sigs: Vec<MergerSignature> = MergerSignature::all(n);
    let reps = 600;
    let mut forward = vec![0usize; sigs.len()];
    let mut nonspatial = vec![0usize; sigs.len()];
    let p0 = Partition::singletons(n);
    for r in 0..reps {
        let mut rng = stream_rng(101, r);
        let run = cannings_simulate(&law, t_n, &RunOptions::new(2, 10.0).record(10.0, n), &mut rng).unwrap();
        let g = extract_genealogy(&run, n).unwrap();
        let s = merger_signature(&p0, &g.path.events[0].partition).unwrap();
        forward[sigs.iter().position(|x| *x == s).unwrap()] += 1;
        let (f, _) = sample_nonspatial_path(&table, &p0, &mut rng);
        let s = merger_signature(&p0, &f.levels()[1]).unwrap();
        nonspatial[sigs.iter().position(|x| *x == s).unwrap()] += 1;
    }
    // two-sample χ² over the observed categories
    let mut chi2 = 0.0;
    let mut cats = 0;
    for (a, b) in forward.iter().zip(&nonspatial) {
        if a + b > 0 {
            let (a, b) = (*a as f64, *b as f64);
            chi2 += (a - b).powi(2) / (a + b);
            cats += 1;
        }
    }
    assert!(cats >= 3, "{forward:?}");
    let p = 1.0 - ChiSquared::new((cats - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "χ² {chi2}, p {p}: {forward:?} vs {nonspatial:?}");
}

#[test]
fn pair_separation_is_stationary_with_profile_n() {
    let big_n = 10;
    let law = OffspringLaw::PairResampling { n: big_n };
    let t_n = 45.0;
    let h = 30.0;
    let reps = 500;
    let (mut early, mut late) = (Vec::new(), Vec::new());
    for r in 0..reps {
        let mut rng = stream_rng(102, r);
        let run = cannings_simulate(&law, t_n, &RunOptions::new(1, h).record(h, 2), &mut rng).unwrap();
        let sep = |k: usize| centered(run.position(k, 2).coords()[0] - run.position(k, 1).coords()[0]).abs();
        early.push(sep(0));
        late.push(sep(run.grid.len() - 1));
    }
    let (d, crit) = ks2(early.clone(), late.clone());
    assert!(d < crit, "separation KS {d} ≥ {crit}");

    // |Δ| has density 2 N(0, Δ) on [0, 1/2] with pair rate 1
    let m = 2000;
    let dens: Vec<f64> = (0..=m).map(|i| 2.0 * pair_n_closed(1.0, 0.5 * i as f64 / m as f64)).collect();
    let mut cdf = vec![0.0; m + 1];
    for i in 1..=m {
        cdf[i] = cdf[i - 1] + 0.25 * (dens[i - 1] + dens[i]) / m as f64;
    }
    assert!((cdf[m] - 1.0).abs() < 1e-6);
    let at = |x: f64| {
        let u = (x / 0.5 * m as f64).min(m as f64 - 1e-9);
        let i = u.floor() as usize;
        cdf[i] + (u - i as f64) * (cdf[i + 1] - cdf[i])
    };
    let mut xs = late;
    xs.extend(early);
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let d = xs.iter().enumerate().map(|(i, &x)| ((i + 1) as f64 / n - at(x)).max(at(x) - i as f64 / n)).fold(0.0, f64::max);
    // the two times are far apart relative to mixing, so pool them
    assert!(d < 1.628 / n.sqrt(), "profile KS {d}");
}

#[test]
fn start_configuration_is_time_zero_positions() {
    let mut rng = stream_rng(103, 0);
    let run = cannings_simulate(&OffspringLaw::PairResampling { n: 5 }, 10.0, &RunOptions::new(2, 5.0), &mut rng).unwrap();
    let g = extract_genealogy(&run, 3).unwrap();
    let want = SpatialConfig::singletons(run.final_positions()[..3].iter().map(|p| p.coords().to_vec()).collect()).unwrap();
    assert_eq!(g.path.start, want);
}
