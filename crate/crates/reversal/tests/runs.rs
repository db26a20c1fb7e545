use xicoal::rates::{build_rate_table, Measure};
use xicoal::rng::stream_rng;
use xicoal_reversal::{simulate_reversal, write_epochs_csv, write_observations_csv, ReversalOptions};

fn options() -> ReversalOptions {
    let mut o = ReversalOptions::new(1.5);
    o.observe = vec![0.0, 0.5, 1.0, 1.5];
    o
}

#[test]
fn runs_keep_n_levels_and_ordered_epochs() {
    let table = build_rate_table(&Measure::kingman(), 2).unwrap();
    for r in 0..5 {
        let run = simulate_reversal(&table, 2, 1, &options(), &mut stream_rng(3, r)).unwrap();
        assert_eq!(run.observations.len(), 4);
        assert!(run.observations.iter().all(|(_, p)| p.len() == 2));
        assert!(run.trace.iter().all(|s| s.positions.len() == 2));
        assert_eq!(run.trace.len(), run.epochs.iter().filter(|e| e.merge_time.is_some()).count() + 1);
        assert!(run.epochs.windows(2).all(|w| w[0].start < w[1].start));
        for e in &run.epochs {
            if let Some(t) = e.merge_time {
                assert!(t >= e.start && t <= 1.5);
                // level 1 is never redrawn
                assert!(!e.resampled_levels.contains(&1));
            }
        }
        assert!(run.final_state.clock <= 1.5);
    }
}

#[test]
fn runs_are_reproducible_and_serialise() {
    let table = build_rate_table(&Measure::kingman(), 2).unwrap();
    let a = simulate_reversal(&table, 2, 1, &options(), &mut stream_rng(9, 1)).unwrap();
    let b = simulate_reversal(&table, 2, 1, &options(), &mut stream_rng(9, 1)).unwrap();
    assert_eq!(a, b);
    let mut w = csv::Writer::from_writer(Vec::new());
    write_epochs_csv(&mut w, 0, &a, true).unwrap();
    let epochs = String::from_utf8(w.into_inner().unwrap()).unwrap();
    let completed = a.epochs.iter().filter(|e| e.merge_time.is_some()).count();
    assert_eq!(epochs.lines().count(), completed + 1);
    let mut w = csv::Writer::from_writer(Vec::new());
    write_observations_csv(&mut w, 0, &a, true).unwrap();
    let obs = String::from_utf8(w.into_inner().unwrap()).unwrap();
    assert_eq!(obs.lines().count(), 4 * 2 + 1);
}
