//! Exact rate identities and the consistency recursion.

use xicoal::combinatorics::MergerSignature;
use xicoal::rates::{build_rate_table, check_consistency, lambda_rate, xi_rate, BetaPart, LambdaMeasure, Measure, XiAtom, XiMeasure};
use xicoal::Result;

use super::Ctx;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn battery() -> Vec<(&'static str, Measure)> {
    let beta = LambdaMeasure {
        atoms: Vec::new(),
        density: Some(BetaPart { a: 0.5, b: 1.5, mass: 1.0 }),
    };
    let mixture = LambdaMeasure {
        atoms: vec![(0.0, 0.5), (0.3, 0.7)],
        density: Some(BetaPart { a: 2.0, b: 3.0, mass: 0.4 }),
    };
    vec![
        ("kingman", Measure::kingman()),
        ("uniform", Measure::Lambda(LambdaMeasure::uniform(1.0))),
        ("beta-0.5-1.5", Measure::Lambda(beta)),
        ("dirac-0.5", Measure::Lambda(LambdaMeasure::dirac(0.5, 1.0))),
        ("mixture", Measure::Lambda(mixture)),
        (
            "xi-two-atoms",
            Measure::Xi(XiMeasure {
                kingman: 0.3,
                atoms: vec![XiAtom { xi: vec![0.5, 0.5], mass: 1.0 }, XiAtom { xi: vec![0.4, 0.2, 0.1], mass: 0.6 }],
            }),
        ),
    ]
}

pub(super) fn run(ctx: &mut Ctx) -> Result<()> {
    let kingman = LambdaMeasure::kingman(1.0);
    let mut dev: f64 = 0.0;
    for n in 2..=10 {
        for k in 2..=n {
            let want = if k == 2 { 1.0 } else { 0.0 };
            dev = dev.max((lambda_rate(&kingman, n, k)? - want).abs());
        }
    }
    ctx.check("kingman-rates-exact", dev, 0.0, "λ_{n,2} = 1, λ_{n,k>2} = 0, n ≤ 10");

    let uniform = LambdaMeasure::uniform(1.0);
    let mut rel: f64 = 0.0;
    for n in 2..=10 {
        for k in 2..=n {
            let want = factorial(k - 2) * factorial(n - k) / factorial(n - 1);
            rel = rel.max((lambda_rate(&uniform, n, k)? / want - 1.0).abs());
        }
    }
    ctx.check("uniform-beta-integral", rel, 1e-10, "relative error vs (k−2)!(n−k)!/(n−1)!");

    let mass = 0.7;
    let xi = XiMeasure {
        kingman: 0.0,
        atoms: vec![XiAtom { xi: vec![0.5, 0.5], mass }],
    };
    let r = xi_rate(&xi, 4, &MergerSignature::new(vec![2, 2])?)?;
    ctx.check("xi-two-pairs", (r - mass / 4.0).abs(), 1e-12, "atom (1/2, 1/2) at (4, (2, 2)) vs mass/4");

    for (name, m) in battery() {
        let rep = check_consistency(&build_rate_table(&m, 9)?, 1e-10);
        let worst = rep.checks.iter().map(|c| (c.lhs - c.rhs).abs() / c.lhs.abs().max(c.rhs.abs()).max(1.0)).fold(0.0, f64::max);
        ctx.check(&format!("consistency-{name}"), worst, 1e-10, format!("{} identities, n ≤ 8", rep.checks.len()));
    }

    let n = ctx.spec.n.unwrap_or(8);
    let table = build_rate_table(&ctx.spec.measure.to_measure()?, n + 1)?;
    let rep = check_consistency(&table, 1e-10);
    let worst = rep.checks.iter().map(|c| (c.lhs - c.rhs).abs() / c.lhs.abs().max(c.rhs.abs()).max(1.0)).fold(0.0, f64::max);
    ctx.check("consistency-spec-measure", worst, 1e-10, format!("{} identities, n ≤ {n}", rep.checks.len()));

    let (mut sizes, mut rates) = (Vec::new(), Vec::new());
    for (m, _, r) in table.entries() {
        sizes.push(m as f64);
        rates.push(r);
    }
    ctx.samples("spec-measure", "n", &sizes);
    ctx.samples("spec-measure", "rate", &rates);
    ctx.with_csv("rates.csv", |w, header| {
        let io = |e: csv::Error| xicoal::Error::Io(e.to_string());
        if header {
            w.write_record(["n", "signature", "rate"]).map_err(io)?;
        }
        for (m, s, r) in table.entries() {
            w.write_record([m.to_string(), s.to_string(), r.to_string()]).map_err(io)?;
        }
        Ok(())
    })
}
