//! End-to-end acceptance checks, one line per criterion.
//!
//! `UPAIR_ACCEPTANCE=1,4,8` restricts the run to the listed criteria.

mod common;

use std::time::Instant;

use rand::Rng;
use upair_core::calibration::{estimate_moments, fit_power_law, moments_to_targets, MEAN_RSTAR};
use upair_core::nulldist::{adjusted_pvalue, rstar_cdf};
use upair_core::optim::{nelder_mead, SimplexSettings};
use upair_core::sim::{generate_dataset, rejection_study, CalibrationMode, ScenarioConfig};
use upair_core::special::chi2_1_cdf;
use upair_core::stats::compute_statistics;
use upair_core::{
    closed_form_null, decomposed_log_likelihood, fit, log_likelihood, seed, to_reparam, AdjustmentSet,
    Constraint, FitOptions, RLaw, TestId, Theta, UnorderedDataset,
};

use common::oracle_loglik;

type Criterion = (u32, &'static str, fn() -> Outcome);
/// Label, intercept, reference moments at n = 10, ..., 100, and reference `(a, b)`.
type MomentRow = (&'static str, f64, [f64; 10], (f64, f64));

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_theta<R: Rng>(rng: &mut R) -> Theta {
    Theta::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(0.3..3.0),
        rng.random_range(0.3..3.0),
        rng.random_range(-0.9..0.9),
    )
    .unwrap()
}

fn rows(ds: &UnorderedDataset) -> Vec<(f64, f64)> {
    ds.pairs().iter().map(|p| (p.lo(), p.hi())).collect()
}

fn round_sig1(x: f64) -> f64 {
    let e = x.abs().log10().floor();
    let m = 10f64.powf(e);
    (x / m).round() * m
}

fn c1_pvalue_anchors() -> Outcome {
    let law = RLaw::default_law();
    let coeffs = AdjustmentSet::default();
    // (test, statistic, target, tolerance); `None` means one significant figure.
    let anchors = [
        (TestId::Rn1, 14.91, 7e-5, None),
        (TestId::Rn2, 17.71, 2e-4, None),
        (TestId::Rn1Star, 1.08, 0.21, None),
        (TestId::Rn2Star, 16.69, 4e-4, None),
        (TestId::Rn1, 6.51, 6.6e-3, Some(0.4e-3)),
        (TestId::Rn1Star, 10.74, 7.5e-4, Some(0.5e-4)),
        (TestId::Rn2, 9.47, 8.9e-3, Some(1e-3)),
        (TestId::Rn2Star, 13.48, 1.9e-3, Some(0.3e-3)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (test, t, target, tol) in anchors {
        let p = adjusted_pvalue(test, t, 40, &coeffs, law).unwrap().p;
        let ok = match tol {
            None if target == 0.21 => (p - target).abs() < 0.005,
            None => (round_sig1(p) - target).abs() < 1e-3 * target,
            Some(tol) => (p - target).abs() <= tol,
        };
        pass &= ok;
        parts.push(format!("{}({t})={p:.3e}{}", test.label(), if ok { "" } else { "!" }));
    }
    outcome(pass, parts.join(" "))
}

fn c2_decomposition() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let mut rng = seed::stream(2, &[i]);
        let n = rng.random_range(1..60);
        let gen = random_theta(&mut rng);
        let ds = generate_dataset(n, &gen, &mut rng);
        let theta = random_theta(&mut rng);
        let d = log_likelihood(&ds, &theta) - decomposed_log_likelihood(&ds, &to_reparam(&theta));
        worst = worst.max(d.abs());
    }
    outcome(worst <= 1e-8, format!("max |difference| = {worst:.2e} over 1000 instances"))
}

fn c3_degenerate_score() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = seed::stream(3, &[i]);
        let n = rng.random_range(5..80);
        let ds = generate_dataset(n, &random_theta(&mut rng), &mut rng);
        let (mu, sigma, rho) = (rng.random_range(-2.0..2.0), rng.random_range(0.3..3.0), rng.random_range(-0.9..0.9));
        let h = 1e-4;
        let at = |d: f64| log_likelihood(&ds, &Theta::new(mu + d, mu - d, sigma, sigma, rho).unwrap());
        worst = worst.max(((at(h) - at(-h)) / (2.0 * h)).abs());
    }
    outcome(worst <= 1e-6, format!("max |dl/dDelta| = {worst:.2e} over 100 instances"))
}

fn numeric_null(rows: &[(f64, f64)], rho_free: bool) -> [f64; 3] {
    let f = |u: &[f64]| {
        let rho = if rho_free { u[2].tanh() } else { 0.0 };
        -oracle_loglik(rows, &[u[0], u[0], u[1].exp(), u[1].exp(), rho])
    };
    let n = rows.len() as f64;
    let m = rows.iter().map(|r| r.0 + r.1).sum::<f64>() / (2.0 * n);
    let s = (rows.iter().map(|r| (r.0 - m).powi(2) + (r.1 - m).powi(2)).sum::<f64>() / (2.0 * n)).sqrt();
    let mut x = if rho_free { vec![m, s.ln(), 0.0] } else { vec![m, s.ln()] };
    let settings = SimplexSettings { f_tol: 1e-14, x_tol: 1e-11, max_iter: 20_000 };
    for _ in 0..4 {
        x = nelder_mead(f, &x, &vec![0.1; x.len()], settings).x;
    }
    [x[0], x[1].exp(), if rho_free { x[2].tanh() } else { 0.0 }]
}

fn grid_free_rho0(rows: &[(f64, f64)]) -> f64 {
    let all: Vec<f64> = rows.iter().flat_map(|r| [r.0, r.1]).collect();
    let (lo, hi) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let spread = (hi - lo).max(1e-3);
    let ll = |p: &[f64; 4]| oracle_loglik(rows, &[p[0], p[1], p[2].exp(), p[3].exp(), 0.0]);
    let mut center = [0.5 * (lo + hi), 0.5 * (lo + hi), spread.ln() - 1.0, spread.ln() - 1.0];
    let mut half = [0.6 * spread, 0.6 * spread, 2.5, 2.5];
    let mut best = f64::NEG_INFINITY;
    for round in 0..40 {
        let pts = if round == 0 { 24 } else { 12 };
        let mut arg = center;
        for i in 0..=pts {
            for j in 0..=pts {
                for a in 0..=pts {
                    for b in 0..=pts {
                        let g = |c: usize, t: usize| center[c] + half[c] * (2.0 * t as f64 / pts as f64 - 1.0);
                        let p = [g(0, i), g(1, j), g(2, a), g(3, b)];
                        let v = ll(&p);
                        if v > best {
                            best = v;
                            arg = p;
                        }
                    }
                }
            }
        }
        center = arg;
        half.iter_mut().for_each(|h| *h *= 0.6);
    }
    best
}

fn c4_estimators() -> Outcome {
    let mut worst_cf = 0.0f64;
    for i in 0..50u64 {
        let mut rng = seed::stream(4, &[i]);
        let n = rng.random_range(8..60);
        let ds = generate_dataset(n, &random_theta(&mut rng), &mut rng);
        for rho_free in [false, true] {
            let cf = closed_form_null(&ds, rho_free).unwrap();
            let nm = numeric_null(&rows(&ds), rho_free);
            for (g, w) in [cf.mu1(), cf.sigma1(), cf.rho()].iter().zip(nm) {
                worst_cf = worst_cf.max((g - w).abs());
            }
        }
    }
    let mut worst_grid = 0.0f64;
    for i in 0..10u64 {
        let mut rng = seed::stream(40, &[i]);
        let n = rng.random_range(6..13);
        let theta = Theta::new(0.0, rng.random_range(0.0..2.0), 1.0, rng.random_range(0.4..2.0), 0.0).unwrap();
        let ds = generate_dataset(n, &theta, &mut rng);
        let f = fit(&ds, Constraint::FreeRho0, &FitOptions::default()).unwrap();
        worst_grid = worst_grid.max((f.loglik - grid_free_rho0(&rows(&ds))).abs());
    }
    outcome(
        worst_cf <= 1e-6 && worst_grid <= 1e-3,
        format!("closed form vs numeric max {worst_cf:.2e} (50 datasets); FREE_RHO0 vs grid max {worst_grid:.2e} (10 datasets)"),
    )
}

fn c5_lrt_structure() -> Outcome {
    let opts = FitOptions::default();
    let (mut neg, mut nest, mut worst_aff, mut used) = (0.0f64, 0.0f64, 0.0f64, 0);
    for i in 0..500u64 {
        let mut rng = seed::stream(5, &[i]);
        let n = rng.random_range(10..60);
        let ds = generate_dataset(n, &random_theta(&mut rng), &mut rng);
        let a = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.2..5.0);
        let b = rng.random_range(-20.0..20.0);
        let s = compute_statistics(&ds, &TestId::ALL, &opts);
        let t = compute_statistics(&ds.affine(a, b).unwrap(), &TestId::ALL, &opts);
        let (Some(s), Some(t)) = (collect4(s), collect4(t)) else { continue };
        used += 1;
        neg = neg.min(s[0]).min(s[2]);
        nest = nest.min(s[1] - s[0]).min(s[3] - s[2]);
        for (u, v) in s.iter().zip(t) {
            worst_aff = worst_aff.max((u - v).abs());
        }
    }
    outcome(
        used == 500 && neg >= 0.0 && nest >= -1e-6 && worst_aff <= 1e-5,
        format!("{used}/500 fitted; min stat {neg:.2e}; min nesting gap {nest:.2e}; max affine change {worst_aff:.2e}"),
    )
}

fn collect4(s: [Option<upair_core::Result<f64>>; 4]) -> Option<[f64; 4]> {
    let mut out = [0.0; 4];
    for (o, v) in out.iter_mut().zip(s) {
        *o = v?.ok()?;
    }
    Some(out)
}

fn c6_rstar_law() -> Outcome {
    use rand_distr::{Distribution, StandardNormal};
    let draws = 1_000_000u64;
    let mut xs: Vec<f64> = (0..draws)
        .map(|i| {
            let mut rng = seed::stream(6, &[i]);
            let w: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            (w[0] * w[0] + w[1].max(0.0).powi(2)).max(w[0] * w[0] + w[2].max(0.0).powi(2))
        })
        .collect();
    xs.sort_by(f64::total_cmp);
    let mut pass = true;
    let mut parts = Vec::new();
    for x in [1.0, 3.0, 6.0, 10.0] {
        let p = xs.partition_point(|&v| v <= x) as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let c = rstar_cdf(x).unwrap();
        let z = (c - p) / se;
        pass &= z.abs() <= 3.0;
        parts.push(format!("x={x}: z={z:+.2}"));
    }
    let dominated = (1..=400).all(|k| {
        let x = k as f64 * 0.05;
        rstar_cdf(x).unwrap() <= chi2_1_cdf(x) + 1e-12
    });
    pass &= dominated;
    parts.push(format!("cdf <= chi2_1 cdf on grid: {dominated}"));
    outcome(pass, parts.join("; "))
}

fn c7_null_moments() -> Outcome {
    let grid = [10usize, 50, 100];
    let recs = estimate_moments(&grid, 50_000, 0x7AB1E1, &FitOptions::default()).unwrap();
    let targets = moments_to_targets(&recs, RLaw::default_law().mean(), MEAN_RSTAR);
    let reference: [(TestId, [f64; 3], f64); 3] = [
        (TestId::Rn1, [0.809, 0.596, 0.568], 0.015),
        (TestId::Rn1Star, [0.932, 0.687, 0.645], 0.015),
        (TestId::Rn2Star, [1.417, 1.062, 1.018], 0.03),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (test, want, tol) in reference {
        let got: Vec<f64> = grid
            .iter()
            .map(|&n| targets.iter().find(|t| t.test == test && t.n == n).unwrap().value)
            .collect();
        let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= tol);
        pass &= ok;
        parts.push(format!("{}: {:.3?} vs {want:?}{}", test.label(), got, if ok { "" } else { " !" }));
    }
    let r: Vec<f64> = grid
        .iter()
        .map(|&n| targets.iter().find(|t| t.test == TestId::Rn2 && t.n == n).unwrap().value)
        .collect();
    parts.push(format!("(r_n {r:.3?}, not a criterion)"));
    outcome(pass, parts.join("; "))
}

fn c8_power_law() -> Outcome {
    let ns: Vec<f64> = (1..=10).map(|k| 10.0 * k as f64).collect();
    let rows: [MomentRow; 4] = [
        ("p_n", 0.5, [0.809, 0.681, 0.634, 0.627, 0.596, 0.587, 0.585, 0.587, 0.568, 0.568], (1.440, 0.676)),
        ("p*_n", 0.5, [0.932, 0.801, 0.749, 0.721, 0.687, 0.674, 0.669, 0.651, 0.649, 0.645], (1.332, 0.492)),
        ("r*_n", 1.0, [1.417, 1.194, 1.129, 1.090, 1.062, 1.040, 1.038, 1.028, 1.022, 1.018], (6.325, 1.176)),
        ("r_n", 1.0, [1.312, 1.150, 1.092, 1.070, 1.046, 1.028, 1.030, 1.032, 1.016, 1.012], (4.589, 1.163)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, c, ys, (a, b)) in rows {
        let pts: Vec<(f64, f64)> = ns.iter().copied().zip(ys).collect();
        let f = fit_power_law(&pts, c).unwrap();
        let ok = ((f.a - a) / a).abs() <= 0.15 && ((f.b - b) / b).abs() <= 0.15;
        pass &= ok;
        parts.push(format!("{label}: a={:.3} b={:.3}{}", f.a, f.b, if ok { "" } else { " !" }));
    }
    let synth: Vec<(f64, f64)> = ns.iter().map(|&n| (n, 1.0 + 2.5 * n.powf(-0.8))).collect();
    let f = fit_power_law(&synth, 1.0).unwrap();
    let exact = (f.a - 2.5).abs() <= 1e-6 && (f.b - 0.8).abs() <= 1e-6;
    pass &= exact;
    parts.push(format!("synthetic exact: {exact}"));
    outcome(pass, parts.join("; "))
}

fn study(theta: Theta, n: usize, tests: &[TestId], mode: CalibrationMode, seed_value: u64) -> upair_core::sim::RejectionTable {
    let cfg = ScenarioConfig {
        levels: vec![0.05],
        tests: tests.to_vec(),
        modes: vec![mode],
        ..ScenarioConfig::new(n, theta, 10_000, seed_value)
    };
    rejection_study(&cfg, RLaw::default_law()).unwrap()
}

fn c9_size_n75() -> Outcome {
    let adj = CalibrationMode::Adjusted;
    let null = study(Theta::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap(), 75, &TestId::ALL, adj, 9);
    let want = [5.1, 5.2, 5.5, 5.2];
    let mut pass = true;
    let mut parts = Vec::new();
    for (test, w) in TestId::ALL.into_iter().zip(want) {
        let p = null.percent(test, 0.05, adj).unwrap();
        let ok = (p - w).abs() <= 1.0;
        pass &= ok;
        parts.push(format!("{}={p:.2}{}", test.label(), if ok { "" } else { "!" }));
    }
    let neg = study(Theta::new(0.0, 0.0, 1.0, 1.0, -0.5).unwrap(), 75, &[TestId::Rn1, TestId::Rn1Star], adj, 90);
    let r1 = neg.percent(TestId::Rn1, 0.05, adj).unwrap();
    let s1 = neg.percent(TestId::Rn1Star, 0.05, adj).unwrap();
    pass &= r1 >= 99.0 && (4.0..=7.0).contains(&s1);
    parts.push(format!("rho=-0.5: R_n1={r1:.2} R*_n1={s1:.2}"));
    parts.push(format!("failures {}+{}", null.failures, neg.failures));
    outcome(pass, parts.join(" "))
}

fn c10_power_n75() -> Outcome {
    let adj = CalibrationMode::Adjusted;
    let a = study(Theta::new(0.0, 1.5, 1.0, 0.5, 0.0).unwrap(), 75, &[TestId::Rn2, TestId::Rn2Star], adj, 10);
    let b = study(Theta::new(0.0, 1.0, 1.0, 1.0, 0.5).unwrap(), 75, &[TestId::Rn1, TestId::Rn1Star], adj, 100);
    let r2 = a.percent(TestId::Rn2, 0.05, adj).unwrap();
    let s2 = a.percent(TestId::Rn2Star, 0.05, adj).unwrap();
    let r1 = b.percent(TestId::Rn1, 0.05, adj).unwrap();
    let s1 = b.percent(TestId::Rn1Star, 0.05, adj).unwrap();
    outcome(
        r2 >= 99.5 && s2 >= 99.5 && (s1 - 32.8).abs() <= 2.0 && r1 <= 1.0,
        format!("(0.5,1.5,0): R_n2={r2:.2} R*_n2={s2:.2}; (1,1,0.5): R*_n1={s1:.2} R_n1={r1:.2}"),
    )
}

fn c11_large_n() -> Outcome {
    let raw = CalibrationMode::Raw;
    let t = study(Theta::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap(), 1000, &[TestId::Rn1, TestId::Rn1Star], raw, 11);
    let r1 = t.percent(TestId::Rn1, 0.05, raw).unwrap();
    let s1 = t.percent(TestId::Rn1Star, 0.05, raw).unwrap();
    outcome(
        (4.3..=6.5).contains(&r1) && (4.3..=6.5).contains(&s1),
        format!("n=1000 unadjusted: R_n1={r1:.2} R*_n1={s1:.2} (failures {})", t.failures),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "p-value anchors", c1_pvalue_anchors),
        (2, "decomposition identity", c2_decomposition),
        (3, "degenerate score", c3_degenerate_score),
        (4, "estimator correctness", c4_estimators),
        (5, "LRT structure", c5_lrt_structure),
        (6, "R* law", c6_rstar_law),
        (7, "null moments", c7_null_moments),
        (8, "calibration fit", c8_power_law),
        (9, "size at n = 75", c9_size_n75),
        (10, "power at n = 75", c10_power_n75),
        (11, "large-n size", c11_large_n),
    ];
    let only: Option<Vec<u32>> = std::env::var("UPAIR_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    // `cargo test -- <filter>` passes arguments; run only when unfiltered or asked for.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let r = run();
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} [{name}]: {verdict} ({:.1}s) {}", start.elapsed().as_secs_f64(), r.detail);
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
