//! Computer-experiment calibration of the finite-sample adjustments.
//!
//! Simulate the first moment of each statistic under the standard null for a
//! grid of `n`, convert moments to weight or scale targets, and fit
//! `y = c + a n^-b` to each target sequence.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::FitOptions;
use crate::model::Theta;
use crate::nulldist::{AdjustmentCoefficients, AdjustmentKind, AdjustmentSet, RLaw, TestId};
use crate::optim::golden_section;
use crate::seed;
use crate::sim::generate_dataset;
use crate::stats::compute_statistics;

/// Replicate failure rate above which moment estimation is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.001;
/// Fewer replicates than this marks a calibration as low precision.
pub const FULL_PRECISION_REPS: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRecord {
    pub n: usize,
    pub test: TestId,
    pub mean_stat: f64,
    pub std_error: f64,
    /// Replicates that entered the mean.
    pub reps: usize,
    pub failures: usize,
    pub seed: u64,
}

/// Monte Carlo means of all four statistics for each `n` in `n_grid`.
pub fn estimate_moments(n_grid: &[usize], reps: usize, seed_value: u64, opts: &FitOptions) -> Result<Vec<MomentRecord>> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if let Some(&n) = n_grid.iter().find(|&&n| n < 10) {
        return Err(Error::Config(format!("grid sizes must be at least 10, got {n}")));
    }
    let theta = Theta::new(0.0, 0.0, 1.0, 1.0, 0.0).expect("standard parameters");
    let mut records = Vec::with_capacity(4 * n_grid.len());
    for &n in n_grid {
        let draws: Vec<Option<[f64; 4]>> = (0..reps as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::stream(seed_value, &[n as u64, i]);
                let ds = generate_dataset(n, &theta, &mut rng);
                let fit = FitOptions {
                    seed: seed::derive_seed(opts.seed, &[n as u64, i]),
                    ..*opts
                };
                let stats = compute_statistics(&ds, &TestId::ALL, &fit);
                let mut out = [0.0; 4];
                for (slot, s) in out.iter_mut().zip(stats) {
                    *slot = s?.ok()?;
                }
                Some(out)
            })
            .collect();
        let ok: Vec<[f64; 4]> = draws.iter().flatten().copied().collect();
        let failures = reps - ok.len();
        if failures as f64 > MAX_FAILURE_RATE * reps as f64 {
            return Err(Error::TooManyFailures { failures, attempted: reps });
        }
        let m = ok.len() as f64;
        for test in TestId::ALL {
            let k = test.index();
            let mean = ok.iter().map(|v| v[k]).sum::<f64>() / m;
            let var = ok.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            records.push(MomentRecord {
                n,
                test,
                mean_stat: mean,
                std_error: (var / m).sqrt(),
                reps: ok.len(),
                failures,
                seed: seed_value,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub n: usize,
    pub test: TestId,
    /// `p_n`, `r_n`, `p*_n` or `r*_n`.
    pub value: f64,
    /// Monte Carlo standard error of `value`.
    pub std_error: f64,
    /// A weight fell outside `[0.5, 1]` and was clipped.
    pub clipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
}

pub fn kind_of(test: TestId) -> AdjustmentKind {
    match test {
        TestId::Rn1 | TestId::Rn1Star => AdjustmentKind::Weight,
        TestId::Rn2 | TestId::Rn2Star => AdjustmentKind::Scale,
    }
}

/// Match first moments: the mean of `(1-p) chi2_0 + p chi2_1` is `p`, and the
/// mean of `r L` is `r E[L]`.
pub fn moments_to_targets(records: &[MomentRecord], mean_r: f64, mean_rstar: f64) -> Vec<CalibrationTarget> {
    records
        .iter()
        .map(|r| {
            let (value, se) = match r.test {
                TestId::Rn1 | TestId::Rn1Star => (r.mean_stat, r.std_error),
                TestId::Rn2 => (r.mean_stat / mean_r, r.std_error / mean_r),
                TestId::Rn2Star => (r.mean_stat / mean_rstar, r.std_error / mean_rstar),
            };
            let clipped_value = match kind_of(r.test) {
                AdjustmentKind::Weight => value.clamp(0.5, 1.0),
                AdjustmentKind::Scale => value,
            };
            CalibrationTarget {
                n: r.n,
                test: r.test,
                value: clipped_value,
                std_error: se,
                clipped: clipped_value != value,
            }
        })
        .collect()
}

fn mean_and_se(xs: &[f64]) -> MeanEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    MeanEstimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

/// `E[R*] = 1 + E[(max(w2, w3)^+)^2] = 7/4 + 1/(2 pi)`.
pub const MEAN_RSTAR: f64 = 1.75 + 0.5 * std::f64::consts::FRAC_1_PI;

/// `E[R]` from a fresh simulated table.
pub fn reference_mean_r(draws: usize, seed_value: u64) -> MeanEstimate {
    let law = RLaw::generate(seed_value, draws);
    MeanEstimate {
        mean: law.mean(),
        std_error: law.mean_std_error(),
    }
}

/// `E[R*]` by direct simulation of `max{w1^2 + (w2^+)^2, w1^2 + (w3^+)^2}`.
pub fn reference_mean_rstar(draws: usize, seed_value: u64) -> MeanEstimate {
    let xs: Vec<f64> = (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(seed_value, &[i]);
            let w: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let a = w[0] * w[0] + w[1].max(0.0).powi(2);
            let b = w[0] * w[0] + w[2].max(0.0).powi(2);
            a.max(b)
        })
        .collect();
    mean_and_se(&xs)
}

/// `E[R*]` as `1 + E[(max(w2, w3)^+)^2]`, simulating only the second term.
pub fn reference_mean_rstar_decomposed(draws: usize, seed_value: u64) -> MeanEstimate {
    let xs: Vec<f64> = (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(seed_value, &[i]);
            let w2: f64 = StandardNormal.sample(&mut rng);
            let w3: f64 = StandardNormal.sample(&mut rng);
            w2.max(w3).max(0.0).powi(2)
        })
        .collect();
    let m = mean_and_se(&xs);
    MeanEstimate {
        mean: 1.0 + m.mean,
        std_error: m.std_error,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// Fixed intercept `c`.
    pub intercept: f64,
    pub a: f64,
    pub b: f64,
    pub rss: f64,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.intercept + self.a * n.powf(-self.b)
    }
}

pub const B_BRACKET: (f64, f64) = (0.05, 3.0);

/// Least squares for `y = c + a n^-b`, profiling `b`: for fixed `b` the
/// optimal `a` is linear least squares, leaving a one-dimensional search.
pub fn fit_power_law(points: &[(f64, f64)], intercept: f64) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::Calibration(format!("need at least 3 points, got {}", points.len())));
    }
    let mut ns: Vec<f64> = points.iter().map(|p| p.0).collect();
    ns.sort_by(f64::total_cmp);
    if ns.windows(2).any(|w| w[0] == w[1]) || ns[0] <= 0.0 {
        return Err(Error::Calibration("sample sizes must be distinct and positive".into()));
    }
    if points.iter().all(|p| p.1 == intercept) {
        return Err(Error::Calibration("responses equal the intercept; exponent is unidentified".into()));
    }
    let profile = |b: f64| {
        let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), &(n, y)| {
            let x = n.powf(-b);
            (sxy + x * (y - intercept), sxx + x * x)
        });
        let a = sxy / sxx;
        let rss: f64 = points.iter().map(|&(n, y)| (y - intercept - a * n.powf(-b)).powi(2)).sum();
        (a, rss)
    };
    let (lo, hi) = B_BRACKET;
    let steps = 295;
    let h = (hi - lo) / steps as f64;
    let (k_best, _) = (0..=steps)
        .map(|k| (k, profile(lo + k as f64 * h).1))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    if k_best == 0 || k_best == steps {
        return Err(Error::Calibration(format!(
            "exponent minimum is not bracketed by [{lo}, {hi}]"
        )));
    }
    let center = lo + k_best as f64 * h;
    let (b, _) = golden_section(|b| profile(b).1, center - h, center + h, 1e-10);
    let (a, rss) = profile(b);
    Ok(PowerLawFit { intercept, a, b, rss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub test: TestId,
    pub kind: AdjustmentKind,
    pub intercept: f64,
    pub a: f64,
    pub b: f64,
    pub rss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProvenance {
    pub grid: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub low_precision: bool,
    pub r_table_seed: u64,
    pub r_table_size: usize,
    pub software_version: String,
}

/// Adjustment coefficients for the four tests plus how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsFile {
    pub format_version: u32,
    pub coefficients: Vec<CoefficientEntry>,
    pub provenance: Option<CalibrationProvenance>,
}

impl CoefficientsFile {
    pub fn from_set(set: &AdjustmentSet) -> Self {
        Self {
            format_version: 1,
            coefficients: TestId::ALL
                .iter()
                .map(|&t| {
                    let c = set.get(t);
                    CoefficientEntry {
                        test: t,
                        kind: c.kind,
                        intercept: c.kind.intercept(),
                        a: c.a,
                        b: c.b,
                        rss: 0.0,
                    }
                })
                .collect(),
            provenance: None,
        }
    }

    pub fn to_set(&self) -> Result<AdjustmentSet> {
        let mut set = AdjustmentSet::default();
        let mut seen = [false; 4];
        for e in &self.coefficients {
            if e.kind != kind_of(e.test) {
                return Err(Error::Config(format!("{} must use a {:?} adjustment", e.test, kind_of(e.test))));
            }
            *set.get_mut(e.test) = AdjustmentCoefficients::new(e.a, e.b, e.kind)?;
            seen[e.test.index()] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("coefficients file must cover all four tests".into()));
        }
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        f.to_set()?;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutput {
    pub records: Vec<MomentRecord>,
    pub targets: Vec<CalibrationTarget>,
    pub mean_r: f64,
    pub mean_rstar: f64,
    pub file: CoefficientsFile,
}

/// The whole pipeline: moments, targets, power-law fits.
pub fn calibrate(grid: &[usize], reps: usize, seed_value: u64, opts: &FitOptions, law: &RLaw) -> Result<CalibrationOutput> {
    let mut sorted = grid.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 3 {
        return Err(Error::Config(format!("grid needs at least 3 distinct sizes, got {}", sorted.len())));
    }
    let records = estimate_moments(&sorted, reps, seed_value, opts)?;
    let mean_r = law.mean();
    let mean_rstar = MEAN_RSTAR;
    let targets = moments_to_targets(&records, mean_r, mean_rstar);
    let mut coefficients = Vec::new();
    for test in TestId::ALL {
        let kind = kind_of(test);
        let pts: Vec<(f64, f64)> = targets
            .iter()
            .filter(|t| t.test == test)
            .map(|t| (t.n as f64, t.value))
            .collect();
        let f = fit_power_law(&pts, kind.intercept())?;
        coefficients.push(CoefficientEntry {
            test,
            kind,
            intercept: f.intercept,
            a: f.a,
            b: f.b,
            rss: f.rss,
        });
    }
    let file = CoefficientsFile {
        format_version: 1,
        coefficients,
        provenance: Some(CalibrationProvenance {
            grid: sorted,
            reps,
            seed: seed_value,
            low_precision: reps < FULL_PRECISION_REPS,
            r_table_seed: law.seed(),
            r_table_size: law.size(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
        }),
    };
    Ok(CalibrationOutput {
        records,
        targets,
        mean_r,
        mean_rstar,
        file,
    })
}
