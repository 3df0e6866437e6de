//! Data generation and rejection-rate studies.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::FitOptions;
use crate::model::{Theta, UnorderedDataset, UnorderedPair};
use crate::nulldist::{adjusted_pvalue, raw_pvalue, AdjustmentSet, RLaw, TestId};
use crate::seed;
use crate::stats::compute_statistics;

/// Replicate failure rate above which a study is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.005;

/// `n` unordered pairs from the bivariate normal `theta`.
pub fn generate_dataset<R: Rng + ?Sized>(n: usize, theta: &Theta, rng: &mut R) -> UnorderedDataset {
    let root = ((1.0 - theta.rho()) * (1.0 + theta.rho())).sqrt();
    let pairs = (0..n)
        .map(|_| {
            let u: f64 = StandardNormal.sample(rng);
            let v: f64 = StandardNormal.sample(rng);
            let x1 = theta.mu1() + theta.sigma1() * u;
            let x2 = theta.mu2() + theta.sigma2() * (theta.rho() * u + root * v);
            UnorderedPair::new(x1, x2)
        })
        .collect();
    UnorderedDataset::new(pairs).expect("n > 0 finite draws")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Limiting null law.
    Raw,
    /// Finite-sample adjusted law.
    Adjusted,
}

impl CalibrationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::Raw => "raw",
            CalibrationMode::Adjusted => "adjusted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub theta: Theta,
    pub reps: usize,
    /// Nominal significance levels, ascending.
    pub levels: Vec<f64>,
    pub seed: u64,
    pub tests: Vec<TestId>,
    pub modes: Vec<CalibrationMode>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub coefficients: AdjustmentSet,
}

impl ScenarioConfig {
    /// All four tests at 10%, 5% and 1%, both calibrations.
    pub fn new(n: usize, theta: Theta, reps: usize, seed: u64) -> Self {
        Self {
            n,
            theta,
            reps,
            levels: vec![0.01, 0.05, 0.10],
            seed,
            tests: TestId::ALL.to_vec(),
            modes: vec![CalibrationMode::Raw, CalibrationMode::Adjusted],
            fit: FitOptions::default(),
            coefficients: AdjustmentSet::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::Config("levels must lie in (0, 1)".into()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("levels must be strictly ascending".into()));
        }
        if self.tests.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("at least one test and one calibration mode required".into()));
        }
        let need = self
            .tests
            .iter()
            .map(|&t| crate::stats::regimes(t).0.min_pairs())
            .max()
            .unwrap_or(0);
        if self.n < need {
            return Err(Error::Config(format!("n = {} is below the minimum {need} for the selected tests", self.n)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionEntry {
    pub test: TestId,
    pub level: f64,
    pub mode: CalibrationMode,
    pub rejections: usize,
    /// Rejection percentage over the replicates that completed.
    pub percent: f64,
    /// Monte Carlo standard error of `percent`.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionTable {
    pub config: ScenarioConfig,
    pub reps_used: usize,
    pub failures: usize,
    pub entries: Vec<RejectionEntry>,
}

impl RejectionTable {
    pub fn entry(&self, test: TestId, level: f64, mode: CalibrationMode) -> Option<&RejectionEntry> {
        self.entries
            .iter()
            .find(|e| e.test == test && e.mode == mode && (e.level - level).abs() < 1e-12)
    }

    pub fn percent(&self, test: TestId, level: f64, mode: CalibrationMode) -> Option<f64> {
        self.entry(test, level, mode).map(|e| e.percent)
    }

    /// CSV body with a `#`-prefixed metadata header echoing the configuration.
    pub fn to_csv(&self, extra_meta: &[(&str, String)]) -> String {
        let c = &self.config;
        let t = c.theta;
        let mut out = String::new();
        out.push_str(&format!("# software: upair {}\n", env!("CARGO_PKG_VERSION")));
        for (k, v) in extra_meta {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        out.push_str(&format!("# n: {}\n", c.n));
        out.push_str(&format!(
            "# theta: mu1={:?} mu2={:?} sigma1={:?} sigma2={:?} rho={:?}\n",
            t.mu1(),
            t.mu2(),
            t.sigma1(),
            t.sigma2(),
            t.rho()
        ));
        out.push_str(&format!("# reps: {}\n# seed: {}\n", c.reps, c.seed));
        out.push_str(&format!("# reps_used: {}\n# failures: {}\n", self.reps_used, self.failures));
        out.push_str("test,level,mode,rejections,percent,std_error\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{:?},{},{},{:.6},{:.6}\n",
                e.test.key(),
                e.level,
                e.mode.as_str(),
                e.rejections,
                e.percent,
                e.std_error
            ));
        }
        out
    }
}

/// Per-replicate p-values, indexed `[test][mode]`.
type ReplicatePValues = [[Option<f64>; 2]; 4];

fn replicate(cfg: &ScenarioConfig, law: &RLaw, index: u64) -> Result<ReplicatePValues> {
    let mut rng = seed::stream(cfg.seed, &[index]);
    let ds = generate_dataset(cfg.n, &cfg.theta, &mut rng);
    let fit = FitOptions {
        seed: seed::derive_seed(cfg.fit.seed, &[index]),
        ..cfg.fit
    };
    let stats = compute_statistics(&ds, &cfg.tests, &fit);
    let mut out: ReplicatePValues = [[None; 2]; 4];
    for test in TestId::ALL {
        let Some(stat) = &stats[test.index()] else { continue };
        let t = match stat {
            Ok(t) => *t,
            Err(e) => return Err(Error::FitFailed(e.to_string())),
        };
        for &mode in &cfg.modes {
            let p = match mode {
                CalibrationMode::Raw => raw_pvalue(test, t, law)?,
                CalibrationMode::Adjusted => adjusted_pvalue(test, t, cfg.n, &cfg.coefficients, law)?.p,
            };
            out[test.index()][mode as usize] = Some(p);
        }
    }
    Ok(out)
}

/// Rejection percentages for every selected test, level and calibration.
///
/// Replicate `i` draws its data from its own stream; failed replicates are
/// excluded and counted, and the study aborts above [`MAX_FAILURE_RATE`].
pub fn rejection_study(cfg: &ScenarioConfig, law: &RLaw) -> Result<RejectionTable> {
    cfg.validate()?;
    let results: Vec<Result<ReplicatePValues>> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|i| replicate(cfg, law, i))
        .collect();
    let failures = results.iter().filter(|r| r.is_err()).count();
    if failures as f64 > MAX_FAILURE_RATE * cfg.reps as f64 {
        return Err(Error::TooManyFailures { failures, attempted: cfg.reps });
    }
    let ok: Vec<&ReplicatePValues> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let used = ok.len();
    let mut entries = Vec::new();
    for &test in &cfg.tests {
        for &mode in &cfg.modes {
            for &level in &cfg.levels {
                let rejections = ok
                    .iter()
                    .filter(|p| p[test.index()][mode as usize].is_some_and(|p| p <= level))
                    .count();
                let frac = if used > 0 { rejections as f64 / used as f64 } else { 0.0 };
                entries.push(RejectionEntry {
                    test,
                    level,
                    mode,
                    rejections,
                    percent: 100.0 * frac,
                    std_error: 100.0 * (frac * (1.0 - frac) / used.max(1) as f64).sqrt(),
                });
            }
        }
    }
    Ok(RejectionTable {
        config: cfg.clone(),
        reps_used: used,
        failures,
        entries,
    })
}
