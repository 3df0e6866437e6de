//! The four likelihood-ratio statistics and the assembled test report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_with_hints, Constraint, FitOptions, FitResult};
use crate::model::{Theta, UnorderedDataset};
use crate::nulldist::{adjusted_pvalue, raw_pvalue, AdjustmentSet, RLaw, TestId};
use crate::seed;

/// Statistics within this distance below zero are clamped to zero.
pub const NEGATIVE_SLACK: f64 = 1e-6;

/// The two regimes whose log-likelihoods a statistic compares, `(larger, null)`.
pub fn regimes(test: TestId) -> (Constraint, Constraint) {
    match test {
        TestId::Rn1 => (Constraint::EqvarRho0, Constraint::NullRho0),
        TestId::Rn2 => (Constraint::FreeRho0, Constraint::NullRho0),
        TestId::Rn1Star => (Constraint::EqvarRhoFree, Constraint::NullRhoFree),
        TestId::Rn2Star => (Constraint::Free, Constraint::NullRhoFree),
    }
}

/// Lazily computed constrained fits of one dataset.
///
/// Fits are computed in the fixed order of [`Constraint::ALL`]; each numeric
/// fit also starts from every already-computed non-null fit nested in it.
pub struct FitSet<'a> {
    ds: UnorderedDataset,
    opts: &'a FitOptions,
    fits: [Option<std::result::Result<FitResult, String>>; 6],
}

impl<'a> FitSet<'a> {
    pub fn new(ds: &UnorderedDataset, opts: &'a FitOptions) -> Self {
        Self {
            ds: ds.canonical_order(),
            opts,
            fits: Default::default(),
        }
    }

    fn slot(c: Constraint) -> usize {
        Constraint::ALL.iter().position(|&k| k == c).unwrap()
    }

    /// Compute every constraint in `wanted` (in canonical order).
    pub fn ensure(&mut self, wanted: &[Constraint]) {
        for c in Constraint::ALL {
            if !wanted.contains(&c) || self.fits[Self::slot(c)].is_some() {
                continue;
            }
            let hints: Vec<Theta> = Constraint::ALL
                .iter()
                .filter(|&&k| k != c && k.is_nested_in(c) && !matches!(k, Constraint::NullRho0 | Constraint::NullRhoFree))
                .filter_map(|&k| self.fits[Self::slot(k)].as_ref().and_then(|r| r.as_ref().ok()))
                .map(|r| r.theta_hat)
                .collect();
            let opts = FitOptions {
                seed: seed::derive_seed(self.opts.seed, &[Self::slot(c) as u64]),
                ..*self.opts
            };
            let r = fit_with_hints(&self.ds, c, &opts, &hints).map_err(|e| e.to_string());
            self.fits[Self::slot(c)] = Some(r);
        }
    }

    pub fn get(&mut self, c: Constraint) -> std::result::Result<&FitResult, String> {
        self.ensure(&[c]);
        self.fits[Self::slot(c)].as_ref().unwrap().as_ref().map_err(|e| e.clone())
    }

    pub fn statistic(&mut self, test: TestId) -> Result<f64> {
        let (alt, null) = regimes(test);
        self.ensure(&[alt, null]);
        let la = self.get(alt).map_err(Error::FitFailed)?.loglik;
        let l0 = self.get(null).map_err(Error::FitFailed)?.loglik;
        clamp_statistic(test, 2.0 * (la - l0))
    }

    /// All six fits in canonical order (computing any that are missing).
    pub fn all(mut self) -> Vec<FitOutcome> {
        self.ensure(&Constraint::ALL);
        Constraint::ALL
            .iter()
            .zip(self.fits)
            .map(|(&constraint, r)| match r.unwrap() {
                Ok(fit) => FitOutcome { constraint, fit: Some(fit), error: None },
                Err(e) => FitOutcome { constraint, fit: None, error: Some(e) },
            })
            .collect()
    }
}

fn clamp_statistic(test: TestId, value: f64) -> Result<f64> {
    if value < -NEGATIVE_SLACK || value.is_nan() {
        return Err(Error::NegativeStatistic { test: test.label(), value });
    }
    Ok(value.max(0.0))
}

/// `(R_{n,1}, R_{n,2})`, both assuming `rho = 0`.
pub fn lrt_rho0(ds: &UnorderedDataset, opts: &FitOptions) -> Result<(f64, f64)> {
    let mut fits = FitSet::new(ds, opts);
    fits.ensure(&[Constraint::NullRho0, Constraint::EqvarRho0, Constraint::FreeRho0]);
    Ok((fits.statistic(TestId::Rn1)?, fits.statistic(TestId::Rn2)?))
}

/// `(R*_{n,1}, R*_{n,2})`, with `rho` unknown.
pub fn lrt_rho_free(ds: &UnorderedDataset, opts: &FitOptions) -> Result<(f64, f64)> {
    let mut fits = FitSet::new(ds, opts);
    fits.ensure(&[Constraint::NullRhoFree, Constraint::EqvarRhoFree, Constraint::Free]);
    Ok((fits.statistic(TestId::Rn1Star)?, fits.statistic(TestId::Rn2Star)?))
}

/// Compute only the requested statistics, in [`TestId`] order.
pub fn compute_statistics(ds: &UnorderedDataset, tests: &[TestId], opts: &FitOptions) -> [Option<Result<f64>>; 4] {
    let mut fits = FitSet::new(ds, opts);
    let wanted: Vec<Constraint> = tests
        .iter()
        .flat_map(|&t| {
            let (a, b) = regimes(t);
            [a, b]
        })
        .collect();
    fits.ensure(&wanted);
    TestId::ALL.map(|t| tests.contains(&t).then(|| fits.statistic(t)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub constraint: Constraint,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test: TestId,
    pub statistic: Option<f64>,
    /// p-value against the limiting law.
    pub p_raw: Option<f64>,
    /// p-value against the finite-sample adjusted law.
    pub p_adj: Option<f64>,
    pub adjustment_clipped: bool,
    /// `p_raw`/`p_adj` sit at the Monte Carlo floor `1/(N+1)` of the `R` table.
    pub below_resolution: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub n: usize,
    pub tests: Vec<TestOutcome>,
    pub fits: Vec<FitOutcome>,
}

impl TestReport {
    pub fn outcome(&self, test: TestId) -> &TestOutcome {
        &self.tests[test.index()]
    }

    pub fn statistic(&self, test: TestId) -> Option<f64> {
        self.outcome(test).statistic
    }

    pub fn rn1(&self) -> Option<f64> {
        self.statistic(TestId::Rn1)
    }
    pub fn rn2(&self) -> Option<f64> {
        self.statistic(TestId::Rn2)
    }
    pub fn rn1_star(&self) -> Option<f64> {
        self.statistic(TestId::Rn1Star)
    }
    pub fn rn2_star(&self) -> Option<f64> {
        self.statistic(TestId::Rn2Star)
    }

    pub fn is_complete(&self) -> bool {
        self.tests.iter().all(|t| t.error.is_none())
    }

    pub fn fit(&self, c: Constraint) -> Option<&FitResult> {
        self.fits.iter().find(|f| f.constraint == c).and_then(|f| f.fit.as_ref())
    }
}

/// Fit all six regimes, form the four statistics and their p-values.
/// Failures are recorded per test rather than aborting the report.
pub fn run_all(ds: &UnorderedDataset, opts: &FitOptions, coeffs: &AdjustmentSet, law: &RLaw) -> TestReport {
    let mut fits = FitSet::new(ds, opts);
    fits.ensure(&Constraint::ALL);
    let n = ds.len();
    let tests = TestId::ALL
        .iter()
        .map(|&test| {
            let outcome = fits.statistic(test).and_then(|t| {
                let raw = raw_pvalue(test, t, law)?;
                let adj = adjusted_pvalue(test, t, n, coeffs, law)?;
                Ok((t, raw, adj))
            });
            match outcome {
                Ok((t, raw, adj)) => TestOutcome {
                    test,
                    statistic: Some(t),
                    p_raw: Some(raw),
                    p_adj: Some(adj.p),
                    adjustment_clipped: adj.clipped,
                    below_resolution: test == TestId::Rn2 && raw.min(adj.p) <= law.resolution(),
                    error: None,
                },
                Err(e) => TestOutcome {
                    test,
                    statistic: None,
                    p_raw: None,
                    p_adj: None,
                    adjustment_clipped: false,
                    below_resolution: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    TestReport {
        n,
        tests,
        fits: fits.all(),
    }
}
