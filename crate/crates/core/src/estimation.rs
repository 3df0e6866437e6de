//! Maximum-likelihood estimation of [`Theta`] under the six constraint regimes.
//!
//! Fits run on standardized data in `(Z1, Z2)` coordinates. The normal block
//! `(mu, sigma_plus)` is profiled out in closed form wherever it separates,
//! so every numerical problem is at most three-dimensional.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{from_reparam, log_likelihood, to_reparam, ReparamTheta, Theta, UnorderedDataset, ZData};
use crate::optim::{bfgs, nelder_mead, QuasiNewtonSettings, SimplexSettings};
use crate::seed;
use crate::special::LN_SQRT_2PI;

/// Largest admissible `|atanh rho|` before a fit is flagged as near-singular.
pub const ATANH_RHO_CAP: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Constraint {
    /// `(mu1, sigma1) = (mu2, sigma2)`, `rho = 0`.
    NullRho0,
    /// `sigma1 = sigma2`, `rho = 0`.
    EqvarRho0,
    /// `rho = 0`.
    FreeRho0,
    /// `(mu1, sigma1) = (mu2, sigma2)`.
    NullRhoFree,
    /// `sigma1 = sigma2`.
    EqvarRhoFree,
    Free,
}

impl Constraint {
    pub const ALL: [Constraint; 6] = [
        Constraint::NullRho0,
        Constraint::EqvarRho0,
        Constraint::FreeRho0,
        Constraint::NullRhoFree,
        Constraint::EqvarRhoFree,
        Constraint::Free,
    ];

    pub fn free_parameters(self) -> usize {
        match self {
            Constraint::NullRho0 => 2,
            Constraint::EqvarRho0 | Constraint::NullRhoFree => 3,
            Constraint::FreeRho0 | Constraint::EqvarRhoFree => 4,
            Constraint::Free => 5,
        }
    }

    /// Smallest sample size accepted by [`fit`].
    pub fn min_pairs(self) -> usize {
        self.free_parameters() + 2
    }

    pub fn rho_fixed(self) -> bool {
        matches!(self, Constraint::NullRho0 | Constraint::EqvarRho0 | Constraint::FreeRho0)
    }

    fn level(self) -> u8 {
        match self {
            Constraint::NullRho0 | Constraint::NullRhoFree => 0,
            Constraint::EqvarRho0 | Constraint::EqvarRhoFree => 1,
            Constraint::FreeRho0 | Constraint::Free => 2,
        }
    }

    /// Whether every parameter admissible under `self` is admissible under `other`.
    pub fn is_nested_in(self, other: Constraint) -> bool {
        self.level() <= other.level() && (self.rho_fixed() || !other.rho_fixed())
    }

    fn index(self) -> u64 {
        Constraint::ALL.iter().position(|&c| c == self).unwrap() as u64
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Constraint::NullRho0 => "NULL_RHO0",
            Constraint::EqvarRho0 => "EQVAR_RHO0",
            Constraint::FreeRho0 => "FREE_RHO0",
            Constraint::NullRhoFree => "NULL_RHOFREE",
            Constraint::EqvarRhoFree => "EQVAR_RHOFREE",
            Constraint::Free => "FREE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Simplex convergence tolerance on the log-likelihood.
    pub tolerance: f64,
    /// Simplex convergence tolerance on the internal parameters.
    pub param_tolerance: f64,
    pub max_iter: usize,
    /// Random perturbations of the null start.
    pub random_starts: usize,
    /// Standard deviation of those perturbations, relative to each coordinate's magnitude (at least 1).
    pub perturbation_scale: f64,
    pub seed: u64,
    /// Quasi-Newton refinement of each simplex solution.
    pub polish: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            param_tolerance: 1e-8,
            max_iter: 5000,
            random_starts: 8,
            perturbation_scale: 0.25,
            seed: 0x5EED,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Theta,
    pub loglik: f64,
    pub constraint: Constraint,
    pub n_starts: usize,
    pub converged: bool,
    pub best_start_index: usize,
    /// The estimate has `|atanh rho|` beyond [`ATANH_RHO_CAP`].
    pub near_singular: bool,
}

/// Location/scale used to standardize a dataset: pooled mean and
/// root-mean-square deviation of all `2n` values.
#[derive(Debug, Clone, Copy)]
struct Standardizer {
    center: f64,
    scale: f64,
}

impl Standardizer {
    fn of(ds: &UnorderedDataset) -> Result<Self> {
        let n2 = 2.0 * ds.len() as f64;
        let center = ds.pairs().iter().map(|p| p.lo() + p.hi()).sum::<f64>() / n2;
        let ss: f64 = ds
            .pairs()
            .iter()
            .map(|p| (p.lo() - center).powi(2) + (p.hi() - center).powi(2))
            .sum();
        let scale = (ss / n2).sqrt();
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::DegenerateData("all observed values are identical".into()));
        }
        Ok(Self { center, scale })
    }

    fn apply(&self, ds: &UnorderedDataset) -> Result<UnorderedDataset> {
        ds.affine(1.0 / self.scale, -self.center / self.scale)
    }

    fn to_internal(self, theta: &Theta) -> Result<Theta> {
        theta.affine(1.0 / self.scale, -self.center / self.scale)
    }

    fn to_external(self, theta: &Theta) -> Result<Theta> {
        theta.affine(self.scale, self.center)
    }
}

fn check_degenerate(ds: &UnorderedDataset) -> Result<()> {
    let p = ds.pairs();
    if p.iter().all(|q| q.lo() == q.hi()) {
        return Err(Error::DegenerateData("every pair is tied".into()));
    }
    let mid0 = p[0].lo() + p[0].hi();
    if p.iter().all(|q| q.lo() + q.hi() == mid0) {
        return Err(Error::DegenerateData("all pair midpoints are equal".into()));
    }
    Ok(())
}

/// Closed-form MLE under exchangeability, with `rho = 0` or `rho` free.
pub fn closed_form_null(ds: &UnorderedDataset, rho_free: bool) -> Result<Theta> {
    let ds = &ds.canonical_order();
    let n = ds.len() as f64;
    if !rho_free {
        let st = Standardizer::of(ds)?;
        return Theta::exchangeable(st.center, st.scale, 0.0);
    }
    let z = ZData::from_dataset(ds);
    let mean = z.z1.iter().sum::<f64>() / n;
    let var_plus = z.z1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let var_minus = z.z2.iter().map(|v| v * v).sum::<f64>() / n;
    if !(var_plus > 0.0) {
        return Err(Error::DegenerateData("pair midpoints have zero variance".into()));
    }
    if !(var_minus > 0.0) {
        return Err(Error::DegenerateData("every pair is tied".into()));
    }
    let var = var_plus + var_minus;
    Theta::exchangeable(mean, var.sqrt(), (var_plus - var_minus) / var)
}

/// Internal problem for one regime, on standardized data.
struct Problem<'a> {
    z: &'a ZData,
    constraint: Constraint,
    n: f64,
    mean1: f64,
    s11: f64,
}

impl<'a> Problem<'a> {
    fn new(z: &'a ZData, constraint: Constraint) -> Self {
        let n = z.len() as f64;
        let mean1 = z.z1.iter().sum::<f64>() / n;
        let s11 = z.z1.iter().map(|v| (v - mean1).powi(2)).sum::<f64>();
        Self { z, constraint, n, mean1, s11 }
    }

    fn dim(&self) -> usize {
        match self.constraint {
            Constraint::EqvarRho0 | Constraint::EqvarRhoFree => 2,
            Constraint::FreeRho0 | Constraint::Free => 3,
            Constraint::NullRho0 | Constraint::NullRhoFree => 0,
        }
    }

    /// `sum ln phi(Z1; mean1, sigma_plus)`.
    fn normal_part(&self, sigma_plus: f64) -> f64 {
        -self.n * (sigma_plus.ln() + LN_SQRT_2PI) - 0.5 * self.s11 / (sigma_plus * sigma_plus)
    }

    fn profiled_sigma_plus(&self) -> f64 {
        (self.s11 / self.n).sqrt()
    }

    fn reparam(&self, u: &[f64]) -> ReparamTheta {
        let (sigma_plus, beta0, beta1, eta) = match self.constraint {
            Constraint::EqvarRho0 => {
                let sp = u[0].exp();
                (sp, u[1], 0.0, sp)
            }
            Constraint::FreeRho0 => {
                let sp = u[0].exp();
                let c = u[2].clamp(-ATANH_RHO_CAP * 4.0, ATANH_RHO_CAP * 4.0);
                (sp, u[1], c.tanh(), sp / c.cosh())
            }
            Constraint::EqvarRhoFree => (self.profiled_sigma_plus(), u[0], 0.0, u[1].exp()),
            Constraint::Free => (self.profiled_sigma_plus(), u[0], u[1], u[2].exp()),
            Constraint::NullRho0 | Constraint::NullRhoFree => unreachable!("closed-form regimes"),
        };
        ReparamTheta { mu: self.mean1, sigma_plus, beta0, beta1, eta }
    }

    fn loglik(&self, u: &[f64]) -> f64 {
        let r = self.reparam(u);
        let mix = self.z.mixture_part(r.beta0, r.beta1, r.eta);
        if self.constraint.rho_fixed() {
            mix + self.normal_part(r.sigma_plus)
        } else {
            mix
        }
    }

    fn loglik_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let r = self.reparam(u);
        let mut g = [0.0; 3];
        let mix = self.z.mixture_part_grad(r.beta0, r.beta1, r.eta, &mut g);
        match self.constraint {
            Constraint::EqvarRho0 => {
                let sp2 = r.sigma_plus * r.sigma_plus;
                grad[0] = -self.n + self.s11 / sp2 + g[2] * r.eta;
                grad[1] = g[0];
                mix + self.normal_part(r.sigma_plus)
            }
            Constraint::FreeRho0 => {
                let sp2 = r.sigma_plus * r.sigma_plus;
                grad[0] = -self.n + self.s11 / sp2 + g[2] * r.eta;
                grad[1] = g[0];
                grad[2] = g[1] * (1.0 - r.beta1 * r.beta1) - g[2] * r.eta * r.beta1;
                mix + self.normal_part(r.sigma_plus)
            }
            Constraint::EqvarRhoFree => {
                grad[0] = g[0];
                grad[1] = g[2] * r.eta;
                mix
            }
            Constraint::Free => {
                grad[0] = g[0];
                grad[1] = g[1];
                grad[2] = g[2] * r.eta;
                mix
            }
            Constraint::NullRho0 | Constraint::NullRhoFree => unreachable!("closed-form regimes"),
        }
    }

    /// Internal coordinates of a start, after projecting it onto the regime.
    fn project(&self, theta: &Theta) -> Vec<f64> {
        let rho = theta.rho().clamp(-0.95, 0.95);
        match self.constraint {
            Constraint::EqvarRho0 => {
                let s = (0.5 * (theta.sigma1().powi(2) + theta.sigma2().powi(2))).sqrt();
                let delta = 0.5 * (theta.mu1() - theta.mu2());
                vec![(s / 2f64.sqrt()).ln(), delta]
            }
            Constraint::FreeRho0 => {
                let (s1, s2) = (theta.sigma1(), theta.sigma2());
                let s1sq = s1 * s1;
                let s2sq = s2 * s2;
                let beta1 = ((s1sq - s2sq) / (s1sq + s2sq)).clamp(-0.95, 0.95);
                let sp = (0.25 * (s1sq + s2sq)).sqrt();
                let delta = 0.5 * (theta.mu1() - theta.mu2());
                vec![sp.ln(), delta - self.mean1 * beta1, beta1.atanh()]
            }
            Constraint::EqvarRhoFree => {
                let t = Theta::new(theta.mu1(), theta.mu2(), theta.sigma1(), theta.sigma2(), rho)
                    .expect("clamped start is valid");
                let r = to_reparam(&t);
                vec![r.delta(), r.sigma_minus().ln()]
            }
            Constraint::Free => {
                let t = Theta::new(theta.mu1(), theta.mu2(), theta.sigma1(), theta.sigma2(), rho)
                    .expect("clamped start is valid");
                let r = to_reparam(&t);
                vec![r.delta() - self.mean1 * r.beta1, r.beta1, r.eta.ln()]
            }
            Constraint::NullRho0 | Constraint::NullRhoFree => Vec::new(),
        }
    }

    fn theta(&self, u: &[f64]) -> Result<(Theta, bool)> {
        let r = self.reparam(u);
        let t = from_reparam(&r)?;
        let near_singular = t.rho().atanh().abs() > ATANH_RHO_CAP
            || (self.constraint == Constraint::FreeRho0 && u[2].abs() > ATANH_RHO_CAP);
        let t = match self.constraint {
            Constraint::EqvarRho0 => Theta::new(t.mu1(), t.mu2(), t.sigma1(), t.sigma1(), 0.0)?,
            Constraint::FreeRho0 => Theta::new(t.mu1(), t.mu2(), t.sigma1(), t.sigma2(), 0.0)?,
            Constraint::EqvarRhoFree => Theta::new(t.mu1(), t.mu2(), t.sigma1(), t.sigma1(), t.rho())?,
            _ => t,
        };
        Ok((t, near_singular))
    }
}

/// Moment start: treat the sorted columns as if they were the subunits.
fn moment_start(ds: &UnorderedDataset) -> Option<Theta> {
    let n = ds.len() as f64;
    let lo: Vec<f64> = ds.pairs().iter().map(|p| p.lo()).collect();
    let hi: Vec<f64> = ds.pairs().iter().map(|p| p.hi()).collect();
    let m1 = lo.iter().sum::<f64>() / n;
    let m2 = hi.iter().sum::<f64>() / n;
    let v1 = lo.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / n;
    let v2 = hi.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / n;
    let c = lo.iter().zip(&hi).map(|(a, b)| (a - m1) * (b - m2)).sum::<f64>() / n;
    let floor = 1e-6 * (v1 + v2).max(1e-300);
    let (v1, v2) = (v1.max(floor), v2.max(floor));
    let rho = (c / (v1 * v2).sqrt()).clamp(-0.95, 0.95);
    Theta::new(m1, m2, v1.sqrt(), v2.sqrt(), if rho.is_finite() { rho } else { 0.0 }).ok()
}

#[allow(clippy::too_many_arguments)]
fn finish(
    ds: &UnorderedDataset,
    st: &Standardizer,
    theta_internal: Theta,
    constraint: Constraint,
    n_starts: usize,
    converged: bool,
    best_start_index: usize,
    near_singular: bool,
) -> Result<FitResult> {
    let mut t = st.to_external(&theta_internal)?.canonical();
    // Affine maps preserve sigma1 == sigma2 and rho == 0 exactly, but restate them.
    match constraint {
        Constraint::NullRho0 => t = Theta::exchangeable(t.mu1(), t.sigma1(), 0.0)?,
        Constraint::NullRhoFree => t = Theta::exchangeable(t.mu1(), t.sigma1(), t.rho())?,
        _ => {}
    }
    Ok(FitResult {
        loglik: log_likelihood(ds, &t),
        theta_hat: t,
        constraint,
        n_starts,
        converged,
        best_start_index,
        near_singular,
    })
}

/// Maximize the log-likelihood under `constraint`.
pub fn fit(ds: &UnorderedDataset, constraint: Constraint, opts: &FitOptions) -> Result<FitResult> {
    fit_with_hints(ds, constraint, opts, &[])
}

/// [`fit`] with additional starting points, typically the optimum of a
/// nested regime; including it guarantees the returned log-likelihood is at
/// least the nested one.
pub fn fit_with_hints(
    ds: &UnorderedDataset,
    constraint: Constraint,
    opts: &FitOptions,
    hints: &[Theta],
) -> Result<FitResult> {
    if ds.len() < constraint.min_pairs() {
        return Err(Error::DegenerateData(format!(
            "{} needs at least {} pairs, got {}",
            constraint,
            constraint.min_pairs(),
            ds.len()
        )));
    }
    let ds = &ds.canonical_order();
    check_degenerate(ds)?;
    let st = Standardizer::of(ds)?;
    let sds = st.apply(ds)?;

    match constraint {
        Constraint::NullRho0 | Constraint::NullRhoFree => {
            let t = closed_form_null(&sds, constraint == Constraint::NullRhoFree)?;
            return finish(ds, &st, t, constraint, 1, true, 0, t.rho().atanh().abs() > ATANH_RHO_CAP);
        }
        _ => {}
    }

    let z = ZData::from_dataset(&sds);
    let problem = Problem::new(&z, constraint);
    let dim = problem.dim();

    let null = closed_form_null(&sds, !constraint.rho_fixed())?;
    let mut starts: Vec<Vec<f64>> = vec![problem.project(&null)];
    if let Some(m) = moment_start(&sds) {
        starts.push(problem.project(&m));
        starts.push(problem.project(&m.swapped()));
    }
    let base = starts[0].clone();
    for k in 0..opts.random_starts {
        let mut rng = seed::stream(opts.seed, &[constraint.index(), k as u64]);
        starts.push(
            base.iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + opts.perturbation_scale * v.abs().max(1.0) * e
                })
                .collect(),
        );
    }
    for h in hints {
        let mut h = st.to_internal(h)?;
        if constraint.rho_fixed() {
            h = Theta::new(h.mu1(), h.mu2(), h.sigma1(), h.sigma2(), 0.0)?;
        }
        starts.push(problem.project(&h));
    }

    let simplex = SimplexSettings {
        f_tol: opts.tolerance,
        x_tol: opts.param_tolerance,
        max_iter: opts.max_iter,
    };
    let neg = |u: &[f64]| -problem.loglik(u);
    let neg_grad = |u: &[f64], g: &mut [f64]| {
        let v = problem.loglik_grad(u, g);
        g.iter_mut().for_each(|x| *x = -*x);
        -v
    };
    let step = vec![0.25; dim];

    let mut best: Option<(f64, Vec<f64>, bool, usize)> = None;
    for (idx, x0) in starts.iter().enumerate() {
        if !neg(x0).is_finite() {
            continue;
        }
        let m = nelder_mead(neg, x0, &step, simplex);
        let (mut f, mut x, mut ok) = (m.f, m.x, m.converged);
        if opts.polish && f.is_finite() {
            let q = bfgs(neg_grad, &x, QuasiNewtonSettings::default());
            if q.f < f {
                ok = ok || q.converged;
                f = q.f;
                x = q.x;
            }
        }
        if !f.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(bf, ..)| f < *bf) {
            best = Some((f, x, ok, idx));
        }
    }

    let (_, x, converged, idx) = best.ok_or_else(|| {
        Error::DegenerateData(format!("log-likelihood is not finite at any start under {constraint}"))
    })?;
    let (t, near_singular) = problem.theta(&x)?;
    let result = finish(ds, &st, t, constraint, starts.len(), converged, idx, near_singular)?;
    if !converged {
        return Err(Error::NonConvergence {
            constraint,
            starts: starts.len(),
            best: Box::new(result),
        });
    }
    Ok(result)
}
