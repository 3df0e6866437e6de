//! Bivariate normal model for unordered pairs: parameters, the pair density,
//! the log-likelihood and its half-sum/half-difference decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_cosh, log_add_exp, norm_log_pdf, LN_SQRT_2PI};

/// Parameters `(mu1, mu2, sigma1, sigma2, rho)` of the latent pair `(X1, X2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTheta", into = "RawTheta")]
pub struct Theta {
    mu1: f64,
    mu2: f64,
    sigma1: f64,
    sigma2: f64,
    rho: f64,
}

#[derive(Serialize, Deserialize)]
struct RawTheta {
    mu1: f64,
    mu2: f64,
    sigma1: f64,
    sigma2: f64,
    rho: f64,
}

impl TryFrom<RawTheta> for Theta {
    type Error = Error;
    fn try_from(r: RawTheta) -> Result<Self> {
        Theta::new(r.mu1, r.mu2, r.sigma1, r.sigma2, r.rho)
    }
}

impl From<Theta> for RawTheta {
    fn from(t: Theta) -> Self {
        RawTheta {
            mu1: t.mu1,
            mu2: t.mu2,
            sigma1: t.sigma1,
            sigma2: t.sigma2,
            rho: t.rho,
        }
    }
}

impl Theta {
    pub fn new(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64, rho: f64) -> Result<Self> {
        if !(mu1.is_finite() && mu2.is_finite()) {
            return Err(Error::ParameterDomain(format!("non-finite location ({mu1}, {mu2})")));
        }
        if !(sigma1 > 0.0 && sigma2 > 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "scales must be positive and finite, got ({sigma1}, {sigma2})"
            )));
        }
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::ParameterDomain(format!("correlation must lie in (-1, 1), got {rho}")));
        }
        Ok(Self { mu1, mu2, sigma1, sigma2, rho })
    }

    /// Exchangeable parameters: `mu1 = mu2 = mu`, `sigma1 = sigma2 = sigma`.
    pub fn exchangeable(mu: f64, sigma: f64, rho: f64) -> Result<Self> {
        Self::new(mu, mu, sigma, sigma, rho)
    }

    pub fn mu1(&self) -> f64 {
        self.mu1
    }
    pub fn mu2(&self) -> f64 {
        self.mu2
    }
    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.mu1, self.mu2, self.sigma1, self.sigma2, self.rho]
    }

    /// Relabel the subunits: `(mu1, sigma1) <-> (mu2, sigma2)`.
    pub fn swapped(&self) -> Self {
        Self {
            mu1: self.mu2,
            mu2: self.mu1,
            sigma1: self.sigma2,
            sigma2: self.sigma1,
            rho: self.rho,
        }
    }

    /// Parameters of `(a X1 + b, a X2 + b)` for nonzero `a`.
    pub fn affine(&self, a: f64, b: f64) -> Result<Self> {
        if !(a != 0.0 && a.is_finite()) {
            return Err(Error::ParameterDomain(format!("affine scale must be finite and nonzero, got {a}")));
        }
        let s = a.abs();
        Self::new(a * self.mu1 + b, a * self.mu2 + b, s * self.sigma1, s * self.sigma2, self.rho)
    }

    /// The label-swap representative with `mu1 <= mu2`, ties broken by `sigma1 <= sigma2`.
    pub fn canonical(&self) -> Self {
        if self.mu1 > self.mu2 || (self.mu1 == self.mu2 && self.sigma1 > self.sigma2) {
            self.swapped()
        } else {
            *self
        }
    }

    /// `ln phi(x1, x2; theta)` from the explicit quadratic form.
    #[inline]
    pub fn bivariate_log_density(&self, x1: f64, x2: f64) -> f64 {
        let d1 = (x1 - self.mu1) / self.sigma1;
        let d2 = (x2 - self.mu2) / self.sigma2;
        let one_minus = (1.0 - self.rho) * (1.0 + self.rho);
        let q = (d1 * d1 - 2.0 * self.rho * d1 * d2 + d2 * d2) / one_minus;
        -2.0 * LN_SQRT_2PI - self.sigma1.ln() - self.sigma2.ln() - 0.5 * one_minus.ln() - 0.5 * q
    }
}

/// Half-sum / half-difference coordinates `(mu, sigma_plus, beta0, beta1, eta)`.
///
/// With `Z1 = (X1 + X2)/2`, `Z2 = (X1 - X2)/2`, the conditional law of `Z2`
/// given `Z1` is `N(beta0 + beta1 Z1, eta^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamTheta {
    pub mu: f64,
    pub sigma_plus: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub eta: f64,
}

impl ReparamTheta {
    pub fn new(mu: f64, sigma_plus: f64, beta0: f64, beta1: f64, eta: f64) -> Result<Self> {
        if ![mu, sigma_plus, beta0, beta1, eta].iter().all(|v| v.is_finite()) {
            return Err(Error::ParameterDomain("non-finite reparameterized value".into()));
        }
        if !(sigma_plus > 0.0 && eta > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "sigma_plus and eta must be positive, got ({sigma_plus}, {eta})"
            )));
        }
        Ok(Self { mu, sigma_plus, beta0, beta1, eta })
    }

    /// `(mu1 - mu2) / 2`.
    pub fn delta(&self) -> f64 {
        self.beta0 + self.mu * self.beta1
    }

    pub fn sigma_minus(&self) -> f64 {
        self.eta.hypot(self.beta1 * self.sigma_plus)
    }

    /// Correlation of `Z1` and `Z2`.
    pub fn xi(&self) -> f64 {
        self.beta1 * self.sigma_plus / self.sigma_minus()
    }
}

pub fn to_reparam(theta: &Theta) -> ReparamTheta {
    let (s1, s2, rho) = (theta.sigma1, theta.sigma2, theta.rho);
    let mu = 0.5 * (theta.mu1 + theta.mu2);
    let delta = 0.5 * (theta.mu1 - theta.mu2);
    let sp2 = 0.25 * (s1 * s1 + s2 * s2 + 2.0 * rho * s1 * s2);
    let cov = 0.25 * (s1 - s2) * (s1 + s2);
    let beta1 = cov / sp2;
    // eta^2 = det Cov(Z) / Var(Z1) with det Cov(Z) = sigma1^2 sigma2^2 (1 - rho^2) / 4.
    let eta2 = 0.25 * s1 * s1 * s2 * s2 * (1.0 - rho) * (1.0 + rho) / sp2;
    ReparamTheta {
        mu,
        sigma_plus: sp2.sqrt(),
        beta0: delta - mu * beta1,
        beta1,
        eta: eta2.sqrt(),
    }
}

pub fn from_reparam(r: &ReparamTheta) -> Result<Theta> {
    let sp2 = r.sigma_plus * r.sigma_plus;
    let eta2 = r.eta * r.eta;
    let sm2 = eta2 + r.beta1 * r.beta1 * sp2;
    let s1sq = sp2 * (1.0 + r.beta1).powi(2) + eta2;
    let s2sq = sp2 * (1.0 - r.beta1).powi(2) + eta2;
    if !(s1sq > 0.0 && s2sq > 0.0) {
        return Err(Error::ParameterDomain("implied variances are not positive".into()));
    }
    let (s1, s2) = (s1sq.sqrt(), s2sq.sqrt());
    let delta = r.delta();
    Theta::new(r.mu + delta, r.mu - delta, s1, s2, (sp2 - sm2) / (s1 * s2))
}

/// One observation: the smaller and larger of the two subunit responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnorderedPair {
    y_lo: f64,
    y_hi: f64,
}

impl UnorderedPair {
    /// Builds the pair from two responses in either order.
    pub fn new(a: f64, b: f64) -> Self {
        if a <= b {
            Self { y_lo: a, y_hi: b }
        } else {
            Self { y_lo: b, y_hi: a }
        }
    }
    pub fn lo(&self) -> f64 {
        self.y_lo
    }
    pub fn hi(&self) -> f64 {
        self.y_hi
    }
    /// `(Z1, Z2) = ((lo + hi)/2, (hi - lo)/2)`, with `Z2 >= 0`.
    pub fn half_sum_diff(&self) -> (f64, f64) {
        (0.5 * (self.y_lo + self.y_hi), 0.5 * (self.y_hi - self.y_lo))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnorderedDataset {
    pairs: Vec<UnorderedPair>,
}

impl UnorderedDataset {
    pub fn new(pairs: Vec<UnorderedPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::DegenerateData("dataset has no pairs".into()));
        }
        if pairs.iter().any(|p| !(p.y_lo.is_finite() && p.y_hi.is_finite())) {
            return Err(Error::DegenerateData("dataset contains non-finite values".into()));
        }
        Ok(Self { pairs })
    }

    pub fn from_rows<I: IntoIterator<Item = (f64, f64)>>(rows: I) -> Result<Self> {
        Self::new(rows.into_iter().map(|(a, b)| UnorderedPair::new(a, b)).collect())
    }

    /// Parse two-column text: comma and/or whitespace delimited, blank lines and
    /// `#` comments skipped, an optional non-numeric header on the first row.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut seen_row = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|s| s.parse::<f64>()).collect();
            let first = !seen_row;
            seen_row = true;
            match parsed {
                Err(_) if first => continue,
                Err(e) => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("{e} in {line:?}"),
                    })
                }
                Ok(v) if v.len() != 2 => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected 2 columns, found {}", v.len()),
                    })
                }
                Ok(v) if !(v[0].is_finite() && v[1].is_finite()) => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "non-finite value".into(),
                    })
                }
                Ok(v) => rows.push((v[0], v[1])),
            }
        }
        Self::from_rows(rows)
    }

    pub fn pairs(&self) -> &[UnorderedPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The dataset `a * y + b`; a negative `a` reverses each pair.
    pub fn affine(&self, a: f64, b: f64) -> Result<Self> {
        if !(a != 0.0 && a.is_finite()) {
            return Err(Error::ParameterDomain(format!("affine scale must be finite and nonzero, got {a}")));
        }
        Self::from_rows(self.pairs.iter().map(|p| (a * p.y_lo + b, a * p.y_hi + b)))
    }

    /// The same pairs sorted by `(lo, hi)`; fits run on this order so results do
    /// not depend on how the rows were listed.
    pub fn canonical_order(&self) -> Self {
        let mut pairs = self.pairs.clone();
        pairs.sort_by(|a, b| a.y_lo.total_cmp(&b.y_lo).then(a.y_hi.total_cmp(&b.y_hi)));
        Self { pairs }
    }

    /// Writes the dataset as two-column CSV with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("y_lo,y_hi\n");
        for p in &self.pairs {
            out.push_str(&format!("{:?},{:?}\n", p.y_lo, p.y_hi));
        }
        out
    }
}

/// `ln{phi(lo, hi; theta) + phi(hi, lo; theta)}`.
#[inline]
pub fn pair_log_density(pair: &UnorderedPair, theta: &Theta) -> f64 {
    log_add_exp(
        theta.bivariate_log_density(pair.y_lo, pair.y_hi),
        theta.bivariate_log_density(pair.y_hi, pair.y_lo),
    )
}

pub fn log_likelihood(ds: &UnorderedDataset, theta: &Theta) -> f64 {
    ds.pairs.iter().map(|p| pair_log_density(p, theta)).sum()
}

/// The log-likelihood evaluated through the `(Z1, Z2)` decomposition:
/// a normal term in `(mu, sigma_plus)` plus a symmetric two-component
/// mixture term in `(beta0, beta1, eta)`.
pub fn decomposed_log_likelihood(ds: &UnorderedDataset, r: &ReparamTheta) -> f64 {
    let z = ZData::from_dataset(ds);
    z.normal_part(r.mu, r.sigma_plus) + z.mixture_part(r.beta0, r.beta1, r.eta)
}

/// Dataset in `(Z1, Z2)` coordinates.
#[derive(Debug, Clone)]
pub(crate) struct ZData {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

impl ZData {
    pub fn from_dataset(ds: &UnorderedDataset) -> Self {
        let (z1, z2): (Vec<f64>, Vec<f64>) = ds.pairs.iter().map(|p| p.half_sum_diff()).unzip();
        Self { z1, z2 }
    }

    pub fn len(&self) -> usize {
        self.z1.len()
    }

    pub fn normal_part(&self, mu: f64, sigma_plus: f64) -> f64 {
        self.z1.iter().map(|&z| norm_log_pdf(z, mu, sigma_plus)).sum()
    }

    /// `sum ln{0.5 phi(Z2; m, eta) + 0.5 phi(-Z2; m, eta)}`, `m = beta0 + beta1 Z1`,
    /// written as `-(Z2^2 + m^2)/(2 eta^2) + ln cosh(Z2 m / eta^2)` plus constants.
    pub fn mixture_part(&self, beta0: f64, beta1: f64, eta: f64) -> f64 {
        let inv2 = 1.0 / (eta * eta);
        let mut acc = 0.0;
        for (&z1, &z2) in self.z1.iter().zip(&self.z2) {
            let m = beta0 + beta1 * z1;
            acc += -0.5 * (z2 * z2 + m * m) * inv2 + ln_cosh(z2 * m * inv2);
        }
        acc - self.len() as f64 * (eta.ln() + LN_SQRT_2PI)
    }

    /// Mixture term with its gradient in `(beta0, beta1, eta)`.
    pub fn mixture_part_grad(&self, beta0: f64, beta1: f64, eta: f64, grad: &mut [f64; 3]) -> f64 {
        let inv2 = 1.0 / (eta * eta);
        let (mut acc, mut g0, mut g1, mut ge) = (0.0, 0.0, 0.0, 0.0);
        for (&z1, &z2) in self.z1.iter().zip(&self.z2) {
            let m = beta0 + beta1 * z1;
            let u = z2 * m * inv2;
            let t = u.tanh();
            let ss = z2 * z2 + m * m;
            acc += -0.5 * ss * inv2 + ln_cosh(u);
            let dm = (t * z2 - m) * inv2;
            g0 += dm;
            g1 += dm * z1;
            ge += ss - 2.0 * t * z2 * m;
        }
        let n = self.len() as f64;
        grad[0] = g0;
        grad[1] = g1;
        grad[2] = -n / eta + ge * inv2 / eta;
        acc - n * (eta.ln() + LN_SQRT_2PI)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_pair_standard_theta() {
        let t = Theta::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        let v = pair_log_density(&UnorderedPair::new(0.0, 0.0), &t);
        assert!((v + std::f64::consts::PI.ln()).abs() < 1e-14);
    }

    #[test]
    fn exchangeable_density_doubles() {
        let t = Theta::exchangeable(0.4, 1.3, -0.35).unwrap();
        for &(a, b) in &[(0.1, 2.0), (-3.0, -1.0), (5.0, 5.0)] {
            let p = UnorderedPair::new(a, b);
            let want = std::f64::consts::LN_2 + t.bivariate_log_density(p.lo(), p.hi());
            assert!((pair_log_density(&p, &t) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_invalid_theta() {
        assert!(matches!(Theta::new(0.0, 0.0, 0.0, 1.0, 0.0), Err(Error::ParameterDomain(_))));
        assert!(matches!(Theta::new(0.0, 0.0, 1.0, -1.0, 0.0), Err(Error::ParameterDomain(_))));
        assert!(matches!(Theta::new(0.0, 0.0, 1.0, 1.0, 1.0), Err(Error::ParameterDomain(_))));
        assert!(matches!(Theta::new(0.0, 0.0, 1.0, 1.0, -1.0), Err(Error::ParameterDomain(_))));
        assert!(matches!(Theta::new(f64::NAN, 0.0, 1.0, 1.0, 0.0), Err(Error::ParameterDomain(_))));
        assert!(ReparamTheta::new(0.0, 1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn standard_reparam_values() {
        let s = 2f64.sqrt();
        let r = to_reparam(&Theta::new(0.0, 0.0, s, s, 0.0).unwrap());
        for (got, want) in [r.mu, r.sigma_plus, r.beta0, r.beta1, r.eta].iter().zip([0.0, 1.0, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-15, "{r:?}");
        }
    }

    #[test]
    fn equal_scales_give_zero_slope() {
        let r = to_reparam(&Theta::new(1.0, -2.0, 0.7, 0.7, 0.3).unwrap());
        assert_eq!(r.beta1, 0.0);
        assert_eq!(r.xi(), 0.0);
        assert!((r.beta0 - 1.5).abs() < 1e-15);
        assert!((r.delta() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn tied_pairs_evaluate() {
        let ds = UnorderedDataset::from_rows([(1.0, 1.0), (2.0, 2.0), (-0.5, -0.5)]).unwrap();
        let r = ReparamTheta::new(0.3, 1.0, 0.2, -0.1, 0.8).unwrap();
        let v = decomposed_log_likelihood(&ds, &r);
        assert!(v.is_finite());
        let z = ZData::from_dataset(&ds);
        let direct: f64 = ds
            .pairs()
            .iter()
            .map(|p| norm_log_pdf(0.0, 0.2 - 0.1 * p.lo(), 0.8))
            .sum();
        assert!((z.mixture_part(0.2, -0.1, 0.8) - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_slope_mixture_is_normal() {
        let ds = UnorderedDataset::from_rows([(0.0, 1.0), (3.0, 0.5), (-1.0, 2.0)]).unwrap();
        let z = ZData::from_dataset(&ds);
        let direct: f64 = z.z2.iter().map(|&v| norm_log_pdf(v, 0.0, 1.7)).sum();
        assert!((z.mixture_part(0.0, 0.0, 1.7) - direct).abs() < 1e-12);
    }

    #[test]
    fn mixture_gradient_matches_differences() {
        let ds = UnorderedDataset::from_rows([(0.0, 1.0), (3.0, 0.5), (-1.0, 2.0), (0.2, 0.3)]).unwrap();
        let z = ZData::from_dataset(&ds);
        let p = [0.3, -0.4, 0.9];
        let mut g = [0.0; 3];
        z.mixture_part_grad(p[0], p[1], p[2], &mut g);
        for k in 0..3 {
            let h = 1e-6;
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let fd = (z.mixture_part(a[0], a[1], a[2]) - z.mixture_part(b[0], b[1], b[2])) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "k={k} fd={fd} g={}", g[k]);
        }
    }

    #[test]
    fn parse_formats() {
        let ds = UnorderedDataset::parse("lo,hi\n1,2\n\n# note\n4 3\n5.5;\t6\n").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.pairs()[1], UnorderedPair::new(3.0, 4.0));
        match UnorderedDataset::parse("1,2\n3,x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(UnorderedDataset::parse("1,2,3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(UnorderedDataset::parse("a,b\n").is_err());
    }

    #[test]
    fn canonical_orders_labels() {
        let t = Theta::new(2.0, 1.0, 0.5, 3.0, 0.1).unwrap().canonical();
        assert_eq!(t.to_array(), [1.0, 2.0, 3.0, 0.5, 0.1]);
        let t = Theta::new(1.0, 1.0, 3.0, 0.5, 0.1).unwrap().canonical();
        assert_eq!(t.sigma1(), 0.5);
    }

    #[test]
    fn theta_serde_validates() {
        let t = Theta::new(1.0, 2.0, 0.5, 1.5, -0.2).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Theta>(&s).unwrap(), t);
        assert!(serde_json::from_str::<Theta>(r#"{"mu1":0,"mu2":0,"sigma1":1,"sigma2":1,"rho":2}"#).is_err());
    }
}
