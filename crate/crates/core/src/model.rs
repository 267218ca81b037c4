//! LABS prior, likelihood and sample-size dependent hyperparameter schedules.
//!
//! The hierarchy is
//!
//! ```text
//! y_i | x_i      ~ N(f(x_i), σ²)
//! σ²             ~ Inv-Gam(r/2, rR/2)
//! J_k            ~ Poi(M_k),          M_k ~ Gam(a_k, b_n)
//! β_{k,l}        ~ N(0, φ_n²)
//! ξ_{k,l}        ~ U(𝒳^{k+2}(δ_n)),   𝒳 = [−A, 1+A]
//! ```
//!
//! where `𝒳^{k+2}(δ)` holds the knot vectors whose sorted gaps are all at
//! least `δ`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::spline::{function_eval, KnotVector, SplineAtom};
use crate::testbed::Dataset;
use crate::{Error, Result, Scalar};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiMode {
    /// `φ_n = exp(C_φ (log n)²)`.
    Theory,
    /// `φ_n = C_φ log n`, the form the published simulation settings follow.
    #[default]
    Table,
}

/// Gamma shape `a_k`, either shared by all degrees or given per degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaShape {
    Common(f64),
    /// Keyed by the degree written as a string, e.g. `{"1": 1.0}`.
    PerDegree(BTreeMap<String, f64>),
}

impl Default for GammaShape {
    fn default() -> Self {
        GammaShape::Common(1.0)
    }
}

/// Prior configuration. Serialized with the keys
/// `degrees, a, C_b, C_phi, phi_mode, C_delta, r, R, A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub degrees: Vec<usize>,
    pub a: GammaShape,
    #[serde(rename = "C_b")]
    pub c_b: f64,
    #[serde(rename = "C_phi")]
    pub c_phi: f64,
    pub phi_mode: PhiMode,
    #[serde(rename = "C_delta")]
    pub c_delta: f64,
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    #[serde(rename = "A")]
    pub domain_ext: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            degrees: vec![1, 2],
            a: GammaShape::default(),
            c_b: 1e-4,
            c_phi: 1.5,
            phi_mode: PhiMode::Table,
            c_delta: 1.0,
            r: 0.01,
            big_r: 1.0,
            domain_ext: 0.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.degrees.is_empty() {
            return Err(Error::Config("degree set must be nonempty".into()));
        }
        let mut seen = self.degrees.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.degrees.len() {
            return Err(Error::Config("degree set has duplicates".into()));
        }
        if let Some(&k) = self.degrees.iter().find(|&&k| k > crate::spline::MAX_DEGREE) {
            return Err(Error::Config(format!("degree {k} is not supported")));
        }
        if self.degrees.contains(&0) {
            log::warn!("degree 0 in the degree set: piecewise-constant atoms fall outside the contraction theory");
        }
        for k in &self.degrees {
            let a = self.a_k(*k);
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("gamma shape for degree {k} must be positive")));
            }
        }
        for (name, v) in [
            ("C_b", self.c_b),
            ("C_phi", self.c_phi),
            ("C_delta", self.c_delta),
            ("r", self.r),
            ("R", self.big_r),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.domain_ext >= 0.0 && self.domain_ext.is_finite()) {
            return Err(Error::Config("A must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn a_k(&self, k: usize) -> f64 {
        match &self.a {
            GammaShape::Common(a) => *a,
            GammaShape::PerDegree(m) => m.get(&k.to_string()).copied().unwrap_or(f64::NAN),
        }
    }

    /// Knot domain `[−A, 1+A]`.
    pub fn knot_domain(&self) -> (f64, f64) {
        (-self.domain_ext, 1.0 + self.domain_ext)
    }

    pub fn domain_length(&self) -> f64 {
        1.0 + 2.0 * self.domain_ext
    }

    pub fn ig_shape(&self) -> f64 {
        self.r / 2.0
    }

    pub fn ig_scale(&self) -> f64 {
        self.r * self.big_r / 2.0
    }
}

/// Sample-size dependent hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub b_n: f64,
    pub phi_n: f64,
    pub delta_n: f64,
}

pub fn schedule(n: usize, hp: &HyperParams) -> Result<Schedule> {
    if n < 2 {
        return Err(Error::InvalidSampleSize(n));
    }
    let ln = (n as f64).ln();
    let l2 = ln * ln;
    let phi_n = match hp.phi_mode {
        PhiMode::Theory => (hp.c_phi * l2).exp(),
        PhiMode::Table => hp.c_phi * ln,
    };
    Ok(Schedule {
        b_n: (hp.c_b * l2).exp(),
        phi_n,
        delta_n: (-hp.c_delta * l2).exp(),
    })
}

/// Full model state: atoms grouped by degree, Poisson means and noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabsState {
    pub atoms: BTreeMap<usize, Vec<SplineAtom<f64>>>,
    pub m: BTreeMap<usize, f64>,
    pub sigma2: f64,
}

impl LabsState {
    /// No atoms, `M_k` at the prior mean `a_k / b_n`.
    pub fn empty(hp: &HyperParams, sch: &Schedule, sigma2: f64) -> Self {
        let atoms = hp.degrees.iter().map(|&k| (k, Vec::new())).collect();
        let m = hp.degrees.iter().map(|&k| (k, hp.a_k(k) / sch.b_n)).collect();
        Self { atoms, m, sigma2 }
    }

    pub fn count(&self, k: usize) -> usize {
        self.atoms.get(&k).map_or(0, Vec::len)
    }

    pub fn total_atoms(&self) -> usize {
        self.atoms.values().map(Vec::len).sum()
    }

    pub fn all_atoms(&self) -> impl Iterator<Item = &SplineAtom<f64>> {
        self.atoms.values().flatten()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.atoms.values().map(|a| function_eval(a, x)).sum()
    }

    /// Checks spacing, domain, degree membership and positivity.
    pub fn check_support(&self, hp: &HyperParams, sch: &Schedule) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::OutOfSupport(format!("sigma2 = {}", self.sigma2)));
        }
        let (lo, hi) = hp.knot_domain();
        for (&k, atoms) in &self.atoms {
            if !hp.degrees.contains(&k) {
                return Err(Error::OutOfSupport(format!("degree {k} not in the degree set")));
            }
            for atom in atoms {
                let kn = atom.knots.knots();
                if kn[0] < lo || kn[kn.len() - 1] > hi {
                    return Err(Error::OutOfSupport("knot outside the knot domain".into()));
                }
                if atom.knots.min_spacing() < sch.delta_n {
                    return Err(Error::OutOfSupport(format!(
                        "knot spacing {} below delta_n = {}",
                        atom.knots.min_spacing(),
                        sch.delta_n
                    )));
                }
                if !atom.coefficient.is_finite() {
                    return Err(Error::OutOfSupport("non-finite coefficient".into()));
                }
            }
        }
        for &k in &hp.degrees {
            match self.m.get(&k) {
                Some(&m) if m > 0.0 && m.is_finite() => {}
                other => {
                    return Err(Error::OutOfSupport(format!("M_{k} = {other:?}")));
                }
            }
        }
        Ok(())
    }
}

pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - (x - mean).powi(2) / (2.0 * var)
}

/// Inverse-gamma with shape `alpha` and scale `beta`.
pub fn inv_gamma_log_density(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * x.ln() - beta / x
}

/// Gamma with shape `alpha` and rate `rate`.
pub fn gamma_log_density(x: f64, alpha: f64, rate: f64) -> f64 {
    alpha * rate.ln() - ln_gamma(alpha) + (alpha - 1.0) * x.ln() - rate * x
}

pub fn poisson_log_pmf(j: usize, mean: f64) -> f64 {
    let j = j as f64;
    if j == 0.0 {
        return -mean;
    }
    j * mean.ln() - mean - ln_gamma(j + 1.0)
}

/// `Σ_i log N(y_i; f(x_i), σ²)`.
pub fn log_likelihood(state: &LabsState, data: &Dataset) -> f64 {
    let rss: f64 = data
        .xs
        .iter()
        .zip(&data.ys)
        .map(|(&x, &y)| (y - state.eval(x)).powi(2))
        .sum();
    gaussian_log_likelihood(rss, data.len(), state.sigma2)
}

/// Gaussian log-likelihood from the residual sum of squares.
pub fn gaussian_log_likelihood(rss: f64, n: usize, sigma2: f64) -> f64 {
    -0.5 * n as f64 * (LN_2PI + sigma2.ln()) - rss / (2.0 * sigma2)
}

/// Log prior density of `state`.
///
/// The uniform knot density enters only through its support; its
/// normalizing constant ([`sorted_knot_log_density`]) is constant at fixed
/// dimension and is left out. States outside the support give
/// [`Error::OutOfSupport`].
pub fn log_prior(state: &LabsState, hp: &HyperParams, sch: &Schedule) -> Result<f64> {
    state.check_support(hp, sch)?;
    let mut lp = inv_gamma_log_density(state.sigma2, hp.ig_shape(), hp.ig_scale());
    let coef_var = sch.phi_n * sch.phi_n;
    for &k in &hp.degrees {
        let m = state.m[&k];
        lp += gamma_log_density(m, hp.a_k(k), sch.b_n);
        lp += poisson_log_pmf(state.count(k), m);
        for atom in state.atoms.get(&k).into_iter().flatten() {
            lp += normal_log_density(atom.coefficient, 0.0, coef_var);
        }
    }
    Ok(lp)
}

/// `log_prior + log_likelihood`, or `−∞` outside the prior support.
pub fn log_posterior(state: &LabsState, data: &Dataset, hp: &HyperParams, sch: &Schedule) -> f64 {
    match log_prior(state, hp, sch) {
        Ok(lp) => lp + log_likelihood(state, data),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Log volume of the unordered constrained set `𝒳^{k+2}(δ)`:
/// `(k+2) log(L − (k+1)δ)` with `L = 1 + 2A`.
pub fn constrained_knot_log_volume(k: usize, delta: f64, domain_length: f64) -> Result<f64> {
    let slack = domain_length - (k as f64 + 1.0) * delta;
    if !(slack > 0.0) {
        return Err(Error::InfeasibleSpacing {
            delta,
            knots: k + 2,
            length: domain_length,
        });
    }
    Ok((k as f64 + 2.0) * slack.ln())
}

/// Log density of the sorted knot vector under the constrained uniform prior.
pub fn sorted_knot_log_density(k: usize, delta: f64, domain_length: f64) -> Result<f64> {
    Ok(ln_gamma(k as f64 + 3.0) - constrained_knot_log_volume(k, delta, domain_length)?)
}

/// Draws a degree-`k` knot vector uniformly from `𝒳^{k+2}(δ)`.
///
/// Sorted uniforms are rejected until every gap is at least `δ`. When the
/// acceptance probability `(1 − (k+1)δ/L)^{k+2}` is below 1e-3 the draw uses
/// the equivalent gap-shift construction instead (sorted uniforms on
/// `[0, L − (k+1)δ]` with `iδ` added to the `i`-th order statistic).
pub fn sample_knots<R: Rng + ?Sized>(
    k: usize,
    delta: f64,
    domain_ext: f64,
    rng: &mut R,
) -> Result<KnotVector<f64>> {
    let length = 1.0 + 2.0 * domain_ext;
    let slack = length - (k as f64 + 1.0) * delta;
    if !(delta > 0.0) || !(slack > 0.0) {
        return Err(Error::InfeasibleSpacing {
            delta,
            knots: k + 2,
            length,
        });
    }
    let lo = -domain_ext;
    let mut knots = vec![0.0; k + 2];
    let acceptance = (slack / length).powi(k as i32 + 2);
    if acceptance >= 1e-3 {
        loop {
            for v in knots.iter_mut() {
                *v = lo + length * rng.random::<f64>();
            }
            knots.sort_by(|a, b| a.total_cmp(b));
            if knots.windows(2).all(|w| w[1] - w[0] >= delta) {
                break;
            }
        }
    } else {
        for v in knots.iter_mut() {
            *v = slack * rng.random::<f64>();
        }
        knots.sort_by(|a, b| a.total_cmp(b));
        for (i, v) in knots.iter_mut().enumerate() {
            *v = lo + *v + i as f64 * delta;
        }
    }
    KnotVector::new(k, knots)
}

/// `min(F, max(−F, x))`.
pub fn clip<T: Scalar>(bound: T, x: T) -> T {
    bound.min((-bound).max(x))
}

/// Squared Hellinger distance between `N(μ₁, σ₁²)` and `N(μ₂, σ₂²)`.
pub fn hellinger_sq_normal<T: Scalar>(mu1: T, sigma1: T, mu2: T, sigma2: T) -> T {
    let v = sigma1 * sigma1 + sigma2 * sigma2;
    let two = T::of(2.0);
    let d2 = T::one() - (two * sigma1 * sigma2 / v).sqrt() * (-(mu1 - mu2).powi(2) / (T::of(4.0) * v)).exp();
    d2.max(T::zero())
}

/// Root average squared Hellinger distance between two Gaussian regression
/// models evaluated at the same design points.
pub fn hellinger_profile<T: Scalar>(f1: &[T], sigma1: T, f2: &[T], sigma2: T) -> Result<T> {
    if f1.len() != f2.len() {
        return Err(Error::LengthMismatch {
            left: f1.len(),
            right: f2.len(),
        });
    }
    if f1.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if !(sigma1 > T::zero() && sigma2 > T::zero()) {
        return Err(Error::Config("standard deviations must be positive".into()));
    }
    let sum = f1
        .iter()
        .zip(f2)
        .fold(T::zero(), |acc, (&a, &b)| acc + hellinger_sq_normal(a, sigma1, b, sigma2));
    Ok((sum / T::of_usize(f1.len())).sqrt())
}

/// True regression model and the assumed Besov class.
pub struct TruthSpec {
    pub f0: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub sigma0: f64,
    /// Uniform bound used as the clip level.
    pub bound: f64,
    pub s: f64,
    pub p: f64,
    pub q: f64,
}

impl TruthSpec {
    pub fn new(
        f0: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma0: f64,
        bound: f64,
        (s, p, q): (f64, f64, f64),
    ) -> Result<Self> {
        if !(sigma0 > 0.0) || !(bound > 0.0) {
            return Err(Error::Config("sigma0 and F must be positive".into()));
        }
        Ok(Self {
            f0: Box::new(f0),
            sigma0,
            bound,
            s,
            p,
            q,
        })
    }

    /// Empirical L² distance between the clipped estimate and the truth at `xs`.
    pub fn clipped_l2_error(&self, xs: &[f64], fitted: &[f64]) -> Result<f64> {
        if xs.len() != fitted.len() {
            return Err(Error::LengthMismatch {
                left: xs.len(),
                right: fitted.len(),
            });
        }
        let truth: Vec<f64> = xs.iter().map(|&x| (self.f0)(x)).collect();
        let clipped: Vec<f64> = fitted.iter().map(|&v| clip(self.bound, v)).collect();
        Ok(crate::testbed::mse(&truth, &clipped)?.sqrt())
    }

    /// `n^{−s/(2s+1)} (log n)²`.
    pub fn contraction_rate(&self, n: usize) -> f64 {
        let n = n as f64;
        n.powf(-self.s / (2.0 * self.s + 1.0)) * n.ln().powi(2)
    }
}
