//! B-spline kernel on arbitrary (possibly coincident) knots.
//!
//! Each LABS atom owns a private knot vector of length `degree + 2`, so the
//! basis is evaluated one function at a time with the Cox–de Boor triangle
//! rather than over a shared knot sequence.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Highest degree the kernel accepts.
pub const MAX_DEGREE: usize = 10;

/// Knot vector of a single B-spline of the given degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: serde::de::DeserializeOwned"))]
pub struct KnotVector<T> {
    degree: usize,
    knots: Vec<T>,
}

impl<T: Scalar> KnotVector<T> {
    /// Validates length `degree + 2`, finiteness and nondecreasing order.
    pub fn new(degree: usize, knots: Vec<T>) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::InvalidKnots(format!(
                "degree {degree} exceeds the supported maximum {MAX_DEGREE}"
            )));
        }
        if knots.len() != degree + 2 {
            return Err(Error::InvalidKnots(format!(
                "degree {degree} needs {} knots, got {}",
                degree + 2,
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidKnots("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidKnots("knots must be nondecreasing".into()));
        }
        Ok(Self { degree, knots })
    }

    /// Sorts the knots before validating.
    pub fn from_unsorted(degree: usize, mut knots: Vec<T>) -> Result<Self> {
        knots.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Self::new(degree, knots)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Half-open support `[ξ₁, ξ_{k+2})`.
    pub fn support(&self) -> (T, T) {
        (self.knots[0], self.knots[self.degree + 1])
    }

    pub fn min_spacing(&self) -> T {
        self.knots
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(T::infinity(), T::min)
    }

    /// Replaces knot `index`; fails if the result is no longer sorted.
    pub fn with_knot(&self, index: usize, value: T) -> Result<Self> {
        let mut knots = self.knots.clone();
        knots[index] = value;
        Self::new(self.degree, knots)
    }
}

/// One term `β · B_k(·; ξ)` of the mean function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: serde::de::DeserializeOwned"))]
pub struct SplineAtom<T> {
    pub knots: KnotVector<T>,
    pub coefficient: T,
}

impl<T: Scalar> SplineAtom<T> {
    pub fn new(knots: KnotVector<T>, coefficient: T) -> Result<Self> {
        if !coefficient.is_finite() {
            return Err(Error::InvalidKnots("atom coefficient must be finite".into()));
        }
        Ok(Self { knots, coefficient })
    }

    pub fn degree(&self) -> usize {
        self.knots.degree()
    }

    pub fn basis(&self, x: T) -> T {
        bspline_eval(x, &self.knots)
    }

    pub fn eval(&self, x: T) -> T {
        self.coefficient * self.basis(x)
    }
}

/// Evaluates `B_k(x; ξ)` by the Cox–de Boor recursion.
///
/// The degree-0 base case is the half-open indicator `1[ξ₁ ≤ x < ξ₂]`, and any
/// term whose denominator vanishes (coincident knots) contributes zero.
pub fn bspline_eval<T: Scalar>(x: T, kv: &KnotVector<T>) -> T {
    let k = kv.degree;
    let t = &kv.knots;
    if x < t[0] || x >= t[k + 1] {
        return T::zero();
    }
    let mut n = [T::zero(); MAX_DEGREE + 1];
    for j in 0..=k {
        if t[j] <= x && x < t[j + 1] {
            n[j] = T::one();
        }
    }
    for d in 1..=k {
        for j in 0..=(k - d) {
            let left_den = t[j + d] - t[j];
            let right_den = t[j + d + 1] - t[j + 1];
            let left = if left_den > T::zero() {
                (x - t[j]) / left_den * n[j]
            } else {
                T::zero()
            };
            let right = if right_den > T::zero() {
                (t[j + d + 1] - x) / right_den * n[j + 1]
            } else {
                T::zero()
            };
            n[j] = left + right;
        }
    }
    n[0].max(T::zero()).min(T::one())
}

/// `Σ β · B_k(x; ξ)` over the atoms; zero for an empty slice.
pub fn function_eval<T: Scalar>(atoms: &[SplineAtom<T>], x: T) -> T {
    atoms.iter().fold(T::zero(), |acc, a| acc + a.eval(x))
}

/// `n × J` matrix of basis values, coefficients excluded.
pub fn design_matrix<T: Scalar>(xs: &[T], atoms: &[SplineAtom<T>]) -> Result<DMatrix<T>> {
    if atoms.is_empty() {
        return Err(Error::NoBasis);
    }
    Ok(DMatrix::from_fn(xs.len(), atoms.len(), |i, j| atoms[j].basis(xs[i])))
}

/// Minimum gap between consecutive order statistics of `knots`.
pub fn min_spacing<T: Scalar>(knots: &[T]) -> Result<T> {
    if knots.len() < 2 {
        return Err(Error::InvalidKnots(format!(
            "min spacing needs at least 2 knots, got {}",
            knots.len()
        )));
    }
    let mut sorted = knots.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(T::infinity(), T::min))
}

/// Lipschitz constant of `ξ ↦ f_{β,ξ}` in sup norm for coefficient bound `B`,
/// `J` atoms, minimum knot spacing `δ`, maximum degree `k̄`, `|S|` degrees
/// and domain extension `A`:
///
/// ```text
/// L = 4 |S| (1+2A)^k̄ (k̄+2) B J (δ ∧ 1)^{-(k̄+1)}
/// ```
///
/// Only valid for `δ ≤ 2(1+2A)/k̄` and `k̄ ≥ 1`.
pub fn lipschitz_bound<T: Scalar>(
    coef_bound: T,
    total_atoms: usize,
    delta: T,
    max_degree: usize,
    degree_count: usize,
    domain_ext: T,
) -> Result<T> {
    if !(coef_bound > T::zero()) || !(delta > T::zero()) {
        return Err(Error::BoundInapplicable(
            "coefficient bound and delta must be positive".into(),
        ));
    }
    if total_atoms == 0 || degree_count == 0 {
        return Err(Error::BoundInapplicable(
            "atom count and degree count must be at least 1".into(),
        ));
    }
    if max_degree == 0 {
        return Err(Error::BoundInapplicable(
            "degree-0 atoms are discontinuous in their knots".into(),
        ));
    }
    let width = T::one() + T::of(2.0) * domain_ext;
    let k = T::of_usize(max_degree);
    if delta > T::of(2.0) * width / k {
        return Err(Error::BoundInapplicable(format!(
            "delta {:?} exceeds 2(1+2A)/k = {:?}",
            delta,
            T::of(2.0) * width / k
        )));
    }
    let d = delta.min(T::one());
    Ok(T::of(4.0)
        * T::of_usize(degree_count)
        * width.powi(max_degree as i32)
        * (k + T::of(2.0))
        * coef_bound
        * T::of_usize(total_atoms)
        * d.powi(-(max_degree as i32 + 1)))
}
