//! Grid approximations of finite differences, moduli of smoothness and
//! Besov seminorms on `[0, 1]`.
//!
//! Every quantity here is a discretization. Steps `h` are restricted to
//! multiples of the grid spacing, differences are zero-extended outside
//! `[0, 1 − rh]`, and `L^p` norms use left-endpoint Riemann weights on that
//! support. Convergence is judged by refinement, never assumed.

use crate::{Error, Result, Scalar};

/// Samples of a function on `grid_size` evenly spaced points spanning `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<T> {
    values: Vec<T>,
}

impl<T: Scalar> GridFunction<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::TooFewPoints {
                needed: 2,
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    pub fn sample(grid_size: usize, f: impl Fn(T) -> T) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::TooFewPoints {
                needed: 2,
                got: grid_size,
            });
        }
        let step = T::one() / T::of_usize(grid_size - 1);
        Self::new((0..grid_size).map(|i| f(T::of_usize(i) * step)).collect())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    pub fn step(&self) -> T {
        T::one() / T::of_usize(self.values.len() - 1)
    }

    /// Number of grid steps in `h`, if `h` is a positive multiple of the spacing.
    fn steps_in(&self, h: T) -> Result<usize> {
        let step = self.step();
        let m = (h / step).round();
        let tol = T::of(1e-9);
        if !(h > T::zero()) || m < T::one() || ((m * step - h) / step).abs() > tol {
            return Err(Error::NotGridAligned {
                h: h.to_f64().unwrap_or(f64::NAN),
                step: step.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(m.to_usize().expect("finite step count"))
    }
}

fn binomial(r: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (r - i) as f64 / (i + 1) as f64)
}

/// `r`-th difference with step `m` grid cells; zero where `x + rh > 1`.
fn difference_steps<T: Scalar>(values: &[T], r: usize, m: usize) -> Vec<T> {
    let n = values.len();
    let weights: Vec<T> = (0..=r)
        .map(|k| {
            let sign = if (r - k) % 2 == 0 { 1.0 } else { -1.0 };
            T::of(sign * binomial(r, k))
        })
        .collect();
    let span = r * m;
    (0..n)
        .map(|i| {
            if i + span >= n {
                return T::zero();
            }
            weights
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (k, &w)| acc + w * values[i + k * m])
        })
        .collect()
}

/// `Δ_h^r f(x) = Σ_k C(r,k) (−1)^{r−k} f(x + kh)` on `[0, 1 − rh]`, zero elsewhere.
pub fn finite_difference<T: Scalar>(g: &GridFunction<T>, r: usize, h: T) -> Result<GridFunction<T>> {
    if r == 0 {
        return Err(Error::Config("difference order must be at least 1".into()));
    }
    let m = g.steps_in(h)?;
    if r * m > g.grid_size() - 1 {
        return Err(Error::Config(format!("r·h exceeds 1 (r={r}, h={h:?})")));
    }
    Ok(GridFunction {
        values: difference_steps(&g.values, r, m),
    })
}

/// Discrete `L^p` norm of the `r`-th difference with step `m` cells.
/// `p = ∞` is the sup norm over the support.
fn difference_norm<T: Scalar>(values: &[T], r: usize, m: usize, p: T) -> T {
    let n = values.len();
    let span = r * m;
    if span > n - 1 {
        return T::zero();
    }
    let diff = difference_steps(values, r, m);
    let support = n - span; // points i with x_i ∈ [0, 1 − rh]
    if p.is_infinite() {
        return diff[..support].iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    }
    let step = T::one() / T::of_usize(n - 1);
    // left-endpoint weights: the right endpoint 1 − rh carries no weight
    let sum = diff[..support - 1]
        .iter()
        .fold(T::zero(), |acc, v| acc + v.abs().powf(p));
    (sum * step).powf(T::one() / p)
}

/// Norms `‖Δ_{mΔx}^r f‖_p` for every admissible `m = 1..=max_steps`.
fn difference_norms<T: Scalar>(g: &GridFunction<T>, r: usize, p: T, max_steps: usize) -> Vec<T> {
    let limit = (g.grid_size() - 1) / r;
    (1..=max_steps.min(limit))
        .map(|m| difference_norm(&g.values, r, m, p))
        .collect()
}

/// `w_{r,p}(f, t) = sup_{0 < h ≤ t} ‖Δ_h^r f‖_p` over grid-aligned `h`
/// (and `rh ≤ 1`). Zero when no admissible step fits below `t`.
pub fn modulus_of_smoothness<T: Scalar>(g: &GridFunction<T>, r: usize, p: T, t: T) -> T {
    if !(t > T::zero()) || r == 0 {
        return T::zero();
    }
    let max_steps = (t / g.step() + T::of(1e-9)).floor().to_usize().unwrap_or(0);
    difference_norms(g, r, p, max_steps)
        .into_iter()
        .fold(T::zero(), T::max)
}

/// `count` logarithmically spaced points from `4/grid_size` to 1.
pub fn log_t_grid(grid_size: usize, count: usize) -> Vec<f64> {
    let lo = (4.0 / grid_size as f64).ln();
    if count < 2 {
        return vec![1.0];
    }
    (0..count)
        .map(|i| (lo + (0.0 - lo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// One row of a modulus-of-smoothness profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulusPoint<T> {
    pub t: T,
    pub w: T,
    /// `t^{−s} w`.
    pub scaled: T,
}

/// Profile of `w_{r,p}(f, t)` and `t^{−s} w` over `t_grid`, with `r = ⌊s⌋ + 1`.
pub fn modulus_profile<T: Scalar>(g: &GridFunction<T>, s: T, p: T, t_grid: &[T]) -> Vec<ModulusPoint<T>> {
    let r = s.floor().to_usize().unwrap_or(0) + 1;
    let t_max = t_grid.iter().copied().fold(T::zero(), T::max);
    let max_steps = (t_max / g.step() + T::of(1e-9)).floor().to_usize().unwrap_or(0);
    let norms = difference_norms(g, r, p, max_steps);
    // running maximum turns per-step norms into the modulus
    let mut running = Vec::with_capacity(norms.len());
    let mut best = T::zero();
    for v in norms {
        best = best.max(v);
        running.push(best);
    }
    t_grid
        .iter()
        .map(|&t| {
            let m = (t / g.step() + T::of(1e-9)).floor().to_usize().unwrap_or(0);
            let w = if m == 0 || running.is_empty() {
                T::zero()
            } else {
                running[m.min(running.len()) - 1]
            };
            ModulusPoint {
                t,
                w,
                scaled: t.powf(-s) * w,
            }
        })
        .collect()
}

/// Estimate of `|f|_{B^s_{p,q}}` from the modulus of smoothness with
/// `r = ⌊s⌋ + 1`: the maximum of `t^{−s} w` over `t_grid` for `q = ∞`, else
/// `(∫ (t^{−s} w)^q dt/t)^{1/q}` by the trapezoid rule in `log t`.
pub fn besov_seminorm_estimate<T: Scalar>(g: &GridFunction<T>, s: T, p: T, q: T, t_grid: &[T]) -> T {
    let profile = modulus_profile(g, s, p, t_grid);
    if q.is_infinite() {
        return profile.iter().fold(T::zero(), |acc, pt| acc.max(pt.scaled));
    }
    let half = T::of(0.5);
    let integral = profile.windows(2).fold(T::zero(), |acc, w| {
        let dlog = w[1].t.ln() - w[0].t.ln();
        acc + half * (w[0].scaled.powf(q) + w[1].scaled.powf(q)) * dlog
    });
    integral.powf(T::one() / q)
}

/// Least-squares slope of `log w` against `log t`, ignoring zero moduli.
pub fn empirical_smoothness_slope(profile: &[ModulusPoint<f64>]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = profile
        .iter()
        .filter(|p| p.w > 0.0)
        .map(|p| (p.t.ln(), p.w.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
