//! Donoho–Johnstone test functions and simulated regression data.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

const BLOCKS_T: [f64; 11] = [0.1, 0.13, 0.15, 0.23, 0.25, 0.40, 0.44, 0.65, 0.76, 0.78, 0.81];
const BLOCKS_H: [f64; 11] = [4.0, -5.0, 3.0, -4.0, 5.0, -4.2, 2.1, 4.3, -3.1, 2.1, -4.2];
const BUMPS_H: [f64; 11] = [4.0, 5.0, 3.0, 4.0, 5.0, 4.2, 2.1, 4.3, 3.1, 2.1, 4.2];
const BUMPS_W: [f64; 11] = [
    0.005, 0.005, 0.006, 0.01, 0.01, 0.03, 0.01, 0.01, 0.005, 0.008, 0.005,
];

/// Grid used to standardize the truth unless configured otherwise.
pub const DEFAULT_STANDARDIZATION_GRID: usize = 10_001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunctionId {
    Blocks,
    Bumps,
    #[serde(alias = "heavi_sine")]
    HeaviSine,
    Doppler,
}

impl TestFunctionId {
    pub const ALL: [TestFunctionId; 4] = [
        TestFunctionId::Blocks,
        TestFunctionId::Bumps,
        TestFunctionId::HeaviSine,
        TestFunctionId::Doppler,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestFunctionId::Blocks => "blocks",
            TestFunctionId::Bumps => "bumps",
            TestFunctionId::HeaviSine => "heavisine",
            TestFunctionId::Doppler => "doppler",
        }
    }

    /// Jump locations of Blocks.
    pub fn blocks_jumps() -> &'static [f64] {
        &BLOCKS_T
    }
}

impl fmt::Display for TestFunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestFunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blocks" => Ok(Self::Blocks),
            "bumps" => Ok(Self::Bumps),
            "heavisine" | "heavi_sine" => Ok(Self::HeaviSine),
            "doppler" => Ok(Self::Doppler),
            other => Err(Error::Config(format!("unknown test function '{other}'"))),
        }
    }
}

// sgn(0) := 0
fn sgn<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn eval_raw<T: Scalar>(id: TestFunctionId, x: T) -> T {
    let half = T::of(0.5);
    match id {
        TestFunctionId::Blocks => BLOCKS_T
            .iter()
            .zip(BLOCKS_H.iter())
            .fold(T::zero(), |acc, (&t, &h)| {
                acc + T::of(h) * (T::one() + sgn(x - T::of(t))) * half
            }),
        TestFunctionId::Bumps => BLOCKS_T
            .iter()
            .zip(BUMPS_H.iter().zip(BUMPS_W.iter()))
            .fold(T::zero(), |acc, (&t, (&h, &w))| {
                let u = ((x - T::of(t)) / T::of(w)).abs();
                acc + T::of(h) * (T::one() + u).powi(-4)
            }),
        TestFunctionId::HeaviSine => {
            let four_pi = T::of(4.0 * std::f64::consts::PI);
            T::of(4.0) * (four_pi * x).sin() - sgn(x - T::of(0.3)) - sgn(T::of(0.72) - x)
        }
        TestFunctionId::Doppler => {
            let c = T::of(2.1 * std::f64::consts::PI);
            (x * (T::one() - x)).sqrt() * (c / (x + T::of(0.05))).sin()
        }
    }
}

/// Raw (unstandardized) test function value on `[0, 1]`.
pub fn eval_test_function<T: Scalar>(id: TestFunctionId, x: T) -> Result<T> {
    if !(x >= T::zero() && x <= T::one()) {
        return Err(Error::OutsideDomain(x.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(eval_raw(id, x))
}

/// Affine map `(f − center) / scale` applied to the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: f64,
    pub scale: f64,
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization {
        center: 0.0,
        scale: 1.0,
    };

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    /// `other ∘ self`: standardize with `self`, then with `other`.
    pub fn then(&self, other: &Standardization) -> Standardization {
        Standardization {
            center: self.center + self.scale * other.center,
            scale: self.scale * other.scale,
        }
    }
}

/// Which quantity is standardized before analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StandardizationMode {
    /// Truth rescaled to grid mean 0 and grid sd 1, so `σ₀ = 1/RSNR` exactly.
    #[default]
    Truth,
    /// Each simulated response vector is centred and scaled by its own moments.
    Empirical,
}

/// Test function standardized to grid mean 0 and grid standard deviation 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizedTruth {
    pub id: TestFunctionId,
    pub standardization: Standardization,
}

impl StandardizedTruth {
    pub fn eval(&self, x: f64) -> Result<f64> {
        Ok(self.standardization.apply(eval_test_function(self.id, x)?))
    }
}

/// Mean and population standard deviation of `f` over `grid_size` evenly
/// spaced points spanning `[0, 1]`.
pub fn grid_moments(f: impl Fn(f64) -> f64, grid_size: usize) -> (f64, f64) {
    let step = 1.0 / (grid_size - 1) as f64;
    let vals: Vec<f64> = (0..grid_size).map(|i| f(i as f64 * step)).collect();
    let mean = vals.iter().sum::<f64>() / grid_size as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / grid_size as f64;
    (mean, var.sqrt())
}

pub fn standardized_truth(id: TestFunctionId, grid_size: usize) -> Result<StandardizedTruth> {
    if grid_size < 1000 {
        return Err(Error::TooFewPoints {
            needed: 1000,
            got: grid_size,
        });
    }
    let (center, scale) = grid_moments(|x| eval_raw(id, x), grid_size);
    if !(scale > 1e-300) {
        return Err(Error::ZeroScale);
    }
    Ok(StandardizedTruth {
        id,
        standardization: Standardization { center, scale },
    })
}

/// Regression data on `[0, 1]` with the truth's standardization recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub sigma0: f64,
    pub standardization: Standardization,
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, sigma0: f64) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch {
                left: xs.len(),
                right: ys.len(),
            });
        }
        Ok(Self {
            xs,
            ys,
            sigma0,
            standardization: Standardization::IDENTITY,
        })
    }

    pub fn empty() -> Self {
        Self {
            xs: Vec::new(),
            ys: Vec::new(),
            sigma0: 1.0,
            standardization: Standardization::IDENTITY,
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Truth on the analysis scale at the design points.
    pub fn truth_at_design(&self, id: TestFunctionId) -> Result<Vec<f64>> {
        self.xs
            .iter()
            .map(|&x| Ok(self.standardization.apply(eval_test_function(id, x)?)))
            .collect()
    }

    /// Writes `x,y` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y\n");
        for (x, y) in self.xs.iter().zip(&self.ys) {
            out.push_str(&format!("{x},{y}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a two-column `x,y` CSV; a non-numeric first line is a header.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
                return Err(Error::Config(format!("line {}: expected two columns", lineno + 1)));
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    xs.push(x);
                    ys.push(y);
                }
                _ if lineno == 0 => continue,
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: could not parse '{line}'",
                        lineno + 1
                    )))
                }
            }
        }
        let sigma0 = f64::NAN;
        Dataset::new(xs, ys, sigma0)
    }
}

/// JSON sidecar written next to a simulated dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub id: TestFunctionId,
    pub n: usize,
    pub rsnr: f64,
    pub sigma0: f64,
    pub seed: u64,
    pub standardization: Standardization,
}

impl DatasetMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Simulates `x_i ~ U(0,1)`, `y_i = f̃(x_i) + N(0, σ₀²)` with `σ₀ = 1/rsnr`.
///
/// `rsnr = ∞` gives noiseless responses.
pub fn generate_dataset(
    id: TestFunctionId,
    n: usize,
    rsnr: f64,
    seed: u64,
    mode: StandardizationMode,
) -> Result<Dataset> {
    if !(rsnr > 0.0) {
        return Err(Error::Config(format!("rsnr must be positive, got {rsnr}")));
    }
    let truth = standardized_truth(id, DEFAULT_STANDARDIZATION_GRID)?;
    let sigma0 = 1.0 / rsnr;
    let mut x_rng = ChaCha8Rng::seed_from_u64(seed);
    x_rng.set_stream(0);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = x_rng.random();
        let z: f64 = noise_rng.sample(StandardNormal);
        xs.push(x);
        ys.push(truth.eval(x)? + sigma0 * z);
    }
    let mut data = Dataset {
        xs,
        ys,
        sigma0,
        standardization: truth.standardization,
    };
    if mode == StandardizationMode::Empirical && n >= 2 {
        let mean = data.ys.iter().sum::<f64>() / n as f64;
        let var = data.ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let emp = Standardization {
            center: mean,
            scale: var.sqrt(),
        };
        if !(emp.scale > 0.0) {
            return Err(Error::ZeroScale);
        }
        data.ys.iter_mut().for_each(|y| *y = emp.apply(*y));
        data.sigma0 /= emp.scale;
        data.standardization = data.standardization.then(&emp);
    }
    Ok(data)
}

/// `n⁻¹ Σ (truth_i − fitted_i)²`.
pub fn mse(truth: &[f64], fitted: &[f64]) -> Result<f64> {
    if truth.len() != fitted.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: fitted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    Ok(truth
        .iter()
        .zip(fitted)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn point_values() {
        assert_eq!(eval_test_function(TestFunctionId::Doppler, 0.0).unwrap(), 0.0);
        assert_eq!(eval_test_function(TestFunctionId::Blocks, 0.05).unwrap(), 0.0);
        assert_abs_diff_eq!(eval_test_function(TestFunctionId::HeaviSine, 0.0).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eval_test_function(TestFunctionId::Blocks, 0.95).unwrap(), 0.0, epsilon = 1e-12);
        assert!(eval_test_function(TestFunctionId::Bumps, 1.2).is_err());
        assert!(eval_test_function(TestFunctionId::Bumps, -0.1).is_err());
    }

    #[test]
    fn blocks_has_eleven_jumps() {
        let grid: Vec<f64> = (0..=100_000).map(|i| i as f64 / 100_000.0).collect();
        let vals: Vec<f64> = grid
            .iter()
            .map(|&x| eval_test_function(TestFunctionId::Blocks, x).unwrap())
            .collect();
        let mut jumps = Vec::new();
        for i in 1..vals.len() {
            if (vals[i] - vals[i - 1]).abs() > 1e-9 {
                jumps.push(grid[i]);
            }
        }
        // at a jump point sgn(0)=0 yields the midpoint, so each jump shows up twice
        jumps.dedup_by(|a, b| (*a - *b).abs() < 2e-5);
        assert_eq!(jumps.len(), 11);
        for (j, t) in jumps.iter().zip(BLOCKS_T.iter()) {
            assert!((j - t).abs() < 2e-5);
        }
    }

    #[test]
    fn bumps_nonnegative() {
        for i in 0..=10_000 {
            let v = eval_test_function(TestFunctionId::Bumps, i as f64 / 10_000.0).unwrap();
            assert!(v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn standardized_truth_moments() {
        for id in TestFunctionId::ALL {
            let t = standardized_truth(id, 4096).unwrap();
            let (m, s) = grid_moments(|x| t.eval(x).unwrap(), 4096);
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            // idempotent: re-standardizing the standardized truth is the identity
            let (m2, s2) = grid_moments(|x| (t.eval(x).unwrap() - m) / s, 4096);
            assert_abs_diff_eq!(m2, m, epsilon = 1e-12);
            assert_abs_diff_eq!(s2, s, epsilon = 1e-12);
        }
        assert!(standardized_truth(TestFunctionId::Blocks, 10).is_err());
    }

    #[test]
    fn blocks_scale_is_raw_grid_sd() {
        let n = 2000;
        let raw: Vec<f64> = (0..n)
            .map(|i| eval_test_function(TestFunctionId::Blocks, i as f64 / (n - 1) as f64).unwrap())
            .collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let t = standardized_truth(TestFunctionId::Blocks, n).unwrap();
        assert_abs_diff_eq!(t.standardization.scale, sd, epsilon = 1e-12);
    }

    #[test]
    fn dataset_generation() {
        let d = generate_dataset(TestFunctionId::Bumps, 50, 5.0, 9, StandardizationMode::Truth).unwrap();
        assert_eq!(d.sigma0, 0.2);
        assert_eq!(d.len(), 50);
        let again = generate_dataset(TestFunctionId::Bumps, 50, 5.0, 9, StandardizationMode::Truth).unwrap();
        assert_eq!(d, again);

        let clean =
            generate_dataset(TestFunctionId::HeaviSine, 40, f64::INFINITY, 3, StandardizationMode::Truth)
                .unwrap();
        let truth = clean.truth_at_design(TestFunctionId::HeaviSine).unwrap();
        assert_eq!(clean.ys, truth);
    }

    #[test]
    fn noise_variance_matches_sigma0() {
        // pooled over independent seeds: the sum of squared z-scores is chi-square(seeds)
        let n = 50_000;
        let seeds = 0..8u64;
        let mut chi2 = 0.0;
        for seed in seeds.clone() {
            let d = generate_dataset(TestFunctionId::Doppler, n, 3.0, seed, StandardizationMode::Truth).unwrap();
            let truth = d.truth_at_design(TestFunctionId::Doppler).unwrap();
            let e: Vec<f64> = d.ys.iter().zip(&truth).map(|(y, t)| y - t).collect();
            let mean = e.iter().sum::<f64>() / n as f64;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let s2 = d.sigma0 * d.sigma0;
            // sd of the sample variance of normals is σ²·sqrt(2/(n-1))
            let z = (var - s2) / (s2 * (2.0 / (n - 1) as f64).sqrt());
            assert!(z.abs() < 4.0, "seed {seed}: var {var} vs {s2}");
            chi2 += z * z;
        }
        // upper 0.999 quantile of chi-square(8) is 26.12
        assert!(chi2 < 26.12, "pooled chi-square {chi2}");
    }

    #[test]
    fn empirical_mode_keeps_truth_consistent() {
        let d = generate_dataset(TestFunctionId::Blocks, 500, 10.0, 4, StandardizationMode::Empirical).unwrap();
        let mean = d.ys.iter().sum::<f64>() / 500.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        let raw = generate_dataset(TestFunctionId::Blocks, 500, 10.0, 4, StandardizationMode::Truth).unwrap();
        let t_emp = d.truth_at_design(TestFunctionId::Blocks).unwrap();
        let t_raw = raw.truth_at_design(TestFunctionId::Blocks).unwrap();
        // same affine map sends raw ys/truth to the analysis scale
        let s = raw.ys[0] - t_raw[0];
        let s_emp = d.ys[0] - t_emp[0];
        assert_abs_diff_eq!(s_emp * (raw.sigma0 / d.sigma0), s, epsilon = 1e-12);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(mse(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]).unwrap(), 0.25, epsilon = 1e-15);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(TestFunctionId::Blocks, 20, 10.0, 1, StandardizationMode::Truth).unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        let back = Dataset::read_csv(&p).unwrap();
        assert_eq!(back.xs, d.xs);
        assert_eq!(back.ys, d.ys);
    }
}
