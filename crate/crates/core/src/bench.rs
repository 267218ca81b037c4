//! Simulation sweeps over test functions, sample sizes and noise levels.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::besov;
use crate::model::{self, HyperParams};
use crate::sampler::{self, ChainConfig};
use crate::testbed::{self, StandardizationMode, TestFunctionId};
use crate::{Error, Result};

/// Header of `results.csv`.
pub const RESULTS_HEADER: &str = "function,n,rsnr,replicate,mse,log_mse,sigma_hat,mean_J_total,wall_seconds";

/// Exponent that may be written as a number or as `"inf"` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Exponent {
    Finite(f64),
    Named(String),
}

impl Exponent {
    pub fn value(&self) -> Result<f64> {
        match self {
            Exponent::Finite(v) if *v > 0.0 => Ok(*v),
            Exponent::Named(s) if matches!(s.as_str(), "inf" | "infinity" | "Inf") => Ok(f64::INFINITY),
            other => Err(Error::Config(format!("invalid exponent {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BesovConfig {
    pub grid_sizes: Vec<usize>,
    pub s: f64,
    pub p: Vec<Exponent>,
    pub q: Exponent,
    pub t_points: usize,
}

impl Default for BesovConfig {
    fn default() -> Self {
        Self {
            grid_sizes: vec![1024, 4096, 16384],
            s: 1.0,
            p: vec![Exponent::Finite(1.0), Exponent::Named("inf".into())],
            q: Exponent::Named("inf".into()),
            t_points: 24,
        }
    }
}

/// Full experiment configuration as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub functions: Vec<TestFunctionId>,
    pub ns: Vec<usize>,
    pub rsnrs: Vec<f64>,
    pub replicates: usize,
    pub hyper: HyperParams,
    pub chain: ChainConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Concurrent cells; 0 uses every available core.
    pub workers: usize,
    pub standardization: StandardizationMode,
    pub besov: BesovConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            functions: TestFunctionId::ALL.to_vec(),
            ns: vec![128, 512, 2048],
            rsnrs: vec![3.0, 5.0, 10.0],
            replicates: 20,
            hyper: HyperParams::default(),
            chain: ChainConfig::default(),
            output_dir: PathBuf::from("labs-results"),
            seed: 20_240_601,
            workers: 0,
            standardization: StandardizationMode::Truth,
            besov: BesovConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.ns.is_empty() {
            return Err(Error::Config("ns must be nonempty".into()));
        }
        if let Some(n) = self.ns.iter().find(|&&n| n < 2) {
            return Err(Error::Config(format!("sample size {n} is below 2")));
        }
        if self.functions.is_empty() || self.rsnrs.is_empty() {
            return Err(Error::Config("functions and rsnrs must be nonempty".into()));
        }
        if let Some(r) = self.rsnrs.iter().find(|r| !(**r > 0.0)) {
            return Err(Error::Config(format!("rsnr {r} must be positive")));
        }
        self.hyper.validate()?;
        self.chain.validate()
    }

    /// Cells in sweep order: function, n, rsnr, replicate.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &function in &self.functions {
            for &n in &self.ns {
                for &rsnr in &self.rsnrs {
                    for replicate in 0..self.replicates {
                        out.push(Cell {
                            function,
                            n,
                            rsnr,
                            replicate,
                        });
                    }
                }
            }
        }
        out
    }
}

/// One `(function, n, rsnr, replicate)` combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub function: TestFunctionId,
    pub n: usize,
    pub rsnr: f64,
    pub replicate: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of a cell; depends only on the master seed and the cell itself.
pub fn sub_seed(master: u64, cell: &Cell) -> u64 {
    let fid = TestFunctionId::ALL
        .iter()
        .position(|&f| f == cell.function)
        .expect("known function") as u64;
    [fid, cell.n as u64, cell.rsnr.to_bits(), cell.replicate as u64]
        .iter()
        .fold(splitmix64(master), |acc, &v| splitmix64(acc ^ v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub function: TestFunctionId,
    pub n: usize,
    pub rsnr: f64,
    pub replicate: usize,
    pub seed: u64,
    pub mse: f64,
    pub log_mse: f64,
    /// Posterior mean of `σ`.
    pub sigma_hat: f64,
    #[serde(rename = "mean_J_total")]
    pub mean_j_total: f64,
    pub wall_seconds: f64,
    /// Set when the cell failed; the numeric fields are then NaN.
    pub error: Option<String>,
}

impl BenchRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.function,
            self.n,
            self.rsnr,
            self.replicate,
            self.mse,
            self.log_mse,
            self.sigma_hat,
            self.mean_j_total,
            self.wall_seconds
        )
    }
}

/// Fits one cell from its seed alone.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> BenchRecord {
    let seed = sub_seed(cfg.seed, cell);
    let start = Instant::now();
    let result = (|| -> Result<(f64, f64, f64)> {
        let data = testbed::generate_dataset(cell.function, cell.n, cell.rsnr, seed, cfg.standardization)?;
        let sch = model::schedule(cell.n, &cfg.hyper)?;
        let chain = ChainConfig {
            seed: splitmix64(seed ^ 0x5A5A_5A5A),
            ..cfg.chain.clone()
        };
        let out = sampler::run_chain_with_schedule(&data, &cfg.hyper, &sch, &chain)?;
        let fitted = sampler::posterior_mean(&out, &data.xs)?;
        let truth = data.truth_at_design(cell.function)?;
        Ok((testbed::mse(&truth, &fitted)?, out.sigma_hat(), out.mean_total_atoms()))
    })();
    let wall_seconds = start.elapsed().as_secs_f64();
    match result {
        Ok((mse, sigma_hat, mean_j_total)) => BenchRecord {
            function: cell.function,
            n: cell.n,
            rsnr: cell.rsnr,
            replicate: cell.replicate,
            seed,
            mse,
            log_mse: mse.ln(),
            sigma_hat,
            mean_j_total,
            wall_seconds,
            error: None,
        },
        Err(e) => BenchRecord {
            function: cell.function,
            n: cell.n,
            rsnr: cell.rsnr,
            replicate: cell.replicate,
            seed,
            mse: f64::NAN,
            log_mse: f64::NAN,
            sigma_hat: f64::NAN,
            mean_j_total: f64::NAN,
            wall_seconds,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every cell; records come back in sweep order.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<Vec<BenchRecord>> {
    run_benchmark_with_progress(cfg, None)
}

/// [`run_benchmark`], appending each finished record as one JSON line to
/// `progress` as soon as it completes.
pub fn run_benchmark_with_progress(cfg: &ExperimentConfig, progress: Option<&Path>) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let sink = match progress {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            Some(Mutex::new(File::create(p)?))
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells = cfg.cells();
    let records: Vec<BenchRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let rec = run_cell(cfg, cell);
                if let Some(sink) = &sink {
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    let mut f = sink.lock().expect("progress writer");
                    if let Err(e) = writeln!(f, "{line}") {
                        log::warn!("progress write failed: {e}");
                    }
                }
                if let Some(err) = &rec.error {
                    log::warn!("{} n={} rsnr={} rep={} failed: {err}", rec.function, rec.n, rec.rsnr, rec.replicate);
                }
                rec
            })
            .collect()
    });
    Ok(records)
}

/// Ordinary least squares of `log mse` on `log n`: `(slope, intercept)`.
pub fn rate_fit(ns: &[usize], mses: &[f64]) -> Result<(f64, f64)> {
    if ns.len() != mses.len() {
        return Err(Error::LengthMismatch {
            left: ns.len(),
            right: mses.len(),
        });
    }
    let mut distinct = ns.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: distinct.len(),
        });
    }
    if mses.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::Config("rate fit needs positive MSE values".into()));
    }
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = mses.iter().map(|m| m.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Linear-interpolation quantile of sorted data (`p ∈ [0, 1]`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Boxplot statistics of log-MSE for one `(function, n, rsnr)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub function: TestFunctionId,
    pub n: usize,
    pub rsnr: f64,
    pub count: usize,
    pub failed: usize,
    pub median_log_mse: f64,
    pub q1_log_mse: f64,
    pub q3_log_mse: f64,
    pub iqr_log_mse: f64,
    pub median_mse: f64,
    pub median_sigma_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub function: TestFunctionId,
    pub rsnr: f64,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    pub failures: Vec<BenchRecord>,
}

pub fn summarize(records: &[BenchRecord]) -> Summary {
    let mut keys: Vec<(TestFunctionId, usize, f64)> = Vec::new();
    for r in records {
        let key = (r.function, r.n, r.rsnr);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let cells = keys
        .into_iter()
        .map(|(function, n, rsnr)| {
            let group: Vec<&BenchRecord> = records
                .iter()
                .filter(|r| r.function == function && r.n == n && r.rsnr == rsnr)
                .collect();
            let ok: Vec<&BenchRecord> = group.iter().copied().filter(|r| !r.failed()).collect();
            let mut logs: Vec<f64> = ok.iter().map(|r| r.log_mse).collect();
            logs.sort_by(f64::total_cmp);
            let q1 = quantile_sorted(&logs, 0.25);
            let q3 = quantile_sorted(&logs, 0.75);
            CellSummary {
                function,
                n,
                rsnr,
                count: ok.len(),
                failed: group.len() - ok.len(),
                median_log_mse: quantile_sorted(&logs, 0.5),
                q1_log_mse: q1,
                q3_log_mse: q3,
                iqr_log_mse: q3 - q1,
                median_mse: median(&ok.iter().map(|r| r.mse).collect::<Vec<_>>()),
                median_sigma_hat: median(&ok.iter().map(|r| r.sigma_hat).collect::<Vec<_>>()),
            }
        })
        .collect();
    Summary {
        cells,
        failures: records.iter().filter(|r| r.failed()).cloned().collect(),
    }
}

/// Slope of median MSE against `n` for each `(function, rsnr)` with at least
/// three distinct sample sizes.
pub fn rates(summary: &Summary) -> Vec<RateSummary> {
    let mut keys: Vec<(TestFunctionId, f64)> = Vec::new();
    for c in &summary.cells {
        if !keys.contains(&(c.function, c.rsnr)) {
            keys.push((c.function, c.rsnr));
        }
    }
    keys.into_iter()
        .filter_map(|(function, rsnr)| {
            let (ns, mses): (Vec<usize>, Vec<f64>) = summary
                .cells
                .iter()
                .filter(|c| c.function == function && c.rsnr == rsnr && c.count > 0)
                .map(|c| (c.n, c.median_mse))
                .unzip();
            rate_fit(&ns, &mses).ok().map(|(slope, intercept)| RateSummary {
                function,
                rsnr,
                slope,
                intercept,
            })
        })
        .collect()
}

/// Writes `results.csv`, `summary.json` and `rates.csv` into `dir`.
pub fn emit_results(records: &[BenchRecord], dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no records to emit".into()));
    }
    fs::create_dir_all(dir)?;
    let mut csv = String::from(RESULTS_HEADER);
    csv.push('\n');
    for r in records.iter().filter(|r| !r.failed()) {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(dir.join("results.csv"), csv)?;

    let summary = summarize(records);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    let mut rates_csv = String::from("function,rsnr,slope,intercept\n");
    for r in rates(&summary) {
        rates_csv.push_str(&format!("{},{},{},{}\n", r.function, r.rsnr, r.slope, r.intercept));
    }
    fs::write(dir.join("rates.csv"), rates_csv)?;
    Ok(())
}

/// Piecewise-constant regressogram with `bins` equal-width bins on `[0, 1]`;
/// empty bins fall back to the overall mean.
pub fn regressogram(xs: &[f64], ys: &[f64], bins: usize, at: &[f64]) -> Vec<f64> {
    let bin_of = |x: f64| ((x * bins as f64).floor() as usize).min(bins - 1);
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (&x, &y) in xs.iter().zip(ys) {
        let b = bin_of(x);
        sums[b] += y;
        counts[b] += 1;
    }
    let overall = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
    at.iter()
        .map(|&x| {
            let b = bin_of(x);
            if counts[b] > 0 {
                sums[b] / counts[b] as f64
            } else {
                overall
            }
        })
        .collect()
}

/// One row of the `besov-check` output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BesovRow {
    pub function: TestFunctionId,
    pub grid_size: usize,
    pub r: usize,
    pub p: f64,
    pub s: f64,
    pub t: f64,
    pub w: f64,
    pub scaled: f64,
}

/// Modulus-of-smoothness profiles of the raw test functions for every grid
/// size and `p` in `cfg.besov`.
pub fn besov_check(cfg: &ExperimentConfig) -> Result<Vec<BesovRow>> {
    let bc = &cfg.besov;
    let r = bc.s.floor() as usize + 1;
    let mut rows = Vec::new();
    for &function in &cfg.functions {
        for &grid_size in &bc.grid_sizes {
            let g = besov::GridFunction::<f64>::sample(grid_size, |x| {
                testbed::eval_test_function(function, x.clamp(0.0, 1.0)).expect("clamped into [0, 1]")
            })?;
            let t_grid = besov::log_t_grid(grid_size, bc.t_points);
            for p in &bc.p {
                let p = p.value()?;
                for pt in besov::modulus_profile(&g, bc.s, p, &t_grid) {
                    rows.push(BesovRow {
                        function,
                        grid_size,
                        r,
                        p,
                        s: bc.s,
                        t: pt.t,
                        w: pt.w,
                        scaled: pt.scaled,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// One seminorm estimate of the `besov-check` output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeminormRow {
    pub function: TestFunctionId,
    pub grid_size: usize,
    pub s: f64,
    pub p: f64,
    pub q: f64,
    pub estimate: f64,
}

/// Besov seminorm estimates of the raw test functions for every grid size
/// and `p` in `cfg.besov`.
pub fn besov_seminorms(cfg: &ExperimentConfig) -> Result<Vec<SeminormRow>> {
    let bc = &cfg.besov;
    let q = bc.q.value()?;
    let mut rows = Vec::new();
    for &function in &cfg.functions {
        for &grid_size in &bc.grid_sizes {
            let g = besov::GridFunction::<f64>::sample(grid_size, |x| {
                testbed::eval_test_function(function, x.clamp(0.0, 1.0)).expect("clamped into [0, 1]")
            })?;
            let t_grid = besov::log_t_grid(grid_size, bc.t_points);
            for p in &bc.p {
                let p = p.value()?;
                rows.push(SeminormRow {
                    function,
                    grid_size,
                    s: bc.s,
                    p,
                    q,
                    estimate: besov::besov_seminorm_estimate(&g, bc.s, p, q, &t_grid),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_seminorm_csv(rows: &[SeminormRow], path: &Path) -> Result<()> {
    let mut out = String::from("function,grid_size,s,p,q,estimate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.function, r.grid_size, r.s, r.p, r.q, r.estimate
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_besov_csv(rows: &[BesovRow], path: &Path) -> Result<()> {
    let mut out = String::from("function,grid_size,r,p,s,t,w,t_pow_neg_s_w\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.function, r.grid_size, r.r, r.p, r.s, r.t, r.w, r.scaled
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rate_fit_examples() {
        let ns = [128usize, 1024, 8192];
        let exact: Vec<f64> = ns.iter().map(|&n| 3.0 * (n as f64).powf(-2.0 / 3.0)).collect();
        let (slope, intercept) = rate_fit(&ns, &exact).unwrap();
        assert_abs_diff_eq!(slope, -2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(intercept, 3f64.ln(), epsilon = 1e-11);
        let (flat, _) = rate_fit(&ns, &[0.2, 0.2, 0.2]).unwrap();
        assert_abs_diff_eq!(flat, 0.0, epsilon = 1e-14);
        let logged: Vec<f64> = ns
            .iter()
            .map(|&n| (n as f64).powf(-2.0 / 3.0) * (n as f64).ln().powi(4))
            .collect();
        // log factors flatten the slope: -2/3 + 4·Δlog log n / Δlog n, computed
        // directly from the three points
        let (s, _) = rate_fit(&ns, &logged).unwrap();
        let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let ly: Vec<f64> = logged.iter().map(|v| v.ln()).collect();
        let mx = lx.iter().sum::<f64>() / 3.0;
        let my = ly.iter().sum::<f64>() / 3.0;
        let direct = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert_abs_diff_eq!(s, direct, epsilon = 1e-12);
        assert!(s > -0.08 && s < -0.06, "slope {s}");
        assert!(rate_fit(&[128, 1024], &[0.1, 0.05]).is_err());
        assert!(rate_fit(&[128, 128, 1024], &[0.1, 0.1, 0.05]).is_err());
    }

    #[test]
    fn sub_seed_is_cell_local() {
        let c = Cell {
            function: TestFunctionId::Bumps,
            n: 512,
            rsnr: 5.0,
            replicate: 3,
        };
        let a = sub_seed(7, &c);
        assert_eq!(a, sub_seed(7, &c));
        assert_ne!(a, sub_seed(8, &c));
        assert_ne!(a, sub_seed(7, &Cell { replicate: 4, ..c }));
        assert_ne!(a, sub_seed(7, &Cell { rsnr: 10.0, ..c }));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 0.25), 1.75);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn regressogram_bins() {
        let xs = [0.1, 0.2, 0.6, 0.7];
        let ys = [1.0, 3.0, 10.0, 20.0];
        let fit = regressogram(&xs, &ys, 2, &[0.05, 0.99, 1.0]);
        assert_eq!(fit, vec![2.0, 15.0, 15.0]);
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"ns":[64],"functions":["doppler"]}"#).unwrap();
        assert_eq!(partial.ns, vec![64]);
        assert_eq!(partial.replicates, 20);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"nope":1}"#).is_err());
    }
}
