//! Performance metrics and the multi-setting comparison harness.
//!
//! Metrics: confusion matrices over true vs estimated dipole counts, the
//! OSPA distance between estimated and true location sets (no cardinality
//! penalty: only the best `min(n_est, n_true)` pairs count), and the
//! pairwise squared difference of probability maps across prior scale
//! settings.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Point3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimates::{self, PosteriorSummary};
use crate::forward::Leadfield;
use crate::model::{NoiseModel, PriorConfig};
use crate::rng::{self, stage};
use crate::sampler::{self, SamplerConfig};
use crate::simulate::estimate_noise_sigma;
use crate::source_space::SourceGrid;

pub const DEFAULT_K_VALUES: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_SIGMA_MIN_DIVISOR: f64 = 35.0;
pub const DEFAULT_SIGMA_MAX_FACTOR: f64 = 1e3;

/// OSPA distance plus a flag for the degenerate empty-set case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OspaResult {
    pub distance: f64,
    /// True when either input set was empty (the empty sum convention).
    pub empty_input: bool,
}

/// OSPA between two location sets: the minimum over injective assignments of
/// the smaller set into the larger of the summed Euclidean distances.
pub fn ospa(estimated: &[Point3<f64>], truth: &[Point3<f64>]) -> OspaResult {
    if estimated.is_empty() || truth.is_empty() {
        return OspaResult {
            distance: 0.0,
            empty_input: true,
        };
    }
    let (small, large) = if estimated.len() <= truth.len() {
        (estimated, truth)
    } else {
        (truth, estimated)
    };
    let cost = DMatrix::from_fn(small.len(), large.len(), |r, c| {
        (small[r] - large[c]).norm()
    });
    OspaResult {
        distance: min_cost_assignment(&cost),
        empty_input: false,
    }
}

/// Minimum-cost injective assignment of rows into columns (rows <= columns)
/// by shortest augmenting paths with potentials.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> f64 {
    let n_rows = cost.nrows();
    let n_cols = cost.ncols();
    assert!(n_rows <= n_cols, "assignment expects rows <= columns");

    // 1-based arrays with a virtual column 0, the classic formulation.
    let mut u = vec![0.0f64; n_rows + 1];
    let mut v = vec![0.0f64; n_cols + 1];
    let mut matched_row = vec![0usize; n_cols + 1]; // column -> row
    for row in 1..=n_rows {
        let mut min_to = vec![f64::INFINITY; n_cols + 1];
        let mut prev_col = vec![0usize; n_cols + 1];
        let mut used = vec![false; n_cols + 1];
        let mut col0 = 0usize;
        matched_row[0] = row;
        loop {
            used[col0] = true;
            let row0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut next_col = 0usize;
            for col in 1..=n_cols {
                if used[col] {
                    continue;
                }
                let reduced = cost[(row0 - 1, col - 1)] - u[row0] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    prev_col[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    next_col = col;
                }
            }
            for col in 0..=n_cols {
                if used[col] {
                    u[matched_row[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = next_col;
            if matched_row[col0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        while col0 != 0 {
            let prev = prev_col[col0];
            matched_row[col0] = matched_row[prev];
            col0 = prev;
        }
    }
    let mut total = 0.0;
    for col in 1..=n_cols {
        if matched_row[col] != 0 {
            total += cost[(matched_row[col] - 1, col - 1)];
        }
    }
    total
}

/// Confusion matrix over (true count, estimated count) pairs, rows = true.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_max: usize,
    /// `(n_max + 1) x (n_max + 1)` counts, row-major.
    pub counts: Vec<Vec<usize>>,
}

pub fn confusion_matrix(pairs: &[(usize, usize)], n_max: usize) -> ConfusionMatrix {
    let mut counts = vec![vec![0usize; n_max + 1]; n_max + 1];
    for &(tnd, end) in pairs {
        counts[tnd.min(n_max)][end.min(n_max)] += 1;
    }
    ConfusionMatrix { n_max, counts }
}

impl ConfusionMatrix {
    pub fn row_sum(&self, tnd: usize) -> usize {
        self.counts[tnd].iter().sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("tnd");
        for end in 0..=self.n_max {
            out.push_str(&format!(",end_{end}"));
        }
        out.push('\n');
        for (tnd, row) in self.counts.iter().enumerate() {
            out.push_str(&tnd.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Sum over ordered pairs of settings of the gridded squared map difference
/// (unit cell volume).
pub fn posterior_map_variance(maps: &[Vec<f64>]) -> Result<f64> {
    if maps.is_empty() {
        return Ok(0.0);
    }
    let len = maps[0].len();
    if maps.iter().any(|m| m.len() != len) {
        return Err(Error::Inconsistent(
            "probability maps live on different grids".into(),
        ));
    }
    let mut total = 0.0;
    for (i, a) in maps.iter().enumerate() {
        for (j, b) in maps.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                acc += d * d;
            }
            total += acc;
        }
    }
    Ok(total)
}

/// The two analysis methods under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sesame,
    HSesame,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sesame" => Ok(Method::Sesame),
            "h-sesame" => Ok(Method::HSesame),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode {other:?}, expected \"sesame\" or \"h-sesame\""
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Sesame => write!(f, "sesame"),
            Method::HSesame => write!(f, "h-sesame"),
        }
    }
}

/// Prior width settings implied by a prior scale factor `k`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledSigma {
    pub sigma_q: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// `sigma_q(k) = base * k`, `sigma_min(k) = sigma_q(k) / divisor`,
/// `sigma_max = max_factor * sigma_min`.
pub fn scaled_sigma(base_sigma: f64, k: f64, divisor: f64, max_factor: f64) -> ScaledSigma {
    let sigma_q = base_sigma * k;
    let sigma_min = sigma_q / divisor;
    ScaledSigma {
        sigma_q,
        sigma_min,
        sigma_max: max_factor * sigma_min,
    }
}

/// One dataset ready for analysis.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub id: String,
    pub data: DMatrix<f64>,
    pub true_n_dipoles: usize,
    pub true_coordinates: Vec<Point3<f64>>,
}

/// Harness settings for the method comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub base_sigma: f64,
    pub k_values: Vec<f64>,
    pub sigma_min_divisor: f64,
    pub sigma_max_factor: f64,
    pub poisson_mean: f64,
    pub n_dipoles_max: usize,
    /// Topography window length; the window centers on the signal peak.
    pub window_length: usize,
    pub master_seed: u64,
}

impl EvalSettings {
    pub fn new(base_sigma: f64, master_seed: u64) -> Self {
        EvalSettings {
            base_sigma,
            k_values: DEFAULT_K_VALUES.to_vec(),
            sigma_min_divisor: DEFAULT_SIGMA_MIN_DIVISOR,
            sigma_max_factor: DEFAULT_SIGMA_MAX_FACTOR,
            poisson_mean: crate::model::DEFAULT_POISSON_MEAN,
            n_dipoles_max: crate::model::DEFAULT_N_DIPOLES_MAX,
            window_length: 20,
            master_seed,
        }
    }
}

/// Result of one (dataset, method, k) analysis cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCell {
    pub dataset: String,
    pub method: Method,
    pub k: f64,
    pub true_n_dipoles: usize,
    pub summary: Option<PosteriorSummary>,
    pub ospa: Option<f64>,
    pub ospa_empty: bool,
    pub error: Option<String>,
}

/// All cells of the comparison, filled or explicitly failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMatrix {
    pub cells: Vec<RunCell>,
    pub k_values: Vec<f64>,
}

impl RunMatrix {
    pub fn cell(&self, dataset: &str, method: Method, k: f64) -> Option<&RunCell> {
        self.cells
            .iter()
            .find(|c| c.dataset == dataset && c.method == method && c.k == k)
    }

    /// Fraction (percent) of completed cells with END == TND.
    pub fn accuracy(&self, method: Method, k: f64) -> f64 {
        let mut total = 0usize;
        let mut correct = 0usize;
        for c in &self.cells {
            if c.method != method || c.k != k {
                continue;
            }
            if let Some(s) = &c.summary {
                total += 1;
                if s.est_n_dipoles == c.true_n_dipoles {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            return f64::NAN;
        }
        100.0 * correct as f64 / total as f64
    }

    /// Fraction (percent) of completed cells with END > TND.
    pub fn overestimation_rate(&self, method: Method, k: f64) -> f64 {
        let mut total = 0usize;
        let mut over = 0usize;
        for c in &self.cells {
            if c.method != method || c.k != k {
                continue;
            }
            if let Some(s) = &c.summary {
                total += 1;
                if s.est_n_dipoles > c.true_n_dipoles {
                    over += 1;
                }
            }
        }
        if total == 0 {
            return f64::NAN;
        }
        100.0 * over as f64 / total as f64
    }

    pub fn confusion(&self, method: Method, k: f64, n_max: usize) -> ConfusionMatrix {
        let pairs: Vec<(usize, usize)> = self
            .cells
            .iter()
            .filter(|c| c.method == method && c.k == k)
            .filter_map(|c| {
                c.summary
                    .as_ref()
                    .map(|s| (c.true_n_dipoles, s.est_n_dipoles))
            })
            .collect();
        confusion_matrix(&pairs, n_max)
    }

    pub fn ospa_values(&self, method: Method, k: f64) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.method == method && c.k == k)
            .filter_map(|c| c.ospa)
            .collect()
    }

    /// Per-dataset variance of the probability map across the k settings.
    pub fn post_var(&self, method: Method) -> Result<BTreeMap<String, f64>> {
        let mut by_dataset: BTreeMap<String, Vec<&RunCell>> = BTreeMap::new();
        for c in &self.cells {
            if c.method == method {
                by_dataset.entry(c.dataset.clone()).or_default().push(c);
            }
        }
        let mut out = BTreeMap::new();
        for (dataset, cells) in by_dataset {
            let maps: Vec<Vec<f64>> = cells
                .iter()
                .filter_map(|c| c.summary.as_ref().map(|s| s.probability_map.clone()))
                .collect();
            if maps.len() == self.k_values.len() {
                out.insert(dataset, posterior_map_variance(&maps)?);
            }
        }
        Ok(out)
    }
}

/// Time index of the signal peak: the topography with the largest Euclidean
/// norm across sensors.
pub fn signal_peak(data: &DMatrix<f64>) -> usize {
    let mut best = 0usize;
    let mut best_norm = f64::NEG_INFINITY;
    for t in 0..data.ncols() {
        let norm = data.column(t).norm();
        if norm > best_norm {
            best_norm = norm;
            best = t;
        }
    }
    best
}

/// Window of `length` topographies centered on the signal peak, clamped to
/// the recording.
pub fn centered_window(data: &DMatrix<f64>, length: usize) -> (usize, usize) {
    let t = data.ncols();
    let length = length.min(t).max(1);
    let peak = signal_peak(data);
    let start = peak.saturating_sub(length / 2).min(t - length);
    (start, length)
}

#[allow(clippy::too_many_arguments)]
fn analyze_cell(
    dataset: &EvalDataset,
    method: Method,
    k: f64,
    grid: &SourceGrid,
    leadfield: &Leadfield,
    settings: &EvalSettings,
    sampler_cfg: &SamplerConfig,
    seed: u64,
) -> Result<(PosteriorSummary, OspaResult)> {
    let sigmas = scaled_sigma(
        settings.base_sigma,
        k,
        settings.sigma_min_divisor,
        settings.sigma_max_factor,
    );
    let prior = match method {
        Method::Sesame => PriorConfig::fixed(
            settings.poisson_mean,
            settings.n_dipoles_max,
            sigmas.sigma_q,
        )?,
        Method::HSesame => PriorConfig::hyper(
            settings.poisson_mean,
            settings.n_dipoles_max,
            sigmas.sigma_min,
            sigmas.sigma_max,
        )?,
    };
    let (start, length) = centered_window(&dataset.data, settings.window_length);
    let window = dataset.data.columns(start, length).into_owned();
    let noise = NoiseModel::scalar(estimate_noise_sigma(&dataset.data)?)?;
    let cfg = SamplerConfig {
        rng_seed: seed,
        ..*sampler_cfg
    };
    let state = sampler::run(&window, leadfield, grid, &prior, &noise, &cfg)?;
    let summary = estimates::summarize(
        &state,
        grid,
        &prior,
        estimates::DEFAULT_PEAK_EXCLUSION_RADIUS,
    )?;
    let est_coords: Vec<Point3<f64>> = summary
        .est_coordinates
        .iter()
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .collect();
    let ospa_result = ospa(&est_coords, &dataset.true_coordinates);
    Ok((summary, ospa_result))
}

/// Analyze every dataset with both methods at every prior scale factor.
/// Individual failures are recorded in the cell and the harness continues.
/// Cell seeds derive from the master seed, the dataset index, and the
/// setting index, so the whole matrix reproduces from one integer.
pub fn compare_methods(
    datasets: &[EvalDataset],
    grid: &SourceGrid,
    leadfield: &Leadfield,
    settings: &EvalSettings,
    sampler_cfg: &SamplerConfig,
) -> RunMatrix {
    let methods = [Method::Sesame, Method::HSesame];
    let mut jobs = Vec::new();
    for (d_idx, dataset) in datasets.iter().enumerate() {
        for (m_idx, &method) in methods.iter().enumerate() {
            for (k_idx, &k) in settings.k_values.iter().enumerate() {
                let setting_idx = (m_idx * settings.k_values.len() + k_idx) as u64;
                jobs.push((d_idx, dataset, method, k, setting_idx));
            }
        }
    }
    let cells: Vec<RunCell> = jobs
        .par_iter()
        .map(|&(d_idx, dataset, method, k, setting_idx)| {
            let seed = rng::derive_seed(
                settings.master_seed,
                stage::EVAL_CELL,
                d_idx as u64,
                setting_idx,
            );
            match analyze_cell(
                dataset,
                method,
                k,
                grid,
                leadfield,
                settings,
                sampler_cfg,
                seed,
            ) {
                Ok((summary, ospa_result)) => RunCell {
                    dataset: dataset.id.clone(),
                    method,
                    k,
                    true_n_dipoles: dataset.true_n_dipoles,
                    summary: Some(summary),
                    ospa: Some(ospa_result.distance),
                    ospa_empty: ospa_result.empty_input,
                    error: None,
                },
                Err(e) => RunCell {
                    dataset: dataset.id.clone(),
                    method,
                    k,
                    true_n_dipoles: dataset.true_n_dipoles,
                    summary: None,
                    ospa: None,
                    ospa_empty: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    RunMatrix {
        cells,
        k_values: settings.k_values.clone(),
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    (q(0.25), q(0.5), q(0.75))
}

/// Write the report directory: per-setting confusion matrices, OSPA rows,
/// map variances, sigma estimates, and an aggregate `summary.json`.
pub fn write_report(matrix: &RunMatrix, n_max: usize, out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    for &method in &[Method::Sesame, Method::HSesame] {
        for &k in &matrix.k_values {
            let cm = matrix.confusion(method, k, n_max);
            cm.write_csv(out_dir.join(format!("confusion_{method}_{k}.csv")))?;
        }
    }

    let mut ospa_csv = String::from("dataset,method,k,tnd,value\n");
    for c in &matrix.cells {
        if let Some(v) = c.ospa {
            ospa_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                c.dataset, c.method, c.k, c.true_n_dipoles, v
            ));
        }
    }
    let ospa_path = out_dir.join("ospa.csv");
    fs::write(&ospa_path, ospa_csv).map_err(|e| Error::io(&ospa_path, e))?;

    let mut pv_csv = String::from("dataset,method,post_var\n");
    for &method in &[Method::Sesame, Method::HSesame] {
        for (dataset, pv) in matrix.post_var(method)? {
            pv_csv.push_str(&format!("{dataset},{method},{pv}\n"));
        }
    }
    let pv_path = out_dir.join("post_var.csv");
    fs::write(&pv_path, pv_csv).map_err(|e| Error::io(&pv_path, e))?;

    let mut sig_csv = String::from("dataset,method,k,est_sigma_q\n");
    for c in &matrix.cells {
        if let Some(s) = &c.summary {
            sig_csv.push_str(&format!(
                "{},{},{},{}\n",
                c.dataset, c.method, c.k, s.est_sigma_q
            ));
        }
    }
    let sig_path = out_dir.join("sigma_estimates.csv");
    fs::write(&sig_path, sig_csv).map_err(|e| Error::io(&sig_path, e))?;

    #[derive(Serialize)]
    struct SettingAggregate {
        method: String,
        k: f64,
        accuracy_percent: f64,
        overestimation_percent: f64,
        median_ospa: f64,
        n_cells: usize,
        n_failed: usize,
    }
    let mut aggregates = Vec::new();
    for &method in &[Method::Sesame, Method::HSesame] {
        for &k in &matrix.k_values {
            let cells: Vec<&RunCell> = matrix
                .cells
                .iter()
                .filter(|c| c.method == method && c.k == k)
                .collect();
            aggregates.push(SettingAggregate {
                method: method.to_string(),
                k,
                accuracy_percent: matrix.accuracy(method, k),
                overestimation_percent: matrix.overestimation_rate(method, k),
                median_ospa: median(&matrix.ospa_values(method, k)),
                n_cells: cells.len(),
                n_failed: cells.iter().filter(|c| c.error.is_some()).count(),
            });
        }
    }
    #[derive(Serialize)]
    struct Summary {
        settings: Vec<SettingAggregate>,
        median_post_var_sesame: f64,
        median_post_var_h_sesame: f64,
    }
    let pv_s: Vec<f64> = matrix.post_var(Method::Sesame)?.into_values().collect();
    let pv_h: Vec<f64> = matrix.post_var(Method::HSesame)?.into_values().collect();
    let summary = Summary {
        settings: aggregates,
        median_post_var_sesame: median(&pv_s),
        median_post_var_h_sesame: median(&pv_h),
    };
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
