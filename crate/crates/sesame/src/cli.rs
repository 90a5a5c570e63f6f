//! Batch workflows behind the command-line interface: configuration schema,
//! validation, and the `simulate` / `localize` / `evaluate` pipelines.
//!
//! Configuration comes from a single JSON file; command-line flags override
//! individual fields. Every run writes a manifest with the hash of the
//! effective configuration, the master seed, and the code version, so equal
//! manifests reproduce equal outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimates::{self, PosteriorSummary};
use crate::eval::{self, EvalDataset, EvalSettings, Method};
use crate::forward::{read_matrix_csv, Leadfield};
use crate::model::{NoiseModel, PriorConfig};
use crate::rng::{self, stage};
use crate::sampler::{self, SamplerConfig};
use crate::simulate::{
    self, DatasetTruth, ScenarioDefaults, DEFAULT_AMPLITUDE_PEAK, DEFAULT_MIN_SEPARATION,
    DEFAULT_N_SAMPLES, DEFAULT_SNR_FLOOR_DB,
};
use crate::source_space::{SourceGrid, DEFAULT_NEIGHBOR_RADIUS, DEFAULT_PROPOSAL_SCALE};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub grid: Option<PathBuf>,
    pub leadfield: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    pub neighbor_radius: f64,
    pub proposal_scale: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            neighbor_radius: DEFAULT_NEIGHBOR_RADIUS,
            proposal_scale: DEFAULT_PROPOSAL_SCALE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSettings {
    pub poisson_mean: f64,
    pub n_dipoles_max: usize,
    /// Fixed prior width (sesame mode).
    pub sigma_q: Option<f64>,
    /// Hyperprior bounds (h-sesame mode). `sigma_max` defaults to
    /// `1e3 * sigma_min` when omitted.
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings {
            poisson_mean: crate::model::DEFAULT_POISSON_MEAN,
            n_dipoles_max: crate::model::DEFAULT_N_DIPOLES_MAX,
            sigma_q: None,
            sigma_min: None,
            sigma_max: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    /// Explicit noise standard deviation. Absent: estimated as 20% of the
    /// maximum absolute signal value.
    pub sigma: Option<f64>,
    /// Full noise covariance matrix (CSV); must be symmetric positive
    /// definite. Takes precedence over `sigma`.
    pub covariance_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub n_particles: usize,
    pub min_iterations: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub ess_ratio_low: f64,
    pub ess_ratio_high: f64,
    pub resample_threshold_fraction: f64,
    pub birth_prob: f64,
    pub death_prob: f64,
    pub gamma_shape: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSettings {
            n_particles: d.n_particles,
            min_iterations: d.min_iterations,
            max_iterations: d.max_iterations,
            seed: d.rng_seed,
            ess_ratio_low: d.ess_ratio_band.0,
            ess_ratio_high: d.ess_ratio_band.1,
            resample_threshold_fraction: d.resample_threshold_fraction,
            birth_prob: d.birth_prob,
            death_prob: d.death_prob,
            gamma_shape: d.gamma_shape,
        }
    }
}

impl SamplerSettings {
    pub fn to_sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_particles: self.n_particles,
            ess_ratio_band: (self.ess_ratio_low, self.ess_ratio_high),
            resample_threshold_fraction: self.resample_threshold_fraction,
            min_iterations: self.min_iterations,
            max_iterations: self.max_iterations,
            birth_prob: self.birth_prob,
            death_prob: self.death_prob,
            gamma_shape: self.gamma_shape,
            rng_seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSettings {
    /// First topography index; absent means centered on the signal peak.
    pub start: Option<usize>,
    pub length: usize,
}

impl Default for WindowSettings {
    fn default() -> Self {
        WindowSettings {
            start: None,
            length: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSynthSettings {
    pub n_points: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for GridSynthSettings {
    fn default() -> Self {
        GridSynthSettings {
            n_points: 200,
            radius: 0.08,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardSynthSettings {
    pub n_sensors: usize,
    pub sensor_radius: f64,
    pub seed: u64,
}

impl Default for ForwardSynthSettings {
    fn default() -> Self {
        ForwardSynthSettings {
            n_sensors: 50,
            sensor_radius: 0.12,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub n_datasets: usize,
    /// Dipole counts cycled across datasets.
    pub n_dipoles: Vec<usize>,
    pub amplitude_peak: f64,
    pub n_samples: usize,
    pub min_separation: f64,
    pub snr_floor_db: f64,
    pub noise_sigma: f64,
    /// Generate the grid instead of loading `paths.grid`.
    pub grid_synth: Option<GridSynthSettings>,
    /// Generate the leadfield instead of loading `paths.leadfield`.
    pub forward_synth: Option<ForwardSynthSettings>,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            n_datasets: 10,
            n_dipoles: vec![1],
            amplitude_peak: DEFAULT_AMPLITUDE_PEAK,
            n_samples: DEFAULT_N_SAMPLES,
            min_separation: DEFAULT_MIN_SEPARATION,
            snr_floor_db: DEFAULT_SNR_FLOOR_DB,
            noise_sigma: 2e-6,
            grid_synth: None,
            forward_synth: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSettings {
    /// Batch directory produced by `simulate` (contains `manifest.json`).
    pub datasets_dir: Option<PathBuf>,
    pub base_sigma: f64,
    pub k_values: Vec<f64>,
    pub sigma_min_divisor: f64,
    pub sigma_max_factor: f64,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        EvaluateSettings {
            datasets_dir: None,
            base_sigma: 2e-7,
            k_values: eval::DEFAULT_K_VALUES.to_vec(),
            sigma_min_divisor: eval::DEFAULT_SIGMA_MIN_DIVISOR,
            sigma_max_factor: eval::DEFAULT_SIGMA_MAX_FACTOR,
        }
    }
}

/// The run configuration: one JSON document covering all three commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Method,
    pub paths: PathsConfig,
    pub grid_options: GridOptions,
    pub prior: PriorSettings,
    pub noise: NoiseSettings,
    pub sampler: SamplerSettings,
    pub window: WindowSettings,
    pub peak_exclusion_radius: f64,
    pub simulate: SimulateSettings,
    pub evaluate: EvaluateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Method::Sesame,
            paths: PathsConfig::default(),
            grid_options: GridOptions::default(),
            prior: PriorSettings::default(),
            noise: NoiseSettings::default(),
            sampler: SamplerSettings::default(),
            window: WindowSettings::default(),
            peak_exclusion_radius: estimates::DEFAULT_PEAK_EXCLUSION_RADIUS,
            simulate: SimulateSettings::default(),
            evaluate: EvaluateSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Build the prior implied by the mode, rejecting mode-inconsistent
    /// settings.
    pub fn build_prior(&self) -> Result<PriorConfig> {
        match self.mode {
            Method::Sesame => {
                let sigma_q = self.prior.sigma_q.ok_or_else(|| {
                    Error::InvalidConfig("sesame mode requires prior.sigma_q".into())
                })?;
                PriorConfig::fixed(self.prior.poisson_mean, self.prior.n_dipoles_max, sigma_q)
            }
            Method::HSesame => {
                let sigma_min = self.prior.sigma_min.ok_or_else(|| {
                    Error::InvalidConfig("h-sesame mode requires prior.sigma_min".into())
                })?;
                let sigma_max = self
                    .prior
                    .sigma_max
                    .unwrap_or(eval::DEFAULT_SIGMA_MAX_FACTOR * sigma_min);
                PriorConfig::hyper(
                    self.prior.poisson_mean,
                    self.prior.n_dipoles_max,
                    sigma_min,
                    sigma_max,
                )
            }
        }
    }
}

/// Command-line flag overrides; flags win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Method>,
    pub k: Option<f64>,
    pub particles: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn apply_overrides(config: &mut RunConfig, overrides: &Overrides) {
    if let Some(seed) = overrides.seed {
        config.sampler.seed = seed;
    }
    if let Some(mode) = overrides.mode {
        config.mode = mode;
    }
    if let Some(k) = overrides.k {
        // Prior scale factor: multiplies every configured prior width; for
        // evaluate it restricts the sweep to this single value.
        if let Some(s) = config.prior.sigma_q.as_mut() {
            *s *= k;
        }
        if let Some(s) = config.prior.sigma_min.as_mut() {
            *s *= k;
        }
        if let Some(s) = config.prior.sigma_max.as_mut() {
            *s *= k;
        }
        config.evaluate.k_values = vec![k];
    }
    if let Some(n) = overrides.particles {
        config.sampler.n_particles = n;
    }
    if let Some(out) = &overrides.out {
        config.paths.output_dir = Some(out.clone());
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub datasets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leadfield_file: Option<String>,
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn output_dir(config: &RunConfig) -> Result<PathBuf> {
    config
        .paths
        .output_dir
        .clone()
        .ok_or_else(|| Error::InvalidConfig("paths.output_dir is required".into()))
}

fn load_grid(config: &RunConfig) -> Result<SourceGrid> {
    let path = config
        .paths
        .grid
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("paths.grid is required".into()))?;
    SourceGrid::from_csv(
        path,
        config.grid_options.neighbor_radius,
        config.grid_options.proposal_scale,
    )
}

fn build_noise(config: &RunConfig, data: &DMatrix<f64>) -> Result<NoiseModel> {
    if let Some(path) = &config.noise.covariance_file {
        let m = read_matrix_csv(path)?;
        return NoiseModel::full(m);
    }
    match config.noise.sigma {
        Some(sigma) => NoiseModel::scalar(sigma),
        None => NoiseModel::scalar(simulate::estimate_noise_sigma(data)?),
    }
}

/// Deterministic quasi-uniform points inside a ball, for synthesized grids.
pub fn synth_ball_grid(settings: &GridSynthSettings, options: &GridOptions) -> Result<SourceGrid> {
    use rand::Rng;
    let mut rng = rng::substream(settings.seed, stage::DATASET, 0, 0);
    let mut points = Vec::with_capacity(settings.n_points);
    while points.len() < settings.n_points {
        let x = settings.radius * (2.0 * rng.random::<f64>() - 1.0);
        let y = settings.radius * (2.0 * rng.random::<f64>() - 1.0);
        let z = settings.radius * (2.0 * rng.random::<f64>() - 1.0);
        if (x * x + y * y + z * z).sqrt() <= settings.radius {
            points.push(nalgebra::Point3::new(x, y, z));
        }
    }
    SourceGrid::build(points, options.neighbor_radius, options.proposal_scale)
}

/// Fibonacci-sphere sensor layout at the given radius.
pub fn fibonacci_sensors(n: usize, radius: f64) -> Vec<nalgebra::Point3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let a = golden * i as f64;
            nalgebra::Point3::new(radius * r * a.cos(), radius * y, radius * r * a.sin())
        })
        .collect()
}

pub struct SimulateOutput {
    pub batch_dir: PathBuf,
    pub dataset_dirs: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

/// Generate a batch of synthetic datasets plus the batch manifest.
pub fn cmd_simulate(config: &RunConfig) -> Result<SimulateOutput> {
    let batch_dir = output_dir(config)?;
    fs::create_dir_all(&batch_dir).map_err(|e| Error::io(&batch_dir, e))?;
    let sim = &config.simulate;

    // Grid: loaded or synthesized into the batch directory.
    let (grid, grid_file) = match (&config.paths.grid, &sim.grid_synth) {
        (Some(path), None) => {
            let grid = SourceGrid::from_csv(
                path,
                config.grid_options.neighbor_radius,
                config.grid_options.proposal_scale,
            )?;
            grid.write_csv(batch_dir.join("grid.csv"))?;
            (grid, "grid.csv".to_string())
        }
        (None, Some(gs)) => {
            let grid = synth_ball_grid(gs, &config.grid_options)?;
            grid.write_csv(batch_dir.join("grid.csv"))?;
            (grid, "grid.csv".to_string())
        }
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig(
                "give either paths.grid or simulate.grid_synth, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "simulate needs paths.grid or simulate.grid_synth".into(),
            ))
        }
    };

    let (leadfield, leadfield_file) = match (&config.paths.leadfield, &sim.forward_synth) {
        (Some(path), None) => {
            let lf = Leadfield::load(path, &grid)?;
            lf.save(batch_dir.join("leadfield.csv"))?;
            (lf, "leadfield.csv".to_string())
        }
        (None, Some(fsyn)) => {
            let sensors = fibonacci_sensors(fsyn.n_sensors, fsyn.sensor_radius);
            let lf = Leadfield::synth(&grid, &sensors, fsyn.seed)?;
            lf.save(batch_dir.join("leadfield.csv"))?;
            (lf, "leadfield.csv".to_string())
        }
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig(
                "give either paths.leadfield or simulate.forward_synth, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "simulate needs paths.leadfield or simulate.forward_synth".into(),
            ))
        }
    };

    if sim.n_dipoles.is_empty() {
        return Err(Error::InvalidConfig(
            "simulate.n_dipoles must not be empty".into(),
        ));
    }

    let defaults = ScenarioDefaults {
        amplitude_peak: sim.amplitude_peak,
        n_samples: sim.n_samples,
        min_separation: sim.min_separation,
        snr_floor_db: sim.snr_floor_db,
        noise_sigma: sim.noise_sigma,
    };
    let master_seed = config.sampler.seed;
    let mut dataset_dirs = Vec::with_capacity(sim.n_datasets);
    let mut dataset_names = Vec::with_capacity(sim.n_datasets);
    for i in 0..sim.n_datasets {
        let n_dipoles = sim.n_dipoles[i % sim.n_dipoles.len()];
        let mut rng = rng::substream(master_seed, stage::DATASET, i as u64, 0);
        let scenario = simulate::simulate_sources(&grid, n_dipoles, &mut rng, &defaults)?;
        let scenario = simulate::enforce_snr(&scenario, &grid, &leadfield, &mut rng)?;
        let data = simulate::synth_data(&scenario, &leadfield, &mut rng)?;
        let truth = DatasetTruth {
            true_coordinates: scenario
                .true_locations
                .iter()
                .map(|&r| {
                    let p = grid.point(r);
                    [p.x, p.y, p.z]
                })
                .collect(),
            snr_db: data.snr_db.clone(),
            scenario,
            seed: master_seed,
            grid_file: grid_file.clone(),
            leadfield_file: leadfield_file.clone(),
        };
        let name = format!("dataset_{i:03}");
        let dir = batch_dir.join(&name);
        simulate::write_dataset(&dir, &data.noisy, &truth)?;
        dataset_dirs.push(dir);
        dataset_names.push(name);
    }

    let manifest_path = write_manifest(
        &batch_dir,
        &Manifest {
            command: "simulate".into(),
            config_hash: config.hash(),
            seed: master_seed,
            version: VERSION.into(),
            datasets: dataset_names,
            grid_file: Some(grid_file),
            leadfield_file: Some(leadfield_file),
        },
    )?;
    Ok(SimulateOutput {
        batch_dir,
        dataset_dirs,
        manifest_path,
    })
}

pub struct LocalizeOutput {
    pub summary: PosteriorSummary,
    pub summary_path: PathBuf,
    pub window: (usize, usize),
    pub complete: bool,
}

/// Run one localization: window selection, sampling, summaries, diagnostics.
pub fn cmd_localize(config: &RunConfig) -> Result<LocalizeOutput> {
    let out_dir = output_dir(config)?;
    let grid = load_grid(config)?;
    let lf_path = config
        .paths
        .leadfield
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("paths.leadfield is required".into()))?;
    let leadfield = Leadfield::load(lf_path, &grid)?;
    let data_path = config
        .paths
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("paths.data is required".into()))?;
    let data = read_matrix_csv(data_path)?;
    if data.nrows() != leadfield.n_sensors() {
        return Err(Error::ShapeMismatch {
            what: format!("data {}", data_path.display()),
            expected: format!("{} sensor rows", leadfield.n_sensors()),
            found: format!("{} rows", data.nrows()),
        });
    }
    let prior = config.build_prior()?;
    let noise = build_noise(config, &data)?;

    let (start, length) = match config.window.start {
        Some(start) => {
            let length = config.window.length;
            if length == 0 || start + length > data.ncols() {
                return Err(Error::InvalidConfig(format!(
                    "window [{start}, {start}+{length}) exceeds the {} available topographies",
                    data.ncols()
                )));
            }
            (start, length)
        }
        None => eval::centered_window(&data, config.window.length),
    };
    let window = data.columns(start, length).into_owned();
    eprintln!(
        "localize: window start {start}, length {length} (of {} topographies)",
        data.ncols()
    );

    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let diag_path = out_dir.join("diagnostics.csv");
    let diag_file = fs::File::create(&diag_path).map_err(|e| Error::io(&diag_path, e))?;
    let mut diag = std::io::BufWriter::new(diag_file);
    writeln!(diag, "iteration,alpha,ess,resampled").map_err(|e| Error::io(&diag_path, e))?;

    let sampler_cfg = config.sampler.to_sampler_config();
    let state = sampler::run_with_progress(
        &window,
        &leadfield,
        &grid,
        &prior,
        &noise,
        &sampler_cfg,
        |rec| {
            let _ = writeln!(
                diag,
                "{},{},{},{}",
                rec.iteration, rec.alpha, rec.ess, rec.resampled as u8
            );
        },
    )?;
    diag.flush().map_err(|e| Error::io(&diag_path, e))?;

    let summary = estimates::summarize(&state, &grid, &prior, config.peak_exclusion_radius)?;

    // moment time courses at the point estimate, long CSV format
    let courses = estimates::moment_timecourses(
        &summary.est_locations,
        summary.est_sigma_q,
        &window,
        &leadfield,
        &noise,
    )?;
    let tc_path = out_dir.join("timecourses.csv");
    let mut tc = String::from("t,dipole,qx,qy,qz\n");
    for (d, course) in courses.iter().enumerate() {
        for (t, q) in course.iter().enumerate() {
            tc.push_str(&format!("{},{},{},{},{}\n", start + t, d, q[0], q[1], q[2]));
        }
    }
    fs::write(&tc_path, tc).map_err(|e| Error::io(&tc_path, e))?;

    #[derive(Serialize)]
    struct SummaryDoc<'a> {
        #[serde(flatten)]
        summary: &'a PosteriorSummary,
        mode: Method,
        window_start: usize,
        window_length: usize,
        seed: u64,
        noise_sigma: Option<f64>,
    }
    let summary_path = out_dir.join("summary.json");
    let noise_sigma = match &noise {
        NoiseModel::Scalar(s) => Some(*s),
        NoiseModel::Full(_) => None,
    };
    let doc = SummaryDoc {
        summary: &summary,
        mode: config.mode,
        window_start: start,
        window_length: length,
        seed: config.sampler.seed,
        noise_sigma,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json(&summary_path, e))?;
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;

    write_manifest(
        &out_dir,
        &Manifest {
            command: "localize".into(),
            config_hash: config.hash(),
            seed: config.sampler.seed,
            version: VERSION.into(),
            datasets: Vec::new(),
            grid_file: None,
            leadfield_file: None,
        },
    )?;

    Ok(LocalizeOutput {
        complete: summary.complete,
        window: (start, length),
        summary,
        summary_path,
    })
}

pub struct EvaluateOutput {
    pub report_dir: PathBuf,
    pub n_datasets: usize,
    pub n_cells: usize,
    pub skipped: Vec<String>,
}

/// Analyze a simulated batch with both methods over the prior scale sweep
/// and write the report directory.
pub fn cmd_evaluate(config: &RunConfig) -> Result<EvaluateOutput> {
    let report_dir = output_dir(config)?;
    let batch_dir = config
        .evaluate
        .datasets_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("evaluate.datasets_dir is required".into()))?;
    let manifest_path = batch_dir.join("manifest.json");
    let manifest: Manifest = {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?
    };

    // Inference grid and leadfield: explicit paths win, otherwise fall back
    // to the batch's own files (inverse crime, acceptable for smoke runs).
    let grid = match &config.paths.grid {
        Some(path) => SourceGrid::from_csv(
            path,
            config.grid_options.neighbor_radius,
            config.grid_options.proposal_scale,
        )?,
        None => {
            let name = manifest.grid_file.as_deref().unwrap_or("grid.csv");
            SourceGrid::from_csv(
                batch_dir.join(name),
                config.grid_options.neighbor_radius,
                config.grid_options.proposal_scale,
            )?
        }
    };
    let leadfield = match &config.paths.leadfield {
        Some(path) => Leadfield::load(path, &grid)?,
        None => {
            let name = manifest
                .leadfield_file
                .as_deref()
                .unwrap_or("leadfield.csv");
            Leadfield::load(batch_dir.join(name), &grid)?
        }
    };

    let mut datasets = Vec::new();
    let mut skipped = Vec::new();
    for name in &manifest.datasets {
        let dir = batch_dir.join(name);
        match simulate::read_dataset(&dir) {
            Ok((data, truth)) => {
                datasets.push(EvalDataset {
                    id: name.clone(),
                    data,
                    true_n_dipoles: truth.scenario.n_dipoles(),
                    true_coordinates: truth
                        .true_coordinates
                        .iter()
                        .map(|c| nalgebra::Point3::new(c[0], c[1], c[2]))
                        .collect(),
                });
            }
            Err(e) => {
                eprintln!("evaluate: skipping {name}: {e}");
                skipped.push(name.clone());
            }
        }
    }

    let settings = EvalSettings {
        base_sigma: config.evaluate.base_sigma,
        k_values: config.evaluate.k_values.clone(),
        sigma_min_divisor: config.evaluate.sigma_min_divisor,
        sigma_max_factor: config.evaluate.sigma_max_factor,
        poisson_mean: config.prior.poisson_mean,
        n_dipoles_max: config.prior.n_dipoles_max,
        window_length: config.window.length,
        master_seed: config.sampler.seed,
    };
    let sampler_cfg = config.sampler.to_sampler_config();
    let matrix = eval::compare_methods(&datasets, &grid, &leadfield, &settings, &sampler_cfg);

    fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    eval::write_report(&matrix, config.prior.n_dipoles_max, &report_dir)?;
    write_manifest(
        &report_dir,
        &Manifest {
            command: "evaluate".into(),
            config_hash: config.hash(),
            seed: config.sampler.seed,
            version: VERSION.into(),
            datasets: manifest.datasets.clone(),
            grid_file: None,
            leadfield_file: None,
        },
    )?;

    Ok(EvaluateOutput {
        report_dir,
        n_datasets: datasets.len(),
        n_cells: matrix.cells.len(),
        skipped,
    })
}
