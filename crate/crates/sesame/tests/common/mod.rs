//! Shared oracles and fixtures for the integration suites: exact enumeration
//! of small posteriors, chi-square goodness of fit, total-variation distance,
//! and the small localization instances the tests run on.

#![allow(dead_code)]

use nalgebra::{DMatrix, Point3, Vector3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use sesame::forward::Leadfield;
use sesame::model::{log_marginal_likelihood, log_prior, DipoleConfig, NoiseModel, PriorConfig};
use sesame::sampler::SmcState;
use sesame::source_space::SourceGrid;
use statrs::function::gamma::ln_gamma;

/// A fully specified small inverse problem.
pub struct SmallInstance {
    pub grid: SourceGrid,
    pub leadfield: Leadfield,
    pub noise: NoiseModel,
    pub data: DMatrix<f64>,
    pub true_locations: Vec<usize>,
    pub noise_sigma: f64,
}

/// Cube-corner grid (8 points, 4 cm edge) with 6 sensors on a 10 cm sphere,
/// T topographies from one true dipole, seeded noise at 20% of the peak
/// signal. The workhorse instance for exact-posterior comparisons.
pub fn cube_instance(t_samples: usize, noise_seed: u64) -> SmallInstance {
    let half = 0.02;
    let mut points = Vec::new();
    for &x in &[-half, half] {
        for &y in &[-half, half] {
            for &z in &[-half, half] {
                points.push(Point3::new(x, y, z));
            }
        }
    }
    // 4.5 cm radius: edge-adjacent corners only (3 neighbors each)
    let grid = SourceGrid::build(points, 0.045, 0.02).unwrap();
    let sensors = vec![
        Point3::new(0.1, 0.0, 0.0),
        Point3::new(-0.1, 0.0, 0.0),
        Point3::new(0.0, 0.1, 0.0),
        Point3::new(0.0, -0.1, 0.0),
        Point3::new(0.0, 0.0, 0.1),
        Point3::new(0.0, 0.0, -0.1),
    ];
    let leadfield = Leadfield::synth(&grid, &sensors, 2024).unwrap();

    let true_location = 3usize;
    let orientation = Vector3::new(1.0, 1.0, 1.0) / 3.0f64.sqrt();
    let amplitudes = [1.5e-7, 2.0e-7, 1.6e-7, 1.2e-7, 0.9e-7];
    let mut clean = DMatrix::zeros(6, t_samples);
    for t in 0..t_samples {
        let q = orientation * amplitudes[t % amplitudes.len()];
        clean.set_column(t, &leadfield.field_of(&[true_location], &[q]));
    }
    let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let noise_sigma = 0.2 * peak;
    let mut rng = sesame::rng::substream(noise_seed, sesame::rng::stage::SIM_NOISE, 0, 0);
    let normal = rand_distr::Normal::new(0.0, noise_sigma).unwrap();
    let mut data = clean.clone();
    for v in data.iter_mut() {
        *v += rand_distr::Distribution::sample(&normal, &mut rng);
    }
    SmallInstance {
        grid,
        leadfield,
        noise: NoiseModel::scalar(noise_sigma).unwrap(),
        data,
        true_locations: vec![true_location],
        noise_sigma,
    }
}

/// Line grid (5 points, 1.2 cm spacing) with 4 sensors; the smallest
/// enumerable instance for kernel stationarity checks.
pub fn line_instance(t_samples: usize, noise_seed: u64) -> SmallInstance {
    let points = (0..5)
        .map(|i| Point3::new(0.012 * i as f64 - 0.024, 0.0, 0.0))
        .collect();
    let grid = SourceGrid::build(points, 0.015, 0.01).unwrap();
    let sensors = vec![
        Point3::new(0.09, 0.0, 0.03),
        Point3::new(-0.09, 0.0, 0.03),
        Point3::new(0.0, 0.09, -0.03),
        Point3::new(0.0, -0.09, -0.03),
    ];
    let leadfield = Leadfield::synth(&grid, &sensors, 77).unwrap();
    let true_location = 2usize;
    let orientation = Vector3::new(0.0, 1.0, 0.0);
    let mut clean = DMatrix::zeros(4, t_samples);
    for t in 0..t_samples {
        let q = orientation * 2.0e-7 * (1.0 - 0.2 * t as f64 / t_samples as f64);
        clean.set_column(t, &leadfield.field_of(&[true_location], &[q]));
    }
    let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let noise_sigma = 0.2 * peak;
    let mut rng = sesame::rng::substream(noise_seed, sesame::rng::stage::SIM_NOISE, 1, 0);
    let normal = rand_distr::Normal::new(0.0, noise_sigma).unwrap();
    let mut data = clean.clone();
    for v in data.iter_mut() {
        *v += rand_distr::Distribution::sample(&normal, &mut rng);
    }
    SmallInstance {
        grid,
        leadfield,
        noise: NoiseModel::scalar(noise_sigma).unwrap(),
        data,
        true_locations: vec![true_location],
        noise_sigma,
    }
}

/// All sorted location subsets with 0..=n_max elements, in a stable order.
pub fn enumerate_states(n_points: usize, n_max: usize) -> Vec<Vec<usize>> {
    let mut states = vec![vec![]];
    if n_max >= 1 {
        for a in 0..n_points {
            states.push(vec![a]);
        }
    }
    if n_max >= 2 {
        for a in 0..n_points {
            for b in (a + 1)..n_points {
                states.push(vec![a, b]);
            }
        }
    }
    assert!(n_max <= 2, "enumeration limited to n_max <= 2");
    states
}

/// Log target mass of an unordered configuration: log-likelihood^alpha plus
/// the set-level prior (ordered-draw density times orderings).
pub fn log_state_mass(
    inst: &SmallInstance,
    prior: &PriorConfig,
    locations: &[usize],
    sigma_q: f64,
    alpha: f64,
) -> f64 {
    let config = DipoleConfig::new(locations.to_vec(), sigma_q);
    let ll = log_marginal_likelihood(&inst.data, &config, &inst.leadfield, &inst.noise).unwrap();
    let lp = log_prior(&config, &inst.grid, prior) + ln_gamma(locations.len() as f64 + 1.0);
    alpha * ll + lp
}

pub fn normalize_log_masses(log_masses: &[f64]) -> Vec<f64> {
    let max = log_masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_masses.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|m| m / total).collect()
}

/// Exact tempered posterior over the canonical states in fixed-sigma mode.
pub fn exact_posterior_fixed(
    inst: &SmallInstance,
    prior: &PriorConfig,
    sigma_q: f64,
    alpha: f64,
    states: &[Vec<usize>],
) -> Vec<f64> {
    let log_masses: Vec<f64> = states
        .iter()
        .map(|s| log_state_mass(inst, prior, s, sigma_q, alpha))
        .collect();
    normalize_log_masses(&log_masses)
}

/// Exact marginal posterior over canonical states in hierarchical mode, with
/// sigma handled by `n_bins` log-spaced bins of equal hyperprior mass
/// (geometric bin midpoints).
pub fn exact_posterior_hyper_binned(
    inst: &SmallInstance,
    prior: &PriorConfig,
    sigma_min: f64,
    sigma_max: f64,
    n_bins: usize,
    alpha: f64,
    states: &[Vec<usize>],
) -> Vec<f64> {
    let log_ratio = (sigma_max / sigma_min).ln();
    let sigma_at = |b: usize| sigma_min * ((b as f64 + 0.5) / n_bins as f64 * log_ratio).exp();
    let log_masses: Vec<f64> = states
        .iter()
        .map(|s| {
            // sum over bins in the log domain; hyperprior mass 1/n_bins each
            let per_bin: Vec<f64> = (0..n_bins)
                .map(|b| {
                    let sigma = sigma_at(b);
                    let config = DipoleConfig::new(s.clone(), sigma);
                    let ll =
                        log_marginal_likelihood(&inst.data, &config, &inst.leadfield, &inst.noise)
                            .unwrap();
                    alpha * ll
                })
                .collect();
            let max = per_bin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = per_bin.iter().map(|l| (l - max).exp()).sum();
            // location-and-count prior (sigma-independent factors only)
            let count_prior = {
                let config = DipoleConfig::new(s.clone(), (sigma_min * sigma_max).sqrt());
                log_prior(&config, &inst.grid, &fixed_shadow(prior))
                    + ln_gamma(s.len() as f64 + 1.0)
            };
            max + (sum / n_bins as f64).ln() + count_prior
        })
        .collect();
    normalize_log_masses(&log_masses)
}

/// Same Poisson/count settings but fixed-sigma, for evaluating the
/// sigma-independent prior factors.
fn fixed_shadow(prior: &PriorConfig) -> PriorConfig {
    PriorConfig::fixed(prior.poisson_mean, prior.n_dipoles_max, 1.0).unwrap()
}

/// Aggregate a weighted particle population over canonical states.
pub fn particle_state_marginal(state: &SmcState, states: &[Vec<usize>]) -> Vec<f64> {
    let mut masses = vec![0.0; states.len()];
    for p in &state.particles {
        let mut key = p.config.locations.clone();
        key.sort_unstable();
        let idx = states
            .iter()
            .position(|s| s == &key)
            .expect("particle outside enumerated state space");
        masses[idx] += p.log_weight.exp();
    }
    masses
}

pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Chi-square goodness-of-fit p-value with small-expectation cells pooled
/// (Cochran's rule: every cell used has expected count >= 5).
pub fn chi_square_p(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let mut stat = 0.0;
    let mut cells = 0usize;
    let mut pooled_obs = 0.0;
    let mut pooled_exp = 0.0;
    for (&o, &e) in observed.iter().zip(expected) {
        if e >= 5.0 {
            let d = o as f64 - e;
            stat += d * d / e;
            cells += 1;
        } else {
            pooled_obs += o as f64;
            pooled_exp += e;
        }
    }
    if pooled_exp > 0.0 {
        let d = pooled_obs - pooled_exp;
        stat += d * d / pooled_exp;
        cells += 1;
    }
    assert!(cells >= 2, "chi-square needs at least two cells");
    let df = (cells - 1) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

/// Draw an index from a discrete distribution by inverse CDF.
pub fn sample_index(masses: &[f64], rng: &mut impl rand::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &m) in masses.iter().enumerate() {
        acc += m;
        if u < acc {
            return i;
        }
    }
    masses.len() - 1
}

/// Fine log-spaced discretization of the sigma conditional
/// `pi(sigma) ∝ L(sigma)^alpha / sigma` at a fixed configuration:
/// returns normalized bin masses; bin b spans
/// `[sigma_min r^(b/n), sigma_min r^((b+1)/n)]` with midpoint evaluation.
pub fn sigma_conditional_bins(
    inst: &SmallInstance,
    locations: &[usize],
    sigma_min: f64,
    sigma_max: f64,
    n_bins: usize,
    alpha: f64,
) -> Vec<f64> {
    let log_ratio = (sigma_max / sigma_min).ln();
    let log_masses: Vec<f64> = (0..n_bins)
        .map(|b| {
            let sigma = sigma_min * ((b as f64 + 0.5) / n_bins as f64 * log_ratio).exp();
            let config = DipoleConfig::new(locations.to_vec(), sigma);
            let ll =
                log_marginal_likelihood(&inst.data, &config, &inst.leadfield, &inst.noise).unwrap();
            // log-uniform: equal hyperprior mass per log bin
            alpha * ll
        })
        .collect();
    normalize_log_masses(&log_masses)
}

/// Geometric midpoint of fine bin `b`.
pub fn sigma_bin_midpoint(sigma_min: f64, sigma_max: f64, n_bins: usize, b: usize) -> f64 {
    let log_ratio = (sigma_max / sigma_min).ln();
    sigma_min * ((b as f64 + 0.5) / n_bins as f64 * log_ratio).exp()
}

/// Which fine/coarse bin a sigma value falls into.
pub fn sigma_bin_of(sigma: f64, sigma_min: f64, sigma_max: f64, n_bins: usize) -> usize {
    let log_ratio = (sigma_max / sigma_min).ln();
    let pos = (sigma / sigma_min).ln() / log_ratio * n_bins as f64;
    (pos.floor() as usize).min(n_bins - 1)
}

/// Draw sigma from the binned conditional: pick a bin by mass, then place
/// the point log-uniformly inside it.
pub fn sample_sigma_binned(
    masses: &[f64],
    sigma_min: f64,
    sigma_max: f64,
    rng: &mut impl rand::Rng,
) -> f64 {
    let n_bins = masses.len();
    let b = sample_index(masses, rng);
    let log_ratio = (sigma_max / sigma_min).ln();
    let lo = (b as f64) / n_bins as f64 * log_ratio;
    let hi = (b as f64 + 1.0) / n_bins as f64 * log_ratio;
    sigma_min * (lo + rng.random::<f64>() * (hi - lo)).exp()
}

// ---------------------------------------------------------------------------
// Assets for the stability-trend experiment: sources on a cortical-style
// shell projected through a far-field sensor array, simulated on a fine grid
// and analyzed on a coarser, distinct grid.

use sesame::eval::EvalDataset;
use sesame::simulate::{self, ScenarioDefaults};

pub const TREND_NOISE_SIGMA: f64 = 3e-7;
pub const TREND_SENSOR_COUNT: usize = 50;
pub const TREND_SENSOR_RADIUS: f64 = 0.30;

/// Quasi-uniform points in the radial shell `[r_min, r_max]`.
pub fn shell_grid(n: usize, r_min: f64, r_max: f64, seed: u64) -> SourceGrid {
    use rand::Rng;
    let mut rng = sesame::rng::substream(seed, sesame::rng::stage::DATASET, 0, 0);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let x = r_max * (2.0 * rng.random::<f64>() - 1.0);
        let y = r_max * (2.0 * rng.random::<f64>() - 1.0);
        let z = r_max * (2.0 * rng.random::<f64>() - 1.0);
        let r = (x * x + y * y + z * z).sqrt();
        if r <= r_max && r >= r_min {
            points.push(Point3::new(x, y, z));
        }
    }
    SourceGrid::build(points, 0.02, 0.01).unwrap()
}

pub struct TrendAssets {
    pub sim_grid: SourceGrid,
    pub inf_grid: SourceGrid,
    pub sim_leadfield: Leadfield,
    pub inf_leadfield: Leadfield,
    pub datasets: Vec<EvalDataset>,
}

/// 30 datasets per true dipole count in {1, 2}: 400-point shell simulation
/// grid, 200-point ball inference grid, 50 far-field sensors shared between
/// the two forward models.
pub fn trend_assets(datasets_per_tnd: usize) -> TrendAssets {
    let sim_grid = shell_grid(400, 0.05, 0.08, 11);
    let inf_grid = shell_grid(200, 0.0, 0.08, 12);
    let sensors = sesame::cli::fibonacci_sensors(TREND_SENSOR_COUNT, TREND_SENSOR_RADIUS);
    let sim_leadfield = Leadfield::synth(&sim_grid, &sensors, 3).unwrap();
    let inf_leadfield = Leadfield::synth(&inf_grid, &sensors, 3).unwrap();

    let defaults = ScenarioDefaults::new(TREND_NOISE_SIGMA);
    let mut datasets = Vec::new();
    for tnd in [1usize, 2] {
        for rep in 0..datasets_per_tnd {
            let seed = (tnd * 100 + rep) as u64;
            let mut rng = sesame::rng::substream(seed, sesame::rng::stage::DATASET, 0, 0);
            let scenario = simulate::simulate_sources(&sim_grid, tnd, &mut rng, &defaults).unwrap();
            let scenario =
                simulate::enforce_snr(&scenario, &sim_grid, &sim_leadfield, &mut rng).unwrap();
            let data = simulate::synth_data(&scenario, &sim_leadfield, &mut rng).unwrap();
            datasets.push(EvalDataset {
                id: format!("tnd{tnd}_rep{rep:02}"),
                data: data.noisy,
                true_n_dipoles: tnd,
                true_coordinates: scenario
                    .true_locations
                    .iter()
                    .map(|&r| sim_grid.point(r))
                    .collect(),
            });
        }
    }
    TrendAssets {
        sim_grid,
        inf_grid,
        sim_leadfield,
        inf_leadfield,
        datasets,
    }
}
