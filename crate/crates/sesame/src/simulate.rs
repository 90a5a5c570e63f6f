//! Synthetic dataset generation: random source configurations with a shared
//! bell-shaped time course, white sensor noise, SNR gating, and the
//! 20%-of-maximum noise estimation rule.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{read_matrix_csv, write_matrix_csv, Leadfield};
use crate::source_space::SourceGrid;

pub const DEFAULT_AMPLITUDE_PEAK: f64 = 2e-7;
pub const DEFAULT_N_SAMPLES: usize = 40;
pub const DEFAULT_MIN_SEPARATION: f64 = 0.03;
pub const DEFAULT_SNR_FLOOR_DB: f64 = 3.0;

const MAX_LOCATION_REJECTIONS: usize = 10_000;
const MAX_SNR_ROUNDS: usize = 1_000;

/// Scenario defaults shared by a batch of simulations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenarioDefaults {
    pub amplitude_peak: f64,
    pub n_samples: usize,
    pub min_separation: f64,
    pub snr_floor_db: f64,
    pub noise_sigma: f64,
}

impl ScenarioDefaults {
    pub fn new(noise_sigma: f64) -> Self {
        ScenarioDefaults {
            amplitude_peak: DEFAULT_AMPLITUDE_PEAK,
            n_samples: DEFAULT_N_SAMPLES,
            min_separation: DEFAULT_MIN_SEPARATION,
            snr_floor_db: DEFAULT_SNR_FLOOR_DB,
            noise_sigma,
        }
    }
}

/// One ground-truth source configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub true_locations: Vec<usize>,
    pub true_orientations: Vec<[f64; 3]>,
    pub amplitude_peak: f64,
    pub n_samples: usize,
    pub min_separation: f64,
    pub snr_floor_db: f64,
    pub noise_sigma: f64,
}

impl SimScenario {
    pub fn n_dipoles(&self) -> usize {
        self.true_locations.len()
    }

    pub fn orientation(&self, d: usize) -> Vector3<f64> {
        let o = self.true_orientations[d];
        Vector3::new(o[0], o[1], o[2])
    }

    /// Check the pairwise separation constraint on a grid.
    pub fn separation_ok(&self, grid: &SourceGrid) -> bool {
        for (i, &a) in self.true_locations.iter().enumerate() {
            for &b in &self.true_locations[i + 1..] {
                if grid.distance(a, b) < self.min_separation {
                    return false;
                }
            }
        }
        true
    }
}

/// Shared bell-shaped time course: a Gaussian bump peaking at `t = T/2` with
/// width `T/8`, evaluated at `t = 1..=T`.
pub fn bell_time_course(n_samples: usize, amplitude_peak: f64) -> Vec<f64> {
    let center = n_samples as f64 / 2.0;
    let width = n_samples as f64 / 8.0;
    (1..=n_samples)
        .map(|t| {
            let z = (t as f64 - center) / width;
            amplitude_peak * (-0.5 * z * z).exp()
        })
        .collect()
}

fn draw_orientation(rng: &mut impl Rng) -> [f64; 3] {
    UnitSphere.sample(rng)
}

fn draw_location_separated(
    grid: &SourceGrid,
    chosen: &[usize],
    min_separation: f64,
    rng: &mut impl Rng,
    rejections: &mut usize,
) -> Result<usize> {
    loop {
        let candidate = rng.random_range(0..grid.n_points());
        let ok = !chosen.contains(&candidate)
            && chosen
                .iter()
                .all(|&c| grid.distance(c, candidate) >= min_separation);
        if ok {
            return Ok(candidate);
        }
        *rejections += 1;
        if *rejections >= MAX_LOCATION_REJECTIONS {
            return Err(Error::Infeasible(format!(
                "grid cannot host {} dipoles at separation {} m",
                chosen.len() + 1,
                min_separation
            )));
        }
    }
}

/// Draw a random source configuration: locations uniform with a minimum
/// pairwise separation (rejection sampling) and orientations uniform on the
/// sphere.
pub fn simulate_sources(
    grid: &SourceGrid,
    n_dipoles: usize,
    rng: &mut impl Rng,
    defaults: &ScenarioDefaults,
) -> Result<SimScenario> {
    let mut locations: Vec<usize> = Vec::with_capacity(n_dipoles);
    let mut rejections = 0usize;
    for _ in 0..n_dipoles {
        let loc = draw_location_separated(
            grid,
            &locations,
            defaults.min_separation,
            rng,
            &mut rejections,
        )?;
        locations.push(loc);
    }
    let orientations = (0..n_dipoles).map(|_| draw_orientation(rng)).collect();
    let scenario = SimScenario {
        true_locations: locations,
        true_orientations: orientations,
        amplitude_peak: defaults.amplitude_peak,
        n_samples: defaults.n_samples,
        min_separation: defaults.min_separation,
        snr_floor_db: defaults.snr_floor_db,
        noise_sigma: defaults.noise_sigma,
    };
    assert!(scenario.separation_ok(grid), "separation violated");
    Ok(scenario)
}

/// Generated sensor data plus the per-dipole SNR actually realized.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub clean: DMatrix<f64>,
    pub noisy: DMatrix<f64>,
    pub snr_db: Vec<f64>,
}

/// Mean signal power of one dipole's field over sensors and samples.
fn dipole_mean_power(scenario: &SimScenario, leadfield: &Leadfield, bell: &[f64], d: usize) -> f64 {
    let location = scenario.true_locations[d];
    let orientation = scenario.orientation(d);
    let mut acc = 0.0;
    for &b in bell {
        let field = leadfield.field_of(&[location], &[orientation * b]);
        acc += field.norm_squared();
    }
    acc / (leadfield.n_sensors() * bell.len()) as f64
}

/// Per-dipole SNR in dB against the scenario's noise level.
pub fn dipole_snr_db(scenario: &SimScenario, leadfield: &Leadfield) -> Vec<f64> {
    let bell = bell_time_course(scenario.n_samples, scenario.amplitude_peak);
    (0..scenario.n_dipoles())
        .map(|d| {
            let power = dipole_mean_power(scenario, leadfield, &bell, d);
            if scenario.noise_sigma == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (power / (scenario.noise_sigma * scenario.noise_sigma)).log10()
            }
        })
        .collect()
}

/// Project the scenario through the leadfield and add white Gaussian noise.
pub fn synth_data(
    scenario: &SimScenario,
    leadfield: &Leadfield,
    rng: &mut impl Rng,
) -> Result<SyntheticData> {
    let bell = bell_time_course(scenario.n_samples, scenario.amplitude_peak);
    let n_s = leadfield.n_sensors();
    let mut clean = DMatrix::zeros(n_s, scenario.n_samples);
    for (t, &b) in bell.iter().enumerate() {
        let moments: Vec<Vector3<f64>> = (0..scenario.n_dipoles())
            .map(|d| scenario.orientation(d) * b)
            .collect();
        let field = leadfield.field_of(&scenario.true_locations, &moments);
        clean.set_column(t, &field);
    }
    let mut noisy = clean.clone();
    if scenario.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, scenario.noise_sigma)
            .map_err(|e| Error::InvalidConfig(format!("noise sigma: {e}")))?;
        for t in 0..scenario.n_samples {
            for s in 0..n_s {
                noisy[(s, t)] += normal.sample(rng);
            }
        }
    }
    let snr_db = dipole_snr_db(scenario, leadfield);
    Ok(SyntheticData {
        clean,
        noisy,
        snr_db,
    })
}

/// Replace dipoles whose SNR falls below the floor with freshly simulated
/// ones (preserving the separation constraint) until every dipole passes.
/// `grid` must be the grid the leadfield was built for.
pub fn enforce_snr(
    scenario: &SimScenario,
    grid: &SourceGrid,
    leadfield: &Leadfield,
    rng: &mut impl Rng,
) -> Result<SimScenario> {
    if grid.id() != leadfield.grid_id() {
        return Err(Error::Inconsistent(
            "enforce_snr: leadfield belongs to a different grid".into(),
        ));
    }
    let mut current = scenario.clone();
    for _ in 0..MAX_SNR_ROUNDS {
        let snrs = dipole_snr_db(&current, leadfield);
        let failing: Vec<usize> = snrs
            .iter()
            .enumerate()
            .filter_map(|(d, &snr)| (snr < current.snr_floor_db).then_some(d))
            .collect();
        if failing.is_empty() {
            assert!(current.separation_ok(grid), "separation violated");
            return Ok(current);
        }
        for d in failing {
            let others: Vec<usize> = current
                .true_locations
                .iter()
                .enumerate()
                .filter_map(|(i, &loc)| (i != d).then_some(loc))
                .collect();
            let mut rejections = 0usize;
            let new_loc = draw_location_separated(
                grid,
                &others,
                current.min_separation,
                rng,
                &mut rejections,
            )?;
            current.true_locations[d] = new_loc;
            current.true_orientations[d] = draw_orientation(rng);
        }
    }
    Err(Error::Infeasible(format!(
        "could not reach {} dB SNR for all dipoles within {MAX_SNR_ROUNDS} rounds",
        scenario.snr_floor_db
    )))
}

/// Noise level estimate used throughout the analyses: 20% of the maximum
/// absolute signal value.
pub fn estimate_noise_sigma(data: &DMatrix<f64>) -> Result<f64> {
    let max = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Err(Error::EmptyData(
            "cannot estimate noise from all-zero data".into(),
        ));
    }
    Ok(0.2 * max)
}

/// Ground-truth record written next to each simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetTruth {
    pub scenario: SimScenario,
    pub true_coordinates: Vec<[f64; 3]>,
    pub snr_db: Vec<f64>,
    pub seed: u64,
    pub grid_file: String,
    pub leadfield_file: String,
}

/// Write one dataset bundle: `data.csv` plus `truth.json`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    noisy: &DMatrix<f64>,
    truth: &DatasetTruth,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix_csv(dir.join("data.csv"), noisy)?;
    let truth_path = dir.join("truth.json");
    let text = serde_json::to_string_pretty(truth).map_err(|e| Error::json(&truth_path, e))?;
    fs::write(&truth_path, text).map_err(|e| Error::io(&truth_path, e))?;
    Ok(())
}

/// Read a dataset bundle written by [`write_dataset`].
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DMatrix<f64>, DatasetTruth)> {
    let dir = dir.as_ref();
    let data = read_matrix_csv(dir.join("data.csv"))?;
    let truth_path = dir.join("truth.json");
    let text = fs::read_to_string(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
    let truth = serde_json::from_str(&text).map_err(|e| Error::json(&truth_path, e))?;
    Ok((data, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, stage};
    use approx::assert_relative_eq;
    use nalgebra::Point3;

    fn ball_grid(n: usize, radius: f64, seed: u64) -> SourceGrid {
        let mut rng = rng::substream(seed, stage::SIM_SOURCES, 99, 0);
        let mut points = Vec::with_capacity(n);
        while points.len() < n {
            let p = Point3::new(
                radius * (2.0 * rng.random::<f64>() - 1.0),
                radius * (2.0 * rng.random::<f64>() - 1.0),
                radius * (2.0 * rng.random::<f64>() - 1.0),
            );
            if p.coords.norm() <= radius {
                points.push(p);
            }
        }
        SourceGrid::build(points, 0.02, 0.01).unwrap()
    }

    fn sphere_sensors(n: usize, radius: f64) -> Vec<Point3<f64>> {
        // Fibonacci sphere
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let a = golden * i as f64;
                Point3::new(radius * r * a.cos(), radius * y, radius * r * a.sin())
            })
            .collect()
    }

    #[test]
    fn bell_peaks_at_center_with_configured_amplitude() {
        let bell = bell_time_course(40, 2e-7);
        let (argmax, &max) = bell
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(argmax + 1, 20); // t = T/2 is the nearest sample
        assert_relative_eq!(max, 2e-7, max_relative = 1e-12);
    }

    #[test]
    fn single_dipole_has_no_separation_constraint() {
        let grid = ball_grid(30, 0.08, 1);
        let defaults = ScenarioDefaults::new(0.0);
        let mut seen = std::collections::HashSet::new();
        for s in 0..200 {
            let mut rng = rng::substream(s, stage::SIM_SOURCES, 0, 0);
            let sc = simulate_sources(&grid, 1, &mut rng, &defaults).unwrap();
            seen.insert(sc.true_locations[0]);
        }
        assert!(seen.len() > 20, "locations should cover the grid");
    }

    #[test]
    fn orientations_are_roughly_uniform_on_sphere() {
        let grid = ball_grid(30, 0.08, 2);
        let defaults = ScenarioDefaults::new(0.0);
        let mut rng = rng::substream(5, stage::SIM_SOURCES, 0, 0);
        let mut mean = Vector3::zeros();
        let n = 1000;
        for _ in 0..n {
            let sc = simulate_sources(&grid, 1, &mut rng, &defaults).unwrap();
            mean += sc.orientation(0);
            assert_relative_eq!(sc.orientation(0).norm(), 1.0, max_relative = 1e-12);
        }
        mean /= n as f64;
        assert!(mean.norm() < 0.1, "mean orientation norm {}", mean.norm());
    }

    #[test]
    fn separation_constraint_is_respected() {
        let grid = ball_grid(120, 0.08, 3);
        let defaults = ScenarioDefaults {
            min_separation: 0.03,
            ..ScenarioDefaults::new(0.0)
        };
        for s in 0..50 {
            let mut rng = rng::substream(s, stage::SIM_SOURCES, 1, 0);
            let sc = simulate_sources(&grid, 3, &mut rng, &defaults).unwrap();
            assert!(sc.separation_ok(&grid));
        }
    }

    #[test]
    fn infeasible_separation_errors_out() {
        let grid = ball_grid(10, 0.01, 4); // 1 cm ball cannot host 3 cm gaps
        let defaults = ScenarioDefaults {
            min_separation: 0.03,
            ..ScenarioDefaults::new(0.0)
        };
        let mut rng = rng::substream(6, stage::SIM_SOURCES, 0, 0);
        assert!(simulate_sources(&grid, 2, &mut rng, &defaults).is_err());
    }

    #[test]
    fn zero_noise_means_noisy_equals_clean() {
        let grid = ball_grid(40, 0.08, 7);
        let lf = Leadfield::synth(&grid, &sphere_sensors(8, 0.12), 7).unwrap();
        let defaults = ScenarioDefaults::new(0.0);
        let mut rng = rng::substream(8, stage::SIM_SOURCES, 0, 0);
        let sc = simulate_sources(&grid, 2, &mut rng, &defaults).unwrap();
        let data = synth_data(&sc, &lf, &mut rng).unwrap();
        assert_eq!(data.clean, data.noisy);
        assert!(data.snr_db.iter().all(|&s| s == f64::INFINITY));
    }

    #[test]
    fn empty_scenario_gives_pure_noise_with_expected_std() {
        let grid = ball_grid(40, 0.08, 9);
        let lf = Leadfield::synth(&grid, &sphere_sensors(10, 0.12), 9).unwrap();
        let sigma = 3e-6;
        let defaults = ScenarioDefaults::new(sigma);
        let mut rng = rng::substream(10, stage::SIM_NOISE, 0, 0);
        let sc = simulate_sources(&grid, 0, &mut rng, &defaults).unwrap();
        let data = synth_data(&sc, &lf, &mut rng).unwrap();
        assert!(data.clean.iter().all(|&v| v == 0.0));
        let n = (data.noisy.nrows() * data.noisy.ncols()) as f64;
        let sample_var = data.noisy.iter().map(|v| v * v).sum::<f64>() / n;
        let sample_std = sample_var.sqrt();
        // std of the sample std is about sigma / sqrt(2 n)
        let se = sigma / (2.0 * n).sqrt();
        assert!(
            (sample_std - sigma).abs() <= 3.0 * se,
            "sample std {sample_std} vs {sigma} (se {se})"
        );
    }

    #[test]
    fn doubling_amplitude_adds_six_db() {
        let grid = ball_grid(40, 0.08, 11);
        let lf = Leadfield::synth(&grid, &sphere_sensors(8, 0.12), 11).unwrap();
        let defaults = ScenarioDefaults::new(1e-6);
        let mut rng = rng::substream(12, stage::SIM_SOURCES, 0, 0);
        let sc = simulate_sources(&grid, 1, &mut rng, &defaults).unwrap();
        let mut loud = sc.clone();
        loud.amplitude_peak *= 2.0;
        let snr_base = dipole_snr_db(&sc, &lf)[0];
        let snr_loud = dipole_snr_db(&loud, &lf)[0];
        assert_relative_eq!(
            snr_loud - snr_base,
            20.0 * 2.0f64.log10(),
            max_relative = 1e-9
        );
    }

    #[test]
    fn enforce_snr_keeps_passing_scenarios_unchanged() {
        let grid = ball_grid(40, 0.08, 13);
        let lf = Leadfield::synth(&grid, &sphere_sensors(8, 0.12), 13).unwrap();
        let defaults = ScenarioDefaults::new(0.0); // infinite SNR
        let mut rng = rng::substream(14, stage::SIM_SNR, 0, 0);
        let sc = simulate_sources(&grid, 2, &mut rng, &defaults).unwrap();
        let out = enforce_snr(&sc, &grid, &lf, &mut rng).unwrap();
        assert_eq!(out.true_locations, sc.true_locations);
        assert_eq!(out.true_orientations, sc.true_orientations);
    }

    #[test]
    fn enforce_snr_repairs_low_snr_dipoles() {
        let grid = ball_grid(150, 0.08, 15);
        let lf = Leadfield::synth(&grid, &sphere_sensors(12, 0.12), 15).unwrap();
        // Noise high enough that some dipoles fail 3 dB, low enough that
        // favorable placements pass.
        let mut defaults = ScenarioDefaults::new(0.0);
        let mut rng = rng::substream(16, stage::SIM_SNR, 0, 0);
        let sc = simulate_sources(&grid, 2, &mut rng, &defaults).unwrap();
        let typical = dipole_snr_db(
            &SimScenario {
                noise_sigma: 1.0,
                ..sc.clone()
            },
            &lf,
        );
        // place the floor between the strongest and weakest achievable SNR
        let strong = typical.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        defaults.noise_sigma = 10f64.powf(strong / 20.0) * 0.8;
        let mut needy = SimScenario {
            noise_sigma: defaults.noise_sigma,
            ..sc
        };
        needy.snr_floor_db = 3.0;
        let fixed = enforce_snr(&needy, &grid, &lf, &mut rng).unwrap();
        let snrs = dipole_snr_db(&fixed, &lf);
        assert!(snrs.iter().all(|&s| s >= 3.0), "post-repair SNRs {snrs:?}");
        assert!(fixed.separation_ok(&grid));
    }

    #[test]
    fn noise_estimate_is_fifth_of_max() {
        let data = DMatrix::from_row_slice(2, 2, &[1.0, -10.0, 3.0, 2.0]);
        assert_relative_eq!(
            estimate_noise_sigma(&data).unwrap(),
            2.0,
            max_relative = 1e-14
        );
        let scaled = &data * -3.0;
        assert_relative_eq!(
            estimate_noise_sigma(&scaled).unwrap(),
            6.0,
            max_relative = 1e-14
        );
        assert!(estimate_noise_sigma(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn noise_estimate_tracks_truth_near_snr_floor() {
        let grid = ball_grid(80, 0.08, 17);
        let lf = Leadfield::synth(&grid, &sphere_sensors(10, 0.12), 17).unwrap();
        let mut rng = rng::substream(18, stage::SIM_SOURCES, 0, 0);
        let probe = simulate_sources(&grid, 1, &mut rng, &ScenarioDefaults::new(1.0)).unwrap();
        let snr_at_unit_noise = dipole_snr_db(&probe, &lf)[0];
        // choose noise so that the SNR is near 3 dB
        let noise_sigma = 10f64.powf((snr_at_unit_noise - 3.0) / 20.0);
        let sc = SimScenario {
            noise_sigma,
            ..probe
        };
        let data = synth_data(&sc, &lf, &mut rng).unwrap();
        let est = estimate_noise_sigma(&data.noisy).unwrap();
        let ratio = est / noise_sigma;
        assert!(
            (1.0 / 3.0..=3.0).contains(&ratio),
            "estimate {est} vs truth {noise_sigma} (ratio {ratio})"
        );
    }

    #[test]
    fn seeded_simulation_is_bit_identical() {
        let grid = ball_grid(40, 0.08, 19);
        let lf = Leadfield::synth(&grid, &sphere_sensors(8, 0.12), 19).unwrap();
        let defaults = ScenarioDefaults::new(2e-6);
        let make = || {
            let mut rng = rng::substream(20, stage::SIM_SOURCES, 3, 0);
            let sc = simulate_sources(&grid, 2, &mut rng, &defaults).unwrap();
            synth_data(&sc, &lf, &mut rng).unwrap()
        };
        let a = make();
        let b = make();
        assert_eq!(a.noisy, b.noisy);
    }

    #[test]
    fn dataset_bundle_round_trips() {
        let grid = ball_grid(40, 0.08, 21);
        let lf = Leadfield::synth(&grid, &sphere_sensors(8, 0.12), 21).unwrap();
        let defaults = ScenarioDefaults::new(2e-6);
        let mut rng = rng::substream(22, stage::SIM_SOURCES, 0, 0);
        let sc = simulate_sources(&grid, 1, &mut rng, &defaults).unwrap();
        let data = synth_data(&sc, &lf, &mut rng).unwrap();
        let truth = DatasetTruth {
            true_coordinates: sc
                .true_locations
                .iter()
                .map(|&r| {
                    let p = grid.point(r);
                    [p.x, p.y, p.z]
                })
                .collect(),
            snr_db: data.snr_db.clone(),
            scenario: sc,
            seed: 22,
            grid_file: "grid.csv".into(),
            leadfield_file: "leadfield.csv".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let ds_dir = dir.path().join("dataset_000");
        write_dataset(&ds_dir, &data.noisy, &truth).unwrap();
        let (back_data, back_truth) = read_dataset(&ds_dir).unwrap();
        assert_eq!(back_data, data.noisy);
        assert_eq!(
            back_truth.scenario.true_locations,
            truth.scenario.true_locations
        );
        assert_eq!(back_truth.seed, 22);
    }
}
