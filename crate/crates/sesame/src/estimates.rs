//! Point estimates and posterior summaries from a final particle population.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Leadfield;
use crate::model::{moment_posterior, DipoleConfig, NoiseModel, PriorConfig, SigmaMode};
use crate::sampler::SmcState;
use crate::source_space::SourceGrid;

/// Default exclusion radius around an extracted peak (meters).
pub const DEFAULT_PEAK_EXCLUSION_RADIUS: f64 = 0.02;

/// Cap on the `sigma_q` sample stored in summaries.
pub const SIGMA_SAMPLE_CAP: usize = 10_000;

/// Posterior summary of one localization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// Marginal posterior of the dipole count over `0..=n_dipoles_max`.
    pub n_dipoles_posterior: Vec<f64>,
    pub est_n_dipoles: usize,
    /// Unnormalized probability map over grid points.
    pub probability_map: Vec<f64>,
    pub est_locations: Vec<usize>,
    pub est_coordinates: Vec<[f64; 3]>,
    /// Set when fewer peaks than `est_n_dipoles` could be extracted.
    pub peaks_incomplete: bool,
    /// Weighted `(sigma_q, weight)` sample, capped at [`SIGMA_SAMPLE_CAP`].
    pub sigma_q_sample: Vec<(f64, f64)>,
    pub est_sigma_q: f64,
    /// How `est_sigma_q` was obtained; the same value conditions the moment
    /// time courses.
    pub sigma_q_estimator: String,
    pub iterations: usize,
    pub final_alpha: f64,
    pub complete: bool,
}

/// Marginal posterior over the dipole count and its argmax (ties break
/// toward fewer dipoles).
pub fn estimate_n_dipoles(state: &SmcState, n_dipoles_max: usize) -> (Vec<f64>, usize) {
    let mut posterior = vec![0.0; n_dipoles_max + 1];
    for p in &state.particles {
        let w = p.log_weight.exp();
        let n = p.config.n_dipoles().min(n_dipoles_max);
        posterior[n] += w;
    }
    let mut best = 0usize;
    for (k, &mass) in posterior.iter().enumerate() {
        if mass > posterior[best] {
            best = k;
        }
    }
    (posterior, best)
}

/// Probability map over grid points restricted to particles whose dipole
/// count equals `est_n_dipoles`: each such particle deposits its weight on
/// every occupied grid point. Not renormalized, so the map total equals
/// `est_n_dipoles * posterior_mass(est_n_dipoles)`.
pub fn probability_map(
    state: &SmcState,
    est_n_dipoles: usize,
    n_points: usize,
) -> Result<Vec<f64>> {
    let mut map = vec![0.0; n_points];
    let mut mass = 0.0;
    for p in &state.particles {
        if p.config.n_dipoles() != est_n_dipoles {
            continue;
        }
        let w = p.log_weight.exp();
        mass += w;
        for &r in &p.config.locations {
            map[r] += w;
        }
    }
    if mass <= 0.0 && est_n_dipoles > 0 {
        return Err(Error::Inconsistent(format!(
            "no posterior mass at n_dipoles = {est_n_dipoles}"
        )));
    }
    Ok(map)
}

/// Greedy peak extraction: repeatedly take the highest-mass grid point (ties
/// break toward the lowest index), then clear everything within
/// `exclusion_radius` of it. Stops after `est_n_dipoles` peaks or when the
/// remaining mass is zero; the flag reports an early stop.
pub fn extract_peaks(
    map: &[f64],
    est_n_dipoles: usize,
    grid: &SourceGrid,
    exclusion_radius: f64,
) -> (Vec<usize>, bool) {
    let mut work = map.to_vec();
    let mut peaks = Vec::with_capacity(est_n_dipoles);
    while peaks.len() < est_n_dipoles {
        let mut best: Option<usize> = None;
        for (i, &m) in work.iter().enumerate() {
            if m > 0.0 && best.is_none_or(|b| m > work[b]) {
                best = Some(i);
            }
        }
        let Some(peak) = best else { break };
        peaks.push(peak);
        for (i, w) in work.iter_mut().enumerate() {
            if grid.distance(peak, i) <= exclusion_radius {
                *w = 0.0;
            }
        }
    }
    let incomplete = peaks.len() < est_n_dipoles;
    (peaks, incomplete)
}

/// Posterior-mean moment time courses for a point estimate: one 3-vector per
/// estimated dipole per topography.
pub fn moment_timecourses(
    locations: &[usize],
    sigma_q: f64,
    data: &DMatrix<f64>,
    leadfield: &Leadfield,
    noise: &NoiseModel,
) -> Result<Vec<Vec<Vector3<f64>>>> {
    if locations.is_empty() {
        return Ok(Vec::new());
    }
    let post = moment_posterior(
        data,
        &DipoleConfig::new(locations.to_vec(), sigma_q),
        leadfield,
        noise,
    )?;
    let mut courses = Vec::with_capacity(locations.len());
    for d in 0..locations.len() {
        let course = (0..data.ncols()).map(|t| post.dipole_mean(d, t)).collect();
        courses.push(course);
    }
    Ok(courses)
}

/// Weighted `sigma_q` sample and its weighted median (lower of the two
/// central values). In fixed mode every particle carries the configured
/// constant, so the estimate is that constant.
pub fn estimate_sigma_q(state: &SmcState) -> (Vec<(f64, f64)>, f64) {
    let mut sample: Vec<(f64, f64)> = state
        .particles
        .iter()
        .map(|p| (p.config.sigma_q, p.log_weight.exp()))
        .collect();
    let estimate = weighted_median(&sample);
    if sample.len() > SIGMA_SAMPLE_CAP {
        sample.truncate(SIGMA_SAMPLE_CAP);
    }
    (sample, estimate)
}

/// Weighted median: smallest value whose cumulative normalized weight
/// reaches one half.
pub fn weighted_median(sample: &[(f64, f64)]) -> f64 {
    assert!(!sample.is_empty(), "weighted median of empty sample");
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = sorted.iter().map(|(_, w)| w).sum();
    let mut acc = 0.0;
    for &(value, w) in &sorted {
        acc += w;
        if acc >= 0.5 * total {
            return value;
        }
    }
    sorted.last().unwrap().0
}

/// Assemble the full posterior summary for a completed run.
pub fn summarize(
    state: &SmcState,
    grid: &SourceGrid,
    prior: &PriorConfig,
    peak_exclusion_radius: f64,
) -> Result<PosteriorSummary> {
    let (n_posterior, est_n) = estimate_n_dipoles(state, prior.n_dipoles_max);
    let map = probability_map(state, est_n, grid.n_points())?;
    let (est_locations, peaks_incomplete) = extract_peaks(&map, est_n, grid, peak_exclusion_radius);
    let (sigma_sample, est_sigma_q) = estimate_sigma_q(state);
    let sigma_q_estimator = match prior.sigma_mode {
        SigmaMode::Fixed { .. } => "fixed".to_string(),
        SigmaMode::Hyper { .. } => "weighted-median".to_string(),
    };
    let est_coordinates = est_locations
        .iter()
        .map(|&r| {
            let p = grid.point(r);
            [p.x, p.y, p.z]
        })
        .collect();
    Ok(PosteriorSummary {
        n_dipoles_posterior: n_posterior,
        est_n_dipoles: est_n,
        probability_map: map,
        est_locations,
        est_coordinates,
        peaks_incomplete,
        sigma_q_sample: sigma_sample,
        est_sigma_q,
        sigma_q_estimator,
        iterations: state.iteration,
        final_alpha: state.alpha,
        complete: state.complete,
    })
}
