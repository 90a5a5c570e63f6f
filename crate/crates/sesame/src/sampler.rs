//! Adaptive sequential Monte Carlo sampler over dipole configurations.
//!
//! The sampler bridges from the prior to the posterior through the tempered
//! family `pi_alpha ∝ likelihood^alpha * prior`, raising `alpha` adaptively
//! so that consecutive distributions stay close (ESS-ratio band), resampling
//! systematically when the population degenerates, and rejuvenating every
//! particle with a composition of Metropolis-Hastings kernels: a reversible
//! jump birth/death move on the dipole count, a local move per dipole
//! location, and (in hierarchical mode) a Gamma-proposal move on `sigma_q`.
//!
//! Determinism contract: all randomness flows through per-(iteration,
//! particle) substreams of the master seed and all reductions are performed
//! in a fixed order, so results are bit-identical for any worker count.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::forward::Leadfield;
use crate::model::{
    log_marginal_likelihood, log_prior, sample_prior, DipoleConfig, NoiseModel, PriorConfig,
};
use crate::rng::{self, stage};
use crate::source_space::SourceGrid;

/// One weighted hypothesis. The log marginal likelihood of the current
/// configuration is cached alongside so reweighting never re-evaluates it.
#[derive(Debug, Clone)]
pub struct Particle {
    pub config: DipoleConfig,
    pub log_weight: f64,
    pub log_lik: f64,
}

/// Sampler tuning knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_particles: usize,
    /// Accepted range for ESS(next)/ESS(current) when choosing the tempering
    /// increment.
    pub ess_ratio_band: (f64, f64),
    /// Resample when ESS falls below this fraction of the particle count.
    pub resample_threshold_fraction: f64,
    pub min_iterations: usize,
    pub max_iterations: usize,
    pub birth_prob: f64,
    pub death_prob: f64,
    /// Shape of the Gamma proposal for `sigma_q`; the scale is tied to the
    /// current value so the proposal mean equals it.
    pub gamma_shape: f64,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_particles: 100,
            ess_ratio_band: (0.9, 0.99),
            resample_threshold_fraction: 0.5,
            min_iterations: 10,
            max_iterations: 1000,
            birth_prob: 1.0 / 3.0,
            death_prob: 1.0 / 20.0,
            gamma_shape: 3.0,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ess_ratio_band;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ess_ratio_band must satisfy 0 < low < high < 1, got ({lo}, {hi})"
            )));
        }
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig("need at least 2 particles".into()));
        }
        if self.birth_prob <= 0.0
            || self.death_prob <= 0.0
            || self.birth_prob + self.death_prob >= 1.0
        {
            return Err(Error::InvalidConfig(format!(
                "birth_prob + death_prob must be positive and below 1, got {} + {}",
                self.birth_prob, self.death_prob
            )));
        }
        if self.resample_threshold_fraction <= 0.0 || self.resample_threshold_fraction >= 1.0 {
            return Err(Error::InvalidConfig(
                "resample_threshold_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.min_iterations == 0 || self.max_iterations < self.min_iterations {
            return Err(Error::InvalidConfig(format!(
                "iteration bounds must satisfy 1 <= min <= max, got [{}, {}]",
                self.min_iterations, self.max_iterations
            )));
        }
        if self.gamma_shape <= 0.0 || self.gamma_shape.is_nan() {
            return Err(Error::InvalidConfig("gamma_shape must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to evaluate the tempered target for one dataset.
pub struct Posterior<'a> {
    pub data: &'a DMatrix<f64>,
    pub leadfield: &'a Leadfield,
    pub grid: &'a SourceGrid,
    pub prior: &'a PriorConfig,
    pub noise: &'a NoiseModel,
}

impl Posterior<'_> {
    pub fn log_likelihood(&self, config: &DipoleConfig) -> Result<f64> {
        log_marginal_likelihood(self.data, config, self.leadfield, self.noise)
    }

    pub fn log_prior(&self, config: &DipoleConfig) -> f64 {
        log_prior(config, self.grid, self.prior)
    }
}

/// Particle population with tempering history.
#[derive(Debug, Clone)]
pub struct SmcState {
    pub particles: Vec<Particle>,
    pub alpha: f64,
    pub iteration: usize,
    pub alpha_history: Vec<f64>,
    pub ess_history: Vec<f64>,
    pub resample_flags: Vec<bool>,
    /// Per iteration: whether the tempering increment landed inside the ESS
    /// ratio band (false for the terminal step and min-iteration caps).
    pub in_band_flags: Vec<bool>,
    /// False when `max_iterations` was reached before `alpha` hit 1.
    pub complete: bool,
}

impl SmcState {
    /// Normalized linear weights, in particle order.
    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight.exp()).collect()
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.weights())
    }

    pub fn n_particles(&self) -> usize {
        self.particles.len()
    }
}

/// One row of the per-iteration progress log.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub alpha: f64,
    pub ess: f64,
    pub resampled: bool,
}

/// Deterministic pairwise summation; error grows with log(n) instead of n
/// and the result does not depend on any parallel partitioning.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Effective sample size of normalized weights: `1 / sum(w^2)`.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let squares: Vec<f64> = weights.iter().map(|w| w * w).collect();
    let denom = pairwise_sum(&squares);
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(1.0 / denom)
}

/// Draw the initial population from the prior with uniform weights and cache
/// each particle's log marginal likelihood.
pub fn init_particles(
    n_particles: usize,
    posterior: &Posterior<'_>,
    master_seed: u64,
) -> Result<SmcState> {
    if n_particles < 2 {
        return Err(Error::InvalidConfig("need at least 2 particles".into()));
    }
    let log_uniform = -(n_particles as f64).ln();
    let configs: Vec<DipoleConfig> = (0..n_particles)
        .map(|p| {
            let mut rng = rng::substream(master_seed, stage::INIT, p as u64, 0);
            sample_prior(posterior.grid, posterior.prior, &mut rng)
        })
        .collect();
    let particles: Vec<Particle> = configs
        .into_par_iter()
        .map(|config| {
            let log_lik = posterior.log_likelihood(&config)?;
            Ok(Particle {
                config,
                log_weight: log_uniform,
                log_lik,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SmcState {
        particles,
        alpha: 0.0,
        iteration: 0,
        alpha_history: vec![0.0],
        ess_history: Vec::new(),
        resample_flags: Vec::new(),
        in_band_flags: Vec::new(),
        complete: false,
    })
}

fn normalized_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let shifted: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total = pairwise_sum(&shifted);
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let log_total = max + total.ln();
    Ok(log_weights.iter().map(|lw| lw - log_total).collect())
}

/// Update the weights for the move `alpha -> alpha_next` using the cached
/// log likelihoods, then renormalize. The incremental factor of the tempered
/// family reduces to `exp(d_alpha * logL)`.
pub fn reweight(state: &mut SmcState, alpha_next: f64, log_liks: &[f64]) -> Result<()> {
    assert!(alpha_next >= state.alpha, "alpha must not decrease");
    let d_alpha = alpha_next - state.alpha;
    let raw: Vec<f64> = state
        .particles
        .iter()
        .zip(log_liks)
        .map(|(p, &l)| p.log_weight + d_alpha * l)
        .collect();
    let normalized = normalized_log_weights(&raw)?;
    for (p, lw) in state.particles.iter_mut().zip(normalized) {
        p.log_weight = lw;
    }
    Ok(())
}

fn ess_ratio_after(weights: &[f64], log_liks: &[f64], ess_before: f64, d_alpha: f64) -> f64 {
    let raw: Vec<f64> = weights
        .iter()
        .zip(log_liks)
        .map(|(w, &l)| w.ln() + d_alpha * l)
        .collect();
    match normalized_log_weights(&raw) {
        Ok(lw) => {
            let w: Vec<f64> = lw.iter().map(|l| l.exp()).collect();
            match ess(&w) {
                Ok(e) => e / ess_before,
                Err(_) => 0.0,
            }
        }
        Err(_) => 0.0,
    }
}

/// Choose the next tempering exponent by bisection on the increment so that
/// the ESS ratio lands in `band`; the full remaining step short-circuits to
/// `alpha = 1` when it already keeps the ratio above the lower edge.
pub fn adapt_alpha(weights: &[f64], log_liks: &[f64], alpha: f64, band: (f64, f64)) -> f64 {
    adapt_alpha_detail(weights, log_liks, alpha, band).0
}

/// As [`adapt_alpha`], additionally reporting whether the chosen increment
/// is guaranteed to sit inside the band (false for the terminal step and for
/// bisection fallback).
pub fn adapt_alpha_detail(
    weights: &[f64],
    log_liks: &[f64],
    alpha: f64,
    band: (f64, f64),
) -> (f64, bool) {
    assert!(alpha < 1.0, "adapt_alpha called with alpha >= 1");
    let ess_before = match ess(weights) {
        Ok(e) => e,
        Err(_) => return (1.0, false),
    };
    let full = 1.0 - alpha;
    if ess_ratio_after(weights, log_liks, ess_before, full) >= band.0 {
        return (1.0, false);
    }
    let (mut lo, mut hi) = (0.0f64, full);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let ratio = ess_ratio_after(weights, log_liks, ess_before, mid);
        if ratio > band.1 {
            lo = mid;
        } else if ratio < band.0 {
            hi = mid;
        } else {
            return (alpha + mid, true);
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    // Best bracket midpoint, clamped into (alpha, 1].
    let mid = 0.5 * (lo + hi);
    ((alpha + mid).min(1.0), false)
}

/// Systematic resampling: one uniform stratum variable, offspring counts
/// within 1 of `n * w`, uniform weights afterwards.
pub fn systematic_resample(state: &mut SmcState, rng: &mut impl Rng) {
    let n = state.particles.len();
    let weights = state.weights();
    let u: f64 = rng.random();
    let mut offspring = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut j = 0usize;
    for (p, w) in weights.iter().enumerate() {
        cumulative += w;
        while j < n && (j as f64 + u) / (n as f64) < cumulative {
            offspring.push(p);
            j += 1;
        }
    }
    // Rounding at the top end can leave a stratum unassigned.
    while offspring.len() < n {
        offspring.push(n - 1);
    }
    let log_uniform = -(n as f64).ln();
    state.particles = offspring
        .into_iter()
        .map(|p| {
            let mut particle = state.particles[p].clone();
            particle.log_weight = log_uniform;
            particle
        })
        .collect();
}

fn mh_accept(log_ratio: f64, rng: &mut impl Rng) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

/// Log prior mass of the unordered configuration: the ordered-draw density
/// times the number of orderings. Differencing this across dimensions keeps
/// the dipole-count marginal of the target exactly (truncated) Poisson;
/// the ordering count cancels in fixed-dimension moves.
fn log_set_prior(posterior: &Posterior<'_>, config: &DipoleConfig) -> f64 {
    posterior.log_prior(config) + ln_gamma(config.n_dipoles() as f64 + 1.0)
}

/// Pick the `k`-th grid index not currently occupied.
fn kth_unoccupied(grid: &SourceGrid, occupied: &[usize], k: usize) -> usize {
    let mut count = 0;
    for idx in 0..grid.n_points() {
        if occupied.contains(&idx) {
            continue;
        }
        if count == k {
            return idx;
        }
        count += 1;
    }
    unreachable!("k out of range for unoccupied points");
}

/// Reversible jump move: birth with probability `birth_prob` (new location
/// uniform over unoccupied grid points), death with probability `death_prob`
/// (uniform over existing dipoles), otherwise no dimension proposal. Birth at
/// the dipole cap and death of an empty configuration auto-reject.
pub fn rj_move(
    particle: &mut Particle,
    alpha: f64,
    posterior: &Posterior<'_>,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<bool> {
    let n_points = posterior.grid.n_points();
    let n_d = particle.config.n_dipoles();
    let u: f64 = rng.random();

    if u < cfg.birth_prob {
        if n_d >= posterior.prior.n_dipoles_max || n_d >= n_points {
            return Ok(false);
        }
        let free = n_points - n_d;
        let k = rng.random_range(0..free);
        let new_loc = kth_unoccupied(posterior.grid, &particle.config.locations, k);
        let mut proposed = particle.config.clone();
        proposed.locations.push(new_loc);
        let log_lik_new = posterior.log_likelihood(&proposed)?;
        let log_prior_diff =
            log_set_prior(posterior, &proposed) - log_set_prior(posterior, &particle.config);
        // proposal ratio: [P_death / (n_d + 1)] / [P_birth / (n_points - n_d)]
        let log_proposal = cfg.death_prob.ln() - ((n_d + 1) as f64).ln() - cfg.birth_prob.ln()
            + (free as f64).ln();
        let log_ratio = alpha * (log_lik_new - particle.log_lik) + log_prior_diff + log_proposal;
        if mh_accept(log_ratio, rng) {
            particle.config = proposed;
            particle.log_lik = log_lik_new;
            return Ok(true);
        }
        Ok(false)
    } else if u < cfg.birth_prob + cfg.death_prob {
        if n_d == 0 {
            return Ok(false);
        }
        let victim = rng.random_range(0..n_d);
        let mut proposed = particle.config.clone();
        proposed.locations.remove(victim);
        let log_lik_new = posterior.log_likelihood(&proposed)?;
        let log_prior_diff =
            log_set_prior(posterior, &proposed) - log_set_prior(posterior, &particle.config);
        // reciprocal of the birth ratio with counts adjusted
        let log_proposal =
            cfg.birth_prob.ln() - ((n_points - n_d + 1) as f64).ln() - cfg.death_prob.ln()
                + (n_d as f64).ln();
        let log_ratio = alpha * (log_lik_new - particle.log_lik) + log_prior_diff + log_proposal;
        if mh_accept(log_ratio, rng) {
            particle.config = proposed;
            particle.log_lik = log_lik_new;
            return Ok(true);
        }
        Ok(false)
    } else {
        Ok(false)
    }
}

/// Local location move: each dipole in turn proposes a neighbor with mass
/// decreasing in distance and is accepted under the full Hastings correction
/// (the kernel is not symmetric because neighbor normalizations differ).
/// Proposals onto occupied points auto-reject, preserving distinctness;
/// dipoles with no neighbors stay put.
pub fn location_move(
    particle: &mut Particle,
    alpha: f64,
    posterior: &Posterior<'_>,
    rng: &mut impl Rng,
) -> Result<bool> {
    let mut any_accepted = false;
    for d in 0..particle.config.n_dipoles() {
        let from = particle.config.locations[d];
        let forward = posterior.grid.location_proposal(from);
        if forward.is_empty() {
            continue;
        }
        let candidate = forward.sample(rng);
        if particle.config.locations.contains(&candidate) {
            continue; // occupied: target mass is zero there
        }
        let mut proposed = particle.config.clone();
        proposed.locations[d] = candidate;
        let log_lik_new = posterior.log_likelihood(&proposed)?;
        let log_prior_diff = posterior.log_prior(&proposed) - posterior.log_prior(&particle.config);
        let q_forward = forward.mass_of(candidate);
        let q_reverse = posterior.grid.location_proposal(candidate).mass_of(from);
        let log_ratio = alpha * (log_lik_new - particle.log_lik) + log_prior_diff + q_reverse.ln()
            - q_forward.ln();
        if mh_accept(log_ratio, rng) {
            particle.config = proposed;
            particle.log_lik = log_lik_new;
            any_accepted = true;
        }
    }
    Ok(any_accepted)
}

pub(crate) fn log_gamma_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    (shape - 1.0) * x.ln() - x / scale - shape * scale.ln() - ln_gamma(shape)
}

/// Metropolis-Hastings move on `sigma_q` with a Gamma proposal whose scale
/// is tied to the conditioning value (`theta = sigma / shape`, so the
/// proposal mean equals the current value). No-op in fixed mode; proposals
/// outside the hyperprior support reject.
pub fn sigma_move(
    particle: &mut Particle,
    alpha: f64,
    posterior: &Posterior<'_>,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<bool> {
    if !posterior.prior.is_hyper() {
        return Ok(false);
    }
    let sigma = particle.config.sigma_q;
    let shape = cfg.gamma_shape;
    let proposal = rand_distr::Gamma::new(shape, sigma / shape)
        .map_err(|e| Error::InvalidConfig(format!("gamma proposal: {e}")))?;
    let sigma_new = proposal.sample(rng);

    let mut proposed = particle.config.clone();
    proposed.sigma_q = sigma_new;
    let log_prior_new = posterior.log_prior(&proposed);
    if log_prior_new == f64::NEG_INFINITY {
        return Ok(false);
    }
    let log_lik_new = posterior.log_likelihood(&proposed)?;
    let log_prior_diff = log_prior_new - posterior.log_prior(&particle.config);
    let log_hastings = log_gamma_pdf(sigma, shape, sigma_new / shape)
        - log_gamma_pdf(sigma_new, shape, sigma / shape);
    let log_ratio = alpha * (log_lik_new - particle.log_lik) + log_prior_diff + log_hastings;
    if mh_accept(log_ratio, rng) {
        particle.config = proposed;
        particle.log_lik = log_lik_new;
        return Ok(true);
    }
    Ok(false)
}

/// Run the full sampler loop on one dataset.
pub fn run(
    data: &DMatrix<f64>,
    leadfield: &Leadfield,
    grid: &SourceGrid,
    prior: &PriorConfig,
    noise: &NoiseModel,
    cfg: &SamplerConfig,
) -> Result<SmcState> {
    run_with_progress(data, leadfield, grid, prior, noise, cfg, |_| {})
}

/// As [`run`], streaming one [`IterationRecord`] per iteration.
pub fn run_with_progress(
    data: &DMatrix<f64>,
    leadfield: &Leadfield,
    grid: &SourceGrid,
    prior: &PriorConfig,
    noise: &NoiseModel,
    cfg: &SamplerConfig,
    mut on_iteration: impl FnMut(IterationRecord),
) -> Result<SmcState> {
    cfg.validate()?;
    if data.ncols() == 0 {
        return Err(Error::EmptyData("no topographies in data window".into()));
    }
    if data.nrows() != leadfield.n_sensors() {
        return Err(Error::ShapeMismatch {
            what: "data".into(),
            expected: format!("{} sensor rows", leadfield.n_sensors()),
            found: format!("{} rows", data.nrows()),
        });
    }
    if leadfield.grid_id() != grid.id() {
        return Err(Error::Inconsistent(format!(
            "leadfield was built for grid {} but localization grid is {}",
            leadfield.grid_id(),
            grid.id()
        )));
    }

    let posterior = Posterior {
        data,
        leadfield,
        grid,
        prior,
        noise,
    };
    let seed = cfg.rng_seed;
    let mut state = init_particles(cfg.n_particles, &posterior, seed)?;

    loop {
        state.iteration += 1;
        let iteration = state.iteration;

        let log_liks: Vec<f64> = state.particles.iter().map(|p| p.log_lik).collect();
        let weights = state.weights();
        let (mut alpha_next, mut in_band) =
            adapt_alpha_detail(&weights, &log_liks, state.alpha, cfg.ess_ratio_band);

        // Lower iteration bound: spread the remaining exponent mass so alpha
        // cannot reach 1 before min_iterations steps have run.
        let remaining = cfg.min_iterations.saturating_sub(iteration);
        if remaining > 0 {
            let cap = state.alpha + (1.0 - state.alpha) / (remaining + 1) as f64;
            if alpha_next > cap {
                alpha_next = cap;
                in_band = false;
            }
        }

        reweight(&mut state, alpha_next, &log_liks)?;
        let current_ess = state.ess()?;
        let resampled = current_ess < cfg.resample_threshold_fraction * cfg.n_particles as f64;
        if resampled {
            let mut rng = rng::substream(seed, stage::RESAMPLE, iteration as u64, 0);
            systematic_resample(&mut state, &mut rng);
        }

        state.particles.par_iter_mut().enumerate().try_for_each(
            |(p_idx, particle)| -> Result<()> {
                let mut rng = rng::substream(seed, stage::MOVE, iteration as u64, p_idx as u64);
                rj_move(particle, alpha_next, &posterior, cfg, &mut rng)?;
                location_move(particle, alpha_next, &posterior, &mut rng)?;
                sigma_move(particle, alpha_next, &posterior, cfg, &mut rng)?;
                Ok(())
            },
        )?;

        state.alpha = alpha_next;
        state.alpha_history.push(alpha_next);
        state.ess_history.push(current_ess);
        state.resample_flags.push(resampled);
        state.in_band_flags.push(in_band && alpha_next < 1.0);
        on_iteration(IterationRecord {
            iteration,
            alpha: alpha_next,
            ess: current_ess,
            resampled,
        });

        if state.alpha >= 1.0 {
            state.complete = true;
            break;
        }
        if state.iteration >= cfg.max_iterations {
            state.complete = false;
            break;
        }
    }
    Ok(state)
}
