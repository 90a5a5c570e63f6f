//! Statistical model: priors, hyperprior, marginal likelihood, and the
//! analytic conditional Gaussian posterior for dipole moments.
//!
//! Dipole moments are conditionally Gaussian given the dipole count,
//! locations, and prior width `sigma_q`, so they are marginalized in closed
//! form. Monte Carlo sampling then only has to cover the discrete
//! configuration plus, in hierarchical mode, the scalar `sigma_q`.
//!
//! All computations run in the log domain; the marginal covariance
//! `Gamma_l = sigma_q^2 G G^t + Gamma_N` is handled through its Cholesky
//! factorization, never by explicit inversion.

use nalgebra::{Cholesky, DMatrix, Dyn, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::forward::Leadfield;
use crate::source_space::SourceGrid;

pub const DEFAULT_POISSON_MEAN: f64 = 0.25;
pub const DEFAULT_N_DIPOLES_MAX: usize = 10;

const LOG_2PI: f64 = 1.8378770664093453;

/// Prior width handling for the dipole moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// Constant prior width (plain SESAME).
    Fixed { sigma_q: f64 },
    /// Log-uniform hyperprior on the prior width (h-SESAME). The degenerate
    /// case `sigma_min == sigma_max` is treated as a point mass.
    Hyper { sigma_min: f64, sigma_max: f64 },
}

/// Prior over dipole count, locations, and prior width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub poisson_mean: f64,
    pub n_dipoles_max: usize,
    pub sigma_mode: SigmaMode,
}

impl PriorConfig {
    pub fn new(poisson_mean: f64, n_dipoles_max: usize, sigma_mode: SigmaMode) -> Result<Self> {
        if poisson_mean <= 0.0 || !poisson_mean.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "poisson_mean must be positive and finite, got {poisson_mean}"
            )));
        }
        if n_dipoles_max < 1 {
            return Err(Error::InvalidConfig(
                "n_dipoles_max must be at least 1".into(),
            ));
        }
        match sigma_mode {
            SigmaMode::Fixed { sigma_q } => {
                if sigma_q <= 0.0 || !sigma_q.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "fixed sigma_q must be positive and finite, got {sigma_q}"
                    )));
                }
            }
            SigmaMode::Hyper {
                sigma_min,
                sigma_max,
            } => {
                if sigma_min <= 0.0
                    || !sigma_min.is_finite()
                    || sigma_max < sigma_min
                    || !sigma_max.is_finite()
                {
                    return Err(Error::InvalidConfig(format!(
                        "hyperprior bounds must satisfy 0 < sigma_min <= sigma_max, got [{sigma_min}, {sigma_max}]"
                    )));
                }
            }
        }
        Ok(PriorConfig {
            poisson_mean,
            n_dipoles_max,
            sigma_mode,
        })
    }

    pub fn fixed(poisson_mean: f64, n_dipoles_max: usize, sigma_q: f64) -> Result<Self> {
        PriorConfig::new(poisson_mean, n_dipoles_max, SigmaMode::Fixed { sigma_q })
    }

    pub fn hyper(
        poisson_mean: f64,
        n_dipoles_max: usize,
        sigma_min: f64,
        sigma_max: f64,
    ) -> Result<Self> {
        PriorConfig::new(
            poisson_mean,
            n_dipoles_max,
            SigmaMode::Hyper {
                sigma_min,
                sigma_max,
            },
        )
    }

    pub fn is_hyper(&self) -> bool {
        matches!(self.sigma_mode, SigmaMode::Hyper { .. })
    }
}

/// Sensor noise: either isotropic `sigma^2 I` or a full SPD covariance.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Scalar(f64),
    Full(DMatrix<f64>),
}

impl NoiseModel {
    pub fn scalar(sigma_noise: f64) -> Result<Self> {
        if sigma_noise <= 0.0 || !sigma_noise.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma_noise must be positive and finite, got {sigma_noise}"
            )));
        }
        Ok(NoiseModel::Scalar(sigma_noise))
    }

    /// Full covariance input; must be square, symmetric, and positive
    /// definite.
    pub fn full(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::InvalidConfig(format!(
                "noise covariance must be square, got {} x {}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for r in 0..matrix.nrows() {
            for c in 0..r {
                if (matrix[(r, c)] - matrix[(c, r)]).abs() > 1e-10 * scale.max(1e-300) {
                    return Err(Error::InvalidConfig(format!(
                        "noise covariance is not symmetric at ({r}, {c})"
                    )));
                }
            }
        }
        if matrix.clone().cholesky().is_none() {
            return Err(Error::InvalidConfig(
                "noise covariance is not positive definite".into(),
            ));
        }
        Ok(NoiseModel::Full(matrix))
    }

    /// Add `Gamma_N` onto a square matrix of matching size.
    fn add_to(&self, target: &mut DMatrix<f64>) -> Result<()> {
        let n = target.nrows();
        match self {
            NoiseModel::Scalar(sigma) => {
                let v = sigma * sigma;
                for i in 0..n {
                    target[(i, i)] += v;
                }
            }
            NoiseModel::Full(m) => {
                if m.nrows() != n {
                    return Err(Error::ShapeMismatch {
                        what: "noise covariance".into(),
                        expected: format!("{n} x {n}"),
                        found: format!("{} x {}", m.nrows(), m.ncols()),
                    });
                }
                *target += m;
            }
        }
        Ok(())
    }

    pub fn covariance(&self, n_sensors: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(n_sensors, n_sensors);
        self.add_to(&mut m)?;
        Ok(m)
    }
}

/// One hypothesis on the sampled variables: dipole locations (distinct grid
/// indices) plus the prior width. In fixed mode `sigma_q` simply carries the
/// configured constant.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleConfig {
    pub locations: Vec<usize>,
    pub sigma_q: f64,
}

impl DipoleConfig {
    pub fn new(locations: Vec<usize>, sigma_q: f64) -> Self {
        DipoleConfig { locations, sigma_q }
    }

    pub fn empty(sigma_q: f64) -> Self {
        DipoleConfig {
            locations: Vec::new(),
            sigma_q,
        }
    }

    pub fn n_dipoles(&self) -> usize {
        self.locations.len()
    }

    pub fn has_duplicate_locations(&self) -> bool {
        for (i, a) in self.locations.iter().enumerate() {
            if self.locations[i + 1..].contains(a) {
                return true;
            }
        }
        false
    }
}

/// Analytic Gaussian posterior of the dipole moments given a configuration:
/// one mean per topography (columns) and one covariance shared by all
/// topographies.
#[derive(Debug, Clone)]
pub struct MomentPosterior {
    /// `3 n_D x T`; column `t` is the posterior mean of all moments at `t`.
    pub means: DMatrix<f64>,
    /// `3 n_D x 3 n_D`, identical for every topography.
    pub covariance: DMatrix<f64>,
}

impl MomentPosterior {
    /// Posterior mean moment of dipole `d` at topography `t`.
    pub fn dipole_mean(&self, d: usize, t: usize) -> Vector3<f64> {
        Vector3::new(
            self.means[(3 * d, t)],
            self.means[(3 * d + 1, t)],
            self.means[(3 * d + 2, t)],
        )
    }

    pub fn n_dipoles(&self) -> usize {
        self.means.nrows() / 3
    }

    pub fn n_topographies(&self) -> usize {
        self.means.ncols()
    }
}

/// Cholesky factor of `Gamma_l = sigma_q^2 G G^t + Gamma_N` with one jitter
/// retry; on failure reports a condition estimate from the eigenvalue range.
fn factor_marginal_covariance(
    gain: Option<&DMatrix<f64>>,
    sigma_q: f64,
    noise: &NoiseModel,
    n_sensors: usize,
) -> Result<Cholesky<f64, Dyn>> {
    let mut gamma = match gain {
        Some(g) => {
            let mut m = g * g.transpose();
            m *= sigma_q * sigma_q;
            noise.add_to(&mut m)?;
            m
        }
        None => noise.covariance(n_sensors)?,
    };
    if let Some(chol) = gamma.clone().cholesky() {
        return Ok(chol);
    }
    let jitter = 1e-12 * gamma.trace() / n_sensors as f64;
    for i in 0..n_sensors {
        gamma[(i, i)] += jitter;
    }
    if let Some(chol) = gamma.clone().cholesky() {
        return Ok(chol);
    }
    let eigs = gamma.symmetric_eigenvalues();
    let max = eigs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = eigs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    Err(Error::Factorization {
        condition: max / min.abs().max(f64::MIN_POSITIVE),
    })
}

fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// Log marginal likelihood of the data given a configuration: the product
/// over topographies of zero-mean Gaussians with covariance `Gamma_l`.
pub fn log_marginal_likelihood(
    data: &DMatrix<f64>,
    config: &DipoleConfig,
    leadfield: &Leadfield,
    noise: &NoiseModel,
) -> Result<f64> {
    let n_s = leadfield.n_sensors();
    if data.nrows() != n_s {
        return Err(Error::ShapeMismatch {
            what: "data".into(),
            expected: format!("{n_s} sensor rows"),
            found: format!("{} rows", data.nrows()),
        });
    }
    debug_assert!(!config.has_duplicate_locations(), "duplicate locations");
    let gain = if config.n_dipoles() > 0 {
        Some(leadfield.gain_for(&config.locations))
    } else {
        None
    };
    let chol = factor_marginal_covariance(gain.as_ref(), config.sigma_q, noise, n_s)?;
    let log_det = log_det_from_cholesky(&chol);
    let t_count = data.ncols();
    let mut quad = 0.0;
    for t in 0..t_count {
        let y = data.column(t).into_owned();
        let solved = chol.solve(&y);
        quad += y.dot(&solved);
    }
    Ok(-0.5 * (t_count as f64 * (n_s as f64 * LOG_2PI + log_det) + quad))
}

/// Conditional Gaussian posterior of the dipole moments given a
/// configuration: means `sigma_q^2 G^t Gamma_l^{-1} y_t` and shared
/// covariance `sigma_q^2 I - sigma_q^4 G^t Gamma_l^{-1} G`.
pub fn moment_posterior(
    data: &DMatrix<f64>,
    config: &DipoleConfig,
    leadfield: &Leadfield,
    noise: &NoiseModel,
) -> Result<MomentPosterior> {
    let n_d = config.n_dipoles();
    if n_d == 0 {
        return Err(Error::InvalidConfig(
            "moment posterior requires at least one dipole".into(),
        ));
    }
    let n_s = leadfield.n_sensors();
    if data.nrows() != n_s {
        return Err(Error::ShapeMismatch {
            what: "data".into(),
            expected: format!("{n_s} sensor rows"),
            found: format!("{} rows", data.nrows()),
        });
    }
    let sigma2 = config.sigma_q * config.sigma_q;
    let gain = leadfield.gain_for(&config.locations);
    let chol = factor_marginal_covariance(Some(&gain), config.sigma_q, noise, n_s)?;

    // means: sigma^2 G^t (Gamma_l^{-1} Y)
    let solved_data = chol.solve(data);
    let means = gain.transpose() * solved_data * sigma2;

    // covariance: sigma^2 I - sigma^4 G^t (Gamma_l^{-1} G), symmetrized
    let solved_gain = chol.solve(&gain);
    let mut covariance = gain.transpose() * solved_gain;
    covariance *= -(sigma2 * sigma2);
    for i in 0..3 * n_d {
        covariance[(i, i)] += sigma2;
    }
    let sym = (&covariance + covariance.transpose()) * 0.5;

    Ok(MomentPosterior {
        means,
        covariance: sym,
    })
}

/// Normalized log-density of the log-uniform hyperprior on its support,
/// negative infinity outside. A degenerate support (`min == max`) acts as a
/// point mass.
pub fn log_hyperprior(sigma_q: f64, sigma_min: f64, sigma_max: f64) -> f64 {
    if sigma_q < sigma_min || sigma_q > sigma_max {
        return f64::NEG_INFINITY;
    }
    if sigma_min == sigma_max {
        return 0.0;
    }
    -sigma_q.ln() - (sigma_max / sigma_min).ln().ln()
}

/// Log prior of a configuration: Poisson mass on the dipole count, uniform
/// ordered-distinct locations, and in hierarchical mode the log-uniform
/// hyperprior factor. Returns negative infinity for out-of-support states
/// (too many dipoles, duplicate or out-of-range locations, `sigma_q` outside
/// its bounds).
pub fn log_prior(config: &DipoleConfig, grid: &SourceGrid, prior: &PriorConfig) -> f64 {
    let n = config.n_dipoles();
    let n_points = grid.n_points();
    if n > prior.n_dipoles_max || n > n_points {
        return f64::NEG_INFINITY;
    }
    if config.has_duplicate_locations() {
        return f64::NEG_INFINITY;
    }
    if config.locations.iter().any(|&r| r >= n_points) {
        return f64::NEG_INFINITY;
    }

    let lambda = prior.poisson_mean;
    let mut lp = -lambda - ln_gamma(n as f64 + 1.0);
    if n > 0 {
        lp += n as f64 * lambda.ln();
    }
    for k in 0..n {
        lp -= ((n_points - k) as f64).ln();
    }
    if let SigmaMode::Hyper {
        sigma_min,
        sigma_max,
    } = prior.sigma_mode
    {
        lp += log_hyperprior(config.sigma_q, sigma_min, sigma_max);
    }
    lp
}

/// Draw a configuration from the prior: truncated Poisson dipole count,
/// locations uniform without replacement, `sigma_q` log-uniform in
/// hierarchical mode and constant otherwise.
pub fn sample_prior(grid: &SourceGrid, prior: &PriorConfig, rng: &mut impl Rng) -> DipoleConfig {
    let n_max = prior.n_dipoles_max.min(grid.n_points());
    let masses = truncated_poisson_masses(prior.poisson_mean, n_max);
    let u: f64 = rng.random();
    let mut n = n_max;
    let mut acc = 0.0;
    for (k, m) in masses.iter().enumerate() {
        acc += m;
        if u < acc {
            n = k;
            break;
        }
    }

    // Partial Fisher-Yates: exactly n draws, no rejection loop.
    let mut pool: Vec<usize> = (0..grid.n_points()).collect();
    let mut locations = Vec::with_capacity(n);
    for k in 0..n {
        let j = rng.random_range(k..pool.len());
        pool.swap(k, j);
        locations.push(pool[k]);
    }

    let sigma_q = match prior.sigma_mode {
        SigmaMode::Fixed { sigma_q } => sigma_q,
        SigmaMode::Hyper {
            sigma_min,
            sigma_max,
        } => {
            if sigma_min == sigma_max {
                sigma_min
            } else {
                let lo = sigma_min.ln();
                let hi = sigma_max.ln();
                (lo + rng.random::<f64>() * (hi - lo)).exp()
            }
        }
    };

    DipoleConfig { locations, sigma_q }
}

/// Normalized masses of a Poisson distribution truncated to `0..=n_max`.
pub fn truncated_poisson_masses(lambda: f64, n_max: usize) -> Vec<f64> {
    let mut masses = Vec::with_capacity(n_max + 1);
    let mut term = (-lambda).exp();
    let mut total = 0.0;
    for k in 0..=n_max {
        if k > 0 {
            term *= lambda / k as f64;
        }
        masses.push(term);
        total += term;
    }
    for m in &mut masses {
        *m /= total;
    }
    masses
}
