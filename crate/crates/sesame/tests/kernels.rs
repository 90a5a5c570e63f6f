//! Stationarity checks for the MCMC kernels on exactly enumerable instances.
//!
//! Invariance is tested in its literal form: draw i.i.d. states from the
//! exact (tempered) target, apply one kernel step to each, and chi-square the
//! output histogram against the same target. A correct kernel leaves the
//! distribution unchanged; the i.i.d. construction keeps the chi-square test
//! valid. The sigma kernel is additionally checked as a long thinned chain
//! against its quadrature-discretized conditional.

mod common;

use common::*;
use sesame::model::{DipoleConfig, PriorConfig};
use sesame::rng::{self, stage};
use sesame::sampler::{location_move, rj_move, sigma_move, Particle, Posterior, SamplerConfig};

const P_THRESHOLD: f64 = 0.01;

struct KernelHarness {
    inst: SmallInstance,
    prior: PriorConfig,
    states: Vec<Vec<usize>>,
    target: Vec<f64>,
    log_liks: Vec<f64>,
    sigma_q: f64,
    alpha: f64,
}

impl KernelHarness {
    fn new(alpha: f64) -> Self {
        let inst = line_instance(2, 41);
        let sigma_q = 2e-7;
        let prior = PriorConfig::fixed(0.5, 2, sigma_q).unwrap();
        let states = enumerate_states(inst.grid.n_points(), 2);
        let target = exact_posterior_fixed(&inst, &prior, sigma_q, alpha, &states);
        let log_liks = states
            .iter()
            .map(|s| {
                let config = DipoleConfig::new(s.clone(), sigma_q);
                sesame::model::log_marginal_likelihood(
                    &inst.data,
                    &config,
                    &inst.leadfield,
                    &inst.noise,
                )
                .unwrap()
            })
            .collect();
        KernelHarness {
            inst,
            prior,
            states,
            target,
            log_liks,
            sigma_q,
            alpha,
        }
    }

    fn posterior(&self) -> Posterior<'_> {
        Posterior {
            data: &self.inst.data,
            leadfield: &self.inst.leadfield,
            grid: &self.inst.grid,
            prior: &self.prior,
            noise: &self.inst.noise,
        }
    }

    fn state_index(&self, locations: &[usize]) -> usize {
        let mut key = locations.to_vec();
        key.sort_unstable();
        self.states
            .iter()
            .position(|s| s == &key)
            .expect("state outside enumeration")
    }

    /// Draw from the exact target, apply `kernel` once, histogram the output.
    fn one_step_histogram(
        &self,
        n_draws: usize,
        seed: u64,
        kernel: impl Fn(&mut Particle, &Posterior<'_>, &mut rand_chacha::ChaCha8Rng),
    ) -> Vec<u64> {
        let posterior = self.posterior();
        let mut histogram = vec![0u64; self.states.len()];
        for i in 0..n_draws {
            let mut rng = rng::substream(seed, stage::MOVE, i as u64, 0);
            let idx = sample_index(&self.target, &mut rng);
            // uniform ordering: the chain's state is an ordered tuple
            let mut locations = self.states[idx].clone();
            for k in (1..locations.len()).rev() {
                let j = rand::Rng::random_range(&mut rng, 0..=k);
                locations.swap(k, j);
            }
            let mut particle = Particle {
                config: DipoleConfig::new(locations, self.sigma_q),
                log_weight: 0.0,
                log_lik: self.log_liks[idx],
            };
            kernel(&mut particle, &posterior, &mut rng);
            histogram[self.state_index(&particle.config.locations)] += 1;
        }
        histogram
    }

    fn expected_counts(&self, n_draws: usize) -> Vec<f64> {
        self.target.iter().map(|p| p * n_draws as f64).collect()
    }
}

#[test]
fn rj_kernel_preserves_tempered_target() {
    let h = KernelHarness::new(0.6);
    let cfg = SamplerConfig::default();
    let n = 1_000_000;
    let hist = h.one_step_histogram(n, 9001, |particle, posterior, rng| {
        rj_move(particle, h.alpha, posterior, &cfg, rng).unwrap();
    });
    let p = chi_square_p(&hist, &h.expected_counts(n));
    println!("rj one-step stationarity: p = {p:.4}");
    assert!(
        p > P_THRESHOLD,
        "rj kernel breaks stationarity (p = {p:.2e})"
    );
}

#[test]
fn location_kernel_preserves_tempered_target() {
    let h = KernelHarness::new(0.6);
    let n = 1_000_000;
    let hist = h.one_step_histogram(n, 9002, |particle, posterior, rng| {
        location_move(particle, h.alpha, posterior, rng).unwrap();
    });
    let p = chi_square_p(&hist, &h.expected_counts(n));
    println!("location one-step stationarity: p = {p:.4}");
    assert!(
        p > P_THRESHOLD,
        "location kernel breaks stationarity (p = {p:.2e})"
    );
}

#[test]
fn composed_kernel_preserves_tempered_target() {
    let h = KernelHarness::new(0.6);
    let cfg = SamplerConfig::default();
    let n = 1_000_000;
    let hist = h.one_step_histogram(n, 9003, |particle, posterior, rng| {
        rj_move(particle, h.alpha, posterior, &cfg, rng).unwrap();
        location_move(particle, h.alpha, posterior, rng).unwrap();
        sigma_move(particle, h.alpha, posterior, &cfg, rng).unwrap();
    });
    let p = chi_square_p(&hist, &h.expected_counts(n));
    println!("composed one-step stationarity: p = {p:.4}");
    assert!(
        p > P_THRESHOLD,
        "composed kernel breaks stationarity (p = {p:.2e})"
    );
}

/// At alpha = 0 the tempered target is the prior itself, so prior draws
/// moved once by the RJ kernel must still show the truncated-Poisson count
/// histogram.
#[test]
fn rj_kernel_at_alpha_zero_leaves_prior_invariant() {
    let h = KernelHarness::new(0.0);
    let cfg = SamplerConfig::default();
    let posterior = h.posterior();
    let n = 1_000_000usize;
    let mut count_hist = vec![0u64; 3];
    for i in 0..n {
        let mut rng = rng::substream(9004, stage::MOVE, i as u64, 0);
        let config = sesame::model::sample_prior(&h.inst.grid, &h.prior, &mut rng);
        let log_lik = h.log_liks[h.state_index(&config.locations)];
        let mut particle = Particle {
            config,
            log_weight: 0.0,
            log_lik,
        };
        rj_move(&mut particle, 0.0, &posterior, &cfg, &mut rng).unwrap();
        count_hist[particle.config.n_dipoles()] += 1;
    }
    let masses = sesame::model::truncated_poisson_masses(0.5, 2);
    let expected: Vec<f64> = masses.iter().map(|m| m * n as f64).collect();
    let p = chi_square_p(&count_hist, &expected);
    println!("rj prior invariance at alpha 0: p = {p:.4}, histogram {count_hist:?}");
    assert!(p > P_THRESHOLD, "prior not invariant (p = {p:.2e})");
}

/// Long thinned MH chain on sigma at a fixed 1-dipole configuration against
/// the quadrature-discretized conditional (64 log-spaced bins).
#[test]
fn sigma_kernel_matches_discretized_conditional() {
    let inst = line_instance(2, 43);
    let sigma_min = 2e-9;
    let sigma_max = 2e-6;
    let alpha = 0.7;
    let locations = vec![2usize];
    let prior = PriorConfig::hyper(0.5, 2, sigma_min, sigma_max).unwrap();
    let posterior = Posterior {
        data: &inst.data,
        leadfield: &inst.leadfield,
        grid: &inst.grid,
        prior: &prior,
        noise: &inst.noise,
    };
    let cfg = SamplerConfig::default();

    // exact conditional: fine quadrature aggregated into 64 coarse bins
    let n_coarse = 64;
    let n_fine = 64 * n_coarse;
    let fine = sigma_conditional_bins(&inst, &locations, sigma_min, sigma_max, n_fine, alpha);
    let mut coarse_exact = vec![0.0; n_coarse];
    for (b, &m) in fine.iter().enumerate() {
        coarse_exact[b / (n_fine / n_coarse)] += m;
    }

    let total_steps = 1_000_000usize;
    let burn_in = 20_000usize;
    let thin = 100usize;
    let mut rng = rng::substream(9005, stage::MOVE, 0, 0);
    let sigma0 = (sigma_min * sigma_max).sqrt();
    let config = DipoleConfig::new(locations.clone(), sigma0);
    let log_lik =
        sesame::model::log_marginal_likelihood(&inst.data, &config, &inst.leadfield, &inst.noise)
            .unwrap();
    let mut particle = Particle {
        config,
        log_weight: 0.0,
        log_lik,
    };
    let mut hist = vec![0u64; n_coarse];
    let mut kept = 0usize;
    for step in 0..total_steps {
        sigma_move(&mut particle, alpha, &posterior, &cfg, &mut rng).unwrap();
        if step >= burn_in && (step - burn_in).is_multiple_of(thin) {
            hist[sigma_bin_of(particle.config.sigma_q, sigma_min, sigma_max, n_coarse)] += 1;
            kept += 1;
        }
    }
    let expected: Vec<f64> = coarse_exact.iter().map(|m| m * kept as f64).collect();
    let p = chi_square_p(&hist, &expected);
    println!("sigma chain vs discretized conditional: p = {p:.4} ({kept} samples)");
    assert!(p > P_THRESHOLD, "sigma kernel off target (p = {p:.2e})");
}

/// One-step exact-draw variant for the sigma kernel: draw sigma from the
/// fine-binned conditional, move once, compare the coarse histogram.
#[test]
fn sigma_kernel_one_step_invariance() {
    let inst = line_instance(2, 43);
    let sigma_min = 2e-9;
    let sigma_max = 2e-6;
    let alpha = 0.7;
    let locations = vec![2usize];
    let prior = PriorConfig::hyper(0.5, 2, sigma_min, sigma_max).unwrap();
    let posterior = Posterior {
        data: &inst.data,
        leadfield: &inst.leadfield,
        grid: &inst.grid,
        prior: &prior,
        noise: &inst.noise,
    };
    let cfg = SamplerConfig::default();

    let n_coarse = 64;
    let n_fine = 64 * n_coarse;
    let fine = sigma_conditional_bins(&inst, &locations, sigma_min, sigma_max, n_fine, alpha);
    let mut coarse_exact = vec![0.0; n_coarse];
    for (b, &m) in fine.iter().enumerate() {
        coarse_exact[b / (n_fine / n_coarse)] += m;
    }

    let n_draws = 200_000usize;
    let mut hist = vec![0u64; n_coarse];
    for i in 0..n_draws {
        let mut rng = rng::substream(9006, stage::MOVE, i as u64, 0);
        let sigma = sample_sigma_binned(&fine, sigma_min, sigma_max, &mut rng);
        let config = DipoleConfig::new(locations.clone(), sigma);
        let log_lik = sesame::model::log_marginal_likelihood(
            &inst.data,
            &config,
            &inst.leadfield,
            &inst.noise,
        )
        .unwrap();
        let mut particle = Particle {
            config,
            log_weight: 0.0,
            log_lik,
        };
        sigma_move(&mut particle, alpha, &posterior, &cfg, &mut rng).unwrap();
        hist[sigma_bin_of(particle.config.sigma_q, sigma_min, sigma_max, n_coarse)] += 1;
    }
    let expected: Vec<f64> = coarse_exact.iter().map(|m| m * n_draws as f64).collect();
    let p = chi_square_p(&hist, &expected);
    println!("sigma one-step invariance: p = {p:.4}");
    assert!(p > P_THRESHOLD, "sigma kernel off target (p = {p:.2e})");
}

/// The hierarchical sampler with a degenerate hyperprior (sigma_min ==
/// sigma_max == sigma_q) must match the fixed-prior path: per-seed posterior
/// masses over the enumerable states are compared with Welch t-tests.
#[test]
fn degenerate_hyper_mode_matches_fixed_mode() {
    use statrs::distribution::{ContinuousCDF, StudentsT};

    let inst = line_instance(2, 47);
    let sigma_q = 2e-7;
    let states = enumerate_states(inst.grid.n_points(), 2);
    let fixed_prior = PriorConfig::fixed(0.5, 2, sigma_q).unwrap();
    let hyper_prior = PriorConfig::hyper(0.5, 2, sigma_q, sigma_q).unwrap();

    let n_seeds = 20;
    let run_masses = |prior: &PriorConfig, seed_base: u64| -> Vec<Vec<f64>> {
        (0..n_seeds)
            .map(|s| {
                let cfg = SamplerConfig {
                    n_particles: 300,
                    rng_seed: seed_base + s,
                    ..SamplerConfig::default()
                };
                let state = sesame::sampler::run(
                    &inst.data,
                    &inst.leadfield,
                    &inst.grid,
                    prior,
                    &inst.noise,
                    &cfg,
                )
                .unwrap();
                particle_state_marginal(&state, &states)
            })
            .collect()
    };
    let fixed_runs = run_masses(&fixed_prior, 100);
    let hyper_runs = run_masses(&hyper_prior, 900);

    // Welch two-sample t per state with mass worth testing, Bonferroni.
    let mut tested = 0usize;
    let mut worst_p = 1.0f64;
    for s in 0..states.len() {
        let a: Vec<f64> = fixed_runs.iter().map(|r| r[s]).collect();
        let b: Vec<f64> = hyper_runs.iter().map(|r| r[s]).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| {
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let (ma, mb) = (mean(&a), mean(&b));
        if ma + mb < 0.02 {
            continue; // negligible state
        }
        let (va, vb) = (var(&a, ma), var(&b, mb));
        let se2 = va / a.len() as f64 + vb / b.len() as f64;
        if se2 == 0.0 {
            continue;
        }
        let t = (ma - mb) / se2.sqrt();
        let df = se2 * se2
            / (va * va / ((a.len() * a.len() * (a.len() - 1)) as f64)
                + vb * vb / ((b.len() * b.len() * (b.len() - 1)) as f64));
        let dist = StudentsT::new(0.0, 1.0, df.max(2.0)).unwrap();
        let p = 2.0 * (1.0 - dist.cdf(t.abs()));
        worst_p = worst_p.min(p);
        tested += 1;
    }
    assert!(tested >= 2, "too few states with appreciable mass");
    let family_threshold = 0.01 / tested as f64;
    println!(
        "degenerate-hyper vs fixed: {tested} states tested, worst p = {worst_p:.4} (threshold {family_threshold:.4})"
    );
    assert!(
        worst_p > family_threshold,
        "hierarchical path with point-mass hyperprior deviates from the fixed path"
    );
}
