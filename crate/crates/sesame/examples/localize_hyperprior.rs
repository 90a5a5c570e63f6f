//! Localize dipoles with the log-uniform hyperprior on the prior width and
//! inspect the recovered width posterior.

use sesame::cli::{fibonacci_sensors, synth_ball_grid, GridOptions, GridSynthSettings};
use sesame::estimates;
use sesame::eval::centered_window;
use sesame::model::{NoiseModel, PriorConfig};
use sesame::sampler::{run, SamplerConfig};
use sesame::simulate::{self, estimate_noise_sigma, ScenarioDefaults};
use sesame::Leadfield;

fn main() {
    let sim_grid = synth_ball_grid(
        &GridSynthSettings {
            n_points: 220,
            radius: 0.08,
            seed: 41,
        },
        &GridOptions::default(),
    )
    .unwrap();
    let sensors = fibonacci_sensors(32, 0.12);
    let sim_leadfield = Leadfield::synth(&sim_grid, &sensors, 6).unwrap();
    let defaults = ScenarioDefaults::new(2e-6);
    let mut rng = sesame::rng::substream(41, sesame::rng::stage::DATASET, 0, 0);
    let scenario = simulate::simulate_sources(&sim_grid, 1, &mut rng, &defaults).unwrap();
    let data = simulate::synth_data(&scenario, &sim_leadfield, &mut rng).unwrap();

    let inf_grid = synth_ball_grid(
        &GridSynthSettings {
            n_points: 140,
            radius: 0.08,
            seed: 42,
        },
        &GridOptions::default(),
    )
    .unwrap();
    let inf_leadfield = Leadfield::synth(&inf_grid, &sensors, 6).unwrap();

    let (start, length) = centered_window(&data.noisy, 20);
    let window = data.noisy.columns(start, length).into_owned();
    let noise = NoiseModel::scalar(estimate_noise_sigma(&data.noisy).unwrap()).unwrap();

    // Hyperprior support spanning three orders of magnitude, deliberately
    // centered an order of magnitude BELOW the true source strength: the
    // sampler recovers the width anyway.
    let sigma_min = 2e-8 / 35.0;
    let sigma_max = 1e3 * sigma_min;
    let prior = PriorConfig::hyper(0.25, 10, sigma_min, sigma_max).unwrap();
    let cfg = SamplerConfig {
        rng_seed: 23,
        ..SamplerConfig::default()
    };

    let state = run(&window, &inf_leadfield, &inf_grid, &prior, &noise, &cfg).unwrap();
    let summary = estimates::summarize(&state, &inf_grid, &prior, 0.02).unwrap();

    println!(
        "true: 1 dipole, orientation amplitude peak {:.1e} A·m",
        scenario.amplitude_peak
    );
    println!(
        "estimated {} dipole(s) at {:?} after {} iterations",
        summary.est_n_dipoles, summary.est_locations, summary.iterations
    );
    println!(
        "hyperprior support [{sigma_min:.2e}, {sigma_max:.2e}], estimated sigma_q = {:.2e} ({})",
        summary.est_sigma_q, summary.sigma_q_estimator
    );

    // a crude weighted histogram of the sigma_q posterior, log-spaced
    let mut bins = [0.0f64; 12];
    let log_lo = sigma_min.ln();
    let log_hi = sigma_max.ln();
    for &(sigma, w) in &summary.sigma_q_sample {
        let pos = ((sigma.ln() - log_lo) / (log_hi - log_lo) * bins.len() as f64)
            .clamp(0.0, bins.len() as f64 - 1.0) as usize;
        bins[pos] += w;
    }
    println!("sigma_q posterior histogram (log-spaced over the support):");
    for (b, mass) in bins.iter().enumerate() {
        let lo = (log_lo + (log_hi - log_lo) * b as f64 / bins.len() as f64).exp();
        let bar = "#".repeat((mass * 60.0).round() as usize);
        println!("  {lo:9.2e} | {bar}");
    }
}
