//! Compare the sampler against an exactly enumerated posterior.
//!
//! On an 8-point grid with at most two dipoles the posterior over
//! configurations can be computed exactly from the marginal likelihood and
//! the prior. This example runs the fixed-prior sampler on one synthetic
//! recording and reports the total-variation distance between the weighted
//! particle approximation and the exact posterior.

use nalgebra::{DMatrix, Point3, Vector3};
use sesame::model::{log_marginal_likelihood, log_prior, DipoleConfig, NoiseModel, PriorConfig};
use sesame::sampler::{run, SamplerConfig};
use sesame::{Leadfield, SourceGrid};
use statrs::function::gamma::ln_gamma;

fn main() {
    // 8 grid points on cube corners, 6 sensors on the coordinate axes.
    let half = 0.02;
    let mut points = Vec::new();
    for &x in &[-half, half] {
        for &y in &[-half, half] {
            for &z in &[-half, half] {
                points.push(Point3::new(x, y, z));
            }
        }
    }
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

    // One true dipole, three topographies, noise at 20% of the signal peak.
    let true_location = 3;
    let orientation = Vector3::new(1.0, 1.0, 1.0) / 3.0f64.sqrt();
    let amplitudes = [1.5e-7, 2.0e-7, 1.6e-7];
    let mut clean = DMatrix::zeros(6, 3);
    for (t, &a) in amplitudes.iter().enumerate() {
        clean.set_column(t, &leadfield.field_of(&[true_location], &[orientation * a]));
    }
    let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let noise_sigma = 0.2 * peak;
    let mut rng = sesame::rng::substream(7, sesame::rng::stage::SIM_NOISE, 0, 0);
    let normal = rand_distr::Normal::new(0.0, noise_sigma).unwrap();
    let mut data = clean.clone();
    for v in data.iter_mut() {
        *v += rand_distr::Distribution::sample(&normal, &mut rng);
    }
    let noise = NoiseModel::scalar(noise_sigma).unwrap();

    let sigma_q = 2e-7;
    let prior = PriorConfig::fixed(0.25, 2, sigma_q).unwrap();

    // Enumerate every configuration with up to two dipoles.
    let mut states: Vec<Vec<usize>> = vec![vec![]];
    for a in 0..8 {
        states.push(vec![a]);
    }
    for a in 0..8 {
        for b in (a + 1)..8 {
            states.push(vec![a, b]);
        }
    }
    let log_masses: Vec<f64> = states
        .iter()
        .map(|s| {
            let config = DipoleConfig::new(s.clone(), sigma_q);
            let ll = log_marginal_likelihood(&data, &config, &leadfield, &noise).unwrap();
            // set-level prior: ordered-draw density times orderings
            ll + log_prior(&config, &grid, &prior) + ln_gamma(s.len() as f64 + 1.0)
        })
        .collect();
    let max = log_masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exact: Vec<f64> = log_masses.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exact.iter().sum();
    for m in &mut exact {
        *m /= total;
    }

    println!("exact posterior (mass > 1%):");
    for (s, m) in states.iter().zip(&exact) {
        if *m > 0.01 {
            println!("  {s:?}: {m:.4}");
        }
    }

    for seed in [1u64, 2, 3] {
        let cfg = SamplerConfig {
            n_particles: 4000,
            rng_seed: seed,
            ..SamplerConfig::default()
        };
        let state = run(&data, &leadfield, &grid, &prior, &noise, &cfg).unwrap();
        let mut approx = vec![0.0; states.len()];
        for p in &state.particles {
            let mut key = p.config.locations.clone();
            key.sort_unstable();
            let idx = states.iter().position(|s| s == &key).unwrap();
            approx[idx] += p.log_weight.exp();
        }
        let tv: f64 = 0.5
            * exact
                .iter()
                .zip(&approx)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        println!(
            "seed {seed}: {} iterations, TV distance to exact posterior = {tv:.4}",
            state.iteration
        );
    }
}
