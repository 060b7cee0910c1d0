use dbm_core::dbm_sde::{self, ParticleConfiguration, SdeParams};
use dbm_core::measure;
use dbm_core::PotentialSpec;

#[test]
fn equal_seeds_give_identical_runs() {
    let c0 = ParticleConfiguration::new(measure::semicircle_points(20), 0.0, 1.0).unwrap();
    let params = SdeParams::for_particles(20).with_step(1e-3);
    let out = dbm_sde::ensemble_with_seeds(&c0, &PotentialSpec::quartic(), &params, 0.02, &[5, 5]).unwrap();
    assert_eq!(out[0], out[1]);
}

#[test]
fn ensemble_center_of_mass_tracks_the_deterministic_flow() {
    let n = 50;
    let start: Vec<f64> = measure::semicircle_points(n).iter().map(|x| x + 0.7).collect();
    let c0 = ParticleConfiguration::new(start, 0.0, 2.0).unwrap();
    let spec = PotentialSpec::quadratic();
    let params = SdeParams::for_particles(n).with_step(1e-3).with_seed(3);
    let t = 0.5;
    let runs = dbm_sde::ensemble(&c0, &spec, &params, t, 1000).unwrap();
    let centers: Vec<f64> = runs
        .iter()
        .map(|r| r.config.positions().iter().sum::<f64>() / n as f64)
        .collect();
    let mean = centers.iter().sum::<f64>() / centers.len() as f64;
    let var = centers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (centers.len() - 1) as f64;
    let det = dbm_sde::simulate(&c0, &spec, &params.clone().without_noise(), t).unwrap();
    let det_center = det.config.positions().iter().sum::<f64>() / n as f64;
    let se = (var / centers.len() as f64).sqrt();
    assert!((mean - det_center).abs() <= 3.0 * se, "{mean} vs {det_center} (se {se})");
    // the center of mass is an Ornstein-Uhlenbeck process with rate 1/2
    let expect = 0.7 * (-t / 2.0f64).exp();
    assert!((det_center - expect).abs() < 1e-3, "{det_center} vs {expect}");
}

#[test]
fn long_run_relaxes_to_the_semicircle() {
    let n = 500;
    let start: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect();
    let c0 = ParticleConfiguration::new(start, 0.0, 2.0).unwrap();
    let params = SdeParams::for_particles(n).with_step(1e-3).with_seed(9);
    let out = dbm_sde::simulate(&c0, &PotentialSpec::quadratic(), &params, 10.0).unwrap();
    let x = out.config.positions();
    let mut ks: f64 = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let f = measure::semicircle_cdf(xi);
        ks = ks.max((f - i as f64 / n as f64).abs()).max((f - (i + 1) as f64 / n as f64).abs());
    }
    assert!(ks <= 0.05, "Kolmogorov distance {ks}");
    assert!(!out.diagnostics.bound_violated());
}

#[test]
fn ordering_holds_after_every_step() {
    let n = 30;
    let spec = PotentialSpec::quartic();
    let params = SdeParams::for_particles(n).with_step(1e-3).with_seed(21);
    let mut c = ParticleConfiguration::new(measure::semicircle_points(n), 0.0, 1.0).unwrap();
    for k in 0..200 {
        let next = dbm_sde::simulate(&c, &spec, &params.clone().with_seed(k), c.time() + 1e-3).unwrap();
        c = next.config;
        assert!(c.positions().windows(2).all(|w| w[0] <= w[1]));
    }
}
