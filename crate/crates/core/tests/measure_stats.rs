use dbm_core::characteristics::{HydroConfig, HydroSolution, InitialTransform};
use dbm_core::measure;
use dbm_core::stats::{self, SpectralDomainParams};
use dbm_core::{Complex64, ParticleConfiguration, PotentialSpec};

fn free_atom(t: f64) -> HydroSolution {
    let cfg = HydroConfig {
        n_mf: 0,
        ..HydroConfig::default()
    };
    let mut sol = HydroSolution::new(PotentialSpec::zero(), InitialTransform::Atom { at: 0.0 }, cfg).unwrap();
    sol.advance_to(t).unwrap();
    sol
}

#[test]
fn atom_quantiles_scale_with_root_time() {
    let t = 0.25;
    let n = 20;
    let sol = free_atom(t);
    let table = measure::classical_locations(&sol, n).unwrap();
    for i in 3..=17 {
        // semicircle of radius 2√t = √t times the radius-2 law
        let expect = t.sqrt() * measure::semicircle_quantile(i as f64 / n as f64);
        let got = table.get(i as i64);
        assert!((got - expect).abs() < 1e-2, "i = {i}: {got} vs {expect}");
    }
}

#[test]
fn middle_quantile_of_a_symmetric_law_is_zero() {
    let n = 40;
    let sol = free_atom(0.25);
    let table = measure::classical_locations(&sol, n).unwrap();
    let rho0 = 1.0 / (std::f64::consts::PI * 0.5);
    assert!(table.get(20).abs() <= 2.0 / (n as f64 * rho0), "{}", table.get(20));
}

#[test]
fn rigidity_ignores_input_order() {
    let n = 100;
    let table = measure::QuantileTable::new(0.0, measure::semicircle_points(n)).unwrap();
    let params = SpectralDomainParams::new(n, 0.1).unwrap();
    let sorted: Vec<f64> = measure::semicircle_points(n).iter().map(|x| x * 1.01).collect();
    let mut shuffled = sorted.clone();
    shuffled.reverse();
    shuffled.swap(3, 70);
    let a = stats::rigidity_report(&ParticleConfiguration::new(sorted, 0.0, 2.0).unwrap(), &table, &params).unwrap();
    let b = stats::rigidity_report(&ParticleConfiguration::new(shuffled, 0.0, 2.0).unwrap(), &table, &params).unwrap();
    assert_eq!(a, b);
}

#[test]
fn predicted_covariance_transposes_under_swap() {
    let z = Complex64::new(0.1, 0.02);
    let w = Complex64::new(-0.3, 0.05);
    let a = stats::predicted_covariance(z, w, 1.5);
    let b = stats::predicted_covariance(w, z, 1.5);
    for i in 0..2 {
        for j in 0..2 {
            assert!((a[i][j] - b[j][i]).abs() < 1e-15);
        }
    }
}

#[test]
fn empirical_eta_im_m_ladder_is_monotone_on_dbm_output() {
    let n = 200;
    let x: Vec<f64> = measure::semicircle_points(n).iter().map(|v| v + 0.01 * (v * 37.0).sin()).collect();
    let config = ParticleConfiguration::new(x, 0.1, 2.0).unwrap();
    for k in 0..10 {
        let e = -1.8 + 0.4 * k as f64;
        let mut prev = 0.0;
        for j in 0..20 {
            let eta = 1e-3 * 1.5f64.powi(j);
            let v = eta * measure::empirical_stieltjes(&config, Complex64::new(e, eta)).unwrap().im;
            assert!(v >= prev);
            prev = v;
        }
    }
}
