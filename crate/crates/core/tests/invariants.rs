//! Property tests for the structural invariants of the transforms, flows and SDE.

use std::sync::OnceLock;

use dbm_core::characteristics::{HydroConfig, HydroSolution, InitialTransform};
use dbm_core::dbm_sde::{self, ParticleConfiguration, SdeParams};
use dbm_core::measure;
use dbm_core::{Complex64, PotentialSpec};
use proptest::prelude::*;

fn quartic_solution() -> &'static HydroSolution {
    static SOL: OnceLock<HydroSolution> = OnceLock::new();
    SOL.get_or_init(|| {
        let cfg = HydroConfig {
            n_mf: 400,
            mesh_x: 41,
            mesh_y: 10,
            x_range: Some((-2.5, 2.5)),
            y_range: (1e-2, 1.0),
            ..HydroConfig::default()
        };
        let init = InitialTransform::Semicircle { center: 0.0, radius: 2.0 };
        let mut sol = HydroSolution::new(PotentialSpec::quartic(), init, cfg).unwrap();
        sol.advance_to(0.1).unwrap();
        sol
    })
}

fn distinct_points() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 2..40).prop_filter("distinct", |v| {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        s.windows(2).all(|w| w[1] - w[0] > 1e-6)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stieltjes_is_positive_and_conjugate_symmetric(
        pts in distinct_points(), re in -4.0..4.0f64, im in 1e-4..5.0f64,
    ) {
        let z = Complex64::new(re, im);
        let m = measure::stieltjes_of(&pts, z);
        prop_assert!(m.im > 0.0);
        prop_assert!(m.im * z.im <= 1.0 + 1e-12);
        let mc = measure::stieltjes_of(&pts, z.conj());
        prop_assert!((mc - m.conj()).norm() <= 1e-12 * m.norm().max(1.0));
    }

    #[test]
    fn eta_im_m_is_monotone_for_empirical_measures(
        pts in distinct_points(), e in -3.0..3.0f64,
    ) {
        let mut prev = 0.0;
        for k in 0..20 {
            let eta = 1e-3 * 1.5f64.powi(k);
            let v = eta * measure::stieltjes_of(&pts, Complex64::new(e, eta)).im;
            prop_assert!(v >= prev * (1.0 - 1e-12), "eta {eta}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn drift_sums_to_minus_half_the_confinement(pts in distinct_points(), beta in 1.0..4.0f64) {
        let spec = PotentialSpec::quartic();
        let c = ParticleConfiguration::new(pts, 0.0, beta).unwrap();
        let d = dbm_sde::drift(&c, &spec).unwrap();
        let total: f64 = d.iter().sum();
        let expect: f64 = -c.positions().iter().map(|&x| spec.cut_drift(x)).sum::<f64>() / 2.0;
        let scale: f64 = d.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!((total - expect).abs() <= c.n() as f64 * 1e-12 * scale, "{total} vs {expect}");
    }

    #[test]
    fn simulation_is_bit_reproducible(seed in any::<u64>(), n in 2usize..30) {
        let c0 = ParticleConfiguration::new(measure::semicircle_points(n), 0.0, 2.0).unwrap();
        let params = SdeParams::for_particles(n).with_step(1e-3).with_seed(seed);
        let spec = PotentialSpec::quadratic();
        let a = dbm_sde::simulate(&c0, &spec, &params, 0.05).unwrap();
        let b = dbm_sde::simulate(&c0, &spec, &params, 0.05).unwrap();
        let bits = |r: &dbm_sde::SimulationResult| r.config.positions().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert!(a.config.positions().windows(2).all(|w| w[0] <= w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn im_m_im_z_stays_below_one_along_flows(re in -2.4..2.4f64, im in 0.01..1.0f64) {
        let sol = quartic_solution();
        for c in sol.trace(Complex64::new(re, im)).unwrap() {
            prop_assert!(c.m.im * c.z.im <= 1.0 + 1e-12, "s = {}: {}", c.s, c.m.im * c.z.im);
            prop_assert!(c.m.im > 0.0);
        }
    }

    #[test]
    fn flow_inverse_recovers_the_start(re in -2.0..2.0f64, im in 0.05..0.9f64) {
        let sol = quartic_solution();
        let u = Complex64::new(re, im);
        // starts whose flow reaches the floor before t have no image
        let flowed = sol.flow(u);
        prop_assume!(flowed.is_some());
        let (z, m) = flowed.unwrap();
        let inv = sol.invert(z).unwrap();
        prop_assert!((inv.u - u).norm() <= 1e-6, "{u} -> {}", inv.u);
        prop_assert!((inv.m - m).norm() <= 1e-6);
    }

    #[test]
    fn flow_is_injective(
        a in (-2.0..2.0f64, 0.05..0.9f64), b in (-2.0..2.0f64, 0.05..0.9f64),
    ) {
        let sol = quartic_solution();
        let (u1, u2) = (Complex64::new(a.0, a.1), Complex64::new(b.0, b.1));
        prop_assume!((u1 - u2).norm() > 1e-9);
        let (Some((z1, _)), Some((z2, _))) = (sol.flow(u1), sol.flow(u2)) else {
            return Ok(());
        };
        prop_assert!((z1 - z2).norm() > 0.0);
    }

    #[test]
    fn eta_im_m_is_monotone_along_the_solution(e in -1.5..1.5f64) {
        let sol = quartic_solution();
        let mut prev = 0.0;
        for k in 0..20 {
            let eta = 0.02 * 1.2f64.powi(k);
            let v = eta * sol.evaluate_m(Complex64::new(e, eta)).unwrap().im;
            prop_assert!(v >= prev - 1e-8, "E {e}, eta {eta}: {v} < {prev}");
            prev = v;
        }
    }
}

#[test]
fn ensemble_is_identical_across_thread_counts() {
    let n = 40;
    let c0 = ParticleConfiguration::new(measure::semicircle_points(n), 0.0, 2.0).unwrap();
    let params = SdeParams::for_particles(n).with_step(1e-3).with_seed(11);
    let spec = PotentialSpec::quartic();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| dbm_sde::ensemble(&c0, &spec, &params, 0.05, 16).unwrap())
            .into_iter()
            .flat_map(|r| r.config.into_positions())
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(1), run(4));
}
