use std::sync::OnceLock;

use dbm_core::characteristics::{HydroConfig, HydroSolution, InitialTransform};
use dbm_core::measure;
use dbm_core::{Complex64, PotentialSpec};

const T: f64 = 0.1;

fn quartic() -> &'static HydroSolution {
    static SOL: OnceLock<HydroSolution> = OnceLock::new();
    SOL.get_or_init(|| {
        let cfg = HydroConfig {
            n_mf: 400,
            mesh_x: 41,
            mesh_y: 10,
            ..HydroConfig::default()
        };
        let init = InitialTransform::Semicircle { center: 0.0, radius: 2.0 };
        let mut sol = HydroSolution::new(PotentialSpec::quartic(), init, cfg).unwrap();
        sol.advance_to(T).unwrap();
        sol
    })
}

fn starts() -> Vec<Complex64> {
    let mut out = Vec::new();
    for i in 0..9 {
        for j in 0..5 {
            out.push(Complex64::new(-2.4 + 0.6 * i as f64, 0.01 * 4f64.powi(j)));
        }
    }
    out
}

#[test]
fn quartic_flow_uses_the_nonlocal_term() {
    assert!(quartic().nonlocal_active());
    assert_eq!(quartic().mean_field().len(), 400);
}

#[test]
fn heights_obey_the_monotone_comparison() {
    let sol = quartic();
    let c = sol.spec().flow_constant(3.0, 3.0, 2.5).value;
    for u in starts() {
        let path = sol.trace(u).unwrap();
        let last = path.last().unwrap();
        if !last.alive {
            continue;
        }
        for p in &path {
            let bound = (-c * (last.s - p.s)).exp() * last.z.im;
            assert!(p.z.im >= bound * (1.0 - 1e-12), "u {u}, s {}: {} < {bound}", p.s, p.z.im);
        }
    }
}

#[test]
fn im_m_is_sandwiched_along_flows() {
    let sol = quartic();
    let c = sol.spec().flow_constant(3.0, 3.0, 2.5).value;
    for u in starts() {
        let im0 = sol.m0(u).im;
        for p in sol.trace(u).unwrap().iter().filter(|p| p.alive) {
            let (lo, hi) = ((-c * p.s).exp() * im0, (c * p.s).exp() * im0);
            assert!(p.m.im >= lo * (1.0 - 1e-12) && p.m.im <= hi * (1.0 + 1e-12), "u {u}, s {}: {}", p.s, p.m.im);
        }
    }
}

#[test]
fn mean_field_matches_the_solution() {
    let sol = quartic();
    let tol = 5.0 / sol.mean_field().len() as f64;
    for k in 0..11 {
        let w = Complex64::new(-1.5 + 0.3 * k as f64, 0.1);
        let m = sol.evaluate_m(w).unwrap();
        let emp = measure::stieltjes_of(sol.mean_field(), w);
        assert!((m - emp).norm() <= tol, "{w}: {m} vs {emp}");
    }
}

#[test]
fn free_semicircle_spreads_to_a_wider_semicircle() {
    let cfg = HydroConfig {
        n_mf: 0,
        mesh_x: 101,
        ..HydroConfig::default()
    };
    let init = InitialTransform::Semicircle { center: 0.0, radius: 2.0 };
    let mut sol = HydroSolution::new(PotentialSpec::zero(), init, cfg).unwrap();
    sol.advance_to(0.25).unwrap();
    // variances add under free convolution: 1 + 0.25
    let radius = 2.0 * 1.25f64.sqrt();
    let w = Complex64::new(0.3, 0.05);
    let m = sol.evaluate_m(w).unwrap();
    let expect = measure::semicircle_stieltjes(w, radius);
    assert!((m - expect).norm() <= 1e-6, "{m} vs {expect}");
}

#[test]
fn refinement_keeps_the_solution() {
    let mut sol = quartic().clone();
    let w = Complex64::new(0.4, 0.2);
    let before = sol.evaluate_m(w).unwrap();
    sol.refine();
    assert!(sol.mesh().len() > quartic().mesh().len());
    let after = sol.evaluate_m(w).unwrap();
    assert!((before - after).norm() <= 1e-8);
}
