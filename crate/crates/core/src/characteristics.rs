//! Hydrodynamic limit along complex characteristics.
//!
//! Each characteristic carries `(z_s(u), m_s(z_s(u)))` and obeys
//!
//! ```text
//! dz/ds = -m - V'(z)/2
//! dm/ds = m ∂_z V'(z) / 2 + ∫ g(z, x) dμ_s(x)
//! ```
//!
//! with `V'` the quasi-analytic extension. The measure `μ_s` in the nonlocal
//! term is represented by a deterministic mean-field particle system. When
//! `V'` is affine the kernel vanishes on the plateau square of the cutoff, so
//! that system is only advanced if some start point lies outside it (or it is
//! explicitly tracked). `m_t(w)` at arbitrary `w` is recovered by inverting
//! the flow map `u -> z_t(u)` with a damped Newton iteration.

use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::dbm_sde::{self, SdeError};
use crate::measure;
use crate::potential::PotentialSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HydroError {
    #[error("characteristic started at {0} is no longer alive")]
    Dead(Complex64),
    #[error("query point {0} lies at or below the height floor {1}")]
    BelowFloor(Complex64, f64),
    #[error("query point {w} lies outside the mesh coverage (Re in [{re_min}, {re_max}], Im <= {im_max})")]
    Coverage { w: Complex64, re_min: f64, re_max: f64, im_max: f64 },
    #[error("flow inversion at {w} did not converge; best residual {best_residual:e}")]
    Extrapolation { w: Complex64, best_residual: f64 },
    #[error("start point {0} must lie in the upper half plane")]
    StartPoint(Complex64),
    #[error("invalid hydro configuration: {0}")]
    Config(String),
    #[error("mean-field particle system failed: {0}")]
    MeanField(#[from] SdeError),
}

type TransformFn = dyn Fn(Complex64) -> Complex64 + Send + Sync;

/// Initial Stieltjes transform `m_0`.
#[derive(Clone)]
pub enum InitialTransform {
    /// Empirical transform of the given atoms (sorted on construction).
    Empirical(Vec<f64>),
    /// Semicircle law centred at `center` with the given radius.
    Semicircle { center: f64, radius: f64 },
    /// A single atom: `m_0(u) = 1/(at - u)`.
    Atom { at: f64 },
    /// Any analytic transform; carries no natural mean-field discretisation.
    Custom(Arc<TransformFn>),
}

impl fmt::Debug for InitialTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialTransform::Empirical(x) => write!(f, "Empirical({} atoms)", x.len()),
            InitialTransform::Semicircle { center, radius } => {
                write!(f, "Semicircle {{ center: {center}, radius: {radius} }}")
            }
            InitialTransform::Atom { at } => write!(f, "Atom {{ at: {at} }}"),
            InitialTransform::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Radius of the semicircle used to discretise an atom for the mean-field system.
const ATOM_SPREAD: f64 = 1e-2;

impl InitialTransform {
    pub fn empirical(mut atoms: Vec<f64>) -> Self {
        atoms.sort_by(f64::total_cmp);
        InitialTransform::Empirical(atoms)
    }

    pub fn custom(f: impl Fn(Complex64) -> Complex64 + Send + Sync + 'static) -> Self {
        InitialTransform::Custom(Arc::new(f))
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        match self {
            InitialTransform::Empirical(x) => measure::stieltjes_of(x, z),
            InitialTransform::Semicircle { center, radius } => {
                measure::semicircle_stieltjes(z - center, *radius)
            }
            InitialTransform::Atom { at } => 1.0 / (Complex64::new(*at, 0.0) - z),
            InitialTransform::Custom(f) => f(z),
        }
    }

    /// Smallest interval containing the initial measure, when known.
    pub fn support(&self) -> Option<(f64, f64)> {
        match self {
            InitialTransform::Empirical(x) => Some((x[0], x[x.len() - 1])),
            InitialTransform::Semicircle { center, radius } => Some((center - radius, center + radius)),
            InitialTransform::Atom { at } => Some((*at, *at)),
            InitialTransform::Custom(_) => None,
        }
    }

    /// `n` distinct points approximating the initial measure.
    pub fn mean_field_points(&self, n: usize) -> Vec<f64> {
        if n == 0 {
            return Vec::new();
        }
        let levels = (0..n).map(|k| (k as f64 + 0.5) / n as f64);
        let mut pts: Vec<f64> = match self {
            InitialTransform::Empirical(atoms) => {
                levels.map(|p| interpolated_quantile(atoms, p)).collect()
            }
            InitialTransform::Semicircle { center, radius } => levels
                .map(|p| center + radius / 2.0 * measure::semicircle_quantile(p))
                .collect(),
            InitialTransform::Atom { at } => levels
                .map(|p| at + ATOM_SPREAD / 2.0 * measure::semicircle_quantile(p))
                .collect(),
            InitialTransform::Custom(_) => Vec::new(),
        };
        for k in 1..pts.len() {
            if pts[k] <= pts[k - 1] {
                pts[k] = pts[k - 1] + 1e-9;
            }
        }
        pts
    }
}

// Piecewise-linear quantile function through (i + 1/2)/N -> atoms[i], extended linearly.
fn interpolated_quantile(atoms: &[f64], p: f64) -> f64 {
    let n = atoms.len();
    if n == 1 {
        return atoms[0];
    }
    let pos = p * n as f64 - 0.5;
    let i = (pos.floor() as isize).clamp(0, n as isize - 2) as usize;
    let frac = pos - i as f64;
    atoms[i] + frac * (atoms[i + 1] - atoms[i])
}

#[derive(Clone, Debug, PartialEq)]
pub struct HydroConfig {
    pub dt: f64,
    pub n_mf: usize,
    pub mesh_x: usize,
    pub mesh_y: usize,
    pub eta_floor: f64,
    /// Real extent of mesh starts; `None` pads the initial support by `0.5`.
    pub x_range: Option<(f64, f64)>,
    /// Heights `[η_*, y_max]` of mesh starts (log-spaced).
    pub y_range: (f64, f64),
    /// Advance the mean-field system even when the kernel vanishes.
    pub track_mean_field: bool,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for HydroConfig {
    fn default() -> Self {
        HydroConfig {
            dt: 1e-3,
            n_mf: 2000,
            mesh_x: 201,
            mesh_y: 20,
            eta_floor: 1e-6,
            x_range: None,
            y_range: (1e-3, 1.0),
            track_mean_field: false,
            newton_tol: 1e-9,
            newton_max_iter: 50,
        }
    }
}

impl HydroConfig {
    fn validate(&self) -> Result<(), HydroError> {
        let bad = |m: &str| Err(HydroError::Config(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.mesh_x < 2 || self.mesh_y < 1 {
            return bad("mesh needs at least 2 columns and 1 row");
        }
        if !(self.eta_floor > 0.0) {
            return bad("eta_floor must be positive");
        }
        let (lo, hi) = self.y_range;
        if !(lo > self.eta_floor && hi >= lo) {
            return bad("mesh heights must satisfy eta_floor < y_min <= y_max");
        }
        if let Some((a, b)) = self.x_range {
            if !(b > a) {
                return bad("mesh x_range must be increasing");
            }
        }
        Ok(())
    }
}

/// One characteristic curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Characteristic {
    pub u: Complex64,
    pub z: Complex64,
    pub m: Complex64,
    pub s: f64,
    pub alive: bool,
    /// Time at which `Im z` would have fallen below the floor.
    pub crossing_time: Option<f64>,
}

impl Characteristic {
    pub fn start(u: Complex64, m0: Complex64) -> Self {
        Characteristic {
            u,
            z: u,
            m: m0,
            s: 0.0,
            alive: true,
            crossing_time: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Snapshot {
    positions: Vec<f64>,
    cut_drift: Vec<f64>,
    // every position lies inside the plateau of the cutoff
    inside: bool,
}

impl Snapshot {
    fn new(spec: &PotentialSpec, positions: Vec<f64>) -> Self {
        let cut_drift = positions.iter().map(|&x| spec.cut_drift(x)).collect();
        let inside = positions.iter().all(|x| x.abs() <= spec.plateau());
        Snapshot {
            positions,
            cut_drift,
            inside,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct StepRecord {
    s0: f64,
    dt: f64,
    // snapshot indices at s0, s0 + dt/2, s0 + dt
    snaps: Option<[usize; 3]>,
}

#[derive(Clone, Copy, Debug)]
struct Coverage {
    re_min: f64,
    re_max: f64,
    im_max: f64,
}

/// Result of inverting the flow at a query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowInverse {
    pub u: Complex64,
    pub z: Complex64,
    pub m: Complex64,
    pub residual: f64,
    pub iterations: usize,
}

/// Running extrema of the Stieltjes consistency checks over all mesh steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowDiagnostics {
    pub max_im_product: f64,
    pub min_im_m: f64,
}

/// Mesh of characteristics plus the mean-field history needed to replay them.
#[derive(Debug)]
pub struct HydroSolution {
    spec: PotentialSpec,
    initial: InitialTransform,
    config: HydroConfig,
    mesh: Vec<Characteristic>,
    mean_field: Vec<f64>,
    nonlocal: bool,
    t: f64,
    steps: Vec<StepRecord>,
    snapshots: Vec<Snapshot>,
    coverage: Coverage,
    diagnostics: FlowDiagnostics,
    queries: AtomicU64,
    coverage_misses: AtomicU64,
}

impl Clone for HydroSolution {
    fn clone(&self) -> Self {
        HydroSolution {
            spec: self.spec.clone(),
            initial: self.initial.clone(),
            config: self.config.clone(),
            mesh: self.mesh.clone(),
            mean_field: self.mean_field.clone(),
            nonlocal: self.nonlocal,
            t: self.t,
            steps: self.steps.clone(),
            snapshots: self.snapshots.clone(),
            coverage: self.coverage,
            diagnostics: self.diagnostics,
            queries: AtomicU64::new(self.queries.load(Ordering::Relaxed)),
            coverage_misses: AtomicU64::new(self.coverage_misses.load(Ordering::Relaxed)),
        }
    }
}

/// Right-hand side of the characteristic system.
#[inline]
fn flow_rhs(spec: &PotentialSpec, snap: Option<&Snapshot>, z: Complex64, m: Complex64) -> (Complex64, Complex64) {
    let k = spec.kernel_at(z);
    let dz = -m - 0.5 * k.ext;
    let mut dm = 0.5 * m * k.ext_dz;
    if let Some(s) = snap {
        if !s.positions.is_empty() && !(s.inside && spec.kernel_vanishes_at(z)) {
            let mut acc = Complex64::new(0.0, 0.0);
            for (&x, &f) in s.positions.iter().zip(&s.cut_drift) {
                acc += k.eval(x, f);
            }
            dm += acc / s.positions.len() as f64;
        }
    }
    (dz, dm)
}

fn mesh_starts(x_range: (f64, f64), y_range: (f64, f64), nx: usize, ny: usize) -> Vec<Complex64> {
    let (x0, x1) = x_range;
    let (y0, y1) = y_range;
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        let y = if ny == 1 {
            y0
        } else {
            y0 * (y1 / y0).powf(iy as f64 / (ny - 1) as f64)
        };
        for ix in 0..nx {
            let x = x0 + (x1 - x0) * ix as f64 / (nx - 1) as f64;
            out.push(Complex64::new(x, y));
        }
    }
    out
}

impl HydroSolution {
    pub fn new(spec: PotentialSpec, initial: InitialTransform, config: HydroConfig) -> Result<Self, HydroError> {
        let mean_field = initial.mean_field_points(config.n_mf);
        Self::with_mean_field(spec, initial, config, mean_field)
    }

    /// Builds a solution with an explicit initial mean-field discretisation.
    pub fn with_mean_field(
        spec: PotentialSpec,
        initial: InitialTransform,
        config: HydroConfig,
        mut mean_field: Vec<f64>,
    ) -> Result<Self, HydroError> {
        config.validate()?;
        mean_field.sort_by(f64::total_cmp);
        let x_range = config.x_range.unwrap_or_else(|| match initial.support() {
            Some((lo, hi)) => (lo - 0.5, hi + 0.5),
            None => (-1.0, 1.0),
        });
        // with affine V' the kernel only matters for starts outside the plateau square
        let plateau = spec.plateau();
        let leaves_plateau = config.y_range.1 > plateau || x_range.0 < -plateau || x_range.1 > plateau;
        let nonlocal = !spec.nonlocal_vanishes() || config.track_mean_field || leaves_plateau;
        let mesh = mesh_starts(x_range, config.y_range, config.mesh_x, config.mesh_y)
            .into_iter()
            .map(|u| Characteristic::start(u, initial.eval(u)))
            .collect();
        let snapshots = if nonlocal {
            vec![Snapshot::new(&spec, mean_field.clone())]
        } else {
            Vec::new()
        };
        let mut sol = HydroSolution {
            spec,
            initial,
            config,
            mesh,
            mean_field,
            nonlocal,
            t: 0.0,
            steps: Vec::new(),
            snapshots,
            coverage: Coverage {
                re_min: 0.0,
                re_max: 0.0,
                im_max: 0.0,
            },
            diagnostics: FlowDiagnostics {
                max_im_product: 0.0,
                min_im_m: f64::INFINITY,
            },
            queries: AtomicU64::new(0),
            coverage_misses: AtomicU64::new(0),
        };
        let mesh = sol.mesh.clone();
        sol.observe(&mesh);
        sol.update_coverage();
        Ok(sol)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn spec(&self) -> &PotentialSpec {
        &self.spec
    }

    pub fn initial(&self) -> &InitialTransform {
        &self.initial
    }

    pub fn config(&self) -> &HydroConfig {
        &self.config
    }

    pub fn mesh(&self) -> &[Characteristic] {
        &self.mesh
    }

    pub fn mean_field(&self) -> &[f64] {
        &self.mean_field
    }

    /// Whether the nonlocal kernel term is being integrated.
    pub fn nonlocal_active(&self) -> bool {
        self.nonlocal
    }

    pub fn diagnostics(&self) -> FlowDiagnostics {
        self.diagnostics
    }

    /// `(re_min, re_max, im_max)` of the region where `evaluate_m` accepts queries.
    pub fn coverage_bounds(&self) -> (f64, f64, f64) {
        (self.coverage.re_min, self.coverage.re_max, self.coverage.im_max)
    }

    /// Real extent of the live characteristics' current positions.
    pub fn alive_real_extent(&self) -> Option<(f64, f64)> {
        self.mesh.iter().filter(|c| c.alive).fold(None, |acc, c| match acc {
            None => Some((c.z.re, c.z.re)),
            Some((lo, hi)) => Some((lo.min(c.z.re), hi.max(c.z.re))),
        })
    }

    /// `m_0` at `u`.
    pub fn m0(&self, u: Complex64) -> Complex64 {
        self.initial.eval(u)
    }

    /// Fraction of `evaluate_m` queries rejected for lack of coverage.
    pub fn coverage_failure_rate(&self) -> f64 {
        let q = self.queries.load(Ordering::Relaxed);
        if q == 0 {
            0.0
        } else {
            self.coverage_misses.load(Ordering::Relaxed) as f64 / q as f64
        }
    }

    fn observe(&mut self, chars: &[Characteristic]) {
        for c in chars.iter().filter(|c| c.alive) {
            self.diagnostics.max_im_product = self.diagnostics.max_im_product.max(c.m.im * c.z.im);
            self.diagnostics.min_im_m = self.diagnostics.min_im_m.min(c.m.im);
        }
    }

    fn update_coverage(&mut self) {
        let mut cov = Coverage {
            re_min: f64::INFINITY,
            re_max: f64::NEG_INFINITY,
            im_max: 0.0,
        };
        for c in &self.mesh {
            cov.re_min = cov.re_min.min(c.z.re);
            cov.re_max = cov.re_max.max(c.z.re);
            if c.alive {
                cov.im_max = cov.im_max.max(c.z.im);
            }
        }
        self.coverage = cov;
    }

    fn current_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    /// `(dz/ds, dm/ds)` for a live characteristic at the current time.
    pub fn rhs(&self, c: &Characteristic) -> Result<(Complex64, Complex64), HydroError> {
        if !c.alive {
            return Err(HydroError::Dead(c.u));
        }
        Ok(flow_rhs(&self.spec, self.current_snapshot(), c.z, c.m))
    }

    // RK4 on the mean-field ODE over `span`, sub-stepped for stability.
    fn evolve_mean_field(&self, x: &mut Vec<f64>, span: f64) -> Result<(), HydroError> {
        let n = x.len();
        if n == 0 {
            return Ok(());
        }
        let inv_n = 1.0 / n as f64;
        let mut stiff: f64 = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                if j != i {
                    let d = x[i] - x[j];
                    s += 1.0 / (d * d);
                }
            }
            stiff = stiff.max(2.0 * s * inv_n + 0.5 * self.spec.v_second(x[i]).abs());
        }
        let sub = ((span * stiff / 2.0).ceil() as usize).max(1);
        let h = span / sub as f64;
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for _ in 0..sub {
            dbm_sde::deterministic_drift(x, &self.spec, &mut k1)?;
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            dbm_sde::deterministic_drift(&tmp, &self.spec, &mut k2)?;
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            dbm_sde::deterministic_drift(&tmp, &self.spec, &mut k3)?;
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            dbm_sde::deterministic_drift(&tmp, &self.spec, &mut k4)?;
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            x.sort_by(f64::total_cmp);
        }
        Ok(())
    }

    fn push_snapshot(&mut self, positions: Vec<f64>) -> usize {
        self.snapshots.push(Snapshot::new(&self.spec, positions));
        self.snapshots.len() - 1
    }

    fn snaps(&self, rec: &StepRecord) -> [Option<&Snapshot>; 3] {
        match rec.snaps {
            Some([a, b, c]) => [Some(&self.snapshots[a]), Some(&self.snapshots[b]), Some(&self.snapshots[c])],
            None => [None, None, None],
        }
    }

    // One RK4 step; `None` when a stage or the end point drops below the floor.
    fn rk4(&self, rec: &StepRecord, z: Complex64, m: Complex64) -> Option<(Complex64, Complex64)> {
        let floor = self.config.eta_floor;
        let [s0, s1, s2] = self.snaps(rec);
        let h = rec.dt;
        let ok = |z: Complex64, m: Complex64| z.im > floor && z.re.is_finite() && z.im.is_finite() && m.re.is_finite() && m.im.is_finite();
        let (a1, b1) = flow_rhs(&self.spec, s0, z, m);
        let (z2, m2) = (z + 0.5 * h * a1, m + 0.5 * h * b1);
        if !ok(z2, m2) {
            return None;
        }
        let (a2, b2) = flow_rhs(&self.spec, s1, z2, m2);
        let (z3, m3) = (z + 0.5 * h * a2, m + 0.5 * h * b2);
        if !ok(z3, m3) {
            return None;
        }
        let (a3, b3) = flow_rhs(&self.spec, s1, z3, m3);
        let (z4, m4) = (z + h * a3, m + h * b3);
        if !ok(z4, m4) {
            return None;
        }
        let (a4, b4) = flow_rhs(&self.spec, s2, z4, m4);
        let zn = z + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        let mn = m + h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        if !ok(zn, mn) {
            return None;
        }
        Some((zn, mn))
    }

    fn step_characteristic(&self, rec: &StepRecord, c: &mut Characteristic) {
        if !c.alive {
            return;
        }
        match self.rk4(rec, c.z, c.m) {
            Some((z, m)) => {
                c.z = z;
                c.m = m;
                c.s = rec.s0 + rec.dt;
            }
            None => {
                c.alive = false;
                // linear estimate of when Im z reaches the floor
                let (dz, _) = flow_rhs(&self.spec, self.snaps(rec)[0], c.z, c.m);
                let rate = -dz.im;
                let frac = if rate > 0.0 {
                    ((c.z.im - self.config.eta_floor) / (rate * rec.dt)).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                c.crossing_time = Some(rec.s0 + frac * rec.dt);
            }
        }
    }

    /// Advances every live characteristic (and the mean field) by one RK4 step.
    pub fn advance(&mut self, dt: f64) -> Result<(), HydroError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(HydroError::Config(format!("dt must be positive, got {dt}")));
        }
        let snaps = if self.nonlocal {
            let start = self.snapshots.len() - 1;
            let mut x = self.mean_field.clone();
            self.evolve_mean_field(&mut x, 0.5 * dt)?;
            let mid = self.push_snapshot(x.clone());
            self.evolve_mean_field(&mut x, 0.5 * dt)?;
            let end = self.push_snapshot(x.clone());
            self.mean_field = x;
            Some([start, mid, end])
        } else {
            None
        };
        let rec = StepRecord { s0: self.t, dt, snaps };
        let mut mesh = std::mem::take(&mut self.mesh);
        mesh.par_iter_mut().for_each(|c| self.step_characteristic(&rec, c));
        self.observe(&mesh);
        self.mesh = mesh;
        self.steps.push(rec);
        self.t += dt;
        self.update_coverage();
        Ok(())
    }

    /// Advances with the configured `dt` until `t_end`, shortening the last step.
    pub fn advance_to(&mut self, t_end: f64) -> Result<(), HydroError> {
        let dt = self.config.dt;
        while self.t < t_end - 1e-12 * dt {
            let h = dt.min(t_end - self.t);
            self.advance(h)?;
        }
        Ok(())
    }

    /// Replays the characteristic started at `u` through the recorded history.
    /// Returns the state after each step (the first entry is the start).
    pub fn trace(&self, u: Complex64) -> Result<Vec<Characteristic>, HydroError> {
        if !(u.im > 0.0) {
            return Err(HydroError::StartPoint(u));
        }
        let mut c = Characteristic::start(u, self.m0(u));
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(c);
        for rec in &self.steps {
            self.step_characteristic(rec, &mut c);
            out.push(c);
            if !c.alive {
                break;
            }
        }
        Ok(out)
    }

    /// `(z_t(u), m_t(z_t(u)))`, or `None` if the flow leaves the upper half plane.
    pub fn flow(&self, u: Complex64) -> Option<(Complex64, Complex64)> {
        if !(u.im > self.config.eta_floor) {
            return None;
        }
        let (mut z, mut m) = (u, self.m0(u));
        for rec in &self.steps {
            let (zn, mn) = self.rk4(rec, z, m)?;
            z = zn;
            m = mn;
        }
        Some((z, m))
    }

    fn check_coverage(&self, w: Complex64) -> Result<(), HydroError> {
        if !(w.im > self.config.eta_floor) {
            return Err(HydroError::BelowFloor(w, self.config.eta_floor));
        }
        let c = self.coverage;
        if self.t > 0.0 && (w.re < c.re_min || w.re > c.re_max || w.im > c.im_max) {
            return Err(HydroError::Coverage {
                w,
                re_min: c.re_min,
                re_max: c.re_max,
                im_max: c.im_max,
            });
        }
        Ok(())
    }

    fn seed(&self, w: Complex64) -> Option<Complex64> {
        self.mesh
            .iter()
            .filter(|c| c.alive)
            .map(|c| {
                let d = (c.z - w).norm_sqr() / (c.z.im * w.im);
                (d, c.u)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, u)| u)
    }

    /// Solves `z_t(u) = w` for `u`.
    pub fn invert(&self, w: Complex64) -> Result<FlowInverse, HydroError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        if let Err(e) = self.check_coverage(w) {
            if matches!(e, HydroError::Coverage { .. }) {
                self.coverage_misses.fetch_add(1, Ordering::Relaxed);
            }
            return Err(e);
        }
        if self.steps.is_empty() {
            return Ok(FlowInverse {
                u: w,
                z: w,
                m: self.m0(w),
                residual: 0.0,
                iterations: 0,
            });
        }
        let tol = self.config.newton_tol;
        let fail = |best: f64| HydroError::Extrapolation { w, best_residual: best };
        let mut u = self.seed(w).ok_or_else(|| fail(f64::INFINITY))?;
        let (mut z, mut m) = self.flow(u).ok_or_else(|| fail(f64::INFINITY))?;
        let mut res = (z - w).norm();
        for iter in 0..self.config.newton_max_iter {
            if res <= tol {
                return Ok(FlowInverse { u, z, m, residual: res, iterations: iter });
            }
            let delta = 1e-7 * u.im.min(1.0);
            let (zx, _) = self.flow(u + delta).ok_or_else(|| fail(res))?;
            let jx = (zx - z) / delta;
            let jy = match self.flow(u + Complex64::new(0.0, delta)) {
                Some((zy, _)) => (zy - z) / delta,
                None => {
                    let (zy, _) = self.flow(u - Complex64::new(0.0, delta)).ok_or_else(|| fail(res))?;
                    (z - zy) / delta
                }
            };
            // [jx.re jy.re; jx.im jy.im] [du.re; du.im] = -(z - w)
            let det = jx.re * jy.im - jy.re * jx.im;
            if det == 0.0 || !det.is_finite() {
                return Err(fail(res));
            }
            let r = w - z;
            let du = Complex64::new((r.re * jy.im - jy.re * r.im) / det, (jx.re * r.im - r.re * jx.im) / det);
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial = u + lambda * du;
                if trial.im > 0.0 {
                    if let Some((zt, mt)) = self.flow(trial) {
                        let rt = (zt - w).norm();
                        if rt < res {
                            u = trial;
                            z = zt;
                            m = mt;
                            res = rt;
                            accepted = true;
                            break;
                        }
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                return if res <= tol {
                    Ok(FlowInverse { u, z, m, residual: res, iterations: iter })
                } else {
                    Err(fail(res))
                };
            }
        }
        if res <= tol {
            Ok(FlowInverse {
                u,
                z,
                m,
                residual: res,
                iterations: self.config.newton_max_iter,
            })
        } else {
            Err(fail(res))
        }
    }

    /// `m_t(w)` via flow inversion.
    pub fn evaluate_m(&self, w: Complex64) -> Result<Complex64, HydroError> {
        self.invert(w).map(|inv| inv.m)
    }

    /// Doubles the mesh resolution in both directions and replays the new
    /// characteristics through the recorded history.
    pub fn refine(&mut self) {
        let x_range = self.config.x_range.unwrap_or_else(|| match self.initial.support() {
            Some((lo, hi)) => (lo - 0.5, hi + 0.5),
            None => (-1.0, 1.0),
        });
        self.config.mesh_x = 2 * self.config.mesh_x - 1;
        self.config.mesh_y = 2 * self.config.mesh_y.max(1) - 1;
        let starts = mesh_starts(x_range, self.config.y_range, self.config.mesh_x, self.config.mesh_y.max(1));
        let mesh: Vec<Characteristic> = starts
            .par_iter()
            .map(|&u| {
                let mut c = Characteristic::start(u, self.m0(u));
                for rec in &self.steps {
                    self.step_characteristic(rec, &mut c);
                }
                c
            })
            .collect();
        self.observe(&mesh);
        self.mesh = mesh;
        self.update_coverage();
        self.queries.store(0, Ordering::Relaxed);
        self.coverage_misses.store(0, Ordering::Relaxed);
    }

    /// Mesh dump with header `s,re_u,im_u,re_z,im_z,re_m,im_m,alive`.
    pub fn write_mesh_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "s,re_u,im_u,re_z,im_z,re_m,im_m,alive")?;
        for c in &self.mesh {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.s, c.u.re, c.u.im, c.z.re, c.z.im, c.m.re, c.m.im, c.alive
            )?;
        }
        Ok(())
    }
}

/// Closed-form characteristic state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleFlow {
    pub z: Complex64,
    pub m: Complex64,
    /// Set when `Im z <= 0`, i.e. the flow has left the upper half plane.
    pub crossed: bool,
}

/// `V ≡ 0`: `z_t = u - t m_0(u)`, `m` constant along the flow.
pub fn free_flow_oracle(
    u: Complex64,
    t: f64,
    m0: impl Fn(Complex64) -> Complex64,
) -> Result<OracleFlow, HydroError> {
    if !(u.im > 0.0) {
        return Err(HydroError::StartPoint(u));
    }
    let m = m0(u);
    let z = u - t * m;
    Ok(OracleFlow { z, m, crossed: z.im <= 0.0 })
}

/// `V = x²/2` inside the cutoff: `z_t = e^{-t/2}(u - m_0(u)(e^t - 1))`, `m_t = e^{t/2} m_0(u)`.
pub fn quadratic_flow_oracle(
    u: Complex64,
    t: f64,
    m0: impl Fn(Complex64) -> Complex64,
) -> Result<OracleFlow, HydroError> {
    if !(u.im > 0.0) {
        return Err(HydroError::StartPoint(u));
    }
    let m0u = m0(u);
    let z = (-0.5 * t).exp() * (u - m0u * t.exp_m1());
    let m = (0.5 * t).exp() * m0u;
    Ok(OracleFlow { z, m, crossed: z.im <= 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn single(spec: PotentialSpec, m0: InitialTransform, u: Complex64) -> HydroSolution {
        let cfg = HydroConfig {
            mesh_x: 2,
            mesh_y: 1,
            x_range: Some((u.re, u.re + 1.0)),
            y_range: (u.im, u.im),
            n_mf: 0,
            ..HydroConfig::default()
        };
        HydroSolution::new(spec, m0, cfg).unwrap()
    }

    #[test]
    fn rhs_examples() {
        let u = c(0.3, 0.7);
        let m = c(-0.2, 0.9);
        let sol = single(PotentialSpec::zero(), InitialTransform::custom(move |_| m), u);
        let (dz, dm) = sol.rhs(&sol.mesh()[0]).unwrap();
        assert_eq!(dz, -m);
        assert_eq!(dm, c(0.0, 0.0));

        let sol = single(PotentialSpec::quadratic(), InitialTransform::custom(move |_| m), u);
        let (dz, dm) = sol.rhs(&sol.mesh()[0]).unwrap();
        assert!((dz - (-m - u / 2.0)).norm() < 1e-15);
        assert!((dm - m / 2.0).norm() < 1e-15);
    }

    #[test]
    fn rhs_quartic_composes_kernels() {
        let spec = PotentialSpec::quartic();
        let cfg = HydroConfig {
            mesh_x: 2,
            mesh_y: 1,
            x_range: Some((0.0, 1.0)),
            y_range: (1.0, 1.0),
            ..HydroConfig::default()
        };
        let sol = HydroSolution::with_mean_field(
            spec.clone(),
            InitialTransform::custom(|_| Complex64::i()),
            cfg,
            vec![0.0],
        )
        .unwrap();
        let ch = sol.mesh()[0];
        assert_eq!(ch.z, Complex64::i());
        let (_, dm) = sol.rhs(&ch).unwrap();
        let (_, dzv) = spec.extended_v_prime_with_dz(Complex64::i());
        let expect = Complex64::i() * dzv / 2.0 + spec.kernel_g(Complex64::i(), 0.0).unwrap();
        assert!((dm - expect).norm() < 1e-14);
    }

    #[test]
    fn dead_characteristic_rhs_is_an_error() {
        let mut ch = Characteristic::start(c(0.0, 1.0), c(0.0, 1.0));
        ch.alive = false;
        let sol = single(PotentialSpec::zero(), InitialTransform::Atom { at: 0.0 }, c(0.0, 1.0));
        assert!(matches!(sol.rhs(&ch), Err(HydroError::Dead(_))));
    }

    #[test]
    fn constant_transform_free_flow_is_linear() {
        let u = c(0.2, 1.0);
        let m0 = c(0.1, 0.3);
        let mut sol = single(PotentialSpec::zero(), InitialTransform::custom(move |_| m0), u);
        let dt = 1e-2;
        for _ in 0..17 {
            sol.advance(dt).unwrap();
        }
        let ch = sol.mesh()[0];
        assert!((ch.z - (u - 17.0 * dt * m0)).norm() < 1e-14);
        assert_eq!(ch.m, m0);
    }

    #[test]
    fn quadratic_atom_matches_closed_form() {
        let u = Complex64::i();
        let mut sol = single(PotentialSpec::quadratic(), InitialTransform::Atom { at: 0.0 }, u);
        sol.advance_to(0.2).unwrap();
        let o = quadratic_flow_oracle(u, 0.2, |u| -1.0 / u).unwrap();
        let ch = sol.mesh()[0];
        assert!((ch.z - o.z).norm() < 1e-8);
        assert!((ch.m - o.m).norm() < 1e-8);
        assert!((o.m.im - 0.1f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn free_oracle_examples() {
        let o = free_flow_oracle(c(0.4, 2.0), 3.0, |_| c(0.0, 0.0)).unwrap();
        assert_eq!((o.z, o.m, o.crossed), (c(0.4, 2.0), c(0.0, 0.0), false));
        let o = free_flow_oracle(Complex64::i(), 0.5, |u| -1.0 / u).unwrap();
        assert!((o.z - c(0.0, 0.5)).norm() < 1e-15 && (o.m - Complex64::i()).norm() < 1e-15);
        let o = free_flow_oracle(Complex64::i(), 1.0, |u| -1.0 / u).unwrap();
        assert!(o.crossed);
        assert!(o.z.norm() < 1e-15);
        assert!(free_flow_oracle(c(0.0, -1.0), 1.0, |u| u).is_err());
    }

    #[test]
    fn t_zero_evaluation_is_m0() {
        let sol = HydroSolution::new(
            PotentialSpec::quadratic(),
            InitialTransform::Semicircle { center: 0.0, radius: 2.0 },
            HydroConfig { n_mf: 0, ..HydroConfig::default() },
        )
        .unwrap();
        let w = c(0.3, 0.05);
        assert_eq!(sol.evaluate_m(w).unwrap(), sol.m0(w));
        assert!(matches!(sol.evaluate_m(c(0.0, 1e-7)), Err(HydroError::BelowFloor(..))));
    }

    #[test]
    fn freezing_records_crossing_time() {
        // atom under V ≡ 0 from u = i crosses the axis at t = 1
        let mut sol = single(PotentialSpec::zero(), InitialTransform::Atom { at: 0.0 }, Complex64::i());
        sol.advance_to(1.1).unwrap();
        let ch = sol.mesh()[0];
        assert!(!ch.alive);
        let tc = ch.crossing_time.unwrap();
        assert!((tc - 1.0).abs() < 2e-3, "{tc}");
        assert!(ch.z.im > 0.0);
    }

    #[test]
    fn interpolated_quantiles_are_distinct() {
        let t = InitialTransform::empirical(vec![-1.0, 0.0, 0.5, 2.0]);
        let p = t.mean_field_points(40);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!((p[5] - interpolated_quantile(&[-1.0, 0.0, 0.5, 2.0], 5.5 / 40.0)).abs() < 1e-15);
    }
}
