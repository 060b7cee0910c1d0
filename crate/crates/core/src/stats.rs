//! Local law, rigidity and mesoscopic CLT checks.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{HydroError, HydroSolution};
use crate::dbm_sde::ParticleConfiguration;
use crate::measure::{self, MeasureError, QuantileTable};
use crate::quadrature::{adaptive_simpson, adaptive_simpson_rel, composite_gauss};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no probe point of the candidate grid lies in the spectral domain ({candidates} candidates)")]
    EmptyDomain { candidates: usize },
    #[error("need at least {need} samples, got {got}")]
    SampleSize { got: usize, need: usize },
    #[error("probe {probe} violates {violated}")]
    Geometry { probe: Complex64, violated: String },
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Hydro(#[from] HydroError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// `M = (log N)^{2 + 2δ}`.
pub fn control_parameter(n: usize, delta: f64) -> f64 {
    (n as f64).ln().powf(2.0 + 2.0 * delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDomainParams {
    pub n: usize,
    pub delta: f64,
    pub m: f64,
    pub k: f64,
    pub c_exp: f64,
}

impl SpectralDomainParams {
    pub fn new(n: usize, delta: f64) -> Result<Self, StatsError> {
        if n < 2 {
            return Err(StatsError::Config(format!("need N >= 2, got {n}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(StatsError::Config(format!("delta must be positive, got {delta}")));
        }
        Ok(SpectralDomainParams {
            n,
            delta,
            m: control_parameter(n, delta),
            k: 10.0,
            c_exp: 3.0,
        })
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.k = k;
        self
    }

    pub fn with_c_exp(mut self, c: f64) -> Self {
        self.c_exp = c;
        self
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.m != control_parameter(self.n, self.delta) {
            return Err(StatsError::Config(format!(
                "stored M = {} does not match (log N)^(2+2δ) = {}",
                self.m,
                control_parameter(self.n, self.delta)
            )));
        }
        if !(self.c_exp >= 1.0) {
            return Err(StatsError::Config(format!("c_exp must be >= 1, got {}", self.c_exp)));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(StatsError::Config(format!("K must be finite and >= 0, got {}", self.k)));
        }
        Ok(())
    }

    pub fn log_n(&self) -> f64 {
        (self.n as f64).ln()
    }

    /// `M log N`.
    pub fn m_log_n(&self) -> f64 {
        self.m * self.log_n()
    }

    /// Index window `⌈M log N⌉` used by the rigidity check.
    pub fn window(&self) -> usize {
        self.m_log_n().ceil() as usize
    }

    /// Hard lower height `e^{Ks} N^{-c}`.
    pub fn height_floor(&self, s: f64) -> f64 {
        (self.k * s).exp() * (self.n as f64).powf(-self.c_exp)
    }

    /// `e^{Ks} M log N / N`; the domain requires `Im w · Im m_s(w)` above this.
    pub fn local_scale(&self, s: f64) -> f64 {
        (self.k * s).exp() * self.m_log_n() / self.n as f64
    }
}

/// Whether `w` lies in the spectral domain at time `s` for cutoff radius `b_cut`.
pub fn in_domain(
    params: &SpectralDomainParams,
    solution: &HydroSolution,
    w: Complex64,
    s: f64,
    b_cut: f64,
) -> Result<bool, StatsError> {
    if !(w.im > 0.0) {
        return Err(StatsError::Config(format!("probe {w} is not in the upper half plane")));
    }
    let top = 3.0 * b_cut - s;
    if w.im < params.height_floor(s) || w.im > top || w.re.abs() > top {
        return Ok(false);
    }
    let m = solution.evaluate_m(w)?;
    Ok(m.im > 0.0 && w.im >= params.local_scale(s) / m.im)
}

/// Rectangular candidate lattice with log-spaced heights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub re: (f64, f64),
    pub nx: usize,
    pub im: (f64, f64),
    pub ny: usize,
}

impl ProbeGrid {
    /// Energies over the live mesh extent, heights from the hard floor to `3𝔟 - s`.
    pub fn covering(solution: &HydroSolution, params: &SpectralDomainParams, s: f64) -> Self {
        let top = 3.0 * solution.spec().b_cut() - s;
        let (lo, hi) = solution.alive_real_extent().unwrap_or((-1.0, 1.0));
        let (_, _, im_max) = solution.coverage_bounds();
        let im_hi = if solution.t() == 0.0 { top } else { top.min(im_max) };
        ProbeGrid {
            re: (lo.max(-top), hi.min(top)),
            nx: 41,
            im: (params.height_floor(s).max(solution.config().eta_floor * 2.0), im_hi),
            ny: 40,
        }
    }

    pub fn points(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for iy in 0..self.ny {
            let y = if self.ny == 1 {
                self.im.0
            } else {
                self.im.0 * (self.im.1 / self.im.0).powf(iy as f64 / (self.ny - 1) as f64)
            };
            for ix in 0..self.nx {
                let x = if self.nx == 1 {
                    self.re.0
                } else {
                    self.re.0 + (self.re.1 - self.re.0) * ix as f64 / (self.nx - 1) as f64
                };
                out.push(Complex64::new(x, y));
            }
        }
        out
    }
}

/// Probe points with cached `m_t` values.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLawProbes {
    pub probes: Vec<Complex64>,
    pub m: Vec<Complex64>,
    pub candidates: usize,
    pub in_domain: usize,
}

/// Local-law outcome, for one run or pooled over an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalLawReport {
    pub max_r: f64,
    pub pass_fraction: f64,
    pub worst: (f64, f64),
    pub pairs: usize,
    pub passes: usize,
    pub threshold: f64,
}

impl LocalLawProbes {
    /// Caches `m_t` at the given points without any domain filtering.
    pub fn at_points(solution: &HydroSolution, probes: Vec<Complex64>) -> Result<Self, StatsError> {
        let m = probes
            .iter()
            .map(|&w| solution.evaluate_m(w))
            .collect::<Result<Vec<_>, _>>()?;
        let n = probes.len();
        Ok(LocalLawProbes {
            probes,
            m,
            candidates: n,
            in_domain: n,
        })
    }

    /// Filters `grid` to the spectral domain at the solution's time and keeps
    /// `count` evenly spread points. Candidates where `m_t` cannot be
    /// evaluated are treated as outside.
    pub fn build(
        params: &SpectralDomainParams,
        solution: &HydroSolution,
        grid: &ProbeGrid,
        count: usize,
    ) -> Result<Self, StatsError> {
        params.validate()?;
        let s = solution.t();
        let b = solution.spec().b_cut();
        let candidates = grid.points();
        let mut inside = Vec::new();
        for &w in &candidates {
            match in_domain(params, solution, w, s, b) {
                Ok(true) => inside.push(w),
                Ok(false) | Err(StatsError::Hydro(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if inside.is_empty() {
            return Err(StatsError::EmptyDomain {
                candidates: candidates.len(),
            });
        }
        let k = inside.len();
        let picked: Vec<Complex64> = if k <= count {
            inside.clone()
        } else {
            (0..count).map(|j| inside[j * k / count]).collect()
        };
        let mut probes = Self::at_points(solution, picked)?;
        probes.candidates = candidates.len();
        probes.in_domain = k;
        Ok(probes)
    }

    /// `r(w) = N Im w |m̃_t(w) - m_t(w)|` at every probe.
    pub fn residuals(&self, config: &ParticleConfiguration) -> Vec<f64> {
        let n = config.n() as f64;
        self.probes
            .iter()
            .zip(&self.m)
            .map(|(&w, &m)| n * w.im * (measure::stieltjes_of(config.positions(), w) - m).norm())
            .collect()
    }

    pub fn report(&self, config: &ParticleConfiguration, threshold: f64) -> LocalLawReport {
        pool_local_law(&[self.residuals(config)], &self.probes, threshold)
    }
}

/// Pools per-run residual vectors (same probes) into one report.
pub fn pool_local_law(residuals: &[Vec<f64>], probes: &[Complex64], threshold: f64) -> LocalLawReport {
    let mut max_r = f64::NEG_INFINITY;
    let mut worst = (f64::NAN, f64::NAN);
    let mut passes = 0;
    let mut pairs = 0;
    for run in residuals {
        for (&r, w) in run.iter().zip(probes) {
            pairs += 1;
            if r <= threshold {
                passes += 1;
            }
            if r > max_r {
                max_r = r;
                worst = (w.re, w.im);
            }
        }
    }
    LocalLawReport {
        max_r,
        pass_fraction: if pairs == 0 { 0.0 } else { passes as f64 / pairs as f64 },
        worst,
        pairs,
        passes,
        threshold,
    }
}

/// Local law on the default candidate lattice with 200 probes and threshold `M`.
pub fn local_law_report(
    config: &ParticleConfiguration,
    solution: &HydroSolution,
    params: &SpectralDomainParams,
) -> Result<LocalLawReport, StatsError> {
    check_same_time(config, solution)?;
    let grid = ProbeGrid::covering(solution, params, solution.t());
    let probes = LocalLawProbes::build(params, solution, &grid, 200)?;
    Ok(probes.report(config, params.m))
}

fn check_same_time(config: &ParticleConfiguration, solution: &HydroSolution) -> Result<(), StatsError> {
    if (config.time() - solution.t()).abs() > 1e-9 * (1.0 + solution.t()) {
        return Err(StatsError::Config(format!(
            "configuration time {} differs from hydro time {}",
            config.time(),
            solution.t()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidityReport {
    pub n: usize,
    pub window: usize,
    pub floor: f64,
    /// Violations over all indices (out-of-range comparison locations are infinite).
    pub violations: usize,
    /// Indices with `window <= i <= N - window`.
    pub bulk_indices: usize,
    pub bulk_violations: usize,
    /// Largest `d_i = #{j : γ_j <= λ_i} - i`.
    pub max_index_displacement: i64,
    /// Smallest `d_i`.
    pub min_index_displacement: i64,
    pub max_abs_index_displacement: usize,
}

/// Checks `γ_{i-w} - N^{1-c} <= λ_i <= γ_{i+w} + N^{1-c}` with `w = ⌈M log N⌉`.
pub fn rigidity_report(
    config: &ParticleConfiguration,
    table: &QuantileTable,
    params: &SpectralDomainParams,
) -> Result<RigidityReport, StatsError> {
    let n = config.n();
    if table.n() != n {
        return Err(StatsError::Length {
            expected: n,
            got: table.n(),
        });
    }
    let w = params.window() as i64;
    let floor = (n as f64).powf(1.0 - params.c_exp);
    let lambda = config.positions();
    let mut rep = RigidityReport {
        n,
        window: w as usize,
        floor,
        violations: 0,
        bulk_indices: 0,
        bulk_violations: 0,
        max_index_displacement: i64::MIN,
        min_index_displacement: i64::MAX,
        max_abs_index_displacement: 0,
    };
    for (k, &l) in lambda.iter().enumerate() {
        let i = k as i64 + 1;
        let lower = table.get(i - w) - floor;
        let upper = table.get(i + w) + floor;
        let bad = l < lower || l > upper;
        let bulk = i >= w && i <= n as i64 - w;
        if bulk {
            rep.bulk_indices += 1;
        }
        if bad {
            rep.violations += 1;
            if bulk {
                rep.bulk_violations += 1;
            }
        }
        let d = table.gamma.partition_point(|&g| g <= l) as i64 - i;
        rep.max_index_displacement = rep.max_index_displacement.max(d);
        rep.min_index_displacement = rep.min_index_displacement.min(d);
        rep.max_abs_index_displacement = rep.max_abs_index_displacement.max(d.unsigned_abs() as usize);
    }
    Ok(rep)
}

/// How probe geometry is enforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryPolicy {
    /// `10 M²/N <= Im z <= t/(10 M log N)`.
    Strict,
    /// `1/N <= Im z <= t`.
    DeskScale,
    Unchecked,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeGeometry {
    pub e0: f64,
    pub r: f64,
    pub policy: GeometryPolicy,
}

impl Default for ProbeGeometry {
    fn default() -> Self {
        ProbeGeometry {
            e0: 0.0,
            r: 0.5,
            policy: GeometryPolicy::DeskScale,
        }
    }
}

impl ProbeGeometry {
    /// Height window `(lo, hi)` for `N` particles at time `t`, if checked.
    pub fn height_window(&self, params: &SpectralDomainParams, t: f64) -> Option<(f64, f64)> {
        let n = params.n as f64;
        match self.policy {
            GeometryPolicy::Strict => Some((10.0 * params.m * params.m / n, t / (10.0 * params.m_log_n()))),
            GeometryPolicy::DeskScale => Some((1.0 / n, t)),
            GeometryPolicy::Unchecked => None,
        }
    }

    pub fn check(&self, z: Complex64, params: &SpectralDomainParams, t: f64) -> Result<(), StatsError> {
        let Some((lo, hi)) = self.height_window(params, t) else {
            return Ok(());
        };
        let fail = |v: String| Err(StatsError::Geometry { probe: z, violated: v });
        if (z.re - self.e0).abs() > self.r / 2.0 {
            return fail(format!("|Re z - {}| <= {}", self.e0, self.r / 2.0));
        }
        if z.im < lo {
            return fail(format!("Im z >= {lo:e}"));
        }
        if z.im > hi {
            return fail(format!("Im z <= {hi:e}"));
        }
        Ok(())
    }
}

/// `Γ_t(z_j) = N Im z_j (m̃_t(z_j) - m_t(z_j))` for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSample {
    pub probes: Vec<Complex64>,
    pub gamma: Vec<Complex64>,
    pub run_id: usize,
}

/// Probes with cached `m_t` for repeated field evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldProbes {
    probes: Vec<Complex64>,
    m: Vec<Complex64>,
}

impl FieldProbes {
    pub fn new(
        solution: &HydroSolution,
        probes: Vec<Complex64>,
        geometry: &ProbeGeometry,
        params: &SpectralDomainParams,
    ) -> Result<Self, StatsError> {
        for &z in &probes {
            geometry.check(z, params, solution.t())?;
        }
        let m = probes
            .iter()
            .map(|&z| solution.evaluate_m(z))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FieldProbes { probes, m })
    }

    /// Uses the given values of `m_t` directly.
    pub fn with_values(probes: Vec<Complex64>, m: Vec<Complex64>) -> Result<Self, StatsError> {
        if probes.len() != m.len() {
            return Err(StatsError::Length {
                expected: probes.len(),
                got: m.len(),
            });
        }
        Ok(FieldProbes { probes, m })
    }

    pub fn probes(&self) -> &[Complex64] {
        &self.probes
    }

    pub fn m(&self) -> &[Complex64] {
        &self.m
    }

    pub fn sample(&self, config: &ParticleConfiguration, run_id: usize) -> FluctuationSample {
        let n = config.n() as f64;
        let gamma = self
            .probes
            .iter()
            .zip(&self.m)
            .map(|(&z, &m)| n * z.im * (measure::stieltjes_of(config.positions(), z) - m))
            .collect();
        FluctuationSample {
            probes: self.probes.clone(),
            gamma,
            run_id,
        }
    }
}

pub fn gamma_field(
    config: &ParticleConfiguration,
    solution: &HydroSolution,
    probes: &[Complex64],
    geometry: &ProbeGeometry,
    params: &SpectralDomainParams,
) -> Result<FluctuationSample, StatsError> {
    check_same_time(config, solution)?;
    Ok(FieldProbes::new(solution, probes.to_vec(), geometry, params)?.sample(config, 0))
}

/// Covariance block of `(Re Γ(z), Im Γ(z))` against `(Re Γ(w), Im Γ(w))`.
///
/// With `κ = -Im z Im w / (β (z - w̄)²)` the block is
/// `[[Re κ, -Im κ], [Im κ, Re κ]]`.
pub fn predicted_covariance(z: Complex64, w: Complex64, beta: f64) -> [[f64; 2]; 2] {
    let d = z - w.conj();
    let kappa = -z.im * w.im / (beta * d * d);
    [[kappa.re, -kappa.im], [kappa.im, kappa.re]]
}

/// Full `2k × 2k` covariance in the order `Re Γ(z_1), Im Γ(z_1), Re Γ(z_2), …`.
pub fn predicted_covariance_matrix(probes: &[Complex64], beta: f64) -> Vec<Vec<f64>> {
    let k = probes.len();
    let mut c = vec![vec![0.0; 2 * k]; 2 * k];
    for (j, &zj) in probes.iter().enumerate() {
        for (l, &zl) in probes.iter().enumerate() {
            let b = predicted_covariance(zj, zl, beta);
            for a in 0..2 {
                for bb in 0..2 {
                    c[2 * j + a][2 * l + bb] = b[a][bb];
                }
            }
        }
    }
    c
}

/// Minimum ensemble size accepted by [`clt_report`].
pub const MIN_CLT_SAMPLES: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub runs: usize,
    pub probes: Vec<(f64, f64)>,
    pub mean: Vec<f64>,
    /// Standard error of each mean coordinate.
    pub mean_standard_error: Vec<f64>,
    pub cov_empirical: Vec<Vec<f64>>,
    pub cov_predicted: Vec<Vec<f64>>,
    pub cov_distance: f64,
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
}

/// Sample mean, unbiased covariance, skewness and excess kurtosis of row vectors.
pub fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    let mut m3 = vec![0.0; d];
    let mut m4 = vec![0.0; d];
    for r in rows {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in 0..d {
                cov[a][b] += da * (r[b] - mean[b]);
            }
            m3[a] += da.powi(3);
            m4[a] += da.powi(4);
        }
    }
    let mut skew = vec![0.0; d];
    let mut kurt = vec![0.0; d];
    for a in 0..d {
        let m2 = cov[a][a] / n;
        skew[a] = m3[a] / n / m2.powf(1.5);
        kurt[a] = m4[a] / n / (m2 * m2) - 3.0;
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    (mean, cov, skew, kurt)
}

pub fn clt_report(samples: &[FluctuationSample], beta: f64) -> Result<CltReport, StatsError> {
    if samples.len() < MIN_CLT_SAMPLES {
        return Err(StatsError::SampleSize {
            got: samples.len(),
            need: MIN_CLT_SAMPLES,
        });
    }
    let probes = samples[0].probes.clone();
    for s in samples {
        if s.probes != probes || s.gamma.len() != probes.len() {
            return Err(StatsError::Config("samples must share the same probes".into()));
        }
    }
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.gamma.iter().flat_map(|g| [g.re, g.im]).collect())
        .collect();
    let (mean, cov, skewness, excess_kurtosis) = moments(&rows);
    let predicted = predicted_covariance_matrix(&probes, beta);
    let mut dist: f64 = 0.0;
    for (ra, rb) in cov.iter().zip(&predicted) {
        for (a, b) in ra.iter().zip(rb) {
            dist = dist.max((a - b).abs());
        }
    }
    let n = samples.len() as f64;
    Ok(CltReport {
        runs: samples.len(),
        probes: probes.iter().map(|z| (z.re, z.im)).collect(),
        mean_standard_error: (0..mean.len()).map(|a| (cov[a][a] / n).sqrt()).collect(),
        mean,
        cov_empirical: cov,
        cov_predicted: predicted,
        cov_distance: dist,
        skewness,
        excess_kurtosis,
    })
}

/// Built-in test functions, optionally dilated: `ψ(x) = base(x / scale)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub kind: TestFunctionKind,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunctionKind {
    /// `exp(-x²)`.
    Gaussian,
    /// `exp(-1/(1 - x²))` on `(-1, 1)`.
    Bump,
    Zero,
}

impl TestFunction {
    pub fn gaussian() -> Self {
        TestFunction {
            kind: TestFunctionKind::Gaussian,
            scale: 1.0,
        }
    }

    pub fn bump() -> Self {
        TestFunction {
            kind: TestFunctionKind::Bump,
            scale: 1.0,
        }
    }

    pub fn zero() -> Self {
        TestFunction {
            kind: TestFunctionKind::Zero,
            scale: 1.0,
        }
    }

    pub fn dilated(self, c: f64) -> Self {
        TestFunction {
            scale: self.scale * c,
            ..self
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "gaussian" => Some(Self::gaussian()),
            "bump" => Some(Self::bump()),
            "zero" => Some(Self::zero()),
            _ => None,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let u = x / self.scale;
        match self.kind {
            TestFunctionKind::Gaussian => (-u * u).exp(),
            TestFunctionKind::Bump => {
                if u.abs() < 1.0 {
                    (-1.0 / (1.0 - u * u)).exp()
                } else {
                    0.0
                }
            }
            TestFunctionKind::Zero => 0.0,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let u = x / self.scale;
        let d = match self.kind {
            TestFunctionKind::Gaussian => -2.0 * u * (-u * u).exp(),
            TestFunctionKind::Bump => {
                if u.abs() < 1.0 {
                    let q = 1.0 - u * u;
                    -2.0 * u / (q * q) * (-1.0 / q).exp()
                } else {
                    0.0
                }
            }
            TestFunctionKind::Zero => 0.0,
        };
        d / self.scale
    }

    /// Radius outside which `ψ` is zero to double precision.
    pub fn support_radius(&self) -> f64 {
        let r = match self.kind {
            TestFunctionKind::Gaussian => 6.5,
            TestFunctionKind::Bump | TestFunctionKind::Zero => 1.0,
        };
        r * self.scale
    }

    // Frequency beyond which ξ|ψ̂(ξ)|² is negligible.
    fn frequency_cutoff(&self) -> f64 {
        let x = match self.kind {
            TestFunctionKind::Gaussian => 14.0,
            TestFunctionKind::Bump => 1200.0,
            TestFunctionKind::Zero => 1.0,
        };
        x / self.scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearStatConfig {
    pub psi: TestFunction,
    pub eta: f64,
    pub e: f64,
}

/// `σ_ψ²` by both quadrature routes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaPsi {
    /// Double-integral value.
    pub value: f64,
    /// Frequency-side value.
    pub fourier: f64,
    pub rel_diff: f64,
}

const SIGMA_DIAG: f64 = 1e-5;

/// `∬ ((ψ(x) - ψ(y))/(x - y))² dx dy` over the plane.
fn difference_quotient_integral(psi: &TestFunction) -> f64 {
    let l = psi.support_radius();
    let inner = |x: f64| {
        let fx = psi.eval(x);
        let h = |y: f64| {
            let d = x - y;
            if d.abs() < SIGMA_DIAG * psi.scale {
                psi.derivative(0.5 * (x + y)).powi(2)
            } else {
                ((fx - psi.eval(y)) / d).powi(2)
            }
        };
        let body = adaptive_simpson(h, -l, l, 1e-12, 32).value;
        // ψ vanishes beyond l; the strips |y| > l and |x| > l contribute
        // ψ(x)² ∫ dy/(x - y)² each
        body + 2.0 * fx * fx * (1.0 / (l - x) + 1.0 / (l + x))
    };
    let l_in = l * (1.0 - 1e-12);
    adaptive_simpson_rel(inner, -l_in, l_in, 1e-7, 32).value
}

/// `2π ∫ |ξ| |ψ̂(ξ)|² dξ` with the unitary transform, equal to the double integral.
fn frequency_integral(psi: &TestFunction) -> f64 {
    let l = psi.support_radius();
    let hat_sq = |xi: f64| {
        let panels = ((xi * l).abs() as usize / 2 + 16).min(100_000);
        let c = composite_gauss(|x| psi.eval(x) * (xi * x).cos(), -l, l, panels, 8);
        let s = composite_gauss(|x| psi.eval(x) * (xi * x).sin(), -l, l, panels, 8);
        (c * c + s * s) / (2.0 * PI)
    };
    let cut = psi.frequency_cutoff();
    // even in ξ for real ψ
    let half = adaptive_simpson_rel(|xi| xi * hat_sq(xi), 0.0, cut, 1e-8, 64).value;
    2.0 * PI * 2.0 * half
}

/// `σ_ψ² = (1/(2βπ²)) ∬ ((ψ(x) - ψ(y))/(x - y))² dx dy`, cross-checked against
/// `(1/(βπ)) ∫ |ξ| |ψ̂(ξ)|² dξ`.
pub fn sigma_psi_squared_checked(psi: &TestFunction, beta: f64) -> Result<SigmaPsi, StatsError> {
    if !(beta > 0.0) || !(psi.scale > 0.0 && psi.scale.is_finite()) {
        return Err(StatsError::Config("need beta > 0 and a positive finite scale".into()));
    }
    if psi.kind == TestFunctionKind::Zero {
        return Ok(SigmaPsi {
            value: 0.0,
            fourier: 0.0,
            rel_diff: 0.0,
        });
    }
    let norm = 1.0 / (2.0 * beta * PI * PI);
    let value = norm * difference_quotient_integral(psi);
    let fourier = norm * frequency_integral(psi);
    if !value.is_finite() || !fourier.is_finite() {
        return Err(StatsError::Config("test function is not square integrable".into()));
    }
    Ok(SigmaPsi {
        value,
        fourier,
        rel_diff: (value - fourier).abs() / value.abs().max(f64::MIN_POSITIVE),
    })
}

pub fn sigma_psi_squared(cfg: &LinearStatConfig, beta: f64) -> Result<f64, StatsError> {
    Ok(sigma_psi_squared_checked(&cfg.psi, beta)?.value)
}

/// Linear statistic with its deterministic centering precomputed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearStatistic {
    pub cfg: LinearStatConfig,
    pub n: usize,
    /// `N ∫ ψ((x - E)/η) ρ_t(x) dx`.
    pub centering: f64,
}

impl LinearStatistic {
    pub fn prepare(
        solution: &HydroSolution,
        cfg: LinearStatConfig,
        n: usize,
        geometry: &ProbeGeometry,
        params: &SpectralDomainParams,
    ) -> Result<Self, StatsError> {
        if !(cfg.eta > 0.0) {
            return Err(StatsError::Config(format!("eta must be positive, got {}", cfg.eta)));
        }
        geometry.check(Complex64::new(cfg.e, cfg.eta), params, solution.t())?;
        let centering = if cfg.psi.kind == TestFunctionKind::Zero {
            0.0
        } else {
            let eta_probe = measure::default_eta_probe(n);
            let r = cfg.psi.support_radius() * cfg.eta;
            let mut err = None;
            let f = |x: f64| {
                let p = cfg.psi.eval((x - cfg.e) / cfg.eta);
                if p == 0.0 {
                    return 0.0;
                }
                match measure::density(solution, x, eta_probe) {
                    Ok(d) => p * d,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                }
            };
            let v = adaptive_simpson_rel(f, cfg.e - r, cfg.e + r, 1e-5, 16).value;
            if let Some(e) = err {
                return Err(e.into());
            }
            n as f64 * v
        };
        Ok(LinearStatistic { cfg, n, centering })
    }

    pub fn evaluate(&self, config: &ParticleConfiguration) -> f64 {
        let c = &self.cfg;
        let sum: f64 = config.positions().iter().map(|&l| c.psi.eval((l - c.e) / c.eta)).sum();
        sum - self.centering
    }
}

pub fn linear_statistic(
    config: &ParticleConfiguration,
    solution: &HydroSolution,
    cfg: &LinearStatConfig,
    geometry: &ProbeGeometry,
    params: &SpectralDomainParams,
) -> Result<f64, StatsError> {
    check_same_time(config, solution)?;
    Ok(LinearStatistic::prepare(solution, *cfg, config.n(), geometry, params)?.evaluate(config))
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}
