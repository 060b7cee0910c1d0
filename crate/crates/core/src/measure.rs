//! Densities, classical locations and Stieltjes transforms.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;
use thiserror::Error;

use crate::characteristics::{HydroError, HydroSolution};
use crate::dbm_sde::ParticleConfiguration;
use crate::quadrature::{adaptive_simpson_leaves, Leaf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("Stieltjes transform requested on the real axis at {0}")]
    RealAxis(Complex64),
    #[error("density integrates to {mass} over [{lo}, {hi}], outside tolerance {tol}")]
    Normalization { mass: f64, lo: f64, hi: f64, tol: f64 },
    #[error("probe height {eta} is below the hydro floor {floor}")]
    ProbeHeight { eta: f64, floor: f64 },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Hydro(#[from] HydroError),
}

/// Allowed deviation of the total mass from one before normalisation.
pub const CDF_TOL: f64 = 0.01;
const DENSITY_CUT: f64 = 1e-8;
const QUAD_TOL: f64 = 1e-6;

/// `(1/N) Σ 1/(x_i - z)` without argument checks.
pub fn stieltjes_of(points: &[f64], z: Complex64) -> Complex64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for &x in points {
        let dx = x - z.re;
        let inv = 1.0 / (dx * dx + z.im * z.im);
        re += dx * inv;
        im += z.im * inv;
    }
    let n = points.len() as f64;
    Complex64::new(re / n, im / n)
}

/// Empirical Stieltjes transform of a particle configuration.
pub fn empirical_stieltjes(config: &ParticleConfiguration, z: Complex64) -> Result<Complex64, MeasureError> {
    if z.im == 0.0 || !z.im.is_finite() || !z.re.is_finite() {
        return Err(MeasureError::RealAxis(z));
    }
    Ok(stieltjes_of(config.positions(), z))
}

/// Transform of the semicircle law of radius `radius` centred at the origin.
pub fn semicircle_stieltjes(z: Complex64, radius: f64) -> Complex64 {
    let r2 = radius * radius;
    2.0 * (-z + (z - radius).sqrt() * (z + radius).sqrt()) / r2
}

/// Density of the semicircle on `[-2, 2]`.
pub fn semicircle_density(x: f64) -> f64 {
    if x.abs() >= 2.0 {
        0.0
    } else {
        (4.0 - x * x).sqrt() / (2.0 * PI)
    }
}

/// Distribution function of the semicircle on `[-2, 2]`.
pub fn semicircle_cdf(x: f64) -> f64 {
    if x <= -2.0 {
        0.0
    } else if x >= 2.0 {
        1.0
    } else {
        0.5 + x * (4.0 - x * x).sqrt() / (4.0 * PI) + (x / 2.0).asin() / PI
    }
}

/// Inverse of [`semicircle_cdf`], by bisection.
pub fn semicircle_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return -2.0;
    }
    if p >= 1.0 {
        return 2.0;
    }
    let (mut lo, mut hi) = (-2.0f64, 2.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if semicircle_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `N` semicircle points at the mid-quantiles `(i - 1/2)/N`.
pub fn semicircle_points(n: usize) -> Vec<f64> {
    (0..n).map(|i| semicircle_quantile((i as f64 + 0.5) / n as f64)).collect()
}

/// Default probe height for `N` particles.
pub fn default_eta_probe(n: usize) -> f64 {
    (1.0 / (10.0 * n.max(1) as f64)).max(1e-4)
}

/// `Im m_t(E + i η) / π`.
pub fn density(solution: &HydroSolution, e: f64, eta_probe: f64) -> Result<f64, MeasureError> {
    let floor = solution.config().eta_floor;
    if !(eta_probe >= floor) {
        return Err(MeasureError::ProbeHeight { eta: eta_probe, floor });
    }
    let m = solution.evaluate_m(Complex64::new(e, eta_probe))?;
    Ok((m.im / PI).max(0.0))
}

/// Writes `E,density` rows on a uniform grid.
pub fn write_density_csv<W: Write>(
    mut w: W,
    solution: &HydroSolution,
    grid: &[f64],
    eta_probe: f64,
) -> Result<(), MeasureError> {
    let io = |e: io::Error| MeasureError::Input(e.to_string());
    writeln!(w, "E,density").map_err(io)?;
    for &e in grid {
        let d = density(solution, e, eta_probe)?;
        writeln!(w, "{e},{d}").map_err(io)?;
    }
    Ok(())
}

/// Classical locations `γ_1 ≤ … ≤ γ_N` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTable {
    pub t: f64,
    pub gamma: Vec<f64>,
}

impl QuantileTable {
    pub fn new(t: f64, gamma: Vec<f64>) -> Result<Self, MeasureError> {
        if gamma.is_empty() {
            return Err(MeasureError::Input("empty quantile table".into()));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(MeasureError::Input("non-finite classical location".into()));
        }
        if gamma.windows(2).any(|w| w[1] < w[0]) {
            return Err(MeasureError::Input("classical locations must be nondecreasing".into()));
        }
        Ok(QuantileTable { t, gamma })
    }

    pub fn n(&self) -> usize {
        self.gamma.len()
    }

    /// `γ_i` for 1-based `i`, with `γ_i = -∞` below 1 and `+∞` above `N`.
    pub fn get(&self, i: i64) -> f64 {
        if i < 1 {
            f64::NEG_INFINITY
        } else if i as usize > self.gamma.len() {
            f64::INFINITY
        } else {
            self.gamma[i as usize - 1]
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "i,gamma")?;
        for (i, g) in self.gamma.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, g)?;
        }
        Ok(())
    }
}

/// Normalised distribution function assembled from Simpson panels.
#[derive(Clone, Debug)]
pub struct Cdf {
    leaves: Vec<Leaf>,
    cumulative: Vec<f64>,
    mass: f64,
}

impl Cdf {
    fn from_leaves(leaves: Vec<Leaf>) -> Self {
        let mut cumulative = Vec::with_capacity(leaves.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for leaf in &leaves {
            acc += leaf.total();
            cumulative.push(acc);
        }
        Cdf { leaves, cumulative, mass: acc }
    }

    /// Unnormalised total mass.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn support(&self) -> (f64, f64) {
        (self.leaves[0].a, self.leaves[self.leaves.len() - 1].b)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let k = self.leaves.partition_point(|l| l.b <= x).min(self.leaves.len() - 1);
        ((self.cumulative[k] + self.leaves[k].partial(x)) / self.mass).clamp(0.0, 1.0)
    }

    /// Smallest `x` with `eval(x) >= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let target = p * self.mass;
        let (lo, hi) = self.support();
        if target <= 0.0 {
            return lo;
        }
        if target >= self.mass {
            return hi;
        }
        // first panel whose right cumulative reaches the target
        let k = self.cumulative[1..].partition_point(|&c| c < target).min(self.leaves.len() - 1);
        let leaf = &self.leaves[k];
        let base = self.cumulative[k];
        let (mut a, mut b) = (leaf.a, leaf.b);
        for _ in 0..100 {
            let mid = 0.5 * (a + b);
            if base + leaf.partial(mid) < target {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= 4.0 * f64::EPSILON * b.abs().max(1.0) {
                break;
            }
        }
        b
    }
}

/// Builds the distribution function of `density` on `[lo, hi]`, resolving
/// features down to width `resolution`.
pub fn cdf_of<F: FnMut(f64) -> f64>(density: F, lo: f64, hi: f64, resolution: f64) -> Result<Cdf, MeasureError> {
    if !(hi > lo) || !(resolution > 0.0) {
        return Err(MeasureError::Input(format!("bad window [{lo}, {hi}] at resolution {resolution}")));
    }
    let panels = ((hi - lo) / resolution).ceil().clamp(1.0, 1e7) as usize;
    let (_, leaves) = adaptive_simpson_leaves(density, lo, hi, QUAD_TOL, panels);
    let cdf = Cdf::from_leaves(leaves);
    if !((cdf.mass - 1.0).abs() <= CDF_TOL) {
        return Err(MeasureError::Normalization {
            mass: cdf.mass,
            lo,
            hi,
            tol: CDF_TOL,
        });
    }
    Ok(cdf)
}

/// Integration window for the smoothed density of `solution`.
fn density_window(solution: &HydroSolution, eta: f64) -> Result<(f64, f64), MeasureError> {
    let (re_min, re_max, _) = solution.coverage_bounds();
    let (lo, hi) = if solution.t() == 0.0 {
        match solution.initial().support() {
            Some((a, b)) => (a - 0.5, b + 0.5),
            None => (re_min, re_max),
        }
    } else {
        let (a, b) = solution
            .alive_real_extent()
            .ok_or_else(|| MeasureError::Input("no live characteristics".into()))?;
        let pad = 0.05 * (b - a) + 10.0 * eta;
        ((a - pad).max(re_min), (b + pad).min(re_max))
    };
    // trim where the density is negligible
    let scan = 400;
    let xs: Vec<f64> = (0..=scan).map(|k| lo + (hi - lo) * k as f64 / scan as f64).collect();
    let mut first = None;
    let mut last = None;
    for (k, &x) in xs.iter().enumerate() {
        if density(solution, x, eta)? >= DENSITY_CUT {
            first.get_or_insert(k);
            last = Some(k);
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => Ok((xs[a.saturating_sub(1)], xs[(b + 1).min(scan)])),
        _ => Err(MeasureError::Normalization { mass: 0.0, lo, hi, tol: CDF_TOL }),
    }
}

/// Distribution function of the smoothed density of `solution` at height `eta`.
pub fn solution_cdf(solution: &HydroSolution, eta: f64) -> Result<Cdf, MeasureError> {
    let (lo, hi) = density_window(solution, eta)?;
    let resolution = if solution.t() == 0.0 {
        eta
    } else {
        (eta + solution.t() / 10.0).min(0.02)
    };
    let mut err = None;
    let cdf = cdf_of(
        |x| match density(solution, x, eta) {
            Ok(d) => d,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        },
        lo,
        hi,
        resolution,
    );
    if let Some(e) = err {
        return Err(e);
    }
    cdf
}

/// Classical locations for `n` particles at the solution's current time.
pub fn classical_locations(solution: &HydroSolution, n: usize) -> Result<QuantileTable, MeasureError> {
    if n == 0 {
        return Err(MeasureError::Input("need at least one particle".into()));
    }
    let cdf = solution_cdf(solution, default_eta_probe(n))?;
    let gamma = (1..=n).map(|i| cdf.quantile(i as f64 / n as f64)).collect();
    QuantileTable::new(solution.t(), gamma)
}
