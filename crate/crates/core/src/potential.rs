//! Confining potentials, the smooth spatial cutoff, the quasi-analytic
//! extension of `V'` into the complex plane and the kernel `g(z, x)` that
//! carries the nonlocal part of the hydrodynamic equation.

use num_complex::Complex64;
use thiserror::Error;

use crate::jet::Jet;

/// Below this separation `g(z, x)` switches to its Taylor form.
pub const DIAG_EPS: f64 = 1e-6;
/// Central-difference step used for `∂_x g`.
pub const FD_STEP: f64 = 1e-5;
/// Highest polynomial degree accepted for user potentials.
pub const MAX_DEGREE: usize = 8;

const VALIDATION_GRID: usize = 10_000;
// V through V^(5); the cutoff drift jet needs one derivative beyond V''''.
const STORED_DERIVS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("cutoff radius must exceed 1, got {0}")]
    CutoffRadius(f64),
    #[error("curvature floor must be non-negative and finite, got {0}")]
    Kappa(f64),
    #[error("polynomial degree {0} exceeds the supported maximum of {MAX_DEGREE}")]
    Degree(usize),
    #[error("V''({x}) = {value} violates the curvature floor -2*kappa = {floor}")]
    CurvatureFloor { x: f64, value: f64, floor: f64 },
    #[error("derivative of order {order} is not finite at x = {x}")]
    NonFinite { order: usize, x: f64 },
    #[error("non-finite argument {0}")]
    Domain(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PotentialKind {
    Quadratic,
    Quartic,
    Poly,
}

impl PotentialKind {
    pub fn name(self) -> &'static str {
        match self {
            PotentialKind::Quadratic => "quadratic",
            PotentialKind::Quartic => "quartic",
            PotentialKind::Poly => "poly",
        }
    }
}

/// The potential `V` together with its cutoff data.
///
/// Immutable once built; all evaluation methods take `&self`.
#[derive(Clone, Debug)]
pub struct PotentialSpec {
    kind: PotentialKind,
    coeffs: Vec<f64>,
    derivs: Vec<Vec<f64>>,
    kappa: f64,
    b_cut: f64,
}

/// Precomputed data for evaluating `x -> g(z, x)` at a fixed `z`.
#[derive(Clone, Copy, Debug)]
pub struct KernelAt {
    pub z: Complex64,
    /// Extended `V'(z)`.
    pub ext: Complex64,
    /// `∂_z` of the extension at `z`.
    pub ext_dz: Complex64,
    diag_f2: f64,
    diag_f3: f64,
}

impl KernelAt {
    /// `g(z, x)` given `cut_drift = V'(x) χ(x)`.
    #[inline]
    pub fn eval(&self, x: f64, cut_drift: f64) -> Complex64 {
        let d = Complex64::new(x, 0.0) - self.z;
        if d.norm() < DIAG_EPS {
            return Complex64::new(self.diag_f2 / 4.0, 0.0) + d * (self.diag_f3 / 12.0);
        }
        (Complex64::new(cut_drift, 0.0) - self.ext - d * self.ext_dz) / (2.0 * d * d)
    }
}

fn differentiate(c: &[f64]) -> Vec<f64> {
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(k, a)| k as f64 * a)
        .collect()
}

#[inline]
fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, a| acc * x + a)
}

fn smooth_step(t: Jet) -> Jet {
    if t.value() <= 0.0 {
        Jet::constant(0.0)
    } else {
        (-(t.recip())).exp()
    }
}

fn check_finite(z: Complex64) -> Result<(), PotentialError> {
    if z.re.is_finite() && z.im.is_finite() {
        Ok(())
    } else {
        Err(PotentialError::Domain(format!("{z}")))
    }
}

impl PotentialSpec {
    /// `V(x) = x²/2` with cutoff radius 4.
    pub fn quadratic() -> Self {
        Self::build(PotentialKind::Quadratic, vec![0.0, 0.0, 0.5], 4.0, 0.0)
            .expect("quadratic potential is valid")
    }

    /// `V(x) = x⁴/4` with cutoff radius 4.
    pub fn quartic() -> Self {
        Self::build(PotentialKind::Quartic, vec![0.0, 0.0, 0.0, 0.0, 0.25], 4.0, 0.0)
            .expect("quartic potential is valid")
    }

    /// `V ≡ 0`, the free (complex Burgers) case.
    pub fn zero() -> Self {
        Self::build(PotentialKind::Poly, vec![0.0], 4.0, 0.0).expect("zero potential is valid")
    }

    /// User polynomial with ascending-degree coefficients.
    pub fn polynomial(coeffs: Vec<f64>, b_cut: f64, kappa: f64) -> Result<Self, PotentialError> {
        Self::build(PotentialKind::Poly, coeffs, b_cut, kappa)
    }

    /// Same potential with a different cutoff radius and curvature floor.
    pub fn with_bounds(&self, b_cut: f64, kappa: f64) -> Result<Self, PotentialError> {
        Self::build(self.kind, self.coeffs.clone(), b_cut, kappa)
    }

    fn build(
        kind: PotentialKind,
        mut coeffs: Vec<f64>,
        b_cut: f64,
        kappa: f64,
    ) -> Result<Self, PotentialError> {
        if !(b_cut > 1.0 && b_cut.is_finite()) {
            return Err(PotentialError::CutoffRadius(b_cut));
        }
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(PotentialError::Kappa(kappa));
        }
        while coeffs.len() > 1 && coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        if coeffs.len() - 1 > MAX_DEGREE {
            return Err(PotentialError::Degree(coeffs.len() - 1));
        }
        if let Some(bad) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(PotentialError::Domain(format!("coefficient {bad}")));
        }
        let mut derivs = vec![coeffs.clone()];
        for k in 1..STORED_DERIVS {
            let next = differentiate(&derivs[k - 1]);
            derivs.push(next);
        }
        let spec = PotentialSpec {
            kind,
            coeffs,
            derivs,
            kappa,
            b_cut,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), PotentialError> {
        let hi = self.support_limit();
        let floor = -2.0 * self.kappa;
        for k in 0..=VALIDATION_GRID {
            let x = -hi + 2.0 * hi * k as f64 / VALIDATION_GRID as f64;
            for order in 0..=4 {
                if !self.derivative(order, x).is_finite() {
                    return Err(PotentialError::NonFinite { order, x });
                }
            }
            let v2 = self.derivative(2, x);
            if v2 < floor {
                return Err(PotentialError::CurvatureFloor { x, value: v2, floor });
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn b_cut(&self) -> f64 {
        self.b_cut
    }

    /// Half-width `2𝔟` of the region where `χ ≡ 1`.
    pub fn plateau(&self) -> f64 {
        2.0 * self.b_cut
    }

    /// Half-width `2𝔟 + 1` beyond which `χ ≡ 0`.
    pub fn support_limit(&self) -> f64 {
        2.0 * self.b_cut + 1.0
    }

    /// True when `V'` is affine, so `g` vanishes identically inside the plateau.
    pub fn nonlocal_vanishes(&self) -> bool {
        self.coeffs.len() <= 3
    }

    /// True when `g(z, x)` vanishes for every `x` in the plateau, i.e. `V'` is
    /// affine and `z` lies in the square where both cutoffs equal one.
    #[inline]
    pub fn kernel_vanishes_at(&self, z: Complex64) -> bool {
        self.nonlocal_vanishes() && z.re.abs() <= self.plateau() && z.im.abs() <= self.plateau()
    }

    /// `V^(order)(x)` for `order <= 5`.
    #[inline]
    pub fn derivative(&self, order: usize, x: f64) -> f64 {
        horner(&self.derivs[order], x)
    }

    pub fn v(&self, x: f64) -> f64 {
        self.derivative(0, x)
    }

    #[inline]
    pub fn v_prime(&self, x: f64) -> f64 {
        self.derivative(1, x)
    }

    pub fn v_second(&self, x: f64) -> f64 {
        self.derivative(2, x)
    }

    pub fn v_third(&self, x: f64) -> f64 {
        self.derivative(3, x)
    }

    pub fn v_fourth(&self, x: f64) -> f64 {
        self.derivative(4, x)
    }

    fn chi_jet(&self, y: f64) -> Jet {
        let a = y.abs();
        let lo = self.plateau();
        let hi = self.support_limit();
        if a <= lo {
            Jet::constant(1.0)
        } else if a >= hi {
            Jet::constant(0.0)
        } else {
            let u = Jet::variable(a, if y >= 0.0 { 1.0 } else { -1.0 });
            let p = smooth_step(Jet::constant(hi) - u);
            let q = smooth_step(u - Jet::constant(lo));
            p / (p + q)
        }
    }

    /// The bump `χ`: 1 on `[-2𝔟, 2𝔟]`, 0 outside `[-2𝔟-1, 2𝔟+1]`.
    pub fn chi(&self, y: f64) -> f64 {
        self.chi_jet(y).value()
    }

    /// `χ, χ', χ'', χ'''` at `y`.
    pub fn chi_derivatives(&self, y: f64) -> [f64; 4] {
        let j = self.chi_jet(y);
        [j.derivative(0), j.derivative(1), j.derivative(2), j.derivative(3)]
    }

    /// `V'(x) χ(x)`.
    #[inline]
    pub fn cut_drift(&self, x: f64) -> f64 {
        if x.abs() <= self.plateau() {
            self.v_prime(x)
        } else {
            self.v_prime(x) * self.chi(x)
        }
    }

    /// `F, F', F'', F'''` for `F = V' χ`.
    pub fn cut_drift_derivatives(&self, x: f64) -> [f64; 4] {
        if x.abs() <= self.plateau() {
            return [
                self.derivative(1, x),
                self.derivative(2, x),
                self.derivative(3, x),
                self.derivative(4, x),
            ];
        }
        let vp = Jet::from_derivatives(&[
            self.derivative(1, x),
            self.derivative(2, x),
            self.derivative(3, x),
            self.derivative(4, x),
            self.derivative(5, x),
        ]);
        let f = vp * self.chi_jet(x);
        [f.derivative(0), f.derivative(1), f.derivative(2), f.derivative(3)]
    }

    /// Order-three quasi-analytic extension of `V'` together with its `∂_z`.
    pub fn extended_v_prime_with_dz(&self, z: Complex64) -> (Complex64, Complex64) {
        let (x, y) = (z.re, z.im);
        let [f0, f1, f2, f3] = self.cut_drift_derivatives(x);
        let base = Complex64::new(f0 - 0.5 * y * y * f2, y * f1);
        // ∂_x of the bracket is (f1 - y²f3/2) + i y f2; ∂_y is -y f2 + i f1.
        let dx = Complex64::new(f1 - 0.5 * y * y * f3, y * f2);
        let dy = Complex64::new(-y * f2, f1);
        if y.abs() <= self.plateau() {
            let dz = 0.5 * (dx - Complex64::i() * dy);
            return (base, dz);
        }
        let [c0, c1, _, _] = self.chi_derivatives(y);
        let ext = base * c0;
        let dext_dx = dx * c0;
        let dext_dy = dy * c0 + base * c1;
        (ext, 0.5 * (dext_dx - Complex64::i() * dext_dy))
    }

    /// `V'(x+iy) := (F + i y F' - y²/2 F'') χ(y)` with `F = V' χ`.
    pub fn extended_v_prime(&self, z: Complex64) -> Result<Complex64, PotentialError> {
        check_finite(z)?;
        Ok(self.extended_v_prime_with_dz(z).0)
    }

    /// Precomputes the `z`-dependent parts of `g(z, ·)`.
    pub fn kernel_at(&self, z: Complex64) -> KernelAt {
        let (ext, ext_dz) = self.extended_v_prime_with_dz(z);
        let [_, _, f2, f3] = self.cut_drift_derivatives(z.re);
        KernelAt {
            z,
            ext,
            ext_dz,
            diag_f2: f2,
            diag_f3: f3,
        }
    }

    /// `g(z, x) = (V'(x) - V'(z) - (x - z) ∂_z V'(z)) / (2 (x - z)²)`.
    pub fn kernel_g(&self, z: Complex64, x: f64) -> Result<Complex64, PotentialError> {
        check_finite(z)?;
        check_finite(Complex64::new(x, 0.0))?;
        Ok(self.kernel_at(z).eval(x, self.cut_drift(x)))
    }

    /// Order-two quasi-analytic extension of `x -> g(z, x)` evaluated at `w`.
    pub fn kernel_g_tilde(&self, z: Complex64, w: Complex64) -> Result<Complex64, PotentialError> {
        check_finite(z)?;
        check_finite(w)?;
        let k = self.kernel_at(z);
        let g = |x: f64| k.eval(x, self.cut_drift(x));
        let (x, y) = (w.re, w.im);
        let base = g(x);
        if y == 0.0 {
            return Ok(base);
        }
        let dgdx = (g(x + FD_STEP) - g(x - FD_STEP)) / (2.0 * FD_STEP);
        Ok((base + Complex64::i() * y * dgdx) * self.chi(y))
    }

    /// Estimates the flow constant `C` controlling `Im z_s` and `Im m_s(z_s)`
    /// along characteristics whose real parts stay in `[-half_width, half_width]`,
    /// heights in `(0, max_height]` and whose measure lives in
    /// `[-support_radius, support_radius]`.
    pub fn flow_constant(&self, half_width: f64, max_height: f64, support_radius: f64) -> FlowConstant {
        let nx = 81;
        let ny = 24;
        let mut c_z: f64 = 0.0;
        let mut c_dz_re: f64 = 0.0;
        let mut c_dz_im: f64 = 0.0;
        let mut c_g: f64 = 0.0;
        for ix in 0..nx {
            let x = -half_width + 2.0 * half_width * ix as f64 / (nx - 1) as f64;
            for iy in 0..ny {
                let y = max_height * (1e-4f64).powf(iy as f64 / (ny - 1) as f64);
                let z = Complex64::new(x, y);
                let (p, dp) = self.extended_v_prime_with_dz(z);
                c_z = c_z.max(p.im.abs() / (2.0 * y));
                c_dz_re = c_dz_re.max(dp.re.abs() / 2.0);
                c_dz_im = c_dz_im.max(dp.im.abs() / (2.0 * y));
                if !self.nonlocal_vanishes() && ix % 4 == 0 {
                    let k = self.kernel_at(z);
                    for ks in 0..=16 {
                        let s = -support_radius + 2.0 * support_radius * ks as f64 / 16.0;
                        c_g = c_g.max(k.eval(s, self.cut_drift(s)).im.abs() / y);
                    }
                }
            }
        }
        let reach = support_radius + half_width;
        let diameter_sq = reach * reach + max_height * max_height;
        let c_m = c_dz_re + c_dz_im * reach + c_g * diameter_sq;
        FlowConstant {
            c_z,
            c_m,
            value: 1.05 * c_z.max(c_m),
        }
    }
}

/// Estimated constants in the flow comparison inequalities.
#[derive(Clone, Copy, Debug)]
pub struct FlowConstant {
    /// Bound on `|Im V'(z)| / (2 Im z)`.
    pub c_z: f64,
    /// Bound on the relative growth rate of `Im m_s(z_s)`.
    pub c_m: f64,
    /// The constant used by invariant checks (max of the two, padded by 5%).
    pub value: f64,
}
