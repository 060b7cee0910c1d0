//! One-dimensional quadrature: adaptive Simpson and fixed Gauss–Legendre panels.

/// Result of an adaptive integration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integral {
    pub value: f64,
    /// Richardson-style error estimate accumulated over accepted panels.
    pub error: f64,
    pub evaluations: usize,
}

const MAX_DEPTH: u32 = 48;

/// An accepted Simpson panel with its three samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leaf {
    pub a: f64,
    pub b: f64,
    pub fa: f64,
    pub fm: f64,
    pub fb: f64,
}

impl Leaf {
    /// Integral of the quadratic interpolant over `[a, x]`.
    pub fn partial(&self, x: f64) -> f64 {
        let h = self.b - self.a;
        let s = ((x - self.a) / h).clamp(0.0, 1.0);
        // Lagrange basis on s in {0, 1/2, 1}, integrated from 0 to s
        let l0 = s - 1.5 * s * s + 2.0 / 3.0 * s * s * s;
        let l1 = 2.0 * s * s - 4.0 / 3.0 * s * s * s;
        let l2 = -0.5 * s * s + 2.0 / 3.0 * s * s * s;
        h * (self.fa * l0 + self.fm * l1 + self.fb * l2)
    }

    pub fn total(&self) -> f64 {
        (self.b - self.a) / 6.0 * (self.fa + 4.0 * self.fm + self.fb)
    }
}

struct Simpson<'a, F> {
    f: &'a mut F,
    evaluations: usize,
    error: f64,
    leaves: Option<Vec<Leaf>>,
}

impl<F: FnMut(f64) -> f64> Simpson<'_, F> {
    #[allow(clippy::too_many_arguments)]
    fn refine(&mut self, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = (self.f)(lm);
        let frm = (self.f)(rm);
        self.evaluations += 2;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth >= MAX_DEPTH || delta.abs() <= 15.0 * tol || (m - a) <= f64::EPSILON * m.abs() {
            self.error += delta.abs() / 15.0;
            if let Some(leaves) = self.leaves.as_mut() {
                leaves.push(Leaf { a, b: m, fa, fm: flm, fb: fm });
                leaves.push(Leaf { a: m, b, fa: fm, fm: frm, fb });
            }
            return left + right + delta / 15.0;
        }
        self.refine(a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
            + self.refine(m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)
    }
}

/// Adaptive Simpson on `[a, b]` split first into `panels` equal pieces.
///
/// The tolerance is absolute and is distributed over panels in proportion
/// to their width.
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, abs_tol: f64, panels: usize) -> Integral {
    run_simpson(&mut f, a, b, abs_tol, panels, None).0
}

/// Like [`adaptive_simpson`] but also returns the accepted panels in order.
pub fn adaptive_simpson_leaves<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    panels: usize,
) -> (Integral, Vec<Leaf>) {
    let (r, leaves) = run_simpson(&mut f, a, b, abs_tol, panels, Some(Vec::new()));
    (r, leaves.unwrap_or_default())
}

fn run_simpson<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    abs_tol: f64,
    panels: usize,
    leaves: Option<Vec<Leaf>>,
) -> (Integral, Option<Vec<Leaf>>) {
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let mut s = Simpson {
        f,
        evaluations: 0,
        error: 0.0,
        leaves,
    };
    let mut total = 0.0;
    let mut fa = (s.f)(a);
    s.evaluations += 1;
    for k in 0..panels {
        let lo = a + k as f64 * width;
        let hi = if k + 1 == panels { b } else { lo + width };
        let mid = 0.5 * (lo + hi);
        let fm = (s.f)(mid);
        let fb = (s.f)(hi);
        s.evaluations += 2;
        let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
        let tol = abs_tol * (hi - lo) / (b - a);
        total += s.refine(lo, hi, fa, fm, fb, whole, tol, 0);
        fa = fb;
    }
    (
        Integral {
            value: total,
            error: s.error,
            evaluations: s.evaluations,
        },
        s.leaves,
    )
}

/// Adaptive Simpson to a relative tolerance, using a coarse first pass to
/// fix the absolute scale.
pub fn adaptive_simpson_rel<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, rel_tol: f64, panels: usize) -> Integral {
    let coarse = adaptive_simpson(&mut f, a, b, f64::INFINITY, panels);
    let scale = coarse.value.abs().max(1e-300);
    let fine = adaptive_simpson(&mut f, a, b, rel_tol * scale, panels);
    Integral {
        evaluations: coarse.evaluations + fine.evaluations,
        ..fine
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule with `panels` equal panels of order `order`.
pub fn composite_gauss<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let c = a + (k as f64 + 0.5) * h;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            s += wi * f(c + 0.5 * h * xi);
        }
        total += 0.5 * h * s;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_smooth_functions() {
        let r = adaptive_simpson(|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-10, 1);
        assert!((r.value - 2.0).abs() < 1e-9);
        let r = adaptive_simpson_rel(|x: f64| (-x * x).exp(), -8.0, 8.0, 1e-8, 4);
        assert!((r.value - std::f64::consts::PI.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn simpson_resolves_narrow_peak_with_fine_panels() {
        let eta = 1e-3;
        let lorentz = |x: f64| eta / std::f64::consts::PI / ((x - 0.123).powi(2) + eta * eta);
        let r = adaptive_simpson(lorentz, -1.0, 1.0, 1e-8, 2000);
        let exact = ((1.0 - 0.123) / eta).atan() / std::f64::consts::PI
            + ((1.0 + 0.123) / eta).atan() / std::f64::consts::PI;
        assert!((r.value - exact).abs() < 1e-7);
    }

    #[test]
    fn leaves_tile_the_interval_and_reproduce_partials() {
        let (r, leaves) = adaptive_simpson_leaves(|x: f64| x.cos(), 0.0, 2.0, 1e-10, 3);
        assert_eq!(leaves[0].a, 0.0);
        assert_eq!(leaves.last().unwrap().b, 2.0);
        assert!(leaves.windows(2).all(|w| w[0].b == w[1].a));
        let sum: f64 = leaves.iter().map(Leaf::total).sum();
        assert!((sum - r.value).abs() < 1e-9);
        let mut acc = 0.0;
        for leaf in &leaves {
            let x = 0.5 * (leaf.a + leaf.b) + 0.1 * (leaf.b - leaf.a);
            let e = (acc + leaf.partial(x) - x.sin()).abs();
            // the interpolant partial is only fourth-order accurate
            assert!(e < 1e-7, "{e} on width {}", leaf.b - leaf.a);
            assert!((leaf.partial(leaf.b) - leaf.total()).abs() < 1e-15);
            acc += leaf.total();
        }
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
        let sw: f64 = w.iter().sum();
        assert!((sw - 2.0).abs() < 1e-14);
        let v = composite_gauss(|x| x.exp(), 0.0, 1.0, 3, 8);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-14);
    }
}
