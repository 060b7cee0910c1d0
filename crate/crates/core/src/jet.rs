//! Truncated Taylor arithmetic used to differentiate the cutoff function
//! exactly. Coefficients are stored as `f^(k)(x0) / k!`.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub(crate) const ORDER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Jet {
    c: [f64; ORDER],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        let mut c = [0.0; ORDER];
        c[0] = v;
        Jet { c }
    }

    /// The identity map `x -> x` expanded around `x0`, scaled by `slope`.
    pub fn variable(x0: f64, slope: f64) -> Self {
        let mut c = [0.0; ORDER];
        c[0] = x0;
        c[1] = slope;
        Jet { c }
    }

    /// Builds a jet from derivative values `f, f', f'', ...`.
    pub fn from_derivatives(d: &[f64]) -> Self {
        let mut c = [0.0; ORDER];
        let mut fact = 1.0;
        for (k, slot) in c.iter_mut().enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            *slot = d.get(k).copied().unwrap_or(0.0) / fact;
        }
        Jet { c }
    }

    /// k-th derivative at the expansion point.
    pub fn derivative(&self, k: usize) -> f64 {
        let fact: f64 = (1..=k).map(|j| j as f64).product();
        self.c[k] * fact
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn recip(self) -> Self {
        let mut r = [0.0; ORDER];
        r[0] = 1.0 / self.c[0];
        for k in 1..ORDER {
            let mut s = 0.0;
            for j in 1..=k {
                s += self.c[j] * r[k - j];
            }
            r[k] = -s * r[0];
        }
        Jet { c: r }
    }

    pub fn exp(self) -> Self {
        let mut b = [0.0; ORDER];
        b[0] = self.c[0].exp();
        for k in 1..ORDER {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * self.c[j] * b[k - j];
            }
            b[k] = s / k as f64;
        }
        Jet { c: b }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, rhs: Jet) -> Jet {
        for k in 0..ORDER {
            self.c[k] += rhs.c[k];
        }
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: Jet) -> Jet {
        for k in 0..ORDER {
            self.c[k] -= rhs.c[k];
        }
        self
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        for k in 0..ORDER {
            self.c[k] = -self.c[k];
        }
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let mut c = [0.0; ORDER];
        for (i, a) in self.c.iter().enumerate() {
            for (j, b) in rhs.c.iter().enumerate().take(ORDER - i) {
                c[i + j] += a * b;
            }
        }
        Jet { c }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        self * rhs.recip()
    }
}
