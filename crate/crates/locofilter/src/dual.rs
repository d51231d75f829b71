//! Second-order forward derivative propagation.
//!
//! [`Dual2`] carries a value together with its gradient and Hessian with
//! respect to `K` designated parameters. Arithmetic propagates both
//! derivative orders by the exact calculus rules, so any composite built from
//! these operations yields closed-form first and second derivatives. This is
//! the production mechanism behind the analytic derivatives of the smooth
//! collision margins and the constraint rows; correctness is checked against
//! central finite differences in the test suites.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Value, gradient and Hessian with respect to `K` scalar parameters.
#[derive(Clone, Copy, Debug)]
pub struct Dual2<const K: usize> {
    pub v: f64,
    pub g: [f64; K],
    pub h: [[f64; K]; K],
}

impl<const K: usize> Dual2<K> {
    #[inline]
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            g: [0.0; K],
            h: [[0.0; K]; K],
        }
    }

    /// Seed parameter `i` with value `v` (unit gradient, zero Hessian).
    #[inline]
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = Self::constant(v);
        d.g[i] = 1.0;
        d
    }

    /// Apply a scalar function given its value and first two derivatives at
    /// `self.v`.
    #[inline]
    pub fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Self::constant(f0);
        for i in 0..K {
            out.g[i] = f1 * self.g[i];
        }
        // Hessians stay symmetric through every op here, so only the upper
        // triangle is computed and mirrored.
        for i in 0..K {
            for j in i..K {
                let v = f1 * self.h[i][j] + f2 * self.g[i] * self.g[j];
                out.h[i][j] = v;
                out.h[j][i] = v;
            }
        }
        out
    }

    /// Apply a bivariate scalar function of `(self, b)` given its partial
    /// derivatives up to second order.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn chain2(self, b: Self, f0: f64, fa: f64, fb: f64, faa: f64, fab: f64, fbb: f64) -> Self {
        let mut out = Self::constant(f0);
        for i in 0..K {
            out.g[i] = fa * self.g[i] + fb * b.g[i];
        }
        for i in 0..K {
            for j in i..K {
                let v = fa * self.h[i][j]
                    + fb * b.h[i][j]
                    + faa * self.g[i] * self.g[j]
                    + fab * (self.g[i] * b.g[j] + b.g[i] * self.g[j])
                    + fbb * b.g[i] * b.g[j];
                out.h[i][j] = v;
                out.h[j][i] = v;
            }
        }
        out
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        let mut out = self;
        out.v *= s;
        for i in 0..K {
            out.g[i] *= s;
            for j in 0..K {
                out.h[i][j] *= s;
            }
        }
        out
    }

    #[inline]
    pub fn sq(self) -> Self {
        self * self
    }

    #[inline]
    pub fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, 0.5 / r, -0.25 / (r * self.v))
    }

    #[inline]
    pub fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.v.sin_cos();
        (self.chain(s, c, -s), self.chain(c, -s, -c))
    }

    /// Integer power, `n >= 1`.
    #[inline]
    pub fn powi(self, n: i32) -> Self {
        debug_assert!(n >= 1);
        let v = self.v;
        let f0 = v.powi(n);
        let f1 = n as f64 * v.powi(n - 1);
        let f2 = (n * (n - 1)) as f64 * v.powi(n - 2);
        self.chain(f0, f1, f2)
    }
}

impl<const K: usize> Add for Dual2<K> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut out = self;
        out.v += rhs.v;
        for i in 0..K {
            out.g[i] += rhs.g[i];
            for j in 0..K {
                out.h[i][j] += rhs.h[i][j];
            }
        }
        out
    }
}

impl<const K: usize> Sub for Dual2<K> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut out = self;
        out.v -= rhs.v;
        for i in 0..K {
            out.g[i] -= rhs.g[i];
            for j in 0..K {
                out.h[i][j] -= rhs.h[i][j];
            }
        }
        out
    }
}

impl<const K: usize> Neg for Dual2<K> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const K: usize> Mul for Dual2<K> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::constant(self.v * rhs.v);
        for i in 0..K {
            out.g[i] = rhs.v * self.g[i] + self.v * rhs.g[i];
        }
        for i in 0..K {
            for j in i..K {
                let v = rhs.v * self.h[i][j]
                    + self.v * rhs.h[i][j]
                    + self.g[i] * rhs.g[j]
                    + rhs.g[i] * self.g[j];
                out.h[i][j] = v;
                out.h[j][i] = v;
            }
        }
        out
    }
}

impl<const K: usize> Div for Dual2<K> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let b = rhs.v;
        let inv = 1.0 / b;
        let inv2 = inv * inv;
        self.chain2(
            rhs,
            self.v * inv,
            inv,
            -self.v * inv2,
            0.0,
            -inv2,
            2.0 * self.v * inv2 * inv,
        )
    }
}

/// Two-argument arctangent with full second-order propagation.
#[inline]
pub fn atan2d<const K: usize>(y: Dual2<K>, x: Dual2<K>) -> Dual2<K> {
    let (xv, yv) = (x.v, y.v);
    let r2 = xv * xv + yv * yv;
    let r4 = r2 * r2;
    let f0 = yv.atan2(xv);
    let fx = -yv / r2;
    let fy = xv / r2;
    let fxx = 2.0 * xv * yv / r4;
    let fyy = -fxx;
    let fxy = (yv * yv - xv * xv) / r4;
    x.chain2(y, f0, fx, fy, fxx, fxy, fyy)
}

/// A 3-vector of dual scalars.
pub type DVec3<const K: usize> = [Dual2<K>; 3];

#[inline]
pub fn dv_constant<const K: usize>(v: [f64; 3]) -> DVec3<K> {
    [
        Dual2::constant(v[0]),
        Dual2::constant(v[1]),
        Dual2::constant(v[2]),
    ]
}

#[inline]
pub fn dv_dot<const K: usize>(a: &DVec3<K>, b: &DVec3<K>) -> Dual2<K> {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn dv_cross<const K: usize>(a: &DVec3<K>, b: &DVec3<K>) -> DVec3<K> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dv_sub<const K: usize>(a: &DVec3<K>, b: &DVec3<K>) -> DVec3<K> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dv_scale<const K: usize>(a: &DVec3<K>, s: Dual2<K>) -> DVec3<K> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dv_norm_sq<const K: usize>(a: &DVec3<K>) -> Dual2<K> {
    dv_dot(a, a)
}

/// Dot product of a constant vector with a dual vector. A fixed linear
/// combination, so no gradient cross terms arise; much cheaper than three
/// dual multiplies when one operand carries no derivatives.
#[inline]
pub fn dv_lin<const K: usize>(c: &[f64; 3], d: &DVec3<K>) -> Dual2<K> {
    let mut out = Dual2::constant(c[0] * d[0].v + c[1] * d[1].v + c[2] * d[2].v);
    for p in 0..K {
        out.g[p] = c[0] * d[0].g[p] + c[1] * d[1].g[p] + c[2] * d[2].g[p];
        for q in p..K {
            let v = c[0] * d[0].h[p][q] + c[1] * d[1].h[p][q] + c[2] * d[2].h[p][q];
            out.h[p][q] = v;
            out.h[q][p] = v;
        }
    }
    out
}
