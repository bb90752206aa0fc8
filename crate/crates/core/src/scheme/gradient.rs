//! Divided difference of the power potential `V(x) = |x|^(p+1)`.
//!
//! Evaluated through the factorisation
//! `(|a|^(p+1) - |b|^(p+1)) / (a - b) = S(|a|, |b|) * (|a| - |b|) / (a - b)`
//! with `S(x, y) = sum_{j=0}^{p} x^(p-j) y^j`. When `a` and `b` share a sign the
//! trailing ratio is exactly `+-1`, so no cancellation occurs; when they differ
//! in sign `|a - b| = |a| + |b|` and the ratio is well conditioned. Only the
//! coincident case `a == b` needs the analytic limit `V'((a+b)/2)`.

use crate::real::Real;

/// Default relative width of the coincident-argument branch.
pub const DEFAULT_EQUAL_VALUE_EPS: f64 = 1e-12;

/// Discrete gradient of `|x|^(p+1)` with its partial derivative in the first argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerGradient<T> {
    p: u32,
    equal_value_eps: T,
}

impl<T: Real> PowerGradient<T> {
    pub fn new(p: u32, equal_value_eps: T) -> Self {
        Self { p, equal_value_eps }
    }

    pub fn exponent(&self) -> u32 {
        self.p
    }

    #[inline]
    fn coincident(&self, a: T, b: T) -> bool {
        let scale = T::one().max(a.abs()).max(b.abs());
        (a - b).abs() <= self.equal_value_eps * scale
    }

    /// `(|a|^(p+1) - |b|^(p+1)) / (a - b)`, symmetric in `a` and `b` bit for bit.
    pub fn value(&self, a: T, b: T) -> T {
        let p = self.p as i32;
        if self.coincident(a, b) {
            let mid = (a + b) / T::lit(2.0);
            return T::of_usize(self.p as usize + 1) * mid.abs().powi(p - 1) * mid;
        }
        let (hi, lo) = ordered(a.abs(), b.abs());
        let mut sum = T::zero();
        let mut lo_pow = T::one();
        for j in 0..=p {
            sum = sum + hi.powi(p - j) * lo_pow;
            lo_pow = lo_pow * lo;
        }
        sum * sign_ratio(a, b)
    }

    /// `d/da` of [`value`](Self::value) with `b` held fixed.
    pub fn partial_first(&self, a: T, b: T) -> T {
        let p = self.p as i32;
        if self.coincident(a, b) {
            // half the second derivative of |x|^(p+1) at the midpoint
            let mid = (a + b) / T::lit(2.0);
            let coeff = T::of_usize((self.p as usize + 1) * self.p as usize) / T::lit(2.0);
            return coeff * mid.abs().powi(p - 1);
        }
        if a * b >= T::zero() {
            // derivative of S(x, y) in x at x = |a|
            let (x, y) = (a.abs(), b.abs());
            let mut sum = T::zero();
            let mut y_pow = T::one();
            for j in 0..p {
                sum = sum + T::of_usize((p - j) as usize) * x.powi(p - 1 - j) * y_pow;
                y_pow = y_pow * y;
            }
            sum
        } else {
            let dv = T::of_usize(self.p as usize + 1) * a.abs().powi(p - 1) * a;
            (dv - self.value(a, b)) / (a - b)
        }
    }
}

#[inline]
fn ordered<T: Real>(x: T, y: T) -> (T, T) {
    if x >= y {
        (x, y)
    } else {
        (y, x)
    }
}

/// `(|a| - |b|) / (a - b)` for `a != b`.
#[inline]
fn sign_ratio<T: Real>(a: T, b: T) -> T {
    if a * b >= T::zero() {
        if a + b > T::zero() {
            T::one()
        } else {
            -T::one()
        }
    } else {
        (a.abs() - b.abs()) / (a - b)
    }
}

/// `(|a|^(p+1) - |b|^(p+1)) / (a - b)` with the default coincidence threshold.
pub fn nonlinear_discrete_gradient<T: Real>(a: T, b: T, p: u32) -> T {
    PowerGradient::new(p, T::lit(DEFAULT_EQUAL_VALUE_EPS)).value(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn direct(a: f64, b: f64, p: u32) -> f64 {
        (a.abs().powi(p as i32 + 1) - b.abs().powi(p as i32 + 1)) / (a - b)
    }

    #[test]
    fn examples() {
        assert_eq!(nonlinear_discrete_gradient(1.0, 0.0, 5), 1.0);
        assert_eq!(nonlinear_discrete_gradient(1.0, 1.0, 5), 6.0);
        assert_eq!(nonlinear_discrete_gradient(2.0, 1.0, 5), 63.0);
        assert_eq!(nonlinear_discrete_gradient(-2.0, -1.0, 5), -63.0);
        // opposite signs: (64 - 1) / (2 + 1)
        assert_eq!(nonlinear_discrete_gradient(2.0, -1.0, 5), 21.0);
        assert_eq!(nonlinear_discrete_gradient(0.0, 0.0, 5), 0.0);
    }

    #[test]
    fn even_exponent_uses_absolute_value() {
        // p = 4: V(x) = |x|^5, V'(x) = 5 |x|^3 x
        assert_eq!(nonlinear_discrete_gradient(-1.0, -1.0, 4), -5.0);
        assert!((nonlinear_discrete_gradient(-2.0, 1.0, 4) - direct(-2.0, 1.0, 4)).abs() < 1e-14);
        assert!((nonlinear_discrete_gradient(0.5, -0.25, 4) - direct(0.5, -0.25, 4)).abs() < 1e-14);
    }

    #[test]
    fn partial_matches_finite_difference() {
        let g = PowerGradient::<f64>::new(5, 1e-12);
        for &(a, b) in &[(0.7, 0.3), (-1.2, -0.4), (1.5, -0.5), (0.0, 1.1), (0.9, 0.9 + 1e-14), (-0.3, 0.8)] {
            let h = 1e-6;
            let fd = (g.value(a + h, b) - g.value(a - h, b)) / (2.0 * h);
            let exact = g.partial_first(a, b);
            assert!((fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()), "a={a} b={b} fd={fd} exact={exact}");
        }
    }

    #[test]
    fn single_precision() {
        let g = PowerGradient::<f32>::new(5, 1e-6);
        assert_eq!(g.value(2.0, 1.0), 63.0);
        assert_eq!(g.value(1.0, 1.0), 6.0);
    }

    proptest! {
        #[test]
        fn symmetric(a in -4.0f64..4.0, b in -4.0f64..4.0) {
            let g = PowerGradient::new(5, 1e-12);
            prop_assert_eq!(g.value(a, b).to_bits(), g.value(b, a).to_bits());
        }

        #[test]
        fn continuous_across_switch(a in -4.0f64..4.0, frac in 0.5f64..2.0) {
            let eps = 1e-12;
            let g = PowerGradient::new(5, eps);
            let width = eps * 1f64.max(a.abs());
            let inside = g.value(a, a + 0.5 * width);
            let outside = g.value(a, a + frac * 2.0 * width);
            let scale = 1.0 + inside.abs();
            prop_assert!((inside - outside).abs() <= 1e-8 * scale);
        }

        #[test]
        fn agrees_with_direct_quotient(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            prop_assume!((a - b).abs() > 1e-3);
            let fast = nonlinear_discrete_gradient(a, b, 5);
            let slow = direct(a, b, 5);
            prop_assert!((fast - slow).abs() <= 1e-10 * (1.0 + slow.abs()));
        }
    }
}
