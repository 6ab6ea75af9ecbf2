//! First-order dual numbers over `f64`.
//!
//! A `Dual` carries a value together with its derivative with respect to
//! the transform variable `s`, so mean completion times can be read off as
//! exact derivatives at `s = 0` instead of finite differences.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual {
    /// Value.
    pub v: f64,
    /// Derivative d/ds.
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }

    /// A quantity that does not depend on `s`.
    pub fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }

    /// The transform variable itself: value `s`, slope 1.
    pub fn var(s: f64) -> Self {
        Dual { v: s, d: 1.0 }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: self.d * e }
    }

    pub fn recip(self) -> Self {
        Dual {
            v: 1.0 / self.v,
            d: -self.d / (self.v * self.v),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        self * o.recip()
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, f: f64) -> Dual {
        Dual::new(self.v * f, self.d * f)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}
