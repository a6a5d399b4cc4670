//! Scalar types the tape runs on.
//!
//! Running the reverse sweep on [`Dual`] numbers seeded with a direction `v`
//! yields the directional derivative of the gradient, i.e. an exact
//! Hessian-vector product (forward-over-reverse).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    /// Constant with zero tangent.
    fn cst(v: f64) -> Self;
    /// Value with tangent `t` (ignored by plain floats).
    fn lift(v: f64, t: f64) -> Self;
    fn value(self) -> f64;
    fn tangent(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn is_finite(self) -> bool {
        self.value().is_finite() && self.tangent().is_finite()
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn lift(v: f64, _t: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn tangent(self) -> f64 {
        0.0
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number `v + t·ε`, `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub t: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            t: self.t + o.t,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            t: self.t - o.t,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            t: self.t * o.v + self.v * o.t,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            t: (self.t * o.v - self.v * o.t) / (o.v * o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            t: -self.t,
        }
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        self.t += o.t;
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual { v, t: 0.0 }
    }
    fn lift(v: f64, t: f64) -> Self {
        Dual { v, t }
    }
    fn value(self) -> f64 {
        self.v
    }
    fn tangent(self) -> f64 {
        self.t
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, t: self.t * e }
    }
    fn ln(self) -> Self {
        Dual {
            v: self.v.ln(),
            t: self.t / self.v,
        }
    }
    fn tanh(self) -> Self {
        let th = self.v.tanh();
        Dual {
            v: th,
            t: self.t * (1.0 - th * th),
        }
    }
}
