//! Scalar float functions that resolve to `std` when available and `libm` otherwise.

#[cfg(feature = "std")]
mod imp {
    #[inline]
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    #[inline]
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
    #[inline]
    pub fn tanh(x: f64) -> f64 {
        x.tanh()
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        x.cos()
    }
    #[inline]
    pub fn sin(x: f64) -> f64 {
        x.sin()
    }
    #[inline]
    pub fn acos(x: f64) -> f64 {
        x.acos()
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub use libm::{acos, cos, exp, sin, sqrt, tanh};
    #[inline]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
}

pub use imp::*;

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}
