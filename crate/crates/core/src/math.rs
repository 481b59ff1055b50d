//! Scalar f64 math routed through `libm`.
//!
//! The crate builds without `std`, so float transcendentals are not available
//! as inherent methods. Routing every call through one module also keeps
//! results bit-identical between the `no_std` build and test builds.

pub use core::f64::consts::PI;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn max(a: f64, b: f64) -> f64 {
    if a > b {
        a
    } else {
        b
    }
}

#[inline]
pub fn min(a: f64, b: f64) -> f64 {
    if a < b {
        a
    } else {
        b
    }
}

#[inline]
pub fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    min(max(x, lo), hi)
}

/// Numerically stable ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    max(x, 0.0) + ln_1p(exp(-abs(x)))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// x * tanh(softplus(x)).
#[inline]
pub fn mish(x: f64) -> f64 {
    x * tanh(softplus(x))
}

/// d/dx mish(x) = tanh(sp) + x * sigmoid(x) * (1 - tanh(sp)^2).
#[inline]
pub fn mish_deriv(x: f64) -> f64 {
    let t = tanh(softplus(x));
    t + x * sigmoid(x) * (1.0 - t * t)
}

/// x * sigmoid(x).
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}
