//! Elementwise nonlinearities and their derivatives.

/// `x · max(0, x + 3) / 6`. Note the unclipped ReLU: this grows
/// quadratically for large `x`, unlike the ReLU6-based hard-swish.
#[inline]
pub fn hard_swish(x: f64) -> f64 {
    x * (x + 3.0).max(0.0) / 6.0
}

/// Derivative of [`hard_swish`]; the kink at `x = -3` takes subgradient 0.
#[inline]
pub fn hard_swish_grad(x: f64) -> f64 {
    if x > -3.0 {
        (2.0 * x + 3.0) / 6.0
    } else {
        0.0
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Logistic sigmoid, split by sign so neither branch overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
