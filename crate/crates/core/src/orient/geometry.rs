//! Discrete line families over an `H×W` grid.
//!
//! A line family is fixed by an integer column step `S`: pixel `(i, c)` lies
//! on line `c + offset(i)`, where the offset shifts each row by `S` columns
//! relative to its neighbour. `S = 0` gives the `W` image columns; larger
//! steps tilt the lines towards the horizontal. Every line holds at most one
//! pixel per row.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp on `|cot θ|`.
pub const COT_FLOOR: f64 = 1e-2;
/// Added to each line's pixel count in the pooled mean.
pub const OAP_EPSILON: f64 = 1e-8;

/// What the line sum is divided by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OapDenominator {
    /// In-bounds pixel count of the line, plus epsilon.
    #[default]
    Count,
    /// Image height, as if out-of-bounds samples were zero padding.
    Height,
}

/// Which way lines lean, in image coordinates (row index growing downwards).
/// Going down a row, lines move `S` columns right for `θ < π/2` and left for
/// `θ > π/2`; the distinction vanishes at `S = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lean {
    Acute,
    Obtuse,
}

impl Lean {
    pub fn of(theta: f64) -> Lean {
        if theta > FRAC_PI_2 {
            Lean::Obtuse
        } else {
            Lean::Acute
        }
    }
}

/// Clamped cotangent magnitude `max(|cot θ|, 1e-2)`.
pub fn cot_magnitude(theta: f64) -> f64 {
    (theta.cos() / theta.sin()).abs().max(COT_FLOOR)
}

/// `d/dθ` of [`cot_magnitude`]; zero inside the clamp.
pub fn cot_magnitude_grad(theta: f64) -> f64 {
    let cot = theta.cos() / theta.sin();
    if cot.abs() <= COT_FLOOR {
        0.0
    } else {
        let s = theta.sin();
        -cot.signum() / (s * s)
    }
}

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if !theta.is_finite() {
        return Err(Error::NonFinite(format!("orientation {theta}")));
    }
    if theta <= 0.0 || theta >= PI {
        return Err(Error::invalid(format!(
            "orientation {theta} rad outside the open interval (0, pi)"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationGeometry {
    theta: f64,
    step: usize,
    lean: Lean,
    height: usize,
    width: usize,
    offsets: Vec<usize>,
    counts: Vec<usize>,
    epsilon: f64,
    denominator: OapDenominator,
}

impl OrientationGeometry {
    /// Geometry for orientation `theta`, with step
    /// `S = round(max(|cot θ|, 1e-2))` limited to `W - 1`.
    pub fn build(theta: f64, height: usize, width: usize) -> Result<Self> {
        check_theta(theta)?;
        let step = cot_magnitude(theta).round() as usize;
        Self::with_step(Lean::of(theta), step, height, width).map(|g| g.with_theta(theta))
    }

    /// Geometry with an explicit step. Steps beyond `W - 1` are clipped: any
    /// larger step already isolates rows and would leave empty lines.
    pub fn with_step(lean: Lean, step: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty grid {height}x{width}")));
        }
        let step = step.min(width - 1);
        let offsets: Vec<usize> = (0..height)
            .map(|i| match lean {
                Lean::Acute => (height - 1 - i) * step,
                Lean::Obtuse => i * step,
            })
            .collect();
        let len = step * (height - 1) + width;
        let mut counts = vec![0usize; len];
        for &off in &offsets {
            for c in 0..width {
                counts[c + off] += 1;
            }
        }
        let theta = if step == 0 {
            FRAC_PI_2
        } else {
            let t = (1.0 / step as f64).atan();
            match lean {
                Lean::Acute => t,
                Lean::Obtuse => PI - t,
            }
        };
        Ok(OrientationGeometry {
            theta,
            step,
            lean,
            height,
            width,
            offsets,
            counts,
            epsilon: OAP_EPSILON,
            denominator: OapDenominator::Count,
        })
    }

    pub fn vertical(height: usize, width: usize) -> Result<Self> {
        Self::with_step(Lean::Acute, 0, height, width)
    }

    fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_denominator(mut self, denominator: OapDenominator) -> Self {
        self.denominator = denominator;
        self
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn lean(&self) -> Lean {
        self.lean
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pooled length `L = S (H - 1) + W`.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn denominator(&self) -> OapDenominator {
        self.denominator
    }

    /// Line index of pixel `(row, col)`.
    #[inline]
    pub fn line_of(&self, row: usize, col: usize) -> usize {
        col + self.offsets[row]
    }

    /// Divisor applied to line `j`'s sum.
    #[inline]
    pub fn divisor(&self, j: usize) -> f64 {
        match self.denominator {
            OapDenominator::Count => self.counts[j] as f64 + self.epsilon,
            OapDenominator::Height => self.height as f64,
        }
    }
}
