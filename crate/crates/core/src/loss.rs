//! Variance-scaled, pixel-wise Huber objective.
//!
//! Residuals are whitened, `(y - yhat) / sqrt(v)`, so `delta` is measured in
//! standard deviations. The objective is a plain sum over exposures and
//! unmasked pixels; learning rates are calibrated for the sum, not a mean.
//! A border of `border` pixels on every side is excluded, which removes the
//! zero-padding error of the decoder convolution at the frame edges.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, ExposureStack, Real, Reconstruction, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberConfig {
    pub delta: f64,
    /// Masked border width, normally `decoder_kernel / 2`.
    pub border: usize,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self { delta: 1.0, border: 0 }
    }
}

impl HuberConfig {
    pub fn new(delta: f64, border: usize) -> Result<Self> {
        let cfg = Self { delta, border };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!("Huber delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }

    /// Whether pixel `(i, j)` of an `h x w` frame contributes to the loss.
    #[inline]
    pub fn unmasked(&self, i: usize, j: usize, h: usize, w: usize) -> bool {
        let b = self.border;
        i >= b && j >= b && i + b < h && j + b < w
    }
}

/// `0.5 r^2` for `|r| <= delta`, else `delta (|r| - delta / 2)`, with `r = y - yhat`.
#[inline]
pub fn huber<T: Real>(y: T, yhat: T, delta: T) -> T {
    let r = (y - yhat).abs();
    let half = T::lit(0.5);
    if r <= delta {
        half * r * r
    } else {
        delta * (r - half * delta)
    }
}

fn check_shapes<T: Real>(stack: &ExposureStack<T>, recon: &Reconstruction<T>, cfg: &HuberConfig) -> Result<()> {
    cfg.validate()?;
    recon.check_matches(stack)
}

/// Sum of whitened Huber losses over all exposures and unmasked pixels.
pub fn objective<T: Real>(stack: &ExposureStack<T>, recon: &Reconstruction<T>, cfg: &HuberConfig) -> Result<T> {
    check_shapes(stack, recon, cfg)?;
    let (n, h, w) = stack.dim();
    let delta = T::lit(cfg.delta);
    let (y, v, yhat) = (stack.exposures(), stack.variances(), recon.planes());
    let mut total = T::zero();
    for t in 0..n {
        for i in 0..h {
            for j in 0..w {
                if !cfg.unmasked(i, j, h, w) {
                    continue;
                }
                let sd = v[(t, i, j)].sqrt();
                total = total + huber(y[(t, i, j)] / sd, yhat[(t, i, j)] / sd, delta);
            }
        }
    }
    Ok(total)
}

/// Gradient of [`objective`] with respect to every reconstructed pixel:
/// `clip((yhat - y) / v, -delta / sqrt(v), delta / sqrt(v))`, zero where masked.
pub fn objective_grad<T: Real>(
    stack: &ExposureStack<T>,
    recon: &Reconstruction<T>,
    cfg: &HuberConfig,
) -> Result<Array3<T>> {
    check_shapes(stack, recon, cfg)?;
    let (_, h, w) = stack.dim();
    let delta = T::lit(cfg.delta);
    let (y, v, yhat) = (stack.exposures(), stack.variances(), recon.planes());
    Ok(Array3::from_shape_fn(stack.dim(), |(t, i, j)| {
        if !cfg.unmasked(i, j, h, w) {
            return T::zero();
        }
        let sd = v[(t, i, j)].sqrt();
        let r = yhat[(t, i, j)] / sd - y[(t, i, j)] / sd;
        r.max(-delta).min(delta) / sd
    }))
}
