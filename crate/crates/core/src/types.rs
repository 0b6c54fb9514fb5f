//! Domain types shared by every module.
//!
//! All types validate their invariants on construction and are immutable
//! afterwards, so they can be shared read-only across worker threads.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Variance floor applied wherever a variance is synthesized.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Variance to assign to masked or bad pixels. Such pixels keep finite
/// values and are effectively ignored by the loss.
pub const MASKED_VARIANCE: f64 = 1e12;

/// Tolerance on the unit-sum convention for PSF kernels.
pub const PSF_SUM_TOLERANCE: f64 = 1e-6;

/// `n` pre-aligned exposures with their per-pixel variance maps, both
/// stored as `n x H x W` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureStack<T> {
    exposures: Array3<T>,
    variances: Array3<T>,
}

/// Checks the exposure-stack invariants on raw arrays. Reports the first
/// offending element in `(t, i, j)` scan order.
pub fn validate_stack<T: Real>(exposures: ArrayView3<T>, variances: ArrayView3<T>) -> Result<()> {
    if exposures.dim() != variances.dim() {
        return Err(Error::ShapeMismatch(format!(
            "exposures {:?} vs variances {:?}",
            exposures.dim(),
            variances.dim()
        )));
    }
    let (n, h, w) = exposures.dim();
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!("empty stack {n}x{h}x{w}")));
    }
    for ((t, i, j), &y) in exposures.indexed_iter() {
        if !y.is_finite() {
            return Err(Error::NonFiniteValue { t, i, j });
        }
        let v = variances[(t, i, j)];
        if v.is_nan() || v.is_infinite() {
            return Err(Error::NonFiniteValue { t, i, j });
        }
        if v <= T::zero() {
            return Err(Error::NonPositiveVariance { t, i, j });
        }
    }
    Ok(())
}

impl<T: Real> ExposureStack<T> {
    pub fn new(exposures: Array3<T>, variances: Array3<T>) -> Result<Self> {
        validate_stack(exposures.view(), variances.view())?;
        Ok(Self { exposures, variances })
    }

    /// Stack with the same constant variance for every pixel.
    pub fn with_constant_variance(exposures: Array3<T>, variance: T) -> Result<Self> {
        let variances = Array3::from_elem(exposures.dim(), variance);
        Self::new(exposures, variances)
    }

    pub fn n(&self) -> usize {
        self.exposures.dim().0
    }

    pub fn height(&self) -> usize {
        self.exposures.dim().1
    }

    pub fn width(&self) -> usize {
        self.exposures.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.exposures.dim()
    }

    pub fn exposures(&self) -> &Array3<T> {
        &self.exposures
    }

    pub fn variances(&self) -> &Array3<T> {
        &self.variances
    }

    pub fn exposure(&self, t: usize) -> ArrayView2<'_, T> {
        self.exposures.index_axis(Axis(0), t)
    }

    pub fn variance(&self, t: usize) -> ArrayView2<'_, T> {
        self.variances.index_axis(Axis(0), t)
    }

    /// Re-checks the invariants. Always `Ok` for a constructed stack.
    pub fn validate(&self) -> Result<()> {
        validate_stack(self.exposures.view(), self.variances.view())
    }

    /// Exposures scaled by their per-pixel standard deviations, `y / sqrt(v)`.
    pub fn whiten(&self) -> Array3<T> {
        let mut out = self.exposures.clone();
        out.zip_mut_with(&self.variances, |y, &v| *y = *y / v.sqrt());
        out
    }

    /// Converts to another engine precision.
    pub fn cast<U: Real>(&self) -> ExposureStack<U> {
        ExposureStack {
            exposures: self.exposures.mapv(|x| U::lit(x.to_f64_lossless())),
            variances: self.variances.mapv(|x| U::lit(x.to_f64_lossless())),
        }
    }

    pub fn into_parts(self) -> (Array3<T>, Array3<T>) {
        (self.exposures, self.variances)
    }
}

/// Whether the decoder kernels are held fixed or fitted with the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PsfMode {
    #[default]
    Fixed,
    Learnable,
}

impl std::str::FromStr for PsfMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fixed" => Ok(PsfMode::Fixed),
            "learnable" => Ok(PsfMode::Learnable),
            other => Err(format!("unknown PSF mode '{other}' (expected fixed|learnable)")),
        }
    }
}

/// One non-negative, unit-sum, odd-sided blur kernel per exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfSet<T> {
    kernels: Array3<T>,
    mode: PsfMode,
}

impl<T: Real> PsfSet<T> {
    pub fn new(kernels: Array3<T>, mode: PsfMode) -> Result<Self> {
        let (n, kh, kw) = kernels.dim();
        if n == 0 {
            return Err(Error::InvalidPsf("empty PSF set".into()));
        }
        if kh != kw {
            return Err(Error::InvalidPsf(format!("kernels must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::EvenKernel(kh));
        }
        for (t, kernel) in kernels.outer_iter().enumerate() {
            let mut sum = 0.0f64;
            for &x in kernel.iter() {
                if !x.is_finite() || x < T::zero() {
                    return Err(Error::InvalidPsf(format!(
                        "kernel {t} has a negative or non-finite entry"
                    )));
                }
                sum += x.to_f64_lossless();
            }
            if (sum - 1.0).abs() > PSF_SUM_TOLERANCE {
                return Err(Error::InvalidPsf(format!("kernel {t} sums to {sum}, not 1")));
            }
        }
        Ok(Self { kernels, mode })
    }

    /// Centered unit impulses: the identity blur.
    pub fn delta(n: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::EvenKernel(k));
        }
        let mut kernels = Array3::zeros((n, k, k));
        for t in 0..n {
            kernels[(t, k / 2, k / 2)] = T::one();
        }
        Self::new(kernels, PsfMode::Fixed)
    }

    pub fn n(&self) -> usize {
        self.kernels.dim().0
    }

    pub fn size(&self) -> usize {
        self.kernels.dim().1
    }

    pub fn mode(&self) -> PsfMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: PsfMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn kernels(&self) -> &Array3<T> {
        &self.kernels
    }

    pub fn kernel(&self, t: usize) -> ArrayView2<'_, T> {
        self.kernels.index_axis(Axis(0), t)
    }

    pub fn cast<U: Real>(&self) -> PsfSet<U> {
        PsfSet {
            kernels: self.kernels.mapv(|x| U::lit(x.to_f64_lossless())),
            mode: self.mode,
        }
    }
}

/// The restored, non-negative sky image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage<T> {
    pixels: Array2<T>,
}

impl<T: Real> LatentImage<T> {
    pub fn new(pixels: Array2<T>) -> Result<Self> {
        for ((i, j), &p) in pixels.indexed_iter() {
            if !p.is_finite() {
                return Err(Error::NonFiniteValue { t: 0, i, j });
            }
            if p < T::zero() {
                return Err(Error::NegativeLatent { i, j });
            }
        }
        Ok(Self { pixels })
    }

    /// Output of a rectifier: non-negative by construction, possibly
    /// overflowed to infinity, which the loss then reports.
    pub(crate) fn rectified(pixels: Array2<T>) -> Self {
        Self { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array2<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<T> {
        self.pixels
    }
}

/// One reconstructed plane per exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction<T> {
    planes: Array3<T>,
}

impl<T: Real> Reconstruction<T> {
    pub fn new(planes: Array3<T>) -> Self {
        Self { planes }
    }

    pub fn planes(&self) -> &Array3<T> {
        &self.planes
    }

    pub fn plane(&self, t: usize) -> ArrayView2<'_, T> {
        self.planes.index_axis(Axis(0), t)
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.planes.dim()
    }

    /// Fails unless the planes have the stack's shape.
    pub fn check_matches(&self, stack: &ExposureStack<T>) -> Result<()> {
        if self.planes.dim() != stack.dim() {
            return Err(Error::ShapeMismatch(format!(
                "reconstruction {:?} vs stack {:?}",
                self.planes.dim(),
                stack.dim()
            )));
        }
        Ok(())
    }
}

/// Gaussian noise model of one exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Same standard deviation at every pixel.
    Constant { sigma: f64 },
    /// Row-major per-pixel variance map.
    PerPixel { variances: Vec<Vec<f64>> },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::Constant { sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::InvalidConfig(format!("noise sigma {sigma} must be >= 0")));
                }
            }
            NoiseModel::PerPixel { variances } => {
                if variances.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidConfig("variance map entries must be >= 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Variance map for an `h x w` frame, floored at [`VARIANCE_FLOOR`].
    pub fn variance_map(&self, h: usize, w: usize) -> Result<Array2<f64>> {
        self.validate()?;
        match self {
            NoiseModel::Constant { sigma } => Ok(Array2::from_elem((h, w), (sigma * sigma).max(VARIANCE_FLOOR))),
            NoiseModel::PerPixel { variances } => {
                if variances.len() != h || variances.iter().any(|row| row.len() != w) {
                    return Err(Error::ShapeMismatch(format!("variance map is not {h}x{w}")));
                }
                Ok(Array2::from_shape_fn((h, w), |(i, j)| variances[i][j].max(VARIANCE_FLOOR)))
            }
        }
    }
}
