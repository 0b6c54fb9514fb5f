//! Synthetic sky scenes, PSFs and corrupted exposure stacks with known truth.

use ndarray::{Array2, Array3, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::{Source, SourceCatalog};
use crate::conv::{conv2d_same, PaddingMode};
use crate::types::NoiseModel;
use crate::{Error, ExposureStack, LatentImage, PsfMode, PsfSet, Result};

/// Sub-pixel samples per axis when integrating PSF profiles over a pixel.
pub const PSF_SUPERSAMPLE: usize = 5;
/// Galaxy profiles are truncated at this Mahalanobis radius.
pub const GALAXY_TRUNCATION: f64 = 4.0;
/// Upper bound (exclusive) on the saturated-pixel fraction.
pub const MAX_P_SAT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    /// Column, in pixels.
    pub x: f64,
    /// Row, in pixels.
    pub y: f64,
    pub flux: f64,
}

/// Elliptical Gaussian; `sigma_major` lies along `angle` (radians from +x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Galaxy {
    pub x: f64,
    pub y: f64,
    pub flux: f64,
    pub sigma_major: f64,
    pub sigma_minor: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub point_sources: Vec<PointSource>,
    pub galaxies: Vec<Galaxy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PsfFamily {
    Gaussian,
    Moffat { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsfSpec {
    pub family: PsfFamily,
    /// One FWHM (px) per exposure.
    pub fwhm: Vec<f64>,
    pub size: usize,
    /// Smallest acceptable fraction of the analytic flux inside the kernel.
    pub min_capture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// One model per exposure, or a single model shared by all.
    pub noise: Vec<NoiseModel>,
    /// When false the variance maps are still reported but no noise is drawn.
    pub add_noise: bool,
    /// Fraction of pixels per exposure replaced by `saturation_level`.
    pub p_sat: f64,
    pub saturation_level: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            noise: vec![NoiseModel::Constant { sigma }],
            add_noise: true,
            p_sat: 0.0,
            saturation_level: 0.0,
            seed,
        }
    }

    fn model(&self, t: usize) -> &NoiseModel {
        if self.noise.len() == 1 {
            &self.noise[0]
        } else {
            &self.noise[t]
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.noise.len() != 1 && self.noise.len() != n {
            return Err(Error::InvalidConfig(format!("{} noise models for {n} exposures", self.noise.len())));
        }
        for m in &self.noise {
            m.validate()?;
        }
        if !(0.0..MAX_P_SAT).contains(&self.p_sat) {
            return Err(Error::InvalidConfig(format!("p_sat must lie in [0, {MAX_P_SAT}), got {}", self.p_sat)));
        }
        if !self.saturation_level.is_finite() {
            return Err(Error::InvalidConfig("saturation level must be finite".into()));
        }
        Ok(())
    }
}

fn check_position(index: usize, x: f64, y: f64, h: usize, w: usize) -> Result<()> {
    let inside = x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
    if inside {
        Ok(())
    } else {
        Err(Error::SourceOutOfFrame { index, height: h, width: w })
    }
}

fn splat_point(img: &mut Array2<f64>, p: &PointSource) {
    let (h, w) = img.dim();
    let (x0, y0) = (p.x.floor(), p.y.floor());
    let (fx, fy) = (p.x - x0, p.y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    for (di, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dj, wx) in [(0, 1.0 - fx), (1, fx)] {
            let weight = wx * wy;
            if weight > 0.0 && y0 + di < h && x0 + dj < w {
                img[(y0 + di, x0 + dj)] += p.flux * weight;
            }
        }
    }
}

fn paint_galaxy(img: &mut Array2<f64>, g: &Galaxy) {
    let (c, s) = (g.angle.cos(), g.angle.sin());
    let norm = g.flux / (2.0 * std::f64::consts::PI * g.sigma_major * g.sigma_minor);
    let cut = GALAXY_TRUNCATION * GALAXY_TRUNCATION;
    for ((i, j), px) in img.indexed_iter_mut() {
        let (dx, dy) = (j as f64 - g.x, i as f64 - g.y);
        let u = (dx * c + dy * s) / g.sigma_major;
        let v = (-dx * s + dy * c) / g.sigma_minor;
        let q = u * u + v * v;
        if q <= cut {
            *px += norm * (-0.5 * q).exp();
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("scene must be at least 1x1".into()));
        }
        let (h, w) = (self.height, self.width);
        for (k, p) in self.point_sources.iter().enumerate() {
            check_position(k, p.x, p.y, h, w)?;
            if !(p.flux > 0.0) {
                return Err(Error::InvalidConfig(format!("point source {k} needs flux > 0")));
            }
        }
        for (k, g) in self.galaxies.iter().enumerate() {
            let index = self.point_sources.len() + k;
            check_position(index, g.x, g.y, h, w)?;
            if !(g.flux > 0.0) || !(g.sigma_major >= 0.5) || !(g.sigma_minor >= 0.5) {
                return Err(Error::InvalidConfig(format!("galaxy {k} needs flux > 0 and sigmas >= 0.5")));
            }
        }
        Ok(())
    }

    /// Renders each source alone, in catalog order.
    fn component_images(&self) -> Vec<Array2<f64>> {
        let blank = || Array2::zeros((self.height, self.width));
        let mut out = Vec::new();
        for p in &self.point_sources {
            let mut img = blank();
            splat_point(&mut img, p);
            out.push(img);
        }
        for g in &self.galaxies {
            let mut img = blank();
            paint_galaxy(&mut img, g);
            out.push(img);
        }
        out
    }

    /// Ground-truth catalog: nominal positions and fluxes, with peak and
    /// footprint area measured on each source rendered alone.
    pub fn truth_catalog(&self) -> SourceCatalog {
        let positions = self
            .point_sources
            .iter()
            .map(|p| (p.x, p.y, p.flux))
            .chain(self.galaxies.iter().map(|g| (g.x, g.y, g.flux)));
        let sources = positions
            .zip(self.component_images())
            .map(|((x, y, flux), img)| Source {
                x,
                y,
                flux,
                peak: img.fold(0.0, |m: f64, &v| m.max(v)),
                area: img.iter().filter(|&&v| v > 0.0).count(),
            })
            .collect();
        SourceCatalog { sources }
    }
}

/// Non-negative truth image of a scene.
pub fn render_scene(spec: &SceneSpec) -> Result<LatentImage<f64>> {
    spec.validate()?;
    let mut img = Array2::zeros((spec.height, spec.width));
    for p in &spec.point_sources {
        splat_point(&mut img, p);
    }
    for g in &spec.galaxies {
        paint_galaxy(&mut img, g);
    }
    LatentImage::new(img)
}

fn profile(family: PsfFamily, fwhm: f64) -> (Box<dyn Fn(f64) -> f64 + Send + Sync>, f64) {
    match family {
        PsfFamily::Gaussian => {
            let sigma = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
            let total = 2.0 * std::f64::consts::PI * sigma * sigma;
            (Box::new(move |r2| (-0.5 * r2 / (sigma * sigma)).exp()), total)
        }
        PsfFamily::Moffat { beta } => {
            let alpha = fwhm / (2.0 * (2f64.powf(1.0 / beta) - 1.0).sqrt());
            let total = std::f64::consts::PI * alpha * alpha / (beta - 1.0);
            (Box::new(move |r2| (1.0 + r2 / (alpha * alpha)).powf(-beta)), total)
        }
    }
}

/// Profile integrated over each pixel of a `size x size` grid centred on
/// the middle pixel, with `sub x sub` samples per pixel. Not normalised.
fn integrate_pixels(family: PsfFamily, fwhm: f64, size: usize, sub: usize) -> Array2<f64> {
    let (f, _) = profile(family, fwhm);
    let c = (size / 2) as f64;
    let step = 1.0 / sub as f64;
    Array2::from_shape_fn((size, size), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..sub {
            for b in 0..sub {
                let dy = i as f64 - c - 0.5 + (a as f64 + 0.5) * step;
                let dx = j as f64 - c - 0.5 + (b as f64 + 0.5) * step;
                acc += f(dx * dx + dy * dy);
            }
        }
        acc * step * step
    })
}

/// Fraction of the analytic profile flux falling inside a `size x size` kernel.
pub fn psf_capture_fraction(family: PsfFamily, fwhm: f64, size: usize) -> f64 {
    let (_, total) = profile(family, fwhm);
    integrate_pixels(family, fwhm, size, 15).sum() / total
}

impl PsfSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.size));
        }
        if self.fwhm.is_empty() || self.fwhm.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::InvalidPsf("every FWHM must be finite and > 0".into()));
        }
        if let PsfFamily::Moffat { beta } = self.family {
            if !(beta > 1.0) {
                return Err(Error::InvalidPsf(format!("Moffat beta must exceed 1, got {beta}")));
            }
        }
        Ok(())
    }
}

/// Normalised, pixel-integrated PSF kernels, one per FWHM.
pub fn make_psfs(spec: &PsfSpec) -> Result<PsfSet<f64>> {
    spec.validate()?;
    let k = spec.size;
    let mut kernels = Array3::zeros((spec.fwhm.len(), k, k));
    for (mut out, &fwhm) in kernels.outer_iter_mut().zip(&spec.fwhm) {
        let captured = psf_capture_fraction(spec.family, fwhm, k);
        if captured < spec.min_capture {
            return Err(Error::PsfTruncation { size: k, captured, required: spec.min_capture });
        }
        let raw = integrate_pixels(spec.family, fwhm, k, PSF_SUPERSAMPLE);
        let sum = raw.sum();
        out.assign(&(raw / sum));
    }
    PsfSet::new(kernels, PsfMode::Fixed)
}

#[derive(Debug, Clone)]
pub struct SynthStack {
    pub stack: ExposureStack<f64>,
    pub psfs: PsfSet<f64>,
    pub truth: LatentImage<f64>,
}

/// Renders the scene, blurs it with each PSF and applies the corruption.
/// Exposure `t` draws from its own random stream, so the result does not
/// depend on thread scheduling.
pub fn make_stack(scene: &SceneSpec, psf: &PsfSpec, corrupt: &CorruptionSpec, n: usize) -> Result<SynthStack> {
    if psf.fwhm.len() != n {
        return Err(Error::InvalidConfig(format!("{} FWHM values for {n} exposures", psf.fwhm.len())));
    }
    corrupt.validate(n)?;
    let truth = render_scene(scene)?;
    let psfs = make_psfs(psf)?;
    if psfs.size() > scene.height.min(scene.width) {
        return Err(Error::KernelTooLarge { kernel: psfs.size(), height: scene.height, width: scene.width });
    }
    let (h, w) = (scene.height, scene.width);
    let planes: Vec<Result<(Array2<f64>, Array2<f64>)>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let mut y = conv2d_same(truth.pixels().view(), psfs.kernel(t), PaddingMode::Zero)?;
            let model = corrupt.model(t);
            let var = model.variance_map(h, w)?;
            let mut rng = ChaCha8Rng::seed_from_u64(corrupt.seed);
            rng.set_stream(t as u64 + 1);
            if corrupt.add_noise {
                let sd: Array2<f64> = match model {
                    NoiseModel::Constant { sigma } => Array2::from_elem((h, w), *sigma),
                    NoiseModel::PerPixel { .. } => model.variance_map(h, w)?.mapv(f64::sqrt),
                };
                for (px, s) in y.iter_mut().zip(sd.iter()) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *px += s * z;
                }
            }
            let count = (corrupt.p_sat * (h * w) as f64).round() as usize;
            if count > 0 {
                let flat = y.as_slice_mut().expect("standard layout");
                for idx in sample(&mut rng, h * w, count) {
                    flat[idx] = corrupt.saturation_level;
                }
            }
            Ok((y, var))
        })
        .collect();
    let mut exposures = Array3::zeros((n, h, w));
    let mut variances = Array3::zeros((n, h, w));
    for (t, plane) in planes.into_iter().enumerate() {
        let (y, v) = plane?;
        exposures.index_axis_mut(Axis(0), t).assign(&y);
        variances.index_axis_mut(Axis(0), t).assign(&v);
    }
    Ok(SynthStack { stack: ExposureStack::new(exposures, variances)?, psfs, truth })
}

/// Complete description of a benchmark instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub psf: PsfSpec,
    pub corruption: CorruptionSpec,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub stack: ExposureStack<f64>,
    pub psfs: PsfSet<f64>,
    pub truth: LatentImage<f64>,
    pub catalog: SourceCatalog,
}

impl BenchmarkSpec {
    /// 64x64 frame, 8 exposures, Moffat PSFs (beta 3.5) with FWHM drawn
    /// from U[2, 4] px in 13x13 kernels, white noise of sigma 1, and 25
    /// sources on a jittered 5x5 grid: 20 point sources with log-uniform
    /// flux in [50, 2000] and 5 elliptical galaxies in the inner cells.
    pub fn standard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, n) = (64usize, 64usize, 8usize);
        let inner: Vec<usize> = [6, 7, 8, 11, 12, 13, 16, 17, 18].to_vec();
        let galaxy_cells: Vec<usize> = sample(&mut rng, inner.len(), 5).into_iter().map(|i| inner[i]).collect();
        let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (rng.random_range(lo.ln()..hi.ln())).exp();
        let mut point_sources = Vec::new();
        let mut galaxies = Vec::new();
        for cell in 0..25 {
            let (ci, cj) = (cell / 5, cell % 5);
            let y = 10.0 + 11.0 * ci as f64 + rng.random_range(-1.5..1.5);
            let x = 10.0 + 11.0 * cj as f64 + rng.random_range(-1.5..1.5);
            if galaxy_cells.contains(&cell) {
                let sigma_major = rng.random_range(1.0..2.0);
                let sigma_minor = rng.random_range(0.6..=sigma_major);
                galaxies.push(Galaxy {
                    x,
                    y,
                    flux: log_uniform(&mut rng, 300.0, 3000.0),
                    sigma_major,
                    sigma_minor,
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                });
            } else {
                point_sources.push(PointSource { x, y, flux: log_uniform(&mut rng, 50.0, 2000.0) });
            }
        }
        let fwhm = (0..n).map(|_| rng.random_range(2.0..4.0)).collect();
        Self {
            scene: SceneSpec { height: h, width: w, point_sources, galaxies },
            psf: PsfSpec { family: PsfFamily::Moffat { beta: 3.5 }, fwhm, size: 13, min_capture: 0.95 },
            corruption: CorruptionSpec::gaussian(1.0, seed),
            n,
        }
    }

    /// Same scene, PSFs and noise draws with a fraction `p_sat` of pixels
    /// per exposure saturated. The ceiling is the brightest pixel of the
    /// noise-free stack, i.e. the full well is reached by the brightest
    /// star.
    pub fn with_saturation(&self, p_sat: f64) -> Result<Self> {
        let clean = CorruptionSpec { add_noise: false, p_sat: 0.0, ..self.corruption.clone() };
        let s = make_stack(&self.scene, &self.psf, &clean, self.n)?;
        let ceiling = s.stack.exposures().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut out = self.clone();
        out.corruption.p_sat = p_sat;
        out.corruption.saturation_level = ceiling;
        Ok(out)
    }

    /// Same instance without noise draws (variances still report sigma).
    pub fn noiseless(&self) -> Self {
        let mut out = self.clone();
        out.corruption.add_noise = false;
        out
    }

    pub fn generate(&self) -> Result<Benchmark> {
        let s = make_stack(&self.scene, &self.psf, &self.corruption, self.n)?;
        Ok(Benchmark {
            spec: self.clone(),
            stack: s.stack,
            psfs: s.psfs,
            truth: s.truth,
            catalog: self.scene.truth_catalog(),
        })
    }
}

/// The standard benchmark instance for `seed`.
pub fn standard_benchmark(seed: u64) -> Result<Benchmark> {
    BenchmarkSpec::standard(seed).generate()
}
