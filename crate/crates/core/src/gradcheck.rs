//! Central-difference verification of [`crate::net::backward`] in f64.
//!
//! The objective is piecewise smooth: hidden and final rectifiers and the
//! Huber branch switch introduce kinks. A parameter whose `+h` and `-h`
//! evaluations see a different activation or branch pattern straddles a
//! kink, has no meaningful finite difference, and is skipped and counted.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::loss::{objective, objective_grad, HuberConfig};
use crate::net::{backward, border_width, forward, init_params, Decoder, NetworkConfig, NetworkParams};
use crate::{ExposureStack, PsfMode, PsfSet, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub n: usize,
    pub size: usize,
    pub depth: usize,
    pub kernel_size: usize,
    pub decoder_kernel: usize,
    pub multiplier: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            n: 3,
            size: 12,
            depth: 2,
            kernel_size: 3,
            decoder_kernel: 5,
            multiplier: 1,
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub seed: u64,
    pub psf_mode: PsfMode,
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: Vec<InstanceReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_psfs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Result<PsfSet<f64>> {
    let mut kernels = Array3::from_shape_fn((n, k, k), |_| rng.random_range(0.05..1.0));
    for mut plane in kernels.outer_iter_mut() {
        let s = plane.sum();
        plane.mapv_inplace(|x| x / s);
    }
    PsfSet::new(kernels, PsfMode::Fixed)
}

/// Random problem and randomised (non-identity) parameters for one instance.
pub fn random_instance(
    cfg: &GradcheckConfig,
    seed: u64,
    mode: PsfMode,
) -> Result<(ExposureStack<f64>, NetworkParams<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, s) = (cfg.n, cfg.size);
    let y = Array3::from_shape_fn((n, s, s), |_| rng.random_range(-1.0..3.0));
    let v = Array3::from_shape_fn((n, s, s), |_| rng.random_range(0.3..2.0));
    let stack = ExposureStack::new(y, v)?;
    let psfs = random_psfs(&mut rng, n, cfg.decoder_kernel)?;
    let net = NetworkConfig {
        depth: cfg.depth,
        kernel_size: cfg.kernel_size,
        multiplier: cfg.multiplier,
        psf_mode: mode,
        sigma_init: 0.2,
        seed: rng.random(),
        ..NetworkConfig::default()
    };
    let mut params = init_params(&net, n, Some(&psfs))?;
    let mut normal = |scale: f64| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    for layer in &mut params.depthwise {
        layer.bias.mapv_inplace(|_| normal(0.3));
    }
    let base = params.pointwise[0];
    params.pointwise.mapv_inplace(|_| base * (1.0 + normal(0.3)));
    params.pointwise_bias = normal(0.2);
    if let Decoder::Learnable { logits } = &mut params.decoder {
        logits.mapv_inplace(|l| l + normal(0.5));
    }
    Ok((stack, params))
}

/// Sign pattern of every kinked quantity at the given parameters.
fn pattern(params: &NetworkParams<f64>, stack: &ExposureStack<f64>, huber: &HuberConfig) -> Result<Vec<bool>> {
    let (trace, recon) = forward(params, stack)?;
    let mut p: Vec<bool> = trace.pre_latent.iter().map(|&x| x > 0.0).collect();
    for d in &trace.deviations {
        p.extend(d.iter().map(|&x| x >= 0.0));
    }
    for ((&y, &v), &r) in stack.exposures().iter().zip(stack.variances()).zip(recon.planes()) {
        let sd = v.sqrt();
        p.push((y / sd - r / sd).abs() <= huber.delta);
    }
    Ok(p)
}

fn loss_at(params: &NetworkParams<f64>, stack: &ExposureStack<f64>, huber: &HuberConfig) -> Result<f64> {
    let (_, recon) = forward(params, stack)?;
    objective(stack, &recon, huber)
}

/// Compares the analytic gradient with central differences for every
/// trainable parameter.
pub fn check_params(
    params: &NetworkParams<f64>,
    stack: &ExposureStack<f64>,
    cfg: &GradcheckConfig,
) -> Result<(f64, usize, usize, usize)> {
    let huber = HuberConfig::new(1.0, border_width(params))?;
    let (trace, recon) = forward(params, stack)?;
    let g = objective_grad(stack, &recon, &huber)?;
    let analytic = backward(params, stack, &trace, &g)?.flatten();
    let theta = params.flatten();
    let mut probe = params.clone();
    let (mut worst, mut worst_at, mut checked, mut skipped) = (0.0f64, 0usize, 0usize, 0usize);
    for (idx, &a) in analytic.iter().enumerate() {
        let mut shifted = theta.clone();
        shifted[idx] = theta[idx] + cfg.step;
        probe.load_flat(&shifted)?;
        let plus = loss_at(&probe, stack, &huber)?;
        let pat_plus = pattern(&probe, stack, &huber)?;
        shifted[idx] = theta[idx] - cfg.step;
        probe.load_flat(&shifted)?;
        let minus = loss_at(&probe, stack, &huber)?;
        let pat_minus = pattern(&probe, stack, &huber)?;
        if pat_plus != pat_minus {
            skipped += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * cfg.step);
        let err = relative_error(a, fd, cfg.floor);
        checked += 1;
        if err > worst {
            worst = err;
            worst_at = idx;
        }
    }
    Ok((worst, worst_at, checked, skipped))
}

pub fn check_instance(cfg: &GradcheckConfig, seed: u64, mode: PsfMode) -> Result<InstanceReport> {
    let (stack, params) = random_instance(cfg, seed, mode)?;
    let (max_rel_error, worst_param, checked, skipped_kinks) = check_params(&params, &stack, cfg)?;
    Ok(InstanceReport { seed, psf_mode: mode, max_rel_error, worst_param, checked, skipped_kinks })
}

/// `cfg.instances` instances in each PSF mode.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut instances = Vec::new();
    for mode in [PsfMode::Fixed, PsfMode::Learnable] {
        for i in 0..cfg.instances {
            instances.push(check_instance(cfg, cfg.seed.wrapping_add(i as u64), mode)?);
        }
    }
    let max_rel_error = instances.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { instances, max_rel_error, tolerance: cfg.tolerance, passed: max_rel_error < cfg.tolerance })
}
