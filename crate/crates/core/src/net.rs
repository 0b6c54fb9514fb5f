//! Encoder/decoder network and its hand-derived backward pass.
//!
//! Encoder: every exposure runs through its own chain of `depth` depthwise
//! convolutions (reflect padding). A hidden layer maps its input `h` to
//!
//! ```text
//! h' = h + leaky(K * h + b - h)
//! ```
//!
//! i.e. the leaky rectifier acts on the layer's departure from its input.
//! With `alpha = 1` this is the plain linear layer `K * h + b`, and with a
//! delta kernel and zero bias it is exactly the identity for any `h`,
//! negative values included. The last depthwise layer is linear. All chain
//! outputs are concatenated, mixed by a 1x1 pointwise convolution and passed
//! through `max(0, .)` to give the latent image.
//!
//! Decoder: one convolution per exposure (zero padding) with either a fixed
//! PSF or `softmax(logits)`, which keeps learned kernels positive and
//! unit-sum by construction.
//!
//! With identity-start parameters (`sigma_init = 0`) the encoder computes
//! `max(0, sum_t y_t / n)` bit-for-bit, with the same accumulation order as
//! [`crate::analyze::coadd_mean`].

use std::hash::Hasher;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvBackend, PaddingMode};
use crate::{Error, ExposureStack, LatentImage, PsfMode, PsfSet, Real, Reconstruction, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Number of depthwise layers per chain.
    pub depth: usize,
    /// Side of the depthwise kernels (odd).
    pub kernel_size: usize,
    /// Channel multiplier per depthwise layer.
    pub multiplier: usize,
    /// Negative slope of the hidden leaky rectifiers, in `[0, 1)`.
    pub alpha: f64,
    /// Decoder kernel side. Taken from the PSFs when they are supplied.
    pub decoder_kernel: Option<usize>,
    pub psf_mode: PsfMode,
    /// Share depthwise kernels across exposures instead of one chain each.
    pub share_weights: bool,
    /// Scale of the zero-sum perturbation added to the delta kernels at init.
    pub sigma_init: f64,
    /// FWHM (px) of the Gaussian starting guess for learnable PSFs when no
    /// PSFs are supplied.
    pub initial_fwhm: f64,
    pub seed: u64,
    pub backend: ConvBackend,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            kernel_size: 5,
            multiplier: 1,
            alpha: 0.1,
            decoder_kernel: None,
            psf_mode: PsfMode::Fixed,
            share_weights: false,
            sigma_init: 1e-2,
            initial_fwhm: 3.0,
            seed: 0,
            backend: ConvBackend::Auto,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel_size));
        }
        if let Some(k) = self.decoder_kernel {
            if k % 2 == 0 {
                return Err(Error::EvenKernel(k));
            }
        }
        if self.multiplier == 0 {
            return bad("channel multiplier must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("leaky slope must lie in [0, 1), got {}", self.alpha));
        }
        if !(self.sigma_init >= 0.0 && self.sigma_init.is_finite()) {
            return bad(format!("sigma_init must be >= 0, got {}", self.sigma_init));
        }
        if !(self.initial_fwhm > 0.0) {
            return bad(format!("initial_fwhm must be > 0, got {}", self.initial_fwhm));
        }
        Ok(())
    }

    /// Channels leaving depthwise layer `layer` (0-based) for `n` exposures.
    pub fn channels(&self, n: usize, layer: usize) -> usize {
        n * self.multiplier.pow(layer as u32 + 1)
    }

    fn kernels_in_layer(&self, n: usize, layer: usize) -> usize {
        if self.share_weights {
            self.multiplier.pow(layer as u32 + 1)
        } else {
            self.channels(n, layer)
        }
    }

    fn kernel_index(&self, n: usize, layer: usize, channel: usize) -> usize {
        channel % self.kernels_in_layer(n, layer)
    }
}

/// Kernels and biases of one depthwise layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseLayer<T> {
    /// `kernels x k x k`
    pub kernels: Array3<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder<T> {
    Fixed(PsfSet<T>),
    Learnable { logits: Array3<T> },
}

/// All parameters of the network together with the configuration that
/// shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetworkConfig,
    pub n: usize,
    pub depthwise: Vec<DepthwiseLayer<T>>,
    pub pointwise: Array1<T>,
    pub pointwise_bias: T,
    pub decoder: Decoder<T>,
}

/// Gradients with the same layout as the trainable part of [`NetworkParams`].
/// `decoder_logits` is `None` when the PSFs are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients<T> {
    pub depthwise: Vec<DepthwiseLayer<T>>,
    pub pointwise: Array1<T>,
    pub pointwise_bias: T,
    pub decoder_logits: Option<Array3<T>>,
}

/// Numerically stable softmax over all entries of a kernel.
pub fn softmax<T: Real>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let sum = e.iter().fold(T::zero(), |acc, &x| acc + x);
    e.mapv(|x| x / sum)
}

fn gaussian_logits(k: usize, fwhm: f64) -> Array2<f64> {
    let sigma = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let c = (k / 2) as f64;
    Array2::from_shape_fn((k, k), |(i, j)| {
        let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
        -r2 / (2.0 * sigma * sigma)
    })
}

/// Builds identity-start parameters for `n` exposures.
///
/// Depthwise kernels start as centered deltas plus a zero-sum Gaussian
/// perturbation of scale `sigma_init` (zero-sum so the perturbed chain
/// still preserves flux), biases at 0, pointwise weights at
/// `1 / (n * multiplier^depth)`. `psfs` is required for fixed mode and
/// optional for learnable mode, where it seeds the logits.
pub fn init_params<T: Real>(config: &NetworkConfig, n: usize, psfs: Option<&PsfSet<T>>) -> Result<NetworkParams<T>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one exposure".into()));
    }
    if let Some(p) = psfs {
        if p.n() != n {
            return Err(Error::ShapeMismatch(format!("{} PSFs for {n} exposures", p.n())));
        }
        if let Some(k) = config.decoder_kernel {
            if k != p.size() {
                return Err(Error::ShapeMismatch(format!("decoder kernel {k} vs PSF side {}", p.size())));
            }
        }
    }

    let k = config.kernel_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut depthwise = Vec::with_capacity(config.depth);
    for layer in 0..config.depth {
        let count = config.kernels_in_layer(n, layer);
        let mut kernels = Array3::zeros((count, k, k));
        for mut kernel in kernels.outer_iter_mut() {
            if config.sigma_init > 0.0 {
                let noise: Vec<f64> = (0..k * k)
                    .map(|_| config.sigma_init * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                let mean = noise.iter().sum::<f64>() / noise.len() as f64;
                for (x, z) in kernel.iter_mut().zip(&noise) {
                    *x = T::lit(z - mean);
                }
            }
            kernel[(k / 2, k / 2)] = kernel[(k / 2, k / 2)] + T::one();
        }
        depthwise.push(DepthwiseLayer { kernels, bias: Array1::zeros(count) });
    }

    let chans = config.channels(n, config.depth - 1);
    let pointwise = Array1::from_elem(chans, T::one() / T::lit(chans as f64));

    let decoder = match config.psf_mode {
        PsfMode::Fixed => {
            let p = psfs.ok_or_else(|| Error::InvalidConfig("fixed PSF mode needs PSFs".into()))?;
            Decoder::Fixed(p.clone().with_mode(PsfMode::Fixed))
        }
        PsfMode::Learnable => {
            let logits = match psfs {
                Some(p) => p.kernels().mapv(|f| T::lit(f.to_f64_lossless().max(1e-30).ln())),
                None => {
                    let kd = config.decoder_kernel.ok_or_else(|| {
                        Error::InvalidConfig("learnable PSFs without a starting PSF need decoder_kernel".into())
                    })?;
                    let g = gaussian_logits(kd, config.initial_fwhm);
                    Array3::from_shape_fn((n, kd, kd), |(_, i, j)| T::lit(g[(i, j)]))
                }
            };
            Decoder::Learnable { logits }
        }
    };

    Ok(NetworkParams {
        config: config.clone(),
        n,
        depthwise,
        pointwise,
        pointwise_bias: T::zero(),
        decoder,
    })
}

impl<T: Real> NetworkParams<T> {
    pub fn decoder_kernel(&self) -> usize {
        match &self.decoder {
            Decoder::Fixed(p) => p.size(),
            Decoder::Learnable { logits } => logits.dim().1,
        }
    }

    /// Decoder kernels as a PSF set (softmax of the logits when learnable).
    pub fn realized_psfs(&self) -> Result<PsfSet<T>> {
        match &self.decoder {
            Decoder::Fixed(p) => Ok(p.clone()),
            Decoder::Learnable { logits } => {
                let mut kernels = Array3::zeros(logits.dim());
                for (mut out, l) in kernels.outer_iter_mut().zip(logits.outer_iter()) {
                    out.assign(&softmax(l));
                }
                PsfSet::new(kernels, PsfMode::Learnable)
            }
        }
    }

    /// Trainable tensors in canonical order: per layer (kernels, bias),
    /// pointwise weights, pointwise bias, then decoder logits if learnable.
    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for layer in &self.depthwise {
            out.push(layer.kernels.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.pointwise.as_slice().expect("standard layout"));
        out.push(std::slice::from_ref(&self.pointwise_bias));
        if let Decoder::Learnable { logits } = &self.decoder {
            out.push(logits.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for layer in &mut self.depthwise {
            out.push(layer.kernels.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.pointwise.as_slice_mut().expect("standard layout"));
        out.push(std::slice::from_mut(&mut self.pointwise_bias));
        if let Decoder::Learnable { logits } = &mut self.decoder {
            out.push(logits.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|s| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.trainable().iter().flat_map(|s| s.iter().map(|x| x.to_f64_lossless())).collect()
    }

    /// Overwrites every trainable value from `values` (canonical order).
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_trainable() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} trainable parameters",
                values.len(),
                self.num_trainable()
            )));
        }
        let mut it = values.iter();
        for slice in self.trainable_mut() {
            for (x, v) in slice.iter_mut().zip(&mut it) {
                *x = T::lit(*v);
            }
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for slice in self.trainable() {
            for x in slice {
                h.write_u64(x.to_f64_lossless().to_bits());
            }
        }
        if let Decoder::Fixed(p) = &self.decoder {
            for x in p.kernels() {
                h.write_u64(x.to_f64_lossless().to_bits());
            }
        }
        h.finish()
    }

    fn check_stack(&self, stack: &ExposureStack<T>) -> Result<()> {
        if stack.n() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "parameters built for {} exposures, stack has {}",
                self.n,
                stack.n()
            )));
        }
        let k = self.config.kernel_size.max(self.decoder_kernel());
        if k > stack.height().min(stack.width()) {
            return Err(Error::KernelTooLarge { kernel: k, height: stack.height(), width: stack.width() });
        }
        Ok(())
    }
}

impl<T: Real> ParamGradients<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for layer in &self.depthwise {
            out.push(layer.kernels.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.pointwise.as_slice().expect("standard layout"));
        out.push(std::slice::from_ref(&self.pointwise_bias));
        if let Some(l) = &self.decoder_logits {
            out.push(l.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().iter().flat_map(|s| s.iter().map(|x| x.to_f64_lossless())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

#[derive(Default)]
struct Fnv(u64);

impl Hasher for Fnv {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        let mut h = if self.0 == 0 { 0xcbf29ce484222325 } else { self.0 };
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        self.0 = h;
    }
}

/// Order-sensitive hash of the exposure values.
pub fn stack_fingerprint<T: Real>(stack: &ExposureStack<T>) -> u64 {
    let mut h = Fnv::default();
    for x in stack.exposures() {
        h.write_u64(x.to_f64_lossless().to_bits());
    }
    h.finish()
}

/// Intermediate activations of one encoder pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// Input of each depthwise layer; entry 0 is the exposures themselves.
    pub layer_inputs: Vec<Array3<T>>,
    /// `K * h + b - h` of each hidden layer (all layers but the last).
    pub deviations: Vec<Array3<T>>,
    /// Output channels of the last depthwise layer.
    pub chain_output: Array3<T>,
    /// Pointwise output before the final rectifier.
    pub pre_latent: Array2<T>,
    pub latent: LatentImage<T>,
    params_id: u64,
    stack_id: u64,
}

#[inline]
fn leaky<T: Real>(x: T, alpha: T) -> T {
    if x > T::zero() {
        x
    } else {
        alpha * x
    }
}

/// Derivative of the hidden rectifier. Taken as 1 at exactly zero, so the
/// identity-start network backpropagates like a linear chain.
#[inline]
fn leaky_slope<T: Real>(x: T, alpha: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        alpha
    }
}

/// Final rectifier, `max(0, x)`; always returns `+0` for non-positive input.
#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

fn stack_planes<T: Real>(planes: Vec<Array2<T>>, h: usize, w: usize) -> Array3<T> {
    let mut out = Array3::zeros((planes.len(), h, w));
    for (mut dst, src) in out.outer_iter_mut().zip(planes) {
        dst.assign(&src);
    }
    out
}

/// Encoder forward pass: latent image plus the trace needed for [`backward`].
pub fn encode<T: Real>(params: &NetworkParams<T>, stack: &ExposureStack<T>) -> Result<(LatentImage<T>, ForwardTrace<T>)> {
    params.check_stack(stack)?;
    let cfg = &params.config;
    let (n, h, w) = stack.dim();
    let m = cfg.multiplier;
    let alpha = T::lit(cfg.alpha);

    let mut layer_inputs = Vec::with_capacity(cfg.depth);
    let mut deviations = Vec::with_capacity(cfg.depth.saturating_sub(1));
    let mut current = stack.exposures().clone();

    for layer in 0..cfg.depth {
        let hidden = layer + 1 < cfg.depth;
        let chans = cfg.channels(n, layer);
        let weights = &params.depthwise[layer];
        let results: Vec<Result<(Array2<T>, Option<Array2<T>>)>> = (0..chans)
            .into_par_iter()
            .map(|ch| {
                let input = current.index_axis(Axis(0), ch / m);
                let ki = cfg.kernel_index(n, layer, ch);
                let bias = weights.bias[ki];
                let mut z = conv::conv2d_same_with(
                    cfg.backend,
                    input,
                    weights.kernels.index_axis(Axis(0), ki),
                    PaddingMode::Reflect,
                )?;
                z.mapv_inplace(|x| x + bias);
                if hidden {
                    let mut dev = z;
                    dev.zip_mut_with(&input, |d, &x| *d = *d - x);
                    let mut out = input.to_owned();
                    out.zip_mut_with(&dev, |o, &d| *o = *o + leaky(d, alpha));
                    Ok((out, Some(dev)))
                } else {
                    Ok((z, None))
                }
            })
            .collect();
        let mut outs = Vec::with_capacity(chans);
        let mut devs = Vec::with_capacity(chans);
        for r in results {
            let (o, d) = r?;
            outs.push(o);
            if let Some(d) = d {
                devs.push(d);
            }
        }
        if hidden {
            deviations.push(stack_planes(devs, h, w));
        }
        layer_inputs.push(std::mem::replace(&mut current, stack_planes(outs, h, w)));
    }

    let mut pre_latent = Array2::zeros((h, w));
    for (c, plane) in current.outer_iter().enumerate() {
        let wc = params.pointwise[c];
        pre_latent.zip_mut_with(&plane, |acc, &x| *acc = *acc + wc * x);
    }
    let b = params.pointwise_bias;
    pre_latent.mapv_inplace(|x| x + b);
    let latent = LatentImage::rectified(pre_latent.mapv(relu));

    let trace = ForwardTrace {
        layer_inputs,
        deviations,
        chain_output: current,
        pre_latent,
        latent: latent.clone(),
        params_id: params.fingerprint(),
        stack_id: stack_fingerprint(stack),
    };
    Ok((latent, trace))
}

/// Decoder: `conv2d_same(latent, f_t, zero)` for every exposure `t`.
pub fn decode<T: Real>(params: &NetworkParams<T>, latent: &LatentImage<T>) -> Result<Reconstruction<T>> {
    let psfs = params.realized_psfs()?;
    let backend = params.config.backend;
    let planes: Vec<Result<Array2<T>>> = (0..psfs.n())
        .into_par_iter()
        .map(|t| conv::conv2d_same_with(backend, latent.pixels().view(), psfs.kernel(t), PaddingMode::Zero))
        .collect();
    let planes = planes.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Reconstruction::new(stack_planes(planes, latent.height(), latent.width())))
}

/// Encoder followed by decoder.
pub fn forward<T: Real>(
    params: &NetworkParams<T>,
    stack: &ExposureStack<T>,
) -> Result<(ForwardTrace<T>, Reconstruction<T>)> {
    let (latent, trace) = encode(params, stack)?;
    let recon = decode(params, &latent)?;
    Ok((trace, recon))
}

/// Reverse accumulation of `loss_grad` (the loss gradient with respect to
/// every reconstructed pixel) through decoder, final rectifier, pointwise
/// mixing, hidden rectifiers and depthwise convolutions.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    stack: &ExposureStack<T>,
    trace: &ForwardTrace<T>,
    loss_grad: &Array3<T>,
) -> Result<ParamGradients<T>> {
    params.check_stack(stack)?;
    if loss_grad.dim() != stack.dim() {
        return Err(Error::ShapeMismatch(format!(
            "loss gradient {:?} vs stack {:?}",
            loss_grad.dim(),
            stack.dim()
        )));
    }
    if trace.params_id != params.fingerprint() {
        return Err(Error::TraceMismatch("parameters changed since the forward pass".into()));
    }
    if trace.stack_id != stack_fingerprint(stack) || trace.pre_latent.dim() != (stack.height(), stack.width()) {
        return Err(Error::TraceMismatch("trace was computed on a different stack".into()));
    }

    let cfg = &params.config;
    let (n, h, w) = stack.dim();
    let m = cfg.multiplier;
    let alpha = T::lit(cfg.alpha);
    let backend = cfg.backend;
    let psfs = params.realized_psfs()?;
    let learnable = matches!(params.decoder, Decoder::Learnable { .. });

    // decoder
    let latent = trace.latent.pixels();
    let padded_latent = conv::pad(latent.view(), psfs.size() / 2, PaddingMode::Zero);
    let per_exposure: Vec<Result<(Array2<T>, Option<Array2<T>>)>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let u = loss_grad.index_axis(Axis(0), t);
            let f = psfs.kernel(t);
            let g_latent = conv::conv2d_same_adjoint(backend, u, f, PaddingMode::Zero)?;
            let g_logits = if learnable {
                let g_f = conv::kernel_gradient(padded_latent.view(), u);
                let dot = g_f.iter().zip(f.iter()).fold(T::zero(), |acc, (&g, &p)| acc + g * p);
                let mut g_l = g_f;
                g_l.zip_mut_with(&f, |g, &p| *g = p * (*g - dot));
                Some(g_l)
            } else {
                None
            };
            Ok((g_latent, g_logits))
        })
        .collect();
    let mut g_latent = Array2::<T>::zeros((h, w));
    let mut logit_grads = Vec::new();
    for r in per_exposure {
        let (gl, gk) = r?;
        g_latent = g_latent + &gl;
        if let Some(gk) = gk {
            logit_grads.push(gk);
        }
    }
    let decoder_logits = learnable.then(|| stack_planes(logit_grads, psfs.size(), psfs.size()));

    // final rectifier
    let mut g_pre = g_latent;
    g_pre.zip_mut_with(&trace.pre_latent, |g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });

    // pointwise mixing
    let chain = &trace.chain_output;
    let g_pointwise = Array1::from_shape_fn(chain.dim().0, |c| {
        chain
            .index_axis(Axis(0), c)
            .iter()
            .zip(g_pre.iter())
            .fold(T::zero(), |acc, (&x, &g)| acc + x * g)
    });
    let g_pointwise_bias = g_pre.iter().fold(T::zero(), |acc, &g| acc + g);
    let mut g_out = Array3::zeros(chain.dim());
    for (c, mut plane) in g_out.outer_iter_mut().enumerate() {
        let wc = params.pointwise[c];
        plane.assign(&g_pre.mapv(|g| wc * g));
    }

    // depthwise layers, last to first
    let k = cfg.kernel_size;
    let mut depthwise: Vec<DepthwiseLayer<T>> = Vec::with_capacity(cfg.depth);
    for layer in (0..cfg.depth).rev() {
        let hidden = layer + 1 < cfg.depth;
        let chans = cfg.channels(n, layer);
        let inputs = &trace.layer_inputs[layer];
        let weights = &params.depthwise[layer];
        let need_input_grad = layer > 0;
        let per_channel: Vec<Result<(Array2<T>, T, Option<Array2<T>>)>> = (0..chans)
            .into_par_iter()
            .map(|ch| {
                let input = inputs.index_axis(Axis(0), ch / m);
                let upstream = g_out.index_axis(Axis(0), ch);
                let (g_z, passthrough) = if hidden {
                    let dev = trace.deviations[layer].index_axis(Axis(0), ch);
                    let mut g_z = upstream.to_owned();
                    g_z.zip_mut_with(&dev, |g, &d| *g = *g * leaky_slope(d, alpha));
                    let mut pass = upstream.to_owned();
                    pass.zip_mut_with(&g_z, |p, &gz| *p = *p - gz);
                    (g_z, Some(pass))
                } else {
                    (upstream.to_owned(), None)
                };
                let padded = conv::pad(input, k / 2, PaddingMode::Reflect);
                let g_kernel = conv::kernel_gradient(padded.view(), g_z.view());
                let g_bias = g_z.iter().fold(T::zero(), |acc, &g| acc + g);
                let g_input = if need_input_grad {
                    let ki = cfg.kernel_index(n, layer, ch);
                    let mut gi = conv::conv2d_same_adjoint(
                        backend,
                        g_z.view(),
                        weights.kernels.index_axis(Axis(0), ki),
                        PaddingMode::Reflect,
                    )?;
                    if let Some(p) = passthrough {
                        gi = gi + &p;
                    }
                    Some(gi)
                } else {
                    None
                };
                Ok((g_kernel, g_bias, g_input))
            })
            .collect();

        let count = cfg.kernels_in_layer(n, layer);
        let mut kernels = Array3::<T>::zeros((count, k, k));
        let mut bias = Array1::<T>::zeros(count);
        let mut g_parent = Array3::<T>::zeros(inputs.dim());
        for (ch, r) in per_channel.into_iter().enumerate() {
            let (gk, gb, gi) = r?;
            let ki = cfg.kernel_index(n, layer, ch);
            let mut slot = kernels.index_axis_mut(Axis(0), ki);
            slot.zip_mut_with(&gk, |a, &b| *a = *a + b);
            bias[ki] = bias[ki] + gb;
            if let Some(gi) = gi {
                let mut parent = g_parent.index_axis_mut(Axis(0), ch / m);
                parent.zip_mut_with(&gi, |a, &b| *a = *a + b);
            }
        }
        depthwise.push(DepthwiseLayer { kernels, bias });
        g_out = g_parent;
    }
    depthwise.reverse();

    Ok(ParamGradients {
        depthwise,
        pointwise: g_pointwise,
        pointwise_bias: g_pointwise_bias,
        decoder_logits,
    })
}

/// Pixels within this many of the edge are excluded from the loss.
pub fn border_width<T: Real>(params: &NetworkParams<T>) -> usize {
    params.decoder_kernel() / 2
}

/// Interior view helper used by tests and metrics.
pub fn interior<T: Real>(img: ArrayView2<'_, T>, border: usize) -> ArrayView2<'_, T> {
    let (h, w) = img.dim();
    img.slice_move(s![border..h - border, border..w - border])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn random_stack(seed: u64, n: usize, h: usize, w: usize) -> ExposureStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array3::from_shape_fn((n, h, w), |_| rng.random_range(-2.0..5.0));
        let v = Array3::from_shape_fn((n, h, w), |_| rng.random_range(0.5..2.0));
        ExposureStack::new(y, v).unwrap()
    }

    fn identity_config(depth: usize) -> NetworkConfig {
        NetworkConfig { depth, sigma_init: 0.0, ..NetworkConfig::default() }
    }

    #[test]
    fn identity_start_is_relu_of_mean() {
        let stack = random_stack(1, 3, 9, 8);
        let psfs = PsfSet::delta(3, 3).unwrap();
        let params = init_params(&identity_config(3), 3, Some(&psfs)).unwrap();
        let (latent, _) = encode(&params, &stack).unwrap();
        let inv = 1.0 / 3.0;
        for i in 0..9 {
            for j in 0..8 {
                let mut acc = 0.0;
                for t in 0..3 {
                    acc += inv * stack.exposures()[(t, i, j)];
                }
                acc += 0.0;
                let expected = if acc > 0.0 { acc } else { 0.0 };
                assert_eq!(latent.pixels()[(i, j)].to_bits(), expected.to_bits());
            }
        }
    }

    #[test]
    fn identical_images_give_the_image_back() {
        let img = Array2::from_shape_fn((6, 7), |(i, j)| (i * 7 + j) as f64 * 0.3);
        let mut y = Array3::zeros((2, 6, 7));
        for mut p in y.outer_iter_mut() {
            p.assign(&img);
        }
        let stack = ExposureStack::with_constant_variance(y, 1.0).unwrap();
        let params = init_params(&identity_config(2), 2, Some(&PsfSet::delta(2, 3).unwrap())).unwrap();
        let (latent, _) = encode(&params, &stack).unwrap();
        assert_eq!(latent.pixels(), &img);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let cfg = NetworkConfig { psf_mode: PsfMode::Learnable, decoder_kernel: Some(5), ..Default::default() };
        let a = init_params::<f32>(&cfg, 3, None).unwrap();
        let b = init_params::<f32>(&cfg, 3, None).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f32>(&NetworkConfig { seed: 1, ..cfg }, 3, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perturbed_kernels_keep_unit_sum() {
        let cfg = NetworkConfig { sigma_init: 0.05, ..Default::default() };
        let p = init_params::<f64>(&cfg, 4, Some(&PsfSet::delta(4, 3).unwrap())).unwrap();
        for layer in &p.depthwise {
            for kernel in layer.kernels.outer_iter() {
                assert!((kernel.sum() - 1.0).abs() < 1e-12);
                assert!(kernel.iter().filter(|&&x| x != 0.0).count() > 1);
            }
        }
    }

    #[test]
    fn decode_with_delta_psfs_copies_latent() {
        let params = init_params::<f64>(&identity_config(1), 3, Some(&PsfSet::delta(3, 5).unwrap())).unwrap();
        let latent = LatentImage::new(Array2::from_shape_fn((8, 8), |(i, j)| (i + j) as f64)).unwrap();
        let recon = decode(&params, &latent).unwrap();
        for t in 0..3 {
            assert_eq!(recon.plane(t), latent.pixels().view());
        }
    }

    #[test]
    fn decode_constant_latent_interior() {
        let mut k = Array3::from_elem((2, 3, 3), 0.05);
        k[(0, 1, 1)] = 0.6;
        k[(1, 1, 1)] = 0.6;
        let psfs = PsfSet::new(k, PsfMode::Fixed).unwrap();
        let params = init_params::<f64>(&identity_config(1), 2, Some(&psfs)).unwrap();
        let latent = LatentImage::new(Array2::from_elem((6, 6), 2.5)).unwrap();
        let recon = decode(&params, &latent).unwrap();
        for t in 0..2 {
            for &x in interior(recon.plane(t), 1).iter() {
                assert!((x - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_extremes_are_valid_psfs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let logits = Array3::from_shape_fn((2, 5, 5), |_| rng.random_range(-50.0f32..50.0));
            let cfg = NetworkConfig { psf_mode: PsfMode::Learnable, decoder_kernel: Some(5), ..Default::default() };
            let mut p = init_params::<f32>(&cfg, 2, None).unwrap();
            p.decoder = Decoder::Learnable { logits };
            let psfs = p.realized_psfs().unwrap();
            for kernel in psfs.kernels().outer_iter() {
                let sum: f64 = kernel.iter().map(|&x| x as f64).sum();
                assert!((sum - 1.0).abs() <= 1e-6);
                assert!(kernel.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let stack = random_stack(4, 2, 8, 8);
        let cfg = NetworkConfig { depth: 2, kernel_size: 3, psf_mode: PsfMode::Learnable, decoder_kernel: Some(3), sigma_init: 0.1, ..Default::default() };
        let params = init_params(&cfg, 2, None).unwrap();
        let (_, trace) = encode(&params, &stack).unwrap();
        let g = backward(&params, &stack, &trace, &Array3::zeros((2, 8, 8))).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
        assert!(g.decoder_logits.is_some());
    }

    #[test]
    fn fixed_psfs_have_no_decoder_gradient() {
        let stack = random_stack(5, 2, 8, 8);
        let cfg = NetworkConfig { depth: 2, kernel_size: 3, ..Default::default() };
        let params = init_params(&cfg, 2, Some(&PsfSet::delta(2, 3).unwrap())).unwrap();
        let (_, trace) = encode(&params, &stack).unwrap();
        let g = backward(&params, &stack, &trace, &Array3::ones((2, 8, 8))).unwrap();
        assert!(g.decoder_logits.is_none());
        assert_eq!(g.flatten().len(), params.num_trainable());
    }

    #[test]
    fn stale_trace_is_rejected() {
        let stack = random_stack(6, 2, 8, 8);
        let cfg = NetworkConfig { depth: 2, kernel_size: 3, ..Default::default() };
        let mut params = init_params(&cfg, 2, Some(&PsfSet::delta(2, 3).unwrap())).unwrap();
        let (_, trace) = encode(&params, &stack).unwrap();
        params.pointwise_bias = 0.5;
        let err = backward(&params, &stack, &trace, &Array3::ones((2, 8, 8))).unwrap_err();
        assert!(matches!(err, Error::TraceMismatch(_)));
        let other = random_stack(7, 2, 8, 8);
        params.pointwise_bias = 0.0;
        let err = backward(&params, &other, &trace, &Array3::ones((2, 8, 8))).unwrap_err();
        assert!(matches!(err, Error::TraceMismatch(_)));
    }

    #[test]
    fn shape_checks() {
        let stack = random_stack(8, 3, 8, 8);
        let params = init_params(&identity_config(1), 2, Some(&PsfSet::delta(2, 3).unwrap())).unwrap();
        assert!(matches!(encode(&params, &stack), Err(Error::ShapeMismatch(_))));
        assert!(init_params::<f64>(&NetworkConfig::default(), 2, None).is_err());
        let bad = NetworkConfig { alpha: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let even = NetworkConfig { kernel_size: 4, ..Default::default() };
        assert_eq!(even.validate().unwrap_err(), Error::EvenKernel(4));
    }

    #[test]
    fn flatten_round_trip() {
        let cfg = NetworkConfig { psf_mode: PsfMode::Learnable, decoder_kernel: Some(5), multiplier: 2, depth: 2, ..Default::default() };
        let p = init_params::<f64>(&cfg, 3, None).unwrap();
        let mut q = init_params::<f64>(&NetworkConfig { seed: 9, ..cfg }, 3, None).unwrap();
        q.load_flat(&p.flatten()).unwrap();
        assert_eq!(p.trainable(), q.trainable());
        assert!(q.load_flat(&[1.0]).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn latent_is_never_negative(seed in 0u64..10_000, sigma in 0.0f64..1.0, bias in -3.0f64..3.0) {
            let stack = random_stack(seed, 2, 8, 8);
            let cfg = NetworkConfig { depth: 2, kernel_size: 3, sigma_init: sigma, seed, ..Default::default() };
            let mut params = init_params(&cfg, 2, Some(&PsfSet::delta(2, 3).unwrap())).unwrap();
            params.pointwise_bias = bias;
            params.pointwise[1] = -0.7;
            let (latent, _) = encode(&params, &stack).unwrap();
            proptest::prop_assert!(latent.pixels().iter().all(|&x| x >= 0.0));
        }
    }
}
