//! Adam optimisation of the network parameters against the Huber objective,
//! with early stopping, observers and bit-exact checkpoint / resume.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::loss::{objective, objective_grad, HuberConfig};
use crate::net::{backward, border_width, encode, forward, init_params, stack_fingerprint, NetworkConfig, NetworkParams};
use crate::{Error, ExposureStack, LatentImage, Precision, PsfMode, PsfSet, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Stop once `(L[t - window] - L[t]) / (window * |L[t - window]|)` drops
/// below `min_rel_improvement`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub min_rel_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { window: 100, min_rel_improvement: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub max_iters: usize,
    pub early_stop: Option<EarlyStop>,
    pub delta: f64,
    /// Observer checkpoint hook fires every this many iterations.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            max_iters: 2000,
            early_stop: Some(EarlyStop::default()),
            delta: 1.0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if let Some(es) = &self.early_stop {
            if es.window == 0 || !(es.min_rel_improvement >= 0.0) {
                return Err(Error::InvalidConfig(format!("invalid early stop {es:?}")));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        HuberConfig::new(self.delta, 0).map(|_| ())
    }
}

/// First and second moment estimates, one buffer per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        let shapes: Vec<usize> = params.trainable().iter().map(|s| s.len()).collect();
        Self {
            m: shapes.iter().map(|&l| vec![T::zero(); l]).collect(),
            v: shapes.iter().map(|&l| vec![T::zero(); l]).collect(),
            step: 0,
        }
    }

    fn flat(buffers: &[Vec<T>]) -> Vec<f64> {
        buffers.iter().flat_map(|b| b.iter().map(|x| x.to_f64_lossless())).collect()
    }

    fn load(buffers: &mut [Vec<T>], values: &[f64]) -> Result<()> {
        let total: usize = buffers.iter().map(Vec::len).sum();
        if total != values.len() {
            return Err(Error::CorruptPayload(format!("{} moment values for {total} parameters", values.len())));
        }
        let mut it = values.iter();
        for b in buffers.iter_mut() {
            for (x, v) in b.iter_mut().zip(&mut it) {
                *x = T::lit(*v);
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `step` is the
/// 1-based index of this update.
pub fn adam_update<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamConfig) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let bc1 = one - T::lit(cfg.beta1.powf(step as f64));
    let bc2 = one - T::lit(cfg.beta2.powf(step as f64));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (((p, &g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Applies one Adam step to every trainable tensor.
pub fn adam_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &crate::net::ParamGradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let g = grads.slices();
    let mut p = params.trainable_mut();
    if g.len() != p.len() || g.iter().zip(&p).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch("gradient layout differs from parameters".into()));
    }
    state.step += 1;
    for (i, (pi, gi)) in p.iter_mut().zip(g).enumerate() {
        adam_update(pi, gi, &mut state.m[i], &mut state.v[i], state.step, cfg);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    EarlyStop,
}

/// Hooks called by [`Trainer::run`].
pub trait TrainObserver<T: Real> {
    fn on_iteration(&mut self, _iteration: usize, _loss: f64, _wall_ms: f64) {}

    fn on_checkpoint(&mut self, _trainer: &Trainer<'_, T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Real> TrainObserver<T> for () {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss before each executed update.
    pub losses: Vec<f64>,
    /// Cumulative wall time (ms) at each recorded loss.
    pub wall_ms: Vec<f64>,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub initial_loss: f64,
    /// Loss of the returned parameters: the lowest seen, never above
    /// `initial_loss`.
    pub final_loss: f64,
    pub best_iteration: usize,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub latent: LatentImage<T>,
    pub psfs: PsfSet<T>,
    pub params: NetworkParams<T>,
    pub report: TrainReport,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub stack_fingerprint: u64,
    /// Fixed decoder kernels, row-major `(n, k, k)`.
    pub fixed_psfs: Option<Vec<f64>>,
    pub decoder_kernel: usize,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_step: u64,
    pub losses: Vec<f64>,
    pub wall_ms: Vec<f64>,
    pub best_loss: Option<f64>,
    pub best_iteration: usize,
    pub best_params: Vec<f64>,
}

/// Stateful optimiser over one exposure stack.
pub struct Trainer<'a, T: Real> {
    stack: &'a ExposureStack<T>,
    train: TrainConfig,
    huber: HuberConfig,
    params: NetworkParams<T>,
    adam: AdamState<T>,
    losses: Vec<f64>,
    wall_ms: Vec<f64>,
    best: Option<(f64, usize, NetworkParams<T>)>,
    stopped: Option<StopReason>,
    clock: Instant,
    elapsed_before: f64,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(
        stack: &'a ExposureStack<T>,
        network: &NetworkConfig,
        train: TrainConfig,
        psfs: Option<&PsfSet<T>>,
    ) -> Result<Self> {
        train.validate()?;
        stack.validate()?;
        let params = init_params(network, stack.n(), psfs)?;
        Self::with_params(stack, params, train)
    }

    /// Starts from explicit parameters instead of the identity init.
    pub fn with_params(stack: &'a ExposureStack<T>, params: NetworkParams<T>, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let huber = HuberConfig::new(train.delta, border_width(&params))?;
        let adam = AdamState::new(&params);
        Ok(Self {
            stack,
            train,
            huber,
            params,
            adam,
            losses: Vec::new(),
            wall_ms: Vec::new(),
            best: None,
            stopped: None,
            clock: Instant::now(),
            elapsed_before: 0.0,
        })
    }

    pub fn resume(stack: &'a ExposureStack<T>, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.precision != T::PRECISION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint is {}-bit, trainer is {}-bit",
                ckpt.precision.bits(),
                T::PRECISION.bits()
            )));
        }
        if (ckpt.n, ckpt.height, ckpt.width) != stack.dim() || ckpt.stack_fingerprint != stack_fingerprint(stack) {
            return Err(Error::InvalidConfig("checkpoint was written for a different stack".into()));
        }
        if ckpt.losses.len() != ckpt.wall_ms.len() {
            return Err(Error::CorruptPayload("loss and timing histories differ in length".into()));
        }
        let psfs = match &ckpt.fixed_psfs {
            Some(values) => {
                let k = ckpt.decoder_kernel;
                let arr = ndarray::Array3::from_shape_vec((ckpt.n, k, k), values.iter().map(|&x| T::lit(x)).collect())
                    .map_err(|e| Error::CorruptPayload(e.to_string()))?;
                Some(PsfSet::new(arr, PsfMode::Fixed)?)
            }
            None => None,
        };
        let mut network = ckpt.network.clone();
        if psfs.is_none() {
            network.decoder_kernel = Some(ckpt.decoder_kernel);
        }
        let mut params = init_params(&network, ckpt.n, psfs.as_ref())?;
        params.config = ckpt.network.clone();
        params.load_flat(&ckpt.params).map_err(|e| Error::CorruptPayload(e.to_string()))?;
        let mut trainer = Self::with_params(stack, params, ckpt.train.clone())?;
        AdamState::load(&mut trainer.adam.m, &ckpt.adam_m)?;
        AdamState::load(&mut trainer.adam.v, &ckpt.adam_v)?;
        trainer.adam.step = ckpt.adam_step;
        trainer.losses = ckpt.losses.clone();
        trainer.wall_ms = ckpt.wall_ms.clone();
        trainer.elapsed_before = ckpt.wall_ms.last().copied().unwrap_or(0.0);
        if let Some(best_loss) = ckpt.best_loss {
            let mut best = trainer.params.clone();
            best.load_flat(&ckpt.best_params).map_err(|e| Error::CorruptPayload(e.to_string()))?;
            trainer.best = Some((best_loss, ckpt.best_iteration, best));
        }
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let fixed_psfs = match &self.params.decoder {
            crate::net::Decoder::Fixed(p) => Some(p.kernels().iter().map(|x| x.to_f64_lossless()).collect()),
            crate::net::Decoder::Learnable { .. } => None,
        };
        let (best_loss, best_iteration, best_params) = match &self.best {
            Some((l, i, p)) => (Some(*l), *i, p.flatten()),
            None => (None, 0, Vec::new()),
        };
        Checkpoint {
            network: self.params.config.clone(),
            train: self.train.clone(),
            precision: T::PRECISION,
            n: self.stack.n(),
            height: self.stack.height(),
            width: self.stack.width(),
            stack_fingerprint: stack_fingerprint(self.stack),
            fixed_psfs,
            decoder_kernel: self.params.decoder_kernel(),
            params: self.params.flatten(),
            adam_m: AdamState::flat(&self.adam.m),
            adam_v: AdamState::flat(&self.adam.v),
            adam_step: self.adam.step,
            losses: self.losses.clone(),
            wall_ms: self.wall_ms.clone(),
            best_loss,
            best_iteration,
            best_params,
        }
    }

    pub fn iteration(&self) -> usize {
        self.losses.len()
    }

    pub fn params(&self) -> &NetworkParams<T> {
        &self.params
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    /// Current objective value without updating anything.
    pub fn loss(&self) -> Result<f64> {
        let (_, recon) = forward(&self.params, self.stack)?;
        Ok(objective(self.stack, &recon, &self.huber)?.to_f64_lossless())
    }

    fn should_stop_early(&self) -> bool {
        let Some(es) = &self.train.early_stop else { return false };
        let t = self.losses.len() - 1;
        if t < es.window {
            return false;
        }
        let past = self.losses[t - es.window];
        let rel = (past - self.losses[t]) / (es.window as f64 * past.abs());
        past == 0.0 || rel < es.min_rel_improvement
    }

    /// Records the loss of the current parameters and, unless a stopping
    /// rule fires, applies one Adam update. Returns the stop reason once
    /// training is over.
    pub fn step(&mut self) -> Result<Option<StopReason>> {
        if let Some(r) = self.stopped {
            return Ok(Some(r));
        }
        let iteration = self.losses.len();
        if iteration >= self.train.max_iters {
            self.stopped = Some(StopReason::MaxIters);
            return Ok(self.stopped);
        }
        let (trace, recon) = forward(&self.params, self.stack)?;
        let loss = objective(self.stack, &recon, &self.huber)?.to_f64_lossless();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        self.losses.push(loss);
        self.wall_ms.push(self.elapsed_before + self.clock.elapsed().as_secs_f64() * 1e3);
        if self.best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            self.best = Some((loss, iteration, self.params.clone()));
        }
        if self.should_stop_early() {
            self.stopped = Some(StopReason::EarlyStop);
            return Ok(self.stopped);
        }
        let g = objective_grad(self.stack, &recon, &self.huber)?;
        let grads = backward(&self.params, self.stack, &trace, &g)?;
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient { iteration });
        }
        adam_step(&mut self.params, &grads, &mut self.adam, &self.train.adam)?;
        Ok(None)
    }

    /// Steps until a stopping rule fires, calling `observer` after every
    /// recorded loss.
    pub fn run(&mut self, observer: &mut dyn TrainObserver<T>) -> Result<StopReason> {
        loop {
            if let Some(reason) = self.step()? {
                return Ok(reason);
            }
            let it = self.losses.len();
            observer.on_iteration(it - 1, self.losses[it - 1], self.wall_ms[it - 1]);
            if let Some(every) = self.train.checkpoint_every {
                if it.is_multiple_of(every) {
                    observer.on_checkpoint(self)?;
                }
            }
        }
    }

    /// Picks the lowest-loss parameters seen (including the current ones)
    /// and encodes the latent.
    pub fn finish(self) -> Result<FitResult<T>> {
        let current = self.loss()?;
        let wall_time_ms = self.elapsed_before.max(self.wall_ms.last().copied().unwrap_or(0.0))
            + if self.losses.is_empty() { self.clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let (final_loss, best_iteration, params) = match self.best {
            Some((b, i, p)) if b <= current => (b, i, p),
            _ => (current, self.losses.len(), self.params),
        };
        let (latent, _) = encode(&params, self.stack)?;
        let psfs = params.realized_psfs()?;
        let report = TrainReport {
            initial_loss: self.losses.first().copied().unwrap_or(current),
            iterations: self.losses.len(),
            stop_reason: self.stopped.unwrap_or(StopReason::MaxIters),
            losses: self.losses,
            wall_ms: self.wall_ms,
            final_loss,
            best_iteration,
            wall_time_ms,
        };
        Ok(FitResult { latent, psfs, params, report })
    }
}

/// Fits a fresh network to `stack` and returns the lowest-loss latent.
pub fn fit<T: Real>(
    stack: &ExposureStack<T>,
    network: &NetworkConfig,
    train: &TrainConfig,
    psfs: Option<&PsfSet<T>>,
) -> Result<FitResult<T>> {
    let mut trainer = Trainer::new(stack, network, train.clone(), psfs)?;
    trainer.run(&mut ())?;
    trainer.finish()
}
