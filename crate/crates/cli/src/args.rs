//! Command-line grammar. Defaults come from the library configs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use skyprior::conv::ConvBackend;
use skyprior::gradcheck::GradcheckConfig;
use skyprior::net::NetworkConfig;
use skyprior::optim::{AdamConfig, EarlyStop, TrainConfig};
use skyprior::PsfMode;

#[derive(Debug, Parser)]
#[command(name = "skyprior", version, about = "Multi-frame deconvolution of astronomical exposure stacks")]
pub struct Cli {
    /// Worker threads; fixes the pool size for reproducible runs. Defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum Command {
    /// Generate a synthetic sky, its PSFs and a corrupted exposure stack.
    Synth(SynthArgs),
    /// Fit the encoder to a stack and write the restored latent image.
    Restore(RestoreArgs),
    /// Sample-mean coadd of a stack.
    Coadd(CoaddArgs),
    /// Compare an image with the truth: PSNR, background zeros, source recovery.
    Metrics(MetricsArgs),
    /// Check hand-derived gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write one plane of an MFDS file as a 16-bit PGM.
    Export(ExportArgs),
    /// Re-run the command recorded in a manifest and compare output digests.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Bits {
    #[value(name = "32")]
    #[serde(rename = "32")]
    B32,
    #[value(name = "64")]
    #[serde(rename = "64")]
    B64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Built-in benchmark (used when no --scene is given).
    #[arg(long, value_enum, conflicts_with = "scene")]
    pub preset: Option<Preset>,
    /// Scene JSON (point sources and galaxies).
    #[arg(long, requires_all = ["psf", "noise"])]
    pub scene: Option<PathBuf>,
    /// PSF JSON (family, one FWHM per exposure, kernel size).
    #[arg(long, requires = "scene")]
    pub psf: Option<PathBuf>,
    /// Corruption JSON (noise models, saturation).
    #[arg(long, requires = "scene")]
    pub noise: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Saturate this fraction of pixels per exposure (preset only).
    #[arg(long, conflicts_with = "scene")]
    pub p_sat: Option<f64>,
    /// Keep the variance maps but draw no noise.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RestoreArgs {
    /// Input stack (MFDS with variances).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// PSF file; defaults to the PSFs stored in the stack file.
    #[arg(long)]
    pub psfs: Option<PathBuf>,
    #[arg(long, default_value = "fixed")]
    pub psf_mode: PsfMode,
    /// Iteration budget [default: 2000, or the checkpoint's when resuming].
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = AdamConfig::default().beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = AdamConfig::default().beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = AdamConfig::default().eps)]
    pub eps: f64,
    /// Huber threshold on whitened residuals.
    #[arg(long, default_value_t = TrainConfig::default().delta)]
    pub delta: f64,
    /// Seed of the initial kernel perturbation.
    #[arg(long, default_value_t = NetworkConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = NetworkConfig::default().sigma_init)]
    pub sigma_init: f64,
    #[arg(long, default_value_t = NetworkConfig::default().depth)]
    pub depth: usize,
    #[arg(long, default_value_t = NetworkConfig::default().kernel_size)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = NetworkConfig::default().multiplier)]
    pub multiplier: usize,
    #[arg(long, default_value_t = NetworkConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long)]
    pub share_weights: bool,
    /// Decoder kernel side for learnable PSFs without a PSF file.
    #[arg(long)]
    pub decoder_kernel: Option<usize>,
    #[arg(long, default_value_t = NetworkConfig::default().initial_fwhm)]
    pub initial_fwhm: f64,
    #[arg(long, default_value = "auto")]
    pub backend: ConvBackend,
    #[arg(long, default_value_t = EarlyStop::default().window)]
    pub early_stop_window: usize,
    #[arg(long, default_value_t = EarlyStop::default().min_rel_improvement)]
    pub min_rel_improvement: f64,
    #[arg(long)]
    pub no_early_stop: bool,
    /// Engine precision in bits.
    #[arg(long, value_enum, default_value = "32")]
    pub precision: Bits,
    /// Continue from a checkpoint; settings other than --iters come from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write checkpoint.mfck every this many iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

impl RestoreArgs {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            depth: self.depth,
            kernel_size: self.kernel_size,
            multiplier: self.multiplier,
            alpha: self.alpha,
            decoder_kernel: self.decoder_kernel,
            psf_mode: self.psf_mode,
            share_weights: self.share_weights,
            sigma_init: self.sigma_init,
            initial_fwhm: self.initial_fwhm,
            seed: self.seed,
            backend: self.backend,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            max_iters: self.iters.unwrap_or(TrainConfig::default().max_iters),
            early_stop: (!self.no_early_stop).then_some(EarlyStop {
                window: self.early_stop_window,
                min_rel_improvement: self.min_rel_improvement,
            }),
            delta: self.delta,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CoaddArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MetricsArgs {
    /// Image to score (first plane of an MFDS file).
    #[arg(long)]
    pub img: PathBuf,
    /// Truth image (first plane of an MFDS file).
    #[arg(long)]
    pub truth: PathBuf,
    /// Truth catalog CSV; enables extraction and matching.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Detection threshold in units of the robust background sigma.
    #[arg(long, default_value_t = 5.0)]
    pub threshold: f64,
    /// Match radius in pixels.
    #[arg(long, default_value_t = 2.0)]
    pub radius: f64,
    /// Frame border excluded from detection.
    #[arg(long, default_value_t = 6)]
    pub border: usize,
    /// Truth-support dilation for the background zero fraction.
    #[arg(long, default_value_t = 3)]
    pub dilation: usize,
    /// Keep truth sources with flux / noise-sigma at least this.
    #[arg(long, default_value_t = 10.0)]
    pub min_snr: f64,
    /// Noise sigma of the exposures, for --min-snr.
    #[arg(long, default_value_t = 1.0)]
    pub noise_sigma: f64,
    /// PSNR peak; defaults to the truth maximum.
    #[arg(long)]
    pub peak: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = GradcheckConfig::default().seed)]
    pub seed: u64,
    /// Gradients are checked in 64-bit only.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(64..=64))]
    pub precision: u32,
    /// Instances per PSF mode.
    #[arg(long, default_value_t = GradcheckConfig::default().instances)]
    pub instances: usize,
    #[arg(long, default_value_t = GradcheckConfig::default().tolerance)]
    pub tolerance: f64,
    /// Directory for report.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
    /// Plane to export.
    #[arg(long, default_value_t = 0)]
    pub plane: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Output location for the re-run; defaults to a fresh directory next to the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
