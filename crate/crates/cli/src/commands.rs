use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use skyprior::analyze::{
    background_zero_fraction, coadd_mean, extract_sources, match_catalogs, psnr, robust_sigma, ExtractConfig,
    SourceCatalog,
};
use skyprior::gradcheck::{self, GradcheckConfig};
use skyprior::io::{self, StackFile};
use skyprior::optim::{Trainer, TrainObserver};
use skyprior::synth::{BenchmarkSpec, CorruptionSpec, PsfSpec, SceneSpec};
use skyprior::{ExposureStack, PsfSet, Real};

use crate::args::{Bits, CoaddArgs, Command, ExportArgs, GradcheckArgs, MetricsArgs, RestoreArgs, SynthArgs};
use crate::failure::Failure;
use crate::manifest::{beside, RunManifest, MANIFEST_NAME};

pub const PROGRESS_EVERY: usize = 100;

/// Runs one command and returns its manifest (already written when the
/// command has an output location).
pub fn execute(command: &Command, threads: usize) -> Result<RunManifest, Failure> {
    let mut m = RunManifest::new(command, threads);
    match command {
        Command::Synth(a) => synth(a, &mut m)?,
        Command::Restore(a) => restore(a, &mut m)?,
        Command::Coadd(a) => coadd(a, &mut m)?,
        Command::Metrics(a) => metrics(a, &mut m)?,
        Command::Gradcheck(a) => run_gradcheck(a, &mut m)?,
        Command::Export(a) => export(a, &mut m)?,
        Command::Replay(_) => return Err(Failure::usage("a replay manifest cannot record another replay")),
    }
    Ok(m)
}

fn make_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn read_mfds(path: &Path, m: &mut RunManifest) -> Result<StackFile, Failure> {
    m.input(path)?;
    io::read_stack_file(path).map_err(|e| Failure::at(path, e))
}

fn synth(a: &SynthArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let mut spec = match (&a.scene, &a.psf, &a.noise) {
        (Some(scene), Some(psf), Some(noise)) => {
            let scene: SceneSpec = read_json(scene)?;
            let psf: PsfSpec = read_json(psf)?;
            let corruption: CorruptionSpec = read_json(noise)?;
            for p in [&a.scene, &a.psf, &a.noise].into_iter().flatten() {
                m.input(p)?;
            }
            let n = psf.fwhm.len();
            BenchmarkSpec { scene, psf, corruption: CorruptionSpec { seed: a.seed, ..corruption }, n }
        }
        _ => match a.p_sat {
            Some(p) => BenchmarkSpec::standard(a.seed).with_saturation(p)?,
            None => BenchmarkSpec::standard(a.seed),
        },
    };
    if a.noiseless {
        spec = spec.noiseless();
    }
    let b = spec.generate()?;
    make_dir(&a.out)?;
    let stack_path = a.out.join("stack.mfds");
    let truth_path = a.out.join("truth.mfds");
    let catalog_path = a.out.join("truth_catalog.csv");
    io::write_stack(&stack_path, &b.stack, Some(&b.psfs))?;
    io::write_latent(&truth_path, &b.truth)?;
    write_file(&catalog_path, b.catalog.to_csv().as_bytes())?;
    for p in [&stack_path, &truth_path, &catalog_path] {
        m.output(p)?;
    }
    m.precision = "f64".into();
    m.seed = Some(a.seed);
    m.config = json!({ "benchmark": spec });
    m.summary = json!({ "n": b.spec.n, "sources": b.catalog.len() });
    m.write(&a.out.join(MANIFEST_NAME))
}

struct Progress<'p> {
    out: &'p Path,
    checkpoint_every: Option<usize>,
}

impl<T: Real> TrainObserver<T> for Progress<'_> {
    fn on_iteration(&mut self, iteration: usize, loss: f64, wall_ms: f64) {
        if iteration.is_multiple_of(PROGRESS_EVERY) {
            eprintln!("iter {iteration:>6}  loss {loss:.6e}  {:.1}s", wall_ms / 1e3);
        }
    }

    fn on_checkpoint(&mut self, trainer: &Trainer<'_, T>) -> skyprior::Result<()> {
        if self.checkpoint_every.is_some() {
            io::write_checkpoint(self.out.join("checkpoint.mfck"), &trainer.checkpoint())?;
        }
        Ok(())
    }
}

fn restore(a: &RestoreArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let file = read_mfds(&a.input, m)?;
    let psf_file = match &a.psfs {
        Some(p) => Some(read_mfds(p, m)?),
        None => None,
    };
    let ckpt = match &a.resume {
        Some(p) => {
            m.input(p)?;
            Some(io::read_checkpoint(p).map_err(|e| Failure::at(p, e))?)
        }
        None => None,
    };
    let bits = ckpt.as_ref().map_or(a.precision, |c| if c.precision.bits() == 64 { Bits::B64 } else { Bits::B32 });
    match bits {
        Bits::B64 => restore_in::<f64>(a, &file, psf_file.as_ref(), ckpt.as_ref(), m),
        _ => restore_in::<f32>(a, &file, psf_file.as_ref(), ckpt.as_ref(), m),
    }
}

fn restore_in<T: Real>(
    a: &RestoreArgs,
    file: &StackFile,
    psf_file: Option<&StackFile>,
    ckpt: Option<&skyprior::optim::Checkpoint>,
    m: &mut RunManifest,
) -> Result<(), Failure> {
    let stack: ExposureStack<T> = file.to_stack().map_err(|e| Failure::at(&a.input, e))?;
    let psfs: Option<PsfSet<T>> = match psf_file {
        Some(f) => Some(
            f.to_psfs(a.psf_mode)?
                .ok_or_else(|| Failure::format(format!("{}: file carries no PSFs", a.psfs.as_ref().unwrap().display())))?,
        ),
        None => file.to_psfs(a.psf_mode)?,
    };
    let ckpt = ckpt.map(|c| {
        let mut c = c.clone();
        c.train.max_iters = a.iters.unwrap_or(c.train.max_iters);
        c
    });
    let (network, train) = match &ckpt {
        Some(c) => (c.network.clone(), c.train.clone()),
        None => (a.network(), a.train()),
    };
    if ckpt.is_none() && psfs.is_none() && network.psf_mode == skyprior::PsfMode::Fixed {
        return Err(Failure::usage("fixed PSF mode needs PSFs: pass --psfs or use a stack file that carries them"));
    }
    make_dir(&a.out)?;
    let mut trainer = match &ckpt {
        Some(c) => Trainer::resume(&stack, c)?,
        None => Trainer::new(&stack, &network, train.clone(), psfs.as_ref())?,
    };
    let mut progress = Progress { out: &a.out, checkpoint_every: train.checkpoint_every };
    trainer.run(&mut progress)?;
    let ckpt_path = a.out.join("checkpoint.mfck");
    io::write_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    let fit = trainer.finish()?;

    let latent_path = a.out.join("latent.mfds");
    let psfs_path = a.out.join("psfs.mfds");
    let loss_path = a.out.join("loss.csv");
    let pgm_path = a.out.join("latent.pgm");
    io::write_latent(&latent_path, &fit.latent)?;
    io::write_stack_file(&psfs_path, &StackFile::from_psfs(&fit.psfs))?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in fit.report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:?}\n"));
    }
    write_file(&loss_path, csv.as_bytes())?;
    let (lo, hi) = io::export_pgm16(&pgm_path, fit.latent.pixels().view(), None, None)?;
    for p in [&latent_path, &psfs_path, &loss_path, &pgm_path] {
        m.output(p)?;
    }
    m.artifacts.push("checkpoint.mfck".into());
    m.precision = format!("f{}", T::PRECISION.bits());
    m.seed = Some(network.seed);
    m.config = json!({ "network": network, "train": train, "resumed": ckpt.is_some() });
    let r = &fit.report;
    m.summary = json!({
        "iterations": r.iterations,
        "stop_reason": r.stop_reason,
        "initial_loss": r.initial_loss,
        "final_loss": r.final_loss,
        "best_iteration": r.best_iteration,
        "wall_time_ms": r.wall_time_ms,
        "pgm_lo": lo,
        "pgm_hi": hi,
    });
    eprintln!(
        "done: {} iterations ({:?}), loss {:.6e} -> {:.6e}",
        r.iterations, r.stop_reason, r.initial_loss, r.final_loss
    );
    m.write(&a.out.join(MANIFEST_NAME))
}

fn coadd(a: &CoaddArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let file = read_mfds(&a.input, m)?;
    let stack: ExposureStack<f32> = file.to_stack().map_err(|e| Failure::at(&a.input, e))?;
    let mean = coadd_mean(&stack);
    make_dir(&a.out)?;
    let mfds = a.out.join("coadd.mfds");
    let pgm = a.out.join("coadd.pgm");
    io::write_stack_file(&mfds, &StackFile::from_image(mean.view()))?;
    let (lo, hi) = io::export_pgm16(&pgm, mean.view(), None, None)?;
    m.output(&mfds)?;
    m.output(&pgm)?;
    m.summary = json!({ "n": stack.n(), "pgm_lo": lo, "pgm_hi": hi });
    m.write(&a.out.join(MANIFEST_NAME))
}

fn metrics(a: &MetricsArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let img: ndarray::Array2<f64> = read_mfds(&a.img, m)?.image()?;
    let truth: ndarray::Array2<f64> = read_mfds(&a.truth, m)?.image()?;
    if img.dim() != truth.dim() {
        return Err(Failure::format(format!("image is {:?} but truth is {:?}", img.dim(), truth.dim())));
    }
    let mut rows: Vec<(&str, f64)> = vec![
        ("psnr_db", psnr(img.view(), truth.view(), a.peak)?),
        ("background_zero_fraction", background_zero_fraction(img.view(), truth.view(), a.dilation)?),
    ];
    if let Some(cat_path) = &a.catalog {
        m.input(cat_path)?;
        let text = fs::read_to_string(cat_path).map_err(|e| Failure::io(cat_path, e))?;
        let truth_cat = SourceCatalog::from_csv(&text).map_err(|e| Failure::at(cat_path, e))?;
        let bright = truth_cat.brighter_than(a.min_snr * a.noise_sigma);
        let bg_sigma = robust_sigma(img.view(), a.border);
        let found = extract_sources(img.view(), &ExtractConfig { threshold_sigma: a.threshold, bg_sigma, border: a.border })?;
        let r = match_catalogs(&found, &bright, a.radius)?;
        rows.extend([
            ("bg_sigma", bg_sigma),
            ("n_detected", r.n_detected as f64),
            ("n_truth", r.n_truth as f64),
            ("completeness", r.completeness),
            ("purity", r.purity),
        ]);
    }
    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        csv.push_str(&format!("{k},{v}\n"));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        make_dir(dir)?;
    }
    write_file(&a.out, csv.as_bytes())?;
    print!("{csv}");
    m.output(&a.out)?;
    m.precision = "f64".into();
    m.summary = rows.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>().into();
    m.write(&beside(&a.out))
}

fn run_gradcheck(a: &GradcheckArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let cfg = GradcheckConfig { seed: a.seed, instances: a.instances, tolerance: a.tolerance, ..GradcheckConfig::default() };
    let report = gradcheck::run(&cfg)?;
    let skipped: usize = report.instances.iter().map(|r| r.skipped_kinks).sum();
    println!(
        "max relative error {:.3e} over {} instances ({} kink parameters skipped), tolerance {:.0e}: {}",
        report.max_rel_error,
        report.instances.len(),
        skipped,
        cfg.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    m.precision = "f64".into();
    m.seed = Some(a.seed);
    m.config = json!({ "gradcheck": cfg });
    m.summary = json!({ "max_rel_error": report.max_rel_error, "passed": report.passed });
    if let Some(dir) = &a.out {
        make_dir(dir)?;
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::format(e.to_string()))?;
        write_file(&path, (text + "\n").as_bytes())?;
        m.output(&path)?;
        m.write(&dir.join(MANIFEST_NAME))?;
    }
    if !report.passed {
        return Err(Failure::numeric(format!(
            "gradient check failed: {:.3e} >= {:.0e}",
            report.max_rel_error, cfg.tolerance
        )));
    }
    Ok(())
}

fn export(a: &ExportArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let file = read_mfds(&a.input, m)?;
    if a.plane >= file.n() {
        return Err(Failure::usage(format!("plane {} out of range: file has {} planes", a.plane, file.n())));
    }
    let img = file.exposures.index_axis(ndarray::Axis(0), a.plane).mapv(f64::from);
    let (lo, hi) = io::export_pgm16(&a.out, img.view(), a.lo, a.hi).map_err(|e| match e {
        skyprior::Error::Io(_) => Failure::format(format!("{}: {e}", a.out.display())),
        e => Failure::from(e),
    })?;
    m.output(&a.out)?;
    m.summary = json!({ "lo": lo, "hi": hi });
    m.write(&beside(&a.out))
}

/// Output location of a command, replaced for a replay.
pub fn redirect(command: &mut Command, out: PathBuf) {
    match command {
        Command::Synth(a) => a.out = out,
        Command::Restore(a) => a.out = out,
        Command::Coadd(a) => a.out = out,
        Command::Metrics(a) => a.out = out,
        Command::Gradcheck(a) => a.out = Some(out),
        Command::Export(a) => a.out = out,
        Command::Replay(a) => a.out = Some(out),
    }
}

/// Whether the command writes a single file rather than a directory.
pub fn writes_file(command: &Command) -> bool {
    matches!(command, Command::Metrics(_) | Command::Export(_))
}
