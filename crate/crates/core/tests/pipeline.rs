use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use skyprior::analyze::{coadd_mean, extract_sources, match_catalogs, robust_sigma, ExtractConfig};
use skyprior::conv::{conv2d_same, PaddingMode};
use skyprior::io::{self, StackFile};
use skyprior::net::{encode, init_params, relu, NetworkConfig};
use skyprior::optim::{adam_update, fit, AdamConfig, EarlyStop, StopReason, TrainConfig, Trainer};
use skyprior::synth::{make_stack, standard_benchmark, BenchmarkSpec, CorruptionSpec, PsfFamily, PsfSpec, SceneSpec};
use skyprior::{Error, ExposureStack, PsfMode, PsfSet};

const STANDARD_SEED0_SHA256: &str = "1fd6fe4ae8dbccb5109c8e5a67237a3e269eb4c6ed4d843ae9f54ae3705e9d72";

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn conv_loop(img: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let kk = k.dim().0;
    let c = (kk / 2) as isize;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..kk {
            for b in 0..kk {
                let si = reflect(i as isize + c - a as isize, h);
                let sj = reflect(j as isize + c - b as isize, w);
                acc += k[(a, b)] * img[(si, sj)];
            }
        }
        acc
    })
}

fn encode_loop(params: &skyprior::net::NetworkParams<f64>, y: &Array3<f64>) -> Array2<f64> {
    let cfg = &params.config;
    let (n, h, w) = y.dim();
    let m = cfg.multiplier;
    let mut planes: Vec<Array2<f64>> = (0..n).map(|t| y.index_axis(ndarray::Axis(0), t).to_owned()).collect();
    for (layer, weights) in params.depthwise.iter().enumerate() {
        let hidden = layer + 1 < cfg.depth;
        let chans = n * m.pow(layer as u32 + 1);
        let mut next = Vec::new();
        for ch in 0..chans {
            let input = &planes[ch / m];
            let k = weights.kernels.index_axis(ndarray::Axis(0), ch).to_owned();
            let z = conv_loop(input, &k);
            let out = Array2::from_shape_fn((h, w), |(i, j)| {
                let u = z[(i, j)] + weights.bias[ch];
                if hidden {
                    let d = u - input[(i, j)];
                    input[(i, j)] + if d > 0.0 { d } else { cfg.alpha * d }
                } else {
                    u
                }
            });
            next.push(out);
        }
        planes = next;
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for (c, p) in planes.iter().enumerate() {
            acc += params.pointwise[c] * p[(i, j)];
        }
        (acc + params.pointwise_bias).max(0.0)
    })
}

#[test]
fn encoder_matches_scalar_loop_oracle() {
    for multiplier in [1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(multiplier as u64);
        let y = Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(-1.0..3.0));
        let stack = ExposureStack::with_constant_variance(y.clone(), 1.0).unwrap();
        let net = NetworkConfig { depth: 2, kernel_size: 3, multiplier, sigma_init: 0.3, ..NetworkConfig::default() };
        let psfs = PsfSet::delta(2, 3).unwrap();
        let mut params = init_params(&net, 2, Some(&psfs)).unwrap();
        for layer in &mut params.depthwise {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        params.pointwise.mapv_inplace(|w| w * rng.random_range(0.5..1.5));
        params.pointwise_bias = -0.2;
        let (latent, _) = encode(&params, &stack).unwrap();
        let oracle = encode_loop(&params, &y);
        for (a, b) in latent.pixels().iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn identity_start_two_copies_reproduce_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Array2::from_shape_fn((10, 10), |_| rng.random_range(0.0..5.0));
    let mut y = Array3::zeros((2, 10, 10));
    y.index_axis_mut(ndarray::Axis(0), 0).assign(&img);
    y.index_axis_mut(ndarray::Axis(0), 1).assign(&img);
    let stack = ExposureStack::with_constant_variance(y, 1.0).unwrap();
    let net = NetworkConfig { sigma_init: 0.0, ..NetworkConfig::default() };
    let params = init_params(&net, 2, Some(&PsfSet::delta(2, 3).unwrap())).unwrap();
    let (latent, _) = encode(&params, &stack).unwrap();
    assert_eq!(latent.pixels(), &img);
}

#[test]
fn adam_on_quadratic_matches_scalar_reference() {
    let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let scale = [1.0, 4.0];
    let loss = |p: &[f64]| 0.5 * (scale[0] * p[0] * p[0] + scale[1] * p[1] * p[1]);
    let mut p = vec![1.5, -2.0];
    let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
    let mut rp = p.clone();
    let (mut rm, mut rv) = ([0.0f64; 2], [0.0f64; 2]);
    let mut last = loss(&p);
    for step in 1..=10u64 {
        let g: Vec<f64> = (0..2).map(|i| scale[i] * p[i]).collect();
        adam_update(&mut p, &g, &mut m, &mut v, step, &cfg);
        for i in 0..2 {
            let gi = scale[i] * rp[i];
            rm[i] = 0.9 * rm[i] + (1.0 - 0.9) * gi;
            rv[i] = 0.999 * rv[i] + (1.0 - 0.999) * gi * gi;
            let mh = rm[i] / (1.0 - 0.9f64.powf(step as f64));
            let vh = rv[i] / (1.0 - 0.999f64.powf(step as f64));
            rp[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert_eq!(p, rp);
        let now = loss(&p);
        assert!(now < last);
        last = now;
    }
}

fn small_benchmark() -> (ExposureStack<f64>, PsfSet<f64>) {
    let scene = SceneSpec {
        height: 24,
        width: 24,
        point_sources: vec![
            skyprior::synth::PointSource { x: 8.3, y: 9.0, flux: 200.0 },
            skyprior::synth::PointSource { x: 15.0, y: 14.6, flux: 80.0 },
        ],
        galaxies: vec![],
    };
    let psf = PsfSpec { family: PsfFamily::Moffat { beta: 3.5 }, fwhm: vec![2.0, 2.5, 3.0], size: 9, min_capture: 0.9 };
    let s = make_stack(&scene, &psf, &CorruptionSpec::gaussian(1.0, 3), 3).unwrap();
    (s.stack, s.psfs)
}

#[test]
fn checkpoint_resume_through_file_is_bit_exact() {
    let (stack, psfs) = small_benchmark();
    let net = NetworkConfig { depth: 2, ..NetworkConfig::default() };
    let train = TrainConfig { max_iters: 30, adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() }, ..TrainConfig::default() };
    let straight = fit(&stack, &net, &train, Some(&psfs)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let mut first = Trainer::new(&stack, &net, train.clone(), Some(&psfs)).unwrap();
    for _ in 0..12 {
        first.step().unwrap();
    }
    io::write_checkpoint(&path, &first.checkpoint()).unwrap();
    drop(first);
    let ckpt = io::read_checkpoint(&path).unwrap();
    let mut resumed = Trainer::resume(&stack, &ckpt).unwrap();
    resumed.run(&mut ()).unwrap();
    let resumed = resumed.finish().unwrap();
    assert_eq!(resumed.latent.pixels(), straight.latent.pixels());
    assert_eq!(resumed.report.losses, straight.report.losses);
}

#[test]
fn checkpoint_container_errors() {
    let (stack, psfs) = small_benchmark();
    let t = Trainer::new(&stack, &NetworkConfig::default(), TrainConfig::default(), Some(&psfs)).unwrap();
    let bytes = io::encode_checkpoint(&t.checkpoint()).unwrap();
    assert_eq!(io::decode_checkpoint(&bytes).unwrap(), t.checkpoint());
    let mut bad = bytes.clone();
    bad[4] = 7;
    assert_eq!(io::decode_checkpoint(&bad).unwrap_err(), Error::VersionMismatch { expected: 1, found: 7 });
    let mut bad = bytes.clone();
    let last = bad.len() - 2;
    bad[last] ^= 1;
    assert!(matches!(io::decode_checkpoint(&bad), Err(Error::CorruptPayload(_))));
}

#[test]
fn learnable_psf_fit_keeps_normalised_kernels() {
    let (stack, psfs) = small_benchmark();
    let net = NetworkConfig { depth: 2, psf_mode: PsfMode::Learnable, ..NetworkConfig::default() };
    let train = TrainConfig { max_iters: 20, adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() }, ..TrainConfig::default() };
    let r = fit(&stack, &net, &train, Some(&psfs)).unwrap();
    assert_eq!(r.psfs.mode(), PsfMode::Learnable);
    for t in 0..3 {
        assert!((r.psfs.kernel(t).sum() - 1.0).abs() < 1e-9);
        assert!(r.psfs.kernel(t).iter().all(|&x| x >= 0.0));
    }
    let start = NetworkConfig { decoder_kernel: Some(7), ..net };
    let r = fit(&stack, &start, &train, None).unwrap();
    assert_eq!(r.psfs.size(), 7);
}

#[test]
fn fit_is_deterministic_across_thread_counts() {
    let (stack, psfs) = small_benchmark();
    let stack = stack.cast::<f32>();
    let psfs = psfs.cast::<f32>();
    let train = TrainConfig { max_iters: 25, adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() }, ..TrainConfig::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| fit(&stack, &NetworkConfig::default(), &train, Some(&psfs)).unwrap().latent)
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(4));
}

#[test]
fn early_stop_fires_on_trivially_fittable_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..10.0));
    let y = Array3::from_shape_fn((3, 16, 16), |(_, i, j)| img[(i, j)]);
    let stack = ExposureStack::with_constant_variance(y, 1.0).unwrap();
    let train = TrainConfig { early_stop: Some(EarlyStop::default()), ..TrainConfig::default() };
    let net = NetworkConfig { sigma_init: 0.0, ..NetworkConfig::default() };
    let r = fit(&stack, &net, &train, Some(&PsfSet::delta(3, 5).unwrap())).unwrap();
    assert_eq!(r.report.stop_reason, StopReason::EarlyStop);
    assert_eq!(r.report.iterations, 101);
    assert!(r.report.final_loss < 1e-20);
}

#[test]
fn final_loss_never_exceeds_initial_on_benchmark_seeds() {
    for seed in 0..3 {
        let b = standard_benchmark(seed).unwrap();
        let stack = b.stack.cast::<f32>();
        let psfs = b.psfs.cast::<f32>();
        let train = TrainConfig { max_iters: 40, ..TrainConfig::default() };
        let r = fit(&stack, &NetworkConfig::default(), &train, Some(&psfs)).unwrap();
        assert!(r.report.final_loss <= r.report.initial_loss);
        assert_eq!(r.report.losses.len(), r.report.iterations);
    }
}

#[test]
fn standard_benchmark_round_trips_and_matches_golden_digest() {
    let b = standard_benchmark(0).unwrap();
    let bytes = StackFile::from_stack(&b.stack, Some(&b.psfs)).to_bytes();
    let back = StackFile::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let stack: ExposureStack<f32> = back.to_stack().unwrap();
    assert_eq!(stack.exposures(), &b.stack.exposures().mapv(|x| x as f32));
    let digest = hex::encode(Sha256::digest(&bytes));
    assert_eq!(digest, STANDARD_SEED0_SHA256);
}

#[test]
fn benchmark_stacks_validate_and_truth_is_non_negative() {
    for seed in 0..5 {
        let b = standard_benchmark(seed).unwrap();
        b.stack.validate().unwrap();
        assert!(b.truth.pixels().iter().all(|&x| x >= 0.0));
        assert_eq!(b.psfs.size(), 13);
    }
}

#[test]
fn truth_scene_extraction_recovers_every_source() {
    for seed in 0..3 {
        let b = standard_benchmark(seed).unwrap();
        let truth = b.truth.pixels();
        let cfg = ExtractConfig { threshold_sigma: 5.0, bg_sigma: robust_sigma(truth.view(), 0), border: 0 };
        let cat = extract_sources(truth.view(), &cfg).unwrap();
        let m = match_catalogs(&cat, &b.catalog, 2.0).unwrap();
        assert_eq!((m.completeness, m.purity), (1.0, 1.0));
        for x in &m.matches {
            assert!((x.flux_ratio - 1.0).abs() < 0.05, "{x:?}");
        }
    }
}

#[test]
fn rendered_flux_matches_catalog() {
    let b = standard_benchmark(1).unwrap();
    let total: f64 = b.catalog.sources.iter().map(|s| s.flux).sum();
    assert!((b.truth.pixels().sum() - total).abs() <= 0.01 * total);
    let g = SceneSpec {
        height: 32,
        width: 32,
        point_sources: vec![],
        galaxies: vec![skyprior::synth::Galaxy { x: 16.0, y: 16.0, flux: 100.0, sigma_major: 2.0, sigma_minor: 2.0, angle: 0.0 }],
    };
    let img = skyprior::synth::render_scene(&g).unwrap();
    assert!((img.pixels().sum() - 100.0).abs() <= 1.0);
}

#[test]
fn delta_psf_tiny_noise_stack_equals_scene() {
    let b = BenchmarkSpec::standard(2);
    let psf = PsfSpec { family: PsfFamily::Gaussian, fwhm: vec![1e-3; 2], size: 3, min_capture: 0.0 };
    let s = make_stack(&b.scene, &psf, &CorruptionSpec::gaussian(0.0, 1), 2).unwrap();
    for t in 0..2 {
        let d = &s.stack.exposure(t) - s.truth.pixels();
        assert!(d.iter().all(|x| x.abs() < 1e-5));
    }
}

#[test]
fn blurring_conserves_flux_away_from_edges() {
    let b = standard_benchmark(3).unwrap();
    let truth = b.truth.pixels();
    let x = truth.sum();
    for t in 0..8 {
        let fx = conv2d_same(truth.view(), b.psfs.kernel(t), PaddingMode::Zero).unwrap().sum();
        assert!((x - fx).abs() <= 1e-9 * x, "{x} vs {fx}");
    }
}

#[test]
fn whitened_noise_is_white() {
    let spec = BenchmarkSpec {
        scene: SceneSpec { height: 128, width: 128, point_sources: vec![], galaxies: vec![] },
        psf: PsfSpec { family: PsfFamily::Moffat { beta: 3.5 }, fwhm: vec![3.0], size: 13, min_capture: 0.95 },
        corruption: CorruptionSpec::gaussian(2.5, 8),
        n: 1,
    };
    let b = spec.generate().unwrap();
    let z: Vec<f64> = b.stack.exposures().iter().map(|y| y / 2.5).collect();
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 3.0 / n.sqrt());
    assert!((0.9..=1.1).contains(&var));
    assert!((var * 6.25 - 6.25).abs() <= 0.05 * 6.25);
}

#[test]
fn coadd_relu_is_the_zero_iteration_latent() {
    let b = standard_benchmark(0).unwrap();
    let stack = b.stack.cast::<f32>();
    let net = NetworkConfig { sigma_init: 0.0, ..NetworkConfig::default() };
    let train = TrainConfig { max_iters: 0, ..TrainConfig::default() };
    let r = fit(&stack, &net, &train, Some(&b.psfs.cast())).unwrap();
    assert_eq!(r.latent.pixels(), &coadd_mean(&stack).mapv(relu));
}
