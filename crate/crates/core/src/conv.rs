//! 2-D convolution, correlation and their adjoints.
//!
//! Orientation: [`conv2d_same`] is a true convolution,
//!
//! ```text
//! out[i][j] = sum_{a,b} kernel[a][b] * image[i + c - a][j + c - b],   c = k / 2
//! ```
//!
//! so a kernel whose only nonzero entry sits one column right of center
//! shifts the image one column to the right. [`correlate2d_same`] uses the
//! unflipped kernel and is the adjoint of [`conv2d_same`] under zero padding.
//! Internally both are a "valid" correlation of a padded image, with the
//! kernel flipped for convolution, so forward and adjoint share one loop.
//!
//! The direct path is the reference. The FFT path agrees with it to
//! roughly `1e-5` relative in 32-bit and `1e-10` in 64-bit.

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Kernel side from which [`ConvBackend::Auto`] switches to the FFT path.
pub const FFT_CROSSOVER: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    /// Mirror about the edge pixel without repeating it (`d c b | a b c d | c b a`).
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConvBackend {
    /// Direct below [`FFT_CROSSOVER`], FFT at or above it.
    #[default]
    Auto,
    Direct,
    Fft,
}

impl ConvBackend {
    pub fn uses_fft(self, kernel_side: usize) -> bool {
        match self {
            ConvBackend::Auto => kernel_side >= FFT_CROSSOVER,
            ConvBackend::Direct => false,
            ConvBackend::Fft => true,
        }
    }
}

impl std::str::FromStr for ConvBackend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(ConvBackend::Auto),
            "direct" => Ok(ConvBackend::Direct),
            "fft" => Ok(ConvBackend::Fft),
            other => Err(format!("unknown convolution backend '{other}' (expected auto|direct|fft)")),
        }
    }
}

fn check_kernel(h: usize, w: usize, kernel: ArrayView2<'_, impl Real>) -> Result<usize> {
    let (kh, kw) = kernel.dim();
    if kh != kw {
        return Err(Error::ShapeMismatch(format!("kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::EvenKernel(kh));
    }
    if kh > h.min(w) {
        return Err(Error::KernelTooLarge { kernel: kh, height: h, width: w });
    }
    Ok(kh)
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&r), "reflect overhang exceeds image side");
    r as usize
}

/// Pads `half` pixels on every side.
pub fn pad<T: Real>(image: ArrayView2<'_, T>, half: usize, mode: PaddingMode) -> Array2<T> {
    let (h, w) = image.dim();
    match mode {
        PaddingMode::Zero => {
            let mut out = Array2::zeros((h + 2 * half, w + 2 * half));
            out.slice_mut(s![half..half + h, half..half + w]).assign(&image);
            out
        }
        PaddingMode::Reflect => Array2::from_shape_fn((h + 2 * half, w + 2 * half), |(pi, pj)| {
            let i = reflect_index(pi as isize - half as isize, h);
            let j = reflect_index(pj as isize - half as isize, w);
            image[(i, j)]
        }),
    }
}

/// Adjoint of [`pad`]: folds a gradient on the padded grid back onto the
/// `h x w` image it was padded from.
pub fn pad_adjoint<T: Real>(grad: ArrayView2<'_, T>, half: usize, mode: PaddingMode) -> Array2<T> {
    let (ph, pw) = grad.dim();
    let (h, w) = (ph - 2 * half, pw - 2 * half);
    match mode {
        PaddingMode::Zero => grad.slice(s![half..half + h, half..half + w]).to_owned(),
        PaddingMode::Reflect => {
            let mut out = Array2::zeros((h, w));
            for ((pi, pj), &g) in grad.indexed_iter() {
                let i = reflect_index(pi as isize - half as isize, h);
                let j = reflect_index(pj as isize - half as isize, w);
                out[(i, j)] = out[(i, j)] + g;
            }
            out
        }
    }
}

pub fn flip<T: Real>(kernel: ArrayView2<'_, T>) -> Array2<T> {
    kernel.slice(s![..;-1, ..;-1]).to_owned()
}

/// `out[i][j] = sum_{a,b} kernel[a][b] * padded[i + a][j + b]` over every
/// position where the kernel fits. Per-pixel accumulation runs over kernel
/// entries in row-major order.
pub fn correlate_valid<T: Real>(padded: ArrayView2<'_, T>, kernel: ArrayView2<'_, T>) -> Array2<T> {
    let (ph, pw) = padded.dim();
    let (kh, kw) = kernel.dim();
    let (oh, ow) = (ph + 1 - kh, pw + 1 - kw);
    let padded = padded.as_standard_layout();
    let src = padded.as_slice().expect("standard layout");
    let mut out = Array2::zeros((oh, ow));
    let dst = out.as_slice_mut().expect("fresh array");
    for a in 0..kh {
        for b in 0..kw {
            let kab = kernel[(a, b)];
            for i in 0..oh {
                let row = &src[(i + a) * pw + b..(i + a) * pw + b + ow];
                let out_row = &mut dst[i * ow..(i + 1) * ow];
                for (o, &p) in out_row.iter_mut().zip(row) {
                    *o = *o + kab * p;
                }
            }
        }
    }
    out
}

/// Same-size true convolution (direct reference path).
pub fn conv2d_same<T: Real>(image: ArrayView2<'_, T>, kernel: ArrayView2<'_, T>, mode: PaddingMode) -> Result<Array2<T>> {
    let (h, w) = image.dim();
    let k = check_kernel(h, w, kernel)?;
    let padded = pad(image, k / 2, mode);
    Ok(correlate_valid(padded.view(), flip(kernel).view()))
}

/// Same-size correlation (unflipped kernel).
pub fn correlate2d_same<T: Real>(
    image: ArrayView2<'_, T>,
    kernel: ArrayView2<'_, T>,
    mode: PaddingMode,
) -> Result<Array2<T>> {
    let (h, w) = image.dim();
    let k = check_kernel(h, w, kernel)?;
    let padded = pad(image, k / 2, mode);
    Ok(correlate_valid(padded.view(), kernel))
}

/// Full linear convolution with zero padding, `(H + k - 1) x (W + k - 1)`.
pub fn conv2d_full<T: Real>(image: ArrayView2<'_, T>, kernel: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let (kh, kw) = kernel.dim();
    if kh != kw {
        return Err(Error::ShapeMismatch(format!("kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::EvenKernel(kh));
    }
    Ok(full_direct(image, kernel))
}

fn full_direct<T: Real>(image: ArrayView2<'_, T>, kernel: ArrayView2<'_, T>) -> Array2<T> {
    let (h, w) = image.dim();
    let (kh, kw) = kernel.dim();
    let ow = w + kw - 1;
    let image = image.as_standard_layout();
    let src = image.as_slice().expect("standard layout");
    let mut out = Array2::zeros((h + kh - 1, ow));
    let dst = out.as_slice_mut().expect("fresh array");
    for a in 0..kh {
        for b in 0..kw {
            let kab = kernel[(a, b)];
            for i in 0..h {
                let row = &src[i * w..(i + 1) * w];
                let out_row = &mut dst[(i + a) * ow + b..(i + a) * ow + b + w];
                for (o, &p) in out_row.iter_mut().zip(row) {
                    *o = *o + kab * p;
                }
            }
        }
    }
    out
}

fn fft2_inplace<T: Real>(buf: &mut [Complex<T>], rows: usize, cols: usize, direction: FftDirection) {
    let row_fft = T::plan_fft(cols, direction);
    for row in buf.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = T::plan_fft(rows, direction);
    let mut column = vec![Complex::new(T::zero(), T::zero()); rows];
    for j in 0..cols {
        for (i, c) in column.iter_mut().enumerate() {
            *c = buf[i * cols + j];
        }
        col_fft.process(&mut column);
        for (i, c) in column.iter().enumerate() {
            buf[i * cols + j] = *c;
        }
    }
}

fn embed<T: Real>(image: ArrayView2<'_, T>, rows: usize, cols: usize) -> Vec<Complex<T>> {
    let mut buf = vec![Complex::new(T::zero(), T::zero()); rows * cols];
    for ((i, j), &x) in image.indexed_iter() {
        buf[i * cols + j] = Complex::new(x, T::zero());
    }
    buf
}

fn full_fft<T: Real>(image: ArrayView2<'_, T>, kernel: ArrayView2<'_, T>) -> Array2<T> {
    let (h, w) = image.dim();
    let (kh, kw) = kernel.dim();
    let (rows, cols) = (h + kh - 1, w + kw - 1);
    let mut a = embed(image, rows, cols);
    let mut b = embed(kernel, rows, cols);
    fft2_inplace(&mut a, rows, cols, FftDirection::Forward);
    fft2_inplace(&mut b, rows, cols, FftDirection::Forward);
    for (x, y) in a.iter_mut().zip(&b) {
        *x = *x * *y;
    }
    fft2_inplace(&mut a, rows, cols, FftDirection::Inverse);
    let scale = T::one() / T::lit((rows * cols) as f64);
    Array2::from_shape_fn((rows, cols), |(i, j)| a[i * cols + j].re * scale)
}

/// Full linear convolution through the frequency domain.
pub fn fft_conv2d_full<T: Real>(image: ArrayView2<'_, T>, kernel: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let (kh, kw) = kernel.dim();
    if kh != kw {
        return Err(Error::ShapeMismatch(format!("kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::EvenKernel(kh));
    }
    Ok(full_fft(image, kernel))
}

/// Same-size true convolution through the frequency domain.
pub fn fft_conv2d_same<T: Real>(
    image: ArrayView2<'_, T>,
    kernel: ArrayView2<'_, T>,
    mode: PaddingMode,
) -> Result<Array2<T>> {
    let (h, w) = image.dim();
    let k = check_kernel(h, w, kernel)?;
    let c = k / 2;
    Ok(match mode {
        PaddingMode::Zero => full_fft(image, kernel).slice(s![c..c + h, c..c + w]).to_owned(),
        PaddingMode::Reflect => {
            let padded = pad(image, c, mode);
            full_fft(padded.view(), kernel)
                .slice(s![2 * c..2 * c + h, 2 * c..2 * c + w])
                .to_owned()
        }
    })
}

/// [`conv2d_same`] or [`fft_conv2d_same`], as the backend selects.
pub fn conv2d_same_with<T: Real>(
    backend: ConvBackend,
    image: ArrayView2<'_, T>,
    kernel: ArrayView2<'_, T>,
    mode: PaddingMode,
) -> Result<Array2<T>> {
    if backend.uses_fft(kernel.dim().0) {
        fft_conv2d_same(image, kernel, mode)
    } else {
        conv2d_same(image, kernel, mode)
    }
}

pub fn conv2d_full_with<T: Real>(
    backend: ConvBackend,
    image: ArrayView2<'_, T>,
    kernel: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if backend.uses_fft(kernel.dim().0) {
        fft_conv2d_full(image, kernel)
    } else {
        conv2d_full(image, kernel)
    }
}

/// Applies the adjoint of `x -> conv2d_same(x, kernel, mode)` to `upstream`.
///
/// Under zero padding this equals `correlate2d_same(upstream, kernel, Zero)`;
/// under reflect padding the mirrored border contributions are folded back.
pub fn conv2d_same_adjoint<T: Real>(
    backend: ConvBackend,
    upstream: ArrayView2<'_, T>,
    kernel: ArrayView2<'_, T>,
    mode: PaddingMode,
) -> Result<Array2<T>> {
    let (h, w) = upstream.dim();
    let k = check_kernel(h, w, kernel)?;
    let flipped = flip(kernel);
    let grad_padded = conv2d_full_with(backend, upstream, flipped.view())?;
    Ok(pad_adjoint(grad_padded.view(), k / 2, mode))
}

/// Gradient of `sum(upstream * conv2d_same(x, K, mode))` with respect to `K`,
/// given `padded = pad(x, k / 2, mode)`.
pub fn kernel_gradient<T: Real>(padded: ArrayView2<'_, T>, upstream: ArrayView2<'_, T>) -> Array2<T> {
    flip(correlate_valid(padded, upstream).view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0))
    }

    fn delta(k: usize) -> Array2<f64> {
        let mut d = Array2::zeros((k, k));
        d[(k / 2, k / 2)] = 1.0;
        d
    }

    /// Quadruple loop, zero padding, true convolution.
    fn conv_oracle(x: &Array2<f64>, f: &Array2<f64>) -> Array2<f64> {
        let (h, w) = x.dim();
        let k = f.dim().0 as isize;
        let c = k / 2;
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for a in 0..k {
                for b in 0..k {
                    let (si, sj) = (i as isize + c - a, j as isize + c - b);
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        acc += f[(a as usize, b as usize)] * x[(si as usize, sj as usize)];
                    }
                }
            }
            acc
        })
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 7, 9);
        for mode in [PaddingMode::Zero, PaddingMode::Reflect] {
            assert_eq!(conv2d_same(x.view(), delta(3).view(), mode).unwrap(), x);
            assert_eq!(correlate2d_same(x.view(), delta(5).view(), mode).unwrap(), x);
        }
    }

    #[test]
    fn orientation_is_true_convolution() {
        let mut x = Array2::<f64>::zeros((5, 5));
        x[(2, 2)] = 1.0;
        let mut right = Array2::zeros((3, 3));
        right[(1, 2)] = 1.0;
        let y = conv2d_same(x.view(), right.view(), PaddingMode::Zero).unwrap();
        assert_eq!(y[(2, 3)], 1.0);
        assert_eq!(y.sum(), 1.0);
        // correlation moves the other way
        let z = correlate2d_same(x.view(), right.view(), PaddingMode::Zero).unwrap();
        assert_eq!(z[(2, 1)], 1.0);
    }

    #[test]
    fn constant_image_survives_reflect_blur() {
        let x = Array2::from_elem((8, 8), 3.5);
        let f = Array2::from_shape_fn((5, 5), |(a, b)| (1 + a + 2 * b) as f64);
        let f = &f / f.sum();
        let y = conv2d_same(x.view(), f.view(), PaddingMode::Reflect).unwrap();
        assert!(max_abs_diff(&y, &x) < 1e-12);
    }

    #[test]
    fn matches_loop_oracle_zero_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 7, 7);
        let f = random(&mut rng, 3, 3);
        let y = conv2d_same(x.view(), f.view(), PaddingMode::Zero).unwrap();
        assert!(max_abs_diff(&y, &conv_oracle(&x, &f)) < 1e-14);
    }

    #[test]
    fn kernel_errors() {
        let x = Array2::<f64>::zeros((4, 6));
        assert_eq!(
            conv2d_same(x.view(), Array2::zeros((2, 2)).view(), PaddingMode::Zero).unwrap_err(),
            Error::EvenKernel(2)
        );
        assert!(matches!(
            conv2d_same(x.view(), Array2::zeros((5, 5)).view(), PaddingMode::Zero),
            Err(Error::KernelTooLarge { kernel: 5, .. })
        ));
        assert_eq!(conv2d_full(x.view(), Array2::zeros((4, 4)).view()).unwrap_err(), Error::EvenKernel(4));
    }

    #[test]
    fn full_convolution_sums_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 5, 5);
        let f = random(&mut rng, 3, 3);
        let y = conv2d_full(x.view(), f.view()).unwrap();
        assert_eq!(y.dim(), (7, 7));
        let expected = x.sum() * f.sum();
        assert!((y.sum() - expected).abs() <= 1e-10 * expected.abs().max(1e-300));
        // loop oracle
        for p in 0..7 {
            for q in 0..7 {
                let mut acc = 0.0;
                for a in 0..3usize {
                    for b in 0..3usize {
                        if p >= a && q >= b && p - a < 5 && q - b < 5 {
                            acc += f[(a, b)] * x[(p - a, q - b)];
                        }
                    }
                }
                assert!((y[(p, q)] - acc).abs() < 1e-14);
            }
        }
        let single = Array2::from_elem((1, 1), 2.0);
        assert_eq!(conv2d_full(single.view(), f.view()).unwrap(), &f * 2.0);
    }

    #[test]
    fn symmetric_kernel_correlation_equals_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 6, 6);
        let g = random(&mut rng, 3, 3);
        let f = &g + &flip(g.view());
        for mode in [PaddingMode::Zero, PaddingMode::Reflect] {
            let a = conv2d_same(x.view(), f.view(), mode).unwrap();
            let b = correlate2d_same(x.view(), f.view(), mode).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-14);
        }
    }

    #[test]
    fn adjoint_identity_zero_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random(&mut rng, 6, 6);
            let u = random(&mut rng, 6, 6);
            let f = random(&mut rng, 3, 3);
            let lhs = (&conv2d_same(x.view(), f.view(), PaddingMode::Zero).unwrap() * &u).sum();
            let rhs = (&x * &correlate2d_same(u.view(), f.view(), PaddingMode::Zero).unwrap()).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn adjoint_identity_reflect_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for backend in [ConvBackend::Direct, ConvBackend::Fft] {
            for _ in 0..10 {
                let x = random(&mut rng, 7, 6);
                let u = random(&mut rng, 7, 6);
                let f = random(&mut rng, 5, 5);
                let lhs = (&conv2d_same(x.view(), f.view(), PaddingMode::Reflect).unwrap() * &u).sum();
                let adj = conv2d_same_adjoint(backend, u.view(), f.view(), PaddingMode::Reflect).unwrap();
                let rhs = (&x * &adj).sum();
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
            }
        }
    }

    #[test]
    fn kernel_gradient_matches_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 6, 7);
        let u = random(&mut rng, 6, 7);
        for mode in [PaddingMode::Zero, PaddingMode::Reflect] {
            let g = kernel_gradient(pad(x.view(), 1, mode).view(), u.view());
            // the map K -> <conv(x, K), u> is linear, so each entry is an inner product
            for a in 0..3 {
                for b in 0..3 {
                    let mut e = Array2::zeros((3, 3));
                    e[(a, b)] = 1.0;
                    let expected = (&conv2d_same(x.view(), e.view(), mode).unwrap() * &u).sum();
                    assert!((g[(a, b)] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fft_matches_direct_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(h, w, k) in &[(7, 7, 3), (12, 9, 5), (16, 16, 7), (64, 64, 9)] {
            let x = random(&mut rng, h, w);
            let f = random(&mut rng, k, k);
            for mode in [PaddingMode::Zero, PaddingMode::Reflect] {
                let d = conv2d_same(x.view(), f.view(), mode).unwrap();
                let q = fft_conv2d_same(x.view(), f.view(), mode).unwrap();
                let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(max_abs_diff(&d, &q) <= 1e-10 * scale, "{h}x{w} k={k} {mode:?}");
            }
        }
    }

    #[test]
    fn fft_matches_direct_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 64, 64).mapv(|v| v as f32);
        let f = random(&mut rng, 9, 9).mapv(|v| v as f32);
        for mode in [PaddingMode::Zero, PaddingMode::Reflect] {
            let d = conv2d_same(x.view(), f.view(), mode).unwrap();
            let q = fft_conv2d_same(x.view(), f.view(), mode).unwrap();
            let scale = d.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let err = d.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err <= 1e-5 * scale, "err {err} scale {scale}");
        }
        let mut dk = Array2::<f32>::zeros((7, 7));
        dk[(3, 3)] = 1.0;
        let y = fft_conv2d_same(x.view(), dk.view(), PaddingMode::Zero).unwrap();
        let err = y.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1e-5);
    }

    #[test]
    fn shift_covariance_on_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, 10, 10);
        let f = random(&mut rng, 3, 3);
        let mut shifted = Array2::zeros((10, 10));
        shifted.slice_mut(s![.., 1..]).assign(&x.slice(s![.., ..9]));
        let y = conv2d_same(x.view(), f.view(), PaddingMode::Zero).unwrap();
        let ys = conv2d_same(shifted.view(), f.view(), PaddingMode::Zero).unwrap();
        for i in 2..8 {
            for j in 2..8 {
                assert_eq!(ys[(i, j + 1)], y[(i, j)]);
            }
        }
    }

    #[test]
    fn reflect_pad_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, 5, 4);
        let g = random(&mut rng, 9, 8);
        let lhs = (&pad(x.view(), 2, PaddingMode::Reflect) * &g).sum();
        let rhs = (&x * &pad_adjoint(g.view(), 2, PaddingMode::Reflect)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
