//! Baselines and evaluation: sample-mean coadd, PSNR, threshold source
//! extraction, catalog matching and background-zeroing statistics.
//!
//! Extraction is a minimal threshold / 8-connected segmentation / centroid
//! pipeline. There is no deblending; touching sources merge into one
//! component.

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, ExposureStack, Real, Result};

/// Scale factor turning a median absolute deviation into a Gaussian sigma.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// Unweighted pixelwise mean of the exposures, accumulated as
/// `sum_t (1/n) * y_t` in exposure order.
pub fn coadd_mean<T: Real>(stack: &ExposureStack<T>) -> Array2<T> {
    let inv = T::one() / T::lit(stack.n() as f64);
    let mut acc = Array2::zeros((stack.height(), stack.width()));
    for plane in stack.exposures().outer_iter() {
        acc.zip_mut_with(&plane, |a, &y| *a = *a + inv * y);
    }
    acc
}

/// `10 log10(peak^2 / MSE)` in dB; `+inf` for identical images. `peak`
/// defaults to the maximum of `truth`.
pub fn psnr<T: Real>(img: ArrayView2<'_, T>, truth: ArrayView2<'_, T>, peak: Option<f64>) -> Result<f64> {
    if img.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!("image {:?} vs truth {:?}", img.dim(), truth.dim())));
    }
    let peak = peak.unwrap_or_else(|| truth.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64_lossless())));
    if !(peak > 0.0) {
        return Err(Error::InvalidConfig(format!("PSNR peak must be > 0, got {peak}")));
    }
    let sse: f64 = img
        .iter()
        .zip(truth.iter())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossless() - b.to_f64_lossless();
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / img.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn mad_sigma(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let med = median(&values);
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    MAD_TO_SIGMA * median(&dev)
}

/// Clip level, in sigmas, of the zero-inflated fallback in [`robust_sigma`].
pub const CLIP_SIGMA: f64 = 3.0;

/// Robust background sigma, `1.4826 * MAD`, over the pixels inside `border`.
///
/// Restored latents are zero-inflated: when more than half the pixels are
/// exactly zero the MAD collapses to 0. The background is then modelled as
/// rectified noise, whose positive part is half-normal with median
/// `0.6745 sigma`. Sigma is estimated as `1.4826 * median` of the positive
/// pixels, iteratively discarding values above `CLIP_SIGMA * sigma` so that
/// source pixels drop out.
pub fn robust_sigma<T: Real>(img: ArrayView2<'_, T>, border: usize) -> f64 {
    let (h, w) = img.dim();
    let mut values = Vec::with_capacity(h * w);
    for ((i, j), &x) in img.indexed_iter() {
        if i >= border && j >= border && i + border < h && j + border < w {
            values.push(x.to_f64_lossless());
        }
    }
    let mut positive: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).collect();
    let sigma = mad_sigma(values);
    if sigma > 0.0 || positive.is_empty() {
        return sigma;
    }
    positive.sort_by(f64::total_cmp);
    let mut sigma = MAD_TO_SIGMA * median(&positive);
    for _ in 0..100 {
        let kept = positive.partition_point(|&v| v <= CLIP_SIGMA * sigma);
        let next = MAD_TO_SIGMA * median(&positive[..kept.max(1)]);
        if next == sigma {
            break;
        }
        sigma = next;
    }
    sigma
}

/// One extracted (or ground-truth) source. `x` is the column and `y` the row
/// of the flux-weighted centroid, in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub x: f64,
    pub y: f64,
    pub flux: f64,
    pub peak: f64,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceCatalog {
    pub sources: Vec<Source>,
}

/// Fixed-point formatting with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{:.5}", x);
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{:.*}", decimals, x)
}

impl SourceCatalog {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// CSV with header `id,x,y,flux,peak,area`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,x,y,flux,peak,area\n");
        for (id, s) in self.sources.iter().enumerate() {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{}",
                fmt_sig6(s.x),
                fmt_sig6(s.y),
                fmt_sig6(s.flux),
                fmt_sig6(s.peak),
                s.area
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "id,x,y,flux,peak,area" => {}
            _ => return Err(Error::CorruptPayload("catalog header must be id,x,y,flux,peak,area".into())),
        }
        let mut sources = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::CorruptPayload(format!("catalog row {row} has {} fields", f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::CorruptPayload(format!("row {row}: {e}")))
            };
            let area = f[5]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::CorruptPayload(format!("row {row}: {e}")))?;
            sources.push(Source { x: num(f[1])?, y: num(f[2])?, flux: num(f[3])?, peak: num(f[4])?, area });
        }
        Ok(Self { sources })
    }

    /// Sources whose flux is at least `min_flux`.
    pub fn brighter_than(&self, min_flux: f64) -> Self {
        Self { sources: self.sources.iter().filter(|s| s.flux >= min_flux).cloned().collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub threshold_sigma: f64,
    pub bg_sigma: f64,
    /// Components with any pixel this close to the edge are dropped.
    pub border: usize,
}

/// Thresholds at `threshold_sigma * bg_sigma`, segments by 8-connectivity
/// and reports one source per component that stays clear of the border.
pub fn extract_sources<T: Real>(img: ArrayView2<'_, T>, cfg: &ExtractConfig) -> Result<SourceCatalog> {
    if !(cfg.bg_sigma > 0.0) || !(cfg.threshold_sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "need bg_sigma > 0 and threshold >= 0, got {} and {}",
            cfg.bg_sigma, cfg.threshold_sigma
        )));
    }
    let (h, w) = img.dim();
    let threshold = cfg.threshold_sigma * cfg.bg_sigma;
    let above = img.mapv(|x| x.to_f64_lossless() > threshold);
    let mut seen = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    let mut sources = Vec::new();
    let b = cfg.border;
    for si in 0..h {
        for sj in 0..w {
            if !above[(si, sj)] || seen[(si, sj)] {
                continue;
            }
            seen[(si, sj)] = true;
            queue.push_back((si, sj));
            let (mut flux, mut sx, mut sy, mut peak, mut area) = (0.0, 0.0, 0.0, f64::NEG_INFINITY, 0usize);
            let mut touches_border = false;
            while let Some((i, j)) = queue.pop_front() {
                let v = img[(i, j)].to_f64_lossless();
                flux += v;
                sx += v * j as f64;
                sy += v * i as f64;
                peak = peak.max(v);
                area += 1;
                if i < b || j < b || i + b >= h || j + b >= w {
                    touches_border = true;
                }
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if above[(ni, nj)] && !seen[(ni, nj)] {
                            seen[(ni, nj)] = true;
                            queue.push_back((ni, nj));
                        }
                    }
                }
            }
            if !touches_border && flux > 0.0 {
                sources.push(Source { x: sx / flux, y: sy / flux, flux, peak, area });
            }
        }
    }
    Ok(SourceCatalog { sources })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMatch {
    pub truth: usize,
    pub detected: usize,
    pub offset: f64,
    /// Detected flux over truth flux.
    pub flux_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Matched truth sources over all truth sources (1 when truth is empty).
    pub completeness: f64,
    /// Matched detections over all detections (1 when nothing was detected).
    pub purity: f64,
    pub matches: Vec<SourceMatch>,
    pub n_truth: usize,
    pub n_detected: usize,
}

/// Greedy one-to-one matching: candidate pairs within `radius` are taken in
/// order of increasing distance, ties broken by truth then detection order.
pub fn match_catalogs(detected: &SourceCatalog, truth: &SourceCatalog, radius: f64) -> Result<MatchReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!("match radius must be > 0, got {radius}")));
    }
    let mut pairs = Vec::new();
    for (ti, t) in truth.sources.iter().enumerate() {
        for (di, d) in detected.sources.iter().enumerate() {
            let dist = (t.x - d.x).hypot(t.y - d.y);
            if dist <= radius {
                pairs.push((dist, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_used = vec![false; truth.len()];
    let mut det_used = vec![false; detected.len()];
    let mut matches = Vec::new();
    for (dist, ti, di) in pairs {
        if truth_used[ti] || det_used[di] {
            continue;
        }
        truth_used[ti] = true;
        det_used[di] = true;
        matches.push(SourceMatch {
            truth: ti,
            detected: di,
            offset: dist,
            flux_ratio: detected.sources[di].flux / truth.sources[ti].flux,
        });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(MatchReport {
        completeness: ratio(matches.len(), truth.len()),
        purity: ratio(matches.len(), detected.len()),
        n_truth: truth.len(),
        n_detected: detected.len(),
        matches,
    })
}

/// Among pixels where `truth` is zero and no nonzero truth pixel lies within
/// Chebyshev distance `dilation - 1`, the fraction whose latent value is
/// exactly zero.
pub fn background_zero_fraction<T: Real>(
    latent: ArrayView2<'_, T>,
    truth: ArrayView2<'_, T>,
    dilation: usize,
) -> Result<f64> {
    if latent.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!("latent {:?} vs truth {:?}", latent.dim(), truth.dim())));
    }
    let (h, w) = truth.dim();
    let mut near = Array2::from_elem((h, w), false);
    let reach = dilation.saturating_sub(1);
    for ((i, j), &x) in truth.indexed_iter() {
        if x != T::zero() {
            if dilation == 0 {
                near[(i, j)] = true;
                continue;
            }
            for ni in i.saturating_sub(reach)..=(i + reach).min(h - 1) {
                for nj in j.saturating_sub(reach)..=(j + reach).min(w - 1) {
                    near[(ni, nj)] = true;
                }
            }
        }
    }
    let (mut total, mut zero) = (0usize, 0usize);
    for ((i, j), &x) in latent.indexed_iter() {
        if !near[(i, j)] && truth[(i, j)] == T::zero() {
            total += 1;
            if x == T::zero() {
                zero += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyBackground);
    }
    Ok(zero as f64 / total as f64)
}
