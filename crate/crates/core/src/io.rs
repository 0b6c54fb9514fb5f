//! File formats: the `MFDS` binary stack container, 16-bit PGM export and
//! training checkpoints.
//!
//! `MFDS` layout, all little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `MFDS` |
//! | 4  | 4 | version (1) |
//! | 8  | 4 | n |
//! | 12 | 4 | H |
//! | 16 | 4 | W |
//! | 20 | 4 | k (PSF side, 0 when absent) |
//! | 24 | 4 | flags: bit 0 variances, bit 1 PSFs |
//! | 28 | 8 | payload length in bytes |
//! | 36 | 4 | CRC-32 of the payload |
//!
//! The payload is f32: exposures `(n, H, W)`, then variances `(n, H, W)` if
//! flagged, then PSFs `(n, k, k)` if flagged. A PSF-only file has `H = W = 0`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};

use crate::optim::Checkpoint;
use crate::{Error, ExposureStack, LatentImage, PsfMode, PsfSet, Real, Result};

pub const STACK_MAGIC: [u8; 4] = *b"MFDS";
pub const STACK_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
pub const FLAG_VARIANCES: u32 = 1;
pub const FLAG_PSFS: u32 = 2;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 20;

/// In-memory form of an `MFDS` file.
#[derive(Debug, Clone, PartialEq)]
pub struct StackFile {
    pub exposures: Array3<f32>,
    pub variances: Option<Array3<f32>>,
    pub psfs: Option<Array3<f32>>,
}

fn to_f32<T: Real>(a: &Array3<T>) -> Array3<f32> {
    a.mapv(|x| x.to_f32().unwrap_or(f32::NAN))
}

fn from_f32<T: Real>(a: &Array3<f32>) -> Array3<T> {
    a.mapv(|x| T::lit(x as f64))
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

impl StackFile {
    pub fn from_stack<T: Real>(stack: &ExposureStack<T>, psfs: Option<&PsfSet<T>>) -> Self {
        Self {
            exposures: to_f32(stack.exposures()),
            variances: Some(to_f32(stack.variances())),
            psfs: psfs.map(|p| to_f32(p.kernels())),
        }
    }

    /// A single-plane file holding an image without variances.
    pub fn from_image<T: Real>(img: ArrayView2<'_, T>) -> Self {
        let (h, w) = img.dim();
        let data = img.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect();
        Self { exposures: Array3::from_shape_vec((1, h, w), data).expect("shape"), variances: None, psfs: None }
    }

    pub fn from_psfs<T: Real>(psfs: &PsfSet<T>) -> Self {
        Self { exposures: Array3::zeros((psfs.n(), 0, 0)), variances: None, psfs: Some(to_f32(psfs.kernels())) }
    }

    pub fn n(&self) -> usize {
        self.exposures.dim().0
    }

    pub fn to_stack<T: Real>(&self) -> Result<ExposureStack<T>> {
        let v = self
            .variances
            .as_ref()
            .ok_or_else(|| Error::InvalidHeader("file carries no variance planes".into()))?;
        ExposureStack::new(from_f32(&self.exposures), from_f32(v))
    }

    pub fn to_psfs<T: Real>(&self, mode: PsfMode) -> Result<Option<PsfSet<T>>> {
        match &self.psfs {
            Some(k) => Ok(Some(PsfSet::new(from_f32(k), mode)?)),
            None => Ok(None),
        }
    }

    /// First plane as a 2-D image.
    pub fn image<T: Real>(&self) -> Result<Array2<T>> {
        if self.n() == 0 {
            return Err(Error::InvalidHeader("file holds no planes".into()));
        }
        Ok(self.exposures.index_axis(ndarray::Axis(0), 0).mapv(|x| T::lit(x as f64)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, h, w) = self.exposures.dim();
        let k = self.psfs.as_ref().map_or(0, |p| p.dim().1);
        let mut flags = 0;
        let mut payload = Vec::new();
        let mut push = |a: &Array3<f32>| {
            for x in a.iter() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        push(&self.exposures);
        if let Some(v) = &self.variances {
            flags |= FLAG_VARIANCES;
            push(v);
        }
        if let Some(p) = &self.psfs {
            flags |= FLAG_PSFS;
            push(p);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&STACK_MAGIC);
        for x in [STACK_VERSION, n as u32, h as u32, w as u32, k as u32, flags] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and validates a complete file image. Never panics on
    /// malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedPayload { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != STACK_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
        }
        let version = read_u32(bytes, 4);
        if version != STACK_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (n, h, w, k, flags) =
            (read_u32(bytes, 8), read_u32(bytes, 12), read_u32(bytes, 16), read_u32(bytes, 20), read_u32(bytes, 24));
        let declared = read_u64(bytes, 28);
        let crc = read_u32(bytes, 36);
        let bad = |m: &str| Err(Error::InvalidHeader(m.into()));
        if flags & !(FLAG_VARIANCES | FLAG_PSFS) != 0 {
            return bad("unknown flag bits");
        }
        if n == 0 {
            return bad("n must be >= 1");
        }
        if (h == 0) != (w == 0) {
            return bad("H and W must both be zero or both positive");
        }
        let has_psfs = flags & FLAG_PSFS != 0;
        let has_var = flags & FLAG_VARIANCES != 0;
        if has_psfs && k % 2 == 0 {
            return bad("PSF side must be odd");
        }
        if !has_psfs && k != 0 {
            return bad("k set without PSF flag");
        }
        if h == 0 && (has_var || !has_psfs) {
            return bad("image-less file must carry PSFs only");
        }
        let plane = (h as u64).checked_mul(w as u64).and_then(|p| p.checked_mul(n as u64));
        let kern = (k as u64).checked_mul(k as u64).and_then(|p| p.checked_mul(n as u64));
        let expected = plane
            .zip(kern)
            .and_then(|(p, q)| {
                let images = p.checked_mul(if has_var { 2 } else { 1 })?;
                let psf = if has_psfs { q } else { 0 };
                images.checked_add(psf)?.checked_mul(4)
            })
            .ok_or_else(|| Error::InvalidHeader("dimensions overflow".into()))?;
        if declared != expected {
            return Err(Error::InvalidHeader(format!("payload length {declared} but dimensions need {expected}")));
        }
        let found = (bytes.len() - HEADER_LEN) as u64;
        if found < expected {
            return Err(Error::TruncatedPayload { expected, found });
        }
        if found > expected {
            return Err(Error::TrailingData(found - expected));
        }
        let payload = &bytes[HEADER_LEN..];
        let computed = crc32fast::hash(payload);
        if computed != crc {
            return Err(Error::ChecksumMismatch { expected: crc, computed });
        }
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let (n, h, w, k) = (n as usize, h as usize, w as usize, k as usize);
        let mut take = |shape: (usize, usize, usize)| {
            let data: Vec<f32> = floats.by_ref().take(shape.0 * shape.1 * shape.2).collect();
            Array3::from_shape_vec(shape, data).expect("length checked above")
        };
        let exposures = take((n, h, w));
        let variances = has_var.then(|| take((n, h, w)));
        let psfs = has_psfs.then(|| take((n, k, k)));
        Ok(Self { exposures, variances, psfs })
    }
}

pub fn write_stack_file(path: impl AsRef<Path>, file: &StackFile) -> Result<()> {
    fs::write(path, file.to_bytes())?;
    Ok(())
}

pub fn read_stack_file(path: impl AsRef<Path>) -> Result<StackFile> {
    StackFile::from_bytes(&fs::read(path)?)
}

pub fn write_stack<T: Real>(path: impl AsRef<Path>, stack: &ExposureStack<T>, psfs: Option<&PsfSet<T>>) -> Result<()> {
    write_stack_file(path, &StackFile::from_stack(stack, psfs))
}

/// Reads a stack and, when present, its PSFs (tagged fixed).
pub fn read_stack<T: Real>(path: impl AsRef<Path>) -> Result<(ExposureStack<T>, Option<PsfSet<T>>)> {
    let f = read_stack_file(path)?;
    Ok((f.to_stack()?, f.to_psfs(PsfMode::Fixed)?))
}

/// Reads PSFs from any `MFDS` file that carries them.
pub fn read_psfs<T: Real>(path: impl AsRef<Path>) -> Result<PsfSet<T>> {
    read_stack_file(path)?
        .to_psfs(PsfMode::Fixed)?
        .ok_or_else(|| Error::InvalidHeader("file carries no PSFs".into()))
}

pub fn write_latent<T: Real>(path: impl AsRef<Path>, latent: &LatentImage<T>) -> Result<()> {
    write_stack_file(path, &StackFile::from_image(latent.pixels().view()))
}

/// `q`-quantile (0..=1) with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Stretch used by [`encode_pgm16`] when none is given: 0 to the 99.5th
/// percentile.
pub fn default_stretch<T: Real>(img: ArrayView2<'_, T>) -> (f64, f64) {
    let v: Vec<f64> = img.iter().map(|x| x.to_f64_lossless()).collect();
    (0.0, percentile(&v, 0.995))
}

/// Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples). Values are
/// mapped linearly so `lo -> 0` and `hi -> 65535`, clipped, and rounded half
/// up. The applied stretch is recorded in a header comment.
pub fn encode_pgm16<T: Real>(img: ArrayView2<'_, T>, lo: Option<f64>, hi: Option<f64>) -> Result<(Vec<u8>, f64, f64)> {
    let (dlo, dhi) = if lo.is_none() || hi.is_none() { default_stretch(img) } else { (0.0, 0.0) };
    let (lo, hi) = (lo.unwrap_or(dlo), hi.unwrap_or(dhi));
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateRange { lo, hi });
    }
    let (h, w) = img.dim();
    let mut out = format!("P5\n# lo={lo:?} hi={hi:?}\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * h * w);
    for &x in img.iter() {
        let s = (x.to_f64_lossless() - lo) / (hi - lo) * 65535.0;
        let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 65535.0) };
        let q = (s + 0.5).floor().min(65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok((out, lo, hi))
}

pub fn export_pgm16<T: Real>(
    path: impl AsRef<Path>,
    img: ArrayView2<'_, T>,
    lo: Option<f64>,
    hi: Option<f64>,
) -> Result<(f64, f64)> {
    let (bytes, lo, hi) = encode_pgm16(img, lo, hi)?;
    fs::write(path, bytes)?;
    Ok((lo, hi))
}

/// `MFCK` | version u32 | CRC-32 u32 | body length u64 | JSON body.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(ckpt).map_err(|e| Error::CorruptPayload(e.to_string()))?;
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + body.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(Error::CorruptPayload(format!("checkpoint is only {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = read_u32(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
    }
    let crc = read_u32(bytes, 8);
    let len = read_u64(bytes, 12);
    let body = &bytes[CHECKPOINT_HEADER_LEN..];
    if body.len() as u64 != len {
        return Err(Error::CorruptPayload(format!("body is {} bytes, header says {len}", body.len())));
    }
    if crc32fast::hash(body) != crc {
        return Err(Error::CorruptPayload("checksum mismatch".into()));
    }
    serde_json::from_slice(body).map_err(|e| Error::CorruptPayload(e.to_string()))
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
