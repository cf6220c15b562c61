//! On-disk formats and the pixel/latent codec.
//!
//! Tensor files: `b"AV2V"`, version `u32`, rank `u32`, each dim as `u32`, then
//! the row-major payload as `f64`; all integers and floats little-endian.
//! Frame directories hold binary pixmaps named `frame_%04d.ppm`.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, FormatError, Result};
use crate::latent::VideoLatent;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"AV2V";
pub const TENSOR_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], FormatError> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(FormatError::Truncated {
            expected: end,
            actual: bytes.len(),
        });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn take_u32(bytes: &[u8], at: &mut usize) -> Result<u32, FormatError> {
    let b = take(bytes, at, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4)?;
    if magic != TENSOR_MAGIC {
        return Err(FormatError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = take_u32(bytes, &mut at)?;
    if version != TENSOR_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let rank = take_u32(bytes, &mut at)? as usize;
    let mut dims = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        dims.push(take_u32(bytes, &mut at)? as u64);
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= usize::MAX as u64))
        .ok_or_else(|| FormatError::BadDims(dims.clone()))? as usize;
    let payload = take(bytes, &mut at, count * 8)?;
    if at != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - at));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let dims: Vec<usize> = dims.into_iter().map(|d| d as usize).collect();
    Tensor::new(dims.clone(), data).map_err(|_| FormatError::BadDims(dims.iter().map(|&d| d as u64).collect()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tensor(&bytes)?)
}

/// A video as pixel frames, each `[3, H, W]` with nominal values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
    pub frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>) -> Result<Self, FormatError> {
        let first = frames
            .first()
            .ok_or_else(|| FormatError::Geometry("frame sequence is empty".into()))?;
        if first.rank() != 3 || first.dims()[0] != 3 {
            return Err(FormatError::Geometry(format!(
                "frames must be [3, H, W], got {:?}",
                first.dims()
            )));
        }
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != first.dims()) {
            return Err(FormatError::Geometry(format!(
                "frame {i} is {:?}, frame 0 is {:?}",
                f.dims(),
                first.dims()
            )));
        }
        Ok(Self {
            frames,
            frame_rate: 8.0,
        })
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].dims()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].dims()[2]
    }

    pub fn clamped(&self) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.map(|v| v.clamp(0.0, 1.0))).collect(),
            frame_rate: self.frame_rate,
        }
    }
}

/// Orthogonal patch projection between pixels and latents.
///
/// Each non-overlapping `patch × patch` RGB block, flattened channel-major, is
/// multiplied by the transpose of a square orthogonal matrix, so the latent has
/// `3·patch²` channels and decoding is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCodec {
    patch: usize,
    seed: u64,
    /// `[3·patch², 3·patch²]`, row-major, orthogonal.
    projection: Tensor,
}

impl PatchCodec {
    pub fn new(patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let n = 3 * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let qr = gauss.qr();
        let mut q = qr.q();
        // sign-fix columns against the diagonal of R so the factor is unique
        let r = qr.r();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let projection = Tensor::from_fn(&[n, n], |i| q[(i / n, i % n)]);
        Ok(Self {
            patch,
            seed,
            projection,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    /// Encodes one `[3, H, W]` frame to `[C, H/p, W/p]`.
    pub fn encode_frame(&self, frame: &Tensor) -> Result<Tensor> {
        let (h, w) = (frame.dims()[1], frame.dims()[2]);
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(FormatError::Geometry(format!("{h}x{w} frame is not divisible by patch {p}")).into());
        }
        let (gh, gw) = (h / p, w / p);
        let n = self.latent_channels();
        let q = self.projection.data();
        let src = frame.data();
        let mut out = vec![0.0; n * gh * gw];
        let mut v = vec![0.0; n];
        for bi in 0..gh {
            for bj in 0..gw {
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            v[(c * p + dy) * p + dx] = src[(c * h + bi * p + dy) * w + bj * p + dx];
                        }
                    }
                }
                for k in 0..n {
                    let mut acc = 0.0;
                    for (i, &vi) in v.iter().enumerate() {
                        acc += q[i * n + k] * vi;
                    }
                    out[(k * gh + bi) * gw + bj] = acc;
                }
            }
        }
        Ok(Tensor::new(vec![n, gh, gw], out)?)
    }

    pub fn decode_frame(&self, latent: &Tensor) -> Result<Tensor> {
        let n = self.latent_channels();
        if latent.rank() != 3 || latent.dims()[0] != n {
            return Err(FormatError::ChannelMismatch {
                expected: n,
                actual: latent.dims().first().copied().unwrap_or(0),
            }
            .into());
        }
        let (gh, gw) = (latent.dims()[1], latent.dims()[2]);
        let p = self.patch;
        let (h, w) = (gh * p, gw * p);
        let q = self.projection.data();
        let src = latent.data();
        let mut out = vec![0.0; 3 * h * w];
        for bi in 0..gh {
            for bj in 0..gw {
                for i in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += q[i * n + k] * src[(k * gh + bi) * gw + bj];
                    }
                    let (c, rem) = (i / (p * p), i % (p * p));
                    let (dy, dx) = (rem / p, rem % p);
                    out[(c * h + bi * p + dy) * w + bj * p + dx] = acc;
                }
            }
        }
        Ok(Tensor::new(vec![3, h, w], out)?)
    }

    pub fn encode_video(&self, fs: &FrameSequence) -> Result<VideoLatent> {
        let frames = fs
            .frames()
            .iter()
            .map(|f| self.encode_frame(f))
            .collect::<Result<Vec<_>>>()?;
        VideoLatent::from_frames(&frames)
    }

    pub fn decode_video(&self, z: &VideoLatent) -> Result<FrameSequence> {
        let frames = (0..z.frames())
            .map(|i| self.decode_frame(&z.frame(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameSequence::new(frames)?)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary RGB pixmap bytes for a `[3, H, W]` frame; values are clamped to `[0, 1]`.
pub fn encode_ppm(frame: &Tensor) -> Vec<u8> {
    let (h, w) = (frame.dims()[1], frame.dims()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + i]));
        }
    }
    out
}

/// Binary grayscale map of a `[H, W]` plane, min/max stretched to `0..=255`.
pub fn encode_pgm(plane: &Tensor) -> Vec<u8> {
    let (h, w) = (plane.dims()[0], plane.dims()[1]);
    let lo = plane.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.data().iter().map(|&v| quantize((v - lo) / span)));
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.at < self.bytes.len() {
            match self.bytes[self.at] {
                b'#' => {
                    while self.at < self.bytes.len() && self.bytes[self.at] != b'\n' {
                        self.at += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.at += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.at;
        while self.at < self.bytes.len() && self.bytes[self.at].is_ascii_digit() {
            self.at += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.at]).ok()?.parse().ok()
    }
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor, FormatError> {
    let bad = |detail: &str| FormatError::Pixmap {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("not a binary RGB pixmap"));
    }
    let mut hdr = Header { bytes, at: 2 };
    let w = hdr.number().ok_or_else(|| bad("missing width"))?;
    let h = hdr.number().ok_or_else(|| bad("missing height"))?;
    let maxval = hdr.number().ok_or_else(|| bad("missing maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image"));
    }
    if hdr.at >= bytes.len() || !bytes[hdr.at].is_ascii_whitespace() {
        return Err(bad("malformed header"));
    }
    let pixels = &bytes[hdr.at + 1..];
    if pixels.len() != 3 * w * h {
        return Err(bad(&format!("{} pixel bytes, expected {}", pixels.len(), 3 * w * h)));
    }
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = pixels[3 * i + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("frame dims"))
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

pub fn write_frames(dir: &Path, fs: &FrameSequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in fs.frames().iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        std::fs::write(&path, encode_ppm(f)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Lists `*.ppm` files of `dir` in lexicographic order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "ppm") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(FormatError::EmptyDirectory(dir.to_path_buf()).into());
    }
    Ok(paths)
}

pub fn read_frame(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_ppm(&bytes, path)?)
}

pub fn read_frames(dir: &Path) -> Result<FrameSequence> {
    let frames = frame_paths(dir)?
        .iter()
        .map(|p| read_frame(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence::new(frames)?)
}
