//! Datasets: IDX image files, pixel scaling, and synthetic Gaussians with
//! known statistics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IDX element-type byte for unsigned 8-bit data.
const IDX_U8: u8 = 0x08;

/// `2v/255 - 1`, mapping `{0..255}` onto `[-1, 1]`.
#[inline]
pub fn scale_pixel_unchecked(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

/// [`scale_pixel_unchecked`] for an arbitrary integer, rejecting values
/// outside `{0..255}`.
pub fn scale_pixels(v: i64) -> Result<f64> {
    u8::try_from(v)
        .map(scale_pixel_unchecked)
        .map_err(|_| Error::domain(format!("pixel value {v} outside 0..=255")))
}

/// Validates integer pixels and narrows them to bytes.
pub fn pixels_from_ints(v: &[i64]) -> Result<Vec<u8>> {
    v.iter()
        .map(|&p| u8::try_from(p).map_err(|_| Error::domain(format!("pixel value {p} outside 0..=255"))))
        .collect()
}

/// Nearest 8-bit level of a value on the `[-1, 1]` scale.
pub fn quantize(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parameters a synthetic Gaussian dataset was drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeta {
    pub mean: Vec<f64>,
    pub cov_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Items {
    Pixels(Vec<u8>),
    Real(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Shape of one item.
    pub dims: Vec<usize>,
    pub items: Items,
    pub meta: Option<GaussianMeta>,
}

impl Dataset {
    pub fn from_pixels(name: &str, dims: Vec<usize>, pixels: Vec<u8>) -> Result<Self> {
        let d: usize = dims.iter().product();
        if d == 0 || pixels.len() % d != 0 {
            return Err(Error::domain(format!(
                "{} pixels do not split into items of shape {dims:?}",
                pixels.len()
            )));
        }
        Ok(Dataset {
            name: name.to_string(),
            dims,
            items: Items::Pixels(pixels),
            meta: None,
        })
    }

    /// Number of values per item.
    pub fn dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        let total = match &self.items {
            Items::Pixels(p) => p.len(),
            Items::Real(r) => r.len(),
        };
        total / self.dim().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Item values on the `[-1, 1]` scale.
    pub fn item_real(&self, i: usize) -> Vec<f64> {
        let d = self.dim();
        match &self.items {
            Items::Pixels(p) => p[i * d..(i + 1) * d].iter().map(|&v| scale_pixel_unchecked(v)).collect(),
            Items::Real(r) => r[i * d..(i + 1) * d].to_vec(),
        }
    }

    /// The dataset as 8-bit pixels; real-valued items are quantized.
    pub fn to_pixels(&self) -> Dataset {
        let pixels = match &self.items {
            Items::Pixels(p) => p.clone(),
            Items::Real(r) => r.iter().map(|&x| quantize(x)).collect(),
        };
        Dataset {
            name: self.name.clone(),
            dims: self.dims.clone(),
            items: Items::Pixels(pixels),
            meta: self.meta.clone(),
        }
    }

    pub fn pixels(&self) -> Option<&[u8]> {
        match &self.items {
            Items::Pixels(p) => Some(p),
            Items::Real(_) => None,
        }
    }

    /// Pixels of the selected items, concatenated.
    pub fn gather_pixels(&self, idx: &[usize]) -> Result<Vec<u8>> {
        let p = self
            .pixels()
            .ok_or_else(|| Error::config("dataset is not quantized to pixels"))?;
        let d = self.dim();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&p[i * d..(i + 1) * d]);
        }
        Ok(out)
    }

    /// CSV with one row per item and columns `x0, x1, ...`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut s = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
        s.push('\n');
        for i in 0..self.len() {
            let row: Vec<String> = match &self.items {
                Items::Pixels(p) => p[i * d..(i + 1) * d].iter().map(|v| v.to_string()).collect(),
                Items::Real(r) => r[i * d..(i + 1) * d].iter().map(|v| format!("{v:e}")).collect(),
            };
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// `n` draws from `N(mean, cov_scale · I)`.
pub fn synth_gaussian(n: usize, mean: &[f64], cov_scale: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::domain("dataset size must be positive"));
    }
    if !(cov_scale >= 0.0) {
        return Err(Error::domain(format!("cov_scale must be nonnegative, got {cov_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = cov_scale.sqrt();
    let d = mean.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for m in mean {
            let e: f64 = rng.sample(StandardNormal);
            data.push(m + sd * e);
        }
    }
    Ok(Dataset {
        name: format!("gaussian{d}d"),
        dims: vec![d],
        items: Items::Real(data),
        meta: Some(GaussianMeta {
            mean: mean.to_vec(),
            cov_scale,
            seed,
        }),
    })
}

pub fn synth_gaussian2d(n: usize, mean: [f64; 2], cov_scale: f64, seed: u64) -> Result<Dataset> {
    synth_gaussian(n, &mean, cov_scale, seed)
}

// ---------------------------------------------------------------------------
// IDX

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Parses an unsigned-byte IDX file. The first dimension counts items.
pub fn parse_idx(bytes: &[u8], name: &str) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "file shorter than the 4-byte magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    if bytes[2] != IDX_U8 {
        return Err(parse_err(2, format!("unsupported element type 0x{:02x} (only u8)", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(parse_err(3, "rank must be at least 1"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(parse_err(bytes.len(), format!("truncated header: need {header} bytes")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| parse_err(4, "declared size overflows"))?;
    let end = header + total;
    if bytes.len() < end {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: header declares {total} bytes, found {}", bytes.len() - header),
        ));
    }
    if bytes.len() > end {
        return Err(parse_err(end, "trailing bytes after payload"));
    }
    let item_dims = if rank == 1 { vec![1] } else { dims[1..].to_vec() };
    Ok(Dataset {
        name: name.to_string(),
        dims: item_dims,
        items: Items::Pixels(bytes[header..].to_vec()),
        meta: None,
    })
}

pub fn load_idx(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("idx");
    parse_idx(&bytes, name)
}

/// Serializes a pixel dataset as IDX. Single-value items are written as a
/// rank-1 file, matching how [`parse_idx`] reads them.
pub fn encode_idx(ds: &Dataset) -> Result<Vec<u8>> {
    let pixels = ds
        .pixels()
        .ok_or_else(|| Error::config("only pixel datasets can be written as IDX"))?;
    let mut dims = vec![ds.len()];
    if ds.dims != [1] {
        dims.extend_from_slice(&ds.dims);
    }
    if dims.len() > 255 {
        return Err(Error::config("IDX rank is limited to 255"));
    }
    let mut out = vec![0, 0, IDX_U8, dims.len() as u8];
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::config("IDX dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx(ds: &Dataset, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_idx(ds)?)
}

// ---------------------------------------------------------------------------
// Batching

/// Draws fixed-size batches by walking successive random permutations, so
/// every item appears exactly once per epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    perm: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("cannot batch an empty dataset"));
        }
        Ok(BatchSampler {
            n,
            perm: Vec::new(),
            pos: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.perm = (0..self.n).collect();
                self.perm.shuffle(rng);
                self.pos = 0;
                self.epoch += 1;
            }
            let take = (size - out.len()).min(self.perm.len() - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}
