//! Frequency-channel packing of block coefficients.
//!
//! Each 8×8 block becomes one spatial site with 64 channels, channel `c`
//! holding the coefficient at zigzag position `c`. Components with
//! different plane sizes stay in separate images.

use crate::jpeg::CoeffPlane;
use crate::nn::{Real, Tensor};

/// Zigzag position → natural (row-major) index within a block.
pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20,
    13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59,
    52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

/// Lower bound applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DctError {
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("normalization stats cover {stats} channels, input has {input}")]
    StatsMismatch { stats: usize, input: usize },
    #[error("empty corpus")]
    EmptyCorpus,
}

pub fn zigzag_index(k: usize) -> Result<(usize, usize), DctError> {
    let n = *ZIGZAG.get(k).ok_or_else(|| DctError::OutOfRange(format!("zigzag index {k}")))?;
    Ok((n / 8, n % 8))
}

pub fn inverse_zigzag(row: usize, col: usize) -> Result<usize, DctError> {
    if row > 7 || col > 7 {
        return Err(DctError::OutOfRange(format!("block position ({row}, {col})")));
    }
    let n = row * 8 + col;
    Ok(ZIGZAG.iter().position(|&z| z == n).expect("zigzag table is a permutation"))
}

/// Integer tensor of shape `(height, width, 64)`, stored site-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DctImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<i32>,
    pub component_id: u8,
}

impl DctImage {
    pub fn zeros(height: usize, width: usize, component_id: u8) -> Self {
        DctImage { height, width, channels: 64, data: vec![0; height * width * 64], component_id }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> i32 {
        self.data[(i * self.width + j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: i32) {
        let idx = (i * self.width + j) * self.channels + c;
        self.data[idx] = v;
    }
}

pub fn blocks_to_dct_image(plane: &CoeffPlane, component_id: u8) -> Result<DctImage, DctError> {
    if plane.data.len() != plane.blocks_v * plane.blocks_h * 64 {
        return Err(DctError::ShapeError("plane data does not match its block grid".into()));
    }
    let mut img = DctImage::zeros(plane.blocks_v, plane.blocks_h, component_id);
    for i in 0..plane.blocks_v {
        for j in 0..plane.blocks_h {
            for (c, &natural) in ZIGZAG.iter().enumerate() {
                img.set(i, j, c, plane.coeff(i, j, natural));
            }
        }
    }
    Ok(img)
}

pub fn dct_image_to_blocks(img: &DctImage) -> Result<CoeffPlane, DctError> {
    if img.channels != 64 || img.data.len() != img.height * img.width * img.channels {
        return Err(DctError::ShapeError(format!(
            "expected (H, W, 64), got ({}, {}, {})",
            img.height, img.width, img.channels
        )));
    }
    let mut plane = CoeffPlane::zeros(img.height, img.width);
    for i in 0..img.height {
        for j in 0..img.width {
            for (c, &natural) in ZIGZAG.iter().enumerate() {
                plane.set_coeff(i, j, natural, img.get(i, j, c));
            }
        }
    }
    Ok(plane)
}

/// Per-channel affine normalization for a stack of jointly coded
/// components (64 channels per component).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, input: usize) -> Result<(), DctError> {
        if self.mean.len() != input || self.std.len() != input {
            return Err(DctError::StatsMismatch { stats: self.mean.len(), input });
        }
        Ok(())
    }
}

fn stack_dims(stack: &[DctImage]) -> Result<(usize, usize), DctError> {
    let first = stack.first().ok_or_else(|| DctError::ShapeError("empty component stack".into()))?;
    if stack.iter().any(|d| d.height != first.height || d.width != first.width || d.channels != 64) {
        return Err(DctError::ShapeError("stacked components differ in shape".into()));
    }
    Ok((first.height, first.width))
}

/// `(v - mean_c) / std_c` for every channel of the stacked components, as
/// a `(1, 64·n, H, W)` tensor.
pub fn normalize<T: Real>(stack: &[DctImage], stats: &NormStats) -> Result<Tensor<T>, DctError> {
    let (h, w) = stack_dims(stack)?;
    let channels = 64 * stack.len();
    stats.check(channels)?;
    let mut out = Tensor::zeros([1, channels, h, w]);
    let plane = h * w;
    for (ci, img) in stack.iter().enumerate() {
        for c in 0..64 {
            let ch = ci * 64 + c;
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            let dst = &mut out.data[ch * plane..(ch + 1) * plane];
            for (site, d) in dst.iter_mut().enumerate() {
                *d = T::from_f64((img.data[site * 64 + c] as f64 - m) / s);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`] on a real tensor of shape `(N, C, H, W)`.
pub fn denormalize<T: Real>(t: &Tensor<T>, stats: &NormStats) -> Result<Tensor<T>, DctError> {
    let [n, c, h, w] = t.shape;
    stats.check(c)?;
    let mut out = t.clone();
    for b in 0..n {
        for ch in 0..c {
            let (m, s) = (T::from_f64(stats.mean[ch]), T::from_f64(stats.std[ch]));
            let start = (b * c + ch) * h * w;
            for v in &mut out.data[start..start + h * w] {
                *v = *v * s + m;
            }
        }
    }
    Ok(out)
}

/// Population mean and standard deviation per channel, accumulated in
/// exact integer arithmetic so the result does not depend on corpus order.
pub fn compute_norm_stats<'a, I>(corpus: I) -> Result<NormStats, DctError>
where
    I: IntoIterator<Item = &'a [DctImage]>,
{
    let mut sums: Vec<i128> = Vec::new();
    let mut squares: Vec<i128> = Vec::new();
    let mut count: u64 = 0;
    for stack in corpus {
        let (h, w) = stack_dims(stack)?;
        let channels = 64 * stack.len();
        if sums.is_empty() {
            sums = vec![0; channels];
            squares = vec![0; channels];
        } else if sums.len() != channels {
            return Err(DctError::StatsMismatch { stats: sums.len(), input: channels });
        }
        for (ci, img) in stack.iter().enumerate() {
            for site in 0..h * w {
                for c in 0..64 {
                    let v = img.data[site * 64 + c] as i128;
                    sums[ci * 64 + c] += v;
                    squares[ci * 64 + c] += v * v;
                }
            }
        }
        count += (h * w) as u64;
    }
    if count == 0 {
        return Err(DctError::EmptyCorpus);
    }
    let n = count as f64;
    let mut mean = Vec::with_capacity(sums.len());
    let mut std = Vec::with_capacity(sums.len());
    for (&s, &q) in sums.iter().zip(&squares) {
        let m = s as f64 / n;
        // n·Σv² − (Σv)² is exact in integers.
        let var_num = (count as i128) * q - s * s;
        let var = var_num as f64 / (n * n);
        mean.push(m);
        std.push(var.max(0.0).sqrt().max(STD_FLOOR));
    }
    Ok(NormStats { mean, std })
}
