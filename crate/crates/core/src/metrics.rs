//! Mask overlap and grayscale image-quality metrics.
//!
//! Mask counts and SSIM window sums are accumulated in integers; floating
//! point only enters at the final ratios.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimensionMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },
    #[error("image {width}x{height} is smaller than the 8x8 SSIM window")]
    TooSmall { width: usize, height: usize },
    #[error("{0} needs at least one pair")]
    Empty(&'static str),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_dims(w: usize, h: usize, len: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(MetricError::Invalid(format!("dimensions must be positive, got {w}x{h}")));
    }
    if w.checked_mul(h) != Some(len) {
        return Err(MetricError::Invalid(format!("{len} pixels for a {w}x{h} image")));
    }
    Ok(())
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(MetricError::DimensionMismatch {
            left_w: a.0,
            left_h: a.1,
            right_w: b.0,
            right_h: b.1,
        });
    }
    Ok(())
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let io = |message: String| MetricError::Io {
        path: path.to_path_buf(),
        message,
    };
    let img = ImageReader::open(path)
        .map_err(|e| io(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| io(e.to_string()))?
        .decode()
        .map_err(|e| io(e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let io = |message: String| MetricError::Io {
        path: path.to_path_buf(),
        message,
    };
    let file = File::create(path).map_err(|e| io(e.to_string()))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| io(e.to_string()))
}

/// Binary mask, row-major, `true` = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    pixels: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, pixels: Vec<bool>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn count(&self) -> u64 {
        self.pixels.iter().filter(|&&p| p).count() as u64
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| !p).collect(),
        }
    }

    /// Nonzero pixels are foreground.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let (w, h, px) = read_gray(path)?;
        Self::new(w, h, px.into_iter().map(|v| v != 0).collect())
    }

    /// Foreground is written as 255.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let px: Vec<u8> = self.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect();
        write_gray(path, self.width, self.height, &px)
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, pixels)
    }

    pub fn constant(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let (w, h, px) = read_gray(path)?;
        Self::new(w, h, px)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        write_gray(path, self.width, self.height, &self.pixels)
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, with two empty masks scoring 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_dims(pred.dims(), gt.dims())?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean over classes of the mean pair IoU within each class.
pub fn miou(pairs: &[(&Mask, &Mask, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("miou"));
    }
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(pred, gt, class) in pairs {
        let v = iou(pred, gt)?;
        let e = per_class.entry(class).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let total: f64 = per_class.values().map(|(s, n)| s / *n as f64).sum();
    Ok(total / per_class.len() as f64)
}

/// Mean of the foreground and background mean IoUs.
pub fn fbiou(pairs: &[(&Mask, &Mask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("fbiou"));
    }
    let (mut fg, mut bg) = (0.0, 0.0);
    for &(pred, gt) in pairs {
        fg += iou(pred, gt)?;
        bg += iou(&pred.complement(), &gt.complement())?;
    }
    let n = pairs.len() as f64;
    Ok((fg / n + bg / n) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    /// Zero mean squared error.
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Psnr::Identical => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<Psnr> {
    same_dims(a.dims(), b.dims())?;
    let sse: u64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = i64::from(x) - i64::from(y);
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(Psnr::Identical);
    }
    let n = a.pixels.len() as f64;
    Ok(Psnr::Db(10.0 * (255.0 * 255.0 * n / sse as f64).log10()))
}

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Summed-area table with a zero border row and column.
struct Integral {
    stride: usize,
    sums: Vec<i64>,
}

impl Integral {
    fn new(width: usize, height: usize, f: impl Fn(usize) -> i64) -> Self {
        let stride = width + 1;
        let mut sums = vec![0i64; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0i64;
            for x in 0..width {
                row += f(y * width + x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, sums }
    }

    fn window(&self, x: usize, y: usize, k: usize) -> i64 {
        let s = self.stride;
        self.sums[(y + k) * s + x + k] - self.sums[y * s + x + k] - self.sums[(y + k) * s + x] + self.sums[y * s + x]
    }
}

/// Mean SSIM over every 8x8 window at stride 1, uniform weights,
/// population statistics.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims(a.dims(), b.dims())?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall { width: w, height: h });
    }
    let pa = &a.pixels;
    let pb = &b.pixels;
    let sx = Integral::new(w, h, |i| i64::from(pa[i]));
    let sy = Integral::new(w, h, |i| i64::from(pb[i]));
    let sxx = Integral::new(w, h, |i| i64::from(pa[i]) * i64::from(pa[i]));
    let syy = Integral::new(w, h, |i| i64::from(pb[i]) * i64::from(pb[i]));
    let sxy = Integral::new(w, h, |i| i64::from(pa[i]) * i64::from(pb[i]));

    let k = SSIM_WINDOW;
    let n = (k * k) as i64;
    let nn = (n * n) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (ex, ey) = (sx.window(x, y, k), sy.window(x, y, k));
            let (exx, eyy, exy) = (sxx.window(x, y, k), syy.window(x, y, k), sxy.window(x, y, k));
            // Scaled by n^2: mean products and (co)variances.
            let lum_num = (2 * ex * ey) as f64 / nn + C1;
            let lum_den = (ex * ex + ey * ey) as f64 / nn + C1;
            let cs_num = (2 * (n * exy - ex * ey)) as f64 / nn + C2;
            let cs_den = ((n * exx - ex * ex) + (n * eyy - ey * ey)) as f64 / nn + C2;
            total += (lum_num * cs_num) / (lum_den * cs_den);
            count += 1;
        }
    }
    Ok(total / count as f64)
}
