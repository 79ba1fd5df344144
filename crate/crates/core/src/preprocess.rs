//! Image preprocessing: grayscale conversion, right-angle orientation,
//! center cropping and area-averaging downsampling, plus 8-bit PNG IO.

use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use rand::RngCore;

use crate::error::{Error, Result};

/// Side of the square window taken from each trial image.
pub const CROP_SIDE: usize = 960;
/// Side of the network input.
pub const INPUT_SIDE: usize = 128;

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rgb bytes", width * height * 3),
                got: pixels.len().to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }
}

/// Row-major scalar pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", width * height),
                got: pixels.len().to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Quantizes to 8 bits by rounding `v * 255`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma(r: u8, g: u8, b: u8) -> f32 {
    let y = LUMA[0] * r as f64 + LUMA[1] * g as f64 + LUMA[2] * b as f64;
    ((y / 255.0) as f32).clamp(0.0, 1.0)
}

pub fn to_grayscale(image: &RawImage) -> GrayImage {
    // Neutral pixels dominate microscope captures; same arithmetic, looked up.
    let neutral: [f32; 256] = std::array::from_fn(|v| luma(v as u8, v as u8, v as u8));
    let mut pixels = vec![0f32; image.pixels.len() / 3];
    for (out, p) in pixels.iter_mut().zip(image.pixels.chunks_exact(3)) {
        let &[r, g, b] = p else { unreachable!() };
        *out = if r == g && g == b { neutral[r as usize] } else { luma(r, g, b) };
    }
    GrayImage {
        width: image.width,
        height: image.height,
        pixels,
    }
}

/// An element of the dihedral group of the square: `quarter_turns`
/// clockwise rotations followed by an optional horizontal flip and then an
/// optional vertical flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Orientation {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation {
        quarter_turns: 0,
        flip_horizontal: false,
        flip_vertical: false,
    };

    /// All eight elements.
    pub fn all() -> impl Iterator<Item = Orientation> {
        (0..4u8).flat_map(|q| {
            [false, true].into_iter().map(move |h| Orientation {
                quarter_turns: q,
                flip_horizontal: h,
                flip_vertical: false,
            })
        })
    }

    /// Draws a rotation, then a horizontal flip, then a vertical flip,
    /// consuming exactly three 32-bit draws from `rng`.
    pub fn sample<R: RngCore + ?Sized>(rng: &mut R) -> Orientation {
        let quarter_turns = (rng.next_u32() >> 30) as u8;
        let flip_horizontal = rng.next_u32() >> 31 == 1;
        let flip_vertical = rng.next_u32() >> 31 == 1;
        Orientation {
            quarter_turns,
            flip_horizontal,
            flip_vertical,
        }
    }

    /// Dimensions `(width, height)` after applying to a `width x height` image.
    pub fn output_dims(&self, width: usize, height: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Maps an output coordinate back to the source coordinate it reads.
    #[inline]
    fn source_of(&self, y: usize, x: usize, src_w: usize, src_h: usize) -> (usize, usize) {
        let (out_w, out_h) = self.output_dims(src_w, src_h);
        let y = if self.flip_vertical { out_h - 1 - y } else { y };
        let x = if self.flip_horizontal { out_w - 1 - x } else { x };
        match self.quarter_turns % 4 {
            0 => (y, x),
            1 => (src_h - 1 - x, y),
            2 => (src_h - 1 - y, src_w - 1 - x),
            _ => (x, src_w - 1 - y),
        }
    }

    pub fn apply(&self, image: &GrayImage) -> GrayImage {
        let (w, h) = self.output_dims(image.width, image.height);
        self.gather(image, 0, 0, w, h)
    }

    /// Orientation followed by the `side x side` center crop, computed as a
    /// single gather over the crop window. Equal to
    /// `center_crop(&o.apply(img), side)` bit for bit.
    pub fn apply_and_crop(&self, image: &GrayImage, side: usize) -> Result<GrayImage> {
        let (w, h) = self.output_dims(image.width, image.height);
        if w < side || h < side {
            return Err(Error::ImageTooSmall {
                width: w,
                height: h,
                side,
            });
        }
        Ok(self.gather(image, (h - side) / 2, (w - side) / 2, side, side))
    }

    /// Source index of output pixel (y, x) of the oriented `w x h` window at
    /// (top, left), as `origin + y * dy + x * dx`.
    fn strides(&self, image: &GrayImage, top: usize, left: usize, w: usize, h: usize) -> (isize, isize, isize) {
        let index = |y, x| {
            let (sy, sx) = self.source_of(y + top, x + left, image.width, image.height);
            (sy * image.width + sx) as isize
        };
        let origin = index(0, 0);
        let dx = if w > 1 { index(0, 1) - origin } else { 0 };
        let dy = if h > 1 { index(1, 0) - origin } else { 0 };
        (origin, dy, dx)
    }

    fn gather(&self, image: &GrayImage, top: usize, left: usize, w: usize, h: usize) -> GrayImage {
        let mut pixels = Vec::with_capacity(w * h);
        if w > 0 && h > 0 {
            let (origin, dy, dx) = self.strides(image, top, left, w, h);
            // Tiled so that quarter turns, which read source columns, stay in cache.
            const TILE: usize = 32;
            pixels.resize(w * h, 0.0);
            for ty in (0..h).step_by(TILE) {
                for tx in (0..w).step_by(TILE) {
                    for y in ty..(ty + TILE).min(h) {
                        let row = origin + y as isize * dy;
                        let out = &mut pixels[y * w + tx..y * w + (tx + TILE).min(w)];
                        for (x, p) in (tx..).zip(out) {
                            *p = image.pixels[(row + x as isize * dx) as usize];
                        }
                    }
                }
            }
        }
        GrayImage {
            width: w,
            height: h,
            pixels,
        }
    }

    /// `downsample(&self.apply_and_crop(image, crop)?, side)` bit for bit,
    /// reading the source through the orientation instead of copying the crop.
    pub fn crop_and_downsample(&self, image: &GrayImage, crop: usize, side: usize) -> Result<GrayImage> {
        let (w, h) = self.output_dims(image.width, image.height);
        if w < crop || h < crop {
            return Err(Error::ImageTooSmall {
                width: w,
                height: h,
                side: crop,
            });
        }
        check_downsample(crop, side)?;
        let (origin, dy, dx) = self.strides(image, (h - crop) / 2, (w - crop) / 2, crop, crop);
        downsample_with(crop, side, |y, x| {
            image.pixels[(origin + y as isize * dy + x as isize * dx) as usize]
        })
    }
}

pub fn random_orientation<R: RngCore + ?Sized>(image: &GrayImage, rng: &mut R) -> GrayImage {
    Orientation::sample(rng).apply(image)
}

/// Top-left offset `(row, col)` of a centered `side` window.
pub fn crop_offsets(width: usize, height: usize, side: usize) -> Result<(usize, usize)> {
    if width < side || height < side {
        return Err(Error::ImageTooSmall {
            width,
            height,
            side,
        });
    }
    Ok(((height - side) / 2, (width - side) / 2))
}

pub fn center_crop(image: &GrayImage, side: usize) -> Result<GrayImage> {
    let (top, left) = crop_offsets(image.width, image.height, side)?;
    let mut pixels = Vec::with_capacity(side * side);
    for y in top..top + side {
        let row = y * image.width;
        pixels.extend_from_slice(&image.pixels[row + left..row + left + side]);
    }
    Ok(GrayImage {
        width: side,
        height: side,
        pixels,
    })
}

/// Source taps `(index, weight)` for each output cell of a 1-D box filter
/// shrinking `from` samples to `to`. Weights in each cell sum to one.
fn box_taps(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(from);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging (box filter) downsample of a square image to `side x side`.
pub fn downsample(image: &GrayImage, side: usize) -> Result<GrayImage> {
    if image.width != image.height {
        return Err(Error::ShapeMismatch {
            expected: "square image".into(),
            got: format!("{}x{}", image.width, image.height),
        });
    }
    let n = image.width;
    check_downsample(n, side)?;
    downsample_with(n, side, |y, x| image.pixels[y * n + x])
}

fn check_downsample(n: usize, side: usize) -> Result<()> {
    if side > n {
        return Err(Error::Upsample { from: n, to: side });
    }
    if side == 0 {
        return Err(Error::InvalidArgument("downsample side must be positive".into()));
    }
    Ok(())
}

/// Box-filter downsample of the `n x n` image whose pixel (y, x) is `at(y, x)`.
fn downsample_with(n: usize, side: usize, at: impl Fn(usize, usize) -> f32) -> Result<GrayImage> {
    let taps = box_taps(n, side);

    // Horizontal pass: n rows x side columns.
    let mut rows = vec![0f64; n * side];
    for y in 0..n {
        let dst = &mut rows[y * side..(y + 1) * side];
        for (j, cell) in taps.iter().enumerate() {
            dst[j] = cell.iter().map(|&(s, w)| at(y, s) as f64 * w).sum();
        }
    }
    // Vertical pass.
    let mut pixels = vec![0f32; side * side];
    let mut acc = vec![0f64; side];
    for (i, cell) in taps.iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(s, w) in cell {
            let row = &rows[s * side..(s + 1) * side];
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += r * w;
            }
        }
        for (p, &a) in pixels[i * side..(i + 1) * side].iter_mut().zip(&acc) {
            *p = (a as f32).clamp(0.0, 1.0);
        }
    }
    Ok(GrayImage {
        width: side,
        height: side,
        pixels,
    })
}

/// The deterministic inference path: grayscale, center crop, downsample.
pub fn prepare_for_inference(image: &RawImage) -> Result<GrayImage> {
    let gray = to_grayscale(image);
    downsample(&center_crop(&gray, CROP_SIDE)?, INPUT_SIDE)
}

/// Model input for an image that is either already at input resolution or
/// a raw capture needing the inference path.
pub fn model_input(image: &RawImage) -> Result<GrayImage> {
    if image.width == INPUT_SIDE && image.height == INPUT_SIDE {
        Ok(to_grayscale(image))
    } else {
        prepare_for_inference(image)
    }
}

pub fn read_rgb(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(w as usize, h as usize, rgb.into_raw())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RawImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(w as usize, h as usize, rgb.into_raw())
}

/// PNG with fast deflate and the Sub filter: lossless like any PNG, several
/// times quicker to encode than the adaptive default.
fn encode_png(pixels: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    if pixels.len() as u64 != color.bits_per_pixel() as u64 / 8 * (width * height) as u64 {
        return Err(Error::InvalidArgument("buffer size mismatch".into()));
    }
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Sub)
        .write_image(pixels, width as u32, height as u32, color)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(out)
}

fn write_file(bytes: &[u8], path: &Path) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_rgb_png(image: &RawImage) -> Result<Vec<u8>> {
    encode_png(&image.pixels, image.width, image.height, ExtendedColorType::Rgb8)
}

pub fn write_rgb_png(image: &RawImage, path: &Path) -> Result<()> {
    write_file(&encode_rgb_png(image)?, path)
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray_png(image: &GrayImage, path: &Path) -> Result<()> {
    let bytes = encode_png(&image.to_u8(), image.width, image.height, ExtendedColorType::L8)?;
    write_file(&bytes, path)
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let pixels = luma.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    GrayImage::new(w as usize, h as usize, pixels)
}
