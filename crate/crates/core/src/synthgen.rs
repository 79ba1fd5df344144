//! Label-conditioned synthetic trial images.
//!
//! Each class has a simple visual motif drawn over a noisy background so the
//! whole pipeline can be exercised without a real corpus. All motifs are
//! placed inside the central crop window so augmentation keeps them.
//! The micro crystal and phase separation motifs both consist of small round
//! features and form the hard pair of the set.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::ImageSource;
use crate::corpus::{save_manifest, ImageRecord, Manifest};
use crate::error::{Error, Result};
use crate::labels::{ClassLabel, NUM_CLASSES};
use crate::preprocess::{write_rgb_png, RawImage, CROP_SIDE};
use crate::seed::SeedBuilder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub counts: [usize; NUM_CLASSES],
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub noise_level: f32,
}

impl SynthSpec {
    pub fn new(counts: [usize; NUM_CLASSES], seed: u64) -> Self {
        Self {
            counts,
            width: 1280,
            height: 960,
            seed,
            noise_level: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < CROP_SIDE || self.height < CROP_SIDE {
            return Err(Error::InvalidArgument(format!(
                "synthetic images must be at least {CROP_SIDE} px on each side, got {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::InvalidArgument(format!(
                "noise level {} outside [0, 1]",
                self.noise_level
            )));
        }
        Ok(())
    }

    /// Parses `label=N,label=N` into per-class counts; unnamed classes get zero.
    pub fn parse_counts(s: &str) -> Result<[usize; NUM_CLASSES]> {
        let mut counts = [0; NUM_CLASSES];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, n) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected label=N, got {part}")))?;
            let label: ClassLabel = name.trim().parse()?;
            counts[label.id()] = n
                .trim()
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("{part}: {e}")))?;
        }
        Ok(counts)
    }
}

/// The manifest `generate` writes, without rendering anything.
pub fn synth_manifest(spec: &SynthSpec) -> Manifest {
    let mut records = Vec::with_capacity(spec.counts.iter().sum());
    for label in ClassLabel::ALL {
        for i in 0..spec.counts[label.id()] {
            let id = format!("{}-{i:05}", label.name());
            records.push(ImageRecord::original(
                id.clone(),
                format!("images/{id}.png"),
                label,
            ));
        }
    }
    let mut m = Manifest::new(records);
    m.image_width = Some(spec.width as u32);
    m.image_height = Some(spec.height as u32);
    m.seed = Some(spec.seed);
    m
}

/// Renders every image into `out_dir/images` and writes `out_dir/manifest.jsonl`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut manifest = synth_manifest(spec);
    let images = out_dir.join("images");
    if !manifest.is_empty() {
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    }
    manifest.records.par_iter().try_for_each(|r| {
        let img = render(spec, r.label, &r.record_id);
        write_rgb_png(&img, &out_dir.join(&r.source_path))
    })?;
    save_manifest(&manifest, out_dir.join("manifest.jsonl"))?;
    manifest.base_dir = Some(out_dir.to_path_buf());
    Ok(manifest)
}

/// Renders originals on demand instead of reading files.
pub struct SynthSource {
    pub spec: SynthSpec,
}

impl ImageSource for SynthSource {
    fn load(&self, _manifest: &Manifest, record: &ImageRecord) -> Result<RawImage> {
        Ok(render(&self.spec, record.label, &record.record_id))
    }
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn blend_disc(&mut self, cx: f32, cy: f32, r: f32, v: f32) {
        self.for_box(cx, cy, r, |dx, dy| {
            if dx * dx + dy * dy <= r * r {
                Some(v)
            } else {
                None
            }
        });
    }

    fn ring(&mut self, cx: f32, cy: f32, r: f32, edge: f32, inner: f32) {
        let r_in = (r - 1.5).max(0.5);
        self.for_box(cx, cy, r, |dx, dy| {
            let d2 = dx * dx + dy * dy;
            if d2 <= r_in * r_in {
                Some(inner)
            } else if d2 <= r * r {
                Some(edge)
            } else {
                None
            }
        });
    }

    /// Fills the convex polygon with vertices `pts` (ordered counter-clockwise).
    fn polygon(&mut self, pts: &[(f32, f32)], v: f32) {
        let (mut x0, mut x1, mut y0, mut y1) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let xs = (x0.floor().max(0.0) as usize)..=(x1.ceil().min(self.w as f32 - 1.0) as usize);
        let ys = (y0.floor().max(0.0) as usize)..=(y1.ceil().min(self.h as f32 - 1.0) as usize);
        for y in ys {
            for x in xs.clone() {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let inside = (0..pts.len()).all(|i| {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % pts.len()];
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
                });
                if inside {
                    self.px[y * self.w + x] = v;
                }
            }
        }
    }

    fn for_box(&mut self, cx: f32, cy: f32, r: f32, f: impl Fn(f32, f32) -> Option<f32>) {
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(self.w.saturating_sub(1));
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(self.h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if let Some(v) = f(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy) {
                    self.px[y * self.w + x] = v;
                }
            }
        }
    }
}

/// Uniform point inside the central crop window, `margin` px from its edges.
fn point_in_window(rng: &mut ChaCha8Rng, w: usize, h: usize, margin: f32) -> (f32, f32) {
    let left = ((w - CROP_SIDE) / 2) as f32 + margin;
    let top = ((h - CROP_SIDE) / 2) as f32 + margin;
    let span = CROP_SIDE as f32 - 2.0 * margin;
    (left + rng.random::<f32>() * span, top + rng.random::<f32>() * span)
}

fn convex_polygon(rng: &mut ChaCha8Rng, cx: f32, cy: f32, diameter: f32) -> Vec<(f32, f32)> {
    let sides = rng.random_range(4..=6);
    let phase = rng.random::<f32>() * 2.0 * PI;
    let r = diameter / 2.0;
    (0..sides)
        .map(|k| {
            let a = phase + k as f32 * 2.0 * PI / sides as f32;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn rectangle(cx: f32, cy: f32, len: f32, width: f32, angle: f32) -> Vec<(f32, f32)> {
    let (s, c) = angle.sin_cos();
    let (hl, hw) = (len / 2.0, width / 2.0);
    [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)]
        .iter()
        .map(|&(u, v)| (cx + u * c - v * s, cy + u * s + v * c))
        .collect()
}

/// Characteristic crystal diameter in px and number of crystals drawn.
fn crystal_habit(label: ClassLabel) -> Option<(f32, usize)> {
    match label {
        ClassLabel::MicroCrystals => Some((3.0, 220)),
        ClassLabel::SmallCrystals => Some((8.0, 70)),
        ClassLabel::MediumCrystals => Some((20.0, 16)),
        ClassLabel::LargeCrystals => Some((60.0, 4)),
        _ => None,
    }
}

/// `x.round() as u8` for `x` in [0, 255] without the libm call. `x - trunc(x)`
/// is exact, so ties and near-ties resolve exactly as `round` does.
#[inline]
fn round_to_u8(x: f32) -> u8 {
    let t = x as u8;
    t + (x - t as f32 >= 0.5) as u8
}

pub fn render(spec: &SynthSpec, label: ClassLabel, record_id: &str) -> RawImage {
    let mut rng = SeedBuilder::new("synth")
        .u64(spec.seed)
        .u64(label.id() as u64)
        .str(record_id)
        .rng();
    let (w, h) = (spec.width, spec.height);
    let base = 0.55 + 0.15 * rng.random::<f32>();
    let gx = (rng.random::<f32>() - 0.5) * 0.08 / w as f32;
    let gy = (rng.random::<f32>() - 0.5) * 0.08 / h as f32;
    let ramp_x: Vec<f32> = (0..w).map(|x| base + gx * (x as f32 - w as f32 / 2.0)).collect();
    let mut canvas = Canvas {
        w,
        h,
        px: Vec::with_capacity(w * h),
    };
    for y in 0..h {
        let ry = gy * (y as f32 - h as f32 / 2.0);
        canvas.px.extend(ramp_x.iter().map(|&v| v + ry));
    }

    let bright = (base + 0.3).min(1.0);
    let dark = base - 0.3;
    match label {
        ClassLabel::Clear => {}
        ClassLabel::BadDrop => {
            let (cx, cy) = point_in_window(&mut rng, w, h, 0.0);
            // pull toward a quadrant so the blob sits off center
            let (ox, oy) = (
                w as f32 / 2.0 + (cx - w as f32 / 2.0).signum() * 220.0,
                h as f32 / 2.0 + (cy - h as f32 / 2.0).signum() * 220.0,
            );
            for _ in 0..rng.random_range(5..=8) {
                let r = rng.random_range(50.0..120.0);
                let jx = rng.random_range(-80.0..80.0);
                let jy = rng.random_range(-80.0..80.0);
                canvas.blend_disc(ox + jx, oy + jy, r, base - 0.25);
            }
        }
        ClassLabel::HeavyPrecipitate | ClassLabel::LightPrecipitate => {
            let n = if label == ClassLabel::HeavyPrecipitate { 24_000 } else { 4_000 };
            for _ in 0..n {
                let (cx, cy) = point_in_window(&mut rng, w, h, 2.0);
                let r = rng.random_range(0.8..2.0);
                canvas.blend_disc(cx, cy, r, dark);
            }
        }
        ClassLabel::PhaseSeparation => {
            for _ in 0..90 {
                let (cx, cy) = point_in_window(&mut rng, w, h, 8.0);
                let r = rng.random_range(2.0..5.0);
                canvas.ring(cx, cy, r, dark, (base + 0.1).min(1.0));
            }
        }
        ClassLabel::NeedlesPlates => {
            for _ in 0..14 {
                let (cx, cy) = point_in_window(&mut rng, w, h, 80.0);
                let len = rng.random_range(50.0..150.0);
                let width = rng.random_range(3.0..6.0);
                let angle = rng.random::<f32>() * PI;
                canvas.polygon(&rectangle(cx, cy, len, width, angle), bright);
            }
        }
        crystal => {
            let (diameter, count) = crystal_habit(crystal).expect("remaining labels are crystals");
            for _ in 0..count {
                let (cx, cy) = point_in_window(&mut rng, w, h, diameter);
                let d = diameter * rng.random_range(0.8..1.2);
                canvas.polygon(&convex_polygon(&mut rng, cx, cy, d), bright);
            }
        }
    }

    let amp = spec.noise_level;
    let noise: Vec<f32> = (0..=u16::MAX).map(|b| amp * (b as f32 / 65535.0 - 0.5)).collect();
    let mut pixels = vec![0u8; w * h * 3];
    // One 64-bit draw supplies 16-bit noise for four pixels.
    for (px, out) in canvas.px.chunks(4).zip(pixels.chunks_mut(12)) {
        let bits = rng.next_u64();
        for (k, (&v, rgb)) in px.iter().zip(out.chunks_exact_mut(3)).enumerate() {
            let g = round_to_u8((v + noise[(bits >> (k * 16)) as u16 as usize]).clamp(0.0, 1.0) * 255.0);
            rgb[0] = g;
            rgb[1] = g;
            rgb[2] = g;
        }
    }
    RawImage {
        width: w,
        height: h,
        pixels,
    }
}
