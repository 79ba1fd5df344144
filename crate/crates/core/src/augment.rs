//! Class rebalancing by augmentation.
//!
//! Each original record is expanded into a number of augmented replicas that
//! is inversely proportional to its class size. Every replica runs the
//! training pipeline: grayscale, random right-angle orientation, center
//! crop, area downsample; and is written as an 8-bit grayscale PNG.

use std::collections::hash_map::{Entry, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Histogram, ImageRecord, Manifest, Origin};
use crate::error::{Error, Result};
use crate::labels::{ClassLabel, NUM_CLASSES};
use crate::preprocess::{
    read_rgb, to_grayscale, write_gray_png, GrayImage, Orientation, RawImage, CROP_SIDE,
    INPUT_SIDE,
};
use crate::seed::SeedBuilder;

/// Replica counts per class. A class with `N_c` originals receives
/// `multiplicity[c]` replicas per original plus one more for `extra[c]` of
/// them, for `N_c * multiplicity[c] + extra[c] == target_count` records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub target_count: usize,
    pub multiplicity: [usize; NUM_CLASSES],
    pub extra: [usize; NUM_CLASSES],
}

impl BalancePlan {
    /// Every class gets `m` replicas per original.
    pub fn uniform(m: usize) -> Self {
        Self {
            target_count: 0,
            multiplicity: [m; NUM_CLASSES],
            extra: [0; NUM_CLASSES],
        }
    }

    pub fn predicted_counts(&self, histogram: &Histogram) -> Histogram {
        let mut out = [0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            out[c] = histogram[c] * self.multiplicity[c] + self.extra[c].min(histogram[c]);
        }
        out
    }
}

pub fn balance_plan(histogram: &Histogram) -> Result<BalancePlan> {
    if let Some(c) = histogram.iter().position(|&n| n == 0) {
        return Err(Error::ZeroCountClass(ClassLabel::ALL[c].name().into()));
    }
    let target = *histogram.iter().max().expect("ten classes");
    let mut multiplicity = [0; NUM_CLASSES];
    let mut extra = [0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        multiplicity[c] = (target / histogram[c]).max(1);
        extra[c] = target - histogram[c] * multiplicity[c];
    }
    Ok(BalancePlan {
        target_count: target,
        multiplicity,
        extra,
    })
}

/// Where original pixels come from.
pub trait ImageSource: Sync {
    fn load(&self, manifest: &Manifest, record: &ImageRecord) -> Result<RawImage>;
}

/// Reads image files referenced by the manifest.
pub struct FileSource;

impl ImageSource for FileSource {
    fn load(&self, manifest: &Manifest, record: &ImageRecord) -> Result<RawImage> {
        read_rgb(&manifest.resolve_path(record))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pipeline {
    pub crop_side: usize,
    pub output_side: usize,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self {
            crop_side: CROP_SIDE,
            output_side: INPUT_SIDE,
        }
    }
}

impl Pipeline {
    /// Orientation, crop and downsample of an already grayscale image.
    pub fn run(&self, gray: &GrayImage, orientation: Orientation) -> Result<GrayImage> {
        orientation.crop_and_downsample(gray, self.crop_side, self.output_side)
    }
}

pub fn replica_seed(seed: u64, record_id: &str, replica: usize) -> u64 {
    SeedBuilder::new("augment")
        .u64(seed)
        .str(record_id)
        .u64(replica as u64)
        .seed_u64()
}

fn file_stem(record_id: &str) -> String {
    record_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Number of replicas for every record, in manifest order.
fn replica_counts(manifest: &Manifest, plan: &BalancePlan, seed: u64) -> Result<Vec<usize>> {
    let mut counts = vec![0; manifest.len()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, r) in manifest.records.iter().enumerate() {
        let c = r.label.id();
        if plan.multiplicity[c] == 0 {
            return Err(Error::PlanMissingClass(r.label.name().into()));
        }
        counts[i] = plan.multiplicity[c];
        members[c].push(i);
    }
    for (c, mut idx) in members.into_iter().enumerate() {
        let extra = plan.extra[c].min(idx.len());
        if extra == 0 {
            continue;
        }
        let mut rng = SeedBuilder::new("augment_extra").u64(seed).u64(c as u64).rng();
        idx.shuffle(&mut rng);
        for &i in &idx[..extra] {
            counts[i] += 1;
        }
    }
    Ok(counts)
}

pub fn augment_dataset(
    manifest: &Manifest,
    plan: &BalancePlan,
    seed: u64,
    source: &dyn ImageSource,
    out_dir: &Path,
) -> Result<Manifest> {
    augment_dataset_with(manifest, plan, seed, source, out_dir, Pipeline::default())
}

/// Expands `manifest` according to `plan`. The output holds only augmented
/// records, ordered by parent then replica index regardless of how the work
/// was scheduled.
pub fn augment_dataset_with(
    manifest: &Manifest,
    plan: &BalancePlan,
    seed: u64,
    source: &dyn ImageSource,
    out_dir: &Path,
    pipeline: Pipeline,
) -> Result<Manifest> {
    if let Some(r) = manifest.records.iter().find(|r| r.origin != Origin::Original) {
        return Err(Error::InvalidArgument(format!(
            "record {} is already augmented",
            r.record_id
        )));
    }
    let counts = replica_counts(manifest, plan, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out_dir = out_dir.canonicalize().map_err(|e| Error::io(out_dir, e))?;

    let per_parent: Vec<Vec<ImageRecord>> = manifest
        .records
        .par_iter()
        .zip(counts.par_iter())
        .map(|(record, &n)| augment_record(manifest, record, n, seed, source, &out_dir, pipeline))
        .collect::<Result<_>>()?;

    let mut out = Manifest::new(per_parent.into_iter().flatten().collect());
    out.image_width = Some(pipeline.output_side as u32);
    out.image_height = Some(pipeline.output_side as u32);
    out.seed = Some(seed);
    out.created_at = manifest.created_at;
    Ok(out)
}

fn augment_record(
    manifest: &Manifest,
    record: &ImageRecord,
    replicas: usize,
    seed: u64,
    source: &dyn ImageSource,
    out_dir: &Path,
    pipeline: Pipeline,
) -> Result<Vec<ImageRecord>> {
    if replicas == 0 {
        return Ok(Vec::new());
    }
    let gray = to_grayscale(&source.load(manifest, record)?);
    let stem = file_stem(&record.record_id);
    // Heavily replicated originals draw the same orientation many times.
    let mut done: HashMap<Orientation, GrayImage> = HashMap::new();
    (0..replicas)
        .map(|k| {
            let s = replica_seed(seed, &record.record_id, k);
            let mut rng = SeedBuilder::new("orientation").u64(s).rng();
            let o = Orientation::sample(&mut rng);
            let out = match done.entry(o) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(e) => e.insert(pipeline.run(&gray, o)?),
            };
            let path: PathBuf = out_dir.join(format!("{stem}_a{k:03}.png"));
            write_gray_png(out, &path)?;
            Ok(ImageRecord {
                record_id: format!("{}_a{k:03}", record.record_id),
                source_path: path,
                label: record.label,
                split: record.split,
                origin: Origin::Augmented,
                parent_id: Some(record.record_id.clone()),
                augmentation_seed: Some(s),
            })
        })
        .collect()
}
