//! Corpus manifests: ingestion, validation, class statistics and the
//! stratified train/validation/test split.
//!
//! A manifest is newline-delimited JSON, one [`ImageRecord`] per line.
//! Manifest-level metadata (image size, creation time, seed, parent manifest)
//! lives in an optional sidecar `<manifest>.meta.json`. Pixels are never
//! stored in the manifest, only referenced by `source_path`, which is resolved
//! relative to the manifest's directory when not absolute.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{ClassLabel, NUM_CLASSES};
use crate::seed::SeedBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub record_id: String,
    pub source_path: PathBuf,
    pub label: ClassLabel,
    pub split: Split,
    pub origin: Origin,
    #[serde(default)]
    pub parent_id: Option<String>,
    #[serde(default)]
    pub augmentation_seed: Option<u64>,
}

impl ImageRecord {
    pub fn original(id: impl Into<String>, path: impl Into<PathBuf>, label: ClassLabel) -> Self {
        Self {
            record_id: id.into(),
            source_path: path.into(),
            label,
            split: Split::Unassigned,
            origin: Origin::Original,
            parent_id: None,
            augmentation_seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ManifestMeta {
    #[serde(default)]
    image_width: Option<u32>,
    #[serde(default)]
    image_height: Option<u32>,
    #[serde(default)]
    created_at: Option<DateTime<Utc>>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    parent_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    pub image_width: Option<u32>,
    pub image_height: Option<u32>,
    pub created_at: DateTime<Utc>,
    pub seed: Option<u64>,
    /// Manifest holding the originals that augmented records point at, when
    /// they are not part of this manifest.
    pub parent_manifest: Option<PathBuf>,
    /// Directory relative source paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        Self {
            records,
            image_width: None,
            image_height: None,
            created_at: Utc::now(),
            seed: None,
            parent_manifest: None,
            base_dir: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve_path(&self, record: &ImageRecord) -> PathBuf {
        match &self.base_dir {
            Some(dir) if record.source_path.is_relative() => dir.join(&record.source_path),
            _ => record.source_path.clone(),
        }
    }

    /// Records of one split, preserving order and metadata.
    pub fn filter_split(&self, split: Split) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Checks every manifest invariant. Parents of augmented records are
    /// looked up in this manifest first and then in `parents`.
    pub fn validate(&self, parents: Option<&Manifest>) -> Result<()> {
        let mut by_id: HashMap<&str, &ImageRecord> = HashMap::with_capacity(self.records.len());
        for r in &self.records {
            if by_id.insert(r.record_id.as_str(), r).is_some() {
                return Err(Error::DuplicateId(r.record_id.clone()));
            }
        }
        let external: HashMap<&str, &ImageRecord> = parents
            .map(|p| p.records.iter().map(|r| (r.record_id.as_str(), r)).collect())
            .unwrap_or_default();

        for r in &self.records {
            match (r.origin, &r.parent_id) {
                (Origin::Original, None) => {}
                (Origin::Original, Some(_)) => {
                    return Err(Error::ManifestParse {
                        line: 0,
                        message: format!("original record {} has a parent_id", r.record_id),
                    })
                }
                (Origin::Augmented, None) => {
                    return Err(Error::MissingParent {
                        record: r.record_id.clone(),
                        parent: "<none>".into(),
                    })
                }
                (Origin::Augmented, Some(pid)) => {
                    let parent = by_id
                        .get(pid.as_str())
                        .or_else(|| external.get(pid.as_str()))
                        .filter(|p| p.origin == Origin::Original)
                        .ok_or_else(|| Error::MissingParent {
                            record: r.record_id.clone(),
                            parent: pid.clone(),
                        })?;
                    if parent.label != r.label {
                        return Err(Error::ParentLabelMismatch {
                            record: r.record_id.clone(),
                        });
                    }
                    if parent.split != r.split {
                        return Err(Error::SplitLeakage {
                            record: r.record_id.clone(),
                            parent: pid.clone(),
                            child: r.split.to_string(),
                            parent_split: parent.split.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Deserialize)]
struct RawRecord {
    record_id: String,
    source_path: PathBuf,
    label: String,
    split: Split,
    origin: Origin,
    #[serde(default)]
    parent_id: Option<String>,
    #[serde(default)]
    augmentation_seed: Option<u64>,
}

fn parse_records(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let record = ImageRecord {
            label: raw.label.parse()?,
            record_id: raw.record_id,
            source_path: raw.source_path,
            split: raw.split,
            origin: raw.origin,
            parent_id: raw.parent_id,
            augmentation_seed: raw.augmentation_seed,
        };
        records.push(record);
    }
    Ok(records)
}

/// Loads and validates a manifest. Malformed manifests are rejected, never repaired.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let records = parse_records(path)?;
    let meta_file = meta_path(path);
    let meta: ManifestMeta = if meta_file.exists() {
        let text = std::fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
        serde_json::from_str(&text)?
    } else {
        ManifestMeta::default()
    };
    let base_dir = path.parent().map(Path::to_path_buf);
    let parent_manifest = meta.parent_manifest.map(|p| match &base_dir {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    });
    let manifest = Manifest {
        records,
        image_width: meta.image_width,
        image_height: meta.image_height,
        created_at: meta.created_at.unwrap_or_else(Utc::now),
        seed: meta.seed,
        parent_manifest,
        base_dir,
    };
    let parents = match &manifest.parent_manifest {
        Some(p) => Some(load_manifest(p)?),
        None => None,
    };
    manifest.validate(parents.as_ref())?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &manifest.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;

    let meta = ManifestMeta {
        image_width: manifest.image_width,
        image_height: manifest.image_height,
        created_at: Some(manifest.created_at),
        seed: manifest.seed,
        parent_manifest: manifest.parent_manifest.clone(),
    };
    let meta_file = meta_path(path);
    std::fs::write(&meta_file, serde_json::to_vec_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_file, e))?;
    Ok(())
}

pub type Histogram = [usize; NUM_CLASSES];

pub fn class_histogram(manifest: &Manifest, split: Option<Split>) -> Histogram {
    let mut counts = [0usize; NUM_CLASSES];
    for r in manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
    {
        counts[r.label.id()] += 1;
    }
    counts
}

pub fn crystal_fraction(manifest: &Manifest) -> Result<f64> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    let hist = class_histogram(manifest, None);
    let crystals: usize = ClassLabel::crystal_labels().map(|l| hist[l.id()]).sum();
    Ok(crystals as f64 / manifest.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const STANDARD: SplitRatios = SplitRatios {
        train: 0.80,
        validation: 0.05,
        test: 0.15,
    };

    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.check()?;
        Ok(r)
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    fn check(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidRatios(format!("{a:?} has a negative or non-finite entry")));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRatios(format!("{a:?} sums to {sum}, not 1")));
        }
        Ok(())
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::InvalidRatios(format!("{s}: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(Error::InvalidRatios(format!("{s}: expected three fractions"))),
        }
    }
}

/// Integer counts for `n` items under `ratios` using largest-remainder
/// rounding. Remainder ties go to the earlier split.
pub fn largest_remainder_counts(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = ratios.as_array().map(|r| r * n as f64);
    // The epsilon keeps exact products such as 0.15 * 1000 from flooring to 149.
    let mut counts = quotas.map(|q| (q + 1e-9).floor().max(0.0) as usize);
    let frac = quotas.map(|q| q - (q + 1e-9).floor());
    while counts.iter().sum::<usize>() > n {
        let i = (0..3)
            .filter(|&i| counts[i] > 0)
            .min_by(|&a, &b| frac[a].total_cmp(&frac[b]))
            .expect("some count is positive");
        counts[i] -= 1;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
    let mut k = 0;
    while counts.iter().sum::<usize>() < n {
        counts[order[k % 3]] += 1;
        k += 1;
    }
    counts
}

/// Per-class deterministic split. Within each class, records are shuffled
/// by a stream keyed on `(seed, class id)` and cut into train, validation
/// and test blocks of largest-remainder sizes.
pub fn stratified_split(manifest: &Manifest, ratios: SplitRatios, seed: u64) -> Result<Manifest> {
    ratios.check()?;
    if let Some(r) = manifest
        .records
        .iter()
        .find(|r| r.origin != Origin::Original || r.split != Split::Unassigned)
    {
        return Err(Error::NotSplittable(format!(
            "record {} is {:?}/{}",
            r.record_id, r.origin, r.split
        )));
    }

    let mut out = manifest.clone();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, r) in manifest.records.iter().enumerate() {
        by_class[r.label.id()].push(i);
    }
    for (class, mut idx) in by_class.into_iter().enumerate() {
        let mut rng = SeedBuilder::new("stratified_split")
            .u64(seed)
            .u64(class as u64)
            .rng();
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = largest_remainder_counts(idx.len(), &ratios);
        for (k, &i) in idx.iter().enumerate() {
            out.records[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }
    out.seed = Some(seed);
    Ok(out)
}

pub fn split_counts(manifest: &Manifest) -> HashMap<Split, usize> {
    let mut m = HashMap::new();
    for r in &manifest.records {
        *m.entry(r.split).or_insert(0) += 1;
    }
    m
}
