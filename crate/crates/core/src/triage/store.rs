//! Triage items and the annotation log.
//!
//! The data directory holds two newline-delimited JSON logs, `items.ndjson`
//! and `events.ndjson`, plus the uploaded image bytes under `images/`. Both
//! logs are append-only; the in-memory index is rebuilt from them on open.
//! A line counts as written once it ends in a newline, so a torn final line
//! left by a crash is discarded on recovery.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ImageRecord, Manifest};
use crate::error::{Error, Result};
use crate::evaluator::{self, rank_labels, EvalReport, PredictionRecord};
use crate::labels::{is_crystal_id, ClassLabel, NUM_CLASSES};
use crate::nn::Tensor;
use crate::preprocess::{decode_rgb, prepare_for_inference, INPUT_SIDE};
use crate::zoo::Model;

pub const STRATEGIES: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    ConfirmedCrystal,
    ConfirmedNoncrystal,
    Relabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    ConfirmCrystal,
    ConfirmNoncrystal,
    Relabel { label: ClassLabel },
}

impl Action {
    /// Builds an action from its wire form: a name plus an optional label
    /// that only `relabel` takes.
    pub fn parse(name: &str, label: Option<&str>) -> Result<Self> {
        match (name, label) {
            ("confirm_crystal", None) => Ok(Action::ConfirmCrystal),
            ("confirm_noncrystal", None) => Ok(Action::ConfirmNoncrystal),
            ("relabel", Some(l)) => Ok(Action::Relabel { label: l.parse()? }),
            ("relabel", None) => Err(Error::InvalidArgument("relabel requires a label".into())),
            ("confirm_crystal" | "confirm_noncrystal", Some(_)) => {
                Err(Error::InvalidArgument(format!("{name} takes no label")))
            }
            _ => Err(Error::InvalidArgument(format!("unknown action {name:?}"))),
        }
    }

    pub fn status(self) -> Status {
        match self {
            Action::ConfirmCrystal => Status::ConfirmedCrystal,
            Action::ConfirmNoncrystal => Status::ConfirmedNoncrystal,
            Action::Relabel { .. } => Status::Relabeled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    /// Position in the total event order, starting at 1.
    pub seq: u64,
    pub record_id: String,
    #[serde(flatten)]
    pub action: Action,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLabel {
    pub label: ClassLabel,
    pub activation: f64,
}

/// Classification outcome of one ingested image. Immutable once logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedImage {
    pub record_id: String,
    pub image_digest: String,
    pub checkpoint_digest: String,
    pub file_name: Option<String>,
    pub width: usize,
    pub height: usize,
    pub activations: [f64; NUM_CLASSES],
    pub ingested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageItem {
    pub record_id: String,
    pub image_digest: String,
    pub checkpoint_digest: String,
    pub file_name: Option<String>,
    pub width: usize,
    pub height: usize,
    pub ingested_at: DateTime<Utc>,
    pub activations: [f64; NUM_CLASSES],
    pub ranked_labels: Vec<RankedLabel>,
    /// Whether a crystal label is among the top 1, 2 and 3 labels.
    pub crystal_flag_topn: [bool; 3],
    pub max_crystal_activation: f64,
    pub status: Status,
    pub human_label: Option<ClassLabel>,
    pub reviewer: Option<String>,
    pub reviewed_at: Option<DateTime<Utc>>,
    /// Number of annotation events applied to this item.
    pub version: u64,
}

impl TriageItem {
    fn new(img: IngestedImage) -> Self {
        let ranked = rank_labels(&img.activations);
        let crystal_flag_topn = STRATEGIES.map(|n| ranked[..n].iter().any(|&l| is_crystal_id(l)));
        let max_crystal_activation = (0..NUM_CLASSES)
            .filter(|&l| is_crystal_id(l))
            .map(|l| img.activations[l])
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            ranked_labels: ranked
                .iter()
                .map(|&l| RankedLabel {
                    label: ClassLabel::ALL[l],
                    activation: img.activations[l],
                })
                .collect(),
            crystal_flag_topn,
            max_crystal_activation,
            record_id: img.record_id,
            image_digest: img.image_digest,
            checkpoint_digest: img.checkpoint_digest,
            file_name: img.file_name,
            width: img.width,
            height: img.height,
            ingested_at: img.ingested_at,
            activations: img.activations,
            status: Status::Pending,
            human_label: None,
            reviewer: None,
            reviewed_at: None,
            version: 0,
        }
    }

    /// Latest event wins.
    pub fn apply(&mut self, ev: &AnnotationEvent) {
        self.status = ev.action.status();
        self.human_label = match ev.action {
            Action::Relabel { label } => Some(label),
            _ => None,
        };
        self.reviewer = Some(ev.reviewer.clone());
        self.reviewed_at = Some(ev.timestamp);
        self.version += 1;
    }

    /// The label treated as ground truth for live metrics. A relabel gives
    /// it directly; a confirmation picks the model's highest-ranked label on
    /// the confirmed side of the crystal/non-crystal divide.
    pub fn ground_truth(&self) -> Option<ClassLabel> {
        let best_where = |crystal: bool| {
            self.ranked_labels
                .iter()
                .find(|r| r.label.is_crystal() == crystal)
                .map(|r| r.label)
        };
        match self.status {
            Status::Pending => None,
            Status::Relabeled => self.human_label,
            Status::ConfirmedCrystal => best_where(true),
            Status::ConfirmedNoncrystal => best_where(false),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Item id for an image under a given model: stable across restarts and
/// re-uploads.
pub fn item_id(image_digest: &str, checkpoint_digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(image_digest.as_bytes());
    h.update(b":");
    h.update(checkpoint_digest.as_bytes());
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    #[default]
    Any,
    Pending,
    Reviewed,
}

impl StatusFilter {
    fn admits(self, s: Status) -> bool {
        match self {
            StatusFilter::Any => true,
            StatusFilter::Pending => s == Status::Pending,
            StatusFilter::Reviewed => s != Status::Pending,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePage {
    pub strategy: String,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<TriageItem>,
}

/// Outcome of an annotation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotated {
    pub event: AnnotationEvent,
    pub item: TriageItem,
    /// False when the idempotency key matched an earlier event.
    pub appended: bool,
}

#[derive(Debug, Clone)]
pub struct AnnotationRequest {
    pub record_id: String,
    pub action: Action,
    pub reviewer: String,
    pub idempotency_key: Option<String>,
    /// Rejects the request with a conflict unless the item is at this
    /// version.
    pub expected_version: Option<u64>,
}

#[derive(Default)]
struct Index {
    items: HashMap<String, TriageItem>,
    events: Vec<AnnotationEvent>,
    keys: HashMap<String, usize>,
}

impl Index {
    fn apply(&mut self, ev: AnnotationEvent) -> Result<()> {
        let item = self
            .items
            .get_mut(&ev.record_id)
            .ok_or_else(|| Error::NotFound(format!("event {} names unknown item {}", ev.seq, ev.record_id)))?;
        item.apply(&ev);
        if let Some(k) = &ev.idempotency_key {
            self.keys.insert(k.clone(), self.events.len());
        }
        self.events.push(ev);
        Ok(())
    }
}

/// Rejected by an optimistic-concurrency check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionConflict {
    pub expected: u64,
    pub actual: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("item is at version {}, request expected {}", .0.actual, .0.expected)]
    Conflict(VersionConflict),
    #[error(transparent)]
    Other(#[from] Error),
}

/// Append-only NDJSON file. `append` returns only after the line is
/// flushed and synced.
struct LogFile {
    path: PathBuf,
    file: File,
}

impl LogFile {
    fn open(path: PathBuf) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads complete lines, truncating a torn final line left by a crash.
fn recover_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        tracing::warn!(path = %path.display(), dropped = bytes.len() - complete, "discarding torn log tail");
        let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        f.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
        f.sync_all().map_err(|e| Error::io(path, e))?;
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(&bytes[..complete]).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

pub struct Store {
    dir: PathBuf,
    index: RwLock<Index>,
    items_log: Mutex<LogFile>,
    events_log: Mutex<LogFile>,
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(&dir, e))?;
        let items_path = dir.join("items.ndjson");
        let events_path = dir.join("events.ndjson");
        let mut index = Index::default();
        for img in recover_lines::<IngestedImage>(&items_path)? {
            index.items.insert(img.record_id.clone(), TriageItem::new(img));
        }
        for (i, ev) in recover_lines::<AnnotationEvent>(&events_path)?.into_iter().enumerate() {
            if ev.seq != i as u64 + 1 {
                return Err(Error::InvalidArgument(format!(
                    "event log out of order: line {} has seq {}",
                    i + 1,
                    ev.seq
                )));
            }
            index.apply(ev)?;
        }
        tracing::info!(items = index.items.len(), events = index.events.len(), "store recovered");
        Ok(Self {
            items_log: Mutex::new(LogFile::open(items_path)?),
            events_log: Mutex::new(LogFile::open(events_path)?),
            index: RwLock::new(index),
            dir,
        })
    }

    pub fn image_path(&self, digest: &str) -> PathBuf {
        self.dir.join("images").join(format!("{digest}.img"))
    }

    pub fn get(&self, record_id: &str) -> Option<TriageItem> {
        self.index.read().expect("index lock").items.get(record_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Logs a classified image unless an item with the same id exists.
    /// Returns the item and whether it was new.
    pub fn insert(&self, img: IngestedImage, bytes: &[u8]) -> Result<(TriageItem, bool)> {
        let mut log = self.items_log.lock().expect("items log lock");
        if let Some(existing) = self.get(&img.record_id) {
            return Ok((existing, false));
        }
        let path = self.image_path(&img.image_digest);
        if !path.exists() {
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, bytes)
                .and_then(|_| std::fs::rename(&tmp, &path))
                .map_err(|e| Error::io(&path, e))?;
        }
        log.append(&img)?;
        let item = TriageItem::new(img);
        self.index
            .write()
            .expect("index lock")
            .items
            .insert(item.record_id.clone(), item.clone());
        Ok((item, true))
    }

    /// Appends an annotation event; the event is durable before this
    /// returns. Writers serialize on the event log, which fixes the total
    /// order.
    pub fn annotate(&self, req: AnnotationRequest) -> Result<Annotated, AnnotateError> {
        let mut log = self.events_log.lock().expect("events log lock");
        let (seq, item) = {
            let index = self.index.read().expect("index lock");
            if let Some(k) = &req.idempotency_key {
                if let Some(&at) = index.keys.get(k) {
                    let event = index.events[at].clone();
                    if event.record_id != req.record_id || event.action != req.action {
                        return Err(Error::InvalidArgument(format!(
                            "idempotency key {k} was already used for a different annotation"
                        ))
                        .into());
                    }
                    let item = index.items[&event.record_id].clone();
                    return Ok(Annotated {
                        event,
                        item,
                        appended: false,
                    });
                }
            }
            let item = index
                .items
                .get(&req.record_id)
                .ok_or_else(|| Error::NotFound(format!("item {}", req.record_id)))?;
            if let Some(expected) = req.expected_version {
                if expected != item.version {
                    return Err(AnnotateError::Conflict(VersionConflict {
                        expected,
                        actual: item.version,
                    }));
                }
            }
            (index.events.len() as u64 + 1, item.clone())
        };
        if req.reviewer.trim().is_empty() {
            return Err(Error::InvalidArgument("reviewer must not be empty".into()).into());
        }
        let event = AnnotationEvent {
            seq,
            record_id: req.record_id,
            action: req.action,
            reviewer: req.reviewer,
            timestamp: Utc::now(),
            idempotency_key: req.idempotency_key,
        };
        log.append(&event)?;
        let mut index = self.index.write().expect("index lock");
        index.apply(event.clone())?;
        let item = index.items.get(&item.record_id).cloned().expect("item exists");
        Ok(Annotated {
            event,
            item,
            appended: true,
        })
    }

    pub fn events(&self) -> Vec<AnnotationEvent> {
        self.index.read().expect("index lock").events.clone()
    }

    pub fn items(&self) -> Vec<TriageItem> {
        let mut items: Vec<TriageItem> = self.index.read().expect("index lock").items.values().cloned().collect();
        items.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        items
    }

    /// Crystal-flagged items under the top-`n` strategy, by descending
    /// maximum crystal activation then record id.
    pub fn queue(&self, n: usize, filter: StatusFilter, offset: usize, limit: usize) -> Result<QueuePage> {
        if !STRATEGIES.contains(&n) {
            return Err(Error::InvalidArgument(format!("strategy must be top1, top2 or top3, got top{n}")));
        }
        let index = self.index.read().expect("index lock");
        let mut flagged: Vec<&TriageItem> = index
            .items
            .values()
            .filter(|i| i.crystal_flag_topn[n - 1] && filter.admits(i.status))
            .collect();
        flagged.sort_by(|a, b| {
            b.max_crystal_activation
                .total_cmp(&a.max_crystal_activation)
                .then_with(|| a.record_id.cmp(&b.record_id))
        });
        Ok(QueuePage {
            strategy: format!("top{n}"),
            total: flagged.len(),
            offset,
            limit,
            items: flagged.into_iter().skip(offset).take(limit).cloned().collect(),
        })
    }

    /// Annotated items as evaluator predictions, ground truth per
    /// [`TriageItem::ground_truth`], in record-id order.
    pub fn annotated_predictions(&self) -> Vec<PredictionRecord> {
        self.items()
            .into_iter()
            .filter_map(|i| {
                let truth = i.ground_truth()?;
                PredictionRecord::new(i.record_id, truth, i.activations).ok()
            })
            .collect()
    }

    pub fn metrics_report(&self) -> Result<EvalReport> {
        let preds = self.annotated_predictions();
        if preds.is_empty() {
            return Err(Error::Empty("annotated items"));
        }
        evaluator::report(&preds)
    }

    /// Annotated items as a corpus manifest for retraining.
    pub fn export_manifest(&self) -> Manifest {
        let records = self
            .items()
            .into_iter()
            .filter_map(|i| {
                let label = i.ground_truth()?;
                Some(ImageRecord::original(i.record_id.clone(), self.image_path(&i.image_digest), label))
            })
            .collect();
        Manifest::new(records)
    }
}

/// Classifies uploaded image bytes with the deterministic inference path.
pub fn classify(model: &Model, bytes: &[u8]) -> Result<(usize, usize, [f64; NUM_CLASSES])> {
    let raw = decode_rgb(bytes)?;
    let gray = prepare_for_inference(&raw)?;
    let x = Tensor::from_vec(&[1, 1, INPUT_SIDE, INPUT_SIDE], gray.pixels);
    let y = model.forward(&x)?;
    Ok((raw.width, raw.height, std::array::from_fn(|i| y.data[i] as f64)))
}

/// Deterministic serial replay of an event log over pending items; the
/// reference the live index must agree with.
pub fn replay_statuses(
    items: impl IntoIterator<Item = String>,
    events: &[AnnotationEvent],
) -> HashMap<String, (Status, Option<ClassLabel>)> {
    let mut out: HashMap<String, (Status, Option<ClassLabel>)> =
        items.into_iter().map(|id| (id, (Status::Pending, None))).collect();
    for ev in events {
        let label = match ev.action {
            Action::Relabel { label } => Some(label),
            _ => None,
        };
        out.insert(ev.record_id.clone(), (ev.action.status(), label));
    }
    out
}
