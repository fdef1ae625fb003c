//! Place records, manifests, record storage and the query/database organisation
//! used for retrieval training.
//!
//! # Manifest schema
//!
//! ```json
//! {
//!   "scene_id": "room",
//!   "records": [{
//!     "id": "room/000",
//!     "image_path": "images/000.png",
//!     "pose": [16 numbers, row-major 4x4 world-from-camera],
//!     "intrinsics": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..},
//!     "is_synthetic": false,
//!     "split": "train" | "val" | "test",
//!     "role": "database" | "query",      // optional, defaults to "database"
//!     "epoch_added": 0
//!   }]
//! }
//! ```
//!
//! Relative image paths resolve against the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::raster::Image;
use crate::renderer::RenderResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Side of the retrieval protocol a real record belongs to under the
/// conventional organisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Database,
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub is_synthetic: bool,
    pub scene_id: String,
    pub split: Split,
    pub role: Role,
    pub epoch_added: u32,
}

impl PlaceRecord {
    pub fn distance_to(&self, other: &PlaceRecord) -> f64 {
        self.pose.translation_distance(&other.pose)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordEntry {
    id: String,
    image_path: PathBuf,
    pose: Vec<f64>,
    intrinsics: Intrinsics,
    is_synthetic: bool,
    split: Split,
    #[serde(default)]
    role: Role,
    epoch_added: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    scene_id: String,
    records: Vec<serde_json::Value>,
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads and validates a manifest.
///
/// Rejects duplicate ids, malformed or non-orthonormal poses, invalid
/// intrinsics and real records whose image file is missing. Errors name the
/// offending entry.
pub fn load_manifest(path: &Path) -> Result<Vec<PlaceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| load_error(path, e.to_string()))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| load_error(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(file.records.len());
    for (i, raw) in file.records.into_iter().enumerate() {
        let label = raw
            .get("id")
            .and_then(|v| v.as_str())
            .map(|s| format!("record #{i} (id {s:?})"))
            .unwrap_or_else(|| format!("record #{i}"));
        let entry: RecordEntry =
            serde_json::from_value(raw).map_err(|e| load_error(path, format!("{label}: {e}")))?;
        if !seen.insert(entry.id.clone()) {
            return Err(load_error(
                path,
                format!("{label}: duplicate id {:?}", entry.id),
            ));
        }
        let pose = Pose::from_row_major(&entry.pose)
            .map_err(|e| load_error(path, format!("{label}: invalid pose: {e}")))?;
        entry
            .intrinsics
            .validate()
            .map_err(|e| load_error(path, format!("{label}: {e}")))?;
        let image_path = if entry.image_path.is_absolute() {
            entry.image_path.clone()
        } else {
            base.join(&entry.image_path)
        };
        if !entry.is_synthetic && !image_path.exists() {
            return Err(load_error(
                path,
                format!("{label}: image {} does not exist", image_path.display()),
            ));
        }
        records.push(PlaceRecord {
            id: entry.id,
            image_path,
            pose,
            intrinsics: entry.intrinsics,
            is_synthetic: entry.is_synthetic,
            scene_id: file.scene_id.clone(),
            split: entry.split,
            role: entry.role,
            epoch_added: entry.epoch_added,
        });
    }
    Ok(records)
}

/// Writes records as a manifest; image paths are stored relative to the
/// manifest directory when possible.
pub fn save_manifest(path: &Path, scene_id: &str, records: &[PlaceRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            let image_path = r
                .image_path
                .strip_prefix(base)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| r.image_path.clone());
            serde_json::to_value(RecordEntry {
                id: r.id.clone(),
                image_path,
                pose: r.pose.to_row_major().to_vec(),
                intrinsics: r.intrinsics,
                is_synthetic: r.is_synthetic,
                split: r.split,
                role: r.role,
                epoch_added: r.epoch_added,
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    let file = ManifestFile {
        scene_id: scene_id.to_string(),
        records: entries,
    };
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct TransformsFile {
    fl_x: Option<f64>,
    fl_y: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    w: Option<u32>,
    h: Option<u32>,
    frames: Vec<TransformsFrame>,
}

#[derive(Debug, Deserialize)]
struct TransformsFrame {
    file_path: PathBuf,
    transform_matrix: Vec<Vec<f64>>,
    fl_x: Option<f64>,
    fl_y: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    w: Option<u32>,
    h: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct ImportOptions {
    pub scene_id: String,
    pub split: Split,
    /// Tag every k-th frame as a query; `None` keeps every frame in the database.
    pub query_every: Option<usize>,
}

/// Converts a nerfstudio-style `transforms.json` into place records.
///
/// nerfstudio stores OpenGL camera axes (`+y` up, `+z` backwards); they are
/// flipped to the `+y` down, `+z` forward convention used here.
pub fn import_transforms(path: &Path, options: &ImportOptions) -> Result<Vec<PlaceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| load_error(path, e.to_string()))?;
    let file: TransformsFile =
        serde_json::from_str(&text).map_err(|e| load_error(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let mut records = Vec::with_capacity(file.frames.len());
    for (i, frame) in file.frames.iter().enumerate() {
        let label = format!("frame #{i} ({})", frame.file_path.display());
        let rows = &frame.transform_matrix;
        ensure_load(
            path,
            rows.len() >= 3 && rows.iter().take(4).all(|r| r.len() == 4),
            || format!("{label}: transform_matrix must be 4x4"),
        )?;
        let mut flat: Vec<f64> = rows.iter().take(4).flatten().copied().collect();
        if flat.len() == 12 {
            flat.extend([0.0, 0.0, 0.0, 1.0]);
        }
        let gl = Pose::from_row_major(&flat)
            .map_err(|e| load_error(path, format!("{label}: invalid pose: {e}")))?;
        let pose = Pose::new(gl.rotation() * flip, *gl.translation())
            .map_err(|e| load_error(path, format!("{label}: {e}")))?;
        let pick = |a: Option<f64>, b: Option<f64>, name: &str| {
            a.or(b)
                .ok_or_else(|| load_error(path, format!("{label}: missing {name}")))
        };
        let width = frame
            .w
            .or(file.w)
            .ok_or_else(|| load_error(path, format!("{label}: missing w")))?;
        let height = frame
            .h
            .or(file.h)
            .ok_or_else(|| load_error(path, format!("{label}: missing h")))?;
        let intrinsics = Intrinsics::new(
            pick(frame.fl_x, file.fl_x, "fl_x")?,
            pick(frame.fl_y, file.fl_y, "fl_y")?,
            pick(frame.cx, file.cx, "cx")?,
            pick(frame.cy, file.cy, "cy")?,
            width,
            height,
        )
        .map_err(|e| load_error(path, format!("{label}: {e}")))?;
        let stem = frame
            .file_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i:05}"));
        let role = match options.query_every {
            Some(k) if k > 0 && i % k == k - 1 => Role::Query,
            _ => Role::Database,
        };
        records.push(PlaceRecord {
            id: format!("{}/{}", options.scene_id, stem),
            image_path: base.join(&frame.file_path),
            pose,
            intrinsics,
            is_synthetic: false,
            scene_id: options.scene_id.clone(),
            split: options.split,
            role,
            epoch_added: 0,
        });
    }
    let mut seen = HashSet::new();
    for r in &records {
        ensure_load(path, seen.insert(r.id.clone()), || {
            format!("duplicate id {:?} after import", r.id)
        })?;
    }
    Ok(records)
}

fn ensure_load(path: &Path, cond: bool, reason: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(load_error(path, reason()))
    }
}

/// Database ids within `threshold` (translation distance) of `query`, nearest
/// first; ties broken by id.
pub fn positives_for(query: &PlaceRecord, database: &[PlaceRecord], threshold: f64) -> Vec<String> {
    let mut hits: Vec<(f64, &str)> = database
        .iter()
        .map(|d| (query.distance_to(d), d.id.as_str()))
        .filter(|(dist, _)| *dist <= threshold)
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    hits.into_iter().map(|(_, id)| id.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Organization {
    /// Real records split into database/query by role; synthetic appended to the database.
    #[default]
    Regular,
    /// Every real record is a query; the database holds only synthetic records.
    RealQuerySynthDb,
}

/// Query/database partition handed to mining, failure detection and evaluation.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub queries: Vec<PlaceRecord>,
    pub database: Vec<PlaceRecord>,
    pub positive_threshold: f64,
}

impl DatasetView {
    pub fn new(
        queries: Vec<PlaceRecord>,
        database: Vec<PlaceRecord>,
        positive_threshold: f64,
    ) -> Result<Self> {
        ensure!(
            positive_threshold > 0.0,
            Validation,
            "positive threshold must be positive, got {positive_threshold}"
        );
        let db_ids: HashSet<&str> = database.iter().map(|r| r.id.as_str()).collect();
        if let Some(q) = queries.iter().find(|q| db_ids.contains(q.id.as_str())) {
            return Err(Error::Validation(format!(
                "record {:?} appears as both query and database entry",
                q.id
            )));
        }
        Ok(Self {
            queries,
            database,
            positive_threshold,
        })
    }

    pub fn positives(&self, query: &PlaceRecord) -> Vec<String> {
        positives_for(query, &self.database, self.positive_threshold)
    }
}

pub fn organize(
    real: &[PlaceRecord],
    synthetic: &[PlaceRecord],
    mode: Organization,
    positive_threshold: f64,
) -> Result<DatasetView> {
    match mode {
        Organization::Regular => {
            let queries = real
                .iter()
                .filter(|r| r.role == Role::Query)
                .cloned()
                .collect();
            let database = real
                .iter()
                .filter(|r| r.role == Role::Database)
                .chain(synthetic)
                .cloned()
                .collect();
            DatasetView::new(queries, database, positive_threshold)
        }
        Organization::RealQuerySynthDb => {
            if synthetic.is_empty() {
                return Err(Error::Config(
                    "real-query/synthetic-database organisation needs synthetic records; \
                     run an augmentation epoch first"
                        .into(),
                ));
            }
            DatasetView::new(real.to_vec(), synthetic.to_vec(), positive_threshold)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    #[default]
    KeepAll,
    CurrentEpochOnly,
}

/// Records plus their in-memory images, with per-split image-read accounting.
#[derive(Debug, Default)]
pub struct RecordStore {
    records: Vec<PlaceRecord>,
    images: HashMap<String, Arc<Image>>,
    image_dir: Option<PathBuf>,
    reads: [AtomicUsize; 3],
}

impl RecordStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Synthetic images are written below `dir` as PNG files when set.
    pub fn with_image_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.image_dir = Some(dir.into());
        self
    }

    pub fn from_records(records: Vec<PlaceRecord>) -> Result<Self> {
        let mut store = Self::new();
        for r in records {
            store.push(r, None)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, record: PlaceRecord, image: Option<Image>) -> Result<()> {
        ensure!(
            self.get(&record.id).is_none(),
            Validation,
            "duplicate record id {:?}",
            record.id
        );
        if let Some(img) = image {
            self.images.insert(record.id.clone(), Arc::new(img));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[PlaceRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&PlaceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn real(&self, split: Split) -> Vec<PlaceRecord> {
        self.records
            .iter()
            .filter(|r| !r.is_synthetic && r.split == split)
            .cloned()
            .collect()
    }

    pub fn synthetic(&self) -> Vec<PlaceRecord> {
        self.records
            .iter()
            .filter(|r| r.is_synthetic)
            .cloned()
            .collect()
    }

    pub fn synthetic_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_synthetic).count()
    }

    /// Loads every record image from disk into memory.
    pub fn load_images(&mut self) -> Result<()> {
        for r in &self.records {
            if !self.images.contains_key(&r.id) {
                let img = Image::load(&r.image_path)?;
                self.images.insert(r.id.clone(), Arc::new(img));
            }
        }
        Ok(())
    }

    /// Fetches an image, counting the read against the record's split.
    pub fn image(&self, id: &str) -> Result<Arc<Image>> {
        let record = self
            .get(id)
            .ok_or_else(|| Error::Validation(format!("unknown record id {id:?}")))?;
        self.reads[record.split.index()].fetch_add(1, Ordering::Relaxed);
        match self.images.get(id) {
            Some(img) => Ok(Arc::clone(img)),
            None => Ok(Arc::new(Image::load(&record.image_path)?)),
        }
    }

    pub fn reads(&self, split: Split) -> usize {
        self.reads[split.index()].load(Ordering::Relaxed)
    }

    pub fn reset_reads(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    /// Adds rendered views as synthetic training records.
    ///
    /// With [`Retention::CurrentEpochOnly`] older synthetic records are dropped
    /// first, including when `results` is empty. Ids follow `scene_id/synth/{epoch}/{index}`. When an image
    /// directory is configured every PNG is written before the store is
    /// touched; a write failure removes the files already written and leaves
    /// the store unchanged.
    pub fn insert_synthetic(
        &mut self,
        results: &[RenderResult],
        scene_id: &str,
        intrinsics: &Intrinsics,
        epoch: u32,
        retention: Retention,
    ) -> Result<usize> {
        if results.is_empty() {
            if retention == Retention::CurrentEpochOnly {
                self.drop_synthetic_before(epoch);
            }
            return Ok(0);
        }
        let first_index = self
            .records
            .iter()
            .filter(|r| r.is_synthetic && r.epoch_added == epoch && r.scene_id == scene_id)
            .count();
        let mut staged = Vec::with_capacity(results.len());
        let mut written: Vec<PathBuf> = Vec::new();
        for (k, result) in results.iter().enumerate() {
            let index = first_index + k;
            let id = format!("{scene_id}/synth/{epoch}/{index}");
            let image_path = match &self.image_dir {
                Some(dir) => {
                    let path = dir.join(format!("synth-{epoch}-{index}.png"));
                    let outcome = fs::create_dir_all(dir)
                        .map_err(|e| Error::io(dir, e))
                        .and_then(|_| result.image.save_png(&path));
                    if let Err(e) = outcome {
                        for p in &written {
                            let _ = fs::remove_file(p);
                        }
                        return Err(e);
                    }
                    written.push(path.clone());
                    path
                }
                None => PathBuf::from(format!("memory://{id}")),
            };
            staged.push(PlaceRecord {
                id,
                image_path,
                pose: result.pose,
                intrinsics: *intrinsics,
                is_synthetic: true,
                scene_id: scene_id.to_string(),
                split: Split::Train,
                role: Role::Database,
                epoch_added: epoch,
            });
        }
        if retention == Retention::CurrentEpochOnly {
            self.drop_synthetic_before(epoch);
        }
        let inserted = staged.len();
        for (record, result) in staged.into_iter().zip(results) {
            self.images
                .insert(record.id.clone(), Arc::new(result.image.clone()));
            self.records.push(record);
        }
        Ok(inserted)
    }

    fn drop_synthetic_before(&mut self, epoch: u32) {
        let images = &mut self.images;
        self.records.retain(|r| {
            let stale = r.is_synthetic && r.epoch_added < epoch;
            if stale {
                images.remove(&r.id);
            }
            !stale
        });
    }
}

/// Anchor query, nearest positive and sampled hard-zone negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    /// Queries without any database record within the positive threshold.
    pub skipped_queries: usize,
    /// Total negatives requested but unavailable beyond the negative threshold.
    pub missing_negatives: usize,
}

/// One triplet per query with at least one positive; negatives are drawn
/// uniformly without replacement from database records farther than
/// `negative_threshold`.
pub fn mine_triplets(
    view: &DatasetView,
    negatives_per_anchor: usize,
    negative_threshold: f64,
    seed: u64,
) -> Result<TripletSet> {
    ensure!(
        negative_threshold > view.positive_threshold,
        Validation,
        "negative threshold {negative_threshold} must exceed positive threshold {}",
        view.positive_threshold
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TripletSet::default();
    for q in &view.queries {
        let positives = view.positives(q);
        let Some(positive) = positives.into_iter().next() else {
            out.skipped_queries += 1;
            continue;
        };
        let far: Vec<&PlaceRecord> = view
            .database
            .iter()
            .filter(|d| q.distance_to(d) > negative_threshold)
            .collect();
        let take = negatives_per_anchor.min(far.len());
        out.missing_negatives += negatives_per_anchor - take;
        let negatives = index::sample(&mut rng, far.len(), take)
            .into_iter()
            .map(|i| far[i].id.clone())
            .collect();
        out.triplets.push(Triplet {
            anchor: q.id.clone(),
            positive,
            negatives,
        });
    }
    Ok(out)
}
