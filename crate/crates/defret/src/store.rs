//! On-disk shape store: normalized meshes plus both canonical point clouds,
//! with a JSON manifest binding ids, splits, seeds, and source hashes.
//!
//! Ingest is idempotent: a rerun over unchanged sources and an equal config
//! hash rewrites nothing.

use crate::geometry::io::{load_cloud_drpc, load_mesh, save_cloud_drpc, save_obj};
use crate::geometry::{
    eval_cloud_seed, train_cloud_seed, PointCloud, ShapeId, ShapeRecord, TriangleMesh,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("store at {0} has no manifest (store.json)")]
    NotAStore(String),
    #[error("every input failed to ingest")]
    NothingIngested,
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("cloud load failed: {0}")]
    Cloud(#[from] crate::geometry::io::CloudIoError),
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Dataset role of a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One line of the input dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub path: PathBuf,
    pub split: Split,
}

/// Reads a dataset manifest: a JSON array of `{id, path, split}`.
pub fn read_dataset_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, StoreError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| io_err(path.as_ref(), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredShape {
    pub id: u32,
    pub split: Split,
    pub mesh: PathBuf,
    pub cloud_train: PathBuf,
    pub cloud_eval: PathBuf,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub source_path: PathBuf,
    /// FNV-1a of the source file bytes, hex.
    pub source_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestFailure {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub root_seed: u64,
    pub config_hash: String,
    pub train_points: usize,
    pub eval_points: usize,
    pub shapes: Vec<StoredShape>,
    pub errors: Vec<IngestFailure>,
}

/// A shape store rooted at a directory containing `store.json`.
#[derive(Debug, Clone)]
pub struct Store {
    pub dir: PathBuf,
    pub manifest: StoreManifest,
}

#[derive(Debug)]
pub struct IngestReport {
    pub ingested: usize,
    pub skipped_up_to_date: usize,
    pub failures: Vec<IngestFailure>,
}

pub struct IngestOptions {
    pub root_seed: u64,
    pub train_points: usize,
    pub eval_points: usize,
    pub config_hash: String,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            root_seed: 0,
            train_points: crate::geometry::TRAIN_CLOUD_POINTS,
            eval_points: crate::geometry::EVAL_CLOUD_POINTS,
            config_hash: String::new(),
        }
    }
}

fn file_hash(path: &Path) -> Result<String, StoreError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(format!("{:016x}", crate::seed::fnv1a64(&bytes)))
}

/// Ingests every manifest entry into `dir`: normalize, sample both clouds,
/// persist. Entries whose source hash and config already match the existing
/// store are skipped untouched; per-file failures are recorded and the run
/// continues.
pub fn ingest(
    entries: &[ManifestEntry],
    dir: impl AsRef<Path>,
    opts: &IngestOptions,
) -> Result<(Store, IngestReport), StoreError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("meshes")).map_err(|e| io_err(dir, e))?;
    std::fs::create_dir_all(dir.join("clouds")).map_err(|e| io_err(dir, e))?;

    let existing: Option<StoreManifest> = std::fs::read_to_string(dir.join("store.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let reusable = existing
        .filter(|m| {
            m.config_hash == opts.config_hash
                && m.root_seed == opts.root_seed
                && m.train_points == opts.train_points
                && m.eval_points == opts.eval_points
        })
        .map(|m| {
            m.shapes
                .into_iter()
                .map(|s| (s.id, s))
                .collect::<std::collections::BTreeMap<_, _>>()
        })
        .unwrap_or_default();

    let mut shapes = Vec::new();
    let mut failures = Vec::new();
    let mut ingested = 0usize;
    let mut skipped = 0usize;

    for entry in entries {
        let hash = match file_hash(&entry.path) {
            Ok(h) => h,
            Err(e) => {
                failures.push(IngestFailure {
                    path: entry.path.clone(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Some(prev) = reusable.get(&entry.id) {
            if prev.source_hash == hash
                && prev.split == entry.split
                && dir.join(&prev.mesh).exists()
                && dir.join(&prev.cloud_train).exists()
                && dir.join(&prev.cloud_eval).exists()
            {
                shapes.push(prev.clone());
                skipped += 1;
                continue;
            }
        }
        match ingest_one(entry, dir, opts, &hash) {
            Ok(stored) => {
                shapes.push(stored);
                ingested += 1;
            }
            Err(e) => failures.push(IngestFailure {
                path: entry.path.clone(),
                message: e.to_string(),
            }),
        }
    }

    if shapes.is_empty() {
        return Err(StoreError::NothingIngested);
    }
    shapes.sort_by_key(|s| s.id);
    let manifest = StoreManifest {
        version: 1,
        root_seed: opts.root_seed,
        config_hash: opts.config_hash.clone(),
        train_points: opts.train_points,
        eval_points: opts.eval_points,
        shapes,
        errors: failures.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("store.json"), json).map_err(|e| io_err(dir, e))?;
    Ok((
        Store {
            dir: dir.to_path_buf(),
            manifest,
        },
        IngestReport {
            ingested,
            skipped_up_to_date: skipped,
            failures,
        },
    ))
}

fn ingest_one(
    entry: &ManifestEntry,
    dir: &Path,
    opts: &IngestOptions,
    hash: &str,
) -> Result<StoredShape, String> {
    let raw = load_mesh(&entry.path).map_err(|e| e.to_string())?;
    let id = ShapeId(entry.id);
    let record = ShapeRecord::build(id, &raw, opts.root_seed, opts.train_points, opts.eval_points)
        .map_err(|e| e.to_string())?;
    let mesh_rel = PathBuf::from(format!("meshes/{}.obj", entry.id));
    let train_rel = PathBuf::from(format!("clouds/{}.train.drpc", entry.id));
    let eval_rel = PathBuf::from(format!("clouds/{}.eval.drpc", entry.id));
    save_obj(&record.mesh, dir.join(&mesh_rel)).map_err(|e| e.to_string())?;
    save_cloud_drpc(&record.cloud_train, dir.join(&train_rel)).map_err(|e| e.to_string())?;
    save_cloud_drpc(record.cloud_eval.as_ref().unwrap(), dir.join(&eval_rel))
        .map_err(|e| e.to_string())?;
    Ok(StoredShape {
        id: entry.id,
        split: entry.split,
        mesh: mesh_rel,
        cloud_train: train_rel,
        cloud_eval: eval_rel,
        train_seed: train_cloud_seed(opts.root_seed, id),
        eval_seed: eval_cloud_seed(opts.root_seed, id),
        source_path: entry.path.clone(),
        source_hash: hash.to_string(),
    })
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("store.json");
        if !manifest_path.exists() {
            return Err(StoreError::NotAStore(dir.display().to_string()));
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: serde_json::from_str(&text)?,
        })
    }

    /// Loads every stored shape; clouds come from their `DRPC` files.
    pub fn load_shapes(&self) -> Result<Vec<(ShapeRecord, Split)>, StoreError> {
        let mut out = Vec::with_capacity(self.manifest.shapes.len());
        for s in &self.manifest.shapes {
            out.push((self.load_shape(s)?, s.split));
        }
        Ok(out)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ShapeRecord>, StoreError> {
        Ok(self
            .load_shapes()?
            .into_iter()
            .filter(|(_, s)| *s == split)
            .map(|(r, _)| r)
            .collect())
    }

    fn load_shape(&self, s: &StoredShape) -> Result<ShapeRecord, StoreError> {
        let mesh: TriangleMesh = load_mesh(self.dir.join(&s.mesh)).map_err(|e| StoreError::Io {
            path: s.mesh.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let id = ShapeId(s.id);
        let cloud_train: PointCloud =
            load_cloud_drpc(self.dir.join(&s.cloud_train), id, s.train_seed)?;
        let cloud_eval: PointCloud =
            load_cloud_drpc(self.dir.join(&s.cloud_eval), id, s.eval_seed)?;
        Ok(ShapeRecord {
            id,
            mesh,
            cloud_train,
            cloud_eval: Some(cloud_eval),
        })
    }
}
