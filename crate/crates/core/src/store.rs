//! Embedding caches, metadata tables and level grouping.
//!
//! A cache is two files sharing a base name:
//!
//! - `<name>.manifest.json`: format tag, embedding width, record count and one
//!   [`ViewRecord`] per row.
//! - `<name>.f32bin`: the `record_count × 512` matrix, row-major little-endian
//!   `f32`, record `i` at byte offset `i · 512 · 4`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::{atomic_write, decode_f32_le, encode_f32_le, with_suffix};
use crate::{EMBEDDING_DIM, LEVEL_COUNT, VIEWS_PER_LEVEL};

pub const CACHE_FORMAT: &str = "embedding-cache/1";

/// Columns every metadata table must provide.
pub const METADATA_COLUMNS: [&str; 7] = [
    "image_path",
    "crop",
    "plant_id",
    "day",
    "level",
    "angle",
    "leaf_count",
];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("record count mismatch: manifest says {manifest}, found {found}")]
    CountMismatch { manifest: usize, found: usize },
    #[error("metadata table is missing column `{0}`")]
    MissingColumn(String),
    #[error("metadata table could not be read: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid crop name `{0}`")]
    InvalidCrop(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Crop {
    Mustard,
    Radish,
    Wheat,
    Other(String),
}

impl FromStr for Crop {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "" => Err(StoreError::InvalidCrop(s.to_string())),
            "mustard" => Ok(Crop::Mustard),
            "radish" => Ok(Crop::Radish),
            "wheat" => Ok(Crop::Wheat),
            other if other.contains([',', ':', '\n', '"']) => {
                Err(StoreError::InvalidCrop(s.to_string()))
            }
            _ => Ok(Crop::Other(t.to_string())),
        }
    }
}

impl TryFrom<String> for Crop {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Crop> for String {
    fn from(c: Crop) -> String {
        c.to_string()
    }
}

impl fmt::Display for Crop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Crop::Mustard => f.write_str("mustard"),
            Crop::Radish => f.write_str("radish"),
            Crop::Wheat => f.write_str("wheat"),
            Crop::Other(s) => f.write_str(s),
        }
    }
}

/// Metadata for one cached image embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub crop: Crop,
    pub plant_id: u32,
    /// Plant age in days; the age regression target.
    pub day: u32,
    /// Camera height level, 1..=5.
    pub level: u8,
    /// Rotational view index, 0..=23.
    pub angle: u8,
    pub leaf_count: u32,
    pub embedding_row: usize,
    pub image_path: String,
}

impl ViewRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            group: self.group_key(),
            angle: self.angle,
        }
    }

    pub fn group_key(&self) -> GroupKey {
        GroupKey {
            crop: self.crop.clone(),
            plant_id: self.plant_id,
            day: self.day,
            level: self.level,
        }
    }

    /// Renders the record back into an unparsed metadata row.
    pub fn to_raw_row(&self, line: u64) -> RawRow {
        RawRow {
            line,
            image_path: self.image_path.clone(),
            crop: self.crop.to_string(),
            plant_id: self.plant_id.to_string(),
            day: self.day.to_string(),
            level: self.level.to_string(),
            angle: self.angle.to_string(),
            leaf_count: self.leaf_count.to_string(),
        }
    }
}

/// Identifies one (plant, day, level) aggregation unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub crop: Crop,
    pub plant_id: u32,
    pub day: u32,
    pub level: u8,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/plant {}/day {}/level {}",
            self.crop, self.plant_id, self.day, self.level
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub group: GroupKey,
    pub angle: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheManifest {
    format: String,
    dim: usize,
    record_count: usize,
    records: Vec<ViewRecord>,
}

/// Per-image embeddings with their metadata. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub records: Vec<ViewRecord>,
    /// `records.len() × 512`, standard (row-major) layout.
    pub matrix: Array2<f32>,
}

impl EmbeddingCache {
    /// Builds a cache, checking only the shape contract; content is checked by [`validate_cache`].
    pub fn new(records: Vec<ViewRecord>, matrix: Array2<f32>) -> Result<Self, StoreError> {
        if matrix.ncols() != EMBEDDING_DIM {
            return Err(StoreError::DimensionMismatch {
                expected: EMBEDDING_DIM,
                found: matrix.ncols(),
            });
        }
        if matrix.nrows() != records.len() {
            return Err(StoreError::CountMismatch {
                manifest: records.len(),
                found: matrix.nrows(),
            });
        }
        let matrix = if matrix.is_standard_layout() {
            matrix
        } else {
            matrix.as_standard_layout().into_owned()
        };
        Ok(Self { records, matrix })
    }

    pub fn empty() -> Self {
        Self {
            records: Vec::new(),
            matrix: Array2::zeros((0, EMBEDDING_DIM)),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Embedding stored at matrix row `row`.
    pub fn row(&self, row: usize) -> &[f32] {
        let start = row * EMBEDDING_DIM;
        &self.matrix.as_slice().expect("standard layout")[start..start + EMBEDDING_DIM]
    }

    /// Embedding for a record.
    pub fn embedding(&self, record: &ViewRecord) -> &[f32] {
        self.row(record.embedding_row)
    }

    /// Returns a cache holding only `record_indices`, with rows renumbered densely.
    pub fn subset(&self, record_indices: &[usize]) -> Self {
        let mut matrix = Array2::zeros((record_indices.len(), EMBEDDING_DIM));
        let mut records = Vec::with_capacity(record_indices.len());
        for (new_row, &idx) in record_indices.iter().enumerate() {
            let mut rec = self.records[idx].clone();
            matrix.row_mut(new_row).assign(&ndarray::ArrayView1::from(self.embedding(&rec)));
            rec.embedding_row = new_row;
            records.push(rec);
        }
        Self { records, matrix }
    }

    pub fn write(&self, base: &Path) -> Result<(), StoreError> {
        write_cache(&self.records, &self.matrix, base)
    }
}

/// Manifest path for a cache base name.
pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, ".manifest.json")
}

/// Payload path for a cache base name.
pub fn payload_path(base: &Path) -> PathBuf {
    with_suffix(base, ".f32bin")
}

/// Accepts either a base name or a path to the manifest itself.
pub fn cache_base(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    match s.strip_suffix(".manifest.json") {
        Some(stem) => PathBuf::from(stem),
        None => path.to_path_buf(),
    }
}

pub fn write_cache(records: &[ViewRecord], matrix: &Array2<f32>, base: &Path) -> Result<(), StoreError> {
    if matrix.ncols() != EMBEDDING_DIM {
        return Err(StoreError::DimensionMismatch {
            expected: EMBEDDING_DIM,
            found: matrix.ncols(),
        });
    }
    if matrix.nrows() != records.len() {
        return Err(StoreError::CountMismatch {
            manifest: records.len(),
            found: matrix.nrows(),
        });
    }
    let base = cache_base(base);
    let manifest = CacheManifest {
        format: CACHE_FORMAT.to_string(),
        dim: EMBEDDING_DIM,
        record_count: records.len(),
        records: records.to_vec(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let values: Vec<f32> = matrix.iter().copied().collect();
    let payload = payload_path(&base);
    atomic_write(&payload, &encode_f32_le(&values)).map_err(io_err(&payload))?;
    let mpath = manifest_path(&base);
    atomic_write(&mpath, &json).map_err(io_err(&mpath))?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<EmbeddingCache, StoreError> {
    let base = cache_base(path);
    let mpath = manifest_path(&base);
    let text = std::fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: CacheManifest =
        serde_json::from_slice(&text).map_err(|source| StoreError::Manifest {
            path: mpath.clone(),
            source,
        })?;
    if manifest.dim != EMBEDDING_DIM {
        return Err(StoreError::DimensionMismatch {
            expected: EMBEDDING_DIM,
            found: manifest.dim,
        });
    }
    if manifest.record_count != manifest.records.len() {
        return Err(StoreError::CountMismatch {
            manifest: manifest.record_count,
            found: manifest.records.len(),
        });
    }
    let ppath = payload_path(&base);
    let bytes = std::fs::read(&ppath).map_err(io_err(&ppath))?;
    let row_bytes = EMBEDDING_DIM * 4;
    let expected = manifest.record_count * row_bytes;
    if bytes.len() < expected {
        return Err(StoreError::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(StoreError::CountMismatch {
            manifest: manifest.record_count,
            found: bytes.len().div_ceil(row_bytes),
        });
    }
    let matrix = Array2::from_shape_vec((manifest.record_count, EMBEDDING_DIM), decode_f32_le(&bytes))
        .expect("payload length checked");
    Ok(EmbeddingCache {
        records: manifest.records,
        matrix,
    })
}

/// One metadata row as text, before any parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRow {
    /// 1-based line number in the source table.
    pub line: u64,
    pub image_path: String,
    pub crop: String,
    pub plant_id: String,
    pub day: String,
    pub level: String,
    pub angle: String,
    pub leaf_count: String,
}

/// Reads a comma-separated metadata table. Extra columns are ignored; a
/// missing required column is a hard error.
pub fn read_metadata<R: std::io::Read>(reader: R) -> Result<Vec<RawRow>, StoreError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(METADATA_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| StoreError::MissingColumn(name.to_string()))?;
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("").to_string();
        rows.push(RawRow {
            line: rec.position().map(|p| p.line()).unwrap_or(0),
            image_path: get(0),
            crop: get(1),
            plant_id: get(2),
            day: get(3),
            level: get(4),
            angle: get(5),
            leaf_count: get(6),
        });
    }
    Ok(rows)
}

pub fn read_metadata_file(path: &Path) -> Result<Vec<RawRow>, StoreError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_metadata(std::io::BufReader::new(f))
}

/// Writes records as a metadata table (the same columns [`read_metadata`] expects).
pub fn write_metadata(records: &[ViewRecord], path: &Path) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METADATA_COLUMNS)?;
    for r in records {
        w.write_record([
            r.image_path.clone(),
            r.crop.to_string(),
            r.plant_id.to_string(),
            r.day.to_string(),
            r.level.to_string(),
            r.angle.to_string(),
            r.leaf_count.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    atomic_write(path, &bytes).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingFile,
    BadLevel,
    BadAngle,
    DuplicateKey,
    Unparseable,
    IncompleteLevelExcluded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input_rows: usize,
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

impl CleaningReport {
    pub fn count(&self, reason: RejectReason) -> usize {
        self.rejected.iter().filter(|r| r.reason == reason).count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct CleanOptions {
    /// Drop every (crop, plant, day, level) group that lacks some of its 24 views.
    pub exclude_incomplete_levels: bool,
    /// When set, image paths are resolved against this directory and must exist.
    pub image_root: Option<PathBuf>,
}

fn parse_row(row: &RawRow, opts: &CleanOptions) -> Result<ViewRecord, (RejectReason, String)> {
    use RejectReason::*;
    let int = |field: &str, v: &str| -> Result<u64, (RejectReason, String)> {
        v.parse::<u64>()
            .map_err(|_| (Unparseable, format!("{field} `{v}` is not a non-negative integer")))
    };
    let crop: Crop = row
        .crop
        .parse()
        .map_err(|_| (Unparseable, format!("crop `{}`", row.crop)))?;
    let plant_id = int("plant_id", &row.plant_id)?;
    let day = int("day", &row.day)?;
    let level = int("level", &row.level)?;
    let angle = int("angle", &row.angle)?;
    let leaf_count = int("leaf_count", &row.leaf_count)?;
    if plant_id == 0 || plant_id > u32::MAX as u64 {
        return Err((Unparseable, format!("plant_id {plant_id} out of range")));
    }
    if day == 0 || day > u32::MAX as u64 {
        return Err((Unparseable, format!("day {day} out of range")));
    }
    if leaf_count > u32::MAX as u64 {
        return Err((Unparseable, format!("leaf_count {leaf_count} out of range")));
    }
    if !(1..=LEVEL_COUNT as u64).contains(&level) {
        return Err((BadLevel, format!("level {level} not in 1..=5")));
    }
    if angle >= VIEWS_PER_LEVEL as u64 {
        return Err((BadAngle, format!("angle {angle} not in 0..=23")));
    }
    if row.image_path.is_empty() {
        return Err((MissingFile, "empty image path".to_string()));
    }
    if let Some(root) = &opts.image_root {
        let p = root.join(&row.image_path);
        if !p.is_file() {
            return Err((MissingFile, format!("{} does not exist", p.display())));
        }
    }
    Ok(ViewRecord {
        crop,
        plant_id: plant_id as u32,
        day: day as u32,
        level: level as u8,
        angle: angle as u8,
        leaf_count: leaf_count as u32,
        embedding_row: 0,
        image_path: row.image_path.clone(),
    })
}

/// Parses and filters metadata rows. Nothing is repaired: every row that
/// violates a record invariant is rejected with its reason. Duplicate keys keep
/// the first occurrence. Accepted records get dense `embedding_row` indices in
/// input order.
pub fn clean_metadata(rows: &[RawRow], opts: &CleanOptions) -> (Vec<ViewRecord>, CleaningReport) {
    let mut report = CleaningReport {
        input_rows: rows.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut kept: Vec<(u64, ViewRecord)> = Vec::new();
    for row in rows {
        match parse_row(row, opts) {
            Ok(rec) => {
                if seen.insert(rec.key()) {
                    kept.push((row.line, rec));
                } else {
                    report.rejected.push(Rejection {
                        line: row.line,
                        reason: RejectReason::DuplicateKey,
                        detail: format!("{} angle {} already present", rec.group_key(), rec.angle),
                    });
                }
            }
            Err((reason, detail)) => report.rejected.push(Rejection {
                line: row.line,
                reason,
                detail,
            }),
        }
    }

    if opts.exclude_incomplete_levels {
        let mut sizes: HashMap<GroupKey, usize> = HashMap::new();
        for (_, r) in &kept {
            *sizes.entry(r.group_key()).or_default() += 1;
        }
        let mut retained = Vec::with_capacity(kept.len());
        for (line, r) in kept {
            let n = sizes[&r.group_key()];
            if n < VIEWS_PER_LEVEL {
                report.rejected.push(Rejection {
                    line,
                    reason: RejectReason::IncompleteLevelExcluded,
                    detail: format!("{} has {n} of {VIEWS_PER_LEVEL} views", r.group_key()),
                });
            } else {
                retained.push((line, r));
            }
        }
        kept = retained;
    }

    report.rejected.sort_by_key(|r| r.line);
    let records: Vec<ViewRecord> = kept
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut r))| {
            r.embedding_row = i;
            r
        })
        .collect();
    report.accepted = records.len();
    for r in report.rejected.iter().filter(|r| r.reason != RejectReason::IncompleteLevelExcluded) {
        log::debug!("rejected line {}: {:?} ({})", r.line, r.reason, r.detail);
    }
    (records, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    NonFinite { row: usize, column: usize, value: String },
    DuplicateKey { first_record: usize, duplicate_record: usize },
    RowOutOfRange { record: usize, row: usize },
    InvalidField { record: usize, field: String, value: String },
    ShapeMismatch { detail: String },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::NonFinite { row, column, value } => {
                write!(f, "non-finite value {value} at row {row}, column {column}")
            }
            Finding::DuplicateKey { first_record, duplicate_record } => write!(
                f,
                "record {duplicate_record} duplicates the key of record {first_record}"
            ),
            Finding::RowOutOfRange { record, row } => {
                write!(f, "record {record} references missing matrix row {row}")
            }
            Finding::InvalidField { record, field, value } => {
                write!(f, "record {record} has invalid {field} = {value}")
            }
            Finding::ShapeMismatch { detail } => write!(f, "shape mismatch: {detail}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Reports every invariant violation in a cache. Never fails on content.
pub fn validate_cache(cache: &EmbeddingCache) -> ValidationReport {
    let mut findings = Vec::new();
    let (rows, cols) = cache.matrix.dim();
    if cols != EMBEDDING_DIM {
        findings.push(Finding::ShapeMismatch {
            detail: format!("matrix has {cols} columns, expected {EMBEDDING_DIM}"),
        });
    }
    if rows != cache.records.len() {
        findings.push(Finding::ShapeMismatch {
            detail: format!("matrix has {rows} rows for {} records", cache.records.len()),
        });
    }
    for ((row, column), v) in cache.matrix.indexed_iter() {
        if !v.is_finite() {
            findings.push(Finding::NonFinite {
                row,
                column,
                value: v.to_string(),
            });
        }
    }
    let mut first: HashMap<RecordKey, usize> = HashMap::new();
    for (i, r) in cache.records.iter().enumerate() {
        if r.embedding_row >= rows {
            findings.push(Finding::RowOutOfRange {
                record: i,
                row: r.embedding_row,
            });
        }
        let mut invalid = |field: &str, value: String| {
            findings.push(Finding::InvalidField {
                record: i,
                field: field.to_string(),
                value,
            })
        };
        if !(1..=LEVEL_COUNT).contains(&r.level) {
            invalid("level", r.level.to_string());
        }
        if r.angle as usize >= VIEWS_PER_LEVEL {
            invalid("angle", r.angle.to_string());
        }
        if r.day == 0 {
            invalid("day", r.day.to_string());
        }
        if r.plant_id == 0 {
            invalid("plant_id", r.plant_id.to_string());
        }
        match first.get(&r.key()) {
            Some(&f) => findings.push(Finding::DuplicateKey {
                first_record: f,
                duplicate_record: i,
            }),
            None => {
                first.insert(r.key(), i);
            }
        }
    }
    ValidationReport {
        records: cache.records.len(),
        findings,
    }
}

/// The views of one (crop, plant, day, level) unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGroup {
    pub key: GroupKey,
    /// Indices into `cache.records`, ordered by angle.
    pub records: Vec<usize>,
    /// Matrix rows of those records, same order.
    pub rows: Vec<usize>,
    pub complete: bool,
}

impl LevelGroup {
    pub fn view_count(&self) -> usize {
        self.rows.len()
    }

    /// Age and leaf-count targets, taken from the group's first record.
    pub fn targets(&self, cache: &EmbeddingCache) -> (f32, f32) {
        let r = &cache.records[self.records[0]];
        (r.day as f32, r.leaf_count as f32)
    }

    pub fn views<'a>(&self, cache: &'a EmbeddingCache) -> Vec<&'a [f32]> {
        self.rows.iter().map(|&r| cache.row(r)).collect()
    }
}

/// Groups records by (crop, plant, day, level), sorted by key, views by angle.
pub fn group_by_level(cache: &EmbeddingCache) -> Vec<LevelGroup> {
    let mut map: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in cache.records.iter().enumerate() {
        map.entry(r.group_key()).or_default().push(i);
    }
    map.into_iter()
        .map(|(key, mut idx)| {
            idx.sort_by_key(|&i| (cache.records[i].angle, i));
            let rows = idx.iter().map(|&i| cache.records[i].embedding_row).collect();
            LevelGroup {
                key,
                complete: idx.len() == VIEWS_PER_LEVEL,
                records: idx,
                rows,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(line: u64, crop: &str, plant: u32, day: u32, level: &str, angle: u32) -> RawRow {
        RawRow {
            line,
            image_path: format!("{crop}/p{plant}/d{day}/L{level}_{angle}.png"),
            crop: crop.to_string(),
            plant_id: plant.to_string(),
            day: day.to_string(),
            level: level.to_string(),
            angle: angle.to_string(),
            leaf_count: "4".to_string(),
        }
    }

    fn record(row: usize, level: u8, angle: u8) -> ViewRecord {
        ViewRecord {
            crop: Crop::Wheat,
            plant_id: 1,
            day: 3,
            level,
            angle,
            leaf_count: 2,
            embedding_row: row,
            image_path: format!("img{row}.png"),
        }
    }

    #[test]
    fn single_valid_row_is_accepted() {
        let (recs, rep) = clean_metadata(&[raw(2, "mustard", 1, 5, "2", 7)], &CleanOptions::default());
        assert_eq!(recs.len(), 1);
        assert!(rep.rejected.is_empty());
        assert_eq!(recs[0].crop, Crop::Mustard);
        assert_eq!(recs[0].embedding_row, 0);
    }

    #[test]
    fn level_six_is_bad_level() {
        let (recs, rep) = clean_metadata(&[raw(2, "radish", 1, 5, "6", 0)], &CleanOptions::default());
        assert!(recs.is_empty());
        assert_eq!(rep.rejected[0].reason, RejectReason::BadLevel);
        assert_eq!(rep.rejected[0].line, 2);
    }

    #[test]
    fn field_errors_map_to_reasons() {
        let mut no_path = raw(5, "wheat", 1, 1, "1", 1);
        no_path.image_path.clear();
        let rows = vec![
            raw(2, "wheat", 1, 1, "1", 24),
            raw(3, "wheat", 1, 0, "1", 0),
            raw(4, "wheat", 1, 1, "x", 0),
            no_path,
        ];
        let (_, rep) = clean_metadata(&rows, &CleanOptions::default());
        let reasons: Vec<_> = rep.rejected.iter().map(|r| r.reason).collect();
        assert_eq!(
            reasons,
            vec![
                RejectReason::BadAngle,
                RejectReason::Unparseable,
                RejectReason::Unparseable,
                RejectReason::MissingFile
            ]
        );
    }

    #[test]
    fn missing_file_checked_against_image_root() {
        let dir = tempfile::tempdir().unwrap();
        let present = raw(2, "wheat", 1, 1, "1", 0);
        std::fs::create_dir_all(dir.path().join("wheat/p1/d1")).unwrap();
        std::fs::write(dir.path().join(&present.image_path), b"").unwrap();
        let absent = raw(3, "wheat", 1, 1, "1", 1);
        let opts = CleanOptions {
            image_root: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let (recs, rep) = clean_metadata(&[present, absent], &opts);
        assert_eq!(recs.len(), 1);
        assert_eq!(rep.rejected[0].reason, RejectReason::MissingFile);
    }

    #[test]
    fn duplicate_key_keeps_first() {
        let mut second = raw(3, "wheat", 1, 1, "1", 0);
        second.leaf_count = "9".into();
        let (recs, rep) = clean_metadata(&[raw(2, "wheat", 1, 1, "1", 0), second], &CleanOptions::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].leaf_count, 4);
        assert_eq!(rep.rejected[0].reason, RejectReason::DuplicateKey);
        assert_eq!(rep.rejected[0].line, 3);
    }

    #[test]
    fn incomplete_wheat_level_excluded_when_requested() {
        let rows: Vec<_> = (0..23).map(|a| raw(a as u64 + 2, "wheat", 1, 1, "5", a)).collect();
        let (recs, rep) = clean_metadata(
            &rows,
            &CleanOptions {
                exclude_incomplete_levels: true,
                ..Default::default()
            },
        );
        assert!(recs.is_empty());
        assert_eq!(rep.count(RejectReason::IncompleteLevelExcluded), 23);
        assert_eq!(rep.accepted + rep.rejected.len(), rep.input_rows);

        let (recs, rep) = clean_metadata(&rows, &CleanOptions::default());
        assert_eq!(recs.len(), 23);
        assert!(rep.rejected.is_empty());
    }

    #[test]
    fn header_missing_column_names_it() {
        let csv = "image_path,crop,plant_id,day,level,leaf_count\na.png,wheat,1,1,1,3\n";
        match read_metadata(csv.as_bytes()) {
            Err(StoreError::MissingColumn(c)) => assert_eq!(c, "angle"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn metadata_reads_lines_and_extra_columns() {
        let csv = "crop,image_path,plant_id,day,level,angle,leaf_count,notes\n\
                   Mustard,a.png,1,2,3,4,5,x\n\
                   radish,b.png,2,2,3,4,5,y\n";
        let rows = read_metadata(csv.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].line, 2);
        assert_eq!(rows[1].line, 3);
        assert_eq!(rows[0].crop, "Mustard");
        let (recs, _) = clean_metadata(&rows, &CleanOptions::default());
        assert_eq!(recs[0].crop, Crop::Mustard);
        assert_eq!(recs[1].crop, Crop::Radish);
    }

    #[test]
    fn other_crops_kept_verbatim() {
        assert_eq!("Maize".parse::<Crop>().unwrap(), Crop::Other("Maize".into()));
        assert!("".parse::<Crop>().is_err());
        assert!("a,b".parse::<Crop>().is_err());
    }

    #[test]
    fn empty_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("empty");
        let c = EmbeddingCache::empty();
        c.write(&base).unwrap();
        let back = read_cache(&base).unwrap();
        assert_eq!(back, c);
        assert_eq!(std::fs::metadata(payload_path(&base)).unwrap().len(), 0);
    }

    #[test]
    fn two_record_cache_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("two");
        let mut m = Array2::zeros((2, EMBEDDING_DIM));
        m[[0, 0]] = 0.1f32;
        m[[0, 511]] = -3.5e-30;
        m[[1, 7]] = f32::MIN_POSITIVE;
        m[[1, 8]] = -0.0;
        let cache = EmbeddingCache::new(vec![record(0, 1, 0), record(1, 1, 1)], m.clone()).unwrap();
        cache.write(&base).unwrap();
        let bytes = std::fs::read(payload_path(&base)).unwrap();
        let expected: Vec<u8> = m.iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(bytes, expected);
        let back = read_cache(&manifest_path(&base)).unwrap();
        assert_eq!(back.records, cache.records);
        let a: Vec<u32> = back.matrix.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = m.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("t");
        let cache = EmbeddingCache::new(vec![record(0, 1, 0)], Array2::zeros((1, EMBEDDING_DIM))).unwrap();
        cache.write(&base).unwrap();
        let p = payload_path(&base);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_cache(&base), Err(StoreError::TruncatedPayload { .. })));
    }

    #[test]
    fn oversized_payload_and_bad_manifest_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("o");
        let cache = EmbeddingCache::new(vec![record(0, 1, 0)], Array2::zeros((1, EMBEDDING_DIM))).unwrap();
        cache.write(&base).unwrap();
        let p = payload_path(&base);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.extend(vec![0u8; EMBEDDING_DIM * 4]);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_cache(&base),
            Err(StoreError::CountMismatch { manifest: 1, found: 2 })
        ));

        let mp = manifest_path(&base);
        let text = std::fs::read_to_string(&mp).unwrap().replace("\"dim\": 512", "\"dim\": 256");
        std::fs::write(&mp, text).unwrap();
        assert!(matches!(
            read_cache(&base),
            Err(StoreError::DimensionMismatch { expected: 512, found: 256 })
        ));
    }

    #[test]
    fn write_rejects_wrong_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("w");
        assert!(matches!(
            write_cache(&[record(0, 1, 0)], &Array2::zeros((1, 3)), &base),
            Err(StoreError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            write_cache(&[], &Array2::zeros((1, EMBEDDING_DIM)), &base),
            Err(StoreError::CountMismatch { .. })
        ));
    }

    #[test]
    fn validation_findings() {
        let zeros = EmbeddingCache::new(vec![record(0, 1, 0)], Array2::zeros((1, EMBEDDING_DIM))).unwrap();
        assert!(validate_cache(&zeros).passed());

        let mut nan = zeros.clone();
        nan.matrix[[0, 7]] = f32::NAN;
        let rep = validate_cache(&nan);
        assert_eq!(rep.findings.len(), 1);
        assert!(matches!(rep.findings[0], Finding::NonFinite { row: 0, column: 7, .. }));

        let dup = EmbeddingCache::new(
            vec![record(0, 1, 0), record(1, 1, 0)],
            Array2::zeros((2, EMBEDDING_DIM)),
        )
        .unwrap();
        assert_eq!(
            validate_cache(&dup).findings,
            vec![Finding::DuplicateKey { first_record: 0, duplicate_record: 1 }]
        );

        let mut oob = zeros.clone();
        oob.records[0].embedding_row = 5;
        oob.records[0].level = 9;
        let rep = validate_cache(&oob);
        assert!(rep.findings.contains(&Finding::RowOutOfRange { record: 0, row: 5 }));
        assert!(rep.findings.iter().any(|f| matches!(f, Finding::InvalidField { field, .. } if field == "level")));
    }

    #[test]
    fn grouping_counts() {
        let recs: Vec<_> = (0..24).rev().map(|a| record(23 - a as usize, 2, a)).collect();
        let cache = EmbeddingCache::new(recs, Array2::zeros((24, EMBEDDING_DIM))).unwrap();
        let g = group_by_level(&cache);
        assert_eq!(g.len(), 1);
        assert!(g[0].complete);
        let angles: Vec<u8> = g[0].records.iter().map(|&i| cache.records[i].angle).collect();
        assert_eq!(angles, (0..24).collect::<Vec<u8>>());

        let recs: Vec<_> = (0..48).map(|i| record(i, 1 + (i / 24) as u8, (i % 24) as u8)).collect();
        let cache = EmbeddingCache::new(recs, Array2::zeros((48, EMBEDDING_DIM))).unwrap();
        let g = group_by_level(&cache);
        assert_eq!(g.iter().map(|g| g.view_count()).collect::<Vec<_>>(), vec![24, 24]);

        let recs: Vec<_> = (0..23).map(|i| record(i, 5, i as u8)).collect();
        let cache = EmbeddingCache::new(recs, Array2::zeros((23, EMBEDDING_DIM))).unwrap();
        let g = group_by_level(&cache);
        assert_eq!(g.len(), 1);
        assert!(!g[0].complete);
    }
}
