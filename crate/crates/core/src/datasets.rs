//! Image manifests, class descriptions and the two sampling regimes:
//! one random frame per capture sequence, and a fixed number of images per
//! class.
//!
//! Manifests are line-delimited JSON. Line 1 is a header object
//! `{"name", "classes": [{"id", "name"}...], "task_noun"?}`; every following
//! line is a record `{"image_ref", "class_id", "sequence_id"?}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{ClassId, ClassSet};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: class id {class_id} is not in the class set")]
    UnknownClassId {
        path: PathBuf,
        line: usize,
        class_id: ClassId,
    },
    #[error("{0}: manifest has no records")]
    EmptyManifest(PathBuf),
    #[error("record {image_ref:?} has no sequence_id")]
    MissingSequenceId { image_ref: String },
    #[error("class {class_id} ({name}) has {available} records, {requested} requested")]
    InsufficientRecords {
        class_id: ClassId,
        name: String,
        available: usize,
        requested: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_ref: String,
    pub class_id: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_id: Option<String>,
}

impl ImageRecord {
    pub fn new(image_ref: impl Into<String>, class_id: ClassId) -> Self {
        Self {
            image_ref: image_ref.into(),
            class_id,
            sequence_id: None,
        }
    }

    pub fn with_sequence(mut self, sequence_id: impl Into<String>) -> Self {
        self.sequence_id = Some(sequence_id.into());
        self
    }

    fn sort_key(&self) -> (Option<&str>, &str) {
        (self.sequence_id.as_deref(), self.image_ref.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_noun: Option<String>,
    pub classes: ClassSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    /// Noun used in zero-shot prompts, e.g. "traffic sign".
    pub task_noun: String,
    pub classes: ClassSet,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, task_noun: impl Into<String>, classes: ClassSet, records: Vec<ImageRecord>) -> Self {
        Self {
            name: name.into(),
            task_noun: task_noun.into(),
            classes,
            records,
        }
    }

    /// Number of records per class id, including classes with none.
    pub fn class_histogram(&self) -> BTreeMap<ClassId, usize> {
        let mut hist: BTreeMap<ClassId, usize> = self.classes.ids().map(|id| (id, 0)).collect();
        for record in &self.records {
            *hist.entry(record.class_id).or_insert(0) += 1;
        }
        hist
    }

    /// Lookup from image reference to its ground-truth class.
    pub fn truth_index(&self) -> HashMap<String, ClassId> {
        self.records.iter().map(|r| (r.image_ref.clone(), r.class_id)).collect()
    }

    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            name: self.name.clone(),
            task_noun: Some(self.task_noun.clone()),
            classes: self.classes.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header()).expect("header serializes");
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    fn with_records(&self, records: Vec<ImageRecord>) -> Self {
        Self {
            name: self.name.clone(),
            task_noun: self.task_noun.clone(),
            classes: self.classes.clone(),
            records,
        }
    }

    fn canonical_records(&self) -> Vec<&ImageRecord> {
        let mut sorted: Vec<&ImageRecord> = self.records.iter().collect();
        sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        sorted
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text, path)
}

/// Parses manifest text; `origin` is only used in error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<DatasetManifest, DatasetError> {
    let schema = |line: usize, message: String| DatasetError::Schema {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (header_idx, header_line) = lines
        .next()
        .ok_or_else(|| DatasetError::EmptyManifest(origin.to_path_buf()))?;
    let header: ManifestHeader =
        serde_json::from_str(header_line).map_err(|e| schema(header_idx + 1, format!("header: {e}")))?;

    let mut records = Vec::new();
    for (idx, line) in lines {
        let record: ImageRecord = serde_json::from_str(line).map_err(|e| schema(idx + 1, e.to_string()))?;
        if record.image_ref.trim().is_empty() {
            return Err(schema(idx + 1, "image_ref is empty".into()));
        }
        if !header.classes.contains(record.class_id) {
            return Err(DatasetError::UnknownClassId {
                path: origin.to_path_buf(),
                line: idx + 1,
                class_id: record.class_id,
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyManifest(origin.to_path_buf()));
    }
    Ok(DatasetManifest {
        name: header.name,
        task_noun: header.task_noun.unwrap_or_else(|| "object".to_string()),
        classes: header.classes,
        records,
    })
}

/// Keeps one randomly chosen record per `sequence_id`.
///
/// Records are sorted by `(sequence_id, image_ref)` before drawing, so the
/// result depends only on the record set and the seed. Output is ordered
/// by sequence id.
pub fn sample_one_per_sequence(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest, DatasetError> {
    if let Some(r) = manifest.records.iter().find(|r| r.sequence_id.is_none()) {
        return Err(DatasetError::MissingSequenceId {
            image_ref: r.image_ref.clone(),
        });
    }
    let sorted = manifest.canonical_records();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for group in sorted.chunk_by(|a, b| a.sequence_id == b.sequence_id) {
        let choice = rng.random_range(0..group.len());
        picked.push(group[choice].clone());
    }
    Ok(manifest.with_records(picked))
}

/// Draws exactly `per_class` records from every class without replacement.
///
/// Output is grouped by class id, each group in canonical record order.
pub fn sample_balanced(manifest: &DatasetManifest, per_class: usize, seed: u64) -> Result<DatasetManifest, DatasetError> {
    let sorted = manifest.canonical_records();
    let mut by_class: BTreeMap<ClassId, Vec<&ImageRecord>> = manifest.classes.ids().map(|id| (id, Vec::new())).collect();
    for record in sorted {
        by_class.entry(record.class_id).or_default().push(record);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(per_class * by_class.len());
    for (class_id, records) in &by_class {
        if records.len() < per_class {
            return Err(DatasetError::InsufficientRecords {
                class_id: *class_id,
                name: manifest.classes.name(*class_id).unwrap_or_default().to_string(),
                available: records.len(),
                requested: per_class,
            });
        }
        let mut chosen = index::sample(&mut rng, records.len(), per_class).into_vec();
        chosen.sort_unstable();
        picked.extend(chosen.into_iter().map(|i| records[i].clone()));
    }
    Ok(manifest.with_records(picked))
}

/// Textual descriptions keyed by class id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassDescriptionSet {
    descriptions: BTreeMap<ClassId, String>,
}

impl ClassDescriptionSet {
    pub fn new(descriptions: BTreeMap<ClassId, String>) -> Self {
        Self { descriptions }
    }

    pub fn get(&self, id: ClassId) -> Option<&str> {
        self.descriptions.get(&id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    /// True when every class in `classes` has a description.
    pub fn covers(&self, classes: &ClassSet) -> bool {
        classes.ids().all(|id| self.descriptions.contains_key(&id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &str)> {
        self.descriptions.iter().map(|(k, v)| (*k, v.as_str()))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptionLine {
    class_id: ClassId,
    description: String,
}

pub fn load_descriptions(path: &Path, classes: &ClassSet) -> Result<ClassDescriptionSet, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_descriptions(&text, classes, path)
}

pub fn parse_descriptions(text: &str, classes: &ClassSet, origin: &Path) -> Result<ClassDescriptionSet, DatasetError> {
    let schema = |line: usize, message: String| DatasetError::Schema {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut descriptions = BTreeMap::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: DescriptionLine = serde_json::from_str(line).map_err(|e| schema(idx + 1, e.to_string()))?;
        if !classes.contains(entry.class_id) {
            return Err(DatasetError::UnknownClassId {
                path: origin.to_path_buf(),
                line: idx + 1,
                class_id: entry.class_id,
            });
        }
        if entry.description.trim().is_empty() {
            return Err(schema(idx + 1, format!("description for class {} is empty", entry.class_id)));
        }
        if !seen.insert(entry.class_id) {
            return Err(schema(idx + 1, format!("class {} described twice", entry.class_id)));
        }
        descriptions.insert(entry.class_id, entry.description);
    }
    Ok(ClassDescriptionSet { descriptions })
}
