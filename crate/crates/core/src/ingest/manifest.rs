//! Dataset manifests.
//!
//! A manifest is a JSON document with a top-level `datasets` array. Each
//! entry names a dataset, its role in the ID/OOD taxonomy, the kind of shift
//! it carries, and the embedding files per descriptor:
//!
//! ```json
//! {
//!   "joint_capable": ["pali"],
//!   "datasets": [
//!     { "dataset_id": "vqav2-train", "role": "ID-train",
//!       "embedding_paths": { "VQ:pali:PT": "emb/train_vq.emb" } },
//!     { "dataset_id": "vizwiz", "role": "far-OOD", "shift_type": "far",
//!       "embedding_paths": { "VQ:pali:PT": "emb/vizwiz_vq.emb" },
//!       "attention_path": "att/vizwiz.att", "published_accuracy": 22.92 }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::emb::{read_embedding_matrix, EmbeddingMatrix};
use super::tag::{Modality, ModalityTag};
use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    IdTrain,
    IdVal,
    NearOod,
    FarOod,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::IdTrain => "ID-train",
            Role::IdVal => "ID-val",
            Role::NearOod => "near-OOD",
            Role::FarOod => "far-OOD",
        }
    }
}

impl FromStr for Role {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ID-train" => Ok(Role::IdTrain),
            "ID-val" => Ok(Role::IdVal),
            "near-OOD" => Ok(Role::NearOod),
            "far-OOD" => Ok(Role::FarOod),
            other => Err(IngestError::UnknownRole(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShiftType {
    Image,
    Question,
    Answer,
    Multimodal,
    Adversarial,
    Far,
}

impl ShiftType {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftType::Image => "image",
            ShiftType::Question => "question",
            ShiftType::Answer => "answer",
            ShiftType::Multimodal => "multimodal",
            ShiftType::Adversarial => "adversarial",
            ShiftType::Far => "far",
        }
    }
}

impl FromStr for ShiftType {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(ShiftType::Image),
            "question" => Ok(ShiftType::Question),
            "answer" => Ok(ShiftType::Answer),
            "multimodal" => Ok(ShiftType::Multimodal),
            "adversarial" => Ok(ShiftType::Adversarial),
            "far" => Ok(ShiftType::Far),
            other => Err(IngestError::UnknownShiftType(other.to_string())),
        }
    }
}

impl fmt::Display for ShiftType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// On-disk shape of a manifest entry; strings are mapped to enums during
/// validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dataset_id: String,
    role: String,
    #[serde(default)]
    shift_type: Option<String>,
    #[serde(default)]
    embedding_paths: BTreeMap<String, String>,
    #[serde(default)]
    attention_path: Option<String>,
    #[serde(default)]
    published_accuracy: Option<f64>,
    #[serde(default)]
    sample_ids_path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(default)]
    joint_capable: Vec<String>,
    datasets: Vec<RawEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub dataset_id: String,
    pub role: Role,
    pub shift_type: Option<ShiftType>,
    pub embedding_paths: BTreeMap<ModalityTag, PathBuf>,
    pub attention_path: Option<PathBuf>,
    pub published_accuracy: Option<f64>,
    pub sample_ids_path: Option<PathBuf>,
}

/// Validated manifest. Entry order is preserved (it drives heatmap column
/// order) but equality ignores it.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub joint_capable: Vec<String>,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        let key = |m: &DatasetManifest| {
            let mut e: Vec<_> = m.entries.iter().map(|e| (e.dataset_id.clone(), e.clone())).collect();
            e.sort_by(|a, b| a.0.cmp(&b.0));
            let mut j = m.joint_capable.clone();
            j.sort();
            j.dedup();
            (e.into_iter().map(|(_, e)| e).collect::<Vec<_>>(), j)
        };
        key(self) == key(other)
    }
}

/// Embeddings for one (dataset, descriptor) pair together with the sample
/// ids used to align modality series.
#[derive(Debug, Clone)]
pub struct LabeledEmbedding {
    pub dataset_id: String,
    pub tag: ModalityTag,
    pub split: Split,
    pub matrix: EmbeddingMatrix,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, IngestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest, IngestError> {
    let raw: RawManifest = serde_json::from_str(text).map_err(|e| IngestError::ManifestSyntax(e.to_string()))?;
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    let joint_capable: HashSet<&str> = raw.joint_capable.iter().map(String::as_str).collect();

    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(raw.datasets.len());
    for e in &raw.datasets {
        if !seen.insert(e.dataset_id.clone()) {
            return Err(IngestError::DuplicateDatasetId(e.dataset_id.clone()));
        }
        let role: Role = e.role.parse()?;
        let shift_type = e.shift_type.as_deref().map(str::parse).transpose()?;
        if let Some(acc) = e.published_accuracy {
            if !(0.0..=100.0).contains(&acc) {
                return Err(IngestError::AccuracyOutOfRange {
                    dataset_id: e.dataset_id.clone(),
                    value: acc,
                });
            }
        }
        let dangling = |p: &PathBuf| -> Result<(), IngestError> {
            if p.is_file() {
                Ok(())
            } else {
                Err(IngestError::DanglingPath {
                    dataset_id: e.dataset_id.clone(),
                    path: p.clone(),
                })
            }
        };
        let mut embedding_paths = BTreeMap::new();
        for (tag, p) in &e.embedding_paths {
            let tag: ModalityTag = tag.parse()?;
            if tag.modality == Modality::VQ && !joint_capable.contains(tag.model_id.as_str()) {
                return Err(IngestError::JointUnsupported {
                    dataset_id: e.dataset_id.clone(),
                    model_id: tag.model_id.clone(),
                });
            }
            let p = resolve(p);
            dangling(&p)?;
            embedding_paths.insert(tag, p);
        }
        let attention_path = e.attention_path.as_deref().map(resolve);
        if let Some(p) = &attention_path {
            dangling(p)?;
        }
        let sample_ids_path = e.sample_ids_path.as_deref().map(resolve);
        if let Some(p) = &sample_ids_path {
            dangling(p)?;
        }
        entries.push(ManifestEntry {
            dataset_id: e.dataset_id.clone(),
            role,
            shift_type,
            embedding_paths,
            attention_path,
            published_accuracy: e.published_accuracy,
            sample_ids_path,
        });
    }
    let n_train = entries.iter().filter(|e| e.role == Role::IdTrain).count();
    if n_train != 1 {
        return Err(IngestError::MissingIdTrain { found: n_train });
    }
    Ok(DatasetManifest {
        entries,
        joint_capable: raw.joint_capable,
    })
}

impl DatasetManifest {
    pub fn id_train(&self) -> &ManifestEntry {
        self.entries
            .iter()
            .find(|e| e.role == Role::IdTrain)
            .expect("validated manifest has exactly one ID-train entry")
    }

    pub fn entry(&self, dataset_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.dataset_id == dataset_id)
    }

    /// Every entry except ID-train, in manifest order.
    pub fn test_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role != Role::IdTrain)
    }

    /// Loads the embedding for `(dataset_id, tag)`; sample ids come from the
    /// entry's `sample_ids_path` or default to row indices.
    pub fn load_embedding(&self, dataset_id: &str, tag: &ModalityTag) -> Result<LabeledEmbedding, IngestError> {
        let entry = self
            .entry(dataset_id)
            .ok_or_else(|| IngestError::UnknownDataset(dataset_id.to_string()))?;
        let path = entry
            .embedding_paths
            .get(tag)
            .ok_or_else(|| IngestError::MissingEmbedding {
                tag: tag.to_string(),
                dataset_id: dataset_id.to_string(),
            })?;
        let matrix = read_embedding_matrix(path)?;
        let sample_ids = match &entry.sample_ids_path {
            Some(p) => {
                let ids = read_sample_ids(p)?;
                if ids.len() != matrix.rows() {
                    return Err(IngestError::SampleIdCount {
                        dataset_id: dataset_id.to_string(),
                        ids: ids.len(),
                        rows: matrix.rows(),
                    });
                }
                ids
            }
            None => (0..matrix.rows()).map(|i| i.to_string()).collect(),
        };
        Ok(LabeledEmbedding {
            dataset_id: dataset_id.to_string(),
            tag: tag.clone(),
            split: if entry.role == Role::IdTrain { Split::Train } else { Split::Test },
            matrix,
            sample_ids,
        })
    }

    pub fn to_json(&self) -> String {
        let raw = RawManifest {
            joint_capable: self.joint_capable.clone(),
            datasets: self
                .entries
                .iter()
                .map(|e| RawEntry {
                    dataset_id: e.dataset_id.clone(),
                    role: e.role.as_str().to_string(),
                    shift_type: e.shift_type.map(|s| s.as_str().to_string()),
                    embedding_paths: e
                        .embedding_paths
                        .iter()
                        .map(|(t, p)| (t.to_string(), p.display().to_string()))
                        .collect(),
                    attention_path: e.attention_path.as_ref().map(|p| p.display().to_string()),
                    published_accuracy: e.published_accuracy,
                    sample_ids_path: e.sample_ids_path.as_ref().map(|p| p.display().to_string()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("manifest serializes")
    }
}

fn read_sample_ids(path: &Path) -> Result<Vec<String>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}
