//! Embedding descriptors of the form `MODALITY:model_id:STATE`.
//!
//! `MODALITY` is one of `V`, `Q`, `VQ`; `STATE` is either `PT` or
//! `FT(method)`. Examples: `V:vit:PT`, `VQ:pali:FT(vanilla)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    V,
    Q,
    VQ,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::V => "V",
            Modality::Q => "Q",
            Modality::VQ => "VQ",
        }
    }
}

impl FromStr for Modality {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "V" => Ok(Modality::V),
            "Q" => Ok(Modality::Q),
            "VQ" => Ok(Modality::VQ),
            other => Err(IngestError::BadTag(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainingState {
    PT,
    FT(String),
}

impl TrainingState {
    /// Method label used to group heatmap rows: `PT` or the FT method name.
    pub fn method(&self) -> &str {
        match self {
            TrainingState::PT => "PT",
            TrainingState::FT(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityTag {
    pub modality: Modality,
    pub model_id: String,
    pub training_state: TrainingState,
}

impl ModalityTag {
    pub fn new(modality: Modality, model_id: impl Into<String>, training_state: TrainingState) -> Self {
        Self {
            modality,
            model_id: model_id.into(),
            training_state,
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.training_state {
            TrainingState::PT => write!(f, "{}:{}:PT", self.modality.as_str(), self.model_id),
            TrainingState::FT(m) => write!(f, "{}:{}:FT({})", self.modality.as_str(), self.model_id, m),
        }
    }
}

impl FromStr for ModalityTag {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, ':');
        let (Some(modality), Some(model_id), Some(state)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(IngestError::BadTag(format!("'{s}' is not MODALITY:model:STATE")));
        };
        if model_id.is_empty() {
            return Err(IngestError::BadTag(format!("'{s}' has an empty model id")));
        }
        let training_state = if state == "PT" {
            TrainingState::PT
        } else if let Some(method) = state.strip_prefix("FT(").and_then(|r| r.strip_suffix(')')) {
            if method.is_empty() {
                return Err(IngestError::BadTag(format!("'{s}' has an empty FT method")));
            }
            TrainingState::FT(method.to_string())
        } else {
            return Err(IngestError::BadTag(format!("'{s}': state must be PT or FT(method)")));
        };
        Ok(ModalityTag {
            modality: modality.parse()?,
            model_id: model_id.to_string(),
            training_state,
        })
    }
}

impl Serialize for ModalityTag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalityTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
