use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelDims, ModelError, WsiClassifier};

const FORMAT: &str = "milgrad-model";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON form of a classifier. Floats are written in shortest round-trip
/// form and parsed with exact rounding, so save/load is value-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub parameters: Vec<ParameterRecord>,
}

impl WsiClassifier {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            dims: self.dims(),
            parameters: self
                .named_params()
                .into_iter()
                .map(|(name, t)| ParameterRecord {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self, ModelError> {
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.dims != doc.config.dims() {
            return Err(ModelError::Format("dims disagree with architecture".into()));
        }
        let mut model = Self::zeroed(doc.config.clone())?;
        let names: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != doc.parameters.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameter arrays, found {}",
                names.len(),
                doc.parameters.len()
            )));
        }
        for ((p, (name, shape)), rec) in model.params_mut().into_iter().zip(&names).zip(&doc.parameters) {
            if &rec.name != name || &rec.shape != shape {
                return Err(ModelError::Format(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    rec.name, rec.shape, name, shape
                )));
            }
            p.assign(&rec.values)?;
        }
        Ok(model)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, serde_json::to_vec(&self.to_document())?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, ModelError> {
        let doc: ModelDocument = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_document(&doc)
    }
}
