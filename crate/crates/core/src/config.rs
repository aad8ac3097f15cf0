//! Run configuration: every section in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DataConfig;
use crate::distortion::DistortionConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::ViTConfig;
use crate::size_augment::SizeAugConfig;
use crate::train::{LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub distortion: DistortionConfig,
    pub size_aug: SizeAugConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ViTConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            distortion: DistortionConfig::default(),
            size_aug: SizeAugConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small model on 64 px inputs; the crop target follows the input size.
    pub fn toy() -> Self {
        let model = ViTConfig::toy();
        Self {
            size_aug: SizeAugConfig {
                tgt: model.input_size,
                ..SizeAugConfig::default()
            },
            model,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected default or toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.distortion.validate()?;
        self.size_aug.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        if self.size_aug.enabled && self.size_aug.tgt < self.model.input_size {
            return Err(Error::Config(format!(
                "size_aug.tgt {} is below the model input size {}",
                self.size_aug.tgt, self.model.input_size
            )));
        }
        Ok(())
    }

    /// Parses a document. An optional top-level `"preset"` picks the base
    /// that the remaining keys are merged over.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text)?;
        let preset = match doc.as_object_mut().and_then(|o| o.remove("preset")) {
            None => "default".to_string(),
            Some(Value::String(s)) => s,
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        Self::preset(&preset)?.merged(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(inner) => Error::Config(format!("{}: {inner}", path.display())),
            other => other,
        })
    }

    /// This config with `patch` deep-merged over it.
    pub fn merged(&self, patch: Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for c in [RunConfig::default(), RunConfig::toy()] {
            c.validate().unwrap();
            let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn partial_documents_merge_over_the_preset() {
        let c = RunConfig::from_json(r#"{"preset": "toy", "seed": 9, "loss": {"alpha": 0.0}, "size_aug": {"T1": 0.5}}"#)
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model, ViTConfig::toy());
        assert_eq!(c.loss.alpha, 0.0);
        assert_eq!(c.loss.beta, 0.25);
        assert_eq!(c.size_aug.t1, 0.5);
        assert_eq!(c.size_aug.tgt, 64);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        for bad in [
            r#"{"modle": {}}"#,
            r#"{"preset": "huge"}"#,
            r#"{"distortion": {"kmin": 3, "kmax": 1}}"#,
            r#"{"train": {"lr": -1}}"#,
        ] {
            let r = RunConfig::from_json(bad).and_then(|c| c.validate());
            assert!(r.as_ref().is_err_and(Error::is_config), "{bad}: {r:?}");
        }
    }
}
