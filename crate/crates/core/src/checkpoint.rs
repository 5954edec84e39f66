//! JSON checkpoint container: one frozen backbone plus any number of trained
//! methods keyed by `<method>@<config hash>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneModel, ClassifierHead};
use crate::error::{Error, Result};
use crate::methods::{MethodConfig, PromptMethod};
use crate::model::PeftModel;

pub const FORMAT: &str = "promptlab-checkpoint/1";

/// First 16 hex digits of the SHA-256 of the value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    pub config: MethodConfig,
    pub inject_layer: usize,
    pub method: PromptMethod,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub backbone: BackboneModel,
    pub methods: BTreeMap<String, MethodEntry>,
}

impl Checkpoint {
    pub fn new(backbone: BackboneModel) -> Self {
        Self {
            format: FORMAT.to_string(),
            backbone,
            methods: BTreeMap::new(),
        }
    }

    pub fn from_model(model: &PeftModel) -> Result<Self> {
        let mut ck = Self::new(model.backbone.clone());
        ck.insert(model)?;
        Ok(ck)
    }

    /// Stores the model's method and head; returns its key.
    pub fn insert(&mut self, model: &PeftModel) -> Result<String> {
        if model.backbone.config != self.backbone.config {
            return Err(Error::Config(
                "backbone config differs from checkpoint".into(),
            ));
        }
        let key = format!(
            "{}@{}",
            model.method_config.kind,
            config_hash(&model.method_config)?
        );
        self.methods.insert(
            key.clone(),
            MethodEntry {
                config: model.method_config.clone(),
                inject_layer: model.inject_layer,
                method: model.method.clone(),
                head: model.backbone.head.clone(),
            },
        );
        Ok(key)
    }

    pub fn model(&self, key: &str) -> Result<PeftModel> {
        let entry = self
            .methods
            .get(key)
            .ok_or_else(|| Error::Config(format!("no method {key:?} in checkpoint")))?;
        let mut backbone = self.backbone.clone();
        backbone.head = entry.head.clone();
        Ok(PeftModel {
            backbone,
            method_config: entry.config.clone(),
            method: entry.method.clone(),
            inject_layer: entry.inject_layer,
        })
    }

    /// The only stored model, if there is exactly one.
    pub fn single_model(&self) -> Result<PeftModel> {
        match self.methods.keys().collect::<Vec<_>>().as_slice() {
            [key] => self.model(key),
            keys => Err(Error::Config(format!(
                "checkpoint holds {} methods; pick one of {keys:?}",
                keys.len()
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {:?}",
                ck.format
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::methods::MethodKind;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = MethodConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.prompt_len = 3;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 16);
    }

    #[test]
    fn save_load_is_bitwise() {
        let cfg = BackboneConfig {
            vocab_size: 10,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 8,
            max_seq: 16,
            num_classes: 2,
            init_std: 0.02,
        };
        let mut mc = MethodConfig::new(MethodKind::IdSpam);
        mc.prompt_len = 2;
        let model = PeftModel::build(cfg, mc, 3).unwrap();
        let ck = Checkpoint::from_model(&model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.single_model().unwrap();
        for ((_, a), (_, b)) in model
            .trainable_parameters()
            .iter()
            .zip(restored.trainable_parameters())
        {
            assert!(a.bitwise_eq(b));
        }
        for ((_, a), (_, b)) in model
            .backbone
            .body_tensors()
            .iter()
            .zip(restored.backbone.body_tensors())
        {
            assert!(a.bitwise_eq(b));
            assert!(!b.requires_grad());
        }
    }
}
