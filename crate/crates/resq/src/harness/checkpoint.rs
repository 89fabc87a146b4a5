//! Versioned checkpoints: config, vocabulary, anchors, parameters and
//! optimizer state in one JSON container. Parameter values survive a
//! save/load round trip bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::TokenVocabulary;
use crate::grounding::AnchorSet;
use crate::model::{Model, ModelConfig};
use crate::tensor::optim::{OptimizerState, RmsProp};
use crate::tensor::Arr;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub anchors: AnchorSet,
    pub params: Vec<ParamRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: Option<&RmsProp>, epoch: usize) -> Result<()> {
    let params = model
        .params
        .iter()
        .map(|(_, e)| ParamRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            data: e.value.iter().cloned().collect(),
            trainable: e.trainable,
        })
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        epoch,
        seed: 0,
        model: model.cfg.clone(),
        vocab: model.vocab.words().to_vec(),
        anchors: model.anchors.clone(),
        params,
        optimizer: opt.map(|o| o.export_state()),
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| Error::Integrity(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Rebuild the model from a checkpoint. Fails with a version error on a
/// foreign version, an integrity error on damaged JSON or unknown parameter
/// names, and a shape error naming the parameter whose stored shape does not
/// fit the configuration.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<RmsProp>, usize)> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: ckpt.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let vocab = TokenVocabulary::from_words(&ckpt.vocab)?;
    let mut model = Model::new(ckpt.model.clone(), vocab, ckpt.anchors.clone(), ckpt.seed)?;
    if ckpt.params.len() != model.params.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} parameters, model defines {}",
            ckpt.params.len(),
            model.params.len()
        )));
    }
    for rec in &ckpt.params {
        let id = model
            .params
            .id_by_name(&rec.name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {:?}", rec.name)))?;
        let expected = model.params.value(id).shape().to_vec();
        if expected != rec.shape {
            return Err(Error::ShapeMismatch {
                field: rec.name.clone(),
                expected: format!("{expected:?}"),
                got: format!("{:?}", rec.shape),
            });
        }
        let arr = Arr::from_shape_vec(ndarray::IxDyn(&rec.shape), rec.data.clone())
            .map_err(|e| Error::Integrity(format!("{}: {e}", rec.name)))?;
        *model.params.value_mut(id) = arr;
        model.params.set_trainable(id, rec.trainable);
    }
    let opt = match &ckpt.optimizer {
        Some(state) => {
            if state.sq_avg.len() != model.params.len() {
                return Err(Error::Integrity(
                    "optimizer state does not match parameter count".into(),
                ));
            }
            Some(RmsProp::from_state(state)?)
        }
        None => None,
    };
    Ok((model, opt, ckpt.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::AnchorSet;

    fn model_fixture() -> Model {
        let anchors = AnchorSet(vec![
            (4.0, 4.0),
            (5.0, 4.0),
            (4.0, 6.0),
            (6.0, 6.0),
            (8.0, 6.0),
            (6.0, 9.0),
            (9.0, 9.0),
            (11.0, 9.0),
            (9.0, 12.0),
        ]);
        Model::new(ModelConfig::tiny(), TokenVocabulary::closed(), anchors, 11).unwrap()
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = model_fixture();
        let opt = RmsProp::new(&model.params, 0.99, 1e-8);
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &model, Some(&opt), 3).unwrap();
        let (back, opt2, epoch) = load_checkpoint(&path).unwrap();
        assert_eq!(epoch, 3);
        assert!(opt2.is_some());
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = model_fixture();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &model, None, 0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let model = model_fixture();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &model, None, 0).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"version\":1", "\"version\":99", 1);
        std::fs::write(&path, text).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 99);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected version error, got {:?}", other.err()),
        }
    }

    #[test]
    fn wrong_shape_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let model = model_fixture();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &model, None, 0).unwrap();
        // shrink C in the stored config: stored tensors no longer fit
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"c\":4", "\"c\":8", 1);
        std::fs::write(&path, text).unwrap();
        match load_checkpoint(&path) {
            Err(Error::ShapeMismatch { field, .. }) => {
                assert!(!field.is_empty());
            }
            other => panic!("expected shape mismatch, got {:?}", other.err()),
        }
    }
}
