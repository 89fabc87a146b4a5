//! The training loop: RMSProp with the halving step-size schedule,
//! per-epoch checkpoints, NaN diagnostics, and full seed determinism when
//! run single-threaded.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{manifest_path, read_dataset, GroundingSample};
use crate::encoders::TokenVocabulary;
use crate::grounding::{assign_anchor, build_loss, compute_anchors, AnchorSet, Box2D, TargetAssignment};
use crate::model::Model;
use crate::subquery::QueryStrategy;
use crate::tensor::layers::Mode;
use crate::tensor::optim::RmsProp;
use crate::tensor::scalar_value;
use crate::{Error, Result};

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub reg: f64,
    pub div: f64,
    pub cover: f64,
}

pub struct TrainResult {
    pub model: Model,
    pub optimizer: RmsProp,
    pub curve: Vec<LossRecord>,
}

/// Anchor priors from the training boxes.
pub fn anchors_from_samples(samples: &[GroundingSample], seed: u64) -> Result<AnchorSet> {
    let boxes: Vec<(f64, f64)> = samples.iter().map(|s| (s.bbox[2], s.bbox[3])).collect();
    compute_anchors(&boxes, seed)
}

pub fn assignment_for(model: &Model, sample: &GroundingSample) -> Result<TargetAssignment> {
    assign_anchor(
        &Box2D::from_xywh(sample.bbox),
        &model.anchors,
        model.stride(),
        model.grid(),
    )
}

/// Batches for one epoch: a seeded shuffle chunked by batch size. The
/// per-word strategy additionally groups each chunk by query length, since
/// its round count is the word count.
fn epoch_batches(
    order: &mut Vec<usize>,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    samples: &[GroundingSample],
    strategy: QueryStrategy,
) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if strategy == QueryStrategy::PerWord {
            let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for &i in chunk {
                by_len.entry(samples[i].tokens.len()).or_default().push(i);
            }
            batches.extend(by_len.into_values());
        } else {
            batches.push(chunk.to_vec());
        }
    }
    batches
}

/// Train on an in-memory dataset. `quiet` suppresses the per-epoch line.
pub fn train_in_memory(
    cfg: &TrainConfig,
    train: &[GroundingSample],
    vocab: TokenVocabulary,
    anchors: AnchorSet,
    quiet: bool,
) -> Result<TrainResult> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut model = Model::new(model_cfg, vocab, anchors, cfg.seed)?;
    let mut opt = RmsProp::new(&model.params, cfg.optim.rmsprop_alpha, cfg.optim.rmsprop_eps);
    let mut curve = Vec::new();
    train_loop(cfg, train, &mut model, &mut opt, &mut curve, quiet, None)?;
    Ok(TrainResult {
        model,
        optimizer: opt,
        curve,
    })
}

/// The shared inner loop; optionally checkpoints after every epoch.
fn train_loop(
    cfg: &TrainConfig,
    train: &[GroundingSample],
    model: &mut Model,
    opt: &mut RmsProp,
    curve: &mut Vec<LossRecord>,
    quiet: bool,
    ckpt_path: Option<&PathBuf>,
) -> Result<()> {
    let n_use = if cfg.optim.max_train_samples > 0 {
        cfg.optim.max_train_samples.min(train.len())
    } else {
        train.len()
    };
    if n_use == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..n_use).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6E64);
    let mut step: u64 = 0;

    'epochs: for epoch in 0..cfg.optim.epochs {
        let lr = cfg.optim.lr_at_epoch(epoch);
        let batches = epoch_batches(
            &mut order,
            &mut rng,
            cfg.optim.batch_size,
            train,
            model.cfg.strategy,
        );
        let mut epoch_loss = 0.0;
        let mut epoch_batches_n = 0usize;
        for batch_idx in batches {
            let samples: Vec<&GroundingSample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let ids: Vec<Vec<usize>> = samples
                .iter()
                .map(|s| model.vocab.encode(&s.tokens))
                .collect::<Result<_>>()?;
            let images = Model::images_tensor(&samples);
            let out = model.forward_batch(images, &ids, Mode::Train)?;
            let assignments: Vec<TargetAssignment> = samples
                .iter()
                .map(|s| assignment_for(model, s))
                .collect::<Result<_>>()?;
            let loss = build_loss(
                &out.tape,
                out.raw,
                &assignments,
                out.alphas.as_deref(),
                cfg.optim.lambda,
                cfg.optim.regression,
            );
            let record = LossRecord {
                step,
                epoch,
                lr,
                total: scalar_value(&out.tape.value(loss.total)),
                ce: scalar_value(&out.tape.value(loss.ce)),
                reg: scalar_value(&out.tape.value(loss.reg)),
                div: scalar_value(&out.tape.value(loss.div)),
                cover: scalar_value(&out.tape.value(loss.cover)),
            };
            if !record.total.is_finite() {
                let dump = serde_json::json!({
                    "step": step,
                    "epoch": epoch,
                    "samples": samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
                    "components": {
                        "total": record.total, "ce": record.ce, "reg": record.reg,
                        "div": record.div, "cover": record.cover,
                    },
                });
                let _ = std::fs::create_dir_all(&cfg.out_dir);
                let path = cfg.out_dir.join("nan_dump.json");
                let _ = std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap());
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step}; batch dumped to {}",
                    path.display()
                )));
            }
            let mut grads = out.tape.backward(loss.total);
            opt.step(&mut model.params, &out.bound, &mut grads, lr);
            out.updates.apply(&mut model.params);
            epoch_loss += record.total;
            epoch_batches_n += 1;
            curve.push(record);
            step += 1;
            if cfg.optim.max_steps > 0 && step >= cfg.optim.max_steps as u64 {
                break 'epochs;
            }
        }
        if !quiet {
            eprintln!(
                "epoch {epoch:>3}  lr {lr:.2e}  mean loss {:.4}",
                epoch_loss / epoch_batches_n.max(1) as f64
            );
        }
        if let Some(path) = ckpt_path {
            save_checkpoint(path, model, Some(opt), epoch)?;
        }
    }
    Ok(())
}

pub struct TrainOutput {
    pub result: TrainResult,
    pub ckpt_path: PathBuf,
    pub curve_path: PathBuf,
}

/// Disk-facing entry point: reads the dataset and vocabulary, fits anchors
/// on the training boxes, trains, writing a checkpoint after every epoch and
/// the loss curve at the end.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    let train_samples = read_dataset(&manifest_path(&cfg.data_dir, "train"))?;
    let vocab = TokenVocabulary::load(&cfg.data_dir.join("vocab.txt"))?;
    let anchors = anchors_from_samples(&train_samples, cfg.anchor_seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = cfg.out_dir.join("checkpoint.json");
    let curve_path = cfg.out_dir.join("loss_curve.json");

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut model = Model::new(model_cfg, vocab, anchors, cfg.seed)?;
    let mut opt = RmsProp::new(&model.params, cfg.optim.rmsprop_alpha, cfg.optim.rmsprop_eps);
    let mut curve = Vec::new();
    train_loop(cfg, &train_samples, &mut model, &mut opt, &mut curve, false, Some(&ckpt_path))?;
    std::fs::write(
        &curve_path,
        serde_json::to_string(&curve).map_err(|e| Error::Integrity(e.to_string()))?,
    )?;
    Ok(TrainOutput {
        result: TrainResult {
            model,
            optimizer: opt,
            curve,
        },
        ckpt_path,
        curve_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_split, DatasetSpec, GenConfig};
    use crate::model::ModelConfig;

    fn tiny_dataset(n: usize) -> Vec<GroundingSample> {
        let spec = DatasetSpec {
            train: n,
            val: 0,
            test: 0,
            seed: 21,
            gen: GenConfig::default(),
        };
        build_split("train", n, &spec).unwrap()
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.model = ModelConfig::tiny();
        cfg.model.image_size = 64;
        cfg.optim.epochs = 1;
        cfg.optim.max_steps = 4;
        cfg.optim.batch_size = 4;
        cfg
    }

    #[test]
    fn same_seed_identical_loss_curves() {
        let data = tiny_dataset(16);
        let vocab = TokenVocabulary::closed();
        let anchors = anchors_from_samples(&data, 0).unwrap();
        let a = train_in_memory(&tiny_cfg(5), &data, vocab.clone(), anchors.clone(), true).unwrap();
        let b = train_in_memory(&tiny_cfg(5), &data, vocab, anchors, true).unwrap();
        assert_eq!(a.curve.len(), b.curve.len());
        for (ra, rb) in a.curve.iter().zip(&b.curve) {
            assert_eq!(ra.total, rb.total, "bitwise-identical loss curves");
        }
    }

    #[test]
    fn loss_decreases_on_tiny_overfit() {
        let data = tiny_dataset(12);
        let vocab = TokenVocabulary::closed();
        let anchors = anchors_from_samples(&data, 0).unwrap();
        let mut cfg = tiny_cfg(1);
        cfg.optim.epochs = 30;
        cfg.optim.max_steps = 60;
        cfg.optim.batch_size = 8;
        cfg.optim.lr = 1e-3;
        let r = train_in_memory(&cfg, &data, vocab, anchors, true).unwrap();
        let first = r.curve.first().unwrap().total;
        let last = r.curve.last().unwrap().total;
        assert!(
            last < first,
            "loss should drop on a tiny subset: {first} -> {last}"
        );
    }

    #[test]
    fn lambda_zero_still_reports_regularizers() {
        let data = tiny_dataset(12);
        let vocab = TokenVocabulary::closed();
        let anchors = anchors_from_samples(&data, 0).unwrap();
        let mut cfg = tiny_cfg(2);
        cfg.optim.lambda = 0.0;
        let r = train_in_memory(&cfg, &data, vocab, anchors, true).unwrap();
        let rec = &r.curve[0];
        assert!(rec.cover >= 0.0);
        assert!(
            (rec.total - (rec.ce + rec.reg)).abs() < 1e-12,
            "optimized total excludes regularizers at lambda = 0"
        );
    }
}
