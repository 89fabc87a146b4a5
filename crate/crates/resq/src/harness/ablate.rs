//! Ablation sweeps: train each (variant, seed) pair, evaluate on the test
//! split, and aggregate per-variant seed statistics. Individual run failures
//! are recorded without aborting the sweep.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{manifest_path, read_dataset, GroundingSample};
use crate::encoders::TokenVocabulary;
use crate::grounding::AnchorSet;
use crate::subquery::QueryStrategy;
use crate::{Error, Result};

use super::config::TrainConfig;
use super::eval::{evaluate, EvalReport};
use super::train::{anchors_from_samples, train_in_memory, TrainResult};

/// Everything a sweep run needs, loaded once and shared.
pub struct DataBundle {
    pub train: Vec<GroundingSample>,
    pub test: Vec<GroundingSample>,
    pub vocab: TokenVocabulary,
    pub anchors: AnchorSet,
}

impl DataBundle {
    pub fn load(data_dir: &Path, anchor_seed: u64) -> Result<Self> {
        let train = read_dataset(&manifest_path(data_dir, "train"))?;
        let test = read_dataset(&manifest_path(data_dir, "test"))?;
        let vocab = TokenVocabulary::load(&data_dir.join("vocab.txt"))?;
        let anchors = anchors_from_samples(&train, anchor_seed)?;
        Ok(DataBundle {
            train,
            test,
            vocab,
            anchors,
        })
    }
}

/// One sweep axis: overrides applied on top of the base configuration.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepVariant {
    pub name: String,
    pub k: Option<usize>,
    pub strategy: Option<String>,
    pub lambda: Option<f64>,
    pub convlstm: Option<bool>,
    pub share_round_params: Option<bool>,
}

impl SweepVariant {
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        if let Some(k) = self.k {
            cfg.model.k = k;
        }
        if let Some(s) = &self.strategy {
            cfg.model.strategy = QueryStrategy::parse(s)?;
        }
        if let Some(l) = self.lambda {
            cfg.optim.lambda = l;
        }
        if let Some(c) = self.convlstm {
            cfg.model.convlstm = c;
        }
        if let Some(s) = self.share_round_params {
            cfg.model.share_round_params = s;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub variants: Vec<SweepVariant>,
    pub base: TrainConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            seeds: vec![0, 1, 2],
            variants: Vec::new(),
            base: TrainConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Train one configured run on the bundle and evaluate it on the test split.
pub fn run_one(cfg: &TrainConfig, data: &DataBundle) -> Result<(TrainResult, EvalReport)> {
    let result = train_in_memory(cfg, &data.train, data.vocab.clone(), data.anchors.clone(), true)?;
    let report = evaluate(&result.model, &data.test, None)?;
    Ok((result, report))
}

/// Run the full sweep. Runs execute in parallel across the rayon pool; each
/// run is internally single-threaded and seed-deterministic.
pub fn run_sweep(spec: &SweepSpec, data: &DataBundle) -> AblationTable {
    let jobs: Vec<(usize, u64, TrainConfig)> = spec
        .variants
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| {
            spec.seeds.iter().map(move |&seed| (vi, seed, v)).collect::<Vec<_>>()
        })
        .filter_map(|(vi, seed, v)| match v.apply(&spec.base) {
            Ok(mut cfg) => {
                cfg.seed = seed;
                Some((vi, seed, cfg))
            }
            Err(_) => None,
        })
        .collect();

    let results: Vec<(usize, u64, std::result::Result<f64, String>)> = jobs
        .par_iter()
        .map(|(vi, seed, cfg)| {
            let out = run_one(cfg, data)
                .map(|(_, report)| report.overall)
                .map_err(|e| e.to_string());
            (*vi, *seed, out)
        })
        .collect();

    let rows = spec
        .variants
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let mut seeds = Vec::new();
            let mut accs = Vec::new();
            let mut errors = Vec::new();
            for (rvi, seed, res) in &results {
                if *rvi != vi {
                    continue;
                }
                match res {
                    Ok(acc) => {
                        seeds.push(*seed);
                        accs.push(*acc);
                    }
                    Err(e) => errors.push(format!("seed {seed}: {e}")),
                }
            }
            let (mean, std) = mean_std(&accs);
            AblationRow {
                name: v.name.clone(),
                seeds,
                accuracies: accs,
                mean,
                std,
                errors,
            }
        })
        .collect();
    AblationTable { rows }
}
