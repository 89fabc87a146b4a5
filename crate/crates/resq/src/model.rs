//! Full grounding model: encoders, K sub-query rounds, optional ConvLSTM
//! aggregation, and the anchor head, assembled over one parameter store.

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::GroundingSample;
use crate::encoders::{TextEncoder, TokenVocabulary, VisualEncoder};
use crate::grounding::{AnchorSet, ConvLstm, GroundingHead, Prediction};
use crate::subquery::{
    average_embed, modulate, modulation_params, run_rounds, subquery_embed, text_only_attention,
    QueryStrategy, RoundParams,
};
use crate::tensor::layers::Mode;
use crate::tensor::params::{Bound, BufferUpdates, ParamStore};
use crate::tensor::{Arr, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared feature dimension C.
    pub c: usize,
    /// Backbone output channels before the coordinate concat.
    pub c_raw: usize,
    /// Word embedding dimension.
    pub emb: usize,
    /// Attention scorer hidden width; 0 means C/2.
    pub attn_hidden: usize,
    /// Number of reasoning rounds K.
    pub k: usize,
    pub strategy: QueryStrategy,
    /// Reuse one parameter set across rounds instead of per-round sets.
    pub share_round_params: bool,
    /// Aggregate the round maps with a ConvLSTM before the head.
    pub convlstm: bool,
    /// Stride-2 backbone block widths; one stride-1 block to c_raw follows.
    pub backbone_channels: Vec<usize>,
    pub image_size: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c: 64,
            c_raw: 64,
            emb: 64,
            attn_hidden: 0,
            k: 3,
            strategy: QueryStrategy::Recursive,
            share_round_params: false,
            convlstm: false,
            backbone_channels: vec![16, 32, 64],
            image_size: 64,
            vocab_size: crate::datagen::WORDS.len(),
        }
    }
}

impl ModelConfig {
    pub fn attn_hidden_eff(&self) -> usize {
        if self.attn_hidden == 0 {
            (self.c / 2).max(1)
        } else {
            self.attn_hidden
        }
    }

    /// Small configuration for gradient checks and fast tests:
    /// C = 4, 16x16 images, 2x2 feature grid.
    pub fn tiny() -> Self {
        ModelConfig {
            c: 4,
            c_raw: 4,
            emb: 4,
            attn_hidden: 2,
            k: 2,
            strategy: QueryStrategy::Recursive,
            share_round_params: false,
            convlstm: false,
            backbone_channels: vec![4, 4, 4],
            image_size: 16,
            vocab_size: crate::datagen::WORDS.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.c == 0 || self.c_raw == 0 || self.emb == 0 {
            return Err(Error::Config("zero feature dimension".into()));
        }
        let stride = 1usize << self.backbone_channels.len();
        if self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by stride {stride}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardOut {
    pub tape: Tape,
    pub bound: Bound,
    pub updates: BufferUpdates,
    /// Head output, (B, 45, hf, wf).
    pub raw: Var,
    /// Intermediate maps v^(1..=K), each (B, C, hf, wf).
    pub round_maps: Vec<Var>,
    /// Score vectors per sample per round where the strategy defines them.
    pub alphas: Option<Vec<Vec<Var>>>,
    /// History vectors per sample per round (recursive strategy only).
    pub histories: Option<Vec<Vec<Var>>>,
    /// Sub-query embeddings per sample per round.
    pub qs: Vec<Vec<Var>>,
    /// Per-round (B, C) modulation matrices.
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: TokenVocabulary,
    pub anchors: AnchorSet,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub rounds: Vec<RoundParams>,
    pub head: GroundingHead,
    pub convlstm: Option<ConvLstm>,
}

impl Model {
    /// Deterministic initialization from a seed. Parameter registration
    /// order is fixed by the config, which keeps checkpoints stable.
    pub fn new(cfg: ModelConfig, vocab: TokenVocabulary, anchors: AnchorSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() != cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocab size {} does not match config {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let text = TextEncoder::new(&mut ps, &mut rng, cfg.vocab_size, cfg.emb, cfg.c);
        let visual = VisualEncoder::new(&mut ps, &mut rng, &cfg.backbone_channels, cfg.c_raw, cfg.c);
        let n_round_sets = if cfg.share_round_params || cfg.strategy == QueryStrategy::PerWord {
            1
        } else {
            cfg.k
        };
        let rounds: Vec<RoundParams> = (0..n_round_sets)
            .map(|k| RoundParams::new(&mut ps, &mut rng, &format!("round{k}"), cfg.c, cfg.attn_hidden_eff()))
            .collect();
        let head = GroundingHead::new(&mut ps, &mut rng, cfg.c);
        let convlstm = cfg.convlstm.then(|| ConvLstm::new(&mut ps, &mut rng, cfg.c));
        Ok(Model {
            cfg,
            vocab,
            anchors,
            params: ps,
            text,
            visual,
            rounds,
            head,
            convlstm,
        })
    }

    pub fn stride(&self) -> usize {
        self.visual.stride
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.cfg.image_size / self.visual.stride;
        (g, g)
    }

    fn round_refs(&self, k_eff: usize) -> Vec<&RoundParams> {
        (0..k_eff)
            .map(|i| {
                if self.rounds.len() == 1 {
                    &self.rounds[0]
                } else {
                    &self.rounds[i]
                }
            })
            .collect()
    }

    /// (B, 3, H, W) image tensor in [0, 1] from u8 rasters.
    pub fn images_tensor(samples: &[&GroundingSample]) -> Arr {
        let (h, w, _) = samples[0].image.dim();
        let mut out = Arr::zeros(IxDyn(&[samples.len(), 3, h, w]));
        for (b, s) in samples.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[[b, c, y, x]] = s.image[[y, x, c]] as f64 / 255.0;
                    }
                }
            }
        }
        out
    }

    /// Forward a batch given raw images and per-sample token indices.
    /// `Mode::Train` records gradients and batch-norm updates; `Mode::Eval`
    /// runs a value-only tape on frozen statistics.
    pub fn forward_batch(&self, images: Arr, ids: &[Vec<usize>], mode: Mode) -> Result<ForwardOut> {
        self.forward_batch_opts(images, ids, mode, mode == Mode::Train)
    }

    /// Forward with the normalization mode and gradient recording decoupled;
    /// the gradient checker evaluates train-mode losses on a value-only tape.
    pub fn forward_batch_opts(
        &self,
        images: Arr,
        ids: &[Vec<usize>],
        mode: Mode,
        record_grad: bool,
    ) -> Result<ForwardOut> {
        let tape = if record_grad {
            Tape::new()
        } else {
            Tape::no_grad()
        };
        let bound = self.params.bind(&tape);
        let mut updates = BufferUpdates::default();
        let images = tape.input(images);
        let v0 = self
            .visual
            .forward(&tape, &bound, &self.params, images, mode, &mut updates)?;
        let s_list: Vec<Var> = ids
            .iter()
            .map(|sample_ids| {
                if sample_ids.is_empty() {
                    return Err(Error::Contract("empty query".into()));
                }
                Ok(self.text.forward(&tape, &bound, sample_ids))
            })
            .collect::<Result<_>>()?;
        let bsz = s_list.len();

        let (round_maps, alphas, histories, qs, gammas, betas) = match self.cfg.strategy {
            QueryStrategy::Recursive => {
                let refs = self.round_refs(self.cfg.k);
                let (_vk, trace) =
                    run_rounds(&tape, &bound, &self.params, &s_list, v0, &refs, mode, &mut updates);
                // transpose round-major trace to sample-major where useful
                let alphas_sm: Vec<Vec<Var>> = (0..bsz)
                    .map(|b| (0..self.cfg.k).map(|k| trace.alphas[k][b]).collect())
                    .collect();
                let hist_sm: Vec<Vec<Var>> = (0..bsz)
                    .map(|b| (0..self.cfg.k).map(|k| trace.histories[k][b]).collect())
                    .collect();
                let qs_sm: Vec<Vec<Var>> = (0..bsz)
                    .map(|b| (0..self.cfg.k).map(|k| trace.qs[k][b]).collect())
                    .collect();
                (
                    trace.vs,
                    Some(alphas_sm),
                    Some(hist_sm),
                    qs_sm,
                    trace.gammas,
                    trace.betas,
                )
            }
            QueryStrategy::PerWord => {
                let n = ids[0].len();
                if ids.iter().any(|i| i.len() != n) {
                    return Err(Error::Contract(
                        "per_word strategy needs a batch of equal-length queries".into(),
                    ));
                }
                let qs_sm: Vec<Vec<Var>> = s_list
                    .iter()
                    .map(|&s| (0..n).map(|i| tape.slice_row(s, i)).collect())
                    .collect();
                let refs = self.round_refs(n);
                let (maps, g, be) =
                    self.modulation_rounds(&tape, &bound, v0, &qs_sm, &refs, mode, &mut updates);
                (maps, None, None, qs_sm, g, be)
            }
            QueryStrategy::AverageVector => {
                let qs_sm: Vec<Vec<Var>> = s_list
                    .iter()
                    .map(|&s| {
                        let q = average_embed(&tape, s);
                        vec![q; self.cfg.k]
                    })
                    .collect();
                let refs = self.round_refs(self.cfg.k);
                let (maps, g, be) =
                    self.modulation_rounds(&tape, &bound, v0, &qs_sm, &refs, mode, &mut updates);
                (maps, None, None, qs_sm, g, be)
            }
            QueryStrategy::SingleHead => {
                let refs = self.round_refs(self.cfg.k);
                let mut alphas_sm = Vec::with_capacity(bsz);
                let qs_sm: Vec<Vec<Var>> = s_list
                    .iter()
                    .map(|&s| {
                        let alpha = text_only_attention(&tape, &bound, s, &refs[0].attention);
                        alphas_sm.push(vec![alpha]);
                        let q = subquery_embed(&tape, s, alpha);
                        vec![q; self.cfg.k]
                    })
                    .collect();
                let (maps, g, be) =
                    self.modulation_rounds(&tape, &bound, v0, &qs_sm, &refs, mode, &mut updates);
                (maps, Some(alphas_sm), None, qs_sm, g, be)
            }
            QueryStrategy::MultiHead => {
                let refs = self.round_refs(self.cfg.k);
                let mut alphas_sm = Vec::with_capacity(bsz);
                let qs_sm: Vec<Vec<Var>> = s_list
                    .iter()
                    .map(|&s| {
                        let mut per_round_alpha = Vec::with_capacity(self.cfg.k);
                        let qs: Vec<Var> = refs
                            .iter()
                            .map(|r| {
                                let alpha = text_only_attention(&tape, &bound, s, &r.attention);
                                per_round_alpha.push(alpha);
                                subquery_embed(&tape, s, alpha)
                            })
                            .collect();
                        alphas_sm.push(per_round_alpha);
                        qs
                    })
                    .collect();
                let (maps, g, be) =
                    self.modulation_rounds(&tape, &bound, v0, &qs_sm, &refs, mode, &mut updates);
                (maps, Some(alphas_sm), None, qs_sm, g, be)
            }
        };

        let head_input = match (&self.convlstm, round_maps.last()) {
            (Some(lstm), _) => lstm.aggregate(&tape, &bound, &round_maps),
            (None, Some(&vk)) => vk,
            (None, None) => v0,
        };
        let raw = self.head.forward(&tape, &bound, head_input);
        Ok(ForwardOut {
            tape,
            bound,
            updates,
            raw,
            round_maps,
            alphas,
            histories,
            qs,
            gammas,
            betas,
        })
    }

    /// Shared modulation path for the non-recursive strategies: the round k
    /// sub-query embedding of every sample becomes that round's (B, C)
    /// scale/shift matrices.
    #[allow(clippy::too_many_arguments)]
    fn modulation_rounds(
        &self,
        tape: &Tape,
        bound: &Bound,
        v0: Var,
        qs_sm: &[Vec<Var>],
        refs: &[&RoundParams],
        mode: Mode,
        updates: &mut BufferUpdates,
    ) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
        let mut v = v0;
        let mut maps = Vec::with_capacity(refs.len());
        let mut gammas = Vec::with_capacity(refs.len());
        let mut betas = Vec::with_capacity(refs.len());
        for (k, round) in refs.iter().enumerate() {
            let mut g_rows = Vec::with_capacity(qs_sm.len());
            let mut b_rows = Vec::with_capacity(qs_sm.len());
            for qs in qs_sm {
                let (g, b) = modulation_params(tape, bound, qs[k], round);
                g_rows.push(g);
                b_rows.push(b);
            }
            let g = tape.stack_rows(&g_rows);
            let b = tape.stack_rows(&b_rows);
            v = modulate(tape, bound, &self.params, v, g, b, round, mode, updates);
            maps.push(v);
            gammas.push(g);
            betas.push(b);
        }
        (maps, gammas, betas)
    }

    /// Evaluation-mode predictions for a batch of samples.
    pub fn predict(&self, samples: &[&GroundingSample]) -> Result<Vec<Prediction>> {
        let ids: Vec<Vec<usize>> = samples
            .iter()
            .map(|s| self.vocab.encode(&s.tokens))
            .collect::<Result<_>>()?;
        let images = Self::images_tensor(samples);
        let out = self.forward_batch(images, &ids, Mode::Eval)?;
        let raw = out.tape.value(out.raw);
        let mut preds = Vec::with_capacity(samples.len());
        for b in 0..samples.len() {
            let view = raw
                .index_axis(ndarray::Axis(0), b)
                .into_dimensionality::<ndarray::Ix3>()
                .expect("(45, hf, wf) slice");
            preds.push(crate::grounding::select_prediction(
                &view,
                &self.anchors,
                self.stride(),
            ));
        }
        Ok(preds)
    }
}
