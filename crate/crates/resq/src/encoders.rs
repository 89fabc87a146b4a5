//! Query and image encoders.
//!
//! Both are small trainable stand-ins with the same interfaces a pretrained
//! sentence/image backbone would expose: tokens become per-word features
//! `S` of shared dimension C, images become the initial visual map `v0`
//! at 1/8 resolution with normalized coordinate channels mixed in.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, IxDyn};
use rand::Rng;

use crate::tensor::layers::{normal, BatchNorm2d, Conv2d, Init, Linear, Mode};
use crate::tensor::params::{Bound, BufferUpdates, ParamStore};
use crate::tensor::{Arr, Tape, Var};
use crate::{Error, Result};

/// Word -> dense index map with index 0 reserved for padding. Padding never
/// appears in an encoded query; variable-length queries are handled by
/// per-sample processing, not by pad positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenVocabulary {
    words: Vec<String>,
}

impl TokenVocabulary {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let words: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        if words.first().map(String::as_str) != Some(crate::datagen::PAD_WORD) {
            return Err(Error::Config(format!(
                "vocabulary must reserve index 0 for {:?}",
                crate::datagen::PAD_WORD
            )));
        }
        Ok(TokenVocabulary { words })
    }

    /// The closed shape-world vocabulary.
    pub fn closed() -> Self {
        TokenVocabulary {
            words: crate::datagen::WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Token indices for a query; the padding word and anything outside the
    /// vocabulary are encoding errors.
    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| match self.index_of(t) {
                Some(0) | None => Err(Error::UnknownToken { token: t.clone() }),
                Some(i) => Ok(i),
            })
            .collect()
    }

    /// One word per line, line number = index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for w in &self.words {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Self::from_words(&words)
    }
}

/// Embedding table followed by two affine layers with a rectifier between.
/// No positional encoding: the map is per-word, so permuting tokens permutes
/// the rows of S exactly.
pub struct TextEncoder {
    pub emb: crate::tensor::params::PId,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        vocab_size: usize,
        emb_dim: usize,
        c: usize,
    ) -> Self {
        let emb = ps.register("text.emb", normal(rng, &[vocab_size, emb_dim], 1.0));
        let fc1 = Linear::new(ps, rng, "text.fc1", emb_dim, c, true, Init::HeNormal);
        let fc2 = Linear::new(ps, rng, "text.fc2", c, c, true, Init::XavierUniform);
        TextEncoder { emb, fc1, fc2 }
    }

    /// Per-word features S: (N, C) for one query.
    pub fn forward(&self, tape: &Tape, bound: &Bound, ids: &[usize]) -> Var {
        let e = tape.gather_rows(bound.var(self.emb), ids);
        let h = tape.relu(self.fc1.forward(tape, bound, e));
        self.fc2.forward(tape, bound, h)
    }
}

/// Normalized coordinate channels for an (hf, wf) grid: x/y of the cell
/// center, the cell's left/top/right/bottom edges, and the constant cell
/// extents 1/wf, 1/hf. Eight channels, (8, hf, wf).
pub fn coord_features(hf: usize, wf: usize) -> Array3<f64> {
    let mut m = Array3::<f64>::zeros((8, hf, wf));
    for i in 0..hf {
        for j in 0..wf {
            m[[0, i, j]] = (j as f64 + 0.5) / wf as f64;
            m[[1, i, j]] = (i as f64 + 0.5) / hf as f64;
            m[[2, i, j]] = j as f64 / wf as f64;
            m[[3, i, j]] = i as f64 / hf as f64;
            m[[4, i, j]] = (j as f64 + 1.0) / wf as f64;
            m[[5, i, j]] = (i as f64 + 1.0) / hf as f64;
            m[[6, i, j]] = 1.0 / wf as f64;
            m[[7, i, j]] = 1.0 / hf as f64;
        }
    }
    m
}

pub const COORD_CHANNELS: usize = 8;

struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Strided convolutional backbone producing the initial text-conditional
/// visual feature. Three stride-2 blocks and one stride-1 block give total
/// stride 8; coordinate channels are appended before the 1x1 projection.
pub struct VisualEncoder {
    blocks: Vec<ConvBlock>,
    proj: Conv2d,
    proj_bn: BatchNorm2d,
    pub stride: usize,
    pub c_out: usize,
}

impl VisualEncoder {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        backbone_channels: &[usize],
        c_raw: usize,
        c: usize,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut cin = 3usize;
        for (k, &cout) in backbone_channels.iter().enumerate() {
            let conv = Conv2d::new(ps, rng, &format!("visual.block{k}.conv"), cin, cout, 3, 2, 1, false);
            let bn = BatchNorm2d::new(ps, &format!("visual.block{k}.bn"), cout);
            blocks.push(ConvBlock { conv, bn });
            cin = cout;
        }
        let k = backbone_channels.len();
        let conv = Conv2d::new(ps, rng, &format!("visual.block{k}.conv"), cin, c_raw, 3, 1, 1, false);
        let bn = BatchNorm2d::new(ps, &format!("visual.block{k}.bn"), c_raw);
        blocks.push(ConvBlock { conv, bn });

        let proj = Conv2d::new(ps, rng, "visual.proj", c_raw + COORD_CHANNELS, c, 1, 1, 0, false);
        let proj_bn = BatchNorm2d::new(ps, "visual.proj_bn", c);
        VisualEncoder {
            blocks,
            proj,
            proj_bn,
            stride: 1 << backbone_channels.len(),
            c_out: c,
        }
    }

    /// images: (B, 3, H, W) in [0,1] -> v0: (B, C, H/stride, W/stride).
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        params: &ParamStore,
        images: Var,
        mode: Mode,
        updates: &mut BufferUpdates,
    ) -> Result<Var> {
        let sh = tape.shape(images);
        let (b, h, w) = (sh[0], sh[2], sh[3]);
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by total stride {}",
                self.stride
            )));
        }
        let mut x = images;
        for blk in &self.blocks {
            x = blk.conv.forward(tape, bound, x);
            x = blk.bn.forward(tape, bound, params, x, mode, updates);
            x = tape.relu(x);
        }
        let (hf, wf) = (h / self.stride, w / self.stride);
        let coords = coord_features(hf, wf);
        let mut batched = Arr::zeros(IxDyn(&[b, COORD_CHANNELS, hf, wf]));
        for bi in 0..b {
            batched
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&coords);
        }
        let coords_var = tape.constant(batched);
        let x = tape.concat_channels(x, coords_var);
        let x = self.proj.forward(tape, bound, x);
        let x = self.proj_bn.forward(tape, bound, params, x, mode, updates);
        Ok(tape.relu(x))
    }
}
