//! Recursive sub-query construction.
//!
//! Each round k builds a soft selection over the query words and uses it to
//! refine the text-conditional visual feature map:
//!
//! 1. pool the current map to a channel vector,
//! 2. score every word from (history-scaled) word/visual interactions and
//!    softmax over the words,
//! 3. pool the attended words into a sub-query embedding,
//! 4. project the embedding to channel-wise scale/shift vectors in (-1, 1),
//! 5. modulate the map through two learnable spatial maps with a residual.
//!
//! The history vector tracks attention mass already spent, and two
//! regularizers push rounds to pick different words (diversity) and to
//! jointly use all words (coverage).

use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::layers::{BatchNorm2d, Conv2d, Init, InstanceNorm2d, Linear, Mode};
use crate::tensor::params::{Bound, BufferUpdates, PId, ParamStore};
use crate::tensor::{Arr, Tape, Var};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// plain-value operations (shared by evaluation/reporting and by tests)
// ---------------------------------------------------------------------------

/// h = 1 - min(sum of previous score vectors, 1), elementwise. An empty
/// history is all ones. Length mismatches are contract errors.
pub fn compute_history(previous: &[Array1<f64>]) -> Result<Array1<f64>> {
    let Some(first) = previous.first() else {
        return Err(Error::Contract(
            "compute_history needs the word count; use ones(n) for round 1".into(),
        ));
    };
    let n = first.len();
    let mut sum = Array1::<f64>::zeros(n);
    for a in previous {
        if a.len() != n {
            return Err(Error::Contract(format!(
                "attention length {} != {}",
                a.len(),
                n
            )));
        }
        sum += a;
    }
    Ok(sum.mapv(|v| 1.0 - v.min(1.0)))
}

/// Diversity penalty: squared Frobenius norm of the off-diagonal of the
/// K x K Gram matrix of the N x K attention matrix.
pub fn reg_diversity(a: &Array2<f64>) -> f64 {
    let gram = a.t().dot(a);
    let k = gram.nrows();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                acc += gram[[i, j]] * gram[[i, j]];
            }
        }
    }
    acc
}

/// Coverage penalty: L1 norm of 1 - min(row sums over rounds, 1).
pub fn reg_coverage(a: &Array2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|row| 1.0 - row.sum().min(1.0))
        .sum()
}

/// Channel-wise arithmetic mean over all spatial locations of a (C, H, W) map.
pub fn pool_visual(v: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = v.dim();
    let mut out = Array1::<f64>::zeros(c);
    for ci in 0..c {
        out[ci] = v.index_axis(ndarray::Axis(0), ci).sum() / (h * w) as f64;
    }
    out
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Two-layer word scorer of Eq-1 shape: C -> hidden -> 1.
pub struct AttentionParams {
    pub w0: PId,
    pub b0: PId,
    pub w1: PId,
    pub b1: PId,
}

impl AttentionParams {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, c: usize, hidden: usize) -> Self {
        AttentionParams {
            w0: ps.register(
                &format!("{name}.w0"),
                crate::tensor::layers::xavier_uniform(rng, &[c, hidden], c, hidden),
            ),
            b0: ps.register(&format!("{name}.b0"), Arr::zeros(IxDyn(&[hidden]))),
            w1: ps.register(
                &format!("{name}.w1"),
                crate::tensor::layers::xavier_uniform(rng, &[hidden, 1], hidden, 1),
            ),
            b1: ps.register(&format!("{name}.b1"), Arr::zeros(IxDyn(&[1]))),
        }
    }
}

/// Learnable spatial map used inside the modulation. `Identity` exists for
/// the contract tests that pin the modulation arithmetic itself.
pub enum SpatialMap {
    Identity,
    /// 1x1 convolution + instance normalization (the pre-modulation map).
    ConvInstanceNorm { conv: Conv2d, norm: InstanceNorm2d },
    /// 3x3 convolution + batch normalization + rectifier (the post-residual map).
    ConvBatchNormRelu { conv: Conv2d, bn: BatchNorm2d },
}

impl SpatialMap {
    pub fn f1<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        SpatialMap::ConvInstanceNorm {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), c, c, 1, 1, 0, false),
            norm: InstanceNorm2d::new(),
        }
    }

    pub fn f2<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        SpatialMap::ConvBatchNormRelu {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), c, c, 3, 1, 1, false),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), c),
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        params: &ParamStore,
        x: Var,
        mode: Mode,
        updates: &mut BufferUpdates,
    ) -> Var {
        match self {
            SpatialMap::Identity => x,
            SpatialMap::ConvInstanceNorm { conv, norm } => {
                norm.forward(tape, conv.forward(tape, bound, x))
            }
            SpatialMap::ConvBatchNormRelu { conv, bn } => {
                let y = conv.forward(tape, bound, x);
                let y = bn.forward(tape, bound, params, y, mode, updates);
                tape.relu(y)
            }
        }
    }
}

/// Everything one round owns. Rounds are independent by default; weight
/// sharing reuses the same `RoundParams` for every round.
pub struct RoundParams {
    pub attention: AttentionParams,
    pub gamma: Linear,
    pub beta: Linear,
    pub f1: SpatialMap,
    pub f2: SpatialMap,
}

impl RoundParams {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, c: usize, hidden: usize) -> Self {
        RoundParams {
            attention: AttentionParams::new(ps, rng, &format!("{name}.attn"), c, hidden),
            gamma: Linear::new(ps, rng, &format!("{name}.gamma"), c, c, true, Init::XavierUniform),
            beta: Linear::new(ps, rng, &format!("{name}.beta"), c, c, true, Init::XavierUniform),
            f1: SpatialMap::f1(ps, rng, &format!("{name}.f1"), c),
            f2: SpatialMap::f2(ps, rng, &format!("{name}.f2"), c),
        }
    }

    /// Identity spatial maps, zero modulation projections: modulate() becomes
    /// the bare scale/shift/rectify/residual arithmetic. Test configuration.
    pub fn identity_for_test(ps: &mut ParamStore, name: &str, c: usize, hidden: usize) -> Self {
        let mut zero_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut p = RoundParams {
            attention: AttentionParams::new(ps, &mut zero_rng, &format!("{name}.attn"), c, hidden),
            gamma: Linear::new(ps, &mut zero_rng, &format!("{name}.gamma"), c, c, true, Init::XavierUniform),
            beta: Linear::new(ps, &mut zero_rng, &format!("{name}.beta"), c, c, true, Init::XavierUniform),
            f1: SpatialMap::Identity,
            f2: SpatialMap::Identity,
        };
        for id in [p.attention.w0, p.attention.b0, p.attention.w1, p.attention.b1, p.gamma.w, p.beta.w] {
            ps.value_mut(id).fill(0.0);
        }
        p.f1 = SpatialMap::Identity;
        p.f2 = SpatialMap::Identity;
        p
    }
}

// ---------------------------------------------------------------------------
// tape operations
// ---------------------------------------------------------------------------

/// History as a tape node: 1 - min(sum of previous alphas, 1); all ones for
/// the first round. Gradients flow into the earlier score vectors.
pub fn history_var(tape: &Tape, previous: &[Var], n: usize) -> Var {
    if previous.is_empty() {
        return tape.constant(Arr::from_elem(IxDyn(&[n]), 1.0));
    }
    let mut sum = previous[0];
    for &a in &previous[1..] {
        sum = tape.add(sum, a);
    }
    tape.one_minus(tape.clamp_max(sum, 1.0))
}

/// Eq-1 word scores: softmax_n[ w1 . tanh(W0 (h_n (v_bar ⊙ s_n)) + b0) + b1 ].
/// The scalar h_n scales the C-vector (v_bar ⊙ s_n); softmax runs over the
/// N live positions only (padding was never admitted).
pub fn subquery_attention(
    tape: &Tape,
    bound: &Bound,
    s: Var,
    v_bar: Var,
    h: Var,
    attn: &AttentionParams,
) -> Var {
    let x = tape.rows_mul_vec(s, v_bar);
    let x = tape.scale_rows(x, h);
    scores_softmax(tape, bound, x, attn)
}

/// The same scorer with the visual and history inputs removed: plain
/// text-only self attention over the word features.
pub fn text_only_attention(tape: &Tape, bound: &Bound, s: Var, attn: &AttentionParams) -> Var {
    scores_softmax(tape, bound, s, attn)
}

fn scores_softmax(tape: &Tape, bound: &Bound, x: Var, attn: &AttentionParams) -> Var {
    let z = tape.matmul(x, bound.var(attn.w0));
    let z = tape.rows_add_vec(z, bound.var(attn.b0));
    let z = tape.tanh(z);
    let sc = tape.matmul(z, bound.var(attn.w1));
    let sc = tape.rows_add_vec(sc, bound.var(attn.b1));
    let n = tape.shape(sc)[0];
    let flat = tape.reshape(sc, &[n]);
    tape.softmax_vec(flat)
}

/// q = sum_n alpha_n s_n.
pub fn subquery_embed(tape: &Tape, s: Var, alpha: Var) -> Var {
    let n = tape.shape(alpha)[0];
    let row = tape.reshape(alpha, &[1, n]);
    let q = tape.matmul(row, s);
    let c = tape.shape(q)[1];
    tape.reshape(q, &[c])
}

/// gamma = tanh(W_g q + b_g), beta = tanh(W_b q + b_b); both strictly inside
/// (-1, 1) for finite inputs.
pub fn modulation_params(tape: &Tape, bound: &Bound, q: Var, round: &RoundParams) -> (Var, Var) {
    let c = tape.shape(q)[0];
    let q2 = tape.reshape(q, &[1, c]);
    let g = tape.tanh(round.gamma.forward(tape, bound, q2));
    let b = tape.tanh(round.beta.forward(tape, bound, q2));
    (tape.reshape(g, &[c]), tape.reshape(b, &[c]))
}

/// v_k = f2( relu( f1(v_prev) ⊙ gamma + beta ) + v_prev ) with gamma/beta of
/// shape (B, C) shared across all spatial locations.
#[allow(clippy::too_many_arguments)]
pub fn modulate(
    tape: &Tape,
    bound: &Bound,
    params: &ParamStore,
    v_prev: Var,
    gammas: Var,
    betas: Var,
    round: &RoundParams,
    mode: Mode,
    updates: &mut BufferUpdates,
) -> Var {
    let m = round.f1.forward(tape, bound, params, v_prev, mode, updates);
    let m = tape.bc_mul(m, gammas);
    let m = tape.bc_add(m, betas);
    let m = tape.relu(m);
    let m = tape.add(m, v_prev);
    round.f2.forward(tape, bound, params, m, mode, updates)
}

/// Per-round tape handles produced by [`run_rounds`].
pub struct RoundVars {
    /// alphas[k][b]: score vector over sample b's words at round k.
    pub alphas: Vec<Vec<Var>>,
    pub histories: Vec<Vec<Var>>,
    pub qs: Vec<Vec<Var>>,
    /// Per-round (B, C) modulation matrices.
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
    /// Intermediate maps v^(1..=K), each (B, C, H, W).
    pub vs: Vec<Var>,
}

/// The recursive orchestration for a batch: for k = 1..=K, pool the map,
/// score words per sample against pooled state and history, embed, project
/// to modulation vectors, modulate. Returns v^(K) and the full trace.
pub fn run_rounds(
    tape: &Tape,
    bound: &Bound,
    params: &ParamStore,
    s_per_sample: &[Var],
    v0: Var,
    rounds: &[&RoundParams],
    mode: Mode,
    updates: &mut BufferUpdates,
) -> (Var, RoundVars) {
    let bsz = s_per_sample.len();
    let mut trace = RoundVars {
        alphas: Vec::new(),
        histories: Vec::new(),
        qs: Vec::new(),
        gammas: Vec::new(),
        betas: Vec::new(),
        vs: Vec::new(),
    };
    let mut v = v0;
    for (k, round) in rounds.iter().enumerate() {
        let pooled = tape.mean_hw(v); // (B, C)
        let mut alphas_k = Vec::with_capacity(bsz);
        let mut hist_k = Vec::with_capacity(bsz);
        let mut gamma_rows = Vec::with_capacity(bsz);
        let mut beta_rows = Vec::with_capacity(bsz);
        let mut qs_k = Vec::with_capacity(bsz);
        for (b, &s) in s_per_sample.iter().enumerate() {
            let n = tape.shape(s)[0];
            let v_bar = tape.slice_row(pooled, b);
            let prev: Vec<Var> = (0..k).map(|i| trace.alphas[i][b]).collect();
            let h = history_var(tape, &prev, n);
            let alpha = subquery_attention(tape, bound, s, v_bar, h, &round.attention);
            let q = subquery_embed(tape, s, alpha);
            let (g, be) = modulation_params(tape, bound, q, round);
            alphas_k.push(alpha);
            hist_k.push(h);
            qs_k.push(q);
            gamma_rows.push(g);
            beta_rows.push(be);
        }
        let gammas = tape.stack_rows(&gamma_rows);
        let betas = tape.stack_rows(&beta_rows);
        v = modulate(tape, bound, params, v, gammas, betas, round, mode, updates);
        trace.alphas.push(alphas_k);
        trace.histories.push(hist_k);
        trace.qs.push(qs_k);
        trace.gammas.push(gammas);
        trace.betas.push(betas);
        trace.vs.push(v);
    }
    (v, trace)
}

/// Regularizer tape nodes for one sample's K score vectors.
/// Returns (diversity, coverage).
pub fn regularizers_var(tape: &Tape, alphas: &[Var]) -> (Var, Var) {
    let k = alphas.len();
    let a = tape.stack_rows(alphas); // (K, N), row k = alpha^(k)
    let at = tape.permute(a, &[1, 0]);
    let gram = tape.matmul(a, at); // (K, K) = A^T A in the N x K convention
    let mut mask = Arr::from_elem(IxDyn(&[k, k]), 1.0);
    for i in 0..k {
        mask[[i, i]] = 0.0;
    }
    let mask = tape.constant(mask);
    let off = tape.mul(gram, mask);
    let div = tape.sum_all(tape.mul(off, off));
    let colsum = tape.sum_rows(a); // [N]: total attention per word
    let cover = tape.sum_all(tape.one_minus(tape.clamp_max(colsum, 1.0)));
    (div, cover)
}

// ---------------------------------------------------------------------------
// query-modeling strategies (the ablation axis)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    /// Full recursive construction (the proposed method).
    Recursive,
    /// q = row mean of S, duplicated every round; no score vectors.
    AverageVector,
    /// One word per round: K = N, q^(k) = s_k, shared round parameters.
    PerWord,
    /// One text-only attention, its embedding duplicated every round.
    SingleHead,
    /// K independent text-only attentions.
    MultiHead,
}

impl QueryStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recursive" => Ok(QueryStrategy::Recursive),
            "average_vector" => Ok(QueryStrategy::AverageVector),
            "per_word" => Ok(QueryStrategy::PerWord),
            "single_head" => Ok(QueryStrategy::SingleHead),
            "multi_head" => Ok(QueryStrategy::MultiHead),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            QueryStrategy::Recursive => "recursive",
            QueryStrategy::AverageVector => "average_vector",
            QueryStrategy::PerWord => "per_word",
            QueryStrategy::SingleHead => "single_head",
            QueryStrategy::MultiHead => "multi_head",
        }
    }
}

/// Row mean of S as a sub-query embedding.
pub fn average_embed(tape: &Tape, s: Var) -> Var {
    let n = tape.shape(s)[0];
    let ones = tape.constant(Arr::from_elem(IxDyn(&[1, n]), 1.0 / n as f64));
    let q = tape.matmul(ones, s);
    let c = tape.shape(q)[1];
    tape.reshape(q, &[c])
}

/// The K sub-query embeddings each strategy produces for a single sample,
/// plus score vectors where the strategy defines them. `rounds` supplies the
/// per-round attention parameters (text-only strategies ignore the
/// visual/history inputs); `v0` is only consulted by the recursive strategy.
#[allow(clippy::too_many_arguments)]
pub fn variant_subqueries(
    tape: &Tape,
    bound: &Bound,
    params: &ParamStore,
    strategy: QueryStrategy,
    s: Var,
    v0: Var,
    rounds: &[&RoundParams],
    mode: Mode,
    updates: &mut BufferUpdates,
) -> (Vec<Var>, Option<Vec<Var>>) {
    let k = rounds.len();
    let n = tape.shape(s)[0];
    match strategy {
        QueryStrategy::AverageVector => {
            let q = average_embed(tape, s);
            (vec![q; k], None)
        }
        QueryStrategy::PerWord => {
            let qs = (0..n).map(|i| tape.slice_row(s, i)).collect();
            let alphas = (0..n)
                .map(|i| {
                    let mut a = Arr::zeros(IxDyn(&[n]));
                    a[i] = 1.0;
                    tape.constant(a)
                })
                .collect();
            (qs, Some(alphas))
        }
        QueryStrategy::SingleHead => {
            let alpha = text_only_attention(tape, bound, s, &rounds[0].attention);
            let q = subquery_embed(tape, s, alpha);
            (vec![q; k], Some(vec![alpha]))
        }
        QueryStrategy::MultiHead => {
            let mut qs = Vec::with_capacity(k);
            let mut alphas = Vec::with_capacity(k);
            for round in rounds {
                let alpha = text_only_attention(tape, bound, s, &round.attention);
                qs.push(subquery_embed(tape, s, alpha));
                alphas.push(alpha);
            }
            (qs, Some(alphas))
        }
        QueryStrategy::Recursive => {
            let (_, trace) = run_rounds(tape, bound, params, &[s], v0, rounds, mode, updates);
            let qs = trace.qs.iter().map(|per_b| per_b[0]).collect();
            let alphas = trace.alphas.iter().map(|per_b| per_b[0]).collect();
            (qs, Some(alphas))
        }
    }
}
