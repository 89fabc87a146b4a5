//! Anchor-based grounding head: anchor selection, box coding, target
//! assignment, the prediction head, losses and the optional convolutional
//! LSTM aggregator over the round features.

use ndarray::{Array2, ArrayView3, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::subquery::regularizers_var;
use crate::tensor::layers::Conv2d;
use crate::tensor::params::{Bound, ParamStore};
use crate::tensor::{Arr, Tape, Var};
use crate::{Error, Result};

/// Corner-form box: (x_min, y_min, width, height) in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Box2D { x, y, w, h }
    }

    pub fn from_xywh(b: [f64; 4]) -> Self {
        Box2D::new(b[0], b[1], b[2], b[3])
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// Intersection over union of two corner-form boxes.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    inter / union
}

/// IoU of two co-centered boxes given as (w, h) pairs.
fn iou_co_centered(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    inter / union
}

pub const NUM_ANCHORS: usize = 9;
/// Channels per anchor: tx, ty, tw, th, confidence logit.
pub const BOX_VALS: usize = 5;
/// Exp-offset clamp keeping decode finite.
pub const SIZE_CLAMP: f64 = 8.0;

/// Nine (width, height) anchor priors sorted by area.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnchorSet(pub Vec<(f64, f64)>);

impl AnchorSet {
    pub fn get(&self, a: usize) -> (f64, f64) {
        self.0[a]
    }
}

/// K-means (k = 9) over (w, h) pairs under the 1 - IoU distance between
/// co-centered boxes; k-means++ seeding, mean centroid updates, deterministic
/// for a given seed. With fewer distinct sizes than clusters the distinct
/// sizes seed the run and remaining centroids repeat them.
pub fn compute_anchors(boxes: &[(f64, f64)], seed: u64) -> Result<AnchorSet> {
    if boxes.len() < NUM_ANCHORS {
        return Err(Error::DegenerateInput(format!(
            "need at least {NUM_ANCHORS} boxes, got {}",
            boxes.len()
        )));
    }
    if boxes.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0) {
        return Err(Error::DegenerateInput("non-positive box dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &b in boxes {
        if !distinct.iter().any(|&d| d == b) {
            distinct.push(b);
        }
    }

    // k-means++ over the distinct sizes, repeating when there are too few
    let mut centroids: Vec<(f64, f64)> = Vec::with_capacity(NUM_ANCHORS);
    centroids.push(distinct[rng.random_range(0..distinct.len())]);
    while centroids.len() < NUM_ANCHORS.min(distinct.len()) {
        let d2: Vec<f64> = distinct
            .iter()
            .map(|&b| {
                centroids
                    .iter()
                    .map(|&c| 1.0 - iou_co_centered(b, c))
                    .fold(f64::INFINITY, f64::min)
                    .powi(2)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = distinct.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if pick < w {
                chosen = i;
                break;
            }
            pick -= w;
        }
        centroids.push(distinct[chosen]);
    }
    while centroids.len() < NUM_ANCHORS {
        let i = centroids.len() % distinct.len();
        centroids.push(distinct[i]);
    }

    for _ in 0..100 {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); NUM_ANCHORS];
        for &b in boxes {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, &c) in centroids.iter().enumerate() {
                let d = 1.0 - iou_co_centered(b, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            sums[best].0 += b.0;
            sums[best].1 += b.1;
            sums[best].2 += 1;
        }
        let mut moved = 0.0f64;
        for (ci, &(sw, sh, n)) in sums.iter().enumerate() {
            if n == 0 {
                continue; // empty cluster keeps its centroid
            }
            let nw = sw / n as f64;
            let nh = sh / n as f64;
            moved += (nw - centroids[ci].0).abs() + (nh - centroids[ci].1).abs();
            centroids[ci] = (nw, nh);
        }
        if moved < 1e-9 {
            break;
        }
    }

    centroids.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    Ok(AnchorSet(centroids))
}

/// Decode raw offsets at grid cell (i, j) for one anchor into a pixel box:
/// center = ((j + sigma(tx)) * stride, (i + sigma(ty)) * stride),
/// size = anchor * exp(t) with t clamped to +-SIZE_CLAMP.
pub fn decode_box(t: [f64; 4], cell: (usize, usize), anchor: (f64, f64), stride: usize) -> Box2D {
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (i, j) = cell;
    let cx = (j as f64 + sigmoid(t[0])) * stride as f64;
    let cy = (i as f64 + sigmoid(t[1])) * stride as f64;
    let w = anchor.0 * t[2].clamp(-SIZE_CLAMP, SIZE_CLAMP).exp();
    let h = anchor.1 * t[3].clamp(-SIZE_CLAMP, SIZE_CLAMP).exp();
    Box2D::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Exact inverse of [`decode_box`] for a ground-truth box whose center lies
/// inside cell (i, j). Fractions snap away from the cell border by 1e-12
/// before the logit so boundary centers stay finite.
pub fn encode_target(
    gt: &Box2D,
    cell: (usize, usize),
    anchor: (f64, f64),
    stride: usize,
) -> Result<[f64; 4]> {
    let (cx, cy) = gt.center();
    let fx = cx / stride as f64 - cell.1 as f64;
    let fy = cy / stride as f64 - cell.0 as f64;
    if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&fy) {
        return Err(Error::Contract(format!(
            "gt center ({cx}, {cy}) not inside cell {cell:?} at stride {stride}"
        )));
    }
    let eps = 1e-12;
    let logit = |p: f64| {
        let p = p.clamp(eps, 1.0 - eps);
        (p / (1.0 - p)).ln()
    };
    Ok([
        logit(fx),
        logit(fy),
        (gt.w / anchor.0).ln().clamp(-SIZE_CLAMP, SIZE_CLAMP),
        (gt.h / anchor.1).ln().clamp(-SIZE_CLAMP, SIZE_CLAMP),
    ])
}

/// The single positive entry a sample contributes to the losses.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub cell: (usize, usize),
    pub anchor: usize,
    pub offsets: [f64; 4],
    /// Index into the flattened (i, j, a) confidence vector of length
    /// hf * wf * NUM_ANCHORS.
    pub flat_index: usize,
}

/// Cell = the cell containing the gt center (boundary centers go to the
/// floor cell); anchor = highest co-centered IoU, ties to the lowest index.
pub fn assign_anchor(
    gt: &Box2D,
    anchors: &AnchorSet,
    stride: usize,
    grid: (usize, usize),
) -> Result<TargetAssignment> {
    let (hf, wf) = grid;
    let (cx, cy) = gt.center();
    let j = ((cx / stride as f64).floor() as usize).min(wf - 1);
    let i = ((cy / stride as f64).floor() as usize).min(hf - 1);
    let mut best = 0usize;
    let mut best_iou = -1.0f64;
    for (a, &wh) in anchors.0.iter().enumerate() {
        let v = iou_co_centered((gt.w, gt.h), wh);
        if v > best_iou {
            best_iou = v;
            best = a;
        }
    }
    let offsets = encode_target(gt, (i, j), anchors.get(best), stride)?;
    Ok(TargetAssignment {
        cell: (i, j),
        anchor: best,
        offsets,
        flat_index: (i * wf + j) * NUM_ANCHORS + best,
    })
}

/// Two 1x1 convolutions with a rectifier between, emitting
/// NUM_ANCHORS * BOX_VALS channels per cell; channel a*5+v holds value v of
/// anchor a.
pub struct GroundingHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl GroundingHead {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, c: usize) -> Self {
        GroundingHead {
            conv1: Conv2d::new(ps, rng, "head.conv1", c, c, 1, 1, 0, true),
            conv2: Conv2d::new(ps, rng, "head.conv2", c, NUM_ANCHORS * BOX_VALS, 1, 1, 0, true),
        }
    }

    /// (B, C, H, W) -> raw (B, 45, H, W).
    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Var {
        let h = tape.relu(self.conv1.forward(tape, bound, x));
        self.conv2.forward(tape, bound, h)
    }
}

/// One decoded prediction with its provenance.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub bbox: Box2D,
    pub confidence: f64,
    pub cell: (usize, usize),
    pub anchor: usize,
    pub flat_index: usize,
}

/// Decode the box with the maximum confidence logit; equal maxima resolve to
/// the lowest flattened (i, j, a) index.
pub fn select_prediction(
    raw: &ArrayView3<'_, f64>,
    anchors: &AnchorSet,
    stride: usize,
) -> Prediction {
    let (ch, hf, wf) = raw.dim();
    debug_assert_eq!(ch, NUM_ANCHORS * BOX_VALS);
    let mut best = (0usize, 0usize, 0usize);
    let mut best_conf = f64::NEG_INFINITY;
    let mut best_flat = 0usize;
    for i in 0..hf {
        for j in 0..wf {
            for a in 0..NUM_ANCHORS {
                let conf = raw[[a * BOX_VALS + 4, i, j]];
                if conf > best_conf {
                    best_conf = conf;
                    best = (i, j, a);
                    best_flat = (i * wf + j) * NUM_ANCHORS + a;
                }
            }
        }
    }
    let (i, j, a) = best;
    let t = [
        raw[[a * BOX_VALS, i, j]],
        raw[[a * BOX_VALS + 1, i, j]],
        raw[[a * BOX_VALS + 2, i, j]],
        raw[[a * BOX_VALS + 3, i, j]],
    ];
    Prediction {
        bbox: decode_box(t, (i, j), anchors.get(a), stride),
        confidence: best_conf,
        cell: (i, j),
        anchor: a,
        flat_index: best_flat,
    }
}

/// Per-cell confidence heatmap from an intermediate map's head output:
/// max over the anchors in each cell, then softmax over all cells.
/// Visualization only; contributes no loss.
pub fn intermediate_heatmap(raw: &ArrayView3<'_, f64>) -> Array2<f64> {
    let (_, hf, wf) = raw.dim();
    let mut m = Array2::<f64>::zeros((hf, wf));
    for i in 0..hf {
        for j in 0..wf {
            let mut best = f64::NEG_INFINITY;
            for a in 0..NUM_ANCHORS {
                best = best.max(raw[[a * BOX_VALS + 4, i, j]]);
            }
            m[[i, j]] = best;
        }
    }
    let mx = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m.mapv_inplace(|v| (v - mx).exp());
    let z = m.sum();
    m.mapv_inplace(|v| v / z);
    m
}

/// Regression penalty shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionLoss {
    Mse,
    SmoothL1,
}

/// Loss terms as tape nodes; `total` is what the optimizer sees.
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub reg: Var,
    pub div: Var,
    pub cover: Var,
}

/// Classification over all hf*wf*9 boxes against the one-hot target, a
/// regression penalty on the four offsets at the positive anchor only, and
/// the attention regularizers scaled by lambda. Every term is a mean over
/// the batch. With lambda = 0 the regularizer nodes are still built (their
/// values are reported) but the optimized total excludes them.
pub fn build_loss(
    tape: &Tape,
    raw: Var,
    assignments: &[TargetAssignment],
    alphas_per_sample: Option<&[Vec<Var>]>,
    lambda: f64,
    regression: RegressionLoss,
) -> LossVars {
    let sh = tape.shape(raw);
    let (bsz, _ch, hf, wf) = (sh[0], sh[1], sh[2], sh[3]);
    debug_assert_eq!(bsz, assignments.len());

    // confidence logits in flattened (i, j, a) order
    let split = tape.reshape(raw, &[bsz, NUM_ANCHORS, BOX_VALS, hf, wf]);
    let conf = tape.select_index(split, 2, 4); // (B, 9, H, W)
    let conf = tape.permute(conf, &[0, 2, 3, 1]); // (B, H, W, 9)
    let logits = tape.reshape(conf, &[bsz, hf * wf * NUM_ANCHORS]);
    let targets: Vec<usize> = assignments.iter().map(|a| a.flat_index).collect();
    let ce = tape.cross_entropy_rows(logits, &targets);

    // offsets at the positive anchor
    let mut gather_idx = Vec::with_capacity(bsz);
    let mut target_offsets = Arr::zeros(IxDyn(&[bsz, 4]));
    for (b, asg) in assignments.iter().enumerate() {
        let (i, j) = asg.cell;
        let idx: Vec<usize> = (0..4)
            .map(|v| ((asg.anchor * BOX_VALS + v) * hf + i) * wf + j)
            .collect();
        gather_idx.push(idx);
        for v in 0..4 {
            target_offsets[[b, v]] = asg.offsets[v];
        }
    }
    let pred_offsets = tape.gather_flat_per_sample(raw, &gather_idx);
    let diff = tape.sub(pred_offsets, tape.constant(target_offsets));
    let reg = match regression {
        RegressionLoss::Mse => tape.mean_all(tape.mul(diff, diff)),
        RegressionLoss::SmoothL1 => tape.mean_all(tape.smooth_l1(diff)),
    };

    // attention regularizers, mean over the batch
    let (div, cover) = match alphas_per_sample {
        Some(alphas) if !alphas.is_empty() && !alphas[0].is_empty() => {
            let mut divs = Vec::with_capacity(alphas.len());
            let mut covers = Vec::with_capacity(alphas.len());
            for per_sample in alphas {
                let (d, c) = regularizers_var(tape, per_sample);
                divs.push(d);
                covers.push(c);
            }
            (tape.mean_of_scalars(&divs), tape.mean_of_scalars(&covers))
        }
        _ => (
            tape.constant(crate::tensor::scalar(0.0)),
            tape.constant(crate::tensor::scalar(0.0)),
        ),
    };

    let mut total = tape.add(ce, reg);
    if lambda != 0.0 {
        let reg_sum = tape.affine_const(tape.add(div, cover), lambda, 0.0);
        total = tape.add(total, reg_sum);
    }
    LossVars {
        total,
        ce,
        reg,
        div,
        cover,
    }
}

/// Convolutional LSTM over the per-round maps; the aggregated feature is the
/// last hidden state. Gate order in the 4C channels: input, forget, cell,
/// output.
pub struct ConvLstm {
    pub wx: Conv2d,
    pub wh: Conv2d,
    pub c: usize,
}

impl ConvLstm {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, c: usize) -> Self {
        ConvLstm {
            wx: Conv2d::new(ps, rng, "convlstm.wx", c, 4 * c, 3, 1, 1, true),
            wh: Conv2d::new(ps, rng, "convlstm.wh", c, 4 * c, 3, 1, 1, false),
            c,
        }
    }

    /// One step from (h, c) and input x; all (B, C, H, W).
    pub fn step(&self, tape: &Tape, bound: &Bound, x: Var, h: Var, cell: Var) -> (Var, Var) {
        let gates = tape.add(
            self.wx.forward(tape, bound, x),
            self.wh.forward(tape, bound, h),
        );
        let c = self.c;
        let i = tape.sigmoid(tape.narrow_channels(gates, 0, c));
        let f = tape.sigmoid(tape.narrow_channels(gates, c, c));
        let g = tape.tanh(tape.narrow_channels(gates, 2 * c, c));
        let o = tape.sigmoid(tape.narrow_channels(gates, 3 * c, c));
        let new_cell = tape.add(tape.mul(f, cell), tape.mul(i, g));
        let new_h = tape.mul(o, tape.tanh(new_cell));
        (new_h, new_cell)
    }

    /// Run over the round sequence from a zero state; returns the last
    /// hidden state, shaped like the inputs.
    pub fn aggregate(&self, tape: &Tape, bound: &Bound, vs: &[Var]) -> Var {
        assert!(!vs.is_empty());
        let sh = tape.shape(vs[0]);
        let zeros = Arr::zeros(IxDyn(&sh));
        let mut h = tape.constant(zeros.clone());
        let mut c = tape.constant(zeros);
        for &x in vs {
            let (nh, nc) = self.step(tape, bound, x, h, c);
            h = nh;
            c = nc;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::scalar_value;
    use ndarray::{Array3, Array4};

    #[test]
    fn iou_examples() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = Box2D::new(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &far), 0.0);
        let b = Box2D::new(1.0, 0.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn decode_zero_offsets_hits_cell_center_with_anchor_size() {
        let b = decode_box([0.0; 4], (2, 5), (12.0, 20.0), 8);
        let (cx, cy) = b.center();
        assert!((cx - (5.0 + 0.5) * 8.0).abs() < 1e-12);
        assert!((cy - (2.0 + 0.5) * 8.0).abs() < 1e-12);
        assert!((b.w - 12.0).abs() < 1e-12);
        assert!((b.h - 20.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let anchor = (10.0, 14.0);
        let gt = Box2D::new(17.3, 9.1, 12.0, 11.5);
        let (cx, cy) = gt.center();
        let cell = ((cy / 8.0).floor() as usize, (cx / 8.0).floor() as usize);
        let t = encode_target(&gt, cell, anchor, 8).unwrap();
        let back = decode_box(t, cell, anchor, 8);
        for (a, b) in gt.xywh().iter().zip(back.xywh().iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn decode_matches_closed_form_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t: [f64; 4] = core::array::from_fn(|_| rng.random::<f64>() * 6.0 - 3.0);
            let cell = (rng.random_range(0..8), rng.random_range(0..8));
            let anchor = (
                rng.random::<f64>() * 20.0 + 2.0,
                rng.random::<f64>() * 20.0 + 2.0,
            );
            let b = decode_box(t, cell, anchor, 8);
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let cx = (cell.1 as f64 + sig(t[0])) * 8.0;
            let cy = (cell.0 as f64 + sig(t[1])) * 8.0;
            let w = anchor.0 * t[2].exp();
            let h = anchor.1 * t[3].exp();
            assert!((b.x - (cx - w / 2.0)).abs() < 1e-9);
            assert!((b.y - (cy - h / 2.0)).abs() < 1e-9);
            assert!((b.w - w).abs() < 1e-9);
            assert!((b.h - h).abs() < 1e-9);
            assert!(b.w > 0.0 && b.h > 0.0);
        }
    }

    #[test]
    fn encode_rejects_center_outside_cell() {
        let gt = Box2D::new(0.0, 0.0, 8.0, 8.0); // center (4, 4) is in cell (0, 0)
        assert!(encode_target(&gt, (1, 1), (8.0, 8.0), 8).is_err());
        assert!(encode_target(&gt, (0, 0), (8.0, 8.0), 8).is_ok());
    }

    fn anchors_fixture() -> AnchorSet {
        AnchorSet(vec![
            (6.0, 6.0),
            (8.0, 6.0),
            (6.0, 9.0),
            (10.0, 10.0),
            (14.0, 10.0),
            (10.0, 15.0),
            (16.0, 16.0),
            (20.0, 16.0),
            (16.0, 22.0),
        ])
    }

    #[test]
    fn assign_exact_anchor_in_named_cell() {
        let anchors = anchors_fixture();
        // gt equal to anchor 3 centered in cell (i=2, j=5) at stride 8
        let (aw, ah) = anchors.get(3);
        let cx = (5.0 + 0.5) * 8.0;
        let cy = (2.0 + 0.5) * 8.0;
        let gt = Box2D::new(cx - aw / 2.0, cy - ah / 2.0, aw, ah);
        let asg = assign_anchor(&gt, &anchors, 8, (8, 8)).unwrap();
        assert_eq!(asg.cell, (2, 5));
        assert_eq!(asg.anchor, 3);
        assert_eq!(asg.flat_index, (2 * 8 + 5) * 9 + 3);
        for v in asg.offsets.iter().take(2) {
            assert!(v.abs() < 1e-9, "centered gt gives logit(0.5) = 0");
        }
    }

    #[test]
    fn assign_cell_boundary_goes_to_floor_cell() {
        let anchors = anchors_fixture();
        // center exactly on the boundary x = 16 = 2 * stride: floor cell j=2
        let gt = Box2D::new(16.0 - 5.0, 20.0 - 5.0, 10.0, 10.0);
        let asg = assign_anchor(&gt, &anchors, 8, (8, 8)).unwrap();
        assert_eq!(asg.cell, (2, 2));
    }

    #[test]
    fn assign_matches_exhaustive_iou_oracle() {
        let anchors = anchors_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let w = rng.random::<f64>() * 24.0 + 3.0;
            let h = rng.random::<f64>() * 24.0 + 3.0;
            let cx = rng.random::<f64>() * 50.0 + 6.0;
            let cy = rng.random::<f64>() * 50.0 + 6.0;
            let gt = Box2D::new(cx - w / 2.0, cy - h / 2.0, w, h);
            let asg = assign_anchor(&gt, &anchors, 8, (8, 8)).unwrap();
            // oracle: full-IoU comparison of co-centered candidates
            let mut best = 0;
            let mut best_v = -1.0;
            for (a, &(aw, ah)) in anchors.0.iter().enumerate() {
                let cand = Box2D::new(cx - aw / 2.0, cy - ah / 2.0, aw, ah);
                let v = iou(&gt, &cand);
                if v > best_v {
                    best_v = v;
                    best = a;
                }
            }
            assert_eq!(asg.anchor, best);
        }
    }

    #[test]
    fn kmeans_identical_boxes_dedup_fallback() {
        let boxes = vec![(10.0, 12.0); 9];
        let a = compute_anchors(&boxes, 0).unwrap();
        assert_eq!(a.0.len(), 9);
        for &(w, h) in &a.0 {
            assert!((w - 10.0).abs() < 1e-12 && (h - 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_two_clusters_split_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut boxes = Vec::new();
        for _ in 0..60 {
            boxes.push((
                6.0 + rng.random::<f64>() * 1.0,
                6.0 + rng.random::<f64>() * 1.0,
            ));
            boxes.push((
                20.0 + rng.random::<f64>() * 1.5,
                20.0 + rng.random::<f64>() * 1.5,
            ));
        }
        let a = compute_anchors(&boxes, 7).unwrap();
        let b = compute_anchors(&boxes, 7).unwrap();
        assert_eq!(a, b, "same seed, same anchors");
        let small = a.0.iter().filter(|&&(w, _)| w < 12.0).count();
        assert!((1..=8).contains(&small), "anchors split across clusters");
        // sorted by area
        for w in a.0.windows(2) {
            assert!(w[0].0 * w[0].1 <= w[1].0 * w[1].1 + 1e-9);
        }
        assert!(matches!(
            compute_anchors(&[(4.0, 4.0); 5], 0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn head_shapes_and_zero_weights() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = GroundingHead::new(&mut ps, &mut rng, 6);
        let t = Tape::no_grad();
        let bound = ps.bind(&t);
        let x = t.input(Arr::from_shape_fn(IxDyn(&[2, 6, 8, 8]), |_| rng.random::<f64>()));
        let raw = head.forward(&t, &bound, x);
        assert_eq!(t.shape(raw), vec![2, 45, 8, 8]);

        for id in [head.conv1.w, head.conv2.w] {
            ps.value_mut(id).fill(0.0);
        }
        let t2 = Tape::no_grad();
        let bound2 = ps.bind(&t2);
        let x2 = t2.input(Arr::from_shape_fn(IxDyn(&[1, 6, 4, 4]), |_| rng.random::<f64>()));
        let raw2 = head.forward(&t2, &bound2, x2);
        assert!(t2.value(raw2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_matches_reference_layer_evaluation() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = GroundingHead::new(&mut ps, &mut rng, 3);
        let t = Tape::no_grad();
        let bound = ps.bind(&t);
        let xv = Array4::from_shape_fn((1, 3, 2, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let raw = t.value(head.forward(&t, &bound, t.input(xv.clone().into_dyn())));

        let w1 = ps.value(head.conv1.w);
        let b1 = ps.value(head.conv1.b.unwrap());
        let w2 = ps.value(head.conv2.w);
        let b2 = ps.value(head.conv2.b.unwrap());
        for i in 0..2 {
            for j in 0..2 {
                let mut hidden = [0.0f64; 3];
                for (co, hc) in hidden.iter_mut().enumerate() {
                    let mut acc = b1[[co]];
                    for ci in 0..3 {
                        acc += xv[[0, ci, i, j]] * w1[[co, ci, 0, 0]];
                    }
                    *hc = acc.max(0.0);
                }
                for co in 0..45 {
                    let mut acc = b2[[co]];
                    for (ci, hv) in hidden.iter().enumerate() {
                        acc += hv * w2[[co, ci, 0, 0]];
                    }
                    assert!((raw[[0, co, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_uniform_logits_gives_ln_m_and_zero_regression() {
        let t = Tape::no_grad();
        let hf = 4;
        let anchors = anchors_fixture();
        let gt = Box2D::new(8.0, 8.0, 10.0, 10.0);
        let asg = assign_anchor(&gt, &anchors, 8, (hf, hf)).unwrap();
        // raw zeros except: exact target offsets at the positive anchor
        let mut raw = Array4::<f64>::zeros((1, 45, hf, hf));
        for v in 0..4 {
            raw[[0, asg.anchor * 5 + v, asg.cell.0, asg.cell.1]] = asg.offsets[v];
        }
        let raw_v = t.input(raw.into_dyn());
        let loss = build_loss(&t, raw_v, &[asg], None, 1.0, RegressionLoss::Mse);
        let m = (hf * hf * 9) as f64;
        assert!((scalar_value(&t.value(loss.ce)) - m.ln()).abs() < 1e-9);
        assert!(scalar_value(&t.value(loss.reg)).abs() < 1e-12);
        assert_eq!(scalar_value(&t.value(loss.div)), 0.0);
        assert_eq!(scalar_value(&t.value(loss.cover)), 0.0);
    }

    #[test]
    fn loss_matches_component_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Tape::no_grad();
        let hf = 2;
        let anchors = anchors_fixture();
        let mut raws = Array4::<f64>::zeros((2, 45, hf, hf));
        raws.mapv_inplace(|_| rng.random::<f64>() * 2.0 - 1.0);
        let gts = [
            Box2D::new(2.0, 3.0, 7.0, 9.0),
            Box2D::new(9.0, 8.5, 6.0, 5.0),
        ];
        let asgs: Vec<TargetAssignment> = gts
            .iter()
            .map(|g| assign_anchor(g, &anchors, 8, (hf, hf)).unwrap())
            .collect();
        // two rounds of attention over 3 words for each sample
        let mut alphas_vals = Vec::new();
        let mut alphas_vars = Vec::new();
        for _ in 0..2 {
            let mut per_sample_vals = Vec::new();
            let mut per_sample_vars = Vec::new();
            for _ in 0..2 {
                let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                let z: f64 = raw.iter().sum();
                let a: Vec<f64> = raw.iter().map(|v| v / z).collect();
                per_sample_vars
                    .push(t.input(Arr::from_shape_vec(IxDyn(&[3]), a.clone()).unwrap()));
                per_sample_vals.push(a);
            }
            alphas_vals.push(per_sample_vals);
            alphas_vars.push(per_sample_vars);
        }
        let raw_var = t.input(raws.clone().into_dyn());
        let lambda = 1.0;
        let loss = build_loss(
            &t,
            raw_var,
            &asgs,
            Some(&alphas_vars),
            lambda,
            RegressionLoss::Mse,
        );

        // independent component evaluation
        let mut want_ce = 0.0;
        let mut want_reg = 0.0;
        let mut want_div = 0.0;
        let mut want_cover = 0.0;
        for b in 0..2 {
            let mut logits = Vec::new();
            for i in 0..hf {
                for j in 0..hf {
                    for a in 0..9 {
                        logits.push(raws[[b, a * 5 + 4, i, j]]);
                    }
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            want_ce += lse - logits[asgs[b].flat_index];
            let (i, j) = asgs[b].cell;
            for v in 0..4 {
                let p = raws[[b, asgs[b].anchor * 5 + v, i, j]];
                want_reg += (p - asgs[b].offsets[v]).powi(2) / 4.0;
            }
            let mut a_mat = Array2::<f64>::zeros((3, 2));
            for k in 0..2 {
                for n in 0..3 {
                    a_mat[[n, k]] = alphas_vals[b][k][n];
                }
            }
            want_div += crate::subquery::reg_diversity(&a_mat);
            want_cover += crate::subquery::reg_coverage(&a_mat);
        }
        want_ce /= 2.0;
        want_reg /= 2.0;
        want_div /= 2.0;
        want_cover /= 2.0;
        let want_total = want_ce + want_reg + lambda * (want_div + want_cover);
        assert!((scalar_value(&t.value(loss.ce)) - want_ce).abs() < 1e-10);
        assert!((scalar_value(&t.value(loss.reg)) - want_reg).abs() < 1e-10);
        assert!((scalar_value(&t.value(loss.div)) - want_div).abs() < 1e-10);
        assert!((scalar_value(&t.value(loss.cover)) - want_cover).abs() < 1e-10);
        assert!((scalar_value(&t.value(loss.total)) - want_total).abs() < 1e-10);
    }

    #[test]
    fn lambda_zero_reports_but_excludes_regularizers() {
        let t = Tape::no_grad();
        let raw = t.input(Arr::zeros(IxDyn(&[1, 45, 2, 2])));
        let asg = TargetAssignment {
            cell: (0, 0),
            anchor: 0,
            offsets: [0.0; 4],
            flat_index: 0,
        };
        // one round attending half of two words: cover = 2 - 1 = 1
        let a1 = t.input(Arr::from_shape_vec(IxDyn(&[2]), vec![0.5, 0.5]).unwrap());
        let loss = build_loss(&t, raw, &[asg], Some(&[vec![a1]]), 0.0, RegressionLoss::Mse);
        assert!(scalar_value(&t.value(loss.cover)) > 0.9);
        let want_total = ((2 * 2 * 9) as f64).ln();
        assert!((scalar_value(&t.value(loss.total)) - want_total).abs() < 1e-9);
    }

    #[test]
    fn select_prediction_argmax_and_tie_break() {
        let anchors = anchors_fixture();
        let mut raw = Array3::<f64>::zeros((45, 4, 4));
        raw[[2 * 5 + 4, 1, 3]] = 5.0;
        let p = select_prediction(&raw.view(), &anchors, 8);
        assert_eq!(p.cell, (1, 3));
        assert_eq!(p.anchor, 2);
        assert_eq!(p.flat_index, (4 + 3) * 9 + 2);

        // two equal maxima: lower flattened index wins
        let mut raw = Array3::<f64>::zeros((45, 4, 4));
        raw[[4, 0, 1]] = 3.0; // anchor 0 at cell (0,1): flat 9
        raw[[9, 0, 1]] = 3.0; // anchor 1, same cell: flat 10
        let p = select_prediction(&raw.view(), &anchors, 8);
        assert_eq!(p.flat_index, 9);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = Array3::from_shape_fn((45, 4, 4), |_| rng.random::<f64>());
        let p = select_prediction(&raw.view(), &anchors, 8);
        let mut best_flat = 0;
        let mut best = f64::NEG_INFINITY;
        for i in 0..4 {
            for j in 0..4 {
                for a in 0..9 {
                    let v = raw[[a * 5 + 4, i, j]];
                    if v > best {
                        best = v;
                        best_flat = (i * 4 + j) * 9 + a;
                    }
                }
            }
        }
        assert_eq!(p.flat_index, best_flat);
        assert!((p.confidence - best).abs() < 1e-15);
    }

    #[test]
    fn heatmap_normalizes_and_matches_oracle() {
        let uniform = Array3::<f64>::zeros((45, 3, 3));
        let m = intermediate_heatmap(&uniform.view());
        assert!((m.sum() - 1.0).abs() < 1e-6);
        for &v in m.iter() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = Array3::from_shape_fn((45, 3, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
        let m = intermediate_heatmap(&raw.view());
        assert!((m.sum() - 1.0).abs() < 1e-6);
        // oracle: per-cell max over anchors, then softmax over cells
        let mut logits = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                let mut mx = f64::NEG_INFINITY;
                for a in 0..9 {
                    mx = mx.max(raw[[a * 5 + 4, i, j]]);
                }
                logits[[i, j]] = mx;
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        for i in 0..3 {
            for j in 0..3 {
                let want = (logits[[i, j]] - mx).exp() / z;
                assert!((m[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convlstm_shapes_and_single_step_equivalence() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lstm = ConvLstm::new(&mut ps, &mut rng, 3);
        let t = Tape::no_grad();
        let bound = ps.bind(&t);
        let x = t.input(Arr::from_shape_fn(IxDyn(&[1, 3, 2, 2]), |_| rng.random::<f64>()));
        let out = lstm.aggregate(&t, &bound, &[x]);
        assert_eq!(t.shape(out), vec![1, 3, 2, 2]);
        // K = 1 aggregate equals one step from the zero state
        let zeros = t.constant(Arr::zeros(IxDyn(&[1, 3, 2, 2])));
        let (h1, _) = lstm.step(&t, &bound, x, zeros, zeros);
        let diff = (&*t.value(out) - &*t.value(h1)).mapv(f64::abs).sum();
        assert!(diff < 1e-15);
    }

    #[test]
    fn convlstm_matches_hand_unrolled_reference() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = 2;
        let lstm = ConvLstm::new(&mut ps, &mut rng, c);
        let t = Tape::no_grad();
        let bound = ps.bind(&t);
        let xs: Vec<Array4<f64>> = (0..3)
            .map(|_| Array4::from_shape_fn((1, c, 2, 2), |_| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let vars: Vec<Var> = xs.iter().map(|x| t.input(x.clone().into_dyn())).collect();
        let got = t.value(lstm.aggregate(&t, &bound, &vars));

        // straight-line reference
        let naive_conv = |x: &Array4<f64>, w: &Arr, b: Option<&Arr>| -> Array4<f64> {
            let (_, cin, hh, ww) = x.dim();
            let cout = w.shape()[0];
            let mut out = Array4::<f64>::zeros((1, cout, hh, ww));
            for co in 0..cout {
                for i in 0..hh {
                    for j in 0..ww {
                        let mut acc = b.map_or(0.0, |b| b[[co]]);
                        for ci in 0..cin {
                            for ki in 0..3isize {
                                for kj in 0..3isize {
                                    let ii = i as isize + ki - 1;
                                    let jj = j as isize + kj - 1;
                                    if ii < 0 || jj < 0 || ii >= hh as isize || jj >= ww as isize {
                                        continue;
                                    }
                                    acc += x[[0, ci, ii as usize, jj as usize]]
                                        * w[[co, ci, ki as usize, kj as usize]];
                                }
                            }
                        }
                        out[[0, co, i, j]] = acc;
                    }
                }
            }
            out
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let wx = ps.value(lstm.wx.w).clone();
        let bx = ps.value(lstm.wx.b.unwrap()).clone();
        let wh = ps.value(lstm.wh.w).clone();
        let mut h = Array4::<f64>::zeros((1, c, 2, 2));
        let mut cell = Array4::<f64>::zeros((1, c, 2, 2));
        for x in &xs {
            let gates = naive_conv(x, &wx, Some(&bx)) + naive_conv(&h, &wh, None);
            let mut nh = h.clone();
            for ci in 0..c {
                for i in 0..2 {
                    for j in 0..2 {
                        let ig = sig(gates[[0, ci, i, j]]);
                        let fg = sig(gates[[0, c + ci, i, j]]);
                        let gg = gates[[0, 2 * c + ci, i, j]].tanh();
                        let og = sig(gates[[0, 3 * c + ci, i, j]]);
                        cell[[0, ci, i, j]] = fg * cell[[0, ci, i, j]] + ig * gg;
                        nh[[0, ci, i, j]] = og * cell[[0, ci, i, j]].tanh();
                    }
                }
            }
            h = nh;
        }
        for ci in 0..c {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((got[[0, ci, i, j]] - h[[0, ci, i, j]]).abs() < 1e-12);
                }
            }
        }
    }
}
