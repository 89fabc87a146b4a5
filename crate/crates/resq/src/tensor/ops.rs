//! Primitive differentiable ops.
//!
//! Each op pushes one node; backward closures implement the exact vector-
//! Jacobian product. Broadcast variants are specialized to the shapes the
//! model actually uses ((B,C,H,W) against [C] or [B,C] operands, row/column
//! vectors against matrices) rather than generic NumPy-style broadcasting.

use ndarray::{concatenate, Axis, Ix1, Ix2, IxDyn, Slice};

use super::{Arr, Tape, Var};

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d tensor")
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected 1-d tensor")
}

/// Collapse (B, C, spatial...) to (B, C, S) with S the product of trailing dims.
fn as_bcs(a: &Arr) -> ndarray::Array3<f64> {
    let sh = a.shape();
    assert!(sh.len() >= 2);
    let (b, c) = (sh[0], sh[1]);
    let s: usize = sh[2..].iter().product();
    a.view()
        .into_shape_with_order((b, c, s))
        .expect("standard layout")
        .to_owned()
}

impl Tape {
    // ---- elementwise binary ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) + &*self.value(b);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) - &*self.value(b);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.mapv(|v| -v)])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) * &*self.value(b);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, _, p| vec![g * p[1], g * p[0]])),
        )
    }

    // ---- elementwise unary ----

    /// `m*x + c` with constants; covers negation, scaling and `1 - x`.
    pub fn affine_const(&self, x: Var, m: f64, c: f64) -> Var {
        let out = self.value(x).mapv(|v| m * v + c);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _, _| vec![g.mapv(|v| m * v)])),
        )
    }

    pub fn one_minus(&self, x: Var) -> Var {
        self.affine_const(x, -1.0, 1.0)
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| {
                let mut d = g.clone();
                d.zip_mut_with(p[0], |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![d]
            })),
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, y, _| {
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                vec![d]
            })),
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, y, _| {
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                vec![d]
            })),
        )
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::exp);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, y, _| vec![g * y])),
        )
    }

    pub fn ln(&self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::ln);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| vec![g / p[0]])),
        )
    }

    pub fn sqrt(&self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::sqrt);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, y, _| {
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv /= 2.0 * yv);
                vec![d]
            })),
        )
    }

    pub fn recip(&self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::recip);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, y, _| {
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv *= -(yv * yv));
                vec![d]
            })),
        )
    }

    /// Elementwise smooth-L1 penalty: x²/2 for |x| < 1, |x| - 1/2 beyond.
    pub fn smooth_l1(&self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| {
            if v.abs() < 1.0 {
                0.5 * v * v
            } else {
                v.abs() - 0.5
            }
        });
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| {
                let mut d = g.clone();
                d.zip_mut_with(p[0], |gv, &xv| *gv *= xv.clamp(-1.0, 1.0));
                vec![d]
            })),
        )
    }

    /// Elementwise `min(x, c)`. Gradient gates to the identity side; the
    /// boundary `x == c` takes the constant side's zero derivative.
    pub fn clamp_max(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).mapv(|v| v.min(c));
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _, p| {
                let mut d = g.clone();
                d.zip_mut_with(p[0], |gv, &xv| {
                    if xv >= c {
                        *gv = 0.0;
                    }
                });
                vec![d]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: Var) -> Var {
        let out = super::scalar(self.value(x).sum());
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| {
                let gv = super::scalar_value(g);
                vec![Arr::from_elem(p[0].raw_dim(), gv)]
            })),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let out = super::scalar(self.value(x).sum() / n);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _, p| {
                let gv = super::scalar_value(g) / n;
                vec![Arr::from_elem(p[0].raw_dim(), gv)]
            })),
        )
    }

    /// Sum over rows: (R, C) -> [C].
    pub fn sum_rows(&self, x: Var) -> Var {
        let out = as2(&self.value(x)).sum_axis(Axis(0)).into_dyn();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| {
                let sh = p[0].shape();
                let (r, c) = (sh[0], sh[1]);
                let g1 = as1(g);
                let mut d = ndarray::Array2::<f64>::zeros((r, c));
                for mut row in d.rows_mut() {
                    row.assign(&g1);
                }
                vec![d.into_dyn()]
            })),
        )
    }

    /// Spatial mean: (B, C, H, W) -> (B, C).
    pub fn mean_hw(&self, x: Var) -> Var {
        let v = as_bcs(&self.value(x));
        let out = v.mean_axis(Axis(2)).unwrap().into_dyn();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| {
                let sh = p[0].shape().to_vec();
                let s: usize = sh[2..].iter().product();
                let g2 = as2(g);
                let mut d = Arr::zeros(IxDyn(&sh));
                {
                    let mut d3 = d
                        .view_mut()
                        .into_shape_with_order((sh[0], sh[1], s))
                        .unwrap();
                    for b in 0..sh[0] {
                        for c in 0..sh[1] {
                            d3.slice_mut(ndarray::s![b, c, ..]).fill(g2[[b, c]] / s as f64);
                        }
                    }
                }
                vec![d]
            })),
        )
    }

    /// Per-channel mean over batch and space: (B, C, H, W) -> [C].
    pub fn mean_bhw(&self, x: Var) -> Var {
        let v = as_bcs(&self.value(x));
        let (b, _c, s) = v.dim();
        let out = (v.sum_axis(Axis(2)).sum_axis(Axis(0)) / (b * s) as f64).into_dyn();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| {
                let sh = p[0].shape().to_vec();
                let s: usize = sh[2..].iter().product();
                let n = (sh[0] * s) as f64;
                let g1 = as1(g);
                let mut d = Arr::zeros(IxDyn(&sh));
                {
                    let mut d3 = d
                        .view_mut()
                        .into_shape_with_order((sh[0], sh[1], s))
                        .unwrap();
                    for b in 0..sh[0] {
                        for c in 0..sh[1] {
                            d3.slice_mut(ndarray::s![b, c, ..]).fill(g1[c] / n);
                        }
                    }
                }
                vec![d]
            })),
        )
    }

    // ---- linear algebra ----

    /// (M, K) x (K, N) -> (M, N).
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = as2(&self.value(a)).dot(&as2(&self.value(b))).into_dyn();
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, _, p| {
                let g2 = as2(g);
                let da = g2.dot(&as2(p[1]).t()).into_dyn();
                let db = as2(p[0]).t().dot(&g2).into_dyn();
                vec![da, db]
            })),
        )
    }

    // ---- row/column broadcasts on matrices ----

    /// (N, C) + [C] broadcast over rows.
    pub fn rows_add_vec(&self, x: Var, v: Var) -> Var {
        let out = (&as2(&self.value(x)) + &as1(&self.value(v))).into_dyn();
        self.push(
            out,
            vec![x.0, v.0],
            Some(Box::new(|g, _, _| {
                let dv = as2(g).sum_axis(Axis(0)).into_dyn();
                vec![g.clone(), dv]
            })),
        )
    }

    /// (N, C) * [C] broadcast over rows.
    pub fn rows_mul_vec(&self, x: Var, v: Var) -> Var {
        let out = (&as2(&self.value(x)) * &as1(&self.value(v))).into_dyn();
        self.push(
            out,
            vec![x.0, v.0],
            Some(Box::new(|g, _, p| {
                let g2 = as2(g);
                let dx = (&g2 * &as1(p[1])).into_dyn();
                let dv = (&g2 * &as2(p[0])).sum_axis(Axis(0)).into_dyn();
                vec![dx, dv]
            })),
        )
    }

    /// Row i of (N, C) scaled by s[i].
    pub fn scale_rows(&self, x: Var, s: Var) -> Var {
        let xv = as2(&self.value(x)).to_owned();
        let sv = as1(&self.value(s)).to_owned();
        let mut out = xv;
        for (mut row, &si) in out.rows_mut().into_iter().zip(sv.iter()) {
            row *= si;
        }
        self.push(
            out.into_dyn(),
            vec![x.0, s.0],
            Some(Box::new(|g, _, p| {
                let g2 = as2(g);
                let x2 = as2(p[0]);
                let s1 = as1(p[1]);
                let mut dx = g2.to_owned();
                for (mut row, &si) in dx.rows_mut().into_iter().zip(s1.iter()) {
                    row *= si;
                }
                let ds = (&g2 * &x2).sum_axis(Axis(1)).into_dyn();
                vec![dx.into_dyn(), ds]
            })),
        )
    }

    // ---- channel broadcasts on feature maps ----

    /// (B, C, ...) + [C].
    pub fn ch_add(&self, x: Var, v: Var) -> Var {
        let mut out = as_bcs(&self.value(x));
        let vv = as1(&self.value(v)).to_owned();
        for c in 0..vv.len() {
            out.slice_mut(ndarray::s![.., c, ..]).mapv_inplace(|e| e + vv[c]);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            out.into_shape_with_order(IxDyn(&shape)).unwrap(),
            vec![x.0, v.0],
            Some(Box::new(|g, _, p| {
                let gb = as_bcs(g);
                let c = p[1].len();
                let mut dv = ndarray::Array1::<f64>::zeros(c);
                for ci in 0..c {
                    dv[ci] = gb.slice(ndarray::s![.., ci, ..]).sum();
                }
                vec![g.clone(), dv.into_dyn()]
            })),
        )
    }

    /// (B, C, ...) - [C].
    pub fn ch_sub(&self, x: Var, v: Var) -> Var {
        let nv = self.affine_const(v, -1.0, 0.0);
        self.ch_add(x, nv)
    }

    /// (B, C, ...) * [C].
    pub fn ch_mul(&self, x: Var, v: Var) -> Var {
        let mut out = as_bcs(&self.value(x));
        let vv = as1(&self.value(v)).to_owned();
        for c in 0..vv.len() {
            out.slice_mut(ndarray::s![.., c, ..]).mapv_inplace(|e| e * vv[c]);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            out.into_shape_with_order(IxDyn(&shape)).unwrap(),
            vec![x.0, v.0],
            Some(Box::new(|g, _, p| {
                let gb = as_bcs(g);
                let xb = as_bcs(p[0]);
                let vv = as1(p[1]);
                let c = vv.len();
                let mut dxb = gb.clone();
                let mut dv = ndarray::Array1::<f64>::zeros(c);
                for ci in 0..c {
                    dxb.slice_mut(ndarray::s![.., ci, ..]).mapv_inplace(|e| e * vv[ci]);
                    dv[ci] = (&gb.slice(ndarray::s![.., ci, ..]) * &xb.slice(ndarray::s![.., ci, ..])).sum();
                }
                let dx = dxb.into_shape_with_order(IxDyn(p[0].shape())).unwrap();
                vec![dx, dv.into_dyn()]
            })),
        )
    }

    /// (B, C, ...) + (B, C) broadcast over the spatial dims.
    pub fn bc_add(&self, x: Var, m: Var) -> Var {
        let mut out = as_bcs(&self.value(x));
        let mv = as2(&self.value(m)).to_owned();
        let (b, c, _s) = out.dim();
        for bi in 0..b {
            for ci in 0..c {
                out.slice_mut(ndarray::s![bi, ci, ..]).mapv_inplace(|e| e + mv[[bi, ci]]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            out.into_shape_with_order(IxDyn(&shape)).unwrap(),
            vec![x.0, m.0],
            Some(Box::new(|g, _, _p| {
                let gb = as_bcs(g);
                let dm = gb.sum_axis(Axis(2)).into_dyn();
                vec![g.clone(), dm]
            })),
        )
    }

    /// (B, C, ...) * (B, C) broadcast over the spatial dims.
    pub fn bc_mul(&self, x: Var, m: Var) -> Var {
        let mut out = as_bcs(&self.value(x));
        let mv = as2(&self.value(m)).to_owned();
        let (b, c, _s) = out.dim();
        for bi in 0..b {
            for ci in 0..c {
                out.slice_mut(ndarray::s![bi, ci, ..]).mapv_inplace(|e| e * mv[[bi, ci]]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            out.into_shape_with_order(IxDyn(&shape)).unwrap(),
            vec![x.0, m.0],
            Some(Box::new(|g, _, p| {
                let gb = as_bcs(g);
                let xb = as_bcs(p[0]);
                let mv = as2(p[1]);
                let (b, c, _s) = gb.dim();
                let mut dxb = gb.clone();
                for bi in 0..b {
                    for ci in 0..c {
                        dxb.slice_mut(ndarray::s![bi, ci, ..]).mapv_inplace(|e| e * mv[[bi, ci]]);
                    }
                }
                let dm = (&gb * &xb).sum_axis(Axis(2)).into_dyn();
                let dx = dxb.into_shape_with_order(IxDyn(p[0].shape())).unwrap();
                vec![dx, dm]
            })),
        )
    }

    // ---- structure ----

    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat shapes");
        let ca = av.shape()[1];
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, _, _| {
                let da = g.slice_axis(Axis(1), Slice::from(0..ca)).to_owned();
                let db = g
                    .slice_axis(Axis(1), Slice::from(ca..g.shape()[1]))
                    .to_owned();
                vec![da, db]
            })),
        )
    }

    pub fn narrow_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let out = self
            .value(x)
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _, p| {
                let mut d = Arr::zeros(p[0].raw_dim());
                d.slice_axis_mut(Axis(1), Slice::from(start..start + len))
                    .assign(g);
                vec![d]
            })),
        )
    }

    /// Pick index `i` along `axis`, removing it.
    pub fn select_index(&self, x: Var, axis: usize, i: usize) -> Var {
        let out = self.value(x).index_axis(Axis(axis), i).to_owned();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _, p| {
                let mut d = Arr::zeros(p[0].raw_dim());
                d.index_axis_mut(Axis(axis), i).assign(g);
                vec![d]
            })),
        )
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let axes_v = axes.to_vec();
        let out = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(&axes_v))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _, _| {
                let mut inv = vec![0usize; axes_v.len()];
                for (pos, &a) in axes_v.iter().enumerate() {
                    inv[a] = pos;
                }
                vec![g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned()]
            })),
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count")
            .to_owned();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| {
                vec![g
                    .view()
                    .into_shape_with_order(p[0].raw_dim())
                    .unwrap()
                    .to_owned()]
            })),
        )
    }

    /// Embedding lookup: rows `idx` of a (V, E) table -> (n, E).
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let t2 = as2(&tv);
        let mut out = ndarray::Array2::<f64>::zeros((idx.len(), t2.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&t2.row(i));
        }
        let idx_v = idx.to_vec();
        self.push(
            out.into_dyn(),
            vec![table.0],
            Some(Box::new(move |g, _, p| {
                let g2 = as2(g);
                let mut d = ndarray::Array2::<f64>::zeros((p[0].shape()[0], p[0].shape()[1]));
                for (r, &i) in idx_v.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g2.row(r);
                }
                vec![d.into_dyn()]
            })),
        )
    }

    /// Stack n vectors of length C into (n, C).
    pub fn stack_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).len();
        let mut out = ndarray::Array2::<f64>::zeros((parts.len(), c));
        for (r, &p) in parts.iter().enumerate() {
            out.row_mut(r).assign(&as1(&self.value(p)));
        }
        self.push(
            out.into_dyn(),
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(|g, _, p| {
                let g2 = as2(g);
                (0..p.len()).map(|r| g2.row(r).to_owned().into_dyn()).collect()
            })),
        )
    }

    /// Row `i` of (N, C) -> [C].
    pub fn slice_row(&self, x: Var, i: usize) -> Var {
        let out = as2(&self.value(x)).row(i).to_owned().into_dyn();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _, p| {
                let mut d = Arr::zeros(p[0].raw_dim());
                d.index_axis_mut(Axis(0), i).assign(g);
                vec![d]
            })),
        )
    }

    /// Elementwise division by a 0-d scalar node.
    pub fn div_bcast_scalar(&self, x: Var, s: Var) -> Var {
        let sv = super::scalar_value(&self.value(s));
        let out = self.value(x).mapv(|v| v / sv);
        self.push(
            out,
            vec![x.0, s.0],
            Some(Box::new(|g, y, p| {
                let sv = super::scalar_value(p[1]);
                let dx = g.mapv(|v| v / sv);
                let ds = super::scalar(-(g * y).sum() / sv);
                vec![dx, ds]
            })),
        )
    }

    /// Numerically stable softmax over a 1-d vector. The max shift is a
    /// data-dependent constant; softmax is shift invariant so the gradient
    /// is exact.
    pub fn softmax_vec(&self, x: Var) -> Var {
        let m = self
            .value(x)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.affine_const(x, 1.0, -m);
        let e = self.exp(shifted);
        let s = self.sum_all(e);
        self.div_bcast_scalar(e, s)
    }

    /// Mean of several 0-d scalars.
    pub fn mean_of_scalars(&self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty());
        let mut acc = vs[0];
        for &v in &vs[1..] {
            acc = self.add(acc, v);
        }
        self.affine_const(acc, 1.0 / vs.len() as f64, 0.0)
    }

    // ---- fused losses / gathers ----

    /// Mean over rows of `logsumexp(row) - row[target]`; the usual softmax
    /// cross entropy with integer targets. Backward is (softmax - onehot)/B.
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let l2 = as2(&lv);
        assert_eq!(l2.nrows(), targets.len());
        let mut total = 0.0;
        for (row, &t) in l2.rows().into_iter().zip(targets.iter()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let bsz = targets.len() as f64;
        let targets_v = targets.to_vec();
        self.push(
            super::scalar(total / bsz),
            vec![logits.0],
            Some(Box::new(move |g, _, p| {
                let gs = super::scalar_value(g) / bsz;
                let l2 = as2(p[0]);
                let mut d = l2.to_owned();
                for (mut row, &t) in d.rows_mut().into_iter().zip(targets_v.iter()) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp() / z;
                    }
                    row[t] -= 1.0;
                    row.mapv_inplace(|v| v * gs);
                }
                vec![d.into_dyn()]
            })),
        )
    }

    /// For each sample b, gather `idx[b]` flat positions from the non-batch
    /// dims of x: (B, rest...) -> (B, k).
    pub fn gather_flat_per_sample(&self, x: Var, idx: &[Vec<usize>]) -> Var {
        let xv = self.value(x);
        let b = xv.shape()[0];
        assert_eq!(b, idx.len());
        let rest: usize = xv.shape()[1..].iter().product();
        let x2 = xv.view().into_shape_with_order((b, rest)).unwrap();
        let k = idx[0].len();
        let mut out = ndarray::Array2::<f64>::zeros((b, k));
        for bi in 0..b {
            for (j, &fi) in idx[bi].iter().enumerate() {
                out[[bi, j]] = x2[[bi, fi]];
            }
        }
        let idx_v: Vec<Vec<usize>> = idx.to_vec();
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g, _, p| {
                let g2 = as2(g);
                let rest: usize = p[0].shape()[1..].iter().product();
                let b = p[0].shape()[0];
                let mut d = Arr::zeros(p[0].raw_dim());
                {
                    let mut d2 = d.view_mut().into_shape_with_order((b, rest)).unwrap();
                    for bi in 0..b {
                        for (j, &fi) in idx_v[bi].iter().enumerate() {
                            d2[[bi, fi]] += g2[[bi, j]];
                        }
                    }
                }
                vec![d]
            })),
        )
    }

    /// Max over the last axis; gradient routes to the first argmax.
    pub fn max_last_axis(&self, x: Var) -> Var {
        let xv = self.value(x);
        let nd = xv.ndim();
        let out = xv.map_axis(Axis(nd - 1), |lane| {
            lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, _, p| {
                let nd = p[0].ndim();
                let k = p[0].shape()[nd - 1];
                let outer: usize = p[0].len() / k;
                let x2 = p[0].view().into_shape_with_order((outer, k)).unwrap();
                let g1 = g.view().into_shape_with_order(outer).unwrap();
                let mut d = ndarray::Array2::<f64>::zeros((outer, k));
                for o in 0..outer {
                    let lane = x2.row(o);
                    let mut best = 0usize;
                    for (j, &v) in lane.iter().enumerate() {
                        if v > lane[best] {
                            best = j;
                        }
                    }
                    d[[o, best]] = g1[o];
                }
                vec![d.into_shape_with_order(p[0].raw_dim()).unwrap()]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::{scalar_value, Arr, Tape, Var};
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Check d loss / d inputs[k] for loss = sum(w ⊙ f(inputs)) against
    /// central finite differences, for every input coordinate.
    fn check_op(build: &dyn Fn(&Tape, &[Var]) -> Var, shapes: &[&[usize]], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Arr> = shapes.iter().map(|s| rand_arr(&mut rng, s)).collect();

        let loss_of = |vals: &[Arr], weights: &Arr| -> f64 {
            let t = Tape::no_grad();
            let vars: Vec<Var> = vals.iter().map(|v| t.input(v.clone())).collect();
            let out = build(&t, &vars);
            (&*t.value(out) * weights).sum()
        };

        // analytic
        let t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| t.input(v.clone())).collect();
        let out = build(&t, &vars);
        let w = rand_arr(&mut rng, &t.shape(out));
        let wv = t.constant(w.clone());
        let weighted = t.mul(out, wv);
        let loss = t.sum_all(weighted);
        let grads = t.backward(loss);

        let eps = 1e-6;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Arr::zeros(inp.raw_dim()));
            for flat in 0..inp.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[flat] += eps;
                minus[k].as_slice_mut().unwrap()[flat] -= eps;
                let num = (loss_of(&plus, &w) - loss_of(&minus, &w)) / (2.0 * eps);
                let ana = analytic.as_slice().unwrap()[flat];
                let denom = ana.abs().max(num.abs()).max(1e-6);
                assert!(
                    (ana - num).abs() / denom < 1e-5,
                    "input {k} coord {flat}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise() {
        check_op(&|t, v| t.add(v[0], v[1]), &[&[3, 2], &[3, 2]], 1);
        check_op(&|t, v| t.sub(v[0], v[1]), &[&[4], &[4]], 2);
        check_op(&|t, v| t.mul(v[0], v[1]), &[&[2, 3], &[2, 3]], 3);
        check_op(&|t, v| t.affine_const(v[0], -2.5, 0.3), &[&[5]], 4);
        check_op(&|t, v| t.tanh(v[0]), &[&[6]], 5);
        check_op(&|t, v| t.sigmoid(v[0]), &[&[6]], 6);
        check_op(&|t, v| t.exp(v[0]), &[&[6]], 7);
        check_op(&|t, v| t.relu(t.affine_const(v[0], 1.0, 0.17)), &[&[8]], 8);
        check_op(
            &|t, v| t.ln(t.affine_const(v[0], 0.4, 2.0)),
            &[&[5]],
            9,
        );
        check_op(
            &|t, v| t.sqrt(t.affine_const(v[0], 0.4, 2.0)),
            &[&[5]],
            10,
        );
        check_op(
            &|t, v| t.recip(t.affine_const(v[0], 0.4, 3.0)),
            &[&[5]],
            11,
        );
        check_op(&|t, v| t.clamp_max(v[0], 0.25), &[&[9]], 12);
        check_op(&|t, v| t.smooth_l1(t.affine_const(v[0], 2.0, 0.1)), &[&[9]], 13);
    }

    #[test]
    fn grad_reductions() {
        check_op(&|t, v| t.sum_all(v[0]), &[&[3, 4]], 20);
        check_op(&|t, v| t.mean_all(v[0]), &[&[2, 5]], 21);
        check_op(&|t, v| t.sum_rows(v[0]), &[&[4, 3]], 22);
        check_op(&|t, v| t.mean_hw(v[0]), &[&[2, 3, 2, 2]], 23);
        check_op(&|t, v| t.mean_bhw(v[0]), &[&[2, 3, 2, 2]], 24);
    }

    #[test]
    fn grad_linear_and_broadcast() {
        check_op(&|t, v| t.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]], 30);
        check_op(&|t, v| t.rows_add_vec(v[0], v[1]), &[&[3, 4], &[4]], 31);
        check_op(&|t, v| t.rows_mul_vec(v[0], v[1]), &[&[3, 4], &[4]], 32);
        check_op(&|t, v| t.scale_rows(v[0], v[1]), &[&[3, 4], &[3]], 33);
        check_op(&|t, v| t.ch_add(v[0], v[1]), &[&[2, 3, 2, 2], &[3]], 34);
        check_op(&|t, v| t.ch_mul(v[0], v[1]), &[&[2, 3, 2, 2], &[3]], 35);
        check_op(&|t, v| t.ch_sub(v[0], v[1]), &[&[2, 3, 2, 2], &[3]], 36);
        check_op(&|t, v| t.bc_add(v[0], v[1]), &[&[2, 3, 2, 2], &[2, 3]], 37);
        check_op(&|t, v| t.bc_mul(v[0], v[1]), &[&[2, 3, 2, 2], &[2, 3]], 38);
    }

    #[test]
    fn grad_structure() {
        check_op(
            &|t, v| t.concat_channels(v[0], v[1]),
            &[&[2, 2, 2, 2], &[2, 3, 2, 2]],
            40,
        );
        check_op(&|t, v| t.narrow_channels(v[0], 1, 2), &[&[2, 4, 2, 2]], 41);
        check_op(&|t, v| t.select_index(v[0], 2, 1), &[&[2, 3, 4, 2]], 42);
        check_op(&|t, v| t.permute(v[0], &[0, 2, 3, 1]), &[&[2, 3, 2, 2]], 43);
        check_op(&|t, v| t.reshape(v[0], &[6, 2]), &[&[2, 3, 2]], 44);
        check_op(&|t, v| t.gather_rows(v[0], &[2, 0, 2]), &[&[4, 3]], 45);
        check_op(
            &|t, v| t.stack_rows(&[v[0], v[1], v[0]]),
            &[&[4], &[4]],
            46,
        );
        check_op(&|t, v| t.slice_row(v[0], 1), &[&[3, 4]], 47);
    }

    #[test]
    fn grad_softmax_and_losses() {
        check_op(&|t, v| t.softmax_vec(v[0]), &[&[5]], 50);
        check_op(
            &|t, v| t.div_bcast_scalar(v[0], t.affine_const(t.sum_all(v[1]), 1.0, 4.0)),
            &[&[4], &[3]],
            51,
        );
        check_op(
            &|t, v| t.cross_entropy_rows(v[0], &[2, 0]),
            &[&[2, 5]],
            52,
        );
        check_op(
            &|t, v| t.gather_flat_per_sample(v[0], &[vec![0, 5, 3], vec![2, 2, 7]]),
            &[&[2, 2, 4]],
            53,
        );
        check_op(&|t, v| t.max_last_axis(v[0]), &[&[2, 3, 4]], 54);
        check_op(
            &|t, v| t.mean_of_scalars(&[t.sum_all(v[0]), t.mean_all(v[1])]),
            &[&[3], &[4]],
            55,
        );
    }

    #[test]
    fn softmax_normalizes() {
        let t = Tape::no_grad();
        let x = t.input(rand_arr(&mut ChaCha8Rng::seed_from_u64(9), &[7]));
        let s = t.softmax_vec(x);
        let sv = t.value(s);
        assert!((sv.sum() - 1.0).abs() < 1e-12);
        assert!(sv.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_m() {
        let t = Tape::no_grad();
        let x = t.input(Arr::zeros(IxDyn(&[3, 16])));
        let ce = t.cross_entropy_rows(x, &[0, 5, 15]);
        assert!((scalar_value(&t.value(ce)) - (16.0f64).ln()).abs() < 1e-12);
    }
}
