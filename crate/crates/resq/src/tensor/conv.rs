//! 2-d convolution via im2col + GEMM.
//!
//! The column matrix is rebuilt in the backward pass instead of being cached
//! on the tape; at the feature-map sizes used here the rebuild is cheap next
//! to the GEMMs and keeps tape memory flat.

use ndarray::{Array2, Array4, Ix4};

use super::{Arr, Tape, Var};

fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view()
        .into_dimensionality::<Ix4>()
        .expect("expected 4-d tensor")
}

pub fn out_size(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// (B, Cin, H, W) -> columns (Cin*kh*kw, B*Ho*Wo), column index = (b, i, j).
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (b, cin, h, w) = x.dim();
    let ho = out_size(h, kh, stride, pad);
    let wo = out_size(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((cin * kh * kw, b * ho * wo));
    for bi in 0..b {
        for oi in 0..ho {
            for oj in 0..wo {
                let cidx = bi * ho * wo + oi * wo + oj;
                let base_i = (oi * stride) as isize - pad as isize;
                let base_j = (oj * stride) as isize - pad as isize;
                for c in 0..cin {
                    for ki in 0..kh {
                        let ii = base_i + ki as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = base_j + kj as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            col[[(c * kh + ki) * kw + kj, cidx]] =
                                x[[bi, c, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of im2col: scatter column gradients back onto the input image.
fn col2im(
    dcol: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, cin, h, w) = shape;
    let ho = out_size(h, kh, stride, pad);
    let wo = out_size(w, kw, stride, pad);
    let mut dx = Array4::<f64>::zeros(shape);
    for bi in 0..b {
        for oi in 0..ho {
            for oj in 0..wo {
                let cidx = bi * ho * wo + oi * wo + oj;
                let base_i = (oi * stride) as isize - pad as isize;
                let base_j = (oj * stride) as isize - pad as isize;
                for c in 0..cin {
                    for ki in 0..kh {
                        let ii = base_i + ki as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = base_j + kj as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dx[[bi, c, ii as usize, jj as usize]] +=
                                dcol[[(c * kh + ki) * kw + kj, cidx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// out[b, co, i, j] from out_mat[co, b*Ho*Wo + i*Wo + j].
fn mat_to_maps(m: &Array2<f64>, b: usize, ho: usize, wo: usize) -> Array4<f64> {
    let co = m.nrows();
    let mut out = Array4::<f64>::zeros((b, co, ho, wo));
    for c in 0..co {
        for bi in 0..b {
            for oi in 0..ho {
                for oj in 0..wo {
                    out[[bi, c, oi, oj]] = m[[c, bi * ho * wo + oi * wo + oj]];
                }
            }
        }
    }
    out
}

fn maps_to_mat(x: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (b, co, ho, wo) = x.dim();
    let mut m = Array2::<f64>::zeros((co, b * ho * wo));
    for c in 0..co {
        for bi in 0..b {
            for oi in 0..ho {
                for oj in 0..wo {
                    m[[c, bi * ho * wo + oi * wo + oj]] = x[[bi, c, oi, oj]];
                }
            }
        }
    }
    m
}

impl Tape {
    /// x: (B, Cin, H, W), w: (Cout, Cin, kh, kw) -> (B, Cout, Ho, Wo).
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let x4 = as4(&xv);
        let w4 = as4(&wv);
        let (b, cin, h, wid) = x4.dim();
        let (cout, wcin, kh, kw) = w4.dim();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let ho = out_size(h, kh, stride, pad);
        let wo = out_size(wid, kw, stride, pad);

        let col = im2col(&x4, kh, kw, stride, pad);
        let w_mat = w4
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let out_mat = w_mat.dot(&col);
        let out = mat_to_maps(&out_mat, b, ho, wo);

        self.push(
            out.into_dyn(),
            vec![x.0, w.0],
            Some(Box::new(move |g, _, p| {
                let x4 = as4(p[0]);
                let w4 = as4(p[1]);
                let (b, cin, h, wid) = x4.dim();
                let (cout, _, kh, kw) = w4.dim();
                let g4 = as4(g);
                let g_mat = maps_to_mat(&g4);
                let col = im2col(&x4, kh, kw, stride, pad);
                let dw_mat = g_mat.dot(&col.t());
                let dw = dw_mat
                    .into_shape_with_order((cout, cin, kh, kw))
                    .unwrap()
                    .into_dyn();
                let w_mat = w4
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap()
                    .to_owned();
                let dcol = w_mat.t().dot(&g_mat);
                let dx = col2im(&dcol, (b, cin, h, wid), kh, kw, stride, pad).into_dyn();
                vec![dx, dw]
            })),
        )
    }
}
