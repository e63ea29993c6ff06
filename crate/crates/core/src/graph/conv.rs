//! Stride-1 same-padding convolution (im2col + GEMM), 2x2 average pooling
//! and nearest-neighbor 2x up-sampling.

use super::{Arr, Graph, Shared, Var};
use ndarray::{Array2, Array4, ArrayView4, Axis, Ix4};

fn as4(a: &Shared) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("4-d operand")
}

/// col[(ci*kh + ki)*kw + kj, b*H*W + y*W + x] = x_pad[b, ci, y+ki-ph, x+kj-pw]
fn im2col(x: ArrayView4<'_, f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (b, cin, h, w) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut col = Array2::<f64>::zeros((cin * kh * kw, b * h * w));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let x0 = pw.saturating_sub(kj);
                let x1 = (w + pw).saturating_sub(kj).min(w);
                if x0 >= x1 {
                    continue;
                }
                let mut row = col.row_mut(r);
                for bi in 0..b {
                    for y in 0..h {
                        let yin = y + ki;
                        if yin < ph || yin - ph >= h {
                            continue;
                        }
                        let yin = yin - ph;
                        let base = bi * h * w + y * w;
                        let src = x.slice(ndarray::s![bi, ci, yin, x0 + kj - pw..x1 + kj - pw]);
                        row.slice_mut(ndarray::s![base + x0..base + x1]).assign(&src);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of im2col: scatter col gradients back onto the input.
fn col2im(dcol: &Array2<f64>, b: usize, cin: usize, h: usize, w: usize, kh: usize, kw: usize) -> Array4<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = Array4::<f64>::zeros((b, cin, h, w));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let x0 = pw.saturating_sub(kj);
                let x1 = (w + pw).saturating_sub(kj).min(w);
                if x0 >= x1 {
                    continue;
                }
                let row = dcol.row(r);
                for bi in 0..b {
                    for y in 0..h {
                        let yin = y + ki;
                        if yin < ph || yin - ph >= h {
                            continue;
                        }
                        let yin = yin - ph;
                        let base = bi * h * w + y * w;
                        let mut dst =
                            dx.slice_mut(ndarray::s![bi, ci, yin, x0 + kj - pw..x1 + kj - pw]);
                        dst += &row.slice(ndarray::s![base + x0..base + x1]);
                    }
                }
            }
        }
    }
    dx
}

fn gemm_out_to_nchw(ym: Array2<f64>, b: usize, cout: usize, h: usize, w: usize) -> Arr {
    // (Cout, B*H*W) -> (B, Cout, H, W)
    ym.into_shape_with_order((cout, b, h, w))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_dyn()
}

fn nchw_to_gemm(dy: &Arr) -> Array2<f64> {
    // (B, Cout, H, W) -> (Cout, B*H*W)
    let v = dy.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = v.dim();
    v.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((c, b * h * w))
        .unwrap()
}

impl Graph {
    /// 2-d convolution, stride 1, odd square kernel, same padding.
    /// x: (B, Cin, H, W), weight: (Cout, Cin, k, k), bias: (Cout) optional.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(weight));
        assert_eq!(xv.ndim(), 4, "conv2d: x must be 4-d");
        assert_eq!(wv.ndim(), 4, "conv2d: weight must be 4-d");
        let (b, cin, h, w) = as4(&xv).dim();
        let (cout, cin_w, kh, kw) = as4(&wv).dim();
        assert_eq!(cin, cin_w, "conv2d: input channels");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel must be odd");
        let col = im2col(as4(&xv), kh, kw);
        let wmat = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let mut ym = wmat.dot(&col);
        if let Some(bias) = bias {
            let bv = self.value(bias);
            assert_eq!(bv.shape(), &[cout], "conv2d: bias shape");
            for (mut row, bval) in ym.rows_mut().into_iter().zip(bv.iter()) {
                row += *bval;
            }
        }
        let out = gemm_out_to_nchw(ym, b, cout, h, w);
        let xvc = xv.clone();
        let wvc = wv.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let dym = nchw_to_gemm(g); // (Cout, B*H*W)
                let col = im2col(as4(&xvc), kh, kw);
                let wmat = wvc
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap()
                    .to_owned();
                let dw = dym.dot(&col.t());
                sink(
                    weight.0,
                    dw.into_shape_with_order((cout, cin, kh, kw))
                        .unwrap()
                        .into_dyn(),
                );
                let dcol = wmat.t().dot(&dym);
                sink(x.0, col2im(&dcol, b, cin, h, w, kh, kw).into_dyn());
                if let Some(bias) = bias {
                    let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    sink(bias.0, db);
                }
            })),
        )
    }

    /// 2x2 average pooling, stride 2. Spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let v = as4(&xv);
        let (b, c, h, w) = v.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let s = v[[bi, ci, 2 * y, 2 * xo]]
                            + v[[bi, ci, 2 * y, 2 * xo + 1]]
                            + v[[bi, ci, 2 * y + 1, 2 * xo]]
                            + v[[bi, ci, 2 * y + 1, 2 * xo + 1]];
                        out[[bi, ci, y, xo]] = s * 0.25;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let gv = g4[[bi, ci, y, xo]] * 0.25;
                                dx[[bi, ci, 2 * y, 2 * xo]] += gv;
                                dx[[bi, ci, 2 * y, 2 * xo + 1]] += gv;
                                dx[[bi, ci, 2 * y + 1, 2 * xo]] += gv;
                                dx[[bi, ci, 2 * y + 1, 2 * xo + 1]] += gv;
                            }
                        }
                    }
                }
                sink(x.0, dx.into_dyn());
            })),
        )
    }

    /// Nearest-neighbor 2x up-sampling.
    pub fn upsample2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let v = as4(&xv);
        let (b, c, h, w) = v.dim();
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xo in 0..w {
                        let val = v[[bi, ci, y, xo]];
                        out[[bi, ci, 2 * y, 2 * xo]] = val;
                        out[[bi, ci, 2 * y, 2 * xo + 1]] = val;
                        out[[bi, ci, 2 * y + 1, 2 * xo]] = val;
                        out[[bi, ci, 2 * y + 1, 2 * xo + 1]] = val;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xo in 0..w {
                                dx[[bi, ci, y, xo]] = g4[[bi, ci, 2 * y, 2 * xo]]
                                    + g4[[bi, ci, 2 * y, 2 * xo + 1]]
                                    + g4[[bi, ci, 2 * y + 1, 2 * xo]]
                                    + g4[[bi, ci, 2 * y + 1, 2 * xo + 1]];
                            }
                        }
                    }
                }
                sink(x.0, dx.into_dyn());
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use ndarray::{Array4, ArrayD};

    #[test]
    fn conv1x1_is_channel_matmul() {
        let g = Graph::new();
        let mut x = Array4::<f64>::zeros((1, 2, 1, 1));
        x[[0, 0, 0, 0]] = 3.0;
        x[[0, 1, 0, 0]] = 4.0;
        let mut w = Array4::<f64>::zeros((1, 2, 1, 1));
        w[[0, 0, 0, 0]] = 10.0;
        w[[0, 1, 0, 0]] = 0.5;
        let xv = g.input(x.into_dyn());
        let wv = g.input(w.into_dyn());
        let y = g.conv2d(xv, wv, None);
        assert_eq!(g.array(y)[[0, 0, 0, 0]], 32.0);
    }

    #[test]
    fn conv3x3_identity_kernel() {
        let g = Graph::new();
        let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 1, 4, 4]), |ix| {
            (ix[2] * 4 + ix[3]) as f64
        });
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0; // center tap
        let xv = g.input(x.clone());
        let wv = g.input(w.into_dyn());
        let y = g.conv2d(xv, wv, None);
        assert_eq!(g.array(y), x);
    }

    #[test]
    fn pool_then_upsample_of_constant_is_identity() {
        let g = Graph::new();
        let x = ArrayD::from_elem(ndarray::IxDyn(&[2, 3, 4, 4]), 0.7);
        let xv = g.input(x.clone());
        let p = g.avg_pool2(xv);
        let u = g.upsample2(p);
        assert_eq!(g.array(u), x);
    }
}
