//! Elementwise ops, reductions, activations and broadcast affines.

use super::{Graph, Var};
use ndarray::{ArrayD, Axis, IxDyn};

fn assert_same_shape(op: &str, a: &[usize], b: &[usize]) {
    assert_eq!(a, b, "{op}: operand shapes differ: {a:?} vs {b:?}");
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_same_shape("add", av.shape(), bv.shape());
        let out = &av.view() + &bv.view();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_same_shape("sub", av.shape(), bv.shape());
        let out = &av.view() - &bv.view();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, -g.clone());
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_same_shape("mul", av.shape(), bv.shape());
        let out = &av.view() * &bv.view();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &bv.view());
                sink(b.0, g * &av.view());
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_same_shape("div", av.shape(), bv.shape());
        let out = &av.view() / &bv.view();
        let outv = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g / &bv.view());
                sink(b.0, -(g * &outv.view()) / &bv.view());
            })),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let av = self.value(a);
        self.push(
            -av.to_owned(),
            Some(Box::new(move |g, sink| sink(a.0, -g.clone()))),
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        self.push(
            av.to_owned() * c,
            Some(Box::new(move |g, sink| sink(a.0, g * c))),
        )
    }

    /// Add a compile-time constant.
    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        self.push(
            av.to_owned() + c,
            Some(Box::new(move |g, sink| sink(a.0, g.clone()))),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::tanh);
        let y = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &y.mapv(|v| 1.0 - v * v));
            })),
        )
    }

    /// x * sigmoid(x).
    pub fn silu(&self, a: Var) -> Var {
        let av = self.value(a);
        let sig = av.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let out = &av.view() * &sig.view();
        let sigv = sig.into_shared();
        let xv = av.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                // d/dx [x*s(x)] = s(x) * (1 + x*(1 - s(x)))
                let d = ndarray::Zip::from(&sigv)
                    .and(&xv)
                    .map_collect(|&s, &x| s * (1.0 + x * (1.0 - s)));
                sink(a.0, g * &d);
            })),
        )
    }

    /// elu(x) + 1: x+1 for x>0, exp(x) otherwise. Strictly positive feature
    /// map used by kernelized linear attention.
    pub fn elu1p(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|v| if v > 0.0 { v + 1.0 } else { v.exp() });
        let xv = av.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = xv.mapv(|v| if v > 0.0 { 1.0 } else { v.exp() });
                sink(a.0, g * &d);
            })),
        )
    }

    /// Elementwise square root (inputs must be non-negative; the gradient is
    /// g / (2 sqrt(x)), so keep inputs bounded away from zero).
    pub fn sqrt(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::sqrt);
        let y = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g / &(y.to_owned() * 2.0));
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::exp);
        let y = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| sink(a.0, g * &y.view()))),
        )
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::abs);
        let xv = av.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = xv.mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                sink(a.0, g * &d);
            })),
        )
    }

    /// Sum of all elements -> 0-d scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let dim = av.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), av.sum());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gs = *g.iter().next().unwrap();
                sink(a.0, ArrayD::from_elem(dim.clone(), gs));
            })),
        )
    }

    /// Mean of all elements -> 0-d scalar.
    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Multiply a tensor by a 0-d scalar node.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.len(), 1, "mul_scalar_var: scalar operand must be 0-d");
        let sc = *sv.iter().next().unwrap();
        let out = av.to_owned() * sc;
        let avc = av.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * sc);
                let ds = (g * &avc.view()).sum();
                sink(s.0, ArrayD::from_elem(IxDyn(&[]), ds));
            })),
        )
    }

    /// Divide a tensor by a 0-d scalar node.
    pub fn div_scalar_var(&self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.len(), 1, "div_scalar_var: scalar operand must be 0-d");
        let sc = *sv.iter().next().unwrap();
        let out = av.to_owned() / sc;
        let y = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g / sc);
                let ds = -(g * &y.view()).sum() / sc;
                sink(s.0, ArrayD::from_elem(IxDyn(&[]), ds));
            })),
        )
    }

    /// x (B,C,H,W) + bias (C), broadcast over batch and space.
    pub fn add_bias_chan(&self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(xv.ndim(), 4, "add_bias_chan: x must be 4-d");
        assert_eq!(bv.ndim(), 1, "add_bias_chan: bias must be 1-d");
        assert_eq!(xv.shape()[1], bv.shape()[0], "add_bias_chan: channel count");
        let mut out = xv.to_owned();
        {
            let b1 = bv.view().into_shape_with_order((1, bv.len(), 1, 1)).unwrap();
            out += &b1.into_dyn();
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone());
                // sum over batch, height, width
                let db = g
                    .sum_axis(Axis(3))
                    .sum_axis(Axis(2))
                    .sum_axis(Axis(0));
                sink(bias.0, db);
            })),
        )
    }

    /// x (B,C,H,W) * w(C) + b(C): per-channel learned affine.
    pub fn chan_affine_static(&self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.ndim(), 4, "chan_affine_static: x must be 4-d");
        let c = xv.shape()[1];
        assert_eq!(wv.shape(), &[c], "chan_affine_static: w shape");
        assert_eq!(bv.shape(), &[c], "chan_affine_static: b shape");
        let w4 = wv
            .view()
            .into_shape_with_order((1, c, 1, 1))
            .unwrap()
            .into_dyn()
            .to_owned();
        let b4 = bv
            .view()
            .into_shape_with_order((1, c, 1, 1))
            .unwrap()
            .into_dyn()
            .to_owned();
        let out = &xv.view() * &w4 + &b4;
        let xvc = xv.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, g * &w4);
                let gx = g * &xvc.view();
                let dw = gx.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                sink(w.0, dw);
                sink(b.0, db);
            })),
        )
    }

    /// x (B,C,H,W) * s(B,C) + t(B,C): adaptive (per-sample) channel affine.
    pub fn chan_affine_batch(&self, x: Var, s: Var, t: Var) -> Var {
        let (xv, sv, tv) = (self.value(x), self.value(s), self.value(t));
        assert_eq!(xv.ndim(), 4, "chan_affine_batch: x must be 4-d");
        let (bsz, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(sv.shape(), &[bsz, c], "chan_affine_batch: s shape");
        assert_eq!(tv.shape(), &[bsz, c], "chan_affine_batch: t shape");
        let s4 = sv
            .view()
            .into_shape_with_order((bsz, c, 1, 1))
            .unwrap()
            .into_dyn()
            .to_owned();
        let t4 = tv
            .view()
            .into_shape_with_order((bsz, c, 1, 1))
            .unwrap()
            .into_dyn()
            .to_owned();
        let out = &xv.view() * &s4 + &t4;
        let xvc = xv.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, g * &s4);
                let gx = g * &xvc.view();
                let ds = gx.sum_axis(Axis(3)).sum_axis(Axis(2));
                let dt = g.sum_axis(Axis(3)).sum_axis(Axis(2));
                sink(s.0, ds);
                sink(t.0, dt);
            })),
        )
    }

    /// x (B,D) + row vector (D).
    pub fn add_rowvec(&self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(xv.ndim(), 2, "add_rowvec: x must be 2-d");
        assert_eq!(bv.ndim(), 1, "add_rowvec: b must be 1-d");
        assert_eq!(xv.shape()[1], bv.shape()[0], "add_rowvec: width");
        let b2 = bv
            .view()
            .into_shape_with_order((1, bv.len()))
            .unwrap()
            .into_dyn()
            .to_owned();
        let out = &xv.view() + &b2;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone());
                sink(b.0, g.sum_axis(Axis(0)));
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use ndarray::{arr1, arr2};

    #[test]
    fn div_backward_matches_quotient_rule() {
        let g = Graph::new();
        let a = g.input(arr1(&[2.0, 6.0]).into_dyn());
        let b = g.input(arr1(&[4.0, 3.0]).into_dyn());
        let y = g.div(a, b);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let ga = grads.get(a).unwrap();
        let gb = grads.get(b).unwrap();
        assert!((ga[[0]] - 0.25).abs() < 1e-12);
        assert!((gb[[0]] - (-2.0 / 16.0)).abs() < 1e-12);
        assert!((gb[[1]] - (-6.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn rowvec_bias_sums_over_batch() {
        let g = Graph::new();
        let x = g.input(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.input(arr1(&[10.0, 20.0]).into_dyn());
        let y = g.add_rowvec(x, b);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let gb = grads.get(b).unwrap();
        assert_eq!(gb[[0]], 2.0);
        assert_eq!(gb[[1]], 2.0);
    }
}
