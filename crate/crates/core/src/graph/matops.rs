//! Matrix products, batched matmul, transposes, reshape, softmax.

use super::{Arr, Graph, Var};
use ndarray::{Array2, Array3, ArrayView2, Axis, Ix2, Ix3, IxDyn};

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d operand")
}

pub(crate) fn dot2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    a.dot(&b)
}

impl Graph {
    /// (M,K) x (K,N) -> (M,N).
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 2, "matmul: a must be 2-d");
        assert_eq!(bv.ndim(), 2, "matmul: b must be 2-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dims");
        let out = dot2(as2(&av.to_owned()), as2(&bv.to_owned())).into_dyn();
        let avc = av.clone();
        let bvc = bv.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let at = avc.view().into_dimensionality::<Ix2>().unwrap();
                let bt = bvc.view().into_dimensionality::<Ix2>().unwrap();
                sink(a.0, g2.dot(&bt.t()).into_dyn());
                sink(b.0, at.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Batched matmul: (B,M,K) x (B,K,N) -> (B,M,N).
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 3, "bmm: a must be 3-d");
        assert_eq!(bv.ndim(), 3, "bmm: b must be 3-d");
        let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bsz2, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(bsz, bsz2, "bmm: batch sizes");
        assert_eq!(k, k2, "bmm: inner dims");
        let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = Array3::<f64>::zeros((bsz, m, n));
        for i in 0..bsz {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        let avc = av.clone();
        let bvc = bv.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = avc.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = bvc.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = Array3::<f64>::zeros(a3.raw_dim());
                let mut db = Array3::<f64>::zeros(b3.raw_dim());
                for i in 0..a3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                sink(a.0, da.into_dyn());
                sink(b.0, db.into_dyn());
            })),
        )
    }

    /// Swap axes 1 and 2 of a 3-d tensor: (B,M,N) -> (B,N,M).
    pub fn transpose12(&self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 3, "transpose12: operand must be 3-d");
        let out = av
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1]))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gt = g
                    .view()
                    .permuted_axes(IxDyn(&[0, 2, 1]))
                    .as_standard_layout()
                    .to_owned();
                sink(a.0, gt);
            })),
        )
    }

    /// Reshape to a new shape with the same element count.
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let old_shape: Vec<usize> = av.shape().to_vec();
        let n: usize = shape.iter().product();
        assert_eq!(av.len(), n, "reshape: element count");
        let out = av
            .view()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gr = g
                    .view()
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .unwrap();
                sink(a.0, gr);
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let av = self.value(a);
        let last = av.ndim() - 1;
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let _ = last;
        let y = out.clone().into_shared();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                let yv = y.view();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(yv.rows()) {
                    let dot: f64 = drow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(d, y)| d * y)
                        .sum();
                    for (d, yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d = (*d - dot) * yv;
                    }
                }
                sink(a.0, dx);
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use ndarray::{arr2, arr3};

    #[test]
    fn matmul_forward_and_grads() {
        let g = Graph::new();
        let a = g.input(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.input(arr2(&[[5.0], [6.0]]).into_dyn());
        let y = g.matmul(a, b);
        let yv = g.array(y);
        assert_eq!(yv.shape(), &[2, 1]);
        assert_eq!(yv[[0, 0]], 17.0);
        assert_eq!(yv[[1, 0]], 39.0);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let ga = grads.get(a).unwrap();
        // dL/da = ones(2,1) . b^T = [[5,6],[5,6]]
        assert_eq!(ga[[0, 0]], 5.0);
        assert_eq!(ga[[1, 1]], 6.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let a = g.input(arr3(&[[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]]).into_dyn());
        let y = g.softmax_last(a);
        let yv = g.array(y);
        let r0: f64 = (0..3).map(|j| yv[[0, 0, j]]).sum();
        let r1: f64 = (0..3).map(|j| yv[[0, 1, j]]).sum();
        assert!((r0 - 1.0).abs() < 1e-12);
        assert!((r1 - 1.0).abs() < 1e-12);
        assert!((yv[[0, 1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn transpose_roundtrip() {
        let g = Graph::new();
        let a = g.input(arr3(&[[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]]).into_dyn());
        let t = g.transpose12(a);
        let tt = g.transpose12(t);
        assert_eq!(g.array(tt), g.array(a));
        assert_eq!(g.shape(t), vec![1, 2, 3]);
    }
}
