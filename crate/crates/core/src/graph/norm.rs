//! Group normalization (population statistics, no learned affine; pair with
//! `chan_affine_static`/`chan_affine_batch` for the affine part).

use super::{Graph, Var};
use ndarray::{Array2, Ix4};

impl Graph {
    /// Normalize (B,C,H,W) per (batch, group) to zero mean / unit variance.
    pub fn group_norm(&self, x: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "group_norm: x must be 4-d");
        let v = xv.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = v.dim();
        assert!(groups >= 1 && c % groups == 0, "group_norm: groups must divide C");
        let gc = c / groups;
        let n = (gc * h * w) as f64;
        let mut out = v.to_owned();
        let mut invstd = Array2::<f64>::zeros((b, groups));
        for bi in 0..b {
            for gi in 0..groups {
                let mut slab = out.slice_mut(ndarray::s![bi, gi * gc..(gi + 1) * gc, .., ..]);
                let mean = slab.sum() / n;
                let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                slab.mapv_inplace(|v| (v - mean) * inv);
                invstd[[bi, gi]] = inv;
            }
        }
        let y = out.clone().into_dyn().into_shared();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let y4 = y.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = g4.to_owned();
                for bi in 0..b {
                    for gi in 0..groups {
                        let gs = g4.slice(ndarray::s![bi, gi * gc..(gi + 1) * gc, .., ..]);
                        let ys = y4.slice(ndarray::s![bi, gi * gc..(gi + 1) * gc, .., ..]);
                        let mean_g = gs.sum() / n;
                        let mean_gy = gs
                            .iter()
                            .zip(ys.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        let inv = invstd[[bi, gi]];
                        let mut ds =
                            dx.slice_mut(ndarray::s![bi, gi * gc..(gi + 1) * gc, .., ..]);
                        ndarray::Zip::from(&mut ds).and(&ys).for_each(|d, &yv| {
                            *d = inv * (*d - mean_g - yv * mean_gy);
                        });
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
    use ndarray::ArrayD;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn normalized_groups_have_zero_mean_unit_var() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 4, 3, 3]), |_| rng.gen::<f64>() * 5.0);
        let g = Graph::new();
        let xv = g.input(x);
        let y = g.group_norm(xv, 2, 1e-6);
        let yv = g.array(y);
        for bi in 0..2 {
            for gi in 0..2 {
                let slab = yv.slice(ndarray::s![bi, gi * 2..(gi + 1) * 2, .., ..]);
                let n = slab.len() as f64;
                let mean = slab.sum() / n;
                let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-10, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "group var {var}");
            }
        }
    }
}
