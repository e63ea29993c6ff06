//! The multi-resolution latent stack: an ordered list of 4-d tensors, one per
//! configured level, that jointly encode one image.

use crate::error::{PdmError, Result};
use crate::graph::Arr;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// One pyramid level: `resolution` is the latent height; the latent width is
/// `resolution * image_w / image_h` so non-square images keep their aspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub resolution: usize,
    pub channels: usize,
}

/// The ordered multi-resolution latent layout, coarsest level first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub levels: Vec<LevelSpec>,
    /// (height, width)
    pub image_size: (usize, usize),
    pub image_channels: usize,
}

impl PyramidSpec {
    pub fn new(
        levels: Vec<(usize, usize)>,
        image_size: (usize, usize),
        image_channels: usize,
    ) -> Result<Self> {
        let spec = Self {
            levels: levels
                .into_iter()
                .map(|(resolution, channels)| LevelSpec {
                    resolution,
                    channels,
                })
                .collect(),
            image_size,
            image_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || self.image_channels == 0 {
            return Err(PdmError::invalid("image dimensions must be positive"));
        }
        if self.levels.is_empty() {
            return Err(PdmError::invalid("pyramid needs at least one level"));
        }
        let mut prev = 0usize;
        for (i, level) in self.levels.iter().enumerate() {
            if level.resolution == 0 || level.channels == 0 {
                return Err(PdmError::invalid(format!(
                    "level {i}: resolution and channels must be positive"
                )));
            }
            if level.resolution <= prev {
                return Err(PdmError::invalid(
                    "level resolutions must be strictly increasing",
                ));
            }
            if h % level.resolution != 0 {
                return Err(PdmError::invalid(format!(
                    "level {i}: resolution {} does not divide image height {h}",
                    level.resolution
                )));
            }
            if (level.resolution * w) % h != 0 {
                return Err(PdmError::invalid(format!(
                    "level {i}: scaled width {}*{w}/{h} is not integral",
                    level.resolution
                )));
            }
            if w % self.level_width(i) != 0 {
                return Err(PdmError::invalid(format!(
                    "level {i}: width {} does not divide image width {w}",
                    self.level_width(i)
                )));
            }
            prev = level.resolution;
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_height(&self, i: usize) -> usize {
        self.levels[i].resolution
    }

    pub fn level_width(&self, i: usize) -> usize {
        self.levels[i].resolution * self.image_size.1 / self.image_size.0
    }

    pub fn latent_shape(&self, i: usize, batch: usize) -> [usize; 4] {
        [
            batch,
            self.levels[i].channels,
            self.level_height(i),
            self.level_width(i),
        ]
    }

    /// Total latent elements per image.
    pub fn latent_elements(&self) -> usize {
        (0..self.levels.len())
            .map(|i| self.levels[i].channels * self.level_height(i) * self.level_width(i))
            .sum()
    }

    pub fn image_elements(&self) -> usize {
        self.image_size.0 * self.image_size.1 * self.image_channels
    }
}

/// Image elements over latent elements, e.g. 256 for a 1024x1024x3 image with
/// 16x16x32 + 8x8x64 latents.
pub fn compression_rate(spec: &PyramidSpec) -> f64 {
    spec.image_elements() as f64 / spec.latent_elements() as f64
}

/// The ordered latent stack, one 4-d tensor per spec level, shared batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLatent {
    pub tensors: Vec<Arr>,
}

impl PyramidLatent {
    pub fn new(tensors: Vec<Arr>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(PdmError::invalid("pyramid latent needs at least one level"));
        }
        let batch = tensors[0].shape()[0];
        for (i, t) in tensors.iter().enumerate() {
            if t.ndim() != 4 {
                return Err(PdmError::shape("4-d tensor", format!("{:?}", t.shape())));
            }
            if t.shape()[0] != batch {
                return Err(PdmError::invalid(format!(
                    "level {i}: batch {} differs from level 0 batch {batch}",
                    t.shape()[0]
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn batch(&self) -> usize {
        self.tensors[0].shape()[0]
    }

    pub fn num_levels(&self) -> usize {
        self.tensors.len()
    }

    /// Check this latent against a spec.
    pub fn validate(&self, spec: &PyramidSpec) -> Result<()> {
        if self.tensors.len() != spec.num_levels() {
            return Err(PdmError::shape(
                format!("{} levels", spec.num_levels()),
                format!("{} levels", self.tensors.len()),
            ));
        }
        let batch = self.batch();
        for (i, t) in self.tensors.iter().enumerate() {
            let want = spec.latent_shape(i, batch);
            if t.shape() != want {
                return Err(PdmError::shape(
                    format!("{want:?}"),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn zeros(spec: &PyramidSpec, batch: usize) -> Self {
        Self {
            tensors: (0..spec.num_levels())
                .map(|i| ArrayD::zeros(IxDyn(&spec.latent_shape(i, batch))))
                .collect(),
        }
    }

    pub fn standard_normal(spec: &PyramidSpec, batch: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            tensors: (0..spec.num_levels())
                .map(|i| {
                    ArrayD::from_shape_simple_fn(IxDyn(&spec.latent_shape(i, batch)), || {
                        StandardNormal.sample(rng)
                    })
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| t.mapv(&f)).collect(),
        }
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: f64, other: &PyramidLatent) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += &(b * alpha);
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| t * c).collect(),
        }
    }

    /// Weighted sum of latents sharing one layout.
    pub fn linear_comb(terms: &[(f64, &PyramidLatent)]) -> Self {
        assert!(!terms.is_empty());
        let mut out = terms[0].1.scaled(terms[0].0);
        for (c, l) in &terms[1..] {
            out.axpy(*c, l);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Flat L2 norm over all levels.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateMode {
    /// Keep only `level`; zero every other level.
    IncludeOnly,
    /// Zero only `level`; keep every other level.
    ExcludeOnly,
}

/// Zero out levels per the ablation protocol. Pure: the input is untouched.
pub fn ablate_latents(
    latent: &PyramidLatent,
    mode: AblateMode,
    level: usize,
) -> Result<PyramidLatent> {
    if level >= latent.num_levels() {
        return Err(PdmError::invalid(format!(
            "ablate level {level} out of range (have {} levels)",
            latent.num_levels()
        )));
    }
    let tensors = latent
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let keep = match mode {
                AblateMode::IncludeOnly => i == level,
                AblateMode::ExcludeOnly => i != level,
            };
            if keep {
                t.clone()
            } else {
                ArrayD::zeros(t.raw_dim())
            }
        })
        .collect();
    Ok(PyramidLatent { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn spec_64() -> PyramidSpec {
        PyramidSpec::new(vec![(4, 32), (8, 16), (16, 8)], (64, 64), 3).unwrap()
    }

    #[test]
    fn paper_compression_example_is_exact_256() {
        let spec = PyramidSpec::new(vec![(8, 64), (16, 32)], (1024, 1024), 3).unwrap();
        assert_eq!(compression_rate(&spec), 256.0);
    }

    #[test]
    fn single_level_compression_of_one() {
        // One level with exactly the image element count.
        let spec = PyramidSpec::new(vec![(8, 3)], (8, 8), 3).unwrap();
        assert_eq!(compression_rate(&spec), 1.0);
    }

    #[test]
    fn desk_scale_compression_arithmetic() {
        let spec = spec_64();
        let total = 4 * 4 * 32 + 8 * 8 * 16 + 16 * 16 * 8;
        assert_eq!(total, 3584);
        let want = 12288.0 / 3584.0;
        assert!((compression_rate(&spec) - want).abs() < 1e-12);
    }

    #[test]
    fn spec_rejects_bad_layouts() {
        assert!(PyramidSpec::new(vec![], (64, 64), 3).is_err());
        assert!(PyramidSpec::new(vec![(8, 4), (8, 4)], (64, 64), 3).is_err());
        assert!(PyramidSpec::new(vec![(16, 4), (8, 4)], (64, 64), 3).is_err());
        assert!(PyramidSpec::new(vec![(5, 4)], (64, 64), 3).is_err());
        assert!(PyramidSpec::new(vec![(0, 4)], (64, 64), 3).is_err());
    }

    #[test]
    fn non_square_levels_keep_aspect() {
        let spec = PyramidSpec::new(vec![(4, 8), (8, 4)], (64, 128), 3).unwrap();
        assert_eq!(spec.latent_shape(0, 2), [2, 8, 4, 8]);
        assert_eq!(spec.latent_shape(1, 2), [2, 4, 8, 16]);
    }

    #[test]
    fn ablation_partitions_the_pyramid() {
        let spec = spec_64();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let z = PyramidLatent::standard_normal(&spec, 2, &mut rng);
        for level in 0..3 {
            let inc = ablate_latents(&z, AblateMode::IncludeOnly, level).unwrap();
            let exc = ablate_latents(&z, AblateMode::ExcludeOnly, level).unwrap();
            for i in 0..3 {
                let sum = &inc.tensors[i] + &exc.tensors[i];
                assert_eq!(sum, z.tensors[i], "level {level} tensor {i}");
            }
        }
    }

    #[test]
    fn ablation_examples_from_contract() {
        let spec = spec_64();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let z = PyramidLatent::standard_normal(&spec, 1, &mut rng);
        let inc1 = ablate_latents(&z, AblateMode::IncludeOnly, 1).unwrap();
        assert!(inc1.tensors[0].iter().all(|&v| v == 0.0));
        assert_eq!(inc1.tensors[1], z.tensors[1]);
        assert!(inc1.tensors[2].iter().all(|&v| v == 0.0));
        let exc0 = ablate_latents(&z, AblateMode::ExcludeOnly, 0).unwrap();
        assert!(exc0.tensors[0].iter().all(|&v| v == 0.0));
        assert_eq!(exc0.tensors[1], z.tensors[1]);
        assert_eq!(exc0.tensors[2], z.tensors[2]);
        // single-level include-only is the identity
        let one = PyramidSpec::new(vec![(4, 8)], (64, 64), 3).unwrap();
        let z1 = PyramidLatent::standard_normal(&one, 1, &mut rng);
        let same = ablate_latents(&z1, AblateMode::IncludeOnly, 0).unwrap();
        assert_eq!(same, z1);
        assert!(ablate_latents(&z1, AblateMode::IncludeOnly, 1).is_err());
    }
}
