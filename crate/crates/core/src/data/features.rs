use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FEATURE_DIM;
use crate::{Box3, Error, Result, Scalar};

/// Fixed random projection standing in for detector features.
///
/// The input is `[one-hot class; h, w, l; cx, cy, cz]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePalette {
    classes: Vec<String>,
    seed: u64,
    projection: Vec<f64>,
}

impl FeaturePalette {
    pub fn new(classes: Vec<String>, seed: u64) -> Self {
        let mut p = FeaturePalette {
            classes,
            seed,
            projection: Vec::new(),
        };
        p.build();
        p
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn input_dim(&self) -> usize {
        self.classes.len() + 6
    }

    fn build(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (self.input_dim() as f64).sqrt();
        self.projection = (0..FEATURE_DIM * self.input_dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|x: f64| x * scale)
            .collect();
    }

    pub fn class_index(&self, class_label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class_label)
    }

    pub fn featurize<T: Scalar>(&self, class_label: &str, bbox: &Box3<T>) -> Result<Vec<T>> {
        let class = self.class_index(class_label).ok_or_else(|| {
            Error::contract(format!(
                "unknown class '{class_label}'; known: {}",
                self.classes.join(", ")
            ))
        })?;
        let mut input = vec![0.0; self.input_dim()];
        input[class] = 1.0;
        let geo = [bbox.h(), bbox.w(), bbox.l(), bbox.cx(), bbox.cy(), bbox.cz()];
        let c = self.classes.len();
        for (slot, g) in input[c..].iter_mut().zip(geo) {
            *slot = g.as_f64();
        }
        let d = self.input_dim();
        Ok((0..FEATURE_DIM)
            .map(|r| {
                let row = &self.projection[r * d..(r + 1) * d];
                T::of(row.iter().zip(&input).map(|(a, b)| a * b).sum())
            })
            .collect())
    }
}

pub fn featurize_object<T: Scalar>(
    class_label: &str,
    bbox: &Box3<T>,
    palette: &FeaturePalette,
) -> Result<Vec<T>> {
    palette.featurize(class_label, bbox)
}
