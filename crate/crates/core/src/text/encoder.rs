use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ResolvedPrompt;
use crate::rng::Rng;

pub const DEFAULT_EMBED_DIM: usize = 768;

/// Deterministic map from a resolved prompt to a fixed-length vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &ResolvedPrompt) -> Vec<f32>;
}

/// Hash-seeded Gaussian direction, normalized to unit length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTextEncoder {
    pub seed: u64,
    pub dim: usize,
}

impl Default for ToyTextEncoder {
    fn default() -> Self {
        Self { seed: 0, dim: DEFAULT_EMBED_DIM }
    }
}

impl ToyTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { seed, dim }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, p: &ResolvedPrompt) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(p.modality.as_str().as_bytes());
        h.update([0u8]);
        h.update(p.class_id.to_le_bytes());
        h.update(p.canonical_name.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = Rng::from_seed(key);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| (x / norm) as f32).collect()
    }
}

/// A resolved prompt together with its embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextQuery {
    pub prompt: ResolvedPrompt,
    pub embedding: Vec<f32>,
}

impl TextQuery {
    pub fn encode(prompt: ResolvedPrompt, encoder: &dyn TextEncoder) -> Self {
        let embedding = encoder.encode(&prompt);
        Self { prompt, embedding }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::InstanceLabel;
    use crate::volume::Modality;
    use rand::Rng as _;

    fn prompt(m: Modality, id: u32, name: &str) -> ResolvedPrompt {
        ResolvedPrompt {
            sentence: name.into(),
            instance_label: InstanceLabel::Anatomy,
            modality: m,
            class_id: id,
            canonical_name: name.into(),
        }
    }

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = ToyTextEncoder::default();
        let p = prompt(Modality::CT, 1, "Liver");
        let a = e.encode(&p);
        assert_eq!(a, e.encode(&p));
        assert_eq!(a.len(), 768);
        assert!((cos(&a, &a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sentence_does_not_matter() {
        let e = ToyTextEncoder::default();
        let mut p = prompt(Modality::CT, 3, "Kidney");
        let a = e.encode(&p);
        p.sentence = "both kidneys on CT".into();
        assert_eq!(a, e.encode(&p));
    }

    #[test]
    fn distinct_pairs_are_far_apart() {
        let e = ToyTextEncoder::default();
        let mut rng = crate::rng::seeded(5);
        for _ in 0..1000 {
            let m1 = Modality::ALL[rng.random_range(0..Modality::ALL.len())];
            let m2 = Modality::ALL[rng.random_range(0..Modality::ALL.len())];
            let (i1, i2) = (rng.random_range(1..200u32), rng.random_range(1..200u32));
            if m1 == m2 && i1 == i2 {
                continue;
            }
            let a = e.encode(&prompt(m1, i1, &format!("c{i1}")));
            let b = e.encode(&prompt(m2, i2, &format!("c{i2}")));
            assert!(cos(&a, &b) < 0.99);
        }
    }
}
