use serde::{Deserialize, Serialize};

use super::{DataError, EmbeddingDataset, Result};
use crate::rng::SplitMix64;

/// Parameters of the synthetic embedding generator.
///
/// Row `i` has class `i mod K` and domain `(i / K) mod D`. Its embedding is
/// `μ_class + δ_domain + σ·ε`, where the class means are random directions of
/// length `class_separation` in coordinates `shift_dims..dim`, the domain
/// offsets are random directions of length `domain_shift` in coordinates
/// `0..shift_dims`, and `ε` is standard normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub dim: usize,
    pub samples: usize,
    pub class_separation: f64,
    pub domain_shift: f64,
    pub shift_dims: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            num_domains: 3,
            dim: 64,
            samples: 3000,
            class_separation: 6.0,
            domain_shift: 0.0,
            shift_dims: 4,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.samples < self.num_classes {
            return bad("fewer samples than classes");
        }
        if self.shift_dims >= self.dim {
            return bad("shift subspace must leave room for class directions");
        }
        if self.domain_shift != 0.0 && (self.num_domains == 0 || self.shift_dims == 0) {
            return bad("a domain shift needs domains and a non-empty shift subspace");
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("domain_shift", self.domain_shift),
            ("noise", self.noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DataError::InvalidSpec(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn random_direction(rng: &mut SplitMix64, dim: usize, range: std::ops::Range<usize>, length: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for x in &mut v[range] {
        *x = rng.normal();
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= length / n);
    }
    v
}

/// Gaussian class clusters with additive per-domain offsets. Splits are left
/// untagged.
pub fn synth_generate(spec: &SynthSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let (k, d, dim) = (spec.num_classes, spec.num_domains, spec.dim);
    let mut mean_rng = SplitMix64::stream(spec.seed, 1);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| random_direction(&mut mean_rng, dim, spec.shift_dims..dim, spec.class_separation))
        .collect();
    let mut off_rng = SplitMix64::stream(spec.seed, 2);
    let offsets: Vec<Vec<f64>> = (0..d)
        .map(|_| random_direction(&mut off_rng, dim, 0..spec.shift_dims, spec.domain_shift))
        .collect();
    let mut noise_rng = SplitMix64::stream(spec.seed, 3);

    let mut emb = Vec::with_capacity(spec.samples * dim);
    let mut classes = Vec::with_capacity(spec.samples);
    let mut domains = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % k;
        classes.push(c);
        let off = if d > 0 {
            let dom = (i / k) % d;
            domains.push(dom);
            Some(&offsets[dom])
        } else {
            None
        };
        for j in 0..dim {
            let mut v = means[c][j] + spec.noise * noise_rng.normal();
            if let Some(o) = off {
                v += o[j];
            }
            emb.push(v as f32);
        }
    }
    let domains = (d > 0).then_some(domains);
    EmbeddingDataset::new(dim, emb, classes, domains, vec![None; spec.samples])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled_by_construction() {
        let spec = SynthSpec {
            samples: 300,
            domain_shift: 2.0,
            ..SynthSpec::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_classes(), 3);
        assert_eq!(a.num_domains(), Some(3));
        assert_eq!(a.class_labels()[4], 1);
        assert_eq!(a.domain_labels().unwrap()[4], 1);
        let c = synth_generate(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.embeddings(), c.embeddings());
    }

    #[test]
    fn shift_is_confined_to_subspace() {
        let base = SynthSpec {
            samples: 60,
            noise: 0.0,
            ..SynthSpec::default()
        };
        let shifted = synth_generate(&SynthSpec {
            domain_shift: 5.0,
            ..base.clone()
        })
        .unwrap();
        let plain = synth_generate(&base).unwrap();
        for i in 0..60 {
            assert_eq!(&shifted.row(i)[4..], &plain.row(i)[4..]);
        }
        assert_ne!(shifted.row(0)[..4], plain.row(0)[..4]);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec { num_classes: 1, ..SynthSpec::default() },
            SynthSpec { shift_dims: 64, ..SynthSpec::default() },
            SynthSpec { noise: -1.0, ..SynthSpec::default() },
            SynthSpec { num_domains: 0, domain_shift: 1.0, ..SynthSpec::default() },
        ] {
            assert!(matches!(synth_generate(&spec), Err(DataError::InvalidSpec(_))));
        }
    }
}
