use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::instruction::MultiModalInstruction;

/// Default number of generated variants per visual prompt.
pub const DEFAULT_VARIANTS: usize = 5;

/// Line shape of the augmentation store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub image_ref: String,
    pub variants: Vec<String>,
}

/// Generated variants of prompt images, keyed by the original reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentStore {
    variants: HashMap<String, Vec<String>>,
}

impl AugmentStore {
    pub fn new(records: Vec<AugmentRecord>) -> Result<Self, PipelineError> {
        let mut variants: HashMap<String, Vec<String>> = HashMap::new();
        for r in records {
            if r.variants.contains(&r.image_ref) {
                return Err(PipelineError::InvalidAugmentation(r.image_ref));
            }
            variants.entry(r.image_ref).or_default().extend(r.variants);
        }
        Ok(Self { variants })
    }

    pub fn variants(&self, image_ref: &str) -> &[String] {
        self.variants
            .get(image_ref)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

/// Replaces each prompt image, independently with probability `gamma`, by
/// one of its first `max_variants` stored variants chosen uniformly.
/// Prompts without variants are kept. One Bernoulli draw is made per prompt
/// either way, so a fixed seed gives the same decisions across stores.
pub fn sample_augmented(
    mmi: &MultiModalInstruction,
    store: &AugmentStore,
    gamma: f64,
    max_variants: usize,
    seed: u64,
) -> MultiModalInstruction {
    let gamma = gamma.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mmi.map_image_refs(|p| {
        let replace = rng.random_bool(gamma);
        let pool = store.variants(&p.image_ref);
        let pool = &pool[..pool.len().min(max_variants)];
        if replace && !pool.is_empty() {
            pool[rng.random_range(0..pool.len())].clone()
        } else {
            p.image_ref.clone()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::tests::{prompt, record};
    use crate::instruction::{interleave, validate_instruction, PhraseSpan};

    fn many_prompts(n: usize) -> MultiModalInstruction {
        let mut rec = record(&[], &[], &["a"]);
        rec.tokens = (0..n).map(|i| format!("w{i}")).collect();
        rec.phrases = (1..=n).map(|i| PhraseSpan::new("", i, i)).collect();
        let base = validate_instruction(rec).unwrap();
        interleave(
            base,
            (0..n).map(|i| prompt(i, &format!("img{i}"))).collect(),
        )
        .unwrap()
    }

    fn store_for(n: usize) -> AugmentStore {
        AugmentStore::new(
            (0..n)
                .map(|i| AugmentRecord {
                    image_ref: format!("img{i}"),
                    variants: (0..DEFAULT_VARIANTS)
                        .map(|k| format!("img{i}_aug{k}"))
                        .collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn substituted(a: &MultiModalInstruction, b: &MultiModalInstruction) -> usize {
        a.prompts()
            .iter()
            .zip(b.prompts())
            .filter(|(x, y)| x.image_ref != y.image_ref)
            .count()
    }

    #[test]
    fn gamma_extremes() {
        let mmi = many_prompts(50);
        let store = store_for(50);
        assert_eq!(
            sample_augmented(&mmi, &store, 0.0, DEFAULT_VARIANTS, 3),
            mmi
        );
        let all = sample_augmented(&mmi, &store, 1.0, DEFAULT_VARIANTS, 3);
        assert_eq!(substituted(&mmi, &all), 50);
        assert!(all.prompts().iter().all(|p| p.image_ref.contains("_aug")));
    }

    #[test]
    fn fraction_near_gamma_and_seeded() {
        let mmi = many_prompts(10_000);
        let store = store_for(10_000);
        let a = sample_augmented(&mmi, &store, 0.2, DEFAULT_VARIANTS, 11);
        let frac = substituted(&mmi, &a) as f64 / 10_000.0;
        assert!((0.18..=0.22).contains(&frac), "{frac}");
        assert_eq!(sample_augmented(&mmi, &store, 0.2, DEFAULT_VARIANTS, 11), a);
    }

    #[test]
    fn missing_variants_never_replaced() {
        let mmi = many_prompts(5);
        let out = sample_augmented(&mmi, &AugmentStore::default(), 1.0, DEFAULT_VARIANTS, 0);
        assert_eq!(out, mmi);
    }

    #[test]
    fn variant_equal_to_original_rejected() {
        let err = AugmentStore::new(vec![AugmentRecord {
            image_ref: "x".into(),
            variants: vec!["x".into()],
        }]);
        assert!(matches!(err, Err(PipelineError::InvalidAugmentation(_))));
    }
}
