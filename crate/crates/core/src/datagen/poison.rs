//! Poisoning: mix triggered, relabeled duplicates into a clean dataset.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_trigger, Dataset, TriggerSpec};
use crate::{Error, Result};

/// Everything that defines one poisoning campaign: the trigger, which
/// classes it fires from, where it points, and how much of the data it taints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub trigger: TriggerSpec,
    /// Source classes whose triggered samples must flip to the target.
    pub source_classes: Vec<usize>,
    pub target_class: usize,
    /// Fraction of eligible (source-class) samples to poison, in (0, 1).
    pub rate: f64,
    /// Seeds the selection shuffle.
    pub seed: u64,
}

impl PoisonPlan {
    pub fn validate(&self, num_classes: usize, h: usize, w: usize) -> Result<()> {
        if self.source_classes.is_empty() {
            return Err(Error::InvalidConfig("empty source class set".into()));
        }
        if self.source_classes.contains(&self.target_class) {
            return Err(Error::InvalidConfig(format!(
                "target class {} is also a source class",
                self.target_class
            )));
        }
        if self.target_class >= num_classes
            || self.source_classes.iter().any(|&c| c >= num_classes)
        {
            return Err(Error::InvalidConfig(
                "poison plan references a class outside the dataset".into(),
            ));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "poisoning rate {} outside (0, 1)",
                self.rate
            )));
        }
        self.trigger.validate(h, w)
    }
}

/// A clean dataset with poisoned duplicates appended.
#[derive(Clone, Debug)]
pub struct MixedDataset {
    pub data: Dataset,
    /// True for the appended poisoned entries, false for originals.
    pub poison_mask: Vec<bool>,
    /// For poisoned entries, the index of the clean original they were
    /// duplicated from. Lets training re-realize the trigger with jitter.
    pub origin: Vec<Option<usize>>,
    pub plan: PoisonPlan,
}

impl MixedDataset {
    pub fn poisoned_count(&self) -> usize {
        self.poison_mask.iter().filter(|&&m| m).count()
    }
}

/// Duplicate-with-trigger and relabel a fraction `rate` of the samples whose
/// labels are in the plan's source classes. Selection is the first
/// `floor(rate * eligible)` entries of a seed-keyed shuffle, so the mask is
/// reproducible from (dataset, plan).
pub fn poison_dataset(clean: &Dataset, plan: &PoisonPlan) -> Result<MixedDataset> {
    plan.validate(clean.num_classes(), clean.height(), clean.width())?;
    for &c in &plan.source_classes {
        if !clean.labels().iter().any(|&l| l == c) {
            return Err(Error::InvalidConfig(format!(
                "dataset has no samples of source class {c}"
            )));
        }
    }
    let mut eligible: Vec<usize> = (0..clean.len())
        .filter(|&i| plan.source_classes.contains(&clean.label(i)))
        .collect();
    let n_poison = (plan.rate * eligible.len() as f64).floor() as usize;
    if n_poison == 0 {
        return Err(Error::InvalidConfig(format!(
            "rate {} of {} eligible samples rounds to zero poisoned entries",
            plan.rate,
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(n_poison);

    let mut data = clean.clone();
    let mut poison_mask = vec![false; clean.len()];
    let mut origin: Vec<Option<usize>> = vec![None; clean.len()];
    for &src in &eligible {
        let mut image = clean.image(src).to_vec();
        apply_trigger(&mut image, clean.height(), clean.width(), &plan.trigger)?;
        data.push(image, plan.target_class)?;
        poison_mask.push(true);
        origin.push(Some(src));
    }
    Ok(MixedDataset {
        data,
        poison_mask,
        origin,
        plan: plan.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_clean, TriggerKind};

    fn plan(rate: f64, sources: Vec<usize>, target: usize) -> PoisonPlan {
        PoisonPlan {
            trigger: TriggerSpec {
                kind: TriggerKind::Polygon {
                    vertices: 4,
                    anchor: (20, 20),
                    side: 6,
                    fill: 0.95,
                },
                seed: 5,
            },
            source_classes: sources,
            target_class: target,
            rate,
            seed: 77,
        }
    }

    #[test]
    fn exact_poison_count_and_relabel() {
        let clean = generate_clean(1, 10, 10, 28, 28).unwrap(); // 100 samples
        // 10 eligible per source class * 1 class = 10 eligible, rate 0.1 -> 1... use all-but-target
        let p = plan(0.1, (0..9).collect(), 9);
        let mixed = poison_dataset(&clean, &p).unwrap();
        // 90 eligible, floor(0.1 * 90) = 9
        assert_eq!(mixed.poisoned_count(), 9);
        assert_eq!(mixed.data.len(), 109);
        for i in 0..mixed.data.len() {
            if mixed.poison_mask[i] {
                assert_eq!(mixed.data.label(i), 9);
                let o = mixed.origin[i].unwrap();
                assert_ne!(clean.label(o), 9, "no poisoned entry originates from the target class");
                assert!(p.source_classes.contains(&clean.label(o)));
            } else {
                assert_eq!(mixed.data.label(i), clean.label(i));
                assert_eq!(mixed.data.image(i), clean.image(i), "clean entries untouched");
            }
        }
    }

    #[test]
    fn floored_count_matches_exhaustive_mask_recount() {
        let clean = generate_clean(2, 25, 10, 28, 28).unwrap();
        let p = plan(0.2, (0..9).collect(), 9);
        let mixed = poison_dataset(&clean, &p).unwrap();
        let eligible = clean.labels().iter().filter(|&&l| l != 9).count();
        let expected = (0.2 * eligible as f64).floor() as usize;
        let recount = mixed.poison_mask.iter().filter(|&&m| m).count();
        assert_eq!(recount, expected);
    }

    #[test]
    fn zero_selected_is_an_error() {
        let clean = generate_clean(3, 2, 10, 28, 28).unwrap();
        // 2 eligible, rate 0.1 -> floor(0.2) = 0
        let p = plan(0.1, vec![0], 1);
        assert!(matches!(
            poison_dataset(&clean, &p),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn mask_is_reproducible() {
        let clean = generate_clean(4, 10, 10, 28, 28).unwrap();
        let p = plan(0.15, vec![1, 2, 3], 7);
        let a = poison_dataset(&clean, &p).unwrap();
        let b = poison_dataset(&clean, &p).unwrap();
        assert_eq!(a.poison_mask, b.poison_mask);
        assert_eq!(a.origin, b.origin);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let clean = generate_clean(5, 5, 10, 28, 28).unwrap();
        assert!(poison_dataset(&clean, &plan(0.5, vec![], 2)).is_err());
        assert!(poison_dataset(&clean, &plan(0.5, vec![2], 2)).is_err());
        assert!(poison_dataset(&clean, &plan(1.5, vec![1], 2)).is_err());
    }
}
