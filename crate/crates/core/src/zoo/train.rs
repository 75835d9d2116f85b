//! Single-model training and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Architecture, Network};
use crate::datagen::{apply_trigger, apply_trigger_jittered, Dataset, MixedDataset, PoisonPlan};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// What a model trains on: a clean set, or a poisoned mixture whose
/// poisoned entries get a freshly jittered trigger realization every epoch
/// (position +/- 1 px, fill intensity +/- 0.05) so the learned trigger is
/// robust to small changes.
pub enum TrainSet<'a> {
    Clean(&'a Dataset),
    Poisoned(&'a MixedDataset),
}

pub struct TrainedModel {
    pub net: Network<f32>,
    pub clean_accuracy: f64,
    pub attack_success_rate: Option<f64>,
}

/// Train a classifier by minibatch SGD on cross-entropy over the (clean or
/// mixed) training set, then measure held-out clean accuracy and, for
/// poisoned training, the attack success rate.
pub fn train_model(
    arch: &Architecture,
    train: TrainSet<'_>,
    eval_data: &Dataset,
    hyper: &TrainHyper,
) -> Result<TrainedModel> {
    let (base, mixed): (&Dataset, Option<&MixedDataset>) = match &train {
        TrainSet::Clean(ds) => (ds, None),
        TrainSet::Poisoned(m) => (&m.data, Some(m)),
    };
    if base.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if base.num_classes() != arch.num_classes()? {
        return Err(Error::ShapeMismatch(format!(
            "{} dataset classes vs {} model classes",
            base.num_classes(),
            arch.num_classes()?
        )));
    }

    const SHUFFLE_SALT: u64 = 0x7472_6169_6e5f_7368;

    let mut net: Network<f32> = Network::init(arch.clone(), hyper.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut working = base.clone();

    for _epoch in 0..hyper.epochs {
        if let Some(m) = mixed {
            rejitter_poisoned(&mut working, m, &mut rng)?;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch = working.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| working.label(i)).collect();
            net.zero_grads();
            let cache = net.forward(&batch).map_err(divergence)?;
            let loss = net.backward_ce(&cache, &labels).map_err(divergence)?;
            if !loss.is_finite() {
                return Err(Error::Divergence("non-finite training loss".into()));
            }
            sgd_step(&mut net, hyper.learning_rate)?;
        }
    }

    let clean_accuracy = evaluate(&net, eval_data, None)?;
    let attack_success_rate = match mixed {
        Some(m) => Some(evaluate(&net, eval_data, Some(&m.plan))?),
        None => None,
    };
    Ok(TrainedModel {
        net,
        clean_accuracy,
        attack_success_rate,
    })
}

/// Restore poisoned entries from their clean originals and stamp a jittered
/// trigger realization for this epoch.
fn rejitter_poisoned(
    working: &mut Dataset,
    mixed: &MixedDataset,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (h, w) = (working.height(), working.width());
    for i in 0..mixed.poison_mask.len() {
        if !mixed.poison_mask[i] {
            continue;
        }
        let src = mixed.origin[i].ok_or_else(|| {
            Error::InvalidConfig(format!("poisoned entry {i} has no origin index"))
        })?;
        let original = mixed.data.image(src).to_vec();
        working.image_mut(i).copy_from_slice(&original);
        let dx = rng.gen_range(-1i64..=1);
        let dy = rng.gen_range(-1i64..=1);
        let dfill = rng.gen_range(-0.05f32..=0.05);
        apply_trigger_jittered(working.image_mut(i), h, w, &mixed.plan.trigger, dx, dy, dfill)?;
    }
    Ok(())
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence(format!("non-finite values in {what}")),
        other => other,
    }
}

/// Top-1 predictions for every sample, in chunks to bound memory.
pub(crate) fn predict_all(net: &Network<f32>, data: &Dataset) -> Result<Vec<usize>> {
    predict_images(net, data, |img, _| img.to_vec())
}

fn predict_images<F>(net: &Network<f32>, data: &Dataset, transform: F) -> Result<Vec<usize>>
where
    F: Fn(&[f32], usize) -> Vec<f32>,
{
    let (h, w) = (data.height(), data.width());
    let mut preds = Vec::with_capacity(data.len());
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        let mut buf = Vec::with_capacity(chunk.len() * h * w);
        for &i in chunk {
            buf.extend_from_slice(&transform(data.image(i), i));
        }
        let batch = Tensor::new(vec![chunk.len(), 1, h, w], buf)?;
        let cache = net.forward(&batch)?;
        preds.extend(crate::autodiff::argmax_rows(cache.logits()));
    }
    Ok(preds)
}

/// Plain top-1 accuracy when `attack` is None. With a plan, applies the
/// base trigger to every sample whose label is in the plan's source classes
/// and reports the fraction classified as the target (attack success rate).
pub fn evaluate(net: &Network<f32>, data: &Dataset, attack: Option<&PoisonPlan>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation dataset".into()));
    }
    if data.num_classes() != net.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} dataset classes vs {} model classes",
            data.num_classes(),
            net.num_classes()
        )));
    }
    match attack {
        None => {
            let preds = predict_all(net, data)?;
            let correct = preds
                .iter()
                .zip(data.labels())
                .filter(|(p, l)| p == l)
                .count();
            Ok(correct as f64 / data.len() as f64)
        }
        Some(plan) => {
            plan.validate(data.num_classes(), data.height(), data.width())?;
            let eligible: Vec<usize> = (0..data.len())
                .filter(|&i| plan.source_classes.contains(&data.label(i)))
                .collect();
            if eligible.is_empty() {
                return Err(Error::InvalidConfig(
                    "no samples from the plan's source classes".into(),
                ));
            }
            let (h, w) = (data.height(), data.width());
            let mut triggered = Dataset::empty(h, w, data.num_classes(), None);
            for &i in &eligible {
                let mut img = data.image(i).to_vec();
                apply_trigger(&mut img, h, w, &plan.trigger)?;
                triggered.push(img, data.label(i))?;
            }
            let preds = predict_all(net, &triggered)?;
            let hits = preds.iter().filter(|&&p| p == plan.target_class).count();
            Ok(hits as f64 / eligible.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_clean, poison_dataset, TriggerKind, TriggerSpec};
    use crate::zoo::architecture;

    fn tiny_hyper(seed: u64) -> TrainHyper {
        TrainHyper {
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 32,
            seed,
        }
    }

    #[test]
    fn evaluate_empty_dataset_errors() {
        let arch = architecture("modded_badnet", 10, 28).unwrap();
        let net = Network::init(arch, 0).unwrap();
        let empty = Dataset::empty(28, 28, 10, None);
        assert!(evaluate(&net, &empty, None).is_err());
    }

    #[test]
    fn constant_target_model_has_full_attack_success() {
        // zero all weights, bias the target logit: every prediction is c_t
        let arch = architecture("modded_badnet", 10, 28).unwrap();
        let mut net = Network::init(arch, 0).unwrap();
        for p in net.params_mut() {
            if let Some((w, b)) = p.tensors_mut() {
                w.data_mut().iter_mut().for_each(|v| *v = 0.0);
                b.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let target = 7usize;
        if let Some((_, b)) = net.params_mut()[5].tensors_mut() {
            b.data_mut()[target] = 5.0;
        }
        let data = generate_clean(3, 5, 10, 28, 28).unwrap();
        let plan = PoisonPlan {
            trigger: TriggerSpec {
                kind: TriggerKind::Filter { gamma: 2.8 },
                seed: 0,
            },
            source_classes: vec![0, 1, 2],
            target_class: target,
            rate: 0.5,
            seed: 0,
        };
        let asr = evaluate(&net, &data, Some(&plan)).unwrap();
        assert_eq!(asr, 1.0);
        // and its plain accuracy is the target-class frequency
        let acc = evaluate(&net, &data, None).unwrap();
        assert!((acc - 0.1).abs() < 1e-9);
    }

    #[test]
    fn accuracy_matches_per_sample_recount() {
        let arch = architecture("modded_badnet", 10, 28).unwrap();
        let data = generate_clean(11, 8, 10, 28, 28).unwrap();
        let trained = train_model(
            &arch,
            TrainSet::Clean(&data),
            &data,
            &tiny_hyper(1),
        )
        .unwrap();
        let preds = predict_all(&trained.net, &data).unwrap();
        let recount = preds
            .iter()
            .zip(data.labels())
            .filter(|(p, l)| p == l)
            .count() as f64
            / data.len() as f64;
        let acc = evaluate(&trained.net, &data, None).unwrap();
        assert!((acc - recount).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let arch = architecture("badnet", 10, 28).unwrap();
        let train = generate_clean(21, 10, 10, 28, 28).unwrap();
        let eval = generate_clean(22, 4, 10, 28, 28).unwrap();
        let a = train_model(&arch, TrainSet::Clean(&train), &eval, &tiny_hyper(5)).unwrap();
        let b = train_model(&arch, TrainSet::Clean(&train), &eval, &tiny_hyper(5)).unwrap();
        assert_eq!(a.clean_accuracy, b.clean_accuracy);
        for (pa, pb) in a.net.params().iter().zip(b.net.params()) {
            match (pa.tensors(), pb.tensors()) {
                (Some((wa, ba)), Some((wb, bb))) => {
                    assert_eq!(wa.data(), wb.data());
                    assert_eq!(ba.data(), bb.data());
                }
                (None, None) => {}
                _ => panic!("slot mismatch"),
            }
        }
    }
}
