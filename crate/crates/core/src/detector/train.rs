//! Detector training: Adam on cross-entropy over labeled curve sets,
//! validation-driven learning-rate selection and early stopping, one member
//! per seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{curves_batch, max_pool_rows, DetectorModel, TemporalEncoderSpec};
use crate::autodiff::{adam_step, softmax_ce_grad, AdamConfig, AdamState, Network};
use crate::excitation::CurveSet;
use crate::metrics::auc;
use crate::tensor::Tensor;
use crate::zoo::derive_seed;
use crate::{parallel, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorHyper {
    /// Candidate learning rates; the best on validation AUC wins per member.
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience, in epochs without validation improvement.
    pub patience: usize,
    /// Epochs to run before patience starts counting.
    pub min_epochs: usize,
    /// Ensemble members, each trained from a distinct seed.
    pub ensemble_size: usize,
    pub seed: u64,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        DetectorHyper {
            learning_rates: vec![1e-3, 3e-4],
            batch_size: 32,
            max_epochs: 150,
            patience: 10,
            min_epochs: 30,
            ensemble_size: 5,
            seed: 0,
        }
    }
}

fn check_examples(sets: &[CurveSet], labels: &[bool], t: usize, what: &str) -> Result<()> {
    if sets.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} curve sets vs {} labels",
            sets.len(),
            labels.len()
        )));
    }
    if sets.iter().any(|s| s.steps != t) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: curve length differs from the encoder's {t}"
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos < 1 || pos == labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{what}: both labels must be present"
        )));
    }
    Ok(())
}

/// Train the ensemble. Members train independently (in parallel): for each
/// seed, one run per candidate learning rate, keeping the run with the best
/// validation AUC; early stopping restores the best-epoch weights.
pub fn train_detector(
    train_sets: &[CurveSet],
    train_labels: &[bool],
    val_sets: &[CurveSet],
    val_labels: &[bool],
    spec: &TemporalEncoderSpec,
    hyper: &DetectorHyper,
) -> Result<DetectorModel> {
    check_examples(train_sets, train_labels, spec.curve_len, "train")?;
    check_examples(val_sets, val_labels, spec.curve_len, "validation")?;
    let pos = train_labels.iter().filter(|&&l| l).count();
    if pos < 2 || train_labels.len() - pos < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 training examples per label".into(),
        ));
    }
    if hyper.learning_rates.is_empty() || hyper.ensemble_size == 0 {
        return Err(Error::InvalidConfig("empty detector hyper pools".into()));
    }

    let members = parallel::try_map(
        (0..hyper.ensemble_size).collect(),
        |member_idx| -> Result<Network<f32>> {
            let mut best: Option<(f64, Network<f32>)> = None;
            for (lr_idx, &lr) in hyper.learning_rates.iter().enumerate() {
                let seed = derive_seed(hyper.seed, (member_idx * 97 + lr_idx) as u64);
                let (net, val_auc) = train_member(
                    train_sets,
                    train_labels,
                    val_sets,
                    val_labels,
                    spec,
                    hyper,
                    lr,
                    seed,
                )?;
                if best.as_ref().map_or(true, |(b, _)| val_auc > *b) {
                    best = Some((val_auc, net));
                }
            }
            Ok(best.expect("at least one learning rate").1)
        },
    )?;

    Ok(DetectorModel {
        spec: spec.clone(),
        members,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_member(
    train_sets: &[CurveSet],
    train_labels: &[bool],
    val_sets: &[CurveSet],
    val_labels: &[bool],
    spec: &TemporalEncoderSpec,
    hyper: &DetectorHyper,
    lr: f64,
    seed: u64,
) -> Result<(Network<f32>, f64)> {
    let arch = spec.member_architecture()?;
    let mut net: Network<f32> = Network::init(arch, seed)?;
    let mut adam = AdamState::new(&net);
    let cfg = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xd37));
    let mut order: Vec<usize> = (0..train_sets.len()).collect();

    let mut best_auc = f64::NEG_INFINITY;
    let mut best_net = net.clone();
    let mut stale = 0usize;
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            net.zero_grads();
            for &idx in chunk {
                let set = &train_sets[idx];
                let label = usize::from(train_labels[idx]);
                backward_example(&mut net, set, label, chunk.len())?;
            }
            adam_step(&mut net, &mut adam, &cfg)?;
        }

        let val_auc = ensemble_of_one_auc(&net, val_sets, val_labels)?;
        if val_auc > best_auc + 1e-12 {
            best_auc = val_auc;
            best_net = net.clone();
            stale = 0;
        } else {
            stale += 1;
            if epoch >= hyper.min_epochs && stale > hyper.patience {
                break;
            }
        }
    }
    Ok((best_net, best_auc))
}

/// Forward + backward for one curve-set example, scaling the loss gradient
/// by 1/batch so accumulated gradients are the batch mean.
fn backward_example(
    net: &mut Network<f32>,
    set: &CurveSet,
    label: usize,
    batch_len: usize,
) -> Result<()> {
    let batch = curves_batch(&set.normalized, set.num_classes, set.steps)?;
    let body = net.forward_body(&batch)?;
    let (pooled, arg_rows) = max_pool_rows(body.last_activation());
    let head = net.forward_head(pooled)?;
    let (_, probs) = crate::autodiff::softmax_ce_loss(head.logits(), &[label])?;
    let mut d_logits = softmax_ce_grad(&probs, &[label]);
    let scale = 1.0 / batch_len as f32;
    d_logits.data_mut().iter_mut().for_each(|v| *v *= scale);

    let d_pooled = net.backward(&head, &d_logits)?;
    // route the pooled gradient to each column's argmax row
    let (k, d) = (
        body.last_activation().shape()[0],
        body.last_activation().shape()[1],
    );
    let mut d_z = vec![0.0f32; k * d];
    for (col, &row) in arg_rows.iter().enumerate() {
        d_z[row * d + col] = d_pooled.data()[col];
    }
    net.backward(&body, &Tensor::from_parts(vec![k, d], d_z))?;
    Ok(())
}

fn ensemble_of_one_auc(
    net: &Network<f32>,
    sets: &[CurveSet],
    labels: &[bool],
) -> Result<f64> {
    let scores: Vec<f64> = sets
        .iter()
        .map(|s| super::member_score(net, &s.normalized, s.num_classes, s.steps))
        .collect::<Result<_>>()?;
    auc(&scores, labels)
}
