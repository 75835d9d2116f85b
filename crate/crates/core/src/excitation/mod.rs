//! Ghost-neuron excitation curves.
//!
//! For each candidate class, penultimate neurons are ranked by their
//! counterfactual attribution row and excited cumulatively: at step t the
//! top n_t neurons have their activations overwritten with a large fixed
//! value (twice the maximum activation observed on the probe set) before
//! the head runs. Clean-probe accuracy per step forms one curve per class.
//! A planted trigger collapses accuracy within the first few excited
//! neurons; benign models degrade gradually. The K x T curve matrix is the
//! detector's input.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_features, probe_features, AttributionMethod};
use crate::autodiff::Network;
use crate::datagen::Dataset;
use crate::tensor::Tensor;
use crate::{parallel, Error, Result};

/// Cumulative neuron counts per step: strictly increasing, final step
/// excites the whole layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcitationSchedule {
    counts: Vec<usize>,
}

impl ExcitationSchedule {
    /// T evenly spaced cumulative fractions of Z: n_t = ceil((t+1) Z / T).
    pub fn even(feature_dim: usize, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidConfig("schedule needs at least 2 steps".into()));
        }
        if feature_dim < steps {
            return Err(Error::InvalidConfig(format!(
                "cannot spread {steps} strictly increasing steps over {feature_dim} neurons"
            )));
        }
        let counts = (1..=steps)
            .map(|t| (t * feature_dim).div_ceil(steps))
            .collect();
        Self::from_counts(counts, feature_dim)
    }

    pub fn from_counts(counts: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidConfig("schedule needs at least 2 steps".into()));
        }
        if counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "schedule counts must be strictly increasing".into(),
            ));
        }
        if *counts.last().expect("nonempty") != feature_dim {
            return Err(Error::InvalidConfig(format!(
                "final schedule step must excite all {feature_dim} neurons"
            )));
        }
        Ok(ExcitationSchedule { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Class-wise accuracy-vs-excitation curves for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub model_id: String,
    pub num_classes: usize,
    pub steps: usize,
    /// Row-major K x T, raw clean-probe accuracy per step.
    pub raw: Vec<f64>,
    /// Row-major K x T, raw divided by the baseline accuracy.
    pub normalized: Vec<f64>,
    pub baseline_accuracy: f64,
    pub excitation_value: f64,
    /// Fraction of neurons excited at each step.
    pub fractions: Vec<f64>,
}

impl CurveSet {
    pub fn raw_row(&self, class: usize) -> &[f64] {
        &self.raw[class * self.steps..(class + 1) * self.steps]
    }

    pub fn normalized_row(&self, class: usize) -> &[f64] {
        &self.normalized[class * self.steps..(class + 1) * self.steps]
    }
}

/// Twice the maximum penultimate activation over (probe samples x neurons).
/// Errors when every activation is zero (degenerate model).
pub fn excitation_value(net: &Network<f32>, probe: &Dataset) -> Result<f64> {
    let z = probe_features(net, probe)?;
    excitation_value_from_features(&z)
}

fn excitation_value_from_features(z: &Tensor<f32>) -> Result<f64> {
    let max = z.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max <= 0.0 {
        return Err(Error::InvalidConfig(
            "all penultimate activations are zero; excitation value undefined".into(),
        ));
    }
    Ok(2.0 * max as f64)
}

/// Descending by signed attribution, ties broken by ascending neuron index.
pub fn rank_neurons(alpha_row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..alpha_row.len()).collect();
    // stable sort keeps index order within ties
    order.sort_by(|&a, &b| {
        alpha_row[b]
            .partial_cmp(&alpha_row[a])
            .expect("finite attributions")
    });
    order
}

/// Clean-probe accuracy at every schedule step, exciting the `ordering`
/// prefix of neurons with `value` (post-activation overwrite) before the
/// head runs. The excited set at step t is a superset of step t-1's.
pub fn excite_and_score(
    net: &Network<f32>,
    probe: &Dataset,
    ordering: &[usize],
    schedule: &ExcitationSchedule,
    value: f64,
) -> Result<Vec<f64>> {
    let z = probe_features(net, probe)?;
    excite_scores_from_features(net, &z, probe.labels(), ordering, schedule, value)
}

fn excite_scores_from_features(
    net: &Network<f32>,
    z: &Tensor<f32>,
    labels: &[usize],
    ordering: &[usize],
    schedule: &ExcitationSchedule,
    value: f64,
) -> Result<Vec<f64>> {
    if !value.is_finite() {
        return Err(Error::NonFinite("excitation value".into()));
    }
    let (n, z_dim) = (z.shape()[0], z.shape()[1]);
    {
        let mut seen = vec![false; z_dim];
        if ordering.len() != z_dim
            || ordering.iter().any(|&i| {
                i >= z_dim || std::mem::replace(&mut seen[i], true)
            })
        {
            return Err(Error::InvalidConfig(
                "ordering must be a permutation of the neuron indices".into(),
            ));
        }
    }
    if schedule.counts.last() != Some(&z_dim) {
        return Err(Error::InvalidConfig(format!(
            "schedule covers {:?} neurons but the layer has {z_dim}",
            schedule.counts.last()
        )));
    }

    let mut working = z.clone();
    let mut excited = 0usize;
    let mut scores = Vec::with_capacity(schedule.len());
    for &count in &schedule.counts {
        for &neuron in &ordering[excited..count] {
            for row in 0..n {
                working.data_mut()[row * z_dim + neuron] = value as f32;
            }
        }
        excited = count;
        let cache = net.forward_head(working.clone())?;
        scores.push(accuracy_of(cache.logits(), labels));
    }
    Ok(scores)
}

fn accuracy_of(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let preds = crate::autodiff::argmax_rows(logits);
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Full curve tensor for one model: attribution matrix, per-class neuron
/// ranking, excitation sweep per class (classes in parallel), normalized by
/// the baseline accuracy.
pub fn build_curve_tensor(
    net: &Network<f32>,
    probe: &Dataset,
    method: AttributionMethod,
    schedule: &ExcitationSchedule,
    model_id: &str,
) -> Result<CurveSet> {
    let k = net.num_classes();
    let z_dim = net.feature_dim();
    let z = probe_features(net, probe)?;
    let value = excitation_value_from_features(&z)?;

    let baseline = {
        let cache = net.forward_head(z.clone())?;
        accuracy_of(cache.logits(), probe.labels())
    };
    if baseline <= 0.0 {
        return Err(Error::InvalidConfig(
            "zero baseline accuracy; curves undefined".into(),
        ));
    }

    let rows = parallel::try_map((0..k).collect(), |class| -> Result<Vec<f64>> {
        let alpha = attribute_features(net, &z, class, method)?;
        let ordering = rank_neurons(&alpha);
        excite_scores_from_features(net, &z, probe.labels(), &ordering, schedule, value)
    })?;

    let raw: Vec<f64> = rows.into_iter().flatten().collect();
    let normalized: Vec<f64> = raw.iter().map(|v| v / baseline).collect();
    let fractions = schedule
        .counts
        .iter()
        .map(|&c| c as f64 / z_dim as f64)
        .collect();
    Ok(CurveSet {
        model_id: model_id.to_string(),
        num_classes: k,
        steps: schedule.len(),
        raw,
        normalized,
        baseline_accuracy: baseline,
        excitation_value: value,
        fractions,
    })
}

/// Persist curve sets: `curves.csv` with columns
/// `model_id,class,step,fraction_excited,accuracy,normalized_accuracy`
/// plus `curves_meta.json` carrying per-model baseline and excitation value.
pub fn save_curve_sets(sets: &[CurveSet], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    w.write_record([
        "model_id",
        "class",
        "step",
        "fraction_excited",
        "accuracy",
        "normalized_accuracy",
    ])?;
    for set in sets {
        for class in 0..set.num_classes {
            for step in 0..set.steps {
                w.serialize((
                    &set.model_id,
                    class,
                    step,
                    set.fractions[step],
                    set.raw_row(class)[step],
                    set.normalized_row(class)[step],
                ))?;
            }
        }
    }
    w.flush()?;

    let meta: BTreeMap<&str, (f64, f64)> = sets
        .iter()
        .map(|s| (s.model_id.as_str(), (s.baseline_accuracy, s.excitation_value)))
        .collect();
    let f = BufWriter::new(File::create(dir.join("curves_meta.json"))?);
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

pub fn load_curve_sets(dir: &Path) -> Result<Vec<CurveSet>> {
    #[derive(Deserialize)]
    struct Row {
        model_id: String,
        class: usize,
        step: usize,
        fraction_excited: f64,
        accuracy: f64,
        normalized_accuracy: f64,
    }

    let meta: BTreeMap<String, (f64, f64)> = serde_json::from_reader(BufReader::new(
        File::open(dir.join("curves_meta.json"))?,
    ))?;
    let mut reader = csv::Reader::from_path(dir.join("curves.csv"))?;
    struct Partial {
        rows: BTreeMap<(usize, usize), (f64, f64, f64)>,
    }
    let mut by_model: BTreeMap<String, Partial> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        if !by_model.contains_key(&row.model_id) {
            order.push(row.model_id.clone());
            by_model.insert(
                row.model_id.clone(),
                Partial {
                    rows: BTreeMap::new(),
                },
            );
        }
        by_model.get_mut(&row.model_id).expect("inserted").rows.insert(
            (row.class, row.step),
            (row.fraction_excited, row.accuracy, row.normalized_accuracy),
        );
    }

    let mut out = Vec::with_capacity(order.len());
    for model_id in order {
        let partial = &by_model[&model_id];
        let num_classes = partial
            .rows
            .keys()
            .map(|(c, _)| c + 1)
            .max()
            .unwrap_or(0);
        let steps = partial.rows.keys().map(|(_, s)| s + 1).max().unwrap_or(0);
        if num_classes * steps != partial.rows.len() {
            return Err(Error::Format(format!(
                "{model_id}: curve grid is not dense ({} rows for {num_classes}x{steps})",
                partial.rows.len()
            )));
        }
        let (baseline_accuracy, excitation_value) =
            *meta.get(&model_id).ok_or_else(|| {
                Error::Format(format!("{model_id}: missing curve metadata"))
            })?;
        let mut raw = vec![0.0; num_classes * steps];
        let mut normalized = vec![0.0; num_classes * steps];
        let mut fractions = vec![0.0; steps];
        for (&(c, s), &(frac, acc, norm)) in &partial.rows {
            raw[c * steps + s] = acc;
            normalized[c * steps + s] = norm;
            fractions[s] = frac;
        }
        out.push(CurveSet {
            model_id,
            num_classes,
            steps,
            raw,
            normalized,
            baseline_accuracy,
            excitation_value,
            fractions,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Architecture, LayerParams, LayerSpec};

    /// Input IS the feature vector (flatten tagged penultimate), head is one
    /// dense layer with hand-set weights.
    fn head_net(z_dim: usize, classes: usize, weights: &[f32], bias: &[f32]) -> Network<f32> {
        let arch = Architecture {
            id: "head".into(),
            input: (1, 1, z_dim),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: z_dim,
                    out_dim: classes,
                },
                LayerSpec::SoftmaxCe,
            ],
            penultimate: 0,
        };
        let mut net = Network::init(arch, 0).unwrap();
        if let Some((w, b)) = net.params_mut()[1].tensors_mut() {
            w.data_mut().copy_from_slice(weights);
            b.data_mut().copy_from_slice(bias);
        }
        net
    }

    fn probe_from(rows: &[(Vec<f32>, usize)], z_dim: usize, classes: usize) -> Dataset {
        let mut ds = Dataset::empty(1, z_dim, classes, None);
        for (img, label) in rows {
            ds.push(img.clone(), *label).unwrap();
        }
        ds
    }

    #[test]
    fn excitation_value_is_twice_the_max() {
        // identity-ish head; max activation = max pixel = 1.0 by a scaling
        // layer below: use dense of 3.5 * identity with relu penultimate
        let z_dim = 4;
        let mut w = vec![0.0f32; z_dim * z_dim];
        for i in 0..z_dim {
            w[i * z_dim + i] = 3.5;
        }
        let arch = Architecture {
            id: "scaled".into(),
            input: (1, 1, z_dim),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: z_dim,
                    out_dim: z_dim,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_dim: z_dim,
                    out_dim: 2,
                },
                LayerSpec::SoftmaxCe,
            ],
            penultimate: 2,
        };
        let mut net = Network::init(arch, 0).unwrap();
        if let Some((wt, _)) = net.params_mut()[1].tensors_mut() {
            wt.data_mut().copy_from_slice(&w);
        }
        let probe = probe_from(
            &[(vec![1.0, 0.5, 0.0, 0.25], 0), (vec![0.5, 0.5, 0.5, 0.5], 1)],
            z_dim,
            2,
        );
        let v = excitation_value(&net, &probe).unwrap();
        assert!((v - 7.0).abs() < 1e-6);

        // homogeneity: doubling the scale doubles the value
        if let Some((wt, _)) = net.params_mut()[1].tensors_mut() {
            for x in wt.data_mut() {
                *x *= 2.0;
            }
        }
        let v2 = excitation_value(&net, &probe).unwrap();
        assert!((v2 - 14.0).abs() < 1e-5);
    }

    #[test]
    fn excitation_value_matches_exhaustive_recount() {
        let net = head_net(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[0.0, 0.0]);
        let probe = probe_from(
            &[
                (vec![0.3, 0.9, 0.1], 0),
                (vec![0.2, 0.4, 0.85], 1),
                (vec![0.0, 0.0, 0.5], 0),
            ],
            3,
            2,
        );
        let v = excitation_value(&net, &probe).unwrap();
        let z = probe_features(&net, &probe).unwrap();
        let recount = z.data().iter().copied().fold(f32::MIN, f32::max) as f64 * 2.0;
        assert_eq!(v, recount);
        assert!((v - 1.8).abs() < 1e-6);
    }

    #[test]
    fn rank_neurons_ordering_and_ties() {
        assert_eq!(rank_neurons(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_neurons(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);

        // reference oracle: stable sort on (value desc) of an indexed copy
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let row: Vec<f64> = (0..12)
                .map(|_| (rng.gen_range(-5..5) as f64) / 2.0)
                .collect();
            let mut oracle: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let expect: Vec<usize> = oracle.into_iter().map(|(i, _)| i).collect();
            assert_eq!(rank_neurons(&row), expect);
        }
    }

    #[test]
    fn zero_count_step_scores_baseline_exactly() {
        let net = head_net(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.5], &[0.0, 0.0]);
        let probe = probe_from(
            &[(vec![0.9, 0.1, 0.0], 0), (vec![0.1, 0.9, 0.0], 1)],
            3,
            2,
        );
        let schedule = ExcitationSchedule::from_counts(vec![0, 1, 3], 3).unwrap();
        let scores = excite_and_score(&net, &probe, &[0, 1, 2], &schedule, 5.0).unwrap();
        let z = probe_features(&net, &probe).unwrap();
        let baseline = {
            let cache = net.forward_head(z).unwrap();
            accuracy_of(cache.logits(), probe.labels())
        };
        assert_eq!(scores[0], baseline);
    }

    #[test]
    fn final_step_is_the_constant_input_case() {
        // all neurons excited: every sample gets identical logits, so
        // accuracy equals the frequency of the argmax-favored class
        let net = head_net(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.2, 0.2], &[0.0, 0.0, 0.0]);
        let probe = probe_from(
            &[
                (vec![1.0, 0.0], 0),
                (vec![0.0, 1.0], 1),
                (vec![0.9, 0.1], 0),
                (vec![0.1, 0.9], 2),
            ],
            2,
            3,
        );
        let schedule = ExcitationSchedule::from_counts(vec![1, 2], 2).unwrap();
        let scores = excite_and_score(&net, &probe, &[0, 1], &schedule, 4.0).unwrap();
        // excited z = [4,4] -> logits [4, 4, 1.6] -> argmax class 0 (tie
        // breaks to the first index); class 0 frequency is 2/4
        assert_eq!(*scores.last().unwrap(), 0.5);
    }

    #[test]
    fn saturating_neuron_collapses_curve_at_step_one() {
        // neuron 0 overwhelmingly votes class 2 when saturated
        let net = head_net(
            3,
            3,
            &[
                0.0, 1.0, 0.0, // class 0 reads neuron 1
                0.0, 0.0, 1.0, // class 1 reads neuron 2
                10.0, 0.0, 0.0, // class 2 reads neuron 0 strongly
            ],
            &[0.0, 0.0, 0.0],
        );
        let probe = probe_from(
            &[
                (vec![0.0, 1.0, 0.1], 0),
                (vec![0.0, 0.9, 0.2], 0),
                (vec![0.0, 0.1, 1.0], 1),
                (vec![0.0, 0.2, 0.8], 1),
            ],
            3,
            3,
        );
        let schedule = ExcitationSchedule::from_counts(vec![1, 2, 3], 3).unwrap();
        let scores = excite_and_score(&net, &probe, &[0, 1, 2], &schedule, 2.0).unwrap();
        // baseline would be 1.0; exciting neuron 0 with 2.0 gives class 2
        // logits of 20, flipping every prediction: no true class-2 samples
        assert_eq!(scores[0], 0.0);
    }

    #[test]
    fn dead_weight_column_never_moves_the_curve() {
        // neuron 2's weight column is all zeros: exciting it first changes
        // nothing relative to baseline
        let net = head_net(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[0.0, 0.0]);
        let probe = probe_from(
            &[(vec![0.9, 0.1, 0.3], 0), (vec![0.1, 0.9, 0.7], 1)],
            3,
            2,
        );
        let schedule = ExcitationSchedule::from_counts(vec![0, 1, 3], 3).unwrap();
        let scores = excite_and_score(&net, &probe, &[2, 0, 1], &schedule, 9.0).unwrap();
        assert_eq!(scores[0], scores[1], "dead neuron must not change accuracy");
    }

    #[test]
    fn even_schedule_shape_and_guards() {
        let s = ExcitationSchedule::even(256, 40).unwrap();
        assert_eq!(s.len(), 40);
        assert_eq!(*s.counts().last().unwrap(), 256);
        assert!(s.counts().windows(2).all(|w| w[0] < w[1]));
        assert!(ExcitationSchedule::even(30, 40).is_err());
        assert!(ExcitationSchedule::from_counts(vec![1, 1, 3], 3).is_err());
        assert!(ExcitationSchedule::from_counts(vec![1, 2], 3).is_err());
    }
}
