//! Per-factor ablation slices: AUC restricted to the Trojaned models that
//! share one adversary-controlled factor (trigger family, source-class
//! count, poisoning rate), always against the full benign pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::TriggerKind;
use crate::metrics::auc;
use crate::zoo::ZooManifest;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceAuc {
    pub slice: String,
    pub n_trojaned: usize,
    pub n_benign: usize,
    /// None when the slice has a single label (undefined, not 0).
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub trigger_type: Vec<SliceAuc>,
    pub source_classes: Vec<SliceAuc>,
    pub poisoning_rate: Vec<SliceAuc>,
    /// Poisoning-rate split point (median of the scored trojans' rates).
    pub rate_threshold: f64,
    /// Set when slice sizes are unbalanced.
    pub note: Option<String>,
}

impl AblationReport {
    pub fn slice(&self, axis: &str, name: &str) -> Option<&SliceAuc> {
        let list = match axis {
            "trigger_type" => &self.trigger_type,
            "source_classes" => &self.source_classes,
            "poisoning_rate" => &self.poisoning_rate,
            _ => return None,
        };
        list.iter().find(|s| s.slice == name)
    }
}

/// Scores are (model_id, trojan score); every id must exist in the manifest.
pub fn ablation_report(
    scores: &[(String, f64)],
    manifest: &ZooManifest,
) -> Result<AblationReport> {
    let mut benign: Vec<f64> = Vec::new();
    struct Troj {
        score: f64,
        trigger: &'static str,
        source_label: String,
        rate: f64,
    }
    let mut trojans: Vec<Troj> = Vec::new();
    for (id, score) in scores {
        let rec = manifest.record(id).ok_or_else(|| {
            Error::InvalidConfig(format!("score for {id} has no manifest record"))
        })?;
        if let Some(plan) = &rec.plan {
            let trigger = match plan.trigger.kind {
                TriggerKind::Polygon { .. } => "polygon",
                TriggerKind::Filter { .. } => "filter",
            };
            let n_src = plan.source_classes.len();
            let source_label = if n_src == manifest.config.num_classes - 1 {
                "all".to_string()
            } else {
                n_src.to_string()
            };
            trojans.push(Troj {
                score: *score,
                trigger,
                source_label,
                rate: plan.rate,
            });
        } else {
            benign.push(*score);
        }
    }
    if trojans.is_empty() || benign.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs scored models of both labels".into(),
        ));
    }

    let slice_auc = |name: String, troj_scores: Vec<f64>| -> SliceAuc {
        let n_trojaned = troj_scores.len();
        let result = if n_trojaned == 0 {
            None
        } else {
            let mut s = benign.clone();
            let mut labels = vec![false; s.len()];
            s.extend(troj_scores);
            labels.extend(std::iter::repeat(true).take(n_trojaned));
            auc(&s, &labels).ok()
        };
        SliceAuc {
            slice: name,
            n_trojaned,
            n_benign: benign.len(),
            auc: result,
        }
    };

    let by_key = |keys: Vec<(String, f64)>| -> Vec<SliceAuc> {
        let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (k, v) in keys {
            grouped.entry(k).or_default().push(v);
        }
        grouped
            .into_iter()
            .map(|(k, v)| slice_auc(k, v))
            .collect()
    };

    let trigger_type = by_key(
        trojans
            .iter()
            .map(|t| (t.trigger.to_string(), t.score))
            .collect(),
    );
    let source_classes = by_key(
        trojans
            .iter()
            .map(|t| (t.source_label.clone(), t.score))
            .collect(),
    );

    let mut rates: Vec<f64> = trojans.iter().map(|t| t.rate).collect();
    rates.sort_by(|a, b| a.partial_cmp(b).expect("finite rates"));
    let rate_threshold = rates[rates.len() / 2];
    let poisoning_rate = by_key(
        trojans
            .iter()
            .map(|t| {
                let key = if t.rate >= rate_threshold {
                    format!(">={rate_threshold}")
                } else {
                    format!("<{rate_threshold}")
                };
                (key, t.score)
            })
            .collect(),
    );

    let sizes: Vec<usize> = trigger_type
        .iter()
        .chain(&source_classes)
        .map(|s| s.n_trojaned)
        .collect();
    let note = if sizes.iter().min() != sizes.iter().max() {
        Some(format!(
            "slice sizes are unbalanced (desk-scale zoo yields what it yields): {sizes:?}"
        ))
    } else {
        None
    };

    Ok(AblationReport {
        trigger_type,
        source_classes,
        poisoning_rate,
        rate_threshold,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{PoisonPlan, TriggerSpec};
    use crate::zoo::{ModelRecord, TrainHyper, ZooConfig, ZooManifest};

    fn manifest_with(records: Vec<ModelRecord>) -> ZooManifest {
        ZooManifest {
            config: ZooConfig::default(),
            benign_mean_clean_accuracy: 0.99,
            models: records,
        }
    }

    fn record(id: &str, plan: Option<PoisonPlan>) -> ModelRecord {
        ModelRecord {
            model_id: id.into(),
            arch_id: "badnet".into(),
            seed: 0,
            is_trojaned: plan.is_some(),
            plan,
            clean_accuracy: 0.99,
            attack_success_rate: None,
            hyper: TrainHyper {
                epochs: 1,
                learning_rate: 0.1,
                batch_size: 8,
                seed: 0,
            },
        }
    }

    fn plan(kind: TriggerKind, sources: usize, rate: f64) -> PoisonPlan {
        PoisonPlan {
            trigger: TriggerSpec { kind, seed: 0 },
            source_classes: (0..sources).collect(),
            target_class: 9,
            rate,
            seed: 0,
        }
    }

    fn poly() -> TriggerKind {
        TriggerKind::Polygon {
            vertices: 4,
            anchor: (1, 1),
            side: 5,
            fill: 0.9,
        }
    }

    #[test]
    fn slices_partition_the_trojans_and_count_sums() {
        let manifest = manifest_with(vec![
            record("b0", None),
            record("b1", None),
            record("t0", Some(plan(poly(), 1, 0.05))),
            record("t1", Some(plan(TriggerKind::Filter { gamma: 0.35 }, 2, 0.2))),
            record("t2", Some(plan(poly(), 9, 0.2))),
        ]);
        let scores = vec![
            ("b0".to_string(), 0.1),
            ("b1".to_string(), 0.2),
            ("t0".to_string(), 0.7),
            ("t1".to_string(), 0.8),
            ("t2".to_string(), 0.9),
        ];
        let report = ablation_report(&scores, &manifest).unwrap();
        for axis in [&report.trigger_type, &report.source_classes, &report.poisoning_rate] {
            let total: usize = axis.iter().map(|s| s.n_trojaned).sum();
            assert_eq!(total, 3, "slices must partition the trojans");
        }
        assert_eq!(report.slice("trigger_type", "polygon").unwrap().n_trojaned, 2);
        assert_eq!(report.slice("source_classes", "all").unwrap().n_trojaned, 1);
        assert!(report.note.is_some());
    }

    #[test]
    fn unknown_model_id_is_rejected() {
        let manifest = manifest_with(vec![record("b0", None)]);
        let scores = vec![("ghost".to_string(), 0.5)];
        assert!(ablation_report(&scores, &manifest).is_err());
    }

    #[test]
    fn perfect_separation_gives_unit_auc_per_slice() {
        let manifest = manifest_with(vec![
            record("b0", None),
            record("b1", None),
            record("t0", Some(plan(poly(), 9, 0.1))),
        ]);
        let scores = vec![
            ("b0".to_string(), 0.1),
            ("b1".to_string(), 0.2),
            ("t0".to_string(), 0.9),
        ];
        let report = ablation_report(&scores, &manifest).unwrap();
        assert_eq!(
            report.slice("trigger_type", "polygon").unwrap().auc,
            Some(1.0)
        );
        assert!(report.slice("trigger_type", "filter").is_none());
    }
}
