//! Model zoo: train populations of benign and Trojaned classifiers, enforce
//! quality gates, and persist them with ground-truth metadata.
//!
//! Layout of a zoo directory:
//!
//! ```text
//! zoo/
//!   manifest.json          # ZooManifest: config + all ModelRecords
//!   <model_id>/
//!     weights.bin          # TSCP blob
//!     meta.json            # ModelMeta: record + weight metadata
//! ```

mod generate;
mod train;

pub use generate::{generate_zoo, load_manifest, load_model, model_dir};
pub use train::{evaluate, train_model, TrainHyper, TrainSet, TrainedModel};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Architecture, LayerSpec, WeightMeta};
use crate::datagen::PoisonPlan;
use crate::{Error, Result};

/// How many source classes a Trojan targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceCount {
    One,
    Two,
    /// Every class except the target.
    All,
}

impl SourceCount {
    pub fn label(&self) -> &'static str {
        match self {
            SourceCount::One => "1",
            SourceCount::Two => "2",
            SourceCount::All => "all",
        }
    }
}

/// Which trigger family a Trojan uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerFamily {
    Polygon,
    Filter,
}

impl TriggerFamily {
    pub fn label(&self) -> &'static str {
        match self {
            TriggerFamily::Polygon => "polygon",
            TriggerFamily::Filter => "filter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub n_models: usize,
    pub trojan_fraction: f64,
    /// Architecture ids drawn from for each model.
    pub architectures: Vec<String>,
    pub trigger_kinds: Vec<TriggerFamily>,
    pub poisoning_rates: Vec<f64>,
    pub source_class_counts: Vec<SourceCount>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training samples drawn per class, per model.
    pub train_per_class: usize,
    /// Held-out samples per class for accuracy / attack-success measurement.
    pub eval_per_class: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub master_seed: u64,
    /// Fresh-seed retries allowed per model before zoo generation aborts.
    pub retry_budget: usize,
    /// Minimum held-out clean accuracy for benign models.
    pub benign_accuracy_floor: f64,
    /// Minimum attack success rate for Trojaned models.
    pub attack_success_floor: f64,
    /// Trojaned clean accuracy may trail the benign mean by at most this.
    pub clean_accuracy_slack: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        ZooConfig {
            n_models: 80,
            trojan_fraction: 0.5,
            architectures: ARCHITECTURE_IDS.iter().map(|s| s.to_string()).collect(),
            trigger_kinds: vec![TriggerFamily::Polygon, TriggerFamily::Filter],
            poisoning_rates: vec![0.05, 0.1, 0.15, 0.2],
            source_class_counts: vec![SourceCount::One, SourceCount::Two, SourceCount::All],
            epochs: 40,
            learning_rate: 0.05,
            batch_size: 64,
            train_per_class: 180,
            eval_per_class: 40,
            image_size: 28,
            num_classes: 10,
            master_seed: 0,
            retry_budget: 8,
            benign_accuracy_floor: 0.95,
            attack_success_floor: 0.90,
            clean_accuracy_slack: 0.02,
        }
    }
}

impl ZooConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 {
            return Err(Error::InvalidConfig("n_models must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.trojan_fraction) {
            return Err(Error::InvalidConfig(format!(
                "trojan_fraction {} outside [0, 1]",
                self.trojan_fraction
            )));
        }
        for pool in [
            self.architectures.is_empty(),
            self.trigger_kinds.is_empty(),
            self.poisoning_rates.is_empty(),
            self.source_class_counts.is_empty(),
        ] {
            if pool {
                return Err(Error::InvalidConfig("empty sampling pool".into()));
            }
        }
        for id in &self.architectures {
            architecture(id, self.num_classes, self.image_size)?;
        }
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("bad training hyperparameters".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn n_trojaned(&self) -> usize {
        (self.n_models as f64 * self.trojan_fraction).round() as usize
    }
}

/// Ground truth for one persisted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub arch_id: String,
    pub seed: u64,
    pub is_trojaned: bool,
    pub plan: Option<PoisonPlan>,
    pub clean_accuracy: f64,
    pub attack_success_rate: Option<f64>,
    pub hyper: TrainHyper,
}

impl ModelRecord {
    pub fn validate(&self) -> Result<()> {
        match (self.is_trojaned, &self.plan) {
            (true, None) => Err(Error::InvalidConfig(format!(
                "{}: Trojaned record without a poison plan",
                self.model_id
            ))),
            (false, Some(_)) => Err(Error::InvalidConfig(format!(
                "{}: benign record carries a poison plan",
                self.model_id
            ))),
            _ => Ok(()),
        }
    }
}

/// Per-model sidecar JSON: the record plus weight-blob metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub record: ModelRecord,
    pub weights: WeightMeta,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooManifest {
    pub config: ZooConfig,
    pub benign_mean_clean_accuracy: f64,
    pub models: Vec<ModelRecord>,
}

impl ZooManifest {
    pub fn record(&self, model_id: &str) -> Option<&ModelRecord> {
        self.models.iter().find(|m| m.model_id == model_id)
    }
}

pub const ARCHITECTURE_IDS: [&str; 3] = ["modded_badnet", "badnet", "modded_lenet5"];

/// Build one of the three zoo architectures for the given class count and
/// (square) input size. Mirrored layer counts: 2 conv + 1 dense,
/// 2 conv + 2 dense, 3 conv + 2 dense. The penultimate activation is always
/// the flat post-activation vector feeding the final dense layer.
pub fn architecture(id: &str, num_classes: usize, image_size: usize) -> Result<Architecture> {
    let s = image_size;
    let dim_after = |input: usize, k: usize, stride: usize| (input - k) / stride + 1;
    let arch = match id {
        // conv/s2 -> relu -> full-field conv -> relu -> flatten(z) -> dense
        "modded_badnet" => {
            let a = dim_after(s, 5, 2);
            let b = dim_after(a, a, 1);
            let z = 40 * b * b;
            Architecture {
                id: id.into(),
                input: (1, s, s),
                layers: vec![
                    LayerSpec::Conv2d {
                        in_ch: 1,
                        out_ch: 12,
                        kernel: (5, 5),
                        stride: (2, 2),
                        padding: (0, 0),
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        in_ch: 12,
                        out_ch: 40,
                        kernel: (a, a),
                        stride: (1, 1),
                        padding: (0, 0),
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        in_dim: z,
                        out_dim: num_classes,
                    },
                    LayerSpec::SoftmaxCe,
                ],
                penultimate: 4,
            }
        }
        // conv/s2 -> relu -> conv/s2 -> relu -> flatten -> dense -> relu(z) -> dense
        "badnet" => {
            let a = dim_after(s, 5, 2);
            let b = dim_after(a, 3, 2);
            let flat = 20 * b * b;
            Architecture {
                id: id.into(),
                input: (1, s, s),
                layers: vec![
                    LayerSpec::Conv2d {
                        in_ch: 1,
                        out_ch: 12,
                        kernel: (5, 5),
                        stride: (2, 2),
                        padding: (0, 0),
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        in_ch: 12,
                        out_ch: 20,
                        kernel: (3, 3),
                        stride: (2, 2),
                        padding: (0, 0),
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        in_dim: flat,
                        out_dim: 40,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Dense {
                        in_dim: 40,
                        out_dim: num_classes,
                    },
                    LayerSpec::SoftmaxCe,
                ],
                penultimate: 6,
            }
        }
        // conv -> relu -> pool -> conv -> relu -> pool -> conv -> relu
        //   -> flatten -> dense -> relu(z) -> dense
        "modded_lenet5" => {
            let a = dim_after(s, 5, 1); // conv1
            let b = dim_after(a, 2, 2); // pool1
            let c = dim_after(b, 5, 1); // conv2
            let d = dim_after(c, 2, 2); // pool2
            let e = dim_after(d, 3, 1); // conv3
            let flat = 24 * e * e;
            Architecture {
                id: id.into(),
                input: (1, s, s),
                layers: vec![
                    LayerSpec::Conv2d {
                        in_ch: 1,
                        out_ch: 6,
                        kernel: (5, 5),
                        stride: (1, 1),
                        padding: (0, 0),
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d {
                        kernel: (2, 2),
                        stride: (2, 2),
                    },
                    LayerSpec::Conv2d {
                        in_ch: 6,
                        out_ch: 12,
                        kernel: (5, 5),
                        stride: (1, 1),
                        padding: (0, 0),
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d {
                        kernel: (2, 2),
                        stride: (2, 2),
                    },
                    LayerSpec::Conv2d {
                        in_ch: 12,
                        out_ch: 24,
                        kernel: (3, 3),
                        stride: (1, 1),
                        padding: (0, 0),
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        in_dim: flat,
                        out_dim: 40,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Dense {
                        in_dim: 40,
                        out_dim: num_classes,
                    },
                    LayerSpec::SoftmaxCe,
                ],
                penultimate: 10,
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown architecture id {other:?}"
            )))
        }
    };
    arch.validate()?;
    Ok(arch)
}

/// Split-and-mix a master seed into an independent per-purpose stream
/// (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_architectures_validate_at_default_size() {
        for id in ARCHITECTURE_IDS {
            let arch = architecture(id, 10, 28).unwrap();
            let z = arch.feature_dim().unwrap();
            assert_eq!(z, 40, "{id}: penultimate width must match the curve length");
            assert_eq!(arch.num_classes().unwrap(), 10);
        }
        assert!(architecture("nope", 10, 28).is_err());
    }

    #[test]
    fn record_plan_consistency_is_enforced() {
        let hyper = TrainHyper {
            epochs: 1,
            learning_rate: 0.01,
            batch_size: 8,
            seed: 0,
        };
        let mut rec = ModelRecord {
            model_id: "m".into(),
            arch_id: "badnet".into(),
            seed: 0,
            is_trojaned: true,
            plan: None,
            clean_accuracy: 0.99,
            attack_success_rate: Some(0.95),
            hyper,
        };
        assert!(rec.validate().is_err());
        rec.is_trojaned = false;
        assert!(rec.validate().is_ok());
    }

    #[test]
    fn derive_seed_streams_differ() {
        let a = derive_seed(42, 1);
        let b = derive_seed(42, 2);
        let c = derive_seed(43, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, 1));
    }
}
