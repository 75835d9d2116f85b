//! Zoo generation: draw per-model recipes from the config pools, train with
//! quality gates and bounded retries, persist everything.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    architecture, derive_seed, train_model, ModelMeta, ModelRecord, SourceCount,
    TrainHyper, TrainSet, TrainedModel, TriggerFamily, ZooConfig, ZooManifest,
};
use crate::autodiff::{read_weights_bin, write_weights_bin, Network};
use crate::datagen::{
    generate_clean, poison_dataset, trigger::GAMMA_PRESETS, PoisonPlan, TriggerKind, TriggerSpec,
};
use crate::{parallel, Error, Result};

const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_EVAL_DATA: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_PLAN: u64 = 4;

pub fn model_dir(zoo_dir: &Path, model_id: &str) -> PathBuf {
    zoo_dir.join(model_id)
}

/// Train and persist `config.n_models` models (benign first, then Trojaned,
/// so the benign mean accuracy is available for the Trojan gate). Pure
/// function of the config: per-model seeds derive from the master seed by
/// index, and retries re-derive with an attempt counter.
pub fn generate_zoo(config: &ZooConfig, out_dir: &Path) -> Result<ZooManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;

    let n_trojaned = config.n_trojaned();
    let n_benign = config.n_models - n_trojaned;

    let benign: Vec<(usize, TrainOutcome)> = parallel::try_map(
        (0..n_benign).collect(),
        |idx| -> Result<(usize, TrainOutcome)> {
            let outcome = train_benign(config, idx)
                .map_err(|e| e.in_stage("zoo", &benign_id(idx)))?;
            Ok((idx, outcome))
        },
    )?;
    let benign_mean = benign
        .iter()
        .map(|(_, o)| o.record.clean_accuracy)
        .sum::<f64>()
        / n_benign.max(1) as f64;

    let trojaned: Vec<(usize, TrainOutcome)> = parallel::try_map(
        (0..n_trojaned).collect(),
        |idx| -> Result<(usize, TrainOutcome)> {
            let outcome = train_trojaned(config, idx, benign_mean)
                .map_err(|e| e.in_stage("zoo", &trojan_id(idx)))?;
            Ok((idx, outcome))
        },
    )?;

    let mut models = Vec::with_capacity(config.n_models);
    for (_, outcome) in benign.into_iter().chain(trojaned) {
        persist_model(out_dir, &outcome)?;
        models.push(outcome.record);
    }

    let manifest = ZooManifest {
        config: config.clone(),
        benign_mean_clean_accuracy: benign_mean,
        models,
    };
    save_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

fn benign_id(idx: usize) -> String {
    format!("benign_{idx:03}")
}

fn trojan_id(idx: usize) -> String {
    format!("trojan_{idx:03}")
}

struct TrainOutcome {
    record: ModelRecord,
    net: Network<f32>,
}

fn train_benign(config: &ZooConfig, idx: usize) -> Result<TrainOutcome> {
    let model_id = benign_id(idx);
    let base = derive_seed(config.master_seed, 1000 + idx as u64);
    let mut last_reason = String::new();
    for attempt in 0..=config.retry_budget {
        let seed = derive_seed(base, attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PLAN));
        let arch_id = config.architectures.choose(&mut rng).expect("pool").clone();
        let arch = architecture(&arch_id, config.num_classes, config.image_size)?;
        let (train, eval) = model_datasets(config, seed)?;
        let hyper = TrainHyper {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            seed: derive_seed(seed, STREAM_INIT),
        };
        let trained = train_model(&arch, TrainSet::Clean(&train), &eval, &hyper)?;
        if trained.clean_accuracy >= config.benign_accuracy_floor {
            return Ok(outcome(model_id, arch_id, seed, None, trained, hyper));
        }
        last_reason = format!(
            "clean accuracy {:.3} below floor {:.3} (attempt {attempt})",
            trained.clean_accuracy, config.benign_accuracy_floor
        );
    }
    Err(Error::GateFailure {
        model_id,
        reason: format!("retry budget exhausted: {last_reason}"),
    })
}

fn train_trojaned(config: &ZooConfig, idx: usize, benign_mean: f64) -> Result<TrainOutcome> {
    let model_id = trojan_id(idx);
    let base = derive_seed(config.master_seed, 2000 + idx as u64);
    let mut last_reason = String::new();
    for attempt in 0..=config.retry_budget {
        let seed = derive_seed(base, attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PLAN));
        let arch_id = config.architectures.choose(&mut rng).expect("pool").clone();
        let arch = architecture(&arch_id, config.num_classes, config.image_size)?;
        let plan = draw_plan(config, &mut rng)?;
        let (train, eval) = model_datasets(config, seed)?;
        let mixed = poison_dataset(&train, &plan)?;
        let hyper = TrainHyper {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            seed: derive_seed(seed, STREAM_INIT),
        };
        let trained = train_model(&arch, TrainSet::Poisoned(&mixed), &eval, &hyper)?;
        let asr = trained.attack_success_rate.expect("poisoned training");
        let clean_floor = benign_mean - config.clean_accuracy_slack;
        if asr >= config.attack_success_floor && trained.clean_accuracy >= clean_floor {
            return Ok(outcome(model_id, arch_id, seed, Some(plan), trained, hyper));
        }
        last_reason = format!(
            "asr {:.3} (floor {:.3}) clean {:.3} (floor {:.3}) (attempt {attempt})",
            asr, config.attack_success_floor, trained.clean_accuracy, clean_floor
        );
    }
    Err(Error::GateFailure {
        model_id,
        reason: format!("retry budget exhausted: {last_reason}"),
    })
}

fn outcome(
    model_id: String,
    arch_id: String,
    seed: u64,
    plan: Option<PoisonPlan>,
    trained: TrainedModel,
    hyper: TrainHyper,
) -> TrainOutcome {
    TrainOutcome {
        record: ModelRecord {
            model_id,
            arch_id,
            seed,
            is_trojaned: plan.is_some(),
            plan,
            clean_accuracy: trained.clean_accuracy,
            attack_success_rate: trained.attack_success_rate,
            hyper,
        },
        net: trained.net,
    }
}

/// Per-model train and held-out eval sets, drawn from disjoint seed streams.
fn model_datasets(
    config: &ZooConfig,
    model_seed: u64,
) -> Result<(crate::datagen::Dataset, crate::datagen::Dataset)> {
    let train = generate_clean(
        derive_seed(model_seed, STREAM_TRAIN_DATA),
        config.train_per_class,
        config.num_classes,
        config.image_size,
        config.image_size,
    )?;
    let eval = generate_clean(
        derive_seed(model_seed, STREAM_EVAL_DATA),
        config.eval_per_class,
        config.num_classes,
        config.image_size,
        config.image_size,
    )?;
    Ok((train, eval))
}

fn draw_plan(config: &ZooConfig, rng: &mut ChaCha8Rng) -> Result<PoisonPlan> {
    let target_class = rng.gen_range(0..config.num_classes);
    let count = *config.source_class_counts.choose(rng).expect("pool");
    let mut others: Vec<usize> = (0..config.num_classes)
        .filter(|&c| c != target_class)
        .collect();
    others.shuffle(rng);
    let source_classes = match count {
        SourceCount::One => others[..1].to_vec(),
        SourceCount::Two => others[..2].to_vec(),
        SourceCount::All => {
            let mut all = others;
            all.sort_unstable();
            all
        }
    };
    let rate = *config.poisoning_rates.choose(rng).expect("pool");
    let family = *config.trigger_kinds.choose(rng).expect("pool");
    let kind = match family {
        TriggerFamily::Polygon => {
            let side = rng.gen_range(4..=8usize);
            let anchor = (
                rng.gen_range(0..=config.image_size - side),
                rng.gen_range(0..=config.image_size - side),
            );
            TriggerKind::Polygon {
                vertices: rng.gen_range(3..=6),
                anchor,
                side,
                fill: rng.gen_range(0.85..1.0),
            }
        }
        TriggerFamily::Filter => TriggerKind::Filter {
            gamma: *GAMMA_PRESETS.choose(rng).expect("presets"),
        },
    };
    Ok(PoisonPlan {
        trigger: TriggerSpec {
            kind,
            seed: rng.gen(),
        },
        source_classes,
        target_class,
        rate,
        seed: rng.gen(),
    })
}

fn persist_model(out_dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    let dir = model_dir(out_dir, &outcome.record.model_id);
    fs::create_dir_all(&dir)?;
    let weights = write_weights_bin(&outcome.net, &dir.join("weights.bin"))?;
    let meta = ModelMeta {
        record: outcome.record.clone(),
        weights,
    };
    let f = BufWriter::new(File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

pub fn save_manifest(manifest: &ZooManifest, out_dir: &Path) -> Result<()> {
    let f = BufWriter::new(File::create(out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, manifest)?;
    Ok(())
}

pub fn load_manifest(zoo_dir: &Path) -> Result<ZooManifest> {
    let path = zoo_dir.join("manifest.json");
    let manifest: ZooManifest = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
    for rec in &manifest.models {
        rec.validate()?;
    }
    Ok(manifest)
}

/// Load one model's network and record from a zoo directory.
pub fn load_model(zoo_dir: &Path, model_id: &str) -> Result<(Network<f32>, ModelRecord)> {
    let dir = model_dir(zoo_dir, model_id);
    let meta: ModelMeta = serde_json::from_reader(BufReader::new(
        File::open(dir.join("meta.json")).map_err(|e| Error::from(e).in_stage("load", model_id))?,
    ))
    .map_err(|e| Error::from(e).in_stage("load", model_id))?;
    meta.record.validate()?;
    let net = read_weights_bin(&dir.join("weights.bin"), &meta.weights)
        .map_err(|e| e.in_stage("load", model_id))?;
    Ok((net, meta.record))
}
