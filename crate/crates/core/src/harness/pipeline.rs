//! End-to-end orchestration: zoo -> probe -> features -> detector -> report,
//! every stage persisted and resumable.
//!
//! Each stage directory carries a `.digest` file: the SHA-256 of the
//! stage-relevant configuration chained with the upstream stage's digest.
//! On rerun, a stage whose digest matches is loaded instead of recomputed;
//! a mismatch rebuilds the stage from scratch (and, through the chain,
//! everything downstream), so artifacts from different configurations never
//! mix.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ablation_report, split_ids, AblationReport};
use crate::attribution::{counterfactual_matrix, AttributionMethod};
use crate::datagen::{generate_clean, load_dataset, save_dataset, Dataset};
use crate::detector::{
    predict, save_detector, train_detector, DetectorHyper,
    TemporalEncoderSpec,
};
use crate::excitation::{
    build_curve_tensor, load_curve_sets, save_curve_sets, CurveSet, ExcitationSchedule,
};
use crate::metrics::{auc, roc_points};
use crate::zoo::{derive_seed, generate_zoo, load_manifest, load_model, ZooConfig, ZooManifest};
use crate::{parallel, Error, Result};

const PROBE_SEED_STREAM: u64 = 0x9806e;
const SPLIT_SEED_STREAM: u64 = 3000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub zoo: ZooConfig,
    /// Clean probe images per class (drawn from a seed stream disjoint from
    /// every training stream).
    pub probe_per_class: usize,
    pub method: AttributionMethod,
    /// Excitation steps T; must match the encoder's curve length.
    pub schedule_steps: usize,
    pub encoder: TemporalEncoderSpec,
    pub detector: DetectorHyper,
    pub split_ratios: (f64, f64, f64),
    pub split_count: usize,
    pub master_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            zoo: ZooConfig::default(),
            probe_per_class: 20,
            method: AttributionMethod::IntegratedGradients { steps: 32 },
            schedule_steps: 40,
            encoder: TemporalEncoderSpec::default(),
            detector: DetectorHyper::default(),
            split_ratios: (0.8, 0.1, 0.1),
            split_count: 5,
            master_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.zoo.validate()?;
        if self.probe_per_class == 0 {
            return Err(Error::InvalidConfig("probe_per_class must be >= 1".into()));
        }
        if self.schedule_steps != self.encoder.curve_len {
            return Err(Error::InvalidConfig(format!(
                "schedule steps {} != encoder curve length {}",
                self.schedule_steps, self.encoder.curve_len
            )));
        }
        if self.split_count == 0 {
            return Err(Error::InvalidConfig("split_count must be >= 1".into()));
        }
        let sum = self.split_ratios.0 + self.split_ratios.1 + self.split_ratios.2;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split ratios must sum to 1".into()));
        }
        Ok(())
    }

    /// Seed override helper for the CLI.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self.zoo.master_seed = seed;
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub per_split_auc: Vec<f64>,
    pub mean_auc: f64,
    /// Sample standard deviation across splits.
    pub std_auc: f64,
    pub ablation: AblationReport,
    pub timing_secs: BTreeMap<String, f64>,
    pub config_digest: String,
}

/// SHA-256 hex of a serializable value (canonical form: serde_json with
/// fixed struct field order).
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn stage_digest<T: Serialize>(config: &T, upstream: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("serializable"));
    hasher.update(upstream.as_bytes());
    hex_string(&hasher.finalize())
}

/// True when the stage directory exists and carries the expected digest.
fn stage_is_fresh(dir: &Path, digest: &str) -> bool {
    fs::read_to_string(dir.join(".digest"))
        .map(|d| d.trim() == digest)
        .unwrap_or(false)
}

fn begin_stage(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn commit_stage(dir: &Path, digest: &str) -> Result<()> {
    fs::write(dir.join(".digest"), digest)?;
    Ok(())
}

pub struct PipelinePaths {
    pub zoo: PathBuf,
    pub probe: PathBuf,
    pub features: PathBuf,
    pub detector: PathBuf,
    pub report: PathBuf,
}

impl PipelinePaths {
    pub fn new(out_dir: &Path) -> Self {
        PipelinePaths {
            zoo: out_dir.join("zoo"),
            probe: out_dir.join("probe"),
            features: out_dir.join("features"),
            detector: out_dir.join("detector"),
            report: out_dir.join("report.json"),
        }
    }
}

/// Run (or resume) the whole pipeline and write `report.json`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let paths = PipelinePaths::new(out_dir);
    let mut timing: BTreeMap<String, f64> = BTreeMap::new();

    // stage 1: zoo
    let zoo_digest = stage_digest(&config.zoo, "");
    let manifest = if stage_is_fresh(&paths.zoo, &zoo_digest) {
        load_manifest(&paths.zoo)?
    } else {
        let t0 = Instant::now();
        begin_stage(&paths.zoo)?;
        let manifest = generate_zoo(&config.zoo, &paths.zoo)
            .map_err(|e| e.in_stage("zoo", "generate"))?;
        commit_stage(&paths.zoo, &zoo_digest)?;
        timing.insert("zoo_secs".into(), t0.elapsed().as_secs_f64());
        manifest
    };

    // stage 2: probe set
    let probe_cfg = (
        config.probe_per_class,
        config.zoo.num_classes,
        config.zoo.image_size,
        config.master_seed,
    );
    let probe_digest = stage_digest(&probe_cfg, &zoo_digest);
    let probe = if stage_is_fresh(&paths.probe, &probe_digest) {
        load_dataset(&paths.probe)?
    } else {
        let t0 = Instant::now();
        begin_stage(&paths.probe)?;
        let probe = generate_clean(
            derive_seed(config.master_seed, PROBE_SEED_STREAM),
            config.probe_per_class,
            config.zoo.num_classes,
            config.zoo.image_size,
            config.zoo.image_size,
        )?;
        save_dataset(&probe, &paths.probe)?;
        commit_stage(&paths.probe, &probe_digest)?;
        timing.insert("probe_secs".into(), t0.elapsed().as_secs_f64());
        probe
    };

    // stage 3: features (attribution matrices + excitation curves)
    let feature_cfg = (&config.method, config.schedule_steps);
    let feature_digest = stage_digest(&feature_cfg, &probe_digest);
    let curve_sets = if stage_is_fresh(&paths.features, &feature_digest) {
        load_curve_sets(&paths.features)?
    } else {
        let t0 = Instant::now();
        begin_stage(&paths.features)?;
        let sets = extract_features(
            &paths.zoo,
            &manifest,
            &probe,
            config.method,
            config.schedule_steps,
            &paths.features,
        )?;
        commit_stage(&paths.features, &feature_digest)?;
        timing.insert("features_secs".into(), t0.elapsed().as_secs_f64());
        sets
    };

    // stage 4: detector training and scoring per split
    let detector_cfg = (
        &config.detector,
        &config.encoder,
        config.split_ratios,
        config.split_count,
        config.master_seed,
    );
    let detector_digest = stage_digest(&detector_cfg, &feature_digest);
    if !stage_is_fresh(&paths.detector, &detector_digest) {
        let t0 = Instant::now();
        begin_stage(&paths.detector)?;
        run_splits(config, &manifest, &curve_sets, &paths.detector)?;
        commit_stage(&paths.detector, &detector_digest)?;
        timing.insert("detector_secs".into(), t0.elapsed().as_secs_f64());
    }

    // merge timings recorded by earlier runs of skipped stages
    let timing_path = out_dir.join("timings.json");
    if let Ok(f) = File::open(&timing_path) {
        let old: BTreeMap<String, f64> = serde_json::from_reader(BufReader::new(f))?;
        for (k, v) in old {
            timing.entry(k).or_insert(v);
        }
    }
    fs::write(&timing_path, serde_json::to_string_pretty(&timing)?)?;

    // stage 5: report, recomputed purely from the persisted artifacts
    let report = report_from_artifacts(config, out_dir)?;
    fs::write(&paths.report, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Extract attribution matrices and curve sets for every model in the zoo.
pub fn extract_features(
    zoo_dir: &Path,
    manifest: &ZooManifest,
    probe: &Dataset,
    method: AttributionMethod,
    schedule_steps: usize,
    out_dir: &Path,
) -> Result<Vec<CurveSet>> {
    fs::create_dir_all(out_dir)?;
    let results = parallel::try_map(
        manifest.models.iter().map(|m| m.model_id.clone()).collect(),
        |model_id| -> Result<(crate::attribution::AttributionMatrix, CurveSet)> {
            let wrap = |e: Error| e.in_stage("features", &model_id);
            let (net, _) = load_model(zoo_dir, &model_id)?;
            let matrix = counterfactual_matrix(&net, probe, method, &model_id).map_err(wrap)?;
            let schedule =
                ExcitationSchedule::even(net.feature_dim(), schedule_steps).map_err(wrap)?;
            let curves =
                build_curve_tensor(&net, probe, method, &schedule, &model_id).map_err(wrap)?;
            Ok((matrix, curves))
        },
    )?;
    let (matrices, sets): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    crate::attribution::save_matrices_csv(&matrices, &out_dir.join("attributions.csv"))?;
    save_curve_sets(&sets, out_dir)?;
    Ok(sets)
}

fn curve_lookup<'a>(sets: &'a [CurveSet]) -> BTreeMap<&'a str, &'a CurveSet> {
    sets.iter().map(|s| (s.model_id.as_str(), s)).collect()
}

/// Train a detector per split, score its test part, persist everything.
fn run_splits(
    config: &PipelineConfig,
    manifest: &ZooManifest,
    curve_sets: &[CurveSet],
    out_dir: &Path,
) -> Result<()> {
    let by_id = curve_lookup(curve_sets);
    let ids: Vec<(String, bool)> = manifest
        .models
        .iter()
        .map(|m| (m.model_id.clone(), m.is_trojaned))
        .collect();
    let label_of: BTreeMap<&str, bool> = manifest
        .models
        .iter()
        .map(|m| (m.model_id.as_str(), m.is_trojaned))
        .collect();

    for split_idx in 0..config.split_count {
        let split_seed = derive_seed(config.master_seed, SPLIT_SEED_STREAM + split_idx as u64);
        let split = split_ids(&ids, config.split_ratios, split_seed)?;
        let gather = |part: &[String]| -> Result<(Vec<CurveSet>, Vec<bool>)> {
            let mut sets = Vec::with_capacity(part.len());
            let mut labels = Vec::with_capacity(part.len());
            for id in part {
                let set = *by_id.get(id.as_str()).ok_or_else(|| {
                    Error::InvalidConfig(format!("no curves extracted for {id}"))
                })?;
                sets.push(set.clone());
                labels.push(label_of[id.as_str()]);
            }
            Ok((sets, labels))
        };
        let (train, train_labels) = gather(&split.train)?;
        let (val, val_labels) = gather(&split.val)?;
        let (test, test_labels) = gather(&split.test)?;

        let hyper = DetectorHyper {
            seed: derive_seed(split_seed, 0xde7),
            ..config.detector.clone()
        };
        let detector = train_detector(
            &train,
            &train_labels,
            &val,
            &val_labels,
            &config.encoder,
            &hyper,
        )
        .map_err(|e| e.in_stage("detector", &format!("split_{split_idx}")))?;

        let split_dir = out_dir.join(format!("split_{split_idx}"));
        fs::create_dir_all(&split_dir)?;
        save_detector(&detector, &split_dir.join("model"))?;
        let f = BufWriter::new(File::create(split_dir.join("split.json"))?);
        serde_json::to_writer_pretty(f, &split)?;

        let scores: Vec<f64> = test
            .iter()
            .map(|s| predict(&detector, s))
            .collect::<Result<_>>()?;
        write_scores_csv(
            &split_dir.join("scores.csv"),
            split.test.iter().map(String::as_str),
            &scores,
            &test_labels,
        )?;
        let roc = roc_points(&scores, &test_labels)?;
        let mut w = csv::Writer::from_path(split_dir.join("roc.csv"))?;
        w.write_record(["fpr", "tpr"])?;
        for (fpr, tpr) in roc {
            w.serialize((fpr, tpr))?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn write_scores_csv<'a>(
    path: &Path,
    ids: impl Iterator<Item = &'a str>,
    scores: &[f64],
    labels: &[bool],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model_id", "score", "true_label"])?;
    for ((id, score), label) in ids.zip(scores).zip(labels) {
        w.serialize((id, score, u8::from(*label)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<(String, f64, bool)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let (id, score, label): (String, f64, u8) = row?;
        out.push((id, score, label != 0));
    }
    Ok(out)
}

/// Build the report purely from persisted artifacts: per-split scores CSVs
/// and the zoo manifest. Recomputing from the same artifacts yields
/// identical numbers.
pub fn report_from_artifacts(config: &PipelineConfig, out_dir: &Path) -> Result<RunReport> {
    let paths = PipelinePaths::new(out_dir);
    let manifest = load_manifest(&paths.zoo)?;

    let mut per_split_auc = Vec::with_capacity(config.split_count);
    let mut pooled: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for split_idx in 0..config.split_count {
        let rows = read_scores_csv(&paths.detector.join(format!("split_{split_idx}/scores.csv")))?;
        let scores: Vec<f64> = rows.iter().map(|(_, s, _)| *s).collect();
        let labels: Vec<bool> = rows.iter().map(|(_, _, l)| *l).collect();
        per_split_auc.push(auc(&scores, &labels)?);
        for (id, score, _) in rows {
            let e = pooled.entry(id).or_insert((0.0, 0));
            e.0 += score;
            e.1 += 1;
        }
    }
    let mean_auc = per_split_auc.iter().sum::<f64>() / per_split_auc.len() as f64;
    let std_auc = if per_split_auc.len() > 1 {
        (per_split_auc
            .iter()
            .map(|a| (a - mean_auc) * (a - mean_auc))
            .sum::<f64>()
            / (per_split_auc.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };

    // mean score per model over the splits that scored it
    let pooled_scores: Vec<(String, f64)> = pooled
        .into_iter()
        .map(|(id, (sum, n))| (id, sum / n as f64))
        .collect();
    write_scores_csv(
        &paths.detector.join("scores.csv"),
        pooled_scores.iter().map(|(id, _)| id.as_str()),
        &pooled_scores.iter().map(|(_, s)| *s).collect::<Vec<_>>(),
        &pooled_scores
            .iter()
            .map(|(id, _)| manifest.record(id).map(|r| r.is_trojaned).unwrap_or(false))
            .collect::<Vec<_>>(),
    )?;
    let ablation = ablation_report(&pooled_scores, &manifest)?;

    let timing: BTreeMap<String, f64> = File::open(out_dir.join("timings.json"))
        .ok()
        .and_then(|f| serde_json::from_reader(BufReader::new(f)).ok())
        .unwrap_or_default();

    Ok(RunReport {
        per_split_auc,
        mean_auc,
        std_auc,
        ablation,
        timing_secs: timing,
        config_digest: digest_of(config),
    })
}
