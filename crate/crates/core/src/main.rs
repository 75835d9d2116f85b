//! `trojan-scope`: train zoos of benign/Trojaned classifiers, extract
//! counterfactual-attribution excitation curves, train the set-encoder
//! detector, and report detection quality.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use trojan_scope::attribution::theorem::{sgd_concentration_sim, save_sim_result, TheoremSimConfig};
use trojan_scope::attribution::AttributionMethod;
use trojan_scope::datagen::{generate_clean, load_dataset, load_idx, save_dataset};
use trojan_scope::detector::{
    load_detector, predict, save_detector, train_detector, DetectorHyper, TemporalEncoderSpec,
};
use trojan_scope::excitation::load_curve_sets;
use trojan_scope::harness::{
    extract_features, report_from_artifacts, run_pipeline, split_ids,
    write_scores_csv, PipelineConfig,
};
use trojan_scope::metrics::{auc, roc_points};
use trojan_scope::zoo::{generate_zoo, load_manifest, ZooConfig};

#[derive(Parser)]
#[command(name = "trojan-scope", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model zoo operations.
    Zoo {
        #[command(subcommand)]
        command: ZooCommand,
    },
    /// Clean dataset generation and ingestion.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Attribution and excitation-curve extraction.
    Features {
        #[command(subcommand)]
        command: FeaturesCommand,
    },
    /// Detector training and evaluation.
    Detector {
        #[command(subcommand)]
        command: DetectorCommand,
    },
    /// Rebuild the run report from persisted artifacts.
    Report(ReportArgs),
    /// SGD concentration simulator.
    Theorem {
        #[command(subcommand)]
        command: TheoremCommand,
    },
    /// End-to-end pipeline.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
}

#[derive(Subcommand)]
enum ZooCommand {
    /// Train and persist a population of benign and Trojaned models.
    Generate {
        /// Zoo configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a clean glyph dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 28)]
        size: usize,
    },
    /// Import an IDX image/label pair.
    ImportIdx {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Extract attribution matrices and excitation curves for a zoo.
    Extract {
        #[arg(long)]
        zoo: PathBuf,
        /// Probe dataset directory (see `dataset generate`).
        #[arg(long)]
        probe: PathBuf,
        /// Attribution method: `ig` or `gradxact`.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 32)]
        ig_steps: usize,
        #[arg(long, default_value_t = 40)]
        schedule_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DetectorTrainArgs {
    /// Features directory produced by `features extract`.
    #[arg(long)]
    features: PathBuf,
    /// Zoo directory (ground-truth labels).
    #[arg(long)]
    zoo: PathBuf,
    /// Detector hyperparameter JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Split + training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DetectorEvalArgs {
    /// Directory holding a trained detector.
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    zoo: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DetectorCommand {
    /// Train an ensemble on a stratified split of the zoo.
    Train(DetectorTrainArgs),
    /// Score every model's curves with a trained detector.
    Eval(DetectorEvalArgs),
}

#[derive(Args)]
struct ReportArgs {
    /// Pipeline output directory.
    #[arg(long)]
    run: PathBuf,
    /// Pipeline config JSON (defaults to the one stored in the run dir).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the recomputed report JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TheoremCommand {
    /// Run the Monte-Carlo concentration simulation.
    Sim {
        /// Simulator config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Execute zoo -> features -> detector -> report, resumably.
    Run {
        /// Pipeline config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_json_or_default<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> anyhow::Result<T> {
    match path {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(serde_json::from_reader(BufReader::new(f))
                .with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(T::default()),
    }
}

fn parse_method(name: &str, ig_steps: usize) -> anyhow::Result<AttributionMethod> {
    match name {
        "ig" | "integrated_gradients" => Ok(AttributionMethod::IntegratedGradients {
            steps: ig_steps,
        }),
        "gradxact" => Ok(AttributionMethod::GradXAct),
        other => bail!("unknown attribution method {other:?}; use ig or gradxact"),
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Zoo {
            command: ZooCommand::Generate { config, out, seed },
        } => {
            let mut cfg: ZooConfig = read_json_or_default(&config)?;
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            let manifest = generate_zoo(&cfg, &out)?;
            let trojaned = manifest.models.iter().filter(|m| m.is_trojaned).count();
            println!(
                "zoo: {} models ({} trojaned) in {}; benign mean clean accuracy {:.4}",
                manifest.models.len(),
                trojaned,
                out.display(),
                manifest.benign_mean_clean_accuracy
            );
        }

        Command::Dataset { command } => match command {
            DatasetCommand::Generate {
                out,
                seed,
                per_class,
                classes,
                size,
            } => {
                let ds = generate_clean(seed, per_class, classes, size, size)?;
                save_dataset(&ds, &out)?;
                println!("dataset: {} samples in {}", ds.len(), out.display());
            }
            DatasetCommand::ImportIdx { images, labels, out } => {
                let ds = load_idx(&images, &labels)?;
                save_dataset(&ds, &out)?;
                println!("dataset: {} samples imported to {}", ds.len(), out.display());
            }
        },

        Command::Features {
            command:
                FeaturesCommand::Extract {
                    zoo,
                    probe,
                    method,
                    ig_steps,
                    schedule_len,
                    out,
                },
        } => {
            let manifest = load_manifest(&zoo)?;
            let probe_set = load_dataset(&probe)?;
            let method = parse_method(&method, ig_steps)?;
            let sets = extract_features(&zoo, &manifest, &probe_set, method, schedule_len, &out)?;
            println!(
                "features: {} curve sets ({} steps) in {}",
                sets.len(),
                schedule_len,
                out.display()
            );
        }

        Command::Detector { command } => match command {
            DetectorCommand::Train(args) => detector_train(args)?,
            DetectorCommand::Eval(args) => detector_eval(args)?,
        },

        Command::Report(args) => {
            let config_path = args
                .config
                .clone()
                .unwrap_or_else(|| args.run.join("config.json"));
            let config: PipelineConfig = read_json_or_default(&Some(config_path))?;
            let report = report_from_artifacts(&config, &args.run)?;
            fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "report: mean AUC {:.4} +/- {:.4} over {} splits -> {}",
                report.mean_auc,
                report.std_auc,
                report.per_split_auc.len(),
                args.out.display()
            );
        }

        Command::Theorem {
            command: TheoremCommand::Sim { config, out, seed },
        } => {
            let mut cfg: TheoremSimConfig = read_json_or_default(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let result = sgd_concentration_sim(&cfg)?;
            save_sim_result(&result, &out)?;
            for p in &result.points {
                println!(
                    "delta_w {:>5}: terminal top-|s| mass {:.4} +/- {:.4}, Delta_s {:+.4}, bound {:+.4}",
                    p.delta_w,
                    p.terminal_top_s_mass,
                    p.terminal_top_s_mass_se,
                    p.estimate.delta_s,
                    p.estimate.bound
                );
            }
            println!("theorem sim results in {}", out.display());
        }

        Command::Pipeline {
            command: PipelineCommand::Run { config, out, seed },
        } => {
            let mut cfg: PipelineConfig = read_json_or_default(&config)?;
            if let Some(seed) = seed {
                cfg = cfg.with_master_seed(seed);
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let report = run_pipeline(&cfg, &out)?;
            println!(
                "pipeline: mean AUC {:.4} +/- {:.4} over {} splits -> {}",
                report.mean_auc,
                report.std_auc,
                report.per_split_auc.len(),
                out.join("report.json").display()
            );
        }
    }
    Ok(())
}

fn detector_train(args: DetectorTrainArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(&args.zoo)?;
    let sets = load_curve_sets(&args.features)?;
    let by_id: std::collections::BTreeMap<&str, &trojan_scope::excitation::CurveSet> =
        sets.iter().map(|s| (s.model_id.as_str(), s)).collect();
    let ids: Vec<(String, bool)> = manifest
        .models
        .iter()
        .map(|m| (m.model_id.clone(), m.is_trojaned))
        .collect();
    let split = split_ids(&ids, (0.8, 0.1, 0.1), args.seed)?;

    let gather = |part: &[String]| -> anyhow::Result<(Vec<_>, Vec<bool>)> {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for id in part {
            let set = by_id
                .get(id.as_str())
                .with_context(|| format!("no curves for {id}"))?;
            s.push((*set).clone());
            l.push(manifest.record(id).expect("own id").is_trojaned);
        }
        Ok((s, l))
    };
    let (train, train_labels) = gather(&split.train)?;
    let (val, val_labels) = gather(&split.val)?;
    let (test, test_labels) = gather(&split.test)?;

    let hyper = DetectorHyper {
        seed: args.seed,
        ..read_json_or_default::<DetectorHyper>(&args.config)?
    };
    let spec = TemporalEncoderSpec {
        curve_len: sets.first().map(|s| s.steps).unwrap_or(40),
        ..TemporalEncoderSpec::default()
    };
    let detector = train_detector(&train, &train_labels, &val, &val_labels, &spec, &hyper)?;
    save_detector(&detector, &args.out)?;
    fs::write(
        args.out.join("split.json"),
        serde_json::to_string_pretty(&split)?,
    )?;

    let scores: Vec<f64> = test
        .iter()
        .map(|s| predict(&detector, s))
        .collect::<Result<_, _>>()?;
    write_scores_csv(
        &args.out.join("scores.csv"),
        split.test.iter().map(String::as_str),
        &scores,
        &test_labels,
    )?;
    println!(
        "detector: trained {} members; held-out AUC {:.4} -> {}",
        detector.members.len(),
        auc(&scores, &test_labels)?,
        args.out.display()
    );
    Ok(())
}

fn detector_eval(args: DetectorEvalArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(&args.zoo)?;
    let detector = load_detector(&args.detector)?;
    let sets = load_curve_sets(&args.features)?;
    fs::create_dir_all(&args.out)?;

    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for set in &sets {
        let rec = manifest
            .record(&set.model_id)
            .with_context(|| format!("{} not in the zoo manifest", set.model_id))?;
        ids.push(set.model_id.clone());
        scores.push(predict(&detector, set)?);
        labels.push(rec.is_trojaned);
    }
    write_scores_csv(
        &args.out.join("scores.csv"),
        ids.iter().map(String::as_str),
        &scores,
        &labels,
    )?;
    let roc = roc_points(&scores, &labels)?;
    let mut w = csv::Writer::from_path(args.out.join("roc.csv"))?;
    w.write_record(["fpr", "tpr"])?;
    for (fpr, tpr) in roc {
        w.serialize((fpr, tpr))?;
    }
    w.flush()?;
    let value = auc(&scores, &labels)?;
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "n_models": ids.len(),
            "auc": value,
        }))?,
    )?;
    println!("detector eval: AUC {value:.4} over {} models", ids.len());
    Ok(())
}
