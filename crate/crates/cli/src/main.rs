//! `nodulenet` command-line driver.
//!
//! Exit status: 0 on success, 2 for configuration or input errors (the
//! message names the offending key or volume), 3 for runtime failures.

mod artifacts;
mod phantoms;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nodulenet::evaluator::{save_ground_truth, EvalError, GroundTruthSet, VariantKey};
use nodulenet::heads::{write_candidates, ScoreField};
use nodulenet::trainer::{
    load_checkpoint, load_dataset, load_sample, run_cross_validation, ConfigError, ExperimentConfig, TrainError, Trainer,
};
use nodulenet::volume_store::{split_folds, DatasetManifest};

use artifacts::{AblationIndex, EvalSettings, RunRecord};
use phantoms::PhantomSetConfig;

#[derive(Parser)]
#[command(name = "nodulenet", version, about = "Nodule detection and segmentation experiments")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent fold runs for `cv` and `ablate`.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record the run as deterministic; kernels are order-preserving either way.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic volumes, annotations and a manifest.
    PhantomGen {
        #[command(flatten)]
        common: Common,
        /// Number of volumes (overrides the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Assigns fold indices to a manifest.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Fold count (defaults to the experiment config's).
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Trains one model, on every entry or on all folds but `--fold`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Cross-validates one configuration and scores the merged dump.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Scores a candidate dump, or a checkpoint run over a manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// ncs, fpr or fu.
        #[arg(long, default_value = "fu")]
        score_field: String,
        #[arg(long, default_value_t = 3)]
        consensus_filter: usize,
        /// Leave undetected nodules out of segmentation scores.
        #[arg(long)]
        matched_only: bool,
        #[arg(long)]
        montage: bool,
    },
    /// Cross-validates the six architecture variants and tabulates them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Re-renders the CSV reports of an output directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Bad input that is the caller's to fix.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn is_input_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || c.is::<ConfigError>()
            || matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
            || matches!(
                c.downcast_ref::<EvalError>(),
                Some(EvalError::UnknownVolume(_) | EvalError::MissingScore { .. } | EvalError::InvalidFilter(_))
            )
    })
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, Option<String>)> {
    let (mut cfg, hash) = match &common.config {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            let text = String::from_utf8(bytes.clone()).map_err(|_| usage(format!("{} is not UTF-8", p.display())))?;
            (ExperimentConfig::from_json(&text)?, Some(artifacts::sha256_hex(&bytes)))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok((cfg, hash))
}

fn record_run(common: &Common, command: &str, seed: Option<u64>, hash: Option<String>, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(&common.out)?;
    artifacts::write_json(
        &common.out.join("run.json"),
        &RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_sha256: hash,
            deterministic: common.deterministic,
            jobs: common.jobs,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        },
    )
}

fn variant_key(cfg: &ExperimentConfig) -> VariantKey {
    VariantKey::new(cfg.variant, cfg.fpr_feature, cfg.rotate_aug)
}

/// Fields a model of this configuration produces.
fn produced_fields(cfg: &ExperimentConfig) -> Vec<ScoreField> {
    match cfg.variant {
        nodulenet::model::Variant::N1 => vec![ScoreField::Ncs],
        _ => ScoreField::ALL.to_vec(),
    }
}

fn ground_truth(manifest: &DatasetManifest, min_readers: usize) -> Result<GroundTruthSet> {
    let all: Vec<usize> = (0..manifest.len()).collect();
    Ok(load_dataset(manifest, &all, min_readers)?
        .into_iter()
        .map(|s| (s.volume.id, s.nodules))
        .collect())
}

/// Cross-validation into `out`, then ground truth, settings and reports.
fn cv_into(manifest: &DatasetManifest, cfg: &ExperimentConfig, out: &Path, jobs: usize, fields: Vec<ScoreField>) -> Result<()> {
    let outcome = run_cross_validation(manifest, cfg, out, jobs)?;
    log::info!("{}: {} candidates over {} folds", out.display(), outcome.candidates.len(), outcome.folds.len());
    save_ground_truth(&out.join(artifacts::GT), &ground_truth(manifest, cfg.min_readers)?)?;
    artifacts::write_json(&out.join("config.json"), cfg)?;
    artifacts::write_json(
        &out.join(artifacts::SETTINGS),
        &EvalSettings {
            variant: Some(variant_key(cfg)),
            fields,
            consensus_filter: 3,
            matched_only: false,
            montage: false,
        },
    )?;
    artifacts::render(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen { common, count } => {
            let (mut cfg, hash) = match &common.config {
                Some(p) => {
                    let bytes = fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
                    let cfg: PhantomSetConfig = serde_json::from_slice(&bytes).map_err(|e| usage(format!("phantom config: {e}")))?;
                    (cfg, Some(artifacts::sha256_hex(&bytes)))
                }
                None => (PhantomSetConfig::default(), None),
            };
            if let Some(n) = count {
                cfg.count = n;
            }
            let seed = common.seed.unwrap_or(0);
            let manifest = phantoms::write_phantom_set(&cfg, seed, &common.out)?;
            artifacts::write_json(&common.out.join("phantoms.json"), &cfg)?;
            record_run(&common, "phantom-gen", Some(seed), hash, &[])?;
            println!("{}", manifest.display());
        }
        Command::Split { common, manifest, folds } => {
            let (cfg, hash) = load_config(&common)?;
            let m = DatasetManifest::load(&manifest)?;
            let k = folds.unwrap_or(cfg.folds);
            let mut split = split_folds(&m, k, cfg.seed).map_err(|e| usage(format!("folds: {e}")))?;
            // keep paths valid from the new location
            let base = std::path::absolute(&m.base_dir)?;
            for e in &mut split.entries {
                e.volume = base.join(&e.volume);
                e.annotation = base.join(&e.annotation);
            }
            fs::create_dir_all(&common.out)?;
            let path = common.out.join("manifest.json");
            split.save(&path)?;
            record_run(&common, "split", Some(cfg.seed), hash, &[&manifest])?;
            println!("{}", path.display());
        }
        Command::Train { common, manifest, fold, resume } => {
            let (cfg, hash) = load_config(&common)?;
            let m = DatasetManifest::load(&manifest)?;
            let (indices, out) = match fold {
                Some(f) => {
                    let folds = m.folds();
                    if !m.is_split() || f >= folds.len() {
                        return Err(usage(format!("fold {f} not present in {}", manifest.display())));
                    }
                    let idx = folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.clone()).collect();
                    (idx, common.out.join(format!("fold_{f}")))
                }
                None => ((0..m.len()).collect::<Vec<_>>(), common.out.clone()),
            };
            let data = load_dataset(&m, &indices, cfg.min_readers)?;
            let mut trainer = if resume {
                Trainer::resume(&out)?
            } else {
                Trainer::new(&cfg, Some(&out))?
            };
            trainer.train(&data)?;
            artifacts::write_json(&out.join("config.json"), trainer.config())?;
            record_run(&common, "train", Some(cfg.seed), hash, &[&manifest])?;
            println!("{}", out.display());
        }
        Command::Cv { common, manifest } => {
            let (cfg, hash) = load_config(&common)?;
            let m = DatasetManifest::load(&manifest)?;
            let fields = produced_fields(&cfg);
            cv_into(&m, &cfg, &common.out, common.jobs, fields)?;
            record_run(&common, "cv", Some(cfg.seed), hash, &[&manifest])?;
            print!("{}", fs::read_to_string(common.out.join(artifacts::REPORT))?);
        }
        Command::Evaluate {
            common,
            dump,
            gt,
            checkpoint,
            manifest,
            score_field,
            consensus_filter,
            matched_only,
            montage,
        } => {
            let field: ScoreField = score_field.parse().map_err(|e| usage(format!("--score-field: {e}")))?;
            fs::create_dir_all(&common.out)?;
            let out = &common.out;
            let mut inputs: Vec<&Path> = Vec::new();
            let variant = match (&dump, &checkpoint) {
                (Some(d), None) => {
                    let g = gt.as_ref().ok_or_else(|| usage("--dump needs --gt"))?;
                    inputs.extend([d.as_path(), g.as_path()]);
                    fs::copy(d, out.join(artifacts::DUMP)).with_context(|| format!("copying {}", d.display()))?;
                    fs::copy(g, out.join(artifacts::GT)).with_context(|| format!("copying {}", g.display()))?;
                    None
                }
                (None, Some(c)) => {
                    let mpath = manifest.as_ref().ok_or_else(|| usage("--checkpoint needs --manifest"))?;
                    inputs.extend([c.as_path(), mpath.as_path()]);
                    let ck = load_checkpoint(c)?;
                    let net = Trainer::from_checkpoint(&ck, None)?.into_net();
                    let m = DatasetManifest::load(mpath)?;
                    let mut gts = GroundTruthSet::new();
                    let mut cands = Vec::new();
                    for i in 0..m.len() {
                        let s = load_sample(&m, i, ck.config.min_readers)?;
                        cands.extend(net.detect(&s.volume)?);
                        gts.insert(s.volume.id, s.nodules);
                    }
                    write_candidates(fs::File::create(out.join(artifacts::DUMP))?, &cands)?;
                    save_ground_truth(&out.join(artifacts::GT), &gts)?;
                    Some(variant_key(&ck.config))
                }
                _ => return Err(usage("give exactly one of --dump or --checkpoint")),
            };
            artifacts::write_json(
                &out.join(artifacts::SETTINGS),
                &EvalSettings {
                    variant,
                    fields: vec![field],
                    consensus_filter,
                    matched_only,
                    montage,
                },
            )?;
            let report = artifacts::render(out)?;
            record_run(&common, "evaluate", None, None, &inputs)?;
            print!("{}", report.to_table());
        }
        Command::Ablate { common, manifest } => {
            let (base, hash) = load_config(&common)?;
            let m = DatasetManifest::load(&manifest)?;
            let mut index = AblationIndex { variants: Vec::new() };
            for key in VariantKey::MATRIX {
                let cfg = ExperimentConfig {
                    name: format!("{}-{}", base.name, key.slug()),
                    variant: key.variant,
                    fpr_feature: key.fpr_feature,
                    rotate_aug: key.rotate,
                    ..base.clone()
                };
                let sub = key.slug();
                log::info!("ablation variant {sub}");
                cv_into(&m, &cfg, &common.out.join(&sub), common.jobs, artifacts::table_fields(&key))?;
                index.variants.push((key, sub));
            }
            artifacts::write_json(&common.out.join(artifacts::ABLATION), &index)?;
            let report = artifacts::render_ablation(&common.out)?;
            record_run(&common, "ablate", Some(base.seed), hash, &[&manifest])?;
            print!("{}", report.to_table());
        }
        Command::Report { common } => {
            let dir = &common.out;
            let report = if dir.join(artifacts::ABLATION).exists() {
                artifacts::render_ablation(dir)?
            } else if dir.join(artifacts::SETTINGS).exists() {
                artifacts::render(dir)?
            } else {
                bail!(usage(format!("{} has no {} or {}", dir.display(), artifacts::SETTINGS, artifacts::ABLATION)));
            };
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(TrainError::Diverged { dump: Some(p), .. }) = e.chain().find_map(|c| c.downcast_ref::<TrainError>()) {
                eprintln!("state dump: {}", p.display());
            }
            if is_input_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
