//! `serialct` — reproducible runs of the longitudinal lung-cancer phantom
//! pipeline.
//!
//! Every subcommand resolves one configuration (built-in profile, optional
//! TOML file, dotted `--set` overrides, `--seed`), archives the resolved
//! copy beside its outputs, and derives all randomness from the single
//! seed. Exit codes: 0 success, 1 validation error (arguments, files,
//! formats), 2 internal invariant violation.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serialct_cli::{commands, io};
use serialct_core::metadata::BaselineKind;
use serialct_core::{Error, Profile, Result, RunConfig};

use commands::{CandidateSource, CohortKind};

#[derive(Parser)]
#[command(
    name = "serialct",
    version,
    about = "Longitudinal lung-cancer phantom pipeline: cohorts, preprocessing, detection, malignancy scoring, baselines and evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: CommonOpts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonOpts {
    /// TOML configuration file (default: $SERIALCT_CONFIG, else the
    /// built-in profile).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no configuration file is given.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Master seed; overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted configuration override, e.g. --set classifier.max_epochs=3
    /// (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom cohort: volumes, manifest, metadata
    /// and nodule annotations.
    PhantomGen {
        /// Run directory for all outputs.
        #[arg(long)]
        out: PathBuf,
        /// Number of cases.
        #[arg(long)]
        n: usize,
        /// Cohort mix: standard | small-nodule | detection.
        #[arg(long, default_value = "standard")]
        cohort: String,
        /// Fraction of nodule-free scans (detection cohorts only).
        #[arg(long, default_value_t = 0.0)]
        nodule_free_fraction: f64,
        /// Override the number of screens per case.
        #[arg(long)]
        timepoints: Option<usize>,
    },
    /// Mask, normalise, register and crop every case in a manifest.
    Preprocess {
        #[arg(long)]
        out: PathBuf,
        /// Case manifest (patient_id,timepoint,volume_path,label).
        #[arg(long)]
        manifest: PathBuf,
        /// Annotations to carry into the preprocessed frame.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Train the nodule detector on preprocessed scans.
    TrainDetect {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Ground-truth nodule annotations (patient_id,timepoint,x,y,z,diameter_mm).
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Propose nodule candidates on every scan in a manifest.
    Detect {
        #[arg(long)]
        out: PathBuf,
        /// Detector checkpoint written by train-detect.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the malignancy classifier on preprocessed longitudinal cases.
    TrainClassify {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Clinical metadata CSV.
        #[arg(long)]
        metadata: PathBuf,
        /// Candidate nodules from the detect subcommand.
        #[arg(long, conflicts_with = "annotations")]
        proposals: Option<PathBuf>,
        /// Oracle candidates from ground-truth annotations.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Branch combination: nlm-l | nlm-s | n-l | l-l.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score cases with a trained classifier.
    Predict {
        #[arg(long)]
        out: PathBuf,
        /// Classifier checkpoint written by train-classify.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature-statistics sidecar (default: checkpoint with a
        /// .stats.json extension).
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long, conflicts_with = "annotations")]
        proposals: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Metadata-only comparators: cross-validated RF/SVM or a logistic
    /// model loaded from coefficients.
    Baseline {
        #[arg(long)]
        out: PathBuf,
        /// Which comparator: rf | svm | pancan.
        #[arg(long)]
        model: String,
        /// Case manifest supplying the labels.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        /// key=value coefficient file (pancan only).
        #[arg(long)]
        coefficients: Option<PathBuf>,
    },
    /// Metrics and ROC for a predictions CSV against manifest labels.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        /// Predictions CSV written by predict.
        #[arg(long)]
        predictions: PathBuf,
        /// Case manifest supplying the labels.
        #[arg(long)]
        manifest: PathBuf,
        /// Row name in the results table.
        #[arg(long, default_value = "model")]
        name: String,
    },
}

/// Builds the run configuration: file or built-in profile, then `--set`
/// overrides, then the `--seed` flag.
fn resolve_config(common: &CommonOpts) -> Result<RunConfig> {
    let path = common
        .config
        .clone()
        .or_else(|| std::env::var_os("SERIALCT_CONFIG").map(PathBuf::from));
    let mut tree: toml::Value = match &path {
        Some(p) => {
            let text = io::read_text(p)?;
            text.parse().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => {
            let profile: Profile = common.profile.parse()?;
            let base = match profile {
                Profile::Desk => RunConfig::desk(0),
                Profile::Full => RunConfig::full(0),
            };
            toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?
        }
    };
    for spec in &common.sets {
        apply_set(&mut tree, spec)?;
    }
    let mut cfg: RunConfig = tree.try_into().map_err(|e| Error::Config(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `section.key=value` override onto the configuration tree.
/// The value text is parsed as TOML (so arrays and numbers work) and falls
/// back to a plain string, letting `--set classifier.variant=nlm-s` pass
/// unquoted.
fn apply_set(tree: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Input(format!("--set expects key.path=value, got '{spec}'")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = &mut *tree;
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*part))
            .ok_or_else(|| Error::Config(format!("unknown config section '{part}' in '{key}'")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("'{key}' does not name a config value")))?;
    let leaf = *parts.last().expect("split is non-empty");
    if !table.contains_key(leaf) {
        return Err(Error::Config(format!("unknown config key '{key}'")));
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

/// Validation problems (bad arguments, unreadable or malformed inputs,
/// refusing to overwrite) exit 1; violated internal invariants exit 2.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Config(_)
        | Error::Input(_)
        | Error::Checkpoint(_)
        | Error::NoLung(_)
        | Error::NoAnnotations
        | Error::UnknownCategory(_)
        | Error::DegenerateLabels
        | Error::MissingCoefficients(_)
        | Error::TooFewPatients(_) => 1,
        Error::Registration(_)
        | Error::Divergence(_)
        | Error::NoProposals(_)
        | Error::CenterOutOfVolume(_)
        | Error::NonFiniteFeature(_) => 2,
        Error::Fold { source, .. } => exit_code(source),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.cmd {
        Cmd::PhantomGen { out, n, cohort, nodule_free_fraction, timepoints } => {
            if !(0.0..=1.0).contains(&nodule_free_fraction) {
                return Err(Error::Input(format!(
                    "--nodule-free-fraction must lie in [0, 1], got {nodule_free_fraction}"
                )));
            }
            commands::phantom_gen(
                &cfg,
                &commands::PhantomGenArgs {
                    out,
                    n,
                    cohort: cohort.parse::<CohortKind>()?,
                    nodule_free_fraction,
                    timepoints,
                },
            )
        }
        Cmd::Preprocess { out, manifest, annotations } => {
            commands::preprocess(&cfg, &commands::PreprocessArgs { out, manifest, annotations })
        }
        Cmd::TrainDetect { out, manifest, annotations } => {
            commands::train_detect(&cfg, &commands::TrainDetectArgs { out, manifest, annotations })
        }
        Cmd::Detect { out, checkpoint, manifest } => {
            commands::detect(&cfg, &commands::DetectArgs { out, checkpoint, manifest })
        }
        Cmd::TrainClassify { out, manifest, metadata, proposals, annotations, variant } => {
            if let Some(v) = variant {
                cfg.classifier.variant = v.parse()?;
            }
            commands::train_classify(
                &cfg,
                &commands::TrainClassifyArgs {
                    out,
                    manifest,
                    metadata,
                    candidates: CandidateSource::from_flags(proposals, annotations)?,
                },
            )
        }
        Cmd::Predict { out, checkpoint, stats, manifest, metadata, proposals, annotations } => {
            commands::predict(
                &cfg,
                &commands::PredictArgs {
                    out,
                    checkpoint,
                    stats,
                    manifest,
                    metadata,
                    candidates: CandidateSource::from_flags(proposals, annotations)?,
                },
            )
        }
        Cmd::Baseline { out, model, manifest, metadata, coefficients } => commands::baseline(
            &cfg,
            &commands::BaselineArgs {
                out,
                model: model.parse::<BaselineKind>()?,
                manifest,
                metadata,
                coefficients,
            },
        ),
        Cmd::Evaluate { out, predictions, manifest, name } => {
            commands::evaluate(&cfg, &commands::EvaluateArgs { out, predictions, manifest, name })
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage problem.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
