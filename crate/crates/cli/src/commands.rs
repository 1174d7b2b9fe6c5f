//! One function per subcommand. Every command archives its resolved
//! configuration into the run directory before writing anything else, and
//! all outputs go through the write-once helpers in [`crate::io`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serialct_core::candidate::{extract_patch_series, select_candidate, CandidateSeries};
use serialct_core::classify::{self, prepare_case, ClassifierCase};
use serialct_core::detect::{detect_nodules, train_detector, DetectorNet, Proposal, TrainingScan};
use serialct_core::harness::{render_results_table, score_outcome, write_results_csv, write_roc_csv};
use serialct_core::metadata::{
    load_metadata_csv, train_baseline, write_metadata_csv, BaselineKind, FeatureStats,
    MetadataRecord, PanCanModel,
};
use serialct_core::nn::{apply_checkpoint, load_checkpoint, save_checkpoint, stream_rng};
use serialct_core::phantom::{generate_case, sample_cohort, CohortOptions};
use serialct_core::preprocess::preprocess_case;
use serialct_core::volume::{volume_base, NoduleAnnotation, TimepointScan};
use serialct_core::{CtVolume, Error, Result, RunConfig, SeriesCase};

use crate::io::{self, AnnotationRow, ManifestRow, ProposalRow};

/// Serialises the resolved configuration beside the outputs and returns
/// the text (it doubles as the checkpoint config echo).
fn archive_config(out: &Path, cfg: &RunConfig) -> Result<String> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    io::write_new(&out.join("config.toml"), &text)?;
    Ok(text)
}

// ---------------------------------------------------------------------------
// phantom-gen
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortKind {
    /// Configured prevalence and diameter range.
    Standard,
    /// Quarter prevalence, 5–10 mm nodules, half spiculated.
    SmallNodule,
    /// Single-screen scans for detector work.
    Detection,
}

impl std::str::FromStr for CohortKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CohortKind::Standard),
            "small-nodule" => Ok(CohortKind::SmallNodule),
            "detection" => Ok(CohortKind::Detection),
            other => Err(Error::Input(format!(
                "unknown cohort '{other}' (expected standard|small-nodule|detection)"
            ))),
        }
    }
}

pub struct PhantomGenArgs {
    pub out: PathBuf,
    pub n: usize,
    pub cohort: CohortKind,
    pub nodule_free_fraction: f64,
    pub timepoints: Option<usize>,
}

pub fn phantom_gen(cfg: &RunConfig, args: &PhantomGenArgs) -> Result<()> {
    if args.n == 0 {
        return Err(Error::Input("--n must be at least 1".into()));
    }
    archive_config(&args.out, cfg)?;
    let mut opts = match args.cohort {
        CohortKind::Standard => CohortOptions::standard(&cfg.phantom),
        CohortKind::SmallNodule => CohortOptions::small_nodule(&cfg.phantom),
        CohortKind::Detection => {
            CohortOptions::detection(cfg.phantom.final_diameter_mm, args.nodule_free_fraction)
        }
    };
    if let Some(t) = args.timepoints {
        opts.timepoints = t;
    }

    let volumes_dir = args.out.join("volumes");
    let mut manifest = Vec::new();
    let mut metadata = Vec::new();
    let mut annotations = Vec::new();
    let specs = sample_cohort(&cfg.phantom, &opts, args.n, cfg.seed);
    for spec in &specs {
        let generated = generate_case(&cfg.phantom, spec);
        let id = &generated.case.patient_id;
        for (t, scan) in generated.case.scans.iter().enumerate() {
            let base = volume_base(&volumes_dir, id, t);
            io::ensure_volume_absent(&base)?;
            std::fs::create_dir_all(&volumes_dir)
                .map_err(|source| Error::Io { path: volumes_dir.clone(), source })?;
            scan.volume.save(&base)?;
            manifest.push(ManifestRow {
                patient_id: id.clone(),
                timepoint: t,
                volume_path: PathBuf::from(format!("volumes/{id}_t{t}")),
                label: generated.truth.label,
            });
        }
        for (t, ann) in generated.truth.annotations.iter().enumerate() {
            annotations.push(AnnotationRow {
                patient_id: id.clone(),
                timepoint: t,
                annotation: ann.clone(),
            });
        }
        metadata.push((id.clone(), generated.truth.metadata.clone()));
    }
    io::write_manifest(&args.out.join("manifest.csv"), &manifest)?;
    write_metadata_csv(&args.out.join("metadata.csv"), &metadata)?;
    io::write_annotations(&args.out.join("annotations.csv"), &annotations)?;
    println!(
        "generated {} cases ({} screens) into {}",
        args.n,
        manifest.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

pub struct PreprocessArgs {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub annotations: Option<PathBuf>,
}

pub fn preprocess(cfg: &RunConfig, args: &PreprocessArgs) -> Result<()> {
    archive_config(&args.out, cfg)?;
    let groups = io::group_by_patient(&args.manifest, io::load_manifest(&args.manifest)?)?;
    let annotations = match &args.annotations {
        Some(p) => Some(io::load_annotations(p)?),
        None => None,
    };

    let volumes_dir = args.out.join("volumes");
    std::fs::create_dir_all(&volumes_dir)
        .map_err(|source| Error::Io { path: volumes_dir.clone(), source })?;
    let mut manifest = Vec::new();
    let mut out_annotations = Vec::new();
    for (id, screens) in &groups {
        let scans = screens
            .iter()
            .map(|r| {
                Ok(TimepointScan {
                    months: r.timepoint as f64 * cfg.phantom.screen_interval_months,
                    volume: CtVolume::load(&r.volume_path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = SeriesCase::new(id.clone(), scans)?;
        let processed = preprocess_case(&raw, &cfg.preprocess)?;
        for (slot, scan) in processed.case.scans.iter().enumerate() {
            let t = screens[slot].timepoint;
            let base = volume_base(&volumes_dir, id, t);
            io::ensure_volume_absent(&base)?;
            scan.volume.save(&base)?;
            manifest.push(ManifestRow {
                patient_id: id.clone(),
                timepoint: t,
                volume_path: PathBuf::from(format!("volumes/{id}_t{t}")),
                label: screens[0].label,
            });
        }
        // Carry annotations into the cropped, registered frame: a point on
        // screen t maps through the inverse of that screen's registration
        // transform, then shifts by the crop origin.
        if let Some(rows) = &annotations {
            for row in rows.iter().filter(|r| &r.patient_id == id) {
                let Some(slot) = screens.iter().position(|s| s.timepoint == row.timepoint) else {
                    return Err(Error::Input(format!(
                        "annotation for {id} screen {} has no manifest row",
                        row.timepoint
                    )));
                };
                let moving = &raw.scans[slot].volume;
                let p_mm = moving.voxel_to_mm(row.annotation.center_voxel);
                let fixed_mm = processed.transforms[slot].apply_inverse(p_mm);
                let fixed_voxel = raw.scans[0].volume.mm_to_voxel(fixed_mm);
                out_annotations.push(AnnotationRow {
                    patient_id: id.clone(),
                    timepoint: row.timepoint,
                    annotation: NoduleAnnotation {
                        center_voxel: processed.crop.to_cropped(fixed_voxel),
                        diameter_mm: row.annotation.diameter_mm,
                    },
                });
            }
        }
    }
    io::write_manifest(&args.out.join("manifest.csv"), &manifest)?;
    if annotations.is_some() {
        io::write_annotations(&args.out.join("annotations.csv"), &out_annotations)?;
    }
    println!("preprocessed {} patients into {}", groups.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-detect / detect
// ---------------------------------------------------------------------------

pub struct TrainDetectArgs {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub annotations: PathBuf,
}

pub fn train_detect(cfg: &RunConfig, args: &TrainDetectArgs) -> Result<()> {
    let config_text = archive_config(&args.out, cfg)?;
    let rows = io::load_manifest(&args.manifest)?;
    let annotations = io::load_annotations(&args.annotations)?;
    let mut scans = Vec::with_capacity(rows.len());
    for row in &rows {
        let volume = CtVolume::load(&row.volume_path)?;
        let anns = annotations
            .iter()
            .filter(|a| a.patient_id == row.patient_id && a.timepoint == row.timepoint)
            .map(|a| a.annotation.clone())
            .collect();
        scans.push(TrainingScan { volume, annotations: anns });
    }
    let fill = cfg.preprocess.fill_mode.value();
    let (mut net, curve) = train_detector(&scans, &cfg.detector, fill, cfg.seed)?;
    save_checkpoint(&args.out.join("detector.ckpt"), &config_text, &mut net)?;
    io::write_curves(&args.out.join("training.csv"), &[("detector", &curve)])?;
    println!(
        "trained detector on {} scans (best epoch {}) into {}",
        scans.len(),
        curve.best_epoch,
        args.out.display()
    );
    Ok(())
}

pub struct DetectArgs {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

pub fn detect(cfg: &RunConfig, args: &DetectArgs) -> Result<()> {
    archive_config(&args.out, cfg)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    // The checkpoint's embedded configuration fixes the architecture and
    // the inference parameters it was trained with.
    let trained_cfg: RunConfig = toml::from_str(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut net = DetectorNet::new(&trained_cfg.detector, &mut stream_rng(0, 0))?;
    apply_checkpoint(&mut net, &ckpt)?;
    let fill = trained_cfg.preprocess.fill_mode.value();

    let rows = io::load_manifest(&args.manifest)?;
    let mut out_rows = Vec::new();
    for row in &rows {
        let volume = CtVolume::load(&row.volume_path)?;
        for proposal in detect_nodules(&net, &volume, &trained_cfg.detector, fill)? {
            out_rows.push(ProposalRow {
                patient_id: row.patient_id.clone(),
                timepoint: row.timepoint,
                proposal,
            });
        }
    }
    io::write_proposals(&args.out.join("proposals.csv"), &out_rows)?;
    println!(
        "detected {} proposals across {} scans into {}",
        out_rows.len(),
        rows.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-classify / predict
// ---------------------------------------------------------------------------

/// Where candidate nodules come from when assembling classifier cases.
pub enum CandidateSource {
    /// Detection disabled: every case scores through the fallback path.
    None,
    /// Detector output (`detect` subcommand CSV).
    Proposals(PathBuf),
    /// Ground-truth centres (oracle candidates, e.g. curated annotations).
    Annotations(PathBuf),
}

impl CandidateSource {
    pub fn from_flags(proposals: Option<PathBuf>, annotations: Option<PathBuf>) -> Result<Self> {
        match (proposals, annotations) {
            (Some(_), Some(_)) => {
                Err(Error::Input("--proposals and --annotations are mutually exclusive".into()))
            }
            (Some(p), None) => Ok(CandidateSource::Proposals(p)),
            (None, Some(a)) => Ok(CandidateSource::Annotations(a)),
            (None, None) => Ok(CandidateSource::None),
        }
    }
}

struct LoadedCase {
    case: SeriesCase,
    label: bool,
}

fn load_series_cases(manifest: &Path, interval_months: f64) -> Result<Vec<LoadedCase>> {
    let groups = io::group_by_patient(manifest, io::load_manifest(manifest)?)?;
    let mut out = Vec::with_capacity(groups.len());
    for (id, screens) in groups {
        let scans = screens
            .iter()
            .map(|r| {
                Ok(TimepointScan {
                    months: r.timepoint as f64 * interval_months,
                    volume: CtVolume::load(&r.volume_path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LoadedCase { case: SeriesCase::new(id, scans)?, label: screens[0].label });
    }
    Ok(out)
}

/// Resolves each case's candidate series from the chosen source; `None`
/// marks cases the classifier must score through the fallback path.
fn build_candidates(
    source: &CandidateSource,
    cases: &[LoadedCase],
    patch_size: usize,
    fill: f64,
) -> Result<Vec<Option<CandidateSeries>>> {
    match source {
        CandidateSource::None => Ok(vec![None; cases.len()]),
        CandidateSource::Proposals(path) => {
            let mut by_patient: BTreeMap<String, Vec<Proposal>> = BTreeMap::new();
            for row in io::load_proposals(path)? {
                by_patient.entry(row.patient_id).or_default().push(row.proposal);
            }
            cases
                .iter()
                .map(|c| match by_patient.get(&c.case.patient_id) {
                    Some(props) => {
                        let best = select_candidate(props)?;
                        Ok(Some(extract_patch_series(&c.case, &best, patch_size, fill)?))
                    }
                    None => Ok(None),
                })
                .collect()
        }
        CandidateSource::Annotations(path) => {
            let rows = io::load_annotations(path)?;
            cases
                .iter()
                .map(|c| {
                    // The latest annotated screen localises the candidate.
                    let ann = rows
                        .iter()
                        .filter(|r| r.patient_id == c.case.patient_id)
                        .max_by_key(|r| r.timepoint);
                    match ann {
                        Some(row) => {
                            let oracle = Proposal {
                                center_voxel: row.annotation.center_voxel,
                                diameter_mm: row.annotation.diameter_mm,
                                confidence: 1.0,
                            };
                            Ok(Some(extract_patch_series(&c.case, &oracle, patch_size, fill)?))
                        }
                        None => Ok(None),
                    }
                })
                .collect()
        }
    }
}

fn metadata_by_patient(path: &Path) -> Result<BTreeMap<String, MetadataRecord>> {
    Ok(load_metadata_csv(path)?.into_iter().collect())
}

fn assemble_classifier_cases(
    cfg: &RunConfig,
    manifest: &Path,
    metadata: &Path,
    source: &CandidateSource,
) -> Result<Vec<ClassifierCase>> {
    let loaded = load_series_cases(manifest, cfg.phantom.screen_interval_months)?;
    let fill = cfg.preprocess.fill_mode.value();
    let candidates = build_candidates(source, &loaded, cfg.classifier.patch_size, fill)?;
    let records = metadata_by_patient(metadata)?;
    loaded
        .into_iter()
        .zip(candidates)
        .map(|(lc, series)| {
            let record = records.get(&lc.case.patient_id).cloned().ok_or_else(|| {
                Error::Input(format!("no metadata for patient {}", lc.case.patient_id))
            })?;
            Ok(prepare_case(&lc.case, series, record, lc.label, &cfg.classifier))
        })
        .collect()
}

pub struct TrainClassifyArgs {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub metadata: PathBuf,
    pub candidates: CandidateSource,
}

pub fn train_classify(cfg: &RunConfig, args: &TrainClassifyArgs) -> Result<()> {
    let config_text = archive_config(&args.out, cfg)?;
    let cases = assemble_classifier_cases(cfg, &args.manifest, &args.metadata, &args.candidates)?;
    let (mut model, curves) = classify::train_classifier(&cases, &cfg.classifier, cfg.seed)?;
    save_checkpoint(&args.out.join("classifier.ckpt"), &config_text, &mut model.net)?;
    let stats_json = serde_json::to_string_pretty(&model.stats)
        .map_err(|e| Error::Checkpoint(format!("encoding feature statistics: {e}")))?;
    io::write_new(&args.out.join("classifier.stats.json"), &stats_json)?;
    let mut stages: Vec<(&str, &serialct_core::detect::TrainingCurve)> = Vec::new();
    if let Some(lung) = &curves.lung {
        stages.push(("lung", lung));
    }
    stages.push(("joint", &curves.joint));
    io::write_curves(&args.out.join("training.csv"), &stages)?;
    println!(
        "trained {} classifier on {} cases (best epoch {}) into {}",
        cfg.classifier.variant.name(),
        cases.len(),
        curves.joint.best_epoch,
        args.out.display()
    );
    Ok(())
}

pub struct PredictArgs {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    /// Feature statistics sidecar; defaults to `<checkpoint>.stats.json`
    /// with the checkpoint extension replaced.
    pub stats: Option<PathBuf>,
    pub manifest: PathBuf,
    pub metadata: PathBuf,
    pub candidates: CandidateSource,
}

pub fn predict(cfg: &RunConfig, args: &PredictArgs) -> Result<()> {
    archive_config(&args.out, cfg)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let trained_cfg: RunConfig = toml::from_str(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut net = classify::Classifier::new(&trained_cfg.classifier, &mut stream_rng(0, 0));
    apply_checkpoint(&mut net, &ckpt)?;
    let stats_path =
        args.stats.clone().unwrap_or_else(|| args.checkpoint.with_extension("stats.json"));
    let stats: FeatureStats = serde_json::from_str(&io::read_text(&stats_path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", stats_path.display())))?;
    let model = classify::TrainedClassifier { net, stats };

    // Candidate geometry must match the trained model, so patch size and
    // fill come from the embedded config.
    let cases =
        assemble_classifier_cases(&trained_cfg, &args.manifest, &args.metadata, &args.candidates)?;
    let predictions =
        cases.iter().map(|c| classify::predict(&model, c)).collect::<Result<Vec<_>>>()?;
    io::write_predictions(&args.out.join("predictions.csv"), &predictions)?;
    println!("scored {} cases into {}", predictions.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline / evaluate
// ---------------------------------------------------------------------------

pub struct BaselineArgs {
    pub out: PathBuf,
    pub model: BaselineKind,
    pub manifest: PathBuf,
    pub metadata: PathBuf,
    pub coefficients: Option<PathBuf>,
}

pub fn baseline(cfg: &RunConfig, args: &BaselineArgs) -> Result<()> {
    archive_config(&args.out, cfg)?;
    let groups = io::group_by_patient(&args.manifest, io::load_manifest(&args.manifest)?)?;
    let records_map = metadata_by_patient(&args.metadata)?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut records = Vec::new();
    for (id, screens) in &groups {
        let record = records_map
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no metadata for patient {id}")))?;
        ids.push(id.clone());
        labels.push(screens[0].label);
        records.push(record);
    }

    let name = match args.model {
        BaselineKind::Rf => "rf",
        BaselineKind::Svm => "svm",
        BaselineKind::PanCan => "pancan",
    };
    let outcome = if args.model == BaselineKind::PanCan {
        let path = args.coefficients.as_ref().ok_or_else(|| {
            Error::Input("--coefficients is required for the pancan baseline".into())
        })?;
        let model = PanCanModel::load(path)?;
        let scores: Vec<f64> = records.iter().map(|r| model.predict(r)).collect();
        score_outcome(name, &scores, &labels, &cfg.harness)?
    } else {
        let cases: Vec<(&str, bool)> =
            ids.iter().map(String::as_str).zip(labels.iter().copied()).collect();
        serialct_core::harness::run_experiment(
            name,
            &cases,
            &cfg.harness,
            cfg.seed,
            |fold, train, test| {
                let train_records: Vec<MetadataRecord> =
                    train.iter().map(|&i| records[i].clone()).collect();
                let train_labels: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
                let model = train_baseline(
                    args.model,
                    &train_records,
                    &train_labels,
                    &cfg.baseline,
                    cfg.seed.wrapping_add(fold as u64),
                )?;
                test.iter().map(|&i| model.predict(&records[i])).collect()
            },
        )?
    };
    let rows = [outcome];
    write_results_csv(&args.out.join("results.csv"), &rows)?;
    write_roc_csv(&args.out.join("roc.csv"), &rows)?;
    let table = render_results_table(&rows);
    io::write_new(&args.out.join("results.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub struct EvaluateArgs {
    pub out: PathBuf,
    pub predictions: PathBuf,
    pub manifest: PathBuf,
    pub name: String,
}

pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    archive_config(&args.out, cfg)?;
    let groups = io::group_by_patient(&args.manifest, io::load_manifest(&args.manifest)?)?;
    let predictions = io::load_predictions(&args.predictions)?;
    let mut seen = BTreeMap::new();
    for p in &predictions {
        if seen.insert(p.patient_id.clone(), p.score).is_some() {
            return Err(Error::Input(format!("duplicate prediction for patient {}", p.patient_id)));
        }
    }
    let mut scores = Vec::with_capacity(groups.len());
    let mut labels = Vec::with_capacity(groups.len());
    for (id, screens) in &groups {
        let score = seen
            .remove(id)
            .ok_or_else(|| Error::Input(format!("no prediction for patient {id}")))?;
        scores.push(score);
        labels.push(screens[0].label);
    }
    if let Some(extra) = seen.keys().next() {
        return Err(Error::Input(format!("prediction for unknown patient {extra}")));
    }

    let rows = [score_outcome(&args.name, &scores, &labels, &cfg.harness)?];
    write_results_csv(&args.out.join("results.csv"), &rows)?;
    write_roc_csv(&args.out.join("roc.csv"), &rows)?;
    let table = render_results_table(&rows);
    io::write_new(&args.out.join("results.txt"), &table)?;
    print!("{table}");
    Ok(())
}
