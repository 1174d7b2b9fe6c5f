//! Run-directory plumbing: write-once output files and the CSV formats the
//! subcommands exchange.
//!
//! All coordinate columns follow the annotation convention `x,y,z` in voxel
//! units of the accompanying manifest's volumes; volume paths are stored
//! relative to the CSV's own directory so run trees stay relocatable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serialct_core::classify::MalignancyPrediction;
use serialct_core::detect::Proposal;
use serialct_core::volume::NoduleAnnotation;
use serialct_core::{Error, Result};

/// Writes a text output, creating parent directories, but never replaces
/// an existing file: outputs are write-once so a rerun cannot silently
/// clobber an earlier run.
pub fn write_new(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|source| Error::Io { path: parent.to_owned(), source })?;
        }
    }
    if path.exists() {
        return Err(Error::Input(format!(
            "refusing to overwrite existing output {}",
            path.display()
        )));
    }
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_owned(), source })
}

/// Write-once guard for volume files, which occupy `<base>.meta` and
/// `<base>.f64`.
pub fn ensure_volume_absent(base: &Path) -> Result<()> {
    for ext in ["meta", "f64"] {
        let p = base.with_extension(ext);
        if p.exists() {
            return Err(Error::Input(format!(
                "refusing to overwrite existing output {}",
                p.display()
            )));
        }
    }
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_owned(), source })
}

/// Splits one CSV line on commas; the formats here never need quoting.
fn fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn format_err(path: &Path, line_no: usize, reason: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_owned(), reason: format!("line {line_no}: {reason}") }
}

fn parse_usize(path: &Path, line_no: usize, name: &str, raw: &str) -> Result<usize> {
    raw.parse().map_err(|_| format_err(path, line_no, format!("bad {name} '{raw}'")))
}

fn parse_f64(path: &Path, line_no: usize, name: &str, raw: &str) -> Result<f64> {
    raw.parse().map_err(|_| format_err(path, line_no, format!("bad {name} '{raw}'")))
}

fn parse_label(path: &Path, line_no: usize, raw: &str) -> Result<bool> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format_err(path, line_no, format!("label must be 0 or 1, got '{raw}'"))),
    }
}

/// Reads a CSV body after checking its header, handing `(line_no, fields)`
/// to the row parser.
fn read_rows<T>(
    path: &Path,
    header: &str,
    mut parse: impl FnMut(usize, &[&str]) -> Result<T>,
) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == header => {}
        Some((_, first)) => {
            return Err(format_err(path, 1, format!("expected header '{header}', got '{first}'")))
        }
        None => return Err(format_err(path, 1, "empty file")),
    }
    let ncols = fields(header).len();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f = fields(line);
        if f.len() != ncols {
            return Err(format_err(path, i + 1, format!("expected {ncols} fields, got {}", f.len())));
        }
        rows.push(parse(i + 1, &f)?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Case manifest
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: &str = "patient_id,timepoint,volume_path,label";

/// One screen of one patient, as listed in a case manifest.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub patient_id: String,
    pub timepoint: usize,
    /// Absolute after loading; written relative to the manifest.
    pub volume_path: PathBuf,
    pub label: bool,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.patient_id,
            r.timepoint,
            r.volume_path.display(),
            u8::from(r.label)
        ));
    }
    write_new(path, &out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let dir = path.parent().map(Path::to_owned).unwrap_or_default();
    read_rows(path, MANIFEST_HEADER, |line_no, f| {
        let rel = PathBuf::from(f[2]);
        Ok(ManifestRow {
            patient_id: f[0].to_string(),
            timepoint: parse_usize(path, line_no, "timepoint", f[1])?,
            volume_path: if rel.is_absolute() { rel } else { dir.join(rel) },
            label: parse_label(path, line_no, f[3])?,
        })
    })
}

/// Manifest rows grouped per patient, each patient's screens sorted by
/// timepoint, with the per-patient label checked for consistency.
pub fn group_by_patient(
    path: &Path,
    rows: Vec<ManifestRow>,
) -> Result<BTreeMap<String, Vec<ManifestRow>>> {
    let mut map: BTreeMap<String, Vec<ManifestRow>> = BTreeMap::new();
    for row in rows {
        map.entry(row.patient_id.clone()).or_default().push(row);
    }
    for (id, screens) in &mut map {
        screens.sort_by_key(|r| r.timepoint);
        if screens.windows(2).any(|w| w[0].timepoint == w[1].timepoint) {
            return Err(Error::Format {
                path: path.to_owned(),
                reason: format!("patient {id} lists a timepoint twice"),
            });
        }
        if screens.iter().any(|r| r.label != screens[0].label) {
            return Err(Error::Format {
                path: path.to_owned(),
                reason: format!("patient {id} has inconsistent labels across screens"),
            });
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Nodule annotations
// ---------------------------------------------------------------------------

pub const ANNOTATIONS_HEADER: &str = "patient_id,timepoint,x,y,z,diameter_mm";

/// A ground-truth nodule position on one screen.
#[derive(Debug, Clone)]
pub struct AnnotationRow {
    pub patient_id: String,
    pub timepoint: usize,
    pub annotation: NoduleAnnotation,
}

pub fn write_annotations(path: &Path, rows: &[AnnotationRow]) -> Result<()> {
    let mut out = String::from(ANNOTATIONS_HEADER);
    out.push('\n');
    for r in rows {
        let [z, y, x] = r.annotation.center_voxel;
        out.push_str(&format!(
            "{},{},{x},{y},{z},{}\n",
            r.patient_id, r.timepoint, r.annotation.diameter_mm
        ));
    }
    write_new(path, &out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRow>> {
    read_rows(path, ANNOTATIONS_HEADER, |line_no, f| {
        let x = parse_f64(path, line_no, "x", f[2])?;
        let y = parse_f64(path, line_no, "y", f[3])?;
        let z = parse_f64(path, line_no, "z", f[4])?;
        Ok(AnnotationRow {
            patient_id: f[0].to_string(),
            timepoint: parse_usize(path, line_no, "timepoint", f[1])?,
            annotation: NoduleAnnotation {
                center_voxel: [z, y, x],
                diameter_mm: parse_f64(path, line_no, "diameter_mm", f[5])?,
            },
        })
    })
}

// ---------------------------------------------------------------------------
// Detector proposals
// ---------------------------------------------------------------------------

pub const PROPOSALS_HEADER: &str = "patient_id,timepoint,x,y,z,diameter_mm,confidence";

#[derive(Debug, Clone)]
pub struct ProposalRow {
    pub patient_id: String,
    pub timepoint: usize,
    pub proposal: Proposal,
}

pub fn write_proposals(path: &Path, rows: &[ProposalRow]) -> Result<()> {
    let mut out = String::from(PROPOSALS_HEADER);
    out.push('\n');
    for r in rows {
        let [z, y, x] = r.proposal.center_voxel;
        out.push_str(&format!(
            "{},{},{x},{y},{z},{},{}\n",
            r.patient_id, r.timepoint, r.proposal.diameter_mm, r.proposal.confidence
        ));
    }
    write_new(path, &out)
}

pub fn load_proposals(path: &Path) -> Result<Vec<ProposalRow>> {
    read_rows(path, PROPOSALS_HEADER, |line_no, f| {
        let x = parse_f64(path, line_no, "x", f[2])?;
        let y = parse_f64(path, line_no, "y", f[3])?;
        let z = parse_f64(path, line_no, "z", f[4])?;
        Ok(ProposalRow {
            patient_id: f[0].to_string(),
            timepoint: parse_usize(path, line_no, "timepoint", f[1])?,
            proposal: Proposal {
                center_voxel: [z, y, x],
                diameter_mm: parse_f64(path, line_no, "diameter_mm", f[5])?,
                confidence: parse_f64(path, line_no, "confidence", f[6])?,
            },
        })
    })
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

pub const PREDICTIONS_HEADER: &str = "patient_id,score,used_branches,fallback_flag";

pub fn write_predictions(path: &Path, rows: &[MalignancyPrediction]) -> Result<()> {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            r.patient_id, r.score, r.used_branches, r.fallback
        ));
    }
    write_new(path, &out)
}

/// A prediction row as read back from disk; `used_branches` is kept as the
/// formatted string.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub patient_id: String,
    pub score: f64,
    pub used_branches: String,
    pub fallback: bool,
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    read_rows(path, PREDICTIONS_HEADER, |line_no, f| {
        let fallback = match f[3] {
            "true" => true,
            "false" => false,
            other => {
                return Err(format_err(
                    path,
                    line_no,
                    format!("fallback_flag must be true or false, got '{other}'"),
                ))
            }
        };
        Ok(PredictionRow {
            patient_id: f[0].to_string(),
            score: parse_f64(path, line_no, "score", f[1])?,
            used_branches: f[2].to_string(),
            fallback,
        })
    })
}

// ---------------------------------------------------------------------------
// Training curves
// ---------------------------------------------------------------------------

/// Writes per-epoch losses, one stage per block of rows.
pub fn write_curves(
    path: &Path,
    stages: &[(&str, &serialct_core::detect::TrainingCurve)],
) -> Result<()> {
    let mut out = String::from("stage,epoch,train_loss,val_loss\n");
    for (name, curve) in stages {
        for (e, (t, v)) in curve.train_loss.iter().zip(&curve.val_loss).enumerate() {
            out.push_str(&format!("{name},{e},{t},{v}\n"));
        }
    }
    write_new(path, &out)
}
