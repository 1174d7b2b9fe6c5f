//! Volumes, series cases and the sidecar on-disk format.
//!
//! A volume on disk is a pair of files sharing a base name: `<name>.meta`,
//! UTF-8 `key=value` lines describing geometry, and `<name>.f64`, the
//! voxel payload as little-endian 64-bit floats in z-major order (z
//! slowest, x fastest). Axis order everywhere in the crate is (z, y, x).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Physical voxel size in mm, (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub fn new(z: f64, y: f64, x: f64) -> Self {
        Spacing { z, y, x }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Spacing { z: a[0], y: a[1], x: a[2] }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }

    pub fn min(&self) -> f64 {
        self.z.min(self.y).min(self.x)
    }

    /// Voxel volume in mm^3.
    pub fn voxel_volume(&self) -> f64 {
        self.z * self.y * self.x
    }
}

/// Which pipeline stage produced a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Masked,
    Normalized,
    Registered,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Masked => "masked",
            Stage::Normalized => "normalized",
            Stage::Registered => "registered",
        }
    }

    fn parse(s: &str) -> Option<Stage> {
        match s {
            "raw" => Some(Stage::Raw),
            "masked" => Some(Stage::Masked),
            "normalized" => Some(Stage::Normalized),
            "registered" => Some(Stage::Registered),
            _ => None,
        }
    }
}

/// A single CT volume with its geometry.
#[derive(Debug, Clone)]
pub struct CtVolume {
    /// Voxel data indexed `[z, y, x]`.
    pub data: Array3<f64>,
    pub spacing: Spacing,
    /// World position of voxel (0, 0, 0) in mm, (z, y, x).
    pub origin: [f64; 3],
    pub stage: Stage,
}

impl CtVolume {
    pub fn new(data: Array3<f64>, spacing: Spacing, stage: Stage) -> Self {
        CtVolume { data, spacing, origin: [0.0; 3], stage }
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    /// World position (mm) of a voxel index.
    pub fn voxel_to_mm(&self, idx: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + idx[0] * self.spacing.z,
            self.origin[1] + idx[1] * self.spacing.y,
            self.origin[2] + idx[2] * self.spacing.x,
        ]
    }

    /// Voxel index (fractional) of a world position in mm.
    pub fn mm_to_voxel(&self, mm: [f64; 3]) -> [f64; 3] {
        [
            (mm[0] - self.origin[0]) / self.spacing.z,
            (mm[1] - self.origin[1]) / self.spacing.y,
            (mm[2] - self.origin[2]) / self.spacing.x,
        ]
    }

    /// Trilinear sample at a fractional voxel coordinate; `fill` outside.
    pub fn trilinear(&self, z: f64, y: f64, x: f64, fill: f64) -> f64 {
        let [nz, ny, nx] = self.dims();
        if !(z.is_finite() && y.is_finite() && x.is_finite()) {
            return fill;
        }
        let z0 = z.floor();
        let y0 = y.floor();
        let x0 = x.floor();
        let fz = z - z0;
        let fy = y - y0;
        let fx = x - x0;
        let (z0, y0, x0) = (z0 as isize, y0 as isize, x0 as isize);
        let at = |zi: isize, yi: isize, xi: isize| -> f64 {
            if zi < 0 || yi < 0 || xi < 0 || zi >= nz as isize || yi >= ny as isize || xi >= nx as isize {
                fill
            } else {
                self.data[[zi as usize, yi as usize, xi as usize]]
            }
        };
        let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x0 + 1) * fx;
        let c01 = at(z0, y0 + 1, x0) * (1.0 - fx) + at(z0, y0 + 1, x0 + 1) * fx;
        let c10 = at(z0 + 1, y0, x0) * (1.0 - fx) + at(z0 + 1, y0, x0 + 1) * fx;
        let c11 = at(z0 + 1, y0 + 1, x0) * (1.0 - fx) + at(z0 + 1, y0 + 1, x0 + 1) * fx;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    fn check(&self) -> Result<()> {
        let [nz, ny, nx] = self.dims();
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(Error::Input("volume dims must all be positive".into()));
        }
        if !(self.spacing.z > 0.0 && self.spacing.y > 0.0 && self.spacing.x > 0.0) {
            return Err(Error::Input("volume spacing must be positive".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("volume contains non-finite voxels".into()));
        }
        Ok(())
    }

    /// Write `<base>.meta` and `<base>.f64`.
    pub fn save(&self, base: &Path) -> Result<()> {
        self.check().map_err(|e| Error::Format { path: base.to_owned(), reason: e.to_string() })?;
        let [nz, ny, nx] = self.dims();
        let meta = format!(
            "dims={nz},{ny},{nx}\nspacing={},{},{}\norigin={},{},{}\nstage={}\n",
            self.spacing.z,
            self.spacing.y,
            self.spacing.x,
            self.origin[0],
            self.origin[1],
            self.origin[2],
            self.stage.name(),
        );
        let meta_path = base.with_extension("meta");
        std::fs::write(&meta_path, meta).map_err(|source| Error::Io { path: meta_path.clone(), source })?;

        let payload_path = base.with_extension("f64");
        let file = std::fs::File::create(&payload_path)
            .map_err(|source| Error::Io { path: payload_path.clone(), source })?;
        let mut w = std::io::BufWriter::new(file);
        let slice = self.data.as_slice().expect("volume is contiguous");
        for v in slice {
            w.write_all(&v.to_le_bytes())
                .map_err(|source| Error::Io { path: payload_path.clone(), source })?;
        }
        w.flush().map_err(|source| Error::Io { path: payload_path.clone(), source })?;
        Ok(())
    }

    /// Read a volume written by [`CtVolume::save`].
    pub fn load(base: &Path) -> Result<Self> {
        let meta_path = base.with_extension("meta");
        let text = std::fs::read_to_string(&meta_path)
            .map_err(|source| Error::Io { path: meta_path.clone(), source })?;
        let bad = |reason: &str| Error::Format { path: meta_path.clone(), reason: reason.to_string() };

        let mut dims: Option<[usize; 3]> = None;
        let mut spacing: Option<[f64; 3]> = None;
        let mut origin: Option<[f64; 3]> = None;
        let mut stage: Option<Stage> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad("line without '='"))?;
            match key {
                "dims" => {
                    let v: Vec<usize> = value
                        .split(',')
                        .map(|t| t.trim().parse().map_err(|_| bad("dims must be three integers")))
                        .collect::<Result<_>>()?;
                    if v.len() != 3 {
                        return Err(bad("dims must have three entries"));
                    }
                    dims = Some([v[0], v[1], v[2]]);
                }
                "spacing" | "origin" => {
                    let v: Vec<f64> = value
                        .split(',')
                        .map(|t| t.trim().parse().map_err(|_| bad("expected three floats")))
                        .collect::<Result<_>>()?;
                    if v.len() != 3 {
                        return Err(bad("expected three entries"));
                    }
                    let arr = [v[0], v[1], v[2]];
                    if key == "spacing" {
                        spacing = Some(arr);
                    } else {
                        origin = Some(arr);
                    }
                }
                "stage" => {
                    stage = Some(Stage::parse(value.trim()).ok_or_else(|| bad("unknown stage"))?);
                }
                _ => return Err(bad(&format!("unknown meta key '{key}'"))),
            }
        }
        let dims = dims.ok_or_else(|| bad("missing dims"))?;
        let spacing = spacing.ok_or_else(|| bad("missing spacing"))?;
        let origin = origin.ok_or_else(|| bad("missing origin"))?;
        let stage = stage.ok_or_else(|| bad("missing stage"))?;

        let payload_path = base.with_extension("f64");
        let file = std::fs::File::open(&payload_path)
            .map_err(|source| Error::Io { path: payload_path.clone(), source })?;
        let mut bytes = Vec::new();
        std::io::BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|source| Error::Io { path: payload_path.clone(), source })?;
        let n = dims[0] * dims[1] * dims[2];
        if bytes.len() != n * 8 {
            return Err(Error::Format {
                path: payload_path,
                reason: format!("payload holds {} bytes, dims imply {}", bytes.len(), n * 8),
            });
        }
        let mut data = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data).unwrap();
        let vol = CtVolume {
            data,
            spacing: Spacing::from_array(spacing),
            origin,
            stage,
        };
        vol.check().map_err(|e| Error::Format { path: base.to_owned(), reason: e.to_string() })?;
        Ok(vol)
    }
}

/// A nodule location in one scan: voxel-space centre plus physical size.
#[derive(Debug, Clone, PartialEq)]
pub struct NoduleAnnotation {
    /// Centre in fractional voxel coordinates, (z, y, x).
    pub center_voxel: [f64; 3],
    pub diameter_mm: f64,
}

impl NoduleAnnotation {
    pub fn center_mm(&self, vol: &CtVolume) -> [f64; 3] {
        vol.voxel_to_mm(self.center_voxel)
    }
}

/// One screen of a case: acquisition time in months plus the volume.
#[derive(Debug, Clone)]
pub struct TimepointScan {
    pub months: f64,
    pub volume: CtVolume,
}

/// An ordered longitudinal series for one patient (1 to 3 screens).
#[derive(Debug, Clone)]
pub struct SeriesCase {
    pub patient_id: String,
    pub scans: Vec<TimepointScan>,
}

impl SeriesCase {
    pub fn new(patient_id: String, scans: Vec<TimepointScan>) -> Result<Self> {
        if scans.is_empty() || scans.len() > 3 {
            return Err(Error::Input(format!(
                "case {patient_id}: expected 1 to 3 scans, got {}",
                scans.len()
            )));
        }
        for pair in scans.windows(2) {
            if !(pair[1].months > pair[0].months) {
                return Err(Error::Input(format!(
                    "case {patient_id}: acquisition times must strictly increase"
                )));
            }
        }
        Ok(SeriesCase { patient_id, scans })
    }

    /// The most recent screen.
    pub fn latest(&self) -> &CtVolume {
        &self.scans.last().expect("cases hold at least one scan").volume
    }

    pub fn timepoints(&self) -> usize {
        self.scans.len()
    }
}

/// Path base (no extension) for a stored volume.
pub fn volume_base(dir: &Path, patient_id: &str, timepoint: usize) -> PathBuf {
    dir.join(format!("{patient_id}_t{timepoint}"))
}
