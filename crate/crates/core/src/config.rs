//! Run configuration: one struct tree covering every pipeline stage.
//!
//! Two built-in profiles exist. `full` carries the published operating
//! point (128-voxel detector patches, LSTM hidden size 128, batch sizes
//! 8/16, initial learning rate 1e-3 with cosine decay, up to 100 epochs).
//! `desk` shrinks every size so the whole pipeline trains and evaluates
//! on a single CPU core in minutes; it is the profile exercised by the
//! test suite. Configs load from TOML, individual fields can be
//! overridden, and the resolved tree is archived next to each run's
//! outputs so a run can be reproduced from its artifacts alone.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which built-in size profile a config started from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile '{other}' (expected desk|full)"))),
        }
    }
}

/// Top-level configuration for a pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Master seed; every stage derives its own stream from this.
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub detector: DetectorConfig,
    pub classifier: ClassifierConfig,
    pub baseline: BaselineConfig,
    pub harness: HarnessConfig,
}

/// Synthetic-cohort geometry and label model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Volume dims in voxels, (z, y, x).
    pub dims: [usize; 3],
    /// Voxel spacing in mm, (z, y, x).
    pub spacing: [f64; 3],
    /// Background (body) intensity in HU.
    pub body_hu: f64,
    /// Lung parenchyma intensity in HU.
    pub lung_hu: f64,
    /// Air outside the body in HU.
    pub air_hu: f64,
    /// Nodule intensity in HU.
    pub nodule_hu: f64,
    /// Gaussian noise sigma in HU, applied inside the body.
    pub noise_sd_hu: f64,
    /// Lung ellipsoid semi-axes in mm, (z, y, x).
    pub lung_semi_axes_mm: [f64; 3],
    /// Lateral offset of each lung centre from the midline, mm.
    pub lung_offset_mm: f64,
    /// Months between successive screens.
    pub screen_interval_months: f64,
    /// Number of screens per case (1..=3).
    pub timepoints: usize,
    /// Final-screen nodule diameter range, mm. Drawn identically for both
    /// labels so that single-screen size carries no label signal.
    pub final_diameter_mm: [f64; 2],
    /// Per-interval growth factor range for growing (label 1) nodules.
    pub growth_range: [f64; 2],
    /// Per-interval growth factor range for static (label 0) nodules.
    pub static_range: [f64; 2],
    /// Growth-factor threshold defining the positive label.
    pub growth_label_threshold: f64,
    /// Fraction of nodules rendered with spiculated margins.
    pub spiculated_fraction: f64,
    /// Spiculation spike amplitude as a fraction of nodule radius.
    pub spiculation_amplitude: f64,
    /// Max |translation| of the rigid inter-scan perturbation, voxels.
    pub max_shift_voxels: f64,
    /// Max |rotation| of the rigid inter-scan perturbation, degrees.
    pub max_rotation_deg: f64,
    /// Cancer prevalence when sampling cohorts.
    pub cancer_prevalence: f64,
    /// Pack-year mean for label-0 cases (label-conditional covariate).
    pub pack_years_mean_negative: f64,
    /// Pack-year mean for label-1 cases.
    pub pack_years_mean_positive: f64,
    /// Pack-year standard deviation (both labels).
    pub pack_years_sd: f64,
}

/// Classical preprocessing: lung mask, normalisation, crop, registration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Air/tissue threshold in HU for the initial binarisation.
    pub threshold_hu: f64,
    /// HU clamp range applied before intensity normalisation.
    pub clamp_hu: [f64; 2],
    /// How voxels outside the lung mask are filled after normalisation.
    pub fill_mode: FillMode,
    /// Connected components smaller than this fraction of the volume are dropped.
    pub min_component_fraction: f64,
    /// Components whose centroid is further than this fraction of the
    /// half-diagonal from the volume centre are dropped.
    pub max_centroid_fraction: f64,
    /// Spherical erosion radius in voxels (vessel detachment).
    pub erosion_radius: f64,
    /// Spherical dilation radius in voxels (restore margin).
    pub dilation_radius: f64,
    /// Dilation radius applied to each per-slice convex hull, voxels.
    pub hull_dilation_radius: f64,
    /// Margin added around the mask bounding box when cropping, voxels.
    pub crop_margin: usize,
    /// Resolution pyramid levels for rigid registration.
    pub pyramid_levels: usize,
    /// Half-width of the translation grid searched at the coarsest level, voxels.
    pub coarse_search_voxels: isize,
    /// Maximum refinement iterations per pyramid level.
    pub max_iterations: usize,
    /// Enable the rotation parameters (otherwise translation-only).
    pub estimate_rotation: bool,
}

/// Fill value used outside the lung mask, expressed on the normalised scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Treat the fill as 170 HU and pass it through the HU normalisation:
    /// (170 + 1200) / 1800.
    Hu170,
    /// Treat the fill as the 8-bit grey level 170: 170 / 255.
    Grey170,
}

impl FillMode {
    pub fn value(self) -> f64 {
        match self {
            FillMode::Hu170 => (170.0 + 1200.0) / 1800.0,
            FillMode::Grey170 => 170.0 / 255.0,
        }
    }
}

/// Nodule detector: architecture, anchor assignment, loss, training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Cubic training-patch edge, voxels.
    pub patch_size: usize,
    /// Channels of the stem convolution (full spatial resolution).
    pub stem_channels: usize,
    /// Channels of the four encoder stages (strides 2, 4, 8, 16).
    pub stage_channels: [usize; 4],
    /// Channels carried by the decoder back up to the output stride.
    pub decoder_channels: usize,
    /// Squeeze-and-excitation bottleneck reduction.
    pub se_reduction: usize,
    /// Output stride of the proposal grid.
    pub stride: usize,
    /// Anchor sphere diameters, mm.
    pub anchors_mm: Vec<f64>,
    /// Sphere-IoU above which an anchor is a positive example.
    pub iou_positive: f64,
    /// Sphere-IoU above which (but below positive) an anchor is ignored.
    pub iou_ignore: f64,
    /// Focal-loss alpha (uniform weight).
    pub focal_alpha: f64,
    /// Focal-loss gamma (down-weighting exponent).
    pub focal_gamma: f64,
    /// Smooth-L1 transition point for the regression loss.
    pub smooth_l1_beta: f64,
    /// Fraction of sampled training patches centred on an annotation.
    pub positive_patch_fraction: f64,
    /// Patches sampled per scan per epoch.
    pub patches_per_scan: usize,
    /// Sliding-window overlap at inference, voxels.
    pub window_overlap: usize,
    /// Proposal score threshold before NMS.
    pub score_threshold: f64,
    /// Sphere-IoU threshold for non-maximum suppression.
    pub nms_iou: f64,
    /// Maximum proposals kept per scan after NMS.
    pub max_proposals: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-decay floor for the learning rate.
    pub min_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Fraction of scans held out for validation checkpoints.
    pub validation_fraction: f64,
}

/// Malignancy classifier: candidate patches, branches, fusion, training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Which branch set the model uses.
    pub variant: Variant,
    /// Cubic nodule-patch edge, voxels. Patches are this size at every timepoint.
    pub patch_size: usize,
    /// Average-pool factor applied by the nodule encoder stem.
    pub nodule_pool: usize,
    /// Channels of the nodule-encoder stages.
    pub nodule_channels: [usize; 4],
    /// Output dimension of the nodule encoder (LSTM input).
    pub nodule_embedding: usize,
    /// LSTM hidden width.
    pub lstm_hidden: usize,
    /// Edge of the grid whole-lung volumes are resampled to.
    pub lung_input_dims: usize,
    /// Channels of the lung-encoder stages.
    pub lung_channels: [usize; 4],
    /// Width of the lung feature vector exposed to fusion.
    pub lung_features: usize,
    /// Hidden width of the fusion head.
    pub fusion_hidden: usize,
    /// Squeeze-and-excitation bottleneck reduction.
    pub se_reduction: usize,
    pub batch_size: usize,
    /// Batch size for the standalone lung-branch pretraining step.
    pub lung_batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs for the standalone lung-branch pretraining step.
    pub lung_max_epochs: usize,
    pub validation_fraction: f64,
}

/// Branch combinations the classifier can be built as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Nodule + lung + metadata, longitudinal (LSTM over all screens).
    #[serde(rename = "nlm-l")]
    NlmL,
    /// Nodule + lung + metadata, latest screen only (no LSTM).
    #[serde(rename = "nlm-s")]
    NlmS,
    /// Nodule branch only, longitudinal.
    #[serde(rename = "n-l")]
    NL,
    /// Lung branch only, longitudinal.
    #[serde(rename = "l-l")]
    LL,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NlmL, Variant::NlmS, Variant::NL, Variant::LL];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NlmL => "nlm-l",
            Variant::NlmS => "nlm-s",
            Variant::NL => "n-l",
            Variant::LL => "l-l",
        }
    }

    pub fn uses_nodule(self) -> bool {
        !matches!(self, Variant::LL)
    }

    pub fn uses_lung(self) -> bool {
        matches!(self, Variant::NlmL | Variant::NlmS | Variant::LL)
    }

    pub fn uses_metadata(self) -> bool {
        matches!(self, Variant::NlmL | Variant::NlmS)
    }

    /// Longitudinal variants consume every screen; others only the latest.
    pub fn longitudinal(self) -> bool {
        !matches!(self, Variant::NlmS)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nlm-l" => Ok(Variant::NlmL),
            "nlm-s" => Ok(Variant::NlmS),
            "n-l" => Ok(Variant::NL),
            "l-l" => Ok(Variant::LL),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected nlm-l|nlm-s|n-l|l-l)"
            ))),
        }
    }
}

impl PreprocessConfig {
    /// The classical recipe; it has no size knobs, so desk and full share it.
    pub fn reference() -> Self {
        PreprocessConfig {
            threshold_hu: -600.0,
            clamp_hu: [-1200.0, 600.0],
            fill_mode: FillMode::Hu170,
            min_component_fraction: 0.005,
            max_centroid_fraction: 0.6,
            erosion_radius: 2.0,
            dilation_radius: 3.0,
            hull_dilation_radius: 2.0,
            crop_margin: 2,
            pyramid_levels: 3,
            coarse_search_voxels: 6,
            max_iterations: 40,
            estimate_rotation: true,
        }
    }
}

/// Covariate-only comparator models (support-vector machine and random
/// forest over the nine-slot clinical encoding).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Soft-margin penalty of the support-vector machine.
    pub svm_c: f64,
    /// Radial-basis kernel width, applied as exp(-gamma * ||a - b||^2).
    pub svm_gamma: f64,
    /// Coordinate-ascent sweeps over the dual variables.
    pub svm_passes: usize,
    /// Trees in the random forest.
    pub rf_trees: usize,
    /// Features examined per split.
    pub rf_mtry: usize,
    /// Depth cap per tree.
    pub rf_max_depth: usize,
    /// Smallest sample count a split may leave on either side.
    pub rf_min_leaf: usize,
}

/// Evaluation harness: folds, thresholds, reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub folds: usize,
    /// Decision threshold for the confusion-matrix metrics.
    pub threshold: f64,
    /// Pick the threshold maximising Youden's J on each fold instead.
    pub youden_threshold: bool,
    /// Pool predictions across folds instead of macro-averaging fold metrics.
    pub pooled: bool,
}

impl RunConfig {
    /// Published operating point. Too heavy to train on a laptop CPU; kept
    /// as the reference configuration.
    pub fn full(seed: u64) -> Self {
        RunConfig {
            profile: Profile::Full,
            seed,
            phantom: PhantomConfig {
                dims: [128, 160, 160],
                spacing: [1.0, 0.7, 0.7],
                body_hu: 40.0,
                lung_hu: -900.0,
                air_hu: -1000.0,
                nodule_hu: 60.0,
                noise_sd_hu: 30.0,
                lung_semi_axes_mm: [48.0, 38.0, 24.0],
                lung_offset_mm: 28.0,
                screen_interval_months: 12.0,
                timepoints: 3,
                final_diameter_mm: [8.5, 14.0],
                growth_range: [1.18, 1.30],
                static_range: [0.98, 1.06],
                growth_label_threshold: 1.12,
                spiculated_fraction: 0.5,
                spiculation_amplitude: 0.35,
                max_shift_voxels: 4.0,
                max_rotation_deg: 2.0,
                cancer_prevalence: 0.5,
                pack_years_mean_negative: 18.0,
                pack_years_mean_positive: 42.0,
                pack_years_sd: 14.0,
            },
            preprocess: PreprocessConfig::reference(),
            detector: DetectorConfig {
                patch_size: 128,
                stem_channels: 24,
                stage_channels: [32, 64, 64, 64],
                decoder_channels: 64,
                se_reduction: 16,
                stride: 4,
                anchors_mm: vec![5.0, 10.0, 20.0, 30.0],
                iou_positive: 0.5,
                iou_ignore: 0.02,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
                smooth_l1_beta: 1.0,
                positive_patch_fraction: 0.7,
                patches_per_scan: 4,
                window_overlap: 32,
                score_threshold: 0.1,
                nms_iou: 0.1,
                max_proposals: 5,
                batch_size: 8,
                learning_rate: 1e-3,
                min_learning_rate: 1e-4,
                momentum: 0.9,
                weight_decay: 1e-4,
                max_epochs: 100,
                validation_fraction: 0.15,
            },
            classifier: ClassifierConfig {
                variant: Variant::NlmL,
                patch_size: 61,
                nodule_pool: 1,
                nodule_channels: [16, 32, 64, 64],
                nodule_embedding: 128,
                lstm_hidden: 128,
                lung_input_dims: 128,
                lung_channels: [16, 32, 64, 64],
                lung_features: 512,
                fusion_hidden: 128,
                se_reduction: 16,
                batch_size: 16,
                lung_batch_size: 8,
                learning_rate: 1e-3,
                min_learning_rate: 1e-4,
                momentum: 0.9,
                weight_decay: 1e-4,
                max_epochs: 100,
                lung_max_epochs: 100,
                validation_fraction: 0.15,
            },
            baseline: BaselineConfig {
                svm_c: 1.0,
                svm_gamma: 1.0 / 9.0,
                svm_passes: 200,
                rf_trees: 500,
                rf_mtry: 3,
                rf_max_depth: 16,
                rf_min_leaf: 1,
            },
            harness: HarnessConfig { folds: 5, threshold: 0.5, youden_threshold: false, pooled: false },
        }
    }

    /// Sizes chosen so every stage runs on one CPU core in minutes.
    pub fn desk(seed: u64) -> Self {
        let mut cfg = RunConfig::full(seed);
        cfg.profile = Profile::Desk;
        cfg.phantom.dims = [64, 72, 72];
        cfg.phantom.spacing = [1.2, 0.9, 0.9];
        cfg.phantom.lung_semi_axes_mm = [26.0, 20.0, 13.0];
        cfg.phantom.lung_offset_mm = 15.5;
        cfg.phantom.max_shift_voxels = 3.0;

        cfg.detector.patch_size = 48;
        cfg.detector.stem_channels = 6;
        cfg.detector.stage_channels = [8, 16, 16, 16];
        cfg.detector.decoder_channels = 16;
        cfg.detector.anchors_mm = vec![5.0, 8.0, 12.0];
        cfg.detector.iou_positive = 0.35;
        cfg.detector.learning_rate = 5e-3;
        cfg.detector.max_epochs = 8;
        cfg.detector.patches_per_scan = 2;
        cfg.detector.window_overlap = 16;

        cfg.classifier.patch_size = 48;
        cfg.classifier.nodule_pool = 4;
        cfg.classifier.nodule_channels = [4, 8, 16, 32];
        cfg.classifier.nodule_embedding = 32;
        cfg.classifier.lstm_hidden = 32;
        cfg.classifier.lung_input_dims = 32;
        cfg.classifier.lung_channels = [4, 8, 16, 32];
        cfg.classifier.lung_features = 64;
        cfg.classifier.fusion_hidden = 32;
        cfg.classifier.learning_rate = 1e-2;
        cfg.classifier.max_epochs = 8;
        cfg.classifier.lung_max_epochs = 6;
        cfg
    }

    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::Desk => RunConfig::desk(seed),
            Profile::Full => RunConfig::full(seed),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_owned(), source })?;
        Self::from_toml_str(&text)
    }

    /// Canonical serialisation archived next to each run's outputs.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.phantom;
        if p.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("phantom.dims must be positive".into()));
        }
        if p.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("phantom.spacing must be positive".into()));
        }
        if !(1..=3).contains(&p.timepoints) {
            return Err(Error::Config("phantom.timepoints must be 1..=3".into()));
        }
        if !(0.0..=1.0).contains(&p.cancer_prevalence) {
            return Err(Error::Config("phantom.cancer_prevalence must be in [0,1]".into()));
        }
        let d = &self.detector;
        if d.patch_size % d.stride != 0 {
            return Err(Error::Config("detector.patch_size must be a multiple of stride".into()));
        }
        if d.patch_size % 16 != 0 {
            return Err(Error::Config("detector.patch_size must be divisible by 16".into()));
        }
        if d.anchors_mm.is_empty() {
            return Err(Error::Config("detector.anchors_mm must be non-empty".into()));
        }
        if !(d.iou_ignore < d.iou_positive && d.iou_positive <= 1.0) {
            return Err(Error::Config("detector IoU thresholds must satisfy ignore < positive <= 1".into()));
        }
        if d.window_overlap >= d.patch_size {
            return Err(Error::Config("detector.window_overlap must be below patch_size".into()));
        }
        let c = &self.classifier;
        if c.patch_size == 0 || c.lung_input_dims == 0 {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        let b = &self.baseline;
        if !(b.svm_c > 0.0) || !(b.svm_gamma > 0.0) {
            return Err(Error::Config("baseline svm_c and svm_gamma must be positive".into()));
        }
        if b.svm_passes == 0 || b.rf_trees == 0 || b.rf_min_leaf == 0 {
            return Err(Error::Config("baseline iteration counts must be positive".into()));
        }
        if !(1..=9).contains(&b.rf_mtry) {
            return Err(Error::Config("baseline.rf_mtry must be between 1 and 9".into()));
        }
        if self.harness.folds < 2 {
            return Err(Error::Config("harness.folds must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.harness.threshold) {
            return Err(Error::Config("harness.threshold must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::desk(7).validate().unwrap();
        RunConfig::full(7).validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_stable() {
        let cfg = RunConfig::desk(42);
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(text, back.to_toml_string());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::desk(1).to_toml_string();
        text.push_str("\nbogus_key = 3\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn fill_modes() {
        assert!((FillMode::Hu170.value() - (170.0 + 1200.0) / 1800.0).abs() < 1e-15);
        assert!((FillMode::Grey170.value() - 170.0 / 255.0).abs() < 1e-15);
    }
}
