//! Synthetic longitudinal chest phantoms with exact ground truth.
//!
//! A phantom is a body ellipsoid enclosing two noisy lung ellipsoids and,
//! usually, one soft-edged spherical nodule whose diameter is multiplied
//! by a per-interval growth factor between screens. The case label is
//! defined by that growth factor, so longitudinal change carries the
//! label signal by construction; the latest-screen diameter is drawn from
//! the same range for both labels and is therefore uninformative on its
//! own. Each later screen is additionally moved by a small rigid
//! perturbation whose exact parameters are kept as ground truth for
//! registration tests. Generation is bitwise deterministic given the
//! config and spec.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::PhantomConfig;
use crate::metadata::MetadataRecord;
use crate::nn::stream_rng;
use crate::volume::{CtVolume, NoduleAnnotation, SeriesCase, Spacing, Stage, TimepointScan};

/// Soft-edge width of rendered boundaries, mm.
const EDGE_MM: f64 = 1.0;
/// Tissue shell guaranteed around each lung so the lungs never connect to
/// the air outside the body, mm.
const BODY_SHELL_MM: f64 = 3.0;
/// Number of radial spikes on spiculated nodules.
const SPIKES: usize = 8;
/// Sharpness exponent of the cosine spike lobes.
const SPIKE_POWER: f64 = 16.0;

/// Rigid motion: rotation (degrees, applied z then y then x) about the
/// volume centre followed by a translation in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidMotion {
    pub translation_mm: [f64; 3],
    pub rotation_deg: [f64; 3],
}

impl RigidMotion {
    pub fn identity() -> Self {
        RigidMotion { translation_mm: [0.0; 3], rotation_deg: [0.0; 3] }
    }

    pub fn is_identity(&self) -> bool {
        self.translation_mm == [0.0; 3] && self.rotation_deg == [0.0; 3]
    }

    /// Row-major rotation matrix acting on (z, y, x) vectors.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [az, ay, ax] = self.rotation_deg.map(f64::to_radians);
        // rotation about the z axis mixes (y, x); about y mixes (z, x); about x mixes (z, y)
        let rz = [[1.0, 0.0, 0.0], [0.0, az.cos(), -az.sin()], [0.0, az.sin(), az.cos()]];
        let ry = [[ay.cos(), 0.0, -ay.sin()], [0.0, 1.0, 0.0], [ay.sin(), 0.0, ay.cos()]];
        let rx = [[ax.cos(), -ax.sin(), 0.0], [ax.sin(), ax.cos(), 0.0], [0.0, 0.0, 1.0]];
        mat_mul(&rx, &mat_mul(&ry, &rz))
    }

    /// Map a canonical-frame point (mm) into the moved scan frame.
    pub fn apply(&self, p: [f64; 3], centre: [f64; 3]) -> [f64; 3] {
        let r = self.matrix();
        let d = [p[0] - centre[0], p[1] - centre[1], p[2] - centre[2]];
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2] + centre[0] + self.translation_mm[0],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2] + centre[1] + self.translation_mm[1],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2] + centre[2] + self.translation_mm[2],
        ]
    }

    /// Map a scan-frame point (mm) back into the canonical frame.
    pub fn apply_inverse(&self, q: [f64; 3], centre: [f64; 3]) -> [f64; 3] {
        let r = self.matrix();
        let d = [
            q[0] - centre[0] - self.translation_mm[0],
            q[1] - centre[1] - self.translation_mm[1],
            q[2] - centre[2] - self.translation_mm[2],
        ];
        // transpose is the inverse of a rotation
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2] + centre[0],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2] + centre[1],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2] + centre[2],
        ]
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Nodule parameters in the canonical (first-screen) frame.
#[derive(Debug, Clone)]
pub struct NoduleParams {
    pub center_mm: [f64; 3],
    /// Diameter at the latest screen, mm.
    pub final_diameter_mm: f64,
    /// Per-interval diameter multiplier.
    pub growth_factor: f64,
    pub spiculated: bool,
}

impl NoduleParams {
    /// Diameter at screen `t` of `timepoints`: the final diameter divided
    /// by the growth factor once per remaining interval.
    pub fn diameter_at(&self, t: usize, timepoints: usize) -> f64 {
        self.final_diameter_mm / self.growth_factor.powi((timepoints - 1 - t) as i32)
    }

    /// First-screen diameter.
    pub fn d0(&self, timepoints: usize) -> f64 {
        self.diameter_at(0, timepoints)
    }
}

/// Everything needed to render one case deterministically.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub patient_id: String,
    pub case_seed: u64,
    pub timepoints: usize,
    pub nodule: Option<NoduleParams>,
    pub label: bool,
    /// Rigid perturbation per screen; the first is the identity.
    pub motions: Vec<RigidMotion>,
    pub metadata: MetadataRecord,
}

/// Ground truth accompanying a generated case.
#[derive(Debug, Clone)]
pub struct CaseTruth {
    pub label: bool,
    pub growth_factor: f64,
    /// One annotation per screen; empty when the case has no nodule.
    pub annotations: Vec<NoduleAnnotation>,
    pub motions: Vec<RigidMotion>,
    pub metadata: MetadataRecord,
}

#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub case: SeriesCase,
    pub truth: CaseTruth,
}

/// Volume centre in mm under the voxel-centre convention.
fn volume_centre(cfg: &PhantomConfig) -> [f64; 3] {
    [
        (cfg.dims[0] - 1) as f64 * 0.5 * cfg.spacing[0],
        (cfg.dims[1] - 1) as f64 * 0.5 * cfg.spacing[1],
        (cfg.dims[2] - 1) as f64 * 0.5 * cfg.spacing[2],
    ]
}

/// Body ellipsoid semi-axes: wraps the lungs with margin, never touching
/// the volume border.
fn body_semi_axes(cfg: &PhantomConfig) -> [f64; 3] {
    let phys = [
        cfg.dims[0] as f64 * cfg.spacing[0],
        cfg.dims[1] as f64 * cfg.spacing[1],
        cfg.dims[2] as f64 * cfg.spacing[2],
    ];
    [
        (cfg.lung_semi_axes_mm[0] + 5.0).min(0.49 * phys[0]),
        (cfg.lung_semi_axes_mm[1] + 5.0).min(0.49 * phys[1]),
        (cfg.lung_offset_mm + cfg.lung_semi_axes_mm[2] + 4.0).min(0.49 * phys[2]),
    ]
}

fn lung_centres(cfg: &PhantomConfig) -> [[f64; 3]; 2] {
    let c = volume_centre(cfg);
    [
        [c[0], c[1], c[2] - cfg.lung_offset_mm],
        [c[0], c[1], c[2] + cfg.lung_offset_mm],
    ]
}

fn in_ellipsoid(p: [f64; 3], centre: [f64; 3], semi: [f64; 3]) -> bool {
    scaled_norm_sq(p, centre, semi) <= 1.0
}

fn scaled_norm_sq(p: [f64; 3], centre: [f64; 3], semi: [f64; 3]) -> f64 {
    let dz = (p[0] - centre[0]) / semi[0];
    let dy = (p[1] - centre[1]) / semi[1];
    let dx = (p[2] - centre[2]) / semi[2];
    dz * dz + dy * dy + dx * dx
}

/// Render one screen of a case.
fn render_scan(cfg: &PhantomConfig, spec: &PhantomSpec, t: usize, spikes: &[[f64; 3]]) -> CtVolume {
    let [nz, ny, nx] = cfg.dims;
    let spacing = Spacing::from_array(cfg.spacing);
    let centre = volume_centre(cfg);
    let body = body_semi_axes(cfg);
    let lungs = lung_centres(cfg);
    let shell = [
        cfg.lung_semi_axes_mm[0] + BODY_SHELL_MM,
        cfg.lung_semi_axes_mm[1] + BODY_SHELL_MM,
        cfg.lung_semi_axes_mm[2] + BODY_SHELL_MM,
    ];
    let motion = &spec.motions[t];
    let mut data = Array3::<f64>::zeros((nz, ny, nx));
    let mut noise_rng = stream_rng(spec.case_seed, 1000 + t as u64);

    let nodule = spec.nodule.as_ref().map(|n| (n, n.diameter_at(t, spec.timepoints)));

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = [z as f64 * cfg.spacing[0], y as f64 * cfg.spacing[1], x as f64 * cfg.spacing[2]];
                let p = motion.apply_inverse(q, centre);
                let in_lung = in_ellipsoid(p, lungs[0], cfg.lung_semi_axes_mm)
                    || in_ellipsoid(p, lungs[1], cfg.lung_semi_axes_mm);
                let mut v = if in_lung {
                    let noise: f64 = StandardNormal.sample(&mut noise_rng);
                    cfg.lung_hu + noise * cfg.noise_sd_hu
                } else if in_ellipsoid(p, centre, body)
                    || in_ellipsoid(p, lungs[0], shell)
                    || in_ellipsoid(p, lungs[1], shell)
                {
                    cfg.body_hu
                } else {
                    cfg.air_hu
                };
                if let Some((n, dt)) = nodule {
                    let radius = 0.5 * dt;
                    let dz = p[0] - n.center_mm[0];
                    let dy = p[1] - n.center_mm[1];
                    let dx = p[2] - n.center_mm[2];
                    let reach = radius * (1.0 + cfg.spiculation_amplitude) + EDGE_MM;
                    if dz.abs() <= reach && dy.abs() <= reach && dx.abs() <= reach {
                        let r = (dz * dz + dy * dy + dx * dx).sqrt();
                        let mut r_bound = radius;
                        if n.spiculated && r > 1e-9 {
                            let u = [dz / r, dy / r, dx / r];
                            let mut bump = 0.0;
                            for s in spikes {
                                let c = u[0] * s[0] + u[1] * s[1] + u[2] * s[2];
                                if c > 0.0 {
                                    bump += c.powf(SPIKE_POWER);
                                }
                            }
                            r_bound = radius * (1.0 + cfg.spiculation_amplitude * bump.min(1.0));
                        }
                        let w = ((r_bound - r) / EDGE_MM + 0.5).clamp(0.0, 1.0);
                        if w > 0.0 {
                            v = v * (1.0 - w) + cfg.nodule_hu * w;
                        }
                    }
                }
                data[[z, y, x]] = v;
            }
        }
    }
    CtVolume::new(data, spacing, Stage::Raw)
}

/// Render all screens of a case and assemble the ground truth.
pub fn generate_case(cfg: &PhantomConfig, spec: &PhantomSpec) -> GeneratedCase {
    assert_eq!(spec.motions.len(), spec.timepoints, "one motion per screen");
    assert!(spec.motions[0].is_identity(), "first screen is the reference frame");
    let centre = volume_centre(cfg);
    let spikes = spike_directions(spec.case_seed);
    let mut scans = Vec::with_capacity(spec.timepoints);
    let mut annotations = Vec::new();
    for t in 0..spec.timepoints {
        let volume = render_scan(cfg, spec, t, &spikes);
        if let Some(n) = &spec.nodule {
            let q = spec.motions[t].apply(n.center_mm, centre);
            annotations.push(NoduleAnnotation {
                center_voxel: [q[0] / cfg.spacing[0], q[1] / cfg.spacing[1], q[2] / cfg.spacing[2]],
                diameter_mm: n.diameter_at(t, spec.timepoints),
            });
        }
        scans.push(TimepointScan { months: t as f64 * cfg.screen_interval_months, volume });
    }
    let case = SeriesCase::new(spec.patient_id.clone(), scans).expect("valid series");
    GeneratedCase {
        case,
        truth: CaseTruth {
            label: spec.label,
            growth_factor: spec.nodule.as_ref().map_or(1.0, |n| n.growth_factor),
            annotations,
            motions: spec.motions.clone(),
            metadata: spec.metadata.clone(),
        },
    }
}

fn spike_directions(case_seed: u64) -> Vec<[f64; 3]> {
    let mut rng = stream_rng(case_seed, 2000);
    (0..SPIKES)
        .map(|_| {
            loop {
                let v = [
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 0.2 && n <= 1.0 {
                    return [v[0] / n, v[1] / n, v[2] / n];
                }
            }
        })
        .collect()
}

/// Knobs for cohort sampling that differ between experiments.
#[derive(Debug, Clone)]
pub struct CohortOptions {
    pub prevalence: f64,
    /// Latest-screen diameter range, mm.
    pub final_diameter_mm: [f64; 2],
    pub spiculated_fraction: f64,
    pub timepoints: usize,
    /// Fraction of cases rendered without any nodule.
    pub nodule_free_fraction: f64,
}

impl CohortOptions {
    pub fn standard(cfg: &PhantomConfig) -> Self {
        CohortOptions {
            prevalence: cfg.cancer_prevalence,
            final_diameter_mm: cfg.final_diameter_mm,
            spiculated_fraction: cfg.spiculated_fraction,
            timepoints: cfg.timepoints,
            nodule_free_fraction: 0.0,
        }
    }

    /// Small-nodule screening mix: quarter prevalence, 5 to 10 mm, half
    /// spiculated.
    pub fn small_nodule(cfg: &PhantomConfig) -> Self {
        CohortOptions {
            prevalence: 0.25,
            final_diameter_mm: [5.0, 10.0],
            spiculated_fraction: 0.5,
            timepoints: cfg.timepoints,
            nodule_free_fraction: 0.0,
        }
    }

    /// Single-screen scans for detector training and evaluation.
    pub fn detection(diameter_mm: [f64; 2], nodule_free_fraction: f64) -> Self {
        CohortOptions {
            prevalence: 0.5,
            final_diameter_mm: diameter_mm,
            spiculated_fraction: 0.5,
            timepoints: 1,
            nodule_free_fraction,
        }
    }
}

/// Draw `n` case specs. Deterministic in (`cfg`, `opts`, `seed`); each
/// case additionally receives its own render seed.
pub fn sample_cohort(cfg: &PhantomConfig, opts: &CohortOptions, n: usize, seed: u64) -> Vec<PhantomSpec> {
    let mut specs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        let case_seed = rng.gen::<u64>();
        let nodule_free = rng.gen_bool(opts.nodule_free_fraction);
        let label = !nodule_free && rng.gen_bool(opts.prevalence);
        let growth = if opts.timepoints == 1 {
            1.0
        } else if label {
            rng.gen_range(cfg.growth_range[0]..cfg.growth_range[1])
        } else {
            rng.gen_range(cfg.static_range[0]..cfg.static_range[1])
        };
        let final_d = rng.gen_range(opts.final_diameter_mm[0]..opts.final_diameter_mm[1]);
        let spiculated = rng.gen_bool(opts.spiculated_fraction);
        let nodule = if nodule_free {
            None
        } else {
            Some(NoduleParams {
                center_mm: sample_nodule_centre(cfg, &mut rng, final_d),
                final_diameter_mm: final_d,
                growth_factor: growth,
                spiculated,
            })
        };
        let mut motions = vec![RigidMotion::identity()];
        for _ in 1..opts.timepoints {
            motions.push(RigidMotion {
                translation_mm: [
                    rng.gen_range(-cfg.max_shift_voxels..cfg.max_shift_voxels) * cfg.spacing[0],
                    rng.gen_range(-cfg.max_shift_voxels..cfg.max_shift_voxels) * cfg.spacing[1],
                    rng.gen_range(-cfg.max_shift_voxels..cfg.max_shift_voxels) * cfg.spacing[2],
                ],
                rotation_deg: [
                    rng.gen_range(-cfg.max_rotation_deg..cfg.max_rotation_deg),
                    rng.gen_range(-cfg.max_rotation_deg..cfg.max_rotation_deg),
                    rng.gen_range(-cfg.max_rotation_deg..cfg.max_rotation_deg),
                ],
            });
        }
        let metadata = sample_metadata(cfg, label, &mut rng);
        specs.push(PhantomSpec {
            patient_id: format!("case{i:05}"),
            case_seed,
            timepoints: opts.timepoints,
            nodule,
            label,
            motions,
            metadata,
        });
    }
    specs
}

/// Uniform nodule centre such that the largest rendered extent (spikes and
/// soft edge included) stays inside the chosen lung.
fn sample_nodule_centre(cfg: &PhantomConfig, rng: &mut rand_chacha::ChaCha8Rng, final_d: f64) -> [f64; 3] {
    let lungs = lung_centres(cfg);
    let side = usize::from(rng.gen_bool(0.5));
    let lung = lungs[side];
    let semi = cfg.lung_semi_axes_mm;
    let s_min = semi[0].min(semi[1]).min(semi[2]);
    let reach = 0.5 * final_d * (1.0 + cfg.spiculation_amplitude) + EDGE_MM + 1.0;
    let rho_max = (1.0 - reach / s_min).max(0.05);
    loop {
        let v = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
        ];
        let norm_sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if norm_sq <= 1.0 {
            return [
                lung[0] + v[0] * rho_max * semi[0],
                lung[1] + v[1] * rho_max * semi[1],
                lung[2] + v[2] * rho_max * semi[2],
            ];
        }
    }
}

/// Per-voxel membership of the two generative lung ellipsoids at the first
/// screen, (smaller-x lung, larger-x lung). Lets mask tests compare a
/// segmentation against the geometry the volume was rendered from.
pub fn lung_membership(cfg: &PhantomConfig) -> (Array3<bool>, Array3<bool>) {
    let [nz, ny, nx] = cfg.dims;
    let lungs = lung_centres(cfg);
    let mut a = Array3::from_elem((nz, ny, nx), false);
    let mut b = a.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64 * cfg.spacing[0], y as f64 * cfg.spacing[1], x as f64 * cfg.spacing[2]];
                a[[z, y, x]] = in_ellipsoid(p, lungs[0], cfg.lung_semi_axes_mm);
                b[[z, y, x]] = in_ellipsoid(p, lungs[1], cfg.lung_semi_axes_mm);
            }
        }
    }
    (a, b)
}

fn sample_metadata(cfg: &PhantomConfig, label: bool, rng: &mut rand_chacha::ChaCha8Rng) -> MetadataRecord {
    let mean = if label { cfg.pack_years_mean_positive } else { cfg.pack_years_mean_negative };
    let noise: f64 = StandardNormal.sample(rng);
    let pack_years = (mean + noise * cfg.pack_years_sd).max(0.5);
    let age = rng.gen_range(55.0..75.0f64).round();
    let started = rng.gen_range(16.0..28.0f64).round();
    let smoking_years = (age - started).max(1.0);
    MetadataRecord {
        education: rng.gen_range(1..=8),
        pack_years,
        age,
        race: rng.gen_range(1..=7),
        gender: rng.gen_range(1..=2),
        ethnicity: rng.gen_range(1..=2),
        smoking_status: u8::from(rng.gen_bool(0.5)),
        smoking_years,
        cigs_per_day: (pack_years / smoking_years * 20.0).round().clamp(1.0, 80.0),
        extra: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn cfg() -> PhantomConfig {
        RunConfig::desk(1).phantom
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let cfg = cfg();
        let specs = sample_cohort(&cfg, &CohortOptions::standard(&cfg), 2, 9);
        let a = generate_case(&cfg, &specs[0]);
        let b = generate_case(&cfg, &specs[0]);
        for (sa, sb) in a.case.scans.iter().zip(&b.case.scans) {
            assert!(sa
                .volume
                .data
                .iter()
                .zip(sb.volume.data.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = generate_case(&cfg, &specs[1]);
        assert!(a.case.scans[0]
            .volume
            .data
            .iter()
            .zip(c.case.scans[0].volume.data.iter())
            .any(|(x, y)| x.to_bits() != y.to_bits()));
    }

    #[test]
    fn label_follows_growth_threshold() {
        let cfg = cfg();
        let specs = sample_cohort(&cfg, &CohortOptions::standard(&cfg), 64, 3);
        for s in &specs {
            let g = s.nodule.as_ref().unwrap().growth_factor;
            assert_eq!(s.label, g >= cfg.growth_label_threshold);
        }
        assert!(specs.iter().any(|s| s.label));
        assert!(specs.iter().any(|s| !s.label));
    }

    #[test]
    fn final_diameter_is_label_independent_and_d0_in_range() {
        let cfg = cfg();
        let specs = sample_cohort(&cfg, &CohortOptions::standard(&cfg), 200, 4);
        for s in &specs {
            let n = s.nodule.as_ref().unwrap();
            let d0 = n.d0(s.timepoints);
            assert!(
                d0 >= 5.0 && d0 <= 30.0,
                "first-screen diameter {d0} outside the annotated range"
            );
            assert!(n.final_diameter_mm >= cfg.final_diameter_mm[0]);
            assert!(n.final_diameter_mm <= cfg.final_diameter_mm[1]);
        }
        // the growth factor alone separates the classes perfectly
        let mut worst_pos = f64::INFINITY;
        let mut best_neg = f64::NEG_INFINITY;
        for s in &specs {
            let g = s.nodule.as_ref().unwrap().growth_factor;
            if s.label {
                worst_pos = worst_pos.min(g);
            } else {
                best_neg = best_neg.max(g);
            }
        }
        assert!(worst_pos > best_neg, "growth ranges must be separable");
    }

    #[test]
    fn nodule_voxel_count_matches_sphere_volume() {
        let cfg = cfg();
        let mut specs = sample_cohort(&cfg, &CohortOptions::standard(&cfg), 1, 5);
        let n = specs[0].nodule.as_mut().unwrap();
        n.spiculated = false;
        n.final_diameter_mm = 10.0;
        n.growth_factor = 1.0;
        specs[0].label = false;
        let case = generate_case(&cfg, &specs[0]);
        let vol = &case.case.scans[2].volume;
        // nodule voxels are bright (> -300 HU) inside the lung bounding box
        let ann = &case.truth.annotations[2];
        let count = count_bright_near(vol, ann);
        let expect = (std::f64::consts::PI / 6.0) * 10.0f64.powi(3) / vol.spacing.voxel_volume();
        let err = (count as f64 - expect).abs() / expect;
        assert!(err < 0.15, "voxel count {count} vs expected {expect:.1}");
    }

    fn count_bright_near(vol: &CtVolume, ann: &NoduleAnnotation) -> usize {
        let c = ann.center_voxel;
        let r_vox = 0.5 * ann.diameter_mm / vol.spacing.min() + 3.0;
        let mut count = 0;
        let [nz, ny, nx] = vol.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let dz = z as f64 - c[0];
                    let dy = y as f64 - c[1];
                    let dx = x as f64 - c[2];
                    if dz.abs() <= r_vox && dy.abs() <= r_vox && dx.abs() <= r_vox
                        && vol.data[[z, y, x]] > -300.0
                    {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn grower_is_monotone_across_screens() {
        let cfg = cfg();
        let mut specs = sample_cohort(&cfg, &CohortOptions::standard(&cfg), 4, 6);
        let spec = specs
            .iter_mut()
            .find(|s| s.label)
            .expect("cohort contains a grower");
        spec.nodule.as_mut().unwrap().spiculated = false;
        let case = generate_case(&cfg, spec);
        let mut last = 0;
        for (t, scan) in case.case.scans.iter().enumerate() {
            let count = count_bright_near(&scan.volume, &case.truth.annotations[t]);
            assert!(count > last, "screen {t}: {count} voxels, previous {last}");
            last = count;
        }
        // annotated diameters follow the growth factor exactly
        let g = case.truth.growth_factor;
        let d = |t: usize| case.truth.annotations[t].diameter_mm;
        assert!((d(1) / d(0) - g).abs() < 1e-12);
        assert!((d(2) / d(1) - g).abs() < 1e-12);
    }

    #[test]
    fn motion_moves_the_annotation() {
        let cfg = cfg();
        let specs = sample_cohort(&cfg, &CohortOptions::standard(&cfg), 8, 7);
        let spec = specs
            .iter()
            .find(|s| !s.motions[1].is_identity())
            .expect("sampled motions");
        let case = generate_case(&cfg, spec);
        let a0 = &case.truth.annotations[0];
        let a1 = &case.truth.annotations[1];
        assert!(a0
            .center_voxel
            .iter()
            .zip(&a1.center_voxel)
            .any(|(p, q)| (p - q).abs() > 1e-6));
        // and the bright blob actually sits at the annotated centre
        let vol = &case.case.scans[1].volume;
        let c = a1.center_voxel.map(|v| v.round() as usize);
        assert!(vol.data[[c[0], c[1], c[2]]] > -300.0);
    }

    #[test]
    fn spiculated_nodules_are_larger_than_smooth_ones() {
        let cfg = cfg();
        let mut specs = sample_cohort(&cfg, &CohortOptions::standard(&cfg), 1, 8);
        let spec = &mut specs[0];
        spec.nodule.as_mut().unwrap().final_diameter_mm = 10.0;
        spec.nodule.as_mut().unwrap().growth_factor = 1.0;

        spec.nodule.as_mut().unwrap().spiculated = false;
        let smooth = generate_case(&cfg, spec);
        spec.nodule.as_mut().unwrap().spiculated = true;
        let spiky = generate_case(&cfg, spec);
        let t = spec.timepoints - 1;
        let smooth_count = count_bright_near(&smooth.case.scans[t].volume, &smooth.truth.annotations[t]);
        let spiky_count = count_bright_near(&spiky.case.scans[t].volume, &spiky.truth.annotations[t]);
        assert!(spiky_count > smooth_count, "{spiky_count} vs {smooth_count}");
    }

    #[test]
    fn small_nodule_mix_matches_requested_fractions() {
        let cfg = cfg();
        let opts = CohortOptions::small_nodule(&cfg);
        let specs = sample_cohort(&cfg, &opts, 400, 11);
        let cancer = specs.iter().filter(|s| s.label).count() as f64 / 400.0;
        assert!((cancer - 0.25).abs() < 0.07, "prevalence {cancer}");
        let spic = specs
            .iter()
            .filter(|s| s.nodule.as_ref().unwrap().spiculated)
            .count() as f64
            / 400.0;
        assert!((spic - 0.5).abs() < 0.08, "spiculated fraction {spic}");
        for s in &specs {
            let d = s.nodule.as_ref().unwrap().final_diameter_mm;
            assert!((5.0..=10.0).contains(&d));
        }
    }

    #[test]
    fn pack_years_differ_by_label() {
        let cfg = cfg();
        let specs = sample_cohort(&cfg, &CohortOptions::standard(&cfg), 300, 12);
        let mean = |label: bool| {
            let v: Vec<f64> = specs
                .iter()
                .filter(|s| s.label == label)
                .map(|s| s.metadata.pack_years)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false) + 10.0);
    }

    #[test]
    fn nodule_free_cases_have_no_annotations() {
        let cfg = cfg();
        let opts = CohortOptions::detection([6.0, 12.0], 1.0);
        let specs = sample_cohort(&cfg, &opts, 3, 13);
        for spec in &specs {
            assert!(spec.nodule.is_none());
            let case = generate_case(&cfg, spec);
            assert!(case.truth.annotations.is_empty());
            assert_eq!(case.case.timepoints(), 1);
        }
    }
}
