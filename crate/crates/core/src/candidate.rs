//! Candidate selection and longitudinal patch extraction.
//!
//! Detection runs on the latest screen only; the single highest-confidence
//! proposal becomes the case's candidate nodule.  Because all timepoints
//! are rigidly registered into the baseline frame, one set of voxel
//! coordinates addresses the same anatomy in every scan, so a cubic patch
//! is cut around the candidate centre at each available timepoint.

use ndarray::Array3;

use crate::detect::{extract_window, Proposal};
use crate::volume::{SeriesCase, Stage};
use crate::{Error, Result};

/// Aligned patch stack around one candidate nodule.
#[derive(Debug, Clone)]
pub struct CandidateSeries {
    /// Voxel centre in the registered baseline frame (shared by all scans).
    pub center_voxel: [usize; 3],
    /// `(timepoint index, cubic patch)`, in scan order.
    pub patches: Vec<(usize, Array3<f64>)>,
    /// Confidence of the proposal the series was built from.
    pub source_confidence: f64,
}

/// Picks the proposal with the highest confidence.  Ties fall to the larger
/// diameter, then to the lexicographically smallest centre, making the
/// choice a total order — independent of input order.
pub fn select_candidate(proposals: &[Proposal]) -> Result<Proposal> {
    proposals
        .iter()
        .max_by(|p, q| {
            p.confidence
                .partial_cmp(&q.confidence)
                .expect("finite confidence")
                .then(p.diameter_mm.partial_cmp(&q.diameter_mm).expect("finite diameter"))
                .then_with(|| {
                    // Reversed: the smaller centre must win the max.
                    q.center_voxel
                        .iter()
                        .zip(p.center_voxel.iter())
                        .map(|(a, b)| a.partial_cmp(b).expect("finite centre"))
                        .fold(std::cmp::Ordering::Equal, |acc, o| acc.then(o))
                })
        })
        .cloned()
        .ok_or_else(|| Error::NoProposals("detector returned an empty proposal list".into()))
}

/// Cuts a `patch_size`³ patch centred on the candidate from every timepoint
/// of a preprocessed (normalised, co-registered) case.  Regions outside a
/// volume are padded with `fill`.
pub fn extract_patch_series(
    case: &SeriesCase,
    candidate: &Proposal,
    patch_size: usize,
    fill: f64,
) -> Result<CandidateSeries> {
    let dims = case.scans[0].volume.dims();
    for scan in &case.scans {
        if !matches!(scan.volume.stage, Stage::Normalized | Stage::Registered) {
            return Err(Error::Input(format!(
                "patch extraction expects normalised scans, got stage {:?}",
                scan.volume.stage
            )));
        }
        if scan.volume.dims() != dims {
            return Err(Error::Input(format!(
                "case {}: scans must share dimensions after registration ({:?} vs {dims:?})",
                case.patient_id,
                scan.volume.dims()
            )));
        }
    }
    let mut centre = [0usize; 3];
    for k in 0..3 {
        let c = candidate.center_voxel[k].round();
        if c < 0.0 || c >= dims[k] as f64 {
            return Err(Error::CenterOutOfVolume(format!(
                "case {}: centre {:?} outside dims {dims:?}",
                case.patient_id, candidate.center_voxel
            )));
        }
        centre[k] = c as usize;
    }
    let half = (patch_size / 2) as i64;
    let start = [
        centre[0] as i64 - half,
        centre[1] as i64 - half,
        centre[2] as i64 - half,
    ];
    let patches = case
        .scans
        .iter()
        .enumerate()
        .map(|(t, scan)| (t, extract_window(&scan.volume.data, start, patch_size, fill)))
        .collect();
    Ok(CandidateSeries {
        center_voxel: centre,
        patches,
        source_confidence: candidate.confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::phantom::{generate_case, NoduleParams, PhantomSpec, RigidMotion};
    use crate::preprocess::preprocess_case;
    use crate::volume::{CtVolume, Spacing, TimepointScan};

    fn prop(center: [f64; 3], diameter_mm: f64, confidence: f64) -> Proposal {
        Proposal { center_voxel: center, diameter_mm, confidence }
    }

    #[test]
    fn selects_highest_confidence() {
        let ps = vec![
            prop([1.0, 1.0, 1.0], 6.0, 0.3),
            prop([2.0, 2.0, 2.0], 6.0, 0.9),
            prop([3.0, 3.0, 3.0], 6.0, 0.7),
        ];
        let best = select_candidate(&ps).unwrap();
        assert_eq!(best.confidence, 0.9);
        assert_eq!(best.center_voxel, [2.0, 2.0, 2.0]);
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(select_candidate(&[]), Err(Error::NoProposals(_))));
    }

    #[test]
    fn ties_break_on_diameter_then_centre_and_order_never_matters() {
        let ps = vec![
            prop([5.0, 5.0, 5.0], 8.0, 0.8),
            prop([1.0, 1.0, 1.0], 12.0, 0.8),
        ];
        let best = select_candidate(&ps).unwrap();
        assert_eq!(best.diameter_mm, 12.0);

        let ps = vec![
            prop([5.0, 5.0, 9.0], 8.0, 0.8),
            prop([5.0, 5.0, 2.0], 8.0, 0.8),
            prop([5.0, 6.0, 1.0], 8.0, 0.8),
        ];
        // Full tie on confidence and diameter: smallest centre wins.
        let best = select_candidate(&ps).unwrap();
        assert_eq!(best.center_voxel, [5.0, 5.0, 2.0]);

        // Permutation invariance over all 6 orders of a 3-element list.
        let perms: [[usize; 3]; 6] =
            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for perm in perms {
            let shuffled: Vec<Proposal> = perm.iter().map(|&i| ps[i].clone()).collect();
            assert_eq!(select_candidate(&shuffled).unwrap(), best);
        }
    }

    fn graded_case(timepoints: usize) -> SeriesCase {
        // Distinct values everywhere so patch content pins down coordinates.
        let scans = (0..timepoints)
            .map(|t| {
                let data = Array3::from_shape_fn((70, 70, 70), |(z, y, x)| {
                    t as f64 * 1e6 + (z * 70 * 70 + y * 70 + x) as f64
                });
                TimepointScan {
                    months: t as f64 * 6.0,
                    volume: CtVolume::new(data, Spacing::new(1.0, 1.0, 1.0), Stage::Normalized),
                }
            })
            .collect();
        SeriesCase::new("p1".into(), scans).unwrap()
    }

    #[test]
    fn interior_candidate_needs_no_padding() {
        let case = graded_case(3);
        let cand = prop([35.0, 35.0, 35.0], 8.0, 0.9);
        let s = extract_patch_series(&case, &cand, 61, -1.0).unwrap();
        assert_eq!(s.patches.len(), 3);
        assert_eq!(s.center_voxel, [35, 35, 35]);
        for (t, patch) in &s.patches {
            assert_eq!(patch.dim(), (61, 61, 61));
            assert!(patch.iter().all(|&v| v != -1.0), "no padding expected");
            // Centre voxel equals the volume value at the candidate centre.
            assert_eq!(patch[[30, 30, 30]], case.scans[*t].volume.data[[35, 35, 35]]);
        }
    }

    #[test]
    fn near_face_padding_fills_exactly_the_forced_slab() {
        let case = graded_case(1);
        // 10 voxels from the z=0 face: the patch needs rows -20..=-1 padded.
        let cand = prop([10.0, 35.0, 35.0], 8.0, 0.9);
        let s = extract_patch_series(&case, &cand, 61, -1.0).unwrap();
        let patch = &s.patches[0].1;
        assert_eq!(patch.dim(), (61, 61, 61));
        let fill_count = patch.iter().filter(|&&v| v == -1.0).count();
        assert_eq!(fill_count, 20 * 61 * 61);
        for z in 0..20 {
            assert!(patch.index_axis(ndarray::Axis(0), z).iter().all(|&v| v == -1.0));
        }
        assert_eq!(patch[[30, 30, 30]], case.scans[0].volume.data[[10, 35, 35]]);
    }

    #[test]
    fn centre_outside_volume_is_an_error() {
        let case = graded_case(2);
        for bad in [[-1.0, 35.0, 35.0], [35.0, 70.0, 35.0], [35.0, 35.0, 1e9]] {
            assert!(matches!(
                extract_patch_series(&case, &prop(bad, 8.0, 0.9), 61, 0.0),
                Err(Error::CenterOutOfVolume(_))
            ));
        }
    }

    #[test]
    fn raw_scans_are_rejected() {
        let mut case = graded_case(1);
        case.scans[0].volume.stage = Stage::Raw;
        assert!(matches!(
            extract_patch_series(&case, &prop([35.0; 3], 8.0, 0.9), 61, 0.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn patches_do_not_depend_on_which_other_timepoints_exist() {
        let full = graded_case(3);
        let reduced = SeriesCase::new(
            "p1".into(),
            vec![full.scans[0].clone(), full.scans[2].clone()],
        )
        .unwrap();
        let cand = prop([20.0, 35.0, 50.0], 8.0, 0.9);
        let a = extract_patch_series(&full, &cand, 61, 0.0).unwrap();
        let b = extract_patch_series(&reduced, &cand, 61, 0.0).unwrap();
        assert_eq!(a.patches[0].1, b.patches[0].1);
        assert_eq!(a.patches[2].1, b.patches[1].1);
    }

    #[test]
    fn growing_phantom_has_nondecreasing_core_intensity() {
        let run = RunConfig::desk(900);
        let spec = PhantomSpec {
            patient_id: "grow1".into(),
            case_seed: 901,
            timepoints: 3,
            nodule: Some(NoduleParams {
                center_mm: [38.4, 32.4, 46.0],
                final_diameter_mm: 13.0,
                growth_factor: 1.35,
                spiculated: false,
            }),
            label: true,
            motions: vec![
                RigidMotion::identity(),
                RigidMotion { translation_mm: [1.2, -0.9, 0.9], rotation_deg: [1.0, 0.0, -1.0] },
                RigidMotion { translation_mm: [-1.2, 0.9, -0.9], rotation_deg: [-1.0, 1.0, 0.0] },
            ],
            metadata: crate::metadata::MetadataRecord::default(),
        };
        let case = generate_case(&run.phantom, &spec);
        let pre = preprocess_case(&case.case, &run.preprocess).unwrap();
        // Candidate straight from the baseline truth annotation, mapped into
        // the cropped frame.
        let t0 = &case.truth.annotations[0];
        let c = pre.crop.to_cropped(t0.center_voxel);
        let cand = prop(c, t0.diameter_mm, 0.95);
        let series = extract_patch_series(&pre.case, &cand, 21, 0.0).unwrap();
        assert_eq!(series.patches.len(), 3);
        let core_mean = |p: &Array3<f64>| {
            let mut s = 0.0;
            let c0 = 21 / 2 - 4;
            for z in c0..c0 + 9 {
                for y in c0..c0 + 9 {
                    for x in c0..c0 + 9 {
                        s += p[[z, y, x]];
                    }
                }
            }
            s / 729.0
        };
        let means: Vec<f64> = series.patches.iter().map(|(_, p)| core_mean(p)).collect();
        assert!(
            means[0] < means[1] && means[1] < means[2],
            "core means should grow with the nodule: {means:?}"
        );
    }
}
