//! Anchor-based 3-D nodule detector.
//!
//! A U-Net-style encoder/decoder predicts, at every cell of a stride-4
//! proposal grid and for every anchor sphere diameter, an objectness logit
//! plus four regression offsets `(dz, dy, dx, dlog)`:
//!
//! * `d{z,y,x}`  — (nodule centre − cell centre) in mm, divided by the
//!   anchor radius;
//! * `dlog`      — natural log of (nodule diameter / anchor diameter).
//!
//! Anchors are assigned by sphere IoU against the annotated nodules:
//! above `iou_positive` they are positive, in `(iou_ignore, iou_positive]`
//! they are excluded from the objectness loss, below they are negative.
//! Each annotation additionally force-matches its single best anchor so
//! every nodule has at least one positive cell.  Classification uses focal
//! loss over contributing anchors; regression uses smooth-L1 over positive
//! anchors only.
//!
//! Training samples cubic patches (a configurable fraction centred near an
//! annotation, the rest uniformly at random), tracks a held-out validation
//! loss, and restores the best-validation parameters at the end.  Inference
//! tiles the volume with overlapping windows, decodes proposals above a
//! score threshold, and merges them with sphere-IoU non-maximum suppression.

use ndarray::{Array1, Array3, Array4, Array5, ArrayD, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::DetectorConfig;
use crate::nn::blocks::{ConvBlock, ConvBlockCache, EncoderStage, EncoderStageCache};
use crate::nn::pool::{upsample2x, upsample2x_backward};
use crate::nn::{
    focal_loss, restore_params, sigmoid, smooth_l1, snapshot_params, stream_rng, Conv3d, Param,
    Sgd, VisitParams,
};
use crate::volume::{CtVolume, NoduleAnnotation, Spacing, Stage};
use crate::{Error, Result};

/// Output stride of the proposal grid; fixed by the two-level decoder.
pub const GRID_STRIDE: usize = 4;
/// Channels per anchor: (dz, dy, dx, dlog, objectness logit).
pub const CHANNELS_PER_ANCHOR: usize = 5;
/// Decoded log-diameter offsets are clamped to this magnitude so a wild
/// regression output cannot produce a degenerate (or infinite) sphere.
const MAX_LOG_OFFSET: f64 = 2.0;
/// Objectness bias at initialisation; starts the dense grid near-silent so
/// early training is not swamped by the negative cells.
const INITIAL_OBJECTNESS_BIAS: f64 = -2.0;
/// A healthy detector loss is O(1); anything past this is runaway training
/// even when normalisation layers keep every value finite.
const LOSS_EXPLOSION_CAP: f64 = 1e8;

// ---------------------------------------------------------------------------
// Sphere IoU
// ---------------------------------------------------------------------------

fn sphere_volume(r: f64) -> f64 {
    4.0 / 3.0 * std::f64::consts::PI * r.powi(3)
}

/// Intersection-over-union of two spheres given centres (mm) and diameters.
///
/// Uses the closed-form lens volume
/// `V = π (r1+r2−d)² (d² + 2d(r1+r2) − 3(r1−r2)²) / (12 d)`
/// for partially overlapping spheres, the smaller sphere's volume when one
/// contains the other, and zero when they are disjoint.
pub fn sphere_iou(c1: [f64; 3], d1: f64, c2: [f64; 3], d2: f64) -> f64 {
    let r1 = d1 / 2.0;
    let r2 = d2 / 2.0;
    if r1 <= 0.0 || r2 <= 0.0 {
        return 0.0;
    }
    let dist = ((c1[0] - c2[0]).powi(2) + (c1[1] - c2[1]).powi(2) + (c1[2] - c2[2]).powi(2)).sqrt();
    if dist >= r1 + r2 {
        return 0.0;
    }
    let v1 = sphere_volume(r1);
    let v2 = sphere_volume(r2);
    let inter = if dist <= (r1 - r2).abs() {
        v1.min(v2)
    } else {
        let sum = r1 + r2;
        std::f64::consts::PI * (sum - dist).powi(2)
            * (dist * dist + 2.0 * dist * sum - 3.0 * (r1 - r2).powi(2))
            / (12.0 * dist)
    };
    inter / (v1 + v2 - inter)
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Detector backbone: full-resolution stem, four stride-2 encoder stages,
/// and a decoder that upsamples back to stride 4 with skip connections from
/// the stride-8 and stride-4 stages, ending in a 1×1×1 prediction conv.
#[derive(Debug)]
pub struct DetectorNet {
    stem: ConvBlock,
    stage1: EncoderStage,
    stage2: EncoderStage,
    stage3: EncoderStage,
    stage4: EncoderStage,
    up1: ConvBlock,
    up2: ConvBlock,
    head: ConvBlock,
    out: Conv3d,
    stage_channels: [usize; 4],
    anchors_mm: Vec<f64>,
}

/// Per-forward state for [`DetectorNet::backward`].
pub struct DetectorCache {
    stem: ConvBlockCache,
    s1: EncoderStageCache,
    s2: EncoderStageCache,
    s3: EncoderStageCache,
    s4: EncoderStageCache,
    up1: ConvBlockCache,
    up2: ConvBlockCache,
    head: ConvBlockCache,
    head_out: Array5<f64>,
}

fn concat_channels(a: &Array5<f64>, b: &Array5<f64>) -> Array5<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat shapes agree")
}

impl DetectorNet {
    pub fn new(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.stride != GRID_STRIDE {
            return Err(Error::Config(format!(
                "detector decoder produces a stride-{GRID_STRIDE} grid; got stride {}",
                cfg.stride
            )));
        }
        let s = cfg.stage_channels;
        let red = cfg.se_reduction;
        let mut out = Conv3d::new(
            rng,
            cfg.decoder_channels,
            cfg.anchors_mm.len() * CHANNELS_PER_ANCHOR,
            1,
            1,
            0,
        );
        for a in 0..cfg.anchors_mm.len() {
            out.b.value[a * CHANNELS_PER_ANCHOR + 4] = INITIAL_OBJECTNESS_BIAS;
        }
        Ok(DetectorNet {
            stem: ConvBlock::new(rng, 1, cfg.stem_channels, 3, 1, 1),
            stage1: EncoderStage::new(rng, cfg.stem_channels, s[0], red),
            stage2: EncoderStage::new(rng, s[0], s[1], red),
            stage3: EncoderStage::new(rng, s[1], s[2], red),
            stage4: EncoderStage::new(rng, s[2], s[3], red),
            up1: ConvBlock::new(rng, s[3] + s[2], cfg.decoder_channels, 3, 1, 1),
            up2: ConvBlock::new(rng, cfg.decoder_channels + s[1], cfg.decoder_channels, 3, 1, 1),
            head: ConvBlock::new(rng, cfg.decoder_channels, cfg.decoder_channels, 3, 1, 1),
            out,
            stage_channels: s,
            anchors_mm: cfg.anchors_mm.clone(),
        })
    }

    pub fn anchors_mm(&self) -> &[f64] {
        &self.anchors_mm
    }

    /// Training forward: input `[N, 1, D, H, W]` (D, H, W divisible by 16)
    /// to predictions `[N, A*5, D/4, H/4, W/4]`.
    pub fn forward_train(&mut self, x: Array5<f64>) -> (Array5<f64>, DetectorCache) {
        let (e0, c_stem) = self.stem.forward_train(x);
        let (e1, c_s1) = self.stage1.forward_train(e0);
        let (e2, c_s2) = self.stage2.forward_train(e1);
        let (e3, c_s3) = self.stage3.forward_train(e2.clone());
        let (e4, c_s4) = self.stage4.forward_train(e3.clone());
        let (d1, c_up1) = self.up1.forward_train(concat_channels(&upsample2x(&e4), &e3));
        drop((e3, e4));
        let (d2, c_up2) = self.up2.forward_train(concat_channels(&upsample2x(&d1), &e2));
        drop((d1, e2));
        let (h, c_head) = self.head.forward_train(d2);
        let y = self.out.forward(&h);
        let cache = DetectorCache {
            stem: c_stem,
            s1: c_s1,
            s2: c_s2,
            s3: c_s3,
            s4: c_s4,
            up1: c_up1,
            up2: c_up2,
            head: c_head,
            head_out: h,
        };
        (y, cache)
    }

    /// Inference forward with running batch-norm statistics.
    pub fn forward_eval(&self, x: &Array5<f64>) -> Array5<f64> {
        let e1 = self.stage1.forward_eval(&self.stem.forward_eval(x));
        let e2 = self.stage2.forward_eval(&e1);
        let e3 = self.stage3.forward_eval(&e2);
        let e4 = self.stage4.forward_eval(&e3);
        let d1 = self.up1.forward_eval(&concat_channels(&upsample2x(&e4), &e3));
        let d2 = self.up2.forward_eval(&concat_channels(&upsample2x(&d1), &e2));
        self.out.forward(&self.head.forward_eval(&d2))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &DetectorCache, dy: &Array5<f64>) -> Array5<f64> {
        let dh = self.out.backward(&cache.head_out, dy);
        let dd2 = self.head.backward(&cache.head, &dh);
        let du2 = self.up2.backward(&cache.up2, &dd2);
        let (dup1, de2_skip) = du2.view().split_at(Axis(1), du2.dim().1 - self.stage_channels[1]);
        let dd1 = upsample2x_backward(&dup1.to_owned());
        let du1 = self.up1.backward(&cache.up1, &dd1);
        let (dup0, de3_skip) = du1.view().split_at(Axis(1), self.stage_channels[3]);
        let de4 = upsample2x_backward(&dup0.to_owned());
        let de3 = self.stage4.backward(&cache.s4, &de4) + de3_skip;
        let de2 = self.stage3.backward(&cache.s3, &de3) + de2_skip;
        let de1 = self.stage2.backward(&cache.s2, &de2);
        let de0 = self.stage1.backward(&cache.s1, &de1);
        self.stem.backward(&cache.stem, &de0)
    }
}

impl VisitParams for DetectorNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        self.stage1.visit(&format!("{prefix}.stage1"), f);
        self.stage2.visit(&format!("{prefix}.stage2"), f);
        self.stage3.visit(&format!("{prefix}.stage3"), f);
        self.stage4.visit(&format!("{prefix}.stage4"), f);
        self.up1.visit(&format!("{prefix}.up1"), f);
        self.up2.visit(&format!("{prefix}.up2"), f);
        self.head.visit(&format!("{prefix}.head"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
}

// ---------------------------------------------------------------------------
// Anchor targets
// ---------------------------------------------------------------------------

/// Per-patch training targets on the proposal grid.
pub struct PatchTargets {
    /// `[A, gz, gy, gx]`: 1 positive, 0 negative, -1 excluded from the loss.
    pub class: Array4<i8>,
    /// `[A, 4, gz, gy, gx]`: regression targets, valid where `class == 1`.
    pub regression: Array5<f64>,
}

/// Continuous voxel coordinate of a grid cell's centre along one axis.
fn cell_centre_vox(i: usize, stride: usize) -> f64 {
    (i * stride) as f64 + (stride as f64 - 1.0) / 2.0
}

/// Builds anchor classification and regression targets for one cubic patch.
/// `annotations` must already be in the patch's voxel frame.
pub fn build_targets(
    annotations: &[NoduleAnnotation],
    spacing: Spacing,
    patch_size: usize,
    cfg: &DetectorConfig,
) -> PatchTargets {
    let g = patch_size / GRID_STRIDE;
    let n_anchors = cfg.anchors_mm.len();
    let mut class = Array4::<i8>::zeros((n_anchors, g, g, g));
    let mut regression = Array5::<f64>::zeros((n_anchors, 4, g, g, g));
    if annotations.is_empty() {
        return PatchTargets { class, regression };
    }
    let ann_mm: Vec<[f64; 3]> = annotations
        .iter()
        .map(|a| {
            [
                a.center_voxel[0] * spacing.z,
                a.center_voxel[1] * spacing.y,
                a.center_voxel[2] * spacing.x,
            ]
        })
        .collect();

    let write_positive = |class: &mut Array4<i8>,
                              regression: &mut Array5<f64>,
                              a: usize,
                              cell: [usize; 3],
                              j: usize,
                              cell_mm: [f64; 3]| {
        let radius = cfg.anchors_mm[a] / 2.0;
        class[[a, cell[0], cell[1], cell[2]]] = 1;
        for k in 0..3 {
            regression[[a, k, cell[0], cell[1], cell[2]]] = (ann_mm[j][k] - cell_mm[k]) / radius;
        }
        regression[[a, 3, cell[0], cell[1], cell[2]]] =
            (annotations[j].diameter_mm / cfg.anchors_mm[a]).ln();
    };

    // Best (anchor, cell) per annotation for force-matching.
    let mut best_for_ann: Vec<(f64, usize, [usize; 3], [f64; 3])> =
        vec![(-1.0, 0, [0; 3], [0.0; 3]); annotations.len()];

    for a in 0..n_anchors {
        for z in 0..g {
            for y in 0..g {
                for x in 0..g {
                    let cell_mm = [
                        cell_centre_vox(z, GRID_STRIDE) * spacing.z,
                        cell_centre_vox(y, GRID_STRIDE) * spacing.y,
                        cell_centre_vox(x, GRID_STRIDE) * spacing.x,
                    ];
                    let mut best = 0.0;
                    let mut best_j = 0;
                    for (j, am) in ann_mm.iter().enumerate() {
                        let iou =
                            sphere_iou(cell_mm, cfg.anchors_mm[a], *am, annotations[j].diameter_mm);
                        if iou > best {
                            best = iou;
                            best_j = j;
                        }
                        if iou > best_for_ann[j].0 {
                            best_for_ann[j] = (iou, a, [z, y, x], cell_mm);
                        }
                    }
                    if best > cfg.iou_positive {
                        write_positive(&mut class, &mut regression, a, [z, y, x], best_j, cell_mm);
                    } else if best > cfg.iou_ignore {
                        class[[a, z, y, x]] = -1;
                    }
                }
            }
        }
    }
    for (j, &(iou, a, cell, cell_mm)) in best_for_ann.iter().enumerate() {
        if iou > 0.0 {
            write_positive(&mut class, &mut regression, a, cell, j, cell_mm);
        }
    }
    PatchTargets { class, regression }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Focal objectness loss plus smooth-L1 regression over a batch of patches.
/// Returns `(total, classification, regression, d_outputs)`; each term is a
/// mean over its contributing anchors across the whole batch.
pub fn detector_loss(
    out: &Array5<f64>,
    targets: &[PatchTargets],
    cfg: &DetectorConfig,
) -> (f64, f64, f64, Array5<f64>) {
    let (n, _, gz, gy, gx) = out.dim();
    assert_eq!(n, targets.len(), "one target set per batch sample");
    let n_anchors = cfg.anchors_mm.len();
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut logit_idx = Vec::new();
    let mut reg_pred = Vec::new();
    let mut reg_tgt = Vec::new();
    let mut reg_idx = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        for a in 0..n_anchors {
            for z in 0..gz {
                for y in 0..gy {
                    for x in 0..gx {
                        let cls = t.class[[a, z, y, x]];
                        if cls < 0 {
                            continue;
                        }
                        let base = a * CHANNELS_PER_ANCHOR;
                        logits.push(out[[i, base + 4, z, y, x]]);
                        labels.push(f64::from(cls));
                        logit_idx.push([i, base + 4, z, y, x]);
                        if cls == 1 {
                            for k in 0..4 {
                                reg_pred.push(out[[i, base + k, z, y, x]]);
                                reg_tgt.push(t.regression[[a, k, z, y, x]]);
                                reg_idx.push([i, base + k, z, y, x]);
                            }
                        }
                    }
                }
            }
        }
    }
    let (cls_loss, dlogits) = focal_loss(
        &Array1::from(logits),
        &Array1::from(labels),
        cfg.focal_alpha,
        cfg.focal_gamma,
    );
    let (reg_loss, dreg) =
        smooth_l1(&Array1::from(reg_pred), &Array1::from(reg_tgt), cfg.smooth_l1_beta);
    let mut dout = Array5::zeros(out.dim());
    for (pos, &g) in logit_idx.iter().zip(dlogits.iter()) {
        dout[[pos[0], pos[1], pos[2], pos[3], pos[4]]] += g;
    }
    for (pos, &g) in reg_idx.iter().zip(dreg.iter()) {
        dout[[pos[0], pos[1], pos[2], pos[3], pos[4]]] += g;
    }
    (cls_loss + reg_loss, cls_loss, reg_loss, dout)
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

/// Copies a cubic window starting at `start` (may extend beyond the volume;
/// out-of-bounds voxels take `fill`).
pub(crate) fn extract_window(
    data: &Array3<f64>,
    start: [i64; 3],
    size: usize,
    fill: f64,
) -> Array3<f64> {
    let (dz, dy, dx) = data.dim();
    let dims = [dz as i64, dy as i64, dx as i64];
    Array3::from_shape_fn((size, size, size), |(z, y, x)| {
        let src = [start[0] + z as i64, start[1] + y as i64, start[2] + x as i64];
        if src.iter().zip(dims.iter()).all(|(&s, &d)| s >= 0 && s < d) {
            data[[src[0] as usize, src[1] as usize, src[2] as usize]]
        } else {
            fill
        }
    })
}

/// Draws one training patch from a scan.  With probability
/// `positive_patch_fraction` the patch is centred on a randomly chosen
/// annotation (with a small random jitter); otherwise its centre is uniform
/// over the volume.  Returns the patch and the annotations that fall inside
/// it, re-expressed in the patch's voxel frame.
pub fn sample_training_patch(
    volume: &CtVolume,
    annotations: &[NoduleAnnotation],
    cfg: &DetectorConfig,
    fill: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f64>, Vec<NoduleAnnotation>)> {
    let p = cfg.patch_size as i64;
    let half = p / 2;
    let dims = volume.dims();
    let positive = rng.gen_bool(cfg.positive_patch_fraction.clamp(0.0, 1.0));
    let start = if positive {
        if annotations.is_empty() {
            return Err(Error::NoAnnotations);
        }
        let ann = &annotations[rng.gen_range(0..annotations.len())];
        let jitter = (cfg.patch_size as i64 / 8).max(1);
        let mut s = [0i64; 3];
        for k in 0..3 {
            let j = rng.gen_range(-jitter..=jitter);
            s[k] = ann.center_voxel[k].round() as i64 + j - half;
        }
        s
    } else {
        let mut s = [0i64; 3];
        for (k, &d) in dims.iter().enumerate() {
            s[k] = rng.gen_range(0..d as i64) - half;
        }
        s
    };
    let patch = extract_window(&volume.data, start, cfg.patch_size, fill);
    let inside = annotations
        .iter()
        .filter_map(|a| {
            let local = [
                a.center_voxel[0] - start[0] as f64,
                a.center_voxel[1] - start[1] as f64,
                a.center_voxel[2] - start[2] as f64,
            ];
            if local.iter().all(|&c| c >= 0.0 && c < p as f64) {
                Some(NoduleAnnotation { center_voxel: local, diameter_mm: a.diameter_mm })
            } else {
                None
            }
        })
        .collect();
    Ok((patch, inside))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One scan with its ground-truth nodule annotations (voxel frame).
#[derive(Debug, Clone)]
pub struct TrainingScan {
    pub volume: CtVolume,
    pub annotations: Vec<NoduleAnnotation>,
}

/// Per-epoch losses recorded during detector training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCurve {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

fn stack_batch(patches: &[Array3<f64>]) -> Array5<f64> {
    let p = patches[0].dim();
    let mut batch = Array5::zeros((patches.len(), 1, p.0, p.1, p.2));
    for (i, patch) in patches.iter().enumerate() {
        batch.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(patch);
    }
    batch
}

/// Trains the detector on annotated scans.  Deterministic for a fixed
/// `(scans, cfg, fill, seed)`; returns the network restored to its
/// best-validation parameters together with the loss curve.
pub fn train_detector(
    scans: &[TrainingScan],
    cfg: &DetectorConfig,
    fill: f64,
    seed: u64,
) -> Result<(DetectorNet, TrainingCurve)> {
    if scans.is_empty() {
        return Err(Error::Config("detector training requires at least one scan".into()));
    }
    let mut net = DetectorNet::new(cfg, &mut stream_rng(seed, 21))?;
    let mut rng = stream_rng(seed, 20);
    let mut val_rng = stream_rng(seed, 22);

    let mut order: Vec<usize> = (0..scans.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if scans.len() >= 2 {
        ((scans.len() as f64 * cfg.validation_fraction).round() as usize)
            .clamp(1, scans.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);

    // Validation patches are fixed once so the curve measures the model, not
    // the sampler.
    let mut val_set = Vec::new();
    for &i in val_idx {
        for _ in 0..cfg.patches_per_scan.max(1) {
            let (patch, anns) = sample_training_patch(
                &scans[i].volume,
                &scans[i].annotations,
                cfg,
                fill,
                &mut val_rng,
            )
            .or_else(|e| match e {
                // A nodule-free validation scan still contributes negatives.
                Error::NoAnnotations => {
                    let mut neg = cfg.clone();
                    neg.positive_patch_fraction = 0.0;
                    sample_training_patch(&scans[i].volume, &[], &neg, fill, &mut val_rng)
                }
                other => Err(other),
            })?;
            let targets = build_targets(&anns, scans[i].volume.spacing, cfg.patch_size, cfg);
            val_set.push((patch, targets));
        }
    }

    let sgd = Sgd::new(
        cfg.learning_rate,
        cfg.min_learning_rate,
        cfg.momentum,
        cfg.weight_decay,
        cfg.max_epochs,
    );
    let mut curve =
        TrainingCurve { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0 };
    let mut best = f64::INFINITY;
    let mut best_snap: Option<Vec<ArrayD<f64>>> = None;

    for epoch in 0..cfg.max_epochs {
        let lr = sgd.lr_at(epoch);
        let mut slots: Vec<usize> = train_idx
            .iter()
            .flat_map(|&i| std::iter::repeat(i).take(cfg.patches_per_scan.max(1)))
            .collect();
        slots.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut pending_patches: Vec<Array3<f64>> = Vec::new();
        let mut pending_targets: Vec<PatchTargets> = Vec::new();
        let flush = |net: &mut DetectorNet,
                         patches: &mut Vec<Array3<f64>>,
                         targets: &mut Vec<PatchTargets>,
                         loss_sum: &mut f64,
                         loss_n: &mut usize|
         -> Result<()> {
            if patches.is_empty() {
                return Ok(());
            }
            let batch = stack_batch(patches);
            let (y, cache) = net.forward_train(batch);
            let (total, _, _, dout) = detector_loss(&y, targets, cfg);
            if !total.is_finite() || total > LOSS_EXPLOSION_CAP {
                return Err(Error::Divergence(format!(
                    "detector loss {total:.3e} at epoch {epoch}"
                )));
            }
            net.zero_grads();
            net.backward(&cache, &dout);
            sgd.step(net, lr);
            *loss_sum += total * patches.len() as f64;
            *loss_n += patches.len();
            patches.clear();
            targets.clear();
            Ok(())
        };

        for &i in &slots {
            let scan = &scans[i];
            let (patch, anns) =
                match sample_training_patch(&scan.volume, &scan.annotations, cfg, fill, &mut rng) {
                    Ok(ok) => ok,
                    Err(Error::NoAnnotations) => {
                        let mut neg = cfg.clone();
                        neg.positive_patch_fraction = 0.0;
                        sample_training_patch(&scan.volume, &[], &neg, fill, &mut rng)?
                    }
                    Err(other) => return Err(other),
                };
            pending_targets.push(build_targets(&anns, scan.volume.spacing, cfg.patch_size, cfg));
            pending_patches.push(patch);
            if pending_patches.len() == cfg.batch_size.max(1) {
                flush(&mut net, &mut pending_patches, &mut pending_targets, &mut loss_sum, &mut loss_n)?;
            }
        }
        flush(&mut net, &mut pending_patches, &mut pending_targets, &mut loss_sum, &mut loss_n)?;

        let train_loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 };
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            let mut s = 0.0;
            for (patch, targets) in &val_set {
                let y = net.forward_eval(&stack_batch(std::slice::from_ref(patch)));
                let (total, _, _, _) = detector_loss(&y, std::slice::from_ref(targets), cfg);
                s += total;
            }
            s / val_set.len() as f64
        };
        if !val_loss.is_finite() || val_loss > LOSS_EXPLOSION_CAP {
            return Err(Error::Divergence(format!(
                "validation loss {val_loss:.3e} at epoch {epoch}"
            )));
        }
        curve.train_loss.push(train_loss);
        curve.val_loss.push(val_loss);
        if val_loss < best {
            best = val_loss;
            curve.best_epoch = epoch;
            best_snap = Some(snapshot_params(&mut net));
        }
    }
    if let Some(snap) = &best_snap {
        restore_params(&mut net, snap);
    }
    Ok((net, curve))
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// One detected nodule candidate in the scan's voxel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub center_voxel: [f64; 3],
    pub diameter_mm: f64,
    pub confidence: f64,
}

/// Window start offsets covering `dim` with `patch`-sized windows and the
/// given step; the final window is right-aligned so nothing is missed.
fn window_starts(dim: usize, patch: usize, step: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let mut starts: Vec<usize> =
        (0..).map(|k| k * step).take_while(|&s| s + patch < dim).collect();
    starts.push(dim - patch);
    starts
}

/// Greedy sphere-IoU non-maximum suppression.  `proposals` are reordered by
/// (confidence, diameter, centre) descending and pruned against every kept
/// proposal; at most `max_keep` survive.
pub fn nms(
    mut proposals: Vec<Proposal>,
    spacing: Spacing,
    iou_threshold: f64,
    max_keep: usize,
) -> Vec<Proposal> {
    proposals.sort_by(|p, q| {
        q.confidence
            .partial_cmp(&p.confidence)
            .expect("finite confidence")
            .then(q.diameter_mm.partial_cmp(&p.diameter_mm).expect("finite diameter"))
            .then_with(|| {
                p.center_voxel
                    .iter()
                    .zip(q.center_voxel.iter())
                    .map(|(a, b)| a.partial_cmp(b).expect("finite centre"))
                    .fold(std::cmp::Ordering::Equal, |acc, o| acc.then(o))
            })
    });
    let to_mm = |p: &Proposal| {
        [
            p.center_voxel[0] * spacing.z,
            p.center_voxel[1] * spacing.y,
            p.center_voxel[2] * spacing.x,
        ]
    };
    let mut kept: Vec<Proposal> = Vec::new();
    for p in proposals {
        if kept.len() >= max_keep {
            break;
        }
        let pm = to_mm(&p);
        if kept
            .iter()
            .all(|k| sphere_iou(pm, p.diameter_mm, to_mm(k), k.diameter_mm) <= iou_threshold)
        {
            kept.push(p);
        }
    }
    kept
}

/// Runs the detector over a whole (normalised) scan: overlapping sliding
/// windows, proposal decoding above `score_threshold`, then sphere-IoU NMS.
/// Proposals come back sorted by descending confidence.
pub fn detect_nodules(
    net: &DetectorNet,
    volume: &CtVolume,
    cfg: &DetectorConfig,
    fill: f64,
) -> Result<Vec<Proposal>> {
    if !matches!(volume.stage, Stage::Normalized | Stage::Registered) {
        return Err(Error::Input(format!(
            "detector expects a normalised scan, got stage {:?}",
            volume.stage
        )));
    }
    let dims = volume.dims();
    let step = cfg.patch_size - cfg.window_overlap;
    let spacing = volume.spacing;
    let g = cfg.patch_size / GRID_STRIDE;
    let mut proposals = Vec::new();
    for &sz in &window_starts(dims[0], cfg.patch_size, step) {
        for &sy in &window_starts(dims[1], cfg.patch_size, step) {
            for &sx in &window_starts(dims[2], cfg.patch_size, step) {
                let start = [sz as i64, sy as i64, sx as i64];
                let window = extract_window(&volume.data, start, cfg.patch_size, fill);
                let y = net.forward_eval(&stack_batch(std::slice::from_ref(&window)));
                for a in 0..cfg.anchors_mm.len() {
                    let base = a * CHANNELS_PER_ANCHOR;
                    let radius = cfg.anchors_mm[a] / 2.0;
                    for z in 0..g {
                        for yy in 0..g {
                            for x in 0..g {
                                let conf = sigmoid(y[[0, base + 4, z, yy, x]]);
                                if conf < cfg.score_threshold {
                                    continue;
                                }
                                let cell = [
                                    sz as f64 + cell_centre_vox(z, GRID_STRIDE),
                                    sy as f64 + cell_centre_vox(yy, GRID_STRIDE),
                                    sx as f64 + cell_centre_vox(x, GRID_STRIDE),
                                ];
                                let sp = [spacing.z, spacing.y, spacing.x];
                                let mut centre = [0.0; 3];
                                for k in 0..3 {
                                    let off_mm = y[[0, base + k, z, yy, x]] * radius;
                                    centre[k] = (cell[k] + off_mm / sp[k])
                                        .clamp(0.0, dims[k] as f64 - 1.0);
                                }
                                let dlog = y[[0, base + 3, z, yy, x]]
                                    .clamp(-MAX_LOG_OFFSET, MAX_LOG_OFFSET);
                                proposals.push(Proposal {
                                    center_voxel: centre,
                                    diameter_mm: cfg.anchors_mm[a] * dlog.exp(),
                                    confidence: conf,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(nms(proposals, spacing, cfg.nms_iou, cfg.max_proposals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::nn::gradcheck::max_directional_rel_err;

    fn tiny_cfg() -> DetectorConfig {
        let mut cfg = RunConfig::desk(0).detector;
        cfg.patch_size = 16;
        cfg.stem_channels = 2;
        cfg.stage_channels = [2, 2, 2, 2];
        cfg.decoder_channels = 2;
        cfg.se_reduction = 2;
        cfg.anchors_mm = vec![5.0, 8.0];
        cfg.patches_per_scan = 2;
        cfg.batch_size = 2;
        cfg.max_epochs = 2;
        cfg.validation_fraction = 0.25;
        cfg.window_overlap = 8;
        cfg
    }

    fn unit_spacing() -> Spacing {
        Spacing::new(1.0, 1.0, 1.0)
    }


    #[test]
    fn sphere_iou_closed_form_cases() {
        let o = [0.0, 0.0, 0.0];
        assert!((sphere_iou(o, 10.0, o, 10.0) - 1.0).abs() < 1e-12);
        // One sphere inside the other: ratio of volumes = (d1/d2)^3.
        assert!((sphere_iou(o, 10.0, o, 20.0) - 0.125).abs() < 1e-12);
        // Exactly touching.
        assert_eq!(sphere_iou(o, 10.0, [10.0, 0.0, 0.0], 10.0), 0.0);
        assert_eq!(sphere_iou(o, 10.0, [30.0, 0.0, 0.0], 10.0), 0.0);
        // Symmetry.
        let a = sphere_iou(o, 8.0, [3.0, 1.0, -2.0], 14.0);
        let b = sphere_iou([3.0, 1.0, -2.0], 14.0, o, 8.0);
        assert!((a - b).abs() < 1e-12);
        // Hemisphere-overlap sanity: IoU must fall in (0, 1).
        let h = sphere_iou(o, 10.0, [5.0, 0.0, 0.0], 10.0);
        assert!(h > 0.0 && h < 1.0);
    }

    #[test]
    fn sphere_iou_matches_monte_carlo() {
        let mut rng = stream_rng(101, 0);
        let mut checked = 0;
        while checked < 5 {
            let c1 = [0.0, 0.0, 0.0];
            let d1 = rng.gen_range(4.0..12.0);
            let c2 = [
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            ];
            let d2 = rng.gen_range(4.0..12.0);
            let analytic = sphere_iou(c1, d1, c2, d2);
            if analytic < 0.05 {
                continue;
            }
            checked += 1;
            let r1 = d1 / 2.0;
            let r2 = d2 / 2.0;
            let lo: Vec<f64> = (0..3).map(|k| (c1[k] - r1).min(c2[k] - r2)).collect();
            let hi: Vec<f64> = (0..3).map(|k| (c1[k] + r1).max(c2[k] + r2)).collect();
            let mut inter = 0u64;
            let mut union = 0u64;
            for _ in 0..200_000 {
                let p = [
                    rng.gen_range(lo[0]..hi[0]),
                    rng.gen_range(lo[1]..hi[1]),
                    rng.gen_range(lo[2]..hi[2]),
                ];
                let in1 = (0..3).map(|k| (p[k] - c1[k]).powi(2)).sum::<f64>() <= r1 * r1;
                let in2 = (0..3).map(|k| (p[k] - c2[k]).powi(2)).sum::<f64>() <= r2 * r2;
                if in1 && in2 {
                    inter += 1;
                }
                if in1 || in2 {
                    union += 1;
                }
            }
            let mc = inter as f64 / union as f64;
            assert!(
                (analytic - mc).abs() < 0.02,
                "analytic {analytic} vs monte-carlo {mc} for d1={d1} d2={d2} c2={c2:?}"
            );
        }
    }

    #[test]
    fn output_grid_is_quarter_resolution() {
        let cfg = tiny_cfg();
        let mut net = DetectorNet::new(&cfg, &mut stream_rng(3, 0)).unwrap();
        for (n, side) in [(1usize, 16usize), (2, 16), (1, 32)] {
            let x = Array5::zeros((n, 1, side, side, side));
            let (y, _) = net.forward_train(x.clone());
            let g = side / GRID_STRIDE;
            let c = cfg.anchors_mm.len() * CHANNELS_PER_ANCHOR;
            assert_eq!(y.dim(), (n, c, g, g, g));
            assert_eq!(net.forward_eval(&x).dim(), (n, c, g, g, g));
        }
    }

    #[test]
    fn rejects_unsupported_grid_stride() {
        let mut cfg = tiny_cfg();
        cfg.stride = 8;
        assert!(matches!(
            DetectorNet::new(&cfg, &mut stream_rng(3, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn concentric_double_diameter_encodes_log_two() {
        let mut cfg = tiny_cfg();
        cfg.anchors_mm = vec![5.0];
        cfg.patch_size = 32;
        // Annotation dead on a cell centre so offsets are exactly zero.
        let ann = NoduleAnnotation { center_voxel: [13.5, 13.5, 13.5], diameter_mm: 10.0 };
        let t = build_targets(&[ann], unit_spacing(), cfg.patch_size, &cfg);
        let cell = [3, 3, 3];
        // Concentric 5 mm anchor vs 10 mm nodule has IoU 1/8 < positive
        // threshold, but force-matching still assigns the best anchor.
        assert_eq!(t.class[[0, cell[0], cell[1], cell[2]]], 1);
        for k in 0..3 {
            assert!(t.regression[[0, k, cell[0], cell[1], cell[2]]].abs() < 1e-12);
        }
        let dlog = t.regression[[0, 3, cell[0], cell[1], cell[2]]];
        assert!((dlog - (2.0f64).ln()).abs() < 1e-12, "log-ratio target {dlog}");
    }

    #[test]
    fn anchor_bands_positive_ignored_negative() {
        let mut cfg = tiny_cfg();
        cfg.anchors_mm = vec![10.0];
        cfg.patch_size = 32;
        let ann = NoduleAnnotation { center_voxel: [13.5, 13.5, 13.5], diameter_mm: 10.0 };
        let t = build_targets(&[ann], unit_spacing(), cfg.patch_size, &cfg);
        // Same cell, same diameter: IoU = 1 -> positive with zero targets.
        assert_eq!(t.class[[0, 3, 3, 3]], 1);
        for k in 0..4 {
            assert!(t.regression[[0, k, 3, 3, 3]].abs() < 1e-12);
        }
        // Neighbouring cell 4 mm away: IoU ≈ 0.28, between the thresholds.
        assert_eq!(t.class[[0, 2, 3, 3]], -1);
        // Far corner: IoU = 0 -> negative.
        assert_eq!(t.class[[0, 0, 0, 0]], 0);
        // Nodule-free patch: everything negative.
        let empty = build_targets(&[], unit_spacing(), cfg.patch_size, &cfg);
        assert!(empty.class.iter().all(|&c| c == 0));
    }

    fn sphere_volume_with_annotation(
        dims: [usize; 3],
        centre: [f64; 3],
        diameter: f64,
    ) -> (CtVolume, Vec<NoduleAnnotation>) {
        let r = diameter / 2.0;
        let data = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(z, y, x)| {
            let d2 = (z as f64 - centre[0]).powi(2)
                + (y as f64 - centre[1]).powi(2)
                + (x as f64 - centre[2]).powi(2);
            if d2 <= r * r {
                0.9
            } else {
                0.25
            }
        });
        let v = CtVolume::new(data, unit_spacing(), Stage::Normalized);
        (v, vec![NoduleAnnotation { center_voxel: centre, diameter_mm: diameter }])
    }

    #[test]
    fn patch_sampler_respects_positive_fraction() {
        let (vol, anns) = sphere_volume_with_annotation([32, 32, 32], [16.0, 16.0, 16.0], 6.0);
        let mut cfg = tiny_cfg();
        cfg.positive_patch_fraction = 0.7;
        let mut rng = stream_rng(5, 0);
        let n = 3000;
        let jitter = (cfg.patch_size as f64 / 8.0).max(1.0);
        let mut near_centre = 0;
        for _ in 0..n {
            let (_, inside) = sample_training_patch(&vol, &anns, &cfg, 0.0, &mut rng).unwrap();
            let centre = cfg.patch_size as f64 / 2.0;
            if inside.iter().any(|a| {
                a.center_voxel.iter().all(|&c| (c - centre).abs() <= jitter + 1.0)
            }) {
                near_centre += 1;
            }
        }
        let frac = near_centre as f64 / n as f64;
        assert!((frac - 0.7).abs() < 0.03, "positive patch fraction {frac}");
    }

    #[test]
    fn positive_patch_without_annotations_is_an_error() {
        let (vol, _) = sphere_volume_with_annotation([32, 32, 32], [16.0, 16.0, 16.0], 6.0);
        let mut cfg = tiny_cfg();
        cfg.positive_patch_fraction = 1.0;
        let mut rng = stream_rng(6, 0);
        assert!(matches!(
            sample_training_patch(&vol, &[], &cfg, 0.0, &mut rng),
            Err(Error::NoAnnotations)
        ));
    }

    #[test]
    fn window_extraction_fills_outside_voxels() {
        let data = Array3::from_shape_fn((8, 8, 8), |(z, y, x)| (z * 100 + y * 10 + x) as f64);
        let w = extract_window(&data, [-2, 0, 6], 8, -1.0);
        assert_eq!(w[[0, 0, 0]], -1.0); // z = -2 out of bounds
        assert_eq!(w[[2, 0, 0]], 6.0); // maps to data[0,0,6]
        assert_eq!(w[[2, 3, 1]], 37.0); // maps to data[0,3,7]
        assert_eq!(w[[2, 0, 2]], -1.0); // x = 8 out of bounds
        let starts = window_starts(72, 64, 32);
        assert_eq!(starts, vec![0, 8]);
        assert_eq!(window_starts(64, 64, 32), vec![0]);
        assert_eq!(window_starts(200, 64, 32), vec![0, 32, 64, 96, 128, 136]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut net = DetectorNet::new(&cfg, &mut stream_rng(7, 0)).unwrap();
        let mut rng = stream_rng(8, 0);
        // Batch of two so every batch-norm sees more than one sample per
        // channel even where the encoder bottoms out at 1x1x1.
        let patches = [
            Array3::from_shape_fn((16, 16, 16), |_| rng.gen_range(0.0..1.0)),
            Array3::from_shape_fn((16, 16, 16), |_| rng.gen_range(0.0..1.0)),
        ];
        let targets = [
            build_targets(
                &[NoduleAnnotation { center_voxel: [7.5, 7.5, 7.5], diameter_mm: 6.0 }],
                unit_spacing(),
                cfg.patch_size,
                &cfg,
            ),
            build_targets(
                &[NoduleAnnotation { center_voxel: [5.5, 9.5, 7.5], diameter_mm: 9.0 }],
                unit_spacing(),
                cfg.patch_size,
                &cfg,
            ),
        ];
        let x = stack_batch(&patches);
        let err = max_directional_rel_err(
            &mut net,
            |net, grads| {
                let (y, cache) = net.forward_train(x.clone());
                let (total, _, _, dout) = detector_loss(&y, &targets, &cfg);
                if grads {
                    net.backward(&cache, &dout);
                }
                total
            },
            9,
            4,
            1e-5,
        );
        assert!(err < 1e-3, "directional gradient error {err}");
    }

    #[test]
    fn single_patch_overfit_drives_classification_loss_down() {
        let mut cfg = tiny_cfg();
        cfg.patch_size = 32;
        cfg.stem_channels = 4;
        cfg.stage_channels = [4, 8, 8, 8];
        cfg.decoder_channels = 8;
        cfg.se_reduction = 4;
        cfg.anchors_mm = vec![5.0, 8.0, 12.0];
        let mut net = DetectorNet::new(&cfg, &mut stream_rng(11, 0)).unwrap();
        let (vol, anns) = sphere_volume_with_annotation([32, 32, 32], [13.5, 13.5, 13.5], 8.0);
        let targets = build_targets(&anns, vol.spacing, cfg.patch_size, &cfg);
        let x = stack_batch(std::slice::from_ref(&extract_window(
            &vol.data,
            [0, 0, 0],
            32,
            0.0,
        )));
        let sgd = Sgd::new(0.02, 0.02, 0.9, 0.0, 1);
        let mut cls = f64::INFINITY;
        for _ in 0..200 {
            let (y, cache) = net.forward_train(x.clone());
            let (_, c, _, dout) = detector_loss(&y, std::slice::from_ref(&targets), &cfg);
            cls = c;
            if cls < 0.01 {
                break;
            }
            net.zero_grads();
            net.backward(&cache, &dout);
            sgd.step(&mut net, 0.02);
        }
        assert!(cls < 0.01, "classification loss stuck at {cls}");
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let mut scans = Vec::new();
        for i in 0..4 {
            let (vol, anns) = sphere_volume_with_annotation(
                [16, 16, 16],
                [8.0, 8.0, 6.0 + i as f64],
                6.0,
            );
            scans.push(TrainingScan { volume: vol, annotations: anns });
        }
        let cfg = tiny_cfg();
        let (_, curve_a) = train_detector(&scans, &cfg, 0.0, 42).unwrap();
        let (_, curve_b) = train_detector(&scans, &cfg, 0.0, 42).unwrap();
        assert_eq!(curve_a, curve_b, "same seed must reproduce the loss curve exactly");
        assert_eq!(curve_a.train_loss.len(), cfg.max_epochs);
        let (_, curve_c) = train_detector(&scans, &cfg, 0.0, 43).unwrap();
        assert_ne!(curve_a.train_loss, curve_c.train_loss, "different seed should differ");
    }

    #[test]
    fn training_reports_divergence() {
        let (vol, anns) = sphere_volume_with_annotation([16, 16, 16], [8.0, 8.0, 8.0], 6.0);
        let scans = vec![
            TrainingScan { volume: vol.clone(), annotations: anns.clone() },
            TrainingScan { volume: vol, annotations: anns },
        ];
        let mut cfg = tiny_cfg();
        cfg.learning_rate = 1e9;
        cfg.min_learning_rate = 1e9;
        cfg.max_epochs = 6;
        match train_detector(&scans, &cfg, 0.0, 1) {
            Err(Error::Divergence(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zeroed_network_yields_no_proposals_above_half() {
        let cfg = tiny_cfg();
        let mut net = DetectorNet::new(&cfg, &mut stream_rng(13, 0)).unwrap();
        net.visit("", &mut |_, p| p.value.fill(0.0));
        let (vol, _) = sphere_volume_with_annotation([32, 32, 32], [16.0, 16.0, 16.0], 6.0);
        let mut high = cfg.clone();
        high.score_threshold = 0.6;
        assert!(detect_nodules(&net, &vol, &high, 0.0).unwrap().is_empty());
        // At threshold 0.4 every cell scores exactly 0.5; the cap and the
        // deterministic ordering still apply.
        let mut low = cfg.clone();
        low.score_threshold = 0.4;
        let a = detect_nodules(&net, &vol, &low, 0.0).unwrap();
        let b = detect_nodules(&net, &vol, &low, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), low.max_proposals);
        assert!(a.iter().all(|p| (p.confidence - 0.5).abs() < 1e-12));
    }

    #[test]
    fn detection_rejects_unnormalised_volumes() {
        let cfg = tiny_cfg();
        let net = DetectorNet::new(&cfg, &mut stream_rng(13, 0)).unwrap();
        let (mut vol, _) = sphere_volume_with_annotation([16, 16, 16], [8.0, 8.0, 8.0], 6.0);
        vol.stage = Stage::Raw;
        assert!(matches!(detect_nodules(&net, &vol, &cfg, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn nms_suppresses_overlaps_and_orders_by_confidence() {
        let spacing = unit_spacing();
        let mk = |c: [f64; 3], d, conf| Proposal { center_voxel: c, diameter_mm: d, confidence: conf };
        let proposals = vec![
            mk([10.0, 10.0, 10.0], 8.0, 0.7),
            mk([10.5, 10.0, 10.0], 8.0, 0.9), // overlaps the first, higher score
            mk([30.0, 10.0, 10.0], 8.0, 0.8), // far away, kept
        ];
        let kept = nms(proposals, spacing, 0.1, 5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].center_voxel, [10.5, 10.0, 10.0]);
        assert_eq!(kept[1].center_voxel, [30.0, 10.0, 10.0]);
        assert!(kept[0].confidence >= kept[1].confidence);
        // Cap applies after suppression.
        let spread: Vec<Proposal> = (0..6)
            .map(|i| mk([10.0 + 20.0 * i as f64, 10.0, 10.0], 8.0, 0.9 - 0.1 * i as f64))
            .collect();
        assert_eq!(nms(spread, spacing, 0.1, 3).len(), 3);
    }
}
