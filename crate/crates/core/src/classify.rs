//! Longitudinal malignancy scoring from three fused feature branches.
//!
//! * **nodule** — a shared 3-D encoder embeds the candidate patch from each
//!   screen; longitudinal variants run the embeddings through an LSTM in
//!   chronological order and keep the final hidden state, while the
//!   single-screen variant uses the latest embedding directly.
//! * **lung** — whole-lung context resampled onto a fixed cubic grid and
//!   stacked over time as channels.  The encoder is first trained as a
//!   standalone classifier on the same cohort, then frozen; fusion training
//!   treats its features as constants.
//! * **metadata** — nine standardised demographic and smoking features.
//!
//! The concatenated feature vector passes through a two-layer head whose
//! two logits give the malignancy score `sigmoid(l1 - l0)`, exactly the
//! softmax probability of the positive class.
//!
//! Branch combinations are selected by [`Variant`].  When a nodule-using
//! model receives a case without a candidate series (detection found
//! nothing or was disabled), the nodule slot is zeroed and the prediction
//! is flagged as a fallback; the score then depends only on the remaining
//! branches.

use ndarray::{s, Array1, Array2, Array3, Array4, Array5, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::candidate::CandidateSeries;
use crate::config::{ClassifierConfig, Variant};
use crate::detect::TrainingCurve;
use crate::metadata::{FeatureStats, MetadataRecord, FEATURE_NAMES};
use crate::nn::lstm::LstmCache;
use crate::nn::{
    avg_pool3, global_avg_pool, global_avg_pool_backward, relu, relu_backward, restore_params,
    sigmoid, snapshot_params, softmax_cross_entropy, stream_rng, ConvBlock, ConvBlockCache,
    EncoderStage, EncoderStageCache, Linear, Lstm, Param, Sgd, VisitParams,
};
use crate::volume::{CtVolume, SeriesCase};
use crate::{Error, Result};

/// A healthy cross-entropy is O(1); anything past this is runaway training
/// even when every intermediate value stays finite.
const LOSS_EXPLOSION_CAP: f64 = 1e8;

/// Channels of the whole-lung tensor: one per screen slot.
const LUNG_CHANNELS: usize = 3;

// ---------------------------------------------------------------------------
// Cases and input assembly
// ---------------------------------------------------------------------------

/// One scored unit: everything the classifier needs for a single patient.
#[derive(Debug, Clone)]
pub struct ClassifierCase {
    pub patient_id: String,
    pub label: bool,
    /// Aligned candidate patch stack; `None` when detection produced
    /// nothing for this case.
    pub series: Option<CandidateSeries>,
    /// Whole-lung volumes resampled onto the classifier grid, one per
    /// screen, chronological.
    pub lung_scans: Vec<Array3<f64>>,
    pub metadata: MetadataRecord,
}

/// Trilinear resampling of a whole volume onto an `edge`³ grid with corners
/// aligned: output corner voxels sample input corner voxels, so the field
/// of view is preserved exactly regardless of the input dimensions.
pub fn resample_to_grid(v: &CtVolume, edge: usize) -> Array3<f64> {
    let [dz, dy, dx] = v.dims();
    let step = |n: usize| if edge > 1 { (n - 1) as f64 / (edge - 1) as f64 } else { 0.0 };
    let (sz, sy, sx) = (step(dz), step(dy), step(dx));
    Array3::from_shape_fn((edge, edge, edge), |(z, y, x)| {
        v.trilinear(z as f64 * sz, y as f64 * sy, x as f64 * sx, 0.0)
    })
}

/// Resamples each screen of a preprocessed case onto the classifier's lung
/// grid and bundles it with the candidate series and metadata.
pub fn prepare_case(
    case: &SeriesCase,
    series: Option<CandidateSeries>,
    metadata: MetadataRecord,
    label: bool,
    cfg: &ClassifierConfig,
) -> ClassifierCase {
    let lung_scans = case
        .scans
        .iter()
        .map(|s| resample_to_grid(&s.volume, cfg.lung_input_dims))
        .collect();
    ClassifierCase { patient_id: case.patient_id.clone(), label, series, lung_scans, metadata }
}

/// Stacks per-screen lung grids into the fixed three-channel tensor.
/// Longitudinal layouts place screens chronologically and repeat the latest
/// into unfilled trailing channels; the single-screen layout uses the
/// latest screen in every channel.
fn lung_tensor(case: &ClassifierCase, longitudinal: bool, edge: usize) -> Result<Array4<f64>> {
    if case.lung_scans.is_empty() {
        return Err(Error::Input(format!("case {}: no lung volumes", case.patient_id)));
    }
    for scan in &case.lung_scans {
        if scan.dim() != (edge, edge, edge) {
            return Err(Error::Input(format!(
                "case {}: lung grid {:?} does not match the configured {edge}³",
                case.patient_id,
                scan.dim()
            )));
        }
        if scan.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature(format!(
                "case {}: lung grid holds a non-finite voxel",
                case.patient_id
            )));
        }
    }
    let last = case.lung_scans.len() - 1;
    let mut out = Array4::zeros((LUNG_CHANNELS, edge, edge, edge));
    for ch in 0..LUNG_CHANNELS {
        let t = if longitudinal { ch.min(last) } else { last };
        out.index_axis_mut(Axis(0), ch).assign(&case.lung_scans[t]);
    }
    Ok(out)
}

/// Batch of lung tensors for the listed case indices: `[n, 3, e, e, e]`.
fn lung_batch(
    idx: &[usize],
    cases: &[ClassifierCase],
    longitudinal: bool,
    edge: usize,
) -> Result<Array5<f64>> {
    let mut x = Array5::zeros((idx.len(), LUNG_CHANNELS, edge, edge, edge));
    for (row, &i) in idx.iter().enumerate() {
        let t = lung_tensor(&cases[i], longitudinal, edge)?;
        x.index_axis_mut(Axis(0), row).assign(&t);
    }
    Ok(x)
}

/// The patches a variant consumes from a candidate series: every screen in
/// chronological order for longitudinal models, only the latest otherwise.
fn nodule_patches<'a>(
    series: &'a CandidateSeries,
    longitudinal: bool,
    id: &str,
) -> Result<Vec<&'a Array3<f64>>> {
    if series.patches.is_empty() {
        return Err(Error::Input(format!("case {id}: candidate series holds no patches")));
    }
    let selected: Vec<&Array3<f64>> = if longitudinal {
        series.patches.iter().map(|(_, p)| p).collect()
    } else {
        vec![&series.patches.last().expect("non-empty").1]
    };
    // Catch bad voxels at the boundary: ReLU's max semantics would silently
    // turn a NaN activation into zero deeper in the network.
    for p in &selected {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature(format!(
                "case {id}: candidate patch holds a non-finite voxel"
            )));
        }
    }
    Ok(selected)
}

/// Stacks validated cubic patches into `[m, 1, p, p, p]`.
fn stack_patches(patches: &[&Array3<f64>], edge: usize, id: &str) -> Result<Array5<f64>> {
    let mut x = Array5::zeros((patches.len(), 1, edge, edge, edge));
    for (i, p) in patches.iter().enumerate() {
        if p.dim() != (edge, edge, edge) {
            return Err(Error::Input(format!(
                "case {id}: patch {:?} does not match the configured {edge}³",
                p.dim()
            )));
        }
        x.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(p);
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Branch encoders
// ---------------------------------------------------------------------------

/// Shared 3-D encoder turning one cubic nodule patch into an embedding.
/// An optional non-overlapping average pool shrinks the patch before the
/// stem so large patches stay affordable.
#[derive(Debug, Clone)]
pub struct NoduleEncoder {
    pool: usize,
    stem: ConvBlock,
    stage1: EncoderStage,
    stage2: EncoderStage,
    stage3: EncoderStage,
    fc: Linear,
}

#[derive(Debug)]
pub struct NoduleEncoderCache {
    stem: ConvBlockCache,
    s1: EncoderStageCache,
    s2: EncoderStageCache,
    s3: EncoderStageCache,
    gap_dim: (usize, usize, usize, usize, usize),
    gap: Array2<f64>,
}

impl NoduleEncoder {
    pub fn new(cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.nodule_channels;
        NoduleEncoder {
            pool: cfg.nodule_pool.max(1),
            stem: ConvBlock::new(rng, 1, c[0], 3, 1, 1),
            stage1: EncoderStage::new(rng, c[0], c[1], cfg.se_reduction),
            stage2: EncoderStage::new(rng, c[1], c[2], cfg.se_reduction),
            stage3: EncoderStage::new(rng, c[2], c[3], cfg.se_reduction),
            fc: Linear::new(rng, c[3], cfg.nodule_embedding),
        }
    }

    /// `[m, 1, p, p, p]` → `[m, embedding]` with the cache for backward.
    pub fn forward_train(&mut self, x: Array5<f64>) -> (Array2<f64>, NoduleEncoderCache) {
        let x = if self.pool > 1 { avg_pool3(&x, self.pool) } else { x };
        let (h, stem) = self.stem.forward_train(x);
        let (h, s1) = self.stage1.forward_train(h);
        let (h, s2) = self.stage2.forward_train(h);
        let (h, s3) = self.stage3.forward_train(h);
        let gap_dim = h.dim();
        let gap = global_avg_pool(&h);
        let y = self.fc.forward(&gap);
        (y, NoduleEncoderCache { stem, s1, s2, s3, gap_dim, gap })
    }

    pub fn forward_eval(&self, x: &Array5<f64>) -> Array2<f64> {
        let x = if self.pool > 1 { avg_pool3(x, self.pool) } else { x.clone() };
        let h = self.stem.forward_eval(&x);
        let h = self.stage1.forward_eval(&h);
        let h = self.stage2.forward_eval(&h);
        let h = self.stage3.forward_eval(&h);
        self.fc.forward(&global_avg_pool(&h))
    }

    /// Accumulates parameter gradients from the embedding gradient.  The
    /// encoder sits at the bottom of the network, so the input gradient is
    /// discarded.
    pub fn backward(&mut self, cache: &NoduleEncoderCache, dy: &Array2<f64>) {
        let dgap = self.fc.backward(&cache.gap, dy);
        let dh = global_avg_pool_backward(&dgap, cache.gap_dim);
        let dh = self.stage3.backward(&cache.s3, &dh);
        let dh = self.stage2.backward(&cache.s2, &dh);
        let dh = self.stage1.backward(&cache.s1, &dh);
        let _ = self.stem.backward(&cache.stem, &dh);
    }
}

impl VisitParams for NoduleEncoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        self.stage1.visit(&format!("{prefix}.stage1"), f);
        self.stage2.visit(&format!("{prefix}.stage2"), f);
        self.stage3.visit(&format!("{prefix}.stage3"), f);
        self.fc.visit(&format!("{prefix}.fc"), f);
    }
}

/// Whole-lung context encoder: three time channels in, a non-negative
/// feature vector out (ReLU on the final projection).
#[derive(Debug, Clone)]
pub struct LungEncoder {
    stem: ConvBlock,
    stage1: EncoderStage,
    stage2: EncoderStage,
    stage3: EncoderStage,
    fc: Linear,
}

#[derive(Debug)]
pub struct LungEncoderCache {
    stem: ConvBlockCache,
    s1: EncoderStageCache,
    s2: EncoderStageCache,
    s3: EncoderStageCache,
    gap_dim: (usize, usize, usize, usize, usize),
    gap: Array2<f64>,
    /// ReLU output, doubling as the backward mask.
    feats: Array2<f64>,
}

impl LungEncoder {
    pub fn new(cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.lung_channels;
        LungEncoder {
            stem: ConvBlock::new(rng, LUNG_CHANNELS, c[0], 3, 1, 1),
            stage1: EncoderStage::new(rng, c[0], c[1], cfg.se_reduction),
            stage2: EncoderStage::new(rng, c[1], c[2], cfg.se_reduction),
            stage3: EncoderStage::new(rng, c[2], c[3], cfg.se_reduction),
            fc: Linear::new(rng, c[3], cfg.lung_features),
        }
    }

    pub fn forward_train(&mut self, x: Array5<f64>) -> (Array2<f64>, LungEncoderCache) {
        let (h, stem) = self.stem.forward_train(x);
        let (h, s1) = self.stage1.forward_train(h);
        let (h, s2) = self.stage2.forward_train(h);
        let (h, s3) = self.stage3.forward_train(h);
        let gap_dim = h.dim();
        let gap = global_avg_pool(&h);
        let feats = relu(&self.fc.forward(&gap));
        (feats.clone(), LungEncoderCache { stem, s1, s2, s3, gap_dim, gap, feats })
    }

    pub fn forward_eval(&self, x: &Array5<f64>) -> Array2<f64> {
        let h = self.stem.forward_eval(x);
        let h = self.stage1.forward_eval(&h);
        let h = self.stage2.forward_eval(&h);
        let h = self.stage3.forward_eval(&h);
        relu(&self.fc.forward(&global_avg_pool(&h)))
    }

    pub fn backward(&mut self, cache: &LungEncoderCache, dy: &Array2<f64>) {
        let d = relu_backward(&cache.feats, dy);
        let dgap = self.fc.backward(&cache.gap, &d);
        let dh = global_avg_pool_backward(&dgap, cache.gap_dim);
        let dh = self.stage3.backward(&cache.s3, &dh);
        let dh = self.stage2.backward(&cache.s2, &dh);
        let dh = self.stage1.backward(&cache.s1, &dh);
        let _ = self.stem.backward(&cache.stem, &dh);
    }
}

impl VisitParams for LungEncoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        self.stage1.visit(&format!("{prefix}.stage1"), f);
        self.stage2.visit(&format!("{prefix}.stage2"), f);
        self.stage3.visit(&format!("{prefix}.stage3"), f);
        self.fc.visit(&format!("{prefix}.fc"), f);
    }
}

/// Lung encoder plus a softmax head, used for standalone pretraining.
#[derive(Debug, Clone)]
pub struct LungClassifier {
    pub encoder: LungEncoder,
    pub head: Linear,
}

pub struct LungClsCache {
    enc: LungEncoderCache,
}

impl LungClassifier {
    pub fn new(cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        LungClassifier {
            encoder: LungEncoder::new(cfg, rng),
            head: Linear::new(rng, cfg.lung_features, 2),
        }
    }

    pub fn forward_train(&mut self, x: Array5<f64>) -> (Array2<f64>, LungClsCache) {
        let (feats, enc) = self.encoder.forward_train(x);
        (self.head.forward(&feats), LungClsCache { enc })
    }

    pub fn forward_eval(&self, x: &Array5<f64>) -> Array2<f64> {
        self.head.forward(&self.encoder.forward_eval(x))
    }

    pub fn backward(&mut self, cache: &LungClsCache, dlogits: &Array2<f64>) {
        let dfeats = self.head.backward(&cache.enc.feats, dlogits);
        self.encoder.backward(&cache.enc, &dfeats);
    }

    /// Positive-class probability per row.
    pub fn scores(&self, x: &Array5<f64>) -> Array1<f64> {
        let logits = self.forward_eval(x);
        Array1::from_shape_fn(logits.nrows(), |i| sigmoid(logits[[i, 1]] - logits[[i, 0]]))
    }
}

impl VisitParams for LungClassifier {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        self.head.visit(&format!("{prefix}.head"), f);
    }
}

/// Two-layer fusion head over the concatenated branch features.
#[derive(Debug, Clone)]
pub struct FusionHead {
    fc1: Linear,
    fc2: Linear,
}

pub struct FusionCache {
    x: Array2<f64>,
    /// ReLU output of the hidden layer.
    h: Array2<f64>,
}

impl FusionHead {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        FusionHead { fc1: Linear::new(rng, input, hidden), fc2: Linear::new(rng, hidden, 2) }
    }

    pub fn input_width(&self) -> usize {
        self.fc1.input
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> (Array2<f64>, FusionCache) {
        let h = relu(&self.fc1.forward(x));
        let y = self.fc2.forward(&h);
        (y, FusionCache { x: x.clone(), h })
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        self.fc2.forward(&relu(&self.fc1.forward(x)))
    }

    pub fn backward(&mut self, cache: &FusionCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh = self.fc2.backward(&cache.h, dy);
        let da = relu_backward(&cache.h, &dh);
        self.fc1.backward(&cache.x, &da)
    }
}

impl VisitParams for FusionHead {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

// ---------------------------------------------------------------------------
// The fused model
// ---------------------------------------------------------------------------

/// The fused malignancy model for one branch combination.  Unused branches
/// are absent; the fusion input is laid out `[nodule | lung | metadata]`
/// with each slot's width fixed by the configuration.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub variant: Variant,
    /// Expected cubic nodule-patch edge.
    pub patch_size: usize,
    /// Expected lung-grid edge.
    pub lung_input_dims: usize,
    pub nodule: Option<NoduleEncoder>,
    pub lstm: Option<Lstm>,
    pub lung: Option<LungEncoder>,
    pub fusion: FusionHead,
    nodule_width: usize,
    lung_width: usize,
    meta_width: usize,
}

impl Classifier {
    pub fn new(cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let v = cfg.variant;
        let nodule = v.uses_nodule().then(|| NoduleEncoder::new(cfg, rng));
        let lstm = (v.uses_nodule() && v.longitudinal())
            .then(|| Lstm::new(rng, cfg.nodule_embedding, cfg.lstm_hidden));
        let lung = v.uses_lung().then(|| LungEncoder::new(cfg, rng));
        let nodule_width = if v.uses_nodule() {
            if v.longitudinal() {
                cfg.lstm_hidden
            } else {
                cfg.nodule_embedding
            }
        } else {
            0
        };
        let lung_width = if v.uses_lung() { cfg.lung_features } else { 0 };
        let meta_width = if v.uses_metadata() { FEATURE_NAMES.len() } else { 0 };
        let width = nodule_width + lung_width + meta_width;
        assert!(width > 0, "every variant feeds at least one branch into fusion");
        let fusion = FusionHead::new(rng, width, cfg.fusion_hidden);
        Classifier {
            variant: v,
            patch_size: cfg.patch_size,
            lung_input_dims: cfg.lung_input_dims,
            nodule,
            lstm,
            lung,
            fusion,
            nodule_width,
            lung_width,
            meta_width,
        }
    }

    /// Total width of the concatenated feature vector.
    pub fn fused_width(&self) -> usize {
        self.nodule_width + self.lung_width + self.meta_width
    }

    /// Training forward over a case batch; returns per-case class logits
    /// plus the caches the backward pass needs.
    fn forward_batch_train(
        &mut self,
        idx: &[usize],
        cases: &[ClassifierCase],
        inputs: &[CaseInputs],
    ) -> Result<(Array2<f64>, JointCache)> {
        let longitudinal = self.variant.longitudinal();
        let (nw, lw, mw) = (self.nodule_width, self.lung_width, self.meta_width);
        let patch_edge = self.patch_size;
        let nb = idx.len();
        let mut fused = Array2::zeros((nb, nw + lw + mw));
        let mut nodule_cache = None;

        if let Some(enc) = self.nodule.as_mut() {
            let mut spans: Vec<(usize, usize)> = Vec::with_capacity(nb);
            let mut refs: Vec<&Array3<f64>> = Vec::new();
            for &i in idx {
                let start = refs.len();
                if let Some(series) = &cases[i].series {
                    refs.extend(nodule_patches(series, longitudinal, &cases[i].patient_id)?);
                }
                spans.push((start, refs.len() - start));
            }
            if !refs.is_empty() {
                let x = stack_patches(&refs, patch_edge, "batch")?;
                let (emb, enc_cache) = enc.forward_train(x);
                let mut lstm_caches: Vec<Option<LstmCache>> = Vec::with_capacity(nb);
                for (bi, &(start, len)) in spans.iter().enumerate() {
                    if len == 0 {
                        lstm_caches.push(None);
                        continue;
                    }
                    if longitudinal {
                        let xs = emb.slice(s![start..start + len, ..]).to_owned();
                        let (h, cache) = self.lstm.as_ref().expect("longitudinal model").forward(&xs);
                        fused.slice_mut(s![bi, 0..nw]).assign(&h);
                        lstm_caches.push(Some(cache));
                    } else {
                        fused.slice_mut(s![bi, 0..nw]).assign(&emb.row(start));
                        lstm_caches.push(None);
                    }
                }
                nodule_cache = Some(NoduleBatchCache {
                    enc: enc_cache,
                    emb_dim: emb.dim(),
                    spans,
                    lstm: lstm_caches,
                });
            }
        }

        for (bi, &i) in idx.iter().enumerate() {
            let inp = &inputs[i];
            if lw > 0 {
                debug_assert_eq!(inp.lung.len(), lw);
                fused.slice_mut(s![bi, nw..nw + lw]).assign(&inp.lung);
            }
            if mw > 0 {
                debug_assert_eq!(inp.meta.len(), mw);
                fused.slice_mut(s![bi, nw + lw..nw + lw + mw]).assign(&inp.meta);
            }
        }
        for (bi, &i) in idx.iter().enumerate() {
            check_finite_row(&cases[i].patient_id, fused.row(bi))?;
        }

        let (logits, fusion_cache) = self.fusion.forward_train(&fused);
        Ok((logits, JointCache { fusion: fusion_cache, nodule: nodule_cache }))
    }

    /// Accumulates gradients in the trainable (non-lung) parts.
    fn backward_batch(&mut self, cache: &JointCache, dlogits: &Array2<f64>) {
        let longitudinal = self.variant.longitudinal();
        let nw = self.nodule_width;
        let dfused = self.fusion.backward(&cache.fusion, dlogits);
        if let Some(nc) = &cache.nodule {
            let mut demb = Array2::zeros(nc.emb_dim);
            for (bi, &(start, len)) in nc.spans.iter().enumerate() {
                if len == 0 {
                    continue;
                }
                let dslot = dfused.slice(s![bi, 0..nw]).to_owned();
                if longitudinal {
                    let lstm_cache = nc.lstm[bi].as_ref().expect("cache for longitudinal case");
                    let dxs =
                        self.lstm.as_mut().expect("longitudinal model").backward(lstm_cache, &dslot);
                    demb.slice_mut(s![start..start + len, ..]).assign(&dxs);
                } else {
                    demb.row_mut(start).assign(&dslot);
                }
            }
            self.nodule.as_mut().expect("nodule cache implies encoder").backward(&nc.enc, &demb);
        }
    }

    /// Inference forward over a case batch, producing per-case logits.
    fn forward_batch_eval(
        &self,
        idx: &[usize],
        cases: &[ClassifierCase],
        inputs: &[CaseInputs],
    ) -> Result<Array2<f64>> {
        let longitudinal = self.variant.longitudinal();
        let (nw, lw, mw) = (self.nodule_width, self.lung_width, self.meta_width);
        let nb = idx.len();
        let mut fused = Array2::zeros((nb, nw + lw + mw));

        if let Some(enc) = &self.nodule {
            for (bi, &i) in idx.iter().enumerate() {
                if let Some(series) = &cases[i].series {
                    let patches = nodule_patches(series, longitudinal, &cases[i].patient_id)?;
                    let x = stack_patches(&patches, self.patch_size, &cases[i].patient_id)?;
                    let emb = enc.forward_eval(&x);
                    if longitudinal {
                        let (h, _) = self.lstm.as_ref().expect("longitudinal model").forward(&emb);
                        fused.slice_mut(s![bi, 0..nw]).assign(&h);
                    } else {
                        fused.slice_mut(s![bi, 0..nw]).assign(&emb.row(emb.nrows() - 1));
                    }
                }
            }
        }
        for (bi, &i) in idx.iter().enumerate() {
            let inp = &inputs[i];
            if lw > 0 {
                fused.slice_mut(s![bi, nw..nw + lw]).assign(&inp.lung);
            }
            if mw > 0 {
                fused.slice_mut(s![bi, nw + lw..nw + lw + mw]).assign(&inp.meta);
            }
        }
        for (bi, &i) in idx.iter().enumerate() {
            check_finite_row(&cases[i].patient_id, fused.row(bi))?;
        }
        Ok(self.fusion.forward_eval(&fused))
    }
}

impl VisitParams for Classifier {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        if let Some(n) = &mut self.nodule {
            n.visit(&format!("{prefix}.nodule"), f);
        }
        if let Some(l) = &mut self.lstm {
            l.visit(&format!("{prefix}.lstm"), f);
        }
        if let Some(l) = &mut self.lung {
            l.visit(&format!("{prefix}.lung"), f);
        }
        self.fusion.visit(&format!("{prefix}.fusion"), f);
    }
}

/// Training view of a [`Classifier`] that hides the frozen lung encoder
/// from the optimiser, snapshots and gradient checks.
struct JointView<'a>(&'a mut Classifier);

impl VisitParams for JointView<'_> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        if let Some(n) = &mut self.0.nodule {
            n.visit(&format!("{prefix}.nodule"), f);
        }
        if let Some(l) = &mut self.0.lstm {
            l.visit(&format!("{prefix}.lstm"), f);
        }
        self.0.fusion.visit(&format!("{prefix}.fusion"), f);
    }
}

struct NoduleBatchCache {
    enc: NoduleEncoderCache,
    emb_dim: (usize, usize),
    /// Row range of each batch case within the embedding matrix; a length
    /// of zero marks a fallback case whose nodule slot stays zero.
    spans: Vec<(usize, usize)>,
    lstm: Vec<Option<LstmCache>>,
}

struct JointCache {
    fusion: FusionCache,
    nodule: Option<NoduleBatchCache>,
}

/// Per-case constant inputs resolved once per training run: frozen lung
/// features and encoded metadata (empty when the branch is unused).
struct CaseInputs {
    lung: Array1<f64>,
    meta: Array1<f64>,
}

fn check_finite_row(id: &str, row: ndarray::ArrayView1<f64>) -> Result<()> {
    for (k, &v) in row.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteFeature(format!(
                "case {id}: fused feature {k} is {v}"
            )));
        }
    }
    Ok(())
}

/// Computes the constant branch inputs for every case: lung features via
/// the frozen encoder (batched) and standardised metadata.
fn resolve_inputs(
    net: &Classifier,
    stats: &FeatureStats,
    cases: &[ClassifierCase],
    chunk: usize,
) -> Result<Vec<CaseInputs>> {
    let mut out: Vec<CaseInputs> = (0..cases.len())
        .map(|_| CaseInputs { lung: Array1::zeros(0), meta: Array1::zeros(0) })
        .collect();
    if let Some(enc) = &net.lung {
        let idx: Vec<usize> = (0..cases.len()).collect();
        for ch in idx.chunks(chunk.max(1)) {
            let x = lung_batch(ch, cases, net.variant.longitudinal(), net.lung_input_dims)?;
            let feats = enc.forward_eval(&x);
            for (row, &i) in ch.iter().enumerate() {
                out[i].lung = feats.row(row).to_owned();
            }
        }
    }
    if net.variant.uses_metadata() {
        for (i, c) in cases.iter().enumerate() {
            out[i].meta = Array1::from(stats.encode(&c.metadata)?.to_vec());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Which branches actually contributed to a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UsedBranches {
    pub nodule: bool,
    pub lung: bool,
    pub metadata: bool,
}

impl std::fmt::Display for UsedBranches {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.nodule {
            parts.push("NODULE");
        }
        if self.lung {
            parts.push("LUNG");
        }
        if self.metadata {
            parts.push("METADATA");
        }
        if parts.is_empty() {
            parts.push("NONE");
        }
        write!(f, "{}", parts.join("+"))
    }
}

/// One scored case.
#[derive(Debug, Clone)]
pub struct MalignancyPrediction {
    pub patient_id: String,
    /// Probability of malignancy in `[0, 1]`.
    pub score: f64,
    pub used_branches: UsedBranches,
    /// True when a nodule-using model scored the case without a candidate
    /// series.
    pub fallback: bool,
}

/// A classifier ready to score cases: network weights plus the metadata
/// encoding statistics frozen on its training set.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub net: Classifier,
    pub stats: FeatureStats,
}

/// Scores one case.  Missing candidate series on nodule-using variants
/// zero the nodule slot and set the fallback flag rather than failing.
pub fn predict(model: &TrainedClassifier, case: &ClassifierCase) -> Result<MalignancyPrediction> {
    let net = &model.net;
    let cases = std::slice::from_ref(case);
    let inputs = resolve_inputs(net, &model.stats, cases, 1)?;
    let logits = net.forward_batch_eval(&[0], cases, &inputs)?;
    let score = sigmoid(logits[[0, 1]] - logits[[0, 0]]);
    let has_series = case.series.is_some();
    Ok(MalignancyPrediction {
        patient_id: case.patient_id.clone(),
        score,
        used_branches: UsedBranches {
            nodule: net.variant.uses_nodule() && has_series,
            lung: net.variant.uses_lung(),
            metadata: net.variant.uses_metadata(),
        },
        fallback: net.variant.uses_nodule() && !has_series,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Loss curves from the staged training protocol.
#[derive(Debug, Clone)]
pub struct ClassifierCurves {
    /// Standalone lung pretraining; absent for variants without the branch
    /// or when a pretrained encoder was supplied.
    pub lung: Option<TrainingCurve>,
    /// Joint training of the nodule branch, LSTM and fusion head.
    pub joint: TrainingCurve,
}

fn validation_split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let (val, train) = order.split_at(n_val);
    (val.to_vec(), train.to_vec())
}

/// Trains the lung branch as a standalone classifier on whole-lung tensors.
/// Deterministic in `(cases, cfg, seed)`; restores the best-validation
/// parameters before returning.
pub fn pretrain_lung(
    cases: &[ClassifierCase],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(LungClassifier, TrainingCurve)> {
    if cases.is_empty() {
        return Err(Error::Input("lung pretraining requires at least one case".into()));
    }
    let longitudinal = cfg.variant.longitudinal();
    let edge = cfg.lung_input_dims;
    let mut net = LungClassifier::new(cfg, &mut stream_rng(seed, 60));
    let mut rng = stream_rng(seed, 61);
    let (val_idx, train_idx) = validation_split(cases.len(), cfg.validation_fraction, &mut rng);

    let sgd = Sgd::new(
        cfg.learning_rate,
        cfg.min_learning_rate,
        cfg.momentum,
        cfg.weight_decay,
        cfg.lung_max_epochs,
    );
    let mut curve = TrainingCurve { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0 };
    let mut best = f64::INFINITY;
    let mut best_snap = None;
    let batch = cfg.lung_batch_size.max(1);

    for epoch in 0..cfg.lung_max_epochs {
        let lr = sgd.lr_at(epoch);
        let mut idx = train_idx.clone();
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for chunk in idx.chunks(batch) {
            let x = lung_batch(chunk, cases, longitudinal, edge)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| usize::from(cases[i].label)).collect();
            let (logits, cache) = net.forward_train(x);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &targets);
            if !loss.is_finite() || loss > LOSS_EXPLOSION_CAP {
                return Err(Error::Divergence(format!(
                    "lung pretraining loss {loss:.3e} at epoch {epoch}"
                )));
            }
            net.zero_grads();
            net.backward(&cache, &dlogits);
            sgd.step(&mut net, lr);
            loss_sum += loss * chunk.len() as f64;
            n += chunk.len();
        }
        let train_loss = if n > 0 { loss_sum / n as f64 } else { 0.0 };
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let mut s = 0.0;
            for chunk in val_idx.chunks(batch) {
                let x = lung_batch(chunk, cases, longitudinal, edge)?;
                let targets: Vec<usize> =
                    chunk.iter().map(|&i| usize::from(cases[i].label)).collect();
                let logits = net.forward_eval(&x);
                s += softmax_cross_entropy(&logits, &targets).0 * chunk.len() as f64;
            }
            s / val_idx.len() as f64
        };
        if !val_loss.is_finite() || val_loss > LOSS_EXPLOSION_CAP {
            return Err(Error::Divergence(format!(
                "lung validation loss {val_loss:.3e} at epoch {epoch}"
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

/// Staged training: metadata encoding statistics are frozen on the cohort,
/// the lung branch is pretrained standalone (or adopted from `pretrained`)
/// and frozen, then the nodule encoder, LSTM and fusion head train jointly
/// against cross-entropy with the frozen-branch features as constants.
/// Deterministic in `(cases, cfg, seed, pretrained)`.
pub fn train_classifier_with_lung(
    cases: &[ClassifierCase],
    cfg: &ClassifierConfig,
    seed: u64,
    pretrained: Option<&LungEncoder>,
) -> Result<(TrainedClassifier, ClassifierCurves)> {
    if cases.is_empty() {
        return Err(Error::Input("classifier training requires at least one case".into()));
    }
    let positives = cases.iter().filter(|c| c.label).count();
    if positives == 0 || positives == cases.len() {
        return Err(Error::DegenerateLabels);
    }
    let records: Vec<MetadataRecord> = cases.iter().map(|c| c.metadata.clone()).collect();
    let stats = FeatureStats::fit(&records)?;

    let (lung, lung_curve) = if cfg.variant.uses_lung() {
        match pretrained {
            Some(enc) => (Some(enc.clone()), None),
            None => {
                let (lc, curve) = pretrain_lung(cases, cfg, seed)?;
                (Some(lc.encoder), Some(curve))
            }
        }
    } else {
        (None, None)
    };

    let mut net = Classifier::new(cfg, &mut stream_rng(seed, 63));
    net.lung = lung;
    let inputs = resolve_inputs(&net, &stats, cases, cfg.lung_batch_size.max(1))?;

    let mut rng = stream_rng(seed, 64);
    let (val_idx, train_idx) = validation_split(cases.len(), cfg.validation_fraction, &mut rng);

    let sgd = Sgd::new(
        cfg.learning_rate,
        cfg.min_learning_rate,
        cfg.momentum,
        cfg.weight_decay,
        cfg.max_epochs,
    );
    let mut curve = TrainingCurve { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0 };
    let mut best = f64::INFINITY;
    let mut best_snap = None;
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.max_epochs {
        let lr = sgd.lr_at(epoch);
        let mut idx = train_idx.clone();
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for chunk in idx.chunks(batch) {
            let targets: Vec<usize> = chunk.iter().map(|&i| usize::from(cases[i].label)).collect();
            let (logits, cache) = net.forward_batch_train(chunk, cases, &inputs)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &targets);
            if !loss.is_finite() || loss > LOSS_EXPLOSION_CAP {
                return Err(Error::Divergence(format!(
                    "fusion training loss {loss:.3e} at epoch {epoch}"
                )));
            }
            JointView(&mut net).zero_grads();
            net.backward_batch(&cache, &dlogits);
            sgd.step(&mut JointView(&mut net), lr);
            loss_sum += loss * chunk.len() as f64;
            n += chunk.len();
        }
        let train_loss = if n > 0 { loss_sum / n as f64 } else { 0.0 };
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let targets: Vec<usize> =
                val_idx.iter().map(|&i| usize::from(cases[i].label)).collect();
            let logits = net.forward_batch_eval(&val_idx, cases, &inputs)?;
            softmax_cross_entropy(&logits, &targets).0
        };
        if !val_loss.is_finite() || val_loss > LOSS_EXPLOSION_CAP {
            return Err(Error::Divergence(format!(
                "fusion validation loss {val_loss:.3e} at epoch {epoch}"
            )));
        }
        curve.train_loss.push(train_loss);
        curve.val_loss.push(val_loss);
        if val_loss < best {
            best = val_loss;
            curve.best_epoch = epoch;
            best_snap = Some(snapshot_params(&mut JointView(&mut net)));
        }
    }
    if let Some(snap) = &best_snap {
        restore_params(&mut JointView(&mut net), snap);
    }
    Ok((TrainedClassifier { net, stats }, ClassifierCurves { lung: lung_curve, joint: curve }))
}

/// [`train_classifier_with_lung`] with the lung branch pretrained in-run.
pub fn train_classifier(
    cases: &[ClassifierCase],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(TrainedClassifier, ClassifierCurves)> {
    train_classifier_with_lung(cases, cfg, seed, None)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::compute_metrics;
    use crate::nn::gradcheck::max_directional_rel_err;
    use crate::volume::{Spacing, Stage, TimepointScan};
    use rand::Rng;

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            variant: Variant::NlmL,
            patch_size: 9,
            nodule_pool: 1,
            nodule_channels: [2, 3, 3, 4],
            nodule_embedding: 6,
            lstm_hidden: 6,
            lung_input_dims: 10,
            lung_channels: [2, 3, 3, 4],
            lung_features: 8,
            fusion_hidden: 8,
            se_reduction: 2,
            batch_size: 2,
            lung_batch_size: 4,
            learning_rate: 2e-2,
            min_learning_rate: 2e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_epochs: 200,
            lung_max_epochs: 25,
            validation_fraction: 0.0,
        }
    }

    fn record(pack_years: f64) -> MetadataRecord {
        MetadataRecord {
            education: 3,
            pack_years,
            age: 60.0,
            race: 1,
            gender: 1,
            ethnicity: 0,
            smoking_status: 1,
            smoking_years: 30.0,
            cigs_per_day: 15.0,
            extra: Default::default(),
        }
    }

    /// A separable synthetic case: positives carry a growing bright core in
    /// the patches, a bright lung blob and heavy smoking history.
    fn synthetic_case(
        id: &str,
        label: bool,
        screens: usize,
        cfg: &ClassifierConfig,
        seed: u64,
    ) -> ClassifierCase {
        let mut rng = stream_rng(seed, 50);
        let p = cfg.patch_size;
        let e = cfg.lung_input_dims;
        let c = p / 2;
        let patches = (0..screens)
            .map(|t| {
                let mut a = Array3::from_shape_fn((p, p, p), |_| rng.gen_range(0.0..0.05));
                let r = if label { 1 + t.min(c - 1) } else { 1 };
                let bright = if label { 0.45 + 0.15 * t as f64 } else { 0.3 };
                for z in c - r..=c + r {
                    for y in c - r..=c + r {
                        for x in c - r..=c + r {
                            a[[z, y, x]] = bright;
                        }
                    }
                }
                (t, a)
            })
            .collect();
        let lung_scans = (0..screens)
            .map(|t| {
                let mut g = Array3::from_shape_fn((e, e, e), |_| rng.gen_range(0.0..0.05));
                if label {
                    let q = e / 4;
                    for z in q..q + 2 {
                        for y in q..q + 2 {
                            for x in q..q + 2 {
                                g[[z, y, x]] = 0.5 + 0.1 * t as f64;
                            }
                        }
                    }
                }
                g
            })
            .collect();
        ClassifierCase {
            patient_id: id.into(),
            label,
            series: Some(CandidateSeries {
                center_voxel: [c; 3],
                patches,
                source_confidence: 0.9,
            }),
            lung_scans,
            metadata: record(if label { 45.0 + seed as f64 % 7.0 } else { 12.0 + seed as f64 % 7.0 }),
        }
    }

    fn four_case_cohort(cfg: &ClassifierConfig) -> Vec<ClassifierCase> {
        vec![
            synthetic_case("p1", true, 3, cfg, 1),
            synthetic_case("p2", true, 2, cfg, 2),
            synthetic_case("p3", false, 3, cfg, 3),
            synthetic_case("p4", false, 2, cfg, 4),
        ]
    }

    #[test]
    fn resampling_aligns_corners_and_preserves_constants() {
        let data = Array3::from_shape_fn((8, 10, 12), |(z, y, x)| {
            z as f64 * 100.0 + y as f64 * 10.0 + x as f64
        });
        let v = CtVolume::new(data, Spacing::new(1.0, 1.0, 1.0), Stage::Normalized);
        let g = resample_to_grid(&v, 5);
        assert_eq!(g.dim(), (5, 5, 5));
        assert!((g[[0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((g[[4, 4, 4]] - (700.0 + 90.0 + 11.0)).abs() < 1e-9);

        let flat = CtVolume::new(
            Array3::from_elem((6, 6, 6), 0.37),
            Spacing::new(1.0, 1.0, 1.0),
            Stage::Normalized,
        );
        let g = resample_to_grid(&flat, 4);
        assert!(g.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn lung_stack_replicates_the_latest_screen() {
        let cfg = tiny_cfg();
        let e = cfg.lung_input_dims;
        let mk = |fill: f64| Array3::from_elem((e, e, e), fill);
        let case = |scans: Vec<Array3<f64>>| ClassifierCase {
            patient_id: "p".into(),
            label: false,
            series: None,
            lung_scans: scans,
            metadata: record(10.0),
        };

        // Two screens, longitudinal: channels are [T0, T1, T1].
        let t = lung_tensor(&case(vec![mk(0.1), mk(0.2)]), true, e).unwrap();
        assert_eq!(t.index_axis(Axis(0), 0)[[0, 0, 0]], 0.1);
        assert_eq!(t.index_axis(Axis(0), 1)[[0, 0, 0]], 0.2);
        assert_eq!(t.index_axis(Axis(0), 2)[[0, 0, 0]], 0.2);

        // Latest-only layout uses the final screen everywhere.
        let t = lung_tensor(&case(vec![mk(0.1), mk(0.2), mk(0.3)]), false, e).unwrap();
        for ch in 0..3 {
            assert_eq!(t.index_axis(Axis(0), ch)[[0, 0, 0]], 0.3);
        }

        // A single screen replicates identically under both layouts.
        let a = lung_tensor(&case(vec![mk(0.7)]), true, e).unwrap();
        let b = lung_tensor(&case(vec![mk(0.7)]), false, e).unwrap();
        assert_eq!(a, b);

        // Wrong grid size is rejected with the case named.
        let bad = case(vec![Array3::zeros((3, 3, 3))]);
        assert!(matches!(lung_tensor(&bad, true, e), Err(Error::Input(_))));
    }

    #[test]
    fn prepared_cases_carry_per_screen_lung_grids() {
        let cfg = tiny_cfg();
        let scans = (0..2)
            .map(|t| TimepointScan {
                months: t as f64 * 12.0,
                volume: CtVolume::new(
                    Array3::from_elem((20, 22, 24), t as f64),
                    Spacing::new(1.0, 1.0, 1.0),
                    Stage::Normalized,
                ),
            })
            .collect();
        let case = SeriesCase::new("p9".into(), scans).unwrap();
        let prepared = prepare_case(&case, None, record(5.0), true, &cfg);
        assert_eq!(prepared.patient_id, "p9");
        assert!(prepared.label);
        assert_eq!(prepared.lung_scans.len(), 2);
        let e = cfg.lung_input_dims;
        for (t, g) in prepared.lung_scans.iter().enumerate() {
            assert_eq!(g.dim(), (e, e, e));
            assert!(g.iter().all(|&v| (v - t as f64).abs() < 1e-12));
        }
    }

    #[test]
    fn variant_branch_widths_follow_the_config() {
        let mut cfg = tiny_cfg();
        let mut width = |v: Variant| {
            cfg.variant = v;
            Classifier::new(&cfg, &mut stream_rng(3, 0)).fused_width()
        };
        let meta = FEATURE_NAMES.len();
        assert_eq!(width(Variant::NlmL), 6 + 8 + meta);
        // Equal LSTM and embedding widths keep the two fused layouts equal.
        assert_eq!(width(Variant::NlmS), width(Variant::NlmL));
        assert_eq!(width(Variant::NL), 6);
        assert_eq!(width(Variant::LL), 8);
    }

    #[test]
    fn zeroed_fusion_output_layer_scores_exactly_half() {
        let cfg = tiny_cfg();
        let mut net = Classifier::new(&cfg, &mut stream_rng(5, 0));
        // Zero the output layer: both logits collapse to the same bias.
        net.fusion.fc2.w.value.fill(0.0);
        net.fusion.fc2.b.value.fill(0.0);
        let model = TrainedClassifier {
            net,
            stats: FeatureStats::fit(&[record(10.0), record(30.0), record(50.0)]).unwrap(),
        };
        let case = synthetic_case("p1", true, 3, &cfg, 11);
        let pred = predict(&model, &case).unwrap();
        assert_eq!(pred.score, 0.5);

        // Any shared bias shift leaves the score untouched: only the logit
        // difference matters.
        let mut shifted = model.clone();
        shifted.net.fusion.fc2.b.value.fill(3.25);
        assert_eq!(predict(&shifted, &case).unwrap().score, 0.5);
    }

    #[test]
    fn reversing_screen_order_changes_the_score() {
        let cfg = tiny_cfg();
        let net = Classifier::new(&cfg, &mut stream_rng(7, 0));
        let model = TrainedClassifier {
            net,
            stats: FeatureStats::fit(&[record(10.0), record(30.0), record(50.0)]).unwrap(),
        };
        let case = synthetic_case("p1", true, 3, &cfg, 13);
        let mut reversed = case.clone();
        let series = reversed.series.as_mut().unwrap();
        let mut patches: Vec<Array3<f64>> =
            series.patches.iter().map(|(_, p)| p.clone()).collect();
        patches.reverse();
        series.patches = patches.into_iter().enumerate().collect();

        let a = predict(&model, &case).unwrap().score;
        let b = predict(&model, &reversed).unwrap().score;
        assert!((a - b).abs() > 1e-9, "screen order should matter: {a} vs {b}");

        // Scoring the same case twice is bit-identical.
        assert_eq!(a, predict(&model, &case).unwrap().score);
    }

    #[test]
    fn single_screen_series_is_well_defined() {
        let cfg = tiny_cfg();
        let net = Classifier::new(&cfg, &mut stream_rng(9, 0));
        let model = TrainedClassifier {
            net,
            stats: FeatureStats::fit(&[record(10.0), record(30.0), record(50.0)]).unwrap(),
        };
        let case = synthetic_case("p1", true, 1, &cfg, 17);
        let pred = predict(&model, &case).unwrap();
        assert!(pred.score.is_finite() && (0.0..=1.0).contains(&pred.score));
        assert!(pred.used_branches.nodule && pred.used_branches.lung && pred.used_branches.metadata);
        assert!(!pred.fallback);
    }

    #[test]
    fn fallback_scores_ignore_the_nodule_weights() {
        let cfg = tiny_cfg();
        let net = Classifier::new(&cfg, &mut stream_rng(21, 0));
        let model = TrainedClassifier {
            net,
            stats: FeatureStats::fit(&[record(10.0), record(30.0), record(50.0)]).unwrap(),
        };
        let mut case = synthetic_case("p1", true, 3, &cfg, 23);
        case.series = None;

        let before = predict(&model, &case).unwrap();
        assert!(before.fallback);
        assert!(!before.used_branches.nodule);
        assert!(before.used_branches.lung && before.used_branches.metadata);
        assert_eq!(format!("{}", before.used_branches), "LUNG+METADATA");

        // Scramble every nodule-branch and LSTM parameter; the score must
        // not move because the nodule slot is zeroed.
        let mut scrambled = model.clone();
        let mut rng = stream_rng(99, 0);
        scrambled.net.nodule.as_mut().unwrap().visit("", &mut |_, p| {
            p.value.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        });
        scrambled.net.lstm.as_mut().unwrap().visit("", &mut |_, p| {
            p.value.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        });
        let after = predict(&scrambled, &case).unwrap();
        assert_eq!(before.score.to_bits(), after.score.to_bits());
    }

    #[test]
    fn non_finite_patch_values_are_rejected() {
        let cfg = tiny_cfg();
        let net = Classifier::new(&cfg, &mut stream_rng(25, 0));
        let model = TrainedClassifier {
            net,
            stats: FeatureStats::fit(&[record(10.0), record(30.0), record(50.0)]).unwrap(),
        };
        let mut case = synthetic_case("p1", true, 2, &cfg, 27);
        case.series.as_mut().unwrap().patches[1].1[[0, 0, 0]] = f64::NAN;
        assert!(matches!(predict(&model, &case), Err(Error::NonFiniteFeature(_))));
    }

    /// Wrapper exposing exactly the jointly-trained parameters to the
    /// gradient checker.
    struct TrainView {
        net: Classifier,
    }

    impl VisitParams for TrainView {
        fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
            JointView(&mut self.net).visit(prefix, f);
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let cases =
            vec![synthetic_case("p1", true, 3, &cfg, 31), synthetic_case("p2", false, 2, &cfg, 32)];
        let stats = FeatureStats::fit(&[record(10.0), record(30.0), record(50.0)]).unwrap();
        let net = Classifier::new(&cfg, &mut stream_rng(33, 0));
        let inputs = resolve_inputs(&net, &stats, &cases, 4).unwrap();
        let targets = vec![1usize, 0];
        let mut view = TrainView { net };

        let loss = |view: &mut TrainView, grads: bool| -> f64 {
            // Batch-norm running statistics drift with every training-mode
            // forward; keep them pinned so the loss depends on parameters
            // only (they never feed the training-mode forward anyway).
            let snap = snapshot_params(&mut view.net);
            let (logits, cache) = view.net.forward_batch_train(&[0, 1], &cases, &inputs).unwrap();
            let (l, dl) = softmax_cross_entropy(&logits, &targets);
            if grads {
                view.net.backward_batch(&cache, &dl);
            }
            restore_params(&mut view.net, &snap);
            l
        };
        let err = max_directional_rel_err(&mut view, loss, 41, 4, 1e-5);
        assert!(err < 1e-4, "directional gradient error {err}");
    }

    #[test]
    fn four_case_overfit_reaches_near_zero_loss() {
        let cfg = tiny_cfg();
        let cases = four_case_cohort(&cfg);
        let (model, curves) = train_classifier(&cases, &cfg, 77).unwrap();
        let final_loss = *curves.joint.train_loss.last().unwrap();
        assert!(final_loss < 0.05, "joint loss should collapse, got {final_loss}");
        assert!(curves.lung.is_some(), "lung pretraining runs for this variant");

        let scores: Vec<f64> =
            cases.iter().map(|c| predict(&model, c).unwrap().score).collect();
        let min_pos = scores[0].min(scores[1]);
        let max_neg = scores[2].max(scores[3]);
        assert!(
            min_pos > max_neg,
            "positives should outrank negatives: {scores:?}"
        );
        assert!(min_pos > 0.75 && max_neg < 0.25, "margins should be wide: {scores:?}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let mut cfg = tiny_cfg();
        cfg.max_epochs = 8;
        cfg.lung_max_epochs = 4;
        let cases = four_case_cohort(&cfg);

        let weights = |m: &mut TrainedClassifier| {
            let mut v = Vec::new();
            m.net.visit("net", &mut |_, p| v.extend(p.value.iter().cloned()));
            v
        };
        let (mut a, _) = train_classifier(&cases, &cfg, 5).unwrap();
        let (mut b, _) = train_classifier(&cases, &cfg, 5).unwrap();
        let wa = weights(&mut a);
        let wb = weights(&mut b);
        assert_eq!(wa.len(), wb.len());
        assert!(wa.iter().zip(&wb).all(|(x, y)| x.to_bits() == y.to_bits()));

        let (mut c, _) = train_classifier(&cases, &cfg, 6).unwrap();
        let wc = weights(&mut c);
        assert!(wa.iter().zip(&wc).any(|(x, y)| x.to_bits() != y.to_bits()));
    }

    #[test]
    fn joint_training_leaves_the_lung_encoder_frozen() {
        let mut cfg = tiny_cfg();
        cfg.max_epochs = 6;
        cfg.lung_max_epochs = 4;
        let cases = four_case_cohort(&cfg);
        let (mut pre, _) = pretrain_lung(&cases, &cfg, 42).unwrap();
        let frozen = snapshot_params(&mut pre.encoder);

        let (mut model, curves) =
            train_classifier_with_lung(&cases, &cfg, 42, Some(&pre.encoder)).unwrap();
        assert!(curves.lung.is_none(), "supplied encoders skip pretraining");
        let after = snapshot_params(model.net.lung.as_mut().unwrap());
        assert_eq!(frozen.len(), after.len());
        for (x, y) in frozen.iter().zip(&after) {
            assert_eq!(x, y, "joint training must not touch the lung branch");
        }
    }

    #[test]
    fn lung_pretraining_separates_blob_cohorts() {
        let mut cfg = tiny_cfg();
        cfg.variant = Variant::LL;
        cfg.lung_max_epochs = 20;
        cfg.validation_fraction = 0.2;
        let make = |n: usize, offset: u64| -> Vec<ClassifierCase> {
            (0..n)
                .map(|i| {
                    let label = i % 2 == 0;
                    let mut c = synthetic_case(
                        &format!("q{offset}{i}"),
                        label,
                        1,
                        &cfg,
                        offset + i as u64,
                    );
                    c.series = None;
                    c
                })
                .collect()
        };
        let train = make(24, 100);
        let test = make(12, 500);
        let (net, curve) = pretrain_lung(&train, &cfg, 7).unwrap();
        assert_eq!(curve.train_loss.len(), 20);

        let idx: Vec<usize> = (0..test.len()).collect();
        let x = lung_batch(&idx, &test, true, cfg.lung_input_dims).unwrap();
        let scores = net.scores(&x).to_vec();
        let labels: Vec<bool> = test.iter().map(|c| c.label).collect();
        let report = compute_metrics(&scores, &labels, 0.5).unwrap();
        let auc = report.auc.unwrap();
        assert!(auc >= 0.9, "blob cohorts should separate cleanly, AUC {auc}");
    }

    #[test]
    fn degenerate_cohorts_are_rejected() {
        let cfg = tiny_cfg();
        assert!(matches!(
            train_classifier(&[], &cfg, 1),
            Err(Error::Input(_))
        ));
        let all_pos: Vec<ClassifierCase> =
            (0..3).map(|i| synthetic_case(&format!("p{i}"), true, 2, &cfg, i)).collect();
        assert!(matches!(
            train_classifier(&all_pos, &cfg, 1),
            Err(Error::DegenerateLabels)
        ));
    }
}
