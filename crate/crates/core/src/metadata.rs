//! Clinical covariates: the nine-feature record, its numeric encoding and
//! the covariate-only baseline models.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::BaselineConfig;
use crate::nn::{sigmoid, stream_rng};
use crate::{Error, Result};

/// The nine screening covariates carried per case. Categorical fields use
/// small integer codes; continuous fields stay physical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    /// Highest education level, coded 1..=8.
    pub education: u8,
    pub pack_years: f64,
    pub age: f64,
    /// Race, coded 1..=7.
    pub race: u8,
    /// 1 male, 2 female.
    pub gender: u8,
    /// Ethnicity, coded 1..=2.
    pub ethnicity: u8,
    /// Smoking status at the first screen: 0 former, 1 current.
    pub smoking_status: u8,
    pub smoking_years: f64,
    pub cigs_per_day: f64,
    /// Attributes carried through ingestion but used by no model.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

pub const FEATURE_NAMES: [&str; 9] = [
    "education",
    "pack_year_tertile",
    "age",
    "race",
    "gender",
    "ethnicity",
    "smoking_status",
    "smoking_years",
    "cigs_per_day",
];

/// Field names as they appear in CSV headers and coefficient files
/// (pack-years still continuous, unlike the encoded-slot names).
pub const RAW_FIELD_NAMES: [&str; 9] = [
    "education",
    "pack_years",
    "age",
    "race",
    "gender",
    "ethnicity",
    "smoking_status",
    "smoking_years",
    "cigs_per_day",
];

/// Feature slots holding categorical codes (education, race, gender,
/// ethnicity, smoking status).
const CATEGORICAL_SLOTS: [usize; 5] = [0, 3, 4, 5, 6];
const PACK_YEAR_SLOT: usize = 1;

impl MetadataRecord {
    /// Raw feature vector in [`FEATURE_NAMES`] order, before tertile
    /// binning and z-scoring (pack-years still continuous here).
    pub fn raw_features(&self) -> [f64; 9] {
        [
            f64::from(self.education),
            self.pack_years,
            self.age,
            f64::from(self.race),
            f64::from(self.gender),
            f64::from(self.ethnicity),
            f64::from(self.smoking_status),
            self.smoking_years,
            self.cigs_per_day,
        ]
    }

    /// Range checks; records failing them are rejected rather than imputed.
    pub fn validate(&self) -> Result<()> {
        if !(40.0..=100.0).contains(&self.age) {
            return Err(Error::Input(format!("age {} outside [40, 100]", self.age)));
        }
        for (name, v) in [
            ("pack_years", self.pack_years),
            ("smoking_years", self.smoking_years),
            ("cigs_per_day", self.cigs_per_day),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Linear-interpolated quantile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

fn tertile_code(pack_years: f64, cuts: &[f64; 2]) -> f64 {
    if pack_years <= cuts[0] {
        1.0
    } else if pack_years <= cuts[1] {
        2.0
    } else {
        3.0
    }
}

/// Raw features with the pack-year slot replaced by its tertile code.
fn binned_features(rec: &MetadataRecord, cuts: &[f64; 2]) -> [f64; 9] {
    let mut f = rec.raw_features();
    f[PACK_YEAR_SLOT] = tertile_code(f[PACK_YEAR_SLOT], cuts);
    f
}

/// Encoding statistics frozen on a training set: pack-year tertile cut
/// points, per-slot mean and standard deviation for z-scoring, and the
/// categorical codes seen while fitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    /// Pack-years ≤ cuts[0] bin to 1, ≤ cuts[1] to 2, above to 3.
    pub tertile_cuts: [f64; 2],
    pub mean: [f64; 9],
    pub sd: [f64; 9],
    /// Sorted codes observed per slot, in [`CATEGORICAL_SLOTS`] order.
    vocab: [Vec<u8>; 5],
}

impl FeatureStats {
    pub fn fit(records: &[MetadataRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("cannot fit encoding statistics on zero records".into()));
        }
        for r in records {
            r.validate()?;
        }
        let mut packs: Vec<f64> = records.iter().map(|r| r.pack_years).collect();
        packs.sort_by(f64::total_cmp);
        let tertile_cuts = [percentile(&packs, 1.0 / 3.0), percentile(&packs, 2.0 / 3.0)];
        let mut vocab: [Vec<u8>; 5] = Default::default();
        for r in records {
            let raw = r.raw_features();
            for (seen, &slot) in vocab.iter_mut().zip(&CATEGORICAL_SLOTS) {
                let code = raw[slot] as u8;
                if let Err(at) = seen.binary_search(&code) {
                    seen.insert(at, code);
                }
            }
        }
        let n = records.len() as f64;
        let mut mean = [0.0; 9];
        for r in records {
            let f = binned_features(r, &tertile_cuts);
            for s in 0..9 {
                mean[s] += f[s];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut sd = [0.0; 9];
        for r in records {
            let f = binned_features(r, &tertile_cuts);
            for s in 0..9 {
                let d = f[s] - mean[s];
                sd[s] += d * d;
            }
        }
        for s in &mut sd {
            *s = (*s / n).sqrt();
            // A slot constant across training encodes to zero, not NaN.
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Ok(FeatureStats { tertile_cuts, mean, sd, vocab })
    }

    /// Tertile code {1,2,3} of a pack-year value under the frozen cuts.
    pub fn tertile(&self, pack_years: f64) -> f64 {
        tertile_code(pack_years, &self.tertile_cuts)
    }

    /// Nine-slot encoding: pack-years tertile-binned, then every slot
    /// z-scored against the fitted statistics.
    pub fn encode(&self, rec: &MetadataRecord) -> Result<[f64; 9]> {
        rec.validate()?;
        let raw = rec.raw_features();
        for (seen, &slot) in self.vocab.iter().zip(&CATEGORICAL_SLOTS) {
            let code = raw[slot] as u8;
            if seen.binary_search(&code).is_err() {
                return Err(Error::UnknownCategory(format!(
                    "{} code {} was never seen while fitting",
                    FEATURE_NAMES[slot], code
                )));
            }
        }
        let f = binned_features(rec, &self.tertile_cuts);
        let mut out = [0.0; 9];
        for s in 0..9 {
            out[s] = (f[s] - self.mean[s]) / self.sd[s];
        }
        Ok(out)
    }
}

fn check_training_set(n_rows: usize, labels: &[bool]) -> Result<()> {
    if n_rows != labels.len() {
        return Err(Error::Input(format!("{n_rows} feature rows but {} labels", labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

// ---------------------------------------------------------------- forest --

#[derive(Debug, Clone)]
enum Node {
    Leaf { p: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64; 9]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { p } => return p,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

/// Smallest Gini decrease accepted as a real split; guards against float
/// noise manufacturing splits in effectively pure nodes.
const MIN_DECREASE: f64 = 1e-12;

/// Bagged Gini decision trees over the encoded nine-vector. Scores are the
/// mean positive fraction of the leaves a point falls into.
#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<Tree>,
    /// Mean impurity-decrease importance per feature slot; sums to one
    /// whenever any tree found a split.
    pub importances: [f64; 9],
}

impl RandomForest {
    /// Fraction of tree votes for the positive class, in [0,1].
    pub fn predict(&self, x: &[f64; 9]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        let p = pos / n;
        2.0 * p * (1.0 - p)
    }
}

fn partition_indices(idx: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut store = 0;
    for k in 0..idx.len() {
        if pred(idx[k]) {
            idx.swap(store, k);
            store += 1;
        }
    }
    store
}

struct TreeBuilder<'a> {
    x: &'a [[f64; 9]],
    y: &'a [bool],
    cfg: &'a BaselineConfig,
    nodes: Vec<Node>,
    importance: [f64; 9],
    n_root: f64,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len() as f64;
        let pos = idx.iter().filter(|&&i| self.y[i]).count() as f64;
        let node_gini = gini(pos, n);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { p: pos / n });
        if node_gini == 0.0 || idx.len() < 2 * self.cfg.rf_min_leaf || depth >= self.cfg.rf_max_depth
        {
            return slot;
        }
        let mtry = self.cfg.rf_mtry.min(9);
        let mut feats: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
        for i in 0..mtry {
            let j = rng.gen_range(i..9);
            feats.swap(i, j);
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for &f in &feats[..mtry] {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut pos_left = 0.0;
            for k in 0..idx.len() - 1 {
                if self.y[idx[k]] {
                    pos_left += 1.0;
                }
                if self.x[idx[k]][f] == self.x[idx[k + 1]][f] {
                    continue;
                }
                let nl = k + 1;
                let nr = idx.len() - nl;
                if nl < self.cfg.rf_min_leaf || nr < self.cfg.rf_min_leaf {
                    continue;
                }
                let (nl, nr) = (nl as f64, nr as f64);
                let dec =
                    node_gini - (nl / n) * gini(pos_left, nl) - (nr / n) * gini(pos - pos_left, nr);
                if dec > best.map_or(MIN_DECREASE, |b| b.2) {
                    let thr = 0.5 * (self.x[idx[k]][f] + self.x[idx[k + 1]][f]);
                    best = Some((f, thr, dec));
                }
            }
        }
        let Some((feature, threshold, dec)) = best else {
            return slot;
        };
        self.importance[feature] += (n / self.n_root) * dec;
        let mid = partition_indices(idx, |i| self.x[i][feature] <= threshold);
        let (left_idx, right_idx) = idx.split_at_mut(mid);
        let left = self.grow(left_idx, depth + 1, rng);
        let right = self.grow(right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Split { feature, threshold, left, right };
        slot
    }
}

/// Bagging + per-node feature subsampling, deterministic in `seed`.
pub fn train_random_forest(
    features: &[[f64; 9]],
    labels: &[bool],
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<RandomForest> {
    check_training_set(features.len(), labels)?;
    let mut rng = stream_rng(seed, 31);
    let n = features.len();
    let mut trees = Vec::with_capacity(cfg.rf_trees);
    let mut importances = [0.0; 9];
    for _ in 0..cfg.rf_trees {
        let mut idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let mut builder = TreeBuilder {
            x: features,
            y: labels,
            cfg,
            nodes: Vec::new(),
            importance: [0.0; 9],
            n_root: n as f64,
        };
        builder.grow(&mut idx, 0, &mut rng);
        for s in 0..9 {
            importances[s] += builder.importance[s];
        }
        trees.push(Tree { nodes: builder.nodes });
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        for v in &mut importances {
            *v /= total;
        }
    }
    Ok(RandomForest { trees, importances })
}

/// One entry of a feature ranking, most important first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedFeature {
    pub index: usize,
    pub name: &'static str,
    pub importance: f64,
}

/// Rank the nine encoded slots by random-forest impurity decrease and keep
/// the top `k`. Statistics are fitted on the given records, so calling this
/// per fold keeps test data out of the encoding.
pub fn rf_feature_selection(
    records: &[MetadataRecord],
    labels: &[bool],
    k: usize,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<Vec<RankedFeature>> {
    if records.len() < 50 {
        return Err(Error::Input(format!(
            "feature selection needs at least 50 records, got {}",
            records.len()
        )));
    }
    if k > FEATURE_NAMES.len() {
        return Err(Error::Input(format!(
            "k = {k} exceeds the {} available features",
            FEATURE_NAMES.len()
        )));
    }
    let stats = FeatureStats::fit(records)?;
    let x: Vec<[f64; 9]> = records.iter().map(|r| stats.encode(r)).collect::<Result<_>>()?;
    let forest = train_random_forest(&x, labels, cfg, seed)?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| forest.importances[b].total_cmp(&forest.importances[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| RankedFeature { index: i, name: FEATURE_NAMES[i], importance: forest.importances[i] })
        .collect())
}

// ------------------------------------------------------------------- svm --

/// Radial-basis kernel with the bias folded in as a constant component, so
/// the dual needs no equality constraint.
fn rbf(a: &[f64; 9], b: &[f64; 9], gamma: f64) -> f64 {
    let mut d2 = 0.0;
    for s in 0..9 {
        let d = a[s] - b[s];
        d2 += d * d;
    }
    (-gamma * d2).exp() + 1.0
}

/// Soft-margin kernel support-vector machine trained by coordinate ascent
/// on the box-constrained dual, with a Platt sigmoid mapping margins to
/// probabilities.
#[derive(Debug, Clone)]
pub struct SvmModel {
    support: Vec<[f64; 9]>,
    /// alpha_i * y_i per retained support vector.
    weights: Vec<f64>,
    gamma: f64,
    /// Probability = sigmoid(platt[0] * margin + platt[1]).
    platt: [f64; 2],
}

impl SvmModel {
    /// Uncalibrated decision value.
    pub fn margin(&self, x: &[f64; 9]) -> f64 {
        self.support.iter().zip(&self.weights).map(|(s, w)| w * rbf(x, s, self.gamma)).sum()
    }

    /// Calibrated probability of the positive class, in [0,1].
    pub fn predict(&self, x: &[f64; 9]) -> f64 {
        sigmoid(self.platt[0] * self.margin(x) + self.platt[1])
    }
}

/// Platt scaling: fit sigmoid(a·m + b) to the training margins by damped
/// Newton steps on the cross-entropy, with the usual smoothed targets.
fn fit_platt(margins: &[f64], labels: &[bool]) -> [f64; 2] {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let t_pos = (n_pos + 1.0) / (n_pos + 2.0);
    let t_neg = 1.0 / (n_neg + 2.0);
    let targets: Vec<f64> = labels.iter().map(|&l| if l { t_pos } else { t_neg }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        margins
            .iter()
            .zip(&targets)
            .map(|(&m, &t)| {
                let f = a * m + b;
                if f >= 0.0 {
                    (1.0 - t) * f + (-f).exp().ln_1p()
                } else {
                    -t * f + f.exp().ln_1p()
                }
            })
            .sum()
    };
    let mut a = 0.0f64;
    let mut b = ((n_neg + 1.0) / (n_pos + 1.0)).ln();
    let mut obj = objective(a, b);
    for _ in 0..100 {
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (1e-12, 0.0, 1e-12);
        for (&m, &t) in margins.iter().zip(&targets) {
            let p = sigmoid(a * m + b);
            let d = p - t;
            ga += d * m;
            gb += d;
            let w = p * (1.0 - p);
            haa += w * m * m;
            hab += w * m;
            hbb += w;
        }
        if ga.abs() < 1e-10 && gb.abs() < 1e-10 {
            break;
        }
        let det = haa * hbb - hab * hab;
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        let mut step = 1.0;
        loop {
            let cand = objective(a + step * da, b + step * db);
            if cand <= obj + 1e-12 {
                a += step * da;
                b += step * db;
                obj = cand;
                break;
            }
            step *= 0.5;
            if step < 1e-10 {
                return [a, b];
            }
        }
    }
    [a, b]
}

pub fn train_svm(features: &[[f64; 9]], labels: &[bool], cfg: &BaselineConfig) -> Result<SvmModel> {
    check_training_set(features.len(), labels)?;
    let n = features.len();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let mut kmat = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rbf(&features[i], &features[j], cfg.svm_gamma);
            kmat[i * n + j] = v;
            kmat[j * n + i] = v;
        }
    }
    let mut alpha = vec![0.0f64; n];
    // g_i = sum_j alpha_j y_j k_ij, kept incrementally.
    let mut g = vec![0.0f64; n];
    for _ in 0..cfg.svm_passes {
        let mut max_step = 0.0f64;
        for i in 0..n {
            let grad = 1.0 - y[i] * g[i];
            let next = (alpha[i] + grad / kmat[i * n + i]).clamp(0.0, cfg.svm_c);
            let delta = next - alpha[i];
            if delta != 0.0 {
                alpha[i] = next;
                let dy = delta * y[i];
                for j in 0..n {
                    g[j] += dy * kmat[i * n + j];
                }
                max_step = max_step.max(delta.abs());
            }
        }
        if max_step < 1e-8 {
            break;
        }
    }
    let platt = fit_platt(&g, labels);
    let mut support = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        if alpha[i] > 0.0 {
            support.push(features[i]);
            weights.push(alpha[i] * y[i]);
        }
    }
    Ok(SvmModel { support, weights, gamma: cfg.svm_gamma, platt })
}

// ---------------------------------------------------------------- pancan --

/// Logistic comparator over the raw covariates. The coefficients come from
/// an external `key=value` file (one line per [`RAW_FIELD_NAMES`] entry plus
/// `intercept`); no canonical values ship with this project.
#[derive(Debug, Clone, PartialEq)]
pub struct PanCanModel {
    pub intercept: f64,
    pub coefficients: [f64; 9],
}

impl PanCanModel {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingCoefficients(format!("coefficient file {} not found", path.display()))
            } else {
                Error::Io { path: path.to_owned(), source: e }
            }
        })?;
        Self::parse(&text)
    }

    /// `key=value` lines; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Input(format!(
                    "coefficient line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::Input(format!(
                    "coefficient line {}: {:?} is not a number",
                    lineno + 1,
                    value.trim()
                ))
            })?;
            map.insert(key.trim().to_string(), value);
        }
        let mut take =
            |k: &str| map.remove(k).ok_or_else(|| Error::MissingCoefficients(k.to_string()));
        let intercept = take("intercept")?;
        let mut coefficients = [0.0; 9];
        for (c, name) in coefficients.iter_mut().zip(RAW_FIELD_NAMES) {
            *c = take(name)?;
        }
        if let Some(k) = map.keys().next() {
            return Err(Error::Input(format!("unknown coefficient {k:?}")));
        }
        Ok(PanCanModel { intercept, coefficients })
    }

    pub fn predict(&self, rec: &MetadataRecord) -> f64 {
        let raw = rec.raw_features();
        let z: f64 =
            self.intercept + self.coefficients.iter().zip(raw).map(|(c, v)| c * v).sum::<f64>();
        sigmoid(z)
    }
}

// ------------------------------------------------------------- dispatcher --

/// Which covariate-only comparator to train or evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Svm,
    Rf,
    PanCan,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svm" => Ok(BaselineKind::Svm),
            "rf" => Ok(BaselineKind::Rf),
            "pancan" => Ok(BaselineKind::PanCan),
            other => Err(Error::Input(format!("unknown baseline {other:?}; use svm, rf or pancan"))),
        }
    }
}

/// A trained covariate-only model bundled with the encoding statistics it
/// was fitted with.
#[derive(Debug, Clone)]
pub enum BaselineModel {
    Svm { stats: FeatureStats, model: SvmModel },
    Rf { stats: FeatureStats, forest: RandomForest },
    PanCan(PanCanModel),
}

/// Fit the requested comparator on labelled records. The logistic
/// comparator is not trainable here; load it from its coefficient file.
pub fn train_baseline(
    kind: BaselineKind,
    records: &[MetadataRecord],
    labels: &[bool],
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<BaselineModel> {
    if kind == BaselineKind::PanCan {
        return Err(Error::Input(
            "the logistic comparator is loaded from a coefficient file, not trained".into(),
        ));
    }
    let stats = FeatureStats::fit(records)?;
    let x: Vec<[f64; 9]> = records.iter().map(|r| stats.encode(r)).collect::<Result<_>>()?;
    Ok(match kind {
        BaselineKind::Svm => BaselineModel::Svm { stats, model: train_svm(&x, labels, cfg)? },
        _ => BaselineModel::Rf { stats, forest: train_random_forest(&x, labels, cfg, seed)? },
    })
}

impl BaselineModel {
    /// Malignancy score in [0,1] for one record.
    pub fn predict(&self, rec: &MetadataRecord) -> Result<f64> {
        Ok(match self {
            BaselineModel::Svm { stats, model } => model.predict(&stats.encode(rec)?),
            BaselineModel::Rf { stats, forest } => forest.predict(&stats.encode(rec)?),
            BaselineModel::PanCan(m) => m.predict(rec),
        })
    }
}

// -------------------------------------------------------------------- csv --

/// Column order of the covariate CSV: patient id, then the nine fields.
pub const METADATA_CSV_HEADER: &str =
    "patient_id,education,pack_years,age,race,gender,ethnicity,smoking_status,smoking_years,cigs_per_day";

pub fn write_metadata_csv(path: &Path, rows: &[(String, MetadataRecord)]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from(METADATA_CSV_HEADER);
    out.push('\n');
    for (id, r) in rows {
        writeln!(
            out,
            "{id},{},{},{},{},{},{},{},{},{}",
            r.education,
            r.pack_years,
            r.age,
            r.race,
            r.gender,
            r.ethnicity,
            r.smoking_status,
            r.smoking_years,
            r.cigs_per_day
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|source| Error::Io { path: path.to_owned(), source })
}

pub fn load_metadata_csv(path: &Path) -> Result<Vec<(String, MetadataRecord)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.to_owned(), source })?;
    parse_metadata_csv(&text).map_err(|reason| Error::Format { path: path.to_owned(), reason })
}

/// Plain comma-split CSV (no quoting); unknown columns land in `extra`.
fn parse_metadata_csv(text: &str) -> std::result::Result<Vec<(String, MetadataRecord)>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| format!("missing column {name:?}"))
    };
    let id_col = col("patient_id")?;
    let mut field_cols = [0usize; 9];
    for (slot, name) in RAW_FIELD_NAMES.iter().enumerate() {
        field_cols[slot] = col(name)?;
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(format!(
                "row {}: {} cells but the header has {}",
                lineno + 2,
                cells.len(),
                cols.len()
            ));
        }
        let num = |c: usize| -> std::result::Result<f64, String> {
            cells[c].parse().map_err(|_| {
                format!("row {}: column {:?} value {:?} is not numeric", lineno + 2, cols[c], cells[c])
            })
        };
        let code = |c: usize| -> std::result::Result<u8, String> {
            cells[c].parse().map_err(|_| {
                format!("row {}: column {:?} value {:?} is not a code", lineno + 2, cols[c], cells[c])
            })
        };
        let mut rec = MetadataRecord {
            education: code(field_cols[0])?,
            pack_years: num(field_cols[1])?,
            age: num(field_cols[2])?,
            race: code(field_cols[3])?,
            gender: code(field_cols[4])?,
            ethnicity: code(field_cols[5])?,
            smoking_status: code(field_cols[6])?,
            smoking_years: num(field_cols[7])?,
            cigs_per_day: num(field_cols[8])?,
            extra: BTreeMap::new(),
        };
        for (c, name) in cols.iter().enumerate() {
            if c != id_col && !field_cols.contains(&c) {
                rec.extra.insert((*name).to_string(), cells[c].to_string());
            }
        }
        rows.push((cells[id_col].to_string(), rec));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::phantom::{sample_cohort, CohortOptions};

    fn cohort_records(n: usize, seed: u64) -> (Vec<MetadataRecord>, Vec<bool>) {
        let cfg = RunConfig::desk(seed).phantom;
        let opts = CohortOptions::standard(&cfg);
        let specs = sample_cohort(&cfg, &opts, n, seed);
        (
            specs.iter().map(|s| s.metadata.clone()).collect(),
            specs.iter().map(|s| s.label).collect(),
        )
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut pairs = 0.0;
        let mut wins = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    /// Two well-separated covariate clusters with the cluster mean telling
    /// the classes apart on several slots at once.
    fn clustered_records(n: usize, seed: u64) -> (Vec<MetadataRecord>, Vec<bool>) {
        let mut rng = stream_rng(seed, 3);
        let mut records = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let positive = i % 2 == 0;
            let base = if positive { 60.0 } else { 10.0 };
            records.push(MetadataRecord {
                education: rng.gen_range(1..=8),
                pack_years: base + rng.gen_range(-2.0..2.0),
                age: 50.0 + rng.gen_range(0.0..20.0),
                race: rng.gen_range(1..=7),
                gender: rng.gen_range(1..=2),
                ethnicity: rng.gen_range(1..=2),
                smoking_status: rng.gen_range(0..=1),
                smoking_years: if positive { 40.0 } else { 12.0 } + rng.gen_range(-1.0..1.0),
                cigs_per_day: if positive { 30.0 } else { 8.0 } + rng.gen_range(-1.0..1.0),
                extra: BTreeMap::new(),
            });
            labels.push(positive);
        }
        (records, labels)
    }

    #[test]
    fn mean_record_encodes_to_zero_in_continuous_slots() {
        let (records, _) = cohort_records(200, 5);
        let stats = FeatureStats::fit(&records).unwrap();
        let n = records.len() as f64;
        let mut rec = records[0].clone();
        rec.age = records.iter().map(|r| r.age).sum::<f64>() / n;
        rec.smoking_years = records.iter().map(|r| r.smoking_years).sum::<f64>() / n;
        rec.cigs_per_day = records.iter().map(|r| r.cigs_per_day).sum::<f64>() / n;
        let v = stats.encode(&rec).unwrap();
        for slot in [2, 7, 8] {
            assert!(v[slot].abs() < 1e-9, "slot {slot} = {}", v[slot]);
        }
    }

    #[test]
    fn identical_records_encode_identically_and_fields_matter() {
        let (records, _) = cohort_records(100, 6);
        let stats = FeatureStats::fit(&records).unwrap();
        let a = stats.encode(&records[3]).unwrap();
        let b = stats.encode(&records[3].clone()).unwrap();
        assert_eq!(a, b);
        let mut changed = records[3].clone();
        changed.age += 1.0;
        assert_ne!(stats.encode(&changed).unwrap(), a);
    }

    #[test]
    fn cohort_encoding_is_standardised() {
        let (records, _) = cohort_records(1000, 7);
        let stats = FeatureStats::fit(&records).unwrap();
        let xs: Vec<[f64; 9]> = records.iter().map(|r| stats.encode(r).unwrap()).collect();
        let n = xs.len() as f64;
        for slot in 0..9 {
            let mean = xs.iter().map(|x| x[slot]).sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x[slot] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() <= 0.05, "slot {slot} mean {mean}");
            assert!((sd - 1.0).abs() <= 0.05, "slot {slot} sd {sd}");
        }
    }

    #[test]
    fn tertile_cuts_split_the_training_set_in_thirds() {
        let (records, _) = cohort_records(300, 9);
        let stats = FeatureStats::fit(&records).unwrap();
        let mut counts = [0usize; 3];
        for r in &records {
            counts[stats.tertile(r.pack_years) as usize - 1] += 1;
        }
        for c in counts {
            assert!((95..=105).contains(&c), "tertile counts {counts:?}");
        }
    }

    #[test]
    fn unseen_category_code_is_rejected() {
        let (records, _) = cohort_records(60, 8);
        let stats = FeatureStats::fit(&records).unwrap();
        let mut rec = records[0].clone();
        rec.race = 120;
        match stats.encode(&rec) {
            Err(Error::UnknownCategory(msg)) => assert!(msg.contains("race")),
            other => panic!("expected UnknownCategory, got {other:?}"),
        }
    }

    #[test]
    fn informative_slot_is_ranked_first_across_seeds() {
        let mut rng = stream_rng(99, 1);
        let mut records = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..120 {
            let race: u8 = rng.gen_range(1..=7);
            records.push(MetadataRecord {
                education: rng.gen_range(1..=8),
                pack_years: rng.gen_range(5.0..80.0),
                age: rng.gen_range(45.0..85.0),
                race,
                gender: rng.gen_range(1..=2),
                ethnicity: rng.gen_range(1..=2),
                smoking_status: rng.gen_range(0..=1),
                smoking_years: rng.gen_range(5.0..50.0),
                cigs_per_day: rng.gen_range(2.0..40.0),
                extra: BTreeMap::new(),
            });
            labels.push(race >= 4);
        }
        let cfg = RunConfig::desk(1).baseline;
        let mut hits = 0;
        for seed in 0..100 {
            let ranked = rf_feature_selection(&records, &labels, 9, &cfg, seed).unwrap();
            assert_eq!(ranked.len(), 9);
            if ranked[0].index == 3 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "informative slot won only {hits}/100 seeds");
        let a = rf_feature_selection(&records, &labels, 3, &cfg, 0).unwrap();
        let b = rf_feature_selection(&records, &labels, 3, &cfg, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].name, "race");
    }

    #[test]
    fn degenerate_and_undersized_selection_inputs_are_errors() {
        let (records, _) = cohort_records(60, 10);
        let cfg = RunConfig::desk(1).baseline;
        let all_true = vec![true; records.len()];
        match rf_feature_selection(&records, &all_true, 3, &cfg, 0) {
            Err(Error::DegenerateLabels) => {}
            other => panic!("expected DegenerateLabels, got {other:?}"),
        }
        let (few, labels) = cohort_records(49, 10);
        assert!(matches!(
            rf_feature_selection(&few, &labels[..49].to_vec(), 3, &cfg, 0),
            Err(Error::Input(_))
        ));
        let (records, labels) = cohort_records(60, 10);
        assert!(matches!(
            rf_feature_selection(&records, &labels, 10, &cfg, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn forest_scores_training_points_near_their_labels() {
        let (records, labels) = clustered_records(80, 12);
        let cfg = RunConfig::desk(1).baseline;
        let model = train_baseline(BaselineKind::Rf, &records, &labels, &cfg, 12).unwrap();
        for (rec, &label) in records.iter().zip(&labels) {
            let score = model.predict(rec).unwrap();
            assert!((0.0..=1.0).contains(&score));
            if label {
                assert!(score >= 0.8, "positive scored {score}");
            } else {
                assert!(score <= 0.2, "negative scored {score}");
            }
        }
    }

    #[test]
    fn svm_orders_separable_clusters() {
        let (records, labels) = clustered_records(80, 13);
        let cfg = RunConfig::desk(1).baseline;
        let model = train_baseline(BaselineKind::Svm, &records, &labels, &cfg, 13).unwrap();
        let scores: Vec<f64> =
            records.iter().map(|r| model.predict(r).unwrap()).collect();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s) && s.is_finite()));
        let min_pos = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l)
            .map(|(s, _)| *s)
            .fold(f64::INFINITY, f64::min);
        let max_neg = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| !l)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            min_pos > max_neg,
            "separable clusters overlap after calibration: {min_pos} vs {max_neg}"
        );
    }

    #[test]
    fn zero_coefficient_logistic_scores_half() {
        let mut text = String::from("intercept = 0\n");
        for name in RAW_FIELD_NAMES {
            text.push_str(&format!("{name} = 0\n"));
        }
        let model = PanCanModel::parse(&text).unwrap();
        let (records, _) = cohort_records(5, 14);
        for rec in &records {
            assert_eq!(model.predict(rec), 0.5);
        }
    }

    #[test]
    fn absent_coefficients_and_files_are_reported() {
        let text = "intercept = 0.1\npack_years = 0.02\n";
        match PanCanModel::parse(text) {
            Err(Error::MissingCoefficients(k)) => assert_eq!(k, "education"),
            other => panic!("expected MissingCoefficients, got {other:?}"),
        }
        match PanCanModel::load(Path::new("/nonexistent/coeffs.txt")) {
            Err(Error::MissingCoefficients(_)) => {}
            other => panic!("expected MissingCoefficients, got {other:?}"),
        }
        assert!(matches!(
            PanCanModel::parse("intercept = 0\nbogus = 1\n"),
            Err(Error::Input(_) | Error::MissingCoefficients(_))
        ));
    }

    #[test]
    fn coefficient_file_round_trips_through_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coeffs.txt");
        let mut text = String::from("# comparator weights\nintercept = -6.5\n");
        for name in RAW_FIELD_NAMES {
            let w = if name == "pack_years" { 0.12 } else { 0.0 };
            text.push_str(&format!("{name} = {w}\n"));
        }
        std::fs::write(&path, &text).unwrap();
        let model = PanCanModel::load(&path).unwrap();
        let (records, _) = cohort_records(40, 15);
        for rec in &records {
            let expect = sigmoid(-6.5 + 0.12 * rec.pack_years);
            assert!((model.predict(rec) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn phantom_forest_baseline_separates_held_out_labels() {
        let (records, labels) = cohort_records(300, 11);
        let cfg = RunConfig::desk(1).baseline;
        let model =
            train_baseline(BaselineKind::Rf, &records[..200], &labels[..200], &cfg, 11).unwrap();
        let scores: Vec<f64> =
            records[200..].iter().map(|r| model.predict(r).unwrap()).collect();
        let auc = brute_auc(&scores, &labels[200..]);
        assert!(auc >= 0.7, "held-out ranking too weak: AUC {auc:.3}");
    }

    #[test]
    fn baseline_kind_parses_from_cli_names() {
        assert_eq!("svm".parse::<BaselineKind>().unwrap(), BaselineKind::Svm);
        assert_eq!("RF".parse::<BaselineKind>().unwrap(), BaselineKind::Rf);
        assert_eq!("pancan".parse::<BaselineKind>().unwrap(), BaselineKind::PanCan);
        assert!("bogus".parse::<BaselineKind>().is_err());
        let (records, labels) = cohort_records(60, 16);
        let cfg = RunConfig::desk(1).baseline;
        assert!(matches!(
            train_baseline(BaselineKind::PanCan, &records, &labels, &cfg, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn csv_round_trips_and_collects_extras() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metadata.csv");
        let (records, _) = cohort_records(12, 17);
        let rows: Vec<(String, MetadataRecord)> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("case{i:05}"), r.clone()))
            .collect();
        write_metadata_csv(&path, &rows).unwrap();
        let back = load_metadata_csv(&path).unwrap();
        assert_eq!(back, rows);

        let text = "patient_id,site,education,pack_years,age,race,gender,ethnicity,smoking_status,smoking_years,cigs_per_day\n\
                    p7,east,3,25.5,62,2,1,1,0,30,15\n";
        let rows = parse_metadata_csv(text).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, "p7");
        assert_eq!(rows[0].1.extra.get("site").map(String::as_str), Some("east"));
        assert_eq!(rows[0].1.pack_years, 25.5);

        assert!(parse_metadata_csv("patient_id,age\np1,60\n").is_err());
        assert!(load_metadata_csv(Path::new("/nonexistent.csv")).is_err());
    }
}
