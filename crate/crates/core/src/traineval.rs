//! Subject-wise cross-validation, training with early stopping, metrics and
//! report aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndcore::{Adam, Checkpoint, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{InputKind, WindowSet};
use crate::error::{Error, Result};
use crate::features::NormalizationStats;
use crate::matrix::Matrix;
use crate::model::{config_hash, knn_scores, Fusion, MlpConfig, MlpModel, ModelConfig, ParamSet, TemporalModel};

// ---------------------------------------------------------------- metrics

fn check_labels(labels: &[f64], n: usize) -> Result<(usize, usize)> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} scores for {} labels", labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = labels.iter().filter(|&&l| l == 0.0).count();
    if pos + neg != n {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC with tied scores counted as one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_labels(labels, scores.len())?;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateData("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, with ranks starting at 1
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j + 1) as u64;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as u64;
        twice_rank_sum += twice_avg_rank * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Step-wise average precision: sum over distinct thresholds of
/// `(recall_k - recall_{k-1}) * precision_k`.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_labels(labels, scores.len())?;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateData("AUPRC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let new_tp = idx[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        tp += new_tp;
        fp += j + 1 - i - new_tp;
        if new_tp > 0 {
            ap += (new_tp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(preds: &[f64], labels: &[f64]) -> Result<Confusion> {
    check_labels(labels, preds.len())?;
    let mut c = Confusion::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1.0, l == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`, zero when undefined.
pub fn f1(preds: &[f64], labels: &[f64]) -> Result<f64> {
    let c = confusion(preds, labels)?;
    let d = 2 * c.tp + c.fp + c.fn_;
    Ok(if d == 0 { 0.0 } else { (2 * c.tp) as f64 / d as f64 })
}

pub fn accuracy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    let c = confusion(preds, labels)?;
    if preds.is_empty() {
        return Err(Error::InsufficientData("accuracy of no predictions".into()));
    }
    Ok((c.tp + c.tn) as f64 / preds.len() as f64)
}

pub fn balanced_accuracy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    let c = confusion(preds, labels)?;
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(Error::DegenerateData("balanced accuracy needs both classes".into()));
    }
    let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
    let tnr = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok((tpr + tnr) / 2.0)
}

/// Hard predictions at probability 0.5.
pub fn threshold(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect()
}

pub const METRIC_NAMES: [&str; 5] = ["auroc", "auprc", "f1", "accuracy", "balanced_accuracy"];

/// Metrics of one fold; `None` marks a metric undefined on this fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold_id: usize,
    pub n_test: usize,
    pub n_stress: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

impl FoldMetrics {
    pub fn compute(fold_id: usize, probs: &[f64], labels: &[f64]) -> Result<Self> {
        let preds = threshold(probs);
        Ok(FoldMetrics {
            fold_id,
            n_test: labels.len(),
            n_stress: labels.iter().filter(|&&l| l == 1.0).count(),
            auroc: auroc(probs, labels).ok(),
            auprc: auprc(probs, labels).ok(),
            f1: f1(&preds, labels).ok(),
            accuracy: accuracy(&preds, labels).ok(),
            balanced_accuracy: balanced_accuracy(&preds, labels).ok(),
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "auroc" => self.auroc,
            "auprc" => self.auprc,
            "f1" => self.f1,
            "accuracy" => self.accuracy,
            "balanced_accuracy" => self.balanced_accuracy,
            _ => None,
        }
    }
}

/// Mean and sample std over the folds where the metric is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate { mean: None, std: None, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        Some((values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt())
    } else {
        None
    };
    Aggregate { mean: Some(mean), std, n }
}

// ------------------------------------------------------------------ folds

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

/// Shuffles subjects by `seed` and cuts `n_folds` test groups whose sizes
/// differ by at most one (larger groups first). Validation subjects are the
/// first `max(1, ceil(val_fraction * |non-test|))` non-test subjects in
/// shuffled order.
pub fn make_folds(subjects: &[String], n_folds: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldPlan>> {
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if unique.len() != subjects.len() {
        return Err(Error::Config("subject list has duplicates".into()));
    }
    if n_folds < 2 || subjects.len() < n_folds {
        return Err(Error::Config(format!("{} subjects cannot fill {n_folds} folds", subjects.len())));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / n_folds, order.len() % n_folds);
    let mut plans = Vec::with_capacity(n_folds);
    let mut start = 0;
    for f in 0..n_folds {
        let size = base + usize::from(f < extra);
        let test: Vec<String> = order[start..start + size].to_vec();
        let rest: Vec<String> = order[..start].iter().chain(&order[start + size..]).cloned().collect();
        let n_val = ((val_fraction * rest.len() as f64).ceil() as usize).max(1);
        if n_val >= rest.len() {
            return Err(Error::Config("too few subjects left for training".into()));
        }
        let mut val = rest[..n_val].to_vec();
        let mut train = rest[n_val..].to_vec();
        let mut test = test;
        train.sort();
        val.sort();
        test.sort();
        plans.push(FoldPlan { fold_id: f, train_subjects: train, val_subjects: val, test_subjects: test });
        start += size;
    }
    Ok(plans)
}

// --------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 32, lr: 1e-3, max_epochs: 20, patience: 5 }
    }
}

/// Validation-loss early stopping: stop once the number of consecutive
/// non-improving epochs exceeds `patience`.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: None, bad: 0 }
    }

    /// Records an epoch; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad = 0;
            (true, false)
        } else {
            self.bad += 1;
            (false, self.bad > self.patience)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

/// The nine compared configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Facial,
    Bio,
    EarlyFacialBio,
    EarlyFacialGaze,
    CrossFacialBio,
    CrossFacialGaze,
    CrossGazeBio,
    Knn,
    Mlp,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::Facial,
        ExperimentKind::Bio,
        ExperimentKind::EarlyFacialBio,
        ExperimentKind::EarlyFacialGaze,
        ExperimentKind::CrossFacialBio,
        ExperimentKind::CrossFacialGaze,
        ExperimentKind::CrossGazeBio,
        ExperimentKind::Knn,
        ExperimentKind::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Facial => "facial",
            ExperimentKind::Bio => "bio",
            ExperimentKind::EarlyFacialBio => "early_facial_bio",
            ExperimentKind::EarlyFacialGaze => "early_facial_gaze",
            ExperimentKind::CrossFacialBio => "cross_facial_bio",
            ExperimentKind::CrossFacialGaze => "cross_facial_gaze",
            ExperimentKind::CrossGazeBio => "cross_gaze_bio",
            ExperimentKind::Knn => "knn",
            ExperimentKind::Mlp => "mlp",
        }
    }

    /// Row label in the comparison table.
    pub fn display_name(self) -> &'static str {
        match self {
            ExperimentKind::Facial => "facial features",
            ExperimentKind::Bio => "Bio (PP, HR, BR)",
            ExperimentKind::EarlyFacialBio => "Early Fusion(facial features + Bio)",
            ExperimentKind::EarlyFacialGaze => "Early Fusion(facial features + Gaze)",
            ExperimentKind::CrossFacialBio => "Cross-Modal (facial features + Bio)",
            ExperimentKind::CrossFacialGaze => "Cross-Modal (facial features + Gaze)",
            ExperimentKind::CrossGazeBio => "Cross-Modal (Gaze + Bio)",
            ExperimentKind::Knn => "facial features (kNN)",
            ExperimentKind::Mlp => "facial features (MLP)",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown configuration `{s}`")))
    }

    pub fn input_kind(self) -> InputKind {
        match self {
            ExperimentKind::Facial => InputKind::Facial,
            ExperimentKind::Bio => InputKind::Bio,
            ExperimentKind::EarlyFacialBio => InputKind::EarlyFacialBio,
            ExperimentKind::EarlyFacialGaze => InputKind::EarlyFacialGaze,
            ExperimentKind::CrossFacialBio => InputKind::CrossFacialBio,
            ExperimentKind::CrossFacialGaze => InputKind::CrossFacialGaze,
            ExperimentKind::CrossGazeBio => InputKind::CrossGazeBio,
            ExperimentKind::Knn | ExperimentKind::Mlp => InputKind::FacialSummary,
        }
    }

    pub fn fusion(self) -> Option<Fusion> {
        match self {
            ExperimentKind::Facial | ExperimentKind::Bio => Some(Fusion::Unimodal),
            ExperimentKind::EarlyFacialBio | ExperimentKind::EarlyFacialGaze => Some(Fusion::Early),
            ExperimentKind::CrossFacialBio | ExperimentKind::CrossFacialGaze | ExperimentKind::CrossGazeBio => {
                Some(Fusion::CrossModal)
            }
            ExperimentKind::Knn | ExperimentKind::Mlp => None,
        }
    }

    fn code(self) -> u64 {
        ExperimentKind::ALL.iter().position(|&k| k == self).unwrap() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub configurations: Vec<ExperimentKind>,
    pub model: ModelConfig,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub knn_k: usize,
    pub n_folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            configurations: ExperimentKind::ALL.to_vec(),
            model: ModelConfig::default(),
            mlp: MlpConfig::default(),
            train: TrainConfig::default(),
            knn_k: 5,
            n_folds: 5,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(master, fold, configuration, purpose)`.
pub fn derive_seed(master: u64, fold_id: usize, kind: ExperimentKind, purpose: u64) -> u64 {
    mix(mix(mix(master) ^ fold_id as u64) ^ kind.code()) ^ mix(purpose)
}

/// Trained artefact of one fold and configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub kind: ExperimentKind,
    pub fold_id: usize,
    pub seed: u64,
    pub config_hash: String,
    pub normalization: Vec<NormalizationStats>,
    pub model: BundleModel,
    pub epoch_log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BundleModel {
    Temporal {
        config: ModelConfig,
        input_dims: Vec<usize>,
        #[serde(skip)]
        params: ParamSet,
    },
    Mlp {
        config: MlpConfig,
        input_dim: usize,
        #[serde(skip)]
        params: ParamSet,
    },
    Knn {
        k: usize,
        train_rows: Vec<Vec<f64>>,
        train_labels: Vec<f64>,
    },
}

impl ModelBundle {
    fn param_set(&self) -> Option<&ParamSet> {
        match &self.model {
            BundleModel::Temporal { params, .. } | BundleModel::Mlp { params, .. } => Some(params),
            BundleModel::Knn { .. } => None,
        }
    }

    fn param_set_mut(&mut self) -> Option<&mut ParamSet> {
        match &mut self.model {
            BundleModel::Temporal { params, .. } | BundleModel::Mlp { params, .. } => Some(params),
            BundleModel::Knn { .. } => None,
        }
    }

    /// Writes `bundle.json` and, for trained networks, `checkpoint.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(self)? + "\n")?;
        if let Some(p) = self.param_set() {
            Checkpoint::from_params(self.seed, self.config_hash.clone(), &p.names, &p.tensors).save(&dir.join("checkpoint.json"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut bundle: ModelBundle = serde_json::from_str(&std::fs::read_to_string(dir.join("bundle.json"))?)?;
        let names = match &bundle.model {
            BundleModel::Temporal { config, input_dims, .. } => Some(TemporalModel::new(config.clone(), input_dims, 0)?.params.names),
            BundleModel::Mlp { config, input_dim, .. } => Some(MlpModel::new(config.clone(), *input_dim, 0)?.params.names),
            BundleModel::Knn { .. } => None,
        };
        if let Some(names) = names {
            let ck = Checkpoint::load(&dir.join("checkpoint.json"))?;
            if ck.config_hash != bundle.config_hash {
                return Err(Error::Nd(ndcore::Error::Checkpoint("checkpoint config hash does not match bundle".into())));
            }
            let tensors = ck.params_for(&names)?;
            *bundle.param_set_mut().unwrap() = ParamSet { names, tensors };
        }
        Ok(bundle)
    }

    /// Stress probabilities for raw (unnormalized) input streams.
    pub fn predict(&self, inputs: &[Vec<Matrix>]) -> Result<Vec<f64>> {
        let normalized = normalize_all(&self.normalization, inputs)?;
        let all: Vec<usize> = (0..inputs.len()).collect();
        match &self.model {
            BundleModel::Temporal { config, input_dims, params } => {
                let mut m = TemporalModel::new(config.clone(), input_dims, 0)?;
                m.params = params.clone();
                let mut out = Vec::with_capacity(all.len());
                for chunk in all.chunks(64) {
                    out.extend(m.logits(&batch_tensors(&normalized, chunk))?.into_iter().map(ndcore::sigmoid));
                }
                Ok(out)
            }
            BundleModel::Mlp { config, input_dim, params } => {
                let mut m = MlpModel::new(config.clone(), *input_dim, 0)?;
                m.params = params.clone();
                Ok(m.logits(&row_tensor(&normalized, &all))?.into_iter().map(ndcore::sigmoid).collect())
            }
            BundleModel::Knn { k, train_rows, train_labels } => {
                let rows: Vec<Vec<f64>> = normalized.iter().map(|w| w[0].row(0).to_vec()).collect();
                knn_scores(train_rows, train_labels, &rows, *k)
            }
        }
    }
}

fn normalize_all(stats: &[NormalizationStats], inputs: &[Vec<Matrix>]) -> Result<Vec<Vec<Matrix>>> {
    inputs
        .iter()
        .map(|streams| {
            if streams.len() != stats.len() {
                return Err(Error::Shape(format!("{} streams for {} normalizers", streams.len(), stats.len())));
            }
            streams.iter().zip(stats).map(|(m, s)| s.apply(m)).collect()
        })
        .collect()
}

/// Per-stream statistics over the frames of the given windows.
pub fn fit_stream_normalization(inputs: &[Vec<Matrix>], train: &[usize]) -> Result<Vec<NormalizationStats>> {
    let n_streams = inputs.first().map_or(0, Vec::len);
    (0..n_streams)
        .map(|s| NormalizationStats::fit(&train.iter().map(|&i| &inputs[i][s]).collect::<Vec<_>>()))
        .collect()
}

fn batch_tensors(windows: &[Vec<Matrix>], idx: &[usize]) -> Vec<Tensor> {
    let n_streams = windows[idx[0]].len();
    (0..n_streams)
        .map(|s| {
            let (t, f) = (windows[idx[0]][s].rows(), windows[idx[0]][s].cols());
            let mut data = Vec::with_capacity(idx.len() * t * f);
            for &i in idx {
                data.extend_from_slice(windows[i][s].data());
            }
            Tensor::new(&[idx.len(), t, f], data).expect("batch shape")
        })
        .collect()
}

fn row_tensor(windows: &[Vec<Matrix>], idx: &[usize]) -> Tensor {
    let d = windows[idx[0]][0].cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(windows[i][0].row(0));
    }
    Tensor::new(&[idx.len(), d], data).expect("row batch shape")
}

/// Window indices of a fold's train, validation and test subjects.
pub fn split_indices(set: &WindowSet, plan: &FoldPlan) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (i, w) in set.windows.iter().enumerate() {
        let s = &w.window.subject_id;
        if plan.train_subjects.contains(s) {
            tr.push(i);
        } else if plan.val_subjects.contains(s) {
            va.push(i);
        } else if plan.test_subjects.contains(s) {
            te.push(i);
        }
    }
    (tr, va, te)
}

trait Trainable {
    fn params(&mut self) -> &mut ParamSet;
    fn loss_and_grads(&self, x: &[Vec<Matrix>], idx: &[usize], labels: &[f64], seed: u64) -> Result<(f64, Vec<Tensor>)>;
    fn loss(&self, x: &[Vec<Matrix>], idx: &[usize], labels: &[f64]) -> Result<f64>;
}

impl Trainable for TemporalModel {
    fn params(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn loss_and_grads(&self, x: &[Vec<Matrix>], idx: &[usize], labels: &[f64], seed: u64) -> Result<(f64, Vec<Tensor>)> {
        TemporalModel::loss_and_grads(self, &batch_tensors(x, idx), labels, seed)
    }
    fn loss(&self, x: &[Vec<Matrix>], idx: &[usize], labels: &[f64]) -> Result<f64> {
        TemporalModel::loss(self, &batch_tensors(x, idx), labels)
    }
}

impl Trainable for MlpModel {
    fn params(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn loss_and_grads(&self, x: &[Vec<Matrix>], idx: &[usize], labels: &[f64], seed: u64) -> Result<(f64, Vec<Tensor>)> {
        MlpModel::loss_and_grads(self, &row_tensor(x, idx), labels, seed)
    }
    fn loss(&self, x: &[Vec<Matrix>], idx: &[usize], labels: &[f64]) -> Result<f64> {
        MlpModel::loss(self, &row_tensor(x, idx), labels)
    }
}

fn mean_loss<M: Trainable>(m: &M, x: &[Vec<Matrix>], idx: &[usize], labels: &[f64], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        let y: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
        total += m.loss(x, chunk, &y)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Mini-batch Adam with validation-loss early stopping; the model ends with
/// its best-validation parameters.
fn fit<M: Trainable>(
    model: &mut M,
    x: &[Vec<Matrix>],
    labels: &[f64],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<EpochLog>, Option<usize>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("training and validation splits must be non-empty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch_size, max_epochs and lr must be positive".into()));
    }
    let mut adam = Adam::new(cfg.lr, &model.params().tensors);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params().tensors.clone();
    let mut log = Vec::new();
    let mut order = train.to_vec();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(seed));
    let mut step: u64 = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let y: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model.loss_and_grads(x, chunk, &y, mix(seed ^ mix(step + 1)))?;
            let p = model.params();
            adam.step(&mut p.tensors, &grads, &p.names).map_err(|e| match e {
                ndcore::Error::NonFiniteGradient(name) => {
                    ndcore::Error::NonFiniteGradient(format!("{name} (epoch {epoch}, step {step})"))
                }
                other => other,
            })?;
            total += loss * chunk.len() as f64;
            step += 1;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(model, x, val, labels, cfg.batch_size.max(64))?;
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = model.params().tensors.clone();
        }
        log.push(EpochLog { epoch, train_loss, val_loss, improved });
        if stop {
            break;
        }
    }
    model.params().tensors = best;
    Ok((log, stopper.best_epoch))
}

/// Trains one configuration on one fold.
pub fn train_fold(
    plan: &FoldPlan,
    set: &WindowSet,
    inputs: &[Vec<Matrix>],
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
) -> Result<ModelBundle> {
    let labels = set.labels();
    let (train, val, _) = split_indices(set, plan);
    let normalization = fit_stream_normalization(inputs, &train)?;
    let x = normalize_all(&normalization, inputs)?;
    let seed = derive_seed(cfg.seed, plan.fold_id, kind, 0);
    let hash = config_hash(&(kind, cfg))?;
    let (model, epoch_log, best_epoch) = match kind {
        ExperimentKind::Knn => {
            let fit_rows: Vec<usize> = train.iter().chain(&val).copied().collect();
            let train_rows = fit_rows.iter().map(|&i| x[i][0].row(0).to_vec()).collect();
            let train_labels = fit_rows.iter().map(|&i| labels[i]).collect();
            (BundleModel::Knn { k: cfg.knn_k, train_rows, train_labels }, Vec::new(), None)
        }
        ExperimentKind::Mlp => {
            let mut m = MlpModel::new(cfg.mlp.clone(), x[0][0].cols(), seed)?;
            let (log, best) = fit(&mut m, &x, &labels, &train, &val, &cfg.train, derive_seed(cfg.seed, plan.fold_id, kind, 1))?;
            (BundleModel::Mlp { config: m.config, input_dim: m.input_dim, params: m.params }, log, best)
        }
        _ => {
            let mut mc = cfg.model.clone();
            mc.fusion = kind.fusion().expect("network configuration");
            mc.max_t = mc.max_t.max(set.frames_per_window);
            let dims: Vec<usize> = x[0].iter().map(Matrix::cols).collect();
            let mut m = TemporalModel::new(mc, &dims, seed)?;
            let (log, best) = fit(&mut m, &x, &labels, &train, &val, &cfg.train, derive_seed(cfg.seed, plan.fold_id, kind, 1))?;
            (BundleModel::Temporal { config: m.config, input_dims: m.input_dims, params: m.params }, log, best)
        }
    };
    Ok(ModelBundle { kind, fold_id: plan.fold_id, seed, config_hash: hash, normalization, model, epoch_log, best_epoch })
}

// ---------------------------------------------------------------- reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub condition: String,
    pub window_index: usize,
    pub label: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationReport {
    pub name: String,
    pub display_name: String,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: BTreeMap<String, Aggregate>,
}

impl ConfigurationReport {
    pub fn from_folds(kind: ExperimentKind, folds: Vec<FoldMetrics>) -> Self {
        let aggregate = METRIC_NAMES
            .iter()
            .map(|&m| (m.to_string(), aggregate(&folds.iter().filter_map(|f| f.get(m)).collect::<Vec<_>>())))
            .collect();
        ConfigurationReport { name: kind.as_str().into(), display_name: kind.display_name().into(), folds, aggregate }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).and_then(|a| a.mean)
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub configurations: Vec<ConfigurationReport>,
}

impl MetricsReport {
    pub fn get(&self, kind: ExperimentKind) -> Option<&ConfigurationReport> {
        self.configurations.iter().find(|c| c.name == kind.as_str())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `comparison.csv`: one row per configuration, mean and std per metric.
    pub fn write_comparison<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["modality".to_string()];
        for m in METRIC_NAMES {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        wtr.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "invalid".into());
        for c in &self.configurations {
            let mut rec = vec![c.display_name.clone()];
            for m in METRIC_NAMES {
                let a = c.aggregate.get(m).copied().unwrap_or(Aggregate { mean: None, std: None, n: 0 });
                rec.push(fmt(a.mean));
                rec.push(fmt(a.std));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Test-set predictions and metrics of one bundle.
pub fn evaluate_bundle(bundle: &ModelBundle, plan: &FoldPlan, set: &WindowSet, inputs: &[Vec<Matrix>]) -> Result<(Vec<Prediction>, FoldMetrics)> {
    let (_, _, test) = split_indices(set, plan);
    if test.is_empty() {
        return Err(Error::InsufficientData(format!("fold {} has no test windows", plan.fold_id)));
    }
    let test_inputs: Vec<Vec<Matrix>> = test.iter().map(|&i| inputs[i].clone()).collect();
    let scores = bundle.predict(&test_inputs)?;
    let labels: Vec<f64> = test.iter().map(|&i| set.windows[i].label()).collect();
    let preds = test
        .iter()
        .zip(&scores)
        .map(|(&i, &score)| {
            let w = &set.windows[i].window;
            Prediction {
                subject_id: w.subject_id.clone(),
                condition: w.condition.to_string(),
                window_index: w.window_index,
                label: w.label.as_f64(),
                score,
            }
        })
        .collect();
    Ok((preds, FoldMetrics::compute(plan.fold_id, &scores, &labels)?))
}

pub fn write_predictions<W: Write>(w: W, preds: &[Prediction]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in preds {
        wtr.serialize(p)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Output of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub folds: Vec<FoldPlan>,
    pub bundles: Vec<ModelBundle>,
    pub predictions: Vec<((ExperimentKind, usize), Vec<Prediction>)>,
    pub report: MetricsReport,
}

/// Trains every configured model on every fold, configuration-major.
/// Folds of one configuration run on up to `jobs` threads.
pub fn train_all(set: &WindowSet, folds: &[FoldPlan], cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ModelBundle>> {
    let mut bundles = Vec::new();
    for &kind in &cfg.configurations {
        let inputs = set.inputs(kind.input_kind())?;
        bundles.extend(run_folds(folds, jobs, |plan| train_fold(plan, set, &inputs, kind, cfg))?);
        log::info!("trained {} on {} folds", kind.as_str(), folds.len());
    }
    Ok(bundles)
}

/// Test-fold predictions and the metrics report of trained bundles.
pub fn evaluate_all(
    set: &WindowSet,
    folds: &[FoldPlan],
    bundles: &[ModelBundle],
    cfg: &ExperimentConfig,
) -> Result<(Vec<((ExperimentKind, usize), Vec<Prediction>)>, MetricsReport)> {
    let mut predictions = Vec::new();
    let mut reports = Vec::new();
    for &kind in &cfg.configurations {
        let inputs = set.inputs(kind.input_kind())?;
        let mut fold_metrics = Vec::new();
        for plan in folds {
            let bundle = bundles
                .iter()
                .find(|b| b.kind == kind && b.fold_id == plan.fold_id)
                .ok_or_else(|| Error::Config(format!("no trained {} model for fold {}", kind.as_str(), plan.fold_id)))?;
            let (preds, metrics) = evaluate_bundle(bundle, plan, set, &inputs)?;
            predictions.push(((kind, plan.fold_id), preds));
            fold_metrics.push(metrics);
        }
        reports.push(ConfigurationReport::from_folds(kind, fold_metrics));
    }
    let report = MetricsReport { seed: cfg.seed, config_hash: config_hash(cfg)?, configurations: reports };
    Ok((predictions, report))
}

/// Folds, training and evaluation in one call.
pub fn run_experiment(set: &WindowSet, cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    let folds = make_folds(&set.subjects(), cfg.n_folds, cfg.val_fraction, cfg.seed)?;
    let bundles = train_all(set, &folds, cfg, jobs)?;
    let (predictions, report) = evaluate_all(set, &folds, &bundles, cfg)?;
    Ok(ExperimentOutcome { folds, bundles, predictions, report })
}

/// Applies `f` to every fold with at most `jobs` concurrent threads,
/// returning results in fold order.
pub fn run_folds<T: Send>(folds: &[FoldPlan], jobs: usize, f: impl Fn(&FoldPlan) -> Result<T> + Sync) -> Result<Vec<T>> {
    let jobs = jobs.max(1);
    let mut out = Vec::with_capacity(folds.len());
    for chunk in folds.chunks(jobs) {
        if jobs == 1 {
            out.push(f(&chunk[0])?);
            continue;
        }
        let results: Vec<Result<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|p| s.spawn(|| f(p))).collect();
            handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}
