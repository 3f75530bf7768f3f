//! CoNMix single-target (STDA) and multi-target (MTDA) adaptation.
//!
//! STDA minimizes `l1 * L_nm + l2 * L_pl + l3 * L_cons` over the unlabeled
//! target set, where `L_nm` is the negated Frobenius norm of the prediction
//! matrix, `L_pl` a pseudo-label loss against centroid-refined labels and
//! `L_cons` the cross-entropy between weak- and strong-view predictions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::adapt::batches;
use crate::error::{Result, TtaError};
use crate::features::{strong_augment, weak_augment, AugmentConfig, SpectrogramImage};
use crate::models::train::input_batch;
use crate::models::{cross_entropy, one_hot, AdaptableModel, Example, ForwardMode, Head, ModelConfig};
use crate::nn::{softmax, Graph, Sgd, SgdConfig, Tensor, Var};
use crate::seed::{keyed_rng, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlVariant {
    /// Cross-entropy against the hard pseudo labels.
    Org,
    /// Log-softmax followed by class-weighted NLL.
    Upd,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdaConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub pl_variant: PlVariant,
    pub use_nm: bool,
    pub use_cons: bool,
    pub epochs: usize,
    pub refinement_rounds: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub augment: AugmentConfig,
    /// Feed softmax probabilities (true) or raw logits to the norm loss.
    pub nm_through_softmax: bool,
    /// Per-class NLL weights for the `upd` variant; all ones when absent.
    pub nll_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for StdaConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 1.0,
            pl_variant: PlVariant::Org,
            use_nm: true,
            use_cons: true,
            epochs: 10,
            refinement_rounds: 2,
            batch_size: 64,
            sgd: SgdConfig { lr: 1e-4, momentum: 0.9, weight_decay: 0.0 },
            augment: AugmentConfig::default(),
            nm_through_softmax: true,
            nll_weights: None,
            seed: 0,
        }
    }
}

impl StdaConfig {
    fn nm_active(&self) -> bool {
        self.use_nm && self.lambda1 > 0.0
    }

    fn pl_active(&self) -> bool {
        self.pl_variant != PlVariant::None && self.lambda2 > 0.0
    }

    fn cons_active(&self) -> bool {
        self.use_cons && self.lambda3 > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(TtaError::Config(format!("{name} must be a non-negative number, got {l}")));
            }
        }
        if !(self.nm_active() || self.pl_active() || self.cons_active()) {
            return Err(TtaError::AllLossesDisabled);
        }
        if self.epochs == 0 {
            return Err(TtaError::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_variant(mut self, variant: AblationVariant) -> Self {
        let (pl, nm, cons) = match variant {
            AblationVariant::Org => (PlVariant::Org, true, true),
            AblationVariant::Upd => (PlVariant::Upd, true, true),
            AblationVariant::NoPl => (PlVariant::None, true, true),
            AblationVariant::NoCst => (PlVariant::Org, true, false),
            AblationVariant::NoNm => (PlVariant::Org, false, true),
        };
        self.pl_variant = pl;
        self.use_nm = nm;
        self.use_cons = cons;
        self
    }
}

/// Loss switches compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Org,
    Upd,
    NoPl,
    NoCst,
    NoNm,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] =
        [AblationVariant::Org, AblationVariant::Upd, AblationVariant::NoPl, AblationVariant::NoCst, AblationVariant::NoNm];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Org => "org",
            AblationVariant::Upd => "upd",
            AblationVariant::NoPl => "no_pl",
            AblationVariant::NoCst => "no_cst",
            AblationVariant::NoNm => "no_nm",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| TtaError::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Prediction,
    Centroid,
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    pub round: usize,
    pub source: LabelSource,
}

/// `-||P||_F` of the prediction matrix.
pub fn nuclear_norm_loss(g: &mut Graph, logits: Var, through_softmax: bool) -> Var {
    let norm = g.frobenius_norm(logits, through_softmax);
    g.scale(norm, -1.0)
}

pub fn pseudo_label_loss_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(g, logits, labels)
}

/// Class-weighted NLL on log-softmax outputs, normalized by the weight sum.
pub fn pseudo_label_loss_nll(g: &mut Graph, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let c = g.value(logits).cols();
    if weights.len() != c {
        return Err(TtaError::WeightLengthMismatch { got: weights.len(), expected: c });
    }
    if labels.len() != g.value(logits).rows() {
        return Err(TtaError::Shape(format!("{} labels for {} rows", labels.len(), g.value(logits).rows())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(TtaError::LabelOutOfRange { label, classes: c });
    }
    let logp = g.log_softmax(logits);
    Ok(g.nll(logp, labels, weights))
}

/// Cross-entropy of strong-view logits against fixed weak-view probabilities.
pub fn consistency_loss(g: &mut Graph, logits_strong: Var, probs_weak: &Tensor) -> Result<Var> {
    if g.value(logits_strong).shape() != probs_weak.shape() {
        return Err(TtaError::Shape(format!(
            "strong logits {:?} vs weak probabilities {:?}",
            g.value(logits_strong).shape(),
            probs_weak.shape()
        )));
    }
    Ok(g.soft_cross_entropy(logits_strong, probs_weak.clone()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn nearest_centroid(features: &Tensor, centroids: &[Option<Vec<f64>>]) -> Vec<usize> {
    (0..features.rows())
        .map(|i| {
            let f = features.row(i);
            let mut best = (0, f64::NEG_INFINITY);
            for (k, c) in centroids.iter().enumerate() {
                if let Some(c) = c {
                    let s = cosine(f, c);
                    // Strict comparison keeps the lowest id on ties.
                    if s > best.1 {
                        best = (k, s);
                    }
                }
            }
            best.0
        })
        .collect()
}

fn weighted_centroids(features: &Tensor, weights: &Tensor, previous: &[Option<Vec<f64>>]) -> Vec<Option<Vec<f64>>> {
    let (m, d, c) = (features.rows(), features.cols(), weights.cols());
    (0..c)
        .map(|k| {
            let mut acc = vec![0.0; d];
            let mut mass = 0.0;
            for i in 0..m {
                let w = weights.row(i)[k];
                if w != 0.0 {
                    mass += w;
                    for (a, f) in acc.iter_mut().zip(features.row(i)) {
                        *a += w * f;
                    }
                }
            }
            if mass > 0.0 {
                Some(acc.into_iter().map(|a| a / mass).collect())
            } else {
                previous.get(k).cloned().flatten()
            }
        })
        .collect()
}

/// Centroid refinement of predicted labels. Round 0 is the argmax of
/// `probs`; round 1 assigns each sample to the nearest (cosine) centroid of
/// the prediction-weighted class means; later rounds recompute centroids
/// from the previous round's hard labels. A class left without samples
/// keeps its previous centroid.
pub fn refine_pseudo_labels(features: &Tensor, probs: &Tensor, rounds: usize) -> Result<PseudoLabelSet> {
    if features.rows() != probs.rows() {
        return Err(TtaError::Shape(format!("{} feature rows vs {} prediction rows", features.rows(), probs.rows())));
    }
    let c = probs.cols();
    let mut labels = probs.argmax_rows();
    if rounds == 0 {
        return Ok(PseudoLabelSet { labels, round: 0, source: LabelSource::Prediction });
    }
    let mut centroids = weighted_centroids(features, probs, &[]);
    labels = nearest_centroid(features, &centroids);
    for _ in 1..rounds {
        let hard = one_hot(&labels, c)?;
        centroids = weighted_centroids(features, &hard, &centroids);
        labels = nearest_centroid(features, &centroids);
    }
    let source = if rounds == 1 { LabelSource::Centroid } else { LabelSource::Refined };
    Ok(PseudoLabelSet { labels, round: rounds, source })
}

/// Features and class probabilities of the whole set, eval mode.
pub fn predict_set(model: &AdaptableModel, set: &[Example], batch_size: usize) -> Result<(Tensor, Tensor)> {
    let mut feats = Vec::new();
    let mut probs = Vec::new();
    for chunk in set.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (logits, f) = model.infer(input_batch(&refs), Head::Class, ForwardMode::Eval)?;
        feats.push(f);
        probs.push(softmax(&logits));
    }
    Ok((concat_rows(&feats, model.feature_dim()), concat_rows(&probs, model.num_outputs(Head::Class))))
}

fn concat_rows(parts: &[Tensor], cols: usize) -> Tensor {
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![data.len() / cols.max(1), cols], data)
}

pub fn generate_pseudo_labels(model: &AdaptableModel, test_set: &[Example], rounds: usize) -> Result<PseudoLabelSet> {
    let (features, probs) = predict_set(model, test_set, 128)?;
    refine_pseudo_labels(&features, &probs, rounds)
}

/// Per-step loss components; disabled components are recorded as 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StdaStep {
    pub epoch: usize,
    pub nm: f64,
    pub pl: f64,
    pub cons: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StdaReport {
    pub steps: Vec<StdaStep>,
    /// Mean pseudo-label loss per epoch.
    pub epoch_pl_loss: Vec<f64>,
    pub epoch_total_loss: Vec<f64>,
}

pub fn stda_adapt(model: &mut AdaptableModel, test_set: &[Example], cfg: &StdaConfig) -> Result<StdaReport> {
    stda_adapt_observed(model, test_set, cfg, |_, _| Ok(()))
}

/// [`stda_adapt`] with a callback after every epoch (epoch index, model).
pub fn stda_adapt_observed(
    model: &mut AdaptableModel,
    test_set: &[Example],
    cfg: &StdaConfig,
    mut on_epoch: impl FnMut(usize, &AdaptableModel) -> Result<()>,
) -> Result<StdaReport> {
    cfg.validate()?;
    let c = model.num_outputs(Head::Class);
    let weights = cfg.nll_weights.clone().unwrap_or_else(|| vec![1.0; c]);
    if weights.len() != c {
        return Err(TtaError::WeightLengthMismatch { got: weights.len(), expected: c });
    }
    let trainable = AdaptableModel::all_trainable_tags();
    let mut opt = Sgd::new(cfg.sgd, trainable.clone());
    let mut order_rng = keyed_rng(cfg.seed, "stda-order");
    let mut aug_rng = keyed_rng(cfg.seed, "stda-augment");
    let mut report = StdaReport::default();
    let mut order: Vec<usize> = (0..test_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let pseudo = if cfg.pl_active() {
            Some(generate_pseudo_labels(model, test_set, cfg.refinement_rounds)?)
        } else {
            None
        };
        order.shuffle(&mut order_rng);
        let (mut pl_sum, mut total_sum, mut count) = (0.0, 0.0, 0usize);
        for chunk in batches(&order, cfg.batch_size) {
            let weak: Vec<SpectrogramImage> =
                chunk.iter().map(|&i| weak_augment(&test_set[i].input, &cfg.augment, &mut aug_rng)).collect();
            let weak_refs: Vec<&SpectrogramImage> = weak.iter().collect();
            let mut g = Graph::new();
            let pass_w =
                model.forward(&mut g, SpectrogramImage::batch_tensor(&weak_refs), Head::Class, ForwardMode::Train, &trainable)?;
            let mut step = StdaStep { epoch, ..Default::default() };
            let mut terms: Vec<(Var, f64)> = Vec::new();
            if cfg.nm_active() {
                let nm = nuclear_norm_loss(&mut g, pass_w.logits, cfg.nm_through_softmax);
                step.nm = g.value(nm).item();
                terms.push((nm, cfg.lambda1));
            }
            if let Some(pl) = &pseudo {
                let labels: Vec<usize> = chunk.iter().map(|&i| pl.labels[i]).collect();
                let loss = match cfg.pl_variant {
                    PlVariant::Upd => pseudo_label_loss_nll(&mut g, pass_w.logits, &labels, &weights)?,
                    _ => pseudo_label_loss_ce(&mut g, pass_w.logits, &labels)?,
                };
                step.pl = g.value(loss).item();
                terms.push((loss, cfg.lambda2));
            }
            if cfg.cons_active() {
                let probs_weak = softmax(g.value(pass_w.logits));
                let strong: Vec<SpectrogramImage> =
                    chunk.iter().map(|&i| strong_augment(&test_set[i].input, &cfg.augment, &mut aug_rng)).collect();
                let strong_refs: Vec<&SpectrogramImage> = strong.iter().collect();
                let pass_s = model.forward(
                    &mut g,
                    SpectrogramImage::batch_tensor(&strong_refs),
                    Head::Class,
                    ForwardMode::Train,
                    &trainable,
                )?;
                let cons = consistency_loss(&mut g, pass_s.logits, &probs_weak)?;
                step.cons = g.value(cons).item();
                terms.push((cons, cfg.lambda3));
            }
            let total = g.weighted_sum(&terms);
            step.total = g.value(total).item();
            if !step.total.is_finite() {
                return Err(TtaError::DivergedLoss(step.total, report.steps.len()));
            }
            g.backward(total);
            opt.step(model.params_mut(), &g);
            model.apply_stat_updates(&pass_w.stat_updates);
            pl_sum += step.pl * chunk.len() as f64;
            total_sum += step.total * chunk.len() as f64;
            count += chunk.len();
            report.steps.push(step);
        }
        let n = count.max(1) as f64;
        report.epoch_pl_loss.push(pl_sum / n);
        report.epoch_total_loss.push(total_sum / n);
        on_epoch(epoch, model)?;
    }
    Ok(report)
}

/// Per-domain adapted teachers. All share one architecture.
#[derive(Clone, Debug, Default)]
pub struct TeacherBank {
    teachers: BTreeMap<String, AdaptableModel>,
}

impl TeacherBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, domain: impl Into<String>, teacher: AdaptableModel) -> Result<()> {
        if let Some(first) = self.teachers.values().next() {
            if first.config() != teacher.config() {
                return Err(TtaError::Shape("teacher architectures differ".into()));
            }
        }
        self.teachers.insert(domain.into(), teacher);
        Ok(())
    }

    pub fn get(&self, domain: &str) -> Option<&AdaptableModel> {
        self.teachers.get(domain)
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.teachers.keys().map(String::as_str)
    }

    pub fn config(&self) -> Option<&ModelConfig> {
        self.teachers.values().next().map(|t| t.config())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtdaHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Both shape parameters of the Beta distribution for the mix weight.
    pub beta_alpha: f64,
    pub seed: u64,
}

impl Default for MtdaHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            sgd: SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 },
            beta_alpha: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MtdaReport {
    pub epoch_loss: Vec<f64>,
    pub teacher_labels: BTreeMap<String, Vec<usize>>,
}

/// Mixed soft targets `l * onehot(yi) + (1 - l) * onehot(yj)`.
pub fn mix_targets(yi: &[usize], yj: &[usize], lambdas: &[f64], classes: usize) -> Result<Tensor> {
    if yi.len() != yj.len() || yi.len() != lambdas.len() {
        return Err(TtaError::Shape("mixup label/weight lengths differ".into()));
    }
    let a = one_hot(yi, classes)?;
    let b = one_hot(yj, classes)?;
    let mut out = Tensor::zeros(&[yi.len(), classes]);
    for (r, &l) in lambdas.iter().enumerate() {
        for k in 0..classes {
            out.data_mut()[r * classes + k] = l * a.row(r)[k] + (1.0 - l) * b.row(r)[k];
        }
    }
    Ok(out)
}

/// `l * CE(logits, yi) + (1 - l) * CE(logits, yj)`, per sample, batch mean.
pub fn mtda_loss(g: &mut Graph, logits: Var, yi: &[usize], yj: &[usize], lambdas: &[f64]) -> Result<Var> {
    let c = g.value(logits).cols();
    let targets = mix_targets(yi, yj, lambdas, c)?;
    Ok(g.soft_cross_entropy(logits, targets))
}

/// Trains a fresh student on mixup pairs drawn from two different target
/// domains, supervised by each domain's teacher labels.
pub fn mtda_train(
    teachers: &TeacherBank,
    target_sets: &BTreeMap<String, Vec<Example>>,
    hyper: &MtdaHyper,
) -> Result<(AdaptableModel, MtdaReport)> {
    if teachers.len() < 2 || target_sets.len() < 2 {
        return Err(TtaError::FewerThanTwoDomains(teachers.len().min(target_sets.len())));
    }
    let domains: Vec<&String> = target_sets.keys().collect();
    let mut report = MtdaReport::default();
    for d in &domains {
        let teacher = teachers.get(d).ok_or_else(|| TtaError::Config(format!("no teacher for domain {d}")))?;
        let set = &target_sets[*d];
        if set.is_empty() {
            return Err(TtaError::Config(format!("target domain {d} is empty")));
        }
        let (_, probs) = predict_set(teacher, set, 128)?;
        report.teacher_labels.insert((*d).clone(), probs.argmax_rows());
    }
    let config = teachers.config().cloned().ok_or(TtaError::FewerThanTwoDomains(0))?;
    let mut student = AdaptableModel::new(config, crate::seed::sub_seed(hyper.seed, "mtda-student"))?;
    let trainable = AdaptableModel::all_trainable_tags();
    let mut opt = Sgd::new(hyper.sgd, trainable.clone());
    let mut rng = rng_from_seed(crate::seed::sub_seed(hyper.seed, "mtda-mix"));
    let beta = Beta::new(hyper.beta_alpha, hyper.beta_alpha)
        .map_err(|e| TtaError::Config(format!("invalid mix distribution: {e}")))?;
    let total: usize = target_sets.values().map(Vec::len).sum();
    let bs = hyper.batch_size.max(2);
    let steps = total.div_ceil(bs);

    for _ in 0..hyper.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let (mut mixed, mut yi, mut yj, mut lambdas) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for _ in 0..bs {
                let di = rng.random_range(0..domains.len());
                let mut dj = rng.random_range(0..domains.len() - 1);
                if dj >= di {
                    dj += 1;
                }
                let (si, sj) = (&target_sets[domains[di]], &target_sets[domains[dj]]);
                let (a, b) = (rng.random_range(0..si.len()), rng.random_range(0..sj.len()));
                let l = beta.sample(&mut rng);
                mixed.push(si[a].input.mix(&sj[b].input, l));
                yi.push(report.teacher_labels[domains[di]][a]);
                yj.push(report.teacher_labels[domains[dj]][b]);
                lambdas.push(l);
            }
            let refs: Vec<&SpectrogramImage> = mixed.iter().collect();
            let mut g = Graph::new();
            let pass = student.forward(&mut g, SpectrogramImage::batch_tensor(&refs), Head::Class, ForwardMode::Train, &trainable)?;
            let loss = mtda_loss(&mut g, pass.logits, &yi, &yj, &lambdas)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TtaError::DivergedLoss(value, report.epoch_loss.len()));
            }
            g.backward(loss);
            opt.step(student.params_mut(), &g);
            student.apply_stat_updates(&pass.stat_updates);
            loss_sum += value;
        }
        report.epoch_loss.push(loss_sum / steps.max(1) as f64);
    }
    Ok((student, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::cross_entropy_value;
    use crate::models::ModelFamily;
    use crate::seed::rng_from_seed;

    fn logits_graph(rows: usize, cols: usize, seed: u64) -> (Graph, Var) {
        let mut rng = rng_from_seed(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let v = g.input(Tensor::new(vec![rows, cols], data));
        (g, v)
    }

    #[test]
    fn nuclear_norm_closed_forms() {
        let mut g = Graph::new();
        let onehot = g.input(Tensor::new(vec![3, 4], vec![
            60.0, 0.0, 0.0, 0.0, 0.0, 60.0, 0.0, 0.0, 0.0, 0.0, 0.0, 60.0,
        ]));
        let l = nuclear_norm_loss(&mut g, onehot, true);
        assert!((g.value(l).item() + 3f64.sqrt()).abs() < 1e-12);
        let uniform = g.input(Tensor::zeros(&[6, 4]));
        let l = nuclear_norm_loss(&mut g, uniform, true);
        assert!((g.value(l).item() + (6.0f64 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn nll_is_ce_over_c_with_unit_weights() {
        for seed in 0..20 {
            let (mut g, z) = logits_graph(5, 4, seed);
            let labels = [0, 3, 1, 1, 2];
            let ce = pseudo_label_loss_ce(&mut g, z, &labels).unwrap();
            let nll = pseudo_label_loss_nll(&mut g, z, &labels, &[1.0; 4]).unwrap();
            assert!((g.value(nll).item() - g.value(ce).item() / 4.0).abs() < 1e-12);
            assert!((g.value(ce).item() - cross_entropy_value(g.value(z), &labels).unwrap()).abs() < 1e-12);
        }
        let (mut g, z) = logits_graph(2, 3, 1);
        assert!(matches!(
            pseudo_label_loss_nll(&mut g, z, &[0, 1], &[1.0; 2]),
            Err(TtaError::WeightLengthMismatch { got: 2, expected: 3 })
        ));
        let zero_on_pseudo = pseudo_label_loss_nll(&mut g, z, &[0, 0], &[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.value(zero_on_pseudo).item(), 0.0);
    }

    #[test]
    fn consistency_edges() {
        let mut g = Graph::new();
        let strong = g.input(Tensor::zeros(&[2, 5]));
        let weak = Tensor::new(vec![2, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let l = consistency_loss(&mut g, strong, &weak).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        assert!(consistency_loss(&mut g, strong, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn refinement_stationary_and_deterministic() {
        let features = Tensor::new(vec![4, 2], vec![1.0, 0.1, 0.9, 0.0, 0.0, 1.0, 0.1, 0.8]);
        let probs = Tensor::new(vec![4, 2], vec![0.6, 0.4, 0.4, 0.6, 0.3, 0.7, 0.2, 0.8]);
        let two = refine_pseudo_labels(&features, &probs, 2).unwrap();
        assert_eq!(two.labels, vec![0, 0, 1, 1]);
        let five = refine_pseudo_labels(&features, &probs, 5).unwrap();
        assert_eq!(two.labels, five.labels);
        assert_eq!(five.source, LabelSource::Refined);
        // Identical centroids tie; the lowest class id wins.
        let same = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let p = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(refine_pseudo_labels(&same, &p, 1).unwrap().labels, vec![0, 0]);
    }

    #[test]
    fn config_validation() {
        let cfg = StdaConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(TtaError::AllLossesDisabled)));
        let cfg = StdaConfig::default().with_variant(AblationVariant::NoNm);
        assert!(!cfg.use_nm && cfg.use_cons && cfg.pl_variant == PlVariant::Org);
        assert_eq!("no_cst".parse::<AblationVariant>().unwrap(), AblationVariant::NoCst);
    }

    #[test]
    fn mix_boundary_is_single_domain_ce() {
        let (mut g, z) = logits_graph(3, 4, 9);
        let mixed = mtda_loss(&mut g, z, &[1, 2, 3], &[0, 0, 0], &[1.0; 3]).unwrap();
        let plain = cross_entropy(&mut g, z, &[1, 2, 3]).unwrap();
        assert!((g.value(mixed).item() - g.value(plain).item()).abs() < 1e-12);
    }

    #[test]
    fn stda_traces_sum_to_total() {
        let mut rng = rng_from_seed(5);
        let set: Vec<Example> = (0..12)
            .map(|i| {
                let v = (0..16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
                Example::new(SpectrogramImage::new(v, 16, 16).unwrap(), i % 3)
            })
            .collect();
        let mut model = AdaptableModel::new(ModelConfig::new(ModelFamily::GnTransformer, 3, 16, 16).with_width(8).with_depth(1), 1).unwrap();
        let cfg = StdaConfig { epochs: 2, batch_size: 5, ..Default::default() };
        let report = stda_adapt(&mut model, &set, &cfg).unwrap();
        assert_eq!(report.epoch_pl_loss.len(), 2);
        for s in &report.steps {
            let sum = cfg.lambda1 * s.nm + cfg.lambda2 * s.pl + cfg.lambda3 * s.cons;
            assert!((sum - s.total).abs() < 1e-6);
        }
    }

    #[test]
    fn mtda_needs_two_domains() {
        let bank = TeacherBank::new();
        assert!(matches!(
            mtda_train(&bank, &BTreeMap::new(), &MtdaHyper::default()),
            Err(TtaError::FewerThanTwoDomains(0))
        ));
    }

    #[test]
    fn two_cluster_refinement_recovers_labels() {
        use rand_distr::{Distribution, Normal};
        for seed in 0..5 {
            let mut rng = rng_from_seed(seed);
            let spread = Normal::new(0.0, 0.5).unwrap();
            let n = 200;
            let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let mut feats = Vec::new();
            let mut probs = Vec::new();
            for &y in &truth {
                let centre = if y == 0 { [4.0, 1.0] } else { [1.0, 4.0] };
                feats.extend(centre.iter().map(|c| c + spread.sample(&mut rng)));
                let noisy = if rng.random_bool(0.1) { 1 - y } else { y };
                probs.extend(if noisy == 0 { [0.8, 0.2] } else { [0.2, 0.8] });
            }
            let pl = refine_pseudo_labels(&Tensor::new(vec![n, 2], feats), &Tensor::new(vec![n, 2], probs), 2).unwrap();
            let agree = pl.labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
            assert!(agree as f64 >= 0.99 * n as f64, "seed {seed}: {agree}/{n}");
        }
    }

    #[test]
    fn pure_norm_training_records_only_the_norm_term() {
        let mut rng = rng_from_seed(7);
        let set: Vec<Example> = (0..10)
            .map(|i| {
                let v = (0..16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
                Example::new(SpectrogramImage::new(v, 16, 16).unwrap(), i % 3)
            })
            .collect();
        let mut model = AdaptableModel::new(ModelConfig::new(ModelFamily::GnTransformer, 3, 16, 16).with_width(8).with_depth(1), 2).unwrap();
        let cfg = StdaConfig { epochs: 1, batch_size: 10, pl_variant: PlVariant::None, use_cons: false, ..Default::default() };
        let before = model.clone();
        let report = stda_adapt(&mut model, &set, &cfg).unwrap();
        assert_eq!(report.steps.len(), 1);
        let s = &report.steps[0];
        assert_eq!((s.pl, s.cons), (0.0, 0.0));
        assert!((s.total - s.nm).abs() < 1e-12);
        // One full batch: the recorded term is the norm of the pre-update predictions
        // of the weakly augmented inputs, so it lies in [-sqrt(B), -sqrt(B / c)].
        assert!(s.nm <= -(10.0f64 / 3.0).sqrt() + 1e-9 && s.nm >= -(10f64).sqrt() - 1e-9);
        assert!(!model.params().changed(before.params()).is_empty());
    }

    #[test]
    fn mtda_self_distillation_matches_teacher() {
        use crate::models::train::accuracy;
        use crate::models::{pretrain_classifier, TrainHyper};
        let mut rng = rng_from_seed(11);
        let set: Vec<Example> = (0..120)
            .map(|i| {
                let y = i % 3;
                let v = (0..8 * 8).map(|j| if j / 8 == 2 * y + 1 { 1.0 } else { 0.0 } + rng.random_range(-0.4..0.4)).collect();
                Example::new(SpectrogramImage::new(v, 8, 8).unwrap(), y)
            })
            .collect();
        let cfg = ModelConfig::new(ModelFamily::BnResNet, 3, 8, 8).with_depth(1);
        let mut teacher = AdaptableModel::new(cfg, 1).unwrap();
        pretrain_classifier(&mut teacher, &set, &TrainHyper { epochs: 10, batch_size: 16, ..Default::default() }).unwrap();
        let teacher_acc = accuracy(&teacher, &set, 64).unwrap();
        let mut bank = TeacherBank::new();
        bank.insert("a", teacher.clone()).unwrap();
        bank.insert("b", teacher).unwrap();
        let targets: BTreeMap<String, Vec<Example>> = [("a".to_string(), set.clone()), ("b".to_string(), set.clone())].into();
        let (student, report) = mtda_train(&bank, &targets, &MtdaHyper { batch_size: 16, ..Default::default() }).unwrap();
        let student_acc = accuracy(&student, &set, 64).unwrap();
        assert!((student_acc - teacher_acc).abs() <= 0.02, "teacher {teacher_acc} student {student_acc}");
        assert_eq!(report.epoch_loss.len(), 10);
    }
}
