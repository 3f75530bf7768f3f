//! Supervised pre-training on the labeled source split.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, AdaptableModel, ForwardMode, Head};
use crate::error::{Result, TtaError};
use crate::features::{ShiftClass, SpectrogramImage};
use crate::nn::{Graph, Sgd, SgdConfig, TagSet, Tensor};
use crate::seed::rng_from_seed;

/// A labeled spectrogram, optionally with its left/right time-shifted views
/// for the pretext task.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: SpectrogramImage,
    pub label: usize,
    pub shifted: Option<Box<[SpectrogramImage; 2]>>,
}

impl Example {
    pub fn new(input: SpectrogramImage, label: usize) -> Self {
        Self { input, label, shifted: None }
    }

    pub fn view(&self, cls: ShiftClass) -> Result<&SpectrogramImage> {
        match cls {
            ShiftClass::NoShift => Ok(&self.input),
            ShiftClass::LeftShift | ShiftClass::RightShift => self
                .shifted
                .as_ref()
                .map(|v| &v[cls.label() - 1])
                .ok_or_else(|| TtaError::Config("example has no time-shifted views".into())),
        }
    }
}

pub fn input_batch(examples: &[&Example]) -> Tensor {
    let inputs: Vec<&SpectrogramImage> = examples.iter().map(|e| &e.input).collect();
    SpectrogramImage::batch_tensor(&inputs)
}

/// Each example once per shift class, with the shift class as label.
pub fn pretext_batch(examples: &[&Example]) -> Result<(Tensor, Vec<usize>)> {
    let mut views = Vec::with_capacity(examples.len() * 3);
    let mut labels = Vec::with_capacity(examples.len() * 3);
    for cls in ShiftClass::ALL {
        for e in examples {
            views.push(e.view(cls)?);
            labels.push(cls.label());
        }
    }
    Ok((SpectrogramImage::batch_tensor(&views), labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Parameter groups to update; all trainable groups when `None`.
    pub trainable: Option<TagSet>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            sgd: SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 },
            seed: 0,
            trainable: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub class: f64,
    pub pretext: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub epoch_pretext_accuracy: Vec<f64>,
    pub steps: Vec<StepLoss>,
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TtaError::DivergedLoss(loss, step))
    }
}

fn argmax_hits(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Ordinary cross-entropy training of the class head and backbone.
pub fn pretrain_classifier(model: &mut AdaptableModel, train_set: &[Example], hyper: &TrainHyper) -> Result<TrainReport> {
    let trainable = hyper.trainable.clone().unwrap_or_else(AdaptableModel::all_trainable_tags);
    let mut opt = Sgd::new(hyper.sgd, trainable.clone());
    let mut rng = rng_from_seed(hyper.seed);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let mut g = Graph::new();
            let pass = model.forward(&mut g, input_batch(&batch), Head::Class, ForwardMode::Train, &trainable)?;
            let loss = cross_entropy(&mut g, pass.logits, &labels)?;
            let value = g.value(loss).item();
            check_finite(value, report.steps.len())?;
            hits += argmax_hits(g.value(pass.logits), &labels);
            g.backward(loss);
            opt.step(model.params_mut(), &g);
            model.apply_stat_updates(&pass.stat_updates);
            loss_sum += value * batch.len() as f64;
            report.steps.push(StepLoss { class: value, pretext: 0.0, total: value });
        }
        let n = train_set.len().max(1) as f64;
        report.epoch_loss.push(loss_sum / n);
        report.epoch_accuracy.push(hits as f64 / n);
    }
    Ok(report)
}

/// Joint training of the class task and the time-shift pretext task:
/// `CE(class head) + CE(pretext head)` over a shared backbone.
pub fn pretrain_ttt(model: &mut AdaptableModel, train_set: &[Example], hyper: &TrainHyper) -> Result<TrainReport> {
    if !model.has_head(Head::Pretext) {
        return Err(TtaError::HeadUnavailable("pretext"));
    }
    let trainable = hyper.trainable.clone().unwrap_or_else(AdaptableModel::all_trainable_tags);
    let mut opt = Sgd::new(hyper.sgd, trainable.clone());
    let mut rng = rng_from_seed(hyper.seed);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut pretext_hits) = (0.0, 0, 0);
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let (pretext_input, pretext_labels) = pretext_batch(&batch)?;
            let mut g = Graph::new();
            let cls = model.forward(&mut g, input_batch(&batch), Head::Class, ForwardMode::Train, &trainable)?;
            let cls_loss = cross_entropy(&mut g, cls.logits, &labels)?;
            let pre = model.forward(&mut g, pretext_input, Head::Pretext, ForwardMode::Train, &trainable)?;
            let pre_loss = cross_entropy(&mut g, pre.logits, &pretext_labels)?;
            let total = g.weighted_sum(&[(cls_loss, 1.0), (pre_loss, 1.0)]);
            let step = StepLoss { class: g.value(cls_loss).item(), pretext: g.value(pre_loss).item(), total: g.value(total).item() };
            check_finite(step.total, report.steps.len())?;
            hits += argmax_hits(g.value(cls.logits), &labels);
            pretext_hits += argmax_hits(g.value(pre.logits), &pretext_labels);
            g.backward(total);
            opt.step(model.params_mut(), &g);
            model.apply_stat_updates(&cls.stat_updates);
            loss_sum += step.total * batch.len() as f64;
            report.steps.push(step);
        }
        let n = train_set.len().max(1) as f64;
        report.epoch_loss.push(loss_sum / n);
        report.epoch_accuracy.push(hits as f64 / n);
        report.epoch_pretext_accuracy.push(pretext_hits as f64 / (3.0 * n));
    }
    Ok(report)
}

/// Top-1 accuracy of the class head in eval mode.
pub fn accuracy(model: &AdaptableModel, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let logits = model.logits(input_batch(&refs), Head::Class, ForwardMode::Eval)?;
        hits += argmax_hits(&logits, &labels);
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Pretext-head accuracy over all three shift views, eval mode.
pub fn pretext_accuracy(model: &AdaptableModel, examples: &[Example], batch_size: usize) -> Result<f64> {
    let mut hits = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (input, labels) = pretext_batch(&refs)?;
        let logits = model.logits(input, Head::Pretext, ForwardMode::Eval)?;
        hits += argmax_hits(&logits, &labels);
    }
    Ok(hits as f64 / (3 * examples.len()).max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{cross_entropy_value, ModelConfig, ModelFamily};
    use crate::nn::{tags, ParamGroupTag};
    use rand::Rng as _;

    /// Two classes: energy in the upper or the lower half of the image.
    fn separable(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let v = (0..8 * 8)
                    .map(|j| {
                        let upper = j < 32;
                        let base = if upper == (label == 0) { 1.0 } else { 0.0 };
                        base + rng.random_range(-0.5..0.5)
                    })
                    .collect();
                Example::new(SpectrogramImage::new(v, 8, 8).unwrap(), label)
            })
            .collect()
    }

    fn shifted(mut set: Vec<Example>, seed: u64) -> Vec<Example> {
        let mut rng = rng_from_seed(seed);
        for e in &mut set {
            let mut img = || {
                let v = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
                SpectrogramImage::new(v, 8, 8).unwrap()
            };
            e.shifted = Some(Box::new([img(), img()]));
        }
        set
    }

    fn bn_model() -> AdaptableModel {
        AdaptableModel::new(ModelConfig::new(ModelFamily::BnResNet, 2, 8, 8).with_depth(1), 3).unwrap()
    }

    fn dual_model() -> AdaptableModel {
        AdaptableModel::new(ModelConfig::new(ModelFamily::DualHeadResNet, 2, 8, 8).with_depth(1), 3).unwrap()
    }

    #[test]
    fn separable_set_is_learned() {
        let set = separable(64, 1);
        let mut m = bn_model();
        let hyper = TrainHyper { epochs: 20, batch_size: 16, ..Default::default() };
        let report = pretrain_classifier(&mut m, &set, &hyper).unwrap();
        assert!(accuracy(&m, &set, 32).unwrap() >= 0.95);
        assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
    }

    #[test]
    fn zero_epochs_and_repeatability() {
        let set = separable(16, 2);
        let mut m = bn_model();
        let before = m.params().clone();
        pretrain_classifier(&mut m, &set, &TrainHyper { epochs: 0, ..Default::default() }).unwrap();
        assert!(m.params().changed(&before).is_empty());

        let hyper = TrainHyper { epochs: 2, batch_size: 4, ..Default::default() };
        let (mut a, mut b) = (bn_model(), bn_model());
        pretrain_classifier(&mut a, &set, &hyper).unwrap();
        pretrain_classifier(&mut b, &set, &hyper).unwrap();
        assert!(a.params().changed(b.params()).is_empty());
    }

    #[test]
    fn ttt_step_zero_is_the_sum_of_both_losses() {
        let set = shifted(separable(12, 3), 4);
        let m0 = dual_model();
        let refs: Vec<&Example> = set.iter().collect();
        let labels: Vec<usize> = set.iter().map(|e| e.label).collect();
        let class = cross_entropy_value(&m0.logits(input_batch(&refs), Head::Class, ForwardMode::Train).unwrap(), &labels).unwrap();
        let (pin, plabels) = pretext_batch(&refs).unwrap();
        let pretext = cross_entropy_value(&m0.logits(pin, Head::Pretext, ForwardMode::Train).unwrap(), &plabels).unwrap();

        let mut m = m0.clone();
        let report = pretrain_ttt(&mut m, &set, &TrainHyper { epochs: 1, batch_size: 12, ..Default::default() }).unwrap();
        let s = &report.steps[0];
        assert!((s.class - class).abs() < 1e-6);
        assert!((s.pretext - pretext).abs() < 1e-6);
        assert!((s.total - class - pretext).abs() < 1e-6);
    }

    #[test]
    fn frozen_pretext_path_keeps_pretext_loss() {
        let set = shifted(separable(12, 5), 6);
        let mut m = dual_model();
        let hyper = TrainHyper {
            epochs: 3,
            batch_size: 12,
            trainable: Some(tags(&[ParamGroupTag::ClassHead])),
            ..Default::default()
        };
        let report = pretrain_ttt(&mut m, &set, &hyper).unwrap();
        let first = report.steps[0].pretext;
        assert!(report.steps.iter().all(|s| (s.pretext - first).abs() < 1e-12), "{:?}", report.steps);
        assert!(report.steps.last().unwrap().class < report.steps[0].class);
    }
}
