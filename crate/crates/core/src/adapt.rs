//! Online test-time adaptation: Tent (entropy on BN affine parameters), Norm
//! (batch statistics only) and TTT (time-shift pretext task).

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};
use crate::models::train::{input_batch, pretext_batch};
use crate::models::{cross_entropy, AdaptableModel, Example, ForwardMode, Head};
use crate::nn::{softmax, tags, Graph, ParamGroupTag, Sgd, SgdConfig, TagSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OnlineMode {
    Tent,
    Norm,
    Ttt,
}

impl OnlineMode {
    /// Parameter groups each mode may change.
    pub fn updatable(self) -> TagSet {
        match self {
            OnlineMode::Tent => tags(&[ParamGroupTag::BnAffine]),
            OnlineMode::Norm => TagSet::new(),
            OnlineMode::Ttt => tags(&[ParamGroupTag::SharedBackbone, ParamGroupTag::PretextHead]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub mode: OnlineMode,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    /// Restore the source weights before every batch.
    pub episodic_reset: bool,
}

impl OnlineConfig {
    pub fn new(mode: OnlineMode) -> Self {
        let lr = match mode {
            OnlineMode::Tent => 1e-3,
            OnlineMode::Norm => 0.0,
            OnlineMode::Ttt => 1e-3,
        };
        Self { mode, sgd: SgdConfig { lr, momentum: 0.9, weight_decay: 0.0 }, batch_size: 64, episodic_reset: false }
    }
}

/// Predictions for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPrediction {
    pub labels: Vec<usize>,
    pub probs: Tensor,
    /// The adaptation loss of this step (entropy sum for Tent/Norm, pretext
    /// cross-entropy for TTT).
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct OnlineAdaptState {
    model: AdaptableModel,
    source: AdaptableModel,
    optimizer: Sgd,
    pub config: OnlineConfig,
    pub step: usize,
    pub loss_trace: Vec<f64>,
}

impl OnlineAdaptState {
    pub fn new(model: AdaptableModel, config: OnlineConfig) -> Result<Self> {
        match config.mode {
            OnlineMode::Tent | OnlineMode::Norm if !model.has_batch_norm() => return Err(TtaError::NoBnLayers),
            OnlineMode::Ttt if !model.has_head(Head::Pretext) => return Err(TtaError::HeadUnavailable("pretext")),
            _ => {}
        }
        let optimizer = Sgd::new(config.sgd, config.mode.updatable());
        Ok(Self { source: model.clone(), model, optimizer, config, step: 0, loss_trace: Vec::new() })
    }

    pub fn model(&self) -> &AdaptableModel {
        &self.model
    }

    pub fn source(&self) -> &AdaptableModel {
        &self.source
    }

    pub fn into_model(self) -> AdaptableModel {
        self.model
    }

    fn reset_if_episodic(&mut self) {
        if self.config.episodic_reset {
            self.model = self.source.clone();
            self.optimizer.reset();
        }
    }

    fn record(&mut self, loss: f64) {
        self.step += 1;
        self.loss_trace.push(loss);
    }
}

fn predictions(logits: &Tensor, loss: f64) -> BatchPrediction {
    BatchPrediction { labels: logits.argmax_rows(), probs: softmax(logits), loss }
}

fn check_batch(batch: &[&Example]) -> Result<()> {
    if batch.len() < 2 {
        return Err(TtaError::BatchTooSmall(batch.len()));
    }
    Ok(())
}

/// One Tent step: forward with the batch's own statistics, back-propagate
/// the summed prediction entropy into BN affine parameters only. The
/// returned predictions come from that same forward pass.
pub fn tent_step(state: &mut OnlineAdaptState, batch: &[&Example]) -> Result<BatchPrediction> {
    if state.config.mode != OnlineMode::Tent {
        return Err(TtaError::Config(format!("tent_step on a {:?} state", state.config.mode)));
    }
    check_batch(batch)?;
    state.reset_if_episodic();
    let trainable = state.config.mode.updatable();
    let mut g = Graph::new();
    let pass = state.model.forward(&mut g, input_batch(batch), Head::Class, ForwardMode::BatchStats, &trainable)?;
    let loss = g.entropy_sum(pass.logits);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(TtaError::DivergedLoss(value, state.step));
    }
    let pred = predictions(g.value(pass.logits), value);
    g.backward(loss);
    state.optimizer.step(state.model.params_mut(), &g);
    state.record(value);
    Ok(pred)
}

/// Forward-only Norm adaptation: normalization uses the batch's own mean and
/// variance, nothing is written back.
pub fn norm_step(state: &mut OnlineAdaptState, batch: &[&Example]) -> Result<BatchPrediction> {
    if state.config.mode != OnlineMode::Norm {
        return Err(TtaError::Config(format!("norm_step on a {:?} state", state.config.mode)));
    }
    check_batch(batch)?;
    let logits = state.model.logits(input_batch(batch), Head::Class, ForwardMode::BatchStats)?;
    let entropy = {
        let p = softmax(&logits);
        -p.data().iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    };
    state.record(entropy);
    Ok(predictions(&logits, entropy))
}

/// One TTT step: the batch is expanded with its three shift classes, the
/// pretext cross-entropy updates the shared backbone and pretext head, then
/// the class head predicts the batch with the updated backbone.
pub fn ttt_step(state: &mut OnlineAdaptState, batch: &[&Example]) -> Result<BatchPrediction> {
    if state.config.mode != OnlineMode::Ttt {
        return Err(TtaError::Config(format!("ttt_step on a {:?} state", state.config.mode)));
    }
    if batch.is_empty() {
        return Err(TtaError::BatchTooSmall(0));
    }
    state.reset_if_episodic();
    let trainable = state.config.mode.updatable();
    let (pretext_input, pretext_labels) = pretext_batch(batch)?;
    let mut g = Graph::new();
    let pass = state.model.forward(&mut g, pretext_input, Head::Pretext, ForwardMode::Eval, &trainable)?;
    let loss = cross_entropy(&mut g, pass.logits, &pretext_labels)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(TtaError::DivergedLoss(value, state.step));
    }
    g.backward(loss);
    state.optimizer.step(state.model.params_mut(), &g);
    state.record(value);
    let logits = state.model.logits(input_batch(batch), Head::Class, ForwardMode::Eval)?;
    Ok(predictions(&logits, value))
}

pub fn adapt_batch(state: &mut OnlineAdaptState, batch: &[&Example]) -> Result<BatchPrediction> {
    match state.config.mode {
        OnlineMode::Tent => tent_step(state, batch),
        OnlineMode::Norm => norm_step(state, batch),
        OnlineMode::Ttt => ttt_step(state, batch),
    }
}

/// Consecutive batches of at most `size`; a trailing single sample is folded
/// into the previous batch so batch statistics stay defined.
pub fn batches<T>(items: &[T], size: usize) -> Vec<&[T]> {
    let size = size.max(2);
    let mut out: Vec<&[T]> = Vec::new();
    let mut start = 0;
    while start < items.len() {
        let mut end = (start + size).min(items.len());
        if items.len() - end == 1 {
            end = items.len();
        }
        out.push(&items[start..end]);
        start = end;
    }
    out
}

/// Runs the stream of batches through TTT, accumulating adaptation (unless
/// the state is episodic). Returns per-batch predictions.
pub fn ttt_online(state: &mut OnlineAdaptState, stream: &[Vec<&Example>]) -> Result<Vec<BatchPrediction>> {
    stream.iter().map(|b| ttt_step(state, b)).collect()
}

/// One online pass over `test_set` in order; returns predicted labels.
pub fn online_pass(state: &mut OnlineAdaptState, test_set: &[Example]) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(test_set.len());
    for chunk in batches(test_set, state.config.batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        labels.extend(adapt_batch(state, &refs)?.labels);
    }
    Ok(labels)
}

/// Percentage of wrong predictions.
pub fn error_rate(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let wrong = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    100.0 * wrong as f64 / truth.len() as f64
}

/// Repeats the online pass `epochs` times, carrying weights over, and
/// returns the error rate of each pass.
pub fn multi_epoch_adapt(state: &mut OnlineAdaptState, test_set: &[Example], epochs: usize) -> Result<Vec<f64>> {
    let truth: Vec<usize> = test_set.iter().map(|e| e.label).collect();
    (0..epochs.max(1)).map(|_| online_pass(state, test_set).map(|p| error_rate(&p, &truth))).collect()
}
