//! Model families with tagged parameter groups, pre-training and checkpoints.

pub mod checkpoint;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};
use crate::nn::{tags, BatchStats, Graph, NormKind, ParamGroupTag, ParamId, ParamStore, TagSet, Tensor, Var};
use crate::seed::{hash_hex, rng_from_seed, Rng};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{pretrain_classifier, pretrain_ttt, Example, TrainHyper, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    /// Residual CNN with batch norm, the TENT model.
    BnResNet,
    /// Group-norm residual CNN with a class head and a time-shift head, the TTT model.
    DualHeadResNet,
    /// Group-norm convolutional embedding followed by attention blocks, the CoNMix model.
    GnTransformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Class,
    Pretext,
}

/// How normalization layers pick their statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    /// Batch statistics, running averages updated afterwards.
    Train,
    /// Stored running statistics.
    Eval,
    /// Batch statistics, running averages left alone.
    BatchStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub num_classes: usize,
    pub num_shift_classes: usize,
    /// Input spectrogram height (mel bins) and width (frames).
    pub input_height: usize,
    pub input_width: usize,
    /// Base channel count (CNNs) or token width (transformer).
    pub width: usize,
    /// Residual blocks (CNNs) or attention blocks (transformer).
    pub depth: usize,
    pub heads: usize,
    pub groups: usize,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn new(family: ModelFamily, num_classes: usize, input_height: usize, input_width: usize) -> Self {
        let (width, depth) = match family {
            ModelFamily::BnResNet => (8, 4),
            ModelFamily::DualHeadResNet => (8, 12),
            ModelFamily::GnTransformer => (32, 4),
        };
        Self {
            family,
            num_classes,
            num_shift_classes: 3,
            input_height,
            input_width,
            width,
            depth,
            heads: 4,
            groups: 4,
            bn_momentum: 0.1,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn hash(&self) -> String {
        hash_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TtaError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.width == 0 || self.depth == 0 {
            return bad("width and depth must be positive".into());
        }
        if self.family == ModelFamily::GnTransformer && !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.family != ModelFamily::BnResNet && !self.width.is_multiple_of(self.groups) {
            return bad(format!("width {} not divisible by {} groups", self.width, self.groups));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum NormLayer {
    Batch { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId },
    Group { gamma: ParamId, beta: ParamId, groups: usize },
}

#[derive(Clone, Debug)]
struct ConvNorm {
    weight: ParamId,
    norm: NormLayer,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    first: ConvNorm,
    second: ConvNorm,
    shortcut: Option<ConvNorm>,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
enum Backbone {
    ResNet { stem: ConvNorm, blocks: Vec<BasicBlock> },
    Transformer { embed: Vec<ConvNorm>, pos: ParamId, blocks: Vec<AttentionBlock>, final_ln: LayerNorm },
}

/// One forward pass recorded on a graph.
pub struct ForwardPass {
    /// Penultimate features, `[B, feature_dim]`.
    pub features: Var,
    pub logits: Var,
    /// Batch statistics to fold into running averages (train mode only).
    pub stat_updates: Vec<(ParamId, ParamId, BatchStats)>,
}

/// A classifier whose every parameter and buffer carries a [`ParamGroupTag`].
#[derive(Clone, Debug)]
pub struct AdaptableModel {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    class_head: Linear,
    pretext_head: Option<Linear>,
    feature_dim: usize,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    family: ModelFamily,
    groups: usize,
}

impl Builder<'_> {
    fn conv_norm(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvNorm {
        let weight =
            self.store.add_he(format!("{name}.conv.weight"), ParamGroupTag::SharedBackbone, &[cout, cin, k, k], cin * k * k, self.rng);
        let norm = if self.family == ModelFamily::BnResNet {
            NormLayer::Batch {
                gamma: self.store.add(format!("{name}.bn.weight"), ParamGroupTag::BnAffine, Tensor::full(&[cout], 1.0)),
                beta: self.store.add(format!("{name}.bn.bias"), ParamGroupTag::BnAffine, Tensor::zeros(&[cout])),
                mean: self.store.add(format!("{name}.bn.running_mean"), ParamGroupTag::BnStats, Tensor::zeros(&[cout])),
                var: self.store.add(format!("{name}.bn.running_var"), ParamGroupTag::BnStats, Tensor::full(&[cout], 1.0)),
            }
        } else {
            NormLayer::Group {
                gamma: self.store.add(format!("{name}.gn.weight"), ParamGroupTag::SharedBackbone, Tensor::full(&[cout], 1.0)),
                beta: self.store.add(format!("{name}.gn.bias"), ParamGroupTag::SharedBackbone, Tensor::zeros(&[cout])),
                groups: self.groups.min(cout),
            }
        };
        ConvNorm { weight, norm, stride, pad: k / 2 }
    }

    fn linear(&mut self, name: &str, tag: ParamGroupTag, fin: usize, fout: usize) -> Linear {
        Linear {
            weight: self.store.add_uniform(format!("{name}.weight"), tag, &[fout, fin], fin, self.rng),
            bias: self.store.add(format!("{name}.bias"), tag, Tensor::zeros(&[fout])),
        }
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.store.add(format!("{name}.weight"), ParamGroupTag::SharedBackbone, Tensor::full(&[dim], 1.0)),
            beta: self.store.add(format!("{name}.bias"), ParamGroupTag::SharedBackbone, Tensor::zeros(&[dim])),
        }
    }
}

/// Output size of a 3x3, pad-1 convolution with the given stride.
fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

impl AdaptableModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: &mut rng, family: config.family, groups: config.groups };
        let w = config.width;
        let (backbone, feature_dim) = match config.family {
            ModelFamily::BnResNet | ModelFamily::DualHeadResNet => {
                let stem = b.conv_norm("stem", 1, w, 3, 2);
                let mut blocks = Vec::with_capacity(config.depth);
                let mut cin = w;
                for i in 0..config.depth {
                    // Downsample on the first two blocks, double width on the second.
                    let stride = if i < 2 { 2 } else { 1 };
                    let cout = if i == 0 { w } else { 2 * w };
                    let name = format!("block{i}");
                    let first = b.conv_norm(&format!("{name}.a"), cin, cout, 3, stride);
                    let second = b.conv_norm(&format!("{name}.b"), cout, cout, 3, 1);
                    let shortcut =
                        (stride != 1 || cin != cout).then(|| b.conv_norm(&format!("{name}.short"), cin, cout, 1, stride));
                    blocks.push(BasicBlock { first, second, shortcut });
                    cin = cout;
                }
                (Backbone::ResNet { stem, blocks }, cin)
            }
            ModelFamily::GnTransformer => {
                let embed = vec![
                    b.conv_norm("embed0", 1, w / 2, 3, 2),
                    b.conv_norm("embed1", w / 2, w, 3, 2),
                    b.conv_norm("embed2", w, w, 3, 2),
                ];
                let (mut h, mut wd) = (config.input_height, config.input_width);
                for _ in 0..3 {
                    h = conv_out(h, 2);
                    wd = conv_out(wd, 2);
                }
                let tokens = h * wd;
                let pos = {
                    let data = (0..tokens * w).map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, b.rng) * 0.02).collect();
                    b.store.add("pos_embed", ParamGroupTag::SharedBackbone, Tensor::new(vec![tokens, w], data))
                };
                let blocks = (0..config.depth)
                    .map(|i| {
                        let n = format!("attn{i}");
                        let t = ParamGroupTag::SharedBackbone;
                        AttentionBlock {
                            ln1: b.layer_norm(&format!("{n}.ln1"), w),
                            q: b.linear(&format!("{n}.q"), t, w, w),
                            k: b.linear(&format!("{n}.k"), t, w, w),
                            v: b.linear(&format!("{n}.v"), t, w, w),
                            proj: b.linear(&format!("{n}.proj"), t, w, w),
                            ln2: b.layer_norm(&format!("{n}.ln2"), w),
                            fc1: b.linear(&format!("{n}.fc1"), t, w, 2 * w),
                            fc2: b.linear(&format!("{n}.fc2"), t, 2 * w, w),
                        }
                    })
                    .collect();
                let final_ln = b.layer_norm("final_ln", w);
                (Backbone::Transformer { embed, pos, blocks, final_ln }, w)
            }
        };
        let class_head = b.linear("class_head", ParamGroupTag::ClassHead, feature_dim, config.num_classes);
        let pretext_head = (config.family == ModelFamily::DualHeadResNet)
            .then(|| b.linear("pretext_head", ParamGroupTag::PretextHead, feature_dim, config.num_shift_classes));
        Ok(Self { config, params: store, backbone, class_head, pretext_head, feature_dim })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_outputs(&self, head: Head) -> usize {
        match head {
            Head::Class => self.config.num_classes,
            Head::Pretext => self.config.num_shift_classes,
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.params.count_with_tag(ParamGroupTag::BnAffine) > 0
    }

    pub fn has_head(&self, head: Head) -> bool {
        head == Head::Class || self.pretext_head.is_some()
    }

    /// Records a forward pass of `input` (`[B, 1, H, W]`) on `g`. Parameters
    /// whose tag is in `trainable` are bound as gradient leaves.
    pub fn forward(&self, g: &mut Graph, input: Tensor, head: Head, mode: ForwardMode, trainable: &TagSet) -> Result<ForwardPass> {
        let s = input.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.input_height || s[3] != self.config.input_width {
            return Err(TtaError::Shape(format!(
                "expected [B, 1, {}, {}] input, got {:?}",
                self.config.input_height,
                self.config.input_width,
                s
            )));
        }
        let head_layer = match head {
            Head::Class => &self.class_head,
            Head::Pretext => self.pretext_head.as_ref().ok_or(TtaError::HeadUnavailable("pretext"))?,
        };
        let mut ctx = Ctx { g, store: &self.params, mode, trainable, stats: Vec::new() };
        let x = ctx.g.input(input);
        let features = match &self.backbone {
            Backbone::ResNet { stem, blocks } => {
                let mut h = ctx.conv_norm(x, stem, true);
                for block in blocks {
                    let a = ctx.conv_norm(h, &block.first, true);
                    let b = ctx.conv_norm(a, &block.second, false);
                    let skip = match &block.shortcut {
                        Some(sc) => ctx.conv_norm(h, sc, false),
                        None => h,
                    };
                    let sum = ctx.g.add(b, skip);
                    h = ctx.g.relu(sum);
                }
                ctx.g.global_avg_pool(h)
            }
            Backbone::Transformer { embed, pos, blocks, final_ln } => {
                let mut h = x;
                for layer in embed {
                    h = ctx.conv_norm(h, layer, true);
                }
                let tokens = ctx.g.to_tokens(h);
                let pos = ctx.bind(*pos);
                let mut t = ctx.g.add_broadcast(tokens, pos);
                for blk in blocks {
                    let n1 = ctx.layer_norm(t, &blk.ln1);
                    let q = ctx.linear(n1, &blk.q);
                    let k = ctx.linear(n1, &blk.k);
                    let v = ctx.linear(n1, &blk.v);
                    let att = ctx.g.attention(q, k, v, self.config.heads);
                    let att = ctx.linear(att, &blk.proj);
                    t = ctx.g.add(t, att);
                    let n2 = ctx.layer_norm(t, &blk.ln2);
                    let f = ctx.linear(n2, &blk.fc1);
                    let f = ctx.g.relu(f);
                    let f = ctx.linear(f, &blk.fc2);
                    t = ctx.g.add(t, f);
                }
                let t = ctx.layer_norm(t, final_ln);
                ctx.g.mean_tokens(t)
            }
        };
        let logits = ctx.linear(features, head_layer);
        let stat_updates = ctx.stats;
        Ok(ForwardPass { features, logits, stat_updates })
    }

    /// Folds batch statistics into the running averages (momentum-style).
    pub fn apply_stat_updates(&mut self, updates: &[(ParamId, ParamId, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (mean_id, var_id, stats) in updates {
            // Running variance tracks the unbiased estimate.
            let correction = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
            for (r, b) in self.params.value_mut(*mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.params.value_mut(*var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * b * correction;
            }
        }
    }

    /// Logits and features without recording gradients.
    pub fn infer(&self, input: Tensor, head: Head, mode: ForwardMode) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, input, head, mode, &TagSet::new())?;
        Ok((g.value(pass.logits).clone(), g.value(pass.features).clone()))
    }

    pub fn logits(&self, input: Tensor, head: Head, mode: ForwardMode) -> Result<Tensor> {
        self.infer(input, head, mode).map(|(l, _)| l)
    }

    /// Tags that make up each documented group for this family.
    pub fn all_trainable_tags() -> TagSet {
        tags(&[
            ParamGroupTag::SharedBackbone,
            ParamGroupTag::ClassHead,
            ParamGroupTag::PretextHead,
            ParamGroupTag::BnAffine,
            ParamGroupTag::Other,
        ])
    }
}

struct Ctx<'a> {
    g: &'a mut Graph,
    store: &'a ParamStore,
    mode: ForwardMode,
    trainable: &'a TagSet,
    stats: Vec<(ParamId, ParamId, BatchStats)>,
}

impl Ctx<'_> {
    fn bind(&mut self, id: ParamId) -> Var {
        let tag = self.store.get(id).tag;
        let trainable = tag.is_trainable() && self.trainable.contains(&tag);
        self.g.param(self.store, id, trainable)
    }

    fn conv_norm(&mut self, x: Var, layer: &ConvNorm, relu: bool) -> Var {
        let w = self.bind(layer.weight);
        let y = self.g.conv2d(x, w, None, layer.stride, layer.pad);
        let y = match &layer.norm {
            NormLayer::Batch { gamma, beta, mean, var } => {
                let (gm, bt) = (self.bind(*gamma), self.bind(*beta));
                let kind = match self.mode {
                    ForwardMode::Eval => NormKind::Running {
                        mean: self.store.value(*mean).data().to_vec(),
                        var: self.store.value(*var).data().to_vec(),
                    },
                    ForwardMode::Train | ForwardMode::BatchStats => NormKind::BatchStats,
                };
                let (out, stats) = self.g.norm(y, gm, bt, kind);
                if let (ForwardMode::Train, Some(stats)) = (self.mode, stats) {
                    self.stats.push((*mean, *var, stats));
                }
                out
            }
            NormLayer::Group { gamma, beta, groups } => {
                let (gm, bt) = (self.bind(*gamma), self.bind(*beta));
                self.g.norm(y, gm, bt, NormKind::Group(*groups)).0
            }
        };
        if relu {
            self.g.relu(y)
        } else {
            y
        }
    }

    fn linear(&mut self, x: Var, layer: &Linear) -> Var {
        let (w, b) = (self.bind(layer.weight), self.bind(layer.bias));
        self.g.linear(x, w, Some(b))
    }

    fn layer_norm(&mut self, x: Var, ln: &LayerNorm) -> Var {
        let (gm, bt) = (self.bind(ln.gamma), self.bind(ln.beta));
        self.g.norm(x, gm, bt, NormKind::Layer).0
    }
}

/// Mean cross-entropy of `logits` against hard labels, recorded on `g`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let targets = one_hot(labels, g.value(logits).cols())?;
    Ok(g.soft_cross_entropy(logits, targets))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(TtaError::LabelOutOfRange { label: y, classes });
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

/// Value-only cross-entropy, `-mean log softmax(logits)[y]`.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = logits.cols();
    let lp = crate::nn::log_softmax(logits);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(TtaError::LabelOutOfRange { label: y, classes: c });
        }
        total -= lp.data()[i * c + y];
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax;

    fn batch(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let data = (0..b * h * w).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        Tensor::new(vec![b, 1, h, w], data)
    }

    fn families() -> Vec<ModelConfig> {
        vec![
            ModelConfig::new(ModelFamily::BnResNet, 5, 16, 20).with_depth(2),
            ModelConfig::new(ModelFamily::DualHeadResNet, 5, 16, 20).with_depth(2),
            ModelConfig::new(ModelFamily::GnTransformer, 5, 16, 20).with_width(8).with_depth(1),
        ]
    }

    #[test]
    fn logits_shapes_and_normalization() {
        for cfg in families() {
            let model = AdaptableModel::new(cfg.clone(), 1).unwrap();
            let logits = model.logits(batch(3, 16, 20, 2), Head::Class, ForwardMode::Eval).unwrap();
            assert_eq!(logits.shape(), &[3, 5]);
            let p = softmax(&logits);
            for i in 0..3 {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let again = model.logits(batch(3, 16, 20, 2), Head::Class, ForwardMode::Eval).unwrap();
            assert_eq!(logits, again);
        }
    }

    #[test]
    fn pretext_head_only_on_dual_head() {
        for cfg in families() {
            let model = AdaptableModel::new(cfg.clone(), 1).unwrap();
            let r = model.logits(batch(2, 16, 20, 3), Head::Pretext, ForwardMode::Eval);
            if cfg.family == ModelFamily::DualHeadResNet {
                assert_eq!(r.unwrap().shape(), &[2, 3]);
            } else {
                assert!(matches!(r, Err(TtaError::HeadUnavailable(_))));
            }
        }
    }

    #[test]
    fn tag_partition_is_complete_and_disjoint() {
        for cfg in families() {
            let model = AdaptableModel::new(cfg.clone(), 1).unwrap();
            let total: usize = ParamGroupTag::ALL.iter().map(|&t| model.params().count_with_tag(t)).sum();
            assert_eq!(total, model.params().len());
            let mut names: Vec<&str> = model.params().iter().map(|(_, p)| p.name.as_str()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), model.params().len());
            match cfg.family {
                ModelFamily::BnResNet => {
                    assert!(model.has_batch_norm());
                    assert_eq!(model.params().count_with_tag(ParamGroupTag::PretextHead), 0);
                }
                ModelFamily::DualHeadResNet => {
                    assert!(!model.has_batch_norm());
                    assert_eq!(model.params().count_with_tag(ParamGroupTag::PretextHead), 2);
                }
                ModelFamily::GnTransformer => assert!(!model.has_batch_norm()),
            }
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let model = AdaptableModel::new(families().remove(0), 1).unwrap();
        assert!(matches!(model.logits(batch(2, 8, 20, 1), Head::Class, ForwardMode::Eval), Err(TtaError::Shape(_))));
    }

    #[test]
    fn cross_entropy_edge_cases() {
        let uniform = Tensor::zeros(&[2, 4]);
        assert!((cross_entropy_value(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let confident = Tensor::new(vec![1, 3], vec![0.0, 60.0, 0.0]);
        assert!(cross_entropy_value(&confident, &[1]).unwrap() < 1e-12);
        assert!(matches!(cross_entropy_value(&uniform, &[4, 0]), Err(TtaError::LabelOutOfRange { .. })));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        // Spot-check a few parameters through a whole network.
        for cfg in families() {
            let mut model = AdaptableModel::new(cfg.clone(), 4).unwrap();
            let x = batch(4, 16, 20, 5);
            let labels = [0, 1, 2, 3];
            let all = AdaptableModel::all_trainable_tags();
            let loss_of = |m: &AdaptableModel| {
                let mut g = Graph::new();
                let pass = m.forward(&mut g, x.clone(), Head::Class, ForwardMode::BatchStats, &all).unwrap();
                let l = cross_entropy(&mut g, pass.logits, &labels).unwrap();
                (g, l)
            };
            let (mut g, l) = loss_of(&model);
            g.backward(l);
            let grads: Vec<(ParamId, Tensor)> = g.param_grads().into_iter().map(|(i, t)| (i, t.clone())).collect();
            for (id, grad) in grads.iter().step_by(3) {
                let j = grad.len() / 2;
                let orig = model.params().value(*id).data()[j];
                let eps = 1e-5;
                model.params_mut().value_mut(*id).data_mut()[j] = orig + eps;
                let (gp, lp) = loss_of(&model);
                model.params_mut().value_mut(*id).data_mut()[j] = orig - eps;
                let (gm, lm) = loss_of(&model);
                model.params_mut().value_mut(*id).data_mut()[j] = orig;
                let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
                let a = grad.data()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!((a - numeric).abs() / denom < 1e-3, "{:?} {}: {a} vs {numeric}", cfg.family, model.params().get(*id).name);
            }
        }
    }
}
