//! U-shaped segmentation networks with optional flow-guided temporal
//! aggregation, and their training loop.
//!
//! Encoder stage `s` has `base_channels·2^s` channels and is entered through
//! a 2×2 max-pool, except in the dilated variant where configured stages
//! keep the resolution and use dilation-2 convolutions instead. Each stage
//! is a pair of 3×3 conv/batch-norm/ReLU layers, optionally wrapped as a
//! residual unit. The decoder mirrors the encoder with skip concatenation and
//! a 1×1 classifier.
//!
//! The aggregating variants split the network after encoder stage
//! `feature_level`: everything up to there is the per-frame feature
//! extractor; its output is replaced by the motion-compensated aggregate over
//! the temporal window before the remaining layers run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_window, window, AggregationConfig, FlowCache};
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::image::{Image, LabelMask};
use crate::phantom::{draw_angle, rotate_image, rotate_mask, CineSequence};
use crate::tensor::{
    add, batchnorm, checkpoint, concat_channels, conv2d, cross_entropy_loss, exponential_lr, maxpool2, relu,
    sgd_step, softmax_channels, upsample2, BatchNormStats, BnMode, RunningStats, Tape, Tensor, Var,
};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of the classifier weights at initialization; keeps
/// untrained outputs close to uniform.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    /// Number of encoder stages, including the bottleneck.
    pub depth: usize,
    /// Stages whose pooling is replaced by dilation-2 convolutions in the
    /// dilated variant.
    pub dilated_stages: Vec<usize>,
    pub use_resblocks: bool,
    pub num_classes: usize,
    /// Encoder stage whose output is aggregated over time.
    pub feature_level: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 8,
            depth: 3,
            dilated_stages: vec![1, 2],
            use_resblocks: true,
            num_classes: 3,
            feature_level: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth < 2 {
            return bad(format!("network depth must be at least 2, got {}", self.depth));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        for &s in &self.dilated_stages {
            if s == 0 || s >= self.depth {
                return bad(format!(
                    "dilated stage {s} is not a pooled stage (valid: 1..{})",
                    self.depth
                ));
            }
        }
        if self.feature_level + 1 >= self.depth {
            return bad(format!(
                "feature_level {} leaves no segmentation layers at depth {}",
                self.feature_level, self.depth
            ));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Every frame segmented on its own.
    Unet,
    /// Temporal aggregation with a pooled encoder.
    OfnetMaxpool,
    /// Temporal aggregation with dilated instead of pooled stages.
    OfnetDilated,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::OfnetMaxpool => "ofnet_maxpool",
            Variant::OfnetDilated => "ofnet_dilated",
        }
    }

    pub fn aggregates(self) -> bool {
        self != Variant::Unet
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Variant::Unet),
            "ofnet_maxpool" => Ok(Variant::OfnetMaxpool),
            "ofnet_dilated" => Ok(Variant::OfnetDilated),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (unet, ofnet_maxpool, ofnet_dilated)"
            ))),
        }
    }
}

/// Network weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    variant: Variant,
    params: IndexMap<String, Tensor>,
    running: IndexMap<String, RunningStats>,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut IndexMap<String, Tensor>,
    running: &'a mut IndexMap<String, RunningStats>,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, std: f64) {
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| normal.sample(&mut self.rng));
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
    }

    fn he_conv(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.conv(name, c_in, c_out, 3, (2.0 / (c_in * 9) as f64).sqrt());
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.running.insert(name.to_string(), RunningStats::new(c));
    }

    fn block(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.he_conv(&format!("{prefix}.conv1"), c_in, c_out);
        self.bn(&format!("{prefix}.bn1"), c_out);
        self.he_conv(&format!("{prefix}.conv2"), c_out, c_out);
        self.bn(&format!("{prefix}.bn2"), c_out);
    }
}

/// Builds a freshly initialized network. Weights are He-normal draws from a
/// generator seeded with `seed`; biases and shifts start at zero, scales at one.
pub fn build_network(cfg: &NetworkConfig, variant: Variant, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut params = IndexMap::new();
    let mut running = IndexMap::new();
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: &mut params,
        running: &mut running,
    };
    for s in 0..cfg.depth {
        let c_in = if s == 0 { 1 } else { cfg.channels(s - 1) };
        init.block(&format!("enc{s}"), c_in, cfg.channels(s));
    }
    for s in (0..cfg.depth - 1).rev() {
        init.he_conv(&format!("dec{s}.up"), cfg.channels(s + 1), cfg.channels(s));
        init.bn(&format!("dec{s}.upbn"), cfg.channels(s));
        init.block(&format!("dec{s}"), 2 * cfg.channels(s), cfg.channels(s));
    }
    init.conv("head", cfg.channels(0), cfg.num_classes, 1, HEAD_INIT_STD);
    Ok(Model {
        config: cfg.clone(),
        variant,
        params,
        running,
    })
}

/// Network input for a frame with intensities in [0, 255].
pub fn frame_input(frame: &Image) -> Tensor {
    let (h, w) = frame.dims();
    Tensor::new(vec![1, 1, h, w], frame.data().iter().map(|v| v / 255.0).collect()).expect("frame extents")
}

/// Arg-max class per pixel of a (1, C, H, W) or (C, H, W) probability map.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMask> {
    let shape = probs.shape();
    let (c, h, w) = match *shape {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("argmax_labels", format!("{shape:?} is not a single map"))),
    };
    let hw = h * w;
    let d = probs.data();
    Ok(LabelMask::from_fn(h, w, |x, y| {
        let p = y * w + x;
        let mut best = 0;
        for ch in 1..c {
            if d[ch * hw + p] > d[best * hw + p] {
                best = ch;
            }
        }
        best as u8
    }))
}

/// Records one forward pass of a model on a tape.
struct Graph<'m> {
    model: &'m Model,
    vars: IndexMap<&'m str, Var>,
    train: bool,
    stats: Vec<(String, BatchNormStats)>,
}

impl<'m> Graph<'m> {
    fn new(model: &'m Model, tape: &mut Tape, train: bool) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(name, t)| (name.as_str(), tape.leaf(t.clone(), train)))
            .collect();
        Graph {
            model,
            vars,
            train,
            stats: Vec::new(),
        }
    }

    fn param(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn conv(&self, tape: &mut Tape, name: &str, x: Var, dilation: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        let k = tape.value(w).shape()[2];
        conv2d(tape, x, w, b, 1, dilation, dilation * (k / 2))
    }

    fn bn(&mut self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{name}.gamma"));
        let b = self.param(&format!("{name}.beta"));
        if self.train {
            let (y, stats) = batchnorm(tape, x, g, b, BnMode::Train)?;
            self.stats.push((name.to_string(), stats.expect("training mode returns stats")));
            Ok(y)
        } else {
            let r = &self.model.running[name];
            let (y, _) = batchnorm(tape, x, g, b, BnMode::Eval { mean: &r.mean, var: &r.var })?;
            Ok(y)
        }
    }

    fn conv_bn_relu(&mut self, tape: &mut Tape, conv: &str, bn: &str, x: Var, dilation: usize) -> Result<Var> {
        let y = self.conv(tape, conv, x, dilation)?;
        let y = self.bn(tape, bn, y)?;
        relu(tape, y)
    }

    fn block(&mut self, tape: &mut Tape, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
        let h = self.conv_bn_relu(tape, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), x, dilation)?;
        if self.model.config.use_resblocks {
            let y = self.conv(tape, &format!("{prefix}.conv2"), h, dilation)?;
            let y = self.bn(tape, &format!("{prefix}.bn2"), y)?;
            let y = add(tape, h, y)?;
            relu(tape, y)
        } else {
            self.conv_bn_relu(tape, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), h, dilation)
        }
    }

    fn stage(&mut self, tape: &mut Tape, s: usize, prev: Var) -> Result<Var> {
        let dilation = self.model.stage_dilation(s);
        let x = if s > 0 && dilation == 1 { maxpool2(tape, prev)? } else { prev };
        self.block(tape, &format!("enc{s}"), x, dilation)
    }

    /// Encoder stages `0..=last`, all outputs kept.
    fn encode(&mut self, tape: &mut Tape, input: Var, last: usize) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(last + 1);
        let mut x = input;
        for s in 0..=last {
            x = self.stage(tape, s, x)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Remaining encoder stages, decoder and classifier; returns logits.
    fn segment(&mut self, tape: &mut Tape, mut skips: Vec<Var>) -> Result<Var> {
        let depth = self.model.config.depth;
        for s in skips.len()..depth {
            let prev = *skips.last().expect("at least one encoder output");
            let x = self.stage(tape, s, prev)?;
            skips.push(x);
        }
        let mut x = skips[depth - 1];
        for s in (0..depth - 1).rev() {
            if self.model.stage_dilation(s + 1) == 1 {
                x = upsample2(tape, x)?;
            }
            let up = self.conv_bn_relu(tape, &format!("dec{s}.up"), &format!("dec{s}.upbn"), x, 1)?;
            let cat = concat_channels(tape, up, skips[s])?;
            x = self.block(tape, &format!("dec{s}"), cat, 1)?;
        }
        self.conv(tape, "head", x, 1)
    }

    /// Logits of the target frame `i`; `inputs` holds the frame tensors of
    /// the whole sequence (only the window is touched).
    fn logits(
        &mut self,
        tape: &mut Tape,
        frames: &[Image],
        inputs: &[Tensor],
        i: usize,
        k: usize,
        cache: &mut FlowCache,
    ) -> Result<Var> {
        let level = self.model.config.feature_level;
        let x = tape.constant(inputs[i].clone());
        if !self.model.variant.aggregates() {
            let skips = self.encode(tape, x, level)?;
            return self.segment(tape, skips);
        }
        let mut skips = self.encode(tape, x, level)?;
        // Features of frames outside the window are never read; any var will do.
        let mut features = vec![skips[level]; frames.len()];
        for j in window(i, frames.len(), k) {
            if j != i {
                let xj = tape.constant(inputs[j].clone());
                features[j] = *self.encode(tape, xj, level)?.last().expect("non-empty");
            }
        }
        skips[level] = aggregate_window(tape, frames, &features, i, &AggregationConfig { k }, cache)?;
        self.segment(tape, skips)
    }
}

impl Model {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &IndexMap<String, RunningStats> {
        &self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Dilation of encoder stage `s` (2 where pooling is replaced).
    pub fn stage_dilation(&self, s: usize) -> usize {
        if self.variant == Variant::OfnetDilated && self.config.dilated_stages.contains(&s) {
            2
        } else {
            1
        }
    }

    /// Copies every weight and running statistic from `other`, which must
    /// have the same tensor names and shapes.
    pub fn load_weights_from(&mut self, other: &Model) -> Result<()> {
        for (name, t) in &mut self.params {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape(
                    "load_weights_from",
                    format!("{name}: {:?} vs {:?}", src.shape(), t.shape()),
                ));
            }
            *t = src.clone();
        }
        for (name, r) in &mut self.running {
            *r = other
                .running
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing statistics {name}")))?
                .clone();
        }
        Ok(())
    }

    /// Encoder outputs of one frame in inference mode, stage by stage.
    pub fn encoder_features(&self, frame: &Image) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut g = Graph::new(self, &mut tape, false);
        let x = tape.constant(frame_input(frame));
        let outs = g.encode(&mut tape, x, self.config.depth - 1)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Class probabilities (C, H, W) of one frame processed on its own.
    pub fn forward_unet(&self, frame: &Image) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::new(self, &mut tape, false);
        let x = tape.constant(frame_input(frame));
        let skips = g.encode(&mut tape, x, self.config.feature_level)?;
        let logits = g.segment(&mut tape, skips)?;
        let p = softmax_channels(&mut tape, logits)?;
        let (_, c, h, w) = tape.value(p).dims4()?;
        tape.value(p).clone().reshape(vec![c, h, w])
    }

    /// Class probabilities of every frame, each computed from the features of
    /// its clamped temporal window.
    pub fn forward_ofnet(&self, frames: &[Image], k: usize, cache: &mut FlowCache) -> Result<Vec<Tensor>> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("forward_ofnet: empty sequence".into()));
        }
        let level = self.config.feature_level;
        // Per-frame features once; each target then gets its own small tape.
        let features: Vec<Vec<Tensor>> = frames
            .iter()
            .map(|f| {
                let mut tape = Tape::new();
                let mut g = Graph::new(self, &mut tape, false);
                let x = tape.constant(frame_input(f));
                let outs = g.encode(&mut tape, x, level)?;
                Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
            })
            .collect::<Result<_>>()?;

        let mut out = Vec::with_capacity(frames.len());
        for i in 0..frames.len() {
            let mut tape = Tape::new();
            let mut g = Graph::new(self, &mut tape, false);
            let mut skips: Vec<Var> = features[i].iter().map(|t| tape.constant(t.clone())).collect();
            let mut window_vars = vec![skips[level]; frames.len()];
            for j in window(i, frames.len(), k) {
                if j != i {
                    window_vars[j] = tape.constant(features[j][level].clone());
                }
            }
            skips[level] = aggregate_window(&mut tape, frames, &window_vars, i, &AggregationConfig { k }, cache)?;
            let logits = g.segment(&mut tape, skips)?;
            let p = softmax_channels(&mut tape, logits)?;
            let (_, c, h, w) = tape.value(p).dims4()?;
            out.push(tape.value(p).clone().reshape(vec![c, h, w])?);
        }
        Ok(out)
    }

    /// Probabilities for every frame following the variant's semantics.
    pub fn predict_probabilities(&self, frames: &[Image], k: usize, flow: &FlowParams) -> Result<Vec<Tensor>> {
        if self.variant.aggregates() {
            let mut cache = FlowCache::new(flow.clone())?;
            self.forward_ofnet(frames, k, &mut cache)
        } else {
            frames.iter().map(|f| self.forward_unet(f)).collect()
        }
    }

    /// Arg-max label masks for every frame.
    pub fn predict(&self, frames: &[Image], k: usize, flow: &FlowParams) -> Result<Vec<LabelMask>> {
        self.predict_probabilities(frames, k, flow)?
            .iter()
            .map(argmax_labels)
            .collect()
    }

    /// Tensors in checkpoint order: weights, then running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        for (name, r) in &self.running {
            let c = r.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new(vec![c], r.mean.clone()).expect("len")));
            out.push((format!("{name}.running_var"), Tensor::new(vec![c], r.var.clone()).expect("len")));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.named_tensors();
        checkpoint::save(path, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Loads a checkpoint into a network built from `cfg` and `variant`.
    /// Missing, extra or mis-shaped tensors are errors naming the tensor.
    pub fn load(path: &Path, cfg: &NetworkConfig, variant: Variant) -> Result<Model> {
        let mut model = build_network(cfg, variant, 0)?;
        let mut stored: IndexMap<String, Tensor> = checkpoint::load(path)?.into_iter().collect();
        let mismatch = |name: &str, detail: String| Error::format(path, format!("tensor {name}: {detail}"));
        for (name, t) in model.params.iter_mut() {
            let src = stored
                .shift_remove(name)
                .ok_or_else(|| mismatch(name, "missing from checkpoint".into()))?;
            if src.shape() != t.shape() {
                return Err(mismatch(name, format!("shape {:?}, network expects {:?}", src.shape(), t.shape())));
            }
            *t = src;
        }
        for (name, r) in model.running.iter_mut() {
            for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let key = format!("{name}.{suffix}");
                let src = stored
                    .shift_remove(&key)
                    .ok_or_else(|| mismatch(&key, "missing from checkpoint".into()))?;
                if src.shape() != [dst.len()] {
                    return Err(mismatch(&key, format!("shape {:?}, network expects [{}]", src.shape(), dst.len())));
                }
                *dst = src.into_data();
            }
        }
        if let Some(extra) = stored.keys().next() {
            return Err(mismatch(extra, "not part of this network".into()));
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Temporal half-window of the aggregating variants.
    pub k: usize,
    pub seed: u64,
    /// Rotation augmentation range, ± degrees.
    pub augment_rotation_deg: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    pub flow: FlowParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            lr_decay: 0.95,
            batch_size: 10,
            epochs: 30,
            k: 2,
            seed: 0,
            augment_rotation_deg: 30.0,
            momentum: 0.0,
            flow: FlowParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.augment_rotation_deg >= 0.0 && self.augment_rotation_deg <= 180.0) {
            return bad(format!("augment_rotation_deg must lie in [0, 180], got {}", self.augment_rotation_deg));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        self.flow.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        exponential_lr(self.base_lr, self.lr_decay, epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,lr\n");
        for r in &self.epochs {
            writeln!(s, "{},{},{}", r.epoch, r.mean_loss, r.lr).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Attaches the epoch and batch to numerical failures.
fn at_batch(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { op, context } => Error::NonFinite {
            op,
            context: format!("{context} (epoch {epoch}, batch {batch})"),
        },
        other => other,
    }
}

/// Sequence data prepared once for training.
struct Prepared<'a> {
    seq: &'a CineSequence,
    inputs: Vec<Tensor>,
    flows: Option<FlowCache>,
}

/// Trains `model` in place by mini-batch SGD and returns per-epoch mean losses.
///
/// Samples are (sequence, frame) pairs shuffled every epoch. Each sample is
/// rotated by a random angle (frames, flows and labels together) and its
/// loss is the pixel-mean cross-entropy of the target frame. Gradients are
/// averaged over the batch; batch-norm statistics are taken per sample and
/// their batch mean feeds the running estimates. Every random draw comes from
/// one generator seeded with `cfg.seed`.
pub fn train(model: &mut Model, dataset: &[CineSequence], cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_progress(model, dataset, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    model: &mut Model,
    dataset: &[CineSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let k = if model.variant.aggregates() { cfg.k } else { 0 };
    let mut prepared = Vec::with_capacity(dataset.len());
    for seq in dataset {
        seq.validate()?;
        let flows = if k > 0 {
            let mut cache = FlowCache::new(cfg.flow.clone())?;
            cache.fill(&seq.frames, k)?;
            Some(cache)
        } else {
            None
        };
        prepared.push(Prepared {
            seq,
            inputs: seq.frames.iter().map(frame_input).collect(),
            flows,
        });
    }

    let mut samples: Vec<(usize, usize)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(s, p)| (0..p.seq.n_frames()).map(move |t| (s, t)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: IndexMap<String, Tensor> = IndexMap::new();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        samples.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        for (b, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let mut grad_sum: IndexMap<String, Tensor> = model
                .params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect();
            let mut stat_sum: IndexMap<String, (BatchNormStats, usize)> = IndexMap::new();
            for &(s, t) in batch {
                let angle = draw_angle(cfg.augment_rotation_deg, &mut rng);
                let (loss, grads, stats) =
                    sample_step(model, &prepared[s], t, k, angle).map_err(|e| at_batch(e, epoch, b))?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        op: "training loss",
                        context: format!(" (epoch {epoch}, batch {b})"),
                    });
                }
                loss_sum += loss;
                for (name, g) in grads {
                    for (acc, v) in grad_sum[&name].data_mut().iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                }
                for (name, st) in stats {
                    let entry = stat_sum.entry(name).or_insert_with(|| {
                        (BatchNormStats { mean: vec![0.0; st.mean.len()], var: vec![0.0; st.var.len()] }, 0)
                    });
                    for (a, v) in entry.0.mean.iter_mut().zip(&st.mean) {
                        *a += v;
                    }
                    for (a, v) in entry.0.var.iter_mut().zip(&st.var) {
                        *a += v;
                    }
                    entry.1 += 1;
                }
            }

            let scale = 1.0 / batch.len() as f64;
            for g in grad_sum.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if cfg.momentum > 0.0 {
                for (name, g) in grad_sum.iter_mut() {
                    let vel = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (vv, gv) in vel.data_mut().iter_mut().zip(g.data_mut()) {
                        *vv = cfg.momentum * *vv + *gv;
                        *gv = *vv;
                    }
                }
            }
            sgd_step(
                model.params.iter_mut().map(|(n, p)| (p, &grad_sum[n])),
                lr,
            )?;
            if !model.params.values().all(Tensor::is_finite) {
                return Err(Error::NonFinite {
                    op: "parameter update",
                    context: format!(" (epoch {epoch}, batch {b})"),
                });
            }
            for (name, (sum, n)) in stat_sum {
                let inv = 1.0 / n as f64;
                let mean = BatchNormStats {
                    mean: sum.mean.iter().map(|v| v * inv).collect(),
                    var: sum.var.iter().map(|v| v * inv).collect(),
                };
                model.running[&name].update(&mean, BN_MOMENTUM);
            }
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

type StepOutput = (f64, Vec<(String, Tensor)>, Vec<(String, BatchNormStats)>);

/// Loss, parameter gradients and batch-norm statistics of one sample.
fn sample_step(model: &Model, data: &Prepared, t: usize, k: usize, angle: f64) -> Result<StepOutput> {
    let n = data.seq.n_frames();
    let members: Vec<usize> = window(t, n, k).collect();
    let rotate = angle != 0.0;

    let mut frames = data.seq.frames.clone();
    let mut inputs = data.inputs.clone();
    if rotate {
        for &j in &members {
            frames[j] = rotate_image(&data.seq.frames[j], angle);
            inputs[j] = frame_input(&frames[j]);
        }
    }
    let label = if rotate { rotate_mask(&data.seq.labels[t], angle) } else { data.seq.labels[t].clone() };

    let mut cache = match &data.flows {
        Some(all) => {
            let mut c = FlowCache::new(all.params().clone())?;
            for &j in &members {
                let f = all.get(j, t).expect("flows for every window are precomputed");
                c.insert(if rotate { f.rotated(angle.to_radians()) } else { f.clone() });
            }
            c
        }
        None => FlowCache::new(FlowParams::default())?,
    };

    let mut tape = Tape::new();
    let mut g = Graph::new(model, &mut tape, true);
    let logits = g.logits(&mut tape, &frames, &inputs, t, k, &mut cache)?;
    let loss = cross_entropy_loss(&mut tape, logits, label.data())?;
    let value = tape.value(loss).item()?;
    let stats = std::mem::take(&mut g.stats);
    let vars: Vec<(String, Var)> = g.vars.iter().map(|(n, v)| (n.to_string(), *v)).collect();
    let mut grads = tape.backward(loss)?;
    let grads = vars
        .into_iter()
        .map(|(n, v)| {
            let shape = model.params[&n].shape().to_vec();
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(&shape));
            (n, g)
        })
        .collect();
    Ok((value, grads, stats))
}

/// Loss of one frame with explicit parameter values, for gradient checks of
/// the full forward path.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    model: &Model,
    tape: &mut Tape,
    params: &IndexMap<String, Var>,
    frames: &[Image],
    label: &LabelMask,
    t: usize,
    k: usize,
    cache: &mut FlowCache,
) -> Result<Var> {
    let mut g = Graph {
        model,
        vars: params.iter().map(|(n, v)| (model.params.get_key_value(n).expect("known").0.as_str(), *v)).collect(),
        train: true,
        stats: Vec::new(),
    };
    let inputs: Vec<Tensor> = frames.iter().map(frame_input).collect();
    let k = if model.variant.aggregates() { k } else { 0 };
    let logits = g.logits(tape, frames, &inputs, t, k, cache)?;
    cross_entropy_loss(tape, logits, label.data())
}
