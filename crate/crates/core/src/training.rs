//! Deterministic SGD training of small MLP/CNN backbones against any loss in
//! the family, plus evaluation into per-sample records and checkpointing.

use crate::analysis::SampleRecord;
use crate::autodiff::{Graph, NodeId};
use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cm_margin_softmax_loss, cm_softmax_loss, cosine_logits, fixed_margin_loss, fixed_norm_loss,
    plain_softmax_loss, ClassifierHead, ContractionSpec, FixedNormSpec, LossOutput, MarginSpec,
    MarginVariant,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use std::path::Path;

/// Fixed negative-branch slope for backbone activations.
pub const PRELU_SLOPE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Mlp,
    Cnn,
}

/// Small configurable backbone with a designated linear feature layer.
///
/// CNN stages are 3x3 stride-2 convolutions (so each stage halves the
/// spatial extent); MLP hidden layers are linear + activation. The feature
/// layer itself is linear with no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Hidden layer widths (MLP).
    pub hidden: Vec<usize>,
    /// Conv stage output channels (CNN).
    pub stages: Vec<usize>,
    pub feature_dim: usize,
}

impl BackboneConfig {
    pub fn mlp(hidden: Vec<usize>, feature_dim: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Mlp,
            hidden,
            stages: Vec::new(),
            feature_dim,
        }
    }

    pub fn cnn(stages: Vec<usize>, feature_dim: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Cnn,
            hidden: Vec::new(),
            stages,
            feature_dim,
        }
    }

    /// Default digit-recognition recipe: three conv stages (32/64/128
    /// channels) into a 2-D feature layer.
    pub fn default_mnist_cnn() -> Self {
        BackboneConfig::cnn(vec![32, 64, 128], 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Domain(format!(
                "feature dimension must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.kind == BackboneKind::Cnn && self.stages.is_empty() {
            return Err(Error::Domain("CNN backbone needs at least one stage".into()));
        }
        Ok(())
    }
}

/// SGD-with-momentum schedule. Learning rate is multiplied by `decay_factor`
/// at each epoch listed in `decay_epochs`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Default digit-recognition recipe.
    pub fn default_mnist() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            decay_epochs: vec![12, 17],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Domain(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Domain(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Domain(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.decay_factor > 0.0) || !self.decay_factor.is_finite() {
            return Err(Error::Domain(format!(
                "decay factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which loss drives training; contraction bounds are derived from the
/// dataset's class count at resolve time.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    Softmax,
    FixedNorm {
        s: f64,
    },
    CmSoftmax {
        p: f64,
        gamma: f64,
    },
    CmMargin {
        p: f64,
        gamma: f64,
        variant: MarginVariant,
        margin: f64,
    },
    FixedMargin {
        s: f64,
        variant: MarginVariant,
        margin: f64,
    },
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Softmax => "softmax",
            LossSpec::FixedNorm { .. } => "fixed_norm",
            LossSpec::CmSoftmax { .. } => "cm_softmax",
            LossSpec::CmMargin { .. } => "cm_margin",
            LossSpec::FixedMargin { .. } => "fixed_margin",
        }
    }

    pub fn resolve(&self, classes: usize) -> Result<ResolvedLoss> {
        Ok(match *self {
            LossSpec::Softmax => ResolvedLoss::Plain,
            LossSpec::FixedNorm { s } => ResolvedLoss::Fixed(FixedNormSpec::new(s)?),
            LossSpec::CmSoftmax { p, gamma } => {
                ResolvedLoss::Cm(ContractionSpec::new(p, classes, gamma)?)
            }
            LossSpec::CmMargin {
                p,
                gamma,
                variant,
                margin,
            } => ResolvedLoss::CmMargin(
                ContractionSpec::new(p, classes, gamma)?,
                MarginSpec::new(variant, margin)?,
            ),
            LossSpec::FixedMargin { s, variant, margin } => {
                ResolvedLoss::FixedMargin(FixedNormSpec::new(s)?, MarginSpec::new(variant, margin)?)
            }
        })
    }
}

/// A loss spec bound to a class count, ready to evaluate on a graph.
#[derive(Debug, Clone)]
pub enum ResolvedLoss {
    Plain,
    Fixed(FixedNormSpec),
    Cm(ContractionSpec),
    CmMargin(ContractionSpec, MarginSpec),
    FixedMargin(FixedNormSpec, MarginSpec),
}

impl ResolvedLoss {
    pub fn eval(
        &self,
        g: &mut Graph,
        features: NodeId,
        head: &ClassifierHead,
        labels: &[usize],
    ) -> Result<LossOutput> {
        match self {
            ResolvedLoss::Plain => plain_softmax_loss(g, features, head, labels),
            ResolvedLoss::Fixed(s) => fixed_norm_loss(g, features, head, labels, s),
            ResolvedLoss::Cm(c) => cm_softmax_loss(g, features, head, labels, c),
            ResolvedLoss::CmMargin(c, m) => cm_margin_softmax_loss(g, features, head, labels, c, m),
            ResolvedLoss::FixedMargin(s, m) => fixed_margin_loss(g, features, head, labels, s, m),
        }
    }

    /// Per-sample logit scale at evaluation time. Margins are training-time
    /// penalties on the true class and need the label, so they are excluded
    /// here; predictions come from the cosines either way.
    fn eval_scale(&self, norm: f64) -> f64 {
        match self {
            ResolvedLoss::Plain => norm,
            ResolvedLoss::Fixed(s) | ResolvedLoss::FixedMargin(s, _) => s.s(),
            ResolvedLoss::Cm(c) | ResolvedLoss::CmMargin(c, _) => {
                c.apply(norm).expect("norms are non-negative")
            }
        }
    }
}

/// Backbone + head parameters as named tensors, in a fixed order.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub input_dims: Vec<usize>,
    pub classes: usize,
    params: Vec<(String, Tensor)>,
}

/// Graph handles produced by one forward construction.
pub struct ForwardPass {
    pub features: NodeId,
    pub head: ClassifierHead,
    /// Trainable leaves, aligned with [`Model::params`] order.
    pub param_ids: Vec<NodeId>,
}

fn conv_out(extent: usize) -> usize {
    // 3x3 kernel, stride 2, padding 1
    (extent + 2 - 3) / 2 + 1
}

impl Model {
    /// Initializes parameters with scaled-uniform draws U(-b, b),
    /// b = sqrt(6 / fan_in); biases start at zero.
    pub fn init(
        backbone: BackboneConfig,
        input_dims: Vec<usize>,
        classes: usize,
        seed: u64,
    ) -> Result<Model> {
        backbone.validate()?;
        if classes < 2 {
            return Err(Error::Domain(format!(
                "model needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut init = |shape: &[usize], fan_in: usize| -> Tensor {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        };

        let mut params: Vec<(String, Tensor)> = Vec::new();
        let flat_after_backbone = match backbone.kind {
            BackboneKind::Mlp => {
                let mut width: usize = input_dims.iter().product();
                for (i, &out) in backbone.hidden.iter().enumerate() {
                    params.push((format!("hidden{i}.w"), init(&[width, out], width)));
                    params.push((format!("hidden{i}.b"), Tensor::zeros(&[out])));
                    width = out;
                }
                width
            }
            BackboneKind::Cnn => {
                if input_dims.len() != 3 {
                    return Err(Error::Dimension {
                        context: "cnn input",
                        left: input_dims.clone(),
                        right: vec![0, 0, 0],
                    });
                }
                let (mut ch, mut h, mut w) = (input_dims[0], input_dims[1], input_dims[2]);
                for (i, &out) in backbone.stages.iter().enumerate() {
                    let fan_in = ch * 9;
                    params.push((format!("conv{i}.kernel"), init(&[out, ch, 3, 3], fan_in)));
                    params.push((format!("conv{i}.bias"), Tensor::zeros(&[out])));
                    ch = out;
                    h = conv_out(h);
                    w = conv_out(w);
                    if h == 0 || w == 0 {
                        return Err(Error::Dimension {
                            context: "cnn stage output",
                            left: input_dims.clone(),
                            right: vec![ch, h, w],
                        });
                    }
                }
                ch * h * w
            }
        };
        params.push((
            "feature.w".into(),
            init(&[flat_after_backbone, backbone.feature_dim], flat_after_backbone),
        ));
        params.push(("feature.b".into(), Tensor::zeros(&[backbone.feature_dim])));
        params.push((
            "head.w".into(),
            init(&[backbone.feature_dim, classes], backbone.feature_dim),
        ));

        Ok(Model {
            backbone,
            input_dims,
            classes,
            params,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    /// Builds the forward graph for one batch up to the feature layer and
    /// the classifier head.
    pub fn forward(&self, g: &mut Graph, batch: &Tensor) -> Result<ForwardPass> {
        if batch.shape().len() < 2 || &batch.shape()[1..] != self.input_dims.as_slice() {
            return Err(Error::Dimension {
                context: "model input",
                left: batch.shape().to_vec(),
                right: self.input_dims.clone(),
            });
        }
        let m = batch.shape()[0];
        let param_ids: Vec<NodeId> = self.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let mut next = 0usize;
        let mut take = || {
            let id = param_ids[next];
            next += 1;
            id
        };

        let x = g.leaf(batch.clone());
        let flat = match self.backbone.kind {
            BackboneKind::Mlp => {
                let mut cur = g.reshape(x, vec![m, self.input_dims.iter().product()])?;
                for _ in 0..self.backbone.hidden.len() {
                    let w = take();
                    let b = take();
                    cur = g.matmul(cur, w)?;
                    cur = g.bias_add(cur, b)?;
                    cur = g.prelu(cur, PRELU_SLOPE)?;
                }
                cur
            }
            BackboneKind::Cnn => {
                let mut cur = x;
                for _ in 0..self.backbone.stages.len() {
                    let k = take();
                    let b = take();
                    cur = g.conv2d(cur, k, 2, 1)?;
                    cur = g.channel_bias(cur, b)?;
                    cur = g.prelu(cur, PRELU_SLOPE)?;
                }
                let flat_dim = g.value(cur).len() / m;
                g.reshape(cur, vec![m, flat_dim])?
            }
        };
        let fw = take();
        let fb = take();
        let pre = g.matmul(flat, fw)?;
        let features = g.bias_add(pre, fb)?;
        let head = ClassifierHead::new(g, take())?;
        Ok(ForwardPass {
            features,
            head,
            param_ids,
        })
    }
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub loss_spec: LossSpec,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

/// SGD with momentum: v <- mu*v - lr*(g + wd*w), w <- w + v.
///
/// Fully deterministic given the seed: initialization, the per-epoch shuffle
/// (seed + epoch), and all arithmetic are fixed-order.
pub fn train(
    dataset: &Dataset,
    backbone: &BackboneConfig,
    loss_spec: &LossSpec,
    opt: &OptimizerConfig,
) -> Result<TrainState> {
    opt.validate()?;
    if dataset.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    let resolved = loss_spec.resolve(dataset.class_count)?;
    let mut model = Model::init(
        backbone.clone(),
        dataset.sample_dims().to_vec(),
        dataset.class_count,
        opt.seed,
    )?;
    let mut velocity: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();

    let mut history = Vec::with_capacity(opt.epochs);
    let mut global_batch = 0usize;
    for epoch in 0..opt.epochs {
        let decays = opt.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        let lr = opt.learning_rate * opt.decay_factor.powi(decays as i32);
        let plan = BatchPlan::new(opt.batch_size, opt.seed.wrapping_add(epoch as u64), false)?;

        let mut loss_sum = 0.0;
        let mut batch_count = 0usize;
        for (batch, labels) in batches(dataset, &plan) {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &batch)?;
            let out = resolved.eval(&mut g, fwd.features, &fwd.head, &labels)?;
            if !out.loss_value.is_finite() {
                return Err(Error::Diverged {
                    batch: global_batch,
                });
            }
            g.backward(out.loss)?;

            for ((param, vel), &id) in model
                .params_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(fwd.param_ids.iter())
            {
                let grad = g.grad(id).expect("grad populated").clone();
                let w = &mut param.1;
                for k in 0..w.len() {
                    let gk = grad.data()[k] + opt.weight_decay * w.data()[k];
                    let v = opt.momentum * vel.data()[k] - lr * gk;
                    vel.data_mut()[k] = v;
                    w.data_mut()[k] += v;
                }
            }
            loss_sum += out.loss_value;
            batch_count += 1;
            global_batch += 1;
        }
        let mean = loss_sum / batch_count as f64;
        log::info!(
            "epoch {epoch}: lr {lr:.6}, mean {} loss {mean:.6}",
            loss_spec.name()
        );
        history.push(mean);
    }

    Ok(TrainState {
        model,
        loss_spec: loss_spec.clone(),
        epoch: opt.epochs,
        loss_history: history,
    })
}

/// Runs the model over a dataset and reports accuracy plus one record per
/// sample: the raw feature vector (before any norm scaling), its norm, the
/// argmax-cosine prediction, and the true-class probability under the
/// trained loss's evaluation-time scaling.
pub fn evaluate(state: &TrainState, dataset: &Dataset) -> Result<(f64, Vec<SampleRecord>)> {
    let n = dataset.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let resolved = state.loss_spec.resolve(state.model.classes)?;
    let d = state.model.backbone.feature_dim;
    let c = state.model.classes;
    let mut records = Vec::with_capacity(n);
    let mut correct_total = 0usize;

    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (batch, labels) = dataset.gather(&idx);
        let mut g = Graph::new();
        let fwd = state.model.forward(&mut g, &batch)?;
        let cos = cosine_logits(&mut g, fwd.features, &fwd.head)?;
        let feats = g.value(fwd.features);
        let cosv = g.value(cos);

        for (row, (&index, &label)) in idx.iter().zip(&labels).enumerate() {
            let feature: Vec<f64> = (0..d).map(|j| feats.at2(row, j)).collect();
            let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            let prediction = (0..c)
                .max_by(|&a, &b| cosv.at2(row, a).partial_cmp(&cosv.at2(row, b)).unwrap())
                .expect("at least one class");
            let scale = resolved.eval_scale(norm);
            let logits: Vec<f64> = (0..c).map(|j| scale * cosv.at2(row, j)).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - mx).exp()).sum();
            let prob = (logits[label] - mx).exp() / sum;
            let correct = prediction == label;
            if correct {
                correct_total += 1;
            }
            records.push(SampleRecord {
                index,
                feature,
                norm,
                label,
                prediction,
                correct,
                prob,
            });
        }
        start = end;
    }
    Ok((correct_total as f64 / n as f64, records))
}

// ── checkpoint format ────────────────────────────────────────────────
//
// magic "CMNC", version u32 LE, then one record per tensor:
// name length u32 LE, UTF-8 name, rank u32 LE, dims u32[] LE,
// float64 LE payload. Model configuration and the epoch counter are stored
// as reserved `meta.*` records in the same format.

const CHECKPOINT_MAGIC: &[u8; 4] = b"CMNC";
const CHECKPOINT_VERSION: u32 = 1;

fn push_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_loss(spec: &LossSpec) -> Vec<f64> {
    let variant_code = |v: &MarginVariant| match v {
        MarginVariant::AdditiveCosine => 0.0,
        MarginVariant::AdditiveAngle => 1.0,
    };
    match spec {
        LossSpec::Softmax => vec![0.0, 0.0, 0.0, 0.0, 0.0],
        LossSpec::FixedNorm { s } => vec![1.0, *s, 0.0, 0.0, 0.0],
        LossSpec::CmSoftmax { p, gamma } => vec![2.0, *p, *gamma, 0.0, 0.0],
        LossSpec::CmMargin {
            p,
            gamma,
            variant,
            margin,
        } => vec![3.0, *p, *gamma, variant_code(variant), *margin],
        LossSpec::FixedMargin { s, variant, margin } => {
            vec![4.0, *s, variant_code(variant), *margin, 0.0]
        }
    }
}

fn decode_loss(v: &[f64]) -> Result<LossSpec> {
    let variant = |code: f64| -> Result<MarginVariant> {
        match code as i64 {
            0 => Ok(MarginVariant::AdditiveCosine),
            1 => Ok(MarginVariant::AdditiveAngle),
            other => Err(Error::Format(format!("unknown margin variant code {other}"))),
        }
    };
    if v.len() != 5 {
        return Err(Error::Format("malformed loss record".into()));
    }
    Ok(match v[0] as i64 {
        0 => LossSpec::Softmax,
        1 => LossSpec::FixedNorm { s: v[1] },
        2 => LossSpec::CmSoftmax {
            p: v[1],
            gamma: v[2],
        },
        3 => LossSpec::CmMargin {
            p: v[1],
            gamma: v[2],
            variant: variant(v[3])?,
            margin: v[4],
        },
        4 => LossSpec::FixedMargin {
            s: v[1],
            variant: variant(v[2])?,
            margin: v[3],
        },
        other => return Err(Error::Format(format!("unknown loss code {other}"))),
    })
}

/// Serializes parameters, configuration, and the epoch counter; the
/// round-trip through [`load_checkpoint`] is bitwise lossless.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    for (name, tensor) in &state.model.params {
        push_record(&mut out, name, tensor.shape(), tensor.data());
    }

    let b = &state.model.backbone;
    let kind = match b.kind {
        BackboneKind::Mlp => 0.0,
        BackboneKind::Cnn => 1.0,
    };
    let widths = match b.kind {
        BackboneKind::Mlp => &b.hidden,
        BackboneKind::Cnn => &b.stages,
    };
    let mut backbone_enc = vec![kind, b.feature_dim as f64];
    backbone_enc.extend(widths.iter().map(|&w| w as f64));
    push_record(&mut out, "meta.backbone", &[backbone_enc.len()], &backbone_enc);

    let dims_enc: Vec<f64> = state.model.input_dims.iter().map(|&d| d as f64).collect();
    push_record(&mut out, "meta.input_dims", &[dims_enc.len()], &dims_enc);
    push_record(&mut out, "meta.classes", &[1], &[state.model.classes as f64]);
    push_record(&mut out, "meta.loss", &[5], &encode_loss(&state.loss_spec));
    push_record(&mut out, "meta.epoch", &[1], &[state.epoch as f64]);
    push_record(
        &mut out,
        "meta.loss_history",
        &[state.loss_history.len()],
        &state.loss_history,
    );

    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic in {}",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }

    let mut params: Vec<(String, Tensor)> = Vec::new();
    let mut meta: Vec<(String, Vec<f64>)> = Vec::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint record name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let data = cur.f64s(count)?;
        if name.starts_with("meta.") {
            meta.push((name, data));
        } else {
            params.push((name, Tensor::new(dims, data)?));
        }
    }

    let get = |key: &str| -> Result<&Vec<f64>> {
        meta.iter()
            .find(|(n, _)| n == key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))
    };

    let backbone_enc = get("meta.backbone")?;
    if backbone_enc.len() < 2 {
        return Err(Error::Format("malformed backbone record".into()));
    }
    let widths: Vec<usize> = backbone_enc[2..].iter().map(|&v| v as usize).collect();
    let feature_dim = backbone_enc[1] as usize;
    let backbone = match backbone_enc[0] as i64 {
        0 => BackboneConfig::mlp(widths, feature_dim),
        1 => BackboneConfig::cnn(widths, feature_dim),
        other => return Err(Error::Format(format!("unknown backbone kind {other}"))),
    };
    let input_dims: Vec<usize> = get("meta.input_dims")?.iter().map(|&v| v as usize).collect();
    let classes = get("meta.classes")?[0] as usize;
    let loss_spec = decode_loss(get("meta.loss")?)?;
    let epoch = get("meta.epoch")?[0] as usize;
    let loss_history = get("meta.loss_history")?.clone();

    Ok(TrainState {
        model: Model {
            backbone,
            input_dims,
            classes,
            params,
        },
        loss_spec,
        epoch,
        loss_history,
    })
}
