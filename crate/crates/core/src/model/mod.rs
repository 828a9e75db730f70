//! The adaptable classifier: a small sequential network with tagged
//! parameter groups, batch-normalization layers that can switch between
//! running and batch statistics, and exact snapshot/restore.

mod layers;
mod state;

pub use state::{ArchitectureSignature, ModelState, SignatureEntry};
pub(crate) use state::to_hex;

use ndarray::{Array2, Array4};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use layers::{ConvGeom, NormCache};

/// A batch of inputs laid out as `[N, C, H, W]`.
pub type Images = Array4<f64>;

/// Parameter group tags. Methods select which groups they update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    NormalizationAffine,
    FeatureExtractor,
    ClassifierHead,
}

/// Which parameters an update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    Only(ParamGroup),
    All,
}

impl ParamScope {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::Only(g) => g == group,
        }
    }
}

/// Whether normalization layers use stored running statistics or
/// statistics recomputed from each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    UseRunning,
    UseBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    Relu,
    GlobalAvgPool,
    Linear {
        out: usize,
    },
    /// Marks the point whose activations are reported as features.
    Features,
}

/// Declarative network description. The final layer must be a linear
/// layer producing `num_classes` outputs, and exactly one
/// [`LayerSpec::Features`] marker must precede it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Two conv/BN/ReLU stages, global pooling and a linear head.
    pub fn small_conv(input: [usize; 3], widths: [usize; 2], num_classes: usize) -> Self {
        Self {
            input,
            num_classes,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: widths[0],
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: widths[1],
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Features,
                LayerSpec::Linear { out: num_classes },
            ],
        }
    }

    /// Linear/BN/ReLU feature extractor over flat inputs.
    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            input: [input_dim, 1, 1],
            num_classes,
            layers: vec![
                LayerSpec::Linear { out: hidden },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Features,
                LayerSpec::Linear { out: num_classes },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        weight: usize,
        geom: ConvGeom,
    },
    Norm {
        gamma: usize,
        beta: usize,
        stats: usize,
        channels: usize,
        spatial: usize,
    },
    Relu,
    Pool {
        channels: usize,
        spatial: usize,
    },
    Linear {
        weight: usize,
        bias: usize,
        inp: usize,
        out: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    out_len: usize,
}

/// Gradients aligned with the model's parameter list. An empty entry means
/// the parameter was outside the requested scope.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_for(model: &AdaptableModel, scope: ParamScope) -> Self {
        Grads(
            model
                .params
                .iter()
                .map(|p| {
                    if scope.includes(p.group) {
                        vec![0.0; p.value.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        )
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if a.is_empty() {
                if !b.is_empty() {
                    *a = b.iter().map(|x| x * scale).collect();
                }
                continue;
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flat_map(|g| g.iter()).all(|x| x.is_finite())
    }
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    acts: Vec<Vec<f64>>,
    norm: Vec<Option<NormCache>>,
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array2<f64>,
    pub features: Array2<f64>,
    pub tape: Tape,
}

/// Momentum applied to running statistics when they are updated from a
/// batch (`running = (1 - m) * running + m * batch`).
pub const RUNNING_STATS_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct AdaptableModel {
    arch: Architecture,
    nodes: Vec<Node>,
    feature_node: usize,
    feature_dim: usize,
    params: Vec<Param>,
    norm: Vec<NormStats>,
    mode: NormMode,
    slots: Vec<Vec<f64>>,
}

impl AdaptableModel {
    /// Build a model with He-initialized weights drawn from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed);
        let [mut c, mut h, mut w] = arch.input;
        if c == 0 || h == 0 || w == 0 || arch.num_classes == 0 {
            return Err(Error::invalid("architecture dimensions must be positive"));
        }
        let mut nodes = Vec::new();
        let mut params: Vec<Param> = Vec::new();
        let mut norm = Vec::new();
        let mut feature_node = None;
        let mut seen_features = false;
        let mut feature_dim = 0;
        for (li, spec) in arch.layers.iter().enumerate() {
            // Layers before the feature tap extract features; after it they form the head.
            let group = if seen_features {
                ParamGroup::ClassifierHead
            } else {
                ParamGroup::FeatureExtractor
            };
            match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let geom = ConvGeom::new(c, out_channels, kernel, stride, padding, h, w)
                        .ok_or_else(|| Error::invalid(format!("layer {li}: conv does not fit input")))?;
                    let fan_in = c * kernel * kernel;
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    let weight: Vec<f64> = (0..out_channels * fan_in).map(|_| normal.sample(&mut rng)).collect();
                    params.push(Param {
                        name: format!("layers.{li}.weight"),
                        shape: vec![out_channels, c, kernel, kernel],
                        group,
                        value: weight,
                    });
                    nodes.push(Node {
                        op: Op::Conv {
                            weight: params.len() - 1,
                            geom,
                        },
                        out_len: out_channels * geom.out_h * geom.out_w,
                    });
                    c = out_channels;
                    h = geom.out_h;
                    w = geom.out_w;
                }
                LayerSpec::BatchNorm => {
                    params.push(Param {
                        name: format!("layers.{li}.gamma"),
                        shape: vec![c],
                        group: ParamGroup::NormalizationAffine,
                        value: vec![1.0; c],
                    });
                    params.push(Param {
                        name: format!("layers.{li}.beta"),
                        shape: vec![c],
                        group: ParamGroup::NormalizationAffine,
                        value: vec![0.0; c],
                    });
                    norm.push(NormStats {
                        mean: vec![0.0; c],
                        var: vec![1.0; c],
                    });
                    nodes.push(Node {
                        op: Op::Norm {
                            gamma: params.len() - 2,
                            beta: params.len() - 1,
                            stats: norm.len() - 1,
                            channels: c,
                            spatial: h * w,
                        },
                        out_len: c * h * w,
                    });
                }
                LayerSpec::Relu => nodes.push(Node {
                    op: Op::Relu,
                    out_len: c * h * w,
                }),
                LayerSpec::GlobalAvgPool => {
                    nodes.push(Node {
                        op: Op::Pool {
                            channels: c,
                            spatial: h * w,
                        },
                        out_len: c,
                    });
                    h = 1;
                    w = 1;
                }
                LayerSpec::Linear { out } => {
                    let inp = c * h * w;
                    let std = if group == ParamGroup::ClassifierHead {
                        (1.0 / inp as f64).sqrt()
                    } else {
                        (2.0 / inp as f64).sqrt()
                    };
                    let normal = Normal::new(0.0, std).expect("valid std");
                    params.push(Param {
                        name: format!("layers.{li}.weight"),
                        shape: vec![out, inp],
                        group,
                        value: (0..out * inp).map(|_| normal.sample(&mut rng)).collect(),
                    });
                    params.push(Param {
                        name: format!("layers.{li}.bias"),
                        shape: vec![out],
                        group,
                        value: vec![0.0; out],
                    });
                    nodes.push(Node {
                        op: Op::Linear {
                            weight: params.len() - 2,
                            bias: params.len() - 1,
                            inp,
                            out,
                        },
                        out_len: out,
                    });
                    c = out;
                    h = 1;
                    w = 1;
                }
                LayerSpec::Features => {
                    if seen_features {
                        return Err(Error::invalid("more than one feature marker"));
                    }
                    seen_features = true;
                    feature_node = Some(nodes.len());
                    feature_dim = c * h * w;
                }
            }
        }
        let feature_node = feature_node.ok_or_else(|| Error::invalid("architecture lacks a feature marker"))?;
        match nodes.last() {
            Some(Node {
                op: Op::Linear { out, .. },
                ..
            }) if *out == arch.num_classes => {}
            _ => {
                return Err(Error::invalid(
                    "final layer must be linear with num_classes outputs",
                ))
            }
        }
        let slots = vec![Vec::new(); params.len()];
        Ok(Self {
            arch,
            nodes,
            feature_node,
            feature_dim,
            params,
            norm,
            mode: NormMode::UseRunning,
            slots,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm
    }

    pub fn norm_mode(&self) -> NormMode {
        self.mode
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        self.mode = mode;
    }

    pub fn optimizer_slots(&self) -> &[Vec<f64>] {
        &self.slots
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.params.iter().any(|p| p.group == group)
    }

    pub fn signature(&self) -> ArchitectureSignature {
        ArchitectureSignature {
            num_classes: self.arch.num_classes,
            params: self
                .params
                .iter()
                .map(|p| SignatureEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    group: p.group,
                })
                .collect(),
            norm_channels: self.norm.iter().map(|n| n.mean.len()).collect(),
        }
    }

    /// Pure forward pass; never mutates the model.
    pub fn forward(&self, images: &Images) -> Result<Forward> {
        let shape = images.shape();
        if shape[1..] != self.arch.input[..] {
            return Err(Error::Shape(format!(
                "input {:?} does not match architecture input {:?}",
                &shape[1..],
                self.arch.input
            )));
        }
        let batch = shape[0];
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let input = match images.as_slice() {
            Some(s) => s.to_vec(),
            None => images.iter().copied().collect(),
        };
        let use_batch = self.mode == NormMode::UseBatch;
        let mut acts = Vec::with_capacity(self.nodes.len() + 1);
        let mut norm_caches = Vec::with_capacity(self.nodes.len());
        acts.push(input);
        for node in &self.nodes {
            let x = acts.last().expect("input present");
            let mut y = vec![0.0; batch * node.out_len];
            let mut cache = None;
            match &node.op {
                Op::Conv { weight, geom } => {
                    layers::conv_forward(geom, batch, x, &self.params[*weight].value, None, &mut y)
                }
                Op::Norm {
                    gamma,
                    beta,
                    stats,
                    channels,
                    spatial,
                } => {
                    let st = &self.norm[*stats];
                    cache = Some(layers::norm_forward(
                        batch,
                        *channels,
                        *spatial,
                        x,
                        &self.params[*gamma].value,
                        &self.params[*beta].value,
                        &st.mean,
                        &st.var,
                        use_batch,
                        &mut y,
                    ));
                }
                Op::Relu => {
                    for (o, i) in y.iter_mut().zip(x) {
                        *o = i.max(0.0);
                    }
                }
                Op::Pool { channels, spatial } => layers::pool_forward(batch, *channels, *spatial, x, &mut y),
                Op::Linear {
                    weight,
                    bias,
                    inp,
                    out,
                } => layers::linear_forward(
                    batch,
                    *inp,
                    *out,
                    x,
                    &self.params[*weight].value,
                    &self.params[*bias].value,
                    &mut y,
                ),
            }
            norm_caches.push(cache);
            acts.push(y);
        }
        let logits = Array2::from_shape_vec((batch, self.arch.num_classes), acts.last().expect("output").clone())
            .expect("logit shape");
        let features = Array2::from_shape_vec((batch, self.feature_dim), acts[self.feature_node].clone())
            .expect("feature shape");
        Ok(Forward {
            logits,
            features,
            tape: Tape {
                batch,
                acts,
                norm: norm_caches,
            },
        })
    }

    /// Backpropagate loss gradients with respect to logits (and optionally
    /// features) into parameter gradients for the parameters in `scope`.
    pub fn backward(
        &self,
        tape: &Tape,
        d_logits: &Array2<f64>,
        d_features: Option<&Array2<f64>>,
        scope: ParamScope,
    ) -> Grads {
        let batch = tape.batch;
        assert_eq!(d_logits.dim(), (batch, self.arch.num_classes), "logit gradient shape");
        let mut grads = Grads::zeros_for(self, scope);
        let mut d = d_logits.iter().copied().collect::<Vec<f64>>();
        for (ni, node) in self.nodes.iter().enumerate().rev() {
            let x = &tape.acts[ni];
            let need_input = ni > 0;
            let mut dx = vec![0.0; x.len()];
            match &node.op {
                Op::Conv { weight, geom } => {
                    let mut dw = take_slot(&mut grads, *weight);
                    layers::conv_backward(
                        geom,
                        batch,
                        x,
                        &self.params[*weight].value,
                        &d,
                        dw.as_deref_mut_opt(),
                        None,
                        if need_input { Some(&mut dx) } else { None },
                    );
                    put_slot(&mut grads, *weight, dw);
                }
                Op::Norm {
                    gamma,
                    beta,
                    channels,
                    spatial,
                    ..
                } => {
                    let mut dg = take_slot(&mut grads, *gamma);
                    let mut db = take_slot(&mut grads, *beta);
                    layers::norm_backward(
                        batch,
                        *channels,
                        *spatial,
                        tape.norm[ni].as_ref().expect("norm cache"),
                        &self.params[*gamma].value,
                        &d,
                        dg.as_deref_mut_opt(),
                        db.as_deref_mut_opt(),
                        &mut dx,
                    );
                    put_slot(&mut grads, *gamma, dg);
                    put_slot(&mut grads, *beta, db);
                }
                Op::Relu => {
                    let y = &tape.acts[ni + 1];
                    for ((o, &yi), &di) in dx.iter_mut().zip(y).zip(&d) {
                        *o = if yi > 0.0 { di } else { 0.0 };
                    }
                }
                Op::Pool { channels, spatial } => layers::pool_backward(batch, *channels, *spatial, &d, &mut dx),
                Op::Linear {
                    weight,
                    bias,
                    inp,
                    out,
                } => {
                    let mut dw = take_slot(&mut grads, *weight);
                    let mut db = take_slot(&mut grads, *bias);
                    layers::linear_backward(
                        batch,
                        *inp,
                        *out,
                        x,
                        &self.params[*weight].value,
                        &d,
                        dw.as_deref_mut_opt(),
                        db.as_deref_mut_opt(),
                        if need_input { Some(&mut dx) } else { None },
                    );
                    put_slot(&mut grads, *weight, dw);
                    put_slot(&mut grads, *bias, db);
                }
            }
            d = dx;
            // `d` now holds the gradient w.r.t. activation `ni`; add the
            // feature-loss gradient when this is the tap point.
            if ni == self.feature_node {
                if let Some(df) = d_features {
                    assert_eq!(df.dim(), (batch, self.feature_dim), "feature gradient shape");
                    for (a, b) in d.iter_mut().zip(df.iter()) {
                        *a += b;
                    }
                }
            }
        }
        grads
    }

    /// Update running statistics from the batch statistics recorded in
    /// `tape`. No-op unless the model is in batch-statistics mode.
    pub fn commit_running_stats(&mut self, tape: &Tape) {
        if self.mode != NormMode::UseBatch {
            return;
        }
        for (node, cache) in self.nodes.iter().zip(&tape.norm) {
            if let (Op::Norm { stats, .. }, Some(cache)) = (&node.op, cache) {
                let st = &mut self.norm[*stats];
                let n = cache.count as f64;
                let unbias = if cache.count > 1 { n / (n - 1.0) } else { 1.0 };
                for c in 0..st.mean.len() {
                    st.mean[c] = (1.0 - RUNNING_STATS_MOMENTUM) * st.mean[c]
                        + RUNNING_STATS_MOMENTUM * cache.batch_mean[c];
                    st.var[c] = (1.0 - RUNNING_STATS_MOMENTUM) * st.var[c]
                        + RUNNING_STATS_MOMENTUM * cache.batch_var[c] * unbias;
                }
            }
        }
    }

    /// Plain SGD with optional heavy-ball momentum (first step seeds the
    /// buffer with the raw gradient). Only parameters in `scope` move.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64, momentum: f64, scope: ParamScope) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !scope.includes(p.group) {
                continue;
            }
            let g = &grads.0[i];
            if g.is_empty() {
                continue;
            }
            if momentum != 0.0 {
                let buf = &mut self.slots[i];
                if buf.is_empty() {
                    *buf = g.clone();
                } else {
                    for (b, gi) in buf.iter_mut().zip(g) {
                        *b = momentum * *b + gi;
                    }
                }
                for (v, b) in p.value.iter_mut().zip(buf.iter()) {
                    *v -= lr * b;
                }
            } else {
                for (v, gi) in p.value.iter_mut().zip(g) {
                    *v -= lr * gi;
                }
            }
        }
    }

    /// Add `scale * direction` to the parameters in `scope` (no optimizer
    /// state involved).
    pub fn perturb(&mut self, direction: &Grads, scale: f64, scope: ParamScope) {
        for (p, g) in self.params.iter_mut().zip(&direction.0) {
            if !scope.includes(p.group) || g.is_empty() {
                continue;
            }
            for (v, gi) in p.value.iter_mut().zip(g) {
                *v += scale * gi;
            }
        }
    }

    /// Exponential moving average of parameters towards `other`:
    /// `self = rate * self + (1 - rate) * other`.
    pub fn ema_towards(&mut self, other: &AdaptableModel, rate: f64) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.value.iter_mut().zip(&b.value) {
                *x = rate * *x + (1.0 - rate) * y;
            }
        }
    }

    pub fn clear_optimizer_slots(&mut self) {
        self.slots.iter_mut().for_each(Vec::clear);
    }

    /// Parameters of one group, flattened in parameter order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    pub fn snapshot(&self) -> ModelState {
        ModelState::capture(self)
    }

    pub fn restore(&mut self, state: &ModelState) -> Result<()> {
        state.apply(self)
    }

    pub fn state_hash(&self) -> [u8; 32] {
        self.snapshot().hash()
    }
}

trait SliceOpt {
    fn as_deref_mut_opt(&mut self) -> Option<&mut [f64]>;
}

impl SliceOpt for Option<Vec<f64>> {
    fn as_deref_mut_opt(&mut self) -> Option<&mut [f64]> {
        self.as_mut().map(|v| v.as_mut_slice())
    }
}

fn take_slot(grads: &mut Grads, idx: usize) -> Option<Vec<f64>> {
    let v = std::mem::take(&mut grads.0[idx]);
    if v.is_empty() {
        None
    } else {
        Some(v)
    }
}

fn put_slot(grads: &mut Grads, idx: usize, v: Option<Vec<f64>>) {
    if let Some(v) = v {
        grads.0[idx] = v;
    }
}
