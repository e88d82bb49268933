//! U-Net and Tiramisu graphs with forward and backward passes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, BatchNormCache, BatchNormParams, BatchStats, ConvParams, LayerParams, Mode};
use crate::optim::he_uniform;
use crate::tensor::{Scalar, Shape, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    #[serde(default = "d_start_filters")]
    pub start_filters: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_one")]
    pub in_channels: usize,
    #[serde(default = "d_one")]
    pub out_channels: usize,
}

fn d_start_filters() -> usize {
    32
}
fn d_depth() -> usize {
    4
}
fn d_dropout() -> f64 {
    0.2
}
fn d_one() -> usize {
    1
}
fn d_down_blocks() -> Vec<usize> {
    vec![4, 5, 6, 7]
}
fn d_bottleneck() -> usize {
    8
}
fn d_growth() -> usize {
    12
}
fn d_l2() -> f64 {
    1e-5
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            start_filters: 32,
            depth: 4,
            dropout: 0.2,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiramisuConfig {
    #[serde(default = "d_down_blocks")]
    pub down_block_layers: Vec<usize>,
    #[serde(default = "d_bottleneck")]
    pub bottleneck_layers: usize,
    #[serde(default = "d_growth")]
    pub growth_rate: usize,
    #[serde(default = "d_start_filters")]
    pub start_filters: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_l2")]
    pub l2_lambda: f64,
    #[serde(default = "d_one")]
    pub in_channels: usize,
    #[serde(default = "d_one")]
    pub out_channels: usize,
}

impl Default for TiramisuConfig {
    fn default() -> Self {
        TiramisuConfig {
            down_block_layers: vec![4, 5, 6, 7],
            bottleneck_layers: 8,
            growth_rate: 12,
            start_filters: 32,
            dropout: 0.2,
            l2_lambda: 1e-5,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetworkConfig {
    Unet(UNetConfig),
    Tiramisu(TiramisuConfig),
}

impl NetworkConfig {
    pub fn build<T: Scalar>(&self, seed: u64) -> Result<NetworkGraph<T>> {
        match self {
            NetworkConfig::Unet(c) => build_unet(c, seed),
            NetworkConfig::Tiramisu(c) => build_tiramisu(c, seed),
        }
    }

    /// Number of 2× downsamplings; inputs must be divisible by `2^levels`.
    pub fn pool_levels(&self) -> usize {
        match self {
            NetworkConfig::Unet(c) => c.depth,
            NetworkConfig::Tiramisu(c) => c.down_block_layers.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Input { channels: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, l2: f64 },
    ConvTranspose2d { in_channels: usize, out_channels: usize, l2: f64 },
    MaxPool2d,
    BatchNorm2d { channels: usize },
    Relu,
    Sigmoid,
    Dropout { rate: f64 },
    Concat,
}

impl LayerKind {
    fn label(&self) -> String {
        match self {
            LayerKind::Input { channels } => format!("input({channels})"),
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                format!("conv{kernel}x{kernel} {in_channels}->{out_channels}")
            }
            LayerKind::ConvTranspose2d { in_channels, out_channels, .. } => {
                format!("convT2x2/2 {in_channels}->{out_channels}")
            }
            LayerKind::MaxPool2d => "maxpool2x2".into(),
            LayerKind::BatchNorm2d { channels } => format!("batchnorm({channels})"),
            LayerKind::Relu => "relu".into(),
            LayerKind::Sigmoid => "sigmoid".into(),
            LayerKind::Dropout { rate } => format!("dropout({rate})"),
            LayerKind::Concat => "concat".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Output channel count.
    pub channels: usize,
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub node: NodeId,
    pub name: String,
    pub layer: String,
    pub params: usize,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Argmax(Vec<usize>),
    BatchNorm(BatchNormCache<T>),
    Dropout(Option<Vec<T>>),
}

#[derive(Debug, Clone)]
struct Cache<T> {
    acts: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

/// Ordered DAG of layers. Node inputs always precede the node.
#[derive(Debug, Clone)]
pub struct NetworkGraph<T = f32> {
    nodes: Vec<Node>,
    params: BTreeMap<NodeId, LayerParams<T>>,
    output: NodeId,
    config: NetworkConfig,
    dropout_seed: u64,
    cache: Option<Cache<T>>,
    input_grad: Option<Tensor<T>>,
}

/// Mixes seeds into an independent 64-bit stream id (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Builder<T> {
    nodes: Vec<Node>,
    params: BTreeMap<NodeId, LayerParams<T>>,
    seed: u64,
}

impl<T: Scalar> Builder<T> {
    fn new(seed: u64) -> Self {
        Builder { nodes: Vec::new(), params: BTreeMap::new(), seed }
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node { name, kind, inputs, channels });
        self.nodes.len() - 1
    }

    fn ch(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    fn input(&mut self, channels: usize) -> NodeId {
        self.push("input".into(), LayerKind::Input { channels }, vec![], channels)
    }

    fn conv(&mut self, name: String, x: NodeId, out: usize, kernel: usize, l2: f64) -> Result<NodeId> {
        let cin = self.ch(x);
        let id = self.nodes.len();
        let weight = he_uniform(Shape::new(out, cin, kernel, kernel), cin * kernel * kernel, mix_seed(self.seed, id as u64))?;
        let bias = Tensor::zeros(Shape::new(1, out, 1, 1));
        self.params.insert(id, LayerParams::Conv(ConvParams { weight, bias }));
        Ok(self.push(name, LayerKind::Conv2d { in_channels: cin, out_channels: out, kernel, l2 }, vec![x], out))
    }

    fn convt(&mut self, name: String, x: NodeId, out: usize, l2: f64) -> Result<NodeId> {
        let cin = self.ch(x);
        let id = self.nodes.len();
        let weight = he_uniform(Shape::new(cin, out, 2, 2), cin * 4, mix_seed(self.seed, id as u64))?;
        let bias = Tensor::zeros(Shape::new(1, out, 1, 1));
        self.params.insert(id, LayerParams::Conv(ConvParams { weight, bias }));
        Ok(self.push(name, LayerKind::ConvTranspose2d { in_channels: cin, out_channels: out, l2 }, vec![x], out))
    }

    fn bn(&mut self, name: String, x: NodeId) -> NodeId {
        let c = self.ch(x);
        let id = self.nodes.len();
        self.params.insert(id, LayerParams::BatchNorm(BatchNormParams::new(c)));
        self.push(name, LayerKind::BatchNorm2d { channels: c }, vec![x], c)
    }

    fn unary(&mut self, name: String, kind: LayerKind, x: NodeId) -> NodeId {
        let c = self.ch(x);
        self.push(name, kind, vec![x], c)
    }

    fn dropout(&mut self, name: String, x: NodeId, rate: f64) -> NodeId {
        if rate > 0.0 {
            self.unary(name, LayerKind::Dropout { rate }, x)
        } else {
            x
        }
    }

    fn concat(&mut self, name: String, a: NodeId, b: NodeId) -> NodeId {
        let c = self.ch(a) + self.ch(b);
        self.push(name, LayerKind::Concat, vec![a, b], c)
    }

    fn finish(self, output: NodeId, config: NetworkConfig) -> NetworkGraph<T> {
        NetworkGraph {
            nodes: self.nodes,
            params: self.params,
            output,
            config,
            dropout_seed: 0,
            cache: None,
            input_grad: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidRate(rate))
    }
}

/// Encoder of `depth` blocks `[conv3 → relu → conv3 → relu → dropout → pool]`
/// with filters doubling per block, a bottleneck block, and a mirrored
/// decoder of `[convT → concat(skip) → conv3 → relu → conv3 → relu → dropout]`.
/// Head: 1×1 conv and sigmoid. Weights are He-uniform from `seed`.
pub fn build_unet<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Result<NetworkGraph<T>> {
    if cfg.start_filters == 0 || cfg.depth == 0 || cfg.in_channels == 0 || cfg.out_channels == 0 {
        return Err(invalid(format!("invalid U-Net config {cfg:?}")));
    }
    check_rate(cfg.dropout)?;
    let mut b = Builder::<T>::new(seed);
    let mut x = b.input(cfg.in_channels);

    let block = |b: &mut Builder<T>, x: NodeId, f: usize, tag: &str| -> Result<NodeId> {
        let c1 = b.conv(format!("{tag}.conv1"), x, f, 3, 0.0)?;
        let r1 = b.unary(format!("{tag}.relu1"), LayerKind::Relu, c1);
        let c2 = b.conv(format!("{tag}.conv2"), r1, f, 3, 0.0)?;
        let r2 = b.unary(format!("{tag}.relu2"), LayerKind::Relu, c2);
        Ok(b.dropout(format!("{tag}.dropout"), r2, cfg.dropout))
    };

    let mut skips = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let f = cfg.start_filters << level;
        let out = block(&mut b, x, f, &format!("enc{}", level + 1))?;
        skips.push(out);
        x = b.unary(format!("enc{}.pool", level + 1), LayerKind::MaxPool2d, out);
    }
    x = block(&mut b, x, cfg.start_filters << cfg.depth, "bottleneck")?;
    for level in (0..cfg.depth).rev() {
        let f = cfg.start_filters << level;
        let tag = format!("dec{}", level + 1);
        let up = b.convt(format!("{tag}.up"), x, f, 0.0)?;
        let cat = b.concat(format!("{tag}.concat"), up, skips[level]);
        x = block(&mut b, cat, f, &tag)?;
    }
    let head = b.conv("head.conv".into(), x, cfg.out_channels, 1, 0.0)?;
    let out = b.unary("head.sigmoid".into(), LayerKind::Sigmoid, head);
    Ok(b.finish(out, NetworkConfig::Unet(cfg.clone())))
}

/// Densely connected block: each layer `[bn → relu → conv3(growth)]` sees the
/// concatenation of the block input and all earlier layer outputs.
/// Returns `(input ⧺ new features, new features)`.
fn dense_block<T: Scalar>(
    b: &mut Builder<T>,
    x: NodeId,
    layers: usize,
    growth: usize,
    l2: f64,
    tag: &str,
) -> Result<(NodeId, NodeId)> {
    let mut stack = x;
    let mut new: Option<NodeId> = None;
    for i in 0..layers {
        let t = format!("{tag}.layer{}", i + 1);
        let n = b.bn(format!("{t}.bn"), stack);
        let r = b.unary(format!("{t}.relu"), LayerKind::Relu, n);
        let c = b.conv(format!("{t}.conv"), r, growth, 3, l2)?;
        stack = b.concat(format!("{t}.concat"), stack, c);
        new = Some(match new {
            None => c,
            Some(prev) => b.concat(format!("{t}.new"), prev, c),
        });
    }
    Ok((stack, new.expect("dense block has at least one layer")))
}

/// Stem conv, down dense blocks each followed by dropout and max-pooling, a
/// bottleneck dense block, and a mirrored up path of
/// `[convT(new features) → concat(skip) → dense block → dropout]`.
/// Every convolution carries the L2 coefficient `l2_lambda`.
pub fn build_tiramisu<T: Scalar>(cfg: &TiramisuConfig, seed: u64) -> Result<NetworkGraph<T>> {
    if cfg.down_block_layers.is_empty()
        || cfg.down_block_layers.contains(&0)
        || cfg.bottleneck_layers == 0
        || cfg.growth_rate == 0
        || cfg.start_filters == 0
        || cfg.in_channels == 0
        || cfg.out_channels == 0
        || cfg.l2_lambda < 0.0
    {
        return Err(invalid(format!("invalid Tiramisu config {cfg:?}")));
    }
    check_rate(cfg.dropout)?;
    let l2 = cfg.l2_lambda;
    let g = cfg.growth_rate;
    let mut b = Builder::<T>::new(seed);
    let input = b.input(cfg.in_channels);
    let mut x = b.conv("stem.conv".into(), input, cfg.start_filters, 3, l2)?;

    let mut skips = Vec::new();
    for (i, &n) in cfg.down_block_layers.iter().enumerate() {
        let tag = format!("down{}", i + 1);
        let (stack, _) = dense_block(&mut b, x, n, g, l2, &tag)?;
        let d = b.dropout(format!("{tag}.dropout"), stack, cfg.dropout);
        skips.push(d);
        x = b.unary(format!("{tag}.pool"), LayerKind::MaxPool2d, d);
    }
    let (_, new) = dense_block(&mut b, x, cfg.bottleneck_layers, g, l2, "bottleneck")?;
    let mut carry = b.dropout("bottleneck.dropout".into(), new, cfg.dropout);

    let levels = cfg.down_block_layers.len();
    for (j, &n) in cfg.down_block_layers.iter().enumerate().rev() {
        let tag = format!("up{}", levels - j);
        let c = b.ch(carry);
        let up = b.convt(format!("{tag}.up"), carry, c, l2)?;
        let cat = b.concat(format!("{tag}.concat"), up, skips[j]);
        let (stack, new) = dense_block(&mut b, cat, n, g, l2, &tag)?;
        let last = j == 0;
        let keep = if last { stack } else { new };
        carry = b.dropout(format!("{tag}.dropout"), keep, cfg.dropout);
    }
    let head = b.conv("head.conv".into(), carry, cfg.out_channels, 1, l2)?;
    let out = b.unary("head.sigmoid".into(), LayerKind::Sigmoid, head);
    Ok(b.finish(out, NetworkConfig::Tiramisu(cfg.clone())))
}

impl<T: Scalar> NetworkGraph<T> {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<NodeId, LayerParams<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<NodeId, LayerParams<T>> {
        &mut self.params
    }

    pub fn input_channels(&self) -> usize {
        self.nodes[0].channels
    }

    /// Seeds the dropout masks of subsequent train-mode forward passes.
    pub fn set_dropout_seed(&mut self, seed: u64) {
        self.dropout_seed = seed;
    }

    /// Trainable tensors in a stable order (node id, then slot).
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        self.params
            .iter()
            .flat_map(|(id, p)| {
                let name = &self.nodes[*id].name;
                p.slots().into_iter().map(move |(s, t)| (format!("{name}.{s}"), t))
            })
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params
            .values_mut()
            .flat_map(|p| p.slots_mut().into_iter().map(|(_, t)| t))
            .collect()
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        self.trainable().iter().map(|(_, t)| t.values.len()).collect()
    }

    pub fn zero_grad(&mut self) {
        for t in self.trainable_mut() {
            t.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.trainable_count()).sum()
    }

    /// Per-layer trainable parameter counts; the rows sum to [`Self::param_count`].
    pub fn param_table(&self) -> Vec<ParamRow> {
        self.params
            .iter()
            .map(|(id, p)| ParamRow {
                node: *id,
                name: self.nodes[*id].name.clone(),
                layer: self.nodes[*id].kind.label(),
                params: p.trainable_count(),
            })
            .collect()
    }

    pub fn describe(&self) -> String {
        let rows = self.param_table();
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:<24}  {:>10}", "layer", "kind", "params");
        for r in &rows {
            let _ = writeln!(s, "{:<width$}  {:<24}  {:>10}", r.name, r.layer, r.params);
        }
        let total: usize = rows.iter().map(|r| r.params).sum();
        let _ = writeln!(s, "{:<width$}  {:<24}  {:>10}", "total", "", total);
        s
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = self.input_channels();
        if x.shape.c != c {
            return Err(Error::ShapeMismatch(format!("network expects {c} input channels, got {}", x.shape)));
        }
        let div = 1usize << self.config.pool_levels();
        if x.shape.h % div != 0 || x.shape.w % div != 0 || x.shape.h == 0 || x.shape.w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input spatial extent {}×{} must be a positive multiple of {div}",
                x.shape.h, x.shape.w
            )));
        }
        Ok(())
    }

    fn conv_params(&self, id: NodeId) -> &ConvParams<T> {
        match &self.params[&id] {
            LayerParams::Conv(p) => p,
            _ => unreachable!("node {id} holds conv parameters"),
        }
    }

    fn bn_params(&self, id: NodeId) -> &BatchNormParams<T> {
        match &self.params[&id] {
            LayerParams::BatchNorm(p) => p,
            _ => unreachable!("node {id} holds batch norm parameters"),
        }
    }

    /// Evaluates all nodes; returns activations, backward aux data and the
    /// batch statistics of every batch norm node (train mode only).
    fn run(&self, x: &Tensor<T>, mode: Mode) -> Result<(Cache<T>, Vec<(NodeId, BatchStats)>)> {
        self.check_input(x)?;
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        let mut updates = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let inp = |k: usize| &acts[node.inputs[k]];
            let (y, a) = match &node.kind {
                LayerKind::Input { .. } => (x.clone(), Aux::None),
                LayerKind::Conv2d { .. } => (layers::conv2d(inp(0), self.conv_params(id))?, Aux::None),
                LayerKind::ConvTranspose2d { .. } => {
                    (layers::conv2d_transpose(inp(0), self.conv_params(id))?, Aux::None)
                }
                LayerKind::MaxPool2d => {
                    let (y, arg) = layers::maxpool2d(inp(0));
                    (y, Aux::Argmax(arg))
                }
                LayerKind::BatchNorm2d { .. } => {
                    let (y, c, stats) = layers::batchnorm2d_forward(inp(0), self.bn_params(id), mode, layers::BN_EPS)?;
                    if let Some(s) = stats {
                        updates.push((id, s));
                    }
                    (y, Aux::BatchNorm(c))
                }
                LayerKind::Relu => (layers::relu(inp(0)), Aux::None),
                LayerKind::Sigmoid => (layers::sigmoid(inp(0)), Aux::None),
                LayerKind::Dropout { rate } => {
                    let seed = mix_seed(self.dropout_seed, id as u64);
                    let (y, m) = layers::dropout(inp(0), *rate, mode, seed)?;
                    (y, Aux::Dropout(m))
                }
                LayerKind::Concat => (layers::concat_channels(inp(0), inp(1))?, Aux::None),
            };
            acts.push(y);
            aux.push(a);
        }
        Ok((Cache { acts, aux }, updates))
    }

    /// Forward pass that keeps activations for [`Self::backward`]. Train mode
    /// updates batch-norm running statistics and samples dropout masks.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (cache, updates) = self.run(x, mode)?;
        for (id, stats) in updates {
            if let Some(LayerParams::BatchNorm(p)) = self.params.get_mut(&id) {
                layers::update_running_stats(p, &stats, layers::BN_MOMENTUM);
            }
        }
        let out = cache.acts[self.output].clone();
        self.cache = Some(cache);
        Ok(out)
    }

    /// Eval-mode forward that leaves the graph untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut cache, _) = self.run(x, Mode::Eval)?;
        Ok(cache.acts.swap_remove(self.output))
    }

    /// Gradient w.r.t. the network input from the last backward pass.
    pub fn input_grad(&self) -> Option<&Tensor<T>> {
        self.input_grad.as_ref()
    }

    /// Accumulates parameter gradients of the last forward pass, given the
    /// gradient of a scalar loss w.r.t. the network output. L2-regularized
    /// layers additionally receive `2·λ·w` on their weights.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::BackwardBeforeForward)?;
        let result = self.backward_with(&cache, upstream);
        self.cache = Some(cache);
        result
    }

    fn backward_with(&mut self, cache: &Cache<T>, upstream: &Tensor<T>) -> Result<()> {
        if upstream.shape != cache.acts[self.output].shape {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {} does not match output {}",
                upstream.shape, cache.acts[self.output].shape
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(upstream.clone());

        fn add<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                None => *slot = Some(g),
                Some(acc) => acc.values.iter_mut().zip(g.values).for_each(|(a, b)| *a = *a + b),
            }
        }
        fn add_into<T: Scalar>(t: &mut Tensor<T>, g: &[T]) {
            t.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b);
        }

        self.input_grad = None;
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let inputs = self.nodes[id].inputs.clone();
            let x = |k: usize| &cache.acts[inputs[k]];
            match self.nodes[id].kind.clone() {
                LayerKind::Input { .. } => self.input_grad = Some(dy),
                LayerKind::Conv2d { l2, .. } | LayerKind::ConvTranspose2d { l2, .. } => {
                    let transpose = matches!(self.nodes[id].kind, LayerKind::ConvTranspose2d { .. });
                    let p = self.conv_params(id);
                    let (dx, dw, db) = if transpose {
                        layers::conv2d_transpose_backward(x(0), p, &dy)?
                    } else {
                        layers::conv2d_backward(x(0), p, &dy)?
                    };
                    let Some(LayerParams::Conv(p)) = self.params.get_mut(&id) else { unreachable!() };
                    add_into(&mut p.weight, &dw);
                    add_into(&mut p.bias, &db);
                    if l2 > 0.0 {
                        let two_l = T::of(2.0 * l2);
                        let ConvParams { weight, .. } = p;
                        let w = weight.values.clone();
                        weight.grad_mut().iter_mut().zip(w).for_each(|(g, w)| *g = *g + two_l * w);
                    }
                    add(&mut grads[inputs[0]], dx);
                }
                LayerKind::MaxPool2d => {
                    let Aux::Argmax(arg) = &cache.aux[id] else { unreachable!() };
                    add(&mut grads[inputs[0]], layers::maxpool2d_backward(x(0).shape, arg, &dy));
                }
                LayerKind::BatchNorm2d { .. } => {
                    let Aux::BatchNorm(c) = &cache.aux[id] else { unreachable!() };
                    let (dx, dg, db) = layers::batchnorm2d_backward(self.bn_params(id), c, &dy);
                    let Some(LayerParams::BatchNorm(p)) = self.params.get_mut(&id) else { unreachable!() };
                    add_into(&mut p.gamma, &dg);
                    add_into(&mut p.beta, &db);
                    add(&mut grads[inputs[0]], dx);
                }
                LayerKind::Relu => add(&mut grads[inputs[0]], layers::relu_backward(x(0), &dy)),
                LayerKind::Sigmoid => {
                    add(&mut grads[inputs[0]], layers::sigmoid_backward(&cache.acts[id], &dy))
                }
                LayerKind::Dropout { .. } => {
                    let Aux::Dropout(m) = &cache.aux[id] else { unreachable!() };
                    add(&mut grads[inputs[0]], layers::dropout_backward(m.as_deref(), &dy));
                }
                LayerKind::Concat => {
                    let (ga, gb) = layers::split_channels(&dy, x(0).shape.c);
                    add(&mut grads[inputs[0]], ga);
                    add(&mut grads[inputs[1]], gb);
                }
            }
        }
        Ok(())
    }

    /// Channel count each node receives on its first input.
    pub fn input_channels_of(&self, id: NodeId) -> usize {
        self.nodes[id].inputs.first().map(|i| self.nodes[*i].channels).unwrap_or(0)
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Batch-norm running statistics by node name, for checkpoints.
    pub fn buffers(&self) -> Vec<(String, &[T], &[T])> {
        self.params
            .iter()
            .filter_map(|(id, p)| match p {
                LayerParams::BatchNorm(b) => Some((self.nodes[*id].name.clone(), &b.running_mean[..], &b.running_var[..])),
                _ => None,
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkGraph<U> {
        let params = self
            .params
            .iter()
            .map(|(id, p)| {
                let q = match p {
                    LayerParams::Conv(c) => LayerParams::Conv(ConvParams { weight: c.weight.cast(), bias: c.bias.cast() }),
                    LayerParams::BatchNorm(b) => LayerParams::BatchNorm(BatchNormParams {
                        gamma: b.gamma.cast(),
                        beta: b.beta.cast(),
                        running_mean: b.running_mean.iter().map(|v| U::of(v.f64())).collect(),
                        running_var: b.running_var.iter().map(|v| U::of(v.f64())).collect(),
                    }),
                };
                (*id, q)
            })
            .collect();
        NetworkGraph {
            nodes: self.nodes.clone(),
            params,
            output: self.output,
            config: self.config.clone(),
            dropout_seed: self.dropout_seed,
            cache: None,
            input_grad: None,
        }
    }

    /// Overwrites every L2 coefficient.
    pub fn set_l2(&mut self, lambda: f64) {
        for n in &mut self.nodes {
            match &mut n.kind {
                LayerKind::Conv2d { l2, .. } | LayerKind::ConvTranspose2d { l2, .. } => *l2 = lambda,
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_unet_parameter_count() {
        let g = build_unet::<f32>(&UNetConfig::default(), 0).unwrap();
        // conv3 = 9·cin·cout + cout; convT = 4·cin·cout + cout
        let conv = |i: usize, o: usize| 9 * i * o + o;
        let up = |i: usize, o: usize| 4 * i * o + o;
        let mut expect = 0;
        let f = [32, 64, 128, 256];
        let mut cin = 1;
        for &c in &f {
            expect += conv(cin, c) + conv(c, c);
            cin = c;
        }
        expect += conv(256, 512) + conv(512, 512);
        let mut below = 512;
        for &c in f.iter().rev() {
            expect += up(below, c) + conv(2 * c, c) + conv(c, c);
            below = c;
        }
        expect += 32 + 1;
        assert_eq!(g.param_count(), expect);
        assert_eq!(expect, 7_759_521);
        let total: usize = g.param_table().iter().map(|r| r.params).sum();
        assert_eq!(total, g.param_count());
    }

    #[test]
    fn tiramisu_dense_block_channel_rule() {
        let cfg = TiramisuConfig::default();
        let g = build_tiramisu::<f32>(&cfg, 0).unwrap();
        let mut c_in = cfg.start_filters;
        for (b, &n) in cfg.down_block_layers.iter().enumerate() {
            for i in 0..n {
                let id = g.find(&format!("down{}.layer{}.conv", b + 1, i + 1)).unwrap();
                assert_eq!(g.input_channels_of(id), c_in + i * cfg.growth_rate);
            }
            c_in += n * cfg.growth_rate;
        }
        let first = g.find("bottleneck.layer1.bn").unwrap();
        let expected = cfg.start_filters + cfg.growth_rate * cfg.down_block_layers.iter().sum::<usize>();
        assert_eq!(g.input_channels_of(first), expected);
        assert_eq!(expected, 296);
    }

    #[test]
    fn minimal_builds_preserve_shape() {
        let u = build_unet::<f64>(&UNetConfig { start_filters: 1, depth: 1, ..Default::default() }, 1).unwrap();
        let x = Tensor::filled(Shape::new(1, 1, 6, 4), 0.3);
        assert_eq!(u.infer(&x).unwrap().shape, x.shape);

        let t = build_tiramisu::<f64>(
            &TiramisuConfig { down_block_layers: vec![1], bottleneck_layers: 1, growth_rate: 1, ..Default::default() },
            1,
        )
        .unwrap();
        let x = Tensor::filled(Shape::new(1, 1, 16, 16), -0.2);
        assert_eq!(t.infer(&x).unwrap().shape, x.shape);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(build_unet::<f32>(&UNetConfig { depth: 0, ..Default::default() }, 0).is_err());
        assert!(build_unet::<f32>(&UNetConfig { start_filters: 0, ..Default::default() }, 0).is_err());
        assert!(build_tiramisu::<f32>(&TiramisuConfig { growth_rate: 0, ..Default::default() }, 0).is_err());
        assert!(build_tiramisu::<f32>(&TiramisuConfig { down_block_layers: vec![], ..Default::default() }, 0).is_err());
    }

    #[test]
    fn backward_before_forward_and_bad_inputs() {
        let mut u = build_unet::<f64>(&UNetConfig { start_filters: 2, depth: 2, ..Default::default() }, 1).unwrap();
        let up = Tensor::zeros(Shape::new(1, 1, 8, 8));
        assert!(matches!(u.backward(&up), Err(Error::BackwardBeforeForward)));
        assert!(u.infer(&Tensor::zeros(Shape::new(1, 2, 8, 8))).is_err());
        assert!(u.infer(&Tensor::zeros(Shape::new(1, 1, 6, 8))).is_err());
    }

    #[test]
    fn network_config_json() {
        let c: NetworkConfig = serde_json::from_str(r#"{"kind":"unet","depth":3,"start_filters":8}"#).unwrap();
        assert_eq!(c.pool_levels(), 3);
        let c: NetworkConfig = serde_json::from_str(r#"{"kind":"tiramisu","down_block_layers":[2,3]}"#).unwrap();
        assert_eq!(c.pool_levels(), 2);
    }
}
