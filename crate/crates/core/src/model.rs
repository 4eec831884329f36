//! Dense-block convolutional classifier.
//!
//! Layout, input to output:
//!
//! ```text
//! stem conv → BN → ReLU
//! for each block b:
//!     repeat layers_per_block[b] times: BN → ReLU → conv3×3 (growth_rate), concat
//!     if not last block: BN → ReLU → conv1×1 (compression) → avg-pool 2×2
//! BN → ReLU → global average pool → fully connected head
//! ```
//!
//! Every weighted layer (conv or fully connected) is one [`LayerGroup`].
//! A batch norm that feeds a conv belongs to that conv's group; the two
//! batch norms that follow a conv instead of preceding one (after the stem,
//! and before global pooling) belong to the conv before them. The head group
//! therefore holds only the fully connected weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub input_channels: usize,
    /// `(height, width)` in pixels.
    pub input_size: (usize, usize),
    pub initial_conv: StemConfig,
    pub num_blocks: usize,
    pub layers_per_block: Vec<usize>,
    pub growth_rate: usize,
    pub transition_compression: f64,
    pub num_classes: usize,
}

impl Default for DenseNetConfig {
    /// Desk-scale network: 16×16 grayscale input, two blocks of two layers.
    fn default() -> Self {
        DenseNetConfig {
            input_channels: 1,
            input_size: (16, 16),
            initial_conv: StemConfig { kernel: 3, stride: 1, out_channels: 8 },
            num_blocks: 2,
            layers_per_block: vec![2, 2],
            growth_rate: 4,
            transition_compression: 0.5,
            num_classes: 3,
        }
    }
}

impl DenseNetConfig {
    /// The ImageNet DenseNet-121 layout (6/12/24/16 layers, growth 32).
    ///
    /// Each dense layer here is a single 3×3 conv rather than the
    /// 1×1 bottleneck + 3×3 pair, so the weighted-layer count is lower than 121.
    pub fn densenet121_like(num_classes: usize) -> Self {
        DenseNetConfig {
            input_channels: 3,
            input_size: (224, 224),
            initial_conv: StemConfig { kernel: 7, stride: 2, out_channels: 64 },
            num_blocks: 4,
            layers_per_block: vec![6, 12, 24, 16],
            growth_rate: 32,
            transition_compression: 0.5,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers_per_block.len() != self.num_blocks {
            return bad(format!(
                "num_blocks is {} but layers_per_block has {} entries",
                self.num_blocks,
                self.layers_per_block.len()
            ));
        }
        if self.growth_rate == 0 {
            return bad("growth_rate must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return bad(format!("transition_compression {} outside (0, 1]", self.transition_compression));
        }
        let stem = &self.initial_conv;
        if self.input_channels == 0 || stem.out_channels == 0 || stem.kernel == 0 || stem.stride == 0 {
            return bad("input channels and stem kernel, stride, channels must be positive".into());
        }
        self.plan().map(|_| ())
    }

    /// Walks the layout, returning channel and spatial sizes at each stage.
    fn plan(&self) -> Result<Plan> {
        let (h, w) = self.input_size;
        let stem = &self.initial_conv;
        let pad = stem.kernel / 2;
        if h == 0 || w == 0 || stem.kernel > h + 2 * pad || stem.kernel > w + 2 * pad {
            return Err(Error::Config(format!("stem kernel {} does not fit a {h}x{w} input", stem.kernel)));
        }
        let mut size = ((h + 2 * pad - stem.kernel) / stem.stride + 1, (w + 2 * pad - stem.kernel) / stem.stride + 1);
        let mut channels = stem.out_channels;
        let mut block_inputs = Vec::with_capacity(self.num_blocks);
        for (b, &layers) in self.layers_per_block.iter().enumerate() {
            block_inputs.push(channels);
            channels += layers * self.growth_rate;
            if b + 1 < self.num_blocks {
                let compressed = (self.transition_compression * channels as f64).floor() as usize;
                if compressed == 0 {
                    return Err(Error::Config(format!("transition {b} compresses {channels} channels to zero")));
                }
                if size.0 < 2 || size.1 < 2 {
                    return Err(Error::Config(format!(
                        "spatial size {}x{} collapses below 1 at transition {b}",
                        size.0, size.1
                    )));
                }
                channels = compressed;
                size = (size.0 / 2, size.1 / 2);
            }
        }
        Ok(Plan { block_inputs, final_channels: channels })
    }

    /// Channels entering each dense block.
    pub fn block_input_channels(&self) -> Result<Vec<usize>> {
        Ok(self.plan()?.block_inputs)
    }
}

struct Plan {
    block_inputs: Vec<usize>,
    final_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: usize,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGroup {
    /// 0 is closest to the input.
    pub index: usize,
    pub name: String,
    /// Indices into [`Network::parameters`].
    pub parameters: Vec<usize>,
    pub is_head: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NormConv {
    norm: Norm,
    conv: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem_conv: usize,
    stem_norm: Norm,
    blocks: Vec<Vec<NormConv>>,
    transitions: Vec<NormConv>,
    final_norm: Norm,
    head_weight: usize,
    head_bias: usize,
}

/// Parameter values and batch-norm statistics, detached from a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub parameters: Vec<Vec<f64>>,
    pub batch_norm: Vec<BatchNormStats>,
}

/// Handles returned by [`Network::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    parameter_vars: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: DenseNetConfig,
    parameters: Vec<Parameter>,
    batch_norm: Vec<BatchNormStats>,
    groups: Vec<LayerGroup>,
    layout: Layout,
}

struct Builder {
    rng: ChaCha8Rng,
    parameters: Vec<Parameter>,
    batch_norm: Vec<BatchNormStats>,
    groups: Vec<LayerGroup>,
}

impl Builder {
    fn rng_seed_for_head(&mut self) -> u64 {
        self.rng.random()
    }

    fn group(&mut self, name: String) -> usize {
        let index = self.groups.len();
        self.groups.push(LayerGroup { index, name, parameters: Vec::new(), is_head: false });
        index
    }

    fn param(&mut self, group: usize, name: String, tensor: Tensor) -> usize {
        let id = self.parameters.len();
        self.parameters.push(Parameter { name, group, tensor: tensor.with_requires_grad(true) });
        self.groups[group].parameters.push(id);
        id
    }

    fn conv(&mut self, group: usize, name: String, out: usize, input: usize, k: usize) -> usize {
        let t = he_normal(&mut self.rng, &[out, input, k, k], input * k * k);
        self.param(group, name, t)
    }

    fn norm(&mut self, group: usize, prefix: &str, channels: usize) -> Norm {
        let gamma = self.param(group, format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0));
        let beta = self.param(group, format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.batch_norm.push(BatchNormStats::new(channels));
        Norm { gamma, beta, stats: self.batch_norm.len() - 1 }
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("valid shape")
}

fn head_tensors(seed: u64, features: usize, classes: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (he_normal(&mut rng, &[features, classes], features), Tensor::zeros(&[classes]))
}

/// Builds a freshly initialized network. Identical `(config, seed)` pairs
/// give bitwise-identical parameters.
pub fn build_densenet_lite(config: &DenseNetConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let plan = config.plan()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        parameters: Vec::new(),
        batch_norm: Vec::new(),
        groups: Vec::new(),
    };
    let stem = &config.initial_conv;
    let g = b.group("stem".into());
    let stem_conv = b.conv(g, "stem.conv".into(), stem.out_channels, config.input_channels, stem.kernel);
    let stem_norm = b.norm(g, "stem.bn", stem.out_channels);
    let mut last_conv_group = g;

    let mut blocks = Vec::with_capacity(config.num_blocks);
    let mut transitions = Vec::new();
    let mut channels = stem.out_channels;
    for (bi, &layers) in config.layers_per_block.iter().enumerate() {
        debug_assert_eq!(channels, plan.block_inputs[bi]);
        let mut block = Vec::with_capacity(layers);
        for li in 0..layers {
            let name = format!("block{bi}.layer{li}");
            let g = b.group(name.clone());
            let norm = b.norm(g, &format!("{name}.bn"), channels);
            let conv = b.conv(g, format!("{name}.conv"), config.growth_rate, channels, 3);
            block.push(NormConv { norm, conv });
            channels += config.growth_rate;
            last_conv_group = g;
        }
        blocks.push(block);
        if bi + 1 < config.num_blocks {
            let name = format!("transition{bi}");
            let out = (config.transition_compression * channels as f64).floor() as usize;
            let g = b.group(name.clone());
            let norm = b.norm(g, &format!("{name}.bn"), channels);
            let conv = b.conv(g, format!("{name}.conv"), out, channels, 1);
            transitions.push(NormConv { norm, conv });
            channels = out;
            last_conv_group = g;
        }
    }
    debug_assert_eq!(channels, plan.final_channels);
    let final_norm = b.norm(last_conv_group, "final.bn", channels);

    let g = b.group("head".into());
    b.groups[g].is_head = true;
    let (w, bias) = head_tensors(b.rng_seed_for_head(), channels, config.num_classes);
    let head_weight = b.param(g, "head.weight".into(), w);
    let head_bias = b.param(g, "head.bias".into(), bias);

    Ok(Network {
        config: config.clone(),
        parameters: b.parameters,
        batch_norm: b.batch_norm,
        groups: b.groups,
        layout: Layout { stem_conv, stem_norm, blocks, transitions, final_norm, head_weight, head_bias },
    })
}

impl Network {
    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.parameters
    }

    pub fn groups(&self) -> &[LayerGroup] {
        &self.groups
    }

    pub fn batch_norm_stats(&self) -> &[BatchNormStats] {
        &self.batch_norm
    }

    pub fn batch_norm_stats_mut(&mut self) -> &mut [BatchNormStats] {
        &mut self.batch_norm
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn head_group(&self) -> &LayerGroup {
        self.groups.last().expect("network has a head group")
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters.iter().map(|p| p.tensor.len()).sum()
    }

    /// Conv and fully connected layers; batch norm is not counted.
    pub fn count_weighted_layers(&self) -> usize {
        1 + self.layout.blocks.iter().map(Vec::len).sum::<usize>() + self.layout.transitions.len() + 1
    }

    /// Copy of this network with a freshly initialized head for
    /// `new_num_classes` outputs. Everything else is kept bit for bit.
    pub fn replace_head(&self, new_num_classes: usize, seed: u64) -> Result<Network> {
        if new_num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {new_num_classes}")));
        }
        let mut net = self.clone();
        net.config.num_classes = new_num_classes;
        let features = self.parameters[self.layout.head_weight].tensor.shape()[0];
        let (w, b) = head_tensors(seed, features, new_num_classes);
        for (id, t) in [(self.layout.head_weight, w), (self.layout.head_bias, b)] {
            net.parameters[id].tensor = t.with_requires_grad(true);
        }
        Ok(net)
    }

    /// Records a forward pass into `graph`. In training mode, batch norms
    /// whose parameters require gradients use batch statistics and update
    /// their running averages; frozen ones always use running statistics.
    pub fn forward(&mut self, graph: &mut Graph, batch: &Tensor, training: bool) -> Result<ForwardPass> {
        let mut stats = std::mem::take(&mut self.batch_norm);
        let out = self.run(graph, batch, training, &mut stats);
        self.batch_norm = stats;
        out
    }

    /// Eval-mode logits `[N × num_classes]` without touching any state.
    pub fn eval_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let mut stats = self.batch_norm.clone();
        let pass = self.run_frozen(&mut graph, batch, &mut stats)?;
        Ok(graph.into_value(pass))
    }

    fn run_frozen(&self, graph: &mut Graph, batch: &Tensor, stats: &mut [BatchNormStats]) -> Result<Var> {
        // no parameter requires a gradient here, so the tape stays empty
        let params: Vec<Var> = self.parameters.iter().map(|p| graph.constant(p.tensor.clone())).collect();
        self.body(graph, batch, false, stats, &params)
    }

    fn run(
        &self,
        graph: &mut Graph,
        batch: &Tensor,
        training: bool,
        stats: &mut [BatchNormStats],
    ) -> Result<ForwardPass> {
        let params: Vec<Var> = self
            .parameters
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.clear_grad();
                graph.leaf(t)
            })
            .collect();
        let logits = self.body(graph, batch, training, stats, &params)?;
        Ok(ForwardPass { logits, parameter_vars: params })
    }

    fn body(
        &self,
        g: &mut Graph,
        batch: &Tensor,
        training: bool,
        stats: &mut [BatchNormStats],
        p: &[Var],
    ) -> Result<Var> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_size.0, c.input_size.1];
        if batch.shape().len() != 4 || batch.shape()[1..] != expected {
            return Err(Error::dim(
                "forward",
                format!("batch {:?} does not match N×{}×{}×{}", batch.shape(), expected[0], expected[1], expected[2]),
            ));
        }
        let l = &self.layout;
        let mut norm = |g: &mut Graph, x: Var, n: Norm| -> Result<Var> {
            let batch_stats = training && self.parameters[n.gamma].tensor.requires_grad();
            let y = g.batch_norm(x, p[n.gamma], p[n.beta], &mut stats[n.stats], batch_stats)?;
            g.relu(y)
        };

        let x = g.constant(batch.clone());
        let stem = &c.initial_conv;
        let x = g.conv2d(x, p[l.stem_conv], stem.stride, stem.kernel / 2)?;
        let mut x = norm(g, x, l.stem_norm)?;
        for (bi, block) in l.blocks.iter().enumerate() {
            for layer in block {
                let h = norm(g, x, layer.norm)?;
                let h = g.conv2d(h, p[layer.conv], 1, 1)?;
                x = g.concat_channels(x, h)?;
            }
            if let Some(t) = l.transitions.get(bi) {
                let h = norm(g, x, t.norm)?;
                let h = g.conv2d(h, p[t.conv], 1, 0)?;
                x = g.avg_pool2d(h, 2, 2)?;
            }
        }
        let x = norm(g, x, l.final_norm)?;
        let x = g.global_avg_pool(x)?;
        let x = g.matmul(x, p[l.head_weight])?;
        g.add_bias(x, p[l.head_bias])
    }

    /// Adds gradients computed by `graph.backward` into the parameters that
    /// require them.
    pub fn accumulate_grads(&mut self, graph: &Graph, pass: &ForwardPass) {
        for (param, &v) in self.parameters.iter_mut().zip(&pass.parameter_vars) {
            if !param.tensor.requires_grad() {
                continue;
            }
            if let Some(grad) = graph.grad(v) {
                param.tensor.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.parameters.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            parameters: self.parameters.iter().map(|p| p.tensor.data().to_vec()).collect(),
            batch_norm: self.batch_norm.clone(),
        }
    }

    /// # Panics
    /// If the snapshot was taken from a network with a different layout.
    pub fn restore(&mut self, snapshot: &Snapshot) {
        assert_eq!(snapshot.parameters.len(), self.parameters.len(), "snapshot layout mismatch");
        for (p, data) in self.parameters.iter_mut().zip(&snapshot.parameters) {
            p.tensor.data_mut().copy_from_slice(data);
        }
        self.batch_norm.clone_from(&snapshot.batch_norm);
    }
}
