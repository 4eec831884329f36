use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor owned by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    /// Weight on the old running value at each update.
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug)]
enum Op {
    MatMul,
    AddBias,
    Conv2d { stride: usize, padding: usize },
    Relu,
    AvgPool2d { window: usize, stride: usize },
    GlobalAvgPool,
    ConcatChannels,
    BatchNorm { normalized: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    SoftmaxRows,
    Sum,
    WeightedCrossEntropy { labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    output: usize,
}

/// Tape of executed operations plus the tensors they produced.
///
/// A node is recorded only when at least one input requires a gradient, so
/// evaluation passes over frozen or constant inputs leave the tape empty.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an existing tensor. Its `requires_grad` flag decides whether
    /// backward produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.values.push(tensor);
        Var(self.values.len() - 1)
    }

    /// Registers a constant (never receives a gradient).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad()
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        self.values.swap_remove(v.0)
    }

    /// Number of recorded operations.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: &[Var], shape: &[usize], data: Vec<f64>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.values[v.0].requires_grad);
        let out = Tensor { shape: shape.to_vec(), data, grad: None, requires_grad };
        self.values.push(out);
        let output = self.values.len() - 1;
        if requires_grad {
            self.nodes.push(Node { op, inputs: inputs.iter().map(|v| v.0).collect(), output });
        }
        Var(output)
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.values.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("variable {} does not belong to this graph", v.0)))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(&self.values[a.0].data, &self.values[b.0].data, r, k, c);
        Ok(self.push(Op::MatMul, &[a, b], &[r, c], data))
    }

    /// Adds a length-`K` bias to every row of an `N×K` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::dim("add_bias", format!("bias {sb:?} does not fit {sx:?}")));
        }
        let b = &self.values[bias.0].data;
        let mut data = self.values[x.0].data.clone();
        for row in data.chunks_mut(sx[1]) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(Op::AddBias, &[x, bias], &sx, data))
    }

    /// 2-D cross-correlation of an `N×C×H×W` input with an `F×C×kh×kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let geom = self.conv_geometry(input, kernel, stride, padding)?;
        let data = kernels::conv2d(&self.values[input.0].data, &self.values[kernel.0].data, &geom);
        Ok(self.push(Op::Conv2d { stride, padding }, &[input, kernel], &[geom.n, geom.f, geom.oh, geom.ow], data))
    }

    fn conv_geometry(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<ConvGeometry> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::dim("conv2d", format!("need 4-D input and kernel, got {si:?} and {sk:?}")));
        }
        if si[1] != sk[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input {si:?} has {} channels, kernel {sk:?} expects {}", si[1], sk[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (h, w, kh, kw) = (si[2], si[3], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        Ok(ConvGeometry {
            n: si[0],
            c: si[1],
            h,
            w,
            f: sk[0],
            kh,
            kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let data = self.values[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        Ok(self.push(Op::Relu, &[x], &shape, data))
    }

    /// Average pooling over `window×window` patches, no padding.
    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("avg_pool2d", format!("need 4-D input, got {s:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::Contract("pool window and stride must be positive".into()));
        }
        if window > s[2] || window > s[3] {
            return Err(Error::dim("avg_pool2d", format!("window {window} larger than input {s:?}")));
        }
        let (oh, ow) = ((s[2] - window) / stride + 1, (s[3] - window) / stride + 1);
        let src = &self.values[x.0].data;
        let scale = 1.0 / (window * window) as f64;
        let mut data = vec![0.0; s[0] * s[1] * oh * ow];
        for plane in 0..s[0] * s[1] {
            let ib = plane * s[2] * s[3];
            let ob = plane * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..window {
                        let row = ib + (i * stride + di) * s[3] + j * stride;
                        acc += src[row..row + window].iter().sum::<f64>();
                    }
                    data[ob + i * ow + j] = acc * scale;
                }
            }
        }
        Ok(self.push(Op::AvgPool2d { window, stride }, &[x], &[s[0], s[1], oh, ow], data))
    }

    /// Mean over spatial positions: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("need 4-D input, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self.values[x.0].data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        Ok(self.push(Op::GlobalAvgPool, &[x], &[s[0], s[1]], data))
    }

    /// Concatenates two `N×C×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim("concat_channels", format!("cannot concatenate {sa:?} with {sb:?}")));
        }
        let hw = sa[2] * sa[3];
        let (ca, cb) = (sa[1] * hw, sb[1] * hw);
        let (da, db) = (&self.values[a.0].data, &self.values[b.0].data);
        let mut data = Vec::with_capacity(da.len() + db.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&da[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&db[n * cb..(n + 1) * cb]);
        }
        Ok(self.push(Op::ConcatChannels, &[a, b], &[sa[0], sa[1] + sb[1], sa[2], sa[3]], data))
    }

    /// Per-channel batch normalization of an `N×C×H×W` tensor.
    ///
    /// With `training` set, the batch mean and biased variance normalize the
    /// input and `stats` moves toward them (unbiased variance) with momentum
    /// [`BatchNormStats::MOMENTUM`]. Otherwise `stats` is used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        training: bool,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("batch_norm", format!("need 4-D input, got {s:?}")));
        }
        let c = s[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} {:?} does not match {c} channels", self.shape(v)),
                ));
            }
        }
        if stats.channels() != c {
            return Err(Error::dim(
                "batch_norm",
                format!("running stats have {} channels, input {c}", stats.channels()),
            ));
        }
        let (n, hw) = (s[0], s[2] * s[3]);
        let count = (n * hw) as f64;
        let src = &self.values[x.0].data;
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    sum += src[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mu = sum / count;
                let mut sq = 0.0;
                for b in 0..n {
                    sq +=
                        src[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / count;
            }
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                stats.mean[ch] =
                    BatchNormStats::MOMENTUM * stats.mean[ch] + (1.0 - BatchNormStats::MOMENTUM) * mean[ch];
                stats.var[ch] =
                    BatchNormStats::MOMENTUM * stats.var[ch] + (1.0 - BatchNormStats::MOMENTUM) * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BatchNormStats::EPS).sqrt()).collect();
        let (g, bt) = (&self.values[gamma.0].data, &self.values[beta.0].data);
        let mut normalized = vec![0.0; src.len()];
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    data[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        Ok(self.push(Op::BatchNorm { normalized, inv_std, batch_stats: training }, &[x, gamma, beta], &s, data))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("softmax_rows", format!("need 2-D input, got {s:?}")));
        }
        let data = softmax(&self.values[x.0].data, s[1]);
        Ok(self.push(Op::SoftmaxRows, &[x], &s, data))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total = self.values[x.0].data.iter().sum();
        Ok(self.push(Op::Sum, &[x], &[1], vec![total]))
    }

    /// `(1/N) Σᵢ w[yᵢ] · (−log softmax(logitsᵢ)[yᵢ])` for `N×K` logits.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("weighted_cross_entropy", format!("need 2-D logits, got {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::dim("weighted_cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if weights.len() != k {
            return Err(Error::dim("weighted_cross_entropy", format!("{} weights for {k} classes", weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let z = &self.values[logits.0].data;
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            loss += weights[y] * (log_sum_exp(row) - row[y]);
        }
        loss /= n as f64;
        let probs = softmax(z, k);
        let op = Op::WeightedCrossEntropy { labels: labels.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(op, &[logits], &[1], vec![loss]))
    }

    /// Propagates `∂loss/∂·` back through the tape and stores the result in
    /// every tensor that requires a gradient. Previous gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        if !self.values[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            let Some(gout) = grads[node.output].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.values[i].requires_grad).collect();
            let contributions = self.node_backward(node, &gout, &needs)?;
            for ((&input, contrib), need) in node.inputs.iter().zip(contributions).zip(needs) {
                let (Some(contrib), true) = (contrib, need) else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // keep output grad available for inspection
            grads[node.output] = Some(gout);
        }
        for (value, grad) in self.values.iter_mut().zip(grads) {
            value.grad = if value.requires_grad { grad } else { None };
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, gout: &[f64], needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let val = |i: usize| &self.values[node.inputs[i]];
        Ok(match &node.op {
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (r, k, c) = (a.shape[0], a.shape[1], b.shape[1]);
                let ga = needs[0].then(|| kernels::matmul_bt(gout, &b.data, r, c, k));
                let gb = needs[1].then(|| kernels::matmul_at(&a.data, gout, r, k, c));
                vec![ga, gb]
            }
            Op::AddBias => {
                let k = val(1).len();
                let gb = needs[1].then(|| {
                    let mut g = vec![0.0; k];
                    for row in gout.chunks(k) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    g
                });
                vec![needs[0].then(|| gout.to_vec()), gb]
            }
            Op::Conv2d { stride, padding } => {
                let geom = self.conv_geometry(Var(node.inputs[0]), Var(node.inputs[1]), *stride, *padding)?;
                let (gi, gk) = kernels::conv2d_backward(&val(0).data, &val(1).data, gout, &geom, needs[0], needs[1]);
                vec![gi, gk]
            }
            Op::Relu => {
                let x = &val(0).data;
                vec![Some(x.iter().zip(gout).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect())]
            }
            Op::AvgPool2d { window, stride } => {
                let s = &val(0).shape;
                let out = &self.values[node.output].shape;
                let (oh, ow) = (out[2], out[3]);
                let scale = 1.0 / (window * window) as f64;
                let mut g = vec![0.0; val(0).len()];
                for plane in 0..s[0] * s[1] {
                    let ib = plane * s[2] * s[3];
                    let ob = plane * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = gout[ob + i * ow + j] * scale;
                            for di in 0..*window {
                                let row = ib + (i * stride + di) * s[3] + j * stride;
                                g[row..row + window].iter_mut().for_each(|v| *v += go);
                            }
                        }
                    }
                }
                vec![Some(g)]
            }
            Op::GlobalAvgPool => {
                let s = &val(0).shape;
                let hw = s[2] * s[3];
                let mut g = vec![0.0; val(0).len()];
                for (plane, &go) in gout.iter().enumerate() {
                    g[plane * hw..(plane + 1) * hw].fill(go / hw as f64);
                }
                vec![Some(g)]
            }
            Op::ConcatChannels => {
                let (sa, sb) = (&val(0).shape, &val(1).shape);
                let hw = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * hw, sb[1] * hw);
                let mut ga = Vec::with_capacity(val(0).len());
                let mut gb = Vec::with_capacity(val(1).len());
                for n in 0..sa[0] {
                    let base = n * (ca + cb);
                    ga.extend_from_slice(&gout[base..base + ca]);
                    gb.extend_from_slice(&gout[base + ca..base + ca + cb]);
                }
                vec![Some(ga), Some(gb)]
            }
            Op::BatchNorm { normalized, inv_std, batch_stats } => {
                let s = &val(0).shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gamma = &val(1).data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gout[i] * normalized[i];
                            dbeta[ch] += gout[i];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; gout.len()];
                    let m = (n * hw) as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                gx[i] = if *batch_stats {
                                    // dx̂ = dy·γ ; dx = inv_std/m · (m·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂))
                                    gamma[ch] * inv_std[ch] / m * (m * gout[i] - dbeta[ch] - normalized[i] * dgamma[ch])
                                } else {
                                    gamma[ch] * inv_std[ch] * gout[i]
                                };
                            }
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            }
            Op::SoftmaxRows => {
                let y = &self.values[node.output].data;
                let k = self.values[node.output].shape[1];
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(k).zip(y.chunks(k)).zip(gout.chunks(k)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                vec![Some(g)]
            }
            Op::Sum => vec![Some(vec![gout[0]; val(0).len()])],
            Op::WeightedCrossEntropy { labels, weights, probs } => {
                let k = weights.len();
                let n = labels.len();
                let mut g = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let scale = gout[0] * weights[y] / n as f64;
                    let row = &mut g[i * k..(i + 1) * k];
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(g)]
            }
        })
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax over a flat buffer with rows of length `k`.
pub fn softmax(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}
