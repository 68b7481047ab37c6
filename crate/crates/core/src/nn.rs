//! Neural layers over the autodiff graph: convolution, depthwise-separable
//! convolution, batch normalization, residual blocks, plus the parameter
//! registry with deterministic initialization and parameter/FLOP accounting.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Node, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// What a registered tensor is, which fixes how `init_params` fills it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution weight; `fan_in` = C_in/groups * K * K.
    ConvWeight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order (dense, 0-based).
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry<S: Scalar> {
    name: String,
    value: Tensor<S>,
    kind: ParamKind,
    trainable: bool,
}

/// Ordered registry of named parameter tensors. Iteration order is the
/// registration order, which makes initialization, optimizer state, and
/// checkpoints deterministic for a fixed construction sequence.
#[derive(Clone)]
pub struct ParamRegistry<S: Scalar> {
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamRegistry<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamRegistry<S> {
    pub fn new() -> Self {
        ParamRegistry {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>, kind: ParamKind) -> Result<ParamId> {
        self.insert(name, value, kind, true)
    }

    /// Registers a non-trainable tensor (batch-norm running statistics).
    /// Buffers are saved in checkpoints but excluded from `count_params` and
    /// from optimizer updates.
    pub fn register_buffer(
        &mut self,
        name: &str,
        value: Tensor<S>,
        kind: ParamKind,
    ) -> Result<ParamId> {
        self.insert(name, value, kind, false)
    }

    fn insert(
        &mut self,
        name: &str,
        value: Tensor<S>,
        kind: ParamKind,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            kind,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Replaces a tensor's value; the shape must match the registered one.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {:?}: stored shape {:?} vs provided {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// The graph leaf for this parameter, memoized per graph so fan-out
    /// gradients accumulate on one node.
    pub fn node(&self, g: &mut Graph<S>, id: ParamId) -> Node {
        g.leaf_keyed(id.0, &self.entries[id.0].value)
    }

    /// The leaf a graph created for this parameter, if any.
    pub fn graph_node(&self, g: &Graph<S>, id: ParamId) -> Option<Node> {
        g.keyed_node(id.0)
    }

    /// Sum of element counts of all trainable parameters.
    pub fn count_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn count_params_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Deterministic initialization: conv weights are Kaiming-uniform with
/// fan-in mode (bound sqrt(6/fan_in)), biases zero, gamma one, beta zero,
/// running stats (0, 1). Fully determined by `seed` and registration order.
pub fn init_params<S: Scalar>(reg: &mut ParamRegistry<S>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in reg.entries.iter_mut() {
        match e.kind {
            ParamKind::ConvWeight { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in e.value.as_mut_slice() {
                    *v = S::from_f64(rng.gen_range(-bound..bound));
                }
            }
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean => {
                e.value.fill(S::zero());
            }
            ParamKind::BnGamma | ParamKind::RunningVar => {
                e.value.fill(S::one());
            }
        }
    }
}

/// Convolution layer: weight `C_out x C_in/groups x K x K`, optional bias.
pub struct Conv2dLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::shape(format!(
                "conv {name}: channels ({in_channels} in, {out_channels} out) not divisible by groups {groups}"
            )));
        }
        let fan_in = (in_channels / groups) * kernel * kernel;
        let weight = reg.register(
            &format!("{name}.weight"),
            Tensor::zeros(&[out_channels, in_channels / groups, kernel, kernel]),
            ParamKind::ConvWeight { fan_in },
        )?;
        let bias = if with_bias {
            Some(reg.register(
                &format!("{name}.bias"),
                Tensor::zeros(&[out_channels]),
                ParamKind::Bias,
            )?)
        } else {
            None
        };
        Ok(Conv2dLayer {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        reg: &ParamRegistry<S>,
        x: Node,
    ) -> Result<Node> {
        let w = reg.node(g, self.weight);
        let b = self.bias.map(|id| reg.node(g, id));
        g.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn param_count(&self) -> usize {
        let w = self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel;
        w + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Multiply-accumulate count on an `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_size(h, w);
        (oh * ow * self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel)
            as u64
    }
}

/// Depthwise spatial convolution (groups = C_in) followed by a pointwise
/// 1x1 convolution.
pub struct DwSepConv {
    pub depthwise: Conv2dLayer,
    pub pointwise: Conv2dLayer,
}

impl DwSepConv {
    pub fn new<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let depthwise = Conv2dLayer::new(
            reg,
            &format!("{name}.dw"),
            in_channels,
            in_channels,
            kernel,
            stride,
            padding,
            in_channels,
            true,
        )?;
        let pointwise = Conv2dLayer::new(
            reg,
            &format!("{name}.pw"),
            in_channels,
            out_channels,
            1,
            1,
            0,
            1,
            true,
        )?;
        Ok(DwSepConv { depthwise, pointwise })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        reg: &ParamRegistry<S>,
        x: Node,
    ) -> Result<Node> {
        let mid = self.depthwise.forward(g, reg, x)?;
        self.pointwise.forward(g, reg, mid)
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.depthwise.out_size(h, w);
        self.depthwise.flops(h, w) + self.pointwise.flops(oh, ow)
    }
}

/// Batch normalization with per-channel affine and running statistics.
/// Train mode normalizes by the biased batch variance and updates the
/// running stats with momentum; eval mode is a fixed affine map.
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(reg: &mut ParamRegistry<S>, name: &str, channels: usize) -> Result<Self> {
        let gamma = reg.register(
            &format!("{name}.gamma"),
            Tensor::full(&[channels], S::one()),
            ParamKind::BnGamma,
        )?;
        let beta = reg.register(
            &format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            ParamKind::BnBeta,
        )?;
        let running_mean = reg.register_buffer(
            &format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            ParamKind::RunningMean,
        )?;
        let running_var = reg.register_buffer(
            &format!("{name}.running_var"),
            Tensor::full(&[channels], S::one()),
            ParamKind::RunningVar,
        )?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        reg: &mut ParamRegistry<S>,
        x: Node,
        train: bool,
    ) -> Result<Node> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels, c
            )));
        }
        let (mean, inv_std) = if train {
            let plane = h * w;
            let m = (n * plane) as f64;
            let xs = g.value(x).as_slice();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let mut sum = S::zero();
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        sum += xs[base + i];
                    }
                }
                let mu = sum / S::from_f64(m);
                let mut sq = S::zero();
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        let d = xs[base + i] - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / S::from_f64(m);
            }
            // momentum update of running stats
            let mom = S::from_f64(self.momentum);
            let keep = S::one() - mom;
            {
                let rm = reg.value_mut(self.running_mean).as_mut_slice();
                for ch in 0..c {
                    rm[ch] = keep * rm[ch] + mom * mean[ch];
                }
                let rv = reg.value_mut(self.running_var).as_mut_slice();
                for ch in 0..c {
                    rv[ch] = keep * rv[ch] + mom * var[ch];
                }
            }
            let eps = S::from_f64(self.eps);
            let inv_std = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let mean = reg.value(self.running_mean).as_slice().to_vec();
            let eps = S::from_f64(self.eps);
            let inv_std = reg
                .value(self.running_var)
                .as_slice()
                .iter()
                .map(|&v| S::one() / (v + eps).sqrt())
                .collect();
            (mean, inv_std)
        };
        let gamma = reg.node(g, self.gamma);
        let beta = reg.node(g, self.beta);
        g.batch_norm_with_stats(x, gamma, beta, mean, inv_std, train)
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    pub fn running_mean_id(&self) -> ParamId {
        self.running_mean
    }

    pub fn running_var_id(&self) -> ParamId {
        self.running_var
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    /// One op per element.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        (self.channels * h * w) as u64
    }
}

/// Two depthwise-separable 3x3 convolutions with batch norm, a skip
/// connection (1x1 projection when the channel count changes), and a final
/// relu: `relu(bn2(conv2(relu(bn1(conv1(x))))) + skip(x))`.
pub struct ResidualBlock {
    pub conv1: DwSepConv,
    pub bn1: BatchNorm2d,
    pub conv2: DwSepConv,
    pub bn2: BatchNorm2d,
    pub projection: Option<Conv2dLayer>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ResidualBlock {
    pub fn new<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let conv1 = DwSepConv::new(reg, &format!("{name}.conv1"), in_channels, out_channels, 3, 1, 1)?;
        let bn1 = BatchNorm2d::new(reg, &format!("{name}.bn1"), out_channels)?;
        let conv2 = DwSepConv::new(reg, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1)?;
        let bn2 = BatchNorm2d::new(reg, &format!("{name}.bn2"), out_channels)?;
        let projection = if in_channels != out_channels {
            Some(Conv2dLayer::new(
                reg,
                &format!("{name}.proj"),
                in_channels,
                out_channels,
                1,
                1,
                0,
                1,
                true,
            )?)
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        reg: &mut ParamRegistry<S>,
        x: Node,
        train: bool,
    ) -> Result<Node> {
        let y = self.conv1.forward(g, reg, x)?;
        let y = self.bn1.forward(g, reg, y, train)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, reg, y)?;
        let y = self.bn2.forward(g, reg, y, train)?;
        let skip = match &self.projection {
            Some(proj) => proj.forward(g, reg, x)?,
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self.projection.as_ref().map_or(0, |p| p.param_count())
    }

    /// Convolution MACs plus one op per element for each batch norm and relu.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let elems = (self.out_channels * h * w) as u64;
        self.conv1.flops(h, w)
            + self.bn1.flops(h, w)
            + elems // relu after bn1
            + self.conv2.flops(h, w)
            + self.bn2.flops(h, w)
            + self.projection.as_ref().map_or(0, |p| p.flops(h, w))
            + elems // relu after the skip add
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fresh() -> ParamRegistry<f64> {
        ParamRegistry::new()
    }

    #[test]
    fn init_is_deterministic_and_kind_aware() {
        let build = || -> (ParamRegistry<f64>, Conv2dLayer, BatchNorm2d) {
            let mut reg = fresh();
            let conv = Conv2dLayer::new(&mut reg, "c", 3, 4, 3, 1, 1, 1, true).unwrap();
            let bn = BatchNorm2d::new(&mut reg, "bn", 4).unwrap();
            init_params(&mut reg, 42);
            (reg, conv, bn)
        };
        let (r1, c1, b1) = build();
        let (r2, _, _) = build();
        assert_eq!(
            r1.value(c1.weight_id()).as_slice(),
            r2.value(c1.weight_id()).as_slice()
        );
        assert!(r1.value(c1.bias_id().unwrap()).as_slice().iter().all(|&v| v == 0.0));
        assert!(r1.value(b1.gamma_id()).as_slice().iter().all(|&v| v == 1.0));
        assert!(r1.value(b1.beta_id()).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kaiming_uniform_std_matches_bound() {
        let mut reg = fresh();
        let conv = Conv2dLayer::new(&mut reg, "c", 16, 16, 3, 1, 1, 1, false).unwrap();
        init_params(&mut reg, 7);
        let w = reg.value(conv.weight_id()).as_slice();
        let n = w.len() as f64;
        let mean: f64 = w.iter().sum::<f64>() / n;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let fan_in: f64 = 16.0 * 9.0;
        let expected = (6.0 / fan_in).sqrt() / 3.0_f64.sqrt();
        assert!(
            (std - expected).abs() / expected < 0.2,
            "std {std} vs expected {expected}"
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = fresh();
        reg.register("p", Tensor::zeros(&[1]), ParamKind::Bias).unwrap();
        assert!(reg.register("p", Tensor::zeros(&[1]), ParamKind::Bias).is_err());
    }

    #[test]
    fn dwsep_identity_composition() {
        let mut reg = fresh();
        let layer = DwSepConv::new(&mut reg, "dw", 3, 3, 3, 1, 1).unwrap();
        // depthwise Dirac kernels
        let mut dw = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
        for c in 0..3 {
            dw.set4(c, 0, 1, 1, 1.0);
        }
        reg.set_value(layer.depthwise.weight_id(), dw).unwrap();
        // pointwise identity matrix
        let mut pw = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            pw.set4(c, c, 0, 0, 1.0);
        }
        reg.set_value(layer.pointwise.weight_id(), pw).unwrap();

        let mut g = Graph::new();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = g.leaf(Tensor::random(&[2, 3, 4, 4], -1.0, 1.0, &mut rng));
        let y = layer.forward(&mut g, &reg, x).unwrap();
        assert_eq!(g.value(y).as_slice(), g.value(x).as_slice());
    }

    #[test]
    fn dwsep_param_count_16_16_k3() {
        let mut reg = fresh();
        let layer = DwSepConv::new(&mut reg, "dw", 16, 16, 3, 1, 1).unwrap();
        // 16*9 + 16 depthwise, 16*16 + 16 pointwise
        assert_eq!(layer.param_count(), 16 * 9 + 16 + 16 * 16 + 16);
        assert_eq!(layer.param_count(), reg.count_params());
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta_in_train_mode() {
        let mut reg = fresh();
        let bn = BatchNorm2d::new(&mut reg, "bn", 2).unwrap();
        init_params(&mut reg, 1);
        let beta = Tensor::from_f64s(&[2], &[0.3, -0.7]).unwrap();
        reg.set_value(bn.beta_id(), beta).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 3, 3], 5.0));
        let y = bn.forward(&mut g, &mut reg, x, true).unwrap();
        for i in 0..9 {
            assert_relative_eq!(g.value(y).as_slice()[i], 0.3, epsilon = 1e-12);
            assert_relative_eq!(g.value(y).as_slice()[9 + i], -0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn batchnorm_is_near_identity_on_normalized_input() {
        let mut reg = fresh();
        let bn = BatchNorm2d::new(&mut reg, "bn", 1).unwrap();
        init_params(&mut reg, 1);
        // zero-mean unit-variance channel
        let vals = [-1.0, 1.0, -1.0, 1.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_f64s(&[1, 1, 2, 2], &vals).unwrap());
        let y = bn.forward(&mut g, &mut reg, x, true).unwrap();
        for (a, b) in g.value(y).as_slice().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_running_mean_single_step() {
        let mut reg = fresh();
        let bn = BatchNorm2d::new(&mut reg, "bn", 1).unwrap();
        init_params(&mut reg, 1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_f64s(&[1, 1, 2, 2], &[2.0, 2.0, 6.0, 6.0]).unwrap());
        bn.forward(&mut g, &mut reg, x, true).unwrap();
        // batch mean is 4.0; running mean moves from 0 by momentum 0.1
        assert_relative_eq!(
            reg.value(bn.running_mean_id()).as_slice()[0],
            0.4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn batchnorm_eval_is_affine_composition() {
        let mut reg = fresh();
        let bn = BatchNorm2d::new(&mut reg, "bn", 2).unwrap();
        init_params(&mut reg, 3);
        reg.set_value(bn.gamma_id(), Tensor::from_f64s(&[2], &[1.5, 0.5]).unwrap())
            .unwrap();
        reg.set_value(bn.beta_id(), Tensor::from_f64s(&[2], &[0.1, -0.2]).unwrap())
            .unwrap();
        reg.set_value(
            bn.running_mean_id(),
            Tensor::from_f64s(&[2], &[0.3, -0.6]).unwrap(),
        )
        .unwrap();
        reg.set_value(
            bn.running_var_id(),
            Tensor::from_f64s(&[2], &[2.0, 0.5]).unwrap(),
        )
        .unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let xin = Tensor::<f64>::random(&[1, 2, 2, 2], -2.0, 2.0, &mut rng);

        let mut g = Graph::new();
        let x = g.leaf(xin.clone());
        let y1 = bn.forward(&mut g, &mut reg, x, false).unwrap();
        let y2 = bn.forward(&mut g, &mut reg, y1, false).unwrap();

        // composing the affine maps by hand must reproduce the double pass
        let eps = bn.eps;
        for ch in 0..2 {
            let gam = reg.value(bn.gamma_id()).as_slice()[ch];
            let bet = reg.value(bn.beta_id()).as_slice()[ch];
            let mu = reg.value(bn.running_mean_id()).as_slice()[ch];
            let s = 1.0 / (reg.value(bn.running_var_id()).as_slice()[ch] + eps).sqrt();
            let a = gam * s;
            let b = bet - gam * s * mu;
            for i in 0..4 {
                let v = xin.as_slice()[ch * 4 + i];
                let expect = a * (a * v + b) + b;
                assert_relative_eq!(g.value(y2).as_slice()[ch * 4 + i], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn residual_block_zeroed_main_branch_is_relu_skip() {
        let mut reg = fresh();
        let block = ResidualBlock::new(&mut reg, "b", 2, 2).unwrap();
        // leave conv weights zero, bn identity-configured (gamma 1, beta 0)
        init_params(&mut reg, 9);
        for layer in [&block.conv1, &block.conv2] {
            reg.set_value(layer.depthwise.weight_id(), Tensor::zeros(&[2, 1, 3, 3]))
                .unwrap();
            reg.set_value(layer.pointwise.weight_id(), Tensor::zeros(&[2, 2, 1, 1]))
                .unwrap();
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let xin = Tensor::<f64>::random(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(xin.clone());
        let y = block.forward(&mut g, &mut reg, x, true).unwrap();
        for (a, &b) in g.value(y).as_slice().iter().zip(xin.as_slice()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn residual_block_preserves_shape() {
        let mut reg = fresh();
        let block = ResidualBlock::new(&mut reg, "b", 8, 8).unwrap();
        init_params(&mut reg, 4);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(&[2, 8, 32, 32]));
        let y = block.forward(&mut g, &mut reg, x, true).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8, 32, 32]);
    }

    #[test]
    fn residual_block_rejects_channel_mismatch() {
        let mut reg = fresh();
        let block = ResidualBlock::new(&mut reg, "b", 4, 4).unwrap();
        init_params(&mut reg, 4);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(&[1, 3, 8, 8]));
        assert!(block.forward(&mut g, &mut reg, x, true).is_err());
    }

    #[test]
    fn count_params_examples() {
        let mut reg = fresh();
        assert_eq!(reg.count_params(), 0);
        let _ = Conv2dLayer::new(&mut reg, "c", 1, 4, 3, 1, 1, 1, true).unwrap();
        assert_eq!(reg.count_params(), 4 * 9 + 4);
        // buffers are not counted
        let before = reg.count_params();
        let _ = BatchNorm2d::new(&mut reg, "bn", 4).unwrap();
        assert_eq!(reg.count_params(), before + 8);
    }

    #[test]
    fn count_params_invariant_under_forward() {
        let mut reg = fresh();
        let block = ResidualBlock::new(&mut reg, "b", 3, 3).unwrap();
        init_params(&mut reg, 5);
        let before = reg.count_params();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(&[1, 3, 6, 6]));
        block.forward(&mut g, &mut reg, x, true).unwrap();
        assert_eq!(reg.count_params(), before);
    }

    #[test]
    fn flops_examples() {
        let mut reg = fresh();
        let conv = Conv2dLayer::new(&mut reg, "c", 1, 1, 3, 1, 1, 1, true).unwrap();
        assert_eq!(conv.flops(4, 4), 144);
        let dws = DwSepConv::new(&mut reg, "d", 16, 16, 3, 1, 1).unwrap();
        assert_eq!(dws.flops(32, 32), 1024 * (16 * 9) + 1024 * (16 * 16));
    }
}
