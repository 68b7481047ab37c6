//! The entropy-based patch encoder: three encoders of decreasing capacity,
//! entropy-ranked patch routing, fold-back to image shape, host integration
//! (concat + batch norm + final 1x1 convolution), and the train-time
//! reconstruction head.

use crate::entropy::{self, RoutingPlan};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2dLayer, ParamRegistry, ResidualBlock};
use crate::tensor::{unfold, Graph, Node, Scalar, Tensor};

/// Architecture of one patch encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub kernel: usize,
}

impl EncoderConfig {
    pub fn with_channels(channels: usize) -> Self {
        EncoderConfig {
            channels,
            num_blocks: 6,
            kernel: 3,
        }
    }

    /// The canonical trio: 16 / 8 / 4 channels, six blocks each.
    pub fn canonical() -> (Self, Self, Self) {
        (
            Self::with_channels(16),
            Self::with_channels(8),
            Self::with_channels(4),
        )
    }
}

/// One fully-convolutional patch encoder: a 1x1 lift from the single
/// grayscale channel, six residual blocks at the configured width, and a
/// 1x1 projection back to one channel. Maps `M x 1 x n x n` to itself for
/// any sample count M.
pub struct Encoder {
    pub lift: Conv2dLayer,
    pub blocks: Vec<ResidualBlock>,
    pub project: Conv2dLayer,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        name: &str,
        config: EncoderConfig,
    ) -> Result<Self> {
        let lift = Conv2dLayer::new(reg, &format!("{name}.lift"), 1, config.channels, 1, 1, 0, 1, true)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            blocks.push(ResidualBlock::new(
                reg,
                &format!("{name}.block{i}"),
                config.channels,
                config.channels,
            )?);
        }
        let project =
            Conv2dLayer::new(reg, &format!("{name}.project"), config.channels, 1, 1, 1, 0, 1, true)?;
        Ok(Encoder {
            lift,
            blocks,
            project,
            config,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        reg: &mut ParamRegistry<S>,
        x: Node,
        train: bool,
    ) -> Result<Node> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != 1 {
            return Err(Error::shape(format!(
                "encoder expects single-channel patches, got {} channels",
                c
            )));
        }
        let mut y = self.lift.forward(g, reg, x)?;
        for block in &self.blocks {
            y = block.forward(g, reg, y, train)?;
        }
        self.project.forward(g, reg, y)
    }

    pub fn param_count(&self) -> usize {
        self.lift.param_count()
            + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.project.param_count()
    }

    /// MACs plus BN/relu element ops for one `n x n` patch.
    pub fn flops_per_patch(&self, n: usize) -> u64 {
        self.lift.flops(n, n)
            + self.blocks.iter().map(|b| b.flops(n, n)).sum::<u64>()
            + self.project.flops(n, n)
    }
}

/// The full plug-in module.
pub struct EpeModule {
    pub large: Encoder,
    pub medium: Encoder,
    pub small: Encoder,
    pub post_bn: BatchNorm2d,
    pub final_conv: Conv2dLayer,
    pub recon1: Conv2dLayer,
    pub recon2: Conv2dLayer,
    pub recon3: Conv2dLayer,
    pub patch_size: usize,
    pub host_channels: usize,
    pub num_classes: usize,
}

impl EpeModule {
    pub fn new<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        name: &str,
        patch_size: usize,
        host_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let (lc, mc, sc) = EncoderConfig::canonical();
        Self::with_configs(reg, name, patch_size, host_channels, num_classes, lc, mc, sc)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_configs<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        name: &str,
        patch_size: usize,
        host_channels: usize,
        num_classes: usize,
        large: EncoderConfig,
        medium: EncoderConfig,
        small: EncoderConfig,
    ) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::invalid("patch size must be >= 1"));
        }
        let large = Encoder::new(reg, &format!("{name}.large"), large)?;
        let medium = Encoder::new(reg, &format!("{name}.medium"), medium)?;
        let small = Encoder::new(reg, &format!("{name}.small"), small)?;
        let post_bn = BatchNorm2d::new(reg, &format!("{name}.post_bn"), host_channels + 1)?;
        let final_conv = Conv2dLayer::new(
            reg,
            &format!("{name}.final_conv"),
            host_channels + 1,
            num_classes,
            1,
            1,
            0,
            1,
            true,
        )?;
        let recon1 = Conv2dLayer::new(reg, &format!("{name}.recon1"), 1, 16, 3, 1, 1, 1, true)?;
        let recon2 = Conv2dLayer::new(reg, &format!("{name}.recon2"), 16, 16, 3, 1, 1, 1, true)?;
        let recon3 = Conv2dLayer::new(reg, &format!("{name}.recon3"), 16, 3, 3, 1, 1, 1, true)?;
        Ok(EpeModule {
            large,
            medium,
            small,
            post_bn,
            final_conv,
            recon1,
            recon2,
            recon3,
            patch_size,
            host_channels,
            num_classes,
        })
    }

    pub fn encoders(&self) -> [&Encoder; 3] {
        [&self.large, &self.medium, &self.small]
    }

    pub fn param_count(&self) -> usize {
        self.large.param_count()
            + self.medium.param_count()
            + self.small.param_count()
            + self.post_bn.param_count()
            + self.final_conv.param_count()
            + self.recon1.param_count()
            + self.recon2.param_count()
            + self.recon3.param_count()
    }
}

/// Stacks each routing group's patches into an independent single-channel
/// batch (`g_k x 1 x n x n`), in the plan's stored ascending-index order.
pub fn gather_groups<S: Scalar>(
    patches: &Tensor<S>,
    plan: &RoutingPlan,
) -> Result<[Tensor<S>; 3]> {
    let (batch, p, n, n2) = patches.dims4()?;
    if batch != 1 || n != n2 {
        return Err(Error::shape(format!(
            "gather_groups expects 1 x P x n x n patches, got {:?}",
            patches.shape()
        )));
    }
    if plan.num_patches() != p {
        return Err(Error::invalid(format!(
            "plan covers {} patches, tensor has {}",
            plan.num_patches(),
            p
        )));
    }
    let gather = |idx: &[usize]| -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(idx.len() * n * n);
        for &pid in idx {
            if pid >= p {
                return Err(Error::invalid(format!(
                    "patch index {pid} out of range ({p} patches)"
                )));
            }
            data.extend_from_slice(&patches.as_slice()[pid * n * n..(pid + 1) * n * n]);
        }
        Tensor::new(&[idx.len(), 1, n, n], data)
    };
    Ok([
        gather(&plan.group_high)?,
        gather(&plan.group_mid)?,
        gather(&plan.group_low)?,
    ])
}

/// Runs one group through its encoder; empty groups pass through untouched.
pub fn encode_group<S: Scalar>(
    g: &mut Graph<S>,
    reg: &mut ParamRegistry<S>,
    encoder: &Encoder,
    group: Tensor<S>,
    patch_size: usize,
    train: bool,
) -> Result<Node> {
    let (_, _, h, w) = group.dims4()?;
    if h != patch_size || w != patch_size {
        return Err(Error::shape(format!(
            "group patches are {h}x{w}, expected {patch_size}x{patch_size}"
        )));
    }
    let x = g.leaf(group);
    encoder.forward(g, reg, x, train)
}

/// Encodes pre-routed grayscale patches and folds the outputs back to
/// `1 x 1 x H x W`. The plan is taken as given, so the conv path's patch
/// locality can be exercised independently of routing.
pub fn epe_apply<S: Scalar>(
    g: &mut Graph<S>,
    reg: &mut ParamRegistry<S>,
    module: &EpeModule,
    gray: &Tensor<S>,
    plan: &RoutingPlan,
    train: bool,
) -> Result<Node> {
    let (_, _, h, w) = gray.dims4()?;
    let n = module.patch_size;
    let patches = unfold(gray, n)?;
    let groups = gather_groups(&patches, plan)?;
    let mut parts = Vec::new();
    for (group, (encoder, idx)) in groups.into_iter().zip([
        (&module.large, &plan.group_high),
        (&module.medium, &plan.group_mid),
        (&module.small, &plan.group_low),
    ]) {
        if idx.is_empty() {
            continue;
        }
        let out = encode_group(g, reg, encoder, group, n, train)?;
        parts.push((out, idx.clone()));
    }
    g.fold_patches(parts, h, w, n)
}

/// Full module forward: grayscale, entropy map, 20/40/40 partition, per-group
/// encoding, and fold back to a `1 x 1 x H x W` feature.
pub fn epe_forward<S: Scalar>(
    g: &mut Graph<S>,
    reg: &mut ParamRegistry<S>,
    module: &EpeModule,
    image: &Tensor<S>,
    train: bool,
) -> Result<(Node, RoutingPlan)> {
    let gray = entropy::to_grayscale(image)?;
    let map = entropy::entropy_map_from_gray(&gray, module.patch_size)?;
    let plan = entropy::partition_patches(&map)?;
    let feature = epe_apply(g, reg, module, &gray, &plan, train)?;
    Ok((feature, plan))
}

/// Concatenates host features with the folded patch feature, applies batch
/// normalization, and produces per-pixel class logits via the final 1x1
/// convolution.
pub fn integrate<S: Scalar>(
    g: &mut Graph<S>,
    reg: &mut ParamRegistry<S>,
    module: &EpeModule,
    host_features: Node,
    epe_feature: Node,
    train: bool,
) -> Result<Node> {
    let cat = g.concat_channels(host_features, epe_feature)?;
    let normed = module.post_bn.forward(g, reg, cat, train)?;
    module.final_conv.forward(g, reg, normed)
}

/// Train-time reconstruction head: three 3x3 convolutions
/// (1 -> 16, relu; 16 -> 16, relu; 16 -> 3) over the folded feature.
pub fn reconstruct<S: Scalar>(
    g: &mut Graph<S>,
    reg: &mut ParamRegistry<S>,
    module: &EpeModule,
    epe_feature: Node,
) -> Result<Node> {
    let y = module.recon1.forward(g, reg, epe_feature)?;
    let y = g.relu(y);
    let y = module.recon2.forward(g, reg, y)?;
    let y = g.relu(y);
    module.recon3.forward(g, reg, y)
}

/// Parameter and FLOP accounting for one image.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub params_total: usize,
    pub params_large: usize,
    pub params_medium: usize,
    pub params_small: usize,
    /// Encoder MACs+elementwise with the 20/40/40 routing.
    pub flops_routed: u64,
    /// Encoder cost if every patch went through the large encoder.
    pub flops_uniform_large: u64,
}

impl EpeModule {
    /// Cost report for an `H x W` image using the canonical floor-rule group
    /// sizes.
    pub fn cost_report(&self, h: usize, w: usize) -> Result<CostReport> {
        let n = self.patch_size;
        if h % n != 0 || w % n != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} not divisible by patch size {n}"
            )));
        }
        let p = (h / n) * (w / n);
        self.cost_report_with_sizes(p, entropy::group_sizes(p))
    }

    /// Cost report for explicit group sizes (must sum to `p`).
    pub fn cost_report_with_sizes(
        &self,
        p: usize,
        sizes: (usize, usize, usize),
    ) -> Result<CostReport> {
        let (gh, gm, gl) = sizes;
        if gh + gm + gl != p {
            return Err(Error::invalid(format!(
                "group sizes {gh}+{gm}+{gl} do not cover {p} patches"
            )));
        }
        let n = self.patch_size;
        let fl = self.large.flops_per_patch(n);
        let fm = self.medium.flops_per_patch(n);
        let fs = self.small.flops_per_patch(n);
        Ok(CostReport {
            params_total: self.param_count(),
            params_large: self.large.param_count(),
            params_medium: self.medium.param_count(),
            params_small: self.small.param_count(),
            flops_routed: gh as u64 * fl + gm as u64 * fm + gl as u64 * fs,
            flops_uniform_large: p as u64 * fl,
        })
    }
}
