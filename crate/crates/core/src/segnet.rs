//! Toy segmentation host model, pixel losses, and the mIoU metric.
//!
//! The host stands behind the same integration surface a production
//! segmentation network would use: it emits full-resolution pre-logit
//! features, and either its own 1x1 classifier (baseline mode) or the patch
//! encoder's integration path turns those into class logits.

use crate::data::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, ParamRegistry, ResidualBlock};
use crate::tensor::{Graph, Node, Scalar, Tensor};

/// Small full-resolution host: stem conv, two residual blocks, 1x1 head.
pub struct ToyHostModel {
    pub stem: Conv2dLayer,
    pub block1: ResidualBlock,
    pub block2: ResidualBlock,
    pub head: Conv2dLayer,
    pub classifier: Conv2dLayer,
    pub channels: usize,
    pub num_classes: usize,
}

impl ToyHostModel {
    pub fn new<S: Scalar>(
        reg: &mut ParamRegistry<S>,
        name: &str,
        channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let stem = Conv2dLayer::new(reg, &format!("{name}.stem"), 3, channels, 3, 1, 1, 1, true)?;
        let block1 = ResidualBlock::new(reg, &format!("{name}.block1"), channels, channels)?;
        let block2 = ResidualBlock::new(reg, &format!("{name}.block2"), channels, channels)?;
        let head = Conv2dLayer::new(reg, &format!("{name}.head"), channels, channels, 1, 1, 0, 1, true)?;
        let classifier = Conv2dLayer::new(
            reg,
            &format!("{name}.classifier"),
            channels,
            num_classes,
            1,
            1,
            0,
            1,
            true,
        )?;
        Ok(ToyHostModel {
            stem,
            block1,
            block2,
            head,
            classifier,
            channels,
            num_classes,
        })
    }

    /// Full-resolution pre-logit features, `1 x C_host x H x W`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        reg: &mut ParamRegistry<S>,
        image: Node,
        train: bool,
    ) -> Result<Node> {
        let y = self.stem.forward(g, reg, image)?;
        let y = g.relu(y);
        let y = self.block1.forward(g, reg, y, train)?;
        let y = self.block2.forward(g, reg, y, train)?;
        let y = self.head.forward(g, reg, y)?;
        Ok(g.relu(y))
    }

    /// Baseline-mode logits from host features.
    pub fn classify<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        reg: &ParamRegistry<S>,
        features: Node,
    ) -> Result<Node> {
        self.classifier.forward(g, reg, features)
    }

    /// Convolution MACs plus BN/relu element ops for one forward pass
    /// (features only, without the classifier).
    pub fn feature_flops(&self, h: usize, w: usize) -> u64 {
        let elems = (self.channels * h * w) as u64;
        self.stem.flops(h, w)
            + elems
            + self.block1.flops(h, w)
            + self.block2.flops(h, w)
            + self.head.flops(h, w)
            + elems
    }
}

/// Mean over non-ignored pixels of -log softmax(logits)[label].
pub fn cross_entropy_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Node,
    labels: &LabelMap,
) -> Result<Node> {
    let (_, _, h, w) = g.value(logits).dims4()?;
    if labels.h != h || labels.w != w {
        return Err(Error::shape(format!(
            "labels {}x{} vs logits {}x{}",
            labels.h, labels.w, h, w
        )));
    }
    g.cross_entropy(logits, &labels.data, IGNORE_LABEL)
}

/// Mean squared difference against a fixed target.
pub fn mse_loss<S: Scalar>(g: &mut Graph<S>, pred: Node, target: &Tensor<S>) -> Result<Node> {
    g.mse(pred, target)
}

/// ce + lambda * mse; with no mse term the loss is ce alone.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    ce: Node,
    mse: Option<Node>,
    lambda: f64,
) -> Result<Node> {
    match mse {
        Some(mse) => {
            let scaled = g.scale(mse, S::from_f64(lambda));
            g.add(ce, scaled)
        }
        None => Ok(ce),
    }
}

/// K x K pixel counts; rows are ground truth, columns the prediction.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn record(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.k + pred] += 1;
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merges another matrix by elementwise addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Accumulates argmax predictions against labels; ignored pixels are
    /// skipped. Argmax ties resolve to the lowest class index.
    pub fn accumulate_logits<S: Scalar>(
        &mut self,
        logits: &Tensor<S>,
        labels: &LabelMap,
    ) -> Result<()> {
        let (n, k, h, w) = logits.dims4()?;
        if n != 1 || k != self.k {
            return Err(Error::shape(format!(
                "logits {:?} vs confusion matrix over {} classes",
                logits.shape(),
                self.k
            )));
        }
        if labels.h != h || labels.w != w {
            return Err(Error::shape(format!(
                "labels {}x{} vs logits {}x{}",
                labels.h, labels.w, h, w
            )));
        }
        let plane = h * w;
        let xs = logits.as_slice();
        for p in 0..plane {
            let l = labels.data[p];
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= k {
                return Err(Error::invalid(format!(
                    "label {l} out of range for {k} classes"
                )));
            }
            let mut best = 0usize;
            let mut best_v = xs[p];
            for c in 1..k {
                let v = xs[c * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            self.record(l as usize, best);
        }
        Ok(())
    }

    /// Per-class IoU; classes absent from both ground truth and prediction
    /// have no defined IoU and yield `None`.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let diag = self.count(c, c);
                let row: u64 = (0..self.k).map(|j| self.count(c, j)).sum();
                let col: u64 = (0..self.k).map(|i| self.count(i, c)).sum();
                let union = row + col - diag;
                if union == 0 {
                    None
                } else {
                    Some(diag as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with nonzero union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::invalid(
                "confusion matrix is empty: no class has a nonzero union",
            ));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}
