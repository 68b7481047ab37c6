//! Training harness: Adam with coupled L2 weight decay, poly learning-rate
//! schedule, geometric data augmentation, the loss wiring for baseline and
//! patch-encoder modes, evaluation, and binary checkpoints.
//!
//! Everything is driven by one seeded RNG stream with a fixed draw order
//! (epoch shuffle, then per-sample augmentation draws), so a fixed seed
//! reproduces runs bit for bit.

use crate::data::{LabelMap, SegSample, IGNORE_LABEL};
use crate::epe::{self, EpeModule};
use crate::error::{Error, Result};
use crate::nn::{init_params, ParamId, ParamRegistry};
use crate::segnet::{cross_entropy_loss, mse_loss, total_loss, ConfusionMatrix, ToyHostModel};
use crate::tensor::{Graph, Node, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Epe,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "epe" => Ok(Mode::Epe),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (expected baseline or epe)"
            ))),
        }
    }
}

/// Hyperparameters; defaults follow the training recipe used throughout.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub power: f64,
    pub weight_decay: f64,
    /// Weight of the reconstruction MSE term in patch-encoder mode.
    pub lambda: f64,
    pub patch_size: usize,
    pub crop_size: usize,
    pub host_channels: usize,
    pub num_classes: usize,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rot_min_deg: f64,
    pub rot_max_deg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            max_iter: 1500,
            batch_size: 4,
            initial_lr: 1e-3,
            power: 0.9,
            weight_decay: 1e-4,
            lambda: 1.0,
            patch_size: 32,
            crop_size: 128,
            host_channels: 8,
            num_classes: 4,
            flip_prob: 0.5,
            scale_min: 0.5,
            scale_max: 2.0,
            rot_min_deg: -10.0,
            rot_max_deg: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0 {
            return Err(Error::invalid("initial_lr must be > 0"));
        }
        if self.power <= 0.0 {
            return Err(Error::invalid("power must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.patch_size == 0 || self.crop_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "crop_size {} must be divisible by patch_size {}",
                self.crop_size, self.patch_size
            )));
        }
        if self.scale_min > self.scale_max || self.scale_min <= 0.0 {
            return Err(Error::invalid("invalid scale range"));
        }
        Ok(())
    }
}

/// lr = initial_lr * (1 - iter/max_iter)^power.
pub fn poly_lr(cfg: &TrainConfig, iter: usize) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::invalid(format!(
            "iteration {} beyond max_iter {}",
            iter, cfg.max_iter
        )));
    }
    Ok(cfg.initial_lr * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.power))
}

/// Adam moments aligned with the registry's trainable parameters.
pub struct AdamState<S: Scalar> {
    ids: Vec<ParamId>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(reg: &ParamRegistry<S>, weight_decay: f64) -> Self {
        let ids = reg.trainable_ids();
        let m = ids.iter().map(|&id| Tensor::zeros(reg.value(id).shape())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(reg.value(id).shape())).collect();
        AdamState {
            ids,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update: g = grad + wd*param, moment updates, bias correction,
    /// param -= lr * m_hat / (sqrt(v_hat) + eps). `grads` is aligned with
    /// the registry's trainable parameters; `None` means an all-zero
    /// gradient (the parameter did not participate this iteration).
    pub fn step(
        &mut self,
        reg: &mut ParamRegistry<S>,
        grads: &[Option<Tensor<S>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::invalid(format!(
                "adam got {} gradients for {} parameters",
                grads.len(),
                self.ids.len()
            )));
        }
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::one() - b1;
        let one_m_b2 = S::one() - b2;
        let bc1 = S::one() - S::from_f64(self.beta1.powf(self.t as f64));
        let bc2 = S::one() - S::from_f64(self.beta2.powf(self.t as f64));
        let eps = S::from_f64(self.eps);
        let wd = S::from_f64(self.weight_decay);
        let lr = S::from_f64(lr);
        for (i, &id) in self.ids.iter().enumerate() {
            if let Some(grad) = &grads[i] {
                for (j, &gv) in grad.as_slice().iter().enumerate() {
                    if !gv.as_f64().is_finite() {
                        return Err(Error::NonFinite(format!(
                            "gradient of {} (element {})",
                            reg.name(id),
                            j
                        )));
                    }
                }
            }
            let ms = self.m[i].as_mut_slice();
            let vs = self.v[i].as_mut_slice();
            let ps = reg.value_mut(id).as_mut_slice();
            for j in 0..ps.len() {
                let raw = grads[i].as_ref().map_or(S::zero(), |g| g.as_slice()[j]);
                let g = raw + wd * ps[j];
                ms[j] = b1 * ms[j] + one_m_b1 * g;
                vs[j] = b2 * vs[j] + one_m_b2 * g * g;
                let m_hat = ms[j] / bc1;
                let v_hat = vs[j] / bc2;
                ps[j] = ps[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Collects per-parameter gradients from a graph after backward, aligned
/// with the registry's trainable parameters.
pub fn collect_grads<S: Scalar>(
    g: &Graph<S>,
    reg: &ParamRegistry<S>,
) -> Vec<Option<Tensor<S>>> {
    reg.trainable_ids()
        .iter()
        .map(|&id| reg.graph_node(g, id).map(|n| g.grad(n).clone()))
        .collect()
}

// --- Data augmentation ---

/// Resolved augmentation draws, applied deterministically.
#[derive(Clone, Copy, Debug)]
pub struct AugParams {
    pub flip: bool,
    pub scale: f64,
    pub angle_deg: f64,
    pub crop_y: usize,
    pub crop_x: usize,
}

fn channel_means<S: Scalar>(image: &Tensor<S>) -> [S; 3] {
    let (_, c, h, w) = image.dims4().expect("rank 4");
    let mut out = [S::zero(); 3];
    let plane = h * w;
    for ch in 0..c.min(3) {
        let mut sum = S::zero();
        for i in 0..plane {
            sum += image.as_slice()[ch * plane + i];
        }
        out[ch] = sum / S::from_f64(plane as f64);
    }
    out
}

fn flip_horizontal<S: Scalar>(image: &Tensor<S>, label: &LabelMap) -> (Tensor<S>, LabelMap) {
    let (_, c, h, w) = image.dims4().expect("rank 4");
    let mut img = Tensor::zeros(&[1, c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                img.set4(0, ch, y, x, image.get4(0, ch, y, w - 1 - x));
            }
        }
    }
    let mut lab = LabelMap::new(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            lab.set(y, x, label.get(y, w - 1 - x));
        }
    }
    (img, lab)
}

fn bilinear_sample<S: Scalar>(image: &Tensor<S>, ch: usize, sy: f64, sx: f64, fill: S) -> S {
    let (_, _, h, w) = image.dims4().expect("rank 4");
    if sy < 0.0 || sy > (h - 1) as f64 || sx < 0.0 || sx > (w - 1) as f64 {
        return fill;
    }
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = S::from_f64(sy - y0 as f64);
    let fx = S::from_f64(sx - x0 as f64);
    let one = S::one();
    let v00 = image.get4(0, ch, y0, x0);
    let v01 = image.get4(0, ch, y0, x1);
    let v10 = image.get4(0, ch, y1, x0);
    let v11 = image.get4(0, ch, y1, x1);
    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
}

fn nearest_label(label: &LabelMap, sy: f64, sx: f64) -> u8 {
    let y = sy.round() as isize;
    let x = sx.round() as isize;
    if y < 0 || x < 0 || y >= label.h as isize || x >= label.w as isize {
        return IGNORE_LABEL;
    }
    label.get(y as usize, x as usize)
}

fn rescale<S: Scalar>(image: &Tensor<S>, label: &LabelMap, scale: f64) -> (Tensor<S>, LabelMap) {
    let (_, c, h, w) = image.dims4().expect("rank 4");
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let ry = h as f64 / nh as f64;
    let rx = w as f64 / nw as f64;
    let mut img = Tensor::zeros(&[1, c, nh, nw]);
    let mut lab = LabelMap::new(nh, nw, 0);
    for y in 0..nh {
        let sy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f64);
        for x in 0..nw {
            let sx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f64);
            for ch in 0..c {
                img.set4(0, ch, y, x, bilinear_sample(image, ch, sy, sx, S::zero()));
            }
            lab.set(y, x, nearest_label(label, sy, sx));
        }
    }
    (img, lab)
}

fn rotate<S: Scalar>(image: &Tensor<S>, label: &LabelMap, angle_deg: f64) -> (Tensor<S>, LabelMap) {
    let (_, c, h, w) = image.dims4().expect("rank 4");
    let fill = channel_means(image);
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut img = Tensor::zeros(&[1, c, h, w]);
    let mut lab = LabelMap::new(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            // inverse rotation of the destination pixel
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            for ch in 0..c {
                img.set4(0, ch, y, x, bilinear_sample(image, ch, sy, sx, fill[ch.min(2)]));
            }
            lab.set(y, x, nearest_label(label, sy, sx));
        }
    }
    (img, lab)
}

fn pad_to<S: Scalar>(
    image: &Tensor<S>,
    label: &LabelMap,
    min_h: usize,
    min_w: usize,
) -> (Tensor<S>, LabelMap) {
    let (_, c, h, w) = image.dims4().expect("rank 4");
    if h >= min_h && w >= min_w {
        return (image.clone(), label.clone());
    }
    let nh = h.max(min_h);
    let nw = w.max(min_w);
    let top = (nh - h) / 2;
    let left = (nw - w) / 2;
    let fill = channel_means(image);
    let mut img = Tensor::zeros(&[1, c, nh, nw]);
    let mut lab = LabelMap::new(nh, nw, IGNORE_LABEL);
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                img.set4(0, ch, y, x, fill[ch.min(2)]);
            }
        }
    }
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                img.set4(0, ch, top + y, left + x, image.get4(0, ch, y, x));
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            lab.set(top + y, left + x, label.get(y, x));
        }
    }
    (img, lab)
}

fn crop<S: Scalar>(
    image: &Tensor<S>,
    label: &LabelMap,
    y0: usize,
    x0: usize,
    size: usize,
) -> (Tensor<S>, LabelMap) {
    let (_, c, _, _) = image.dims4().expect("rank 4");
    let mut img = Tensor::zeros(&[1, c, size, size]);
    let mut lab = LabelMap::new(size, size, 0);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                img.set4(0, ch, y, x, image.get4(0, ch, y0 + y, x0 + x));
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            lab.set(y, x, label.get(y0 + y, x0 + x));
        }
    }
    (img, lab)
}

/// Applies fixed augmentation parameters: flip, scale (image bilinear, label
/// nearest), rotation (out-of-frame pixels become the channel mean / ignore
/// label), then a crop to `crop_size` with mean/ignore padding if needed.
pub fn apply_augment<S: Scalar>(
    sample: &SegSample<S>,
    cfg: &TrainConfig,
    params: &AugParams,
) -> Result<SegSample<S>> {
    let (mut img, mut lab) = (sample.image.clone(), sample.label.clone());
    if params.flip {
        (img, lab) = flip_horizontal(&img, &lab);
    }
    if params.scale != 1.0 {
        (img, lab) = rescale(&img, &lab, params.scale);
    }
    if params.angle_deg != 0.0 {
        (img, lab) = rotate(&img, &lab, params.angle_deg);
    }
    (img, lab) = pad_to(&img, &lab, cfg.crop_size, cfg.crop_size);
    let (_, _, h, w) = img.dims4()?;
    if params.crop_y + cfg.crop_size > h || params.crop_x + cfg.crop_size > w {
        return Err(Error::invalid(format!(
            "crop offset ({}, {}) out of range for {}x{}",
            params.crop_y, params.crop_x, h, w
        )));
    }
    let (img, lab) = crop(&img, &lab, params.crop_y, params.crop_x, cfg.crop_size);
    Ok(SegSample {
        id: sample.id.clone(),
        image: img,
        label: lab,
    })
}

/// Draws augmentation parameters in the documented order (flip, scale,
/// angle, crop offsets) and applies them.
pub fn augment<S: Scalar, R: Rng>(
    sample: &SegSample<S>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SegSample<S>> {
    let flip = rng.gen_bool(cfg.flip_prob);
    let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
    let angle_deg = rng.gen_range(cfg.rot_min_deg..=cfg.rot_max_deg);
    let (_, _, h, w) = sample.image.dims4()?;
    let nh = (((h as f64 * scale).round() as usize).max(1)).max(cfg.crop_size);
    let nw = (((w as f64 * scale).round() as usize).max(1)).max(cfg.crop_size);
    let crop_y = rng.gen_range(0..=nh - cfg.crop_size);
    let crop_x = rng.gen_range(0..=nw - cfg.crop_size);
    apply_augment(
        sample,
        cfg,
        &AugParams {
            flip,
            scale,
            angle_deg,
            crop_y,
            crop_x,
        },
    )
}

// --- Model bundle ---

/// Host network plus (in patch-encoder mode) the plug-in module, over one
/// shared parameter registry.
pub struct Model<S: Scalar> {
    pub reg: ParamRegistry<S>,
    pub host: ToyHostModel,
    pub epe: Option<EpeModule>,
    pub mode: Mode,
}

pub struct SampleLoss {
    pub loss: Node,
    pub ce: f64,
    pub mse: Option<f64>,
}

impl<S: Scalar> Model<S> {
    pub fn new(mode: Mode, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut reg = ParamRegistry::new();
        let host = ToyHostModel::new(&mut reg, "host", cfg.host_channels, cfg.num_classes)?;
        let epe = match mode {
            Mode::Baseline => None,
            Mode::Epe => Some(EpeModule::new(
                &mut reg,
                "epe",
                cfg.patch_size,
                cfg.host_channels,
                cfg.num_classes,
            )?),
        };
        init_params(&mut reg, seed);
        Ok(Model {
            reg,
            host,
            epe,
            mode,
        })
    }

    /// Forward pass through host (+ module) to logits.
    pub fn logits(&mut self, g: &mut Graph<S>, image: &Tensor<S>, train: bool) -> Result<Node> {
        let x = g.leaf(image.clone());
        let features = self.host.forward(g, &mut self.reg, x, train)?;
        match &self.epe {
            None => self.host.classify(g, &self.reg, features),
            Some(module) => {
                let (feature, _plan) = epe::epe_forward(g, &mut self.reg, module, image, train)?;
                epe::integrate(g, &mut self.reg, module, features, feature, train)
            }
        }
    }

    /// Loss for one sample: CE alone in baseline mode, CE + lambda * MSE of
    /// the reconstruction head in patch-encoder mode.
    pub fn forward_loss(
        &mut self,
        g: &mut Graph<S>,
        sample: &SegSample<S>,
        lambda: f64,
        train: bool,
    ) -> Result<SampleLoss> {
        let x = g.leaf(sample.image.clone());
        let features = self.host.forward(g, &mut self.reg, x, train)?;
        match &self.epe {
            None => {
                let logits = self.host.classify(g, &self.reg, features)?;
                let ce = cross_entropy_loss(g, logits, &sample.label)?;
                Ok(SampleLoss {
                    loss: ce,
                    ce: g.value(ce).as_slice()[0].as_f64(),
                    mse: None,
                })
            }
            Some(module) => {
                let (feature, _plan) =
                    epe::epe_forward(g, &mut self.reg, module, &sample.image, train)?;
                let logits = epe::integrate(g, &mut self.reg, module, features, feature, train)?;
                let ce = cross_entropy_loss(g, logits, &sample.label)?;
                let (loss, mse_val) = if train {
                    let recon = epe::reconstruct(g, &mut self.reg, module, feature)?;
                    let mse = mse_loss(g, recon, &sample.image)?;
                    let mse_val = g.value(mse).as_slice()[0].as_f64();
                    (total_loss(g, ce, Some(mse), lambda)?, Some(mse_val))
                } else {
                    (ce, None)
                };
                Ok(SampleLoss {
                    loss,
                    ce: g.value(ce).as_slice()[0].as_f64(),
                    mse: mse_val,
                })
            }
        }
    }
}

// --- Training loop ---

#[derive(Clone, Debug)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub ce: f64,
    pub mse: Option<f64>,
    pub total: f64,
}

pub struct TrainReport {
    pub logs: Vec<IterLog>,
}

impl TrainReport {
    /// Mean CE over the trailing `window` iterations ending at `iter`.
    pub fn smoothed_ce(&self, iter: usize, window: usize) -> f64 {
        let end = iter + 1;
        let start = end.saturating_sub(window);
        let slice = &self.logs[start..end];
        slice.iter().map(|l| l.ce).sum::<f64>() / slice.len() as f64
    }
}

/// Runs the optimization loop. Batches come from a seeded shuffle that
/// reshuffles at epoch boundaries; every sample is augmented; the batch loss
/// is the mean of per-sample losses.
pub fn train_loop<S: Scalar>(
    model: &mut Model<S>,
    dataset: &[SegSample<S>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.reg, cfg.weight_decay);
    let mut pool: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(cfg.max_iter);

    for iter in 0..cfg.max_iter {
        let lr = poly_lr(cfg, iter)?;
        let mut g = Graph::new();
        let mut batch_losses = Vec::with_capacity(cfg.batch_size);
        let mut ce_sum = 0.0;
        let mut mse_sum = 0.0;
        let mut has_mse = false;
        for _ in 0..cfg.batch_size {
            if pool.is_empty() {
                pool = (0..dataset.len()).collect();
                pool.shuffle(&mut rng);
            }
            let idx = pool.pop().expect("refilled above");
            let sample = augment(&dataset[idx], cfg, &mut rng)?;
            let sl = model.forward_loss(&mut g, &sample, cfg.lambda, true)?;
            ce_sum += sl.ce;
            if let Some(m) = sl.mse {
                mse_sum += m;
                has_mse = true;
            }
            batch_losses.push(sl.loss);
        }
        let mut acc = batch_losses[0];
        for &l in &batch_losses[1..] {
            acc = g.add(acc, l)?;
        }
        let loss = g.scale(acc, S::from_f64(1.0 / cfg.batch_size as f64));
        let total = g.value(loss).as_slice()[0].as_f64();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {iter}")));
        }
        g.backward(loss)?;
        let grads = collect_grads(&g, &model.reg);
        adam.step(&mut model.reg, &grads, lr)?;
        logs.push(IterLog {
            iter,
            lr,
            ce: ce_sum / cfg.batch_size as f64,
            mse: if has_mse {
                Some(mse_sum / cfg.batch_size as f64)
            } else {
                None
            },
            total,
        });
    }
    Ok(TrainReport { logs })
}

/// Per-class IoU plus mIoU over a dataset, in eval mode (frozen batch-norm
/// statistics).
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn evaluate<S: Scalar>(model: &mut Model<S>, dataset: &[SegSample<S>]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let mut cm = ConfusionMatrix::new(model.host.num_classes);
    for sample in dataset {
        let mut g = Graph::new();
        let logits = model.logits(&mut g, &sample.image, false)?;
        cm.accumulate_logits(g.value(logits), &sample.label)?;
    }
    let per_class = cm.per_class_iou();
    let miou = cm.miou()?;
    Ok(EvalReport {
        confusion: cm,
        per_class,
        miou,
    })
}

// --- Checkpoints ---

const CHECKPOINT_MAGIC: &[u8; 4] = b"EPE1";

/// Writes every registered tensor (parameters and buffers, in registration
/// order) as `EPE1`, a u32 tensor count, then per tensor: name length (u32),
/// name bytes, rank (u32), extents (u32 each), and raw f32 little-endian
/// data.
pub fn save_checkpoint<S: Scalar>(reg: &ParamRegistry<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for id in reg.ids() {
        let name = reg.name(id).as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let t = reg.value(id);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.as_slice() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint into an existing registry. Every tensor in the file
/// must match a registered name with the same shape, and every registered
/// tensor must be covered by the file.
pub fn load_checkpoint<S: Scalar>(reg: &mut ParamRegistry<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Truncated(format!(
                "{}: needed {} bytes at offset {}",
                path.display(),
                n,
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let count = read_u32(&mut pos)?;
    let mut loaded = vec![false; reg.len()];
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8_lossy(take(&mut pos, name_len)?).into_owned();
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = take(&mut pos, numel * 4)?;
        let id = reg.lookup(&name).ok_or_else(|| {
            Error::invalid(format!("checkpoint tensor {name:?} not in this architecture"))
        })?;
        if reg.value(id).shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "parameter {:?}: checkpoint shape {:?} vs registered {:?}",
                name,
                shape,
                reg.value(id).shape()
            )));
        }
        let values: Vec<S> = data
            .chunks_exact(4)
            .map(|b| S::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        reg.set_value(id, Tensor::new(&shape, values)?)?;
        loaded[id.index()] = true;
    }
    for id in reg.ids() {
        if !loaded[id.index()] {
            return Err(Error::invalid(format!(
                "checkpoint does not cover parameter {:?}: architecture mismatch",
                reg.name(id)
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToyDatasetSpec};
    use approx::assert_relative_eq;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            seed: 3,
            max_iter: 6,
            batch_size: 2,
            crop_size: 64,
            patch_size: 32,
            host_channels: 4,
            ..Default::default()
        }
    }

    fn small_data() -> Vec<SegSample<f32>> {
        generate_toy_dataset(&ToyDatasetSpec {
            num_samples: 6,
            height: 64,
            width: 64,
            seed: 7,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn poly_lr_closed_forms() {
        let cfg = TrainConfig {
            max_iter: 1000,
            ..Default::default()
        };
        assert_eq!(poly_lr(&cfg, 0).unwrap(), 1e-3);
        assert_eq!(poly_lr(&cfg, 1000).unwrap(), 0.0);
        assert_relative_eq!(
            poly_lr(&cfg, 500).unwrap(),
            1e-3 * 0.5f64.powf(0.9),
            epsilon = 1e-15
        );
        assert!(poly_lr(&cfg, 1001).is_err());
    }

    #[test]
    fn poly_lr_is_strictly_decreasing() {
        let cfg = TrainConfig {
            max_iter: 100,
            ..Default::default()
        };
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = poly_lr(&cfg, i).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_zero_grad_zero_param_is_noop() {
        let mut reg = ParamRegistry::<f64>::new();
        let id = reg
            .register("p", Tensor::zeros(&[3]), crate::nn::ParamKind::Bias)
            .unwrap();
        let mut adam = AdamState::new(&reg, 1e-4);
        adam.step(&mut reg, &[Some(Tensor::zeros(&[3]))], 0.01).unwrap();
        assert!(reg.value(id).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut reg = ParamRegistry::<f64>::new();
        let id = reg
            .register("p", Tensor::zeros(&[1]), crate::nn::ParamKind::Bias)
            .unwrap();
        let mut adam = AdamState::new(&reg, 0.0);
        let g = 0.37;
        let lr = 0.01;
        adam.step(&mut reg, &[Some(Tensor::from_f64s(&[1], &[g]).unwrap())], lr)
            .unwrap();
        let expected = -lr * g / (g.abs() + adam.eps);
        assert_relative_eq!(reg.value(id).as_slice()[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn adam_weight_decay_shrinks_unused_param() {
        let mut reg = ParamRegistry::<f64>::new();
        let id = reg
            .register("p", Tensor::from_f64s(&[1], &[1.0]).unwrap(), crate::nn::ParamKind::Bias)
            .unwrap();
        let mut adam = AdamState::new(&reg, 1e-4);
        adam.step(&mut reg, &[Some(Tensor::zeros(&[1]))], 0.01).unwrap();
        let v = reg.value(id).as_slice()[0];
        assert!(v < 1.0 && v > 0.98, "param after decay step: {v}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient_naming_param() {
        let mut reg = ParamRegistry::<f64>::new();
        reg.register("w.bad", Tensor::zeros(&[1]), crate::nn::ParamKind::Bias)
            .unwrap();
        let mut adam = AdamState::new(&reg, 0.0);
        let err = adam
            .step(
                &mut reg,
                &[Some(Tensor::from_f64s(&[1], &[f64::NAN]).unwrap())],
                0.01,
            )
            .unwrap_err();
        assert!(err.to_string().contains("w.bad"));
    }

    #[test]
    fn double_flip_is_identity() {
        let data = small_data();
        let cfg = small_cfg();
        let params = AugParams {
            flip: true,
            scale: 1.0,
            angle_deg: 0.0,
            crop_y: 0,
            crop_x: 0,
        };
        let once = apply_augment(&data[0], &cfg, &params).unwrap();
        let twice = apply_augment(&once, &cfg, &params).unwrap();
        assert_eq!(twice.image.as_slice(), data[0].image.as_slice());
        assert_eq!(twice.label, data[0].label);
    }

    #[test]
    fn identity_params_extract_the_crop_region() {
        let data = small_data();
        let mut cfg = small_cfg();
        cfg.crop_size = 32;
        let params = AugParams {
            flip: false,
            scale: 1.0,
            angle_deg: 0.0,
            crop_y: 16,
            crop_x: 16,
        };
        let out = apply_augment(&data[0], &cfg, &params).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(
                    out.image.get4(0, 0, y, x),
                    data[0].image.get4(0, 0, 16 + y, 16 + x)
                );
                assert_eq!(out.label.get(y, x), data[0].label.get(16 + y, 16 + x));
            }
        }
    }

    #[test]
    fn augmented_labels_stay_in_class_set() {
        use rand::SeedableRng;
        let data = small_data();
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..20 {
            let out = augment(&data[0], &cfg, &mut rng).unwrap();
            for &l in &out.label.data {
                assert!(l == IGNORE_LABEL || (l as usize) < 4, "label {l}");
            }
        }
    }

    #[test]
    fn train_loop_is_seed_deterministic_and_logs_poly_lr() {
        let cfg = small_cfg();
        let data = small_data();
        let run = || {
            let mut model = Model::<f32>::new(Mode::Epe, &cfg, cfg.seed).unwrap();
            train_loop(&mut model, &data, &cfg).unwrap()
        };
        let r1 = run();
        let r2 = run();
        for (a, b) in r1.logs.iter().zip(&r2.logs) {
            assert_eq!(a.total, b.total);
            assert_eq!(a.ce, b.ce);
            assert_eq!(a.lr, b.lr);
        }
        for log in &r1.logs {
            assert_eq!(log.lr, poly_lr(&cfg, log.iter).unwrap());
            assert!(log.mse.is_some());
        }
    }

    #[test]
    fn baseline_logs_have_no_mse() {
        let cfg = small_cfg();
        let data = small_data();
        let mut model = Model::<f32>::new(Mode::Baseline, &cfg, cfg.seed).unwrap();
        let report = train_loop(&mut model, &data, &cfg).unwrap();
        assert!(report.logs.iter().all(|l| l.mse.is_none()));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let mut model = Model::<f32>::new(Mode::Epe, &cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&model.reg, &path).unwrap();

        let mut model2 = Model::<f32>::new(Mode::Epe, &cfg, 999).unwrap();
        load_checkpoint(&mut model2.reg, &path).unwrap();
        for id in model.reg.trainable_ids() {
            let name = model.reg.name(id).to_string();
            let id2 = model2.reg.lookup(&name).unwrap();
            assert_eq!(
                model.reg.value(id).as_slice(),
                model2.reg.value(id2).as_slice(),
                "{name}"
            );
        }
        let _ = &mut model;
    }

    #[test]
    fn checkpoint_corrupt_magic_and_truncation() {
        let cfg = small_cfg();
        let model = Model::<f32>::new(Mode::Baseline, &cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&model.reg, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes).unwrap();
        let mut m2 = Model::<f32>::new(Mode::Baseline, &cfg, 5).unwrap();
        assert!(matches!(
            load_checkpoint(&mut m2.reg, &bad).unwrap_err(),
            Error::BadMagic { .. }
        ));

        let trunc = dir.path().join("trunc.bin");
        let orig = std::fs::read(&path).unwrap();
        std::fs::write(&trunc, &orig[..orig.len() - 10]).unwrap();
        assert!(matches!(
            load_checkpoint(&mut m2.reg, &trunc).unwrap_err(),
            Error::Truncated(_)
        ));
    }

    #[test]
    fn checkpoint_shape_mismatch_names_parameter() {
        let cfg = small_cfg();
        let model = Model::<f32>::new(Mode::Baseline, &cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&model.reg, &path).unwrap();

        let mut other_cfg = cfg.clone();
        other_cfg.host_channels = 6;
        let mut m2 = Model::<f32>::new(Mode::Baseline, &other_cfg, 5).unwrap();
        let err = load_checkpoint(&mut m2.reg, &path).unwrap_err();
        assert!(err.to_string().contains("host.stem.weight"), "{err}");
    }
}
