//! Self-check suites: finite-difference gradient verification, fold/unfold
//! round trips, an independent brute-force entropy oracle, and optimizer
//! closed forms. The CLI `verify` subcommand and the acceptance tests both
//! run these.

use crate::entropy;
use crate::epe::{self, EncoderConfig, EpeModule};
use crate::error::Result;
use crate::nn::{init_params, BatchNorm2d, Conv2dLayer, DwSepConv, ParamRegistry, ResidualBlock};
use crate::segnet::{cross_entropy_loss, mse_loss, total_loss, ToyHostModel};
use crate::tensor::{fold, unfold, Graph, Node, Tensor};
use crate::train::{AdamState, Model, Mode, TrainConfig};
use crate::data::LabelMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    /// Largest relative (gradient checks) or absolute (oracle checks) error.
    pub max_err: f64,
    pub tol: f64,
    pub pass: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: impl Into<String>, max_err: f64, tol: f64, detail: impl Into<String>) -> Self {
        CheckReport {
            name: name.into(),
            max_err,
            tol,
            pass: max_err < tol,
            detail: detail.into(),
        }
    }
}

/// Relative error with a floor: gradients above the floor magnitude get a
/// plain relative comparison, near-zero ones an absolute comparison at
/// floor * tolerance (central differences at step 1e-5 carry ~1e-8 of f64
/// roundoff noise, so a 1e-6 floor would flag exact zeros).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

const FD_STEP: f64 = 1e-5;

/// Kink margin for layer-sized checks at the 1e-5 step.
const KINK_MARGIN: f64 = 1e-4;

/// Central-difference gradient of a scalar function of a flat vector.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Checks a differentiable program's analytic gradients against central
/// finite differences. `forward` builds the scalar loss from a fresh graph,
/// the registry, and (optionally) an input leaf. Parameters are perturbed
/// through a cloned registry, so train-mode batch-norm running-stat updates
/// never leak between evaluations.
pub fn fd_check<F>(
    name: &str,
    reg: &ParamRegistry<f64>,
    input: Option<&Tensor<f64>>,
    check_input_grad: bool,
    tol: f64,
    forward: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &mut ParamRegistry<f64>, Option<Node>) -> Result<Node>,
{
    fd_check_at(name, reg, input, check_input_grad, tol, FD_STEP, 0.0, forward)?
        .ok_or_else(|| crate::error::Error::invalid("kink margin 0 cannot reject"))
}

/// [`fd_check`] with an explicit step and a relu-kink margin. Central
/// differences are only meaningful where the loss is differentiable across
/// the whole step window; if any relu input lies within `kink_margin` of
/// zero, the instance is rejected (`Ok(None)`) and the caller draws a new
/// one.
#[allow(clippy::too_many_arguments)]
pub fn fd_check_at<F>(
    name: &str,
    reg: &ParamRegistry<f64>,
    input: Option<&Tensor<f64>>,
    check_input_grad: bool,
    tol: f64,
    step: f64,
    kink_margin: f64,
    forward: F,
) -> Result<Option<CheckReport>>
where
    F: Fn(&mut Graph<f64>, &mut ParamRegistry<f64>, Option<Node>) -> Result<Node>,
{
    // analytic pass
    let mut work = reg.clone();
    let mut g = Graph::new();
    let input_node = input.map(|t| g.leaf(t.clone()));
    let loss = forward(&mut g, &mut work, input_node)?;
    if let Some(min) = g.min_abs_relu_input() {
        if min <= kink_margin {
            return Ok(None);
        }
    }
    g.backward(loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    if check_input_grad {
        if let Some(n) = input_node {
            analytic.push(("input".into(), g.grad(n).as_slice().to_vec()));
        }
    }
    let trainable = reg.trainable_ids();
    for &id in &trainable {
        if let Some(n) = work.graph_node(&g, id) {
            analytic.push((reg.name(id).to_string(), g.grad(n).as_slice().to_vec()));
        }
    }

    // numeric evaluation of the loss for given parameter/input values
    let eval = |reg_vals: &ParamRegistry<f64>, inp: Option<&Tensor<f64>>| -> Result<f64> {
        let mut work = reg_vals.clone();
        let mut g = Graph::new();
        let input_node = inp.map(|t| g.leaf(t.clone()));
        let loss = forward(&mut g, &mut work, input_node)?;
        Ok(g.value(loss).as_slice()[0])
    };

    let mut max_err = 0.0f64;
    let mut worst = String::new();
    for (label, grads) in &analytic {
        if label == "input" {
            let base = input.expect("input present").clone();
            for i in 0..grads.len() {
                let mut plus = base.clone();
                plus.as_mut_slice()[i] += step;
                let mut minus = base.clone();
                minus.as_mut_slice()[i] -= step;
                let num = (eval(reg, Some(&plus))? - eval(reg, Some(&minus))?) / (2.0 * step);
                let e = rel_err(grads[i], num);
                if e > max_err {
                    max_err = e;
                    worst = format!("{label}[{i}]: analytic {} vs fd {}", grads[i], num);
                }
            }
        } else {
            let id = reg.lookup(label).expect("registered");
            for i in 0..grads.len() {
                let mut plus = reg.clone();
                plus.value_mut(id).as_mut_slice()[i] += step;
                let mut minus = reg.clone();
                minus.value_mut(id).as_mut_slice()[i] -= step;
                let num = (eval(&plus, input)? - eval(&minus, input)?) / (2.0 * step);
                let e = rel_err(grads[i], num);
                if e > max_err {
                    max_err = e;
                    worst = format!("{label}[{i}]: analytic {} vs fd {}", grads[i], num);
                }
            }
        }
    }
    Ok(Some(CheckReport::new(name, max_err, tol, worst)))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::random(shape, -1.0, 1.0, rng)
}

/// Nudges biases and batch-norm affines off their zero/one init. Zero-init
/// biases feeding relu-zeroed inputs put pre-activations at exactly 0, where
/// relu is non-differentiable and central differences straddle the kink;
/// random instances must avoid that measure-zero point.
fn jitter_affine_params(reg: &mut ParamRegistry<f64>, rng: &mut ChaCha8Rng) {
    for id in reg.trainable_ids() {
        match reg.kind(id) {
            crate::nn::ParamKind::Bias | crate::nn::ParamKind::BnBeta => {
                let shape = reg.value(id).shape().to_vec();
                reg.set_value(id, Tensor::random(&shape, -0.05, 0.05, rng))
                    .expect("same shape");
            }
            crate::nn::ParamKind::BnGamma => {
                let shape = reg.value(id).shape().to_vec();
                reg.set_value(id, Tensor::random(&shape, 0.9, 1.1, rng))
                    .expect("same shape");
            }
            _ => {}
        }
    }
}

/// Draws fresh random instances until one sits clear of relu kinks.
fn retry_instances(
    max_attempts: u64,
    mut build: impl FnMut(u64) -> Result<Option<CheckReport>>,
) -> Result<CheckReport> {
    for attempt in 0..max_attempts {
        if let Some(report) = build(attempt)? {
            return Ok(report);
        }
    }
    Err(crate::error::Error::invalid(
        "no kink-free instance found for finite differences",
    ))
}

/// Gradient checks for every layer and the full integrated model.
/// `instances` random instances run per check (the acceptance gate uses 3).
pub fn grad_suite(instances: usize) -> Result<Vec<CheckReport>> {
    let tol = 1e-4;
    let mut out = Vec::new();
    for inst in 0..instances {
        let seed = 1000 + inst as u64 * 37;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // elementwise mul (tighter tolerance: the rule is exact)
        {
            let len = 5 + 3 * inst;
            let a = rand_tensor(&[len], &mut rng);
            let b = rand_tensor(&[len], &mut rng);
            let w = rand_tensor(&[len], &mut rng);
            let mut reg = ParamRegistry::<f64>::new();
            let ida = reg.register("a", a, crate::nn::ParamKind::Bias)?;
            let idb = reg.register("b", b, crate::nn::ParamKind::Bias)?;
            let wc = w.clone();
            out.push(fd_check(
                &format!("mul[{inst}]"),
                &reg,
                None,
                false,
                1e-6,
                move |g, reg, _| {
                    let an = reg.node(g, ida);
                    let bn = reg.node(g, idb);
                    let m = g.mul(an, bn)?;
                    g.weighted_sum(m, &wc)
                },
            )?);
        }

        // plain conv: standard, grouped, strided
        let conv_cases: [(usize, usize, usize, usize, usize, usize, (usize, usize)); 3] = [
            (2, 3, 3, 1, 1, 1, (5, 5)),
            (4, 4, 3, 1, 1, 2, (5, 5)),
            (3, 2, 3, 2, 0, 1, (7, 7)),
        ];
        for (ci, (c_in, c_out, k, stride, pad, groups, (h, w))) in conv_cases.iter().enumerate() {
            let mut reg = ParamRegistry::<f64>::new();
            let conv = Conv2dLayer::new(&mut reg, "conv", *c_in, *c_out, *k, *stride, *pad, *groups, true)?;
            init_params(&mut reg, seed + ci as u64);
            let x = rand_tensor(&[2, *c_in, *h, *w], &mut rng);
            let (oh, ow) = conv.out_size(*h, *w);
            let wsum = rand_tensor(&[2, *c_out, oh, ow], &mut rng);
            out.push(fd_check(
                &format!("conv2d/case{ci}[{inst}]"),
                &reg,
                Some(&x),
                true,
                tol,
                move |g, reg, input| {
                    let y = conv.forward(g, reg, input.expect("input"))?;
                    g.weighted_sum(y, &wsum)
                },
            )?);
        }

        // depthwise separable conv
        {
            let side = 4 + inst;
            let mut reg = ParamRegistry::<f64>::new();
            let layer = DwSepConv::new(&mut reg, "dws", 3, 4, 3, 1, 1)?;
            init_params(&mut reg, seed + 5);
            let x = rand_tensor(&[2, 3, side, side], &mut rng);
            let wsum = rand_tensor(&[2, 4, side, side], &mut rng);
            out.push(fd_check(
                &format!("dwsep[{inst}]"),
                &reg,
                Some(&x),
                true,
                tol,
                move |g, reg, input| {
                    let y = layer.forward(g, reg, input.expect("input"))?;
                    g.weighted_sum(y, &wsum)
                },
            )?);
        }

        // batch norm in train mode (differentiates through batch stats)
        {
            let mut reg = ParamRegistry::<f64>::new();
            let bn = BatchNorm2d::new(&mut reg, "bn", 3)?;
            init_params(&mut reg, seed + 6);
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 7);
            reg.set_value(bn.gamma_id(), Tensor::random(&[3], 0.5, 1.5, &mut rng2))?;
            reg.set_value(bn.beta_id(), Tensor::random(&[3], -0.5, 0.5, &mut rng2))?;
            let side = 3 + inst;
            let x = rand_tensor(&[2, 3, side, side], &mut rng);
            let wsum = rand_tensor(&[2, 3, side, side], &mut rng);
            out.push(fd_check(
                &format!("batchnorm_train[{inst}]"),
                &reg,
                Some(&x),
                true,
                tol,
                move |g, reg, input| {
                    let y = bn.forward(g, reg, input.expect("input"), true)?;
                    g.weighted_sum(y, &wsum)
                },
            )?);
        }

        // residual block
        {
            let report = retry_instances(8, |attempt| {
                let mut reg = ParamRegistry::<f64>::new();
                let block = ResidualBlock::new(&mut reg, "res", 3, 3)?;
                init_params(&mut reg, seed + 8 + 1000 * attempt);
                jitter_affine_params(&mut reg, &mut rng);
                let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
                let wsum = rand_tensor(&[2, 3, 4, 4], &mut rng);
                fd_check_at(
                    &format!("residual_block[{inst}]"),
                    &reg,
                    Some(&x),
                    true,
                    tol,
                    FD_STEP,
                    KINK_MARGIN,
                    move |g, reg, input| {
                        let y = block.forward(g, reg, input.expect("input"), true)?;
                        g.weighted_sum(y, &wsum)
                    },
                )
            })?;
            out.push(report);
        }

        // concat
        {
            let mut reg = ParamRegistry::<f64>::new();
            let side = 2 + inst;
            let a = rand_tensor(&[1, 2, side, side], &mut rng);
            let idb = reg.register(
                "b",
                rand_tensor(&[1, 3, side, side], &mut rng),
                crate::nn::ParamKind::Bias,
            )?;
            let wsum = rand_tensor(&[1, 5, side, side], &mut rng);
            out.push(fd_check(
                &format!("concat[{inst}]"),
                &reg,
                Some(&a),
                true,
                tol,
                move |g, reg, input| {
                    let bn = reg.node(g, idb);
                    let c = g.concat_channels(input.expect("input"), bn)?;
                    g.weighted_sum(c, &wsum)
                },
            )?);
        }

        // the canonical small and medium encoders (full six-block depth)
        for (label, channels) in [("small", 4usize), ("medium", 8)] {
            let report = retry_instances(8, |attempt| {
                let mut reg = ParamRegistry::<f64>::new();
                let enc = crate::epe::Encoder::new(
                    &mut reg,
                    "enc",
                    EncoderConfig::with_channels(channels),
                )?;
                init_params(&mut reg, seed + 9 + 1000 * attempt);
                jitter_affine_params(&mut reg, &mut rng);
                let x = Tensor::random(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
                let wsum = rand_tensor(&[2, 1, 8, 8], &mut rng);
                fd_check_at(
                    &format!("encoder_{label}[{inst}]"),
                    &reg,
                    Some(&x),
                    true,
                    tol,
                    FD_STEP,
                    KINK_MARGIN,
                    move |g, reg, input| {
                        let y = enc.forward(g, reg, input.expect("input"), true)?;
                        g.weighted_sum(y, &wsum)
                    },
                )
            })?;
            out.push(report);
        }

        // toy host features end to end
        {
            let report = retry_instances(8, |attempt| {
                let mut reg = ParamRegistry::<f64>::new();
                let host = ToyHostModel::new(&mut reg, "host", 3, 3)?;
                init_params(&mut reg, seed + 11 + 1000 * attempt);
                jitter_affine_params(&mut reg, &mut rng);
                let x = Tensor::random(&[1, 3, 6, 6], 0.0, 1.0, &mut rng);
                let wsum = rand_tensor(&[1, 3, 6, 6], &mut rng);
                fd_check_at(
                    &format!("host_forward[{inst}]"),
                    &reg,
                    Some(&x),
                    true,
                    tol,
                    FD_STEP,
                    KINK_MARGIN,
                    move |g, reg, input| {
                        let y = host.forward(g, reg, input.expect("input"), true)?;
                        g.weighted_sum(y, &wsum)
                    },
                )
            })?;
            out.push(report);
        }

        // cross entropy
        {
            let side = 3 + inst;
            let mut reg = ParamRegistry::<f64>::new();
            let id = reg.register(
                "logits",
                rand_tensor(&[1, 4, side, side], &mut rng),
                crate::nn::ParamKind::Bias,
            )?;
            let mut data = vec![0u8; side * side];
            for (i, v) in data.iter_mut().enumerate() {
                *v = if i % 7 == 5 { 255 } else { (i % 4) as u8 };
            }
            let labels = LabelMap {
                h: side,
                w: side,
                data,
            };
            out.push(fd_check(
                &format!("cross_entropy[{inst}]"),
                &reg,
                None,
                false,
                tol,
                move |g, reg, _| {
                    let l = reg.node(g, id);
                    cross_entropy_loss(g, l, &labels)
                },
            )?);
        }

        // mse
        {
            let side = 3 + inst;
            let mut reg = ParamRegistry::<f64>::new();
            let id = reg.register(
                "pred",
                rand_tensor(&[1, 3, side, side], &mut rng),
                crate::nn::ParamKind::Bias,
            )?;
            let target = rand_tensor(&[1, 3, side, side], &mut rng);
            out.push(fd_check(
                &format!("mse[{inst}]"),
                &reg,
                None,
                false,
                tol,
                move |g, reg, _| {
                    let p = reg.node(g, id);
                    mse_loss(g, p, &target)
                },
            )?);
        }

        // full patch-encoder-integrated toy model: CE + MSE wrt all
        // parameters. The step shrinks to 1e-6 because with ~20k relu sites
        // the kink-free margin around a random evaluation point is tight.
        {
            let report = retry_instances(30, |attempt| {
                let mut reg = ParamRegistry::<f64>::new();
                let host = ToyHostModel::new(&mut reg, "host", 3, 3)?;
                let module = EpeModule::with_configs(
                    &mut reg,
                    "epe",
                    8,
                    3,
                    3,
                    EncoderConfig { channels: 4, num_blocks: 2, kernel: 3 },
                    EncoderConfig { channels: 3, num_blocks: 2, kernel: 3 },
                    EncoderConfig { channels: 2, num_blocks: 2, kernel: 3 },
                )?;
                init_params(&mut reg, seed + 10 + 1000 * attempt);
                jitter_affine_params(&mut reg, &mut rng);
                let image = Tensor::random(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
                let mut labels = LabelMap::new(16, 16, 0);
                for y in 0..16 {
                    for x in 0..16 {
                        labels.set(y, x, ((y / 5 + x / 7) % 3) as u8);
                    }
                }
                let img = image.clone();
                fd_check_at(
                    &format!("epe_full_model[{inst}]"),
                    &reg,
                    None,
                    false,
                    tol,
                    1e-6,
                    3e-5,
                    move |g, reg, _| {
                        let x = g.leaf(img.clone());
                        let features = host.forward(g, reg, x, true)?;
                        let (feature, _plan) = epe::epe_forward(g, reg, &module, &img, true)?;
                        let logits = epe::integrate(g, reg, &module, features, feature, true)?;
                        let ce = cross_entropy_loss(g, logits, &labels)?;
                        let recon = epe::reconstruct(g, reg, &module, feature)?;
                        let mse = mse_loss(g, recon, &img)?;
                        total_loss(g, ce, Some(mse), 1.0)
                    },
                )
            })?;
            out.push(report);
        }
    }
    Ok(out)
}

/// Bit-exact fold/unfold round trips over random tensors and patch sizes.
pub fn fold_suite(count: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let sizes = [1usize, 2, 4, 32];
    let mut failures = 0usize;
    for i in 0..count {
        let n = sizes[i % sizes.len()];
        let a = rng.gen_range(1..=3usize);
        let b = rng.gen_range(1..=3usize);
        let batch = rng.gen_range(1..=2usize);
        let (h, w) = (n * a, n * b);
        let img = Tensor::<f64>::random(&[batch, 1, h, w], -2.0, 2.0, &mut rng);
        if fold(&unfold(&img, n)?, h, w)? != img {
            failures += 1;
        }
        let patches = Tensor::<f64>::random(&[batch, a * b, n, n], -2.0, 2.0, &mut rng);
        if unfold(&fold(&patches, h, w)?, n)? != patches {
            failures += 1;
        }
    }
    Ok(vec![CheckReport::new(
        "fold_unfold_roundtrip",
        failures as f64,
        0.5,
        format!("{count} random tensors, n in {{1,2,4,32}}, {failures} mismatches"),
    )])
}

/// Independent brute-force KDE entropy: quantize to level centers, Silverman
/// bandwidth from the population standard deviation, then the direct
/// per-sample Gaussian sum at all 32 evaluation points and the discrete
/// Shannon sum. Written without the library's count-grouping shortcut.
pub fn kde_entropy_oracle(values: &[f64]) -> f64 {
    let m = values.len() as f64;
    let centers: Vec<f64> = values
        .iter()
        .map(|&v| {
            let lvl = ((v.clamp(0.0, 1.0) * 32.0).floor() as usize).min(31);
            (lvl as f64 + 0.5) / 32.0
        })
        .collect();
    let mean = centers.iter().sum::<f64>() / m;
    let var = centers.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / m;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return 0.0;
    }
    let h = 1.06 * sigma * m.powf(-0.2);
    let mut density = Vec::with_capacity(32);
    for k in 0..32 {
        let x = (k as f64 + 0.5) / 32.0;
        let mut sum = 0.0;
        for &c in &centers {
            let t = (x - c) / h;
            sum += (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        }
        density.push(sum / (m * h));
    }
    let total: f64 = density.iter().sum();
    let mut entropy = 0.0;
    for d in density {
        let p = d / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    entropy
}

/// Library entropy vs the brute-force oracle on random 32x32 patches, plus
/// the exact-zero contract for constant patches.
pub fn entropy_suite(patches: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut max_abs = 0.0f64;
    for i in 0..patches {
        let vals: Vec<f64> = match i % 4 {
            0 => (0..1024).map(|_| rng.gen_range(0.0..1.0)).collect(),
            1 => {
                let c: f64 = rng.gen_range(0.2..0.8);
                let a = rng.gen_range(0.01..0.2);
                (0..1024).map(|_| (c + rng.gen_range(-a..a)).clamp(0.0, 1.0)).collect()
            }
            2 => {
                let lo: f64 = rng.gen_range(0.0..0.4);
                let hi = rng.gen_range(0.6..1.0);
                (0..1024).map(|_| if rng.gen_bool(0.5) { lo } else { hi }).collect()
            }
            _ => {
                let c: f64 = rng.gen_range(0.0..1.0);
                (0..1024)
                    .map(|_| {
                        if rng.gen_bool(0.02) {
                            rng.gen_range(0.0..1.0)
                        } else {
                            c
                        }
                    })
                    .collect()
            }
        };
        let ours = entropy::patch_entropy_values(&vals)?;
        let oracle = kde_entropy_oracle(&vals);
        max_abs = max_abs.max((ours - oracle).abs());
    }
    let mut reports = vec![CheckReport::new(
        "entropy_vs_bruteforce_oracle",
        max_abs,
        1e-9,
        format!("{patches} random 32x32 patches, max |diff| {max_abs:.3e}"),
    )];

    let mut worst = 0.0f64;
    for i in 0..16 {
        let v = i as f64 / 15.0;
        worst = worst.max(entropy::patch_entropy_values(&vec![v; 1024])?.abs());
    }
    reports.push(CheckReport::new(
        "entropy_constant_patch_zero",
        worst,
        f64::MIN_POSITIVE,
        "constant patches must return exactly 0",
    ));
    Ok(reports)
}

/// Closed-form schedule and optimizer checks.
pub fn optimizer_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let cfg = TrainConfig {
        max_iter: 1000,
        ..Default::default()
    };
    let e0 = (crate::train::poly_lr(&cfg, 0)? - 1e-3).abs();
    let e_max = crate::train::poly_lr(&cfg, 1000)?.abs();
    let e_mid = (crate::train::poly_lr(&cfg, 500)? - 1e-3 * 0.5f64.powf(0.9)).abs();
    out.push(CheckReport::new(
        "poly_lr_closed_forms",
        e0.max(e_max).max(e_mid),
        1e-12,
        format!("lr(0) err {e0:.2e}, lr(max) err {e_max:.2e}, lr(max/2) err {e_mid:.2e}"),
    ));

    let mut reg = ParamRegistry::<f64>::new();
    let id = reg.register("p", Tensor::zeros(&[1]), crate::nn::ParamKind::Bias)?;
    let mut adam = AdamState::new(&reg, 0.0);
    let (g, lr) = (0.73, 0.005);
    adam.step(&mut reg, &[Some(Tensor::from_f64s(&[1], &[g])?)], lr)?;
    let expected = -lr * g / (g.abs() + adam.eps);
    let err = (reg.value(id).as_slice()[0] - expected).abs();
    out.push(CheckReport::new(
        "adam_first_step_closed_form",
        err,
        1e-12,
        format!("update {} vs closed form {expected}", reg.value(id).as_slice()[0]),
    ));
    Ok(out)
}

/// Everything, sized for the command-line gate.
pub fn all_suites() -> Result<Vec<CheckReport>> {
    let mut out = grad_suite(1)?;
    out.extend(fold_suite(40)?);
    out.extend(entropy_suite(25)?);
    out.extend(optimizer_suite()?);
    Ok(out)
}

/// A deterministic tiny model used by determinism-oriented checks.
pub fn tiny_model(seed: u64) -> Result<Model<f64>> {
    let cfg = TrainConfig {
        host_channels: 4,
        num_classes: 3,
        patch_size: 8,
        crop_size: 16,
        ..Default::default()
    };
    Model::new(Mode::Epe, &cfg, seed)
}
