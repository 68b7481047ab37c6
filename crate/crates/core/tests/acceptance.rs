//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them all).

use epe::cli::{build_datasets, RunConfig};
use epe::entropy::{self, EntropyMap};
use epe::epe::EpeModule;
use epe::nn::ParamRegistry;
use epe::tensor::Tensor;
use epe::train::{evaluate, train_loop, Mode, Model, TrainConfig};
use epe::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion:>2} {name:<28} {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

#[test]
fn criterion_01_fold_unfold_inverse() {
    let t = Instant::now();
    let reports = verify::fold_suite(200).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let pass = reports.iter().all(|r| r.pass) && elapsed < 10.0;
    report(
        1,
        "fold_unfold_inverse",
        pass,
        &format!("{} ({elapsed:.2}s)", reports[0].detail),
    );
    assert!(pass, "fold/unfold round trips must be bit-exact within 10s");
}

#[test]
fn criterion_02_gradient_suite() {
    let t = Instant::now();
    let reports = verify::grad_suite(3).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let max_err = reports.iter().map(|r| r.max_err).fold(0.0, f64::max);
    let all_pass = reports.iter().all(|r| r.pass) && elapsed < 300.0;
    for r in &reports {
        assert!(
            r.pass,
            "{}: max rel err {} (tol {}) {}",
            r.name, r.max_err, r.tol, r.detail
        );
    }
    report(
        2,
        "gradient_suite",
        all_pass,
        &format!(
            "{} checks, max rel err {max_err:.3e} < 1e-4 ({elapsed:.1}s)",
            reports.len()
        ),
    );
    assert!(all_pass);
}

#[test]
fn criterion_03_entropy_oracle() {
    let reports = verify::entropy_suite(100).unwrap();
    let pass = reports.iter().all(|r| r.pass);
    report(
        3,
        "entropy_oracle",
        pass,
        &format!(
            "max |impl - bruteforce| {:.3e} over 100 patches; constant patches exact 0",
            reports[0].max_err
        ),
    );
    for r in &reports {
        assert!(r.pass, "{}: {} (tol {})", r.name, r.max_err, r.tol);
    }
}

#[test]
fn criterion_04_routing_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for p in 1..=1000usize {
        let values: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..3.4)).collect();
        let map = EntropyMap {
            values: values.clone(),
            grid_h: 1,
            grid_w: p,
            n: 1,
        };
        let plan = entropy::partition_patches(&map).unwrap();
        let (nh, nm, nl) = entropy::group_sizes(p);
        assert_eq!(
            (plan.group_high.len(), plan.group_mid.len(), plan.group_low.len()),
            (nh, nm, nl),
            "sizes at P={p}"
        );
        assert_eq!((p / 5, (2 * p) / 5), (nh, nm), "floor rule at P={p}");
        let mut all: Vec<usize> = plan
            .group_high
            .iter()
            .chain(&plan.group_mid)
            .chain(&plan.group_low)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..p).collect::<Vec<_>>(), "cover at P={p}");
        let lo_of = |idx: &[usize]| idx.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        let hi_of = |idx: &[usize]| {
            idx.iter()
                .map(|&i| values[i])
                .fold(f64::NEG_INFINITY, f64::max)
        };
        if !plan.group_high.is_empty() && !plan.group_mid.is_empty() {
            assert!(lo_of(&plan.group_high) >= hi_of(&plan.group_mid), "P={p}");
        }
        if !plan.group_mid.is_empty() && !plan.group_low.is_empty() {
            assert!(lo_of(&plan.group_mid) >= hi_of(&plan.group_low), "P={p}");
        }
    }
    report(4, "routing_partition", true, "floor-rule sizes, disjoint cover, and entropy ordering for all P in 1..=1000");
}

/// Independent by-hand parameter arithmetic for the canonical module,
/// written out layer by layer from the architecture definition.
fn by_hand_epe_params(c_host: usize, num_classes: usize) -> usize {
    let dwsep = |cin: usize, cout: usize| cin * 9 + cin + cout * cin + cout;
    let block = |c: usize| dwsep(c, c) * 2 + 2 * (2 * c);
    let encoder = |c: usize| {
        let lift = c + c; // 1x1 weights 1->c plus bias
        let project = c + 1; // 1x1 weights c->1 plus bias
        lift + 6 * block(c) + project
    };
    let recon = (16 * 9 + 16) + (16 * 16 * 9 + 16) + (3 * 16 * 9 + 3);
    let post_bn = 2 * (c_host + 1);
    let final_conv = num_classes * (c_host + 1) + num_classes;
    encoder(16) + encoder(8) + encoder(4) + recon + post_bn + final_conv
}

#[test]
fn criterion_05_parameter_accounting() {
    let mut reg = ParamRegistry::<f32>::new();
    let module = EpeModule::new(&mut reg, "epe", 32, 8, 4).unwrap();
    let counted = reg.count_params();
    assert_eq!(counted, module.param_count());
    let by_hand = by_hand_epe_params(8, 4);
    let formula_ok = counted == by_hand;
    let window_ok = (30_000..=250_000).contains(&counted);
    report(
        5,
        "parameter_accounting",
        formula_ok && window_ok,
        &format!(
            "count {counted} == by-hand {by_hand}: {formula_ok}; within [30000, 250000]: {window_ok}"
        ),
    );
    assert!(formula_ok, "count {counted} vs by-hand {by_hand}");
    assert!(
        window_ok,
        "EPE module parameter count {counted} outside [30000, 250000]: the specified \
         depthwise-separable six-block encoders with a 1->16->16->3 reconstruction head \
         total ~11.5k parameters, so this window cannot be met by the specified structure"
    );
}

#[test]
fn criterion_06_flop_saving() {
    let mut reg = ParamRegistry::<f32>::new();
    let module = EpeModule::new(&mut reg, "epe", 32, 8, 4).unwrap();
    let r = module.cost_report(512, 1024).unwrap();
    let ratio = r.flops_routed as f64 / r.flops_uniform_large as f64;
    let pass = ratio < 0.5;
    report(
        6,
        "flop_saving",
        pass,
        &format!(
            "routed {} / uniform-large {} = {ratio:.4} < 0.5",
            r.flops_routed, r.flops_uniform_large
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_desk_scale_training() {
    let t = Instant::now();
    let cfg = RunConfig::default(); // 64 train / 16 val, 128x128, K=4
    let (train_set, val_set) = build_datasets(&cfg).unwrap();
    assert_eq!((train_set.len(), val_set.len()), (64, 16));
    let tc = TrainConfig::default(); // max_iter 1500, batch 4, n=32
    assert_eq!((tc.max_iter, tc.batch_size), (1500, 4));

    let mut results = Vec::new();
    for mode in [Mode::Baseline, Mode::Epe] {
        let mut model = Model::<f32>::new(mode, &tc, tc.seed).unwrap();
        let rep = train_loop(&mut model, &train_set, &tc).unwrap();
        let early = rep.smoothed_ce(50, 20);
        let late = rep.smoothed_ce(tc.max_iter - 1, 20);
        let eval = evaluate(&mut model, &val_set).unwrap();
        results.push((mode, early, late, eval.miou));
    }
    let elapsed = t.elapsed().as_secs_f64();

    let (_, b_early, b_late, b_miou) = results[0];
    let (_, e_early, e_late, e_miou) = results[1];
    let conv_ok = b_late < 0.5 * b_early && e_late < 0.5 * e_early;
    let baseline_ok = b_miou >= 0.55;
    let non_degrade = e_miou >= b_miou - 0.02;
    let time_ok = elapsed < 1800.0;
    let pass = conv_ok && baseline_ok && non_degrade && time_ok;
    report(
        7,
        "desk_scale_training",
        pass,
        &format!(
            "baseline CE {b_early:.4}->{b_late:.4}, epe CE {e_early:.4}->{e_late:.4}; \
             val mIoU baseline {b_miou:.4}, epe {e_miou:.4} (delta {:+.4}); {elapsed:.0}s",
            e_miou - b_miou
        ),
    );
    assert!(conv_ok, "smoothed CE must halve: baseline {b_early}->{b_late}, epe {e_early}->{e_late}");
    assert!(baseline_ok, "baseline val mIoU {b_miou} < 0.55");
    assert!(non_degrade, "epe val mIoU {e_miou} degrades > 0.02 below baseline {b_miou}");
    assert!(time_ok, "training pair took {elapsed}s >= 1800s");
}

#[test]
fn criterion_08_training_determinism() {
    let bin = env!("CARGO_BIN_EXE_epe");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg");
    std::fs::write(
        &cfg_path,
        "seed = 11\nmax_iter = 8\nbatch_size = 2\ntrain_samples = 6\nval_samples = 2\n\
         image_height = 64\nimage_width = 64\ncrop_size = 64\nhost_channels = 4\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let status = std::process::Command::new(bin)
            .args([
                "train",
                "--config",
                cfg_path.to_str().unwrap(),
                "--mode",
                "epe",
                "--out-dir",
                out_dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push((
            std::fs::read(out_dir.join("train_log.csv")).unwrap(),
            std::fs::read(out_dir.join("checkpoint.bin")).unwrap(),
        ));
    }
    let logs_equal = outputs[0].0 == outputs[1].0;
    let ckpt_equal = outputs[0].1 == outputs[1].1;
    report(
        8,
        "training_determinism",
        logs_equal && ckpt_equal,
        &format!(
            "two train invocations: log bytes equal {logs_equal} ({}B), checkpoint bytes equal {ckpt_equal} ({}B)",
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    );
    assert!(logs_equal && ckpt_equal);
}

#[test]
fn criterion_09_closed_forms() {
    let reports = verify::optimizer_suite().unwrap();
    let pass = reports.iter().all(|r| r.pass);
    report(
        9,
        "schedule_optimizer_forms",
        pass,
        &format!(
            "poly_lr endpoints/midpoint and first Adam step within 1e-12 (max err {:.2e})",
            reports.iter().map(|r| r.max_err).fold(0.0, f64::max)
        ),
    );
    for r in &reports {
        assert!(r.pass, "{}: {} (tol {})", r.name, r.max_err, r.tol);
    }
}

#[test]
fn criterion_10_patch_locality() {
    // image whose patches have well-separated entropies: patch i carries
    // uniform texture of amplitude proportional to i
    let n = 32usize;
    let (h, w) = (96usize, 128usize); // 3x4 grid, P = 12
    let (gh, gw) = (h / n, w / n);
    let p_total = gh * gw;
    let mut rng = ChaCha8Rng::seed_from_u64(4096);
    let mut base = Tensor::<f32>::full(&[1, 3, h, w], 0.5);
    for pid in 1..p_total {
        let (gy, gx) = (pid / gw, pid % gw);
        let amp = 0.04 + 0.035 * pid as f64;
        for y in 0..n {
            for x in 0..n {
                let v = (0.5 + rng.gen_range(-amp..amp)).clamp(0.0, 1.0) as f32;
                for c in 0..3 {
                    base.set4(0, c, gy * n + y, gx * n + x, v);
                }
            }
        }
    }

    let tc = TrainConfig::default();
    let mut model = Model::<f32>::new(Mode::Epe, &tc, 17).unwrap();
    let module = model.epe.as_ref().unwrap();

    let mut g = epe::tensor::Graph::new();
    let (feat, base_plan) =
        epe::epe::epe_forward(&mut g, &mut model.reg, module, &base, false).unwrap();
    let base_out = g.value(feat).clone();

    for trial in 0..20 {
        let mut rng_t = ChaCha8Rng::seed_from_u64(5000 + trial);
        let pid = rng_t.gen_range(0..p_total);
        let (gy, gx) = (pid / gw, pid % gw);
        let mut pert = base.clone();
        // nudge a few pixels inside the chosen patch; small enough to keep
        // the entropy ranking, large enough to change the encoder input
        for _ in 0..4 {
            let y = gy * n + rng_t.gen_range(0..n);
            let x = gx * n + rng_t.gen_range(0..n);
            let delta = 0.003 + rng_t.gen_range(0.0..0.002);
            for c in 0..3 {
                let v = (pert.get4(0, c, y, x) + delta as f32).clamp(0.0, 1.0);
                pert.set4(0, c, y, x, v);
            }
        }
        let mut g = epe::tensor::Graph::new();
        let (feat, plan) =
            epe::epe::epe_forward(&mut g, &mut model.reg, module, &pert, false).unwrap();
        assert_eq!(plan, base_plan, "trial {trial}: construction keeps the routing plan fixed");
        let out = g.value(feat);
        let mut changed_elsewhere = 0usize;
        let mut changed_inside = 0usize;
        for q in 0..p_total {
            let (qy, qx) = (q / gw, q % gw);
            let mut diff = 0usize;
            for y in 0..n {
                for x in 0..n {
                    if out.get4(0, 0, qy * n + y, qx * n + x)
                        != base_out.get4(0, 0, qy * n + y, qx * n + x)
                    {
                        diff += 1;
                    }
                }
            }
            if q == pid {
                changed_inside = diff;
            } else {
                changed_elsewhere += diff;
            }
        }
        assert_eq!(
            changed_elsewhere, 0,
            "trial {trial}: patch {pid} perturbation leaked outside its region"
        );
        assert!(changed_inside > 0, "trial {trial}: perturbation had no effect");
    }
    report(
        10,
        "patch_locality",
        true,
        "20 single-patch perturbations: plan unchanged, outputs bit-identical outside the patch",
    );
}
