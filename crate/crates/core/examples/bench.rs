use epe::nn::{init_params, Conv2dLayer, ParamRegistry};
use epe::tensor::{Graph, Tensor};
use std::time::Instant;

fn main() {
    // the dominant conv in training: recon2, 16->16 3x3 on 128x128
    let mut reg = ParamRegistry::<f32>::new();
    let conv = Conv2dLayer::new(&mut reg, "c", 16, 16, 3, 1, 1, 1, true).unwrap();
    init_params(&mut reg, 1);
    let x = Tensor::<f32>::full(&[1, 16, 128, 128], 0.5);
    let macs = 128 * 128 * 16 * 16 * 9;

    let t = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let y = conv.forward(&mut g, &reg, xn).unwrap();
        std::hint::black_box(g.value(y).as_slice()[0]);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("forward: {:.3} ms, {:.2} GMAC/s", dt * 1e3, macs as f64 / dt / 1e9);

    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let y = conv.forward(&mut g, &reg, xn).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        std::hint::black_box(g.grad(xn).as_slice()[0]);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("fwd+bwd: {:.3} ms, {:.2} GMAC/s", dt * 1e3, 3.0 * macs as f64 / dt / 1e9);

    // depthwise 16ch 3x3 on 32x32, batch 16 (encoder-style)
    let mut reg = ParamRegistry::<f32>::new();
    let dw = Conv2dLayer::new(&mut reg, "d", 16, 16, 3, 1, 1, 16, true).unwrap();
    init_params(&mut reg, 1);
    let x = Tensor::<f32>::full(&[16, 16, 32, 32], 0.5);
    let macs = 16 * 32 * 32 * 16 * 9;
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let y = dw.forward(&mut g, &reg, xn).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        std::hint::black_box(g.grad(xn).as_slice()[0]);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("dw fwd+bwd: {:.3} ms, {:.2} GMAC/s", dt * 1e3, 3.0 * macs as f64 / dt / 1e9);

    // pointwise 16->16 on 32x32 batch 16
    let mut reg = ParamRegistry::<f32>::new();
    let pw = Conv2dLayer::new(&mut reg, "p", 16, 16, 1, 1, 0, 1, true).unwrap();
    init_params(&mut reg, 1);
    let macs = 16 * 32 * 32 * 16 * 16;
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let y = pw.forward(&mut g, &reg, xn).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        std::hint::black_box(g.grad(xn).as_slice()[0]);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("pw fwd+bwd: {:.3} ms, {:.2} GMAC/s", dt * 1e3, 3.0 * macs as f64 / dt / 1e9);
}
