//! Micro-timings of hot paths at real model shapes.

use icegan_core::kernels::{self, ConvGeom};
use icegan_core::tape::Tape;
use std::time::Instant;

fn time<F: FnMut()>(name: &str, reps: usize, mut f: F) {
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{name}: {:.1} ms/rep", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    icegan_core::tune_allocator();
    let b = 16;
    // D conv4: 256->512 k4 s1 on 16x16
    let (ci, h, w, co) = (256, 16, 16, 512);
    let g = ConvGeom { kernel: 4, stride: 1, pad: 1 };
    let x = vec![0.5; b * ci * h * w];
    let wt = vec![0.01; co * ci * 16];
    let ho = g.conv_out(h).unwrap();
    let wo = g.conv_out(w).unwrap();
    let mut y = vec![0.0; b * co * ho * wo];
    time("conv4 fwd (batch16)", 3, || {
        kernels::conv2d_forward(&x, b, ci, h, w, &wt, co, g, &mut y);
    });
    let mut dx = vec![0.0; x.len()];
    time("conv4 bwd-data", 3, || {
        dx.fill(0.0);
        kernels::conv2d_backward_data(&y, b, ci, h, w, &wt, co, g, &mut dx);
    });
    let mut dw = vec![0.0; wt.len()];
    time("conv4 bwd-weights", 3, || {
        dw.fill(0.0);
        kernels::conv2d_backward_weights(&y, &x, b, ci, h, w, co, g, &mut dw);
    });

    // D conv2: 64->128 k4 s2 on 64x64
    let (ci2, h2, w2, co2) = (64, 64, 64, 128);
    let g2 = ConvGeom { kernel: 4, stride: 2, pad: 1 };
    let x2 = vec![0.5; b * ci2 * h2 * w2];
    let wt2 = vec![0.01; co2 * ci2 * 16];
    let mut y2 = vec![0.0; b * co2 * 32 * 32];
    time("conv2 fwd", 3, || {
        kernels::conv2d_forward(&x2, b, ci2, h2, w2, &wt2, co2, g2, &mut y2);
    });
    let mut dw2 = vec![0.0; wt2.len()];
    time("conv2 bwd-weights", 3, || {
        dw2.fill(0.0);
        kernels::conv2d_backward_weights(&y2, &x2, b, ci2, h2, w2, co2, g2, &mut dw2);
    });

    // bias add [16,512,15,15] + [512,1,1] on tape, with backward
    let mut tape = Tape::new();
    let xb = tape.leaf_data(vec![b, co, 15, 15], vec![0.3; b * co * 225], true);
    let bias = tape.leaf_data(vec![co, 1, 1], vec![0.1; co], true);
    time("bias add fwd (tape)", 10, || {
        let _ = tape.add(xb, bias).unwrap();
    });
    let mut tape2 = Tape::new();
    let xb2 = tape2.leaf_data(vec![b, co, 15, 15], vec![0.3; b * co * 225], true);
    let bias2 = tape2.leaf_data(vec![co, 1, 1], vec![0.1; co], true);
    let s = tape2.add(xb2, bias2).unwrap();
    let sq = tape2.square(s);
    let l = tape2.sum(sq);
    time("bias add bwd (tape)", 5, || {
        tape2.backward(l).unwrap();
    });

    // leaf binding copy cost at model scale: 42M params
    let big = vec![0.5; 42_000_000];
    time("42M leaf copy", 3, || {
        let mut t = Tape::new();
        let _ = t.leaf_data(vec![big.len()], big.clone(), false);
    });
}
