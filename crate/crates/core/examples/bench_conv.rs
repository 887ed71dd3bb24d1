//! Scratch conv micro-benchmark (temporary, removed before release).

use std::time::Instant;

use cloudseg::kernels::{conv_backward_data, conv_backward_kernel, conv_forward};

fn bench_shape(name: &str, n: usize, h: usize, w: usize, cin: usize, kh: usize, kw: usize, cout: usize) {
    let x: Vec<f64> = (0..n * h * w * cin).map(|i| (i % 17) as f64 * 0.1 - 0.8).collect();
    let k: Vec<f64> = (0..kh * kw * cin * cout).map(|i| (i % 13) as f64 * 0.05 - 0.3).collect();
    let b = vec![0.1; cout];
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    let g: Vec<f64> = (0..n * ho * wo * cout).map(|i| (i % 11) as f64 * 0.1 - 0.5).collect();
    let macs = (n * ho * wo * kh * kw * cin * cout) as f64;

    let reps = (2e9 / macs).clamp(3.0, 2000.0) as usize;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        let out = conv_forward(&x, n, h, w, cin, &k, kh, kw, cout, &b);
        sink += out[0];
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t1 = Instant::now();
    for _ in 0..reps {
        let dx = conv_backward_data(&g, n, ho, wo, cout, &k, kh, kw, cin, h, w);
        sink += dx[0];
    }
    let bwd_data = t1.elapsed().as_secs_f64() / reps as f64;

    let t2 = Instant::now();
    for _ in 0..reps {
        let (dk, _db) = conv_backward_kernel(&g, &x, n, h, w, cin, kh, kw, cout);
        sink += dk[0];
    }
    let bwd_k = t2.elapsed().as_secs_f64() / reps as f64;

    println!(
        "{name:28} fwd {:6.2} G/s   bwd_data {:6.2} G/s   bwd_kernel {:6.2} G/s   (sink {sink:.3e})",
        macs / fwd / 1e9,
        macs / bwd_data / 1e9,
        macs / bwd_k / 1e9
    );
}

fn main() {
    // Segmenter shapes at desk scale, batch 10 (padded dims for Same convs).
    bench_shape("b1c1 66x98x2 -> 4", 10, 66, 98, 2, 3, 3, 4);
    bench_shape("b1c2 66x98x4 -> 4", 10, 66, 98, 4, 3, 3, 4);
    bench_shape("b2c2 34x50x8 -> 8", 10, 34, 50, 8, 3, 3, 8);
    bench_shape("b3c2 18x26x16 -> 16", 10, 18, 26, 16, 3, 3, 16);
    bench_shape("b4c2 10x14x32 -> 32", 10, 10, 14, 32, 3, 3, 32);
    bench_shape("up1c1 18x26x32 -> 16", 10, 18, 26, 32, 3, 3, 16);
    bench_shape("up2c1 34x50x16 -> 8", 10, 34, 50, 16, 3, 3, 8);
    bench_shape("up3c1 66x98x8 -> 4", 10, 66, 98, 8, 3, 3, 4);
    bench_shape("up3c2 66x98x4 -> 4", 10, 66, 98, 4, 3, 3, 4);
    bench_shape("boundary 67x96x2 -> 2 4x1", 10, 67, 96, 2, 4, 1, 2);
    bench_shape("flatten 2x3x64 -> 512", 10, 2, 3, 64, 2, 3, 512);
    bench_shape("cls b5c2 4x6x64 -> 64", 10, 6, 8, 64, 3, 3, 64);
}
