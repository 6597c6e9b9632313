use std::time::Instant;
use vqsf::autodiff::{Graph, Tensor};

fn bench_conv(ci: usize, co: usize, side: usize, k: usize, stride: usize, pad: usize, iters: usize) {
    let x = Tensor::<f32>::from_f64s(vec![ci, side, side, side], &vec![0.5; ci*side*side*side]);
    let w = Tensor::<f32>::from_f64s(vec![co, ci, k, k, k], &vec![0.1; co*ci*k*k*k]);
    let b = Tensor::<f32>::from_f64s(vec![co], &vec![0.0; co]);
    let out_side = (side + 2*pad - k)/stride + 1;
    let flops = 2.0 * (co*ci*k*k*k*out_side*out_side*out_side) as f64;
    // forward only
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::<f32>::new().with_finite_checks(false);
        let xi = g.input(x.clone(), false).unwrap();
        let wi = g.input(w.clone(), false).unwrap();
        let bi = g.input(b.clone(), false).unwrap();
        let _y = g.conv3d(xi, wi, Some(bi), stride, pad).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("conv {ci}->{co} side{side} k{k}s{stride}: {:.1}ms fwd, {:.2} GFLOP/s", dt*1e3, flops/dt/1e9);
    // with backward
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::<f32>::new().with_finite_checks(false);
        let xi = g.input(x.clone(), true).unwrap();
        let wi = g.input(w.clone(), true).unwrap();
        let bi = g.input(b.clone(), true).unwrap();
        let y = g.conv3d(xi, wi, Some(bi), stride, pad).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("  fwd+bwd: {:.1}ms, {:.2} GFLOP/s effective", dt*1e3, 3.0*flops/dt/1e9);
}

fn main() {
    bench_conv(32, 24, 16, 3, 1, 1, 20);
    bench_conv(24, 16, 32, 1, 1, 0, 20);
    bench_conv(32, 32, 8, 3, 1, 1, 50);
    bench_conv(128, 128, 2, 3, 1, 1, 50);
    bench_conv(32, 32, 16, 2, 2, 0, 50);
    // matmul
    let a = Tensor::<f32>::from_f64s(vec![2048, 19], &vec![0.3; 2048*19]);
    let w = Tensor::<f32>::from_f64s(vec![19, 64], &vec![0.2; 19*64]);
    let t0 = Instant::now();
    for _ in 0..100 {
        let mut g = Graph::<f32>::new().with_finite_checks(false);
        let ai = g.input(a.clone(), false).unwrap();
        let wi = g.input(w.clone(), false).unwrap();
        let _ = g.matmul(ai, wi).unwrap();
    }
    println!("matmul 2048x19x64: {:.2}ms", t0.elapsed().as_secs_f64()/100.0*1e3);
}
