use std::time::Instant;

use cardioreg_tensor::kernels::{conv3d, conv3d_backward};
use cardioreg_tensor::Tensor;

fn bench(b: usize, ci: usize, co: usize, n: usize, stride: usize) {
    let x = Tensor::<f32>::from_fn(vec![b, ci, n, n, n], |i| ((i % 7) as f32) * 0.1).unwrap();
    let k = Tensor::<f32>::from_fn(vec![co, ci, 3, 3, 3], |i| ((i % 5) as f32) * 0.01).unwrap();
    let bias = Tensor::<f32>::zeros(vec![co]).unwrap();
    let t = Instant::now();
    let y = conv3d(&x, &k, &bias, stride, 1).unwrap();
    let fwd = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let _ = conv3d_backward(&x, &k, &y, stride, 1, true).unwrap();
    let bwd = t.elapsed().as_secs_f64();
    let p: usize = y.shape()[2..].iter().product();
    let macs = (b * co * ci * 27 * p) as f64;
    println!(
        "b{b} {ci}->{co} @{n}^3 s{stride}: fwd {:.1} ms ({:.2} GMAC/s) bwd {:.1} ms",
        fwd * 1e3,
        macs / fwd / 1e9,
        bwd * 1e3
    );
}

fn main() {
    bench(4, 1, 4, 32, 1);
    bench(4, 5, 4, 32, 1);
    bench(4, 9, 8, 32, 2);
    bench(4, 8, 8, 16, 1);
    bench(4, 24, 16, 16, 2);
    bench(4, 64, 64, 4, 1);
}
