//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the kernels under test except to evaluate a loss
//! for finite differences.
#![allow(dead_code)]

pub mod sweeps;

use cardioreg_tensor::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi)).unwrap()
}

/// Random values with magnitude at least `gap`, keeping samples away from
/// kinks such as `relu` at zero.
pub fn random_away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

/// Direct cross-correlation with zero padding.
pub fn naive_conv3d(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let s = input.shape();
    let k = kernel.shape();
    let (b, ci, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (co, kd, kh, kw) = (k[0], k[2], k[3], k[4]);
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = input.data();
    let kk = kernel.data();
    let mut out = vec![0.0; b * co * od * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.data()[o];
                        for c in 0..ci {
                            for i in 0..kd {
                                for j in 0..kh {
                                    for l in 0..kw {
                                        let iz = (z * stride + i) as isize - pad as isize;
                                        let iy = (y * stride + j) as isize - pad as isize;
                                        let ix = (xo * stride + l) as isize - pad as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        acc += x[(((n * ci + c) * d + iz) * h + iy) * w + ix]
                                            * kk[(((o * ci + c) * kd + i) * kh + j) * kw + l];
                                    }
                                }
                            }
                        }
                        out[(((n * co + o) * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, od, oh, ow], out).unwrap()
}

pub fn naive_fc(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[0];
    let mut out = vec![0.0; b * m];
    for i in 0..b {
        for j in 0..m {
            let mut acc = bias.data()[j];
            for k in 0..n {
                acc += weight.data()[j * n + k] * input.data()[i * n + k];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![b, m], out).unwrap()
}

pub fn naive_pool(input: &Tensor<f64>) -> Tensor<f64> {
    let s = input.shape();
    let (b, c) = (s[0], s[1]);
    let vol: usize = s[2..].iter().product();
    let mut out = vec![0.0; b * c];
    for n in 0..b {
        for ch in 0..c {
            let mut acc = 0.0;
            for v in 0..vol {
                acc += input.data()[(n * c + ch) * vol + v];
            }
            out[n * c + ch] = acc / vol as f64;
        }
    }
    Tensor::new(vec![b, c], out).unwrap()
}

/// Largest elementwise `|a - b| / max(|b|, 1)`.
pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Denominator floor for gradient relative errors; below it the comparison
/// is effectively absolute.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares tape gradients of `build` against central finite differences.
///
/// Every input is registered as a tracked leaf. Returns the largest relative
/// error over all input elements.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).item().unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let mut grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()).unwrap());
        assert_eq!(analytic.shape(), inputs[k].shape(), "gradient shape");
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(grad_rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// `sum(x * w)` for a fixed random weighting `w`, so every output element
/// contributes a distinct coefficient to the loss.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed);
    let w = tape.constant(random_tensor(&mut r, &shape, -1.0, 1.0));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}
