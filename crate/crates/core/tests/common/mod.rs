//! Shared fixtures and scalar oracles for the integration tests.

#![allow(dead_code)]

#[path = "../../../tensor/tests/support/mod.rs"]
pub mod support;

use cardioreg_core::dusfe::{csfe, dusfe, ssfe, DuSfeWeights, FeaturePair};
use cardioreg_core::rng_from;
use cardioreg_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use support::{grad_rel_err, random_tensor};


pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn set(store: &mut ParamStore<f64>, id: ParamId, data: Vec<f64>) {
    let shape = store.get(id).value.shape().to_vec();
    store.get_mut(id).value = Tensor::new(shape, data).unwrap();
}

pub fn module(c: usize, seed: u64) -> (ParamStore<f64>, DuSfeWeights) {
    let mut store = ParamStore::new();
    let w = DuSfeWeights::register(&mut store, "m", c, &mut rng_from(seed)).unwrap();
    (store, w)
}

pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng_from(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.numel();
        set(store, id, (0..n).map(|_| r.gen_range(-0.8..0.8)).collect());
    }
}

pub fn zero_all(store: &mut ParamStore<f64>) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.numel();
        set(store, id, vec![0.0; n]);
    }
}

pub type Branch = fn(&mut Tape<f64>, &cardioreg_tensor::Bound, &DuSfeWeights, FeaturePair) -> cardioreg_core::Result<FeaturePair>;

pub fn run(store: &ParamStore<f64>, w: &DuSfeWeights, f1: &Tensor<f64>, f2: &Tensor<f64>, op: Branch) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let a = tape.constant(f1.clone());
    let b = tape.constant(f2.clone());
    let out = op(&mut tape, &bound, w, FeaturePair { f1: a, f2: b }).unwrap();
    (tape.value(out.f1).clone(), tape.value(out.f2).clone())
}

pub fn max_diff(a: &Tensor<f64>, b: &[f64]) -> f64 {
    a.data().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of the channel branch from a scalar evaluation of
/// pooling, fusion, excitation and gating on a C = 2, 2³ instance.
pub fn csfe_hand_error() -> f64 {
    // C = 2, B = 1, spatial 2³.
    let f1: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.4).collect();
    let f2: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.2).collect();
    let w_fuse = [0.2, -0.1, 0.4, 0.3, -0.5, 0.25, 0.1, -0.2];
    let b_fuse = [0.05, -0.1];
    let w1 = [0.3, -0.6, 0.9, 0.1];
    let b1 = [0.2, -0.3];
    let w2 = [-0.4, 0.5, 0.2, 0.7];
    let b2 = [0.0, 0.15];

    let (mut store, w) = module(2, 0);
    let c = w.csfe;
    set(&mut store, c.w_fuse, w_fuse.to_vec());
    set(&mut store, c.b_fuse, b_fuse.to_vec());
    set(&mut store, c.w1, w1.to_vec());
    set(&mut store, c.b1, b1.to_vec());
    set(&mut store, c.w2, w2.to_vec());
    set(&mut store, c.b2, b2.to_vec());

    let v1: Vec<f64> = (0..2).map(|ch| f1[ch * 8..ch * 8 + 8].iter().sum::<f64>() / 8.0).collect();
    let v2: Vec<f64> = (0..2).map(|ch| f2[ch * 8..ch * 8 + 8].iter().sum::<f64>() / 8.0).collect();
    let cat = [v1[0], v1[1], v2[0], v2[1]];
    let fused: Vec<f64> = (0..2)
        .map(|i| (0..4).map(|j| w_fuse[i * 4 + j] * cat[j]).sum::<f64>() + b_fuse[i])
        .collect();
    let r = |w: &[f64; 4], b: &[f64; 2]| -> Vec<f64> {
        (0..2)
            .map(|i| w[i * 2] * fused[0] + w[i * 2 + 1] * fused[1] + b[i])
            .collect()
    };
    let (r1, r2) = (r(&w1, &b1), r(&w2, &b2));
    let want1: Vec<f64> = (0..16).map(|i| sigmoid(r1[i / 8]) * f1[i]).collect();
    let want2: Vec<f64> = (0..16).map(|i| sigmoid(r2[i / 8]) * f2[i]).collect();

    let t1 = Tensor::new(vec![1, 2, 2, 2, 2], f1).unwrap();
    let t2 = Tensor::new(vec![1, 2, 2, 2, 2], f2).unwrap();
    let (o1, o2) = run(&store, &w, &t1, &t2, csfe::<f64>);
    max_diff(&o1, &want1).max(max_diff(&o2, &want2))
}

/// Hand evaluation of the spatial branch for one batch item.
fn spatial_oracle(
    f1: &[f64],
    f2: &[f64],
    c: usize,
    n: usize,
    k_in: [&[f64]; 2],
    b_in: [f64; 2],
    k_fuse: [f64; 2],
    b_fuse: f64,
    k_out: [&[f64]; 2],
    b_out: [f64; 2],
) -> (Vec<f64>, Vec<f64>) {
    let vox = n * n * n;
    let squeeze = |f: &[f64], k: &[f64], b: f64| -> Vec<f64> {
        (0..vox).map(|v| (0..c).map(|ch| k[ch] * f[ch * vox + v]).sum::<f64>() + b).collect()
    };
    let m1 = squeeze(f1, k_in[0], b_in[0]);
    let m2 = squeeze(f2, k_in[1], b_in[1]);
    let fuse: Vec<f64> = (0..vox).map(|v| k_fuse[0] * m1[v] + k_fuse[1] * m2[v] + b_fuse).collect();
    let excite = |k: &[f64], b: f64| -> Vec<f64> {
        let mut s = vec![0.0; vox];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let mut acc = b;
                    for dz in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sx, sy, sz) = (x + dx, y + dy, z + dz);
                                if sx < 1 || sy < 1 || sz < 1 || sx > n || sy > n || sz > n {
                                    continue;
                                }
                                let src = (sx - 1) + n * ((sy - 1) + n * (sz - 1));
                                acc += k[dx + 3 * (dy + 3 * dz)] * fuse[src];
                            }
                        }
                    }
                    s[x + n * (y + n * z)] = acc;
                }
            }
        }
        s
    };
    let s1 = excite(k_out[0], b_out[0]);
    let s2 = excite(k_out[1], b_out[1]);
    let o1 = (0..c * vox).map(|i| sigmoid(s1[i % vox]) * f1[i]).collect();
    let o2 = (0..c * vox).map(|i| sigmoid(s2[i % vox]) * f2[i]).collect();
    (o1, o2)
}

/// Same for the spatial branch on a 3³ instance with `c` channels.
pub fn ssfe_hand_error(c: usize, seed: u64) -> f64 {
    let n = 3;
    let vox = 27;
    let mut r = rng_from(seed);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| r.gen_range(-1.0..1.0)).collect() };
    let f1 = draw(c * vox);
    let f2 = draw(c * vox);
    let (k_in1, k_in2) = (draw(c), draw(c));
    let (k_out1, k_out2) = (draw(27), draw(27));
    let k_fuse = draw(2);
    let b = draw(5);

    let (mut store, w) = module(c, 0);
    let s = w.ssfe;
    set(&mut store, s.k_in1, k_in1.clone());
    set(&mut store, s.k_in2, k_in2.clone());
    set(&mut store, s.b_in1, vec![b[0]]);
    set(&mut store, s.b_in2, vec![b[1]]);
    set(&mut store, s.k_fuse, k_fuse.clone());
    set(&mut store, s.b_fuse, vec![b[2]]);
    set(&mut store, s.k_out1, k_out1.clone());
    set(&mut store, s.k_out2, k_out2.clone());
    set(&mut store, s.b_out1, vec![b[3]]);
    set(&mut store, s.b_out2, vec![b[4]]);

    let (want1, want2) = spatial_oracle(
        &f1,
        &f2,
        c,
        n,
        [&k_in1, &k_in2],
        [b[0], b[1]],
        [k_fuse[0], k_fuse[1]],
        b[2],
        [&k_out1, &k_out2],
        [b[3], b[4]],
    );
    let t1 = Tensor::new(vec![1, c, 3, 3, 3], f1).unwrap();
    let t2 = Tensor::new(vec![1, c, 3, 3, 3], f2).unwrap();
    let (o1, o2) = run(&store, &w, &t1, &t2, ssfe::<f64>);
    max_diff(&o1, &want1).max(max_diff(&o2, &want2))
}

/// Central differences over every module parameter.
pub fn dusfe_param_grad_error(seed: u64) -> f64 {
    let mut r = rng_from(seed);
    let c = r.gen_range(1..3);
    let shape = [1, c, r.gen_range(2..4), r.gen_range(2..4), r.gen_range(2..4)];
    let (mut store, w) = module(c, seed);
    randomize(&mut store, seed + 1);
    let f1 = random_tensor(&mut r, &shape, -1.0, 1.0);
    let f2 = random_tensor(&mut r, &shape, -1.0, 1.0);
    let loss_of = |store: &ParamStore<f64>, tape: &mut Tape<f64>| -> (Var, cardioreg_tensor::Bound) {
        let bound = store.bind(tape);
        let a = tape.constant(f1.clone());
        let b = tape.constant(f2.clone());
        let out = dusfe(tape, &bound, &w, FeaturePair { f1: a, f2: b }).unwrap();
        let s1 = support::weighted_sum(tape, out.f1, 1).unwrap();
        let s2 = support::weighted_sum(tape, out.f2, 2).unwrap();
        (tape.add(s1, s2).unwrap(), bound)
    };
    let mut tape = Tape::new();
    let (loss, bound) = loss_of(&store, &mut tape);
    let mut grads = tape.backward(loss).unwrap();
    let analytic = store.collect_grads(&bound, &mut grads);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = analytic[k].as_ref().expect("every parameter receives a gradient");
        for i in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data()[i];
            let mut eval = |v: f64| {
                store.get_mut(id).value.data_mut()[i] = v;
                let mut t = Tape::new();
                let (l, _) = loss_of(&store, &mut t);
                t.value(l).item().unwrap()
            };
            let numeric = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps);
            store.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(grad_rel_err(g.data()[i], numeric));
        }
    }
    worst
}


pub const SMOOTH_SIGMA: f64 = 3.0;

/// Noiseless `n/2`-extent attenuation phantom centred in an `n`³ grid, so
/// in-range motions never push tissue out of the field of view, blurred to
/// be band-limited at the voxel scale.
pub fn smooth_test_volume(n: usize) -> cardioreg_core::Volume {
    let sharp = sharp_test_volume(n);
    let d: Vec<f64> = sharp.data().iter().map(|&x| x as f64).collect();
    let b = cardioreg_core::phantom::gaussian_blur(&d, sharp.dims(), SMOOTH_SIGMA);
    cardioreg_core::Volume::new(
        sharp.dims(),
        sharp.spacing_mm(),
        sharp.modality(),
        b.into_iter().map(|x| x as f32).collect(),
    )
    .unwrap()
}

/// Same phantom without the blur: piecewise constant with sharp edges.
pub fn sharp_test_volume(n: usize) -> cardioreg_core::Volume {
    let h = n / 2;
    let mut cfg = cardioreg_core::PhantomConfig::for_dims([h; 3]);
    cfg.noise_level = 0.0;
    let small = cardioreg_core::generate_phantom(&cfg).unwrap().0;
    let off = (n - h) / 2;
    let mut data = vec![0.0f32; n * n * n];
    for z in 0..h {
        for y in 0..h {
            for x in 0..h {
                data[(x + off) + n * ((y + off) + n * (z + off))] = small.get(x, y, z);
            }
        }
    }
    cardioreg_core::Volume::new([n; 3], small.spacing_mm(), small.modality(), data).unwrap()
}

/// NMAE of `x` against `reference` over voxels at least `margin` from
/// every face.
pub fn interior_nmae(x: &cardioreg_core::Volume, reference: &cardioreg_core::Volume, margin: usize) -> f64 {
    let [nx, ny, nz] = reference.dims();
    let (mut num, mut den) = (0.0, 0.0);
    for z in margin..nz - margin {
        for y in margin..ny - margin {
            for x_ in margin..nx - margin {
                let r = reference.get(x_, y, z) as f64;
                num += (x.get(x_, y, z) as f64 - r).abs();
                den += r.abs();
            }
        }
    }
    num / den
}

/// Largest deviation from `0.5·F` (each branch) and `2F` (the module) of a
/// freshly initialized module, whose excitation layers start at zero.
pub fn zero_gate_error(seed: u64) -> f64 {
    let mut r = rng_from(seed);
    let c = r.gen_range(1..5);
    let shape = [r.gen_range(1..3), c, r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5)];
    let (store, w) = module(c, seed);
    let f1 = random_tensor(&mut r, &shape, -2.0, 2.0);
    let f2 = random_tensor(&mut r, &shape, -2.0, 2.0);
    let scaled = |f: &Tensor<f64>, k: f64| -> Vec<f64> { f.data().iter().map(|x| k * x).collect() };
    let mut worst: f64 = 0.0;
    for op in [csfe::<f64> as Branch, ssfe::<f64>] {
        let (o1, o2) = run(&store, &w, &f1, &f2, op);
        worst = worst.max(max_diff(&o1, &scaled(&f1, 0.5))).max(max_diff(&o2, &scaled(&f2, 0.5)));
    }
    let (o1, o2) = run(&store, &w, &f1, &f2, dusfe::<f64>);
    worst.max(max_diff(&o1, &scaled(&f1, 2.0))).max(max_diff(&o2, &scaled(&f2, 2.0)))
}

/// Runs all three ops on `n` random shapes with random weights and counts
/// outputs whose shape changed or whose branch gate left (0, 1).
pub fn shape_and_gate_violations(n: u64) -> usize {
    let mut r = rng_from(11);
    let mut bad = 0;
    for k in 0..n {
        let c = r.gen_range(1..4);
        let shape = [r.gen_range(1..3), c, r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5)];
        let (mut store, w) = module(c, k);
        randomize(&mut store, 100 + k);
        let f1 = random_tensor(&mut r, &shape, -3.0, 3.0);
        let f2 = random_tensor(&mut r, &shape, -3.0, 3.0);
        for op in [csfe::<f64> as Branch, ssfe::<f64>, dusfe::<f64>] {
            let (o1, o2) = run(&store, &w, &f1, &f2, op);
            bad += [&o1, &o2].iter().filter(|o| o.shape() != shape).count();
        }
        for op in [csfe::<f64> as Branch, ssfe::<f64>] {
            let (o1, o2) = run(&store, &w, &f1, &f2, op);
            for (o, f) in [(&o1, &f1), (&o2, &f2)] {
                for (y, x) in o.data().iter().zip(f.data()) {
                    let gate_ok = if *x == 0.0 { *y == 0.0 } else { y / x > 0.0 && y / x < 1.0 };
                    if !gate_ok {
                        bad += 1;
                    }
                }
            }
        }
    }
    bad
}

/// Gradient of the module output with respect to both feature maps.
pub fn dusfe_input_grad_error(seed: u64) -> f64 {
    let (mut store, w) = module(2, seed);
    randomize(&mut store, seed + 1);
    let mut r = rng_from(seed + 2);
    let f1 = random_tensor(&mut r, &[1, 2, 2, 3, 2], -1.0, 1.0);
    let f2 = random_tensor(&mut r, &[1, 2, 2, 3, 2], -1.0, 1.0);
    support::grad_check(&[f1, f2], 1e-4, |tape, v| {
        let bound = store.bind_with(tape, false);
        let out = dusfe(tape, &bound, &w, FeaturePair { f1: v[0], f2: v[1] }).unwrap();
        let s1 = support::weighted_sum(tape, out.f1, 3)?;
        let s2 = support::weighted_sum(tape, out.f2, 4)?;
        tape.add(s1, s2)
    })
}

/// Asymmetric pattern with distinct values everywhere.
pub fn pattern_volume(n: usize) -> cardioreg_core::Volume {
    let data = (0..n * n * n)
        .map(|i| {
            let (x, y, z) = (i % n, (i / n) % n, i / (n * n));
            (1 + x + 3 * y * y + 7 * z + (x * y * z) % 5) as f32 * 0.01
        })
        .collect();
    cardioreg_core::Volume::new([n; 3], [6.8; 3], cardioreg_core::Modality::MuMap, data).unwrap()
}

/// Largest interior deviation of 90° turns about each axis from the
/// corresponding index permutation. Output voxel q samples the source at
/// R⁻¹ q about the center.
pub fn quarter_turn_error(n: usize) -> f64 {
    use cardioreg_core::{params_to_matrix, resample, RigidParams};
    let src = pattern_volume(n);
    let m = n - 1;
    let turn = |ax, ay, az| RigidParams { ax, ay, az, ..RigidParams::ZERO };
    type Perm = fn(usize, usize, usize, usize) -> [usize; 3];
    let cases: [(RigidParams, Perm); 3] = [
        (turn(0.0, 0.0, 90.0), |x, y, z, m| [y, m - x, z]),
        (turn(90.0, 0.0, 0.0), |x, y, z, m| [x, z, m - y]),
        (turn(0.0, 90.0, 0.0), |x, y, z, m| [m - z, y, x]),
    ];
    let mut worst: f64 = 0.0;
    for (p, perm) in cases {
        let out = resample(&src, &params_to_matrix(p, [n; 3])).unwrap();
        for z in 1..m {
            for y in 1..m {
                for x in 1..m {
                    let [a, b, c] = perm(x, y, z, m);
                    worst = worst.max((out.get(x, y, z) - src.get(a, b, c)).abs() as f64);
                }
            }
        }
    }
    worst
}

/// Worst interior NMAE (margin 3) of forward-then-inverse resampling over
/// `draws` full-range motions.
pub fn round_trip_worst(v: &cardioreg_core::Volume, draws: usize, seed: u64) -> f64 {
    use cardioreg_core::{invert, params_to_matrix, resample, sample_params, MotionRanges};
    let mut rng = rng_from(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let p = sample_params(&MotionRanges::default(), &mut rng);
        let moved = resample(v, &params_to_matrix(p, v.dims())).unwrap();
        let back = resample(&moved, &invert(p, v.dims())).unwrap();
        worst = worst.max(interior_nmae(&back, v, 3));
    }
    worst
}
