//! Randomized sweeps returning the worst error seen, shared by the tensor
//! tests and the cross-crate acceptance run.

use cardioreg_tensor::kernels::{conv3d, fully_connected, global_avg_pool};
use cardioreg_tensor::{Tape, Tensor, Var};
use rand::Rng;

use super::*;

pub const EPS: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

fn worst(
    acc: &mut f64,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) {
    *acc = acc.max(grad_check(inputs, EPS, build));
}

pub fn conv3d_grad() -> f64 {
    let mut r = rng(10);
    let mut e = 0.0;
    for i in 0..INSTANCES {
        let stride = 1 + (i % 2) as usize;
        let pad = ((i / 2) % 2) as usize;
        let ci = r.gen_range(1..3);
        let co = r.gen_range(1..3);
        let dims = [r.gen_range(3..5), r.gen_range(3..5), r.gen_range(3..5)];
        let x = random_tensor(&mut r, &[1, ci, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let k = random_tensor(&mut r, &[co, ci, 3, 3, 3], -0.5, 0.5);
        let b = random_tensor(&mut r, &[co], -0.5, 0.5);
        worst(&mut e, &[x, k, b], |t, v| {
            let y = t.conv3d(v[0], v[1], v[2], stride, pad)?;
            weighted_sum(t, y, i)
        });
    }
    e
}

pub fn pointwise_conv3d_grad() -> f64 {
    let mut r = rng(11);
    let mut e = 0.0;
    for i in 0..INSTANCES {
        let x = random_tensor(&mut r, &[2, 3, 2, 3, 2], -1.0, 1.0);
        let k = random_tensor(&mut r, &[2, 3, 1, 1, 1], -1.0, 1.0);
        let b = random_tensor(&mut r, &[2], -1.0, 1.0);
        worst(&mut e, &[x, k, b], |t, v| {
            let y = t.conv3d(v[0], v[1], v[2], 1, 0)?;
            weighted_sum(t, y, i)
        });
    }
    e
}

pub fn fully_connected_grad() -> f64 {
    let mut r = rng(12);
    let mut e = 0.0;
    for i in 0..INSTANCES {
        let (b, n, m) = (r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..7));
        let x = random_tensor(&mut r, &[b, n], -1.0, 1.0);
        let w = random_tensor(&mut r, &[m, n], -1.0, 1.0);
        let bias = random_tensor(&mut r, &[m], -1.0, 1.0);
        worst(&mut e, &[x, w, bias], |t, v| {
            let y = t.fully_connected(v[0], v[1], v[2])?;
            weighted_sum(t, y, i)
        });
    }
    e
}

pub fn global_avg_pool_grad() -> f64 {
    let mut r = rng(13);
    let mut e = 0.0;
    for i in 0..INSTANCES {
        let h = r.gen_range(1..4);
        let x = random_tensor(&mut r, &[2, 3, 2, h, 3], -1.0, 1.0);
        worst(&mut e, &[x], |t, v| {
            let y = t.global_avg_pool(v[0])?;
            weighted_sum(t, y, i)
        });
    }
    e
}

/// Worst errors of add, mul, sigmoid, relu and scale, in that order.
pub fn elementwise_grad() -> [f64; 5] {
    let mut r = rng(14);
    let mut e = [0.0; 5];
    for i in 0..INSTANCES {
        let shape = [1, 2, 2, 3, 2];
        let a = random_away_from_zero(&mut r, &shape, 0.05);
        let b = random_tensor(&mut r, &shape, -1.0, 1.0);
        let ab = [a.clone(), b.clone()];
        worst(&mut e[0], &ab, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, i)
        });
        worst(&mut e[1], &ab, |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, i)
        });
        worst(&mut e[2], &[b.clone()], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, i)
        });
        // Entries are at least 0.05 from the kink, well beyond EPS.
        worst(&mut e[3], &[a], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, i)
        });
        worst(&mut e[4], &[b], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, i)
        });
    }
    e
}

/// Worst errors of channel- and spatially-broadcast mul and add.
pub fn broadcast_grad() -> [f64; 4] {
    let mut r = rng(15);
    let mut e = [0.0; 4];
    for i in 0..INSTANCES {
        let f = random_tensor(&mut r, &[2, 3, 2, 2, 3], -1.0, 1.0);
        let chan = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
        let spat = random_tensor(&mut r, &[2, 1, 2, 2, 3], -1.0, 1.0);
        let pairs = [
            [f.clone(), chan.clone()],
            [f.clone(), spat.clone()],
            [f.clone(), chan],
            [f, spat],
        ];
        for (k, p) in pairs.iter().enumerate() {
            worst(&mut e[k], p, |t, v| {
                let y = if k < 2 { t.mul(v[0], v[1])? } else { t.add(v[0], v[1])? };
                weighted_sum(t, y, i)
            });
        }
    }
    e
}

/// Worst errors of concat_channels, flatten and sum.
pub fn structural_grad() -> [f64; 3] {
    let mut r = rng(16);
    let mut e = [0.0; 3];
    for i in 0..INSTANCES {
        let a = random_tensor(&mut r, &[2, 2, 2, 2, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[2, 3, 2, 2, 3], -1.0, 1.0);
        worst(&mut e[0], &[a.clone(), b], |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            weighted_sum(t, y, i)
        });
        worst(&mut e[1], &[a.clone()], |t, v| {
            let y = t.flatten(v[0])?;
            weighted_sum(t, y, i)
        });
        worst(&mut e[2], &[a], |t, v| {
            let y = t.sum(v[0])?;
            t.scale(y, 0.3)
        });
    }
    e
}

pub fn l1_loss_grad() -> f64 {
    let mut r = rng(17);
    let mut e = 0.0;
    for _ in 0..INSTANCES {
        let p = random_tensor(&mut r, &[3, 6], -2.0, 2.0);
        // Keep every difference well away from the kink at zero.
        let offs = random_away_from_zero(&mut r, &[3, 6], 0.1);
        let data = p.data().iter().zip(offs.data()).map(|(a, o)| a + o).collect();
        let target = Tensor::new(vec![3, 6], data).unwrap();
        worst(&mut e, &[p, target], |t, v| t.l1_loss(v[0], v[1]));
    }
    e
}

/// Every differentiable operation with its worst gradient error.
pub fn all_op_gradients() -> Vec<(&'static str, f64)> {
    let el = elementwise_grad();
    let bc = broadcast_grad();
    let st = structural_grad();
    vec![
        ("conv3d", conv3d_grad()),
        ("conv3d 1x1x1", pointwise_conv3d_grad()),
        ("fully_connected", fully_connected_grad()),
        ("global_avg_pool", global_avg_pool_grad()),
        ("add", el[0]),
        ("mul", el[1]),
        ("sigmoid", el[2]),
        ("relu", el[3]),
        ("scale", el[4]),
        ("mul channel", bc[0]),
        ("mul spatial", bc[1]),
        ("add channel", bc[2]),
        ("add spatial", bc[3]),
        ("concat_channels", st[0]),
        ("flatten", st[1]),
        ("sum", st[2]),
        ("l1_loss", l1_loss_grad()),
    ]
}

/// conv3d against the naive loop on random shapes, strides and padding.
pub fn conv3d_oracle() -> f64 {
    let mut r = rng(2);
    let mut checked = 0;
    let mut e: f64 = 0.0;
    while checked < INSTANCES {
        let b = r.gen_range(1..3);
        let ci = r.gen_range(1..4);
        let co = r.gen_range(1..4);
        let dims: Vec<usize> = (0..3).map(|_| r.gen_range(2..7)).collect();
        let kd: Vec<usize> = (0..3).map(|_| r.gen_range(1..4)).collect();
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        if (0..3).any(|a| kd[a] > dims[a] + 2 * pad) {
            continue;
        }
        let x = random_tensor(&mut r, &[b, ci, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let k = random_tensor(&mut r, &[co, ci, kd[0], kd[1], kd[2]], -1.0, 1.0);
        let bias = random_tensor(&mut r, &[co], -1.0, 1.0);
        let got = conv3d(&x, &k, &bias, stride, pad).unwrap();
        let want = naive_conv3d(&x, &k, &bias, stride, pad);
        assert_eq!(got.shape(), want.shape());
        e = e.max(max_rel_diff(&got, &want));
        checked += 1;
    }
    e
}

pub fn fully_connected_oracle() -> f64 {
    let mut r = rng(4);
    let mut e: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (bb, n, m) = (r.gen_range(1..5), r.gen_range(1..20), r.gen_range(1..10));
        let x = random_tensor(&mut r, &[bb, n], -2.0, 2.0);
        let w = random_tensor(&mut r, &[m, n], -2.0, 2.0);
        let b = random_tensor(&mut r, &[m], -2.0, 2.0);
        let got = fully_connected(&x, &w, &b).unwrap();
        e = e.max(max_rel_diff(&got, &naive_fc(&x, &w, &b)));
    }
    e
}

pub fn global_avg_pool_oracle() -> f64 {
    let mut r = rng(5);
    let mut e: f64 = 0.0;
    for _ in 0..INSTANCES {
        let shape: Vec<usize> = vec![
            r.gen_range(1..3),
            r.gen_range(1..5),
            r.gen_range(1..5),
            r.gen_range(1..5),
            r.gen_range(1..5),
        ];
        let x = random_tensor(&mut r, &shape, -3.0, 3.0);
        e = e.max(max_rel_diff(&global_avg_pool(&x).unwrap(), &naive_pool(&x)));
    }
    e
}
