//! Reference implementations written independently of the library, shared by
//! the integration tests and the acceptance suite. Everything here is
//! deliberately naive.
#![allow(dead_code)]

use std::collections::HashMap;

use maod_core::graph::{Graph, NodeId};
use maod_core::tensor::{ConvMode, ConvSpec, DropoutMode, Tensor};
use maod_core::{Result, Rng};
use rand::{Rng as _, SeedableRng};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const SHAPES_PER_KERNEL: usize = 50;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, falling back to the absolute difference when
/// both vectors vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Largest relative error, over all inputs, between the tape gradient and
/// central differences of `Σ r ⊙ f(inputs)` for a random fixed `r`.
pub fn check_gradient(inputs: &[Tensor], build: &Build, rng: &mut Rng) -> f64 {
    let forward = |values: &[Tensor], mask: Option<&[f64]>| -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.variable(v.clone())).collect();
        let mut out = build(&mut g, &ids).expect("forward pass");
        if let Some(m) = mask {
            out = g.apply_mask(out, m.to_vec()).unwrap();
            out = g.sum(out).unwrap();
        }
        (g, ids, out)
    };
    let (g, _, out) = forward(inputs, None);
    let mask: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss_at = |values: &[Tensor]| {
        let (g, _, l) = forward(values, Some(&mask));
        g.value(l).data()[0]
    };

    let (g, ids, loss) = forward(inputs, Some(&mask));
    let grads = g.backward(loss).expect("backward pass");
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).expect("gradient for every variable").data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut values = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&values);
            values[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&values);
            values[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

pub const KERNELS: [&str; 17] = [
    "conv2d_standard",
    "conv2d_depthwise",
    "conv2d_pointwise",
    "separable_block",
    "add_channel_bias",
    "linear",
    "relu",
    "sigmoid",
    "softmax",
    "global_avg_pool",
    "dropout",
    "apply_mask",
    "add",
    "reshape",
    "sum_mean",
    "weighted_ce",
    "squared_error",
];

fn spatial(k: usize, rng: &mut Rng) -> usize {
    rng.random_range(k.max(2)..=k.max(2) + 4)
}

/// Values bounded away from the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut Rng) -> Tensor {
    uniform(shape, -1.0, 1.0, rng).map(|v| if v.abs() < 0.05 { v + 0.1 * v.signum() } else { v })
}

/// Draws one random shape for `kernel` and returns the gradient error.
pub fn kernel_error(kernel: &str, rng: &mut Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let o = rng.random_range(1..=3);
    let (inputs, build): (Vec<Tensor>, Box<Build>) = match kernel {
        "conv2d_standard" | "conv2d_depthwise" | "conv2d_pointwise" => {
            let k = if kernel == "conv2d_pointwise" { 1 } else { [1, 2, 3, 5][rng.random_range(0..4)] };
            let mut spec = match kernel {
                "conv2d_standard" => ConvSpec::standard(c, o, k),
                "conv2d_depthwise" => {
                    let mut s = ConvSpec::depthwise(c, k, 1);
                    s.out_channels = c * rng.random_range(1..=2);
                    s
                }
                _ => ConvSpec::pointwise(c, o),
            };
            spec = spec
                .with_stride(rng.random_range(1..=2))
                .with_padding(rng.random_range(0..=k / 2));
            let (h, w) = (spatial(k, rng), spatial(k, rng));
            let x = uniform(&[c, h, w], -1.0, 1.0, rng);
            let wt = uniform(&spec.weight_shape(), -1.0, 1.0, rng);
            (vec![x, wt], Box::new(move |g, v| g.conv2d(v[0], v[1], &spec)))
        }
        "separable_block" => {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let (h, w) = (spatial(k, rng), spatial(k, rng));
            let dw = ConvSpec::depthwise(c, k, stride);
            let pw = ConvSpec::pointwise(c, o);
            let inputs = vec![
                uniform(&[c, h, w], -1.0, 1.0, rng),
                uniform(&dw.weight_shape(), -1.0, 1.0, rng),
                uniform(&pw.weight_shape(), -1.0, 1.0, rng),
                uniform(&[o], -1.0, 1.0, rng),
            ];
            (
                inputs,
                Box::new(move |g, v| {
                    let mid = g.conv2d(v[0], v[1], &dw)?;
                    let out = g.conv2d(mid, v[2], &pw)?;
                    g.add_channel_bias(out, v[3])
                }),
            )
        }
        "add_channel_bias" => {
            let shape = if rng.random_bool(0.5) {
                vec![c, spatial(1, rng), spatial(1, rng)]
            } else {
                vec![c]
            };
            let inputs = vec![uniform(&shape, -1.0, 1.0, rng), uniform(&[c], -1.0, 1.0, rng)];
            (inputs, Box::new(|g, v| g.add_channel_bias(v[0], v[1])))
        }
        "linear" => {
            let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=6));
            let inputs = vec![
                uniform(&[n], -1.0, 1.0, rng),
                uniform(&[m, n], -1.0, 1.0, rng),
                uniform(&[m], -1.0, 1.0, rng),
            ];
            (inputs, Box::new(|g, v| g.linear(v[0], v[1], v[2])))
        }
        "relu" => {
            let x = off_kink(&[c, spatial(1, rng), spatial(1, rng)], rng);
            (vec![x], Box::new(|g, v| g.relu(v[0])))
        }
        "sigmoid" => {
            let x = uniform(&[rng.random_range(1..=20)], -4.0, 4.0, rng);
            (vec![x], Box::new(|g, v| g.sigmoid(v[0])))
        }
        "softmax" => {
            let x = uniform(&[rng.random_range(1..=12)], -3.0, 3.0, rng);
            (vec![x], Box::new(|g, v| g.softmax(v[0])))
        }
        "global_avg_pool" => {
            let x = uniform(&[c, spatial(1, rng), spatial(1, rng)], -1.0, 1.0, rng);
            (vec![x], Box::new(|g, v| g.global_avg_pool(v[0])))
        }
        "dropout" => {
            let x = uniform(&[rng.random_range(1..=30)], -1.0, 1.0, rng);
            let p = rng.random_range(0.05..0.6);
            let seed: u64 = rng.random();
            (
                vec![x],
                Box::new(move |g, v| g.dropout(v[0], p, DropoutMode::Train, &mut Rng::seed_from_u64(seed))),
            )
        }
        "apply_mask" => {
            let n = rng.random_range(1..=30);
            let mask: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = uniform(&[n], -1.0, 1.0, rng);
            (vec![x], Box::new(move |g, v| g.apply_mask(v[0], mask.clone())))
        }
        "add" => {
            let shape = [c, spatial(1, rng), spatial(1, rng)];
            let inputs = vec![uniform(&shape, -1.0, 1.0, rng), uniform(&shape, -1.0, 1.0, rng)];
            (inputs, Box::new(|g, v| g.add(v[0], v[1])))
        }
        "reshape" => {
            let shape = [c, spatial(1, rng), spatial(1, rng)];
            let flat = shape.iter().product::<usize>();
            let x = uniform(&shape, -1.0, 1.0, rng);
            (
                vec![x],
                Box::new(move |g, v| {
                    let r = g.reshape(v[0], &[flat])?;
                    // A nonlinearity after the reshape makes index mix-ups visible.
                    g.sigmoid(r)
                }),
            )
        }
        "sum_mean" => {
            let k = rng.random_range(1..=5);
            let inputs: Vec<Tensor> = (0..k)
                .map(|_| uniform(&[rng.random_range(1..=6)], -1.0, 1.0, rng))
                .collect();
            (
                inputs,
                Box::new(|g, v| {
                    let sums = v
                        .iter()
                        .map(|&x| {
                            let s = g.sigmoid(x)?;
                            g.sum(s)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    g.mean(&sums)
                }),
            )
        }
        "weighted_ce" => {
            let n = rng.random_range(2..=16);
            let mut target: Vec<f64> = (0..n)
                .map(|_| if rng.random_bool(0.4) { rng.random_range(0.0..1.0) } else { 0.0 })
                .collect();
            target[rng.random_range(0..n)] += 0.5;
            let total: f64 = target.iter().sum();
            target.iter_mut().for_each(|t| *t /= total);
            let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
            let x = uniform(&[n], -3.0, 3.0, rng);
            (vec![x], Box::new(move |g, v| g.weighted_ce(v[0], &target, &alpha)))
        }
        "squared_error" => {
            let n = rng.random_range(1..=8);
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let x = uniform(&[n], 0.0, 1.0, rng);
            (vec![x], Box::new(move |g, v| g.squared_error(v[0], &target)))
        }
        other => panic!("unknown kernel {other}"),
    };
    check_gradient(&inputs, &*build, rng)
}

/// Worst error over `shapes` random shapes of one kernel.
pub fn kernel_worst(kernel: &str, shapes: usize, seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    (0..shapes).map(|_| kernel_error(kernel, &mut rng)).fold(0.0, f64::max)
}

/// Direct summation over every output position and kernel tap.
pub fn conv_naive(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Tensor {
    let &[c, h, wd] = x.shape() else { panic!("rank-3 input") };
    let groups = if spec.mode == ConvMode::Depthwise { c } else { 1 };
    let (k, s, p, o) = (spec.kernel_size, spec.stride, spec.padding as isize, spec.out_channels);
    let cin = c / groups;
    let cout = o / groups;
    let oh = (h + 2 * spec.padding - k) / s + 1;
    let ow = (wd + 2 * spec.padding - k) / s + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        let group = oc / cout;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    let ic = group * cin + ci;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p;
                            let ix = (ox * s + kx) as isize - p;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(ic * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((oc * cin + ci) * k + ky) * k + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

/// Per-channel spatial filtering, then a per-pixel `O×C` matrix product.
pub fn separable_two_stage(x: &Tensor, dw: &Tensor, pw: &Tensor, stride: usize, padding: usize) -> Tensor {
    let &[c, h, wd] = x.shape() else { panic!("rank-3 input") };
    let k = dw.shape()[2];
    let o = pw.shape()[0];
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let mut mid = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                            acc += x.data()[(ch * h + iy as usize) * wd + ix as usize]
                                * dw.data()[(ch * k + ky) * k + kx];
                        }
                    }
                }
                mid[(ch * oh + oy) * ow + ox] = acc;
            }
        }
    }
    let mut out = vec![0.0; o * oh * ow];
    for pix in 0..oh * ow {
        for oc in 0..o {
            out[oc * oh * ow + pix] = (0..c).map(|ch| pw.data()[oc * c + ch] * mid[ch * oh * ow + pix]).sum();
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

/// Weights of a standard `K×K` convolution plus those of its separable
/// replacement, counted tensor by tensor.
pub fn counted_params(c: usize, o: usize, k: usize) -> (usize, usize) {
    let standard = o * c * k * k;
    let depthwise = c * k * k;
    let pointwise = o * c;
    (standard, depthwise + pointwise)
}

/// `−log softmax(o)_t` via `log Σ exp(o_i − o_t)`.
pub fn plain_ce(logits: &[f64], target: usize) -> f64 {
    logits.iter().map(|&o| (o - logits[target]).exp()).sum::<f64>().ln()
}

pub fn fine_loss_by_hand(p: [f64; 4], t: [f64; 4]) -> f64 {
    let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2], p[3] - t[3]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + d[3] * d[3]
}

/// Largest assignment found by exhaustive search over which target, if any,
/// each prediction takes (memoized on the set of used targets).
pub fn brute_force_matching(np: usize, nt: usize, compat: &dyn Fn(usize, usize) -> bool) -> usize {
    assert!(nt <= 64);
    fn go(
        p: usize,
        used: u64,
        np: usize,
        nt: usize,
        compat: &dyn Fn(usize, usize) -> bool,
        memo: &mut HashMap<(usize, u64), usize>,
    ) -> usize {
        if p == np {
            return 0;
        }
        if let Some(&v) = memo.get(&(p, used)) {
            return v;
        }
        let mut best = go(p + 1, used, np, nt, compat, memo);
        for t in 0..nt {
            if used & (1 << t) == 0 && compat(p, t) {
                best = best.max(1 + go(p + 1, used | (1 << t), np, nt, compat, memo));
            }
        }
        memo.insert((p, used), best);
        best
    }
    go(0, 0, np, nt, compat, &mut HashMap::new())
}

/// Precision, recall and F1 straight from the definitions; undefined
/// ratios count as zero.
pub fn prf(t: usize, np: usize, nt: usize) -> (f64, f64, f64) {
    let p = if np == 0 { 0.0 } else { t as f64 / np as f64 };
    let r = if nt == 0 { 0.0 } else { t as f64 / nt as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub fn cell_of(x: f64, y: f64, rows: usize, cols: usize) -> usize {
    let row = ((y * rows as f64) as usize).min(rows - 1);
    let col = ((x * cols as f64) as usize).min(cols - 1);
    row * cols + col
}

/// Intersection over union of two `(cx, cy, w, h)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let overlap = |c1: f64, s1: f64, c2: f64, s2: f64| {
        ((c1 + s1 / 2.0).min(c2 + s2 / 2.0) - (c1 - s1 / 2.0).max(c2 - s2 / 2.0)).max(0.0)
    };
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
