#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use superimage::si_codec::Volume;
use superimage::tinynet::{NetError, Tape, UNet, UNetConfig, Var};

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, so ReLU kinks sit far outside the FD step.
pub fn away_from_zero(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn binary(r: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    (0..n).map(|_| f64::from(u8::from(r.gen_bool(p)))).collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub struct Input {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Whether this input is differentiated and checked.
    pub check: bool,
}

impl Input {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape: shape.to_vec(),
            values,
            check: true,
        }
    }

    pub fn fixed(shape: &[usize], values: Vec<f64>) -> Self {
        Self {
            check: false,
            ..Self::new(shape, values)
        }
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NetError> + 'a;

/// Scalar objective: a non-scalar output is contracted with fixed random
/// weights so every output element contributes.
fn objective(tape: &mut Tape<f64>, inputs: &[Input], build: &Build) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| tape.leaf(&i.shape, i.values.clone(), i.check).unwrap())
        .collect();
    let out = build(tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    if shape.is_empty() {
        return (out, vars);
    }
    let n = tape.value(out).len();
    let weights = uniform(&mut rng(0xC0FFEE + n as u64), n, -1.0, 1.0);
    let w = tape.leaf(&shape, weights, false).unwrap();
    let prod = tape.mul(out, w).unwrap();
    (tape.sum(prod), vars)
}

fn loss_value(inputs: &[Input], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = objective(&mut tape, inputs, build);
    tape.value(loss)[0]
}

/// Norm-wise relative error between reverse-mode and central-difference
/// gradients over every checked input coordinate.
pub fn grad_check(mut inputs: Vec<Input>, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let (loss, vars) = objective(&mut tape, &inputs, build);
    tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (i, v) in inputs.iter().zip(&vars) {
        if i.check {
            analytic.extend_from_slice(tape.grad(*v));
        }
    }
    let mut numeric = Vec::new();
    for k in 0..inputs.len() {
        if !inputs[k].check {
            continue;
        }
        for j in 0..inputs[k].values.len() {
            let x = inputs[k].values[j];
            inputs[k].values[j] = x + FD_STEP;
            let up = loss_value(&inputs, build);
            inputs[k].values[j] = x - FD_STEP;
            let down = loss_value(&inputs, build);
            inputs[k].values[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

fn spatial(r: &mut ChaCha8Rng, dims: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..dims).map(|_| r.gen_range(lo..=hi)).collect()
}

fn nc(n: usize, c: usize, s: &[usize]) -> Vec<usize> {
    let mut v = vec![n, c];
    v.extend_from_slice(s);
    v
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

pub fn check_conv(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let dims = 2 + (seed % 2) as usize;
    let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let k = r.gen_range(1..=3);
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..k);
    let ext = spatial(r, dims, k, k + 3);
    let xs = nc(n, cin, &ext);
    let mut ws = vec![cout, cin];
    ws.extend(std::iter::repeat(k).take(dims));
    let bias = seed % 3 != 0;
    let inputs = vec![
        Input::new(&xs, uniform(r, numel(&xs), -1.0, 1.0)),
        Input::new(&ws, uniform(r, numel(&ws), -1.0, 1.0)),
        Input::new(&[cout], uniform(r, cout, -1.0, 1.0)),
    ];
    grad_check(inputs, &|t: &mut Tape<f64>, v: &[Var]| {
        t.conv(v[0], v[1], bias.then_some(v[2]), stride, pad)
    })
}

pub fn check_conv_transpose(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let dims = 2 + (seed % 2) as usize;
    let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let k = r.gen_range(1..=3);
    let stride = r.gen_range(1..=2);
    let ext = spatial(r, dims, 1, 3);
    let xs = nc(n, cin, &ext);
    let mut ws = vec![cin, cout];
    ws.extend(std::iter::repeat(k).take(dims));
    let bias = seed % 3 != 0;
    let inputs = vec![
        Input::new(&xs, uniform(r, numel(&xs), -1.0, 1.0)),
        Input::new(&ws, uniform(r, numel(&ws), -1.0, 1.0)),
        Input::new(&[cout], uniform(r, cout, -1.0, 1.0)),
    ];
    grad_check(inputs, &|t: &mut Tape<f64>, v: &[Var]| {
        t.conv_transpose(v[0], v[1], bias.then_some(v[2]), stride)
    })
}

/// Distinct, well-separated values so no window has a near tie.
pub fn check_max_pool(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let dims = 2 + (seed % 2) as usize;
    let ext: Vec<usize> = (0..dims).map(|_| 2 * r.gen_range(1..=3)).collect();
    let xs = nc(r.gen_range(1..=2), r.gen_range(1..=3), &ext);
    let n = numel(&xs);
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    use rand::seq::SliceRandom;
    values.shuffle(r);
    grad_check(vec![Input::new(&xs, values)], &|t: &mut Tape<f64>, v: &[Var]| {
        t.max_pool(v[0], 2)
    })
}

fn random_shape(r: &mut ChaCha8Rng, seed: u64) -> Vec<usize> {
    let dims = 2 + (seed % 2) as usize;
    let ext = spatial(r, dims, 1, 4);
    nc(r.gen_range(1..=2), r.gen_range(1..=3), &ext)
}

pub fn check_relu(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let s = random_shape(r, seed);
    let x = away_from_zero(r, numel(&s));
    grad_check(vec![Input::new(&s, x)], &|t: &mut Tape<f64>, v: &[Var]| {
        Ok(t.relu(v[0]))
    })
}

pub fn check_sigmoid(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let s = random_shape(r, seed);
    let x = uniform(r, numel(&s), -4.0, 4.0);
    grad_check(vec![Input::new(&s, x)], &|t: &mut Tape<f64>, v: &[Var]| {
        Ok(t.sigmoid(v[0]))
    })
}

pub fn check_concat(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let a = random_shape(r, seed);
    let mut b = a.clone();
    b[1] = r.gen_range(1..=3);
    let inputs = vec![
        Input::new(&a, uniform(r, numel(&a), -1.0, 1.0)),
        Input::new(&b, uniform(r, numel(&b), -1.0, 1.0)),
    ];
    grad_check(inputs, &|t: &mut Tape<f64>, v: &[Var]| t.concat(v[0], v[1]))
}

pub fn check_sum(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let s = random_shape(r, seed);
    let x = uniform(r, numel(&s), -1.0, 1.0);
    grad_check(vec![Input::new(&s, x)], &|t: &mut Tape<f64>, v: &[Var]| {
        Ok(t.sum(v[0]))
    })
}

pub fn check_mul(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let s = random_shape(r, seed);
    let inputs = vec![
        Input::new(&s, uniform(r, numel(&s), -1.0, 1.0)),
        Input::new(&s, uniform(r, numel(&s), -1.0, 1.0)),
    ];
    grad_check(inputs, &|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1]))
}

/// Predictions stay inside the BCE clamp; odd seeds also check soft targets.
pub fn check_dice_bce(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let s = random_shape(r, seed);
    let n = numel(&s);
    let pred = Input::new(&s, uniform(r, n, 0.05, 0.95));
    let target = if seed % 2 == 1 {
        Input::new(&s, uniform(r, n, 0.0, 1.0))
    } else {
        Input::fixed(&s, binary(r, n, 0.4))
    };
    grad_check(vec![pred, target], &|t: &mut Tape<f64>, v: &[Var]| {
        t.dice_bce(v[0], v[1])
    })
}

/// Loss of a small U-Net against a random binary mask, differentiated with
/// respect to every weight, bias and input voxel.
pub fn check_unet(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let dims = 2 + (seed % 2) as usize;
    let cfg = UNetConfig {
        dims,
        in_channels: r.gen_range(1..=2),
        out_channels: 1,
        levels: r.gen_range(1..=2),
        base_width: r.gen_range(2..=3),
    };
    let div = cfg.divisor();
    let ext: Vec<usize> = (0..dims)
        .map(|_| div * r.gen_range(1..=if dims == 2 { 4 } else { 2 }))
        .collect();
    let xs = nc(1, cfg.in_channels, &ext);
    let mut net = UNet::<f64>::new(cfg, seed).unwrap();
    // Non-zero biases so bias gradients are exercised away from the init.
    for p in net.params_mut() {
        if p.name.ends_with(".bias") {
            for b in &mut p.values {
                *b = r.gen_range(-0.1..0.1);
            }
        }
    }
    let x = uniform(r, numel(&xs), -1.0, 1.0);
    let mut ys = xs.clone();
    ys[1] = 1;
    let y = binary(r, numel(&ys), 0.3);

    let loss = |net: &UNet<f64>, x: &[f64], track: bool| {
        let mut tape = Tape::new();
        let xv = tape.leaf(&xs, x.to_vec(), track).unwrap();
        let yv = tape.leaf(&ys, y.clone(), false).unwrap();
        let (p, params) = net.forward(&mut tape, xv, track).unwrap();
        let l = tape.dice_bce(p, yv).unwrap();
        (tape, l, xv, params)
    };

    let (mut tape, l, xv, params) = loss(&net, &x, true);
    tape.backward(l).unwrap();
    let mut analytic: Vec<f64> = tape.grad(xv).to_vec();
    for p in &params {
        analytic.extend_from_slice(tape.grad(*p));
    }

    let value = |net: &UNet<f64>, x: &[f64]| {
        let (tape, l, _, _) = loss(net, x, false);
        tape.value(l)[0]
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut xp = x.clone();
    for j in 0..xp.len() {
        let v = xp[j];
        xp[j] = v + FD_STEP;
        let up = value(&net, &xp);
        xp[j] = v - FD_STEP;
        let down = value(&net, &xp);
        xp[j] = v;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    for i in 0..net.params().len() {
        for j in 0..net.params()[i].values.len() {
            let v = net.params()[i].values[j];
            net.params_mut()[i].values[j] = v + FD_STEP;
            let up = value(&net, &x);
            net.params_mut()[i].values[j] = v - FD_STEP;
            let down = value(&net, &x);
            net.params_mut()[i].values[j] = v;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

pub type Check = fn(u64) -> f64;

pub const GRAD_CHECKS: [(&str, Check); 10] = [
    ("conv", check_conv),
    ("conv_transpose", check_conv_transpose),
    ("max_pool", check_max_pool),
    ("relu", check_relu),
    ("sigmoid", check_sigmoid),
    ("concat", check_concat),
    ("sum", check_sum),
    ("mul", check_mul),
    ("dice_bce", check_dice_bce),
    ("unet_loss", check_unet),
];

/// Direct sliding-window cross-correlation over `[N, C, D, H, W]` with
/// zero padding; 2D callers pass `D = 1`, `kd = 1`, `pad_d = 0`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    [n, cin, d, h, w]: [usize; 5],
    wt: &[f64],
    [cout, kd, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    [pd, ph, pw]: [usize; 3],
) -> (Vec<f64>, [usize; 3]) {
    let od = (d + 2 * pd - kd) / stride + 1;
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * od * oh * ow);
    for b in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for q in 0..ow {
                        let mut acc = bias.get(co).copied().unwrap_or(0.0);
                        for ci in 0..cin {
                            for a in 0..kd {
                                for e in 0..kh {
                                    for f in 0..kw {
                                        let iz = (z * stride + a) as isize - pd as isize;
                                        let iy = (y * stride + e) as isize - ph as isize;
                                        let ix = (q * stride + f) as isize - pw as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((b * cin + ci) * d + iz as usize) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize;
                                        let wi = (((co * cin + ci) * kd + a) * kh + e) * kw + f;
                                        acc += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    (out, [od, oh, ow])
}

/// Confusion counts and scores straight from the definitions, voxel by voxel.
pub fn brute_scores(pred: &[f32], gt: &[f32]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == 1.0, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let p_size = tp + fp;
    let g_size = tp + fn_;
    match (p_size == 0, g_size == 0) {
        (true, true) => (1.0, 1.0, 1.0),
        (true, false) => (0.0, 1.0, 0.0),
        (false, true) => (0.0, 0.0, 1.0),
        (false, false) => (
            2.0 * tp as f64 / (p_size + g_size) as f64,
            tp as f64 / p_size as f64,
            tp as f64 / g_size as f64,
        ),
    }
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, d: usize, p: f64) -> Volume {
    let data = (0..h * w * d).map(|_| f32::from(u8::from(r.gen_bool(p)))).collect();
    Volume::new(h, w, d, 1, [1.0; 3], data).unwrap()
}
