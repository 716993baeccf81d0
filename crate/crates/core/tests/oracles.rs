mod common;

use rand::Rng;

use common::{brute_scores, naive_conv, random_mask, rng, uniform};
use superimage::metrics::{evaluate_si, score, SuperImageModel};
use superimage::preprocess::{binarize, resample, Interpolation};
use superimage::si_codec::{
    enumerate_layouts, from_super_image, to_super_image, SuperImage, Volume,
};
use superimage::tinynet::{NetError, Tape, UNet, UNetConfig};

fn tape_conv(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut t = Tape::new();
    let xv = t.leaf(xs, x.to_vec(), false).unwrap();
    let wv = t.leaf(ws, w.to_vec(), false).unwrap();
    let bv = t.leaf(&[b.len()], b.to_vec(), false).unwrap();
    let y = t.conv(xv, wv, Some(bv), stride, pad).unwrap();
    (t.value(y).to_vec(), t.shape(y).to_vec())
}

#[test]
fn row_difference_kernel() {
    let (y, s) = tape_conv(&[1.0, 2.0, 3.0], &[1, 1, 1, 3], &[1.0, 0.0, -1.0], &[1, 1, 1, 3], &[0.0], 1, 0);
    assert_eq!(s, vec![1, 1, 1, 1]);
    assert_eq!(y, vec![-2.0]);
    let (direct, _) = naive_conv(&[1.0, 2.0, 3.0], [1, 1, 1, 1, 3], &[1.0, 0.0, -1.0], [1, 1, 1, 3], &[0.0], 1, [0, 0, 0]);
    assert_eq!(direct, y);
}

#[test]
fn conv_matches_direct_oracle() {
    let r = &mut rng(3);
    for case in 0..40 {
        let three = case % 2 == 1;
        let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=4));
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=3);
        let pad = r.gen_range(0..=k);
        let d = if three { r.gen_range(k..k + 4) } else { 1 };
        let (h, w) = (r.gen_range(k..k + 6), r.gen_range(k..k + 6));
        let kd = if three { k } else { 1 };
        let x = uniform(r, n * cin * d * h * w, -1.0, 1.0);
        let wt = uniform(r, cout * cin * kd * k * k, -1.0, 1.0);
        let b = uniform(r, cout, -1.0, 1.0);
        let (xs, ws) = if three {
            (vec![n, cin, d, h, w], vec![cout, cin, k, k, k])
        } else {
            (vec![n, cin, h, w], vec![cout, cin, k, k])
        };
        let (got, shape) = tape_conv(&x, &xs, &wt, &ws, &b, stride, pad);
        let pd = if three { pad } else { 0 };
        let (want, [od, oh, ow]) = naive_conv(&x, [n, cin, d, h, w], &wt, [cout, kd, k, k], &b, stride, [pd, pad, pad]);
        let want_shape = if three { vec![n, cout, od, oh, ow] } else { vec![n, cout, oh, ow] };
        assert_eq!(shape, want_shape, "case {case}");
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12, "case {case}: {g} vs {e}");
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv_T(x), y> == <x, conv(y)> for stride s, no padding, no bias.
    let r = &mut rng(4);
    for case in 0..20 {
        let three = case % 2 == 0;
        let (cin, cout, k, s) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=2));
        let ext: Vec<usize> = (0..if three { 3 } else { 2 }).map(|_| r.gen_range(1..=3)).collect();
        let out_ext: Vec<usize> = ext.iter().map(|&n| (n - 1) * s + k).collect();
        let mut xs = vec![1, cin];
        xs.extend(&ext);
        let mut ys = vec![1, cout];
        ys.extend(&out_ext);
        let mut ws = vec![cin, cout];
        ws.extend(std::iter::repeat(k).take(ext.len()));
        let size = |s: &[usize]| s.iter().product::<usize>();
        let x = uniform(r, size(&xs), -1.0, 1.0);
        let y = uniform(r, size(&ys), -1.0, 1.0);
        let w = uniform(r, size(&ws), -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, yv, wv) = (
            t.leaf(&xs, x.clone(), false).unwrap(),
            t.leaf(&ys, y.clone(), false).unwrap(),
            t.leaf(&ws, w, false).unwrap(),
        );
        let up = t.conv_transpose(xv, wv, None, s).unwrap();
        assert_eq!(t.shape(up), &ys[..]);
        let down = t.conv(yv, wv, None, s, 0).unwrap();
        assert_eq!(t.shape(down), &xs[..]);
        let lhs: f64 = t.value(up).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = t.value(down).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "case {case}: {lhs} vs {rhs}");
    }
}

#[test]
fn conv_2d_and_3d_agree_on_unit_depth() {
    let r = &mut rng(5);
    for pad in [0, 1] {
        let (n, cin, cout, h, w) = (2, 3, 2, 6, 5);
        let x = uniform(r, n * cin * h * w, -1.0, 1.0);
        let wt = uniform(r, cout * cin * 9, -1.0, 1.0);
        let b = uniform(r, cout, -1.0, 1.0);
        let (flat, fs) = tape_conv(&x, &[n, cin, h, w], &wt, &[cout, cin, 3, 3], &b, 1, pad);
        let (vol, vs) = tape_conv(&x, &[n, cin, 1, h, w], &wt, &[cout, cin, 1, 3, 3], &b, 1, pad);
        // Padding is per axis, so the depth axis grows by 2·pad; its centre
        // slice sees the real data.
        let depth = 1 + 2 * pad;
        assert_eq!(vs, vec![n, cout, depth, fs[2], fs[3]]);
        let plane = fs[2] * fs[3];
        for nc in 0..n * cout {
            let centre = &vol[(nc * depth + pad) * plane..][..plane];
            assert_eq!(centre, &flat[nc * plane..][..plane]);
        }
    }
}

#[test]
fn parameter_count_tally() {
    // Hand tally for dims=2, levels=3, base=8, in=2: (out, in, k) per conv.
    let convs: [(usize, usize, usize); 13] = [
        (8, 2, 3), (8, 8, 3),
        (16, 8, 3), (16, 16, 3),
        (32, 16, 3), (32, 32, 3),
        (16, 32, 2), (16, 32, 3), (16, 16, 3),
        (8, 16, 2), (8, 16, 3), (8, 8, 3),
        (1, 8, 1),
    ];
    let tally: usize = convs.iter().map(|&(o, i, k)| o * i * k * k + o).sum();
    assert_eq!(tally, 29_393);
    let cfg = UNetConfig { dims: 2, in_channels: 2, out_channels: 1, levels: 3, base_width: 8 };
    assert_eq!(cfg.parameter_count(), tally);
    assert_eq!(UNet::<f32>::new(cfg, 0).unwrap().parameter_count(), tally);
    let cfg3 = UNetConfig { dims: 3, ..cfg };
    let tally3: usize = convs.iter().map(|&(o, i, k)| o * i * k * k * k + o).sum();
    assert_eq!(cfg3.parameter_count(), tally3);
}

#[test]
fn trilinear_reproduces_linear_field() {
    let (h, w, d) = (7, 5, 4);
    let spacing = [2.0f32, 1.0, 3.0];
    let f = |y: f64, x: f64, z: f64| 0.5 + 1.25 * y - 0.75 * x + 2.0 * z;
    let v = Volume::from_fn(h, w, d, 1, |y, x, z, _| f(y as f64, x as f64, z as f64) as f32)
        .unwrap()
        .with_spacing(spacing)
        .unwrap();
    let target = spacing.map(|s| s / 2.0);
    let out = resample(&v, target, Interpolation::Trilinear).unwrap();
    assert_eq!(out.dims(), (2 * h, 2 * w, 2 * d, 1));
    // Output voxel i has its centre at physical (i + 0.5)·s_out, i.e. input
    // index (i + 0.5)/2 − 0.5; beyond the outermost input centres the field
    // is held at its edge value.
    let src = |i: usize, n: usize| ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    let mut max_err = 0.0f64;
    let mut interior = 0;
    for z in 0..2 * d {
        for y in 0..2 * h {
            for x in 0..2 * w {
                let want = f(src(y, h), src(x, w), src(z, d));
                max_err = max_err.max((out.get(y, x, z, 0) as f64 - want).abs());
                if [y, x, z].iter().all(|&i| i > 0) && y < 2 * h - 1 && x < 2 * w - 1 && z < 2 * d - 1 {
                    interior += 1;
                }
            }
        }
    }
    assert!(interior > 0);
    assert!(max_err < 1e-5, "max error {max_err}");
}

#[test]
fn score_matches_brute_force() {
    let r = &mut rng(6);
    for i in 0..500 {
        let p = [0.0, 0.02, 0.3, 0.7][i % 4];
        let q = [0.0, 0.05, 0.5][i % 3];
        let pred = random_mask(r, 8, 8, 8, p);
        let gt = random_mask(r, 8, 8, 8, q);
        let s = score(&pred, &gt).unwrap();
        assert_eq!((s.dsc, s.precision, s.recall), brute_scores(pred.data(), gt.data()), "pair {i}");
        let swapped = score(&gt, &pred).unwrap();
        assert_eq!(s.dsc, swapped.dsc);
        assert_eq!(s.precision, swapped.recall);
    }
}

struct Echo(SuperImage);

impl SuperImageModel for Echo {
    fn predict_super_image(&self, _: &SuperImage) -> Result<SuperImage, NetError> {
        Ok(self.0.clone())
    }
}

#[test]
fn evaluate_si_equals_manual_decode_then_score() {
    let r = &mut rng(8);
    for case in 0..20 {
        let (h, w, d) = (r.gen_range(2..6), r.gen_range(2..6), [4, 6, 12][case % 3]);
        let image = Volume::from_fn(h, w, d, 2, |_, _, _, _| r.gen_range(-1.0..1.0)).unwrap();
        let gt = random_mask(r, h, w, d, 0.3);
        for g in enumerate_layouts(d) {
            let probs = Volume::from_fn(h, w, d, 1, |_, _, _, _| r.gen_range(0.0..1.0)).unwrap();
            let model = Echo(to_super_image(&probs, g).unwrap());
            let via = evaluate_si(&model, &image, &gt, g).unwrap();
            let back = from_super_image(&model.0, g, h, w).unwrap();
            let manual = score(&binarize(&back, 0.5), &gt).unwrap();
            assert_eq!(via, manual);
            let perfect = Echo(to_super_image(&gt, g).unwrap());
            let s = evaluate_si(&perfect, &image, &gt, g).unwrap();
            assert_eq!((s.dsc, s.precision, s.recall), (1.0, 1.0, 1.0));
        }
    }
}
