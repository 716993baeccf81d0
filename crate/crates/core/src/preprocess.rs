//! Intensity normalization, resampling, cropping, depth clipping, binarization
//! and flip/gamma augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::si_codec::{CodecError, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("crop box {0:?} exceeds volume bounds {1:?}")]
    OutOfBounds(CropBox, (usize, usize, usize)),
    #[error("bad target depth {target} for volume of depth {depth}")]
    BadTarget { target: usize, depth: usize },
    #[error("image dims {image:?} and mask dims {mask:?} differ")]
    DimMismatch {
        image: (usize, usize, usize),
        mask: (usize, usize, usize),
    },
    #[error("invalid spacing {0:?}")]
    BadSpacing([f32; 3]),
    #[error(transparent)]
    Volume(#[from] CodecError),
}

/// Axis-aligned box of voxels, `(h, w, d)` per field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

impl CropBox {
    pub fn full(v: &Volume) -> Self {
        Self {
            origin: [0; 3],
            extent: [v.height(), v.width(), v.depth()],
        }
    }

    /// Box of `extent` centred in `v` (rounding the offset down).
    pub fn centered(v: &Volume, extent: [usize; 3]) -> Self {
        let dims = [v.height(), v.width(), v.depth()];
        let mut origin = [0; 3];
        for a in 0..3 {
            origin[a] = dims[a].saturating_sub(extent[a]) / 2;
        }
        Self { origin, extent }
    }
}

/// Per-channel z-score. A channel with zero standard deviation becomes zeros.
pub fn znormalize(v: &Volume) -> Volume {
    let mut out = v.clone();
    for c in 0..v.channels() {
        let ch = out.channel_mut(c);
        let n = ch.len() as f64;
        let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 && std.is_finite() {
            for x in ch.iter_mut() {
                *x = ((*x as f64 - mean) / std) as f32;
            }
        } else {
            ch.fill(0.0);
        }
    }
    out
}

/// Drops slices symmetrically so `target` remain; an odd remainder loses its
/// extra slice at the end.
pub fn clip_depth(v: &Volume, target: usize) -> Result<Volume, PreprocessError> {
    let depth = v.depth();
    if target > depth || target == 0 {
        return Err(PreprocessError::BadTarget { target, depth });
    }
    let start = (depth - target) / 2;
    crop(
        v,
        CropBox {
            origin: [0, 0, start],
            extent: [v.height(), v.width(), target],
        },
    )
}

pub fn crop(v: &Volume, b: CropBox) -> Result<Volume, PreprocessError> {
    let dims = [v.height(), v.width(), v.depth()];
    let fits = (0..3).all(|a| {
        b.extent[a] > 0
            && b.origin[a]
                .checked_add(b.extent[a])
                .is_some_and(|end| end <= dims[a])
    });
    if !fits {
        return Err(PreprocessError::OutOfBounds(b, (dims[0], dims[1], dims[2])));
    }
    let [oh, ow, od] = b.origin;
    let [eh, ew, ed] = b.extent;
    let mut data = Vec::with_capacity(eh * ew * ed * v.channels());
    for c in 0..v.channels() {
        for d in od..od + ed {
            let slice = v.slice(d, c);
            for h in oh..oh + eh {
                let row = h * v.width();
                data.extend_from_slice(&slice[row + ow..row + ow + ew]);
            }
        }
    }
    Ok(Volume::new(eh, ew, ed, v.channels(), v.spacing(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Continuous source index of output voxel `i`, matching voxel centres and
/// clamped to the valid range.
fn source_coord(i: usize, scale: f64, n_in: usize) -> f64 {
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Resamples to `out_spacing` (mm along `h, w, d`).
///
/// Output extent per axis is `round(n · in_spacing / out_spacing)`, at least 1.
pub fn resample(
    v: &Volume,
    out_spacing: [f32; 3],
    mode: Interpolation,
) -> Result<Volume, PreprocessError> {
    if out_spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(PreprocessError::BadSpacing(out_spacing));
    }
    let in_spacing = v.spacing();
    if in_spacing == out_spacing {
        return Ok(v.clone());
    }
    let n_in = [v.height(), v.width(), v.depth()];
    let mut n_out = [0usize; 3];
    let mut scale = [0f64; 3];
    for a in 0..3 {
        let ratio = in_spacing[a] as f64 / out_spacing[a] as f64;
        n_out[a] = ((n_in[a] as f64 * ratio).round() as usize).max(1);
        scale[a] = out_spacing[a] as f64 / in_spacing[a] as f64;
    }
    // Per-axis source positions: (lower index, upper index, upper weight).
    let taps = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out[a])
            .map(|i| {
                let x = source_coord(i, scale[a], n_in[a]);
                match mode {
                    Interpolation::Nearest => {
                        let k = ((x + 0.5).floor() as usize).min(n_in[a] - 1);
                        (k, k, 0.0)
                    }
                    Interpolation::Trilinear => {
                        let lo = x.floor() as usize;
                        let hi = (lo + 1).min(n_in[a] - 1);
                        (lo, hi, x - lo as f64)
                    }
                }
            })
            .collect()
    };
    let (th, tw, td) = (taps(0), taps(1), taps(2));
    let mut data = Vec::with_capacity(n_out.iter().product::<usize>() * v.channels());
    for c in 0..v.channels() {
        for &(d0, d1, fd) in &td {
            for &(h0, h1, fh) in &th {
                for &(w0, w1, fw) in &tw {
                    let value = match mode {
                        Interpolation::Nearest => v.get(h0, w0, d0, c),
                        Interpolation::Trilinear => {
                            let at = |h, w, d| v.get(h, w, d, c) as f64;
                            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                            let c00 = lerp(at(h0, w0, d0), at(h0, w1, d0), fw);
                            let c01 = lerp(at(h1, w0, d0), at(h1, w1, d0), fw);
                            let c10 = lerp(at(h0, w0, d1), at(h0, w1, d1), fw);
                            let c11 = lerp(at(h1, w0, d1), at(h1, w1, d1), fw);
                            lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd) as f32
                        }
                    };
                    data.push(value);
                }
            }
        }
    }
    Ok(Volume::new(
        n_out[0],
        n_out[1],
        n_out[2],
        v.channels(),
        out_spacing,
        data,
    )?)
}

/// `x >= threshold → 1`, else `0`.
pub fn binarize(v: &Volume, threshold: f32) -> Volume {
    let mut out = v.clone();
    for x in out.data_mut() {
        *x = if *x >= threshold { 1.0 } else { 0.0 };
    }
    out
}

/// Reverses the volume along each axis `(h, w, d)` whose flag is set.
pub fn flip(v: &Volume, axes: [bool; 3]) -> Volume {
    let (h, w, d, c) = v.dims();
    let mut out = v.clone();
    for ci in 0..c {
        for di in 0..d {
            let sd = if axes[2] { d - 1 - di } else { di };
            for hi in 0..h {
                let sh = if axes[0] { h - 1 - hi } else { hi };
                for wi in 0..w {
                    let sw = if axes[1] { w - 1 - wi } else { wi };
                    out.set(hi, wi, di, ci, v.get(sh, sw, sd, ci));
                }
            }
        }
    }
    out
}

/// Gamma on each channel: shift to a nonnegative range, apply a sign-preserving
/// `|x|^γ`, then shift back.
pub fn apply_gamma(v: &Volume, gamma: f64) -> Volume {
    let mut out = v.clone();
    for c in 0..v.channels() {
        let ch = out.channel_mut(c);
        let lo = ch.iter().fold(f32::INFINITY, |m, &x| m.min(x)) as f64;
        for x in ch.iter_mut() {
            let u = *x as f64 - lo;
            *x = (u.signum() * u.abs().powf(gamma) + lo) as f32;
        }
    }
    out
}

/// Random decisions drawn by [`augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: [bool; 3],
    pub gamma: f64,
}

impl AugmentParams {
    pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.5);

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
        let gamma = rng.gen_range(Self::GAMMA_RANGE.0..=Self::GAMMA_RANGE.1);
        Self { flip, gamma }
    }
}

/// Applies flips to image and mask identically and gamma to the image only.
pub fn augment_with(
    img: &Volume,
    mask: &Volume,
    p: AugmentParams,
) -> Result<(Volume, Volume), PreprocessError> {
    let (ih, iw, id, _) = img.dims();
    let (mh, mw, md, _) = mask.dims();
    if (ih, iw, id) != (mh, mw, md) {
        return Err(PreprocessError::DimMismatch {
            image: (ih, iw, id),
            mask: (mh, mw, md),
        });
    }
    let img = flip(img, p.flip);
    let mask = flip(mask, p.flip);
    Ok((apply_gamma(&img, p.gamma), mask))
}

/// Seeded random flip (p = 0.5 per axis) and gamma (γ ~ U[0.7, 1.5]).
pub fn augment(
    img: &Volume,
    mask: &Volume,
    seed: u64,
) -> Result<(Volume, Volume), PreprocessError> {
    augment_with(img, mask, AugmentParams::sample(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::si_codec::pad_depth;
    use rand_distr::{Distribution, Normal};

    fn noise(h: usize, w: usize, d: usize, c: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(3.0f32, 2.0).unwrap();
        Volume::from_fn(h, w, d, c, |_, _, _, _| n.sample(&mut rng)).unwrap()
    }

    #[test]
    fn znormalize_cases() {
        let v = Volume::new(1, 2, 1, 2, [1.0; 3], vec![0.0, 2.0, 5.0, 5.0]).unwrap();
        let z = znormalize(&v);
        assert_eq!(z.channel(0), &[-1.0, 1.0]);
        assert_eq!(z.channel(1), &[0.0, 0.0]);

        let z = znormalize(&noise(7, 5, 3, 2, 1));
        for c in 0..2 {
            let ch = z.channel(c);
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n;
            let std = (ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-4, "std {std}");
        }
    }

    #[test]
    fn clip_depth_88_to_64() {
        let v = Volume::from_fn(2, 2, 88, 1, |_, _, d, _| d as f32).unwrap();
        let c = clip_depth(&v, 64).unwrap();
        assert_eq!(c.depth(), 64);
        assert_eq!(c.slice(0, 0)[0], 12.0);
        assert_eq!(c.slice(63, 0)[0], 75.0);
        assert_eq!(clip_depth(&v, 88).unwrap(), v);
    }

    #[test]
    fn clip_depth_odd_remainder_drops_from_end() {
        let v = Volume::from_fn(1, 1, 5, 1, |_, _, d, _| d as f32).unwrap();
        assert_eq!(clip_depth(&v, 2).unwrap().data(), &[1.0, 2.0]);
        assert!(matches!(
            clip_depth(&v, 6),
            Err(PreprocessError::BadTarget { target: 6, depth: 5 })
        ));
    }

    #[test]
    fn crop_cases() {
        let v = noise(6, 5, 4, 2, 2);
        assert_eq!(crop(&v, CropBox::full(&v)).unwrap(), v);
        let b = CropBox {
            origin: [1, 2, 1],
            extent: [3, 2, 2],
        };
        let c = crop(&v, b).unwrap();
        assert_eq!(c.dims(), (3, 2, 2, 2));
        assert_eq!(c.get(2, 1, 1, 1), v.get(3, 3, 2, 1));
        let bad = CropBox {
            origin: [6, 0, 0],
            extent: [1, 1, 1],
        };
        assert!(matches!(crop(&v, bad), Err(PreprocessError::OutOfBounds(..))));
    }

    #[test]
    fn centered_crop_80x80x48() {
        let v = Volume::filled(144, 144, 144, 1, 0.0).unwrap();
        let c = crop(&v, CropBox::centered(&v, [80, 80, 48])).unwrap();
        assert_eq!(c.dims(), (80, 80, 48, 1));
    }

    #[test]
    fn pad_then_crop_recovers() {
        let v = noise(3, 3, 7, 1, 3);
        let p = pad_depth(&v, 8, 0.0).unwrap();
        let back = crop(
            &p,
            CropBox {
                origin: [0; 3],
                extent: [3, 3, 7],
            },
        )
        .unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn resample_identity_and_nearest_value_set() {
        let v = noise(4, 5, 3, 1, 4).with_spacing([1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            resample(&v, [1.0, 2.0, 3.0], Interpolation::Trilinear).unwrap(),
            v
        );

        let mask = binarize(&v, 3.0);
        let r = resample(&mask, [0.7, 1.3, 1.1], Interpolation::Nearest).unwrap();
        assert_eq!(r.spacing(), [0.7, 1.3, 1.1]);
        assert_eq!(
            (r.height(), r.width(), r.depth()),
            (6, 8, 8) // round(4/0.7), round(10/1.3), round(9/1.1)
        );
        assert!(r.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn resample_down_to_single_voxel() {
        let v = noise(2, 2, 2, 1, 5);
        let r = resample(&v, [10.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(r.dims(), (1, 1, 1, 1));
    }

    #[test]
    fn binarize_rules() {
        let v = Volume::new(1, 3, 1, 1, [1.0; 3], vec![0.5, 0.2, 0.9]).unwrap();
        let b = binarize(&v, 0.5);
        assert_eq!(b.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(binarize(&b, 0.5), b);
    }

    #[test]
    fn augment_determinism_and_identities() {
        let img = noise(4, 3, 5, 2, 6);
        let mask = binarize(&noise(4, 3, 5, 1, 7), 3.0);
        assert_eq!(augment(&img, &mask, 9).unwrap(), augment(&img, &mask, 9).unwrap());

        let forced = AugmentParams {
            flip: [true, true, true],
            gamma: 1.0,
        };
        let (i1, m1) = augment_with(&img, &mask, forced).unwrap();
        let (i2, m2) = augment_with(&i1, &m1, forced).unwrap();
        assert_eq!((i2, m2), (img.clone(), mask.clone()));

        let still = AugmentParams {
            flip: [false; 3],
            gamma: 1.0,
        };
        assert_eq!(augment_with(&img, &mask, still).unwrap().0, img);

        let fg = |m: &Volume| m.data().iter().filter(|&&x| x == 1.0).count();
        for seed in 0..8 {
            let (_, m) = augment(&img, &mask, seed).unwrap();
            assert_eq!(fg(&m), fg(&mask));
        }

        let short = Volume::filled(4, 3, 4, 1, 0.0).unwrap();
        assert!(matches!(
            augment(&img, &short, 0),
            Err(PreprocessError::DimMismatch { .. })
        ));
    }

    #[test]
    fn gamma_keeps_range_and_changes_interior() {
        let img = Volume::new(1, 3, 1, 1, [1.0; 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let g = apply_gamma(&img, 1.5);
        assert_eq!(g.data()[0], -1.0);
        assert_eq!(g.data()[1], 0.0);
        assert!((g.data()[2] as f64 - (2f64.powf(1.5) - 1.0)).abs() < 1e-6);
        let sampled = AugmentParams::sample(11).gamma;
        assert!((0.7..=1.5).contains(&sampled));
    }
}
