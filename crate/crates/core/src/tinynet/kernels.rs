//! Dense loops behind the tape ops. Spatial extents are always `[d, h, w]`;
//! 2D data uses `d = 1` with a depth-1 kernel.

use super::scalar::Scalar;

/// Sliding-window geometry between an "image" grid and a "column" grid.
///
/// For a convolution the image is the input and the columns are the output
/// positions. For a transposed convolution the roles swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub image: [usize; 3],
    pub cols: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Window {
    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn image_volume(&self) -> usize {
        self.image.iter().product()
    }

    pub fn col_volume(&self) -> usize {
        self.cols.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel_volume()
    }

    /// Identity unfolding: 1×1×1 kernel, unit stride, no padding.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Half-open range of column indices along `axis` whose tap `k` lands
    /// inside the image.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n, s, p) = (self.image[axis] as isize, self.stride[axis] as isize, self.pad[axis] as isize);
        let off = k as isize - p;
        // o*s + off in [0, n)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n - off <= 0 { 0 } else { (n - off + s - 1) / s };
        let hi = hi.min(self.cols[axis] as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    /// Visits every (row, column position, image position) triple whose image
    /// position is in bounds, one contiguous run of `w` at a time:
    /// `f(row, col_start, image_start, len)` with image stride `stride[2]`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [kd, kh, kw] = self.kernel;
        let [_, ch, cw] = self.cols;
        let [_, ih, iw] = self.image;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        for c in 0..self.channels {
            for a in 0..kd {
                let (d_lo, d_hi) = self.valid(0, a);
                for b in 0..kh {
                    let (h_lo, h_hi) = self.valid(1, b);
                    for e in 0..kw {
                        let (w_lo, w_hi) = self.valid(2, e);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        for od in d_lo..d_hi {
                            let id = od * sd + a - pd;
                            for oh in h_lo..h_hi {
                                let ihh = oh * sh + b - ph;
                                let col = (od * ch + oh) * cw + w_lo;
                                let img = ((c * self.image[0] + id) * ih + ihh) * iw
                                    + (w_lo * sw + e - pw);
                                f(row, col, img, w_hi - w_lo);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `image` (`channels × image_volume`) into `cols`
/// (`rows × col_volume`), writing zeros for padded taps.
pub(crate) fn im2col<T: Scalar>(win: &Window, image: &[T], cols: &mut [T]) {
    let n = win.col_volume();
    debug_assert_eq!(cols.len(), win.rows() * n);
    cols.fill(T::zero());
    let s = win.stride[2];
    win.for_each_run(|row, col, img, len| {
        let dst = &mut cols[row * n + col..row * n + col + len];
        if s == 1 {
            dst.copy_from_slice(&image[img..img + len]);
        } else {
            for (i, x) in dst.iter_mut().enumerate() {
                *x = image[img + i * s];
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `image`.
pub(crate) fn col2im<T: Scalar>(win: &Window, cols: &[T], image: &mut [T]) {
    let n = win.col_volume();
    debug_assert_eq!(cols.len(), win.rows() * n);
    let s = win.stride[2];
    win.for_each_run(|row, col, img, len| {
        let src = &cols[row * n + col..row * n + col + len];
        if s == 1 {
            for (x, &v) in image[img..img + len].iter_mut().zip(src) {
                *x += v;
            }
        } else {
            for (i, &v) in src.iter().enumerate() {
                image[img + i * s] += v;
            }
        }
    });
}

/// Max pooling with a cubic (3D) or square (2D, `pool_depth == false`) window
/// and stride equal to the window. Ties keep the first element in scan order.
/// Returns pooled values and, per output, the flat input index of its maximum.
pub(crate) fn max_pool<T: Scalar>(
    input: &[T],
    planes: usize,
    ext: [usize; 3],
    win: [usize; 3],
) -> (Vec<T>, Vec<usize>) {
    let out = [ext[0] / win[0], ext[1] / win[1], ext[2] / win[2]];
    let in_vol: usize = ext.iter().product();
    let out_vol: usize = out.iter().product();
    let mut values = Vec::with_capacity(planes * out_vol);
    let mut argmax = Vec::with_capacity(planes * out_vol);
    for p in 0..planes {
        let base = p * in_vol;
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for a in 0..win[0] {
                        for b in 0..win[1] {
                            for e in 0..win[2] {
                                let i = base
                                    + ((od * win[0] + a) * ext[1] + oh * win[1] + b) * ext[2]
                                    + ow * win[2]
                                    + e;
                                let v = input[i];
                                if at == usize::MAX || v > best {
                                    best = v;
                                    at = i;
                                }
                            }
                        }
                    }
                    values.push(best);
                    argmax.push(at);
                }
            }
        }
    }
    (values, argmax)
}
