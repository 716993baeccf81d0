//! Lossless rearrangement between volumes and tiled 2D super images.
//!
//! A volume of `D` slices is laid out on an `sh × sw` grid (with `sh·sw == D`).
//! Slice `d` lands in grid cell `(d / sw, d % sw)`, so slices fill the grid
//! row-major in ascending depth order. Both volumes and super images keep
//! channels outermost, which turns the rearrangement into row copies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("layout {sh}x{sw} does not tile depth {depth}")]
    LayoutMismatch { sh: usize, sw: usize, depth: usize },
    #[error("super image {height}x{width} is inconsistent with layout {sh}x{sw} of {h}x{w} slices")]
    ShapeMismatch {
        height: usize,
        width: usize,
        sh: usize,
        sw: usize,
        h: usize,
        w: usize,
    },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid grid layout {sh}x{sw}")]
    InvalidLayout { sh: usize, sw: usize },
    #[error("bad target depth {target} for volume of depth {depth}")]
    BadTarget { target: usize, depth: usize },
}

/// A 4D voxel array `(H, W, D, C)`.
///
/// Samples are stored in `(c, d, h, w)` order, so every slice of every channel
/// is one contiguous `H·W` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    height: usize,
    width: usize,
    depth: usize,
    channels: usize,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        height: usize,
        width: usize,
        depth: usize,
        channels: usize,
        spacing: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self, CodecError> {
        if height == 0 || width == 0 || depth == 0 || channels == 0 {
            return Err(CodecError::InvalidVolume(format!(
                "zero extent in {height}x{width}x{depth}x{channels}"
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(CodecError::InvalidVolume(format!(
                "non-positive spacing {spacing:?}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(depth))
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| CodecError::InvalidVolume("extent product overflows".into()))?;
        if data.len() != expected {
            return Err(CodecError::InvalidVolume(format!(
                "data length {} != {expected}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            channels,
            spacing,
            data,
        })
    }

    /// Volume of unit spacing filled with `value`.
    pub fn filled(
        height: usize,
        width: usize,
        depth: usize,
        channels: usize,
        value: f32,
    ) -> Result<Self, CodecError> {
        let n = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(depth))
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| CodecError::InvalidVolume("extent product overflows".into()))?;
        Self::new(height, width, depth, channels, [1.0; 3], vec![value; n])
    }

    /// Builds a volume by evaluating `f(h, w, d, c)` at every voxel.
    pub fn from_fn(
        height: usize,
        width: usize,
        depth: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self, CodecError> {
        let mut data = Vec::with_capacity(height * width * depth * channels);
        for c in 0..channels {
            for d in 0..depth {
                for h in 0..height {
                    for w in 0..width {
                        data.push(f(h, w, d, c));
                    }
                }
            }
        }
        Self::new(height, width, depth, channels, [1.0; 3], data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Extents as `(H, W, D, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.height, self.width, self.depth, self.channels)
    }

    /// Voxel size in mm along `(h, w, d)`.
    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self, CodecError> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(CodecError::InvalidVolume(format!(
                "non-positive spacing {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize, c: usize) -> usize {
        ((c * self.depth + d) * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize, c: usize) -> f32 {
        self.data[self.index(h, w, d, c)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, d: usize, c: usize, value: f32) {
        let i = self.index(h, w, d, c);
        self.data[i] = value;
    }

    /// Contiguous samples of slice `d` in channel `c`.
    pub fn slice(&self, d: usize, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        let start = (c * self.depth + d) * plane;
        &self.data[start..start + plane]
    }

    /// Samples of channel `c` (all slices).
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width * self.depth;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width * self.depth;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Tiling of a volume's slices: `sh` tile rows by `sw` tile columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridLayout {
    pub sh: usize,
    pub sw: usize,
}

impl GridLayout {
    pub fn new(sh: usize, sw: usize) -> Result<Self, CodecError> {
        if sh == 0 || sw == 0 {
            return Err(CodecError::InvalidLayout { sh, sw });
        }
        Ok(Self { sh, sw })
    }

    /// Number of slices the layout holds.
    pub fn cells(&self) -> usize {
        self.sh * self.sw
    }

    pub fn check_depth(&self, depth: usize) -> Result<(), CodecError> {
        if self.cells() != depth {
            return Err(CodecError::LayoutMismatch {
                sh: self.sh,
                sw: self.sw,
                depth,
            });
        }
        Ok(())
    }

    pub fn transposed(&self) -> Self {
        Self {
            sh: self.sw,
            sw: self.sh,
        }
    }
}

impl std::fmt::Display for GridLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.sh, self.sw)
    }
}

impl std::str::FromStr for GridLayout {
    type Err = CodecError;

    /// Parses `SHxSW`, e.g. `6x8`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CodecError::InvalidLayout { sh: 0, sw: 0 };
        let (a, b) = s
            .trim()
            .split_once(|c| c == 'x' || c == 'X')
            .ok_or_else(bad)?;
        let sh = a.trim().parse().map_err(|_| bad())?;
        let sw = b.trim().parse().map_err(|_| bad())?;
        Self::new(sh, sw)
    }
}

/// Which volume geometry a super image was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub slice_height: usize,
    pub slice_width: usize,
    pub layout: GridLayout,
}

/// A 2D multi-channel image `(Ĥ, Ŵ, C)` stored in `(c, y, x)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    provenance: Provenance,
}

impl SuperImage {
    pub fn new(
        channels: usize,
        data: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self, CodecError> {
        let Provenance {
            slice_height,
            slice_width,
            layout,
        } = provenance;
        if slice_height == 0 || slice_width == 0 || channels == 0 {
            return Err(CodecError::InvalidVolume(
                "super image with zero extent".into(),
            ));
        }
        GridLayout::new(layout.sh, layout.sw)?;
        let height = slice_height * layout.sh;
        let width = slice_width * layout.sw;
        if data.len() != height * width * channels {
            return Err(CodecError::InvalidVolume(format!(
                "super image data length {} != {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Same geometry, different sample values (e.g. a model's prediction).
    pub fn with_data(&self, channels: usize, data: Vec<f32>) -> Result<Self, CodecError> {
        Self::new(channels, data, self.provenance)
    }
}

/// Tiles the slices of `v` onto the grid `g`.
pub fn to_super_image(v: &Volume, g: GridLayout) -> Result<SuperImage, CodecError> {
    GridLayout::new(g.sh, g.sw)?;
    g.check_depth(v.depth)?;
    let (h, w) = (v.height, v.width);
    let (out_h, out_w) = (h * g.sh, w * g.sw);
    let mut data = vec![0.0f32; out_h * out_w * v.channels];
    for c in 0..v.channels {
        let plane = &mut data[c * out_h * out_w..(c + 1) * out_h * out_w];
        for d in 0..v.depth {
            let (r, q) = (d / g.sw, d % g.sw);
            let src = v.slice(d, c);
            for row in 0..h {
                let dst = (r * h + row) * out_w + q * w;
                plane[dst..dst + w].copy_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
    }
    SuperImage::new(
        v.channels,
        data,
        Provenance {
            slice_height: h,
            slice_width: w,
            layout: g,
        },
    )
}

/// Exact inverse of [`to_super_image`]. The result has unit spacing.
pub fn from_super_image(
    si: &SuperImage,
    g: GridLayout,
    h: usize,
    w: usize,
) -> Result<Volume, CodecError> {
    GridLayout::new(g.sh, g.sw)?;
    if h == 0 || w == 0 || si.height != h * g.sh || si.width != w * g.sw {
        return Err(CodecError::ShapeMismatch {
            height: si.height,
            width: si.width,
            sh: g.sh,
            sw: g.sw,
            h,
            w,
        });
    }
    let p = si.provenance;
    if p.layout != g || p.slice_height != h || p.slice_width != w {
        return Err(CodecError::LayoutMismatch {
            sh: g.sh,
            sw: g.sw,
            depth: p.layout.cells(),
        });
    }
    let depth = g.cells();
    let (si_h, si_w) = (si.height, si.width);
    let mut data = vec![0.0f32; h * w * depth * si.channels];
    for c in 0..si.channels {
        let plane = si.channel(c);
        for d in 0..depth {
            let (r, q) = (d / g.sw, d % g.sw);
            let base = (c * depth + d) * h * w;
            for row in 0..h {
                let src = (r * h + row) * si_w + q * w;
                data[base + row * w..base + (row + 1) * w].copy_from_slice(&plane[src..src + w]);
            }
        }
    }
    debug_assert_eq!(si_h, h * g.sh);
    Volume::new(h, w, depth, si.channels, [1.0; 3], data)
}

/// `min(Ĥ, Ŵ) / max(Ĥ, Ŵ)` of the super image `g` would produce; 1 iff square.
pub fn squareness(g: GridLayout, h: usize, w: usize) -> f64 {
    let a = (h * g.sh) as f64;
    let b = (w * g.sw) as f64;
    a.min(b) / a.max(b)
}

/// All factor pairs of `depth`, most square first; ties put `sh <= sw` first.
pub fn enumerate_layouts(depth: usize) -> Vec<GridLayout> {
    let mut layouts: Vec<GridLayout> = (1..=depth)
        .filter(|sh| depth % sh == 0)
        .map(|sh| GridLayout {
            sh,
            sw: depth / sh,
        })
        .collect();
    // Grid-only squareness (unit slices); slice dims enter via `sort_by_squareness`.
    layouts.sort_by(|a, b| {
        squareness(*b, 1, 1)
            .total_cmp(&squareness(*a, 1, 1))
            .then_with(|| (a.sh > a.sw).cmp(&(b.sh > b.sw)))
            .then_with(|| a.sh.cmp(&b.sh))
    });
    layouts
}

/// Orders layouts by descending squareness of the super image they produce for
/// `h × w` slices. Stable with respect to the incoming order on ties.
pub fn sort_by_squareness(layouts: &mut [GridLayout], h: usize, w: usize) {
    layouts.sort_by(|a, b| squareness(*b, h, w).total_cmp(&squareness(*a, h, w)));
}

/// Appends `target − D` slices of `fill` to the end of the depth axis.
pub fn pad_depth(v: &Volume, target: usize, fill: f32) -> Result<Volume, CodecError> {
    if target < v.depth {
        return Err(CodecError::BadTarget {
            target,
            depth: v.depth,
        });
    }
    let plane = v.height * v.width;
    let mut data = Vec::with_capacity(plane * target * v.channels);
    for c in 0..v.channels {
        data.extend_from_slice(v.channel(c));
        data.resize(data.len() + plane * (target - v.depth), fill);
    }
    Volume::new(v.height, v.width, target, v.channels, v.spacing, data)
}
