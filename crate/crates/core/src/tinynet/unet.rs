use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::NetError;
use crate::metrics::{SuperImageModel, VolumeModel};
use crate::si_codec::{SuperImage, Volume};

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Spatial rank: 2 or 3.
    pub dims: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub base_width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            in_channels: 2,
            out_channels: 1,
            levels: 3,
            base_width: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::BadConfig(m.into()));
        if self.dims != 2 && self.dims != 3 {
            return bad("dims must be 2 or 3");
        }
        if self.levels == 0 {
            return bad("levels must be at least 1");
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return bad("channel counts must be positive");
        }
        if self.levels > 16 || self.base_width.checked_shl(self.levels as u32 - 1).is_none() {
            return bad("too many levels");
        }
        Ok(())
    }

    /// Feature width of encoder level `l`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        POOL.pow(self.levels as u32 - 1)
    }

    fn kernel_shape(&self, out: usize, inp: usize, k: usize) -> Vec<usize> {
        let mut s = vec![out, inp];
        s.extend(std::iter::repeat(k).take(self.dims));
        s
    }

    /// Ordered `(name, shape)` of every parameter.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        // Transposed kernels are stored [Cin, Cout, k...]; pass them swapped.
        let mut conv = |name: String, lead: usize, second: usize, k: usize, bias: usize| {
            out.push((format!("{name}.weight"), self.kernel_shape(lead, second, k)));
            out.push((format!("{name}.bias"), vec![bias]));
        };
        let mut cin = self.in_channels;
        for l in 0..self.levels {
            let w = self.width(l);
            conv(format!("enc{l}.conv1"), w, cin, KERNEL, w);
            conv(format!("enc{l}.conv2"), w, w, KERNEL, w);
            cin = w;
        }
        for l in (0..self.levels - 1).rev() {
            let (w, below) = (self.width(l), self.width(l + 1));
            conv(format!("up{l}"), below, w, POOL, w);
            conv(format!("dec{l}.conv1"), w, 2 * w, KERNEL, w);
            conv(format!("dec{l}.conv2"), w, w, KERNEL, w);
        }
        conv("head".into(), self.out_channels, self.width(0), 1, self.out_channels);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// U-Net with `levels` resolution levels: two 3-wide conv+ReLU per level,
/// 2× max pooling down, 2× up-convolution and skip concatenation up, and a
/// pointwise sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    params: Vec<Param<T>>,
}

impl<T: Scalar> UNet<T> {
    /// He-normal weights from a seeded stream, zero biases.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = if name.ends_with(".bias") {
                    vec![T::zero(); n]
                } else {
                    let fan_in: usize = if name.starts_with("up") {
                        shape[0] * shape[2..].iter().product::<usize>()
                    } else {
                        shape[1..].iter().product()
                    };
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                };
                Param {
                    name,
                    shape,
                    values,
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a model from named parameters, checking them against `config`.
    pub fn from_params(config: UNetConfig, params: Vec<Param<T>>) -> Result<Self, NetError> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(NetError::BadConfig(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.values.len() != shape.iter().product::<usize>() {
                return Err(NetError::BadConfig(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Checks `[N, C, s...]` against the configuration.
    pub fn check_input(&self, shape: &[usize]) -> Result<(), NetError> {
        let cfg = &self.config;
        if shape.len() != cfg.dims + 2 {
            return Err(NetError::BadShape(format!(
                "{}D model got input of shape {shape:?}",
                cfg.dims
            )));
        }
        if shape[1] != cfg.in_channels || shape[0] == 0 {
            return Err(NetError::BadShape(format!(
                "expected {} input channels, got shape {shape:?}",
                cfg.in_channels
            )));
        }
        let div = cfg.divisor();
        if shape[2..].iter().any(|&n| n == 0 || n % div != 0) {
            return Err(NetError::BadShape(format!(
                "spatial extents {:?} must be positive multiples of {div}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    /// Records the parameters on `tape` (differentiable when `track`) and
    /// runs the network on `x`. Returns per-voxel probabilities and the
    /// parameter handles in [`UNet::params`] order.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        track: bool,
    ) -> Result<(Var, Vec<Var>), NetError> {
        self.check_input(tape.shape(x))?;
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(&p.shape, p.values.clone(), track))
            .collect::<Result<Vec<_>, _>>()?;
        let mut next = vars.iter().copied();
        let mut take = || -> (Var, Var) {
            let w = next.next().expect("parameter list matches layout");
            let b = next.next().expect("parameter list matches layout");
            (w, b)
        };
        let conv_relu = |tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)| {
            tape.conv(x, w, Some(b), 1, KERNEL / 2).map(|y| tape.relu(y))
        };

        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        for l in 0..levels {
            let p1 = take();
            h = conv_relu(tape, h, p1)?;
            let p2 = take();
            h = conv_relu(tape, h, p2)?;
            if l + 1 < levels {
                skips.push(h);
                h = tape.max_pool(h, POOL)?;
            }
        }
        for _ in (0..levels - 1).rev() {
            let (uw, ub) = take();
            h = tape.conv_transpose(h, uw, Some(ub), POOL)?;
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(skip, h)?;
            let p1 = take();
            h = conv_relu(tape, h, p1)?;
            let p2 = take();
            h = conv_relu(tape, h, p2)?;
        }
        let (hw, hb) = take();
        let logits = tape.conv(h, hw, Some(hb), 1, 0)?;
        Ok((tape.sigmoid(logits), vars))
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, input: Vec<T>, shape: &[usize]) -> Result<Vec<T>, NetError> {
        let mut tape = Tape::new();
        let x = tape.leaf(shape, input, false)?;
        let (y, _) = self.forward(&mut tape, x, false)?;
        Ok(tape.value(y).to_vec())
    }
}

impl UNet<f32> {
    /// Copies into a `f64` model with identical weights.
    pub fn to_f64(&self) -> UNet<f64> {
        UNet {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|&v| v as f64).collect(),
                })
                .collect(),
        }
    }
}

impl SuperImageModel for UNet<f32> {
    fn predict_super_image(&self, si: &SuperImage) -> Result<SuperImage, NetError> {
        if self.config.dims != 2 {
            return Err(NetError::BadShape("super images need a 2D model".into()));
        }
        let shape = [1, si.channels(), si.height(), si.width()];
        let probs = self.predict(si.data().to_vec(), &shape)?;
        Ok(si.with_data(self.config.out_channels, probs)?)
    }
}

impl VolumeModel for UNet<f32> {
    fn predict_volume(&self, v: &Volume) -> Result<Volume, NetError> {
        if self.config.dims != 3 {
            return Err(NetError::BadShape("volumes need a 3D model".into()));
        }
        // (c, d, h, w) storage is already NCDHW for a batch of one.
        let shape = [1, v.channels(), v.depth(), v.height(), v.width()];
        let probs = self.predict(v.data().to_vec(), &shape)?;
        Ok(Volume::new(
            v.height(),
            v.width(),
            v.depth(),
            self.config.out_channels,
            v.spacing(),
            probs,
        )?)
    }
}
