//! Seeded synthetic phantoms: two-channel volumes whose foreground is a union
//! of random ellipsoids.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::si_codec::{CodecError, Volume};
use crate::volume_store::{write_volume, Manifest, ManifestRecord, StoreError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible phantom spec: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Volume(#[from] CodecError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `(H, W, D)` in voxels.
    pub shape: [usize; 3],
    /// Inclusive range of ellipsoids per case.
    pub n_blobs: (usize, usize),
    /// Inclusive semi-axis range in voxels, drawn independently per axis.
    pub radius: (f64, f64),
    /// Mean intensity inside the foreground, one entry per channel.
    pub foreground: Vec<f32>,
    /// Mean intensity outside the foreground, one entry per channel.
    pub background: Vec<f32>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32, 32, 16],
            n_blobs: (1, 3),
            radius: (3.0, 6.0),
            foreground: vec![1.0, 1.0],
            background: vec![0.0, 0.0],
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

/// One sampled ellipsoid: centre and semi-axes along `(h, w, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, h: usize, w: usize, d: usize) -> bool {
        let p = [h as f64, w as f64, d as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub mask: Volume,
    pub blobs: Vec<Ellipsoid>,
}

impl PhantomSpec {
    pub fn channels(&self) -> usize {
        self.foreground.len()
    }

    /// Largest semi-axis that fits along each axis.
    fn radius_cap(&self) -> [f64; 3] {
        self.shape.map(|n| (n as f64 - 1.0) / 2.0)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InfeasibleSpec(m));
        if self.shape.contains(&0) {
            return bad(format!("empty shape {:?}", self.shape));
        }
        if self.foreground.is_empty() || self.foreground.len() != self.background.len() {
            return bad("foreground/background channel counts differ or are empty".into());
        }
        if self.n_blobs.0 > self.n_blobs.1 {
            return bad(format!("blob range {:?} is empty", self.n_blobs));
        }
        let (rmin, rmax) = self.radius;
        if !(rmin >= 1.0) || !(rmax >= rmin) || !rmax.is_finite() {
            return bad(format!("radius range {:?} invalid", self.radius));
        }
        if let Some(a) = (0..3).find(|&a| rmin > self.radius_cap()[a]) {
            return bad(format!(
                "radius {rmin} does not fit axis {a} of extent {}",
                self.shape[a]
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Generates case `index`. Each case draws from its own stream, so case `i`
    /// is the same no matter how many cases are requested.
    pub fn generate_case(&self, index: u64) -> Result<Phantom, SynthError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let cap = self.radius_cap();
        let count = rng.gen_range(self.n_blobs.0..=self.n_blobs.1);
        let blobs: Vec<Ellipsoid> = (0..count)
            .map(|_| {
                let mut center = [0.0; 3];
                let mut radii = [0.0; 3];
                for a in 0..3 {
                    let hi = self.radius.1.min(cap[a]);
                    radii[a] = rng.gen_range(self.radius.0..=hi);
                    let top = self.shape[a] as f64 - 1.0 - radii[a];
                    center[a] = rng.gen_range(radii[a]..=top);
                }
                Ellipsoid { center, radii }
            })
            .collect();
        let [h, w, d] = self.shape;
        let mask = Volume::from_fn(h, w, d, 1, |hi, wi, di, _| {
            blobs.iter().any(|b| b.contains(hi, wi, di)) as u8 as f32
        })?;
        let noise = Normal::new(0.0f32, self.noise_sigma)
            .map_err(|e| SynthError::InfeasibleSpec(e.to_string()))?;
        let channels = self.channels();
        let plane = h * w * d;
        let mut data = Vec::with_capacity(plane * channels);
        for c in 0..channels {
            for (i, &m) in mask.data().iter().enumerate() {
                debug_assert!(i < plane);
                let mean = if m == 1.0 {
                    self.foreground[c]
                } else {
                    self.background[c]
                };
                let eps = if self.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push(mean + eps);
            }
        }
        let image = Volume::new(h, w, d, channels, [1.0; 3], data)?;
        Ok(Phantom { image, mask, blobs })
    }
}

/// `n` phantoms fully determined by `(spec, n)`.
pub fn generate(spec: &PhantomSpec, n: usize) -> Result<Vec<(Volume, Volume)>, SynthError> {
    (0..n as u64)
        .map(|i| spec.generate_case(i).map(|p| (p.image, p.mask)))
        .collect()
}

/// Writes `n` phantoms as SVOL pairs plus `manifest.json` into `dir`.
pub fn write_dataset(spec: &PhantomSpec, n: usize, dir: &Path) -> Result<PathBuf, SynthError> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for (i, (image, mask)) in generate(spec, n)?.into_iter().enumerate() {
        let id = format!("case{i:04}");
        let image_path = PathBuf::from(format!("{id}_image.svol"));
        let mask_path = PathBuf::from(format!("{id}_mask.svol"));
        write_volume(&image, dir.join(&image_path))?;
        write_volume(&mask, dir.join(&mask_path))?;
        manifest.records.push(ManifestRecord {
            id,
            image_path,
            mask_path,
        });
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
