//! k-fold training and evaluation driver, layout sweeps and result files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    aggregate, evaluate_si, evaluate_volume, format_mean_std, CaseScore, FoldResult,
    MetricsError, SegScores,
};
use crate::preprocess::{augment, znormalize, PreprocessError};
use crate::si_codec::{enumerate_layouts, squareness, to_super_image, CodecError, GridLayout, Volume};
use crate::synthgen::{generate, PhantomSpec, SynthError};
use crate::tinynet::{
    adamw_step, AdamWConfig, CosineSchedule, NetError, OptimState, Tape, UNet, UNetConfig,
};
use crate::volume_store::{Manifest, StoreError};

pub const CSV_HEADER: &str = "mode,sh,sw,image_size,dsc_mean,dsc_std,precision_mean,\
precision_std,recall_mean,recall_std,seconds_per_epoch";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("k = {k} folds is invalid for {n} cases")]
    BadK { n: usize, k: usize },
    #[error("loss or gradient became NaN or infinite in fold {fold}, epoch {epoch}")]
    NumericalDivergence { fold: usize, epoch: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::BadK { .. } | HarnessError::Json(_) => 2,
            HarnessError::NumericalDivergence { .. } => 3,
            HarnessError::Synth(SynthError::InfeasibleSpec(_)) => 2,
            HarnessError::Net(NetError::BadConfig(_)) => 2,
            HarnessError::Store(StoreError::Manifest(_)) => 2,
            HarnessError::Codec(CodecError::InvalidLayout { .. } | CodecError::LayoutMismatch { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Si2d,
    Vol3d,
}

impl Mode {
    pub fn dims(self) -> usize {
        match self {
            Mode::Si2d => 2,
            Mode::Vol3d => 3,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Si2d => "si2d",
            Mode::Vol3d => "vol3d",
        })
    }
}

impl FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "si2d" => Ok(Mode::Si2d),
            "vol3d" => Ok(Mode::Vol3d),
            _ => Err(HarnessError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Dataset {
    /// Path to a manifest JSON.
    Manifest(PathBuf),
    Synthetic { spec: PhantomSpec, cases: usize },
}

fn default_epochs() -> usize {
    100
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub mode: Mode,
    /// Required for `si2d`, ignored for `vol3d`.
    #[serde(default)]
    pub grid: Option<GridLayout>,
    pub folds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub unet: UNetConfig,
    #[serde(default)]
    pub augmentation: bool,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub schedule: CosineSchedule,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Evaluate validation cases on the rayon pool.
    #[serde(default)]
    pub parallel_eval: bool,
    /// When false, timings are written as zero so reruns are byte-identical.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

impl ExperimentConfig {
    /// Desk-scale defaults on the synthetic task.
    pub fn synthetic(mode: Mode, output_dir: impl Into<PathBuf>) -> Self {
        let spec = PhantomSpec::default();
        Self {
            mode,
            grid: (mode == Mode::Si2d).then_some(GridLayout { sh: 4, sw: 4 }),
            folds: 2,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            unet: UNetConfig {
                dims: mode.dims(),
                in_channels: spec.channels(),
                ..Default::default()
            },
            dataset: Dataset::Synthetic { spec, cases: 40 },
            augmentation: false,
            output_dir: output_dir.into(),
            schedule: CosineSchedule::default(),
            optimizer: AdamWConfig::default(),
            parallel_eval: false,
            record_timing: true,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| {
            HarnessError::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.unet.dims != self.mode.dims() {
            return bad(format!(
                "mode {} needs a {}D model, unet.dims is {}",
                self.mode,
                self.mode.dims(),
                self.unet.dims
            ));
        }
        if self.unet.out_channels != 1 {
            return bad("binary segmentation needs unet.out_channels = 1".into());
        }
        if self.mode == Mode::Si2d && self.grid.is_none() {
            return bad("si2d needs a grid".into());
        }
        let s = &self.schedule;
        if !(s.period > 0.0 && s.lr_min >= 0.0 && s.lr_max >= s.lr_min) {
            return bad("schedule needs period > 0 and 0 <= lr_min <= lr_max".into());
        }
        self.unet.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Data-dependent checks: channels, grid/depth, pooling divisibility.
    fn check_data(&self, h: usize, w: usize, d: usize, c: usize) -> Result<(), HarnessError> {
        if c != self.unet.in_channels {
            return Err(HarnessError::Config(format!(
                "images have {c} channels, unet.in_channels is {}",
                self.unet.in_channels
            )));
        }
        let extents = match self.mode {
            Mode::Si2d => {
                let g = self.grid.expect("validated");
                g.check_depth(d)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                vec![h * g.sh, w * g.sw]
            }
            Mode::Vol3d => vec![d, h, w],
        };
        let div = self.unet.divisor();
        if extents.iter().any(|n| n % div != 0) {
            return Err(HarnessError::Config(format!(
                "network input {extents:?} is not divisible by {div}"
            )));
        }
        Ok(())
    }
}

/// Case with a stable identifier.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub mask: Volume,
}

/// Loads the configured dataset and z-normalizes every image.
pub fn load_cases(dataset: &Dataset) -> Result<Vec<Case>, HarnessError> {
    let raw = match dataset {
        Dataset::Manifest(path) => Manifest::load(path)?.read_cases()?,
        Dataset::Synthetic { spec, cases } => generate(spec, *cases)?
            .into_iter()
            .enumerate()
            .map(|(i, (image, mask))| (format!("case{i:04}"), image, mask))
            .collect(),
    };
    let cases: Vec<Case> = raw
        .into_iter()
        .map(|(id, image, mask)| Case {
            id,
            image: znormalize(&image),
            mask,
        })
        .collect();
    let Some(first) = cases.first() else {
        return Err(HarnessError::Config("dataset is empty".into()));
    };
    let dims = first.image.dims();
    for c in &cases {
        let (h, w, d, _) = c.image.dims();
        if c.image.dims() != dims || c.mask.dims() != (h, w, d, 1) {
            return Err(HarnessError::Config(format!(
                "case {} has image {:?} and mask {:?}, expected image {dims:?}",
                c.id,
                c.image.dims(),
                c.mask.dims()
            )));
        }
    }
    Ok(cases)
}

/// Seeded shuffle of `0..n`, cut into `k` contiguous validation folds whose
/// sizes differ by at most one (larger folds first).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, HarnessError> {
    if k < 2 || k > n {
        return Err(HarnessError::BadK { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Per-stream RNG so every (fold, epoch) draw is independent of the others.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Network input for one case: SI pixels in 2D mode, the raw volume in 3D.
fn network_input(cfg: &ExperimentConfig, v: &Volume) -> Result<Vec<f32>, HarnessError> {
    Ok(match cfg.mode {
        Mode::Si2d => to_super_image(v, cfg.grid.expect("validated"))?.into_data(),
        Mode::Vol3d => v.data().to_vec(),
    })
}

fn batch_shape(cfg: &ExperimentConfig, n: usize, c: usize, v: &Volume) -> Vec<usize> {
    let (h, w, d, _) = v.dims();
    match cfg.mode {
        Mode::Si2d => {
            let g = cfg.grid.expect("validated");
            vec![n, c, h * g.sh, w * g.sw]
        }
        Mode::Vol3d => vec![n, c, d, h, w],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub result: FoldResult,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Wall-clock training time; zero when timing is disabled.
    pub train_seconds: f64,
}

fn train_fold(
    cfg: &ExperimentConfig,
    cases: &[Case],
    train: &[usize],
    fold: usize,
) -> Result<(UNet<f32>, Vec<f64>), HarnessError> {
    let model_seed = cfg.seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut model = UNet::<f32>::new(cfg.unet, model_seed)?;
    let mut state = OptimState::new(model.params(), cfg.optimizer);
    let batch = cfg.batch_size.min(train.len());
    let channels = cfg.unet.in_channels;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order = train.to_vec();
    for epoch in 0..cfg.epochs {
        let stream = ((fold as u64) << 32) | epoch as u64;
        let mut rng = stream_rng(cfg.seed, stream);
        order.shuffle(&mut rng);
        let lr = cfg.schedule.lr(epoch);
        let mut total = 0.0;
        let steps = order.len() / batch;
        for (step, chunk) in order.chunks_exact(batch).enumerate() {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (j, &i) in chunk.iter().enumerate() {
                let c = &cases[i];
                let (img, mask) = if cfg.augmentation {
                    let aug_seed = cfg.seed
                        ^ (stream << 16)
                        ^ ((step * batch + j) as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
                    augment(&c.image, &c.mask, aug_seed)?
                } else {
                    (c.image.clone(), c.mask.clone())
                };
                x.extend(network_input(cfg, &img)?);
                y.extend(network_input(cfg, &mask)?);
            }
            let reference = &cases[chunk[0]].image;
            let mut tape = Tape::new();
            let xv = tape.leaf(&batch_shape(cfg, chunk.len(), channels, reference), x, false)?;
            let yv = tape.leaf(&batch_shape(cfg, chunk.len(), 1, reference), y, false)?;
            let (pred, params) = model.forward(&mut tape, xv, true)?;
            let loss = tape.dice_bce(pred, yv)?;
            let value = tape.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(HarnessError::NumericalDivergence { fold, epoch });
            }
            total += value;
            tape.backward(loss)?;
            let grads: Vec<&[f32]> = params.iter().map(|&p| tape.grad(p)).collect();
            // Saturated sigmoids can keep the loss finite after the weights blew up.
            if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(HarnessError::NumericalDivergence { fold, epoch });
            }
            adamw_step(model.params_mut(), &grads, &mut state, lr)?;
        }
        losses.push(if steps > 0 { total / steps as f64 } else { 0.0 });
    }
    Ok((model, losses))
}

/// Scores `cases[idx]`, serially or on the rayon pool; same order either way.
pub fn evaluate_cases(
    cfg: &ExperimentConfig,
    model: &UNet<f32>,
    cases: &[Case],
    idx: &[usize],
) -> Result<Vec<CaseScore>, HarnessError> {
    let one = |&i: &usize| -> Result<CaseScore, HarnessError> {
        let c = &cases[i];
        let scores = match cfg.mode {
            Mode::Si2d => evaluate_si(model, &c.image, &c.mask, cfg.grid.expect("validated"))?,
            Mode::Vol3d => evaluate_volume(model, &c.image, &c.mask)?,
        };
        Ok(CaseScore {
            id: c.id.clone(),
            scores,
        })
    };
    if cfg.parallel_eval {
        idx.par_iter().map(one).collect()
    } else {
        idx.iter().map(one).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_mean_std(self.mean, self.std))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    /// Network input extent, e.g. `"128x128"` for a 4×4 SI of 32×32 slices.
    pub image_size: String,
    pub folds: Vec<FoldRecord>,
    pub dsc: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub seconds_per_epoch: f64,
}

impl RunRecord {
    pub fn all_cases(&self) -> impl Iterator<Item = &CaseScore> {
        self.folds.iter().flat_map(|f| &f.result.cases)
    }

    /// `"si2d 4x4 128x128: DSC 0.779±0.031 precision … recall …"`
    pub fn summary(&self) -> String {
        let layout = match (self.config.mode, self.config.grid) {
            (Mode::Si2d, Some(g)) => format!(" {g}"),
            _ => String::new(),
        };
        format!(
            "{}{layout} {}: DSC {} precision {} recall {} ({:.3} s/epoch)",
            self.config.mode,
            self.image_size,
            self.dsc,
            self.precision,
            self.recall,
            self.seconds_per_epoch
        )
    }

    pub fn csv_row(&self) -> String {
        let (sh, sw) = match (self.config.mode, self.config.grid) {
            (Mode::Si2d, Some(g)) => (g.sh.to_string(), g.sw.to_string()),
            _ => (String::new(), String::new()),
        };
        format!(
            "{},{sh},{sw},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.config.mode,
            self.image_size,
            self.dsc.mean,
            self.dsc.std,
            self.precision.mean,
            self.precision.std,
            self.recall.mean,
            self.recall.std,
            self.seconds_per_epoch
        )
    }
}

/// Mean and sample std of one metric over every validation case of every fold.
fn pooled(folds: &[FoldRecord], f: fn(&SegScores) -> f64) -> Result<MeanStd, HarnessError> {
    let values: Vec<f64> = folds
        .iter()
        .flat_map(|r| r.result.cases.iter().map(move |c| f(&c.scores)))
        .collect();
    let (mean, std) = aggregate(&values)?;
    Ok(MeanStd { mean, std })
}

/// Trains and validates one model per fold.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    run_experiment_with(cfg, |_, _| Ok(()))
}

/// [`run_experiment`], handing each trained fold model to `on_fold`.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, on_fold: F) -> Result<RunRecord, HarnessError>
where
    F: FnMut(usize, &UNet<f32>) -> Result<(), HarnessError>,
{
    cfg.validate()?;
    let cases = load_cases(&cfg.dataset)?;
    run_on_cases(cfg, &cases, on_fold)
}

fn run_on_cases<F>(
    cfg: &ExperimentConfig,
    cases: &[Case],
    mut on_fold: F,
) -> Result<RunRecord, HarnessError>
where
    F: FnMut(usize, &UNet<f32>) -> Result<(), HarnessError>,
{
    cfg.validate()?;
    let (h, w, d, c) = cases
        .first()
        .ok_or_else(|| HarnessError::Config("dataset is empty".into()))?
        .image
        .dims();
    cfg.check_data(h, w, d, c)?;
    let image_size = match cfg.mode {
        Mode::Si2d => {
            let g = cfg.grid.expect("validated");
            format!("{}x{}", h * g.sh, w * g.sw)
        }
        Mode::Vol3d => format!("{h}x{w}x{d}"),
    };
    let splits = kfold_split(cases.len(), cfg.folds, cfg.seed)?;
    let mut folds = Vec::with_capacity(splits.len());
    let mut train_time = 0.0;
    for (fold, val) in splits.iter().enumerate() {
        let train: Vec<usize> = splits
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        let started = Instant::now();
        let (model, losses) = train_fold(cfg, cases, &train, fold)?;
        let seconds = if cfg.record_timing {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        train_time += seconds;
        on_fold(fold, &model)?;
        let scores = evaluate_cases(cfg, &model, cases, val)?;
        folds.push(FoldRecord {
            result: FoldResult::new(fold, scores)?,
            losses,
            train_seconds: seconds,
        });
    }
    let epochs = cfg.epochs * cfg.folds;
    Ok(RunRecord {
        config: cfg.clone(),
        image_size,
        dsc: pooled(&folds, |s| s.dsc)?,
        precision: pooled(&folds, |s| s.precision)?,
        recall: pooled(&folds, |s| s.recall)?,
        seconds_per_epoch: if epochs > 0 { train_time / epochs as f64 } else { 0.0 },
        folds,
    })
}

/// Every factor pair of `depth`, most square SI first.
pub fn all_layouts(depth: usize) -> Vec<GridLayout> {
    enumerate_layouts(depth)
}

/// One si2d run per layout on shared data, folds and seed; rows sorted by
/// SI squareness (most square first).
pub fn grid_sweep(
    cfg: &ExperimentConfig,
    layouts: &[GridLayout],
) -> Result<Vec<RunRecord>, HarnessError> {
    if layouts.is_empty() {
        return Err(HarnessError::Config("no layouts to sweep".into()));
    }
    let mut base = cfg.clone();
    base.mode = Mode::Si2d;
    base.grid = Some(layouts[0]);
    base.validate()?;
    let cases = load_cases(&cfg.dataset)?;
    let (h, w, d, _) = cases[0].image.dims();
    for g in layouts {
        g.check_depth(d)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let mut sorted = layouts.to_vec();
    sorted.sort_by(|a, b| {
        squareness(*b, h, w)
            .total_cmp(&squareness(*a, h, w))
            .then((a.sh, a.sw).cmp(&(b.sh, b.sw)))
    });
    sorted
        .into_iter()
        .map(|g| {
            let mut run = base.clone();
            run.grid = Some(g);
            run_on_cases(&run, &cases, |_, _| Ok(()))
        })
        .collect()
}

/// Writes `results.csv` and `results.json` into `dir` and returns the
/// summary lines.
pub fn emit_results(records: &[RunRecord], dir: &Path) -> Result<Vec<String>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(dir.join("results.csv"), csv)?;
    let mut json = serde_json::to_string_pretty(records)?;
    json.push('\n');
    fs::write(dir.join("results.json"), json)?;
    Ok(records.iter().map(RunRecord::summary).collect())
}

/// Re-reads the JSON written by [`emit_results`].
pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, HarnessError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
