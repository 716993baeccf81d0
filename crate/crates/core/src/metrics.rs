//! Overlap scores on binary 3D masks and fold-level aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::binarize;
use crate::si_codec::{from_super_image, to_super_image, CodecError, GridLayout, SuperImage, Volume};
use crate::tinynet::NetError;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction dims {pred:?} differ from ground truth dims {gt:?}")]
    DimMismatch {
        pred: (usize, usize, usize, usize),
        gt: (usize, usize, usize, usize),
    },
    #[error("non-binary value {value} in {which}")]
    NonBinaryInput { which: &'static str, value: f32 },
    #[error("cannot aggregate an empty list")]
    EmptyList,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] NetError),
}

/// Threshold applied to per-voxel probabilities before scoring.
pub const DECISION_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Voxel confusion counts of a binary prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Scores with the empty-set conventions: both empty → all ones; only the
    /// prediction empty → precision 1; only the truth empty → recall 1.
    pub fn scores(&self) -> SegScores {
        let pred = self.tp + self.fp;
        let gt = self.tp + self.fn_;
        let ratio = |num: u64, den: u64, empty: f64| {
            if den == 0 {
                empty
            } else {
                num as f64 / den as f64
            }
        };
        let dsc = ratio(2 * self.tp, pred + gt, 1.0);
        SegScores {
            dsc,
            precision: ratio(self.tp, pred, 1.0),
            recall: ratio(self.tp, gt, 1.0),
        }
    }
}

fn check_binary(v: &Volume, which: &'static str) -> Result<(), MetricsError> {
    match v.data().iter().find(|&&x| x != 0.0 && x != 1.0) {
        Some(&value) => Err(MetricsError::NonBinaryInput { which, value }),
        None => Ok(()),
    }
}

pub fn confusion(pred: &Volume, gt: &Volume) -> Result<Confusion, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimMismatch {
            pred: pred.dims(),
            gt: gt.dims(),
        });
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// DSC, precision and recall of binary `pred` against binary `gt`.
pub fn score(pred: &Volume, gt: &Volume) -> Result<SegScores, MetricsError> {
    Ok(confusion(pred, gt)?.scores())
}

/// Arithmetic mean and sample standard deviation (`n − 1`; 0 when `n == 1`).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// `0.779±0.031`
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}

/// Scores of one evaluated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub id: String,
    pub scores: SegScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub cases: Vec<CaseScore>,
    /// Mean over `cases`.
    pub aggregate: SegScores,
}

impl FoldResult {
    pub fn new(fold: usize, cases: Vec<CaseScore>) -> Result<Self, MetricsError> {
        let mean = |f: fn(&SegScores) -> f64| {
            aggregate(&cases.iter().map(|c| f(&c.scores)).collect::<Vec<_>>()).map(|(m, _)| m)
        };
        let aggregate = SegScores {
            dsc: mean(|s| s.dsc)?,
            precision: mean(|s| s.precision)?,
            recall: mean(|s| s.recall)?,
        };
        Ok(Self {
            fold,
            cases,
            aggregate,
        })
    }
}

/// A 2D network applied to super images. Returns per-pixel foreground
/// probabilities as a one-channel super image with the input's provenance.
pub trait SuperImageModel {
    fn predict_super_image(&self, si: &SuperImage) -> Result<SuperImage, NetError>;
}

/// A 3D network applied to whole volumes. Returns a one-channel probability
/// volume with the input's spatial extents.
pub trait VolumeModel {
    fn predict_volume(&self, v: &Volume) -> Result<Volume, NetError>;
}

/// Encodes `image` with `g`, runs the 2D model, decodes the prediction back to
/// a volume, binarizes at 0.5 and scores it against `gt` in voxel space.
pub fn evaluate_si<M: SuperImageModel + ?Sized>(
    model: &M,
    image: &Volume,
    gt: &Volume,
    g: GridLayout,
) -> Result<SegScores, MetricsError> {
    let si = to_super_image(image, g)?;
    let probs = model.predict_super_image(&si)?;
    let volume = from_super_image(&probs, g, image.height(), image.width())?;
    score(&binarize(&volume, DECISION_THRESHOLD), gt)
}

/// 3D counterpart of [`evaluate_si`]; shares the binarize-then-score path.
pub fn evaluate_volume<M: VolumeModel + ?Sized>(
    model: &M,
    image: &Volume,
    gt: &Volume,
) -> Result<SegScores, MetricsError> {
    let probs = model.predict_volume(image)?;
    score(&binarize(&probs, DECISION_THRESHOLD), gt)
}
