//! Segmentation metrics and side-by-side figure output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, pixel_to_value, DataError, PairedDataset};
use crate::models::{ModelError, UNet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Threshold in tanh space separating background from foreground.
pub const DEFAULT_THRESHOLD: f32 = 0.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), bits.len());
        Self { shape, bits }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `+1` on foreground, `-1` elsewhere.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        Tensor::new(self.shape.clone(), data).expect("shape matches")
    }
}

/// Foreground wherever `pred > threshold` (strictly).
pub fn binarize(pred: &Tensor, threshold: f32) -> BinaryMask {
    BinaryMask::new(pred.shape().to_vec(), pred.data().iter().map(|&v| v > threshold).collect())
}

struct Counts {
    inter: usize,
    union: usize,
    sum: usize,
    agree: usize,
    total: usize,
}

fn counts(a: &BinaryMask, b: &BinaryMask) -> Result<Counts> {
    if a.shape != b.shape {
        return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let mut c = Counts { inter: 0, union: 0, sum: 0, agree: 0, total: a.bits.len() };
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        c.inter += (x && y) as usize;
        c.union += (x || y) as usize;
        c.sum += x as usize + y as usize;
        c.agree += (x == y) as usize;
    }
    Ok(c)
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let c = counts(a, b)?;
    Ok(if c.union == 0 { 1.0 } else { c.inter as f64 / c.union as f64 })
}

/// `2|a∩b| / (|a|+|b|)`; 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let c = counts(a, b)?;
    Ok(if c.sum == 0 { 1.0 } else { 2.0 * c.inter as f64 / c.sum as f64 })
}

pub fn pixel_accuracy(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let c = counts(a, b)?;
    Ok(c.agree as f64 / c.total as f64)
}

/// Anything that turns an image into a mask-space prediction in `[-1, 1]`.
pub trait MaskPredictor {
    fn predict(&self, image: &Tensor) -> Result<Tensor>;
}

impl MaskPredictor for UNet {
    fn predict(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.generate(image)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub name: String,
    pub iou: f64,
    pub dice: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub n_samples: usize,
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub mean_accuracy: f64,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len();
        let mean = |f: fn(&SampleMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            mean_iou: mean(|s| s.iou),
            mean_dice: mean(|s| s.dice),
            mean_accuracy: mean(|s| s.accuracy),
            n_samples: n,
            samples,
        }
    }

    /// One whitespace-separated line per sample (`name iou dice accuracy`),
    /// then a `mean` line. Values print at full round-trip precision.
    pub fn to_text(&self) -> String {
        let mut out = String::from("name iou dice accuracy\n");
        for s in &self.samples {
            let _ = writeln!(out, "{} {} {} {}", s.name, s.iou, s.dice, s.accuracy);
        }
        let _ = writeln!(out, "mean {} {} {}", self.mean_iou, self.mean_dice, self.mean_accuracy);
        out
    }
}

/// Scores a predictor on every sample of `test`: binarize at `threshold`,
/// compare with the ground-truth mask.
pub fn evaluate<P: MaskPredictor + ?Sized>(
    predictor: &P,
    test: &PairedDataset,
    threshold: f32,
) -> Result<MetricReport> {
    let samples = test
        .samples
        .iter()
        .map(|s| {
            let pred = binarize(&predictor.predict(&s.image)?, threshold);
            let truth = binarize(&s.mask, 0.0);
            Ok(SampleMetrics {
                name: s.name.clone(),
                iou: iou(&pred, &truth)?,
                dice: dice(&pred, &truth)?,
                accuracy: pixel_accuracy(&pred, &truth)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport::from_samples(samples))
}

/// Pixel value of the separator columns.
const SEPARATOR: f32 = 128.0;

/// Lays out `left | middle | right` separated by one mid-gray column each,
/// producing a `(1, C, H, 3W + 2)` tensor. One-channel panels are replicated
/// when another panel is RGB.
pub fn triptych_tensor(left: &Tensor, middle: &Tensor, right: &Tensor) -> Result<Tensor> {
    let dims = |t: &Tensor| t.dims4("triptych").map_err(|e| EvalError::ShapeMismatch(e.to_string()));
    let (l, m, r) = (dims(left)?, dims(middle)?, dims(right)?);
    if l[0] != 1 || (l[2], l[3]) != (m[2], m[3]) || (l[2], l[3]) != (r[2], r[3]) || m[0] != 1 || r[0] != 1
    {
        return Err(EvalError::ShapeMismatch(format!("panels {l:?}, {m:?}, {r:?}")));
    }
    let channels = [l[1], m[1], r[1]].into_iter().max().expect("three panels");
    if [l[1], m[1], r[1]].iter().any(|&c| c != 1 && c != channels) {
        return Err(EvalError::ShapeMismatch("panels mix incompatible channel counts".into()));
    }
    let (h, w) = (l[2], l[3]);
    let width = 3 * w + 2;
    let sep = pixel_to_value(SEPARATOR);
    let mut out = vec![sep; channels * h * width];
    for (p, t) in [left, middle, right].into_iter().enumerate() {
        let tc = t.shape()[1];
        let x0 = p * (w + 1);
        for c in 0..channels {
            let src = &t.data()[(if tc == 1 { 0 } else { c }) * h * w..][..h * w];
            for y in 0..h {
                let row = &mut out[(c * h + y) * width + x0..][..w];
                row.copy_from_slice(&src[y * w..][..w]);
            }
        }
    }
    Ok(Tensor::new(vec![1, channels, h, width], out).expect("dims"))
}

/// Writes the source image, ground truth and prediction side by side.
pub fn triptych(image: &Tensor, gt_mask: &Tensor, pred_mask: &Tensor, path: &Path) -> Result<()> {
    let t = triptych_tensor(image, gt_mask, pred_mask)?;
    data::write_image(&t, path)?;
    Ok(())
}
