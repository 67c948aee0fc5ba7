//! Evaluation over a whole split with a fixed channel seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::predict;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, psnr_per_image};
use crate::pipeline::{RelaySystem, Scheme};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub psnr_db: f64,
    /// Set when any image hit the PSNR cap.
    pub saturated: bool,
    pub accuracy: f64,
    pub eval_size: usize,
}

pub const EVAL_BATCH: usize = 64;

/// Inference-mode evaluation of one scheme: mean per-image PSNR of the
/// destination reconstruction and destination classification accuracy.
/// Each image sees one channel realization drawn from `channel_seed`.
pub fn evaluate(sys: &RelaySystem, scheme: Scheme, data: &LabeledImageSet, channel_seed: u64) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::invalid("eval split", "is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(channel_seed);
    let mut psnr_sum = 0.0;
    let mut saturated = false;
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(&chunk, sys.dtype(), sys.device())?;
        let out = match scheme {
            Scheme::MtmlRsc => sys.forward_mtml_infer(&images, &mut rng)?,
            Scheme::Baseline => sys.forward_baseline(&images, &mut rng)?,
        };
        for (db, sat) in psnr_per_image(&images, &out.dest_recon)? {
            psnr_sum += db;
            saturated |= sat;
        }
        preds.extend(predict(&out.dest_logits)?);
    }
    Ok(EvalResult {
        psnr_db: psnr_sum / data.len() as f64,
        saturated,
        accuracy: accuracy(&preds, data.labels())?,
        eval_size: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSensitivity {
    /// Per-image MSE with the true label.
    pub correct_mse: Vec<f64>,
    /// Per-image MSE averaged over every wrong label.
    pub wrong_mse: Vec<f64>,
}

impl LabelSensitivity {
    /// Fraction of images whose true-label MSE is below the wrong-label average.
    pub fn fraction_correct_better(&self) -> f64 {
        let wins = self
            .correct_mse
            .iter()
            .zip(&self.wrong_mse)
            .filter(|(c, w)| c < w)
            .count();
        wins as f64 / self.correct_mse.len().max(1) as f64
    }
}

fn per_image_mse(a: &candle_core::Tensor, b: &candle_core::Tensor) -> Result<Vec<f64>> {
    Ok((a.to_dtype(candle_core::DType::F64)? - b.to_dtype(candle_core::DType::F64)?)?
        .sqr()?
        .flatten_from(1)?
        .mean(1)?
        .to_vec1::<f64>()?)
}

/// Decodes each image's RD-link signal with every class label and compares the
/// true label against the others. The relay encodes with the true label, so
/// only the destination decoder's conditioning varies.
pub fn label_sensitivity(sys: &RelaySystem, data: &LabeledImageSet, channel_seed: u64) -> Result<LabelSensitivity> {
    let classes = sys.spec().num_classes;
    if classes < 2 {
        return Err(Error::invalid("num_classes", "label sensitivity needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(channel_seed);
    let mut correct_mse = Vec::with_capacity(data.len());
    let mut wrong_mse = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(&chunk, sys.dtype(), sys.device())?;
        let out = sys.forward_mtml_train(&images, &labels, &mut rng)?;
        let y = &out.received.relay_dest.equalized;
        let mut by_class = Vec::with_capacity(classes);
        for k in 0..classes as u32 {
            let recon = sys.decode_with_class(y, &vec![k; labels.len()])?;
            by_class.push(per_image_mse(&images, &recon)?);
        }
        for (i, &z) in labels.iter().enumerate() {
            correct_mse.push(by_class[z as usize][i]);
            let wrong: f64 = (0..classes)
                .filter(|&k| k != z as usize)
                .map(|k| by_class[k][i])
                .sum();
            wrong_mse.push(wrong / (classes - 1) as f64);
        }
    }
    Ok(LabelSensitivity { correct_mse, wrong_mse })
}
