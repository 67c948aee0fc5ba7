//! Reconstruction and classification metrics.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// PSNR reported for a zero-error reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    /// Batch mean of per-image PSNR, in dB.
    pub db: f64,
    /// Set when any image reached zero error and was reported at the cap.
    pub saturated: bool,
}

/// Per-image PSNR of images in `[0, 1]`, `(batch, ...)`.
pub fn psnr_per_image(reference: &Tensor, recon: &Tensor) -> Result<Vec<(f64, bool)>> {
    if reference.dims() != recon.dims() {
        return Err(Error::Dimension(format!(
            "psnr shapes differ: {:?} vs {:?}",
            reference.dims(),
            recon.dims()
        )));
    }
    let mse = (reference.to_dtype(DType::F64)? - recon.to_dtype(DType::F64)?)?
        .sqr()?
        .flatten_from(1)?
        .mean(1)?
        .to_vec1::<f64>()?;
    Ok(mse
        .into_iter()
        .map(|m| {
            if m <= 0.0 {
                (PSNR_CAP_DB, true)
            } else {
                ((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB), false)
            }
        })
        .collect())
}

pub fn psnr(reference: &Tensor, recon: &Tensor) -> Result<Psnr> {
    let per = psnr_per_image(reference, recon)?;
    if per.is_empty() {
        return Err(Error::Dimension("psnr of an empty batch".into()));
    }
    Ok(Psnr {
        db: per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64,
        saturated: per.iter().any(|p| p.1),
    })
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[u32], truth: &[u32]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truth.len(),
        });
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}
