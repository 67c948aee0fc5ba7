//! Training objectives for the three stages.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Stage-1 objective: mean squared error over batch and pixels.
pub fn loss_stage1(source: &Tensor, recon: &Tensor) -> Result<Tensor> {
    if source.dims() != recon.dims() {
        return Err(Error::Dimension(format!(
            "mse shapes differ: {:?} vs {:?}",
            source.dims(),
            recon.dims()
        )));
    }
    Ok((source - recon)?.sqr()?.mean_all()?)
}

/// Stage-2 objective: batch-mean cross-entropy of `(batch, classes)` logits against labels.
pub fn loss_stage2(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (batch, classes) = logits.dims2()?;
    if batch != labels.len() {
        return Err(Error::LengthMismatch {
            left: batch,
            right: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&z| z as usize >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            num_classes: classes,
        });
    }
    let idx = Tensor::from_slice(labels, (batch, 1), logits.device())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(logp.gather(&idx, 1)?.neg()?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct Stage3Loss {
    pub total: Tensor,
    pub mse: f64,
    pub cross_entropy: f64,
}

/// Stage-3 objective: `loss_stage1 + lambda * loss_stage2`.
pub fn loss_stage3(
    source: &Tensor,
    recon: &Tensor,
    logits: &Tensor,
    labels: &[u32],
    lambda_cls: f64,
) -> Result<Stage3Loss> {
    if !(lambda_cls >= 0.0) {
        return Err(Error::invalid("lambda_cls", "must be non-negative"));
    }
    let mse = loss_stage1(source, recon)?;
    let ce = loss_stage2(logits, labels)?;
    let total = if lambda_cls == 0.0 {
        mse.clone()
    } else {
        (&mse + (&ce * lambda_cls)?)?
    };
    Ok(Stage3Loss {
        mse: scalar(&mse)?,
        cross_entropy: scalar(&ce)?,
        total,
    })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn mse_cases() {
        let a = Tensor::rand(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(scalar(&loss_stage1(&a, &a).unwrap()).unwrap(), 0.0);
        let z = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let h = Tensor::full(0.5f64, (2, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(scalar(&loss_stage1(&z, &h).unwrap()).unwrap(), 0.25);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros((3, 10), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&loss_stage2(&logits, &[0, 4, 9]).unwrap()).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let logits = Tensor::new(&[[50.0f64, 0.0, 0.0]], &Device::Cpu).unwrap();
        assert!(scalar(&loss_stage2(&logits, &[0]).unwrap()).unwrap() < 1e-20);
    }

    #[test]
    fn label_errors() {
        let logits = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            loss_stage2(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
        assert!(loss_stage2(&logits, &[0]).is_err());
    }

    #[test]
    fn zero_weight_is_plain_mse() {
        let s = Tensor::rand(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let r = Tensor::rand(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let logits = Tensor::randn(0f64, 1.0, (2, 5), &Device::Cpu).unwrap();
        let l3 = loss_stage3(&s, &r, &logits, &[1, 2], 0.0).unwrap();
        let l1 = scalar(&loss_stage1(&s, &r).unwrap()).unwrap();
        assert_eq!(scalar(&l3.total).unwrap(), l1);
        assert!(l3.cross_entropy > 0.0);
        assert!(loss_stage3(&s, &r, &logits, &[1, 2], -0.5).is_err());
    }
}
