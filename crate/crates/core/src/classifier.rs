//! Relay-node image classifier and destination-node signal classifier.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::codec::{CodecSpec, EncoderTrunk};
use crate::error::Result;
use crate::nn::layers::{linear, LayerNorm, Mlp};
use crate::nn::swin::SwinStage;
use crate::nn::ParamBuilder;

/// Classifies reconstructed images with the encoder's trunk, token-mean pooling and an MLP head.
#[derive(Debug, Clone)]
pub struct ImageClassifier {
    trunk: EncoderTrunk,
    norm: LayerNorm,
    head: Mlp,
    spec: CodecSpec,
}

impl ImageClassifier {
    pub fn new(spec: &CodecSpec, pb: &ParamBuilder) -> Result<Self> {
        let c2 = spec.widths[1];
        Ok(Self {
            trunk: EncoderTrunk::new(spec, &pb.pp("trunk"))?,
            norm: LayerNorm::new(c2, &pb.pp("norm"))?,
            head: Mlp::new(c2, c2, spec.num_classes, &pb.pp("head"))?,
            spec: *spec,
        })
    }

    /// Logits `(batch, num_classes)`.
    pub fn classify_image(&self, img: &Tensor) -> Result<Tensor> {
        self.spec.check_images(img)?;
        let x = self.trunk.forward_gated(img, [None, None])?;
        let pooled = self.norm.forward(&x)?.mean(1)?;
        Ok(self.head.forward(&pooled)?)
    }
}

/// Classifies received signals `(batch, n, l)`: a linear lift to width `c2`,
/// stage-2 Swin blocks over the patch grid, pooling, and an MLP head.
#[derive(Debug, Clone)]
pub struct SignalClassifier {
    lift: Linear,
    stage: SwinStage,
    norm: LayerNorm,
    head: Mlp,
    spec: CodecSpec,
}

impl SignalClassifier {
    pub fn new(spec: &CodecSpec, pb: &ParamBuilder) -> Result<Self> {
        let c2 = spec.widths[1];
        Ok(Self {
            lift: linear(spec.patch_len, c2, &pb.pp("lift"))?,
            stage: SwinStage::new(
                spec.blocks[1],
                c2,
                spec.stage2_grid(),
                spec.settings(c2),
                &pb.pp("stage"),
            )?,
            norm: LayerNorm::new(c2, &pb.pp("norm"))?,
            head: Mlp::new(c2, c2, spec.num_classes, &pb.pp("head"))?,
            spec: *spec,
        })
    }

    pub fn classify_signal(&self, y: &Tensor) -> Result<Tensor> {
        self.spec.check_signal(y)?;
        let x = self.stage.forward(&self.lift.forward(y)?)?;
        let pooled = self.norm.forward(&x)?.mean(1)?;
        Ok(self.head.forward(&pooled)?)
    }
}

/// Row-wise argmax of logits `(batch, classes)`.
pub fn predict(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits.argmax(D::Minus1)?.to_vec1::<u32>()?)
}

/// Row-wise softmax, for reporting class probabilities.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn spec() -> CodecSpec {
        CodecSpec {
            image_size: 16,
            blocks: [1, 2],
            widths: [16, 32],
            window: 4,
            mlp_ratio: 2,
            patch_len: 8,
            power: 1.0,
            num_classes: 10,
        }
    }

    #[test]
    fn logits_shape_and_softmax() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let cls = ImageClassifier::new(&spec(), &store.root()).unwrap();
        let img = Tensor::rand(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let logits = cls.classify_image(&img).unwrap();
        assert_eq!(logits.dims(), &[2, 10]);
        for row in probabilities(&logits).unwrap().to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let again = cls.classify_image(&img).unwrap();
        assert_eq!(
            logits.to_vec2::<f64>().unwrap(),
            again.to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn signal_classifier_preserves_batch_order() {
        let store = ParamStore::new(1, DType::F64, &Device::Cpu);
        let cls = SignalClassifier::new(&spec(), &store.root()).unwrap();
        let y = Tensor::randn(0f64, 1.0, (4, 16, 8), &Device::Cpu).unwrap();
        let all = cls.classify_signal(&y).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(all.len(), 4);
        for i in 0..4 {
            let one = cls
                .classify_signal(&y.narrow(0, i, 1).unwrap())
                .unwrap()
                .to_vec2::<f64>()
                .unwrap();
            for (a, b) in one[0].iter().zip(&all[i]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(cls.classify_signal(&y.narrow(2, 0, 6).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_constant_shift(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 10), 1..6),
            shift in -100.0f64..100.0,
        ) {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let t = Tensor::from_vec(flat, (rows.len(), 10), &Device::Cpu).unwrap();
            let shifted = (t.clone() + shift).unwrap();
            prop_assert_eq!(predict(&t).unwrap(), predict(&shifted).unwrap());
        }
    }
}
