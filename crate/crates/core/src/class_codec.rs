//! Label attention and the class-aided JSCC encoder/decoder.
//!
//! A label gate maps a one-hot class vector through two fully-connected
//! layers (GELU between) to a vector of the local token width, then
//! multiplies it into every token. The class-aided encoder gates the end of
//! both stages; the class-aided decoder gates only the end of its stage 2.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;

use crate::codec::{apply_gate, CodecSpec, JsccDecoder, JsccEncoder};
use crate::error::{Error, Result};
use crate::nn::layers::{linear, Mlp};
use crate::nn::{Init, ParamBuilder};

pub fn one_hot(labels: &[u32], num_classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; labels.len() * num_classes];
    for (i, &z) in labels.iter().enumerate() {
        let z = z as usize;
        if z >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: z,
                num_classes,
            });
        }
        data[i * num_classes + z] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), num_classes), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct LabelGate {
    mlp: Mlp,
    num_classes: usize,
    width: usize,
}

impl LabelGate {
    pub fn new(num_classes: usize, width: usize, pb: &ParamBuilder) -> Result<Self> {
        let fc1 = linear(num_classes, width, &pb.pp("fc1"))?;
        let bound = 1.0 / (width as f64).sqrt();
        let w2 = pb.pp("fc2").get((width, width), "weight", Init::Uniform(bound))?;
        // Gates start around one so an untrained gate roughly passes features through.
        let b2 = pb.pp("fc2").get(width, "bias", Init::Const(1.0))?;
        Ok(Self {
            mlp: Mlp::from_layers(fc1, Linear::new(w2, Some(b2))),
            num_classes,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Gate vectors `(batch, width)` for a batch of labels.
    pub fn gate(&self, labels: &[u32], dtype: DType, device: &Device) -> Result<Tensor> {
        let z = one_hot(labels, self.num_classes, dtype, device)?;
        Ok(self.mlp.forward(&z)?)
    }

    /// Multiplies the label's gate into every token of `(batch, tokens, width)`.
    pub fn apply(&self, tokens: &Tensor, labels: &[u32]) -> Result<Tensor> {
        let g = self.gate(labels, tokens.dtype(), tokens.device())?;
        apply_gate(tokens.clone(), Some(&g))
    }
}

fn check_batch(batch: usize, labels: &[u32]) -> Result<()> {
    if batch != labels.len() {
        return Err(Error::LengthMismatch {
            left: batch,
            right: labels.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ClassAidedEncoder {
    backbone: JsccEncoder,
    gates: [LabelGate; 2],
}

impl ClassAidedEncoder {
    pub fn new(spec: &CodecSpec, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            backbone: JsccEncoder::new(spec, &pb.pp("backbone"))?,
            gates: [
                LabelGate::new(spec.num_classes, spec.widths[0], &pb.pp("gate1"))?,
                LabelGate::new(spec.num_classes, spec.widths[1], &pb.pp("gate2"))?,
            ],
        })
    }

    pub fn gates(&self) -> &[LabelGate; 2] {
        &self.gates
    }

    pub fn encode_with_class(&self, img: &Tensor, labels: &[u32]) -> Result<Tensor> {
        check_batch(img.dim(0)?, labels)?;
        let (dt, dev) = (img.dtype(), img.device());
        let g1 = self.gates[0].gate(labels, dt, dev)?;
        let g2 = self.gates[1].gate(labels, dt, dev)?;
        self.backbone.encode_gated(img, [Some(&g1), Some(&g2)])
    }
}

#[derive(Debug, Clone)]
pub struct ClassAidedDecoder {
    backbone: JsccDecoder,
    gate: LabelGate,
}

impl ClassAidedDecoder {
    pub fn new(spec: &CodecSpec, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            backbone: JsccDecoder::new(spec, &pb.pp("backbone"))?,
            gate: LabelGate::new(spec.num_classes, spec.widths[0], &pb.pp("gate"))?,
        })
    }

    pub fn gate(&self) -> &LabelGate {
        &self.gate
    }

    pub fn decode_with_class(&self, y: &Tensor, labels: &[u32]) -> Result<Tensor> {
        check_batch(y.dim(0)?, labels)?;
        let g = self.gate.gate(labels, y.dtype(), y.device())?;
        self.backbone.decode_gated(y, Some(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn spec() -> CodecSpec {
        CodecSpec {
            image_size: 16,
            blocks: [1, 2],
            widths: [16, 32],
            window: 4,
            mlp_ratio: 2,
            patch_len: 8,
            power: 1.0,
            num_classes: 3,
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn one_hot_layout_and_range() {
        let t = one_hot(&[2, 0], 3, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.to_vec2::<f32>().unwrap(), vec![vec![0., 0., 1.], vec![1., 0., 0.]]);
        assert!(matches!(
            one_hot(&[3], 3, DType::F32, &Device::Cpu),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn distinct_labels_give_distinct_gates() {
        let store = ParamStore::new(4, DType::F64, &Device::Cpu);
        let gate = LabelGate::new(3, 16, &store.root()).unwrap();
        let g = gate.gate(&[0, 1], DType::F64, &Device::Cpu).unwrap();
        let d = max_abs_diff(&g.get(0).unwrap(), &g.get(1).unwrap());
        assert!(d > 1e-3);
    }

    #[test]
    fn gate_broadcast_multiplies_each_token() {
        let store = ParamStore::new(5, DType::F64, &Device::Cpu);
        let gate = LabelGate::new(3, 4, &store.root()).unwrap();
        let tokens = Tensor::randn(0f64, 1.0, (1, 5, 4), &Device::Cpu).unwrap();
        let out = gate.apply(&tokens, &[1]).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap();
        let g = gate.gate(&[1], DType::F64, &Device::Cpu).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        let t = tokens.get(0).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert_eq!(out[i][j], t[i][j] * g[j]);
            }
        }
    }

    fn force_unit_gates(store: &ParamStore) {
        for (name, var) in store.named_vars() {
            if name.contains("gate") && name.ends_with("fc2.weight") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
            if name.contains("gate") && name.ends_with("fc2.bias") {
                var.set(&var.ones_like().unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn unit_gates_reduce_to_plain_codec() {
        let spec = spec();
        let store = ParamStore::new(6, DType::F32, &Device::Cpu);
        let enc = ClassAidedEncoder::new(&spec, &store.root().pp("enc")).unwrap();
        let dec = ClassAidedDecoder::new(&spec, &store.root().pp("dec")).unwrap();
        force_unit_gates(&store);
        let plain_enc = JsccEncoder::new(&spec, &store.root().pp("enc").pp("backbone")).unwrap();
        let plain_dec = JsccDecoder::new(&spec, &store.root().pp("dec").pp("backbone")).unwrap();
        let img = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let a = enc.encode_with_class(&img, &[0, 2]).unwrap();
        let b = plain_enc.encode(&img).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let c = dec.decode_with_class(&a, &[1, 1]).unwrap();
        let d = plain_dec.decode(&b).unwrap();
        assert_eq!(c.flatten_all().unwrap().to_vec1::<f32>().unwrap(), d.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn labels_change_outputs() {
        let spec = spec();
        let store = ParamStore::new(7, DType::F32, &Device::Cpu);
        let enc = ClassAidedEncoder::new(&spec, &store.root().pp("enc")).unwrap();
        let dec = ClassAidedDecoder::new(&spec, &store.root().pp("dec")).unwrap();
        let img = Tensor::rand(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let x0 = enc.encode_with_class(&img, &[0]).unwrap();
        let x1 = enc.encode_with_class(&img, &[1]).unwrap();
        assert!(max_abs_diff(&x0, &x1) > 1e-4);
        let x0b = enc.encode_with_class(&img, &[0]).unwrap();
        assert_eq!(max_abs_diff(&x0, &x0b), 0.0);
        let p: f32 = (x1.sqr().unwrap().sum_all().unwrap() / 64.0).unwrap().to_scalar().unwrap();
        assert!((p - 1.0).abs() < 1e-5);
        let r0 = dec.decode_with_class(&x0, &[0]).unwrap();
        let r1 = dec.decode_with_class(&x0, &[2]).unwrap();
        assert!(max_abs_diff(&r0, &r1) > 1e-5);
        assert!(enc.encode_with_class(&img, &[0, 1]).is_err());
        assert!(matches!(
            dec.decode_with_class(&x0, &[9]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
