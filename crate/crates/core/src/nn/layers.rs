use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use super::params::{Init, ParamBuilder};
use crate::error::Result;

/// Linear layer with PyTorch-style uniform initialization.
pub fn linear(in_dim: usize, out_dim: usize, pb: &ParamBuilder) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = pb.get((out_dim, in_dim), "weight", Init::Uniform(bound))?;
    let b = pb.get(out_dim, "bias", Init::Uniform(bound))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_no_bias(in_dim: usize, out_dim: usize, pb: &ParamBuilder) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = pb.get((out_dim, in_dim), "weight", Init::Uniform(bound))?;
    Ok(Linear::new(w, None))
}

/// Layer normalization over the last dimension, built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            weight: pb.get(dim, "weight", Init::Const(1.0))?,
            bias: pb.get(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(in_dim, hidden, &pb.pp("fc1"))?,
            fc2: linear(hidden, out_dim, &pb.pp("fc2"))?,
        })
    }

    pub fn from_layers(fc1: Linear, fc2: Linear) -> Self {
        Self { fc1, fc2 }
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn layer_norm_standardizes_rows() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let ln = LayerNorm::new(6, &store.root()).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean = y.iter().sum::<f64>() / 6.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn linear_handles_token_batches() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let l = linear(4, 3, &store.root()).unwrap();
        let x = Tensor::zeros((2, 5, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 5, 3]);
    }
}
