//! Mutual attention: combines the direct-link (SD) and relayed (RD) signals.
//!
//! For every patch group `j`, independent fully-connected maps project the
//! SD group to keys `K_j` and values `V_j` and the RD group to queries `Q_j`,
//! each of length `heads * tokens * head_dim`. Each projection is split into
//! `heads` heads of `tokens` vectors of size `head_dim`, and
//! `softmax(Q_j K_j^T / sqrt(head_dim)) V_j` is taken per head. The group
//! outputs are flattened back and a shared projection maps each to `l` reals.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::error::{Error, Result};
use crate::nn::layers::linear;
use crate::nn::{Init, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionSpec {
    pub n_groups: usize,
    pub patch_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub proj_len: usize,
}

impl FusionSpec {
    /// Vectors per head inside one group.
    pub fn tokens(&self) -> usize {
        self.proj_len / (self.heads * self.head_dim)
    }
}

/// Independent affine maps, one per group: `(groups, in, out)` weights.
#[derive(Debug, Clone)]
struct GroupLinear {
    weight: Tensor,
    bias: Tensor,
}

impl GroupLinear {
    fn new(groups: usize, in_dim: usize, out_dim: usize, pb: &ParamBuilder) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.get((groups, in_dim, out_dim), "weight", Init::Uniform(bound))?,
            bias: pb.get((groups, 1, out_dim), "bias", Init::Uniform(bound))?,
        })
    }

    /// `(batch, groups, in)` to `(batch, groups, out)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = x.transpose(0, 1)?.contiguous()?;
        x.matmul(&self.weight)?
            .broadcast_add(&self.bias)?
            .transpose(0, 1)?
            .contiguous()
    }
}

#[derive(Debug, Clone)]
pub struct MutualAttention {
    query: GroupLinear,
    key: GroupLinear,
    value: GroupLinear,
    out: Linear,
    spec: FusionSpec,
}

impl MutualAttention {
    pub fn new(spec: &FusionSpec, pb: &ParamBuilder) -> Result<Self> {
        if spec.heads == 0 || spec.head_dim == 0 || spec.proj_len % (spec.heads * spec.head_dim) != 0 {
            return Err(Error::Dimension(format!(
                "projection length {} not divisible into {} heads of {}",
                spec.proj_len, spec.heads, spec.head_dim
            )));
        }
        let (n, l, p) = (spec.n_groups, spec.patch_len, spec.proj_len);
        Ok(Self {
            query: GroupLinear::new(n, l, p, &pb.pp("query"))?,
            key: GroupLinear::new(n, l, p, &pb.pp("key"))?,
            value: GroupLinear::new(n, l, p, &pb.pp("value"))?,
            out: linear(p, l, &pb.pp("out"))?,
            spec: *spec,
        })
    }

    pub fn spec(&self) -> &FusionSpec {
        &self.spec
    }

    fn check(&self, y_sd: &Tensor, y_rd: &Tensor) -> Result<()> {
        let want = [self.spec.n_groups, self.spec.patch_len];
        for (name, t) in [("sd", y_sd), ("rd", y_rd)] {
            let d = t.dims();
            if d.len() != 3 || d[1..] != want {
                return Err(Error::Dimension(format!(
                    "{name} signal {d:?}, expected (batch, {}, {})",
                    want[0], want[1]
                )));
            }
        }
        if y_sd.dims() != y_rd.dims() {
            return Err(Error::Dimension(format!(
                "link shapes differ: {:?} vs {:?}",
                y_sd.dims(),
                y_rd.dims()
            )));
        }
        Ok(())
    }

    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let s = &self.spec;
        x.reshape((b * n * s.heads, s.tokens(), s.head_dim))
    }

    /// Attention weights `(batch * groups * heads, tokens, tokens)`; each row sums to one.
    pub fn attention_weights(&self, y_sd: &Tensor, y_rd: &Tensor) -> Result<Tensor> {
        self.check(y_sd, y_rd)?;
        let q = self.split_heads(&self.query.forward(y_rd)?)?;
        let k = self.split_heads(&self.key.forward(y_sd)?)?;
        let scores = (q.matmul(&k.t()?)? / (self.spec.head_dim as f64).sqrt())?;
        Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
    }

    /// Per-group attention output before the shared output projection: `(batch, groups, proj_len)`.
    pub fn attend(&self, y_sd: &Tensor, y_rd: &Tensor) -> Result<Tensor> {
        let (b, n, _) = y_sd.dims3()?;
        let weights = self.attention_weights(y_sd, y_rd)?;
        let v = self.split_heads(&self.value.forward(y_sd)?)?;
        Ok(weights.matmul(&v)?.reshape((b, n, self.spec.proj_len))?)
    }

    /// Fused signal `(batch, n, l)`, same shape as `y_rd`.
    pub fn fuse(&self, y_sd: &Tensor, y_rd: &Tensor) -> Result<Tensor> {
        Ok(self.out.forward(&self.attend(y_sd, y_rd)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn spec() -> FusionSpec {
        FusionSpec {
            n_groups: 5,
            patch_len: 8,
            heads: 2,
            head_dim: 4,
            proj_len: 32,
        }
    }

    #[test]
    fn shapes_and_row_sums() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let m = MutualAttention::new(&spec(), &store.root()).unwrap();
        assert_eq!(m.spec().tokens(), 4);
        let a = Tensor::randn(0f64, 1.0, (3, 5, 8), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 1.0, (3, 5, 8), &Device::Cpu).unwrap();
        assert_eq!(m.fuse(&a, &b).unwrap().dims(), &[3, 5, 8]);
        let w = m.attention_weights(&a, &b).unwrap();
        assert_eq!(w.dims(), &[3 * 5 * 2, 4, 4]);
        for s in w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn full_scale_dimension_contract() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let spec = FusionSpec { n_groups: 576, ..spec() };
        let m = MutualAttention::new(&spec, &store.root()).unwrap();
        let a = Tensor::randn(0f32, 1.0, (1, 576, 8), &Device::Cpu).unwrap();
        assert_eq!(m.fuse(&a, &a).unwrap().dims(), &[1, 576, 8]);
    }

    #[test]
    fn mismatched_links_rejected() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let m = MutualAttention::new(&spec(), &store.root()).unwrap();
        let a = Tensor::zeros((1, 5, 8), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 4, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(m.fuse(&a, &b).is_err());
        let c = Tensor::zeros((2, 5, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(m.fuse(&a, &c).is_err());
    }
}
