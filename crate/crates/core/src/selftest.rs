//! Quick invariant checks runnable from the CLI on a fresh checkout.

use candle_core::{DType, Device, Tensor, D};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{
    mmse_equalize, power_normalize_tensor, sample_realization, snr_to_noise_var, LinkConfig,
    ReceivedSignal,
};
use crate::config::{derive_dims, ExperimentConfig, FadingKind};
use crate::error::Result;
use crate::fusion::{FusionSpec, MutualAttention};
use crate::loss::{loss_stage1, loss_stage2, loss_stage3, scalar};
use crate::pipeline::RelaySystem;
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn dims() -> Result<Check> {
    let full = derive_dims(&ExperimentConfig {
        image_size: 96,
        ..Default::default()
    })?;
    let toy = derive_dims(&ExperimentConfig::default())?;
    let ok = (full.n_patches, full.patch_len_real, toy.n_patches, toy.patch_len_real) == (576, 8, 64, 8);
    Ok(check(
        "dimension arithmetic",
        ok,
        format!("96px n={} l={}; 32px n={} l={}", full.n_patches, full.patch_len_real, toy.n_patches, toy.patch_len_real),
    ))
}

fn channel_stats() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let link = LinkConfig {
        distance: 1.0,
        exponent: 2.0,
        fading: FadingKind::Rayleigh,
        noise_var: snr_to_noise_var(5.0, 1.0),
    };
    let draw = sample_realization((1000, 100), &link, &mut rng);
    let n = draw.noise.len() as f64;
    let noise_var = draw.noise.iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
    let gain = draw.gains.iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
    let ok = (noise_var / link.noise_var - 1.0).abs() < 0.02 && (gain - 1.0).abs() < 0.02;
    Ok(check(
        "channel statistics",
        ok,
        format!("noise {noise_var:.5} vs {:.5}; E|h|^2 {gain:.5}", link.noise_var),
    ))
}

fn equalizer() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = ndarray::Array2::from_shape_fn((4, 16), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let gains = ndarray::Array2::from_shape_fn((4, 16), |_| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
    let link = LinkConfig {
        distance: 1.0,
        exponent: 2.0,
        fading: FadingKind::Rayleigh,
        noise_var: 0.0,
    };
    let y = ReceivedSignal {
        values: &gains * &x,
        gains,
        link,
    };
    let xh = mmse_equalize(&y, 1.0);
    let err = (&xh - &x).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
        / x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    Ok(check("noiseless equalization", err < 1e-6, format!("relative error {err:.2e}")))
}

fn power() -> Result<Check> {
    let x = Tensor::randn(0f64, 3.0, (8, 64, 8), &Device::Cpu)?;
    let y = power_normalize_tensor(&x, 1.0)?;
    let p = y.sqr()?.sum((1, 2))?.to_vec1::<f64>()?;
    let worst = p.iter().map(|e| (e / 256.0 - 1.0).abs()).fold(0.0, f64::max);
    Ok(check("power normalization", worst < 1e-5, format!("max deviation {worst:.2e}")))
}

fn losses() -> Result<Check> {
    let logits = Tensor::zeros((4, 10), DType::F64, &Device::Cpu)?;
    let ce = scalar(&loss_stage2(&logits, &[0, 3, 7, 9])?)?;
    let s = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu)?;
    let r = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu)?;
    let l1 = scalar(&loss_stage1(&s, &r)?)?;
    let l3 = loss_stage3(&s, &r, &logits.narrow(0, 0, 2)?, &[1, 2], 0.0)?;
    let ok = (ce - 10f64.ln()).abs() < 1e-9 && scalar(&l3.total)? == l1;
    Ok(check("loss identities", ok, format!("uniform CE {ce:.9}")))
}

fn fusion_degenerate() -> Result<Check> {
    let store = ParamStore::new(3, DType::F64, &Device::Cpu);
    let spec = FusionSpec {
        n_groups: 3,
        patch_len: 8,
        heads: 2,
        head_dim: 4,
        proj_len: 32,
    };
    let m = MutualAttention::new(&spec, &store.root())?;
    let a = Tensor::randn(0f64, 1.0, (2, 3, 8), &Device::Cpu)?;
    let b = Tensor::randn(0f64, 1.0, (2, 3, 8), &Device::Cpu)?;
    let w = m.attention_weights(&a, &b)?;
    let rows = w.sum(D::Minus1)?.flatten_all()?.to_vec1::<f64>()?;
    let worst = rows.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    Ok(check("attention rows normalized", worst < 1e-9, format!("max deviation {worst:.2e}")))
}

fn forward_shapes() -> Result<Check> {
    let cfg = ExperimentConfig {
        image_size: 16,
        widths: [8, 16],
        blocks: [1, 1],
        ..Default::default()
    };
    let sys = RelaySystem::new(&cfg, DType::F32, &Device::Cpu)?;
    let img = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = sys.forward_mtml_infer(&img, &mut rng)?;
    let ok = out.dest_recon.dims() == [2, 3, 16, 16] && out.dest_logits.dims() == [2, 2];
    Ok(check("forward graph shapes", ok, format!("recon {:?}", out.dest_recon.dims())))
}

pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![
        dims()?,
        channel_stats()?,
        equalizer()?,
        power()?,
        losses()?,
        fusion_degenerate()?,
        forward_shapes()?,
    ])
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
