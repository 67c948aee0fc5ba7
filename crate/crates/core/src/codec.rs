//! Base JSCC encoder (source node) and decoder (relay node).
//!
//! Encoder: 2x2 patch embedding to width `c1`, `n1` Swin blocks, patch
//! merging to width `c2`, `n2` Swin blocks, a per-token projection to `l`
//! reals, and per-sample power normalization. The decoder mirrors it with
//! patch division in place of merging and clamps the image to `[0, 1]`.
//!
//! Transmit signals use the packed real layout `(batch, n, l)`: the first
//! `l/2` values of a patch are real parts, the last `l/2` imaginary parts.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use crate::config::{derive_dims, heads_for_width, ExperimentConfig};
use crate::channel::power_normalize_tensor;
use crate::error::{Error, Result};
use crate::nn::layers::{linear, LayerNorm};
use crate::nn::swin::{Grid, PatchDivision, PatchEmbed, PatchMerging, PatchUnembed, SwinSettings, SwinStage};
use crate::nn::ParamBuilder;

/// Architecture hyperparameters shared by every codec and classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecSpec {
    pub image_size: usize,
    pub blocks: [usize; 2],
    pub widths: [usize; 2],
    pub window: usize,
    pub mlp_ratio: usize,
    /// Real values per transmitted patch, `l`.
    pub patch_len: usize,
    pub power: f64,
    pub num_classes: usize,
}

impl CodecSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let dims = derive_dims(cfg)?;
        Ok(Self {
            image_size: cfg.image_size,
            blocks: cfg.blocks,
            widths: cfg.widths,
            window: cfg.window(),
            mlp_ratio: cfg.mlp_ratio,
            patch_len: dims.patch_len_real,
            power: cfg.power,
            num_classes: cfg.num_classes,
        })
    }

    /// Token grid after patch embedding.
    pub fn stage1_grid(&self) -> Grid {
        Grid::new(self.image_size / 2, self.image_size / 2)
    }

    /// Token grid after merging; one token per transmitted patch.
    pub fn stage2_grid(&self) -> Grid {
        self.stage1_grid().halved()
    }

    pub fn n_patches(&self) -> usize {
        self.stage2_grid().tokens()
    }

    pub fn settings(&self, width: usize) -> SwinSettings {
        SwinSettings {
            heads: heads_for_width(width),
            window: self.window,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn check_images(&self, img: &Tensor) -> Result<()> {
        let dims = img.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.image_size || dims[3] != self.image_size {
            return Err(Error::Dimension(format!(
                "expected images (batch, 3, {s}, {s}), got {dims:?}",
                s = self.image_size
            )));
        }
        Ok(())
    }

    pub fn check_signal(&self, y: &Tensor) -> Result<()> {
        let dims = y.dims();
        if dims.len() != 3 || dims[1] != self.n_patches() || dims[2] != self.patch_len {
            return Err(Error::Dimension(format!(
                "expected signal (batch, {}, {}), got {dims:?}",
                self.n_patches(),
                self.patch_len
            )));
        }
        Ok(())
    }
}

/// Patch embedding through the end of stage 2, shared by the encoders and the image classifier.
#[derive(Debug, Clone)]
pub struct EncoderTrunk {
    embed: PatchEmbed,
    stage1: SwinStage,
    merge: PatchMerging,
    stage2: SwinStage,
}

impl EncoderTrunk {
    pub fn new(spec: &CodecSpec, pb: &ParamBuilder) -> Result<Self> {
        let [c1, c2] = spec.widths;
        let [n1, n2] = spec.blocks;
        Ok(Self {
            embed: PatchEmbed::new(c1, &pb.pp("embed"))?,
            stage1: SwinStage::new(n1, c1, spec.stage1_grid(), spec.settings(c1), &pb.pp("stage1"))?,
            merge: PatchMerging::new(c1, c2, spec.stage1_grid(), &pb.pp("merge"))?,
            stage2: SwinStage::new(n2, c2, spec.stage2_grid(), spec.settings(c2), &pb.pp("stage2"))?,
        })
    }

    /// Runs the trunk, multiplying `gates[0]` into the stage-1 output and
    /// `gates[1]` into the stage-2 output when given. Gates are `(batch, width)`.
    pub fn forward_gated(&self, img: &Tensor, gates: [Option<&Tensor>; 2]) -> Result<Tensor> {
        let x = self.stage1.forward(&self.embed.forward(img)?)?;
        let x = apply_gate(x, gates[0])?;
        let x = self.stage2.forward(&self.merge.forward(&x)?)?;
        apply_gate(x, gates[1])
    }
}

/// Broadcasts a per-sample gate `(batch, width)` over all tokens of `(batch, tokens, width)`.
pub fn apply_gate(tokens: Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
    match gate {
        None => Ok(tokens),
        Some(g) => Ok(tokens.broadcast_mul(&g.unsqueeze(1)?)?),
    }
}

#[derive(Debug, Clone)]
pub struct JsccEncoder {
    trunk: EncoderTrunk,
    norm: LayerNorm,
    head: Linear,
    spec: CodecSpec,
}

impl JsccEncoder {
    pub fn new(spec: &CodecSpec, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            trunk: EncoderTrunk::new(spec, &pb.pp("trunk"))?,
            norm: LayerNorm::new(spec.widths[1], &pb.pp("norm"))?,
            head: linear(spec.widths[1], spec.patch_len, &pb.pp("head"))?,
            spec: *spec,
        })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    /// Images `(batch, 3, H, W)` to unit-power packed symbols `(batch, n, l)`.
    pub fn encode(&self, img: &Tensor) -> Result<Tensor> {
        self.encode_gated(img, [None, None])
    }

    pub(crate) fn encode_gated(&self, img: &Tensor, gates: [Option<&Tensor>; 2]) -> Result<Tensor> {
        self.spec.check_images(img)?;
        let x = self.trunk.forward_gated(img, gates)?;
        let raw = self.head.forward(&self.norm.forward(&x)?)?;
        power_normalize_tensor(&raw, self.spec.power)
    }
}

#[derive(Debug, Clone)]
pub struct JsccDecoder {
    lift: Linear,
    stage2: SwinStage,
    divide: PatchDivision,
    stage1: SwinStage,
    unembed: PatchUnembed,
    spec: CodecSpec,
}

impl JsccDecoder {
    pub fn new(spec: &CodecSpec, pb: &ParamBuilder) -> Result<Self> {
        let [c1, c2] = spec.widths;
        let [n1, n2] = spec.blocks;
        Ok(Self {
            lift: linear(spec.patch_len, c2, &pb.pp("lift"))?,
            stage2: SwinStage::new(n2, c2, spec.stage2_grid(), spec.settings(c2), &pb.pp("stage2"))?,
            divide: PatchDivision::new(c2, c1, spec.stage2_grid(), &pb.pp("divide"))?,
            stage1: SwinStage::new(n1, c1, spec.stage1_grid(), spec.settings(c1), &pb.pp("stage1"))?,
            unembed: PatchUnembed::new(c1, spec.stage1_grid(), &pb.pp("unembed"))?,
            spec: *spec,
        })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    /// Equalized packed reals `(batch, n, l)` to images in `[0, 1]`.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        self.decode_gated(y, None)
    }

    /// `gate` multiplies into the tokens at the end of decoder stage 2 (width `c1`).
    pub(crate) fn decode_gated(&self, y: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
        self.spec.check_signal(y)?;
        let x = self.stage2.forward(&self.lift.forward(y)?)?;
        let x = apply_gate(self.divide.forward(&x)?, gate)?;
        let x = self.stage1.forward(&x)?;
        Ok(self.unembed.forward(&x)?.clamp(0.0, 1.0)?)
    }
}
