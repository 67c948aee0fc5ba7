//! Swin Transformer building blocks over token sequences `(batch, rows * cols, width)`.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use super::layers::{linear, linear_no_bias, LayerNorm, Mlp};
use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

/// Token grid of a patch sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn halved(&self) -> Self {
        Self::new(self.rows / 2, self.cols / 2)
    }

    pub fn doubled(&self) -> Self {
        Self::new(self.rows * 2, self.cols * 2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SwinSettings {
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
}

fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let side = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        let (ra, ca) = (a / window, a % window);
        for b in 0..n {
            let (rb, cb) = (b / window, b % window);
            let dr = ra + window - 1 - rb;
            let dc = ca + window - 1 - cb;
            idx.push((dr * side + dc) as u32);
        }
    }
    idx
}

/// Additive attention mask for shifted windows: `(windows, n, n)`, zero where
/// two positions come from the same region of the unshifted grid.
fn shift_mask(grid: Grid, window: usize, shift: usize) -> Vec<f64> {
    let region = |i: usize, len: usize| -> usize {
        if i < len - window {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let (wr, wc) = (grid.rows / window, grid.cols / window);
    let n = window * window;
    let mut mask = Vec::with_capacity(wr * wc * n * n);
    for br in 0..wr {
        for bc in 0..wc {
            let ids: Vec<usize> = (0..n)
                .map(|p| {
                    let r = br * window + p / window;
                    let c = bc * window + p % window;
                    3 * region(r, grid.rows) + region(c, grid.cols)
                })
                .collect();
            for a in 0..n {
                for b in 0..n {
                    mask.push(if ids[a] == ids[b] { 0.0 } else { -100.0 });
                }
            }
        }
    }
    mask
}

fn window_partition(x: &Tensor, window: usize) -> candle_core::Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h / window, window, w / window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / window) * (w / window), window * window, c))
}

fn window_reverse(x: &Tensor, window: usize, grid: Grid) -> candle_core::Result<Tensor> {
    let (bw, _, c) = x.dims3()?;
    let (wr, wc) = (grid.rows / window, grid.cols / window);
    let b = bw / (wr * wc);
    x.reshape((b, wr, wc, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, grid.rows, grid.cols, c))
}

#[derive(Debug, Clone)]
struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    window: usize,
}

impl WindowAttention {
    fn new(dim: usize, heads: usize, window: usize, pb: &ParamBuilder) -> Result<Self> {
        let side = 2 * window - 1;
        let bias_table = pb.get((side * side, heads), "rel_bias", Init::Normal(0.02))?;
        let index = relative_position_index(window);
        let bias_index = Tensor::from_vec(index, window.pow(4), pb.device())?;
        Ok(Self {
            qkv: linear(dim, 3 * dim, &pb.pp("qkv"))?,
            proj: linear(dim, dim, &pb.pp("proj"))?,
            bias_table,
            bias_index,
            heads,
            window,
        })
    }

    /// `x`: `(batch * windows, n, dim)`; `mask`: `(windows, n, n)`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let bias = self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        let mut attn = q.matmul(&k.t()?)?.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((bw, n, c))?;
        debug_assert_eq!(self.window * self.window, n);
        self.proj.forward(&out)
    }
}

/// One Swin block: (shifted) window self-attention followed by an MLP, both residual.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    grid: Grid,
    window: usize,
    shift: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    pub fn new(
        dim: usize,
        grid: Grid,
        settings: SwinSettings,
        shifted: bool,
        pb: &ParamBuilder,
    ) -> Result<Self> {
        let window = settings.window.min(grid.rows).min(grid.cols);
        if window == 0 || grid.rows % window != 0 || grid.cols % window != 0 {
            return Err(Error::Dimension(format!(
                "window {window} does not tile grid {}x{}",
                grid.rows, grid.cols
            )));
        }
        if dim % settings.heads != 0 {
            return Err(Error::Dimension(format!(
                "width {dim} not divisible by {} heads",
                settings.heads
            )));
        }
        let shift = if shifted && window < grid.rows.min(grid.cols) {
            window / 2
        } else {
            0
        };
        let mask = if shift > 0 {
            let nw = (grid.rows / window) * (grid.cols / window);
            let n = window * window;
            let t = Tensor::from_vec(shift_mask(grid, window, shift), (nw, n, n), pb.device())?
                .to_dtype(pb.dtype())?;
            Some(t)
        } else {
            None
        };
        Ok(Self {
            norm1: LayerNorm::new(dim, &pb.pp("norm1"))?,
            attn: WindowAttention::new(dim, settings.heads, window, &pb.pp("attn"))?,
            norm2: LayerNorm::new(dim, &pb.pp("norm2"))?,
            mlp: Mlp::new(dim, settings.mlp_ratio * dim, dim, &pb.pp("mlp"))?,
            grid,
            window,
            shift,
            mask,
        })
    }

    pub fn shift(&self) -> usize {
        self.shift
    }
}

impl Module for SwinBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let Grid { rows, cols } = self.grid;
        if l != rows * cols {
            candle_core::bail!("expected {} tokens, got {l}", rows * cols);
        }
        let h = self.norm1.forward(x)?.reshape((b, rows, cols, c))?;
        let s = self.shift as i32;
        let h = if s > 0 { h.roll(-s, 1)?.roll(-s, 2)? } else { h };
        let windows = window_partition(&h, self.window)?;
        let attended = self.attn.forward(&windows, self.mask.as_ref())?;
        let h = window_reverse(&attended, self.window, self.grid)?;
        let h = if s > 0 { h.roll(s, 1)?.roll(s, 2)? } else { h };
        let x = (x + h.reshape((b, l, c))?)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        x + m
    }
}

/// A run of Swin blocks at a fixed grid and width, alternating regular and shifted windows.
#[derive(Debug, Clone)]
pub struct SwinStage {
    blocks: Vec<SwinBlock>,
}

impl SwinStage {
    pub fn new(
        depth: usize,
        dim: usize,
        grid: Grid,
        settings: SwinSettings,
        pb: &ParamBuilder,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| SwinBlock::new(dim, grid, settings, i % 2 == 1, &pb.pp(i.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[SwinBlock] {
        &self.blocks
    }
}

impl Module for SwinStage {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.blocks.iter().try_fold(x.clone(), |x, b| b.forward(&x))
    }
}

/// Splits images `(batch, 3, H, W)` into 2x2 patches and embeds them as `(batch, H/2 * W/2, width)`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    proj: Linear,
    norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(width: usize, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            proj: linear(12, width, &pb.pp("proj"))?,
            norm: LayerNorm::new(width, &pb.pp("norm"))?,
        })
    }
}

impl Module for PatchEmbed {
    fn forward(&self, img: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = img.dims4()?;
        let patches = img
            .reshape((b, c, h / 2, 2, w / 2, 2))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, (h / 2) * (w / 2), c * 4))?;
        self.norm.forward(&self.proj.forward(&patches)?)
    }
}

/// Inverse of [`PatchEmbed`]: projects tokens to 2x2 RGB patches and reassembles the image.
#[derive(Debug, Clone)]
pub struct PatchUnembed {
    norm: LayerNorm,
    proj: Linear,
    grid: Grid,
}

impl PatchUnembed {
    pub fn new(width: usize, grid: Grid, pb: &ParamBuilder) -> Result<Self> {
        let bound = 1.0 / (width as f64).sqrt();
        let w = pb.pp("proj").get((12, width), "weight", Init::Uniform(bound))?;
        // Mid-gray starting point keeps early outputs inside the clamp range.
        let b = pb.pp("proj").get(12, "bias", Init::Const(0.5))?;
        Ok(Self {
            norm: LayerNorm::new(width, &pb.pp("norm"))?,
            proj: Linear::new(w, Some(b)),
            grid,
        })
    }
}

impl Module for PatchUnembed {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, _) = x.dims3()?;
        let Grid { rows, cols } = self.grid;
        self.proj
            .forward(&self.norm.forward(x)?)?
            .reshape((b, rows, cols, 3, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((b, 3, rows * 2, cols * 2))
    }
}

/// 2x2 spatial downsampling with channel concatenation and projection.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
    grid: Grid,
}

impl PatchMerging {
    pub fn new(in_dim: usize, out_dim: usize, grid: Grid, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(4 * in_dim, &pb.pp("norm"))?,
            reduction: linear_no_bias(4 * in_dim, out_dim, &pb.pp("reduction"))?,
            grid,
        })
    }
}

impl Module for PatchMerging {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, c) = x.dims3()?;
        let Grid { rows, cols } = self.grid;
        let merged = x
            .reshape((b, rows / 2, 2, cols / 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, (rows / 2) * (cols / 2), 4 * c))?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

/// 2x spatial upsampling: the transpose of [`PatchMerging`]'s rearrangement, after a projection.
#[derive(Debug, Clone)]
pub struct PatchDivision {
    norm: LayerNorm,
    expand: Linear,
    grid: Grid,
    out_dim: usize,
}

impl PatchDivision {
    pub fn new(in_dim: usize, out_dim: usize, grid: Grid, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(in_dim, &pb.pp("norm"))?,
            expand: linear_no_bias(in_dim, 4 * out_dim, &pb.pp("expand"))?,
            grid,
            out_dim,
        })
    }
}

impl Module for PatchDivision {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, _) = x.dims3()?;
        let Grid { rows, cols } = self.grid;
        let c = self.out_dim;
        self.expand
            .forward(&self.norm.forward(x)?)?
            .reshape((b, rows, cols, 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, rows * 2 * cols * 2, c))
    }
}
