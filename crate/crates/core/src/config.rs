//! Experiment configuration and codec dimension derivation.
//!
//! Configs are flat TOML documents. Every key is optional; missing keys take
//! the desk-scale defaults of [`ExperimentConfig::default`].

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Stl10,
    Cifar10,
    ToySubset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingKind {
    Awgn,
    Rayleigh,
}

impl fmt::Display for FadingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FadingKind::Awgn => f.write_str("awgn"),
            FadingKind::Rayleigh => f.write_str("rayleigh"),
        }
    }
}

/// Which destination signal feeds the class-aided decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// The equalized relay-destination signal only.
    RdLink,
    /// The mutual-attention output combining both links.
    Fused,
}

/// Receiver processing on AWGN links. Rayleigh links are always MMSE-equalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AwgnEqualizer {
    Mmse,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub data_dir: PathBuf,
    pub image_size: usize,
    pub num_classes: usize,
    /// Training images per class for `toy_subset`.
    pub toy_train_per_class: usize,
    /// Evaluation images per class for `toy_subset`.
    pub toy_eval_per_class: usize,
    /// Complex channel uses per real source value. Accepts a float or `"a/b"`.
    #[serde(deserialize_with = "de_ratio")]
    pub cbr: f64,
    pub snr_db: f64,
    pub fading: FadingKind,
    pub d_sr: f64,
    pub path_loss_exp: f64,
    pub lambda_cls: f64,
    /// Transmit power shared by source and relay.
    pub power: f64,
    /// Swin blocks per stage, `[n1, n2]`.
    pub blocks: [usize; 2],
    /// Embedding widths per stage, `[c1, c2]`.
    pub widths: [usize; 2],
    /// Attention window side; chosen from the image size when absent.
    pub window_size: Option<usize>,
    pub mlp_ratio: usize,
    pub fusion_heads: usize,
    pub fusion_head_dim: usize,
    pub fusion_proj_len: usize,
    pub decoder_input: DecoderInput,
    pub awgn_equalizer: AwgnEqualizer,
    pub seed: u64,
    pub epochs: [usize; 3],
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetName::ToySubset,
            data_dir: PathBuf::from("data"),
            image_size: 32,
            num_classes: 2,
            toy_train_per_class: 100,
            toy_eval_per_class: 50,
            cbr: 1.0 / 12.0,
            snr_db: 15.0,
            fading: FadingKind::Awgn,
            d_sr: 0.5,
            path_loss_exp: 2.0,
            lambda_cls: 0.1,
            power: 1.0,
            blocks: [1, 2],
            widths: [32, 64],
            window_size: None,
            mlp_ratio: 2,
            fusion_heads: 2,
            fusion_head_dim: 4,
            fusion_proj_len: 32,
            decoder_input: DecoderInput::RdLink,
            awgn_equalizer: AwgnEqualizer::Mmse,
            seed: 0,
            epochs: [20, 20, 20],
            learning_rate: 1e-4,
            batch_size: 32,
        }
    }
}

fn de_ratio<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Ratio {
        Num(f64),
        Text(String),
    }
    match Ratio::deserialize(de)? {
        Ratio::Num(v) => Ok(v),
        Ratio::Text(s) => parse_ratio(&s).ok_or_else(|| {
            serde::de::Error::custom(format!("`{s}` is neither a number nor `a/b`"))
        }),
    }
}

fn parse_ratio(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().ok()?;
            let b: f64 = b.trim().parse().ok()?;
            (b != 0.0).then(|| a / b)
        }
        None => s.trim().parse().ok(),
    }
}

impl ExperimentConfig {
    pub fn d_rd(&self) -> f64 {
        1.0 - self.d_sr
    }

    pub fn d_sd(&self) -> f64 {
        1.0
    }

    pub fn window(&self) -> usize {
        self.window_size
            .unwrap_or(if self.image_size >= 96 { 8 } else { 4 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_sr > 0.0 && self.d_sr < 1.0) {
            return Err(Error::invalid("d_sr", format!("{} not in (0, 1)", self.d_sr)));
        }
        if !(self.cbr > 0.0) || !self.cbr.is_finite() {
            return Err(Error::invalid("cbr", format!("{} must be positive", self.cbr)));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::invalid(
                "image_size",
                format!("{} must be a positive multiple of 4", self.image_size),
            ));
        }
        if !(self.lambda_cls >= 0.0) {
            return Err(Error::invalid("lambda_cls", "must be non-negative"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least two classes"));
        }
        if !(self.power > 0.0) {
            return Err(Error::invalid("power", "must be positive"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::invalid("snr_db", "must be finite"));
        }
        if !(self.path_loss_exp >= 0.0) {
            return Err(Error::invalid("path_loss_exp", "must be non-negative"));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::invalid("blocks", "each stage needs at least one block"));
        }
        if self.widths[0] == 0 || self.widths[1] != 2 * self.widths[0] {
            return Err(Error::invalid(
                "widths",
                format!("{:?}: second width must double the first", self.widths),
            ));
        }
        for &w in &self.widths {
            if w % heads_for_width(w) != 0 {
                return Err(Error::invalid("widths", format!("{w} not divisible into heads")));
            }
        }
        let win = self.window();
        let grid = self.image_size / 4;
        if win == 0 || grid % win != 0 {
            return Err(Error::invalid(
                "window_size",
                format!("{win} must divide the {grid}x{grid} token grid"),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp_ratio", "must be positive"));
        }
        if self.fusion_heads == 0
            || self.fusion_head_dim == 0
            || self.fusion_proj_len % (self.fusion_heads * self.fusion_head_dim) != 0
        {
            return Err(Error::invalid(
                "fusion_proj_len",
                "must be a multiple of fusion_heads * fusion_head_dim",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        match (self.dataset, self.image_size) {
            (DatasetName::Stl10, s) if s != 96 => {
                return Err(Error::invalid("image_size", "stl10 images are 96x96"))
            }
            (DatasetName::Cifar10, s) if s != 32 => {
                return Err(Error::invalid("image_size", "cifar10 images are 32x32"))
            }
            (DatasetName::Stl10 | DatasetName::Cifar10, _) if self.num_classes > 10 => {
                return Err(Error::invalid("num_classes", "dataset has 10 classes"))
            }
            _ => {}
        }
        derive_dims(self)?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

/// Attention heads for a token width.
pub fn heads_for_width(width: usize) -> usize {
    (width / 32).max(1)
}

pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecDims {
    /// Number of signal patches `n` (one per stage-2 token).
    pub n_patches: usize,
    /// Real values per patch `l` (real and imaginary parts).
    pub patch_len_real: usize,
    pub complex_per_patch: usize,
    pub grid_side: usize,
    /// Complex channel uses implied by the bandwidth ratio.
    pub symbol_budget: usize,
    /// `n * l / 2 - symbol_budget`, nonzero when the budget does not split evenly.
    pub residual: i64,
}

impl CodecDims {
    pub fn complex_symbols(&self) -> usize {
        self.n_patches * self.complex_per_patch
    }
}

pub fn derive_dims(cfg: &ExperimentConfig) -> Result<CodecDims> {
    if !(cfg.cbr > 0.0) {
        return Err(Error::invalid("cbr", "must be positive"));
    }
    if cfg.image_size == 0 || cfg.image_size % 4 != 0 {
        return Err(Error::invalid("image_size", "must be a positive multiple of 4"));
    }
    let (h, w) = (cfg.image_size, cfg.image_size);
    let symbol_budget = (cfg.cbr * (3 * h * w) as f64).round() as usize;
    let grid_side = h / 4;
    let n_patches = grid_side * (w / 4);
    let complex_per_patch = (symbol_budget as f64 / n_patches as f64).round() as usize;
    if complex_per_patch == 0 {
        return Err(Error::invalid(
            "cbr",
            format!(
                "{} gives {symbol_budget} symbols for {n_patches} patches; need at least one per patch",
                cfg.cbr
            ),
        ));
    }
    let residual = (n_patches * complex_per_patch) as i64 - symbol_budget as i64;
    if residual != 0 {
        log::warn!(
            "bandwidth ratio {} does not split evenly over {n_patches} patches; residual {residual} symbols",
            cfg.cbr
        );
    }
    Ok(CodecDims {
        n_patches,
        patch_len_real: 2 * complex_per_patch,
        complex_per_patch,
        grid_side,
        symbol_budget,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(size: usize, cbr: f64) -> ExperimentConfig {
        ExperimentConfig {
            image_size: size,
            cbr,
            ..Default::default()
        }
    }

    #[test]
    fn dims_at_full_and_desk_scale() {
        let d = derive_dims(&cfg(96, 1.0 / 12.0)).unwrap();
        assert_eq!((d.symbol_budget, d.n_patches, d.patch_len_real), (2304, 576, 8));
        assert_eq!(d.residual, 0);
        let d = derive_dims(&cfg(32, 1.0 / 12.0)).unwrap();
        assert_eq!((d.symbol_budget, d.n_patches, d.patch_len_real), (256, 64, 8));
        assert_eq!(d.grid_side, 8);
    }

    #[test]
    fn degenerate_cbr_rejected() {
        assert!(derive_dims(&cfg(32, 0.0)).is_err());
        assert!(derive_dims(&cfg(32, 1e-4)).is_err());
    }

    #[test]
    fn parses_values_and_defaults() {
        let c = parse_config(
            "snr_db = 15\nfading = \"awgn\"\nd_sr = 0.5\ncbr = \"1/12\"\n",
            Path::new("inline"),
        )
        .unwrap();
        assert_eq!(c.snr_db, 15.0);
        assert_eq!(c.fading, FadingKind::Awgn);
        assert_eq!(c.d_rd(), 0.5);
        assert!((c.cbr - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(c.lambda_cls, 0.1);
        assert_eq!(c.path_loss_exp, 2.0);
        assert_eq!(c.seed, 0);
        assert_eq!(c.learning_rate, 1e-4);
    }

    #[test]
    fn full_scale_config_validates() {
        let c = parse_config(
            "dataset = \"stl10\"\nimage_size = 96\ncbr = 0.08333333333333333\nnum_classes = 10\nblocks = [2, 4]\nwidths = [128, 256]\n",
            Path::new("inline"),
        )
        .unwrap();
        assert_eq!(c.window(), 8);
    }

    #[test]
    fn validation_names_the_field() {
        let err = parse_config("d_sr = 0.0\n", Path::new("inline")).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "d_sr"),
            e => panic!("unexpected {e}"),
        }
        let err = parse_config("image_size = 30\n", Path::new("inline")).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "image_size", .. }));
        let err = parse_config("lambda_cls = -1.0\n", Path::new("inline")).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "lambda_cls", .. }));
    }

    #[test]
    fn unknown_keys_and_missing_file_error() {
        assert!(matches!(
            parse_config("snr = 3\n", Path::new("inline")),
            Err(Error::ConfigParse { .. })
        ));
        assert!(matches!(
            load_config(Path::new("/nonexistent/cfg.toml")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig {
            snr_db: -5.0,
            seed: 7,
            ..Default::default()
        };
        let back = parse_config(&c.to_toml_string(), Path::new("inline")).unwrap();
        assert_eq!(c, back);
    }

    proptest! {
        #[test]
        fn budget_matches_within_one_patch(side in 1usize..40, denom in 1usize..64) {
            let c = cfg(side * 4, 1.0 / denom as f64);
            if let Ok(d) = derive_dims(&c) {
                prop_assert!(d.patch_len_real % 2 == 0);
                prop_assert_eq!(
                    d.n_patches * d.patch_len_real / 2,
                    (d.symbol_budget as i64 + d.residual) as usize
                );
                prop_assert!((d.residual.unsigned_abs() as usize) * 2 <= d.n_patches);
            }
        }
    }
}
