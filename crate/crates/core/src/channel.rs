//! Complex-baseband link simulation.
//!
//! Each link applies `y_i = d^{-a} h_i x_i + n_i` elementwise, with
//! `h_i ~ CN(0, 1)` under Rayleigh fading (`h_i = 1` under AWGN) and
//! `n_i ~ CN(0, sigma^2)`. Receivers know the realized gains and apply the
//! MMSE equalizer `conj(g) y / (|g|^2 + sigma^2 / P)` with `g = d^{-a} h`.
//!
//! Two entry points share the same draws: an `ndarray` API over
//! [`Complex64`] matrices, and a tensor API over the packed real layout used
//! by the networks, which keeps the link differentiable in `x`.

use candle_core::{Tensor, D};
use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{AwgnEqualizer, ExperimentConfig, FadingKind};
use crate::error::{Error, Result};

/// Complex transmit signal of `n` patches by `l/2` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSymbols {
    pub values: Array2<Complex64>,
    pub power: f64,
}

impl ChannelSymbols {
    pub fn mean_power(&self) -> f64 {
        mean_power(&self.values)
    }
}

pub fn mean_power(values: &Array2<Complex64>) -> f64 {
    values.iter().map(|c| c.norm_sqr()).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub distance: f64,
    pub exponent: f64,
    pub fading: FadingKind,
    pub noise_var: f64,
}

impl LinkConfig {
    /// Large-scale amplitude attenuation `d^{-a}`.
    pub fn path_gain(&self) -> f64 {
        self.distance.powf(-self.exponent)
    }
}

/// The three links of one experiment point. All share the SNR-implied noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelayLinks {
    pub source_relay: LinkConfig,
    pub source_dest: LinkConfig,
    pub relay_dest: LinkConfig,
    pub power: f64,
    pub equalizer: Equalizer,
}

impl RelayLinks {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let noise_var = snr_to_noise_var(cfg.snr_db, cfg.power);
        let link = |distance| LinkConfig {
            distance,
            exponent: cfg.path_loss_exp,
            fading: cfg.fading,
            noise_var,
        };
        Self {
            source_relay: link(cfg.d_sr),
            source_dest: link(cfg.d_sd()),
            relay_dest: link(cfg.d_rd()),
            power: cfg.power,
            equalizer: Equalizer::for_link(cfg.fading, cfg.awgn_equalizer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equalizer {
    Mmse,
    Identity,
}

impl Equalizer {
    pub fn for_link(fading: FadingKind, awgn: AwgnEqualizer) -> Self {
        match (fading, awgn) {
            (FadingKind::Rayleigh, _) | (FadingKind::Awgn, AwgnEqualizer::Mmse) => Equalizer::Mmse,
            (FadingKind::Awgn, AwgnEqualizer::Identity) => Equalizer::Identity,
        }
    }
}

/// One draw of fading gains and noise for a block of symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRealization {
    /// Small-scale gains `h` (all ones for AWGN).
    pub gains: Array2<Complex64>,
    pub noise: Array2<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedSignal {
    pub values: Array2<Complex64>,
    /// Realized small-scale gains, known to the receiver.
    pub gains: Array2<Complex64>,
    pub link: LinkConfig,
}

pub fn snr_to_noise_var(snr_db: f64, power: f64) -> f64 {
    power / 10f64.powf(snr_db / 10.0)
}

pub fn power_normalize(raw: &Array2<Complex64>, power: f64) -> Result<ChannelSymbols> {
    let energy: f64 = raw.iter().map(|c| c.norm_sqr()).sum();
    if energy == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let scale = (power * raw.len() as f64 / energy).sqrt();
    Ok(ChannelSymbols {
        values: raw.mapv(|c| c * scale),
        power,
    })
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let sd = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * sd, im * sd)
}

pub fn sample_realization<R: Rng + ?Sized>(
    shape: (usize, usize),
    link: &LinkConfig,
    rng: &mut R,
) -> LinkRealization {
    let gains = match link.fading {
        FadingKind::Awgn => Array2::from_elem(shape, Complex64::new(1.0, 0.0)),
        FadingKind::Rayleigh => Array2::from_shape_simple_fn(shape, || complex_normal(rng, 1.0)),
    };
    let noise = if link.noise_var > 0.0 {
        Array2::from_shape_simple_fn(shape, || complex_normal(rng, link.noise_var))
    } else {
        Array2::zeros(shape)
    };
    LinkRealization { gains, noise }
}

/// Pushes `x` through the link for a fixed realization.
pub fn apply_realization(
    x: &Array2<Complex64>,
    link: &LinkConfig,
    draw: &LinkRealization,
) -> Result<ReceivedSignal> {
    if x.dim() != draw.gains.dim() {
        return Err(Error::Dimension(format!(
            "signal {:?} vs realization {:?}",
            x.dim(),
            draw.gains.dim()
        )));
    }
    let pg = link.path_gain();
    let mut values = x * &draw.gains;
    values.mapv_inplace(|v| v * pg);
    values += &draw.noise;
    Ok(ReceivedSignal {
        values,
        gains: draw.gains.clone(),
        link: *link,
    })
}

pub fn apply_link<R: Rng + ?Sized>(
    x: &ChannelSymbols,
    link: &LinkConfig,
    rng: &mut R,
) -> ReceivedSignal {
    let draw = sample_realization(x.values.dim(), link, rng);
    apply_realization(&x.values, link, &draw).expect("realization drawn at signal shape")
}

pub fn mmse_equalize(y: &ReceivedSignal, power: f64) -> Array2<Complex64> {
    let pg = y.link.path_gain();
    let reg = y.link.noise_var / power;
    let mut out = y.values.clone();
    out.zip_mut_with(&y.gains, |v, h| {
        let g = h * pg;
        *v = g.conj() * *v / (g.norm_sqr() + reg);
    });
    out
}

/// Packs `n x l/2` complex symbols into `n x l` reals: real parts first, then imaginary parts.
pub fn complex_to_real(x: &Array2<Complex64>) -> Array2<f64> {
    let (n, half) = x.dim();
    Array2::from_shape_fn((n, 2 * half), |(i, j)| {
        if j < half {
            x[[i, j]].re
        } else {
            x[[i, j - half]].im
        }
    })
}

pub fn real_to_complex(x: &Array2<f64>) -> Result<Array2<Complex64>> {
    let (n, l) = x.dim();
    if l % 2 != 0 {
        return Err(Error::Dimension(format!("patch length {l} is odd")));
    }
    let half = l / 2;
    Ok(Array2::from_shape_fn((n, half), |(i, j)| {
        Complex64::new(x[[i, j]], x[[i, j + half]])
    }))
}

fn realization_tensors(
    draw: &LinkRealization,
    shape: (usize, usize, usize),
    pg: f64,
    like: &Tensor,
) -> Result<[Tensor; 4]> {
    let dev = like.device();
    let dt = like.dtype();
    let part = |arr: &Array2<Complex64>, f: fn(&Complex64) -> f64, scale: f64| -> Result<Tensor> {
        let data: Vec<f64> = arr.iter().map(|c| f(c) * scale).collect();
        Ok(Tensor::from_vec(data, shape, dev)?.to_dtype(dt)?)
    };
    Ok([
        part(&draw.gains, |c| c.re, pg)?,
        part(&draw.gains, |c| c.im, pg)?,
        part(&draw.noise, |c| c.re, 1.0)?,
        part(&draw.noise, |c| c.im, 1.0)?,
    ])
}

/// Per-sample power normalization of packed real signals `(batch, n, l)`.
pub fn power_normalize_tensor(x: &Tensor, power: f64) -> Result<Tensor> {
    let (_, n, l) = x.dims3()?;
    let symbols = (n * l / 2) as f64;
    let energy = x.sqr()?.sum_keepdim((1, 2))?;
    let min_energy = energy
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(min_energy > 0.0) {
        return Err(Error::ZeroSignal);
    }
    let scale = ((energy / (power * symbols))?.sqrt()?).recip()?;
    Ok(x.broadcast_mul(&scale)?)
}

/// Transmits packed real signals `(batch, n, l)` over `link` and equalizes at the receiver.
///
/// The output stays in the packed real layout and is differentiable in `x`.
pub fn transmit_tensor<R: Rng + ?Sized>(
    x: &Tensor,
    link: &LinkConfig,
    equalizer: Equalizer,
    power: f64,
    rng: &mut R,
) -> Result<(Tensor, LinkRealization)> {
    let (b, n, l) = x.dims3()?;
    if l % 2 != 0 {
        return Err(Error::Dimension(format!("patch length {l} is odd")));
    }
    let half = l / 2;
    let draw = sample_realization((b * n, half), link, rng);
    let y = transmit_tensor_with(x, link, equalizer, power, &draw)?;
    Ok((y, draw))
}

pub fn transmit_tensor_with(
    x: &Tensor,
    link: &LinkConfig,
    equalizer: Equalizer,
    power: f64,
    draw: &LinkRealization,
) -> Result<Tensor> {
    let (b, n, l) = x.dims3()?;
    let half = l / 2;
    if draw.gains.dim() != (b * n, half) {
        return Err(Error::Dimension(format!(
            "signal ({b}*{n}, {half}) vs realization {:?}",
            draw.gains.dim()
        )));
    }
    let [g_re, g_im, n_re, n_im] =
        realization_tensors(draw, (b, n, half), link.path_gain(), x)?;
    let x_re = x.narrow(D::Minus1, 0, half)?;
    let x_im = x.narrow(D::Minus1, half, half)?;
    let y_re = ((g_re.mul(&x_re)? - g_im.mul(&x_im)?)? + n_re)?;
    let y_im = ((g_re.mul(&x_im)? + g_im.mul(&x_re)?)? + n_im)?;
    let (out_re, out_im) = match equalizer {
        Equalizer::Identity => (y_re, y_im),
        Equalizer::Mmse => {
            let den = ((g_re.sqr()? + g_im.sqr()?)? + link.noise_var / power)?;
            let re = (g_re.mul(&y_re)? + g_im.mul(&y_im)?)?.div(&den)?;
            let im = (g_re.mul(&y_im)? - g_im.mul(&y_re)?)?.div(&den)?;
            (re, im)
        }
    };
    Ok(Tensor::cat(&[out_re, out_im], D::Minus1)?)
}

/// Rows of a packed `(batch, n, l)` tensor as one complex matrix per batch element.
pub fn tensor_to_complex(x: &Tensor) -> Result<Vec<Array2<Complex64>>> {
    let (b, n, l) = x.dims3()?;
    let data = x
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let real = Array2::from_shape_vec((b * n, l), data)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    real.axis_chunks_iter(Axis(0), n)
        .map(|chunk| real_to_complex(&chunk.to_owned()))
        .collect()
}
