//! Scoring functions that map a sample to one scalar with the convention that
//! higher means in-distribution. Every sign flip happens here.
//!
//! The `*_value` functions work on precomputed log-densities so scores for a
//! whole test set can be assembled from one pass per model; the `ind_*`
//! functions are the per-sample forms over live models.

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetHandle, ImageSample, ImageShape};
use crate::error::{Error, Result};
use crate::genmodels::GenerativeModel;

pub const ORIENTATION: &str = "higher = in-distribution";

/// Version tag of the compressor behind [`complexity_estimate`].
pub const COMPRESSOR: &str = "paeth-rows+zlib9/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorScore {
    pub indicator: String,
    pub value: f64,
}

impl IndicatorScore {
    pub fn new(indicator: impl Into<String>, value: f64) -> Result<Self> {
        let indicator = indicator.into();
        if !value.is_finite() {
            return Err(Error::precondition(format!("indicator `{indicator}` produced a non-finite score {value}")));
        }
        Ok(Self { indicator, value })
    }
}

/// Whether the penalty in fine-tune scores divides by the variance of the
/// training log-densities or by their standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScale {
    #[default]
    Variance,
    Std,
}

/// Summary of the trained model's log-densities on its own training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub mu: f64,
    /// Population variance (nats squared).
    pub sigma: f64,
    pub sorted_train_logps: Vec<f64>,
}

impl TrainStats {
    pub fn from_log_densities(logps: &[f64]) -> Result<Self> {
        if logps.is_empty() {
            return Err(Error::InsufficientSamples("train statistics need at least one log-density".into()));
        }
        if logps.iter().any(|v| !v.is_finite()) {
            return Err(Error::precondition("train log-densities must be finite"));
        }
        let mut sorted = logps.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { mu: mean(logps), sigma: population_variance(logps), sorted_train_logps: sorted })
    }

    pub fn from_model(model: &GenerativeModel, train: &DatasetHandle) -> Result<Self> {
        Self::from_log_densities(&model.log_density_dataset(train)?)
    }

    fn divisor(&self, scale: PenaltyScale) -> f64 {
        match scale {
            PenaltyScale::Variance => self.sigma,
            PenaltyScale::Std => self.sigma.sqrt(),
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn population_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Two-sided rank depth min(F, 1 - F), F = fraction of training values <= logp.
pub fn perm_value(stats: &TrainStats, logp: f64) -> f64 {
    let s = &stats.sorted_train_logps;
    let f = s.partition_point(|&v| v <= logp) as f64 / s.len() as f64;
    f.min(1.0 - f)
}

fn check_ensemble(lps: &[f64]) -> Result<()> {
    if lps.len() < 2 {
        return Err(Error::precondition("ensemble indicators need at least two members"));
    }
    Ok(())
}

/// Mean minus population variance of the members' log-densities.
pub fn waic_value(lps: &[f64]) -> Result<f64> {
    check_ensemble(lps)?;
    Ok(mean(lps) - population_variance(lps))
}

pub fn ensemble_var_value(lps: &[f64]) -> Result<f64> {
    check_ensemble(lps)?;
    Ok(-population_variance(lps))
}

pub fn llr_value(logp: f64, background_logp: f64) -> f64 {
    logp - background_logp
}

/// log2 p(x) + L(x), both in bits.
pub fn complexity_adjusted_value(logp: f64, complexity_bits: f64) -> f64 {
    logp / std::f64::consts::LN_2 + complexity_bits
}

pub fn grad_norm_value(grad: &[f64]) -> f64 {
    -grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

pub fn kl_oracle_value(logp_in_model: f64, logp_out_model: f64) -> f64 {
    logp_in_model - logp_out_model
}

fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let p = a as i16 + b as i16 - c as i16;
    let (pa, pb, pc) = ((p - a as i16).abs(), (p - b as i16).abs(), (p - c as i16).abs());
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

fn compressed_bits(pixels: &[u8], shape: ImageShape) -> usize {
    let stride = shape.w * shape.c;
    let mut filtered = Vec::with_capacity(pixels.len() + shape.h);
    for i in 0..shape.h {
        filtered.push(4u8);
        for k in 0..stride {
            let x = pixels[i * stride + k];
            let a = if k >= shape.c { pixels[i * stride + k - shape.c] } else { 0 };
            let b = if i > 0 { pixels[(i - 1) * stride + k] } else { 0 };
            let c = if i > 0 && k >= shape.c { pixels[(i - 1) * stride + k - shape.c] } else { 0 };
            filtered.push(x.wrapping_sub(paeth(a, b, c)));
        }
    }
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(9));
    enc.write_all(&filtered).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len() * 8
}

/// Compressed length of `x` in bits under Paeth row filtering and zlib level
/// 9, minus the length of an all-zero image of the same shape.
pub fn complexity_estimate(x: &ImageSample) -> f64 {
    let zero = vec![0u8; x.shape.dims()];
    compressed_bits(&x.pixels, x.shape) as f64 - compressed_bits(&zero, x.shape) as f64
}

/// Copy of `data` where each pixel is replaced by a uniform random value
/// with probability `rate`; training set of the background model.
pub fn corrupt_pixels(data: &DatasetHandle, rate: f64, seed: u64) -> Result<DatasetHandle> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::precondition("corruption rate must be in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(data.len() * data.shape().dims());
    for i in 0..data.len() {
        for &p in data.pixels(i) {
            pixels.push(if rng.random_bool(rate) { rng.random::<u8>() } else { p });
        }
    }
    let name = format!("{}-corrupted", data.name());
    DatasetHandle::from_pixels(&name, data.split(), data.shape(), pixels)
}

/// raw - (beta / sigma) |logp - mu|, with sigma the training variance (or its
/// square root under [`PenaltyScale::Std`]).
pub fn score_with_penalty_scaled(
    raw: f64,
    logp: f64,
    stats: &TrainStats,
    beta: f64,
    scale: PenaltyScale,
) -> Result<IndicatorScore> {
    let s = stats.divisor(scale);
    if s <= 0.0 {
        return Err(Error::precondition("training log-densities have zero spread; the penalty is undefined"));
    }
    IndicatorScore::new("penalized", raw - beta / s * (logp - stats.mu).abs())
}

pub fn score_with_penalty(raw: f64, logp: f64, stats: &TrainStats, beta: f64) -> Result<IndicatorScore> {
    score_with_penalty_scaled(raw, logp, stats, beta, PenaltyScale::Variance)
}

pub fn ind_loglik(model: &GenerativeModel, x: &ImageSample) -> Result<IndicatorScore> {
    IndicatorScore::new("loglik", model.log_density(x)?.0)
}

pub fn ind_perm(stats: &TrainStats, model: &GenerativeModel, x: &ImageSample) -> Result<IndicatorScore> {
    if stats.sorted_train_logps.is_empty() {
        return Err(Error::precondition("empty train statistics"));
    }
    IndicatorScore::new("perm", perm_value(stats, model.log_density(x)?.0))
}

fn member_logps(ensemble: &[GenerativeModel], x: &ImageSample) -> Result<Vec<f64>> {
    ensemble.iter().map(|m| Ok(m.log_density(x)?.0)).collect()
}

pub fn ind_waic(ensemble: &[GenerativeModel], x: &ImageSample) -> Result<IndicatorScore> {
    IndicatorScore::new("waic", waic_value(&member_logps(ensemble, x)?)?)
}

pub fn ind_ensemble_var(ensemble: &[GenerativeModel], x: &ImageSample) -> Result<IndicatorScore> {
    IndicatorScore::new("ensemble_var", ensemble_var_value(&member_logps(ensemble, x)?)?)
}

pub fn ind_llr(model: &GenerativeModel, background: &GenerativeModel, x: &ImageSample) -> Result<IndicatorScore> {
    if model.family() != background.family() {
        return Err(Error::precondition(format!(
            "likelihood ratio needs one family, got {} and {}",
            model.family(),
            background.family()
        )));
    }
    IndicatorScore::new("llr", llr_value(model.log_density(x)?.0, background.log_density(x)?.0))
}

pub fn ind_complexity_adjusted(model: &GenerativeModel, x: &ImageSample) -> Result<IndicatorScore> {
    IndicatorScore::new("complexity_adjusted", complexity_adjusted_value(model.log_density(x)?.0, complexity_estimate(x)))
}

pub fn ind_grad_norm(model: &GenerativeModel, x: &ImageSample) -> Result<IndicatorScore> {
    IndicatorScore::new("grad_norm", -model.input_grad_norm(x)?)
}

/// Oracle indicator: needs a model trained on the out-distribution, so it is
/// never a deployable method.
pub fn ind_kl_oracle(model_in: &GenerativeModel, model_out: &GenerativeModel, x: &ImageSample) -> Result<IndicatorScore> {
    IndicatorScore::new("kl_oracle", kl_oracle_value(model_in.log_density(x)?.0, model_out.log_density(x)?.0))
}
