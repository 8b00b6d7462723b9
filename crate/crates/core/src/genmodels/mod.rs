//! Trainable density models behind one interface: per-sample log-density,
//! independent parameter clones, single optimizer steps, and checkpoints.

mod checkpoint;
mod flow;
mod logistic;
mod pixelar;
mod vae;

use std::fmt;
use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetHandle, ImageSample, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Init, Params, Precision};

pub use flow::{FlowArch, VectorFlow};
pub use pixelar::PixelArArch;
pub use vae::VaeArch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vae,
    #[serde(rename = "pixelar")]
    PixelAr,
    #[serde(rename = "couplingflow")]
    CouplingFlow,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Vae, Family::PixelAr, Family::CouplingFlow];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Vae => "vae",
            Family::PixelAr => "pixelar",
            Family::CouplingFlow => "couplingflow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family `{s}`")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    Vae(VaeArch),
    #[serde(rename = "pixelar")]
    PixelAr(PixelArArch),
    #[serde(rename = "couplingflow")]
    CouplingFlow(FlowArch),
}

impl Architecture {
    pub fn family(&self) -> Family {
        match self {
            Architecture::Vae(_) => Family::Vae,
            Architecture::PixelAr(_) => Family::PixelAr,
            Architecture::CouplingFlow(_) => Family::CouplingFlow,
        }
    }

    /// Desk-scale defaults; colour images get narrower networks so every
    /// model stays near or below two million parameters.
    pub fn default_for(family: Family, shape: ImageShape) -> Self {
        let wide = shape.dims() > 1024;
        match family {
            Family::Vae => Architecture::Vae(VaeArch { hidden: if wide { 128 } else { 256 }, ..VaeArch::default() }),
            Family::PixelAr => Architecture::PixelAr(PixelArArch::default()),
            Family::CouplingFlow => Architecture::CouplingFlow(FlowArch {
                layers: if wide { 8 } else { 6 },
                hidden: if wide { 32 } else { 128 },
                ..FlowArch::default()
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 64, epochs: 10, seed: 0, optimizer: AdamConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    /// Mean training objective in nats per image (the ELBO for the VAE).
    pub mean_log_density: f64,
    pub seconds: f64,
}

/// Log-density of a full image in nats.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogDensity(pub f64);

/// Bits per dimension of a log-density over `dims` sub-pixels.
pub fn bits_per_dim(ld: LogDensity, dims: usize) -> Result<f64> {
    if dims == 0 {
        return Err(Error::precondition("bits_per_dim needs dims > 0"));
    }
    Ok(-ld.0 / (dims as f64 * std::f64::consts::LN_2))
}

enum Body {
    Vae { eval_noise: Tensor },
    PixelAr { ctx: pixelar::Context },
    Flow { stack: flow::CouplingStack },
}

/// A density model with its parameters, optimizer state and noise stream.
pub struct GenerativeModel {
    arch: Architecture,
    shape: ImageShape,
    seed: u64,
    params: Params,
    body: Body,
    opt: Adam,
    opt_cfg: AdamConfig,
    rng: ChaCha8Rng,
    training_log: Vec<TrainLogEntry>,
}

impl fmt::Debug for GenerativeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenerativeModel")
            .field("family", &self.family())
            .field("shape", &self.shape)
            .field("params", &self.params.num_elements())
            .finish()
    }
}

const EVAL_BATCH: usize = 64;
const VAE_EVAL_BATCH: usize = 8;

impl GenerativeModel {
    pub fn new(arch: Architecture, shape: ImageShape, precision: Precision, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut params = Params::new(precision);
        let body = Self::build_body(&arch, shape, precision, seed, Some((&mut init, &mut params)))?;
        let opt_cfg = AdamConfig::default();
        let opt = Adam::new(opt_cfg, params.vars().len());
        Ok(Self {
            arch,
            shape,
            seed,
            params,
            body,
            opt,
            opt_cfg,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
            training_log: Vec::new(),
        })
    }

    fn build_body(
        arch: &Architecture,
        shape: ImageShape,
        precision: Precision,
        seed: u64,
        init: Option<(&mut Init, &mut Params)>,
    ) -> Result<Body> {
        let d = shape.dims();
        Ok(match arch {
            Architecture::Vae(a) => {
                if let Some((i, p)) = init {
                    vae::init(a, d, i, p)?;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
                let noise: Vec<f64> =
                    (0..a.iw_samples * a.latent).map(|_| StandardNormal.sample(&mut rng)).collect();
                let eval_noise =
                    Tensor::from_vec(noise, (a.iw_samples, a.latent), &Device::Cpu)?.to_dtype(precision.dtype())?;
                Body::Vae { eval_noise }
            }
            Architecture::PixelAr(a) => {
                if a.levels < 2 || a.levels > 256 {
                    return Err(Error::Config(format!("pixel levels must be in 2..=256, got {}", a.levels)));
                }
                let ctx = pixelar::Context::new(shape, a);
                if let Some((i, p)) = init {
                    pixelar::init(a, &ctx, i, p)?;
                }
                Body::PixelAr { ctx }
            }
            Architecture::CouplingFlow(a) => {
                let stack = flow::CouplingStack::new(flow::image_masks(shape, a.layers), precision)?;
                if let Some((i, p)) = init {
                    stack.init(a.hidden, i, p)?;
                }
                Body::Flow { stack }
            }
        })
    }

    pub fn family(&self) -> Family {
        self.arch.family()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn precision(&self) -> Precision {
        self.params.precision()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn training_log(&self) -> &[TrainLogEntry] {
        &self.training_log
    }

    pub fn param_hash(&self) -> Result<String> {
        self.params.hash()
    }

    pub fn set_optimizer(&mut self, cfg: AdamConfig) {
        self.opt_cfg = cfg;
        self.opt = Adam::new(cfg, self.params.vars().len());
    }

    /// Restart the training-noise stream (dequantization and reparameterization
    /// draws) from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Independent copy with fresh optimizer state. Steps on the copy never
    /// touch this model.
    pub fn clone_params(&self) -> Result<Self> {
        let params = self.params.deep_clone()?;
        let body = match &self.body {
            Body::Vae { eval_noise } => Body::Vae { eval_noise: eval_noise.clone() },
            Body::PixelAr { .. } | Body::Flow { .. } => {
                Self::build_body(&self.arch, self.shape, self.precision(), self.seed, None)?
            }
        };
        Ok(Self {
            arch: self.arch.clone(),
            shape: self.shape,
            seed: self.seed,
            opt: Adam::new(self.opt_cfg, params.vars().len()),
            params,
            body,
            opt_cfg: self.opt_cfg,
            rng: self.rng.clone(),
            training_log: self.training_log.clone(),
        })
    }

    fn check_shape(&self, x: &ImageSample) -> Result<()> {
        if x.shape != self.shape || x.pixels.len() != self.shape.dims() {
            return Err(Error::ShapeMismatch { expected: self.shape.to_string(), actual: x.shape.to_string() });
        }
        Ok(())
    }

    fn check_lengths(&self, images: &[&[u8]]) -> Result<()> {
        match images.iter().find(|im| im.len() != self.shape.dims()) {
            Some(im) => Err(Error::ShapeMismatch {
                expected: format!("{} ({} values)", self.shape, self.shape.dims()),
                actual: format!("{} values", im.len()),
            }),
            None => Ok(()),
        }
    }

    fn pixel_tensor(&self, images: &[&[u8]], offset: f64) -> Result<Tensor> {
        let d = self.shape.dims();
        let v: Vec<f32> = images.iter().flat_map(|im| im.iter().map(|&p| p as f32 + offset as f32)).collect();
        Ok(Tensor::from_vec(v, (images.len(), d), &Device::Cpu)?.to_dtype(self.precision().dtype())?)
    }

    /// Deterministic evaluation log-density per image, differentiable in the
    /// parameters. Flow inputs are dequantized at the bin centre.
    fn eval_log_prob(&self, images: &[&[u8]]) -> Result<Tensor> {
        match &self.body {
            Body::Vae { eval_noise } => {
                let x = self.pixel_tensor(images, 0.0)?;
                vae::iw_log_density(&vae::log_weights(&self.params, &x, eval_noise)?)
            }
            Body::PixelAr { ctx } => {
                let Architecture::PixelAr(a) = &self.arch else { unreachable!() };
                pixelar::log_prob(&self.params, a, ctx, images)
            }
            Body::Flow { stack } => {
                let Architecture::CouplingFlow(a) = &self.arch else { unreachable!() };
                flow::image_log_prob(stack, &self.params, a, &self.pixel_tensor(images, 0.5)?)
            }
        }
    }

    /// Stochastic training objective per image: single-sample ELBO for the
    /// VAE, exact log-likelihood for the autoregressive model, and the
    /// log-density of a uniformly dequantized input for the flow.
    fn train_objective(&mut self, images: &[&[u8]]) -> Result<Tensor> {
        let dt = self.precision().dtype();
        match &self.body {
            Body::Vae { .. } => {
                let Architecture::Vae(a) = &self.arch else { unreachable!() };
                let n = images.len() * a.latent;
                let eps: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                let eps = Tensor::from_vec(eps, (images.len(), a.latent), &Device::Cpu)?.to_dtype(dt)?;
                vae::elbo_objective(&self.params, &self.pixel_tensor(images, 0.0)?, &eps)
            }
            Body::PixelAr { ctx } => {
                let Architecture::PixelAr(a) = &self.arch else { unreachable!() };
                pixelar::log_prob(&self.params, a, ctx, images)
            }
            Body::Flow { stack } => {
                let Architecture::CouplingFlow(a) = &self.arch else { unreachable!() };
                let u = Uniform::new(0.0f32, 1.0).expect("valid range");
                let d = self.shape.dims();
                let v: Vec<f32> = images
                    .iter()
                    .flat_map(|im| im.iter().map(|&p| p as f32).collect::<Vec<_>>())
                    .map(|p| p + u.sample(&mut self.rng))
                    .collect();
                let v = Tensor::from_vec(v, (images.len(), d), &Device::Cpu)?.to_dtype(dt)?;
                flow::image_log_prob(stack, &self.params, a, &v)
            }
        }
    }

    pub fn log_density(&self, x: &ImageSample) -> Result<LogDensity> {
        self.check_shape(x)?;
        Ok(LogDensity(nn::scalar_f64(&self.eval_log_prob(&[&x.pixels])?.squeeze(0)?)?))
    }

    pub fn log_density_batch(&self, xs: &[ImageSample]) -> Result<Vec<f64>> {
        let refs: Vec<&[u8]> = xs.iter().map(|x| self.check_shape(x).map(|_| x.pixels.as_slice())).collect::<Result<_>>()?;
        self.log_density_pixels(&refs)
    }

    pub fn log_density_pixels(&self, images: &[&[u8]]) -> Result<Vec<f64>> {
        self.check_lengths(images)?;
        let chunk = if matches!(self.body, Body::Vae { .. }) { VAE_EVAL_BATCH } else { EVAL_BATCH };
        let mut out = Vec::with_capacity(images.len());
        for c in images.chunks(chunk) {
            out.extend(nn::vec_f64(&self.eval_log_prob(c)?.detach())?);
        }
        Ok(out)
    }

    pub fn log_density_dataset(&self, data: &DatasetHandle) -> Result<Vec<f64>> {
        if data.shape() != self.shape {
            return Err(Error::ShapeMismatch { expected: self.shape.to_string(), actual: data.shape().to_string() });
        }
        let refs: Vec<&[u8]> = (0..data.len()).map(|i| data.pixels(i)).collect();
        self.log_density_pixels(&refs)
    }

    /// Monte-Carlo ELBO from the same importance samples used by
    /// `log_density`; VAE only.
    pub fn elbo(&self, x: &ImageSample) -> Result<f64> {
        Ok(self.elbo_batch(std::slice::from_ref(x))?[0])
    }

    pub fn elbo_batch(&self, xs: &[ImageSample]) -> Result<Vec<f64>> {
        let Body::Vae { eval_noise } = &self.body else {
            return Err(Error::Unsupported(format!("elbo is defined for the vae family, not {}", self.family())));
        };
        let mut out = Vec::with_capacity(xs.len());
        for c in xs.chunks(VAE_EVAL_BATCH) {
            let refs: Vec<&[u8]> = c.iter().map(|x| self.check_shape(x).map(|_| x.pixels.as_slice())).collect::<Result<_>>()?;
            let w = vae::log_weights(&self.params, &self.pixel_tensor(&refs, 0.0)?, eval_noise)?;
            out.extend(nn::vec_f64(&vae::mc_elbo(&w)?)?);
        }
        Ok(out)
    }

    /// One optimizer step that increases the mean training objective of
    /// `batch`. Returns the objective before the step. Non-finite gradients
    /// abort the step and leave the parameters untouched.
    pub fn grad_step(&mut self, batch: &[ImageSample], learning_rate: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::precondition("grad_step needs a non-empty batch"));
        }
        let refs: Vec<&[u8]> = batch.iter().map(|x| self.check_shape(x).map(|_| x.pixels.as_slice())).collect::<Result<_>>()?;
        self.step_pixels(&refs, learning_rate)
    }

    pub(crate) fn step_pixels(&mut self, images: &[&[u8]], learning_rate: f64) -> Result<f64> {
        self.check_lengths(images)?;
        let obj = self.train_objective(images)?;
        let mean = obj.mean_all()?;
        let value = nn::scalar_f64(&mean)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        let loss = mean.affine(-1.0 / self.shape.dims() as f64, 0.0)?;
        let grads = loss.backward()?;
        self.opt.step(&self.params, &grads, learning_rate)?;
        Ok(value)
    }

    /// Gradient of the evaluation log-density with respect to continuous
    /// pixel values (in 0..256 units).
    pub fn input_grad_continuous(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.shape.dims() {
            return Err(Error::ShapeMismatch { expected: self.shape.to_string(), actual: format!("{} values", v.len()) });
        }
        let dt = self.precision().dtype();
        let x = Var::from_tensor(&Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu)?.to_dtype(dt)?)?;
        let lp = match &self.body {
            Body::Vae { eval_noise } => vae::iw_log_density(&vae::log_weights(&self.params, x.as_tensor(), eval_noise)?)?,
            Body::Flow { stack } => {
                let Architecture::CouplingFlow(a) = &self.arch else { unreachable!() };
                flow::image_log_prob(stack, &self.params, a, x.as_tensor())?
            }
            Body::PixelAr { .. } => {
                return Err(Error::Unsupported("input gradients are NA for the autoregressive family".into()))
            }
        };
        let grads = lp.sum_all()?.backward()?;
        let g = grads.get(&x).ok_or_else(|| Error::precondition("log-density does not depend on the input"))?;
        nn::vec_f64(g)
    }

    /// Continuous value of a pixel for gradient purposes: the bin centre for
    /// the flow, the integer value itself for the VAE.
    fn continuous(&self, x: &ImageSample) -> Vec<f64> {
        let off = if matches!(self.body, Body::Flow { .. }) { 0.5 } else { 0.0 };
        x.pixels.iter().map(|&p| p as f64 + off).collect()
    }

    /// Evaluation log-density at continuous pixel values; the counterpart of
    /// `input_grad_continuous` for finite-difference checks.
    pub fn log_density_continuous(&self, v: &[f64]) -> Result<f64> {
        let dt = self.precision().dtype();
        let x = Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu)?.to_dtype(dt)?;
        let lp = match &self.body {
            Body::Vae { eval_noise } => vae::iw_log_density(&vae::log_weights(&self.params, &x, eval_noise)?)?,
            Body::Flow { stack } => {
                let Architecture::CouplingFlow(a) = &self.arch else { unreachable!() };
                flow::image_log_prob(stack, &self.params, a, &x)?
            }
            Body::PixelAr { .. } => {
                return Err(Error::Unsupported("continuous inputs are NA for the autoregressive family".into()))
            }
        };
        nn::scalar_f64(&lp.squeeze(0)?)
    }

    pub fn input_grad_norm(&self, x: &ImageSample) -> Result<f64> {
        self.check_shape(x)?;
        let g = self.input_grad_continuous(&self.continuous(x))?;
        Ok(g.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Predictive log-probability of every sub-pixel (autoregressive only).
    pub fn subpixel_log_probs(&self, x: &ImageSample) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        let Body::PixelAr { ctx } = &self.body else {
            return Err(Error::Unsupported("per-pixel conditionals exist only for the autoregressive family".into()));
        };
        let Architecture::PixelAr(a) = &self.arch else { unreachable!() };
        nn::vec_f64(&pixelar::subpixel_log_probs(&self.params, a, ctx, &[&x.pixels])?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path)
    }
}

/// Train `model` on `data` by maximizing the family's objective with Adam.
pub fn fit(mut model: GenerativeModel, data: &DatasetHandle, cfg: &TrainConfig) -> Result<GenerativeModel> {
    if data.shape() != model.shape() {
        return Err(Error::ShapeMismatch { expected: model.shape().to_string(), actual: data.shape().to_string() });
    }
    if data.is_empty() {
        return Err(Error::InsufficientSamples("cannot fit on an empty dataset".into()));
    }
    if cfg.learning_rate <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::Config("learning rate and batch size must be positive".into()));
    }
    model.set_optimizer(cfg.optimizer);
    model.reseed(cfg.seed ^ 0xf17);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = model.training_log.len();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&[u8]> = idx.iter().map(|&i| data.pixels(i)).collect();
            let v = model.step_pixels(&refs, cfg.learning_rate).map_err(|e| match e {
                Error::NonFiniteGradient => Error::Divergence { epoch, step, detail: "non-finite loss or gradient".into() },
                other => other,
            })?;
            sum += v * idx.len() as f64;
            n += idx.len();
        }
        let entry = TrainLogEntry { epoch: first + epoch, mean_log_density: sum / n as f64, seconds: t0.elapsed().as_secs_f64() };
        log::info!(
            "{} epoch {}: mean objective {:.2} nats ({:.3} bits/dim) in {:.1}s",
            model.family(),
            entry.epoch,
            entry.mean_log_density,
            -entry.mean_log_density / (model.shape.dims() as f64 * std::f64::consts::LN_2),
            entry.seconds
        );
        model.training_log.push(entry);
    }
    Ok(model)
}

/// `k` independently seeded models (seeds `cfg.seed + i`) with one shared
/// architecture and budget.
pub fn ensemble_fit(
    arch: &Architecture,
    data: &DatasetHandle,
    k: usize,
    cfg: &TrainConfig,
    precision: Precision,
) -> Result<Vec<GenerativeModel>> {
    if k < 2 {
        return Err(Error::precondition("an ensemble needs at least two members"));
    }
    (0..k as u64)
        .map(|i| {
            let member_cfg = TrainConfig { seed: cfg.seed + i, ..cfg.clone() };
            let m = GenerativeModel::new(arch.clone(), data.shape(), precision, member_cfg.seed)?;
            fit(m, data, &member_cfg)
        })
        .collect()
}
