//! Fully connected VAE with a Gaussian latent and a per-pixel discretized
//! logistic decoder.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::logistic::{fused_logistic, to_unit};
use crate::error::Result;
use crate::nn::{affine, logsumexp_last, Init, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeArch {
    pub hidden: usize,
    pub latent: usize,
    /// Importance samples for the log-density estimate.
    pub iw_samples: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self { hidden: 256, latent: 16, iw_samples: 64 }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub(crate) fn init(arch: &VaeArch, dims: usize, init: &mut Init, p: &mut Params) -> Result<()> {
    let (h, l) = (arch.hidden, arch.latent);
    p.insert("enc1.w", init.linear(dims, h)?)?;
    p.insert("enc1.b", init.zeros(&[h])?)?;
    p.insert("enc2.w", init.linear(h, h)?)?;
    p.insert("enc2.b", init.zeros(&[h])?)?;
    p.insert("mu.w", init.normal(&[h, l], 0.01)?)?;
    p.insert("mu.b", init.zeros(&[l])?)?;
    p.insert("logvar.w", init.normal(&[h, l], 0.01)?)?;
    p.insert("logvar.b", init.zeros(&[l])?)?;
    p.insert("dec1.w", init.linear(l, h)?)?;
    p.insert("dec1.b", init.zeros(&[h])?)?;
    p.insert("dec2.w", init.linear(h, h)?)?;
    p.insert("dec2.b", init.zeros(&[h])?)?;
    p.insert("out.w", init.normal(&[h, 2 * dims], 0.01)?)?;
    p.insert("out.b", init.zeros(&[2 * dims])?)?;
    Ok(())
}

fn encode(p: &Params, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let h = affine(v, p.get("enc1.w"), p.get("enc1.b"))?.relu()?;
    let h = affine(&h, p.get("enc2.w"), p.get("enc2.b"))?.relu()?;
    let mu = affine(&h, p.get("mu.w"), p.get("mu.b"))?;
    let logvar = affine(&h, p.get("logvar.w"), p.get("logvar.b"))?.clamp(-12.0, 8.0)?;
    Ok((mu, logvar))
}

/// log p(x | z) summed over pixels. `z` is (N, L), `v` is (N, D) in [-1, 1].
fn decode_logp(p: &Params, z: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dims = v.dim(1)?;
    let h = affine(z, p.get("dec1.w"), p.get("dec1.b"))?.relu()?;
    let h = affine(&h, p.get("dec2.w"), p.get("dec2.b"))?.relu()?;
    let o = affine(&h, p.get("out.w"), p.get("out.b"))?;
    let mean = o.narrow(1, 0, dims)?;
    let log_scale = o.narrow(1, dims, dims)?;
    Ok(fused_logistic(v, &mean, &log_scale, 256)?.sum(1)?)
}

/// Single-sample ELBO with analytic KL, per row of `x` (raw pixel values).
/// `eps` is (B, L) standard normal noise.
pub(crate) fn elbo_objective(p: &Params, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let v = to_unit(x, 256)?;
    let (mu, logvar) = encode(p, &v)?;
    let z = (&mu + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
    let rec = decode_logp(p, &z, &v)?;
    let kl = ((mu.sqr()? + logvar.exp()?)? - logvar)?.affine(1.0, -1.0)?.sum(1)?.affine(0.5, 0.0)?;
    Ok((rec - kl)?)
}

/// Log importance weights log p(x|z_k) + log p(z_k) - log q(z_k|x) for the
/// fixed noise `eps` of shape (K, L). Returns (B, K).
pub(crate) fn log_weights(p: &Params, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let (b, dims) = x.dims2()?;
    let (k, l) = eps.dims2()?;
    let v = to_unit(x, 256)?;
    let (mu, logvar) = encode(p, &v)?;
    let std = logvar.affine(0.5, 0.0)?.exp()?;
    let z = mu.unsqueeze(1)?.broadcast_add(&std.unsqueeze(1)?.broadcast_mul(&eps.unsqueeze(0)?)?)?;
    let zf = z.reshape((b * k, l))?;
    let vf = v.unsqueeze(1)?.broadcast_as((b, k, dims))?.reshape((b * k, dims))?;
    let rec = decode_logp(p, &zf, &vf)?.reshape((b, k))?;
    let log_prior = (zf.sqr()?.sum(1)?.affine(-0.5, -0.5 * l as f64 * LN_2PI))?.reshape((b, k))?;
    // log q(z|x) with z = mu + std * eps
    let log_q = eps
        .sqr()?
        .sum(1)?
        .affine(-0.5, -0.5 * l as f64 * LN_2PI)?
        .unsqueeze(0)?
        .broadcast_sub(&logvar.sum(1)?.affine(0.5, 0.0)?.unsqueeze(1)?)?;
    Ok(((rec + log_prior)? - log_q)?)
}

/// Importance-sampled log-density: logsumexp over samples minus log K.
pub(crate) fn iw_log_density(w: &Tensor) -> Result<Tensor> {
    let k = w.dim(D::Minus1)?;
    Ok(logsumexp_last(w)?.affine(1.0, -(k as f64).ln())?)
}

/// Monte-Carlo ELBO from the same weights: their mean.
pub(crate) fn mc_elbo(w: &Tensor) -> Result<Tensor> {
    Ok(w.mean(D::Minus1)?)
}
