//! Affine coupling flow (RealNVP style). The coupling stack works on flat
//! vectors; images are dequantized and logit-transformed before entering it.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::ImageShape;
use crate::error::Result;
use crate::nn::{affine, Init, Params, Precision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowArch {
    pub layers: usize,
    pub hidden: usize,
    /// Logit squashing constant: y in (0,1) maps to logit(alpha + (1 - 2 alpha) y).
    pub alpha: f64,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self { layers: 6, hidden: 128, alpha: 0.05 }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Binary masks (1 = passed through unchanged) for each coupling layer.
pub(crate) fn image_masks(shape: ImageShape, layers: usize) -> Vec<Vec<f64>> {
    (0..layers)
        .map(|k| {
            let channel = shape.c > 1 && k % 4 >= 2;
            let mut m = Vec::with_capacity(shape.dims());
            for i in 0..shape.h {
                for j in 0..shape.w {
                    for c in 0..shape.c {
                        let bit = if channel { c % 2 } else { (i + j) % 2 };
                        m.push(if bit == k % 2 { 1.0 } else { 0.0 });
                    }
                }
            }
            m
        })
        .collect()
}

/// Alternating half masks for a flat vector of length `dim`.
pub(crate) fn vector_masks(dim: usize, layers: usize) -> Vec<Vec<f64>> {
    (0..layers).map(|k| (0..dim).map(|i| if i % 2 == k % 2 { 1.0 } else { 0.0 }).collect()).collect()
}

/// A stack of affine couplings followed by an elementwise affine layer and a
/// standard normal base density.
#[derive(Clone)]
pub(crate) struct CouplingStack {
    masks: Vec<Tensor>,
    dim: usize,
}

impl CouplingStack {
    pub(crate) fn new(masks: Vec<Vec<f64>>, precision: Precision) -> Result<Self> {
        let dim = masks.first().map_or(0, |m| m.len());
        let masks = masks
            .into_iter()
            .map(|m| Ok(Tensor::from_vec(m, dim, &Device::Cpu)?.to_dtype(precision.dtype())?))
            .collect::<Result<_>>()?;
        Ok(Self { masks, dim })
    }

    pub(crate) fn init(&self, hidden: usize, init: &mut Init, p: &mut Params) -> Result<()> {
        let d = self.dim;
        for k in 0..self.masks.len() {
            p.insert(&format!("c{k}.l1.w"), init.linear(d, hidden)?)?;
            p.insert(&format!("c{k}.l1.b"), init.zeros(&[hidden])?)?;
            p.insert(&format!("c{k}.l2.w"), init.linear(hidden, hidden)?)?;
            p.insert(&format!("c{k}.l2.b"), init.zeros(&[hidden])?)?;
            p.insert(&format!("c{k}.out.w"), init.zeros(&[hidden, 2 * d])?)?;
            p.insert(&format!("c{k}.out.b"), init.zeros(&[2 * d])?)?;
            p.insert(&format!("c{k}.scale"), Tensor::ones(d, candle_core::DType::F64, &Device::Cpu)?)?;
        }
        p.insert("final.log_scale", init.zeros(&[d])?)?;
        p.insert("final.shift", init.zeros(&[d])?)?;
        Ok(())
    }

    pub(crate) fn layers(&self) -> usize {
        self.masks.len()
    }

    /// Log-scale and shift of layer `k` given the pass-through half, both
    /// already zeroed on the pass-through dimensions.
    fn coupling(&self, p: &Params, k: usize, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let m = &self.masks[k];
        let keep = m.affine(-1.0, 1.0)?;
        let h = affine(&z.broadcast_mul(m)?, p.get(&format!("c{k}.l1.w")), p.get(&format!("c{k}.l1.b")))?.relu()?;
        let h = affine(&h, p.get(&format!("c{k}.l2.w")), p.get(&format!("c{k}.l2.b")))?.relu()?;
        let o = affine(&h, p.get(&format!("c{k}.out.w")), p.get(&format!("c{k}.out.b")))?;
        let s = o.narrow(1, 0, self.dim)?.tanh()?.broadcast_mul(p.get(&format!("c{k}.scale")))?.broadcast_mul(&keep)?;
        let t = o.narrow(1, self.dim, self.dim)?.broadcast_mul(&keep)?;
        Ok((s, t))
    }

    /// Data to latent, returning the latent and per-row log|det J|.
    pub(crate) fn forward(&self, p: &Params, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut z = x.clone();
        let mut logdet = x.zeros_like()?.sum(1)?;
        for k in 0..self.masks.len() {
            let (s, t) = self.coupling(p, k, &z)?;
            z = ((z * s.exp()?)? + t)?;
            logdet = (logdet + s.sum(1)?)?;
        }
        let ls = p.get("final.log_scale");
        z = z.broadcast_mul(&ls.exp()?)?.broadcast_add(p.get("final.shift"))?;
        logdet = logdet.broadcast_add(&ls.sum_all()?)?;
        Ok((z, logdet))
    }

    pub(crate) fn inverse(&self, p: &Params, z: &Tensor) -> Result<Tensor> {
        let ls = p.get("final.log_scale");
        let mut x = z.broadcast_sub(p.get("final.shift"))?.broadcast_mul(&ls.neg()?.exp()?)?;
        for k in (0..self.masks.len()).rev() {
            let (s, t) = self.coupling(p, k, &x)?;
            x = ((x - t)? * s.neg()?.exp()?)?;
        }
        Ok(x)
    }

    /// Exact log-density of each row of `x`.
    pub(crate) fn log_prob(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        let (z, logdet) = self.forward(p, x)?;
        let base = z.sqr()?.sum(1)?.affine(-0.5, -0.5 * self.dim as f64 * LN_2PI)?;
        Ok((base + logdet)?)
    }
}

/// Continuous pixel values v in [0, 256) to logit space, with the per-row
/// log-Jacobian of the map.
pub(crate) fn preprocess(v: &Tensor, alpha: f64) -> Result<(Tensor, Tensor)> {
    let dims = v.dim(1)?;
    let y = v.affine((1.0 - 2.0 * alpha) / 256.0, alpha)?;
    let one_minus = y.affine(-1.0, 1.0)?;
    let z = (y.log()? - one_minus.log()?)?;
    let logdet = (y.log()? + one_minus.log()?)?
        .sum(1)?
        .neg()?
        .affine(1.0, dims as f64 * ((1.0 - 2.0 * alpha) / 256.0).ln())?;
    Ok((z, logdet))
}

pub(crate) fn image_log_prob(stack: &CouplingStack, p: &Params, arch: &FlowArch, v: &Tensor) -> Result<Tensor> {
    let (z, pre) = preprocess(v, arch.alpha)?;
    Ok((stack.log_prob(p, &z)? + pre)?)
}

/// A coupling flow on a low-dimensional continuous space, used to check the
/// change-of-variables machinery against closed forms.
pub struct VectorFlow {
    pub params: Params,
    stack: CouplingStack,
}

impl VectorFlow {
    pub fn new(dim: usize, layers: usize, hidden: usize, precision: Precision, seed: u64) -> Result<Self> {
        let stack = CouplingStack::new(vector_masks(dim, layers), precision)?;
        let mut params = Params::new(precision);
        stack.init(hidden, &mut Init::new(seed), &mut params)?;
        Ok(Self { params, stack })
    }

    pub fn layers(&self) -> usize {
        self.stack.layers()
    }

    /// Replace every parameter with draws of the given scale so the flow is
    /// far from the identity.
    pub fn randomize(&mut self, std: f64, seed: u64) -> Result<()> {
        let mut init = Init::new(seed);
        for name in self.params.names().to_vec() {
            let shape = self.params.get(&name).dims().to_vec();
            let t = init.normal(&shape, std)?.to_dtype(self.params.precision().dtype())?;
            self.params.var(&name).expect("name from the store").set(&t)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.stack.forward(&self.params, x)
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.stack.inverse(&self.params, z)
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        self.stack.log_prob(&self.params, x)
    }
}
