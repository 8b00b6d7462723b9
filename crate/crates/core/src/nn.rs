//! Parameter storage, seeded initialization, and the Adam optimizer shared by
//! every trainable network in the crate. All randomness comes from ChaCha
//! streams on the host so results never depend on candle's global RNG.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// An ordered set of named trainable tensors.
pub struct Params {
    names: Vec<String>,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
    precision: Precision,
}

impl Params {
    pub fn new(precision: Precision) -> Self {
        Self { names: Vec::new(), vars: Vec::new(), index: HashMap::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = t.to_dtype(self.precision.dtype())?;
        self.index.insert(name.to_string(), self.vars.len());
        self.names.push(name.to_string());
        self.vars.push(Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        match self.index.get(name) {
            Some(&i) => self.vars[i].as_tensor(),
            None => panic!("no parameter named `{name}`"),
        }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_elements(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    /// Independent copy: updates to either set never reach the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Params::new(self.precision);
        for (n, v) in self.names.iter().zip(&self.vars) {
            out.insert(n, v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn entries(&self) -> Vec<ParamEntry> {
        self.names
            .iter()
            .zip(&self.vars)
            .map(|(n, v)| ParamEntry { name: n.clone(), shape: v.dims().to_vec() })
            .collect()
    }

    /// Little-endian concatenation of every parameter in insertion order.
    pub fn to_blob(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.num_elements() * 8);
        for v in &self.vars {
            let flat = v.as_tensor().flatten_all()?;
            match self.precision {
                Precision::F32 => {
                    for x in flat.to_vec1::<f32>()? {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Precision::F64 => {
                    for x in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_blob(entries: &[ParamEntry], blob: &[u8], precision: Precision, device: &Device) -> Result<Self> {
        let width = match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if total * width != blob.len() {
            return Err(Error::Checkpoint(format!(
                "parameter blob has {} bytes, entries need {}",
                blob.len(),
                total * width
            )));
        }
        let mut out = Params::new(precision);
        let mut off = 0;
        for e in entries {
            let n: usize = e.shape.iter().product();
            let bytes = &blob[off..off + n * width];
            off += n * width;
            let t = match precision {
                Precision::F32 => {
                    let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                Precision::F64 => {
                    let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
            };
            out.insert(&e.name, t)?;
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and raw parameter bytes.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for e in self.entries() {
            h.update(e.name.as_bytes());
            for d in e.shape {
                h.update((d as u64).to_le_bytes());
            }
        }
        h.update(self.to_blob()?);
        Ok(hex::encode(h.finalize()))
    }
}

/// Seeded initializer for parameter tensors.
pub struct Init {
    rng: ChaCha8Rng,
    device: Device,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Ok(Tensor::from_vec(v, shape, &self.device)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, DType::F64, &self.device)?)
    }

    /// He-normal weight for a (fan_in, fan_out) matrix.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Result<Tensor> {
        self.normal(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam on a loss to be minimized. Moments live on the host in the parameter
/// precision and the update is a plain loop, which is far cheaper than a chain
/// of tensor ops for the parameter counts used here.
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    moments: Vec<Moments>,
}

enum Moments {
    Empty,
    F32(Vec<f32>, Vec<f32>),
    F64(Vec<f64>, Vec<f64>),
}

enum HostGrad {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

macro_rules! adam_update {
    ($ty:ty, $theta:expr, $m:expr, $v:expr, $g:expr, $cfg:expr, $lr:expr, $bc1:expr, $bc2:expr) => {{
        let (b1, b2, eps) = ($cfg.beta1 as $ty, $cfg.beta2 as $ty, $cfg.eps as $ty);
        let step = ($lr / $bc1) as $ty;
        let inv_bc2 = (1.0 / $bc2) as $ty;
        for ((t, (m, v)), &g) in $theta.iter_mut().zip($m.iter_mut().zip($v.iter_mut())).zip($g.iter()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *t -= step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }};
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self { cfg, t: 0, moments: (0..n_params).map(|_| Moments::Empty).collect() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Non-finite gradients abort the step before any parameter moves.
    pub fn step(&mut self, params: &Params, grads: &GradStore, lr: f64) -> Result<()> {
        if self.moments.len() != params.vars().len() {
            return Err(Error::precondition("optimizer state does not match parameter count"));
        }
        let mut host = Vec::with_capacity(params.vars().len());
        for var in params.vars() {
            let g = match grads.get(var) {
                None => None,
                Some(g) => {
                    let flat = g.to_dtype(var.dtype())?.flatten_all()?;
                    let g = match var.dtype() {
                        DType::F32 => HostGrad::F32(flat.to_vec1::<f32>()?),
                        _ => HostGrad::F64(flat.to_dtype(DType::F64)?.to_vec1::<f64>()?),
                    };
                    let finite = match &g {
                        HostGrad::F32(g) => g.iter().all(|x| x.is_finite()),
                        HostGrad::F64(g) => g.iter().all(|x| x.is_finite()),
                    };
                    if !finite {
                        return Err(Error::NonFiniteGradient);
                    }
                    Some(g)
                }
            };
            host.push(g);
        }
        self.t += 1;
        let cfg = self.cfg;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, (var, g)) in params.vars().iter().zip(host).enumerate() {
            let Some(g) = g else { continue };
            let flat = var.as_tensor().flatten_all()?;
            let updated = match g {
                HostGrad::F32(g) => {
                    if !matches!(self.moments[i], Moments::F32(..)) {
                        self.moments[i] = Moments::F32(vec![0.0; g.len()], vec![0.0; g.len()]);
                    }
                    let Moments::F32(m, v) = &mut self.moments[i] else { unreachable!() };
                    let mut theta = flat.to_vec1::<f32>()?;
                    adam_update!(f32, theta, m, v, g, cfg, lr, bc1, bc2);
                    Tensor::from_vec(theta, var.shape(), var.device())?
                }
                HostGrad::F64(g) => {
                    if !matches!(self.moments[i], Moments::F64(..)) {
                        self.moments[i] = Moments::F64(vec![0.0; g.len()], vec![0.0; g.len()]);
                    }
                    let Moments::F64(m, v) = &mut self.moments[i] else { unreachable!() };
                    let mut theta = flat.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                    adam_update!(f64, theta, m, v, g, cfg, lr, bc1, bc2);
                    Tensor::from_vec(theta, var.shape(), var.device())?.to_dtype(var.dtype())?
                }
            };
            var.set(&updated)?;
        }
        Ok(())
    }
}

/// softplus(x) = log(1 + e^x), computed without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Log-sum-exp over the last dimension, which is removed.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + m)?.squeeze(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let lse = logsumexp_last(x)?.unsqueeze(D::Minus1)?;
    Ok(x.broadcast_sub(&lse)?)
}

/// `x @ w + b` for a (batch, in) input.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_row_bias(&x.matmul(w)?, b)
}

/// Adds a (cols,) bias to every row of a (rows, cols) tensor. Equivalent to
/// `broadcast_add`, with a single-pass forward and a column-sum backward.
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, cols) = x.dims2()?;
    if b.dims1()? != cols {
        return Err(Error::ShapeMismatch { expected: format!("bias of length {cols}"), actual: format!("{:?}", b.dims()) });
    }
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, RowBias)?)
}

struct RowBias;

fn row_bias<T: Copy + std::ops::Add<Output = T>>(x: &[T], b: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(b.len()) {
        for (o, &bias) in row.iter_mut().zip(b) {
            *o = *o + bias;
        }
    }
    out
}

impl CustomOp2 for RowBias {
    fn name(&self) -> &'static str {
        "row-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (Some((a0, a1)), Some((b0, b1))) = (l1.contiguous_offsets(), l2.contiguous_offsets()) else {
            return Err(candle_core::Error::Msg("row-bias expects contiguous inputs".into()));
        };
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(row_bias(&x[a0..a1], &b[b0..b1])),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(row_bias(&x[a0..a1], &b[b0..b1])),
            _ => return Err(candle_core::Error::Msg("row-bias expects matching f32 or f64 inputs".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let cols = b.elem_count();
        let g = grad.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut gb = vec![0.0; cols];
        for row in g.chunks(cols) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let gb = Tensor::from_vec(gb, cols, b.device())?.to_dtype(b.dtype())?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
