//! Discretized logistic likelihood over `levels` evenly spaced pixel values
//! mapped to [-1, 1], with the two extreme bins absorbing the tails.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::Result;
#[cfg(test)]
use crate::nn::{logsumexp_last, log_softmax_last, softplus};

pub(crate) const MIN_LOG_SCALE: f64 = -7.0;

/// Map integer pixel values `0..levels` to [-1, 1].
pub(crate) fn to_unit(x: &Tensor, levels: usize) -> Result<Tensor> {
    Ok(x.affine(2.0 / (levels as f64 - 1.0), -1.0)?)
}

/// log(e^d - 1) for d > 0 without cancellation near zero.
#[cfg(test)]
fn log_expm1(d: &Tensor) -> Result<Tensor> {
    const SWITCH: f64 = 1e-2;
    let small = d.lt(SWITCH)?.to_dtype(d.dtype())?;
    let lo = d.minimum(SWITCH)?;
    let hi = d.maximum(SWITCH)?;
    let series = (lo.log()? + (lo.affine(0.5, 0.0)? + lo.sqr()?.affine(1.0 / 24.0, 0.0)?)?)?;
    let direct = (&hi + hi.neg()?.exp()?.affine(-1.0, 1.0)?.log()?)?;
    Ok(((&small * series)? + (small.affine(-1.0, 1.0)? * direct)?)?)
}

/// Per-element log-probability of `v` (already mapped to [-1, 1]) under a
/// logistic with the given mean and log-scale, integrated over its bin.
/// Composed from tensor ops; [`fused_logistic`] is the fast equivalent.
#[cfg(test)]
pub(crate) fn discretized_logistic(v: &Tensor, mean: &Tensor, log_scale: &Tensor, levels: usize) -> Result<Tensor> {
    let half = 1.0 / (levels as f64 - 1.0);
    let inv = log_scale.maximum(MIN_LOG_SCALE)?.neg()?.exp()?;
    let c = (v - mean)?;
    let a = (c.affine(1.0, half)? * &inv)?;
    let b = (c.affine(1.0, -half)? * &inv)?;
    let edge_lo = softplus(&a.neg()?)?.neg()?;
    let edge_hi = softplus(&b)?.neg()?;
    let d = inv.affine(2.0 * half, 0.0)?;
    let mid = (((&b + log_expm1(&d)?)? - softplus(&a)?)? - softplus(&b)?)?;
    let dt = v.dtype();
    let lo = v.le(-1.0 + half / 2.0)?.to_dtype(dt)?;
    let hi = v.ge(1.0 - half / 2.0)?.to_dtype(dt)?;
    let inner = ((lo.affine(-1.0, 1.0)? - &hi)?).to_dtype(dt)?;
    Ok((((lo * edge_lo)? + (hi * edge_hi)?)? + (inner * mid)?)?)
}

/// Mixture of discretized logistics. `v` has shape (N,); the parameter
/// tensors have shape (N, K). Returns (N,) log-probabilities. Composed from
/// tensor ops; [`fused_mixture`] is the fast equivalent used in training.
#[cfg(test)]
pub(crate) fn discretized_logistic_mixture(
    v: &Tensor,
    logits: &Tensor,
    means: &Tensor,
    log_scales: &Tensor,
    levels: usize,
) -> Result<Tensor> {
    let k = logits.dim(1)?;
    let vk = v.unsqueeze(1)?.broadcast_as((v.dim(0)?, k))?.contiguous()?;
    let lp = discretized_logistic(&vk, means, log_scales, levels)?;
    logsumexp_last(&(log_softmax_last(logits)? + lp)?)
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus_f64(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// One bin of a discretized logistic: the log-probability and its partial
/// derivatives with respect to the mean and the log-scale.
#[derive(Clone, Copy, Debug)]
struct Bin {
    lp: f64,
    d_mean: f64,
    d_log_scale: f64,
}

fn bin(v: f64, mean: f64, log_scale: f64, half: f64) -> Bin {
    let clamped = log_scale < MIN_LOG_SCALE;
    let inv = (-log_scale.max(MIN_LOG_SCALE)).exp();
    let c = v - mean;
    let a = (c + half) * inv;
    let b = (c - half) * inv;
    let (lp, ga, gb) = if v <= -1.0 + half / 2.0 {
        (-softplus_f64(-a), sigmoid(-a), 0.0)
    } else if v >= 1.0 - half / 2.0 {
        (-softplus_f64(b), 0.0, -sigmoid(b))
    } else {
        let d = 2.0 * half * inv;
        let log_expm1 = if d < 1e-2 { d.ln() + d / 2.0 + d * d / 24.0 } else { d + (-(-d).exp()).ln_1p() };
        // derivative of log(e^d - 1)
        let dl = -1.0 / (-d).exp_m1();
        (b + log_expm1 - softplus_f64(a) - softplus_f64(b), dl - sigmoid(a), 1.0 - dl - sigmoid(b))
    };
    Bin { lp, d_mean: -inv * (ga + gb), d_log_scale: if clamped { 0.0 } else { -(a * ga + b * gb) } }
}

fn host_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused logistic expects contiguous inputs".into()))?;
    match s {
        CpuStorage::F32(v) => Ok(v[start..end].iter().map(|&x| x as f64).collect()),
        CpuStorage::F64(v) => Ok(v[start..end].to_vec()),
        _ => Err(candle_core::Error::Msg("fused logistic expects f32 or f64".into())),
    }
}

fn storage_like(s: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match s {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn tensor_like(v: Vec<f64>, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

struct FusedLogistic {
    half: f64,
}

impl CustomOp3 for FusedLogistic {
    fn name(&self) -> &'static str {
        "fused-discretized-logistic"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (v, m, ls) = (host_f64(s1, l1)?, host_f64(s2, l2)?, host_f64(s3, l3)?);
        let out = (0..v.len()).map(|i| bin(v[i], m[i], ls[i], self.half).lp).collect();
        Ok((storage_like(s1, out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        v: &Tensor,
        m: &Tensor,
        ls: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (hv, hm, hl, g) = (tensor_f64(v)?, tensor_f64(m)?, tensor_f64(ls)?, tensor_f64(grad)?);
        let n = hv.len();
        let (mut gv, mut gm, mut gl) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let b = bin(hv[i], hm[i], hl[i], self.half);
            gm[i] = g[i] * b.d_mean;
            gv[i] = -gm[i];
            gl[i] = g[i] * b.d_log_scale;
        }
        Ok((Some(tensor_like(gv, v)?), Some(tensor_like(gm, m)?), Some(tensor_like(gl, ls)?)))
    }
}

/// Same values as [`discretized_logistic`] in a single pass, with an analytic
/// backward pass.
pub(crate) fn fused_logistic(v: &Tensor, mean: &Tensor, log_scale: &Tensor, levels: usize) -> Result<Tensor> {
    let op = FusedLogistic { half: 1.0 / (levels as f64 - 1.0) };
    Ok(v.contiguous()?.apply_op3(&mean.contiguous()?, &log_scale.contiguous()?, op)?)
}

struct FusedMixture {
    half: f64,
    k: usize,
}

impl FusedMixture {
    /// Log-probability of one target under one row of mixture parameters
    /// laid out as [logits | means | log-scales], with optional gradients.
    fn row(&self, v: f64, o: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let k = self.k;
        let logits = &o[..k];
        let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse_logits = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
        let bins: Vec<Bin> = (0..k).map(|j| bin(v, o[k + j], o[2 * k + j], self.half)).collect();
        let joint: Vec<f64> = (0..k).map(|j| logits[j] - lse_logits + bins[j].lp).collect();
        let jmax = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = jmax + joint.iter().map(|x| (x - jmax).exp()).sum::<f64>().ln();
        if let Some(g) = grad {
            for j in 0..k {
                let resp = (joint[j] - out).exp();
                let weight = (logits[j] - lse_logits).exp();
                g[j] = resp - weight;
                g[k + j] = resp * bins[j].d_mean;
                g[2 * k + j] = resp * bins[j].d_log_scale;
            }
        }
        out
    }
}

impl CustomOp2 for FusedMixture {
    fn name(&self) -> &'static str {
        "fused-logistic-mixture"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (v, o) = (host_f64(s1, l1)?, host_f64(s2, l2)?);
        let w = 3 * self.k;
        let out = (0..v.len()).map(|i| self.row(v[i], &o[i * w..(i + 1) * w], None)).collect();
        Ok((storage_like(s2, out), l1.shape().clone()))
    }

    fn bwd(&self, v: &Tensor, o: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (hv, ho, g) = (tensor_f64(v)?, tensor_f64(o)?, tensor_f64(grad)?);
        let w = 3 * self.k;
        let mut go = vec![0.0; ho.len()];
        for i in 0..hv.len() {
            let row = &mut go[i * w..(i + 1) * w];
            self.row(hv[i], &ho[i * w..(i + 1) * w], Some(row));
            row.iter_mut().for_each(|x| *x *= g[i]);
        }
        Ok((None, Some(tensor_like(go, o)?)))
    }
}

/// Mixture of `k` discretized logistics with parameters packed per row of `o`
/// (shape (N, 3k)) as [logits | means | log-scales]; `v` has shape (N,).
/// Returns (N,) log-probabilities. Gradients flow to `o` only.
pub(crate) fn fused_mixture(v: &Tensor, o: &Tensor, k: usize, levels: usize) -> Result<Tensor> {
    let op = FusedMixture { half: 1.0 / (levels as f64 - 1.0), k };
    Ok(v.contiguous()?.apply_op2(&o.contiguous()?, op)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn sigmoid(u: f64) -> f64 {
        1.0 / (1.0 + (-u).exp())
    }

    /// Probability mass of the logistic between `lo` and `hi`, evaluated on
    /// whichever tail avoids cancellation.
    fn mass(lo: f64, hi: f64, m: f64, s: f64) -> f64 {
        let (a, b) = ((hi - m) / s, (lo - m) / s);
        if b > 0.0 {
            sigmoid(-b) - sigmoid(-a)
        } else {
            sigmoid(a) - sigmoid(b)
        }
    }

    #[test]
    fn matches_cdf_differences_and_normalizes() {
        for &levels in &[4usize, 256] {
            for &(m, ls) in &[(0.0, -1.0), (0.3, -4.0), (-0.9, 0.5), (0.99, -6.5)] {
                let vals: Vec<f64> = (0..levels).map(|x| 2.0 * x as f64 / (levels as f64 - 1.0) - 1.0).collect();
                let n = vals.len();
                let v = Tensor::from_vec(vals.clone(), n, &Device::Cpu).unwrap();
                let mt = Tensor::full(m, n, &Device::Cpu).unwrap();
                let lt = Tensor::full(ls, n, &Device::Cpu).unwrap();
                let lp = discretized_logistic(&v, &mt, &lt, levels).unwrap().to_vec1::<f64>().unwrap();
                let half = 1.0 / (levels as f64 - 1.0);
                let s = f64::exp(ls);
                let mut total = 0.0;
                for (k, &x) in vals.iter().enumerate() {
                    let hi = if k == n - 1 { f64::INFINITY } else { x + half };
                    let lo = if k == 0 { f64::NEG_INFINITY } else { x - half };
                    let want = mass(lo, hi, m, s).ln();
                    if want > -30.0 {
                        assert!((lp[k] - want).abs() < 1e-8 * want.abs().max(1.0), "{levels} {m} {ls} {k}: {} vs {want}", lp[k]);
                    }
                    total += lp[k].exp();
                }
                assert!((total - 1.0).abs() < 1e-10, "{total}");
            }
        }
    }

    #[test]
    fn sharp_components_stay_finite() {
        let v = Tensor::new(&[0.0f32, 1.0, -1.0], &Device::Cpu).unwrap();
        let m = Tensor::new(&[0.9f32, -0.9, 0.9], &Device::Cpu).unwrap();
        let l = Tensor::new(&[-20.0f32, -20.0, -20.0], &Device::Cpu).unwrap();
        let lp = discretized_logistic(&v, &m, &l, 256).unwrap().to_vec1::<f32>().unwrap();
        assert!(lp.iter().all(|x| x.is_finite()), "{lp:?}");
    }

    fn random(n: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>(), n, &Device::Cpu).unwrap()
    }

    fn targets(n: usize, levels: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n)
            .map(|i| match i % 7 {
                0 => 0.0,
                1 => (levels - 1) as f64,
                _ => rng.random_range(0..levels) as f64,
            })
            .collect();
        to_unit(&Tensor::from_vec(v, n, &Device::Cpu).unwrap(), levels).unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        let (a, b) = (a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= tol * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn fused_logistic_matches_composed_values_and_gradients() {
        use candle_core::Var;
        for &levels in &[4usize, 256] {
            let n = 700;
            let v = Var::from_tensor(&targets(n, levels, 1)).unwrap();
            let m = Var::from_tensor(&random(n, -1.2, 1.2, 2)).unwrap();
            let ls = Var::from_tensor(&random(n, -8.0, 1.0, 3)).unwrap();
            let composed = discretized_logistic(&v, &m, &ls, levels).unwrap();
            let fused = fused_logistic(&v, &m, &ls, levels).unwrap();
            close(&fused, &composed, 1e-10);
            let gc = composed.sum_all().unwrap().backward().unwrap();
            let gf = fused.sum_all().unwrap().backward().unwrap();
            for var in [&m, &ls, &v] {
                close(gf.get(var).unwrap(), gc.get(var).unwrap(), 1e-7);
            }
        }
    }

    #[test]
    fn fused_mixture_matches_composed_values_and_gradients() {
        use candle_core::Var;
        let (n, k, levels) = (300, 3, 256);
        let v = targets(n, levels, 4);
        let logits = random(n * k, -2.0, 2.0, 5).reshape((n, k)).unwrap();
        let means = random(n * k, -1.1, 1.1, 6).reshape((n, k)).unwrap();
        let scales = random(n * k, -7.5, 0.5, 7).reshape((n, k)).unwrap();
        let o = Var::from_tensor(&Tensor::cat(&[&logits, &means, &scales], 1).unwrap()).unwrap();
        let composed =
            discretized_logistic_mixture(&v, &o.narrow(1, 0, k).unwrap(), &o.narrow(1, k, k).unwrap(), &o.narrow(1, 2 * k, k).unwrap(), levels)
                .unwrap();
        let fused = fused_mixture(&v, &o, k, levels).unwrap();
        close(&fused, &composed, 1e-10);
        let w = random(n, 0.5, 1.5, 8);
        let gc = (&composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gf = (&fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        close(&gf.get(&o).unwrap().flatten_all().unwrap(), &gc.get(&o).unwrap().flatten_all().unwrap(), 1e-7);
    }
}
