//! Autoregressive pixel model. Every sub-pixel is predicted from a causal
//! neighbourhood (the `radius` rows above within `radius` columns, the
//! `radius` pixels to its left, and the earlier channels of its own pixel),
//! which is the receptive field of one masked type-A convolution with kernel
//! size `2 * radius + 1`. The neighbourhood is gathered on the host and fed to
//! a shared MLP that outputs a discretized logistic mixture.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::logistic::fused_mixture;
use crate::datasets::ImageShape;
use crate::error::Result;
use crate::nn::{affine, Init, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelArArch {
    pub radius: usize,
    pub hidden: usize,
    pub mixtures: usize,
    /// Number of pixel intensity levels (256 for 8-bit images).
    pub levels: usize,
}

impl Default for PixelArArch {
    fn default() -> Self {
        Self { radius: 3, hidden: 64, mixtures: 3, levels: 256 }
    }
}

/// Precomputed causal neighbour offsets for one image shape.
pub(crate) struct Context {
    shape: ImageShape,
    levels: usize,
    /// For each raster position, the flat pixel index of every neighbour or
    /// `None` when it falls outside the image.
    neighbours: Vec<Vec<Option<usize>>>,
    pub(crate) features: usize,
}

impl Context {
    pub(crate) fn new(shape: ImageShape, arch: &PixelArArch) -> Self {
        let r = arch.radius as isize;
        let (h, w) = (shape.h as isize, shape.w as isize);
        let mut offsets = Vec::new();
        for di in -r..0 {
            for dj in -r..=r {
                offsets.push((di, dj));
            }
        }
        for dj in -r..0 {
            offsets.push((0, dj));
        }
        let neighbours = (0..h * w)
            .map(|pos| {
                let (i, j) = (pos / w, pos % w);
                offsets
                    .iter()
                    .map(|&(di, dj)| {
                        let (a, b) = (i + di, j + dj);
                        (a >= 0 && a < h && b >= 0 && b < w).then_some((a * w + b) as usize)
                    })
                    .collect()
            })
            .collect();
        let nb = offsets.len();
        let c = shape.c;
        let features = nb * c + nb + (c - 1) + if c > 1 { c } else { 0 } + 2;
        Self { shape, levels: arch.levels, neighbours, features }
    }

    fn scale(&self, v: u8) -> f32 {
        2.0 * v as f32 / (self.levels as f32 - 1.0) - 1.0
    }

    /// Feature rows (one per sub-pixel, raster order then channel) and the
    /// scaled targets.
    pub(crate) fn gather(&self, images: &[&[u8]]) -> (Vec<f32>, Vec<f32>) {
        let (h, w, c) = (self.shape.h, self.shape.w, self.shape.c);
        let rows = images.len() * h * w * c;
        let mut feats = Vec::with_capacity(rows * self.features);
        let mut targets = Vec::with_capacity(rows);
        for img in images {
            for (pos, nbs) in self.neighbours.iter().enumerate() {
                let (i, j) = (pos / w, pos % w);
                for ch in 0..c {
                    for nb in nbs {
                        match nb {
                            Some(k) => feats.extend(img[k * c..(k + 1) * c].iter().map(|&v| self.scale(v))),
                            None => feats.extend(std::iter::repeat_n(0.0, c)),
                        }
                    }
                    feats.extend(nbs.iter().map(|nb| if nb.is_some() { 1.0 } else { 0.0 }));
                    for prev in 0..c - 1 {
                        feats.push(if prev < ch { self.scale(img[pos * c + prev]) } else { 0.0 });
                    }
                    if c > 1 {
                        feats.extend((0..c).map(|k| if k == ch { 1.0 } else { 0.0 }));
                    }
                    feats.push(2.0 * i as f32 / (h.max(2) - 1) as f32 - 1.0);
                    feats.push(2.0 * j as f32 / (w.max(2) - 1) as f32 - 1.0);
                    targets.push(self.scale(img[pos * c + ch]));
                }
            }
        }
        (feats, targets)
    }
}

pub(crate) fn init(arch: &PixelArArch, ctx: &Context, init: &mut Init, p: &mut Params) -> Result<()> {
    let (f, h, k) = (ctx.features, arch.hidden, arch.mixtures);
    p.insert("l1.w", init.linear(f, h)?)?;
    p.insert("l1.b", init.zeros(&[h])?)?;
    p.insert("l2.w", init.linear(h, h)?)?;
    p.insert("l2.b", init.zeros(&[h])?)?;
    p.insert("out.w", init.normal(&[h, 3 * k], 0.01)?)?;
    // spread the initial component means over the intensity range
    let means: Vec<f64> = (0..k).map(|m| -0.5 + m as f64 / (k.max(2) - 1) as f64).collect();
    let mut b = vec![0.0; 3 * k];
    b[k..2 * k].copy_from_slice(&means);
    b[2 * k..].fill(-2.0);
    p.insert("out.b", Tensor::from_vec(b, 3 * k, &Device::Cpu)?)?;
    Ok(())
}

/// Per-sub-pixel log-probabilities, shape (B * H * W * C,).
pub(crate) fn subpixel_log_probs(p: &Params, arch: &PixelArArch, ctx: &Context, images: &[&[u8]]) -> Result<Tensor> {
    let (feats, targets) = ctx.gather(images);
    let rows = targets.len();
    let dt = p.precision().dtype();
    let x = Tensor::from_vec(feats, (rows, ctx.features), &Device::Cpu)?.to_dtype(dt)?;
    let v = Tensor::from_vec(targets, rows, &Device::Cpu)?.to_dtype(dt)?;
    let h1 = affine(&x, p.get("l1.w"), p.get("l1.b"))?.relu()?;
    let h2 = (affine(&h1, p.get("l2.w"), p.get("l2.b"))?.relu()? + &h1)?;
    let o = affine(&h2, p.get("out.w"), p.get("out.b"))?;
    fused_mixture(&v, &o, arch.mixtures, ctx.levels)
}

/// Exact log-likelihood per image, shape (B,).
pub(crate) fn log_prob(p: &Params, arch: &PixelArArch, ctx: &Context, images: &[&[u8]]) -> Result<Tensor> {
    let lp = subpixel_log_probs(p, arch, ctx, images)?;
    Ok(lp.reshape((images.len(), ctx.shape.dims()))?.sum(1)?)
}
