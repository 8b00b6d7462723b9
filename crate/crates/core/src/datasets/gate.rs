//! Pair admission: a small convolutional classifier must separate the two
//! datasets almost perfectly before the pair counts as an OoD benchmark pair.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{registry_entry, DatasetHandle, DatasetResolver, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{self, Adam, AdamConfig, Init, Params, Precision};

pub const GATE_THRESHOLD: f64 = 0.999;

const MIN_TRAIN_PER_SIDE: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub channels: [usize; 4],
    pub max_train_per_side: usize,
    pub max_test_per_side: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            channels: [8, 16, 16, 16],
            max_train_per_side: 2000,
            max_test_per_side: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPair {
    pub in_name: String,
    pub out_name: String,
    pub admitted: bool,
    pub gate_auroc: f64,
}

impl DatasetPair {
    pub fn label(&self) -> String {
        format!("{}->{}", self.in_name, self.out_name)
    }

    pub fn reversed(&self) -> Self {
        Self { in_name: self.out_name.clone(), out_name: self.in_name.clone(), ..self.clone() }
    }
}

struct Classifier {
    params: Params,
    channels: [usize; 4],
}

impl Classifier {
    fn new(in_c: usize, channels: [usize; 4], seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut params = Params::new(Precision::F32);
        let mut prev = in_c;
        for (k, &c) in channels.iter().enumerate() {
            params.insert(&format!("conv{k}.w"), init.normal(&[c, prev, 3, 3], (2.0 / (9 * prev) as f64).sqrt())?)?;
            params.insert(&format!("conv{k}.b"), init.zeros(&[1, c, 1, 1])?)?;
            prev = c;
        }
        params.insert("head.w", init.linear(prev, 1)?)?;
        params.insert("head.b", init.zeros(&[1])?)?;
        Ok(Self { params, channels })
    }

    /// Logits for a (B, C, H, W) batch scaled to [0, 1].
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for k in 0..self.channels.len() {
            let stride = if k == 0 { 1 } else { 2 };
            h = h
                .conv2d(self.params.get(&format!("conv{k}.w")), 1, stride, 1, 1)?
                .broadcast_add(self.params.get(&format!("conv{k}.b")))?
                .relu()?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        Ok(nn::affine(&pooled, self.params.get("head.w"), self.params.get("head.b"))?.squeeze(1)?)
    }
}

fn to_nchw(data: &[(&DatasetHandle, usize)]) -> Result<Tensor> {
    let sh = data[0].0.shape();
    let mut v = Vec::with_capacity(data.len() * sh.dims());
    for &(d, i) in data {
        v.extend(d.pixels(i).iter().map(|&p| p as f32 / 255.0));
    }
    Ok(Tensor::from_vec(v, (data.len(), sh.h, sh.w, sh.c), &Device::Cpu)?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Train the gate classifier on the two train splits and score the two test
/// splits, with the first dataset as the positive class. Returns whether the
/// pair is admitted together with the test AUROC.
pub fn simply_classified(
    train: (&DatasetHandle, &DatasetHandle),
    test: (&DatasetHandle, &DatasetHandle),
    cfg: &GateConfig,
) -> Result<(bool, f64)> {
    let sh = train.0.shape();
    for d in [train.1, test.0, test.1] {
        if d.shape() != sh {
            return Err(Error::ShapeMismatch { expected: sh.to_string(), actual: d.shape().to_string() });
        }
    }
    for d in [train.0, train.1] {
        if d.len() < MIN_TRAIN_PER_SIDE {
            return Err(Error::InsufficientSamples(format!(
                "gate needs at least {MIN_TRAIN_PER_SIDE} training images per side, `{}` has {}",
                d.name(),
                d.len()
            )));
        }
    }
    let a = train.0.shuffled(cfg.seed).take(cfg.max_train_per_side);
    let b = train.1.shuffled(cfg.seed + 1).take(cfg.max_train_per_side);
    let mut items: Vec<(&DatasetHandle, usize, f32)> =
        (0..a.len()).map(|i| (&a, i, 1.0)).chain((0..b.len()).map(|i| (&b, i, 0.0))).collect();

    let net = Classifier::new(sh.c, cfg.channels, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig::default(), net.params.vars().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        items.shuffle(&mut rng);
        for (step, chunk) in items.chunks(cfg.batch_size.max(1)).enumerate() {
            let refs: Vec<_> = chunk.iter().map(|&(d, i, _)| (d, i)).collect();
            let x = to_nchw(&refs)?;
            let t = Tensor::from_vec(chunk.iter().map(|c| c.2).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let z = net.forward(&x)?;
            let loss = (nn::softplus(&z)? - (z * t)?)?.mean_all()?;
            let l = nn::scalar_f64(&loss)?;
            if !l.is_finite() {
                return Err(Error::Divergence { epoch, step, detail: "gate classifier loss is not finite".into() });
            }
            opt.step(&net.params, &loss.backward()?, cfg.learning_rate)?;
        }
    }

    let score = |d: &DatasetHandle| -> Result<Vec<f64>> {
        let d = d.shuffled(cfg.seed + 2).take(cfg.max_test_per_side);
        let mut out = Vec::with_capacity(d.len());
        for start in (0..d.len()).step_by(256) {
            let refs: Vec<_> = (start..(start + 256).min(d.len())).map(|i| (&d, i)).collect();
            out.extend(nn::vec_f64(&net.forward(&to_nchw(&refs)?)?.to_dtype(DType::F64)?)?);
        }
        Ok(out)
    };
    let auroc = metrics::auroc(&metrics::labelled(&score(test.0)?, &score(test.1)?))?;
    Ok((auroc >= GATE_THRESHOLD, auroc))
}

/// Gate every unordered pair of shape-compatible names once and return both
/// ordered pairs for each, admitted or not, in input order.
pub fn gate_pairs(names: &[&str], resolver: &DatasetResolver, cfg: &GateConfig) -> Result<Vec<DatasetPair>> {
    if names.len() < 2 {
        return Err(Error::precondition("pair enumeration needs at least two datasets"));
    }
    let mut out = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            if registry_entry(a)?.shape != registry_entry(b)?.shape {
                continue;
            }
            let (tra, trb) = (resolver.resolve(a, Split::Train)?, resolver.resolve(b, Split::Train)?);
            let (tea, teb) = (resolver.resolve(a, Split::Test)?, resolver.resolve(b, Split::Test)?);
            let (admitted, gate_auroc) = simply_classified((&tra, &trb), (&tea, &teb), cfg)?;
            log::info!("gate {a} vs {b}: auroc {gate_auroc:.5} admitted {admitted}");
            let p = DatasetPair { in_name: a.to_string(), out_name: b.to_string(), admitted, gate_auroc };
            out.push(p.reversed());
            out.push(p);
        }
    }
    out.sort_by(|x, y| (&x.in_name, &x.out_name).cmp(&(&y.in_name, &y.out_name)));
    Ok(out)
}

/// Admitted ordered pairs among `names`; both directions of a pair are
/// admitted together.
pub fn enumerate_pairs(names: &[&str], resolver: &DatasetResolver, cfg: &GateConfig) -> Result<Vec<DatasetPair>> {
    Ok(gate_pairs(names, resolver, cfg)?.into_iter().filter(|p| p.admitted).collect())
}
