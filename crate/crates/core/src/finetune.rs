//! Fine-tune-based indicators. A copy gamma of the trained model theta is
//! trained further on test data, and a sample scores as in-distribution when
//! gamma gained little likelihood on it relative to theta:
//!
//! score(x) = log p_theta(x) - log p_gamma(x) - (beta / sigma) |log p_theta(x) - mu|
//!
//! Naive fine-tuning trains gamma on the whole unlabeled test set (with
//! online, block and subsample restrictions); single-shot fine-tuning trains a
//! fresh gamma per sample on augmentations of that sample alone.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{augment_batch_with, AugmentPolicy, DatasetHandle, ImageSample};
use crate::error::{Error, Result};
use crate::genmodels::GenerativeModel;
use crate::indicators::{score_with_penalty_scaled, IndicatorScore, PenaltyScale, TrainStats};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    #[default]
    Full,
    Online,
    Subsample20,
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Single-shot optimizer steps per sample.
    pub steps: usize,
    pub beta: f64,
    /// Single-shot batch size; element 0 is always the sample itself.
    pub aug_batch: usize,
    pub learning_rate: f64,
    /// Initialize gamma from theta (true) or from scratch (false).
    pub pretrained: bool,
    pub mode: FinetuneMode,
    pub block_size: usize,
    pub seed: u64,
    /// Passes over the test set for naive, block and subsample fine-tuning.
    pub naive_epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps taken after each arrival in online mode.
    pub online_steps: usize,
    pub subsample_fraction: f64,
    pub penalty_scale: PenaltyScale,
    pub augment: AugmentPolicy,
    /// Score every sample after every naive epoch (for learning curves).
    pub record_epoch_scores: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            beta: 0.1,
            aug_batch: 32,
            learning_rate: 1e-4,
            pretrained: true,
            mode: FinetuneMode::Full,
            block_size: 32,
            seed: 0,
            naive_epochs: 96,
            batch_size: 32,
            online_steps: 3,
            subsample_fraction: 0.2,
            penalty_scale: PenaltyScale::Variance,
            augment: AugmentPolicy::default(),
            record_epoch_scores: false,
        }
    }
}

impl FinetuneConfig {
    /// Learning rate one tenth of the training rate.
    pub fn for_training_rate(train_lr: f64) -> Self {
        Self { learning_rate: train_lr / 10.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aug_batch == 0 || self.batch_size == 0 || self.block_size == 0 {
            return Err(Error::Config("aug_batch, batch_size and block_size must be at least 1".into()));
        }
        if !(self.beta >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::Config("beta and learning_rate must be non-negative".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config("subsample_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-sample result of any fine-tune indicator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: String,
    pub score: f64,
    pub logp_theta: f64,
    pub logp_gamma: f64,
    pub seconds: f64,
    /// The sample's fine-tuning diverged; `score` holds the minimum finite value.
    pub failed: bool,
}

impl SampleOutcome {
    pub fn raw(&self) -> f64 {
        self.logp_theta - self.logp_gamma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub mode: FinetuneMode,
    /// In test-set order (stream order for online mode).
    pub samples: Vec<SampleOutcome>,
    /// Mean gamma training objective per epoch (index 0 is gamma before any step).
    pub gamma_trajectory: Vec<f64>,
    /// Scores of every sample after each epoch when requested; index 0 is
    /// gamma before training.
    pub epoch_scores: Vec<Vec<f64>>,
    /// Optimizer steps per sample (single-shot) or in total (other modes).
    pub steps: usize,
    /// Samples gamma was trained on (subsample mode).
    pub seen: Option<Vec<bool>>,
}

impl FinetuneOutcome {
    pub fn scores(&self) -> BTreeMap<String, IndicatorScore> {
        self.samples
            .iter()
            .map(|s| (s.id.clone(), IndicatorScore { indicator: "finetune".into(), value: s.score }))
            .collect()
    }

    pub fn score_vec(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score).collect()
    }

    pub fn failures(&self) -> usize {
        self.samples.iter().filter(|s| s.failed).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub steps: usize,
}

pub fn timing_report(outcome: &FinetuneOutcome) -> Result<TimingReport> {
    if outcome.samples.is_empty() {
        return Err(Error::precondition("no samples to time"));
    }
    let mut t: Vec<f64> = outcome.samples.iter().map(|s| s.seconds).collect();
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let median = if n % 2 == 1 { t[n / 2] } else { 0.5 * (t[n / 2 - 1] + t[n / 2]) };
    Ok(TimingReport { mean_seconds: t.iter().sum::<f64>() / n as f64, median_seconds: median, steps: outcome.steps })
}

fn penalized(raw: f64, logp: f64, stats: &TrainStats, cfg: &FinetuneConfig) -> Result<f64> {
    Ok(score_with_penalty_scaled(raw, logp, stats, cfg.beta, cfg.penalty_scale)?.value)
}

fn require_mode(cfg: &FinetuneConfig, mode: FinetuneMode) -> Result<()> {
    cfg.validate()?;
    if cfg.mode != mode {
        return Err(Error::Config(format!("expected mode {mode:?}, config has {:?}", cfg.mode)));
    }
    Ok(())
}

fn init_gamma(theta: &GenerativeModel, cfg: &FinetuneConfig) -> Result<GenerativeModel> {
    let mut g = if cfg.pretrained {
        theta.clone_params()?
    } else {
        GenerativeModel::new(theta.architecture().clone(), theta.shape(), theta.precision(), cfg.seed)?
    };
    g.reseed(cfg.seed ^ 0x9a33a);
    Ok(g)
}

fn diverged(epoch: usize, step: usize, trajectory: &[f64]) -> Error {
    Error::Divergence { epoch, step, detail: format!("gamma trajectory so far: {trajectory:?}") }
}

struct Trained {
    gamma: GenerativeModel,
    trajectory: Vec<f64>,
    epoch_logps: Vec<Vec<f64>>,
    steps: usize,
}

/// Train gamma on `train` for the configured epochs, optionally evaluating
/// `eval` after every epoch.
fn train_gamma(theta: &GenerativeModel, train: &DatasetHandle, eval: &DatasetHandle, cfg: &FinetuneConfig, seed: u64) -> Result<Trained> {
    let mut gamma = init_gamma(theta, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<&[u8]> = (0..train.len()).map(|i| train.pixels(i)).collect();
    let mut trajectory = vec![mean(&gamma.log_density_pixels(&all)?)];
    let mut epoch_logps = Vec::new();
    if cfg.record_epoch_scores {
        epoch_logps.push(gamma.log_density_dataset(eval)?);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    for epoch in 0..cfg.naive_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&[u8]> = idx.iter().map(|&i| train.pixels(i)).collect();
            let v = match gamma.step_pixels(&refs, cfg.learning_rate) {
                Ok(v) => v,
                Err(Error::NonFiniteGradient) => return Err(diverged(epoch, step, &trajectory)),
                Err(e) => return Err(e),
            };
            sum += v * idx.len() as f64;
            n += idx.len();
            steps += 1;
        }
        trajectory.push(sum / n as f64);
        if !trajectory.last().unwrap().is_finite() {
            return Err(diverged(epoch, 0, &trajectory));
        }
        if cfg.record_epoch_scores {
            epoch_logps.push(gamma.log_density_dataset(eval)?);
        }
    }
    Ok(Trained { gamma, trajectory, epoch_logps, steps })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn theta_logps(theta: &GenerativeModel, data: &DatasetHandle, given: Option<&[f64]>) -> Result<Vec<f64>> {
    match given {
        Some(v) if v.len() == data.len() => Ok(v.to_vec()),
        Some(v) => Err(Error::ShapeMismatch {
            expected: format!("{} log-densities", data.len()),
            actual: format!("{}", v.len()),
        }),
        None => theta.log_density_dataset(data),
    }
}

/// Shared body of the transductive modes: train gamma on `train_part`, score
/// every sample of `test_set`.
fn finetune_on(
    theta: &GenerativeModel,
    stats: &TrainStats,
    test_set: &DatasetHandle,
    train_part: &DatasetHandle,
    lp_theta: &[f64],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(Vec<SampleOutcome>, Vec<f64>, Vec<Vec<f64>>, usize)> {
    let t0 = Instant::now();
    let tr = train_gamma(theta, train_part, test_set, cfg, seed)?;
    let lp_gamma = tr.gamma.log_density_dataset(test_set)?;
    let per_sample = t0.elapsed().as_secs_f64() / test_set.len() as f64;
    let mut samples = Vec::with_capacity(test_set.len());
    for i in 0..test_set.len() {
        let score = penalized(lp_theta[i] - lp_gamma[i], lp_theta[i], stats, cfg)?;
        samples.push(SampleOutcome {
            id: test_set.id(i),
            score,
            logp_theta: lp_theta[i],
            logp_gamma: lp_gamma[i],
            seconds: per_sample,
            failed: false,
        });
    }
    let epoch_scores = tr
        .epoch_logps
        .iter()
        .map(|lg| (0..lg.len()).map(|i| penalized(lp_theta[i] - lg[i], lp_theta[i], stats, cfg)).collect())
        .collect::<Result<_>>()?;
    Ok((samples, tr.trajectory, epoch_scores, tr.steps))
}

/// Fine-tune gamma on the whole unlabeled test set and score every sample.
pub fn naive_finetune(
    theta: &GenerativeModel,
    stats: &TrainStats,
    test_set: &DatasetHandle,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    naive_finetune_with(theta, stats, test_set, cfg, None)
}

/// As [`naive_finetune`], reusing precomputed log p_theta of the test set.
pub fn naive_finetune_with(
    theta: &GenerativeModel,
    stats: &TrainStats,
    test_set: &DatasetHandle,
    cfg: &FinetuneConfig,
    lp_theta: Option<&[f64]>,
) -> Result<FinetuneOutcome> {
    require_mode(cfg, FinetuneMode::Full)?;
    let lp = theta_logps(theta, test_set, lp_theta)?;
    let (samples, gamma_trajectory, epoch_scores, steps) = finetune_on(theta, stats, test_set, test_set, &lp, cfg, cfg.seed)?;
    Ok(FinetuneOutcome { mode: FinetuneMode::Full, samples, gamma_trajectory, epoch_scores, steps, seen: None })
}

/// Independent gamma per consecutive block of `block_size` samples.
pub fn block_finetune(
    theta: &GenerativeModel,
    stats: &TrainStats,
    test_set: &DatasetHandle,
    cfg: &FinetuneConfig,
    lp_theta: Option<&[f64]>,
) -> Result<FinetuneOutcome> {
    require_mode(cfg, FinetuneMode::Block)?;
    let lp = theta_logps(theta, test_set, lp_theta)?;
    let idx: Vec<usize> = (0..test_set.len()).collect();
    let mut samples = Vec::with_capacity(test_set.len());
    let mut trajectory = Vec::new();
    let mut steps = 0;
    for (k, block) in idx.chunks(cfg.block_size).enumerate() {
        let part = test_set.subset(block);
        let lpb: Vec<f64> = block.iter().map(|&i| lp[i]).collect();
        let (s, traj, _, n) = finetune_on(theta, stats, &part, &part, &lpb, cfg, cfg.seed.wrapping_add(k as u64))?;
        samples.extend(s);
        if k == 0 {
            trajectory = traj;
        }
        steps += n;
    }
    Ok(FinetuneOutcome { mode: FinetuneMode::Block, samples, gamma_trajectory: trajectory, epoch_scores: vec![], steps, seen: None })
}

/// Train gamma on a random `subsample_fraction` of the test set and score
/// all samples with it.
pub fn subsample_finetune(
    theta: &GenerativeModel,
    stats: &TrainStats,
    test_set: &DatasetHandle,
    cfg: &FinetuneConfig,
    lp_theta: Option<&[f64]>,
) -> Result<FinetuneOutcome> {
    require_mode(cfg, FinetuneMode::Subsample20)?;
    let lp = theta_logps(theta, test_set, lp_theta)?;
    let n = test_set.len();
    let k = ((cfg.subsample_fraction * n as f64).round() as usize).clamp(1, n);
    let mut chosen = index::sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x20), n, k).into_vec();
    chosen.sort_unstable();
    let mut seen = vec![false; n];
    for &i in &chosen {
        seen[i] = true;
    }
    let part = test_set.subset(&chosen);
    let (samples, gamma_trajectory, epoch_scores, steps) = finetune_on(theta, stats, test_set, &part, &lp, cfg, cfg.seed)?;
    Ok(FinetuneOutcome { mode: FinetuneMode::Subsample20, samples, gamma_trajectory, epoch_scores, steps, seen: Some(seen) })
}

/// Stream the test set in order; after each arrival gamma takes
/// `online_steps` steps on batches from the prefix seen so far (always
/// including the newest sample), then scores the newest sample.
pub fn online_finetune(
    theta: &GenerativeModel,
    stats: &TrainStats,
    stream: &DatasetHandle,
    cfg: &FinetuneConfig,
    lp_theta: Option<&[f64]>,
) -> Result<FinetuneOutcome> {
    require_mode(cfg, FinetuneMode::Online)?;
    let lp = theta_logps(theta, stream, lp_theta)?;
    let mut gamma = init_gamma(theta, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(stream.len());
    let mut trajectory = Vec::with_capacity(stream.len());
    let mut steps = 0;
    for i in 0..stream.len() {
        let t0 = Instant::now();
        let mut sum = 0.0;
        for s in 0..cfg.online_steps {
            let extra = cfg.batch_size.min(i + 1) - 1;
            let mut idx = vec![i];
            if extra > 0 {
                idx.extend(index::sample(&mut rng, i, extra).into_iter());
            }
            let refs: Vec<&[u8]> = idx.iter().map(|&k| stream.pixels(k)).collect();
            sum += match gamma.step_pixels(&refs, cfg.learning_rate) {
                Ok(v) => v,
                Err(Error::NonFiniteGradient) => return Err(diverged(i, s, &trajectory)),
                Err(e) => return Err(e),
            };
            steps += 1;
        }
        trajectory.push(sum / cfg.online_steps.max(1) as f64);
        let lg = gamma.log_density_pixels(&[stream.pixels(i)])?[0];
        samples.push(SampleOutcome {
            id: stream.id(i),
            score: penalized(lp[i] - lg, lp[i], stats, cfg)?,
            logp_theta: lp[i],
            logp_gamma: lg,
            seconds: t0.elapsed().as_secs_f64(),
            failed: false,
        });
    }
    Ok(FinetuneOutcome { mode: FinetuneMode::Online, samples, gamma_trajectory: trajectory, epoch_scores: vec![], steps, seen: None })
}

/// Dispatch on `cfg.mode`.
pub fn run_mode(
    theta: &GenerativeModel,
    stats: &TrainStats,
    test_set: &DatasetHandle,
    cfg: &FinetuneConfig,
    lp_theta: Option<&[f64]>,
) -> Result<FinetuneOutcome> {
    match cfg.mode {
        FinetuneMode::Full => naive_finetune_with(theta, stats, test_set, cfg, lp_theta),
        FinetuneMode::Online => online_finetune(theta, stats, test_set, cfg, lp_theta),
        FinetuneMode::Subsample20 => subsample_finetune(theta, stats, test_set, cfg, lp_theta),
        FinetuneMode::Block => block_finetune(theta, stats, test_set, cfg, lp_theta),
    }
}

/// Seed of a sample's single-shot run, derived from the config seed and the
/// sample id so results do not depend on scheduling.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}/{id}"));
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

/// Fine-tune a clone of theta for `cfg.steps` steps on augmentations of `x`
/// and return the full per-sample outcome.
pub fn single_shot(
    theta: &GenerativeModel,
    stats: &TrainStats,
    x: &ImageSample,
    cfg: &FinetuneConfig,
    logp_theta: Option<f64>,
) -> Result<SampleOutcome> {
    cfg.validate()?;
    let t0 = Instant::now();
    let lp_theta = match logp_theta {
        Some(v) => v,
        None => theta.log_density(x)?.0,
    };
    let seed = sample_seed(cfg.seed, &x.id);
    let mut gamma = theta.clone_params()?;
    gamma.reseed(seed);
    let mut failed = false;
    for step in 0..cfg.steps {
        let batch = augment_batch_with(x, cfg.aug_batch, seed.wrapping_add(step as u64), &cfg.augment)?;
        match gamma.grad_step(&batch, cfg.learning_rate) {
            Ok(_) => {}
            Err(Error::NonFiniteGradient) => {
                failed = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let lp_gamma = if failed { f64::NAN } else { gamma.log_density(x)?.0 };
    let failed = failed || !lp_gamma.is_finite();
    let score = if failed { f64::MIN } else { penalized(lp_theta - lp_gamma, lp_theta, stats, cfg)? };
    if failed {
        log::warn!("single-shot fine-tuning diverged on {}", x.id);
    }
    Ok(SampleOutcome { id: x.id.clone(), score, logp_theta: lp_theta, logp_gamma: lp_gamma, seconds: t0.elapsed().as_secs_f64(), failed })
}

/// Single-shot indicator value for one sample.
pub fn single_shot_score(theta: &GenerativeModel, stats: &TrainStats, x: &ImageSample, cfg: &FinetuneConfig) -> Result<IndicatorScore> {
    let o = single_shot(theta, stats, x, cfg, None)?;
    IndicatorScore::new("single_shot", o.score)
}

/// Single-shot scores for a whole test set; samples run in parallel and each
/// owns its clone of theta.
pub fn single_shot_all(
    theta: &GenerativeModel,
    stats: &TrainStats,
    test_set: &DatasetHandle,
    cfg: &FinetuneConfig,
    lp_theta: Option<&[f64]>,
) -> Result<FinetuneOutcome> {
    let lp = theta_logps(theta, test_set, lp_theta)?;
    let samples = (0..test_set.len())
        .into_par_iter()
        .map(|i| single_shot(theta, stats, &test_set.get(i), cfg, Some(lp[i])))
        .collect::<Result<Vec<_>>>()?;
    Ok(FinetuneOutcome {
        mode: cfg.mode,
        samples,
        gamma_trajectory: vec![],
        epoch_scores: vec![],
        steps: cfg.steps,
        seen: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_synthetic, ImageShape, SyntheticKind};
    use crate::genmodels::{fit, Architecture, FlowArch, TrainConfig};
    use crate::nn::Precision;

    fn setup() -> (GenerativeModel, TrainStats, DatasetHandle) {
        let sh = ImageShape::new(6, 6, 1);
        let train = make_synthetic(SyntheticKind::Constant, sh, 64, 1).unwrap();
        let arch = Architecture::CouplingFlow(FlowArch { layers: 2, hidden: 8, alpha: 0.05 });
        let m = GenerativeModel::new(arch, sh, Precision::F32, 0).unwrap();
        let m = fit(m, &train, &TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() }).unwrap();
        let stats = TrainStats::from_model(&m, &train).unwrap();
        let a = make_synthetic(SyntheticKind::Constant, sh, 6, 7).unwrap();
        let b = make_synthetic(SyntheticKind::Noise, sh, 6, 8).unwrap();
        let mut s = a.samples();
        s.extend(b.samples().into_iter().map(|mut x| {
            x.id = format!("noise/{}", x.id);
            x
        }));
        let test = DatasetHandle::from_samples("mixed", crate::datasets::Split::Test, sh, &s).unwrap();
        (m, stats, test)
    }

    fn cfg(mode: FinetuneMode) -> FinetuneConfig {
        FinetuneConfig { mode, naive_epochs: 3, batch_size: 4, block_size: 4, steps: 4, aug_batch: 4, ..FinetuneConfig::default() }
    }

    #[test]
    fn theta_is_never_mutated() {
        let (m, stats, test) = setup();
        let h = m.param_hash().unwrap();
        for mode in [FinetuneMode::Full, FinetuneMode::Online, FinetuneMode::Subsample20, FinetuneMode::Block] {
            run_mode(&m, &stats, &test, &cfg(mode), None).unwrap();
        }
        single_shot_all(&m, &stats, &test, &cfg(FinetuneMode::Full), None).unwrap();
        assert_eq!(m.param_hash().unwrap(), h);
    }

    #[test]
    fn mode_degeneracies() {
        let (m, stats, test) = setup();
        let full = naive_finetune(&m, &stats, &test, &cfg(FinetuneMode::Full)).unwrap();
        let one_block = FinetuneConfig { block_size: test.len(), ..cfg(FinetuneMode::Block) };
        assert_eq!(block_finetune(&m, &stats, &test, &one_block, None).unwrap().score_vec(), full.score_vec());
        let all = FinetuneConfig { subsample_fraction: 1.0, ..cfg(FinetuneMode::Subsample20) };
        let sub = subsample_finetune(&m, &stats, &test, &all, None).unwrap();
        assert_eq!(sub.score_vec(), full.score_vec());
        assert!(sub.seen.unwrap().iter().all(|&s| s));
        let part = subsample_finetune(&m, &stats, &test, &cfg(FinetuneMode::Subsample20), None).unwrap();
        assert_eq!(part.seen.unwrap().iter().filter(|&&s| s).count(), 2);
        assert!(naive_finetune(&m, &stats, &test, &cfg(FinetuneMode::Block)).is_err());
    }

    #[test]
    fn zero_steps_leaves_only_the_penalty() {
        let (m, stats, test) = setup();
        let c = FinetuneConfig { steps: 0, ..cfg(FinetuneMode::Full) };
        for i in 0..test.len() {
            let o = single_shot(&m, &stats, &test.get(i), &c, None).unwrap();
            assert_eq!(o.raw(), 0.0);
            let want = -(c.beta / stats.sigma) * (o.logp_theta - stats.mu).abs();
            assert_eq!(o.score, want);
        }
    }

    #[test]
    fn single_shot_is_reproducible() {
        let (m, stats, test) = setup();
        let c = cfg(FinetuneMode::Full);
        let a = single_shot_all(&m, &stats, &test, &c, None).unwrap();
        let b = single_shot_all(&m, &stats, &test, &c, None).unwrap();
        let bits = |o: &FinetuneOutcome| o.samples.iter().map(|s| s.score.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(timing_report(&a).unwrap().steps, 4);
        assert_eq!(a.scores().len(), test.len());
    }

    #[test]
    fn online_covers_the_stream_in_order() {
        let (m, stats, test) = setup();
        let o = online_finetune(&m, &stats, &test, &cfg(FinetuneMode::Online), None).unwrap();
        let ids: Vec<_> = o.samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids, (0..test.len()).map(|i| test.id(i)).collect::<Vec<_>>());
        assert_eq!(o.steps, test.len() * 3);
        assert!(o.gamma_trajectory.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn learning_curve_starts_at_the_penalty_only_score() {
        let (m, stats, test) = setup();
        let c = FinetuneConfig { record_epoch_scores: true, ..cfg(FinetuneMode::Full) };
        let o = naive_finetune(&m, &stats, &test, &c).unwrap();
        assert_eq!(o.epoch_scores.len(), c.naive_epochs + 1);
        assert_eq!(o.gamma_trajectory.len(), c.naive_epochs + 1);
        for (i, s) in o.epoch_scores[0].iter().enumerate() {
            let lp = o.samples[i].logp_theta;
            assert_eq!(*s, -(c.beta / stats.sigma) * (lp - stats.mu).abs());
        }
    }
}
