//! Experiment orchestration over (pair × model family × indicator) cells.
//!
//! Trained models, expensive per-sample scores and finished cells are cached
//! below the spec's output directory, keyed by content hashes of the
//! configuration that produced them. Re-running a spec skips finished cells;
//! a different spec that shares a cell's configuration reuses it.

pub mod audit;
pub mod plots;
mod spec;
mod store;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use spec::{derive_seed, ExperimentSpec, Indicator, PairSpec};
pub use store::{
    per_pair_csv, read_details, read_records, read_scores, scored_samples, AggregateTable, CellStatus, DetailRow, RunRecord,
    ScoreRow, TableRow,
};

use crate::datasets::{default_data_root, registry_entry, simply_classified, DatasetHandle, DatasetResolver, Source, Split};
use crate::error::{Error, Result};
use crate::finetune::{run_mode, single_shot_all, FinetuneConfig, SampleOutcome};
use crate::genmodels::{fit, Architecture, Family, GenerativeModel, TrainConfig};
use crate::indicators::{
    complexity_adjusted_value, complexity_estimate, corrupt_pixels, ensemble_var_value, kl_oracle_value, llr_value,
    perm_value, waic_value, TrainStats,
};
use crate::metrics::{evaluate, labelled};
use spec::short_hash;
use store::{label_str, write_details, write_records, write_scores, write_text};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Per-key lazily computed values; different keys compute concurrently, the
/// same key computes once.
struct Memo<V> {
    slots: Mutex<HashMap<String, Arc<Mutex<Option<V>>>>>,
}

impl<V: Clone> Memo<V> {
    fn new() -> Self {
        Self { slots: Mutex::new(HashMap::new()) }
    }

    fn get_or_try(&self, key: &str, f: impl FnOnce() -> Result<V>) -> Result<V> {
        let slot = Arc::clone(self.slots.lock().unwrap().entry(key.to_string()).or_default());
        let mut guard = slot.lock().unwrap();
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = f()?;
        *guard = Some(v.clone());
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Theta,
    /// Extra ensemble member; member 0 is theta itself.
    Member(usize),
    Background,
}

impl Role {
    fn label(self) -> String {
        match self {
            Role::Theta => "theta".into(),
            Role::Member(k) => format!("member{k}"),
            Role::Background => "background".into(),
        }
    }
}

/// A resolved ordered pair with its gate outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInfo {
    pub in_name: String,
    pub out_name: String,
    pub admitted: bool,
    /// `None` for explicit pairs run without the gate.
    pub gate_auroc: Option<f64>,
}

impl PairInfo {
    pub fn label(&self) -> String {
        format!("{}->{}", self.in_name, self.out_name)
    }
}

#[derive(Clone, Debug)]
pub struct MatrixReport {
    pub run_dir: PathBuf,
    pub pairs: Vec<PairInfo>,
    pub records: Vec<RunRecord>,
    pub practical: AggregateTable,
    pub oracle: AggregateTable,
}

/// Scores of one cell in test-set order: the in-distribution side first.
struct CellScores {
    ids: Vec<String>,
    is_in: Vec<bool>,
    scores: Vec<f64>,
    details: Option<Vec<DetailRow>>,
}

/// AUROC of naive fine-tuning after each epoch, for pretrained and
/// from-scratch initializations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurves {
    pub pair: String,
    pub family: Family,
    pub pretrained: Vec<f64>,
    pub unpretrained: Vec<f64>,
}

/// One test sample placed by model log-density and compressed size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub dataset: String,
    pub sample_id: String,
    pub loglik_bits_per_dim: f64,
    pub complexity_bits_per_dim: f64,
}

pub struct Runner {
    spec: ExperimentSpec,
    resolver: DatasetResolver,
    root: PathBuf,
    models: Memo<Arc<GenerativeModel>>,
    stats: Memo<Arc<TrainStats>>,
    vectors: Memo<Arc<Vec<f64>>>,
    outcomes: Memo<Arc<Vec<SampleOutcome>>>,
    data: Memo<DatasetHandle>,
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Errors that fail a cell while the matrix continues.
fn is_cell_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. }
            | Error::NonFiniteGradient
            | Error::Precondition(_)
            | Error::InsufficientSamples(_)
            | Error::Tensor(_)
    )
}

impl Runner {
    /// A runner over `spec`'s settings; pairs and datasets are only required
    /// by [`Runner::run_matrix`].
    pub fn new(spec: ExperimentSpec) -> Result<Self> {
        spec.validate_settings()?;
        let resolver = DatasetResolver {
            root: spec.data_root.clone().unwrap_or_else(default_data_root),
            synthetic_train: spec.synthetic_train,
            synthetic_test: spec.synthetic_test,
            seed: spec.seed,
        };
        let root = spec.output_dir.clone();
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            spec,
            resolver,
            root,
            models: Memo::new(),
            stats: Memo::new(),
            vectors: Memo::new(),
            outcomes: Memo::new(),
            data: Memo::new(),
        })
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    pub fn output_dir(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self) -> PathBuf {
        self.spec.run_dir()
    }

    fn is_synthetic(name: &str) -> bool {
        registry_entry(name).map(|e| matches!(e.source, Source::Synthetic(_))).unwrap_or(false)
    }

    /// Seeded, size-capped training split.
    pub fn train_set(&self, name: &str) -> Result<DatasetHandle> {
        self.data.get_or_try(&format!("train/{name}"), || {
            let d = self.resolver.resolve(name, Split::Train)?;
            Ok(d.shuffled(derive_seed(self.spec.seed, &["train", name])).take(self.spec.n_train))
        })
    }

    /// Seeded, size-capped test split; identical for every pair using `name`.
    pub fn test_set(&self, name: &str) -> Result<DatasetHandle> {
        self.data.get_or_try(&format!("test/{name}"), || {
            let d = self.resolver.resolve(name, Split::Test)?;
            Ok(d.shuffled(derive_seed(self.spec.seed, &["test", name])).take(self.spec.n_test))
        })
    }

    pub fn architecture(&self, family: Family, name: &str) -> Result<Architecture> {
        if let Some(a) = self.spec.architectures.iter().find(|a| a.family() == family) {
            return Ok(a.clone());
        }
        Ok(Architecture::default_for(family, registry_entry(name)?.shape))
    }

    fn model_descriptor(&self, name: &str, family: Family, role: Role) -> Result<(String, u64, serde_json::Value)> {
        let seed = derive_seed(self.spec.seed, &["model", &role.label(), name, family.as_str()]);
        let mut d = json!({
            "role": role.label(),
            "dataset": name,
            "arch": self.architecture(family, name)?,
            "train": self.spec.train_config(family),
            "n_train": self.spec.n_train,
            "precision": self.spec.precision,
            "seed": seed,
        });
        if Self::is_synthetic(name) {
            d["synthetic"] = json!([self.spec.synthetic_train, self.spec.synthetic_test, self.spec.seed]);
        }
        if role == Role::Background {
            d["corruption"] = json!(self.spec.llr_corruption);
        }
        Ok((short_hash(&d.to_string()), seed, d))
    }

    fn model_key(&self, name: &str, family: Family, role: Role) -> Result<String> {
        Ok(self.model_descriptor(name, family, role)?.0)
    }

    fn model(&self, name: &str, family: Family, role: Role) -> Result<Arc<GenerativeModel>> {
        let role = if role == Role::Member(0) { Role::Theta } else { role };
        let (key, seed, _) = self.model_descriptor(name, family, role)?;
        self.models.get_or_try(&key, || {
            let path = self.model_path(name, family, role)?;
            if path.exists() {
                return Ok(Arc::new(GenerativeModel::load(&path)?));
            }
            let mut data = self.train_set(name)?;
            if role == Role::Background {
                data = corrupt_pixels(&data, self.spec.llr_corruption, seed)?;
            }
            log::info!("training {family} {} on {name} ({} images)", role.label(), data.len());
            let model = GenerativeModel::new(self.architecture(family, name)?, data.shape(), self.spec.precision, seed)?;
            let cfg = TrainConfig { seed, ..self.spec.train_config(family) };
            let model = fit(model, &data, &cfg)?;
            std::fs::create_dir_all(path.parent().unwrap())?;
            model.save(&path)?;
            Ok(Arc::new(model))
        })
    }

    fn model_path(&self, name: &str, family: Family, role: Role) -> Result<PathBuf> {
        let key = self.model_key(name, family, role)?;
        Ok(self.root.join("models").join(format!("{name}-{family}-{}-{key}.ftood", role.label())))
    }

    /// Checkpoint location of the in-distribution model for `name`.
    pub fn theta_path(&self, name: &str, family: Family) -> Result<PathBuf> {
        self.model_path(name, family, Role::Theta)
    }

    /// The cached in-distribution model for `name`, trained on first use.
    pub fn theta(&self, name: &str, family: Family) -> Result<Arc<GenerativeModel>> {
        self.model(name, family, Role::Theta)
    }

    pub fn train_stats(&self, name: &str, family: Family) -> Result<Arc<TrainStats>> {
        let key = format!("{}/{}", self.model_key(name, family, Role::Theta)?, self.spec.n_stats);
        self.stats.get_or_try(&key, || {
            let theta = self.theta(name, family)?;
            Ok(Arc::new(TrainStats::from_model(&theta, &self.train_set(name)?.take(self.spec.n_stats))?))
        })
    }

    /// log p of every test image of `data_name` under a model of `model_name`.
    fn logps(&self, model_name: &str, family: Family, role: Role, data_name: &str) -> Result<Arc<Vec<f64>>> {
        let role = if role == Role::Member(0) { Role::Theta } else { role };
        let key = format!("lp/{}/{data_name}", self.model_key(model_name, family, role)?);
        self.vectors.get_or_try(&key, || {
            let model = self.model(model_name, family, role)?;
            Ok(Arc::new(model.log_density_dataset(&self.test_set(data_name)?)?))
        })
    }

    fn grad_norms(&self, model_name: &str, family: Family, data_name: &str) -> Result<Arc<Vec<f64>>> {
        let key = format!("grad/{}/{data_name}", self.model_key(model_name, family, Role::Theta)?);
        self.vectors.get_or_try(&key, || {
            let model = self.theta(model_name, family)?;
            let test = self.test_set(data_name)?;
            Ok(Arc::new(test.iter().map(|x| model.input_grad_norm(&x)).collect::<Result<Vec<_>>>()?))
        })
    }

    /// Single-shot outcomes of every test image of `data_name` against theta
    /// of `model_name`, persisted because they dominate the compute budget.
    fn single_shot_outcomes(&self, model_name: &str, family: Family, data_name: &str) -> Result<Arc<Vec<SampleOutcome>>> {
        let test = self.test_set(data_name)?;
        let desc = json!({
            "model": self.model_key(model_name, family, Role::Theta)?,
            "finetune": self.spec.finetune,
            "n_stats": self.spec.n_stats,
            "test": test.checksum(),
        });
        let key = short_hash(&desc.to_string());
        self.outcomes.get_or_try(&key, || {
            let path = self.root.join("cache").join("single_shot").join(format!("{model_name}-{family}-{data_name}-{key}.json"));
            if path.exists() {
                let v: Vec<SampleOutcome> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                return Ok(Arc::new(v));
            }
            let theta = self.theta(model_name, family)?;
            let stats = self.train_stats(model_name, family)?;
            let lp = self.logps(model_name, family, Role::Theta, data_name)?;
            log::info!("single-shot {family} {model_name} on {} {data_name} images", test.len());
            let out = single_shot_all(&theta, &stats, &test, &self.spec.finetune, Some(&lp))?;
            std::fs::create_dir_all(path.parent().unwrap())?;
            std::fs::write(&path, serde_json::to_string(&out.samples)?)?;
            Ok(Arc::new(out.samples))
        })
    }

    /// Ordered pairs to run: explicit pairs, or every gated ordered pair
    /// among the spec's datasets.
    pub fn pairs(&self) -> Result<Vec<PairInfo>> {
        let mut out = Vec::new();
        if !self.spec.pairs.is_empty() {
            for p in &self.spec.pairs {
                let (admitted, gate_auroc) = if self.spec.gate_explicit_pairs {
                    let (a, g) = self.gate(&p.in_name, &p.out_name)?;
                    (a, Some(g))
                } else {
                    (true, None)
                };
                out.push(PairInfo { in_name: p.in_name.clone(), out_name: p.out_name.clone(), admitted, gate_auroc });
            }
            return Ok(out);
        }
        let names = &self.spec.datasets;
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                if registry_entry(a)?.shape != registry_entry(b)?.shape {
                    continue;
                }
                let (admitted, g) = self.gate(a, b)?;
                out.push(PairInfo { in_name: a.clone(), out_name: b.clone(), admitted, gate_auroc: Some(g) });
                out.push(PairInfo { in_name: b.clone(), out_name: a.clone(), admitted, gate_auroc: Some(g) });
            }
        }
        out.sort_by(|x, y| (&x.in_name, &x.out_name).cmp(&(&y.in_name, &y.out_name)));
        Ok(out)
    }

    /// Gate result for an unordered pair, cached on disk.
    pub fn gate(&self, a: &str, b: &str) -> Result<(bool, f64)> {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let mut desc = json!({ "a": a, "b": b, "gate": self.spec.gate });
        for n in [a, b] {
            if Self::is_synthetic(n) {
                desc[n] = json!([self.spec.synthetic_train, self.spec.synthetic_test, self.spec.seed]);
            }
        }
        let path = self.root.join("gate").join(format!("{a}--{b}-{}.json", short_hash(&desc.to_string())));
        if path.exists() {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if let (Some(adm), Some(g)) = (v["admitted"].as_bool(), v["gate_auroc"].as_f64()) {
                return Ok((adm, g));
            }
        }
        let (tra, trb) = (self.resolver.resolve(a, Split::Train)?, self.resolver.resolve(b, Split::Train)?);
        let (tea, teb) = (self.resolver.resolve(a, Split::Test)?, self.resolver.resolve(b, Split::Test)?);
        let (admitted, g) = simply_classified((&tra, &trb), (&tea, &teb), &self.spec.gate)?;
        log::info!("gate {a} vs {b}: auroc {g:.5}, admitted {admitted}");
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(&path, json!({ "a": a, "b": b, "admitted": admitted, "gate_auroc": g }).to_string())?;
        Ok((admitted, g))
    }

    fn cell_config(&self, pair: &PairInfo, family: Family, indicator: Indicator) -> Result<serde_json::Value> {
        let mut c = json!({
            "pair": pair.label(),
            "family": family,
            "indicator": indicator,
            "theta": self.model_key(&pair.in_name, family, Role::Theta)?,
            "n_test": self.spec.n_test,
            "n_stats": self.spec.n_stats,
            "seed": self.spec.seed,
        });
        for name in [&pair.in_name, &pair.out_name] {
            if Self::is_synthetic(name) {
                c[format!("synthetic/{name}")] = json!([self.spec.synthetic_train, self.spec.synthetic_test]);
            }
        }
        if indicator.uses_finetune_config() {
            c["finetune"] = serde_json::to_value(&self.spec.finetune)?;
        }
        match indicator {
            Indicator::Waic | Indicator::EnsembleVar => c["ensemble_size"] = json!(self.spec.ensemble_size),
            Indicator::Llr => c["background"] = json!(self.model_key(&pair.in_name, family, Role::Background)?),
            Indicator::KlOracle => c["omega"] = json!(self.model_key(&pair.out_name, family, Role::Theta)?),
            _ => {}
        }
        Ok(c)
    }

    fn cell_seed(&self, pair: &PairInfo, family: Family) -> u64 {
        derive_seed(self.spec.seed, &["cell", &pair.label(), family.as_str()])
    }

    fn compute_cell(&self, pair: &PairInfo, family: Family, indicator: Indicator) -> Result<CellScores> {
        let (a, b) = (pair.in_name.as_str(), pair.out_name.as_str());
        let (ta, tb) = (self.test_set(a)?, self.test_set(b)?);
        let mut ids: Vec<String> = (0..ta.len()).map(|i| ta.id(i)).collect();
        ids.extend((0..tb.len()).map(|i| tb.id(i)));
        let is_in: Vec<bool> = (0..ta.len() + tb.len()).map(|i| i < ta.len()).collect();
        let join = |x: &[f64], y: &[f64]| x.iter().chain(y).copied().collect::<Vec<f64>>();
        let lp = || -> Result<Vec<f64>> { Ok(join(&self.logps(a, family, Role::Theta, a)?, &self.logps(a, family, Role::Theta, b)?)) };
        let mut details = None;
        let scores = match indicator {
            Indicator::Loglik => lp()?,
            Indicator::Perm => {
                let stats = self.train_stats(a, family)?;
                lp()?.iter().map(|&v| perm_value(&stats, v)).collect()
            }
            Indicator::Waic | Indicator::EnsembleVar => {
                let members = (0..self.spec.ensemble_size)
                    .map(|k| Ok(join(&self.logps(a, family, Role::Member(k), a)?, &self.logps(a, family, Role::Member(k), b)?)))
                    .collect::<Result<Vec<_>>>()?;
                (0..ids.len())
                    .map(|i| {
                        let v: Vec<f64> = members.iter().map(|m| m[i]).collect();
                        if indicator == Indicator::Waic {
                            waic_value(&v)
                        } else {
                            ensemble_var_value(&v)
                        }
                    })
                    .collect::<Result<_>>()?
            }
            Indicator::Llr => {
                let bg = join(&self.logps(a, family, Role::Background, a)?, &self.logps(a, family, Role::Background, b)?);
                lp()?.iter().zip(&bg).map(|(&f, &g)| llr_value(f, g)).collect()
            }
            Indicator::ComplexityAdjusted => {
                let l: Vec<f64> = ta.iter().chain(tb.iter()).map(|x| complexity_estimate(&x)).collect();
                lp()?.iter().zip(&l).map(|(&p, &c)| complexity_adjusted_value(p, c)).collect()
            }
            Indicator::GradNorm => join(&self.grad_norms(a, family, a)?, &self.grad_norms(a, family, b)?).iter().map(|g| -g).collect(),
            Indicator::KlOracle => {
                let omega = join(&self.logps(b, family, Role::Theta, a)?, &self.logps(b, family, Role::Theta, b)?);
                lp()?.iter().zip(&omega).map(|(&p, &q)| kl_oracle_value(p, q)).collect()
            }
            Indicator::SingleShot => {
                let mut o = self.single_shot_outcomes(a, family, a)?.as_ref().clone();
                o.extend(self.single_shot_outcomes(a, family, b)?.iter().cloned());
                details = Some(self.detail_rows(&ids, &is_in, &o));
                o.iter().map(|s| s.score).collect()
            }
            Indicator::NaiveFinetune | Indicator::OnlineFinetune | Indicator::SubsampleFinetune | Indicator::BlockFinetune => {
                let seed = self.cell_seed(pair, family);
                let mut perm: Vec<usize> = (0..ids.len()).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let samples: Vec<_> = perm.iter().map(|&i| if i < ta.len() { ta.get(i) } else { tb.get(i - ta.len()) }).collect();
                let merged = DatasetHandle::from_samples(&pair.label(), Split::Test, ta.shape(), &samples)?;
                let lp_all = lp()?;
                let lp_perm: Vec<f64> = perm.iter().map(|&i| lp_all[i]).collect();
                let cfg = FinetuneConfig { mode: indicator.finetune_mode().unwrap(), seed, ..self.spec.finetune.clone() };
                let theta = self.theta(a, family)?;
                let stats = self.train_stats(a, family)?;
                let out = run_mode(&theta, &stats, &merged, &cfg, Some(&lp_perm))?;
                let mut ordered = vec![None; ids.len()];
                for (k, s) in out.samples.into_iter().enumerate() {
                    ordered[perm[k]] = Some(s);
                }
                let ordered: Vec<SampleOutcome> = ordered.into_iter().map(|s| s.expect("every sample scored")).collect();
                details = Some(self.detail_rows(&ids, &is_in, &ordered));
                ordered.iter().map(|s| s.score).collect()
            }
        };
        Ok(CellScores { ids, is_in, scores, details })
    }

    fn detail_rows(&self, ids: &[String], is_in: &[bool], o: &[SampleOutcome]) -> Vec<DetailRow> {
        o.iter()
            .zip(ids.iter().zip(is_in))
            .map(|(s, (id, &inn))| DetailRow {
                sample_id: id.clone(),
                label: label_str(inn).into(),
                logp_theta: s.logp_theta,
                logp_gamma: s.logp_gamma,
                seconds: s.seconds,
                failed: s.failed,
            })
            .collect()
    }

    /// Run (or load) one cell.
    pub fn run_cell(&self, pair: &PairInfo, family: Family, indicator: Indicator) -> Result<RunRecord> {
        let (sa, sb) = (registry_entry(&pair.in_name)?.shape, registry_entry(&pair.out_name)?.shape);
        if sa != sb {
            return Err(Error::Config(format!("pair {} mixes image shapes {sa} and {sb}", pair.label())));
        }
        let config = self.cell_config(pair, family, indicator)?;
        let cell_id = short_hash(&config.to_string());
        let cell_dir = self.root.join("cells").join(&cell_id);
        let record_path = cell_dir.join("record.json");
        if record_path.exists() {
            if let Ok(r) = serde_json::from_str::<RunRecord>(&std::fs::read_to_string(&record_path)?) {
                return Ok(r);
            }
        }
        let seed = self.cell_seed(pair, family);
        let mut record = RunRecord {
            cell_id: cell_id.clone(),
            pair: pair.label(),
            in_dataset: pair.in_name.clone(),
            out_dataset: pair.out_name.clone(),
            model_family: family,
            indicator,
            oracle: indicator.is_oracle(),
            status: CellStatus::Ok,
            error: None,
            metrics: None,
            score_file: None,
            details_file: None,
            config,
            code_version: CODE_VERSION.into(),
            seed,
            started_unix: now_unix(),
            finished_unix: 0.0,
        };
        if !indicator.supports(family) {
            record.status = CellStatus::Unsupported;
            record.finished_unix = now_unix();
            return Ok(record);
        }
        log::info!("cell {} {family} {indicator}", pair.label());
        let cell = match self.compute_cell(pair, family, indicator) {
            Ok(c) => c,
            Err(e) if is_cell_failure(&e) => {
                log::warn!("cell {} {family} {indicator} failed: {e}", pair.label());
                record.status = CellStatus::Failed;
                record.error = Some(e.to_string());
                record.finished_unix = now_unix();
                return Ok(record);
            }
            Err(e) => return Err(e),
        };
        let rows: Vec<ScoreRow> = cell
            .ids
            .iter()
            .zip(&cell.is_in)
            .zip(&cell.scores)
            .map(|((id, &inn), &score)| ScoreRow {
                pair: pair.label(),
                indicator: indicator.as_str().into(),
                model_family: family.as_str().into(),
                sample_id: id.clone(),
                label: label_str(inn).into(),
                score,
                seed,
            })
            .collect();
        record.metrics = Some(evaluate(&scored_samples(&rows)?)?);
        let rel = format!("cells/{cell_id}/scores.csv");
        write_scores(&self.root.join(&rel), &rows)?;
        record.score_file = Some(rel);
        if let Some(d) = &cell.details {
            let rel = format!("cells/{cell_id}/details.csv");
            write_details(&self.root.join(&rel), d)?;
            record.details_file = Some(rel);
        }
        record.finished_unix = now_unix();
        std::fs::write(&record_path, serde_json::to_string_pretty(&record)?)?;
        Ok(record)
    }

    /// Every requested indicator on one pair and family.
    pub fn run_pair(&self, pair: &PairInfo, family: Family, indicators: &[Indicator]) -> Result<Vec<RunRecord>> {
        indicators.iter().map(|&i| self.run_cell(pair, family, i)).collect()
    }

    /// Run every admitted pair × family × indicator cell and write records,
    /// per-pair metrics and aggregate tables into the run directory.
    pub fn run_matrix(&self) -> Result<MatrixReport> {
        self.spec.validate()?;
        let pairs = self.pairs()?;
        let admitted: Vec<&PairInfo> = pairs.iter().filter(|p| p.admitted).collect();
        if admitted.is_empty() {
            return Err(Error::Config("no admitted pairs to run".into()));
        }
        let groups: Vec<(&PairInfo, Family)> =
            admitted.iter().flat_map(|&p| self.spec.families.iter().map(move |&f| (p, f))).collect();
        let results: Vec<Vec<RunRecord>> =
            groups.par_iter().map(|&(p, f)| self.run_pair(p, f, &self.spec.indicators)).collect::<Result<_>>()?;
        let records: Vec<RunRecord> = results.into_iter().flatten().collect();
        self.write_run(pairs, records)
    }

    fn write_run(&self, pairs: Vec<PairInfo>, records: Vec<RunRecord>) -> Result<MatrixReport> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir)?;
        let (practical, oracle) = tables(&records, &self.spec.indicators, &self.spec.families);
        std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        std::fs::write(dir.join("pairs.json"), serde_json::to_string_pretty(&pairs)?)?;
        write_records(&dir.join("records.jsonl"), &records)?;
        write_text(&dir.join("per_pair.csv"), &per_pair_csv(&records))?;
        write_text(&dir.join("table_practical.csv"), &practical.to_csv())?;
        write_text(&dir.join("table_oracle.csv"), &oracle.to_csv())?;
        let text = format!(
            "{}\n{}",
            practical.to_text("Practical indicators: mean AUROC (%) over pairs (pairs counted)"),
            oracle.to_text("Oracle indicators (not practical): mean AUROC (%) over pairs (pairs counted)")
        );
        write_text(&dir.join("tables.txt"), &text)?;
        Ok(MatrixReport { run_dir: dir, pairs, records, practical, oracle })
    }

    /// Naive fine-tuning AUROC after every epoch, pretrained and from scratch.
    pub fn learning_curves(&self, pair: &PairInfo, family: Family, epochs: usize) -> Result<LearningCurves> {
        let (ta, tb) = (self.test_set(&pair.in_name)?, self.test_set(&pair.out_name)?);
        let mut samples = ta.samples();
        samples.extend(tb.samples());
        let merged = DatasetHandle::from_samples(&pair.label(), Split::Test, ta.shape(), &samples)?;
        let theta = self.theta(&pair.in_name, family)?;
        let stats = self.train_stats(&pair.in_name, family)?;
        let n_in = ta.len();
        let mut curves = Vec::new();
        for pretrained in [true, false] {
            let cfg = FinetuneConfig {
                pretrained,
                naive_epochs: epochs,
                record_epoch_scores: true,
                seed: self.cell_seed(pair, family),
                ..self.spec.finetune.clone()
            };
            let out = crate::finetune::naive_finetune(&theta, &stats, &merged, &cfg)?;
            curves.push(
                out.epoch_scores
                    .iter()
                    .map(|s| crate::metrics::auroc(&labelled(&s[..n_in], &s[n_in..])))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let unpretrained = curves.pop().unwrap();
        Ok(LearningCurves { pair: pair.label(), family, pretrained: curves.pop().unwrap(), unpretrained })
    }

    /// Log-density (bits/dim) of theta trained on `model_name` against the
    /// compressed size of every test image of `datasets`.
    pub fn correlation(&self, model_name: &str, family: Family, datasets: &[String]) -> Result<Vec<CorrelationPoint>> {
        let theta = self.theta(model_name, family)?;
        let mut out = Vec::new();
        for d in datasets {
            let test = self.test_set(d)?;
            let lp = theta.log_density_dataset(&test)?;
            let dims = test.shape().dims() as f64;
            for (i, x) in test.iter().enumerate() {
                out.push(CorrelationPoint {
                    dataset: d.clone(),
                    sample_id: x.id.clone(),
                    loglik_bits_per_dim: lp[i] / (dims * std::f64::consts::LN_2),
                    complexity_bits_per_dim: complexity_estimate(&x) / dims,
                });
            }
        }
        Ok(out)
    }
}

/// Practical and oracle tables from a set of records.
pub fn tables(records: &[RunRecord], indicators: &[Indicator], families: &[Family]) -> (AggregateTable, AggregateTable) {
    let practical: Vec<Indicator> = indicators.iter().copied().filter(|i| !i.is_oracle()).collect();
    let oracle: Vec<Indicator> = indicators.iter().copied().filter(|i| i.is_oracle()).collect();
    (
        AggregateTable::from_records(records.iter().filter(|r| !r.oracle), &practical, families),
        AggregateTable::from_records(records.iter().filter(|r| r.oracle), &oracle, families),
    )
}

/// Run one pair under `spec`.
pub fn run_pair(pair: &PairSpec, family: Family, indicators: &[Indicator], spec: &ExperimentSpec) -> Result<Vec<RunRecord>> {
    let runner = Runner::new(spec.clone())?;
    let info = if spec.gate_explicit_pairs {
        let (admitted, g) = runner.gate(&pair.in_name, &pair.out_name)?;
        if !admitted {
            return Err(Error::Config(format!("pair {} is not admitted by the gate (auroc {g:.5})", pair.label())));
        }
        PairInfo { in_name: pair.in_name.clone(), out_name: pair.out_name.clone(), admitted, gate_auroc: Some(g) }
    } else {
        PairInfo { in_name: pair.in_name.clone(), out_name: pair.out_name.clone(), admitted: true, gate_auroc: None }
    };
    runner.run_pair(&info, family, indicators)
}

/// Run every cell of `spec`.
pub fn run_matrix(spec: &ExperimentSpec) -> Result<MatrixReport> {
    Runner::new(spec.clone())?.run_matrix()
}
