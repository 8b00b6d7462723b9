use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{registry_entry, GateConfig};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode};
use crate::genmodels::{Architecture, Family, TrainConfig};
use crate::nn::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Loglik,
    Perm,
    Waic,
    EnsembleVar,
    Llr,
    ComplexityAdjusted,
    GradNorm,
    NaiveFinetune,
    OnlineFinetune,
    SubsampleFinetune,
    BlockFinetune,
    SingleShot,
    KlOracle,
}

impl Indicator {
    pub const ALL: [Indicator; 13] = [
        Indicator::Loglik,
        Indicator::Perm,
        Indicator::Waic,
        Indicator::EnsembleVar,
        Indicator::Llr,
        Indicator::ComplexityAdjusted,
        Indicator::GradNorm,
        Indicator::NaiveFinetune,
        Indicator::OnlineFinetune,
        Indicator::SubsampleFinetune,
        Indicator::BlockFinetune,
        Indicator::SingleShot,
        Indicator::KlOracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Indicator::Loglik => "loglik",
            Indicator::Perm => "perm",
            Indicator::Waic => "waic",
            Indicator::EnsembleVar => "ensemble_var",
            Indicator::Llr => "llr",
            Indicator::ComplexityAdjusted => "complexity_adjusted",
            Indicator::GradNorm => "grad_norm",
            Indicator::NaiveFinetune => "naive_finetune",
            Indicator::OnlineFinetune => "online_finetune",
            Indicator::SubsampleFinetune => "subsample_finetune",
            Indicator::BlockFinetune => "block_finetune",
            Indicator::SingleShot => "single_shot",
            Indicator::KlOracle => "kl_oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown indicator `{s}`")))
    }

    /// Needs a model trained on the out-distribution; never deployable.
    pub fn is_oracle(self) -> bool {
        self == Indicator::KlOracle
    }

    /// The transductive fine-tune mode behind this indicator, if any.
    pub fn finetune_mode(self) -> Option<FinetuneMode> {
        match self {
            Indicator::NaiveFinetune => Some(FinetuneMode::Full),
            Indicator::OnlineFinetune => Some(FinetuneMode::Online),
            Indicator::SubsampleFinetune => Some(FinetuneMode::Subsample20),
            Indicator::BlockFinetune => Some(FinetuneMode::Block),
            _ => None,
        }
    }

    pub fn uses_finetune_config(self) -> bool {
        self.finetune_mode().is_some() || self == Indicator::SingleShot
    }

    pub fn supports(self, family: Family) -> bool {
        !(self == Indicator::GradNorm && family == Family::PixelAr)
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An ordered (in, out) dataset pair as written in spec files.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairSpec {
    #[serde(rename = "in")]
    pub in_name: String,
    #[serde(rename = "out")]
    pub out_name: String,
}

impl PairSpec {
    pub fn new(in_name: &str, out_name: &str) -> Self {
        Self { in_name: in_name.to_string(), out_name: out_name.to_string() }
    }

    /// Parse `in:out`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok(Self::new(a, b)),
            _ => Err(Error::Config(format!("pair `{s}` is not of the form in:out"))),
        }
    }

    pub fn label(&self) -> String {
        format!("{}->{}", self.in_name, self.out_name)
    }
}

/// Everything a matrix run depends on. Unset fields take the defaults below,
/// so a spec file can be as short as a list of datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Pool for pair enumeration; every shape-compatible ordered pair that
    /// passes the gate is run.
    pub datasets: Vec<String>,
    /// Explicit pairs; when non-empty they replace enumeration over `datasets`.
    pub pairs: Vec<PairSpec>,
    /// Run the classifier gate on explicit pairs too and skip rejected ones.
    pub gate_explicit_pairs: bool,
    pub families: Vec<Family>,
    pub indicators: Vec<Indicator>,
    /// Per-family architecture overrides; others use the shape defaults.
    pub architectures: Vec<Architecture>,
    pub train: TrainConfig,
    /// Per-family epoch counts replacing `train.epochs`.
    pub family_epochs: BTreeMap<Family, usize>,
    pub finetune: FinetuneConfig,
    pub gate: GateConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Training images per dataset (after a seeded shuffle).
    pub n_train: usize,
    /// Test images per dataset side.
    pub n_test: usize,
    /// Training images used for the log-density statistics.
    pub n_stats: usize,
    pub ensemble_size: usize,
    /// Per-pixel replacement probability for the background model.
    pub llr_corruption: f64,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    /// Defaults to the environment's data root.
    pub data_root: Option<PathBuf>,
    /// Models, cells and runs are stored below this directory.
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "matrix".into(),
            datasets: ["mnist", "fashion-mnist", "noise28", "constant28"].map(String::from).to_vec(),
            pairs: vec![],
            gate_explicit_pairs: false,
            families: Family::ALL.to_vec(),
            indicators: vec![Indicator::Loglik, Indicator::SingleShot],
            architectures: vec![],
            train: TrainConfig { batch_size: 32, epochs: 5, ..TrainConfig::default() },
            family_epochs: BTreeMap::from([(Family::Vae, 40)]),
            finetune: FinetuneConfig::default(),
            gate: GateConfig::default(),
            seed: 0,
            precision: Precision::F32,
            n_train: 4000,
            n_test: 40,
            n_stats: 1000,
            ensemble_size: 5,
            llr_corruption: 0.15,
            synthetic_train: 4000,
            synthetic_test: 1000,
            data_root: None,
            output_dir: PathBuf::from("ftood-out"),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate_settings()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() && self.datasets.len() < 2 {
            return Err(Error::Config("a spec needs explicit pairs or at least two datasets".into()));
        }
        self.validate_settings()
    }

    /// Every check except the requirement of something to run.
    pub fn validate_settings(&self) -> Result<()> {
        if self.families.is_empty() || self.indicators.is_empty() {
            return Err(Error::Config("a spec needs at least one family and one indicator".into()));
        }
        for name in self.datasets.iter().chain(self.pairs.iter().flat_map(|p| [&p.in_name, &p.out_name])) {
            registry_entry(name).map_err(|e| Error::Config(e.to_string()))?;
        }
        for p in &self.pairs {
            if registry_entry(&p.in_name)?.shape != registry_entry(&p.out_name)?.shape {
                return Err(Error::Config(format!("pair {} mixes image shapes", p.label())));
            }
        }
        if self.n_test == 0 || self.n_stats == 0 || self.n_train < self.train.batch_size {
            return Err(Error::Config("n_test and n_stats must be positive and n_train at least one batch".into()));
        }
        if self.train.epochs == 0 || self.family_epochs.values().any(|&e| e == 0) {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        let ens = self.indicators.iter().any(|i| matches!(i, Indicator::Waic | Indicator::EnsembleVar));
        if ens && self.ensemble_size < 2 {
            return Err(Error::Config("ensemble indicators need ensemble_size >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.llr_corruption) {
            return Err(Error::Config("llr_corruption must lie in [0, 1]".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &self.architectures {
            if !seen.insert(a.family()) {
                return Err(Error::Config(format!("two architecture overrides for {}", a.family())));
            }
        }
        self.finetune.validate()
    }

    /// Training configuration of `family`, with its epoch override applied.
    pub fn train_config(&self, family: Family) -> TrainConfig {
        let epochs = self.family_epochs.get(&family).copied().unwrap_or(self.train.epochs);
        TrainConfig { epochs, ..self.train.clone() }
    }

    /// Content hash of everything except where results are stored.
    pub fn hash(&self) -> String {
        let mut s = self.clone();
        s.output_dir = PathBuf::new();
        s.data_root = None;
        short_hash(&serde_json::to_string(&s).expect("spec serializes"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(format!("{}-{}", self.name, self.hash()))
    }
}

pub(crate) fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Deterministic 64-bit seed from a master seed and a list of labels.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let h = Sha256::digest(format!("{master}/{}", parts.join("/")).as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indicator_names_roundtrip() {
        for i in Indicator::ALL {
            assert_eq!(Indicator::parse(i.as_str()).unwrap(), i);
            assert_eq!(serde_json::to_string(&i).unwrap(), format!("\"{}\"", i.as_str()));
        }
        assert!(Indicator::parse("odin").is_err());
        assert!(Indicator::KlOracle.is_oracle());
        assert!(!Indicator::GradNorm.supports(Family::PixelAr));
    }

    #[test]
    fn partial_spec_files_take_defaults() {
        let s: ExperimentSpec = serde_json::from_str(r#"{"datasets": ["mnist", "noise28"], "n_test": 8}"#).unwrap();
        s.validate().unwrap();
        assert_eq!(s.n_test, 8);
        assert_eq!(s.families, Family::ALL.to_vec());
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"datasetz": []}"#).is_err());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let base = ExperimentSpec { datasets: vec!["mnist".into(), "noise28".into()], ..Default::default() };
        assert!(ExperimentSpec { datasets: vec!["imagenet".into(), "mnist".into()], ..base.clone() }.validate().is_err());
        assert!(ExperimentSpec { pairs: vec![PairSpec::new("mnist", "noise32")], ..base.clone() }.validate().is_err());
        assert!(ExperimentSpec { n_test: 0, ..base.clone() }.validate().is_err());
        assert!(ExperimentSpec { indicators: vec![Indicator::Waic], ensemble_size: 1, ..base.clone() }.validate().is_err());
        assert!(ExperimentSpec { family_epochs: BTreeMap::from([(Family::Vae, 0)]), ..base.clone() }.validate().is_err());
        assert!(ExperimentSpec { families: vec![], ..base }.validate().is_err());
    }

    #[test]
    fn family_epochs_override_only_their_family() {
        let s: ExperimentSpec = serde_json::from_str(r#"{"train": {"epochs": 3}, "family_epochs": {"pixelar": 7}}"#).unwrap();
        assert_eq!(s.train_config(Family::PixelAr).epochs, 7);
        assert_eq!(s.train_config(Family::Vae).epochs, 3);
        assert_eq!(s.train_config(Family::PixelAr).learning_rate, s.train.learning_rate);
    }

    #[test]
    fn hash_ignores_storage_location() {
        let a = ExperimentSpec { datasets: vec!["mnist".into(), "noise28".into()], ..Default::default() };
        let b = ExperimentSpec { output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentSpec { seed: 1, ..a.clone() }.hash());
    }

    #[test]
    fn pairs_parse() {
        let p = PairSpec::parse("fashion-mnist:mnist").unwrap();
        assert_eq!(p.label(), "fashion-mnist->mnist");
        assert!(PairSpec::parse("mnist").is_err());
        assert_ne!(derive_seed(0, &["a", "b"]), derive_seed(0, &["ab"]));
    }
}
