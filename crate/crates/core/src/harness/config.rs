use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::network::{Backbone, Network, NetworkSpec};

pub const ENV_DATA_ROOT: &str = "MAML_DATA_ROOT";
pub const ENV_OUT_DIR: &str = "MAML_OUT_DIR";

/// Named configurations shipped with the crate.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "paper-omniglot",
        include_str!("../../presets/paper-omniglot.toml"),
    ),
    (
        "omniglot-desk",
        include_str!("../../presets/omniglot-desk.toml"),
    ),
    (
        "synthetic-ci",
        include_str!("../../presets/synthetic-ci.toml"),
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Omniglot,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub n_classes: usize,
    pub instances: usize,
    pub noise: f64,
    pub jitter: f64,
    pub strokes: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_classes: 100,
            instances: 20,
            noise: 0.1,
            jitter: 1.0,
            strokes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    /// Omniglot root; `MAML_DATA_ROOT` overrides.
    pub root: Option<PathBuf>,
    pub image_size: usize,
    /// Instances kept per Omniglot class.
    pub instances: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Target examples per class in training episodes.
    pub q_targets: usize,
    /// Target examples per class in validation/test episodes; defaults to
    /// `q_targets`.
    pub eval_q_targets: Option<usize>,
    /// Size of the fixed validation and test task sets.
    pub eval_tasks: usize,
    /// Seed of the fixed validation set; the test set uses `eval_seed + 1`.
    pub eval_seed: u64,
    /// Class split seed, shared by every run seed.
    pub split_seed: u64,
    /// Train/val/test class counts; required for synthetic pools.
    pub split: Option<[usize; 3]>,
    /// Add 90/180/270 degree rotated classes after splitting.
    pub rotations: bool,
    pub synth: SynthOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: Source::Omniglot,
            root: None,
            image_size: 28,
            instances: 20,
            n_way: 5,
            k_shot: 1,
            q_targets: 15,
            eval_q_targets: None,
            eval_tasks: 600,
            eval_seed: 1_000_003,
            split_seed: 0,
            split: None,
            rotations: true,
            synth: SynthOptions::default(),
        }
    }
}

impl DatasetConfig {
    pub fn eval_q_targets(&self) -> usize {
        self.eval_q_targets.unwrap_or(self.q_targets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Conv {
                layers: 4,
                filters: 64,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Which epoch checkpoints survive a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeepCheckpoints {
    All,
    /// The latest epoch plus the current top three by validation accuracy.
    Top3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    /// `MAML_OUT_DIR` overrides.
    pub out_dir: PathBuf,
    pub keep_checkpoints: KeepCheckpoints,
    /// Record the first non-finite node of every tape (slow).
    pub check_finite: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            iterations_per_epoch: 500,
            seeds: vec![0, 1, 2],
            precision: Precision::F32,
            out_dir: PathBuf::from("runs"),
            keep_checkpoints: KeepCheckpoints::Top3,
            check_finite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub meta: MetaConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            meta: MetaConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
        Self::from_toml(text)
    }

    /// A preset name or a path to a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == name_or_path) && !Path::new(name_or_path).exists() {
            return Self::preset(name_or_path);
        }
        let text = std::fs::read_to_string(name_or_path)
            .map_err(|e| Error::Config(format!("cannot read {name_or_path}: {e}")))?;
        Self::from_toml(&text)
    }

    /// Applies `MAML_DATA_ROOT` and `MAML_OUT_DIR`.
    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(ENV_DATA_ROOT).filter(|v| !v.is_empty()) {
            self.dataset.root = Some(PathBuf::from(root));
        }
        if let Some(out) = std::env::var_os(ENV_OUT_DIR).filter(|v| !v.is_empty()) {
            self.run.out_dir = PathBuf::from(out);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let d = &self.dataset;
        if d.n_way < 2 {
            return bad("dataset.n_way must be at least 2");
        }
        if d.k_shot == 0 || d.q_targets == 0 || d.eval_q_targets == Some(0) {
            return bad("dataset.k_shot and target counts must be at least 1");
        }
        if d.eval_tasks == 0 {
            return bad("dataset.eval_tasks must be at least 1");
        }
        if d.source == Source::Synthetic && d.split.is_none() {
            return bad("synthetic datasets need dataset.split = [train, val, test]");
        }
        let r = &self.run;
        if r.epochs == 0 || r.iterations_per_epoch == 0 {
            return bad("run.epochs and run.iterations_per_epoch must be at least 1");
        }
        if r.seeds.is_empty() {
            return bad("run.seeds is empty");
        }
        self.meta.validate()?;
        Network::new(self.network_spec()).map_err(|e| Error::Config(format!("network: {e}")))?;
        Ok(())
    }

    /// The base network this experiment trains, with batch-norm modes
    /// taken from the meta toggles.
    pub fn network_spec(&self) -> NetworkSpec {
        let input_shape = match self.network.backbone {
            Backbone::Conv { .. } => vec![1, self.dataset.image_size, self.dataset.image_size],
            Backbone::Mlp { .. } => vec![self.dataset.image_size * self.dataset.image_size],
        };
        let mut spec = NetworkSpec {
            input_shape,
            backbone: self.network.backbone.clone(),
            n_way: self.dataset.n_way,
            bn_stats: crate::network::BnStatsMode::BatchStats,
            bn_params: crate::network::BnParamsMode::Shared,
            max_steps: 0,
            bn_eps: self.network.bn_eps,
            bn_momentum: self.network.bn_momentum,
        };
        self.meta.configure_network(&mut spec);
        spec
    }

    /// SHA-256 over the canonical TOML form, ignoring machine-specific
    /// paths (dataset root, output directory).
    pub fn digest(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.dataset.root = None;
        c.run.out_dir = PathBuf::new();
        Sha256::digest(c.to_toml().as_bytes()).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
