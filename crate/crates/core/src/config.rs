//! Experiment configuration, read from TOML.
//!
//! Every section is optional and falls back to the desk-scale defaults.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::Strategy;
use crate::datagen::BlobSpec;
use crate::error::{Error, Result};
use crate::lora::{BlockSelect, MatrixKind, PlacementSpec};
use crate::model::{Architecture, LossKind, ModelConfig};
use crate::partition::Scheme;

/// Seeds used when a config does not list its own.
pub const DEFAULT_SEEDS: [u64; 3] = [1993, 1996, 1997];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    pub has_header: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let b = BlobSpec::default();
        DatasetConfig {
            source: DataSource::Blobs,
            num_classes: b.num_classes,
            input_dim: b.input_dim,
            train_per_class: b.train_per_class,
            test_per_class: b.test_per_class,
            separation: b.separation,
            noise: b.noise,
            train_csv: None,
            test_csv: None,
            has_header: false,
        }
    }
}

impl DatasetConfig {
    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            separation: self.separation,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksConfig {
    pub count: usize,
}

impl Default for TasksConfig {
    fn default() -> Self {
        TasksConfig { count: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Quantity,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsConfig {
    pub count: usize,
    pub partition: PartitionKind,
    /// Labels per client per task for the quantity scheme.
    pub alpha: usize,
    /// Concentration for the Dirichlet scheme.
    pub beta: f64,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        ClientsConfig {
            count: 4,
            partition: PartitionKind::Dirichlet,
            alpha: 1,
            beta: 0.5,
        }
    }
}

impl ClientsConfig {
    pub fn scheme(&self) -> Scheme {
        match self.partition {
            PartitionKind::Quantity => Scheme::Quantity { alpha: self.alpha },
            PartitionKind::Dirichlet => Scheme::Dirichlet { beta: self.beta },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Rate for adapters (and the backbone under full fine-tuning).
    pub lr_lora: f64,
    /// Rate for the classifier head.
    pub lr_head: f64,
    pub loss: LossKind,
    /// Record the squared gradient norm of the global objective each round.
    pub track_grad_norm: bool,
    /// Cross-entropy competes only among the current task's classes.
    pub mask_logits: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 5,
            local_epochs: 2,
            batch_size: 16,
            lr_lora: 0.3,
            lr_head: 0.5,
            loss: LossKind::CrossEntropy,
            track_grad_norm: false,
            mask_logits: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Architecture,
    pub depth: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Architecture::Transformer,
            depth: 4,
            dim: 32,
            ffn_dim: 64,
            patch_size: 4,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub init_sigma: f64,
    pub blocks: BlockSelect,
    pub matrices: Vec<MatrixKind>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            init_sigma: crate::lora::DEFAULT_INIT_SIGMA,
            blocks: BlockSelect::First(None),
            matrices: MatrixKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalClassifier {
    /// Sample-weighted average of the client heads.
    #[default]
    Average,
    /// Each client's own head; accuracies are pooled over clients.
    PerClientLocal,
}

/// Lists expanded into one run per combination by `run --sweep`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub blocks: Vec<BlockSelect>,
    pub matrices: Vec<Vec<MatrixKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub eval_classifier: EvalClassifier,
    pub dataset: DatasetConfig,
    pub tasks: TasksConfig,
    pub clients: ClientsConfig,
    pub train: TrainConfig,
    pub model: ModelSection,
    pub lora: LoraConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Reswu,
            seeds: DEFAULT_SEEDS.to_vec(),
            eval_classifier: EvalClassifier::Average,
            dataset: DatasetConfig::default(),
            tasks: TasksConfig::default(),
            clients: ClientsConfig::default(),
            train: TrainConfig::default(),
            model: ModelSection::default(),
            lora: LoraConfig::default(),
            sweep: None,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be at least 1")));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Linear model with a squared-error loss and one task, trained full-batch
    /// with gradient-norm tracking. The loss is convex in the dense weight.
    pub fn convex_surrogate() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.tasks.count = 1;
        cfg.model.arch = Architecture::Linear;
        cfg.train = TrainConfig {
            rounds: 100,
            local_epochs: 2,
            batch_size: cfg.dataset.train_per_class * cfg.dataset.num_classes,
            lr_lora: 0.05,
            lr_head: 0.1,
            loss: LossKind::SquaredError,
            track_grad_norm: true,
            mask_logits: false,
        };
        cfg.lora.rank = cfg.dataset.num_classes;
        cfg.lora.init_sigma = 0.3;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text.as_bytes()[..s.start.min(text.len())].iter().filter(|&&b| b == b'\n').count() as u64 + 1)
                .unwrap_or(0);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative CSV paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset.train_csv, &mut cfg.dataset.test_csv].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.model.arch,
            depth: self.model.depth,
            dim: self.model.dim,
            ffn_dim: self.model.ffn_dim,
            patch_size: self.model.patch_size,
            hidden: self.model.hidden,
            input_dim: self.dataset.input_dim,
            num_classes: self.dataset.num_classes,
        }
    }

    pub fn placement(&self) -> PlacementSpec {
        PlacementSpec::new(self.lora.blocks.clone(), self.lora.matrices.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        positive("tasks.count", self.tasks.count)?;
        positive("clients.count", self.clients.count)?;
        positive("train.rounds", self.train.rounds)?;
        positive("train.local_epochs", self.train.local_epochs)?;
        positive("train.batch_size", self.train.batch_size)?;
        positive("dataset.num_classes", self.dataset.num_classes)?;
        positive("dataset.input_dim", self.dataset.input_dim)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if !self.dataset.num_classes.is_multiple_of(self.tasks.count) {
            return Err(Error::Config(format!(
                "tasks.count = {} must evenly divide dataset.num_classes = {}",
                self.tasks.count, self.dataset.num_classes
            )));
        }
        match self.dataset.source {
            DataSource::Blobs => {
                positive("dataset.train_per_class", self.dataset.train_per_class)?;
                positive("dataset.test_per_class", self.dataset.test_per_class)?;
                if !(self.dataset.separation > 0.0 && self.dataset.separation.is_finite()) {
                    return Err(Error::Config("dataset.separation must be positive".into()));
                }
                if !(self.dataset.noise >= 0.0 && self.dataset.noise.is_finite()) {
                    return Err(Error::Config("dataset.noise must be non-negative".into()));
                }
            }
            DataSource::Csv => {
                if self.dataset.train_csv.is_none() || self.dataset.test_csv.is_none() {
                    return Err(Error::Config(
                        "dataset.source = \"csv\" needs dataset.train_csv and dataset.test_csv".into(),
                    ));
                }
            }
        }
        let lrs = [("train.lr_lora", self.train.lr_lora), ("train.lr_head", self.train.lr_head)];
        for (name, lr) in lrs {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {lr}")));
            }
        }
        if self.train.lr_lora >= self.train.lr_head {
            return Err(Error::Config(format!(
                "dual-rate constraint violated: train.lr_lora ({}) must be smaller than train.lr_head ({})",
                self.train.lr_lora, self.train.lr_head
            )));
        }
        let per_task = self.dataset.num_classes / self.tasks.count;
        match self.clients.partition {
            PartitionKind::Quantity => {
                if self.clients.alpha == 0 || self.clients.alpha > per_task {
                    return Err(Error::Config(format!(
                        "clients.alpha = {} must lie in 1..={per_task} (classes per task)",
                        self.clients.alpha
                    )));
                }
                if self.clients.count * self.clients.alpha < per_task {
                    return Err(Error::Config(format!(
                        "clients.count * clients.alpha = {} cannot cover {per_task} classes per task",
                        self.clients.count * self.clients.alpha
                    )));
                }
            }
            PartitionKind::Dirichlet => {
                if !(self.clients.beta > 0.0 && self.clients.beta.is_finite()) {
                    return Err(Error::Config("clients.beta must be positive".into()));
                }
            }
        }
        let model = self.model_config();
        model.validate()?;
        if self.strategy.uses_adapters() {
            let ids = self.placement().resolve(&model)?;
            for id in ids {
                let (d, k) = model.matrix_shape(id).expect("resolved ids exist");
                if self.lora.rank == 0 || self.lora.rank > d.min(k) {
                    return Err(Error::Config(format!(
                        "lora.rank = {} must lie in 1..={} for {id}",
                        self.lora.rank,
                        d.min(k)
                    )));
                }
            }
            if !(self.lora.init_sigma > 0.0 && self.lora.init_sigma.is_finite()) {
                return Err(Error::Config("lora.init_sigma must be positive".into()));
            }
        }
        if let Some(sweep) = &self.sweep {
            for v in self.sweep_variants_of(sweep) {
                v.validate()?;
            }
        }
        Ok(())
    }

    fn sweep_variants_of(&self, sweep: &SweepConfig) -> Vec<ExperimentConfig> {
        let blocks = if sweep.blocks.is_empty() {
            vec![self.lora.blocks.clone()]
        } else {
            sweep.blocks.clone()
        };
        let matrices = if sweep.matrices.is_empty() {
            vec![self.lora.matrices.clone()]
        } else {
            sweep.matrices.clone()
        };
        let mut out = Vec::new();
        for b in &blocks {
            for m in &matrices {
                let mut v = self.clone();
                v.sweep = None;
                v.lora.blocks = b.clone();
                v.lora.matrices = m.clone();
                out.push(v);
            }
        }
        out
    }

    /// One config per placement combination listed under `[sweep]`, or just
    /// this config when there is no sweep.
    pub fn sweep_variants(&self) -> Vec<ExperimentConfig> {
        match &self.sweep {
            Some(s) => self.sweep_variants_of(s),
            None => vec![self.clone()],
        }
    }

    /// Applies a `section.key=value` override, with the value in TOML syntax.
    /// Bare words that are not valid TOML are treated as strings.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        *self = self.with_overrides(&[assignment])?;
        Ok(())
    }

    /// Applies every override and validates the result once, so related
    /// keys can change together.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        for a in assignments {
            apply_override(&mut doc, a.as_ref())?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut slot = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value.clone());
            break;
        }
        slot = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}
