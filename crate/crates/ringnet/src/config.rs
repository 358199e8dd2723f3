//! Experiment configuration: one TOML file pins everything a run needs —
//! dataset construction, architecture, optimizer, schedule, and output
//! layout — so a config plus the code version determines the run bit-exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::clickthrough::ClickthroughSynthSpec;
use crate::data::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::optim::{RingSchedule, SgdHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// One independent network per task; nothing shared.
    Binary,
    /// A single fully-shared softmax over all categories.
    Multiclass,
    /// Shared trunk, per-task heads, trained round-robin.
    Multitask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// The 32x32 three-conv-block classifier.
    Cifar,
    /// The 224x224 five-conv retrieval network.
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Builder {
    /// Heavy-tailed counts 5000 down to 100 across ten categories.
    Dataset1,
    /// Dataset1 with the largest category split into twins (cat/kitten).
    Dataset2,
    /// Balanced: the same total as dataset1, spread evenly.
    Dataset3,
    /// Synthetic query clickthrough corpus for retrieval runs.
    Clickthrough,
}

/// Where the labeled image pool comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum PoolSource {
    /// Procedurally generated 32x32 images; always available.
    Synth {
        #[serde(default)]
        spec: SynthSpec,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// CIFAR-10 binary batches on disk.
    Cifar { train_files: Vec<PathBuf>, test_files: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub builder: Builder,
    /// Scale divisor applied to every per-category count; must divide exactly.
    #[serde(default = "default_scale")]
    pub scale: usize,
    /// Seed for sampling ids into tasks (and negatives).
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pool: Option<PoolSource>,
    /// Only read when builder = clickthrough.
    #[serde(default)]
    pub clickthrough: Option<ClickthroughSynthSpec>,
    /// Clickthrough only: how many queries get ring-trained heads; 0 means
    /// all of them. Evaluation always reranks every query off the shared
    /// features, so a small subset keeps training cheap.
    #[serde(default)]
    pub train_queries: usize,
}

fn default_scale() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfigSection {
    pub kind: ModelKind,
    pub arch: Arch,
    /// Seed for weight init and training streams.
    #[serde(default = "default_model_seed")]
    pub seed: u64,
}

fn default_model_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Extra foreign images ranked per query in retrieval evaluation.
    pub candidates_extra: usize,
    /// Hinge-loss epochs for the per-query feature reranker.
    pub reranker_epochs: usize,
    /// L2 strength for the reranker.
    pub reranker_lambda: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { candidates_extra: 15, reranker_epochs: 50, reranker_lambda: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name stamped on output files; defaults from the config file name.
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfigSection,
    #[serde(default)]
    pub optimizer: SgdHyper,
    #[serde(default)]
    pub schedule: RingSchedule,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Output directory for manifests, checkpoints, logs, and metrics.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn serialize(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        if config.name.is_empty() {
            config.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into());
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        match self.dataset.builder {
            Builder::Clickthrough => {
                if self.model.arch != Arch::Retrieval {
                    return Err(Error::Config(
                        "the clickthrough builder feeds the retrieval architecture".into(),
                    ));
                }
                if self.dataset.clickthrough.is_none() {
                    return Err(Error::Config(
                        "builder = clickthrough needs a [dataset.clickthrough] table".into(),
                    ));
                }
            }
            _ => {
                if self.model.arch != Arch::Cifar {
                    return Err(Error::Config(
                        "image-classification builders feed the cifar architecture".into(),
                    ));
                }
                if self.dataset.pool.is_none() {
                    return Err(Error::Config(
                        "classification datasets need a [dataset.pool] table".into(),
                    ));
                }
            }
        }
        if let Some(PoolSource::Synth { spec, train_per_class, test_per_class }) =
            &self.dataset.pool
        {
            spec.validate()?;
            if *train_per_class == 0 || *test_per_class == 0 {
                return Err(Error::Config("pool sizes must be positive".into()));
            }
        }
        if let Some(spec) = &self.dataset.clickthrough {
            spec.validate()?;
            if self.dataset.train_queries > spec.query_count {
                return Err(Error::Config(format!(
                    "train_queries = {} exceeds the corpus's {} queries",
                    self.dataset.train_queries, spec.query_count
                )));
            }
        }
        if self.model.kind == ModelKind::Multiclass
            && self.schedule.eta_s_zero_round <= self.schedule.rounds
        {
            return Err(Error::Config(
                "a fully-shared model would freeze all its weights mid-run; \
                 set eta_s_zero_round = rounds + 1"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Paths derived from the output directory.
    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.manifest.jsonl", self.name))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.ckpt", self.name))
    }

    /// Per-task checkpoint for the binary (no-sharing) variant.
    pub fn task_checkpoint_path(&self, task: &str) -> PathBuf {
        self.out_dir.join(format!("{}.{task}.ckpt", self.name))
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.train.jsonl", self.name))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.metrics.json", self.name))
    }
}
