//! The two-loop experiment: fine-tune a precision × epochs grid, rank it,
//! prune the best `k`, re-evaluate, and write reports.

mod data;
mod report;
mod run;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{
    dataset_stats, generate_synthetic_corpus, load_jsonl, write_jsonl, DatasetRecord, DatasetStats,
    SyntheticConfig, BUCKET_WIDTH,
};
pub use report::{
    build_report, emit_report, CsvRow, ReportEntry, ReportPaths, RunReport, Stage, TIMESTAMP_FIELDS,
};
pub use run::{
    evaluate_model, load_finetune, load_prune, load_topk, prepare_data, rescore, run_all, run_finetune_grid,
    run_prune_grid, save_finetune, save_prune, save_topk, select_trained, FailedCandidate, FinetuneOutput,
    PruneOutput, TrainedCandidate, TrainingLog,
};

use crate::meter::{MeterConfig, MeterError, SourceConfig};
use crate::prune::{PruneSpec, Scope};
use crate::rank::RankingWeights;
use crate::tensors::Precision;
use crate::tinylm::{LmConfig, LoraConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {detail}")]
    Stage { stage: &'static str, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {detail}", path.display())]
    Dataset { path: PathBuf, line: usize, detail: String },
}

impl PipelineError {
    pub(crate) fn stage(stage: &'static str, detail: impl ToString) -> Self {
        Self::Stage {
            stage,
            detail: detail.to_string(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

impl From<MeterError> for PipelineError {
    fn from(e: MeterError) -> Self {
        match e {
            MeterError::Config(d) => Self::Config(d),
            other => Self::stage("meter", other),
        }
    }
}

/// Training and evaluation data. Without paths a synthetic corpus is
/// generated into `<out_dir>/data`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; overrides the model and adapter seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub bits_grid: Vec<u8>,
    pub epochs_grid: Vec<u32>,
    pub w: f64,
    pub k: usize,
    pub prune_ratios: Vec<f64>,
    pub prune_scope: Scope,
    /// `(n, m)` pairs.
    pub nm_patterns: Vec<(usize, usize)>,
    /// Generation budget per evaluation prompt.
    pub max_new_tokens: usize,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub data: DataConfig,
    pub meter: MeterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            bits_grid: vec![4, 8, 16, 32],
            epochs_grid: vec![5, 10],
            w: 0.7,
            k: 2,
            prune_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            prune_scope: Scope::PerTensor,
            nm_patterns: vec![(2, 4), (4, 8)],
            max_new_tokens: 32,
            lm: LmConfig::default(),
            lora: LoraConfig::default(),
            data: DataConfig::default(),
            meter: MeterConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn precisions(&self) -> Result<Vec<Precision>, PipelineError> {
        self.bits_grid
            .iter()
            .map(|b| {
                Precision::from_bits(*b)
                    .ok_or_else(|| PipelineError::Config(format!("unsupported precision {b} bits (use 4, 8, 16 or 32)")))
            })
            .collect()
    }

    /// Unstructured specs first, in ratio order, then N:M patterns.
    pub fn prune_specs(&self) -> Vec<PruneSpec> {
        let mut specs: Vec<PruneSpec> = self
            .prune_ratios
            .iter()
            .map(|r| {
                let mut s = PruneSpec::magnitude(*r);
                if let crate::prune::PruneMethod::UnstructuredMagnitude { scope, .. } = &mut s.method {
                    *scope = self.prune_scope;
                }
                s
            })
            .collect();
        specs.extend(self.nm_patterns.iter().map(|(n, m)| PruneSpec::nm(*n, *m)));
        specs
    }

    pub fn weights(&self) -> RankingWeights {
        RankingWeights { w: self.w, k: self.k }
    }

    /// Model config with the master seed applied.
    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            init_seed: self.seed,
            ..self.lm.clone()
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            seed: self.seed,
            ..self.lora.clone()
        }
    }

    pub fn max_epochs(&self) -> u32 {
        self.epochs_grid.iter().copied().max().unwrap_or(0)
    }

    /// `(train, eval)` dataset paths.
    pub fn data_paths(&self) -> (PathBuf, PathBuf) {
        match (&self.data.train, &self.data.eval) {
            (Some(t), Some(e)) => (t.clone(), e.clone()),
            _ => {
                let dir = self.out_dir.join("data");
                (dir.join("train.jsonl"), dir.join("eval.jsonl"))
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        let precisions = self.precisions()?;
        if precisions.is_empty() {
            return err("bits_grid is empty".into());
        }
        if !precisions.contains(&Precision::Fp32) {
            return err("bits_grid must include 32: the 32-bit candidate is the energy baseline".into());
        }
        if self.epochs_grid.is_empty() {
            return err("epochs_grid is empty".into());
        }
        if self.epochs_grid.contains(&0) {
            return err("epochs_grid entries must be at least 1".into());
        }
        if has_duplicates(&self.bits_grid) || has_duplicates(&self.epochs_grid) {
            return err("grid entries must be distinct".into());
        }
        self.weights().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for spec in self.prune_specs() {
            spec.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        let labels: Vec<String> = self.prune_specs().iter().map(PruneSpec::label).collect();
        if has_duplicates(&labels) {
            return err("prune settings must be distinct".into());
        }
        if self.max_new_tokens == 0 {
            return err("max_new_tokens must be at least 1".into());
        }
        self.lm.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let alpha_ok = self.lora.alpha.is_finite() && self.lora.alpha > 0.0;
        let lr_ok = self.lora.lr.is_finite() && self.lora.lr >= 0.0;
        if self.lora.rank == 0 || !alpha_ok || !lr_ok {
            return err("lora: rank and alpha must be positive, lr non-negative".into());
        }
        self.meter.validate()?;
        if self.data.train.is_some() != self.data.eval.is_some() {
            return err("data: give both train and eval paths, or neither".into());
        }
        let (train, eval) = self.data_paths();
        let mut paths = vec![train, eval, self.out_dir.clone()];
        if let SourceConfig::TraceReplay { path } = &self.meter.source {
            paths.push(path.clone());
        }
        if has_duplicates(&paths) {
            return err("train, eval, output and trace paths must be distinct".into());
        }
        Ok(())
    }
}

fn has_duplicates<T: Eq + std::hash::Hash>(items: &[T]) -> bool {
    let mut seen = HashSet::new();
    !items.iter().all(|i| seen.insert(i))
}
