use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::tinylm::tokenizer::record_len;

pub const BUCKET_WIDTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub prompt: String,
    pub reference: String,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.prompt.trim().is_empty() {
            return Err("prompt is empty".into());
        }
        if self.reference.trim().is_empty() {
            return Err("reference is empty".into());
        }
        Ok(())
    }

    /// Tokens fed to the model for this record.
    pub fn token_len(&self) -> usize {
        record_len(&self.prompt, &self.reference)
    }
}

/// One JSON object per line; blank lines are skipped.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| PipelineError::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        rec.validate().map_err(bad)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| PipelineError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub mean: f64,
    pub max: usize,
    /// Bucket start → records with length in `[start, start + 16)`.
    pub buckets: BTreeMap<usize, usize>,
}

impl DatasetStats {
    pub fn from_lengths(lengths: &[usize]) -> Option<Self> {
        if lengths.is_empty() {
            return None;
        }
        let mut buckets = BTreeMap::new();
        for l in lengths {
            *buckets.entry(l / BUCKET_WIDTH * BUCKET_WIDTH).or_insert(0) += 1;
        }
        Some(Self {
            count: lengths.len(),
            mean: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
            max: *lengths.iter().max().expect("nonempty"),
            buckets,
        })
    }
}

/// Token-length histogram under the byte tokenizer.
pub fn dataset_stats(records: &[DatasetRecord]) -> Result<DatasetStats, PipelineError> {
    let lengths: Vec<usize> = records.iter().map(DatasetRecord::token_len).collect();
    DatasetStats::from_lengths(&lengths).ok_or_else(|| PipelineError::stage("stats", "dataset is empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_eval: usize,
    /// Number of components and of symptoms the grammar draws from (1..=8).
    pub grammar_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 32,
            n_eval: 8,
            grammar_size: 3,
        }
    }
}

const COMPONENTS: [&str; 8] = ["fan", "pump", "valve", "relay", "fuse", "motor", "sensor", "belt"];
/// Symptom and the action that fixes it.
const SYMPTOMS: [(&str, &str); 8] = [
    ("noisy", "clean"),
    ("leaking", "seal"),
    ("stuck", "free"),
    ("hot", "cool"),
    ("dead", "replace"),
    ("loose", "tighten"),
    ("slow", "oil"),
    ("tripped", "reset"),
];

/// Fault reports such as `E42 pump leaking` → `seal pump`.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_records: usize,
    grammar_size: usize,
) -> Result<Vec<DatasetRecord>, PipelineError> {
    if n_records == 0 {
        return Err(PipelineError::Config("synthetic corpus needs at least one record".into()));
    }
    if !(1..=COMPONENTS.len()).contains(&grammar_size) {
        return Err(PipelineError::Config(format!(
            "grammar_size must be in 1..={}, got {grammar_size}",
            COMPONENTS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_records)
        .map(|_| {
            let component = COMPONENTS[rng.random_range(0..grammar_size)];
            let (symptom, action) = SYMPTOMS[rng.random_range(0..grammar_size)];
            let code: u32 = rng.random_range(0..100);
            DatasetRecord {
                prompt: format!("E{code:02} {component} {symptom}"),
                reference: format!("{action} {component}"),
            }
        })
        .collect())
}
