use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{generate_synthetic_corpus, load_jsonl, write_jsonl, DatasetRecord};
use super::report::{build_report, emit_report, RunReport};
use super::{PipelineConfig, PipelineError};
use crate::meter::{EnergyReport, Meter, Work};
use crate::metrics::{score_outputs, MetricScores, TfEmbedder, Timing};
use crate::prune::{prune_bundle, PruneSpec};
use crate::quant::{quantize_bundle, QuantSpec};
use crate::rank::{efficiency_score, performance_score, rank_score, select_top_k, CandidateRecord};
use crate::tensors::{load_bundle, payload_bytes, save_bundle, Lineage, ModelBundle, Precision};
use crate::tinylm::tokenizer::{decode, encode_prompt};
use crate::tinylm::{
    init_model, load_adapters, merge_adapters, save_adapters, train_epoch, Example, LoraAdapters, MacCount,
    Model, TrainRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub candidate_id: String,
    pub epochs: Vec<TrainRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCandidate {
    pub id: String,
    pub stage: String,
    pub error: String,
}

/// A fine-tuned candidate with the weights needed for the pruning loop.
#[derive(Clone, Debug)]
pub struct TrainedCandidate {
    pub record: CandidateRecord,
    pub bundle: ModelBundle,
    pub adapters: LoraAdapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutput {
    pub baseline_id: String,
    pub records: Vec<CandidateRecord>,
    pub training: Vec<TrainingLog>,
    pub failures: Vec<FailedCandidate>,
}

impl FinetuneOutput {
    pub fn baseline(&self) -> &CandidateRecord {
        self.records
            .iter()
            .find(|r| r.id == self.baseline_id)
            .expect("baseline is always among the records")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneOutput {
    /// Unpruned re-evaluations of the selected candidates.
    pub retained: Vec<CandidateRecord>,
    pub pruned: Vec<CandidateRecord>,
    pub failures: Vec<FailedCandidate>,
}

fn candidate_id(bits: u8, epochs: u32) -> String {
    format!("q{bits}-e{epochs}")
}

fn unscored(id: String, lineage: Lineage, scores: MetricScores, energy: EnergyReport) -> CandidateRecord {
    CandidateRecord {
        id,
        lineage,
        scores,
        energy,
        rho: 0.0,
        phi: 0.0,
        r: 0.0,
    }
}

/// Greedy-decodes every evaluation prompt inside one meter span, then
/// scores the outputs once the span is closed.
pub fn evaluate_model(
    model: &Model,
    weight_bytes: u64,
    eval: &[DatasetRecord],
    max_new: usize,
    meter: &mut Meter,
) -> Result<(MetricScores, EnergyReport), PipelineError> {
    if eval.is_empty() {
        return Err(PipelineError::stage("evaluate", "evaluation dataset is empty"));
    }
    let prompts: Vec<Vec<u32>> = eval.iter().map(|r| encode_prompt(&r.prompt)).collect();
    let span = meter.start_span()?;
    let outputs: Vec<_> = prompts
        .par_iter()
        .map(|p| {
            let mut macs = MacCount::default();
            model.greedy(p, max_new, &mut macs).map(|ids| (ids, macs))
        })
        .collect();
    let mut work = Work {
        macs: model.adapter_build_macs(),
        ..Work::default()
    };
    for (out, p) in outputs.iter().zip(&prompts) {
        let Ok((ids, macs)) = out else { continue };
        work.macs += macs.macs();
        work.skipped_macs += macs.skipped;
        work.weight_bytes += (ids.len() - p.len()) as u64 * weight_bytes;
    }
    meter.charge(&work);
    let energy = meter.stop_span(span)?;

    let mut pairs = Vec::with_capacity(eval.len());
    let mut generated = 0u64;
    for ((out, p), rec) in outputs.into_iter().zip(&prompts).zip(eval) {
        let (ids, _) = out.map_err(|e| PipelineError::stage("evaluate", e))?;
        let gen = &ids[p.len()..];
        generated += gen.iter().filter(|t| **t < 256).count() as u64;
        pairs.push((decode(gen), rec.reference.clone()));
    }
    let timing = Timing {
        n_tokens: generated,
        duration_s: energy.duration_s,
    };
    let scores = score_outputs(&pairs, timing, &TfEmbedder).map_err(|e| PipelineError::stage("evaluate", e))?;
    Ok((scores, energy))
}

fn examples(records: &[DatasetRecord]) -> Vec<Example> {
    records.iter().map(|r| Example::from_text(&r.prompt, &r.reference)).collect()
}

fn finetune_one(
    config: &PipelineConfig,
    base: &ModelBundle,
    bits: Precision,
    epochs: u32,
    train: &[Example],
    eval: &[DatasetRecord],
    meter: &mut Meter,
) -> Result<(TrainedCandidate, TrainingLog), PipelineError> {
    let id = candidate_id(bits.bits(), epochs);
    let mut bundle = quantize_bundle(base, &QuantSpec::new(bits)).map_err(|e| PipelineError::stage("quantize", e))?;
    let lora = config.lora_config();
    let mut adapters = LoraAdapters::init(&bundle, &lora).map_err(|e| PipelineError::stage("train", e))?;
    let mut log = TrainingLog {
        candidate_id: id.clone(),
        epochs: Vec::new(),
    };
    for epoch in 1..=epochs {
        let (next, rec) = train_epoch(&bundle, &adapters, train, lora.lr, lora.batch_size, epoch, meter)
            .map_err(|e| PipelineError::stage("train", e))?;
        adapters = next;
        log.epochs.push(rec);
    }
    bundle.lineage.epochs_trained = epochs;
    let model = Model::new(&bundle, Some(&adapters)).map_err(|e| PipelineError::stage("evaluate", e))?;
    let weight_bytes = payload_bytes(&bundle) + adapters.payload_bytes();
    let (scores, energy) = evaluate_model(&model, weight_bytes, eval, config.max_new_tokens, meter)?;
    let record = unscored(id, bundle.lineage.clone(), scores, energy);
    Ok((
        TrainedCandidate {
            record,
            bundle,
            adapters,
        },
        log,
    ))
}

/// Sets rho, phi and R on every record against the baseline energy.
pub fn rescore(records: &mut [CandidateRecord], baseline: &EnergyReport, w: f64) -> Result<(), PipelineError> {
    for r in records {
        r.rho = performance_score(&r.scores);
        r.phi = efficiency_score(&r.energy, baseline).map_err(|e| PipelineError::stage("rank", e))?;
        r.r = rank_score(r.phi, r.rho, w).map_err(|e| PipelineError::stage("rank", e))?;
    }
    Ok(())
}

/// Loop 1: every precision × epochs pair, run one after another.
pub fn run_finetune_grid(
    config: &PipelineConfig,
    train: &[DatasetRecord],
    eval: &[DatasetRecord],
    meter: &mut Meter,
) -> Result<(FinetuneOutput, Vec<TrainedCandidate>), PipelineError> {
    config.validate()?;
    if train.is_empty() {
        return Err(PipelineError::stage("train", "training dataset is empty"));
    }
    if eval.is_empty() {
        return Err(PipelineError::stage("evaluate", "evaluation dataset is empty"));
    }
    let base = init_model(&config.lm_config()).map_err(|e| PipelineError::Config(e.to_string()))?;
    let train = examples(train);
    let mut trained = Vec::new();
    let mut training = Vec::new();
    let mut failures = Vec::new();
    for bits in config.precisions()? {
        for &epochs in &config.epochs_grid {
            match finetune_one(config, &base, bits, epochs, &train, eval, meter) {
                Ok((t, log)) => {
                    trained.push(t);
                    training.push(log);
                }
                Err(e) => failures.push(FailedCandidate {
                    id: candidate_id(bits.bits(), epochs),
                    stage: "finetune".into(),
                    error: e.to_string(),
                }),
            }
        }
    }
    if trained.is_empty() {
        return Err(PipelineError::stage("finetune", "every candidate failed"));
    }
    let baseline_id = candidate_id(32, config.max_epochs());
    let baseline = trained
        .iter()
        .find(|t| t.record.id == baseline_id)
        .map(|t| t.record.energy.clone())
        .ok_or_else(|| PipelineError::stage("finetune", format!("baseline candidate {baseline_id} failed")))?;
    let mut records: Vec<CandidateRecord> = trained.iter().map(|t| t.record.clone()).collect();
    rescore(&mut records, &baseline, config.w)?;
    for (t, r) in trained.iter_mut().zip(&records) {
        t.record = r.clone();
    }
    Ok((
        FinetuneOutput {
            baseline_id,
            records,
            training,
            failures,
        },
        trained,
    ))
}

fn prune_one(
    config: &PipelineConfig,
    parent: &TrainedCandidate,
    spec: &PruneSpec,
    eval: &[DatasetRecord],
    meter: &mut Meter,
) -> Result<CandidateRecord, PipelineError> {
    // a full-precision base absorbs its adapters; quantized bases keep
    // them and have their codes masked in place
    let (pruned, adapters) = if parent.bundle.lineage.precision_bits == Precision::Fp32 {
        let merged = merge_adapters(&parent.bundle, &parent.adapters).map_err(|e| PipelineError::stage("prune", e))?;
        (prune_bundle(&merged, spec).map_err(|e| PipelineError::stage("prune", e))?, None)
    } else {
        (
            prune_bundle(&parent.bundle, spec).map_err(|e| PipelineError::stage("prune", e))?,
            Some(&parent.adapters),
        )
    };
    let model = Model::new(&pruned, adapters).map_err(|e| PipelineError::stage("prune", e))?;
    let weight_bytes = payload_bytes(&pruned) + adapters.map_or(0, LoraAdapters::payload_bytes);
    let (scores, energy) = evaluate_model(&model, weight_bytes, eval, config.max_new_tokens, meter)?;
    let mut lineage = pruned.lineage.clone();
    lineage.parent_id = Some(parent.record.id.clone());
    Ok(unscored(
        format!("{}-{}", parent.record.id, spec.label()),
        lineage,
        scores,
        energy,
    ))
}

fn retain_one(
    config: &PipelineConfig,
    parent: &TrainedCandidate,
    eval: &[DatasetRecord],
    meter: &mut Meter,
) -> Result<CandidateRecord, PipelineError> {
    let model = Model::new(&parent.bundle, Some(&parent.adapters)).map_err(|e| PipelineError::stage("prune", e))?;
    let weight_bytes = payload_bytes(&parent.bundle) + parent.adapters.payload_bytes();
    let (scores, energy) = evaluate_model(&model, weight_bytes, eval, config.max_new_tokens, meter)?;
    let mut lineage = parent.bundle.lineage.clone();
    lineage.parent_id = Some(parent.record.id.clone());
    Ok(unscored(format!("{}-dense", parent.record.id), lineage, scores, energy))
}

/// Loop 2: each selected candidate is re-evaluated unpruned and under
/// every prune setting.
pub fn run_prune_grid(
    config: &PipelineConfig,
    top: &[TrainedCandidate],
    eval: &[DatasetRecord],
    baseline: &EnergyReport,
    meter: &mut Meter,
) -> Result<PruneOutput, PipelineError> {
    if top.is_empty() {
        return Err(PipelineError::stage("prune", "no candidates selected"));
    }
    let mut out = PruneOutput::default();
    let mut attempted = 0;
    let record_failure = |out: &mut PruneOutput, id: String, e: PipelineError| {
        out.failures.push(FailedCandidate {
            id,
            stage: "prune".into(),
            error: e.to_string(),
        })
    };
    for parent in top {
        attempted += 1;
        match retain_one(config, parent, eval, meter) {
            Ok(r) => out.retained.push(r),
            Err(e) => record_failure(&mut out, format!("{}-dense", parent.record.id), e),
        }
        for spec in config.prune_specs() {
            attempted += 1;
            match prune_one(config, parent, &spec, eval, meter) {
                Ok(r) => out.pruned.push(r),
                Err(e) => record_failure(&mut out, format!("{}-{}", parent.record.id, spec.label()), e),
            }
        }
    }
    if out.failures.len() == attempted {
        return Err(PipelineError::stage("prune", "every candidate failed"));
    }
    rescore(&mut out.retained, baseline, config.w)?;
    rescore(&mut out.pruned, baseline, config.w)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::stage("load", format!("{}: {e}", path.display())))
}

fn model_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    let models = dir.join("models");
    (models.join(format!("{id}.ealm")), models.join(format!("{id}.lora")))
}

/// Writes `finetune.json` and one bundle plus adapter file per candidate.
pub fn save_finetune(dir: &Path, output: &FinetuneOutput, trained: &[TrainedCandidate]) -> Result<(), PipelineError> {
    let models = dir.join("models");
    std::fs::create_dir_all(&models).map_err(|e| PipelineError::io(&models, e))?;
    for t in trained {
        let (b, a) = model_paths(dir, &t.record.id);
        save_bundle(&t.bundle, &b).map_err(|e| PipelineError::stage("save", e))?;
        save_adapters(&t.adapters, &a).map_err(|e| PipelineError::stage("save", e))?;
    }
    write_json(&dir.join("finetune.json"), output)
}

/// Reads `finetune.json` and the weights of the listed candidates.
pub fn load_finetune(dir: &Path) -> Result<(FinetuneOutput, Vec<TrainedCandidate>), PipelineError> {
    let output: FinetuneOutput = read_json(&dir.join("finetune.json"))?;
    let trained = output
        .records
        .iter()
        .map(|r| {
            let (b, a) = model_paths(dir, &r.id);
            Ok(TrainedCandidate {
                record: r.clone(),
                bundle: load_bundle(&b).map_err(|e| PipelineError::stage("load", e))?,
                adapters: load_adapters(&a).map_err(|e| PipelineError::stage("load", e))?,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok((output, trained))
}

pub fn save_prune(dir: &Path, output: &PruneOutput) -> Result<(), PipelineError> {
    write_json(&dir.join("prune.json"), output)
}

pub fn load_prune(dir: &Path) -> Result<PruneOutput, PipelineError> {
    read_json(&dir.join("prune.json"))
}

pub fn save_topk(dir: &Path, top: &[CandidateRecord]) -> Result<(), PipelineError> {
    write_json(&dir.join("topk.json"), &top)
}

pub fn load_topk(dir: &Path) -> Result<Vec<CandidateRecord>, PipelineError> {
    read_json(&dir.join("topk.json"))
}

/// Training and evaluation records, generated into `<out>/data` when no
/// paths are configured. Records longer than the context are rejected.
pub fn prepare_data(config: &PipelineConfig) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>), PipelineError> {
    let (train_path, eval_path) = config.data_paths();
    if config.data.train.is_none() {
        let s = &config.data.synthetic;
        write_jsonl(&train_path, &generate_synthetic_corpus(config.seed, s.n_train, s.grammar_size)?)?;
        write_jsonl(&eval_path, &generate_synthetic_corpus(!config.seed, s.n_eval, s.grammar_size)?)?;
    }
    let train = load_jsonl(&train_path)?;
    let eval = load_jsonl(&eval_path)?;
    let max_seq = config.lm.max_seq;
    for (path, records) in [(&train_path, &train), (&eval_path, &eval)] {
        if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.token_len() > max_seq) {
            return Err(PipelineError::Dataset {
                path: path.clone(),
                line: i + 1,
                detail: format!("record needs {} tokens, max_seq is {max_seq}", r.token_len()),
            });
        }
    }
    Ok((train, eval))
}

pub fn select_trained(top: &[CandidateRecord], trained: Vec<TrainedCandidate>) -> Vec<TrainedCandidate> {
    top.iter()
        .filter_map(|r| trained.iter().find(|t| t.record.id == r.id).cloned())
        .collect()
}

/// Both loops end to end, writing stage files and the three reports to
/// the output directory.
pub fn run_all(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let (train, eval) = prepare_data(config)?;
    let mut meter = Meter::new(config.meter.clone())?;

    let (finetune, trained) = run_finetune_grid(config, &train, &eval, &mut meter)?;
    save_finetune(dir, &finetune, &trained)?;

    let top = select_top_k(&finetune.records, &config.weights()).map_err(|e| PipelineError::stage("rank", e))?;
    save_topk(dir, &top)?;
    let top = select_trained(&top, trained);

    let baseline = finetune.baseline().energy.clone();
    let prune = run_prune_grid(config, &top, &eval, &baseline, &mut meter)?;
    save_prune(dir, &prune)?;

    let report = build_report(config, &finetune, &prune, meter.source_name(), started.elapsed().as_secs_f64());
    emit_report(&report, dir)?;
    Ok(report)
}
