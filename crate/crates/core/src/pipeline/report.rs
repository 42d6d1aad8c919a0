use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::run::{FailedCandidate, FinetuneOutput, PruneOutput, TrainingLog};
use super::{PipelineConfig, PipelineError};
use crate::prune::PruneSpec;
use crate::rank::{sort_ranked, CandidateRecord};

/// Report keys that hold wall-clock values.
pub const TIMESTAMP_FIELDS: [&str; 2] = ["generated_at_unix", "wall_seconds"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Finetune,
    Retained,
    Pruned,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Finetune => "finetune",
            Stage::Retained => "retained",
            Stage::Pruned => "pruned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    #[serde(flatten)]
    pub record: CandidateRecord,
    pub stage: Stage,
    pub baseline: bool,
    /// `100 (1 - E / E_base)`, unclamped.
    pub energy_saving_pct: f64,
    /// `100 (rho - rho_base)`, in percentage points.
    pub rho_delta_pp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub generated_at_unix: u64,
    pub wall_seconds: f64,
    pub config: PipelineConfig,
    pub meter_source: String,
    pub w: f64,
    pub baseline_id: String,
    /// Both loops, ranked.
    pub candidates: Vec<ReportEntry>,
    pub training: Vec<TrainingLog>,
    pub failures: Vec<FailedCandidate>,
}

impl RunReport {
    pub fn count(&self, stage: Stage) -> usize {
        self.candidates.iter().filter(|c| c.stage == stage).count()
    }
}

pub fn build_report(
    config: &PipelineConfig,
    finetune: &FinetuneOutput,
    prune: &PruneOutput,
    meter_source: &str,
    wall_seconds: f64,
) -> RunReport {
    let base = finetune.baseline();
    let entry = |record: &CandidateRecord, stage: Stage| ReportEntry {
        record: record.clone(),
        stage,
        baseline: stage == Stage::Finetune && record.id == base.id,
        energy_saving_pct: 100.0 * (1.0 - record.energy.total_joules / base.energy.total_joules),
        rho_delta_pp: 100.0 * (record.rho - base.rho),
    };
    let mut records: Vec<(CandidateRecord, Stage)> = finetune
        .records
        .iter()
        .map(|r| (r.clone(), Stage::Finetune))
        .chain(prune.retained.iter().map(|r| (r.clone(), Stage::Retained)))
        .chain(prune.pruned.iter().map(|r| (r.clone(), Stage::Pruned)))
        .collect();
    let mut order: Vec<CandidateRecord> = records.iter().map(|(r, _)| r.clone()).collect();
    sort_ranked(&mut order);
    let candidates = order
        .iter()
        .map(|r| {
            let i = records.iter().position(|(x, _)| x.id == r.id).expect("present");
            let (rec, stage) = records.swap_remove(i);
            entry(&rec, stage)
        })
        .collect();
    RunReport {
        generated_at_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        wall_seconds,
        config: config.clone(),
        meter_source: meter_source.to_string(),
        w: config.w,
        baseline_id: base.id.clone(),
        candidates,
        training: finetune.training.clone(),
        failures: finetune.failures.iter().chain(&prune.failures).cloned().collect(),
    }
}

/// One flat CSV line per candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub rank: usize,
    pub id: String,
    pub stage: String,
    pub bits: u8,
    pub epochs: u32,
    pub prune: String,
    pub sparsity: Option<f64>,
    pub parent: String,
    pub bleu: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub rouge_l_f: f64,
    pub meteor: f64,
    pub cosine: f64,
    pub tokens_per_s: f64,
    pub cpu_joules: f64,
    pub ram_joules: f64,
    pub gpu_joules: f64,
    pub total_joules: f64,
    pub duration_s: f64,
    pub kwh: f64,
    pub co2e_kg: f64,
    pub phi: f64,
    pub rho: f64,
    pub w: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub baseline: bool,
    pub energy_saving_pct: f64,
    pub rho_delta_pp: f64,
}

impl CsvRow {
    pub fn from_entry(rank: usize, e: &ReportEntry, w: f64) -> Self {
        let r = &e.record;
        Self {
            rank,
            id: r.id.clone(),
            stage: e.stage.as_str().into(),
            bits: r.lineage.precision_bits.bits(),
            epochs: r.lineage.epochs_trained,
            prune: r.lineage.prune_spec.as_ref().map(PruneSpec::label).unwrap_or_default(),
            sparsity: r.lineage.sparsity,
            parent: r.lineage.parent_id.clone().unwrap_or_default(),
            bleu: r.scores.bleu,
            rouge1_f: r.scores.rouge1_f,
            rouge2_f: r.scores.rouge2_f,
            rouge_l_f: r.scores.rouge_l_f,
            meteor: r.scores.meteor,
            cosine: r.scores.cosine,
            tokens_per_s: r.scores.tokens_per_s,
            cpu_joules: r.energy.cpu_joules,
            ram_joules: r.energy.ram_joules,
            gpu_joules: r.energy.gpu_joules,
            total_joules: r.energy.total_joules,
            duration_s: r.energy.duration_s,
            kwh: r.energy.kwh,
            co2e_kg: r.energy.co2e_kg,
            phi: r.phi,
            rho: r.rho,
            w,
            r: r.r,
            baseline: e.baseline,
            energy_saving_pct: e.energy_saving_pct,
            rho_delta_pp: e.rho_delta_pp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub markdown: PathBuf,
}

fn markdown(report: &RunReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Compression run\n");
    let _ = writeln!(
        md,
        "Baseline `{}`, w = {}, meter source `{}`, {} candidates.\n",
        report.baseline_id,
        report.w,
        report.meter_source,
        report.candidates.len()
    );
    let _ = writeln!(md, "## Ranking\n");
    let _ = writeln!(
        md,
        "| rank | id | stage | bits | epochs | prune | rho | phi | R | energy (J) | saving (%) |"
    );
    let _ = writeln!(md, "|---:|---|---|---:|---:|---|---:|---:|---:|---:|---:|");
    for (i, e) in report.candidates.iter().enumerate() {
        let r = &e.record;
        let prune = r.lineage.prune_spec.as_ref().map(PruneSpec::label).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            md,
            "| {} | {}{} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} |",
            i + 1,
            r.id,
            if e.baseline { " (baseline)" } else { "" },
            e.stage.as_str(),
            r.lineage.precision_bits.bits(),
            r.lineage.epochs_trained,
            prune,
            r.rho,
            r.phi,
            r.r,
            r.energy.total_joules,
            e.energy_saving_pct,
        );
    }
    let _ = writeln!(md, "\n## Training loss and energy per epoch\n");
    let _ = writeln!(md, "| candidate | epoch | mean loss | energy (J) | kgCO2e |");
    let _ = writeln!(md, "|---|---:|---:|---:|---:|");
    for log in &report.training {
        for rec in &log.epochs {
            let _ = writeln!(
                md,
                "| {} | {} | {:.4} | {:.4} | {:.3e} |",
                log.candidate_id, rec.epoch, rec.mean_loss, rec.energy.total_joules, rec.energy.co2e_kg
            );
        }
    }
    if !report.failures.is_empty() {
        let _ = writeln!(md, "\n## Failed candidates\n");
        for f in &report.failures {
            let _ = writeln!(md, "- `{}` ({}): {}", f.id, f.stage, f.error);
        }
    }
    md
}

/// Writes `report.json`, `candidates.csv` and `summary.md` into `dir`.
pub fn emit_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<ReportPaths, PipelineError> {
    let dir = dir.as_ref();
    if report.candidates.is_empty() {
        return Err(PipelineError::stage("report", "no candidates to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let paths = ReportPaths {
        json: dir.join("report.json"),
        csv: dir.join("candidates.csv"),
        markdown: dir.join("summary.md"),
    };
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    std::fs::write(&paths.json, json).map_err(|e| PipelineError::io(&paths.json, e))?;

    let mut writer = csv::Writer::from_path(&paths.csv).map_err(|e| PipelineError::stage("report", e))?;
    for (i, e) in report.candidates.iter().enumerate() {
        writer
            .serialize(CsvRow::from_entry(i + 1, e, report.w))
            .map_err(|e| PipelineError::stage("report", e))?;
    }
    writer.flush().map_err(|e| PipelineError::io(&paths.csv, e))?;

    std::fs::write(&paths.markdown, markdown(report)).map_err(|e| PipelineError::io(&paths.markdown, e))?;
    Ok(paths)
}
