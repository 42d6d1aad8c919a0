use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ealm::meter::{ClockKind, Meter, MeterConfig, SourceConfig};
use ealm::pipeline::{
    build_report, dataset_stats, emit_report, generate_synthetic_corpus, load_finetune, load_jsonl, load_prune,
    load_topk, prepare_data, rescore, run_all, run_finetune_grid, run_prune_grid, save_finetune, save_prune,
    save_topk, select_trained, write_jsonl, PipelineConfig, PipelineError, RunReport,
};
use ealm::rank::{select_top_k, CandidateRecord};

#[derive(Parser)]
#[command(name = "ealm", version, about = "Quantize, fine-tune, prune and rank small language models by quality and energy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic fault-report corpus (train.jsonl, eval.jsonl)
    GenData(GenData),
    /// Token-length histogram of a JSONL dataset
    Stats { dataset: PathBuf },
    /// Loop 1: fine-tune every precision × epochs candidate
    FinetuneGrid(Common),
    /// Rank loop-1 candidates and select the top k
    Rank(Common),
    /// Loop 2: prune and re-evaluate the selected candidates
    PruneGrid(Common),
    /// Write report.json, candidates.csv and summary.md from stage files
    Report(Common),
    /// Both loops and the reports
    RunAll(Common),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    records: usize,
    #[arg(long, default_value_t = 8)]
    eval_records: usize,
    #[arg(long, default_value_t = 3)]
    grammar: usize,
}

#[derive(Args)]
struct Common {
    /// TOML file mirroring the pipeline configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// powercap | constant | trace:<path>
    #[arg(long)]
    meter: Option<String>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

fn parse_meter(spec: &str, base: &MeterConfig) -> Result<MeterConfig, PipelineError> {
    let (source, clock) = match spec {
        "constant" => (SourceConfig::default(), ClockKind::Modeled),
        "powercap" => (MeterConfig::powercap(ealm::meter::DEFAULT_ROOT).source, ClockKind::Wall),
        _ => match spec.strip_prefix("trace:") {
            Some(path) if !path.is_empty() => (SourceConfig::TraceReplay { path: path.into() }, ClockKind::Modeled),
            _ => {
                return Err(PipelineError::Config(format!(
                    "unknown meter `{spec}` (use powercap, constant or trace:<path>)"
                )))
            }
        },
    };
    Ok(MeterConfig {
        source,
        clock,
        ..base.clone()
    })
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(out) = &self.out {
            c.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(m) = &self.meter {
            c.meter = parse_meter(m, &c.meter)?;
        }
        if let Some(w) = self.w {
            c.w = w;
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_records(records: &[CandidateRecord]) {
    println!("{:<24} {:>8} {:>8} {:>8} {:>12}", "id", "rho", "phi", "R", "energy_J");
    for r in records {
        println!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>12.4}",
            r.id, r.rho, r.phi, r.r, r.energy.total_joules
        );
    }
}

fn print_report(report: &RunReport, dir: &Path) {
    let records: Vec<CandidateRecord> = report.candidates.iter().map(|e| e.record.clone()).collect();
    print_records(&records);
    for f in &report.failures {
        eprintln!("failed {} ({}): {}", f.id, f.stage, f.error);
    }
    println!("reports written to {}", dir.display());
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenData(g) => {
            let train = generate_synthetic_corpus(g.seed, g.records, g.grammar)?;
            let eval = generate_synthetic_corpus(!g.seed, g.eval_records, g.grammar)?;
            write_jsonl(g.out.join("train.jsonl"), &train)?;
            write_jsonl(g.out.join("eval.jsonl"), &eval)?;
            println!("wrote {} and {} records to {}", train.len(), eval.len(), g.out.display());
        }
        Command::Stats { dataset } => {
            let stats = dataset_stats(&load_jsonl(&dataset)?)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
        }
        Command::FinetuneGrid(c) => {
            let config = c.config()?;
            let (train, eval) = prepare_data(&config)?;
            let mut meter = Meter::new(config.meter.clone())?;
            let (out, trained) = run_finetune_grid(&config, &train, &eval, &mut meter)?;
            save_finetune(&config.out_dir, &out, &trained)?;
            print_records(&out.records);
        }
        Command::Rank(c) => {
            let config = c.config()?;
            let (mut out, _) = load_finetune(&config.out_dir)?;
            let baseline = out.baseline().energy.clone();
            rescore(&mut out.records, &baseline, config.w)?;
            let top = select_top_k(&out.records, &config.weights()).map_err(|e| PipelineError::Stage {
                stage: "rank",
                detail: e.to_string(),
            })?;
            save_topk(&config.out_dir, &top)?;
            print_records(&top);
        }
        Command::PruneGrid(c) => {
            let config = c.config()?;
            let (out, trained) = load_finetune(&config.out_dir)?;
            let top = select_trained(&load_topk(&config.out_dir)?, trained);
            let (_, eval) = prepare_data(&config)?;
            let mut meter = Meter::new(config.meter.clone())?;
            let prune = run_prune_grid(&config, &top, &eval, &out.baseline().energy, &mut meter)?;
            save_prune(&config.out_dir, &prune)?;
            print_records(&[prune.retained, prune.pruned].concat());
        }
        Command::Report(c) => {
            let config = c.config()?;
            let (mut out, _) = load_finetune(&config.out_dir)?;
            let mut prune = load_prune(&config.out_dir)?;
            let baseline = out.baseline().energy.clone();
            rescore(&mut out.records, &baseline, config.w)?;
            rescore(&mut prune.retained, &baseline, config.w)?;
            rescore(&mut prune.pruned, &baseline, config.w)?;
            let report = build_report(&config, &out, &prune, config.meter.source.name(), 0.0);
            emit_report(&report, &config.out_dir)?;
            print_report(&report, &config.out_dir);
        }
        Command::RunAll(c) => {
            let config = c.config()?;
            let report = run_all(&config)?;
            print_report(&report, &config.out_dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
