//! `ebmc`: generate data, train, evaluate, ablate, probe robustness, aggregate.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime abort.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ebmc_core::trainer::checkpoint;
use ebmc_core::trainer::config::content_hash;
use ebmc_core::trainer::{
    aggregate, condition_batch, evaluate, read_metrics_csv, run_ablation, run_robustness, train, write_energy_csv,
    write_metrics_csv, write_runlog, write_trust_csv, Condition, MetricRow, Protocol, RunHeader, TrainedRun,
};
use ebmc_core::{Ablation, Dataset, Error, GeneratorSpec, Module, Result, RunPlan, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "ebmc", version, about = "Energy-balanced multimodal training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a train/test dataset and its Bayes oracle.
    Generate(GenerateArgs),
    /// Run both training stages and write the run artifacts.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split under one condition.
    Eval(EvalArgs),
    /// Train the full model next to module ablations under one seed.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint under a robustness protocol.
    Robust(RobustArgs),
    /// Aggregate run directories into mean and std tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Generator spec JSON; defaults to the imbalanced text/visual/audio spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training samples; defaults to classes × samples_per_class.
    #[arg(long)]
    n: Option<usize>,
    /// Test samples.
    #[arg(long, default_value_t = 4000)]
    test_n: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Modules to disable, comma separated (msd, cce, emc, imtd).
    #[arg(long)]
    disable: Option<String>,
    /// Defaults to `<ablation>-seed<seed>`.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `full`, `modality:<a+b>` or `dropout:<p>`.
    #[arg(long, default_value = "full")]
    condition: String,
    /// Seed for stochastic conditions; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation to compare against the full model, comma separated.
    #[arg(long, conflicts_with = "sweep")]
    disable: Option<String>,
    /// Compare against every single-module ablation.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args, Debug)]
struct RobustArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `modality-missing` or `feature-dropout`.
    #[arg(long)]
    protocol: String,
    /// Dropout mask seed; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run directories, each holding a metrics.csv.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: &'a str,
    config_path: &'a Path,
    spec_path: PathBuf,
    out_dir: &'a Path,
    config_hash: &'a str,
    seed: u64,
    ablation: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Robust(a) => cmd_robust(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = TrainConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn parse_ablation(disable: Option<&str>) -> Result<Ablation> {
    disable.map_or(Ok(Ablation::full()), str::parse)
}

fn print_conditions(title: &str, conditions: &[Condition]) {
    let mut metrics: Vec<&str> = Vec::new();
    for c in conditions {
        for (m, _) in &c.entries {
            if !metrics.contains(&m.as_str()) {
                metrics.push(m);
            }
        }
    }
    let width = conditions.iter().map(|c| c.name.len()).max().unwrap_or(0).max(9);
    let mut out = format!("{title}\n{:<width$}", "condition");
    for m in &metrics {
        let _ = write!(out, "  {m:>10}");
    }
    for c in conditions {
        let _ = write!(out, "\n{:<width$}", c.name);
        for m in &metrics {
            match c.get(m) {
                Some(v) => {
                    let _ = write!(out, "  {v:>10.4}");
                }
                None => {
                    let _ = write!(out, "  {:>10}", "-");
                }
            }
        }
    }
    println!("{out}");
}

fn condition_rows(run_id: &str, seed: u64, conditions: &[Condition]) -> Vec<MetricRow> {
    conditions
        .iter()
        .flat_map(|c| MetricRow::from_record(run_id, &c.name, seed, &c.entries))
        .collect()
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
            serde_json::from_str::<GeneratorSpec>(&body)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => GeneratorSpec::default_imbalanced(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let n = a.n.unwrap_or_else(|| spec.train_size());
    if n == 0 || a.test_n == 0 {
        return Err(Error::Config("--n and --test-n must be >= 1".into()));
    }
    let data = Dataset::generate(&spec, n, a.test_n)?;
    let spec_json = serde_json::to_string(&spec).expect("spec serializes");
    let header = RunHeader {
        run_id: format!("data-seed{}", spec.seed),
        config_hash: content_hash(&spec_json),
    };
    data.write(&a.out, &header)?;
    let oracle = data.oracle()?;
    println!(
        "wrote {} train / {} test samples to {}; Bayes accuracy (all modalities) {:.4}",
        n,
        a.test_n,
        a.out.display(),
        oracle.bayes_accuracy_full
    );
    Ok(())
}

/// Writes checkpoint, logs and metrics for one trained run into `dir`.
fn write_run(dir: &Path, header: &RunHeader, plan: &RunPlan, run: &TrainedRun, rows: &[MetricRow]) -> Result<()> {
    create_dir(dir)?;
    checkpoint::save(&dir.join("checkpoint.json"), &run.model, header, Some(plan))?;
    write_runlog(&dir.join("runlog.jsonl"), header, &run.log)?;
    write_energy_csv(&dir.join("energy.csv"), header, &run.log)?;
    write_trust_csv(&dir.join("trust.csv"), header, &run.log)?;
    write_metrics_csv(&dir.join("metrics.csv"), header, rows)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let ablation = parse_ablation(a.disable.as_deref())?;
    let data = Dataset::read(&a.data)?;
    let seed = cfg.train.seed;
    let run_id = a.run_id.unwrap_or_else(|| format!("{}-seed{seed}", ablation.label()));
    let header = RunHeader::new(&run_id, &cfg);
    let plan = RunPlan::new(cfg, ablation);

    let run = train(&plan, &data)?;
    let full = Condition {
        name: "full".into(),
        entries: evaluate(&run.model, &plan, &data.test)?.entries(),
    };
    let rows = condition_rows(&run_id, seed, std::slice::from_ref(&full));
    write_run(&a.out, &header, &plan, &run, &rows)?;
    write_file(&a.out.join("config.toml"), &format!("# {}\n{}", header.line(), plan.cfg.to_toml()))?;
    let manifest = Manifest {
        run_id: &run_id,
        config_path: &a.config,
        spec_path: a.data.join("spec.json"),
        out_dir: &a.out,
        config_hash: &header.config_hash,
        seed,
        ablation: plan.ablation.label(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&a.out.join("manifest.json"), &format!("# {}\n{json}\n", header.line()))?;
    print_conditions(&format!("run {run_id}"), &[full]);
    Ok(())
}

/// Checkpoint plus the plan it was trained under.
fn load_checkpoint(path: &Path) -> Result<(ebmc_core::EbmcModel, RunHeader, RunPlan)> {
    let loaded = checkpoint::load(path)?;
    let plan = loaded
        .plan
        .ok_or_else(|| Error::format(path, "checkpoint carries no training plan"))?;
    let header = loaded
        .header
        .unwrap_or_else(|| RunHeader::new(path.display().to_string(), &plan.cfg));
    Ok((loaded.model, header, plan))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, header, plan) = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::read(&a.data)?;
    let seed = a.seed.unwrap_or(plan.seed());
    let batch = condition_batch(&data.test, &a.condition, seed)?;
    let cond = Condition {
        name: a.condition.clone(),
        entries: evaluate(&model, &plan, &batch)?.entries(),
    };
    create_dir(&a.out)?;
    let rows = condition_rows(&header.run_id, seed, std::slice::from_ref(&cond));
    write_metrics_csv(&a.out.join("metrics.csv"), &header, &rows)?;
    print_conditions(&format!("eval {}", header.run_id), &[cond]);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let seed = cfg.train.seed;
    let mut ablations = vec![Ablation::full()];
    if a.sweep {
        ablations.extend(Module::ALL.iter().map(|m| Ablation::without(&[*m])));
    } else if let Some(d) = &a.disable {
        let other = parse_ablation(Some(d))?;
        if other != Ablation::full() {
            ablations.push(other);
        }
    }
    let data = Dataset::read(&a.data)?;
    let header = RunHeader::new(format!("ablate-seed{seed}"), &cfg);
    let results = run_ablation(&cfg, &data, &ablations)?;

    let mut conditions = Vec::new();
    for r in &results {
        let label = r.ablation.label();
        let plan = RunPlan::new(cfg.clone(), r.ablation.clone());
        let cond = Condition {
            name: label.clone(),
            entries: r.metrics.entries(),
        };
        let sub_header = RunHeader::new(format!("{label}-seed{seed}"), &cfg);
        let rows = condition_rows(&sub_header.run_id, seed, std::slice::from_ref(&cond));
        write_run(&a.out.join(&label), &sub_header, &plan, &r.run, &rows)?;
        conditions.push(cond);
    }
    write_metrics_csv(&a.out.join("metrics.csv"), &header, &condition_rows(&header.run_id, seed, &conditions))?;
    print_conditions(&format!("ablation, seed {seed}"), &conditions);
    Ok(())
}

fn cmd_robust(a: RobustArgs) -> Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    let (model, header, mut plan) = load_checkpoint(&a.checkpoint)?;
    if let Some(s) = a.seed {
        plan.cfg.train.seed = s;
    }
    let data = Dataset::read(&a.data)?;
    let conditions = run_robustness(&model, &plan, &data.test, protocol)?;
    create_dir(&a.out)?;
    let rows = condition_rows(&header.run_id, plan.seed(), &conditions);
    write_metrics_csv(&a.out.join("metrics.csv"), &header, &rows)?;
    print_conditions(&format!("{} on {}", a.protocol, header.run_id), &conditions);
    Ok(())
}

/// Concatenates a per-run CSV with a leading run_id column.
fn merge_csv(runs: &[(PathBuf, RunHeader)], file: &str, header: &RunHeader) -> Result<Option<String>> {
    let mut body = String::new();
    for (dir, h) in runs {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let columns = lines.next().unwrap_or_default();
        if body.is_empty() {
            let _ = writeln!(body, "# {}\nrun_id,{columns}", header.line());
        }
        for l in lines {
            let _ = writeln!(body, "{},{l}", h.run_id);
        }
    }
    Ok((!body.is_empty()).then_some(body))
}

/// Loss trajectories from runlog.jsonl, one row per run and epoch.
fn loss_csv(runs: &[(PathBuf, RunHeader)], header: &RunHeader) -> Result<Option<String>> {
    const PARTS: [&str; 6] = ["l_task", "l_msd", "l_cce", "l_emc", "l_imtd", "l_total"];
    let mut body = format!("# {}\nrun_id,epoch,stage,{}\n", header.line(), PARTS.join(","));
    let mut any = false;
    for (dir, h) in runs {
        let path = dir.join("runlog.jsonl");
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::format(&path, e.to_string()))?;
            let _ = write!(body, "{},{},{}", h.run_id, v["epoch"], v["stage"]);
            for p in PARTS {
                let _ = write!(body, ",{}", v["losses"][p]);
            }
            body.push('\n');
            any = true;
        }
    }
    Ok(any.then_some(body))
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    let mut dirs = Vec::new();
    for dir in &a.runs {
        let (h, rows) = read_metrics_csv(&dir.join("metrics.csv"))?;
        dirs.push((dir.clone(), h.clone()));
        runs.push((h, rows));
    }
    let report = aggregate(&runs)?;
    let header = RunHeader {
        run_id: "report".into(),
        config_hash: report.config_hash.clone(),
    };
    create_dir(&a.out)?;
    write_file(&a.out.join("report.csv"), &format!("# {}\n{}", header.line(), report.to_csv()))?;
    if let Some(text) = loss_csv(&dirs, &header)? {
        write_file(&a.out.join("losses.csv"), &text)?;
    }
    for file in ["energy.csv", "trust.csv"] {
        if let Some(text) = merge_csv(&dirs, file, &header)? {
            write_file(&a.out.join(file), &text)?;
        }
    }
    println!("{}", report.to_table());
    Ok(())
}
