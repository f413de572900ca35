use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fdr_core::gradcheck;
use fdr_core::lm::DEFAULT_TEMPERATURE;
use fdr_core::synth::{dataset_stats, generate_dataset, read_jsonl, validate_records, write_jsonl};
use fdr_core::train::{
    self, consistency, evaluate_model, infer, load_model, render_summary, run_ablation, save_model, summarize,
    write_trace_csv, Variant,
};
use fdr_core::{Error, EvalOptions, Result, Sample, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fdr",
    version,
    about = "Forgery detection with staged reasoning on synthetic images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled dataset as JSON Lines.
    Synth(SynthArgs),
    /// Parse every annotation and report format errors.
    Validate(DatasetArgs),
    /// Label, attribute and length statistics of a dataset.
    Stats(StatsArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Generate for one sample and print both verdicts.
    Infer(InferArgs),
    /// Train and evaluate a grid of variants over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic and numeric gradients module by module.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    real: usize,
    #[arg(long, default_value_t = 100)]
    fake: usize,
    /// 0 gives the strongest artifacts, 1 none at all.
    #[arg(long, default_value_t = 0.3)]
    difficulty: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Also write the statistics as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// TrainConfig JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Where to write the trained model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print losses every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the consistency protocol with this many rounds per sample.
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, default_value_t = 256)]
    max_len: usize,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Sample id; defaults to the first record.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Training set.
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out set.
    #[arg(long)]
    eval_dataset: PathBuf,
    /// Base TrainConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Variant names; defaults to the full grid.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Per-run reports and per-variant means as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    read_jsonl(path)?
        .iter()
        .map(|r| {
            Sample::from_record(r).map_err(|e| Error::DatasetIntegrity {
                id: r.id.clone(),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

fn synth_cmd(a: SynthArgs) -> Result<ExitCode> {
    let samples = generate_dataset(a.seed, a.real, a.fake, a.difficulty)?;
    let records: Vec<_> = samples.iter().map(|s| s.to_record()).collect();
    write_jsonl(&a.out, &records)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn validate_cmd(a: DatasetArgs) -> Result<ExitCode> {
    let report = validate_records(&read_jsonl(&a.dataset)?);
    println!(
        "records: {}  valid: {}  invalid: {}",
        report.total,
        report.valid,
        report.failures.len()
    );
    for (kind, n) in &report.counts {
        println!("  {kind:<24} {n}");
    }
    for (id, err) in &report.failures {
        println!("{id}: {err}");
    }
    Ok(if report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn stats_cmd(a: StatsArgs) -> Result<ExitCode> {
    let records = read_jsonl(&a.dataset)?;
    let samples: Vec<Sample> = records.iter().filter_map(|r| Sample::from_record(r).ok()).collect();
    if samples.len() < records.len() {
        eprintln!("skipped {} records that fail validation", records.len() - samples.len());
    }
    let docs: Vec<_> = samples.iter().map(|s| (s.label, &s.annotation)).collect();
    let stats = dataset_stats(&docs);
    print!("{}", stats.render());
    if let Some(out) = a.out {
        std::fs::write(out, serde_json::to_string_pretty(&stats)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(steps) = a.steps {
        config.steps = steps;
    }
    let data = load_samples(&a.dataset)?;
    let start = Instant::now();
    let outcome = train::train_with_progress(&config, &data, |r, _| {
        if a.log_every > 0 && (r.step + 1) % a.log_every == 0 {
            eprintln!(
                "step {:>6}  lm {:.4}  ce {:.4}  total {:.4}  [{:.0}s]",
                r.step + 1,
                r.lm_loss,
                r.ce_loss,
                r.total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    save_model(&a.checkpoint, &outcome.model, &config)?;
    if let Some(out) = &a.out {
        write_trace_csv(out, &outcome.trace)?;
    }
    println!(
        "trained {} steps, checkpoint at {}",
        config.steps,
        a.checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    let (config, model) = load_model(&a.checkpoint)?;
    let data = load_samples(&a.dataset)?;
    let opts = EvalOptions {
        temperature: a.temperature,
        seed: a.seed,
        max_len: a.max_len,
        tau: config.tau,
    };
    let (report, _) = evaluate_model(&model, &data, config.supervision, &opts)?;
    print!("{}", report.render_table());
    if let Some(rounds) = a.rounds {
        let pct = consistency(&model, &data, config.supervision, rounds, a.temperature, a.seed)?;
        println!(
            "inconsistency over {rounds} rounds at temperature {}: {pct:.2}%",
            a.temperature
        );
    }
    if let Some(out) = a.out {
        std::fs::write(out, report.to_json())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn infer_cmd(a: InferArgs) -> Result<ExitCode> {
    let (config, model) = load_model(&a.checkpoint)?;
    let data = load_samples(&a.dataset)?;
    let sample = match &a.id {
        Some(id) => data
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Config(format!("no sample with id {id}")))?,
        None => data.first().ok_or_else(|| Error::Config("dataset is empty".into()))?,
    };
    let encoded = model.encode_images(std::slice::from_ref(&sample.image))?;
    let opts = EvalOptions {
        temperature: a.temperature,
        seed: a.seed,
        tau: config.tau,
        ..Default::default()
    };
    let out = infer(&model, &encoded[0], config.supervision, &opts, a.seed)?;
    println!("{}", out.text);
    println!();
    println!("sample        {}", sample.id);
    println!("label         {}", sample.label);
    println!("text verdict  {}", out.text_verdict);
    println!("cpm verdict   {}", out.cpm_verdict);
    match out.p_fake {
        Some(p) => println!("p_fake        {p:.6}"),
        None => println!("p_fake        n/a (classification pattern not generated)"),
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd(a: AblateArgs) -> Result<ExitCode> {
    let mut base = load_config(a.config.as_deref())?;
    if let Some(steps) = a.steps {
        base.steps = steps;
    }
    let grid = Variant::standard_grid();
    let variants: Vec<Variant> = if a.variants.is_empty() {
        grid
    } else {
        a.variants
            .iter()
            .map(|name| {
                grid.iter()
                    .find(|v| &v.name == name)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown variant {name}")))
            })
            .collect::<Result<_>>()?
    };
    let train_data = load_samples(&a.dataset)?;
    let test_data = load_samples(&a.eval_dataset)?;
    let runs = run_ablation(
        &base,
        &variants,
        &a.seeds,
        &train_data,
        &test_data,
        &EvalOptions::default(),
        |r| {
            eprintln!(
                "{:<24} seed {:>3}  acc {:>6.2}  fail {:>6.2}  bleu1 {:.4}",
                r.variant, r.seed, r.report.accuracy_percent, r.report.fail_rate_percent, r.report.bleu1
            )
        },
    )?;
    let summary = summarize(&runs);
    print!("{}", render_summary(&summary));
    if let Some(out) = a.out {
        let json = serde_json::json!({ "runs": runs, "summary": summary });
        std::fs::write(out, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<ExitCode> {
    let entries = gradcheck::run_suite(a.seed)?;
    let mut ok = true;
    for e in &entries {
        ok &= e.passed();
        println!(
            "{:<34} max rel err {:.3e}  {}  ({:.2}s)",
            e.name,
            e.max_rel_error,
            if e.passed() { "ok" } else { "FAIL" },
            e.elapsed.as_secs_f64()
        );
    }
    println!("tolerance {:.0e}", gradcheck::TOLERANCE);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Validate(a) => validate_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
