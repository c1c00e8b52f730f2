use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use ovis_core::checkpoint;
use ovis_core::config::Config;
use ovis_core::data::{write_dataset, DataBundle, DataCounts};
use ovis_core::eval::{compare_report, evaluate, parse_rows, CompareRow};
use ovis_core::gradcheck::{model_suite, op_suite};
use ovis_core::model::{BridgeKind, OvisModel};
use ovis_core::pipeline::{dataset, heldout, run_pipeline, run_stage};
use ovis_core::tokenizer::sparsity_stats;
use ovis_core::train::{StageId, StepMetric};
use ovis_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ovis-toy", version, about = "Toy structural-embedding-alignment model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write caption, description, instruction and held-out record files.
    GenData(GenData),
    /// Run one training stage.
    Train(Train),
    /// Held-out accuracy of a checkpoint.
    Eval(Eval),
    /// Finite-difference gradient checks.
    GradCheck(GradCheck),
    /// Bucket probabilistic-token values by threshold.
    Sparsity(Sparsity),
    /// Train one bridge through all stages and print a comparison row.
    Compare(Compare),
    /// Merge comparison rows into a table.
    CompareReport(CompareReport),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    captions: Option<usize>,
    #[arg(long)]
    descriptions: Option<usize>,
    #[arg(long)]
    instructions: Option<usize>,
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Knobs shared by the training commands; each overrides the config file.
#[derive(Args)]
struct Knobs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct Train {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt_in: Option<PathBuf>,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// TSV metrics log, one line per step.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    TokenAccuracy,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "token-accuracy")]
    metric: Metric,
    /// Also print per-question accuracy.
    #[arg(long)]
    detail: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Model,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, value_enum, default_value = "ops")]
    scope: Scope,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random shape draws per op, or composed-model cases.
    #[arg(long)]
    cases: Option<usize>,
}

#[derive(Args)]
struct Sparsity {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-5,1e-6")]
    thresholds: Vec<f64>,
    /// Number of held-out images to tokenize.
    #[arg(long, default_value_t = 64)]
    images: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Ovis,
    Connector,
}

impl From<Arch> for BridgeKind {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Ovis => BridgeKind::Ovis,
            Arch::Connector => BridgeKind::Connector,
        }
    }
}

#[derive(Args)]
struct Compare {
    #[arg(long)]
    arch: Arch,
    #[arg(long)]
    data: PathBuf,
    /// Append the row to this TSV file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args)]
struct CompareReport {
    #[arg(required = true)]
    rows: Vec<PathBuf>,
}

/// Defaults, then the config file, then flags.
fn load_config(knobs: &Knobs) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &knobs.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &knobs.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = knobs.seed {
        cfg.seed = s;
    }
    if let Some(b) = knobs.batch_size {
        cfg.train.batch_size = b;
    }
    Ok(cfg)
}

struct MetricsLog(Option<BufWriter<File>>);

impl MetricsLog {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => Some(BufWriter::new(
                OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(p)?,
            )),
            None => None,
        }))
    }

    fn write(&mut self, m: &StepMetric) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{m}")?;
            w.flush()?;
        }
        Ok(())
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = Config::default();
    if let Some(path) = &a.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    let d = cfg.data;
    let counts = DataCounts {
        captions: a.captions.unwrap_or(d.captions),
        descriptions: a.descriptions.unwrap_or(d.descriptions),
        instructions: a.instructions.unwrap_or(d.instructions),
        heldout: a.heldout.unwrap_or(d.heldout),
    };
    write_dataset(a.seed.unwrap_or(cfg.seed), counts, &a.out)?;
    println!(
        "wrote {} captions, {} descriptions, {} instructions, {} held-out to {}",
        counts.captions,
        counts.descriptions,
        counts.instructions,
        counts.heldout,
        a.out.display()
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let stage = StageId::try_from(a.stage)?;
    let mut cfg = load_config(&a.knobs)?;
    if let Some(arch) = a.arch {
        cfg.model.bridge = arch.into();
    }
    let s = &mut cfg.train.stages[a.stage as usize - 1];
    if let Some(n) = a.steps {
        s.steps = n;
    }
    if let Some(lr) = a.lr {
        s.lr = lr;
    }
    let mut model = match &a.ckpt_in {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.stage + 1 != a.stage as u32 {
                return Err(Error::Checkpoint(format!(
                    "{} holds stage {}, stage {} needs stage {}",
                    p.display(),
                    ck.stage,
                    a.stage,
                    a.stage - 1
                )));
            }
            ck.model
        }
        None => OvisModel::new(cfg.model.clone(), cfg.seed)?,
    };
    let bundle = DataBundle::read(&a.data)?;
    let data = dataset(bundle.split(stage.dataset_kind()), &model)?;
    let mut log = MetricsLog::open(a.metrics.as_deref(), a.stage > 1)?;
    let run = run_stage(&mut model, stage, &cfg, &data, |m| log.write(m))?;
    checkpoint::save(&a.ckpt_out, &model, a.stage as u32)?;
    let last = run.outcome.metrics.last().map_or(f64::NAN, |m| m.loss);
    println!("stage {} done: {} steps, final loss {last:.4}", a.stage, run.outcome.metrics.len());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let Metric::TokenAccuracy = a.metric;
    let model = checkpoint::load(&a.ckpt)?.model;
    let bundle = DataBundle::read(&a.data)?;
    let report = evaluate(&model, &heldout(&bundle, &model)?)?;
    println!("token-accuracy\t{:.6}", report.overall.value());
    if a.detail {
        for (q, acc) in &report.per_question {
            println!("{}\t{:.6}", q.name(), acc.value());
        }
    }
    Ok(())
}

fn grad_check(a: GradCheck) -> Result<bool> {
    let results = match a.scope {
        Scope::Ops => op_suite(a.seed, a.cases.unwrap_or(6))?,
        Scope::Model => model_suite(a.seed, a.cases.unwrap_or(8), 24)?,
    };
    let mut ok = true;
    for r in &results {
        let pass = r.passed(a.tol);
        ok &= pass;
        println!("{}\t{r}", if pass { "ok" } else { "FAIL" });
    }
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!("{} checks, max relative error {worst:.3e}, tolerance {:e}", results.len(), a.tol);
    Ok(ok)
}

fn sparsity(a: Sparsity) -> Result<()> {
    let model = checkpoint::load(&a.ckpt)?.model;
    let bundle = DataBundle::read(&a.data)?;
    let data = heldout(&bundle, &model)?;
    let mut tokens = Vec::new();
    for s in data.samples.iter().take(a.images.max(1)) {
        if let Some(img) = &s.image {
            tokens.extend(model.visual_tokens(img)?);
        }
    }
    let report = sparsity_stats(&tokens, &a.thresholds)?;
    let table = format!("interval\tcount\tratio\n{report}");
    print!("{table}");
    if let Some(p) = &a.out {
        fs::write(p, &table)?;
    }
    Ok(())
}

fn compare(a: Compare) -> Result<()> {
    let mut cfg = load_config(&a.knobs)?;
    cfg.model.bridge = a.arch.into();
    let bundle = DataBundle::read(&a.data)?;
    let mut log = MetricsLog::open(a.metrics.as_deref(), false)?;
    let run = run_pipeline(&cfg, &bundle, |m| log.write(m))?;
    if let Some(p) = &a.ckpt_out {
        checkpoint::save(p, &run.model, 3)?;
    }
    let report = evaluate(&run.model, &heldout(&bundle, &run.model)?)?;
    let final_loss = run
        .stages
        .last()
        .and_then(|s| s.outcome.metrics.last())
        .map_or(f64::NAN, |m| m.loss);
    let row = CompareRow::new(cfg.model.bridge, cfg.seed, run.model.bridge_param_count(), &report, final_loss);
    println!("{}\n{row}", CompareRow::HEADER);
    if let Some(p) = &a.out {
        let fresh = !p.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(p)?;
        if fresh {
            writeln!(f, "{}", CompareRow::HEADER)?;
        }
        writeln!(f, "{row}")?;
    }
    Ok(())
}

fn compare_report_cmd(a: CompareReport) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.rows {
        rows.extend(parse_rows(&fs::read_to_string(p)?)?);
    }
    print!("{}", compare_report(&rows)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Cmd::Train(t) = &cli.cmd {
        if t.stage > 1 && t.ckpt_in.is_none() {
            Cli::command()
                .error(ErrorKind::MissingRequiredArgument, format!("--stage {} requires --ckpt-in", t.stage))
                .exit();
        }
    }
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a).map(|_| true),
        Cmd::Train(a) => train(a).map(|_| true),
        Cmd::Eval(a) => eval(a).map(|_| true),
        Cmd::GradCheck(a) => grad_check(a),
        Cmd::Sparsity(a) => sparsity(a).map(|_| true),
        Cmd::Compare(a) => compare(a).map(|_| true),
        Cmd::CompareReport(a) => compare_report_cmd(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
