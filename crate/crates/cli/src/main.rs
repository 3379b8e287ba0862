//! `prism` command line: synthetic data, training, evaluation, calibration
//! and multi-seed reports. Exit status is 0 on success, 1 on a runtime
//! failure and 2 on a configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use prism_core::calibration::{write_reliability_csv, Method};
use prism_core::corpus::{generate_synthetic, save_docred, save_schema, save_stats, stats, SyntheticConfig};
use prism_core::metrics::{write_predictions, EvalReport};
use prism_core::pipeline::{
    calibrate_run, evaluate_split, load_splits, predict_set, train_run, CalibrationOutput, ExperimentConfig, Split,
};
use prism_core::trainer::{load_checkpoint, save_checkpoint, write_history, TrainOutcome};

const CHECKPOINT: &str = "checkpoint.bin";
const HISTORY: &str = "history.jsonl";
const EVAL: &str = "eval.json";
const PREDICTIONS: &str = "predictions.jsonl";
const CALIBRATION: &str = "calibration.json";
const RELIABILITY: &str = "reliability.csv";
const ECHO: &str = "config.echo";
const VOCAB: &str = "vocab.txt";
const TRAIN_SUMMARY: &str = "train_summary.json";
const REPORT: &str = "report.json";

#[derive(Parser, Debug)]
#[command(name = "prism", version, about = "Document-level relation extraction experiments")]
struct Cli {
    /// TOML file with [data], [encoder], [head], [train] and [calibration] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed or comma-separated seeds; several seeds use one `seed-N` subdirectory each.
    #[arg(long, global = true, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a long-tailed synthetic corpus in the DocRED layout.
    Synth(SynthArgs),
    /// Train one model per seed.
    Train(TrainArgs),
    /// Score a split with a trained checkpoint.
    Eval(EvalArgs),
    /// Calibration errors before and after post-hoc calibration.
    Calibrate(CalibrateArgs),
    /// Mean and standard deviation of eval and calibration results over seeds.
    Report,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    docs: Option<usize>,
    #[arg(long)]
    dev_docs: Option<usize>,
    #[arg(long)]
    test_docs: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    na: Option<f64>,
    #[arg(long)]
    zipf: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    prism: Option<Switch>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Train on a label-distribution-preserving subset of this many documents.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, default_value = "test")]
    split: String,
    /// Fixed decision threshold instead of the dev-optimal one.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, default_value = "test")]
    split: String,
    /// none, ts or cda-ts.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
}

/// What `config.echo` holds: the effective configuration of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Echo {
    seed: u64,
    #[serde(flatten)]
    experiment: ExperimentConfig,
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e
            .chain()
            .any(|c| matches!(c.downcast_ref::<prism_core::Error>(), Some(prism_core::Error::Config(_))));
        if config {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn config_error(msg: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{msg}"))
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("prism: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("prism: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    if cli.jobs == 0 {
        return Err(config_error("--jobs must be positive"));
    }
    if cli.seed.is_empty() {
        return Err(config_error("--seed needs at least one value"));
    }
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Calibrate(a) => calibrate(cli, a),
        Command::Report => report(cli),
    }
}

fn read_config(path: &Path) -> Outcome<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn read_echo(dir: &Path) -> Outcome<Echo> {
    let path = dir.join(ECHO);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Runtime)?;
    toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Output directory of each seed.
fn run_dirs(cli: &Cli) -> Vec<(u64, PathBuf)> {
    if cli.seed.len() == 1 {
        vec![(cli.seed[0], cli.out.clone())]
    } else {
        cli.seed.iter().map(|&s| (s, cli.out.join(format!("seed-{s}")))).collect()
    }
}

/// Runs `f` once per seed, on up to `--jobs` threads when there are several
/// seeds. Each call receives the worker count it may use itself.
fn for_each_seed<T: Send>(cli: &Cli, f: impl Fn(u64, &Path, usize) -> Outcome<T> + Sync) -> Outcome<Vec<T>> {
    let dirs = run_dirs(cli);
    let workers = cli.jobs.min(dirs.len());
    if workers <= 1 {
        return dirs.iter().map(|(s, d)| f(*s, d, cli.jobs)).collect();
    }
    let slots: Vec<Mutex<Option<Outcome<T>>>> = dirs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("seed queue");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some((s, d)) = dirs.get(i) else { break };
                let r = f(*s, d, 1);
                *slots[i].lock().expect("seed slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("seed slot").expect("every seed ran"))
        .collect()
}

fn synth(cli: &Cli, a: &SynthArgs) -> Outcome<()> {
    let mut cfg = match &cli.config {
        Some(p) => read_config(p)?.data.synthetic,
        None => SyntheticConfig::default(),
    };
    cfg.seed = cli.seed[0];
    if cli.seed.len() > 1 {
        return Err(config_error("synth takes a single seed"));
    }
    if let Some(v) = a.docs {
        cfg.documents = v;
    }
    if let Some(v) = a.dev_docs {
        cfg.dev_documents = v;
    }
    if let Some(v) = a.test_docs {
        cfg.test_documents = v;
    }
    if let Some(v) = a.relations {
        cfg.relations = v;
    }
    if let Some(v) = a.na {
        cfg.na_ratio = v;
    }
    if let Some(v) = a.zipf {
        cfg.zipf_exponent = v;
    }
    let corpus = generate_synthetic(&cfg).map_err(|e| Failure::from(anyhow::Error::from(e)))?;
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))
        .map_err(Failure::Runtime)?;
    let out = &cli.out;
    let write = || -> anyhow::Result<()> {
        save_docred(out.join("train.json"), &corpus.train)?;
        for (name, docs) in [("dev.json", &corpus.dev), ("test.json", &corpus.test)] {
            if !docs.is_empty() {
                save_docred(out.join(name), docs)?;
            }
        }
        save_schema(out.join("schema.json"), &corpus.schema)?;
        save_stats(out.join("stats.json"), &stats(&corpus.train, &corpus.schema))?;
        Ok(())
    };
    write().map_err(Failure::Runtime)?;
    if !cli.quiet {
        let s = stats(&corpus.train, &corpus.schema);
        println!(
            "wrote {} train / {} dev / {} test documents to {} (NA ratio {:.4})",
            corpus.train.len(),
            corpus.dev.len(),
            corpus.test.len(),
            out.display(),
            s.na_ratio
        );
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedSummary {
    seed: u64,
    best_epoch: usize,
    best_dev_f1: f64,
    threshold: f64,
    stopped_early: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Stat {
    mean: f64,
    std: f64,
}

/// Mean and population standard deviation.
fn stat(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome<()> {
    let mut cfg = match &cli.config {
        Some(p) => read_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.prism {
        cfg.head.prism = matches!(s, Switch::On);
    }
    if let Some(l) = a.lambda {
        cfg.head.lambda = l;
    }
    if a.subsample.is_some() {
        cfg.data.subsample = a.subsample;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate().map_err(|e| Failure::from(anyhow::Error::from(e)))?;
    let multi = cli.seed.len() > 1;
    let summaries = for_each_seed(cli, |seed, dir, jobs| {
        let splits = load_splits(&cfg.data, seed).map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::Runtime)?;
        let echo = Echo {
            seed,
            experiment: cfg.clone(),
        };
        let echo_text = toml::to_string(&echo).map_err(|e| Failure::Runtime(e.into()))?;
        fs::write(dir.join(ECHO), echo_text)
            .context("writing config echo")
            .map_err(Failure::Runtime)?;
        let quiet = cli.quiet;
        let mut progress = |r: &prism_core::trainer::EpochRecord| {
            if !quiet {
                eprintln!(
                    "seed {seed} epoch {:>3} loss {:.5} dev F1 {:.4} tolerance {}{}",
                    r.epoch,
                    r.loss,
                    r.dev_f1,
                    r.tolerance,
                    if r.best { " *" } else { "" }
                );
            }
        };
        let run = train_run::<f64>(&cfg, &splits, seed, jobs, &mut progress)
            .map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        let save = || -> anyhow::Result<()> {
            let tcfg = prism_core::trainer::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            save_checkpoint(dir.join(CHECKPOINT), &run.model, &tcfg, Some(run.threshold))?;
            write_history(dir.join(HISTORY), &run.outcome.history)?;
            fs::write(dir.join(VOCAB), run.model.vocab().to_text())?;
            Ok(())
        };
        save().map_err(Failure::Runtime)?;
        let TrainOutcome {
            best_epoch,
            best_dev_f1,
            stopped_early,
            ..
        } = run.outcome;
        Ok(SeedSummary {
            seed,
            best_epoch,
            best_dev_f1,
            threshold: run.threshold,
            stopped_early,
        })
    })?;
    let f1: Vec<f64> = summaries.iter().map(|s| s.best_dev_f1).collect();
    let dev = stat(&f1);
    if !cli.quiet {
        for s in &summaries {
            println!("seed {} best epoch {} dev F1 {:.4}", s.seed, s.best_epoch, s.best_dev_f1);
        }
        if multi {
            println!("dev F1 {:.4} ± {:.4} over {} seeds", dev.mean, dev.std, summaries.len());
        }
    }
    #[derive(Serialize)]
    struct Summary {
        runs: Vec<SeedSummary>,
        dev_f1: Stat,
    }
    fs::create_dir_all(&cli.out).map_err(|e| Failure::Runtime(e.into()))?;
    write_json(
        &cli.out.join(TRAIN_SUMMARY),
        &Summary {
            runs: summaries,
            dev_f1: dev,
        },
    )
    .map_err(Failure::Runtime)
}

/// Effective configuration for a command reading an existing run: the
/// `--config` file when given, otherwise the run's echo.
fn run_config(cli: &Cli, dir: &Path, seed: u64) -> Outcome<ExperimentConfig> {
    match &cli.config {
        Some(p) => read_config(p),
        None => {
            let echo = read_echo(dir)?;
            if echo.seed != seed {
                return Err(config_error(format!(
                    "{} was trained with seed {}, not {seed}",
                    dir.display(),
                    echo.seed
                )));
            }
            Ok(echo.experiment)
        }
    }
}

fn parse_split(s: &str) -> Outcome<Split> {
    s.parse::<Split>().map_err(|e| Failure::Config(e.into()))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome<()> {
    let which = parse_split(&a.split)?;
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(config_error(format!("threshold must lie in [0, 1], got {t}")));
        }
    }
    let reports = for_each_seed(cli, |seed, dir, jobs| {
        let cfg = run_config(cli, dir, seed)?;
        let splits = load_splits(&cfg.data, seed).map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        let (model, _) = load_checkpoint::<f64>(dir.join(CHECKPOINT))
            .with_context(|| format!("loading {}", dir.join(CHECKPOINT).display()))
            .map_err(Failure::Runtime)?;
        let report = evaluate_split(&model, &splits, which, a.threshold, jobs)
            .map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        let docs = model
            .prepare_all(splits.split(which))
            .map_err(|e| Failure::Runtime(e.into()))?;
        let (_, set) = predict_set(&model, &docs, jobs).map_err(|e| Failure::Runtime(e.into()))?;
        write_predictions(dir.join(PREDICTIONS), &set, report.threshold, false).map_err(|e| Failure::Runtime(e.into()))?;
        write_json(&dir.join(EVAL), &report).map_err(Failure::Runtime)?;
        Ok((seed, report))
    })?;
    if !cli.quiet {
        for (seed, r) in &reports {
            println!(
                "seed {seed} {:?}: θ {:.4} P {:.4} R {:.4} F1 {:.4} Ign F1 {:.4} Macro {:.4} Macro@500 {} Macro@200 {} Macro@100 {}",
                which,
                r.threshold,
                r.precision,
                r.recall,
                r.f1,
                r.ign_f1,
                r.macro_f1,
                opt(r.macro_at_500),
                opt(r.macro_at_200),
                opt(r.macro_at_100)
            );
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn calibrate(cli: &Cli, a: &CalibrateArgs) -> Outcome<()> {
    let which = parse_split(&a.split)?;
    let method = match &a.method {
        Some(m) => Some(m.parse::<Method>().map_err(|e| Failure::Config(e.into()))?),
        None => None,
    };
    let outputs = for_each_seed(cli, |seed, dir, jobs| {
        let mut cfg = run_config(cli, dir, seed)?;
        if let Some(m) = method {
            cfg.calibration.method = m;
        }
        if let Some(b) = a.bins {
            cfg.calibration.bins = b;
        }
        cfg.validate().map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        let splits = load_splits(&cfg.data, seed).map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        let (model, _) = load_checkpoint::<f64>(dir.join(CHECKPOINT))
            .with_context(|| format!("loading {}", dir.join(CHECKPOINT).display()))
            .map_err(Failure::Runtime)?;
        let out = calibrate_run(&model, &splits, &cfg.calibration, which, jobs)
            .map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        write_json(&dir.join(CALIBRATION), &out).map_err(Failure::Runtime)?;
        write_reliability_csv(dir.join(RELIABILITY), &out.calibrated.groups).map_err(|e| Failure::Runtime(e.into()))?;
        Ok((seed, out))
    })?;
    if !cli.quiet {
        for (seed, o) in &outputs {
            println!(
                "seed {seed} {:?}: ECE {:.6} ACE {:.6} uncalibrated; ECE {:.6} ACE {:.6} with {}",
                which,
                o.uncalibrated.ece,
                o.uncalibrated.ace,
                o.calibrated.ece,
                o.calibrated.ace,
                o.calibrated.method
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Report {
    seeds: Vec<u64>,
    f1: Option<Stat>,
    ign_f1: Option<Stat>,
    #[serde(rename = "macro")]
    macro_f1: Option<Stat>,
    macro_at_500: Option<Stat>,
    macro_at_200: Option<Stat>,
    macro_at_100: Option<Stat>,
    ece: Option<Stat>,
    ace: Option<Stat>,
    calibrated_ece: Option<Stat>,
    calibrated_ace: Option<Stat>,
}

fn report(cli: &Cli) -> Outcome<()> {
    let mut evals: Vec<EvalReport> = Vec::new();
    let mut cals: Vec<CalibrationOutput> = Vec::new();
    for (_, dir) in run_dirs(cli) {
        let e = dir.join(EVAL);
        if e.exists() {
            evals.push(read_json(&e).map_err(Failure::Runtime)?);
        }
        let c = dir.join(CALIBRATION);
        if c.exists() {
            cals.push(read_json(&c).map_err(Failure::Runtime)?);
        }
    }
    if evals.is_empty() && cals.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "no {EVAL} or {CALIBRATION} found under {}; run eval or calibrate first",
            cli.out.display()
        )));
    }
    let complete = |n: usize| n == cli.seed.len();
    let over = |v: Vec<f64>| (!v.is_empty()).then(|| stat(&v));
    let e = |f: &dyn Fn(&EvalReport) -> f64| complete(evals.len()).then(|| stat(&evals.iter().map(f).collect::<Vec<_>>()));
    let bucket = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
        if !complete(evals.len()) {
            return None;
        }
        over(evals.iter().filter_map(f).collect())
    };
    let c = |f: &dyn Fn(&CalibrationOutput) -> f64| complete(cals.len()).then(|| stat(&cals.iter().map(f).collect::<Vec<_>>()));
    let r = Report {
        seeds: cli.seed.clone(),
        f1: e(&|r| r.f1),
        ign_f1: e(&|r| r.ign_f1),
        macro_f1: e(&|r| r.macro_f1),
        macro_at_500: bucket(&|r| r.macro_at_500),
        macro_at_200: bucket(&|r| r.macro_at_200),
        macro_at_100: bucket(&|r| r.macro_at_100),
        ece: c(&|o| o.uncalibrated.ece),
        ace: c(&|o| o.uncalibrated.ace),
        calibrated_ece: c(&|o| o.calibrated.ece),
        calibrated_ace: c(&|o| o.calibrated.ace),
    };
    if !complete(evals.len()) || !complete(cals.len()) {
        eprintln!(
            "prism: found {} eval and {} calibration results for {} seeds; incomplete metrics are omitted",
            evals.len(),
            cals.len(),
            cli.seed.len()
        );
    }
    write_json(&cli.out.join(REPORT), &r).map_err(Failure::Runtime)?;
    if !cli.quiet {
        let show = |name: &str, s: &Option<Stat>| {
            if let Some(s) = s {
                println!("{name:<16} {:.4} ± {:.4}", s.mean, s.std);
            }
        };
        show("F1", &r.f1);
        show("Ign F1", &r.ign_f1);
        show("Macro", &r.macro_f1);
        show("Macro@500", &r.macro_at_500);
        show("Macro@200", &r.macro_at_200);
        show("Macro@100", &r.macro_at_100);
        show("ECE", &r.ece);
        show("ACE", &r.ace);
        show("ECE calibrated", &r.calibrated_ece);
        show("ACE calibrated", &r.calibrated_ace);
    }
    Ok(())
}
