use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use cislunar_sda::architecture::{optimize_architecture, Architecture, ArchitectureResult, CostBreakdown, CostEvaluator};
use cislunar_sda::config::{ConfigError, RunConfig, RunManifest, Task2Config};
use cislunar_sda::estimation::{write_trace, COMPONENT_NAMES};
use cislunar_sda::optimize::{write_history, Algorithm, OptimizerConfig};
use cislunar_sda::orbits::{Family, OrbitLibrary};
use cislunar_sda::tasking::{
    observers_from_architecture, run_task2, select_targets, write_assignments, InvalidReason, TargetMetrics,
};

const LIBRARY_FILE: &str = "library.csv";
const ARCHITECTURE_FILE: &str = "architecture.json";
const METRICS_FILE: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "cislunar-sda", version, about = "Cislunar observer-architecture design and sensor tasking")]
struct Cli {
    /// TOML run configuration; desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root under which each command creates its default output directory.
    #[arg(long, global = true, env = "CISLUNAR_SDA_OUT", default_value = "runs")]
    out_root: PathBuf,
    /// Override the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correct the seed orbits, continue each family, write the library CSV.
    Library(LibraryArgs),
    /// Static-target generation and architecture optimization.
    Task1(Task1Args),
    /// Sensor tasking with joint orbit-attitude estimation.
    Task2(Task2Args),
    /// Flatten run metrics into plot-ready CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct LibraryArgs {
    /// Seed CSV (family,x0,z0,vy0,period_guess); bundled seeds when omitted.
    #[arg(long)]
    seed_file: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Task1Args {
    /// Library CSV; built from the configured seeds when omitted.
    #[arg(long)]
    library: Option<PathBuf>,
    /// Repeatable: `--algo tpe --algo random`.
    #[arg(long = "algo")]
    algorithms: Vec<Algorithm>,
    #[arg(long)]
    evals: Option<usize>,
    /// Treat J as a cost to minimize instead of a reward.
    #[arg(long)]
    minimize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Task2Args {
    /// Task-1 output directory holding architecture.json and library.csv.
    #[arg(long)]
    observers_from: PathBuf,
    /// Number of targets.
    #[arg(long)]
    nt: Option<usize>,
    /// Tasking intervals, comma separated (`30m,1h,4h`).
    #[arg(long, value_delimiter = ',', value_parser = parse_interval_minutes)]
    tst: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A task1 or task2 output directory.
    run: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_interval_minutes(s: &str) -> Result<f64, String> {
    humantime::parse_duration(s.trim())
        .map(|d| d.as_secs_f64() / 60.0)
        .map_err(|e| format!("bad interval {s:?}: {e}"))
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Library(a) => cmd_library(cfg, a, &cli.out_root),
        Command::Task1(a) => cmd_task1(cfg, a, &cli.out_root),
        Command::Task2(a) => cmd_task2(cfg, a, &cli.out_root),
        Command::Report(a) => cmd_report(a).map_err(Failure::Runtime),
    }
}

fn prepare_dir(out: Option<PathBuf>, root: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let dir = out.unwrap_or_else(|| root.join(name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn read_library(path: &Path) -> anyhow::Result<OrbitLibrary> {
    let f = File::open(path).with_context(|| format!("opening library {}", path.display()))?;
    Ok(OrbitLibrary::read_csv(f, &path.display().to_string())?)
}

fn finish(mut manifest: RunManifest, started: Instant, dir: &Path, outputs: Vec<PathBuf>) -> anyhow::Result<()> {
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    manifest.outputs = outputs;
    let path = manifest.write(dir)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_library(mut cfg: RunConfig, a: LibraryArgs, root: &Path) -> Outcome<()> {
    let started = Instant::now();
    if a.seed_file.is_some() {
        cfg.library.seed_file = a.seed_file;
    }
    let seeds = cfg.library.seeds()?;
    if seeds.is_empty() {
        warn!("seed file holds no seeds; the library will be empty");
    }
    let dir = prepare_dir(a.out, root, "library")?;
    let c = cfg.constants.system();
    let (library, report) = cfg.library.build(&seeds, &c);
    let path = dir.join(LIBRARY_FILE);
    library
        .write_csv(BufWriter::new(File::create(&path).context("creating library CSV")?))
        .map_err(|e| anyhow!(e))?;
    for (family, n) in report.per_family.iter().filter(|(_, n)| *n > 0) {
        info!("{family}: {n} orbits");
    }
    let report_path = dir.join("library_report.json");
    write_json(&report_path, &report)?;
    let manifest = RunManifest::new("library", &cfg, vec![cfg.seed]);
    finish(manifest, started, &dir, vec![path, report_path])?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AlgorithmSummary {
    algorithm: Algorithm,
    evaluations: usize,
    best_j: f64,
    best: Option<Architecture>,
    best_cost: Option<CostBreakdown>,
}

#[derive(Serialize, Deserialize)]
struct Task1Summary {
    minimize: bool,
    n_targets: usize,
    library_size: usize,
    algorithms: Vec<AlgorithmSummary>,
    selected: Option<Algorithm>,
}

fn cmd_task1(mut cfg: RunConfig, a: Task1Args, root: &Path) -> Outcome<()> {
    let started = Instant::now();
    if !a.algorithms.is_empty() {
        cfg.task1.algorithms = a.algorithms;
    }
    if let Some(n) = a.evals {
        cfg.task1.optimizer.max_evals = n;
    }
    if a.library.is_some() {
        cfg.library.path = a.library;
    }
    cfg.task1.minimize |= a.minimize;
    cfg.validate()?;
    let c = cfg.constants.system();
    let sun = cfg.constants.sun()?;
    let library = match &cfg.library.path {
        Some(p) => read_library(p)?,
        None => {
            info!("no library given; building from the configured seeds");
            cfg.library.build(&cfg.library.seeds()?, &c).0
        }
    };
    let dir = prepare_dir(a.out, root, "task1")?;
    let mut outputs = Vec::new();
    let lib_path = dir.join(LIBRARY_FILE);
    library
        .write_csv(BufWriter::new(File::create(&lib_path).context("creating library CSV")?))
        .map_err(|e| anyhow!(e))?;
    outputs.push(lib_path);

    let t1 = &cfg.task1;
    let targets = t1.targets.generate(&c)?;
    let targets_path = dir.join("targets.csv");
    let mut w = csv::Writer::from_path(&targets_path).context("creating targets CSV")?;
    w.write_record(["x", "y", "z"]).context("writing targets")?;
    for p in &targets.points {
        w.serialize((p.x, p.y, p.z)).context("writing targets")?;
    }
    w.flush().context("writing targets")?;
    outputs.push(targets_path);

    let evaluator = CostEvaluator::new(&library, &targets, &t1.grid, &t1.policy, &sun, &c).map_err(|e| anyhow!(e))?;
    let mut results: Vec<ArchitectureResult> = Vec::new();
    for &algorithm in &t1.algorithms {
        let opt = OptimizerConfig {
            algorithm,
            seed: cfg.seed,
            ..t1.optimizer
        };
        info!("task1: {algorithm}, {} evaluations", opt.max_evals);
        let res = optimize_architecture(&evaluator, &opt, t1.minimize).map_err(|e| anyhow!(e))?;
        info!("task1: {algorithm} best J = {:?}", res.best_j());
        let hist = dir.join(format!("history_{algorithm}.csv"));
        write_history(BufWriter::new(File::create(&hist).context("creating history")?), &res.history)
            .map_err(|e| anyhow!(e))?;
        let json = dir.join(format!("result_{algorithm}.json"));
        write_json(&json, &res)?;
        outputs.extend([hist, json]);
        results.push(res);
    }
    let better = |x: f64, y: f64| if t1.minimize { x < y } else { x > y };
    let selected = results
        .iter()
        .filter(|r| r.best.is_some())
        .fold(None::<&ArchitectureResult>, |acc, r| match acc {
            Some(a) if !better(r.best_j(), a.best_j()) => Some(a),
            _ => Some(r),
        });
    if let Some(sel) = selected {
        let path = dir.join(ARCHITECTURE_FILE);
        write_json(&path, sel.best.as_ref().expect("filtered"))?;
        outputs.push(path);
    } else {
        warn!("no algorithm produced a valid architecture");
    }
    let summary = Task1Summary {
        minimize: t1.minimize,
        n_targets: targets.points.len(),
        library_size: library.len(),
        selected: selected.map(|r| r.algorithm),
        algorithms: results
            .iter()
            .map(|r| AlgorithmSummary {
                algorithm: r.algorithm,
                evaluations: r.history.len(),
                best_j: r.best_j(),
                best: r.best.clone(),
                best_cost: r.best_cost,
            })
            .collect(),
    };
    let path = dir.join("summary.json");
    write_json(&path, &summary)?;
    outputs.push(path);
    finish(RunManifest::new("task1", &cfg, vec![cfg.seed]), started, &dir, outputs)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Task2Metrics {
    tasking_interval_s: u64,
    n_observers: usize,
    n_targets: usize,
    mean_translational_coverage: f64,
    mean_rotational_coverage: f64,
    targets: Vec<TargetMetrics>,
    rejected: Vec<(InvalidReason, usize)>,
}

fn interval_label(minutes: f64) -> String {
    let s = Task2Config::interval_seconds(minutes);
    if s % 3600 == 0 {
        format!("tst_{}h", s / 3600)
    } else if s % 60 == 0 {
        format!("tst_{}m", s / 60)
    } else {
        format!("tst_{s}s")
    }
}

fn cmd_task2(mut cfg: RunConfig, a: Task2Args, root: &Path) -> Outcome<()> {
    let started = Instant::now();
    if let Some(n) = a.nt {
        cfg.task2.n_targets = n;
    }
    if !a.tst.is_empty() {
        cfg.task2.tasking_interval_minutes = a.tst;
    }
    cfg.validate()?;
    let arch_path = a.observers_from.join(ARCHITECTURE_FILE);
    let arch: Architecture = serde_json::from_reader(
        File::open(&arch_path).with_context(|| format!("opening {}", arch_path.display()))?,
    )
    .with_context(|| format!("parsing {}", arch_path.display()))?;
    let library = read_library(&a.observers_from.join(LIBRARY_FILE))?;
    let observers = observers_from_architecture(&arch, &library, Some(cfg.task2.n_observers)).map_err(|e| anyhow!(e))?;
    if observers.len() < cfg.task2.n_observers {
        return Err(Failure::Config(anyhow!(
            "architecture provides {} observers, {} requested",
            observers.len(),
            cfg.task2.n_observers
        )));
    }
    let c = cfg.constants.system();
    let sun = cfg.constants.sun()?;
    let seeds = cfg.library.seeds()?;
    let (target_library, _) = cfg.task2.target_library_config().build(&seeds, &c);
    let families: Vec<Family> = cfg.task2.families();
    let targets = select_targets(&target_library, &families, cfg.task2.n_targets, cfg.seed).map_err(|e| anyhow!(e))?;
    let dir = prepare_dir(a.out, root, "task2")?;
    let mut outputs = Vec::new();
    for &minutes in &cfg.task2.tasking_interval_minutes {
        let sub = dir.join(interval_label(minutes));
        fs::create_dir_all(sub.join("traces")).context("creating trace directory")?;
        let scenario = cfg.task2.scenario(observers.clone(), targets.clone(), minutes, cfg.seed, c, sun.clone());
        info!("task2: T_ST = {minutes} min, {} targets", targets.len());
        let res = run_task2(&scenario).map_err(|e| anyhow!(e))?;
        for (i, rows) in res.traces.iter().enumerate() {
            let p = sub.join("traces").join(format!("target_{i}.csv"));
            write_trace(BufWriter::new(File::create(&p).context("creating trace")?), rows).map_err(|e| anyhow!(e))?;
            outputs.push(p);
        }
        let p = sub.join("assignments.csv");
        write_assignments(BufWriter::new(File::create(&p).context("creating assignments")?), &res.assignments)
            .map_err(|e| anyhow!(e))?;
        outputs.push(p);
        let n = res.metrics.len().max(1) as f64;
        let metrics = Task2Metrics {
            tasking_interval_s: scenario.tasking_interval_s,
            n_observers: observers.len(),
            n_targets: targets.len(),
            mean_translational_coverage: res.metrics.iter().map(|m| m.metrics.translational_coverage()).sum::<f64>() / n,
            mean_rotational_coverage: res.metrics.iter().map(|m| m.metrics.rotational_coverage()).sum::<f64>() / n,
            targets: res.metrics,
            rejected: res.rejected,
        };
        info!(
            "task2: mean 3σ coverage translational {:.3}, rotational {:.3}",
            metrics.mean_translational_coverage, metrics.mean_rotational_coverage
        );
        let p = sub.join(METRICS_FILE);
        write_json(&p, &metrics)?;
        outputs.push(p);
        let mut sub_cfg = cfg.clone();
        sub_cfg.task2.tasking_interval_minutes = vec![minutes];
        finish(RunManifest::new("task2", &sub_cfg, vec![cfg.seed]), started, &sub, Vec::new())?;
    }
    finish(RunManifest::new("task2", &cfg, vec![cfg.seed]), started, &dir, outputs)?;
    Ok(())
}

fn metrics_dirs(run: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    if run.join(METRICS_FILE).exists() {
        dirs.push(run.to_path_buf());
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(run)
        .with_context(|| format!("reading {}", run.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(METRICS_FILE).exists())
        .collect();
    subs.sort();
    dirs.extend(subs);
    Ok(dirs)
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let out = a.out.unwrap_or_else(|| a.run.join("report"));
    fs::create_dir_all(&out)?;
    let mut wrote = false;

    let dirs = metrics_dirs(&a.run)?;
    if !dirs.is_empty() {
        let path = out.join("estimation_metrics.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["run", "target", "family", "component", "anees", "rmse", "sigma3_fraction"])?;
        for d in &dirs {
            let m: Task2Metrics = serde_json::from_reader(File::open(d.join(METRICS_FILE))?)?;
            let label = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            println!(
                "{label}: T_ST {} s, mean 3σ coverage translational {:.3}, rotational {:.3}",
                m.tasking_interval_s, m.mean_translational_coverage, m.mean_rotational_coverage
            );
            for t in &m.targets {
                for (k, name) in COMPONENT_NAMES.iter().enumerate() {
                    w.write_record([
                        label.clone(),
                        t.target.to_string(),
                        t.family.to_string(),
                        name.to_string(),
                        t.metrics.anees[k].to_string(),
                        t.metrics.rmse[k].to_string(),
                        t.metrics.sigma3_fraction[k].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        println!("wrote {}", path.display());
        wrote = true;
    }

    let summary_path = a.run.join("summary.json");
    if summary_path.exists() {
        let summary: Task1Summary = serde_json::from_reader(File::open(&summary_path)?)?;
        for s in &summary.algorithms {
            let r: ArchitectureResult =
                serde_json::from_reader(File::open(a.run.join(format!("result_{}.json", s.algorithm)))?)?;
            let path = out.join(format!("convergence_{}.csv", s.algorithm));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["trial", "reward", "best_so_far", "lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "j"])?;
            let best = cislunar_sda::optimize::OptimizationResult {
                best: None,
                history: r.history.clone(),
            }
            .best_so_far();
            for (i, trial) in r.history.iter().enumerate() {
                let mut rec = vec![i.to_string(), trial.reward.to_string(), best[i].to_string()];
                match r.trace.get(i) {
                    Some(c) => rec.extend([c.lambda1, c.lambda2, c.lambda3, c.lambda4, c.lambda5, c.j].map(|v| v.to_string())),
                    None => rec.extend(std::iter::repeat(String::new()).take(6)),
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
            println!("{}: best J {:e} over {} evaluations", s.algorithm, s.best_j, s.evaluations);
            println!("wrote {}", path.display());
        }
        wrote = true;
    }
    if !wrote {
        return Err(anyhow!("{} holds neither task1 nor task2 results", a.run.display()));
    }
    Ok(())
}
