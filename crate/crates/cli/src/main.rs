use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use ttasel::exec::Execution;
use ttasel::harness::{resolve, run_grid, ExperimentPlan, ResultsStore, RunOptions};
use ttasel::methods::MethodKind;
use ttasel::metrics::Metric;
use ttasel::report::{
    available_strategies, correlation_export, file_stem, load_experiments, online_trace, ranking_table, svg,
    win_matrix, Experiment, OutcomeTable,
};
use ttasel::selection::{select_per_seed, SeedAggregate, Strategy};
use ttasel::{Error, Result};

#[derive(Parser)]
#[command(name = "ttasel", version, about = "Hyperparameter selection benchmark for online test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Experiment plan utilities.
    Plan {
        #[command(subcommand)]
        action: PlanAction,
    },
    /// Execute every pending run of a plan.
    Run(RunArgs),
    /// Apply selection strategies to the runs in a store.
    Select(SelectArgs),
    /// Render tables and plots from a store.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
}

#[derive(Subcommand)]
enum PlanAction {
    /// Parse and validate a plan file, then print its hash and run count.
    Validate { file: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    plan: PathBuf,
    /// Results store root.
    #[arg(long, env = "TTASEL_STORE")]
    store: PathBuf,
    /// Discard corrupt run directories and recompute them.
    #[arg(long)]
    reset_corrupt: bool,
    /// Execute at most this many runs.
    #[arg(long)]
    max_runs: Option<usize>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SelectArgs {
    /// Store root or a single plan directory.
    store: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    /// Also write the per-seed choices to `<dir>/selection.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Store root or a single plan directory.
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to every strategy the stored runs support.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    /// Restrict to these methods.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Vec<MethodKind>,
}

#[derive(Subcommand)]
enum ReportKind {
    /// Pairwise strategy wins over (experiment, method) cells
    WinMatrix(ReportArgs),
    /// Mean rank of each method under each strategy
    Ranking(ReportArgs),
    /// Chosen accuracy and gap to ORACLE for every strategy
    Gaps(ReportArgs),
    /// Surrogate metric vs accuracy across configs, with Spearman's rho
    Correlation {
        #[command(flatten)]
        common: ReportArgs,
        #[arg(long, value_delimiter = ',', default_value = "entropy,consistency,snd")]
        metrics: Vec<MetricArg>,
    },
    /// Online best-config choice of each metric over the stream
    Trace {
        #[command(flatten)]
        common: ReportArgs,
        #[arg(long, value_delimiter = ',', default_value = "entropy,consistency,snd")]
        metrics: Vec<MetricArg>,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Entropy,
    Consistency,
    Snd,
    Accuracy,
    ProbeAccuracy,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Entropy => Metric::Entropy,
            MetricArg::Consistency => Metric::Consistency,
            MetricArg::Snd => Metric::Snd,
            MetricArg::Accuracy => Metric::Accuracy,
            MetricArg::ProbeAccuracy => Metric::ProbeAccuracy,
        }
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("unknown strategy `{s}`"))
}

fn parse_method(s: &str) -> std::result::Result<MethodKind, String> {
    MethodKind::parse(s).ok_or_else(|| format!("unknown method `{s}`"))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::CorruptStore { .. } | Error::StateFormat(_) => 3,
        Error::Plan(_)
        | Error::InvalidArgument(_)
        | Error::MissingField { .. }
        | Error::MissingDomain(_)
        | Error::MethodPrecondition { .. }
        | Error::Report(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan {
            action: PlanAction::Validate { file },
        } => validate(&file),
        Command::Run(args) => run(&args),
        Command::Select(args) => select(&args),
        Command::Report { kind } => report(kind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn validate(file: &Path) -> Result<()> {
    let plan = ExperimentPlan::load(file)?;
    println!("plan {} is valid: {} runs", plan.hash(), plan.units().len());
    Ok(())
}

fn base_dir(plan: &Path) -> PathBuf {
    match plan.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let plan = ExperimentPlan::load(&args.plan)?;
    let store = ResultsStore::new(&args.store);
    let options = RunOptions {
        execution: if args.sequential { Execution::Sequential } else { Execution::Parallel },
        reset_corrupt: args.reset_corrupt,
        max_runs: args.max_runs,
    };
    let out = run_grid(&plan, &base_dir(&args.plan), &store, &options)?;
    println!(
        "plan {}: {} executed, {} already complete, {} pending",
        out.plan_hash, out.executed, out.skipped, out.pending
    );
    Ok(())
}

fn experiments(path: &Path, methods: &[MethodKind]) -> Result<Vec<Experiment>> {
    let (store, hashes) = resolve(path)?;
    let mut exps = load_experiments(&store, &hashes)?;
    if !methods.is_empty() {
        for e in &mut exps {
            e.runs.retain(|r| methods.contains(&r.method));
        }
    }
    Ok(exps)
}

fn strategies_or_available(requested: &[Strategy], exps: &[Experiment]) -> Vec<Strategy> {
    if requested.is_empty() {
        available_strategies(exps)
    } else {
        requested.to_vec()
    }
}

#[derive(Serialize)]
struct SelectionRecord<'a> {
    experiment: &'a str,
    plan_hash: &'a str,
    selection: SeedAggregate,
}

fn select(args: &SelectArgs) -> Result<()> {
    let exps = experiments(&args.store, &[])?;
    let strategies = strategies_or_available(&args.strategies, &exps);
    let mut records = Vec::new();
    println!("experiment\tmethod\tstrategy\taccuracy\tstd\tgap");
    for e in &exps {
        for method in e.methods().into_iter().filter(|&m| m != MethodKind::Lame) {
            let runs = e.runs_of(method);
            for &s in &strategies {
                let agg = select_per_seed(s, &runs)?;
                println!(
                    "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}",
                    e.id,
                    method,
                    s,
                    100.0 * agg.mean_accuracy,
                    100.0 * agg.std_accuracy,
                    100.0 * agg.mean_gap
                );
                records.push(SelectionRecord {
                    experiment: &e.id,
                    plan_hash: &e.plan_hash,
                    selection: agg,
                });
            }
        }
    }
    if let Some(dir) = &args.out {
        let json = serde_json::to_string_pretty(&records)?;
        write(&dir.join("selection.json"), &json)?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn report(kind: ReportKind) -> Result<()> {
    match kind {
        ReportKind::WinMatrix(a) => {
            let exps = experiments(&a.store, &a.methods)?;
            let strategies = strategies_or_available(&a.strategies, &exps);
            let table = OutcomeTable::build(&exps, &strategies)?;
            let w = win_matrix(&table, &strategies, None)?;
            write(&a.out.join("win_matrix.csv"), &w.to_csv()?)?;
            let names: Vec<String> = strategies.iter().map(|s| s.to_string()).collect();
            let values: Vec<Vec<f64>> = w.counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
            let title = format!("Row matches or beats column ({} cells)", w.cells);
            write(&a.out.join("win_matrix.svg"), &svg::heatmap(&title, &names, &names, &values, 0))
        }
        ReportKind::Ranking(a) => {
            let exps = experiments(&a.store, &a.methods)?;
            let strategies = strategies_or_available(&a.strategies, &exps);
            let table = OutcomeTable::build(&exps, &strategies)?;
            let r = ranking_table(&table, &strategies, None)?;
            write(&a.out.join("ranking.csv"), &r.to_csv()?)?;
            let cols: Vec<String> = strategies.iter().map(|s| s.to_string()).collect();
            write(
                &a.out.join("ranking.svg"),
                &svg::heatmap("Average rank", &r.methods, &cols, &r.ranks, 2),
            )
        }
        ReportKind::Gaps(a) => {
            let exps = experiments(&a.store, &a.methods)?;
            let strategies = strategies_or_available(&a.strategies, &exps);
            let table = OutcomeTable::build(&exps, &strategies)?;
            write(&a.out.join("gaps.csv"), &table.to_csv()?)
        }
        ReportKind::Correlation { common: a, metrics } => correlation(&a, &metrics),
        ReportKind::Trace { common: a, metrics, repeat } => trace(&a, &metrics, repeat),
    }
}

fn correlation(a: &ReportArgs, metrics: &[MetricArg]) -> Result<()> {
    let exps = experiments(&a.store, &a.methods)?;
    let mut summary = String::from("experiment,method,metric,points,diverged,spearman\n");
    for e in &exps {
        for method in e.methods().into_iter().filter(|&m| m != MethodKind::Lame) {
            let runs = e.runs_of(method);
            for &m in metrics {
                let metric = Metric::from(m);
                let c = correlation_export(&runs, metric)?;
                let stem = file_stem(&["correlation", &e.id, method.name(), metric.name()]);
                write(&a.out.join(format!("{stem}.csv")), &c.to_csv()?)?;
                let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.metric, p.accuracy)).collect();
                let rho = c.spearman.map(|r| format!("{r:.3}")).unwrap_or_else(|| "undefined".into());
                let title = format!("{} {} on {}, Spearman {}", method, metric.name(), e.id, rho);
                write(
                    &a.out.join(format!("{stem}.svg")),
                    &svg::scatter(&title, metric.name(), "target accuracy (%)", &pts),
                )?;
                summary.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    e.id,
                    method,
                    metric.name(),
                    c.points.len(),
                    c.diverged.len(),
                    c.spearman.map(|r| format!("{r:.6}")).unwrap_or_default()
                ));
            }
        }
    }
    write(&a.out.join("correlation_summary.csv"), &summary)
}

fn trace(a: &ReportArgs, metrics: &[MetricArg], repeat: usize) -> Result<()> {
    let (store, _) = resolve(&a.store)?;
    let exps = experiments(&a.store, &a.methods)?;
    for e in &exps {
        for method in e.methods().into_iter().filter(|&m| m != MethodKind::Lame) {
            let mut logs = Vec::new();
            for r in e.runs_of(method).iter().filter(|r| r.repeat == repeat) {
                if r.diverged {
                    eprintln!("{} {} config {} diverged; left out of the trace", e.id, method, r.config_id());
                    continue;
                }
                logs.push((r.config_id(), store.read_log(&e.plan_hash, method, r.config_id(), repeat)?));
            }
            if logs.is_empty() {
                continue;
            }
            for &m in metrics {
                let metric = Metric::from(m);
                let t = online_trace(&logs, metric)?;
                let stem = file_stem(&["trace", &e.id, method.name(), metric.name()]);
                write(&a.out.join(format!("{stem}.csv")), &t.to_csv()?)?;
                let mut ids: Vec<usize> = logs.iter().map(|l| l.0).collect();
                ids.sort_unstable();
                let series: Vec<(String, Vec<(f64, f64)>)> = ids
                    .iter()
                    .map(|&id| {
                        let pts = t
                            .points
                            .iter()
                            .filter(|p| p.config_id == id)
                            .map(|p| (p.step as f64, p.cum_accuracy))
                            .collect();
                        (format!("config {id}"), pts)
                    })
                    .collect();
                let marks: Vec<(f64, f64)> =
                    t.points.iter().filter(|p| p.best).map(|p| (p.step as f64, p.cum_accuracy)).collect();
                let title = format!("{} on {}: best by {}", method, e.id, metric.name());
                write(
                    &a.out.join(format!("{stem}.svg")),
                    &svg::lines(&title, "step", "cumulative accuracy (%)", &series, &marks),
                )?;
            }
        }
    }
    Ok(())
}
