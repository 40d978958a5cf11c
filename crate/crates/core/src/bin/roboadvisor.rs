//! Command-line access to every pipeline stage and experiment.
//!
//! Exit status: 0 on success, 2 on invalid input, 1 on runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use roboadvisor::analytics::risk_aversion;
use roboadvisor::elicitation::{
    build_scenarios, elicit_all, elicit_optimistic_with, elicit_pessimistic_with, AnswerSheet, AnswerSheetFile,
    BenchmarkSpec, ElicitSettings, ElicitedUtility, Estimator,
};
use roboadvisor::io::{
    load_item_set, load_questionnaire, load_ratings, load_returns, read_json, write_json, write_runs_csv,
    write_summary_csv, write_wealth_csv,
};
use roboadvisor::kantorovich::{kantorovich_closed_form, kantorovich_dual_socp, kantorovich_socp, DistanceMethod};
use roboadvisor::lfm::{fit_lfm, LfmConfig, LfmModel};
use roboadvisor::lottery::{build_breakpoints, ItemSet};
use roboadvisor::portfolio::{optimize_on_panel, run_backtest, BacktestConfig, PortfolioSpec};
use roboadvisor::questionnaire::{select_pairs_random, select_pairs_spq, Provenance};
use roboadvisor::service::{self, ApiConfig};
use roboadvisor::sim::{run_convergence, run_spq_vs_random, ExperimentConfig, ExperimentReport, GridPolicy};
use roboadvisor::utility::PwlUtility;
use roboadvisor::{Error, Result};

#[derive(Parser)]
#[command(name = "roboadvisor", version, about = "Expected-utility robo-advisor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the latent factor model to a ratings CSV (user_id,item_id,rating; ratings in [0,10]).
    FitLfm(FitLfmArgs),
    /// Select K question pairs by SPQ (needs --ratings or --model) or uniformly at random.
    ///
    /// Prints the questionnaire id that answer sheets must quote.
    GenQuestionnaire(GenQuestionnaireArgs),
    /// Elicit nominal utilities from an answer sheet and write utility JSONs plus risk tables.
    Elicit(ElicitArgs),
    /// Kantorovich distance between two utility JSONs on the same grid.
    Distance(DistanceArgs),
    /// Optimal allocation of a budget for one utility over a trailing returns window.
    Portfolio(PortfolioArgs),
    /// Rolling-window backtest of one or more utilities.
    Backtest(BacktestArgs),
    /// Virtual-user experiments.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct LfmArgs {
    /// Latent dimension.
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
}

impl LfmArgs {
    fn config(&self, seed: u64) -> LfmConfig {
        LfmConfig {
            dim: self.dim,
            lambda_user: self.lambda,
            lambda_item: self.lambda,
            max_iters: self.max_iters,
            seed,
            ..LfmConfig::default()
        }
    }
}

#[derive(Args)]
struct FitLfmArgs {
    /// Item set JSON.
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    ratings: PathBuf,
    #[command(flatten)]
    lfm: LfmArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model JSON output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Spq,
    Random,
}

#[derive(Args)]
struct GenQuestionnaireArgs {
    #[arg(long)]
    items: PathBuf,
    /// Number of pairs.
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Method::Spq)]
    method: Method,
    /// Ratings CSV; the model is fitted with --seed.
    #[arg(long, conflicts_with = "model")]
    ratings: Option<PathBuf>,
    /// Previously fitted model JSON.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    lfm: LfmArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Questionnaire JSON output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Pessimistic,
    Optimistic,
    Neutral,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    /// Outcomes of the questionnaire's items.
    Questionnaire,
    /// Every outcome of the item set.
    ItemSet,
}

#[derive(Args)]
struct ElicitArgs {
    #[arg(long)]
    items: PathBuf,
    /// Questionnaire JSON the answers refer to.
    #[arg(long)]
    questionnaire: PathBuf,
    /// Answer sheet JSON: {"questionnaire_id", "answers": [{"pair_index", "choice": "first"|"second"|"none"}]}.
    #[arg(long)]
    answers: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::All)]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = GridArg::Questionnaire)]
    grid: GridArg,
    /// Upper end of the utility domain; defaults to the item set's largest outcome.
    #[arg(long)]
    upper: Option<f64>,
    /// Relax inconsistent answers by their least total violation instead of failing.
    #[arg(long)]
    relax: bool,
    /// Output directory for <estimator>.json, summary.csv and risk.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    ClosedForm,
    Socp,
    DualSocp,
}

#[derive(Args)]
struct DistanceArgs {
    #[arg(long)]
    u: PathBuf,
    #[arg(long)]
    v: PathBuf,
    #[arg(long, value_enum, default_value_t = DistanceArg::ClosedForm)]
    method: DistanceArg,
    /// Optional JSON output; the value is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PortfolioArgs {
    /// Utility JSON.
    #[arg(long)]
    utility: PathBuf,
    /// Net-returns CSV: date column then one column per risky asset.
    #[arg(long)]
    returns: PathBuf,
    #[arg(long)]
    budget: f64,
    /// Cap on each risky asset as a fraction of the budget.
    #[arg(long, default_value_t = 0.4)]
    cap_fraction: f64,
    #[arg(long, default_value_t = 60)]
    window: usize,
    /// Rows of the panel before the decision date; defaults to the whole panel.
    #[arg(long)]
    end: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BacktestArgs {
    #[arg(long)]
    returns: PathBuf,
    /// Utility JSON; repeatable. Curves are labelled by the file's estimator or file stem.
    #[arg(long = "utility", required = true)]
    utilities: Vec<PathBuf>,
    #[arg(long, default_value_t = 60)]
    window: usize,
    #[arg(long, default_value_t = 7)]
    hold: usize,
    #[arg(long, default_value_t = 10_000.0)]
    initial_wealth: f64,
    #[arg(long, default_value_t = 0.4)]
    cap_fraction: f64,
    /// Wealth CSV (date,estimator,wealth); rebalances go to a sibling .json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    items: PathBuf,
    /// Questionnaire sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    k: Vec<usize>,
    #[arg(long)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    raters: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = GridArg::Questionnaire)]
    grid: GridArg,
    /// Output directory for runs CSV, summary CSV and report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// SPQ against random questionnaires at each K.
    SpqVsRandom(ExperimentArgs),
    /// Random questionnaires of growing size.
    Convergence(ExperimentArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// TOML configuration; ADVISOR_BIND and ADVISOR_DATA_DIR override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    ratings: Option<PathBuf>,
    #[arg(long)]
    returns: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn grid_policy(g: GridArg) -> GridPolicy {
    match g {
        GridArg::Questionnaire => GridPolicy::Questionnaire,
        GridArg::ItemSet => GridPolicy::ItemSet,
    }
}

fn fit_lfm_cmd(a: FitLfmArgs) -> Result<()> {
    let items = load_item_set(&a.items)?;
    let ratings = load_ratings(&a.ratings, &items)?;
    let model = fit_lfm(&ratings, &a.lfm.config(a.seed))?;
    write_json(&a.out, &model)
}

fn gen_questionnaire(a: GenQuestionnaireArgs) -> Result<()> {
    let items = load_item_set(&a.items)?;
    let q = match a.method {
        Method::Random => select_pairs_random(&items, a.k, a.seed)?,
        Method::Spq => {
            let model: LfmModel = match (&a.model, &a.ratings) {
                (Some(m), _) => read_json(m)?,
                (None, Some(r)) => fit_lfm(&load_ratings(r, &items)?, &a.lfm.config(a.seed))?,
                (None, None) => return Err(Error::Validation("SPQ needs --ratings or --model".into())),
            };
            select_pairs_spq(&model, &items, a.k)?
        }
    };
    write_json(&a.out, &q.to_file())?;
    println!("questionnaire_id {}", q.id());
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    estimator: Estimator,
    objective: f64,
    gini: f64,
}

#[derive(Serialize)]
struct RiskRow {
    estimator: Estimator,
    breakpoint: f64,
    ara: Option<f64>,
    rra: Option<f64>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    roboadvisor::io::write_atomic(path, &bytes)
}

fn elicit(a: ElicitArgs) -> Result<()> {
    let items = load_item_set(&a.items)?;
    let q = load_questionnaire(&a.questionnaire, &items)?;
    let file: AnswerSheetFile = read_json(&a.answers)?;
    let sheet = AnswerSheet::from_file(&file, q)?;
    let upper = a.upper.unwrap_or_else(|| items.max_outcome());
    let grid = match a.grid {
        GridArg::Questionnaire => sheet.questionnaire.breakpoints(upper)?,
        GridArg::ItemSet => build_breakpoints(&items, upper)?,
    };
    let scen = build_scenarios(&items, &BenchmarkSpec::default_for(&items))?;
    let settings = ElicitSettings { relax_inconsistent: a.relax, ..ElicitSettings::default() };
    let results: Vec<ElicitedUtility> = match a.estimator {
        EstimatorArg::Pessimistic => vec![elicit_pessimistic_with(&sheet, &grid, &scen, &settings)?],
        EstimatorArg::Optimistic => vec![elicit_optimistic_with(&sheet, &grid, &scen, &settings)?],
        EstimatorArg::Neutral => vec![elicit_all(&sheet, &grid, &scen, &settings)?.neutral],
        EstimatorArg::All => elicit_all(&sheet, &grid, &scen, &settings)?.iter().cloned().collect(),
    };
    std::fs::create_dir_all(&a.out)?;
    let mut summary = Vec::new();
    let mut risk = Vec::new();
    println!("{:<12} {:>10} {:>8}  ARA / RRA per interior breakpoint", "estimator", "objective", "gini");
    for e in &results {
        write_json(&a.out.join(format!("{}.json", e.estimator)), e)?;
        let an = risk_aversion(&e.utility);
        summary.push(SummaryRow { estimator: e.estimator, objective: e.objective, gini: an.gini });
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
        let cells: Vec<String> = an
            .ara
            .iter()
            .zip(&an.rra)
            .map(|(ara, rra)| format!("{}/{}", fmt(ara.value.value()), fmt(rra.value.value())))
            .collect();
        println!("{:<12} {:>10.6} {:>8.4}  {}", e.estimator.as_str(), e.objective, an.gini, cells.join(" "));
        for (ara, rra) in an.ara.iter().zip(&an.rra) {
            risk.push(RiskRow {
                estimator: e.estimator,
                breakpoint: ara.breakpoint,
                ara: ara.value.value(),
                rra: rra.value.value(),
            });
        }
    }
    write_csv(&a.out.join("summary.csv"), &summary)?;
    write_csv(&a.out.join("risk.csv"), &risk)
}

fn read_utility(path: &Path) -> Result<PwlUtility> {
    read_json(path)
}

#[derive(Serialize)]
struct DistanceOut {
    value: f64,
    method: DistanceMethod,
}

fn distance(a: DistanceArgs) -> Result<()> {
    let u = read_utility(&a.u)?;
    let v = read_utility(&a.v)?;
    let r = match a.method {
        DistanceArg::ClosedForm => kantorovich_closed_form(&u, &v)?,
        DistanceArg::Socp => kantorovich_socp(&u, &v)?,
        DistanceArg::DualSocp => kantorovich_dual_socp(&u, &v)?,
    };
    println!("{}", r.value);
    if let Some(out) = &a.out {
        write_json(out, &DistanceOut { value: r.value, method: r.method })?;
    }
    Ok(())
}

fn portfolio(a: PortfolioArgs) -> Result<()> {
    let u = read_utility(&a.utility)?;
    let panel = load_returns(&a.returns)?;
    let spec = PortfolioSpec::uniform_caps(a.budget, a.cap_fraction, panel.num_risky());
    let p = optimize_on_panel(&u, &panel, a.end.unwrap_or(panel.len()), a.window, &spec)?;
    for (asset, x) in p.assets.iter().zip(&p.allocation) {
        println!("{asset:<16} {x:>14.2}");
    }
    println!("objective {:.9}", p.objective);
    write_json(&a.out, &p)
}

#[derive(serde::Deserialize)]
struct Labelled {
    #[serde(default)]
    estimator: Option<String>,
}

fn backtest(a: BacktestArgs) -> Result<()> {
    let panel = load_returns(&a.returns)?;
    let mut utilities = BTreeMap::new();
    for path in &a.utilities {
        let label: Labelled = read_json(path)?;
        let name = label
            .estimator
            .unwrap_or_else(|| path.file_stem().map_or("utility".into(), |s| s.to_string_lossy().into_owned()));
        if utilities.insert(name.clone(), read_utility(path)?).is_some() {
            return Err(Error::Validation(format!("two utilities are labelled {name}")));
        }
    }
    let cfg = BacktestConfig {
        window: a.window,
        hold: a.hold,
        initial_wealth: a.initial_wealth,
        cap_fraction: a.cap_fraction,
    };
    let curves = run_backtest(&panel, &cfg, &utilities)?;
    write_wealth_csv(&a.out, &curves)?;
    let rebalances: BTreeMap<&str, _> = curves.iter().map(|c| (c.estimator.as_str(), &c.rebalances)).collect();
    write_json(&a.out.with_extension("rebalances.json"), &rebalances)?;
    for c in &curves {
        let last = c.points.last().map_or(cfg.initial_wealth, |p| p.wealth);
        println!("{:<12} final wealth {:.2}", c.estimator, last);
    }
    Ok(())
}

fn write_report(out: &Path, report: &ExperimentReport, methods: &[Provenance]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for &m in methods {
        let tag = match m {
            Provenance::Spq => "spq",
            Provenance::Random => "random",
        };
        let runs: Vec<_> = report.runs.iter().filter(|r| r.method == m).collect();
        let cells: Vec<_> = report.summary.iter().filter(|c| c.method == m).collect();
        let suffix = if methods.len() > 1 { format!("_{tag}") } else { String::new() };
        write_runs_csv(&out.join(format!("runs{suffix}.csv")), &runs)?;
        write_summary_csv(&out.join(format!("summary{suffix}.csv")), &cells)?;
        for c in cells {
            println!("{tag:<7} {:<12} K={:<4} mean {:.4} sd {:.4}", c.estimator.as_str(), c.k, c.mean, c.stddev);
        }
    }
    write_json(&out.join("report.json"), report)
}

fn experiment_config(items: &ItemSet, a: &ExperimentArgs) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(items, a.k.clone(), a.repetitions, a.seed);
    cfg.raters = a.raters;
    cfg.lfm.dim = a.dim;
    cfg.grid = grid_policy(a.grid);
    cfg
}

fn simulate(cmd: SimulateCommand) -> Result<()> {
    match cmd {
        SimulateCommand::SpqVsRandom(a) => {
            let items = load_item_set(&a.items)?;
            let report = run_spq_vs_random(&items, &experiment_config(&items, &a))?;
            write_report(&a.out, &report, &[Provenance::Spq, Provenance::Random])
        }
        SimulateCommand::Convergence(a) => {
            let items = load_item_set(&a.items)?;
            let report = run_convergence(&items, &experiment_config(&items, &a))?;
            write_report(&a.out, &report, &[Provenance::Random])
        }
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = match (&a.config, &a.items) {
        (Some(path), _) => ApiConfig::from_file(path)?,
        (None, Some(items)) => ApiConfig::new(items),
        (None, None) => return Err(Error::Validation("serve needs --config or --items".into())),
    };
    if let Some(p) = a.items {
        cfg.item_set = p;
    }
    if a.ratings.is_some() {
        cfg.ratings = a.ratings;
    }
    if a.returns.is_some() {
        cfg.returns = a.returns;
    }
    if let Some(b) = a.bind {
        cfg.bind = b;
    }
    if let Some(d) = a.data_dir {
        cfg.data_dir = d;
    }
    cfg.apply_env();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitLfm(a) => fit_lfm_cmd(a),
        Command::GenQuestionnaire(a) => gen_questionnaire(a),
        Command::Elicit(a) => elicit(a),
        Command::Distance(a) => distance(a),
        Command::Portfolio(a) => portfolio(a),
        Command::Backtest(a) => backtest(a),
        Command::Simulate(c) => simulate(c),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() || matches!(e, Error::Inconsistent(_)) { 2 } else { 1 })
        }
    }
}
