//! `bnc`: train and measure budgeted discrete classifiers and small
//! networks, sweep trade-off grids, and report cost/error fronts.

mod config;
mod dataset;
mod report;
mod runner;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bnc_core::budget::BudgetReport;
use bnc_core::data::mdl_discretize;
use bnc_core::structure::{
    train_structure, LearnedStructure, SizePenaltyConfig, StructureDistribution,
};
use bnc_core::train::{train_bnc, train_dnn, TrainHistory};
use bnc_core::{BncModel, DnnModel, TanStructure};

use config::{BitSetting, ExperimentConfig, Family};
use dataset::prepare_folds;
use report::XAxis;

#[derive(Parser)]
#[command(
    name = "bnc",
    version,
    about = "Budget-aware discrete classifiers: train, sweep, and report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Full-protocol scale: 500 epochs and 100 restarts per grid point
    /// instead of the quicker desk-scale defaults.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit feature cut points on the training data and save them.
    Discretize,
    /// Train one classifier (nb or tan family) and save model + history.
    TrainBnc,
    /// Train one network (fc or cnn family) and save model + history.
    TrainDnn,
    /// Learn a parent structure jointly with its tables.
    LearnStructure,
    /// Measure bits and operations of a saved model.
    Budget {
        /// Saved model file (JSON).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        kind: ModelKind,
    },
    /// Run the configured grid into results.csv (resumable).
    Sweep,
    /// Filter results to the cost/error trade-off front.
    Pareto {
        /// Results file; defaults to <out>/results.csv.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Comma-separated objectives: bits, ops, error.
        #[arg(long, default_value = "bits,ops,error")]
        dims: String,
        /// Rank per-fold detail rows too, not just summaries.
        #[arg(long)]
        include_folds: bool,
    },
    /// Emit report.csv and an SVG scatter of the trade-off.
    Report {
        /// Results file; defaults to <out>/results.csv.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = XAxisArg::Bits)]
        x_axis: XAxisArg,
        /// Log-scale the cost axis.
        #[arg(long)]
        log_x: bool,
        /// Keep only rows on the trade-off front.
        #[arg(long)]
        pareto_only: bool,
        /// Objectives for --pareto-only filtering.
        #[arg(long, default_value = "bits,ops,error")]
        dims: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelKind {
    Bnc,
    Dnn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum XAxisArg {
    Bits,
    Ops,
}

impl From<XAxisArg> for XAxis {
    fn from(a: XAxisArg) -> Self {
        match a {
            XAxisArg::Bits => XAxis::Bits,
            XAxisArg::Ops => XAxis::Ops,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Discretize => discretize(&cli),
        Command::TrainBnc => train_bnc_cmd(&cli),
        Command::TrainDnn => train_dnn_cmd(&cli),
        Command::LearnStructure => learn_structure_cmd(&cli),
        Command::Budget { model, kind } => budget_cmd(&cli, model, *kind),
        Command::Sweep => sweep_cmd(&cli),
        Command::Pareto { results, dims, include_folds } => {
            pareto_cmd(&cli, results.as_deref(), dims, *include_folds)
        }
        Command::Report { results, x_axis, log_x, pareto_only, dims } => report_cmd(
            &cli,
            results.as_deref(),
            (*x_axis).into(),
            *log_x,
            *pareto_only,
            dims,
        ),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .context("this command needs --config <file.toml>")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.paper_scale {
        cfg.apply_paper_scale();
    }
    Ok(cfg)
}

fn save_history(history: &TrainHistory, out: &Path) -> Result<()> {
    history
        .write_csv(&out.join("history.csv"))
        .context("writing history.csv")
}

fn save_budget(report: &BudgetReport, out: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(out.join("budget.json"), text).context("writing budget.json")
}

fn print_run(history: &TrainHistory, report: &BudgetReport) {
    println!(
        "final train_err={:.4} test_err={:.4} bits={} ops={}",
        history.final_train_err(),
        history.final_test_err(),
        report.bits,
        report.ops,
    );
}

fn discretize(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let raw = dataset::load_raw(&cfg.dataset)?;
    let disc = mdl_discretize(&raw);
    let path = cli.out.join("discretizer.json");
    disc.save_json(&path)?;
    println!(
        "wrote {}: {} features, mean cardinality {:.2}",
        path.display(),
        disc.num_features(),
        disc.mean_cardinality()
    );
    Ok(())
}

fn train_bnc_cmd(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let folds = prepare_folds(&cfg.dataset, cfg.seed)?;
    let fold = &folds[0];
    let d = fold.train.num_features();
    let structure = match cfg.model.family {
        Family::BncNb => TanStructure::naive_bayes(d),
        Family::BncTan => runner::random_tan(d, cfg.seed),
        Family::BncStructure => bail!("use learn-structure for the bnc-structure family"),
        Family::Fc | Family::Cnn => bail!("train-bnc needs a bnc-* family"),
    };
    let quant = cfg.quant.to_bn()?;
    let (model, history) = train_bnc(
        &fold.train,
        Some(&fold.test),
        structure,
        quant,
        &cfg.hybrid,
        &cfg.optimizer,
        cfg.seed,
    )?;
    model.save_json(&cli.out.join("model.json"))?;
    fold.discretizer.save_json(&cli.out.join("discretizer.json"))?;
    save_history(&history, &cli.out)?;
    let report = BudgetReport::for_bnc(&model, quant);
    save_budget(&report, &cli.out)?;
    print_run(&history, &report);
    Ok(())
}

fn train_dnn_cmd(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cfg.model.family.is_bnc() {
        bail!("train-dnn needs the fc or cnn family");
    }
    let folds = prepare_folds(&cfg.dataset, cfg.seed)?;
    let fold = &folds[0];
    let (train, test) = fold.dnn_pair();
    let bits = match cfg.quant.bits {
        Some(b) => BitSetting::Width(b),
        None => BitSetting::float(),
    };
    let net = runner::resolve_net(&cfg, bits, None, train.num_features, train.num_classes)?;
    let (model, history) = train_dnn(
        &train,
        Some(&test),
        net.input_shape,
        net.layers,
        cfg.quant.to_dnn()?,
        &cfg.optimizer,
        cfg.seed,
    )?;
    model.save(&cli.out.join("model.json"))?;
    save_history(&history, &cli.out)?;
    let report = BudgetReport::for_dnn(model.input_shape, &model.layers, model.quant)?;
    save_budget(&report, &cli.out)?;
    println!("architecture: {}", net.label);
    print_run(&history, &report);
    Ok(())
}

fn learn_structure_cmd(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if !cfg.model.family.is_bnc() {
        bail!("learn-structure needs a bnc-* family");
    }
    let folds = prepare_folds(&cfg.dataset, cfg.seed)?;
    let fold = &folds[0];
    let dist = StructureDistribution::random(
        fold.train.num_features(),
        cfg.model.max_parent_candidates,
        cfg.seed,
    )?;
    let penalty = SizePenaltyConfig { lambda_ms: cfg.lambda_ms, ..SizePenaltyConfig::default() };
    let outcome = train_structure(
        &fold.train,
        Some(&fold.test),
        dist,
        &cfg.hybrid,
        &cfg.optimizer,
        &penalty,
        cfg.seed,
    )?;
    outcome.model.save_json(&cli.out.join("model.json"))?;
    LearnedStructure::from_outcome(&outcome).save_json(&cli.out.join("structure.json"))?;
    save_history(&outcome.history, &cli.out)?;
    let report = BudgetReport::for_bnc(&outcome.model, None);
    save_budget(&report, &cli.out)?;
    let with_parents =
        outcome.structure.parents.iter().filter(|p| p.is_some()).count();
    println!(
        "learned structure: {} of {} features take a parent (lambda_ms={})",
        with_parents,
        outcome.structure.parents.len(),
        cfg.lambda_ms
    );
    print_run(&outcome.history, &report);
    Ok(())
}

fn budget_cmd(cli: &Cli, model_path: &Path, kind: ModelKind) -> Result<()> {
    let report = match kind {
        ModelKind::Bnc => {
            let model = BncModel::load_json(model_path)?;
            BudgetReport::for_bnc(&model, model.quant)
        }
        ModelKind::Dnn => {
            let model = DnnModel::load(model_path)?;
            BudgetReport::for_dnn(model.input_shape, &model.layers, model.quant)?
        }
    };
    save_budget(&report, &cli.out)?;
    println!("total: {} bits, {} ops", report.bits, report.ops);
    for c in &report.breakdown {
        println!("  {:<24} {:>12} bits {:>10} ops", c.label, c.bits, c.ops);
    }
    Ok(())
}

fn sweep_cmd(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let summary = runner::run_sweep(&cfg, &cli.out)?;
    println!(
        "{}: {} new rows ({} total over {} grid points)",
        summary.results_path.display(),
        summary.rows_written,
        summary.rows_total,
        summary.points_total,
    );
    Ok(())
}

fn results_path(cli: &Cli, results: Option<&Path>) -> PathBuf {
    results.map(Path::to_path_buf).unwrap_or_else(|| cli.out.join("results.csv"))
}

fn pareto_cmd(cli: &Cli, results: Option<&Path>, dims: &str, include_folds: bool) -> Result<()> {
    let rows = report::load_rows(&results_path(cli, results))?;
    let dims = report::parse_dims(dims)?;
    let keep = report::front_indices(&rows, &dims, include_folds)?;
    let path = cli.out.join("pareto.csv");
    report::write_rows(&path, &rows, &keep)?;
    println!("{}: kept {} of {} rows", path.display(), keep.len(), rows.len());
    Ok(())
}

fn report_cmd(
    cli: &Cli,
    results: Option<&Path>,
    x_axis: XAxis,
    log_x: bool,
    pareto_only: bool,
    dims: &str,
) -> Result<()> {
    let rows = report::load_rows(&results_path(cli, results))?;
    let keep: Vec<usize> = if pareto_only {
        report::front_indices(&rows, &report::parse_dims(dims)?, false)?
    } else {
        rows.iter()
            .enumerate()
            .filter(|(_, r)| !r.is_fold_row())
            .map(|(i, _)| i)
            .collect()
    };
    if keep.is_empty() {
        bail!("no rows to report");
    }
    let csv_path = cli.out.join("report.csv");
    report::write_rows(&csv_path, &rows, &keep)?;
    let svg = report::render_scatter(&rows, &keep, x_axis, log_x)?;
    let svg_path = cli.out.join("scatter.svg");
    std::fs::write(&svg_path, svg)?;
    println!(
        "{} and {}: {} rows plotted",
        csv_path.display(),
        svg_path.display(),
        keep.len()
    );
    Ok(())
}
