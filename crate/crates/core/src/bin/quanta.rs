//! `quanta`: command-line front end for building, applying, analyzing and
//! training tensor-circuit adapters.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure.
//! `QUANTA_NUM_THREADS` sets the worker thread count.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use quanta_core::analysis::accounting::{param_fraction, total_trainable, LoraRank, ModelConfig, TrainableParams};
use quanta_core::analysis::rank::{numerical_rank, rank_bounds, DEFAULT_RANK_TOLERANCE};
use quanta_core::analysis::similarity::subspace_similarity;
use quanta_core::analysis::universality::universality_fit;
use quanta_core::config::ExperimentConfig;
use quanta_core::qtf::{QtfFile, QtfRecord};
use quanta_core::train::{eckart_young_floor, run_recovery, AdapterKind, TrainedAdapter};
use quanta_core::{
    build_plan, build_rect_plan, gen_apply_expr, gen_operator_expr, identity_plan, AxisShape, Matrix, PlanScheme,
};

#[derive(Parser)]
#[command(name = "quanta", version, about = "Tensor-circuit adapter toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the einsum expression for an all-pairs circuit on N axes.
    GenExpr {
        #[arg(long)]
        n: usize,
        /// Emit the operator form (no input operand) instead.
        #[arg(long)]
        operator: bool,
    },
    /// Build a plan and write it as QTF.
    InitPlan(InitPlanArgs),
    /// Expand a plan into its dense matrix.
    Materialize {
        #[arg(long)]
        plan: PathBuf,
        /// Output path; `.csv` writes text, anything else QTF.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold a plan into a base weight: base + T, or base + T - S with a
    /// frozen plan S.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        frozen: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerical rank of a matrix, or of a plan together with its bounds.
    Rank {
        #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
        matrix: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RANK_TOLERANCE)]
        tol: f64,
        #[arg(long)]
        json: bool,
    },
    /// Subspace similarity grid between the right singular spaces of two
    /// matrices.
    Subspace {
        #[arg(long)]
        w1: PathBuf,
        #[arg(long)]
        w2: PathBuf,
        #[arg(long)]
        max_i: usize,
        #[arg(long)]
        max_j: usize,
        /// Write `i,j,phi` rows here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Trainable parameter count as a share of a model's parameters.
    Count(CountArgs),
    /// Run a recovery experiment described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit a stacked circuit to a dense target.
    Fit {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        shape: AxisShape,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the best plan here as QTF.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the records of a QTF file.
    Inspect { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    AllPairs,
    Stacked,
    Explicit,
}

#[derive(Args)]
struct InitPlanArgs {
    #[arg(long)]
    shape: AxisShape,
    #[arg(long, value_enum, default_value = "all-pairs")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    /// Gate axes for the explicit scheme, e.g. `1:2,0:2,0:1`.
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    /// Identity gates instead of random ones.
    #[arg(long, conflicts_with = "out_first")]
    identity: bool,
    /// Resize axis 0 to this extent for a rectangular plan.
    #[arg(long)]
    out_first: Option<usize>,
    /// Pad or truncate the input to this length.
    #[arg(long)]
    input_len: Option<usize>,
    /// Pad or truncate the output to this length.
    #[arg(long)]
    output_len: Option<usize>,
    /// Mark the plan frozen.
    #[arg(long)]
    frozen: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long, group = "adapter")]
    plan: Option<PathBuf>,
    #[arg(long, group = "adapter")]
    lora_rank: Option<usize>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.chain().any(is_broken_pipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<quanta_core::Error>().is_some_and(|q| q.is_numerical()));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

fn is_broken_pipe(e: &(dyn std::error::Error + 'static)) -> bool {
    let io = e
        .downcast_ref::<std::io::Error>()
        .or_else(|| e.downcast_ref::<csv::Error>().and_then(|c| match c.kind() {
            csv::ErrorKind::Io(io) => Some(io),
            _ => None,
        }));
    io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn configure_threads()-> anyhow::Result<()> {
    if let Ok(v) = std::env::var("QUANTA_NUM_THREADS") {
        let n: usize = v.parse().with_context(|| format!("QUANTA_NUM_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenExpr { n, operator } => {
            let expr = if operator { gen_operator_expr(n)? } else { gen_apply_expr(n)? };
            println!("{}", expr.text());
        }
        Command::InitPlan(args) => init_plan(args)?,
        Command::Materialize { plan, out } => {
            let plan = QtfFile::read(&plan)?.plan()?.clone();
            write_matrix(&out, &plan.materialize())?;
        }
        Command::Merge { base, plan, frozen, out } => {
            let base = read_matrix(&base)?;
            let t = QtfFile::read(&plan)?.plan()?.materialize();
            let mut merged = base.add(&t)?;
            if let Some(frozen) = frozen {
                let s = QtfFile::read(&frozen)?.plan()?.materialize();
                merged = base.add(&t.sub(&s)?)?;
            }
            write_matrix(&out, &merged)?;
        }
        Command::Rank { matrix, plan, tol, json } => {
            let report = match (matrix, plan) {
                (Some(m), _) => numerical_rank(&read_matrix(&m)?, tol)?,
                (None, Some(p)) => rank_bounds(QtfFile::read(&p)?.plan()?, tol)?,
                (None, None) => bail!("one of --matrix or --plan is required"),
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                let n = report.singular_values.len();
                print!("rank {} of {n} (tolerance {:e}, threshold {:e})", report.rank, report.tolerance, report.threshold);
                if let (Some(lo), Some(hi)) = (report.lower_bound, report.upper_bound) {
                    print!("; bounds [{lo}, {hi}]");
                    if report.tolerance_sensitive {
                        print!(" (tolerance-sensitive)");
                    }
                }
                println!();
            }
        }
        Command::Subspace { w1, w2, max_i, max_j, csv } => {
            let grid = subspace_similarity(&read_matrix(&w1)?, &read_matrix(&w2)?, max_i, max_j)?;
            let sink: Box<dyn Write> = match &csv {
                Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => Box::new(std::io::stdout()),
            };
            let mut w = csv::Writer::from_writer(sink);
            for p in grid.points() {
                w.serialize(p)?;
            }
            w.flush()?;
        }
        Command::Count(args) => count(args)?,
        Command::Train { config } => train(&config)?,
        Command::Fit { target, shape, rounds, restarts, seed, out } => {
            let target = read_matrix(&target)?;
            let fit = universality_fit(&target, &shape, rounds, restarts, seed)?;
            if let Some(out) = out {
                QtfFile::new(vec![QtfRecord::Plan(fit.plan.clone())]).write(&out)?;
            }
            #[derive(Serialize)]
            struct FitOutput<'a> {
                seed: u64,
                shape: String,
                rounds: usize,
                #[serde(flatten)]
                summary: &'a quanta_core::analysis::universality::FitSummary,
            }
            let summary = fit.summary();
            let out = FitOutput { seed, shape: shape.to_string(), rounds, summary: &summary };
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Inspect { file } => {
            let f = QtfFile::read(&file)?;
            println!("{} record(s)", f.records.len());
            for (k, rec) in f.records.iter().enumerate() {
                match rec {
                    QtfRecord::Plan(p) => println!(
                        "{k}: plan {} -> {}, {} gate(s), {} params, io {} -> {}{}",
                        p.in_shape(),
                        p.out_shape(),
                        p.gate_count(),
                        p.param_count(),
                        p.input_len(),
                        p.output_len(),
                        if p.is_frozen() { ", frozen" } else { "" }
                    ),
                    QtfRecord::Matrix(m) => println!("{k}: matrix {}x{}", m.rows(), m.cols()),
                    QtfRecord::Lora(l) => {
                        println!("{k}: lora {}x{} rank {} alpha {}", l.out_dim(), l.in_dim(), l.rank(), l.alpha)
                    }
                }
            }
        }
    }
    Ok(())
}

fn parse_pairs(text: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|p| {
            let (m, n) = p.trim().split_once(':').with_context(|| format!("pair {p:?} is not of the form m:n"))?;
            Ok((m.trim().parse()?, n.trim().parse()?))
        })
        .collect()
}

fn init_plan(a: InitPlanArgs) -> anyhow::Result<()> {
    let scheme = match a.scheme {
        SchemeArg::AllPairs => PlanScheme::AllPairs,
        SchemeArg::Stacked => PlanScheme::Stacked { rounds: a.rounds },
        SchemeArg::Explicit => {
            let pairs = a.pairs.as_deref().context("--pairs is required with --scheme explicit")?;
            PlanScheme::Explicit(parse_pairs(pairs)?)
        }
    };
    let mut plan = match (a.identity, a.out_first) {
        (true, _) => identity_plan(&a.shape, &scheme)?,
        (false, Some(k)) => build_rect_plan(&a.shape, k, &scheme, a.seed, a.init_scale)?,
        (false, None) => build_plan(&a.shape, &scheme, a.seed, a.init_scale)?,
    };
    if a.input_len.is_some() || a.output_len.is_some() {
        let (i, o) = (a.input_len.unwrap_or(plan.input_len()), a.output_len.unwrap_or(plan.output_len()));
        plan = plan.with_io_lens(i, o)?;
    }
    if a.frozen {
        plan = plan.freeze();
    }
    QtfFile::new(vec![QtfRecord::Plan(plan)]).write(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct CountOutput {
    model: String,
    adapter: String,
    trainable_params: u64,
    total_base_params: u64,
    percent: f64,
}

fn count(a: CountArgs) -> anyhow::Result<()> {
    let model = ModelConfig::from_file(&a.model)?;
    let plan;
    let lora;
    let (adapter, label): (&dyn TrainableParams, String) = match (&a.plan, a.lora_rank) {
        (Some(p), _) => {
            plan = QtfFile::read(p)?.plan()?.clone();
            let label = format!("quanta {}", plan.in_shape());
            (&plan, label)
        }
        (None, Some(r)) => {
            lora = LoraRank(r);
            (&lora, format!("lora r={r}"))
        }
        (None, None) => bail!("one of --plan or --lora-rank is required"),
    };
    let out = CountOutput {
        model: model.name.clone(),
        adapter: label,
        trainable_params: total_trainable(adapter, &model)?,
        total_base_params: model.total_base_params,
        percent: param_fraction(adapter, &model)?,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!(
            "{}: {} of {} parameters trainable ({:.3}%)",
            out.adapter, out.trainable_params, out.total_base_params, out.percent
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    seed: u64,
    adapter: &'a str,
    param_count: usize,
    steps: usize,
    final_loss: f64,
    recovery_error: f64,
    low_rank_floor: Option<f64>,
    wall_clock_secs: f64,
    config: &'a ExperimentConfig,
}

fn train(path: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?;
    let task = cfg.task()?;
    let (report, adapter) = run_recovery(&task, &cfg.adapter, &cfg.train_config())?;

    if let Some(p) = &cfg.output.loss_csv {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("creating {}", p.display()))?;
        w.write_record(["seed", "step", "loss"])?;
        for (step, loss) in &report.loss_curve {
            w.write_record([cfg.seed.to_string(), step.to_string(), loss.to_string()])?;
        }
        w.flush()?;
    }
    let low_rank_floor = match &cfg.adapter {
        AdapterKind::Lora { rank, .. } => Some(eckart_young_floor(&task.delta_star, *rank)?),
        AdapterKind::Quanta { .. } => None,
    };
    let summary = TrainSummary {
        seed: cfg.seed,
        adapter: &report.adapter,
        param_count: report.param_count,
        steps: report.loss_curve.len(),
        final_loss: report.loss_curve.last().map_or(f64::NAN, |(_, l)| *l),
        recovery_error: report.recovery_error,
        low_rank_floor,
        wall_clock_secs: report.wall_clock_secs,
        config: &cfg,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    if let Some(p) = &cfg.output.summary_json {
        std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &cfg.output.adapter_qtf {
        let records = match adapter {
            TrainedAdapter::Lora(l) => vec![QtfRecord::Lora(l)],
            TrainedAdapter::Quanta(layer) => {
                vec![QtfRecord::Plan(layer.plan().clone()), QtfRecord::Matrix(layer.base().clone())]
            }
        };
        QtfFile::new(records).write(p)?;
    }
    println!("{json}");
    Ok(())
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_matrix(path: &Path) -> anyhow::Result<Matrix> {
    if !is_csv(path) {
        return Ok(QtfFile::read(path).with_context(|| format!("reading {}", path.display()))?.matrix()?.clone());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().with_context(|| format!("{}: bad number {f:?}", path.display())))
            .collect::<anyhow::Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => bail!("{}: row {} has {} columns, expected {c}", path.display(), rows + 1, row.len()),
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    Ok(Matrix::from_vec(rows, cols.unwrap_or(0), data)?)
}

fn write_matrix(path: &Path, m: &Matrix) -> anyhow::Result<()> {
    if !is_csv(path) {
        QtfFile::new(vec![QtfRecord::Matrix(m.clone())]).write(path)?;
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}
