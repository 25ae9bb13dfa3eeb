//! Command-line driver: `train`, `sweep` and `gen-data`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mm_monge::cost::CostKind;
use mm_monge::data::{save_csv, MarginalSpec, DEFAULT_CIRCLE_FACTOR, DEFAULT_NOISE};
use mm_monge::net::Activation;
use mm_monge::optim::{OptimizerHyper, OptimizerKind};
use mm_monge::par::threads_from_env;
use mm_monge::train::{
    evaluate, fit, write_loss_csv, LossForm, PenaltyWeights, TrainError, TrainReport,
};
use mm_monge::{Error, KernelConfig, Rng, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const FAILED_MARKER: &str = "FAILED";
pub const CHECKPOINT_FILE: &str = "maps.bin";

#[derive(Parser, Debug)]
#[command(
    name = "mm-monge",
    version,
    about = "Multi-marginal Monge maps with MMD penalties"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one map ensemble and write a run directory.
    Train(TrainArgs),
    /// Train one run per optimizer and/or penalty weight.
    Sweep(SweepArgs),
    /// Write samples of a built-in marginal to CSV.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// N(0,I), N((3,3),I), N((10,10),I) in 2-d.
    GaussShift,
    /// N(0,I), two moons, two circles.
    MoonsCircles,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Built-in experiment. Defaults to gauss-shift when no --marginal is given.
    #[arg(long, value_enum, conflicts_with = "marginal")]
    pub experiment: Option<Experiment>,
    /// CSV sample file; repeat once per marginal, source first.
    #[arg(long)]
    pub marginal: Vec<PathBuf>,
    /// Training epochs [default: 2000, or 5000 for moons-circles].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size, drawn with replacement.
    #[arg(long, default_value_t = 500)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Gaussian kernel coefficient α in exp(−α‖x − y‖²).
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = CostArg::Chain)]
    pub cost: CostArg,
    #[arg(long, value_enum, default_value_t = LossFormArg::Standard)]
    pub loss_form: LossFormArg,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "128,128")]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seed of the held-out evaluation batch [default: derived from --seed].
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long, default_value_t = 500)]
    pub eval_samples: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    /// Penalty weight used for every target.
    #[arg(long, default_value_t = 100.0, conflicts_with = "lambdas")]
    pub lambda: f64,
    /// One penalty weight per target, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Optimizers to compare [default: adam when only --lambdas is given].
    #[arg(long, value_delimiter = ',')]
    pub optimizers: Option<Vec<String>>,
    /// Penalty weights to compare [default: 100 when only --optimizers is given].
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Sub-runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Root directory for the sub-runs and summary.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Gaussian,
    TwoMoons,
    TwoCircles,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    /// Inner circle radius relative to the outer one.
    #[arg(long, default_value_t = DEFAULT_CIRCLE_FACTOR)]
    pub factor: f64,
    /// Gaussian mean, repeated in every coordinate.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sd: f64,
    /// Gaussian dimension.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    Chain,
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossFormArg {
    Standard,
    ProductNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Tanh,
}

/// Error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    fn io(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: msg.into(),
        }
    }

    /// Errors raised while reading inputs and building the configuration.
    fn from_setup(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Self {
                code: EXIT_NUMERIC,
                message: e.to_string(),
            },
            other => Self::usage(other.to_string()),
        }
    }

    /// Errors raised while writing outputs.
    fn from_output(e: Error) -> Self {
        match e {
            Error::Io(_) => Self::io(e.to_string()),
            other => Self::from_setup(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn base_config(run: &RunArgs) -> CliResult<TrainConfig> {
    let mut cfg = if run.marginal.is_empty() {
        match run.experiment.unwrap_or(Experiment::GaussShift) {
            Experiment::GaussShift => TrainConfig::gauss_shift(),
            Experiment::MoonsCircles => TrainConfig::moons_circles(),
        }
    } else {
        if run.marginal.len() < 2 {
            return Err(Failure::usage(
                "--marginal must be given at least twice (source and one target)",
            ));
        }
        for p in &run.marginal {
            mm_monge::data::load_csv(p).map_err(|e| {
                Failure::usage(format!("cannot read marginal {}: {e}", p.display()))
            })?;
        }
        let marginals = run
            .marginal
            .iter()
            .map(|p| MarginalSpec::CsvFile { path: p.clone() })
            .collect();
        TrainConfig::preset(marginals, 2000)
    };
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    cfg.batch_size = run.batch_size;
    cfg.lr = run.lr;
    cfg.kernel = KernelConfig::gaussian(run.alpha).map_err(Failure::from_setup)?;
    cfg.cost = match run.cost {
        CostArg::Chain => CostKind::ChainQuadratic,
        CostArg::Pairwise => CostKind::PairwiseQuadratic,
    };
    cfg.loss_form = match run.loss_form {
        LossFormArg::Standard => LossForm::Standard,
        LossFormArg::ProductNormalized => LossForm::ProductNormalized,
    };
    cfg.hidden = run.hidden.clone();
    cfg.activation = match run.activation {
        ActivationArg::Relu => Activation::Relu,
        ActivationArg::Tanh => Activation::Tanh,
    };
    cfg = cfg.with_seed(run.seed);
    if let Some(s) = run.eval_seed {
        cfg.eval_seed = s;
    }
    cfg.eval_samples = run.eval_samples;
    cfg.threads = threads_from_env();
    Ok(cfg)
}

fn set_optimizer(cfg: &mut TrainConfig, name: &str) -> CliResult<()> {
    let kind: OptimizerKind = name.parse().map_err(Failure::from_setup)?;
    cfg.optimizer = kind;
    cfg.optimizer_hyper = OptimizerHyper::defaults(kind);
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = base_config(&args.run)?;
    set_optimizer(&mut cfg, &args.optimizer)?;
    cfg.lambdas = match &args.lambdas {
        Some(l) => PenaltyWeights::new(l.clone()),
        None => PenaltyWeights::uniform(args.lambda, cfg.num_marginals() - 1),
    }
    .map_err(Failure::from_setup)?;
    cfg.validate().map_err(Failure::from_setup)?;
    check_out_dir(&args.out)?;

    let outcome = train_into(&cfg, &args.out)?;
    print_table_header(cfg.num_marginals());
    print_table_row(&cfg.optimizer.to_string(), &outcome);
    match outcome {
        RunOutcome::Done(_) => Ok(()),
        RunOutcome::Failed { epoch, message } => Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("numeric failure at epoch {epoch}: {message}"),
        }),
    }
}

fn check_out_dir(out: &Path) -> CliResult<()> {
    if out.exists() {
        let empty = fs::read_dir(out)
            .map(|mut d| d.next().is_none())
            .unwrap_or(false);
        if !empty {
            return Err(Failure::usage(format!(
                "output directory {} exists and is not empty",
                out.display()
            )));
        }
    }
    Ok(())
}

#[derive(Debug)]
pub enum RunOutcome {
    Done(Box<TrainReport>),
    Failed { epoch: usize, message: String },
}

/// Train and write the run directory. Files are written to a sibling staging
/// directory that is renamed into place at the end; a run that hits a numeric
/// failure is still moved into place but carries a `FAILED` marker and no
/// samples or checkpoint.
fn train_into(cfg: &TrainConfig, out: &Path) -> CliResult<RunOutcome> {
    let staging = staging_dir(out);
    if staging.exists() {
        fs::remove_dir_all(&staging)
            .map_err(|e| Failure::io(format!("{}: {e}", staging.display())))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Failure::io(format!("{}: {e}", staging.display())))?;

    let result = write_run(cfg, &staging);
    match result {
        Ok(outcome) => {
            if out.exists() {
                fs::remove_dir(out).map_err(|e| Failure::io(format!("{}: {e}", out.display())))?;
            }
            fs::rename(&staging, out)
                .map_err(|e| Failure::io(format!("{}: {e}", out.display())))?;
            Ok(outcome)
        }
        Err(f) => {
            let _ = fs::remove_dir_all(&staging);
            Err(f)
        }
    }
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn write_run(cfg: &TrainConfig, dir: &Path) -> CliResult<RunOutcome> {
    write_json(&dir.join("config.json"), cfg)?;
    match fit(cfg) {
        Ok((ensemble, report)) => {
            write_json(&dir.join("report.json"), &report)?;
            write_loss_csv(dir.join("loss.csv"), &report.loss).map_err(Failure::from_output)?;
            let eval = evaluate(&ensemble, cfg, cfg.eval_seed).map_err(Failure::from_output)?;
            save_csv(dir.join("source.csv"), &eval.source).map_err(Failure::from_output)?;
            for (k, (p, t)) in eval.pushed.iter().zip(&eval.targets).enumerate() {
                let h = k + 2;
                save_csv(dir.join(format!("samples_h{h}.csv")), p).map_err(Failure::from_output)?;
                save_csv(dir.join(format!("targets_h{h}.csv")), t).map_err(Failure::from_output)?;
            }
            ensemble
                .save_checkpoint(dir.join(CHECKPOINT_FILE))
                .map_err(Failure::from_output)?;
            Ok(RunOutcome::Done(Box::new(report)))
        }
        Err(TrainError::Setup(e)) => Err(Failure::from_setup(e)),
        Err(TrainError::Aborted {
            epoch,
            source,
            partial,
        }) => {
            write_json(&dir.join("report.json"), &*partial)?;
            write_loss_csv(dir.join("loss.csv"), &partial.loss).map_err(Failure::from_output)?;
            let message = source.to_string();
            fs::write(
                dir.join(FAILED_MARKER),
                format!("epoch {epoch}: {message}\n"),
            )
            .map_err(|e| Failure::io(e.to_string()))?;
            Ok(RunOutcome::Failed { epoch, message })
        }
    }
}

fn print_table_header(n_marginals: usize) {
    let mut line = format!("{:<10}", "run");
    for h in 2..=n_marginals {
        line.push_str(&format!(" | {:>22}", format!("h={h} (mean, SD)")));
    }
    println!("{line}");
}

fn print_table_row(label: &str, outcome: &RunOutcome) {
    let mut line = format!("{label:<10}");
    match outcome {
        RunOutcome::Done(r) => {
            for m in &r.marginals {
                line.push_str(&format!(" | {:>22}", format!("{:.4}, {:.4}", m.mean, m.sd)));
            }
        }
        RunOutcome::Failed { epoch, .. } => line.push_str(&format!(" | failed at epoch {epoch}")),
    }
    println!("{line}");
}

fn format_lambda(l: f64) -> String {
    format!("{l}")
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let base = base_config(&args.run)?;
    let optimizers = match &args.optimizers {
        Some(list) => {
            let mut kinds = list
                .iter()
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.parse::<OptimizerKind>().map_err(Failure::from_setup))
                .collect::<CliResult<Vec<_>>>()?;
            kinds.sort_by_key(|k| OptimizerKind::ALL.iter().position(|a| a == k));
            kinds.dedup();
            kinds
        }
        None => Vec::new(),
    };
    let lambdas = args.lambdas.clone().unwrap_or_default();
    if optimizers.is_empty() && lambdas.is_empty() {
        return Err(Failure::usage(
            "sweep needs a non-empty --optimizers or --lambdas list",
        ));
    }
    let optimizers = if optimizers.is_empty() {
        vec![base.optimizer]
    } else {
        optimizers
    };
    let lambdas = if lambdas.is_empty() {
        vec![100.0]
    } else {
        lambdas
    };

    let mut runs = Vec::new();
    for &opt in &optimizers {
        for &lambda in &lambdas {
            let mut cfg = base.clone();
            set_optimizer(&mut cfg, opt.name())?;
            cfg.lambdas = PenaltyWeights::uniform(lambda, cfg.num_marginals() - 1)
                .map_err(Failure::from_setup)?;
            cfg.validate().map_err(Failure::from_setup)?;
            let name = format!("{}_lambda{}", opt.name(), format_lambda(lambda));
            runs.push((name, lambda, cfg));
        }
    }
    check_out_dir(&args.out)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::io(format!("{}: {e}", args.out.display())))?;

    let results: Vec<Mutex<Option<CliResult<RunOutcome>>>> =
        runs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let jobs = args.jobs.clamp(1, runs.len());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((name, _, cfg)) = runs.get(i) else {
                    break;
                };
                let outcome = train_into(cfg, &args.out.join(name));
                *results[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(outcome);
            });
        }
    });

    let mut summary = String::from("optimizer,lambda,status");
    for h in 2..=base.num_marginals() {
        summary.push_str(&format!(",h{h}_mean,h{h}_sd,h{h}_mmd2"));
    }
    summary.push('\n');
    print_table_header(base.num_marginals());
    let mut worst = EXIT_OK;
    for ((name, lambda, cfg), slot) in runs.iter().zip(results) {
        let outcome = slot
            .into_inner()
            .unwrap_or_else(|p| p.into_inner())
            .unwrap_or_else(|| Err(Failure::io(format!("run {name} did not finish"))));
        let label = match (optimizers.len() > 1, lambdas.len() > 1) {
            (true, true) => format!("{} {}", cfg.optimizer, format_lambda(*lambda)),
            (true, false) => cfg.optimizer.to_string(),
            _ => format_lambda(*lambda),
        };
        summary.push_str(&format!("{},{}", cfg.optimizer, format_lambda(*lambda)));
        match &outcome {
            Ok(o @ RunOutcome::Done(r)) => {
                summary.push_str(",ok");
                for m in &r.marginals {
                    summary.push_str(&format!(",{:.6},{:.6},{:.6e}", m.mean, m.sd, m.mmd2));
                }
                print_table_row(&label, o);
            }
            Ok(o @ RunOutcome::Failed { .. }) => {
                summary.push_str(",failed");
                for _ in 2..=base.num_marginals() {
                    summary.push_str(",,,");
                }
                print_table_row(&label, o);
                worst = worst.max(EXIT_NUMERIC);
            }
            Err(f) => {
                eprintln!("error: {name}: {}", f.message);
                summary.push_str(",error");
                for _ in 2..=base.num_marginals() {
                    summary.push_str(",,,");
                }
                worst = worst.max(f.code);
            }
        }
        summary.push('\n');
    }
    let path = args.out.join("summary.csv");
    fs::write(&path, summary).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    if worst == EXIT_OK {
        Ok(())
    } else {
        Err(Failure {
            code: worst,
            message: "one or more sub-runs failed".into(),
        })
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let spec = match args.kind {
        DataKind::Gaussian => MarginalSpec::IsotropicGaussian {
            mean: vec![args.mean; args.dim],
            sd: args.sd,
            n: args.n,
        },
        DataKind::TwoMoons => MarginalSpec::TwoMoons {
            noise: args.noise,
            n: args.n,
        },
        DataKind::TwoCircles => MarginalSpec::TwoCircles {
            noise: args.noise,
            factor: args.factor,
            n: args.n,
        },
    };
    spec.validate().map_err(Failure::from_setup)?;
    let m = spec
        .generate(&mut Rng::seed_from_u64(args.seed))
        .map_err(Failure::from_setup)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::io(format!("{}: {e}", parent.display())))?;
    }
    save_csv(&args.out, &m).map_err(Failure::from_output)
}
