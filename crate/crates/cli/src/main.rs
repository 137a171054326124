//! `mdlprune`: train, prune, evaluate and score multi-domain pruning runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use mdlprune::checkpoint::{load_checkpoint, save_model, save_pruned};
use mdlprune::datagen::DomainData;
use mdlprune::experiment::{summarize, test_accuracy, test_sets, training_sets};
use mdlprune::losses::{parse_sharing, LambdaMode, SharingKind};
use mdlprune::metrics::{
    build_report, check_fixtures, count_param_bits, mean_macs, parse_fixtures, render_report, MaskView, RunSummary, BUILTIN_FIXTURES,
};
use mdlprune::pruner::{prune, sparsity};
use mdlprune::trainer::{evaluate_with, train_observed};
use mdlprune::{Checkpoint, Error, ExperimentConfig, MultiDomainNet, PrunedModel};
use mdlprune_autograd::gradcheck::{run_suite, GradCheck};
use mdlprune_autograd::Fault;

/// Largest logit difference `eval --pruned` accepts.
const EQUIVALENCE_TOLERANCE: f32 = 1e-5;

/// Below this union sparsity pruning is reported as removing almost nothing.
const LOW_SPARSITY: f64 = 0.05;

#[derive(Parser)]
#[command(name = "mdlprune", version, about = "Budget-aware multi-domain channel pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the switches, batch norm and heads of every domain.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Output directory for the checkpoint, log and summary.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Remove channels no domain uses from a frozen checkpoint.
    Prune {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test accuracy per domain.
    Eval {
        checkpoint: PathBuf,
        /// Experiment config the checkpoint was trained with.
        #[arg(long)]
        config: PathBuf,
        /// One domain index; all domains if absent.
        #[arg(long)]
        domain: Option<usize>,
        /// Evaluate the pruned model and check it against the masked one.
        #[arg(long)]
        pruned: bool,
    },
    /// Score run summaries, or check the published score cells.
    Report {
        /// `summary.json` files or run directories containing one.
        runs: Vec<PathBuf>,
        /// Run whose errors set the allowed error; the first run by default.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Fixture file to check; the built-in file if given without a value.
        #[arg(long, num_args = 0..=1, default_missing_value = "builtin")]
        fixtures: Option<String>,
    },
    /// Finite-difference check of every autograd op.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Precision::Both)]
        precision: Precision,
        /// Mutation check: flip the sign of the conv input gradient.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train once per budget and report the runs side by side.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.75,0.5,0.25")]
        budgets: Vec<f64>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
    Both,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    budget: Option<f64>,
    /// intersection, union, jaccard or none.
    #[arg(long)]
    sharing: Option<String>,
    /// `learned` or `fixed:<weight>`.
    #[arg(long)]
    lambda_ps_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ExperimentArgs {
    /// The config file with flag overrides applied, fully validated.
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(b) = self.budget {
            cfg.train.budget = b;
        }
        if let Some(s) = &self.sharing {
            cfg.train.sharing = parse_sharing(s)?;
        }
        if let Some(m) = &self.lambda_ps_mode {
            cfg.train.lambda_ps_mode = m.parse::<LambdaMode>()?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
            cfg.train.decay_epochs.retain(|&d| d < e);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Why a command stopped, mapped onto the exit code.
#[derive(Debug)]
enum Failure {
    Lib(Error),
    /// A check the command exists to make did not hold.
    Acceptance(String),
    Io(PathBuf, std::io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(Error::Config { .. } | Error::Metric(_)) => 2,
            Failure::Lib(
                Error::State(_)
                | Error::DegenerateLayer { .. }
                | Error::UnknownDomain { .. }
                | Error::EmptyDataset(_)
                | Error::InputShape { .. },
            ) => 3,
            Failure::Lib(Error::Integrity { .. }) => 4,
            Failure::Acceptance(_) => 5,
            Failure::Lib(_) | Failure::Io(..) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Acceptance(msg) => write!(f, "check failed: {msg}"),
            Failure::Io(path, e) => write!(f, "io error on {}: {e}", path.display()),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn run_label(cfg: &ExperimentConfig) -> String {
    let sharing = cfg.train.sharing.map_or("none", SharingKind::name);
    match cfg.train.sharing {
        Some(_) => format!("beta={} {sharing} {}", cfg.train.budget, cfg.train.lambda_ps_mode),
        None => format!("beta={} {sharing}", cfg.train.budget),
    }
}

/// Trains one validated config into `out`; returns the summary written there.
fn train_into(cfg: &ExperimentConfig, data: &[DomainData], out: &Path) -> Result<RunSummary, Failure> {
    let label = run_label(cfg);
    let mut net = MultiDomainNet::new(cfg.net_config()?)?;
    info!("training {label}: {} domains, {} epochs", cfg.domains.len(), cfg.train.epochs);
    let record = train_observed(&mut net, &training_sets(data), &cfg.train, |e| {
        info!(
            "epoch {} domain {}: ce {:.4}, train acc {:.3}, mask means {:?}, sparsity {:.3}",
            e.epoch, e.domain, e.ce, e.train_accuracy, e.mask_means, e.sparsity
        );
    })?;
    if !net.is_frozen() {
        net.freeze_masks();
    }
    let accuracy = test_accuracy(&net, &test_sets(data))?;
    let union_sparsity = sparsity(&net)?.mean;
    let summary = match prune(&net) {
        Ok(pm) => summarize(&label, &pm, accuracy, union_sparsity)?,
        Err(Error::DegenerateLayer { layer }) => {
            warn!("layer {layer} lost every channel; summarizing the unpruned model");
            summarize(&label, &net, accuracy, union_sparsity)?
        }
        Err(e) => return Err(e.into()),
    };
    create_dir(out)?;
    save_model(&net, out.join("model.ckpt"))?;
    write_file(&out.join("log.jsonl"), record.to_jsonl())?;
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    Ok(summary)
}

fn print_summary(s: &RunSummary) {
    let acc: Vec<String> = s.accuracy.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
    println!(
        "{}: accuracy [{}] mean {:.1}, union sparsity {:.3}, FLOP {:.3}, params {:.3}",
        s.label,
        acc.join(", "),
        100.0 * s.accuracy.iter().sum::<f64>() / s.accuracy.len().max(1) as f64,
        s.sparsity,
        s.relative_flop,
        s.relative_params
    );
}

fn cmd_train(exp: &ExperimentArgs, out: &Path) -> Result<(), Failure> {
    let cfg = exp.load()?;
    let data = cfg.generate()?;
    let summary = train_into(&cfg, &data, out)?;
    print_summary(&summary);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(exp: &ExperimentArgs, budgets: &[f64], out: &Path) -> Result<(), Failure> {
    let base = exp.load()?;
    let configs: Vec<ExperimentConfig> = budgets
        .iter()
        .map(|&b| {
            let mut cfg = base.clone();
            cfg.train.budget = b;
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_, _>>()?;
    let data = base.generate()?;
    let mut summaries = Vec::new();
    for cfg in &configs {
        let s = train_into(cfg, &data, &out.join(format!("beta-{}", cfg.train.budget)))?;
        print_summary(&s);
        summaries.push(s);
    }
    if let Some(first) = summaries.first() {
        print!("{}", render_report(&build_report(&summaries, first, &base.metrics)?));
    }
    // A smaller budget must never cost more.
    let monotone = budgets
        .iter()
        .zip(&summaries)
        .all(|(b, s)| budgets.iter().zip(&summaries).all(|(b2, s2)| b2 > b || s2.relative_flop <= s.relative_flop || b2 == b));
    println!("union FLOPs nonincreasing as the budget shrinks: {}", if monotone { "yes" } else { "no" });
    Ok(())
}

fn cmd_prune(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let Checkpoint::Model(net) = load_checkpoint(path)? else {
        return Err(Error::State(format!("{} is already pruned", path.display())).into());
    };
    let pm = prune(&net)?;
    let report = sparsity(&net)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| path.with_extension("pruned.ckpt"));
    save_pruned(&pm, &out)?;
    let per_layer: Vec<String> = report.per_layer.iter().map(|s| format!("{s:.3}")).collect();
    println!("union sparsity {:.3} (per layer [{}])", report.mean, per_layer.join(", "));
    if report.mean < LOW_SPARSITY {
        println!("sparsity below {LOW_SPARSITY}: pruning removes almost nothing");
    }
    let (dense, union) = (mean_macs(&net, MaskView::Dense)?, mean_macs(&pm, MaskView::Union)?);
    let (before, after) = (count_param_bits(&net, true), count_param_bits(&pm, true));
    println!("MACs per image {dense:.0} -> {union:.0} ({:.3}x)", union / dense);
    println!("parameter bits {before} -> {after} ({:.3}x)", after as f64 / before as f64);
    println!("wrote {}", out.display());
    Ok(())
}

enum Loaded {
    Net(MultiDomainNet),
    Pruned(PrunedModel),
}

fn cmd_eval(path: &Path, config: &Path, domain: Option<usize>, pruned: bool) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let loaded = match load_checkpoint(path)? {
        Checkpoint::Model(net) => Loaded::Net(net),
        Checkpoint::Pruned(pm) => Loaded::Pruned(pm),
    };
    let net_config = match &loaded {
        Loaded::Net(n) => n.config(),
        Loaded::Pruned(p) => p.config(),
    };
    if *net_config != cfg.net_config()? {
        return Err(Error::config("net", format!("{} was trained with a different network", path.display())).into());
    }
    let n = cfg.domains.len();
    let domains: Vec<usize> = match domain {
        Some(d) if d >= n => return Err(Error::UnknownDomain { domain: d, domains: n }.into()),
        Some(d) => vec![d],
        None => (0..n).collect(),
    };
    let pm = match (&loaded, pruned) {
        (Loaded::Net(net), true) => Some(prune(net)?),
        _ => None,
    };
    let tests = test_sets(&cfg.generate()?);
    let mut accs = Vec::new();
    for &d in &domains {
        let acc = match (&loaded, &pm) {
            (Loaded::Net(net), Some(pm)) => evaluate_with(&tests[d], |x| {
                let a = net.logits(d, x)?;
                let b = pm.forward(d, x)?;
                let worst = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
                let k = a.shape()[1];
                let same = a.data().chunks(k).zip(b.data().chunks(k)).all(|(u, v)| argmax(u) == argmax(v));
                if worst >= EQUIVALENCE_TOLERANCE || !same {
                    return Err(Error::Metric(format!("pruned logits differ by {worst:e} on domain {d}")));
                }
                Ok(b)
            })
            .map_err(|e| match e {
                Error::Metric(msg) => Failure::Acceptance(msg),
                other => other.into(),
            })?,
            (Loaded::Net(net), None) => evaluate_with(&tests[d], |x| net.logits(d, x))?,
            (Loaded::Pruned(pm), _) => evaluate_with(&tests[d], |x| pm.forward(d, x))?,
        };
        println!("domain {d}: {:.2}%", 100.0 * acc);
        accs.push(acc);
    }
    println!("mean: {:.2}%", 100.0 * accs.iter().sum::<f64>() / accs.len() as f64);
    if pm.is_some() {
        println!("pruned model matches the masked model on every test image");
    }
    Ok(())
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

fn read_summary(path: &Path) -> Result<RunSummary, Failure> {
    let file = if path.is_dir() { path.join("summary.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Failure::Io(file.clone(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(file.display().to_string(), e.to_string()).into())
}

fn cmd_report(runs: &[PathBuf], baseline: Option<&Path>, fixtures: Option<&str>) -> Result<(), Failure> {
    if let Some(source) = fixtures {
        let text = match source {
            "builtin" => BUILTIN_FIXTURES.to_string(),
            path => fs::read_to_string(path).map_err(|e| Failure::Io(path.into(), e))?,
        };
        let checks = check_fixtures(&parse_fixtures(&text, source)?)?;
        println!("{:<20} {:<12} {:>9} {:>9} {:>8} {:>8}  result", "table", "method", "S_O", "S_P", "S_E", "S_E raw");
        for c in &checks {
            println!(
                "{:<20} {:<12} {:>9.1} {:>9.1} {:>8.2} {:>8.2}  {}",
                c.table,
                c.method,
                c.s_o,
                c.s_p,
                c.s_e,
                c.s_e_unrounded,
                if c.passed() { "ok" } else { "MISMATCH" }
            );
        }
        let failed = checks.iter().filter(|c| !c.passed()).count();
        if failed > 0 {
            return Err(Failure::Acceptance(format!("{failed} of {} fixture rows differ from the published cells", checks.len())));
        }
        println!("all {} fixture rows match", checks.len());
    }
    let summaries: Vec<RunSummary> = runs.iter().map(|p| read_summary(p)).collect::<Result<_, _>>()?;
    let base = match baseline {
        Some(p) => Some(read_summary(p)?),
        None => summaries.first().cloned(),
    };
    if fixtures.is_none() || !summaries.is_empty() {
        let rows = match &base {
            Some(b) => build_report(&summaries, b, &Default::default())?,
            None => Vec::new(),
        };
        print!("{}", render_report(&rows));
    }
    Ok(())
}

fn cmd_gradcheck(precision: Precision, inject_fault: bool) -> Result<(), Failure> {
    let fault = inject_fault.then_some(Fault::ConvInputGradSignFlip);
    let mut results: Vec<(&str, GradCheck)> = Vec::new();
    if matches!(precision, Precision::F32 | Precision::Both) {
        results.extend(run_suite::<f32>(fault).map_err(Error::from)?.into_iter().map(|r| ("f32", r)));
    }
    if matches!(precision, Precision::F64 | Precision::Both) {
        results.extend(run_suite::<f64>(fault).map_err(Error::from)?.into_iter().map(|r| ("f64", r)));
    }
    for (p, r) in &results {
        println!(
            "{} {p} {:<24} max rel error {:.2e} (tolerance {:.0e})",
            if r.passed() { "ok  " } else { "FAIL" },
            r.op,
            r.max_rel_error,
            r.tolerance
        );
    }
    let failed: Vec<String> = results.iter().filter(|(_, r)| !r.passed()).map(|(p, r)| format!("{} ({p})", r.op)).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { exp, out } => cmd_train(exp, out),
        Command::Prune { checkpoint, out } => cmd_prune(checkpoint, out.as_deref()),
        Command::Eval { checkpoint, config, domain, pruned } => cmd_eval(checkpoint, config, *domain, *pruned),
        Command::Report { runs, baseline, fixtures } => cmd_report(runs, baseline.as_deref(), fixtures.as_deref()),
        Command::Gradcheck { precision, inject_fault } => cmd_gradcheck(*precision, *inject_fault),
        Command::Sweep { exp, budgets, out } => cmd_sweep(exp, budgets, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
