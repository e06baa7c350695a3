use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seea_core::checkpoint::{load_model, ModelKind};
use seea_core::config::RunConfig;
use seea_core::env;
use seea_core::evolve::{self, derive_seed, RunOptions};
use seea_core::mcts::{run_search, PolicyProposer, RewardSource};
use seea_core::mgrm::{self, eval_accuracy, label_to_reward, RewardModel};
use seea_core::policy::{ActionText, AgentState, Policy};
use seea_core::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Self-evolving agent trainer for the MiniHouse text world.
#[derive(Debug, Parser)]
#[command(name = "seea", version)]
struct Cli {
    /// Worker threads for episode collection and evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the self-evolution loop.
    Train(TrainArgs),
    /// Greedy evaluation of a policy checkpoint.
    Eval(EvalArgs),
    /// Per-class accuracy of a reward-model checkpoint on a labeled set.
    RmEval(RmEvalArgs),
    /// Run one search from a fresh episode and dump the tree.
    InspectTree(InspectArgs),
    /// Resolve and validate a configuration.
    ValidateConfig(ValidateArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML configuration file; presets and SEEA_<SECTION>_<KEY> variables apply underneath the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from: default, fast or paper-scale.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// ground-truth, frozen-mgrm, supervised-mgrm or self-supervised-mgrm.
    #[arg(long)]
    reward_mode: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a run checkpoint written by an earlier train with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Policy or run checkpoint.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Act with the simulator's planner instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Where to write eval.csv.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RmEvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Reward-model or run checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL of {initial, history, label} records.
    #[arg(long)]
    labeled_set: PathBuf,
    #[arg(long, default_value = "rm-eval.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Policy or run checkpoint; the seeded initial policy when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "tree.jsonl")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Print the fully resolved configuration as TOML.
    #[arg(long)]
    print_defaults: bool,
}

/// Failure classes with stable exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let usage = match &e {
            Error::Config(_) | Error::Input(_) | Error::Checkpoint(_) => true,
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) => false,
            Error::Iteration { source, .. } => matches!(**source, Error::Config(_)),
            _ => false,
        };
        let e = anyhow::Error::new(e);
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::RmEval(a) => rm_eval(a),
        Command::InspectTree(a) => inspect_tree(a),
        Command::ValidateConfig(a) => validate_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// File, then presets and environment, then flags.
fn resolve(cfg: &ConfigArgs, extra: Vec<(String, String)>) -> CliResult<RunConfig> {
    let mut vars: Vec<(String, String)> = std::env::vars().collect();
    if let Some(p) = &cfg.preset {
        vars.push(("SEEA_PRESET".into(), p.clone()));
    }
    if let Some(s) = cfg.seed {
        vars.push(("SEEA_SEED".into(), s.to_string()));
    }
    vars.extend(extra);
    let config = match &cfg.config {
        Some(path) => RunConfig::load(path, vars)?,
        None => RunConfig::resolve("", vars)?,
    };
    println!("config hash {}", config.hash());
    Ok(config)
}

fn print_resolved(config: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", config.to_toml());
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut extra = Vec::new();
    if let Some(m) = &a.reward_mode {
        extra.push(("SEEA_REWARD_MODE".into(), format!("\"{m}\"")));
    }
    if let Some(n) = a.iterations {
        extra.push(("SEEA_ITERATIONS".into(), n.to_string()));
    }
    if let Some(o) = &a.out {
        extra.push(("SEEA_OUT_DIR".into(), format!("\"{}\"", o.display())));
    }
    let config = resolve(&a.cfg, extra)?;
    print_resolved(&config);
    let options = RunOptions { resume: a.resume, stop_after: None };
    let rows = evolve::run(&config, &options)?;
    let last = rows.last().map_or(String::from("none"), |m| format!("{:.4}", m.success_rate));
    println!(
        "completed {} iterations; final success_rate {last}; outputs in {}",
        rows.len(),
        config.out_dir.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    if a.episodes == 0 {
        return Err(usage("episodes must be >= 1"));
    }
    let mut config = resolve(&a.cfg, vec![])?;
    config.eval_episodes = a.episodes;
    print_resolved(&config);
    let seeds = evolve::eval_seeds(&config);
    let summary = if a.oracle {
        evolve::evaluate_with(
            |_, w| {
                env::oracle_action(w)
                    .map(ActionText::new)
                    .ok_or_else(|| Error::Input("oracle asked to act after the episode ended".into()))
            },
            &config.env,
            &seeds,
        )?
    } else {
        let path = a.checkpoint.as_deref().expect("clap enforces --checkpoint or --oracle");
        let params = load_model(path, ModelKind::Policy)?;
        let policy = Policy::new(config.policy);
        if params.dims != policy.config.dims() {
            return Err(usage(format!(
                "{}: checkpoint dims do not match the configured policy",
                path.display()
            )));
        }
        evolve::evaluate_policy(&policy, &params, &config.env, &seeds)?
    };
    println!("success_rate {:.4}", summary.success_rate);
    println!("avg_steps {:.4}", summary.avg_steps);
    write_eval_csv(&a.out, config.seed, &summary).map_err(runtime)?;
    Ok(())
}

/// Header: `episodes,seed,success_rate,avg_steps`.
fn write_eval_csv(path: &Path, seed: u64, s: &evolve::EvalSummary) -> std::io::Result<()> {
    let mut f = create(path)?;
    writeln!(f, "episodes,seed,success_rate,avg_steps")?;
    writeln!(f, "{},{},{:.4},{:.4}", s.episodes, seed, s.success_rate, s.avg_steps)?;
    f.flush()
}

fn create(path: &Path) -> std::io::Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn rm_eval(a: RmEvalArgs) -> CliResult<()> {
    let config = resolve(&a.cfg, vec![])?;
    let rm = RewardModel::new(config.mgrm);
    let params = load_model(&a.checkpoint, ModelKind::Reward)?;
    if params.dims != rm.dims() {
        return Err(usage(format!(
            "{}: checkpoint dims do not match the configured reward model",
            a.checkpoint.display()
        )));
    }
    let file = std::fs::File::open(&a.labeled_set)
        .map_err(|e| usage(format!("{}: {e}", a.labeled_set.display())))?;
    let set = mgrm::read_labeled_jsonl(BufReader::new(file)).map_err(|e| {
        usage(format!("{}: {e}", a.labeled_set.display()))
    })?;
    let report = eval_accuracy(&rm, &params, &set)?;
    print!("{report}");
    let out = create(&a.out).map_err(runtime)?;
    report.write_csv(out)?;
    Ok(())
}

fn inspect_tree(a: InspectArgs) -> CliResult<()> {
    let config = resolve(&a.cfg, vec![])?;
    let policy = Policy::new(config.policy);
    let params = match &a.checkpoint {
        Some(p) => load_model(p, ModelKind::Policy)?,
        None => policy.init_params(derive_seed(config.seed, "policy-init", 0, 0)),
    };
    if params.dims != policy.config.dims() {
        return Err(usage("checkpoint dims do not match the configured policy"));
    }
    let task = derive_seed(config.seed ^ config.env.seed, "inspect-task", 0, 0);
    let (world, obs) = env::reset(task, &config.env)?;
    let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "inspect-tree", 0, 0));
    let proposer = PolicyProposer { policy: &policy, params: &params };
    let rm = RewardModel::new(config.mgrm);
    let rm_params = rm.init_params(derive_seed(config.seed, "rm-init", 0, 0));
    let mapping = config.mgrm.mapping;
    let judge_fn = |s: &AgentState| {
        let label = rm.classify(&rm_params, s).expect("histories hold vocabulary tokens only");
        label_to_reward(label, &mapping)
    };
    let reward = if config.reward_mode.uses_reward_model() {
        RewardSource::Judge(&judge_fn)
    } else {
        RewardSource::GroundTruth
    };
    let tree = run_search(AgentState::new(obs.tokens), world, &proposer, reward, &config.search, rng)?;
    tree.write_jsonl(create(&a.out).map_err(runtime)?)?;
    let root = &tree.dump_records()[0];
    println!("{} nodes written to {}", tree.len(), a.out.display());
    println!("{:<40} {:>6} {:>10}", "action", "N", "Q");
    for e in &root.edges {
        println!("{:<40} {:>6} {:>10.4}", e.action, e.n, e.q);
    }
    Ok(())
}

fn validate_config(a: ValidateArgs) -> CliResult<()> {
    let config = resolve(&a.cfg, vec![])?;
    if a.print_defaults {
        print_resolved(&config);
    } else {
        println!("ok");
    }
    Ok(())
}
