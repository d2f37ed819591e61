use std::fs::{self, File};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sqn_core::drift::{PilotOptions, ThresholdRule};
use sqn_core::env::resolve;
use sqn_core::harness::{pilot_threshold, resume, run_experiment, summarize, write_summary, Controller, ExperimentConfig, SeedReport};
use sqn_core::train::ClipForm;

#[derive(Parser)]
#[command(name = "sqn", version, about = "Stochastic queueing network control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stabilizing policy, estimate the intervention threshold and dump the drift table.
    Pilot(PilotArgs),
    /// Full experiment: pilot, threshold estimation, online training.
    Train(RunArgs),
    /// Non-learning run of a classical policy.
    Baseline(RunArgs),
    /// Aggregate per-seed metrics under an output directory.
    Summarize(SummarizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    LastCrossing,
    FirstDip,
}

impl From<Rule> for ThresholdRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::LastCrossing => ThresholdRule::LastCrossing,
            Rule::FirstDip => ThresholdRule::FirstDip,
        }
    }
}

#[derive(Args)]
struct PilotArgs {
    /// Built-in network name (sh1, sh2, mh1, mh2) or path to a TOML file.
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Maximum pilot steps.
    #[arg(long, default_value_t = 200_000)]
    steps: usize,
    /// Relative tolerance for the time-average convergence test.
    #[arg(long, default_value_t = 0.01)]
    tol: f64,
    #[arg(long, default_value_t = -0.1, allow_negative_numbers = true)]
    omega: f64,
    #[arg(long, value_enum, default_value_t = Rule::LastCrossing)]
    rule: Rule,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "resume")]
    env: Option<String>,
    /// ia-ppo, ia-pg, ac-ppo, maxweight, backpressure or random.
    #[arg(long, default_value = "ia-ppo")]
    algo: String,
    /// Number of seeds, numbered from 0.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 200_000)]
    steps: u64,
    /// Episode length; 2048 single-hop, 512 multi-hop if omitted.
    #[arg(long)]
    te: Option<usize>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    minibatches: usize,
    #[arg(long, default_value_t = 0.2)]
    clip: f64,
    /// Use the advantage-only clip term instead of the ratio clip.
    #[arg(long)]
    literal_clip: bool,
    #[arg(long, default_value_t = 0.95)]
    lambda: f64,
    /// Skip per-episode advantage normalization.
    #[arg(long)]
    raw_advantages: bool,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = -0.1, allow_negative_numbers = true)]
    omega: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    rmin: f64,
    #[arg(long, value_enum, default_value_t = Rule::LastCrossing)]
    rule: Rule,
    #[arg(long, default_value_t = 50)]
    pilot_episodes: usize,
    /// Episodes between checkpoints (0: only at the end).
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Continue from a checkpoint file; other flags are ignored.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Controller whose final time average defines crossing times.
    #[arg(long)]
    baseline: Option<String>,
}

fn build_config(args: &RunArgs, learner: bool) -> Result<ExperimentConfig> {
    let env = args.env.as_deref().context("--env is required")?;
    let network = resolve(env).with_context(|| format!("loading network {env}"))?;
    let controller: Controller = args.algo.parse()?;
    if controller.is_learner() != learner {
        bail!("{} is not valid here; use `train` for learners and `baseline` for classical policies", args.algo);
    }
    let mut cfg = ExperimentConfig::new(network, controller, &args.out);
    cfg.seeds = (0..args.seeds).collect();
    cfg.total_steps = args.steps;
    if let Some(te) = args.te {
        cfg.train.episode_len = te;
    }
    cfg.train.epochs = args.epochs;
    cfg.train.minibatches = args.minibatches;
    cfg.train.clip = args.clip;
    cfg.train.clip_form = if args.literal_clip { ClipForm::Literal } else { ClipForm::Standard };
    cfg.train.lambda = args.lambda;
    cfg.train.normalize_advantages = !args.raw_advantages;
    cfg.train.lr = args.lr;
    cfg.omega = args.omega;
    cfg.gamma = args.gamma;
    cfg.r_min = args.rmin;
    cfg.threshold_rule = args.rule.into();
    cfg.pilot.max_episodes = args.pilot_episodes;
    cfg.checkpoint_every = args.checkpoint_every;
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(reports: &[SeedReport]) {
    println!("seed,steps,final_time_avg,final_moving_avg,q_star,pilot_point,pilot_weighted");
    for r in reports {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{},{},{:.4},{},{},{},{}",
            r.seed,
            r.steps,
            r.final_time_avg,
            opt(r.final_moving_avg),
            opt(r.final_q_star),
            opt(r.pilot.map(|p| p.point)),
            opt(r.pilot.map(|p| p.weighted)),
        );
    }
}

fn run(args: RunArgs, learner: bool) -> Result<()> {
    let reports = match &args.resume {
        Some(ckpt) => vec![resume(ckpt).with_context(|| format!("resuming {}", ckpt.display()))?],
        None => run_experiment(&build_config(&args, learner)?)?,
    };
    print_reports(&reports);
    Ok(())
}

fn pilot(args: PilotArgs) -> Result<()> {
    let network = resolve(&args.env).with_context(|| format!("loading network {}", args.env))?;
    let dir = args.out.join("pilot");
    fs::create_dir_all(&dir)?;
    let opts = PilotOptions { max_steps: args.steps, tol: args.tol, ..Default::default() };
    println!("seed,steps,converged,point,weighted");
    for seed in 0..args.seeds {
        let (run, est) = pilot_threshold(&network, seed, opts, args.omega, args.rule.into())?;
        est.table.write_csv(File::create(dir.join(format!("seed_{seed}_drift.csv")))?)?;
        println!("{seed},{},{},{},{}", run.steps(), run.converged, est.point, est.weighted);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pilot(a) => pilot(a),
        Command::Train(a) => run(a, true),
        Command::Baseline(a) => run(a, false),
        Command::Summarize(a) => {
            let rows = summarize(&a.out, a.baseline.as_deref())?;
            let path = a.out.join("summary.csv");
            write_summary(&rows, File::create(&path)?)?;
            write_summary(&rows, std::io::stdout())?;
            Ok(())
        }
    }
}
