use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use subgoal_hrl::config::{config_hash, input_hash, Stamp};
use subgoal_hrl::demos::{generate_demos, load_demos, meta_path, save_demos};
use subgoal_hrl::envs::make_env;
use subgoal_hrl::factors::{identify_factors, override_factors, FactorSpec, DEFAULT_CORR_THRESHOLD};
use subgoal_hrl::train::{evaluate, train, trailing_mean, MetaVariant, RunConfig};
use subgoal_hrl::tsc::{discover, DiscoverConfig};
use subgoal_hrl::{Error, ErrorKind, Result};

const OUT_ENV: &str = "SUBGOAL_HRL_OUT";
const DEFAULT_OUT: &str = "out";

#[derive(Parser, Debug)]
#[command(name = "subgoal-hrl", version, about = "Subgoal discovery from demonstrations and hierarchical RL on gridworlds")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated seeds, run in parallel into <out>/seed-<s>.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory (default: $SUBGOAL_HRL_OUT, then ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate scripted demonstrations.
    GenDemos(GenDemosArgs),
    /// Discover subgoals from demonstrations.
    Discover(DiscoverArgs),
    /// Train a hierarchical or flat agent.
    Train(Box<TrainArgs>),
    /// Greedy evaluation of a training run.
    Eval(EvalArgs),
    /// gen-demos, discover, train and eval in sequence.
    Pipeline(Box<PipelineArgs>),
}

#[derive(Args, Debug, Clone, Default)]
struct GenDemosArgs {
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Probability of a random action at each step.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct DiscoverArgs {
    #[arg(long)]
    demos: Option<PathBuf>,
    /// `auto`, a JSON list of {name, mask, threshold}, or a path to one.
    #[arg(long)]
    factors: Option<String>,
    #[arg(long)]
    corr_threshold: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    meta: Option<MetaVariant>,
    #[arg(long)]
    subgoals: Option<PathBuf>,
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    meta_alpha: Option<f64>,
    #[arg(long)]
    meta_epsilon: Option<f64>,
    #[arg(long)]
    option_timeout: Option<usize>,
    #[arg(long)]
    bonus: Option<f64>,
    #[arg(long)]
    eval_cadence: Option<u64>,
    #[arg(long)]
    share_experience: Option<bool>,
    #[arg(long)]
    reuse_start: Option<f64>,
    #[arg(long)]
    reuse_end: Option<f64>,
    #[arg(long)]
    reuse_horizon: Option<u64>,
    #[arg(long)]
    low_alpha: Option<f64>,
    #[arg(long)]
    low_eps_start: Option<f64>,
    #[arg(long)]
    low_eps_end: Option<f64>,
    #[arg(long)]
    low_eps_horizon: Option<u64>,
    /// Fixed meta plan: option ids or landmark names, comma separated.
    #[arg(long, value_delimiter = ',')]
    plan: Option<Vec<String>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    timing: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    log_executions: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    log_transitions: Option<bool>,
    #[arg(long)]
    slip: Option<f64>,
    #[arg(long)]
    max_episode_steps: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct EvalArgs {
    /// Training run directory.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct PipelineArgs {
    #[command(flatten)]
    gen: GenDemosArgs,
    #[arg(long)]
    factors: Option<String>,
    #[arg(long)]
    meta: Option<MetaVariant>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    option_timeout: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDemosConfig {
    env: String,
    n: usize,
    noise: f64,
    seed: u64,
}

impl Default for GenDemosConfig {
    fn default() -> Self {
        GenDemosConfig {
            env: "keydoor-20".into(),
            n: 10,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DiscoverOptions {
    demos: Option<PathBuf>,
    factors: String,
    corr_threshold: f64,
    seed: u64,
    params: DiscoverConfig,
}

impl Default for DiscoverOptions {
    fn default() -> Self {
        DiscoverOptions {
            demos: None,
            factors: "auto".into(),
            corr_threshold: DEFAULT_CORR_THRESHOLD,
            seed: 0,
            params: DiscoverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    run: Option<PathBuf>,
    episodes: usize,
    seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            run: None,
            episodes: 10,
            seed: 0,
        }
    }
}

/// Layout of the `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    gen_demos: GenDemosConfig,
    discover: DiscoverOptions,
    train: RunConfig,
    eval: EvalConfig,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.gen_demos.seed = s;
            self.discover.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
        }
        self
    }
}

/// An error tagged with the command stage that raised it.
struct Failure {
    stage: &'static str,
    error: Error,
}

type StageResult<T> = std::result::Result<T, Failure>;

trait At<T> {
    fn at(self, stage: &'static str) -> StageResult<T>;
}

impl<T> At<T> for Result<T> {
    fn at(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_demos_cmd(cfg: &mut GenDemosConfig, args: &GenDemosArgs, out: &Path) -> Result<PathBuf> {
    if let Some(v) = &args.env {
        cfg.env = v.clone();
    }
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::config(format!("noise {} outside [0, 1]", cfg.noise)));
    }
    let mut env = make_env(&cfg.env)?;
    let demos = generate_demos(env.as_mut(), cfg.n, cfg.noise, cfg.seed)?;
    create_dir(out)?;
    let path = out.join("demos.jsonl");
    save_demos(&demos, &path)?;
    let mut inputs = Vec::new();
    let map = Path::new(&cfg.env);
    if map.is_file() {
        inputs.push(map);
    }
    Stamp::new("gen-demos", cfg, input_hash(&inputs)?).write(out)?;
    println!("wrote {} trajectories to {}", demos.trajectories.len(), path.display());
    Ok(path)
}

fn parse_factor_spec(text: &str) -> Result<Vec<FactorSpec>> {
    let trimmed = text.trim_start();
    let json = if trimmed.starts_with('[') {
        text.to_string()
    } else {
        std::fs::read_to_string(text).map_err(|e| Error::io(text, e))?
    };
    serde_json::from_str(&json).map_err(|e| Error::config(format!("--factors: {e}")))
}

fn discover_cmd(opts: &mut DiscoverOptions, args: &DiscoverArgs, out: &Path) -> Result<PathBuf> {
    if let Some(v) = &args.demos {
        opts.demos = Some(v.clone());
    }
    if let Some(v) = &args.factors {
        opts.factors = v.clone();
    }
    if let Some(v) = args.corr_threshold {
        opts.corr_threshold = v;
    }
    let demos_path = opts
        .demos
        .clone()
        .ok_or_else(|| Error::config("discover needs --demos"))?;
    let demos = load_demos(&demos_path)?;
    let mut inputs = vec![demos_path.clone(), meta_path(&demos_path)];
    let factorization = if opts.factors == "auto" {
        identify_factors(&demos, opts.corr_threshold)?
    } else {
        if !opts.factors.trim_start().starts_with('[') {
            inputs.push(PathBuf::from(&opts.factors));
        }
        override_factors(&parse_factor_spec(&opts.factors)?, demos.feature_dim())?
    };
    let hash = config_hash(&*opts);
    let found = discover(&demos, &factorization, &opts.params, opts.seed, &hash)?;
    for w in &found.warnings {
        log::warn!("{w}");
    }
    create_dir(out)?;
    let path = out.join("subgoals.json");
    found.subgoals.save(&path)?;
    let seg_path = out.join("segmentation.json");
    let seg = serde_json::to_string_pretty(&found.segmentation).expect("serializable") + "\n";
    std::fs::write(&seg_path, seg).map_err(|e| Error::io(&seg_path, e))?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Stamp::new("discover", &*opts, input_hash(&refs)?).write(out)?;
    for f in &found.subgoals.factors {
        let name = factorization.get(f.factor_id).map_or("?", |x| x.name.as_str());
        println!("factor {} ({name}): {} subgoals", f.factor_id, f.subgoals.len());
    }
    Ok(path)
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &a.$field { cfg.$field = v.clone(); })*
        };
    }
    set!(
        env, meta, budget, gamma, meta_alpha, meta_epsilon, option_timeout, bonus, eval_cadence,
        share_experience, reuse_start, reuse_end, reuse_horizon, low_alpha, low_eps_start, low_eps_end,
        low_eps_horizon, plan, timing, log_executions, log_transitions, slip
    );
    if a.subgoals.is_some() {
        cfg.subgoals = a.subgoals.clone();
    }
    if a.demos.is_some() {
        cfg.demos = a.demos.clone();
    }
    if a.max_episode_steps.is_some() {
        cfg.max_episode_steps = a.max_episode_steps;
    }
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let outcome = train(cfg, out)?;
    let r = &outcome.records;
    println!(
        "trained {} episodes, {} env steps, trailing-100 mean return {:.4}",
        r.len(),
        r.last().map_or(0, |x| x.env_steps),
        trailing_mean(r, 100)
    );
    Ok(())
}

fn eval_cmd(cfg: &EvalConfig, out: &Path) -> Result<()> {
    let run = cfg.run.clone().ok_or_else(|| Error::config("eval needs --run"))?;
    let summary = evaluate(&run, cfg.episodes, cfg.seed)?;
    create_dir(out)?;
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(&run)
        .map_err(|e| Error::io(&run, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".qtable.json"))
        .collect();
    inputs.sort();
    inputs.insert(0, run.join("config.json"));
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Stamp::new("eval", cfg, input_hash(&refs)?).write(out)?;
    let text = serde_json::to_string_pretty(&summary).expect("serializable");
    let path = out.join("eval.json");
    std::fs::write(&path, text.clone() + "\n").map_err(|e| Error::io(&path, e))?;
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct PipelineStamp<'a> {
    gen_demos: &'a GenDemosConfig,
    discover: &'a DiscoverOptions,
    train: &'a RunConfig,
    eval: &'a EvalConfig,
}

fn pipeline_cmd(cfg: &mut FileConfig, args: &PipelineArgs, out: &Path) -> StageResult<()> {
    let demos = gen_demos_cmd(&mut cfg.gen_demos, &args.gen, &out.join("demos")).at("gen-demos")?;
    let d_args = DiscoverArgs {
        demos: Some(demos.clone()),
        factors: args.factors.clone(),
        corr_threshold: None,
    };
    let subgoals = discover_cmd(&mut cfg.discover, &d_args, &out.join("discover")).at("discover")?;
    let t = &mut cfg.train;
    t.env = cfg.gen_demos.env.clone();
    t.subgoals = Some(subgoals);
    t.demos = Some(demos);
    if let Some(v) = args.meta {
        t.meta = v;
    }
    if let Some(v) = args.budget {
        t.budget = v;
    }
    if let Some(v) = args.option_timeout {
        t.option_timeout = v;
    }
    train_cmd(t, &out.join("train")).at("train")?;
    cfg.eval.run = Some(out.join("train"));
    if let Some(v) = args.episodes {
        cfg.eval.episodes = v;
    }
    eval_cmd(&cfg.eval, &out.join("eval")).at("eval")?;
    let stamp = PipelineStamp {
        gen_demos: &cfg.gen_demos,
        discover: &cfg.discover,
        train: &cfg.train,
        eval: &cfg.eval,
    };
    Stamp::new("pipeline", &stamp, input_hash(&[]).at("pipeline")?)
        .write(out)
        .at("pipeline")
}

fn run_command(command: &Command, mut cfg: FileConfig, out: &Path) -> StageResult<()> {
    match command {
        Command::GenDemos(a) => gen_demos_cmd(&mut cfg.gen_demos, a, out).map(|_| ()).at("gen-demos"),
        Command::Discover(a) => discover_cmd(&mut cfg.discover, a, out).map(|_| ()).at("discover"),
        Command::Train(a) => {
            apply_train_args(&mut cfg.train, a);
            train_cmd(&cfg.train, out).at("train")
        }
        Command::Eval(a) => {
            if let Some(v) = &a.run {
                cfg.eval.run = Some(v.clone());
            }
            if let Some(v) = a.episodes {
                cfg.eval.episodes = v;
            }
            eval_cmd(&cfg.eval, out).at("eval")
        }
        Command::Pipeline(a) => pipeline_cmd(&mut cfg, a, out),
    }
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::GenDemos(_) => "gen-demos",
        Command::Discover(_) => "discover",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Pipeline(_) => "pipeline",
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn report(f: &Failure) -> ExitCode {
    let msg = f.error.to_string().replace('\n', " ");
    eprintln!("ERR:{}:{msg}", f.stage);
    ExitCode::from(exit_code(f.error.kind()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("ERR:cli:{}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let stage = stage_name(&cli.command);
    let file = match &cli.config {
        Some(p) => match FileConfig::load(p) {
            Ok(c) => c,
            Err(error) => return report(&Failure { stage, error }),
        },
        None => FileConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    if cli.seeds.is_empty() {
        return match run_command(&cli.command, file.with_seed(cli.seed), &out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(f) => report(&f),
        };
    }
    let failures: Vec<Failure> = cli
        .seeds
        .par_iter()
        .filter_map(|&s| {
            let dir = out.join(format!("seed-{s}"));
            run_command(&cli.command, file.clone().with_seed(Some(s)), &dir).err()
        })
        .collect();
    match failures.first() {
        None => ExitCode::SUCCESS,
        Some(f) => report(f),
    }
}
