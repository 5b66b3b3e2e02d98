//! Joint training of the meta-controller and the option policies with
//! call-and-return execution, experience routing between options, per-episode
//! metrics and checkpoints.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{input_hash, Stamp};
use crate::demos::{load_demos, DemoSet};
use crate::envs::{make_env, Environment};
use crate::error::{Error, Result};
use crate::hrl::{
    accumulate_meta_reward, intrinsic_reward, termination_check, AbstractMdp, AbstractState,
    OptionExecution, Outcome, Transition, DEFAULT_BONUS, DEFAULT_TIMEOUT,
};
use crate::learners::{
    extract_demo_meta_actions, fixed_meta, plan_from_demo_actions, reuse_select, state_key,
    LinearSchedule, QTable, ReusePolicy, GAMMA, LOW_ALPHA, META_ALPHA, META_EPSILON,
};
use crate::rng::{derive_seed, derived, Rng};
use crate::tsc::SubgoalSet;

pub const SUCCESS_WINDOW: usize = 100;
pub const METRICS_HEADER: &str = "episode,env_steps,return,ep_len,opt_success_rates,meta_eps,reuse_prob,ms";
const EPISODE_TAG: u64 = 0x0e9;
const EVAL_TAG: u64 = 0xe7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaVariant {
    #[serde(rename = "qlearn")]
    Qlearn,
    #[serde(rename = "reuse")]
    Reuse,
    #[serde(rename = "fixed")]
    Fixed,
    #[serde(rename = "flat-baseline")]
    FlatBaseline,
}

impl MetaVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetaVariant::Qlearn => "qlearn",
            MetaVariant::Reuse => "reuse",
            MetaVariant::Fixed => "fixed",
            MetaVariant::FlatBaseline => "flat-baseline",
        }
    }

    fn learns_meta(&self) -> bool {
        matches!(self, MetaVariant::Qlearn | MetaVariant::Reuse)
    }
}

impl FromStr for MetaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qlearn" => Ok(MetaVariant::Qlearn),
            "reuse" => Ok(MetaVariant::Reuse),
            "fixed" => Ok(MetaVariant::Fixed),
            "flat-baseline" | "flat" => Ok(MetaVariant::FlatBaseline),
            other => Err(Error::config(format!("unknown meta variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub seed: u64,
    pub gamma: f64,
    pub meta: MetaVariant,
    pub meta_alpha: f64,
    pub meta_epsilon: f64,
    pub option_timeout: usize,
    pub bonus: f64,
    /// Total environment steps.
    pub budget: u64,
    /// Write checkpoints every this many episodes (0: only at the end).
    pub eval_cadence: u64,
    pub share_experience: bool,
    pub subgoals: Option<PathBuf>,
    /// Demonstrations used by the `reuse` and `fixed` variants.
    pub demos: Option<PathBuf>,
    pub reuse_start: f64,
    pub reuse_end: f64,
    /// Meta decisions over which the reuse probability decays.
    pub reuse_horizon: u64,
    pub low_alpha: f64,
    pub low_eps_start: f64,
    pub low_eps_end: f64,
    /// Steps (per option, or total for the flat learner) of epsilon decay.
    pub low_eps_horizon: u64,
    /// Plan for the fixed meta-controller: option ids or landmark names
    /// (`key`, `door`, `goal`, `start`). Empty: follow the demonstrations.
    pub plan: Vec<String>,
    /// Record wall-clock milliseconds per episode (makes metrics.csv nondeterministic).
    pub timing: bool,
    pub log_executions: bool,
    pub log_transitions: bool,
    pub slip: f64,
    pub max_episode_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: "keydoor-20".into(),
            seed: 0,
            gamma: GAMMA,
            meta: MetaVariant::Qlearn,
            meta_alpha: META_ALPHA,
            meta_epsilon: META_EPSILON,
            option_timeout: DEFAULT_TIMEOUT,
            bonus: DEFAULT_BONUS,
            budget: 300_000,
            eval_cadence: 0,
            share_experience: true,
            subgoals: None,
            demos: None,
            reuse_start: 0.9,
            reuse_end: 0.0,
            reuse_horizon: 2_000,
            low_alpha: LOW_ALPHA,
            low_eps_start: 1.0,
            low_eps_end: 0.1,
            low_eps_horizon: 100_000,
            plan: Vec::new(),
            timing: false,
            log_executions: false,
            log_transitions: false,
            slip: 0.0,
            max_episode_steps: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        if self.budget == 0 {
            return Err(Error::config("budget must be at least 1 step"));
        }
        if self.option_timeout == 0 {
            return Err(Error::config("option_timeout must be at least 1"));
        }
        if !(self.bonus.is_finite() && self.bonus >= 0.0) {
            return Err(Error::config("bonus must be finite and non-negative"));
        }
        for (name, v) in [
            ("meta_epsilon", self.meta_epsilon),
            ("reuse_start", self.reuse_start),
            ("reuse_end", self.reuse_end),
            ("low_eps_start", self.low_eps_start),
            ("low_eps_end", self.low_eps_end),
            ("slip", self.slip),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("meta_alpha", self.meta_alpha), ("low_alpha", self.low_alpha)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("{name} {v} outside (0, 1]")));
            }
        }
        if self.reuse_end > self.reuse_start {
            return Err(Error::config("reuse probability must not increase"));
        }
        if self.meta != MetaVariant::FlatBaseline && self.subgoals.is_none() {
            return Err(Error::config("hierarchical training needs a subgoals file"));
        }
        Ok(())
    }

    fn low_schedule(&self) -> LinearSchedule {
        LinearSchedule {
            start: self.low_eps_start,
            end: self.low_eps_end,
            horizon: self.low_eps_horizon,
        }
    }

    pub fn make_env(&self) -> Result<Box<dyn Environment>> {
        let mut env = make_env(&self.env)?;
        env.set_slip(self.slip);
        if let Some(n) = self.max_episode_steps {
            env.set_max_episode_steps(n);
        }
        Ok(env)
    }
}

/// One row of metrics.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub episode: usize,
    pub env_steps: u64,
    pub ret: f64,
    pub ep_len: usize,
    /// Success rate over each option's trailing executions; `None` if never run.
    pub success_rates: Vec<Option<f64>>,
    pub meta_eps: f64,
    pub reuse_prob: f64,
    pub ms: u64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let rates: Vec<String> = self
            .success_rates
            .iter()
            .map(|r| r.map_or_else(|| "-".to_string(), |v| format!("{v:.4}")))
            .collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode,
            self.env_steps,
            self.ret,
            self.ep_len,
            rates.join("|"),
            self.meta_eps,
            self.reuse_prob,
            self.ms
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Parsed metrics.csv row (only the columns needed for analysis).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub episode: usize,
    pub env_steps: u64,
    pub ret: f64,
    pub ep_len: usize,
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::data("metrics file has an unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::data(format!("metrics line {}: malformed", i + 2));
            if cols.len() != 8 {
                return Err(bad());
            }
            Ok(MetricsRow {
                episode: cols[0].parse().map_err(|_| bad())?,
                env_steps: cols[1].parse().map_err(|_| bad())?,
                ret: cols[2].parse().map_err(|_| bad())?,
                ep_len: cols[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// A meta-level Q update as applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaUpdate {
    pub state: String,
    pub option: usize,
    pub reward: f64,
    pub next: String,
    pub terminal: bool,
    pub discount_pow: u32,
}

/// A raw environment step with the option that was active.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub episode: usize,
    /// Index of the execution within the whole run; `None` for the flat learner.
    pub execution: Option<usize>,
    pub option: Option<usize>,
    pub state: Vec<f64>,
    pub action: usize,
    pub next_state: Vec<f64>,
    pub env_reward: f64,
    pub done: bool,
    pub truncated: bool,
}

/// In-memory record of everything a run did, for verification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
    pub executions: Vec<OptionExecution>,
    pub meta_updates: Vec<MetaUpdate>,
}

/// Learners and exploration state for one run.
#[derive(Debug, Clone)]
pub struct Agent {
    pub mdp: Option<AbstractMdp>,
    pub options: Vec<QTable>,
    /// Own steps executed by each option (drives its epsilon schedule).
    pub option_steps: Vec<u64>,
    pub meta: Option<QTable>,
    pub flat: Option<QTable>,
    pub reuse: Option<ReusePolicy>,
    pub plan: Vec<usize>,
    trailing: Vec<VecDeque<bool>>,
}

impl Agent {
    pub fn success_rates(&self) -> Vec<Option<f64>> {
        self.trailing
            .iter()
            .map(|w| {
                if w.is_empty() {
                    None
                } else {
                    Some(w.iter().filter(|&&b| b).count() as f64 / w.len() as f64)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub ret: f64,
    pub len: usize,
    pub executions: Vec<OptionExecution>,
    /// The episode was cut short by the run's step budget.
    pub budget_cut: bool,
}

/// Resolve plan tokens to option ids. Landmark names map to the subgoal of
/// the factor covering features 0 and 1 whose target is nearest to the cell.
pub fn resolve_plan(tokens: &[String], mdp: &AbstractMdp, env: &dyn Environment) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|tok| {
            if let Ok(id) = tok.parse::<usize>() {
                if id >= mdp.n_options() {
                    return Err(Error::config(format!("infeasible fixed plan: unknown option {id}")));
                }
                return Ok(id);
            }
            let cell = env
                .landmark(tok)
                .ok_or_else(|| Error::config(format!("plan token {tok:?} is neither an option id nor a landmark")))?;
            let point = [cell.0 as f64, cell.1 as f64];
            mdp.options
                .iter()
                .filter(|o| o.mask == [0, 1])
                .map(|o| {
                    let d = ((o.target[0] - point[0]).powi(2) + (o.target[1] - point[1]).powi(2)).sqrt();
                    (d, o.option_id)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, id)| id)
                .ok_or_else(|| Error::config(format!("no position subgoal to resolve plan token {tok:?}")))
        })
        .collect()
}

pub struct Trainer {
    pub config: RunConfig,
    env: Box<dyn Environment>,
    pub agent: Agent,
    rng: Rng,
    pub env_steps: u64,
    pub episodes: usize,
    pub executions: usize,
    pub fallbacks: u64,
    pub trace: Option<Trace>,
    learning: bool,
    low_bound: f64,
    meta_bound: f64,
    flat_bound: f64,
    execution_log: Option<String>,
    transition_log: Option<String>,
}

impl Trainer {
    /// Build learners. `subgoals` is required unless the variant is the flat
    /// baseline; `demos` is used by `reuse` and, without an explicit plan, `fixed`.
    pub fn new(config: RunConfig, subgoals: Option<SubgoalSet>, demos: Option<&DemoSet>) -> Result<Self> {
        let mut probe = config.clone();
        if probe.meta != MetaVariant::FlatBaseline && probe.subgoals.is_none() {
            probe.subgoals = Some(PathBuf::from("<in-memory>"));
        }
        probe.validate()?;
        let env = config.make_env()?;
        let n_actions = env.action_count();
        let low_eps = config.low_eps_start;
        let map = env.map();
        let diameter = ((map.width.pow(2) + map.height.pow(2)) as f64 + 1.0).sqrt();
        let g = config.gamma;
        let r_shape = 1.0 + (1.0 - g) * diameter;
        let low_bound = r_shape / (1.0 - g) + config.bonus + 1e-9;
        let meta_bound = env.max_return() / (1.0 - g) + 1e-9;
        let flat_bound = env.max_step_reward() / (1.0 - g) + 1e-9;

        let mut agent = Agent {
            mdp: None,
            options: Vec::new(),
            option_steps: Vec::new(),
            meta: None,
            flat: None,
            reuse: None,
            plan: Vec::new(),
            trailing: Vec::new(),
        };
        if config.meta == MetaVariant::FlatBaseline {
            agent.flat = Some(QTable::new(n_actions, config.low_alpha, low_eps, g)?);
        } else {
            let subgoals = subgoals.ok_or_else(|| Error::config("hierarchical training needs subgoals"))?;
            let mdp = AbstractMdp::new(subgoals, g, config.option_timeout, env.feature_dim())?;
            if mdp.n_options() == 0 {
                return Err(Error::data("subgoal set is empty; nothing to train"));
            }
            let n = mdp.n_options();
            agent.options = (0..n)
                .map(|_| QTable::new(n_actions, config.low_alpha, low_eps, g))
                .collect::<Result<_>>()?;
            agent.option_steps = vec![0; n];
            agent.trailing = vec![VecDeque::new(); n];
            if config.meta.learns_meta() {
                agent.meta = Some(QTable::new(n, config.meta_alpha, config.meta_epsilon, g)?);
            }
            let demo_actions = || -> Result<_> {
                let demos = demos.ok_or_else(|| {
                    Error::config(format!("meta variant {} needs demonstrations", config.meta.as_str()))
                })?;
                extract_demo_meta_actions(demos, &mdp)
            };
            match config.meta {
                MetaVariant::Reuse => {
                    agent.reuse = Some(ReusePolicy::new(
                        demo_actions()?,
                        LinearSchedule {
                            start: config.reuse_start,
                            end: config.reuse_end,
                            horizon: config.reuse_horizon,
                        },
                    ));
                }
                MetaVariant::Fixed => {
                    agent.plan = if config.plan.is_empty() {
                        let mut e = config.make_env()?;
                        let f0 = e.reset(0);
                        let start = mdp.abstract_state(&f0, &mdp.initial_state())?;
                        plan_from_demo_actions(&demo_actions()?, &mdp, &start)
                    } else {
                        resolve_plan(&config.plan, &mdp, env.as_ref())?
                    };
                    if agent.plan.is_empty() {
                        return Err(Error::config("infeasible fixed plan: empty plan"));
                    }
                }
                _ => {}
            }
            agent.mdp = Some(mdp);
        }
        Ok(Trainer {
            rng: derived(config.seed, &[0x7a]),
            execution_log: config.log_executions.then(String::new),
            transition_log: config.log_transitions.then(String::new),
            config,
            env,
            agent,
            env_steps: 0,
            episodes: 0,
            executions: 0,
            fallbacks: 0,
            trace: None,
            learning: true,
            low_bound,
            meta_bound,
            flat_bound,
        })
    }

    /// Keep every step, execution and meta update in memory.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Trace::default());
    }

    /// Greedy, non-learning mode for evaluation.
    pub fn freeze(&mut self, seed: u64) {
        self.learning = false;
        self.rng = derived(seed, &[EVAL_TAG]);
        if let Some(r) = &mut self.agent.reuse {
            r.schedule = LinearSchedule { start: 0.0, end: 0.0, horizon: 0 };
        }
    }

    pub fn budget_left(&self) -> bool {
        !self.learning || self.env_steps < self.config.budget
    }

    fn meta_epsilon(&self) -> f64 {
        if !self.learning {
            return 0.0;
        }
        match self.config.meta {
            MetaVariant::Qlearn | MetaVariant::Reuse => self.config.meta_epsilon,
            MetaVariant::Fixed => 0.0,
            MetaVariant::FlatBaseline => self.config.low_schedule().value(self.env_steps),
        }
    }

    fn reuse_prob(&self) -> f64 {
        match (&self.agent.reuse, self.learning) {
            (Some(r), true) => r.reuse_prob(),
            _ => 0.0,
        }
    }

    fn check_bound(&self, q: f64, bound: f64, what: &str) -> Result<()> {
        if q.abs() > bound {
            return Err(Error::runtime(format!("{what} Q value {q} exceeds bound {bound}")));
        }
        Ok(())
    }

    fn log_transition(&mut self, episode: usize, t: usize, f: &[f64], action: i64, reward: f64, done: bool, option: Option<usize>, intrinsic: f64) {
        if let Some(log) = &mut self.transition_log {
            let rec = serde_json::json!({
                "traj_id": format!("ep-{episode}"),
                "t": t,
                "features": f,
                "action": action,
                "reward": reward,
                "done": done,
                "option_id": option,
                "intrinsic_reward": intrinsic,
            });
            log.push_str(&rec.to_string());
            log.push('\n');
        }
    }

    /// Run one episode (training or greedy evaluation).
    pub fn run_episode(&mut self) -> Result<EpisodeSummary> {
        let episode = self.episodes;
        let seed = derive_seed(self.config.seed, &[EPISODE_TAG, episode as u64]);
        let mut features = self.env.reset(seed);
        let summary = if self.config.meta == MetaVariant::FlatBaseline {
            self.flat_episode(episode, &mut features)?
        } else {
            self.hier_episode(episode, &mut features)?
        };
        self.episodes += 1;
        Ok(summary)
    }

    fn flat_episode(&mut self, episode: usize, features: &mut Vec<f64>) -> Result<EpisodeSummary> {
        let n_actions = self.env.action_count();
        let actions: Vec<usize> = (0..n_actions).collect();
        let sched = self.config.low_schedule();
        let mut ret = 0.0;
        let mut len = 0;
        loop {
            let s = state_key(features);
            let eps = if self.learning { sched.value(self.env_steps) } else { 0.0 };
            let table = self.agent.flat.as_ref().expect("flat learner");
            let a = table.select_with_epsilon(&s, &actions, eps, &mut self.rng)?;
            let res = self.env.step(a)?;
            len += 1;
            ret += res.reward;
            if self.learning {
                self.env_steps += 1;
                let terminal = res.done && !res.truncated;
                let q = self.agent.flat.as_mut().expect("flat learner").q_update(
                    &s,
                    a,
                    res.reward,
                    &state_key(&res.features),
                    terminal,
                    1,
                )?;
                self.check_bound(q, self.flat_bound, "flat")?;
            }
            if let Some(tr) = &mut self.trace {
                tr.steps.push(StepRecord {
                    episode,
                    execution: None,
                    option: None,
                    state: features.clone(),
                    action: a,
                    next_state: res.features.clone(),
                    env_reward: res.reward,
                    done: res.done,
                    truncated: res.truncated,
                });
            }
            self.log_transition(episode, len - 1, features, a as i64, res.reward, res.done, None, 0.0);
            *features = res.features;
            let budget_cut = !res.done && !self.budget_left();
            if res.done || budget_cut {
                return Ok(EpisodeSummary {
                    ret,
                    len,
                    executions: Vec::new(),
                    budget_cut,
                });
            }
        }
    }

    fn choose_option(&mut self, s_mu: &AbstractState, progress: &mut usize) -> Result<usize> {
        let mdp = self.agent.mdp.as_ref().expect("hierarchical agent");
        let mut allowed = mdp.allowed_options(s_mu);
        if allowed.is_empty() {
            self.fallbacks += 1;
            log::warn!("no option can be initiated in {s_mu}; choosing among all options");
            allowed = (0..mdp.n_options()).collect();
        }
        match self.config.meta {
            MetaVariant::Fixed => {
                let (o, p) = fixed_meta(&self.agent.plan, mdp, s_mu, *progress)?;
                *progress = p;
                if allowed.contains(&o) {
                    Ok(o)
                } else {
                    // The plan is exhausted and its last subgoal is the current one.
                    Ok(allowed[rand::Rng::random_range(&mut self.rng, 0..allowed.len())])
                }
            }
            MetaVariant::Reuse if self.learning => {
                let table = self.agent.meta.as_ref().expect("meta learner");
                let reuse = self.agent.reuse.as_mut().expect("reuse policy");
                reuse_select(reuse, table, s_mu, &allowed, &mut self.rng)
            }
            _ => {
                let eps = self.meta_epsilon();
                let table = self.agent.meta.as_ref().expect("meta learner");
                table.select_with_epsilon(&s_mu.key(), &allowed, eps, &mut self.rng)
            }
        }
    }

    fn hier_episode(&mut self, episode: usize, features: &mut Vec<f64>) -> Result<EpisodeSummary> {
        let n_actions = self.env.action_count();
        let actions: Vec<usize> = (0..n_actions).collect();
        let sched = self.config.low_schedule();
        let gamma = self.config.gamma;
        let bonus = self.config.bonus;
        let mdp = self.agent.mdp.clone().expect("hierarchical agent");
        let mut s_mu = mdp.abstract_state(features, &mdp.initial_state())?;
        let mut ret = 0.0;
        let mut len = 0;
        let mut progress = 0;
        let mut executions = Vec::new();
        // Steps since the episode began or any option's subgoal region was
        // last entered. Timeouts do not reset it.
        let mut segment: Vec<Transition> = Vec::new();
        loop {
            let o = self.choose_option(&s_mu, &mut progress)?;
            let option = mdp.option(o).clone();
            let start_abstract = s_mu.clone();
            let mut r_mu = 0.0;
            let mut steps = 0usize;
            let mut transitions = Vec::new();
            let execution_index = self.executions;
            let (outcome, episode_over, budget_cut, env_terminal) = loop {
                let s = state_key(features);
                let eps = if self.learning {
                    sched.value(self.agent.option_steps[o])
                } else {
                    0.0
                };
                let a = self.agent.options[o].select_with_epsilon(&s, &actions, eps, &mut self.rng)?;
                let res = self.env.step(a)?;
                let r_int = intrinsic_reward(&option, features, &res.features, gamma, bonus);
                r_mu = accumulate_meta_reward(r_mu, steps, res.reward, gamma);
                steps += 1;
                len += 1;
                ret += res.reward;
                let next_mu = mdp.abstract_state(&res.features, &s_mu)?;
                let reached = option.reached(&res.features);
                let env_terminal = res.done && !res.truncated;
                let tr = Transition {
                    state: features.clone(),
                    action: a,
                    next_state: res.features.clone(),
                    env_reward: res.reward,
                    intrinsic_reward: r_int,
                    done: env_terminal,
                };
                if self.learning {
                    self.env_steps += 1;
                    self.agent.option_steps[o] += 1;
                    let s_next = state_key(&res.features);
                    let q = self.agent.options[o].q_update(&s, a, r_int, &s_next, reached || env_terminal, 1)?;
                    self.check_bound(q, self.low_bound, "option")?;
                    segment.push(tr.clone());
                    let entered: Vec<usize> = mdp
                        .options
                        .iter()
                        .filter(|x| x.reached(&res.features))
                        .map(|x| x.option_id)
                        .collect();
                    if self.config.share_experience {
                        for &o2 in entered.iter().filter(|&&o2| o2 != o) {
                            self.route_experience(&segment, o2)?;
                        }
                    }
                    if !entered.is_empty() {
                        segment.clear();
                    }
                }
                if let Some(t) = &mut self.trace {
                    t.steps.push(StepRecord {
                        episode,
                        execution: Some(execution_index),
                        option: Some(o),
                        state: features.clone(),
                        action: a,
                        next_state: res.features.clone(),
                        env_reward: res.reward,
                        done: res.done,
                        truncated: res.truncated,
                    });
                }
                self.log_transition(episode, len - 1, features, a as i64, res.reward, res.done, Some(o), r_int);
                transitions.push(tr);
                *features = res.features;
                s_mu = next_mu;
                let budget_cut = !res.done && !self.budget_left();
                if let Some(out) = termination_check(&option, features, steps, res.done || budget_cut) {
                    break (out, res.done || budget_cut, budget_cut, env_terminal);
                }
            };
            // Time-limit truncation and budget cuts bootstrap, as at the low level.
            let terminal = env_terminal;
            if self.learning && self.config.meta.learns_meta() {
                let update = MetaUpdate {
                    state: start_abstract.key(),
                    option: o,
                    reward: r_mu,
                    next: s_mu.key(),
                    terminal,
                    discount_pow: steps as u32,
                };
                let table = self.agent.meta.as_mut().expect("meta learner");
                let q = table.q_update(&update.state, o, r_mu, &update.next, terminal, update.discount_pow)?;
                self.check_bound(q, self.meta_bound, "meta")?;
                if let Some(t) = &mut self.trace {
                    t.meta_updates.push(update);
                }
            }
            let w = &mut self.agent.trailing[o];
            w.push_back(outcome == Outcome::SubgoalReached);
            if w.len() > SUCCESS_WINDOW {
                w.pop_front();
            }
            let exec = OptionExecution {
                option_id: o,
                start_abstract,
                end_abstract: s_mu.clone(),
                duration: steps,
                meta_reward: r_mu,
                outcome,
                transitions,
            };
            if let Some(log) = &mut self.execution_log {
                let mut v = serde_json::to_value(&exec).expect("serializable");
                v["episode"] = serde_json::json!(episode);
                log.push_str(&v.to_string());
                log.push('\n');
            }
            if let Some(t) = &mut self.trace {
                t.executions.push(exec.clone());
            }
            self.executions += 1;
            executions.push(exec);
            if episode_over {
                return Ok(EpisodeSummary {
                    ret,
                    len,
                    executions,
                    budget_cut,
                });
            }
        }
    }

    /// Replay `segment` into option `target`'s learner, relabeled with its
    /// intrinsic reward; a transition is terminal when it enters the target's
    /// subgoal region or ends the episode.
    pub fn route_experience(&mut self, segment: &[Transition], target: usize) -> Result<()> {
        if !self.config.share_experience || segment.is_empty() {
            return Ok(());
        }
        let mdp = self.agent.mdp.as_ref().expect("hierarchical agent");
        let option = mdp.option(target).clone();
        let (g, b) = (self.config.gamma, self.config.bonus);
        for tr in segment {
            let r = intrinsic_reward(&option, &tr.state, &tr.next_state, g, b);
            let terminal = option.reached(&tr.next_state) || tr.done;
            let q = self.agent.options[target].q_update(
                &state_key(&tr.state),
                tr.action,
                r,
                &state_key(&tr.next_state),
                terminal,
                1,
            )?;
            self.check_bound(q, self.low_bound, "option")?;
        }
        Ok(())
    }

    fn record(&self, episode: usize, summary: &EpisodeSummary, ms: u64, meta_eps: f64, reuse_prob: f64) -> MetricsRecord {
        MetricsRecord {
            episode,
            env_steps: self.env_steps,
            ret: summary.ret,
            ep_len: summary.len,
            success_rates: self.agent.success_rates(),
            meta_eps,
            reuse_prob,
            ms,
        }
    }

    /// Train until the budget is spent. `on_episode` runs after every
    /// episode with the fresh record, e.g. to write checkpoints.
    pub fn run(&mut self, mut on_episode: impl FnMut(&Trainer, &MetricsRecord) -> Result<()>) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while self.budget_left() {
            let started = Instant::now();
            let meta_eps = self.meta_epsilon();
            let reuse_prob = self.reuse_prob();
            let episode = self.episodes;
            let summary = self.run_episode()?;
            let ms = if self.config.timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            let rec = self.record(episode, &summary, ms, meta_eps, reuse_prob);
            on_episode(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    /// Write learner tables and logs into `dir`.
    pub fn write_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(flat) = &self.agent.flat {
            flat.save(&dir.join("flat.qtable.json"))?;
        }
        if let Some(meta) = &self.agent.meta {
            meta.save(&dir.join("meta.qtable.json"))?;
        }
        for (i, t) in self.agent.options.iter().enumerate() {
            t.save(&dir.join(format!("option_{i}.qtable.json")))?;
        }
        if let Some(log) = &self.execution_log {
            let p = dir.join("executions.jsonl");
            std::fs::write(&p, log).map_err(|e| Error::io(p, e))?;
        }
        if let Some(log) = &self.transition_log {
            let p = dir.join("transitions.bin");
            std::fs::write(&p, log).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Everything a finished training run produced.
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub trainer: Trainer,
}

impl TrainOutcome {
    /// Mean return over the last `n` episodes.
    pub fn trailing_mean(&self, n: usize) -> f64 {
        trailing_mean(&self.records, n)
    }

    /// Index of the first episode with positive return.
    pub fn first_success(&self) -> Option<usize> {
        self.records.iter().find(|r| r.ret > 0.0).map(|r| r.episode)
    }
}

pub fn trailing_mean(records: &[MetricsRecord], n: usize) -> f64 {
    let tail = &records[records.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|r| r.ret).sum::<f64>() / tail.len() as f64
}

fn load_inputs(config: &RunConfig) -> Result<(Option<SubgoalSet>, Option<DemoSet>)> {
    let subgoals = match (&config.subgoals, config.meta) {
        (_, MetaVariant::FlatBaseline) => None,
        (Some(p), _) => Some(SubgoalSet::load(p)?),
        (None, _) => return Err(Error::config("hierarchical training needs a subgoals file")),
    };
    let needs_demos =
        config.meta == MetaVariant::Reuse || (config.meta == MetaVariant::Fixed && config.plan.is_empty());
    let demos = match (&config.demos, needs_demos) {
        (Some(p), true) => Some(load_demos(p)?),
        (None, true) => {
            return Err(Error::config(format!(
                "meta variant {} needs a demos file",
                config.meta.as_str()
            )))
        }
        _ => None,
    };
    Ok((subgoals, demos))
}

/// Train in memory without touching the filesystem beyond reading inputs.
pub fn train_in_memory(
    config: &RunConfig,
    subgoals: Option<SubgoalSet>,
    demos: Option<&DemoSet>,
    trace: bool,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), subgoals, demos)?;
    if trace {
        trainer.enable_trace();
    }
    let records = trainer.run(|_, _| Ok(()))?;
    Ok(TrainOutcome { records, trainer })
}

/// Full training run writing metrics and checkpoints to `run_dir`.
pub fn train(config: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let (subgoals, demos) = load_inputs(config)?;
    let mut trainer = Trainer::new(config.clone(), subgoals.clone(), demos.as_ref())?;
    let mut resolved = config.clone();
    if config.meta == MetaVariant::Fixed {
        resolved.plan = trainer.agent.plan.iter().map(|o| o.to_string()).collect();
    }
    trainer.config = resolved.clone();
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(p) = &config.subgoals {
        if config.meta != MetaVariant::FlatBaseline {
            inputs.push(p);
        }
    }
    if demos.is_some() {
        if let Some(p) = &config.demos {
            inputs.push(p);
        }
    }
    Stamp::new("train", &resolved, input_hash(&inputs)?).write(run_dir)?;
    if let Some(s) = &subgoals {
        s.save(&run_dir.join("subgoals.json"))?;
    }
    let cadence = config.eval_cadence;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let metrics_path = run_dir.join("metrics.csv");
    let records = trainer.run(|t, rec| {
        metrics.push_str(&rec.csv_row());
        metrics.push('\n');
        if cadence > 0 && (rec.episode as u64 + 1) % cadence == 0 {
            t.write_checkpoint(run_dir)?;
            std::fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;
        }
        Ok(())
    })?;
    trainer.write_checkpoint(run_dir)?;
    std::fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;
    if trainer.fallbacks > 0 {
        log::warn!("uniform option fallback used {} times", trainer.fallbacks);
    }
    Ok(TrainOutcome { records, trainer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_length: f64,
    /// Per option: fraction of its executions that reached the subgoal.
    pub success_rates: Vec<Option<f64>>,
    pub returns: Vec<f64>,
}

/// Greedy evaluation of the agent held by `trainer`.
pub fn evaluate_agent(trainer: &mut Trainer, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    trainer.freeze(seed);
    let n = trainer.agent.options.len();
    let mut reached = vec![0usize; n];
    let mut started = vec![0usize; n];
    let mut returns = Vec::with_capacity(episodes);
    let mut lengths = 0usize;
    let base = trainer.episodes;
    for i in 0..episodes {
        trainer.episodes = base + i;
        let ep_seed = derive_seed(seed, &[EVAL_TAG, i as u64]);
        trainer.config.seed = ep_seed;
        let s = trainer.run_episode()?;
        for e in &s.executions {
            started[e.option_id] += 1;
            if e.outcome == Outcome::SubgoalReached {
                reached[e.option_id] += 1;
            }
        }
        returns.push(s.ret);
        lengths += s.len;
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64;
    Ok(EvalSummary {
        episodes,
        mean_return: mean,
        std_return: var.sqrt(),
        mean_length: lengths as f64 / episodes as f64,
        success_rates: (0..n)
            .map(|o| (started[o] > 0).then(|| reached[o] as f64 / started[o] as f64))
            .collect(),
        returns,
    })
}

/// Load checkpoints from a training run directory and evaluate greedily.
pub fn evaluate(run_dir: &Path, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if !run_dir.is_dir() {
        return Err(Error::data(format!("run directory {} does not exist", run_dir.display())));
    }
    let stamp = Stamp::read(run_dir)?;
    let mut config: RunConfig = serde_json::from_value(stamp.config)
        .map_err(|e| Error::data(format!("config.json: {e}")))?;
    config.log_executions = false;
    config.log_transitions = false;
    let subgoals = if config.meta == MetaVariant::FlatBaseline {
        None
    } else {
        Some(SubgoalSet::load(&run_dir.join("subgoals.json"))?)
    };
    let demos = if config.meta == MetaVariant::Reuse {
        match &config.demos {
            Some(p) => Some(load_demos(p)?),
            None => None,
        }
    } else {
        None
    };
    let mut probe = config.clone();
    if probe.meta == MetaVariant::Reuse && demos.is_none() {
        // The reuse schedule is disabled during evaluation; the meta table suffices.
        probe.meta = MetaVariant::Qlearn;
    }
    let mut trainer = Trainer::new(probe, subgoals, demos.as_ref())?;
    let n_actions = trainer.env.action_count();
    if let Some(flat) = &mut trainer.agent.flat {
        *flat = QTable::load(&run_dir.join("flat.qtable.json"), n_actions)?;
    }
    let n_options = trainer.agent.options.len();
    if let Some(meta) = &mut trainer.agent.meta {
        *meta = QTable::load(&run_dir.join("meta.qtable.json"), n_options)?;
    }
    for i in 0..n_options {
        let p = run_dir.join(format!("option_{i}.qtable.json"));
        trainer.agent.options[i] = QTable::load(&p, n_actions)?;
    }
    let extra = std::fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix("option_")
                .and_then(|r| r.strip_suffix(".qtable.json"))
                .and_then(|id| id.parse::<usize>().ok())
                .is_some_and(|id| id >= n_options)
        })
        .count();
    if extra > 0 {
        return Err(Error::data("checkpoint has more option tables than the subgoal set"));
    }
    evaluate_agent(&mut trainer, episodes, seed)
}

/// Mean return over the trailing window, as written in a metrics file.
pub fn summarize_metrics(path: &Path, window: usize) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_metrics(&text)?;
    let tail = &rows[rows.len().saturating_sub(window)..];
    if tail.is_empty() {
        return Ok(0.0);
    }
    Ok(tail.iter().map(|r| r.ret).sum::<f64>() / tail.len() as f64)
}
