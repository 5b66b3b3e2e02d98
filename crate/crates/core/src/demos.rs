//! Demonstration trajectories: data model, JSON Lines files and scripted
//! waypoint-following demonstrators.
//!
//! Step `t` holds the features observed at time `t`, the action taken from
//! there (`-1` on the final step), the reward received on arriving at `t`
//! and whether `t` ended the episode.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{Cell, Environment, GridMap, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const FINAL_ACTION: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: usize,
    pub features: Vec<f64>,
    pub action: i64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub traj_id: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.features.len())
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn ends_done(&self) -> bool {
        self.steps.last().is_some_and(|s| s.done)
    }

    /// Check contiguity, dimension, finiteness and action-range invariants.
    pub fn validate(&self, action_count: usize) -> Result<()> {
        let id = &self.traj_id;
        let Some(first) = self.steps.first() else {
            return Err(Error::data(format!("trajectory {id:?}: no steps")));
        };
        let d = first.features.len();
        if d == 0 {
            return Err(Error::data(format!("trajectory {id:?}: empty feature vector")));
        }
        let last = self.steps.len() - 1;
        for (i, step) in self.steps.iter().enumerate() {
            let at = || format!("trajectory {id:?} t={}", step.t);
            if step.t != i {
                return Err(Error::data(format!(
                    "trajectory {id:?}: time gap, expected t={i} found t={}",
                    step.t
                )));
            }
            if step.features.len() != d {
                return Err(Error::data(format!(
                    "{}: inconsistent dimensions, expected {d} found {}",
                    at(),
                    step.features.len()
                )));
            }
            if step.features.iter().any(|v| !v.is_finite()) || !step.reward.is_finite() {
                return Err(Error::data(format!("{}: non-finite value", at())));
            }
            if step.done && i != last {
                return Err(Error::data(format!("{}: done before final step", at())));
            }
            let valid_action = if i == last {
                step.action == FINAL_ACTION
            } else {
                step.action >= 0 && (step.action as usize) < action_count
            };
            if !valid_action {
                return Err(Error::data(format!("{}: invalid action {}", at(), step.action)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub trajectories: Vec<Trajectory>,
    pub feature_names: Vec<String>,
    pub action_count: usize,
}

impl DemoSet {
    pub fn new(
        trajectories: Vec<Trajectory>,
        feature_names: Vec<String>,
        action_count: usize,
    ) -> Result<Self> {
        let set = DemoSet {
            trajectories,
            feature_names,
            action_count,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::data("empty demo set"));
        }
        let d = self.feature_names.len();
        let mut seen = HashMap::new();
        for traj in &self.trajectories {
            traj.validate(self.action_count)?;
            if traj.dim() != d {
                return Err(Error::data(format!(
                    "trajectory {:?}: inconsistent dimensions, expected {d} found {}",
                    traj.traj_id,
                    traj.dim()
                )));
            }
            if seen.insert(traj.traj_id.as_str(), ()).is_some() {
                return Err(Error::data(format!("duplicate trajectory id {:?}", traj.traj_id)));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len().saturating_sub(1)).sum()
    }

    pub fn trajectory(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.traj_id == id)
    }

    /// `copies` concatenated copies of every trajectory; copies beyond the
    /// first get an `~c<k>` id suffix.
    pub fn replicated(&self, copies: usize) -> DemoSet {
        let copies = copies.max(1);
        let mut trajectories = Vec::with_capacity(self.trajectories.len() * copies);
        for k in 0..copies {
            for traj in &self.trajectories {
                let mut t = traj.clone();
                if k > 0 {
                    t.traj_id = format!("{}~c{k}", traj.traj_id);
                }
                trajectories.push(t);
            }
        }
        DemoSet {
            trajectories,
            feature_names: self.feature_names.clone(),
            action_count: self.action_count,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    traj_id: String,
    t: usize,
    features: Vec<f64>,
    action: i64,
    reward: f64,
    done: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct DemoMeta {
    feature_names: Vec<String>,
    action_count: usize,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

/// Format `v` rounded to 9 significant digits, in the shortest decimal form
/// that parses back to the rounded value.
pub fn format_sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded}")
}

/// Round to the value that survives a save/load cycle.
pub fn round_sig9(v: f64) -> f64 {
    format_sig9(v).parse().unwrap_or(v)
}

fn write_step_line(out: &mut String, traj_id: &str, step: &Step) {
    let id = serde_json::to_string(traj_id).unwrap_or_else(|_| "\"\"".into());
    let _ = write!(out, "{{\"traj_id\":{id},\"t\":{},\"features\":[", step.t);
    for (i, v) in step.features.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_sig9(*v));
    }
    let _ = writeln!(
        out,
        "],\"action\":{},\"reward\":{},\"done\":{}}}",
        step.action,
        format_sig9(step.reward),
        step.done
    );
}

/// Write `demos` as JSON Lines plus the `<path>.meta.json` companion file.
pub fn save_demos(demos: &DemoSet, path: &Path) -> Result<()> {
    if demos.trajectories.is_empty() {
        return Err(Error::data("empty demo set"));
    }
    let mut body = String::new();
    for traj in &demos.trajectories {
        for step in &traj.steps {
            write_step_line(&mut body, &traj.traj_id, step);
        }
    }
    let write = |p: &Path, bytes: &[u8]| -> Result<()> {
        let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
        f.write_all(bytes).map_err(|e| Error::io(p, e))
    };
    write(path, body.as_bytes())?;
    let meta = DemoMeta {
        feature_names: demos.feature_names.clone(),
        action_count: demos.action_count,
    };
    let mut meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::data(format!("serializing demo metadata: {e}")))?;
    meta_json.push('\n');
    write(&meta_path(path), meta_json.as_bytes())
}

/// Read a JSON Lines demo file and its metadata companion, grouping steps by
/// trajectory id (in order of first appearance) and ordering them by time.
pub fn load_demos(path: &Path) -> Result<DemoSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mpath = meta_path(path);
    let meta_text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: DemoMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, Step)>> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.features.len() != meta.feature_names.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!(
                    "inconsistent dimensions, expected {} features found {}",
                    meta.feature_names.len(),
                    rec.features.len()
                ),
            });
        }
        let entry = groups.entry(rec.traj_id.clone()).or_insert_with(|| {
            order.push(rec.traj_id.clone());
            Vec::new()
        });
        entry.push((
            lineno,
            Step {
                t: rec.t,
                features: rec.features,
                action: rec.action,
                reward: rec.reward,
                done: rec.done,
            },
        ));
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let mut steps = groups.remove(&id).unwrap_or_default();
        steps.sort_by_key(|(_, s)| s.t);
        for (i, (lineno, step)) in steps.iter().enumerate() {
            if step.t != i {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *lineno,
                    msg: format!("trajectory {id:?}: time gap, expected t={i} found t={}", step.t),
                });
            }
        }
        trajectories.push(Trajectory {
            traj_id: id,
            steps: steps.into_iter().map(|(_, s)| s).collect(),
        });
    }
    DemoSet::new(trajectories, meta.feature_names, meta.action_count)
        .map_err(|e| e.in_stage(path.display().to_string()))
}

/// Follow `waypoints` greedily: at each step take the lowest-id action that
/// reduces the shortest-path distance to the current waypoint, or a uniformly
/// random action with probability `noise_eps`. Stops on episode end or on
/// reaching the last waypoint.
pub fn scripted_demonstrate(
    env: &mut dyn Environment,
    waypoints: &[Cell],
    noise_eps: f64,
    seed: u64,
    traj_id: impl Into<String>,
) -> Result<Trajectory> {
    if !(0.0..0.5).contains(&noise_eps) {
        return Err(Error::config(format!("noise_eps {noise_eps} outside [0, 0.5)")));
    }
    if waypoints.is_empty() {
        return Err(Error::config("empty waypoint list"));
    }
    let map: GridMap = env.map().clone();
    let budget = 10 * (map.width + map.height);
    let mut rng = seeded(seed);
    let mut features = env.reset(seed);
    let mut steps = Vec::new();
    let mut reward_in = 0.0;
    let mut wp = 0;
    let mut t = 0;

    loop {
        while wp < waypoints.len() && env.position() == waypoints[wp] {
            wp += 1;
        }
        if wp == waypoints.len() {
            break;
        }
        if t >= budget {
            return Err(Error::runtime(format!(
                "waypoint {:?} not reached within {budget} steps",
                waypoints[wp]
            )));
        }
        let target = waypoints[wp];
        let dist = map.distances_to(target, |c| env.is_open(c) || c == target);
        let here = map.distance(&dist, env.position()).ok_or_else(|| {
            Error::runtime(format!("waypoint {target:?} unreachable from {:?}", env.position()))
        })?;
        let action = if noise_eps > 0.0 && rng.random::<f64>() < noise_eps {
            rng.random_range(0..ACTION_COUNT)
        } else {
            (0..ACTION_COUNT)
                .find(|&a| {
                    GridMap::offset(env.position(), a)
                        .and_then(|n| map.distance(&dist, n))
                        .is_some_and(|d| d < here)
                })
                .ok_or_else(|| Error::runtime("no distance-reducing action"))?
        };
        steps.push(Step {
            t,
            features: features.clone(),
            action: action as i64,
            reward: reward_in,
            done: false,
        });
        let res = env.step(action)?;
        features = res.features;
        reward_in = res.reward;
        t += 1;
        if res.done {
            while wp < waypoints.len() && env.position() == waypoints[wp] {
                wp += 1;
            }
            steps.push(Step {
                t,
                features,
                action: FINAL_ACTION,
                reward: reward_in,
                done: true,
            });
            if wp < waypoints.len() {
                return Err(Error::runtime(format!(
                    "episode ended before waypoint {:?}",
                    waypoints[wp]
                )));
            }
            return Ok(Trajectory {
                traj_id: traj_id.into(),
                steps,
            });
        }
    }
    steps.push(Step {
        t,
        features,
        action: FINAL_ACTION,
        reward: reward_in,
        done: false,
    });
    Ok(Trajectory {
        traj_id: traj_id.into(),
        steps,
    })
}

/// `n` scripted demonstrations through the environment's own waypoints,
/// seeded `seed, seed+1, ...`.
pub fn generate_demos(
    env: &mut dyn Environment,
    n: usize,
    noise_eps: f64,
    seed: u64,
) -> Result<DemoSet> {
    if n == 0 {
        return Err(Error::config("number of demonstrations must be at least 1"));
    }
    let waypoints = env.demo_waypoints();
    let trajectories = (0..n)
        .map(|i| {
            scripted_demonstrate(
                env,
                &waypoints,
                noise_eps,
                seed.wrapping_add(i as u64),
                format!("demo-{i:03}"),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    DemoSet::new(trajectories, env.feature_names(), env.action_count())
}
