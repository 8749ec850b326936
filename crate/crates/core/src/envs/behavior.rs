//! Behavior policies and dataset generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::game::{Env, Game};
use super::oracle::{sweep_snapshot, OracleTable, QTable, StateSpace};
use crate::datasets::{Episode, Frames, ObsDtype, TaskDataset};
use crate::error::{Error, Result};

/// One ε-greedy snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub table: QTable,
    pub epsilon: f64,
    /// Sweeps of full backups that produced `table` (`None` for Q*).
    pub sweeps: Option<usize>,
}

/// Mixture weights in force up to a fraction of the collection.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulePhase {
    pub until: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BehaviorPolicy {
    Uniform,
    EpsGreedy(Snapshot),
    /// Each episode draws one snapshot with the weights of the phase that
    /// covers its position in the collection order.
    Schedule {
        snapshots: Vec<Snapshot>,
        phases: Vec<SchedulePhase>,
    },
}

impl BehaviorPolicy {
    pub fn validate(&self, actions: usize) -> Result<()> {
        let check = |s: &Snapshot| -> Result<()> {
            if s.table.actions != actions {
                return Err(Error::invalid("snapshot action count differs from task"));
            }
            if !(0.0..=1.0).contains(&s.epsilon) {
                return Err(Error::invalid(format!("epsilon {} outside [0, 1]", s.epsilon)));
            }
            Ok(())
        };
        match self {
            BehaviorPolicy::Uniform => Ok(()),
            BehaviorPolicy::EpsGreedy(s) => check(s),
            BehaviorPolicy::Schedule { snapshots, phases } => {
                snapshots.iter().try_for_each(check)?;
                if phases.is_empty() || phases.last().unwrap().until < 1.0 {
                    return Err(Error::invalid("schedule phases must cover the collection"));
                }
                for p in phases {
                    if p.weights.len() != snapshots.len()
                        || p.weights.iter().any(|&w| !(w >= 0.0))
                        || p.weights.iter().sum::<f64>() <= 0.0
                    {
                        return Err(Error::invalid("bad schedule weights"));
                    }
                }
                Ok(())
            }
        }
    }

    /// The policy followed for episode `index` of `total`.
    fn episode_policy<'a, R: Rng>(&'a self, index: usize, total: usize, rng: &mut R) -> Option<&'a Snapshot> {
        match self {
            BehaviorPolicy::Uniform => None,
            BehaviorPolicy::EpsGreedy(s) => Some(s),
            BehaviorPolicy::Schedule { snapshots, phases } => {
                let frac = index as f64 / total as f64;
                let phase = phases
                    .iter()
                    .find(|p| frac < p.until)
                    .unwrap_or_else(|| phases.last().unwrap());
                let total_w: f64 = phase.weights.iter().sum();
                let mut u = rng.gen::<f64>() * total_w;
                for (s, &w) in snapshots.iter().zip(&phase.weights) {
                    if u < w {
                        return Some(s);
                    }
                    u -= w;
                }
                snapshots.iter().zip(&phase.weights).rev().find(|(_, &w)| w > 0.0).map(|(s, _)| s)
            }
        }
    }
}

/// Summary of a generated collection.
#[derive(Clone, Debug, PartialEq)]
pub struct GenReport {
    pub episode_returns: Vec<f64>,
    pub mean_return: f64,
}

/// Per-episode random stream: every episode is reproducible on its own.
pub fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

/// Rolls out `episodes` episodes in order and records them.
pub fn generate_dataset(
    game: &Game,
    space: &StateSpace,
    behavior: &BehaviorPolicy,
    task_id: u32,
    episodes: usize,
    sticky: bool,
    seed: u64,
) -> Result<(TaskDataset, GenReport)> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be >= 1"));
    }
    let a_n = game.num_actions();
    behavior.validate(a_n)?;
    let mut data = TaskDataset::new(task_id, a_n as u32, game.obs_shape(), ObsDtype::U8);
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = episode_rng(seed, ep);
        let policy = behavior.episode_policy(ep, episodes, &mut rng);
        let mut env = Env::new(game.clone(), sticky);
        let mut frames = env.reset();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut terminal = false;
        while !env.is_done() {
            let a = match policy {
                None => rng.gen_range(0..a_n),
                Some(snap) => {
                    if rng.gen_bool(snap.epsilon) {
                        rng.gen_range(0..a_n)
                    } else {
                        let s = space
                            .index_of(env.state())
                            .ok_or_else(|| Error::InvalidState("unenumerated state".into()))?;
                        snap.table.greedy(s)
                    }
                }
            };
            let out = env.step(a, &mut rng)?;
            frames.extend_from_slice(&out.obs);
            // the logged action is the agent's choice, as in replay logs
            actions.push(a as u32);
            rewards.push(out.reward as f32);
            terminal = out.terminal;
        }
        returns.push(rewards.iter().map(|&r| r as f64).sum());
        data.push_episode(Episode {
            frames: Frames::U8(frames),
            actions,
            rewards,
            terminal,
        })?;
    }
    let mean_return = returns.iter().sum::<f64>() / episodes as f64;
    Ok((
        data,
        GenReport {
            episode_returns: returns,
            mean_return,
        },
    ))
}

/// Targets for the improving-quality collection schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    /// Leading fraction of the collection that forms the sub-optimal slice.
    pub early_fraction: f64,
    /// Normalized score the early slice should average.
    pub early_target: f64,
    /// Preferred normalized score of the weak snapshot.
    pub weak_target: f64,
    /// Snapshots scoring at or above this are not considered weak.
    pub weak_ceiling: f64,
    pub weak_epsilon: f64,
    pub strong_epsilon: f64,
    /// Largest sweep count considered for the weak snapshot.
    pub max_sweeps: usize,
    /// Rollouts used to measure each snapshot under sticky dynamics.
    pub probe_episodes: usize,
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            early_fraction: 0.2,
            early_target: 0.5,
            weak_target: 0.3,
            weak_ceiling: 0.8,
            weak_epsilon: 0.05,
            strong_epsilon: 0.05,
            max_sweeps: 60,
            probe_episodes: 200,
            gamma: 0.99,
        }
    }
}

/// How a schedule was assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleInfo {
    pub weak_sweeps: usize,
    pub weak_score: f64,
    pub strong_score: f64,
    /// Probability of the weak snapshot in the early slice.
    pub early_weak_weight: f64,
}

pub fn normalized(raw: f64, oracle: &OracleTable) -> f64 {
    let span = oracle.oracle_return - oracle.random_return;
    if span.abs() < 1e-12 {
        0.0
    } else {
        (raw - oracle.random_return) / span
    }
}

/// Builds the two-snapshot schedule: a weak early snapshot of synchronous
/// tabular Q-learning mixed with the converged one so the leading slice
/// averages `early_target`, then the converged snapshot alone.
pub fn build_schedule(
    game: &Game,
    oracle: &OracleTable,
    cfg: &ScheduleConfig,
    sticky: bool,
    seed: u64,
) -> Result<(BehaviorPolicy, ScheduleInfo)> {
    let space = &oracle.space;
    // Prefer snapshots that already earn reward on some route over ones that
    // stall, so weak and strong data overlap on the states that matter.
    let mut best: Option<(usize, bool, f64)> = None;
    for k in 0..=cfg.max_sweeps {
        let snap = sweep_snapshot(space, cfg.gamma, k);
        let ret = super::oracle::rollout_return(game, space, |s, _| snap.greedy(s));
        let score = normalized(ret, oracle);
        let active = ret > 0.0 && score < cfg.weak_ceiling;
        let gap = (score - cfg.weak_target).abs();
        let better = match best {
            None => true,
            Some((_, a, g)) => (active && !a) || (active == a && gap < g - 1e-9),
        };
        if better {
            best = Some((k, active, gap));
        }
    }
    let weak_sweeps = best.expect("at least one candidate").0;
    let weak = Snapshot {
        table: sweep_snapshot(space, cfg.gamma, weak_sweeps),
        epsilon: cfg.weak_epsilon,
        sweeps: Some(weak_sweeps),
    };
    let strong = Snapshot {
        table: oracle.q_table(),
        epsilon: cfg.strong_epsilon,
        sweeps: None,
    };
    let probe = |snap: &Snapshot, salt: u64| -> Result<f64> {
        let (_, rep) = generate_dataset(
            game,
            space,
            &BehaviorPolicy::EpsGreedy(snap.clone()),
            0,
            cfg.probe_episodes,
            sticky,
            seed ^ salt,
        )?;
        Ok(normalized(rep.mean_return, oracle))
    };
    let weak_score = probe(&weak, 0x5eed_0001)?;
    let strong_score = probe(&strong, 0x5eed_0002)?;
    let w = if strong_score > weak_score {
        ((strong_score - cfg.early_target) / (strong_score - weak_score)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let policy = BehaviorPolicy::Schedule {
        snapshots: vec![weak, strong],
        phases: vec![
            SchedulePhase {
                until: cfg.early_fraction,
                weights: vec![w, 1.0 - w],
            },
            SchedulePhase {
                until: 1.0,
                weights: vec![0.0, 1.0],
            },
        ],
    };
    Ok((
        policy,
        ScheduleInfo {
            weak_sweeps,
            weak_score,
            strong_score,
            early_weak_weight: w,
        },
    ))
}
