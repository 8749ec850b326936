//! A suite of small grid games with distinct dynamics and reward scales,
//! sticky-action stochasticity, variants for transfer, exact tabular
//! oracles, and behavior-policy dataset generation.
//!
//! Every task shares the `6 × 6 × 6` one-hot observation layout (agent,
//! goals, hazards, walls, items, small goals), so one encoder serves all.

mod behavior;
mod game;
mod oracle;
mod spec;

pub use behavior::{
    build_schedule, episode_rng, generate_dataset, normalized, BehaviorPolicy, GenReport,
    ScheduleConfig, ScheduleInfo, SchedulePhase, Snapshot,
};
pub use game::{Env, Game, Outcome, State, StepResult, OBS_CHANNELS, STICKY_PROB};
pub use oracle::{
    random_return, rollout_return, sweep_snapshot, value_iteration, value_iteration_with,
    OracleTable, QTable, StateSpace, ViOptions, MAX_CONTEXTS,
};
pub use spec::{
    default_suite, find_task, held_out_suite, make_variant, CarEffect, EnvSpec, Lane, Move,
    Rewards, EPISODE_CAP, GRID, VARIANTS,
};

use crate::datasets::{Episode, Frames, ObsDtype, TaskDataset};
use crate::error::{Error, Result};

pub const OBS_SHAPE: [usize; 3] = [GRID, GRID, OBS_CHANNELS];

/// A compiled task with its exact solution.
#[derive(Clone, Debug)]
pub struct SolvedTask {
    pub game: Game,
    pub oracle: OracleTable,
}

impl SolvedTask {
    pub fn new(spec: EnvSpec, gamma: f64) -> Result<Self> {
        let game = Game::new(spec)?;
        let oracle = value_iteration(&game, gamma, 1e-8)?;
        Ok(SolvedTask { game, oracle })
    }

    pub fn name(&self) -> &str {
        &self.game.spec().name
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        normalized(raw, &self.oracle)
    }
}

/// Single-step bandit data: every episode pulls `data_arm` once and ends.
/// The observation is a constant all-zero frame of `obs_shape`.
pub fn narrow_bandit_dataset(
    arms: u32,
    data_arm: u32,
    reward: f32,
    episodes: usize,
    obs_shape: [usize; 3],
) -> Result<TaskDataset> {
    if data_arm >= arms {
        return Err(Error::OutOfRange(format!("arm {data_arm} of {arms}")));
    }
    let frame: usize = obs_shape.iter().product();
    let mut t = TaskDataset::new(0, arms, obs_shape, ObsDtype::U8);
    for _ in 0..episodes {
        t.push_episode(Episode {
            frames: Frames::U8(vec![0; 2 * frame]),
            actions: vec![data_arm],
            rewards: vec![reward],
            terminal: true,
        })?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests;
