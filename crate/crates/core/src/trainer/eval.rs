use rand::Rng;

use crate::distributional::argmax_first;
use crate::envs::{episode_rng, Env, SolvedTask};
use crate::error::{Error, Result};
use crate::evalstats::{ScoreMatrix, TaskScores};
use crate::qnet::QNetwork;

/// Per-episode undiscounted raw returns of the ε-greedy policy of head
/// `head` on `task`, sticky actions off. Episodes run in lockstep so each
/// network call covers every live episode.
pub fn evaluate(
    net: &QNetwork,
    head: usize,
    task: &SolvedTask,
    episodes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be >= 1"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let cfg = net.config();
    if head >= cfg.task_count() {
        return Err(Error::OutOfRange(format!("head {head} of {}", cfg.task_count())));
    }
    let actions = task.game.num_actions();
    if cfg.action_counts[head] != actions || cfg.input_shape != task.game.obs_shape() {
        return Err(Error::invalid(format!(
            "head {head} does not fit task {}",
            task.name()
        )));
    }
    let mut envs: Vec<Env> = (0..episodes).map(|_| Env::for_eval(task.game.clone())).collect();
    let mut rngs: Vec<_> = (0..episodes).map(|e| episode_rng(seed, e)).collect();
    let mut obs: Vec<Vec<f32>> = envs.iter_mut().map(|e| to_f32(&e.reset())).collect();
    let mut returns = vec![0.0; episodes];
    loop {
        let live: Vec<usize> = (0..episodes).filter(|&i| !envs[i].is_done()).collect();
        if live.is_empty() {
            break;
        }
        let rows: Vec<&[f32]> = live.iter().map(|&i| obs[i].as_slice()).collect();
        let q = net.q_values(&net.batch_obs(&rows)?, &vec![head; live.len()])?;
        for (&i, qi) in live.iter().zip(&q) {
            let rng = &mut rngs[i];
            let a = if epsilon > 0.0 && rng.gen_bool(epsilon) {
                rng.gen_range(0..actions)
            } else {
                argmax_first(qi)
            };
            let out = envs[i].step(a, rng)?;
            returns[i] += out.reward;
            obs[i] = to_f32(&out.obs);
        }
    }
    Ok(returns)
}

pub(crate) fn to_f32(obs: &[u8]) -> Vec<f32> {
    obs.iter().map(|&v| v as f32).collect()
}

/// Solved tasks in head order.
#[derive(Clone, Debug)]
pub struct EvalSuite {
    pub tasks: Vec<SolvedTask>,
}

impl EvalSuite {
    pub fn new(tasks: Vec<SolvedTask>) -> Self {
        EvalSuite { tasks }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name().to_string()).collect()
    }

    /// Evaluates head `i` on task `i` for every task.
    pub fn evaluate_net(&self, net: &QNetwork, episodes: usize, epsilon: f64, seed: u64) -> Result<ScoreMatrix> {
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for (i, t) in self.tasks.iter().enumerate() {
            let returns = evaluate(net, i, t, episodes, epsilon, seed.wrapping_add(i as u64))?;
            tasks.push(TaskScores {
                name: t.name().to_string(),
                random_return: t.oracle.random_return,
                oracle_return: t.oracle.oracle_return,
                returns,
            });
        }
        Ok(ScoreMatrix { tasks })
    }
}
