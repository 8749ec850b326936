//! Exact tabular solutions: reachable-state enumeration, value iteration
//! (optionally over sticky dynamics), and reference returns.

use std::collections::{HashMap, VecDeque};

use super::game::{Game, State, STICKY_PROB};
use crate::datasets::clip_reward;
use crate::distributional::argmax_first;
use crate::error::{Error, Result};

/// Largest number of (state, previous action) contexts value iteration
/// will allocate.
pub const MAX_CONTEXTS: usize = 200_000;

const TERMINAL: usize = usize::MAX;

/// Every state reachable from the start, with its deterministic successors.
#[derive(Clone, Debug)]
pub struct StateSpace {
    pub states: Vec<State>,
    index: HashMap<State, usize>,
    actions: usize,
    /// `[S × A]` successor index (or terminal) and reward.
    next: Vec<(usize, f64)>,
}

impl StateSpace {
    pub fn enumerate(game: &Game) -> Result<Self> {
        let actions = game.num_actions();
        let mut states = vec![game.start_state()];
        let mut index = HashMap::from([(game.start_state(), 0usize)]);
        let mut next = Vec::new();
        let mut queue = VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            // states are expanded in index order, so `next` stays aligned
            debug_assert_eq!(next.len(), i * actions);
            for a in 0..actions {
                let out = game.transition(states[i], a);
                let j = if out.done {
                    TERMINAL
                } else {
                    *index.entry(out.next).or_insert_with(|| {
                        states.push(out.next);
                        queue.push_back(states.len() - 1);
                        states.len() - 1
                    })
                };
                next.push((j, out.reward));
            }
            if states.len() * actions > MAX_CONTEXTS {
                return Err(Error::Resource(format!(
                    "{}: more than {MAX_CONTEXTS} state-action pairs",
                    game.spec().name
                )));
            }
        }
        Ok(StateSpace {
            states,
            index,
            actions,
            next,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    pub fn index_of(&self, s: State) -> Option<usize> {
        self.index.get(&s).copied()
    }

    /// Successor (`None` when terminal) and reward.
    pub fn successor(&self, s: usize, a: usize) -> (Option<usize>, f64) {
        let (j, r) = self.next[s * self.actions + a];
        ((j != TERMINAL).then_some(j), r)
    }
}

/// Options for [`value_iteration_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViOptions {
    pub gamma: f64,
    pub tol: f64,
    /// Solve the sticky-action MDP over (state, previous action).
    pub sticky: bool,
    /// Clip rewards into `[-1, 1]`, matching what a learner sees.
    pub clip_rewards: bool,
    pub max_sweeps: usize,
}

impl Default for ViOptions {
    fn default() -> Self {
        ViOptions {
            gamma: 0.99,
            tol: 1e-8,
            sticky: false,
            clip_rewards: false,
            max_sweeps: 100_000,
        }
    }
}

/// Q* and V* plus reference returns under the raw rewards.
#[derive(Clone, Debug)]
pub struct OracleTable {
    pub space: StateSpace,
    pub options: ViOptions,
    /// `[contexts × A]`; a context is a state, or (state, previous action)
    /// when sticky.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    /// Final sup-norm Bellman residual.
    pub residual: f64,
    pub sweeps: usize,
    /// Expected undiscounted return of the uniform-random policy, sticky off.
    pub random_return: f64,
    /// Undiscounted return of the greedy policy w.r.t. Q*, sticky off.
    pub oracle_return: f64,
}

impl OracleTable {
    fn context(&self, state: usize, prev: usize) -> usize {
        if self.options.sticky {
            state * self.space.actions + prev
        } else {
            state
        }
    }

    /// Q*-values of `state` (after executing `prev`, if sticky).
    pub fn q_values(&self, state: usize, prev: usize) -> &[f64] {
        let a = self.space.actions;
        let c = self.context(state, prev);
        &self.q[c * a..(c + 1) * a]
    }

    pub fn value(&self, state: usize, prev: usize) -> f64 {
        self.v[self.context(state, prev)]
    }

    pub fn greedy(&self, state: usize, prev: usize) -> usize {
        argmax_first(self.q_values(state, prev))
    }

    /// The sticky-off Q table (only meaningful when not sticky).
    pub fn q_table(&self) -> QTable {
        QTable {
            actions: self.space.actions,
            q: if self.options.sticky {
                // the prev = 0 slice, the context every episode starts in
                (0..self.space.len())
                    .flat_map(|s| self.q_values(s, 0).to_vec())
                    .collect()
            } else {
                self.q.clone()
            },
        }
    }
}

/// A plain `[S × A]` table over a [`StateSpace`].
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub actions: usize,
    pub q: Vec<f64>,
}

impl QTable {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.actions..(s + 1) * self.actions]
    }

    pub fn greedy(&self, s: usize) -> usize {
        argmax_first(self.row(s))
    }
}

pub fn value_iteration(game: &Game, gamma: f64, tol: f64) -> Result<OracleTable> {
    value_iteration_with(
        game,
        &ViOptions {
            gamma,
            tol,
            ..Default::default()
        },
    )
}

pub fn value_iteration_with(game: &Game, opts: &ViOptions) -> Result<OracleTable> {
    if !(0.0..1.0).contains(&opts.gamma) {
        return Err(Error::invalid(format!("gamma {} outside [0, 1)", opts.gamma)));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let space = StateSpace::enumerate(game)?;
    let a_n = space.actions;
    let contexts = if opts.sticky { space.len() * a_n } else { space.len() };
    if contexts * a_n > MAX_CONTEXTS {
        return Err(Error::Resource(format!(
            "{}: {} sticky contexts exceed the limit",
            game.spec().name,
            contexts
        )));
    }
    let rew = |r: f64| if opts.clip_rewards { clip_reward(r) } else { r };
    let mut v = vec![0.0f64; contexts];
    let mut q = vec![0.0f64; contexts * a_n];
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    // backup of executing `e` in state `s`; the successor context records `e`
    let backup = |v: &[f64], s: usize, e: usize| -> f64 {
        let (next, r) = space.successor(s, e);
        let cont = match next {
            None => 0.0,
            Some(j) => v[if opts.sticky { j * a_n + e } else { j }],
        };
        rew(r) + opts.gamma * cont
    };
    while residual >= opts.tol {
        if sweeps >= opts.max_sweeps {
            return Err(Error::InvalidState(format!(
                "value iteration did not converge in {sweeps} sweeps (residual {residual:e})"
            )));
        }
        residual = 0.0;
        let mut new_v = vec![0.0f64; contexts];
        for s in 0..space.len() {
            let prevs = if opts.sticky { a_n } else { 1 };
            for p in 0..prevs {
                let c = if opts.sticky { s * a_n + p } else { s };
                let repeat = if opts.sticky { backup(&v, s, p) } else { 0.0 };
                let mut best = f64::NEG_INFINITY;
                for a in 0..a_n {
                    let fresh = backup(&v, s, a);
                    let val = if opts.sticky {
                        (1.0 - STICKY_PROB) * fresh + STICKY_PROB * repeat
                    } else {
                        fresh
                    };
                    residual = residual.max((val - q[c * a_n + a]).abs());
                    q[c * a_n + a] = val;
                    best = best.max(val);
                }
                new_v[c] = best;
            }
        }
        v = new_v;
        sweeps += 1;
    }
    let mut table = OracleTable {
        space,
        options: *opts,
        q,
        v,
        residual,
        sweeps,
        random_return: 0.0,
        oracle_return: 0.0,
    };
    table.random_return = random_return(game, &table.space);
    let greedy: Vec<usize> = (0..table.space.len()).map(|s| table.greedy(s, 0)).collect();
    table.oracle_return = if opts.sticky {
        // greedy in the sticky MDP still depends on prev; roll out with it
        rollout_return(game, &table.space, |s, prev| table.greedy(s, prev))
    } else {
        rollout_return(game, &table.space, |s, _| greedy[s])
    };
    Ok(table)
}

/// Q after `k` synchronous full-backup sweeps from zero, sticky off: the
/// snapshot a tabular Q-learner with expected updates holds after `k`
/// passes.
pub fn sweep_snapshot(space: &StateSpace, gamma: f64, k: usize) -> QTable {
    let a_n = space.actions;
    let mut q = vec![0.0f64; space.len() * a_n];
    for _ in 0..k {
        let v: Vec<f64> = q
            .chunks(a_n)
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for s in 0..space.len() {
            for a in 0..a_n {
                let (next, r) = space.successor(s, a);
                q[s * a_n + a] = r + gamma * next.map_or(0.0, |j| v[j]);
            }
        }
    }
    QTable { actions: a_n, q }
}

/// Exact expected undiscounted return of the uniform-random policy over the
/// episode cap, sticky off.
pub fn random_return(game: &Game, space: &StateSpace) -> f64 {
    let a_n = space.actions as f64;
    let mut v = vec![0.0f64; space.len()];
    for _ in 0..game.cap() {
        let mut nv = vec![0.0f64; space.len()];
        for (s, slot) in nv.iter_mut().enumerate() {
            let mut total = 0.0;
            for a in 0..space.actions {
                let (next, r) = space.successor(s, a);
                total += r + next.map_or(0.0, |j| v[j]);
            }
            *slot = total / a_n;
        }
        v = nv;
    }
    v[space.index_of(game.start_state()).expect("start state enumerated")]
}

/// Undiscounted return of a deterministic policy `(state, prev) -> action`
/// rolled out sticky-off from the start for one episode.
pub fn rollout_return(game: &Game, space: &StateSpace, policy: impl Fn(usize, usize) -> usize) -> f64 {
    let mut s = space.index_of(game.start_state()).expect("start state enumerated");
    let mut prev = 0;
    let mut total = 0.0;
    for _ in 0..game.cap() {
        let a = policy(s, prev);
        let (next, r) = space.successor(s, a);
        total += r;
        prev = a;
        match next {
            None => break,
            Some(j) => s = j,
        }
    }
    total
}
