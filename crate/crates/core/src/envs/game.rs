//! Compiled grid dynamics and the stepping environment.

use rand::Rng;

use super::spec::{CarEffect, EnvSpec, Move};
use crate::error::{Error, Result};

pub const OBS_CHANNELS: usize = 6;
/// Probability that a sticky environment repeats the previous action.
pub const STICKY_PROB: f64 = 0.25;

const CH_AGENT: usize = 0;
const CH_GOAL: usize = 1;
const CH_HAZARD: usize = 2;
const CH_WALL: usize = 3;
const CH_ITEM: usize = 4;
const CH_SMALL_GOAL: usize = 5;

/// Full environment state (excluding the sticky previous action).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    pub pos: u16,
    /// Bit `i` set once item `i` (coin or key) is collected.
    pub items: u16,
    pub phase: u16,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub next: State,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cell {
    Empty,
    Wall,
    Goal,
    SmallGoal,
    Lava,
    Door,
    /// Coin or key, with its item bit.
    Item(u8),
}

#[derive(Clone, Debug)]
struct LaneCars {
    row: usize,
    period: usize,
    dir: i64,
    cols: Vec<usize>,
}

/// An [`EnvSpec`] compiled into lookup tables.
#[derive(Clone, Debug)]
pub struct Game {
    spec: EnvSpec,
    height: usize,
    width: usize,
    cells: Vec<Cell>,
    start: u16,
    key_bit: Option<u8>,
    coin_bits: u16,
    lanes: Vec<LaneCars>,
    cycle: u16,
}

impl Game {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let height = spec.layout.len();
        let width = spec.layout[0].chars().count();
        let mut cells = Vec::with_capacity(height * width);
        let mut start = None;
        let mut key_bit = None;
        let mut coin_bits = 0u16;
        let mut n_items = 0u8;
        for (y, row) in spec.layout.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                let cell = match ch {
                    '.' => Cell::Empty,
                    '#' => Cell::Wall,
                    'G' => Cell::Goal,
                    'g' => Cell::SmallGoal,
                    'L' => Cell::Lava,
                    'D' => Cell::Door,
                    'A' => {
                        if start.replace((y * width + x) as u16).is_some() {
                            return Err(Error::invalid(format!("{}: two start cells", spec.name)));
                        }
                        Cell::Empty
                    }
                    'c' | 'K' => {
                        if n_items >= 12 {
                            return Err(Error::Resource(format!("{}: too many items", spec.name)));
                        }
                        let bit = n_items;
                        n_items += 1;
                        if ch == 'K' {
                            if key_bit.replace(bit).is_some() {
                                return Err(Error::invalid(format!("{}: two keys", spec.name)));
                            }
                        } else {
                            coin_bits |= 1 << bit;
                        }
                        Cell::Item(bit)
                    }
                    other => {
                        return Err(Error::invalid(format!(
                            "{}: unknown layout character {other:?}",
                            spec.name
                        )))
                    }
                };
                cells.push(cell);
            }
        }
        let start = start.ok_or_else(|| Error::invalid(format!("{}: no start cell", spec.name)))?;
        let mut cycle = 1usize;
        let mut lanes = Vec::new();
        for lane in &spec.lanes {
            if lane.row >= height || lane.period == 0 {
                return Err(Error::invalid(format!("{}: bad lane {lane:?}", spec.name)));
            }
            if lane.cars.iter().any(|&c| c >= width) {
                return Err(Error::invalid(format!("{}: car outside grid", spec.name)));
            }
            cycle = lcm(cycle, lane.period * width);
            lanes.push(LaneCars {
                row: lane.row,
                period: lane.period,
                dir: if lane.leftward { -1 } else { 1 },
                cols: lane.cars.clone(),
            });
        }
        if cycle > u16::MAX as usize {
            return Err(Error::Resource(format!("{}: lane cycle too long", spec.name)));
        }
        Ok(Game {
            spec,
            height,
            width,
            cells,
            start,
            key_bit,
            coin_bits,
            lanes,
            cycle: cycle as u16,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn num_actions(&self) -> usize {
        self.spec.actions.len()
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.height, self.width, OBS_CHANNELS]
    }

    pub fn start_state(&self) -> State {
        State {
            pos: self.start,
            items: 0,
            phase: 0,
        }
    }

    fn car_at(&self, pos: usize, phase: u16) -> bool {
        let (y, x) = (pos / self.width, pos % self.width);
        self.lanes.iter().any(|l| {
            l.row == y
                && l.cols.iter().any(|&c0| {
                    let shift = (phase as usize / l.period) as i64 * l.dir;
                    (c0 as i64 + shift).rem_euclid(self.width as i64) as usize == x
                })
        })
    }

    fn has_key(&self, items: u16) -> bool {
        self.key_bit.is_some_and(|b| items & (1 << b) != 0)
    }

    /// Deterministic dynamics for one executed action.
    pub fn transition(&self, s: State, action: usize) -> Outcome {
        let r = &self.spec.rewards;
        let mv = self.spec.actions[action];
        let (y, x) = ((s.pos as usize) / self.width, (s.pos as usize) % self.width);
        let (dy, dx) = mv.delta();
        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
        let mut pos = s.pos as usize;
        if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
            let cand = ny as usize * self.width + nx as usize;
            let blocked = match self.cells[cand] {
                Cell::Wall => true,
                Cell::Door => !self.has_key(s.items),
                _ => false,
            };
            if !blocked {
                pos = cand;
            }
        }
        let phase = (s.phase + 1) % self.cycle;
        let mut items = s.items;
        let mut reward = r.step;
        let mut done = false;
        if self.car_at(pos, phase) {
            reward += r.car;
            match self.spec.car_effect {
                CarEffect::Respawn => pos = self.start as usize,
                CarEffect::Terminal => done = true,
            }
        } else {
            match self.cells[pos] {
                Cell::Lava => {
                    reward += r.lava;
                    if self.spec.goal_respawn {
                        pos = self.start as usize;
                        items = 0;
                    } else {
                        done = true;
                    }
                }
                Cell::Goal | Cell::SmallGoal => {
                    reward += if self.cells[pos] == Cell::Goal { r.goal } else { r.small_goal };
                    if self.spec.goal_respawn {
                        pos = self.start as usize;
                        items = 0;
                    } else {
                        done = true;
                    }
                }
                Cell::Item(bit) if items & (1 << bit) == 0 => {
                    items |= 1 << bit;
                    if self.coin_bits & (1 << bit) != 0 {
                        reward += r.coin;
                    }
                }
                _ => {}
            }
        }
        Outcome {
            next: State {
                pos: pos as u16,
                items,
                phase,
            },
            reward: reward * self.spec.scale,
            done,
        }
    }

    /// One-hot channel grid, `[H, W, C]` row-major.
    pub fn observe(&self, s: State) -> Vec<u8> {
        let mut obs = vec![0u8; self.height * self.width * OBS_CHANNELS];
        let set = |obs: &mut Vec<u8>, pos: usize, ch: usize| obs[pos * OBS_CHANNELS + ch] = 1;
        for (pos, cell) in self.cells.iter().enumerate() {
            match *cell {
                Cell::Wall => set(&mut obs, pos, CH_WALL),
                Cell::Door if !self.has_key(s.items) => set(&mut obs, pos, CH_WALL),
                Cell::Goal => set(&mut obs, pos, CH_GOAL),
                Cell::SmallGoal => set(&mut obs, pos, CH_SMALL_GOAL),
                Cell::Lava => set(&mut obs, pos, CH_HAZARD),
                Cell::Item(bit) if s.items & (1 << bit) == 0 => set(&mut obs, pos, CH_ITEM),
                _ => {}
            }
            if self.car_at(pos, s.phase) {
                set(&mut obs, pos, CH_HAZARD);
            }
        }
        set(&mut obs, s.pos as usize, CH_AGENT);
        obs
    }

    pub fn cap(&self) -> usize {
        self.spec.episode_cap
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Result of [`Env::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<u8>,
    pub reward: f64,
    /// Terminal state reached or episode cap hit.
    pub done: bool,
    /// True only for a real terminal, not a time-limit cut.
    pub terminal: bool,
    /// The action the dynamics actually executed.
    pub executed: usize,
}

/// A running episode. Sticky actions repeat the previously executed action
/// with probability [`STICKY_PROB`] before dynamics apply.
#[derive(Clone, Debug)]
pub struct Env {
    game: Game,
    state: State,
    prev_action: usize,
    steps: usize,
    done: bool,
    sticky: bool,
}

impl Env {
    pub fn new(game: Game, sticky: bool) -> Self {
        let state = game.start_state();
        Env {
            game,
            state,
            prev_action: 0,
            steps: 0,
            done: false,
            sticky,
        }
    }

    /// Evaluation environments never use sticky actions.
    pub fn for_eval(game: Game) -> Self {
        Self::new(game, false)
    }

    pub fn game(&self) -> &Game {
        &self.game
    }

    pub fn sticky(&self) -> bool {
        self.sticky
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self) -> Vec<u8> {
        self.state = self.game.start_state();
        self.prev_action = 0;
        self.steps = 0;
        self.done = false;
        self.game.observe(self.state)
    }

    pub fn observe(&self) -> Vec<u8> {
        self.game.observe(self.state)
    }

    pub fn step<R: Rng>(&mut self, action: usize, rng: &mut R) -> Result<StepResult> {
        if self.done {
            return Err(Error::InvalidState("step after episode end".into()));
        }
        if action >= self.game.num_actions() {
            return Err(Error::OutOfRange(format!(
                "action {action} with {} actions",
                self.game.num_actions()
            )));
        }
        let executed = if self.sticky && rng.gen_bool(STICKY_PROB) {
            self.prev_action
        } else {
            action
        };
        let out = self.game.transition(self.state, executed);
        self.state = out.next;
        self.prev_action = executed;
        self.steps += 1;
        let capped = self.steps >= self.game.cap();
        self.done = out.done || capped;
        Ok(StepResult {
            obs: self.game.observe(self.state),
            reward: out.reward,
            done: self.done,
            terminal: out.done,
            executed,
        })
    }
}

impl Move {
    fn delta(self) -> (i64, i64) {
        match self {
            Move::Noop => (0, 0),
            Move::Up => (-1, 0),
            Move::Right => (0, 1),
            Move::Down => (1, 0),
            Move::Left => (0, -1),
        }
    }
}
