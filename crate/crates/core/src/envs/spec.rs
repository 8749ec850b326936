//! Declarative task specifications and the built-in suite.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Noop,
    Up,
    Right,
    Down,
    Left,
}

/// What a car does to the agent on contact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CarEffect {
    /// Back to the start cell, episode continues.
    Respawn,
    Terminal,
}

/// A row of cars moving one cell every `period` steps, wrapping around.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lane {
    pub row: usize,
    pub period: usize,
    pub leftward: bool,
    /// Car columns at phase 0.
    pub cars: Vec<usize>,
}

/// Reward units, multiplied by the task's scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rewards {
    pub goal: f64,
    pub small_goal: f64,
    pub coin: f64,
    pub lava: f64,
    pub car: f64,
    pub step: f64,
}

impl Default for Rewards {
    fn default() -> Self {
        Rewards {
            goal: 1.0,
            small_goal: 0.3,
            coin: 0.0,
            lava: -1.0,
            car: 0.0,
            step: 0.0,
        }
    }
}

/// A grid game. Layout characters: `.` floor, `#` wall, `A` start, `G` goal,
/// `g` small goal, `c` coin, `K` key, `D` door (passable once the key is
/// held), `L` lava.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub layout: Vec<String>,
    pub actions: Vec<Move>,
    pub scale: f64,
    pub rewards: Rewards,
    /// Reaching `G`, `g`, or `L` starts a new round (agent back at start,
    /// items restored) instead of ending the episode.
    pub goal_respawn: bool,
    pub lanes: Vec<Lane>,
    pub car_effect: CarEffect,
    pub episode_cap: usize,
    pub variant_id: u32,
}

pub const EPISODE_CAP: usize = 100;
pub const GRID: usize = 6;

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layout.is_empty() {
            return Err(Error::invalid(format!("{}: empty layout", self.name)));
        }
        let w = self.layout[0].chars().count();
        if w == 0 || self.layout.iter().any(|r| r.chars().count() != w) {
            return Err(Error::invalid(format!("{}: ragged layout", self.name)));
        }
        if self.layout.len() * w > u16::MAX as usize {
            return Err(Error::Resource(format!("{}: grid too large", self.name)));
        }
        if self.actions.is_empty() {
            return Err(Error::invalid(format!("{}: no actions", self.name)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::invalid(format!("{}: scale must be positive", self.name)));
        }
        if self.episode_cap == 0 {
            return Err(Error::invalid(format!("{}: episode cap must be positive", self.name)));
        }
        Ok(())
    }
}

fn rows(s: &[&str]) -> Vec<String> {
    s.iter().map(|r| r.to_string()).collect()
}

const URDL: [Move; 4] = [Move::Up, Move::Right, Move::Down, Move::Left];
const ALL5: [Move; 5] = [Move::Noop, Move::Up, Move::Right, Move::Down, Move::Left];

fn base(name: &str, layout: &[&str], actions: &[Move], scale: f64) -> EnvSpec {
    EnvSpec {
        name: name.to_string(),
        layout: rows(layout),
        actions: actions.to_vec(),
        scale,
        rewards: Rewards::default(),
        goal_respawn: true,
        lanes: Vec::new(),
        car_effect: CarEffect::Terminal,
        episode_cap: EPISODE_CAP,
        variant_id: 0,
    }
}

fn lane(row: usize, period: usize, leftward: bool, cars: &[usize]) -> Lane {
    Lane {
        row,
        period,
        leftward,
        cars: cars.to_vec(),
    }
}

pub fn twin_goals() -> EnvSpec {
    let mut s = base(
        "twin_goals",
        &[
            ".....G", //
            ".####.", //
            ".....L", //
            ".####.", //
            ".....L", //
            "A..g..",
        ],
        &URDL,
        1.0,
    );
    s.rewards.small_goal = 0.1;
    s.rewards.step = -0.01;
    s
}

pub fn coin_row() -> EnvSpec {
    let mut s = base(
        "coin_row",
        &[
            "c....c", //
            "......", //
            ".####.", //
            "......", //
            "......", //
            "A..#g.",
        ],
        &URDL,
        10.0,
    );
    s.rewards.coin = 1.0;
    s.rewards.small_goal = 1.0;
    s.rewards.step = -0.01;
    s
}

pub fn freeway() -> EnvSpec {
    let mut s = base(
        "freeway",
        &[
            "GGGGGG", //
            "......", //
            "......", //
            "......", //
            "......", //
            "..A...",
        ],
        &[Move::Noop, Move::Up, Move::Down],
        1.0,
    );
    s.rewards.goal = 0.5;
    s.rewards.step = -0.01;
    s.car_effect = CarEffect::Respawn;
    s.lanes = vec![
        lane(1, 1, false, &[0, 3]),
        lane(2, 2, true, &[1, 4]),
        lane(3, 1, true, &[2]),
        lane(4, 2, false, &[0, 3]),
    ];
    s
}

pub fn key_door() -> EnvSpec {
    let mut s = base(
        "key_door",
        &[
            "K..#.G", //
            "...#..", //
            "...D..", //
            ".#.#..", //
            ".#.#..", //
            "A#g#..",
        ],
        &URDL,
        0.1,
    );
    s.rewards.step = -0.01;
    s
}

pub fn cliff() -> EnvSpec {
    let mut s = base(
        "cliff",
        &[
            "......", //
            "......", //
            "......", //
            "......", //
            "..g...", //
            "ALLLLG",
        ],
        &URDL,
        1.0,
    );
    s.rewards.small_goal = 0.1;
    s.rewards.step = -0.01;
    s
}

pub fn maze() -> EnvSpec {
    let mut s = base(
        "maze",
        &[
            "A.#...", //
            ".##.#.", //
            "...g#.", //
            ".####.", //
            "......", //
            "...#.G",
        ],
        &URDL,
        0.1,
    );
    s.rewards.step = -0.01;
    s
}

pub fn dodge() -> EnvSpec {
    let mut s = base(
        "dodge",
        &[
            "GGGGGG", //
            "......", //
            "......", //
            "......", //
            "......", //
            "A....g",
        ],
        &ALL5,
        10.0,
    );
    s.car_effect = CarEffect::Respawn;
    s.rewards.small_goal = 0.05;
    s.rewards.car = -1.0;
    s.rewards.step = -0.01;
    s.lanes = vec![
        lane(1, 1, false, &[0, 3]),
        lane(2, 2, true, &[2, 5]),
        lane(3, 1, true, &[1, 4]),
        lane(4, 2, false, &[2]),
    ];
    s
}

pub fn lava_walk() -> EnvSpec {
    let mut s = base(
        "lava_walk",
        &[
            "...#.G", //
            "...#..", //
            "..L#..", //
            ".g.#..", //
            "......", //
            "A...L.",
        ],
        &[Move::Up, Move::Right, Move::Down],
        1.0,
    );
    s.rewards.step = -0.01;
    s
}

pub fn coin_ring() -> EnvSpec {
    let mut s = base(
        "coin_ring",
        &[
            "c....c", //
            ".####.", //
            ".#..#.", //
            ".#..#.", //
            ".####.", //
            "A.g..c",
        ],
        &URDL,
        1.0,
    );
    s.rewards.coin = 0.25;
    s.rewards.small_goal = 0.25;
    s.rewards.step = -0.01;
    s
}

pub fn lava_maze() -> EnvSpec {
    let mut s = base(
        "lava_maze",
        &[
            "A.....", //
            "LLL...", //
            "..L...", //
            ".gL...", //
            "..L...", //
            ".....G",
        ],
        &URDL,
        0.1,
    );
    s.rewards.step = -0.01;
    s
}

/// The default pretraining suite.
pub fn default_suite() -> Vec<EnvSpec> {
    vec![
        twin_goals(),
        coin_row(),
        freeway(),
        key_door(),
        cliff(),
        maze(),
        dodge(),
        lava_walk(),
    ]
}

/// Tasks kept out of pretraining for transfer experiments.
pub fn held_out_suite() -> Vec<EnvSpec> {
    vec![coin_ring(), lava_maze()]
}

/// Named variants: (variant name, base task, variant id).
pub const VARIANTS: [(&str, &str, u32); 3] = [
    ("hazard_fast", "freeway", 1),
    ("shifted_start", "twin_goals", 1),
    ("moved_key", "key_door", 1),
];

/// Same observation and action space, altered dynamics or layout.
pub fn make_variant(spec: &EnvSpec, variant_id: u32) -> Result<EnvSpec> {
    if variant_id == 0 {
        return Ok(spec.clone());
    }
    let mut v = spec.clone();
    v.variant_id = variant_id;
    match (spec.name.as_str(), variant_id) {
        ("freeway", 1) => {
            v.lanes = vec![
                lane(1, 1, false, &[0, 2, 4]),
                lane(2, 1, true, &[1, 4]),
                lane(3, 1, true, &[2, 5]),
                lane(4, 1, false, &[0, 3]),
            ];
        }
        ("twin_goals", 1) => {
            v.layout = rows(&[
                ".....G", //
                ".####.", //
                ".....L", //
                ".####.", //
                ".....L", //
                "..Ag..",
            ]);
        }
        ("key_door", 1) => {
            v.layout = rows(&[
                "...#.G", //
                "...#..", //
                "...D..", //
                ".#.#..", //
                "K#.#..", //
                "A#g#..",
            ]);
        }
        _ => {
            return Err(Error::invalid(format!(
                "task {} has no variant {variant_id}",
                spec.name
            )))
        }
    }
    v.name = format!("{}@{variant_id}", spec.name);
    Ok(v)
}

/// Looks up a task by name across the default and held-out suites, or a
/// variant by its variant name.
pub fn find_task(name: &str) -> Result<EnvSpec> {
    if let Some(s) = default_suite()
        .into_iter()
        .chain(held_out_suite())
        .find(|s| s.name == name)
    {
        return Ok(s);
    }
    if let Some(&(_, base_name, id)) = VARIANTS.iter().find(|(v, _, _)| *v == name) {
        return make_variant(&find_task(base_name)?, id);
    }
    Err(Error::invalid(format!("unknown task `{name}`")))
}
