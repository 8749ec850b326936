//! Episodic per-task datasets, n-step views, stratified batch sampling, and
//! the binary dataset file.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "SQLD" | u32 version (1) | u32 task count
//! per task: u32 task id | u32 action count | u32 H, W, C | u8 dtype (0 = u8, 1 = f32)
//!           | u32 episode count
//! per episode: u32 length L | L+1 observation frames | L × u32 actions
//!              | L × f32 rewards | u8 terminal flag
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SQLD";
pub const DATASET_VERSION: u32 = 1;
/// Upper bound on a single allocation while loading a dataset file.
pub const MAX_LOAD_BYTES: u64 = 4 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsDtype {
    U8,
    F32,
}

/// Observation frames of one episode, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub enum Frames {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl Frames {
    fn len(&self) -> usize {
        match self {
            Frames::U8(v) => v.len(),
            Frames::F32(v) => v.len(),
        }
    }

    fn dtype(&self) -> ObsDtype {
        match self {
            Frames::U8(_) => ObsDtype::U8,
            Frames::F32(_) => ObsDtype::F32,
        }
    }

    fn copy_frame(&self, i: usize, size: usize, out: &mut Vec<f32>) {
        let r = i * size..(i + 1) * size;
        match self {
            Frames::U8(v) => out.extend(v[r].iter().map(|&b| b as f32)),
            Frames::F32(v) => out.extend_from_slice(&v[r]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `len + 1` frames: the start state through the final state.
    pub frames: Frames,
    pub actions: Vec<u32>,
    pub rewards: Vec<f32>,
    /// Whether the final state is terminal (as opposed to a time-limit cut).
    pub terminal: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }
}

/// One logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f32>,
    pub done: bool,
}

/// A sampled n-step window.
#[derive(Clone, Debug, PartialEq)]
pub struct NStepItem {
    pub task: usize,
    pub obs: Vec<f32>,
    pub action: usize,
    /// `Σ_k γ^k clip(r_{t+k})` over the steps actually in the window.
    pub reward: f64,
    pub next_obs: Vec<f32>,
    /// γ raised to the number of steps in the window.
    pub discount: f64,
    pub done: bool,
}

pub fn clip_reward(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

/// Location of a transition: (episode, step).
pub type StepIndex = (u32, u32);

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: u32,
    pub action_count: u32,
    pub obs_shape: [usize; 3],
    pub dtype: ObsDtype,
    episodes: Vec<Episode>,
    /// When set, sampling only draws windows starting at these steps.
    restricted: Option<Vec<StepIndex>>,
}

impl TaskDataset {
    pub fn new(task_id: u32, action_count: u32, obs_shape: [usize; 3], dtype: ObsDtype) -> Self {
        TaskDataset {
            task_id,
            action_count,
            obs_shape,
            dtype,
            episodes: Vec::new(),
            restricted: None,
        }
    }

    pub fn frame_size(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn num_transitions(&self) -> usize {
        match &self.restricted {
            Some(r) => r.len(),
            None => self.episodes.iter().map(Episode::len).sum(),
        }
    }

    pub fn is_restricted(&self) -> bool {
        self.restricted.is_some()
    }

    pub fn push_episode(&mut self, ep: Episode) -> Result<()> {
        if ep.is_empty() {
            return Err(Error::invalid("episodes must have at least one step"));
        }
        if ep.rewards.len() != ep.len() {
            return Err(Error::invalid(format!(
                "{} rewards for {} actions",
                ep.rewards.len(),
                ep.len()
            )));
        }
        if ep.frames.dtype() != self.dtype {
            return Err(Error::invalid("episode frame dtype differs from dataset"));
        }
        if ep.frames.len() != (ep.len() + 1) * self.frame_size() {
            return Err(Error::invalid(format!(
                "{} observation values, expected {} frames of {}",
                ep.frames.len(),
                ep.len() + 1,
                self.frame_size()
            )));
        }
        if let Some(a) = ep.actions.iter().find(|&&a| a >= self.action_count) {
            return Err(Error::OutOfRange(format!(
                "action {a} with {} actions",
                self.action_count
            )));
        }
        if ep.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid("rewards must be finite"));
        }
        if self.restricted.is_some() {
            return Err(Error::InvalidState(
                "cannot add episodes to a subsampled dataset".into(),
            ));
        }
        self.episodes.push(ep);
        Ok(())
    }

    pub fn frame(&self, ep: usize, i: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.frame_size());
        self.episodes[ep]
            .frames
            .copy_frame(i, self.frame_size(), &mut out);
        out
    }

    pub fn transition(&self, ep: usize, t: usize) -> Result<Transition> {
        let e = self
            .episodes
            .get(ep)
            .ok_or_else(|| Error::OutOfRange(format!("episode {ep}")))?;
        if t >= e.len() {
            return Err(Error::OutOfRange(format!("step {t} of {}", e.len())));
        }
        Ok(Transition {
            obs: self.frame(ep, t),
            action: e.actions[t] as usize,
            reward: e.rewards[t] as f64,
            next_obs: self.frame(ep, t + 1),
            done: e.terminal && t + 1 == e.len(),
        })
    }

    /// Every valid window start, honoring any restriction.
    pub fn starts(&self) -> Vec<StepIndex> {
        match &self.restricted {
            Some(r) => r.clone(),
            None => self
                .episodes
                .iter()
                .enumerate()
                .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e as u32, t as u32)))
                .collect(),
        }
    }

    /// Mean undiscounted episode return.
    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(Episode::undiscounted_return).sum::<f64>()
            / self.episodes.len() as f64
    }
}

/// The n-step window starting at step `t` of episode `ep`. Rewards are
/// clipped per step; the window stops early at the episode end.
pub fn nstep_view(
    data: &TaskDataset,
    ep: usize,
    t: usize,
    n: usize,
    gamma: f64,
) -> Result<NStepItem> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let e = data
        .episodes
        .get(ep)
        .ok_or_else(|| Error::OutOfRange(format!("episode {ep}")))?;
    if t >= e.len() {
        return Err(Error::OutOfRange(format!("step {t} of {}", e.len())));
    }
    let end = (t + n).min(e.len());
    let mut reward = 0.0;
    let mut disc = 1.0;
    for k in t..end {
        reward += disc * clip_reward(e.rewards[k] as f64);
        disc *= gamma;
    }
    Ok(NStepItem {
        task: data.task_id as usize,
        obs: data.frame(ep, t),
        action: e.actions[t] as usize,
        reward,
        next_obs: data.frame(ep, end),
        discount: disc,
        done: e.terminal && end == e.len(),
    })
}

/// Per-task datasets, indexed by position (task ids must equal positions).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskDatasetStore {
    pub tasks: Vec<TaskDataset>,
}

/// Index of one sampled window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleIndex {
    pub task: usize,
    pub episode: usize,
    pub step: usize,
}

impl TaskDatasetStore {
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id as usize != i {
                return Err(Error::invalid(format!(
                    "task at position {i} has id {}",
                    t.task_id
                )));
            }
        }
        Ok(TaskDatasetStore { tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.tasks.iter().map(TaskDataset::num_transitions).sum()
    }

    pub fn get(&self, task: usize) -> Result<&TaskDataset> {
        self.tasks
            .get(task)
            .ok_or_else(|| Error::OutOfRange(format!("task {task} of {}", self.tasks.len())))
    }

    pub fn obs_shape(&self) -> Option<[usize; 3]> {
        self.tasks.first().map(|t| t.obs_shape)
    }

    pub fn action_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.action_count as usize).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode(self);
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        decode(&bytes)
    }
}

/// Stratified batch indices: `m_tasks` task draws uniformly with
/// replacement, then `k_per_task` windows from each drawn task, uniform over
/// its valid starts. Tasks are seen equally only in expectation.
pub fn stratified_sample<R: Rng>(
    store: &TaskDatasetStore,
    m_tasks: usize,
    k_per_task: usize,
    rng: &mut R,
) -> Result<Vec<SampleIndex>> {
    if m_tasks == 0 || k_per_task == 0 {
        return Err(Error::invalid("m_tasks and k_per_task must be positive"));
    }
    if store.tasks.is_empty() {
        return Err(Error::InvalidState("no tasks to sample".into()));
    }
    if let Some(t) = store.tasks.iter().find(|t| t.num_transitions() == 0) {
        return Err(Error::InvalidState(format!("task {} has no transitions", t.task_id)));
    }
    let mut out = Vec::with_capacity(m_tasks * k_per_task);
    for _ in 0..m_tasks {
        let task = rng.gen_range(0..store.tasks.len());
        let data = &store.tasks[task];
        for _ in 0..k_per_task {
            let (episode, step) = draw_start(data, rng);
            out.push(SampleIndex { task, episode, step });
        }
    }
    Ok(out)
}

fn draw_start<R: Rng>(data: &TaskDataset, rng: &mut R) -> (usize, usize) {
    if let Some(r) = &data.restricted {
        let (e, s) = r[rng.gen_range(0..r.len())];
        return (e as usize, s as usize);
    }
    let j = rng.gen_range(0..data.num_transitions());
    let mut before = 0;
    for (e, ep) in data.episodes.iter().enumerate() {
        if j < before + ep.len() {
            return (e, j - before);
        }
        before += ep.len();
    }
    unreachable!("index below the transition count")
}

/// Materializes sampled windows.
pub fn gather_nstep(
    store: &TaskDatasetStore,
    idx: &[SampleIndex],
    n: usize,
    gamma: f64,
) -> Result<Vec<NStepItem>> {
    idx.iter()
        .map(|s| nstep_view(store.get(s.task)?, s.episode, s.step, n, gamma))
        .collect()
}

/// How [`slice_fraction`] counts data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceUnit {
    /// Keep the first `ceil(f · episodes)` whole episodes per task.
    Episodes,
    /// Keep the first `ceil(f · transitions)` steps per task, cutting the
    /// last kept episode short (non-terminal).
    Transitions,
}

/// Prefix of every task's data.
pub fn slice_fraction(store: &TaskDatasetStore, fraction: f64, unit: SliceUnit) -> Result<TaskDatasetStore> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut tasks = Vec::with_capacity(store.tasks.len());
    for t in &store.tasks {
        if t.restricted.is_some() {
            return Err(Error::InvalidState("cannot slice a subsampled dataset".into()));
        }
        let mut out = TaskDataset::new(t.task_id, t.action_count, t.obs_shape, t.dtype);
        match unit {
            SliceUnit::Episodes => {
                let keep = (fraction * t.episodes.len() as f64).ceil() as usize;
                out.episodes = t.episodes[..keep.min(t.episodes.len())].to_vec();
            }
            SliceUnit::Transitions => {
                let mut budget = (fraction * t.num_transitions() as f64).ceil() as usize;
                for ep in &t.episodes {
                    if budget == 0 {
                        break;
                    }
                    if ep.len() <= budget {
                        budget -= ep.len();
                        out.episodes.push(ep.clone());
                    } else {
                        out.episodes.push(truncate_episode(ep, budget, t.frame_size()));
                        budget = 0;
                    }
                }
            }
        }
        tasks.push(out);
    }
    Ok(TaskDatasetStore { tasks })
}

fn truncate_episode(ep: &Episode, len: usize, frame: usize) -> Episode {
    let frames = match &ep.frames {
        Frames::U8(v) => Frames::U8(v[..(len + 1) * frame].to_vec()),
        Frames::F32(v) => Frames::F32(v[..(len + 1) * frame].to_vec()),
    };
    Episode {
        frames,
        actions: ep.actions[..len].to_vec(),
        rewards: ep.rewards[..len].to_vec(),
        terminal: false,
    }
}

/// Restricts sampling to `ceil(fraction · N)` transitions chosen uniformly
/// without replacement. Episodes stay intact so windows can still look
/// ahead past the kept start.
pub fn subsample_transitions<R: Rng>(
    data: &TaskDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<TaskDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let all = data.starts();
    if all.is_empty() {
        return Err(Error::InvalidState("no transitions to subsample".into()));
    }
    let keep = ((fraction * all.len() as f64).ceil() as usize).min(all.len());
    let mut idx = sample(rng, all.len(), keep).into_vec();
    idx.sort_unstable();
    let mut out = data.clone();
    out.restricted = Some(idx.into_iter().map(|i| all[i]).collect());
    Ok(out)
}

fn encode(store: &TaskDatasetStore) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut w, DATASET_VERSION);
    put_u32(&mut w, store.tasks.len() as u32);
    for t in &store.tasks {
        put_u32(&mut w, t.task_id);
        put_u32(&mut w, t.action_count);
        for &d in &t.obs_shape {
            put_u32(&mut w, d as u32);
        }
        w.push(match t.dtype {
            ObsDtype::U8 => 0,
            ObsDtype::F32 => 1,
        });
        put_u32(&mut w, t.episodes.len() as u32);
        for ep in &t.episodes {
            put_u32(&mut w, ep.len() as u32);
            match &ep.frames {
                Frames::U8(v) => w.extend_from_slice(v),
                Frames::F32(v) => v.iter().for_each(|x| w.extend_from_slice(&x.to_le_bytes())),
            }
            ep.actions.iter().for_each(|&a| put_u32(&mut w, a));
            ep.rewards.iter().for_each(|r| w.extend_from_slice(&r.to_le_bytes()));
            w.push(ep.terminal as u8);
        }
    }
    w
}

fn decode(bytes: &[u8]) -> Result<TaskDatasetStore> {
    let mut r = Cursor { buf: bytes, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(r.fail(0, "bad magic, not a dataset file"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.fail(4, &format!("unsupported dataset version {version}")));
    }
    let n_tasks = r.u32()?;
    let mut tasks = Vec::new();
    for _ in 0..n_tasks {
        let task_id = r.u32()?;
        let action_count = r.u32()?;
        if action_count == 0 {
            return Err(r.fail(r.pos - 4, "action count must be positive"));
        }
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let dtype = match r.take(1)?[0] {
            0 => ObsDtype::U8,
            1 => ObsDtype::F32,
            other => return Err(r.fail(r.pos - 1, &format!("unknown dtype tag {other}"))),
        };
        let mut t = TaskDataset::new(task_id, action_count, shape, dtype);
        let frame = shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
            .ok_or_else(|| r.fail(r.pos, "observation shape overflows"))?;
        let elem = if dtype == ObsDtype::U8 { 1 } else { 4 };
        for _ in 0..r.u32()? {
            let at = r.pos;
            let len = r.u32()? as u64;
            let obs_bytes = (len + 1)
                .checked_mul(frame)
                .and_then(|v| v.checked_mul(elem))
                .filter(|&v| v <= MAX_LOAD_BYTES)
                .ok_or_else(|| Error::Resource(format!("episode at offset {at} is too large")))?;
            let raw = r.take(obs_bytes as usize)?;
            let frames = match dtype {
                ObsDtype::U8 => Frames::U8(raw.to_vec()),
                ObsDtype::F32 => Frames::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            let actions = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let rewards = (0..len)
                .map(|_| r.u32().map(f32::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let terminal = match r.take(1)?[0] {
                0 => false,
                1 => true,
                other => return Err(r.fail(r.pos - 1, &format!("bad terminal flag {other}"))),
            };
            t.push_episode(Episode {
                frames,
                actions,
                rewards,
                terminal,
            })
            .map_err(|e| r.fail(at, &e.to_string()))?;
        }
        tasks.push(t);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after dataset"));
    }
    TaskDatasetStore::new(tasks)
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, msg: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(self.pos, &format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
