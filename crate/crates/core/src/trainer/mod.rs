//! Multi-task offline training, evaluation, checkpoint/resume, and the two
//! fine-tuning scenarios (offline on held-out tasks, online on variants).

pub(crate) mod eval;
mod finetune;
mod runlog;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{gather_nstep, stratified_sample, NStepItem, TaskDatasetStore};
use crate::diffcore::{adam_step, AdamState, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::losses::{bcq_filter, build_bc_loss, build_loss, compute_targets, LossConfig, LossValue, TdKind};
use crate::qnet::{sync_target, Checkpoint, HeadMode, QNetwork, QNetworkConfig, RngState};

pub use eval::{evaluate, EvalSuite};
pub use finetune::{
    capacity_sweep, finetune_offline, finetune_online, scaled_config, ArmResult, CapacityPoint,
    FinetuneComparison, OfflineFinetuneConfig, OnlineConfig,
};
pub use runlog::{EvalRecord, LossTrace, RunLog};

/// What the network is fit to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Conservative TD learning (the `loss` section applies).
    ScaledQl,
    /// Behavior cloning of the logged actions; needs a scalar head, whose
    /// outputs are read as action logits.
    Bc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Gradient steps of the whole run.
    pub steps: u64,
    /// Task draws per batch (with replacement).
    pub m_tasks: usize,
    /// Windows per drawn task.
    pub k_per_task: usize,
    pub lr: f64,
    /// Gradient steps between target-network copies.
    pub target_sync: u64,
    pub objective: Objective,
    pub loss: LossConfig,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_epsilon: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Desk defaults: batch 16 × 4 = 64, learning rate 1e-4 (5e-5 per 32
    /// samples, scaled linearly), target sync every 2000 steps.
    pub fn desk_default() -> Self {
        TrainConfig {
            steps: 50_000,
            m_tasks: 16,
            k_per_task: 4,
            lr: 5e-5 * 64.0 / 32.0,
            target_sync: 2000,
            objective: Objective::ScaledQl,
            loss: LossConfig::c51(),
            eval_interval: 10_000,
            eval_episodes: 20,
            eval_epsilon: 0.001,
            seed: 0,
            checkpoint_every: 10_000,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.m_tasks * self.k_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("m_tasks", self.m_tasks as u64),
            ("k_per_task", self.k_per_task as u64),
            ("target_sync", self.target_sync),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes as u64),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("train.{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("train.lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return Err(Error::invalid(format!("train.eval_epsilon {} outside [0, 1]", self.eval_epsilon)));
        }
        self.loss.validate()
    }

    /// Checks that the objective fits the network head.
    pub fn check_head(&self, head: &HeadMode) -> Result<()> {
        let ok = match (self.objective, self.loss.td, head) {
            (Objective::Bc, _, HeadMode::Scalar) => true,
            (Objective::ScaledQl, TdKind::Mse, HeadMode::Scalar) => true,
            (Objective::ScaledQl, TdKind::C51, HeadMode::Categorical { .. }) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "objective {:?} with TD {:?} does not fit a {} head",
                self.objective,
                self.loss.td,
                match head {
                    HeadMode::Scalar => "scalar",
                    HeadMode::Categorical { .. } => "categorical",
                }
            )))
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

/// Scalar-head twin of the Q-network fit by behavior cloning, used for the
/// discrete BCQ action filter.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorModel {
    pub net: QNetwork,
    pub opt: AdamState,
}

impl BehaviorModel {
    pub fn new(q_config: &QNetworkConfig, seed: u64) -> Result<Self> {
        let config = QNetworkConfig {
            head: HeadMode::Scalar,
            feature_norm: false,
            ..q_config.clone()
        };
        let net = QNetwork::new(config, seed)?;
        let opt = AdamState::new(&net.params);
        Ok(BehaviorModel { net, opt })
    }

    /// One NLL step on the logged actions; returns the loss.
    pub fn fit_step(&mut self, obs: &Tensor<f32>, tasks: &[usize], actions: &[usize], lr: f64) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        g.bind_params(&self.net.params, true)?;
        let x = g.constant(obs.clone());
        let heads = self.net.config().build_forward(&mut g, x, tasks)?;
        let loss = build_bc_loss(&mut g, &heads, actions)?;
        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        if !value.is_finite() || !grads.iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::NumericOverflow { op: "behavior cloning" });
        }
        adam_step(&mut self.net.params, &grads, &mut self.opt, lr)?;
        Ok(value)
    }

    /// Softmax action probabilities per row.
    pub fn probs(&self, obs: &Tensor<f32>, tasks: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .net
            .q_values(obs, tasks)?
            .iter()
            .map(|l| crate::diffcore::softmax(l))
            .collect())
    }
}

/// Metadata stored as the checkpoint's config text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SavedSetup {
    train: TrainConfig,
    net: QNetworkConfig,
    encoder_frozen: bool,
}

const ONLINE: &str = "online";
const TARGET: &str = "target";
const BEHAVIOR: &str = "behavior";
const SAMPLER: &str = "sampler";

/// Owns the online/target pair, the optimizer, and the batch sampler.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    online: QNetwork,
    target: QNetwork,
    opt: AdamState,
    behavior: Option<BehaviorModel>,
    rng: ChaCha8Rng,
    step: u64,
}

/// Losses of one gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: LossValue,
    /// Behavior-cloning loss of the BCQ model, or of the main network under
    /// [`Objective::Bc`].
    pub bc: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, net: QNetwork) -> Result<Self> {
        cfg.validate()?;
        cfg.check_head(&net.config().head)?;
        let behavior = match (cfg.objective, cfg.loss.bcq_tau) {
            (Objective::ScaledQl, Some(_)) => Some(BehaviorModel::new(net.config(), cfg.seed ^ 0xb0c9)?),
            _ => None,
        };
        let opt = AdamState::new(&net.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            target: net.clone(),
            online: net,
            opt,
            behavior,
            rng,
            step: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the run length, e.g. to extend a resumed run.
    pub fn set_total_steps(&mut self, steps: u64) -> Result<()> {
        if steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        self.cfg.steps = steps;
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn behavior(&self) -> Option<&BehaviorModel> {
        self.behavior.as_ref()
    }

    pub fn into_network(self) -> QNetwork {
        self.online
    }

    /// The store must supply exactly the network's tasks.
    pub fn check_store(&self, store: &TaskDatasetStore) -> Result<()> {
        let want = &self.online.config().action_counts;
        if store.action_counts() != *want {
            return Err(Error::invalid(format!(
                "store action counts {:?} do not match the network's tasks {:?}",
                store.action_counts(),
                want
            )));
        }
        if let Some(shape) = store.obs_shape() {
            if shape != self.online.config().input_shape {
                return Err(Error::invalid(format!(
                    "store observations {shape:?} vs network input {:?}",
                    self.online.config().input_shape
                )));
            }
        }
        Ok(())
    }

    fn batch(&mut self, store: &TaskDatasetStore) -> Result<Vec<NStepItem>> {
        let idx = stratified_sample(store, self.cfg.m_tasks, self.cfg.k_per_task, &mut self.rng)?;
        gather_nstep(store, &idx, self.cfg.loss.n_step, self.cfg.loss.gamma)
    }

    /// One gradient step on a stratified batch.
    pub fn train_step(&mut self, store: &TaskDatasetStore) -> Result<StepStats> {
        let items = self.batch(store)?;
        let tasks: Vec<usize> = items.iter().map(|i| i.task).collect();
        let actions: Vec<usize> = items.iter().map(|i| i.action).collect();
        let obs_rows: Vec<&[f32]> = items.iter().map(|i| i.obs.as_slice()).collect();
        let obs = self.online.batch_obs(&obs_rows)?;
        let (trainable, frozen) = self.online.partition();
        let mut g = Graph::<f32>::new();
        g.bind_params(&trainable, true)?;
        g.bind_params(&frozen, false)?;
        let x = g.constant(obs.clone());
        let heads = self.online.config().build_forward(&mut g, x, &tasks)?;
        let (total, stats) = match self.cfg.objective {
            Objective::Bc => {
                let loss = build_bc_loss(&mut g, &heads, &actions)?;
                let v = g.value(loss).data()[0] as f64;
                (loss, StepStats { loss: LossValue { td: 0.0, cql: 0.0, total: v }, bc: Some(v) })
            }
            Objective::ScaledQl => {
                let next_rows: Vec<&[f32]> = items.iter().map(|i| i.next_obs.as_slice()).collect();
                let next_obs = self.online.batch_obs(&next_rows)?;
                let next = self.target.forward(&next_obs, &tasks)?;
                let mut bc = None;
                let allowed = match (&mut self.behavior, self.cfg.loss.bcq_tau) {
                    (Some(b), Some(tau)) => {
                        bc = Some(b.fit_step(&obs, &tasks, &actions, self.cfg.lr)?);
                        let probs = b.probs(&next_obs, &tasks)?;
                        Some(probs.iter().map(|p| bcq_filter(p, tau)).collect::<Result<Vec<_>>>()?)
                    }
                    _ => None,
                };
                let rewards: Vec<f64> = items.iter().map(|i| i.reward).collect();
                let discounts: Vec<f64> = items.iter().map(|i| i.discount).collect();
                let dones: Vec<bool> = items.iter().map(|i| i.done).collect();
                let support = self.online.config().head.support().cloned();
                let targets = compute_targets(
                    &next,
                    &rewards,
                    &discounts,
                    &dones,
                    allowed.as_deref(),
                    &self.cfg.loss,
                    support.as_ref(),
                )?;
                let nodes = build_loss(&mut g, &heads, &actions, &targets, &self.cfg.loss, support.as_ref())?;
                let v = |n| g.value(n).data()[0] as f64;
                let loss = LossValue {
                    td: v(nodes.td),
                    cql: v(nodes.cql),
                    total: v(nodes.total),
                };
                (nodes.total, StepStats { loss, bc })
            }
        };
        let grads = g.backward(total)?;
        if !stats.loss.total.is_finite() || !grads.iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::NumericOverflow { op: "training loss" });
        }
        adam_step(&mut self.online.params, &grads, &mut self.opt, self.cfg.lr)?;
        self.step += 1;
        if self.step % self.cfg.target_sync == 0 {
            sync_target(&self.online, &mut self.target)?;
        }
        Ok(stats)
    }

    /// Full training state, including the sampler position.
    pub fn checkpoint(&self) -> Checkpoint {
        let setup = SavedSetup {
            train: self.cfg.clone(),
            net: self.online.config().clone(),
            encoder_frozen: self.online.encoder_frozen(),
        };
        let mut ck = Checkpoint {
            config_text: serde_json::to_string_pretty(&setup).expect("setup serializes"),
            step: self.step,
            ..Default::default()
        };
        ck.params.insert(ONLINE.into(), self.online.params.clone());
        ck.params.insert(TARGET.into(), self.target.params.clone());
        ck.optimizers.insert(ONLINE.into(), self.opt.clone());
        if let Some(b) = &self.behavior {
            ck.params.insert(BEHAVIOR.into(), b.net.params.clone());
            ck.optimizers.insert(BEHAVIOR.into(), b.opt.clone());
        }
        ck.rngs.insert(SAMPLER.into(), RngState::capture(&self.rng));
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let setup: SavedSetup = serde_json::from_str(&ck.config_text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("checkpoint setup: {e}"),
        })?;
        setup.train.validate()?;
        let mut online = QNetwork::from_params(setup.net.clone(), ck.take_params(ONLINE)?)?;
        online.set_encoder_frozen(setup.encoder_frozen);
        let mut target = QNetwork::from_params(setup.net.clone(), ck.take_params(TARGET)?)?;
        target.set_encoder_frozen(setup.encoder_frozen);
        let opt = ck.take_optimizer(ONLINE)?;
        let behavior = if ck.params.contains_key(BEHAVIOR) {
            let fresh = BehaviorModel::new(&setup.net, 0)?;
            let net = QNetwork::from_params(fresh.net.config().clone(), ck.take_params(BEHAVIOR)?)?;
            Some(BehaviorModel {
                net,
                opt: ck.take_optimizer(BEHAVIOR)?,
            })
        } else {
            None
        };
        let rng = ck
            .rngs
            .get(SAMPLER)
            .ok_or_else(|| Error::invalid("checkpoint lacks the sampler state"))?
            .restore();
        Ok(Trainer {
            cfg: setup.train,
            online,
            target,
            opt,
            behavior,
            rng,
            step: ck.step,
        })
    }

    fn abort(&self, dir: Option<&Path>) -> Error {
        let checkpoint = dir.and_then(|d| {
            let p = d.join(format!("abort-step-{:08}.ckpt", self.step));
            self.checkpoint().save(&p).ok().map(|_| p)
        });
        Error::Diverged {
            step: self.step,
            checkpoint,
        }
    }

    /// Trains up to the configured step count, evaluating every
    /// `eval_interval` steps and at the end, checkpointing every
    /// `checkpoint_every` steps and at the end when `checkpoint_dir` is set.
    pub fn run(
        &mut self,
        store: &TaskDatasetStore,
        suite: Option<&EvalSuite>,
        log: &mut RunLog,
        checkpoint_dir: Option<&Path>,
    ) -> Result<()> {
        self.check_store(store)?;
        if let Some(s) = suite {
            if s.len() != self.online.config().task_count() {
                return Err(Error::invalid("evaluation suite does not match the network's tasks"));
            }
        }
        if let Some(d) = checkpoint_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let start = Instant::now();
        let mut trace = LossTrace::default();
        while self.step < self.cfg.steps {
            let stats = match self.train_step(store) {
                Ok(s) => s,
                Err(Error::NumericOverflow { .. }) => return Err(self.abort(checkpoint_dir)),
                Err(e) => return Err(e),
            };
            trace.add(&stats);
            let last = self.step == self.cfg.steps;
            if let Some(d) = checkpoint_dir {
                if self.step % self.cfg.checkpoint_every == 0 || last {
                    self.checkpoint().save(&checkpoint_path(d, self.step))?;
                }
            }
            if self.step % self.cfg.eval_interval == 0 || last {
                let record = match suite {
                    Some(s) => {
                        let matrix = s.evaluate_net(
                            &self.online,
                            self.cfg.eval_episodes,
                            self.cfg.eval_epsilon,
                            eval_seed(self.cfg.seed, self.step),
                        )?;
                        EvalRecord::from_matrix(self.step, start.elapsed().as_secs_f64(), trace.mean(), &matrix)?
                    }
                    None => EvalRecord::losses_only(self.step, start.elapsed().as_secs_f64(), trace.mean()),
                };
                log.push(record)?;
                trace = LossTrace::default();
            }
        }
        Ok(())
    }
}

/// `<dir>/step-XXXXXXXX.ckpt`
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Evaluation seed for a given point of a run.
pub fn eval_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xe7a1
}

/// Maps the parameters of `from` onto a network of `config` whose single
/// head replaces head `head` of `from`; the encoder, trunk, and that head are
/// copied.
pub(crate) fn carry_over(from: &QNetwork, head: usize, config: QNetworkConfig, seed: u64) -> Result<QNetwork> {
    if head >= from.config().task_count() {
        return Err(Error::OutOfRange(format!("head {head} of {}", from.config().task_count())));
    }
    let mut net = QNetwork::new(config, seed)?;
    let prefix = format!("head.{head}.");
    let mut copied = ParamSet::new();
    for (name, t) in from.params.iter() {
        let dest = match name.strip_prefix(&prefix) {
            Some(rest) => format!("head.0.{rest}"),
            None if name.starts_with("head.") => continue,
            None => name.clone(),
        };
        match net.params.get(&dest) {
            Some(cur) if cur.shape() == t.shape() => copied.set(dest, t.clone()),
            _ => {
                return Err(Error::invalid(format!(
                    "parameter `{name}` does not fit the new network"
                )))
            }
        }
    }
    for (name, t) in copied.iter() {
        net.params.set(name.clone(), t.clone());
    }
    Ok(net)
}
