use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{to_f32, EvalSuite};
use super::runlog::{EvalRecord, LossTrace, RunLog};
use super::{carry_over, eval_seed, TrainConfig, Trainer};
use crate::datasets::{subsample_transitions, Episode, Frames, ObsDtype, TaskDataset, TaskDatasetStore};
use crate::distributional::argmax_first;
use crate::envs::{Env, SolvedTask};
use crate::error::{Error, Result};
use crate::evalstats::{iqm, median};
use crate::qnet::{transfer_encoder, QNetwork, QNetworkConfig};

/// One arm of a paired comparison.
#[derive(Debug)]
pub struct ArmResult {
    pub label: String,
    pub log: RunLog,
    pub net: QNetwork,
}

impl ArmResult {
    fn final_scores(&self) -> Result<Vec<f64>> {
        let last = self
            .log
            .last()
            .ok_or_else(|| Error::InvalidState(format!("arm {} has no evaluation", self.label)))?;
        Ok(last.per_task.iter().map(|t| t.normalized).collect())
    }

    pub fn final_median(&self) -> Result<f64> {
        median(&self.final_scores()?)
    }

    pub fn final_iqm(&self) -> Result<f64> {
        iqm(&self.final_scores()?)
    }
}

/// Pretrained initialization against a scratch control at equal budget.
#[derive(Debug)]
pub struct FinetuneComparison {
    pub pretrained: ArmResult,
    pub scratch: ArmResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineFinetuneConfig {
    /// Share of each held-out task's transitions kept, drawn uniformly.
    pub fraction: f64,
    pub freeze_encoder: bool,
    pub train: TrainConfig,
}

impl Default for OfflineFinetuneConfig {
    fn default() -> Self {
        OfflineFinetuneConfig {
            fraction: 0.01,
            freeze_encoder: false,
            train: TrainConfig {
                m_tasks: 8,
                k_per_task: 4,
                ..TrainConfig::desk_default()
            },
        }
    }
}

/// Fine-tunes on held-out tasks with a small uniform subsample of their
/// data. The pretrained arm starts from the pretrained encoder; the scratch
/// arm from a fresh network of the same shape.
pub fn finetune_offline(
    pretrained: &QNetwork,
    pretrain_tasks: &[String],
    held_out: &EvalSuite,
    store: &TaskDatasetStore,
    cfg: &OfflineFinetuneConfig,
) -> Result<FinetuneComparison> {
    if let Some(t) = held_out.names().iter().find(|n| pretrain_tasks.contains(n)) {
        return Err(Error::invalid(format!("task {t} was seen during pretraining")));
    }
    let counts: Vec<usize> = held_out.tasks.iter().map(|t| t.game.num_actions()).collect();
    if store.action_counts() != counts {
        return Err(Error::invalid("held-out store does not match the held-out suite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let sub = TaskDatasetStore::new(
        store
            .tasks
            .iter()
            .map(|t| subsample_transitions(t, cfg.fraction, &mut rng))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let config = QNetworkConfig {
        action_counts: counts,
        ..pretrained.config().clone()
    };
    let warm = transfer_encoder(pretrained, config.clone(), cfg.train.seed, cfg.freeze_encoder)?;
    let cold = QNetwork::new(config, cfg.train.seed)?;
    let arm = |label: &str, net: QNetwork| -> Result<ArmResult> {
        let mut t = Trainer::new(cfg.train.clone(), net)?;
        let mut log = RunLog::new();
        t.run(&sub, Some(held_out), &mut log, None)?;
        Ok(ArmResult {
            label: label.into(),
            log,
            net: t.into_network(),
        })
    };
    Ok(FinetuneComparison {
        pretrained: arm("pretrained", warm)?,
        scratch: arm("scratch", cold)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    /// Frames a scratch agent is granted as the reference budget.
    pub scratch_reference_frames: u64,
    /// Fine-tuning gets `scratch_reference_frames / budget_divisor` frames.
    pub budget_divisor: u64,
    pub warmup_frames: u64,
    /// Environment frames per gradient step.
    pub update_every: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_frames: u64,
    pub eval_every_frames: u64,
    pub sticky: bool,
    /// Learning rate, batch shape, target sync, loss, and evaluation
    /// settings; `steps` and `eval_interval` are unused.
    pub train: TrainConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            scratch_reference_frames: 320_000,
            budget_divisor: 16,
            warmup_frames: 500,
            update_every: 4,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay_frames: 5_000,
            eval_every_frames: 5_000,
            sticky: true,
            train: TrainConfig {
                m_tasks: 1,
                k_per_task: 32,
                target_sync: 500,
                ..TrainConfig::desk_default()
            },
        }
    }
}

impl OnlineConfig {
    pub fn frames(&self) -> u64 {
        self.scratch_reference_frames / self.budget_divisor.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_divisor == 0 || self.frames() == 0 {
            return Err(Error::invalid("online budget must be at least one frame"));
        }
        if self.update_every == 0 || self.eval_every_frames == 0 {
            return Err(Error::invalid("update_every and eval_every_frames must be positive"));
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid(format!("epsilon {e} outside [0, 1]")));
            }
        }
        self.train.validate()
    }

    fn epsilon(&self, frame: u64) -> f64 {
        let f = (frame as f64 / self.epsilon_decay_frames.max(1) as f64).min(1.0);
        self.epsilon_start + f * (self.epsilon_end - self.epsilon_start)
    }
}

/// Online fine-tuning on a variant of pretraining task `base_head`. The
/// pretrained arm carries over the encoder, trunk, and that task's head;
/// the scratch arm starts fresh. Both get the same frame budget.
pub fn finetune_online(
    pretrained: &QNetwork,
    base_head: usize,
    variant: &SolvedTask,
    cfg: &OnlineConfig,
) -> Result<FinetuneComparison> {
    cfg.validate()?;
    let pc = pretrained.config();
    if base_head >= pc.task_count() {
        return Err(Error::OutOfRange(format!("head {base_head} of {}", pc.task_count())));
    }
    if pc.action_counts[base_head] != variant.game.num_actions() || pc.input_shape != variant.game.obs_shape() {
        return Err(Error::invalid(format!(
            "variant {} does not share the observation/action space of head {base_head}",
            variant.name()
        )));
    }
    let config = QNetworkConfig {
        action_counts: vec![variant.game.num_actions()],
        ..pc.clone()
    };
    let warm = carry_over(pretrained, base_head, config.clone(), cfg.train.seed)?;
    let cold = QNetwork::new(config, cfg.train.seed)?;
    Ok(FinetuneComparison {
        pretrained: run_online("pretrained", warm, variant, cfg)?,
        scratch: run_online("scratch", cold, variant, cfg)?,
    })
}

fn run_online(label: &str, net: QNetwork, task: &SolvedTask, cfg: &OnlineConfig) -> Result<ArmResult> {
    let suite = EvalSuite::new(vec![task.clone()]);
    let mut trainer = Trainer::new(cfg.train.clone(), net)?;
    let game = &task.game;
    let a_n = game.num_actions();
    let mut store = TaskDatasetStore::new(vec![TaskDataset::new(0, a_n as u32, game.obs_shape(), ObsDtype::U8)])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(2);
    let mut env = Env::new(game.clone(), cfg.sticky);
    let mut frames = env.reset();
    let mut obs = to_f32(&frames);
    let (mut actions, mut rewards) = (Vec::new(), Vec::new());
    let mut log = RunLog::new();
    let mut trace = LossTrace::default();
    let start = std::time::Instant::now();
    let evaluate = |net: &QNetwork, frame: u64, trace: LossTrace| -> Result<EvalRecord> {
        let m = suite.evaluate_net(net, cfg.train.eval_episodes, cfg.train.eval_epsilon, eval_seed(cfg.train.seed, frame))?;
        EvalRecord::from_matrix(frame, start.elapsed().as_secs_f64(), trace, &m)
    };
    // step 0 is the starting point of the learning curve
    let first = evaluate(trainer.online(), 0, trace)?;
    log.push(first)?;
    let total = cfg.frames();
    for frame in 1..=total {
        let a = if rng.gen_bool(cfg.epsilon(frame)) {
            rng.gen_range(0..a_n)
        } else {
            let net = trainer.online();
            argmax_first(&net.q_values(&net.batch_obs(&[&obs])?, &[0])?[0])
        };
        let out = env.step(a, &mut rng)?;
        frames.extend_from_slice(&out.obs);
        obs = to_f32(&out.obs);
        actions.push(a as u32);
        rewards.push(out.reward as f32);
        if out.done {
            store.tasks[0].push_episode(Episode {
                frames: Frames::U8(std::mem::take(&mut frames)),
                actions: std::mem::take(&mut actions),
                rewards: std::mem::take(&mut rewards),
                terminal: out.terminal,
            })?;
            frames = env.reset();
            obs = to_f32(&frames);
        }
        if frame >= cfg.warmup_frames && frame % cfg.update_every == 0 && store.num_transitions() > 0 {
            trace.add(&trainer.train_step(&store)?);
        }
        if frame % cfg.eval_every_frames == 0 || frame == total {
            log.push(evaluate(trainer.online(), frame, trace.mean())?)?;
            trace = LossTrace::default();
        }
    }
    Ok(ArmResult {
        label: label.into(),
        log,
        net: trainer.into_network(),
    })
}

/// `base` with every conv layer's channel count scaled by `factor`,
/// rounded to a positive multiple of the group size.
pub fn scaled_config(base: &QNetworkConfig, factor: f64) -> Result<QNetworkConfig> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("width factor {factor} must be positive")));
    }
    let mut c = base.clone();
    let g = c.group_size;
    for layer in &mut c.conv {
        let groups = ((layer.out_channels as f64 * factor) / g as f64).round().max(1.0) as usize;
        layer.out_channels = groups * g;
    }
    c.validate()?;
    Ok(c)
}

/// Final score of one width in a capacity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub factor: f64,
    pub num_params: usize,
    pub iqm: f64,
    pub median: f64,
}

/// Trains one network per width factor with identical data and budget.
pub fn capacity_sweep(
    base: &QNetworkConfig,
    factors: &[f64],
    train: &TrainConfig,
    store: &TaskDatasetStore,
    suite: &EvalSuite,
) -> Result<Vec<CapacityPoint>> {
    factors
        .iter()
        .map(|&f| {
            let net = QNetwork::new(scaled_config(base, f)?, train.seed)?;
            let num_params = net.num_params();
            let mut t = Trainer::new(train.clone(), net)?;
            let mut log = RunLog::new();
            t.run(store, Some(suite), &mut log, None)?;
            let last = log.last().expect("run records a final evaluation");
            Ok(CapacityPoint {
                factor: f,
                num_params,
                iqm: last.iqm.expect("suite evaluated"),
                median: last.median.expect("suite evaluated"),
            })
        })
        .collect()
}
