//! The sectioned run configuration, overrides, and its content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::SliceUnit;
use crate::distributional::SupportSpec;
use crate::envs::{default_suite, find_task, held_out_suite, EnvSpec, ScheduleConfig, OBS_SHAPE, VARIANTS};
use crate::error::{Error, Result};
use crate::evalstats::ReportFormat;
use crate::losses::{LossConfig, TdKind};
use crate::qnet::{ConvSpec, HeadMode, QNetworkConfig};
use crate::trainer::{Objective, OfflineFinetuneConfig, OnlineConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// Pretraining tasks, in head order.
    pub tasks: Vec<String>,
    /// Tasks kept out of pretraining.
    pub held_out: Vec<String>,
    pub variants: Vec<String>,
    /// Sticky actions during data collection and online fine-tuning.
    pub sticky: bool,
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            tasks: default_suite().into_iter().map(|s| s.name).collect(),
            held_out: held_out_suite().into_iter().map(|s| s.name).collect(),
            variants: VARIANTS.iter().map(|(v, _, _)| v.to_string()).collect(),
            sticky: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Episodes collected per task.
    pub episodes: usize,
    /// Leading share of each task's collection that is kept.
    pub fraction: f64,
    pub slice_unit: SliceUnit,
    /// Dataset directory, relative to the workspace root.
    pub dir: String,
    pub early_fraction: f64,
    pub early_target: f64,
    pub weak_target: f64,
    pub weak_ceiling: f64,
    pub weak_epsilon: f64,
    pub strong_epsilon: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        DataSection {
            episodes: 500,
            fraction: 1.0,
            slice_unit: SliceUnit::Episodes,
            dir: "data".into(),
            early_fraction: s.early_fraction,
            early_target: s.early_target,
            weak_target: s.weak_target,
            weak_ceiling: s.weak_ceiling,
            weak_epsilon: s.weak_epsilon,
            strong_epsilon: s.strong_epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub group_size: usize,
    pub spatial_embedding: bool,
    pub trunk_width: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub feature_norm: bool,
    pub v_min: f64,
    pub v_max: f64,
    pub atoms: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        let d = QNetworkConfig::desk_default(OBS_SHAPE, vec![]);
        let s = SupportSpec::default();
        NetSection {
            conv_channels: d.conv.iter().map(|c| c.out_channels).collect(),
            kernel: d.conv[0].kernel,
            group_size: d.group_size,
            spatial_embedding: d.spatial_embedding,
            trunk_width: d.trunk_width,
            hidden_width: d.hidden_width,
            hidden_layers: d.hidden_layers,
            feature_norm: d.feature_norm,
            v_min: s.v_min(),
            v_max: s.v_max(),
            atoms: s.n_atoms(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub td: TdKind,
    /// Defaults to 0.05 under C51 and 0.1 under MSE when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub gamma: f64,
    pub n_step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub huber_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bcq_tau: Option<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossConfig::c51();
        LossSection {
            td: c.td,
            alpha: None,
            gamma: c.gamma,
            n_step: c.n_step,
            huber_delta: None,
            bcq_tau: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub m_tasks: usize,
    pub k_per_task: usize,
    pub lr: f64,
    pub target_sync: u64,
    pub objective: Objective,
    pub eval_interval: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk_default();
        TrainSection {
            steps: t.steps,
            m_tasks: t.m_tasks,
            k_per_task: t.k_per_task,
            lr: t.lr,
            target_sync: t.target_sync,
            objective: t.objective,
            eval_interval: t.eval_interval,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub epsilon: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let t = TrainConfig::desk_default();
        EvalSection {
            episodes: t.eval_episodes,
            epsilon: t.eval_epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub formats: Vec<ReportFormat>,
    /// Output directory of `report`, relative to the workspace root.
    pub dir: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            formats: vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg],
            dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// Share of each held-out task's transitions used offline.
    pub offline_fraction: f64,
    pub offline_steps: u64,
    /// Batch shape offline, `m_tasks × k_per_task`.
    pub offline_m_tasks: usize,
    pub offline_k_per_task: usize,
    pub freeze_encoder: bool,
    pub online_reference_frames: u64,
    pub budget_divisor: u64,
    pub online_lr: f64,
    /// Conservative weight online; 0 turns the regularizer off.
    pub online_alpha: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let off = OfflineFinetuneConfig::default();
        let on = OnlineConfig::default();
        FinetuneSection {
            offline_fraction: off.fraction,
            offline_steps: 20_000,
            offline_m_tasks: off.train.m_tasks,
            offline_k_per_task: off.train.k_per_task,
            freeze_encoder: off.freeze_encoder,
            online_reference_frames: on.scratch_reference_frames,
            budget_divisor: on.budget_divisor,
            online_lr: on.train.lr,
            online_alpha: on.train.loss.alpha,
        }
    }
}

/// The whole configuration document. Every section and key is optional;
/// missing ones take the desk defaults, unknown ones are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvSection,
    pub data: DataSection,
    pub net: NetSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub report: ReportSection,
    pub finetune: FinetuneSection,
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::invalid(format!("config: {e}"))
}

/// Short names accepted by `--ablate` and `--set`.
const ALIASES: [(&str, &str); 4] = [
    ("td_mode", "loss.td"),
    ("feature_norm", "net.feature_norm"),
    ("alpha", "loss.alpha"),
    ("spatial_embedding", "net.spatial_embedding"),
];

/// Resolves an alias to its `section.key` path.
pub fn canonical_key(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, k)| *k)
        .unwrap_or(key)
}

/// Parses a command-line value as a TOML value, reading bare words as
/// strings and `on`/`off` as booleans.
fn parse_value(raw: &str) -> toml::Value {
    match raw {
        "on" => return toml::Value::Boolean(true),
        "off" => return toml::Value::Boolean(false),
        _ => {}
    }
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text: every key written out, stable order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Applies `key=value` overrides, where `key` is `section.field` or an
    /// alias. The result is re-validated as a whole.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).map_err(config_error)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
            let key = canonical_key(key.trim());
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::invalid(format!("override key `{key}` is not section.field")))?;
            let table = doc
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::invalid(format!("`{section}` is not a section")))?;
            table.insert(field.to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::from_str(&toml::to_string(&doc).map_err(config_error)?).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.env.tasks.is_empty() {
            return Err(Error::invalid("config: env.tasks is empty"));
        }
        for name in self.env.tasks.iter().chain(&self.env.held_out).chain(&self.env.variants) {
            find_task(name).map_err(|e| Error::invalid(format!("config: {e}")))?;
        }
        if let Some(t) = self.env.held_out.iter().find(|t| self.env.tasks.contains(t)) {
            return Err(Error::invalid(format!("config: held-out task {t} is also a pretraining task")));
        }
        if self.data.episodes == 0 {
            return Err(Error::invalid("config: data.episodes must be positive"));
        }
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::invalid(format!("config: data.fraction {} outside (0, 1]", self.data.fraction)));
        }
        if self.net.conv_channels.is_empty() {
            return Err(Error::invalid("config: net.conv_channels is empty"));
        }
        self.train_config()?.validate()?;
        self.net_config(vec![4])?.validate()?;
        let f = &self.finetune;
        if !(f.offline_fraction > 0.0 && f.offline_fraction <= 1.0) {
            return Err(Error::invalid("config: finetune.offline_fraction outside (0, 1]"));
        }
        self.online_config()?.validate()
    }

    pub fn task_specs(&self) -> Result<Vec<EnvSpec>> {
        self.env.tasks.iter().map(|n| find_task(n)).collect()
    }

    pub fn held_out_specs(&self) -> Result<Vec<EnvSpec>> {
        self.env.held_out.iter().map(|n| find_task(n)).collect()
    }

    pub fn schedule(&self) -> ScheduleConfig {
        let d = &self.data;
        ScheduleConfig {
            early_fraction: d.early_fraction,
            early_target: d.early_target,
            weak_target: d.weak_target,
            weak_ceiling: d.weak_ceiling,
            weak_epsilon: d.weak_epsilon,
            strong_epsilon: d.strong_epsilon,
            gamma: self.loss.gamma,
            ..ScheduleConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let base = match self.loss.td {
            TdKind::C51 => LossConfig::c51(),
            TdKind::Mse => LossConfig::mse(),
        };
        LossConfig {
            td: self.loss.td,
            alpha: self.loss.alpha.unwrap_or(base.alpha),
            gamma: self.loss.gamma,
            n_step: self.loss.n_step,
            huber_delta: self.loss.huber_delta,
            bcq_tau: self.loss.bcq_tau,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            steps: t.steps,
            m_tasks: t.m_tasks,
            k_per_task: t.k_per_task,
            lr: t.lr,
            target_sync: t.target_sync,
            objective: t.objective,
            loss: self.loss_config(),
            eval_interval: t.eval_interval,
            eval_episodes: self.eval.episodes,
            eval_epsilon: self.eval.epsilon,
            seed: self.env.seed,
            checkpoint_every: t.checkpoint_every,
        };
        cfg.loss.validate()?;
        Ok(cfg)
    }

    /// Head mode implied by the objective and TD kind.
    pub fn head(&self) -> Result<HeadMode> {
        Ok(match (self.train.objective, self.loss.td) {
            (Objective::ScaledQl, TdKind::C51) => HeadMode::Categorical {
                support: SupportSpec::new(self.net.v_min, self.net.v_max, self.net.atoms)?,
            },
            _ => HeadMode::Scalar,
        })
    }

    pub fn net_config(&self, action_counts: Vec<usize>) -> Result<QNetworkConfig> {
        let n = &self.net;
        let cfg = QNetworkConfig {
            input_shape: OBS_SHAPE,
            conv: n
                .conv_channels
                .iter()
                .map(|&c| ConvSpec {
                    out_channels: c,
                    kernel: n.kernel,
                    stride: 1,
                })
                .collect(),
            group_size: n.group_size,
            spatial_embedding: n.spatial_embedding,
            trunk_width: n.trunk_width,
            hidden_width: n.hidden_width,
            hidden_layers: n.hidden_layers,
            feature_norm: n.feature_norm,
            head: self.head()?,
            action_counts,
        };
        Ok(cfg)
    }

    pub fn offline_finetune_config(&self) -> Result<OfflineFinetuneConfig> {
        let f = &self.finetune;
        let mut train = self.train_config()?;
        train.steps = f.offline_steps;
        train.m_tasks = f.offline_m_tasks;
        train.k_per_task = f.offline_k_per_task;
        train.eval_interval = train.eval_interval.min(f.offline_steps);
        train.checkpoint_every = train.checkpoint_every.min(f.offline_steps);
        Ok(OfflineFinetuneConfig {
            fraction: f.offline_fraction,
            freeze_encoder: f.freeze_encoder,
            train,
        })
    }

    pub fn online_config(&self) -> Result<OnlineConfig> {
        let f = &self.finetune;
        let base = OnlineConfig::default();
        let mut train = self.train_config()?;
        train.m_tasks = base.train.m_tasks;
        train.k_per_task = base.train.k_per_task;
        train.target_sync = base.train.target_sync;
        train.lr = f.online_lr;
        train.loss.alpha = f.online_alpha;
        Ok(OnlineConfig {
            scratch_reference_frames: f.online_reference_frames,
            budget_divisor: f.budget_divisor,
            sticky: self.env.sticky,
            train,
            ..base
        })
    }
}

/// Splits `key=v1,v2,...` into the canonical key and one override per value.
pub fn ablation_overrides(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("ablation `{spec}` is not key=v1,v2")))?;
    let key = canonical_key(key.trim()).to_string();
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| format!("{key}={v}"))
        .collect();
    if values.len() < 2 {
        return Err(Error::invalid(format!("ablation `{spec}` needs at least two values")));
    }
    Ok((key, values))
}
