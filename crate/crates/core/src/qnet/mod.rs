//! The Q-network family: conv encoder with group normalization, learned
//! spatial embedding (or global mean pooling), a layer-normed trunk, optional
//! ℓ2 feature normalization, and one linear head per task.

mod checkpoint;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamSet, Real, Tensor, L2_EPS, NORM_EPS};
use crate::distributional::SupportSpec;
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadMode {
    Scalar,
    Categorical { support: SupportSpec },
}

impl HeadMode {
    pub fn atoms(&self) -> usize {
        match self {
            HeadMode::Scalar => 1,
            HeadMode::Categorical { support } => support.n_atoms(),
        }
    }

    pub fn support(&self) -> Option<&SupportSpec> {
        match self {
            HeadMode::Scalar => None,
            HeadMode::Categorical { support } => Some(support),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNetworkConfig {
    /// Observation shape `[H, W, C]`.
    pub input_shape: [usize; 3],
    pub conv: Vec<ConvSpec>,
    /// Channels per normalization group.
    pub group_size: usize,
    pub spatial_embedding: bool,
    pub trunk_width: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub feature_norm: bool,
    pub head: HeadMode,
    /// One entry per task head.
    pub action_counts: Vec<usize>,
}

impl QNetworkConfig {
    /// Desk-scale defaults: 16 → 32 channel 3×3 convs, group size 4, trunk 256
    /// with layer norm, two hidden layers of 128.
    pub fn desk_default(input_shape: [usize; 3], action_counts: Vec<usize>) -> Self {
        QNetworkConfig {
            input_shape,
            conv: vec![
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                },
            ],
            group_size: 4,
            spatial_embedding: true,
            trunk_width: 256,
            hidden_width: 128,
            hidden_layers: 2,
            feature_norm: true,
            head: HeadMode::Categorical {
                support: SupportSpec::default(),
            },
            action_counts,
        }
    }

    pub fn task_count(&self) -> usize {
        self.action_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::invalid(format!("{field}: {why}")));
        if self.action_counts.is_empty() {
            return bad("action_counts", "need at least one task".into());
        }
        if let Some(a) = self.action_counts.iter().find(|&&a| a == 0) {
            return bad("action_counts", format!("action count {a} must be positive"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return bad("input_shape", format!("{:?} has a zero dimension", self.input_shape));
        }
        if self.group_size == 0 {
            return bad("group_size", "must be positive".into());
        }
        for (i, c) in self.conv.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return bad("conv", format!("layer {i} has a zero size"));
            }
            if c.out_channels % self.group_size != 0 {
                return bad(
                    "group_size",
                    format!(
                        "{} does not divide conv layer {i} channels {}",
                        self.group_size, c.out_channels
                    ),
                );
            }
        }
        if self.trunk_width == 0 {
            return bad("trunk_width", "must be positive".into());
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return bad("hidden_width", "must be positive".into());
        }
        if let HeadMode::Categorical { support } = &self.head {
            if support.n_atoms() < 2 {
                return bad("head", "categorical heads need >= 2 atoms".into());
            }
        }
        Ok(())
    }

    /// Shape of the encoder's output feature map `[H, W, C]`.
    pub fn feature_map_shape(&self) -> [usize; 3] {
        let [mut h, mut w, mut c] = self.input_shape;
        for spec in &self.conv {
            let pad = (spec.kernel - 1) / 2;
            h = (h + 2 * pad - spec.kernel) / spec.stride + 1;
            w = (w + 2 * pad - spec.kernel) / spec.stride + 1;
            c = spec.out_channels;
        }
        [h, w, c]
    }

    fn pooled_width(&self) -> usize {
        let [h, w, c] = self.feature_map_shape();
        if self.spatial_embedding {
            h * w * c
        } else {
            c
        }
    }

    pub fn feature_width(&self) -> usize {
        if self.hidden_layers > 0 {
            self.hidden_width
        } else {
            self.trunk_width
        }
    }

    pub fn head_outputs(&self, task: usize) -> usize {
        self.action_counts[task] * self.head.atoms()
    }

    /// True when two configs share encoder and pooling parameters.
    pub fn same_encoder(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.conv == other.conv
            && self.group_size == other.group_size
            && self.spatial_embedding == other.spatial_embedding
    }

    /// Stable single-line-per-field rendering, used in checkpoints and hashes.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_shape={:?}", self.input_shape);
        for (i, c) in self.conv.iter().enumerate() {
            let _ = writeln!(
                s,
                "conv.{i}={}x{}/{}",
                c.out_channels, c.kernel, c.stride
            );
        }
        let _ = writeln!(s, "group_size={}", self.group_size);
        let _ = writeln!(s, "spatial_embedding={}", self.spatial_embedding);
        let _ = writeln!(s, "trunk_width={}", self.trunk_width);
        let _ = writeln!(s, "hidden_width={}", self.hidden_width);
        let _ = writeln!(s, "hidden_layers={}", self.hidden_layers);
        let _ = writeln!(s, "feature_norm={}", self.feature_norm);
        match &self.head {
            HeadMode::Scalar => {
                let _ = writeln!(s, "head=scalar");
            }
            HeadMode::Categorical { support } => {
                let _ = writeln!(
                    s,
                    "head=categorical[{},{},{}]",
                    support.v_min(),
                    support.v_max(),
                    support.n_atoms()
                );
            }
        }
        let _ = writeln!(s, "action_counts={:?}", self.action_counts);
        s
    }

    /// Appends the forward pass to `g`, whose parameters must already be
    /// bound under this config's names. Returns one output node per task
    /// present in `task_ids`, each covering that task's batch rows.
    pub fn build_forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        obs: NodeId,
        task_ids: &[usize],
    ) -> Result<Vec<HeadOutput>> {
        let feat = self.build_features(g, obs)?;
        self.build_heads(g, feat, task_ids)
    }

    /// Encoder + pooling + trunk, `[B, H, W, C] -> [B, D]`.
    pub fn build_features<R: Real>(&self, g: &mut Graph<R>, obs: NodeId) -> Result<NodeId> {
        let enc = self.build_encoder(g, obs)?;
        let batch = g.shape(enc)[0];
        let pooled = if self.spatial_embedding {
            let e = g.param(SPATIAL_EMBEDDING)?;
            g.spatial_mul(enc, e)?
        } else {
            g.mean_pool(enc)?
        };
        debug_assert_eq!(g.shape(pooled), [batch, self.pooled_width()]);
        let (w, b) = (g.param("trunk.fc0.w")?, g.param("trunk.fc0.b")?);
        let mut h = g.linear(pooled, w, b)?;
        let (gam, bet) = (g.param("trunk.ln.gamma")?, g.param("trunk.ln.beta")?);
        h = g.group_norm(h, gam, bet, 1, NORM_EPS)?;
        h = g.relu(h)?;
        for i in 0..self.hidden_layers {
            let (w, b) = (
                g.param(&format!("trunk.fc{}.w", i + 1))?,
                g.param(&format!("trunk.fc{}.b", i + 1))?,
            );
            h = g.linear(h, w, b)?;
            h = g.relu(h)?;
        }
        if self.feature_norm {
            h = g.l2_normalize(h, L2_EPS)?;
        }
        Ok(h)
    }

    /// Conv stack only, `[B, H, W, C] -> [B, H', W', C']`.
    pub fn build_encoder<R: Real>(&self, g: &mut Graph<R>, obs: NodeId) -> Result<NodeId> {
        let s = g.shape(obs);
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::invalid(format!(
                "observation batch {s:?} does not match input shape {:?}",
                self.input_shape
            )));
        }
        let mut x = obs;
        for (i, spec) in self.conv.iter().enumerate() {
            let (k, b) = (
                g.param(&format!("encoder.conv{i}.kernel"))?,
                g.param(&format!("encoder.conv{i}.bias"))?,
            );
            x = g.conv2d(x, k, b, spec.stride)?;
            let (gam, bet) = (
                g.param(&format!("encoder.gn{i}.gamma"))?,
                g.param(&format!("encoder.gn{i}.beta"))?,
            );
            x = g.group_norm(x, gam, bet, spec.out_channels / self.group_size, NORM_EPS)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }

    /// Per-task heads over precomputed features.
    pub fn build_heads<R: Real>(
        &self,
        g: &mut Graph<R>,
        feat: NodeId,
        task_ids: &[usize],
    ) -> Result<Vec<HeadOutput>> {
        if let Some(&bad) = task_ids.iter().find(|&&t| t >= self.task_count()) {
            return Err(Error::OutOfRange(format!(
                "task id {bad} with {} heads",
                self.task_count()
            )));
        }
        if g.shape(feat)[0] != task_ids.len() {
            return Err(Error::invalid("one task id per batch row required"));
        }
        let mut out = Vec::new();
        for task in 0..self.task_count() {
            let rows: Vec<usize> = task_ids
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == task)
                .map(|(i, _)| i)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let sel = if rows.len() == task_ids.len() {
                feat
            } else {
                g.select_rows(feat, &rows)?
            };
            let (w, b) = (
                g.param(&head_param(task, "w"))?,
                g.param(&head_param(task, "b"))?,
            );
            let node = g.linear(sel, w, b)?;
            out.push(HeadOutput { task, rows, node });
        }
        Ok(out)
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut in_c = self.input_shape[2];
        for (i, spec) in self.conv.iter().enumerate() {
            let fan_in = spec.kernel * spec.kernel * in_c;
            p.insert(
                format!("encoder.conv{i}.kernel"),
                trunc_normal(
                    &mut rng,
                    &[spec.kernel, spec.kernel, in_c, spec.out_channels],
                    fan_in,
                ),
            )?;
            p.insert(
                format!("encoder.conv{i}.bias"),
                Tensor::zeros(&[spec.out_channels]),
            )?;
            p.insert(
                format!("encoder.gn{i}.gamma"),
                Tensor::full(&[spec.out_channels], 1.0),
            )?;
            p.insert(
                format!("encoder.gn{i}.beta"),
                Tensor::zeros(&[spec.out_channels]),
            )?;
            in_c = spec.out_channels;
        }
        if self.spatial_embedding {
            p.insert(
                SPATIAL_EMBEDDING,
                Tensor::full(&self.feature_map_shape(), 1.0),
            )?;
        }
        let pooled = self.pooled_width();
        p.insert(
            "trunk.fc0.w",
            trunc_normal(&mut rng, &[pooled, self.trunk_width], pooled),
        )?;
        p.insert("trunk.fc0.b", Tensor::zeros(&[self.trunk_width]))?;
        p.insert("trunk.ln.gamma", Tensor::full(&[self.trunk_width], 1.0))?;
        p.insert("trunk.ln.beta", Tensor::zeros(&[self.trunk_width]))?;
        let mut width = self.trunk_width;
        for i in 0..self.hidden_layers {
            p.insert(
                format!("trunk.fc{}.w", i + 1),
                trunc_normal(&mut rng, &[width, self.hidden_width], width),
            )?;
            p.insert(
                format!("trunk.fc{}.b", i + 1),
                Tensor::zeros(&[self.hidden_width]),
            )?;
            width = self.hidden_width;
        }
        for task in 0..self.task_count() {
            let k = self.head_outputs(task);
            p.insert(head_param(task, "w"), trunc_normal(&mut rng, &[width, k], width))?;
            p.insert(head_param(task, "b"), Tensor::zeros(&[k]))?;
        }
        Ok(p)
    }
}

pub const SPATIAL_EMBEDDING: &str = "embed.spatial";

/// Parameter name prefixes shared across tasks and copied on transfer.
pub const ENCODER_PREFIXES: [&str; 2] = ["encoder.", "embed."];

pub fn head_param(task: usize, which: &str) -> String {
    format!("head.{task}.{which}")
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let normal = Normal::new(0.0, std).expect("positive std");
    while data.len() < n {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 * std {
            data.push(z as f32);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// A head's output node and the batch rows it covers.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub task: usize,
    pub rows: Vec<usize>,
    pub node: NodeId,
}

/// Network output for one batch element.
#[derive(Clone, Debug, PartialEq)]
pub enum QOutput {
    Scalar(Vec<f64>),
    /// Row-major `[actions, atoms]`, unnormalized.
    Categorical { logits: Vec<f64>, atoms: usize },
}

impl QOutput {
    /// Per-action Q-values (expectations for categorical outputs).
    pub fn q_values(&self, support: Option<&SupportSpec>) -> Vec<f64> {
        match self {
            QOutput::Scalar(q) => q.clone(),
            QOutput::Categorical { logits, atoms } => {
                let z = support
                    .map(SupportSpec::atoms)
                    .expect("categorical output needs a support");
                logits
                    .chunks(*atoms)
                    .map(|row| {
                        crate::diffcore::softmax(row)
                            .iter()
                            .zip(&z)
                            .map(|(p, v)| p * v)
                            .sum()
                    })
                    .collect()
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            QOutput::Scalar(q) => q.iter().all(|v| v.is_finite()),
            QOutput::Categorical { logits, .. } => logits.iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    config: QNetworkConfig,
    pub params: ParamSet<f32>,
    encoder_frozen: bool,
}

impl QNetwork {
    pub fn new(config: QNetworkConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(QNetwork {
            config,
            params,
            encoder_frozen: false,
        })
    }

    pub fn from_params(config: QNetworkConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let expected = config.init_params(0)?;
        if !expected.same_layout(&params) {
            return Err(Error::invalid("parameter layout does not match config"));
        }
        Ok(QNetwork {
            config,
            params,
            encoder_frozen: false,
        })
    }

    pub fn config(&self) -> &QNetworkConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder_frozen
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder_frozen = frozen;
    }

    pub fn is_encoder_param(name: &str) -> bool {
        ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// Splits parameters into (trainable, frozen) according to the freeze flag.
    pub fn partition(&self) -> (ParamSet<f32>, ParamSet<f32>) {
        let mut train = ParamSet::new();
        let mut frozen = ParamSet::new();
        for (name, t) in self.params.iter() {
            if self.encoder_frozen && Self::is_encoder_param(name) {
                frozen.set(name.clone(), t.clone());
            } else {
                train.set(name.clone(), t.clone());
            }
        }
        (train, frozen)
    }

    /// Stacks `[H, W, C]` observations into a `[B, H, W, C]` tensor.
    pub fn batch_obs(&self, obs: &[&[f32]]) -> Result<Tensor<f32>> {
        let per: usize = self.config.input_shape.iter().product();
        let mut data = Vec::with_capacity(per * obs.len());
        for o in obs {
            if o.len() != per {
                return Err(Error::invalid(format!(
                    "observation has {} values, expected {per}",
                    o.len()
                )));
            }
            data.extend_from_slice(o);
        }
        let [h, w, c] = self.config.input_shape;
        Tensor::new(vec![obs.len(), h, w, c], data)
    }

    /// Inference without gradients.
    pub fn forward(&self, obs: &Tensor<f32>, task_ids: &[usize]) -> Result<Vec<QOutput>> {
        let mut g = Graph::new();
        g.bind_params(&self.params, false)?;
        let x = g.constant(obs.clone());
        let heads = self.config.build_forward(&mut g, x, task_ids)?;
        let mut out: Vec<Option<QOutput>> = vec![None; task_ids.len()];
        for h in heads {
            let v = g.value(h.node);
            let k = v.shape()[1];
            for (i, &row) in h.rows.iter().enumerate() {
                let vals = v.data()[i * k..(i + 1) * k].iter().map(|&x| x as f64).collect();
                out[row] = Some(match &self.config.head {
                    HeadMode::Scalar => QOutput::Scalar(vals),
                    HeadMode::Categorical { support } => QOutput::Categorical {
                        logits: vals,
                        atoms: support.n_atoms(),
                    },
                });
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every row covered")).collect())
    }

    /// Per-action Q-values for each batch element.
    pub fn q_values(&self, obs: &Tensor<f32>, task_ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        let support = self.config.head.support();
        Ok(self
            .forward(obs, task_ids)?
            .iter()
            .map(|o| o.q_values(support))
            .collect())
    }

    /// The vectors entering the heads.
    pub fn features(&self, obs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        g.bind_params(&self.params, false)?;
        let x = g.constant(obs.clone());
        let f = self.config.build_features(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    /// Encoder feature map for `obs`.
    pub fn encode(&self, obs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        g.bind_params(&self.params, false)?;
        let x = g.constant(obs.clone());
        let f = self.config.build_encoder(&mut g, x)?;
        Ok(g.value(f).clone())
    }
}

/// Copies the online parameters into the target network.
pub fn sync_target(online: &QNetwork, target: &mut QNetwork) -> Result<()> {
    if online.config != target.config {
        return Err(Error::invalid("online and target configs differ"));
    }
    target.params = online.params.clone();
    Ok(())
}

/// New network for `new_config` carrying over the pretrained encoder and
/// spatial embedding; trunk and heads are fresh from `seed`.
pub fn transfer_encoder(
    pretrained: &QNetwork,
    new_config: QNetworkConfig,
    seed: u64,
    freeze: bool,
) -> Result<QNetwork> {
    if !pretrained.config.same_encoder(&new_config) {
        return Err(Error::invalid(
            "encoder specs differ between pretrained and new config",
        ));
    }
    let mut net = QNetwork::new(new_config, seed)?;
    for (name, t) in pretrained.params.iter() {
        if QNetwork::is_encoder_param(name) {
            net.params.set(name.clone(), t.clone());
        }
    }
    net.encoder_frozen = freeze;
    Ok(net)
}

/// Elementwise product of a feature map with a learned embedding, flattened.
pub fn spatial_pool(featmap: &Tensor<f32>, embedding: &Tensor<f32>) -> Result<Vec<f32>> {
    if featmap.shape() != embedding.shape() {
        return Err(Error::invalid(format!(
            "feature map {:?} vs embedding {:?}",
            featmap.shape(),
            embedding.shape()
        )));
    }
    Ok(featmap
        .data()
        .iter()
        .zip(embedding.data())
        .map(|(a, b)| a * b)
        .collect())
}

#[cfg(test)]
mod tests;
