//! Training objectives: conservative regularizer, TD targets (scalar MSE or
//! categorical cross-entropy), discrete BCQ action filtering, and behavior
//! cloning.
//!
//! Eager `f64` functions here double as reference implementations for the
//! graph-built losses used during training.

use serde::{Deserialize, Serialize};

use crate::diffcore::{logsumexp, softmax, Graph, NodeId, Real, Tensor};
use crate::distributional::{
    argmax_first, cross_entropy_td, project_bellman, CategoricalDistribution, SupportSpec,
};
use crate::error::{Error, Result};
use crate::qnet::{HeadOutput, QOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TdKind {
    Mse,
    C51,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub td: TdKind,
    /// Weight of the conservative regularizer; 0 disables it.
    pub alpha: f64,
    pub gamma: f64,
    pub n_step: usize,
    /// Replace the squared TD error with a Huber penalty (scalar TD only).
    #[serde(default)]
    pub huber_delta: Option<f64>,
    /// Restrict the target's greedy action to those the behavior model
    /// assigns at least this fraction of its top probability.
    #[serde(default)]
    pub bcq_tau: Option<f64>,
}

impl LossConfig {
    pub fn c51() -> Self {
        LossConfig {
            td: TdKind::C51,
            alpha: 0.05,
            gamma: 0.99,
            n_step: 3,
            huber_delta: None,
            bcq_tau: None,
        }
    }

    pub fn mse() -> Self {
        LossConfig {
            td: TdKind::Mse,
            alpha: 0.1,
            ..Self::c51()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.n_step == 0 {
            return Err(Error::invalid("n_step must be >= 1"));
        }
        if let Some(d) = self.huber_delta {
            if !(d > 0.0) {
                return Err(Error::invalid("huber_delta must be positive"));
            }
        }
        if let Some(t) = self.bcq_tau {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("bcq_tau {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn discount(&self) -> f64 {
        self.gamma.powi(self.n_step as i32)
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::c51()
    }
}

/// `logsumexp(q) - q[action]` for one state. Always `>= 0`.
pub fn cql_regularizer(q: &[f64], action: usize) -> Result<f64> {
    let qa = *q
        .get(action)
        .ok_or_else(|| Error::OutOfRange(format!("action {action} of {}", q.len())))?;
    Ok(logsumexp(q)? - qa)
}

/// Allowed-action mask: `p(a) >= tau * max p`.
pub fn bcq_filter(probs: &[f64], tau: f64) -> Result<Vec<bool>> {
    if probs.is_empty() {
        return Err(Error::invalid("bcq_filter needs at least one action"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau {tau} outside [0, 1]")));
    }
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(probs.iter().map(|&p| p >= tau * max).collect())
}

/// Greedy action among the allowed ones, lowest index on ties.
pub fn masked_argmax(q: &[f64], allowed: Option<&[bool]>) -> Result<usize> {
    match allowed {
        None => Ok(argmax_first(q)),
        Some(mask) => {
            if mask.len() != q.len() {
                return Err(Error::invalid("mask length differs from action count"));
            }
            let mut best: Option<usize> = None;
            for (i, (&v, &ok)) in q.iter().zip(mask).enumerate() {
                if ok && best.map_or(true, |b| v > q[b]) {
                    best = Some(i);
                }
            }
            best.ok_or_else(|| Error::invalid("no allowed action"))
        }
    }
}

/// `-log softmax(logits)[action]`.
pub fn bc_loss(logits: &[f64], action: usize) -> Result<f64> {
    let la = *logits
        .get(action)
        .ok_or_else(|| Error::OutOfRange(format!("action {action} of {}", logits.len())))?;
    Ok(logsumexp(logits)? - la)
}

/// Scalar n-step target `R + discount·(1 - done)·max_a Q_target(s', a)`.
pub fn td_target_mse(
    reward: f64,
    discount: f64,
    done: bool,
    next_q: &[f64],
    allowed: Option<&[bool]>,
) -> Result<f64> {
    if done {
        return Ok(reward);
    }
    let a = masked_argmax(next_q, allowed)?;
    Ok(reward + discount * next_q[a])
}

/// Categorical n-step target: the target network's distribution at its
/// greedy next action, shifted, discounted and projected.
pub fn td_target_c51(
    reward: f64,
    discount: f64,
    done: bool,
    next_logits: &[f64],
    support: &SupportSpec,
    allowed: Option<&[bool]>,
) -> Result<CategoricalDistribution> {
    let k = support.n_atoms();
    if next_logits.is_empty() || next_logits.len() % k != 0 {
        return Err(Error::invalid(format!(
            "{} logits is not a multiple of {k} atoms",
            next_logits.len()
        )));
    }
    let dists: Vec<CategoricalDistribution> = next_logits
        .chunks(k)
        .map(CategoricalDistribution::from_logits)
        .collect::<Result<_>>()?;
    let q: Vec<f64> = dists
        .iter()
        .map(|d| crate::distributional::expected_q(d, support))
        .collect();
    let a = masked_argmax(&q, allowed)?;
    let discount = if done { 0.0 } else { discount };
    project_bellman(reward, discount, &dists[a], support)
}

/// Per-row regression target.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Scalar(f64),
    Dist(CategoricalDistribution),
}

/// Targets for a batch of next-state target-network outputs. `discounts`
/// are per row since a window cut short by the episode end bootstraps after
/// fewer steps.
pub fn compute_targets(
    next: &[QOutput],
    rewards: &[f64],
    discounts: &[f64],
    dones: &[bool],
    allowed: Option<&[Vec<bool>]>,
    cfg: &LossConfig,
    support: Option<&SupportSpec>,
) -> Result<Vec<Target>> {
    if next.len() != rewards.len() || next.len() != dones.len() || next.len() != discounts.len() {
        return Err(Error::invalid("target inputs differ in length"));
    }
    next.iter()
        .enumerate()
        .map(|(i, out)| {
            let mask = allowed.map(|m| m[i].as_slice());
            match (cfg.td, out) {
                (TdKind::Mse, QOutput::Scalar(q)) => Ok(Target::Scalar(td_target_mse(
                    rewards[i], discounts[i], dones[i], q, mask,
                )?)),
                (TdKind::C51, QOutput::Categorical { logits, .. }) => {
                    let s = support.ok_or_else(|| Error::invalid("categorical TD needs a support"))?;
                    Ok(Target::Dist(td_target_c51(
                        rewards[i], discounts[i], dones[i], logits, s, mask,
                    )?))
                }
                _ => Err(Error::invalid("TD kind does not match network head")),
            }
        })
        .collect()
}

/// Loss components, each averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub td: f64,
    pub cql: f64,
    pub total: f64,
}

/// Reference loss over eager outputs: `mean TD + alpha·mean CQL`. Under the
/// categorical head the regularizer acts on expected Q-values.
pub fn total_loss(
    outputs: &[QOutput],
    actions: &[usize],
    targets: &[Target],
    cfg: &LossConfig,
    support: Option<&SupportSpec>,
) -> Result<LossValue> {
    if outputs.is_empty() || outputs.len() != actions.len() || outputs.len() != targets.len() {
        return Err(Error::invalid("loss inputs must be non-empty and equally long"));
    }
    let mut td = 0.0;
    let mut cql = 0.0;
    for ((out, &a), tgt) in outputs.iter().zip(actions).zip(targets) {
        match (out, tgt) {
            (QOutput::Scalar(q), Target::Scalar(y)) => {
                let diff = q.get(a).ok_or_else(|| Error::OutOfRange(format!("action {a}")))? - y;
                td += match cfg.huber_delta {
                    Some(d) if diff.abs() > d => d * (diff.abs() - 0.5 * d),
                    Some(_) => 0.5 * diff * diff,
                    None => diff * diff,
                };
                cql += cql_regularizer(q, a)?;
            }
            (QOutput::Categorical { logits, atoms }, Target::Dist(t)) => {
                let row = logits
                    .get(a * atoms..(a + 1) * atoms)
                    .ok_or_else(|| Error::OutOfRange(format!("action {a}")))?;
                td += cross_entropy_td(row, t)?;
                let z = support
                    .ok_or_else(|| Error::invalid("categorical loss needs a support"))?
                    .atoms();
                let q: Vec<f64> = logits
                    .chunks(*atoms)
                    .map(|r| softmax(r).iter().zip(&z).map(|(p, v)| p * v).sum())
                    .collect();
                cql += cql_regularizer(&q, a)?;
            }
            _ => return Err(Error::invalid("output kind does not match target kind")),
        }
    }
    let n = outputs.len() as f64;
    let (td, cql) = (td / n, cql / n);
    Ok(LossValue {
        td,
        cql,
        total: td + cfg.alpha * cql,
    })
}

/// Graph nodes of the training loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub td: NodeId,
    pub cql: NodeId,
}

/// Builds `mean TD + alpha·mean CQL` over per-task head outputs. `actions`
/// and `targets` are indexed by batch row.
pub fn build_loss<R: Real>(
    g: &mut Graph<R>,
    heads: &[HeadOutput],
    actions: &[usize],
    targets: &[Target],
    cfg: &LossConfig,
    support: Option<&SupportSpec>,
) -> Result<LossNodes> {
    let batch = actions.len();
    if batch == 0 || targets.len() != batch {
        return Err(Error::invalid("loss needs one action and target per row"));
    }
    let mut td_parts = Vec::new();
    let mut cql_parts = Vec::new();
    for h in heads {
        let n = h.rows.len();
        let acts: Vec<usize> = h.rows.iter().map(|&r| actions[r]).collect();
        let width = g.shape(h.node)[1];
        let q_rows = match cfg.td {
            TdKind::Mse => {
                let ys = h
                    .rows
                    .iter()
                    .map(|&r| match &targets[r] {
                        Target::Scalar(y) => Ok(*y),
                        Target::Dist(_) => Err(Error::invalid("scalar TD needs scalar targets")),
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let qa = g.gather_cols(h.node, &acts)?;
                let y = g.constant(Tensor::from_f64_slice(&[n], &ys)?);
                let diff = g.sub(qa, y)?;
                let pen = match cfg.huber_delta {
                    Some(d) => g.huber(diff, d)?,
                    None => g.square(diff)?,
                };
                td_parts.push(g.sum(pen)?);
                h.node
            }
            TdKind::C51 => {
                let s = support.ok_or_else(|| Error::invalid("categorical TD needs a support"))?;
                let k = s.n_atoms();
                let a_count = width / k;
                let flat = g.reshape(h.node, &[n * a_count, k])?;
                let idx: Vec<usize> = acts.iter().enumerate().map(|(i, &a)| i * a_count + a).collect();
                let chosen = g.select_rows(flat, &idx)?;
                let logp = g.log_softmax(chosen)?;
                let mut tgt = Vec::with_capacity(n * k);
                for &r in &h.rows {
                    match &targets[r] {
                        Target::Dist(d) if d.len() == k => tgt.extend_from_slice(d.probs()),
                        _ => return Err(Error::invalid("categorical TD needs matching targets")),
                    }
                }
                let t = g.constant(Tensor::from_f64_slice(&[n, k], &tgt)?);
                let prod = g.mul(logp, t)?;
                let s_ = g.sum(prod)?;
                td_parts.push(g.scale(s_, -1.0)?);
                let probs = g.softmax(flat)?;
                let q = g.row_dot(probs, &s.atoms())?;
                g.reshape(q, &[n, a_count])?
            }
        };
        let lse = g.logsumexp(q_rows)?;
        let qa = g.gather_cols(q_rows, &acts)?;
        let gap = g.sub(lse, qa)?;
        cql_parts.push(g.sum(gap)?);
    }
    let td_sum = sum_nodes(g, &td_parts)?;
    let cql_sum = sum_nodes(g, &cql_parts)?;
    let td = g.scale(td_sum, 1.0 / batch as f64)?;
    let cql = g.scale(cql_sum, 1.0 / batch as f64)?;
    let weighted = g.scale(cql, cfg.alpha)?;
    let total = g.add(td, weighted)?;
    Ok(LossNodes { total, td, cql })
}

/// Mean negative log-likelihood of `actions` under per-task logit heads.
pub fn build_bc_loss<R: Real>(
    g: &mut Graph<R>,
    heads: &[HeadOutput],
    actions: &[usize],
) -> Result<NodeId> {
    if actions.is_empty() {
        return Err(Error::invalid("behavior cloning needs a non-empty batch"));
    }
    let mut parts = Vec::new();
    for h in heads {
        let acts: Vec<usize> = h.rows.iter().map(|&r| actions[r]).collect();
        let lp = g.log_softmax(h.node)?;
        let picked = g.gather_cols(lp, &acts)?;
        parts.push(g.sum(picked)?);
    }
    let s = sum_nodes(g, &parts)?;
    g.scale(s, -1.0 / actions.len() as f64)
}

fn sum_nodes<R: Real>(g: &mut Graph<R>, nodes: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = nodes
        .split_first()
        .ok_or_else(|| Error::invalid("no head outputs in batch"))?;
    rest.iter().try_fold(first, |acc, &n| g.add(acc, n))
}
