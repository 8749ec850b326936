//! Categorical return distributions on a fixed, evenly spaced support.

use serde::{Deserialize, Serialize};

use crate::diffcore::{logsumexp, softmax};
use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` for [`CategoricalDistribution`].
pub const MASS_TOL: f64 = 1e-6;

/// Fractional atom positions this close to an integer count as on-atom.
const ON_ATOM_TOL: f64 = 1e-9;

/// Atoms `z_i = v_min + i·Δz`, `i = 0..n_atoms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSpec {
    v_min: f64,
    v_max: f64,
    n_atoms: usize,
}

impl SupportSpec {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Result<Self> {
        if !(v_min.is_finite() && v_max.is_finite()) || v_min >= v_max {
            return Err(Error::invalid(format!(
                "support needs v_min < v_max, got [{v_min}, {v_max}]"
            )));
        }
        if n_atoms < 2 {
            return Err(Error::invalid(format!("support needs >= 2 atoms, got {n_atoms}")));
        }
        Ok(SupportSpec {
            v_min,
            v_max,
            n_atoms,
        })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn delta(&self) -> f64 {
        (self.v_max - self.v_min) / (self.n_atoms - 1) as f64
    }

    /// Atom value; the last atom is exactly `v_max`.
    pub fn atom(&self, i: usize) -> f64 {
        if i + 1 == self.n_atoms {
            self.v_max
        } else {
            self.v_min + i as f64 * self.delta()
        }
    }

    pub fn atoms(&self) -> Vec<f64> {
        (0..self.n_atoms).map(|i| self.atom(i)).collect()
    }
}

impl Default for SupportSpec {
    /// `[-20, 20]` with 51 atoms.
    fn default() -> Self {
        SupportSpec {
            v_min: -20.0,
            v_max: 20.0,
            n_atoms: 51,
        }
    }
}

/// Shorthand for [`SupportSpec::new`].
pub fn make_support(v_min: f64, v_max: f64, n_atoms: usize) -> Result<SupportSpec> {
    SupportSpec::new(v_min, v_max, n_atoms)
}

/// Probability vector over a support's atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("probabilities must be finite and >= 0"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(CategoricalDistribution { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("logits must be non-empty and finite"));
        }
        Ok(CategoricalDistribution {
            probs: softmax(logits),
        })
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::OutOfRange(format!("atom {index} of {n}")));
        }
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Ok(CategoricalDistribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        CategoricalDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Projects atoms moved to `target_values` (one per atom of `target_probs`)
/// back onto `support`. Each mass is clipped into `[v_min, v_max]` and split
/// between its two bracketing atoms in proportion to proximity; a value that
/// lands on an atom goes wholly to it.
pub fn project(
    target_values: &[f64],
    target_probs: &CategoricalDistribution,
    support: &SupportSpec,
) -> Result<CategoricalDistribution> {
    if target_values.len() != target_probs.len() {
        return Err(Error::invalid(format!(
            "{} target values for {} probabilities",
            target_values.len(),
            target_probs.len()
        )));
    }
    if target_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("target values must be finite"));
    }
    let n = support.n_atoms();
    let dz = support.delta();
    let mut out = vec![0.0f64; n];
    for (&value, &p) in target_values.iter().zip(target_probs.probs()) {
        if p == 0.0 {
            continue;
        }
        let clipped = value.clamp(support.v_min(), support.v_max());
        let mut b = ((clipped - support.v_min()) / dz).clamp(0.0, (n - 1) as f64);
        // snap round-off so values sitting on an atom are not split
        if (b - b.round()).abs() < ON_ATOM_TOL {
            b = b.round();
        }
        let lower = b.floor();
        let frac = b - lower;
        let l = lower as usize;
        if frac == 0.0 || l + 1 >= n {
            out[l.min(n - 1)] += p;
        } else {
            out[l] += p * (1.0 - frac);
            out[l + 1] += p * frac;
        }
    }
    Ok(CategoricalDistribution { probs: out })
}

/// Projection of the shifted and discounted target `reward + discount·z`.
pub fn project_bellman(
    reward: f64,
    discount: f64,
    next: &CategoricalDistribution,
    support: &SupportSpec,
) -> Result<CategoricalDistribution> {
    let values: Vec<f64> = (0..support.n_atoms())
        .map(|i| reward + discount * support.atom(i))
        .collect();
    project(&values, next, support)
}

/// `Σ p_i·z_i`.
pub fn expected_q(dist: &CategoricalDistribution, support: &SupportSpec) -> f64 {
    dist.probs()
        .iter()
        .enumerate()
        .map(|(i, p)| p * support.atom(i))
        .sum()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Action with the largest expected return, lowest index on ties.
pub fn greedy_action(per_action: &[CategoricalDistribution], support: &SupportSpec) -> Result<usize> {
    if per_action.is_empty() {
        return Err(Error::invalid("greedy_action needs at least one action"));
    }
    let q: Vec<f64> = per_action.iter().map(|d| expected_q(d, support)).collect();
    Ok(argmax_first(&q))
}

/// `-Σ target_i · log softmax(pred)_i`.
pub fn cross_entropy_td(pred_logits: &[f64], target: &CategoricalDistribution) -> Result<f64> {
    if pred_logits.len() != target.len() {
        return Err(Error::invalid(format!(
            "{} logits for {} target atoms",
            pred_logits.len(),
            target.len()
        )));
    }
    let lse = logsumexp(pred_logits)?;
    Ok(-pred_logits
        .iter()
        .zip(target.probs())
        .map(|(l, t)| t * (l - lse))
        .sum::<f64>())
}

/// Closed-form gradient of [`cross_entropy_td`] with respect to the logits.
pub fn cross_entropy_grad(pred_logits: &[f64], target: &CategoricalDistribution) -> Vec<f64> {
    softmax(pred_logits)
        .iter()
        .zip(target.probs())
        .map(|(p, t)| p - t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_support_spacing() {
        let s = make_support(-20.0, 20.0, 51).unwrap();
        assert!((s.delta() - 0.8).abs() < 1e-12);
        assert!(s.atom(25).abs() < 1e-12);
        assert_eq!(s.atom(0), -20.0);
        assert_eq!(s.atom(50), 20.0);
        assert_eq!(s, SupportSpec::default());
        assert!((make_support(-10.0, 10.0, 51).unwrap().delta() - 0.4).abs() < 1e-12);
        assert_eq!(make_support(0.0, 1.0, 2).unwrap().atoms(), vec![0.0, 1.0]);
    }

    #[test]
    fn bad_support_is_rejected() {
        assert!(make_support(1.0, 1.0, 51).is_err());
        assert!(make_support(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn zero_discount_zero_reward_is_one_hot_at_zero() {
        let s = SupportSpec::default();
        let d = CategoricalDistribution::uniform(51);
        let p = project_bellman(0.0, 0.0, &d, &s).unwrap();
        for (i, &m) in p.probs().iter().enumerate() {
            let want = if i == 25 { 1.0 } else { 0.0 };
            assert!((m - want).abs() < 1e-12, "atom {i}: {m}");
        }
    }

    #[test]
    fn identity_backup_is_fixed_point() {
        let s = SupportSpec::default();
        let mut probs = vec![0.0; 51];
        probs[3] = 0.25;
        probs[30] = 0.5;
        probs[50] = 0.25;
        let d = CategoricalDistribution::new(probs).unwrap();
        assert_eq!(project_bellman(0.0, 1.0, &d, &s).unwrap(), d);
    }

    #[test]
    fn expected_q_examples() {
        let s = SupportSpec::default();
        assert_eq!(expected_q(&CategoricalDistribution::one_hot(51, 25).unwrap(), &s), 0.0);
        assert!(expected_q(&CategoricalDistribution::uniform(51), &s).abs() < 1e-6);
        let mut probs = vec![0.0; 51];
        probs[0] = 0.25;
        probs[50] = 0.75;
        let d = CategoricalDistribution::new(probs).unwrap();
        assert!((expected_q(&d, &s) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_ties_pick_lowest_index() {
        let s = SupportSpec::default();
        let u = CategoricalDistribution::uniform(51);
        assert_eq!(greedy_action(&[u.clone(), u.clone(), u], &s).unwrap(), 0);
        let zero = CategoricalDistribution::one_hot(51, 25).unwrap();
        let mut probs = vec![0.0; 51];
        probs[25] = 0.5;
        probs[50] = 0.5;
        let ten = CategoricalDistribution::new(probs).unwrap();
        assert_eq!(greedy_action(&[zero, ten], &s).unwrap(), 1);
        assert!(greedy_action(&[], &s).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let target = CategoricalDistribution::one_hot(51, 7).unwrap();
        let ce = cross_entropy_td(&[0.0; 51], &target).unwrap();
        assert!((ce - 51f64.ln()).abs() < 1e-12);
        assert!((ce - 3.9318).abs() < 1e-4);

        let logits = [0.3, -1.0, 2.0, 0.5];
        let matched = CategoricalDistribution::from_logits(&logits).unwrap();
        let ce = cross_entropy_td(&logits, &matched).unwrap();
        assert!((ce - matched.entropy()).abs() < 1e-12);

        assert!(cross_entropy_td(&[0.0; 3], &target).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = [0.3, -1.0, 2.0, 0.5];
        let target = CategoricalDistribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let grad = cross_entropy_grad(&logits, &target);
        for i in 0..4 {
            let mut up = logits;
            let mut down = logits;
            up[i] += 1e-6;
            down[i] -= 1e-6;
            let num = (cross_entropy_td(&up, &target).unwrap()
                - cross_entropy_td(&down, &target).unwrap())
                / 2e-6;
            assert!((num - grad[i]).abs() < 1e-8);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        // Independent formulation: each atom z_i receives mass through the
        // triangular kernel max(0, 1 - |v - z_i| / dz).
        fn triangular_projection(values: &[f64], probs: &[f64], s: &SupportSpec) -> Vec<f64> {
            (0..s.n_atoms())
                .map(|i| {
                    values
                        .iter()
                        .zip(probs)
                        .map(|(v, p)| {
                            let v = v.clamp(s.v_min(), s.v_max());
                            p * (1.0 - (v - s.atom(i)).abs() / s.delta()).max(0.0)
                        })
                        .sum()
                })
                .collect()
        }

        fn dist(n: usize) -> impl Strategy<Value = CategoricalDistribution> {
            proptest::collection::vec(-5.0f64..5.0, n)
                .prop_map(|l| CategoricalDistribution::from_logits(&l).unwrap())
        }

        proptest! {
            #[test]
            fn projection_matches_triangular_kernel(
                next in dist(11),
                reward in -30.0f64..30.0,
                discount in 0.0f64..1.0,
            ) {
                let s = SupportSpec::new(-10.0, 10.0, 11).unwrap();
                let got = project_bellman(reward, discount, &next, &s).unwrap();
                let values: Vec<f64> = s.atoms().iter().map(|z| reward + discount * z).collect();
                let want = triangular_projection(&values, next.probs(), &s);
                for (g, w) in got.probs().iter().zip(&want) {
                    prop_assert!((g - w).abs() < 1e-9, "{g} vs {w}");
                }
                let mass: f64 = got.probs().iter().sum();
                prop_assert!((mass - 1.0).abs() < MASS_TOL);
                prop_assert!(got.probs().iter().all(|&p| p >= 0.0));
            }

            #[test]
            fn projection_preserves_clipped_mean_within_half_spacing(
                next in dist(21),
                reward in -3.0f64..3.0,
                discount in 0.0f64..1.0,
            ) {
                let s = SupportSpec::new(-20.0, 20.0, 21).unwrap();
                let got = project_bellman(reward, discount, &next, &s).unwrap();
                let clipped_mean: f64 = s
                    .atoms()
                    .iter()
                    .zip(next.probs())
                    .map(|(z, p)| p * (reward + discount * z).clamp(s.v_min(), s.v_max()))
                    .sum();
                prop_assert!((expected_q(&got, &s) - clipped_mean).abs() <= s.delta() / 2.0 + 1e-9);
            }

            #[test]
            fn greedy_is_invariant_to_positive_affine_maps(
                q in proptest::collection::vec(-10.0f64..10.0, 1..8),
                a in 0.1f64..5.0,
                b in -5.0f64..5.0,
            ) {
                let mapped: Vec<f64> = q.iter().map(|v| a * v + b).collect();
                // affine maps can merge near-ties through rounding; compare values
                let i = argmax_first(&q);
                let j = argmax_first(&mapped);
                prop_assert!((q[i] - q[j]).abs() < 1e-9);
            }

            #[test]
            fn cross_entropy_bounds_entropy(pred in proptest::collection::vec(-5.0f64..5.0, 6), target in dist(6)) {
                let ce = cross_entropy_td(&pred, &target).unwrap();
                prop_assert!(ce >= target.entropy() - 1e-9);
                let self_ce = cross_entropy_td(
                    &target.probs().iter().map(|p| p.ln()).collect::<Vec<_>>(),
                    &target,
                ).unwrap();
                prop_assert!((self_ce - target.entropy()).abs() < 1e-9);
            }
        }
    }
}
