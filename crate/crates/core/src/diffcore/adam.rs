use super::tensor::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Optimizer state for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Conventional defaults: β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &ParamSet<f32>) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamSet<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update of every parameter that has a gradient, in name order.
/// Parameters absent from `grads` (frozen ones) are left untouched.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} != parameter shape {:?} for `{name}`",
                g.shape(),
                p.shape()
            )));
        }
        if !state.m.contains(name) {
            state.m.set(name.clone(), Tensor::zeros(p.shape()));
            state.v.set(name.clone(), Tensor::zeros(p.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.get_mut(name).expect("created above");
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = state.v.get_mut(name).expect("created above").data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i].to_f64();
            let mi = state.beta1 * md[i] as f64 + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * vd[i] as f64 + (1.0 - state.beta2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + state.eps);
            pd[i] = (pd[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_set(1.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_set(0.0), &mut st, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_set(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_set(1.0), &mut st, 0.001).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn momentum_carries_after_gradient_stops() {
        let mut p = scalar_set(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_set(1.0), &mut st, 0.001).unwrap();
        // hand trace: t=2, m = 0.09, v = 0.000999
        let mut expected = 1.0 - 0.001 / (1.0 + 1e-8);
        let (m2, v2) = (0.9 * 0.1, 0.999 * 0.001);
        let step2 = 0.001 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        adam_step(&mut p, &scalar_set(0.0), &mut st, 0.001).unwrap();
        expected -= step2;
        let after2 = p.get("w").unwrap().data()[0] as f64;
        assert!((after2 - expected).abs() < 1e-6, "{after2} vs {expected}");
        adam_step(&mut p, &scalar_set(0.0), &mut st, 0.001).unwrap();
        let after3 = p.get("w").unwrap().data()[0] as f64;
        assert!(after3 < after2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_set(1.0);
        let mut st = AdamState::new(&p);
        let mut g = ParamSet::new();
        g.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }
}
