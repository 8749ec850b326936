use super::tensor::ParamSet;
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-2;

/// Worst per-coordinate relative error between the analytic gradient
/// returned by `f` at `point` and central differences with spacing `step`.
///
/// `f` maps a parameter set to `(loss, analytic gradient)`; only the loss is
/// used at perturbed points.
pub fn finite_diff_check<F>(f: F, point: &ParamSet<f64>, step: f64) -> Result<f64>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let (_, analytic) = f(point)?;
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    let names: Vec<String> = point.names().cloned().collect();
    for name in &names {
        let n = point.get(name).unwrap().len();
        let grad = analytic.get(name).map(|t| t.data().to_vec());
        for i in 0..n {
            let orig = point.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let (up, _) = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let (down, _) = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
