use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Model;
use crate::tensor::relative_error;
use crate::train::{mrbp_step, rollout_loss, Rollout, StepConfig};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares rollout gradients from memory-replay back-propagation with
/// central differences of the rollout loss. Every parameter tensor is probed
/// at up to `per_tensor` coordinates drawn with `seed`. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn check_model_gradients(
    model: &mut Model<f64>,
    rollout: &Rollout<f64>,
    per_tensor: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let cfg = StepConfig::default();
    let analytic = mrbp_step(model, rollout, &cfg)?.grads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in ids {
        let len = model.params.get(id).len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_tensor).into_vec()
        };
        for i in picks {
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + step;
            let up = rollout_loss(model, rollout, &cfg)?;
            model.params.get_mut(id).data_mut()[i] = orig - step;
            let down = rollout_loss(model, rollout, &cfg)?;
            model.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).data()[i];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{}[{i}]", model.params.name(id));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
