use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cost::{turn_forward, CostModel};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;

/// Number of timed repetitions when none is given.
pub const DEFAULT_REPEATS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLatency {
    /// 1-based turn index.
    pub turn: usize,
    pub mean_ms: f64,
    /// Sample variance over repeats, in ms².
    pub var_ms: f64,
}

/// Times encoder plus one decoder step for every turn of a scripted
/// conversation on dummy tokens. One untimed pass warms up first.
pub fn latency_bench<F: Scalar>(model: &Model<F>, cost: &CostModel, repeats: usize) -> Result<Vec<TurnLatency>> {
    cost.validate()?;
    if repeats < 3 {
        return Err(Error::Config(format!("latency needs at least 3 repeats, got {repeats}")));
    }
    let mut samples = vec![Vec::with_capacity(repeats); cost.turns];
    for pass in 0..=repeats {
        let mut memory = model.initial_memory(1).slots;
        for t in 1..=cost.turns {
            let start = Instant::now();
            memory = turn_forward(model, cost, t, memory)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if pass > 0 {
                samples[t - 1].push(ms);
            }
        }
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            TurnLatency {
                turn: i + 1,
                mean_ms: mean,
                var_ms: var,
            }
        })
        .collect())
}

/// Ordinary least-squares line through `(x, y)` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; infinite with fewer than three points.
    pub slope_stderr: f64,
    pub mean_y: f64,
}

impl LineFit {
    /// `slope / stderr`.
    pub fn t_stat(&self) -> f64 {
        self.slope / self.slope_stderr
    }
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let slope_stderr = if xs.len() > 2 && sxx > 0.0 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    LineFit {
        slope,
        intercept,
        slope_stderr,
        mean_y: my,
    }
}

/// Fits mean latency against turn index.
pub fn latency_trend(turns: &[TurnLatency]) -> LineFit {
    let xs: Vec<f64> = turns.iter().map(|t| t.turn as f64).collect();
    let ys: Vec<f64> = turns.iter().map(|t| t.mean_ms).collect();
    fit_line(&xs, &ys)
}
