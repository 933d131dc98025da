//! Limited-memory BFGS with Armijo backtracking. Accepted iterates never
//! increase the objective.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective is not finite at the initial point ({0})")]
    NonFiniteLoss(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub max_iterations: usize,
    /// Stop once `(f_prev − f) / |f_prev|` drops below this.
    pub tolerance: f64,
    pub memory: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { max_iterations: 500, tolerance: 1e-10, memory: 10, armijo: 1e-4, max_backtracks: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub iterations: usize,
    pub initial_value: f64,
    pub final_value: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    RelativeDecrease,
    ZeroGradient,
    LineSearchFailed,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective` in place. The closure writes the gradient into its
/// second argument and returns the objective value.
pub fn minimize<F>(x: &mut [f64], mut objective: F, cfg: &OptimConfig) -> Result<OptimReport, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut f = objective(x, &mut grad);
    if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteLoss(f));
    }
    let initial_value = f;
    let mut history = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut iterations = 0;

    let stop_reason = loop {
        if iterations >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm == 0.0 {
            break StopReason::ZeroGradient;
        }

        let mut accepted = None;
        // L-BFGS direction first, steepest descent as the fallback
        for use_memory in [true, false] {
            if use_memory && pairs.is_empty() {
                continue;
            }
            let direction = if use_memory { two_loop(&grad, &pairs) } else { grad.iter().map(|g| -g).collect() };
            let slope = dot(&direction, &grad);
            if !(slope < 0.0) {
                continue;
            }
            let mut step = if use_memory { 1.0 } else { 1.0 / gnorm };
            for _ in 0..cfg.max_backtracks {
                for i in 0..n {
                    trial[i] = x[i] + step * direction[i];
                }
                let ft = objective(&trial, &mut trial_grad);
                if ft.is_finite() && ft <= f + cfg.armijo * step * slope && ft < f {
                    accepted = Some(ft);
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            pairs.clear();
        }

        let Some(f_new) = accepted else {
            break StopReason::LineSearchFailed;
        };
        let s: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == cfg.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        let f_prev = f;
        f = f_new;
        history.push(f);
        iterations += 1;
        if f_prev - f <= cfg.tolerance * f_prev.abs() {
            break StopReason::RelativeDecrease;
        }
    };

    Ok(OptimReport { iterations, initial_value, final_value: f, history, stop_reason })
}

fn two_loop(grad: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    let (s, y, _) = pairs.back().expect("non-empty memory");
    let gamma = dot(s, y) / dot(y, y);
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
