use nalgebra::DVector;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{half_squared_norm, linearize, DerivativeMode, ParamLayout, Residuals, SolveReport, StopReason};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct AdamConfig {
    pub step: f64,
    pub iters: usize,
    /// Stop once a step improves the cost by less than this relative amount.
    pub tol: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub derivatives: DerivativeMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step: 1e-2,
            iters: 300,
            tol: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            derivatives: DerivativeMode::Forward,
        }
    }
}

/// Adam on `½ Σ rᵢ²`; returns the best iterate seen.
///
/// The stopping test runs before a candidate is adopted, so `tol = ∞`
/// returns `x0` unchanged.
pub fn solve_first_order<R: Residuals>(
    problem: &R,
    layout: &ParamLayout,
    x0: &[f64],
    cfg: &AdamConfig,
) -> Result<SolveReport> {
    if x0.len() != problem.num_params() || layout.total() != x0.len() {
        return Err(Error::Dimension {
            what: "parameter vector",
            expected: problem.num_params(),
            got: x0.len(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("initial point is not finite".into()));
    }
    let active = layout.active_indices();
    let n = active.len();
    let mut x = x0.to_vec();
    let (r, jac) = linearize(problem, &x, &active, cfg.derivatives)?;
    let mut cost = half_squared_norm(&r);
    let mut grad = jac.tr_mul(&DVector::from_column_slice(&r));

    let mut best = (x.clone(), cost, grad.amax());
    let mut trace = vec![cost];
    let mut m = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    while iterations < cfg.iters {
        iterations += 1;
        let t = iterations as i32;
        m = &m * cfg.beta1 + &grad * (1.0 - cfg.beta1);
        v = &v * cfg.beta2 + grad.component_mul(&grad) * (1.0 - cfg.beta2);
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut cand = x.clone();
        for (k, &i) in active.iter().enumerate() {
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            cand[i] -= cfg.step * mh / (vh.sqrt() + cfg.eps);
        }
        let linearized = linearize(problem, &cand, &active, cfg.derivatives);
        let (cr, cj) = match linearized {
            Ok(v) => v,
            Err(_) => {
                return Err(Error::Diverged {
                    iterations,
                    last_finite: best.0,
                })
            }
        };
        let cand_cost = half_squared_norm(&cr);
        if !cand_cost.is_finite() {
            return Err(Error::Diverged {
                iterations,
                last_finite: best.0,
            });
        }
        let rel = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
        if (0.0..cfg.tol).contains(&rel) || cost == 0.0 {
            stop = StopReason::SmallImprovement;
            break;
        }
        x = cand;
        cost = cand_cost;
        grad = cj.tr_mul(&DVector::from_column_slice(&cr));
        if cost < best.1 {
            best = (x.clone(), cost, grad.amax());
            trace.push(cost);
        }
    }

    let (x, cost, gradient_norm) = best;
    Ok(SolveReport {
        x,
        cost,
        accepted_steps: trace.len() - 1,
        trace,
        iterations,
        stop,
        gradient_norm,
    })
}
