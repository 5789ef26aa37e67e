use nalgebra::{DMatrix, DVector};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{half_squared_norm, linearize, normal_equations, DerivativeMode, ParamLayout, Residuals, SolveReport, StopReason};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct LmConfig {
    pub max_iters: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Relative tolerance on cost decrease and step length.
    pub tol: f64,
    /// Absolute tolerance on `‖Jᵀr‖∞`.
    pub gradient_tol: f64,
    pub derivatives: DerivativeMode,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 1.0 / 3.0,
            tol: 1e-10,
            gradient_tol: 1e-9,
            derivatives: DerivativeMode::Forward,
        }
    }
}

const LAMBDA_MAX: f64 = 1e16;

/// Levenberg–Marquardt with multiplicative damping on `diag(JᵀJ)`.
///
/// A step is accepted only if it strictly lowers the cost, so the accepted
/// cost sequence is non-increasing. Failed factorizations raise the damping.
pub fn solve_lm<R: Residuals>(
    problem: &R,
    layout: &ParamLayout,
    x0: &[f64],
    cfg: &LmConfig,
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
    let mut x = x0.to_vec();
    let (r, jac) = linearize(problem, &x, &active, cfg.derivatives)?;
    let mut cost = half_squared_norm(&r);
    let mut trace = vec![cost];
    let mut lambda = cfg.lambda_init;
    let mut accepted = 0;
    let mut iterations = 0;
    let mut trial_r = vec![0.0; r.len()];

    let (mut jtj, mut grad) = normal_equations(&jac, &r);
    let stop = loop {
        if grad.amax() <= cfg.gradient_tol {
            break StopReason::SmallGradient;
        }
        if iterations >= cfg.max_iters {
            break StopReason::MaxIterations;
        }
        if lambda > LAMBDA_MAX {
            break StopReason::Stalled;
        }
        iterations += 1;

        let step = damped_step(&jtj, &grad, lambda);
        let Some(step) = step else {
            lambda = (lambda * cfg.lambda_up).max(1e-12);
            continue;
        };

        let mut trial = x.clone();
        for (k, &i) in active.iter().enumerate() {
            trial[i] += step[k];
        }
        problem.eval(&trial, &mut trial_r);
        let trial_cost = half_squared_norm(&trial_r);
        if trial_cost.is_finite() && trial_cost < cost {
            let step_norm = step.norm();
            let x_norm = active.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
            let improvement = cost - trial_cost;
            x = trial;
            cost = trial_cost;
            trace.push(cost);
            accepted += 1;
            lambda *= cfg.lambda_down;
            let (nr, nj) = linearize(problem, &x, &active, cfg.derivatives)?;
            (jtj, grad) = normal_equations(&nj, &nr);
            if improvement <= cfg.tol * cost.max(f64::MIN_POSITIVE) {
                break StopReason::SmallImprovement;
            }
            if step_norm <= cfg.tol * (x_norm + cfg.tol) {
                break StopReason::SmallStep;
            }
        } else {
            lambda = (lambda * cfg.lambda_up).max(1e-12);
        }
    };

    let gradient_norm = grad.amax();
    Ok(SolveReport {
        x,
        cost,
        trace,
        iterations,
        accepted_steps: accepted,
        stop,
        gradient_norm,
    })
}

fn damped_step(jtj: &DMatrix<f64>, grad: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = jtj.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda * jtj[(i, i)].max(1e-9);
    }
    let chol = a.cholesky()?;
    let step = -chol.solve(grad);
    step.iter().all(|v| v.is_finite()).then_some(step)
}
