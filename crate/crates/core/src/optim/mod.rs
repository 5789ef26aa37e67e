//! Residual-based optimization: parameter layout, forward-mode Jacobians,
//! Levenberg–Marquardt and Adam solvers, Huber robustification.
//!
//! All solvers minimize `½ Σ rᵢ²` over the non-frozen entries of a
//! [`ParamLayout`]; frozen entries are never written.

mod adam;
mod lm;

pub use adam::{solve_first_order, AdamConfig};
pub use lm::{solve_lm, LmConfig};

use nalgebra::{DMatrix, DVector};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Real, LANES};
use crate::error::{Error, Result};

/// A residual function `x ↦ r(x)` with fixed input and output dimensions.
///
/// `eval` must be pure and produce the same structure for every `x`.
pub trait Residuals {
    fn num_params(&self) -> usize;
    fn num_residuals(&self) -> usize;
    fn eval<T: Real>(&self, x: &[T], out: &mut [T]);

    /// Residuals and forward-mode Jacobian columns for `active`. Problems
    /// with block sparsity override this to skip structurally zero work.
    fn linearize_active(&self, x: &[f64], active: &[usize]) -> Result<(Vec<f64>, DMatrix<f64>)>
    where
        Self: Sized,
    {
        jacobian_active(self, x, active)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub frozen: bool,
}

/// Named contiguous blocks covering `[0, total)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.total;
        self.blocks.push(Block {
            name: name.into(),
            offset,
            len,
            frozen: false,
        });
        self.total += len;
        offset
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let b = self
            .blocks
            .iter_mut()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::InvalidParam(format!("unknown parameter block {name:?}")))?;
        b.frozen = frozen;
        Ok(())
    }

    /// Sets the frozen flag of every block from a predicate on its name.
    pub fn freeze_where(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for b in &mut self.blocks {
            b.frozen = pred(&b.name);
        }
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.blocks
            .iter()
            .find(|b| index >= b.offset && index < b.offset + b.len)
            .is_some_and(|b| b.frozen)
    }

    /// Indices of all non-frozen parameters, ascending.
    pub fn active_indices(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| !b.frozen)
            .flat_map(|b| b.offset..b.offset + b.len)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    #[default]
    Forward,
    FiniteDifference,
}

pub fn half_squared_norm(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Residual values at `x`; errors on any non-finite entry.
pub fn evaluate<R: Residuals>(problem: &R, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; problem.num_residuals()];
    problem.eval(x, &mut out);
    check_finite(&out)?;
    Ok(out)
}

fn check_finite(r: &[f64]) -> Result<()> {
    match r.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Residuals and the Jacobian columns of `active` by forward-mode dual
/// numbers, [`LANES`] columns per pass.
pub fn jacobian_active<R: Residuals>(
    problem: &R,
    x: &[f64],
    active: &[usize],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let m = problem.num_residuals();
    let mut jac = DMatrix::zeros(m, active.len());
    if active.is_empty() {
        return Ok((evaluate(problem, x)?, jac));
    }
    let mut xd: Vec<Dual<LANES>> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut out = vec![Dual::<LANES>::constant(0.0); m];
    let mut values = Vec::new();
    for (c, chunk) in active.chunks(LANES).enumerate() {
        for (lane, &i) in chunk.iter().enumerate() {
            xd[i] = Dual::seeded(x[i], lane);
        }
        problem.eval(&xd, &mut out);
        for (row, o) in out.iter().enumerate() {
            for lane in 0..chunk.len() {
                jac[(row, c * LANES + lane)] = o.d[lane];
            }
        }
        if values.is_empty() {
            values = out.iter().map(|o| o.v).collect();
        }
        for &i in chunk {
            xd[i] = Dual::constant(x[i]);
        }
    }
    check_finite(&values)?;
    if let Some(index) = jac.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: index % m });
    }
    Ok((values, jac))
}

/// Central finite differences over `active` columns.
pub fn jacobian_fd_active<R: Residuals>(
    problem: &R,
    x: &[f64],
    active: &[usize],
    step: f64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let values = evaluate(problem, x)?;
    let m = values.len();
    let mut jac = DMatrix::zeros(m, active.len());
    let mut xp = x.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for (c, &i) in active.iter().enumerate() {
        let h = step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        problem.eval(&xp, &mut plus);
        xp[i] = x[i] - h;
        problem.eval(&xp, &mut minus);
        xp[i] = x[i];
        for row in 0..m {
            jac[(row, c)] = (plus[row] - minus[row]) / (2.0 * h);
        }
    }
    Ok((values, jac))
}

/// Full `m × n` Jacobian; frozen blocks give zero columns.
pub fn jacobian<R: Residuals>(problem: &R, layout: &ParamLayout, x: &[f64]) -> Result<DMatrix<f64>> {
    scatter_columns(problem, layout, jacobian_active(problem, x, &layout.active_indices())?.1)
}

/// Full-width central-difference Jacobian, for checking [`jacobian`].
pub fn jacobian_fd<R: Residuals>(
    problem: &R,
    layout: &ParamLayout,
    x: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    let active = layout.active_indices();
    scatter_columns(problem, layout, jacobian_fd_active(problem, x, &active, step)?.1)
}

fn scatter_columns<R: Residuals>(problem: &R, layout: &ParamLayout, compact: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut full = DMatrix::zeros(problem.num_residuals(), layout.total());
    for (c, i) in layout.active_indices().into_iter().enumerate() {
        full.set_column(i, &compact.column(c));
    }
    Ok(full)
}

pub(crate) fn linearize<R: Residuals>(
    problem: &R,
    x: &[f64],
    active: &[usize],
    mode: DerivativeMode,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    match mode {
        DerivativeMode::Forward => problem.linearize_active(x, active),
        DerivativeMode::FiniteDifference => jacobian_fd_active(problem, x, active, 1e-6),
    }
}

/// `JᵀJ` and `Jᵀr`, accumulated per row over its nonzero entries only.
/// Keypoint rows touch few parameters, so this beats the dense product.
pub(crate) fn normal_equations(jac: &DMatrix<f64>, r: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = jac.ncols();
    let rows = jac.transpose();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut nz: Vec<(usize, f64)> = Vec::with_capacity(n);
    for (k, row) in rows.column_iter().enumerate() {
        nz.clear();
        nz.extend(row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)));
        for (a, &(i, vi)) in nz.iter().enumerate() {
            g[i] += vi * r[k];
            let col = h.column_mut(i);
            let col = col.data.into_slice_mut();
            for &(j, vj) in &nz[..=a] {
                col[j] += vi * vj;
            }
        }
    }
    // only the upper triangle (row <= column) was filled
    for i in 0..n {
        for j in 0..i {
            h[(i, j)] = h[(j, i)];
        }
    }
    (h, g)
}

/// Huber loss `ρ(r)`: `r²` for `|r| ≤ δ`, `2δ|r| - δ²` beyond.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        a * a
    } else {
        2.0 * delta * a - delta * delta
    }
}

/// Effective IRLS weight `ρ'(r) / 2r` relative to plain least squares.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Rescales a residual vector in place so its squared norm equals
/// `ρ(‖e‖)`. The map is C¹, so it composes with Gauss–Newton.
pub fn robustify<T: Real>(e: &mut [T], delta: f64) {
    let s2 = e.iter().fold(T::zero(), |acc, v| acc + *v * *v);
    let s = s2.value().sqrt();
    if s <= delta {
        return;
    }
    let norm = s2.sqrt();
    let factor = (norm * (2.0 * delta) - delta * delta).sqrt() / norm;
    for v in e {
        *v *= factor;
    }
}

/// Why a solver stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SmallGradient,
    SmallStep,
    SmallImprovement,
    MaxIterations,
    /// Damping saturated without finding a descent step.
    Stalled,
}

impl StopReason {
    pub fn converged(self) -> bool {
        matches!(
            self,
            StopReason::SmallGradient | StopReason::SmallStep | StopReason::SmallImprovement
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub cost: f64,
    /// Cost of the initial point followed by every accepted iterate.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub stop: StopReason,
    /// Infinity norm of `Jᵀr` over active parameters at the returned point.
    pub gradient_norm: f64,
}
