//! Pose plausibility terms: Gaussian-mixture prior (fit by EM), joint-limit
//! hinge penalty.
//!
//! The mixture models the non-root pose subvector: global orientation and
//! translation are excluded.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dual::Real;
use crate::error::{Error, Result};
use crate::rig::{KinematicRig, RigParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian mixture with full covariances.
#[derive(Clone, Debug)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    /// Inverse Cholesky factor `L⁻¹` per component.
    chol_inv: Vec<DMatrix<f64>>,
    /// `ln w_k - ½ (d ln 2π + ln |Σ_k|)`
    log_norm: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidParam("mixture has no components".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::Dimension {
                what: "mixture components",
                expected: k,
                got: means.len().min(covariances.len()),
            });
        }
        let d = means[0].len();
        let means: Vec<DVector<f64>> = means.into_iter().map(DVector::from_vec).collect();
        let mut covs = Vec::with_capacity(k);
        for c in covariances {
            if c.len() != d || c.iter().any(|row| row.len() != d) {
                return Err(Error::Dimension {
                    what: "covariance",
                    expected: d,
                    got: c.len(),
                });
            }
            covs.push(DMatrix::from_fn(d, d, |i, j| c[i][j]));
        }
        Self::from_parts(weights, means, covs)
    }

    fn from_parts(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParam("mixture weights must lie on the simplex".into()));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidParam("mixture means differ in dimension".into()));
        }
        let mut chol_inv = Vec::with_capacity(weights.len());
        let mut log_norm = Vec::with_capacity(weights.len());
        for (k, cov) in covariances.iter().enumerate() {
            if (cov - cov.transpose()).abs().max() > 1e-9 * (1.0 + cov.abs().max()) {
                return Err(Error::InvalidParam(format!("covariance {k} is not symmetric")));
            }
            let chol = cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidParam(format!("covariance {k} is not positive definite")))?;
            let l = chol.l();
            let logdet = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let linv = l
                .solve_lower_triangular(&DMatrix::identity(d, d))
                .ok_or_else(|| Error::InvalidParam(format!("covariance {k} is singular")))?;
            chol_inv.push(linv);
            log_norm.push(weights[k].ln() - 0.5 * (d as f64 * LN_2PI + logdet));
        }
        Ok(Self {
            weights,
            means,
            covariances,
            chol_inv,
            log_norm,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    fn component_logs(&self, x: &DVector<f64>) -> Vec<(f64, DVector<f64>)> {
        (0..self.components())
            .map(|k| {
                let z = &self.chol_inv[k] * (x - &self.means[k]);
                (self.log_norm[k] - 0.5 * z.norm_squared(), z)
            })
            .collect()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::Dimension {
                what: "prior input",
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Negative log-density in nats.
    pub fn nll(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let logs = self.component_logs(&DVector::from_column_slice(x));
        Ok(-log_sum_exp(logs.iter().map(|(l, _)| *l)))
    }

    /// Negative log-density and its gradient.
    pub fn nll_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(x.len())?;
        let logs = self.component_logs(&DVector::from_column_slice(x));
        let lse = log_sum_exp(logs.iter().map(|(l, _)| *l));
        let mut grad = DVector::zeros(self.dim());
        for (k, (l, z)) in logs.iter().enumerate() {
            let gamma = (l - lse).exp();
            if gamma > 0.0 {
                // Σ⁻¹(x - μ) = L⁻ᵀ z
                grad += self.chol_inv[k].tr_mul(z) * gamma;
            }
        }
        Ok((-lse, grad.as_slice().to_vec()))
    }

    /// Generic evaluation: analytic gradient propagated through [`Real::lift`].
    pub fn nll_generic<T: Real>(&self, x: &[T]) -> T {
        let vals: Vec<f64> = x.iter().map(|v| v.value()).collect();
        let (nll, grad) = self
            .nll_and_gradient(&vals)
            .expect("prior dimension checked at problem construction");
        T::lift(nll, x, &grad)
    }

    /// Lower bound of the nll: `-ln Σ_k w_k N_k(μ_k)`. `nll - bound ≥ 0`.
    pub fn nll_lower_bound(&self) -> f64 {
        -log_sum_exp(self.log_norm.iter().copied())
    }

    /// Per-component responsibilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let logs = self.component_logs(&DVector::from_column_slice(x));
        let lse = log_sum_exp(logs.iter().map(|(l, _)| *l));
        Ok(logs.iter().map(|(l, _)| (l - lse).exp()).collect())
    }

    /// Draws a sample from the mixture.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let l = self.covariances[k].clone().cholesky().expect("validated").l();
        (&self.means[k] + l * z).as_slice().to_vec()
    }
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Free function form of [`GmmPrior::nll`].
pub fn gmm_nll(prior: &GmmPrior, x: &[f64]) -> Result<f64> {
    prior.nll(x)
}

#[derive(Clone, Debug)]
pub struct EmConfig {
    pub components: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop when the relative log-likelihood gain falls below this.
    pub tol: f64,
    /// Ridge added to every covariance.
    pub ridge: f64,
    pub kmeans_iters: usize,
}

impl EmConfig {
    pub fn new(components: usize, seed: u64) -> Self {
        Self {
            components,
            seed,
            max_iters: 100,
            tol: 1e-8,
            ridge: 1e-6,
            kmeans_iters: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmReport {
    /// Training log-likelihood before each M-step, then at the final model.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

pub fn fit_gmm(samples: &[Vec<f64>], components: usize, seed: u64) -> Result<GmmPrior> {
    fit_gmm_with(samples, &EmConfig::new(components, seed)).map(|(p, _)| p)
}

/// EM from a k-means++ / Lloyd initialization.
pub fn fit_gmm_with(samples: &[Vec<f64>], cfg: &EmConfig) -> Result<(GmmPrior, EmReport)> {
    let k = cfg.components;
    let n = samples.len();
    if k == 0 {
        return Err(Error::InvalidParam("need at least one component".into()));
    }
    if n < 10 * k {
        return Err(Error::Degenerate(format!(
            "{n} samples for {k} components; need at least {}",
            10 * k
        )));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::Degenerate("samples must share a nonzero dimension".into()));
    }
    if samples.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("samples contain non-finite values".into()));
    }
    let data = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let spread = (0..d)
        .map(|j| {
            let col = data.column(j);
            col.max() - col.min()
        })
        .fold(0.0, f64::max);
    if spread == 0.0 {
        return Err(Error::Degenerate("all samples are identical".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = kmeans(&data, k, cfg.kmeans_iters, &mut rng);

    // Initial parameters from the hard assignment.
    let mut resp = DMatrix::zeros(n, k);
    for (i, &l) in labels.iter().enumerate() {
        resp[(i, l)] = 1.0;
    }
    let global_cov = weighted_covariance(&data, &DVector::from_element(n, 1.0 / n as f64), &column_mean(&data));
    let mut model = m_step(&data, &resp, cfg.ridge, &global_cov, None)?;

    let mut ll_trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let ll = e_step(&model, &data, &mut resp);
        if let Some(&prev) = ll_trace.last() {
            let gain: f64 = ll - prev;
            ll_trace.push(ll);
            if gain.abs() <= cfg.tol * ll.abs().max(1.0) {
                break;
            }
        } else {
            ll_trace.push(ll);
        }
        model = m_step(&data, &resp, cfg.ridge, &global_cov, Some(&model))?;
        iterations += 1;
    }
    let final_ll = e_step(&model, &data, &mut resp);
    ll_trace.push(final_ll);
    Ok((
        model,
        EmReport {
            log_likelihood: ll_trace,
            iterations,
        },
    ))
}

/// Total log-likelihood of `data` under `prior`.
pub fn log_likelihood(prior: &GmmPrior, samples: &[Vec<f64>]) -> Result<f64> {
    samples.iter().map(|s| prior.nll(s).map(|v| -v)).sum()
}

fn column_mean(data: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(data.ncols(), |j, _| data.column(j).mean())
}

fn weighted_covariance(data: &DMatrix<f64>, w: &DVector<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut centered = data.clone();
    for (i, mut row) in centered.row_iter_mut().enumerate() {
        row -= mean.transpose();
        row *= w[i].sqrt();
    }
    let cov = centered.tr_mul(&centered);
    (&cov + cov.transpose()) * 0.5
}

/// Returns the total log-likelihood and fills `resp` with responsibilities.
fn e_step(model: &GmmPrior, data: &DMatrix<f64>, resp: &mut DMatrix<f64>) -> f64 {
    let (n, k) = (data.nrows(), model.components());
    let mut logs = DMatrix::zeros(n, k);
    for c in 0..k {
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= model.means[c].transpose();
        }
        // rows of Z = (x - μ)ᵀ L⁻ᵀ
        let z = centered * model.chol_inv[c].transpose();
        for i in 0..n {
            logs[(i, c)] = model.log_norm[c] - 0.5 * z.row(i).norm_squared();
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = logs.row(i);
        let lse = log_sum_exp(row.iter().copied());
        total += lse;
        for c in 0..k {
            resp[(i, c)] = (row[c] - lse).exp();
        }
    }
    total
}

fn m_step(
    data: &DMatrix<f64>,
    resp: &DMatrix<f64>,
    ridge: f64,
    fallback_cov: &DMatrix<f64>,
    previous: Option<&GmmPrior>,
) -> Result<GmmPrior> {
    let (n, d) = (data.nrows(), data.ncols());
    let k = resp.ncols();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        let r = resp.column(c);
        let nk: f64 = r.sum();
        weights.push(nk / n as f64);
        if nk < 1e-10 {
            // Empty component: keep its previous shape, weight goes to ~0.
            match previous {
                Some(p) => {
                    means.push(p.means[c].clone());
                    covs.push(p.covariances[c].clone());
                }
                None => {
                    means.push(column_mean(data));
                    covs.push(fallback_cov + DMatrix::identity(d, d) * ridge);
                }
            }
            continue;
        }
        let mean = data.tr_mul(&r) / nk;
        let w = DVector::from_fn(n, |i, _| r[i] / nk);
        let cov = weighted_covariance(data, &w, &mean) + DMatrix::identity(d, d) * ridge;
        means.push(mean);
        covs.push(cov);
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    // Renormalisation can leave the sum a few ulps away from one.
    let drift = 1.0 - weights.iter().sum::<f64>();
    if let Some(w) = weights.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *w += drift;
    }
    GmmPrior::from_parts(weights, means, covs)
}

fn kmeans<R: Rng>(data: &DMatrix<f64>, k: usize, iters: usize, rng: &mut R) -> Vec<usize> {
    let n = data.nrows();
    let row = |i: usize| data.row(i).transpose();
    // k-means++ seeding
    let mut centers: Vec<DVector<f64>> = vec![row(rng.random_range(0..n))];
    let mut dist2: Vec<f64> = (0..n).map(|i| (row(i) - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = row(next);
        for (i, d) in dist2.iter_mut().enumerate() {
            *d = d.min((row(i) - &c).norm_squared());
        }
        centers.push(c);
    }
    let mut labels = vec![0usize; n];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let x = row(i);
            let best = (0..k)
                .min_by(|&a, &b| {
                    (&x - &centers[a])
                        .norm_squared()
                        .total_cmp(&(&x - &centers[b]).norm_squared())
                })
                .unwrap();
            if best != *label {
                *label = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if !members.is_empty() {
                let mut acc = DVector::zeros(data.ncols());
                for &i in &members {
                    acc += row(i);
                }
                *center = acc / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Signed excess of `theta` outside `[lo, hi]`; its square is the hinge².
#[inline]
pub fn limit_excess<T: Real>(theta: T, lo: f64, hi: f64) -> T {
    let v = theta.value();
    if v > hi {
        theta - hi
    } else if v < lo {
        theta - lo
    } else {
        T::zero()
    }
}

/// `Σ max(0, θ - hi)² + max(0, lo - θ)²` over every joint axis.
pub fn joint_limit_penalty(rig: &KinematicRig, params: &RigParams) -> f64 {
    params
        .pose
        .iter()
        .zip(rig.joint_limits())
        .flat_map(|(p, lim)| (0..3).map(move |a| limit_excess(p[a], lim[a][0], lim[a][1]).powi(2)))
        .sum()
}
