//! Ex-post latent density estimation with Gaussian mixtures, and detection of
//! collapsed latent units.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Smallest eigenvalue any fitted covariance may have.
pub const EIGEN_FLOOR: f64 = 1e-6;

/// Default per-unit KL (nats) below which a unit counts as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub kind: CovarianceKind,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `k×k` per component; off-diagonals are zero in diagonal mode.
    pub covariances: Vec<Vec<f64>>,
    /// Mean per-point log-likelihood after each E-step; the last entry scores
    /// the returned parameters.
    #[serde(default)]
    pub log_likelihood_trace: Vec<f64>,
    #[serde(default)]
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub n_components: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub kind: CovarianceKind,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            n_components: 10,
            max_iters: 200,
            tol: 1e-6,
            kind: CovarianceKind::Full,
            seed: 0,
        }
    }
}

/// Cached Cholesky factor and log-normalizer of one component.
struct Density {
    log_weight: f64,
    mean: Vec<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Density {
    fn new(weight: f64, mean: &[f64], cov: &[f64]) -> Result<Self> {
        let k = mean.len();
        let chol = cholesky(cov, k)?;
        let log_det: f64 = (0..k).map(|i| chol[(i, i)].ln()).sum::<f64>() * 2.0;
        Ok(Self {
            log_weight: weight.ln(),
            mean: mean.to_vec(),
            chol,
            log_norm: -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let k = self.mean.len();
        let mut y = vec![0.0; k];
        let mut maha = 0.0;
        for i in 0..k {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * y[j];
            }
            y[i] = s / self.chol[(i, i)];
            maha += y[i] * y[i];
        }
        self.log_norm - 0.5 * maha
    }
}

fn cholesky(cov: &[f64], k: usize) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(DMatrix::from_row_slice(k, k, cov))
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetrizes and clamps eigenvalues to at least `floor`.
fn floor_eigenvalues(cov: &[f64], k: usize, floor: f64) -> Vec<f64> {
    let m = DMatrix::from_row_slice(k, k, cov);
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        let sym = eig.recompose();
        return row_major(&sym);
    }
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let r = v * DMatrix::from_diagonal(&vals) * v.transpose();
    let r = (&r + r.transpose()) * 0.5;
    row_major(&r)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect()
}

fn rows_of(latents: &Tensor) -> Result<(usize, usize, Vec<&[f64]>)> {
    if latents.rank() != 2 {
        return shape_err("gmm", format!("latents must be [m, k], got {:?}", latents.shape()));
    }
    let (m, k) = (latents.shape()[0], latents.shape()[1]);
    if !latents.is_finite() {
        return Err(Error::NonFinite("gmm input"));
    }
    Ok((m, k, latents.data().chunks(k).collect()))
}

impl GaussianMixture {
    /// Validated constructor; covariances are floored.
    pub fn from_parts(
        kind: CovarianceKind,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = weights.len();
        if n == 0 || means.len() != n || covariances.len() != n {
            return invalid("mixture needs matching, non-empty weights, means and covariances");
        }
        let k = means[0].len();
        if k == 0 || means.iter().any(|m| m.len() != k) || covariances.iter().any(|c| c.len() != k * k) {
            return shape_err("gmm", format!("components must share dimension {k}"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return invalid(format!("weights must be a probability vector, sum {total}"));
        }
        let covariances = covariances
            .iter()
            .map(|c| floor_eigenvalues(c, k, EIGEN_FLOOR))
            .collect();
        Ok(Self {
            kind,
            weights,
            means,
            covariances,
            log_likelihood_trace: Vec::new(),
            converged: false,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn densities(&self) -> Result<Vec<Density>> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((w, m), c)| Density::new(*w, m, c))
            .collect()
    }

    /// Per-point log density.
    pub fn score_samples(&self, latents: &Tensor) -> Result<Vec<f64>> {
        let (_, k, rows) = rows_of(latents)?;
        if k != self.dim() {
            return shape_err("gmm", format!("mixture dimension {}, data dimension {k}", self.dim()));
        }
        let dens = self.densities()?;
        Ok(rows
            .par_iter()
            .map(|x| {
                let terms: Vec<f64> = dens.iter().map(|d| d.log_weight + d.log_pdf(x)).collect();
                log_sum_exp(&terms)
            })
            .collect())
    }

    /// Mean per-point log-likelihood.
    pub fn log_likelihood(&self, latents: &Tensor) -> Result<f64> {
        let s = self.score_samples(latents)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }
}

fn kmeans_pp(rows: &[&[f64]], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, "gmm-init");
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers = vec![rows[rng.random_range(0..rows.len())].to_vec()];
    let mut d: Vec<f64> = rows.iter().map(|r| dist2(r, &centers[0])).collect();
    while centers.len() < n {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = rows.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    idx = i;
                    break;
                }
                u -= di;
            }
            idx
        } else {
            rng.random_range(0..rows.len())
        };
        let c = rows[pick].to_vec();
        for (di, r) in d.iter_mut().zip(rows) {
            *di = di.min(dist2(r, &c));
        }
        centers.push(c);
    }
    centers
}

/// Weighted means and covariances from responsibilities `resp[i][j]`.
/// Also returns the components with fewer than two responsible points.
fn m_step(
    rows: &[&[f64]],
    resp: &[Vec<f64>],
    n: usize,
    kind: CovarianceKind,
    prev: Option<&GaussianMixture>,
) -> Result<(GaussianMixture, Vec<usize>)> {
    let (m, k) = (rows.len(), rows[0].len());
    let mut weights = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);
    let mut covs = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for j in 0..n {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        if nk < 2.0 {
            degenerate.push(j);
        }
        let mean: Vec<f64> = if nk > 1e-12 {
            let mut s = vec![0.0; k];
            for (x, r) in rows.iter().zip(resp) {
                for (si, xi) in s.iter_mut().zip(*x) {
                    *si += r[j] * xi;
                }
            }
            s.iter().map(|v| v / nk).collect()
        } else {
            prev.map_or_else(|| rows[j % m].to_vec(), |p| p.means[j].clone())
        };
        let mut cov = vec![0.0; k * k];
        if nk > 1e-12 {
            for (x, r) in rows.iter().zip(resp) {
                let w = r[j];
                if w == 0.0 {
                    continue;
                }
                for a in 0..k {
                    let da = x[a] - mean[a];
                    match kind {
                        CovarianceKind::Full => {
                            for b in a..k {
                                cov[a * k + b] += w * da * (x[b] - mean[b]);
                            }
                        }
                        CovarianceKind::Diagonal => cov[a * k + a] += w * da * da,
                    }
                }
            }
            for a in 0..k {
                for b in a..k {
                    cov[a * k + b] /= nk;
                    cov[b * k + a] = cov[a * k + b];
                }
            }
        }
        weights.push(nk / m as f64);
        means.push(mean);
        covs.push(floor_eigenvalues(&cov, k, EIGEN_FLOOR));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let gmm = GaussianMixture {
        kind,
        weights,
        means,
        covariances: covs,
        log_likelihood_trace: Vec::new(),
        converged: false,
    };
    Ok((gmm, degenerate))
}

/// Responsibilities and mean log-likelihood.
fn e_step(gmm: &GaussianMixture, rows: &[&[f64]]) -> Result<(Vec<Vec<f64>>, f64)> {
    let dens = gmm.densities()?;
    let out: Vec<(Vec<f64>, f64)> = rows
        .par_iter()
        .map(|x| {
            let terms: Vec<f64> = dens.iter().map(|d| d.log_weight + d.log_pdf(x)).collect();
            let lse = log_sum_exp(&terms);
            (terms.iter().map(|t| (t - lse).exp()).collect(), lse)
        })
        .collect();
    let ll = out.iter().map(|(_, l)| l).sum::<f64>() / rows.len() as f64;
    if !ll.is_finite() {
        return Err(Error::NonFinite("gmm log-likelihood"));
    }
    Ok((out.into_iter().map(|(r, _)| r).collect(), ll))
}

/// EM fit with k-means++ initialization.
pub fn fit_gmm(latents: &Tensor, cfg: &GmmConfig) -> Result<GaussianMixture> {
    let (m, k, rows) = rows_of(latents)?;
    let n = cfg.n_components;
    if n == 0 || k == 0 {
        return invalid("n_components and latent dimension must be positive");
    }
    if m < n {
        return invalid(format!("{m} samples cannot support {n} mixture components"));
    }
    let centers = kmeans_pp(&rows, n, cfg.seed);
    let resp: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| {
            let best = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .fold((0, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc })
                .0;
            (0..n).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    let (mut gmm, mut degenerate) = m_step(&rows, &resp, n, cfg.kind, None)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters.max(1) {
        let (resp, ll) = e_step(&gmm, &rows)?;
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-9 * prev.abs().max(1.0) {
                warn!("EM log-likelihood decreased from {prev} to {ll}");
            }
            if (ll - prev).abs() < cfg.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        let (next, deg) = m_step(&rows, &resp, n, cfg.kind, Some(&gmm))?;
        gmm = next;
        degenerate.extend(deg);
    }
    degenerate.sort_unstable();
    degenerate.dedup();
    if !degenerate.is_empty() {
        warn!("mixture components {degenerate:?} had fewer than 2 responsible points; covariances floored");
    }
    if !converged {
        let (_, ll) = e_step(&gmm, &rows)?;
        trace.push(ll);
    }
    gmm.log_likelihood_trace = trace;
    gmm.converged = converged;
    Ok(gmm)
}

/// `count×k` draws: a component by weight, then `mean + L·ε`.
pub fn sample_gmm(gmm: &GaussianMixture, count: usize, seed: u64) -> Result<Tensor> {
    let k = gmm.dim();
    if count == 0 || k == 0 {
        return invalid("sample count and mixture dimension must be positive");
    }
    let chols = gmm
        .covariances
        .iter()
        .map(|c| cholesky(c, k))
        .collect::<Result<Vec<_>>>()?;
    let pick = WeightedIndex::new(&gmm.weights).map_err(|e| Error::InvalidArgument(format!("mixture weights: {e}")))?;
    let mut rng = rng_for(seed, "gmm-sample");
    let mut data = Vec::with_capacity(count * k);
    for _ in 0..count {
        let j = pick.sample(&mut rng);
        let eps = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(&mut rng)));
        let z = &chols[j] * eps;
        data.extend(gmm.means[j].iter().zip(z.iter()).map(|(m, d)| m + d));
    }
    Tensor::new(vec![count, k], data)
}

/// Encoder means over a dataset, plus the dataset-averaged per-unit KL.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub codes: Tensor,
    pub per_unit_kl: Vec<f64>,
}

impl LatentBatch {
    pub fn from_posteriors(mu: &Tensor, logvar: &Tensor) -> Result<Self> {
        let per_unit_kl = crate::loss::mean_kl_per_unit(mu, logvar)?;
        Ok(Self { codes: mu.clone(), per_unit_kl })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveUnits {
    pub count: usize,
    /// `true` where the unit is collapsed.
    pub collapsed: Vec<bool>,
}

pub fn active_units(per_unit_kl: &[f64], threshold: f64) -> Result<ActiveUnits> {
    if !(threshold > 0.0) {
        return invalid(format!("collapse threshold must be positive, got {threshold}"));
    }
    if per_unit_kl.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("per-unit kl"));
    }
    let collapsed: Vec<bool> = per_unit_kl.iter().map(|&v| v < threshold).collect();
    Ok(ActiveUnits {
        count: collapsed.iter().filter(|c| !**c).count(),
        collapsed,
    })
}
