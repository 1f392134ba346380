//! Fréchet distance between Gaussian fits of two feature sets, with pluggable
//! feature extractors.

use std::path::PathBuf;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Padding, Tape, Tensor};

/// Relative tolerance for the symmetry precondition of [`sqrtm_psd`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Values below this are treated as a numerically negative distance.
const NEGATIVE_FID_TOL: f64 = -1e-6;

/// `m×d` activations, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Tensor,
}

impl FeatureMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return shape_err("features", format!("expected [m, d], got {:?}", values.shape()));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dims();
        &self.values.data()[i * d..(i + 1) * d]
    }
}

fn flatten(images: &Tensor) -> Result<Tensor> {
    if images.rank() < 2 {
        return shape_err("features", format!("expected a batch of images, got {:?}", images.shape()));
    }
    let m = images.shape()[0];
    images.clone().reshape(&[m, images.len() / m])
}

/// Principal axes of flattened reference images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `d` orthonormal rows of length `input_dim`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(reference: &Tensor, d: usize) -> Result<Self> {
        let x = flatten(reference)?;
        let (m, p) = (x.shape()[0], x.shape()[1]);
        if d == 0 || d > p {
            return invalid(format!("pca dimension {d} must lie in 1..={p}"));
        }
        if m < 2 {
            return invalid("pca needs at least two reference images");
        }
        let mean: Vec<f64> = (0..p).map(|j| (0..m).map(|i| x.data()[i * p + j]).sum::<f64>() / m as f64).collect();
        let centered = DMatrix::from_fn(m, p, |i, j| x.data()[i * p + j] - mean[j]);
        let scale = 1.0 / (m - 1) as f64;
        let (vals, vecs) = if p <= m {
            let eig = SymmetricEigen::new(centered.transpose() * &centered * scale);
            (eig.eigenvalues, eig.eigenvectors)
        } else {
            // Dual form: eigenvectors of the m×m Gram matrix mapped back to pixel space.
            let eig = SymmetricEigen::new(&centered * centered.transpose() * scale);
            let mut v = centered.transpose() * &eig.eigenvectors;
            let cutoff = 1e-10 * eig.eigenvalues.max().max(0.0);
            for (mut col, &l) in v.column_iter_mut().zip(eig.eigenvalues.iter()) {
                let n = col.norm();
                if l > cutoff && n > 0.0 {
                    col /= n;
                } else {
                    col.fill(0.0);
                }
            }
            (eig.eigenvalues, v)
        };
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let mut components: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut explained = Vec::with_capacity(d);
        for &i in &order {
            if components.len() == d {
                break;
            }
            let c: Vec<f64> = vecs.column(i).iter().copied().collect();
            if c.iter().all(|v| *v == 0.0) {
                continue;
            }
            components.push(c);
            explained.push(vals[i].max(0.0));
        }
        complete_basis(&mut components, &mut explained, d, p);
        Ok(Self { mean, components, explained_variance: explained })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, images: &Tensor) -> Result<Tensor> {
        let x = flatten(images)?;
        let (m, p) = (x.shape()[0], x.shape()[1]);
        if p != self.input_dim() {
            return shape_err("pca", format!("fitted on {} values per image, got {p}", self.input_dim()));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(m * d);
        for row in x.data().chunks(p) {
            for c in &self.components {
                out.push(row.iter().zip(&self.mean).zip(c).map(|((v, mu), w)| (v - mu) * w).sum());
            }
        }
        Tensor::new(vec![m, d], out)
    }
}

/// Gram-Schmidt against coordinate axes when the data spans fewer than `d` directions.
fn complete_basis(components: &mut Vec<Vec<f64>>, explained: &mut Vec<f64>, d: usize, p: usize) {
    let mut axis = 0;
    while components.len() < d && axis < p {
        let mut v = vec![0.0; p];
        v[axis] = 1.0;
        axis += 1;
        for _ in 0..2 {
            for c in components.iter() {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            components.push(v.into_iter().map(|a| a / n).collect());
            explained.push(0.0);
        }
    }
}

/// A frozen random two-layer convolutional network followed by global pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomConv {
    dim: usize,
    first: Tensor,
    second: Tensor,
}

const RANDOM_CONV_HIDDEN: usize = 16;

impl RandomConv {
    pub fn new(channels: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || channels == 0 {
            return invalid("random_conv needs positive channels and dimension");
        }
        let mut rng = rng_for(seed, "random-conv");
        let mut draw = |shape: &[usize], fan_in: usize| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| n.sample(&mut rng))
        };
        let first = draw(&[3, 3, channels, RANDOM_CONV_HIDDEN], 9 * channels);
        let second = draw(&[3, 3, RANDOM_CONV_HIDDEN, dim], 9 * RANDOM_CONV_HIDDEN);
        Ok(Self { dim, first, second })
    }

    pub fn transform(&self, images: &Tensor) -> Result<Tensor> {
        let (m, ..) = images.nhwc()?;
        let mut parts = Vec::new();
        for start in (0..m).step_by(128) {
            let end = (start + 128).min(m);
            let mut tape = Tape::new();
            let x = tape.constant(crate::vae::slice_rows(images, start, end)?);
            let k1 = tape.constant(self.first.clone());
            let k2 = tape.constant(self.second.clone());
            let h = tape.conv2d(x, k1, 1, Padding::Same)?;
            let h = tape.relu(h)?;
            let h = tape.conv2d(h, k2, 2, Padding::Same)?;
            let h = tape.relu(h)?;
            let f = tape.global_avg_pool(h)?;
            parts.push(tape.value(f).clone());
        }
        let out = Tensor::stack(&parts)?;
        out.reshape(&[m, self.dim])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    Identity,
    Pca(Pca),
    RandomConv(RandomConv),
    /// Precomputed activations in the matrix file format; images are ignored.
    FromFile { path: PathBuf, dim: Option<usize> },
}

impl Extractor {
    pub fn extract(&self, images: &Tensor) -> Result<FeatureMatrix> {
        let values = match self {
            Extractor::Identity => flatten(images)?,
            Extractor::Pca(p) => p.transform(images)?,
            Extractor::RandomConv(r) => r.transform(images)?,
            Extractor::FromFile { path, dim } => {
                let t = crate::data::load_matrix(path)?;
                if let Some(d) = dim {
                    if t.shape()[1] != *d {
                        return shape_err(
                            "features",
                            format!("{} holds {}-dimensional features, expected {d}", path.display(), t.shape()[1]),
                        );
                    }
                }
                t
            }
        };
        FeatureMatrix::new(values)
    }
}

pub fn extract_features(images: &Tensor, extractor: &Extractor) -> Result<FeatureMatrix> {
    extractor.extract(images)
}

/// Textual extractor choice: `identity`, `pca:D`, `random_conv:D`, `file:PATH`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExtractorSpec {
    Identity,
    Pca(usize),
    RandomConv(usize),
    File(PathBuf),
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Pca(64)
    }
}

impl ExtractorSpec {
    /// Instantiates the extractor; PCA is fitted on `reference`.
    pub fn build(&self, reference: &Tensor, seed: u64) -> Result<Extractor> {
        Ok(match self {
            ExtractorSpec::Identity => Extractor::Identity,
            ExtractorSpec::Pca(d) => Extractor::Pca(Pca::fit(reference, *d)?),
            ExtractorSpec::RandomConv(d) => {
                let (_, _, _, c) = reference.nhwc()?;
                Extractor::RandomConv(RandomConv::new(c, *d, seed)?)
            }
            ExtractorSpec::File(p) => Extractor::FromFile { path: p.clone(), dim: None },
        })
    }
}

impl FromStr for ExtractorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let dim = || -> Result<usize> {
            arg.parse::<usize>()
                .ok()
                .filter(|d| *d > 0)
                .ok_or_else(|| Error::Config(format!("extractor `{s}` needs a positive dimension")))
        };
        match kind {
            "identity" => Ok(ExtractorSpec::Identity),
            "pca" => Ok(ExtractorSpec::Pca(dim()?)),
            "random_conv" => Ok(ExtractorSpec::RandomConv(dim()?)),
            "file" if !arg.is_empty() => Ok(ExtractorSpec::File(arg.into())),
            _ => Err(Error::Config(format!("unknown extractor `{s}`"))),
        }
    }
}

impl TryFrom<String> for ExtractorSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ExtractorSpec> for String {
    fn from(e: ExtractorSpec) -> String {
        e.to_string()
    }
}

impl std::fmt::Display for ExtractorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtractorSpec::Identity => write!(f, "identity"),
            ExtractorSpec::Pca(d) => write!(f, "pca:{d}"),
            ExtractorSpec::RandomConv(d) => write!(f, "random_conv:{d}"),
            ExtractorSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Empirical mean and unbiased covariance. When there are fewer than `d + 1`
/// rows the covariance is shrunk by `1e-6·trace/d` on the diagonal.
pub fn gaussian_stats(f: &FeatureMatrix) -> Result<GaussianStats> {
    let (m, d) = (f.rows(), f.dims());
    if m < 2 {
        return invalid(format!("covariance needs at least 2 rows, got {m}"));
    }
    let x = DMatrix::from_row_slice(m, d, f.tensor().data());
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / m as f64);
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = centered.transpose() * &centered / (m - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    if m < d + 1 {
        let lambda = 1e-6 * cov.trace() / d as f64;
        warn!("{m} samples for {d} feature dimensions; shrinking covariance by {lambda:e}");
        for i in 0..d {
            cov[(i, i)] += lambda;
        }
    }
    Ok(GaussianStats { mu, cov })
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// negative eigenvalues are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return shape_err("sqrtm", format!("matrix is {:?}", m.shape()));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return invalid(format!("sqrtm input is not symmetric (max deviation {asym:e})"));
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
    pub c1: Vec<Vec<f64>>,
    pub c2: Vec<Vec<f64>>,
    pub mean_term: f64,
    pub trace_term: f64,
    pub fid: f64,
}

/// `‖μ₁−μ₂‖² + Tr(C₁ + C₂ − 2·sqrt(S₁C₂S₁))` with `S₁ = sqrt(C₁)`.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<FidReport> {
    if s1.dim() != s2.dim() || s1.cov.shape() != s2.cov.shape() || s1.cov.nrows() != s1.dim() {
        return shape_err("frechet_distance", format!("dimensions {} and {}", s1.dim(), s2.dim()));
    }
    let finite = |s: &GaussianStats| s.mu.iter().chain(s.cov.iter()).all(|v| v.is_finite());
    if !finite(s1) || !finite(s2) {
        return Err(Error::NonFinite("frechet_distance stats"));
    }
    let mean_term = (&s1.mu - &s2.mu).norm_squared();
    let root1 = sqrtm_psd(&s1.cov)?;
    let inner = &root1 * &s2.cov * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_psd(&inner)?.trace();
    let trace_term = s1.cov.trace() + s2.cov.trace() - 2.0 * cross;
    let mut fid = mean_term + trace_term;
    if fid < NEGATIVE_FID_TOL {
        warn!("Fréchet distance {fid:e} is negative beyond tolerance; clamping to 0");
        fid = 0.0;
    }
    Ok(FidReport {
        mu1: s1.mu.iter().copied().collect(),
        mu2: s2.mu.iter().copied().collect(),
        c1: to_rows(&s1.cov),
        c2: to_rows(&s2.cov),
        mean_term,
        trace_term,
        fid,
    })
}

pub fn fid_from_features(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<FidReport> {
    if a.dims() != b.dims() {
        return shape_err("fid", format!("feature dimensions {} and {}", a.dims(), b.dims()));
    }
    frechet_distance(&gaussian_stats(a)?, &gaussian_stats(b)?)
}

pub fn fid_between_sets(a: &Tensor, b: &Tensor, extractor: &Extractor) -> Result<FidReport> {
    fid_from_features(&extractor.extract(a)?, &extractor.extract(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_have_unbiased_variance_two() {
        let f = FeatureMatrix::new(Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap()).unwrap();
        let s = gaussian_stats(&f).unwrap();
        assert_eq!(s.mu[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
    }

    #[test]
    fn diagonal_roots() {
        let s = sqrtm_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12 && (s[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in ["identity", "pca:64", "random_conv:32", "file:feats.mat"] {
            assert_eq!(s.parse::<ExtractorSpec>().unwrap().to_string(), s);
        }
        assert!("pca:0".parse::<ExtractorSpec>().is_err());
    }
}
