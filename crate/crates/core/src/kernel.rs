//! Kernel similarity functions on the feature space and the PCA reduction.
//!
//! The Laplacian kernel is `exp(-||u - v||_1 / (d * gamma))` and the Gaussian
//! kernel `exp(-||u - v||_2^2 / (d * gamma^2))`, both with the feature
//! dimension `d` in the exponent normalizer. The group-indicator kernel is 1
//! for two samples of the same group and 0 otherwise; it is evaluated on
//! group labels, not on feature vectors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{CalibError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Laplacian,
    Gaussian,
    GroupIndicator,
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelFamily::Laplacian => write!(f, "laplacian"),
            KernelFamily::Gaussian => write!(f, "gaussian"),
            KernelFamily::GroupIndicator => write!(f, "group"),
        }
    }
}

/// Kernel family, bandwidth, and the feature dimension used by the exponent
/// normalizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub gamma: f64,
    /// Feature dimension `d`; unused by the group-indicator kernel.
    pub dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, gamma: f64, dim: usize) -> Result<Self> {
        if family != KernelFamily::GroupIndicator {
            if !(gamma > 0.0) {
                return Err(CalibError::Argument(format!(
                    "kernel bandwidth must be > 0, got {gamma}"
                )));
            }
            if dim == 0 {
                return Err(CalibError::Argument(
                    "feature-space kernels need dimension >= 1".into(),
                ));
            }
        }
        Ok(Self { family, gamma, dim })
    }

    /// Group-indicator kernel; `gamma` and `dim` are irrelevant.
    pub fn group_indicator() -> Self {
        Self {
            family: KernelFamily::GroupIndicator,
            gamma: 1.0,
            dim: 0,
        }
    }

    /// Log of the kernel value for two feature vectors. Only defined for the
    /// Laplacian and Gaussian families.
    pub fn log_weight(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != self.dim || v.len() != self.dim {
            return Err(CalibError::Argument(format!(
                "feature length {} / {} does not match kernel dimension {}",
                u.len(),
                v.len(),
                self.dim
            )));
        }
        let d = self.dim as f64;
        match self.family {
            KernelFamily::Laplacian => {
                let l1: f64 = u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum();
                Ok(-l1 / (d * self.gamma))
            }
            KernelFamily::Gaussian => {
                let l2sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(-l2sq / (d * self.gamma * self.gamma))
            }
            KernelFamily::GroupIndicator => Err(CalibError::Capability(
                "group-indicator kernel is evaluated on group labels, not features".into(),
            )),
        }
    }

    /// Kernel value for two feature vectors (Laplacian/Gaussian).
    pub fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        Ok(self.log_weight(u, v)?.exp())
    }

    /// Group-indicator kernel value: 1 when both labels are present and equal.
    pub fn eval_groups(&self, a: Option<&str>, b: Option<&str>) -> f64 {
        match (a, b) {
            (Some(a), Some(b)) if a == b => 1.0,
            _ => 0.0,
        }
    }
}

/// A fitted PCA projection: centered data projected onto the top-k principal
/// directions, ordered by decreasing eigenvalue, with each component's
/// largest-magnitude entry made positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    mean: Vec<f64>,
    /// Row-major `k x d` matrix of principal directions.
    components: Vec<Vec<f64>>,
    k: usize,
}

impl PcaTransform {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn output_dim(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Projects one feature row.
    pub fn project_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(CalibError::Argument(format!(
                "feature length {} does not match PCA input dimension {}",
                row.len(),
                self.mean.len()
            )));
        }
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Fits PCA on `features` via eigendecomposition of the sample covariance.
pub fn fit_pca(features: &FeatureMatrix, k: usize) -> Result<PcaTransform> {
    let n = features.n();
    let d = features.d();
    if n < 2 {
        return Err(CalibError::Argument(
            "PCA needs at least two samples".into(),
        ));
    }
    if k == 0 || k > n.min(d) {
        return Err(CalibError::Argument(format!(
            "PCA target dimension {k} outside 1..=min(n={n}, d={d})"
        )));
    }

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Sample covariance, symmetric by construction.
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let row = features.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                let v = da * (row[b] - mean[b]);
                cov[(a, b)] += v;
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let col = eigen.eigenvectors.column(idx);
        let mut component: Vec<f64> = col.iter().copied().collect();
        // Deterministic sign: the largest-magnitude entry (first on ties) is positive.
        let mut pivot = 0;
        for (j, v) in component.iter().enumerate() {
            if v.abs() > component[pivot].abs() {
                pivot = j;
            }
        }
        if component[pivot] < 0.0 {
            for v in &mut component {
                *v = -*v;
            }
        }
        components.push(component);
    }

    Ok(PcaTransform {
        mean,
        components,
        k,
    })
}

/// Projects a whole feature matrix.
pub fn apply_pca(t: &PcaTransform, features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features.d() != t.input_dim() {
        return Err(CalibError::Argument(format!(
            "feature dimension {} does not match PCA input dimension {}",
            features.d(),
            t.input_dim()
        )));
    }
    let n = features.n();
    let mut values = Vec::with_capacity(n * t.output_dim());
    for i in 0..n {
        values.extend(t.project_row(features.row(i))?);
    }
    FeatureMatrix::new(n, t.output_dim(), values)
}
