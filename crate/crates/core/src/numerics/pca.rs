//! Principal component analysis over row-sample feature matrices.

use nalgebra::{DMatrix, SymmetricEigen};

use super::Tensor;
use crate::error::{Error, Result};

/// Below this total variance every row is treated as identical.
pub const MIN_TOTAL_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct PcaResult {
    /// `N×K` projections of the centered rows onto the leading directions.
    pub projections: Tensor,
    /// Explained-variance ratio of each retained direction, non-increasing.
    pub variance_ratios: Vec<f64>,
    /// Column means of the input, length `D`.
    pub mean_vector: Tensor,
    /// `D×K` orthonormal principal directions (columns).
    pub components: Tensor,
}

impl PcaResult {
    pub fn k(&self) -> usize {
        self.variance_ratios.len()
    }

    /// Projection column `j` as a length-`N` vector.
    pub fn component_scores(&self, j: usize) -> Vec<f64> {
        let (n, k) = (self.projections.shape()[0], self.projections.shape()[1]);
        (0..n).map(|i| self.projections.data()[i * k + j]).collect()
    }
}

/// Project `features` (`N×D`) onto its `k` leading principal directions.
///
/// Directions come from the eigendecomposition of the `D×D` covariance. Each
/// direction's sign is fixed so that its largest-magnitude loading is
/// positive, which makes the projections independent of the eigensolver's
/// arbitrary sign choice.
pub fn pca_top_k(features: &Tensor, k: usize) -> Result<PcaResult> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "pca expects an N×D matrix, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 || d < 1 {
        return Err(Error::InvalidArgument(format!(
            "pca needs N ≥ 2 and D ≥ 1, got N={n}, D={d}"
        )));
    }
    if k < 1 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!("k={k} must lie in 1..={}", n.min(d))));
    }

    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered: Vec<f64> = x
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in centered.chunks_exact(d) {
        for a in 0..d {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in a..d {
                cov[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let trace = cov.trace();
    if !(trace >= MIN_TOTAL_VARIANCE) {
        return Err(Error::DegenerateFeatures(trace));
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut components = vec![0.0; d * k];
    let mut variance_ratios = Vec::with_capacity(k);
    for (j, &col) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(col);
        let pivot = (0..d)
            .max_by(|&a, &b| {
                v[a].abs()
                    .partial_cmp(&v[b].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for a in 0..d {
            components[a * k + j] = sign * v[a];
        }
        variance_ratios.push((eig.eigenvalues[col] / trace).clamp(0.0, 1.0));
    }
    // Eigenvalue noise can make adjacent ratios tie out of order by an ulp.
    for j in 1..k {
        if variance_ratios[j] > variance_ratios[j - 1] {
            variance_ratios[j] = variance_ratios[j - 1];
        }
    }

    let mut projections = vec![0.0; n * k];
    for (i, row) in centered.chunks_exact(d).enumerate() {
        for j in 0..k {
            projections[i * k + j] = (0..d).map(|a| row[a] * components[a * k + j]).sum();
        }
    }

    Ok(PcaResult {
        projections: Tensor::new(vec![n, k], projections)?,
        variance_ratios,
        mean_vector: Tensor::new(vec![d], mean)?,
        components: Tensor::new(vec![d, k], components)?,
    })
}
