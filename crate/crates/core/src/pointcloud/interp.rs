use ndarray::{Array2, ArrayView2};

use super::{check_finite, knn_indices, Point3};
use crate::{Error, Result};

/// Normalized inverse-distance weights from each destination point to its
/// nearest sources.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpWeights {
    pub n_src: usize,
    /// Per destination: `(source index, weight)` with weights summing to one.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl InterpWeights {
    /// Dense `n_dst x n_src` matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows.len(), self.n_src));
        for (d, row) in self.rows.iter().enumerate() {
            for &(s, w) in row {
                m[[d, s]] += w;
            }
        }
        m
    }
}

pub fn interpolation_weights(src: &[Point3], dst: &[Point3], k_interp: usize, eps: f64) -> Result<InterpWeights> {
    if src.is_empty() {
        return Err(Error::param("feature propagation needs at least one source point"));
    }
    if k_interp == 0 {
        return Err(Error::param("k_interp must be >= 1"));
    }
    if !(eps > 0.0) {
        return Err(Error::param(format!("eps must be positive, got {eps}")));
    }
    check_finite(src, "propagation sources")?;
    check_finite(dst, "propagation targets")?;
    let rows = knn_indices(src, dst, k_interp)
        .into_iter()
        .map(|nn| {
            let raw: Vec<(usize, f64)> = nn.into_iter().map(|(i, d)| (i, 1.0 / (d + eps))).collect();
            let total: f64 = raw.iter().map(|r| r.1).sum();
            raw.into_iter().map(|(i, w)| (i, w / total)).collect()
        })
        .collect();
    Ok(InterpWeights { n_src: src.len(), rows })
}

/// Inverse-distance weighted interpolation of source features onto `dst`,
/// `w_i = 1 / (d_i + eps)` over the `k_interp` nearest sources.
pub fn propagate_features(
    src_coords: &[Point3],
    src_features: ArrayView2<f64>,
    dst_coords: &[Point3],
    k_interp: usize,
    eps: f64,
) -> Result<Array2<f64>> {
    if src_features.nrows() != src_coords.len() {
        return Err(Error::param(format!(
            "{} feature rows for {} source points",
            src_features.nrows(),
            src_coords.len()
        )));
    }
    if src_features.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite source features"));
    }
    let w = interpolation_weights(src_coords, dst_coords, k_interp, eps)?;
    let mut out = Array2::zeros((dst_coords.len(), src_features.ncols()));
    for (d, row) in w.rows.iter().enumerate() {
        for &(s, wt) in row {
            out.row_mut(d).scaled_add(wt, &src_features.row(s));
        }
    }
    Ok(out)
}
