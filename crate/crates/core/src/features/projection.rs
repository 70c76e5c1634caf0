use super::{FeatureError, FeatureMatrix};
use crate::numeric::kernels::matmul_nn;

/// Linear map followed by ReLU, used to bring external features down to the
/// internal filterbank dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `in_dim × out_dim`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn project_features(f: &FeatureMatrix, p: &Projection) -> Result<FeatureMatrix, FeatureError> {
    if f.cols() != p.in_dim {
        return Err(FeatureError::DimMismatch { expected: p.in_dim, got: f.cols() });
    }
    let mut out = matmul_nn(f.data(), &p.weight, f.rows(), p.in_dim, p.out_dim);
    for row in out.chunks_mut(p.out_dim) {
        for (v, b) in row.iter_mut().zip(&p.bias) {
            *v = (*v + b).max(0.0);
        }
    }
    FeatureMatrix::new(f.rows(), p.out_dim, out)
}
