//! Small neural building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that
//! checkpoints, optimizers and gradient checks can address them uniformly.
//! Activations are row-major: one row per token (point, site, superpoint or
//! query) and one column per channel.

mod attention;
mod gradcheck;
mod layers;
#[cfg(test)]
pub(crate) mod oracle;
mod params;

pub use attention::MultiHeadAttention;
pub use gradcheck::{check_gradients, relative_error, GradCheckReport, GradProbe};
pub use layers::{LayerNorm, Linear, Mlp};
pub use params::{Init, ParamStore};

use candle_core::{Tensor, D};

use crate::Result;

/// Mean over rows, keeping a `1 x C` shape.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(0)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}

pub fn tensor_from_array(a: &ndarray::Array2<f64>, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Tensor> {
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_array(t: &Tensor) -> Result<ndarray::Array2<f64>> {
    let (r, c) = t.dims2()?;
    let data: Vec<f64> = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    ndarray::Array2::from_shape_vec((r, c), data).map_err(|e| crate::Error::internal(e.to_string()))
}
