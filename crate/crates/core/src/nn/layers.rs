use candle_core::{Tensor, D};

use super::{Init, ParamStore};
use crate::Result;

/// Affine map `x W^T + b`, with `W` stored as `out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub(crate) name: String,
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = ps.var(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform { bound })?;
        let bias = if bias {
            Some(ps.var(&format!("{name}.bias"), &[d_out], Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self { name: name.to_string(), weight, bias })
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        let weight = ps.var(&format!("{name}.weight"), &[d_out, d_in], weight)?;
        let bias = match bias {
            Some(init) => Some(ps.var(&format!("{name}.bias"), &[d_out], init)?),
            None => None,
        };
        Ok(Self { name: name.to_string(), weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> Option<String> {
        self.bias.as_ref().map(|_| format!("{}.bias", self.name))
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn dtype(&self) -> candle_core::DType {
        self.weight.dtype()
    }

    pub fn device(&self) -> &candle_core::Device {
        self.weight.device()
    }
}

/// Normalization over the channel dimension of every row, independent of
/// how many rows are in the batch.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.var(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: ps.var(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two-layer perceptron `fc2(relu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d_in, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }

    /// Make the perceptron compute the identity exactly, using
    /// `x = relu(x) - relu(-x)`. Needs `hidden = 2 * d_in = 2 * d_out`.
    pub fn set_identity(&self, ps: &ParamStore) -> Result<()> {
        let d = self.fc1.d_in();
        if self.fc1.d_out() != 2 * d || self.fc2.d_out() != d {
            return Err(crate::Error::param("identity init needs hidden = 2 * width"));
        }
        let mut w1 = vec![0.0; 2 * d * d];
        let mut w2 = vec![0.0; 2 * d * d];
        for i in 0..d {
            w1[i * d + i] = 1.0;
            w1[(d + i) * d + i] = -1.0;
            w2[i * 2 * d + i] = 1.0;
            w2[i * 2 * d + d + i] = -1.0;
        }
        ps.set_from_f64(&self.fc1.weight_name(), w1)?;
        ps.set_from_f64(&self.fc2.weight_name(), w2)?;
        for l in [&self.fc1, &self.fc2] {
            if let Some(b) = l.bias_name() {
                ps.set_from_f64(&b, vec![0.0; l.d_out()])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut ps = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [-2.0, 0.0, 2.0, 8.0]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = ln.forward(&x).unwrap().to_vec2().unwrap();
        for row in y {
            let m = row.iter().sum::<f64>() / 4.0;
            let v = row.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn mlp_identity() {
        let mut ps = ParamStore::new(1, DType::F64);
        let mlp = Mlp::new(&mut ps, "m", 3, 6, 3).unwrap();
        mlp.set_identity(&ps).unwrap();
        let x = Tensor::new(&[[1.5f64, -2.0, 0.25]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = mlp.forward(&x).unwrap().to_vec2().unwrap();
        assert_eq!(y, vec![vec![1.5, -2.0, 0.25]]);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut ps = ParamStore::new(2, DType::F64);
        let lin = Linear::new(&mut ps, "lin", 3, 4, true).unwrap();
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[0.3f64, -1.2, 0.7], [1.1, 0.4, -0.5], [0.0, 0.9, 0.2]], &Device::Cpu).unwrap();
        let probe = Tensor::new(&[[0.5f64, -0.3, 0.8, 0.1], [-0.7, 0.2, 0.4, 0.9], [0.3, 0.3, -0.6, 0.2]], &Device::Cpu).unwrap();
        let names: Vec<String> = ps.iter().map(|(n, _)| n.clone()).collect();
        let report = crate::nn::check_gradients(&ps, &names, 12, 1e-5, || {
            Ok((ln.forward(&lin.forward(&x)?)? * &probe)?.sum_all()?)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{:?}", report.worst());
    }
}
