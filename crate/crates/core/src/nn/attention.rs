use candle_core::Tensor;

use super::{softmax_last, Linear, ParamStore};
use crate::{Error, Result};

/// Multi-head scaled dot-product attention with learned projections.
///
/// The query projection is optional so that several attention blocks can
/// share one projected query set.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q_proj: Option<Linear>,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub o_proj: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    /// `d_q`/`d_kv` are the input widths, `dim` the projection width and
    /// `d_out` the output width.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_q: Option<usize>,
        d_kv: usize,
        dim: usize,
        d_out: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::param(format!("{heads} heads do not divide attention width {dim}")));
        }
        let q_proj = match d_q {
            Some(d) => Some(Linear::new(ps, &format!("{name}.q_proj"), d, dim, true)?),
            None => None,
        };
        Ok(Self {
            q_proj,
            k_proj: Linear::new(ps, &format!("{name}.k_proj"), d_kv, dim, true)?,
            v_proj: Linear::new(ps, &format!("{name}.v_proj"), d_kv, dim, true)?,
            o_proj: Linear::new(ps, &format!("{name}.o_proj"), dim, d_out, true)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, queries: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let q = match &self.q_proj {
            Some(p) => p.forward(queries)?,
            None => queries.clone(),
        };
        self.attend(&q, kv)
    }

    /// Attention for already projected queries (`n_q x dim`).
    pub fn attend(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let (n_kv, _) = kv.dims2()?;
        if n_kv == 0 {
            return Err(Error::param("attention over zero key/value tokens"));
        }
        let (n_q, d) = q.dims2()?;
        if d != self.dim {
            return Err(Error::param(format!("query width {d}, expected {}", self.dim)));
        }
        let k = self.k_proj.forward(kv)?;
        let v = self.v_proj.forward(kv)?;
        let dh = self.dim / self.heads;
        let split = |t: &Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((n, self.heads, dh))?.transpose(0, 1)?.contiguous()?)
        };
        let (qh, kh, vh) = (split(q, n_q)?, split(&k, n_kv)?, split(&v, n_kv)?);
        let scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let out = weights.matmul(&vh)?.transpose(0, 1)?.contiguous()?.reshape((n_q, self.dim))?;
        self.o_proj.forward(&out)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    #[test]
    fn rejects_bad_heads() {
        let mut ps = ParamStore::new(0, DType::F64);
        assert!(MultiHeadAttention::new(&mut ps, "a", Some(4), 4, 6, 4, 4).is_err());
    }

    #[test]
    fn hand_computed_single_head() {
        // 2 queries x 3 tokens, d = 4, one head; projections fixed to identity.
        let mut ps = ParamStore::new(0, DType::F64);
        let att = MultiHeadAttention::new(&mut ps, "a", Some(4), 4, 4, 4, 1).unwrap();
        for l in [att.q_proj.as_ref().unwrap(), &att.k_proj, &att.v_proj, &att.o_proj] {
            let mut eye = vec![0.0; 16];
            (0..4).for_each(|i| eye[i * 5] = 1.0);
            ps.set_from_f64(&l.weight_name(), eye).unwrap();
            ps.set_from_f64(&l.bias_name().unwrap(), vec![0.0; 4]).unwrap();
        }
        let q = [[1.0, 0.0, 2.0, -1.0], [0.5, 0.5, 0.0, 1.0]];
        let kv = [[1.0, 1.0, 0.0, 0.0], [0.0, 2.0, 1.0, 0.0], [-1.0, 0.0, 0.0, 3.0]];
        let qt = Tensor::new(&q, &Device::Cpu).unwrap();
        let kvt = Tensor::new(&kv, &Device::Cpu).unwrap();
        let out: Vec<Vec<f64>> = att.forward(&qt, &kvt).unwrap().to_vec2().unwrap();
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = kv.iter().map(|k| qi.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / 2.0).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..4 {
                let expect: f64 = logits.iter().zip(&kv).map(|(l, k)| l.exp() / z * k[c]).sum();
                assert!((out[i][c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_is_query_independent() {
        let mut ps = ParamStore::new(3, DType::F64);
        let att = MultiHeadAttention::new(&mut ps, "a", Some(6), 5, 8, 6, 2).unwrap();
        let q = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], [-6.0, 0.0, 0.1, 9.0, -2.0, 1.0]], &Device::Cpu).unwrap();
        let kv = Tensor::new(&[[0.3f64, -0.2, 0.7, 1.1, -0.5]], &Device::Cpu).unwrap();
        let out: Vec<Vec<f64>> = att.forward(&q, &kv).unwrap().to_vec2().unwrap();
        let value = att.o_proj.forward(&att.v_proj.forward(&kv).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        for row in &out {
            for (a, b) in row.iter().zip(&value[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let empty = Tensor::zeros((0, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(att.forward(&q, &empty).is_err());
    }
}
