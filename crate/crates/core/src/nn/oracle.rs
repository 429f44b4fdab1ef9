//! Plain-array reference implementations of the layers, for tests.

use ndarray::{concatenate, s, Array2, Axis};

use super::{Linear, Mlp, MultiHeadAttention, ParamStore};

pub fn linear(ps: &ParamStore, l: &Linear, x: &Array2<f64>) -> Array2<f64> {
    let w = Array2::from_shape_vec((l.d_out(), l.d_in()), ps.values(&l.weight_name()).unwrap()).unwrap();
    let mut y = x.dot(&w.t());
    if let Some(b) = l.bias_name() {
        let b = ps.values(&b).unwrap();
        for mut row in y.rows_mut() {
            row.iter_mut().zip(&b).for_each(|(v, b)| *v += b);
        }
    }
    y
}

pub fn mlp(ps: &ParamStore, m: &Mlp, x: &Array2<f64>) -> Array2<f64> {
    linear(ps, &m.fc2, &linear(ps, &m.fc1, x).mapv(|v| v.max(0.0)))
}

/// Row standardization with unit gain and zero shift.
pub fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let n = row.len() as f64;
        let m = row.sum() / n;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
        row.mapv_inplace(|a| (a - m) / (v + 1e-5).sqrt());
    }
    y
}

pub fn attention(ps: &ParamStore, a: &MultiHeadAttention, q_in: &Array2<f64>, kv: &Array2<f64>) -> Array2<f64> {
    let q = match &a.q_proj {
        Some(p) => linear(ps, p, q_in),
        None => q_in.clone(),
    };
    let k = linear(ps, &a.k_proj, kv);
    let v = linear(ps, &a.v_proj, kv);
    let dh = q.ncols() / a.heads();
    let heads: Vec<Array2<f64>> = (0..a.heads())
        .map(|h| {
            let cols = s![.., h * dh..(h + 1) * dh];
            let logits = q.slice(cols).dot(&k.slice(cols).t()) / (dh as f64).sqrt();
            let mut w = logits.clone();
            for mut row in w.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|x| (x - m).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            w.dot(&v.slice(cols))
        })
        .collect();
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    linear(ps, &a.o_proj, &concatenate(Axis(1), &views).unwrap())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
