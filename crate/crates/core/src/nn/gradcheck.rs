use candle_core::{DType, Tensor};

use super::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradProbe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare autograd gradients of a scalar `loss` with central differences
/// for up to `per_param` evenly spread entries of every named parameter.
pub fn check_gradients(
    ps: &ParamStore,
    names: &[String],
    per_param: usize,
    step: f64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let value = |l: Tensor| -> Result<f64> { Ok(l.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let grads = loss()?.backward()?;
    let mut report = GradCheckReport::default();
    for name in names {
        let var = ps.get(name).ok_or_else(|| Error::param(format!("unknown parameter `{name}`")))?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
            None => vec![0.0; var.elem_count()],
        };
        let original = ps.values(name)?;
        let n = original.len();
        let count = per_param.min(n);
        for j in 0..count {
            let index = j * n / count;
            let mut shifted = original.clone();
            shifted[index] = original[index] + step;
            ps.set_from_f64(name, shifted.clone())?;
            let plus = value(loss()?)?;
            shifted[index] = original[index] - step;
            ps.set_from_f64(name, shifted)?;
            let minus = value(loss()?)?;
            ps.set_from_f64(name, original.clone())?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[index];
            report.probes.push(GradProbe {
                param: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, 1e-6),
            });
        }
    }
    Ok(report)
}
