use std::collections::BTreeMap;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{ParamKind, ParameterSet};

/// Weight decay applies to every trainable tensor except biases and
/// normalization gains/shifts.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

/// One SGD-with-momentum update over the parameters named in `grads`:
/// `v ← m·v + (g + wd·w)`, `w ← w − lr·v`. Velocities are created on first use.
pub fn sgd_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    velocities: &mut BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} at index {i}")));
        }
        let param = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if param.kind != ParamKind::Trainable {
            return Err(Error::InvalidArgument(format!("{name} is a buffer")));
        }
        if param.tensor.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: param.tensor.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    for (name, g) in grads {
        let wd = if decays(name) { weight_decay } else { 0.0 };
        let w = params.tensor_mut(name)?;
        let v = velocities
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + (gi + wd * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(())
}
