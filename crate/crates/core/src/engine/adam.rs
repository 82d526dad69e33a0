use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        Moments {
            first: params.iter().map(Tensor::zeros_like).collect(),
            second: params.iter().map(Tensor::zeros_like).collect(),
        }
    }
}

/// One bias-corrected Adam step at step count `t ≥ 1`. Parameters whose
/// gradient is `None` are left untouched, moments included.
pub fn adam_update<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    moments: &mut Moments<T>,
    t: u64,
    hyper: &AdamHyper,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam step count starts at 1"));
    }
    if grads.len() != params.len()
        || moments.first.len() != params.len()
        || moments.second.len() != params.len()
    {
        return Err(Error::invalid(format!(
            "{} params, {} grads, {}/{} moment buffers",
            params.len(),
            grads.len(),
            moments.first.len(),
            moments.second.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            for other in [&moments.first[i], &moments.second[i], g] {
                if other.shape() != params[i].shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_update",
                        lhs: params[i].shape().to_vec(),
                        rhs: other.shape().to_vec(),
                    });
                }
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adam gradient"));
            }
        }
    }

    let ti = i32::try_from(t).unwrap_or(i32::MAX);
    let bc1 = 1.0 - hyper.beta1.powi(ti);
    let bc2 = 1.0 - hyper.beta2.powi(ti);
    let (b1, b2) = (T::c(hyper.beta1), T::c(hyper.beta2));
    let (one_b1, one_b2) = (T::c(1.0 - hyper.beta1), T::c(1.0 - hyper.beta2));
    let (lr, eps) = (T::c(hyper.lr), T::c(hyper.eps));
    let (inv_bc1, inv_bc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));

    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params[i].data_mut();
        let m = moments.first[i].data_mut();
        let v = moments.second[i].data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + one_b1 * gk;
            v[k] = b2 * v[k] + one_b2 * gk * gk;
            let m_hat = m[k] * inv_bc1;
            let v_hat = v[k] * inv_bc2;
            p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
