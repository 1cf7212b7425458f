use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Parameters sharing one learning rate.
pub struct ParamGroup<S: Scalar> {
    pub params: Vec<Tensor<S>>,
    pub lr: S,
}

struct Moments<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Adam with bias correction and per-group learning rates.
///
/// Parameters whose gradient is unset are skipped entirely, so a parameter
/// that never receives gradients stays frozen at its initial value.
pub struct Adam<S: Scalar> {
    groups: Vec<ParamGroup<S>>,
    state: Vec<Vec<Moments<S>>>,
    beta1: S,
    beta2: S,
    eps: S,
    step_count: u32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(groups: Vec<ParamGroup<S>>, beta1: S, beta2: S, eps: S) -> Self {
        let state = groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|p| Moments {
                        m: vec![S::zero(); p.numel()],
                        v: vec![S::zero(); p.numel()],
                    })
                    .collect()
            })
            .collect();
        Adam {
            groups,
            state,
            beta1,
            beta2,
            eps,
            step_count: 0,
        }
    }

    pub fn default_betas(groups: Vec<ParamGroup<S>>) -> Self {
        Adam::new(
            groups,
            S::from_f64_lossy(0.9),
            S::from_f64_lossy(0.999),
            S::from_f64_lossy(1e-8),
        )
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.groups.iter().flat_map(|g| g.params.iter())
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (group, states) in self.groups.iter().zip(self.state.iter_mut()) {
            for (param, moments) in group.params.iter().zip(states.iter_mut()) {
                let grad = match param.grad() {
                    Some(g) => g,
                    None => continue,
                };
                if grad.len() != param.numel() {
                    return Err(Error::DimensionMismatch {
                        op: "adam_step",
                        lhs: param.shape(),
                        rhs: vec![grad.len()],
                    });
                }
                let one = S::one();
                for (i, (mi, vi)) in moments.m.iter_mut().zip(moments.v.iter_mut()).enumerate() {
                    let g = grad[i];
                    *mi = self.beta1 * *mi + (one - self.beta1) * g;
                    *vi = self.beta2 * *vi + (one - self.beta2) * g * g;
                }
                let (m, v) = (&moments.m, &moments.v);
                let (lr, eps) = (group.lr, self.eps);
                param.apply_update(|i, value, _| {
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    value - lr * m_hat / (v_hat.sqrt() + eps)
                });
            }
        }
        Ok(())
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<S: Scalar>(params: &[Tensor<S>], max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g {
                let v = v.into_f64();
                total += v * v;
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = S::from_f64_lossy(max_norm / norm);
        for p in params {
            p.scale_grad(factor);
        }
    }
    norm
}
