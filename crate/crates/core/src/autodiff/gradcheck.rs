//! Finite-difference verification of analytic gradients.
//!
//! The numeric side is an independent oracle: it only re-evaluates the
//! forward function at perturbed inputs and never touches the graph.

use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err {:>12.3e}  {}",
            self.name,
            self.max_rel_err,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative error with the usual symmetric denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / (a.abs() + b.abs()).max(1e-8)
    }
}

/// Central finite differences of `f` with respect to `param`, element by
/// element. `f` must re-run the forward pass from current tensor values.
pub fn numeric_gradient<S: Scalar>(
    param: &Tensor<S>,
    h: f64,
    mut f: impl FnMut() -> Result<Tensor<S>>,
) -> Result<Vec<f64>> {
    let mut grads = Vec::with_capacity(param.numel());
    let step = S::from_f64_lossy(h);
    for i in 0..param.numel() {
        let saved = param.value_at(i);
        param.set_value_at(i, saved + step);
        let up = f()?.item().into_f64();
        param.set_value_at(i, saved - step);
        let down = f()?.item().into_f64();
        param.set_value_at(i, saved);
        grads.push((up - down) / (2.0 * h));
    }
    Ok(grads)
}

/// Compares analytic and numeric gradients, reporting the worst entry.
pub fn compare(name: &str, analytic: &[f64], numeric: &[f64], tolerance: f64) -> CheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let max_rel_err = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0f64, f64::max);
    CheckReport {
        name: name.to_string(),
        max_rel_err,
        tolerance,
    }
}

/// Runs `f` once, backpropagates, and checks every listed parameter against
/// central differences.
pub fn check_params<S: Scalar>(
    name: &str,
    params: &[Tensor<S>],
    tolerance: f64,
    mut f: impl FnMut() -> Result<Tensor<S>>,
) -> Result<CheckReport> {
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for p in params {
        let grad = p.grad().unwrap_or_else(|| vec![S::zero(); p.numel()]);
        analytic.extend(grad.iter().map(|g| g.into_f64()));
        numeric.extend(numeric_gradient(p, DEFAULT_STEP, &mut f)?);
    }
    Ok(compare(name, &analytic, &numeric, tolerance))
}

/// Finite-difference checks for every differentiable primitive, on random
/// inputs drawn from `seed`.
pub fn op_suite(seed: u64, tolerance: f64) -> Result<Vec<CheckReport>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut reports = Vec::new();
    let rand_param = |shape: Vec<usize>, rng: &mut Xoshiro256PlusPlus| {
        Tensor::<f64>::uniform_param(shape, -1.0, 1.0, rng)
    };

    {
        let a = rand_param(vec![3, 4], &mut rng);
        let b = rand_param(vec![4, 2], &mut rng);
        reports.push(check_params("matmul", &[a.clone(), b.clone()], tolerance, || {
            Ok(a.matmul(&b)?.sum_all())
        })?);
    }
    {
        let a = rand_param(vec![2, 3], &mut rng);
        let b = rand_param(vec![2, 3], &mut rng);
        reports.push(check_params("add", &[a.clone(), b.clone()], tolerance, || {
            Ok(a.add(&b)?.mul(&a)?.sum_all())
        })?);
    }
    {
        let a = rand_param(vec![3, 2], &mut rng);
        let row = rand_param(vec![2], &mut rng);
        reports.push(check_params("add_row", &[a.clone(), row.clone()], tolerance, || {
            Ok(a.add_row(&row)?.tanh().sum_all())
        })?);
    }
    {
        let a = rand_param(vec![2, 5], &mut rng);
        let w = rand_param(vec![5, 1], &mut rng);
        reports.push(check_params("softmax", &[a.clone(), w.clone()], tolerance, || {
            // weight the simplex points so the gradient is non-trivial
            Ok(a.softmax(1).matmul(&w)?.sum_all())
        })?);
    }
    {
        let x = rand_param(vec![3, 4], &mut rng);
        let gain = rand_param(vec![4], &mut rng);
        let bias = rand_param(vec![4], &mut rng);
        reports.push(check_params(
            "layer_norm",
            &[x.clone(), gain.clone(), bias.clone()],
            tolerance,
            || Ok(x.layer_norm(&gain, &bias, 1e-5)?.tanh().sum_all()),
        )?);
    }
    {
        let logits = rand_param(vec![4, 6], &mut rng);
        let targets = vec![1usize, 0, 5, 3];
        reports.push(check_params("cross_entropy", &[logits.clone()], tolerance, || {
            logits.cross_entropy(&targets)
        })?);
    }
    {
        let x = rand_param(vec![2, 3], &mut rng);
        reports.push(check_params("tanh", &[x.clone()], tolerance, || {
            Ok(x.tanh().sum_all())
        })?);
    }
    {
        let x = rand_param(vec![2, 3], &mut rng);
        reports.push(check_params("gelu", &[x.clone()], tolerance, || {
            Ok(x.gelu().sum_all())
        })?);
    }
    {
        let e = rand_param(vec![5, 3], &mut rng);
        let idx = vec![0usize, 2, 2, 4];
        reports.push(check_params("gather_rows", &[e.clone()], tolerance, || {
            Ok(e.gather_rows(&idx)?.tanh().sum_all())
        })?);
    }
    {
        let a = rand_param(vec![2, 3], &mut rng);
        let b = rand_param(vec![1, 3], &mut rng);
        reports.push(check_params("concat_rows", &[a.clone(), b.clone()], tolerance, || {
            Ok(Tensor::concat_rows(&[a.clone(), b.clone()])?.tanh().sum_all())
        })?);
    }
    {
        let a = rand_param(vec![2, 2], &mut rng);
        let b = rand_param(vec![2, 3], &mut rng);
        reports.push(check_params("concat_cols", &[a.clone(), b.clone()], tolerance, || {
            Ok(Tensor::concat_cols(&[a.clone(), b.clone()])?.tanh().sum_all())
        })?);
    }
    {
        let a = rand_param(vec![3, 4], &mut rng);
        reports.push(check_params("slice_cols", &[a.clone()], tolerance, || {
            Ok(a.slice_cols(1, 2)?.mul(&a.slice_cols(0, 2)?)?.sum_all())
        })?);
    }
    {
        let a = rand_param(vec![3, 2], &mut rng);
        reports.push(check_params("transpose", &[a.clone()], tolerance, || {
            Ok(a.transpose().matmul(&a)?.sum_all())
        })?);
    }
    {
        let a = rand_param(vec![2, 2], &mut rng);
        reports.push(check_params("scale", &[a.clone()], tolerance, || {
            Ok(a.scale(1.7).tanh().sum_all())
        })?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_primitive_ops_pass_finite_differences() {
        for report in op_suite(7, 1e-6).unwrap() {
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn matmul_gradient_meets_tight_tolerance() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let a = Tensor::<f64>::uniform_param(vec![3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform_param(vec![3, 3], -1.0, 1.0, &mut rng);
        let report = check_params("matmul_tight", &[a.clone(), b.clone()], 1e-6, || {
            Ok(a.matmul(&b)?.sum_all())
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let p = Tensor::<f64>::param(vec![2], vec![0.3, -0.4]);
        let f = || Ok(p.tanh().sum_all());
        let loss: Tensor<f64> = f().unwrap();
        loss.backward().unwrap();
        p.perturb_grad_at(0, 0.5);
        let analytic: Vec<f64> = p.grad().unwrap();
        let numeric = numeric_gradient(&p, DEFAULT_STEP, f).unwrap();
        let report = compare("tanh_bugged", &analytic, &numeric, 1e-6);
        assert!(!report.passed());
        assert!(report.name.contains("tanh_bugged"));
    }
}
