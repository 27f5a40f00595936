//! Central finite-difference verification of analytic gradients.

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Multiplies every analytic gradient before comparison. `1.0` in normal
    /// use; anything else is a negative control for the checker itself.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1, |a|, |n|)` over every input element.
    pub max_rel_error: f64,
    /// Largest error per input tensor.
    pub per_input: Vec<f64>,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub elements_checked: usize,
}

pub fn gradient_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    gradient_check_with(f, inputs, GradCheckOptions::default())
}

/// Compares the gradient of the scalar `f(inputs)` from [`Tensor::backward`]
/// with central differences, perturbing one element of one input at a time.
pub fn gradient_check_with<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape().to_vec(), t.to_vec()))
        .collect::<Result<_>>()?;

    let first = f(&leaves)?;
    let second = f(&leaves)?;
    if first.numel() != 1 {
        return Err(TensorError::NotScalar(first.shape().to_vec()));
    }
    if first.data()[0].to_bits() != second.data()[0].to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    first.backward()?;

    let constants: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
    let eval = |which: usize, elem: usize, delta: f64| -> Result<f64> {
        let mut args = constants.clone();
        let mut data = constants[which].to_vec();
        data[elem] += delta;
        args[which] = Tensor::new(constants[which].shape().to_vec(), data)?;
        f(&args)?.item()
    };

    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; leaves.len()],
        worst: (0, 0),
        elements_checked: 0,
    };
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for (e, a) in analytic.iter().enumerate() {
            let a = a * opts.analytic_scale;
            let numeric = (eval(i, e, h)? - eval(i, e, -h)?) / (2.0 * h);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.elements_checked += 1;
            if err > report.per_input[i] {
                report.per_input[i] = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, e);
            }
        }
    }
    Ok(report)
}
