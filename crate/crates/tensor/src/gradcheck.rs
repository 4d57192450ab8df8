//! Central-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Maximum relative error per input tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    /// Number of elements compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Compare at most this many evenly spaced elements per tensor.
    pub max_elements_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-6, max_elements_per_param: None }
    }
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars);
    g.item(out)
}

fn sample_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut idx: Vec<usize> = (0..k).map(|i| i * (len - 1) / (k - 1).max(1)).collect();
            idx.dedup();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares the tape gradient of the scalar `f` against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// The relative error of each element uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    if !(opts.eps > 0.0) {
        return Err(TensorError::Config(format!("eps must be positive, got {}", opts.eps)));
    }
    let first = eval(&f, params);
    let second = eval(&f, params);
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic(format!(
            "two forward passes disagree: {first} vs {second}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars);
    if g.value(out).numel() != 1 {
        return Err(TensorError::Shape(format!("function output has shape {:?}, expected a scalar", g.shape(out))));
    }
    let grads = g.backward(out);

    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        let mut worst = 0.0f64;
        for i in sample_indices(params[pi].numel(), opts.max_elements_per_param) {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + opts.eps;
            let plus = eval(&f, &work);
            work[pi].data_mut()[i] = orig - opts.eps;
            let minus = eval(&f, &work);
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { per_param, max_rel_error, checked })
}
