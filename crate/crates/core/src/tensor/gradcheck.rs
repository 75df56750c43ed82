//! Central finite-difference gradient oracle.

use super::{Graph, Result, Tensor, TensorError, Var};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every coordinate of every input.
    pub max_rel_error: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Checks `d f / d x` for a scalar function of a single tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_gradients(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)
}

/// Checks the gradients of a scalar function of several tensors.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("step {step} outside [1e-6, 1e-3]"),
        });
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut num = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[k] = with_entry(input, i, orig + step);
            let plus = eval(&work)?;
            work[k] = with_entry(input, i, orig - step);
            let minus = eval(&work)?;
            num[i] = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[i];
            max_rel_error = max_rel_error.max((a - num[i]).abs() / num[i].abs().max(1.0));
        }
        work[k] = input.clone();
        numeric.push(Tensor::from_parts(input.shape().to_vec(), num));
    }
    Ok(GradCheckReport { max_rel_error, analytic, numeric })
}

fn with_entry(t: &Tensor, i: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert_eq!(report.analytic[0].data(), &[2.0, 4.0]);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
        assert!(finite_difference_check(|g, x| Ok(g.sum(x)), &x, 1e-8).is_err());
    }
}
