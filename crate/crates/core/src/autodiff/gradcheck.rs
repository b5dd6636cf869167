use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Largest relative discrepancy between the tape gradient of `f` and a
/// central finite difference with step `eps`, over every entry of every
/// input. The relative error is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let entries: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
    grad_check_entries(inputs, eps, &entries, f)
}

fn eval_at<F>(vals: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = vals.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.value().item())
}

fn analytic<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|v| grads.get_or_zeros(*v)).collect())
}

fn relative(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// [`grad_check`] restricted to the listed `(input, flat index)` entries.
pub fn grad_check_entries<F>(inputs: &[Tensor], eps: f64, entries: &[(usize, usize)], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let grad = analytic(inputs, &f)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in entries {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let up = eval_at(&probe, &f)?;
        probe[i].data_mut()[j] = orig - eps;
        let down = eval_at(&probe, &f)?;
        probe[i].data_mut()[j] = orig;
        worst = worst.max(relative(grad[i].data()[j], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Compares the tape directional derivative `<grad f, d>` with a central
/// difference along each direction `d` (one tensor per input).
pub fn directional_check<F>(inputs: &[Tensor], eps: f64, directions: &[Vec<Tensor>], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let grad = analytic(inputs, &f)?;
    let mut worst: f64 = 0.0;
    for d in directions {
        let step = |sign: f64| -> Vec<Tensor> {
            inputs.iter().zip(d).map(|(x, v)| Tensor::new(x.shape().to_vec(), x.data().iter().zip(v.data()).map(|(a, b)| a + sign * eps * b).collect()).expect("direction matches input")).collect()
        };
        let numeric = (eval_at(&step(1.0), &f)? - eval_at(&step(-1.0), &f)?) / (2.0 * eps);
        let a: f64 = grad.iter().zip(d).map(|(g, v)| g.data().iter().zip(v.data()).map(|(x, y)| x * y).sum::<f64>()).sum();
        worst = worst.max(relative(a, numeric));
    }
    Ok(worst)
}
