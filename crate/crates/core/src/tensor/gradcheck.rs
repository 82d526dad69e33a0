use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn check_gradients<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_gradients_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`check_gradients`] over several inputs at once; the maximum is taken
/// across all coordinates of all inputs.
pub fn check_gradients_multi<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var, &tape);
        for i in 0..xs[k].len() {
            let base = xs[k].data()[i];
            probe[k] = with_coord(&xs[k], i, base + eps);
            let up = eval(&probe)?;
            probe[k] = with_coord(&xs[k], i, base - eps);
            let down = eval(&probe)?;
            probe[k] = xs[k].clone();
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn with_coord(x: &Tensor<f64>, i: usize, v: f64) -> Tensor<f64> {
    let mut d = x.data().to_vec();
    d[i] = v;
    Tensor::from_parts(x.shape().to_vec(), d)
}
