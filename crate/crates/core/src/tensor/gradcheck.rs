use super::{Result, Tape, Tensor, TensorError, Var};

/// Compare the tape gradient of a scalar function against central finite
/// differences. Returns the largest `|analytic - numeric| / max(1, |numeric|)`
/// over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_all(|vars| f(vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; the error is the maximum over
/// every coordinate of every input.
pub fn grad_check_all<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(TensorError::Invalid(format!(
            "grad_check: step {h} outside [1e-6, 1e-3]"
        )));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&vars)?;
        if out.value().numel() != 1 {
            return Err(TensorError::NotScalar(out.shape()));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars)?.item()
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[i];
            probe[which].data_mut()[i] = x0 + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = x0 - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
