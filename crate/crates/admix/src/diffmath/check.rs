//! Gradient verification against central finite differences.

use super::{DiffError, Tape, Var};
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar-valued function against
/// central finite differences, returning the maximum over coordinates of
/// `|analytic - fd| / max(1, |fd|)`.
///
/// Non-finite intermediate values are reported together with the offending
/// coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] generalized to several independent inputs; the error is
/// maximized over every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if eps <= 0.0 {
        return Err(DiffError::Invalid { op: "grad_check", detail: "eps must be positive".into() });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(DiffError::Invalid {
            op: "grad_check",
            detail: format!("function must be scalar-valued, got {:?}", tape.shape_of(root)),
        });
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|v| tape.grad_tensor(*v).into_data()).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[ti].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DiffError::NonFinite { op: "grad_check", coord: Some(i) });
            }
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (analytic[ti][i] - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
