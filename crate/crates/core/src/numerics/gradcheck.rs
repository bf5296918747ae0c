use super::matrix::Matrix;
use super::tape::{ParamId, Tape, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` records a scalar function of `params` on the given tape and returns the
/// loss variable. Parameter `i` is registered as `ParamId(i)`. The result is
/// the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<'a, F>(params: &[Matrix], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::usage(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param_owned(ParamId(i), p.clone()))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param_owned(ParamId(i), p.clone()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let analytic = tape.backward(loss)?;

    let mut work: Vec<Matrix> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let grad = analytic
            .get(ParamId(pi))
            .ok_or_else(|| Error::usage(format!("no gradient for parameter {pi}")))?;
        for k in 0..p.len() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
