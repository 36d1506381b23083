use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a scalar. The result is the maximum over every parameter
/// coordinate of `|autodiff - central| / max(1, |central|)`.
pub fn check_gradients<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Contract("check_gradients needs finite parameters".into()));
    }
    let mut tape = Tape::new(true);
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("check_gradients needs a scalar objective".into()));
    }
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(true);
        let vars = perturbed
            .iter()
            .map(|p| tape.leaf(p.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("check_gradients objective".into()));
        }
        Ok(value)
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for c in 0..params[p].numel() {
            let orig = params[p].data()[c];
            work[p].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[c] = orig;
            let central = (plus - minus) / (2.0 * eps);
            let auto = analytic[p].data()[c];
            worst = worst.max((auto - central).abs() / central.abs().max(1.0));
        }
    }
    Ok(worst)
}
