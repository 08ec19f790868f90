use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar computation against central
/// finite differences.
///
/// Uses the fourth-order central stencil
/// `(8(f(x+e) - f(x-e)) - (f(x+2e) - f(x-2e))) / 12e`, which keeps truncation
/// error small at steps large enough to avoid cancellation in `f`.
///
/// `f` builds the computation on a fresh graph from the given parameter
/// leaves. Returns the largest `|analytic - numeric| / (|numeric| + 1e-12)`
/// over every parameter entry.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // the negation also rejects NaN
pub fn check_gradients<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        for k in 0..params[pi].len() {
            let analytic = grads.get(*var).map_or(0.0, |t| t.data()[k]);
            let original = probe[pi].data()[k];
            let mut at = |d: f64| -> Result<f64> {
                probe[pi].data_mut()[k] = original + d;
                eval(&probe)
            };
            let near = at(eps)? - at(-eps)?;
            let far = at(2.0 * eps)? - at(-2.0 * eps)?;
            let numeric = (8.0 * near - far) / (12.0 * eps);
            probe[pi].data_mut()[k] = original;
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = check_gradients(|g, v| g.mul(v[0], v[0]), &[Tensor::scalar(3.0)], 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = check_gradients(
            |g, _| Ok(g.input(Tensor::scalar(2.5))),
            &[Tensor::vector(vec![1.0, -2.0])],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let r = check_gradients(|_, v| Ok(v[0]), &[Tensor::vector(vec![1.0, 2.0])], 1e-6);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
