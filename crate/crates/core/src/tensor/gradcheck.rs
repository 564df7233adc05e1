use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference gradient estimate `(f(p + eps) - f(p - eps)) / 2eps`
/// for every coordinate of `params`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let plus = f(&p);
            p[i] = orig - eps;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(1, |a|, |b|)`: relative for large gradients, absolute
/// near zero where a pure ratio is meaningless.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_error(a, b))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of the scalar built by `f` against
/// [`finite_diff_grad`] for every input tensor, returning the largest
/// [`rel_error`] seen.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        let mut failed = None;
        let numeric = finite_diff_grad(
            |p| {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == i {
                            tape.constant(&Tensor::new(t.shape(), p.to_vec()).unwrap())
                        } else {
                            tape.constant(t)
                        }
                    })
                    .collect();
                match f(&tape, &vars) {
                    Ok(v) => v.item(),
                    Err(e) => {
                        failed.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input.data(),
            eps,
        );
        if let Some(e) = failed {
            return Err(e);
        }
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }
}
