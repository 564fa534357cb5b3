use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn eval<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(track)))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

/// Largest relative disagreement between the tape gradient of a scalar
/// function and its central finite difference, over every element of every
/// input.
///
/// The per-element error is `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let value_at = |probe: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, out) = eval(&f, probe, false)?;
        Ok(tape.value(out).data()[0])
    };

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = value_at(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = value_at(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`grad_check_many`] for a function of a single tensor.
pub fn grad_check<F>(f: F, at: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(at), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::create(
            &[3, 4],
            Fill::Uniform {
                low: -2.0,
                high: 2.0,
                seed: 1,
            },
        )
        .unwrap();
        let err = grad_check(|t, v| t.sum(v, None), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at a kink disagrees with the central difference.
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v);
                t.sum(r, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn rejects_vector_valued_functions() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(grad_check(|_, v| Ok(v), &x, 1e-5).is_err());
    }
}
