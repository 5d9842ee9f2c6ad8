//! Central-difference gradient checking against the tape.

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, 1e-6)` over the checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// of step `h` at every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h, None)
}

/// Multi-input variant. With `max_per_input`, each input is checked on an
/// evenly strided subset of at most that many coordinates.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    max_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        scalar(&loss)
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| v.grad().expect("leaf gradient"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let n = x.len();
        let picks: Vec<usize> = match max_per_input {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, i));
            }
        }
    }
    Ok(report)
}

fn scalar(loss: &Var<'_, f64>) -> Result<f64> {
    let v = loss.value();
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x0 = Tensor::from_fn(&[7], |i| i as f64 - 3.0);
        let r = grad_check(|_, x| Ok(x.square().sum()), &x0, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 7);
    }

    #[test]
    fn relu_away_from_kink() {
        let x0 = Tensor::from_fn(&[6], |i| if i % 2 == 0 { 0.1 + i as f64 } else { -0.2 - i as f64 });
        let r = grad_check(|_, x| Ok(x.relu().square().sum()), &x0, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let x0 = Tensor::from_fn(&[3], |i| 1.0 + i as f64);
        // detach cuts the path, so the tape reports zero.
        let r = grad_check(|_, x| Ok(x.detach().square().sum().add(&x.scale(0.0).sum())?), &x0, 1e-6).unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn subsampling_limits_coordinates() {
        let a = Tensor::from_fn(&[10], |i| i as f64 * 0.1);
        let b = Tensor::from_fn(&[2, 2], |i| i as f64);
        let r = grad_check_many(
            |_, xs| Ok(xs[0].sum().mul(&xs[1].square().sum())?),
            &[a, b],
            1e-6,
            Some(3),
        )
        .unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.max_rel_error < 1e-6);
    }
}
