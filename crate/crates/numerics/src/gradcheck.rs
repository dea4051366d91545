use crate::error::{NumericsError, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences; returns `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &all)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_coords<T, F>(f: F, x: &Tensor<T>, h: f64, coords: &[usize]) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-3).contains(&h) {
        return Err(NumericsError::Contract(format!("grad_check step {h} outside [1e-5, 1e-3]")));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(NumericsError::Contract(format!("grad_check coordinate {bad} out of range")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    if tape.value(out).numel() != 1 {
        return Err(NumericsError::Contract(format!(
            "grad_check needs a scalar function, got output shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(input).unwrap_or(&zeros);

    let eval = |point: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0].as_f64())
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::of(h);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::of(h);
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new([1], vec![3.0f64]).unwrap();
        let f = |t: &mut Tape<f64>, v: Var| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&mut tape, v).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[6.0]);
        assert!(grad_check(f, &x, 1e-4).unwrap() < 1e-8);
    }

    #[test]
    fn sum_grad_is_ones() {
        let x = Tensor::new([2, 3], vec![0.1, -4.0, 2.5, 9.0, 0.0, 1.0f64]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x);
        let out = tape.sum(v);
        let g = tape.backward(out).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::new([2], vec![1.0f64, 2.0]).unwrap();
        let err = grad_check(|_, v| Ok(v), &x, 1e-4).unwrap_err();
        assert!(matches!(err, NumericsError::Contract(_)));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::new([1], vec![1.0f64]).unwrap();
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-1).is_err());
    }
}
