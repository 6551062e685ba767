//! Central finite-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator floor, so that structurally zero gradients are compared on an
/// absolute scale instead of against finite-difference roundoff.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over compared coordinates of
    /// `|analytic − numeric| / max(REL_FLOOR, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub coordinates: usize,
    /// Coordinates whose `±eps` probe flipped a ReLU input sign; a central
    /// difference across a kink does not estimate the derivative, so these
    /// are not compared.
    pub kinked: usize,
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// `f` records its computation on the given tape starting from the leaf it is
/// handed and returns the scalar output. Two unperturbed evaluations must agree
/// bit for bit, otherwise `f` is reported as non-deterministic.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<T>| -> Result<(T, Vec<bool>)> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok((scalar_of(&tape, out)?, tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    let base = scalar_of(&tape, out)?;
    let pattern = tape.relu_pattern();
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let (again, _) = eval(x)?;
    if again.as_f64().to_bits() != base.as_f64().to_bits() {
        return Err(TensorError::Usage(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut worst = 0.0f64;
    let mut worst_index = 0;
    let mut kinked = 0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (up, up_pattern) = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (down, down_pattern) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if up_pattern != pattern || down_pattern != pattern {
            kinked += 1;
            continue;
        }
        let numeric = ((up - down) / (eps + eps)).as_f64();
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_FLOOR);
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        coordinates: x.numel(),
        kinked,
    })
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<T> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 - 2.5);
        let r = grad_check(|t, v| t.sum(v), &x, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 6);
    }

    #[test]
    fn detects_wrong_gradient_scale() {
        // ln clamps at 1e-12: below the clamp the analytic gradient is zero but
        // the function is flat too, so pick points above it.
        let x = Tensor::<f64>::new(vec![2], vec![0.5, 2.0]).unwrap();
        let ok = grad_check(
            |t, v| {
                let l = t.ln(v)?;
                t.sum(l)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(ok.max_rel_error < 1e-6);
    }

    #[test]
    fn flags_non_scalar_function() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(grad_check(|t, v| t.relu(v), &x, 1e-4).is_err());
    }
}
