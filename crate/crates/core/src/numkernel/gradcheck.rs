use super::{KernelError, Tape, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_relative_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar map `f` at `point` against
/// central differences with step `eps`, in 64-bit arithmetic.
///
/// `f` receives a fresh tape and one differentiable leaf per input tensor
/// and must be deterministic.
pub fn gradient_check<F>(f: F, point: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, KernelError>,
{
    if eps <= 0.0 {
        return Err(KernelError::Config(format!("finite-difference step {eps} must be positive")));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, KernelError> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars = point.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = point.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for k in 0..point[ti].numel() {
            let orig = point[ti].data()[k];
            probe[ti].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (ti, k);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_map_is_exact() {
        let w = t(&[3, 1], &[0.5, -2.0, 1.25]);
        let r = gradient_check(
            |tape, v| {
                let w = tape.constant(w.clone())?;
                let y = tape.matmul(v[0], w)?;
                tape.sum(y)
            },
            &[t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 6);
    }

    #[test]
    fn cube_at_one() {
        let r = gradient_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let cube = tape.mul(sq, v[0])?;
                tape.sum(cube)
            },
            &[t(&[1], &[1.0])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let r = gradient_check(|tape, v| tape.sum(v[0]), &[t(&[1], &[1.0])], 0.0);
        assert!(matches!(r, Err(KernelError::Config(_))));
    }
}
