//! Central finite-difference validation of analytic gradients.

use super::tape::{Tape, ValId};
use super::Tensor;
use crate::error::{Error, Result};

/// Checks the analytic gradient of a scalar-valued computation against
/// central finite differences, coordinate by coordinate, and returns the
/// maximum relative error.
///
/// `build` must construct the same computation on any tape it is given;
/// it maps the input handle to a scalar output handle.
pub fn gradient_check<F>(build: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, ValId) -> Result<ValId>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Param(format!(
            "gradient_check eps must be in [1e-6, 1e-3], got {eps}"
        )));
    }

    let mut tape = Tape::new();
    let x = tape.input(input.clone().with_grad());
    let out = build(&mut tape, x)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Dim(format!(
            "gradient_check output must be scalar, got {:?}",
            tape.value(out).shape()
        )));
    }
    tape.backward(out)?;
    let analytic = tape.grad(x).expect("input entry has a gradient").to_vec();

    // Relative-error floor scaled to the overall gradient magnitude, so
    // zero-gradient coordinates do not turn finite-difference noise into
    // spurious large relative errors.
    let gmax = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let floor = 1e-6 * gmax.max(1.0);

    let eval = |i: usize, v: f64| -> Result<f64> {
        let mut probe = input.clone();
        probe.data_mut()[i] = v;
        let mut tape = Tape::new();
        let x = tape.input(probe);
        let out = build(&mut tape, x)?;
        Ok(tape.scalar(out))
    };

    let mut max_err = 0.0f64;
    for i in 0..input.numel() {
        let base = input.data()[i];
        let fp = eval(i, base + eps)?;
        let fm = eval(i, base - eps)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = numeric.abs().max(analytic[i].abs()).max(floor);
        max_err = max_err.max((numeric - analytic[i]).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// conv2d then maxpool2 is linear wherever the argmax is stable, so the
    /// check should report only floating-point noise.
    #[test]
    fn linear_op_error_at_noise_level() {
        let input = Tensor::from_vec(&[1, 2, 2], vec![0.3, -0.7, 1.1, 0.4]).unwrap();
        let err = gradient_check(
            |tape, x| {
                let mut w = Tensor::zeros(&[1, 1, 3, 3]);
                for (i, v) in w.data_mut().iter_mut().enumerate() {
                    *v = 0.1 * (i as f64 + 1.0);
                }
                let w = tape.input(w);
                let b = tape.input(Tensor::from_vec(&[1], vec![0.2]).unwrap());
                let y = tape.conv2d(x, w, b)?;
                tape.maxpool2(y) // [1,1,1]: scalar output
            },
            &input,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let input = Tensor::zeros(&[1, 2, 2]);
        let r = gradient_check(|tape, x| tape.maxpool2(x), &input, 1e-2);
        assert!(matches!(r, Err(Error::Param(_))));
    }

    #[test]
    fn relu_masked_coordinates_do_not_false_alarm() {
        // Inputs bounded away from 0 by 0.1; half are negative (zero grad).
        let vals: Vec<f64> = (0..16)
            .map(|i| if i % 2 == 0 { 0.1 + 0.05 * i as f64 } else { -0.1 - 0.05 * i as f64 })
            .collect();
        let input = Tensor::from_vec(&[4, 2, 2], vals).unwrap();
        let err = gradient_check(
            |tape, x| {
                let r = tape.relu(x)?;
                tape.pixel_loss(r, &[1, 2, 3, 0])
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
