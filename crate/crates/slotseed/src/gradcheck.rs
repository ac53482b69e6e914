//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Default probe step for 64-bit checks.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Any relu preactivation with magnitude at or below this marks the probe
/// point as kink-adjacent; the check is then flagged instead of trusted.
pub const KINK_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// max over coordinates of |analytic - central| / max(1, |central|)
    pub max_rel_err: f64,
    /// true when some relu saw a preactivation within [`KINK_THRESHOLD`]
    pub kink_excluded: bool,
}

/// Compares tape gradients of a scalar-valued builder against central
/// differences at `points`. The builder is re-invoked on fresh tapes for
/// every probe, so it must be deterministic in its inputs.
pub fn finite_difference_check<F>(build: F, points: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Val]) -> Result<Val>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let vals: Vec<Val> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vals)?;
        if tape.data(out).len() != 1 {
            return Err(Error::Shape {
                op: "finite_difference_check",
                lhs: format!("{:?}", tape.dims(out)),
                rhs: "scalar output required".into(),
            });
        }
        let y = tape.data(out)[0];
        if !y.is_finite() {
            return Err(Error::NonFinite("finite_difference_check probe"));
        }
        Ok((y, tape.min_abs_relu_input()))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let grad_points: Vec<Tensor> = points.iter().map(|t| t.clone().with_grad(true)).collect();
    let vals: Vec<Val> = grad_points.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vals)?;
    if tape.data(out).len() != 1 {
        return Err(Error::Shape {
            op: "finite_difference_check",
            lhs: format!("{:?}", tape.dims(out)),
            rhs: "scalar output required".into(),
        });
    }
    if !tape.data(out)[0].is_finite() {
        return Err(Error::NonFinite("finite_difference_check center"));
    }
    tape.backward(out)?;
    let kink_excluded = tape.min_abs_relu_input() <= KINK_THRESHOLD;
    let analytic: Vec<Vec<f64>> = vals
        .iter()
        .map(|v| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut kink = kink_excluded;
    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.len() {
            let mut plus: Vec<Tensor> = points.to_vec();
            plus[pi].data_mut()[ci] += h;
            let mut minus: Vec<Tensor> = points.to_vec();
            minus[pi].data_mut()[ci] -= h;
            let (yp, kp) = eval(&plus)?;
            let (ym, km) = eval(&minus)?;
            kink |= kp <= KINK_THRESHOLD || km <= KINK_THRESHOLD;
            let central = (yp - ym) / (2.0 * h);
            let rel = (analytic[pi][ci] - central).abs() / central.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
        }
    }
    Ok(GradReport {
        max_rel_err,
        kink_excluded: kink,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_near_exact() {
        let point = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = finite_difference_check(
            |tape, vals| {
                let s = tape.scale(vals[0], 3.5)?;
                Ok(tape.sum_all(s))
            },
            &[point],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
        assert!(!report.kink_excluded);
    }

    #[test]
    fn softmax_then_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let point = Tensor::new(vec![2, 3], data).unwrap();
        let report = finite_difference_check(
            |tape, vals| {
                let s = tape.softmax_axis(vals[0], 1)?;
                let sq = tape.square(s)?;
                Ok(tape.sum_all(sq))
            },
            &[point],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn relu_kink_is_flagged_not_failed() {
        let point = Tensor::new(vec![2], vec![1e-6, 0.5]).unwrap();
        let report = finite_difference_check(
            |tape, vals| {
                let r = tape.relu(vals[0])?;
                Ok(tape.sum_all(r))
            },
            &[point],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.kink_excluded);
    }

    #[test]
    fn composed_pipeline_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let report = finite_difference_check(
            |tape, vals| {
                let h = tape.matmul(vals[0], vals[1])?;
                let a = tape.tanh(h)?;
                let s = tape.softmax_axis(a, 1)?;
                let sq = tape.square(s)?;
                Ok(tape.mean_all(sq))
            },
            &[x, w],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }
}
