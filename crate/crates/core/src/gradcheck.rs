//! Central finite-difference gradient checker.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Compares the tape's gradient of the scalar `f` against central differences
/// for every entry of every input and returns the worst relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[idx] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[which].data()[idx];
            let err = relative_error(a, numeric);
            if !err.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at input {which} entry {idx}: analytic {a}, numeric {numeric}"
                )));
            }
            report.entries += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = SplitMix64::new(1);
        let w = random(&mut rng, &[3, 2]);
        let x = random(&mut rng, &[1, 3]);
        let report = grad_check(
            |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                Ok(tape.sum(y))
            },
            &[x, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.entries, 9);
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let mut rng = SplitMix64::new(2);
        let x = random(&mut rng, &[2, 3]);
        // cube with a deliberately wrong derivative (2x instead of 3x²)
        let report = grad_check(
            |tape, v| {
                let value = tape.value(v[0]).map(|x| x * x * x);
                let y = tape.custom(
                    &[v[0]],
                    value,
                    Box::new(|g, inputs, _| vec![g.zip_map(inputs[0], "cube", |g, x| g * 2.0 * x).unwrap()]),
                );
                Ok(tape.sum(y))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        let mut rng = SplitMix64::new(3);
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3, 3]);
        // a feeds both a matmul and an elementwise product with itself
        let report = grad_check(
            |tape, v| {
                let m = tape.matmul(v[0], v[1])?;
                let sq = tape.mul(v[0], v[0])?;
                let s = tape.add(m, sq)?;
                let t = tape.softmax_rows(s)?;
                let w = tape.mul(t, m)?;
                Ok(tape.sum(w))
            },
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
