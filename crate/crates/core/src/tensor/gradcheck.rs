//! Central finite-difference verification of tape gradients (f64).

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative-error denominator floor, so near-zero gradients are judged on
/// absolute error instead of amplifying rounding noise.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against
/// central differences with step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.of(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(a, numeric);
            report.checked += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn matmul_gradient_matches_differences() {
        let mut r = rng::seeded(11);
        let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r);
        let b = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![3, 2], 1.0, &mut r);
        let rep = check(&[a, b, w], 1e-5, |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let q = t.mul(p, v[2])?;
            Ok(t.sum(q))
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
        assert_eq!(rep.checked, 12 + 8 + 6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // straight_through deliberately disagrees with the true derivative of its value
        let x = Tensor::<f64>::from_f64(vec![2], &[0.3, -0.7]).unwrap();
        let rep = check(&[x], 1e-5, |t, v| {
            let sq = t.square(v[0]);
            let fake = t.straight_through(v[0], sq)?;
            Ok(t.sum(fake))
        })
        .unwrap();
        assert!(!rep.passes(1e-4));
    }
}
