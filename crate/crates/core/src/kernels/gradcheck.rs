//! Reverse-mode gradients versus central finite differences.

use crate::autodiff::{Tape, Var};
use crate::error::{ensure_shape, Result};
use crate::tensor::Tensor;

/// Relative finite-difference step: `h = STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-4;

/// Entries whose ±h, ±2h probes straddle a branch change of a piecewise op
/// (a kink) are skipped; a check fails if more than this share is skipped.
pub const MAX_KINK_FRACTION: f64 = 0.05;

/// Denominator floor for the relative error, so entries whose true
/// gradient is zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Entries skipped because the central difference straddles a kink.
    pub kinks: usize,
    pub non_finite: bool,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite
            && self.max_rel_error < self.tol
            && (self.kinks as f64) <= MAX_KINK_FRACTION * (self.checked + self.kinks) as f64
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.record_branches();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    ensure_shape!(tape.value(out).numel() == 1, "grad_check needs a scalar-valued function");
    Ok((tape.value(out).data()[0], tape.branch_signature()))
}

/// Checks `func`'s reverse-mode gradient with respect to every element of
/// every input. `func` must return a scalar.
///
/// Entries whose probes fall on a different smooth piece than `x` are
/// counted in `kinks` instead of being scored.
///
/// A non-finite analytic or numeric gradient is reported through
/// `non_finite` rather than as an error.
pub fn grad_check<F>(func: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.record_branches();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = func(&mut tape, &vars)?;
    ensure_shape!(tape.value(out).numel() == 1, "grad_check needs a scalar-valued function");
    let grads = tape.backward(out)?;
    let base = tape.branch_signature();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinks: 0,
        non_finite: false,
        tol,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            let h = STEP * x0.abs().max(1.0);
            let mut f = [0.0; 4];
            let mut on_kink = false;
            for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                probe[k].data_mut()[i] = x0 + offset * h;
                let (v, sig) = eval(&func, &probe)?;
                f[slot] = v;
                on_kink |= sig != base;
            }
            probe[k].data_mut()[i] = x0;
            if on_kink {
                report.kinks += 1;
                continue;
            }

            // fourth-order central difference
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
            let a = analytic.data()[i];
            report.checked += 1;
            if !a.is_finite() || !numeric.is_finite() {
                report.non_finite = true;
                report.max_rel_error = f64::INFINITY;
                report.worst = Some((k, i));
                report.analytic = a;
                report.numeric = numeric;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((k, i));
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

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let r = grad_check(
            |t, v| {
                let s = t.scale(v[0], 3.0);
                Ok(t.sum(s))
            },
            &[x],
            1e-9,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly zero: analytic subgradient 0, numeric 0.5
        let x = Tensor::zeros(&[1]);
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn wrong_backward_is_caught() {
        let x = Tensor::from_fn(&[3], |i| i as f64 + 0.5);
        let r = grad_check(
            |t, v| {
                let sq = t.value(v[0]).map(|a| a * a);
                // d(x²)/dx is 2x; this backward claims 3x
                let y = t.push(sq, &[v[0]], |ins, _, g| vec![Some(g.zip_map(ins[0], |g, x| 3.0 * g * x).unwrap())]);
                Ok(t.sum(y))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn kinks_are_skipped_and_bounded() {
        // x = 1e-5 sits within h of the rectifier's kink
        let x = Tensor::new(&[2], vec![1e-5, 0.7]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            std::slice::from_ref(&x),
            1e-4,
        )
        .unwrap();
        assert_eq!((r.checked, r.kinks), (1, 1));
        assert!(r.max_rel_error < 1e-9);
        assert!(!r.passed(), "half the entries on a kink must fail");
        let many = Tensor::from_fn(&[40], |i| if i == 0 { 1e-5 } else { 0.1 + i as f64 });
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[many],
            1e-4,
        )
        .unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.passed());
    }

    #[test]
    fn non_finite_is_reported_not_raised() {
        let x = Tensor::zeros(&[1]);
        let r = grad_check(
            |t, v| {
                let y = t.log_clamped(v[0], -1.0);
                Ok(t.sum(y))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(r.non_finite);
        assert!(!r.passed());
    }
}
