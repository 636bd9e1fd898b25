//! Central finite-difference verification of tape gradients.

use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so entries whose true gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `build`'s scalar output against central
/// differences `(f(θ+eps) - f(θ-eps)) / 2eps` for every entry of every
/// trainable parameter in `ids`.
///
/// Stop-gradient outputs are recorded on the baseline pass and replayed on
/// perturbed passes, so blocked edges are held constant on both sides of the
/// comparison.
pub fn finite_difference_check<T, F>(
    params: &mut ParamSet<T>,
    ids: &[ParamId],
    eps: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Tape<'_, T>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_difference_check", "eps must be positive"));
    }

    let (baseline, analytic, stops) = {
        let mut tape = Tape::with_params(&*params);
        let loss = build(&mut tape)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Option<Vec<T>>> = ids
            .iter()
            .map(|&id| grads.param(id).map(<[T]>::to_vec))
            .collect();
        (tape.scalar(loss), analytic, tape.take_stop_record())
    };
    let again = {
        let mut tape = Tape::with_params(&*params);
        let loss = build(&mut tape)?;
        tape.scalar(loss)
    };
    if baseline.as_f64().to_bits() != again.as_f64().to_bits() {
        return Err(Error::NonDeterministic {
            first: baseline.as_f64(),
            second: again.as_f64(),
        });
    }

    let mut eval = |params: &ParamSet<T>| -> Result<f64> {
        let mut tape = Tape::with_params(params);
        tape.replay_stops(stops.clone());
        let loss = build(&mut tape)?;
        Ok(tape.scalar(loss).as_f64())
    };

    let step = T::of(eps);
    let mut report = GradCheckReport::default();
    for (&id, analytic) in ids.iter().zip(&analytic) {
        if !params.get(id).trainable {
            continue;
        }
        let numel = params.tensor(id).numel();
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for i in 0..numel {
            let orig = params.tensor(id).data()[i];
            params.tensor_mut(id).data_mut()[i] = orig + step;
            let plus = eval(params)?;
            params.tensor_mut(id).data_mut()[i] = orig - step;
            let minus = eval(params)?;
            params.tensor_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[i].as_f64());
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error || i == 0 {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let mut params = ParamSet::<f64>::new();
        let x = params.add("x", Tensor::vector(vec![1.0, 2.0]), true);
        let report = finite_difference_check(&mut params, &[x], 1e-5, |tape| {
            let v = tape.param(x);
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
        let mut tape = Tape::with_params(&params);
        let v = tape.param(x);
        let sq = tape.mul(v, v).unwrap();
        let l = tape.sum(sq);
        assert_eq!(tape.backward(l).unwrap().param(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn blocked_parameter_is_zero_on_both_sides() {
        let mut params = ParamSet::<f64>::new();
        let x = params.add("x", Tensor::vector(vec![0.7, -1.3]), true);
        let y = params.add("y", Tensor::vector(vec![2.0, 0.5]), true);
        let report = finite_difference_check(&mut params, &[x, y], 1e-5, |tape| {
            let xv = tape.param(x);
            let yv = tape.param(y);
            let sx = tape.stop_gradient(xv);
            let p = tape.mul(sx, yv)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        let xs = &report.params[0];
        assert!(xs.analytic_at_worst == 0.0 && xs.numeric_at_worst.abs() < 1e-9);
        assert!(xs.max_abs_error < 1e-9);
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn nondeterministic_builder_rejected() {
        let mut params = ParamSet::<f64>::new();
        let x = params.add("x", Tensor::vector(vec![1.0]), true);
        let calls = Cell::new(0.0);
        let err = finite_difference_check(&mut params, &[x], 1e-5, |tape| {
            calls.set(calls.get() + 1.0);
            let v = tape.param(x);
            let c = tape.constant_vec(vec![calls.get()]);
            let p = tape.mul(v, c)?;
            Ok(tape.sum(p))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn non_positive_eps_rejected() {
        let mut params = ParamSet::<f64>::new();
        let x = params.add("x", Tensor::vector(vec![1.0]), true);
        assert!(finite_difference_check(&mut params, &[x], 0.0, |tape| {
            let v = tape.param(x);
            Ok(tape.sum(v))
        })
        .is_err());
    }
}
