use super::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub param: String,
    /// First dotted segment of the parameter name.
    pub module: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

/// Denominator floor of the relative error. Central differences at step
/// `1e-5` resolve a loss change of a few ulps, so coordinates whose gradient
/// is below this floor are compared with absolute tolerance `tol · floor`.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Compares the tape's analytic gradient of `f` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of `ids`. The relative
/// error uses `max(|a|, |b|, REL_ERR_FLOOR)` as denominator.
///
/// `f` records a forward pass on the given tape and returns the `1×1` loss.
pub fn finite_diff_check<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Matrix> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    numeric_check(store, ids, step, f, &analytic)
}

/// The numeric half of [`finite_diff_check`], against caller-supplied
/// analytic gradients (one matrix per id).
pub fn numeric_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    step: f64,
    mut f: F,
    analytic: &[Matrix],
) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if analytic.len() != ids.len() {
        return Err(Error::dim(
            "numeric_check",
            format!("{} gradients for {} parameters", analytic.len(), ids.len()),
        ));
    }
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        coordinates: 0,
        worst: None,
    };
    for (&id, grad) in ids.iter().zip(analytic) {
        let (rows, cols) = store.value(id).shape();
        if grad.shape() != (rows, cols) {
            return Err(Error::dim(
                "numeric_check",
                format!("gradient for {}", store.get(id).name),
            ));
        }
        for i in 0..rows * cols {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = original - step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                let name = store.get(id).name.clone();
                report.worst = Some(WorstCoordinate {
                    module: name.split('.').next().unwrap_or("").to_string(),
                    param: name,
                    row: i / cols,
                    col: i % cols,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let t = store.add("theta", Matrix::scalar(3.0));
        let r = finite_diff_check(&mut store, &[t], 1e-5, |tape, s| {
            let x = tape.param(s, t);
            tape.hadamard(x, x)
        })
        .unwrap();
        assert_eq!(store.grad(t).data(), &[6.0]);
        let w = r.worst.unwrap();
        assert!((w.numeric - 6.0).abs() < 1e-6);
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        let t = store.add("theta", Matrix::from_rows(&[[1.0, 2.0]]));
        let r = finite_diff_check(&mut store, &[t], 1e-5, |tape, s| {
            let _ = tape.param(s, t);
            Ok(tape.constant(Matrix::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!(r.coordinates, 2);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut store = ParamStore::new();
        let t = store.add("enc.theta", Matrix::scalar(3.0));
        let r = numeric_check(
            &mut store,
            &[t],
            1e-5,
            |tape, s| {
                let x = tape.param(s, t);
                tape.hadamard(x, x)
            },
            &[Matrix::scalar(5.0)],
        )
        .unwrap();
        assert!(r.max_rel_err > 0.1);
        assert_eq!(r.worst.unwrap().module, "enc");
    }
}
