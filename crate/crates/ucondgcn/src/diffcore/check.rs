use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// `f` receives a fresh tape and the leaf holding the current point and must
/// return a scalar output on that tape. Returns the maximum over coordinates
/// of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if !point.is_finite() {
        return Err(Error::NonFinite("finite_diff_check point".into()));
    }

    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(point.shape(), data.to_vec())?);
        let out = f(&mut tape, leaf)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Shape {
                op: "finite_diff_check",
                detail: format!("function output must be scalar, got {:?}", tape.shape(out)),
            });
        }
        let y = tape.value(out).item();
        if !y.is_finite() {
            return Err(Error::NonFinite("finite_diff_check function value".into()));
        }
        Ok(y)
    };

    // Analytic gradient at the point.
    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(point.shape(), point.data().to_vec())?.with_grad());
        let out = f(&mut tape, leaf)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Shape {
                op: "finite_diff_check",
                detail: format!("function output must be scalar, got {:?}", tape.shape(out)),
            });
        }
        let grads = tape.backward(out)?;
        grads.grad_or_zero(leaf, point.numel())
    };
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("finite_diff_check analytic gradient".into()));
    }

    let mut worst = 0.0f64;
    let mut probe = point.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = eval(&probe)?;
        probe[i] = orig - epsilon;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_check numeric gradient at coordinate {i}"
            )));
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
