//! Central-difference verification of analytic gradients.

use crate::error::{DialError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck<T> {
    /// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_error: T,
    /// Coordinate where the maximum was reached.
    pub worst_index: usize,
}

fn eval_scalar<T: Scalar, F>(f: &F, x: &Tensor<T>, coord: Option<usize>) -> Result<T>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let v = g.value(out).sum();
    if !v.is_finite() {
        return Err(DialError::NumericFailure(match coord {
            Some(i) => format!("function is not finite when perturbing coordinate {i}"),
            None => "function is not finite at the base point".into(),
        }));
    }
    Ok(v)
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// `f` maps the recorded input to an output whose elements are summed into
/// the scalar being differentiated.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_scaled(f, x, eps, T::one())
}

/// [`grad_check`] with the analytic gradient multiplied by `analytic_scale`;
/// a scale other than one is a negative control that must fail.
pub fn grad_check_scaled<T, F>(f: F, x: &Tensor<T>, eps: f64, analytic_scale: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(DialError::invalid(format!(
            "finite-difference step {eps} outside [1e-6, 1e-2]"
        )));
    }
    eval_scalar(&f, x, None)?;
    let analytic = {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let out = f(&mut g, xv)?;
        let total = g.sum(out);
        let mut grads = g.backward(total)?;
        grads.take_or_zeros(xv, x.shape())
    };
    let h: T = lit(eps);
    let two_h = h + h;
    let mut worst = GradCheck {
        max_rel_error: T::zero(),
        worst_index: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval_scalar(&f, &probe, Some(i))?;
        probe.data_mut()[i] = orig - h;
        let down = eval_scalar(&f, &probe, Some(i))?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / two_h;
        let a = analytic.data()[i] * analytic_scale;
        let rel = (a - numeric).abs() / numeric.abs().max(T::one());
        if rel > worst.max_rel_error || rel.is_nan() {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
            };
        }
    }
    Ok(worst)
}
