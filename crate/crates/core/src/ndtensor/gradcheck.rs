//! Central-difference gradient oracle.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck<T> {
    /// `max_i |a_i − n_i| / (|a_i| + |n_i| + 1e-8)`.
    pub max_rel_error: T,
    /// Flat coordinate attaining `max_rel_error`.
    pub worst: usize,
    pub analytic: Tensor<T>,
    pub numeric: Tensor<T>,
}

/// Relative error used throughout the oracle.
pub fn rel_error<T: Scalar>(analytic: T, numeric: T) -> T {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + T::lit(1e-8))
}

/// Checks the gradient of the scalar function `f` at `x` with step `h`.
///
/// `f` receives a fresh graph and the leaf holding the (possibly perturbed)
/// input, and returns the scalar output node.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let eval = |x: Tensor<T>| -> Result<(Graph<T>, Var, Var)> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = f(&mut g, xv)?;
        Ok((g, xv, out))
    };

    let (g, xv, out) = eval(x.clone())?;
    let y0 = g.value(out).item().ok_or_else(|| {
        Error::contract(
            "grad_check",
            format!("function output has shape {:?}, expected a scalar", g.shape(out)),
        )
    })?;
    if !y0.is_finite() {
        return Err(Error::Oracle {
            coord: 0,
            value: y0.to_f64_lossy(),
        });
    }
    let analytic = g.backward(out)?.wrt(&g, xv);

    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut side = |v: T| -> Result<T> {
            probe.data_mut()[i] = v;
            let (g, _, out) = eval(probe.clone())?;
            let y = g.value(out).data()[0];
            if !y.is_finite() {
                return Err(Error::Oracle {
                    coord: i,
                    value: y.to_f64_lossy(),
                });
            }
            Ok(y)
        };
        let plus = side(orig + h)?;
        let minus = side(orig - h)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (plus - minus) / (h + h);
    }

    let (worst, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .enumerate()
        .fold((0, T::zero()), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
