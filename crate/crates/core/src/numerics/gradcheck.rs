//! Central finite differences for gradient verification. This path only ever
//! evaluates forward passes, so it is independent of the reverse-mode code it
//! is used to check.

use ndarray::ArrayD;

use super::{Result, Scalar};

/// Gradient of `f` at `parameters` by central differences with step `h`,
/// one forward pair per element.
pub fn finite_difference_gradient<T: Scalar>(
    parameters: &[ArrayD<T>],
    h: f64,
    mut f: impl FnMut(&[ArrayD<T>]) -> Result<T>,
) -> Result<Vec<ArrayD<T>>> {
    let mut grads = Vec::with_capacity(parameters.len());
    let mut work: Vec<ArrayD<T>> = parameters.to_vec();
    let step = T::from_f64(h);
    let two_h = T::from_f64(2.0 * h);
    for pi in 0..parameters.len() {
        let mut grad = ArrayD::zeros(parameters[pi].raw_dim());
        for idx in 0..parameters[pi].len() {
            let orig = parameters[pi].as_slice().unwrap()[idx];
            work[pi].as_slice_mut().unwrap()[idx] = orig + step;
            let plus = f(&work)?;
            work[pi].as_slice_mut().unwrap()[idx] = orig - step;
            let minus = f(&work)?;
            work[pi].as_slice_mut().unwrap()[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (plus - minus) / two_h;
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Central-difference directional derivative of `f` along `direction`.
pub fn directional_derivative<T: Scalar>(
    parameters: &[ArrayD<T>],
    direction: &[ArrayD<T>],
    h: f64,
    mut f: impl FnMut(&[ArrayD<T>]) -> Result<T>,
) -> Result<T> {
    let step = T::from_f64(h);
    let shifted = |sign: T| -> Vec<ArrayD<T>> {
        parameters
            .iter()
            .zip(direction)
            .map(|(p, d)| p + &d.mapv(|x| x * sign * step))
            .collect()
    };
    let plus = f(&shifted(T::one()))?;
    let minus = f(&shifted(-T::one()))?;
    Ok((plus - minus) / T::from_f64(2.0 * h))
}

/// Norm-level relative error between two gradient sets:
/// `|a - b| / (|a| + |b| + tiny)` over the concatenation of all elements.
pub fn relative_error<T: Scalar>(a: &[ArrayD<T>], b: &[ArrayD<T>]) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (ga, gb) in a.iter().zip(b) {
        for (&xa, &xb) in ga.iter().zip(gb.iter()) {
            let (xa, xb) = (xa.as_f64(), xb.as_f64());
            diff += (xa - xb) * (xa - xb);
            na += xa * xa;
            nb += xb * xb;
        }
    }
    diff.sqrt() / (na.sqrt() + nb.sqrt() + 1e-30)
}
