//! Central finite differences over f64 functions.

/// d/dx_i f(x) ≈ (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h
pub fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Central difference of the reference model loss w.r.t. one parameter
/// coordinate.
pub fn central_diff(
    model: &crate::model::ReferenceModel,
    batch: &crate::model::RefBatch,
    name: &str,
    index: usize,
    h: f64,
) -> f64 {
    let plus = model.perturbed(name, index, h);
    let minus = model.perturbed(name, index, -h);
    (plus.loss(batch) - minus.loss(batch)) / (2.0 * h)
}

/// Relative error with a symmetric denominator; `floor` guards the
/// comparison of near-zero gradients.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
