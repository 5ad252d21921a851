use crate::error::{Error, Result};

/// Central-difference step used by [`hvp`]: `1e-3·max(1, ‖p‖∞)`.
pub fn finite_difference_step(params: &[f64]) -> f64 {
    let inf_norm = params.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1e-3 * inf_norm.max(1.0)
}

/// Hessian-vector product by central differences of the gradient:
/// `(∇L(p+εv) − ∇L(p−εv)) / 2ε`.
///
/// `grad` maps a parameter vector to the loss gradient at that point.
pub fn hvp<F>(grad: F, params: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: v.len(),
        });
    }
    if v.iter().all(|x| *x == 0.0) {
        return Ok(vec![0.0; v.len()]);
    }
    let eps = finite_difference_step(params);
    let shifted = |sign: f64| -> Result<Vec<f64>> {
        let p: Vec<f64> = params.iter().zip(v).map(|(p, d)| p + sign * eps * d).collect();
        let g = grad(&p)?;
        if g.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                actual: g.len(),
            });
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad} during hvp")));
        }
        Ok(g)
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}
