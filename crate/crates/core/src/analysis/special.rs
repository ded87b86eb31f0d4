//! Complementary error function and its inverse.

use crate::error::{Error, Result};

/// `erfc(x) = 1 - erf(x)`.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Inverse of [`erfc`] on `(0, 2)`: a rational-approximation start point
/// polished by Newton steps against [`erfc`].
pub fn erfc_inv(y: f64) -> Result<f64> {
    if !(y > 0.0 && y < 2.0) {
        return Err(Error::Domain {
            function: "erfc_inv",
            detail: format!("argument {y} outside (0, 2)"),
        });
    }
    let mut x = statrs::function::erf::erfc_inv(y);
    for _ in 0..3 {
        let slope = -2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp();
        if slope == 0.0 {
            break;
        }
        let step = (erfc(x) - y) / slope;
        x -= step;
        if step.abs() <= 1e-16 * x.abs() {
            break;
        }
    }
    Ok(x)
}
