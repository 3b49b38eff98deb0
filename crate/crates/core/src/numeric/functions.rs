use crate::error::{Error, Result};

pub const DEFAULT_NORM_EPSILON: f64 = 1e-12;

fn check_finite(x: &[f32], what: &str) -> Result<()> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput(format!("NaN in {what}")));
    }
    Ok(())
}

/// Temperature softmax with max-subtraction.
pub fn softmax_t(scores: &[f32], tau: f32) -> Result<Vec<f32>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    check_finite(scores, "softmax scores")?;
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    let tau = f64::from(tau);
    let max = scores.iter().map(|&s| f64::from(s)).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| ((f64::from(s) - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / z) as f32).collect())
}

/// Stable `ln(1 + e^x)` for a single value.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: &[f32]) -> Result<Vec<f32>> {
    check_finite(x, "softplus input")?;
    Ok(x.iter().map(|&v| softplus_scalar(f64::from(v)) as f32).collect())
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    l2_normalize_eps(v, DEFAULT_NORM_EPSILON)
}

pub fn l2_normalize_eps(v: &[f32], epsilon: f64) -> Result<Vec<f32>> {
    check_finite(v, "vector")?;
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm <= epsilon {
        return Err(Error::DegenerateVector { norm, epsilon });
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}
