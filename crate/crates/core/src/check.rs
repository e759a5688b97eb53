//! Shared numerical comparison helpers used by the verification suites and
//! the test code: central finite differences and norm-wise relative error.

use ndarray::Array1;

/// Central-difference gradient of a scalar function of a flat vector.
pub fn central_diff_grad(
    f: impl Fn(&Array1<f64>) -> f64,
    x: &Array1<f64>,
    eps: f64,
) -> Array1<f64> {
    let mut out = Array1::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        out[i] = (fp - fm) / (2.0 * eps);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, with 0 when both vectors are negligible.
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err_norm length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        return 0.0;
    }
    diff / denom
}

pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
