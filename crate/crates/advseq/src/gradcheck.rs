//! Central finite-difference gradient checking.
//!
//! The checker only re-runs a scalar-valued closure at perturbed inputs, so
//! it is independent of the reverse-mode path it is used to validate.

/// Central differences with step `eps` for a scalar function of a flat
/// parameter vector.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + eps;
        let fp = f(&x);
        x[i] = point[i] - eps;
        let fm = f(&x);
        x[i] = point[i];
        grads.push((fp - fm) / (2.0 * eps));
    }
    grads
}

/// Worst per-coordinate relative error between two gradient vectors.
///
/// A coordinate passes on relative terms when `|a-b| <= rel * max(|a|,|b|)`;
/// coordinates where both magnitudes sit under `abs_floor` are treated as
/// matching zeros (central differences carry ~1e-11 of roundoff noise at
/// step 1e-5, which would otherwise dominate vanishing entries).
pub fn max_rel_error(a: &[f64], b: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut worst: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let diff = (x - y).abs();
        if diff <= abs_floor {
            continue;
        }
        worst = worst.max(diff / x.abs().max(y.abs()).max(abs_floor));
    }
    worst
}

/// Relative L2 distance between gradient vectors, with a floor for the
/// all-zero case.
pub fn rel_l2_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1];
        let g = finite_diff_grad(&mut f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_ignores_matching_zeros() {
        let a = [0.0, 1.0];
        let b = [1e-12, 1.0 + 1e-9];
        assert!(max_rel_error(&a, &b, 1e-8) < 1e-4);
    }
}
