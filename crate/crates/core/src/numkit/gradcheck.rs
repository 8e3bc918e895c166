/// Central-difference gradient of `loss` at `params`:
/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate `i`.
///
/// `loss` must be deterministic; freeze dropout by reseeding inside it.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let up = loss(&p);
            p[i] = orig - step;
            let down = loss(&p);
            p[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Floor on the denominator of [`relative_error`]. Below it the comparison is
/// effectively absolute: central differences with step 1e-5 on an O(1) loss
/// carry ~1e-11 of rounding noise, so components smaller than this cannot be
/// resolved relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|w| w[0] * w[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }
}
