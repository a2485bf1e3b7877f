//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// A single parameter coordinate: tensor index and flat element index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation the loss function rejected (for
    /// example because it crossed a top-k tie).
    pub skipped: usize,
    pub worst: Option<(Coord, f64, f64)>,
    /// Per checked tensor: `max |analytic − numeric| / max |numeric|` over
    /// its checked coordinates.
    pub tensor_rel_errors: Vec<(usize, f64)>,
}

impl GradCheckReport {
    /// Largest normwise (infinity-norm) relative error over tensors.
    pub fn max_tensor_rel_error(&self) -> f64 {
        self.tensor_rel_errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Up to `per_tensor` distinct coordinates from every tensor.
pub fn sample_coords<T: Float>(params: &[Tensor<T>], per_tensor: usize, seed: u64) -> Vec<Coord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (t, p) in params.iter().enumerate() {
        let n = p.numel();
        let take = per_tensor.min(n);
        let mut picked: Vec<usize> = sample(&mut rng, n, take).into_vec();
        picked.sort_unstable();
        coords.extend(picked.into_iter().map(|index| Coord { tensor: t, index }));
    }
    coords
}

/// Compares the gradients stored on `params` against the five-point
/// difference `(f(θ−2h) − 8f(θ−h) + 8f(θ+h) − f(θ+2h)) / 12h` with `h = eps`
/// at each coordinate and returns the maximum relative error.
///
/// `loss_fn` may return `Ok(None)` to reject a perturbed evaluation; such
/// coordinates are counted as skipped. The baseline is evaluated twice and
/// must agree bitwise.
pub fn finite_diff_check<T, F>(
    params: &mut [Tensor<T>],
    coords: &[Coord],
    eps: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Float,
    F: FnMut(&[Tensor<T>]) -> Result<Option<f64>>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let first = loss_fn(params)?;
    let second = loss_fn(params)?;
    match (first, second) {
        (Some(a), Some(b)) if a.to_bits() == b.to_bits() => {}
        (a, b) => {
            return Err(Error::NonDeterministic {
                first: a.unwrap_or(f64::NAN),
                second: b.unwrap_or(f64::NAN),
            })
        }
    }

    let mut report = GradCheckReport::default();
    // tensor -> (max abs diff, max |numeric|)
    let mut norms: std::collections::BTreeMap<usize, (f64, f64)> = Default::default();
    for &c in coords {
        let analytic = params[c.tensor].grad().map(|g| g[c.index].as_f64()).unwrap_or(0.0);
        let orig = params[c.tensor].data()[c.index];
        let mut f = [0.0; 4];
        let mut rejected = false;
        for (slot, step) in f.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
            params[c.tensor].data_mut()[c.index] = T::lit(orig.as_f64() + step * eps);
            let v = loss_fn(params);
            params[c.tensor].data_mut()[c.index] = orig;
            match v? {
                Some(v) => *slot = v,
                None => rejected = true,
            }
        }
        if rejected {
            report.skipped += 1;
            continue;
        }
        let numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        let n = norms.entry(c.tensor).or_insert((0.0, 0.0));
        n.0 = n.0.max((analytic - numeric).abs());
        n.1 = n.1.max(numeric.abs());
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((c, analytic, numeric));
        }
    }
    report.tensor_rel_errors = norms
        .into_iter()
        .map(|(t, (diff, scale))| (t, diff / scale.max(REL_ERROR_FLOOR)))
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        // f(x) = sum(x_i^2) + 3 x_0 x_1, analytic grad known in closed form.
        let x = [0.7, -1.3, 2.1];
        let grad = vec![2.0 * x[0] + 3.0 * x[1], 2.0 * x[1] + 3.0 * x[0], 2.0 * x[2]];
        let mut t = Tensor::<f64>::from_f64(vec![3], &x).unwrap();
        t.set_grad(grad).unwrap();
        let mut params = vec![t];
        let coords = sample_coords(&params, 3, 0);
        let report = finite_diff_check(&mut params, &coords, 1e-4, |p| {
            let d = p[0].data();
            Ok(Some(d.iter().map(|v| v * v).sum::<f64>() + 3.0 * d[0] * d[1]))
        })
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert!(report.max_tensor_rel_error() < 1e-6);
    }

    #[test]
    fn normwise_error_is_relative_to_tensor_scale() {
        // Gradients (1, 0); the analytic value is off by 1e-7 at the zero.
        let mut t = Tensor::<f64>::from_f64(vec![2], &[0.5, 0.0]).unwrap();
        t.set_grad(vec![1.0, 1e-7]).unwrap();
        let mut params = vec![t];
        let coords = sample_coords(&params, 2, 0);
        let report = finite_diff_check(&mut params, &coords, 1e-3, |p| Ok(Some(p[0].data()[0]))).unwrap();
        assert!(report.max_rel_error > 1.0 - 1e-9);
        assert!((report.max_tensor_rel_error() - 1e-7).abs() < 1e-9);
    }

    #[test]
    fn unused_parameter_has_zero_gradient_both_ways() {
        let mut used = Tensor::<f64>::from_f64(vec![1], &[2.0]).unwrap();
        used.set_grad(vec![4.0]).unwrap();
        let mut unused = Tensor::<f64>::from_f64(vec![1], &[5.0]).unwrap();
        unused.set_grad(vec![0.0]).unwrap();
        let mut params = vec![used, unused];
        let coords = [Coord { tensor: 1, index: 0 }];
        let report = finite_diff_check(&mut params, &coords, 1e-4, |p| {
            let v = p[0].data()[0];
            Ok(Some(v * v))
        })
        .unwrap();
        let (_, analytic, numeric) = report.worst.unwrap();
        assert_eq!(analytic, 0.0);
        assert_eq!(numeric, 0.0);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let mut params = vec![Tensor::<f64>::zeros(vec![1])];
        let mut calls = 0.0;
        let err = finite_diff_check(&mut params, &[], 1e-4, |_| {
            calls += 1.0;
            Ok(Some(calls))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn rejected_perturbations_are_skipped() {
        let mut t = Tensor::<f64>::zeros(vec![2]);
        t.set_grad(vec![0.0, 0.0]).unwrap();
        let mut params = vec![t];
        let coords = sample_coords(&params, 2, 1);
        let report = finite_diff_check(&mut params, &coords, 1e-3, |p| {
            Ok(if p[0].data()[0] == 0.0 { Some(0.0) } else { None })
        })
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
    }
}
