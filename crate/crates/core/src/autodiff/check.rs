//! Central finite-difference oracle for gradient checks.

use super::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Threshold below which an analytic component is compared absolutely.
pub const ABS_FALLBACK: f64 = 1e-8;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn central_differences<T: Scalar>(f: impl Fn(&[T]) -> T, point: &[T], h: T) -> Vec<T> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (h + h)
        })
        .collect()
}

/// Largest per-coordinate discrepancy; relative where `|analytic| ≥ 1e-8`,
/// absolute otherwise.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> T {
    assert_eq!(analytic.len(), numeric.len());
    let floor = T::of(ABS_FALLBACK);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if a.abs() < floor {
                diff
            } else {
                diff / a.abs()
            }
        })
        .fold(T::zero(), T::max)
}

/// Compares a supplied analytic gradient of `f` at `point` with central
/// differences at step `h`.
pub fn finite_difference_check<T: Scalar>(
    f: impl Fn(&[T]) -> T,
    analytic: &[T],
    point: &[T],
    h: T,
) -> T {
    let numeric = central_differences(f, point, h);
    max_relative_error(analytic, &numeric)
}

/// Gradient check for a function written against the graph: each coordinate of
/// `point` is bound as a `1×1` leaf, the analytic gradient comes from
/// [`Graph::grad`], and the numeric one from forward evaluations only.
pub fn check_graph_fn<T: Scalar>(build: impl Fn(&Graph<T>, &[Var]) -> Var, point: &[T], h: T) -> T {
    let g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|&v| g.leaf(Tensor::scalar(v))).collect();
    let out = build(&g, &vars);
    let grads = g.grad(out, &vars, false).expect("scalar output");
    let analytic: Vec<T> = grads.iter().map(|&v| g.item(v)).collect();
    let eval = |x: &[T]| {
        let g = Graph::new();
        g.set_recording(false);
        let vars: Vec<Var> = x.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let out = build(&g, &vars);
        g.item(out)
    };
    finite_difference_check(eval, &analytic, point, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let point = [0.3, -1.7, 2.5, 10.0];
        let analytic: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        let err = finite_difference_check(
            |x: &[f64]| x.iter().map(|v| v * v).sum(),
            &analytic,
            &point,
            1e-4,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn absolute_fallback_for_tiny_components() {
        assert_eq!(max_relative_error(&[0.0, 2.0], &[1e-9, 2.0]), 1e-9);
        assert!((max_relative_error::<f64>(&[1.0], &[1.1]) - 0.1).abs() < 1e-12);
    }
}
