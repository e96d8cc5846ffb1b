//! Derivative-free one-dimensional minimization.

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Golden-section search for a minimum of `f` on `[a, b]`.
///
/// Stops once the bracket is narrower than `tol` or after `max_evals`
/// evaluations. For a unimodal `f` the returned point is within `tol` of the
/// minimizer; otherwise it is a local minimum of the sampled points.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64, max_evals: usize) -> Minimum {
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut evals = 2;

    while (b - a) > tol && evals < max_evals {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
        evals += 1;
    }

    let (x, value) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    Minimum { x, value, evaluations: evals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_parabola_minimum() {
        let m = golden_section(|x| (x - 0.3).powi(2), 0.0, 1.0, 1e-9, 200);
        assert!((m.x - 0.3).abs() < 1e-8);
        assert!(m.value < 1e-16);
    }

    #[test]
    fn boundary_minimum() {
        let m = golden_section(|x| x, 0.0, 1.0, 1e-6, 200);
        assert!(m.x < 1e-5);
        let m = golden_section(|x| -x, 1.0, 0.0, 1e-6, 200);
        assert!(m.x > 1.0 - 1e-5);
    }

    #[test]
    fn respects_evaluation_budget() {
        let mut calls = 0;
        let m = golden_section(
            |x| {
                calls += 1;
                (x - 0.7).abs()
            },
            0.0,
            1.0,
            0.0,
            25,
        );
        assert_eq!(calls, 25);
        assert_eq!(m.evaluations, 25);
        assert!((m.x - 0.7).abs() < 1e-3);
    }
}
