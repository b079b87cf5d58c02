/// Result of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Errors are measured relative to `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

/// Checks `loss_fn`'s gradient at `point` against central differences.
///
/// Uses the fourth-order stencil `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`
/// with `h = eps * max(1, |x_i|)`. Its small truncation error permits steps
/// large enough that cancellation in a large summed loss does not swamp small
/// gradient entries. The caller keeps `point` at least `2h` away from kinks.
pub fn grad_check<F>(loss_fn: F, point: &[f64], eps: f64) -> GradCheck
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(point);
    assert_eq!(
        analytic.len(),
        point.len(),
        "gradient length must match the point"
    );
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let step = eps * point[i].abs().max(1.0);
        let mut at = |k: f64| {
            x[i] = point[i] + k * step;
            loss_fn(&x).0
        };
        let d = at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0);
        x[i] = point[i];
        numeric.push(d / (12.0 * step));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{bce, focal_loss, iou_hbb_loss, smooth_l1};

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| (x[0] * x[0] + 3.0 * x[1], vec![2.0 * x[0], 3.0]);
        let r = grad_check(f, &[1.5, -2.0], 1e-5);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        let r = grad_check(f, &[2.0], 1e-5);
        assert!(r.max_rel_error > 0.4);
        assert_eq!(r.worst_index, 0);
    }

    #[test]
    fn focal_at_half() {
        for y in [0.0, 1.0] {
            let f = |x: &[f64]| focal_loss(x, &[y], 0.3, 4.0, 1).unwrap();
            let r = grad_check(f, &[0.5], 1e-5);
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn bce_generic() {
        let f = |x: &[f64]| {
            let (v, d) = bce(x[0], 0.3).unwrap();
            (v, vec![d])
        };
        assert!(grad_check(f, &[0.62], 1e-6).max_rel_error < 1e-6);
    }

    #[test]
    fn iou_hbb_generic() {
        let target = [3.0, 4.0, 5.0, 2.0];
        let f = |x: &[f64]| {
            let (v, g) = iou_hbb_loss(&[x[0], x[1], x[2], x[3]], &target).unwrap();
            (v, g.to_vec())
        };
        let r = grad_check(f, &[2.5, 4.7, 6.1, 1.3], 1e-6);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn smooth_l1_minimum_has_zero_gradient() {
        let (_, g) = smooth_l1(&[1.25], &[1.25], 1.0).unwrap();
        assert_eq!(g, vec![0.0]);
        let f = |x: &[f64]| smooth_l1(x, &[1.25], 1.0).unwrap();
        let r = grad_check(f, &[1.25], 1e-6);
        assert_eq!(r.numeric[0], 0.0);
        assert_eq!(r.max_rel_error, 0.0);
    }
}
