//! Central finite differences for checking backward implementations.
//!
//! Only forward evaluations are used, so the check is independent of the
//! backward closures it validates.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Result of comparing analytic and numeric derivatives.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `(coordinate, analytic, numeric)` for each probed coordinate.
    pub probes: Vec<(usize, f64, f64)>,
}

impl GradCheck {
    /// `max |a - n| / max(|a|, |n|, floor)` over probes.
    pub fn max_relative_error(&self, floor: f64) -> f64 {
        self.probes
            .iter()
            .map(|&(_, a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Compare the gradient of scalar `f(x)` at `x` on the given coordinates.
pub fn check_gradient<F>(x: &Tensor, coords: &[usize], step: f64, f: F) -> GradCheck
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    let analytic = {
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(&g, v);
        g.backward(out).get_or_zeros(v)
    };
    let eval = |t: Tensor| {
        let g = Graph::new();
        let v = g.constant(t);
        f(&g, v).item()
    };
    let probes = coords
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * step);
            (i, analytic.data()[i], numeric)
        })
        .collect();
    GradCheck { probes }
}
