//! Central finite-difference gradient verification.
//!
//! Compares an analytic gradient against `(f(θ+h·e) − f(θ−h·e)) / 2h` on a
//! deterministic sample of indices per parameter group and reports the worst
//! relative error per group. Comparisons where both sides sit below the
//! round-off floor of the difference quotient count as exact: such entries
//! (for instance attention key biases, which softmax shift-invariance zeroes
//! analytically) carry no signal either way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::params::ParamVec;

#[derive(Debug, Clone)]
pub struct FdGroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub groups: Vec<FdGroupReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl FdReport {
    pub fn worst_group(&self) -> Option<&FdGroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Check `analytic_grad` against central differences of `loss` at `params`.
///
/// `samples_per_group` limits how many indices of each named group are
/// probed (all of them when the group is smaller). Pass/fail is
/// `max_rel_error < tolerance` across every group.
pub fn finite_difference_check<L>(
    mut loss: L,
    analytic_grad: &ParamVec<f64>,
    params: &ParamVec<f64>,
    step: f64,
    tolerance: f64,
    samples_per_group: usize,
    seed: u64,
) -> FdReport
where
    L: FnMut(&ParamVec<f64>) -> f64,
{
    let f0 = loss(params);
    // Round-off floor of the central difference quotient.
    let zero_floor = 1e-7 * (1.0 + f0.abs());

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let mut max_rel_error = 0.0f64;
    for entry in params.layout().entries() {
        let len = entry.len();
        let indices: Vec<usize> = if len <= samples_per_group {
            (0..len).collect()
        } else {
            (0..samples_per_group)
                .map(|_| rng.gen_range(0..len))
                .collect()
        };
        let mut group_max = 0.0f64;
        for &k in &indices {
            let idx = entry.offset + k;
            let mut plus = params.clone();
            plus.data_mut()[idx] += step;
            let mut minus = params.clone();
            minus.data_mut()[idx] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let an = analytic_grad.data()[idx];
            let denom = fd.abs().max(an.abs());
            let rel = if denom < zero_floor {
                0.0
            } else {
                (fd - an).abs() / denom
            };
            group_max = group_max.max(rel);
        }
        max_rel_error = max_rel_error.max(group_max);
        groups.push(FdGroupReport {
            name: entry.name.clone(),
            max_rel_error: group_max,
            checked: indices.len(),
        });
    }
    FdReport {
        groups,
        max_rel_error,
        tolerance,
        pass: max_rel_error < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamLayout;
    use std::sync::Arc;

    fn quadratic_setup() -> (ParamVec<f64>, ParamVec<f64>) {
        let layout = Arc::new(ParamLayout::new(vec![
            ("a".into(), vec![3]),
            ("b".into(), vec![2, 2]),
        ]));
        let mut params = ParamVec::<f64>::zeros(Arc::clone(&layout));
        for (i, v) in params.data_mut().iter_mut().enumerate() {
            *v = 0.1 * (i as f64) - 0.3;
        }
        // f = sum c_i (x_i - 0.2)^2 with c_i = 1 + i/10; exact gradient.
        let mut grad = ParamVec::<f64>::zeros(layout);
        for (i, (g, x)) in grad
            .data_mut()
            .iter_mut()
            .zip(params.data().iter())
            .enumerate()
        {
            let c = 1.0 + i as f64 / 10.0;
            *g = 2.0 * c * (x - 0.2);
        }
        (params, grad)
    }

    fn quadratic(p: &ParamVec<f64>) -> f64 {
        p.data()
            .iter()
            .enumerate()
            .map(|(i, x)| (1.0 + i as f64 / 10.0) * (x - 0.2) * (x - 0.2))
            .sum()
    }

    #[test]
    fn quadratic_function_is_exact() {
        let (params, grad) = quadratic_setup();
        let report = finite_difference_check(quadratic, &grad, &params, 1e-5, 1e-10, 16, 0);
        assert!(report.pass, "max rel error {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-10);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (params, grad) = quadratic_setup();
        let mut doubled = grad.clone();
        for v in doubled.data_mut().iter_mut() {
            *v *= 2.0;
        }
        let report = finite_difference_check(quadratic, &doubled, &params, 1e-5, 1e-3, 16, 0);
        assert!(!report.pass);
        assert!(report.max_rel_error > 0.4);
    }
}
