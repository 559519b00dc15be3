use super::{Graph, Tensor, Var};
use crate::error::{Result, SmdtError};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares tape gradients against central differences for every coordinate of
/// every input.
///
/// `f` receives a fresh evaluation-mode graph and the input leaves, and must
/// return a scalar. Relative error per coordinate is
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_difference_check_with(Graph::eval, f, inputs, epsilon)
}

/// [`finite_difference_check`] on graphs made by `make_graph`, e.g. a
/// training-mode graph with dropout disabled.
pub fn finite_difference_check_with<M, F>(make_graph: M, f: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    M: Fn() -> Graph,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(SmdtError::InvalidArgument(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut g = make_graph();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    let mut g = make_graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.scalar_value(out);
    if evaluate(inputs)?.to_bits() != base.to_bits() {
        return Err(SmdtError::InvalidArgument(
            "function under check is not deterministic".into(),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for i in 0..probe.len() {
        for c in 0..probe[i].numel() {
            let original = probe[i].data()[c];
            probe[i].data_mut()[c] = original + epsilon;
            let plus = evaluate(&probe)?;
            probe[i].data_mut()[c] = original - epsilon;
            let minus = evaluate(&probe)?;
            probe[i].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic[i][c];
            let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 3.5]).unwrap();
        let report = finite_difference_check(
            |g, v| {
                let y = g.scale(v[0], 3.0);
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-10, "{report:?}");
        assert_eq!(report.coordinates, 4);
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let x = Tensor::scalar(1.0);
        let r = finite_difference_check(|g, v| Ok(g.sum(v[0])), &[x], 0.0);
        assert!(matches!(r, Err(SmdtError::InvalidArgument(_))));
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let r = finite_difference_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let y = g.scale(v[0], calls.get());
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
        );
        assert!(r.is_err());
    }
}
