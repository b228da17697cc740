//! Central finite-difference verification of reverse-mode gradients.

use super::tape::{Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` above tolerance.
    pub failing_coordinates: Vec<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failing_coordinates.is_empty()
    }

    fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64, tol: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_relative_error {
            self.max_relative_error = err;
        }
        if err > tol {
            self.failing_coordinates.push((input, coord, analytic, numeric));
        }
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(contract_err!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        ));
    }
    Ok(t.data()[0])
}

/// Checks `f` with respect to every coordinate of every input tensor.
pub fn check_gradient<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(contract_err!("epsilon must be positive"));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for c in 0..inputs[k].numel() {
            let orig = inputs[k].data()[c];
            probe[k].data_mut()[c] = orig + epsilon;
            let fp = eval(&probe)?;
            probe[k].data_mut()[c] = orig - epsilon;
            let fm = eval(&probe)?;
            probe[k].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            report.record(k, c, analytic.data()[c], numeric, DEFAULT_TOLERANCE);
        }
    }
    Ok(report)
}

/// Checks a loss built from a parameter store against a sample of its
/// parameter coordinates.
///
/// `coords` lists `(param, flat index)` pairs; pass `None` to check every
/// coordinate of every parameter.
pub fn check_param_gradient<F>(
    store: &ParamStore,
    f: F,
    epsilon: f64,
    coords: Option<&[(ParamId, usize)]>,
) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(contract_err!("epsilon must be positive"));
    }
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Option<Tensor>> = vec![None; store.len()];
    for (p, t) in grads.param_grads() {
        analytic[p] = Some(t);
    }
    drop(g);

    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .iter()
                .flat_map(|(p, _, t)| (0..t.numel()).map(move |i| (p, i)))
                .collect();
            &all
        }
    };

    let mut probe = store.clone();
    let mut report = GradReport::default();
    for &(p, c) in coords {
        let orig = store.get(p).data()[c];
        probe.get_mut(p).data_mut()[c] = orig + epsilon;
        let fp = {
            let mut g = Graph::with_params(&probe);
            let out = f(&mut g)?;
            scalar_of(&g, out)?
        };
        probe.get_mut(p).data_mut()[c] = orig - epsilon;
        let fm = {
            let mut g = Graph::with_params(&probe);
            let out = f(&mut g)?;
            scalar_of(&g, out)?
        };
        probe.get_mut(p).data_mut()[c] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic[p].as_ref().map_or(0.0, |t| t.data()[c]);
        report.record(p, c, a, numeric, DEFAULT_TOLERANCE);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);

        let report = check_gradient(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn non_scalar_is_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = check_gradient(|g, v| Ok(g.scale(v[0], 2.0)), &[x], 1e-5);
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }
}
