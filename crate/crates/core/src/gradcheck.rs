//! Central finite-difference checks of reverse-mode gradients.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error with a floor on the denominator, so components whose true
/// gradient is zero are judged on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst-case outcome of a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub components: usize,
    pub worst: f64,
    /// Input index, component index, analytic and numeric value of the
    /// worst component.
    pub at: (usize, usize, f64, f64),
}

impl GradCheck {
    fn new() -> Self {
        Self {
            components: 0,
            worst: 0.0,
            at: (0, 0, 0.0, 0.0),
        }
    }

    fn record(&mut self, input: usize, j: usize, analytic: f64, numeric: f64) {
        self.components += 1;
        let e = relative_error(analytic, numeric);
        if e > self.worst || self.components == 1 {
            self.worst = e;
            self.at = (input, j, analytic, numeric);
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.components += other.components;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.at = other.at;
        }
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        Self::new()
    }
}

/// Compares the gradient of `build`'s scalar output with respect to every
/// component of every input against `(f(x+h) - f(x-h)) / 2h`.
pub fn check_graph<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, out, ids))
    };
    let (g, loss, ids) = eval(inputs)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheck::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .ok_or_else(|| Error::shape("gradcheck", format!("input {k} does not reach the loss")))?;
        for j in 0..input.len() {
            let bump = |delta: f64| -> Result<f64> {
                let mut vals = inputs.to_vec();
                let mut data = vals[k].to_vec();
                data[j] += delta;
                vals[k] = Tensor::new(vals[k].shape().to_vec(), data)?;
                let (g, loss, _) = eval(&vals)?;
                Ok(g.value(loss).item())
            };
            let numeric = (bump(h)? - bump(-h)?) / (2.0 * h);
            report.record(k, j, analytic.data()[j], numeric);
        }
    }
    Ok(report)
}

/// Like [`check_graph`] for a loss given as a plain function of one flat
/// parameter vector, with its analytic gradient supplied by the caller.
pub fn check_function<F>(params: &[f64], analytic: &[f64], h: f64, loss: F) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "gradcheck",
            format!("{} parameters, {} gradients", params.len(), analytic.len()),
        ));
    }
    let mut report = GradCheck::new();
    let mut x = params.to_vec();
    for j in 0..params.len() {
        x[j] = params[j] + h;
        let up = loss(&x)?;
        x[j] = params[j] - h;
        let down = loss(&x)?;
        x[j] = params[j];
        report.record(0, j, analytic[j], (up - down) / (2.0 * h));
    }
    Ok(report)
}
