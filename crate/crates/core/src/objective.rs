//! L2-regularized logistic regression, split per node as
//! `L_i(w) = (1/m_i) sum_j log(1 + exp(-b_j w.a_j)) + (lambda / 2n) ||w||^2`.

use crate::dataset::{NodePartition, Sample};
use crate::error::{Error, Result};
use crate::vector::{dot, ModelVector};

/// Lipschitz constant of the logistic loss when every `||a|| <= 1`.
pub const LOGISTIC_LIPSCHITZ: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    /// Regularizer weight; each node carries `lambda / n` of it.
    pub lambda: f64,
    pub node_count: usize,
    /// Loss Lipschitz constant `c1`.
    pub loss_lipschitz: f64,
    /// Per-node objective Lipschitz constant `c2`.
    pub objective_lipschitz: f64,
    /// Diameter `D` of the feasible ball.
    pub domain_diameter: f64,
}

impl ObjectiveSpec {
    /// Fills `c1` and `c2` from [`lipschitz_constants`].
    pub fn new(lambda: f64, node_count: usize, domain_diameter: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
        }
        if node_count == 0 {
            return Err(Error::Parameter("node count must be positive".into()));
        }
        if !(domain_diameter > 0.0 && domain_diameter.is_finite()) {
            return Err(Error::Parameter(format!(
                "domain diameter must be > 0, got {domain_diameter}"
            )));
        }
        let (c1, c2) = lipschitz_constants(lambda, node_count, domain_diameter);
        Ok(ObjectiveSpec {
            lambda,
            node_count,
            loss_lipschitz: c1,
            objective_lipschitz: c2,
            domain_diameter,
        })
    }

    pub fn with_objective_lipschitz(mut self, c2: f64) -> Result<Self> {
        if !(c2 > 0.0 && c2.is_finite()) {
            return Err(Error::Parameter(format!("c2 must be > 0, got {c2}")));
        }
        self.objective_lipschitz = c2;
        Ok(self)
    }

    /// Per-node regularizer weight `lambda / n`.
    pub fn node_lambda(&self) -> f64 {
        self.lambda / self.node_count as f64
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn logistic_loss(sample: &Sample, w: &[f64]) -> Result<f64> {
    if sample.dim() != w.len() {
        return Err(Error::Shape { expected: w.len(), actual: sample.dim() });
    }
    Ok(softplus(-sample.sign() * dot(w, &sample.features)))
}

/// Adds `-b a / (1 + exp(b w.a))` into `grad`.
fn accumulate_loss_gradient(grad: &mut [f64], sample: &Sample, w: &[f64], weight: f64) {
    let b = sample.sign();
    let coeff = -b / (1.0 + (b * dot(w, &sample.features)).exp());
    for (g, a) in grad.iter_mut().zip(&sample.features) {
        *g += weight * coeff * a;
    }
}

fn check_shapes(partition: &NodePartition, w: &[f64]) -> Result<()> {
    if partition.dim() == 0 {
        return Err(Error::Shape { expected: w.len().max(1), actual: 0 });
    }
    if partition.dim() != w.len() {
        return Err(Error::Shape { expected: partition.dim(), actual: w.len() });
    }
    Ok(())
}

/// `L_i(w)`: mean logistic loss plus `(lambda / 2n) ||w||^2`.
pub fn local_objective(partition: &NodePartition, spec: &ObjectiveSpec, w: &[f64]) -> Result<f64> {
    check_shapes(partition, w)?;
    let mut total = 0.0;
    for s in partition.samples() {
        total += softplus(-s.sign() * dot(w, &s.features));
    }
    Ok(total / partition.size() as f64 + 0.5 * spec.node_lambda() * dot(w, w))
}

/// `grad L_i(w)`.
pub fn local_gradient(
    partition: &NodePartition,
    spec: &ObjectiveSpec,
    w: &[f64],
) -> Result<ModelVector> {
    check_shapes(partition, w)?;
    let mut grad = ModelVector::zeros(w.len());
    let weight = 1.0 / partition.size() as f64;
    for s in partition.samples() {
        accumulate_loss_gradient(&mut grad, s, w, weight);
    }
    grad.axpy(spec.node_lambda(), w);
    Ok(grad)
}

/// Gradient of the mean loss over the samples at `indices` (repeats allowed)
/// plus the regularizer term.
pub fn subset_gradient(
    partition: &NodePartition,
    spec: &ObjectiveSpec,
    w: &[f64],
    indices: &[usize],
) -> Result<ModelVector> {
    check_shapes(partition, w)?;
    if indices.is_empty() {
        return Err(Error::Parameter("empty sample subset".into()));
    }
    let mut grad = ModelVector::zeros(w.len());
    let weight = 1.0 / indices.len() as f64;
    for &j in indices {
        accumulate_loss_gradient(&mut grad, &partition.samples()[j], w, weight);
    }
    grad.axpy(spec.node_lambda(), w);
    Ok(grad)
}

/// Hessian of `L_i` as a dense row-major `d x d` matrix.
pub fn local_hessian(partition: &NodePartition, spec: &ObjectiveSpec, w: &[f64]) -> Result<Vec<f64>> {
    check_shapes(partition, w)?;
    let d = w.len();
    let mut h = vec![0.0; d * d];
    let weight = 1.0 / partition.size() as f64;
    for s in partition.samples() {
        let p = 1.0 / (1.0 + (-dot(w, &s.features)).exp());
        let c = weight * p * (1.0 - p);
        for r in 0..d {
            let ar = c * s.features[r];
            if ar == 0.0 {
                continue;
            }
            for (hc, ac) in h[r * d..(r + 1) * d].iter_mut().zip(&s.features) {
                *hc += ar * ac;
            }
        }
    }
    for r in 0..d {
        h[r * d + r] += spec.node_lambda();
    }
    Ok(h)
}

/// `(c1, c2)` for the logistic loss with unit-norm features: `c1 = 1` and
/// `c2 = c1 + (lambda / n)(D / 2)` over a ball of diameter `D`.
pub fn lipschitz_constants(lambda: f64, node_count: usize, domain_diameter: f64) -> (f64, f64) {
    let c1 = LOGISTIC_LIPSCHITZ;
    (c1, c1 + lambda / node_count as f64 * domain_diameter / 2.0)
}

/// Radial projection onto the ball of radius `D / 2`.
pub fn project_to_domain(w: &mut ModelVector, domain_diameter: f64) {
    let radius = domain_diameter / 2.0;
    let n = w.norm();
    if n > radius {
        w.scale(radius / n);
    }
}
