//! Sensitivity, Gaussian noise calibration, and budget accounting under
//! sqrt-composition.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::vector::ModelVector;

/// Slack allowed when comparing a composed epsilon against its budget.
pub const AUDIT_TOLERANCE: f64 = 1e-9;

/// `c0 = sqrt(ln(1/delta) / ln(1.25/delta))`; always in `(0, 1)` for `0 < delta < 1`.
pub fn default_c0(delta: f64) -> f64 {
    ((1.0 / delta).ln() / (1.25 / delta).ln()).sqrt()
}

fn check_epsilon_delta(epsilon: f64, delta: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub c0: f64,
    /// Outer iterations.
    pub t: u64,
    /// Inner updates per outer iteration.
    pub l: u64,
    /// Noise multiplier.
    pub sigma: f64,
}

impl PrivacyBudget {
    /// Plans a budget for `t * l` noisy updates. `c0` defaults to [`default_c0`].
    pub fn new(epsilon: f64, delta: f64, t: u64, l: u64, c0: Option<f64>) -> Result<Self> {
        let c0 = c0.unwrap_or_else(|| default_c0(delta));
        let sigma = noise_multiplier(epsilon, delta, t, l, c0)?;
        Ok(PrivacyBudget { epsilon, delta, c0, t, l, sigma })
    }

    pub fn total_steps(&self) -> u64 {
        self.t * self.l
    }

    /// Budget each individual noisy update must satisfy.
    pub fn per_step_epsilon(&self) -> f64 {
        self.epsilon / (self.c0 * (self.total_steps() as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityParams {
    /// Loss Lipschitz constant `c1`.
    pub loss_lipschitz: f64,
    pub rho: f64,
    /// `|N_i|`
    pub degree: usize,
    /// `m_i`
    pub sample_count: usize,
    /// Approximation parameter for this update.
    pub eta: f64,
}

/// L2 sensitivity of one linearized primal update:
/// `2 c1 / ((2 rho |N_i| + eta) m_i)`.
pub fn sensitivity(p: &SensitivityParams) -> Result<f64> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter(format!("{name} must be > 0, got {v}")))
        }
    };
    positive("c1", p.loss_lipschitz)?;
    positive("rho", p.rho)?;
    positive("degree", p.degree as f64)?;
    positive("m_i", p.sample_count as f64)?;
    positive("eta", p.eta)?;
    Ok(2.0 * p.loss_lipschitz
        / ((2.0 * p.rho * p.degree as f64 + p.eta) * p.sample_count as f64))
}

/// `sigma = c0 sqrt(2 t l ln(1.25/delta)) / epsilon`.
pub fn noise_multiplier(epsilon: f64, delta: f64, t: u64, l: u64, c0: f64) -> Result<f64> {
    check_epsilon_delta(epsilon, delta)?;
    if t == 0 || l == 0 {
        return Err(Error::Parameter(format!("t and l must be >= 1, got t={t}, l={l}")));
    }
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(Error::Parameter(format!("c0 must be > 0, got {c0}")));
    }
    Ok(c0 * ((t * l) as f64 * 2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Adds i.i.d. `N(0, (s * sigma)^2)` noise to every coordinate.
pub fn gaussian_perturb<R: Rng + ?Sized>(
    w: &mut ModelVector,
    sensitivity: f64,
    sigma: f64,
    rng: &mut R,
) {
    let std = sensitivity * sigma;
    if std == 0.0 {
        return;
    }
    for x in w.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x += std * z;
    }
}

/// `c0 sqrt(steps) * per_step_epsilon`.
pub fn composed_epsilon(per_step_epsilon: f64, steps: u64, c0: f64) -> f64 {
    c0 * (steps as f64).sqrt() * per_step_epsilon
}

/// Generator for the noise of one `(node, k, r)` update. Every update reads a
/// disjoint ChaCha stream of the run seed, so draws do not depend on the
/// order in which nodes are processed.
pub fn update_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub epsilon: f64,
    pub delta: f64,
    pub per_step_epsilon: f64,
    pub composed_epsilon: f64,
    pub sigma: f64,
    pub c0: f64,
    pub t: u64,
    pub l: u64,
    pub executed_steps: u64,
}

impl AuditReport {
    /// Unused budget when the run stopped before `t * l` updates.
    pub fn slack(&self) -> f64 {
        self.epsilon - self.composed_epsilon
    }

    /// True when each update is charged `epsilon >= 1`, outside the range
    /// where the Gaussian mechanism calibration is usually stated.
    pub fn per_step_out_of_range(&self) -> bool {
        self.per_step_epsilon >= 1.0
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epsilon={}", self.epsilon)?;
        writeln!(f, "delta={}", self.delta)?;
        writeln!(f, "per_step_epsilon={}", self.per_step_epsilon)?;
        writeln!(f, "composed_epsilon={}", self.composed_epsilon)?;
        writeln!(f, "sigma={}", self.sigma)?;
        writeln!(f, "c0={}", self.c0)?;
        writeln!(f, "t={}", self.t)?;
        writeln!(f, "l={}", self.l)?;
        writeln!(f, "executed_steps={}", self.executed_steps)?;
        writeln!(f, "slack={}", self.slack())?;
        writeln!(f, "per_step_epsilon_ge_1={}", self.per_step_out_of_range())
    }
}

/// Charges `executed_steps` updates at the planned per-step budget and checks
/// the composition stays within `epsilon`.
pub fn audit_total_budget(budget: &PrivacyBudget, executed_steps: u64) -> Result<AuditReport> {
    let budgeted = budget.total_steps();
    if executed_steps > budgeted {
        return Err(Error::BudgetExceeded { executed: executed_steps, budgeted });
    }
    let per_step = budget.per_step_epsilon();
    let composed = composed_epsilon(per_step, executed_steps, budget.c0);
    if composed > budget.epsilon + AUDIT_TOLERANCE {
        return Err(Error::BudgetExceeded { executed: executed_steps, budgeted });
    }
    Ok(AuditReport {
        epsilon: budget.epsilon,
        delta: budget.delta,
        per_step_epsilon: per_step,
        composed_epsilon: composed,
        sigma: budget.sigma,
        c0: budget.c0,
        t: budget.t,
        l: budget.l,
        executed_steps,
    })
}
