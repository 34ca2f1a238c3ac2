//! Voltage-constrained OPF and its centralized primal-dual iteration.
//!
//! Each iteration takes one projected gradient step on the injections using
//! the current multipliers, one projected ascent step on the multipliers using
//! the measured voltages, and then re-measures the network at the new
//! injections. Voltage feedback always comes from the nonlinear solver, whatever
//! sensitivity mode drives the primal step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{
    finite_difference_sensitivity, improved_sensitivity, linear_sensitivity, SensitivityMatrices,
    SensitivityMode,
};
use crate::network::{build_path_index, InjectionBox, Network, PathIndex};
use crate::powerflow::{solve_nonlinear, InjectionVector, PowerFlowState, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpfParams {
    pub epsilon: f64,
    pub sigma_u: f64,
    pub sigma_mu: f64,
    pub delta: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub solver_tol: f64,
    pub max_sweeps: usize,
}

impl Default for OpfParams {
    fn default() -> Self {
        OpfParams {
            epsilon: 1e-4,
            sigma_u: 2e-3,
            sigma_mu: 1e-3,
            delta: 1e-6,
            max_iter: 5000,
            fd_step: 1e-5,
            solver_tol: 1e-10,
            max_sweeps: 500,
        }
    }
}

impl OpfParams {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver_tol,
            max_sweeps: self.max_sweeps,
        }
    }
}

/// Problem data. Vectors are indexed over non-root nodes; voltage limits are
/// squared magnitudes.
#[derive(Clone, Debug)]
pub struct OpfProblem {
    pub net: Network,
    pub idx: PathIndex,
    pub bounds: InjectionBox,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub targets: InjectionVector,
    pub weights: Vec<f64>,
    pub params: OpfParams,
}

impl OpfProblem {
    /// Targets default to the nominal injections, with unit weight on
    /// controllable nodes and zero elsewhere. Limits are magnitudes in p.u.
    pub fn new(
        net: Network,
        bounds: InjectionBox,
        v_min_pu: f64,
        v_max_pu: f64,
        params: OpfParams,
    ) -> Result<Self> {
        let n = net.n();
        let weights = bounds
            .controllable
            .iter()
            .map(|&c| if c { 1.0 } else { 0.0 })
            .collect();
        let prob = OpfProblem {
            idx: build_path_index(&net),
            targets: InjectionVector::nominal(&net),
            v_min: vec![v_min_pu * v_min_pu; n],
            v_max: vec![v_max_pu * v_max_pu; n],
            net,
            bounds,
            weights,
            params,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn n(&self) -> usize {
        self.net.n()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        self.bounds.validate()?;
        for len in [
            self.bounds.len(),
            self.v_min.len(),
            self.v_max.len(),
            self.weights.len(),
        ] {
            if len != n {
                return Err(Error::Dimension { expected: n, found: len });
            }
        }
        self.targets.check(n)?;
        if self.v_min.iter().zip(&self.v_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArgument("voltage limits must satisfy v_min < v_max".into()));
        }
        let p = &self.params;
        for (name, val) in [
            ("epsilon", p.epsilon),
            ("sigma_u", p.sigma_u),
            ("sigma_mu", p.sigma_mu),
            ("delta", p.delta),
            ("fd_step", p.fd_step),
            ("solver_tol", p.solver_tol),
        ] {
            if !(val > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if p.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, u: &InjectionVector) -> bool {
        let b = &self.bounds;
        (0..self.n()).all(|k| {
            b.p_min[k] <= u.p[k] && u.p[k] <= b.p_max[k] && b.q_min[k] <= u.q[k] && u.q[k] <= b.q_max[k]
        })
    }

    /// Largest bound violation over all nodes, in squared-voltage units.
    pub fn max_violation(&self, v: &[f64]) -> f64 {
        (0..self.n())
            .map(|k| (self.v_min[k] - v[k + 1]).max(v[k + 1] - self.v_max[k]))
            .fold(0.0, f64::max)
    }
}

/// Multipliers for the lower and upper voltage limits, over all non-root nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DualState {
    pub fn zeros(n: usize) -> Self {
        DualState {
            lower: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    /// upper - lower, the weight vector multiplying dv/du.
    pub fn net_weight(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }

    pub fn distance(&self, other: &DualState) -> f64 {
        self.lower
            .iter()
            .zip(&other.lower)
            .chain(self.upper.iter().zip(&other.upper))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn norm_sq(&self) -> f64 {
        self.lower.iter().chain(&self.upper).map(|x| x * x).sum()
    }
}

/// Objective value and its gradient (df/dp, df/dq).
pub fn objective_and_gradient(prob: &OpfProblem, u: &InjectionVector) -> (f64, Vec<f64>, Vec<f64>) {
    let n = prob.n();
    let mut value = 0.0;
    let mut gp = vec![0.0; n];
    let mut gq = vec![0.0; n];
    for k in 0..n {
        let w = prob.weights[k];
        if w == 0.0 {
            continue;
        }
        let dp = u.p[k] - prob.targets.p[k];
        let dq = u.q[k] - prob.targets.q[k];
        value += w * (dp * dp + dq * dq);
        gp[k] = 2.0 * w * dp;
        gq[k] = 2.0 * w * dq;
    }
    (value, gp, gq)
}

pub fn project_box(u: &InjectionVector, bounds: &InjectionBox) -> InjectionVector {
    InjectionVector {
        p: u
            .p
            .iter()
            .enumerate()
            .map(|(k, &p)| p.clamp(bounds.p_min[k], bounds.p_max[k]))
            .collect(),
        q: u
            .q
            .iter()
            .enumerate()
            .map(|(k, &q)| q.clamp(bounds.q_min[k], bounds.q_max[k]))
            .collect(),
    }
}

/// Projected primal step given precomputed couplings alpha = (dv/dp)^T w and
/// beta = (dv/dq)^T w, with w = mu_upper - mu_lower.
pub fn primal_update(
    prob: &OpfProblem,
    u: &InjectionVector,
    alpha: &[f64],
    beta: &[f64],
) -> InjectionVector {
    let (_, gp, gq) = objective_and_gradient(prob, u);
    let s = prob.params.sigma_u;
    let raw = InjectionVector {
        p: (0..u.len()).map(|k| u.p[k] - s * (gp[k] + alpha[k])).collect(),
        q: (0..u.len()).map(|k| u.q[k] - s * (gq[k] + beta[k])).collect(),
    };
    project_box(&raw, &prob.bounds)
}

pub fn primal_step(
    prob: &OpfProblem,
    u: &InjectionVector,
    duals: &DualState,
    sens: &SensitivityMatrices,
) -> InjectionVector {
    let (alpha, beta) = sens.transpose_mul(&duals.net_weight());
    primal_update(prob, u, &alpha, &beta)
}

/// Projected dual ascent on the regularized Lagrangian. `v` is node-indexed
/// (root first).
pub fn dual_step(prob: &OpfProblem, duals: &DualState, v: &[f64]) -> DualState {
    let (s, eps) = (prob.params.sigma_mu, prob.params.epsilon);
    let n = prob.n();
    DualState {
        lower: (0..n)
            .map(|k| (duals.lower[k] + s * (prob.v_min[k] - v[k + 1] - eps * duals.lower[k])).max(0.0))
            .collect(),
        upper: (0..n)
            .map(|k| (duals.upper[k] + s * (v[k + 1] - prob.v_max[k] - eps * duals.upper[k])).max(0.0))
            .collect(),
    }
}

/// f(u) + mu_l^T (v_min - v) + mu_u^T (v - v_max) - (eps/2) |mu|^2.
pub fn regularized_lagrangian(
    prob: &OpfProblem,
    u: &InjectionVector,
    duals: &DualState,
    v: &[f64],
) -> f64 {
    let (f, _, _) = objective_and_gradient(prob, u);
    let mut val = f;
    for k in 0..prob.n() {
        val += duals.lower[k] * (prob.v_min[k] - v[k + 1]);
        val += duals.upper[k] * (v[k + 1] - prob.v_max[k]);
    }
    val - 0.5 * prob.params.epsilon * duals.norm_sq()
}

#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub u: InjectionVector,
    /// Measured squared voltages at `u`, node-indexed.
    pub v: Vec<f64>,
    pub duals: DualState,
    pub objective: f64,
    pub max_violation: f64,
    /// |u(t) - u(t-1)|; zero for the first record.
    pub step_norm: f64,
    pub dual_step_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Converged,
    MaxIterations,
    SolverFailure { iteration: usize, message: String },
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// Number of primal-dual updates performed.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    /// Min of sqrt(v) over non-root nodes at the final record.
    pub fn final_min_voltage(&self) -> Option<f64> {
        self.last()
            .map(|r| r.v[1..].iter().map(|v| v.sqrt()).fold(f64::INFINITY, f64::min))
    }
}

fn record(
    prob: &OpfProblem,
    iteration: usize,
    u: &InjectionVector,
    state: &PowerFlowState,
    duals: &DualState,
    step_norm: f64,
    dual_step_norm: f64,
) -> IterationRecord {
    IterationRecord {
        iteration,
        u: u.clone(),
        v: state.v.clone(),
        duals: duals.clone(),
        objective: objective_and_gradient(prob, u).0,
        max_violation: prob.max_violation(&state.v),
        step_norm,
        dual_step_norm,
    }
}

/// Shared iteration loop. `coupling` returns (alpha, beta) for the current
/// injections, feedback state and multipliers.
///
/// Stops once both |u(t+1) - u(t)| and |mu(t+1) - mu(t)| fall below `delta`,
/// or after `max_iter` records.
pub(crate) fn iterate<C>(prob: &OpfProblem, u0: &InjectionVector, mut coupling: C) -> Result<Trajectory>
where
    C: FnMut(usize, &InjectionVector, &PowerFlowState, &DualState) -> Result<(Vec<f64>, Vec<f64>)>,
{
    prob.validate()?;
    u0.check(prob.n())?;
    if !prob.contains(u0) {
        return Err(Error::InvalidArgument("initial injections lie outside the box".into()));
    }
    let solver = prob.params.solver();
    let failure = |t: usize, e: Error, records: Vec<IterationRecord>| -> Result<Trajectory> {
        if e.is_solver_failure() {
            Ok(Trajectory {
                records,
                termination: Termination::SolverFailure {
                    iteration: t,
                    message: e.to_string(),
                },
            })
        } else {
            Err(e)
        }
    };

    let mut u = u0.clone();
    let mut duals = DualState::zeros(prob.n());
    let mut state = match solve_nonlinear(&prob.net, &u, &solver) {
        Ok(s) => s,
        Err(e) => return failure(0, e, Vec::new()),
    };
    let mut records = vec![record(prob, 0, &u, &state, &duals, 0.0, 0.0)];
    let mut termination = Termination::MaxIterations;

    for t in 0..prob.params.max_iter.saturating_sub(1) {
        let (alpha, beta) = match coupling(t, &u, &state, &duals) {
            Ok(ab) => ab,
            Err(e) => return failure(t, e, records),
        };
        let u_next = primal_update(prob, &u, &alpha, &beta);
        let duals_next = dual_step(prob, &duals, &state.v);
        let step = u_next.distance(&u);
        let dual_step_norm = duals_next.distance(&duals);
        u = u_next;
        duals = duals_next;
        state = match solve_nonlinear(&prob.net, &u, &solver) {
            Ok(s) => s,
            Err(e) => return failure(t + 1, e, records),
        };
        records.push(record(prob, t + 1, &u, &state, &duals, step, dual_step_norm));
        if step < prob.params.delta && dual_step_norm < prob.params.delta {
            termination = Termination::Converged;
            break;
        }
    }
    Ok(Trajectory {
        records,
        termination,
    })
}

/// Centralized primal-dual iteration with sensitivities refreshed every step
/// (linear mode keeps its constant matrices).
pub fn run_centralized(
    prob: &OpfProblem,
    mode: SensitivityMode,
    u0: &InjectionVector,
) -> Result<Trajectory> {
    match mode {
        SensitivityMode::Linear => {
            let lin = linear_sensitivity(&prob.idx);
            iterate(prob, u0, |_, _, _, duals| Ok(lin.transpose_mul(&duals.net_weight())))
        }
        SensitivityMode::Improved => iterate(prob, u0, |_, _, state, duals| {
            let s = improved_sensitivity(&prob.net, &prob.idx, state)?;
            Ok(s.transpose_mul(&duals.net_weight()))
        }),
        SensitivityMode::FiniteDifference => iterate(prob, u0, |_, u, _, duals| {
            let s = finite_difference_sensitivity(
                &prob.net,
                u,
                prob.params.fd_step,
                &prob.params.solver(),
            )?;
            Ok(s.transpose_mul(&duals.net_weight()))
        }),
    }
}
