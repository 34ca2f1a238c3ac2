//! DistFlow (branch-flow) solvers for radial feeders.
//!
//! `solve_nonlinear` plays the role of the measured network: its output is the
//! feedback every optimization loop consumes. `solve_linear` evaluates the
//! lossless linearization, and `linearization_voltage_error` gives the closed-form
//! gap between the two.

use crate::error::{Error, Result};
use crate::network::Network;

/// Controllable injections over the non-root nodes; index `k` is node `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionVector {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionVector {
    pub fn zeros(n: usize) -> Self {
        InjectionVector {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    /// Nominal injections read from the network data.
    pub fn nominal(net: &Network) -> Self {
        InjectionVector {
            p: net.nodes()[1..].iter().map(|n| n.p_nom).collect(),
            q: net.nodes()[1..].iter().map(|n| n.q_nom).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn check(&self, n: usize) -> Result<()> {
        for v in [&self.p, &self.q] {
            if v.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("non-finite injection".into()));
            }
        }
        Ok(())
    }

    /// Euclidean distance over the stacked (p, q) vector.
    pub fn distance(&self, other: &InjectionVector) -> f64 {
        self.p
            .iter()
            .zip(&other.p)
            .chain(self.q.iter().zip(&other.q))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn add(&self, other: &InjectionVector) -> InjectionVector {
        InjectionVector {
            p: self.p.iter().zip(&other.p).map(|(a, b)| a + b).collect(),
            q: self.q.iter().zip(&other.q).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Solved branch-flow quantities.
///
/// `v` is indexed by node id (length N+1, `v[0] = v0`); `p_flow`, `q_flow`
/// and `current_sq` are indexed by line (line `k` feeds node `k + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowState {
    pub v: Vec<f64>,
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub current_sq: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl PowerFlowState {
    /// Min over non-root nodes of sqrt(v), with the node id.
    pub fn min_voltage(&self) -> (usize, f64) {
        self.v
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, v)| (k, v.sqrt()))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
    }

    pub fn max_voltage(&self) -> (usize, f64) {
        self.v
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, v)| (k, v.sqrt()))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_sweeps: 500,
        }
    }
}

/// Max absolute residual of each branch-flow equation family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistFlowResiduals {
    pub active: f64,
    pub reactive: f64,
    pub voltage: f64,
    pub current: f64,
}

impl DistFlowResiduals {
    pub fn max(&self) -> f64 {
        self.active.max(self.reactive).max(self.voltage).max(self.current)
    }
}

/// Re-evaluates the four branch-flow equation families on `state`.
pub fn distflow_residuals(
    net: &Network,
    u: &InjectionVector,
    state: &PowerFlowState,
) -> DistFlowResiduals {
    let mut res = DistFlowResiduals {
        active: 0.0,
        reactive: 0.0,
        voltage: (state.v[0] - net.v0()).abs(),
        current: 0.0,
    };
    for (k, line) in net.lines().iter().enumerate() {
        let j = line.to;
        let (mut sp, mut sq) = (0.0, 0.0);
        for &c in net.children(j) {
            sp += state.p_flow[c - 1];
            sq += state.q_flow[c - 1];
        }
        let l = state.current_sq[k];
        res.active = res
            .active
            .max((state.p_flow[k] - (-u.p[k] + sp + line.r * l)).abs());
        res.reactive = res
            .reactive
            .max((state.q_flow[k] - (-u.q[k] + sq + line.x * l)).abs());
        let vj = state.v[line.from] - 2.0 * (line.r * state.p_flow[k] + line.x * state.q_flow[k])
            + line.z_sq() * l;
        res.voltage = res.voltage.max((state.v[j] - vj).abs());
        let pq = state.p_flow[k] * state.p_flow[k] + state.q_flow[k] * state.q_flow[k];
        res.current = res.current.max((l * state.v[line.from] - pq).abs());
    }
    res
}

/// Backward pass: line flows from injections and the current-squared guess.
fn backward(net: &Network, u: &InjectionVector, l: &[f64], pf: &mut [f64], qf: &mut [f64]) {
    let n = net.n();
    for k in 0..n {
        let line = &net.lines()[k];
        pf[k] = -u.p[k] + line.r * l[k];
        qf[k] = -u.q[k] + line.x * l[k];
    }
    // Children have larger ids than parents, so a reverse scan accumulates
    // every subtree before its feeding line is read.
    for k in (0..n).rev() {
        let from = net.lines()[k].from;
        if from != 0 {
            pf[from - 1] += pf[k];
            qf[from - 1] += qf[k];
        }
    }
}

/// Backward-forward sweep on the nonlinear branch-flow equations, from a flat
/// start. The returned state satisfies the flow-balance and voltage-drop
/// equations to rounding and the current equation to `opts.tol`.
pub fn solve_nonlinear(
    net: &Network,
    u: &InjectionVector,
    opts: &SolverOptions,
) -> Result<PowerFlowState> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("solver tolerance must be positive".into()));
    }
    let n = net.n();
    u.check(n)?;
    let v0 = net.v0();
    let mut l = vec![0.0; n];
    let mut pf = vec![0.0; n];
    let mut qf = vec![0.0; n];
    let mut v = vec![v0; n + 1];
    let mut residual = f64::INFINITY;

    for sweep in 1..=opts.max_sweeps {
        backward(net, u, &l, &mut pf, &mut qf);
        for (k, line) in net.lines().iter().enumerate() {
            let vj = v[line.from] - 2.0 * (line.r * pf[k] + line.x * qf[k]) + line.z_sq() * l[k];
            if !(vj > 0.25 * v0) {
                return Err(if vj.is_finite() {
                    Error::VoltageCollapse {
                        node: line.to,
                        value: vj,
                    }
                } else {
                    Error::NonConvergence {
                        sweeps: sweep,
                        residual: f64::INFINITY,
                    }
                });
            }
            v[line.to] = vj;
        }
        residual = 0.0;
        for (k, line) in net.lines().iter().enumerate() {
            let pq = pf[k] * pf[k] + qf[k] * qf[k];
            residual = f64::max(residual, (l[k] * v[line.from] - pq).abs());
        }
        if residual <= opts.tol {
            return Ok(PowerFlowState {
                v,
                p_flow: pf,
                q_flow: qf,
                current_sq: l,
                residual,
                iterations: sweep,
            });
        }
        for (k, line) in net.lines().iter().enumerate() {
            l[k] = (pf[k] * pf[k] + qf[k] * qf[k]) / v[line.from];
        }
    }
    Err(Error::NonConvergence {
        sweeps: opts.max_sweeps,
        residual,
    })
}

/// Lossless linearization: one backward sweep for flows, one forward sweep for
/// voltages. `current_sq` is all zeros.
pub fn solve_linear(net: &Network, u: &InjectionVector) -> Result<PowerFlowState> {
    let n = net.n();
    u.check(n)?;
    let zeros = vec![0.0; n];
    let mut pf = vec![0.0; n];
    let mut qf = vec![0.0; n];
    backward(net, u, &zeros, &mut pf, &mut qf);
    let mut v = vec![net.v0(); n + 1];
    for (k, line) in net.lines().iter().enumerate() {
        v[line.to] = v[line.from] - 2.0 * (line.r * pf[k] + line.x * qf[k]);
    }
    Ok(PowerFlowState {
        v,
        p_flow: pf,
        q_flow: qf,
        current_sq: zeros,
        residual: 0.0,
        iterations: 1,
    })
}

/// Downstream active (`g`) and reactive (`eta`) line losses per node, indexed
/// by node id. Leaves are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LossAggregates {
    pub g: Vec<f64>,
    pub eta: Vec<f64>,
}

pub fn loss_aggregates(net: &Network, state: &PowerFlowState) -> LossAggregates {
    let n = net.n();
    let mut g = vec![0.0; n + 1];
    let mut eta = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let line = &net.lines()[k];
        let l = state.current_sq[k];
        g[line.from] += line.r * l + g[line.to];
        eta[line.from] += line.x * l + eta[line.to];
    }
    LossAggregates { g, eta }
}

/// Closed-form linear-minus-nonlinear voltage gap per node (node-indexed, root
/// entry 0): a forward accumulation of 2(r g + x eta) + |z|^2 l along each root
/// path.
pub fn linearization_voltage_error(net: &Network, state: &PowerFlowState) -> Vec<f64> {
    let agg = loss_aggregates(net, state);
    let mut err = vec![0.0; net.n() + 1];
    for (k, line) in net.lines().iter().enumerate() {
        let j = line.to;
        err[j] = err[line.from]
            + 2.0 * (line.r * agg.g[j] + line.x * agg.eta[j])
            + line.z_sq() * state.current_sq[k];
    }
    err
}
