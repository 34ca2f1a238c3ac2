//! Voltage sensitivities dv/du under three evaluation modes.
//!
//! All matrices are `N x N`, indexed over non-root nodes (`k` is node `k + 1`),
//! with entry `(j, h)` holding dv_j / du_h.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, PathIndex};
use crate::powerflow::{solve_nonlinear, InjectionVector, PowerFlowState, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityMode {
    Linear,
    Improved,
    #[serde(rename = "fd", alias = "finite-difference")]
    FiniteDifference,
}

impl std::fmt::Display for SensitivityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SensitivityMode::Linear => "linear",
            SensitivityMode::Improved => "improved",
            SensitivityMode::FiniteDifference => "fd",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SensitivityMatrices {
    pub dv_dp: DMatrix<f64>,
    pub dv_dq: DMatrix<f64>,
    pub mode: SensitivityMode,
    /// Operating point the matrices were evaluated at; `None` for linear mode.
    pub state: Option<PowerFlowState>,
}

impl SensitivityMatrices {
    /// Frobenius distance over the stacked (dv/dp, dv/dq) pair.
    pub fn frobenius_distance(&self, other: &SensitivityMatrices) -> f64 {
        let dp = (&self.dv_dp - &other.dv_dp).norm_squared();
        let dq = (&self.dv_dq - &other.dv_dq).norm_squared();
        (dp + dq).sqrt()
    }

    /// (dv/dp)^T w and (dv/dq)^T w, summed in ascending row order.
    pub fn transpose_mul(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.dv_dp.ncols();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for h in 0..n {
            let (mut sa, mut sb) = (0.0, 0.0);
            for (j, wj) in w.iter().enumerate() {
                sa += self.dv_dp[(j, h)] * wj;
                sb += self.dv_dq[(j, h)] * wj;
            }
            a[h] = sa;
            b[h] = sb;
        }
        (a, b)
    }
}

/// d l_ij / du_h per line (row) and node (column).
#[derive(Clone, Debug)]
pub struct CurrentSensitivities {
    pub dl_dp: DMatrix<f64>,
    pub dl_dq: DMatrix<f64>,
}

/// Linearized-model sensitivities: dv/dp = R, dv/dq = X.
pub fn linear_sensitivity(idx: &PathIndex) -> SensitivityMatrices {
    let size = idx.r_matrix().nrows();
    SensitivityMatrices {
        dv_dp: idx.r_matrix().view((1, 1), (size - 1, size - 1)).into_owned(),
        dv_dq: idx.x_matrix().view((1, 1), (size - 1, size - 1)).into_owned(),
        mode: SensitivityMode::Linear,
        state: None,
    }
}

fn parent_voltage(net: &Network, state: &PowerFlowState, j: usize) -> Result<f64> {
    let i = net.line_into(j).from;
    let vi = state.v[i];
    if vi > 0.0 {
        Ok(vi)
    } else {
        Err(Error::NonpositiveVoltage { node: i, value: vi })
    }
}

fn check_state(net: &Network, state: &PowerFlowState) -> Result<()> {
    if state.v.len() != net.n() + 1 || state.current_sq.len() != net.n() {
        return Err(Error::Dimension {
            expected: net.n() + 1,
            found: state.v.len(),
        });
    }
    Ok(())
}

/// Current-squared sensitivities, using measured P, Q, l, v and the linear
/// flow derivatives dP/dp_h = -1(j on path of h).
pub fn current_sensitivity(
    net: &Network,
    idx: &PathIndex,
    state: &PowerFlowState,
) -> Result<CurrentSensitivities> {
    check_state(net, state)?;
    let n = net.n();
    let mut dl_dp = DMatrix::zeros(n, n);
    let mut dl_dq = DMatrix::zeros(n, n);
    for (k, line) in net.lines().iter().enumerate() {
        let (i, j) = (line.from, line.to);
        let vi = parent_voltage(net, state, j)?;
        let (p, q, l) = (state.p_flow[k], state.q_flow[k], state.current_sq[k]);
        for h in 1..=n {
            let ind = if idx.on_path(j, h) { 1.0 } else { 0.0 };
            dl_dp[(k, h - 1)] = -(2.0 * p * ind + l * idx.r(i, h)) / vi;
            dl_dq[(k, h - 1)] = -(2.0 * q * ind + l * idx.x(i, h)) / vi;
        }
    }
    Ok(CurrentSensitivities { dl_dp, dl_dq })
}

/// Per-line quantities the loss-corrected entry needs.
#[derive(Clone, Copy, Debug)]
pub struct LineMeasurement {
    /// Parent node of the line's receiving end.
    pub parent: usize,
    pub z_sq: f64,
    pub v_parent: f64,
    pub p_flow: f64,
    pub q_flow: f64,
    pub current_sq: f64,
}

impl LineMeasurement {
    pub fn read(net: &Network, state: &PowerFlowState, j: usize) -> Result<Self> {
        let line = net.line_into(j);
        Ok(LineMeasurement {
            parent: line.from,
            z_sq: line.z_sq(),
            v_parent: parent_voltage(net, state, j)?,
            p_flow: state.p_flow[j - 1],
            q_flow: state.q_flow[j - 1],
            current_sq: state.current_sq[j - 1],
        })
    }

    /// 1 - |z|^2 l / v_i, the weight multiplying R_ih and X_ih.
    pub fn loss_weight(&self) -> f64 {
        1.0 - self.z_sq * self.current_sq / self.v_parent
    }
}

/// Loss-corrected entries (dv_j/dp_h, dv_j/dq_h) for node ids `j`, `h`:
///
/// dv_j/dp_h = R_jh - (|z|^2 l / v_i) R_ih - (2 |z|^2 P / v_i) 1(j on path of h)
///
/// and the same with X and Q for q. `i` is the parent of `j`.
pub fn improved_entry(idx: &PathIndex, m: &LineMeasurement, j: usize, h: usize) -> (f64, f64) {
    let i = m.parent;
    let ind = if idx.on_path(j, h) { 1.0 } else { 0.0 };
    let loss = m.z_sq * m.current_sq / m.v_parent;
    let dp = idx.r(j, h) - loss * idx.r(i, h) - 2.0 * m.z_sq * m.p_flow / m.v_parent * ind;
    let dq = idx.x(j, h) - loss * idx.x(i, h) - 2.0 * m.z_sq * m.q_flow / m.v_parent * ind;
    (dp, dq)
}

/// Loss-corrected sensitivity matrices at a measured operating point.
pub fn improved_sensitivity(
    net: &Network,
    idx: &PathIndex,
    state: &PowerFlowState,
) -> Result<SensitivityMatrices> {
    check_state(net, state)?;
    let n = net.n();
    let mut dv_dp = DMatrix::zeros(n, n);
    let mut dv_dq = DMatrix::zeros(n, n);
    for j in 1..=n {
        let m = LineMeasurement::read(net, state, j)?;
        for h in 1..=n {
            let (dp, dq) = improved_entry(idx, &m, j, h);
            dv_dp[(j - 1, h - 1)] = dp;
            dv_dq[(j - 1, h - 1)] = dq;
        }
    }
    Ok(SensitivityMatrices {
        dv_dp,
        dv_dq,
        mode: SensitivityMode::Improved,
        state: Some(state.clone()),
    })
}

/// Central differences of an arbitrary voltage map `f(u) -> v` (node-indexed,
/// root first). Columns are evaluated in parallel and written by coordinate.
pub fn finite_difference_with<F>(
    u: &InjectionVector,
    step: f64,
    f: F,
) -> Result<(DMatrix<f64>, DMatrix<f64>)>
where
    F: Fn(&InjectionVector) -> Result<Vec<f64>> + Sync,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let n = u.len();
    let column = |h: usize, reactive: bool| -> Result<Vec<f64>> {
        let mut up = u.clone();
        let mut dn = u.clone();
        if reactive {
            up.q[h] += step;
            dn.q[h] -= step;
        } else {
            up.p[h] += step;
            dn.p[h] -= step;
        }
        let (vp, vm) = (f(&up)?, f(&dn)?);
        Ok((1..=n).map(|j| (vp[j] - vm[j]) / (2.0 * step)).collect())
    };
    let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|h| Ok((column(h, false)?, column(h, true)?)))
        .collect::<Result<_>>()?;
    let mut dp = DMatrix::zeros(n, n);
    let mut dq = DMatrix::zeros(n, n);
    for (h, (cp, cq)) in cols.iter().enumerate() {
        for j in 0..n {
            dp[(j, h)] = cp[j];
            dq[(j, h)] = cq[j];
        }
    }
    Ok((dp, dq))
}

/// Finite-difference sensitivities of the nonlinear solver around `u`.
pub fn finite_difference_sensitivity(
    net: &Network,
    u: &InjectionVector,
    step: f64,
    opts: &SolverOptions,
) -> Result<SensitivityMatrices> {
    let base = solve_nonlinear(net, u, opts)?;
    let (dv_dp, dv_dq) =
        finite_difference_with(u, step, |w| Ok(solve_nonlinear(net, w, opts)?.v))?;
    Ok(SensitivityMatrices {
        dv_dp,
        dv_dq,
        mode: SensitivityMode::FiniteDifference,
        state: Some(base),
    })
}
