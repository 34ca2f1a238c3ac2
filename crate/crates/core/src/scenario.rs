//! Scenario runner: load a feeder, build the OPF instance, run it and write
//! machine-readable results.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::SensitivityMode;
use crate::hierarchy::{run_hierarchical, Clustering, MessageLog};
use crate::network::{InjectionBox, Network};
use crate::opf::{run_centralized, OpfParams, OpfProblem, Termination, Trajectory};
use crate::powerflow::{solve_nonlinear, InjectionVector};

/// Exit statuses shared by the CLI.
pub mod exit {
    pub const CONVERGED: i32 = 0;
    pub const IO: i32 = 1;
    pub const NOT_CONVERGED: i32 = 2;
    pub const INVALID: i32 = 3;
    pub const SOLVER_FAILURE: i32 = 4;
}

/// Exit status for an error raised before or during a run.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => exit::IO,
        e if e.is_solver_failure() => exit::SOLVER_FAILURE,
        _ => exit::INVALID,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Nominal injections only, no optimization.
    None,
    Linear,
    Improved,
    Fd,
}

impl RunMode {
    pub fn sensitivity(self) -> Option<SensitivityMode> {
        match self {
            RunMode::None => None,
            RunMode::Linear => Some(SensitivityMode::Linear),
            RunMode::Improved => Some(SensitivityMode::Improved),
            RunMode::Fd => Some(SensitivityMode::FiniteDifference),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::None => "none",
            RunMode::Linear => "linear",
            RunMode::Improved => "improved",
            RunMode::Fd => "fd",
        })
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RunMode::None),
            "linear" => Ok(RunMode::Linear),
            "improved" => Ok(RunMode::Improved),
            "fd" | "finite-difference" => Ok(RunMode::Fd),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

/// Problem configuration. Voltage limits are magnitudes in p.u.; they are
/// squared when the problem is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpfConfig {
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    /// Upper injection bound as a fraction of the nominal load.
    pub upper_fraction: f64,
    pub load_scale: f64,
    pub mode: RunMode,
    pub hierarchical: bool,
    #[serde(flatten)]
    pub params: OpfParams,
}

impl Default for OpfConfig {
    fn default() -> Self {
        OpfConfig {
            v_min_pu: 0.95,
            v_max_pu: 1.05,
            upper_fraction: 0.3,
            load_scale: 1.0,
            mode: RunMode::Improved,
            hierarchical: false,
            params: OpfParams::default(),
        }
    }
}

impl OpfConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Multiplies every nominal injection by `factor`.
pub fn scale_loads(net: &Network, factor: f64) -> Result<Network> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "load scale must be positive and finite, got {factor}"
        )));
    }
    Ok(net.with_nominal(|n| (n.p_nom * factor, n.q_nom * factor)))
}

/// Box with the nominal load as one end and `upper_fraction` of it as the
/// other. Only flagged nodes with a positive active load are controllable;
/// the rest are pinned at their nominal injection.
pub fn derive_injection_box_with(net: &Network, upper_fraction: f64) -> Result<InjectionBox> {
    if !(0.0..=1.0).contains(&upper_fraction) {
        return Err(Error::InvalidArgument(format!(
            "upper_fraction must lie in [0, 1], got {upper_fraction}"
        )));
    }
    let n = net.n();
    let mut b = InjectionBox {
        p_min: Vec::with_capacity(n),
        p_max: Vec::with_capacity(n),
        q_min: Vec::with_capacity(n),
        q_max: Vec::with_capacity(n),
        controllable: Vec::with_capacity(n),
    };
    let span = |nominal: f64| {
        let other = upper_fraction * nominal;
        (nominal.min(other), nominal.max(other))
    };
    for j in 1..=n {
        let node = net.node(j);
        let ctrl = node.controllable && node.p_nom < 0.0;
        let (p_lo, p_hi) = if ctrl { span(node.p_nom) } else { (node.p_nom, node.p_nom) };
        let (q_lo, q_hi) = if ctrl { span(node.q_nom) } else { (node.q_nom, node.q_nom) };
        b.p_min.push(p_lo);
        b.p_max.push(p_hi);
        b.q_min.push(q_lo);
        b.q_max.push(q_hi);
        b.controllable.push(ctrl);
    }
    b.validate()?;
    Ok(b)
}

pub fn derive_injection_box(net: &Network) -> Result<InjectionBox> {
    derive_injection_box_with(net, 0.3)
}

/// OPF instance for an already scaled network.
pub fn build_problem(net: &Network, cfg: &OpfConfig) -> Result<OpfProblem> {
    let b = derive_injection_box_with(net, cfg.upper_fraction)?;
    OpfProblem::new(net.clone(), b, cfg.v_min_pu, cfg.v_max_pu, cfg.params)
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub network: PathBuf,
    pub clustering: Option<PathBuf>,
    pub config: OpfConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub network: String,
    pub mode: RunMode,
    pub hierarchical: bool,
    pub load_scale: f64,
    pub min_voltage_pu: f64,
    pub min_voltage_node: String,
    pub max_voltage_pu: f64,
    pub max_voltage_node: String,
    pub nodes_below_limit: usize,
    pub nodes_above_limit: usize,
    pub iterations: usize,
    pub converged: bool,
    pub termination: String,
    pub final_objective: f64,
    pub messages: usize,
    pub wall_time_s: f64,
    pub timestamp_unix_s: u64,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub summary: Summary,
    pub exit_code: i32,
}

/// Final per-node squared voltages (root first), the run record and messages.
struct RunResult {
    v: Vec<f64>,
    trajectory: Option<Trajectory>,
    log: Option<MessageLog>,
}

/// Runs a scenario and writes `voltages_final.csv`, `trajectory.csv`,
/// `messages.csv` (hierarchical runs) and `summary.json` into `out`.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioOutcome> {
    let cfg = &s.config;
    let base = Network::load(&s.network)?;
    let net = scale_loads(&base, cfg.load_scale)?;
    let prob = build_problem(&net, cfg)?;
    let clustering = match &s.clustering {
        Some(path) => Some(Clustering::load(&net, path)?),
        None => None,
    };
    if cfg.hierarchical {
        if cfg.mode != RunMode::Improved {
            return Err(Error::InvalidArgument(
                "hierarchical runs use the improved mode".into(),
            ));
        }
        if clustering.is_none() {
            return Err(Error::InvalidArgument("hierarchical runs need a clustering".into()));
        }
    }

    let started = Instant::now();
    let u0 = crate::opf::project_box(&InjectionVector::nominal(&net), &prob.bounds);
    // Fails with the solver's own error if the starting point is unsolvable.
    let v_start = solve_nonlinear(&net, &u0, &cfg.params.solver())?.v;
    let result = match cfg.mode.sensitivity() {
        None => RunResult {
            v: v_start,
            trajectory: None,
            log: None,
        },
        Some(mode) => {
            let (traj, log) = if cfg.hierarchical {
                let (t, l) = run_hierarchical(&prob, clustering.as_ref().expect("checked"), &u0)?;
                (t, Some(l))
            } else {
                (run_centralized(&prob, mode, &u0)?, None)
            };
            RunResult {
                v: traj.last().map_or(v_start, |r| r.v.clone()),
                trajectory: Some(traj),
                log,
            }
        }
    };
    let wall = started.elapsed().as_secs_f64();

    fs::create_dir_all(&s.out)?;
    write_voltages(&s.out.join("voltages_final.csv"), &net, &result.v)?;
    if let Some(t) = &result.trajectory {
        write_trajectory(&s.out.join("trajectory.csv"), &net, t)?;
    }
    if let Some(log) = &result.log {
        write_messages(&s.out.join("messages.csv"), &net, log)?;
    }

    let (exit_code, converged, termination, iterations, objective) = match &result.trajectory {
        None => (exit::CONVERGED, true, "nominal".to_string(), 0, 0.0),
        Some(t) => {
            let (code, label) = match &t.termination {
                Termination::Converged => (exit::CONVERGED, "converged".to_string()),
                Termination::MaxIterations => (exit::NOT_CONVERGED, "max_iterations".to_string()),
                Termination::SolverFailure { iteration, message } => (
                    exit::SOLVER_FAILURE,
                    format!("solver_failure at iteration {iteration}: {message}"),
                ),
            };
            let obj = t.last().map_or(0.0, |r| r.objective);
            (code, t.converged(), label, t.iterations(), obj)
        }
    };
    let (lo_k, hi_k) = extremes(&result.v);
    let summary = Summary {
        network: s.network.display().to_string(),
        mode: cfg.mode,
        hierarchical: cfg.hierarchical,
        load_scale: cfg.load_scale,
        min_voltage_pu: result.v[lo_k].sqrt(),
        min_voltage_node: net.name_of(lo_k).to_string(),
        max_voltage_pu: result.v[hi_k].sqrt(),
        max_voltage_node: net.name_of(hi_k).to_string(),
        nodes_below_limit: result.v[1..].iter().filter(|v| v.sqrt() < cfg.v_min_pu).count(),
        nodes_above_limit: result.v[1..].iter().filter(|v| v.sqrt() > cfg.v_max_pu).count(),
        iterations,
        converged,
        termination,
        final_objective: objective,
        messages: result.log.as_ref().map_or(0, |l| l.messages.len()),
        wall_time_s: wall,
        timestamp_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    fs::write(
        s.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(ScenarioOutcome { summary, exit_code })
}

/// Indices of the lowest and highest non-root voltages.
fn extremes(v: &[f64]) -> (usize, usize) {
    let mut lo = 1;
    let mut hi = 1;
    for k in 1..v.len() {
        if v[k] < v[lo] {
            lo = k;
        }
        if v[k] > v[hi] {
            hi = k;
        }
    }
    (lo, hi)
}

fn write_voltages(path: &Path, net: &Network, v: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "voltage_pu"])?;
    for (k, vk) in v.iter().enumerate() {
        w.write_record([net.name_of(k).to_string(), vk.sqrt().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_trajectory(path: &Path, net: &Network, t: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "iteration".to_string(),
        "step_norm".into(),
        "dual_step_norm".into(),
        "objective".into(),
        "max_violation".into(),
    ];
    header.extend((1..=net.n()).map(|k| format!("v_{}", net.name_of(k))));
    w.write_record(&header)?;
    for r in &t.records {
        let mut row = vec![
            r.iteration.to_string(),
            r.step_norm.to_string(),
            r.dual_step_norm.to_string(),
            r.objective.to_string(),
            r.max_violation.to_string(),
        ];
        row.extend(r.v[1..].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_messages(path: &Path, net: &Network, log: &MessageLog) -> Result<()> {
    use crate::hierarchy::Endpoint;
    let label = |e: Endpoint| match e {
        Endpoint::Node(h) => net.name_of(h).to_string(),
        other => other.to_string(),
    };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "round", "sender", "receiver", "payload"])?;
    for m in &log.messages {
        w.write_record([
            m.iteration.to_string(),
            m.round.to_string(),
            label(m.sender),
            label(m.receiver),
            m.payload.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Result of `validate`: the network summary and any clustering violations.
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub nodes: usize,
    pub lines: usize,
    pub violations: Vec<String>,
}

pub fn validate_files(network: &Path, clustering: Option<&Path>) -> Result<ValidationReport> {
    let net = Network::load(network)?;
    let violations = match clustering {
        Some(p) => {
            let raw = crate::hierarchy::RawClustering::load(p)?;
            crate::hierarchy::validate_clustering(&net, &raw)
                .iter()
                .map(|v| v.to_string())
                .collect()
        }
        None => Vec::new(),
    };
    Ok(ValidationReport {
        nodes: net.n() + 1,
        lines: net.lines().len(),
        violations,
    })
}
