//! Subtree clustering and the hierarchical evaluation of the dual couplings.
//!
//! A central controller (CC) manages the unclustered backbone nodes and each
//! regional controller (RC) manages one subtree. Per iteration every RC sends
//! the CC one loss-weighted dual sum; the CC returns the cross-subtree and
//! backbone contributions for that subtree and sends unclustered nodes their
//! couplings directly; each RC adds its own in-subtree term and forwards the
//! result to its nodes. Message passing is simulated in-process.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{improved_entry, LineMeasurement};
use crate::network::{Network, PathIndex};
use crate::opf::{iterate, DualState, OpfProblem, Trajectory};
use crate::powerflow::{InjectionVector, PowerFlowState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSubtree {
    pub root: String,
    pub nodes: Vec<String>,
}

/// Clustering as read from file, with node names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawClustering {
    pub subtrees: Vec<RawSubtree>,
    #[serde(default)]
    pub unclustered: Vec<String>,
}

impl RawClustering {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// A subtree with node ids sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Subtree {
    pub root: usize,
    pub nodes: Vec<usize>,
}

/// Validated clustering over node ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub subtrees: Vec<Subtree>,
    /// Unclustered nodes, ascending.
    pub unclustered: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    UnknownNode(String),
    NetworkRootListed(String),
    EmptySubtree { subtree: usize },
    /// A node is listed in more than one part.
    Overlap { node: String },
    /// A non-root node is in no part.
    Uncovered { node: String },
    RootNotInSubtree { subtree: usize, root: String },
    /// The designated root's parent belongs to the same subtree.
    RootNotTopmost { subtree: usize, root: String },
    /// A member whose parent lies outside its subtree.
    Disconnected { subtree: usize, node: String },
    /// The root path of `node` passes through `via`, which is clustered.
    PathCrossesSubtree { node: String, via: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownNode(n) => write!(f, "unknown node `{n}`"),
            Violation::NetworkRootListed(n) => write!(f, "network root `{n}` may not be clustered"),
            Violation::EmptySubtree { subtree } => write!(f, "subtree {subtree} is empty"),
            Violation::Overlap { node } => write!(f, "node `{node}` is assigned more than once"),
            Violation::Uncovered { node } => write!(f, "node `{node}` is not assigned"),
            Violation::RootNotInSubtree { subtree, root } => {
                write!(f, "subtree {subtree}: root `{root}` is not a member")
            }
            Violation::RootNotTopmost { subtree, root } => {
                write!(f, "subtree {subtree}: parent of root `{root}` is in the same subtree")
            }
            Violation::Disconnected { subtree, node } => {
                write!(f, "subtree {subtree}: node `{node}` is not connected to the subtree root")
            }
            Violation::PathCrossesSubtree { node, via } => {
                write!(f, "root path of `{node}` passes through clustered node `{via}`")
            }
        }
    }
}

/// Checks the partition, subtree connectivity and the backbone-path rule.
/// An empty report means the clustering is valid.
pub fn validate_clustering(net: &Network, raw: &RawClustering) -> Vec<Violation> {
    const UNASSIGNED: usize = usize::MAX;
    const BACKBONE: usize = usize::MAX - 1;
    let mut out = Vec::new();
    let mut part = vec![UNASSIGNED; net.n() + 1];

    let mut assign = |name: &str, tag: usize, out: &mut Vec<Violation>| -> Option<usize> {
        let Some(id) = net.id_of(name) else {
            out.push(Violation::UnknownNode(name.to_string()));
            return None;
        };
        if id == 0 {
            out.push(Violation::NetworkRootListed(name.to_string()));
            return None;
        }
        if part[id] != UNASSIGNED {
            out.push(Violation::Overlap {
                node: name.to_string(),
            });
        } else {
            part[id] = tag;
        }
        Some(id)
    };

    let mut members: Vec<Vec<usize>> = Vec::with_capacity(raw.subtrees.len());
    for (k, st) in raw.subtrees.iter().enumerate() {
        if st.nodes.is_empty() {
            out.push(Violation::EmptySubtree { subtree: k });
        }
        members.push(st.nodes.iter().filter_map(|n| assign(n, k, &mut out)).collect());
    }
    let backbone: Vec<usize> = raw
        .unclustered
        .iter()
        .filter_map(|n| assign(n, BACKBONE, &mut out))
        .collect();
    for (id, &p) in part.iter().enumerate().skip(1) {
        if p == UNASSIGNED {
            out.push(Violation::Uncovered {
                node: net.name_of(id).to_string(),
            });
        }
    }

    let on_backbone = |id: usize| id == 0 || part[id] == BACKBONE;
    let check_path = |start: usize, out: &mut Vec<Violation>| {
        let mut cur = net.parent(start);
        while let Some(a) = cur {
            if !on_backbone(a) {
                out.push(Violation::PathCrossesSubtree {
                    node: net.name_of(start).to_string(),
                    via: net.name_of(a).to_string(),
                });
                break;
            }
            cur = net.parent(a);
        }
    };

    for (k, st) in raw.subtrees.iter().enumerate() {
        let root = match net.id_of(&st.root) {
            Some(r) if part[r] == k => r,
            Some(_) => {
                out.push(Violation::RootNotInSubtree {
                    subtree: k,
                    root: st.root.clone(),
                });
                continue;
            }
            None => {
                out.push(Violation::UnknownNode(st.root.clone()));
                continue;
            }
        };
        if net.parent(root).is_some_and(|p| part[p] == k) {
            out.push(Violation::RootNotTopmost {
                subtree: k,
                root: st.root.clone(),
            });
        }
        for &j in &members[k] {
            if j != root && part[j] == k && net.parent(j).is_none_or(|p| part[p] != k) {
                out.push(Violation::Disconnected {
                    subtree: k,
                    node: net.name_of(j).to_string(),
                });
            }
        }
        check_path(root, &mut out);
    }
    for &h in &backbone {
        if part[h] == BACKBONE {
            check_path(h, &mut out);
        }
    }
    out
}

impl Clustering {
    /// Resolves names to ids, rejecting any clustering with violations.
    pub fn resolve(net: &Network, raw: &RawClustering) -> Result<Self> {
        let report = validate_clustering(net, raw);
        if !report.is_empty() {
            let msg: Vec<String> = report.iter().map(|v| v.to_string()).collect();
            return Err(Error::InvalidClustering(msg.join("; ")));
        }
        let id = |n: &String| net.id_of(n).expect("validated");
        let subtrees = raw
            .subtrees
            .iter()
            .map(|st| {
                let mut nodes: Vec<usize> = st.nodes.iter().map(id).collect();
                nodes.sort_unstable();
                Subtree {
                    root: id(&st.root),
                    nodes,
                }
            })
            .collect();
        let mut unclustered: Vec<usize> = raw.unclustered.iter().map(id).collect();
        unclustered.sort_unstable();
        Ok(Clustering {
            subtrees,
            unclustered,
        })
    }

    pub fn load(net: &Network, path: &Path) -> Result<Self> {
        Self::resolve(net, &RawClustering::load(path)?)
    }

    /// Every node unclustered: the CC computes everything.
    pub fn flat(net: &Network) -> Self {
        Clustering {
            subtrees: Vec::new(),
            unclustered: (1..=net.n()).collect(),
        }
    }

    pub fn to_raw(&self, net: &Network) -> RawClustering {
        let name = |&j: &usize| net.name_of(j).to_string();
        RawClustering {
            subtrees: self
                .subtrees
                .iter()
                .map(|st| RawSubtree {
                    root: name(&st.root),
                    nodes: st.nodes.iter().map(name).collect(),
                })
                .collect(),
            unclustered: self.unclustered.iter().map(name).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.subtrees.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Cc,
    Rc(usize),
    Node(usize),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Cc => write!(f, "cc"),
            Endpoint::Rc(k) => write!(f, "rc{k}"),
            Endpoint::Node(h) => write!(f, "node{h}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Round {
    RcToCc,
    CcToRc,
    RcToNode,
    CcToNode,
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Round::RcToCc => "rc->cc",
            Round::CcToRc => "cc->rc",
            Round::RcToNode => "rc->node",
            Round::CcToNode => "cc->node",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub iteration: usize,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    /// Payload size in scalars.
    pub payload: usize,
    pub round: Round,
}

#[derive(Clone, Debug, Default)]
pub struct MessageLog {
    pub messages: Vec<Message>,
}

impl MessageLog {
    fn push(&mut self, iteration: usize, sender: Endpoint, receiver: Endpoint, payload: usize, round: Round) {
        self.messages.push(Message {
            iteration,
            sender,
            receiver,
            payload,
            round,
        });
    }

    pub fn count(&self, iteration: usize, round: Round) -> usize {
        self.messages
            .iter()
            .filter(|m| m.iteration == iteration && m.round == round)
            .count()
    }
}

/// Per-node line measurements, indexed by node id (entry 0 unused).
fn measurements(net: &Network, state: &PowerFlowState) -> Result<Vec<Option<LineMeasurement>>> {
    let mut out = vec![None; net.n() + 1];
    for (j, slot) in out.iter_mut().enumerate().skip(1) {
        *slot = Some(LineMeasurement::read(net, state, j)?);
    }
    Ok(out)
}

/// RC k's upstream report: sum over its nodes of (1 - |z|^2 l / v_i) * (mu_u - mu_l).
pub fn rc_weighted_dual_sum(
    net: &Network,
    subtree: &Subtree,
    duals: &DualState,
    state: &PowerFlowState,
) -> Result<f64> {
    let mut s = 0.0;
    for &j in &subtree.nodes {
        let m = LineMeasurement::read(net, state, j)?;
        s += m.loss_weight() * (duals.upper[j - 1] - duals.lower[j - 1]);
    }
    Ok(s)
}

/// Destination of a CC computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Destination {
    Subtree(usize),
    Node(usize),
}

/// Contribution of other subtrees to the destination's (alpha, beta): each
/// subtree's reported sum weighted by the shared root-path R (resp. X).
pub fn cc_cross_subtree_term(
    idx: &PathIndex,
    clustering: &Clustering,
    dest: Destination,
    rc_sums: &[f64],
) -> (f64, f64) {
    let (anchor, skip) = match dest {
        Destination::Subtree(k) => (clustering.subtrees[k].root, Some(k)),
        Destination::Node(h) => (h, None),
    };
    let (mut a, mut b) = (0.0, 0.0);
    for (k, st) in clustering.subtrees.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        a += idx.r(anchor, st.root) * rc_sums[k];
        b += idx.x(anchor, st.root) * rc_sums[k];
    }
    (a, b)
}

fn backbone_with(
    idx: &PathIndex,
    clustering: &Clustering,
    meas: &[Option<LineMeasurement>],
    duals: &DualState,
    h: usize,
) -> (f64, f64) {
    let (mut a, mut b) = (0.0, 0.0);
    for &j in &clustering.unclustered {
        let m = meas[j].as_ref().expect("measured");
        let (dp, dq) = improved_entry(idx, m, j, h);
        let w = duals.upper[j - 1] - duals.lower[j - 1];
        a += dp * w;
        b += dq * w;
    }
    (a, b)
}

/// Contribution of the unclustered nodes to the destination's (alpha, beta).
/// For a subtree destination the entries are evaluated at the subtree root,
/// which gives the same value for every member.
pub fn cc_backbone_term(
    net: &Network,
    idx: &PathIndex,
    clustering: &Clustering,
    state: &PowerFlowState,
    duals: &DualState,
    dest: Destination,
) -> Result<(f64, f64)> {
    let h = match dest {
        Destination::Subtree(k) => clustering.subtrees[k].root,
        Destination::Node(h) => h,
    };
    let mut meas = vec![None; net.n() + 1];
    for &j in &clustering.unclustered {
        meas[j] = Some(LineMeasurement::read(net, state, j)?);
    }
    Ok(backbone_with(idx, clustering, &meas, duals, h))
}

/// RC k's own term for destination h inside the subtree.
pub fn rc_in_subtree_term(
    idx: &PathIndex,
    subtree: &Subtree,
    meas: &[Option<LineMeasurement>],
    duals: &DualState,
    h: usize,
) -> (f64, f64) {
    let (mut a, mut b) = (0.0, 0.0);
    for &j in &subtree.nodes {
        let m = meas[j].as_ref().expect("measured");
        let (dp, dq) = improved_entry(idx, m, j, h);
        let w = duals.upper[j - 1] - duals.lower[j - 1];
        a += dp * w;
        b += dq * w;
    }
    (a, b)
}

/// (alpha, beta) over all non-root nodes computed through the CC/RC
/// exchange, with the messages of this iteration appended to `log`.
pub fn assemble_alpha_beta(
    net: &Network,
    idx: &PathIndex,
    clustering: &Clustering,
    state: &PowerFlowState,
    duals: &DualState,
    iteration: usize,
    log: &mut MessageLog,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = net.n();
    let meas = measurements(net, state)?;
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];

    let mut rc_sums = Vec::with_capacity(clustering.k());
    for (k, st) in clustering.subtrees.iter().enumerate() {
        let mut s = 0.0;
        for &j in &st.nodes {
            let m = meas[j].as_ref().expect("measured");
            s += m.loss_weight() * (duals.upper[j - 1] - duals.lower[j - 1]);
        }
        rc_sums.push(s);
        log.push(iteration, Endpoint::Rc(k), Endpoint::Cc, 1, Round::RcToCc);
    }

    for (k, st) in clustering.subtrees.iter().enumerate() {
        let (ca, cb) = cc_cross_subtree_term(idx, clustering, Destination::Subtree(k), &rc_sums);
        let (ba, bb) = backbone_with(idx, clustering, &meas, duals, st.root);
        let (ta, tb) = (ca + ba, cb + bb);
        log.push(iteration, Endpoint::Cc, Endpoint::Rc(k), 2, Round::CcToRc);
        for &h in &st.nodes {
            let (ia, ib) = rc_in_subtree_term(idx, st, &meas, duals, h);
            alpha[h - 1] = ia + ta;
            beta[h - 1] = ib + tb;
            log.push(iteration, Endpoint::Rc(k), Endpoint::Node(h), 2, Round::RcToNode);
        }
    }

    for &h in &clustering.unclustered {
        let (ba, bb) = backbone_with(idx, clustering, &meas, duals, h);
        let (ca, cb) = cc_cross_subtree_term(idx, clustering, Destination::Node(h), &rc_sums);
        alpha[h - 1] = ba + ca;
        beta[h - 1] = bb + cb;
        log.push(iteration, Endpoint::Cc, Endpoint::Node(h), 2, Round::CcToNode);
    }
    Ok((alpha, beta))
}

/// Primal-dual iteration with couplings assembled hierarchically. Produces
/// the same iterates as the centralized loss-corrected mode up to summation
/// order.
pub fn run_hierarchical(
    prob: &OpfProblem,
    clustering: &Clustering,
    u0: &InjectionVector,
) -> Result<(Trajectory, MessageLog)> {
    let report = validate_clustering(&prob.net, &clustering.to_raw(&prob.net));
    if let Some(v) = report.first() {
        return Err(Error::InvalidClustering(v.to_string()));
    }
    let mut log = MessageLog::default();
    let traj = iterate(prob, u0, |t, _, state, duals| {
        assemble_alpha_beta(&prob.net, &prob.idx, clustering, state, duals, t, &mut log)
    })?;
    Ok((traj, log))
}
