//! Radial feeder model: ingestion, validation and tree-path primitives.
//!
//! Nodes are densified at load time in breadth-first order from the substation,
//! so the root is always node `0`, every parent has a smaller id than its
//! children, and the line feeding node `j` is stored at line index `j - 1`.
//! Vectors indexed over the non-root nodes therefore share indices with the
//! line list.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Series line from `from` (closer to the root) to `to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

impl Line {
    /// |z|^2 = r^2 + x^2.
    pub fn z_sq(&self) -> f64 {
        self.r * self.r + self.x * self.x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub p_nom: f64,
    pub q_nom: f64,
    pub controllable: bool,
}

/// On-disk node record (`nodes` array / `nodes.csv`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawNode {
    pub name: String,
    pub p_nom_pu: f64,
    pub q_nom_pu: f64,
    pub controllable: bool,
}

/// On-disk line record (`lines` array / `lines.csv`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLine {
    pub from: String,
    pub to: String,
    pub r_pu: f64,
    pub x_pu: f64,
}

/// JSON network document. `base_kv` / `base_kva` / `description` are
/// documentation only and never enter a computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawNetwork {
    pub v0_squared_pu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_kv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_kva: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub nodes: Vec<RawNode>,
    pub lines: Vec<RawLine>,
}

#[derive(Deserialize)]
struct CsvMeta {
    v0_squared_pu: f64,
}

/// Immutable radial network rooted at node 0.
#[derive(Clone, Debug)]
pub struct Network {
    v0: f64,
    nodes: Vec<Node>,
    lines: Vec<Line>,
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    name_index: HashMap<String, usize>,
}

impl Network {
    /// Validates raw records and densifies node ids with the root at 0.
    pub fn from_raw(raw: &RawNetwork) -> Result<Self> {
        if !(raw.v0_squared_pu > 0.0) || !raw.v0_squared_pu.is_finite() {
            return Err(Error::NonpositiveV0(raw.v0_squared_pu));
        }
        if raw.nodes.is_empty() {
            return Err(Error::Malformed("no nodes".into()));
        }

        let mut ext: HashMap<&str, usize> = HashMap::with_capacity(raw.nodes.len());
        for (k, n) in raw.nodes.iter().enumerate() {
            if !n.p_nom_pu.is_finite() || !n.q_nom_pu.is_finite() {
                return Err(Error::Malformed(format!(
                    "non-finite nominal injection at node `{}`",
                    n.name
                )));
            }
            if ext.insert(n.name.as_str(), k).is_some() {
                return Err(Error::Malformed(format!("duplicate node `{}`", n.name)));
            }
        }

        let mut seen_pairs: HashMap<(usize, usize), ()> = HashMap::new();
        let mut uf = UnionFind::new(raw.nodes.len());
        let mut edges = Vec::with_capacity(raw.lines.len());
        for l in &raw.lines {
            let a = *ext
                .get(l.from.as_str())
                .ok_or_else(|| Error::UnknownNode(format!("`{}`", l.from)))?;
            let b = *ext
                .get(l.to.as_str())
                .ok_or_else(|| Error::UnknownNode(format!("`{}`", l.to)))?;
            if a == b {
                return Err(Error::CycleDetected {
                    from: l.from.clone(),
                    to: l.to.clone(),
                });
            }
            if !(l.r_pu >= 0.0 && l.x_pu >= 0.0) || !l.r_pu.is_finite() || !l.x_pu.is_finite() {
                return Err(Error::Malformed(format!(
                    "line `{}` -> `{}` has negative or non-finite impedance",
                    l.from, l.to
                )));
            }
            if l.r_pu == 0.0 && l.x_pu == 0.0 {
                return Err(Error::Malformed(format!(
                    "line `{}` -> `{}` has zero impedance",
                    l.from, l.to
                )));
            }
            if seen_pairs.insert((a, b), ()).is_some() {
                return Err(Error::DuplicateLine {
                    from: l.from.clone(),
                    to: l.to.clone(),
                });
            }
            if !uf.union(a, b) {
                return Err(Error::CycleDetected {
                    from: l.from.clone(),
                    to: l.to.clone(),
                });
            }
            edges.push((a, b, l.r_pu, l.x_pu));
        }

        // Acyclic; any leftover component means a disconnected node. Report the
        // first node (file order) of the smallest stray component.
        let mut comp_size: HashMap<usize, usize> = HashMap::new();
        for k in 0..raw.nodes.len() {
            *comp_size.entry(uf.find(k)).or_default() += 1;
        }
        if comp_size.len() > 1 {
            let largest = comp_size
                .iter()
                .max_by_key(|(root, size)| (**size, std::cmp::Reverse(**root)))
                .map(|(r, _)| *r)
                .unwrap();
            let stray = (0..raw.nodes.len())
                .find(|&k| uf.find(k) != largest)
                .unwrap();
            return Err(Error::DisconnectedNode(raw.nodes[stray].name.clone()));
        }

        let mut indeg = vec![0usize; raw.nodes.len()];
        let mut out: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); raw.nodes.len()];
        for &(a, b, r, x) in &edges {
            indeg[b] += 1;
            out[a].push((b, r, x));
        }
        let roots: Vec<usize> = (0..raw.nodes.len()).filter(|&k| indeg[k] == 0).collect();
        if roots.len() != 1 {
            let names: Vec<&str> = roots.iter().map(|&k| raw.nodes[k].name.as_str()).collect();
            return Err(Error::Malformed(format!(
                "lines must point away from a unique root; candidate roots: {names:?}"
            )));
        }

        // Breadth-first densification.
        let n_all = raw.nodes.len();
        let mut dense = vec![usize::MAX; n_all];
        let mut order = Vec::with_capacity(n_all);
        let mut queue = VecDeque::from([roots[0]]);
        dense[roots[0]] = 0;
        order.push(roots[0]);
        let mut lines = Vec::with_capacity(n_all - 1);
        let mut parent = vec![0usize; n_all];
        while let Some(a) = queue.pop_front() {
            for &(b, r, x) in &out[a] {
                let id = order.len();
                dense[b] = id;
                order.push(b);
                parent[id] = dense[a];
                lines.push(Line {
                    from: dense[a],
                    to: id,
                    r,
                    x,
                });
                queue.push_back(b);
            }
        }
        debug_assert_eq!(order.len(), n_all);

        let nodes: Vec<Node> = order
            .iter()
            .map(|&k| {
                let n = &raw.nodes[k];
                Node {
                    name: n.name.clone(),
                    p_nom: n.p_nom_pu,
                    q_nom: n.q_nom_pu,
                    controllable: n.controllable,
                }
            })
            .collect();
        let mut children = vec![Vec::new(); n_all];
        for l in &lines {
            children[l.from].push(l.to);
        }
        let name_index = nodes
            .iter()
            .enumerate()
            .map(|(k, n)| (n.name.clone(), k))
            .collect();

        Ok(Network {
            v0: raw.v0_squared_pu,
            nodes,
            lines,
            parent,
            children,
            name_index,
        })
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self> {
        let raw: RawNetwork = serde_json::from_reader(reader)?;
        Network::from_raw(&raw)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawNetwork = serde_json::from_str(s)?;
        Network::from_raw(&raw)
    }

    /// Reads the CSV variant: `nodes.csv` and `lines.csv` (same columns as
    /// the JSON records) plus `meta.json` holding `v0_squared_pu`.
    pub fn from_csv_dir(dir: &Path) -> Result<Self> {
        let meta: CsvMeta = serde_json::from_reader(fs::File::open(dir.join("meta.json"))?)?;
        let mut nodes = Vec::new();
        for rec in csv::Reader::from_path(dir.join("nodes.csv"))?.deserialize() {
            nodes.push(rec?);
        }
        let mut lines = Vec::new();
        for rec in csv::Reader::from_path(dir.join("lines.csv"))?.deserialize() {
            lines.push(rec?);
        }
        Network::from_raw(&RawNetwork {
            v0_squared_pu: meta.v0_squared_pu,
            base_kv: None,
            base_kva: None,
            description: None,
            nodes,
            lines,
        })
    }

    /// Loads a `.json` file or a CSV directory.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Network::from_csv_dir(path)
        } else {
            Network::from_json_reader(std::io::BufReader::new(fs::File::open(path)?))
        }
    }

    /// Rebuilds the raw document (dense order) for serialization.
    pub fn to_raw(&self) -> RawNetwork {
        RawNetwork {
            v0_squared_pu: self.v0,
            base_kv: None,
            base_kva: None,
            description: None,
            nodes: self
                .nodes
                .iter()
                .map(|n| RawNode {
                    name: n.name.clone(),
                    p_nom_pu: n.p_nom,
                    q_nom_pu: n.q_nom,
                    controllable: n.controllable,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| RawLine {
                    from: self.nodes[l.from].name.clone(),
                    to: self.nodes[l.to].name.clone(),
                    r_pu: l.r,
                    x_pu: l.x,
                })
                .collect(),
        }
    }

    /// Number of non-root nodes (N).
    pub fn n(&self) -> usize {
        self.lines.len()
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// The line feeding non-root node `j`.
    pub fn line_into(&self, j: usize) -> &Line {
        debug_assert!(j >= 1);
        &self.lines[j - 1]
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        (j != 0).then(|| self.parent[j])
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.name_index.get(name).copied()
    }

    pub fn name_of(&self, id: usize) -> &str {
        &self.nodes[id].name
    }

    pub(crate) fn check_node(&self, id: usize) -> Result<()> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.to_string()))
        }
    }

    /// Ancestors of `h` from the root down to `h` itself (root included).
    pub fn root_path_nodes(&self, h: usize) -> Vec<usize> {
        let mut path = vec![h];
        let mut k = h;
        while k != 0 {
            k = self.parent[k];
            path.push(k);
        }
        path.reverse();
        path
    }

    /// Lines from the root toward `h`, as line indices. Empty for the root.
    pub fn path_to_root(&self, h: usize) -> Result<Vec<usize>> {
        self.check_node(h)?;
        Ok(self.root_path_nodes(h)[1..].iter().map(|&k| k - 1).collect())
    }

    /// All lines in the subtree hanging below `xi`, as ascending line indices.
    pub fn downstream_lines(&self, xi: usize) -> Result<Vec<usize>> {
        self.check_node(xi)?;
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.children[xi].iter().rev().copied().collect();
        while let Some(k) = stack.pop() {
            out.push(k - 1);
            stack.extend(self.children[k].iter().rev());
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Copy with nominal injections replaced; topology untouched.
    pub(crate) fn with_nominal(&self, f: impl Fn(&Node) -> (f64, f64)) -> Network {
        let mut net = self.clone();
        for n in net.nodes.iter_mut() {
            let (p, q) = f(n);
            n.p_nom = p;
            n.q_nom = q;
        }
        net
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut k: usize) -> usize {
        while self.parent[k] != k {
            self.parent[k] = self.parent[self.parent[k]];
            k = self.parent[k];
        }
        k
    }

    /// False if `a` and `b` were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[rb] = ra;
        true
    }
}

/// Per-node box bounds on (p, q), indexed over the non-root nodes.
/// Non-controllable nodes carry a degenerate box pinned to their nominal
/// injection.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionBox {
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub controllable: Vec<bool>,
}

impl InjectionBox {
    pub fn validate(&self) -> Result<()> {
        let n = self.p_min.len();
        for v in [&self.p_max, &self.q_min, &self.q_max] {
            if v.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: v.len(),
                });
            }
        }
        for k in 0..n {
            if !(self.p_min[k] <= self.p_max[k]) || !(self.q_min[k] <= self.q_max[k]) {
                return Err(Error::InvalidArgument(format!(
                    "injection box inverted at node index {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.p_min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_min.is_empty()
    }
}

/// Common-path resistance/reactance and root-path membership.
///
/// Matrices are `(N+1) x (N+1)` and indexed by node id, so the root row and
/// column are zero: `R[0][h] = 0` for every `h`.
#[derive(Clone, Debug)]
pub struct PathIndex {
    r: DMatrix<f64>,
    x: DMatrix<f64>,
    on_path: Vec<Vec<bool>>,
}

impl PathIndex {
    /// R_jh (sum of 2r over the shared part of both root paths).
    pub fn r(&self, j: usize, h: usize) -> f64 {
        self.r[(j, h)]
    }

    pub fn x(&self, j: usize, h: usize) -> f64 {
        self.x[(j, h)]
    }

    /// True iff node `j` lies on the root path of `h` (`h` itself included).
    pub fn on_path(&self, j: usize, h: usize) -> bool {
        self.on_path[h][j]
    }

    pub fn r_matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn x_matrix(&self) -> &DMatrix<f64> {
        &self.x
    }
}

/// Builds R, X and the path indicators. Rows are filled in breadth-first order
/// using R_jh = R_ih + 2 r_ij 1(j on path of h), i = parent(j).
pub fn build_path_index(net: &Network) -> PathIndex {
    let size = net.n() + 1;
    let mut on_path = vec![vec![false; size]; size];
    on_path[0][0] = true;
    for h in 1..size {
        let p = net.parent[h];
        let (head, tail) = on_path.split_at_mut(h);
        tail[0].copy_from_slice(&head[p]);
        tail[0][h] = true;
    }

    let mut r = DMatrix::zeros(size, size);
    let mut x = DMatrix::zeros(size, size);
    for j in 1..size {
        let line = net.line_into(j);
        let i = line.from;
        for h in 1..size {
            let ind = if on_path[h][j] { 1.0 } else { 0.0 };
            r[(j, h)] = r[(i, h)] + 2.0 * line.r * ind;
            x[(j, h)] = x[(i, h)] + 2.0 * line.x * ind;
        }
    }
    PathIndex { r, x, on_path }
}
