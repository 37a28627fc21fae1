//! Extended causal DAGs under both adherence encodings, the strategy-centered
//! conversion, SWIGs, d-separation and the graphical identification checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Block;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "A_Y")]
    AY,
    #[serde(rename = "A_D")]
    AD,
    A,
    Z,
    #[serde(rename = "Z_Y")]
    ZY,
    #[serde(rename = "Z_D")]
    ZD,
    R,
    C,
    D,
    Y,
    #[serde(rename = "L_D")]
    LD,
    #[serde(rename = "L_Y")]
    LY,
    L,
    U,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::AY => "A_Y",
            Role::AD => "A_D",
            Role::A => "A",
            Role::Z => "Z",
            Role::ZY => "Z_Y",
            Role::ZD => "Z_D",
            Role::R => "R",
            Role::C => "C",
            Role::D => "D",
            Role::Y => "Y",
            Role::LD => "L_D",
            Role::LY => "L_Y",
            Role::L => "L",
            Role::U => "U",
        }
    }

    fn needs_time(self) -> Option<bool> {
        match self {
            Role::Z | Role::ZY | Role::ZD => Some(false),
            Role::U => None,
            _ => Some(true),
        }
    }

    pub fn is_covariate(self) -> bool {
        matches!(self, Role::L | Role::LD | Role::LY)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeLabel {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// Disambiguates several nodes sharing a role and time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl NodeLabel {
    pub fn new(role: Role, t: Option<usize>) -> Self {
        NodeLabel { role, t, name: None }
    }

    pub fn at(role: Role, t: usize) -> Self {
        NodeLabel { role, t: Some(t), name: None }
    }

    pub fn named(role: Role, t: Option<usize>, name: &str) -> Self {
        NodeLabel { role, t, name: Some(name.to_string()) }
    }
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.role.as_str())?;
        if let Some(t) = self.t {
            write!(f, "_{}", t)?;
        }
        if let Some(n) = &self.name {
            write!(f, "[{}]", n)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    pub nodes: Vec<NodeLabel>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub deterministic: Vec<[usize; 2]>,
    /// Time bound: follow-up intervals run 1..=K+1.
    #[serde(rename = "K")]
    pub k: usize,
}

impl Dag {
    /// Build and validate a graph.
    pub fn new(nodes: Vec<NodeLabel>, edges: Vec<[usize; 2]>, deterministic: Vec<[usize; 2]>, k: usize) -> Result<Self> {
        let g = Dag { nodes, edges, deterministic, k };
        g.check()?;
        Ok(g)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Dag = serde_json::from_str(s)?;
        g.check()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn check(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            match (node.role.needs_time(), node.t) {
                (Some(true), None) => return Err(Error::Graph(format!("node {} needs a time index", node))),
                (Some(false), Some(_)) => return Err(Error::Graph(format!("node {} takes no time index", node))),
                _ => {}
            }
            if let Some(t) = node.t {
                if t > self.k + 1 {
                    return Err(Error::Graph(format!("node {} beyond time bound K+1 = {}", node, self.k + 1)));
                }
            }
            if !seen.insert(node.to_string()) {
                return Err(Error::Graph(format!("duplicate node {}", node)));
            }
        }
        let mut edge_set = BTreeSet::new();
        for &[a, b] in &self.edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge [{}, {}] references a missing node", a, b)));
            }
            if a == b {
                return Err(Error::Graph(format!("self loop on {}", self.nodes[a])));
            }
            edge_set.insert((a, b));
        }
        for &[a, b] in &self.deterministic {
            if !edge_set.contains(&(a, b)) {
                return Err(Error::Graph(format!("deterministic edge [{}, {}] is not an edge", a, b)));
            }
        }
        if self.topological_order().is_none() {
            return Err(Error::Graph("graph has a cycle".into()));
        }
        Ok(())
    }

    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let adj = Adj::of_dag(self);
        let mut indeg: Vec<usize> = adj.parents.iter().map(|p| p.len()).collect();
        let mut queue: VecDeque<usize> = (0..indeg.len()).filter(|&i| indeg[i] == 0).collect();
        let mut out = Vec::with_capacity(indeg.len());
        while let Some(v) = queue.pop_front() {
            out.push(v);
            for &c in &adj.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        (out.len() == indeg.len()).then_some(out)
    }

    pub fn find(&self, role: Role, t: Option<usize>) -> Option<usize> {
        self.nodes.iter().position(|n| n.role == role && n.t == t)
    }

    /// Look a node up by its display name, e.g. `R_2` or `Z_Y`.
    pub fn find_name(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.to_string() == name)
            .ok_or_else(|| Error::Graph(format!("unknown node `{}`", name)))
    }

    pub fn nodes_where(&self, f: impl Fn(&NodeLabel) -> bool) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| f(&self.nodes[i])).collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&[a, b])
    }

    /// Edges as display-name pairs, sorted.
    pub fn edge_names(&self) -> BTreeSet<(String, String)> {
        self.edges.iter().map(|&[a, b]| (self.nodes[a].to_string(), self.nodes[b].to_string())).collect()
    }

    /// Same graph without the deterministic edges.
    pub fn without_deterministic(&self) -> Dag {
        let det: BTreeSet<[usize; 2]> = self.deterministic.iter().copied().collect();
        Dag {
            nodes: self.nodes.clone(),
            edges: self.edges.iter().copied().filter(|e| !det.contains(e)).collect(),
            deterministic: vec![],
            k: self.k,
        }
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph G {\n  rankdir=LR;\n");
        for n in &self.nodes {
            s.push_str(&format!("  \"{}\";\n", n));
        }
        for &[a, b] in &self.edges {
            let bold = if self.deterministic.contains(&[a, b]) { " [style=bold]" } else { "" };
            s.push_str(&format!("  \"{}\" -> \"{}\"{};\n", self.nodes[a], self.nodes[b], bold));
        }
        s.push_str("}\n");
        s
    }

    pub fn is_strategy_centered(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.role, Role::ZY | Role::ZD | Role::R))
    }
}

/// Replace the time-varying treatment components A_{W,k} by
/// the baseline components Z_W and adherence nodes R_k.
pub fn convert_to_strategy_centered(g: &Dag) -> Result<Dag> {
    g.check()?;
    if g.is_strategy_centered() {
        return Err(Error::Graph("graph is already strategy-centered".into()));
    }
    if g.nodes.iter().any(|n| n.role == Role::A) {
        return Err(Error::Graph("undivided treatment node A; split it into A_Y and A_D first".into()));
    }
    for role in [Role::AY, Role::AD] {
        let times: BTreeSet<usize> = g.nodes.iter().filter(|n| n.role == role).filter_map(|n| n.t).collect();
        if let Some(&max) = times.iter().next_back() {
            if times.len() != max || times.iter().next() != Some(&1) {
                return Err(Error::Graph(format!("time-index gap among {} nodes", role)));
            }
        }
    }
    let mut nodes: Vec<NodeLabel> = Vec::new();
    let mut gamma = vec![usize::MAX; g.nodes.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        if !matches!(n.role, Role::AY | Role::AD) {
            gamma[i] = nodes.len();
            nodes.push(n.clone());
        }
    }
    let zy = nodes.len();
    nodes.push(NodeLabel::new(Role::ZY, None));
    let zd = nodes.len();
    nodes.push(NodeLabel::new(Role::ZD, None));
    let mut r_of = BTreeMap::new();
    for k in 1..=g.k + 1 {
        r_of.insert(k, nodes.len());
        nodes.push(NodeLabel::at(Role::R, k));
    }
    for (i, n) in g.nodes.iter().enumerate() {
        if matches!(n.role, Role::AY | Role::AD) {
            gamma[i] = r_of[&n.t.unwrap()];
        }
    }
    let adj = Adj::of_dag(g);
    let mut edges: BTreeSet<[usize; 2]> = BTreeSet::new();
    for (i, n) in g.nodes.iter().enumerate() {
        let z_w = match n.role {
            Role::AY => zy,
            Role::AD => zd,
            _ => continue,
        };
        let r_k = gamma[i];
        for &x in &adj.children[i] {
            edges.insert([z_w, gamma[x]]);
            if gamma[x] != r_k {
                edges.insert([r_k, gamma[x]]);
            }
        }
        for &x in &adj.parents[i] {
            if gamma[x] != r_k {
                edges.insert([gamma[x], r_k]);
            }
        }
        edges.insert([z_w, r_k]);
    }
    for &[a, b] in &g.edges {
        if gamma[a] < zy && gamma[b] < zy && !is_treatment(g, a) && !is_treatment(g, b) {
            edges.insert([gamma[a], gamma[b]]);
        }
    }
    // Z_W -> R_k is required for every k, even without a matching A_{W,k}.
    for &r in r_of.values() {
        edges.insert([zy, r]);
        edges.insert([zd, r]);
    }
    let deterministic = g
        .deterministic
        .iter()
        .filter(|&&[a, b]| !is_treatment(g, a) && !is_treatment(g, b))
        .map(|&[a, b]| [gamma[a], gamma[b]])
        .collect();
    let out = Dag { nodes, edges: edges.into_iter().collect(), deterministic, k: g.k };
    if out.topological_order().is_none() {
        return Err(Error::Graph("conversion produced a cycle".into()));
    }
    Ok(out)
}

fn is_treatment(g: &Dag, i: usize) -> bool {
    matches!(g.nodes[i].role, Role::AY | Role::AD)
}

// ---------------------------------------------------------------- SWIG

#[derive(Debug, Clone, PartialEq)]
pub struct Swig {
    pub base: Dag,
    /// Intervened nodes of `base` with their fixed values.
    pub interventions: Vec<(usize, u8)>,
}

impl Swig {
    /// Index of the fixed half of the i-th intervention.
    pub fn fixed_index(&self, i: usize) -> usize {
        self.base.nodes.len() + i
    }
}

pub fn build_swig(g: &Dag, interventions: &[(usize, u8)]) -> Result<Swig> {
    let mut seen = BTreeSet::new();
    for &(v, _) in interventions {
        if v >= g.nodes.len() {
            return Err(Error::Graph(format!("intervention on missing node {}", v)));
        }
        if !seen.insert(v) {
            return Err(Error::Graph(format!("node {} intervened twice", g.nodes[v])));
        }
    }
    Ok(Swig { base: g.clone(), interventions: interventions.to_vec() })
}

/// Adjacency view used by all graph queries. Fixed nodes never lie on a path.
#[derive(Debug, Clone)]
pub struct Adj {
    pub parents: Vec<Vec<usize>>,
    pub children: Vec<Vec<usize>>,
    pub fixed: Vec<bool>,
    pub names: Vec<String>,
}

impl Adj {
    pub fn of_dag(g: &Dag) -> Adj {
        let n = g.nodes.len();
        let mut parents = vec![vec![]; n];
        let mut children = vec![vec![]; n];
        for &[a, b] in &g.edges {
            if a < n && b < n && !children[a].contains(&b) {
                children[a].push(b);
                parents[b].push(a);
            }
        }
        Adj { parents, children, fixed: vec![false; n], names: g.nodes.iter().map(|n| n.to_string()).collect() }
    }

    /// Node-split graph: random halves keep the incoming edges, fixed halves
    /// (appended after the base nodes) take the outgoing ones.
    pub fn of_swig(s: &Swig) -> Adj {
        let n = s.base.nodes.len();
        let m = s.interventions.len();
        let mut fixed_of = vec![None; n];
        for (i, &(v, _)) in s.interventions.iter().enumerate() {
            fixed_of[v] = Some(n + i);
        }
        let mut parents = vec![vec![]; n + m];
        let mut children = vec![vec![]; n + m];
        for &[a, b] in &s.base.edges {
            let from = fixed_of[a].unwrap_or(a);
            if !children[from].contains(&b) {
                children[from].push(b);
                parents[b].push(from);
            }
        }
        let mut names: Vec<String> = s.base.nodes.iter().map(|n| n.to_string()).collect();
        for &(v, val) in &s.interventions {
            names.push(format!("{}={}", s.base.nodes[v].to_string().to_lowercase(), val));
        }
        let mut fixed = vec![false; n + m];
        fixed[n..].iter_mut().for_each(|f| *f = true);
        Adj { parents, children, fixed, names }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    /// Nodes in `z` together with all their ancestors.
    fn ancestors_of(&self, z: &[usize]) -> Vec<bool> {
        let mut anc = vec![false; self.len()];
        let mut stack: Vec<usize> = z.to_vec();
        while let Some(v) = stack.pop() {
            if !anc[v] {
                anc[v] = true;
                stack.extend(self.parents[v].iter().copied());
            }
        }
        anc
    }
}

pub trait AsGraph {
    fn adj(&self) -> Adj;
}

impl AsGraph for Dag {
    fn adj(&self) -> Adj {
        Adj::of_dag(self)
    }
}

impl AsGraph for Swig {
    fn adj(&self) -> Adj {
        Adj::of_swig(self)
    }
}

impl AsGraph for Adj {
    fn adj(&self) -> Adj {
        self.clone()
    }
}

fn check_sets(adj: &Adj, x: &[usize], y: &[usize], z: &[usize]) -> Result<()> {
    for &v in x.iter().chain(y).chain(z) {
        if v >= adj.len() {
            return Err(Error::Graph(format!("unknown node index {}", v)));
        }
    }
    for &v in x.iter().chain(y) {
        if adj.fixed[v] {
            return Err(Error::Graph(format!("fixed node {} cannot be queried", adj.names[v])));
        }
    }
    let xs: BTreeSet<_> = x.iter().collect();
    let ys: BTreeSet<_> = y.iter().collect();
    let zs: BTreeSet<_> = z.iter().collect();
    if !xs.is_disjoint(&ys) || !xs.is_disjoint(&zs) || !ys.is_disjoint(&zs) {
        return Err(Error::Graph("d-separation sets must be disjoint".into()));
    }
    Ok(())
}

/// Reachability (Bayes-ball) d-separation of `x` and `y` given `z`.
pub fn d_separated(g: &impl AsGraph, x: &[usize], y: &[usize], z: &[usize]) -> Result<bool> {
    let adj = g.adj();
    check_sets(&adj, x, y, z)?;
    Ok(separated_in(&adj, x, y, z))
}

fn separated_in(adj: &Adj, x: &[usize], y: &[usize], z: &[usize]) -> bool {
    let n = adj.len();
    let mut in_z = vec![false; n];
    for &v in z {
        in_z[v] = true;
    }
    let anc = adj.ancestors_of(z);
    let mut in_y = vec![false; n];
    for &v in y {
        in_y[v] = true;
    }
    // visited[v][0]: arrived from a child, visited[v][1]: arrived from a parent
    let mut visited = vec![[false; 2]; n];
    let mut queue: VecDeque<(usize, usize)> = x.iter().map(|&v| (v, 0)).collect();
    while let Some((v, dir)) = queue.pop_front() {
        if adj.fixed[v] || visited[v][dir] {
            continue;
        }
        visited[v][dir] = true;
        if !in_z[v] && in_y[v] {
            return false;
        }
        if dir == 0 {
            if !in_z[v] {
                queue.extend(adj.parents[v].iter().map(|&p| (p, 0)));
                queue.extend(adj.children[v].iter().map(|&c| (c, 1)));
            }
        } else {
            if !in_z[v] {
                queue.extend(adj.children[v].iter().map(|&c| (c, 1)));
            }
            if anc[v] {
                queue.extend(adj.parents[v].iter().map(|&p| (p, 0)));
            }
        }
    }
    true
}

/// Whether a given simple path is open given `z`.
pub fn path_is_open(g: &impl AsGraph, path: &[usize], z: &[usize]) -> bool {
    let adj = g.adj();
    let anc = adj.ancestors_of(z);
    let adjacent = |a: usize, b: usize| adj.children[a].contains(&b) || adj.children[b].contains(&a);
    if path.iter().any(|&v| adj.fixed[v]) {
        return false;
    }
    if path.windows(2).any(|w| !adjacent(w[0], w[1])) {
        return false;
    }
    let distinct: BTreeSet<_> = path.iter().collect();
    if distinct.len() != path.len() {
        return false;
    }
    path.windows(3).all(|w| {
        let collider = adj.children[w[0]].contains(&w[1]) && adj.children[w[2]].contains(&w[1]);
        if collider {
            anc[w[1]]
        } else {
            !z.contains(&w[1])
        }
    })
}

/// One open simple path between `x` and `y` given `z`, if any.
pub fn open_path(g: &impl AsGraph, x: &[usize], y: &[usize], z: &[usize]) -> Result<Option<Vec<usize>>> {
    let adj = g.adj();
    check_sets(&adj, x, y, z)?;
    if separated_in(&adj, x, y, z) {
        return Ok(None);
    }
    Ok(find_open_path(&adj, x, y, z))
}

fn find_open_path(adj: &Adj, x: &[usize], y: &[usize], z: &[usize]) -> Option<Vec<usize>> {
    let n = adj.len();
    let anc = adj.ancestors_of(z);
    let mut in_z = vec![false; n];
    z.iter().for_each(|&v| in_z[v] = true);
    let mut in_y = vec![false; n];
    y.iter().for_each(|&v| in_y[v] = true);
    let neighbors = |v: usize| adj.parents[v].iter().chain(adj.children[v].iter()).copied().collect::<Vec<_>>();
    // The interior node `mid` between `prev` and `next` lets the path through.
    let passes = |prev: usize, mid: usize, next: usize| {
        let collider = adj.children[prev].contains(&mid) && adj.children[next].contains(&mid);
        if collider {
            anc[mid]
        } else {
            !in_z[mid]
        }
    };
    fn dfs(
        path: &mut Vec<usize>,
        on_path: &mut Vec<bool>,
        adj: &Adj,
        in_y: &[bool],
        neighbors: &dyn Fn(usize) -> Vec<usize>,
        passes: &dyn Fn(usize, usize, usize) -> bool,
    ) -> bool {
        let v = *path.last().unwrap();
        if path.len() > 1 && in_y[v] {
            return true;
        }
        for w in neighbors(v) {
            if on_path[w] || adj.fixed[w] {
                continue;
            }
            if path.len() >= 2 && !passes(path[path.len() - 2], v, w) {
                continue;
            }
            path.push(w);
            on_path[w] = true;
            if dfs(path, on_path, adj, in_y, neighbors, passes) {
                return true;
            }
            on_path[w] = false;
            path.pop();
        }
        false
    }
    for &s in x {
        let mut path = vec![s];
        let mut on_path = vec![false; n];
        on_path[s] = true;
        if dfs(&mut path, &mut on_path, adj, &in_y, &neighbors, &passes) {
            return Some(path);
        }
    }
    None
}

// ---------------------------------------------------------------- DCC

/// Assignment of every time-varying covariate node to the L_D or L_Y block.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DccPartition {
    pub blocks: BTreeMap<usize, Block>,
}

impl DccPartition {
    /// L_D and L_Y nodes keep their role; plain L nodes default to `fallback`.
    pub fn from_roles(g: &Dag, fallback: Block) -> Self {
        let mut blocks = BTreeMap::new();
        for (i, n) in g.nodes.iter().enumerate() {
            let b = match n.role {
                Role::LD => Block::D,
                Role::LY => Block::Y,
                Role::L => fallback,
                _ => continue,
            };
            blocks.insert(i, b);
        }
        DccPartition { blocks }
    }

    pub fn check(&self, g: &Dag) -> Result<()> {
        for (&i, &b) in &self.blocks {
            let node = g.nodes.get(i).ok_or_else(|| Error::Graph(format!("partition references missing node {}", i)))?;
            let ok = match node.role {
                Role::L => true,
                Role::LD => b == Block::D,
                Role::LY => b == Block::Y,
                _ => false,
            };
            if !ok {
                return Err(Error::Graph(format!("partition puts {} in the {:?} block", node, b)));
            }
        }
        for (i, n) in g.nodes.iter().enumerate() {
            if n.role.is_covariate() && !self.blocks.contains_key(&i) {
                return Err(Error::Graph(format!("partition misses covariate node {}", n)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DccCheck {
    pub k: usize,
    pub condition: u8,
    pub statement: String,
    pub holds: bool,
    /// Open path witnessing a failure, as node names.
    pub path: Option<Vec<String>>,
    #[serde(skip)]
    pub path_idx: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DccReport {
    pub checks: Vec<DccCheck>,
}

impl DccReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn failures(&self) -> impl Iterator<Item = &DccCheck> {
        self.checks.iter().filter(|c| !c.holds)
    }
}

struct Statement {
    k: usize,
    condition: u8,
    x: Vec<usize>,
    y: Vec<usize>,
    z: Vec<usize>,
}

fn run_statements(g: &Dag, swig: &Swig, stmts: Vec<Statement>) -> DccReport {
    let adj = Adj::of_swig(swig);
    let name = |v: &[usize]| v.iter().map(|&i| g.nodes[i].to_string()).collect::<Vec<_>>().join(",");
    let checks = stmts
        .into_iter()
        .map(|s| {
            let statement = format!("{} _||_ {} | {{{}}}", name(&s.x), name(&s.y), name(&s.z));
            if s.x.is_empty() || s.y.is_empty() {
                return DccCheck { k: s.k, condition: s.condition, statement, holds: true, path: None, path_idx: None };
            }
            let holds = separated_in(&adj, &s.x, &s.y, &s.z);
            let path_idx = if holds { None } else { find_open_path(&adj, &s.x, &s.y, &s.z) };
            let path = path_idx.as_ref().map(|p| p.iter().map(|&i| adj.names[i].clone()).collect());
            DccCheck { k: s.k, condition: s.condition, statement, holds, path, path_idx }
        })
        .collect();
    DccReport { checks }
}

fn upto(g: &Dag, role: Role, t: usize) -> Vec<usize> {
    g.nodes_where(|n| n.role == role && n.t.is_some_and(|s| s <= t))
}

fn at(g: &Dag, role: Role, t: usize) -> Vec<usize> {
    g.nodes_where(|n| n.role == role && n.t == Some(t))
}

fn covs(g: &Dag, p: &DccPartition, block: Option<Block>, pred: impl Fn(usize) -> bool) -> Vec<usize> {
    p.blocks
        .iter()
        .filter(|(&i, &b)| block.is_none_or(|bb| bb == b) && pred(g.nodes[i].t.unwrap_or(0)))
        .map(|(&i, _)| i)
        .collect()
}

/// The four dismissible component conditions for k = 0..=K, read as
/// d-separations in the SWIG intervening on every C and R node.
pub fn check_dcc(g: &Dag, partition: &DccPartition) -> Result<DccReport> {
    if !g.is_strategy_centered() || g.find(Role::ZY, None).is_none() || g.find(Role::ZD, None).is_none() {
        return Err(Error::Graph("check_dcc needs a strategy-centered graph with Z_Y and Z_D".into()));
    }
    partition.check(g)?;
    let g = g.without_deterministic();
    let zy = g.find(Role::ZY, None).unwrap();
    let zd = g.find(Role::ZD, None).unwrap();
    let iv: Vec<(usize, u8)> = g
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match n.role {
            Role::C => Some((i, 0)),
            Role::R => Some((i, 1)),
            _ => None,
        })
        .collect();
    let swig = build_swig(&g, &iv)?;
    let mut stmts = Vec::new();
    for k in 0..=g.k {
        let cat = |a: Vec<usize>, b: Vec<usize>| [a, b].concat();
        let hist_k = covs(&g, partition, None, |t| t <= k);
        let hist_km1 = covs(&g, partition, None, |t| t + 1 <= k);
        stmts.push(Statement {
            k,
            condition: 1,
            x: at(&g, Role::Y, k + 1),
            y: vec![zd],
            z: cat(cat(vec![zy], upto(&g, Role::D, k + 1)), cat(upto(&g, Role::Y, k), hist_k.clone())),
        });
        stmts.push(Statement {
            k,
            condition: 2,
            x: at(&g, Role::D, k + 1),
            y: vec![zy],
            z: cat(cat(vec![zd], upto(&g, Role::D, k)), cat(upto(&g, Role::Y, k), hist_k)),
        });
        stmts.push(Statement {
            k,
            condition: 3,
            x: covs(&g, partition, Some(Block::Y), |t| t == k),
            y: vec![zd],
            z: cat(
                cat(vec![zy], upto(&g, Role::D, k)),
                cat(upto(&g, Role::Y, k), cat(covs(&g, partition, Some(Block::D), |t| t == k), hist_km1.clone())),
            ),
        });
        stmts.push(Statement {
            k,
            condition: 4,
            x: covs(&g, partition, Some(Block::D), |t| t == k),
            y: vec![zy],
            z: cat(cat(vec![zd], upto(&g, Role::D, k)), cat(upto(&g, Role::Y, k), hist_km1)),
        });
    }
    Ok(run_statements(&g, &swig, stmts))
}

/// The same four conditions stated for a treatment-centered graph: the
/// components are the sets Ā_{D,k} and Ā_{Y,k}, and only C nodes are split.
pub fn check_dcc_treatment_centered(g: &Dag, partition: &DccPartition) -> Result<DccReport> {
    if g.is_strategy_centered() {
        return Err(Error::Graph("expected a treatment-centered graph".into()));
    }
    partition.check(g)?;
    let g = g.without_deterministic();
    let iv: Vec<(usize, u8)> = g.nodes_where(|n| n.role == Role::C).into_iter().map(|i| (i, 0)).collect();
    let swig = build_swig(&g, &iv)?;
    let mut stmts = Vec::new();
    for k in 0..=g.k {
        let cat = |a: Vec<usize>, b: Vec<usize>| [a, b].concat();
        let hist_k = covs(&g, partition, None, |t| t <= k);
        let hist_km1 = covs(&g, partition, None, |t| t + 1 <= k);
        stmts.push(Statement {
            k,
            condition: 1,
            x: at(&g, Role::Y, k + 1),
            y: upto(&g, Role::AD, k + 1),
            z: cat(cat(upto(&g, Role::AY, k + 1), upto(&g, Role::D, k + 1)), cat(upto(&g, Role::Y, k), hist_k.clone())),
        });
        stmts.push(Statement {
            k,
            condition: 2,
            x: at(&g, Role::D, k + 1),
            y: upto(&g, Role::AY, k + 1),
            z: cat(cat(upto(&g, Role::AD, k + 1), upto(&g, Role::D, k)), cat(upto(&g, Role::Y, k), hist_k)),
        });
        stmts.push(Statement {
            k,
            condition: 3,
            x: covs(&g, partition, Some(Block::Y), |t| t == k),
            y: upto(&g, Role::AD, k),
            z: cat(
                cat(upto(&g, Role::AY, k), upto(&g, Role::D, k)),
                cat(upto(&g, Role::Y, k), cat(covs(&g, partition, Some(Block::D), |t| t == k), hist_km1.clone())),
            ),
        });
        stmts.push(Statement {
            k,
            condition: 4,
            x: covs(&g, partition, Some(Block::D), |t| t == k),
            y: upto(&g, Role::AY, k),
            z: cat(cat(upto(&g, Role::AD, k), upto(&g, Role::D, k)), cat(upto(&g, Role::Y, k), hist_km1)),
        });
    }
    Ok(run_statements(&g, &swig, stmts))
}

// ---------------------------------------------------------------- isolation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "Z_Y")]
    ZY,
    #[serde(rename = "Z_D")]
    ZD,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsolationResult {
    pub holds: bool,
    pub witness: Option<Vec<String>>,
}

/// Partial isolation: every directed path from Z_Y to a D node (resp. from
/// Z_D to a Y node) must pass through a Y (resp. D), R or C node. Path
/// endpoints do not count as intersections.
pub fn check_partial_isolation(g: &Dag, which: Component) -> Result<IsolationResult> {
    let g = g.without_deterministic();
    let (src_role, target, blockers) = match which {
        Component::ZY => (Role::ZY, Role::D, [Role::Y, Role::R, Role::C]),
        Component::ZD => (Role::ZD, Role::Y, [Role::D, Role::R, Role::C]),
    };
    let src = g.find(src_role, None).ok_or_else(|| Error::Graph(format!("no {} node", src_role)))?;
    let adj = Adj::of_dag(&g);
    // DFS over directed paths whose interior avoids the blockers.
    let mut parent = vec![usize::MAX; g.nodes.len()];
    let mut seen = vec![false; g.nodes.len()];
    let mut stack = vec![src];
    seen[src] = true;
    while let Some(v) = stack.pop() {
        for &c in &adj.children[v] {
            if seen[c] {
                continue;
            }
            seen[c] = true;
            parent[c] = v;
            if g.nodes[c].role == target {
                let mut path = vec![c];
                let mut cur = c;
                while cur != src {
                    cur = parent[cur];
                    path.push(cur);
                }
                path.reverse();
                let witness = path.iter().map(|&i| g.nodes[i].to_string()).collect();
                return Ok(IsolationResult { holds: false, witness: Some(witness) });
            }
            if !blockers.contains(&g.nodes[c].role) {
                stack.push(c);
            }
        }
    }
    Ok(IsolationResult { holds: true, witness: None })
}

// ---------------------------------------------------------------- fixtures

/// Small treatment-centered graph with K = 1 and one competing event.
pub fn example_treatment_centered() -> Dag {
    let nodes = vec![
        NodeLabel::at(Role::AY, 1),
        NodeLabel::at(Role::AY, 2),
        NodeLabel::at(Role::AD, 1),
        NodeLabel::at(Role::AD, 2),
        NodeLabel::at(Role::D, 2),
        NodeLabel::at(Role::Y, 2),
    ];
    Dag::new(nodes, vec![[0, 1], [2, 3], [1, 5], [3, 4], [4, 5]], vec![], 1).expect("valid fixture")
}

/// Strategy-centered graph of the two-period simulation design, with a
/// single covariate L_1 in the L_D block.
pub fn simulation_graph() -> Dag {
    use Role::*;
    let names: Vec<NodeLabel> = vec![
        NodeLabel::at(LD, 0),
        NodeLabel::new(ZY, None),
        NodeLabel::new(ZD, None),
        NodeLabel::at(C, 1),
        NodeLabel::at(R, 1),
        NodeLabel::at(D, 1),
        NodeLabel::at(Y, 1),
        NodeLabel::at(LD, 1),
        NodeLabel::at(C, 2),
        NodeLabel::at(R, 2),
        NodeLabel::at(D, 2),
        NodeLabel::at(Y, 2),
    ];
    let idx = |s: &str| names.iter().position(|n| n.to_string() == s).unwrap();
    let pairs: &[(&str, &[&str])] = &[
        ("Z_Y", &["R_1", "R_2", "Y_1", "Y_2"]),
        ("Z_D", &["R_1", "R_2", "D_1", "D_2", "L_D_1"]),
        ("R_1", &["D_1", "Y_1", "L_D_1", "R_2"]),
        ("R_2", &["D_2", "Y_2"]),
        ("L_D_0", &["D_1", "Y_1", "L_D_1"]),
        ("L_D_1", &["C_2", "R_2", "D_2", "Y_2"]),
        ("C_1", &["R_1", "Y_1", "D_1", "L_D_1", "C_2"]),
        ("D_1", &["Y_1", "L_D_1", "D_2", "C_2", "R_2"]),
        ("Y_1", &["C_2", "Y_2", "D_2", "R_2", "L_D_1"]),
        ("C_2", &["R_2", "Y_2", "D_2"]),
        ("D_2", &["Y_2"]),
    ];
    let mut edges = Vec::new();
    for (from, tos) in pairs {
        for to in *tos {
            edges.push([idx(from), idx(to)]);
        }
    }
    Dag::new(names, edges, vec![], 1).expect("valid fixture")
}

pub mod random {
    //! Random time-ordered graphs for property tests.

    use rand::Rng;

    use super::*;

    #[derive(Debug, Clone)]
    pub struct RandomGraphConfig {
        pub k: usize,
        /// Covariate nodes per time 0..=K.
        pub n_l: usize,
        pub edge_p: f64,
        /// Edge probability out of the treatment components.
        pub treat_p: f64,
        /// Unmeasured nodes, each a root with random later children.
        pub n_u: usize,
        /// Probability that a covariate node joins the L_Y block.
        pub ly_p: f64,
    }

    impl Default for RandomGraphConfig {
        fn default() -> Self {
            RandomGraphConfig { k: 1, n_l: 1, edge_p: 0.3, treat_p: 0.3, n_u: 0, ly_p: 0.5 }
        }
    }

    fn cov<R: Rng>(rng: &mut R, cfg: &RandomGraphConfig, t: usize, j: usize) -> NodeLabel {
        let role = if rng.random_bool(cfg.ly_p) { Role::LY } else { Role::LD };
        NodeLabel::named(role, Some(t), &format!("{}", j))
    }

    fn wire<R: Rng>(rng: &mut R, order: &[NodeLabel], cfg: &RandomGraphConfig, roots: &[Role]) -> Vec<[usize; 2]> {
        let mut edges = Vec::new();
        for i in 0..order.len() {
            for j in i + 1..order.len() {
                if roots.contains(&order[j].role) {
                    continue;
                }
                let p = if matches!(order[i].role, Role::AY | Role::AD | Role::ZY | Role::ZD) { cfg.treat_p } else { cfg.edge_p };
                if rng.random_bool(p) {
                    edges.push([i, j]);
                }
            }
        }
        edges
    }

    fn with_unmeasured<R: Rng>(rng: &mut R, nodes: &mut Vec<NodeLabel>, edges: &mut Vec<[usize; 2]>, cfg: &RandomGraphConfig) {
        let n = nodes.len();
        for u in 0..cfg.n_u {
            let id = nodes.len();
            nodes.push(NodeLabel::named(Role::U, None, &format!("{}", u)));
            let eligible: Vec<usize> = (0..n).filter(|&i| !matches!(nodes[i].role, Role::ZY | Role::ZD | Role::Z)).collect();
            for &c in &eligible {
                if rng.random_bool(cfg.edge_p) {
                    edges.push([id, c]);
                }
            }
        }
    }

    /// Treatment-centered graph in temporal order L_0, then per k:
    /// C_k, A_{Y,k}, A_{D,k}, D_k, Y_k, L_k (no L after the last interval).
    pub fn treatment_centered<R: Rng>(rng: &mut R, cfg: &RandomGraphConfig) -> Dag {
        let mut nodes = Vec::new();
        for j in 0..cfg.n_l {
            nodes.push(cov(rng, cfg, 0, j));
        }
        for k in 1..=cfg.k + 1 {
            nodes.push(NodeLabel::at(Role::C, k));
            nodes.push(NodeLabel::at(Role::AY, k));
            nodes.push(NodeLabel::at(Role::AD, k));
            nodes.push(NodeLabel::at(Role::D, k));
            nodes.push(NodeLabel::at(Role::Y, k));
            if k <= cfg.k {
                for j in 0..cfg.n_l {
                    nodes.push(cov(rng, cfg, k, j));
                }
            }
        }
        let mut edges = wire(rng, &nodes, cfg, &[]);
        with_unmeasured(rng, &mut nodes, &mut edges, cfg);
        Dag::new(nodes, edges, vec![], cfg.k).expect("time-ordered graph is acyclic")
    }

    /// Strategy-centered graph: L_0, Z_Y, Z_D, then per k: C_k, R_k, D_k,
    /// Y_k, L_k. Z_Y and Z_D are roots and point into every R_k.
    pub fn strategy_centered<R: Rng>(rng: &mut R, cfg: &RandomGraphConfig) -> Dag {
        let mut nodes = Vec::new();
        for j in 0..cfg.n_l {
            nodes.push(cov(rng, cfg, 0, j));
        }
        nodes.push(NodeLabel::new(Role::ZY, None));
        nodes.push(NodeLabel::new(Role::ZD, None));
        for k in 1..=cfg.k + 1 {
            nodes.push(NodeLabel::at(Role::C, k));
            nodes.push(NodeLabel::at(Role::R, k));
            nodes.push(NodeLabel::at(Role::D, k));
            nodes.push(NodeLabel::at(Role::Y, k));
            if k <= cfg.k {
                for j in 0..cfg.n_l {
                    nodes.push(cov(rng, cfg, k, j));
                }
            }
        }
        let mut edges = wire(rng, &nodes, cfg, &[Role::ZY, Role::ZD]);
        let zy = nodes.iter().position(|n| n.role == Role::ZY).unwrap();
        let zd = zy + 1;
        for (i, n) in nodes.iter().enumerate() {
            if n.role == Role::R {
                for z in [zy, zd] {
                    if !edges.contains(&[z, i]) {
                        edges.push([z, i]);
                    }
                }
            }
        }
        with_unmeasured(rng, &mut nodes, &mut edges, cfg);
        Dag::new(nodes, edges, vec![], cfg.k).expect("time-ordered graph is acyclic")
    }
}
