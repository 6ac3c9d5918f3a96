//! Radial feeder data model, structural validation and per-unit normalization.
//!
//! A [`FeederModel`] is the raw description as it comes from a file. It is
//! turned into a [`Network`] only after [`validate_feeder`] finds no
//! violations; everything downstream (problem builders, oracles, the pipeline)
//! works on the validated form, where line `j - 1` always feeds node `j`.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::NetworkError;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Fixed capacitor output in kVAR, 0 if none.
    pub fixed_shunt_q_kvar: f64,
    pub is_load: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub r_ohm: f64,
    pub x_ohm: f64,
    pub ampacity_a: f64,
    pub length_m: f64,
}

impl LineSpec {
    pub fn is_lossless(&self) -> bool {
        self.r_ohm == 0.0 && self.x_ohm == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederModel {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub lines: Vec<LineSpec>,
    pub s_base_mva: f64,
    /// Line-to-line voltage base.
    pub v_base_kv: f64,
    /// Explicit current base; derived from the power and voltage bases when absent.
    pub i_base_a: Option<f64>,
    pub v_min_pu: f64,
    pub v_max_pu: f64,
}

/// One structural problem found by [`validate_feeder`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoNodes,
    NodeIdsNotContiguous { position: usize, found: NodeId },
    LineCount { lines: usize, nodes: usize },
    UnknownNode { line: (NodeId, NodeId), node: NodeId },
    SelfLoop { node: NodeId },
    MultipleParents { node: NodeId },
    LineIntoRoot { line: (NodeId, NodeId) },
    CycleDetected,
    Unreachable { node: NodeId },
    NegativeImpedance { line: (NodeId, NodeId) },
    NonpositiveAmpacity { line: (NodeId, NodeId) },
    NonpositiveLength { line: (NodeId, NodeId) },
    VoltageLimits { v_min: f64, v_max: f64 },
    NonpositiveBase { name: &'static str, value: f64 },
    RootHasLoadOrShunt,
    NonFinite { what: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoNodes => write!(f, "feeder has no nodes"),
            Violation::NodeIdsNotContiguous { position, found } => {
                write!(f, "node ids must be 0..n in order; position {position} holds id {found}")
            }
            Violation::LineCount { lines, nodes } => write!(
                f,
                "cycle detected / |lines| ≠ |nodes|−1 ({lines} lines for {nodes} nodes)"
            ),
            Violation::UnknownNode { line, node } => {
                write!(f, "line ({},{}) references unknown node {node}", line.0, line.1)
            }
            Violation::SelfLoop { node } => write!(f, "self loop on node {node}"),
            Violation::MultipleParents { node } => {
                write!(f, "cycle detected: node {node} has more than one parent")
            }
            Violation::LineIntoRoot { line } => {
                write!(f, "line ({},{}) points into the root node", line.0, line.1)
            }
            Violation::CycleDetected => write!(f, "cycle detected"),
            Violation::Unreachable { node } => write!(f, "node {node} is not reachable from the root"),
            Violation::NegativeImpedance { line } => {
                write!(f, "negative impedance on ({},{})", line.0, line.1)
            }
            Violation::NonpositiveAmpacity { line } => {
                write!(f, "nonpositive ampacity on ({},{})", line.0, line.1)
            }
            Violation::NonpositiveLength { line } => {
                write!(f, "nonpositive length on ({},{})", line.0, line.1)
            }
            Violation::VoltageLimits { v_min, v_max } => {
                write!(f, "voltage limits must satisfy 0 < v_min < v_max, got {v_min}..{v_max}")
            }
            Violation::NonpositiveBase { name, value } => {
                write!(f, "base {name} must be positive, got {value}")
            }
            Violation::RootHasLoadOrShunt => write!(f, "root node must carry no load and no shunt"),
            Violation::NonFinite { what } => write!(f, "non-finite value in {what}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "feeder is valid");
        }
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Lists every violated structural invariant of `raw`.
pub fn validate_feeder(raw: &FeederModel) -> ValidationReport {
    let mut out = Vec::new();
    let n = raw.nodes.len();
    if n == 0 {
        out.push(Violation::NoNodes);
        return ValidationReport { violations: out };
    }
    for (pos, node) in raw.nodes.iter().enumerate() {
        if node.id != pos {
            out.push(Violation::NodeIdsNotContiguous { position: pos, found: node.id });
        }
        if !node.fixed_shunt_q_kvar.is_finite() {
            out.push(Violation::NonFinite { what: format!("shunt of node {}", node.id) });
        }
    }
    if let Some(root) = raw.nodes.iter().find(|nd| nd.id == 0) {
        if root.is_load || root.fixed_shunt_q_kvar != 0.0 {
            out.push(Violation::RootHasLoadOrShunt);
        }
    }
    for (name, value) in [("s_base_mva", raw.s_base_mva), ("v_base_kv", raw.v_base_kv)] {
        if !(value > 0.0 && value.is_finite()) {
            out.push(Violation::NonpositiveBase { name, value });
        }
    }
    if let Some(i) = raw.i_base_a {
        if !(i > 0.0 && i.is_finite()) {
            out.push(Violation::NonpositiveBase { name: "i_base_a", value: i });
        }
    }
    if !(raw.v_min_pu > 0.0 && raw.v_min_pu < raw.v_max_pu && raw.v_max_pu.is_finite()) {
        out.push(Violation::VoltageLimits { v_min: raw.v_min_pu, v_max: raw.v_max_pu });
    }
    if raw.lines.len() + 1 != n {
        out.push(Violation::LineCount { lines: raw.lines.len(), nodes: n });
    }

    let mut parent: Vec<Option<NodeId>> = vec![None; n];
    let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    let mut structural_ok = true;
    for line in &raw.lines {
        let key = (line.from, line.to);
        for value in [line.r_ohm, line.x_ohm, line.ampacity_a, line.length_m] {
            if !value.is_finite() {
                out.push(Violation::NonFinite { what: format!("line ({},{})", key.0, key.1) });
                break;
            }
        }
        if line.r_ohm < 0.0 || line.x_ohm < 0.0 {
            out.push(Violation::NegativeImpedance { line: key });
        }
        if !(line.ampacity_a > 0.0) {
            out.push(Violation::NonpositiveAmpacity { line: key });
        }
        if !(line.length_m > 0.0) {
            out.push(Violation::NonpositiveLength { line: key });
        }
        let mut known = true;
        for node in [line.from, line.to] {
            if node >= n {
                out.push(Violation::UnknownNode { line: key, node });
                known = false;
            }
        }
        if !known {
            structural_ok = false;
            continue;
        }
        if line.from == line.to {
            out.push(Violation::SelfLoop { node: line.from });
            structural_ok = false;
            continue;
        }
        if line.to == 0 {
            out.push(Violation::LineIntoRoot { line: key });
            structural_ok = false;
            continue;
        }
        if parent[line.to].is_some() {
            out.push(Violation::MultipleParents { node: line.to });
            structural_ok = false;
            continue;
        }
        parent[line.to] = Some(line.from);
        children[line.from].push(line.to);
    }

    if structural_ok {
        // BFS from the root; every node must be reached exactly once.
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &c in &children[u] {
                if seen[c] {
                    out.push(Violation::CycleDetected);
                    continue;
                }
                seen[c] = true;
                queue.push_back(c);
            }
        }
        for (node, reached) in seen.iter().enumerate() {
            if !reached {
                out.push(Violation::Unreachable { node });
            }
        }
    }
    ValidationReport { violations: out }
}

/// System bases. Impedance base follows from the voltage and power bases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bases {
    pub s_mva: f64,
    pub v_kv: f64,
    pub i_a: f64,
    pub z_ohm: f64,
}

impl Bases {
    pub fn new(s_mva: f64, v_kv: f64, i_a: Option<f64>) -> Result<Self, NetworkError> {
        for (name, value) in [("s_base_mva", s_mva), ("v_base_kv", v_kv)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(NetworkError::InvalidBase { name, value });
            }
        }
        let i_a = match i_a {
            Some(i) if i > 0.0 && i.is_finite() => i,
            Some(i) => return Err(NetworkError::InvalidBase { name: "i_base_a", value: i }),
            None => s_mva * 1e3 / (3f64.sqrt() * v_kv),
        };
        Ok(Self { s_mva, v_kv, i_a, z_ohm: v_kv * v_kv / s_mva })
    }

    /// Power base in kW (equivalently kVAR).
    pub fn s_kw(&self) -> f64 {
        self.s_mva * 1e3
    }
}

/// A feeder that passed validation. Lines are stored by receiving node:
/// `lines[j - 1]` feeds node `j`.
#[derive(Debug, Clone)]
pub struct Network {
    name: String,
    nodes: Vec<NodeSpec>,
    lines: Vec<LineSpec>,
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    bfs_order: Vec<NodeId>,
    bases: Bases,
    v_min_pu: f64,
    v_max_pu: f64,
}

impl Network {
    pub fn new(raw: FeederModel) -> Result<Self, NetworkError> {
        let report = validate_feeder(&raw);
        if !report.is_clean() {
            return Err(NetworkError::Invalid(report));
        }
        let bases = Bases::new(raw.s_base_mva, raw.v_base_kv, raw.i_base_a)?;
        let n = raw.nodes.len();
        let mut lines = raw.lines;
        lines.sort_by_key(|l| l.to);
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        for line in &lines {
            parent[line.to] = Some(line.from);
            children[line.from].push(line.to);
        }
        for c in &mut children {
            c.sort_unstable();
        }
        let mut bfs_order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            bfs_order.push(u);
            queue.extend(children[u].iter().copied());
        }
        Ok(Self {
            name: raw.name,
            nodes: raw.nodes,
            lines,
            parent,
            children,
            bfs_order,
            bases,
            v_min_pu: raw.v_min_pu,
            v_max_pu: raw.v_max_pu,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    /// Lines ordered by receiving node.
    pub fn lines(&self) -> &[LineSpec] {
        &self.lines
    }

    /// The line feeding `node`; `None` for the root.
    pub fn line_into(&self, node: NodeId) -> Option<&LineSpec> {
        node.checked_sub(1).and_then(|k| self.lines.get(k))
    }

    /// Index of line `(from, to)` in [`Network::lines`], if it exists.
    pub fn line_index(&self, from: NodeId, to: NodeId) -> Option<usize> {
        let k = to.checked_sub(1)?;
        (self.lines.get(k)?.from == from).then_some(k)
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent[node]
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.children[node]
    }

    /// Nodes in breadth-first order from the root.
    pub fn bfs_order(&self) -> &[NodeId] {
        &self.bfs_order
    }

    /// True if `node` lies in the subtree hanging below line `line_index`.
    pub fn is_downstream_of_line(&self, node: NodeId, line_index: usize) -> bool {
        let head = self.lines[line_index].to;
        let mut cur = Some(node);
        while let Some(c) = cur {
            if c == head {
                return true;
            }
            cur = self.parent[c];
        }
        false
    }

    pub fn bases(&self) -> Bases {
        self.bases
    }

    pub fn v_min_pu(&self) -> f64 {
        self.v_min_pu
    }

    pub fn v_max_pu(&self) -> f64 {
        self.v_max_pu
    }

    /// The raw model this network was built from (lines in receiving-node order).
    pub fn to_model(&self) -> FeederModel {
        FeederModel {
            name: self.name.clone(),
            nodes: self.nodes.clone(),
            lines: self.lines.clone(),
            s_base_mva: self.bases.s_mva,
            v_base_kv: self.bases.v_kv,
            i_base_a: Some(self.bases.i_a),
            v_min_pu: self.v_min_pu,
            v_max_pu: self.v_max_pu,
        }
    }
}

/// One hour of nodal injections and root prices, in physical units.
///
/// Injections are generation-positive. The root entries are always zero: the
/// root injection is a decision variable of the programs, not data.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyScenario {
    pub hour: usize,
    pub net_p_kw: Vec<f64>,
    pub net_q_kvar: Vec<f64>,
    /// Real power price at the root, $/MWh.
    pub lmp: f64,
    /// Reactive power price at the root, $/MVARh.
    pub q_price: f64,
}

impl HourlyScenario {
    /// Builds a scenario from consumption-positive loads, deriving the
    /// reactive price as `q_fraction * lmp`.
    pub fn from_loads(
        hour: usize,
        load_p_kw: &[f64],
        load_q_kvar: &[f64],
        lmp: f64,
        q_fraction: f64,
    ) -> Self {
        let mut net_p_kw: Vec<f64> = load_p_kw.iter().map(|p| -p).collect();
        let mut net_q_kvar: Vec<f64> = load_q_kvar.iter().map(|q| -q).collect();
        if let Some(p) = net_p_kw.first_mut() {
            *p = 0.0;
        }
        if let Some(q) = net_q_kvar.first_mut() {
            *q = 0.0;
        }
        Self { hour, net_p_kw, net_q_kvar, lmp, q_price: q_fraction * lmp }
    }
}

/// Per-line data in per unit, indexed like [`Network::lines`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinePu {
    pub from: NodeId,
    pub to: NodeId,
    pub r: f64,
    pub x: f64,
    pub i_max: f64,
}

impl LinePu {
    pub fn is_lossless(&self) -> bool {
        self.r == 0.0 && self.x == 0.0
    }
}

/// Everything a problem builder needs for one hour, normalized to per unit.
///
/// Prices are expressed per per-unit power and hour (`$/MWh * s_base`), so
/// program objectives are in $/h.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedProblemData {
    pub hour: usize,
    pub lines: Vec<LinePu>,
    pub parent: Vec<Option<NodeId>>,
    pub children: Vec<Vec<NodeId>>,
    /// Net injections including fixed shunts.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub v_min_sq: f64,
    pub v_max_sq: f64,
    pub c_p: f64,
    pub c_q: f64,
    pub bases: Bases,
}

impl NormalizedProblemData {
    pub fn node_count(&self) -> usize {
        self.p_inj.len()
    }

    pub fn line_into(&self, node: NodeId) -> Option<&LinePu> {
        node.checked_sub(1).and_then(|k| self.lines.get(k))
    }

    /// Converts a $/pu-h dual to $/MWh (or $/MVARh).
    pub fn price_to_physical(&self, per_pu: f64) -> f64 {
        per_pu / self.bases.s_mva
    }

    pub fn price_to_pu(&self, per_mwh: f64) -> f64 {
        per_mwh * self.bases.s_mva
    }
}

pub fn to_per_unit(
    network: &Network,
    scenario: &HourlyScenario,
) -> Result<NormalizedProblemData, NetworkError> {
    let n = network.node_count();
    if scenario.net_p_kw.len() != n || scenario.net_q_kvar.len() != n {
        return Err(NetworkError::ScenarioShape {
            hour: scenario.hour,
            expected: n,
            found: scenario.net_p_kw.len().min(scenario.net_q_kvar.len()),
        });
    }
    let bases = network.bases();
    let s_kw = bases.s_kw();
    let lines = network
        .lines()
        .iter()
        .map(|l| LinePu {
            from: l.from,
            to: l.to,
            r: l.r_ohm / bases.z_ohm,
            x: l.x_ohm / bases.z_ohm,
            i_max: l.ampacity_a / bases.i_a,
        })
        .collect();
    let p_inj = scenario.net_p_kw.iter().map(|p| p / s_kw).collect();
    let q_inj = scenario
        .net_q_kvar
        .iter()
        .zip(network.nodes())
        .map(|(q, node)| (q + node.fixed_shunt_q_kvar) / s_kw)
        .collect();
    Ok(NormalizedProblemData {
        hour: scenario.hour,
        lines,
        parent: (0..n).map(|j| network.parent(j)).collect(),
        children: (0..n).map(|j| network.children(j).to_vec()).collect(),
        p_inj,
        q_inj,
        v_min_sq: network.v_min_pu().powi(2),
        v_max_sq: network.v_max_pu().powi(2),
        c_p: scenario.lmp * bases.s_mva,
        c_q: scenario.q_price * bases.s_mva,
        bases,
    })
}

/// Conversions back to physical units.
pub mod from_per_unit {
    use super::Bases;

    pub fn power_kw(b: &Bases, pu: f64) -> f64 {
        pu * b.s_kw()
    }

    pub fn current_a(b: &Bases, pu: f64) -> f64 {
        pu * b.i_a
    }

    /// Squared current (pu²) to A².
    pub fn current_sq_a2(b: &Bases, pu: f64) -> f64 {
        pu * b.i_a * b.i_a
    }

    pub fn impedance_ohm(b: &Bases, pu: f64) -> f64 {
        pu * b.z_ohm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn chain(n: usize) -> FeederModel {
        FeederModel {
            name: "chain".into(),
            nodes: (0..n)
                .map(|id| NodeSpec { id, fixed_shunt_q_kvar: 0.0, is_load: id > 0 })
                .collect(),
            lines: (1..n)
                .map(|j| LineSpec {
                    from: j - 1,
                    to: j,
                    r_ohm: 0.1,
                    x_ohm: 0.2,
                    ampacity_a: 100.0,
                    length_m: 50.0,
                })
                .collect(),
            s_base_mva: 1.0,
            v_base_kv: 12.0,
            i_base_a: None,
            v_min_pu: 0.95,
            v_max_pu: 1.05,
        }
    }

    #[test]
    fn minimal_chain_is_valid() {
        assert!(validate_feeder(&chain(3)).is_clean());
    }

    #[test]
    fn triangle_is_rejected() {
        let mut f = chain(3);
        f.lines.push(LineSpec { from: 0, to: 2, ..f.lines[0].clone() });
        let report = validate_feeder(&f);
        assert!(!report.is_clean());
        let text = report.to_string();
        assert!(text.contains("cycle detected"), "{text}");
        assert!(text.contains("|lines| ≠ |nodes|−1"), "{text}");
    }

    #[test]
    fn zero_ampacity_is_reported() {
        let mut f = chain(3);
        f.lines[1].ampacity_a = 0.0;
        let report = validate_feeder(&f);
        assert_eq!(report.violations, vec![Violation::NonpositiveAmpacity { line: (1, 2) }]);
        assert_eq!(report.to_string(), "nonpositive ampacity on (1,2)");
    }

    #[test]
    fn disconnected_cycle_is_caught() {
        // 0-1 plus a 2-3 loop detached from the root: line count is right,
        // every node has one parent, but BFS misses 2 and 3.
        let mut f = chain(4);
        f.lines = vec![
            LineSpec { from: 0, to: 1, ..f.lines[0].clone() },
            LineSpec { from: 3, to: 2, ..f.lines[0].clone() },
            LineSpec { from: 2, to: 3, ..f.lines[0].clone() },
        ];
        let report = validate_feeder(&f);
        assert!(report.violations.contains(&Violation::Unreachable { node: 2 }));
        assert!(report.violations.contains(&Violation::Unreachable { node: 3 }));
    }

    #[test]
    fn bad_voltage_limits_and_lengths() {
        let mut f = chain(2);
        f.v_min_pu = 1.1;
        f.lines[0].length_m = 0.0;
        f.lines[0].r_ohm = -1.0;
        let v = validate_feeder(&f).violations;
        assert!(v.contains(&Violation::VoltageLimits { v_min: 1.1, v_max: 1.05 }));
        assert!(v.contains(&Violation::NonpositiveLength { line: (0, 1) }));
        assert!(v.contains(&Violation::NegativeImpedance { line: (0, 1) }));
    }

    #[test]
    fn current_base_matches_twelve_kv_feeder() {
        let b = Bases::new(1.0, 12.0, None).unwrap();
        assert!((b.i_a - 48.1125).abs() < 5e-5, "{}", b.i_a);
        assert_relative_eq!(b.z_ohm, 144.0);
        let explicit = Bases::new(1.0, 12.5, Some(46.188)).unwrap();
        assert_eq!(explicit.i_a, 46.188);
        assert!(Bases::new(0.0, 12.0, None).is_err());
        assert!(Bases::new(1.0, -1.0, None).is_err());
    }

    #[test]
    fn per_unit_definitions() {
        let mut f = chain(2);
        let z_base = 144.0;
        f.lines[0].r_ohm = z_base;
        let net = Network::new(f).unwrap();
        let sc = HourlyScenario::from_loads(1, &[0.0, 1000.0], &[0.0, 0.0], 30.0, 0.05);
        let data = to_per_unit(&net, &sc).unwrap();
        assert_relative_eq!(data.lines[0].r, 1.0);
        assert_relative_eq!(data.p_inj[1], -1.0);
        assert_relative_eq!(data.c_q, 1.5);
    }

    #[test]
    fn lines_are_reordered_by_receiving_node() {
        let mut f = chain(4);
        f.lines.reverse();
        let net = Network::new(f).unwrap();
        let tos: Vec<_> = net.lines().iter().map(|l| l.to).collect();
        assert_eq!(tos, vec![1, 2, 3]);
        assert_eq!(net.line_index(1, 2), Some(1));
        assert_eq!(net.line_index(0, 2), None);
        assert!(net.is_downstream_of_line(3, 1));
        assert!(!net.is_downstream_of_line(1, 1));
    }

    proptest::proptest! {
        #[test]
        fn per_unit_round_trip(
            s in 0.1f64..100.0,
            v in 0.4f64..69.0,
            value in -1e4f64..1e4,
        ) {
            let b = Bases::new(s, v, None).unwrap();
            let back = from_per_unit::power_kw(&b, value / b.s_kw());
            proptest::prop_assert!((back - value).abs() <= 1e-12 * value.abs().max(1.0));
            let back = from_per_unit::current_a(&b, value / b.i_a);
            proptest::prop_assert!((back - value).abs() <= 1e-12 * value.abs().max(1.0));
            let back = from_per_unit::impedance_ohm(&b, value / b.z_ohm);
            proptest::prop_assert!((back - value).abs() <= 1e-12 * value.abs().max(1.0));
            let back = from_per_unit::current_sq_a2(&b, value / (b.i_a * b.i_a));
            proptest::prop_assert!((back - value).abs() <= 1e-12 * value.abs().max(1.0));
        }
    }
}
