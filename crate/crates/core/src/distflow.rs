//! Branch-flow (DistFlow) programs for one hour of a radial feeder.
//!
//! Three programs share the same skeleton of nodal balances, voltage drops,
//! voltage limits and rotated current cones:
//!
//! * overload measurement ([`build_opt1`]): no ampacity limits;
//! * overload pricing ([`build_opt2`]): overloads on flagged lines are
//!   linearized around the measurement point and charged at the MCC;
//! * DER procurement ([`build_opt3`]): ampacity limits enforced, generic DER
//!   injections bought at the priced LMVs.
//!
//! Nodal balances are written as `inflow − losses − outflow (+ DER) = demand`,
//! so the equality multipliers (see [`crate::conic`]) are the nodal marginal
//! values directly.

use std::collections::BTreeMap;

use crate::conic::{self, ConicProgram, ConicSolution, Sense, SolveOptions, SolveStatus, VarId};
use crate::error::{DistflowError, SolveError};
use crate::network::{NodeId, NormalizedProblemData};
use crate::valuation::MccTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgramKind {
    /// Overload measurement.
    Measure,
    /// Overload pricing.
    Price,
    /// DER procurement.
    Procure,
}

impl ProgramKind {
    pub fn step_name(self) -> &'static str {
        match self {
            ProgramKind::Measure => "preprocess",
            ProgramKind::Price => "price",
            ProgramKind::Procure => "procure",
        }
    }
}

/// Variable handles of the branch-flow model. Per-line vectors are indexed
/// like [`NormalizedProblemData::lines`], per-node vectors by node id.
#[derive(Debug, Clone)]
pub struct BranchFlowVariables {
    pub p0: VarId,
    pub q0: VarId,
    pub p: Vec<VarId>,
    pub q: Vec<VarId>,
    pub l: Vec<VarId>,
    pub v: Vec<VarId>,
}

#[derive(Debug, Clone, Copy)]
pub struct OverloadVariable {
    pub line: usize,
    pub delta_i: VarId,
    pub l0: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DerVariable {
    pub node: NodeId,
    pub p: VarId,
    pub q: VarId,
}

/// Linearization anchor for a flagged line: the squared current (pu²) of the
/// same hour's measurement solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub from: NodeId,
    pub to: NodeId,
    pub l0_pu: f64,
}

/// Per-node DER quantity limits in physical units. Nodes absent from the map
/// may not host DERs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DerBounds {
    pub limits: BTreeMap<NodeId, DerLimit>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerLimit {
    pub p_max_kw: f64,
    /// Symmetric limit: `-q_max ≤ Q ≤ q_max`.
    pub q_max_kvar: f64,
}

impl DerBounds {
    pub fn uniform(nodes: impl IntoIterator<Item = NodeId>, p_max_kw: f64, q_max_kvar: f64) -> Self {
        Self {
            limits: nodes.into_iter().map(|n| (n, DerLimit { p_max_kw, q_max_kvar })).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchFlowProgram {
    pub kind: ProgramKind,
    pub hour: usize,
    pub program: ConicProgram,
    pub vars: BranchFlowVariables,
    pub overload: Vec<OverloadVariable>,
    pub der: Vec<DerVariable>,
}

pub fn balance_label(kind: char, node: NodeId) -> String {
    format!("bal_{kind}_{node}")
}

fn line_tag(from: NodeId, to: NodeId) -> String {
    format!("{from}_{to}")
}

/// Shared skeleton: variables, balances, voltage drops and cones.
fn skeleton(
    data: &NormalizedProblemData,
    kind: ProgramKind,
    der_nodes: &BTreeMap<NodeId, (Option<f64>, Option<(f64, f64)>)>,
) -> Result<BranchFlowProgram, DistflowError> {
    let n = data.node_count();
    let mut prog = ConicProgram::new();
    let p0 = prog.add_var("P0", None, None)?;
    let q0 = prog.add_var("Q0", None, None)?;
    let mut v = Vec::with_capacity(n);
    for j in 0..n {
        v.push(prog.add_var(format!("v_{j}"), Some(data.v_min_sq), Some(data.v_max_sq))?);
    }
    let (mut p, mut q, mut l) = (Vec::new(), Vec::new(), Vec::new());
    for line in &data.lines {
        let tag = line_tag(line.from, line.to);
        p.push(prog.add_var(format!("P_{tag}"), None, None)?);
        q.push(prog.add_var(format!("Q_{tag}"), None, None)?);
        l.push(prog.add_var(format!("l_{tag}"), Some(0.0), None)?);
    }

    let mut der = Vec::new();
    for (&node, &(p_max, q_range)) in der_nodes {
        let dp = prog.add_var(format!("Pder_{node}"), Some(0.0), p_max)?;
        let dq = prog.add_var(
            format!("Qder_{node}"),
            q_range.map(|r| r.0),
            q_range.map(|r| r.1),
        )?;
        der.push(DerVariable { node, p: dp, q: dq });
    }

    // Nodal balances: inflow − losses − Σ outflow (+ DER) = −injection.
    for j in 0..n {
        let mut tp = Vec::new();
        let mut tq = Vec::new();
        match j.checked_sub(1) {
            None => {
                tp.push((p0, 1.0));
                tq.push((q0, 1.0));
            }
            Some(k) => {
                let line = &data.lines[k];
                tp.push((p[k], 1.0));
                tq.push((q[k], 1.0));
                if line.r != 0.0 {
                    tp.push((l[k], -line.r));
                }
                if line.x != 0.0 {
                    tq.push((l[k], -line.x));
                }
            }
        }
        for &c in &data.children[j] {
            tp.push((p[c - 1], -1.0));
            tq.push((q[c - 1], -1.0));
        }
        if let Some(d) = der.iter().find(|d| d.node == j) {
            tp.push((d.p, 1.0));
            tq.push((d.q, 1.0));
        }
        prog.add_equality(balance_label('p', j), tp, -data.p_inj[j])?;
        prog.add_equality(balance_label('q', j), tq, -data.q_inj[j])?;
    }

    // v_j − v_i + 2(r P + x Q) − (r² + x²) l = 0
    for (k, line) in data.lines.iter().enumerate() {
        let mut terms = vec![(v[line.to], 1.0), (v[line.from], -1.0)];
        if line.r != 0.0 {
            terms.push((p[k], 2.0 * line.r));
        }
        if line.x != 0.0 {
            terms.push((q[k], 2.0 * line.x));
        }
        let z2 = line.r * line.r + line.x * line.x;
        if z2 != 0.0 {
            terms.push((l[k], -z2));
        }
        prog.add_equality(format!("volt_{}", line.to), terms, 0.0)?;
        prog.add_rotated_cone(
            format!("cone_{}", line_tag(line.from, line.to)),
            v[line.from],
            l[k],
            vec![p[k], q[k]],
        )?;
    }

    Ok(BranchFlowProgram {
        kind,
        hour: data.hour,
        program: prog,
        vars: BranchFlowVariables { p0, q0, p, q, l, v },
        overload: Vec::new(),
        der,
    })
}

fn root_cost(data: &NormalizedProblemData, vars: &BranchFlowVariables) -> Vec<(VarId, f64)> {
    vec![(vars.p0, data.c_p), (vars.q0, data.c_q)]
}

/// Weight, relative to the root price, that pulls an otherwise undetermined
/// root voltage to its upper limit.
const ROOT_VOLTAGE_TIE: f64 = 1e-5;

/// Overload measurement: root procurement cost, no ampacity limits.
///
/// When losses do not depend on the root voltage (zero-impedance paths) the
/// cost alone leaves it undetermined; a negligible reward on `v_0` settles it
/// at the upper limit, where a lossy feeder would put it anyway.
pub fn build_opt1(data: &NormalizedProblemData) -> Result<BranchFlowProgram, DistflowError> {
    let mut bf = skeleton(data, ProgramKind::Measure, &BTreeMap::new())?;
    let mut obj = root_cost(data, &bf.vars);
    obj.push((bf.vars.v[0], -ROOT_VOLTAGE_TIE * data.c_p.abs().max(1.0)));
    bf.program.set_objective(obj, 0.0)?;
    Ok(bf)
}

/// Overload pricing: adds `w·ΔI` for every anchored line, with ΔI tied to the
/// squared current by its first-order expansion around the anchor.
pub fn build_opt2(
    data: &NormalizedProblemData,
    anchors: &[Anchor],
    mcc: &MccTable,
) -> Result<BranchFlowProgram, DistflowError> {
    let mut bf = skeleton(data, ProgramKind::Price, &BTreeMap::new())?;
    let mut obj = root_cost(data, &bf.vars);
    for anchor in anchors {
        let k = anchor
            .to
            .checked_sub(1)
            .filter(|&k| data.lines.get(k).is_some_and(|l| l.from == anchor.from))
            .ok_or(DistflowError::UnknownLine { from: anchor.from, to: anchor.to })?;
        if !(anchor.l0_pu > 0.0) {
            return Err(DistflowError::ZeroAnchor {
                from: anchor.from,
                to: anchor.to,
                l0: anchor.l0_pu,
            });
        }
        let w = mcc
            .factor(anchor.from, anchor.to)
            .ok_or(DistflowError::MissingMcc { from: anchor.from, to: anchor.to })?;
        // $/A/h → $/pu-current/h
        let w_pu = w * data.bases.i_a;
        let tag = line_tag(anchor.from, anchor.to);
        let di = bf.program.add_var(format!("dI_{tag}"), Some(0.0), None)?;
        let root = anchor.l0_pu.sqrt();
        bf.program.add_equality(
            format!("ovl_{tag}"),
            vec![(di, 1.0), (bf.vars.l[k], -0.5 / root)],
            0.5 * root - data.lines[k].i_max,
        )?;
        obj.push((di, w_pu));
        bf.overload.push(OverloadVariable { line: k, delta_i: di, l0: anchor.l0_pu });
    }
    bf.program.set_objective(obj, 0.0)?;
    Ok(bf)
}

/// DER procurement: ampacity limits enforced, DER bought at the given nodal
/// values (`$/MWh` and `$/MVARh`, one entry per node). Without `bounds` every
/// non-root node may host an unbounded DER.
pub fn build_opt3(
    data: &NormalizedProblemData,
    lmv_p: &[f64],
    lmv_q: &[f64],
    bounds: Option<&DerBounds>,
) -> Result<BranchFlowProgram, DistflowError> {
    let n = data.node_count();
    for len in [lmv_p.len(), lmv_q.len()] {
        if len != n {
            return Err(DistflowError::LmvShape { expected: n, found: len });
        }
    }
    let s_kw = data.bases.s_kw();
    let der_nodes: BTreeMap<NodeId, (Option<f64>, Option<(f64, f64)>)> = match bounds {
        None => (1..n).map(|j| (j, (None, None))).collect(),
        Some(b) => b
            .limits
            .iter()
            .filter(|(&node, lim)| node > 0 && node < n && (lim.p_max_kw > 0.0 || lim.q_max_kvar > 0.0))
            .map(|(&node, lim)| {
                let qm = lim.q_max_kvar.max(0.0) / s_kw;
                (node, (Some(lim.p_max_kw.max(0.0) / s_kw), Some((-qm, qm))))
            })
            .collect(),
    };
    let mut bf = skeleton(data, ProgramKind::Procure, &der_nodes)?;
    let mut obj = root_cost(data, &bf.vars);
    for d in &bf.der {
        obj.push((d.p, data.price_to_pu(lmv_p[d.node])));
        obj.push((d.q, data.price_to_pu(lmv_q[d.node])));
    }
    for (k, line) in data.lines.iter().enumerate() {
        bf.program.add_inequality(
            format!("amp_{}", line_tag(line.from, line.to)),
            vec![(bf.vars.l[k], 1.0)],
            Sense::Le,
            line.i_max * line.i_max,
        )?;
    }
    bf.program.set_objective(obj, 0.0)?;
    Ok(bf)
}

/// Smallest total bound excess (pu) that makes procurement feasible: the
/// procurement constraints with DER limits turned into elastic rows
/// `Pder − e ≤ p_max`, `±Qder − e ≤ q_max` and objective `Σ e`.
///
/// Returns the program and the excess variables `(node, e_p, e_q)`.
pub fn build_opt3_elastic(
    data: &NormalizedProblemData,
    bounds: &DerBounds,
) -> Result<(BranchFlowProgram, Vec<(NodeId, VarId, VarId)>), DistflowError> {
    let n = data.node_count();
    let s_kw = data.bases.s_kw();
    let free: BTreeMap<NodeId, (Option<f64>, Option<(f64, f64)>)> = bounds
        .limits
        .keys()
        .filter(|&&node| node > 0 && node < n)
        .map(|&node| (node, (None, None)))
        .collect();
    let mut bf = skeleton(data, ProgramKind::Procure, &free)?;
    for (k, line) in data.lines.iter().enumerate() {
        bf.program.add_inequality(
            format!("amp_{}", line_tag(line.from, line.to)),
            vec![(bf.vars.l[k], 1.0)],
            Sense::Le,
            line.i_max * line.i_max,
        )?;
    }
    let mut obj = Vec::new();
    let mut excess = Vec::new();
    for d in bf.der.clone() {
        let lim = bounds.limits[&d.node];
        let ep = bf.program.add_var(format!("ep_{}", d.node), Some(0.0), None)?;
        let eq = bf.program.add_var(format!("eq_{}", d.node), Some(0.0), None)?;
        let (pm, qm) = (lim.p_max_kw.max(0.0) / s_kw, lim.q_max_kvar.max(0.0) / s_kw);
        bf.program.add_inequality(format!("pmax_{}", d.node), vec![(d.p, 1.0), (ep, -1.0)], Sense::Le, pm)?;
        bf.program.add_inequality(format!("qmax_{}", d.node), vec![(d.q, 1.0), (eq, -1.0)], Sense::Le, qm)?;
        bf.program.add_inequality(format!("qmin_{}", d.node), vec![(d.q, -1.0), (eq, -1.0)], Sense::Le, qm)?;
        obj.push((ep, 1.0));
        obj.push((eq, 1.0));
        excess.push((d.node, ep, eq));
    }
    bf.program.set_objective(obj, 0.0)?;
    Ok((bf, excess))
}

/// Primal and dual values of a solved branch-flow program, in per unit.
#[derive(Debug, Clone)]
pub struct BranchFlowSolution {
    pub kind: ProgramKind,
    pub hour: usize,
    pub status: SolveStatus,
    /// $/h
    pub objective: f64,
    pub p0: f64,
    pub q0: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub l: Vec<f64>,
    pub v: Vec<f64>,
    /// Balance multipliers in $/pu-h.
    pub lambda_p: Vec<f64>,
    pub lambda_q: Vec<f64>,
    /// `(line index, ΔI in pu)` for every overload variable.
    pub overload: Vec<(usize, f64)>,
    /// DER injections per node (0 where none was allowed).
    pub der_p: Vec<f64>,
    pub der_q: Vec<f64>,
    pub raw: ConicSolution,
}

impl BranchFlowSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

pub fn solve_branch_flow(
    bf: &BranchFlowProgram,
    data: &NormalizedProblemData,
    options: &SolveOptions,
) -> Result<BranchFlowSolution, SolveError> {
    let raw = conic::solve(&bf.program, options)?;
    Ok(extract(bf, data, raw))
}

/// Maps a raw conic solution onto branch-flow quantities.
///
/// On lines with zero impedance the squared current appears in no balance or
/// voltage equation, so any value above `(P² + Q²)/v` is equally optimal
/// unless the line carries an overload charge. Such lines are reported at the
/// cone boundary, which keeps every constraint satisfied and leaves the
/// objective and multipliers unchanged.
pub fn extract(bf: &BranchFlowProgram, data: &NormalizedProblemData, raw: ConicSolution) -> BranchFlowSolution {
    let n = data.node_count();
    let vals = |ids: &[VarId]| ids.iter().map(|&id| raw.value(id)).collect::<Vec<f64>>();
    let p = vals(&bf.vars.p);
    let q = vals(&bf.vars.q);
    let mut l = vals(&bf.vars.l);
    let v = vals(&bf.vars.v);
    for (k, line) in data.lines.iter().enumerate() {
        let charged = bf.overload.iter().any(|o| o.line == k);
        if line.is_lossless() && !charged && v[line.from] > 0.0 {
            l[k] = (p[k] * p[k] + q[k] * q[k]) / v[line.from];
        }
    }
    let dual = |kind: char, j: usize| {
        bf.program
            .equality_index(&balance_label(kind, j))
            .map(|k| raw.equality_duals[k])
            .unwrap_or(f64::NAN)
    };
    let mut der_p = vec![0.0; n];
    let mut der_q = vec![0.0; n];
    for d in &bf.der {
        der_p[d.node] = raw.value(d.p);
        der_q[d.node] = raw.value(d.q);
    }
    BranchFlowSolution {
        kind: bf.kind,
        hour: bf.hour,
        status: raw.status.clone(),
        objective: raw.objective_value,
        p0: raw.value(bf.vars.p0),
        q0: raw.value(bf.vars.q0),
        lambda_p: (0..n).map(|j| dual('p', j)).collect(),
        lambda_q: (0..n).map(|j| dual('q', j)).collect(),
        overload: bf.overload.iter().map(|o| (o.line, raw.value(o.delta_i))).collect(),
        p,
        q,
        l,
        v,
        der_p,
        der_q,
        raw,
    }
}

/// `v_i·l_ij − (P_ij² + Q_ij²)` per line, in pu².
pub fn exactness_gap(solution: &BranchFlowSolution, data: &NormalizedProblemData) -> Vec<f64> {
    data.lines
        .iter()
        .enumerate()
        .map(|(k, line)| {
            solution.v[line.from] * solution.l[k]
                - (solution.p[k] * solution.p[k] + solution.q[k] * solution.q[k])
        })
        .collect()
}

/// Largest absolute cone gap and the line where it occurs.
pub fn max_gap(gaps: &[f64]) -> (f64, usize) {
    gaps.iter()
        .enumerate()
        .fold((0.0, 0), |acc, (k, g)| if g.abs() > acc.0 { (g.abs(), k) } else { acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{to_per_unit, FeederModel, HourlyScenario, LineSpec, Network, NodeSpec};
    use crate::oracle::{newton_load_flow, single_line};
    use crate::valuation::{MccEntry, MccTable};

    /// Two-node feeder on a 1 MVA / 12 kV base (Z_base = 144 Ω).
    fn two_node(r_pu: f64, x_pu: f64, ampacity_a: f64, v_min: f64, v_max: f64) -> Network {
        Network::new(FeederModel {
            name: "two".into(),
            nodes: vec![
                NodeSpec { id: 0, fixed_shunt_q_kvar: 0.0, is_load: false },
                NodeSpec { id: 1, fixed_shunt_q_kvar: 0.0, is_load: true },
            ],
            lines: vec![LineSpec {
                from: 0,
                to: 1,
                r_ohm: r_pu * 144.0,
                x_ohm: x_pu * 144.0,
                ampacity_a,
                length_m: 100.0,
            }],
            s_base_mva: 1.0,
            v_base_kv: 12.0,
            i_base_a: None,
            v_min_pu: v_min,
            v_max_pu: v_max,
        })
        .unwrap()
    }

    fn data_for(net: &Network, p_kw: f64, q_kvar: f64, lmp: f64) -> NormalizedProblemData {
        let sc = HourlyScenario::from_loads(1, &[0.0, p_kw], &[0.0, q_kvar], lmp, 0.05);
        to_per_unit(net, &sc).unwrap()
    }

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    #[test]
    fn zero_load_fixed_point() {
        let net = two_node(0.01, 0.01, 100.0, 0.95, 1.05);
        let data = data_for(&net, 0.0, 0.0, 30.0);
        let bf = build_opt1(&data).unwrap();
        let s = solve_branch_flow(&bf, &data, &opts()).unwrap();
        assert!(s.is_optimal());
        assert!(s.p0.abs() < 1e-7 && s.q0.abs() < 1e-7);
        assert!(s.p[0].abs() < 1e-7 && s.l[0].abs() < 1e-7);
        assert!(s.v[0] >= data.v_min_sq - 1e-9 && s.v[0] <= data.v_max_sq + 1e-9);
        assert!(exactness_gap(&s, &data).iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn lossless_line_passes_power_through() {
        let net = two_node(0.0, 0.0, 100.0, 0.95, 1.05);
        let data = data_for(&net, 1000.0, 0.0, 30.0);
        let s = solve_branch_flow(&build_opt1(&data).unwrap(), &data, &opts()).unwrap();
        assert!(s.is_optimal());
        assert!((s.p0 - 1.0).abs() < 1e-7, "{}", s.p0);
        assert!((s.v[1] - s.v[0]).abs() < 1e-8);
        assert!(exactness_gap(&s, &data)[0].abs() < 1e-12);
    }

    #[test]
    fn measurement_matches_newton_load_flow() {
        // v_max = 1 pins the root voltage at 1 pu.
        let net = two_node(0.01, 0.01, 100.0, 0.8, 1.0);
        let data = data_for(&net, 1000.0, 500.0, 30.0);
        let s = solve_branch_flow(&build_opt1(&data).unwrap(), &data, &opts()).unwrap();
        assert!(s.is_optimal());
        assert!((s.v[0] - 1.0).abs() < 1e-7);
        let lf = newton_load_flow(&data, s.v[0].sqrt()).unwrap();
        let (sp, sq) = lf.root_power();
        assert!((s.p0 - sp).abs() < 1e-6, "{} vs {}", s.p0, sp);
        assert!((s.q0 - sq).abs() < 1e-6, "{} vs {}", s.q0, sq);
        assert!((s.v[1] - lf.v_squared()[1]).abs() < 1e-6);
        assert!((s.l[0] - lf.l_squared()[0]).abs() < 1e-6);
        assert!(max_gap(&exactness_gap(&s, &data)).0 < 1e-6);
    }

    fn single_mcc(from: usize, to: usize, w: f64) -> MccTable {
        MccTable {
            entries: vec![MccEntry {
                from,
                to,
                w_usd_per_a_h: w,
                t_hours: 1,
                allocated_cost_usd: 0.0,
                capacity_divisor_a: 1.0,
            }],
        }
    }

    #[test]
    fn pricing_without_flags_equals_measurement() {
        let net = two_node(0.01, 0.02, 100.0, 0.9, 1.05);
        let data = data_for(&net, 800.0, 300.0, 42.0);
        let s1 = solve_branch_flow(&build_opt1(&data).unwrap(), &data, &opts()).unwrap();
        let s2 = solve_branch_flow(
            &build_opt2(&data, &[], &MccTable::default()).unwrap(),
            &data,
            &opts(),
        )
        .unwrap();
        assert!((s1.p0 - s2.p0).abs() < 1e-7 && (s1.q0 - s2.q0).abs() < 1e-7);
        assert!((s1.v[0] - s2.v[0]).abs() < 1e-6);
        for j in 0..2 {
            assert!((s1.lambda_p[j] - s2.lambda_p[j]).abs() < 1e-6);
            assert!((s1.lambda_q[j] - s2.lambda_q[j]).abs() < 1e-6);
        }
        // root multipliers are the root prices
        assert!((s2.lambda_p[0] - data.c_p).abs() < 1e-6);
        assert!((s2.lambda_q[0] - data.c_q).abs() < 1e-6);
    }

    #[test]
    fn zero_anchor_is_rejected() {
        let net = two_node(0.01, 0.02, 100.0, 0.9, 1.05);
        let data = data_for(&net, 800.0, 300.0, 42.0);
        let err = build_opt2(&data, &[Anchor { from: 0, to: 1, l0_pu: 0.0 }], &single_mcc(0, 1, 1.0))
            .unwrap_err();
        assert!(matches!(err, DistflowError::ZeroAnchor { .. }));
        let err = build_opt2(&data, &[Anchor { from: 0, to: 1, l0_pu: 1.0 }], &MccTable::default())
            .unwrap_err();
        assert!(matches!(err, DistflowError::MissingMcc { .. }));
    }

    #[test]
    fn overload_is_exact_at_the_anchor() {
        // Load of 2 MW on a 48 A line: heavily overloaded.
        let net = two_node(0.01, 0.02, 48.1125, 0.9, 1.05);
        let data = data_for(&net, 2000.0, 500.0, 30.0);
        let s1 = solve_branch_flow(&build_opt1(&data).unwrap(), &data, &opts()).unwrap();
        let anchor = Anchor { from: 0, to: 1, l0_pu: s1.l[0] };
        let bf2 = build_opt2(&data, &[anchor], &single_mcc(0, 1, 10.0)).unwrap();
        let s2 = solve_branch_flow(&bf2, &data, &opts()).unwrap();
        assert!(s2.is_optimal());
        // Loads are fixed, so l stays at the anchor and ΔI = √l⁰ − I_max.
        assert!((s2.l[0] - s1.l[0]).abs() < 1e-6);
        let expect = s1.l[0].sqrt() - data.lines[0].i_max;
        assert!((s2.overload[0].1 - expect).abs() < 1e-6, "{} vs {}", s2.overload[0].1, expect);
        // Objective recomputed from the primal.
        let w_pu = 10.0 * data.bases.i_a;
        let recomputed = data.c_p * s2.p0 + data.c_q * s2.q0 + w_pu * s2.overload[0].1;
        assert!((recomputed - s2.objective).abs() <= 1e-6 * s2.objective.abs());
        // The congested node is worth more than the root.
        assert!(s2.lambda_p[1] > data.c_p);
        // Multiplier equals the finite-difference sensitivity of the objective.
        let r = conic::dual_sign_check(&bf2.program, &balance_label('p', 1), 1e-4, &opts()).unwrap();
        assert!(r <= f64::max(1e-4, 1e-3 * s2.lambda_p[1].abs()), "residual {r}");
    }

    #[test]
    fn procurement_without_overload_buys_nothing() {
        let net = two_node(0.01, 0.02, 200.0, 0.9, 1.05);
        let data = data_for(&net, 500.0, 100.0, 30.0);
        let s1 = solve_branch_flow(&build_opt1(&data).unwrap(), &data, &opts()).unwrap();
        // Loss-inclusive marginal values of the uncongested hour.
        let lp: Vec<f64> = s1.lambda_p.iter().map(|&l| data.price_to_physical(l)).collect();
        let lq: Vec<f64> = s1.lambda_q.iter().map(|&l| data.price_to_physical(l)).collect();
        let bf3 = build_opt3(&data, &lp, &lq, None).unwrap();
        let s3 = solve_branch_flow(&bf3, &data, &opts()).unwrap();
        assert!(s3.is_optimal());
        assert!(s3.der_p[1].abs() < 1e-4 && s3.der_q[1].abs() < 1e-4, "{:?}", (s3.der_p, s3.der_q));
        assert!((s3.objective - (data.c_p * s1.p0 + data.c_q * s1.q0)).abs() < 1e-6);
    }

    /// Single-line relief against the closed-form optimum.
    #[test]
    fn procurement_matches_single_line_closed_form() {
        let (r, x) = (0.01, 0.02);
        let net = two_node(r, x, 48.1125, 0.9, 1.05);
        // ~10% overload: 1.1 pu current at unity-ish power factor.
        let data = data_for(&net, 1100.0, 200.0, 30.0);
        let s1 = solve_branch_flow(&build_opt1(&data).unwrap(), &data, &opts()).unwrap();
        assert!(s1.l[0].sqrt() > data.lines[0].i_max * 1.05);
        let lp = [30.0, 95.0];
        let lq = [1.5, 9.0];
        let bf3 = build_opt3(&data, &lp, &lq, None).unwrap();
        let s3 = solve_branch_flow(&bf3, &data, &opts()).unwrap();
        assert!(s3.is_optimal());
        let expect = single_line::relieving_injection(&single_line::ReliefInput {
            r,
            x,
            v0: data.v_max_sq,
            i_max: data.lines[0].i_max,
            load_p: -data.p_inj[1],
            load_q: -data.q_inj[1],
            price_p: data.price_to_pu(lp[1]),
            price_q: data.price_to_pu(lq[1]),
            root_p: data.c_p,
            root_q: data.c_q,
        });
        assert!((s3.der_p[1] - expect.der_p).abs() < 1e-6, "{} vs {}", s3.der_p[1], expect.der_p);
        assert!((s3.der_q[1] - expect.der_q).abs() < 1e-6, "{} vs {}", s3.der_q[1], expect.der_q);
        assert!(s3.l[0].sqrt() <= data.lines[0].i_max + 1e-6);
        assert!(max_gap(&exactness_gap(&s3, &data)).0 < 1e-6);
    }

    #[test]
    fn tight_bounds_make_procurement_infeasible() {
        let net = two_node(0.01, 0.02, 48.1125, 0.9, 1.05);
        let data = data_for(&net, 1100.0, 200.0, 30.0);
        let bounds = DerBounds::uniform([1], 10.0, 10.0);
        let bf3 = build_opt3(&data, &[30.0, 95.0], &[1.5, 9.0], Some(&bounds)).unwrap();
        let s3 = solve_branch_flow(&bf3, &data, &opts()).unwrap();
        assert_eq!(s3.status, SolveStatus::Infeasible);
    }

    #[test]
    fn perturbed_solution_shows_positive_gap() {
        let net = two_node(0.01, 0.02, 100.0, 0.9, 1.05);
        let data = data_for(&net, 800.0, 300.0, 42.0);
        let mut s = solve_branch_flow(&build_opt1(&data).unwrap(), &data, &opts()).unwrap();
        s.l[0] *= 1.01;
        assert!(exactness_gap(&s, &data)[0] > 1e-5);
    }
}
