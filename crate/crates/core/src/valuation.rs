//! The yearly valuation steps: overload measurement, MCC allocation, LMV
//! pricing, generic DER procurement and projection of an actual PV unit.
//!
//! Every step fans out per hour on the current rayon pool and gathers results
//! in hour order, so outputs do not depend on the number of workers.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{SolveOptions, SolveStatus};
use crate::distflow::{
    build_opt1, build_opt2, build_opt3, build_opt3_elastic, exactness_gap, max_gap, solve_branch_flow, Anchor,
    BranchFlowProgram, BranchFlowSolution, DerBounds, ProgramKind,
};
use crate::error::PipelineError;
use crate::network::{from_per_unit, to_per_unit, HourlyScenario, Network, NodeId, NormalizedProblemData};
use crate::oracle::newton_load_flow;

/// Rounds to 6 decimals, the precision of every exported table.
pub fn quantize(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub solve: SolveOptions,
    /// Largest accepted cone gap `v·l − (P² + Q²)` in pu².
    pub exactness_tol: f64,
    /// Abort on an inexact hour instead of flagging it.
    pub fail_on_inexact: bool,
    /// After a bounds-infeasible procurement hour, solve it again without
    /// bounds and keep that plan.
    pub retry_unbounded: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { solve: SolveOptions::default(), exactness_tol: 1e-6, fail_on_inexact: true, retry_unbounded: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlagKind {
    VoltageInfeasible,
    Inexact,
    SolverFailure,
    BoundsInfeasible,
    ResimulationViolation,
}

/// Notes that do not flag an hour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoteKind {
    AnchorDrift,
    OverloadClamp,
    GridCostAboveViolation,
    UnboundedRetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Flag(FlagKind),
    Note(NoteKind),
}

impl EventKind {
    pub fn is_flag(&self) -> bool {
        matches!(self, EventKind::Flag(_))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Flag(FlagKind::VoltageInfeasible) => "voltage-infeasible",
            EventKind::Flag(FlagKind::Inexact) => "inexact",
            EventKind::Flag(FlagKind::SolverFailure) => "solver-failure",
            EventKind::Flag(FlagKind::BoundsInfeasible) => "bounds-infeasible",
            EventKind::Flag(FlagKind::ResimulationViolation) => "resimulation-violation",
            EventKind::Note(NoteKind::AnchorDrift) => "anchor-drift",
            EventKind::Note(NoteKind::OverloadClamp) => "overload-clamp",
            EventKind::Note(NoteKind::GridCostAboveViolation) => "grid-cost-above-violation",
            EventKind::Note(NoteKind::UnboundedRetry) => "unbounded-retry",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EventKind::Flag(FlagKind::VoltageInfeasible),
            EventKind::Flag(FlagKind::Inexact),
            EventKind::Flag(FlagKind::SolverFailure),
            EventKind::Flag(FlagKind::BoundsInfeasible),
            EventKind::Flag(FlagKind::ResimulationViolation),
            EventKind::Note(NoteKind::AnchorDrift),
            EventKind::Note(NoteKind::OverloadClamp),
            EventKind::Note(NoteKind::GridCostAboveViolation),
            EventKind::Note(NoteKind::UnboundedRetry),
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Something worth reporting about one hour of one step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct HourEvent {
    pub hour: usize,
    pub step: String,
    pub kind: EventKind,
    pub detail: String,
}

impl HourEvent {
    fn new(hour: usize, kind: ProgramKind, event: EventKind, detail: impl Into<String>) -> Self {
        Self { hour, step: kind.step_name().to_string(), kind: event, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverloadRecord {
    pub hour: usize,
    pub from: NodeId,
    pub to: NodeId,
    pub current_a: f64,
    pub overload_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineUpgrade {
    pub from: NodeId,
    pub to: NodeId,
    /// Added capacity, A.
    pub delta_ampacity_a: f64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Allocation {
    /// Costs and capacity additions given per line.
    Direct(Vec<LineUpgrade>),
    /// Cost split in proportion to peak overload times line length.
    LengthWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvestmentProject {
    pub total_cost_usd: f64,
    pub alpha: f64,
    pub allocation: Allocation,
}

impl InvestmentProject {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidProject(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("annualization factor must be positive, got {}", self.alpha));
        }
        if !(self.total_cost_usd >= 0.0 && self.total_cost_usd.is_finite()) {
            return bad(format!("total cost must be nonnegative, got {}", self.total_cost_usd));
        }
        if let Allocation::Direct(ups) = &self.allocation {
            let mut sum = 0.0;
            for u in ups {
                if !(u.delta_ampacity_a > 0.0) {
                    return bad(format!("upgrade ({},{}) has nonpositive capacity {}", u.from, u.to, u.delta_ampacity_a));
                }
                if !(u.cost_usd >= 0.0) {
                    return bad(format!("upgrade ({},{}) has negative cost {}", u.from, u.to, u.cost_usd));
                }
                sum += u.cost_usd;
            }
            if (sum - self.total_cost_usd).abs() > 1e-6 * self.total_cost_usd.abs().max(1.0) {
                return bad(format!("upgrade costs sum to {sum}, total cost is {}", self.total_cost_usd));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MccEntry {
    pub from: NodeId,
    pub to: NodeId,
    pub w_usd_per_a_h: f64,
    pub t_hours: usize,
    pub allocated_cost_usd: f64,
    pub capacity_divisor_a: f64,
}

/// Overload factors, one entry per line that was overloaded at least once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MccTable {
    pub entries: Vec<MccEntry>,
}

impl MccTable {
    pub fn factor(&self, from: NodeId, to: NodeId) -> Option<f64> {
        self.entries.iter().find(|e| e.from == from && e.to == to).map(|e| e.w_usd_per_a_h)
    }

    /// The table as it reads back from an exported file.
    pub fn quantized(&self) -> MccTable {
        MccTable {
            entries: self
                .entries
                .iter()
                .map(|e| MccEntry {
                    w_usd_per_a_h: quantize(e.w_usd_per_a_h),
                    allocated_cost_usd: quantize(e.allocated_cost_usd),
                    capacity_divisor_a: quantize(e.capacity_divisor_a),
                    ..*e
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `α·c / (divisor·T)`
pub fn overload_factor(alpha: f64, cost_usd: f64, divisor_a: f64, t_hours: usize) -> f64 {
    alpha * cost_usd / (divisor_a * t_hours as f64)
}

pub fn compute_mcc(
    project: &InvestmentProject,
    records: &[OverloadRecord],
    network: &Network,
) -> Result<MccTable, PipelineError> {
    project.validate()?;
    // (hours, peak overload) per line
    let mut lines: BTreeMap<(NodeId, NodeId), (usize, f64)> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in records.iter().filter(|r| r.overload_a > 0.0) {
        let e = lines.entry((r.from, r.to)).or_insert((0, 0.0));
        if seen.insert((r.hour, r.from, r.to)) {
            e.0 += 1;
        }
        e.1 = e.1.max(r.overload_a);
    }
    let entries = match &project.allocation {
        Allocation::Direct(ups) => lines
            .iter()
            .map(|(&(from, to), &(t, _))| {
                let u = ups
                    .iter()
                    .find(|u| u.from == from && u.to == to)
                    .ok_or(PipelineError::MissingUpgrade { from, to })?;
                Ok(MccEntry {
                    from,
                    to,
                    w_usd_per_a_h: overload_factor(project.alpha, u.cost_usd, u.delta_ampacity_a, t),
                    t_hours: t,
                    allocated_cost_usd: u.cost_usd,
                    capacity_divisor_a: u.delta_ampacity_a,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?,
        Allocation::LengthWeighted => {
            let length = |from, to| {
                network.line_index(from, to).map(|k| network.lines()[k].length_m).unwrap_or(0.0)
            };
            let total: f64 = lines.iter().map(|(&(f, t), &(_, peak))| peak * length(f, t)).sum();
            if !lines.is_empty() && !(total > 0.0) {
                return Err(PipelineError::InvalidProject(
                    "length-weighted allocation needs positive lengths on overloaded lines".into(),
                ));
            }
            lines
                .iter()
                .map(|(&(from, to), &(t, peak))| {
                    let c = peak * length(from, to) / total * project.total_cost_usd;
                    MccEntry {
                        from,
                        to,
                        w_usd_per_a_h: overload_factor(project.alpha, c, peak, t),
                        t_hours: t,
                        allocated_cost_usd: c,
                        capacity_divisor_a: peak,
                    }
                })
                .collect()
        }
    };
    Ok(MccTable { entries })
}

fn scenario_data(network: &Network, s: &HourlyScenario) -> Result<NormalizedProblemData, PipelineError> {
    Ok(to_per_unit(network, s)?)
}

fn build_err(kind: ProgramKind, hour: usize) -> impl Fn(crate::error::DistflowError) -> PipelineError {
    move |source| PipelineError::Build { step: kind.step_name(), hour, source }
}

fn solve_hour(
    bf: &BranchFlowProgram,
    data: &NormalizedProblemData,
    opts: &PipelineOptions,
) -> Result<BranchFlowSolution, PipelineError> {
    solve_branch_flow(bf, data, &opts.solve).map_err(|source| PipelineError::Solve {
        step: bf.kind.step_name(),
        hour: bf.hour,
        source,
    })
}

/// Checks the cone gap; returns a flag if inexact hours are tolerated.
fn certify(
    sol: &BranchFlowSolution,
    data: &NormalizedProblemData,
    opts: &PipelineOptions,
) -> Result<Option<HourEvent>, PipelineError> {
    let (gap, k) = max_gap(&exactness_gap(sol, data));
    if gap <= opts.exactness_tol {
        return Ok(None);
    }
    let line = data.lines[k];
    if opts.fail_on_inexact {
        return Err(PipelineError::Inexact {
            step: sol.kind.step_name(),
            hour: sol.hour,
            gap,
            from: line.from,
            to: line.to,
        });
    }
    Ok(Some(HourEvent::new(
        sol.hour,
        sol.kind,
        EventKind::Flag(FlagKind::Inexact),
        format!("max cone gap {gap:.3e} pu² on line ({},{})", line.from, line.to),
    )))
}

/// Gathers per-hour results in hour order, surfacing the first error.
fn gather<T: Send>(results: Vec<Result<T, PipelineError>>) -> Result<Vec<T>, PipelineError> {
    results.into_iter().collect()
}

#[derive(Debug, Clone, Default)]
pub struct Preprocessed {
    pub records: Vec<OverloadRecord>,
    /// Linearization points for every overloaded hour.
    pub anchors: BTreeMap<usize, Vec<Anchor>>,
    pub events: Vec<HourEvent>,
    pub hours_solved: usize,
    pub max_gap: f64,
}

struct HourMeasure {
    records: Vec<OverloadRecord>,
    anchors: Vec<Anchor>,
    events: Vec<HourEvent>,
    solved: bool,
    gap: f64,
}

fn measure_hour(network: &Network, s: &HourlyScenario, opts: &PipelineOptions) -> Result<HourMeasure, PipelineError> {
    let kind = ProgramKind::Measure;
    let data = scenario_data(network, s)?;
    let bf = build_opt1(&data).map_err(build_err(kind, s.hour))?;
    let sol = solve_hour(&bf, &data, opts)?;
    match &sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Ok(HourMeasure {
                records: vec![],
                anchors: vec![],
                events: vec![HourEvent::new(
                    s.hour,
                    kind,
                    EventKind::Flag(FlagKind::VoltageInfeasible),
                    "voltage limits cannot be met",
                )],
                solved: false,
                gap: 0.0,
            })
        }
        other => {
            return Err(PipelineError::NotSolved { step: kind.step_name(), hour: s.hour, status: format!("{other:?}") })
        }
    }
    let mut events = Vec::new();
    events.extend(certify(&sol, &data, opts)?);
    let (gap, _) = max_gap(&exactness_gap(&sol, &data));
    let b = data.bases;
    let mut records = Vec::new();
    let mut anchors = Vec::new();
    for (k, spec) in network.lines().iter().enumerate() {
        let current_a = from_per_unit::current_a(&b, sol.l[k].max(0.0).sqrt());
        let overload_a = (current_a - spec.ampacity_a).max(0.0);
        if overload_a > 0.0 {
            records.push(OverloadRecord { hour: s.hour, from: spec.from, to: spec.to, current_a, overload_a });
            anchors.push(Anchor { from: spec.from, to: spec.to, l0_pu: sol.l[k] });
        }
    }
    Ok(HourMeasure { records, anchors, events, solved: true, gap })
}

/// One measurement solve per hour.
pub fn preprocess_year(
    network: &Network,
    scenarios: &[HourlyScenario],
    opts: &PipelineOptions,
) -> Result<Preprocessed, PipelineError> {
    let per_hour = gather(scenarios.par_iter().map(|s| measure_hour(network, s, opts)).collect())?;
    let mut out = Preprocessed::default();
    for (s, h) in scenarios.iter().zip(per_hour) {
        out.records.extend(h.records);
        if !h.anchors.is_empty() {
            out.anchors.insert(s.hour, h.anchors);
        }
        out.events.extend(h.events);
        out.hours_solved += h.solved as usize;
        out.max_gap = out.max_gap.max(h.gap);
    }
    Ok(out)
}

/// Nodal values for one hour, $/MWh and $/MVARh.
#[derive(Debug, Clone, PartialEq)]
pub struct HourLmv {
    pub c_p: f64,
    pub c_q: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// False for hours carrying the root prices by convention.
    pub priced: bool,
}

impl HourLmv {
    pub fn flat(c_p: f64, c_q: f64, nodes: usize) -> Self {
        Self { c_p, c_q, p: vec![c_p; nodes], q: vec![c_q; nodes], priced: false }
    }

    pub fn p_grid(&self, node: NodeId) -> f64 {
        self.p[node] - self.c_p
    }

    pub fn q_grid(&self, node: NodeId) -> f64 {
        self.q[node] - self.c_q
    }

    pub fn quantized(&self) -> HourLmv {
        HourLmv {
            c_p: self.c_p,
            c_q: self.c_q,
            p: self.p.iter().map(|&x| quantize(x)).collect(),
            q: self.q.iter().map(|&x| quantize(x)).collect(),
            priced: self.priced,
        }
    }
}

/// Values for every scenario hour; unpriced hours carry `(c^P, c^Q)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LmvSurface {
    pub hours: BTreeMap<usize, HourLmv>,
}

impl LmvSurface {
    pub fn priced_hours(&self) -> impl Iterator<Item = (usize, &HourLmv)> {
        self.hours.iter().filter(|(_, h)| h.priced).map(|(&t, h)| (t, h))
    }

    pub fn quantized(&self) -> LmvSurface {
        LmvSurface { hours: self.hours.iter().map(|(&t, h)| (t, h.quantized())).collect() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Priced {
    pub lmv: LmvSurface,
    pub events: Vec<HourEvent>,
    pub failures: usize,
    /// Optimal pricing objective per priced hour, $/h.
    pub objectives: BTreeMap<usize, f64>,
    pub max_gap: f64,
}

struct HourPrice {
    lmv: Option<HourLmv>,
    objective: f64,
    events: Vec<HourEvent>,
    gap: f64,
}

fn price_hour(
    network: &Network,
    s: &HourlyScenario,
    anchors: &[Anchor],
    mcc: &MccTable,
    opts: &PipelineOptions,
) -> Result<HourPrice, PipelineError> {
    let kind = ProgramKind::Price;
    let data = scenario_data(network, s)?;
    let bf = build_opt2(&data, anchors, mcc).map_err(build_err(kind, s.hour))?;
    let sol = solve_hour(&bf, &data, opts)?;
    if !sol.is_optimal() {
        return Ok(HourPrice {
            lmv: None,
            objective: f64::NAN,
            events: vec![HourEvent::new(
                s.hour,
                kind,
                EventKind::Flag(FlagKind::SolverFailure),
                format!("pricing program {:?}", sol.status),
            )],
            gap: 0.0,
        });
    }
    let mut events = Vec::new();
    events.extend(certify(&sol, &data, opts)?);
    for (o, &(_, di)) in bf.overload.iter().zip(&sol.overload) {
        let line = data.lines[o.line];
        let drift = (sol.l[o.line] - o.l0).abs() / o.l0;
        if drift > 1e-6 {
            events.push(HourEvent::new(
                s.hour,
                kind,
                EventKind::Note(NoteKind::AnchorDrift),
                format!("line ({},{}) squared current moved {:.3e} relative to its anchor", line.from, line.to, drift),
            ));
        }
        if di <= 1e-9 {
            events.push(HourEvent::new(
                s.hour,
                kind,
                EventKind::Note(NoteKind::OverloadClamp),
                format!("line ({},{}) overload held at zero", line.from, line.to),
            ));
        }
    }
    let (gap, _) = max_gap(&exactness_gap(&sol, &data));
    let lmv = HourLmv {
        c_p: s.lmp,
        c_q: s.q_price,
        p: sol.lambda_p.iter().map(|&l| data.price_to_physical(l)).collect(),
        q: sol.lambda_q.iter().map(|&l| data.price_to_physical(l)).collect(),
        priced: true,
    };
    Ok(HourPrice { lmv: Some(lmv), objective: sol.objective, events, gap })
}

/// One pricing solve per anchored hour; every other hour gets the root prices.
pub fn price_hours(
    network: &Network,
    scenarios: &[HourlyScenario],
    anchors: &BTreeMap<usize, Vec<Anchor>>,
    mcc: &MccTable,
    opts: &PipelineOptions,
) -> Result<Priced, PipelineError> {
    let n = network.node_count();
    let results = gather(
        scenarios
            .par_iter()
            .map(|s| match anchors.get(&s.hour) {
                Some(a) if !a.is_empty() => price_hour(network, s, a, mcc, opts).map(Some),
                _ => Ok(None),
            })
            .collect(),
    )?;
    let mut out = Priced::default();
    for (s, r) in scenarios.iter().zip(results) {
        let flat = HourLmv::flat(s.lmp, s.q_price, n);
        match r {
            None => {
                out.lmv.hours.insert(s.hour, flat);
            }
            Some(h) => {
                out.failures += h.lmv.is_none() as usize;
                out.events.extend(h.events);
                out.max_gap = out.max_gap.max(h.gap);
                if h.lmv.is_some() {
                    out.objectives.insert(s.hour, h.objective);
                }
                out.lmv.hours.insert(s.hour, h.lmv.unwrap_or(flat));
            }
        }
    }
    Ok(out)
}

/// Per-node excess below this magnitude (kW or kVAR) is left out of the
/// minimal-violation report.
pub const REPORT_THRESHOLD_KW: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerDispatch {
    pub node: NodeId,
    pub p_kw: f64,
    pub q_kvar: f64,
}

/// Dollar split of one hour's DER purchases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSplit {
    /// Real power bought at the P-LMVs.
    pub real_usd: f64,
    /// Reactive power bought at the Q-LMVs.
    pub reactive_usd: f64,
    /// The same quantities at the root prices.
    pub energy_usd: f64,
    /// What the LMVs add over the root prices.
    pub grid_usd: f64,
}

impl CostSplit {
    pub fn full_usd(&self) -> f64 {
        self.real_usd + self.reactive_usd
    }

    pub fn add(&mut self, o: &CostSplit) {
        self.real_usd += o.real_usd;
        self.reactive_usd += o.reactive_usd;
        self.energy_usd += o.energy_usd;
        self.grid_usd += o.grid_usd;
    }
}

pub fn cost_split(der: &[DerDispatch], lmv: &HourLmv) -> CostSplit {
    let mut c = CostSplit::default();
    for d in der {
        let (p, q) = (d.p_kw / 1000.0, d.q_kvar / 1000.0);
        c.real_usd += lmv.p[d.node] * p;
        c.reactive_usd += lmv.q[d.node] * q;
        c.energy_usd += lmv.c_p * p + lmv.c_q * q;
        c.grid_usd += lmv.p_grid(d.node) * p + lmv.q_grid(d.node) * q;
    }
    c
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProcurementPlan {
    /// Nonzero dispatch per procured hour, node-ordered.
    pub hours: BTreeMap<usize, Vec<DerDispatch>>,
}

impl ProcurementPlan {
    pub fn total_p_mwh(&self) -> f64 {
        self.hours.values().flatten().map(|d| d.p_kw).sum::<f64>() / 1000.0
    }

    pub fn total_q_mvarh(&self) -> f64 {
        self.hours.values().flatten().map(|d| d.q_kvar).sum::<f64>() / 1000.0
    }

    pub fn costs(&self, lmv: &LmvSurface) -> CostSplit {
        let mut total = CostSplit::default();
        for (t, der) in &self.hours {
            if let Some(h) = lmv.hours.get(t) {
                total.add(&cost_split(der, h));
            }
        }
        total
    }
}

#[derive(Debug, Clone, Default)]
pub struct Procured {
    pub plan: ProcurementPlan,
    pub events: Vec<HourEvent>,
    pub hours_solved: usize,
    pub max_gap: f64,
}

struct HourProcure {
    der: Option<Vec<DerDispatch>>,
    events: Vec<HourEvent>,
    gap: f64,
}

fn dispatch_rows(sol: &BranchFlowSolution, data: &NormalizedProblemData) -> Vec<DerDispatch> {
    let s_kw = data.bases.s_kw();
    (0..data.node_count())
        .filter_map(|j| {
            let p = quantize(sol.der_p[j] * s_kw);
            let q = quantize(sol.der_q[j] * s_kw);
            (p != 0.0 || q != 0.0).then_some(DerDispatch { node: j, p_kw: p, q_kvar: q })
        })
        .collect()
}

/// Load flow with the plan's injections fixed, checked against ampacity and
/// voltage limits.
pub fn resimulate(
    data: &NormalizedProblemData,
    der: &[DerDispatch],
    v_root: f64,
) -> Result<Option<String>, crate::error::OracleError> {
    const TOL: f64 = 1e-6;
    let s_kw = data.bases.s_kw();
    let mut d = data.clone();
    for x in der {
        d.p_inj[x.node] += x.p_kw / s_kw;
        d.q_inj[x.node] += x.q_kvar / s_kw;
    }
    let lf = newton_load_flow(&d, v_root)?;
    for (k, i) in lf.currents.iter().enumerate() {
        let line = d.lines[k];
        if i.norm() > line.i_max + TOL {
            return Ok(Some(format!(
                "line ({},{}) at {:.6} pu exceeds ampacity {:.6} pu",
                line.from,
                line.to,
                i.norm(),
                line.i_max
            )));
        }
    }
    let (lo, hi) = (d.v_min_sq.sqrt(), d.v_max_sq.sqrt());
    for (j, v) in lf.voltages.iter().enumerate() {
        if v.norm() < lo - TOL || v.norm() > hi + TOL {
            return Ok(Some(format!("node {j} voltage {:.6} pu outside [{lo}, {hi}]", v.norm())));
        }
    }
    Ok(None)
}

fn procure_hour(
    network: &Network,
    s: &HourlyScenario,
    lmv: &HourLmv,
    bounds: Option<&DerBounds>,
    violation_usd: f64,
    opts: &PipelineOptions,
) -> Result<HourProcure, PipelineError> {
    let kind = ProgramKind::Procure;
    let data = scenario_data(network, s)?;
    let bf = build_opt3(&data, &lmv.p, &lmv.q, bounds).map_err(build_err(kind, s.hour))?;
    let mut sol = solve_hour(&bf, &data, opts)?;
    let mut events = Vec::new();
    match (&sol.status, bounds) {
        (SolveStatus::Optimal, _) => {}
        (SolveStatus::Infeasible, Some(b)) => {
            events.push(HourEvent::new(
                s.hour,
                kind,
                EventKind::Flag(FlagKind::BoundsInfeasible),
                minimal_violation(&data, b, opts),
            ));
            if !opts.retry_unbounded {
                return Ok(HourProcure { der: None, events, gap: 0.0 });
            }
            let free = build_opt3(&data, &lmv.p, &lmv.q, None).map_err(build_err(kind, s.hour))?;
            sol = solve_hour(&free, &data, opts)?;
            if !sol.is_optimal() {
                events.push(HourEvent::new(
                    s.hour,
                    kind,
                    EventKind::Flag(FlagKind::SolverFailure),
                    format!("unbounded retry {:?}", sol.status),
                ));
                return Ok(HourProcure { der: None, events, gap: 0.0 });
            }
            events.push(HourEvent::new(
                s.hour,
                kind,
                EventKind::Note(NoteKind::UnboundedRetry),
                "plan taken from the unbounded retry",
            ));
        }
        (status, _) => {
            events.push(HourEvent::new(
                s.hour,
                kind,
                EventKind::Flag(FlagKind::SolverFailure),
                format!("procurement program {status:?}"),
            ));
            return Ok(HourProcure { der: None, events, gap: 0.0 });
        }
    }
    events.extend(certify(&sol, &data, opts)?);
    let (gap, _) = max_gap(&exactness_gap(&sol, &data));
    let der = dispatch_rows(&sol, &data);
    let check = resimulate(&data, &der, sol.v[0].max(0.0).sqrt())
        .unwrap_or_else(|e| Some(format!("load flow with the plan failed: {e}")));
    if let Some(detail) = check {
        events.push(HourEvent::new(s.hour, kind, EventKind::Flag(FlagKind::ResimulationViolation), detail));
    }
    let grid = cost_split(&der, lmv).grid_usd;
    if grid > violation_usd * (1.0 + 1e-6) + 1e-6 {
        events.push(HourEvent::new(
            s.hour,
            kind,
            EventKind::Note(NoteKind::GridCostAboveViolation),
            format!("grid-component cost {grid:.6} exceeds monetized overload {violation_usd:.6}"),
        ));
    }
    Ok(HourProcure { der: Some(der), events, gap })
}

fn minimal_violation(data: &NormalizedProblemData, bounds: &DerBounds, opts: &PipelineOptions) -> String {
    let s_kw = data.bases.s_kw();
    let Ok((bf, excess)) = build_opt3_elastic(data, bounds) else {
        return "bounds cannot be met".into();
    };
    match solve_branch_flow(&bf, data, &opts.solve) {
        Ok(sol) if sol.is_optimal() => {
            let mut parts = Vec::new();
            let (mut tp, mut tq) = (0.0, 0.0);
            for (node, ep, eq) in excess {
                let (p, q) = (sol.raw.value(ep) * s_kw, sol.raw.value(eq) * s_kw);
                tp += p;
                tq += q;
                if p > REPORT_THRESHOLD_KW || q > REPORT_THRESHOLD_KW {
                    parts.push(format!("node {node} +{p:.3} kW +{q:.3} kVAR"));
                }
            }
            if parts.is_empty() {
                format!("bounds cannot be met; minimal excess {tp:.3} kW, {tq:.3} kVAR")
            } else {
                format!("bounds cannot be met; minimal excess {tp:.3} kW, {tq:.3} kVAR ({})", parts.join(", "))
            }
        }
        Ok(sol) => format!("bounds cannot be met; relief impossible at any DER size ({:?})", sol.status),
        Err(e) => format!("bounds cannot be met; excess not computed: {e}"),
    }
}

/// Σ w·ΔÎ over each hour's records, $.
pub fn monetized_overload(records: &[OverloadRecord], mcc: &MccTable) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(w) = mcc.factor(r.from, r.to) {
            *out.entry(r.hour).or_insert(0.0) += w * r.overload_a;
        }
    }
    out
}

/// One procurement solve per priced hour.
pub fn procure_hours(
    network: &Network,
    scenarios: &[HourlyScenario],
    lmv: &LmvSurface,
    bounds: Option<&DerBounds>,
    violation_usd: &BTreeMap<usize, f64>,
    opts: &PipelineOptions,
) -> Result<Procured, PipelineError> {
    let results = gather(
        scenarios
            .par_iter()
            .map(|s| match lmv.hours.get(&s.hour) {
                Some(h) if h.priced => {
                    let v = violation_usd.get(&s.hour).copied().unwrap_or(0.0);
                    procure_hour(network, s, h, bounds, v, opts).map(Some)
                }
                _ => Ok(None),
            })
            .collect(),
    )?;
    let mut out = Procured::default();
    for (s, r) in scenarios.iter().zip(results) {
        let Some(h) = r else { continue };
        out.events.extend(h.events);
        out.max_gap = out.max_gap.max(h.gap);
        if let Some(der) = h.der {
            out.hours_solved += 1;
            if !der.is_empty() {
                out.plan.hours.insert(s.hour, der);
            }
        }
    }
    Ok(out)
}

/// Output of a smart-inverter PV unit in one hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvHour {
    pub hour: usize,
    pub rho: f64,
    pub p_kw: f64,
    pub q_kvar: f64,
    pub value_usd: f64,
}

/// Value-maximizing `(P, Q)` in the set `P² + Q² ≤ k²`, `0 ≤ P ≤ ρ·k`.
pub fn pv_dispatch(p_lmv: f64, q_lmv: f64, rho: f64, k: f64) -> (f64, f64) {
    let cap = rho.clamp(0.0, 1.0) * k;
    let sign = if q_lmv < 0.0 { -1.0 } else { 1.0 };
    if p_lmv <= 0.0 {
        return (0.0, sign * k);
    }
    let norm = p_lmv.hypot(q_lmv);
    let p = k * p_lmv / norm;
    if p <= cap {
        (p, k * q_lmv / norm)
    } else {
        (cap, sign * (k * k - cap * cap).max(0.0).sqrt())
    }
}

/// Hourly dispatch and value of a PV unit of nameplate `k_kw` at `node`, for
/// each `(hour, ρ)` of the profile that has LMVs.
pub fn project_actual_der(lmv: &LmvSurface, profile: &[(usize, f64)], node: NodeId, k_kw: f64) -> Vec<PvHour> {
    profile
        .iter()
        .filter_map(|&(hour, rho)| {
            let h = lmv.hours.get(&hour)?;
            let (p, q) = (h.p[node], h.q[node]);
            let (p_kw, q_kvar) = pv_dispatch(p, q, rho, k_kw);
            Some(PvHour { hour, rho, p_kw, q_kvar, value_usd: (p_kw * p + q_kvar * q) / 1000.0 })
        })
        .collect()
}
