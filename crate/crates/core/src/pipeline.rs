//! Runs the valuation steps against a [`ResultBundle`].
//!
//! Each step reads what it needs from the bundle's tables (never from
//! in-memory side channels), so running the steps one at a time with the
//! bundle written to and re-read from disk in between gives the same bytes as
//! a single run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::distflow::{build_opt1, build_opt2, build_opt3, Anchor, DerBounds};
use crate::error::{FormatError, PipelineError};
use crate::io::{
    AnchorRow, CostTotals, EventRow, FlagEntry, InputSet, LmvRow, MccRow, OverloadRow, ProcurementRow, ResultBundle,
    Summary,
};
use crate::network::{to_per_unit, HourlyScenario, Network};
use crate::valuation::{
    compute_mcc, monetized_overload, preprocess_year, price_hours, procure_hours, quantize, EventKind, FlagKind,
    HourEvent, HourLmv, InvestmentProject, LmvSurface, MccEntry, MccTable, NoteKind, OverloadRecord, PipelineOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Step {
    Preprocess,
    Price,
    Procure,
}

impl Step {
    pub const ALL: [Step; 3] = [Step::Preprocess, Step::Price, Step::Procure];

    pub fn name(self) -> &'static str {
        match self {
            Step::Preprocess => "preprocess",
            Step::Price => "price",
            Step::Procure => "procure",
        }
    }

    fn previous(self) -> Option<Step> {
        match self {
            Step::Preprocess => None,
            Step::Price => Some(Step::Preprocess),
            Step::Procure => Some(Step::Price),
        }
    }
}

/// Validated, per-hour inputs of a run.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub network: Network,
    pub scenarios: Vec<HourlyScenario>,
    pub project: InvestmentProject,
    pub bounds: Option<DerBounds>,
}

impl RunInputs {
    /// `hours` restricts the run to the listed hours; `alpha` replaces the
    /// investment's annualization factor.
    pub fn from_set(
        set: &InputSet,
        q_fraction: f64,
        hours: Option<&BTreeSet<usize>>,
        alpha: Option<f64>,
    ) -> Result<Self, PipelineError> {
        let network = Network::new(set.feeder.clone())?;
        let mut project = set
            .investment
            .clone()
            .ok_or_else(|| PipelineError::InvalidProject("no investment project given".into()))?;
        if let Some(a) = alpha {
            project.alpha = a;
        }
        project.validate()?;
        let scenarios = set
            .scenarios(q_fraction)
            .into_iter()
            .filter(|s| hours.is_none_or(|h| h.contains(&s.hour)))
            .collect();
        Ok(Self { network, scenarios, project, bounds: set.bounds.clone() })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunSettings {
    pub options: PipelineOptions,
    pub skip_procurement: bool,
    /// Directory for text listings of every solved program.
    pub export_programs: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTiming {
    pub step: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub bundle: ResultBundle,
    pub timings: Vec<StepTiming>,
}

impl RunReport {
    pub fn has_flags(&self) -> bool {
        self.bundle.events.iter().any(EventRow::is_flag)
    }
}

fn event_row(e: HourEvent) -> EventRow {
    EventRow {
        hour: e.hour,
        step: e.step,
        severity: if e.kind.is_flag() { "flag" } else { "note" }.into(),
        kind: e.kind.to_string(),
        detail: e.detail,
    }
}

fn replace_events(bundle: &mut ResultBundle, from: Step, new: Vec<HourEvent>) {
    let stale: BTreeSet<&str> = Step::ALL.iter().filter(|s| **s >= from).map(|s| s.name()).collect();
    bundle.events.retain(|e| !stale.contains(e.step.as_str()));
    bundle.events.extend(new.into_iter().map(event_row));
    bundle.events.sort();
}

fn anchors_by_hour(rows: &[AnchorRow]) -> BTreeMap<usize, Vec<Anchor>> {
    let mut out: BTreeMap<usize, Vec<Anchor>> = BTreeMap::new();
    for r in rows {
        out.entry(r.hour).or_default().push(Anchor { from: r.from, to: r.to, l0_pu: r.l0_pu });
    }
    out
}

fn mcc_from_rows(rows: &[MccRow]) -> MccTable {
    MccTable {
        entries: rows
            .iter()
            .map(|r| MccEntry {
                from: r.from,
                to: r.to,
                w_usd_per_a_h: r.w_usd_per_a_h,
                t_hours: r.t_hours,
                allocated_cost_usd: r.allocated_cost_usd,
                capacity_divisor_a: r.capacity_divisor_a,
            })
            .collect(),
    }
}

fn records_from_rows(rows: &[OverloadRow], network: &Network) -> Vec<OverloadRecord> {
    rows.iter()
        .map(|r| {
            let amp = network.line_index(r.from, r.to).map(|k| network.lines()[k].ampacity_a).unwrap_or(f64::NAN);
            OverloadRecord { hour: r.hour, from: r.from, to: r.to, current_a: amp + r.overload_a, overload_a: r.overload_a }
        })
        .collect()
}

fn flagged_in(bundle: &ResultBundle, step: Step, kinds: &[FlagKind]) -> BTreeSet<usize> {
    let names: Vec<&str> = kinds.iter().map(|k| EventKind::Flag(*k).as_str()).collect();
    bundle
        .events
        .iter()
        .filter(|e| e.step == step.name() && names.contains(&e.kind.as_str()))
        .map(|e| e.hour)
        .collect()
}

/// Hours with a successful pricing solve.
fn priced_hours(bundle: &ResultBundle) -> BTreeSet<usize> {
    let failed = flagged_in(bundle, Step::Price, &[FlagKind::SolverFailure]);
    bundle.anchors.iter().map(|a| a.hour).filter(|h| !failed.contains(h)).collect()
}

fn lmv_from_rows(bundle: &ResultBundle, scenarios: &[HourlyScenario], nodes: usize) -> LmvSurface {
    let priced = priced_hours(bundle);
    let mut hours: BTreeMap<usize, HourLmv> = scenarios
        .iter()
        .map(|s| (s.hour, HourLmv { priced: priced.contains(&s.hour), ..HourLmv::flat(s.lmp, s.q_price, nodes) }))
        .collect();
    for r in &bundle.lmv {
        if let Some(h) = hours.get_mut(&r.hour) {
            h.p[r.node] = r.p_lmv;
            h.q[r.node] = r.q_lmv;
        }
    }
    LmvSurface { hours }
}

/// The LMV table of a finished pricing step, without the run's inputs; the
/// root node's row supplies the hour's wholesale prices.
pub fn lmv_surface(bundle: &ResultBundle) -> Option<LmvSurface> {
    if !bundle.summary.steps_completed.iter().any(|s| s == Step::Price.name()) {
        return None;
    }
    let nodes = bundle.lmv.iter().map(|r| r.node + 1).max()?;
    let priced = priced_hours(bundle);
    let mut hours: BTreeMap<usize, HourLmv> = BTreeMap::new();
    for r in &bundle.lmv {
        let h = hours.entry(r.hour).or_insert_with(|| HourLmv {
            priced: priced.contains(&r.hour),
            ..HourLmv::flat(f64::NAN, f64::NAN, nodes)
        });
        h.p[r.node] = r.p_lmv;
        h.q[r.node] = r.q_lmv;
        if r.node == 0 {
            h.c_p = r.p_lmv;
            h.c_q = r.q_lmv;
        }
    }
    Some(LmvSurface { hours })
}

fn require(bundle: &ResultBundle, step: Step) -> Result<(), PipelineError> {
    if let Some(prev) = step.previous() {
        if !bundle.summary.steps_completed.iter().any(|s| s == prev.name()) {
            return Err(PipelineError::MissingStep { step: step.name(), needs: prev.name() });
        }
    }
    Ok(())
}

/// Runs one step, replacing its tables and those of later steps.
pub fn run_step(
    step: Step,
    inputs: &RunInputs,
    settings: &RunSettings,
    bundle: &mut ResultBundle,
) -> Result<(), PipelineError> {
    require(bundle, step)?;
    let opts = &settings.options;
    let net = &inputs.network;
    match step {
        Step::Preprocess => {
            let pre = preprocess_year(net, &inputs.scenarios, opts)?;
            let mcc = compute_mcc(&inputs.project, &pre.records, net)?.quantized();
            bundle.overloads = pre
                .records
                .iter()
                .map(|r| OverloadRow { hour: r.hour, from: r.from, to: r.to, overload_a: quantize(r.overload_a) })
                .collect();
            bundle.anchors = pre
                .anchors
                .iter()
                .flat_map(|(&hour, a)| a.iter().map(move |a| AnchorRow { hour, from: a.from, to: a.to, l0_pu: a.l0_pu }))
                .collect();
            bundle.mcc = mcc
                .entries
                .iter()
                .map(|e| MccRow {
                    from: e.from,
                    to: e.to,
                    w_usd_per_a_h: e.w_usd_per_a_h,
                    t_hours: e.t_hours,
                    allocated_cost_usd: e.allocated_cost_usd,
                    capacity_divisor_a: e.capacity_divisor_a,
                })
                .collect();
            bundle.lmv.clear();
            bundle.procurement.clear();
            replace_events(bundle, step, pre.events);
        }
        Step::Price => {
            let priced = price_hours(
                net,
                &inputs.scenarios,
                &anchors_by_hour(&bundle.anchors),
                &mcc_from_rows(&bundle.mcc),
                opts,
            )?;
            let lmv = priced.lmv.quantized();
            bundle.lmv = lmv
                .hours
                .iter()
                .flat_map(|(&hour, h)| {
                    (0..h.p.len()).map(move |node| LmvRow {
                        hour,
                        node,
                        p_lmv: h.p[node],
                        q_lmv: h.q[node],
                        p_lmv_grid: quantize(h.p[node] - h.c_p),
                        q_lmv_grid: quantize(h.q[node] - h.c_q),
                    })
                })
                .collect();
            bundle.procurement.clear();
            replace_events(bundle, step, priced.events);
        }
        Step::Procure => {
            let lmv = lmv_from_rows(bundle, &inputs.scenarios, net.node_count());
            let records = records_from_rows(&bundle.overloads, net);
            let violation = monetized_overload(&records, &mcc_from_rows(&bundle.mcc));
            let procured = procure_hours(net, &inputs.scenarios, &lmv, inputs.bounds.as_ref(), &violation, opts)?;
            bundle.procurement = procured
                .plan
                .hours
                .iter()
                .flat_map(|(&hour, der)| {
                    der.iter().map(move |d| ProcurementRow {
                        hour,
                        node: d.node,
                        p_der_kw: d.p_kw,
                        q_der_kvar: d.q_kvar,
                    })
                })
                .collect();
            replace_events(bundle, step, procured.events);
        }
    }
    let done = &mut bundle.summary.steps_completed;
    done.retain(|s| Step::ALL.iter().any(|k| k.name() == s && *k < step));
    done.push(step.name().to_string());
    if let Some(dir) = &settings.export_programs {
        export_programs(step, inputs, bundle, dir)?;
    }
    bundle.summary = summarize(inputs, bundle);
    Ok(())
}

/// All steps in order (procurement optional), timing each.
pub fn run_year(inputs: &RunInputs, settings: &RunSettings) -> Result<RunReport, PipelineError> {
    let mut bundle = ResultBundle::default();
    let mut timings = Vec::new();
    for step in Step::ALL {
        if step == Step::Procure && settings.skip_procurement {
            break;
        }
        let t = Instant::now();
        run_step(step, inputs, settings, &mut bundle)?;
        timings.push(StepTiming { step: step.name(), seconds: t.elapsed().as_secs_f64() });
    }
    Ok(RunReport { bundle, timings })
}

/// Totals and counts, derived only from the bundle's tables and the inputs.
pub fn summarize(inputs: &RunInputs, bundle: &ResultBundle) -> Summary {
    let done = |s: Step| bundle.summary.steps_completed.iter().any(|x| x == s.name());
    let prices: BTreeMap<usize, (f64, f64)> = inputs.scenarios.iter().map(|s| (s.hour, (s.lmp, s.q_price))).collect();
    let lmv: BTreeMap<(usize, usize), &LmvRow> = bundle.lmv.iter().map(|r| ((r.hour, r.node), r)).collect();

    let mut cost = CostTotals::default();
    let (mut p_mwh, mut q_mvarh) = (0.0, 0.0);
    for r in &bundle.procurement {
        let (p, q) = (r.p_der_kw / 1000.0, r.q_der_kvar / 1000.0);
        p_mwh += p;
        q_mvarh += q;
        if let (Some(l), Some(&(cp, cq))) = (lmv.get(&(r.hour, r.node)), prices.get(&r.hour)) {
            cost.real_usd += l.p_lmv * p;
            cost.reactive_usd += l.q_lmv * q;
            cost.energy_usd += cp * p + cq * q;
            cost.grid_usd += l.p_lmv_grid * p + l.q_lmv_grid * q;
        }
    }
    cost.full_usd = cost.real_usd + cost.reactive_usd;
    let cost = CostTotals {
        real_usd: quantize(cost.real_usd),
        reactive_usd: quantize(cost.reactive_usd),
        full_usd: quantize(cost.full_usd),
        energy_usd: quantize(cost.energy_usd),
        grid_usd: quantize(cost.grid_usd),
    };

    let overloaded: BTreeSet<usize> = bundle.overloads.iter().map(|r| r.hour).collect();
    let pricing_failures = flagged_in(bundle, Step::Price, &[FlagKind::SolverFailure]).len();
    let priced = if done(Step::Price) { priced_hours(bundle).len() } else { 0 };
    let procured = if done(Step::Procure) {
        let failed = flagged_in(bundle, Step::Procure, &[FlagKind::BoundsInfeasible, FlagKind::SolverFailure]);
        let retried: BTreeSet<usize> = bundle
            .events
            .iter()
            .filter(|e| e.step == Step::Procure.name() && e.kind == EventKind::Note(NoteKind::UnboundedRetry).as_str())
            .map(|e| e.hour)
            .collect();
        priced_hours(bundle).iter().filter(|h| !failed.contains(h) || retried.contains(h)).count()
    } else {
        0
    };
    let flags: Vec<FlagEntry> = bundle
        .events
        .iter()
        .filter(|e| e.is_flag())
        .map(|e| FlagEntry { hour: e.hour, step: e.step.clone(), kind: e.kind.clone(), detail: e.detail.clone() })
        .collect();
    let flagged_hours: BTreeSet<usize> = flags.iter().map(|f| f.hour).collect();
    let mut notes = Vec::new();
    if done(Step::Preprocess) && bundle.mcc.is_empty() {
        notes.push("no wires investment trigger".to_string());
    }
    Summary {
        feeder: inputs.network.name().to_string(),
        hours: inputs.scenarios.len(),
        steps_completed: bundle.summary.steps_completed.clone(),
        overloaded_hours: overloaded.len(),
        overload_records: bundle.overloads.len(),
        overloaded_lines: bundle.mcc.len(),
        priced_hours: priced,
        pricing_failures,
        procured_hours: procured,
        procurement_rows: bundle.procurement.len(),
        p_der_mwh: quantize(p_mwh),
        q_der_mvarh: quantize(q_mvarh),
        reported_cost_usd: cost.grid_usd,
        cost,
        flagged_hours: flagged_hours.into_iter().collect(),
        flags,
        notes,
    }
}

/// Writes `<step>_<hour>.txt` listings of the programs a step solved.
pub fn export_programs(step: Step, inputs: &RunInputs, bundle: &ResultBundle, dir: &Path) -> Result<(), FormatError> {
    let io = |source| FormatError::Io { path: dir.to_path_buf(), source };
    std::fs::create_dir_all(dir).map_err(io)?;
    let anchors = anchors_by_hour(&bundle.anchors);
    let mcc = mcc_from_rows(&bundle.mcc);
    let lmv = lmv_from_rows(bundle, &inputs.scenarios, inputs.network.node_count());
    for s in &inputs.scenarios {
        let Ok(data) = to_per_unit(&inputs.network, s) else { continue };
        let bf = match step {
            Step::Preprocess => build_opt1(&data),
            Step::Price => match anchors.get(&s.hour) {
                Some(a) => build_opt2(&data, a, &mcc),
                None => continue,
            },
            Step::Procure => match lmv.hours.get(&s.hour).filter(|h| h.priced) {
                Some(h) => build_opt3(&data, &h.p, &h.q, inputs.bounds.as_ref()),
                None => continue,
            },
        };
        if let Ok(bf) = bf {
            let path = dir.join(format!("{}_{:05}.txt", step.name(), s.hour));
            std::fs::write(&path, bf.program.to_listing()).map_err(|source| FormatError::Io { path, source })?;
        }
    }
    Ok(())
}
