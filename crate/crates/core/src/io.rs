//! On-disk formats.
//!
//! Inputs: a TOML feeder, CSV loads and prices, an optional TOML investment
//! and an optional CSV of DER bounds. Results: one CSV per table, a JSON
//! summary, and a manifest with SHA-256 digests of every file's bytes.
//! Numeric result columns carry 6 fractional digits except the anchors, which
//! are written in shortest round-trip form so later steps can reuse them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distflow::{DerBounds, DerLimit};
use crate::error::FormatError;
use crate::network::{validate_feeder, FeederModel, HourlyScenario, LineSpec, NodeId, NodeSpec};
use crate::valuation::{quantize, Allocation, InvestmentProject, LineUpgrade, PvHour};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn parse_err(location: impl Into<String>, message: impl ToString) -> FormatError {
    FormatError::Parse { location: location.into(), message: message.to_string() }
}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> FormatError {
    FormatError::Validation { location: location.into(), message: message.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    name: String,
    s_base_mva: f64,
    v_base_kv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    i_base_a: Option<f64>,
    v_min_pu: f64,
    v_max_pu: f64,
    nodes: Vec<NodeEntry>,
    lines: Vec<LineSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    id: NodeId,
    #[serde(default)]
    shunt_kvar: f64,
    #[serde(default = "yes")]
    is_load: bool,
}

fn yes() -> bool {
    true
}

impl From<FeederFile> for FeederModel {
    fn from(f: FeederFile) -> Self {
        FeederModel {
            name: f.name,
            nodes: f
                .nodes
                .into_iter()
                .map(|n| NodeSpec { id: n.id, fixed_shunt_q_kvar: n.shunt_kvar, is_load: n.is_load })
                .collect(),
            lines: f.lines,
            s_base_mva: f.s_base_mva,
            v_base_kv: f.v_base_kv,
            i_base_a: f.i_base_a,
            v_min_pu: f.v_min_pu,
            v_max_pu: f.v_max_pu,
        }
    }
}

impl From<&FeederModel> for FeederFile {
    fn from(m: &FeederModel) -> Self {
        FeederFile {
            name: m.name.clone(),
            s_base_mva: m.s_base_mva,
            v_base_kv: m.v_base_kv,
            i_base_a: m.i_base_a,
            v_min_pu: m.v_min_pu,
            v_max_pu: m.v_max_pu,
            nodes: m
                .nodes
                .iter()
                .map(|n| NodeEntry { id: n.id, shunt_kvar: n.fixed_shunt_q_kvar, is_load: n.is_load })
                .collect(),
            lines: m.lines.clone(),
        }
    }
}

pub fn parse_feeder(text: &str, location: &str) -> Result<FeederModel, FormatError> {
    let file: FeederFile = toml::from_str(text).map_err(|e| parse_err(location, e.message()))?;
    Ok(file.into())
}

/// Reads a feeder and checks its structure.
pub fn read_feeder(path: &Path) -> Result<FeederModel, FormatError> {
    let model = parse_feeder(&read_text(path)?, &file_name(path))?;
    let report = validate_feeder(&model);
    if !report.is_clean() {
        return Err(FormatError::Feeder { path: path.to_path_buf(), report });
    }
    Ok(model)
}

pub fn feeder_to_toml(model: &FeederModel) -> String {
    toml::to_string(&FeederFile::from(model)).expect("feeder serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AllocationName {
    Direct,
    LengthWeighted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InvestmentFile {
    total_cost_usd: f64,
    alpha: f64,
    allocation: AllocationName,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    upgrades: Vec<LineUpgrade>,
}

pub fn read_investment(path: &Path) -> Result<InvestmentProject, FormatError> {
    let loc = file_name(path);
    let f: InvestmentFile = toml::from_str(&read_text(path)?).map_err(|e| parse_err(&loc, e.message()))?;
    let allocation = match f.allocation {
        AllocationName::Direct => Allocation::Direct(f.upgrades),
        AllocationName::LengthWeighted => {
            if !f.upgrades.is_empty() {
                return Err(invalid(loc, "length_weighted allocation takes no per-line upgrades"));
            }
            Allocation::LengthWeighted
        }
    };
    let project = InvestmentProject { total_cost_usd: f.total_cost_usd, alpha: f.alpha, allocation };
    project.validate().map_err(|e| invalid(&loc, e.to_string()))?;
    Ok(project)
}

pub fn investment_to_toml(p: &InvestmentProject) -> String {
    let (allocation, upgrades) = match &p.allocation {
        Allocation::Direct(u) => (AllocationName::Direct, u.clone()),
        Allocation::LengthWeighted => (AllocationName::LengthWeighted, vec![]),
    };
    toml::to_string(&InvestmentFile { total_cost_usd: p.total_cost_usd, alpha: p.alpha, allocation, upgrades })
        .expect("investment serializes")
}

/// Consumption of one node in one hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadRow {
    pub hour: usize,
    pub node: NodeId,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceRow {
    pub hour: usize,
    pub lmp_usd_per_mwh: f64,
    /// Explicit reactive price; derived from the LMP when absent.
    pub q_usd_per_mvarh: Option<f64>,
}

/// Everything a run needs, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    pub feeder: FeederModel,
    pub loads: Vec<LoadRow>,
    pub prices: Vec<PriceRow>,
    pub investment: Option<InvestmentProject>,
    pub bounds: Option<DerBounds>,
}

impl InputSet {
    pub fn hours(&self) -> Vec<usize> {
        self.prices.iter().map(|p| p.hour).collect()
    }

    /// Hourly scenarios in hour order. Nodes without a load row consume nothing.
    pub fn scenarios(&self, q_fraction: f64) -> Vec<HourlyScenario> {
        let n = self.feeder.nodes.len();
        let mut by_hour: BTreeMap<usize, (Vec<f64>, Vec<f64>)> =
            self.prices.iter().map(|p| (p.hour, (vec![0.0; n], vec![0.0; n]))).collect();
        for l in &self.loads {
            if let Some((p, q)) = by_hour.get_mut(&l.hour) {
                p[l.node] = l.p_kw;
                q[l.node] = l.q_kvar;
            }
        }
        self.prices
            .iter()
            .map(|pr| {
                let (p, q) = &by_hour[&pr.hour];
                let mut s = HourlyScenario::from_loads(pr.hour, p, q, pr.lmp_usd_per_mwh, q_fraction);
                if let Some(qp) = pr.q_usd_per_mvarh {
                    s.q_price = qp;
                }
                s
            })
            .collect()
    }

    /// Writes the set as `feeder.toml`, `loads.csv`, `prices.csv` and, when
    /// present, `investment.toml` and `bounds.csv`.
    pub fn write(&self, dir: &Path) -> Result<InputPaths, FormatError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let paths = InputPaths {
            feeder: dir.join("feeder.toml"),
            loads: dir.join("loads.csv"),
            prices: dir.join("prices.csv"),
            investment: self.investment.as_ref().map(|_| dir.join("investment.toml")),
            bounds: self.bounds.as_ref().map(|_| dir.join("bounds.csv")),
        };
        write_file(&paths.feeder, feeder_to_toml(&self.feeder).as_bytes())?;
        let mut loads = String::from("hour,node,p_kw,q_kvar\n");
        for l in &self.loads {
            loads.push_str(&format!("{},{},{},{}\n", l.hour, l.node, l.p_kw, l.q_kvar));
        }
        write_file(&paths.loads, loads.as_bytes())?;
        let explicit_q = self.prices.iter().any(|p| p.q_usd_per_mvarh.is_some());
        let mut prices =
            String::from(if explicit_q { "hour,lmp_usd_per_mwh,q_usd_per_mvarh\n" } else { "hour,lmp_usd_per_mwh\n" });
        for p in &self.prices {
            prices.push_str(&format!("{},{}", p.hour, p.lmp_usd_per_mwh));
            if explicit_q {
                prices.push_str(&format!(",{}", p.q_usd_per_mvarh.map(|q| q.to_string()).unwrap_or_default()));
            }
            prices.push('\n');
        }
        write_file(&paths.prices, prices.as_bytes())?;
        if let (Some(p), Some(path)) = (&self.investment, &paths.investment) {
            write_file(path, investment_to_toml(p).as_bytes())?;
        }
        if let (Some(b), Some(path)) = (&self.bounds, &paths.bounds) {
            let mut s = String::from("node,p_max_kw,q_max_kvar\n");
            for (node, lim) in &b.limits {
                s.push_str(&format!("{node},{},{}\n", lim.p_max_kw, lim.q_max_kvar));
            }
            write_file(path, s.as_bytes())?;
        }
        Ok(paths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputPaths {
    pub feeder: PathBuf,
    pub loads: PathBuf,
    pub prices: PathBuf,
    pub investment: Option<PathBuf>,
    pub bounds: Option<PathBuf>,
}

/// Cross-validated inputs plus non-fatal findings.
#[derive(Debug, Clone)]
pub struct LoadedInputs {
    pub inputs: InputSet,
    pub warnings: Vec<String>,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, FormatError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn headers(rdr: &mut csv::Reader<fs::File>, name: &str) -> Result<Vec<String>, FormatError> {
    Ok(rdr
        .headers()
        .map_err(|e| parse_err(format!("{name}:1"), e))?
        .iter()
        .map(str::to_string)
        .collect())
}

fn expect_headers(found: &[String], allowed: &[&[&str]], name: &str) -> Result<(), FormatError> {
    if allowed.iter().any(|cols| cols.iter().copied().eq(found.iter().map(String::as_str))) {
        return Ok(());
    }
    Err(parse_err(format!("{name}:1"), format!("expected columns {}, found {}", allowed[0].join(","), found.join(","))))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, col: &str, loc: &str) -> Result<T, FormatError>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(i).unwrap_or("");
    raw.parse::<T>().map_err(|e| parse_err(loc, format!("column {col}: `{raw}`: {e}")))
}

fn finite(x: f64, col: &str, loc: &str) -> Result<f64, FormatError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(invalid(loc, format!("column {col} is not finite")))
    }
}

fn record_location(name: &str, rec: &csv::StringRecord) -> String {
    format!("{name}:{}", rec.position().map(|p| p.line()).unwrap_or(0))
}

fn read_loads(path: &Path, feeder: &FeederModel, warnings: &mut Vec<String>) -> Result<Vec<LoadRow>, FormatError> {
    let name = file_name(path);
    let mut rdr = csv_reader(path)?;
    let cols = headers(&mut rdr, &name)?;
    expect_headers(&cols, &[&["hour", "node", "p_kw", "q_kvar"], &["hour", "node", "p_kw"]], &name)?;
    let n = feeder.nodes.len();
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    let (mut missing_q, mut odd_pf, mut first_odd) = (0usize, 0usize, None);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&name, e))?;
        let loc = record_location(&name, &rec);
        let hour: usize = field(&rec, 0, "hour", &loc)?;
        let node: NodeId = field(&rec, 1, "node", &loc)?;
        let p_kw = finite(field(&rec, 2, "p_kw", &loc)?, "p_kw", &loc)?;
        let q_kvar = match rec.get(3).filter(|s| !s.is_empty()) {
            Some(_) => finite(field(&rec, 3, "q_kvar", &loc)?, "q_kvar", &loc)?,
            None => {
                missing_q += 1;
                0.0
            }
        };
        if hour == 0 {
            return Err(invalid(loc, "hours are numbered from 1"));
        }
        if node >= n {
            return Err(invalid("", format!("unknown node {node} at {loc}")));
        }
        if node == 0 {
            return Err(invalid(loc, "the root node cannot carry a load"));
        }
        if !seen.insert((hour, node)) {
            return Err(invalid(loc, format!("duplicate entry for hour {hour}, node {node}")));
        }
        if p_kw != 0.0 || q_kvar != 0.0 {
            let pf = p_kw.abs() / p_kw.hypot(q_kvar);
            if !(0.7..=1.0).contains(&pf) {
                odd_pf += 1;
                first_odd.get_or_insert(loc.clone());
            }
        }
        rows.push(LoadRow { hour, node, p_kw, q_kvar });
    }
    if missing_q > 0 {
        warnings.push(format!("{name}: {missing_q} rows without q_kvar, taken as 0"));
    }
    if odd_pf > 0 {
        warnings.push(format!(
            "{name}: {odd_pf} rows with power factor outside [0.7, 1.0] (first at {})",
            first_odd.unwrap_or_default()
        ));
    }
    let non_load: BTreeSet<NodeId> = rows
        .iter()
        .filter(|r| !feeder.nodes[r.node].is_load && (r.p_kw != 0.0 || r.q_kvar != 0.0))
        .map(|r| r.node)
        .collect();
    if !non_load.is_empty() {
        warnings.push(format!("{name}: nonzero loads on nodes not marked as loads: {non_load:?}"));
    }
    rows.sort_by_key(|r| (r.hour, r.node));
    Ok(rows)
}

fn read_prices(path: &Path) -> Result<Vec<PriceRow>, FormatError> {
    let name = file_name(path);
    let mut rdr = csv_reader(path)?;
    let cols = headers(&mut rdr, &name)?;
    expect_headers(&cols, &[&["hour", "lmp_usd_per_mwh", "q_usd_per_mvarh"], &["hour", "lmp_usd_per_mwh"]], &name)?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&name, e))?;
        let loc = record_location(&name, &rec);
        let hour: usize = field(&rec, 0, "hour", &loc)?;
        let lmp = finite(field(&rec, 1, "lmp_usd_per_mwh", &loc)?, "lmp_usd_per_mwh", &loc)?;
        let q = match rec.get(2).filter(|s| !s.is_empty()) {
            Some(_) => Some(finite(field(&rec, 2, "q_usd_per_mvarh", &loc)?, "q_usd_per_mvarh", &loc)?),
            None => None,
        };
        if hour == 0 {
            return Err(invalid(loc, "hours are numbered from 1"));
        }
        if lmp < 0.0 || q.is_some_and(|q| q < 0.0) {
            return Err(invalid(loc, "prices must be nonnegative"));
        }
        if !seen.insert(hour) {
            return Err(invalid(loc, format!("duplicate entry for hour {hour}")));
        }
        rows.push(PriceRow { hour, lmp_usd_per_mwh: lmp, q_usd_per_mvarh: q });
    }
    rows.sort_by_key(|r| r.hour);
    Ok(rows)
}

fn read_bounds(path: &Path, feeder: &FeederModel) -> Result<DerBounds, FormatError> {
    let name = file_name(path);
    let mut rdr = csv_reader(path)?;
    let cols = headers(&mut rdr, &name)?;
    expect_headers(&cols, &[&["node", "p_max_kw", "q_max_kvar"]], &name)?;
    let mut limits = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&name, e))?;
        let loc = record_location(&name, &rec);
        let node: NodeId = field(&rec, 0, "node", &loc)?;
        let p_max_kw = finite(field(&rec, 1, "p_max_kw", &loc)?, "p_max_kw", &loc)?;
        let q_max_kvar = finite(field(&rec, 2, "q_max_kvar", &loc)?, "q_max_kvar", &loc)?;
        if node >= feeder.nodes.len() {
            return Err(invalid("", format!("unknown node {node} at {loc}")));
        }
        if node == 0 {
            return Err(invalid(loc, "the root node cannot host a DER"));
        }
        if p_max_kw < 0.0 || q_max_kvar < 0.0 {
            return Err(invalid(loc, "bounds must be nonnegative"));
        }
        if limits.insert(node, DerLimit { p_max_kw, q_max_kvar }).is_some() {
            return Err(invalid(loc, format!("duplicate entry for node {node}")));
        }
    }
    Ok(DerBounds { limits })
}

fn coverage(load_hours: &BTreeSet<usize>, price_hours: &[usize], loads: &str, prices: &str) -> Result<(), FormatError> {
    let price_set: BTreeSet<usize> = price_hours.iter().copied().collect();
    if price_set.is_empty() {
        return Err(invalid(prices, "no hours"));
    }
    if let Some(h) = load_hours.difference(&price_set).next() {
        return Err(invalid("", format!("hour coverage mismatch: {prices} lacks hour {h} present in {loads}")));
    }
    if let Some(h) = price_set.difference(load_hours).next() {
        return Err(invalid("", format!("hour coverage mismatch: {loads} lacks hour {h} present in {prices}")));
    }
    let last = *price_set.iter().next_back().unwrap();
    if last != price_set.len() {
        let missing = (1..=last).find(|h| !price_set.contains(h)).unwrap_or(last);
        return Err(invalid("", format!("hour coverage mismatch: hours are not contiguous from 1 (missing hour {missing})")));
    }
    Ok(())
}

/// Reads and cross-checks a full input set.
pub fn load_inputs(paths: &InputPaths) -> Result<LoadedInputs, FormatError> {
    let mut warnings = Vec::new();
    let feeder = read_feeder(&paths.feeder)?;
    let loads = read_loads(&paths.loads, &feeder, &mut warnings)?;
    let prices = read_prices(&paths.prices)?;
    let load_hours: BTreeSet<usize> = loads.iter().map(|l| l.hour).collect();
    coverage(
        &load_hours,
        &prices.iter().map(|p| p.hour).collect::<Vec<_>>(),
        &file_name(&paths.loads),
        &file_name(&paths.prices),
    )?;
    let investment = match &paths.investment {
        Some(p) => {
            let project = read_investment(p)?;
            if let Allocation::Direct(ups) = &project.allocation {
                for u in ups {
                    if !feeder.lines.iter().any(|l| l.from == u.from && l.to == u.to) {
                        return Err(invalid(
                            file_name(p),
                            format!("upgrade ({},{}) is not a line of the feeder", u.from, u.to),
                        ));
                    }
                }
            }
            Some(project)
        }
        None => None,
    };
    let bounds = paths.bounds.as_deref().map(|p| read_bounds(p, &feeder)).transpose()?;
    Ok(LoadedInputs { inputs: InputSet { feeder, loads, prices, investment, bounds }, warnings })
}

/// `(hour, ρ)` pairs for a PV projection; columns `hour,rho`.
pub fn read_irradiance(path: &Path) -> Result<Vec<(usize, f64)>, FormatError> {
    let name = file_name(path);
    let mut rdr = csv_reader(path)?;
    let cols = headers(&mut rdr, &name)?;
    expect_headers(&cols, &[&["hour", "rho"]], &name)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&name, e))?;
        let loc = record_location(&name, &rec);
        let hour: usize = field(&rec, 0, "hour", &loc)?;
        let rho: f64 = field(&rec, 1, "rho", &loc)?;
        if !(0.0..=1.0).contains(&rho) {
            return Err(invalid(loc, format!("rho {rho} outside [0, 1]")));
        }
        out.push((hour, rho));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Result tables

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverloadRow {
    pub hour: usize,
    pub from: NodeId,
    pub to: NodeId,
    pub overload_a: f64,
}

/// Squared current (pu²) of a flagged line at the measurement optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorRow {
    pub hour: usize,
    pub from: NodeId,
    pub to: NodeId,
    pub l0_pu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MccRow {
    pub from: NodeId,
    pub to: NodeId,
    pub w_usd_per_a_h: f64,
    pub t_hours: usize,
    pub allocated_cost_usd: f64,
    pub capacity_divisor_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmvRow {
    pub hour: usize,
    pub node: NodeId,
    pub p_lmv: f64,
    pub q_lmv: f64,
    pub p_lmv_grid: f64,
    pub q_lmv_grid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcurementRow {
    pub hour: usize,
    pub node: NodeId,
    pub p_der_kw: f64,
    pub q_der_kvar: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventRow {
    pub hour: usize,
    pub step: String,
    /// `flag` or `note`
    pub severity: String,
    pub kind: String,
    pub detail: String,
}

impl EventRow {
    pub fn is_flag(&self) -> bool {
        self.severity == "flag"
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub real_usd: f64,
    pub reactive_usd: f64,
    pub full_usd: f64,
    pub energy_usd: f64,
    pub grid_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagEntry {
    pub hour: usize,
    pub step: String,
    pub kind: String,
    pub detail: String,
}

/// Run totals. Everything here is recomputable from the tables and inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub feeder: String,
    pub hours: usize,
    pub steps_completed: Vec<String>,
    pub overloaded_hours: usize,
    pub overload_records: usize,
    pub overloaded_lines: usize,
    pub priced_hours: usize,
    pub pricing_failures: usize,
    pub procured_hours: usize,
    pub procurement_rows: usize,
    pub p_der_mwh: f64,
    pub q_der_mvarh: f64,
    /// DER cost at the full LMVs and its split into root-price and grid parts.
    pub cost: CostTotals,
    /// Headline DER procurement cost: the grid component.
    pub reported_cost_usd: f64,
    pub flagged_hours: Vec<usize>,
    pub flags: Vec<FlagEntry>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultBundle {
    pub overloads: Vec<OverloadRow>,
    pub anchors: Vec<AnchorRow>,
    pub mcc: Vec<MccRow>,
    pub lmv: Vec<LmvRow>,
    pub procurement: Vec<ProcurementRow>,
    pub events: Vec<EventRow>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Data rows for tables, absent for documents.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub hash: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn digest(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.name == name).map(|f| f.sha256.as_str())
    }
}

pub const OVERLOADS_CSV: &str = "overloads.csv";
pub const ANCHORS_CSV: &str = "anchors.csv";
pub const MCC_CSV: &str = "mcc.csv";
pub const LMV_CSV: &str = "lmv.csv";
pub const PROCUREMENT_CSV: &str = "procurement.csv";
pub const EVENTS_CSV: &str = "events.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MANIFEST_JSON: &str = "manifest.json";

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Table bytes, in file order.
pub fn render_tables(b: &ResultBundle) -> Vec<(&'static str, Option<usize>, Vec<u8>)> {
    let mut out = Vec::new();
    let mut s = String::from("hour,from,to,overload_a\n");
    for r in &b.overloads {
        s += &format!("{},{},{},{:.6}\n", r.hour, r.from, r.to, r.overload_a);
    }
    out.push((OVERLOADS_CSV, Some(b.overloads.len()), s.into_bytes()));

    let mut s = String::from("hour,from,to,l0_pu\n");
    for r in &b.anchors {
        s += &format!("{},{},{},{:?}\n", r.hour, r.from, r.to, r.l0_pu);
    }
    out.push((ANCHORS_CSV, Some(b.anchors.len()), s.into_bytes()));

    let mut s = String::from("from,to,w_usd_per_a_h,t_hours,allocated_cost_usd,capacity_divisor_a\n");
    for r in &b.mcc {
        s += &format!(
            "{},{},{:.6},{},{:.6},{:.6}\n",
            r.from, r.to, r.w_usd_per_a_h, r.t_hours, r.allocated_cost_usd, r.capacity_divisor_a
        );
    }
    out.push((MCC_CSV, Some(b.mcc.len()), s.into_bytes()));

    let mut s = String::with_capacity(64 * b.lmv.len() + 64);
    s += "hour,node,p_lmv,q_lmv,p_lmv_grid,q_lmv_grid\n";
    for r in &b.lmv {
        s += &format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.hour, r.node, r.p_lmv, r.q_lmv, r.p_lmv_grid, r.q_lmv_grid
        );
    }
    out.push((LMV_CSV, Some(b.lmv.len()), s.into_bytes()));

    let mut s = String::from("hour,node,p_der_kw,q_der_kvar\n");
    for r in &b.procurement {
        s += &format!("{},{},{:.6},{:.6}\n", r.hour, r.node, r.p_der_kw, r.q_der_kvar);
    }
    out.push((PROCUREMENT_CSV, Some(b.procurement.len()), s.into_bytes()));

    let mut s = String::from("hour,step,severity,kind,detail\n");
    for r in &b.events {
        s += &format!("{},{},{},{},{}\n", r.hour, r.step, r.severity, r.kind, csv_field(&r.detail));
    }
    out.push((EVENTS_CSV, Some(b.events.len()), s.into_bytes()));

    let mut json = serde_json::to_string_pretty(&b.summary).expect("summary serializes");
    json.push('\n');
    out.push((SUMMARY_JSON, None, json.into_bytes()));
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every table, the summary and the manifest; returns the manifest.
pub fn write_results(bundle: &ResultBundle, dir: &Path) -> Result<Manifest, FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    for (name, rows, bytes) in render_tables(bundle) {
        write_file(&dir.join(name), &bytes)?;
        files.push(ManifestEntry { name: name.to_string(), rows, sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest { hash: "sha256".into(), files };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&dir.join(MANIFEST_JSON), json.as_bytes())?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// PV projection and run report

pub const PV_CSV: &str = "pv_dispatch.csv";
pub const PV_SUMMARY_JSON: &str = "pv_summary.json";
pub const RUN_REPORT_JSON: &str = "run_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvSummary {
    pub node: NodeId,
    pub k_kw: f64,
    pub hours: usize,
    pub p_mwh: f64,
    pub q_mvarh: f64,
    pub annual_value_usd: f64,
}

/// Writes the hourly PV table and its totals.
pub fn write_pv(dir: &Path, rows: &[PvHour], node: NodeId, k_kw: f64) -> Result<PvSummary, FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut s = String::from("hour,rho,p_kw,q_kvar,value_usd\n");
    for r in rows {
        s += &format!("{},{:.6},{:.6},{:.6},{:.6}\n", r.hour, r.rho, r.p_kw, r.q_kvar, r.value_usd);
    }
    write_file(&dir.join(PV_CSV), s.as_bytes())?;
    let summary = PvSummary {
        node,
        k_kw,
        hours: rows.len(),
        p_mwh: quantize(rows.iter().map(|r| r.p_kw).sum::<f64>() / 1000.0),
        q_mvarh: quantize(rows.iter().map(|r| r.q_kvar).sum::<f64>() / 1000.0),
        annual_value_usd: quantize(rows.iter().map(|r| r.value_usd).sum()),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_file(&dir.join(PV_SUMMARY_JSON), json.as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSeconds {
    pub step: String,
    pub seconds: f64,
}

/// Wall-clock facts of one invocation. Kept out of the manifest since they
/// change from run to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReportFile {
    pub threads: usize,
    pub steps: Vec<StepSeconds>,
    pub flagged_hours: usize,
    pub exit_code: u8,
}

pub fn write_run_report(dir: &Path, report: &RunReportFile) -> Result<(), FormatError> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    write_file(&dir.join(RUN_REPORT_JSON), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, FormatError> {
    let path = dir.join(MANIFEST_JSON);
    serde_json::from_str(&read_text(&path)?).map_err(|e| parse_err(MANIFEST_JSON, e))
}

fn read_table<T>(
    dir: &Path,
    name: &str,
    cols: &[&str],
    mut row: impl FnMut(&csv::StringRecord, &str) -> Result<T, FormatError>,
) -> Result<Vec<T>, FormatError> {
    let path = dir.join(name);
    let mut rdr = csv::ReaderBuilder::new().from_reader(fs::File::open(&path).map_err(io_err(&path))?);
    let found = headers(&mut rdr, name)?;
    expect_headers(&found, &[cols], name)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(name, e))?;
        let loc = record_location(name, &rec);
        out.push(row(&rec, &loc)?);
    }
    Ok(out)
}

/// Reads a bundle back. Missing files read as empty tables, so partial
/// bundles from step-wise runs load too.
pub fn read_results(dir: &Path) -> Result<ResultBundle, FormatError> {
    let present = |name: &str| dir.join(name).exists();
    let mut b = ResultBundle::default();
    if present(OVERLOADS_CSV) {
        b.overloads = read_table(dir, OVERLOADS_CSV, &["hour", "from", "to", "overload_a"], |r, l| {
            Ok(OverloadRow {
                hour: field(r, 0, "hour", l)?,
                from: field(r, 1, "from", l)?,
                to: field(r, 2, "to", l)?,
                overload_a: field(r, 3, "overload_a", l)?,
            })
        })?;
    }
    if present(ANCHORS_CSV) {
        b.anchors = read_table(dir, ANCHORS_CSV, &["hour", "from", "to", "l0_pu"], |r, l| {
            Ok(AnchorRow {
                hour: field(r, 0, "hour", l)?,
                from: field(r, 1, "from", l)?,
                to: field(r, 2, "to", l)?,
                l0_pu: field(r, 3, "l0_pu", l)?,
            })
        })?;
    }
    if present(MCC_CSV) {
        b.mcc = read_table(
            dir,
            MCC_CSV,
            &["from", "to", "w_usd_per_a_h", "t_hours", "allocated_cost_usd", "capacity_divisor_a"],
            |r, l| {
                Ok(MccRow {
                    from: field(r, 0, "from", l)?,
                    to: field(r, 1, "to", l)?,
                    w_usd_per_a_h: field(r, 2, "w_usd_per_a_h", l)?,
                    t_hours: field(r, 3, "t_hours", l)?,
                    allocated_cost_usd: field(r, 4, "allocated_cost_usd", l)?,
                    capacity_divisor_a: field(r, 5, "capacity_divisor_a", l)?,
                })
            },
        )?;
    }
    if present(LMV_CSV) {
        b.lmv = read_table(dir, LMV_CSV, &["hour", "node", "p_lmv", "q_lmv", "p_lmv_grid", "q_lmv_grid"], |r, l| {
            Ok(LmvRow {
                hour: field(r, 0, "hour", l)?,
                node: field(r, 1, "node", l)?,
                p_lmv: field(r, 2, "p_lmv", l)?,
                q_lmv: field(r, 3, "q_lmv", l)?,
                p_lmv_grid: field(r, 4, "p_lmv_grid", l)?,
                q_lmv_grid: field(r, 5, "q_lmv_grid", l)?,
            })
        })?;
    }
    if present(PROCUREMENT_CSV) {
        b.procurement = read_table(dir, PROCUREMENT_CSV, &["hour", "node", "p_der_kw", "q_der_kvar"], |r, l| {
            Ok(ProcurementRow {
                hour: field(r, 0, "hour", l)?,
                node: field(r, 1, "node", l)?,
                p_der_kw: field(r, 2, "p_der_kw", l)?,
                q_der_kvar: field(r, 3, "q_der_kvar", l)?,
            })
        })?;
    }
    if present(EVENTS_CSV) {
        b.events = read_table(dir, EVENTS_CSV, &["hour", "step", "severity", "kind", "detail"], |r, l| {
            Ok(EventRow {
                hour: field(r, 0, "hour", l)?,
                step: r.get(1).unwrap_or("").to_string(),
                severity: r.get(2).unwrap_or("").to_string(),
                kind: r.get(3).unwrap_or("").to_string(),
                detail: r.get(4).unwrap_or("").to_string(),
            })
        })?;
    }
    if present(SUMMARY_JSON) {
        let path = dir.join(SUMMARY_JSON);
        b.summary = serde_json::from_str(&read_text(&path)?).map_err(|e| parse_err(SUMMARY_JSON, e))?;
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_feeder() -> FeederModel {
        FeederModel {
            name: "tiny".into(),
            nodes: (0..3).map(|id| NodeSpec { id, fixed_shunt_q_kvar: 0.0, is_load: id > 0 }).collect(),
            lines: vec![
                LineSpec { from: 0, to: 1, r_ohm: 0.3, x_ohm: 0.6, ampacity_a: 200.0, length_m: 300.0 },
                LineSpec { from: 1, to: 2, r_ohm: 0.2, x_ohm: 0.4, ampacity_a: 100.0, length_m: 200.0 },
            ],
            s_base_mva: 1.0,
            v_base_kv: 12.0,
            i_base_a: None,
            v_min_pu: 0.95,
            v_max_pu: 1.05,
        }
    }

    fn tiny_set() -> InputSet {
        InputSet {
            feeder: tiny_feeder(),
            loads: (1..=3)
                .flat_map(|h| (1..3).map(move |n| LoadRow { hour: h, node: n, p_kw: 100.0 * h as f64, q_kvar: 30.0 }))
                .collect(),
            prices: (1..=3).map(|h| PriceRow { hour: h, lmp_usd_per_mwh: 20.0 + h as f64, q_usd_per_mvarh: None }).collect(),
            investment: Some(InvestmentProject {
                total_cost_usd: 1e5,
                alpha: 0.15,
                allocation: Allocation::Direct(vec![LineUpgrade {
                    from: 0,
                    to: 1,
                    delta_ampacity_a: 50.0,
                    cost_usd: 1e5,
                }]),
            }),
            bounds: Some(DerBounds::uniform([1, 2], 40.0, 40.0)),
        }
    }

    #[test]
    fn input_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set();
        let paths = set.write(dir.path()).unwrap();
        let loaded = load_inputs(&paths).unwrap();
        assert_eq!(loaded.inputs, set);
        assert!(loaded.warnings.is_empty(), "{:?}", loaded.warnings);
        let sc = loaded.inputs.scenarios(0.05);
        assert_eq!(sc.len(), 3);
        assert_eq!(sc[1].net_p_kw, vec![0.0, -200.0, -200.0]);
        assert!((sc[2].q_price - 0.05 * 23.0).abs() < 1e-12);
    }

    fn rewrite(path: &Path, from: &str, to: &str) {
        let s = fs::read_to_string(path).unwrap().replacen(from, to, 1);
        fs::write(path, s).unwrap();
    }

    #[test]
    fn unknown_node_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let paths = tiny_set().write(dir.path()).unwrap();
        rewrite(&paths.loads, "2,2,200,30", "2,99,200,30");
        let err = load_inputs(&paths).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("unknown node 99 at loads.csv:5"), "{err}");
    }

    #[test]
    fn missing_price_hour_is_a_coverage_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let paths = tiny_set().write(dir.path()).unwrap();
        rewrite(&paths.prices, "2,22\n", "");
        let err = load_inputs(&paths).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("hour coverage mismatch"), "{err}");
    }

    #[test]
    fn missing_q_column_defaults_to_zero_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let paths = tiny_set().write(dir.path()).unwrap();
        let text: String = fs::read_to_string(&paths.loads)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
            .collect();
        fs::write(&paths.loads, text).unwrap();
        let loaded = load_inputs(&paths).unwrap();
        assert!(loaded.inputs.loads.iter().all(|l| l.q_kvar == 0.0));
        assert!(loaded.warnings.iter().any(|w| w.contains("without q_kvar")));
    }

    #[test]
    fn low_power_factor_warns() {
        let dir = tempfile::tempdir().unwrap();
        let paths = tiny_set().write(dir.path()).unwrap();
        rewrite(&paths.loads, "1,1,100,30", "1,1,100,300");
        let loaded = load_inputs(&paths).unwrap();
        assert!(loaded.warnings.iter().any(|w| w.contains("power factor")), "{:?}", loaded.warnings);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let paths = tiny_set().write(dir.path()).unwrap();
        rewrite(&paths.prices, "1,21", "1,-21");
        assert!(load_inputs(&paths).unwrap_err().is_validation());

        let paths = tiny_set().write(dir.path()).unwrap();
        rewrite(&paths.loads, "1,1,100", "1,1,abc");
        let err = load_inputs(&paths).unwrap_err();
        assert!(matches!(err, FormatError::Parse { .. }), "{err}");

        let paths = tiny_set().write(dir.path()).unwrap();
        rewrite(paths.investment.as_ref().unwrap(), "to = 1", "to = 2");
        assert!(load_inputs(&paths).unwrap_err().to_string().contains("not a line of the feeder"));

        let paths = tiny_set().write(dir.path()).unwrap();
        rewrite(paths.bounds.as_ref().unwrap(), "2,40,40", "7,40,40");
        assert!(load_inputs(&paths).unwrap_err().to_string().contains("unknown node 7 at bounds.csv:3"));

        let paths = tiny_set().write(dir.path()).unwrap();
        rewrite(&paths.feeder, "from = 1", "from = 2");
        assert!(matches!(load_inputs(&paths).unwrap_err(), FormatError::Feeder { .. }));

        let paths = tiny_set().write(dir.path()).unwrap();
        fs::remove_file(&paths.prices).unwrap();
        assert!(matches!(load_inputs(&paths).unwrap_err(), FormatError::Io { .. }));
    }

    fn sample_bundle() -> ResultBundle {
        ResultBundle {
            overloads: vec![OverloadRow { hour: 3, from: 0, to: 1, overload_a: 12.345678 }],
            anchors: vec![AnchorRow { hour: 3, from: 0, to: 1, l0_pu: 1.0 / 3.0 }],
            mcc: vec![MccRow {
                from: 0,
                to: 1,
                w_usd_per_a_h: 3.543307,
                t_hours: 127,
                allocated_cost_usd: 300000.0,
                capacity_divisor_a: 100.0,
            }],
            lmv: vec![LmvRow { hour: 3, node: 1, p_lmv: 55.5, q_lmv: 2.25, p_lmv_grid: 25.5, q_lmv_grid: 0.75 }],
            procurement: vec![ProcurementRow { hour: 3, node: 1, p_der_kw: 10.0, q_der_kvar: -2.5 }],
            events: vec![EventRow {
                hour: 3,
                step: "procure".into(),
                severity: "flag".into(),
                kind: "bounds-infeasible".into(),
                detail: "needs 1.5 kW, 2 kVAR, \"more\"".into(),
            }],
            summary: Summary { feeder: "tiny".into(), hours: 24, p_der_mwh: 0.01, ..Default::default() },
        }
    }

    #[test]
    fn results_round_trip_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample_bundle();
        let m = write_results(&b, dir.path()).unwrap();
        assert_eq!(read_results(dir.path()).unwrap(), b);
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let bytes = fs::read(dir.path().join(LMV_CSV)).unwrap();
        assert_eq!(m.digest(LMV_CSV).unwrap(), sha256_hex(&bytes));
        assert_eq!(m.files.iter().find(|f| f.name == PROCUREMENT_CSV).unwrap().rows, Some(1));
        let again = tempfile::tempdir().unwrap();
        assert_eq!(write_results(&b, again.path()).unwrap(), m);
    }

    #[test]
    fn empty_bundle_has_header_only_tables() {
        let dir = tempfile::tempdir().unwrap();
        write_results(&ResultBundle::default(), dir.path()).unwrap();
        for name in [OVERLOADS_CSV, ANCHORS_CSV, MCC_CSV, LMV_CSV, PROCUREMENT_CSV, EVENTS_CSV] {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(text.lines().count(), 1, "{name}");
        }
    }
}
