//! Deterministic synthetic feeders and hourly data.
//!
//! Electrical values are invented but plausible for a 12 kV overhead feeder;
//! ampacities are chosen so that a known set of hours is overloaded.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distflow::DerBounds;
use crate::io::{InputSet, LoadRow, PriceRow};
use crate::network::{to_per_unit, FeederModel, LineSpec, Network, NodeId, NodeSpec};
use crate::oracle::sweep_load_flow;
use crate::valuation::{Allocation, InvestmentProject, LineUpgrade};

/// One line of a feeder under construction: `(parent, r Ω, x Ω, ampacity A, length m)`.
type Branch = (NodeId, f64, f64, f64, f64);

fn feeder(name: &str, branches: &[Branch], non_load: &[NodeId], shunts: &[(NodeId, f64)], v: (f64, f64)) -> FeederModel {
    let n = branches.len() + 1;
    FeederModel {
        name: name.into(),
        nodes: (0..n)
            .map(|id| NodeSpec {
                id,
                fixed_shunt_q_kvar: shunts.iter().find(|s| s.0 == id).map(|s| s.1).unwrap_or(0.0),
                is_load: id > 0 && !non_load.contains(&id),
            })
            .collect(),
        lines: branches
            .iter()
            .enumerate()
            .map(|(k, &(from, r_ohm, x_ohm, ampacity_a, length_m))| LineSpec {
                from,
                to: k + 1,
                r_ohm,
                x_ohm,
                ampacity_a,
                length_m,
            })
            .collect(),
        s_base_mva: 1.0,
        v_base_kv: 12.0,
        i_base_a: None,
        v_min_pu: v.0,
        v_max_pu: v.1,
    }
}

/// Share of the daily peak drawn in hour-of-day `hod` (0–23).
fn daily_shape(hod: usize) -> f64 {
    const SHAPE: [f64; 24] = [
        0.52, 0.48, 0.46, 0.45, 0.46, 0.50, 0.58, 0.66, 0.71, 0.74, 0.76, 0.78, 0.79, 0.80, 0.81, 0.83, 0.90, 0.96,
        1.00, 0.97, 0.85, 0.76, 0.66, 0.58,
    ];
    SHAPE[hod % 24]
}

fn day_rows(peaks: &[(NodeId, f64)], pf: f64, hours: usize) -> Vec<LoadRow> {
    let tan = (1.0 - pf * pf).sqrt() / pf;
    let mut rows = Vec::new();
    for h in 1..=hours {
        let s = daily_shape(h - 1);
        for &(node, p) in peaks {
            rows.push(LoadRow { hour: h, node, p_kw: round3(p * s), q_kvar: round3(p * s * tan) });
        }
    }
    rows
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn day_prices(hours: usize) -> Vec<PriceRow> {
    (1..=hours)
        .map(|h| PriceRow {
            hour: h,
            lmp_usd_per_mwh: round3(18.0 + 40.0 * (daily_shape(h - 1) - 0.45)),
            q_usd_per_mvarh: None,
        })
        .collect()
}

/// One line feeding one load over a day; hours 18–20 (1-based) overload it.
pub fn two_node() -> InputSet {
    let feeder = feeder("two-node", &[(0, 1.44, 2.88, 60.0, 1500.0)], &[], &[], (0.9, 1.05));
    let loads = day_rows(&[(1, 1300.0)], 0.95, 24);
    InputSet {
        feeder,
        loads,
        prices: day_prices(24),
        investment: Some(InvestmentProject {
            total_cost_usd: 150_000.0,
            alpha: 0.15,
            allocation: Allocation::Direct(vec![LineUpgrade { from: 0, to: 1, delta_ampacity_a: 40.0, cost_usd: 150_000.0 }]),
        }),
        bounds: None,
    }
}

/// Six nodes: trunk (0,1), laterals 1–2–3 and 1–4–5. Over a day, exactly
/// hours 18, 19 and 20 overload the trunk.
pub fn six_node() -> InputSet {
    let branches: [Branch; 5] = [
        (0, 1.2, 2.0, 60.0, 2000.0),
        (1, 0.9, 1.2, 40.0, 1500.0),
        (2, 1.1, 1.4, 15.0, 1800.0),
        (1, 0.8, 1.1, 40.0, 1300.0),
        (4, 1.0, 1.3, 25.0, 1700.0),
    ];
    let feeder = feeder("six-node", &branches, &[1], &[], (0.95, 1.05));
    let loads = day_rows(&[(2, 400.0), (3, 300.0), (4, 350.0), (5, 250.0)], 0.95, 24);
    InputSet {
        feeder,
        loads,
        prices: day_prices(24),
        investment: Some(InvestmentProject {
            total_cost_usd: 250_000.0,
            alpha: 0.15,
            allocation: Allocation::Direct(vec![
                LineUpgrade { from: 0, to: 1, delta_ampacity_a: 60.0, cost_usd: 200_000.0 },
                LineUpgrade { from: 2, to: 3, delta_ampacity_a: 10.0, cost_usd: 50_000.0 },
            ]),
        }),
        bounds: None,
    }
}

/// The six-node fixture with 40 kW / 40 kVAR DER limits at every load node.
pub fn six_node_bounded() -> InputSet {
    let mut set = six_node();
    set.bounds = Some(DerBounds::uniform([2, 3, 4, 5], 40.0, 40.0));
    set
}

/// The six-node fixture with ampacities no hour reaches.
pub fn six_node_uncongested() -> InputSet {
    let mut set = six_node();
    set.feeder.name = "six-node-uncongested".into();
    for l in &mut set.feeder.lines {
        l.ampacity_a *= 3.0;
    }
    set
}

/// The six-node fixture with hour 12 loaded beyond what the voltage limits allow.
pub fn six_node_voltage_infeasible() -> InputSet {
    let mut set = six_node();
    set.feeder.name = "six-node-voltage-infeasible".into();
    for l in set.loads.iter_mut().filter(|l| l.hour == 12) {
        l.p_kw *= 12.0;
        l.q_kvar *= 12.0;
    }
    set
}

/// Zero-impedance feeder; line (1,2) overloads in hour 19.
pub fn lossless() -> InputSet {
    let branches: [Branch; 5] = [
        (0, 0.0, 0.0, 200.0, 500.0),
        (1, 0.0, 0.0, 40.0, 800.0),
        (2, 0.0, 0.0, 100.0, 400.0),
        (2, 0.0, 0.0, 100.0, 400.0),
        (1, 0.0, 0.0, 100.0, 600.0),
    ];
    let feeder = feeder("lossless", &branches, &[1], &[], (0.95, 1.05));
    let loads = day_rows(&[(2, 300.0), (3, 250.0), (4, 300.0), (5, 500.0)], 0.9, 24);
    InputSet {
        feeder,
        loads,
        prices: day_prices(24),
        investment: Some(InvestmentProject {
            total_cost_usd: 80_000.0,
            alpha: 0.15,
            allocation: Allocation::Direct(vec![LineUpgrade { from: 1, to: 2, delta_ampacity_a: 20.0, cost_usd: 80_000.0 }]),
        }),
        bounds: None,
    }
}

/// Thirty nodes: a 12-node trunk with three-node laterals. The trunk head
/// overloads most of the day, the (4,15) lateral head through the daytime
/// and (1,2) only at the peak.
pub fn thirty_node() -> InputSet {
    let mut branches: Vec<Branch> = Vec::new();
    for k in 0..11 {
        branches.push((k, 0.25, 0.45, if k == 0 { 95.0 } else { 200.0 }, 700.0));
    }
    // laterals hang off trunk nodes 2, 4, 6, 8, 10 and 11
    let mut next = 12;
    for (i, &at) in [2, 4, 6, 8, 10, 11].iter().enumerate() {
        let len = if i < 6 { 3 } else { 2 };
        let mut parent = at;
        for d in 0..len {
            let amp = if i == 1 && d == 0 { 16.0 } else { 80.0 };
            branches.push((parent, 0.45, 0.55, amp, 400.0));
            parent = next;
            next += 1;
        }
    }
    debug_assert_eq!(branches.len() + 1, next);
    let n = next;
    let feeder = feeder("thirty-node", &branches, &[1, 2], &[(9, 300.0)], (0.95, 1.05));
    let peaks: Vec<(NodeId, f64)> = (3..n).map(|j| (j, 60.0 + 45.0 * ((j * 7) % 5) as f64)).collect();
    InputSet {
        feeder,
        loads: day_rows(&peaks, 0.93, 24),
        prices: day_prices(24),
        investment: Some(InvestmentProject {
            total_cost_usd: 500_000.0,
            alpha: 0.15,
            allocation: Allocation::LengthWeighted,
        }),
        bounds: None,
    }
}

/// Topology of the 88-node feeder: a 24-node trunk with laterals, two
/// 1.2 MVAR capacitors, 72 load nodes.
fn eighty_eight_branches() -> (Vec<Branch>, Vec<NodeId>) {
    let mut branches: Vec<Branch> = Vec::new();
    // trunk 0–1–…–23
    for k in 0..23 {
        let amp = match k {
            0 => f64::NAN, // set from the load profile
            1 => f64::NAN,
            _ => 400.0,
        };
        branches.push((k, 0.06, 0.12, amp, 300.0 + 20.0 * k as f64));
    }
    // a lateral at node 1 bypasses line (1,2)
    let mut next = 24;
    let mut junctions = vec![1, 2];
    let lateral = |at: NodeId, len: usize, branches: &mut Vec<Branch>, next: &mut usize| {
        let mut parent = at;
        for _ in 0..len {
            branches.push((parent, 0.22, 0.28, 250.0, 250.0));
            parent = *next;
            *next += 1;
        }
    };
    lateral(1, 9, &mut branches, &mut next);
    for at in 3..23 {
        let len = if at % 3 == 0 { 4 } else { 2 };
        lateral(at, len, &mut branches, &mut next);
        if next >= 88 {
            break;
        }
    }
    while next < 88 {
        lateral(23, 1, &mut branches, &mut next);
    }
    branches.truncate(87);
    // junctions are the trunk nodes that carry no load of their own
    junctions.extend([5, 8, 11, 14, 17, 20, 3, 6, 9, 12, 15, 18, 21]);
    (branches, junctions)
}

/// 88-node feeder over `hours` hours of a synthetic year (`hours ≤ 8760`).
/// Ampacities of (0,1) and (1,2) are set so that roughly 1.5 % and 0.05 % of
/// the hours overload them.
pub fn eighty_eight_node(hours: usize) -> InputSet {
    let (branches, junctions) = eighty_eight_branches();
    let n = branches.len() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let peaks: Vec<(NodeId, f64)> = (1..n)
        .filter(|j| !junctions.contains(j))
        .map(|j| (j, 40.0 + rng.gen_range(0.0..70.0)))
        .collect();
    let pf: Vec<f64> = peaks.iter().map(|_| rng.gen_range(0.85..0.95)).collect();

    let mut loads = Vec::with_capacity(hours * peaks.len());
    let mut prices = Vec::with_capacity(hours);
    // estimated apparent power through (0,1) and (1,2) per hour
    let mut s01 = Vec::with_capacity(hours);
    let mut s12 = Vec::with_capacity(hours);
    let lateral_1: Vec<NodeId> = (24..33).collect();
    for h in 1..=hours {
        let day = ((h - 1) / 24) as f64;
        let season = 0.72 + 0.28 * (-((day - 200.0) / 35.0).powi(2)).exp() + 0.08 * (-((day - 20.0) / 25.0).powi(2)).exp();
        let common = season * daily_shape(h - 1) * (1.0 + rng.gen_range(-0.04..0.04));
        let (mut p01, mut q01, mut p12, mut q12) = (0.0, 0.0, 0.0, 0.0);
        for (&(node, peak), &f) in peaks.iter().zip(&pf) {
            let p = round3(peak * common * (1.0 + rng.gen_range(-0.05..0.05)));
            let q = round3(p * (1.0 - f * f).sqrt() / f);
            loads.push(LoadRow { hour: h, node, p_kw: p, q_kvar: q });
            p01 += p;
            q01 += q;
            if !lateral_1.contains(&node) {
                p12 += p;
                q12 += q;
            }
        }
        s01.push(p01.hypot(q01 - 2400.0));
        s12.push(p12.hypot(q12 - 2400.0));
        let lmp = 15.0 + 55.0 * (common - 0.3).max(0.0) + rng.gen_range(-3.0..3.0);
        prices.push(PriceRow { hour: h, lmp_usd_per_mwh: round3(lmp.max(0.0)), q_usd_per_mvarh: None });
    }
    let mut feeder = feeder("eighty-eight-node", &branches, &junctions, &[(7, 1200.0), (62, 1200.0)], (0.95, 1.04));
    feeder.s_base_mva = 10.0;
    let rank01 = ((hours as f64) * 127.0 / 8760.0).round() as usize;
    let rank12 = ((hours as f64) * 4.0 / 8760.0).round().max(1.0) as usize;
    let mut set = InputSet { feeder, loads, prices, investment: None, bounds: None };
    set.feeder.lines[0].ampacity_a = 1e4;
    set.feeder.lines[1].ampacity_a = 1e4;
    // Rough apparent-power ranking picks the candidate hours; load flows at
    // the upper root voltage then place each ampacity between the targeted
    // rank and the next.
    let currents = peak_currents(&set, &[(&s01, rank01), (&s12, rank12)]);
    set.feeder.lines[0].ampacity_a = ampacity_at_rank(&currents[0], rank01);
    set.feeder.lines[1].ampacity_a = ampacity_at_rank(&currents[1], rank12);

    InputSet {
        investment: Some(InvestmentProject {
            total_cost_usd: 400_000.0,
            alpha: 0.15,
            allocation: Allocation::Direct(vec![
                LineUpgrade { from: 0, to: 1, delta_ampacity_a: 100.0, cost_usd: 300_000.0 },
                LineUpgrade { from: 1, to: 2, delta_ampacity_a: 35.0, cost_usd: 100_000.0 },
            ]),
        }),
        ..set
    }
}

/// Load-flow currents (A, descending) through lines 0 and 1 over the hours
/// whose estimate ranks among the top few times `rank`.
fn peak_currents(set: &InputSet, estimates: &[(&Vec<f64>, usize)]) -> Vec<Vec<f64>> {
    let mut candidates = BTreeSet::new();
    for (est, rank) in estimates {
        let mut order: Vec<usize> = (0..est.len()).collect();
        order.sort_by(|&a, &b| est[b].total_cmp(&est[a]));
        candidates.extend(order.into_iter().take(3 * rank + 48).map(|i| i + 1));
    }
    let net = Network::new(set.feeder.clone()).expect("valid feeder");
    let v_root = set.feeder.v_max_pu;
    let mut out = vec![Vec::new(); estimates.len()];
    for s in set.scenarios(0.05).iter().filter(|s| candidates.contains(&s.hour)) {
        let data = to_per_unit(&net, s).expect("matching scenario");
        let lf = sweep_load_flow(&data, v_root).expect("load flow converges at peak");
        for (k, c) in out.iter_mut().enumerate() {
            c.push(lf.currents[k].norm() * data.bases.i_a);
        }
    }
    for c in &mut out {
        c.sort_by(|a, b| b.total_cmp(a));
    }
    out
}

/// Midway between the `rank`-th largest current and the next, to 1 mA.
fn ampacity_at_rank(currents: &[f64], rank: usize) -> f64 {
    let above = currents[rank.saturating_sub(1).min(currents.len() - 1)];
    let below = currents.get(rank).copied().unwrap_or(0.0);
    let amp = if rank == 0 { above + 1.0 } else { 0.5 * (above + below) };
    (amp * 1e3).round() / 1e3
}

/// Named cases, for the command line.
pub fn by_name(name: &str) -> Option<InputSet> {
    Some(match name {
        "two-node" => two_node(),
        "six-node" => six_node(),
        "six-node-bounded" => six_node_bounded(),
        "six-node-uncongested" => six_node_uncongested(),
        "six-node-voltage-infeasible" => six_node_voltage_infeasible(),
        "lossless" => lossless(),
        "thirty-node" => thirty_node(),
        "eighty-eight-node" => eighty_eight_node(8760),
        _ => return None,
    })
}

pub const NAMES: &[&str] = &[
    "two-node",
    "six-node",
    "six-node-bounded",
    "six-node-uncongested",
    "six-node-voltage-infeasible",
    "lossless",
    "thirty-node",
    "eighty-eight-node",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{validate_feeder, Network};

    #[test]
    fn all_cases_are_valid_feeders() {
        for name in NAMES.iter().filter(|n| **n != "eighty-eight-node") {
            let set = by_name(name).unwrap();
            assert!(validate_feeder(&set.feeder).is_clean(), "{name}: {}", validate_feeder(&set.feeder));
            assert!(Network::new(set.feeder.clone()).is_ok());
            assert_eq!(set.scenarios(0.05).len(), 24);
        }
        let set = eighty_eight_node(48);
        assert_eq!(set.feeder.nodes.len(), 88);
        assert_eq!(set.feeder.nodes.iter().filter(|n| n.is_load).count(), 72);
        assert!(validate_feeder(&set.feeder).is_clean(), "{}", validate_feeder(&set.feeder));
        assert_eq!(set.scenarios(0.05).len(), 48);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(eighty_eight_node(100), eighty_eight_node(100));
    }
}
