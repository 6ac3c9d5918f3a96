//! Slow, independent reference computations.
//!
//! Nothing here goes through the branch-flow relaxation except where the
//! quantity being checked is itself a property of a program (finite
//! differences of an optimal value). The load flows solve the conventional
//! complex circuit equations directly.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::conic::SolveOptions;
use crate::distflow::{build_opt2, solve_branch_flow, Anchor};
use crate::error::OracleError;
use crate::network::{NodeId, NormalizedProblemData};
use crate::valuation::MccTable;

/// Converged AC load-flow state in per unit.
#[derive(Debug, Clone)]
pub struct LoadFlowState {
    pub voltages: Vec<Complex64>,
    /// Current on each line (indexed like the feeder's lines), flowing from
    /// parent to child.
    pub currents: Vec<Complex64>,
    /// Sending-end complex power of each line.
    pub sending: Vec<Complex64>,
    pub iterations: usize,
    pub residual: f64,
    root_lines: Vec<usize>,
}

impl LoadFlowState {
    pub fn v_squared(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.norm_sqr()).collect()
    }

    pub fn l_squared(&self) -> Vec<f64> {
        self.currents.iter().map(|i| i.norm_sqr()).collect()
    }

    /// Real and reactive power drawn at the root.
    pub fn root_power(&self) -> (f64, f64) {
        let s: Complex64 = self.root_lines.iter().map(|&k| self.sending[k]).sum();
        (s.re, s.im)
    }

    /// Largest nodal power mismatch against the specified injections.
    pub fn max_power_mismatch(&self, data: &NormalizedProblemData) -> f64 {
        let n = data.node_count();
        let mut worst: f64 = 0.0;
        for j in 1..n {
            let mut out = -self.currents[j - 1];
            for &c in &data.children[j] {
                out += self.currents[c - 1];
            }
            let s = self.voltages[j] * out.conj();
            worst = worst.max((s - injection(data, j)).norm());
        }
        worst
    }
}

fn impedance(data: &NormalizedProblemData, k: usize) -> Complex64 {
    Complex64::new(data.lines[k].r, data.lines[k].x)
}

fn injection(data: &NormalizedProblemData, j: usize) -> Complex64 {
    Complex64::new(data.p_inj[j], data.q_inj[j])
}

fn finish(
    data: &NormalizedProblemData,
    voltages: Vec<Complex64>,
    currents: Vec<Complex64>,
    iterations: usize,
    residual: f64,
) -> LoadFlowState {
    let sending = data
        .lines
        .iter()
        .enumerate()
        .map(|(k, line)| voltages[line.from] * currents[k].conj())
        .collect();
    let root_lines = data.children[0].iter().map(|c| c - 1).collect();
    LoadFlowState { voltages, currents, sending, iterations, residual, root_lines }
}

/// Newton–Raphson on the radial circuit equations, with the root held at
/// `v_root ∠ 0`.
///
/// Unknowns are the non-root node voltages and the line currents (rectangular
/// coordinates). Equations are Kirchhoff's voltage law on every line and
/// current balance at every non-root node with constant-power injections.
/// Zero-impedance lines are handled without special cases.
pub fn newton_load_flow(
    data: &NormalizedProblemData,
    v_root: f64,
) -> Result<LoadFlowState, OracleError> {
    const MAX_ITER: usize = 50;
    const TOL: f64 = 1e-12;
    let n = data.node_count();
    let m = n - 1;
    let dim = 4 * m;
    let v0 = Complex64::new(v_root, 0.0);

    let mut volts = vec![v0; n];
    let mut curr = backward_currents(data, &volts);

    let node_col = |j: usize| 2 * (j - 1);
    let curr_col = |k: usize| 2 * m + 2 * k;

    let residual_vec = |volts: &[Complex64], curr: &[Complex64]| -> DVector<f64> {
        let mut f = DVector::zeros(dim);
        for (k, line) in data.lines.iter().enumerate() {
            let r = volts[line.from] - volts[line.to] - impedance(data, k) * curr[k];
            f[2 * k] = r.re;
            f[2 * k + 1] = r.im;
        }
        for j in 1..n {
            let mut r = curr[j - 1];
            for &c in &data.children[j] {
                r -= curr[c - 1];
            }
            r += injection(data, j).conj() / volts[j].conj();
            f[2 * m + 2 * (j - 1)] = r.re;
            f[2 * m + 2 * (j - 1) + 1] = r.im;
        }
        f
    };

    let mut f = residual_vec(&volts, &curr);
    let mut res = f.amax();
    for iter in 0..MAX_ITER {
        if res <= TOL {
            return Ok(finish(data, volts, curr, iter, res));
        }
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        let put_linear = |jac: &mut DMatrix<f64>, row: usize, col: usize, c: Complex64| {
            jac[(row, col)] += c.re;
            jac[(row, col + 1)] -= c.im;
            jac[(row + 1, col)] += c.im;
            jac[(row + 1, col + 1)] += c.re;
        };
        for (k, line) in data.lines.iter().enumerate() {
            let row = 2 * k;
            if line.from != 0 {
                put_linear(&mut jac, row, node_col(line.from), Complex64::new(1.0, 0.0));
            }
            put_linear(&mut jac, row, node_col(line.to), Complex64::new(-1.0, 0.0));
            put_linear(&mut jac, row, curr_col(k), -impedance(data, k));
        }
        for j in 1..n {
            let row = 2 * m + 2 * (j - 1);
            put_linear(&mut jac, row, curr_col(j - 1), Complex64::new(1.0, 0.0));
            for &c in &data.children[j] {
                put_linear(&mut jac, row, curr_col(c - 1), Complex64::new(-1.0, 0.0));
            }
            // g(V) = conj(S)/conj(V); ∂g/∂e = −conj(S)/conj(V)², ∂g/∂f = j·conj(S)/conj(V)²
            let base = injection(data, j).conj() / (volts[j].conj() * volts[j].conj());
            let ge = -base;
            let gf = Complex64::new(0.0, 1.0) * base;
            let col = node_col(j);
            jac[(row, col)] += ge.re;
            jac[(row + 1, col)] += ge.im;
            jac[(row, col + 1)] += gf.re;
            jac[(row + 1, col + 1)] += gf.im;
        }
        let step = jac.lu().solve(&(-&f)).ok_or(OracleError::Singular(iter))?;
        for j in 1..n {
            let c = node_col(j);
            volts[j] += Complex64::new(step[c], step[c + 1]);
        }
        for k in 0..m {
            let c = curr_col(k);
            curr[k] += Complex64::new(step[c], step[c + 1]);
        }
        f = residual_vec(&volts, &curr);
        res = f.amax();
        if !res.is_finite() || volts.iter().any(|v| !(v.norm() > 1e-3)) {
            return Err(OracleError::Diverged { iterations: iter + 1, residual: res });
        }
    }
    if res <= TOL {
        return Ok(finish(data, volts, curr, MAX_ITER, res));
    }
    Err(OracleError::Diverged { iterations: MAX_ITER, residual: res })
}

/// Line currents implied by constant-power injections at the given voltages.
fn backward_currents(data: &NormalizedProblemData, volts: &[Complex64]) -> Vec<Complex64> {
    let n = data.node_count();
    let mut curr = vec![Complex64::new(0.0, 0.0); n - 1];
    let mut order: Vec<usize> = (1..n).collect();
    // children have larger depth; process deepest first
    let depth = depths(data);
    order.sort_by_key(|&j| std::cmp::Reverse(depth[j]));
    for j in order {
        let mut i = -(injection(data, j) / volts[j]).conj();
        for &c in &data.children[j] {
            i += curr[c - 1];
        }
        curr[j - 1] = i;
    }
    curr
}

fn depths(data: &NormalizedProblemData) -> Vec<usize> {
    let n = data.node_count();
    let mut depth = vec![0usize; n];
    let mut stack = vec![0usize];
    while let Some(u) = stack.pop() {
        for &c in &data.children[u] {
            depth[c] = depth[u] + 1;
            stack.push(c);
        }
    }
    depth
}

/// Backward/forward sweep: fixed-point iteration on currents and voltages.
pub fn sweep_load_flow(
    data: &NormalizedProblemData,
    v_root: f64,
) -> Result<LoadFlowState, OracleError> {
    const MAX_ITER: usize = 1000;
    const TOL: f64 = 1e-14;
    let n = data.node_count();
    let depth = depths(data);
    let mut order: Vec<usize> = (1..n).collect();
    order.sort_by_key(|&j| depth[j]);
    let mut volts = vec![Complex64::new(v_root, 0.0); n];
    for iter in 0..MAX_ITER {
        let curr = backward_currents(data, &volts);
        let mut change: f64 = 0.0;
        for &j in &order {
            let k = j - 1;
            let from = data.lines[k].from;
            let next = volts[from] - impedance(data, k) * curr[k];
            change = change.max((next - volts[j]).norm());
            volts[j] = next;
        }
        if !change.is_finite() || volts.iter().any(|v| !(v.norm() > 1e-3)) {
            return Err(OracleError::Diverged { iterations: iter + 1, residual: change });
        }
        if change <= TOL {
            let curr = backward_currents(data, &volts);
            return Ok(finish(data, volts, curr, iter + 1, change));
        }
    }
    Err(OracleError::Diverged { iterations: MAX_ITER, residual: f64::NAN })
}

/// Closed forms for a single line feeding a single load node.
pub mod single_line {
    /// Load scale `s` such that a load `s·(dir_p + j·dir_q)` (pu) draws
    /// current `current` (pu) through line `r + jx` from root voltage
    /// `√v0`, i.e. `(s·dir_p + r·I²)² + (s·dir_q + x·I²)² = v0·I²`.
    pub fn load_scale_for_current(r: f64, x: f64, v0: f64, dir_p: f64, dir_q: f64, current: f64) -> f64 {
        let l = current * current;
        let a = dir_p * dir_p + dir_q * dir_q;
        let b = 2.0 * l * (r * dir_p + x * dir_q);
        let c = l * l * (r * r + x * x) - v0 * l;
        (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
    }

    #[derive(Debug, Clone, Copy)]
    pub struct ReliefInput {
        pub r: f64,
        pub x: f64,
        /// Squared root voltage at the optimum.
        pub v0: f64,
        pub i_max: f64,
        /// Consumption at the load node (pu, positive = load).
        pub load_p: f64,
        pub load_q: f64,
        /// DER prices at the load node and root prices, $/pu-h.
        pub price_p: f64,
        pub price_q: f64,
        pub root_p: f64,
        pub root_q: f64,
    }

    #[derive(Debug, Clone, Copy)]
    pub struct Relief {
        pub der_p: f64,
        pub der_q: f64,
        pub l: f64,
    }

    /// Cheapest DER injection at the load node under an ampacity limit, with
    /// both DER components unbounded.
    ///
    /// Cost is `const − a·P01 − b·Q01 + k·l` with `a, b` the DER price
    /// mark-ups over the root and `k = price_p·r + price_q·x`. For fixed `l`
    /// the sending power lies on the circle of radius `√(v0·l)` in direction
    /// `(a, b)`; the remaining concave problem in `l` peaks at
    /// `v0(a² + b²)/(4k²)`, clipped to the ampacity.
    pub fn relieving_injection(inp: &ReliefInput) -> Relief {
        let a = inp.price_p - inp.root_p;
        let b = inp.price_q - inp.root_q;
        let k = inp.price_p * inp.r + inp.price_q * inp.x;
        let norm = (a * a + b * b).sqrt();
        let l_cap = inp.i_max * inp.i_max;
        let l = if k > 0.0 { l_cap.min(inp.v0 * norm * norm / (4.0 * k * k)) } else { l_cap };
        let radius = (inp.v0 * l).sqrt();
        let p01 = radius * a / norm;
        let q01 = radius * b / norm;
        Relief { der_p: inp.r * l + inp.load_p - p01, der_q: inp.x * l + inp.load_q - q01, l }
    }
}

fn with_extra_demand(data: &NormalizedProblemData, node: NodeId, dp: f64, dq: f64) -> NormalizedProblemData {
    let mut d = data.clone();
    d.p_inj[node] -= dp;
    d.q_inj[node] -= dq;
    d
}

/// Central finite differences of the pricing program's optimal value with
/// respect to net real and reactive demand at `node`, in $/MWh and $/MVARh.
pub fn fd_lmv(
    data: &NormalizedProblemData,
    anchors: &[Anchor],
    mcc: &MccTable,
    node: NodeId,
    eps: f64,
    options: &SolveOptions,
) -> Result<(f64, f64), OracleError> {
    const ACTIVE: f64 = 1e-7;
    let solve_at = |d: &NormalizedProblemData| -> Result<(f64, Vec<bool>), OracleError> {
        let bf = build_opt2(d, anchors, mcc)?;
        let s = solve_branch_flow(&bf, d, options)?;
        if !s.is_optimal() {
            return Err(OracleError::PerturbedNotOptimal(format!("{:?}", s.status)));
        }
        Ok((s.objective, s.overload.iter().map(|(_, di)| *di > ACTIVE).collect()))
    };
    let mut out = [0.0; 2];
    for (slot, (dp, dq)) in [(eps, 0.0), (0.0, eps)].into_iter().enumerate() {
        let (up, set_up) = solve_at(&with_extra_demand(data, node, dp, dq))?;
        let (down, set_down) = solve_at(&with_extra_demand(data, node, -dp, -dq))?;
        if set_up != set_down {
            return Err(OracleError::NonSmooth);
        }
        out[slot] = data.price_to_physical((up - down) / (2.0 * eps));
    }
    Ok((out[0], out[1]))
}

/// Candidate DER location for [`brute_force_procurement`], in kW/kVAR.
#[derive(Debug, Clone, Copy)]
pub struct GridCandidate {
    pub node: NodeId,
    pub p_max_kw: f64,
    pub q_max_kvar: f64,
}

#[derive(Debug, Clone)]
pub struct GridPlan {
    /// $/h, same objective as the procurement program.
    pub cost: f64,
    /// `(node, p_kw, q_kvar)`
    pub der: Vec<(NodeId, f64, f64)>,
    pub v_root: f64,
}

/// Exhaustive search over a `step_kw` grid of DER quantities at up to three
/// candidate nodes and `root_steps` root-voltage levels. Each grid point is
/// evaluated with a load flow; points violating ampacity or voltage limits
/// are discarded. Returns `None` when no grid point is feasible.
pub fn brute_force_procurement(
    data: &NormalizedProblemData,
    lmv_p: &[f64],
    lmv_q: &[f64],
    candidates: &[GridCandidate],
    step_kw: f64,
    root_steps: usize,
) -> Option<GridPlan> {
    assert!(candidates.len() <= 3, "brute force is limited to three candidate nodes");
    let s_kw = data.bases.s_kw();
    let axes: Vec<(Vec<f64>, Vec<f64>)> = candidates
        .iter()
        .map(|c| (grid(0.0, c.p_max_kw, step_kw), grid(-c.q_max_kvar, c.q_max_kvar, step_kw)))
        .collect();
    let (v_lo, v_hi) = (data.v_min_sq.sqrt(), data.v_max_sq.sqrt());
    let roots: Vec<f64> = if root_steps <= 1 {
        vec![v_hi]
    } else {
        (0..root_steps).map(|k| v_hi - (v_hi - v_lo) * k as f64 / (root_steps - 1) as f64).collect()
    };

    let mut best: Option<GridPlan> = None;
    let mut idx = vec![(0usize, 0usize); candidates.len()];
    let mut trial = data.clone();
    'outer: loop {
        trial.p_inj.clone_from(&data.p_inj);
        trial.q_inj.clone_from(&data.q_inj);
        let mut der_cost = 0.0;
        let mut der = Vec::with_capacity(candidates.len());
        for (c, (&(ip, iq), axis)) in candidates.iter().zip(idx.iter().zip(&axes)) {
            let (p_kw, q_kvar) = (axis.0[ip], axis.1[iq]);
            trial.p_inj[c.node] += p_kw / s_kw;
            trial.q_inj[c.node] += q_kvar / s_kw;
            der_cost += data.price_to_pu(lmv_p[c.node]) * p_kw / s_kw
                + data.price_to_pu(lmv_q[c.node]) * q_kvar / s_kw;
            der.push((c.node, p_kw, q_kvar));
        }
        for &v_root in &roots {
            let Ok(lf) = sweep_load_flow(&trial, v_root) else { continue };
            let feasible = lf
                .l_squared()
                .iter()
                .zip(&trial.lines)
                .all(|(l, line)| *l <= line.i_max * line.i_max * (1.0 + 1e-12))
                && lf
                    .v_squared()
                    .iter()
                    .all(|v| *v >= data.v_min_sq * (1.0 - 1e-12) && *v <= data.v_max_sq * (1.0 + 1e-12));
            if !feasible {
                continue;
            }
            let (p0, q0) = lf.root_power();
            let cost = data.c_p * p0 + data.c_q * q0 + der_cost;
            if best.as_ref().is_none_or(|b| cost < b.cost) {
                best = Some(GridPlan { cost, der: der.clone(), v_root });
            }
        }
        // odometer increment over (p, q) of every candidate
        for (pos, axis) in axes.iter().enumerate() {
            let (ip, iq) = &mut idx[pos];
            *iq += 1;
            if *iq < axis.1.len() {
                continue 'outer;
            }
            *iq = 0;
            *ip += 1;
            if *ip < axis.0.len() {
                continue 'outer;
            }
            *ip = 0;
        }
        break;
    }
    best
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    let count = ((hi - lo) / step).round() as usize;
    let mut out: Vec<f64> = (0..=count).map(|k| lo + k as f64 * step).filter(|v| *v <= hi + 1e-12).collect();
    if out.last().is_some_and(|&v| v < hi - 1e-12) {
        out.push(hi);
    }
    out
}

/// Best `(P, Q, value)` of a nameplate-`k` inverter at irradiance `rho` for
/// prices `(p_lmv, q_lmv)`, by enumeration of `points` boundary points of the
/// capability set plus its corners.
pub fn pv_grid_search(p_lmv: f64, q_lmv: f64, rho: f64, k: f64, points: usize) -> (f64, f64, f64) {
    let q_corner = k * (1.0 - rho * rho).max(0.0).sqrt();
    let mut cands = vec![(0.0, k), (0.0, -k), (rho * k, q_corner), (rho * k, -q_corner)];
    let half_pi = std::f64::consts::FRAC_PI_2;
    for i in 0..points {
        let theta = -half_pi + std::f64::consts::PI * i as f64 / (points - 1) as f64;
        cands.push(((k * theta.cos()).min(rho * k).max(0.0), k * theta.sin()));
    }
    cands
        .into_iter()
        .map(|(p, q)| (p, q, p * p_lmv + q * q_lmv))
        .fold((0.0, 0.0, f64::NEG_INFINITY), |best, c| if c.2 > best.2 { c } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{to_per_unit, FeederModel, HourlyScenario, LineSpec, Network, NodeSpec};

    fn chain_data(r_pu: f64, x_pu: f64, loads_kw: &[(f64, f64)]) -> NormalizedProblemData {
        let n = loads_kw.len() + 1;
        let net = Network::new(FeederModel {
            name: "chain".into(),
            nodes: (0..n).map(|id| NodeSpec { id, fixed_shunt_q_kvar: 0.0, is_load: id > 0 }).collect(),
            lines: (1..n)
                .map(|j| LineSpec {
                    from: j - 1,
                    to: j,
                    r_ohm: r_pu * 144.0,
                    x_ohm: x_pu * 144.0,
                    ampacity_a: 100.0,
                    length_m: 10.0,
                })
                .collect(),
            s_base_mva: 1.0,
            v_base_kv: 12.0,
            i_base_a: None,
            v_min_pu: 0.5,
            v_max_pu: 1.1,
        })
        .unwrap();
        let p: Vec<f64> = std::iter::once(0.0).chain(loads_kw.iter().map(|l| l.0)).collect();
        let q: Vec<f64> = std::iter::once(0.0).chain(loads_kw.iter().map(|l| l.1)).collect();
        to_per_unit(&net, &HourlyScenario::from_loads(1, &p, &q, 30.0, 0.05)).unwrap()
    }

    #[test]
    fn flat_profile_without_injections() {
        let data = chain_data(0.01, 0.02, &[(0.0, 0.0), (0.0, 0.0)]);
        let lf = newton_load_flow(&data, 1.02).unwrap();
        for v in &lf.voltages {
            assert!((v - Complex64::new(1.02, 0.0)).norm() < 1e-14);
        }
        assert!(lf.currents.iter().all(|i| i.norm() < 1e-14));
    }

    #[test]
    fn newton_agrees_with_sweep() {
        let data = chain_data(0.01, 0.01, &[(1000.0, 500.0)]);
        let a = newton_load_flow(&data, 1.0).unwrap();
        let b = sweep_load_flow(&data, 1.0).unwrap();
        for (x, y) in a.voltages.iter().zip(&b.voltages) {
            assert!((x - y).norm() < 1e-10);
        }
        for (x, y) in a.currents.iter().zip(&b.currents) {
            assert!((x - y).norm() < 1e-10);
        }
        assert!(a.max_power_mismatch(&data) < 1e-10);
        assert!(b.max_power_mismatch(&data) < 1e-10);
        // hand check: V1 = 1 − z·conj(S/V1); receiving power equals the load
        let v1 = a.voltages[1];
        let s = v1 * a.currents[0].conj();
        assert!((s - Complex64::new(1.0, 0.5)).norm() < 1e-10);
        // sending power = load + r·l + j·x·l
        let l = a.currents[0].norm_sqr();
        let (p0, q0) = a.root_power();
        assert!((p0 - (1.0 + 0.01 * l)).abs() < 1e-10);
        assert!((q0 - (0.5 + 0.01 * l)).abs() < 1e-10);
    }

    #[test]
    fn longer_chain_agreement() {
        let data = chain_data(0.02, 0.03, &[(300.0, 100.0), (250.0, 80.0), (400.0, -50.0), (100.0, 30.0)]);
        let a = newton_load_flow(&data, 1.03).unwrap();
        let b = sweep_load_flow(&data, 1.03).unwrap();
        for (x, y) in a.v_squared().iter().zip(b.v_squared()) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in a.l_squared().iter().zip(b.l_squared()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_impedance_lines_are_supported() {
        let data = chain_data(0.0, 0.0, &[(500.0, 100.0), (300.0, 0.0)]);
        let a = newton_load_flow(&data, 1.0).unwrap();
        assert!((a.voltages[2] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((a.l_squared()[0] - (0.8f64.powi(2) + 0.1f64.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn collapse_is_reported() {
        // 2-node loadability with r = x = 0.1 pu at 1 pu is roughly 2 pu; 20 pu cannot be served.
        let data = chain_data(0.1, 0.1, &[(20_000.0, 10_000.0)]);
        assert!(matches!(newton_load_flow(&data, 1.0), Err(OracleError::Diverged { .. } | OracleError::Singular(_))));
        assert!(sweep_load_flow(&data, 1.0).is_err());
    }

    #[test]
    fn load_scale_inverts_current() {
        let (r, x, v0) = (0.01, 0.02, 1.05f64.powi(2));
        let s = single_line::load_scale_for_current(r, x, v0, 0.95, 0.312, 1.3);
        let data = chain_data(r, x, &[(s * 950.0, s * 312.0)]);
        let lf = newton_load_flow(&data, v0.sqrt()).unwrap();
        assert!((lf.currents[0].norm() - 1.3).abs() < 1e-10);
    }

    #[test]
    fn pv_grid_search_edges() {
        let (p, q, v) = pv_grid_search(50.0, 10.0, 0.0, 1.0, 10_000);
        assert!(p.abs() < 1e-12 && (q - 1.0).abs() < 1e-12 && (v - 10.0).abs() < 1e-12);
        let (p, _, v) = pv_grid_search(50.0, 0.0, 1.0, 2.0, 10_000);
        assert!((p - 2.0).abs() < 1e-12 && (v - 100.0).abs() < 1e-9);
    }
}
