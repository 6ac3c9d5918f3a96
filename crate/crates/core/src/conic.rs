//! Solver-agnostic second-order cone programs.
//!
//! A [`ConicProgram`] holds named scalar variables with optional bounds, a
//! linear objective, labelled equalities and inequalities, and rotated cones
//! `u·w ≥ Σ s_k²`. [`solve`] hands the program to an embedded interior-point
//! solver (Clarabel) and maps the result back onto labels.
//!
//! Dual convention: every reported multiplier is the derivative of the optimal
//! objective with respect to the constraint's right-hand side. For a nodal
//! balance written as `inflow - outflow = demand`, the multiplier is the
//! marginal cost of serving one more unit of demand at that node.

use std::collections::HashMap;
use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolution, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{ProgramError, SolveError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

pub type Terms = Vec<(VarId, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Equality {
    pub label: String,
    pub terms: Terms,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inequality {
    pub label: String,
    pub terms: Terms,
    pub sense: Sense,
    pub rhs: f64,
}

/// `u·w ≥ Σ squares_k²` with `u, w ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedCone {
    pub label: String,
    pub u: VarId,
    pub w: VarId,
    pub squares: Vec<VarId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    variables: Vec<Variable>,
    var_names: HashMap<String, VarId>,
    objective: Terms,
    objective_constant: f64,
    equalities: Vec<Equality>,
    inequalities: Vec<Inequality>,
    cones: Vec<RotatedCone>,
    labels: HashMap<String, LabelRef>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LabelRef {
    Equality(usize),
    Inequality(usize),
    Cone(usize),
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(
        &mut self,
        name: impl Into<String>,
        lower: Option<f64>,
        upper: Option<f64>,
    ) -> Result<VarId, ProgramError> {
        let name = name.into();
        if self.var_names.contains_key(&name) {
            return Err(ProgramError::DuplicateVariable(name));
        }
        if lower.is_some_and(|v| v.is_nan()) || upper.is_some_and(|v| v.is_nan()) {
            return Err(ProgramError::NonFinite(name));
        }
        let id = VarId(self.variables.len());
        self.var_names.insert(name.clone(), id);
        self.variables.push(Variable { name, lower, upper });
        Ok(id)
    }

    pub fn set_objective(&mut self, terms: Terms, constant: f64) -> Result<(), ProgramError> {
        self.check_terms("objective", &terms)?;
        self.objective = terms;
        self.objective_constant = constant;
        Ok(())
    }

    pub fn add_equality(
        &mut self,
        label: impl Into<String>,
        terms: Terms,
        rhs: f64,
    ) -> Result<(), ProgramError> {
        let label = label.into();
        self.check_terms(&label, &terms)?;
        if !rhs.is_finite() {
            return Err(ProgramError::NonFinite(label));
        }
        self.claim_label(&label, LabelRef::Equality(self.equalities.len()))?;
        self.equalities.push(Equality { label, terms, rhs });
        Ok(())
    }

    pub fn add_inequality(
        &mut self,
        label: impl Into<String>,
        terms: Terms,
        sense: Sense,
        rhs: f64,
    ) -> Result<(), ProgramError> {
        let label = label.into();
        self.check_terms(&label, &terms)?;
        if !rhs.is_finite() {
            return Err(ProgramError::NonFinite(label));
        }
        self.claim_label(&label, LabelRef::Inequality(self.inequalities.len()))?;
        self.inequalities.push(Inequality { label, terms, sense, rhs });
        Ok(())
    }

    pub fn add_rotated_cone(
        &mut self,
        label: impl Into<String>,
        u: VarId,
        w: VarId,
        squares: Vec<VarId>,
    ) -> Result<(), ProgramError> {
        let label = label.into();
        for v in [u, w].iter().chain(&squares) {
            if v.0 >= self.variables.len() {
                return Err(ProgramError::UnknownVariable { label, index: v.0 });
            }
        }
        for head in [u, w] {
            if !self.variables[head.0].lower.is_some_and(|lb| lb >= 0.0) {
                return Err(ProgramError::ConeHeadUnbounded(label));
            }
        }
        self.claim_label(&label, LabelRef::Cone(self.cones.len()))?;
        self.cones.push(RotatedCone { label, u, w, squares });
        Ok(())
    }

    fn claim_label(&mut self, label: &str, at: LabelRef) -> Result<(), ProgramError> {
        if self.labels.contains_key(label) {
            return Err(ProgramError::DuplicateLabel(label.to_string()));
        }
        self.labels.insert(label.to_string(), at);
        Ok(())
    }

    fn check_terms(&self, label: &str, terms: &Terms) -> Result<(), ProgramError> {
        for &(v, c) in terms {
            if v.0 >= self.variables.len() {
                return Err(ProgramError::UnknownVariable { label: label.to_string(), index: v.0 });
            }
            if !c.is_finite() {
                return Err(ProgramError::NonFinite(label.to_string()));
            }
        }
        Ok(())
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn var(&self, name: &str) -> Option<VarId> {
        self.var_names.get(name).copied()
    }

    pub fn equalities(&self) -> &[Equality] {
        &self.equalities
    }

    pub fn inequalities(&self) -> &[Inequality] {
        &self.inequalities
    }

    pub fn cones(&self) -> &[RotatedCone] {
        &self.cones
    }

    pub fn objective(&self) -> (&Terms, f64) {
        (&self.objective, self.objective_constant)
    }

    pub fn equality_index(&self, label: &str) -> Option<usize> {
        match self.labels.get(label) {
            Some(LabelRef::Equality(k)) => Some(*k),
            _ => None,
        }
    }

    pub fn inequality_index(&self, label: &str) -> Option<usize> {
        match self.labels.get(label) {
            Some(LabelRef::Inequality(k)) => Some(*k),
            _ => None,
        }
    }

    /// Copy of the program with the right-hand side of equality `label`
    /// shifted by `delta`.
    pub fn with_rhs_shift(&self, label: &str, delta: f64) -> Result<Self, ProgramError> {
        let k = self
            .equality_index(label)
            .ok_or_else(|| ProgramError::UnknownLabel(label.to_string()))?;
        let mut out = self.clone();
        out.equalities[k].rhs += delta;
        Ok(out)
    }

    /// Copy of the program with the objective multiplied by `factor`.
    pub fn with_scaled_objective(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for (_, c) in &mut out.objective {
            *c *= factor;
        }
        out.objective_constant *= factor;
        out
    }

    /// Plain-text listing, one constraint per line.
    pub fn to_listing(&self) -> String {
        let mut s = String::new();
        let term_list = |terms: &Terms| -> String {
            if terms.is_empty() {
                return "0".to_string();
            }
            terms
                .iter()
                .map(|(v, c)| format!("{c}·{}", self.variables[v.0].name))
                .collect::<Vec<_>>()
                .join(" + ")
        };
        let _ = writeln!(s, "minimize: {} + {}", term_list(&self.objective), self.objective_constant);
        for var in &self.variables {
            match (var.lower, var.upper) {
                (None, None) => {}
                (Some(lb), None) => {
                    let _ = writeln!(s, "bound: {} ≥ {lb}", var.name);
                }
                (None, Some(ub)) => {
                    let _ = writeln!(s, "bound: {} ≤ {ub}", var.name);
                }
                (Some(lb), Some(ub)) => {
                    let _ = writeln!(s, "bound: {lb} ≤ {} ≤ {ub}", var.name);
                }
            }
        }
        for eq in &self.equalities {
            let _ = writeln!(s, "{}: {} = {}", eq.label, term_list(&eq.terms), eq.rhs);
        }
        for ineq in &self.inequalities {
            let op = match ineq.sense {
                Sense::Le => "≤",
                Sense::Ge => "≥",
            };
            let _ = writeln!(s, "{}: {} {op} {}", ineq.label, term_list(&ineq.terms), ineq.rhs);
        }
        for cone in &self.cones {
            let names: Vec<&str> = [cone.u, cone.w]
                .iter()
                .chain(&cone.squares)
                .map(|v| self.variables[v.0].name.as_str())
                .collect();
            let _ = writeln!(s, "cone: {}", names.join(" "));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure(String),
}

/// Worst-case constraint residuals of a returned primal/dual pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktResiduals {
    /// Largest `|a·x - b|` over equalities.
    pub equality: f64,
    /// Largest violation of inequalities and variable bounds.
    pub inequality: f64,
    /// Largest `Σ s² - u·w` over cones (0 if all satisfied).
    pub cone: f64,
    /// Solver-reported scaled residuals and duality gap.
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    /// ∂objective/∂rhs, aligned with [`ConicProgram::equalities`].
    pub equality_duals: Vec<f64>,
    /// ∂objective/∂rhs, aligned with [`ConicProgram::inequalities`].
    pub inequality_duals: Vec<f64>,
    pub objective_value: f64,
    pub iterations: u32,
    pub residuals: KktResiduals,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.primal[v.0]
    }

    pub fn dual(&self, program: &ConicProgram, label: &str) -> Option<f64> {
        program.equality_index(label).map(|k| self.equality_duals[k])
    }

    pub fn inequality_dual(&self, program: &ConicProgram, label: &str) -> Option<f64> {
        program.inequality_index(label).map(|k| self.inequality_duals[k])
    }

    /// Objective recomputed from the primal values.
    pub fn recompute_objective(&self, program: &ConicProgram) -> f64 {
        let (terms, constant) = program.objective();
        terms.iter().map(|(v, c)| c * self.primal[v.0]).sum::<f64>() + constant
    }
}

/// Column-wise sparse accumulator for the constraint matrix.
struct SparseColumns {
    columns: Vec<Vec<(usize, f64)>>,
    rows: usize,
}

impl SparseColumns {
    fn new(n: usize) -> Self {
        Self { columns: vec![Vec::new(); n], rows: 0 }
    }

    fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (col, val) in entries {
            if val != 0.0 {
                self.columns[col].push((self.rows, val));
            }
        }
        self.rows += 1;
    }

    fn into_csc(self) -> CscMatrix<f64> {
        let n = self.columns.len();
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for mut col in self.columns {
            col.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (r, v) in col {
                if last == Some(r) {
                    *nzval.last_mut().unwrap() += v;
                } else {
                    rowval.push(r);
                    nzval.push(v);
                    last = Some(r);
                }
            }
            colptr.push(rowval.len());
        }
        CscMatrix::new(self.rows, n, colptr, rowval, nzval)
    }
}

fn dot(terms: &Terms, x: &[f64]) -> f64 {
    terms.iter().map(|(v, c)| c * x[v.0]).sum()
}

/// Solves `program` with the embedded interior-point method.
pub fn solve(program: &ConicProgram, options: &SolveOptions) -> Result<ConicSolution, SolveError> {
    let n = program.variables.len();
    let mut a = SparseColumns::new(n);
    let mut b = Vec::new();
    let mut cones = Vec::new();

    for eq in &program.equalities {
        a.push_row(eq.terms.iter().map(|(v, c)| (v.0, *c)));
        b.push(eq.rhs);
    }
    if !program.equalities.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(program.equalities.len()));
    }

    // Nonnegative block: a·x + s = b, s ≥ 0.
    let mut nonneg = 0;
    for ineq in &program.inequalities {
        let sign = match ineq.sense {
            Sense::Le => 1.0,
            Sense::Ge => -1.0,
        };
        a.push_row(ineq.terms.iter().map(|(v, c)| (v.0, sign * c)));
        b.push(sign * ineq.rhs);
        nonneg += 1;
    }
    for (k, var) in program.variables.iter().enumerate() {
        if let Some(lb) = var.lower.filter(|v| v.is_finite()) {
            a.push_row([(k, -1.0)]);
            b.push(-lb);
            nonneg += 1;
        }
        if let Some(ub) = var.upper.filter(|v| v.is_finite()) {
            a.push_row([(k, 1.0)]);
            b.push(ub);
            nonneg += 1;
        }
    }
    if nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(nonneg));
    }

    // u·w ≥ |z|²  ⇔  ‖(u − w, 2z)‖ ≤ u + w
    for cone in &program.cones {
        a.push_row([(cone.u.0, -1.0), (cone.w.0, -1.0)]);
        a.push_row([(cone.u.0, -1.0), (cone.w.0, 1.0)]);
        b.push(0.0);
        b.push(0.0);
        for s in &cone.squares {
            a.push_row([(s.0, -2.0)]);
            b.push(0.0);
        }
        cones.push(SupportedConeT::SecondOrderConeT(2 + cone.squares.len()));
    }

    let mut q = vec![0.0; n];
    for (v, c) in &program.objective {
        q[v.0] += c;
    }
    let p = CscMatrix::new(n, n, vec![0; n + 1], Vec::new(), Vec::new());
    let a = a.into_csc();

    // The solver's scaled stopping criteria are looser than the unscaled
    // residuals checked here, so it runs two orders tighter than `tol`.
    let inner_tol = (options.tol * 1e-2).max(1e-14);
    let mut last = None;
    for fallback in 0..FALLBACKS {
        let mut builder = DefaultSettingsBuilder::default();
        builder
            .verbose(false)
            .max_iter(options.max_iter)
            .tol_gap_abs(inner_tol)
            .tol_gap_rel(inner_tol)
            .tol_feas(inner_tol)
            .max_threads(1);
        match fallback {
            0 => {}
            1 => {
                builder
                    .static_regularization_constant(1e-10)
                    .iterative_refinement_reltol(1e-14)
                    .iterative_refinement_abstol(1e-14)
                    .iterative_refinement_max_iter(50);
            }
            2 => {
                builder.equilibrate_enable(false);
            }
            _ => {
                builder.max_step_fraction(0.9).presolve_enable(false);
            }
        }
        let settings = builder.build().map_err(|e| SolveError::Setup(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| SolveError::Setup(format!("{e:?}")))?;
        solver.solve();
        let out = unpack(program, options, &solver.solution);
        if !matches!(out.status, SolveStatus::NumericalFailure(_)) {
            return Ok(out);
        }
        last = Some(out);
    }
    Ok(last.expect("at least one attempt"))
}

/// Settings variants tried in turn while the solver fails numerically.
const FALLBACKS: usize = 4;

fn unpack(program: &ConicProgram, options: &SolveOptions, sol: &DefaultSolution<f64>) -> ConicSolution {
    let mut status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        other => SolveStatus::NumericalFailure(format!(
            "{other:?} after {} iterations (primal residual {:e}, dual residual {:e})",
            sol.iterations, sol.r_prim, sol.r_dual
        )),
    };

    let x = sol.x.clone();
    let m_eq = program.equalities.len();
    let equality_duals = sol.z[..m_eq].iter().map(|z| -z).collect();
    let inequality_duals = program
        .inequalities
        .iter()
        .enumerate()
        .map(|(k, ineq)| match ineq.sense {
            Sense::Le => -sol.z[m_eq + k],
            Sense::Ge => sol.z[m_eq + k],
        })
        .collect();

    let mut residuals = KktResiduals {
        primal: sol.r_prim,
        dual: sol.r_dual,
        gap: (sol.obj_val - sol.obj_val_dual).abs(),
        ..Default::default()
    };
    for eq in &program.equalities {
        residuals.equality = residuals.equality.max((dot(&eq.terms, &x) - eq.rhs).abs());
    }
    for ineq in &program.inequalities {
        let lhs = dot(&ineq.terms, &x);
        let viol = match ineq.sense {
            Sense::Le => lhs - ineq.rhs,
            Sense::Ge => ineq.rhs - lhs,
        };
        residuals.inequality = residuals.inequality.max(viol);
    }
    for (k, var) in program.variables.iter().enumerate() {
        if let Some(lb) = var.lower {
            residuals.inequality = residuals.inequality.max(lb - x[k]);
        }
        if let Some(ub) = var.upper {
            residuals.inequality = residuals.inequality.max(x[k] - ub);
        }
    }
    for cone in &program.cones {
        let sq: f64 = cone.squares.iter().map(|s| x[s.0] * x[s.0]).sum();
        residuals.cone = residuals.cone.max(sq - x[cone.u.0] * x[cone.w.0]);
    }
    // Stalling just short of the inner tolerance is accepted when the
    // unscaled residuals stay within a hundredfold of the caller's.
    if sol.status == SolverStatus::AlmostSolved {
        let t = options.tol * 1e2;
        let rel_gap = residuals.gap / sol.obj_val.abs().max(1.0);
        if residuals.equality <= t && residuals.inequality <= t && residuals.cone <= t && sol.r_dual <= t && rel_gap <= t
        {
            status = SolveStatus::Optimal;
        } else {
            status = SolveStatus::NumericalFailure(format!(
                "AlmostSolved after {} iterations (equality {:e}, inequality {:e}, cone {:e}, dual {:e}, gap {:e})",
                sol.iterations, residuals.equality, residuals.inequality, residuals.cone, sol.r_dual, rel_gap
            ));
        }
    }

    ConicSolution {
        status,
        objective_value: sol.obj_val + program.objective_constant,
        primal: x,
        equality_duals,
        inequality_duals,
        iterations: sol.iterations,
        residuals,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DualCheckError {
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("{which} program is not optimal: {status:?}")]
    NotOptimal { which: &'static str, status: SolveStatus },
}

/// `|dual − (obj(rhs+eps) − obj(rhs−eps)) / 2eps|` for equality `label`.
pub fn dual_sign_check(
    program: &ConicProgram,
    label: &str,
    eps: f64,
    options: &SolveOptions,
) -> Result<f64, DualCheckError> {
    let base = solve(program, options)?;
    if !base.is_optimal() {
        return Err(DualCheckError::NotOptimal { which: "base", status: base.status });
    }
    let dual = base
        .dual(program, label)
        .ok_or_else(|| ProgramError::UnknownLabel(label.to_string()))?;
    let up = solve(&program.with_rhs_shift(label, eps)?, options)?;
    if !up.is_optimal() {
        return Err(DualCheckError::NotOptimal { which: "rhs + eps", status: up.status });
    }
    let down = solve(&program.with_rhs_shift(label, -eps)?, options)?;
    if !down.is_optimal() {
        return Err(DualCheckError::NotOptimal { which: "rhs - eps", status: down.status });
    }
    let fd = (up.objective_value - down.objective_value) / (2.0 * eps);
    Ok((dual - fd).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    #[test]
    fn single_equality_dual_is_objective_gradient() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x", None, None).unwrap();
        p.set_objective(vec![(x, 1.0)], 0.0).unwrap();
        p.add_equality("fix", vec![(x, 1.0)], 3.0).unwrap();
        let s = solve(&p, &opts()).unwrap();
        assert!(s.is_optimal());
        assert!((s.value(x) - 3.0).abs() < 1e-8);
        assert!((s.dual(&p, "fix").unwrap() - 1.0).abs() < 1e-8);
        let r = dual_sign_check(&p, "fix", 1e-4, &opts()).unwrap();
        assert!(r <= 1e-8, "{r}");
    }

    /// min u + w on u·w ≥ 1: by AM-GM, u + w ≥ 2√(uw) ≥ 2 with equality at u = w = 1.
    fn am_gm() -> (ConicProgram, VarId, VarId) {
        let mut p = ConicProgram::new();
        let u = p.add_var("u", Some(0.0), None).unwrap();
        let w = p.add_var("w", Some(0.0), None).unwrap();
        let one = p.add_var("one", None, None).unwrap();
        p.add_equality("one", vec![(one, 1.0)], 1.0).unwrap();
        p.add_rotated_cone("uw", u, w, vec![one]).unwrap();
        p.set_objective(vec![(u, 1.0), (w, 1.0)], 0.0).unwrap();
        (p, u, w)
    }

    #[test]
    fn rotated_cone_am_gm() {
        let (p, u, w) = am_gm();
        let s = solve(&p, &opts()).unwrap();
        assert!(s.is_optimal());
        assert!((s.value(u) - 1.0).abs() < 1e-6);
        assert!((s.value(w) - 1.0).abs() < 1e-6);
        assert!((s.objective_value - 2.0).abs() < 1e-7);
        assert!(s.residuals.cone <= 1e-8);
    }

    #[test]
    fn rotated_cone_dual_matches_finite_difference() {
        // With u pinned to 1 the optimum is w = s², objective 1 + s², d/ds = 2s = 2.
        let (mut p, u, _) = am_gm();
        p.add_equality("pin_u", vec![(u, 1.0)], 1.0).unwrap();
        let r = dual_sign_check(&p, "one", 1e-4, &opts()).unwrap();
        assert!(r <= 1e-4, "{r}");
        let s = solve(&p, &opts()).unwrap();
        assert!((s.dual(&p, "one").unwrap() - 2.0).abs() < 1e-5);
        // d/du of min (u + 1/u) at u = 1 is 0.
        let r = dual_sign_check(&p, "pin_u", 1e-4, &opts()).unwrap();
        assert!(r <= 1e-6, "{r}");
    }

    #[test]
    fn conflicting_equalities_are_infeasible() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x", None, None).unwrap();
        p.set_objective(vec![(x, 1.0)], 0.0).unwrap();
        p.add_equality("a", vec![(x, 1.0)], 1.0).unwrap();
        p.add_equality("b", vec![(x, 1.0)], 2.0).unwrap();
        let s = solve(&p, &opts()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unbounded_objective_is_reported() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x", None, Some(5.0)).unwrap();
        p.set_objective(vec![(x, 1.0)], 0.0).unwrap();
        let s = solve(&p, &opts()).unwrap();
        assert_eq!(s.status, SolveStatus::Unbounded);
    }

    #[test]
    fn inequality_duals_follow_rhs_convention() {
        // min -x s.t. x ≤ 2: objective −rhs, derivative −1.
        // min x s.t. x ≥ 3: objective rhs, derivative +1.
        let mut p = ConicProgram::new();
        let x = p.add_var("x", None, None).unwrap();
        let y = p.add_var("y", None, None).unwrap();
        p.set_objective(vec![(x, -1.0), (y, 1.0)], 0.5).unwrap();
        p.add_inequality("cap", vec![(x, 1.0)], Sense::Le, 2.0).unwrap();
        p.add_inequality("floor", vec![(y, 1.0)], Sense::Ge, 3.0).unwrap();
        let s = solve(&p, &opts()).unwrap();
        assert!(s.is_optimal());
        assert!((s.objective_value - 1.5).abs() < 1e-7);
        assert!((s.inequality_dual(&p, "cap").unwrap() + 1.0).abs() < 1e-7);
        assert!((s.inequality_dual(&p, "floor").unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn malformed_programs_are_rejected() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x", None, None).unwrap();
        let y = p.add_var("y", Some(0.0), None).unwrap();
        assert!(matches!(p.add_var("x", None, None), Err(ProgramError::DuplicateVariable(_))));
        p.add_equality("e", vec![(x, 1.0)], 0.0).unwrap();
        assert_eq!(
            p.add_equality("e", vec![(x, 1.0)], 0.0),
            Err(ProgramError::DuplicateLabel("e".into()))
        );
        assert_eq!(
            p.add_rotated_cone("c", x, y, vec![]),
            Err(ProgramError::ConeHeadUnbounded("c".into()))
        );
        assert!(matches!(
            p.add_equality("bad", vec![(VarId(9), 1.0)], 0.0),
            Err(ProgramError::UnknownVariable { .. })
        ));
        assert!(p.with_rhs_shift("missing", 1.0).is_err());
    }

    #[test]
    fn listing_format() {
        let (p, _, _) = am_gm();
        let text = p.to_listing();
        assert!(text.contains("one: 1·one = 1"), "{text}");
        assert!(text.contains("cone: u w one"), "{text}");
        assert!(text.contains("bound: u ≥ 0"), "{text}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        /// Random small cone programs: duals obey the envelope property and
        /// scale linearly with the objective.
        #[test]
        fn envelope_and_scaling(
            a in 0.5f64..3.0,
            b in 0.5f64..3.0,
            target in 0.5f64..2.0,
            k in 0.2f64..5.0,
        ) {
            // min a·u + b·w s.t. u·w ≥ s², s = target.
            let mut p = ConicProgram::new();
            let u = p.add_var("u", Some(0.0), None).unwrap();
            let w = p.add_var("w", Some(0.0), None).unwrap();
            let s = p.add_var("s", None, None).unwrap();
            p.add_equality("s", vec![(s, 1.0)], target).unwrap();
            p.add_rotated_cone("c", u, w, vec![s]).unwrap();
            p.set_objective(vec![(u, a), (w, b)], 0.0).unwrap();
            let base = solve(&p, &opts()).unwrap();
            proptest::prop_assert!(base.is_optimal());
            proptest::prop_assert!(base.residuals.cone <= 1e-8);
            // closed form: 2·√(ab)·s
            let expect = 2.0 * (a * b).sqrt() * target;
            proptest::prop_assert!((base.objective_value - expect).abs() < 1e-6);
            let dual = base.dual(&p, "s").unwrap();
            let r = dual_sign_check(&p, "s", 1e-4, &opts()).unwrap();
            proptest::prop_assert!(r <= f64::max(1e-4, 1e-3 * dual.abs()), "residual {}", r);

            let scaled = solve(&p.with_scaled_objective(k), &opts()).unwrap();
            proptest::prop_assert!((scaled.dual(&p, "s").unwrap() - k * dual).abs() < 1e-5 * k.max(1.0));
            proptest::prop_assert!((scaled.value(u) - base.value(u)).abs() < 1e-4 * base.value(u).max(1.0));
            proptest::prop_assert!((scaled.value(w) - base.value(w)).abs() < 1e-4 * base.value(w).max(1.0));
        }
    }
}
