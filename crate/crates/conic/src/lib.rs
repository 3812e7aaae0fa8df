//! Second-order cone programming: a sealed problem representation, a
//! homogeneous-embedding interior-point solver with Nesterov–Todd scaling,
//! and a deterministic branch-and-bound layer for binary variables.
//!
//! ```
//! use pvm_conic::{ProgramBuilder, LinExpr, SolverConfig, SolveStatus, solve_relaxation};
//!
//! let mut b = ProgramBuilder::new();
//! let t = b.add_free("t");
//! b.add_soc(LinExpr::var(t), vec![LinExpr::constant(3.0), LinExpr::constant(4.0)]);
//! b.add_objective_term(t, 1.0);
//! let prog = b.seal().unwrap();
//! let res = solve_relaxation(&prog, &SolverConfig::default());
//! assert_eq!(res.status, SolveStatus::Optimal);
//! assert!((res.objective - 5.0).abs() < 1e-7);
//! ```

mod bnb;
mod cones;
mod ipm;
mod ldl;
mod presolve;
mod program;
mod scaling;

use std::time::Duration;

use thiserror::Error;

pub use bnb::{BranchAndBound, BnbStats, IncumbentHeuristic, NearestRounding};
pub use program::{ConeRow, ConicProgram, LinExpr, LinRow, ProgramBuilder, Residuals, VarId, Variable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("{context} references undeclared variable x{var}")]
    UnknownVariable { var: usize, context: String },
    #[error("variable x{var} has lower bound {lower} above upper bound {upper}")]
    InvalidBounds { var: usize, lower: f64, upper: f64 },
    #[error("binary variable x{0} must have bounds within [0, 1]")]
    BinaryBounds(usize),
    #[error("non-finite coefficient in {0}")]
    NonFinite(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    GapLimit,
    IterationLimit,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::GapLimit => "gap-limit",
            SolveStatus::IterationLimit => "iteration-limit",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How big-M constants are chosen by model builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BigMPolicy {
    /// Tightest constant implied by the variable bounds of the gated quantity.
    FromBounds,
    /// The implied constant multiplied by a safety factor ≥ 1.
    Scaled(f64),
}

impl BigMPolicy {
    pub fn apply(&self, implied: f64) -> f64 {
        match *self {
            BigMPolicy::FromBounds => implied,
            BigMPolicy::Scaled(k) => implied * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Relative primal/dual residual tolerance of the interior-point method.
    pub feas_tol: f64,
    /// Tolerance on cone membership of the returned point.
    pub cone_tol: f64,
    /// Relative duality-gap tolerance of the interior-point method.
    pub ipm_gap_tol: f64,
    /// Relative MIP gap at which branch-and-bound stops.
    pub mip_gap: f64,
    /// Absolute MIP gap; stops when incumbent − bound falls below it.
    pub mip_abs_gap: f64,
    pub max_iter: usize,
    pub node_limit: usize,
    pub time_limit: Option<Duration>,
    pub big_m: BigMPolicy,
    /// Tolerance used to decide whether a relaxed binary is integral.
    pub int_tol: f64,
    /// Run the incumbent heuristic every this many nodes (0 = root only).
    pub heuristic_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            cone_tol: 1e-8,
            ipm_gap_tol: 1e-8,
            mip_gap: 1e-3,
            mip_abs_gap: 1e-9,
            max_iter: 200,
            node_limit: 10_000,
            time_limit: None,
            big_m: BigMPolicy::FromBounds,
            int_tol: 1e-6,
            heuristic_every: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), ConicError> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConicError::InvalidConfig(format!("{} must be positive, got {}", name, v)))
            }
        };
        pos(self.feas_tol, "feas_tol")?;
        pos(self.cone_tol, "cone_tol")?;
        pos(self.ipm_gap_tol, "ipm_gap_tol")?;
        pos(self.int_tol, "int_tol")?;
        if !(self.mip_gap > 0.0 && self.mip_gap < 1.0) {
            return Err(ConicError::InvalidConfig(format!(
                "mip_gap must lie in (0, 1), got {}",
                self.mip_gap
            )));
        }
        if self.mip_abs_gap < 0.0 {
            return Err(ConicError::InvalidConfig("mip_abs_gap must be non-negative".into()));
        }
        if let BigMPolicy::Scaled(k) = self.big_m {
            if !(k >= 1.0 && k.is_finite()) {
                return Err(ConicError::InvalidConfig(format!("big-M scale must be >= 1, got {}", k)));
            }
        }
        if self.max_iter == 0 || self.node_limit == 0 {
            return Err(ConicError::InvalidConfig("iteration and node limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Objective at `x`; `+∞` when no point is available.
    pub objective: f64,
    /// Primal assignment indexed by [`VarId`]; empty when no point is available.
    pub x: Vec<f64>,
    /// Relative MIP gap (zero for continuous solves that reached optimality).
    pub gap: f64,
    /// Best proven lower bound on the optimum.
    pub bound: f64,
    /// Largest violation found by re-evaluating `x` against the original program.
    pub max_residual: f64,
    pub iterations: usize,
    pub nodes: usize,
}

impl SolveResult {
    pub(crate) fn without_point(status: SolveStatus, iterations: usize) -> Self {
        Self {
            status,
            objective: f64::INFINITY,
            x: Vec::new(),
            gap: f64::INFINITY,
            bound: f64::NEG_INFINITY,
            max_residual: f64::INFINITY,
            iterations,
            nodes: 0,
        }
    }

    pub fn has_point(&self) -> bool {
        !self.x.is_empty()
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.x[v.0]
    }
}

/// Solver backend contract. Binaries are ignored by `solve_relaxation`.
pub trait ConicBackend: Send + Sync {
    fn solve_relaxation(&self, prog: &ConicProgram, cfg: &SolverConfig) -> SolveResult;
    fn solve_misocp(&self, prog: &ConicProgram, cfg: &SolverConfig) -> SolveResult;
}

/// The bundled interior-point and branch-and-bound implementation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceBackend;

impl ConicBackend for ReferenceBackend {
    fn solve_relaxation(&self, prog: &ConicProgram, cfg: &SolverConfig) -> SolveResult {
        solve_relaxation(prog, cfg)
    }

    fn solve_misocp(&self, prog: &ConicProgram, cfg: &SolverConfig) -> SolveResult {
        solve_misocp(prog, cfg)
    }
}

/// Solves the continuous relaxation (binaries treated as [0,1] variables).
pub fn solve_relaxation(prog: &ConicProgram, cfg: &SolverConfig) -> SolveResult {
    if let Err(e) = cfg.validate() {
        log::error!("{}", e);
        return SolveResult::without_point(SolveStatus::IterationLimit, 0);
    }
    ipm::solve(prog, cfg)
}

/// Branch-and-bound over binaries with nearest-rounding incumbents.
pub fn solve_misocp(prog: &ConicProgram, cfg: &SolverConfig) -> SolveResult {
    BranchAndBound::new(cfg.clone()).solve(prog)
}
