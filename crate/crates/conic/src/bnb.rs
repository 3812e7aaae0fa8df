//! Best-bound branch-and-bound over binary variables.
//!
//! Child relaxations are solved when created and queued with
//! `max(parent bound, child objective)`, so the global bound never decreases.
//! Branching picks the most fractional binary, lowest index on ties; nodes
//! with equal bounds are expanded in creation order. Every incumbent comes
//! from a fix-and-solve of a fully integral assignment.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use crate::program::{ConicProgram, VarId};
use crate::{ipm, SolveResult, SolveStatus, SolverConfig};

/// Proposes a complete binary assignment from a relaxed point.
pub trait IncumbentHeuristic: Send + Sync {
    fn propose(&self, prog: &ConicProgram, relaxed: &[f64]) -> Option<Vec<(VarId, f64)>>;
}

/// Rounds every binary to the nearest integer.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestRounding;

impl IncumbentHeuristic for NearestRounding {
    fn propose(&self, prog: &ConicProgram, relaxed: &[f64]) -> Option<Vec<(VarId, f64)>> {
        Some(
            prog.binaries()
                .map(|v| (v, if relaxed[v.0] >= 0.5 { 1.0 } else { 0.0 }))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnbStats {
    /// Relaxations solved, including the root and fix-and-solve polishes.
    pub relaxations: usize,
    pub nodes: usize,
    /// `(node, objective)` at every incumbent improvement.
    pub incumbent_history: Vec<(usize, f64)>,
    /// `(node, global lower bound)` at every node expansion.
    pub bound_history: Vec<(usize, f64)>,
}

struct Node {
    bound: f64,
    id: usize,
    fixings: Vec<(VarId, f64)>,
    x: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Max-heap: the smallest bound, then the oldest node, is the greatest.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

pub struct BranchAndBound {
    cfg: SolverConfig,
    heuristic: Box<dyn IncumbentHeuristic>,
}

impl BranchAndBound {
    pub fn new(cfg: SolverConfig) -> Self {
        Self {
            cfg,
            heuristic: Box::new(NearestRounding),
        }
    }

    pub fn with_heuristic(mut self, h: Box<dyn IncumbentHeuristic>) -> Self {
        self.heuristic = h;
        self
    }

    pub fn solve(&self, prog: &ConicProgram) -> SolveResult {
        self.solve_with_stats(prog).0
    }

    pub fn solve_with_stats(&self, prog: &ConicProgram) -> (SolveResult, BnbStats) {
        let mut stats = BnbStats::default();
        if let Err(e) = self.cfg.validate() {
            log::error!("{}", e);
            return (SolveResult::without_point(SolveStatus::IterationLimit, 0), stats);
        }
        let start = Instant::now();
        let binaries: Vec<VarId> = prog.binaries().collect();
        let root = ipm::solve(prog, &self.cfg);
        stats.relaxations += 1;
        match root.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible | SolveStatus::Unbounded => return (root, stats),
            _ => {
                let mut r = root;
                r.gap = f64::INFINITY;
                return (r, stats);
            }
        }
        if binaries.is_empty() {
            stats.incumbent_history.push((0, root.objective));
            stats.bound_history.push((0, root.objective));
            return (root, stats);
        }

        let mut incumbent: Option<SolveResult> = None;
        let mut next_id = 1;
        let mut heap = BinaryHeap::new();
        // Lowest bound among subtrees that could not be solved reliably.
        let mut lost_bound = f64::INFINITY;
        let mut last_bound = f64::NEG_INFINITY;
        self.try_incumbent(prog, &root.x, &mut incumbent, &mut stats);
        heap.push(Node {
            bound: root.objective,
            id: 0,
            fixings: Vec::new(),
            x: root.x,
        });

        let mut hit_limit = false;
        while let Some(top) = heap.peek() {
            let lb = top.bound.min(lost_bound);
            if let Some(inc) = &incumbent {
                if self.gap_closed(inc.objective, lb) {
                    break;
                }
            }
            if stats.nodes >= self.cfg.node_limit
                || self.cfg.time_limit.map_or(false, |t| start.elapsed() >= t)
            {
                hit_limit = true;
                break;
            }
            let node = heap.pop().expect("peeked");
            stats.nodes += 1;
            last_bound = last_bound.max(lb);
            stats.bound_history.push((stats.nodes, last_bound));
            if let Some(inc) = &incumbent {
                if node.bound >= inc.objective - self.abs_tol(inc.objective) {
                    continue;
                }
            }
            let branch = most_fractional(&binaries, &node.x, self.cfg.int_tol);
            let Some(var) = branch else {
                // Integral relaxation: polish it into an exact incumbent.
                self.try_incumbent(prog, &node.x, &mut incumbent, &mut stats);
                continue;
            };
            if self.cfg.heuristic_every > 0 && stats.nodes % self.cfg.heuristic_every == 0 {
                self.try_incumbent(prog, &node.x, &mut incumbent, &mut stats);
            }
            let down_first = node.x[var.0] < 0.5;
            let order = if down_first { [0.0, 1.0] } else { [1.0, 0.0] };
            for val in order {
                let mut fixings = node.fixings.clone();
                fixings.push((var, val));
                let child = prog.with_fixed(&fixings);
                let res = ipm::solve(&child, &self.cfg);
                stats.relaxations += 1;
                match res.status {
                    SolveStatus::Optimal => {
                        let bound = node.bound.max(res.objective);
                        let keep = incumbent
                            .as_ref()
                            .map_or(true, |inc| bound < inc.objective - self.abs_tol(inc.objective));
                        if keep {
                            heap.push(Node {
                                bound,
                                id: next_id,
                                fixings,
                                x: res.x,
                            });
                            next_id += 1;
                        }
                    }
                    SolveStatus::Infeasible => {}
                    other => {
                        log::warn!("node relaxation ended with status {}; subtree dropped", other);
                        lost_bound = lost_bound.min(node.bound);
                    }
                }
            }
        }

        let open_bound = heap.peek().map_or(f64::INFINITY, |n| n.bound).min(lost_bound);
        let result = match incumbent {
            Some(mut inc) => {
                let lb = open_bound.min(inc.objective);
                inc.bound = lb;
                inc.gap = relative_gap(inc.objective, lb, self.cfg.mip_abs_gap);
                inc.nodes = stats.nodes;
                inc.status = if hit_limit && inc.gap > self.cfg.mip_gap {
                    SolveStatus::GapLimit
                } else {
                    SolveStatus::Optimal
                };
                inc
            }
            None if hit_limit || lost_bound.is_finite() => {
                let mut r = SolveResult::without_point(SolveStatus::GapLimit, 0);
                r.bound = open_bound;
                r.nodes = stats.nodes;
                r
            }
            None => {
                let mut r = SolveResult::without_point(SolveStatus::Infeasible, 0);
                r.nodes = stats.nodes;
                r
            }
        };
        (result, stats)
    }

    fn abs_tol(&self, inc: f64) -> f64 {
        self.cfg.mip_abs_gap.max(1e-12 * inc.abs())
    }

    fn gap_closed(&self, inc: f64, lb: f64) -> bool {
        inc - lb <= self.cfg.mip_abs_gap || relative_gap(inc, lb, self.cfg.mip_abs_gap) <= self.cfg.mip_gap
    }

    fn try_incumbent(
        &self,
        prog: &ConicProgram,
        relaxed: &[f64],
        incumbent: &mut Option<SolveResult>,
        stats: &mut BnbStats,
    ) {
        let Some(assign) = self.heuristic.propose(prog, relaxed) else {
            return;
        };
        let fixed = prog.with_fixed(&assign);
        let res = ipm::solve(&fixed, &self.cfg);
        stats.relaxations += 1;
        if res.status != SolveStatus::Optimal {
            return;
        }
        // The fixed program is a restriction of the original, so its point is feasible for it.
        let better = incumbent.as_ref().map_or(true, |inc| res.objective < inc.objective);
        if better {
            log::debug!("incumbent {:.9e} at node {}", res.objective, stats.nodes);
            stats.incumbent_history.push((stats.nodes, res.objective));
            let mut res = res;
            res.max_residual = prog.residuals(&res.x).max();
            *incumbent = Some(res);
        }
    }
}

fn most_fractional(binaries: &[VarId], x: &[f64], tol: f64) -> Option<VarId> {
    let mut best: Option<(VarId, f64)> = None;
    for &v in binaries {
        let frac = (x[v.0] - x[v.0].round()).abs();
        if frac > tol && best.map_or(true, |(_, f)| frac > f + 1e-12) {
            best = Some((v, frac));
        }
    }
    best.map(|b| b.0)
}

/// `(incumbent − bound) / |incumbent|`, zero once the absolute gap is closed.
fn relative_gap(inc: f64, lb: f64, abs_gap: f64) -> f64 {
    let diff = (inc - lb).max(0.0);
    if diff <= abs_gap {
        0.0
    } else {
        diff / inc.abs().max(1e-10)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_order_is_best_bound_then_oldest() {
        let mut h = BinaryHeap::new();
        for (bound, id) in [(2.0, 0), (1.0, 2), (1.0, 1), (3.0, 3)] {
            h.push(Node { bound, id, fixings: vec![], x: vec![] });
        }
        let order: Vec<usize> = std::iter::from_fn(|| h.pop().map(|n| n.id)).collect();
        assert_eq!(order, vec![1, 2, 0, 3]);
    }

    #[test]
    fn most_fractional_breaks_ties_by_index() {
        let b = [VarId(0), VarId(1), VarId(2)];
        assert_eq!(most_fractional(&b, &[0.3, 0.7, 0.5], 1e-6), Some(VarId(2)));
        assert_eq!(most_fractional(&b, &[0.3, 0.7, 1.0], 1e-6), Some(VarId(0)));
        assert_eq!(most_fractional(&b, &[0.0, 1.0, 1.0], 1e-6), None);
    }

    #[test]
    fn gap_is_zero_within_absolute_tolerance() {
        assert_eq!(relative_gap(0.0, -1e-12, 1e-9), 0.0);
        assert!((relative_gap(100.0, 99.0, 1e-9) - 0.01).abs() < 1e-12);
    }
}
