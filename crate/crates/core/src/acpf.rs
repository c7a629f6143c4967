//! Power-flow numerics: injections, mismatch residuals, the merit function,
//! the analytic polar-form Jacobian, and a dense Newton-Raphson solver used
//! to produce reference solutions.
//!
//! Sign conventions: injections are `S = V ∘ conj(Y·V)` (generation positive,
//! load negative); residuals are `setpoint − computed`; the Newton step is
//! `x ← x + J⁻¹ r`, which decreases the mismatch.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{AdmittanceMatrix, BusType, Grid};

#[derive(Debug, Error)]
pub enum AcpfError {
    #[error("non-finite state at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("dimension mismatch: state has {state} buses, matrix has {matrix}")]
    Dimension { state: usize, matrix: usize },
}

/// Per-bus voltage magnitudes (p.u.) and angles (rad).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl State {
    pub fn n(&self) -> usize {
        self.v.len()
    }

    /// Initial profile: slack/PV magnitudes at their setpoints, PQ at 1.0,
    /// slack angle at its setpoint, all other angles zero.
    pub fn flat_start(grid: &Grid) -> State {
        let v = grid
            .buses
            .iter()
            .map(|b| match b.kind {
                BusType::Slack | BusType::Pv => b.v_set,
                BusType::Pq => 1.0,
            })
            .collect();
        let theta = grid
            .buses
            .iter()
            .map(|b| match b.kind {
                BusType::Slack => b.theta_set,
                _ => 0.0,
            })
            .collect();
        State { v, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.theta.iter()).all(|x| x.is_finite())
    }
}

/// Power mismatches with their per-bus validity masks.
///
/// `dp` is defined on PV and PQ buses, `dq` on PQ buses; masked-out entries
/// are exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
    pub p_mask: Vec<bool>,
    pub q_mask: Vec<bool>,
}

/// How a Newton-Raphson run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    SingularJacobian,
}

/// Outcome of one reference solve.
///
/// `wall_time` is a live measurement; scenario files store it zeroed so that
/// serialized datasets are byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_merit: f64,
    pub wall_time: f64,
    pub termination: Termination,
    pub merit_history: Vec<f64>,
}

/// Unknown ordering of the reduced system: angles at PV∪PQ buses first,
/// then magnitudes at PQ buses. Equation rows follow the same bus order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownIndex {
    pub theta_buses: Vec<usize>,
    pub v_buses: Vec<usize>,
}

impl UnknownIndex {
    pub fn from_types(kinds: &[BusType]) -> UnknownIndex {
        let theta_buses = kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| !matches!(k, BusType::Slack))
            .map(|(i, _)| i)
            .collect();
        let v_buses = kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| matches!(k, BusType::Pq))
            .map(|(i, _)| i)
            .collect();
        UnknownIndex {
            theta_buses,
            v_buses,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_buses.len() + self.v_buses.len()
    }
}

/// Reduced real Jacobian of the computed injections with block layout
/// `[[∂P/∂θ, ∂P/∂V], [∂Q/∂θ, ∂Q/∂V]]` restricted to unknown columns and
/// mismatch equation rows.
#[derive(Debug, Clone)]
pub struct ReducedJacobian {
    pub matrix: DMatrix<f64>,
    pub index: UnknownIndex,
}

/// Active and reactive injections `p = Re(S)`, `q = Im(S)` with
/// `S_i = V_i e^{jθ_i} · conj(Σ_k Y_ik V_k e^{jθ_k})`, evaluated over the
/// structural nonzeros of `Y`.
pub fn compute_injections(y: &AdmittanceMatrix, state: &State) -> (Vec<f64>, Vec<f64>) {
    let n = y.n();
    debug_assert_eq!(state.n(), n);
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for &(i, k, g, b) in y.nonzeros() {
        let vik = state.v[i] * state.v[k];
        let (s, c) = (state.theta[i] - state.theta[k]).sin_cos();
        p[i] += vik * (g * c + b * s);
        q[i] += vik * (g * s - b * c);
    }
    (p, q)
}

/// Mismatch residuals `setpoint − computed`, zero outside each mask.
pub fn compute_residuals(grid: &Grid, y: &AdmittanceMatrix, state: &State) -> Residual {
    let (p, q) = compute_injections(y, state);
    let mut dp = vec![0.0; grid.n()];
    let mut dq = vec![0.0; grid.n()];
    let mut p_mask = vec![false; grid.n()];
    let mut q_mask = vec![false; grid.n()];
    for (i, bus) in grid.buses.iter().enumerate() {
        match bus.kind {
            BusType::Slack => {}
            BusType::Pv => {
                dp[i] = bus.p_set - p[i];
                p_mask[i] = true;
            }
            BusType::Pq => {
                dp[i] = bus.p_set - p[i];
                dq[i] = bus.q_set - q[i];
                p_mask[i] = true;
                q_mask[i] = true;
            }
        }
    }
    Residual {
        dp,
        dq,
        p_mask,
        q_mask,
    }
}

/// Merit function `F = max(‖ΔP‖∞, ‖ΔQ‖∞)` over masked entries; zero when
/// there are no unknowns.
pub fn merit(residual: &Residual) -> f64 {
    let p_max = residual
        .dp
        .iter()
        .zip(&residual.p_mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| x.abs())
        .fold(0.0, f64::max);
    let q_max = residual
        .dq
        .iter()
        .zip(&residual.q_mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| x.abs())
        .fold(0.0, f64::max);
    p_max.max(q_max)
}

/// Merit evaluated directly from a candidate `(v, θ)` pair.
pub fn merit_of(grid: &Grid, y: &AdmittanceMatrix, v: &[f64], theta: &[f64]) -> f64 {
    let state = State {
        v: v.to_vec(),
        theta: theta.to_vec(),
    };
    merit(&compute_residuals(grid, y, &state))
}

/// Analytic reduced Jacobian in polar form.
pub fn assemble_jacobian(
    y: &AdmittanceMatrix,
    state: &State,
    kinds: &[BusType],
) -> ReducedJacobian {
    let n = y.n();
    let index = UnknownIndex::from_types(kinds);
    let (p, q) = compute_injections(y, state);

    // Position of each bus within the unknown orderings.
    let mut theta_pos = vec![usize::MAX; n];
    for (c, &bus) in index.theta_buses.iter().enumerate() {
        theta_pos[bus] = c;
    }
    let mut v_pos = vec![usize::MAX; n];
    for (c, &bus) in index.v_buses.iter().enumerate() {
        v_pos[bus] = c;
    }
    let n_th = index.theta_buses.len();
    let n_v = index.v_buses.len();
    let dim = n_th + n_v;
    let mut m = DMatrix::zeros(dim, dim);

    // Equation rows: ΔP rows reuse the θ ordering, ΔQ rows the V ordering.
    let p_row = &theta_pos;
    let q_row = &v_pos;

    for &(i, k, g, b) in y.nonzeros() {
        if i == k {
            continue;
        }
        let vik = state.v[i] * state.v[k];
        let (s, c) = (state.theta[i] - state.theta[k]).sin_cos();
        let dp_dth = vik * (g * s - b * c);
        let dp_dv = state.v[i] * (g * c + b * s);
        let dq_dth = -vik * (g * c + b * s);
        let dq_dv = state.v[i] * (g * s - b * c);
        if p_row[i] != usize::MAX {
            if theta_pos[k] != usize::MAX {
                m[(p_row[i], theta_pos[k])] = dp_dth;
            }
            if v_pos[k] != usize::MAX {
                m[(p_row[i], n_th + v_pos[k])] = dp_dv;
            }
        }
        if q_row[i] != usize::MAX {
            if theta_pos[k] != usize::MAX {
                m[(n_th + q_row[i], theta_pos[k])] = dq_dth;
            }
            if v_pos[k] != usize::MAX {
                m[(n_th + q_row[i], n_th + v_pos[k])] = dq_dv;
            }
        }
    }
    for i in 0..n {
        let g_ii = y.get(i, i).re;
        let b_ii = y.get(i, i).im;
        let vi = state.v[i];
        if p_row[i] != usize::MAX {
            m[(p_row[i], theta_pos[i])] = -q[i] - b_ii * vi * vi;
            if v_pos[i] != usize::MAX {
                m[(p_row[i], n_th + v_pos[i])] = p[i] / vi + g_ii * vi;
            }
        }
        if q_row[i] != usize::MAX {
            m[(n_th + q_row[i], theta_pos[i])] = p[i] - g_ii * vi * vi;
            m[(n_th + q_row[i], n_th + v_pos[i])] = q[i] / vi - b_ii * vi;
        }
    }
    ReducedJacobian { matrix: m, index }
}

/// Wrap angles into `(−π, π]`; the boundary `−π` maps to `+π`.
pub fn wrap_angle_scalar(theta: f64) -> f64 {
    use std::f64::consts::PI;
    theta - 2.0 * PI * ((theta - PI) / (2.0 * PI)).ceil()
}

/// Elementwise [`wrap_angle_scalar`].
pub fn wrap_angle(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|&t| wrap_angle_scalar(t)).collect()
}

/// Elementwise clamp of voltage magnitudes into `[v_min, v_max]`.
pub fn clip_voltage(v: &[f64], v_min: f64, v_max: f64) -> Vec<f64> {
    v.iter().map(|x| x.clamp(v_min, v_max)).collect()
}

/// Dense Newton-Raphson solve with LU-factorized steps.
///
/// Slack voltage/angle and PV magnitudes are pinned to their setpoints and
/// never enter the unknown vector. Angles are wrapped after every step.
pub fn nr_solve(
    grid: &Grid,
    y: &AdmittanceMatrix,
    state0: &State,
    tol: f64,
    max_iter: usize,
) -> Result<(State, NrReport), AcpfError> {
    let start = Instant::now();
    let n = grid.n();
    if state0.n() != n || y.n() != n {
        return Err(AcpfError::Dimension {
            state: state0.n(),
            matrix: y.n(),
        });
    }
    let kinds: Vec<BusType> = grid.buses.iter().map(|b| b.kind).collect();
    let index = UnknownIndex::from_types(&kinds);
    let mut state = state0.clone();
    for (i, bus) in grid.buses.iter().enumerate() {
        match bus.kind {
            BusType::Slack => {
                state.v[i] = bus.v_set;
                state.theta[i] = bus.theta_set;
            }
            BusType::Pv => state.v[i] = bus.v_set,
            BusType::Pq => {}
        }
    }

    let mut merit_history = Vec::with_capacity(max_iter + 1);
    let mut termination = Termination::MaxIterations;
    let mut iterations = max_iter;

    for it in 0..=max_iter {
        if !state.is_finite() {
            return Err(AcpfError::NonFinite { iteration: it });
        }
        let residual = compute_residuals(grid, y, &state);
        let f = merit(&residual);
        if !f.is_finite() {
            return Err(AcpfError::NonFinite { iteration: it });
        }
        merit_history.push(f);
        if f <= tol {
            termination = Termination::Converged;
            iterations = it;
            break;
        }
        if it == max_iter {
            break;
        }

        let dim = index.dim();
        if dim == 0 {
            // nothing to solve for, but the mismatch is above tolerance
            break;
        }
        let jac = assemble_jacobian(y, &state, &kinds);
        let mut rhs = DVector::zeros(dim);
        for (r, &bus) in index.theta_buses.iter().enumerate() {
            rhs[r] = residual.dp[bus];
        }
        for (r, &bus) in index.v_buses.iter().enumerate() {
            rhs[index.theta_buses.len() + r] = residual.dq[bus];
        }
        let Some(dx) = jac.matrix.lu().solve(&rhs) else {
            termination = Termination::SingularJacobian;
            iterations = it;
            break;
        };
        for (r, &bus) in index.theta_buses.iter().enumerate() {
            state.theta[bus] += dx[r];
        }
        for (r, &bus) in index.v_buses.iter().enumerate() {
            state.v[bus] += dx[index.theta_buses.len() + r];
        }
        state.theta = wrap_angle(&state.theta);
    }

    let final_merit = *merit_history.last().unwrap_or(&f64::INFINITY);
    let converged = termination == Termination::Converged;
    Ok((
        state,
        NrReport {
            converged,
            iterations,
            final_merit,
            wall_time: start.elapsed().as_secs_f64(),
            termination,
            merit_history,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_admittance, Bus, Grid, Line, Regime};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn bus(id: usize, kind: BusType, p: f64, q: f64, v: f64) -> Bus {
        Bus {
            id,
            kind,
            p_set: p,
            q_set: q,
            v_set: v,
            theta_set: 0.0,
        }
    }

    fn two_bus(p_set: f64, q_set: f64, b_shunt: f64) -> (Grid, AdmittanceMatrix) {
        let grid = Grid {
            buses: vec![
                bus(0, BusType::Slack, 0.0, 0.0, 1.0),
                bus(1, BusType::Pq, p_set, q_set, 1.0),
            ],
            lines: vec![Line {
                from: 0,
                to: 1,
                r_series: 0.0,
                x_series: 0.1,
                b_shunt_total: b_shunt,
            }],
            v_base: 110e3,
            s_base: 100e6,
            regime: Regime::Hv,
        };
        let y = build_admittance(&grid).unwrap();
        (grid, y)
    }

    /// Four buses, one of each kind plus an extra PQ, lightly meshed.
    fn four_bus() -> (Grid, AdmittanceMatrix) {
        let grid = Grid {
            buses: vec![
                bus(0, BusType::Slack, 0.0, 0.0, 1.02),
                bus(1, BusType::Pv, 0.4, 0.0, 1.01),
                bus(2, BusType::Pq, -0.6, -0.25, 1.0),
                bus(3, BusType::Pq, -0.3, 0.1, 1.0),
            ],
            lines: vec![
                Line {
                    from: 0,
                    to: 1,
                    r_series: 0.02,
                    x_series: 0.12,
                    b_shunt_total: 0.03,
                },
                Line {
                    from: 1,
                    to: 2,
                    r_series: 0.04,
                    x_series: 0.18,
                    b_shunt_total: 0.02,
                },
                Line {
                    from: 2,
                    to: 3,
                    r_series: 0.03,
                    x_series: 0.15,
                    b_shunt_total: 0.025,
                },
                Line {
                    from: 0,
                    to: 3,
                    r_series: 0.025,
                    x_series: 0.2,
                    b_shunt_total: 0.01,
                },
            ],
            v_base: 110e3,
            s_base: 100e6,
            regime: Regime::Hv,
        };
        let y = build_admittance(&grid).unwrap();
        (grid, y)
    }

    #[test]
    fn injections_flat_shuntless() {
        let (_, y) = two_bus(0.0, 0.0, 0.0);
        let state = State {
            v: vec![1.0, 1.0],
            theta: vec![0.0, 0.0],
        };
        let (p, q) = compute_injections(&y, &state);
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn injections_flat_with_charging() {
        // At flat voltage the line charging produces vars the buses must
        // absorb: S = V ∘ conj(Y·V) gives q = -b/2 at each end.
        let (_, y) = two_bus(0.0, 0.0, 0.02);
        let state = State {
            v: vec![1.0, 1.0],
            theta: vec![0.0, 0.0],
        };
        let (p, q) = compute_injections(&y, &state);
        assert_relative_eq!(p[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(q[0], -0.01, max_relative = 1e-12);
        assert_relative_eq!(q[1], -0.01, max_relative = 1e-12);
    }

    #[test]
    fn injections_angle_difference() {
        let (_, y) = two_bus(0.0, 0.0, 0.0);
        let state = State {
            v: vec![1.0, 1.0],
            theta: vec![0.0, -0.1],
        };
        let (p, _) = compute_injections(&y, &state);
        // p1 = B12·sin(0.1) = 10·sin(0.1)
        assert_relative_eq!(p[0], 10.0 * 0.1_f64.sin(), max_relative = 1e-12);
        assert_relative_eq!(p[1], -10.0 * 0.1_f64.sin(), max_relative = 1e-12);
    }

    #[test]
    fn residuals_flat_start() {
        let (grid, y) = two_bus(-0.5, 0.0, 0.0);
        let state = State::flat_start(&grid);
        let r = compute_residuals(&grid, &y, &state);
        assert_eq!(r.dp, vec![0.0, -0.5]);
        assert_eq!(r.dq, vec![0.0, 0.0]);
        assert!(!r.p_mask[0] && r.p_mask[1]);
    }

    #[test]
    fn residuals_slack_only() {
        let grid = Grid {
            buses: vec![bus(0, BusType::Slack, 0.0, 0.0, 1.0)],
            lines: vec![],
            v_base: 10e3,
            s_base: 10e6,
            regime: Regime::Mv,
        };
        let y = build_admittance(&grid).unwrap();
        let state = State::flat_start(&grid);
        let r = compute_residuals(&grid, &y, &state);
        assert_eq!(r.dp, vec![0.0]);
        assert_eq!(r.dq, vec![0.0]);
        assert_eq!(merit(&r), 0.0);
    }

    #[test]
    fn merit_is_masked_inf_norm() {
        let r = Residual {
            dp: vec![0.0, -0.5],
            dq: vec![0.0, 0.0],
            p_mask: vec![false, true],
            q_mask: vec![false, true],
        };
        assert_eq!(merit(&r), 0.5);
        let r2 = Residual {
            dp: vec![0.0, 0.1],
            dq: vec![0.0, -0.3],
            p_mask: vec![false, true],
            q_mask: vec![false, true],
        };
        assert_eq!(merit(&r2), 0.3);
    }

    #[test]
    fn jacobian_two_bus_h_block() {
        let (grid, y) = two_bus(-0.5, -0.2, 0.0);
        let state = State::flat_start(&grid);
        let kinds: Vec<BusType> = grid.buses.iter().map(|b| b.kind).collect();
        let jac = assemble_jacobian(&y, &state, &kinds);
        // H = ∂P₂/∂θ₂ = -Q₂ - B₂₂V₂² = 0 - (-10) = 10
        assert_relative_eq!(jac.matrix[(0, 0)], 10.0, max_relative = 1e-12);
        assert_eq!(jac.index.dim(), 2);
    }

    #[test]
    fn jacobian_slack_pv_only_has_no_v_columns() {
        let grid = Grid {
            buses: vec![
                bus(0, BusType::Slack, 0.0, 0.0, 1.0),
                bus(1, BusType::Pv, 0.2, 0.0, 1.01),
            ],
            lines: vec![Line {
                from: 0,
                to: 1,
                r_series: 0.01,
                x_series: 0.1,
                b_shunt_total: 0.0,
            }],
            v_base: 110e3,
            s_base: 100e6,
            regime: Regime::Hv,
        };
        let y = build_admittance(&grid).unwrap();
        let kinds: Vec<BusType> = grid.buses.iter().map(|b| b.kind).collect();
        let jac = assemble_jacobian(&y, &State::flat_start(&grid), &kinds);
        assert_eq!(jac.index.theta_buses, vec![1]);
        assert!(jac.index.v_buses.is_empty());
        assert_eq!(jac.matrix.nrows(), 1);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (grid, y) = four_bus();
        let state = State {
            v: vec![1.02, 1.01, 0.97, 1.03],
            theta: vec![0.0, 0.05, -0.08, 0.02],
        };
        let kinds: Vec<BusType> = grid.buses.iter().map(|b| b.kind).collect();
        let jac = assemble_jacobian(&y, &state, &kinds);
        let idx = &jac.index;
        let h = 1e-6;
        let n_th = idx.theta_buses.len();

        let eval = |state: &State| compute_injections(&y, state);
        for (col, kind_v) in (0..idx.dim()).map(|c| (c, c >= n_th)) {
            let bus = if kind_v {
                idx.v_buses[col - n_th]
            } else {
                idx.theta_buses[col]
            };
            let mut plus = state.clone();
            let mut minus = state.clone();
            if kind_v {
                plus.v[bus] += h;
                minus.v[bus] -= h;
            } else {
                plus.theta[bus] += h;
                minus.theta[bus] -= h;
            }
            let (pp, qp) = eval(&plus);
            let (pm, qm) = eval(&minus);
            for (row, &rbus) in idx.theta_buses.iter().enumerate() {
                let fd = (pp[rbus] - pm[rbus]) / (2.0 * h);
                let an = jac.matrix[(row, col)];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    ((an - fd) / denom).abs() < 1e-6,
                    "dP[{rbus}]/dx[{col}]: analytic {an}, fd {fd}"
                );
            }
            for (row, &rbus) in idx.v_buses.iter().enumerate() {
                let fd = (qp[rbus] - qm[rbus]) / (2.0 * h);
                let an = jac.matrix[(n_th + row, col)];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    ((an - fd) / denom).abs() < 1e-6,
                    "dQ[{rbus}]/dx[{col}]: analytic {an}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn nr_fixed_point_converges_immediately() {
        let (grid, y) = two_bus(-0.5, -0.2, 0.0);
        let (solution, report) =
            nr_solve(&grid, &y, &State::flat_start(&grid), 1e-8, 30).unwrap();
        assert!(report.converged);
        let (again, report2) = nr_solve(&grid, &y, &solution, 1e-8, 30).unwrap();
        assert!(report2.converged);
        assert!(report2.iterations <= 1);
        assert_eq!(again.v, solution.v);
    }

    #[test]
    fn nr_two_bus_solution_satisfies_setpoints() {
        let (grid, y) = two_bus(-0.5, -0.2, 0.0);
        let (solution, report) =
            nr_solve(&grid, &y, &State::flat_start(&grid), 1e-8, 30).unwrap();
        assert!(report.converged, "{report:?}");
        assert!(report.final_merit <= 1e-8);
        let r = compute_residuals(&grid, &y, &solution);
        assert!(merit(&r) <= 1e-8);
        // slack held fixed bit-exactly
        assert_eq!(solution.v[0], 1.0);
        assert_eq!(solution.theta[0], 0.0);
    }

    #[test]
    fn nr_four_bus_fixed_buses_preserved() {
        let (grid, y) = four_bus();
        let (solution, report) =
            nr_solve(&grid, &y, &State::flat_start(&grid), 1e-8, 30).unwrap();
        assert!(report.converged);
        assert_eq!(solution.v[0], 1.02);
        assert_eq!(solution.theta[0], 0.0);
        assert_eq!(solution.v[1], 1.01);
    }

    #[test]
    fn nr_infeasible_load_does_not_converge() {
        let (grid, y) = two_bus(-100.0, 0.0, 0.0);
        match nr_solve(&grid, &y, &State::flat_start(&grid), 1e-8, 30) {
            Ok((_, report)) => assert!(!report.converged),
            Err(AcpfError::NonFinite { .. }) => {}
            Err(e) => panic!("unexpected error: {e}"),
        }
    }

    #[test]
    fn nr_merit_tail_is_monotone() {
        let (grid, y) = four_bus();
        let (_, report) = nr_solve(&grid, &y, &State::flat_start(&grid), 1e-10, 30).unwrap();
        assert!(report.converged);
        let tail: Vec<f64> = report
            .merit_history
            .iter()
            .copied()
            .skip_while(|&m| m >= 1e-2)
            .collect();
        assert!(tail.len() >= 2, "history: {:?}", report.merit_history);
        for w in tail.windows(2) {
            assert!(w[1] < w[0], "tail not strictly decreasing: {tail:?}");
        }
    }

    #[test]
    fn wrap_angle_convention() {
        assert_relative_eq!(wrap_angle_scalar(1.5 * PI), -0.5 * PI, max_relative = 1e-12);
        assert_eq!(wrap_angle_scalar(0.0), 0.0);
        assert_eq!(wrap_angle_scalar(-PI), PI);
        assert_eq!(wrap_angle_scalar(PI), PI);
        // in-range values pass through bit-exactly
        for &t in &[0.5, -0.3, 3.14, -3.14, 1e-12] {
            assert_eq!(wrap_angle_scalar(t), t);
        }
    }

    #[test]
    fn clip_voltage_bounds() {
        assert_eq!(clip_voltage(&[1.3, 0.7, 1.0], 0.8, 1.2), vec![1.2, 0.8, 1.0]);
    }

    proptest::proptest! {
        #[test]
        fn wrap_angle_always_in_range(theta in -100.0f64..100.0) {
            let w = wrap_angle_scalar(theta);
            proptest::prop_assert!(w > -PI && w <= PI);
            // congruent mod 2π
            let k = ((theta - w) / (2.0 * PI)).round();
            proptest::prop_assert!((theta - w - 2.0 * PI * k).abs() < 1e-9);
        }
    }
}
