//! Static network model: buses, π-model lines, per-unit conversion, and
//! nodal admittance assembly.
//!
//! All solver-facing quantities are in per-unit on the grid's own bases
//! (`v_base` in volts, `s_base` in volt-amperes, `z_base = v_base²/s_base`).
//! Engineering-unit grids ([`EngineeringGrid`]) exist only as the output of
//! the scenario sampler and are converted once via [`to_per_unit`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// System frequency used for shunt susceptance conversion, in hertz.
///
/// European-style grids; overridable through the run configuration.
pub const DEFAULT_FREQUENCY_HZ: f64 = 50.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("degenerate line between buses {from} and {to}: zero series impedance")]
    DegenerateLine { from: usize, to: usize },
    #[error("disconnected: {unreached} of {total} buses unreachable from bus 0")]
    Disconnected { unreached: usize, total: usize },
    #[error("bus typing: expected exactly one slack bus, found {count}")]
    BusTyping { count: usize },
    #[error("non-positive bases: v_base={v_base} V, s_base={s_base} VA")]
    InvalidBases { v_base: f64, s_base: f64 },
    #[error("line endpoint {bus} out of range for grid with {n} buses")]
    EndpointOutOfRange { bus: usize, n: usize },
    #[error("self-loop on bus {bus}")]
    SelfLoop { bus: usize },
}

/// Voltage regime a grid was synthesized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Mv,
    Hv,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Mv => "mv",
            Regime::Hv => "hv",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mv" => Ok(Regime::Mv),
            "hv" => Ok(Regime::Hv),
            other => Err(format!("unknown regime '{other}' (expected mv|hv)")),
        }
    }
}

/// Bus classification. Exactly one slack bus per grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

/// One bus with its setpoints, in per-unit.
///
/// `v_set` is meaningful for slack and PV buses, `theta_set` for the slack
/// (always 0 in synthesized grids). Unused setpoints are stored as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusType,
    pub p_set: f64,
    pub q_set: f64,
    pub v_set: f64,
    pub theta_set: f64,
}

/// π-model line: series impedance plus total charging susceptance,
/// half of which sits at each end. All per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r_series: f64,
    pub x_series: f64,
    pub b_shunt_total: f64,
}

/// Static network description in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    /// Voltage base in volts.
    pub v_base: f64,
    /// Power base in volt-amperes.
    pub s_base: f64,
    pub regime: Regime,
}

impl Grid {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_index(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusType::Slack)
    }

    /// Undirected adjacency lists (neighbor sets, parallel lines merged).
    pub fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.buses.len()];
        for line in &self.lines {
            if line.from < adj.len() && line.to < adj.len() && line.from != line.to {
                adj[line.from].insert(line.to);
                adj[line.to].insert(line.from);
            }
        }
        adj
    }

    /// True when every bus is reachable from bus 0.
    pub fn is_connected(&self) -> bool {
        reachable_from_zero(self.buses.len(), &self.adjacency()) == self.buses.len()
    }

    /// Per undirected bus pair: summed series admittance and per-end shunt,
    /// with the orientation of the first line seen for that pair. Sorted by
    /// (min, max) endpoint so the output order does not depend on line order.
    pub fn merged_line_admittances(&self) -> Result<Vec<MergedLine>, GridError> {
        let mut merged: BTreeMap<(usize, usize), MergedLine> = BTreeMap::new();
        for line in &self.lines {
            let (y, b_half) = line_pi_params(line)?;
            let key = (line.from.min(line.to), line.from.max(line.to));
            merged
                .entry(key)
                .and_modify(|m| {
                    m.y += y;
                    m.b_half += b_half;
                })
                .or_insert(MergedLine {
                    from: line.from,
                    to: line.to,
                    y,
                    b_half,
                });
        }
        Ok(merged.into_values().collect())
    }
}

/// Parallel lines between the same bus pair collapsed into one branch.
#[derive(Debug, Clone, Copy)]
pub struct MergedLine {
    pub from: usize,
    pub to: usize,
    pub y: Complex64,
    pub b_half: f64,
}

/// Dense complex nodal admittance matrix with a cached nonzero list for
/// O(E) injection evaluation.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    n: usize,
    entries: Vec<Complex64>,
    /// (row, col, g, b) for every structurally nonzero entry, row-major with
    /// ascending columns. Diagonals are always present.
    nonzeros: Vec<(usize, usize, f64, f64)>,
}

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.entries[row * self.n + col]
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    /// Structural nonzeros as (row, col, g, b), row-major.
    pub fn nonzeros(&self) -> &[(usize, usize, f64, f64)] {
        &self.nonzeros
    }

    /// Shunt susceptance accumulated on the diagonal of bus `i`
    /// (half of every incident line's total charging).
    pub fn diagonal_shunt(&self, grid: &Grid, i: usize) -> f64 {
        grid.lines
            .iter()
            .filter(|l| l.from == i || l.to == i)
            .map(|l| l.b_shunt_total / 2.0)
            .sum()
    }
}

/// Series admittance and per-end shunt susceptance of one π-model line.
pub fn line_pi_params(line: &Line) -> Result<(Complex64, f64), GridError> {
    let z = Complex64::new(line.r_series, line.x_series);
    if z.norm_sqr() == 0.0 {
        return Err(GridError::DegenerateLine {
            from: line.from,
            to: line.to,
        });
    }
    Ok((z.inv(), line.b_shunt_total / 2.0))
}

/// Assemble the nodal admittance matrix.
///
/// Off-diagonals are negated line admittances, diagonals accumulate incident
/// line admittances plus half of each incident line's charging susceptance.
/// Parallel lines sum. Fails on disconnected grids and bad slack counts.
pub fn build_admittance(grid: &Grid) -> Result<AdmittanceMatrix, GridError> {
    let n = grid.buses.len();
    for line in &grid.lines {
        if line.from >= n {
            return Err(GridError::EndpointOutOfRange { bus: line.from, n });
        }
        if line.to >= n {
            return Err(GridError::EndpointOutOfRange { bus: line.to, n });
        }
        if line.from == line.to {
            return Err(GridError::SelfLoop { bus: line.from });
        }
    }
    let slack_count = grid
        .buses
        .iter()
        .filter(|b| b.kind == BusType::Slack)
        .count();
    if slack_count != 1 {
        return Err(GridError::BusTyping { count: slack_count });
    }
    let reached = reachable_from_zero(n, &grid.adjacency());
    if reached != n {
        return Err(GridError::Disconnected {
            unreached: n - reached,
            total: n,
        });
    }

    let mut entries = vec![Complex64::new(0.0, 0.0); n * n];
    for line in &grid.lines {
        let (y, b_half) = line_pi_params(line)?;
        let shunt = Complex64::new(0.0, b_half);
        entries[line.from * n + line.to] -= y;
        entries[line.to * n + line.from] -= y;
        entries[line.from * n + line.from] += y + shunt;
        entries[line.to * n + line.to] += y + shunt;
    }

    let mut structure = vec![BTreeSet::new(); n];
    for (i, set) in structure.iter_mut().enumerate() {
        set.insert(i);
    }
    for line in &grid.lines {
        structure[line.from].insert(line.to);
        structure[line.to].insert(line.from);
    }
    let mut nonzeros = Vec::new();
    for (i, cols) in structure.iter().enumerate() {
        for &j in cols {
            let y = entries[i * n + j];
            nonzeros.push((i, j, y.re, y.im));
        }
    }

    Ok(AdmittanceMatrix {
        n,
        entries,
        nonzeros,
    })
}

/// Bus data in engineering units, prior to per-unit conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineeringBus {
    pub kind: BusType,
    pub p_mw: f64,
    pub q_mvar: f64,
    pub v_set_pu: f64,
    pub theta_set_rad: f64,
}

/// Line data in engineering units: per-km parameters plus span length.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineeringLine {
    pub from: usize,
    pub to: usize,
    pub length_km: f64,
    pub r_ohm_per_km: f64,
    pub x_ohm_per_km: f64,
    pub c_nf_per_km: f64,
}

/// Grid as sampled: Ω/km, nF/km, km, MW, MVAr. Bases in volts / VA.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineeringGrid {
    pub buses: Vec<EngineeringBus>,
    pub lines: Vec<EngineeringLine>,
    pub v_base: f64,
    pub s_base: f64,
    pub regime: Regime,
}

/// Convert an engineering-unit grid to per-unit at the default frequency.
pub fn to_per_unit(eng: &EngineeringGrid) -> Result<Grid, GridError> {
    to_per_unit_at(eng, DEFAULT_FREQUENCY_HZ)
}

/// Per-unit conversion with an explicit system frequency.
///
/// `z_base = v_base²/s_base`; series terms scale by `1/z_base`, the shunt
/// susceptance `ω·C'·L` scales by `z_base`, powers by `1/s_base`.
pub fn to_per_unit_at(eng: &EngineeringGrid, frequency_hz: f64) -> Result<Grid, GridError> {
    if eng.v_base <= 0.0 || eng.s_base <= 0.0 {
        return Err(GridError::InvalidBases {
            v_base: eng.v_base,
            s_base: eng.s_base,
        });
    }
    let z_base = eng.v_base * eng.v_base / eng.s_base;
    let omega = 2.0 * std::f64::consts::PI * frequency_hz;
    let buses = eng
        .buses
        .iter()
        .enumerate()
        .map(|(id, b)| Bus {
            id,
            kind: b.kind,
            p_set: b.p_mw * 1e6 / eng.s_base,
            q_set: b.q_mvar * 1e6 / eng.s_base,
            v_set: b.v_set_pu,
            theta_set: b.theta_set_rad,
        })
        .collect();
    let lines = eng
        .lines
        .iter()
        .map(|l| Line {
            from: l.from,
            to: l.to,
            r_series: l.r_ohm_per_km * l.length_km / z_base,
            x_series: l.x_ohm_per_km * l.length_km / z_base,
            b_shunt_total: omega * l.c_nf_per_km * 1e-9 * l.length_km * z_base,
        })
        .collect();
    Ok(Grid {
        buses,
        lines,
        v_base: eng.v_base,
        s_base: eng.s_base,
        regime: eng.regime,
    })
}

/// Inverse of [`to_per_unit_at`] given the original span lengths.
pub fn to_engineering(grid: &Grid, lengths_km: &[f64], frequency_hz: f64) -> EngineeringGrid {
    let z_base = grid.v_base * grid.v_base / grid.s_base;
    let omega = 2.0 * std::f64::consts::PI * frequency_hz;
    EngineeringGrid {
        buses: grid
            .buses
            .iter()
            .map(|b| EngineeringBus {
                kind: b.kind,
                p_mw: b.p_set * grid.s_base / 1e6,
                q_mvar: b.q_set * grid.s_base / 1e6,
                v_set_pu: b.v_set,
                theta_set_rad: b.theta_set,
            })
            .collect(),
        lines: grid
            .lines
            .iter()
            .zip(lengths_km)
            .map(|(l, &len)| EngineeringLine {
                from: l.from,
                to: l.to,
                length_km: len,
                r_ohm_per_km: l.r_series * z_base / len,
                x_ohm_per_km: l.x_series * z_base / len,
                c_nf_per_km: l.b_shunt_total / (omega * 1e-9 * len * z_base),
            })
            .collect(),
        v_base: grid.v_base,
        s_base: grid.s_base,
        regime: grid.regime,
    }
}

/// Structural findings from [`validate_grid`].
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub n_buses: usize,
    pub slack_count: usize,
    pub connected: bool,
    pub self_loops: Vec<usize>,
    pub duplicate_edges: Vec<(usize, usize)>,
    pub parameter_issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.slack_count == 1
            && self.connected
            && self.self_loops.is_empty()
            && self.duplicate_edges.is_empty()
            && self.parameter_issues.is_empty()
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.slack_count != 1 {
            out.push(format!("bus typing: {} slack buses", self.slack_count));
        }
        if !self.connected {
            out.push("disconnected".to_string());
        }
        for &i in &self.self_loops {
            out.push(format!("self-loop at line {i}"));
        }
        for &(a, b) in &self.duplicate_edges {
            out.push(format!("duplicate edge {a}-{b}"));
        }
        out.extend(self.parameter_issues.iter().cloned());
        out
    }
}

/// Report structural problems without failing: connectivity, slack count,
/// duplicate undirected edges, self-loops, and parameter-range violations.
pub fn validate_grid(grid: &Grid) -> ValidationReport {
    let n = grid.buses.len();
    let mut report = ValidationReport {
        n_buses: n,
        slack_count: grid
            .buses
            .iter()
            .filter(|b| b.kind == BusType::Slack)
            .count(),
        connected: n > 0 && reachable_from_zero(n, &grid.adjacency()) == n,
        ..Default::default()
    };

    let mut seen = BTreeSet::new();
    for (i, line) in grid.lines.iter().enumerate() {
        if line.from == line.to {
            report.self_loops.push(i);
            continue;
        }
        let key = (line.from.min(line.to), line.from.max(line.to));
        if !seen.insert(key) {
            report.duplicate_edges.push(key);
        }
        if line.from >= n || line.to >= n {
            report
                .parameter_issues
                .push(format!("line {i}: endpoint out of range"));
        }
        if line.r_series < 0.0 {
            report
                .parameter_issues
                .push(format!("line {i}: negative series resistance"));
        }
        if line.x_series <= 0.0 {
            report
                .parameter_issues
                .push(format!("line {i}: non-positive series reactance"));
        }
        if line.b_shunt_total < 0.0 {
            report
                .parameter_issues
                .push(format!("line {i}: negative shunt susceptance"));
        }
    }
    for bus in &grid.buses {
        if !bus.p_set.is_finite() || !bus.q_set.is_finite() {
            report
                .parameter_issues
                .push(format!("bus {}: non-finite setpoint", bus.id));
        }
        if bus.kind != BusType::Pq && !(0.8..=1.2).contains(&bus.v_set) {
            report
                .parameter_issues
                .push(format!("bus {}: v_set {} outside [0.8, 1.2]", bus.id, bus.v_set));
        }
    }
    report
}

fn reachable_from_zero(n: usize, adj: &[BTreeSet<usize>]) -> usize {
    if n == 0 {
        return 0;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pq_bus(id: usize) -> Bus {
        Bus {
            id,
            kind: BusType::Pq,
            p_set: 0.0,
            q_set: 0.0,
            v_set: 1.0,
            theta_set: 0.0,
        }
    }

    fn slack_bus(id: usize) -> Bus {
        Bus {
            id,
            kind: BusType::Slack,
            p_set: 0.0,
            q_set: 0.0,
            v_set: 1.0,
            theta_set: 0.0,
        }
    }

    pub(crate) fn two_bus_grid(r: f64, x: f64, b: f64) -> Grid {
        Grid {
            buses: vec![slack_bus(0), pq_bus(1)],
            lines: vec![Line {
                from: 0,
                to: 1,
                r_series: r,
                x_series: x,
                b_shunt_total: b,
            }],
            v_base: 110e3,
            s_base: 100e6,
            regime: Regime::Hv,
        }
    }

    #[test]
    fn pi_params_complex_reciprocal() {
        let line = Line {
            from: 0,
            to: 1,
            r_series: 0.01,
            x_series: 0.1,
            b_shunt_total: 0.02,
        };
        let (y, b_half) = line_pi_params(&line).unwrap();
        // 1/(0.01 + 0.1j) = (0.01 - 0.1j)/0.0101
        assert_relative_eq!(y.re, 0.9900990099009901, max_relative = 1e-12);
        assert_relative_eq!(y.im, -9.900990099009901, max_relative = 1e-12);
        assert_eq!(b_half, 0.01);
    }

    #[test]
    fn pi_params_pure_reactance() {
        let line = Line {
            from: 0,
            to: 1,
            r_series: 0.0,
            x_series: 1.0,
            b_shunt_total: 0.0,
        };
        let (y, b_half) = line_pi_params(&line).unwrap();
        assert_eq!(y, Complex64::new(0.0, -1.0));
        assert_eq!(b_half, 0.0);
    }

    #[test]
    fn pi_params_degenerate_line() {
        let line = Line {
            from: 0,
            to: 1,
            r_series: 0.0,
            x_series: 0.0,
            b_shunt_total: 0.0,
        };
        let err = line_pi_params(&line).unwrap_err();
        assert!(matches!(err, GridError::DegenerateLine { .. }));
    }

    #[test]
    fn admittance_two_bus_shuntless() {
        let grid = two_bus_grid(0.0, 0.1, 0.0);
        let y = build_admittance(&grid).unwrap();
        // y_line = 1/(0.1j) = -10j
        for (pos, expect) in [
            ((0, 0), -10.0),
            ((1, 1), -10.0),
            ((0, 1), 10.0),
            ((1, 0), 10.0),
        ] {
            assert_eq!(y.get(pos.0, pos.1).re, 0.0);
            assert_relative_eq!(y.get(pos.0, pos.1).im, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn admittance_two_bus_with_charging() {
        let grid = two_bus_grid(0.0, 0.1, 0.02);
        let y = build_admittance(&grid).unwrap();
        assert_relative_eq!(y.get(0, 0).im, -9.99, max_relative = 1e-12);
        assert_relative_eq!(y.get(1, 1).im, -9.99, max_relative = 1e-12);
    }

    #[test]
    fn admittance_disconnected_is_error() {
        let mut grid = two_bus_grid(0.0, 0.1, 0.0);
        grid.lines.clear();
        assert!(matches!(
            build_admittance(&grid),
            Err(GridError::Disconnected { .. })
        ));
    }

    #[test]
    fn admittance_duplicate_slack_is_error() {
        let mut grid = two_bus_grid(0.0, 0.1, 0.0);
        grid.buses[1].kind = BusType::Slack;
        assert!(matches!(
            build_admittance(&grid),
            Err(GridError::BusTyping { count: 2 })
        ));
    }

    #[test]
    fn admittance_parallel_lines_merge() {
        let mut grid = two_bus_grid(0.0, 0.2, 0.0);
        grid.lines.push(Line {
            from: 1,
            to: 0,
            r_series: 0.0,
            x_series: 0.2,
            b_shunt_total: 0.0,
        });
        let y = build_admittance(&grid).unwrap();
        assert_relative_eq!(y.get(0, 1).im, 10.0, max_relative = 1e-12);
        let merged = grid.merged_line_admittances().unwrap();
        assert_eq!(merged.len(), 1);
        assert_relative_eq!(merged[0].y.im, -10.0, max_relative = 1e-12);
    }

    #[test]
    fn per_unit_hv_bases() {
        // 110 kV / 100 MVA
        let z_base = 110e3_f64 * 110e3 / 100e6;
        assert_relative_eq!(z_base, 121.0, max_relative = 1e-12);
    }

    #[test]
    fn per_unit_line_and_power() {
        let eng = EngineeringGrid {
            buses: vec![
                EngineeringBus {
                    kind: BusType::Slack,
                    p_mw: 0.0,
                    q_mvar: 0.0,
                    v_set_pu: 1.0,
                    theta_set_rad: 0.0,
                },
                EngineeringBus {
                    kind: BusType::Pq,
                    p_mw: 300.0,
                    q_mvar: 0.0,
                    v_set_pu: 1.0,
                    theta_set_rad: 0.0,
                },
            ],
            lines: vec![EngineeringLine {
                from: 0,
                to: 1,
                length_km: 10.0,
                r_ohm_per_km: 0.5,
                x_ohm_per_km: 0.3,
                c_nf_per_km: 0.0,
            }],
            v_base: 10e3,
            s_base: 10e6,
            regime: Regime::Mv,
        };
        let grid = to_per_unit(&eng).unwrap();
        // z_base = 10 Ω; r_pu = 0.5 Ω/km * 10 km / 10 Ω
        assert_relative_eq!(grid.lines[0].r_series, 0.5, max_relative = 1e-12);
        // 300 MW at 10 MVA base
        assert_relative_eq!(grid.buses[1].p_set, 30.0, max_relative = 1e-12);
        // and at the HV base of 100 MVA it would be 3.0
        assert_relative_eq!(300e6 / 100e6, 3.0, max_relative = 1e-12);
    }

    #[test]
    fn per_unit_rejects_bad_bases() {
        let eng = EngineeringGrid {
            buses: vec![],
            lines: vec![],
            v_base: 0.0,
            s_base: 10e6,
            regime: Regime::Mv,
        };
        assert!(matches!(
            to_per_unit(&eng),
            Err(GridError::InvalidBases { .. })
        ));
    }

    #[test]
    fn validate_chain_ok() {
        let grid = Grid {
            buses: vec![slack_bus(0), pq_bus(1), pq_bus(2)],
            lines: vec![
                Line {
                    from: 0,
                    to: 1,
                    r_series: 0.01,
                    x_series: 0.1,
                    b_shunt_total: 0.0,
                },
                Line {
                    from: 1,
                    to: 2,
                    r_series: 0.01,
                    x_series: 0.1,
                    b_shunt_total: 0.0,
                },
            ],
            v_base: 10e3,
            s_base: 10e6,
            regime: Regime::Mv,
        };
        assert!(validate_grid(&grid).is_valid());
    }

    #[test]
    fn validate_disconnected() {
        let grid = Grid {
            buses: vec![slack_bus(0), pq_bus(1), pq_bus(2), pq_bus(3)],
            lines: vec![Line {
                from: 0,
                to: 1,
                r_series: 0.01,
                x_series: 0.1,
                b_shunt_total: 0.0,
            }],
            v_base: 10e3,
            s_base: 10e6,
            regime: Regime::Mv,
        };
        let report = validate_grid(&grid);
        assert!(!report.is_valid());
        assert!(!report.connected);
    }

    #[test]
    fn validate_two_slacks() {
        let mut grid = two_bus_grid(0.0, 0.1, 0.0);
        grid.buses[1].kind = BusType::Slack;
        let report = validate_grid(&grid);
        assert!(!report.is_valid());
        assert_eq!(report.slack_count, 2);
    }

    #[test]
    fn row_identity_and_symmetry() {
        let grid = Grid {
            buses: vec![slack_bus(0), pq_bus(1), pq_bus(2)],
            lines: vec![
                Line {
                    from: 0,
                    to: 1,
                    r_series: 0.02,
                    x_series: 0.15,
                    b_shunt_total: 0.04,
                },
                Line {
                    from: 1,
                    to: 2,
                    r_series: 0.01,
                    x_series: 0.12,
                    b_shunt_total: 0.02,
                },
                Line {
                    from: 0,
                    to: 2,
                    r_series: 0.03,
                    x_series: 0.2,
                    b_shunt_total: 0.06,
                },
            ],
            v_base: 10e3,
            s_base: 10e6,
            regime: Regime::Mv,
        };
        let y = build_admittance(&grid).unwrap();
        let n = grid.n();
        for i in 0..n {
            for j in 0..n {
                // construction is symmetric, bit-exact
                assert_eq!(y.get(i, j), y.get(j, i));
            }
            let shunt = Complex64::new(0.0, y.diagonal_shunt(&grid, i));
            let off_sum: Complex64 = (0..n).filter(|&j| j != i).map(|j| -y.get(i, j)).sum();
            let lhs = y.get(i, i) - shunt;
            assert_relative_eq!(lhs.re, off_sum.re, max_relative = 1e-12, epsilon = 1e-15);
            assert_relative_eq!(lhs.im, off_sum.im, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn per_unit_round_trip() {
        let eng = EngineeringGrid {
            buses: vec![
                EngineeringBus {
                    kind: BusType::Slack,
                    p_mw: 0.0,
                    q_mvar: 0.0,
                    v_set_pu: 1.02,
                    theta_set_rad: 0.0,
                },
                EngineeringBus {
                    kind: BusType::Pq,
                    p_mw: -120.0,
                    q_mvar: 45.0,
                    v_set_pu: 1.0,
                    theta_set_rad: 0.0,
                },
            ],
            lines: vec![EngineeringLine {
                from: 0,
                to: 1,
                length_km: 37.5,
                r_ohm_per_km: 0.17,
                x_ohm_per_km: 0.41,
                c_nf_per_km: 9.3,
            }],
            v_base: 110e3,
            s_base: 100e6,
            regime: Regime::Hv,
        };
        let pu = to_per_unit(&eng).unwrap();
        let back = to_engineering(&pu, &[37.5], DEFAULT_FREQUENCY_HZ);
        assert_relative_eq!(
            back.lines[0].r_ohm_per_km,
            eng.lines[0].r_ohm_per_km,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            back.lines[0].x_ohm_per_km,
            eng.lines[0].x_ohm_per_km,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            back.lines[0].c_nf_per_km,
            eng.lines[0].c_nf_per_km,
            max_relative = 1e-12
        );
        assert_relative_eq!(back.buses[1].p_mw, eng.buses[1].p_mw, max_relative = 1e-12);
        assert_relative_eq!(back.buses[1].q_mvar, eng.buses[1].q_mvar, max_relative = 1e-12);
    }
}
