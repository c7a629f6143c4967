//! Synthetic MV/HV scenario generation.
//!
//! Each scenario draws a connected topology (random spanning tree plus a few
//! extra edges), bus types, engineering-unit line parameters and operating
//! points from regime-specific ranges, converts to per-unit, and solves for
//! a Newton-Raphson reference. Non-convergent or degenerate draws are
//! rejected and retried; corpus-level outliers are removed with a Tukey IQR
//! filter over pooled reference voltage magnitudes.
//!
//! Determinism: every (master seed, scenario index, attempt) triple derives
//! its own counter-based random stream, so parallel and serial synthesis
//! produce identical corpora.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{nr_solve, NrReport, State};
use crate::grid::{
    build_admittance, to_per_unit, validate_grid, BusType, EngineeringBus, EngineeringGrid,
    EngineeringLine, Grid, Regime,
};

/// Newton-Raphson tolerance used for reference generation (∞-norm merit).
pub const REFERENCE_TOL: f64 = 1e-8;
/// Iteration cap for reference generation.
pub const REFERENCE_MAX_ITER: usize = 30;
/// Attempts per requested scenario before synthesis gives up.
pub const DEFAULT_RETRY_LIMIT: usize = 50;
/// Probability that a non-slack bus is typed PV.
pub const DEFAULT_PV_PROBABILITY: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("gave up on scenario index {index} after {attempts} attempts")]
    Exhausted { index: u64, attempts: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("bad size range [{n_min}, {n_max}]")]
    BadSizeRange { n_min: usize, n_max: usize },
}

/// Why a draw was discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    NonConvergent,
    Disconnected,
    Degenerate,
}

/// Engineering-unit sampling intervals for one voltage regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRanges {
    /// Volts.
    pub v_base: f64,
    /// Volt-amperes.
    pub s_base: f64,
    pub length_km: (f64, f64),
    pub r_per_km: (f64, f64),
    pub x_per_km: (f64, f64),
    pub c_nf_per_km: (f64, f64),
    pub p_mw: (f64, f64),
    pub q_mvar: (f64, f64),
}

impl RegimeRanges {
    pub fn mv() -> RegimeRanges {
        RegimeRanges {
            v_base: 10e3,
            s_base: 10e6,
            length_km: (1.0, 20.0),
            r_per_km: (0.5, 0.6),
            x_per_km: (0.3, 0.35),
            c_nf_per_km: (8.0, 14.0),
            p_mw: (-5.0, 5.0),
            q_mvar: (-2.0, 2.0),
        }
    }

    pub fn hv() -> RegimeRanges {
        RegimeRanges {
            v_base: 110e3,
            s_base: 100e6,
            length_km: (1.0, 50.0),
            r_per_km: (0.15, 0.2),
            x_per_km: (0.35, 0.45),
            c_nf_per_km: (8.0, 10.0),
            p_mw: (-300.0, 300.0),
            q_mvar: (-150.0, 150.0),
        }
    }

    pub fn for_regime(regime: Regime) -> RegimeRanges {
        match regime {
            Regime::Mv => RegimeRanges::mv(),
            Regime::Hv => RegimeRanges::hv(),
        }
    }

    pub fn z_base(&self) -> f64 {
        self.v_base * self.v_base / self.s_base
    }

    /// Check that a stored per-unit scenario is consistent with these
    /// ranges; returns human-readable violations.
    pub fn check_scenario(&self, scenario: &Scenario) -> Vec<String> {
        let mut issues = Vec::new();
        let z_base = self.z_base();
        let r_lo = self.r_per_km.0 * self.length_km.0 / z_base;
        let r_hi = self.r_per_km.1 * self.length_km.1 / z_base;
        let x_lo = self.x_per_km.0 * self.length_km.0 / z_base;
        let x_hi = self.x_per_km.1 * self.length_km.1 / z_base;
        let tol = 1e-9;
        for (i, line) in scenario.grid.lines.iter().enumerate() {
            if line.r_series < r_lo - tol || line.r_series > r_hi + tol {
                issues.push(format!(
                    "line {i}: r {} outside [{r_lo}, {r_hi}]",
                    line.r_series
                ));
            }
            if line.x_series < x_lo - tol || line.x_series > x_hi + tol {
                issues.push(format!(
                    "line {i}: x {} outside [{x_lo}, {x_hi}]",
                    line.x_series
                ));
            }
            let ratio = line.r_series / line.x_series;
            let ratio_lo = self.r_per_km.0 / self.x_per_km.1;
            let ratio_hi = self.r_per_km.1 / self.x_per_km.0;
            if ratio < ratio_lo - tol || ratio > ratio_hi + tol {
                issues.push(format!(
                    "line {i}: r/x {ratio} outside [{ratio_lo}, {ratio_hi}]"
                ));
            }
        }
        let p_cap = self.p_mw.1.abs() * 1e6 / self.s_base + tol;
        let q_cap = self.q_mvar.1.abs() * 1e6 / self.s_base + tol;
        for bus in &scenario.grid.buses {
            match bus.kind {
                BusType::Slack => {}
                BusType::Pv => {
                    if bus.p_set.abs() > p_cap {
                        issues.push(format!("bus {}: p_set {} out of range", bus.id, bus.p_set));
                    }
                }
                BusType::Pq => {
                    if bus.p_set.abs() > p_cap {
                        issues.push(format!("bus {}: p_set {} out of range", bus.id, bus.p_set));
                    }
                    if bus.q_set.abs() > q_cap {
                        issues.push(format!("bus {}: q_set {} out of range", bus.id, bus.q_set));
                    }
                }
            }
        }
        issues
    }
}

/// One stored training/evaluation case: per-unit grid, flat-start initial
/// state, converged reference, and its solve report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub regime: Regime,
    pub seed: u64,
    pub grid: Grid,
    pub initial_state: State,
    pub reference_state: State,
    pub nr_report: NrReport,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.grid.n()
    }
}

/// Counter-based stream derivation: one independent generator per
/// (master seed, scenario index, attempt).
pub fn derive_rng(master_seed: u64, index: u64, attempt: u64) -> ChaCha8Rng {
    let mut h = splitmix64(master_seed ^ 0x9e37_79b9_7f4a_7c15);
    h = splitmix64(h ^ index);
    h = splitmix64(h ^ attempt);
    ChaCha8Rng::seed_from_u64(h)
}

/// Stable 64-bit mixer, also used for dataset split assignment.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Connected undirected edge list: a random-sequence spanning tree plus
/// `⌊0.2·n⌋` distinct extra pairs.
pub fn sample_topology(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::with_capacity(n - 1 + n / 5);
    let mut present: std::collections::BTreeSet<(usize, usize)> =
        std::collections::BTreeSet::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        let (a, b) = (order[j], order[i]);
        edges.push((a, b));
        present.insert((a.min(b), a.max(b)));
    }
    let extra = n / 5;
    let mut added = 0;
    let mut guard = 0;
    while added < extra && guard < 1000 * (extra + 1) {
        guard += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        if present.insert((a.min(b), a.max(b))) {
            edges.push((a, b));
            added += 1;
        }
    }
    edges
}

/// Bus 0 is the slack; every other bus is PV with probability `pv_prob`,
/// otherwise PQ.
pub fn assign_bus_types(n: usize, pv_prob: f64, rng: &mut ChaCha8Rng) -> Vec<BusType> {
    (0..n)
        .map(|i| {
            if i == 0 {
                BusType::Slack
            } else if rng.random_bool(pv_prob) {
                BusType::Pv
            } else {
                BusType::Pq
            }
        })
        .collect()
}

/// Engineering-unit operating point: slack and PV magnitudes uniform in
/// `[0.9, 1.1]`, PQ at 1.0; injections uniform in the regime's MW/MVAr
/// ranges per bus type; angles zero.
pub fn sample_operating_point(
    ranges: &RegimeRanges,
    types: &[BusType],
    rng: &mut ChaCha8Rng,
) -> Vec<EngineeringBus> {
    types
        .iter()
        .map(|&kind| match kind {
            BusType::Slack => EngineeringBus {
                kind,
                p_mw: 0.0,
                q_mvar: 0.0,
                v_set_pu: rng.random_range(0.9..1.1),
                theta_set_rad: 0.0,
            },
            BusType::Pv => EngineeringBus {
                kind,
                p_mw: rng.random_range(ranges.p_mw.0..ranges.p_mw.1),
                q_mvar: 0.0,
                v_set_pu: rng.random_range(0.9..1.1),
                theta_set_rad: 0.0,
            },
            BusType::Pq => EngineeringBus {
                kind,
                p_mw: rng.random_range(ranges.p_mw.0..ranges.p_mw.1),
                q_mvar: rng.random_range(ranges.q_mvar.0..ranges.q_mvar.1),
                v_set_pu: 1.0,
                theta_set_rad: 0.0,
            },
        })
        .collect()
}

fn sample_lines(
    ranges: &RegimeRanges,
    topology: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Vec<EngineeringLine> {
    topology
        .iter()
        .map(|&(from, to)| EngineeringLine {
            from,
            to,
            length_km: rng.random_range(ranges.length_km.0..ranges.length_km.1),
            r_ohm_per_km: rng.random_range(ranges.r_per_km.0..ranges.r_per_km.1),
            x_ohm_per_km: rng.random_range(ranges.x_per_km.0..ranges.x_per_km.1),
            c_nf_per_km: rng.random_range(ranges.c_nf_per_km.0..ranges.c_nf_per_km.1),
        })
        .collect()
}

/// One synthesis attempt from an already-derived stream.
pub fn try_synthesize(
    regime: Regime,
    n: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Scenario, Rejection> {
    if n < 2 {
        return Err(Rejection::Degenerate);
    }
    let ranges = RegimeRanges::for_regime(regime);
    let topology = sample_topology(n, rng);
    let types = assign_bus_types(n, DEFAULT_PV_PROBABILITY, rng);
    let lines = sample_lines(&ranges, &topology, rng);
    let buses = sample_operating_point(&ranges, &types, rng);
    let eng = EngineeringGrid {
        buses,
        lines,
        v_base: ranges.v_base,
        s_base: ranges.s_base,
        regime,
    };
    let grid = to_per_unit(&eng).map_err(|_| Rejection::Degenerate)?;
    if !validate_grid(&grid).is_valid() {
        return Err(Rejection::Disconnected);
    }
    let y = build_admittance(&grid).map_err(|_| Rejection::Disconnected)?;
    let initial_state = State::flat_start(&grid);
    match nr_solve(&grid, &y, &initial_state, REFERENCE_TOL, REFERENCE_MAX_ITER) {
        Ok((reference_state, mut report)) if report.converged => {
            // timing is a live measurement; zero it so stored scenarios are
            // byte-reproducible
            report.wall_time = 0.0;
            Ok(Scenario {
                regime,
                seed,
                grid,
                initial_state,
                reference_state,
                nr_report: report,
            })
        }
        _ => Err(Rejection::NonConvergent),
    }
}

/// Rejection-sampled scenario for one corpus index. Returns the scenario and
/// the rejections hit along the way.
pub fn synthesize_scenario(
    regime: Regime,
    n_range: (usize, usize),
    master_seed: u64,
    index: u64,
    retry_limit: usize,
) -> Result<(Scenario, Vec<Rejection>), SynthError> {
    let mut rejections = Vec::new();
    for attempt in 0..retry_limit {
        let mut rng = derive_rng(master_seed, index, attempt as u64);
        let n = rng.random_range(n_range.0..=n_range.1);
        let seed = splitmix64(master_seed ^ index.rotate_left(17) ^ attempt as u64);
        match try_synthesize(regime, n, seed, &mut rng) {
            Ok(s) => return Ok((s, rejections)),
            Err(r) => rejections.push(r),
        }
    }
    Err(SynthError::Exhausted {
        index,
        attempts: retry_limit,
    })
}

/// Tukey fences over a pooled sample: `[Q1 − 1.5·IQR, Q3 + 1.5·IQR]` with
/// linear-interpolation quantiles.
pub fn iqr_fences(pool: &[f64]) -> Result<(f64, f64), SynthError> {
    if pool.is_empty() {
        return Err(SynthError::EmptyCorpus);
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    Ok((q1 - 1.5 * iqr, q3 + 1.5 * iqr))
}

/// Linear-interpolation quantile of an ascending sample
/// (`h = (n−1)·p` between order statistics).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// True when every reference voltage magnitude lies within the fences.
pub fn within_fences(scenario: &Scenario, fences: (f64, f64)) -> bool {
    scenario
        .reference_state
        .v
        .iter()
        .all(|&v| v >= fences.0 && v <= fences.1)
}

/// Tukey IQR filter over pooled per-bus reference voltage magnitudes.
/// A scenario is dropped iff any of its bus magnitudes falls outside the
/// fences.
pub fn iqr_filter(
    scenarios: Vec<Scenario>,
) -> Result<(Vec<Scenario>, Vec<Scenario>, (f64, f64)), SynthError> {
    let pool: Vec<f64> = scenarios
        .iter()
        .flat_map(|s| s.reference_state.v.iter().copied())
        .collect();
    let fences = iqr_fences(&pool)?;
    let (kept, dropped) = scenarios
        .into_iter()
        .partition(|s| within_fences(s, fences));
    Ok((kept, dropped, fences))
}

/// Corpus synthesis statistics, including drop counts by reason.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthReport {
    pub requested: usize,
    pub accepted: usize,
    pub attempts: usize,
    pub rejected_nonconvergent: usize,
    pub rejected_disconnected: usize,
    pub rejected_degenerate: usize,
    pub iqr_dropped: usize,
    pub iqr_fences: Option<(f64, f64)>,
}

impl SynthReport {
    fn absorb(&mut self, rejections: &[Rejection]) {
        self.attempts += rejections.len() + 1;
        for r in rejections {
            match r {
                Rejection::NonConvergent => self.rejected_nonconvergent += 1,
                Rejection::Disconnected => self.rejected_disconnected += 1,
                Rejection::Degenerate => self.rejected_degenerate += 1,
            }
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

/// Synthesize exactly `count` scenarios for one regime.
///
/// The first `count` converged draws fix the IQR fences; dropped scenarios
/// are replaced by continuing the index stream and keeping only draws that
/// fall inside the frozen fences, so the filter is idempotent on the result.
pub fn synthesize_corpus(
    regime: Regime,
    n_range: (usize, usize),
    count: usize,
    master_seed: u64,
) -> Result<(Vec<Scenario>, SynthReport), SynthError> {
    if n_range.0 < 2 || n_range.0 > n_range.1 {
        return Err(SynthError::BadSizeRange {
            n_min: n_range.0,
            n_max: n_range.1,
        });
    }
    if count == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    let mut report = SynthReport {
        requested: count,
        ..Default::default()
    };

    let initial: Vec<_> = (0..count as u64)
        .into_par_iter()
        .map(|index| synthesize_scenario(regime, n_range, master_seed, index, DEFAULT_RETRY_LIMIT))
        .collect::<Result<_, _>>()?;
    for (_, rejections) in &initial {
        report.absorb(rejections);
    }
    let scenarios: Vec<Scenario> = initial.into_iter().map(|(s, _)| s).collect();

    let (mut kept, dropped, fences) = iqr_filter(scenarios)?;
    report.iqr_dropped = dropped.len();
    report.iqr_fences = Some(fences);

    // Replace IQR casualties with in-fence draws from fresh indices.
    let mut next_index = count as u64;
    let max_extra_indices = (DEFAULT_RETRY_LIMIT * count) as u64;
    while kept.len() < count {
        if next_index > count as u64 + max_extra_indices {
            return Err(SynthError::Exhausted {
                index: next_index,
                attempts: DEFAULT_RETRY_LIMIT,
            });
        }
        let missing = count - kept.len();
        let batch: Vec<_> = (next_index..next_index + missing as u64)
            .into_par_iter()
            .map(|index| {
                synthesize_scenario(regime, n_range, master_seed, index, DEFAULT_RETRY_LIMIT)
            })
            .collect::<Result<_, _>>()?;
        next_index += missing as u64;
        for (scenario, rejections) in batch {
            report.absorb(&rejections);
            if within_fences(&scenario, fences) {
                kept.push(scenario);
            } else {
                report.iqr_dropped += 1;
            }
        }
    }
    report.accepted = kept.len();
    Ok((kept, report))
}
