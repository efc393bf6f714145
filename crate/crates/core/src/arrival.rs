//! Arrival times `m(x, S)` extracted from level-set runs, sublevel sets, and
//! the regularity checks run against them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CoefficientField, FieldSpec};
use crate::grid::{hausdorff, Grid2D, GridSet};
use crate::levelset::{cfl_dt, InitialSet, Solver, SolverOptions, StopRule};

#[derive(Debug, Clone)]
pub struct ArrivalTimeField {
    pub grid: Grid2D,
    /// First-crossing time per node; `inf` where the front never arrived.
    pub m: Vec<f64>,
    pub source: String,
    pub field_id: String,
    pub horizon: f64,
    /// Nominal solver step.
    pub dt: f64,
}

/// Level-set values captured at fixed times during a run.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub u: Vec<f64>,
}

impl ArrivalTimeField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.m[self.grid.idx(i, j)]
    }

    /// Value at the node nearest to `x`, if inside the grid.
    pub fn at_point(&self, x: [f64; 2]) -> Option<f64> {
        self.grid.nearest_node(x).map(|(i, j)| self.at(i, j))
    }

    pub fn max_finite(&self) -> f64 {
        self.m.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max)
    }

    /// Rows `x,y,m` with `inf` for unreached nodes.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut s = String::with_capacity(g.len() * 32);
        s.push_str("x,y,m\n");
        for j in 0..g.ny {
            for i in 0..g.nx {
                let p = g.position(i, j);
                let v = self.at(i, j);
                if v.is_finite() {
                    let _ = writeln!(s, "{},{},{}", p[0], p[1], v);
                } else {
                    let _ = writeln!(s, "{},{},inf", p[0], p[1]);
                }
            }
        }
        s
    }

    /// Front position along each transverse row: the largest normal
    /// coordinate reached by time `t`, interpolated between nodes.
    pub fn front_profile(&self, t: f64) -> Vec<f64> {
        let g = &self.grid;
        (0..g.ny)
            .map(|j| {
                let mut last = None;
                for i in 0..g.nx {
                    if self.at(i, j) <= t {
                        last = Some(i);
                    }
                }
                match last {
                    None => f64::NEG_INFINITY,
                    Some(i) if i + 1 < g.nx => {
                        let (a, b) = (self.at(i, j), self.at(i + 1, j));
                        let frac = if b.is_finite() && b > a { ((t - a) / (b - a)).clamp(0.0, 1.0) } else { 0.0 };
                        g.normal_coord(i) + frac * g.spacing
                    }
                    Some(i) => g.normal_coord(i),
                }
            })
            .collect()
    }
}

/// Runs the flow from `set` until `rule` holds (or to `t_max` when `rule`
/// is `None`) and returns first-crossing times plus snapshots of `u`.
pub fn compute_arrival_with(
    field: &CoefficientField,
    set: &InitialSet,
    grid: &Grid2D,
    rule: Option<&StopRule>,
    t_max: f64,
    snapshot_times: &[f64],
    opts: SolverOptions,
) -> Result<(ArrivalTimeField, Vec<Snapshot>)> {
    set.check_ball_radius(field.spec.c_min)?;
    let mut solver = Solver::new(grid, field, set, opts)?;
    let mut snaps = Vec::new();
    let mut times: Vec<f64> = snapshot_times.iter().copied().filter(|&t| t <= t_max).collect();
    times.sort_by(f64::total_cmp);
    for t in times {
        solver.run(&StopRule::Time(t), t_max)?;
        snaps.push(Snapshot { t, u: solver.state().u.clone() });
    }
    match rule {
        Some(r) => solver.run(r, t_max)?,
        None => solver.run(&StopRule::Time(t_max), t_max)?,
    }
    let dt = solver.dt();
    let state = solver.into_state();
    Ok((
        ArrivalTimeField {
            grid: *grid,
            m: state.first_crossing,
            source: set.label(),
            field_id: field.id(),
            horizon: t_max,
            dt,
        },
        snaps,
    ))
}

/// Arrival times up to `t_max`.
pub fn compute_arrival(field: &CoefficientField, set: &InitialSet, grid: &Grid2D, t_max: f64) -> Result<ArrivalTimeField> {
    compute_arrival_with(field, set, grid, None, t_max, &[], SolverOptions::default()).map(|(m, _)| m)
}

/// `S_t = {m <= t}`.
pub fn sublevel_set(m: &ArrivalTimeField, t: f64) -> GridSet {
    GridSet::new(m.grid, m.m.iter().map(|&v| v <= t).collect())
}

/// Closing of `S`: erosion by 1 of the dilation by `R0 + 1`.
pub fn regularize_set(s: &GridSet, r0: f64) -> Result<GridSet> {
    if s.is_empty() {
        return Err(Error::EmptySet("regularize_set"));
    }
    Ok(s.dilate(r0 + 1.0).erode(1.0))
}

/// Constants shared by all checks. `tau = 13 R0 / (2 c_min)` and `L = tau / R0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub c_max: f64,
    pub c_min: f64,
    pub l: f64,
    pub l0: f64,
    pub r0: f64,
    pub tau: f64,
}

impl Constants {
    pub fn new(spec: &FieldSpec, r0: f64) -> Self {
        let tau = 13.0 * r0 / (2.0 * spec.c_min);
        Self {
            c_max: spec.c_max,
            c_min: spec.c_min,
            l: tau / r0,
            l0: spec.lipschitz_bound,
            r0,
            tau,
        }
    }
}

/// Outcome of one check; `pass` iff `max_violation <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub check: String,
    pub constants: Constants,
    pub fitted: BTreeMap<String, f64>,
    pub location: Option<[f64; 2]>,
    pub max_violation: f64,
    pub pass: bool,
    pub tolerance: f64,
}

impl RegularityReport {
    fn new(check: &str, constants: Constants, max_violation: f64, location: Option<[f64; 2]>, tolerance: f64) -> Self {
        Self {
            check: check.to_string(),
            constants,
            fitted: BTreeMap::new(),
            location,
            max_violation,
            pass: max_violation <= tolerance,
            tolerance,
        }
    }

    fn fit(mut self, key: &str, v: f64) -> Self {
        self.fitted.insert(key.to_string(), v);
        self
    }

    /// One-line summary for logs.
    pub fn summary(&self) -> String {
        format!(
            "{:<26} {} violation {:.4e} tolerance {:.4e}",
            self.check,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_violation,
            self.tolerance
        )
    }
}

/// Tracks the worst sample and where it happened.
struct Worst {
    v: f64,
    at: Option<[f64; 2]>,
}

impl Worst {
    fn new() -> Self {
        Self { v: f64::NEG_INFINITY, at: None }
    }

    fn see(&mut self, v: f64, at: [f64; 2]) {
        if v > self.v || (v.is_nan() && !self.v.is_nan()) {
            self.v = v;
            self.at = Some(at);
        }
    }

    fn value(&self) -> f64 {
        if self.v == f64::NEG_INFINITY {
            0.0
        } else {
            self.v
        }
    }
}

fn neighbours(g: &Grid2D, i: usize, j: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    let h = g.spacing;
    [(1isize, 0isize), (0, 1), (1, 1), (1, -1)].into_iter().filter_map(move |(di, dj)| {
        let ii = i as isize + di;
        let mut jj = j as isize + dj;
        if ii < 0 || ii >= g.nx as isize {
            return None;
        }
        if g.transverse_periodic {
            jj = jj.rem_euclid(g.ny as isize);
        } else if jj < 0 || jj >= g.ny as isize {
            return None;
        }
        Some((ii as usize, jj as usize, h * ((di * di + dj * dj) as f64).sqrt()))
    })
}

/// `|m(x) - m(y)| <= (2/c_min) e^{L0 min(m(x), m(y))} |x - y|` over
/// neighbouring node pairs with `min m <= t_cap`.
///
/// The violation is reported in length units, `(|Δm| - bound) / slope`, so
/// the tolerance `2h` is the spatial slack.
pub fn check_small_scale_lipschitz(m: &ArrivalTimeField, k: Constants, t_cap: f64) -> RegularityReport {
    let g = &m.grid;
    let mut worst = Worst::new();
    let mut max_ratio: f64 = 0.0;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let a = m.at(i, j);
            if !a.is_finite() {
                continue;
            }
            for (ii, jj, d) in neighbours(g, i, j) {
                let b = m.at(ii, jj);
                if !b.is_finite() || a.min(b) > t_cap {
                    continue;
                }
                let slope = 2.0 / k.c_min * (k.l0 * a.min(b)).exp();
                let diff = (a - b).abs();
                max_ratio = max_ratio.max(diff / d);
                worst.see((diff - slope * d) / slope, g.position(i, j));
            }
        }
    }
    RegularityReport::new("small_scale_lipschitz", k, worst.value(), worst.at, 2.0 * g.spacing)
        .fit("max_difference_quotient", max_ratio)
}

/// Deterministic sample of up to `n` node pairs at distance `>= 1` among reached nodes.
fn sample_far_pairs(m: &ArrivalTimeField, n: usize, seed: u64) -> Vec<(usize, usize, f64)> {
    let reached: Vec<usize> = (0..m.m.len()).filter(|&k| m.m[k].is_finite()).collect();
    if reached.len() < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 20 * n {
        tries += 1;
        let a = reached[rng.gen_range(0..reached.len())];
        let b = reached[rng.gen_range(0..reached.len())];
        let d = m.grid.node_distance(a, b);
        if d >= 1.0 {
            out.push((a, b, d));
        }
    }
    out
}

/// `|m(x) - m(y)| <= tau + L |x - y|` on sampled pairs at distance `>= 1`.
///
/// Also reports the smallest `tau` that works with the given `L`, the
/// smallest `L` that works with the given `tau`, and the smallest `L` with
/// `tau = 0`.
pub fn check_large_scale_lipschitz(m: &ArrivalTimeField, k: Constants, n_pairs: usize, seed: u64) -> RegularityReport {
    let pairs = sample_far_pairs(m, n_pairs, seed);
    let mut worst = Worst::new();
    let (mut tau_hat, mut l_hat, mut slope_hat) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for &(a, b, d) in &pairs {
        let diff = (m.m[a] - m.m[b]).abs();
        let (i, j) = m.grid.coords(a);
        worst.see(diff - k.tau - k.l * d, m.grid.position(i, j));
        tau_hat = tau_hat.max(diff - k.l * d);
        l_hat = l_hat.max((diff - k.tau).max(0.0) / d);
        slope_hat = slope_hat.max(diff / d);
    }
    RegularityReport::new("large_scale_lipschitz", k, worst.value(), worst.at, 2.0 * m.grid.spacing / k.c_min)
        .fit("pairs", pairs.len() as f64)
        .fit("tau_hat", tau_hat.max(0.0))
        .fit("l_hat", l_hat)
        .fit("slope_hat_tau0", slope_hat)
}

/// For sampled reached `x0` whose ball `B_R0(x0)` lies in the grid and with
/// `m(x0) + tau <= horizon`: every node of the ball (shrunk by one cell) has
/// `m <= m(x0) + tau`.
pub fn check_filling_time(m: &ArrivalTimeField, k: Constants, n_centres: usize, seed: u64) -> RegularityReport {
    let g = &m.grid;
    let h = g.spacing;
    let r = k.r0 - h;
    let rc = (r / h).floor() as isize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<usize> = (0..g.len())
        .filter(|&q| {
            let (i, j) = g.coords(q);
            let inside_i = i as isize - rc >= 0 && i as isize + rc < g.nx as isize;
            let inside_j = g.transverse_periodic || (j as isize - rc >= 0 && j as isize + rc < g.ny as isize);
            m.m[q].is_finite() && m.m[q] + k.tau <= m.horizon && inside_i && inside_j
        })
        .collect();
    let mut worst = Worst::new();
    let mut worst_fill: f64 = 0.0;
    let mut used = 0;
    for _ in 0..n_centres.min(eligible.len().max(1)) {
        if eligible.is_empty() {
            break;
        }
        used += 1;
        let c = eligible[rng.gen_range(0..eligible.len())];
        let (ci, cj) = g.coords(c);
        let m0 = m.m[c];
        let mut fill: f64 = 0.0;
        for dj in -rc..=rc {
            for di in -rc..=rc {
                if ((di * di + dj * dj) as f64).sqrt() * h > r {
                    continue;
                }
                let ii = (ci as isize + di) as usize;
                let jj = if g.transverse_periodic {
                    (cj as isize + dj).rem_euclid(g.ny as isize) as usize
                } else {
                    (cj as isize + dj) as usize
                };
                fill = fill.max(m.at(ii, jj) - m0);
            }
        }
        worst_fill = worst_fill.max(fill);
        worst.see(fill - k.tau, g.position(ci, cj));
    }
    RegularityReport::new("filling_time", k, worst.value(), worst.at, h / k.c_min)
        .fit("centres", used as f64)
        .fit("max_fill_time", worst_fill)
}

/// `S_s + B_{((t-s)-tau)_+ / L} ⊆ S_t` up to a one-cell collar, for each `(s, t)`.
pub fn check_monotone_growth(m: &ArrivalTimeField, k: Constants, pairs: &[(f64, f64)]) -> RegularityReport {
    let g = &m.grid;
    let h = g.spacing;
    let mut worst = Worst::new();
    for &(s, t) in pairs {
        let ss = sublevel_set(m, s);
        if ss.is_empty() {
            continue;
        }
        let radius = (((t - s) - k.tau).max(0.0) / k.l - h).max(0.0);
        let d = ss.distance_field();
        for (q, &dq) in d.iter().enumerate() {
            if dq <= radius + 1e-9 * h {
                let (i, j) = g.coords(q);
                worst.see(m.m[q] - t, g.position(i, j));
            }
        }
    }
    RegularityReport::new("monotone_growth", k, worst.value(), worst.at, h / k.c_min).fit("pairs", pairs.len() as f64)
}

/// Fitted `C2 = max ((d_H(S_t, S_s) - 2 c_max |t - s| - h)_+ / |t - s|^{1/2})`.
pub fn fit_time_regularity(m: &ArrivalTimeField, c_max: f64, pairs: &[(f64, f64)]) -> Result<f64> {
    let h = m.grid.spacing;
    let mut c2: f64 = 0.0;
    for &(s, t) in pairs {
        let dt = (t - s).abs();
        if dt == 0.0 {
            continue;
        }
        let d = hausdorff(&sublevel_set(m, s), &sublevel_set(m, t))?;
        c2 = c2.max((d - 2.0 * c_max * dt - h).max(0.0) / dt.sqrt());
    }
    Ok(c2)
}

/// Compares the fitted time-regularity constant at two resolutions: stable
/// when the larger is at most twice the smaller, up to an additive `h_coarse`.
pub fn check_time_regularity(
    coarse: &ArrivalTimeField,
    fine: &ArrivalTimeField,
    k: Constants,
    pairs: &[(f64, f64)],
) -> Result<RegularityReport> {
    let cc = fit_time_regularity(coarse, k.c_max, pairs)?;
    let cf = fit_time_regularity(fine, k.c_max, pairs)?;
    let v = cc.max(cf) - 2.0 * cc.min(cf);
    Ok(RegularityReport::new("time_regularity", k, v, None, coarse.grid.spacing)
        .fit("c2_coarse", cc)
        .fit("c2_fine", cf))
}

/// `sup |m(x, S) - m(x, S')| <= (2/c_min) d_H(S, S')`, values clipped at the
/// common horizon, tolerance `4h / c_min`.
pub fn check_data_continuity(a: &ArrivalTimeField, b: &ArrivalTimeField, d_h: f64, k: Constants) -> RegularityReport {
    let g = &a.grid;
    let cap = a.horizon.min(b.horizon);
    let mut worst = Worst::new();
    let mut sup: f64 = 0.0;
    for q in 0..g.len() {
        let (x, y) = (a.m[q].min(cap), b.m[q].min(cap));
        let diff = (x - y).abs();
        sup = sup.max(diff);
        let (i, j) = g.coords(q);
        worst.see(diff - 2.0 / k.c_min * d_h, g.position(i, j));
    }
    RegularityReport::new("data_continuity", k, worst.value(), worst.at, 4.0 * g.spacing / k.c_min)
        .fit("hausdorff", d_h)
        .fit("sup_difference", sup)
}

/// `m_A = m_B` on `{m_A <= t}` eroded by `collar`, tolerance `2 dt`.
pub fn check_sublevel_localization(
    a: &ArrivalTimeField,
    b: &ArrivalTimeField,
    t: f64,
    collar: f64,
    k: Constants,
) -> RegularityReport {
    let region = sublevel_set(a, t).erode(collar);
    let g = &a.grid;
    let mut worst = Worst::new();
    for q in (0..g.len()).filter(|&q| region.mask[q]) {
        let (i, j) = g.coords(q);
        worst.see((a.m[q] - b.m[q]).abs(), g.position(i, j));
    }
    RegularityReport::new("sublevel_localization", k, worst.value(), worst.at, 2.0 * a.dt)
        .fit("region_nodes", region.count() as f64)
        .fit("collar", collar)
}

/// `|m_full(x) - (t + m_restart(x))| <= 4 tau` on `{m_full > t}`, where the
/// restart starts from the regularized `S_t`.
pub fn check_semigroup(full: &ArrivalTimeField, restart: &ArrivalTimeField, t: f64, k: Constants) -> RegularityReport {
    let g = &full.grid;
    let cap = full.horizon.min(t + restart.horizon);
    let mut worst = Worst::new();
    let mut sup: f64 = 0.0;
    for q in 0..g.len() {
        if full.m[q] <= t {
            continue;
        }
        let x = full.m[q].min(cap);
        let y = (t + restart.m[q]).min(cap);
        let diff = (x - y).abs();
        sup = sup.max(diff);
        let (i, j) = g.coords(q);
        worst.see(diff - 4.0 * k.tau, g.position(i, j));
    }
    RegularityReport::new("semigroup", k, worst.value(), worst.at, 2.0 * g.spacing / k.c_min).fit("sup_difference", sup)
}

/// `x ∈ S_t ⟺ u(x, t) >= 0` at each snapshot, up to one time step: the
/// violation is the largest `|m(x) - t|` over disagreeing nodes.
pub fn check_evolution_consistency(m: &ArrivalTimeField, snaps: &[Snapshot], k: Constants) -> RegularityReport {
    let g = &m.grid;
    let mut worst = Worst::new();
    let mut mismatches = 0usize;
    for s in snaps {
        for q in 0..g.len() {
            let in_s = m.m[q] <= s.t;
            let reached = s.u[q] >= 0.0;
            if in_s != reached {
                mismatches += 1;
                let (i, j) = g.coords(q);
                worst.see((m.m[q] - s.t).abs(), g.position(i, j));
            }
        }
    }
    RegularityReport::new("evolution_consistency", k, worst.value(), worst.at, m.dt)
        .fit("mismatched_nodes", mismatches as f64)
        .fit("snapshots", snaps.len() as f64)
}

/// Nominal step of a run on `grid` with `field`.
pub fn nominal_dt(grid: &Grid2D, field: &CoefficientField) -> f64 {
    cfl_dt(grid.spacing, field.spec.c_max)
}

/// Standard regularity configuration: a flat front along `(1, 0)` in a
/// transverse-periodic window, with companion runs for the comparison checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub spec: FieldSpec,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub h: f64,
    pub width: f64,
    pub r0: f64,
    pub horizon: f64,
    /// Horizon of the `h / 2` run used by the time-regularity check.
    pub fine_horizon: f64,
    /// Offset of the shifted half-space for data continuity.
    pub shift: f64,
    /// Sublevel time around which the field is spliced.
    pub splice_time: f64,
    pub splice_margin: f64,
    pub blend_width: f64,
    pub restart_time: f64,
    pub lipschitz_pairs: usize,
    pub filling_centres: usize,
    pub time_pairs: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            spec: FieldSpec::default(),
            n_seeds: 8,
            master_seed: 1,
            h: 0.1,
            width: 40.0,
            r0: 2.0,
            horizon: 20.0,
            fine_horizon: 10.0,
            shift: 1.0,
            splice_time: 8.0,
            splice_margin: 2.0,
            blend_width: 0.5,
            restart_time: 10.0,
            lipschitz_pairs: 10_000,
            filling_centres: 200,
            time_pairs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedVerification {
    pub index: usize,
    pub seed: u64,
    pub reports: Vec<RegularityReport>,
}

impl SeedVerification {
    pub fn pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }
}

/// Deterministic stratified `(s, t)` pairs with `0 <= s < t <= t_max`.
pub fn time_pairs(t_max: f64, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let t = t_max * (k as f64 + rng.gen::<f64>()) / n as f64;
            let s = t * rng.gen::<f64>();
            (s, t)
        })
        .collect()
}

/// Runs the nine checks for seed index `k`.
pub fn verify_seed(cfg: &VerifyConfig, k: usize) -> Result<SeedVerification> {
    let seed = crate::field::derive_seed(cfg.master_seed, k as u64);
    let mut spec = cfg.spec.clone();
    spec.transverse_period = Some(cfg.width);
    let field = crate::field::sample_field(&spec, seed)?;
    let consts = Constants::new(&spec, cfg.r0);
    let e = [1.0, 0.0];
    let n_max = cfg.horizon * 1.5 + 6.0;
    let grid = Grid2D::front_window(e, -4.0, n_max, cfg.width, cfg.h, true)?;
    let set = InitialSet::half_space(e, 0.0, cfg.r0);
    let opts = SolverOptions::default();
    let snaps_at: Vec<f64> = (1..=4).map(|q| cfg.horizon * q as f64 / 4.0).collect();
    let (m, snaps) = compute_arrival_with(&field, &set, &grid, None, cfg.horizon, &snaps_at, opts)?;

    let mut reports = vec![
        check_small_scale_lipschitz(&m, consts, cfg.horizon),
        check_large_scale_lipschitz(&m, consts, cfg.lipschitz_pairs, seed ^ 1),
        check_filling_time(&m, consts, cfg.filling_centres, seed ^ 2),
        check_monotone_growth(&m, consts, &time_pairs(cfg.horizon, cfg.time_pairs, seed ^ 3)),
    ];

    let fine_grid = Grid2D::front_window(e, -4.0, cfg.fine_horizon * 1.5 + 6.0, cfg.width, cfg.h / 2.0, true)?;
    let fine = compute_arrival_with(&field, &set, &fine_grid, None, cfg.fine_horizon, &[], opts)?.0;
    reports.push(check_time_regularity(&m, &fine, consts, &time_pairs(cfg.fine_horizon, cfg.time_pairs, seed ^ 4))?);

    let shifted = InitialSet::half_space(e, -cfg.shift, cfg.r0);
    let d_h = hausdorff(&set.to_grid_set(&grid)?, &shifted.to_grid_set(&grid)?)?;
    let m_shift = compute_arrival_with(&field, &shifted, &grid, None, cfg.horizon, &[], opts)?.0;
    reports.push(check_data_continuity(&m, &m_shift, d_h, consts));

    let region = sublevel_set(&m, cfg.splice_time).dilate(cfg.splice_margin);
    let outer = CoefficientField::constant_in(&spec, spec.c_max)?;
    let spliced = crate::field::splice_fields(&field, &outer, &region, cfg.blend_width)?;
    let t_b = cfg.splice_time + cfg.splice_margin;
    let m_b = compute_arrival_with(&spliced, &set, &grid, None, t_b, &[], opts)?.0;
    reports.push(check_sublevel_localization(&m, &m_b, cfg.splice_time, cfg.blend_width + 3.0 * cfg.h, consts));

    let restart_set = regularize_set(&sublevel_set(&m, cfg.restart_time), cfg.r0)?;
    let m_r = compute_arrival_with(
        &field,
        &InitialSet::mask(restart_set, cfg.r0),
        &grid,
        None,
        cfg.horizon - cfg.restart_time,
        &[],
        opts,
    )?
    .0;
    reports.push(check_semigroup(&m, &m_r, cfg.restart_time, consts));
    reports.push(check_evolution_consistency(&m, &snaps, consts));
    Ok(SeedVerification { index: k, seed, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NormalBoundary;

    fn constant_run(t_max: f64) -> (ArrivalTimeField, Constants) {
        let one = CoefficientField::constant(1.0).unwrap();
        let g = Grid2D::front_window([1.0, 0.0], -3.0, 14.0, 4.0, 0.1, true).unwrap();
        let set = InitialSet::half_space([1.0, 0.0], 0.0, 2.0);
        let m = compute_arrival(&one, &set, &g, t_max).unwrap();
        (m, Constants::new(&one.spec, 2.0))
    }

    #[test]
    fn constants_from_filling_time() {
        let k = Constants::new(&FieldSpec::default(), 2.0);
        assert_eq!(k.tau, 13.0);
        assert_eq!(k.l, 6.5);
    }

    #[test]
    fn flat_front_arrival_and_source() {
        let (m, _) = constant_run(11.0);
        let v = m.at_point([10.0, 0.0]).unwrap();
        assert!((v - 10.0).abs() < 0.2, "{v}");
        assert_eq!(m.at_point([-1.0, 0.5]).unwrap(), 0.0);
        let s0 = sublevel_set(&m, 0.0);
        let src = GridSet::from_fn(m.grid, |p| p[0] <= 0.0);
        assert_eq!(s0, src);
        assert!(sublevel_set(&m, 3.0).is_subset_of(&sublevel_set(&m, 5.0)));
    }

    #[test]
    fn constant_medium_checks_pass() {
        let (m, k) = constant_run(11.0);
        for r in [
            check_small_scale_lipschitz(&m, k, 10.0),
            check_large_scale_lipschitz(&m, k, 2000, 1),
            check_monotone_growth(&m, k, &[(1.0, 3.0), (2.0, 10.0)]),
            check_data_continuity(&m, &m, 0.0, k),
            check_sublevel_localization(&m, &m, 5.0, 0.5, k),
        ] {
            assert!(r.pass, "{}", r.summary());
        }
        let c2 = fit_time_regularity(&m, k.c_max, &[(1.0, 2.0), (2.0, 6.0)]).unwrap();
        assert_eq!(c2, 0.0);
    }

    #[test]
    fn regularize_disc_grows_by_r0() {
        let g = Grid2D::square([0.0, 0.0], 10.0, 0.1, NormalBoundary::Clamped).unwrap();
        let s = GridSet::from_fn(g, |p| p[0].hypot(p[1]) <= 5.0);
        let r = regularize_set(&s, 2.0).unwrap();
        let expect = GridSet::from_fn(g, |p| p[0].hypot(p[1]) <= 7.0);
        assert!(s.is_subset_of(&r));
        assert!(hausdorff(&r, &expect).unwrap() <= 0.1 + 1e-9);
        let rr = regularize_set(&r, 2.0).unwrap();
        assert!(r.is_subset_of(&rr));
    }

    #[test]
    fn regularize_merges_close_discs() {
        let g = Grid2D::square([0.0, 0.0], 6.0, 0.1, NormalBoundary::Clamped).unwrap();
        let s = GridSet::from_fn(g, |p| (p[0] - 2.5).hypot(p[1]) <= 1.0 || (p[0] + 2.5).hypot(p[1]) <= 1.0);
        let r = regularize_set(&s, 2.0).unwrap();
        let (i, j) = g.nearest_node([0.0, 0.0]).unwrap();
        assert!(r.mask[g.idx(i, j)], "gap of 3 < 2 (R0 + 1) must close");
        assert!(hausdorff(&r, &s).unwrap() <= 2.0 * 2.0 + 2.0 + 2.0 * 0.1);
    }

    #[test]
    fn report_json_has_stable_keys() {
        let (m, k) = constant_run(3.0);
        let r = check_small_scale_lipschitz(&m, k, 3.0);
        let js = serde_json::to_string(&r).unwrap();
        let keys: Vec<&str> = ["check", "constants", "fitted", "location", "max_violation", "pass", "tolerance"].to_vec();
        let mut last = 0;
        for key in keys {
            let at = js.find(&format!("\"{key}\"")).unwrap();
            assert!(at >= last);
            last = at;
        }
    }
}
