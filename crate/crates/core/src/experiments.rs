//! Multi-seed Monte Carlo runs: effective speed, fluctuations, linearity,
//! convergence, direction profile, flatness and ordered localization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::arrival::{compute_arrival_with, ArrivalTimeField};
use crate::error::{Error, Result};
use crate::field::{derive_seed, sample_field, CoefficientField, FieldSpec};
use crate::grid::{Grid2D, GridSet};
use crate::levelset::{InitialSet, SolverOptions, StopRule};
use crate::stats::{self, bootstrap, Bootstrap};

/// Which medium a plan samples for each seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Medium {
    /// The random bump field of `spec`, one independent draw per seed.
    Random,
    Constant(f64),
    /// `lo + (hi - lo)(1 + sin(2 pi x.e / period)) / 2`, varying along the run direction.
    Laminar { lo: f64, hi: f64, period: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub spec: FieldSpec,
    pub medium: Medium,
    pub directions: Vec<[f64; 2]>,
    /// Probe distances, also the nominal times: `m(t e)` is sampled.
    pub times: Vec<f64>,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub h: f64,
    pub width: f64,
    /// Transverse-periodic window (direction `(1, 0)` only) with the field
    /// made periodic in `y` at period `width`.
    pub periodic: bool,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            spec: FieldSpec::default(),
            medium: Medium::Random,
            directions: vec![[1.0, 0.0]],
            times: vec![10.0, 20.0, 40.0, 80.0],
            n_seeds: 64,
            master_seed: 1,
            h: 0.1,
            width: 40.0,
            periodic: true,
            bootstrap_resamples: 2000,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.times.is_empty() || self.times.iter().any(|t| !(*t > 0.0)) {
            return bad("times must be positive".into());
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return bad("times must be strictly increasing".into());
        }
        if self.n_seeds < 2 {
            return bad(format!("n_seeds must be >= 2, got {}", self.n_seeds));
        }
        if !(self.h > 0.0) || !(self.width >= 8.0 * self.h) {
            return bad("need h > 0 and width >= 8 h".into());
        }
        if self.directions.iter().any(|e| !(e[0].hypot(e[1]) > 0.0)) {
            return bad("directions must be non-zero".into());
        }
        if self.periodic && self.directions.iter().any(|e| e[1].abs() > 1e-12 || e[0] <= 0.0) {
            return bad("periodic windows require direction (1, 0)".into());
        }
        if self.periodic && (self.width.fract() != 0.0) {
            return bad("periodic width must be an integer".into());
        }
        Ok(())
    }

    pub fn seed(&self, k: usize) -> u64 {
        derive_seed(self.master_seed, k as u64)
    }

    pub fn field(&self, k: usize, e: [f64; 2]) -> Result<CoefficientField> {
        match self.medium {
            Medium::Random => {
                let mut spec = self.spec.clone();
                spec.transverse_period = if self.periodic { Some(self.width) } else { None };
                sample_field(&spec, self.seed(k))
            }
            Medium::Constant(c) => CoefficientField::constant(c),
            Medium::Laminar { lo, hi, period } => CoefficientField::laminar(lo, hi, e, period),
        }
    }

    fn c_min(&self) -> f64 {
        match self.medium {
            Medium::Random => self.spec.c_min,
            Medium::Constant(c) => c,
            Medium::Laminar { lo, .. } => lo,
        }
    }

    fn c_max(&self) -> f64 {
        match self.medium {
            Medium::Random => self.spec.c_max,
            Medium::Constant(c) => c,
            Medium::Laminar { hi, .. } => hi,
        }
    }

    fn max_time(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

fn unit(e: [f64; 2]) -> [f64; 2] {
    let n = e[0].hypot(e[1]);
    [e[0] / n, e[1] / n]
}

/// One run from the half-space `{x.e <= 0}`, stopped once every probe
/// `t e` has been reached.
fn probe_run(plan: &ExperimentPlan, k: usize, e: [f64; 2]) -> Result<Vec<f64>> {
    let e = unit(e);
    let field = plan.field(k, e)?;
    let grid = Grid2D::front_window(e, -4.0, plan.max_time() + 6.0, plan.width, plan.h, plan.periodic)?;
    let probes: Vec<usize> = plan
        .times
        .iter()
        .map(|&t| {
            let (i, j) = grid.nearest_node([t * e[0], t * e[1]]).expect("probe inside window");
            grid.idx(i, j)
        })
        .collect();
    let set = InitialSet::half_space(e, 0.0, 2.0f64.max(2.0 / plan.c_min()));
    let t_max = 1.25 * plan.max_time() / plan.c_min() + 10.0;
    let (m, _) = compute_arrival_with(
        &field,
        &set,
        &grid,
        Some(&StopRule::ProbesReached(probes.clone())),
        t_max,
        &[],
        SolverOptions::default(),
    )?;
    Ok(probes.iter().map(|&p| m.m[p]).collect())
}

/// Runs `f` for every seed in parallel, keeping results in seed order.
/// Fails unless at least 80% of the seeds succeed.
fn over_seeds<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<(Vec<(usize, T)>, Vec<usize>)> {
    let results: Vec<(usize, Result<T>)> = (0..n).into_par_iter().map(|k| (k, f(k))).collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (k, r) in results {
        match r {
            Ok(v) => ok.push((k, v)),
            Err(_) => failed.push(k),
        }
    }
    if ok.len() * 5 < n * 4 {
        return Err(Error::TooManyFailures { succeeded: ok.len(), total: n });
    }
    Ok((ok, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedEstimate {
    pub direction: [f64; 2],
    pub times: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `samples[s][k] = m(times[k] e)` for seed `seeds[s]`.
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub c_bar: f64,
    pub c_bar_std: f64,
    pub c_bar_ci: [f64; 2],
    pub failed_seeds: Vec<u64>,
    pub mean_increasing: bool,
    pub within_speed_band: bool,
}

impl SpeedEstimate {
    fn from_samples(plan: &ExperimentPlan, e: [f64; 2], seeds: Vec<u64>, samples: Vec<Vec<f64>>, failed: Vec<u64>) -> Self {
        let nt = plan.times.len();
        let col = |k: usize| samples.iter().map(|r| r[k]).collect::<Vec<_>>();
        let mean: Vec<f64> = (0..nt).map(|k| stats::mean(&col(k))).collect();
        let std: Vec<f64> = (0..nt).map(|k| stats::std_dev(&col(k))).collect();
        let t_star = plan.max_time();
        let b = bootstrap(
            &samples,
            |rows| t_star / (rows.iter().map(|r| r[nt - 1]).sum::<f64>() / rows.len() as f64),
            plan.bootstrap_resamples,
            plan.master_seed ^ 0x5eed,
        );
        let tol = 0.05 * plan.c_max();
        Self {
            direction: e,
            times: plan.times.clone(),
            seeds,
            samples,
            mean_increasing: mean.windows(2).all(|w| w[0] < w[1]),
            within_speed_band: b.estimate >= plan.c_min() - tol && b.estimate <= plan.c_max() + tol,
            mean,
            std,
            c_bar: b.estimate,
            c_bar_std: b.std,
            c_bar_ci: [b.lo, b.hi],
            failed_seeds: failed,
        }
    }

    /// Raw samples as `direction_x,direction_y,t,seed,m`.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("direction_x,direction_y,t,seed,m\n");
        self.append_csv_rows(&mut s);
        s
    }

    fn append_csv_rows(&self, s: &mut String) {
        for (seed, row) in self.seeds.iter().zip(&self.samples) {
            for (t, m) in self.times.iter().zip(row) {
                let _ = writeln!(s, "{},{},{},{},{}", self.direction[0], self.direction[1], t, seed, fmt_f(*m));
            }
        }
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "inf".into()
    }
}

/// Probe samples of `m(t e)` over all seeds.
pub fn run_speed_experiment(plan: &ExperimentPlan, e: [f64; 2]) -> Result<SpeedEstimate> {
    plan.validate()?;
    let e = unit(e);
    let (ok, failed) = over_seeds(plan.n_seeds, |k| {
        let row = probe_run(plan, k, e)?;
        if row.iter().all(|v| v.is_finite()) {
            Ok(row)
        } else {
            Err(Error::InvalidSpec("probe not reached".into()))
        }
    })?;
    let seeds = ok.iter().map(|(k, _)| plan.seed(*k)).collect();
    let samples = ok.into_iter().map(|(_, r)| r).collect();
    let failed = failed.into_iter().map(|k| plan.seed(k)).collect();
    Ok(SpeedEstimate::from_samples(plan, e, seeds, samples, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub lambda: f64,
    /// Seeds with `|m - mean| > lambda sqrt(t)`, per probe time.
    pub counts: Vec<usize>,
    pub fraction: f64,
    pub envelope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationStats {
    pub times: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `None` when some `sigma` vanishes (deterministic medium).
    pub beta: Option<f64>,
    pub amplitude: Option<f64>,
    pub r2: Option<f64>,
    pub fit_times: Vec<f64>,
    pub tail_constant: f64,
    pub tails: Vec<TailRow>,
    /// False when no sample exceeds the `λ = 1` threshold, so the envelope
    /// is zero and the tail comparison holds trivially.
    pub tail_informative: bool,
    pub beta_pass: bool,
    pub tail_pass: bool,
}

/// Solves `C e^{-1/C} = p` for `C >= 0`; the left side increases in `C`.
fn envelope_constant(p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    let f = |c: f64| c * (-1.0 / c).exp() - p;
    let (mut lo, mut hi) = (1e-6, 1.0);
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub const BETA_CEILING: f64 = 0.6;
pub const R2_FLOOR: f64 = 0.8;

/// Fluctuation exponent and sub-Gaussian tail envelope from probe samples.
pub fn fluctuation_stats(est: &SpeedEstimate) -> FluctuationStats {
    let times = est.times.clone();
    let sigma = est.std.clone();
    let t_max = *times.last().unwrap();
    let fit_times: Vec<f64> = times.iter().copied().filter(|&t| t >= t_max / 10.0).collect();
    let fit_sigma: Vec<f64> = times.iter().zip(&sigma).filter(|(t, _)| **t >= t_max / 10.0).map(|(_, s)| *s).collect();
    let fit = if fit_sigma.iter().all(|s| *s > 0.0) && fit_times.len() >= 2 {
        let lx: Vec<f64> = fit_times.iter().map(|t| t.ln()).collect();
        let ly: Vec<f64> = fit_sigma.iter().map(|s| s.ln()).collect();
        stats::ols(&lx, &ly)
    } else {
        None
    };
    let n = est.samples.len();
    let tail = |lambda: f64| -> (Vec<usize>, f64) {
        let counts: Vec<usize> = (0..times.len())
            .map(|k| {
                let thr = lambda * times[k].sqrt();
                est.samples.iter().filter(|r| (r[k] - est.mean[k]).abs() > thr).count()
            })
            .collect();
        let frac = counts.iter().sum::<usize>() as f64 / (n * times.len()).max(1) as f64;
        (counts, frac)
    };
    let (c1, p1) = tail(1.0);
    let cst = envelope_constant(p1);
    let env = |l: f64| if cst > 0.0 { cst * (-l * l / cst).exp() } else { 0.0 };
    let mut tails = vec![TailRow { lambda: 1.0, counts: c1, fraction: p1, envelope: env(1.0) }];
    for lambda in [2.0, 3.0] {
        let (counts, fraction) = tail(lambda);
        tails.push(TailRow { lambda, counts, fraction, envelope: env(lambda) });
    }
    let tail_pass = tails[1..].iter().all(|r| r.fraction <= r.envelope + 1e-15);
    FluctuationStats {
        beta_pass: fit.map_or(false, |f| f.slope <= BETA_CEILING && f.r2 >= R2_FLOOR),
        beta: fit.map(|f| f.slope),
        amplitude: fit.map(|f| f.intercept.exp()),
        r2: fit.map(|f| f.r2),
        fit_times,
        times,
        sigma,
        tail_constant: cst,
        tail_informative: p1 > 0.0,
        tails,
        tail_pass,
    }
}

pub fn run_fluctuation_experiment(plan: &ExperimentPlan, e: [f64; 2]) -> Result<(SpeedEstimate, FluctuationStats)> {
    if plan.n_seeds < 64 {
        return Err(Error::InvalidSpec(format!("fluctuation experiment needs >= 64 seeds, got {}", plan.n_seeds)));
    }
    let est = run_speed_experiment(plan, e)?;
    let fl = fluctuation_stats(&est);
    Ok((est, fl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityRow {
    pub t: f64,
    pub s: f64,
    pub delta: f64,
    pub scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub rows: Vec<LinearityRow>,
    /// `scaled(t_hi, t_hi) - 2 scaled(t_lo, t_lo)` for the extreme diagonal pairs.
    pub statistic: f64,
    pub statistic_std: f64,
    pub pass: bool,
}

fn time_index(times: &[f64], t: f64) -> Option<usize> {
    times.iter().position(|&x| (x - t).abs() <= 1e-9 * t.max(1.0))
}

fn delta_scaled(times: &[f64], mean: &[f64], t: f64, s: f64) -> Option<f64> {
    let (a, b, c) = (time_index(times, t)?, time_index(times, s)?, time_index(times, t + s)?);
    Some((mean[a] + mean[b] - mean[c]).abs() / t.powf(2.0 / 3.0))
}

fn column_means(rows: &[&Vec<f64>], nt: usize) -> Vec<f64> {
    (0..nt).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64).collect()
}

/// `Δ(t,s) = |μ(t) + μ(s) − μ(t+s)|` over all `(t, s, t+s)` triples present,
/// and the envelope comparison of the extreme diagonal pairs.
pub fn check_approximate_linearity(est: &SpeedEstimate, resamples: usize, seed: u64) -> LinearityReport {
    let times = &est.times;
    let mut rows = Vec::new();
    for &t in times {
        for &s in times {
            if s > t {
                continue;
            }
            if let (Some(a), Some(b), Some(c)) = (time_index(times, t), time_index(times, s), time_index(times, t + s)) {
                let delta = (est.mean[a] + est.mean[b] - est.mean[c]).abs();
                rows.push(LinearityRow { t, s, delta, scaled: delta / t.powf(2.0 / 3.0) });
            }
        }
    }
    let diag: Vec<f64> = rows.iter().filter(|r| r.t == r.s).map(|r| r.t).collect();
    let (Some(&lo), Some(&hi)) = (diag.first(), diag.last()) else {
        return LinearityReport { rows, statistic: f64::NAN, statistic_std: f64::NAN, pass: false };
    };
    let nt = times.len();
    let stat = |r: &[&Vec<f64>]| {
        let m = column_means(r, nt);
        delta_scaled(times, &m, hi, hi).unwrap() - 2.0 * delta_scaled(times, &m, lo, lo).unwrap()
    };
    let b = bootstrap(&est.samples, stat, resamples, seed);
    LinearityReport { rows, statistic: b.estimate, statistic_std: b.std, pass: b.estimate <= 2.0 * b.std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub t: Vec<f64>,
    /// `|t/μ(t) − 2t/μ(2t)|`.
    pub gap: Vec<f64>,
    /// Bootstrap std of `gap[k+1] - gap[k]`.
    pub step_std: Vec<f64>,
    pub pass: bool,
}

/// Speed-estimate convergence: the gap between `t/μ(t)` and `2t/μ(2t)` must
/// not grow with `t`, up to twice its bootstrap std.
pub fn check_speed_convergence(est: &SpeedEstimate, resamples: usize, seed: u64) -> ConvergenceReport {
    let times = &est.times;
    let ts: Vec<f64> = times.iter().copied().filter(|&t| time_index(times, 2.0 * t).is_some()).collect();
    let nt = times.len();
    let gap_of = |m: &[f64], t: f64| {
        let (a, b) = (time_index(times, t).unwrap(), time_index(times, 2.0 * t).unwrap());
        (t / m[a] - 2.0 * t / m[b]).abs()
    };
    let gap: Vec<f64> = ts.iter().map(|&t| gap_of(&est.mean, t)).collect();
    let mut step_std = Vec::new();
    let mut pass = !ts.is_empty();
    for k in 1..ts.len() {
        let (t0, t1) = (ts[k - 1], ts[k]);
        let b: Bootstrap = bootstrap(
            &est.samples,
            |r| {
                let m = column_means(r, nt);
                gap_of(&m, t1) - gap_of(&m, t0)
            },
            resamples,
            seed.wrapping_add(k as u64),
        );
        step_std.push(b.std);
        pass &= b.estimate <= 2.0 * b.std;
    }
    ConvergenceReport { t: ts, gap, step_std, pass }
}

/// Four base angles on the quarter circle plus a partner at chord distance
/// `1e-2` for each.
pub fn quarter_circle_directions() -> Vec<[f64; 2]> {
    let d = 2.0 * (0.005f64).asin();
    let mut out = Vec::new();
    for k in 0..4 {
        let th = k as f64 * std::f64::consts::FRAC_PI_6;
        let partner = if k == 3 { th - d } else { th + d };
        out.push([th.cos(), th.sin()]);
        out.push([partner.cos(), partner.sin()]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Increment {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub delta: f64,
    /// `|log |e_a − e_b||^{-1}`.
    pub log_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionProfile {
    pub angles: Vec<f64>,
    pub c_bar: Vec<f64>,
    pub c_bar_std: Vec<f64>,
    pub increments: Vec<Increment>,
    /// Smallest `C` with `|Δc̄| <= C |log |Δe||^{-1}` over well-separated pairs.
    pub c_fit: f64,
    pub near_pass: bool,
    pub spread: f64,
    pub mc_std: f64,
    pub spread_pass: bool,
    pub within_speed_band: bool,
    pub estimates: Vec<SpeedEstimate>,
}

pub const NEAR_PAIR: f64 = 0.02;
pub const SEPARATED_PAIR: f64 = 0.25;

pub fn run_direction_profile(plan: &ExperimentPlan) -> Result<DirectionProfile> {
    if plan.periodic {
        return Err(Error::InvalidSpec("direction profile needs a non-periodic, world-fixed field".into()));
    }
    plan.validate()?;
    let estimates: Vec<SpeedEstimate> = plan.directions.iter().map(|&e| run_speed_experiment(plan, e)).collect::<Result<_>>()?;
    Ok(direction_profile(plan, estimates))
}

/// Assembles increments and envelope checks from per-direction estimates.
pub fn direction_profile(plan: &ExperimentPlan, estimates: Vec<SpeedEstimate>) -> DirectionProfile {
    let angles: Vec<f64> = estimates.iter().map(|s| s.direction[1].atan2(s.direction[0])).collect();
    let c_bar: Vec<f64> = estimates.iter().map(|s| s.c_bar).collect();
    let c_bar_std: Vec<f64> = estimates.iter().map(|s| s.c_bar_std).collect();
    let mut increments = Vec::new();
    for a in 0..estimates.len() {
        for b in a + 1..estimates.len() {
            let (ea, eb) = (estimates[a].direction, estimates[b].direction);
            let distance = (ea[0] - eb[0]).hypot(ea[1] - eb[1]);
            let log_scale = 1.0 / distance.ln().abs();
            increments.push(Increment { a, b, distance, delta: (c_bar[a] - c_bar[b]).abs(), log_scale });
        }
    }
    let c_fit = increments
        .iter()
        .filter(|i| i.distance >= SEPARATED_PAIR)
        .map(|i| i.delta / i.log_scale)
        .fold(0.0, f64::max);
    let floor = 1e-9 * c_bar.iter().copied().fold(0.0, f64::max);
    let near_pass = increments
        .iter()
        .filter(|i| i.distance <= NEAR_PAIR)
        .all(|i| i.delta <= c_fit * i.log_scale + floor);
    let spread = c_bar.iter().copied().fold(f64::NEG_INFINITY, f64::max) - c_bar.iter().copied().fold(f64::INFINITY, f64::min);
    let mc_std = c_bar_std.iter().copied().fold(0.0, f64::max);
    let tol = 0.05 * plan.c_max();
    DirectionProfile {
        within_speed_band: c_bar.iter().all(|&c| c >= plan.c_min() - tol && c <= plan.c_max() + tol),
        spread_pass: spread <= 2.0 * mc_std + floor,
        angles,
        c_bar,
        c_bar_std,
        increments,
        c_fit,
        near_pass,
        spread,
        mc_std,
        estimates,
    }
}

impl DirectionProfile {
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("direction_x,direction_y,t,seed,m\n");
        for e in &self.estimates {
            e.append_csv_rows(&mut s);
        }
        s
    }

    /// `a,b,distance,inv_log_distance,delta`.
    pub fn increments_csv(&self) -> String {
        let mut s = String::from("a,b,distance,inv_log_distance,delta\n");
        for i in &self.increments {
            let _ = writeln!(s, "{},{},{},{},{}", i.a, i.b, i.distance, i.log_scale, i.delta);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub times: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `width[s][k]` = front width `W(times[k])` for seed `seeds[s]`.
    pub width: Vec<Vec<f64>>,
    pub median_ratio: Vec<f64>,
    pub decreasing: bool,
    pub final_ratio: f64,
    pub pass: bool,
}

pub const FLATNESS_CEILING: f64 = 0.1;

/// Front width from the arrival field: spread of the interpolated front
/// position across transverse rows.
pub fn front_width(m: &ArrivalTimeField, t: f64) -> f64 {
    let p = m.front_profile(t);
    let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

/// Flat front in a transverse-periodic window, run to the last plan time.
pub fn run_flatness_check(plan: &ExperimentPlan, e: [f64; 2]) -> Result<FlatnessReport> {
    plan.validate()?;
    if !plan.periodic {
        return Err(Error::InvalidSpec("flatness check needs a transverse-periodic window".into()));
    }
    let e = unit(e);
    let t_end = plan.max_time();
    let (ok, _) = over_seeds(plan.n_seeds, |k| {
        let field = plan.field(k, e)?;
        let grid = Grid2D::front_window(e, -4.0, t_end * plan.c_max() + 4.0, plan.width, plan.h, true)?;
        let set = InitialSet::half_space(e, 0.0, 2.0f64.max(2.0 / plan.c_min()));
        let (m, _) = compute_arrival_with(&field, &set, &grid, None, t_end, &[], SolverOptions::default())?;
        Ok(plan.times.iter().map(|&t| front_width(&m, t)).collect::<Vec<f64>>())
    })?;
    let seeds: Vec<u64> = ok.iter().map(|(k, _)| plan.seed(*k)).collect();
    let width: Vec<Vec<f64>> = ok.into_iter().map(|(_, w)| w).collect();
    let median_ratio: Vec<f64> = plan
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| stats::median(&width.iter().map(|w| w[k] / t).collect::<Vec<_>>()))
        .collect();
    let decreasing = median_ratio.windows(2).all(|w| w[1] <= w[0]);
    let final_ratio = *median_ratio.last().unwrap();
    Ok(FlatnessReport {
        times: plan.times.clone(),
        seeds,
        width,
        pass: decreasing && final_ratio <= FLATNESS_CEILING,
        median_ratio,
        decreasing,
        final_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub seed: u64,
    pub radius: f64,
    pub window: f64,
    pub n: usize,
    pub bulge: f64,
    /// Smallest `C2` with `{m2 <= s - C2 n} ⊆ {m1 <= s}` on the window, all `s`.
    pub c2_hat: f64,
    pub pass: bool,
}

/// Two flat sources along `e`: `S1 = {x.e <= 0}` and `S2`, which sits one
/// unit behind `S1` for `|x.e_perp| <= radius` but `bulge` ahead of it far
/// outside, joined by a smooth cosine ramp. Containment is tested on
/// `|x.e_perp| <= radius / 2`; `C2 n` must stay below the waiting time `tau`.
pub fn check_ordered_localization(plan: &ExperimentPlan, e: [f64; 2], radius: f64, bulge: f64, n: usize) -> Result<LocalizationReport> {
    plan.validate()?;
    let e = unit(e);
    let field = plan.field(0, e)?;
    let t_end = plan.max_time();
    let grid = Grid2D::front_window(e, -4.0, t_end + 6.0, plan.width, plan.h, plan.periodic)?;
    let ep = grid.e_perp();
    let ramp = 8.0;
    let r0 = 2.0f64.max(2.0 / plan.c_min());
    let profile = |s: f64| {
        let a = s.abs();
        if a <= radius {
            -1.0
        } else if a >= radius + ramp {
            bulge
        } else {
            let q = (a - radius) / ramp;
            -1.0 + (bulge + 1.0) * 0.5 * (1.0 - (std::f64::consts::PI * q).cos())
        }
    };
    let s2 = GridSet::from_fn(grid, |p| {
        let x = p[0] * e[0] + p[1] * e[1];
        let s = p[0] * ep[0] + p[1] * ep[1];
        x <= profile(s)
    });
    let horizon = 1.25 * t_end / plan.c_min() + 10.0;
    let opts = SolverOptions::default();
    let stop = StopRule::Time(horizon);
    let (m1, _) = compute_arrival_with(&field, &InitialSet::half_space(e, 0.0, r0), &grid, Some(&stop), horizon, &[], opts)?;
    let (m2, _) = compute_arrival_with(&field, &InitialSet::mask(s2, r0), &grid, Some(&stop), horizon, &[], opts)?;
    let window = radius / 2.0;
    let mut gap: f64 = 0.0;
    for q in 0..grid.len() {
        let (i, j) = grid.coords(q);
        if grid.transverse_coord(j).abs() > window || grid.normal_coord(i) > t_end {
            continue;
        }
        if m2.m[q].is_finite() {
            gap = gap.max(m1.m[q].min(horizon) - m2.m[q]);
        }
    }
    let c2_hat = gap.max(0.0) / n.max(1) as f64;
    let tau = 13.0 * r0 / (2.0 * plan.c_min());
    Ok(LocalizationReport {
        seed: plan.seed(0),
        radius,
        window,
        n,
        bulge,
        c2_hat,
        pass: c2_hat * n.max(1) as f64 <= tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_plan(c: f64) -> ExperimentPlan {
        ExperimentPlan {
            medium: Medium::Constant(c),
            times: vec![5.0, 10.0],
            n_seeds: 2,
            width: 4.0,
            bootstrap_resamples: 50,
            ..ExperimentPlan::default()
        }
    }

    #[test]
    fn plan_validation() {
        assert!(ExperimentPlan::default().validate().is_ok());
        let p = ExperimentPlan { times: vec![20.0, 10.0], ..ExperimentPlan::default() };
        assert!(p.validate().is_err());
        let p = ExperimentPlan { n_seeds: 1, ..ExperimentPlan::default() };
        assert!(p.validate().is_err());
        let p = ExperimentPlan { directions: vec![[0.0, 1.0]], ..ExperimentPlan::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn constant_medium_speed_and_degenerate_fluctuations() {
        let est = run_speed_experiment(&constant_plan(1.5), [1.0, 0.0]).unwrap();
        assert!((est.c_bar / 1.5 - 1.0).abs() < 0.02, "{}", est.c_bar);
        assert!(est.mean_increasing && est.within_speed_band);
        assert!(est.failed_seeds.is_empty());
        let fl = fluctuation_stats(&est);
        assert!(fl.sigma.iter().all(|s| *s == 0.0));
        assert!(fl.beta.is_none());
    }

    #[test]
    fn envelope_constant_inverts() {
        for p in [0.01, 0.2, 0.6] {
            let c = envelope_constant(p);
            assert!((c * (-1.0 / c).exp() - p).abs() < 1e-12);
        }
        assert_eq!(envelope_constant(0.0), 0.0);
    }

    #[test]
    fn quarter_circle_partners_at_chord_1e_2() {
        let d = quarter_circle_directions();
        assert_eq!(d.len(), 8);
        for pair in d.chunks(2) {
            let chord = (pair[0][0] - pair[1][0]).hypot(pair[0][1] - pair[1][1]);
            assert!((chord - 1e-2).abs() < 1e-12);
        }
        assert!(d.iter().all(|e| e[0] >= -1e-12 && e[1] >= -1e-12));
    }

    #[test]
    fn linearity_of_exact_linear_means_is_zero() {
        let times = vec![10.0, 20.0, 40.0, 80.0];
        let samples: Vec<Vec<f64>> = (0..5).map(|_| times.iter().map(|t| t / 2.0).collect()).collect();
        let est = SpeedEstimate::from_samples(
            &ExperimentPlan { bootstrap_resamples: 20, ..ExperimentPlan::default() },
            [1.0, 0.0],
            vec![0; 5],
            samples,
            vec![],
        );
        let lin = check_approximate_linearity(&est, 20, 1);
        assert!(lin.rows.iter().all(|r| r.delta.abs() < 1e-12));
        assert!(lin.pass);
        assert_eq!(est.c_bar, 2.0);
        let conv = check_speed_convergence(&est, 20, 1);
        assert_eq!(conv.t, vec![10.0, 20.0, 40.0]);
        assert!(conv.gap.iter().all(|g| *g < 1e-12));
    }
}
