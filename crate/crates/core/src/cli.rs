//! Command-line front end: key resolution (defaults, config file, flags),
//! dispatch, output writing and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arrival::{self, compute_arrival_with, VerifyConfig};
use crate::error::{Error, Result};
use crate::experiments::{self, ExperimentPlan, Medium};
use crate::field::{self, derive_seed, sample_field, CoefficientField, FieldSpec, Rect};
use crate::grid::{Grid2D, NormalBoundary};
use crate::levelset::{ForcingMode, InitialSet, Solver, SolverOptions, StopRule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub const HARNESS_ENV: &str = "MCFLAB_TEST_HARNESS";

/// `(key, default, description)`. Subcommands override some defaults, see [`defaults`].
pub const KEYS: &[(&str, &str, &str)] = &[
    ("c_min", "1", "lower speed bound"),
    ("c_max", "2", "upper speed bound"),
    ("lipschitz_bound", "5", "Lipschitz budget L0 of the field"),
    ("bump_radius", "0.4", "bump radius r, at most 1/2 (1-dependence)"),
    ("bump_intensity", "1", "Poisson bump intensity per unit area"),
    ("amp_lo", "0.5", "smallest bump amplitude"),
    ("amp_hi", "1", "largest bump amplitude"),
    ("transverse_period", "none", "field period in y (field/evolve/arrival only)"),
    ("medium", "random", "random | constant:C | laminar:LO:HI:PERIOD"),
    ("h", "0.1", "grid spacing"),
    ("width", "40", "transverse window width"),
    ("periodic", "true", "transverse-periodic window (directions: false)"),
    ("r0", "2", "ball-regularity radius R0 of the initial set"),
    ("direction", "1,0", "front direction e"),
    ("shape", "half-space", "initial set: half-space | disc:RADIUS"),
    ("t_max", "20", "time horizon (evolve, arrival, verify)"),
    ("times", "10,20,40,80", "probe times (speed 10,20; directions 10,20; flatness 20,40,80; localization 20)"),
    ("seeds", "64", "number of seeds (verify 8, speed 8, directions 16, flatness 16)"),
    ("master_seed", "1", "master seed; per-task seeds are derived from it"),
    ("bootstrap", "2000", "bootstrap resamples"),
    ("region", "-5,5,-5,5", "field sampling rectangle x0,x1,y0,y1"),
    ("radius", "10", "localization: half-width of the ordered window"),
    ("bulge", "2", "localization: lead of the second source outside the window"),
    ("levels", "1", "localization: number n of regularization steps"),
];

fn key_help() -> String {
    let mut s = String::from("Configuration keys (flags use dashes, config files use `key = value`):\n");
    for (k, d, h) in KEYS {
        s.push_str(&format!("  {k:<18} default {d:<14} {h}\n"));
    }
    s.push_str("\nEnvironment: MCFLAB_OUT (output directory), MCFLAB_JOBS (worker threads).\n");
    s.push_str("Exit codes: 0 pass, 1 failed check or envelope, 2 usage error, 3 solver failure.\n");
    s
}

#[derive(Debug, Parser)]
#[command(name = "mcflab", version, about = "Forced mean curvature flow in random media", after_help = key_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "MCFLAB_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "MCFLAB_JOBS")]
    pub jobs: Option<usize>,
    /// Any configuration key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub c_min: Option<String>,
    #[arg(long, global = true)]
    pub c_max: Option<String>,
    #[arg(long, global = true)]
    pub lipschitz_bound: Option<String>,
    #[arg(long, global = true)]
    pub bump_radius: Option<String>,
    #[arg(long, global = true)]
    pub bump_intensity: Option<String>,
    #[arg(long, global = true)]
    pub medium: Option<String>,
    #[arg(long, global = true)]
    pub h: Option<String>,
    #[arg(long, global = true)]
    pub width: Option<String>,
    #[arg(long, global = true)]
    pub r0: Option<String>,
    #[arg(short = 'e', long, global = true, allow_hyphen_values = true)]
    pub direction: Option<String>,
    #[arg(long, global = true)]
    pub shape: Option<String>,
    #[arg(long, global = true)]
    pub t_max: Option<String>,
    #[arg(long, global = true)]
    pub times: Option<String>,
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    #[arg(long, global = true)]
    pub master_seed: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample the coefficient field on a rectangle.
    Field,
    /// Evolve the level-set function to t_max.
    Evolve {
        /// Curvature flow only (test harness).
        #[arg(long)]
        disable_forcing: bool,
    },
    /// Arrival times up to t_max.
    Arrival,
    /// Nine regularity checks over several seeds.
    Verify,
    /// Effective speed along one direction.
    Speed,
    /// Fluctuation exponent, tail envelope, linearity and convergence.
    Fluctuations,
    /// Effective speed over a quarter circle of directions.
    Directions,
    /// Width of an initially flat front.
    Flatness,
    /// Ordered localization of two sources.
    Localization,
    /// Re-run a manifest and compare output digests.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Field => "field",
            Command::Evolve { .. } => "evolve",
            Command::Arrival => "arrival",
            Command::Verify => "verify",
            Command::Speed => "speed",
            Command::Fluctuations => "fluctuations",
            Command::Directions => "directions",
            Command::Flatness => "flatness",
            Command::Localization => "localization",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Documented defaults for a subcommand.
pub fn defaults(sub: &str) -> BTreeMap<String, String> {
    let mut m: BTreeMap<String, String> = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
    let mut set = |k: &str, v: &str| {
        m.insert(k.to_string(), v.to_string());
    };
    match sub {
        "verify" => set("seeds", "8"),
        "speed" => {
            set("seeds", "8");
            set("times", "10,20");
        }
        "directions" => {
            set("seeds", "16");
            set("times", "10,20");
            set("periodic", "false");
        }
        "flatness" => {
            set("seeds", "16");
            set("times", "20,40,80");
        }
        "localization" => set("times", "20"),
        _ => {}
    }
    m
}

fn config_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), msg: msg.into() }
}

/// Merges defaults, the config file and the flags (in that order of precedence).
pub fn resolve(sub: &str, opts: &Opts, file_text: Option<&str>) -> Result<BTreeMap<String, String>> {
    let mut m = defaults(sub);
    let mut apply = |k: &str, v: &str| -> Result<()> {
        let key = k.trim().replace('-', "_");
        if !m.contains_key(&key) {
            return Err(config_err(&key, "unknown key"));
        }
        m.insert(key, v.trim().to_string());
        Ok(())
    };
    if let Some(text) = file_text {
        for (k, v) in field::parse_kv(text)? {
            apply(&k, &v)?;
        }
    }
    for kv in &opts.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_err(kv, "expected KEY=VALUE"))?;
        apply(k, v)?;
    }
    let flags = [
        ("c_min", &opts.c_min),
        ("c_max", &opts.c_max),
        ("lipschitz_bound", &opts.lipschitz_bound),
        ("bump_radius", &opts.bump_radius),
        ("bump_intensity", &opts.bump_intensity),
        ("medium", &opts.medium),
        ("h", &opts.h),
        ("width", &opts.width),
        ("r0", &opts.r0),
        ("direction", &opts.direction),
        ("shape", &opts.shape),
        ("t_max", &opts.t_max),
        ("times", &opts.times),
        ("seeds", &opts.seeds),
        ("master_seed", &opts.master_seed),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            apply(k, v)?;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    HalfSpace,
    Disc(f64),
}

/// Typed view of a resolved key map.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandConfig {
    pub subcommand: String,
    pub keys: BTreeMap<String, String>,
    pub spec: FieldSpec,
    pub medium: Medium,
    pub h: f64,
    pub width: f64,
    pub periodic: bool,
    pub r0: f64,
    pub direction: [f64; 2],
    pub shape: Shape,
    pub t_max: f64,
    pub times: Vec<f64>,
    pub seeds: usize,
    pub master_seed: u64,
    pub bootstrap: usize,
    pub region: Rect,
    pub radius: f64,
    pub bulge: f64,
    pub levels: usize,
}

fn num(keys: &BTreeMap<String, String>, k: &str) -> Result<f64> {
    let v = &keys[k];
    let x: f64 = v.parse().map_err(|_| config_err(k, format!("expected a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(config_err(k, format!("expected a finite number, got `{v}`")));
    }
    Ok(x)
}

fn uint(keys: &BTreeMap<String, String>, k: &str) -> Result<u64> {
    let v = &keys[k];
    v.parse().map_err(|_| config_err(k, format!("expected an unsigned integer, got `{v}`")))
}

fn list(keys: &BTreeMap<String, String>, k: &str) -> Result<Vec<f64>> {
    keys[k]
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| config_err(k, format!("expected comma-separated numbers, got `{}`", keys[k])))
        })
        .collect()
}

impl CommandConfig {
    pub fn from_keys(sub: &str, keys: BTreeMap<String, String>) -> Result<Self> {
        let mut spec = FieldSpec::default();
        for k in ["c_min", "c_max", "lipschitz_bound", "bump_radius", "bump_intensity", "amp_lo", "amp_hi", "transverse_period"] {
            spec.set_key(k, &keys[k])?;
        }
        spec.validate().map_err(|e| {
            let msg = e.to_string();
            let key = if msg.contains("bump_radius") { "bump_radius" } else { "field" };
            config_err(key, msg)
        })?;
        let medium = parse_medium(&keys["medium"])?;
        let periodic = match keys["periodic"].as_str() {
            "true" => true,
            "false" => false,
            v => return Err(config_err("periodic", format!("expected true or false, got `{v}`"))),
        };
        let d = list(&keys, "direction")?;
        if d.len() != 2 || !(d[0].hypot(d[1]) > 0.0) {
            return Err(config_err("direction", "expected a non-zero vector `x,y`"));
        }
        let n = d[0].hypot(d[1]);
        let shape = match keys["shape"].as_str() {
            "half-space" => Shape::HalfSpace,
            s => match s.strip_prefix("disc:").and_then(|r| r.parse::<f64>().ok()) {
                Some(r) if r > 0.0 => Shape::Disc(r),
                _ => return Err(config_err("shape", format!("expected half-space or disc:RADIUS, got `{s}`"))),
            },
        };
        let reg = list(&keys, "region")?;
        if reg.len() != 4 || reg[0] >= reg[1] || reg[2] >= reg[3] {
            return Err(config_err("region", "expected x0,x1,y0,y1 with x0 < x1 and y0 < y1"));
        }
        let times = list(&keys, "times")?;
        if times.is_empty() || times.iter().any(|t| !(*t > 0.0)) || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("times", "expected strictly increasing positive times"));
        }
        let h = num(&keys, "h")?;
        if !(h > 0.0) {
            return Err(config_err("h", "must be positive"));
        }
        let seeds = uint(&keys, "seeds")? as usize;
        if seeds < 1 {
            return Err(config_err("seeds", "must be at least 1"));
        }
        let t_max = num(&keys, "t_max")?;
        if !(t_max >= 0.0) {
            return Err(config_err("t_max", "must be non-negative"));
        }
        Ok(Self {
            subcommand: sub.to_string(),
            spec,
            medium,
            h,
            width: num(&keys, "width")?,
            periodic,
            r0: num(&keys, "r0")?,
            direction: [d[0] / n, d[1] / n],
            shape,
            t_max,
            times,
            seeds,
            master_seed: uint(&keys, "master_seed")?,
            bootstrap: uint(&keys, "bootstrap")? as usize,
            region: Rect::new([reg[0], reg[2]], [reg[1], reg[3]]),
            radius: num(&keys, "radius")?,
            bulge: num(&keys, "bulge")?,
            levels: uint(&keys, "levels")? as usize,
            keys,
        })
    }

    fn plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            spec: self.spec.clone(),
            medium: self.medium,
            directions: vec![self.direction],
            times: self.times.clone(),
            n_seeds: self.seeds,
            master_seed: self.master_seed,
            h: self.h,
            width: self.width,
            periodic: self.periodic,
            bootstrap_resamples: self.bootstrap,
        }
    }

    fn field(&self) -> Result<CoefficientField> {
        match self.medium {
            Medium::Random => sample_field(&self.spec, derive_seed(self.master_seed, 0)),
            Medium::Constant(c) => CoefficientField::constant(c),
            Medium::Laminar { lo, hi, period } => CoefficientField::laminar(lo, hi, self.direction, period),
        }
    }
}

fn parse_medium(v: &str) -> Result<Medium> {
    let parts: Vec<&str> = v.split(':').collect();
    let nums = |s: &[&str]| s.iter().map(|x| x.parse::<f64>()).collect::<std::result::Result<Vec<f64>, _>>();
    let bad = || config_err("medium", format!("expected random, constant:C or laminar:LO:HI:PERIOD, got `{v}`"));
    match parts.as_slice() {
        ["random"] => Ok(Medium::Random),
        ["constant", rest @ ..] if rest.len() == 1 => {
            let c = nums(rest).map_err(|_| bad())?[0];
            if c > 0.0 {
                Ok(Medium::Constant(c))
            } else {
                Err(bad())
            }
        }
        ["laminar", rest @ ..] if rest.len() == 3 => {
            let x = nums(rest).map_err(|_| bad())?;
            if x[0] > 0.0 && x[0] <= x[1] && x[2] > 0.0 {
                Ok(Medium::Laminar { lo: x[0], hi: x[1], period: x[2] })
            } else {
                Err(bad())
            }
        }
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub subcommand: String,
    pub disable_forcing: bool,
    pub config: BTreeMap<String, String>,
    pub master_seed: u64,
    pub task_seeds: Vec<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<OutputDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Files produced by one subcommand and its verdict.
struct Outcome {
    files: Vec<(String, Vec<u8>)>,
    task_seeds: Vec<u64>,
    pass: bool,
    log: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { files: Vec::new(), task_seeds: Vec::new(), pass: true, log: Vec::new() }
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.files.push((name.to_string(), s.into_bytes()));
        Ok(())
    }

    fn text(&mut self, name: &str, s: String) {
        self.files.push((name.to_string(), s.into_bytes()));
    }
}

#[derive(Serialize)]
struct Verdict<'a, T: Serialize> {
    pass: bool,
    #[serde(flatten)]
    body: &'a T,
}

fn initial_set(cfg: &CommandConfig) -> InitialSet {
    match cfg.shape {
        Shape::HalfSpace => InitialSet::half_space(cfg.direction, 0.0, cfg.r0),
        Shape::Disc(r) => InitialSet::disc([0.0, 0.0], r),
    }
}

fn run_grid(cfg: &CommandConfig, speed: f64) -> Result<Grid2D> {
    match cfg.shape {
        Shape::HalfSpace => Grid2D::front_window(cfg.direction, -4.0, cfg.t_max * speed + 4.0, cfg.width, cfg.h, cfg.periodic),
        Shape::Disc(r) => Grid2D::square([0.0, 0.0], r + cfg.t_max * speed + 2.0, cfg.h, NormalBoundary::Extrapolation),
    }
}

fn execute(cfg: &CommandConfig, disable_forcing: bool) -> Result<Outcome> {
    let mut out = Outcome::new();
    match cfg.subcommand.as_str() {
        "field" => {
            let f = cfg.field()?;
            out.task_seeds.push(derive_seed(cfg.master_seed, 0));
            let bounds = f.observed_bounds(cfg.region, cfg.h);
            let summary = serde_json::json!({
                "field_id": f.id(),
                "spec": f.spec,
                "observed_min": bounds[0],
                "observed_max": bounds[1],
                "lipschitz_constant": f.lipschitz_constant(),
                "ls_condition_margin": field::ls_condition_margin(&f, cfg.region, cfg.h),
            });
            out.text("field.csv", field::field_csv(&f, cfg.region, cfg.h));
            out.json("field.json", &summary)?;
        }
        "evolve" => {
            let f = cfg.field()?;
            out.task_seeds.push(derive_seed(cfg.master_seed, 0));
            let opts = if disable_forcing {
                SolverOptions { narrow_band: false, reinit_interval: 0, forcing: ForcingMode::Disabled }
            } else {
                SolverOptions::default()
            };
            let speed = if disable_forcing { 0.0 } else { f.spec.c_max };
            let grid = run_grid(cfg, speed)?;
            let mut solver = Solver::new(&grid, &f, &initial_set(cfg), opts)?;
            solver.run(&StopRule::Time(cfg.t_max), cfg.t_max)?;
            out.text("state.csv", solver.state().to_csv());
            out.json("state.json", &solver.state().metadata())?;
        }
        "arrival" => {
            let f = cfg.field()?;
            out.task_seeds.push(derive_seed(cfg.master_seed, 0));
            let grid = run_grid(cfg, f.spec.c_max)?;
            let (m, _) = compute_arrival_with(&f, &initial_set(cfg), &grid, None, cfg.t_max, &[], SolverOptions::default())?;
            let summary = serde_json::json!({
                "field_id": m.field_id,
                "source": m.source,
                "horizon": m.horizon,
                "dt": m.dt,
                "grid": m.grid,
                "reached_nodes": m.m.iter().filter(|v| v.is_finite()).count(),
                "max_arrival": m.max_finite(),
            });
            out.text("arrival.csv", m.to_csv());
            out.json("arrival.json", &summary)?;
        }
        "verify" => {
            let vc = VerifyConfig {
                spec: cfg.spec.clone(),
                n_seeds: cfg.seeds,
                master_seed: cfg.master_seed,
                h: cfg.h,
                width: cfg.width,
                r0: cfg.r0,
                horizon: cfg.t_max,
                ..VerifyConfig::default()
            };
            let results: Vec<_> = (0..vc.n_seeds).into_par_iter().map(|k| arrival::verify_seed(&vc, k)).collect();
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            for r in &results {
                out.task_seeds.push(r.seed);
                for rep in &r.reports {
                    out.log.push(format!("seed {:>2} {}", r.index, rep.summary()));
                }
            }
            out.pass = results.iter().all(|r| r.pass());
            out.json("verify.json", &results)?;
        }
        "speed" => {
            let plan = cfg.plan();
            let est = experiments::run_speed_experiment(&plan, cfg.direction)?;
            out.task_seeds = est.seeds.clone();
            out.pass = est.mean_increasing && est.within_speed_band;
            out.log.push(format!("c_bar = {} (bootstrap std {})", est.c_bar, est.c_bar_std));
            out.text("samples.csv", est.samples_csv());
            out.json("speed.json", &Verdict { pass: out.pass, body: &summary_of(&est) })?;
        }
        "fluctuations" => {
            let plan = cfg.plan();
            let (est, fl) = experiments::run_fluctuation_experiment(&plan, cfg.direction)?;
            let lin = experiments::check_approximate_linearity(&est, plan.bootstrap_resamples, plan.master_seed ^ 0x11);
            let conv = experiments::check_speed_convergence(&est, plan.bootstrap_resamples, plan.master_seed ^ 0x22);
            out.task_seeds = est.seeds.clone();
            out.pass = fl.beta_pass && fl.tail_pass && lin.pass && conv.pass;
            out.log.push(format!(
                "beta {:?} r2 {:?} tails {} linearity {} convergence {}",
                fl.beta, fl.r2, fl.tail_pass, lin.pass, conv.pass
            ));
            let summary = serde_json::json!({
                "pass": out.pass,
                "speed": summary_of(&est),
                "fluctuations": fl,
                "linearity": lin,
                "convergence": conv,
            });
            out.text("samples.csv", est.samples_csv());
            out.json("fluctuations.json", &summary)?;
        }
        "directions" => {
            let mut plan = cfg.plan();
            plan.directions = experiments::quarter_circle_directions();
            let prof = experiments::run_direction_profile(&plan)?;
            out.task_seeds = (0..plan.n_seeds).map(|k| plan.seed(k)).collect();
            out.pass = prof.near_pass && prof.spread_pass && prof.within_speed_band;
            out.log.push(format!(
                "spread {} mc_std {} c_fit {} near {}",
                prof.spread, prof.mc_std, prof.c_fit, prof.near_pass
            ));
            out.text("samples.csv", prof.samples_csv());
            out.text("increments.csv", prof.increments_csv());
            let summary = serde_json::json!({
                "pass": out.pass,
                "angles": prof.angles,
                "c_bar": prof.c_bar,
                "c_bar_std": prof.c_bar_std,
                "c_fit": prof.c_fit,
                "near_pass": prof.near_pass,
                "spread": prof.spread,
                "mc_std": prof.mc_std,
                "spread_pass": prof.spread_pass,
                "within_speed_band": prof.within_speed_band,
            });
            out.json("directions.json", &summary)?;
        }
        "flatness" => {
            let plan = cfg.plan();
            let rep = experiments::run_flatness_check(&plan, cfg.direction)?;
            out.task_seeds = rep.seeds.clone();
            out.pass = rep.pass;
            out.log.push(format!("median W(t)/t {:?}", rep.median_ratio));
            let mut csv = String::from("seed,t,width\n");
            for (seed, row) in rep.seeds.iter().zip(&rep.width) {
                for (t, w) in rep.times.iter().zip(row) {
                    csv.push_str(&format!("{seed},{t},{w}\n"));
                }
            }
            out.text("flatness.csv", csv);
            out.json("flatness.json", &rep)?;
        }
        "localization" => {
            let plan = cfg.plan();
            let rep = experiments::check_ordered_localization(&plan, cfg.direction, cfg.radius, cfg.bulge, cfg.levels)?;
            out.task_seeds.push(rep.seed);
            out.pass = rep.pass;
            out.log.push(format!("c2_hat {}", rep.c2_hat));
            out.json("localization.json", &rep)?;
        }
        other => return Err(config_err("subcommand", format!("unknown subcommand `{other}`"))),
    }
    Ok(out)
}

fn summary_of(est: &experiments::SpeedEstimate) -> serde_json::Value {
    serde_json::json!({
        "direction": est.direction,
        "times": est.times,
        "mean": est.mean,
        "std": est.std,
        "c_bar": est.c_bar,
        "c_bar_std": est.c_bar_std,
        "c_bar_ci": est.c_bar_ci,
        "failed_seeds": est.failed_seeds,
        "mean_increasing": est.mean_increasing,
        "within_speed_band": est.within_speed_band,
    })
}

/// Runs a resolved config, writes its outputs and manifest into `dir`.
pub fn run_config(cfg: &CommandConfig, disable_forcing: bool, dir: &Path) -> Result<(RunManifest, bool, Vec<String>)> {
    let started = now();
    let outcome = execute(cfg, disable_forcing)?;
    std::fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();
    for (name, bytes) in &outcome.files {
        std::fs::write(dir.join(name), bytes)?;
        outputs.push(OutputDigest { file: name.clone(), sha256: sha256_hex(bytes) });
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: cfg.subcommand.clone(),
        disable_forcing,
        config: cfg.keys.clone(),
        master_seed: cfg.master_seed,
        task_seeds: outcome.task_seeds,
        started_unix: started,
        finished_unix: now(),
        outputs,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok((manifest, outcome.pass, outcome.log))
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidSpec(_) | Error::InvalidGrid(_) | Error::InvalidSet(_) | Error::EmptySet(_) => EXIT_USAGE,
        Error::Json(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::HorizonExceeded { .. } | Error::TooManyFailures { .. } | Error::Io(_) => EXIT_SOLVER,
    }
}

fn harness_enabled() -> bool {
    std::env::var(HARNESS_ENV).map(|v| v == "1").unwrap_or(false)
}

/// Replays `manifest` into `dir` and compares every output digest.
pub fn replay(manifest_path: &Path, dir: &Path) -> Result<(bool, Vec<String>)> {
    let recorded: RunManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let mut keys = defaults(&recorded.subcommand);
    for (k, v) in &recorded.config {
        if !keys.contains_key(k) {
            return Err(config_err(k, "unknown key in manifest"));
        }
        keys.insert(k.clone(), v.clone());
    }
    let cfg = CommandConfig::from_keys(&recorded.subcommand, keys)?;
    let (fresh, _, _) = run_config(&cfg, recorded.disable_forcing, dir)?;
    let mut log = Vec::new();
    let mut same = recorded.outputs.len() == fresh.outputs.len();
    for (a, b) in recorded.outputs.iter().zip(&fresh.outputs) {
        let ok = a == b;
        same &= ok;
        log.push(format!("{} {} {}", if ok { "same" } else { "DIFFERS" }, a.file, b.sha256));
    }
    Ok((same, log))
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    if let Some(j) = cli.opts.jobs {
        if j == 0 {
            return Err(config_err("jobs", "must be at least 1"));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let sub = cli.command.name();
    let dir = cli.opts.out.clone().unwrap_or_else(|| PathBuf::from("mcflab-out").join(sub));
    if let Command::Replay { manifest } = &cli.command {
        let (same, log) = replay(manifest, &dir)?;
        for l in log {
            println!("{l}");
        }
        println!("replay {}", if same { "identical" } else { "MISMATCH" });
        return Ok(if same { EXIT_OK } else { EXIT_FAIL });
    }
    let disable_forcing = matches!(cli.command, Command::Evolve { disable_forcing: true });
    if disable_forcing && !harness_enabled() {
        return Err(config_err(
            "disable_forcing",
            format!("forcing must stay on (c > 0); set {HARNESS_ENV}=1 to run curvature-only tests"),
        ));
    }
    let text = match &cli.opts.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| config_err("config", format!("{}: {e}", p.display())))?),
        None => None,
    };
    let keys = resolve(sub, &cli.opts, text.as_deref())?;
    let cfg = CommandConfig::from_keys(sub, keys)?;
    let (manifest, pass, log) = run_config(&cfg, disable_forcing, &dir)?;
    for l in log {
        println!("{l}");
    }
    for o in &manifest.outputs {
        println!("wrote {} sha256 {}", dir.join(&o.file).display(), o.sha256);
    }
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { EXIT_OK } else { EXIT_FAIL })
}
