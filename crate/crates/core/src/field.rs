//! Stationary random speed fields with unit range of dependence.
//!
//! The random field is a Poisson cloud of radial bumps generated cell by
//! cell: the point set of the unit cell `(i, j)` is a pure function of
//! `(seed, i, j)` through a SplitMix64 hash, so any point can be evaluated
//! without global state. Bump supports have radius `r <= 1/2`, which makes
//! field values over sets at distance `>= 1` depend on disjoint, independent
//! families of cells.
//!
//! Overlapping bumps are combined by pointwise maximum and then passed
//! through a C¹ saturating map with slope at most one, so the Lipschitz
//! constant of the field is exactly the single-bump constant
//! `a_hi * 8 / (3 sqrt 3) / r`.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridSet};

/// SplitMix64 increment (golden ratio).
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX2: u64 = 0x94D0_49BB_1331_11EB;

/// The SplitMix64 finaliser.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(MIX1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX2);
    z ^ (z >> 31)
}

/// Hash of `(seed, a, b, k)` by chained SplitMix64 rounds.
#[inline]
pub fn hash4(seed: u64, a: i64, b: i64, k: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ a as u64);
    h = splitmix64(h ^ b as u64);
    splitmix64(h ^ k)
}

/// Top 53 bits as a uniform double in `[0, 1)`.
#[inline]
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derived seed for task `index` of a run with master seed `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    hash4(master, 0x5eed, index as i64, 0)
}

/// Largest slope of the profile `(1 - q^2)^2`, attained at `q = 1/sqrt 3`.
pub const BUMP_MAX_SLOPE: f64 = 1.539_600_717_839_002; // 8 / (3 sqrt 3)

#[inline]
fn bump_profile(q2: f64) -> f64 {
    let s = 1.0 - q2;
    s * s
}

/// C¹ saturation of `[0, inf)` into `[0, span)`; identity below `span / 2`.
#[inline]
pub fn saturate(s: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let knee = 0.5 * span;
    if s <= knee {
        s
    } else {
        span - knee * (-(s - knee) / knee).exp()
    }
}

/// Inverse-CDF Poisson draw from a single uniform.
fn poisson_from_uniform(lambda: f64, u: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let mut k = 0u32;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf && k < 10_000 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
        if p == 0.0 && cdf < u {
            break;
        }
    }
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub c_min: f64,
    pub c_max: f64,
    pub lipschitz_bound: f64,
    pub bump_radius: f64,
    pub bump_intensity: f64,
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub transverse_period: Option<f64>,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            c_min: 1.0,
            c_max: 2.0,
            lipschitz_bound: 5.0,
            bump_radius: 0.4,
            bump_intensity: 1.0,
            amp_lo: 0.5,
            amp_hi: 1.0,
            transverse_period: None,
            seed: 0,
        }
    }
}

pub const FIELD_KEYS: [&str; 9] = [
    "c_min",
    "c_max",
    "lipschitz_bound",
    "bump_radius",
    "bump_intensity",
    "amp_lo",
    "amp_hi",
    "transverse_period",
    "seed",
];

impl FieldSpec {
    /// Same bounds and Lipschitz budget, no bumps, speed `c_min` everywhere.
    pub fn constant(c: f64) -> Self {
        Self {
            c_min: c,
            c_max: c,
            lipschitz_bound: 0.0,
            bump_intensity: 0.0,
            amp_lo: 0.0,
            amp_hi: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.c_min > 0.0 && self.c_min <= self.c_max && self.c_max.is_finite()) {
            return bad(format!("need 0 < c_min <= c_max < inf, got [{}, {}]", self.c_min, self.c_max));
        }
        if !(self.lipschitz_bound >= 0.0 && self.lipschitz_bound.is_finite()) {
            return bad(format!("lipschitz_bound must be finite and >= 0, got {}", self.lipschitz_bound));
        }
        if !(self.bump_radius > 0.0) {
            return bad(format!("bump_radius must be positive, got {}", self.bump_radius));
        }
        if self.bump_radius > 0.5 {
            return bad(format!(
                "bump_radius {} > 1/2 breaks 1-dependence (bumps seen from points at distance >= 1 must be disjoint)",
                self.bump_radius
            ));
        }
        if !(self.bump_intensity >= 0.0 && self.bump_intensity.is_finite()) {
            return bad(format!("bump_intensity must be finite and >= 0, got {}", self.bump_intensity));
        }
        if !(self.amp_lo >= 0.0 && self.amp_lo <= self.amp_hi && self.amp_hi.is_finite()) {
            return bad(format!("need 0 <= amp_lo <= amp_hi, got [{}, {}]", self.amp_lo, self.amp_hi));
        }
        if self.bump_intensity > 0.0 && self.amp_hi > 0.0 {
            let slope = self.amp_hi * BUMP_MAX_SLOPE / self.bump_radius;
            if slope > self.lipschitz_bound * (1.0 + 1e-12) {
                return bad(format!(
                    "bump slope amp_hi * {BUMP_MAX_SLOPE:.4} / bump_radius = {slope:.4} exceeds lipschitz_bound {}",
                    self.lipschitz_bound
                ));
            }
        }
        if let Some(p) = self.transverse_period {
            if !(p >= 2.0 && p.fract() == 0.0) {
                return bad(format!("transverse_period must be an integer >= 2, got {p}"));
            }
        }
        Ok(())
    }

    /// Flat `key = value` text, one key per line, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "c_min = {}", self.c_min);
        let _ = writeln!(s, "c_max = {}", self.c_max);
        let _ = writeln!(s, "lipschitz_bound = {}", self.lipschitz_bound);
        let _ = writeln!(s, "bump_radius = {}", self.bump_radius);
        let _ = writeln!(s, "bump_intensity = {}", self.bump_intensity);
        let _ = writeln!(s, "amp_lo = {}", self.amp_lo);
        let _ = writeln!(s, "amp_hi = {}", self.amp_hi);
        match self.transverse_period {
            Some(p) => {
                let _ = writeln!(s, "transverse_period = {p}");
            }
            None => {
                let _ = writeln!(s, "transverse_period = none");
            }
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Sets one key from its text value.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.trim().parse::<f64>().map_err(|e| Error::Config {
                key: key.to_string(),
                msg: format!("expected a number, got `{v}` ({e})"),
            })
        };
        match key {
            "c_min" => self.c_min = num(value)?,
            "c_max" => self.c_max = num(value)?,
            "lipschitz_bound" => self.lipschitz_bound = num(value)?,
            "bump_radius" => self.bump_radius = num(value)?,
            "bump_intensity" => self.bump_intensity = num(value)?,
            "amp_lo" => self.amp_lo = num(value)?,
            "amp_hi" => self.amp_hi = num(value)?,
            "transverse_period" => {
                let v = value.trim();
                self.transverse_period = if v.eq_ignore_ascii_case("none") || v.is_empty() {
                    None
                } else {
                    Some(num(v)?)
                };
            }
            "seed" => {
                self.seed = value.trim().parse::<u64>().map_err(|e| Error::Config {
                    key: key.to_string(),
                    msg: format!("expected an unsigned integer, got `{value}` ({e})"),
                })?
            }
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown field key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (key, value) in parse_kv(text)? {
            spec.set_key(&key, &value)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses flat `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            key: format!("line {}", n + 1),
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub amplitude: f64,
}

/// Axis-aligned rectangle `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    fn probes(&self, spacing: f64) -> impl Iterator<Item = [f64; 2]> + '_ {
        let nx = ((self.max[0] - self.min[0]) / spacing).floor() as usize + 1;
        let ny = ((self.max[1] - self.min[1]) / spacing).floor() as usize + 1;
        (0..ny).flat_map(move |j| {
            (0..nx).map(move |i| [self.min[0] + i as f64 * spacing, self.min[1] + j as f64 * spacing])
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKindName {
    RandomBumps,
    Constant,
    Periodic,
    Spliced,
}

#[derive(Debug, Clone)]
enum FieldKind {
    Constant(f64),
    RandomBumps { seed: u64 },
    Bumps(Vec<Bump>),
    Laminar { direction: [f64; 2], period: f64, lo: f64, hi: f64 },
    Spliced(Box<Splice>),
}

/// A speed field `c: R^2 -> [c_min, c_max]`; evaluation is a pure function of position.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub spec: FieldSpec,
    kind: FieldKind,
}

/// Draws the random bump field for `seed`.
pub fn sample_field(spec: &FieldSpec, seed: u64) -> Result<CoefficientField> {
    spec.validate()?;
    let mut spec = spec.clone();
    spec.seed = seed;
    Ok(CoefficientField {
        spec,
        kind: FieldKind::RandomBumps { seed },
    })
}

impl CoefficientField {
    /// `c ≡ c` with `c_min = c_max = c`.
    pub fn constant(c: f64) -> Result<Self> {
        let spec = FieldSpec::constant(c);
        spec.validate()?;
        Ok(Self { spec, kind: FieldKind::Constant(c) })
    }

    /// Constant `value` carrying the bounds and Lipschitz budget of `spec`.
    pub fn constant_in(spec: &FieldSpec, value: f64) -> Result<Self> {
        spec.validate()?;
        if value < spec.c_min || value > spec.c_max {
            return Err(Error::InvalidSpec(format!(
                "constant {value} outside [{}, {}]",
                spec.c_min, spec.c_max
            )));
        }
        Ok(Self { spec: spec.clone(), kind: FieldKind::Constant(value) })
    }

    /// Explicit list of bumps, combined exactly like the random field.
    pub fn from_bumps(spec: &FieldSpec, bumps: Vec<Bump>) -> Result<Self> {
        spec.validate()?;
        for b in &bumps {
            if b.amplitude < 0.0 || b.amplitude * BUMP_MAX_SLOPE / spec.bump_radius > spec.lipschitz_bound * (1.0 + 1e-12) {
                return Err(Error::InvalidSpec(format!("bump amplitude {} violates the Lipschitz budget", b.amplitude)));
            }
        }
        Ok(Self { spec: spec.clone(), kind: FieldKind::Bumps(bumps) })
    }

    /// Laminar field `lo + (hi - lo) (1 + sin(2 pi x.d / period)) / 2`.
    pub fn laminar(lo: f64, hi: f64, direction: [f64; 2], period: f64) -> Result<Self> {
        let n = direction[0].hypot(direction[1]);
        if !(n > 0.0) || !(period > 0.0) {
            return Err(Error::InvalidSpec("laminar field needs a direction and a positive period".into()));
        }
        let spec = FieldSpec {
            c_min: lo,
            c_max: hi,
            lipschitz_bound: std::f64::consts::PI * (hi - lo) / period,
            bump_intensity: 0.0,
            ..FieldSpec::default()
        };
        spec.validate()?;
        Ok(Self {
            spec,
            kind: FieldKind::Laminar {
                direction: [direction[0] / n, direction[1] / n],
                period,
                lo,
                hi,
            },
        })
    }

    pub fn kind(&self) -> FieldKindName {
        match self.kind {
            FieldKind::Constant(_) => FieldKindName::Constant,
            FieldKind::RandomBumps { .. } | FieldKind::Bumps(_) => FieldKindName::RandomBumps,
            FieldKind::Laminar { .. } => FieldKindName::Periodic,
            FieldKind::Spliced(_) => FieldKindName::Spliced,
        }
    }

    /// Short identifier used in reports and file names.
    pub fn id(&self) -> String {
        match &self.kind {
            FieldKind::Constant(c) => format!("constant-{c}"),
            FieldKind::RandomBumps { seed } => format!("bumps-{seed}"),
            FieldKind::Bumps(b) => format!("bumps-explicit-{}", b.len()),
            FieldKind::Laminar { period, .. } => format!("laminar-{period}"),
            FieldKind::Spliced(s) => format!("spliced({},{})", s.inner.id(), s.outer.id()),
        }
    }

    /// Proven Lipschitz constant of this particular construction.
    pub fn lipschitz_constant(&self) -> f64 {
        match &self.kind {
            FieldKind::Constant(_) => 0.0,
            FieldKind::RandomBumps { .. } => {
                if self.spec.bump_intensity > 0.0 {
                    self.spec.amp_hi * BUMP_MAX_SLOPE / self.spec.bump_radius
                } else {
                    0.0
                }
            }
            FieldKind::Bumps(b) => b
                .iter()
                .map(|b| b.amplitude * BUMP_MAX_SLOPE / self.spec.bump_radius)
                .fold(0.0, f64::max),
            FieldKind::Laminar { period, lo, hi, .. } => std::f64::consts::PI * (hi - lo) / period,
            FieldKind::Spliced(s) => {
                let span = self.spec.c_max - self.spec.c_min;
                s.inner.lipschitz_constant().max(s.outer.lipschitz_constant()) + span / s.blend_width
            }
        }
    }

    /// Whether the field is invariant under translation by one transverse
    /// period along the world y axis.
    pub fn transverse_period(&self) -> Option<f64> {
        match &self.kind {
            FieldKind::RandomBumps { .. } => self.spec.transverse_period,
            _ => None,
        }
    }

    /// True when the field does not depend on the world y coordinate at all.
    pub fn is_y_independent(&self) -> bool {
        match &self.kind {
            FieldKind::Constant(_) => true,
            FieldKind::RandomBumps { .. } => self.spec.bump_intensity == 0.0,
            FieldKind::Laminar { direction, .. } => direction[1] == 0.0,
            _ => false,
        }
    }

    /// True when the field is constant.
    pub fn constant_value(&self) -> Option<f64> {
        match &self.kind {
            FieldKind::Constant(c) => Some(*c),
            FieldKind::RandomBumps { .. } if self.spec.bump_intensity == 0.0 => Some(self.spec.c_min),
            _ => None,
        }
    }

    #[inline]
    pub fn evaluate(&self, x: [f64; 2]) -> f64 {
        match &self.kind {
            FieldKind::Constant(c) => *c,
            FieldKind::RandomBumps { seed } => self.eval_random(*seed, x),
            FieldKind::Bumps(bumps) => {
                let r = self.spec.bump_radius;
                let inv_r2 = 1.0 / (r * r);
                let raw = bumps
                    .iter()
                    .map(|b| {
                        let dx = x[0] - b.center[0];
                        let dy = x[1] - b.center[1];
                        let q2 = (dx * dx + dy * dy) * inv_r2;
                        if q2 < 1.0 {
                            b.amplitude * bump_profile(q2)
                        } else {
                            0.0
                        }
                    })
                    .fold(0.0, f64::max);
                self.spec.c_min + saturate(raw, self.spec.c_max - self.spec.c_min)
            }
            FieldKind::Laminar { direction, period, lo, hi } => {
                let s = x[0] * direction[0] + x[1] * direction[1];
                lo + (hi - lo) * 0.5 * (1.0 + (std::f64::consts::TAU * s / period).sin())
            }
            FieldKind::Spliced(s) => s.evaluate(x),
        }
    }

    fn eval_random(&self, seed: u64, x: [f64; 2]) -> f64 {
        let spec = &self.spec;
        let span = spec.c_max - spec.c_min;
        if spec.bump_intensity <= 0.0 || spec.amp_hi <= 0.0 {
            return spec.c_min;
        }
        let r = spec.bump_radius;
        let inv_r2 = 1.0 / (r * r);
        let cx = x[0].floor() as i64;
        let cy = x[1].floor() as i64;
        let period = spec.transverse_period.map(|p| p as i64);
        let mut raw = 0.0f64;
        for ci in cx - 1..=cx + 1 {
            for cj in cy - 1..=cy + 1 {
                let hj = match period {
                    Some(p) => cj.rem_euclid(p),
                    None => cj,
                };
                let n = poisson_from_uniform(spec.bump_intensity, unit_f64(hash4(seed, ci, hj, 0)));
                for k in 0..n as u64 {
                    let ox = unit_f64(hash4(seed, ci, hj, 3 * k + 1));
                    let oy = unit_f64(hash4(seed, ci, hj, 3 * k + 2));
                    let dx = x[0] - (ci as f64 + ox);
                    let dy = x[1] - (cj as f64 + oy);
                    let q2 = (dx * dx + dy * dy) * inv_r2;
                    if q2 < 1.0 {
                        let a = spec.amp_lo + (spec.amp_hi - spec.amp_lo) * unit_f64(hash4(seed, ci, hj, 3 * k + 3));
                        raw = raw.max(a * bump_profile(q2));
                    }
                }
            }
        }
        spec.c_min + saturate(raw, span)
    }

    /// Field values at every node of `grid`, in grid storage order.
    pub fn sample_grid(&self, grid: &Grid2D) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                out.push(self.evaluate(grid.position(i, j)));
            }
        }
        out
    }

    /// Smallest and largest value over a probe lattice of `region`.
    pub fn observed_bounds(&self, region: Rect, spacing: f64) -> [f64; 2] {
        region
            .probes(spacing)
            .map(|p| self.evaluate(p))
            .fold([f64::INFINITY, f64::NEG_INFINITY], |acc, v| [acc[0].min(v), acc[1].max(v)])
    }

    /// Bump centres and amplitudes whose support meets `region` (random or explicit kinds).
    pub fn bumps_in(&self, region: Rect) -> Vec<Bump> {
        match &self.kind {
            FieldKind::Bumps(b) => b.clone(),
            FieldKind::RandomBumps { seed } => {
                let spec = &self.spec;
                let period = spec.transverse_period.map(|p| p as i64);
                let mut out = Vec::new();
                let (x0, x1) = ((region.min[0] - 1.0).floor() as i64, (region.max[0] + 1.0).floor() as i64);
                let (y0, y1) = ((region.min[1] - 1.0).floor() as i64, (region.max[1] + 1.0).floor() as i64);
                for ci in x0..=x1 {
                    for cj in y0..=y1 {
                        let hj = period.map_or(cj, |p| cj.rem_euclid(p));
                        let n = poisson_from_uniform(spec.bump_intensity, unit_f64(hash4(*seed, ci, hj, 0)));
                        for k in 0..n as u64 {
                            let ox = unit_f64(hash4(*seed, ci, hj, 3 * k + 1));
                            let oy = unit_f64(hash4(*seed, ci, hj, 3 * k + 2));
                            let a = spec.amp_lo + (spec.amp_hi - spec.amp_lo) * unit_f64(hash4(*seed, ci, hj, 3 * k + 3));
                            out.push(Bump { center: [ci as f64 + ox, cj as f64 + oy], amplitude: a });
                        }
                    }
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

/// Grid infimum of `c^2 - |Dc|` (the two-dimensional Lions–Souganidis
/// quantity) with the gradient taken by central differences at the probe spacing.
pub fn ls_condition_margin(field: &CoefficientField, region: Rect, probe_spacing: f64) -> f64 {
    assert!(probe_spacing > 0.0, "probe_spacing must be positive");
    let d = probe_spacing;
    region
        .probes(probe_spacing)
        .map(|p| {
            let c = field.evaluate(p);
            let gx = (field.evaluate([p[0] + d, p[1]]) - field.evaluate([p[0] - d, p[1]])) / (2.0 * d);
            let gy = (field.evaluate([p[0], p[1] + d]) - field.evaluate([p[0], p[1] - d])) / (2.0 * d);
            c * c - gx.hypot(gy)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Point cloud of region nodes with a bucket index for capped nearest-distance queries.
#[derive(Debug, Clone)]
struct NodeCloud {
    bucket: f64,
    buckets: HashMap<(i64, i64), Vec<[f64; 2]>>,
}

impl NodeCloud {
    fn new(points: impl IntoIterator<Item = [f64; 2]>, bucket: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<[f64; 2]>> = HashMap::new();
        for p in points {
            let key = ((p[0] / bucket).floor() as i64, (p[1] / bucket).floor() as i64);
            buckets.entry(key).or_default().push(p);
        }
        Self { bucket, buckets }
    }

    /// Exact distance to the cloud when it is below `bucket`, otherwise some value `>= bucket`.
    fn distance_capped(&self, x: [f64; 2]) -> f64 {
        let kx = (x[0] / self.bucket).floor() as i64;
        let ky = (x[1] / self.bucket).floor() as i64;
        let mut best = f64::INFINITY;
        for a in kx - 1..=kx + 1 {
            for b in ky - 1..=ky + 1 {
                if let Some(pts) = self.buckets.get(&(a, b)) {
                    for p in pts {
                        best = best.min((x[0] - p[0]).hypot(x[1] - p[1]));
                    }
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
struct Splice {
    inner: CoefficientField,
    outer: CoefficientField,
    region: GridSet,
    boundary: NodeCloud,
    inflate: f64,
    blend_width: f64,
}

impl Splice {
    /// Distance to the region, where the region is the union of closed
    /// cells of half-diagonal `h / sqrt 2` around its nodes.
    fn region_distance(&self, x: [f64; 2]) -> f64 {
        let g = &self.region.grid;
        if let Some((i, j)) = g.nearest_node(x) {
            if self.region.mask[g.idx(i, j)] {
                return 0.0;
            }
        }
        (self.boundary.distance_capped(x) - self.inflate).max(0.0)
    }

    fn evaluate(&self, x: [f64; 2]) -> f64 {
        let d = self.region_distance(x);
        if d <= 0.0 {
            self.inner.evaluate(x)
        } else if d >= self.blend_width {
            self.outer.evaluate(x)
        } else {
            let theta = d / self.blend_width;
            (1.0 - theta) * self.inner.evaluate(x) + theta * self.outer.evaluate(x)
        }
    }
}

/// Field equal to `inner` on `region`, to `outer` at distance `>= blend_width`
/// from it, and linearly blended in between.
///
/// The result is Lipschitz with constant at most
/// `max(L_inner, L_outer) + (c_max - c_min) / blend_width`; for two constant
/// fields this is at most `L0` once `blend_width >= (c_max - c_min) / L0`.
pub fn splice_fields(
    inner: &CoefficientField,
    outer: &CoefficientField,
    region: &GridSet,
    blend_width: f64,
) -> Result<CoefficientField> {
    let (a, b) = (&inner.spec, &outer.spec);
    let same = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
    if !(same(a.c_min, b.c_min) && same(a.c_max, b.c_max) && same(a.lipschitz_bound, b.lipschitz_bound)) {
        return Err(Error::InvalidSpec(
            "spliced fields must share c_min, c_max and lipschitz_bound".into(),
        ));
    }
    let span = a.c_max - a.c_min;
    let threshold = if span > 0.0 {
        if a.lipschitz_bound > 0.0 {
            span / a.lipschitz_bound
        } else {
            f64::INFINITY
        }
    } else {
        0.0
    };
    if !(blend_width > 0.0) || blend_width < threshold * (1.0 - 1e-12) {
        return Err(Error::InvalidSpec(format!(
            "blend_width {blend_width} below the Lipschitz-compatible minimum (c_max - c_min) / L0 = {threshold}"
        )));
    }
    let g = region.grid;
    let h = g.spacing;
    let inflate = h * std::f64::consts::FRAC_1_SQRT_2;
    let ep = g.e_perp();
    let period = g.transverse_extent();
    let mut pts = Vec::new();
    for j in 0..g.ny {
        for i in 0..g.nx {
            if !region.mask[g.idx(i, j)] {
                continue;
            }
            let on_edge_i = i == 0 || i + 1 == g.nx;
            let on_edge_j = !g.transverse_periodic && (j == 0 || j + 1 == g.ny);
            let nb = |di: isize, dj: isize| -> bool {
                let ii = i as isize + di;
                let mut jj = j as isize + dj;
                if ii < 0 || ii >= g.nx as isize {
                    return false;
                }
                if g.transverse_periodic {
                    jj = jj.rem_euclid(g.ny as isize);
                } else if jj < 0 || jj >= g.ny as isize {
                    return false;
                }
                region.mask[g.idx(ii as usize, jj as usize)]
            };
            let boundary = on_edge_i || on_edge_j || !(nb(1, 0) && nb(-1, 0) && nb(0, 1) && nb(0, -1));
            if !boundary {
                continue;
            }
            let p = g.position(i, j);
            pts.push(p);
            if g.transverse_periodic {
                let reach = blend_width + inflate + h;
                let t = j as f64 * h;
                if t < reach {
                    pts.push([p[0] + period * ep[0], p[1] + period * ep[1]]);
                }
                if period - t < reach {
                    pts.push([p[0] - period * ep[0], p[1] - period * ep[1]]);
                }
            }
        }
    }
    let bucket = (blend_width + inflate).max(h);
    let spec = FieldSpec { seed: a.seed, ..a.clone() };
    Ok(CoefficientField {
        spec,
        kind: FieldKind::Spliced(Box::new(Splice {
            inner: inner.clone(),
            outer: outer.clone(),
            region: region.clone(),
            boundary: NodeCloud::new(pts, bucket),
            inflate,
            blend_width,
        })),
    })
}

/// Rasterised field window as CSV rows `x,y,c`.
pub fn field_csv(field: &CoefficientField, region: Rect, spacing: f64) -> String {
    let mut s = String::from("x,y,c\n");
    for p in region.probes(spacing) {
        let _ = writeln!(s, "{},{},{}", p[0], p[1], field.evaluate(p));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NormalBoundary;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probe(rng: &mut ChaCha8Rng, span: f64) -> [f64; 2] {
        [rng.gen_range(-span..span), rng.gen_range(-span..span)]
    }

    #[test]
    fn bump_slope_constant() {
        let q = 1.0 / 3f64.sqrt();
        let exact = 4.0 * q * (1.0 - q * q);
        assert!((exact - BUMP_MAX_SLOPE).abs() < 1e-12);
    }

    #[test]
    fn saturation_is_c1_and_bounded() {
        let span = 1.0;
        let k = 0.5;
        let left = (saturate(k, span) - saturate(k - 1e-7, span)) / 1e-7;
        let right = (saturate(k + 1e-7, span) - saturate(k, span)) / 1e-7;
        assert!((left - 1.0).abs() < 1e-6 && (right - 1.0).abs() < 1e-6);
        assert!(saturate(1e6, span) <= span);
        for s in [0.0, 0.3, 0.6, 1.0, 3.0] {
            let d = (saturate(s + 1e-6, span) - saturate(s, span)) / 1e-6;
            assert!(d <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn zero_intensity_is_constant_c_min() {
        let spec = FieldSpec { bump_intensity: 0.0, ..FieldSpec::default() };
        let f = sample_field(&spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(f.evaluate(random_probe(&mut rng, 50.0)), spec.c_min);
        }
    }

    #[test]
    fn evaluation_is_order_independent() {
        let f = sample_field(&FieldSpec::default(), 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probes: Vec<_> = (0..10_000).map(|_| random_probe(&mut rng, 30.0)).collect();
        let forward: Vec<f64> = probes.iter().map(|&p| f.evaluate(p)).collect();
        let g = sample_field(&FieldSpec::default(), 42).unwrap();
        let backward: Vec<f64> = probes.iter().rev().map(|&p| g.evaluate(p)).collect();
        for (a, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bounds_hold_on_many_probes() {
        let spec = FieldSpec { bump_intensity: 3.0, amp_lo: 0.8, amp_hi: 1.2, ..FieldSpec::default() };
        let f = sample_field(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100_000 {
            let c = f.evaluate(random_probe(&mut rng, 100.0));
            assert!(c >= spec.c_min && c <= spec.c_max, "{c}");
        }
    }

    #[test]
    fn finite_difference_slopes_respect_lipschitz_bound() {
        let spec = FieldSpec { bump_intensity: 2.0, ..FieldSpec::default() };
        let f = sample_field(&spec, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let p = random_probe(&mut rng, 20.0);
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let q = [p[0] + h * a.cos(), p[1] + h * a.sin()];
            worst = worst.max((f.evaluate(q) - f.evaluate(p)).abs() / h);
        }
        assert!(worst <= spec.lipschitz_bound * (1.0 + 1e-3), "{worst}");
        assert!(worst > 0.5, "audit should see real slopes, got {worst}");
    }

    #[test]
    fn single_bump_peak_value() {
        let spec = FieldSpec::default();
        let f = CoefficientField::from_bumps(&spec, vec![Bump { center: [0.0, 0.0], amplitude: 0.4 }]).unwrap();
        assert_eq!(f.evaluate([0.0, 0.0]), spec.c_min + 0.4);
        assert_eq!(f.evaluate([0.5, 0.0]), spec.c_min);
    }

    #[test]
    fn rejects_wide_bumps_and_steep_bumps() {
        let wide = FieldSpec { bump_radius: 0.6, ..FieldSpec::default() };
        let err = sample_field(&wide, 0).unwrap_err().to_string();
        assert!(err.contains("1-dependence"), "{err}");
        let steep = FieldSpec { amp_hi: 2.0, ..FieldSpec::default() };
        assert!(sample_field(&steep, 0).is_err());
    }

    #[test]
    fn transverse_period_wraps_cells() {
        let spec = FieldSpec { transverse_period: Some(8.0), ..FieldSpec::default() };
        let f = sample_field(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let p = random_probe(&mut rng, 20.0);
            let a = f.evaluate(p);
            let b = f.evaluate([p[0], p[1] + 8.0]);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ls_margin_constant_fields() {
        let one = CoefficientField::constant(1.0).unwrap();
        let r = Rect::new([0.0, 0.0], [3.0, 3.0]);
        assert_eq!(ls_condition_margin(&one, r, 0.1), 1.0);
        let spec = FieldSpec { bump_intensity: 0.0, ..FieldSpec::default() };
        let cmin = sample_field(&spec, 1).unwrap();
        assert_eq!(ls_condition_margin(&cmin, r, 0.1), spec.c_min * spec.c_min);
    }

    #[test]
    fn ls_margin_negative_for_steep_bump() {
        // slope a * 1.5396 / r = 6.16 > c_max^2 = 4 at the inflection radius r / sqrt 3
        let spec = FieldSpec { bump_radius: 0.25, lipschitz_bound: 7.0, ..FieldSpec::default() };
        let f = CoefficientField::from_bumps(&spec, vec![Bump { center: [0.0, 0.0], amplitude: 1.0 }]).unwrap();
        let q = 1.0 / 3f64.sqrt();
        let c_at = spec.c_min + saturate(1.0 * bump_profile(q * q), spec.c_max - spec.c_min);
        let analytic_slope = 1.0 * BUMP_MAX_SLOPE / spec.bump_radius;
        assert!(c_at * c_at - analytic_slope < 0.0);
        let m = ls_condition_margin(&f, Rect::new([-0.5, -0.5], [0.5, 0.5]), 0.005);
        assert!(m < 0.0, "{m}");
        assert!(f.observed_bounds(Rect::new([-1.0, -1.0], [1.0, 1.0]), 0.01)[0] >= spec.c_min);
    }

    fn splice_grid() -> Grid2D {
        Grid2D::square([0.0, 0.0], 4.0, 0.1, NormalBoundary::Clamped).unwrap()
    }

    #[test]
    fn splice_of_identical_fields_is_identity() {
        let f = sample_field(&FieldSpec::default(), 5).unwrap();
        let g = splice_grid();
        let region = GridSet::from_fn(g, |p| p[0] < 0.0);
        let s = splice_fields(&f, &f, &region, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let p = random_probe(&mut rng, 6.0);
            assert!((s.evaluate(p) - f.evaluate(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn splice_over_whole_window_is_inner() {
        let spec = FieldSpec::default();
        let inner = sample_field(&spec, 5).unwrap();
        let outer = CoefficientField::constant_in(&spec, spec.c_max).unwrap();
        let g = splice_grid();
        let s = splice_fields(&inner, &outer, &GridSet::full(g), 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let p = random_probe(&mut rng, 4.0);
            assert_eq!(s.evaluate(p), inner.evaluate(p));
        }
    }

    #[test]
    fn splice_between_constants_respects_lipschitz() {
        let spec = FieldSpec::default();
        let lo = CoefficientField::constant_in(&spec, spec.c_min).unwrap();
        let hi = CoefficientField::constant_in(&spec, spec.c_max).unwrap();
        let g = splice_grid();
        let region = GridSet::from_fn(g, |p| p[0].hypot(p[1]) <= 1.5);
        let w = (spec.c_max - spec.c_min) / spec.lipschitz_bound;
        assert!(splice_fields(&lo, &hi, &region, 0.5 * w).is_err());
        let s = splice_fields(&lo, &hi, &region, w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..20_000 {
            let r: f64 = rng.gen_range(1.3..2.0);
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let p = [r * a.cos(), r * a.sin()];
            let b: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let q = [p[0] + h * b.cos(), p[1] + h * b.sin()];
            worst = worst.max((s.evaluate(q) - s.evaluate(p)).abs() / h);
        }
        assert!(worst <= spec.lipschitz_bound * (1.0 + 1e-3), "{worst}");
        assert!(worst > 0.9 * spec.lipschitz_bound, "blend annulus should be probed, {worst}");
        assert_eq!(s.evaluate([0.0, 0.0]), spec.c_min);
        assert_eq!(s.evaluate([3.0, 3.0]), spec.c_max);
    }

    #[test]
    fn kv_roundtrip_and_unknown_key() {
        let spec = FieldSpec { transverse_period: Some(40.0), seed: 77, ..FieldSpec::default() };
        let back = FieldSpec::from_kv(&spec.to_kv()).unwrap();
        assert_eq!(spec, back);
        let err = FieldSpec::from_kv("c_min = 1\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "bogus"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn values_stay_in_bounds(seed in any::<u64>(), x in -1e3f64..1e3, y in -1e3f64..1e3,
                                 lambda in 0.0f64..6.0, amp in 0.0f64..1.29) {
            let spec = FieldSpec { bump_intensity: lambda, amp_lo: 0.0, amp_hi: amp, ..FieldSpec::default() };
            let f = sample_field(&spec, seed).unwrap();
            let c = f.evaluate([x, y]);
            prop_assert!(c >= spec.c_min && c <= spec.c_max);
            prop_assert_eq!(c.to_bits(), f.evaluate([x, y]).to_bits());
        }
    }
}
