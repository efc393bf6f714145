//! Explicit level-set solver for `u_t = tr[(I - n⊗n) D²u] + c(x)|Du|`.
//!
//! The curvature part uses central differences with `|Du|² + ε²` in the
//! denominator (`ε = 1e-6 h`); the forcing uses the first-order upwind norm
//! for an expanding front. The time step is `min(h²/8, h/(4 c_max))`.
//!
//! Long runs use a narrow band: only nodes with `|u| < B` are updated, and
//! every `K` steps `u` is rebuilt as a signed distance to its zero level set
//! outside a `5h` band. Frozen values never reach the zero level set between
//! rebuilds; a crossing near the band edge forces an early rebuild.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::grid::{Grid2D, GridSet, NormalBoundary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialShape {
    /// `{x . e <= offset}`
    HalfSpace { direction: [f64; 2], offset: f64 },
    Disc { center: [f64; 2], radius: f64 },
    #[serde(skip)]
    Mask(GridSet),
}

/// Closed initial set with its declared interior and exterior ball radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialSet {
    pub shape: InitialShape,
    pub interior_ball_radius: f64,
    pub exterior_ball_radius: f64,
}

impl InitialSet {
    pub fn half_space(direction: [f64; 2], offset: f64, r0: f64) -> Self {
        let n = direction[0].hypot(direction[1]);
        Self {
            shape: InitialShape::HalfSpace { direction: [direction[0] / n, direction[1] / n], offset },
            interior_ball_radius: r0,
            exterior_ball_radius: 1.0,
        }
    }

    pub fn disc(center: [f64; 2], radius: f64) -> Self {
        Self {
            shape: InitialShape::Disc { center, radius },
            interior_ball_radius: radius,
            exterior_ball_radius: 1.0,
        }
    }

    pub fn mask(set: GridSet, r0: f64) -> Self {
        Self {
            shape: InitialShape::Mask(set),
            interior_ball_radius: r0,
            exterior_ball_radius: 1.0,
        }
    }

    /// Checks `R0 >= max(2 / c_min, 2)`, the precondition for monotone growth.
    pub fn check_ball_radius(&self, c_min: f64) -> Result<()> {
        let need = (2.0 / c_min).max(2.0);
        if self.interior_ball_radius + 1e-12 < need {
            return Err(Error::InvalidSet(format!(
                "interior ball radius {} below max(2/c_min, 2) = {need}",
                self.interior_ball_radius
            )));
        }
        Ok(())
    }

    /// Distance from a world point to the set (zero inside), for analytic shapes.
    pub fn distance(&self, x: [f64; 2]) -> Option<f64> {
        match &self.shape {
            InitialShape::HalfSpace { direction, offset } => {
                Some((x[0] * direction[0] + x[1] * direction[1] - offset).max(0.0))
            }
            InitialShape::Disc { center, radius } => {
                Some(((x[0] - center[0]).hypot(x[1] - center[1]) - radius).max(0.0))
            }
            InitialShape::Mask(_) => None,
        }
    }

    pub fn label(&self) -> String {
        match &self.shape {
            InitialShape::HalfSpace { direction, offset } => {
                format!("half-space e=({:.6},{:.6}) offset={offset}", direction[0], direction[1])
            }
            InitialShape::Disc { center, radius } => {
                format!("disc center=({},{}) radius={radius}", center[0], center[1])
            }
            InitialShape::Mask(s) => format!("mask nodes={}", s.count()),
        }
    }

    /// Node mask of the set on `grid`.
    pub fn to_grid_set(&self, grid: &Grid2D) -> Result<GridSet> {
        match &self.shape {
            InitialShape::Mask(s) => {
                if s.grid != *grid {
                    return Err(Error::InvalidSet("mask grid differs from the solver grid".into()));
                }
                Ok(s.clone())
            }
            _ => Ok(GridSet::from_fn(*grid, |p| self.distance(p).unwrap_or(f64::INFINITY) <= 0.0)),
        }
    }
}

/// Run-length entry of the accepted-step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CflEntry {
    pub dt: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetState {
    pub grid: Grid2D,
    pub u: Vec<f64>,
    pub t: f64,
    /// Accepted time steps, run-length encoded.
    pub cfl_history: Vec<CflEntry>,
    /// First time each node reached `u >= 0`; `inf` if never.
    pub first_crossing: Vec<f64>,
    pub reinit_count: u64,
}

impl LevelSetState {
    pub fn steps(&self) -> u64 {
        self.cfl_history.iter().map(|e| e.steps).sum()
    }

    fn log_step(&mut self, dt: f64) {
        match self.cfl_history.last_mut() {
            Some(e) if e.dt == dt => e.steps += 1,
            _ => self.cfl_history.push(CflEntry { dt, steps: 1 }),
        }
    }

    /// Snapshot rows `x,y,u`.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut s = String::with_capacity(g.len() * 32);
        s.push_str("x,y,u\n");
        for j in 0..g.ny {
            for i in 0..g.nx {
                let p = g.position(i, j);
                let _ = writeln!(s, "{},{},{}", p[0], p[1], self.u[g.idx(i, j)]);
            }
        }
        s
    }

    pub fn metadata(&self) -> SnapshotMeta {
        SnapshotMeta {
            grid: self.grid,
            t: self.t,
            steps: self.steps(),
            cfl_history: self.cfl_history.clone(),
            reinit_count: self.reinit_count,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub grid: Grid2D,
    pub t: f64,
    pub steps: u64,
    pub cfl_history: Vec<CflEntry>,
    pub reinit_count: u64,
}

/// `u(x, 0) = -d(x, S)`.
pub fn init_state(grid: &Grid2D, set: &InitialSet) -> Result<LevelSetState> {
    let u: Vec<f64> = match &set.shape {
        InitialShape::Mask(s) => {
            if s.grid != *grid {
                return Err(Error::InvalidSet("mask grid differs from the solver grid".into()));
            }
            if s.is_empty() {
                return Err(Error::EmptySet("init_state"));
            }
            s.distance_field().into_iter().map(|d| -d).collect()
        }
        InitialShape::Disc { radius, .. } if !(*radius > 0.0) => {
            return Err(Error::InvalidSet(format!("disc radius must be positive, got {radius}")));
        }
        _ => {
            let mut u = Vec::with_capacity(grid.len());
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    u.push(-set.distance(grid.position(i, j)).unwrap());
                }
            }
            u
        }
    };
    let first_crossing = u.iter().map(|&v| if v >= 0.0 { 0.0 } else { f64::INFINITY }).collect();
    Ok(LevelSetState {
        grid: *grid,
        u,
        t: 0.0,
        cfl_history: Vec::new(),
        first_crossing,
        reinit_count: 0,
    })
}

/// Signed distance to `∂S`, positive inside, with the same superlevel set
/// `{u >= 0} = S` as [`init_state`]. The flat plateau of `-d(x, S)` inside `S`
/// carries no upwind information, so the solver starts from this relabeling.
///
/// For masks the inside value is `d(x, S^c) - h`, so boundary nodes of `S` sit
/// on the zero level.
pub fn signed_initial_state(grid: &Grid2D, set: &InitialSet) -> Result<LevelSetState> {
    let mut state = init_state(grid, set)?;
    match &set.shape {
        InitialShape::HalfSpace { direction, offset } => {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let p = grid.position(i, j);
                    state.u[grid.idx(i, j)] = offset - (p[0] * direction[0] + p[1] * direction[1]);
                }
            }
        }
        InitialShape::Disc { center, radius } => {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let p = grid.position(i, j);
                    state.u[grid.idx(i, j)] = radius - (p[0] - center[0]).hypot(p[1] - center[1]);
                }
            }
        }
        InitialShape::Mask(s) => {
            let comp = s.complement();
            if !comp.is_empty() {
                let h = grid.spacing;
                for (k, d) in comp.distance_field().into_iter().enumerate() {
                    if s.mask[k] {
                        state.u[k] = d - h;
                    }
                }
            }
        }
    }
    // Nodes on S keep u >= 0 under round-off.
    for (u, &m) in state.u.iter_mut().zip(&state.first_crossing) {
        if m == 0.0 && *u < 0.0 {
            *u = 0.0;
        }
    }
    Ok(state)
}

/// Stencil access with ghost values at the grid edges.
struct Stencil<'a> {
    g: &'a Grid2D,
    u: &'a [f64],
}

impl Stencil<'_> {
    fn val(&self, i: isize, j: isize) -> f64 {
        let g = self.g;
        let (nx, ny) = (g.nx as isize, g.ny as isize);
        let j = if g.transverse_periodic { j.rem_euclid(ny) } else { j };
        let ghost = |inner: f64, next: f64| match g.normal_boundary {
            NormalBoundary::Extrapolation => 2.0 * inner - next,
            NormalBoundary::Clamped => inner,
        };
        if j < 0 {
            return ghost(self.val(i, 0), self.val(i, 1));
        }
        if j >= ny {
            return ghost(self.val(i, ny - 1), self.val(i, ny - 2));
        }
        if i < 0 {
            return ghost(self.val(0, j), self.val(1, j));
        }
        if i >= nx {
            return ghost(self.val(nx - 1, j), self.val(nx - 2, j));
        }
        self.u[j as usize * g.nx + i as usize]
    }

    /// `[SW, S, SE, W, C, E, NW, N, NE]` with `i` east and `j` north.
    #[inline]
    fn gather(&self, i: usize, j: usize) -> [f64; 9] {
        let g = self.g;
        let interior_i = i >= 1 && i + 1 < g.nx;
        let interior_j = j >= 1 && j + 1 < g.ny;
        if interior_i && (interior_j || g.transverse_periodic) {
            let nx = g.nx;
            let js = if j == 0 { g.ny - 1 } else { j - 1 };
            let jn = if j + 1 == g.ny { 0 } else { j + 1 };
            let (s, c, n) = (js * nx, j * nx, jn * nx);
            let u = self.u;
            return [
                u[s + i - 1], u[s + i], u[s + i + 1],
                u[c + i - 1], u[c + i], u[c + i + 1],
                u[n + i - 1], u[n + i], u[n + i + 1],
            ];
        }
        let (i, j) = (i as isize, j as isize);
        [
            self.val(i - 1, j - 1), self.val(i, j - 1), self.val(i + 1, j - 1),
            self.val(i - 1, j), self.val(i, j), self.val(i + 1, j),
            self.val(i - 1, j + 1), self.val(i, j + 1), self.val(i + 1, j + 1),
        ]
    }
}

#[inline]
fn curvature_of(n: &[f64; 9], h: f64) -> f64 {
    let inv_2h = 0.5 / h;
    let inv_h2 = 1.0 / (h * h);
    let ux = (n[5] - n[3]) * inv_2h;
    let uy = (n[7] - n[1]) * inv_2h;
    let uxx = (n[5] - 2.0 * n[4] + n[3]) * inv_h2;
    let uyy = (n[7] - 2.0 * n[4] + n[1]) * inv_h2;
    let uxy = (n[8] - n[6] - n[2] + n[0]) * 0.25 * inv_h2;
    let eps = 1e-6 * h;
    let g2 = ux * ux + uy * uy;
    if g2 <= eps * eps {
        // No normal direction: the regularized quotient degenerates to 0 at
        // symmetric extrema, which freezes them. Use the mean eigenvalue.
        return 0.5 * (uxx + uyy);
    }
    (uxx * uy * uy - 2.0 * uxy * ux * uy + uyy * ux * ux) / (g2 + eps * eps)
}

/// Upwind gradient norm for a front moving towards decreasing `u`.
#[inline]
fn upwind_norm(n: &[f64; 9], h: f64) -> f64 {
    let inv_h = 1.0 / h;
    let dmx = ((n[4] - n[3]) * inv_h).min(0.0);
    let dpx = ((n[5] - n[4]) * inv_h).max(0.0);
    let dmy = ((n[4] - n[1]) * inv_h).min(0.0);
    let dpy = ((n[7] - n[4]) * inv_h).max(0.0);
    (dmx * dmx + dpx * dpx + dmy * dmy + dpy * dpy).sqrt()
}

/// Regularized curvature term at node `(i, j)`.
pub fn curvature_term(state: &LevelSetState, i: usize, j: usize) -> f64 {
    let st = Stencil { g: &state.grid, u: &state.u };
    curvature_of(&st.gather(i, j), state.grid.spacing)
}

/// `c(x) G⁺(u)` at node `(i, j)`.
pub fn forcing_term(state: &LevelSetState, field: &CoefficientField, i: usize, j: usize) -> f64 {
    let st = Stencil { g: &state.grid, u: &state.u };
    field.evaluate(state.grid.position(i, j)) * upwind_norm(&st.gather(i, j), state.grid.spacing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingMode {
    Enabled,
    /// `c ≡ 0`; only for oracle tests of pure curvature flow.
    Disabled,
}

/// Stable explicit step `min(h²/8, h/(4 c_max))`.
pub fn cfl_dt(h: f64, c_max: f64) -> f64 {
    let parabolic = h * h / 8.0;
    if c_max > 0.0 {
        parabolic.min(h / (4.0 * c_max))
    } else {
        parabolic
    }
}

/// One full-grid explicit step with node speeds `speeds`.
fn full_step(state: &mut LevelSetState, speeds: &[f64], dt: f64, scratch: &mut Vec<f64>) -> Result<()> {
    let g = state.grid;
    let h = g.spacing;
    scratch.resize(g.len(), 0.0);
    {
        let st = Stencil { g: &g, u: &state.u };
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                let n = st.gather(i, j);
                let v = n[4] + dt * (curvature_of(&n, h) + speeds[k] * upwind_norm(&n, h));
                if !v.is_finite() {
                    return Err(Error::NonFinite { i, j, t: state.t });
                }
                scratch[k] = v;
            }
        }
    }
    let t0 = state.t;
    for (k, (&new, old)) in scratch.iter().zip(state.u.iter_mut()).enumerate() {
        if *old < 0.0 && new >= 0.0 && state.first_crossing[k].is_infinite() {
            state.first_crossing[k] = t0 + dt * (-*old) / (new - *old);
        }
        *old = new;
    }
    state.t = t0 + dt;
    state.log_step(dt);
    Ok(())
}

/// One explicit Euler step on the whole grid with the CFL step of `field`.
pub fn step(state: &LevelSetState, field: &CoefficientField) -> Result<LevelSetState> {
    let speeds = field.sample_grid(&state.grid);
    let dt = cfl_dt(state.grid.spacing, field.spec.c_max);
    let mut next = state.clone();
    full_step(&mut next, &speeds, dt, &mut Vec::new())?;
    Ok(next)
}

/// Same as [`step`] with zero forcing.
pub fn step_unforced(state: &LevelSetState) -> Result<LevelSetState> {
    let speeds = vec![0.0; state.grid.len()];
    let dt = cfl_dt(state.grid.spacing, 0.0);
    let mut next = state.clone();
    full_step(&mut next, &speeds, dt, &mut Vec::new())?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopRule {
    /// `t >= T`; the last step is shortened to land on `T`.
    Time(f64),
    /// Every listed node index has crossed.
    ProbesReached(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub narrow_band: bool,
    /// Steps between signed-distance rebuilds; 0 disables them.
    pub reinit_interval: usize,
    pub forcing: ForcingMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            narrow_band: true,
            reinit_interval: 50,
            forcing: ForcingMode::Enabled,
        }
    }
}

/// Half-width (in units of `h`) of the band left untouched by a rebuild.
const KEEP_BAND: f64 = 5.0;
const FAR_EXTRA: f64 = 2.0;
const BAND_MIN: f64 = 5.0;

/// Stateful evolution with cached speeds, a narrow band and periodic rebuilds.
pub struct Solver {
    state: LevelSetState,
    speeds: Vec<f64>,
    dt: f64,
    opts: SolverOptions,
    band: f64,
    far: f64,
    active: Vec<usize>,
    is_active: Vec<bool>,
    since_reinit: usize,
    force_reinit: bool,
    scratch: Vec<f64>,
    dist: Vec<f64>,
    touched: Vec<usize>,
    stamp: Vec<(isize, isize, f64)>,
}

impl Solver {
    pub fn new(grid: &Grid2D, field: &CoefficientField, set: &InitialSet, opts: SolverOptions) -> Result<Self> {
        Ok(Self::from_state(signed_initial_state(grid, set)?, field, opts))
    }

    /// Continues from an arbitrary state; no rebuild happens before the first step.
    pub fn from_state(state: LevelSetState, field: &CoefficientField, opts: SolverOptions) -> Self {
        let g = state.grid;
        let h = g.spacing;
        let (speeds, c_max) = match opts.forcing {
            ForcingMode::Enabled => (field.sample_grid(&g), field.spec.c_max),
            ForcingMode::Disabled => (vec![0.0; g.len()], 0.0),
        };
        let dt = cfl_dt(h, c_max);
        let k = opts.reinit_interval.max(1) as f64;
        let band = BAND_MIN * h + k * dt * (c_max + 2.0);
        let far = band + FAR_EXTRA * h;
        let r = (far / h).ceil() as isize;
        let mut stamp = Vec::new();
        for dj in -r..=r {
            for di in -r..=r {
                let d = (di as f64).hypot(dj as f64) * h;
                if d <= far {
                    stamp.push((di, dj, d));
                }
            }
        }
        let n = g.len();
        let (active, is_active) = if opts.narrow_band {
            (Vec::new(), vec![false; n])
        } else {
            ((0..n).collect(), vec![true; n])
        };
        let mut s = Self {
            state,
            speeds,
            dt,
            opts,
            band,
            far,
            active,
            is_active,
            since_reinit: 0,
            force_reinit: false,
            scratch: Vec::new(),
            dist: vec![f64::INFINITY; n],
            touched: Vec::new(),
            stamp,
        };
        if s.opts.narrow_band {
            s.activate_all_near();
        }
        s
    }

    pub fn state(&self) -> &LevelSetState {
        &self.state
    }

    pub fn into_state(self) -> LevelSetState {
        self.state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Forces a signed-distance rebuild now.
    pub fn reinitialize(&mut self) {
        let full = !self.opts.narrow_band;
        self.rebuild();
        if full {
            self.active = (0..self.state.grid.len()).collect();
            self.is_active.iter_mut().for_each(|a| *a = true);
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    fn activate_all_near(&mut self) {
        self.active.clear();
        for (k, &v) in self.state.u.iter().enumerate() {
            let on = v.abs() < self.band;
            self.is_active[k] = on;
            if on {
                self.active.push(k);
            }
        }
    }

    /// Rebuilds `u` as a signed distance to its zero level set outside the
    /// keep band and resets the active set.
    fn rebuild(&mut self) {
        let g = self.state.grid;
        let h = g.spacing;
        let keep = KEEP_BAND * h;
        let u = &self.state.u;
        // Marching-squares segments of the zero level, one or two per cell,
        // stored as endpoint offsets from the cell's lower-left node.
        let mut segs: Vec<(usize, [f64; 2], [f64; 2])> = Vec::new();
        let candidates: Vec<usize> = if self.opts.narrow_band && !self.active.is_empty() {
            self.active.clone()
        } else {
            (0..g.len()).collect()
        };
        for k in candidates {
            let (i, j) = g.coords(k);
            if i + 1 >= g.nx || (!g.transverse_periodic && j + 1 >= g.ny) {
                continue;
            }
            let jn = if j + 1 == g.ny { 0 } else { j + 1 };
            // Corners counter-clockwise from the lower left.
            let c = [u[g.idx(i, j)], u[g.idx(i + 1, j)], u[g.idx(i + 1, jn)], u[g.idx(i, jn)]];
            let pos = [c[0] >= 0.0, c[1] >= 0.0, c[2] >= 0.0, c[3] >= 0.0];
            if pos.iter().all(|&p| p) || pos.iter().all(|&p| !p) {
                continue;
            }
            let corner = [[0.0, 0.0], [h, 0.0], [h, h], [0.0, h]];
            let mut pts: [[f64; 2]; 4] = [[0.0; 2]; 4];
            let mut edges: [usize; 4] = [0; 4];
            let mut n = 0;
            for e in 0..4 {
                let f = (e + 1) % 4;
                if pos[e] != pos[f] {
                    let t = c[e].abs() / (c[e].abs() + c[f].abs());
                    pts[n] = [
                        corner[e][0] + t * (corner[f][0] - corner[e][0]),
                        corner[e][1] + t * (corner[f][1] - corner[e][1]),
                    ];
                    edges[n] = e;
                    n += 1;
                }
            }
            if n == 2 {
                segs.push((k, pts[0], pts[1]));
            } else {
                // Saddle: crossings lie on edges 0,1,2,3 in order. Join them so
                // that the centre value's sign region stays connected.
                let centre = 0.25 * (c[0] + c[1] + c[2] + c[3]);
                debug_assert_eq!(edges, [0, 1, 2, 3]);
                if (centre >= 0.0) == pos[0] {
                    segs.push((k, pts[0], pts[3]));
                    segs.push((k, pts[1], pts[2]));
                } else {
                    segs.push((k, pts[0], pts[1]));
                    segs.push((k, pts[2], pts[3]));
                }
            }
        }
        for &k in &self.touched {
            self.dist[k] = f64::INFINITY;
        }
        self.touched.clear();
        for &(k, a, b) in &segs {
            let (i, j) = g.coords(k);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            for &(di, dj, _) in &self.stamp {
                let ii = i as isize + di;
                if ii < 0 || ii >= g.nx as isize {
                    continue;
                }
                let mut jj = j as isize + dj;
                if g.transverse_periodic {
                    jj = jj.rem_euclid(g.ny as isize);
                } else if jj < 0 || jj >= g.ny as isize {
                    continue;
                }
                let q = jj as usize * g.nx + ii as usize;
                let p = [di as f64 * h - a[0], dj as f64 * h - a[1]];
                let t = if len2 > 0.0 { ((p[0] * ab[0] + p[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let cand = (p[0] - t * ab[0]).hypot(p[1] - t * ab[1]);
                if self.dist[q].is_infinite() {
                    self.touched.push(q);
                }
                if cand < self.dist[q] {
                    self.dist[q] = cand;
                }
            }
        }
        self.touched.sort_unstable();
        for &k in &self.active {
            self.is_active[k] = false;
        }
        self.active.clear();
        let u = &mut self.state.u;
        for &q in &self.touched {
            let v = u[q];
            if v.abs() > keep {
                let d = self.dist[q].min(self.far);
                u[q] = if v >= 0.0 { d } else { -d };
            }
            if u[q].abs() < self.band {
                self.is_active[q] = true;
                self.active.push(q);
            }
        }
        if !self.opts.narrow_band {
            // Every node is updated in full-grid mode, so nothing may stay stale.
            let far = self.far;
            for (k, v) in u.iter_mut().enumerate() {
                if self.dist[k].is_infinite() && v.abs() > keep {
                    *v = if *v >= 0.0 { far } else { -far };
                }
            }
        }
        self.state.reinit_count += 1;
        self.since_reinit = 0;
        self.force_reinit = false;
    }

    fn near_inactive_negative(&self, k: usize) -> bool {
        let g = self.state.grid;
        let (i, j) = g.coords(k);
        for dj in -3isize..=3 {
            let mut jj = j as isize + dj;
            if g.transverse_periodic {
                jj = jj.rem_euclid(g.ny as isize);
            } else if jj < 0 || jj >= g.ny as isize {
                continue;
            }
            for di in -3isize..=3 {
                let ii = i as isize + di;
                if ii < 0 || ii >= g.nx as isize {
                    continue;
                }
                let q = jj as usize * g.nx + ii as usize;
                if !self.is_active[q] && self.state.u[q] < 0.0 {
                    return true;
                }
            }
        }
        false
    }

    /// Advances by `dt` (at most the CFL step).
    fn advance(&mut self, dt: f64) -> Result<()> {
        if !self.opts.narrow_band {
            full_step(&mut self.state, &self.speeds, dt, &mut self.scratch)?;
            self.since_reinit += 1;
            if self.opts.reinit_interval > 0 && self.since_reinit >= self.opts.reinit_interval {
                self.rebuild();
                self.active = (0..self.state.grid.len()).collect();
                self.is_active.iter_mut().for_each(|a| *a = true);
            }
            return Ok(());
        }
        let g = self.state.grid;
        let h = g.spacing;
        self.scratch.resize(self.active.len(), 0.0);
        {
            let st = Stencil { g: &g, u: &self.state.u };
            for (slot, &k) in self.scratch.iter_mut().zip(&self.active) {
                let (i, j) = g.coords(k);
                let n = st.gather(i, j);
                let v = n[4] + dt * (curvature_of(&n, h) + self.speeds[k] * upwind_norm(&n, h));
                if !v.is_finite() {
                    return Err(Error::NonFinite { i, j, t: self.state.t });
                }
                *slot = v;
            }
        }
        let t0 = self.state.t;
        let mut edge_hit = false;
        for idx in 0..self.active.len() {
            let k = self.active[idx];
            let old = self.state.u[k];
            let new = self.scratch[idx];
            self.state.u[k] = new;
            if old < 0.0 && new >= 0.0 && self.state.first_crossing[k].is_infinite() {
                self.state.first_crossing[k] = t0 + dt * (-old) / (new - old);
                edge_hit = edge_hit || self.near_inactive_negative(k);
            }
        }
        self.state.t = t0 + dt;
        self.state.log_step(dt);
        self.since_reinit += 1;
        if edge_hit {
            self.force_reinit = true;
        }
        if self.force_reinit || (self.opts.reinit_interval > 0 && self.since_reinit >= self.opts.reinit_interval) {
            self.rebuild();
        }
        Ok(())
    }

    fn satisfied(&self, rule: &StopRule) -> bool {
        match rule {
            StopRule::Time(t) => self.state.t >= *t - 1e-12 * t.abs().max(1.0),
            StopRule::ProbesReached(p) => p.iter().all(|&k| self.state.first_crossing[k].is_finite()),
        }
    }

    /// Steps until `rule` holds; fails with the current state once `t_max` passes.
    pub fn run(&mut self, rule: &StopRule, t_max: f64) -> Result<()> {
        if let StopRule::ProbesReached(p) = rule {
            if let Some(&bad) = p.iter().find(|&&k| k >= self.state.grid.len()) {
                return Err(Error::InvalidSet(format!("probe index {bad} outside the grid")));
            }
        }
        while !self.satisfied(rule) {
            if self.state.t >= t_max - 1e-12 {
                return Err(Error::HorizonExceeded {
                    t_max,
                    state: Box::new(self.state.clone()),
                });
            }
            let mut dt = self.dt.min(t_max - self.state.t);
            if let StopRule::Time(t) = rule {
                dt = dt.min(t - self.state.t);
            }
            self.advance(dt)?;
        }
        Ok(())
    }
}

/// Evolves `state` until `rule` holds, with the default narrow-band options.
pub fn evolve_until(
    state: LevelSetState,
    field: &CoefficientField,
    rule: &StopRule,
    t_max: f64,
    opts: SolverOptions,
) -> Result<LevelSetState> {
    let mut solver = Solver::from_state(state, field, opts);
    solver.run(rule, t_max)?;
    Ok(solver.into_state())
}
