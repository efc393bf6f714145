//! Rectangular node grids aligned with a front direction, boolean node sets,
//! exact Euclidean distance transforms and the morphology built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ghost-node rule at the two ends of the normal (front-direction) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalBoundary {
    /// Ghost value `2 u[0] - u[1]`.
    Extrapolation,
    /// Ghost value `u[0]`.
    Clamped,
}

/// A uniform grid whose first index runs along `front_direction` and whose
/// second index runs along the rotated transverse direction.
///
/// Node `(i, j)` sits at `origin + i h e + j h e_perp` with `e_perp = (-e_y, e_x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
    pub front_direction: [f64; 2],
    pub transverse_periodic: bool,
    pub normal_boundary: NormalBoundary,
}

impl Grid2D {
    pub fn new(
        origin: [f64; 2],
        spacing: f64,
        nx: usize,
        ny: usize,
        front_direction: [f64; 2],
        transverse_periodic: bool,
        normal_boundary: NormalBoundary,
    ) -> Result<Self> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing}")));
        }
        if nx < 8 || ny < 8 {
            return Err(Error::InvalidGrid(format!("need nx, ny >= 8, got {nx} x {ny}")));
        }
        let norm = front_direction[0].hypot(front_direction[1]);
        if !(norm > 0.0) {
            return Err(Error::InvalidGrid("front direction must be non-zero".into()));
        }
        let e = if (norm - 1.0).abs() < 1e-12 {
            front_direction
        } else {
            [front_direction[0] / norm, front_direction[1] / norm]
        };
        Ok(Self {
            origin,
            spacing,
            nx,
            ny,
            front_direction: e,
            transverse_periodic,
            normal_boundary,
        })
    }

    /// Window for a front moving along `e`: normal coordinate in
    /// `[normal_min, normal_max]`, transverse coordinate centred on zero.
    ///
    /// With `periodic` the transverse node count is `width / h` so that the
    /// period is exactly `width`; otherwise both ends of `[-width/2, width/2]`
    /// are nodes.
    pub fn front_window(
        e: [f64; 2],
        normal_min: f64,
        normal_max: f64,
        width: f64,
        h: f64,
        periodic: bool,
    ) -> Result<Self> {
        let norm = e[0].hypot(e[1]);
        let e = [e[0] / norm, e[1] / norm];
        let ep = [-e[1], e[0]];
        let nx = ((normal_max - normal_min) / h).round() as usize + 1;
        let ny = if periodic {
            (width / h).round() as usize
        } else {
            (width / h).round() as usize + 1
        };
        let half = width / 2.0;
        let origin = [
            normal_min * e[0] - half * ep[0],
            normal_min * e[1] - half * ep[1],
        ];
        Self::new(origin, h, nx, ny, e, periodic, NormalBoundary::Extrapolation)
    }

    /// Axis-aligned square of half-width `half_width` centred on `center`;
    /// the centre is a node.
    pub fn square(center: [f64; 2], half_width: f64, h: f64, boundary: NormalBoundary) -> Result<Self> {
        let k = (half_width / h).round() as usize;
        let n = 2 * k + 1;
        let origin = [center[0] - k as f64 * h, center[1] - k as f64 * h];
        Self::new(origin, h, n, n, [1.0, 0.0], false, boundary)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    #[inline]
    pub fn e_perp(&self) -> [f64; 2] {
        [-self.front_direction[1], self.front_direction[0]]
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize) -> [f64; 2] {
        let e = self.front_direction;
        let ep = self.e_perp();
        let a = i as f64 * self.spacing;
        let b = j as f64 * self.spacing;
        [
            self.origin[0] + a * e[0] + b * ep[0],
            self.origin[1] + a * e[1] + b * ep[1],
        ]
    }

    /// Coordinate `x . e` of column `i`.
    #[inline]
    pub fn normal_coord(&self, i: usize) -> f64 {
        let e = self.front_direction;
        self.origin[0] * e[0] + self.origin[1] * e[1] + i as f64 * self.spacing
    }

    /// Coordinate `x . e_perp` of row `j`.
    #[inline]
    pub fn transverse_coord(&self, j: usize) -> f64 {
        let ep = self.e_perp();
        self.origin[0] * ep[0] + self.origin[1] * ep[1] + j as f64 * self.spacing
    }

    /// Transverse period of a periodic grid.
    pub fn transverse_extent(&self) -> f64 {
        if self.transverse_periodic {
            self.ny as f64 * self.spacing
        } else {
            (self.ny - 1) as f64 * self.spacing
        }
    }

    /// Nearest node to a world point, if the point lies within half a cell of the grid.
    pub fn nearest_node(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let e = self.front_direction;
        let ep = self.e_perp();
        let d = [p[0] - self.origin[0], p[1] - self.origin[1]];
        let a = (d[0] * e[0] + d[1] * e[1]) / self.spacing;
        let b = (d[0] * ep[0] + d[1] * ep[1]) / self.spacing;
        let i = a.round();
        let mut j = b.round();
        if self.transverse_periodic {
            j = j.rem_euclid(self.ny as f64);
        }
        if i < 0.0 || j < 0.0 || i > (self.nx - 1) as f64 || j > (self.ny - 1) as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    /// Euclidean distance between two nodes, honouring transverse periodicity.
    pub fn node_distance(&self, a: usize, b: usize) -> f64 {
        let (ia, ja) = self.coords(a);
        let (ib, jb) = self.coords(b);
        let di = ia as f64 - ib as f64;
        let mut dj = (ja as f64 - jb as f64).abs();
        if self.transverse_periodic {
            dj = dj.min(self.ny as f64 - dj);
        }
        di.hypot(dj) * self.spacing
    }
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn dt1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (in node units) from every node to the
/// nearest `true` node. Nodes with no site anywhere get `f64::INFINITY`.
pub fn squared_edt(sites: &[bool], nx: usize, ny: usize, periodic_j: bool) -> Vec<f64> {
    assert_eq!(sites.len(), nx * ny);
    let mut g = vec![FAR; nx * ny];
    let m = nx.max(3 * ny) + 1;
    let mut v = vec![0usize; m];
    let mut z = vec![0.0; m + 1];
    let mut f = vec![0.0; nx];
    let mut out = vec![0.0; nx];
    for j in 0..ny {
        let row = &sites[j * nx..(j + 1) * nx];
        for (fi, &s) in f.iter_mut().zip(row) {
            *fi = if s { 0.0 } else { FAR };
        }
        dt1d(&f, &mut out, &mut v, &mut z);
        g[j * nx..(j + 1) * nx].copy_from_slice(&out);
    }
    let reps = if periodic_j { 3 } else { 1 };
    let len = ny * reps;
    let mut col = vec![0.0; len];
    let mut colout = vec![0.0; len];
    let mut result = vec![0.0; nx * ny];
    for i in 0..nx {
        for r in 0..reps {
            for j in 0..ny {
                col[r * ny + j] = g[j * nx + i];
            }
        }
        dt1d(&col, &mut colout, &mut v, &mut z);
        let off = if periodic_j { ny } else { 0 };
        for j in 0..ny {
            let d = colout[off + j];
            result[j * nx + i] = if d >= FAR * 0.5 { f64::INFINITY } else { d };
        }
    }
    result
}

/// Boolean node mask on a grid, standing for a closed set.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSet {
    pub grid: Grid2D,
    pub mask: Vec<bool>,
}

impl GridSet {
    pub fn new(grid: Grid2D, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), grid.len(), "mask size must match the grid");
        Self { grid, mask }
    }

    pub fn empty(grid: Grid2D) -> Self {
        Self::new(grid, vec![false; grid.len()])
    }

    pub fn full(grid: Grid2D) -> Self {
        Self::new(grid, vec![true; grid.len()])
    }

    pub fn from_fn(grid: Grid2D, mut f: impl FnMut([f64; 2]) -> bool) -> Self {
        let mut mask = vec![false; grid.len()];
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                mask[grid.idx(i, j)] = f(grid.position(i, j));
            }
        }
        Self::new(grid, mask)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    pub fn is_subset_of(&self, other: &GridSet) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &GridSet) -> GridSet {
        let mask = self.mask.iter().zip(&other.mask).map(|(&a, &b)| a || b).collect();
        GridSet::new(self.grid, mask)
    }

    pub fn complement(&self) -> GridSet {
        GridSet::new(self.grid, self.mask.iter().map(|&b| !b).collect())
    }

    /// Distance (length units) from every node to the nearest node of the set.
    pub fn distance_field(&self) -> Vec<f64> {
        let h = self.grid.spacing;
        squared_edt(&self.mask, self.grid.nx, self.grid.ny, self.grid.transverse_periodic)
            .into_iter()
            .map(|d| d.sqrt() * h)
            .collect()
    }

    /// Nodes within distance `radius` of the set.
    pub fn dilate(&self, radius: f64) -> GridSet {
        let slack = 1e-9 * self.grid.spacing;
        let d = self.distance_field();
        GridSet::new(self.grid, d.into_iter().map(|d| d <= radius + slack).collect())
    }

    /// Nodes farther than `radius` from every node outside the set. Nodes
    /// beyond the grid are not part of the complement.
    pub fn erode(&self, radius: f64) -> GridSet {
        let comp = self.complement();
        if comp.is_empty() {
            return self.clone();
        }
        let slack = 1e-9 * self.grid.spacing;
        let d = comp.distance_field();
        let mask = self
            .mask
            .iter()
            .zip(d)
            .map(|(&m, d)| m && d > radius + slack)
            .collect();
        GridSet::new(self.grid, mask)
    }

    /// Largest distance from a node of `self` to the set `other`.
    pub fn directed_distance(&self, other: &GridSet) -> Result<f64> {
        if self.is_empty() || other.is_empty() {
            return Err(Error::EmptySet("directed_distance"));
        }
        let d = other.distance_field();
        Ok(self
            .mask
            .iter()
            .zip(&d)
            .filter(|(&m, _)| m)
            .map(|(_, &d)| d)
            .fold(0.0, f64::max))
    }
}

/// Hausdorff distance between two nonempty node sets on the same grid.
pub fn hausdorff(a: &GridSet, b: &GridSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("hausdorff"));
    }
    Ok(a.directed_distance(b)?.max(b.directed_distance(a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid(n: usize, periodic: bool) -> Grid2D {
        Grid2D::new([0.0, 0.0], 1.0, n, n, [1.0, 0.0], periodic, NormalBoundary::Clamped).unwrap()
    }

    fn brute_sq(sites: &[bool], g: &Grid2D) -> Vec<f64> {
        (0..g.len())
            .map(|a| {
                (0..g.len())
                    .filter(|&b| sites[b])
                    .map(|b| g.node_distance(a, b).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
        (0..n).map(|_| rng.gen_bool(p)).collect()
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for periodic in [false, true] {
            let g = small_grid(24, periodic);
            for p in [0.01, 0.05, 0.3] {
                let sites = random_mask(&mut rng, g.len(), p);
                if !sites.iter().any(|&b| b) {
                    continue;
                }
                let fast = squared_edt(&sites, g.nx, g.ny, periodic);
                let slow = brute_sq(&sites, &g);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn edt_without_sites_is_infinite() {
        let g = small_grid(8, false);
        let d = squared_edt(&vec![false; g.len()], 8, 8, false);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn hausdorff_random_masks_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid2D::new([0.0, 0.0], 0.5, 64, 64, [1.0, 0.0], false, NormalBoundary::Clamped).unwrap();
        for _ in 0..4 {
            let a = GridSet::new(g, random_mask(&mut rng, g.len(), 0.02));
            let b = GridSet::new(g, random_mask(&mut rng, g.len(), 0.03));
            let fast = hausdorff(&a, &b).unwrap();
            let dir = |x: &GridSet, y: &GridSet| {
                (0..g.len())
                    .filter(|&p| x.mask[p])
                    .map(|p| {
                        (0..g.len())
                            .filter(|&q| y.mask[q])
                            .map(|q| g.node_distance(p, q))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0, f64::max)
            };
            let slow = dir(&a, &b).max(dir(&b, &a));
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn hausdorff_concentric_discs() {
        let h = 0.02;
        let g = Grid2D::square([0.0, 0.0], 2.5, h, NormalBoundary::Clamped).unwrap();
        let a = GridSet::from_fn(g, |p| p[0].hypot(p[1]) <= 1.0);
        let b = GridSet::from_fn(g, |p| p[0].hypot(p[1]) <= 2.0);
        let d = hausdorff(&a, &b).unwrap();
        assert!((d - 1.0).abs() <= h, "{d}");
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_rejects_empty() {
        let g = small_grid(8, false);
        let a = GridSet::empty(g);
        let b = GridSet::full(g);
        assert!(matches!(hausdorff(&a, &b), Err(Error::EmptySet(_))));
    }

    #[test]
    fn closing_contains_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = small_grid(40, false);
        let s = GridSet::new(g, random_mask(&mut rng, g.len(), 0.1));
        for rho in [1.0, 2.5, 4.0] {
            let closed = s.dilate(rho).erode(rho);
            assert!(s.is_subset_of(&closed));
        }
    }

    #[test]
    fn front_window_places_zero_on_a_node() {
        let g = Grid2D::front_window([1.0, 0.0], -4.0, 20.0, 40.0, 0.1, true).unwrap();
        assert_eq!(g.ny, 400);
        assert!((g.transverse_extent() - 40.0).abs() < 1e-9);
        let (i, _) = g.nearest_node([0.0, 0.0]).unwrap();
        assert!(g.normal_coord(i).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn hausdorff_is_a_metric(seed in any::<u64>(), pa in 0.02f64..0.3, pb in 0.02f64..0.3, pc in 0.02f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = small_grid(20, seed % 2 == 0);
            let mut mk = |p| {
                let mut m = random_mask(&mut rng, g.len(), p);
                m[0] = true;
                GridSet::new(g, m)
            };
            let (a, b, c) = (mk(pa), mk(pb), mk(pc));
            let ab = hausdorff(&a, &b).unwrap();
            let ba = hausdorff(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let bc = hausdorff(&b, &c).unwrap();
            let ac = hausdorff(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
