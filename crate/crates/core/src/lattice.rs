//! Geometry of Z^d: points, closed Euclidean balls, outer boundaries, shells,
//! boundary caps and the dyadic layer system near the sphere.

use std::fmt;
use std::io::{BufRead, Write};

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{domain, Error, Result};

pub const DEFAULT_POINT_BUDGET: usize = 5_000_000;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint(pub SmallVec<[i64; 4]>);

impl LatticePoint {
    pub fn new(coords: &[i64]) -> Self {
        LatticePoint(SmallVec::from_slice(coords))
    }

    pub fn origin(d: usize) -> Self {
        LatticePoint(SmallVec::from_elem(0, d))
    }

    /// `k * e_axis`, axes counted from 0.
    pub fn axis(d: usize, axis: usize, k: i64) -> Self {
        let mut p = Self::origin(d);
        p.0[axis] = k;
        p
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn norm_sq(&self) -> i64 {
        self.0.iter().map(|c| c * c).sum()
    }

    pub fn norm(&self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    pub fn add(&self, other: &LatticePoint) -> LatticePoint {
        LatticePoint(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &LatticePoint) -> LatticePoint {
        LatticePoint(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn dist_sq(&self, other: &LatticePoint) -> i64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn dist(&self, other: &LatticePoint) -> f64 {
        (self.dist_sq(other) as f64).sqrt()
    }

    /// Neighbour in direction `dir`, where `2i` is `+e_i` and `2i+1` is `-e_i`.
    pub fn step(&self, dir: usize) -> LatticePoint {
        let mut p = self.clone();
        p.0[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
        p
    }

    /// Negates coordinate `axis` (counted from 0).
    pub fn reflect(&self, axis: usize) -> LatticePoint {
        let mut p = self.clone();
        p.0[axis] = -p.0[axis];
        p
    }
}

impl fmt::Debug for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0.as_slice())
    }
}

impl From<&[i64]> for LatticePoint {
    fn from(c: &[i64]) -> Self {
        Self::new(c)
    }
}

/// Largest integer `n` with `sqrt(n) <= radius`, or `-1` for negative radius.
pub fn max_norm_sq(radius: f64) -> i64 {
    if radius < 0.0 {
        return -1;
    }
    let mut n = (radius * radius).floor() as i64;
    while n >= 0 && (n as f64).sqrt() > radius {
        n -= 1;
    }
    while ((n + 1) as f64).sqrt() <= radius {
        n += 1;
    }
    n
}

/// `|y| <= radius` decided on the integer `|y|^2`.
pub fn in_ball(y: &LatticePoint, center: &LatticePoint, radius: f64) -> bool {
    y.dist_sq(center) <= max_norm_sq(radius)
}

/// Points of `center + {y : |y|^2 <= n}` in lexicographic order.
pub fn ball_points_sq(center: &LatticePoint, n: i64, cap: usize) -> Result<Vec<LatticePoint>> {
    let d = center.dim();
    if d == 0 {
        return domain("dimension must be at least 1");
    }
    let mut out = Vec::new();
    if n < 0 {
        return Ok(out);
    }
    let mut cur: SmallVec<[i64; 4]> = SmallVec::from_elem(0, d);
    fn rec(
        i: usize,
        rem: i64,
        cur: &mut SmallVec<[i64; 4]>,
        center: &LatticePoint,
        out: &mut Vec<LatticePoint>,
        cap: usize,
    ) -> Result<()> {
        let d = cur.len();
        let r = rem.isqrt();
        for c in -r..=r {
            cur[i] = c;
            if i + 1 == d {
                if out.len() >= cap {
                    return Err(Error::Budget { requested: cap as u64 + 1, cap: cap as u64 });
                }
                out.push(LatticePoint(
                    cur.iter().zip(&center.0).map(|(a, b)| a + b).collect(),
                ));
            } else {
                rec(i + 1, rem - c * c, cur, center, out, cap)?;
            }
        }
        Ok(())
    }
    rec(0, n, &mut cur, center, &mut out, cap)?;
    Ok(out)
}

/// Closed ball `V_L(center)` in lexicographic order.
pub fn ball_points(center: &LatticePoint, radius: f64) -> Result<Vec<LatticePoint>> {
    ball_points_capped(center, radius, DEFAULT_POINT_BUDGET)
}

pub fn ball_points_capped(center: &LatticePoint, radius: f64, cap: usize) -> Result<Vec<LatticePoint>> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return domain(format!("ball radius must be finite and nonnegative, got {radius}"));
    }
    ball_points_sq(center, max_norm_sq(radius), cap)
}

/// Points outside `v` at lattice distance one from it, sorted.
pub fn outer_boundary(v: &[LatticePoint]) -> Vec<LatticePoint> {
    let inside: FxHashSet<&LatticePoint> = v.iter().collect();
    let mut seen: FxHashSet<LatticePoint> = FxHashSet::default();
    for x in v {
        for dir in 0..2 * x.dim() {
            let y = x.step(dir);
            if !inside.contains(&y) {
                seen.insert(y);
            }
        }
    }
    let mut out: Vec<LatticePoint> = seen.into_iter().collect();
    out.sort();
    out
}

/// `d_L(x) = L - |x|` for `x` in the closed ball.
pub fn d_l(x: &LatticePoint, radius: f64) -> Result<f64> {
    if x.norm_sq() > max_norm_sq(radius) {
        return domain(format!("{x:?} lies outside V_{radius}"));
    }
    Ok(radius - x.norm())
}

/// `Sh_L(a, b) = {x in V_L : a <= d_L(x) < b}`.
pub fn shell_points(radius: f64, a: f64, b: f64, d: usize) -> Result<Vec<LatticePoint>> {
    if !(0.0 <= a && a < b) {
        return domain(format!("shell bounds must satisfy 0 <= a < b, got ({a}, {b})"));
    }
    Ok(ball_points(&LatticePoint::origin(d), radius)?
        .into_iter()
        .filter(|x| {
            let dl = radius - x.norm();
            a <= dl && dl < b
        })
        .collect())
}

pub fn is_on_boundary(z: &LatticePoint, radius: f64) -> bool {
    let n = max_norm_sq(radius);
    z.norm_sq() > n && (0..2 * z.dim()).any(|dir| z.step(dir).norm_sq() <= n)
}

/// `W_t(z) = V_t(z) ∩ ∂V_L`.
pub fn boundary_cap(radius: f64, z: &LatticePoint, t: f64) -> Result<Vec<LatticePoint>> {
    if !(t > 0.0) {
        return domain(format!("cap radius must be positive, got {t}"));
    }
    if !is_on_boundary(z, radius) {
        return domain(format!("{z:?} is not on the boundary of V_{radius}"));
    }
    let ball = ball_points(&LatticePoint::origin(z.dim()), radius)?;
    let tn = max_norm_sq(t);
    Ok(outer_boundary(&ball)
        .into_iter()
        .filter(|y| y.dist_sq(z) <= tn)
        .collect())
}

/// Dyadic layers `Λ_0 = Sh_L(2r)`, `Λ_j = Sh_L(r 2^j, r 2^{j+1})` for `1 <= j <= J1`,
/// represented by their `d_L` intervals.
#[derive(Clone, Debug, Serialize)]
pub struct LayerSystem {
    pub radius: f64,
    pub r: f64,
    pub r_l: f64,
    pub j1: usize,
}

impl LayerSystem {
    pub fn new(radius: f64, r: f64, r_l: f64) -> Result<Self> {
        if !(r >= 1.0) {
            return domain(format!("layer base r must be at least 1, got {r}"));
        }
        if !(r < r_l) {
            return domain(format!("layer base r = {r} must be below r_L = {r_l}"));
        }
        // floor(log2(r_l / r)) by doubling, exact at powers of two.
        let mut j = 0usize;
        while r * 2f64.powi(j as i32 + 1) <= r_l {
            j += 1;
        }
        Ok(LayerSystem { radius, r, r_l, j1: j + 1 })
    }

    /// Half-open `d_L` interval `[lo, hi)` of layer `j`.
    pub fn interval(&self, j: usize) -> (f64, f64) {
        if j == 0 {
            (0.0, 2.0 * self.r)
        } else {
            (self.r * 2f64.powi(j as i32), self.r * 2f64.powi(j as i32 + 1))
        }
    }

    /// Outer `d_L` edge of the union of all layers.
    pub fn union_depth(&self) -> f64 {
        self.interval(self.j1).1
    }

    pub fn layer_of_depth(&self, depth: f64) -> Option<usize> {
        (0..=self.j1).find(|&j| {
            let (lo, hi) = self.interval(j);
            lo <= depth && depth < hi
        })
    }

    pub fn layer_of(&self, x: &LatticePoint) -> Result<Option<usize>> {
        Ok(self.layer_of_depth(d_l(x, self.radius)?))
    }

    /// Thin layer index `j` with `j <= d_L(x) < j + 1`.
    pub fn thin_layer(&self, x: &LatticePoint) -> Result<usize> {
        Ok(d_l(x, self.radius)?.floor() as usize)
    }

    /// `Sh_L(2 r_L) ⊆ ∪ Λ_j ⊆ Sh_L(4 r_L)`, checked on `d_L` intervals.
    pub fn sandwich_holds(&self) -> bool {
        let contiguous = (1..=self.j1).all(|j| self.interval(j).0 == self.interval(j - 1).1);
        contiguous && self.union_depth() >= 2.0 * self.r_l && self.union_depth() <= 4.0 * self.r_l
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointSetKind {
    Ball,
    Boundary,
    Shell,
}

impl PointSetKind {
    fn as_str(self) -> &'static str {
        match self {
            PointSetKind::Ball => "ball",
            PointSetKind::Boundary => "boundary",
            PointSetKind::Shell => "shell",
        }
    }
}

pub fn write_point_set<W: Write>(
    mut w: W,
    d: usize,
    kind: PointSetKind,
    points: &[LatticePoint],
) -> Result<()> {
    writeln!(w, "d={d} kind={}", kind.as_str())?;
    for p in points {
        let line: Vec<String> = p.coords().iter().map(|c| c.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_point_set<R: BufRead>(r: R) -> Result<(usize, PointSetKind, Vec<LatticePoint>)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty point set".into()))??;
    let mut d = None;
    let mut kind = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("d", v)) => d = v.parse::<usize>().ok(),
            Some(("kind", "ball")) => kind = Some(PointSetKind::Ball),
            Some(("kind", "boundary")) => kind = Some(PointSetKind::Boundary),
            Some(("kind", "shell")) => kind = Some(PointSetKind::Shell),
            _ => return Err(Error::Parse(format!("bad header field {field:?}"))),
        }
    }
    let (d, kind) = match (d, kind) {
        (Some(d), Some(k)) => (d, k),
        _ => return Err(Error::Parse(format!("incomplete header {header:?}"))),
    };
    let mut points = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let coords: std::result::Result<Vec<i64>, _> =
            line.split_whitespace().map(str::parse::<i64>).collect();
        let coords = coords.map_err(|e| Error::Parse(format!("{line:?}: {e}")))?;
        if coords.len() != d {
            return Err(Error::DimensionMismatch(coords.len(), d));
        }
        points.push(LatticePoint::new(&coords));
    }
    Ok((d, kind, points))
}
