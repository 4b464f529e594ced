//! The smoothing density, the coarse-graining field `h_{L,r}`, smooth fields on
//! `U_L`, and coarse-grained kernels built from exit laws of balls.
//!
//! A coarse-grained row at `x` with scale `m` is `∫ φ(t/m)/m · ex_{V_t(x) ∩ W}(x, ·) dt`.
//! The integrand only changes when `t` crosses a lattice norm, so the integral is a
//! finite sum over breakpoints with weights given by masses of `φ`.

use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;

use crate::error::{domain, Result};
use crate::exitsolver::{Domain, ExitProblem};
use crate::kernelspace::{KernelField, SymmetricKernel};
use crate::lattice::{ball_points, ball_points_sq, max_norm_sq, outer_boundary, LatticePoint};
use crate::measure::Measure;
use crate::sparse::SparseKernel;

const QUAD_TOL: f64 = 1e-15;

fn bump(t: f64) -> f64 {
    if t <= 1.0 || t >= 2.0 {
        0.0
    } else {
        (-1.0 / ((t - 1.0) * (2.0 - t))).exp()
    }
}

fn bump_norm() -> f64 {
    static Z: OnceLock<f64> = OnceLock::new();
    *Z.get_or_init(|| quadrature::integrate(bump, 1.0, 2.0, 1e-18).integral)
}

/// `φ(t) = Z^{-1} exp(-1/((t-1)(2-t)))` on `(1,2)`.
pub fn phi_eval(t: f64) -> f64 {
    bump(t) / bump_norm()
}

/// `∫_1^u φ`, computed from the nearer endpoint and exactly 0 and 1 outside `(1,2)`.
pub fn phi_cdf(u: f64) -> f64 {
    if u <= 1.0 {
        0.0
    } else if u >= 2.0 {
        1.0
    } else if u <= 1.5 {
        quadrature::integrate(bump, 1.0, u, QUAD_TOL).integral / bump_norm()
    } else {
        1.0 - quadrature::integrate(bump, u, 2.0, QUAD_TOL).integral / bump_norm()
    }
}

/// `∫_a^b φ(t/m)/m dt`.
pub fn phi_interval_mass(a: f64, b: f64, m: f64) -> Result<f64> {
    if !(m > 0.0) {
        return domain(format!("scale must be positive, got {m}"));
    }
    if a > b {
        return domain(format!("interval endpoints reversed: ({a}, {b})"));
    }
    Ok(phi_cdf(b / m) - phi_cdf(a / m))
}

fn smooth_step(u: f64) -> f64 {
    let f = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    let (a, b) = (f(u), f(1.0 - u));
    a / (a + b)
}

struct Cutoff {
    k: f64,
    total: f64,
}

fn cutoff() -> &'static Cutoff {
    static C: OnceLock<Cutoff> = OnceLock::new();
    C.get_or_init(|| {
        let integral = |k: f64| {
            quadrature::integrate(|u| (1.0 - smooth_step(u)).powf(k), 0.0, 1.0, QUAD_TOL).integral
        };
        let (mut lo, mut hi) = (1.0, 64.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if integral(mid) > 1.0 / 3.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let k = 0.5 * (lo + hi);
        Cutoff { k, total: integral(k) }
    })
}

/// The cutoff `h`: identity below 1/2, constant 1 above 2, and on `(1/2, 2)` an
/// increasing concave join whose slope `(1-S)^k` falls from 1 to 0.
pub fn cutoff_h(x: f64) -> f64 {
    if x <= 0.5 {
        x
    } else if x >= 2.0 {
        1.0
    } else {
        let c = cutoff();
        let u = (x - 0.5) / 1.5;
        let f = |s: f64| (1.0 - smooth_step(s)).powf(c.k);
        if u <= 0.5 {
            0.5 + 0.5 * quadrature::integrate(f, 0.0, u, QUAD_TOL).integral / c.total
        } else {
            1.0 - 0.5 * quadrature::integrate(f, u, 1.0, QUAD_TOL).integral / c.total
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Paper,
    Scaled,
}

/// Radius factor of the desk-scale scheme; see the crate README.
pub const SCALED_FACTOR: f64 = 0.5;
pub const PAPER_FACTOR: f64 = 0.05;

#[derive(Clone, Debug, Serialize)]
pub struct BallScheme {
    pub kind: SchemeKind,
    pub radius: f64,
    pub r: f64,
    pub s_l: f64,
    pub r_l: f64,
    pub factor: f64,
}

impl BallScheme {
    /// `s_L = L/(log L)^3`, `r_L = L/(log L)^15`, `100 <= r <= r_L`.
    pub fn paper(radius: f64, r: f64) -> Result<Self> {
        if !(radius > 1.0) {
            return domain(format!("radius must exceed 1, got {radius}"));
        }
        let lg = radius.ln();
        let s_l = radius / lg.powi(3);
        let r_l = radius / lg.powi(15);
        if !(100.0 <= r && r <= r_l) {
            return domain(format!("paper scheme needs 100 <= r <= r_L = {r_l}, got r = {r}"));
        }
        Ok(BallScheme { kind: SchemeKind::Paper, radius, r, s_l, r_l, factor: PAPER_FACTOR })
    }

    /// `s_L = L/4`, `r_L = max(2, L/16)`, `0 < r <= r_L`.
    pub fn scaled(radius: f64, r: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return domain(format!("radius must be positive, got {radius}"));
        }
        let s_l = radius / 4.0;
        let r_l = (radius / 16.0).max(2.0);
        if !(r > 0.0 && r <= r_l) {
            return domain(format!("scaled scheme needs 0 < r <= r_L = {r_l}, got r = {r}"));
        }
        Ok(BallScheme { kind: SchemeKind::Scaled, radius, r, s_l, r_l, factor: SCALED_FACTOR })
    }

    pub fn new(kind: SchemeKind, radius: f64, r: f64) -> Result<Self> {
        match kind {
            SchemeKind::Paper => Self::paper(radius, r),
            SchemeKind::Scaled => Self::scaled(radius, r),
        }
    }

    pub fn with_factor(mut self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor <= 0.5) {
            return domain(format!("radius factor must lie in (0, 1/2], got {factor}"));
        }
        self.factor = factor;
        Ok(self)
    }

    /// `factor · max(s_L h(depth/s_L), r)`.
    pub fn h_of_depth(&self, depth: f64) -> f64 {
        self.factor * (self.s_l * cutoff_h(depth / self.s_l)).max(self.r)
    }

    /// `h_{L,r}(x)` for `x ∈ V_L`.
    pub fn h_at(&self, x: &LatticePoint) -> Result<f64> {
        Ok(self.h_of_depth(crate::lattice::d_l(x, self.radius)?))
    }

    /// Bulk value `h_{L,r}(0) = factor · s_L`.
    pub fn h_bulk(&self) -> f64 {
        self.factor * self.s_l
    }
}

/// Set that coarse-graining balls are cut to.
#[derive(Clone, Debug)]
pub enum Region {
    Whole,
    /// `V_radius` around the origin.
    Ball(f64),
    Set(Arc<FxHashSet<LatticePoint>>),
}

impl Region {
    pub fn contains(&self, y: &LatticePoint) -> bool {
        match self {
            Region::Whole => true,
            Region::Ball(r) => y.norm_sq() <= max_norm_sq(*r),
            Region::Set(s) => s.contains(y),
        }
    }

    fn surely_contains_ball(&self, x: &LatticePoint, n: i64) -> bool {
        match self {
            Region::Whole => true,
            Region::Ball(r) => {
                let reach = x.norm() + (n as f64).sqrt();
                reach + 1e-9 < *r
            }
            Region::Set(_) => false,
        }
    }
}

/// One breakpoint piece: the ball `{|y - x|^2 <= n_sq}` used with weight `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Piece {
    pub n_sq: i64,
    pub weight: f64,
}

/// Computes coarse-grained rows for one kernel field, caching ball shapes and,
/// for homogeneous fields, translation-invariant templates.
pub struct RowEngine<'a, F: KernelField + ?Sized> {
    field: &'a F,
    tol: f64,
    d: usize,
    norms: Mutex<(i64, Vec<i64>)>,
    shapes: Mutex<FxHashMap<i64, Arc<Domain>>>,
    exits: Mutex<FxHashMap<i64, Arc<Measure>>>,
    rows: Mutex<FxHashMap<u64, Arc<Measure>>>,
}

impl<'a, F: KernelField + ?Sized> RowEngine<'a, F> {
    pub fn new(field: &'a F, tol: f64) -> Self {
        RowEngine {
            field,
            tol,
            d: field.dim(),
            norms: Mutex::new((-1, Vec::new())),
            shapes: Mutex::new(FxHashMap::default()),
            exits: Mutex::new(FxHashMap::default()),
            rows: Mutex::new(FxHashMap::default()),
        }
    }

    pub fn field(&self) -> &F {
        self.field
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Attainable squared norms `n` with `lo < n <= hi`.
    fn attainable(&self, lo: i64, hi: i64) -> Result<Vec<i64>> {
        let mut g = self.norms.lock().unwrap();
        if g.0 < hi {
            let cap = (hi.max(16) * 2).max(g.0);
            let mut set: Vec<i64> = ball_points_sq(&LatticePoint::origin(self.d), cap, usize::MAX)?
                .iter()
                .map(LatticePoint::norm_sq)
                .collect();
            set.sort_unstable();
            set.dedup();
            *g = (cap, set);
        }
        Ok(g.1.iter().copied().filter(|&n| n > lo && n <= hi).collect())
    }

    /// Breakpoint decomposition of `t ∈ (m, 2m)`.
    pub fn pieces(&self, m: f64) -> Result<Vec<Piece>> {
        if !(m > 0.0) || !m.is_finite() {
            return domain(format!("coarse-graining scale must be positive, got {m}"));
        }
        let n_lo = max_norm_sq(m);
        let mut n_hi = max_norm_sq(2.0 * m);
        if n_hi >= 0 && (n_hi as f64).sqrt() >= 2.0 * m {
            n_hi -= 1;
        }
        let mids = self.attainable(n_lo, n_hi)?;
        let mut cuts = vec![m];
        cuts.extend(mids.iter().map(|&n| (n as f64).sqrt()));
        cuts.push(2.0 * m);
        let mut balls = vec![n_lo];
        balls.extend(mids.iter().copied());
        let mut out = Vec::with_capacity(balls.len());
        for (k, &n) in balls.iter().enumerate() {
            let w = phi_interval_mass(cuts[k], cuts[k + 1], m)?;
            if w > 0.0 {
                out.push(Piece { n_sq: n, weight: w });
            }
        }
        Ok(out)
    }

    fn shape(&self, n: i64) -> Result<Arc<Domain>> {
        if let Some(s) = self.shapes.lock().unwrap().get(&n) {
            return Ok(s.clone());
        }
        let dom = Arc::new(Domain::new(ball_points_sq(&LatticePoint::origin(self.d), n, usize::MAX)?)?);
        self.shapes.lock().unwrap().insert(n, dom.clone());
        Ok(dom)
    }

    fn template_exit(&self, n: i64) -> Result<Arc<Measure>> {
        if let Some(e) = self.exits.lock().unwrap().get(&n) {
            return Ok(e.clone());
        }
        let dom = self.shape(n)?;
        let o = LatticePoint::origin(self.d);
        let prob = ExitProblem::new(&dom, self.field, o.coords());
        let ex = Arc::new(prob.exit_measure(dom.index_of(&o).unwrap(), &o, self.tol)?);
        self.exits.lock().unwrap().insert(n, ex.clone());
        Ok(ex)
    }

    /// `ex_{V_√n(x) ∩ W}(x, ·)` under the field.
    pub fn ball_exit(&self, x: &LatticePoint, n: i64, region: &Region) -> Result<Measure> {
        let uncut = region.surely_contains_ball(x, n);
        if uncut && self.field.is_homogeneous() {
            let t = self.template_exit(n)?;
            return Ok(translate(&t, x));
        }
        if uncut {
            let dom = self.shape(n)?;
            let prob = ExitProblem::new(&dom, self.field, x.coords());
            let o = LatticePoint::origin(self.d);
            return prob.exit_measure(dom.index_of(&o).unwrap(), x, self.tol);
        }
        let pts: Vec<LatticePoint> =
            ball_points_sq(x, n, usize::MAX)?.into_iter().filter(|y| region.contains(y)).collect();
        let dom = Domain::new(pts)?;
        let prob = ExitProblem::new(&dom, self.field, &vec![0; self.d]);
        prob.exit_measure(dom.index_of(x).unwrap(), &LatticePoint::origin(self.d), self.tol)
    }

    /// Coarse-grained row at `x` with scale `m`, balls cut to `region`.
    pub fn cg_row(&self, x: &LatticePoint, m: f64, region: &Region) -> Result<Measure> {
        if !region.contains(x) {
            return domain(format!("{x:?} is outside the coarse-graining region"));
        }
        let pieces = self.pieces(m)?;
        let n_max = pieces.iter().map(|p| p.n_sq).max().unwrap_or(0);
        if self.field.is_homogeneous() && region.surely_contains_ball(x, n_max) {
            let key = m.to_bits();
            let cached = self.rows.lock().unwrap().get(&key).cloned();
            let t = match cached {
                Some(t) => t,
                None => {
                    let o = LatticePoint::origin(self.d);
                    let t = Arc::new(self.accumulate(&o, &pieces, &Region::Whole)?);
                    self.rows.lock().unwrap().insert(key, t.clone());
                    t
                }
            };
            return Ok(translate(&t, x));
        }
        self.accumulate(x, &pieces, region)
    }

    fn accumulate(&self, x: &LatticePoint, pieces: &[Piece], region: &Region) -> Result<Measure> {
        let mut acc: FxHashMap<LatticePoint, f64> = FxHashMap::default();
        for p in pieces {
            for (z, w) in self.ball_exit(x, p.n_sq, region)?.entries() {
                *acc.entry(z.clone()).or_insert(0.0) += p.weight * w;
            }
        }
        Ok(Measure::from_pairs(acc))
    }
}

pub fn translate(m: &Measure, x: &LatticePoint) -> Measure {
    Measure::from_sorted(m.entries().iter().map(|(p, w)| (p.add(x), *w)).collect())
}

/// Rows of the operator near `∂V_L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Index set `V_L ∪ ∂V_L`, balls cut to `V_L`.
    Cut,
    /// Index set `V_{L+r} ∪ ∂V_{L+r}`, uncut balls for `x ∈ V_L` and `q`-rows with
    /// scale `factor · r` outside `V_L`.
    Enlarged,
}

/// `Π̂_{L,r}` (or `π̂^{(p)}_{L,r}` for a homogeneous field) as a sparse operator.
/// The default killing region of the result is `V_L`.
pub fn cg_ball_operator<F: KernelField + ?Sized>(
    field: &F,
    q: &SymmetricKernel,
    scheme: &BallScheme,
    mode: BoundaryMode,
    tol: f64,
) -> Result<SparseKernel> {
    let d = field.dim();
    let o = LatticePoint::origin(d);
    let outer = match mode {
        BoundaryMode::Cut => scheme.radius,
        BoundaryMode::Enlarged => scheme.radius + scheme.r,
    };
    let v_outer = ball_points(&o, outer)?;
    let mut all = v_outer.clone();
    all.extend(outer_boundary(&v_outer));
    let n_l = max_norm_sq(scheme.radius);
    let mut op = SparseKernel::identity(all, |x| x.norm_sq() <= n_l);
    let engine = RowEngine::new(field, tol);
    let q_engine = RowEngine::new(q, tol);
    let region = Region::Ball(outer);
    let rows: Vec<Result<(usize, Measure)>> = v_outer
        .par_iter()
        .map(|x| {
            let i = op.index_of(x).unwrap();
            let row = if x.norm_sq() <= n_l {
                engine.cg_row(x, scheme.h_at(x)?, &region)?
            } else {
                q_engine.cg_row(x, scheme.factor * scheme.r, &region)?
            };
            Ok((i, row))
        })
        .collect();
    for r in rows {
        let (i, row) = r?;
        op.set_row(i, &row)?;
    }
    Ok(op)
}

/// A smooth field `ψ: U_L → (L/10, 5L)` given pointwise.
pub struct SmoothFieldML {
    pub radius: f64,
    pub psi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SmoothFieldReport {
    pub range_ok: bool,
    pub worst_range: Option<(Vec<i64>, f64)>,
    /// Largest finite-difference derivative of orders 1..=4.
    pub max_derivative: [f64; 4],
    pub worst_derivative: Option<(Vec<i64>, usize, f64)>,
    pub derivative_ok: bool,
    pub pass: bool,
}

/// Range check on the lattice points of `U_L = {L/2 < |x| < 2L}` and axis-wise
/// central differences of orders 1..=4 where the stencil stays in `U_L`.
pub fn validate_smooth_field(f: &SmoothFieldML, d: usize) -> Result<SmoothFieldReport> {
    let l = f.radius;
    let in_u = |p: &[i64]| {
        let n = p.iter().map(|c| (c * c) as f64).sum::<f64>().sqrt();
        n > l / 2.0 && n < 2.0 * l
    };
    let eval = |p: &[i64]| (f.psi)(&p.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let mut rep = SmoothFieldReport {
        range_ok: true,
        worst_range: None,
        max_derivative: [0.0; 4],
        worst_derivative: None,
        derivative_ok: true,
        pass: true,
    };
    let mut worst_gap = f64::INFINITY;
    let mut worst_der = 0.0;
    for x in ball_points(&LatticePoint::origin(d), 2.0 * l)? {
        let c = x.coords();
        if !in_u(c) {
            continue;
        }
        let v = eval(c);
        let gap = (v - l / 10.0).min(5.0 * l - v);
        if gap < worst_gap {
            worst_gap = gap;
            rep.worst_range = Some((c.to_vec(), v));
        }
        for axis in 0..d {
            let at = |k: i64| {
                let mut p = c.to_vec();
                p[axis] += k;
                p
            };
            let stencil: Vec<Vec<i64>> = (-2..=2).map(at).collect();
            if !stencil.iter().all(|p| in_u(p)) {
                continue;
            }
            let s: Vec<f64> = stencil.iter().map(|p| eval(p)).collect();
            let ders = [
                (s[3] - s[1]) / 2.0,
                s[3] - 2.0 * s[2] + s[1],
                (s[4] - 2.0 * s[3] + 2.0 * s[1] - s[0]) / 2.0,
                s[4] - 4.0 * s[3] + 6.0 * s[2] - 4.0 * s[1] + s[0],
            ];
            for (k, dv) in ders.iter().enumerate() {
                let a = dv.abs();
                rep.max_derivative[k] = rep.max_derivative[k].max(a);
                if a > worst_der {
                    worst_der = a;
                    rep.worst_derivative = Some((c.to_vec(), k + 1, *dv));
                }
            }
        }
    }
    rep.range_ok = worst_gap > 0.0;
    rep.derivative_ok = rep.max_derivative.iter().all(|&v| v <= 10.0);
    rep.pass = rep.range_ok && rep.derivative_ok;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exitsolver::DEFAULT_TOL;
    use crate::kernelspace::{Environment, EnvironmentSpec, Family};
    use proptest::prelude::*;

    #[test]
    fn density_support_and_mass() {
        assert_eq!(phi_eval(1.0), 0.0);
        assert_eq!(phi_eval(2.0), 0.0);
        assert!((phi_interval_mass(3.0, 6.0, 3.0).unwrap() - 1.0).abs() < 1e-12);
        let full = quadrature::integrate(phi_eval, 1.0, 2.0, 1e-16).integral;
        assert!((full - 1.0).abs() < 1e-12);
        assert!(phi_interval_mass(2.0, 1.0, 1.0).is_err());
        assert!(phi_interval_mass(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn density_peaks_at_midpoint() {
        let peak = phi_eval(1.5);
        for k in 1..200 {
            let t = 1.0 + k as f64 / 200.0;
            assert!(phi_eval(t) <= peak);
        }
        assert!((phi_eval(1.3) - phi_eval(1.7)).abs() < 1e-12);
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(cutoff_h(0.3), 0.3);
        assert_eq!(cutoff_h(0.5), 0.5);
        assert_eq!(cutoff_h(2.0), 1.0);
        assert_eq!(cutoff_h(5.0), 1.0);
        assert!((cutoff_h(2.0 - 1e-9) - 1.0).abs() < 1e-9);
        assert!((cutoff_h(0.5 + 1e-9) - 0.5).abs() < 2e-9);
        let xs: Vec<f64> = (0..=300).map(|k| 0.5 + 1.5 * k as f64 / 300.0).collect();
        let hs: Vec<f64> = xs.iter().map(|&x| cutoff_h(x)).collect();
        for k in 1..xs.len() {
            let slope = (hs[k] - hs[k - 1]) / (xs[k] - xs[k - 1]);
            assert!(slope >= 0.0 && slope <= 1.0 + 1e-9);
            if xs[k] < 1.7 {
                assert!(slope > 0.0);
            }
        }
        for k in 1..xs.len() - 1 {
            assert!(hs[k + 1] - 2.0 * hs[k] + hs[k - 1] <= 1e-12);
        }
    }

    #[test]
    fn paper_scheme_regimes() {
        let s = BallScheme::paper(1e40, 100.0).unwrap();
        assert!((s.h_of_depth(3.0 * s.s_l) - s.s_l / 20.0).abs() <= 1e-12 * s.s_l);
        let depth = 0.3 * s.s_l;
        assert!((s.h_of_depth(depth) - depth / 20.0).abs() <= 1e-12 * s.s_l);
        assert!((s.h_of_depth(s.r_l) - s.r_l / 20.0).abs() <= 1e-12 * s.r_l);
        assert_eq!(s.h_of_depth(0.0), 100.0 / 20.0);
        assert!(BallScheme::paper(1e40, 50.0).is_err());
        assert!(BallScheme::paper(4096.0, 100.0).is_err());
    }

    #[test]
    fn scaled_scheme_relations() {
        let s = BallScheme::scaled(32.0, 2.0).unwrap();
        assert_eq!((s.s_l, s.r_l), (8.0, 2.0));
        assert!(s.r <= s.r_l && s.r_l <= s.s_l && s.s_l <= s.radius);
        assert_eq!(s.h_bulk(), 4.0);
        assert!(BallScheme::scaled(32.0, 3.0).is_err());
        assert!(s.h_at(&LatticePoint::new(&[40, 0, 0])).is_err());
    }

    #[test]
    fn pieces_partition_the_support() {
        let p = SymmetricKernel::srw(3);
        let e = RowEngine::new(&p, DEFAULT_TOL);
        for m in [0.4, 1.0, 1.7, 3.0, 4.25] {
            let pieces = e.pieces(m).unwrap();
            let s: f64 = pieces.iter().map(|p| p.weight).sum();
            assert!((s - 1.0).abs() < 1e-12, "m = {m}");
            assert!(pieces.windows(2).all(|w| w[0].n_sq < w[1].n_sq));
        }
        assert_eq!(e.pieces(0.4).unwrap(), vec![Piece { n_sq: 0, weight: 1.0 }]);
    }

    #[test]
    fn srw_row_is_symmetric() {
        let p = SymmetricKernel::srw(3);
        let e = RowEngine::new(&p, DEFAULT_TOL);
        let row = e.cg_row(&LatticePoint::origin(3), 2.5, &Region::Whole).unwrap();
        assert!((row.total() - 1.0).abs() < 1e-10);
        for axis in 0..3 {
            assert!(row.l1_distance(&row.reflected(axis)) < 1e-11);
        }
        let perm = Measure::from_pairs(
            row.entries().iter().map(|(z, w)| (LatticePoint::new(&[z.0[2], z.0[0], z.0[1]]), *w)),
        );
        assert!(row.l1_distance(&perm) < 1e-11);
    }

    #[test]
    fn srw_environment_gives_homogeneous_rows() {
        let env = Environment::new(EnvironmentSpec::new(3, 0.0, Family::AxisTilt, 1).unwrap()).unwrap();
        let p = SymmetricKernel::srw(3);
        let x = LatticePoint::new(&[2, -1, 0]);
        let a = RowEngine::new(&env, DEFAULT_TOL).cg_row(&x, 2.0, &Region::Ball(6.0)).unwrap();
        let b = RowEngine::new(&p, DEFAULT_TOL).cg_row(&x, 2.0, &Region::Ball(6.0)).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.l1_distance(&b) < 1e-12);
    }

    /// Trapezoid rule over `t` with `nodes` points, ball exits memoized per radius.
    fn trapezoid_row<F: KernelField>(e: &RowEngine<F>, x: &LatticePoint, m: f64, nodes: usize) -> Measure {
        let mut cache: FxHashMap<i64, Measure> = FxHashMap::default();
        let mut acc = Measure::new();
        let h = m / (nodes - 1) as f64;
        for k in 0..nodes {
            let t = m + k as f64 * h;
            let w = if k == 0 || k == nodes - 1 { 0.5 } else { 1.0 } * h * phi_eval(t / m) / m;
            if w == 0.0 {
                continue;
            }
            let n = max_norm_sq(t);
            let ex = cache
                .entry(n)
                .or_insert_with(|| e.ball_exit(x, n, &Region::Whole).unwrap())
                .clone();
            acc = acc.add_scaled(&ex, w);
        }
        acc
    }

    #[test]
    fn breakpoint_sum_matches_fine_trapezoid() {
        let p = SymmetricKernel::from_axis(&[0.2, 0.15, 0.15]).unwrap();
        let e = RowEngine::new(&p, DEFAULT_TOL);
        let x = LatticePoint::origin(3);
        let m = 2.0;
        let exact = e.cg_row(&x, m, &Region::Whole).unwrap();
        // The integrand is a step function of t, so the trapezoid rule is only
        // first order: each jump J contributes at most h·max φ/m·|J|.
        let pieces = e.pieces(m).unwrap();
        let exits: Vec<Measure> =
            pieces.iter().map(|pc| e.ball_exit(&x, pc.n_sq, &Region::Whole).unwrap()).collect();
        let phi_max = phi_eval(1.5);
        for nodes in [10_000, 40_000] {
            let h = m / (nodes - 1) as f64;
            let naive = trapezoid_row(&e, &x, m, nodes);
            let diff = exact.add_scaled(&naive, -1.0);
            let mut worst: f64 = 0.0;
            for (z, gap) in diff.entries() {
                let jumps: f64 = exits.windows(2).map(|w| (w[1].get(z) - w[0].get(z)).abs()).sum();
                let bound = h * phi_max / m * jumps + 1e-12;
                assert!(gap.abs() <= bound, "{z:?}: {gap:e} > {bound:e}");
                worst = worst.max(gap.abs());
            }
            assert!(worst <= 1e-5);
        }
    }

    #[test]
    fn smooth_field_checks() {
        let l = 12.0;
        let constant = SmoothFieldML { radius: l, psi: Arc::new(move |_| l) };
        let r = validate_smooth_field(&constant, 3).unwrap();
        assert!(r.pass && r.max_derivative == [0.0; 4]);
        let small = SmoothFieldML { radius: l, psi: Arc::new(move |_| l / 20.0) };
        assert!(!validate_smooth_field(&small, 3).unwrap().range_ok);
        let wavy = SmoothFieldML {
            radius: l,
            psi: Arc::new(move |x| {
                let n = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                l + n.sin() * l
            }),
        };
        let w = validate_smooth_field(&wavy, 3).unwrap();
        assert!(!w.derivative_ok);
        assert!(w.worst_derivative.is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn piece_weights_sum_to_one(m in 0.05f64..6.0) {
            let p = SymmetricKernel::srw(3);
            let e = RowEngine::new(&p, DEFAULT_TOL);
            let s: f64 = e.pieces(m).unwrap().iter().map(|p| p.weight).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cutoff_is_monotone(a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cutoff_h(lo) <= cutoff_h(hi) + 1e-15);
            prop_assert!(cutoff_h(hi) - cutoff_h(lo) <= hi - lo + 1e-12);
        }
    }
}
