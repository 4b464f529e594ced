//! The kernel flow `p_L`, the `D`/`D*` distances, good and bad points with
//! badness levels, goodified and level-4 modified operators, boundary-layer
//! censuses, band statistics and smoothed exit rows.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;

use crate::coarsegrain::{BallScheme, Region, RowEngine};
use crate::error::{domain, Error, Result};
use crate::exitsolver::{exit_measure_exact, Domain, ExitProblem};
use crate::kernelspace::{Environment, EnvironmentSpec, KernelField, SymmetricKernel};
use crate::lattice::{ball_points, boundary_cap, max_norm_sq, outer_boundary, LatticePoint, LayerSystem};
use crate::measure::{fmt_f64, Measure};
use crate::sparse::SparseKernel;

/// `lo · 2^{k/per_octave}` up to `hi` (inclusive within rounding).
pub fn log_grid(lo: f64, hi: f64, per_octave: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && per_octave >= 1) {
        return domain(format!("bad grid request lo = {lo}, hi = {hi}"));
    }
    let n = ((hi / lo).log2() * per_octave as f64 + 1e-9).floor() as i32;
    Ok((0..=n).map(|k| lo * 2f64.powf(k as f64 / per_octave as f64)).collect())
}

/// [`log_grid`] with extra radii merged in.
pub fn grid_with(lo: f64, hi: f64, per_octave: usize, extra: &[f64]) -> Result<Vec<f64>> {
    let mut g = log_grid(lo, hi, per_octave)?;
    for &e in extra {
        if !g.iter().any(|&x| (x - e).abs() <= 1e-9 * e) {
            g.push(e);
        }
    }
    g.sort_by(f64::total_cmp);
    Ok(g)
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowEntry {
    pub radius: f64,
    pub p: SymmetricKernel,
    /// Standard error of `p(e_i)` over the ensemble.
    pub stderr: Vec<f64>,
    pub n_env: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowRecord {
    pub d: usize,
    pub l0: f64,
    pub entries: Vec<FlowEntry>,
}

impl FlowRecord {
    /// A flow that is `p` at every radius of the grid.
    pub fn constant(p: &SymmetricKernel, l0: f64, grid: &[f64]) -> Self {
        let entries = grid
            .iter()
            .map(|&radius| FlowEntry { radius, p: p.clone(), stderr: vec![0.0; p.dim()], n_env: 0 })
            .collect();
        FlowRecord { d: p.dim(), l0, entries }
    }

    /// `p_t`, looked up at the nearest grid radius in log scale; `p_o` for `t <= L_0`.
    pub fn p_at(&self, t: f64) -> Result<SymmetricKernel> {
        Ok(match self.index_at(t)? {
            None => SymmetricKernel::srw(self.d),
            Some(i) => self.entries[i].p.clone(),
        })
    }

    fn index_at(&self, t: f64) -> Result<Option<usize>> {
        if t <= self.l0 {
            return Ok(None);
        }
        let last = match self.entries.last() {
            Some(e) => e.radius,
            None => return domain("empty flow grid"),
        };
        let first = self.entries[0].radius;
        let slack = 2f64.powf(1.0 / 16.0);
        if t > last * slack || t < first / slack {
            return domain(format!("flow grid [{first}, {last}] does not cover radius {t}"));
        }
        let best = (0..self.entries.len())
            .min_by(|&a, &b| {
                let da = (self.entries[a].radius / t).ln().abs();
                let db = (self.entries[b].radius / t).ln().abs();
                da.total_cmp(&db)
            })
            .unwrap();
        Ok(Some(best))
    }

    /// `max ‖p_{L'} - p_L‖₁` over grid radii `L' ∈ [L/2, L]`.
    pub fn drift(&self, radius: f64) -> Result<f64> {
        let p = self.p_at(radius)?;
        let mut worst: f64 = 0.0;
        for e in &self.entries {
            if e.radius >= radius / 2.0 - 1e-9 && e.radius <= radius + 1e-9 {
                worst = worst.max(crate::kernelspace::kernel_l1_distance(&e.p, &p)?);
            }
        }
        Ok(worst)
    }

    /// `L,i,pL_i,stderr,n_env`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "L,i,pL_i,stderr,n_env")?;
        for e in &self.entries {
            for i in 0..self.d {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    fmt_f64(e.radius),
                    i + 1,
                    fmt_f64(e.p.axis_weight(i)),
                    fmt_f64(e.stderr[i]),
                    e.n_env
                )?;
            }
        }
        Ok(())
    }
}

/// `½ Σ_y ν(y) y_i² / |y|²` (with `y` relative to the start point).
fn second_moment_profile(row: &Measure, x: &LatticePoint) -> Vec<f64> {
    let d = x.dim();
    let mut v = vec![0.0; d];
    for (y, w) in row.entries() {
        let z = y.sub(x);
        let n = z.norm_sq() as f64;
        if n == 0.0 {
            continue;
        }
        for (i, vi) in v.iter_mut().enumerate() {
            *vi += 0.5 * w * (z.0[i] * z.0[i]) as f64 / n;
        }
    }
    v
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowConfig {
    pub grid: Vec<f64>,
    pub l0: f64,
    /// Scheme used to obtain `s_L` at each radius.
    pub kind: crate::coarsegrain::SchemeKind,
    pub factor: f64,
    pub n_env: usize,
    pub tol: f64,
}

/// `p_L(±e_i) = ½ Σ_y E[Π̂_{L,r}(0,y)] y_i²/|y|²` over the ensemble, exact solves per member.
pub fn p_flow(spec: &EnvironmentSpec, cfg: &FlowConfig) -> Result<FlowRecord> {
    spec.validate()?;
    if cfg.n_env == 0 {
        return domain("flow needs at least one ensemble member");
    }
    if cfg.grid.windows(2).any(|w| w[0] >= w[1]) {
        return domain("flow grid must be increasing");
    }
    let d = spec.d;
    let o = LatticePoint::origin(d);
    let scales: Vec<Option<f64>> = cfg
        .grid
        .iter()
        .map(|&radius| {
            if radius <= cfg.l0 {
                return Ok(None);
            }
            let s_l = match cfg.kind {
                crate::coarsegrain::SchemeKind::Paper => radius / radius.ln().powi(3),
                crate::coarsegrain::SchemeKind::Scaled => radius / 4.0,
            };
            Ok(Some(cfg.factor * s_l))
        })
        .collect::<Result<_>>()?;
    let per_member: Vec<Result<Vec<Vec<f64>>>> = (0..cfg.n_env as u64)
        .into_par_iter()
        .map(|k| {
            let env = Environment::new(spec.member(k))?;
            let engine = RowEngine::new(&env, cfg.tol);
            cfg.grid
                .iter()
                .zip(&scales)
                .map(|(&radius, m)| match m {
                    None => Ok(vec![0.5 / d as f64; d]),
                    Some(m) => {
                        let row = engine.cg_row(&o, *m, &Region::Ball(radius))?;
                        Ok(second_moment_profile(&row, &o))
                    }
                })
                .collect()
        })
        .collect();
    let mut sums = vec![vec![0.0; d]; cfg.grid.len()];
    let mut sq = vec![vec![0.0; d]; cfg.grid.len()];
    for m in per_member {
        for (g, v) in m?.into_iter().enumerate() {
            for i in 0..d {
                sums[g][i] += v[i];
                sq[g][i] += v[i] * v[i];
            }
        }
    }
    let n = cfg.n_env as f64;
    let mut entries = Vec::with_capacity(cfg.grid.len());
    for (g, &radius) in cfg.grid.iter().enumerate() {
        let mean: Vec<f64> = sums[g].iter().map(|s| s / n).collect();
        let stderr: Vec<f64> = (0..d)
            .map(|i| {
                if cfg.n_env < 2 {
                    return 0.0;
                }
                let var = (sq[g][i] - n * mean[i] * mean[i]).max(0.0) / (n - 1.0);
                (var / n).sqrt()
            })
            .collect();
        // the means sum to 1/2 up to solver error
        let total: f64 = mean.iter().sum();
        let axis: Vec<f64> = mean.iter().map(|m| m * 0.5 / total).collect();
        let p = if scales[g].is_none() { SymmetricKernel::srw(d) } else { SymmetricKernel::from_axis(&axis)? };
        entries.push(FlowEntry { radius, p, stderr, n_env: cfg.n_env });
    }
    Ok(FlowRecord { d, l0: cfg.l0, entries })
}

/// Smoothing radius field `ψ`.
#[derive(Clone)]
pub enum Psi {
    Constant(f64),
    Field(Arc<dyn Fn(&LatticePoint) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Psi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psi::Constant(m) => write!(f, "Constant({m})"),
            Psi::Field(_) => write!(f, "Field(..)"),
        }
    }
}

/// Dense box with a stride layout for the coordinates in `[lo, hi]`.
struct BoxGrid {
    lo: Vec<i64>,
    strides: Vec<usize>,
    len: usize,
}

impl BoxGrid {
    fn new(lo: Vec<i64>, hi: &[i64]) -> Self {
        let mut strides = vec![0; lo.len()];
        let mut len = 1usize;
        for i in (0..lo.len()).rev() {
            strides[i] = len;
            len *= (hi[i] - lo[i] + 1) as usize;
        }
        BoxGrid { lo, strides, len }
    }

    fn offset(&self, p: &[i64]) -> usize {
        p.iter().zip(&self.lo).zip(&self.strides).map(|((c, l), s)| (c - l) as usize * s).sum()
    }
}

fn bounds(m: &Measure) -> (Vec<i64>, Vec<i64>) {
    let d = m.entries()[0].0.dim();
    let mut lo = vec![i64::MAX; d];
    let mut hi = vec![i64::MIN; d];
    for (p, _) in m.entries() {
        for i in 0..d {
            lo[i] = lo[i].min(p.0[i]);
            hi[i] = hi[i].max(p.0[i]);
        }
    }
    (lo, hi)
}

/// `‖ν * τ‖₁` for a signed measure `ν` and a template `τ` rooted at the origin.
pub fn convolve_l1(nu: &Measure, template: &Measure) -> f64 {
    if nu.is_empty() || template.is_empty() {
        return 0.0;
    }
    let (nlo, nhi) = bounds(nu);
    let (tlo, thi) = bounds(template);
    let lo: Vec<i64> = nlo.iter().zip(&tlo).map(|(a, b)| a + b).collect();
    let hi: Vec<i64> = nhi.iter().zip(&thi).map(|(a, b)| a + b).collect();
    let grid = BoxGrid::new(lo, &hi);
    let mut acc = vec![0.0; grid.len];
    let base = grid.offset(&vec![0; nlo.len()].iter().zip(&grid.lo).map(|(_, l)| *l).collect::<Vec<_>>());
    debug_assert_eq!(base, 0);
    let t_offsets: Vec<(isize, f64)> = template
        .entries()
        .iter()
        .map(|(p, w)| {
            let off: isize = p.0.iter().zip(&grid.strides).map(|(c, s)| *c as isize * *s as isize).sum();
            (off, *w)
        })
        .collect();
    for (y, v) in nu.entries() {
        if *v == 0.0 {
            continue;
        }
        let oy = grid.offset(y.coords()) as isize;
        for &(ot, w) in &t_offsets {
            acc[(oy + ot) as usize] += v * w;
        }
    }
    acc.iter().map(|a| a.abs()).sum()
}

/// Post-composition with `π̂^{(q)}_ψ`, caching the translation-invariant row for constant `ψ`.
pub struct Smoother<'a> {
    engine: RowEngine<'a, SymmetricKernel>,
    psi: Psi,
    template: Option<Measure>,
}

impl<'a> Smoother<'a> {
    pub fn new(q: &'a SymmetricKernel, psi: &Psi, tol: f64) -> Result<Self> {
        let engine = RowEngine::new(q, tol);
        let template = match psi {
            Psi::Constant(m) => Some(engine.cg_row(&LatticePoint::origin(q.dim()), *m, &Region::Whole)?),
            Psi::Field(_) => None,
        };
        Ok(Smoother { engine, psi: psi.clone(), template })
    }

    /// `‖ν π̂^{(q)}_ψ‖₁`.
    pub fn l1(&self, nu: &Measure) -> Result<f64> {
        match (&self.psi, &self.template) {
            (_, Some(t)) => Ok(convolve_l1(nu, t)),
            (Psi::Field(f), None) => Ok(nu.compose(|y| self.engine.cg_row(y, f(y), &Region::Whole))?.l1_norm()),
            (Psi::Constant(_), None) => unreachable!(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DMetrics {
    pub t: f64,
    pub x: Vec<i64>,
    /// `D_{t,p,ψ,q}(x)`.
    pub smoothed: f64,
    /// `D_{t,p}(x)`.
    pub plain: f64,
}

/// `D_{t,p,ψ,q}(x)` and `D_{t,p}(x)` on the ball `V_t(center)` started at `x`.
pub fn d_metric_in<F: KernelField + ?Sized>(
    env: &F,
    center: &LatticePoint,
    t: f64,
    p: &SymmetricKernel,
    smoother: &Smoother<'_>,
    x: &LatticePoint,
    tol: f64,
) -> Result<DMetrics> {
    let dom = Domain::ball(center, t)?;
    let a = exit_measure_exact(env, &dom, x, tol)?;
    let b = exit_measure_exact(p, &dom, x, tol)?;
    let nu = a.add_scaled(&b, -1.0);
    Ok(DMetrics { t, x: x.coords().to_vec(), smoothed: smoother.l1(&nu)?, plain: nu.l1_norm() })
}

/// Metrics on `V_t(x)` started at its centre.
pub fn d_metric<F: KernelField + ?Sized>(
    env: &F,
    t: f64,
    p: &SymmetricKernel,
    psi: &Psi,
    q: &SymmetricKernel,
    x: &LatticePoint,
    tol: f64,
) -> Result<DMetrics> {
    d_metric_in(env, x, t, p, &Smoother::new(q, psi, tol)?, x, tol)
}

/// Start points used for `D*`: the origin and `±⌊t/5⌋ e_i`.
pub fn dstar_probes(d: usize, t: f64) -> Vec<LatticePoint> {
    let k = (t / 5.0).floor() as i64;
    let mut out = vec![LatticePoint::origin(d)];
    if k > 0 {
        for i in 0..d {
            out.push(LatticePoint::axis(d, i, k));
            out.push(LatticePoint::axis(d, i, -k));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DStar {
    pub smoothed: f64,
    pub plain: f64,
}

/// `D*_{t,p,ψ,q}` and `D*_{t,p}` as maxima over [`dstar_probes`].
pub fn d_star<F: KernelField + ?Sized>(
    env: &F,
    t: f64,
    p: &SymmetricKernel,
    psi: &Psi,
    q: &SymmetricKernel,
    tol: f64,
) -> Result<DStar> {
    d_star_with(env, t, p, &Smoother::new(q, psi, tol)?, tol)
}

pub fn d_star_with<F: KernelField + ?Sized>(
    env: &F,
    t: f64,
    p: &SymmetricKernel,
    smoother: &Smoother<'_>,
    tol: f64,
) -> Result<DStar> {
    let d = env.dim();
    let o = LatticePoint::origin(d);
    let dom = Domain::ball(&o, t)?;
    let pe = ExitProblem::new(&dom, env, o.coords());
    let pp = ExitProblem::new(&dom, p, o.coords());
    let mut out = DStar { smoothed: 0.0, plain: 0.0 };
    for x in dstar_probes(d, t) {
        let src = dom.index_of(&x).ok_or_else(|| Error::Domain(format!("{x:?} is not in V_{t}")))?;
        let nu = pe.exit_measure(src, &o, tol)?.add_scaled(&pp.exit_measure(src, &o, tol)?, -1.0);
        out.smoothed = out.smoothed.max(smoother.l1(&nu)?);
        out.plain = out.plain.max(nu.l1_norm());
    }
    Ok(out)
}

/// `(log h)^{-a}`, infinite when `h <= 1`.
pub fn log_threshold(h: f64, exponent: f64) -> f64 {
    if h <= 1.0 {
        f64::INFINITY
    } else {
        h.ln().powf(exponent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvClass {
    Good,
    OneBad { level: u8 },
    ManyBad,
}

impl EnvClass {
    pub fn name(&self) -> &'static str {
        match self {
            EnvClass::Good => "good",
            EnvClass::OneBad { .. } => "one-bad",
            EnvClass::ManyBad => "many-bad",
        }
    }

    pub fn level(&self) -> u8 {
        match self {
            EnvClass::OneBad { level } => *level,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PointRecord {
    pub x: LatticePoint,
    pub depth: f64,
    pub h: f64,
    /// Largest unsmoothed distance over the breakpoint radii `t ∈ [h, 2h]`.
    pub plain: f64,
    /// Smoothed one-step distance, present when `d_L(x) > 2r`.
    pub smoothed: Option<f64>,
    pub bad: bool,
}

/// Good/bad evaluation of every point of `V_L` for one scheme.
pub fn evaluate_points<F: KernelField + ?Sized>(
    env: &F,
    scheme: &BallScheme,
    delta: f64,
    flow: &FlowRecord,
    tol: f64,
) -> Result<Vec<PointRecord>> {
    let d = env.dim();
    let o = LatticePoint::origin(d);
    let v = ball_points(&o, scheme.radius)?;
    let region = Region::Ball(scheme.radius);
    let engine = RowEngine::new(env, tol);
    let hs: Vec<f64> = v.iter().map(|x| scheme.h_at(x)).collect::<Result<_>>()?;
    // one homogeneous engine per distinct flow kernel
    let mut kernels: Vec<SymmetricKernel> = Vec::new();
    let mut which = Vec::with_capacity(v.len());
    for &h in &hs {
        let q = flow.p_at(h)?;
        let k = match kernels.iter().position(|k| k == &q) {
            Some(k) => k,
            None => {
                kernels.push(q);
                kernels.len() - 1
            }
        };
        which.push(k);
    }
    let q_engines: Vec<RowEngine<'_, SymmetricKernel>> =
        kernels.iter().map(|q| RowEngine::new(q, tol)).collect();
    let h_of: FxHashMap<LatticePoint, f64> = v.iter().cloned().zip(hs.iter().copied()).collect();
    let n_l = max_norm_sq(scheme.radius);
    v.par_iter()
        .enumerate()
        .map(|(i, x)| {
            let h = hs[i];
            let qe = &q_engines[which[i]];
            let mut plain: f64 = 0.0;
            for piece in engine.pieces(h)? {
                let a = engine.ball_exit(x, piece.n_sq, &Region::Whole)?;
                let b = qe.ball_exit(x, piece.n_sq, &Region::Whole)?;
                plain = plain.max(a.l1_distance(&b));
            }
            let depth = scheme.radius - x.norm();
            let smoothed = if depth > 2.0 * scheme.r {
                let nu = engine.cg_row(x, h, &region)?.add_scaled(&qe.cg_row(x, h, &region)?, -1.0);
                let s = nu.compose(|y| {
                    if y.norm_sq() > n_l {
                        Ok::<_, Error>(Measure::delta(y.clone()))
                    } else {
                        qe.cg_row(y, h_of[y], &region)
                    }
                })?;
                Some(s.l1_norm())
            } else {
                None
            };
            let bad = plain > delta || smoothed.is_some_and(|s| s > log_threshold(h, -9.0));
            Ok(PointRecord { x: x.clone(), depth, h, plain, smoothed, bad })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerCount {
    pub j: usize,
    pub n_boxes: usize,
    pub n_bad: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundaryCensus {
    pub layers: Vec<LayerCount>,
    pub bd_bad: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BadnessReport {
    pub radius: f64,
    pub r: f64,
    pub r_l: f64,
    pub delta: f64,
    /// `B_{L,r}`.
    pub b_lr: Vec<LatticePoint>,
    /// `B_L = B_{L,r_L}`.
    pub b_l: Vec<LatticePoint>,
    /// `B^∂_{L,r} = B_{L,r} ∩ Sh_L(r_L)`.
    pub b_boundary: Vec<LatticePoint>,
    /// `B*_{L,r} = B^∂_{L,r} ∪ B_L`.
    pub b_star: Vec<LatticePoint>,
    pub class: EnvClass,
    pub census: Option<BoundaryCensus>,
    pub q1: Vec<LatticePoint>,
    pub q2: Vec<LatticePoint>,
}

fn level_of(records: &[PointRecord], r_l: f64, delta: f64) -> u8 {
    if records.iter().any(|p| p.plain > delta) {
        return 4;
    }
    let deep = || records.iter().filter(|p| p.depth > 2.0 * r_l && p.smoothed.is_some());
    for i in 1..=3u8 {
        let hi = -9.0 + 9.0 * i as f64 / 4.0;
        let lo = -9.0 + 9.0 * (i - 1) as f64 / 4.0;
        let all_below = deep().all(|p| p.smoothed.unwrap() <= log_threshold(p.h, hi));
        let witness = deep().any(|p| p.bad && p.smoothed.unwrap() > log_threshold(p.h, lo));
        if all_below && witness {
            return i;
        }
    }
    4
}

/// `OneBad` holds when `B_L ⊆ V_{4h_L(x)}(x)` for some `x ∈ V_L`.
fn one_bad(b_l: &[LatticePoint], scheme_l: &BallScheme) -> Result<bool> {
    if b_l.is_empty() {
        return Ok(true);
    }
    let v = ball_points(&LatticePoint::origin(b_l[0].dim()), scheme_l.radius)?;
    for x in &v {
        let h = scheme_l.h_at(x)?;
        let n = max_norm_sq(4.0 * h);
        if b_l.iter().all(|b| b.dist_sq(x) <= n) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Boxes `Λ_j ∩ (I_{k_1} × … × I_{k_d})` with `I_k = (k r 2^j, (k+1) r 2^j]`.
pub fn boundary_census(
    radius: f64,
    r: f64,
    r_l: f64,
    d: usize,
    bad_boundary: &[LatticePoint],
) -> Result<BoundaryCensus> {
    let layers = LayerSystem::new(radius, r, r_l)?;
    let v = ball_points(&LatticePoint::origin(d), radius)?;
    let bad: FxHashSet<&LatticePoint> = bad_boundary.iter().collect();
    let mut out = Vec::with_capacity(layers.j1 + 1);
    let mut bd_bad = false;
    for j in 0..=layers.j1 {
        let side = r * 2f64.powi(j as i32);
        let (lo, hi) = layers.interval(j);
        let mut boxes: FxHashMap<Vec<i64>, bool> = FxHashMap::default();
        for x in &v {
            let depth = radius - x.norm();
            if depth < lo || depth >= hi {
                continue;
            }
            let k: Vec<i64> = x.coords().iter().map(|&c| (c as f64 / side).ceil() as i64 - 1).collect();
            let e = boxes.entry(k).or_insert(false);
            *e |= bad.contains(x);
        }
        let n_boxes = boxes.len();
        let n_bad = boxes.values().filter(|&&b| b).count();
        let threshold = (r.ln() + j as f64).powf(-1.5);
        if n_boxes > 0 && n_bad as f64 >= threshold * n_boxes as f64 {
            bd_bad = true;
        }
        out.push(LayerCount { j, n_boxes, n_bad, threshold });
    }
    Ok(BoundaryCensus { layers: out, bd_bad })
}

/// `env_index,class,level,n_bad,n_bad_boundary`.
pub fn write_badness_csv<W: Write>(mut w: W, rows: &[(usize, BadnessReport)]) -> Result<()> {
    writeln!(w, "env_index,class,level,n_bad,n_bad_boundary")?;
    for (k, r) in rows {
        writeln!(w, "{k},{},{},{},{}", r.class.name(), r.class.level(), r.b_l.len(), r.b_boundary.len())?;
    }
    Ok(())
}

/// Bad sets, environment class and boundary census for one environment.
pub fn classify_points<F: KernelField + ?Sized>(
    env: &F,
    scheme: &BallScheme,
    delta: f64,
    flow: &FlowRecord,
    tol: f64,
) -> Result<BadnessReport> {
    let rec_r = evaluate_points(env, scheme, delta, flow, tol)?;
    let scheme_l = if scheme.r == scheme.r_l {
        scheme.clone()
    } else {
        let mut s = scheme.clone();
        s.r = scheme.r_l;
        s
    };
    let rec_l = if scheme.r == scheme.r_l { rec_r.clone() } else { evaluate_points(env, &scheme_l, delta, flow, tol)? };
    let pick = |rs: &[PointRecord]| -> Vec<LatticePoint> { rs.iter().filter(|p| p.bad).map(|p| p.x.clone()).collect() };
    let b_lr = pick(&rec_r);
    let b_l = pick(&rec_l);
    let b_boundary: Vec<LatticePoint> = rec_r
        .iter()
        .filter(|p| p.bad && p.depth < scheme.r_l)
        .map(|p| p.x.clone())
        .collect();
    let mut b_star: Vec<LatticePoint> = b_boundary.iter().chain(&b_l).cloned().collect();
    b_star.sort();
    b_star.dedup();
    let class = if b_l.is_empty() {
        EnvClass::Good
    } else if one_bad(&b_l, &scheme_l)? {
        EnvClass::OneBad { level: level_of(&rec_l, scheme.r_l, delta) }
    } else {
        EnvClass::ManyBad
    };
    let census = if scheme.r >= 1.0 && scheme.r < scheme.r_l {
        Some(boundary_census(scheme.radius, scheme.r, scheme.r_l, env.dim(), &b_boundary)?)
    } else {
        None
    };
    let inner = max_norm_sq(scheme.radius / 2.0);
    let (q1, q2) = if b_l.iter().all(|b| b.norm_sq() <= inner) {
        (b_l.clone(), b_boundary.clone())
    } else {
        (Vec::new(), b_star.clone())
    };
    Ok(BadnessReport {
        radius: scheme.radius,
        r: scheme.r,
        r_l: scheme.r_l,
        delta,
        b_lr,
        b_l,
        b_boundary,
        b_star,
        class,
        census,
        q1,
        q2,
    })
}

/// `Π̂^g`: rows at `bad` replaced by the rows of `p_op`.
pub fn goodify(op: &SparseKernel, bad: &[LatticePoint], p_op: &SparseKernel) -> Result<SparseKernel> {
    op.check_same_index(p_op)?;
    let mut out = op.clone();
    for b in bad {
        let i = op.index_of(b).ok_or_else(|| Error::Domain(format!("{b:?} is not in the index set")))?;
        out.set_row(i, &p_op.row_measure(i))?;
    }
    Ok(out)
}

/// `Π̆`: on level-4 environments with `B_L ⊆ V_{L/2}`, rows at `B_L` become exits of
/// the operator chain from `V_{K_1 h(x)}(x)`; otherwise `op` is returned unchanged.
pub fn modify_level4(
    op: &SparseKernel,
    report: &BadnessReport,
    scheme: &BallScheme,
    k1: f64,
    tol: f64,
) -> Result<SparseKernel> {
    let inner = max_norm_sq(scheme.radius / 2.0);
    if report.class != (EnvClass::OneBad { level: 4 }) || report.b_l.iter().any(|b| b.norm_sq() > inner) {
        return Ok(op.clone());
    }
    let mut out = op.clone();
    let n_l = max_norm_sq(scheme.radius);
    for x in &report.b_l {
        let i = op.index_of(x).ok_or_else(|| Error::Domain(format!("{x:?} is not in the index set")))?;
        let n_t = max_norm_sq(k1 * scheme.h_at(x)?);
        let mask: Vec<bool> =
            op.points().iter().map(|y| y.norm_sq() <= n_l && y.dist_sq(x) <= n_t).collect();
        let row = op.exit_measure_masked(i, &mask, tol)?;
        out.set_row(i, &row)?;
    }
    Ok(out)
}

/// `max Ĝ^g(x, B_L)` over `x ∈ V_L` with `|x - y| >= K_1 h(y)` for every `y ∈ B_L`.
pub fn level4_green_bound(
    op_g: &SparseKernel,
    b_l: &[LatticePoint],
    scheme: &BallScheme,
    k1: f64,
    tol: f64,
) -> Result<f64> {
    if b_l.is_empty() {
        return Ok(0.0);
    }
    let target: Vec<bool> = op_g.points().iter().map(|p| b_l.contains(p)).collect();
    let col = op_g.green_to_set(&target, op_g.inside(), tol)?;
    let hs: Vec<f64> = b_l.iter().map(|y| scheme.h_at(y)).collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    for (i, x) in op_g.points().iter().enumerate() {
        if !op_g.inside()[i] {
            continue;
        }
        if b_l.iter().zip(&hs).all(|(y, h)| x.dist(y) >= k1 * h) {
            worst = worst.max(col[i]);
        }
    }
    Ok(worst)
}

/// Band of `D*` values: 0 below every band, 1..=3 the middle bands, 4 the top event.
pub fn c1_band(radius: f64, smoothed: f64, plain: f64, delta: f64) -> usize {
    let lg = radius.ln();
    if smoothed > lg.powf(-2.25) || plain > delta {
        return 4;
    }
    for i in 1..=3 {
        if smoothed > lg.powf(-9.0 + 9.0 * (i - 1) as f64 / 4.0) && smoothed <= lg.powf(-9.0 + 9.0 * i as f64 / 4.0) {
            return i;
        }
    }
    0
}

/// `(lo, hi]` of band `i` for the smoothed distance.
pub fn c1_band_edges(radius: f64, band: usize) -> (f64, f64) {
    let lg = radius.ln();
    match band {
        0 => (0.0, lg.powf(-9.0)),
        4 => (lg.powf(-2.25), 2.0),
        i => (lg.powf(-9.0 + 9.0 * (i - 1) as f64 / 4.0), lg.powf(-9.0 + 9.0 * i as f64 / 4.0)),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct C1Statistics {
    pub radius: f64,
    pub delta: f64,
    pub n_env: usize,
    /// Counts for bands 0..=4.
    pub counts: [usize; 5],
    pub d_star: Vec<DStar>,
    pub caveat: &'static str,
}

impl C1Statistics {
    pub fn frequency(&self, band: usize) -> f64 {
        self.counts[band] as f64 / self.n_env as f64
    }

    pub fn median_smoothed(&self) -> f64 {
        median(self.d_star.iter().map(|s| s.smoothed).collect())
    }

    /// `L,band,count,threshold_lo,threshold_hi`.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> Result<()> {
        if header {
            writeln!(w, "L,band,count,threshold_lo,threshold_hi")?;
        }
        for (band, c) in self.counts.iter().enumerate() {
            let (lo, hi) = c1_band_edges(self.radius, band);
            writeln!(w, "{},{band},{c},{},{}", fmt_f64(self.radius), fmt_f64(lo), fmt_f64(hi))?;
        }
        Ok(())
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Band counts of `(D*_{L,p,ψ,q}, D*_{L,p})` over ensemble members `0..n_env`.
pub fn c1_statistics(
    spec: &EnvironmentSpec,
    radius: f64,
    p: &SymmetricKernel,
    psi: &Psi,
    q: &SymmetricKernel,
    delta: f64,
    n_env: usize,
    tol: f64,
) -> Result<C1Statistics> {
    let smoother = Smoother::new(q, psi, tol)?;
    let d_star: Vec<DStar> = (0..n_env as u64)
        .into_par_iter()
        .map(|k| {
            let env = Environment::new(spec.member(k))?;
            d_star_with(&env, radius, p, &smoother, tol)
        })
        .collect::<Result<_>>()?;
    let mut counts = [0usize; 5];
    for s in &d_star {
        counts[c1_band(radius, s.smoothed, s.plain, delta)] += 1;
    }
    Ok(C1Statistics {
        radius,
        delta,
        n_env,
        counts,
        d_star,
        caveat: "observed frequencies only; exp(-(log L)^2) levels are not resolvable at this ensemble size",
    })
}

/// `φ(x, ·) = (Π_L π̂^{(q)}_ψ)(x, ·)`.
pub fn smoothed_exit<F: KernelField + ?Sized>(
    field: &F,
    radius: f64,
    psi: &Psi,
    q: &SymmetricKernel,
    x: &LatticePoint,
    tol: f64,
) -> Result<Measure> {
    let dom = Domain::ball(&LatticePoint::origin(field.dim()), radius)?;
    let ex = exit_measure_exact(field, &dom, x, tol)?;
    let qe = RowEngine::new(q, tol);
    ex.compose(|y| {
        let m = match psi {
            Psi::Constant(m) => *m,
            Psi::Field(f) => f(y),
        };
        qe.cg_row(y, m, &Region::Whole)
    })
}

/// `Σ_a ν(a) φ(y' + a, ·)` for a zero-mass, reflection-invariant `ν`.
pub fn symmetry_pairing(
    nu: &Measure,
    mut phi: impl FnMut(&LatticePoint) -> Result<Measure>,
    base: &LatticePoint,
) -> Result<Measure> {
    if nu.total().abs() > 1e-12 {
        return domain(format!("pairing measure must have zero mass, got {}", nu.total()));
    }
    let d = base.dim();
    for axis in 0..d {
        if nu.reflected(axis).l1_distance(nu) > 1e-12 {
            return domain(format!("pairing measure is not invariant under reflection {axis}"));
        }
    }
    let mut acc: FxHashMap<LatticePoint, f64> = FxHashMap::default();
    for (a, w) in nu.entries() {
        if *w == 0.0 {
            continue;
        }
        for (z, v) in phi(&base.add(a))?.entries() {
            *acc.entry(z.clone()).or_insert(0.0) += w * v;
        }
    }
    Ok(Measure::from_pairs(acc.into_iter().filter(|e| e.1 != 0.0)))
}

#[derive(Clone, Debug, Serialize)]
pub struct CapRatio {
    pub x: Vec<i64>,
    pub z: Vec<i64>,
    pub t: f64,
    pub env_mass: f64,
    pub ref_mass: f64,
}

impl CapRatio {
    pub fn ratio(&self) -> f64 {
        self.env_mass / self.ref_mass
    }
}

/// `Π_L(x, W_t(z))` against `π^{(p)}_L(x, W_t(z))` for every start and cap centre.
pub fn cap_comparison<F: KernelField + ?Sized>(
    env: &F,
    p: &SymmetricKernel,
    radius: f64,
    starts: &[LatticePoint],
    centers: &[LatticePoint],
    t: f64,
    tol: f64,
) -> Result<Vec<CapRatio>> {
    let d = env.dim();
    let dom = Domain::ball(&LatticePoint::origin(d), radius)?;
    let caps: Vec<FxHashSet<LatticePoint>> = centers
        .iter()
        .map(|z| Ok(boundary_cap(radius, z, t)?.into_iter().collect()))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for x in starts {
        let a = exit_measure_exact(env, &dom, x, tol)?;
        let b = exit_measure_exact(p, &dom, x, tol)?;
        for (z, cap) in centers.iter().zip(&caps) {
            out.push(CapRatio {
                x: x.coords().to_vec(),
                z: z.coords().to_vec(),
                t,
                env_mass: a.mass_where(|y| cap.contains(y)),
                ref_mass: b.mass_where(|y| cap.contains(y)),
            });
        }
    }
    Ok(out)
}

/// Boundary points of `V_L` closest to `±L e_i`.
pub fn axis_cap_centers(radius: f64, d: usize) -> Result<Vec<LatticePoint>> {
    let o = LatticePoint::origin(d);
    let boundary = outer_boundary(&ball_points(&o, radius)?);
    let mut out = Vec::with_capacity(2 * d);
    for i in 0..d {
        for s in [1i64, -1] {
            let target: Vec<f64> = (0..d).map(|k| if k == i { s as f64 * radius } else { 0.0 }).collect();
            let best = boundary
                .iter()
                .min_by(|a, b| {
                    let da: f64 = a.0.iter().zip(&target).map(|(c, t)| (*c as f64 - t).powi(2)).sum();
                    let db: f64 = b.0.iter().zip(&target).map(|(c, t)| (*c as f64 - t).powi(2)).sum();
                    da.total_cmp(&db).then_with(|| a.cmp(b))
                })
                .unwrap();
            out.push(best.clone());
        }
    }
    Ok(out)
}
