//! Closed forms and limit checks: local CLT and Green function of the
//! coarse-grained walk, the large-deviation bound, the Poisson kernel with a
//! walk-on-spheres sampler, annulus escape, gambler's ruin and the transience
//! experiment.
//!
//! Powers of a symmetric coarse-grained row live on the octant grid `[0, M]^d`.
//! Characteristic functions are taken with per-axis DCT-I transforms, which is
//! the Fourier transform of an even sequence of period `2M`.

use std::f64::consts::PI;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use rustdct::DctPlanner;
use serde::Serialize;
use statrs::function::gamma::{gamma, gamma_lr};

use crate::coarsegrain::{Region, RowEngine};
use crate::error::{domain, Error, Result};
use crate::exitsolver::{Domain, ExitProblem};
use crate::kernelspace::{Environment, EnvironmentSpec, KernelField, SymmetricKernel};
use crate::lattice::{ball_points, LatticePoint};
use crate::measure::{fmt_f64, Measure};
use crate::rng;

/// Second moments of one coarse-grained row of a homogeneous kernel.
#[derive(Clone, Debug)]
pub struct CgMoments {
    pub m: f64,
    pub lambda: Vec<f64>,
    pub offdiag_max: f64,
    pub row: Measure,
}

impl CgMoments {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn det(&self) -> f64 {
        self.lambda.iter().product()
    }

    /// `J_m(x) = |Λ_m^{-1/2} x|`.
    pub fn j(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.lambda).map(|(v, l)| v * v / l).sum::<f64>().sqrt()
    }

    pub fn j_point(&self, x: &LatticePoint) -> f64 {
        let v: Vec<f64> = x.coords().iter().map(|&c| c as f64).collect();
        self.j(&v)
    }

    /// `(2πn)^{-d/2} det Λ_m^{-1/2} exp(-J_m(x)^2 / 2n)`.
    pub fn gaussian(&self, n: f64, x: &LatticePoint) -> f64 {
        let d = self.dim() as f64;
        let j = self.j_point(x);
        (2.0 * PI * n).powf(-d / 2.0) / self.det().sqrt() * (-j * j / (2.0 * n)).exp()
    }
}

pub fn cg_moments(p: &SymmetricKernel, m: f64, tol: f64) -> Result<CgMoments> {
    if !(m >= 1.0) {
        return domain(format!("coarse-graining scale must be at least 1, got {m}"));
    }
    let d = p.dim();
    let engine = RowEngine::new(p, tol);
    let row = engine.cg_row(&LatticePoint::origin(d), m, &Region::Whole)?;
    let mut cov = vec![0.0; d * d];
    for (y, w) in row.entries() {
        let c = y.coords();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += w * (c[i] * c[j]) as f64;
            }
        }
    }
    let lambda: Vec<f64> = (0..d).map(|i| cov[i * d + i]).collect();
    let mut offdiag_max: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                offdiag_max = offdiag_max.max(cov[i * d + j].abs());
            }
        }
    }
    Ok(CgMoments { m, lambda, offdiag_max, row })
}

fn axis_cgf(row: &Measure, axis: usize, t: f64) -> f64 {
    let top = row.entries().iter().map(|(y, _)| t * y.coords()[axis] as f64).fold(f64::MIN, f64::max);
    let s: f64 = row.entries().iter().map(|(y, w)| w * (t * y.coords()[axis] as f64 - top).exp()).sum();
    top + s.ln()
}

/// `log` of the Chernoff bound `min_t exp(n K_i(t) - t a)` on `P(S_i >= a)`.
fn log_chernoff(row: &Measure, axis: usize, n: usize, a: f64) -> f64 {
    let f = |t: f64| n as f64 * axis_cgf(row, axis, t) - t * a;
    let (mut lo, mut hi) = (0.0, 40.0);
    for _ in 0..200 {
        let a1 = lo + (hi - lo) / 3.0;
        let a2 = hi - (hi - lo) / 3.0;
        if f(a1) <= f(a2) {
            hi = a2;
        } else {
            lo = a1;
        }
    }
    f(0.5 * (lo + hi)).min(0.0)
}

/// Upper bound on the mass of `row^{*n}` outside the cube `|y_i| < a`.
pub fn escaped_mass_bound(row: &Measure, n: usize, a: f64) -> f64 {
    if row.is_empty() {
        return 0.0;
    }
    let d = row.entries()[0].0.dim();
    (0..d).map(|i| 2.0 * log_chernoff(row, i, n, a).exp()).sum()
}

/// Smallest half-width `M` with escaped mass of `row^{*n}` at most `mass_tol`.
pub fn chernoff_halfwidth(row: &Measure, n: usize, mass_tol: f64) -> usize {
    let ok = |a: usize| escaped_mass_bound(row, n, a as f64) <= mass_tol;
    let mut hi = 2usize;
    while !ok(hi) {
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// A reflection-symmetric density stored on the octant `[0, M]^d`.
#[derive(Clone, Debug)]
pub struct OctantGrid {
    pub d: usize,
    pub half: usize,
    pub data: Vec<f64>,
}

impl OctantGrid {
    pub fn zeros(d: usize, half: usize) -> Self {
        OctantGrid { d, half, data: vec![0.0; (half + 1).pow(d as u32)] }
    }

    fn offset(&self, c: &[i64]) -> Option<usize> {
        let n1 = self.half + 1;
        let mut k = 0;
        for &v in c {
            let a = v.unsigned_abs() as usize;
            if a > self.half {
                return None;
            }
            k = k * n1 + a;
        }
        Some(k)
    }

    pub fn get(&self, x: &LatticePoint) -> f64 {
        self.offset(x.coords()).map_or(0.0, |k| self.data[k])
    }

    /// Octant coordinates of storage slot `k`.
    pub fn coords_of(&self, mut k: usize) -> Vec<i64> {
        let n1 = self.half + 1;
        let mut c = vec![0; self.d];
        for i in (0..self.d).rev() {
            c[i] = (k % n1) as i64;
            k /= n1;
        }
        c
    }

    /// Number of lattice points that fold onto slot `k`.
    pub fn multiplicity(&self, k: usize) -> f64 {
        self.coords_of(k).iter().map(|&c| if c == 0 || c as usize == self.half { 1.0 } else { 2.0 }).product()
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().enumerate().map(|(k, v)| v * self.multiplicity(k)).sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Applies `scale * DCT-I` along every axis.
    fn transform(&mut self, scale: f64) {
        let n1 = self.half + 1;
        let dct = DctPlanner::new().plan_dct1(n1);
        let mut line = vec![0.0; n1];
        for axis in 0..self.d {
            let stride = n1.pow((self.d - 1 - axis) as u32);
            let outer = n1.pow(axis as u32);
            for o in 0..outer {
                for i in 0..stride {
                    let base = o * n1 * stride + i;
                    for (t, v) in line.iter_mut().enumerate() {
                        *v = self.data[base + t * stride];
                    }
                    dct.process_dct1(&mut line);
                    for (t, v) in line.iter().enumerate() {
                        self.data[base + t * stride] = scale * v;
                    }
                }
            }
        }
    }

    /// Characteristic function of the folded density at `θ = πk/M`.
    pub fn forward(&mut self) {
        self.transform(2.0);
    }

    pub fn inverse(&mut self) {
        let s = 1.0 / self.half as f64;
        self.transform(s);
    }
}

fn fold_row(row: &Measure, d: usize, half: usize) -> Result<OctantGrid> {
    let mut g = OctantGrid::zeros(d, half);
    for (y, w) in row.entries() {
        if y.coords().iter().all(|&c| c >= 0) {
            match g.offset(y.coords()) {
                Some(k) if y.coords().iter().all(|&c| (c as usize) < half) => g.data[k] = *w,
                _ => return domain(format!("row support {y:?} does not fit in half-width {half}")),
            }
        }
    }
    Ok(g)
}

fn support_radius(row: &Measure) -> usize {
    row.entries().iter().flat_map(|(y, _)| y.coords().iter().map(|c| c.unsigned_abs() as usize)).max().unwrap_or(0)
}

/// `n`-fold convolution power of a reflection-symmetric row, with escaped
/// mass at most `mass_tol`.
pub fn cg_power(row: &Measure, n: usize, mass_tol: f64) -> Result<OctantGrid> {
    let d = row.entries().first().map(|e| e.0.dim()).ok_or_else(|| Error::Domain("empty row".into()))?;
    if n == 0 {
        let mut g = OctantGrid::zeros(d, 1);
        g.data[0] = 1.0;
        return Ok(g);
    }
    let half = chernoff_halfwidth(row, n, mass_tol).max(support_radius(row) + 1).max(2);
    cg_power_in(row, n, half)
}

/// As [`cg_power`] on a prescribed half-width.
pub fn cg_power_in(row: &Measure, n: usize, half: usize) -> Result<OctantGrid> {
    let d = row.entries().first().map(|e| e.0.dim()).ok_or_else(|| Error::Domain("empty row".into()))?;
    let mut g = fold_row(row, d, half)?;
    g.forward();
    for v in g.data.iter_mut() {
        *v = v.powi(n as i32);
    }
    g.inverse();
    Ok(g)
}

/// Direct sparse convolution power; the oracle for small `n`.
pub fn direct_power(row: &Measure, n: usize) -> Measure {
    let d = row.entries().first().map_or(1, |e| e.0.dim());
    let mut acc = Measure::delta(LatticePoint::origin(d));
    for _ in 0..n {
        let mut next: FxHashMap<LatticePoint, f64> = FxHashMap::default();
        for (x, a) in acc.entries() {
            for (y, b) in row.entries() {
                *next.entry(x.add(y)).or_insert(0.0) += a * b;
            }
        }
        acc = Measure::from_pairs(next);
    }
    acc
}

#[derive(Clone, Debug, Serialize)]
pub struct CltRow {
    pub m: f64,
    pub n: usize,
    pub sup_gap: f64,
    pub scaled_gap: f64,
    pub mass: f64,
    pub min_value: f64,
}

/// Sup-norm gap between `π̂_m^n(0, ·)` and the Gaussian prediction.
pub fn clt_gap(mom: &CgMoments, n: usize, mass_tol: f64) -> Result<CltRow> {
    let g = cg_power(&mom.row, n, mass_tol)?;
    let d = mom.dim();
    let mut sup: f64 = 0.0;
    for k in 0..g.data.len() {
        let x = LatticePoint::new(&g.coords_of(k));
        sup = sup.max((g.data[k] - mom.gaussian(n as f64, &x)).abs());
    }
    // Outside the box the density is below the escaped mass and the Gaussian is smaller still.
    let scaled = (n as f64).powf((d as f64 + 2.0) / 2.0) * mom.m.powi(d as i32) * sup;
    Ok(CltRow { m: mom.m, n, sup_gap: sup, scaled_gap: scaled, mass: g.mass(), min_value: g.min() })
}

/// Lattice Riemann sum of the Gaussian prediction over the cube `|x_i| <= half`.
pub fn gaussian_lattice_mass(mom: &CgMoments, n: f64, half: usize) -> f64 {
    let g = OctantGrid::zeros(mom.dim(), half);
    (0..g.data.len())
        .map(|k| g.multiplicity(k) * mom.gaussian(n, &LatticePoint::new(&g.coords_of(k))))
        .sum()
}

/// `c(d) = Γ(d/2 - 1) / (2 π^{d/2})`.
pub fn c_d_gamma(d: usize) -> Result<f64> {
    if d < 3 {
        return domain(format!("Green constant needs d >= 3, got {d}"));
    }
    let h = d as f64 / 2.0;
    Ok(gamma(h - 1.0) / (2.0 * PI.powf(h)))
}

/// `c(d) = (2 π^{d/2})^{-1} ∫_0^∞ t^{-d/2} e^{-1/t} dt`, split at `t = 1`.
pub fn c_d_quadrature(d: usize) -> Result<f64> {
    if d < 3 {
        return domain(format!("Green constant needs d >= 3, got {d}"));
    }
    let h = d as f64 / 2.0;
    let near = quadrature::double_exponential::integrate(
        |t| if t < 1e-3 { 0.0 } else { t.powf(-h) * (-1.0 / t).exp() },
        0.0,
        1.0,
        1e-15,
    )
    .integral;
    // t = 1/v² on [1, ∞).
    let far = quadrature::double_exponential::integrate(
        |v| 2.0 * v.powf(2.0 * h - 3.0) * (-v * v).exp(),
        0.0,
        1.0,
        1e-15,
    )
    .integral;
    Ok((near + far) / (2.0 * PI.powf(h)))
}

/// `∫_T^∞ (2πt)^{-d/2} det^{-1/2} exp(-J^2/2t) dt`.
fn gaussian_time_tail(d: usize, det: f64, j: f64, t: f64) -> f64 {
    let s = d as f64 / 2.0 - 1.0;
    let a = 0.5 * j * j;
    let pre = (2.0 * PI).powf(-(d as f64) / 2.0) / det.sqrt();
    let u = a / t;
    let core = if u < 1e-10 { t.powf(-s) / s * (1.0 - s * u / (s + 1.0)) } else { a.powf(-s) * gamma(s) * gamma_lr(s, u) };
    pre * core
}

#[derive(Clone, Debug)]
pub struct GreenReport {
    pub moments: CgMoments,
    pub n_terms: usize,
    pub half: usize,
    pub values: Vec<f64>,
    pub tail: Vec<f64>,
}

/// `ĝ_m(0, x) = Σ_n π̂_m^n(0, x)` for the listed points.
///
/// Terms up to `n_terms` come from the Fourier geometric sum on a box whose
/// escaped mass at step `n_terms` is below `mass_tol`; the remainder is the
/// Gaussian prediction integrated in time from `n_terms + 1/2`.
pub fn green_whole_space(
    p: &SymmetricKernel,
    m: f64,
    xs: &[LatticePoint],
    n_terms: usize,
    mass_tol: f64,
    tol: f64,
) -> Result<GreenReport> {
    let d = p.dim();
    if d < 3 {
        return domain(format!("the walk is recurrent in d = {d}"));
    }
    let mom = cg_moments(p, m, tol)?;
    let half = chernoff_halfwidth(&mom.row, n_terms, mass_tol).max(support_radius(&mom.row) + 1);
    let mut g = fold_row(&mom.row, d, half)?;
    g.forward();
    for v in g.data.iter_mut() {
        *v = geometric_sum(*v, n_terms);
    }
    g.inverse();
    let mut values = Vec::with_capacity(xs.len());
    let mut tail = Vec::with_capacity(xs.len());
    for x in xs {
        let t = gaussian_time_tail(d, mom.det(), mom.j_point(x), n_terms as f64 + 0.5);
        values.push(g.get(x) + t);
        tail.push(t);
    }
    Ok(GreenReport { moments: mom, n_terms, half, values, tail })
}

/// `Σ_{k=0}^{n} φ^k`.
fn geometric_sum(phi: f64, n: usize) -> f64 {
    if (1.0 - phi).abs() < 1e-14 {
        return (n + 1) as f64;
    }
    let e = (n + 1) as f64 * phi.abs().ln();
    let pow_m1 = if phi >= 0.0 || (n + 1) % 2 == 0 { e.exp_m1() } else { -e.exp() - 1.0 };
    -pow_m1 / (1.0 - phi)
}

#[derive(Clone, Debug, Serialize)]
pub struct GreenRatioRow {
    pub m: f64,
    pub x_norm: f64,
    pub green: f64,
    pub ratio_to_cd: f64,
}

/// `ĝ(x) J(x)^{d-2} det Λ^{1/2} / c(d)` along the first axis at `|x|/m` in `ratios`.
pub fn green_ratios(report: &GreenReport, xs: &[LatticePoint]) -> Result<Vec<GreenRatioRow>> {
    let mom = &report.moments;
    let d = mom.dim();
    let cd = c_d_gamma(d)?;
    Ok(xs
        .iter()
        .zip(&report.values)
        .map(|(x, g)| GreenRatioRow {
            m: mom.m,
            x_norm: x.norm(),
            green: *g,
            ratio_to_cd: g * mom.j_point(x).powi(d as i32 - 2) * mom.det().sqrt() / cd,
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct LdReport {
    pub m: f64,
    pub n: usize,
    pub n_points: usize,
    pub c1_ref: f64,
    pub c2_cap: f64,
    /// `(c₂, smallest admissible c₁)` over the search grid.
    pub frontier: Vec<(f64, f64)>,
    pub best: Option<(f64, f64)>,
    pub feasible: bool,
}

/// Searches `(c₁, c₂)` with `π̂^n(0, x) <= c₁ m^{-d} exp(-|x|²/(c₂ n m²))` on
/// the lattice points with `3m <= |x| <= 6m`.
///
/// Feasible means some `c₂ <= c2_cap` needs at most `c1_ref = 2d`.
pub fn ld_bound_check(mom: &CgMoments, n: usize, c2_grid: &[f64], c2_cap: f64, mass_tol: f64) -> Result<LdReport> {
    let g = cg_power(&mom.row, n, mass_tol)?;
    let d = mom.dim();
    let m = mom.m;
    let md = m.powi(d as i32);
    let pts: Vec<(f64, f64)> = (0..g.data.len())
        .filter_map(|k| {
            let x = LatticePoint::new(&g.coords_of(k));
            let r = x.norm();
            (r >= 3.0 * m && r <= 6.0 * m).then(|| (r * r, g.data[k].max(0.0)))
        })
        .collect();
    if pts.is_empty() {
        return domain("no lattice points in the large-deviation shell");
    }
    let c1_ref = 2.0 * d as f64;
    let frontier: Vec<(f64, f64)> = c2_grid
        .iter()
        .map(|&c2| {
            let c1 = pts
                .iter()
                .map(|&(r2, f)| {
                    let e = r2 / (c2 * n as f64 * m * m);
                    if f == 0.0 { 0.0 } else { (f.ln() + md.ln() + e).exp() }
                })
                .fold(0.0, f64::max);
            (c2, c1)
        })
        .collect();
    let best = frontier.iter().copied().filter(|&(c2, c1)| c2 <= c2_cap && c1 <= c1_ref).min_by(|a, b| a.0.total_cmp(&b.0));
    Ok(LdReport { m, n, n_points: pts.len(), c1_ref, c2_cap, frontier, best, feasible: best.is_some() })
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    PI.powf(h) / gamma(h + 1.0)
}

/// `(L² - |x|²) / (d α(d) L |x - z|^d)`.
pub fn poisson_kernel(x: &[f64], z: &[f64], radius: f64) -> Result<f64> {
    let d = x.len();
    if z.len() != d {
        return Err(Error::DimensionMismatch(d, z.len()));
    }
    let x2: f64 = x.iter().map(|v| v * v).sum();
    if x2 >= radius * radius {
        return domain(format!("|x| = {} is not inside the ball of radius {radius}", x2.sqrt()));
    }
    let dist: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok((radius * radius - x2) / (d as f64 * unit_ball_volume(d) * radius * dist.powi(d as i32)))
}

/// The 26 cap centers `{-1,0,1}^3 \ {0}`, normalized.
pub fn cap_directions() -> Vec<[f64; 3]> {
    let mut v = Vec::with_capacity(26);
    for a in -1i32..=1 {
        for b in -1i32..=1 {
            for c in -1i32..=1 {
                if (a, b, c) != (0, 0, 0) {
                    let n = ((a * a + b * b + c * c) as f64).sqrt();
                    v.push([a as f64 / n, b as f64 / n, c as f64 / n]);
                }
            }
        }
    }
    v
}

/// Voronoi cap of a direction on the sphere.
pub fn cap_of(dirs: &[[f64; 3]], u: &[f64]) -> usize {
    let mut best = (0, f64::MIN);
    for (k, c) in dirs.iter().enumerate() {
        let s = c[0] * u[0] + c[1] * u[1] + c[2] * u[2];
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Poisson-kernel mass of each cap and the total, by a product rule in
/// `(cos θ, φ)` with `n_mu` Gauss–Legendre nodes and `2 n_mu` angles.
pub fn poisson_cap_integrals(x: &[f64; 3], radius: f64, n_mu: usize) -> Result<(Vec<f64>, f64)> {
    let dirs = cap_directions();
    let (mu, wmu) = gauss_legendre(n_mu);
    let n_phi = 2 * n_mu;
    let dphi = 2.0 * PI / n_phi as f64;
    let parts: Vec<Vec<f64>> = (0..n_mu)
        .into_par_iter()
        .map(|i| {
            let mut caps = vec![0.0; 27];
            let s = (1.0 - mu[i] * mu[i]).sqrt();
            for j in 0..n_phi {
                let ph = (j as f64 + 0.5) * dphi;
                let u = [s * ph.cos(), s * ph.sin(), mu[i]];
                let z = [radius * u[0], radius * u[1], radius * u[2]];
                let k = poisson_kernel(x, &z, radius).unwrap_or(0.0);
                let w = k * wmu[i] * dphi * radius * radius;
                caps[cap_of(&dirs, &u)] += w;
                caps[26] += w;
            }
            caps
        })
        .collect();
    let mut caps = vec![0.0; 27];
    for p in parts {
        for (a, b) in caps.iter_mut().zip(p) {
            *a += b;
        }
    }
    let total = caps.pop().unwrap();
    if !(x[0] * x[0] + x[1] * x[1] + x[2] * x[2] < radius * radius) {
        return domain("start point is not inside the ball");
    }
    Ok((caps, total))
}

/// Distance from `z` to the boundary of `{w : Σ λ_i w_i² <= L²}` and the
/// nearest boundary point, by bisection on the Lagrange multiplier.
pub fn ellipsoid_distance(z: &[f64], lambda: &[f64], radius: f64) -> (f64, Vec<f64>) {
    let q0: f64 = z.iter().zip(lambda).map(|(a, l)| l * a * a).sum();
    let r2 = radius * radius;
    if q0 >= r2 {
        return (0.0, z.to_vec());
    }
    let lmax = lambda.iter().copied().fold(0.0, f64::max);
    let g = |mu: f64| -> f64 {
        z.iter().zip(lambda).map(|(a, l)| l * a * a / ((1.0 + mu * l) * (1.0 + mu * l))).sum::<f64>() - r2
    };
    let edge = -1.0 / lmax;
    let lo0 = edge * (1.0 - 1e-15);
    let radial = |z: &[f64]| -> Vec<f64> {
        let s = radius / q0.sqrt().max(f64::MIN_POSITIVE);
        z.iter().map(|a| a * s).collect()
    };
    let lower = (radius - q0.sqrt()) / lmax.sqrt();
    if !(g(lo0) > 0.0) {
        return (lower, radial(z));
    }
    let (mut lo, mut hi) = (lo0, 0.0f64);
    while hi - lo > 1e-12 * lo.abs() {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let w: Vec<f64> = z.iter().zip(lambda).map(|(a, l)| a / (1.0 + mu * l)).collect();
    let dist = w.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    (dist.max(lower), w)
}

#[derive(Clone, Debug, Serialize)]
pub struct WosResult {
    pub probs: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_paths: usize,
    pub mean_steps: f64,
}

impl WosResult {
    pub fn stderr(&self, k: usize) -> f64 {
        let p = self.probs[k];
        (p * (1.0 - p) / self.n_paths as f64).sqrt()
    }
}

const WOS_BLOCK: usize = 1000;

/// Cap probabilities of Brownian motion with covariance `diag(cov)` started
/// at `x` and stopped on leaving the ball of radius `radius`, by walk on
/// spheres in `Λ^{-1/2}`-coordinates with absorption band `1e-6 · radius`.
pub fn bm_exit_mc(cov: &[f64], x: &[f64], radius: f64, n_paths: usize, seed: u64) -> Result<WosResult> {
    if cov.len() != 3 || x.len() != 3 {
        return domain("cap statistics are defined in d = 3");
    }
    if cov.iter().any(|&l| !(l > 0.0)) {
        return domain(format!("covariance must be positive: {cov:?}"));
    }
    if x.iter().map(|v| v * v).sum::<f64>() >= radius * radius {
        return domain("start point is not inside the ball");
    }
    let dirs = cap_directions();
    let sq: Vec<f64> = cov.iter().map(|l| l.sqrt()).collect();
    let z0: Vec<f64> = x.iter().zip(&sq).map(|(a, s)| a / s).collect();
    let band = 1e-6 * radius;
    let n_blocks = n_paths.div_ceil(WOS_BLOCK);
    let parts: Vec<(Vec<u64>, u64)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut s = rng::path_stream(rng::key(seed, rng::TAG_PATH, &[b as i64]));
            let mut counts = vec![0u64; 26];
            let mut steps = 0u64;
            let count = WOS_BLOCK.min(n_paths - b * WOS_BLOCK);
            for _ in 0..count {
                let mut z = z0.clone();
                loop {
                    let (r, w) = ellipsoid_distance(&z, cov, radius);
                    if r < band {
                        let xe: Vec<f64> = w.iter().zip(&sq).map(|(a, s)| a * s).collect();
                        counts[cap_of(&dirs, &xe)] += 1;
                        break;
                    }
                    let g: [f64; 3] = [StandardNormal.sample(&mut s), StandardNormal.sample(&mut s), StandardNormal.sample(&mut s)];
                    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                    for i in 0..3 {
                        z[i] += r * g[i] / n;
                    }
                    steps += 1;
                }
            }
            (counts, steps)
        })
        .collect();
    let mut counts = vec![0u64; 26];
    let mut steps = 0;
    for (c, st) in parts {
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
        steps += st;
    }
    let probs = counts.iter().map(|&c| c as f64 / n_paths as f64).collect();
    Ok(WosResult { probs, counts, n_paths, mean_steps: steps as f64 / n_paths as f64 })
}

#[derive(Clone, Debug, Serialize)]
pub struct SensitivityRow {
    pub l1_distance: f64,
    pub max_cap_gap: f64,
    pub slope: f64,
}

/// Cap-probability change when `p_o` is tilted to `q(±e₁) = 1/6 + δ/4`,
/// `q(±e₂) = 1/6 - δ/4`, so that `‖q - p_o‖₁ = δ`. Paths share random numbers.
pub fn cap_sensitivity(x: &[f64], radius: f64, deltas: &[f64], n_paths: usize, seed: u64) -> Result<Vec<SensitivityRow>> {
    let p = SymmetricKernel::srw(3);
    let base = bm_exit_mc(&p.covariance().diag, x, radius, n_paths, seed)?;
    deltas
        .iter()
        .map(|&delta| {
            let c = 1.0 / 6.0;
            let q = SymmetricKernel::from_axis(&[c + delta / 4.0, c - delta / 4.0, c])?;
            let r = bm_exit_mc(&q.covariance().diag, x, radius, n_paths, seed)?;
            let gap = base.probs.iter().zip(&r.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok(SensitivityRow { l1_distance: delta, max_cap_gap: gap, slope: gap / delta })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AnnulusReport {
    pub exact: f64,
    pub formula: f64,
    pub rel_gap: f64,
}

/// `(l^{2-d} - J^{2-d}) / (l^{2-d} - L^{2-d})`.
pub fn annulus_formula(d: usize, l: f64, big_l: f64, j: f64) -> f64 {
    let e = 2.0 - d as f64;
    (l.powf(e) - j.powf(e)) / (l.powf(e) - big_l.powf(e))
}

/// Probability that the `p`-walk from `x` leaves `{J <= L}` before entering
/// `{J <= l}`, with `J = |Λ_p^{-1/2} ·|`, by an exact solve on the annulus.
pub fn annulus_escape(p: &SymmetricKernel, l: f64, big_l: f64, x: &LatticePoint, tol: f64) -> Result<AnnulusReport> {
    let d = p.dim();
    if d < 3 {
        return domain(format!("annulus formula needs d >= 3, got {d}"));
    }
    let cov = p.covariance();
    let jf = |y: &LatticePoint| -> f64 {
        let v: Vec<f64> = y.coords().iter().map(|&c| c as f64).collect();
        cov.j_norm(&v)
    };
    let jx = jf(x);
    if !(l > 0.0 && l < jx && jx < big_l) {
        return domain(format!("need 0 < l < J(x) < L, got l = {l}, J(x) = {jx}, L = {big_l}"));
    }
    let lmax = cov.diag.iter().copied().fold(0.0, f64::max);
    let pts: Vec<LatticePoint> = ball_points(&LatticePoint::origin(d), big_l * lmax.sqrt() + 1.0)?
        .into_iter()
        .filter(|y| {
            let j = jf(y);
            j > l && j <= big_l
        })
        .collect();
    let dom = Domain::new(pts)?;
    let bvals: Vec<f64> = dom.boundary().iter().map(|z| if jf(z) > big_l { 1.0 } else { 0.0 }).collect();
    let prob = ExitProblem::new(&dom, p, &vec![0; d]);
    let u = prob.harmonic(&bvals, tol)?;
    let exact = u[dom.index_of(x).unwrap()];
    let formula = annulus_formula(d, l, big_l, jx);
    Ok(AnnulusReport { exact, formula, rel_gap: (exact - formula).abs() / formula })
}

/// `h̄(k) = 1/(1 - (3/2)^N) + (2/3)^k / (1 - (2/3)^N)` for `0 <= k <= N`.
pub fn gamblers_ruin(k: usize, n: usize) -> Result<f64> {
    if n == 0 || k > n {
        return domain(format!("need 0 <= k <= N with N >= 1, got k = {k}, N = {n}"));
    }
    let up = 1.5f64.powi(n as i32);
    let down = (2.0f64 / 3.0).powi(n as i32);
    Ok(1.0 / (1.0 - up) + (2.0f64 / 3.0).powi(k as i32) / (1.0 - down))
}

pub fn gamblers_ruin_limit(k: usize) -> f64 {
    (2.0f64 / 3.0).powi(k as i32)
}

/// Solves `h(k) = (2/5) h(k-1) + (3/5) h(k+1)`, `h(0) = 1`, `h(N) = 0` by the
/// Thomas algorithm.
pub fn gamblers_ruin_solve(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return domain(format!("need N >= 2, got {n}"));
    }
    let m = n - 1;
    let (a, b, c) = (-0.4, 1.0, -0.6);
    let mut cp = vec![0.0; m];
    let mut dp = vec![0.0; m];
    for i in 0..m {
        let rhs = if i == 0 { 0.4 } else { 0.0 };
        let (sub, prev_c, prev_d) = if i == 0 { (0.0, 0.0, 0.0) } else { (a, cp[i - 1], dp[i - 1]) };
        let den = b - sub * prev_c;
        cp[i] = c / den;
        dp[i] = (rhs - sub * prev_d) / den;
    }
    let mut h = vec![0.0; n + 1];
    h[0] = 1.0;
    for i in (0..m).rev() {
        h[i + 1] = dp[i] - cp[i] * h[i + 2];
    }
    Ok(h)
}

#[derive(Clone, Debug, Serialize)]
pub struct TransienceConfig {
    pub rho: f64,
    pub alpha: f64,
    pub scales: Vec<u32>,
    pub n_paths: usize,
    pub threshold: f64,
    pub step_cap_factor: f64,
}

impl TransienceConfig {
    pub fn new(rho: f64, alpha: f64, scales: Vec<u32>, n_paths: usize) -> Result<Self> {
        if !(rho >= 3.0) {
            return domain(format!("rho must be at least 3, got {rho}"));
        }
        if !(alpha > 0.0 && alpha < 1.0 / (4.0 * rho)) {
            return domain(format!("alpha must lie in (0, 1/(4 rho)), got {alpha}"));
        }
        if n_paths < 2 || scales.iter().any(|&s| s == 0) {
            return domain("need at least two paths and positive scales");
        }
        Ok(TransienceConfig { rho, alpha, scales, n_paths, threshold: 0.6, step_cap_factor: 64.0 })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TransienceRow {
    pub scale: u32,
    pub start_norm: f64,
    pub inner: f64,
    pub outer: f64,
    pub escape_est: f64,
    pub stderr: f64,
    pub censored: usize,
    pub pass: bool,
}

/// Radii `(start, inner, outer)` at scale `n`.
pub fn transience_geometry(rho: f64, alpha: f64, n: u32) -> (i64, f64, f64) {
    let rn = rho.powi(n as i32);
    let shift = 2.0 * alpha * rn;
    (rn.round() as i64, rho.powi(n as i32 - 1) + shift, rho.powi(n as i32 + 1) + shift)
}

/// Quenched annulus-escape frequencies in the environment `spec`: from
/// `round(ρ^n) e₁`, leave `V_outer` before entering `V_inner`. Paths hitting the
/// step cap count as failures and are reported as censored.
pub fn transience_experiment(spec: &EnvironmentSpec, cfg: &TransienceConfig) -> Result<Vec<TransienceRow>> {
    let env = Environment::new(spec.clone())?;
    let d = spec.d;
    cfg.scales
        .iter()
        .map(|&n| {
            let (start, inner, outer) = transience_geometry(cfg.rho, cfg.alpha, n);
            let (in2, out2) = (inner * inner, outer * outer);
            let cap = (cfg.step_cap_factor * out2).ceil() as u64;
            let outcomes: Vec<(u64, u64)> = (0..cfg.n_paths)
                .into_par_iter()
                .map(|k| {
                    let mut s = rng::path_stream(rng::key(spec.master_seed, rng::TAG_PATH, &[n as i64, k as i64]));
                    let mut x = vec![0i64; d];
                    x[0] = start;
                    let mut w = vec![0.0; 2 * d];
                    for _ in 0..cap {
                        env.weights_at(&x, &mut w);
                        let u = rng::unit(&mut s);
                        let mut acc = 0.0;
                        let mut dir = 2 * d - 1;
                        for (j, wj) in w.iter().enumerate() {
                            acc += wj;
                            if u < acc {
                                dir = j;
                                break;
                            }
                        }
                        x[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
                        let r2: f64 = x.iter().map(|&c| (c * c) as f64).sum();
                        if r2 <= in2 {
                            return (0, 0);
                        }
                        if r2 > out2 {
                            return (1, 0);
                        }
                    }
                    (0, 1)
                })
                .collect();
            let esc: u64 = outcomes.iter().map(|o| o.0).sum();
            let censored = outcomes.iter().map(|o| o.1).sum::<u64>() as usize;
            let np = cfg.n_paths as f64;
            let est = esc as f64 / np;
            let se = (est * (1.0 - est) / np).sqrt();
            Ok(TransienceRow {
                scale: n,
                start_norm: start as f64,
                inner,
                outer,
                escape_est: est,
                stderr: se,
                censored,
                pass: est - 3.0 * se >= cfg.threshold,
            })
        })
        .collect()
}

pub fn write_clt_csv<W: Write>(mut w: W, rows: &[CltRow]) -> Result<()> {
    writeln!(w, "m,n,sup_gap,scaled_gap")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", fmt_f64(r.m), r.n, fmt_f64(r.sup_gap), fmt_f64(r.scaled_gap))?;
    }
    Ok(())
}

pub fn write_green_csv<W: Write>(mut w: W, rows: &[GreenRatioRow]) -> Result<()> {
    writeln!(w, "m,x_norm,ratio_to_cd")?;
    for r in rows {
        writeln!(w, "{},{},{}", fmt_f64(r.m), fmt_f64(r.x_norm), fmt_f64(r.ratio_to_cd))?;
    }
    Ok(())
}

pub fn write_transience_csv<W: Write>(mut w: W, rows: &[TransienceRow]) -> Result<()> {
    writeln!(w, "scale,start_norm,escape_est,stderr,pass")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.scale, fmt_f64(r.start_norm), fmt_f64(r.escape_est), fmt_f64(r.stderr), r.pass)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn srw_moments(m: f64) -> CgMoments {
        cg_moments(&SymmetricKernel::srw(3), m, 1e-13).unwrap()
    }

    #[test]
    fn dct1_convention_matches_direct_cosine_sum() {
        let x = [0.3, -1.2, 2.5, 0.7, 0.1];
        let n = x.len();
        let mut buf = x.to_vec();
        DctPlanner::new().plan_dct1(n).process_dct1(&mut buf);
        for k in 0..n {
            let mut s = 0.5 * (x[0] + if k % 2 == 0 { x[n - 1] } else { -x[n - 1] });
            for (t, v) in x.iter().enumerate().take(n - 1).skip(1) {
                s += v * (PI * (k * t) as f64 / (n - 1) as f64).cos();
            }
            assert!((buf[k] - s).abs() < 1e-12, "k={k}: {} vs {s}", buf[k]);
        }
    }

    #[test]
    fn moments_are_diagonal_and_isotropic_for_srw() {
        let mom = srw_moments(4.0);
        assert!(mom.offdiag_max <= 1e-10);
        for l in &mom.lambda {
            assert!((l - mom.lambda[0]).abs() <= 1e-10);
        }
        assert!((mom.row.total() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn moments_match_expected_exit_time_oracle() {
        // For SRW, |X|² - n is a martingale, so λ_{m,i} = Σ_k w_k E[τ_k] / d.
        let p = SymmetricKernel::srw(3);
        let engine = RowEngine::new(&p, 1e-13);
        let o = LatticePoint::origin(3);
        let mut oracle = 0.0;
        for piece in engine.pieces(4.0).unwrap() {
            let dom = Domain::new(crate::lattice::ball_points_sq(&o, piece.n_sq, usize::MAX).unwrap()).unwrap();
            oracle += piece.weight * crate::exitsolver::expected_exit_time(&p, &dom, &o, 1e-13).unwrap() / 3.0;
        }
        let mom = srw_moments(4.0);
        assert!((mom.lambda[0] - oracle).abs() < 1e-8, "{} vs {oracle}", mom.lambda[0]);
        assert!((mom.lambda[0] - 13.408_534_051_442_526).abs() < 1e-8, "{}", mom.lambda[0]);
    }

    #[test]
    fn power_matches_direct_convolution() {
        let mom = srw_moments(2.0);
        for n in 0..=3 {
            let g = cg_power(&mom.row, n, 1e-13).unwrap();
            let direct = direct_power(&mom.row, n);
            let mut worst: f64 = 0.0;
            for (y, w) in direct.entries() {
                if y.coords().iter().all(|&c| c >= 0) {
                    worst = worst.max((g.get(y) - w).abs());
                }
            }
            assert!(worst < 1e-12, "n={n}: {worst}");
            assert!((g.mass() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn power_conserves_mass_and_stays_nonnegative() {
        let mom = srw_moments(4.0);
        for n in [1, 5, 12] {
            let g = cg_power(&mom.row, n, 1e-12).unwrap();
            assert!((g.mass() - 1.0).abs() < 1e-10, "n={n}: {}", g.mass());
            assert!(g.min() > -1e-14, "n={n}: {}", g.min());
        }
    }

    #[test]
    fn gaussian_prediction_is_normalized_on_the_lattice() {
        let mom = srw_moments(4.0);
        for n in [16.0, 32.0] {
            let half = (8.0 * (n * mom.lambda[0]).sqrt()) as usize;
            let s = gaussian_lattice_mass(&mom, n, half);
            assert!((s - 1.0).abs() < 1e-3, "n={n}: {s}");
        }
    }

    #[test]
    fn green_constant_two_ways() {
        let a = c_d_gamma(3).unwrap();
        let b = c_d_quadrature(3).unwrap();
        assert!((a - 1.0 / (2.0 * PI)).abs() < 1e-14);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        for d in 4..7 {
            assert!((c_d_gamma(d).unwrap() - c_d_quadrature(d).unwrap()).abs() < 1e-10);
        }
        assert!(c_d_gamma(2).is_err());
    }

    #[test]
    fn time_tail_matches_quadrature() {
        let (d, det, j, t) = (3, 1700.0f64, 5.0f64, 40.5f64);
        let pre = (2.0 * PI).powf(-1.5) / det.sqrt();
        // t = 1/v² maps [T, ∞) to (0, T^{-1/2}].
        let q = quadrature::double_exponential::integrate(
            |v: f64| 2.0 * pre * (-0.5 * j * j * v * v).exp(),
            0.0,
            t.powf(-0.5),
            1e-15,
        )
        .integral;
        assert!((gaussian_time_tail(d, det, j, t) - q).abs() < 1e-12 * q.abs().max(1.0));
        let q0 = 2.0 * pre * t.powf(-0.5);
        assert!((gaussian_time_tail(d, det, 0.0, t) - q0).abs() < 1e-12);
    }

    #[test]
    fn green_rejects_recurrent_dimensions() {
        let p = SymmetricKernel::srw(2);
        assert!(green_whole_space(&p, 2.0, &[LatticePoint::origin(2)], 8, 1e-12, 1e-12).is_err());
    }

    #[test]
    fn ld_search_fails_for_tiny_c2() {
        let mom = srw_moments(2.0);
        let r = ld_bound_check(&mom, 4, &[0.01, 1.0, 24.0], 26.4, 1e-13).unwrap();
        assert!(r.frontier[0].1 > r.c1_ref);
        assert!(r.feasible);
    }

    #[test]
    fn poisson_kernel_is_uniform_at_the_center() {
        let l = 3.0;
        let z = [0.0, 0.0, l];
        let v = poisson_kernel(&[0.0; 3], &z, l).unwrap();
        assert!((v - 1.0 / (4.0 * PI * l * l)).abs() < 1e-15);
        assert!(poisson_kernel(&[3.0, 0.0, 0.0], &z, l).is_err());
    }

    #[test]
    fn poisson_kernel_integrates_to_one() {
        let (caps, total) = poisson_cap_integrals(&[0.5, 0.0, 0.0], 1.0, 200).unwrap();
        assert!((total - 1.0).abs() < 1e-8, "{total}");
        assert!((caps.iter().sum::<f64>() - total).abs() < 1e-12);
        assert!(caps.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        let s: f64 = x.iter().zip(&w).map(|(a, b)| b * a.powi(12)).sum();
        assert!((s - 2.0 / 13.0).abs() < 1e-14);
    }

    #[test]
    fn ellipsoid_distance_on_sphere_is_radial() {
        let (r, w) = ellipsoid_distance(&[0.3, 0.4, 0.0], &[1.0, 1.0, 1.0], 2.0);
        assert!((r - 1.5).abs() < 1e-10);
        assert!((w[0] - 1.2).abs() < 1e-9 && (w[1] - 1.6).abs() < 1e-9);
        let (r, _) = ellipsoid_distance(&[0.0, 0.0, 0.0], &[4.0, 1.0, 1.0], 2.0);
        assert!((r - 1.0).abs() < 1e-10, "{r}");
    }

    #[test]
    fn gamblers_ruin_closed_form_and_solve_agree() {
        assert!((gamblers_ruin(0, 30).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(gamblers_ruin_limit(2), 4.0 / 9.0);
        let h = gamblers_ruin_solve(30).unwrap();
        for (k, v) in h.iter().enumerate() {
            assert!((gamblers_ruin(k, 30).unwrap() - v).abs() < 1e-12, "k={k}");
        }
        assert!(gamblers_ruin(31, 30).is_err());
    }

    #[test]
    fn annulus_formula_endpoints() {
        assert!((annulus_formula(3, 4.0, 16.0, 4.0)).abs() < 1e-15);
        assert!((annulus_formula(3, 4.0, 16.0, 16.0) - 1.0).abs() < 1e-15);
        let p = SymmetricKernel::srw(3);
        assert!(annulus_escape(&p, 4.0, 16.0, &LatticePoint::axis(3, 0, 3), 1e-12).is_err());
    }

    #[test]
    fn transience_config_validates() {
        assert!(TransienceConfig::new(2.0, 0.05, vec![1], 10).is_err());
        assert!(TransienceConfig::new(3.0, 0.1, vec![1], 10).is_err());
        assert!(TransienceConfig::new(3.0, 0.05, vec![1], 10).is_ok());
    }
}
