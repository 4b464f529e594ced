//! Resolvent identities and perturbation series for Green's functions, the
//! comparison kernel `Γ_{L,r}` with its neighbourhoods `U(x)`, and the `⪯` and
//! `η`-smoothing diagnostics.

use ndarray::Array2;
use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::exitsolver::{Domain, ExitProblem};
use crate::kernelspace::{KernelField, SymmetricKernel};
use crate::lattice::{ball_points, max_norm_sq, LatticePoint};
use crate::rng;
use crate::sparse::SparseKernel;

const TRUNCATE: f64 = 1e-16;

/// `V` followed by `∂V`, each in lexicographic order.
#[derive(Clone, Debug)]
pub struct IndexSet {
    points: Vec<LatticePoint>,
    index: FxHashMap<LatticePoint, usize>,
    n_inside: usize,
}

impl IndexSet {
    pub fn of_domain(dom: &Domain) -> Self {
        let mut points = dom.points().to_vec();
        points.extend(dom.boundary().iter().cloned());
        let index = points.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        IndexSet { points, index, n_inside: dom.len() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_inside(&self) -> usize {
        self.n_inside
    }

    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }

    pub fn index_of(&self, p: &LatticePoint) -> Option<usize> {
        self.index.get(p).copied()
    }
}

/// Row-sparse signed operator on an index set.
#[derive(Clone, Debug)]
pub struct SignedKernel {
    pub n: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SignedKernel {
    pub fn zero(n: usize) -> Self {
        SignedKernel { n, rows: vec![Vec::new(); n] }
    }

    pub fn max_row_sum_defect(&self) -> f64 {
        self.rows.iter().map(|r| r.iter().map(|e| e.1).sum::<f64>().abs()).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|e| e.1 == 0.0))
    }

    /// `S · D`.
    pub fn times_dense(&self, d: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, d.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut o = out.row_mut(i);
            for &(j, w) in row {
                o.scaled_add(w, &d.row(j));
            }
        }
        truncate(&mut out);
        out
    }

    /// `D · S`.
    pub fn dense_times(&self, d: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((d.nrows(), self.n));
        for i in 0..d.nrows() {
            for (j, row) in self.rows.iter().enumerate() {
                let a = d[[i, j]];
                if a == 0.0 {
                    continue;
                }
                for &(k, w) in row {
                    out[[i, k]] += a * w;
                }
            }
        }
        truncate(&mut out);
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[[i, j]] += w;
            }
        }
        out
    }
}

fn truncate(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v.abs() < TRUNCATE { 0.0 } else { v });
}

/// Operator ∞-norm (largest absolute row sum).
pub fn op_norm(a: &Array2<f64>) -> f64 {
    a.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Green's function of the field on `V` as an operator on `V ∪ ∂V`; rows at
/// boundary points are point masses and columns at `∂V` carry exit probabilities.
pub fn green_matrix<F: KernelField + ?Sized>(field: &F, dom: &Domain, tol: f64) -> Result<Array2<f64>> {
    let idx = IndexSet::of_domain(dom);
    let n = idx.len();
    let nv = dom.len();
    let prob = ExitProblem::new(dom, field, &vec![0; dom.dim()]);
    let mut g = Array2::zeros((n, n));
    for x in 0..nv {
        let row = prob.green_row(x, tol)?;
        let ex = prob.exit_from_green(&row);
        for (y, v) in row.into_iter().enumerate() {
            g[[x, y]] = v;
        }
        for (z, v) in ex.into_iter().enumerate() {
            g[[x, nv + z]] = v;
        }
    }
    for z in nv..n {
        g[[z, z]] = 1.0;
    }
    Ok(g)
}

/// One-step kernel `1_V p` of a field as a sparse operator on `V ∪ ∂V`.
pub fn one_step<F: KernelField + ?Sized>(field: &F, dom: &Domain) -> SignedKernel {
    let idx = IndexSet::of_domain(dom);
    let d = dom.dim();
    let mut k = SignedKernel::zero(idx.len());
    let mut w = vec![0.0; 2 * d];
    for (i, x) in dom.points().iter().enumerate() {
        field.weights_at(x.coords(), &mut w);
        k.rows[i] = (0..2 * d).map(|dir| (idx.index_of(&x.step(dir)).unwrap(), w[dir])).collect();
    }
    k
}

/// `Δ = 1_V (P - p)`.
pub fn kernel_difference<F: KernelField + ?Sized, G: KernelField + ?Sized>(
    env: &F,
    p: &G,
    dom: &Domain,
) -> SignedKernel {
    let a = one_step(env, dom);
    let b = one_step(p, dom);
    let rows = a
        .rows
        .iter()
        .zip(&b.rows)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&(j, x), &(_, y))| (j, x - y)).collect())
        .collect();
    SignedKernel { n: a.n, rows }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ResolventReport {
    /// `‖G - g - gΔG‖`.
    pub left: f64,
    /// `‖G - g - GΔg‖`.
    pub right: f64,
}

fn check_shapes(g_big: &Array2<f64>, g: &Array2<f64>, delta: &SignedKernel) -> Result<()> {
    if g_big.dim() != g.dim() || g.nrows() != delta.n || g.ncols() != delta.n {
        return Err(Error::DimensionMismatch(g_big.nrows(), delta.n));
    }
    Ok(())
}

pub fn resolvent_check(g_big: &Array2<f64>, g: &Array2<f64>, delta: &SignedKernel) -> Result<ResolventReport> {
    check_shapes(g_big, g, delta)?;
    let diff = g_big - g;
    let left = &diff - &g.dot(&delta.times_dense(g_big));
    let right = &diff - &delta.dense_times(g_big).dot(g);
    Ok(ResolventReport { left: op_norm(&left), right: op_norm(&right) })
}

#[derive(Clone, Debug)]
pub struct Expansion {
    pub sum: Array2<f64>,
    /// `‖(gΔ)^k g‖` for `k = 1..=K`.
    pub increments: Vec<f64>,
}

/// `Σ_{k=1}^{K} (gΔ)^k g`, stopping with an error once increments grow three times running.
pub fn expansion_partial_sum(g: &Array2<f64>, delta: &SignedKernel, k_max: usize) -> Result<Expansion> {
    check_shapes(g, g, delta)?;
    let mut sum = Array2::zeros(g.dim());
    let mut term = g.clone();
    let mut increments = Vec::with_capacity(k_max);
    let mut growing = 0;
    for k in 1..=k_max {
        term = g.dot(&delta.times_dense(&term));
        let inc = op_norm(&term);
        if let Some(&last) = increments.last() {
            growing = if inc > last { growing + 1 } else { 0 };
        }
        increments.push(inc);
        sum += &term;
        if growing >= 3 {
            return Err(Error::Divergence { term: k, increment: inc });
        }
    }
    Ok(Expansion { sum, increments })
}

/// `g Σ_{m<=M} (Rg)^m Σ_{k<=K} Δ^k` with `R = Σ_{k=1}^{K} Δ^k 1_V p`.
pub fn expansion_reordered(
    g: &Array2<f64>,
    delta: &SignedKernel,
    p_step: &SignedKernel,
    m_max: usize,
    k_max: usize,
) -> Result<Array2<f64>> {
    check_shapes(g, g, delta)?;
    let n = g.nrows();
    let eye: Array2<f64> = Array2::eye(n);
    let mut dk = eye.clone();
    let mut d_sum = eye.clone();
    let mut dk_sum_from_one: Array2<f64> = Array2::zeros((n, n));
    for _ in 1..=k_max {
        dk = delta.times_dense(&dk);
        d_sum += &dk;
        dk_sum_from_one += &dk;
    }
    let r = p_step.dense_times(&dk_sum_from_one);
    let rg = r.dot(g);
    let mut power = eye;
    let mut series = power.clone();
    for _ in 1..=m_max {
        power = power.dot(&rg);
        series += &power;
    }
    Ok(g.dot(&series).dot(&d_sum))
}

/// Largest absolute entry.
pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `Γ_{L,r}` with `d̃(x) = max(d_{L+r}(x)/2, 3r)` and `a(x) = min(d̃(x), s_L)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GammaKernel {
    pub radius: f64,
    pub r: f64,
    pub s_l: f64,
    pub d: usize,
}

impl GammaKernel {
    pub fn new(radius: f64, r: f64, s_l: f64, d: usize) -> Result<Self> {
        if !(radius > 0.0 && r > 0.0 && s_l > 0.0 && d >= 1) {
            return domain("Γ needs positive L, r, s_L and d >= 1");
        }
        Ok(GammaKernel { radius, r, s_l, d })
    }

    fn outer(&self) -> f64 {
        self.radius + self.r
    }

    pub fn contains(&self, x: &LatticePoint) -> bool {
        x.norm_sq() <= max_norm_sq(self.outer())
    }

    pub fn dtilde_of_norm(&self, norm: f64) -> f64 {
        ((self.outer() - norm) / 2.0).max(3.0 * self.r)
    }

    pub fn dtilde(&self, x: &LatticePoint) -> f64 {
        self.dtilde_of_norm(x.norm())
    }

    pub fn a(&self, x: &LatticePoint) -> f64 {
        self.dtilde(x).min(self.s_l)
    }

    pub fn gamma1(&self, x: &LatticePoint, y: &LatticePoint) -> f64 {
        let ay = self.a(y);
        self.dtilde(x) * self.dtilde(y) / (ay * ay * (ay + x.dist(y)).powi(self.d as i32))
    }

    pub fn gamma2(&self, x: &LatticePoint, y: &LatticePoint) -> f64 {
        let ay = self.a(y);
        1.0 / (ay * ay * (ay + x.dist(y)).powi(self.d as i32 - 2))
    }

    pub fn gamma(&self, x: &LatticePoint, y: &LatticePoint) -> Result<f64> {
        if !self.contains(x) || !self.contains(y) {
            return domain(format!("Γ is defined on V_{{L+r}} only: {x:?}, {y:?}"));
        }
        Ok(self.gamma1(x, y).min(self.gamma2(x, y)))
    }

    /// `U(x) = V_{a(x)}(x) ∩ V_{L+r}`.
    pub fn neighborhood(&self, x: &LatticePoint) -> Result<Vec<LatticePoint>> {
        let n_out = max_norm_sq(self.outer());
        Ok(ball_points(x, self.a(x))?.into_iter().filter(|y| y.norm_sq() <= n_out).collect())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzReport {
    pub dtilde: f64,
    pub a: f64,
    pub n_radii: usize,
}

/// Lipschitz constants of the radial functions `d̃` and `a` over every pair of
/// norms attained in `V_{L+r}`; since `|x - y| >= ||x| - |y||` this bounds the
/// constants over all pairs of points.
pub fn lipschitz_check(gk: &GammaKernel) -> Result<LipschitzReport> {
    let mut norms: Vec<i64> =
        ball_points(&LatticePoint::origin(gk.d), gk.radius + gk.r)?.iter().map(LatticePoint::norm_sq).collect();
    norms.sort_unstable();
    norms.dedup();
    let radii: Vec<f64> = norms.iter().map(|&n| (n as f64).sqrt()).collect();
    let dt: Vec<f64> = radii.iter().map(|&r| gk.dtilde_of_norm(r)).collect();
    let a: Vec<f64> = dt.iter().map(|&v| v.min(gk.s_l)).collect();
    let (mut ld, mut la) = (0.0f64, 0.0f64);
    for i in 0..radii.len() {
        for j in 0..i {
            let gap = radii[i] - radii[j];
            ld = ld.max((dt[i] - dt[j]).abs() / gap);
            la = la.max((a[i] - a[j]).abs() / gap);
        }
    }
    Ok(LipschitzReport { dtilde: ld, a: la, n_radii: radii.len() })
}

/// Neighbourhoods `U(y)` as index lists into an operator's index set.
pub struct NeighborhoodSystem {
    pub gk: GammaKernel,
    points: Vec<LatticePoint>,
    index: FxHashMap<LatticePoint, usize>,
    cache: std::sync::Mutex<FxHashMap<usize, std::sync::Arc<Vec<usize>>>>,
}

impl NeighborhoodSystem {
    pub fn new(gk: GammaKernel, points: &[LatticePoint]) -> Self {
        NeighborhoodSystem {
            gk,
            points: points.to_vec(),
            index: points.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect(),
            cache: Default::default(),
        }
    }

    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }

    /// Indices of points of `V_{L+r}` (the domain of `Γ`).
    pub fn domain_indices(&self) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| self.gk.contains(&self.points[i])).collect()
    }

    pub fn u(&self, y: usize) -> Result<std::sync::Arc<Vec<usize>>> {
        if let Some(v) = self.cache.lock().unwrap().get(&y) {
            return Ok(v.clone());
        }
        let mut ids = Vec::new();
        for p in self.gk.neighborhood(&self.points[y])? {
            match self.index.get(&p) {
                Some(&i) => ids.push(i),
                None => return domain(format!("U({:?}) leaves the index set at {p:?}", self.points[y])),
            }
        }
        let ids = std::sync::Arc::new(ids);
        self.cache.lock().unwrap().insert(y, ids.clone());
        Ok(ids)
    }

    /// `Γ(x, ·)` as a dense row over the index set (zero off `V_{L+r}`).
    pub fn gamma_row(&self, x: usize) -> Vec<f64> {
        let px = &self.points[x];
        self.points
            .iter()
            .map(|y| if self.gk.contains(y) { self.gk.gamma1(px, y).min(self.gk.gamma2(px, y)) } else { 0.0 })
            .collect()
    }
}

/// `(x, y)` pairs: all pairs when there are at most `10^4`, else seeded samples
/// grouped into `n_rows` source rows.
pub fn sample_pairs(domain: &[usize], n_rows: usize, seed: u64) -> Vec<(usize, Vec<usize>)> {
    let n = domain.len();
    if n * n <= 10_000 {
        return domain.iter().map(|&x| (x, domain.to_vec())).collect();
    }
    let per_row = 10_000usize.div_ceil(n_rows);
    let mut s = rng::path_stream(rng::key(seed, rng::TAG_SAMPLE, &[n as i64]));
    let pick = |s: &mut rand_xoshiro::Xoshiro256PlusPlus| domain[(rng::unit(s) * n as f64) as usize % n];
    (0..n_rows).map(|_| (pick(&mut s), (0..per_row).map(|_| pick(&mut s)).collect())).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct PreceqReport {
    pub constant: f64,
    pub worst: (Vec<i64>, Vec<i64>),
    pub n_pairs: usize,
}

/// Smallest `C` with `F(x, U(y)) <= C·G(x, U(y))` over the given pairs.
pub fn preceq_check(
    mut f_row: impl FnMut(usize) -> Result<Vec<f64>>,
    mut g_row: impl FnMut(usize) -> Result<Vec<f64>>,
    u: &NeighborhoodSystem,
    pairs: &[(usize, Vec<usize>)],
) -> Result<PreceqReport> {
    let mut best = PreceqReport { constant: 0.0, worst: (Vec::new(), Vec::new()), n_pairs: 0 };
    for (x, ys) in pairs {
        let fr = f_row(*x)?;
        let gr = g_row(*x)?;
        for &y in ys {
            let uy = u.u(y)?;
            let num: f64 = uy.iter().map(|&i| fr[i]).sum();
            let den: f64 = uy.iter().map(|&i| gr[i]).sum();
            if den <= 0.0 {
                return domain(format!(
                    "zero denominator at x = {:?}, y = {:?}",
                    u.points[*x], u.points[y]
                ));
            }
            best.n_pairs += 1;
            let c = num / den;
            if c > best.constant || best.worst.0.is_empty() {
                best.constant = best.constant.max(c);
                best.worst = (u.points[*x].coords().to_vec(), u.points[y].coords().to_vec());
            }
        }
    }
    Ok(best)
}

/// `max Γ / min Γ` over `U(x) × U(y)` for each sampled pair, maximized.
pub fn gamma_comparability(u: &NeighborhoodSystem, pairs: &[(usize, usize)]) -> Result<f64> {
    let mut worst: f64 = 1.0;
    for &(x, y) in pairs {
        let (ux, uy) = (u.u(x)?, u.u(y)?);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for &a in ux.iter() {
            for &b in uy.iter() {
                let g = u.gk.gamma(&u.points[a], &u.points[b])?;
                lo = lo.min(g);
                hi = hi.max(g);
            }
        }
        worst = worst.max(hi / lo);
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct EtaReport {
    pub pass: bool,
    pub eta: f64,
    pub measured: f64,
    pub worst_x: Option<Vec<i64>>,
    pub off_support: Option<(Vec<i64>, Vec<i64>)>,
}

/// `A(x, U(x)) <= η` and `A(x, y) = 0` for `y ∉ U(x)`, for nonnegative `A`.
pub fn eta_smoothing_check(a: &SignedKernel, u: &NeighborhoodSystem, eta: f64) -> Result<EtaReport> {
    let mut rep = EtaReport { pass: true, eta, measured: 0.0, worst_x: None, off_support: None };
    for x in u.domain_indices() {
        let ux = u.u(x)?;
        let mut mass = 0.0;
        for &(y, w) in &a.rows[x] {
            if w == 0.0 {
                continue;
            }
            if ux.binary_search(&y).is_ok() {
                mass += w;
            } else if rep.off_support.is_none() {
                rep.off_support =
                    Some((u.points[x].coords().to_vec(), u.points[y].coords().to_vec()));
            }
        }
        if mass > rep.measured {
            rep.measured = mass;
            rep.worst_x = Some(u.points[x].coords().to_vec());
        }
    }
    rep.pass = rep.off_support.is_none() && rep.measured <= eta;
    Ok(rep)
}

/// `|K_1 - K_2|` restricted to rows in `V_{L+r}`, as an operator on the same index set.
pub fn abs_difference(k1: &SparseKernel, k2: &SparseKernel) -> Result<SignedKernel> {
    k1.check_same_index(k2)?;
    let n = k1.len();
    let mut out = SignedKernel::zero(n);
    for i in 0..n {
        let mut acc: FxHashMap<usize, f64> = FxHashMap::default();
        for &(j, w) in k1.row(i) {
            *acc.entry(j as usize).or_insert(0.0) += w;
        }
        for &(j, w) in k2.row(i) {
            *acc.entry(j as usize).or_insert(0.0) -= w;
        }
        let mut row: Vec<(usize, f64)> =
            acc.into_iter().filter(|e| e.1.abs() >= TRUNCATE).map(|(j, w)| (j, w.abs())).collect();
        row.sort_by_key(|e| e.0);
        out.rows[i] = row;
    }
    Ok(out)
}

/// Smallest `c` with `(F A)(x, U(y)) <= c·η·Γ(x, U(y))` over the given pairs.
pub fn concatenation_constant(
    mut f_row: impl FnMut(usize) -> Result<Vec<f64>>,
    a: &SignedKernel,
    eta: f64,
    u: &NeighborhoodSystem,
    pairs: &[(usize, Vec<usize>)],
) -> Result<PreceqReport> {
    let n = a.n;
    preceq_check(
        |x| {
            let fr = f_row(x)?;
            let mut out = vec![0.0; n];
            for (w, &fw) in fr.iter().enumerate() {
                if fw == 0.0 {
                    continue;
                }
                for &(k, v) in &a.rows[w] {
                    out[k] += fw * v;
                }
            }
            Ok(out)
        },
        |x| Ok(u.gamma_row(x).into_iter().map(|g| eta * g).collect()),
        u,
        pairs,
    )
}

/// Kernel of a homogeneous walk as a `SignedKernel`, convenient for `R`.
pub fn homogeneous_step(p: &SymmetricKernel, dom: &Domain) -> SignedKernel {
    one_step(p, dom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exitsolver::DEFAULT_TOL;
    use crate::kernelspace::{Environment, EnvironmentSpec, Family};
    use proptest::prelude::*;

    fn setup(eps: f64, radius: f64) -> (Domain, Array2<f64>, Array2<f64>, SignedKernel, SignedKernel) {
        let env = Environment::new(EnvironmentSpec::new(3, eps, Family::AxisTilt, 5).unwrap()).unwrap();
        let p = SymmetricKernel::srw(3);
        let dom = Domain::ball(&LatticePoint::origin(3), radius).unwrap();
        let gb = green_matrix(&env, &dom, 1e-14).unwrap();
        let g = green_matrix(&p, &dom, 1e-14).unwrap();
        let delta = kernel_difference(&env, &p, &dom);
        let step = homogeneous_step(&p, &dom);
        (dom, gb, g, delta, step)
    }

    #[test]
    fn zero_perturbation() {
        let (_, gb, g, delta, step) = setup(0.0, 3.0);
        assert!(delta.is_zero());
        let r = resolvent_check(&gb, &g, &delta).unwrap();
        assert_eq!((r.left, r.right), (0.0, 0.0));
        let e = expansion_partial_sum(&g, &delta, 0).unwrap();
        assert_eq!(max_abs(&e.sum), 0.0);
        assert_eq!(expansion_reordered(&g, &delta, &step, 3, 3).unwrap(), g);
    }

    #[test]
    fn singleton_domain() {
        let env = Environment::new(EnvironmentSpec::new(3, 0.1, Family::AxisTilt, 2).unwrap()).unwrap();
        let p = SymmetricKernel::srw(3);
        let dom = Domain::new(vec![LatticePoint::origin(3)]).unwrap();
        let gb = green_matrix(&env, &dom, DEFAULT_TOL).unwrap();
        let g = green_matrix(&p, &dom, DEFAULT_TOL).unwrap();
        let delta = kernel_difference(&env, &p, &dom);
        let diff = &gb - &g;
        let rhs = g.dot(&delta.times_dense(&gb));
        assert_eq!(diff[[0, 0]], 0.0);
        assert_eq!(rhs[[0, 0]], 0.0);
        assert!(resolvent_check(&gb, &g, &delta).unwrap().left < 1e-15);
    }

    #[test]
    fn delta_rows_sum_to_zero() {
        let (_, _, _, delta, _) = setup(0.05, 4.0);
        assert!(delta.max_row_sum_defect() <= 1e-12);
    }

    #[test]
    fn resolvent_and_series_on_small_ball() {
        let (_, gb, g, delta, step) = setup(0.05, 3.0);
        let r = resolvent_check(&gb, &g, &delta).unwrap();
        assert!(r.left <= 1e-10 && r.right <= 1e-10, "{r:?}");
        let e = expansion_partial_sum(&g, &delta, 40).unwrap();
        assert!(op_norm(&(&(&gb - &g) - &e.sum)) <= 1e-8);
        let first = g.dot(&delta.times_dense(&g));
        let gd = g.dot(&delta.to_dense());
        let bound = op_norm(&gd).powi(2) * op_norm(&gb);
        assert!(op_norm(&(&(&gb - &g) - &first)) <= bound);
        let re = expansion_reordered(&g, &delta, &step, 20, 20).unwrap();
        assert!(op_norm(&(&re - &gb)) <= 1e-8);
    }

    #[test]
    fn divergence_is_detected() {
        let dom = Domain::ball(&LatticePoint::origin(3), 2.0).unwrap();
        let g = green_matrix(&SymmetricKernel::srw(3), &dom, DEFAULT_TOL).unwrap();
        let n = g.nrows();
        let mut delta = SignedKernel::zero(n);
        for i in 0..dom.len() {
            delta.rows[i] = vec![(i, 2.0)];
        }
        assert!(matches!(expansion_partial_sum(&g, &delta, 30), Err(Error::Divergence { .. })));
    }

    #[test]
    fn gamma_fixture_deep_interior() {
        let l: f64 = 4096.0;
        let s_l = l / l.ln().powi(3);
        let gk = GammaKernel::new(l, 4.0, s_l, 3).unwrap();
        let o = LatticePoint::origin(3);
        let v = gk.gamma(&o, &o).unwrap();
        let dt = gk.dtilde(&o);
        assert_eq!(gk.a(&o), s_l);
        let closed = s_l.powi(-3) * ((dt / s_l).powi(2)).min(1.0);
        assert!((v - closed).abs() <= 1e-15 * closed);
        assert!((v - 2.773_195_711_512_777_5e-3).abs() < 1e-15, "{v}");
    }

    #[test]
    fn lipschitz_constants_are_at_most_one_half() {
        let gk = GammaKernel::new(12.0, 1.0, 3.0, 3).unwrap();
        let rep = lipschitz_check(&gk).unwrap();
        assert!(rep.dtilde <= 0.5 + 1e-12 && rep.a <= 0.5 + 1e-12, "{rep:?}");
        assert!(rep.dtilde > 0.49);
    }

    #[test]
    fn gamma_is_positive_and_u_contains_x() {
        let gk = GammaKernel::new(12.0, 1.0, 3.0, 3).unwrap();
        let pts = ball_points(&LatticePoint::origin(3), 13.0).unwrap();
        for x in pts.iter().step_by(97) {
            let u = gk.neighborhood(x).unwrap();
            assert!(u.contains(x));
            for y in pts.iter().step_by(131) {
                assert!(gk.gamma(x, y).unwrap() > 0.0);
            }
        }
        assert!(gk.gamma(&LatticePoint::new(&[14, 0, 0]), &LatticePoint::origin(3)).is_err());
    }

    #[test]
    fn preceq_identity_and_eta_checks() {
        let gk = GammaKernel::new(4.0, 1.0, 1.0, 3).unwrap();
        let pts = ball_points(&LatticePoint::origin(3), 5.0).unwrap();
        let u = NeighborhoodSystem::new(gk, &pts);
        let dom = u.domain_indices();
        let pairs = sample_pairs(&dom, 10, 1);
        let rep = preceq_check(|x| Ok(u.gamma_row(x)), |x| Ok(u.gamma_row(x)), &u, &pairs).unwrap();
        assert!((rep.constant - 1.0).abs() < 1e-12);
        let zero = SignedKernel::zero(pts.len());
        assert!(eta_smoothing_check(&zero, &u, 0.0).unwrap().pass);
        let mut a = SignedKernel::zero(pts.len());
        a.rows[0] = vec![(pts.len() - 1, 0.1)];
        let r = eta_smoothing_check(&a, &u, 1.0).unwrap();
        assert!(!r.pass && r.off_support.is_some());
    }

    proptest! {
        #[test]
        fn a_satisfies_the_growth_inequality(x in proptest::collection::vec(-25i64..25, 3),
                                             y in proptest::collection::vec(-25i64..25, 3)) {
            let gk = GammaKernel::new(24.0, 1.0, 6.0, 3).unwrap();
            let (x, y) = (LatticePoint::new(&x), LatticePoint::new(&y));
            prop_assume!(gk.contains(&x) && gk.contains(&y));
            let dist = x.dist(&y);
            prop_assert!((gk.dtilde(&x) - gk.dtilde(&y)).abs() <= dist / 2.0 + 1e-12);
            prop_assert!(gk.a(&y) + dist <= gk.a(&x) + 1.5 * dist + 1e-12);
        }
    }
}
