//! Exact exit measures, Green's functions and exit times on finite domains, and
//! a Monte Carlo path engine.

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{domain, Result};
use crate::kernelspace::KernelField;
use crate::lattice::{ball_points, outer_boundary, LatticePoint};
use crate::linsolve::{bicgstab, DEFAULT_MAX_ITER};
use crate::measure::Measure;
use crate::rng;

pub const DEFAULT_TOL: f64 = 1e-12;
const OUT: u32 = 1 << 31;

/// A finite domain `V` with its outer boundary and nearest-neighbour table.
#[derive(Clone, Debug)]
pub struct Domain {
    d: usize,
    points: Vec<LatticePoint>,
    boundary: Vec<LatticePoint>,
    index: FxHashMap<LatticePoint, u32>,
    /// `nbr[2d*i + k]` is an interior index, or a boundary index tagged with `OUT`.
    nbr: Vec<u32>,
}

impl Domain {
    pub fn new(mut points: Vec<LatticePoint>) -> Result<Self> {
        points.sort();
        points.dedup();
        let d = match points.first() {
            Some(p) => p.dim(),
            None => return domain("domain must be nonempty"),
        };
        let index: FxHashMap<LatticePoint, u32> =
            points.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        let boundary = outer_boundary(&points);
        let bindex: FxHashMap<&LatticePoint, u32> =
            boundary.iter().enumerate().map(|(i, p)| (p, i as u32)).collect();
        let mut nbr = Vec::with_capacity(points.len() * 2 * d);
        for p in &points {
            for dir in 0..2 * d {
                let y = p.step(dir);
                nbr.push(match index.get(&y) {
                    Some(&j) => j,
                    None => bindex[&y] | OUT,
                });
            }
        }
        Ok(Domain { d, points, boundary, index, nbr })
    }

    pub fn ball(center: &LatticePoint, radius: f64) -> Result<Self> {
        Self::new(ball_points(center, radius)?)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }

    pub fn boundary(&self) -> &[LatticePoint] {
        &self.boundary
    }

    pub fn index_of(&self, p: &LatticePoint) -> Option<usize> {
        self.index.get(p).map(|&i| i as usize)
    }

    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.index.contains_key(p)
    }
}

/// Transition weights of a kernel field laid over a domain translated by `shift`.
pub struct ExitProblem<'a> {
    dom: &'a Domain,
    w: Vec<f64>,
}

impl<'a> ExitProblem<'a> {
    pub fn new<F: KernelField + ?Sized>(dom: &'a Domain, field: &F, shift: &[i64]) -> Self {
        let d2 = 2 * dom.d;
        let mut w = vec![0.0; dom.len() * d2];
        let mut buf: smallvec::SmallVec<[i64; 4]> = smallvec::SmallVec::from_slice(shift);
        if field.is_homogeneous() {
            let mut row = vec![0.0; d2];
            field.weights_at(&buf, &mut row);
            for chunk in w.chunks_mut(d2) {
                chunk.copy_from_slice(&row);
            }
        } else {
            for (i, p) in dom.points.iter().enumerate() {
                for k in 0..dom.d {
                    buf[k] = p.0[k] + shift[k];
                }
                field.weights_at(&buf, &mut w[i * d2..(i + 1) * d2]);
            }
        }
        ExitProblem { dom, w }
    }

    pub fn domain(&self) -> &Domain {
        self.dom
    }

    /// `out = v - Q^T v` with `Q` the kernel restricted to `V`.
    fn apply_green(&self, v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
        let d2 = 2 * self.dom.d;
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for k in 0..d2 {
                let j = self.dom.nbr[i * d2 + k];
                if j & OUT == 0 {
                    out[j as usize] -= vi * self.w[i * d2 + k];
                }
            }
        }
    }

    /// `out = v - Q v`.
    fn apply_harmonic(&self, v: &[f64], out: &mut [f64]) {
        let d2 = 2 * self.dom.d;
        for i in 0..v.len() {
            let mut acc = v[i];
            for k in 0..d2 {
                let j = self.dom.nbr[i * d2 + k];
                if j & OUT == 0 {
                    acc -= self.w[i * d2 + k] * v[j as usize];
                }
            }
            out[i] = acc;
        }
    }

    /// Row `g_V(x, ·)` solving `g = δ_x + g (1_V p)`.
    pub fn green_row(&self, src: usize, tol: f64) -> Result<Vec<f64>> {
        let mut b = vec![0.0; self.dom.len()];
        b[src] = 1.0;
        let (g, _) = bicgstab(|v, o| self.apply_green(v, o), &b, tol, DEFAULT_MAX_ITER)?;
        Ok(g)
    }

    /// `ex(z) = Σ_y g(y) p(y, z)` over the boundary.
    pub fn exit_from_green(&self, g: &[f64]) -> Vec<f64> {
        let d2 = 2 * self.dom.d;
        let mut ex = vec![0.0; self.dom.boundary.len()];
        for (i, &gi) in g.iter().enumerate() {
            for k in 0..d2 {
                let j = self.dom.nbr[i * d2 + k];
                if j & OUT != 0 {
                    ex[(j & !OUT) as usize] += gi * self.w[i * d2 + k];
                }
            }
        }
        ex
    }

    /// Solves `u = Q u + b` where `b(x) = Σ_e p(x,e) f(x+e)` collects boundary values `f`.
    pub fn harmonic(&self, boundary_values: &[f64], tol: f64) -> Result<Vec<f64>> {
        let d2 = 2 * self.dom.d;
        let mut b = vec![0.0; self.dom.len()];
        for (i, bi) in b.iter_mut().enumerate() {
            for k in 0..d2 {
                let j = self.dom.nbr[i * d2 + k];
                if j & OUT != 0 {
                    *bi += self.w[i * d2 + k] * boundary_values[(j & !OUT) as usize];
                }
            }
        }
        let (u, _) = bicgstab(|v, o| self.apply_harmonic(v, o), &b, tol, DEFAULT_MAX_ITER)?;
        Ok(u)
    }

    /// Exit measure from local index `src` with points translated by `shift`.
    pub fn exit_measure(&self, src: usize, shift: &LatticePoint, tol: f64) -> Result<Measure> {
        let g = self.green_row(src, tol)?;
        let ex = self.exit_from_green(&g);
        Ok(Measure::from_sorted(
            self.dom
                .boundary
                .iter()
                .zip(ex)
                .filter(|(_, w)| *w != 0.0)
                .map(|(z, w)| (z.add(shift), w))
                .collect(),
        ))
    }
}

#[derive(Clone, Debug)]
pub struct GreenRow {
    pub source: LatticePoint,
    pub values: Measure,
}

fn locate(dom: &Domain, x: &LatticePoint) -> Result<usize> {
    dom.index_of(x).ok_or_else(|| crate::error::Error::Domain(format!("{x:?} is not in the domain")))
}

pub fn green_row<F: KernelField + ?Sized>(
    field: &F,
    dom: &Domain,
    x: &LatticePoint,
    tol: f64,
) -> Result<GreenRow> {
    let src = locate(dom, x)?;
    let prob = ExitProblem::new(dom, field, &vec![0; dom.d]);
    let g = prob.green_row(src, tol)?;
    Ok(GreenRow {
        source: x.clone(),
        values: Measure::from_sorted(dom.points.iter().cloned().zip(g).collect()),
    })
}

pub fn exit_measure_exact<F: KernelField + ?Sized>(
    field: &F,
    dom: &Domain,
    x: &LatticePoint,
    tol: f64,
) -> Result<Measure> {
    let src = locate(dom, x)?;
    let prob = ExitProblem::new(dom, field, &vec![0; dom.d]);
    prob.exit_measure(src, &LatticePoint::origin(dom.d), tol)
}

pub fn expected_exit_time<F: KernelField + ?Sized>(
    field: &F,
    dom: &Domain,
    x: &LatticePoint,
    tol: f64,
) -> Result<f64> {
    Ok(green_row(field, dom, x, tol)?.values.total())
}

/// `v_i = ½ Σ_z exit(z) (z_i / L)^2`.
pub fn variance_profile(exit: &Measure, radius: f64) -> Result<Vec<f64>> {
    let mass = exit.total();
    if exit.is_empty() || mass <= 0.0 {
        return domain("variance profile of a zero-mass measure");
    }
    let d = exit.entries()[0].0.dim();
    let mut v = vec![0.0; d];
    for (z, w) in exit.entries() {
        for i in 0..d {
            let c = z.0[i] as f64 / radius;
            v[i] += 0.5 * w * c * c;
        }
    }
    Ok(v)
}

/// Same average with `z_i^2 / |z|^2` in place of `(z_i / L)^2`.
pub fn direction_profile(exit: &Measure) -> Result<Vec<f64>> {
    if exit.is_empty() || exit.total() <= 0.0 {
        return domain("direction profile of a zero-mass measure");
    }
    let d = exit.entries()[0].0.dim();
    let mut v = vec![0.0; d];
    for (z, w) in exit.entries() {
        let n = z.norm_sq() as f64;
        if n == 0.0 {
            continue;
        }
        for i in 0..d {
            v[i] += 0.5 * w * (z.0[i] * z.0[i]) as f64 / n;
        }
    }
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct McExit {
    pub dist: Measure,
    pub stderr: Vec<f64>,
    pub n_paths: u64,
    pub censored: u64,
    pub warning: Option<String>,
}

const MC_CHUNK: u64 = 4096;

/// Monte Carlo exit law from `V_radius(center)` started at `x`.
pub fn mc_exit<F: KernelField + ?Sized>(
    field: &F,
    center: &LatticePoint,
    radius: f64,
    x: &LatticePoint,
    n_paths: u64,
    seed: u64,
) -> Result<McExit> {
    if n_paths == 0 {
        return domain("n_paths must be at least 1");
    }
    let dom = Domain::ball(center, radius)?;
    let src = locate(&dom, x)?;
    let prob = ExitProblem::new(&dom, field, &vec![0; dom.d]);
    let d2 = 2 * dom.d;
    let cum: Vec<f64> = prob
        .w
        .chunks(d2)
        .flat_map(|row| {
            let mut c = 0.0;
            row.iter()
                .map(|w| {
                    c += w;
                    c
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let cap = (64.0 * radius.max(1.0) * radius.max(1.0)).ceil() as u64;
    let n_chunks = n_paths.div_ceil(MC_CHUNK);
    let nb = dom.boundary.len();
    let partial: Vec<(Vec<u64>, u64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut counts = vec![0u64; nb];
            let mut censored = 0;
            for path in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(n_paths) {
                let mut s = rng::path_stream(rng::key(seed, rng::TAG_PATH, &[path as i64]));
                let mut i = src;
                let mut steps = 0;
                loop {
                    if steps == cap {
                        censored += 1;
                        break;
                    }
                    steps += 1;
                    let u = rng::unit(&mut s);
                    let row = &cum[i * d2..(i + 1) * d2];
                    let k = row.iter().position(|&c| u < c).unwrap_or(d2 - 1);
                    let j = dom.nbr[i * d2 + k];
                    if j & OUT != 0 {
                        counts[(j & !OUT) as usize] += 1;
                        break;
                    }
                    i = j as usize;
                }
            }
            (counts, censored)
        })
        .collect();
    let mut counts = vec![0u64; nb];
    let mut censored = 0;
    for (c, k) in partial {
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
        censored += k;
    }
    let n = n_paths as f64;
    let mut entries = Vec::new();
    let mut stderr = Vec::new();
    for (z, c) in dom.boundary.iter().zip(counts) {
        if c > 0 {
            let w = c as f64 / n;
            entries.push((z.clone(), w));
            stderr.push((w * (1.0 - w) / n).sqrt());
        }
    }
    let warning = (censored as f64 > 0.01 * n)
        .then(|| format!("{censored} of {n_paths} paths censored at {cap} steps"));
    Ok(McExit { dist: Measure::from_sorted(entries), stderr, n_paths, censored, warning })
}
