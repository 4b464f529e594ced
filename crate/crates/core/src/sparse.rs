//! Row-sparse kernels on a finite index set of lattice points, with Green's
//! functions and exit measures of the chain killed on leaving a masked subset.

use std::io::Write;

use rustc_hash::FxHashMap;

use crate::error::{domain, Error, Result};
use crate::lattice::LatticePoint;
use crate::linsolve::{bicgstab, DEFAULT_MAX_ITER};
use crate::measure::{fmt_f64, Measure};

#[derive(Clone, Debug)]
pub struct SparseKernel {
    points: Vec<LatticePoint>,
    index: FxHashMap<LatticePoint, u32>,
    rows: Vec<Vec<(u32, f64)>>,
    /// Default killing region (`V_L` for ball operators).
    inside: Vec<bool>,
}

struct Local {
    of_global: Vec<u32>,
    global: Vec<usize>,
}

const NONE: u32 = u32::MAX;

impl SparseKernel {
    /// Index set sorted lexicographically; every row starts as a point mass.
    pub fn identity(mut points: Vec<LatticePoint>, inside: impl Fn(&LatticePoint) -> bool) -> Self {
        points.sort();
        points.dedup();
        let index = points.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        let rows = (0..points.len()).map(|i| vec![(i as u32, 1.0)]).collect();
        let inside = points.iter().map(inside).collect();
        SparseKernel { points, index, rows, inside }
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

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn index_of(&self, p: &LatticePoint) -> Option<usize> {
        self.index.get(p).map(|&i| i as usize)
    }

    fn locate(&self, p: &LatticePoint) -> Result<usize> {
        self.index_of(p).ok_or_else(|| Error::Domain(format!("{p:?} is not in the index set")))
    }

    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    pub fn row_measure(&self, i: usize) -> Measure {
        Measure::from_pairs(self.rows[i].iter().map(|&(j, w)| (self.points[j as usize].clone(), w)))
    }

    /// Replaces row `i` by a measure supported in the index set.
    pub fn set_row(&mut self, i: usize, row: &Measure) -> Result<()> {
        let mut r = Vec::with_capacity(row.len());
        for (p, w) in row.entries() {
            r.push((self.locate(p)? as u32, *w));
        }
        r.sort_by_key(|e| e.0);
        self.rows[i] = r;
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    fn local(&self, mask: &[bool]) -> Local {
        let mut of_global = vec![NONE; self.len()];
        let mut global = Vec::new();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                of_global[i] = global.len() as u32;
                global.push(i);
            }
        }
        Local { of_global, global }
    }

    /// Green's row `Σ_k (1_A K)^k (x, ·)` over the whole index set, `A = mask`.
    pub fn green_row_masked(&self, x: usize, mask: &[bool], tol: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        if !mask[x] {
            out[x] = 1.0;
            return Ok(out);
        }
        let loc = self.local(mask);
        let n = loc.global.len();
        let mut b = vec![0.0; n];
        b[loc.of_global[x] as usize] = 1.0;
        let apply = |v: &[f64], o: &mut [f64]| {
            o.copy_from_slice(v);
            for (li, &gi) in loc.global.iter().enumerate() {
                let vi = v[li];
                if vi == 0.0 {
                    continue;
                }
                for &(j, w) in &self.rows[gi] {
                    let lj = loc.of_global[j as usize];
                    if lj != NONE {
                        o[lj as usize] -= vi * w;
                    }
                }
            }
        };
        let (g, _) = bicgstab(apply, &b, tol, DEFAULT_MAX_ITER)?;
        for (li, &gi) in loc.global.iter().enumerate() {
            out[gi] = g[li];
        }
        // one step out of A
        for (li, &gi) in loc.global.iter().enumerate() {
            for &(j, w) in &self.rows[gi] {
                if loc.of_global[j as usize] == NONE {
                    out[j as usize] += g[li] * w;
                }
            }
        }
        Ok(out)
    }

    /// Green's row restricted to the masked set (visits before leaving it).
    pub fn green_row(&self, x: usize, mask: &[bool], tol: f64) -> Result<Vec<f64>> {
        let mut g = self.green_row_masked(x, mask, tol)?;
        if mask[x] {
            for (i, v) in g.iter_mut().enumerate() {
                if !mask[i] {
                    *v = 0.0;
                }
            }
        }
        Ok(g)
    }

    /// Exit measure `ex_A(x, ·; K)` for the chain killed on leaving `A = mask`.
    pub fn exit_measure_masked(&self, x: usize, mask: &[bool], tol: f64) -> Result<Measure> {
        if !mask[x] {
            return Ok(Measure::delta(self.points[x].clone()));
        }
        let g = self.green_row_masked(x, mask, tol)?;
        Ok(Measure::from_sorted(
            g.iter()
                .enumerate()
                .filter(|&(i, &v)| !mask[i] && v != 0.0)
                .map(|(i, &v)| (self.points[i].clone(), v))
                .collect(),
        ))
    }

    pub fn exit_measure(&self, x: &LatticePoint, tol: f64) -> Result<Measure> {
        let i = self.locate(x)?;
        self.exit_measure_masked(i, &self.inside, tol)
    }

    /// `u(x) = Σ_{y ∈ T} G_A(x, y)` for every `x`, with `G_A(x,·) = δ_x` off `A`.
    pub fn green_to_set(&self, target: &[bool], mask: &[bool], tol: f64) -> Result<Vec<f64>> {
        let loc = self.local(mask);
        let n = loc.global.len();
        let b: Vec<f64> = loc.global.iter().map(|&g| if target[g] { 1.0 } else { 0.0 }).collect();
        let apply = |v: &[f64], o: &mut [f64]| {
            for (li, &gi) in loc.global.iter().enumerate() {
                let mut acc = v[li];
                for &(j, w) in &self.rows[gi] {
                    let lj = loc.of_global[j as usize];
                    if lj != NONE {
                        acc -= w * v[lj as usize];
                    }
                }
                o[li] = acc;
            }
        };
        let u = if n > 0 { bicgstab(apply, &b, tol, DEFAULT_MAX_ITER)?.0 } else { Vec::new() };
        let mut out: Vec<f64> = target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        for (li, &gi) in loc.global.iter().enumerate() {
            out[gi] = u[li];
        }
        Ok(out)
    }

    /// Triplets `x_id,y_id,weight` plus the id → point sidecar.
    pub fn write_triplets<W: Write, V: Write>(&self, mut ops: W, mut idx: V) -> Result<()> {
        writeln!(ops, "x_id,y_id,weight")?;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                writeln!(ops, "{i},{j},{}", fmt_f64(w))?;
            }
        }
        let d = self.points.first().map_or(0, LatticePoint::dim);
        let cols: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
        writeln!(idx, "id,{}", cols.join(","))?;
        for (i, p) in self.points.iter().enumerate() {
            let c: Vec<String> = p.coords().iter().map(|v| v.to_string()).collect();
            writeln!(idx, "{i},{}", c.join(","))?;
        }
        Ok(())
    }

    /// Largest `|Σ_y K(x,y) − 1|`.
    pub fn max_row_defect(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.iter().map(|e| e.1).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_same_index(&self, other: &SparseKernel) -> Result<()> {
        if self.points != other.points {
            return domain("operators live on different index sets");
        }
        Ok(())
    }
}
