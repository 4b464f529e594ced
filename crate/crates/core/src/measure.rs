//! Finite signed measures on Z^d stored as sorted sparse vectors.

use std::io::Write;

use rustc_hash::FxHashMap;

use crate::lattice::LatticePoint;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Measure {
    entries: Vec<(LatticePoint, f64)>,
}

/// Exit measures and coarse-grained rows.
pub type BoundaryDistribution = Measure;

impl Measure {
    pub fn new() -> Self {
        Measure::default()
    }

    pub fn delta(x: LatticePoint) -> Self {
        Measure { entries: vec![(x, 1.0)] }
    }

    /// Sums duplicate points and sorts.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (LatticePoint, f64)>) -> Self {
        let mut acc: FxHashMap<LatticePoint, f64> = FxHashMap::default();
        for (p, w) in pairs {
            *acc.entry(p).or_insert(0.0) += w;
        }
        let mut entries: Vec<_> = acc.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Measure { entries }
    }

    /// Pairs must already be sorted by point and free of duplicates.
    pub fn from_sorted(entries: Vec<(LatticePoint, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        Measure { entries }
    }

    pub fn entries(&self) -> &[(LatticePoint, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, p: &LatticePoint) -> f64 {
        self.entries
            .binary_search_by(|e| e.0.cmp(p))
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1.abs()).sum()
    }

    pub fn min_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, c: f64) -> Measure {
        Measure { entries: self.entries.iter().map(|(p, w)| (p.clone(), w * c)).collect() }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, other: &Measure, c: f64) -> Measure {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() || j < b.len() {
            let take_a = j == b.len() || (i < a.len() && a[i].0 < b[j].0);
            let take_b = i == a.len() || (j < b.len() && b[j].0 < a[i].0);
            if take_a {
                out.push(a[i].clone());
                i += 1;
            } else if take_b {
                out.push((b[j].0.clone(), c * b[j].1));
                j += 1;
            } else {
                out.push((a[i].0.clone(), a[i].1 + c * b[j].1));
                i += 1;
                j += 1;
            }
        }
        Measure { entries: out }
    }

    pub fn l1_distance(&self, other: &Measure) -> f64 {
        self.add_scaled(other, -1.0).l1_norm()
    }

    pub fn mass_where(&self, pred: impl Fn(&LatticePoint) -> bool) -> f64 {
        self.entries.iter().filter(|e| pred(&e.0)).map(|e| e.1).sum()
    }

    pub fn reflected(&self, axis: usize) -> Measure {
        Measure::from_pairs(self.entries.iter().map(|(p, w)| (p.reflect(axis), *w)))
    }

    /// Composition `self * K` where `row(y)` is the row of `K` at `y`.
    pub fn compose<E>(
        &self,
        mut row: impl FnMut(&LatticePoint) -> Result<Measure, E>,
    ) -> Result<Measure, E> {
        let mut acc: FxHashMap<LatticePoint, f64> = FxHashMap::default();
        for (y, w) in &self.entries {
            if *w == 0.0 {
                continue;
            }
            for (z, k) in row(y)?.entries {
                *acc.entry(z).or_insert(0.0) += w * k;
            }
        }
        let mut entries: Vec<_> = acc.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Measure { entries })
    }
}

/// Float formatting with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV `z_1..z_d,weight[,stderr]`.
pub fn write_measure_csv<W: Write>(
    mut w: W,
    d: usize,
    m: &Measure,
    stderr: Option<&[f64]>,
) -> std::io::Result<()> {
    let mut cols: Vec<String> = (1..=d).map(|i| format!("z_{i}")).collect();
    cols.push("weight".into());
    if stderr.is_some() {
        cols.push("stderr".into());
    }
    writeln!(w, "{}", cols.join(","))?;
    for (k, (p, v)) in m.entries().iter().enumerate() {
        let mut f: Vec<String> = p.coords().iter().map(|c| c.to_string()).collect();
        f.push(fmt_f64(*v));
        if let Some(se) = stderr {
            f.push(fmt_f64(se[k]));
        }
        writeln!(w, "{}", f.join(","))?;
    }
    Ok(())
}
