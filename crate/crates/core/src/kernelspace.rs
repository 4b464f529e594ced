//! Nearest-neighbour transition kernels, the environment law and its lazily
//! realized environments.
//!
//! Directions are indexed so that `2i` is `+e_i` and `2i+1` is `-e_i`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{domain, Error, Result};
use crate::lattice::{ball_points, LatticePoint};
use crate::rng;

pub type Weights = SmallVec<[f64; 8]>;

/// A (possibly inhomogeneous) assignment of nearest-neighbour kernels to sites.
pub trait KernelField: Sync {
    fn dim(&self) -> usize;
    /// Writes the `2d` transition weights at `x` into `out`.
    fn weights_at(&self, x: &[i64], out: &mut [f64]);
    fn is_homogeneous(&self) -> bool {
        false
    }
}

fn check_probability(w: &[f64]) -> Result<()> {
    if w.is_empty() || w.len() % 2 != 0 {
        return domain(format!("kernel needs 2d weights, got {}", w.len()));
    }
    if w.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return domain(format!("kernel weights must lie in [0,1]: {w:?}"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-15 * w.len() as f64 {
        return domain(format!("kernel weights sum to {s}"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralKernel {
    pub weights: Weights,
}

impl GeneralKernel {
    pub fn new(weights: &[f64]) -> Result<Self> {
        check_probability(weights)?;
        Ok(GeneralKernel { weights: SmallVec::from_slice(weights) })
    }

    pub fn dim(&self) -> usize {
        self.weights.len() / 2
    }

    /// Membership in `P_ε`: every weight within `ε` of `1/(2d)`.
    pub fn in_p_eps(&self, eps: f64) -> bool {
        let c = 1.0 / self.weights.len() as f64;
        self.weights.iter().all(|w| (w - c).abs() <= eps + 1e-15)
    }
}

impl KernelField for GeneralKernel {
    fn dim(&self) -> usize {
        self.dim()
    }
    fn weights_at(&self, _x: &[i64], out: &mut [f64]) {
        out.copy_from_slice(&self.weights);
    }
    fn is_homogeneous(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricKernel {
    weights: Weights,
}

impl SymmetricKernel {
    /// From the axis weights `p(e_i) = p(-e_i)`, which must sum to 1/2.
    pub fn from_axis(axis: &[f64]) -> Result<Self> {
        let w: Weights = axis.iter().flat_map(|&a| [a, a]).collect();
        check_probability(&w)?;
        Ok(SymmetricKernel { weights: w })
    }

    pub fn from_weights(w: &[f64]) -> Result<Self> {
        check_probability(w)?;
        if w.chunks(2).any(|c| c[0] != c[1]) {
            return domain(format!("kernel is not symmetric: {w:?}"));
        }
        Ok(SymmetricKernel { weights: SmallVec::from_slice(w) })
    }

    /// `p_o(±e_i) = 1/(2d)`.
    pub fn srw(d: usize) -> Self {
        SymmetricKernel { weights: SmallVec::from_elem(1.0 / (2 * d) as f64, 2 * d) }
    }

    pub fn dim(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `p(e_i)`, axes counted from 0.
    pub fn axis_weight(&self, i: usize) -> f64 {
        self.weights[2 * i]
    }

    pub fn axis_weights(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.axis_weight(i)).collect()
    }

    pub fn in_p_kappa(&self, kappa: f64) -> bool {
        let c = 1.0 / self.weights.len() as f64;
        self.weights.iter().all(|w| (w - c).abs() <= kappa + 1e-15)
    }

    /// `Λ_p = diag(2d p(e_i))`.
    pub fn covariance(&self) -> CovarianceMatrix {
        let d2 = self.weights.len() as f64;
        CovarianceMatrix { diag: (0..self.dim()).map(|i| d2 * self.axis_weight(i)).collect() }
    }

    pub fn as_general(&self) -> GeneralKernel {
        GeneralKernel { weights: self.weights.clone() }
    }
}

impl KernelField for SymmetricKernel {
    fn dim(&self) -> usize {
        self.dim()
    }
    fn weights_at(&self, _x: &[i64], out: &mut [f64]) {
        out.copy_from_slice(&self.weights);
    }
    fn is_homogeneous(&self) -> bool {
        true
    }
}

pub fn kernel_l1_distance(p: &SymmetricKernel, q: &SymmetricKernel) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(p.dim(), q.dim()));
    }
    Ok(p.weights.iter().zip(&q.weights).map(|(a, b)| (a - b).abs()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceMatrix {
    pub diag: Vec<f64>,
}

impl CovarianceMatrix {
    pub fn det(&self) -> f64 {
        self.diag.iter().product()
    }

    /// `|Λ^{-1/2} x|`.
    pub fn j_norm(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.diag).map(|(v, l)| v * v / l).sum::<f64>().sqrt()
    }
}

pub fn reflect(x: &LatticePoint, axis: usize) -> Result<LatticePoint> {
    if axis >= x.dim() {
        return domain(format!("axis {axis} out of range for dimension {}", x.dim()));
    }
    Ok(x.reflect(axis))
}

/// `ι = (log L_0)^{-7}`.
pub fn iota(l0: f64) -> Result<f64> {
    if !(l0 > 1.0) {
        return domain(format!("L_0 must exceed 1, got {l0}"));
    }
    Ok(l0.ln().powi(-7))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Srw,
    AxisTilt,
    GeneralA1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub d: usize,
    pub epsilon: f64,
    pub family: Family,
    pub master_seed: u64,
}

impl EnvironmentSpec {
    pub fn new(d: usize, epsilon: f64, family: Family, master_seed: u64) -> Result<Self> {
        let s = EnvironmentSpec { d, epsilon, family, master_seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return domain("dimension must be at least 1");
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0 / (2 * self.d) as f64) {
            return domain(format!(
                "epsilon must lie in [0, 1/(2d)) = [0, {}), got {}",
                1.0 / (2 * self.d) as f64,
                self.epsilon
            ));
        }
        Ok(())
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.d, epsilon, self.family, self.master_seed)
    }

    /// The `k`-th member of an ensemble drawn from this law.
    pub fn member(&self, k: u64) -> Self {
        EnvironmentSpec {
            master_seed: rng::key(self.master_seed, rng::TAG_MEMBER, &[k as i64]),
            ..self.clone()
        }
    }

    /// Site kernel at `x`; a pure function of `(master_seed, x)`.
    ///
    /// The random draws do not depend on `ε`, so environments at different `ε`
    /// share their randomness.
    pub fn kernel_into(&self, x: &[i64], out: &mut [f64]) {
        let d = self.d;
        let base = 1.0 / (2 * d) as f64;
        if self.family == Family::Srw || self.epsilon == 0.0 {
            out.fill(base);
            return;
        }
        let mut s = rng::site_stream(rng::key(self.master_seed, rng::TAG_SITE, x));
        let profile_draw = rng::unit(&mut s);
        for i in 0..d {
            let u = rng::unit(&mut s);
            let sign = if rng::unit(&mut s) < 0.5 { 1.0 } else { -1.0 };
            let (a, delta) = match self.family {
                Family::AxisTilt => (0.0, self.epsilon * u),
                _ => {
                    let shape = if d > 1 { 2.0 * i as f64 / (d - 1) as f64 - 1.0 } else { 0.0 };
                    (0.5 * self.epsilon * shape * profile_draw, 0.5 * self.epsilon * u)
                }
            };
            out[2 * i] = base + a + sign * delta;
            out[2 * i + 1] = base + a - sign * delta;
        }
    }
}

/// A realized environment, optionally with hand-planted site kernels.
#[derive(Clone, Debug)]
pub struct Environment {
    pub spec: EnvironmentSpec,
    overrides: BTreeMap<LatticePoint, GeneralKernel>,
}

impl Environment {
    pub fn new(spec: EnvironmentSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Environment { spec, overrides: BTreeMap::new() })
    }

    /// Replaces the kernel at `x`; planted kernels need not lie in `P_ε`.
    pub fn plant(&mut self, x: LatticePoint, k: GeneralKernel) -> Result<()> {
        if x.dim() != self.spec.d || k.dim() != self.spec.d {
            return Err(Error::DimensionMismatch(x.dim(), self.spec.d));
        }
        self.overrides.insert(x, k);
        Ok(())
    }

    pub fn planted(&self) -> impl Iterator<Item = &LatticePoint> {
        self.overrides.keys()
    }

    pub fn env_at(&self, x: &LatticePoint) -> GeneralKernel {
        let mut w: Weights = SmallVec::from_elem(0.0, 2 * self.spec.d);
        self.weights_at(x.coords(), &mut w);
        GeneralKernel { weights: w }
    }

    /// Text export `x_1 .. x_d w_{+1} w_{-1} .. w_{+d} w_{-d}` over `V_radius`.
    pub fn export_box<W: Write>(&self, mut w: W, radius: f64) -> Result<()> {
        for x in ball_points(&LatticePoint::origin(self.spec.d), radius)? {
            let k = self.env_at(&x);
            let mut fields: Vec<String> = x.coords().iter().map(|c| c.to_string()).collect();
            fields.extend(k.weights.iter().map(|v| format!("{v:.16e}")));
            writeln!(w, "{}", fields.join(" "))?;
        }
        Ok(())
    }
}

impl KernelField for Environment {
    fn dim(&self) -> usize {
        self.spec.d
    }
    fn weights_at(&self, x: &[i64], out: &mut [f64]) {
        if !self.overrides.is_empty() {
            if let Some(k) = self.overrides.get(&LatticePoint::new(x)) {
                out.copy_from_slice(&k.weights);
                return;
            }
        }
        self.spec.kernel_into(x, out);
    }
}
