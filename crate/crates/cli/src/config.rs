//! Experiment configuration: one flat TOML table, every knob defaulted.

use std::path::Path;

use rwre_core::asymptotics::TransienceConfig;
use rwre_core::coarsegrain::{BallScheme, SchemeKind};
use rwre_core::kernelspace::{EnvironmentSpec, Family, SymmetricKernel};
use rwre_core::lattice::LatticePoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub d: usize,
    pub epsilon: f64,
    pub family: Family,
    pub master_seed: u64,
    /// Ball radius `L`.
    pub radius: f64,
    /// Radii for flow and trend runs.
    pub grid: Vec<f64>,
    /// Killing-layer width; the scheme default `r_L` when absent.
    pub r: Option<f64>,
    pub scheme: SchemeKind,
    /// Radius factor override for the ball scheme.
    pub factor: Option<f64>,
    pub delta: f64,
    /// Constant smoothing radius; `L/4` when absent.
    pub psi: Option<f64>,
    /// Axis weights of the reference kernel `q`; `p_o` when absent.
    pub q: Option<Vec<f64>>,
    /// Start point; the origin when absent.
    pub start: Option<Vec<i64>>,
    pub n_env: usize,
    pub n_paths: u64,
    pub tol: f64,
    /// Coarse-graining scale for the asymptotic checks.
    pub m: f64,
    pub n_steps: Vec<usize>,
    pub green_terms: usize,
    pub ld_n: usize,
    pub expansion_terms: usize,
    /// Inner annulus radius; the outer radius is four times larger.
    pub l_inner: f64,
    pub rho: f64,
    pub alpha: f64,
    pub scales: Vec<u32>,
    pub transience_threshold: f64,
    pub ruin_n: usize,
    pub l0: f64,
    pub per_octave: usize,
    pub k1: f64,
    pub quad_nodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            d: 3,
            epsilon: 0.05,
            family: Family::AxisTilt,
            master_seed: 1,
            radius: 8.0,
            grid: vec![8.0, 12.0, 16.0, 24.0],
            r: None,
            scheme: SchemeKind::Scaled,
            factor: None,
            delta: 0.25,
            psi: None,
            q: None,
            start: None,
            n_env: 8,
            n_paths: 10_000,
            tol: 1e-14,
            m: 4.0,
            n_steps: vec![8, 16, 32],
            green_terms: 128,
            ld_n: 10,
            expansion_terms: 50,
            l_inner: 4.0,
            rho: 3.0,
            alpha: 0.05,
            scales: vec![1, 2, 3],
            transience_threshold: 0.6,
            ruin_n: 30,
            l0: 2.0,
            per_octave: 4,
            k1: 6.0,
            quad_nodes: 1600,
        }
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Checks every knob against the preconditions of the modules that use it.
    pub fn validate(&self) -> Result<(), String> {
        self.env_spec()?;
        check(self.radius > 0.0 && self.radius.is_finite(), "radius must be positive")?;
        check(!self.grid.is_empty() && self.grid.iter().all(|&l| l > 0.0), "grid must hold positive radii")?;
        if let Some(r) = self.r {
            check(r > 0.0, "r must be positive")?;
        }
        if let Some(f) = self.factor {
            check(f > 0.0 && f.is_finite(), "factor must be positive")?;
        }
        self.ball_scheme(self.radius)?;
        check(self.delta > 0.0 && self.delta < 1.0, "delta must lie in (0, 1)")?;
        if let Some(p) = self.psi {
            check(p > 0.0, "psi must be positive")?;
        }
        self.q_kernel()?;
        self.start_point()?;
        check(self.n_env >= 1, "n_env must be at least 1")?;
        check(self.n_paths >= 2, "n_paths must be at least 2")?;
        check(self.tol > 0.0 && self.tol <= 1e-6, "tol must lie in (0, 1e-6]")?;
        check(self.m >= 1.0, "m must be at least 1")?;
        check(!self.n_steps.is_empty() && self.n_steps.iter().all(|&n| n >= 1), "n_steps must be positive")?;
        check(self.green_terms >= 1 && self.ld_n >= 1, "green_terms and ld_n must be positive")?;
        check(self.expansion_terms >= 1, "expansion_terms must be positive")?;
        check(self.l_inner >= 1.0, "l_inner must be at least 1")?;
        self.transience()?;
        check(self.ruin_n >= 2, "ruin_n must be at least 2")?;
        check(self.l0 > 1.0, "l0 must exceed 1")?;
        check(self.per_octave >= 1, "per_octave must be positive")?;
        check(self.k1 > 0.0, "k1 must be positive")?;
        check(self.quad_nodes >= 16, "quad_nodes must be at least 16")?;
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvironmentSpec, String> {
        EnvironmentSpec::new(self.d, self.epsilon, self.family, self.master_seed).map_err(|e| e.to_string())
    }

    pub fn ball_scheme(&self, radius: f64) -> Result<BallScheme, String> {
        let r = match self.r {
            Some(r) => r,
            None => BallScheme::new(self.scheme, radius, 1.0).map_err(|e| e.to_string())?.r_l,
        };
        let s = BallScheme::new(self.scheme, radius, r).map_err(|e| e.to_string())?;
        match self.factor {
            Some(f) => s.with_factor(f).map_err(|e| e.to_string()),
            None => Ok(s),
        }
    }

    pub fn q_kernel(&self) -> Result<SymmetricKernel, String> {
        match &self.q {
            None => Ok(SymmetricKernel::srw(self.d)),
            Some(w) => {
                check(w.len() == self.d, format!("q needs {} axis weights", self.d))?;
                SymmetricKernel::from_axis(w).map_err(|e| e.to_string())
            }
        }
    }

    pub fn psi_value(&self, radius: f64) -> f64 {
        self.psi.unwrap_or(radius / 4.0)
    }

    pub fn start_point(&self) -> Result<LatticePoint, String> {
        match &self.start {
            None => Ok(LatticePoint::origin(self.d)),
            Some(c) => {
                check(c.len() == self.d, format!("start needs {} coordinates", self.d))?;
                let x = LatticePoint::new(c);
                check(x.norm() <= self.radius, "start must lie in V_L")?;
                Ok(x)
            }
        }
    }

    pub fn transience(&self) -> Result<TransienceConfig, String> {
        let mut t = TransienceConfig::new(self.rho, self.alpha, self.scales.clone(), self.n_paths as usize)
            .map_err(|e| e.to_string())?;
        check(self.transience_threshold > 0.0 && self.transience_threshold < 1.0, "transience_threshold must lie in (0, 1)")?;
        t.threshold = self.transience_threshold;
        Ok(t)
    }

    /// Canonical one-line JSON form; the hash input.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}
