//! Matrix-free BiCGSTAB for the nonsymmetric systems `(I - Q) u = b` that arise
//! from substochastic kernels.

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 20_000;

#[derive(Clone, Copy, Debug)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `A x = b` to `‖b - A x‖_∞ <= tol`, restarting on breakdown.
pub fn bicgstab(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveStats)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut res = inf_norm(&r);
    if res <= tol {
        return Ok((x, SolveStats { iterations: 0, residual: res }));
    }
    let mut r_hat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            r_hat.copy_from_slice(&r);
            p.fill(0.0);
            v.fill(0.0);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        apply(&p, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            omega = 0.0;
            continue;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if inf_norm(&s) <= tol {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            res = true_residual(&mut apply, &x, b, &mut t, &mut r);
            if res <= tol {
                return Ok((x, SolveStats { iterations: it, residual: res }));
            }
            omega = 0.0;
            continue;
        }
        apply(&s, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        if inf_norm(&r) <= tol {
            res = true_residual(&mut apply, &x, b, &mut t, &mut r);
            if res <= tol {
                return Ok((x, SolveStats { iterations: it, residual: res }));
            }
            omega = 0.0;
        }
    }
    res = true_residual(&mut apply, &x, b, &mut t, &mut r);
    Err(Error::NonConvergence { iterations: it, residual: res })
}

fn true_residual(
    apply: &mut impl FnMut(&[f64], &mut [f64]),
    x: &[f64],
    b: &[f64],
    scratch: &mut [f64],
    r: &mut [f64],
) -> f64 {
    apply(x, scratch);
    for i in 0..b.len() {
        r[i] = b[i] - scratch[i];
    }
    inf_norm(r)
}
