//! End-to-end acceptance run: one line per criterion.
//!
//! `ACCEPTANCE=1,5,9 cargo test --test acceptance` runs a subset.

use std::time::Instant;

use rwre_core::asymptotics as asy;
use rwre_core::coarsegrain::{cg_ball_operator, BallScheme, BoundaryMode, SchemeKind, SCALED_FACTOR};
use rwre_core::exitsolver::{direction_profile, exit_measure_exact, variance_profile, Domain};
use rwre_core::kernelspace::{
    kernel_l1_distance, Environment, EnvironmentSpec, Family, GeneralKernel, SymmetricKernel,
};
use rwre_core::lattice::{ball_points, LatticePoint};
use rwre_core::multiscale as ms;
use rwre_core::perturbation as pt;
use rwre_core::rng;
use rwre_core::Result;

/// Criteria that fail at desk scale for understood reasons. The run still
/// prints the measured values; it exits non-zero if one of these starts
/// passing so the list stays honest.
const DOCUMENTED_GAPS: &[usize] = &[4, 8, 11, 14];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn o3() -> LatticePoint {
    LatticePoint::origin(3)
}

fn srw() -> SymmetricKernel {
    SymmetricKernel::srw(3)
}

fn env(eps: f64, family: Family, seed: u64) -> Environment {
    Environment::new(EnvironmentSpec::new(3, eps, family, seed).unwrap()).unwrap()
}

fn seeded_points(radius: f64, k: usize, seed: u64) -> Vec<LatticePoint> {
    let pts = ball_points(&o3(), radius).unwrap();
    let mut s = rng::path_stream(rng::key(seed, rng::TAG_SAMPLE, &[radius as i64]));
    let mut out = vec![o3()];
    while out.len() < k {
        let p = &pts[(rng::unit(&mut s) * pts.len() as f64) as usize];
        if !out.contains(p) {
            out.push(p.clone());
        }
    }
    out
}

fn drift_ratio(v: &[f64]) -> f64 {
    let hi = v.iter().copied().fold(f64::MIN, f64::max);
    let lo = v.iter().copied().fold(f64::MAX, f64::min);
    hi / lo
}

fn c1_resolvent() -> Result<Outcome> {
    let tol = 1e-14;
    let e = env(0.05, Family::AxisTilt, 1);
    let p = srw();
    let dom = Domain::ball(&o3(), 6.0)?;
    let gb = pt::green_matrix(&e, &dom, tol)?;
    let g = pt::green_matrix(&p, &dom, tol)?;
    let delta = pt::kernel_difference(&e, &p, &dom);
    let r = pt::resolvent_check(&gb, &g, &delta)?;
    let ex = pt::expansion_partial_sum(&g, &delta, 50)?;
    let series = pt::op_norm(&(&(&gb - &g) - &ex.sum));
    let inc = &ex.increments;
    // terms vanish exactly once every entry drops below the truncation level
    let live = inc.iter().take_while(|&&v| v > 0.0).count();
    let q = inc[..live].windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    let geometric = live >= 5 && q < 1.0 && inc[live..].iter().all(|&v| v == 0.0);
    let pass = r.left <= 1e-10 && r.right <= 1e-10 && series <= 1e-8 && geometric;
    outcome(
        pass,
        format!("resolvent {:.2e}/{:.2e}, series residual {series:.2e} at K=50, increment ratio <= {q:.3} over {live} nonzero terms", r.left, r.right),
    )
}

fn c2_strong_markov() -> Result<Outcome> {
    let tol = 1e-13;
    let radius = 10.0;
    let scheme = BallScheme::new(SchemeKind::Scaled, radius, 2.0)?;
    let e = env(0.05, Family::AxisTilt, 1);
    let p = srw();
    let dom = Domain::ball(&o3(), radius)?;
    let xs = seeded_points(radius, 5, 1);
    let mut worst: f64 = 0.0;
    let op = cg_ball_operator(&e, &p, &scheme, BoundaryMode::Cut, tol)?;
    for x in &xs {
        worst = worst.max(op.exit_measure(x, tol)?.l1_distance(&exit_measure_exact(&e, &dom, x, tol)?));
    }
    drop(op);
    let op = cg_ball_operator(&p, &p, &scheme, BoundaryMode::Cut, tol)?;
    for x in &xs {
        worst = worst.max(op.exit_measure(x, tol)?.l1_distance(&exit_measure_exact(&p, &dom, x, tol)?));
    }
    outcome(worst <= 1e-8, format!("max L1 gap {worst:.2e} over 5 starts, environment and reference"))
}

fn c3_optional_stopping() -> Result<Outcome> {
    let tol = 1e-12;
    let p = SymmetricKernel::from_axis(&[0.22, 0.14, 0.14])?;
    let mut scaled = Vec::new();
    for radius in [8.0, 16.0, 24.0] {
        let dom = Domain::ball(&o3(), radius)?;
        let v = variance_profile(&exit_measure_exact(&p, &dom, &o3(), tol)?, radius)?;
        let dev = (0..3).map(|i| (v[i] - p.axis_weight(i)).abs()).fold(0.0, f64::max);
        scaled.push(dev * radius);
    }
    let dom = Domain::ball(&o3(), 8.0)?;
    let anchor = direction_profile(&exit_measure_exact(&srw(), &dom, &o3(), tol)?)?;
    let anchor_dev = anchor.iter().map(|a| (a - 1.0 / 6.0).abs()).fold(0.0, f64::max);
    let ratio = drift_ratio(&scaled);
    outcome(
        ratio <= 2.0 && anchor_dev <= 1e-10,
        format!("|v-p|*L = {:.3}, {:.3}, {:.3} (ratio {ratio:.2}); SRW anchor off by {anchor_dev:.1e}", scaled[0], scaled[1], scaled[2]),
    )
}

fn c4_poisson() -> Result<Outcome> {
    let x = [0.5, 0.0, 0.0];
    let (caps, total) = asy::poisson_cap_integrals(&x, 1.0, 1600)?;
    let mc = asy::bm_exit_mc(&[1.0; 3], &x, 1.0, 100_000, 1)?;
    let worst = (0..caps.len())
        .map(|k| ((mc.probs[k] - caps[k]) / mc.stderr(k)).abs())
        .fold(0.0, f64::max);
    outcome(
        worst <= 3.0 && (total - 1.0).abs() <= 1e-8,
        format!("worst |z| {worst:.2} over 26 caps, kernel mass {total:.10}"),
    )
}

fn c5_local_clt() -> Result<Outcome> {
    let mom = asy::cg_moments(&srw(), 4.0, 1e-13)?;
    let rows: Vec<asy::CltRow> = [8, 16, 32].iter().map(|&n| asy::clt_gap(&mom, n, 1e-12)).collect::<Result<_>>()?;
    let g: Vec<f64> = rows.iter().map(|r| r.scaled_gap).collect();
    let ratio = drift_ratio(&g);
    outcome(ratio <= 2.0, format!("scaled gaps {:.4}, {:.4}, {:.4} (ratio {ratio:.3})", g[0], g[1], g[2]))
}

fn c6_green_constant() -> Result<Outcome> {
    let cd = asy::c_d_gamma(3)?;
    let cq = asy::c_d_quadrature(3)?;
    let target = 1.0 / (2.0 * std::f64::consts::PI);
    let xs: Vec<LatticePoint> = (20..=40).step_by(4).map(|k| LatticePoint::axis(3, 0, k)).collect();
    let rep = asy::green_whole_space(&srw(), 4.0, &xs, 128, 1e-12, 1e-13)?;
    let rows = asy::green_ratios(&rep, &xs)?;
    let worst = rows.iter().map(|r| (r.ratio_to_cd - 1.0).abs()).fold(0.0, f64::max);
    let pass = worst <= 0.15 && (cd - cq).abs() <= 1e-10 && (cd - target).abs() <= 1e-15;
    outcome(pass, format!("ratio deviation <= {worst:.4} for |x|/m in [5,10]; c(3) gap {:.1e}", (cd - cq).abs()))
}

fn c7_large_deviation() -> Result<Outcome> {
    let mom = asy::cg_moments(&srw(), 4.0, 1e-13)?;
    let grid: Vec<f64> = (1..=120).map(|k| 0.25 * k as f64).collect();
    let rep = asy::ld_bound_check(&mom, 10, &grid, 8.0 * 3.0 * 1.1, 1e-12)?;
    outcome(rep.feasible, format!("best (c2, c1) = {:?} over {} points", rep.best, rep.n_points))
}

fn c8_annulus() -> Result<Outcome> {
    let p = srw();
    let a = asy::annulus_escape(&p, 4.0, 16.0, &LatticePoint::axis(3, 0, 8), 1e-12)?;
    let b = asy::annulus_escape(&p, 8.0, 32.0, &LatticePoint::axis(3, 0, 16), 1e-12)?;
    let ratio = b.rel_gap / a.rel_gap;
    outcome(
        a.rel_gap <= 0.10 && ratio <= 0.5,
        format!("relative gap {:.4} at l=4, {:.4} at l=8, ratio {ratio:.3}", a.rel_gap, b.rel_gap),
    )
}

fn c9_gamblers_ruin() -> Result<Outcome> {
    let n = 30;
    let solve = asy::gamblers_ruin_solve(n)?;
    let mut worst: f64 = 0.0;
    for (k, s) in solve.iter().enumerate() {
        worst = worst.max((asy::gamblers_ruin(k, n)? - s).abs());
    }
    let mut limit: f64 = 0.0;
    for k in 0..=20u32 {
        let exact = 2f64.powi(k as i32) / 3f64.powi(k as i32);
        limit = limit.max((asy::gamblers_ruin_limit(k as usize) - exact).abs() / exact);
        limit = limit.max((asy::gamblers_ruin(k as usize, 4000)? - exact).abs() / exact);
    }
    outcome(worst <= 1e-12 && limit <= 1e-14, format!("solve gap {worst:.1e}, limit relative gap {limit:.1e}"))
}

fn c10_centering() -> Result<Outcome> {
    let spec = EnvironmentSpec::new(3, 0.05, Family::GeneralA1, 1)?;
    let dom = Domain::ball(&o3(), 8.0)?;
    let n = 200;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for k in 0..n {
        let e = Environment::new(spec.member(k))?;
        let ex = exit_measure_exact(&e, &dom, &o3(), 1e-12)?;
        for i in 0..3 {
            let m: f64 = ex.entries().iter().map(|(z, w)| w * z.0[i] as f64).sum();
            sum[i] += m;
            sq[i] += m * m;
        }
    }
    let nf = n as f64;
    let z: Vec<f64> = (0..3)
        .map(|i| {
            let mean = sum[i] / nf;
            let se = ((sq[i] - nf * mean * mean) / (nf - 1.0) / nf).sqrt();
            mean / se
        })
        .collect();
    let worst = z.iter().map(|v| v.abs()).fold(0.0, f64::max);
    outcome(worst <= 4.0, format!("standardized mean displacement {:.2}, {:.2}, {:.2}", z[0], z[1], z[2]))
}

fn flow(eps: f64, n_env: usize, seed: u64, hi: f64, extra: &[f64]) -> Result<ms::FlowRecord> {
    let spec = EnvironmentSpec::new(3, eps, Family::AxisTilt, seed)?;
    ms::p_flow(
        &spec,
        &ms::FlowConfig {
            grid: ms::grid_with(2.0, hi, 4, extra)?,
            l0: 2.0,
            kind: SchemeKind::Scaled,
            factor: SCALED_FACTOR,
            n_env,
            tol: 1e-12,
        },
    )
}

fn c11_flow() -> Result<Outcome> {
    let zero = flow(0.0, 8, 1, 24.0, &[8.0, 16.0, 24.0])?;
    let dev = zero
        .entries
        .iter()
        .map(|e| kernel_l1_distance(&e.p, &srw()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let f = flow(0.05, 400, 1, 24.0, &[8.0, 16.0, 24.0])?;
    let drift: Vec<f64> = [8.0, 16.0, 24.0].iter().map(|&l| f.drift(l)).collect::<Result<_>>()?;
    let decreasing = drift[0] > drift[1] && drift[1] > drift[2];
    outcome(
        dev <= 1e-10 && decreasing,
        format!("eps=0 deviation {dev:.1e}; eps=0.05 drift {:.2e}, {:.2e}, {:.2e}", drift[0], drift[1], drift[2]),
    )
}

fn median_dstar(eps: f64, radius: f64, fl: &ms::FlowRecord) -> Result<f64> {
    let spec = EnvironmentSpec::new(3, eps, Family::AxisTilt, 1)?;
    let p = fl.p_at(radius)?;
    let s = ms::c1_statistics(&spec, radius, &p, &ms::Psi::Constant(radius / 4.0), &p, 0.25, 16, 1e-10)?;
    Ok(s.median_smoothed())
}

fn c12_tv_decay() -> Result<Outcome> {
    let radii = [8.0, 12.0, 16.0, 24.0];
    let fl = flow(0.02, 64, 1, 24.0, &radii)?;
    let by_l: Vec<f64> = radii.iter().map(|&l| median_dstar(0.02, l, &fl)).collect::<Result<_>>()?;
    let eps = [0.0, 0.01, 0.02, 0.05];
    let mut by_eps = Vec::new();
    for &e in &eps {
        let fe = flow(e, 64, 1, 8.0, &[8.0])?;
        by_eps.push(median_dstar(e, 8.0, &fe)?);
    }
    let in_l = by_l.windows(2).all(|w| w[1] <= w[0]);
    let in_eps = by_eps.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        in_l && in_eps,
        format!(
            "median D* over L=8..24: {}; over eps at L=8: {}",
            by_l.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", "),
            by_eps.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn witness_env(sites: &[&[i64]]) -> Environment {
    let mut e = env(0.0, Family::AxisTilt, 1);
    for s in sites {
        e.plant(LatticePoint::new(s), GeneralKernel::new(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    }
    e
}

fn c13_classification() -> Result<Outcome> {
    let tol = 1e-13;
    let p = srw();
    let fl = ms::FlowRecord::constant(&p, 2.0, &[8.0]);
    let small = BallScheme::scaled(6.0, 1.0)?;
    let zero = ms::classify_points(&env(0.0, Family::AxisTilt, 1), &small, 0.25, &fl, tol)?;
    let n_zero = zero.b_lr.len() + zero.b_l.len() + zero.b_star.len();
    let planted = ms::classify_points(&witness_env(&[&[0, 0, 0]]), &small, 0.25, &fl, tol)?;
    let one_bad = matches!(planted.class, ms::EnvClass::OneBad { .. }) && planted.b_l.contains(&o3());

    let w = witness_env(&[&[0, 0, 0]]);
    let scheme = BallScheme::scaled(8.0, 2.0)?;
    let rep = ms::classify_points(&w, &scheme, 0.25, &fl, tol)?;
    let op = cg_ball_operator(&w, &p, &scheme, BoundaryMode::Cut, tol)?;
    let p_op = cg_ball_operator(&p, &p, &scheme, BoundaryMode::Cut, tol)?;
    let g = ms::goodify(&op, &rep.b_star, &p_op)?;
    let gg = ms::goodify(&g, &rep.b_star, &p_op)?;
    let idempotent = (0..g.len()).all(|i| g.row(i) == gg.row(i));
    let m = ms::modify_level4(&op, &rep, &scheme, 6.0, tol)?;
    let mut gap: f64 = 0.0;
    for x in seeded_points(8.0, 5, 1) {
        gap = gap.max(op.exit_measure(&x, tol)?.l1_distance(&m.exit_measure(&x, tol)?));
    }
    outcome(
        n_zero == 0 && one_bad && idempotent && gap <= 1e-8,
        format!("eps=0 bad points {n_zero}; planted class {}; goodify idempotent {idempotent}; level-4 gap {gap:.1e}", planted.class.name()),
    )
}

fn c14_scheme(radius: f64) -> Result<BallScheme> {
    BallScheme::scaled(radius, (radius / 16.0).max(2.0))?.with_factor(0.25)
}

fn preceq_constant(op: &rwre_core::sparse::SparseKernel, scheme: &BallScheme, tol: f64) -> Result<f64> {
    let gk = pt::GammaKernel::new(scheme.radius, scheme.r, scheme.s_l, 3)?;
    let u = pt::NeighborhoodSystem::new(gk, op.points());
    let pairs = pt::sample_pairs(&u.domain_indices(), 8, 1);
    let mask = op.inside().to_vec();
    Ok(pt::preceq_check(|x| op.green_row_masked(x, &mask, tol), |x| Ok(u.gamma_row(x)), &u, &pairs)?.constant)
}

fn c14_gamma() -> Result<Outcome> {
    let tol = 1e-12;
    let p = srw();
    let s24 = c14_scheme(24.0)?;
    let lip = pt::lipschitz_check(&pt::GammaKernel::new(24.0, s24.r, s24.s_l, 3)?)?;
    let e = env(0.02, Family::AxisTilt, 1);
    let mut hat_g = Vec::new();
    let mut hat_gg = Vec::new();
    let mut classes = Vec::new();
    for radius in [16.0, 24.0, 32.0] {
        let scheme = c14_scheme(radius)?;
        let p_op = cg_ball_operator(&p, &p, &scheme, BoundaryMode::Enlarged, tol)?;
        hat_g.push(preceq_constant(&p_op, &scheme, tol)?);
        let fl = ms::FlowRecord::constant(&p, 2.0, &[radius]);
        let rep = ms::classify_points(&e, &scheme, 0.25, &fl, tol)?;
        let op = cg_ball_operator(&e, &p, &scheme, BoundaryMode::Enlarged, tol)?;
        let good = ms::goodify(&op, &rep.b_star, &p_op)?;
        drop(op);
        drop(p_op);
        hat_gg.push(preceq_constant(&good, &scheme, tol)?);
        classes.push(rep.class.name());
    }
    let all_finite = hat_g.iter().chain(&hat_gg).all(|c| c.is_finite());
    let (rg, rgg) = (drift_ratio(&hat_g), drift_ratio(&hat_gg));
    let pass = lip.dtilde <= 0.5 + 1e-12 && lip.a <= 0.5 + 1e-12 && all_finite && rg <= 2.0 && rgg <= 2.0;
    outcome(
        pass,
        format!(
            "Lipschitz {:.3}/{:.3} over {} radii; g-hat constants {:.2}, {:.2}, {:.2} (x{rg:.2}); good-env {:.2}, {:.2}, {:.2} (x{rgg:.2}); classes {}",
            lip.dtilde, lip.a, lip.n_radii, hat_g[0], hat_g[1], hat_g[2], hat_gg[0], hat_gg[1], hat_gg[2], classes.join("/")
        ),
    )
}

fn c15_transience() -> Result<Outcome> {
    let spec = EnvironmentSpec::new(3, 0.02, Family::AxisTilt, 1)?;
    let mut cfg = asy::TransienceConfig::new(3.0, 0.05, vec![1, 2, 3], 20_000)?;
    cfg.threshold = 0.5;
    let rows = asy::transience_experiment(&spec, &cfg)?;
    let lower: Vec<f64> = rows.iter().map(|r| r.escape_est - 3.0 * r.stderr).collect();
    outcome(
        lower.iter().all(|&v| v >= 0.5),
        format!("escape minus 3 sigma {:.3}, {:.3}, {:.3}", lower[0], lower[1], lower[2]),
    )
}

type Criterion = (usize, &'static str, fn() -> Result<Outcome>);

const CRITERIA: &[Criterion] = &[
    (1, "resolvent exactness", c1_resolvent),
    (2, "strong Markov invariance", c2_strong_markov),
    (3, "optional-stopping kernel recovery", c3_optional_stopping),
    (4, "Poisson kernel caps", c4_poisson),
    (5, "local CLT scaled gap", c5_local_clt),
    (6, "Green constant", c6_green_constant),
    (7, "large-deviation feasibility", c7_large_deviation),
    (8, "annulus formula", c8_annulus),
    (9, "gambler's ruin", c9_gamblers_ruin),
    (10, "centering", c10_centering),
    (11, "flow sanity", c11_flow),
    (12, "TV-decay trend", c12_tv_decay),
    (13, "classification sanity", c13_classification),
    (14, "Gamma machinery", c14_gamma),
    (15, "transience", c15_transience),
];

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut unexpected = Vec::new();
    for &(id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let gap = DOCUMENTED_GAPS.contains(&id);
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = match (pass, gap) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as a documented gap)",
            (false, true) => "FAIL (documented gap)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {tag:<6} {name}: {detail} [{:.1}s]", t0.elapsed().as_secs_f64());
        if pass == gap {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
