//! One function per subcommand. Each writes its CSVs through the sink and
//! records the invariants it asserts.

use anyhow::Result;
use clap::ValueEnum;
use ndarray::Array2;
use rwre_core::asymptotics as asy;
use rwre_core::coarsegrain::{cg_ball_operator, BoundaryMode};
use rwre_core::exitsolver::{exit_measure_exact, mc_exit, Domain};
use rwre_core::kernelspace::{Environment, SymmetricKernel};
use rwre_core::lattice::{ball_points, LatticePoint};
use rwre_core::measure::{fmt_f64, write_measure_csv};
use rwre_core::multiscale as ms;
use rwre_core::perturbation as pt;
use rwre_core::rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{Check, Sink};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    ExitExact,
    ExitMc,
    CgInvariance,
    Resolvent,
    Expansion,
    GammaCheck,
    PFlow,
    DMetrics,
    Classify,
    Census,
    C1Stats,
    Clt,
    GreenAsym,
    LdCheck,
    Poisson,
    Annulus,
    GamblersRuin,
    Transience,
    SmoothedExit,
    AllFixtures,
}

impl Subcommand {
    pub fn name(&self) -> String {
        self.to_possible_value().expect("named").get_name().to_string()
    }
}

/// Subcommands regenerated by `all-fixtures`.
pub const FIXTURE_SET: &[Subcommand] = &[
    Subcommand::ExitExact,
    Subcommand::ExitMc,
    Subcommand::CgInvariance,
    Subcommand::Resolvent,
    Subcommand::Expansion,
    Subcommand::GammaCheck,
    Subcommand::PFlow,
    Subcommand::DMetrics,
    Subcommand::Classify,
    Subcommand::Census,
    Subcommand::C1Stats,
    Subcommand::Clt,
    Subcommand::LdCheck,
    Subcommand::Annulus,
    Subcommand::GamblersRuin,
    Subcommand::Transience,
    Subcommand::SmoothedExit,
];

pub fn run(cmd: Subcommand, cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    match cmd {
        Subcommand::ExitExact => exit_exact(cfg, sink),
        Subcommand::ExitMc => exit_mc(cfg, sink),
        Subcommand::CgInvariance => cg_invariance(cfg, sink),
        Subcommand::Resolvent => resolvent(cfg, sink),
        Subcommand::Expansion => expansion(cfg, sink),
        Subcommand::GammaCheck => gamma_check(cfg, sink),
        Subcommand::PFlow => p_flow(cfg, sink),
        Subcommand::DMetrics => d_metrics(cfg, sink),
        Subcommand::Classify => classify(cfg, sink),
        Subcommand::Census => census(cfg, sink),
        Subcommand::C1Stats => c1_stats(cfg, sink),
        Subcommand::Clt => clt(cfg, sink),
        Subcommand::GreenAsym => green_asym(cfg, sink),
        Subcommand::LdCheck => ld_check(cfg, sink),
        Subcommand::Poisson => poisson(cfg, sink),
        Subcommand::Annulus => annulus(cfg, sink),
        Subcommand::GamblersRuin => gamblers_ruin(cfg, sink),
        Subcommand::Transience => transience(cfg, sink),
        Subcommand::SmoothedExit => smoothed_exit(cfg, sink),
        Subcommand::AllFixtures => anyhow::bail!("all-fixtures is dispatched by the runner"),
    }
}

fn env(cfg: &ExperimentConfig) -> Result<Environment> {
    Ok(Environment::new(cfg.env_spec().map_err(anyhow::Error::msg)?)?)
}

fn q(cfg: &ExperimentConfig) -> Result<SymmetricKernel> {
    cfg.q_kernel().map_err(anyhow::Error::msg)
}

fn start(cfg: &ExperimentConfig) -> Result<LatticePoint> {
    cfg.start_point().map_err(anyhow::Error::msg)
}

/// `k` distinct seeded points of `V_radius`, the origin first.
pub fn seeded_points(d: usize, radius: f64, k: usize, seed: u64) -> Result<Vec<LatticePoint>> {
    let pts = ball_points(&LatticePoint::origin(d), radius)?;
    let mut s = rng::path_stream(rng::key(seed, rng::TAG_SAMPLE, &[radius.to_bits() as i64]));
    let mut out = vec![LatticePoint::origin(d)];
    while out.len() < k.min(pts.len()) {
        let p = &pts[(rng::unit(&mut s) * pts.len() as f64) as usize % pts.len()];
        if !out.contains(p) {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn coord_header(d: usize, prefix: &str) -> String {
    (1..=d).map(|i| format!("{prefix}_{i}")).collect::<Vec<_>>().join(",")
}

fn coords(x: &LatticePoint) -> String {
    x.coords().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn exit_exact(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let env = env(cfg)?;
    let dom = Domain::ball(&LatticePoint::origin(cfg.d), cfg.radius)?;
    let ex = exit_measure_exact(&env, &dom, &start(cfg)?, cfg.tol)?;
    sink.csv("exit_exact.csv", |w| Ok(write_measure_csv(w, cfg.d, &ex, None)?))?;
    sink.check(Check::at_most("mass_defect", (ex.total() - 1.0).abs(), 1e-10));
    sink.check(Check::at_least("min_weight", ex.min_weight(), -1e-14));
    Ok(())
}

fn exit_mc(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let env = env(cfg)?;
    let o = LatticePoint::origin(cfg.d);
    let mc = mc_exit(&env, &o, cfg.radius, &start(cfg)?, cfg.n_paths, cfg.master_seed)?;
    sink.csv("exit_mc.csv", |w| Ok(write_measure_csv(w, cfg.d, &mc.dist, Some(&mc.stderr))?))?;
    let accounted = mc.dist.total() + mc.censored as f64 / mc.n_paths as f64;
    sink.check(Check::at_most("mass_accounting", (accounted - 1.0).abs(), 1e-12));
    Ok(())
}

fn cg_invariance(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let env = env(cfg)?;
    let p = SymmetricKernel::srw(cfg.d);
    let scheme = cfg.ball_scheme(cfg.radius).map_err(anyhow::Error::msg)?;
    let dom = Domain::ball(&LatticePoint::origin(cfg.d), cfg.radius)?;
    let xs = seeded_points(cfg.d, cfg.radius, 5, cfg.master_seed)?;
    let mut rows = Vec::new();
    {
        let op = cg_ball_operator(&env, &p, &scheme, BoundaryMode::Cut, cfg.tol)?;
        for x in &xs {
            let gap = op.exit_measure(x, cfg.tol)?.l1_distance(&exit_measure_exact(&env, &dom, x, cfg.tol)?);
            rows.push((x.clone(), "environment", gap));
        }
    }
    let op = cg_ball_operator(&p, &p, &scheme, BoundaryMode::Cut, cfg.tol)?;
    for x in &xs {
        let gap = op.exit_measure(x, cfg.tol)?.l1_distance(&exit_measure_exact(&p, &dom, x, cfg.tol)?);
        rows.push((x.clone(), "srw", gap));
    }
    let worst = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    sink.csv("cg_invariance.csv", |w| {
        writeln!(w, "{},field,l1_gap", coord_header(cfg.d, "x"))?;
        for (x, f, g) in &rows {
            writeln!(w, "{},{f},{}", coords(x), fmt_f64(*g))?;
        }
        Ok(())
    })?;
    sink.check(Check::at_most("max_l1_gap", worst, 1e-8));
    Ok(())
}

struct Perturbed {
    gb: Array2<f64>,
    g: Array2<f64>,
    delta: pt::SignedKernel,
}

fn perturbed(cfg: &ExperimentConfig) -> Result<Perturbed> {
    let env = env(cfg)?;
    let p = q(cfg)?;
    let dom = Domain::ball(&LatticePoint::origin(cfg.d), cfg.radius)?;
    let gb = pt::green_matrix(&env, &dom, cfg.tol)?;
    let g = pt::green_matrix(&p, &dom, cfg.tol)?;
    let delta = pt::kernel_difference(&env, &p, &dom);
    Ok(Perturbed { gb, g, delta })
}

fn resolvent(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let s = perturbed(cfg)?;
    let r = pt::resolvent_check(&s.gb, &s.g, &s.delta)?;
    sink.csv("resolvent.csv", |w| {
        writeln!(w, "identity,residual")?;
        writeln!(w, "G-g-g*Delta*G,{}", fmt_f64(r.left))?;
        writeln!(w, "G-g-G*Delta*g,{}", fmt_f64(r.right))?;
        Ok(())
    })?;
    sink.check(Check::at_most("resolvent_left", r.left, 1e-10));
    sink.check(Check::at_most("resolvent_right", r.right, 1e-10));
    Ok(())
}

fn expansion(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let s = perturbed(cfg)?;
    let e = pt::expansion_partial_sum(&s.g, &s.delta, cfg.expansion_terms)?;
    let residual = pt::op_norm(&(&(&s.gb - &s.g) - &e.sum));
    sink.csv("expansion.csv", |w| {
        writeln!(w, "k,increment")?;
        for (k, inc) in e.increments.iter().enumerate() {
            writeln!(w, "{},{}", k + 1, fmt_f64(*inc))?;
        }
        Ok(())
    })?;
    sink.check(Check::at_most("series_residual", residual, 1e-8));
    Ok(())
}

fn gamma_check(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let p = SymmetricKernel::srw(cfg.d);
    let scheme = cfg.ball_scheme(cfg.radius).map_err(anyhow::Error::msg)?;
    let gk = pt::GammaKernel::new(cfg.radius, scheme.r, scheme.s_l, cfg.d)?;
    let lip = pt::lipschitz_check(&gk)?;
    let op = cg_ball_operator(&p, &p, &scheme, BoundaryMode::Enlarged, cfg.tol)?;
    let u = pt::NeighborhoodSystem::new(gk, op.points());
    let pairs = pt::sample_pairs(&u.domain_indices(), 8, cfg.master_seed);
    let mask = op.inside().to_vec();
    let rep = pt::preceq_check(|x| op.green_row_masked(x, &mask, cfg.tol), |x| Ok(u.gamma_row(x)), &u, &pairs)?;
    sink.csv("gamma_check.csv", |w| {
        writeln!(w, "quantity,value")?;
        writeln!(w, "lipschitz_dtilde,{}", fmt_f64(lip.dtilde))?;
        writeln!(w, "lipschitz_a,{}", fmt_f64(lip.a))?;
        writeln!(w, "preceq_green,{}", fmt_f64(rep.constant))?;
        writeln!(w, "preceq_pairs,{}", rep.n_pairs)?;
        Ok(())
    })?;
    sink.check(Check::at_most("lipschitz_dtilde", lip.dtilde, 0.5 + 1e-12));
    sink.check(Check::at_most("lipschitz_a", lip.a, 0.5 + 1e-12));
    sink.check(Check::flag("preceq_finite", rep.constant.is_finite()));
    Ok(())
}

fn flow_config(cfg: &ExperimentConfig) -> Result<ms::FlowConfig> {
    let hi = cfg.grid.iter().copied().fold(cfg.l0, f64::max);
    let factor = cfg.ball_scheme(hi).map_err(anyhow::Error::msg)?.factor;
    Ok(ms::FlowConfig {
        grid: ms::grid_with(cfg.l0, hi, cfg.per_octave, &cfg.grid)?,
        l0: cfg.l0,
        kind: cfg.scheme,
        factor,
        n_env: cfg.n_env,
        tol: cfg.tol,
    })
}

fn p_flow(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let spec = cfg.env_spec().map_err(anyhow::Error::msg)?;
    let flow = ms::p_flow(&spec, &flow_config(cfg)?)?;
    let reported: Vec<ms::FlowEntry> =
        flow.entries.iter().filter(|e| cfg.grid.iter().any(|&l| (l - e.radius).abs() <= 1e-9 * l)).cloned().collect();
    let out = ms::FlowRecord { entries: reported, ..flow.clone() };
    sink.csv("flow.csv", |w| Ok(out.write_csv(w)?))?;
    let p_o = SymmetricKernel::srw(cfg.d);
    let sum_defect = flow
        .entries
        .iter()
        .map(|e| (e.p.axis_weights().iter().sum::<f64>() - 0.5).abs())
        .fold(0.0, f64::max);
    sink.check(Check::at_most("axis_sum_defect", sum_defect, 1e-12));
    if cfg.epsilon == 0.0 {
        let dev = flow
            .entries
            .iter()
            .map(|e| rwre_core::kernelspace::kernel_l1_distance(&e.p, &p_o))
            .collect::<rwre_core::Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        sink.check(Check::at_most("srw_fixed_point", dev, 1e-10));
    }
    Ok(())
}

fn d_metrics(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let env = env(cfg)?;
    let p = q(cfg)?;
    let x = start(cfg)?;
    let psi = ms::Psi::Constant(cfg.psi_value(cfg.radius));
    let m = ms::d_metric(&env, cfg.radius, &p, &psi, &p, &x, cfg.tol)?;
    let ds = ms::d_star(&env, cfg.radius, &p, &psi, &p, cfg.tol)?;
    sink.csv("d_metrics.csv", |w| {
        writeln!(w, "t,{},smoothed,plain", coord_header(cfg.d, "x"))?;
        writeln!(w, "{},{},{},{}", fmt_f64(m.t), coords(&x), fmt_f64(m.smoothed), fmt_f64(m.plain))?;
        writeln!(w, "{},{},{},{}", fmt_f64(cfg.radius), "sup".repeat(1) + &",".repeat(cfg.d - 1), fmt_f64(ds.smoothed), fmt_f64(ds.plain))?;
        Ok(())
    })?;
    sink.check(Check::at_most("smoothing_contracts", m.smoothed - m.plain, 1e-12));
    sink.check(Check::at_most("smoothing_contracts_sup", ds.smoothed - ds.plain, 1e-12));
    Ok(())
}

fn reports(cfg: &ExperimentConfig, members: usize) -> Result<Vec<(usize, ms::BadnessReport)>> {
    let spec = cfg.env_spec().map_err(anyhow::Error::msg)?;
    let scheme = cfg.ball_scheme(cfg.radius).map_err(anyhow::Error::msg)?;
    let flow = ms::FlowRecord::constant(&q(cfg)?, cfg.l0, &[cfg.radius]);
    (0..members)
        .map(|k| {
            let env = Environment::new(spec.member(k as u64))?;
            Ok((k, ms::classify_points(&env, &scheme, cfg.delta, &flow, cfg.tol)?))
        })
        .collect()
}

fn classify(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let reps = reports(cfg, cfg.n_env)?;
    sink.csv("badness.csv", |w| Ok(ms::write_badness_csv(w, &reps)?))?;
    if cfg.epsilon == 0.0 {
        let bad: usize = reps.iter().map(|(_, r)| r.b_lr.len() + r.b_l.len()).sum();
        sink.check(Check::at_most("bad_points_at_zero_epsilon", bad as f64, 0.0));
    }
    Ok(())
}

fn census(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let (_, rep) = reports(cfg, 1)?.remove(0);
    let scheme = cfg.ball_scheme(cfg.radius).map_err(anyhow::Error::msg)?;
    let c = ms::boundary_census(cfg.radius, scheme.r, scheme.r_l, cfg.d, &rep.b_boundary)?;
    sink.csv("census.csv", |w| {
        writeln!(w, "j,n_boxes,n_bad,threshold")?;
        for l in &c.layers {
            writeln!(w, "{},{},{},{}", l.j, l.n_boxes, l.n_bad, fmt_f64(l.threshold))?;
        }
        Ok(())
    })?;
    sink.check(Check::flag("counts_bounded", c.layers.iter().all(|l| l.n_bad <= l.n_boxes)));
    Ok(())
}

fn c1_stats(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let spec = cfg.env_spec().map_err(anyhow::Error::msg)?;
    let p = q(cfg)?;
    let mut stats = Vec::new();
    for &l in &cfg.grid {
        let psi = ms::Psi::Constant(cfg.psi_value(l));
        stats.push(ms::c1_statistics(&spec, l, &p, &psi, &p, cfg.delta, cfg.n_env, cfg.tol)?);
    }
    sink.csv("c1.csv", |w| {
        for (k, s) in stats.iter().enumerate() {
            s.write_csv(&mut *w, k == 0)?;
        }
        Ok(())
    })?;
    sink.check(Check::flag("band_counts_complete", stats.iter().all(|s| s.counts.iter().sum::<usize>() == s.n_env)));
    Ok(())
}

fn clt(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let mom = asy::cg_moments(&q(cfg)?, cfg.m, cfg.tol)?;
    let rows: Vec<asy::CltRow> = cfg.n_steps.iter().map(|&n| asy::clt_gap(&mom, n, 1e-12)).collect::<rwre_core::Result<_>>()?;
    sink.csv("clt.csv", |w| Ok(asy::write_clt_csv(w, &rows)?))?;
    let row_mass = mom.row.total();
    let mass = rows.iter().map(|r| (r.mass - row_mass.powi(r.n as i32)).abs()).fold(0.0, f64::max);
    let neg = rows.iter().map(|r| r.min_value).fold(0.0, f64::min);
    let hi = rows.iter().map(|r| r.scaled_gap).fold(0.0, f64::max);
    let lo = rows.iter().map(|r| r.scaled_gap).fold(f64::INFINITY, f64::min);
    sink.check(Check::at_most("mass_defect", mass, 1e-10));
    sink.check(Check::at_least("min_density", neg, -1e-14));
    sink.check(Check::at_most("scaled_gap_drift", hi / lo, 2.0));
    Ok(())
}

fn green_asym(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let p = q(cfg)?;
    let cd = asy::c_d_gamma(cfg.d)?;
    let cq = asy::c_d_quadrature(cfg.d)?;
    let xs: Vec<LatticePoint> = (5..=10).map(|k| LatticePoint::axis(cfg.d, 0, (k as f64 * cfg.m).round() as i64)).collect();
    let rep = asy::green_whole_space(&p, cfg.m, &xs, cfg.green_terms, 1e-12, cfg.tol)?;
    let rows = asy::green_ratios(&rep, &xs)?;
    sink.csv("green.csv", |w| Ok(asy::write_green_csv(w, &rows)?))?;
    sink.check(Check::at_most("c_d_cross_check", (cd - cq).abs(), 1e-10));
    let worst = rows.iter().map(|r| (r.ratio_to_cd - 1.0).abs()).fold(0.0, f64::max);
    sink.check(Check::at_most("ratio_deviation", worst, 0.15));
    Ok(())
}

fn ld_check(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let mom = asy::cg_moments(&q(cfg)?, cfg.m, cfg.tol)?;
    let grid: Vec<f64> = (1..=120).map(|k| 0.25 * k as f64).collect();
    let cap = 8.0 * cfg.d as f64 * 1.1;
    let rep = asy::ld_bound_check(&mom, cfg.ld_n, &grid, cap, 1e-12)?;
    sink.csv("ld.csv", |w| {
        writeln!(w, "c2,c1")?;
        for (c2, c1) in &rep.frontier {
            writeln!(w, "{},{}", fmt_f64(*c2), fmt_f64(*c1))?;
        }
        Ok(())
    })?;
    sink.check(Check::flag("feasible_pair", rep.feasible));
    sink.check(Check::at_least("small_c2_violates", rep.frontier[0].1, rep.c1_ref));
    Ok(())
}

fn poisson(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    anyhow::ensure!(cfg.d == 3, rwre_core::Error::Domain("the cap test is defined in d = 3".into()));
    let x = [0.5 * cfg.radius, 0.0, 0.0];
    let (caps, total) = asy::poisson_cap_integrals(&x, cfg.radius, cfg.quad_nodes)?;
    let mc = asy::bm_exit_mc(&[1.0; 3], &x, cfg.radius, cfg.n_paths as usize, cfg.master_seed)?;
    let dirs = asy::cap_directions();
    let mut worst: f64 = 0.0;
    sink.csv("poisson.csv", |w| {
        writeln!(w, "cap,u_1,u_2,u_3,kernel_mass,mc_prob,stderr,z")?;
        for k in 0..caps.len() {
            let se = mc.stderr(k);
            let z = (mc.probs[k] - caps[k]) / se.max(f64::MIN_POSITIVE);
            worst = worst.max(z.abs());
            writeln!(
                w,
                "{k},{},{},{},{},{},{},{}",
                fmt_f64(dirs[k][0]),
                fmt_f64(dirs[k][1]),
                fmt_f64(dirs[k][2]),
                fmt_f64(caps[k]),
                fmt_f64(mc.probs[k]),
                fmt_f64(se),
                fmt_f64(z)
            )?;
        }
        Ok(())
    })?;
    sink.check(Check::at_most("kernel_normalization", (total - 1.0).abs(), 1e-8));
    sink.check(Check::at_most("max_abs_z", worst, 3.0));
    Ok(())
}

fn annulus(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let p = q(cfg)?;
    let mut rows = Vec::new();
    for s in [1.0, 2.0] {
        let (l, big) = (cfg.l_inner * s, 4.0 * cfg.l_inner * s);
        let x = LatticePoint::axis(cfg.d, 0, (2.0 * l).round() as i64);
        rows.push((l, big, x.norm(), asy::annulus_escape(&p, l, big, &x, cfg.tol)?));
    }
    sink.csv("annulus.csv", |w| {
        writeln!(w, "l,L,x_norm,exact,formula,rel_gap")?;
        for (l, big, xn, r) in &rows {
            writeln!(w, "{},{},{},{},{},{}", fmt_f64(*l), fmt_f64(*big), fmt_f64(*xn), fmt_f64(r.exact), fmt_f64(r.formula), fmt_f64(r.rel_gap))?;
        }
        Ok(())
    })?;
    sink.check(Check::at_most("gap_decreases", rows[1].3.rel_gap - rows[0].3.rel_gap, 0.0));
    Ok(())
}

fn gamblers_ruin(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let n = cfg.ruin_n;
    let solve = asy::gamblers_ruin_solve(n)?;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (k, s) in solve.iter().enumerate() {
        let c = asy::gamblers_ruin(k, n)?;
        worst = worst.max((c - s).abs());
        lines.push(format!("{k},{},{},{}", fmt_f64(c), fmt_f64(*s), fmt_f64(asy::gamblers_ruin_limit(k))));
    }
    sink.csv("gamblers_ruin.csv", |w| {
        writeln!(w, "k,closed_form,solve,limit")?;
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    sink.check(Check::at_most("closed_form_vs_solve", worst, 1e-12));
    sink.check(Check::at_most("boundary_value", (asy::gamblers_ruin(0, n)? - 1.0).abs(), 0.0));
    Ok(())
}

fn transience(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let spec = cfg.env_spec().map_err(anyhow::Error::msg)?;
    let tc = cfg.transience().map_err(anyhow::Error::msg)?;
    let rows = asy::transience_experiment(&spec, &tc)?;
    sink.csv("transience.csv", |w| Ok(asy::write_transience_csv(w, &rows)?))?;
    for r in &rows {
        sink.check(Check::at_least(&format!("escape_lower_bound_scale_{}", r.scale), r.escape_est - 3.0 * r.stderr, tc.threshold));
    }
    Ok(())
}

fn smoothed_exit(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let env = env(cfg)?;
    let psi = ms::Psi::Constant(cfg.psi_value(cfg.radius));
    let phi = ms::smoothed_exit(&env, cfg.radius, &psi, &q(cfg)?, &start(cfg)?, cfg.tol)?;
    sink.csv("smoothed_exit.csv", |w| Ok(write_measure_csv(w, cfg.d, &phi, None)?))?;
    sink.check(Check::at_most("mass_defect", (phi.total() - 1.0).abs(), 1e-10));
    Ok(())
}
