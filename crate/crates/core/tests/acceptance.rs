//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any hard check fails. Count targets for the admissible sets are
//! soft: a miss is reported as WARN together with the tolerances in use.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polygov::governor::{bisection_step, init_v, GovernorConfig};
use polygov::lifted::{build_lifted, lift_matrix, spectral_radius, PlantModel, PolynomialConstraint, Term};
use polygov::moas::{build_admissible_set, check_forward_invariance, AdmissibleSet, MoasConfig};
use polygov::monomial::{build_basis, kron_pow, lift_vector};
use polygov::scenario::{aircraft, grid_project, obstacle, scenario_aircraft, scenario_obstacle, Scenario};
use polygov::simulate::{run, RunOptions, Trajectory};

const COUNT_TOL: f64 = 0.15;

struct Report {
    hard_failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, ok: bool, elapsed: Duration, budget: Duration, detail: String) {
        let in_time = elapsed <= budget;
        let pass = ok && in_time;
        if !pass {
            self.hard_failures += 1;
        }
        let timing = format!("{:.2}s/{}s", elapsed.as_secs_f64(), budget.as_secs());
        let late = if in_time { "" } else { " OVER BUDGET" };
        println!("{} {name} [{timing}{late}] {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn algebra(rep: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = true;
    let mut worst_expand = 0.0f64;
    for n in 1..=6 {
        for p in 1..=4 {
            let basis = build_basis(n, p).unwrap();
            exact &= basis.mc.mul(&basis.me).is_identity();
            for _ in 0..100 {
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let lifted = lift_vector(&x, &basis).unwrap();
                let kron = kron_pow(&x, p).unwrap();
                worst_expand = worst_expand.max(rel_err(&(basis.me_dense() * lifted), &kron));
            }
        }
    }
    let mut worst_commute = 0.0f64;
    for _ in 0..50 {
        let m = rng.gen_range(1..=6);
        let j = rng.gen_range(1..=4);
        let phi = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let x = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
        let basis = build_basis(m, j).unwrap();
        let lhs = lift_vector((&phi * &x).as_slice(), &basis).unwrap();
        let rhs = lift_matrix(&phi, j).unwrap() * lift_vector(x.as_slice(), &basis).unwrap();
        worst_commute = worst_commute.max(rel_err(&rhs, &lhs));
    }
    let ok = exact && worst_expand <= 1e-12 && worst_commute <= 1e-10;
    rep.line(
        "algebraic_identities",
        ok,
        t.elapsed(),
        secs(10),
        format!("Mc*Me=I exact: {exact}, expansion err {worst_expand:.2e} (<=1e-12), commutation err {worst_commute:.2e} (<=1e-10)"),
    );
}

fn lifted_stability(rep: &mut Report, scenarios: &[&Scenario]) {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for s in scenarios {
        let lifted = build_lifted(&s.plant_model().unwrap(), &s.constraints).unwrap();
        let radii: Vec<f64> = lifted.phi_blocks.iter().map(spectral_radius).collect();
        ok &= radii.iter().all(|&r| r < 1.0);
        parts.push(format!("{}: {:?}", s.name, radii.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()));
    }
    rep.line("lifted_blocks_schur", ok, t.elapsed(), secs(1), parts.join("; "));
}

fn build(rep: &mut Report, s: &Scenario, targets: [(usize, usize); 2], budget: u64) -> Option<AdmissibleSet> {
    let t = Instant::now();
    let built = build_admissible_set(&s.plant_model().unwrap(), &s.constraints, s.v_box_pairs().as_deref(), &s.tolerances.moas);
    let elapsed = t.elapsed();
    let name = format!("{}_moas", s.name);
    let set = match built {
        Ok(set) => set,
        Err(e) => {
            rep.line(&name, false, elapsed, secs(budget), format!("build failed: {e}"));
            return None;
        }
    };
    // determination means the stopping test fired before k_max
    let determined = |m: &polygov::moas::Moas| m.k_star < s.tolerances.moas.k_max && m.margins[m.k_star] <= m.eps_feas.max(s.tolerances.moas.lp.eps_opt);
    let ok = determined(&set.moas1) && determined(&set.moas);
    let counts = [(set.moas1.k_star + 1, set.moas1.n_reduced), (set.moas.k_star + 1, set.moas.n_reduced)];
    rep.line(
        &name,
        ok,
        elapsed,
        secs(budget),
        format!(
            "finitely determined with k_max={}: degree-1 k*={}, full k*={}",
            s.tolerances.moas.k_max, set.moas1.k_star, set.moas.k_star
        ),
    );
    for (label, (got, want)) in ["degree-1", "full"].iter().zip(counts.iter().zip(targets.iter())) {
        let within = |g: usize, w: usize| (g as f64 - w as f64).abs() <= COUNT_TOL * w as f64;
        let soft_ok = within(got.0, want.0) && within(got.1, want.1);
        let lp = &s.tolerances.moas.lp;
        println!(
            "  {} {} {label} counts: {} iterations / {} rows, target {} / {} (+-15%); eps_feas={:e} eps_opt={:e} eps_red={:e}",
            if soft_ok { "OK" } else { "WARN" },
            s.name,
            got.0,
            got.1,
            want.0,
            want.1,
            lp.eps_feas,
            lp.eps_opt,
            lp.eps_red
        );
    }
    Some(set)
}

fn invariance(rep: &mut Report, s: &Scenario, set: &AdmissibleSet) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = check_forward_invariance(set, 1000, &mut rng);
    rep.line(
        &format!("{}_forward_invariance", s.name),
        r.tested >= 1000 && r.violations == 0,
        t.elapsed(),
        secs(30),
        format!("{} points, {} violations, worst propagated margin {:.3e}", r.tested, r.violations, r.worst_margin),
    );
}

fn simulate_pair(s: &Scenario, set: &AdmissibleSet) -> (polygov::Result<Trajectory>, polygov::Result<Trajectory>) {
    let mk = |governed| RunOptions {
        governed,
        governor: s.tolerances.governor,
        output_maps: &s.output_maps,
        dt: s.plant.dt,
    };
    (
        run(set, &s.constraints, &s.x0, s.horizon, &mk(false)),
        run(set, &s.constraints, &s.x0, s.horizon, &mk(true)),
    )
}

fn closed_loop_aircraft(rep: &mut Report, s: &Scenario, set: &AdmissibleSet) {
    let t = Instant::now();
    let (free, gov) = simulate_pair(s, set);
    let elapsed = t.elapsed();
    let (free, gov) = match (free, gov) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => {
            rep.line("aircraft_closed_loop", false, elapsed, secs(10), format!("simulation failed: {:?} {:?}", a.err(), b.err()));
            return;
        }
    };
    let u = |st: &polygov::simulate::StepRecord| aircraft::elevator(st.x[0], st.x[1], st.v[0]).abs();
    let free_max_u = free.steps.iter().map(u).fold(0.0, f64::max);
    let gov_max_u = gov.steps.iter().map(u).fold(0.0, f64::max);
    let margin = gov.max_scaled_margin(&s.constraints);
    let v0 = gov.steps[0].v.norm();
    let decays = gov
        .steps
        .iter()
        .all(|st| st.v.norm() <= aircraft::LAMBDA.powi(st.k as i32) * v0 * (1.0 + 1e-12));
    let v_end = gov.steps.last().unwrap().v.norm();
    let ok = free_max_u > aircraft::U_MAX && margin <= set.moas.eps_feas && decays;
    rep.line(
        "aircraft_closed_loop",
        ok,
        elapsed,
        secs(10),
        format!(
            "ungoverned max|u|={free_max_u:.3e} (>4e5), governed max|u|={gov_max_u:.3e}, scaled margin {margin:.2e}, |v0|={v0:.4}, |v_end|={v_end:.2e}, geometric decay: {decays}"
        ),
    );
}

fn closed_loop_obstacle(rep: &mut Report, s: &Scenario, set: &AdmissibleSet) {
    let t = Instant::now();
    let (free, gov) = simulate_pair(s, set);
    let elapsed = t.elapsed();
    let (free, gov) = match (free, gov) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => {
            rep.line("obstacle_closed_loop", false, elapsed, secs(10), format!("simulation failed: {:?} {:?}", a.err(), b.err()));
            return;
        }
    };
    let dist = |tr: &Trajectory| {
        tr.steps
            .iter()
            .map(|st| (st.x[0] - obstacle::CENTER[0]).hypot(st.x[1] - obstacle::CENTER[1]))
            .fold(f64::INFINITY, f64::min)
    };
    let eps = set.moas.eps_feas;
    let (d_free, d_gov) = (dist(&free), dist(&gov));
    let box_ok = gov.steps.iter().all(|st| {
        st.x.iter()
            .zip([obstacle::POS_MAX, obstacle::POS_MAX, obstacle::VEL_MAX, obstacle::VEL_MAX])
            .all(|(a, lim)| a.abs() <= lim + eps)
    });
    let margin = gov.max_scaled_margin(&s.constraints);
    let ok = d_free < obstacle::RADIUS && d_gov >= obstacle::RADIUS - eps && box_ok && margin <= eps;
    rep.line(
        "obstacle_closed_loop",
        ok,
        elapsed,
        secs(10),
        format!("ungoverned min distance {d_free:.4} (<2), governed min distance {d_gov:.9}, boxes hold: {box_ok}, scaled margin {margin:.2e}"),
    );
}

fn synthetic_set() -> AdmissibleSet {
    // x⁺ = 0.8x + 0.2v with |x| ≤ 1, |v - x| ≤ 0.3 and x + x·v ≤ 0.9;
    // the tracking bound makes v = 0 inadmissible away from the origin
    let plant = PlantModel::new(DMatrix::from_element(1, 1, 0.8), DMatrix::from_element(1, 1, 0.2), 0.9).unwrap();
    let cons = vec![
        PolynomialConstraint::new("hi", vec![Term::new(vec![1, 0], 1.0)], 1.0).unwrap(),
        PolynomialConstraint::new("lo", vec![Term::new(vec![1, 0], -1.0)], 1.0).unwrap(),
        PolynomialConstraint::new("track_hi", vec![Term::new(vec![0, 1], 1.0), Term::new(vec![1, 0], -1.0)], 0.3).unwrap(),
        PolynomialConstraint::new("track_lo", vec![Term::new(vec![0, 1], -1.0), Term::new(vec![1, 0], 1.0)], 0.3).unwrap(),
        PolynomialConstraint::new("q", vec![Term::new(vec![1, 0], 1.0), Term::new(vec![1, 1], 1.0)], 0.9).unwrap(),
    ];
    build_admissible_set(&plant, &cons, None, &MoasConfig::default()).unwrap()
}

const ORACLE_STEP: f64 = 1e-5;

/// Smallest-magnitude admissible v on a uniform grid, scanning outwards from 0.
fn oracle_init(set: &AdmissibleSet, x: f64) -> Option<f64> {
    let (lo, hi) = (set.bounds.lo[1], set.bounds.hi[1]);
    let steps = (lo.abs().max(hi.abs()) / ORACLE_STEP).ceil() as usize;
    for i in 0..=steps {
        let r = i as f64 * ORACLE_STEP;
        for v in [-r, r] {
            if v >= lo && v <= hi && set.admits(&[x], &[v]).unwrap() {
                return Some(v);
            }
        }
    }
    None
}

/// Smallest admissible κ on a uniform grid over [0, λ].
fn oracle_kappa(set: &AdmissibleSet, x: f64, v_prev: f64) -> Option<f64> {
    let lambda = set.plant.lambda;
    let n = (lambda / ORACLE_STEP).round() as usize;
    (0..=n)
        .map(|i| (i as f64 * ORACLE_STEP).min(lambda))
        .find(|&k| set.admits(&[x], &[k * v_prev]).unwrap())
}

fn governor_oracle(rep: &mut Report) {
    let t = Instant::now();
    let set = synthetic_set();
    let cfg = GovernorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let (mut init_nontrivial, mut step_nontrivial) = (0, 0);
    let mut worst_init = 0.0f64;
    let mut worst_kappa = 0.0f64;
    for trial in 0..20 {
        // start-up: half the states sit where v = 0 is inadmissible
        let x0 = if trial % 2 == 0 { rng.gen_range(0.6..1.05) } else { rng.gen_range(-1.0..1.0) };
        let oracle = oracle_init(&set, x0);
        match (init_v(&set, &[x0], &cfg), oracle) {
            (Ok(v), Some(o)) => {
                if o != 0.0 {
                    init_nontrivial += 1;
                }
                let gap = v[0].abs() - o.abs();
                worst_init = worst_init.max(gap);
                if gap > 1e-4 || !set.admits(&[x0], v.as_slice()).unwrap() {
                    failures.push(format!("init x0={x0:.5}: got {:.6}, oracle {o:.6}", v[0]));
                }
            }
            (Err(e), None) if e.is_infeasibility() => {}
            (got, o) => failures.push(format!("init x0={x0:.5}: got {got:?}, oracle {o:?}")),
        }

        // one governor step from an admissible pair
        let (xp, vp) = loop {
            let xp = rng.gen_range(-1.0..1.0);
            let vp = rng.gen_range(set.bounds.lo[1]..set.bounds.hi[1]);
            if vp.abs() > 1e-3 && set.admits(&[xp], &[vp]).unwrap() {
                break (xp, vp);
            }
        };
        let x = set.plant.step(&DVector::from_element(1, xp), &DVector::from_element(1, vp))[0];
        let out = bisection_step(&set, &[x], &[vp], &cfg).unwrap();
        let Some(ko) = oracle_kappa(&set, x, vp) else {
            failures.push(format!("step x={x:.5} v={vp:.5}: oracle found no admissible kappa"));
            continue;
        };
        if ko > 0.0 {
            step_nontrivial += 1;
        }
        let gap = (out.kappa - ko).abs();
        worst_kappa = worst_kappa.max(gap);
        if gap > cfg.tol_bisect * set.plant.lambda + ORACLE_STEP || !set.admits(&[x], out.v.as_slice()).unwrap() {
            failures.push(format!("step x={x:.5} v={vp:.5}: kappa {:.6}, oracle {ko:.6}", out.kappa));
        }
    }
    rep.line(
        "governor_oracle",
        failures.is_empty(),
        t.elapsed(),
        secs(30),
        format!(
            "20 trials ({init_nontrivial} nonzero start-up references, {step_nontrivial} nonzero kappa), worst |v| excess {worst_init:.2e} (<=1e-4), worst kappa gap {worst_kappa:.2e} (<={:.2e}){}",
            cfg.tol_bisect * set.plant.lambda + ORACLE_STEP,
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join("; ")) }
        ),
    );
}

fn grid(rep: &mut Report, s: &Scenario, set: &AdmissibleSet) {
    let t = Instant::now();
    let grid = s.grid.clone().unwrap();
    let nodes = match grid_project(set, &grid, &s.tolerances.governor) {
        Ok(n) => n,
        Err(e) => {
            rep.line("aircraft_grid", false, t.elapsed(), secs(300), format!("projection failed: {e}"));
            return;
        }
    };
    let elapsed = t.elapsed();
    let feasible = nodes.iter().filter(|n| n.feasible).count();
    let target = s.x0.clone();
    let start = nodes.iter().find(|n| {
        let mut x = grid.fixed.clone();
        x[grid.dims[0]] = n.coords[0];
        x[grid.dims[1]] = n.coords[1];
        x.iter().zip(&target).all(|(a, b)| (a - b).abs() < 1e-12)
    });
    // stall limits are the α-only constraints; nodes lying on a limit up to
    // rounding are not beyond it
    let eps = set.moas.eps_feas;
    let stall: Vec<&PolynomialConstraint> = s.constraints.iter().filter(|c| c.name.starts_with("alpha")).collect();
    let beyond = |n: &polygov::scenario::GridNode| {
        let mut xv = grid.fixed.clone();
        xv[grid.dims[0]] = n.coords[0];
        xv[grid.dims[1]] = n.coords[1];
        xv.push(0.0);
        stall.iter().any(|c| c.margin(&xv) / c.max_abs_coeff() > eps)
    };
    let n_beyond = nodes.iter().filter(|n| beyond(n)).count();
    let leaks = nodes.iter().filter(|n| beyond(n) && n.feasible).count();
    let start_ok = start.is_some_and(|n| n.feasible);
    let ok = feasible > 0 && start_ok && leaks == 0 && n_beyond > 0;
    rep.line(
        "aircraft_grid",
        ok,
        elapsed,
        secs(300),
        format!(
            "{}x{} grid: {feasible} feasible nodes, start state feasible: {start_ok} (v={:?}), {n_beyond} nodes beyond stall limits, {leaks} of them feasible",
            grid.count[0],
            grid.count[1],
            start.and_then(|n| n.v.as_ref().map(|v| v[0]))
        ),
    );
}

fn main() -> ExitCode {
    let mut rep = Report { hard_failures: 0 };
    let air = scenario_aircraft();
    let obs = scenario_obstacle();

    algebra(&mut rep);
    lifted_stability(&mut rep, &[&air, &obs]);
    let air_set = build(&mut rep, &air, [(77, 107), (31, 298)], 300);
    let obs_set = build(&mut rep, &obs, [(154, 90), (188, 217)], 600);
    for (s, set) in [(&air, &air_set), (&obs, &obs_set)] {
        match set {
            Some(set) => invariance(&mut rep, s, set),
            None => rep.line(&format!("{}_forward_invariance", s.name), false, Duration::ZERO, secs(30), "no set".into()),
        }
    }
    match &air_set {
        Some(set) => closed_loop_aircraft(&mut rep, &air, set),
        None => rep.line("aircraft_closed_loop", false, Duration::ZERO, secs(10), "no set".into()),
    }
    match &obs_set {
        Some(set) => closed_loop_obstacle(&mut rep, &obs, set),
        None => rep.line("obstacle_closed_loop", false, Duration::ZERO, secs(10), "no set".into()),
    }
    governor_oracle(&mut rep);
    match &air_set {
        Some(set) => grid(&mut rep, &air, set),
        None => rep.line("aircraft_grid", false, Duration::ZERO, secs(300), "no set".into()),
    }

    if rep.hard_failures == 0 {
        println!("acceptance: all hard checks passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} hard check(s) failed", rep.hard_failures);
        ExitCode::FAILURE
    }
}
