use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use polygov::linprog::Polytope;
use polygov::moas::{build_admissible_set, check_forward_invariance, AdmissibleSet};
use polygov::monomial::build_basis;
use polygov::scenario::{grid_project, write_grid_csv, Scenario};
use polygov::simulate::{run, RunOptions};
use polygov::{Error, Result};

#[derive(Parser)]
#[command(name = "polygov", version, about = "Admissible sets under polynomial constraints and a reference governor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the monomial basis of degree P in N variables and its
    /// compression/expansion matrices.
    Basis {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build or check the admissible set of a scenario.
    Moas {
        #[command(subcommand)]
        action: MoasAction,
    },
    /// Simulate the closed loop with and/or without the governor.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        mode: Mode,
        /// Overrides the scenario horizon.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Start-up feasibility over the scenario's 2-D state grid.
    Gridproject {
        #[command(flatten)]
        common: Common,
        /// Overrides both grid counts.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Subcommand)]
enum MoasAction {
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// One-step forward invariance on random consistent points.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Governed,
    Ungoverned,
    Both,
}

#[derive(Args)]
struct Common {
    /// `aircraft`, `obstacle` or a scenario JSON file.
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    tol_feas: Option<f64>,
    #[arg(long)]
    tol_opt: Option<f64>,
    #[arg(long)]
    tol_red: Option<f64>,
    #[arg(long)]
    tol_bisect: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
}

impl Common {
    fn scenario(&self) -> Result<Scenario> {
        let mut s = Scenario::resolve(&self.scenario)?;
        let t = &mut s.tolerances;
        if let Some(v) = self.tol_feas {
            t.moas.lp.eps_feas = v;
        }
        if let Some(v) = self.tol_opt {
            t.moas.lp.eps_opt = v;
        }
        if let Some(v) = self.tol_red {
            t.moas.lp.eps_red = v;
        }
        if let Some(v) = self.tol_bisect {
            t.governor.tol_bisect = v;
        }
        if let Some(v) = self.k_max {
            t.moas.k_max = v;
        }
        Ok(s)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn build_set(s: &Scenario) -> Result<AdmissibleSet> {
    let plant = s.plant_model()?;
    let vb = s.v_box_pairs();
    build_admissible_set(&plant, &s.constraints, vb.as_deref(), &s.tolerances.moas)
}

fn write_dense_csv(path: &Path, m: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{},{}", m.nrows(), m.ncols())?;
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

fn cmd_basis(n: usize, p: usize, out: &Path) -> Result<()> {
    let basis = build_basis(n, p)?;
    fs::create_dir_all(out)?;
    let mut f = std::io::BufWriter::new(fs::File::create(out.join("exponents.csv"))?);
    writeln!(f, "{},{}", basis.len(), n)?;
    for e in &basis.exponents {
        let line: Vec<String> = e.iter().map(u32::to_string).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    drop(f);
    write_dense_csv(&out.join("mc.csv"), &basis.mc_dense())?;
    write_dense_csv(&out.join("me.csv"), &basis.me_dense())?;
    println!("basis n={n} p={p}: {} monomials written to {}", basis.len(), out.display());
    Ok(())
}

fn moas_report(s: &Scenario, set: &AdmissibleSet) -> serde_json::Value {
    let summary = |m: &polygov::moas::Moas| {
        json!({
            "k_star": m.k_star,
            "iterations": m.k_star + 1,
            "n_raw": m.n_raw,
            "n_reduced": m.n_reduced,
            "observability_rank": m.observability.rank,
            "dim": m.observability.dim,
            "margins": m.margins.iter().map(|v| if v.is_finite() { json!(v) } else { json!(v.to_string()) }).collect::<Vec<_>>(),
        })
    };
    json!({
        "scenario": s.name,
        "dim_z": set.lifted.dim(),
        "degree": set.lifted.p,
        "tolerances": s.tolerances.moas,
        "degree1": summary(&set.moas1),
        "full": summary(&set.moas),
    })
}

fn cmd_moas_build(common: &Common) -> Result<()> {
    let s = common.scenario()?;
    let out = common.out_dir()?;
    let set = build_set(&s)?;
    set.moas.poly.save(out.join("moas.csv"))?;
    set.moas1.poly.save(out.join("moas_degree1.csv"))?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&moas_report(&s, &set))?)?;
    fs::write(out.join("bounds.json"), serde_json::to_string_pretty(&set.bounds)?)?;
    println!(
        "{}: degree-1 set k*={} ({} rows), full set k*={} ({} raw, {} irredundant)",
        s.name, set.moas1.k_star, set.moas1.n_reduced, set.moas.k_star, set.moas.n_raw, set.moas.n_reduced
    );
    Ok(())
}

fn cmd_moas_check(common: &Common, samples: usize) -> Result<bool> {
    let s = common.scenario()?;
    let out = common.out_dir()?;
    let mut set = build_set(&s)?;
    let saved = out.join("moas.csv");
    if saved.exists() {
        let poly = Polytope::load(&saved)?;
        if poly.dim() != set.lifted.dim() {
            return Err(Error::Dimension {
                expected: set.lifted.dim(),
                got: poly.dim(),
                context: "saved polytope",
            });
        }
        set.moas.poly = poly;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let rep = check_forward_invariance(&set, samples, &mut rng);
    println!(
        "{}: {} points tested, {} violations, worst propagated margin {:e}",
        s.name, rep.tested, rep.violations, rep.worst_margin
    );
    Ok(rep.violations == 0 && rep.tested >= samples)
}

fn cmd_simulate(common: &Common, mode: Mode, steps: Option<usize>) -> Result<()> {
    let s = common.scenario()?;
    let out = common.out_dir()?;
    let set = build_set(&s)?;
    let n = steps.unwrap_or(s.horizon);
    let runs: &[bool] = match mode {
        Mode::Governed => &[true],
        Mode::Ungoverned => &[false],
        Mode::Both => &[false, true],
    };
    for &governed in runs {
        let opts = RunOptions {
            governed,
            governor: s.tolerances.governor,
            output_maps: &s.output_maps,
            dt: s.plant.dt,
        };
        let tr = run(&set, &s.constraints, &s.x0, n, &opts)?;
        let name = if governed { "governed" } else { "ungoverned" };
        let path = out.join(format!("trajectory_{name}.csv"));
        tr.save(&path)?;
        println!(
            "{}: {name} run of {n} steps, largest scaled constraint margin {:e} -> {}",
            s.name,
            tr.max_scaled_margin(&s.constraints),
            path.display()
        );
    }
    Ok(())
}

fn cmd_gridproject(common: &Common, count: Option<usize>) -> Result<()> {
    let s = common.scenario()?;
    let out = common.out_dir()?;
    let mut grid = s
        .grid
        .clone()
        .ok_or_else(|| Error::Scenario(format!("scenario {} has no grid", s.name)))?;
    if let Some(c) = count {
        grid.count = [c, c];
    }
    let set = build_set(&s)?;
    let nodes = grid_project(&set, &grid, &s.tolerances.governor)?;
    write_grid_csv(&nodes, &grid, set.lifted.nv, fs::File::create(out.join("grid.csv"))?)?;
    let meta = json!({
        "scenario": s.name,
        "dims": grid.dims,
        "lo": grid.lo,
        "hi": grid.hi,
        "count": grid.count,
        "fixed_state": grid.fixed,
        "note": "coordinates not listed in dims are held at fixed_state",
    });
    fs::write(out.join("grid_meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let feasible = nodes.iter().filter(|n| n.feasible).count();
    println!("{}: {feasible} of {} grid nodes admit a start-up reference", s.name, nodes.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Basis { n, p, out } => cmd_basis(*n, *p, out).map(|_| true),
        Command::Moas {
            action: MoasAction::Build { common },
        } => cmd_moas_build(common).map(|_| true),
        Command::Moas {
            action: MoasAction::Check { common, samples },
        } => cmd_moas_check(common, *samples),
        Command::Simulate { common, mode, steps } => cmd_simulate(common, *mode, *steps).map(|_| true),
        Command::Gridproject { common, count } => cmd_gridproject(common, *count).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_infeasibility() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
