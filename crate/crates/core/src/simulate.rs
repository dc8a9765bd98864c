//! Closed-loop simulation under the governor and zero-order-hold sampling.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::governor::{GovernorConfig, GovernorState};
use crate::lifted::PolynomialConstraint;
use crate::moas::AdmissibleSet;
use crate::scenario::OutputMap;

/// Exact sampling of `ẋ = Ac x + Bc u` with `u` held over each period.
pub fn zoh_discretize(ac: &DMatrix<f64>, bc: &DMatrix<f64>, ts: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = ac.nrows();
    if !ac.is_square() || bc.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            got: bc.nrows(),
            context: "zoh input matrix rows",
        });
    }
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::Range(format!("sampling period must be positive, got {ts}")));
    }
    let m = bc.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(ac * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(bc * ts));
    let e = aug.exp();
    Ok((e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    /// Scaling applied to the previous reference (1 at k = 0 when governed).
    pub kappa: f64,
    pub constraint_values: Vec<f64>,
    /// `value - bound` per constraint.
    pub margins: Vec<f64>,
    pub checks: usize,
    /// Largest row margin of the lifted point against the admissible set.
    pub moas_margin: f64,
    pub outputs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub constraint_names: Vec<String>,
    pub output_names: Vec<String>,
    pub steps: Vec<StepRecord>,
}

pub struct RunOptions<'a> {
    pub governed: bool,
    pub governor: GovernorConfig,
    pub output_maps: &'a [OutputMap],
    pub dt: f64,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            governed: true,
            governor: GovernorConfig::default(),
            output_maps: &[],
            dt: 0.0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn record(
    set: &AdmissibleSet,
    constraints: &[PolynomialConstraint],
    maps: &[OutputMap],
    k: usize,
    x: &DVector<f64>,
    v: &DVector<f64>,
    kappa: f64,
    checks: usize,
) -> Result<StepRecord> {
    let xv: Vec<f64> = x.iter().chain(v.iter()).copied().collect();
    let values: Vec<f64> = constraints.iter().map(|c| c.eval(&xv)).collect();
    let margins = constraints.iter().zip(&values).map(|(c, v)| v - c.bound).collect();
    let z = set.lifted.build_z(x.as_slice(), v.as_slice())?;
    Ok(StepRecord {
        k,
        x: x.clone(),
        v: v.clone(),
        kappa,
        constraint_values: values,
        margins,
        checks,
        moas_margin: set.moas.max_margin(z.as_slice()),
        outputs: maps.iter().map(|m| m.eval(&xv)).collect(),
    })
}

/// Simulates `n_steps` transitions; the trajectory holds `n_steps + 1`
/// records. Ungoverned runs hold `v ≡ 0`.
pub fn run(
    set: &AdmissibleSet,
    constraints: &[PolynomialConstraint],
    x0: &[f64],
    n_steps: usize,
    opts: &RunOptions,
) -> Result<Trajectory> {
    let plant = &set.plant;
    if x0.len() != plant.nx() {
        return Err(Error::Dimension {
            expected: plant.nx(),
            got: x0.len(),
            context: "initial state",
        });
    }
    let mut x = DVector::from_row_slice(x0);
    let mut steps = Vec::with_capacity(n_steps + 1);
    let mut gov = if opts.governed {
        Some(GovernorState::initialize(set, x0, opts.governor)?)
    } else {
        None
    };
    let mut v = gov.as_ref().map_or_else(|| DVector::zeros(plant.nv()), |g| g.v.clone());
    let first_kappa = if opts.governed { 1.0 } else { 0.0 };
    steps.push(record(set, constraints, opts.output_maps, 0, &x, &v, first_kappa, 0)?);
    for k in 1..=n_steps {
        x = plant.step(&x, &v);
        let (kappa, checks) = match gov.as_mut() {
            Some(g) => {
                let out = g
                    .update(set, x.as_slice())
                    .map_err(|e| Error::SimulationStep {
                        step: k,
                        source: Box::new(e),
                    })?;
                v = out.v;
                (out.kappa, out.checks)
            }
            None => (0.0, 0),
        };
        steps.push(record(set, constraints, opts.output_maps, k, &x, &v, kappa, checks)?);
    }
    Ok(Trajectory {
        dt: opts.dt,
        constraint_names: constraints.iter().map(|c| c.name.clone()).collect(),
        output_names: opts.output_maps.iter().map(|m| m.name.clone()).collect(),
        steps,
    })
}

impl Trajectory {
    /// Largest margin of constraint `i` over the run, divided by the largest
    /// absolute coefficient of that constraint.
    pub fn max_scaled_margin(&self, constraints: &[PolynomialConstraint]) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| {
                s.margins
                    .iter()
                    .zip(constraints)
                    .map(|(m, c)| m / c.max_abs_coeff())
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let Some(first) = self.steps.first() else {
            return Ok(());
        };
        let (nx, nv, nc) = (first.x.len(), first.v.len(), first.margins.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        header.extend((1..=nx).map(|i| format!("x_{i}")));
        header.extend((1..=nv).map(|i| format!("v_{i}")));
        header.push("kappa".into());
        header.extend((1..=nc).map(|i| format!("c_{i}")));
        header.extend((1..=nc).map(|i| format!("margin_{i}")));
        header.push("checks".into());
        header.push("moas_margin".into());
        header.extend(self.output_names.iter().map(|n| format!("y_{n}")));
        w.write_record(&header)?;
        for s in &self.steps {
            let mut rec = vec![s.k.to_string()];
            rec.extend(s.x.iter().map(f64::to_string));
            rec.extend(s.v.iter().map(f64::to_string));
            rec.push(s.kappa.to_string());
            rec.extend(s.constraint_values.iter().map(f64::to_string));
            rec.extend(s.margins.iter().map(f64::to_string));
            rec.push(s.checks.to_string());
            rec.push(s.moas_margin.to_string());
            rec.extend(s.outputs.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}
