//! Scenario files and the two built-in examples.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::governor::{init_v, GovernorConfig};
use crate::lifted::{PlantModel, PolynomialConstraint, Term};
use crate::moas::{AdmissibleSet, MoasConfig};
use crate::simulate::zoh_discretize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub lambda: f64,
    /// Sampling period in seconds; metadata only.
    #[serde(default)]
    pub dt: f64,
}

/// A named polynomial in `(x, v)` evaluated for logging, e.g. a physical input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub name: String,
    pub terms: Vec<Term>,
    #[serde(default)]
    pub constant: f64,
}

impl OutputMap {
    pub fn eval(&self, xv: &[f64]) -> f64 {
        self.constant
            + self
                .terms
                .iter()
                .map(|t| t.coeff * crate::monomial::eval_monomial(xv, &t.exponents))
                .sum::<f64>()
    }
}

/// Two state coordinates swept over a rectangle, the others held at `fixed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 2],
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub count: [usize; 2],
    /// Full state vector; entries at `dims` are overwritten per node.
    pub fixed: Vec<f64>,
}

impl GridSpec {
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if self.count[axis] <= 1 {
            return self.lo[axis];
        }
        let frac = i as f64 / (self.count[axis] - 1) as f64;
        self.lo[axis] + (self.hi[axis] - self.lo[axis]) * frac
    }

    /// Same rectangle with every spacing halved.
    pub fn refined(&self) -> Self {
        let mut g = self.clone();
        g.count = self.count.map(|c| if c > 1 { 2 * c - 1 } else { c });
        g
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub moas: MoasConfig,
    pub governor: GovernorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantSpec,
    pub constraints: Vec<PolynomialConstraint>,
    /// Optional `[lo, hi]` per reference coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_box: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub output_maps: Vec<OutputMap>,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    pub horizon: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Scenario(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl Scenario {
    pub fn plant_model(&self) -> Result<PlantModel> {
        PlantModel::new(to_matrix(&self.plant.a, "A")?, to_matrix(&self.plant.b, "B")?, self.plant.lambda)
    }

    pub fn v_box_pairs(&self) -> Option<Vec<(f64, f64)>> {
        self.v_box.as_ref().map(|b| b.iter().map(|p| (p[0], p[1])).collect())
    }

    /// Checks dimensions and re-folds constraints.
    pub fn validate(mut self) -> Result<Self> {
        let plant = self.plant_model()?;
        let n = plant.n();
        self.constraints = self
            .constraints
            .into_iter()
            .map(PolynomialConstraint::normalized)
            .collect::<Result<_>>()?;
        if self.constraints.is_empty() {
            return Err(Error::Scenario("no constraints".into()));
        }
        if let Some(c) = self.constraints.iter().find(|c| c.nvars() != n) {
            return Err(Error::Scenario(format!(
                "constraint {:?} has {} variables, expected {n}",
                c.name,
                c.nvars()
            )));
        }
        for m in &self.output_maps {
            if m.terms.iter().any(|t| t.exponents.len() != n) {
                return Err(Error::Scenario(format!("output map {:?} has wrong exponent length", m.name)));
            }
        }
        if self.x0.len() != plant.nx() {
            return Err(Error::Scenario(format!("x0 has {} entries, expected {}", self.x0.len(), plant.nx())));
        }
        if let Some(vb) = &self.v_box {
            if vb.len() != plant.nv() {
                return Err(Error::Scenario(format!("v_box has {} entries, expected {}", vb.len(), plant.nv())));
            }
        }
        if let Some(g) = &self.grid {
            if g.fixed.len() != plant.nx() || g.dims.iter().any(|&d| d >= plant.nx()) || g.dims[0] == g.dims[1] {
                return Err(Error::Scenario("grid dims/fixed do not match the state dimension".into()));
            }
            if g.count.contains(&0) {
                return Err(Error::Scenario("grid counts must be positive".into()));
            }
        }
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<Scenario>(text)?.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A built-in name (`aircraft`, `obstacle`) or a JSON file path.
    pub fn resolve(name: &str) -> Result<Self> {
        match name {
            "aircraft" => Ok(scenario_aircraft()),
            "obstacle" => Ok(scenario_obstacle()),
            path => Self::load(path),
        }
    }
}

/// Parameters of the longitudinal aircraft model and its dynamic inversion.
pub mod aircraft {
    pub const D1: f64 = 4.0;
    pub const D2: f64 = 42.0;
    pub const J: f64 = 4.5e5;
    pub const L0: f64 = 2.5e5;
    pub const L1: f64 = 8.6e6;
    pub const L3: f64 = 4.35e7;
    pub const KP: f64 = 5.2e7;
    pub const KD: f64 = 7.6e6;
    pub const U_MAX: f64 = 4e5;
    pub const TS: f64 = 0.01;
    pub const LAMBDA: f64 = 0.98;
    pub const ALPHA_MIN_DEG: f64 = -0.2;
    pub const ALPHA_MAX_DEG: f64 = 14.7;

    /// `L(α) = l0 + l1 α - l3 α³`
    pub fn lift_force(alpha: f64) -> f64 {
        L0 + L1 * alpha - L3 * alpha.powi(3)
    }

    /// Elevator force of the inversion law; α tracks `+v`.
    pub fn elevator(alpha: f64, alpha_dot: f64, v: f64) -> f64 {
        -KP * (alpha - v) - KD * alpha_dot + D1 / D2 * lift_force(alpha)
    }
}

/// `u` over `(α, α̇, v)` without its constant `(d1/d2) l0`.
fn elevator_terms(sign: f64) -> Vec<Term> {
    use aircraft::*;
    let r = D1 / D2;
    vec![
        Term::new(vec![1, 0, 0], sign * (-KP + r * L1)),
        Term::new(vec![3, 0, 0], sign * (-r * L3)),
        Term::new(vec![0, 1, 0], sign * -KD),
        Term::new(vec![0, 0, 1], sign * KP),
    ]
}

pub fn scenario_aircraft() -> Scenario {
    use aircraft::*;
    let r = D1 / D2;
    let deg = PI / 180.0;
    let constraints = vec![
        PolynomialConstraint::new("alpha_max", vec![Term::new(vec![1, 0, 0], 1.0)], ALPHA_MAX_DEG * deg),
        PolynomialConstraint::new("alpha_min", vec![Term::new(vec![1, 0, 0], -1.0)], -ALPHA_MIN_DEG * deg),
        PolynomialConstraint::new("u_max", elevator_terms(1.0), U_MAX - r * L0),
        PolynomialConstraint::new("u_min", elevator_terms(-1.0), U_MAX + r * L0),
    ]
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .expect("built-in constraints are valid");
    Scenario {
        name: "aircraft".into(),
        plant: PlantSpec {
            a: vec![vec![0.9814, 0.0072], vec![-3.3347, 0.4940]],
            b: vec![vec![0.0186], vec![3.3347]],
            lambda: LAMBDA,
            dt: TS,
        },
        constraints,
        v_box: None,
        output_maps: vec![OutputMap {
            name: "u".into(),
            terms: elevator_terms(1.0),
            constant: r * L0,
        }],
        x0: vec![14.0 * deg, 0.0],
        grid: Some(GridSpec {
            dims: [0, 1],
            // (14°, 0) is node (42, 24)
            lo: [-0.7 * deg, -0.6],
            hi: [16.45 * deg, 0.625],
            count: [50, 50],
            fixed: vec![0.0, 0.0],
        }),
        horizon: 1000,
        tolerances: Tolerances::default(),
    }
}

pub mod obstacle {
    pub const CENTER: [f64; 2] = [10.0, 0.0];
    pub const RADIUS: f64 = 2.0;
    pub const POS_MAX: f64 = 20.0;
    pub const VEL_MAX: f64 = 5.0;
    pub const TS: f64 = 0.5;
    pub const LAMBDA: f64 = 0.98;
}

/// Double integrator pre-stabilised by `u = -x - 2ẋ + v`, state `(x1, x2, ẋ1, ẋ2)`.
pub fn obstacle_plant_matrices() -> (DMatrix<f64>, DMatrix<f64>) {
    #[rustfmt::skip]
    let ac = DMatrix::from_row_slice(4, 4, &[
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
        -1.0, 0.0, -2.0, 0.0,
        0.0, -1.0, 0.0, -2.0,
    ]);
    #[rustfmt::skip]
    let bc = DMatrix::from_row_slice(4, 2, &[
        0.0, 0.0,
        0.0, 0.0,
        1.0, 0.0,
        0.0, 1.0,
    ]);
    zoh_discretize(&ac, &bc, obstacle::TS).expect("finite inputs")
}

pub fn scenario_obstacle() -> Scenario {
    use obstacle::*;
    let (a, b) = obstacle_plant_matrices();
    let unit = |i: usize, s: f64| {
        let mut e = vec![0; 6];
        e[i] = 1;
        Term::new(e, s)
    };
    let mut constraints = Vec::new();
    for (i, name, lim) in [(0, "x1", POS_MAX), (1, "x2", POS_MAX), (2, "xd1", VEL_MAX), (3, "xd2", VEL_MAX)] {
        constraints.push(PolynomialConstraint::new(format!("{name}_max"), vec![unit(i, 1.0)], lim));
        constraints.push(PolynomialConstraint::new(format!("{name}_min"), vec![unit(i, -1.0)], lim));
    }
    // (x - c)ᵀ(x - c) ≥ r², written as -(x - c)ᵀ(x - c) ≤ -r²
    let sq = |i: usize| {
        let mut e = vec![0; 6];
        e[i] = 2;
        e
    };
    let c2 = CENTER[0] * CENTER[0] + CENTER[1] * CENTER[1];
    constraints.push(PolynomialConstraint::new(
        "obstacle",
        vec![
            Term::new(sq(0), -1.0),
            Term::new(sq(1), -1.0),
            unit(0, 2.0 * CENTER[0]),
            unit(1, 2.0 * CENTER[1]),
            Term::new(vec![0; 6], -c2),
        ],
        -RADIUS * RADIUS,
    ));
    let constraints = constraints
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .expect("built-in constraints are valid");
    Scenario {
        name: "obstacle".into(),
        plant: PlantSpec {
            a: from_matrix(&a),
            b: from_matrix(&b),
            lambda: LAMBDA,
            dt: TS,
        },
        constraints,
        v_box: None,
        output_maps: vec![OutputMap {
            name: "distance_sq".into(),
            terms: vec![
                Term::new(sq(0), 1.0),
                Term::new(sq(1), 1.0),
                unit(0, -2.0 * CENTER[0]),
                unit(1, -2.0 * CENTER[1]),
            ],
            constant: c2,
        }],
        x0: vec![20.0, 1.0, 0.0, 0.0],
        grid: Some(GridSpec {
            dims: [0, 1],
            lo: [-20.0, -20.0],
            hi: [20.0, 20.0],
            count: [41, 41],
            fixed: vec![0.0; 4],
        }),
        horizon: 120,
        tolerances: Tolerances::default(),
    }
}

/// Outcome of the start-up search at one grid node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub i: usize,
    pub j: usize,
    pub coords: [f64; 2],
    pub feasible: bool,
    /// Start-up reference when feasible.
    pub v: Option<Vec<f64>>,
}

/// Runs `init_v` at every node of the grid; nodes where it reports
/// infeasibility are marked, other errors abort.
pub fn grid_project(set: &AdmissibleSet, grid: &GridSpec, cfg: &GovernorConfig) -> Result<Vec<GridNode>> {
    if grid.fixed.len() != set.lifted.nx {
        return Err(Error::Dimension {
            expected: set.lifted.nx,
            got: grid.fixed.len(),
            context: "grid fixed state",
        });
    }
    let nodes: Vec<(usize, usize)> = (0..grid.count[0])
        .flat_map(|i| (0..grid.count[1]).map(move |j| (i, j)))
        .collect();
    nodes
        .into_par_iter()
        .map(|(i, j)| {
            let coords = [grid.coord(0, i), grid.coord(1, j)];
            let mut x = grid.fixed.clone();
            x[grid.dims[0]] = coords[0];
            x[grid.dims[1]] = coords[1];
            match init_v(set, &x, cfg) {
                Ok(v) => Ok(GridNode {
                    i,
                    j,
                    coords,
                    feasible: true,
                    v: Some(v.as_slice().to_vec()),
                }),
                Err(e) if e.is_infeasibility() => Ok(GridNode {
                    i,
                    j,
                    coords,
                    feasible: false,
                    v: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// `i,j,<dim a>,<dim b>,feasible,v_norm,v_1..`
pub fn write_grid_csv<W: std::io::Write>(nodes: &[GridNode], grid: &GridSpec, nv: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "i".to_string(),
        "j".into(),
        format!("x_{}", grid.dims[0] + 1),
        format!("x_{}", grid.dims[1] + 1),
        "feasible".into(),
        "v_norm".into(),
    ];
    header.extend((1..=nv).map(|k| format!("v_{k}")));
    w.write_record(&header)?;
    for n in nodes {
        let mut rec = vec![
            n.i.to_string(),
            n.j.to_string(),
            n.coords[0].to_string(),
            n.coords[1].to_string(),
            u8::from(n.feasible).to_string(),
        ];
        match &n.v {
            Some(v) => {
                rec.push(v.iter().map(|a| a * a).sum::<f64>().sqrt().to_string());
                rec.extend(v.iter().map(f64::to_string));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), nv + 1)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
