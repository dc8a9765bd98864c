//! Dense linear programming over H-polytopes `{z : C z ≤ h}`.
//!
//! `max cᵀz` is solved through its dual `min hᵀy, Cᵀy = c, y ≥ 0` with a
//! two-phase tableau simplex under Bland's rule. The dual tableau has only
//! `dim(z)` rows, which keeps pivots cheap when a polytope has many more
//! inequalities than coordinates (the usual situation for admissible sets).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpConfig {
    /// Feasibility tolerance on `C z ≤ h`.
    pub eps_feas: f64,
    /// Optimality tolerance on reduced costs, also used as the finite
    /// determination threshold.
    pub eps_opt: f64,
    /// Slack allowed when declaring a row redundant.
    pub eps_red: f64,
    pub max_pivots: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self {
            eps_feas: 1e-9,
            eps_opt: 1e-9,
            eps_red: 1e-8,
            max_pivots: 200_000,
        }
    }
}

/// Provenance of a polytope row: which source row it came from and at which
/// time shift.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowLabel {
    pub source: String,
    pub t: usize,
}

impl RowLabel {
    pub fn new(source: impl Into<String>, t: usize) -> Self {
        Self {
            source: source.into(),
            t,
        }
    }
}

impl fmt::Display for RowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.source, self.t)
    }
}

impl FromStr for RowLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (source, t) = s
            .rsplit_once('@')
            .ok_or_else(|| Error::Scenario(format!("malformed row label `{s}`")))?;
        let t = t
            .parse()
            .map_err(|_| Error::Scenario(format!("malformed time index in label `{s}`")))?;
        Ok(Self::new(source, t))
    }
}

/// `{z ∈ R^d : rows[i]·z ≤ h[i]}`
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    dim: usize,
    rows: Vec<Vec<f64>>,
    h: Vec<f64>,
    labels: Vec<RowLabel>,
}

impl Polytope {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            h: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_matrix(c: &DMatrix<f64>, h: &DVector<f64>, labels: Vec<RowLabel>) -> Result<Self> {
        if c.nrows() != h.len() || c.nrows() != labels.len() {
            return Err(Error::Dimension {
                expected: c.nrows(),
                got: h.len().min(labels.len()),
                context: "polytope rows/bounds/labels",
            });
        }
        let mut poly = Self::new(c.ncols());
        for (i, label) in labels.into_iter().enumerate() {
            poly.push(c.row(i).iter().copied().collect(), h[i], label);
        }
        Ok(poly)
    }

    pub fn push(&mut self, row: Vec<f64>, h: f64, label: RowLabel) {
        assert_eq!(row.len(), self.dim, "row length must equal polytope dimension");
        self.rows.push(row);
        self.h.push(h);
        self.labels.push(label);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn bounds(&self) -> &[f64] {
        &self.h
    }

    pub fn labels(&self) -> &[RowLabel] {
        &self.labels
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim, |i, j| self.rows[i][j])
    }

    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut out = Self::new(self.dim);
        for &i in keep {
            out.push(self.rows[i].clone(), self.h[i], self.labels[i].clone());
        }
        out
    }

    /// Largest `row·z - h` over all rows (`-inf` for an empty description).
    pub fn max_margin(&self, z: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.h)
            .map(|(r, &h)| dot(r, z) - h)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        self.rows
            .iter()
            .zip(&self.h)
            .all(|(r, &h)| dot(r, z) <= h + tol)
    }

    /// CSV: first line `m,d`, then one line per row `c_1,…,c_d,h,label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record([self.len().to_string(), self.dim.to_string()])?;
        for ((row, h), label) in self.rows.iter().zip(&self.h).zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(h.to_string());
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut records = rdr.records();
        let head = records
            .next()
            .ok_or_else(|| Error::Scenario("empty polytope file".into()))??;
        let parse_usize = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Scenario(format!("bad polytope header field `{s}`")))
        };
        if head.len() != 2 {
            return Err(Error::Scenario("polytope header must be `m,d`".into()));
        }
        let m = parse_usize(&head[0])?;
        let d = parse_usize(&head[1])?;
        let mut poly = Self::new(d);
        for rec in records {
            let rec = rec?;
            if rec.len() != d + 2 {
                return Err(Error::Scenario(format!(
                    "polytope row has {} fields, expected {}",
                    rec.len(),
                    d + 2
                )));
            }
            let nums = (0..=d)
                .map(|i| {
                    rec[i]
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Scenario(format!("bad number `{}`", &rec[i])))
                })
                .collect::<Result<Vec<_>>>()?;
            let label: RowLabel = rec[d + 1].parse()?;
            poly.push(nums[..d].to_vec(), nums[d], label);
        }
        if poly.len() != m {
            return Err(Error::Scenario(format!(
                "polytope header announces {m} rows, found {}",
                poly.len()
            )));
        }
        Ok(poly)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Unbounded,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpResult {
    pub status: LpStatus,
    /// Optimal value; `+inf` when unbounded, `-inf` when infeasible.
    pub value: f64,
    pub witness: Option<DVector<f64>>,
}

impl LpResult {
    fn unbounded() -> Self {
        Self {
            status: LpStatus::Unbounded,
            value: f64::INFINITY,
            witness: None,
        }
    }

    fn infeasible() -> Self {
        Self {
            status: LpStatus::Infeasible,
            value: f64::NEG_INFINITY,
            witness: None,
        }
    }
}

/// Anything that can maximise a linear objective over `rows·z ≤ rhs`.
pub trait LpSolver: Sync {
    fn maximize(&self, objective: &[f64], rows: &[&[f64]], rhs: &[f64]) -> Result<LpResult>;
}

/// In-crate dense simplex on the dual problem with Bland's rule.
#[derive(Clone, Copy, Debug, Default)]
pub struct DenseSimplex {
    pub config: LpConfig,
}

impl DenseSimplex {
    pub fn new(config: LpConfig) -> Self {
        Self { config }
    }
}

const PIVOT_TOL: f64 = 1e-9;
const ZERO_ROW: f64 = 1e-300;
/// Pivots between recomputations of the tableau from the original data.
const REFACTOR_EVERY: usize = 64;
/// Pivots without objective progress before switching to Bland's rule.
const STALL_LIMIT: usize = 50;

struct Tableau {
    /// Original constraint data, `d` rows of `ncols + 1` entries.
    orig: Vec<Vec<f64>>,
    /// Current tableau `B⁻¹ orig`; the last entry of a row is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    ncols: usize,
    pivots: usize,
}

enum Phase {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn new(orig: Vec<Vec<f64>>, basis: Vec<usize>) -> Self {
        let ncols = orig[0].len() - 1;
        Self {
            t: orig.clone(),
            orig,
            basis,
            ncols,
            pivots: 0,
        }
    }

    fn pivot(&mut self, r: usize, col: usize, obj: Option<&mut [f64]>) {
        let width = self.ncols + 1;
        let p = self.t[r][col];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[col];
            if f != 0.0 {
                for k in 0..width {
                    row[k] -= f * pivot_row[k];
                }
                row[col] = 0.0;
            }
        }
        if let Some(obj) = obj {
            let f = obj[col];
            if f != 0.0 {
                for k in 0..width {
                    obj[k] -= f * pivot_row[k];
                }
                obj[col] = 0.0;
            }
        }
        self.basis[r] = col;
        self.pivots += 1;
    }

    /// Recomputes `B⁻¹ orig` for the current basis; false if `B` is singular.
    fn refactor(&mut self) -> bool {
        let d = self.t.len();
        let b = DMatrix::from_fn(d, d, |i, k| self.orig[i][self.basis[k]]);
        let Some(inv) = b.try_inverse() else {
            return false;
        };
        for r in 0..d {
            let row = &mut self.t[r];
            row.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                let f = inv[(r, i)];
                if f != 0.0 {
                    for (v, o) in row.iter_mut().zip(&self.orig[i]) {
                        *v += f * o;
                    }
                }
            }
        }
        for (r, &j) in self.basis.iter().enumerate() {
            for (i, row) in self.t.iter_mut().enumerate() {
                row[j] = if i == r { 1.0 } else { 0.0 };
            }
        }
        true
    }

    /// Reduced costs; the last entry is minus the objective value.
    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut obj = vec![0.0; self.ncols + 1];
        obj[..self.ncols].copy_from_slice(cost);
        for (r, row) in self.t.iter().enumerate() {
            let cb = cost[self.basis[r]];
            if cb != 0.0 {
                for (o, v) in obj.iter_mut().zip(row) {
                    *o -= cb * v;
                }
            }
        }
        for &j in &self.basis {
            obj[j] = 0.0;
        }
        obj
    }

    /// Minimises `costᵀx` over columns `< allowed` (others never enter).
    /// Dantzig pricing; after a run of degenerate pivots it falls back to
    /// Bland's rule until the objective strictly improves, which rules out
    /// cycling.
    fn run(&mut self, cost: &[f64], allowed: usize, tol: f64, max_pivots: usize) -> Result<Phase> {
        let n = self.ncols;
        let mut obj = self.reduced_costs(cost);
        let mut fresh = true;
        let mut since_refactor = 0;
        let mut best = f64::INFINITY;
        let mut stalled = 0;
        let mut bland = false;
        loop {
            if self.pivots >= max_pivots {
                return Err(Error::SolverStall {
                    iterations: self.pivots,
                });
            }
            if since_refactor >= REFACTOR_EVERY {
                if self.refactor() {
                    obj = self.reduced_costs(cost);
                    fresh = true;
                }
                since_refactor = 0;
            }
            let entering = if bland {
                (0..allowed).find(|&j| obj[j] < -tol)
            } else {
                (0..allowed)
                    .filter(|&j| obj[j] < -tol)
                    .min_by(|&a, &b| obj[a].total_cmp(&obj[b]))
            };
            let Some(col) = entering else {
                // confirm on a freshly factored tableau
                if !fresh && self.refactor() {
                    obj = self.reduced_costs(cost);
                    fresh = true;
                    since_refactor = 0;
                    continue;
                }
                return Ok(Phase::Optimal);
            };
            let mut pick: Option<(usize, f64)> = None;
            for (r, row) in self.t.iter().enumerate() {
                let a = row[col];
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = row[n].max(0.0) / a;
                pick = match pick {
                    None => Some((r, ratio)),
                    Some((br, bratio)) => {
                        let slack = 1e-12 * (1.0 + bratio.abs());
                        let better = if ratio < bratio - slack {
                            true
                        } else if ratio <= bratio + slack {
                            if bland {
                                self.basis[r] < self.basis[br]
                            } else {
                                a > self.t[br][col]
                            }
                        } else {
                            false
                        };
                        if better {
                            Some((r, ratio))
                        } else {
                            Some((br, bratio))
                        }
                    }
                };
            }
            let Some((r, _)) = pick else {
                if !fresh && self.refactor() {
                    obj = self.reduced_costs(cost);
                    fresh = true;
                    since_refactor = 0;
                    continue;
                }
                return Ok(Phase::Unbounded);
            };
            self.pivot(r, col, Some(&mut obj));
            fresh = false;
            since_refactor += 1;
            let value = -obj[n];
            if value < best - 1e-12 * (1.0 + best.abs().min(1e300)) {
                best = value;
                stalled = 0;
                bland = false;
            } else {
                stalled += 1;
                if stalled > STALL_LIMIT {
                    bland = true;
                }
            }
        }
    }
}

impl LpSolver for DenseSimplex {
    fn maximize(&self, objective: &[f64], rows: &[&[f64]], rhs: &[f64]) -> Result<LpResult> {
        let d = objective.len();
        assert_eq!(rows.len(), rhs.len());
        let cfg = &self.config;

        // Row equilibration; all-zero rows are either vacuous or infeasible.
        let mut cols: Vec<(Vec<f64>, f64)> = Vec::with_capacity(rows.len());
        for (row, &h) in rows.iter().zip(rhs) {
            debug_assert_eq!(row.len(), d);
            let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale <= ZERO_ROW {
                if h < -cfg.eps_feas {
                    return Ok(LpResult::infeasible());
                }
                continue;
            }
            cols.push((row.iter().map(|v| v / scale).collect(), h / scale));
        }

        let c_scale = objective.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let c: Vec<f64> = if c_scale > 0.0 {
            objective.iter().map(|v| v / c_scale).collect()
        } else {
            vec![0.0; d]
        };

        // Dual: min hᵀy subject to Cᵀy = c, y ≥ 0, with one artificial per
        // equation (rows flipped so the right-hand side is nonnegative).
        let m = cols.len();
        let ncols = m + d;
        let flip: Vec<f64> = c.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
        let mut orig = vec![vec![0.0; ncols + 1]; d];
        for (r, row) in orig.iter_mut().enumerate() {
            for (j, (a, _)) in cols.iter().enumerate() {
                row[j] = flip[r] * a[r];
            }
            row[m + r] = 1.0;
            row[ncols] = flip[r] * c[r];
        }
        let mut tab = Tableau::new(orig, (m..m + d).collect());

        // Phase 1: minimise the sum of artificials.
        let phase1: Vec<f64> = (0..ncols).map(|j| if j < m { 0.0 } else { 1.0 }).collect();
        tab.run(&phase1, m, cfg.eps_opt, cfg.max_pivots)?;
        let infeas: f64 = tab
            .basis
            .iter()
            .zip(&tab.t)
            .filter(|(&b, _)| b >= m)
            .map(|(_, row)| row[ncols].abs())
            .sum();
        if infeas > cfg.eps_feas.max(1e-9) {
            // Dual infeasible: primal is unbounded or infeasible.
            if c_scale == 0.0 {
                return Ok(LpResult::infeasible());
            }
            let zero = vec![0.0; d];
            let feas = self.maximize(&zero, rows, rhs)?;
            return Ok(if feas.status == LpStatus::Optimal {
                LpResult::unbounded()
            } else {
                LpResult::infeasible()
            });
        }
        // Drive remaining artificials out of the basis where possible.
        for r in 0..d {
            if tab.basis[r] >= m {
                let best = (0..m)
                    .filter(|&j| tab.t[r][j].abs() > PIVOT_TOL)
                    .max_by(|&a, &b| tab.t[r][a].abs().total_cmp(&tab.t[r][b].abs()));
                if let Some(j) = best {
                    tab.pivot(r, j, None);
                }
            }
        }

        // Phase 2: minimise hᵀy; artificials may not re-enter.
        let cost = |j: usize| if j < m { cols[j].1 } else { 0.0 };
        let phase2: Vec<f64> = (0..ncols).map(cost).collect();
        if let Phase::Unbounded = tab.run(&phase2, m, cfg.eps_opt, cfg.max_pivots)? {
            return Ok(LpResult::infeasible());
        }

        // Simplex multipliers from the final basis: E_Bᵀ π = cost_B, z = D π.
        let basis_mat = DMatrix::from_fn(d, d, |i, k| tab.orig[i][tab.basis[k]]);
        let costs = DVector::from_fn(d, |k, _| cost(tab.basis[k]));
        let pi = match basis_mat.transpose().lu().solve(&costs) {
            Some(pi) => pi,
            None => {
                // Fall back to the tableau's copy of the basis inverse.
                DVector::from_fn(d, |k, _| {
                    (0..d).map(|r| cost(tab.basis[r]) * tab.t[r][m + k]).sum()
                })
            }
        };
        let z = DVector::from_fn(d, |i, _| flip[i] * pi[i]);
        let value = dot(objective, z.as_slice());
        Ok(LpResult {
            status: LpStatus::Optimal,
            value,
            witness: Some(z),
        })
    }
}

/// Maximises `cᵀz` over `poly` with the default dense simplex.
pub fn lp_max(c: &[f64], poly: &Polytope) -> Result<LpResult> {
    lp_max_with(&DenseSimplex::default(), c, poly)
}

pub fn lp_max_with(solver: &dyn LpSolver, c: &[f64], poly: &Polytope) -> Result<LpResult> {
    if c.len() != poly.dim() {
        return Err(Error::Dimension {
            expected: poly.dim(),
            got: c.len(),
            context: "lp_max objective",
        });
    }
    let rows: Vec<&[f64]> = poly.rows.iter().map(Vec::as_slice).collect();
    solver.maximize(c, &rows, &poly.h)
}

fn row_redundant_against(
    solver: &dyn LpSolver,
    poly: &Polytope,
    i: usize,
    active: &[bool],
    eps_red: f64,
) -> Result<bool> {
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut rhs = Vec::new();
    for (k, keep) in active.iter().enumerate() {
        if *keep && k != i {
            rows.push(&poly.rows[k]);
            rhs.push(poly.h[k]);
        }
    }
    let res = solver
        .maximize(&poly.rows[i], &rows, &rhs)
        .map_err(|e| Error::RowSolve {
            label: poly.labels[i].to_string(),
            source: Box::new(e),
        })?;
    Ok(match res.status {
        LpStatus::Optimal => res.value <= poly.h[i] + eps_red,
        LpStatus::Unbounded => false,
        LpStatus::Infeasible => true,
    })
}

/// Removes rows implied by the others. Equivalent to testing rows one by one
/// in order against the currently surviving set; rows that are irredundant
/// against the full description are identified first, in parallel.
pub fn reduce_polytope(poly: &Polytope) -> Result<Polytope> {
    reduce_polytope_with(&DenseSimplex::default(), poly, LpConfig::default().eps_red)
}

pub fn reduce_polytope_with(solver: &dyn LpSolver, poly: &Polytope, eps_red: f64) -> Result<Polytope> {
    let m = poly.len();
    let mut active = vec![true; m];
    for (i, row) in poly.rows.iter().enumerate() {
        let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale <= ZERO_ROW && poly.h[i] >= 0.0 {
            active[i] = false;
        }
    }
    let candidates: Vec<usize> = (0..m)
        .into_par_iter()
        .filter(|&i| active[i])
        .map(|i| row_redundant_against(solver, poly, i, &active, eps_red).map(|r| (i, r)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter_map(|(i, redundant)| redundant.then_some(i))
        .collect();
    for i in candidates {
        if row_redundant_against(solver, poly, i, &active, eps_red)? {
            active[i] = false;
        }
    }
    let keep: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
    Ok(poly.subset(&keep))
}
