//! Reference governor: a minimum-norm admissible `v` at start-up, then a
//! bisection on the scaling `κ ∈ [0, λ]` of the previous reference.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linprog::{lp_max, reduce_polytope_with, DenseSimplex, LpStatus, Polytope, RowLabel};
use crate::monomial::eval_monomial;
use crate::moas::AdmissibleSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GovernorConfig {
    /// Relative bracket width on κ at which bisection stops.
    pub tol_bisect: f64,
    pub max_bisect_iters: usize,
    /// Points per reference coordinate in the first search grid.
    pub coarse_points: usize,
    /// Target grid step per reference coordinate for the start-up search.
    pub resolution: f64,
    /// Minimum number of local refinements.
    pub refine_rounds: usize,
    /// Drop rows that are implied by the others once `x` is fixed.
    pub presimplify: bool,
}

impl Default for GovernorConfig {
    fn default() -> Self {
        Self {
            tol_bisect: 1e-3,
            max_bisect_iters: 30,
            coarse_points: 41,
            resolution: 1e-4,
            refine_rounds: 3,
            presimplify: true,
        }
    }
}

/// The set's rows with `x` fixed: `W m(v) ≤ g`, where `m(v)` lists the
/// monomials of `v` that appear in the lift.
#[derive(Clone, Debug)]
pub struct FixedStateRows {
    pub nv: usize,
    pub monomials: Vec<Vec<u32>>,
    pub w: Vec<Vec<f64>>,
    pub g: Vec<f64>,
}

const VFREE_TOL: f64 = 1e-13;

impl FixedStateRows {
    /// Fails with `InfeasibleInit` when a row that does not involve `v` is
    /// already violated at `x`.
    pub fn new(set: &AdmissibleSet, x: &[f64], presimplify: bool) -> Result<Self> {
        let lifted = &set.lifted;
        let (nx, nv) = (lifted.nx, lifted.nv);
        if x.len() != nx {
            return Err(Error::Dimension {
                expected: nx,
                got: x.len(),
                context: "governor state",
            });
        }
        let eps = set.moas.eps_feas;
        let dim = lifted.dim();
        // coordinate k of Z = coef[k] * m_{col[k]}(v), col = None for v-free
        let mut cols: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        let mut coef = Vec::with_capacity(dim);
        let mut col = Vec::with_capacity(dim);
        for k in 0..dim {
            let e = lifted.exponent(k);
            coef.push(eval_monomial(x, &e[..nx]));
            let ev = e[nx..].to_vec();
            if ev.iter().all(|&d| d == 0) {
                col.push(None);
            } else {
                let next = cols.len();
                col.push(Some(*cols.entry(ev).or_insert(next)));
            }
        }
        let mut monomials = vec![Vec::new(); cols.len()];
        for (e, &i) in &cols {
            monomials[i] = e.clone();
        }

        let mut w = Vec::new();
        let mut g = Vec::new();
        for (row, &h) in set.moas.poly.rows().iter().zip(set.moas.poly.bounds()) {
            let mut wr = vec![0.0; monomials.len()];
            let mut constant = 0.0;
            for k in 0..dim {
                let c = row[k] * coef[k];
                match col[k] {
                    Some(j) => wr[j] += c,
                    None => constant += c,
                }
            }
            let scale = wr.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let rhs = h - constant;
            if scale <= VFREE_TOL {
                if rhs < -eps {
                    return Err(Error::InfeasibleInit);
                }
                continue;
            }
            w.push(wr.iter().map(|v| v / scale).collect::<Vec<_>>());
            g.push(rhs / scale);
        }
        let mut out = Self { nv, monomials, w, g };
        if presimplify && !out.w.is_empty() {
            out = out.presimplified()?;
        }
        Ok(out)
    }

    /// Removes rows implied by the others over the relaxation in which each
    /// monomial of `v` is a free coordinate; anything implied there is
    /// implied on the true set of monomials.
    fn presimplified(self) -> Result<Self> {
        let mut poly = Polytope::new(self.monomials.len());
        for (i, (r, &h)) in self.w.iter().zip(&self.g).enumerate() {
            poly.push(r.clone(), h, RowLabel::new("fixed", i));
        }
        if lp_max(&vec![0.0; poly.dim()], &poly)?.status == LpStatus::Infeasible {
            return Err(Error::InfeasibleInit);
        }
        let reduced = reduce_polytope_with(&DenseSimplex::default(), &poly, 0.0)?;
        Ok(Self {
            w: reduced.rows().to_vec(),
            g: reduced.bounds().to_vec(),
            ..self
        })
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn max_margin(&self, v: &[f64]) -> f64 {
        let m: Vec<f64> = self.monomials.iter().map(|e| eval_monomial(v, e)).collect();
        self.w
            .iter()
            .zip(&self.g)
            .map(|(r, h)| r.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() - h)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn admits(&self, v: &[f64], tol: f64) -> bool {
        self.max_margin(v) <= tol
    }
}

const MAX_GRID_POINTS: usize = 1 << 22;

fn grid_points<'a>(lo: &'a [f64], hi: &'a [f64], count: usize) -> impl Iterator<Item = Vec<f64>> + 'a {
    let d = lo.len();
    let total = count.pow(d as u32);
    (0..total).map(move |mut idx| {
        (0..d)
            .map(|i| {
                let k = idx % count;
                idx /= count;
                if count == 1 {
                    0.5 * (lo[i] + hi[i])
                } else {
                    lo[i] + (hi[i] - lo[i]) * (k as f64 / (count - 1) as f64)
                }
            })
            .collect()
    })
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Feasible point of least norm on a grid, if any.
fn best_on_grid(rows: &FixedStateRows, lo: &[f64], hi: &[f64], count: usize) -> Option<Vec<f64>> {
    grid_points(lo, hi, count)
        .filter(|v| rows.admits(v, 0.0))
        .min_by(|a, b| norm_sq(a).total_cmp(&norm_sq(b)))
}

/// Minimum-norm `v` with `(x0, v)` in the set, up to the search resolution.
pub fn init_v(set: &AdmissibleSet, x0: &[f64], cfg: &GovernorConfig) -> Result<DVector<f64>> {
    let nv = set.lifted.nv;
    let nx = set.lifted.nx;
    let zero = vec![0.0; nv];
    if set.admits(x0, &zero)? {
        return Ok(DVector::zeros(nv));
    }
    let rows = FixedStateRows::new(set, x0, cfg.presimplify)?;

    let lo: Vec<f64> = set.bounds.lo[nx..nx + nv].to_vec();
    let hi: Vec<f64> = set.bounds.hi[nx..nx + nv].to_vec();
    let coarse = cfg.coarse_points.max(3);

    // Thin feasible sets may slip between coarse nodes; densify until found.
    let mut count = coarse;
    let mut best = None;
    while best.is_none() {
        best = best_on_grid(&rows, &lo, &hi, count);
        let next = 4 * (count - 1) + 1;
        let fine = (0..nv).all(|i| (hi[i] - lo[i]) / ((count - 1) as f64) < cfg.resolution);
        if best.is_some() || fine || next.checked_pow(nv as u32).is_none_or(|t| t > MAX_GRID_POINTS) {
            break;
        }
        count = next;
    }
    let Some(mut best) = best else {
        return Err(Error::InfeasibleInit);
    };

    let mut step: Vec<f64> = (0..nv).map(|i| (hi[i] - lo[i]) / (count - 1).max(1) as f64).collect();
    let mut round = 0;
    while round < cfg.refine_rounds || step.iter().any(|&s| s > cfg.resolution) {
        if round >= 40 {
            break;
        }
        let wlo: Vec<f64> = (0..nv).map(|i| (best[i] - 2.0 * step[i]).max(lo[i])).collect();
        let whi: Vec<f64> = (0..nv).map(|i| (best[i] + 2.0 * step[i]).min(hi[i])).collect();
        if let Some(b) = best_on_grid(&rows, &wlo, &whi, coarse) {
            if norm_sq(&b) <= norm_sq(&best) {
                best = b;
            }
        }
        for (i, s) in step.iter_mut().enumerate() {
            *s = (whi[i] - wlo[i]) / (coarse - 1) as f64;
        }
        round += 1;
    }

    // Slide towards the origin along the ray through the best node.
    let (mut s_lo, mut s_hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (s_lo + s_hi);
        let v: Vec<f64> = best.iter().map(|a| a * mid).collect();
        if rows.admits(&v, 0.0) {
            s_hi = mid;
        } else {
            s_lo = mid;
        }
    }
    let v: Vec<f64> = best.iter().map(|a| a * s_hi).collect();
    if set.admits(x0, &v)? {
        Ok(DVector::from_vec(v))
    } else if set.admits(x0, &best)? {
        Ok(DVector::from_vec(best))
    } else {
        Err(Error::InfeasibleInit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub v: DVector<f64>,
    pub kappa: f64,
    /// Membership tests spent on this step.
    pub checks: usize,
}

/// Smallest admissible `κ ∈ [0, λ]` for `κ v_prev`, by bisection.
pub fn bisection_step(
    set: &AdmissibleSet,
    x: &[f64],
    v_prev: &[f64],
    cfg: &GovernorConfig,
) -> Result<StepOutcome> {
    let nv = set.lifted.nv;
    if v_prev.len() != nv {
        return Err(Error::Dimension {
            expected: nv,
            got: v_prev.len(),
            context: "governor reference",
        });
    }
    let zero = || StepOutcome {
        v: DVector::zeros(nv),
        kappa: 0.0,
        checks: 0,
    };
    if v_prev.iter().all(|&a| a == 0.0) {
        return Ok(zero());
    }
    let scaled = |k: f64| -> Vec<f64> { v_prev.iter().map(|a| a * k).collect() };
    let margin = |k: f64| -> Result<f64> {
        let z = set.lifted.build_z(x, &scaled(k))?;
        Ok(set.moas.max_margin(z.as_slice()))
    };
    let eps = set.moas.eps_feas;
    let mut checks = 1;
    if margin(0.0)? <= eps {
        return Ok(StepOutcome { checks, ..zero() });
    }
    let lambda = set.plant.lambda;
    checks += 1;
    let m = margin(lambda)?;
    if m > eps {
        return Err(Error::InvarianceViolation { margin: m });
    }
    let (mut lo, mut hi) = (0.0, lambda);
    let mut iters = 0;
    while hi - lo > cfg.tol_bisect * hi && iters < cfg.max_bisect_iters {
        let mid = 0.5 * (lo + hi);
        checks += 1;
        if margin(mid)? <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        iters += 1;
    }
    Ok(StepOutcome {
        v: DVector::from_vec(scaled(hi)),
        kappa: hi,
        checks,
    })
}

#[derive(Clone, Debug)]
pub struct GovernorState {
    pub v: DVector<f64>,
    pub kappa_history: Vec<f64>,
    pub config: GovernorConfig,
}

impl GovernorState {
    pub fn initialize(set: &AdmissibleSet, x0: &[f64], config: GovernorConfig) -> Result<Self> {
        Ok(Self {
            v: init_v(set, x0, &config)?,
            kappa_history: Vec::new(),
            config,
        })
    }

    pub fn update(&mut self, set: &AdmissibleSet, x: &[f64]) -> Result<StepOutcome> {
        let out = bisection_step(set, x, self.v.as_slice(), &self.config)?;
        self.v = out.v.clone();
        self.kappa_history.push(out.kappa);
        Ok(out)
    }
}
