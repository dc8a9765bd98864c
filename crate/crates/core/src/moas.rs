//! Maximal output admissible sets of `z⁺ = Φ z` under `C z ≤ h`, computed by
//! finite determination: constraint rows `C Φ^t` are accumulated until every
//! row at the next time shift is implied by the ones already collected.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::{
    build_lifted, positivity_rows, spectral_radius, LiftedSystem, PlantModel,
    PolynomialConstraint, RowKind,
};
use crate::linprog::{
    reduce_polytope_with, DenseSimplex, LpConfig, LpSolver, LpStatus, Polytope, RowLabel,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoasConfig {
    pub k_max: usize,
    pub lp: LpConfig,
    /// Multiplies every bound before determination. 1.0 computes the exact set.
    pub shrink: f64,
    /// Proceed (with a warning) when the observability test fails.
    pub waive_observability: bool,
}

impl Default for MoasConfig {
    fn default() -> Self {
        Self {
            k_max: 1000,
            lp: LpConfig::default(),
            shrink: 1.0,
            waive_observability: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub rank: usize,
    pub dim: usize,
    pub observable: bool,
}

/// Rank test on the stacked matrix `[C; CΦ; …; CΦ^{d-1}]`. Rows are
/// normalised before the SVD so that decaying powers do not masquerade as
/// rank loss.
pub fn check_observability(phi: &DMatrix<f64>, c: &DMatrix<f64>) -> ObservabilityReport {
    let d = phi.nrows();
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    let mut cur = c.clone();
    for _ in 0..d {
        for row in cur.row_iter() {
            let scale = row.amax();
            if scale > 0.0 {
                blocks.push(row.iter().map(|v| v / scale).collect());
            }
        }
        cur = &cur * phi;
    }
    let rank = if blocks.is_empty() {
        0
    } else {
        let obs = DMatrix::from_fn(blocks.len(), d, |i, j| blocks[i][j]);
        let sv = obs.singular_values();
        let max = sv.max();
        sv.iter().filter(|&&s| s > max * 1e-10 && s > 0.0).count()
    };
    ObservabilityReport {
        rank,
        dim: d,
        observable: rank == d,
    }
}

#[derive(Clone, Debug)]
pub struct Moas {
    pub poly: Polytope,
    /// Finite-determination index: rows up to time shift `k_star` suffice.
    pub k_star: usize,
    pub n_raw: usize,
    pub n_reduced: usize,
    pub observability: ObservabilityReport,
    /// Largest `lp value - h` among next-step rows, per iteration.
    pub margins: Vec<f64>,
    pub eps_feas: f64,
}

impl Moas {
    pub fn dim(&self) -> usize {
        self.poly.dim()
    }

    pub fn contains(&self, z: &[f64]) -> Result<bool> {
        self.contains_tol(z, self.eps_feas)
    }

    pub fn contains_tol(&self, z: &[f64], tol: f64) -> Result<bool> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.len(),
                context: "moas membership",
            });
        }
        Ok(self.poly.contains(z, tol))
    }

    pub fn max_margin(&self, z: &[f64]) -> f64 {
        self.poly.max_margin(z)
    }
}

pub fn build_moas(phi: &DMatrix<f64>, c: &DMatrix<f64>, h: &DVector<f64>, cfg: &MoasConfig) -> Result<Moas> {
    let sources: Vec<String> = (0..c.nrows()).map(|i| format!("c{i}")).collect();
    build_moas_labeled(phi, c, h, &sources, cfg)
}

/// Finite determination with explicit provenance names for the rows of `c`.
pub fn build_moas_labeled(
    phi: &DMatrix<f64>,
    c: &DMatrix<f64>,
    h: &DVector<f64>,
    sources: &[String],
    cfg: &MoasConfig,
) -> Result<Moas> {
    let d = phi.nrows();
    if !phi.is_square() || c.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: c.ncols(),
            context: "moas constraint columns",
        });
    }
    if c.nrows() != h.len() || sources.len() != h.len() {
        return Err(Error::Dimension {
            expected: c.nrows(),
            got: h.len(),
            context: "moas bounds",
        });
    }
    let rho = spectral_radius(phi);
    if rho >= 1.0 {
        return Err(Error::Plant(format!("dynamics are not Schur (spectral radius {rho})")));
    }
    let observability = check_observability(phi, c);
    if !observability.observable {
        if cfg.waive_observability {
            log::warn!(
                "observability rank {} < {}; continuing because the check was waived",
                observability.rank,
                observability.dim
            );
        } else {
            return Err(Error::Unobservable {
                rank: observability.rank,
                dim: observability.dim,
            });
        }
    }

    // Unit ∞-norm rows; the set is unchanged and tolerances become relative.
    let mut base = c.clone();
    let mut bound = h.clone() * cfg.shrink;
    for i in 0..base.nrows() {
        let s = base.row(i).amax();
        if s > 0.0 {
            base.row_mut(i).unscale_mut(s);
            bound[i] /= s;
        }
    }

    let solver = DenseSimplex::new(cfg.lp);
    let eps = cfg.lp.eps_opt;
    let mut poly = Polytope::new(d);
    for i in 0..base.nrows() {
        if base.row(i).amax() > 0.0 {
            poly.push(base.row(i).iter().copied().collect(), bound[i], RowLabel::new(&sources[i], 0));
        }
    }

    let mut margins = Vec::new();
    let mut next = &base * phi;
    let mut k_star = None;
    for k in 0..cfg.k_max {
        let rows: Vec<&[f64]> = poly.rows().iter().map(Vec::as_slice).collect();
        let results: Vec<f64> = (0..next.nrows())
            .into_par_iter()
            .map(|i| {
                let obj: Vec<f64> = next.row(i).iter().copied().collect();
                if obj.iter().all(|v| *v == 0.0) {
                    return Ok(-bound[i]);
                }
                let r = solver.maximize(&obj, &rows, poly.bounds())?;
                Ok(match r.status {
                    LpStatus::Optimal => r.value - bound[i],
                    LpStatus::Unbounded => f64::INFINITY,
                    LpStatus::Infeasible => f64::NEG_INFINITY,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let worst = results.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        log::debug!("moas iteration {k}: rows {} worst margin {worst:e}", poly.len());
        margins.push(worst);
        if worst <= eps {
            k_star = Some(k);
            break;
        }
        // Rows already implied by the accumulated set do not change it.
        for (i, m) in results.iter().enumerate() {
            if *m > eps {
                poly.push(
                    next.row(i).iter().copied().collect(),
                    bound[i],
                    RowLabel::new(&sources[i], k + 1),
                );
            }
        }
        next = &next * phi;
    }
    let Some(k_star) = k_star else {
        return Err(Error::NotDetermined {
            k_max: cfg.k_max,
            margin: margins.last().copied().unwrap_or(f64::INFINITY),
        });
    };

    let n_raw = poly.len();
    let reduced = reduce_polytope_with(&solver, &poly, cfg.lp.eps_red)?;
    let n_reduced = reduced.len();
    log::info!("finitely determined at k* = {k_star}: {n_raw} rows, {n_reduced} irredundant");
    Ok(Moas {
        poly: reduced,
        k_star,
        n_raw,
        n_reduced,
        observability,
        margins,
        eps_feas: cfg.lp.eps_feas,
    })
}

/// Per-coordinate extrema of the degree-1 admissible set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn degree1_bounds(moas1: &Moas) -> Result<BoundsBox> {
    let d = moas1.dim();
    let solver = DenseSimplex::default();
    let rows: Vec<&[f64]> = moas1.poly.rows().iter().map(Vec::as_slice).collect();
    let ext = (0..2 * d)
        .into_par_iter()
        .map(|k| {
            let (i, sign) = (k / 2, if k % 2 == 0 { 1.0 } else { -1.0 });
            let mut obj = vec![0.0; d];
            obj[i] = sign;
            let r = solver.maximize(&obj, &rows, moas1.poly.bounds())?;
            match r.status {
                LpStatus::Optimal => Ok(sign * r.value),
                _ => Err(Error::Unbounded { coord: i }),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(BoundsBox {
        hi: ext.iter().step_by(2).copied().collect(),
        lo: ext.iter().skip(1).step_by(2).copied().collect(),
    })
}

/// `[lo, hi]^e`
pub fn interval_pow(lo: f64, hi: f64, e: u32) -> (f64, f64) {
    if e == 0 {
        return (1.0, 1.0);
    }
    let (a, b) = (lo.powi(e as i32), hi.powi(e as i32));
    if e % 2 == 1 {
        (a, b)
    } else if lo <= 0.0 && hi >= 0.0 {
        (0.0, a.max(b))
    } else {
        (a.min(b), a.max(b))
    }
}

pub fn interval_mul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let corners = [a.0 * b.0, a.0 * b.1, a.1 * b.0, a.1 * b.1];
    (
        corners.iter().copied().fold(f64::INFINITY, f64::min),
        corners.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}

pub fn monomial_interval(bounds: &BoundsBox, exponent: &[u32]) -> (f64, f64) {
    exponent
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 0)
        .fold((1.0, 1.0), |acc, (i, &e)| {
            interval_mul(acc, interval_pow(bounds.lo[i], bounds.hi[i], e))
        })
}

/// Box rows on every higher-degree coordinate of `Z`, from interval
/// arithmetic over the degree-1 extrema.
#[allow(clippy::type_complexity)]
pub fn bounds_augment(
    lifted: &LiftedSystem,
    moas1: &Moas,
) -> Result<(DMatrix<f64>, DVector<f64>, Vec<RowKind>, BoundsBox)> {
    if moas1.dim() != lifted.dim1() {
        return Err(Error::Dimension {
            expected: lifted.dim1(),
            got: moas1.dim(),
            context: "bounds_augment degree-1 set",
        });
    }
    let bounds = degree1_bounds(moas1)?;
    let dim = lifted.dim();
    let higher: Vec<usize> = (lifted.dim1()..dim).collect();
    let mut c = DMatrix::zeros(2 * higher.len(), dim);
    let mut h = DVector::zeros(2 * higher.len());
    let mut kinds = Vec::with_capacity(2 * higher.len());
    for (r, &k) in higher.iter().enumerate() {
        let (lo, hi) = monomial_interval(&bounds, lifted.exponent(k));
        c[(2 * r, k)] = 1.0;
        h[2 * r] = hi;
        c[(2 * r + 1, k)] = -1.0;
        h[2 * r + 1] = -lo;
        kinds.push(RowKind::UpperBound(k));
        kinds.push(RowKind::LowerBound(k));
    }
    Ok((c, h, kinds, bounds))
}

/// Everything the governor needs: the lifted system with all rows, the
/// degree-1 set, the full set and the degree-1 extrema.
#[derive(Clone, Debug)]
pub struct AdmissibleSet {
    pub plant: PlantModel,
    pub constraints: Vec<PolynomialConstraint>,
    pub lifted: LiftedSystem,
    pub moas1: Moas,
    pub moas: Moas,
    pub bounds: BoundsBox,
}

fn v_box_rows(nx: usize, nv: usize, dim: usize, v_box: &[(f64, f64)]) -> Result<(DMatrix<f64>, DVector<f64>, Vec<RowKind>)> {
    if v_box.len() != nv {
        return Err(Error::Dimension {
            expected: nv,
            got: v_box.len(),
            context: "v box",
        });
    }
    let mut c = DMatrix::zeros(2 * nv, dim);
    let mut h = DVector::zeros(2 * nv);
    for (i, &(lo, hi)) in v_box.iter().enumerate() {
        if !(lo <= 0.0 && hi >= 0.0) {
            return Err(Error::Constraint(format!("v box [{lo}, {hi}] must contain 0")));
        }
        c[(2 * i, nx + i)] = 1.0;
        h[2 * i] = hi;
        c[(2 * i + 1, nx + i)] = -1.0;
        h[2 * i + 1] = -lo;
    }
    Ok((c, h, (0..2 * nv).map(RowKind::VBox).collect()))
}

fn labels(kinds: &[RowKind]) -> Vec<String> {
    kinds.iter().map(ToString::to_string).collect()
}

pub fn build_admissible_set(
    plant: &PlantModel,
    constraints: &[PolynomialConstraint],
    v_box: Option<&[(f64, f64)]>,
    cfg: &MoasConfig,
) -> Result<AdmissibleSet> {
    let linear_idx: Vec<usize> = (0..constraints.len())
        .filter(|&i| constraints[i].degree() == 1)
        .collect();
    if linear_idx.is_empty() && v_box.is_none() {
        return Err(Error::Constraint(
            "bounding the lifted coordinates needs at least one linear constraint or a v box".into(),
        ));
    }
    let phi = plant.phi();
    let n = plant.n();

    let (mut c1, mut h1, mut kinds1) = if linear_idx.is_empty() {
        (DMatrix::zeros(0, n), DVector::zeros(0), Vec::new())
    } else {
        let linear: Vec<_> = linear_idx.iter().map(|&i| constraints[i].clone()).collect();
        let l1 = build_lifted(plant, &linear)?;
        (l1.cz, l1.hz, linear_idx.iter().map(|&i| RowKind::Constraint(i)).collect())
    };
    if let Some(vb) = v_box {
        let (c, h, k) = v_box_rows(plant.nx(), plant.nv(), n, vb)?;
        c1 = stack(&c1, &c);
        h1 = stack_vec(&h1, &h);
        kinds1.extend(k);
    }
    let moas1 = build_moas_labeled(&phi, &c1, &h1, &labels(&kinds1), cfg)?;

    let mut lifted = build_lifted(plant, constraints)?;
    if let Some(vb) = v_box {
        let (c, h, k) = v_box_rows(plant.nx(), plant.nv(), lifted.dim(), vb)?;
        lifted.append_rows(&c, &h, &k);
    }
    let (moas, bounds) = if lifted.p == 1 {
        (moas1.clone(), degree1_bounds(&moas1)?)
    } else {
        let (pc, ph, pk) = positivity_rows(&lifted);
        lifted.append_rows(&pc, &ph, &pk);
        let (bc, bh, bk, bounds) = bounds_augment(&lifted, &moas1)?;
        lifted.append_rows(&bc, &bh, &bk);
        let moas = build_moas_labeled(
            &lifted.phi_z,
            &lifted.cz,
            &lifted.hz,
            &labels(&lifted.row_kinds),
            cfg,
        )?;
        (moas, bounds)
    };
    Ok(AdmissibleSet {
        plant: plant.clone(),
        constraints: constraints.to_vec(),
        lifted,
        moas1,
        moas,
        bounds,
    })
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

impl AdmissibleSet {
    /// Consistent lift of `(x, v)` and its membership.
    pub fn admits(&self, x: &[f64], v: &[f64]) -> Result<bool> {
        let z = self.lifted.build_z(x, v)?;
        self.moas.contains(z.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub tested: usize,
    pub violations: usize,
    /// Largest margin of a propagated point (≤ eps_feas when no violation).
    pub worst_margin: f64,
}

/// Draws consistent points `Z = build_Z(x, v)` strictly inside the set. Each
/// draw picks a random direction in the degree-1 box, locates the boundary
/// along that ray from the origin by bisection, and keeps either the boundary
/// point or a uniformly scaled interior point, alternately.
pub fn sample_consistent_points<R: Rng>(set: &AdmissibleSet, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let (nx, n) = (set.lifted.nx, set.lifted.n());
    let b = &set.bounds;
    let lift = |xv: &[f64]| {
        set.lifted
            .build_z(&xv[..nx], &xv[nx..])
            .expect("dimensions are consistent by construction")
    };
    let inside = |xv: &[f64]| {
        set.moas
            .contains_tol(lift(xv).as_slice(), 0.0)
            .expect("dimensions are consistent by construction")
    };
    let scaled = |u: &[f64], s: f64| -> Vec<f64> { u.iter().map(|v| v * s).collect() };
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count && attempts < 20 * count.max(1) {
        attempts += 1;
        let u: Vec<f64> = (0..n)
            .map(|i| {
                if b.hi[i] > b.lo[i] {
                    rng.gen_range(b.lo[i]..=b.hi[i])
                } else {
                    b.lo[i]
                }
            })
            .collect();
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        if inside(&u) {
            lo = 1.0;
        } else {
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if inside(&scaled(&u, mid)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        if lo == 0.0 {
            continue;
        }
        let s = if out.len() % 2 == 0 { lo } else { lo * rng.gen::<f64>() };
        let p = scaled(&u, s);
        if inside(&p) {
            out.push(lift(&p));
        }
    }
    out
}

/// One-step forward invariance on sampled consistent points.
pub fn check_forward_invariance<R: Rng>(set: &AdmissibleSet, count: usize, rng: &mut R) -> InvarianceReport {
    let pts = sample_consistent_points(set, count, rng);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for z in &pts {
        let next = &set.lifted.phi_z * z;
        let m = set.moas.max_margin(next.as_slice());
        worst = worst.max(m);
        if m > set.moas.eps_feas {
            violations += 1;
        }
    }
    InvarianceReport {
        tested: pts.len(),
        violations,
        worst_margin: worst,
    }
}
