//! Lifted linear dynamics on the stacked monomial vector
//! `Z = [x_v; x_v^2; …; x_v^p]` and the linear rows that encode polynomial
//! constraints on `x_v = [x; v]`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monomial::{build_basis, eval_monomial, kron_digits, lift_vector, MonomialBasis};

/// Pre-stabilised plant `x⁺ = A x + B v` driven by the decaying reference
/// `v⁺ = λ v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lambda: f64,
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::Plant(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::Plant(format!(
                "B must have {} rows and at least one column, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::Plant(format!("lambda must lie in (0, 1), got {lambda}")));
        }
        let rho = spectral_radius(&a);
        if rho >= 1.0 {
            return Err(Error::Plant(format!("A is not Schur (spectral radius {rho})")));
        }
        Ok(Self { a, b, lambda })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nv(&self) -> usize {
        self.b.ncols()
    }

    /// Dimension of `x_v`.
    pub fn n(&self) -> usize {
        self.nx() + self.nv()
    }

    /// `Φ = [[A, B], [0, λI]]`
    pub fn phi(&self) -> DMatrix<f64> {
        let (nx, nv) = (self.nx(), self.nv());
        let mut phi = DMatrix::zeros(nx + nv, nx + nv);
        phi.view_mut((0, 0), (nx, nx)).copy_from(&self.a);
        phi.view_mut((0, nx), (nx, nv)).copy_from(&self.b);
        for i in 0..nv {
            phi[(nx + i, nx + i)] = self.lambda;
        }
        phi
    }

    pub fn step(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub exponents: Vec<u32>,
    #[serde(rename = "coeff")]
    pub coeff: f64,
}

impl Term {
    pub fn new(exponents: Vec<u32>, coeff: f64) -> Self {
        Self { exponents, coeff }
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }
}

/// One inequality `Σ coeff · monomial(x_v) ≤ bound` with no constant term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialConstraint {
    #[serde(default)]
    pub name: String,
    pub terms: Vec<Term>,
    pub bound: f64,
}

impl PolynomialConstraint {
    /// Folds constant terms into the bound and merges repeated monomials.
    /// Fails when the folded bound is negative, since the origin must be
    /// admissible.
    pub fn new(name: impl Into<String>, terms: Vec<Term>, bound: f64) -> Result<Self> {
        let name = name.into();
        let nvars = terms.first().map(|t| t.exponents.len()).unwrap_or(0);
        let mut merged: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        let mut folded = bound;
        for t in terms {
            if t.exponents.len() != nvars {
                return Err(Error::Constraint(format!(
                    "{name}: terms mix exponent lengths {} and {nvars}",
                    t.exponents.len()
                )));
            }
            if !t.coeff.is_finite() {
                return Err(Error::Constraint(format!("{name}: non-finite coefficient")));
            }
            if t.degree() == 0 {
                folded -= t.coeff;
            } else {
                *merged.entry(t.exponents).or_insert(0.0) += t.coeff;
            }
        }
        if !folded.is_finite() || folded < 0.0 {
            return Err(Error::Constraint(format!(
                "{name}: bound after folding constants is {folded}; the origin must satisfy every constraint"
            )));
        }
        let terms: Vec<Term> = merged
            .into_iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(e, c)| Term::new(e, c))
            .collect();
        if terms.is_empty() {
            return Err(Error::Constraint(format!("{name}: no non-constant terms")));
        }
        Ok(Self {
            name,
            terms,
            bound: folded,
        })
    }

    /// Re-validates a deserialized constraint.
    pub fn normalized(self) -> Result<Self> {
        Self::new(self.name, self.terms, self.bound)
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|t| t.degree() as usize).max().unwrap_or(0)
    }

    pub fn nvars(&self) -> usize {
        self.terms.first().map(|t| t.exponents.len()).unwrap_or(0)
    }

    /// Left-hand side at `x_v`.
    pub fn eval(&self, xv: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * eval_monomial(xv, &t.exponents))
            .sum()
    }

    pub fn margin(&self, xv: &[f64]) -> f64 {
        self.eval(xv) - self.bound
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.iter().map(|t| t.coeff.abs()).fold(0.0, f64::max)
    }
}

/// What produced a row of `C_Z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    Constraint(usize),
    Positivity(usize),
    UpperBound(usize),
    LowerBound(usize),
    VBox(usize),
}

impl fmt::Display for RowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowKind::Constraint(i) => write!(f, "c{i}"),
            RowKind::Positivity(k) => write!(f, "pos{k}"),
            RowKind::UpperBound(k) => write!(f, "ub{k}"),
            RowKind::LowerBound(k) => write!(f, "lb{k}"),
            RowKind::VBox(k) => write!(f, "vbox{k}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LiftedSystem {
    pub nx: usize,
    pub nv: usize,
    pub p: usize,
    /// `bases[j - 1]` is the degree-`j` basis over `nx + nv` variables.
    pub bases: Vec<MonomialBasis>,
    /// Start of each degree block in `Z`; the last entry is `dim(Z)`.
    pub block_offsets: Vec<usize>,
    /// `phi_blocks[j - 1] = Φ^j`
    pub phi_blocks: Vec<DMatrix<f64>>,
    pub phi_z: DMatrix<f64>,
    pub cz: DMatrix<f64>,
    pub hz: DVector<f64>,
    pub row_kinds: Vec<RowKind>,
}

/// `M_c (⊗^j φ) M_e` for a prebuilt basis of degree `j`.
pub fn lift_matrix_with(phi: &DMatrix<f64>, basis: &MonomialBasis) -> Result<DMatrix<f64>> {
    let m = basis.n;
    if phi.nrows() != m || phi.ncols() != m {
        return Err(Error::Dimension {
            expected: m,
            got: phi.nrows(),
            context: "lift_matrix",
        });
    }
    let j = basis.p;
    if j == 1 {
        return Ok(phi.clone());
    }
    let sig = basis.len();
    let len = basis.kron_len();
    let digits: Vec<Vec<usize>> = (0..len).map(|r| kron_digits(r, m, j)).collect();
    let mut preimages: Vec<Vec<usize>> = vec![Vec::new(); sig];
    for r in 0..len {
        preimages[basis.expansion_target(r)].push(r);
    }

    let mut out = DMatrix::zeros(sig, sig);
    let mut w = vec![0.0; len];
    for (b, pre) in preimages.iter().enumerate() {
        // w = (⊗φ) M_e e_b
        for (r, wr) in w.iter_mut().enumerate() {
            let dr = &digits[r];
            *wr = pre
                .iter()
                .map(|&s| {
                    dr.iter()
                        .zip(&digits[s])
                        .map(|(&ri, &si)| phi[(ri, si)])
                        .product::<f64>()
                })
                .sum();
        }
        for (a, row) in basis.mc_rows().iter().enumerate() {
            out[(a, b)] = row.iter().map(|&(r, c)| c * w[r]).sum();
        }
    }
    Ok(out)
}

/// Propagation matrix of the degree-`j` monomial vector under `x⁺ = φ x`.
pub fn lift_matrix(phi: &DMatrix<f64>, j: usize) -> Result<DMatrix<f64>> {
    if !phi.is_square() {
        return Err(Error::Dimension {
            expected: phi.nrows(),
            got: phi.ncols(),
            context: "lift_matrix (square)",
        });
    }
    if j == 1 {
        return Ok(phi.clone());
    }
    let basis = build_basis(phi.nrows(), j)?;
    lift_matrix_with(phi, &basis)
}

pub fn build_lifted(plant: &PlantModel, constraints: &[PolynomialConstraint]) -> Result<LiftedSystem> {
    if constraints.is_empty() {
        return Err(Error::Constraint("at least one constraint is required".into()));
    }
    let n = plant.n();
    for (i, c) in constraints.iter().enumerate() {
        if c.nvars() != n {
            return Err(Error::Dimension {
                expected: n,
                got: c.nvars(),
                context: "constraint exponent length",
            });
        }
        if c.terms.iter().any(|t| t.degree() == 0) {
            return Err(Error::Constraint(format!(
                "constraint {i} has a constant term; fold it into the bound"
            )));
        }
    }
    let p = constraints.iter().map(PolynomialConstraint::degree).max().unwrap_or(1);

    let bases = (1..=p).map(|j| build_basis(n, j)).collect::<Result<Vec<_>>>()?;
    let mut block_offsets = vec![0];
    for b in &bases {
        block_offsets.push(block_offsets.last().unwrap() + b.len());
    }
    let dim = *block_offsets.last().unwrap();

    let phi = plant.phi();
    let phi_blocks = bases
        .iter()
        .map(|b| lift_matrix_with(&phi, b))
        .collect::<Result<Vec<_>>>()?;
    let mut phi_z = DMatrix::zeros(dim, dim);
    for (j, blk) in phi_blocks.iter().enumerate() {
        let off = block_offsets[j];
        phi_z.view_mut((off, off), blk.shape()).copy_from(blk);
    }

    let mut cz = DMatrix::zeros(constraints.len(), dim);
    let mut hz = DVector::zeros(constraints.len());
    for (i, c) in constraints.iter().enumerate() {
        for t in &c.terms {
            let j = t.degree() as usize;
            let idx = bases[j - 1]
                .index_of(&t.exponents)
                .expect("every exponent of degree j is in the degree-j basis");
            cz[(i, block_offsets[j - 1] + idx)] += t.coeff;
        }
        hz[i] = c.bound;
    }

    Ok(LiftedSystem {
        nx: plant.nx(),
        nv: plant.nv(),
        p,
        bases,
        block_offsets,
        phi_blocks,
        phi_z,
        cz,
        hz,
        row_kinds: (0..constraints.len()).map(RowKind::Constraint).collect(),
    })
}

/// Rows `-Z_k ≤ 0` for every coordinate whose monomial has only even
/// exponents (a square, hence nonnegative on consistent lifts).
pub fn positivity_rows(lifted: &LiftedSystem) -> (DMatrix<f64>, DVector<f64>, Vec<RowKind>) {
    let dim = lifted.dim();
    let coords: Vec<usize> = (0..dim)
        .filter(|&k| {
            let e = lifted.exponent(k);
            e.iter().sum::<u32>() >= 2 && e.iter().all(|&d| d % 2 == 0)
        })
        .collect();
    let mut c = DMatrix::zeros(coords.len(), dim);
    for (r, &k) in coords.iter().enumerate() {
        c[(r, k)] = -1.0;
    }
    let kinds = coords.iter().map(|&k| RowKind::Positivity(k)).collect();
    (c, DVector::zeros(coords.len()), kinds)
}

impl LiftedSystem {
    pub fn n(&self) -> usize {
        self.nx + self.nv
    }

    pub fn dim(&self) -> usize {
        *self.block_offsets.last().unwrap()
    }

    /// Dimension of the degree-1 block.
    pub fn dim1(&self) -> usize {
        self.n()
    }

    /// Exponent (over `x_v`) of coordinate `k` of `Z`.
    pub fn exponent(&self, k: usize) -> &[u32] {
        let j = self.block_offsets.partition_point(|&o| o <= k) - 1;
        &self.bases[j].exponents[k - self.block_offsets[j]]
    }

    pub fn append_rows(&mut self, c: &DMatrix<f64>, h: &DVector<f64>, kinds: &[RowKind]) {
        assert_eq!(c.ncols(), self.dim());
        assert_eq!(c.nrows(), h.len());
        assert_eq!(c.nrows(), kinds.len());
        let m = self.cz.nrows();
        let mut cz = DMatrix::zeros(m + c.nrows(), self.dim());
        cz.view_mut((0, 0), (m, self.dim())).copy_from(&self.cz);
        cz.view_mut((m, 0), c.shape()).copy_from(c);
        let mut hz = DVector::zeros(m + h.len());
        hz.rows_mut(0, m).copy_from(&self.hz);
        hz.rows_mut(m, h.len()).copy_from(h);
        self.cz = cz;
        self.hz = hz;
        self.row_kinds.extend_from_slice(kinds);
    }

    /// Consistent lift `Z = [x_v; x_v^2; …; x_v^p]` of `(x, v)`.
    pub fn build_z(&self, x: &[f64], v: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.nx {
            return Err(Error::Dimension {
                expected: self.nx,
                got: x.len(),
                context: "build_z state",
            });
        }
        if v.len() != self.nv {
            return Err(Error::Dimension {
                expected: self.nv,
                got: v.len(),
                context: "build_z reference",
            });
        }
        let xv: Vec<f64> = x.iter().chain(v).copied().collect();
        let mut z = DVector::zeros(self.dim());
        for (j, b) in self.bases.iter().enumerate() {
            let block = lift_vector(&xv, b)?;
            z.rows_mut(self.block_offsets[j], b.len()).copy_from(&block);
        }
        Ok(z)
    }
}
