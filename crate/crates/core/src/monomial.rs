//! Monomial bases and the compression/expansion matrices between the
//! redundant Kronecker power `x ⊗ x ⊗ … ⊗ x` and the non-redundant vector of
//! degree-`p` monomials.
//!
//! The matrices are assembled exactly (rational entries) from the block
//! recursion for `M_t(n, p)`, which maps the monomial vector `x^p` to
//! `x^{p-1} ⊗ x`:
//!
//! ```text
//! M_t(n,p) = [ M_t(n,p-1)   0        ]
//!            [ M_z(n,p)     M_t0(n,p) ]
//! M_z(n,p)  = [ 0   I ⊗ e_1 ]
//! M_t0(n,p) = (I ⊗ [0; I_{n-1}]) M_t(n-1,p)
//! ```
//!
//! with `M_t(1,p) = 1` and `M_t(n,1) = I_n`. Expansion is the product of the
//! `M_t` factors and compression the product of their pseudoinverses in the
//! opposite order.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_rational::Rational64;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::rational::RationalMatrix;

/// Largest Kronecker power length `n^p` the construction accepts.
pub const MAX_KRON_LEN: usize = 1 << 20;

/// Exponent multi-index of a monomial.
pub type Exponent = Vec<u32>;

/// Number of monomials of total degree `p` in `n` variables,
/// `(n+p-1)! / (p! (n-1)!)`.
pub fn sigma(n: usize, p: usize) -> Result<usize> {
    if n == 0 || p == 0 {
        return Err(Error::Range(format!("sigma requires n >= 1 and p >= 1, got ({n}, {p})")));
    }
    binomial(n + p - 1, p)
}

/// `sigma` extended with `sigma(n, 0) = 1`, used inside the recursion.
fn sigma0(n: usize, p: usize) -> usize {
    if p == 0 {
        1
    } else {
        sigma(n, p).expect("recursion sizes are validated up front")
    }
}

fn binomial(n: usize, k: usize) -> Result<usize> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc
            .checked_mul((n - i) as u128)
            .ok_or_else(|| Error::Range(format!("binomial({n}, {k}) overflows")))?
            / (i as u128 + 1);
    }
    usize::try_from(acc).map_err(|_| Error::Range(format!("binomial({n}, {k}) overflows usize")))
}

fn kron_len(n: usize, p: usize) -> Result<usize> {
    u32::try_from(p)
        .ok()
        .and_then(|p32| n.checked_pow(p32))
        .filter(|&len| len <= MAX_KRON_LEN)
        .ok_or(Error::Size { n, p })
}

/// The `M_t(n, j)` factors for `j = 2..=p` together with their left inverses.
#[derive(Clone, Debug)]
pub struct MtChain {
    pub n: usize,
    pub p: usize,
    /// `mt[j - 2] = M_t(n, j)`
    pub mt: Vec<RationalMatrix>,
    /// `lt[j - 2] = (M_tᵀ M_t)⁻¹ M_tᵀ`
    pub lt: Vec<RationalMatrix>,
}

impl MtChain {
    pub fn mt(&self, j: usize) -> &RationalMatrix {
        &self.mt[j - 2]
    }

    pub fn lt(&self, j: usize) -> &RationalMatrix {
        &self.lt[j - 2]
    }
}

struct MtBuilder {
    memo: HashMap<(usize, usize), RationalMatrix>,
}

impl MtBuilder {
    fn new() -> Self {
        Self { memo: HashMap::new() }
    }

    fn mt(&mut self, n: usize, p: usize) -> RationalMatrix {
        if let Some(m) = self.memo.get(&(n, p)) {
            return m.clone();
        }
        let m = if n == 1 {
            RationalMatrix::identity(1)
        } else if p == 1 {
            RationalMatrix::identity(n)
        } else {
            let top_left = self.mt(n, p - 1);
            let top = top_left.hstack(&RationalMatrix::zeros(
                n * sigma0(n, p - 2),
                sigma0(n - 1, p),
            ));

            let s_sub = sigma0(n - 1, p - 1);
            let e1 = RationalMatrix::from_triplets(n, 1, [(0, 0, Rational64::one())]);
            let mz = RationalMatrix::zeros(n * s_sub, sigma0(n, p - 2))
                .hstack(&RationalMatrix::identity(s_sub).kron(&e1));

            let shift = RationalMatrix::from_triplets(
                n,
                n - 1,
                (0..n - 1).map(|i| (i + 1, i, Rational64::one())),
            );
            let mt0 = RationalMatrix::identity(s_sub)
                .kron(&shift)
                .mul(&self.mt(n - 1, p));

            top.vstack(&mz.hstack(&mt0))
        };
        self.memo.insert((n, p), m.clone());
        m
    }
}

/// Exact left inverse `(MᵀM)⁻¹Mᵀ` of a 0/1 matrix whose columns have
/// disjoint supports, so that `MᵀM` is diagonal.
fn left_inverse(m: &RationalMatrix) -> RationalMatrix {
    let gram = m.transpose().mul(m);
    let mut diag = vec![Rational64::zero(); m.cols()];
    for (c, d) in diag.iter_mut().enumerate() {
        let row = gram.row(c);
        assert!(
            row.len() == 1 && row[0].0 == c && row[0].1 > Rational64::zero(),
            "MᵀM is not a positive diagonal matrix"
        );
        *d = row[0].1;
    }
    let trips: Vec<_> = (0..m.rows())
        .flat_map(|r| m.row(r).iter().map(move |&(c, v)| (c, r, v)))
        .map(|(c, r, v)| (c, r, v / diag[c]))
        .collect();
    RationalMatrix::from_triplets(m.cols(), m.rows(), trips)
}

pub fn build_mt_chain(n: usize, p: usize) -> Result<MtChain> {
    if n == 0 || p < 2 {
        return Err(Error::Range(format!("M_t chain requires n >= 1 and p >= 2, got ({n}, {p})")));
    }
    kron_len(n, p)?;
    sigma(n, p)?;
    let mut builder = MtBuilder::new();
    let mt: Vec<_> = (2..=p).map(|j| builder.mt(n, j)).collect();
    let lt = mt.iter().map(left_inverse).collect();
    Ok(MtChain { n, p, mt, lt })
}

/// Degree-`p` monomial basis in `n` variables with exact compression
/// (`mc`, σ×n^p) and expansion (`me`, n^p×σ) matrices.
#[derive(Clone, Debug)]
pub struct MonomialBasis {
    pub n: usize,
    pub p: usize,
    pub exponents: Vec<Exponent>,
    pub mc: RationalMatrix,
    pub me: RationalMatrix,
    index: HashMap<Exponent, usize>,
    mc_rows: Vec<Vec<(usize, f64)>>,
    /// Kronecker position -> basis position (every row of `me` is a unit row).
    me_map: Vec<usize>,
}

impl MonomialBasis {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn index_of(&self, exponent: &[u32]) -> Option<usize> {
        self.index.get(exponent).copied()
    }

    pub fn kron_len(&self) -> usize {
        self.me.rows()
    }

    pub fn mc_dense(&self) -> DMatrix<f64> {
        self.mc.to_dense()
    }

    pub fn me_dense(&self) -> DMatrix<f64> {
        self.me.to_dense()
    }

    /// Sparse floating-point rows of `mc`.
    pub fn mc_rows(&self) -> &[Vec<(usize, f64)>] {
        &self.mc_rows
    }

    /// Basis position that Kronecker position `r` expands from.
    pub fn expansion_target(&self, r: usize) -> usize {
        self.me_map[r]
    }
}

/// Factor indices of Kronecker position `r` in an `n^p` power, first factor
/// first.
pub fn kron_digits(mut r: usize, n: usize, p: usize) -> Vec<usize> {
    let mut digits = vec![0; p];
    for d in digits.iter_mut().rev() {
        *d = r % n;
        r /= n;
    }
    digits
}

pub fn build_basis(n: usize, p: usize) -> Result<MonomialBasis> {
    if n == 0 || p == 0 {
        return Err(Error::Range(format!("basis requires n >= 1 and p >= 1, got ({n}, {p})")));
    }
    let len = kron_len(n, p)?;
    sigma(n, p)?;

    let (mc, me) = if p == 1 {
        (RationalMatrix::identity(n), RationalMatrix::identity(n))
    } else {
        let chain = build_mt_chain(n, p)?;
        let lift = |m: &RationalMatrix, i: usize| {
            m.kron(&RationalMatrix::identity(n.pow((p - i) as u32)))
        };
        // Me = (M_t(n,2) ⊗ I_{n^{p-2}}) … (M_t(n,p-1) ⊗ I_n) M_t(n,p)
        let mut me = chain.mt(p).clone();
        for i in (2..p).rev() {
            me = lift(chain.mt(i), i).mul(&me);
        }
        // Mc = L_t(n,p) (L_t(n,p-1) ⊗ I_n) … (L_t(n,2) ⊗ I_{n^{p-2}})
        let mut mc = chain.lt(p).clone();
        for i in (2..p).rev() {
            mc = mc.mul(&lift(chain.lt(i), i));
        }
        (mc, me)
    };
    debug_assert_eq!(me.rows(), len);

    let sig = me.cols();
    let mut me_map = Vec::with_capacity(len);
    let mut exponents: Vec<Option<Exponent>> = vec![None; sig];
    for r in 0..len {
        let row = me.row(r);
        assert!(
            row.len() == 1 && row[0].1.is_one(),
            "expansion row {r} is not a unit row"
        );
        let col = row[0].0;
        me_map.push(col);
        let mut e = vec![0u32; n];
        for d in kron_digits(r, n, p) {
            e[d] += 1;
        }
        match &exponents[col] {
            Some(prev) => assert_eq!(prev, &e, "basis column {col} mixes monomials"),
            None => exponents[col] = Some(e),
        }
    }
    let exponents: Vec<Exponent> = exponents
        .into_iter()
        .enumerate()
        .map(|(c, e)| e.unwrap_or_else(|| panic!("basis column {c} has no preimage")))
        .collect();
    let index = exponents
        .iter()
        .enumerate()
        .map(|(i, e)| (e.clone(), i))
        .collect();
    let mc_rows = mc.to_f64_rows();

    Ok(MonomialBasis {
        n,
        p,
        exponents,
        mc,
        me,
        index,
        mc_rows,
        me_map,
    })
}

/// Evaluates a single monomial.
pub fn eval_monomial(x: &[f64], exponent: &[u32]) -> f64 {
    x.iter()
        .zip(exponent)
        .filter(|(_, &e)| e > 0)
        .map(|(&xi, &e)| xi.powi(e as i32))
        .product()
}

/// Vector of all degree-`p` monomials of `x`, in basis order.
pub fn lift_vector(x: &[f64], basis: &MonomialBasis) -> Result<DVector<f64>> {
    if x.len() != basis.n {
        return Err(Error::Dimension {
            expected: basis.n,
            got: x.len(),
            context: "lift_vector",
        });
    }
    Ok(DVector::from_iterator(
        basis.len(),
        basis.exponents.iter().map(|e| eval_monomial(x, e)),
    ))
}

/// Right-associated Kronecker power `x ⊗ (x ⊗ (… ⊗ x))`.
pub fn kron_pow(x: &[f64], p: usize) -> Result<DVector<f64>> {
    if p == 0 {
        return Err(Error::Range("kron_pow requires p >= 1".into()));
    }
    kron_len(x.len().max(1), p)?;
    let mut acc: Vec<f64> = x.to_vec();
    for _ in 1..p {
        acc = x
            .iter()
            .flat_map(|&xi| acc.iter().map(move |&a| xi * a))
            .collect();
    }
    Ok(DVector::from_vec(acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_count(n: usize, p: usize) -> usize {
        fn rec(n: usize, left: usize) -> usize {
            if n == 1 {
                return 1;
            }
            (0..=left).map(|k| rec(n - 1, left - k)).sum()
        }
        rec(n, p)
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma(2, 2).unwrap(), 3);
        for n in 1..8 {
            assert_eq!(sigma(n, 1).unwrap(), n);
        }
        assert_eq!(sigma(3, 3).unwrap(), 10);
        assert_eq!(brute_force_count(3, 3), 10);
    }

    #[test]
    fn sigma_matches_enumeration() {
        for n in 1..=6 {
            for p in 1..=6 {
                assert_eq!(sigma(n, p).unwrap(), brute_force_count(n, p), "n={n} p={p}");
            }
        }
    }

    #[test]
    fn sigma_supports_n_plus_p_40() {
        // C(39, 20) = 68923264410
        assert_eq!(sigma(20, 20).unwrap(), 68_923_264_410);
        assert!(sigma(0, 3).is_err());
        assert!(sigma(3, 0).is_err());
        assert!(matches!(sigma(200, 100), Err(Error::Range(_))));
    }

    #[test]
    fn mt_for_single_variable_is_scalar_identity() {
        let chain = build_mt_chain(1, 5).unwrap();
        for j in 2..=5 {
            assert!(chain.mt(j).is_identity());
            assert!(chain.lt(j).is_identity());
        }
    }

    #[test]
    fn mt_two_variables_degree_two() {
        // x^2 = [x1², x1x2, x2²] -> x ⊗ x = [x1², x1x2, x2x1, x2²]
        let chain = build_mt_chain(2, 2).unwrap();
        let m = chain.mt(2).to_dense();
        let expected = DMatrix::from_row_slice(
            4,
            3,
            &[1., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0., 1.],
        );
        assert_eq!(m, expected);
        assert_eq!(m.rank(1e-12), 3);
        assert!(chain.lt(2).mul(chain.mt(2)).is_identity());
    }

    #[test]
    fn left_inverse_property_holds_for_all_factors() {
        for n in 1..=6 {
            for p in 2..=4 {
                let chain = build_mt_chain(n, p).unwrap();
                for j in 2..=p {
                    let mt = chain.mt(j);
                    assert_eq!(mt.rows(), n * sigma0(n, j - 1));
                    assert_eq!(mt.cols(), sigma(n, j).unwrap());
                    assert!(chain.lt(j).mul(mt).is_identity(), "n={n} j={j}");
                    for c in 0..mt.cols() {
                        assert!((0..mt.rows()).any(|r| mt.get(r, c).is_one()));
                    }
                }
            }
        }
    }

    #[test]
    fn basis_order_two_variables() {
        let b = build_basis(2, 2).unwrap();
        assert_eq!(b.exponents, vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
        let b3 = build_basis(2, 3).unwrap();
        assert_eq!(
            b3.exponents,
            vec![vec![3, 0], vec![2, 1], vec![1, 2], vec![0, 3]]
        );
    }

    #[test]
    fn scalar_powers_are_identity() {
        let b = build_basis(1, 5).unwrap();
        assert!(b.mc.is_identity());
        assert!(b.me.is_identity());
        assert_eq!(b.exponents, vec![vec![5]]);
    }

    #[test]
    fn expansion_reproduces_cubic_kronecker_power() {
        let b = build_basis(2, 3).unwrap();
        let x3 = DVector::from_vec(vec![1., 2., 4., 8.]);
        let expanded = b.me_dense() * &x3;
        let direct = kron_pow(&[1., 2.], 3).unwrap();
        assert_eq!(expanded, direct);
        assert_eq!(lift_vector(&[1., 2.], &b).unwrap(), x3);
    }

    #[test]
    fn kron_pow_examples() {
        let (a, b) = (3.0, 5.0);
        assert_eq!(
            kron_pow(&[a, b], 2).unwrap().as_slice(),
            &[a * a, a * b, b * a, b * b]
        );
        assert_eq!(kron_pow(&[a, b], 1).unwrap().as_slice(), &[a, b]);
        assert_eq!(
            kron_pow(&[1., 2.], 3).unwrap().as_slice(),
            &[1., 2., 2., 4., 2., 4., 4., 8.]
        );
        assert!(kron_pow(&[1.0; 40], 40).is_err());
    }

    #[test]
    fn lift_vector_examples() {
        let b = build_basis(2, 2).unwrap();
        assert_eq!(lift_vector(&[1., 2.], &b).unwrap().as_slice(), &[1., 2., 4.]);
        assert_eq!(lift_vector(&[0., 0.], &b).unwrap().as_slice(), &[0., 0., 0.]);
        assert!(matches!(
            lift_vector(&[1., 2., 3.], &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn exponent_table_follows_recursive_split() {
        // The recursion orders x^p as [x1 · x^{p-1}; monomials of x2..xn of degree p].
        fn expected(n: usize, p: usize) -> Vec<Exponent> {
            if p == 0 {
                return vec![vec![0; n]];
            }
            if n == 1 {
                return vec![vec![p as u32]];
            }
            let mut out: Vec<Exponent> = expected(n, p - 1)
                .into_iter()
                .map(|mut e| {
                    e[0] += 1;
                    e
                })
                .collect();
            out.extend(expected(n - 1, p).into_iter().map(|e| {
                let mut full = vec![0];
                full.extend(e);
                full
            }));
            out
        }
        for n in 1..=5 {
            for p in 1..=4 {
                assert_eq!(build_basis(n, p).unwrap().exponents, expected(n, p));
            }
        }
    }

    #[test]
    fn oversized_basis_is_rejected() {
        assert!(matches!(build_basis(64, 5), Err(Error::Size { n: 64, p: 5 })));
    }
}
