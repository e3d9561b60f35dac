//! Sparse matrix helpers and a reusable sparse Cholesky factorization.

use std::path::Path;
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::LltRegularization;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, supernodal, CholeskySymbolicParams, LltRef, SymbolicCholesky,
    SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Par, Side};

use crate::error::{Error, Result};

pub type SparseMat = SparseColMat<usize, f64>;

/// Builds a matrix from `(row, col, value)` entries; duplicates are summed.
pub fn from_triplets(nrows: usize, ncols: usize, entries: &[(usize, usize, f64)]) -> Result<SparseMat> {
    let trip: Vec<Triplet<usize, usize, f64>> =
        entries.iter().map(|&(i, j, v)| Triplet::new(i, j, v)).collect();
    SparseMat::try_new_from_triplets(nrows, ncols, &trip)
        .map_err(|e| Error::Shape(format!("triplet assembly failed: {e:?}")))
}

pub fn diagonal(values: &[f64]) -> SparseMat {
    let n = values.len();
    let e: Vec<_> = values.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
    from_triplets(n, n, &e).expect("diagonal indices in range")
}

pub fn identity(n: usize) -> SparseMat {
    diagonal(&vec![1.0; n])
}

/// Iterates `(row, col, value)` over stored entries.
pub fn entries(a: &SparseMat) -> Vec<(usize, usize, f64)> {
    let cp = a.col_ptr();
    let ri = a.row_idx();
    let v = a.val();
    let mut out = Vec::with_capacity(v.len());
    for j in 0..a.ncols() {
        for k in cp[j]..cp[j + 1] {
            out.push((ri[k], j, v[k]));
        }
    }
    out
}

/// Computes `Σ c_i A_i` for same-shaped matrices.
pub fn linear_combination(terms: &[(f64, &SparseMat)]) -> Result<SparseMat> {
    let (nr, nc) = match terms.first() {
        Some((_, a)) => (a.nrows(), a.ncols()),
        None => return Err(Error::Shape("empty linear combination".into())),
    };
    let mut all = Vec::new();
    for (c, a) in terms {
        if a.nrows() != nr || a.ncols() != nc {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                a.nrows(),
                a.ncols(),
                nr,
                nc
            )));
        }
        all.extend(entries(a).into_iter().map(|(i, j, v)| (i, j, c * v)));
    }
    from_triplets(nr, nc, &all)
}

/// `G diag(d) G` for a symmetric `G`.
pub fn sandwich_diag(g: &SparseMat, d: &[f64]) -> Result<SparseMat> {
    let n = g.ncols();
    if d.len() != n || g.nrows() != n {
        return Err(Error::Shape("sandwich_diag dimensions".into()));
    }
    let cp = g.col_ptr();
    let ri = g.row_idx();
    let v = g.val();
    let mut out = Vec::new();
    for k in 0..n {
        let range = cp[k]..cp[k + 1];
        for a in range.clone() {
            for b in range.clone() {
                out.push((ri[a], ri[b], v[a] * d[k] * v[b]));
            }
        }
    }
    from_triplets(n, n, &out)
}

/// Kronecker product. Entry `(ia * pb + ib, ja * pb + jb)` equals `a[ia, ja] * b[ib, jb]`.
pub fn kron(a: &SparseMat, b: &SparseMat) -> SparseMat {
    let ea = entries(a);
    let eb = entries(b);
    let (pr, pc) = (b.nrows(), b.ncols());
    let mut out = Vec::with_capacity(ea.len() * eb.len());
    for &(ia, ja, va) in &ea {
        for &(ib, jb, vb) in &eb {
            out.push((ia * pr + ib, ja * pc + jb, va * vb));
        }
    }
    from_triplets(a.nrows() * pr, a.ncols() * pc, &out).expect("kron indices in range")
}

pub fn mul_vec(a: &SparseMat, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len(), "mul_vec dimension");
    let mut y = vec![0.0; a.nrows()];
    let cp = a.col_ptr();
    let ri = a.row_idx();
    let v = a.val();
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for k in cp[j]..cp[j + 1] {
            y[ri[k]] += v[k] * xj;
        }
    }
    y
}

/// `Aᵀ x`.
pub fn mul_transpose_vec(a: &SparseMat, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.nrows(), x.len(), "mul_transpose_vec dimension");
    let cp = a.col_ptr();
    let ri = a.row_idx();
    let v = a.val();
    (0..a.ncols())
        .map(|j| (cp[j]..cp[j + 1]).map(|k| v[k] * x[ri[k]]).sum())
        .collect()
}

pub fn quad_form(a: &SparseMat, x: &[f64]) -> f64 {
    mul_vec(a, x).iter().zip(x).map(|(u, v)| u * v).sum()
}

pub fn to_dense(a: &SparseMat) -> Mat<f64> {
    let mut m = Mat::zeros(a.nrows(), a.ncols());
    for (i, j, v) in entries(a) {
        m[(i, j)] += v;
    }
    m
}

/// Largest `|a_ij - a_ji|` relative to the largest `|a_ij|`.
pub fn relative_asymmetry(a: &SparseMat) -> f64 {
    let d = to_dense(a);
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for i in 0..d.nrows() {
        for j in 0..d.ncols() {
            num = num.max((d[(i, j)] - d[(j, i)]).abs());
            den = den.max(d[(i, j)].abs());
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Dumps stored entries as `row,col,value` CSV.
pub fn write_coo_csv(a: &SparseMat, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "col", "value"])?;
    for (i, j, v) in entries(a) {
        w.write_record([i.to_string(), j.to_string(), format!("{v:e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Symbolic analysis that can be shared across factorizations of matrices
/// with the same sparsity pattern.
#[derive(Clone)]
pub struct Symbolic {
    inner: Arc<SymbolicCholesky<usize>>,
    col_ptr: Arc<Vec<usize>>,
    row_idx: Arc<Vec<usize>>,
}

impl std::fmt::Debug for Symbolic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Symbolic").field("n", &self.inner.nrows()).finish()
    }
}

impl Symbolic {
    pub fn analyze(a: &SparseMat) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Shape("Cholesky of a non-square matrix".into()));
        }
        let inner = factorize_symbolic_cholesky(
            a.symbolic(),
            Side::Lower,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams {
                supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
                ..Default::default()
            },
        )
        .map_err(|e| Error::Shape(format!("symbolic factorization: {e:?}")))?;
        Ok(Symbolic {
            inner: Arc::new(inner),
            col_ptr: Arc::new(a.col_ptr().to_vec()),
            row_idx: Arc::new(a.row_idx().to_vec()),
        })
    }

    pub fn matches(&self, a: &SparseMat) -> bool {
        a.col_ptr() == self.col_ptr.as_slice() && a.row_idx() == self.row_idx.as_slice()
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }
}

/// Numeric `LLᵀ` factorization of a symmetric positive-definite matrix.
/// Only the lower triangle of the input is read.
#[derive(Clone, Debug)]
pub struct Cholesky {
    sym: Symbolic,
    vals: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &SparseMat) -> Result<Self> {
        let sym = Symbolic::analyze(a)?;
        Self::factor_with(&sym, a)
    }

    /// Reuses `sym` when the pattern matches, otherwise re-analyzes.
    pub fn factor_with(sym: &Symbolic, a: &SparseMat) -> Result<Self> {
        let sym = if sym.matches(a) { sym.clone() } else { Symbolic::analyze(a)? };
        let s = &sym.inner;
        let mut vals = vec![0.0; s.len_val()];
        let mut mem = MemBuffer::new(s.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()));
        s.factorize_numeric_llt(
            &mut vals,
            a.as_ref(),
            Side::Lower,
            LltRegularization::default(),
            Par::Seq,
            MemStack::new(&mut mem),
            Default::default(),
        )
        .map_err(|e| Error::NotPositiveDefinite { context: format!("{e:?}") })?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite { context: "non-finite factor".into() });
        }
        Ok(Cholesky { sym, vals })
    }

    pub fn symbolic(&self) -> &Symbolic {
        &self.sym
    }

    pub fn dim(&self) -> usize {
        self.sym.dim()
    }

    fn supernodal(&self) -> supernodal::SupernodalLltRef<'_, usize, f64> {
        match self.sym.inner.raw() {
            SymbolicCholeskyRaw::Supernodal(s) => supernodal::SupernodalLltRef::new(s, &self.vals),
            SymbolicCholeskyRaw::Simplicial(_) => unreachable!("supernodal mode is forced"),
        }
    }

    pub fn log_det(&self) -> f64 {
        let l = self.supernodal();
        let mut acc = 0.0;
        for k in 0..l.symbolic().n_supernodes() {
            let m = l.supernode(k).val();
            for j in 0..m.ncols() {
                acc += m[(j, j)].ln();
            }
        }
        2.0 * acc
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "solve dimension");
        let mut rhs = Mat::from_fn(n, 1, |i, _| b[i]);
        let s = &self.sym.inner;
        let mut mem = MemBuffer::new(s.solve_in_place_scratch::<f64>(1, Par::Seq));
        LltRef::new(s, &self.vals).solve_in_place_with_conj(
            Conj::No,
            rhs.as_mut(),
            Par::Seq,
            MemStack::new(&mut mem),
        );
        (0..n).map(|i| rhs[(i, 0)]).collect()
    }

    /// Maps standard normal columns `z` to draws with covariance `A⁻¹`.
    pub fn color(&self, z: &Mat<f64>) -> Mat<f64> {
        let n = self.dim();
        assert_eq!(z.nrows(), n, "color dimension");
        let mut u = z.clone();
        let l = self.supernodal();
        let mut mem = MemBuffer::new(l.symbolic().solve_in_place_scratch::<f64>(z.ncols(), Par::Seq));
        l.l_transpose_solve_with_conj(Conj::No, u.as_mut(), Par::Seq, MemStack::new(&mut mem));
        let mut x = Mat::zeros(n, z.ncols());
        match self.sym.inner.perm() {
            Some(p) => {
                let fwd = p.arrays().0;
                for j in 0..z.ncols() {
                    for i in 0..n {
                        x[(fwd[i], j)] = u[(i, j)];
                    }
                }
            }
            None => x = u,
        }
        x
    }

    /// Diagonal of `A⁻¹` by solving against unit vectors. Intended for small systems.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        let mut e = vec![0.0; n];
        (0..n)
            .map(|i| {
                e[i] = 1.0;
                let x = self.solve(&e);
                e[i] = 0.0;
                x[i]
            })
            .collect()
    }
}
