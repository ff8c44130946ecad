//! Dense storage and the symmetric quasi-definite LDLᵀ factorization behind
//! the ADMM linear system.
//!
//! The KKT matrix `[[P + σI, Aᵀ], [A, −R⁻¹]]` is quasi-definite, so a symmetric
//! permutation with 1×1 pivots always exists. Pivots are chosen by largest
//! remaining diagonal magnitude, which keeps the elimination order a pure
//! function of the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible pivot magnitude.
pub const PIVOT_TOL: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            entries: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut out);
        out
    }

    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    /// `selfᵀ · y`
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.tr_mul_vec_into(y, &mut out);
        out
    }

    pub fn tr_mul_vec_into(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), out);
            }
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.entries[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest absolute asymmetry `|M_ij − M_ji|`, or infinity for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// ∞-norm of row `i`.
    pub fn row_inf_norm(&self, i: usize) -> f64 {
        inf_norm(self.row(i))
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.entries[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.entries[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn norm2_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Assembles the quasi-definite KKT matrix `[[P + σI, Aᵀ], [A, −diag(R)⁻¹]]`.
pub fn assemble_kkt(
    p: &DenseMatrix,
    a: &DenseMatrix,
    sigma: f64,
    rho: &[f64],
) -> Result<DenseMatrix> {
    let n = p.rows();
    let m = a.rows();
    if !p.is_square() || a.cols() != n || rho.len() != m {
        return Err(Error::Dimension(format!(
            "P is {}x{}, A is {}x{}, R has {} entries",
            p.rows(),
            p.cols(),
            a.rows(),
            a.cols(),
            rho.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    if let Some(i) = rho.iter().position(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Input(format!("R[{i}] = {} is not positive", rho[i])));
    }
    let d = n + m;
    let mut k = DenseMatrix::zeros(d, d);
    for i in 0..n {
        k.row_mut(i)[..n].copy_from_slice(p.row(i));
        k[(i, i)] += sigma;
    }
    for r in 0..m {
        for j in 0..n {
            let v = a[(r, j)];
            k[(n + r, j)] = v;
            k[(j, n + r)] = v;
        }
        k[(n + r, n + r)] = -1.0 / rho[r];
    }
    Ok(k)
}

/// Permuted factorization `Π M Πᵀ = L D Lᵀ`.
///
/// `permutation[j]` is the original index eliminated at step `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdltFactor {
    permutation: Vec<usize>,
    unit_lower: DenseMatrix,
    diag: Vec<f64>,
    dim: usize,
}

impl LdltFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn unit_lower(&self) -> &DenseMatrix {
        &self.unit_lower
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Number of (positive, negative) pivots.
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.diag.iter().filter(|d| **d > 0.0).count();
        (pos, self.dim - pos)
    }

    /// Rebuilds `M` from the factors.
    pub fn reconstruct(&self) -> DenseMatrix {
        let d = self.dim;
        let l = &self.unit_lower;
        let mut permuted = DenseMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| l[(i, k)] * self.diag[k] * l[(j, k)]).sum();
                permuted[(i, j)] = s;
                permuted[(j, i)] = s;
            }
        }
        let mut out = DenseMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                out[(self.permutation[i], self.permutation[j])] = permuted[(i, j)];
            }
        }
        out
    }

    /// Solves `M v = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::Dimension(format!(
                "rhs has {} entries, factor has dimension {}",
                b.len(),
                self.dim
            )));
        }
        let mut w: Vec<f64> = self.permutation.iter().map(|&p| b[p]).collect();
        self.solve_permuted_in_place(&mut w);
        let mut out = vec![0.0; self.dim];
        for (j, &p) in self.permutation.iter().enumerate() {
            out[p] = w[j];
        }
        Ok(out)
    }

    fn solve_permuted_in_place(&self, w: &mut [f64]) {
        let l = &self.unit_lower;
        for i in 0..self.dim {
            let s = dot(&l.row(i)[..i], &w[..i]);
            w[i] -= s;
        }
        for (wi, di) in w.iter_mut().zip(&self.diag) {
            *wi /= di;
        }
        for i in (0..self.dim).rev() {
            let ui = w[i];
            if ui != 0.0 {
                let row = &l.row(i)[..i];
                for (wk, lik) in w[..i].iter_mut().zip(row) {
                    *wk -= lik * ui;
                }
            }
        }
    }
}

/// Factors a symmetric matrix with 1×1 symmetric pivoting.
///
/// Only the lower triangle of `m` is read.
pub fn ldlt_factor(m: &DenseMatrix) -> Result<LdltFactor> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "cannot factor a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let d = m.rows();
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..d).collect();
    let mut col = vec![0.0; d];

    for j in 0..d {
        // Largest remaining diagonal entry; ties resolve to the lowest index.
        let mut p = j;
        let mut best = a[(j, j)].abs();
        for i in (j + 1)..d {
            let v = a[(i, i)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if p != j {
            symmetric_swap_lower(&mut a, j, p);
            perm.swap(j, p);
        }
        let pivot = a[(j, j)];
        if !(pivot.abs() >= PIVOT_TOL) {
            return Err(Error::SingularKkt {
                index: perm[j],
                value: pivot,
            });
        }
        for i in (j + 1)..d {
            col[i] = a[(i, j)];
            a[(i, j)] = col[i] / pivot;
        }
        // Trailing update of the lower triangle: a_ik -= l_i · d · l_k.
        for i in (j + 1)..d {
            let li_d = col[i];
            if li_d == 0.0 {
                continue;
            }
            let scale = li_d / pivot;
            let row = &mut a.row_mut(i)[(j + 1)..=i];
            for (aik, ck) in row.iter_mut().zip(&col[(j + 1)..=i]) {
                *aik -= scale * ck;
            }
        }
    }

    let mut diag = Vec::with_capacity(d);
    let mut unit_lower = DenseMatrix::zeros(d, d);
    for i in 0..d {
        diag.push(a[(i, i)]);
        let src = &a.row(i)[..i];
        let dst = unit_lower.row_mut(i);
        dst[..i].copy_from_slice(src);
        dst[i] = 1.0;
    }
    Ok(LdltFactor {
        permutation: perm,
        unit_lower,
        diag,
        dim: d,
    })
}

/// Swaps indices `j < p` of a symmetric matrix held in its lower triangle,
/// where columns `< j` already hold multipliers.
fn symmetric_swap_lower(a: &mut DenseMatrix, j: usize, p: usize) {
    let d = a.rows();
    for k in 0..j {
        let t = a[(j, k)];
        a[(j, k)] = a[(p, k)];
        a[(p, k)] = t;
    }
    let t = a[(j, j)];
    a[(j, j)] = a[(p, p)];
    a[(p, p)] = t;
    for k in (j + 1)..p {
        let t = a[(k, j)];
        a[(k, j)] = a[(p, k)];
        a[(p, k)] = t;
    }
    for i in (p + 1)..d {
        let t = a[(i, j)];
        a[(i, j)] = a[(i, p)];
        a[(i, p)] = t;
    }
}

/// Solves `F v = b` through a factor.
pub fn ldlt_solve(factor: &LdltFactor, b: &[f64]) -> Result<Vec<f64>> {
    factor.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.entries()
            .iter()
            .zip(b.entries())
            .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
    }

    #[test]
    fn kkt_identity_case() {
        let p = DenseMatrix::zeros(1, 1);
        let a = DenseMatrix::from_rows(&[vec![1.0]]);
        let k = assemble_kkt(&p, &a, 1.0, &[1.0]).unwrap();
        assert_eq!(
            k,
            DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]])
        );
    }

    #[test]
    fn kkt_two_rows() {
        let p = DenseMatrix::from_rows(&[vec![2.0]]);
        let a = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]);
        let k = assemble_kkt(&p, &a, 1e-6, &[0.1, 0.1]).unwrap();
        let expected = DenseMatrix::from_rows(&[
            vec![2.0 + 1e-6, 1.0, 1.0],
            vec![1.0, -10.0, 0.0],
            vec![1.0, 0.0, -10.0],
        ]);
        assert!(max_abs_diff(&k, &expected) < 1e-14);
    }

    #[test]
    fn kkt_rejects_mismatch() {
        let p = DenseMatrix::identity(2);
        let a = DenseMatrix::zeros(1, 3);
        assert!(matches!(
            assemble_kkt(&p, &a, 1.0, &[1.0]),
            Err(Error::Dimension(_))
        ));
        let a = DenseMatrix::zeros(1, 2);
        assert!(matches!(
            assemble_kkt(&p, &a, 1.0, &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn factor_identity() {
        let f = ldlt_factor(&DenseMatrix::identity(4)).unwrap();
        assert_eq!(f.unit_lower(), &DenseMatrix::identity(4));
        assert_eq!(f.diag(), &[1.0; 4]);
        let b = [3.0, -1.0, 0.5, 7.0];
        assert_eq!(ldlt_solve(&f, &b).unwrap(), b.to_vec());
    }

    #[test]
    fn factor_hand_2x2() {
        let m = DenseMatrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let f = ldlt_factor(&m).unwrap();
        assert_eq!(f.permutation(), &[0, 1]);
        assert!((f.diag()[0] - 4.0).abs() < 1e-15);
        assert!((f.diag()[1] - 2.75).abs() < 1e-15);
        assert!((f.unit_lower()[(1, 0)] - 0.25).abs() < 1e-15);
        let v = ldlt_solve(&f, &[1.0, 2.0]).unwrap();
        assert!((v[0] - 1.0 / 11.0).abs() < 1e-15);
        assert!((v[1] - 7.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn kkt_factor_has_one_negative_pivot() {
        let p = DenseMatrix::zeros(1, 1);
        let a = DenseMatrix::from_rows(&[vec![1.0]]);
        let k = assemble_kkt(&p, &a, 1.0, &[1.0]).unwrap();
        let f = ldlt_factor(&k).unwrap();
        assert_eq!(f.inertia(), (1, 1));
    }

    #[test]
    fn singular_pivot_names_index() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        match ldlt_factor(&m) {
            Err(Error::SingularKkt { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn solve_dimension_mismatch() {
        let f = ldlt_factor(&DenseMatrix::identity(3)).unwrap();
        assert!(matches!(ldlt_solve(&f, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn factor_is_deterministic() {
        let m = DenseMatrix::from_rows(&[
            vec![3.0, 1.0, 0.5],
            vec![1.0, -2.0, 0.2],
            vec![0.5, 0.2, 4.0],
        ]);
        assert_eq!(ldlt_factor(&m).unwrap(), ldlt_factor(&m).unwrap());
    }

    fn quasi_definite(n: usize, m: usize, vals: &[f64]) -> DenseMatrix {
        // P = BᵀB (PSD), A arbitrary, R in [0.01, 10].
        let mut it = vals.iter().copied().cycle();
        let mut b = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] = it.next().unwrap();
            }
        }
        let p = b.transpose().matmul(&b).unwrap();
        let mut a = DenseMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] = it.next().unwrap();
            }
        }
        let rho: Vec<f64> = (0..m)
            .map(|_| 10f64.powf(it.next().unwrap().clamp(-2.0, 1.0)))
            .collect();
        assemble_kkt(&p, &a, 1e-6, &rho).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn factor_solve_round_trip(
            n in 1usize..12,
            m in 0usize..12,
            vals in prop::collection::vec(-2.0f64..2.0, 64),
            rhs in prop::collection::vec(-100.0f64..100.0, 24),
        ) {
            let k = quasi_definite(n, m, &vals);
            let f = ldlt_factor(&k).unwrap();
            prop_assert_eq!(f.inertia(), (n, m));

            let rec = f.reconstruct();
            let rel = {
                let mut diff = rec.clone();
                for (d, o) in diff.entries.iter_mut().zip(k.entries()) {
                    *d -= o;
                }
                diff.frobenius_norm() / k.frobenius_norm()
            };
            prop_assert!(rel <= 1e-10, "reconstruction error {rel}");

            let b: Vec<f64> = rhs.iter().copied().cycle().take(n + m).collect();
            let v = f.solve(&b).unwrap();
            let mv = k.mul_vec(&v);
            let res = mv.iter().zip(&b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
            prop_assert!(res <= 1e-9 * (1.0 + inf_norm(&b)), "residual {res}");
        }
    }
}
