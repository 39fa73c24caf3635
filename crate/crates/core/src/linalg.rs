//! Symmetric vectorization and the small dense helpers built on it.
//!
//! `svec` stacks the upper triangle row by row,
//! `[y11, √2 y12, …, √2 y1n, y22, √2 y23, …, ynn]`, so that
//! `‖svec(X)‖₂ = ‖X‖_F` and `svec(X)ᵀ svec(Y) = tr(XY)`. `vec` is column
//! stacking, which coincides with nalgebra's storage order.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that an input is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Default relative singular-value cutoff for [`pinv`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// A symmetric matrix of order `n` stored as its `n(n+1)/2` svec coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SymVec {
    data: DVector<f64>,
    n: usize,
}

impl SymVec {
    pub fn from_vector(data: DVector<f64>) -> Result<Self> {
        let n = order_from_len(data.len())?;
        Ok(SymVec { data, n })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `n(n+1)/2`.
pub const fn tri(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry `(i, j)`, `i <= j`, inside `svec` of an order-`n` matrix.
#[inline]
pub const fn svec_index(n: usize, i: usize, j: usize) -> usize {
    // rows 0..i contribute n, n-1, …, n-i+1 entries
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Recovers `n` from a length that must be a triangular number.
pub fn order_from_len(len: usize) -> Result<usize> {
    let mut n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    // guard against rounding at large lengths
    while tri(n) > len {
        n -= 1;
    }
    while tri(n + 1) <= len {
        n += 1;
    }
    if tri(n) != len {
        return Err(Error::BadLength {
            len,
            reason: "expected a triangular number n(n+1)/2",
        });
    }
    Ok(n)
}

/// Relative asymmetry `‖X − Xᵀ‖_F / ‖X‖_F` (0 for the zero matrix).
pub fn asymmetry(x: &DMatrix<f64>) -> f64 {
    let norm = x.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (x - x.transpose()).norm() / norm
}

pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

pub fn svec(x: &DMatrix<f64>) -> Result<SymVec> {
    if !x.is_square() {
        return Err(Error::dims("svec", (x.nrows(), x.nrows()), x.shape()));
    }
    let asym = asymmetry(x);
    if asym > SYMMETRY_TOL {
        return Err(Error::AsymmetricInput { asymmetry: asym });
    }
    Ok(SymVec {
        data: svec_unchecked(x),
        n: x.nrows(),
    })
}

/// `svec` of the symmetric part of the upper triangle, with no symmetry check.
pub fn svec_unchecked(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows();
    let mut out = DVector::zeros(tri(n));
    let mut k = 0;
    for i in 0..n {
        out[k] = x[(i, i)];
        k += 1;
        for j in (i + 1)..n {
            out[k] = std::f64::consts::SQRT_2 * x[(i, j)];
            k += 1;
        }
    }
    out
}

/// Writes `svec(a aᵀ)` into `out` without forming the outer product.
#[inline]
pub fn svec_outer_into(a: &[f64], out: &mut [f64]) {
    let n = a.len();
    debug_assert_eq!(out.len(), tri(n));
    let mut k = 0;
    for i in 0..n {
        out[k] = a[i] * a[i];
        k += 1;
        let s = std::f64::consts::SQRT_2 * a[i];
        for &aj in &a[(i + 1)..n] {
            out[k] = s * aj;
            k += 1;
        }
    }
}

pub fn smat(v: &SymVec) -> DMatrix<f64> {
    smat_unchecked(v.n, v.data.as_slice())
}

/// Inverse of `svec` for a raw slice whose length must be triangular.
pub fn smat_slice(v: &[f64]) -> Result<DMatrix<f64>> {
    let n = order_from_len(v.len())?;
    Ok(smat_unchecked(n, v))
}

fn smat_unchecked(n: usize, v: &[f64]) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        x[(i, i)] = v[k];
        k += 1;
        for j in (i + 1)..n {
            let e = v[k] / std::f64::consts::SQRT_2;
            x[(i, j)] = e;
            x[(j, i)] = e;
            k += 1;
        }
    }
    x
}

/// Column stacking.
pub fn vec(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

pub fn vec_inv(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::BadLength {
            len: v.len(),
            reason: "vec_inv length must equal rows * cols",
        });
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// The duplication matrix `D_n` (`n² × n(n+1)/2`) with `vec(X) = D_n svec(X)`.
///
/// Its columns are orthonormal, so `D_n† = D_nᵀ`.
pub fn duplication_matrix(n: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n * n, tri(n));
    let mut k = 0;
    for i in 0..n {
        d[(i + i * n, k)] = 1.0;
        k += 1;
        for j in (i + 1)..n {
            d[(i + j * n, k)] = std::f64::consts::FRAC_1_SQRT_2;
            d[(j + i * n, k)] = std::f64::consts::FRAC_1_SQRT_2;
            k += 1;
        }
    }
    d
}

/// Moore-Penrose pseudoinverse via SVD; singular values below
/// `rank_tol · σ_max` are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 || m.iter().all(|&x| x == 0.0) {
        return DMatrix::zeros(cols, rows);
    }
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.as_ref().expect("SVD computed with U");
    let v_t = svd.v_t.as_ref().expect("SVD computed with Vᵀ");
    let s_max = svd.singular_values.max();
    let cutoff = rank_tol * s_max;
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            // out += v_k u_kᵀ / s
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out.ger(1.0 / s, &vk, &uk, 1.0);
        }
    }
    out
}

/// 2-norm condition number `σ_max / σ_min` (infinite when rank deficient).
pub fn cond(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if max == 0.0 {
        return f64::INFINITY;
    }
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Eigenvalues of a general real square matrix as `(re, im)` pairs.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000)
        .unwrap_or_else(|| Schur::new(m.clone()));
    schur
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect()
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .into_iter()
        .map(|(re, im)| re.hypot(im))
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of the symmetric part of `s`.
pub fn min_eigenvalue_sym(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(s)).eigenvalues.min()
}

pub fn max_eigenvalue_sym(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new(symmetrize(s)).eigenvalues.max()
}

/// Block-diagonal direct sum `a ⊕ b`.
pub fn direct_sum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DMatrix::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0));
        symmetrize(&m)
    }

    #[test]
    fn svec_of_2x2() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        let v = svec(&x).unwrap();
        assert_eq!(v.order(), 2);
        assert_relative_eq!(v.as_vector()[0], 1.0);
        assert_relative_eq!(v.as_vector()[1], 2.0 * 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(v.as_vector()[2], 3.0);
        assert_eq!(smat(&v), x);
    }

    #[test]
    fn svec_identity_and_zero() {
        let v = svec(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(v.as_vector().as_slice(), &[1.0, 0.0, 1.0]);
        let z = smat_slice(&[0.0; 3]).unwrap();
        assert_eq!(z, DMatrix::zeros(2, 2));
    }

    #[test]
    fn svec_rejects_asymmetric() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 3.0]);
        assert!(matches!(svec(&x), Err(Error::AsymmetricInput { .. })));
    }

    #[test]
    fn svec_symmetry_tolerance_is_relative() {
        let mut x = DMatrix::from_row_slice(2, 2, &[1e8, 2e8, 2e8, 3e8]);
        x[(0, 1)] += 1e-4;
        assert!(svec(&x).is_ok());
    }

    #[test]
    fn smat_rejects_non_triangular_length() {
        assert!(matches!(smat_slice(&[1.0, 2.0]), Err(Error::BadLength { .. })));
        assert!(SymVec::from_vector(DVector::zeros(7)).is_err());
        for n in 0..20 {
            assert_eq!(order_from_len(tri(n)).unwrap(), n);
        }
    }

    #[test]
    fn svec_index_matches_layout() {
        for n in 1..7 {
            let mut k = 0;
            for i in 0..n {
                for j in i..n {
                    assert_eq!(svec_index(n, i, j), k);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn svec_outer_matches_matrix_path() {
        let a = [0.3, -1.2, 2.0, 1.0];
        let mut out = vec![0.0; tri(4)];
        svec_outer_into(&a, &mut out);
        let col = DVector::from_column_slice(&a);
        let direct = svec_unchecked(&(&col * col.transpose()));
        for (x, y) in out.iter().zip(direct.iter()) {
            assert_relative_eq!(*x, *y, epsilon = 1e-15);
        }
    }

    #[test]
    fn vec_is_column_stacking() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(vec(&x).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&DMatrix::identity(2, 2)).as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(vec_inv(&vec(&x), 2, 2).unwrap(), x);
        assert!(vec_inv(&DVector::zeros(3), 2, 2).is_err());
    }

    #[test]
    fn vec_kron_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (p, q, r, s) = (
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..5),
            );
            let a = DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
            let x = DMatrix::from_fn(q, r, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(r, s, |_, _| rng.random_range(-1.0..1.0));
            let lhs = vec(&(&a * &x * &b));
            let rhs = kron(&b.transpose(), &a) * vec(&x);
            assert!((&lhs - &rhs).norm() <= 1e-12 * lhs.norm().max(1e-300));
        }
    }

    #[test]
    fn duplication_small_orders() {
        assert_eq!(duplication_matrix(1), DMatrix::from_element(1, 1, 1.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 0.0, 0.0, h, 0.0, 0.0, h, 0.0, 0.0, 0.0, 1.0],
        );
        assert_eq!(duplication_matrix(2), expected);
    }

    #[test]
    fn duplication_left_inverse() {
        for n in 1..=6 {
            let d = duplication_matrix(n);
            let dp = pinv(&d, DEFAULT_RANK_TOL);
            let id = &dp * &d;
            assert!((&id - DMatrix::identity(tri(n), tri(n))).amax() < 1e-12);
            assert!((&dp - d.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn pinv_of_invertible_and_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 2.0, 3.0]);
        let inv = m.clone().try_inverse().unwrap();
        let p = pinv(&m, DEFAULT_RANK_TOL);
        assert!((&p - &inv).norm() / inv.norm() < 1e-10);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(pinv(&d, DEFAULT_RANK_TOL), d);
        assert_eq!(pinv(&DMatrix::zeros(2, 3), 1e-10), DMatrix::zeros(3, 2));
    }

    #[test]
    fn pinv_penrose_conditions_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = DMatrix::from_fn(20, 12, |_, _| rng.random_range(-1.0..1.0));
        let p = pinv(&m, DEFAULT_RANK_TOL);
        let scale = m.norm();
        assert!((&p * &m - DMatrix::identity(12, 12)).amax() < 1e-8);
        assert!((&m * &p * &m - &m).amax() < 1e-8 * scale);
        assert!((&p * &m * &p - &p).amax() < 1e-8 * scale);
        let mp = &m * &p;
        assert!((&mp - mp.transpose()).amax() < 1e-8 * scale);
        let pm = &p * &m;
        assert!((&pm - pm.transpose()).amax() < 1e-8 * scale);
    }

    #[test]
    fn direct_sum_blocks() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::identity(2, 2);
        let s = direct_sum(&a, &b);
        assert_eq!(s.shape(), (3, 3));
        assert_eq!(s[(0, 0)], 2.0);
        assert_eq!(s[(2, 2)], 1.0);
        assert_eq!(s[(0, 2)], 0.0);
    }

    #[test]
    fn spectrum_helpers() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        assert_relative_eq!(spectral_abscissa(&m), -1.0, epsilon = 1e-12);
        assert_relative_eq!(spectral_radius(&m), 2.0, epsilon = 1e-12);
        let rot = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, -0.5]);
        assert_relative_eq!(spectral_abscissa(&rot), -0.5, epsilon = 1e-12);
        assert_eq!(cond(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])), f64::INFINITY);
    }

    #[test]
    fn roundtrip_100_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..9);
            let x = random_sym(&mut rng, n);
            let back = smat(&svec(&x).unwrap());
            assert!((&back - &x).amax() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn svec_preserves_frobenius_norm(n in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_sym(&mut rng, n);
            let v = svec(&x).unwrap();
            let fro = x.norm();
            prop_assert!((v.as_vector().norm() - fro).abs() <= 1e-12 * fro.max(1e-300));
            prop_assert!((smat(&v) - &x).amax() <= 1e-14 * x.amax().max(1.0));
        }

        #[test]
        fn duplication_identities(n in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_sym(&mut rng, n);
            let d = duplication_matrix(n);
            let s = svec(&x).unwrap().into_vector();
            let v = vec(&x);
            prop_assert!((&d * &s - &v).norm() <= 1e-12 * v.norm().max(1.0));
            prop_assert!((d.transpose() * &v - &s).norm() <= 1e-12 * v.norm().max(1.0));
        }

        #[test]
        fn kron_mixed_product(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dim = || rng.random_range(1usize..4);
            let (p, q, r, s, t, u) = (dim(), dim(), dim(), dim(), dim(), dim());
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let mut rand = |a: usize, b: usize| DMatrix::from_fn(a, b, |_, _| rng.random_range(-1.0..1.0));
            let a = rand(p, q);
            let c = rand(q, r);
            let b = rand(s, t);
            let d = rand(t, u);
            let lhs = kron(&a, &b) * kron(&c, &d);
            let rhs = kron(&(&a * &c), &(&b * &d));
            prop_assert!((&lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1e-12));
        }
    }
}
