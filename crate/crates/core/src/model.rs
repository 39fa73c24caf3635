//! The controlled diffusion
//!
//! ```text
//! dx = (Ax + Bu) dt + Σ_j D_j x dw1_j + Σ_k F_k u dw2_k + C dw3
//! ```
//!
//! together with the quadratic running cost `xᵀQx + uᵀRu` and the operators
//! used by policy iteration on it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, direct_sum, kron, min_eigenvalue_sym, symmetrize};

/// Eigenvalues of `𝒜(K)` with real part above `-STAB_MARGIN` count as unstable.
pub const STAB_MARGIN: f64 = 1e-9;

/// Largest condition number accepted when inverting `G_uu` or `R + Σ(P)`.
pub const MAX_COND: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: Vec<DMatrix<f64>>,
    f: Vec<DMatrix<f64>>,
    c: DMatrix<f64>,
}

impl SystemModel {
    /// Validates dimensions and that `CCᵀ` is positive definite.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: Vec<DMatrix<f64>>,
        f: Vec<DMatrix<f64>>,
        c: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dims("A", (n.max(1), n.max(1)), a.shape()));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dims("B", (n, b.ncols().max(1)), b.shape()));
        }
        let m = b.ncols();
        for dj in &d {
            if dj.shape() != (n, n) {
                return Err(Error::dims("D_j", (n, n), dj.shape()));
            }
        }
        for fk in &f {
            if fk.shape() != (n, m) {
                return Err(Error::dims("F_k", (n, m), fk.shape()));
            }
        }
        if c.nrows() != n || c.ncols() == 0 {
            return Err(Error::dims("C", (n, c.ncols().max(1)), c.shape()));
        }
        // CCᵀ ≻ 0 exactly when C has full row rank
        let sv = c.singular_values();
        let smax = sv.max();
        let smin = if c.ncols() < n { 0.0 } else { sv.min() };
        if !(smin > 1e-10 * smax) {
            return Err(Error::NotPositiveDefinite {
                what: "C Cᵀ",
                min_eigenvalue: smin * smin,
            });
        }
        Ok(SystemModel { a, b, d, f, c })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Number of state-multiplicative noise channels.
    pub fn q1(&self) -> usize {
        self.d.len()
    }

    /// Number of input-multiplicative noise channels.
    pub fn q2(&self) -> usize {
        self.f.len()
    }

    /// Number of additive noise channels (columns of `C`).
    pub fn p(&self) -> usize {
        self.c.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &[DMatrix<f64>] {
        &self.d
    }

    pub fn f(&self) -> &[DMatrix<f64>] {
        &self.f
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// The same model with the multiplicative noise removed.
    pub fn without_multiplicative_noise(&self) -> SystemModel {
        SystemModel {
            d: Vec::new(),
            f: Vec::new(),
            ..self.clone()
        }
    }

    fn check_gain(&self, k: &PolicyGain) -> Result<()> {
        if k.0.shape() != (self.m(), self.n()) {
            return Err(Error::dims("K", (self.m(), self.n()), k.0.shape()));
        }
        Ok(())
    }

    fn check_value(&self, p: &ValueMatrix) -> Result<()> {
        if p.0.shape() != (self.n(), self.n()) {
            return Err(Error::dims("P", (self.n(), self.n()), p.0.shape()));
        }
        Ok(())
    }

    /// `Π(P) = Σ_j D_jᵀ P D_j`.
    pub fn op_pi(&self, p: &ValueMatrix) -> Result<DMatrix<f64>> {
        self.check_value(p)?;
        Ok(self.pi_raw(&p.0))
    }

    /// `Σ(P) = Σ_k F_kᵀ P F_k`.
    pub fn op_sigma(&self, p: &ValueMatrix) -> Result<DMatrix<f64>> {
        self.check_value(p)?;
        Ok(self.sigma_raw(&p.0))
    }

    fn pi_raw(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        let sum = self
            .d
            .iter()
            .fold(DMatrix::zeros(n, n), |acc, dj| acc + dj.transpose() * p * dj);
        symmetrize(&sum)
    }

    fn sigma_raw(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.m();
        let sum = self
            .f
            .iter()
            .fold(DMatrix::zeros(m, m), |acc, fk| acc + fk.transpose() * p * fk);
        symmetrize(&sum)
    }

    /// `A − BK`.
    pub fn closed_loop(&self, k: &PolicyGain) -> Result<DMatrix<f64>> {
        self.check_gain(k)?;
        Ok(&self.a - &self.b * &k.0)
    }

    /// `𝓛_K(P) = (A−BK)ᵀP + P(A−BK) + Π(P) + KᵀΣ(P)K`.
    pub fn lyap_op(&self, k: &PolicyGain, p: &ValueMatrix) -> Result<DMatrix<f64>> {
        self.check_value(p)?;
        let acl = self.closed_loop(k)?;
        let p = &p.0;
        let out = acl.transpose() * p + p * &acl + self.pi_raw(p) + k.0.transpose() * self.sigma_raw(p) * &k.0;
        Ok(symmetrize(&out))
    }

    /// The `n² × n²` matrix `𝒜(K)` with `vec(𝓛_K(P)) = 𝒜(K) vec(P)`.
    pub fn big_a(&self, k: &PolicyGain) -> Result<DMatrix<f64>> {
        let n = self.n();
        let acl_t = self.closed_loop(k)?.transpose();
        let eye = DMatrix::<f64>::identity(n, n);
        let mut out = kron(&eye, &acl_t) + kron(&acl_t, &eye);
        for dj in &self.d {
            let dt = dj.transpose();
            out += kron(&dt, &dt);
        }
        for fk in &self.f {
            let fkt = (fk * &k.0).transpose();
            out += kron(&fkt, &fkt);
        }
        Ok(out)
    }

    pub fn is_admissible(&self, k: &PolicyGain) -> Result<Admissibility> {
        self.is_admissible_with(k, STAB_MARGIN)
    }

    /// `𝒜(K)` Hurwitz with every eigenvalue real part below `-margin`.
    pub fn is_admissible_with(&self, k: &PolicyGain, margin: f64) -> Result<Admissibility> {
        let abscissa = linalg::spectral_abscissa(&self.big_a(k)?);
        Ok(Admissibility {
            admissible: abscissa < -margin,
            abscissa,
        })
    }

    /// Assembles `G(P)`.
    pub fn g_of_p(&self, p: &ValueMatrix, w: &CostWeights) -> Result<GMatrix> {
        self.check_value(p)?;
        self.check_weights(w)?;
        let (n, m) = (self.n(), self.m());
        let p = &p.0;
        let xx = &w.q + self.a.transpose() * p + p * &self.a + self.pi_raw(p);
        let ux = self.b.transpose() * p;
        let uu = &w.r + self.sigma_raw(p);
        let mut g = DMatrix::zeros(n + m, n + m);
        g.view_mut((0, 0), (n, n)).copy_from(&xx);
        g.view_mut((n, 0), (m, n)).copy_from(&ux);
        g.view_mut((0, n), (n, m)).copy_from(&ux.transpose());
        g.view_mut((n, n), (m, m)).copy_from(&uu);
        Ok(GMatrix {
            mat: symmetrize(&g),
            n,
            m,
        })
    }

    /// `θ(P) = G(P) ⊕ tr(CᵀPC)`.
    pub fn theta_of_p(&self, p: &ValueMatrix, w: &CostWeights) -> Result<ThetaMatrix> {
        let g = self.g_of_p(p, w)?;
        let c = (self.c.transpose() * &p.0 * &self.c).trace();
        Ok(ThetaMatrix {
            mat: direct_sum(&g.mat, &DMatrix::from_element(1, 1, c)),
            n: self.n(),
            m: self.m(),
        })
    }

    /// `ℛ(P) = Q + AᵀP + PA + Π(P) − PB(R+Σ(P))⁻¹BᵀP`.
    pub fn riccati_residual(&self, p: &ValueMatrix, w: &CostWeights) -> Result<DMatrix<f64>> {
        self.check_value(p)?;
        self.check_weights(w)?;
        let p = &p.0;
        let inner = &w.r + self.sigma_raw(p);
        let cond = linalg::cond(&inner);
        if !(cond < MAX_COND) {
            return Err(Error::SingularInner { cond });
        }
        let bt_p = self.b.transpose() * p;
        let solved = inner
            .lu()
            .solve(&bt_p)
            .ok_or(Error::SingularInner { cond })?;
        let out = &w.q + self.a.transpose() * p + p * &self.a + self.pi_raw(p) - bt_p.transpose() * solved;
        Ok(symmetrize(&out))
    }

    /// `(R + Σ(P))⁻¹ BᵀP`, the gain that is greedy with respect to `P`.
    pub fn greedy_gain(&self, p: &ValueMatrix, w: &CostWeights) -> Result<PolicyGain> {
        improved_gain(&self.g_of_p(p, w)?)
    }

    fn check_weights(&self, w: &CostWeights) -> Result<()> {
        if w.q.shape() != (self.n(), self.n()) {
            return Err(Error::dims("Q", (self.n(), self.n()), w.q.shape()));
        }
        if w.r.shape() != (self.m(), self.m()) {
            return Err(Error::dims("R", (self.m(), self.m()), w.r.shape()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Admissibility {
    pub admissible: bool,
    /// Largest real part among the eigenvalues of `𝒜(K)`.
    pub abscissa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let q = checked_spd(q, "Q")?;
        let r = checked_spd(r, "R")?;
        Ok(CostWeights { q, r })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        CostWeights {
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
        }
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Running cost `xᵀQx + uᵀRu`.
    pub fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        quad_form(&self.q, x) + quad_form(&self.r, u)
    }
}

#[inline]
fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += v[i] * m[(i, j)];
        }
        acc += col * v[j];
    }
    acc
}

fn checked_spd(x: DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if !x.is_square() || x.nrows() == 0 {
        return Err(Error::dims(what, (x.nrows().max(1), x.nrows().max(1)), x.shape()));
    }
    let asym = linalg::asymmetry(&x);
    if asym > linalg::SYMMETRY_TOL {
        return Err(Error::AsymmetricInput { asymmetry: asym });
    }
    let x = symmetrize(&x);
    let lmin = min_eigenvalue_sym(&x);
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite {
            what,
            min_eigenvalue: lmin,
        });
    }
    Ok(x)
}

/// Feedback gain `K` of the policy `u = −Kx`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGain(DMatrix<f64>);

impl PolicyGain {
    pub fn new(k: DMatrix<f64>) -> Self {
        PolicyGain(k)
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        PolicyGain(DMatrix::zeros(m, n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn distance(&self, other: &PolicyGain) -> f64 {
        (&self.0 - &other.0).norm()
    }
}

/// Symmetric `n × n` value (cost-to-go) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix(DMatrix<f64>);

impl ValueMatrix {
    /// Accepts matrices symmetric to within the relative tolerance and
    /// stores their symmetric part.
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::dims("P", (p.nrows(), p.nrows()), p.shape()));
        }
        let asym = linalg::asymmetry(&p);
        if asym > linalg::SYMMETRY_TOL {
            return Err(Error::AsymmetricInput { asymmetry: asym });
        }
        Ok(ValueMatrix(symmetrize(&p)))
    }

    /// Stores the symmetric part of `p` with no tolerance check.
    pub fn from_symmetric_part(p: &DMatrix<f64>) -> Self {
        ValueMatrix(symmetrize(p))
    }

    pub fn zeros(n: usize) -> Self {
        ValueMatrix(DMatrix::zeros(n, n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn distance(&self, other: &ValueMatrix) -> f64 {
        (&self.0 - &other.0).norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue_sym(&self.0)
    }
}

/// `(n+m) × (n+m)` symmetric matrix with blocks `G_xx`, `G_ux`, `G_uu`.
#[derive(Debug, Clone, PartialEq)]
pub struct GMatrix {
    mat: DMatrix<f64>,
    n: usize,
    m: usize,
}

impl GMatrix {
    pub fn new(mat: DMatrix<f64>, n: usize, m: usize) -> Result<Self> {
        if mat.shape() != (n + m, n + m) {
            return Err(Error::dims("G", (n + m, n + m), mat.shape()));
        }
        let asym = linalg::asymmetry(&mat);
        if asym > linalg::SYMMETRY_TOL {
            return Err(Error::AsymmetricInput { asymmetry: asym });
        }
        Ok(GMatrix {
            mat: symmetrize(&mat),
            n,
            m,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn xx(&self) -> DMatrix<f64> {
        self.mat.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn ux(&self) -> DMatrix<f64> {
        self.mat.view((self.n, 0), (self.m, self.n)).into_owned()
    }

    pub fn uu(&self) -> DMatrix<f64> {
        self.mat.view((self.n, self.n), (self.m, self.m)).into_owned()
    }

    /// `𝓗(G, K) = [I, −Kᵀ] G [I, −Kᵀ]ᵀ`.
    pub fn h(&self, k: &PolicyGain) -> Result<DMatrix<f64>> {
        h_op(&self.mat, k.matrix())
    }

    pub fn add(&self, delta: &DMatrix<f64>) -> Result<GMatrix> {
        GMatrix::new(&self.mat + delta, self.n, self.m)
    }
}

/// `(n+m+1)`-square matrix whose leading block is `G` and whose last diagonal
/// entry holds `tr(CᵀPC)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMatrix {
    mat: DMatrix<f64>,
    n: usize,
    m: usize,
}

impl ThetaMatrix {
    pub fn new(mat: DMatrix<f64>, n: usize, m: usize) -> Result<Self> {
        if mat.shape() != (n + m + 1, n + m + 1) {
            return Err(Error::dims("theta", (n + m + 1, n + m + 1), mat.shape()));
        }
        Ok(ThetaMatrix {
            mat: symmetrize(&mat),
            n,
            m,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// `𝓗(θ, 0)`: drops the constant row and column.
    pub fn g_part(&self) -> GMatrix {
        let zero = DMatrix::zeros(1, self.n + self.m);
        let g = h_op(&self.mat, &zero).expect("theta block sizes are consistent");
        GMatrix {
            mat: symmetrize(&g),
            n: self.n,
            m: self.m,
        }
    }

    /// The scalar slot, an estimate of `tr(CᵀPC)`.
    pub fn constant(&self) -> f64 {
        self.mat[(self.n + self.m, self.n + self.m)]
    }
}

/// `[I, −Kᵀ] X [I, −Kᵀ]ᵀ` for a square `X` of order `a + b` and `K` of shape `b × a`.
pub fn h_op(x: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (b, a) = k.shape();
    if x.shape() != (a + b, a + b) {
        return Err(Error::dims("H(X, K)", (a + b, a + b), x.shape()));
    }
    let mut sel = DMatrix::zeros(a, a + b);
    sel.view_mut((0, 0), (a, a)).fill_with_identity();
    sel.view_mut((0, a), (a, b)).copy_from(&(-k.transpose()));
    Ok(symmetrize(&(&sel * x * sel.transpose())))
}

pub fn improved_gain(g: &GMatrix) -> Result<PolicyGain> {
    improved_gain_with(g, MAX_COND)
}

/// `K = G_uu⁻¹ G_ux`, refusing `G_uu` with condition number above `max_cond`.
pub fn improved_gain_with(g: &GMatrix, max_cond: f64) -> Result<PolicyGain> {
    let uu = g.uu();
    let cond = linalg::cond(&uu);
    if !(cond < max_cond) {
        return Err(Error::SingularGuu { cond });
    }
    let k = uu.lu().solve(&g.ux()).ok_or(Error::SingularGuu { cond })?;
    Ok(PolicyGain(k))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::DVector;
    use crate::linalg::vec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn scalar_model(a: f64, b: f64, d: &[f64], f: &[f64]) -> SystemModel {
        SystemModel::new(
            m1(a),
            m1(b),
            d.iter().map(|&x| m1(x)).collect(),
            f.iter().map(|&x| m1(x)).collect(),
            m1(1.0),
        )
        .unwrap()
    }

    fn vm(x: f64) -> ValueMatrix {
        ValueMatrix::new(m1(x)).unwrap()
    }

    pub(crate) fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize, q1: usize, q2: usize) -> SystemModel {
        let mut rand = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
        let a = rand(n, n, 1.0);
        let b = rand(n, m, 1.0);
        let d = (0..q1).map(|_| rand(n, n, 0.3)).collect();
        let f = (0..q2).map(|_| rand(n, m, 0.3)).collect();
        let c = DMatrix::identity(n, n) + rand(n, n, 0.2);
        SystemModel::new(a, b, d, f, c).unwrap()
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        symmetrize(&DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn construction_validates() {
        let bad_c = SystemModel::new(m1(-1.0), m1(1.0), vec![], vec![], m1(0.0));
        assert!(matches!(bad_c, Err(Error::NotPositiveDefinite { .. })));
        let bad_b = SystemModel::new(m1(-1.0), DMatrix::zeros(2, 1), vec![], vec![], m1(1.0));
        assert!(matches!(bad_b, Err(Error::DimensionMismatch { .. })));
        let bad_d = SystemModel::new(m1(-1.0), m1(1.0), vec![DMatrix::zeros(2, 2)], vec![], m1(1.0));
        assert!(bad_d.is_err());
        assert!(CostWeights::new(m1(0.0), m1(1.0)).is_err());
        assert!(CostWeights::new(m1(1.0), m1(-1.0)).is_err());
    }

    #[test]
    fn pi_and_sigma_basic() {
        let model = scalar_model(-1.0, 1.0, &[], &[]);
        assert_eq!(model.op_pi(&vm(3.0)).unwrap(), m1(0.0));
        assert_eq!(model.op_sigma(&vm(3.0)).unwrap(), m1(0.0));

        let model = scalar_model(-1.0, 1.0, &[0.5], &[]);
        assert_relative_eq!(model.op_pi(&vm(2.0)).unwrap()[(0, 0)], 0.5);

        let eye = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            vec![DMatrix::identity(2, 2)],
            vec![DMatrix::from_column_slice(2, 1, &[1.0, 0.0])],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let p = ValueMatrix::new(DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0])).unwrap();
        assert_eq!(eye.op_pi(&p).unwrap(), p.matrix().clone());
        assert_relative_eq!(eye.op_sigma(&p).unwrap()[(0, 0)], 3.0);
    }

    #[test]
    fn lyap_op_scalar() {
        let model = scalar_model(-1.0, 0.0, &[], &[]);
        let k = PolicyGain::zeros(1, 1);
        assert_relative_eq!(model.lyap_op(&k, &vm(1.0)).unwrap()[(0, 0)], -2.0);
        assert_eq!(model.lyap_op(&k, &vm(0.0)).unwrap(), m1(0.0));
        let a = model.big_a(&k).unwrap();
        assert_relative_eq!(a[(0, 0)], -2.0);
    }

    #[test]
    fn vec_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(1..5);
            let m = rng.random_range(1..5);
            let q1 = rng.random_range(0..3);
            let q2 = rng.random_range(0..3);
            let model = random_model(&mut rng, n, m, q1, q2);
            let k = PolicyGain::new(DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)));
            let p = ValueMatrix::new(random_sym(&mut rng, n)).unwrap();
            let lhs = vec(&model.lyap_op(&k, &p).unwrap());
            let rhs = model.big_a(&k).unwrap() * vec(p.matrix());
            assert!((&lhs - &rhs).norm() <= 1e-10 * lhs.norm().max(1e-12));
        }
    }

    #[test]
    fn big_a_spectrum_is_kronecker_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let model = random_model(&mut rng, 3, 2, 0, 0);
            let k = PolicyGain::new(DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0)));
            let acl = model.closed_loop(&k).unwrap();
            let lam = linalg::eigenvalues(&acl);
            let mut expected: Vec<f64> = lam
                .iter()
                .flat_map(|a| lam.iter().map(move |b| a.0 + b.0))
                .collect();
            let mut got: Vec<f64> = linalg::eigenvalues(&model.big_a(&k).unwrap())
                .into_iter()
                .map(|z| z.0)
                .collect();
            expected.sort_by(f64::total_cmp);
            got.sort_by(f64::total_cmp);
            for (e, g) in expected.iter().zip(&got) {
                assert!((e - g).abs() < 1e-8, "{e} vs {g}");
            }
        }
    }

    #[test]
    fn small_noise_moves_spectrum_continuously() {
        let base = scalar_model(-1.0, 1.0, &[], &[]);
        let k = PolicyGain::new(m1(0.5));
        let a0 = base.is_admissible(&k).unwrap().abscissa;
        let mut prev = a0;
        for eps in [1e-4, 1e-3, 1e-2] {
            let noisy = scalar_model(-1.0, 1.0, &[eps], &[]);
            let a = noisy.is_admissible(&k).unwrap().abscissa;
            assert!((a - a0).abs() <= 2.0 * eps * eps + 1e-15);
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn admissibility_scalar() {
        let k = PolicyGain::zeros(1, 1);
        let stable = scalar_model(-1.0, 0.0, &[], &[]).is_admissible(&k).unwrap();
        assert!(stable.admissible);
        assert_relative_eq!(stable.abscissa, -2.0, epsilon = 1e-12);
        assert!(!scalar_model(1.0, 0.0, &[], &[]).is_admissible(&k).unwrap().admissible);
        // marginal: abscissa exactly 0 is rejected
        assert!(!scalar_model(0.0, 0.0, &[], &[]).is_admissible(&k).unwrap().admissible);
    }

    #[test]
    fn g_of_p_cases() {
        let model = scalar_model(-1.0, 1.0, &[], &[]);
        let w = CostWeights::identity(1, 1);
        let g = model.g_of_p(&vm(1.0), &w).unwrap();
        assert_eq!(g.matrix(), &DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, 1.0]));
        let g0 = model.g_of_p(&vm(0.0), &w).unwrap();
        assert_eq!(g0.matrix(), &DMatrix::identity(2, 2));
        assert_eq!(h_op(g.matrix(), &DMatrix::zeros(1, 1)).unwrap(), g.xx());
    }

    #[test]
    fn h_op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, m) = (3, 2);
        let k = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let h = h_op(&DMatrix::identity(n + m, n + m), &k).unwrap();
        let expected = DMatrix::identity(n, n) + k.transpose() * &k;
        assert!((&h - &expected).amax() < 1e-14);
        let g = random_sym(&mut rng, n + m);
        let hg = h_op(&g, &k).unwrap();
        assert_eq!(hg, hg.transpose());
        assert!(h_op(&g, &DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn h_of_g_vanishes_at_policy_value() {
        // scalar A=-1, B=1, K=0: P_K = 1/2
        let model = scalar_model(-1.0, 1.0, &[], &[]);
        let w = CostWeights::identity(1, 1);
        let k = PolicyGain::zeros(1, 1);
        let g = model.g_of_p(&vm(0.5), &w).unwrap();
        assert_relative_eq!(g.h(&k).unwrap()[(0, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn g_of_p_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let model = random_model(&mut rng, 3, 2, 1, 1);
            let w = CostWeights::identity(3, 2);
            let p1 = ValueMatrix::new(random_sym(&mut rng, 3)).unwrap();
            let p2 = ValueMatrix::new(random_sym(&mut rng, 3)).unwrap();
            let t = rng.random_range(-2.0..2.0);
            let mix = ValueMatrix::new(p1.matrix() * t + p2.matrix() * (1.0 - t)).unwrap();
            let lhs = model.g_of_p(&mix, &w).unwrap().matrix().clone();
            let rhs = model.g_of_p(&p1, &w).unwrap().matrix() * t + model.g_of_p(&p2, &w).unwrap().matrix() * (1.0 - t);
            assert!((&lhs - &rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn improved_gain_cases() {
        let g = GMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]), 1, 1).unwrap();
        assert_relative_eq!(improved_gain(&g).unwrap().matrix()[(0, 0)], 0.5);
        let g = GMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]), 1, 1).unwrap();
        assert_relative_eq!(improved_gain(&g).unwrap().matrix()[(0, 0)], 0.3);
        let sing = GMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.0]), 1, 1).unwrap();
        assert!(matches!(improved_gain(&sing), Err(Error::SingularGuu { .. })));
    }

    #[test]
    fn riccati_residual_scalar() {
        let model = scalar_model(-1.0, 1.0, &[], &[]);
        let w = CostWeights::identity(1, 1);
        let r = model.riccati_residual(&vm(2f64.sqrt() - 1.0), &w).unwrap();
        assert!(r[(0, 0)].abs() < 1e-12);
        assert_eq!(model.riccati_residual(&vm(0.0), &w).unwrap(), m1(1.0));
        // R + Σ(P) = 1 + P·f² vanishes at P = -1/f²
        let noisy = scalar_model(-1.0, 1.0, &[], &[1.0]);
        assert!(matches!(noisy.riccati_residual(&vm(-1.0), &w), Err(Error::SingularInner { .. })));
    }

    #[test]
    fn theta_of_p_cases() {
        let model = SystemModel::new(
            DMatrix::identity(2, 2) * -1.0,
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            vec![],
            vec![],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let w = CostWeights::identity(2, 1);
        let t0 = model.theta_of_p(&ValueMatrix::zeros(2), &w).unwrap();
        assert_eq!(t0.matrix(), &direct_sum(&DMatrix::identity(3, 3), &m1(0.0)));
        let t1 = model.theta_of_p(&ValueMatrix::new(DMatrix::identity(2, 2)).unwrap(), &w).unwrap();
        assert_relative_eq!(t1.constant(), 2.0);
        let g = model.g_of_p(&ValueMatrix::new(DMatrix::identity(2, 2)).unwrap(), &w).unwrap();
        assert_eq!(t1.g_part(), g);
    }

    #[test]
    fn dimension_errors() {
        let model = scalar_model(-1.0, 1.0, &[], &[]);
        let w = CostWeights::identity(1, 1);
        let p2 = ValueMatrix::zeros(2);
        assert!(matches!(model.op_pi(&p2), Err(Error::DimensionMismatch { .. })));
        assert!(model.g_of_p(&p2, &w).is_err());
        assert!(model.big_a(&PolicyGain::zeros(2, 1)).is_err());
        assert!(model.g_of_p(&vm(1.0), &CostWeights::identity(2, 1)).is_err());
    }

    #[test]
    fn running_cost_matches_quadratic_forms() {
        let w = CostWeights::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            m1(3.0),
        )
        .unwrap();
        let x = [1.0, -2.0];
        let u = [0.5];
        let direct = (DVector::from_column_slice(&x).transpose() * w.q() * DVector::from_column_slice(&x))[(0, 0)] + 3.0 * 0.25;
        assert_relative_eq!(w.running_cost(&x, &u), direct, epsilon = 1e-14);
    }
}
