//! Data-driven policy iteration: least-squares data matrices from one
//! exploratory rollout, data-based policy evaluation, and the optimistic
//! least-squares policy-iteration loop.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, duplication_matrix, kron, pinv, smat_slice, svec_outer_into, svec_unchecked, symmetrize, tri, vec,
    DEFAULT_RANK_TOL,
};
use crate::model::{improved_gain, CostWeights, GMatrix, PolicyGain, SystemModel, ThetaMatrix, ValueMatrix};
use crate::sim::{simulate_with, SimConfig, Trajectory};
use crate::solvers::{policy_cost, OptimalReference};

/// Above this condition number of `ψ` the data are flagged as poorly exciting.
pub const ILL_CONDITIONED: f64 = 1e10;
/// `‖P̂(s)‖_F` above which the evaluation ODE is declared divergent.
pub const ODE_BLOWUP: f64 = 1e10;

/// Streaming accumulator for `(ψ, ζ, ξ)` with left-endpoint (Itô) sums.
pub struct DataAccumulator {
    n: usize,
    m: usize,
    dt: f64,
    skip: usize,
    nz: usize,
    nx: usize,
    psi: Vec<f64>,
    zeta: Vec<f64>,
    xi: Vec<f64>,
    z: Vec<f64>,
    zt: Vec<f64>,
    xt: Vec<f64>,
    prev_zt: Vec<f64>,
    prev_xt: Vec<f64>,
    prev_r: f64,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    seen: usize,
    intervals: usize,
}

impl DataAccumulator {
    /// `skip` leading samples are discarded before accumulation starts.
    pub fn new(n: usize, m: usize, dt: f64, weights: &CostWeights, skip: usize) -> Result<Self> {
        if weights.q().nrows() != n || weights.r().nrows() != m {
            return Err(Error::dims("weights", (n, m), (weights.q().nrows(), weights.r().nrows())));
        }
        let nz = tri(n + m + 1);
        let nx = tri(n);
        Ok(DataAccumulator {
            n,
            m,
            dt,
            skip,
            nz,
            nx,
            psi: vec![0.0; nz * nz],
            zeta: vec![0.0; nz * nx],
            xi: vec![0.0; nz],
            z: vec![0.0; n + m + 1],
            zt: vec![0.0; nz],
            xt: vec![0.0; nx],
            prev_zt: vec![0.0; nz],
            prev_xt: vec![0.0; nx],
            prev_r: 0.0,
            q: weights.q().clone(),
            r: weights.r().clone(),
            seen: 0,
            intervals: 0,
        })
    }

    pub fn push(&mut self, x: &[f64], u: &[f64]) {
        let index = self.seen;
        self.seen += 1;
        if index < self.skip {
            return;
        }
        let (n, m) = (self.n, self.m);
        self.z[..n].copy_from_slice(x);
        self.z[n..n + m].copy_from_slice(u);
        self.z[n + m] = 1.0;
        svec_outer_into(&self.z, &mut self.zt);
        svec_outer_into(x, &mut self.xt);

        if index > self.skip {
            let (nz, nx, dt) = (self.nz, self.nx, self.dt);
            let zp = &self.prev_zt;
            for i in 0..nz {
                let a = zp[i];
                if a == 0.0 {
                    continue;
                }
                let ad = a * dt;
                let row = &mut self.psi[i * nz..(i + 1) * nz];
                for j in i..nz {
                    row[j] += ad * zp[j];
                }
                let zrow = &mut self.zeta[i * nx..(i + 1) * nx];
                for ((zj, x1), x0) in zrow.iter_mut().zip(&self.xt).zip(&self.prev_xt) {
                    *zj += a * (x1 - x0);
                }
                self.xi[i] += ad * self.prev_r;
            }
            self.intervals += 1;
        }
        self.prev_r = quad(&self.q, x) + quad(&self.r, u);
        std::mem::swap(&mut self.prev_zt, &mut self.zt);
        std::mem::swap(&mut self.prev_xt, &mut self.xt);
    }

    pub fn finish(self, rank_tol: f64) -> Result<DataMatrices> {
        if self.intervals == 0 {
            return Err(Error::TooFewSamples { samples: self.seen });
        }
        let t_f = self.intervals as f64 * self.dt;
        let nz = self.nz;
        let mut psi = DMatrix::zeros(nz, nz);
        for i in 0..nz {
            for j in i..nz {
                let v = self.psi[i * nz + j] / t_f;
                psi[(i, j)] = v;
                psi[(j, i)] = v;
            }
        }
        let zeta = DMatrix::from_row_slice(nz, self.nx, &self.zeta) / t_f;
        let xi = DVector::from_column_slice(&self.xi) / t_f;
        DataMatrices::from_parts(self.n, self.m, psi, zeta, xi, t_f, rank_tol)
    }
}

fn quad(w: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            acc += v[i] * w[(i, j)] * v[j];
        }
    }
    acc
}

/// The least-squares triplet `(ψ, ζ, ξ)` with cached `ψ†ζ` and `ψ†ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    n: usize,
    m: usize,
    psi: DMatrix<f64>,
    zeta: DMatrix<f64>,
    xi: DVector<f64>,
    t_f: f64,
    cond_psi: f64,
    rank_tol: f64,
    pinv_zeta: DMatrix<f64>,
    pinv_xi: DVector<f64>,
}

impl DataMatrices {
    pub fn from_parts(
        n: usize,
        m: usize,
        psi: DMatrix<f64>,
        zeta: DMatrix<f64>,
        xi: DVector<f64>,
        t_f: f64,
        rank_tol: f64,
    ) -> Result<Self> {
        let nz = tri(n + m + 1);
        if psi.shape() != (nz, nz) {
            return Err(Error::dims("psi", (nz, nz), psi.shape()));
        }
        if zeta.shape() != (nz, tri(n)) {
            return Err(Error::dims("zeta", (nz, tri(n)), zeta.shape()));
        }
        if xi.len() != nz {
            return Err(Error::dims("xi", (nz, 1), (xi.len(), 1)));
        }
        let psi = symmetrize(&psi);
        let cond_psi = linalg::cond(&psi);
        let pinv_psi = pinv(&psi, rank_tol);
        let pinv_zeta = &pinv_psi * &zeta;
        let pinv_xi = &pinv_psi * &xi;
        Ok(DataMatrices {
            n,
            m,
            psi,
            zeta,
            xi,
            t_f,
            cond_psi,
            rank_tol,
            pinv_zeta,
            pinv_xi,
        })
    }

    /// Exact data for `model`: `ψ = I`, `ζ` the linear part of `svec θ(P)`,
    /// `ξ = svec θ(0)`, so that `ψ†(ζ svec P + ξ) = svec θ(P)`.
    pub fn model_implied(model: &SystemModel, w: &CostWeights) -> Result<Self> {
        let (n, m) = (model.n(), model.m());
        let nz = tri(n + m + 1);
        let nx = tri(n);
        let base = svec_unchecked(model.theta_of_p(&ValueMatrix::zeros(n), w)?.matrix());
        let mut zeta = DMatrix::zeros(nz, nx);
        for k in 0..nx {
            let mut e = vec![0.0; nx];
            e[k] = 1.0;
            let p = ValueMatrix::from_symmetric_part(&smat_slice(&e)?);
            let col = svec_unchecked(model.theta_of_p(&p, w)?.matrix()) - &base;
            zeta.set_column(k, &col);
        }
        Self::from_parts(n, m, DMatrix::identity(nz, nz), zeta, base, f64::INFINITY, DEFAULT_RANK_TOL)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn zeta(&self) -> &DMatrix<f64> {
        &self.zeta
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn t_f(&self) -> f64 {
        self.t_f
    }

    pub fn cond_psi(&self) -> f64 {
        self.cond_psi
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    /// True when `cond(ψ)` exceeds [`ILL_CONDITIONED`].
    pub fn ill_conditioned(&self) -> bool {
        !(self.cond_psi <= ILL_CONDITIONED)
    }

    /// `smat(ψ†(ζ svec P + ξ))`, symmetrized.
    pub fn theta_estimate(&self, p: &ValueMatrix) -> Result<ThetaMatrix> {
        let n = self.n;
        if p.matrix().shape() != (n, n) {
            return Err(Error::dims("P", (n, n), p.matrix().shape()));
        }
        let v = &self.pinv_zeta * svec_unchecked(p.matrix()) + &self.pinv_xi;
        let theta = symmetrize(&smat_slice(v.as_slice())?);
        ThetaMatrix::new(theta, self.n, self.m)
    }

    /// `‖ψ svec θ(P) − ζ svec P − ξ‖₂` for the model's `θ`.
    pub fn consistency_residual(&self, model: &SystemModel, w: &CostWeights, p: &ValueMatrix) -> Result<f64> {
        let theta = svec_unchecked(model.theta_of_p(p, w)?.matrix());
        Ok((&self.psi * theta - &self.zeta * svec_unchecked(p.matrix()) - &self.xi).norm())
    }

    /// Text layout: a header line `optistat-data 1`, then `n m t_f rank_tol`,
    /// then `psi`, `zeta`, `xi` blocks, each introduced by `name rows cols`
    /// and followed by one row-major line per row.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "optistat-data 1");
        let _ = writeln!(s, "{} {} {:.16e} {:.16e}", self.n, self.m, self.t_f, self.rank_tol);
        let mut block = |name: &str, mat: &DMatrix<f64>| {
            let _ = writeln!(s, "{name} {} {}", mat.nrows(), mat.ncols());
            for i in 0..mat.nrows() {
                let row: Vec<String> = (0..mat.ncols()).map(|j| format!("{:.16e}", mat[(i, j)])).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        block("psi", &self.psi);
        block("zeta", &self.zeta);
        block("xi", &DMatrix::from_column_slice(self.xi.len(), 1, self.xi.as_slice()));
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format("unexpected end of file".into()))
        };
        if next()?.trim() != "optistat-data 1" {
            return Err(Error::Format("missing 'optistat-data 1' header".into()));
        }
        let head = next()?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Format("expected 'n m t_f rank_tol'".into()));
        }
        let n: usize = parse(parts[0])?;
        let m: usize = parse(parts[1])?;
        let t_f: f64 = parse(parts[2])?;
        let rank_tol: f64 = parse(parts[3])?;
        let mut read_block = |name: &str| -> Result<DMatrix<f64>> {
            let head = next()?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != name {
                return Err(Error::Format(format!("expected '{name} rows cols', got '{head}'")));
            }
            let rows: usize = parse(parts[1])?;
            let cols: usize = parse(parts[2])?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next()?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    data.push(parse::<f64>(tok)?);
                }
                if data.len() - before != cols {
                    return Err(Error::Format(format!("row of '{name}' has the wrong length")));
                }
            }
            Ok(DMatrix::from_row_slice(rows, cols, &data))
        };
        let psi = read_block("psi")?;
        let zeta = read_block("zeta")?;
        let xi = read_block("xi")?;
        if xi.ncols() != 1 {
            return Err(Error::Format("xi must have one column".into()));
        }
        Self::from_parts(n, m, psi, zeta, xi.column(0).into_owned(), t_f, rank_tol)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn parse<T: std::str::FromStr>(tok: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Format(format!("cannot parse '{tok}'")))
}

/// Data matrices from a stored trajectory, dropping the first `burn_in`
/// fraction of samples.
pub fn build_data_matrices(traj: &Trajectory, weights: &CostWeights, burn_in: f64) -> Result<DataMatrices> {
    if traj.len() < 2 {
        return Err(Error::TooFewSamples { samples: traj.len() });
    }
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::InvalidArgument(format!("burn-in fraction must be in [0, 1), got {burn_in}")));
    }
    let skip = (burn_in * traj.len() as f64).floor() as usize;
    let mut acc = DataAccumulator::new(traj.n(), traj.m(), traj.dt(), weights, skip)?;
    for k in 0..traj.len() {
        acc.push(traj.state(k), traj.input(k));
    }
    acc.finish(DEFAULT_RANK_TOL)
}

/// Simulates and accumulates in one pass without storing the trajectory.
pub fn collect_data(
    model: &SystemModel,
    k1: &PolicyGain,
    cfg: &SimConfig,
    weights: &CostWeights,
    burn_in: f64,
) -> Result<DataMatrices> {
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::InvalidArgument(format!("burn-in fraction must be in [0, 1), got {burn_in}")));
    }
    let samples = cfg.steps()? + 1;
    let skip = (burn_in * samples as f64).floor() as usize;
    let mut acc = DataAccumulator::new(model.n(), model.m(), cfg.dt, weights, skip)?;
    simulate_with(model, k1, cfg, |_, _, x, u, _| acc.push(x, u))?;
    acc.finish(DEFAULT_RANK_TOL)
}

/// `(𝒯¹, 𝒯²)` of the vectorized evaluation ODE `ṗ = 𝒯¹p + 𝒯²`:
/// `𝒯¹ = Γ D ψ†ζ D_nᵀ` and `𝒯² = Γ D ψ†ξ` with `Γ = S ⊗ S`,
/// `S = [I_n, −Kᵀ, 0]`.
pub fn transition_matrices(data: &DataMatrices, k: &PolicyGain) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (n, m) = (data.n, data.m);
    if k.matrix().shape() != (m, n) {
        return Err(Error::dims("K", (m, n), k.matrix().shape()));
    }
    let dim = n + m + 1;
    let mut s = DMatrix::zeros(n, dim);
    s.view_mut((0, 0), (n, n)).fill_with_identity();
    s.view_mut((0, n), (n, m)).copy_from(&(-k.matrix().transpose()));
    let gamma_d = kron(&s, &s) * duplication_matrix(dim);
    let t1 = &gamma_d * &data.pinv_zeta * duplication_matrix(n).transpose();
    let t2 = &gamma_d * &data.pinv_xi;
    Ok((t1, t2))
}

/// `(𝒯¹, 𝒯²)` restricted to symmetric matrices in `svec` coordinates,
/// `(D_nᵀ 𝒯¹ D_n, D_nᵀ 𝒯²)`. The full `𝒯¹` annihilates skew-symmetric
/// directions, so stability and equilibria are judged on this restriction.
pub fn reduced_transition_matrices(data: &DataMatrices, k: &PolicyGain) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (t1, t2) = transition_matrices(data, k)?;
    let dn = duplication_matrix(data.n);
    Ok((dn.transpose() * t1 * &dn, dn.transpose() * t2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationMode {
    /// Integrate the evaluation ODE with fixed-step RK4.
    #[default]
    Ode,
    /// Solve for the ODE's equilibrium directly.
    Equilibrium,
}

/// RK4 step for the evaluation ODE on `[0, s_f]`: `min(0.01, s_f/1000)`,
/// shrunk so that `h·ρ(𝒯¹) ≤ 2.5`, then adjusted to land exactly on `s_f`.
pub fn ode_step_count(s_f: f64, spectral_radius: f64) -> usize {
    let mut h = (0.01f64).min(s_f / 1000.0);
    if spectral_radius * h > 2.5 {
        h = 2.5 / spectral_radius;
    }
    ((s_f / h) - 1e-9).ceil().max(1.0) as usize
}

/// `P̂(s_f)` from `dP̂/ds = 𝓗(𝓗(Θ̂(P̂), 0), K)`, `P̂(0) = 0`.
pub fn policy_evaluation_ode(data: &DataMatrices, k: &PolicyGain, s_f: f64) -> Result<ValueMatrix> {
    if !(s_f > 0.0) || !s_f.is_finite() {
        return Err(Error::InvalidArgument(format!("s_f must be positive, got {s_f}")));
    }
    let (t1, t2) = reduced_transition_matrices(data, k)?;
    let steps = ode_step_count(s_f, linalg::spectral_radius(&t1));
    let h = s_f / steps as f64;
    let dim = t2.len();
    let mut p = DVector::zeros(dim);
    let mut k1 = DVector::zeros(dim);
    let mut k2 = DVector::zeros(dim);
    let mut k3 = DVector::zeros(dim);
    let mut k4 = DVector::zeros(dim);
    let mut tmp = DVector::zeros(dim);
    let f = |out: &mut DVector<f64>, v: &DVector<f64>| {
        out.copy_from(&t2);
        out.gemv(1.0, &t1, v, 1.0);
    };
    for step in 1..=steps {
        f(&mut k1, &p);
        tmp.copy_from(&p);
        tmp.axpy(0.5 * h, &k1, 1.0);
        f(&mut k2, &tmp);
        tmp.copy_from(&p);
        tmp.axpy(0.5 * h, &k2, 1.0);
        f(&mut k3, &tmp);
        tmp.copy_from(&p);
        tmp.axpy(h, &k3, 1.0);
        f(&mut k4, &tmp);
        p.axpy(h / 6.0, &k1, 1.0);
        p.axpy(h / 3.0, &k2, 1.0);
        p.axpy(h / 3.0, &k3, 1.0);
        p.axpy(h / 6.0, &k4, 1.0);
        let norm = p.norm();
        if !(norm <= ODE_BLOWUP) {
            return Err(Error::OdeUnstable {
                s: step as f64 * h,
                norm,
            });
        }
    }
    Ok(ValueMatrix::from_symmetric_part(&smat_slice(p.as_slice())?))
}

/// The ODE's fixed point `−(𝒯¹)⁻¹𝒯²`.
pub fn equilibrium_policy_evaluation(data: &DataMatrices, k: &PolicyGain) -> Result<ValueMatrix> {
    let (t1, t2) = reduced_transition_matrices(data, k)?;
    let abscissa = linalg::spectral_abscissa(&t1);
    if !(abscissa < 0.0) {
        return Err(Error::NotHurwitz { abscissa });
    }
    let sol = t1
        .lu()
        .solve(&(-t2))
        .ok_or(Error::NotHurwitz { abscissa })?;
    Ok(ValueMatrix::from_symmetric_part(&smat_slice(sol.as_slice())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsbpiResult {
    /// `K̂₁ … K̂_N`.
    pub gains: Vec<PolicyGain>,
    /// `P̂ᵢ(s_f)` for `i = 1..N−1`.
    pub value_estimates: Vec<ValueMatrix>,
    pub theta_estimates: Vec<ThetaMatrix>,
    pub g_estimates: Vec<GMatrix>,
    pub diagnostics: Option<Vec<IterationRecord>>,
}

/// Runs `N − 1` data-driven evaluation/improvement steps from `k1`.
pub fn olsbpi(
    data: &DataMatrices,
    k1: &PolicyGain,
    iterations: usize,
    s_f: f64,
    mode: EvaluationMode,
) -> Result<OlsbpiResult> {
    if iterations < 2 {
        return Err(Error::InvalidArgument(format!("N must be at least 2, got {iterations}")));
    }
    let (n, m) = (data.n, data.m);
    if k1.matrix().shape() != (m, n) {
        return Err(Error::dims("K1", (m, n), k1.matrix().shape()));
    }
    let mut result = OlsbpiResult {
        gains: vec![k1.clone()],
        value_estimates: Vec::new(),
        theta_estimates: Vec::new(),
        g_estimates: Vec::new(),
        diagnostics: None,
    };
    for i in 1..iterations {
        let k = result.gains.last().expect("non-empty");
        let p = match mode {
            EvaluationMode::Ode => policy_evaluation_ode(data, k, s_f),
            EvaluationMode::Equilibrium => equilibrium_policy_evaluation(data, k),
        }
        .map_err(|e| e.at_iteration(i))?;
        let theta = data.theta_estimate(&p).map_err(|e| e.at_iteration(i))?;
        let g = theta.g_part();
        let next = improved_gain(&g).map_err(|e| e.at_iteration(i))?;
        result.value_estimates.push(p);
        result.theta_estimates.push(theta);
        result.g_estimates.push(g);
        result.gains.push(next);
    }
    Ok(result)
}

/// Ground-truth diagnostics for one learned gain.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub index: usize,
    pub gain: PolicyGain,
    pub admissible: bool,
    pub abscissa: f64,
    /// `‖K̂ᵢ − K*‖_F`.
    pub gain_error: f64,
    /// `P̃ᵢ`, the exact value of `K̂ᵢ` (absent when not admissible).
    pub value: Option<ValueMatrix>,
    pub value_error: Option<f64>,
    /// `J̃ᵢ = tr(CᵀP̃ᵢC)`.
    pub cost: Option<f64>,
    /// `J̃ᵢ − J*`.
    pub cost_error: Option<f64>,
    /// `ΔGᵢ = Ĝᵢ − G(P̃ᵢ)`, absent for the final gain.
    pub delta_g: Option<DMatrix<f64>>,
    /// `‖ΔGᵢ‖_F / ‖G(P̃ᵢ)‖_F`.
    pub rel_delta_g: Option<f64>,
}

/// Compares each learned gain with the exact solution of its policy
/// evaluation and with the optimum. Non-admissible gains are flagged.
pub fn diagnose(
    result: &OlsbpiResult,
    model: &SystemModel,
    w: &CostWeights,
    reference: &OptimalReference,
) -> Result<Vec<IterationRecord>> {
    let mut out = Vec::with_capacity(result.gains.len());
    for (idx, k) in result.gains.iter().enumerate() {
        let adm = model.is_admissible(k)?;
        let gain_error = k.distance(&reference.gain);
        let mut rec = IterationRecord {
            index: idx + 1,
            gain: k.clone(),
            admissible: adm.admissible,
            abscissa: adm.abscissa,
            gain_error,
            value: None,
            value_error: None,
            cost: None,
            cost_error: None,
            delta_g: None,
            rel_delta_g: None,
        };
        if adm.admissible {
            if let Ok(pc) = policy_cost(model, w, k) {
                let g_true = model.g_of_p(&pc.value, w)?;
                if let Some(g_hat) = result.g_estimates.get(idx) {
                    let delta = g_hat.matrix() - g_true.matrix();
                    rec.rel_delta_g = Some(delta.norm() / g_true.matrix().norm());
                    rec.delta_g = Some(delta);
                }
                rec.value_error = Some(pc.value.distance(&reference.value));
                rec.cost = Some(pc.cost);
                rec.cost_error = Some(pc.cost - reference.cost);
                rec.value = Some(pc.value);
            }
        }
        out.push(rec);
    }
    Ok(out)
}

impl OlsbpiResult {
    /// Fills [`OlsbpiResult::diagnostics`] from a ground-truth model.
    pub fn attach_diagnostics(
        &mut self,
        model: &SystemModel,
        w: &CostWeights,
        reference: &OptimalReference,
    ) -> Result<()> {
        self.diagnostics = Some(diagnose(self, model, w, reference)?);
        Ok(())
    }
}

/// `vec(Q + KᵀRK)`, the exact-data value of `𝒯²`.
pub fn exact_forcing(w: &CostWeights, k: &PolicyGain) -> DVector<f64> {
    vec(&(w.q() + k.matrix().transpose() * w.r() * k.matrix()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_model;
    use crate::sim::simulate;
    use crate::solvers::{optimal_reference, solve_generalized_lyapunov, standard_pi, PiOptions};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn scalar_model() -> (SystemModel, CostWeights) {
        let model = SystemModel::new(m1(-1.0), m1(1.0), vec![], vec![], m1(1.0)).unwrap();
        (model, CostWeights::identity(1, 1))
    }

    #[test]
    fn scalar_ode_closed_form() {
        let (model, w) = scalar_model();
        let data = DataMatrices::model_implied(&model, &w).unwrap();
        let k = PolicyGain::zeros(1, 1);
        let (t1, t2) = transition_matrices(&data, &k).unwrap();
        assert_relative_eq!(t1[(0, 0)], -2.0, epsilon = 1e-14);
        assert_relative_eq!(t2[0], 1.0, epsilon = 1e-14);
        let p = policy_evaluation_ode(&data, &k, 5.0).unwrap();
        let exact = (1.0 - (-10.0f64).exp()) / 2.0;
        assert!((p.matrix()[(0, 0)] - exact).abs() < 1e-10);
        assert_relative_eq!(p.matrix()[(0, 0)], 0.49998, epsilon = 1e-5);
        let eq = equilibrium_policy_evaluation(&data, &k).unwrap();
        assert_relative_eq!(eq.matrix()[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn ode_doubling_horizon_is_stationary() {
        let (model, w) = scalar_model();
        let data = DataMatrices::model_implied(&model, &w).unwrap();
        let k = PolicyGain::new(m1(0.4));
        let a = policy_evaluation_ode(&data, &k, 50.0).unwrap();
        let b = policy_evaluation_ode(&data, &k, 100.0).unwrap();
        assert!(a.distance(&b) < 1e-8);
    }

    #[test]
    fn exact_data_transition_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.random_range(1..4);
            let m = rng.random_range(1..3);
            let model = random_model(&mut rng, n, m, 1, 1);
            let w = CostWeights::identity(n, m);
            let data = DataMatrices::model_implied(&model, &w).unwrap();
            let k = PolicyGain::new(DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)));
            let (t1, t2) = transition_matrices(&data, &k).unwrap();
            let big_a = model.big_a(&k).unwrap();
            // agreement on vec of symmetric matrices, i.e. after the projector D Dᵀ
            let dn = duplication_matrix(n);
            let on_sym = &big_a * &dn * dn.transpose();
            assert!((&t1 - &on_sym).norm() <= 1e-10 * big_a.norm().max(1.0));
            assert!((t2 - exact_forcing(&w, &k)).norm() < 1e-10);
            let (r1, _) = reduced_transition_matrices(&data, &k).unwrap();
            let reduced = dn.transpose() * &big_a * &dn;
            assert!((r1 - reduced).norm() <= 1e-10 * big_a.norm().max(1.0));
        }
    }

    #[test]
    fn exact_data_olsbpi_matches_standard_pi() {
        let model = SystemModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.05])],
            vec![DMatrix::from_column_slice(2, 1, &[0.0, 0.05])],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let w = CostWeights::identity(2, 1);
        let k1 = PolicyGain::new(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        let data = DataMatrices::model_implied(&model, &w).unwrap();
        let trace = standard_pi(&model, &w, &k1, &PiOptions::default()).unwrap();
        let res = olsbpi(&data, &k1, 6, 100.0, EvaluationMode::Ode).unwrap();
        for (i, k) in res.gains.iter().enumerate().take(trace.iterations.len()) {
            assert!(k.distance(&trace.iterations[i].gain) < 1e-6, "iteration {}", i + 1);
        }
        let reference = optimal_reference(&model, &w, &k1).unwrap();
        let diag = diagnose(&res, &model, &w, &reference).unwrap();
        for rec in &diag {
            if let Some(d) = rec.rel_delta_g {
                assert!(d < 1e-7, "{d}");
            }
            assert!(rec.cost_error.unwrap() >= -1e-10);
        }
    }

    #[test]
    fn ode_matches_lyapunov_on_exact_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        while checked < 3 {
            let model = random_model(&mut rng, 3, 1, 1, 1);
            let w = CostWeights::identity(3, 1);
            let k = PolicyGain::new(model.b().transpose() * rng.random_range(0.0..5.0));
            let adm = model.is_admissible(&k).unwrap();
            if !(adm.abscissa < -0.2) {
                continue;
            }
            checked += 1;
            let data = DataMatrices::model_implied(&model, &w).unwrap();
            let s = w.q() + k.matrix().transpose() * w.r() * k.matrix();
            let p_exact = solve_generalized_lyapunov(&model, &k, &s).unwrap();
            let p_ode = policy_evaluation_ode(&data, &k, 100.0).unwrap();
            let p_eq = equilibrium_policy_evaluation(&data, &k).unwrap();
            assert!(p_exact.distance(&p_eq) < 1e-9);
            assert!(p_exact.distance(&p_ode) < 1e-6 * p_exact.matrix().norm().max(1.0));

            // closed-form transient p(s) = p* − exp(T s) p*
            let (t1, _) = reduced_transition_matrices(&data, &k).unwrap();
            let p_star = svec_unchecked(p_exact.matrix());
            let p3 = &p_star - (&t1 * 3.0).exp() * &p_star;
            let ode3 = svec_unchecked(policy_evaluation_ode(&data, &k, 3.0).unwrap().matrix());
            assert!((p3 - ode3).norm() < 1e-8 * p_star.norm());
        }
    }

    #[test]
    fn equilibrium_rejects_non_hurwitz() {
        let model = SystemModel::new(m1(1.0), m1(1.0), vec![], vec![], m1(1.0)).unwrap();
        let w = CostWeights::identity(1, 1);
        let data = DataMatrices::model_implied(&model, &w).unwrap();
        let r = equilibrium_policy_evaluation(&data, &PolicyGain::zeros(1, 1));
        assert!(matches!(r, Err(Error::NotHurwitz { .. })));
        let r = policy_evaluation_ode(&data, &PolicyGain::zeros(1, 1), 100.0);
        assert!(matches!(r, Err(Error::OdeUnstable { .. })));
    }

    #[test]
    fn olsbpi_errors_carry_iteration() {
        let model = SystemModel::new(m1(1.0), m1(1.0), vec![], vec![], m1(1.0)).unwrap();
        let w = CostWeights::identity(1, 1);
        let data = DataMatrices::model_implied(&model, &w).unwrap();
        let r = olsbpi(&data, &PolicyGain::zeros(1, 1), 3, 100.0, EvaluationMode::Equilibrium);
        match r {
            Err(Error::AtIteration { iteration: 1, source }) => {
                assert!(matches!(*source, Error::NotHurwitz { .. }))
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(olsbpi(&data, &PolicyGain::zeros(1, 1), 1, 1.0, EvaluationMode::Ode).is_err());
    }

    #[test]
    fn equilibrium_trajectory_gives_degenerate_data() {
        let model = SystemModel::new(m1(-1.0), m1(1.0), vec![], vec![], m1(1e-300)).unwrap();
        let w = CostWeights::identity(1, 1);
        let traj = simulate(&model, &PolicyGain::zeros(1, 1), &SimConfig::new(1.0, 0.0, 1)).unwrap();
        let data = build_data_matrices(&traj, &w, 0.0).unwrap();
        let nz = data.psi().nrows();
        for i in 0..nz {
            for j in 0..nz {
                let expected = if i == nz - 1 && j == nz - 1 { 1.0 } else { 0.0 };
                assert_relative_eq!(data.psi()[(i, j)], expected, epsilon = 1e-12);
            }
        }
        assert!(data.zeta().norm() < 1e-300);
        assert!(data.xi().norm() < 1e-300);
    }

    #[test]
    fn too_few_samples() {
        let w = CostWeights::identity(1, 1);
        let traj = Trajectory::from_parts(1, 1, 0.1, vec![0.0], vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(build_data_matrices(&traj, &w, 0.0), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn no_exploration_is_rank_deficient() {
        let (model, w) = scalar_model();
        let data = collect_data(&model, &PolicyGain::new(m1(0.5)), &SimConfig::new(200.0, 0.0, 2), &w, 0.0).unwrap();
        assert!(data.cond_psi() > 1e12, "{}", data.cond_psi());
        assert!(data.ill_conditioned());
    }

    #[test]
    fn streaming_matches_stored_trajectory() {
        let (model, w) = scalar_model();
        let k = PolicyGain::new(m1(0.5));
        let cfg = SimConfig::new(5.0, 1.0, 8);
        let traj = simulate(&model, &k, &cfg).unwrap();
        let a = build_data_matrices(&traj, &w, 0.2).unwrap();
        let b = collect_data(&model, &k, &cfg, &w, 0.2).unwrap();
        assert_eq!(a, b);
        let eig = linalg::min_eigenvalue_sym(a.psi());
        assert!(eig >= -1e-10 * linalg::max_eigenvalue_sym(a.psi()));
    }

    #[test]
    fn save_load_roundtrip() {
        let (model, w) = scalar_model();
        let data = collect_data(&model, &PolicyGain::new(m1(0.5)), &SimConfig::new(2.0, 1.0, 3), &w, 0.0).unwrap();
        let mut buf = Vec::new();
        data.write_to(&mut buf).unwrap();
        let back = DataMatrices::read_from(&buf[..]).unwrap();
        assert_eq!(back, data);
        assert!(DataMatrices::read_from(&b"optistat-data 2\n"[..]).is_err());
    }

    #[test]
    fn scalar_learning_recovers_optimum() {
        let (model, w) = scalar_model();
        let k1 = PolicyGain::zeros(1, 1);
        let data = collect_data(&model, &k1, &SimConfig::new(500.0, 1.0, 4), &w, 0.0).unwrap();
        assert!(!data.ill_conditioned());
        let res = olsbpi(&data, &k1, 6, 50.0, EvaluationMode::Ode).unwrap();
        let k_star = 2f64.sqrt() - 1.0;
        let last = res.gains.last().unwrap().matrix()[(0, 0)];
        assert!((last - k_star).abs() < 0.1 * k_star, "{last}");
        assert!(res.g_estimates.iter().all(|g| g.matrix() == &g.matrix().transpose()));
    }
}
