//! Model-based solvers: generalized Lyapunov equations, exact and
//! disturbance-injected policy iteration, and an independent Riccati solver
//! used to cross-check them.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, smat_slice, svec_unchecked, symmetrize, vec, vec_inv};
use crate::model::{improved_gain, CostWeights, GMatrix, PolicyGain, SystemModel, ValueMatrix, MAX_COND};

/// Solves `𝓛_K(P) = −S` through the dense `n² × n²` system `𝒜(K) vec(P) = −vec(S)`.
pub fn solve_generalized_lyapunov(
    model: &SystemModel,
    k: &PolicyGain,
    s: &DMatrix<f64>,
) -> Result<ValueMatrix> {
    let n = model.n();
    if s.shape() != (n, n) {
        return Err(Error::dims("S", (n, n), s.shape()));
    }
    let big_a = model.big_a(k)?;
    let cond = linalg::cond(&big_a);
    if !(cond < MAX_COND) {
        return Err(Error::SingularOperator { cond });
    }
    let rhs = -vec(s);
    let sol = big_a.lu().solve(&rhs).ok_or(Error::SingularOperator { cond })?;
    let p = ValueMatrix::from_symmetric_part(&vec_inv(&sol, n, n)?);

    let s_norm = s.norm();
    if s_norm > 0.0 {
        let resid = (model.lyap_op(k, &p)? + s).norm() / s_norm;
        if !(resid < 1e-8) {
            return Err(Error::SingularOperator { cond });
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCost {
    /// Solution of `𝓛_K(P) + Q + KᵀRK = 0`.
    pub value: ValueMatrix,
    /// Stationary expected running cost `tr(CᵀPC)`.
    pub cost: f64,
}

/// Value matrix and stationary cost of the linear policy `u = −Kx`.
pub fn policy_cost(model: &SystemModel, w: &CostWeights, k: &PolicyGain) -> Result<PolicyCost> {
    let adm = model.is_admissible(k)?;
    if !adm.admissible {
        return Err(Error::NotAdmissible {
            abscissa: adm.abscissa,
        });
    }
    let value = evaluate_policy(model, w, k)?;
    let cost = stationary_cost(model, &value);
    Ok(PolicyCost { value, cost })
}

fn evaluate_policy(model: &SystemModel, w: &CostWeights, k: &PolicyGain) -> Result<ValueMatrix> {
    let km = k.matrix();
    let s = w.q() + km.transpose() * w.r() * km;
    solve_generalized_lyapunov(model, k, &symmetrize(&s))
}

/// `tr(CᵀPC)`.
pub fn stationary_cost(model: &SystemModel, p: &ValueMatrix) -> f64 {
    (model.c().transpose() * p.matrix() * model.c()).trace()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiOptions {
    pub max_iter: usize,
    /// Stop once `‖P_i − P_{i−1}‖_F < tol · max(1, ‖P_i‖_F)`.
    pub tol: f64,
    /// Loewner-order decrease may be violated by this much before it is flagged.
    pub monotonicity_slack: f64,
}

impl Default for PiOptions {
    fn default() -> Self {
        PiOptions {
            max_iter: 50,
            tol: 1e-10,
            monotonicity_slack: 1e-8,
        }
    }
}

/// One policy-iteration step: the gain that was evaluated and what came of it.
#[derive(Debug, Clone, PartialEq)]
pub struct PiIterate {
    /// 1-based iteration index.
    pub index: usize,
    pub gain: PolicyGain,
    /// Exact value of `gain`.
    pub value: ValueMatrix,
    /// `tr(CᵀPC)` for `value`.
    pub cost: f64,
    /// `G(value)`.
    pub g: GMatrix,
    /// `‖ΔG_i‖_F` of the injected disturbance (0 for exact iteration).
    pub disturbance_norm: f64,
    /// `‖ℛ(P_i)‖_F`, NaN when `R + Σ(P_i)` could not be inverted.
    pub residual: f64,
    /// `‖P_i − P_{i−1}‖_F`.
    pub step: Option<f64>,
    /// `λ_min(P_{i−1} − P_i)`.
    pub monotonicity_gap: Option<f64>,
    /// `‖P_i − P*‖_F` when a reference solution is known.
    pub value_error: Option<f64>,
    /// Spectral abscissa of `𝒜(K_i)`.
    pub abscissa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub iteration: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiTrace {
    pub iterations: Vec<PiIterate>,
    pub converged: bool,
    /// `‖ℛ(P_N)‖_F` of the last evaluated value matrix.
    pub final_residual: f64,
    /// Iterations whose value failed to decrease in the Loewner order (warnings).
    pub monotonicity_violations: Vec<usize>,
    /// Set when a disturbed run produced a gain that could not be evaluated.
    pub breakdown: Option<Breakdown>,
}

impl PiTrace {
    pub fn last(&self) -> Option<&PiIterate> {
        self.iterations.last()
    }

    pub fn final_value(&self) -> Option<&ValueMatrix> {
        self.last().map(|it| &it.value)
    }

    pub fn final_gain(&self) -> Option<&PolicyGain> {
        self.last().map(|it| &it.gain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceMode {
    #[default]
    None,
    /// `‖ΔG_i‖_F = magnitude` every iteration.
    Constant,
    /// `‖ΔG_i‖_F = magnitude / i²`.
    Decaying,
    /// `‖ΔG_i‖_F` uniform on `[0, magnitude]`.
    RandomBounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub mode: DisturbanceMode,
    pub magnitude: f64,
    pub seed: u64,
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        DisturbanceSpec {
            mode: DisturbanceMode::None,
            magnitude: 0.0,
            seed: 0,
        }
    }

    pub fn new(mode: DisturbanceMode, magnitude: f64, seed: u64) -> Result<Self> {
        if !(magnitude >= 0.0) || !magnitude.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "disturbance magnitude must be finite and >= 0, got {magnitude}"
            )));
        }
        Ok(DisturbanceSpec { mode, magnitude, seed })
    }
}

/// Draws `ΔG_i`: a symmetric matrix with i.i.d. standard normal upper
/// triangle, rescaled to the requested Frobenius norm.
struct DisturbanceSampler {
    spec: DisturbanceSpec,
    rng: ChaCha20Rng,
}

impl DisturbanceSampler {
    fn new(spec: DisturbanceSpec) -> Self {
        DisturbanceSampler {
            spec,
            rng: ChaCha20Rng::seed_from_u64(spec.seed),
        }
    }

    fn sample(&mut self, iteration: usize, dim: usize) -> Option<DMatrix<f64>> {
        let norm = match self.spec.mode {
            DisturbanceMode::None => return None,
            DisturbanceMode::Constant => self.spec.magnitude,
            DisturbanceMode::Decaying => self.spec.magnitude / (iteration * iteration) as f64,
            DisturbanceMode::RandomBounded => self.spec.magnitude * self.rng.random::<f64>(),
        };
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let z: f64 = self.rng.sample(StandardNormal);
                m[(i, j)] = z;
                m[(j, i)] = z;
            }
        }
        let f = m.norm();
        if f == 0.0 {
            return Some(m);
        }
        Some(m * (norm / f))
    }
}

fn run_pi(
    model: &SystemModel,
    w: &CostWeights,
    k1: &PolicyGain,
    spec: DisturbanceSpec,
    opts: &PiOptions,
    reference: Option<&ValueMatrix>,
) -> Result<PiTrace> {
    let adm = model.is_admissible(k1)?;
    if !adm.admissible {
        return Err(Error::NotAdmissible {
            abscissa: adm.abscissa,
        });
    }
    let stop_on_convergence = spec.mode == DisturbanceMode::None;
    let mut sampler = DisturbanceSampler::new(spec);
    let dim = model.n() + model.m();

    let mut iterations: Vec<PiIterate> = Vec::new();
    let mut violations = Vec::new();
    let mut converged = false;
    let mut breakdown = None;
    let mut k = k1.clone();
    let mut abscissa = adm.abscissa;

    for i in 1..=opts.max_iter.max(1) {
        if i > 1 {
            let adm = model.is_admissible(&k)?;
            if !adm.admissible {
                breakdown = Some(Breakdown {
                    iteration: i,
                    message: Error::NotAdmissible { abscissa: adm.abscissa }.to_string(),
                });
                break;
            }
            abscissa = adm.abscissa;
        }
        let p = match evaluate_policy(model, w, &k) {
            Ok(p) => p,
            Err(e) => {
                breakdown = Some(Breakdown {
                    iteration: i,
                    message: e.to_string(),
                });
                break;
            }
        };
        let g = model.g_of_p(&p, w)?;
        let residual = model
            .riccati_residual(&p, w)
            .map(|r| r.norm())
            .unwrap_or(f64::NAN);
        let prev = iterations.last().map(|it| it.value.matrix());
        let step = prev.map(|pp| (p.matrix() - pp).norm());
        let gap = prev.map(|pp| linalg::min_eigenvalue_sym(&(pp - p.matrix())));
        if gap.is_some_and(|g| g < -opts.monotonicity_slack) && stop_on_convergence {
            violations.push(i);
        }
        let delta = sampler.sample(i, dim);
        let disturbance_norm = delta.as_ref().map_or(0.0, |d| d.norm());
        let g_hat = match &delta {
            Some(d) => g.add(d)?,
            None => g.clone(),
        };
        let p_norm = p.matrix().norm();
        iterations.push(PiIterate {
            index: i,
            gain: k.clone(),
            cost: stationary_cost(model, &p),
            value_error: reference.map(|r| r.distance(&p)),
            value: p,
            g,
            disturbance_norm,
            residual,
            step,
            monotonicity_gap: gap,
            abscissa,
        });
        if stop_on_convergence && step.is_some_and(|s| s < opts.tol * p_norm.max(1.0)) {
            converged = true;
            break;
        }
        match improved_gain(&g_hat) {
            Ok(next) => k = next,
            Err(e) => {
                breakdown = Some(Breakdown {
                    iteration: i,
                    message: e.to_string(),
                });
                break;
            }
        }
    }
    let final_residual = iterations.last().map_or(f64::NAN, |it| it.residual);
    Ok(PiTrace {
        iterations,
        converged,
        final_residual,
        monotonicity_violations: violations,
        breakdown,
    })
}

/// Exact policy iteration from an admissible `k1`.
///
/// Monotonicity violations are recorded in the trace rather than raised.
pub fn standard_pi(
    model: &SystemModel,
    w: &CostWeights,
    k1: &PolicyGain,
    opts: &PiOptions,
) -> Result<PiTrace> {
    let trace = run_pi(model, w, k1, DisturbanceSpec::none(), opts, None)?;
    if let Some(b) = &trace.breakdown {
        return Err(Error::InvalidArgument(b.message.clone()).at_iteration(b.iteration));
    }
    if !trace.converged {
        return Err(Error::NoConvergence {
            iterations: trace.iterations.len(),
            last_step: trace.last().and_then(|it| it.step).unwrap_or(f64::NAN),
        });
    }
    Ok(trace)
}

/// Policy iteration where each `G̃_i = G(P̃_i)` is perturbed by a sampled
/// `ΔG_i` before the gain update.
///
/// Runs `opts.max_iter` iterations (or stops at convergence when the mode is
/// `None`); a gain that can no longer be evaluated ends the run and is
/// recorded in [`PiTrace::breakdown`].
pub fn robust_pi(
    model: &SystemModel,
    w: &CostWeights,
    k1: &PolicyGain,
    spec: DisturbanceSpec,
    opts: &PiOptions,
    reference: Option<&ValueMatrix>,
) -> Result<PiTrace> {
    run_pi(model, w, k1, spec, opts, reference)
}

/// `(P*, K*, J*)` obtained by running exact policy iteration to convergence.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalReference {
    pub value: ValueMatrix,
    pub gain: PolicyGain,
    pub cost: f64,
    pub trace: PiTrace,
}

pub fn optimal_reference(
    model: &SystemModel,
    w: &CostWeights,
    k1: &PolicyGain,
) -> Result<OptimalReference> {
    let opts = PiOptions {
        max_iter: 200,
        ..PiOptions::default()
    };
    let trace = standard_pi(model, w, k1, &opts)?;
    let value = trace.final_value().cloned().expect("converged trace is non-empty");
    let gain = model.greedy_gain(&value, w)?;
    let cost = stationary_cost(model, &value);
    Ok(OptimalReference {
        value,
        gain,
        cost,
        trace,
    })
}

/// Stabilizing solution of the noise-free Riccati equation
/// `AᵀP + PA − PBR⁻¹BᵀP + Q = 0`, from the matrix sign function of the
/// Hamiltonian.
pub fn care_sign_function(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::OracleDiverged { reason: "R is singular".into() })?;
    let g = b * r_inv * b.transpose();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut z = h;
    let mut converged = false;
    for _ in 0..200 {
        let det = z.determinant().abs();
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::OracleDiverged {
                reason: "Hamiltonian has eigenvalues on the imaginary axis".into(),
            });
        }
        let c = det.powf(1.0 / (2 * n) as f64);
        let z_inv = z.clone().try_inverse().ok_or_else(|| Error::OracleDiverged {
            reason: "sign iteration hit a singular iterate".into(),
        })?;
        let next = (&z / c + z_inv * c) * 0.5;
        let change = (&next - &z).norm();
        z = next;
        if change <= 1e-13 * z.norm() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::OracleDiverged {
            reason: "matrix sign iteration did not converge".into(),
        });
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let p = linalg::pinv(&lhs, 1e-14) * rhs;
    Ok(symmetrize(&p))
}

/// Solves `ℛ(P) = 0` directly by damped Newton iteration on `svec(P)` with a
/// finite-difference Jacobian and backtracking on `‖ℛ‖_F`, starting from the
/// noise-free solution.
///
/// `tol` bounds `‖ℛ(P)‖_F` relative to the size of its terms. Only the
/// stabilizing root (admissible greedy gain, `P ≻ 0`) is accepted.
pub fn riccati_oracle(model: &SystemModel, w: &CostWeights, tol: f64) -> Result<ValueMatrix> {
    let p0 = care_sign_function(model.a(), model.b(), w.q(), w.r())?;
    let residual = |v: &[f64]| -> Option<Vec<f64>> {
        let p = ValueMatrix::from_symmetric_part(&smat_slice(v).ok()?);
        let r = model.riccati_residual(&p, w).ok()?;
        Some(svec_unchecked(&r).iter().copied().collect())
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale_of = |v: &[f64]| {
        let p = smat_slice(v).expect("triangular length");
        (w.q().norm() + 2.0 * model.a().norm() * p.norm()).max(1.0)
    };

    let mut v: Vec<f64> = svec_unchecked(&p0).iter().copied().collect();
    let mut f = residual(&v).ok_or_else(|| Error::OracleDiverged {
        reason: "residual undefined at the starting point".into(),
    })?;
    let dim = v.len();
    let mut done = false;
    for _ in 0..200 {
        let fnorm = norm(&f);
        if fnorm <= tol * scale_of(&v) {
            done = true;
            break;
        }
        let mut jac = DMatrix::zeros(dim, dim);
        let h = 1e-6 * v.iter().fold(1.0f64, |a, x| a.max(x.abs()));
        for col in 0..dim {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[col] += h;
            vm[col] -= h;
            let (fp, fm) = match (residual(&vp), residual(&vm)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::OracleDiverged {
                        reason: "residual undefined near the iterate".into(),
                    })
                }
            };
            for row in 0..dim {
                jac[(row, col)] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        let rhs = -nalgebra::DVector::from_column_slice(&f);
        let step = match jac.clone().lu().solve(&rhs) {
            Some(s) => s,
            None => linalg::pinv(&jac, 1e-12) * rhs,
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-10 {
            let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Some(ft) = residual(&trial) {
                if norm(&ft) < (1.0 - 1e-4 * alpha) * fnorm {
                    v = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // stagnation at rounding level is still a solution
            if fnorm <= 1e3 * tol * scale_of(&v) {
                done = true;
                break;
            }
            return Err(Error::OracleDiverged {
                reason: format!("line search failed at residual {fnorm:.3e}"),
            });
        }
    }
    if !done {
        let fnorm = norm(&f);
        if !(fnorm <= 1e3 * tol * scale_of(&v)) {
            return Err(Error::OracleDiverged {
                reason: format!("no convergence, residual {fnorm:.3e}"),
            });
        }
    }
    let p = ValueMatrix::from_symmetric_part(&smat_slice(&v)?);
    let k = model.greedy_gain(&p, w)?;
    if !model.is_admissible(&k)?.admissible || !(p.min_eigenvalue() > 0.0) {
        return Err(Error::OracleDiverged {
            reason: "converged to a non-stabilizing root".into(),
        });
    }
    Ok(p)
}
