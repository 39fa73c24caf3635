//! Euler-Maruyama simulation of the closed loop under the exploratory policy
//! `u = −K₁x + σ_u y`, where `y` is an Ornstein-Uhlenbeck process
//! `dy = −y dt + dw`.
//!
//! Per step the Gaussian increments are drawn from a single
//! `ChaCha20Rng::seed_from_u64(seed)` stream (the `rand_chacha` 0.9
//! algorithm) in this order: the `q₁` state-noise increments, the `q₂`
//! input-noise increments, the `p` additive increments, then the `m`
//! exploration increments. Each is `√dt · N(0, 1)` via `rand_distr::StandardNormal`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PolicyGain, SystemModel};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_BLOWUP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub t_f: f64,
    pub sigma_u: f64,
    #[serde(default)]
    pub seed: u64,
    /// Initial state, zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Initial exploration state, zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
    #[serde(default = "default_blowup")]
    pub blowup: f64,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn default_blowup() -> f64 {
    DEFAULT_BLOWUP
}

impl SimConfig {
    pub fn new(t_f: f64, sigma_u: f64, seed: u64) -> Self {
        SimConfig {
            dt: DEFAULT_DT,
            t_f,
            sigma_u,
            seed,
            x0: None,
            y0: None,
            blowup: DEFAULT_BLOWUP,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    /// Number of Euler steps, `round(t_f / dt)`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_f >= self.dt) || !self.t_f.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "t_f must be finite and at least dt, got {}",
                self.t_f
            )));
        }
        let steps = (self.t_f / self.dt).round();
        if steps > (1u64 << 52) as f64 {
            return Err(Error::InvalidArgument(format!("t_f/dt = {steps:e} is too large")));
        }
        Ok(steps as usize)
    }

    fn validate(&self, n: usize, m: usize) -> Result<usize> {
        let steps = self.steps()?;
        if !self.sigma_u.is_finite() {
            return Err(Error::InvalidArgument("sigma_u must be finite".into()));
        }
        if !(self.blowup > 0.0) {
            return Err(Error::InvalidArgument("blowup threshold must be positive".into()));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != n {
                return Err(Error::dims("x0", (n, 1), (x0.len(), 1)));
            }
        }
        if let Some(y0) = &self.y0 {
            if y0.len() != m {
                return Err(Error::dims("y0", (m, 1), (y0.len(), 1)));
            }
        }
        Ok(steps)
    }
}

/// One Euler step of `dy = −y dt + dw`.
pub fn ou_noise_step(y: &[f64], dt: f64, dw: &[f64]) -> Vec<f64> {
    y.iter().zip(dw).map(|(yi, wi)| yi - yi * dt + wi).collect()
}

/// Drift, diffusion and additive-noise matrices of the cascade `v = [x; y]`:
/// `dv = 𝒜v dt + Σⱼ 𝒟ⱼv dw₁ⱼ + Σₖ ℱₖv dw₂ₖ + 𝒞 [dw₃; dw₄]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub drift: DMatrix<f64>,
    pub state_noise: Vec<DMatrix<f64>>,
    pub input_noise: Vec<DMatrix<f64>>,
    pub additive: DMatrix<f64>,
}

pub fn cascade_matrices(model: &SystemModel, k: &PolicyGain, sigma_u: f64) -> Result<Cascade> {
    let (n, m, p) = (model.n(), model.m(), model.p());
    let km = k.matrix();
    if km.shape() != (m, n) {
        return Err(Error::dims("K", (m, n), km.shape()));
    }
    let dim = n + m;
    let mut drift = DMatrix::zeros(dim, dim);
    drift.view_mut((0, 0), (n, n)).copy_from(&model.closed_loop(k)?);
    drift.view_mut((0, n), (n, m)).copy_from(&(model.b() * sigma_u));
    drift.view_mut((n, n), (m, m)).fill_with_identity();
    drift.view_mut((n, n), (m, m)).scale_mut(-1.0);

    let state_noise = model
        .d()
        .iter()
        .map(|d| {
            let mut big = DMatrix::zeros(dim, dim);
            big.view_mut((0, 0), (n, n)).copy_from(d);
            big
        })
        .collect();
    let input_noise = model
        .f()
        .iter()
        .map(|f| {
            let mut big = DMatrix::zeros(dim, dim);
            big.view_mut((0, 0), (n, n)).copy_from(&(-(f * km)));
            big.view_mut((0, n), (n, m)).copy_from(&(f * sigma_u));
            big
        })
        .collect();
    let mut additive = DMatrix::zeros(dim, p + m);
    additive.view_mut((0, 0), (n, p)).copy_from(model.c());
    additive.view_mut((n, p), (m, m)).fill_with_identity();
    Ok(Cascade {
        drift,
        state_noise,
        input_noise,
        additive,
    })
}

/// Runs the simulation, calling `visit(k, t_k, x_k, u_k, y_k)` at every grid
/// point `k = 0..=T` without storing the path.
pub fn simulate_with<F>(model: &SystemModel, k: &PolicyGain, cfg: &SimConfig, mut visit: F) -> Result<()>
where
    F: FnMut(usize, f64, &[f64], &[f64], &[f64]),
{
    let (n, m) = (model.n(), model.m());
    if k.matrix().shape() != (m, n) {
        return Err(Error::dims("K", (m, n), k.matrix().shape()));
    }
    let steps = cfg.validate(n, m)?;
    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let sigma = cfg.sigma_u;
    let km = k.matrix();
    let (q1, q2, p) = (model.q1(), model.q2(), model.p());

    let mut x = cfg.x0.as_ref().map_or_else(|| DVector::zeros(n), |v| DVector::from_column_slice(v));
    let mut y = cfg.y0.as_ref().map_or_else(|| DVector::zeros(m), |v| DVector::from_column_slice(v));
    let mut u = DVector::zeros(m);
    let mut x_next = DVector::zeros(n);
    let mut dw = vec![0.0; q1 + q2 + p + m];
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    for step in 0..=steps {
        let t = step as f64 * dt;
        u.gemv(-1.0, km, &x, 0.0);
        u.axpy(sigma, &y, 1.0);
        let norm = (x.norm_squared() + y.norm_squared()).sqrt();
        if !(norm <= cfg.blowup) {
            return Err(Error::Blowup { step, time: t, norm });
        }
        visit(step, t, x.as_slice(), u.as_slice(), y.as_slice());
        if step == steps {
            break;
        }
        for w in dw.iter_mut() {
            *w = sqdt * rng.sample::<f64, _>(StandardNormal);
        }
        x_next.copy_from(&x);
        x_next.gemv(dt, model.a(), &x, 1.0);
        x_next.gemv(dt, model.b(), &u, 1.0);
        for (j, d) in model.d().iter().enumerate() {
            x_next.gemv(dw[j], d, &x, 1.0);
        }
        for (j, f) in model.f().iter().enumerate() {
            x_next.gemv(dw[q1 + j], f, &u, 1.0);
        }
        let c = model.c();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..p {
                acc += c[(i, j)] * dw[q1 + q2 + j];
            }
            x_next[i] += acc;
        }
        for i in 0..m {
            y[i] += -y[i] * dt + dw[q1 + q2 + p + i];
        }
        std::mem::swap(&mut x, &mut x_next);
    }
    Ok(())
}

/// A uniformly sampled path stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n: usize,
    m: usize,
    dt: f64,
    times: Vec<f64>,
    states: Vec<f64>,
    inputs: Vec<f64>,
    exploration: Vec<f64>,
}

impl Trajectory {
    pub fn from_parts(
        n: usize,
        m: usize,
        dt: f64,
        states: Vec<f64>,
        inputs: Vec<f64>,
        exploration: Vec<f64>,
    ) -> Result<Self> {
        let len = states.len() / n.max(1);
        if states.len() != len * n || inputs.len() != len * m || exploration.len() != len * m {
            return Err(Error::InvalidArgument("trajectory arrays have inconsistent lengths".into()));
        }
        let times = (0..len).map(|k| k as f64 * dt).collect();
        Ok(Trajectory {
            n,
            m,
            dt,
            times,
            states,
            inputs,
            exploration,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of grid points `T + 1`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.m..(k + 1) * self.m]
    }

    pub fn exploration(&self, k: usize) -> &[f64] {
        &self.exploration[k * self.m..(k + 1) * self.m]
    }

    /// CSV with header `t,x1..xn,u1..um,y1..ym`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("x{i}")));
        header.extend((1..=self.m).map(|i| format!("u{i}")));
        header.extend((1..=self.m).map(|i| format!("y{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut line = format!("{:.16e}", self.times[k]);
            for v in self.state(k).iter().chain(self.input(k)).chain(self.exploration(k)) {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

pub fn simulate(model: &SystemModel, k: &PolicyGain, cfg: &SimConfig) -> Result<Trajectory> {
    let (n, m) = (model.n(), model.m());
    let steps = cfg.validate(n, m)?;
    let mut states = Vec::with_capacity((steps + 1) * n);
    let mut inputs = Vec::with_capacity((steps + 1) * m);
    let mut exploration = Vec::with_capacity((steps + 1) * m);
    simulate_with(model, k, cfg, |_, _, x, u, y| {
        states.extend_from_slice(x);
        inputs.extend_from_slice(u);
        exploration.extend_from_slice(y);
    })?;
    Trajectory::from_parts(n, m, cfg.dt, states, inputs, exploration)
}

/// Time average of `‖[x; y]‖₂ᵖ` after discarding the first `burn_in`
/// fraction of samples. Only `p ∈ {2, 4}` is accepted.
pub fn estimate_stationary_moment(traj: &Trajectory, p: u32, burn_in: f64) -> Result<f64> {
    if p != 2 && p != 4 {
        return Err(Error::InvalidArgument(format!("moment order must be 2 or 4, got {p}")));
    }
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::InvalidArgument(format!("burn-in fraction must be in [0, 1), got {burn_in}")));
    }
    let start = (burn_in * traj.len() as f64).floor() as usize;
    let count = traj.len() - start;
    if count == 0 {
        return Err(Error::TooFewSamples { samples: traj.len() });
    }
    let mut acc = 0.0;
    for k in start..traj.len() {
        let sq: f64 = traj.state(k).iter().chain(traj.exploration(k)).map(|v| v * v).sum();
        acc += if p == 2 { sq } else { sq * sq };
    }
    Ok(acc / count as f64)
}
