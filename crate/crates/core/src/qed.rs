//! Density-matrix model of the driven Λ-system in a single lossy cavity mode.
//!
//! Basis: `|u,0⟩` (F=3 ground, empty cavity), `|e,0⟩` (excited), `|g,1⟩`
//! (F=2 ground, one cavity photon), `|g,0⟩` (F=2 ground, photon gone). A
//! trigger pulse Ω(t) couples `|u,0⟩ ↔ |e,0⟩`, the cavity couples
//! `|e,0⟩ ↔ |g,1⟩`, and three jump channels carry population out: cavity
//! decay `|g,1⟩ → |g,0⟩` at 2κ, and spontaneous emission from `|e,0⟩` at 2γ
//! split between `|u,0⟩` and `|g,0⟩`.
//!
//! Frequencies are ordinary frequencies ω/2π in MHz; times are in ns.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DIM: usize = 4;
pub const UU: usize = 0;
pub const EE: usize = 1;
pub const G1: usize = 2;
pub const G0: usize = 3;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const MINUS_I: Complex64 = Complex64::new(0.0, -1.0);

/// Largest trace drift tolerated during integration.
pub const MAX_TRACE_DRIFT: f64 = 1e-6;

/// Tolerance on the target probability in [`fit_coupling_scale`].
pub const FIT_TOLERANCE: f64 = 1e-3;

// MHz (ω/2π) to rad/ns.
fn rad_per_ns(mhz: f64) -> f64 {
    2.0 * PI * mhz * 1e-3
}

#[derive(Debug, Error, PartialEq)]
pub enum QedError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("step {dt} ns does not divide horizon {total} ns")]
    BadStep { dt: f64, total: f64 },
    #[error("invalid density state: {0}")]
    InvalidState(String),
    #[error("integration failed at step {step}: trace drift {drift:e} (step too coarse?)")]
    IntegrationFailure { step: usize, drift: f64 },
    #[error("target probability {target} is outside (0, {max}]")]
    Unreachable { target: f64, max: f64 },
    #[error("coupling-scale bisection did not converge")]
    NoConvergence,
}

/// Atom–cavity parameters. All rates are ω/2π in MHz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QedParams {
    /// Peak atom–cavity coupling g on the |e,0⟩ ↔ |g,1⟩ transition.
    pub g_mhz: f64,
    /// Cavity field decay rate κ.
    pub kappa_mhz: f64,
    /// Atomic dipole decay rate γ.
    pub gamma_mhz: f64,
    /// Trigger detuning from the Stark-shifted |u⟩ → |e⟩ line.
    pub delta_trigger_mhz: f64,
    /// Cavity detuning from the Stark-shifted |g⟩ → |e⟩ line.
    pub delta_cavity_mhz: f64,
    /// Trap-induced light shift. Informational only: detunings above are
    /// already quoted relative to the shifted lines.
    pub stark_shift_mhz: f64,
    /// Fraction of spontaneous decay from |e⟩ returning to |u⟩.
    pub branch_u: f64,
    /// Effective reduction of g from averaging over Zeeman sublevels.
    pub coupling_scale: f64,
}

impl Default for QedParams {
    fn default() -> Self {
        QedParams {
            g_mhz: 5.0,
            kappa_mhz: 5.0,
            gamma_mhz: 3.0,
            delta_trigger_mhz: 0.0,
            delta_cavity_mhz: 0.0,
            stark_shift_mhz: 70.0,
            branch_u: 0.5,
            coupling_scale: 1.0,
        }
    }
}

impl QedParams {
    pub fn validate(&self) -> Result<(), QedError> {
        let bad = |m: &str| Err(QedError::InvalidParams(m.to_string()));
        // g = 0 is allowed: it switches the cavity coupling off entirely.
        if !(self.g_mhz >= 0.0 && self.kappa_mhz > 0.0 && self.gamma_mhz > 0.0) {
            return bad("kappa and gamma must be positive and g non-negative");
        }
        if !(0.0..=1.0).contains(&self.branch_u) {
            return bad("branch_u must lie in [0, 1]");
        }
        if !(self.coupling_scale > 0.0 && self.coupling_scale <= 1.0) {
            return bad("coupling_scale must lie in (0, 1]");
        }
        if !(self.delta_trigger_mhz.is_finite() && self.delta_cavity_mhz.is_finite()) {
            return bad("detunings must be finite");
        }
        Ok(())
    }

    pub fn with_coupling_scale(mut self, s: f64) -> Self {
        self.coupling_scale = s;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseProfile {
    /// Ω(t) = Ω_max · sin²(π t / duration)
    Sin2,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseShape {
    /// Peak Rabi frequency Ω_max/2π in MHz.
    pub omega_max_mhz: f64,
    pub duration_ns: f64,
    pub profile: PulseProfile,
}

impl Default for PulseShape {
    fn default() -> Self {
        PulseShape { omega_max_mhz: 10.0, duration_ns: 4_000.0, profile: PulseProfile::Sin2 }
    }
}

impl PulseShape {
    pub fn validate(&self) -> Result<(), QedError> {
        if !(self.omega_max_mhz >= 0.0 && self.duration_ns > 0.0) {
            return Err(QedError::InvalidParams("pulse needs omega_max >= 0 and a positive duration".into()));
        }
        Ok(())
    }

    /// Rabi frequency at time `t` in rad/ns; zero outside `[0, duration]`.
    pub fn rabi(&self, t: f64) -> f64 {
        if !(0.0..=self.duration_ns).contains(&t) {
            return 0.0;
        }
        let peak = rad_per_ns(self.omega_max_mhz);
        match self.profile {
            PulseProfile::Sin2 => peak * (PI * t / self.duration_ns).sin().powi(2),
            PulseProfile::Constant => peak,
        }
    }
}

pub type Matrix = [[Complex64; DIM]; DIM];

/// A 4×4 density matrix over `{|u,0⟩, |e,0⟩, |g,1⟩, |g,0⟩}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityState(pub Matrix);

impl DensityState {
    /// Pure basis state `|k⟩⟨k|`.
    pub fn basis(k: usize) -> Self {
        let mut m = [[ZERO; DIM]; DIM];
        m[k][k] = Complex64::new(1.0, 0.0);
        DensityState(m)
    }

    pub fn trace(&self) -> f64 {
        (0..DIM).map(|i| self.0[i][i].re).sum()
    }

    pub fn populations(&self) -> [f64; DIM] {
        std::array::from_fn(|i| self.0[i][i].re)
    }

    pub fn validate(&self) -> Result<(), QedError> {
        for i in 0..DIM {
            for j in 0..DIM {
                if (self.0[i][j] - self.0[j][i].conj()).norm() > 1e-10 {
                    return Err(QedError::InvalidState(format!("not Hermitian at ({i},{j})")));
                }
            }
            if self.0[i][i].re < -1e-12 {
                return Err(QedError::InvalidState(format!("negative population {i}")));
            }
        }
        if (self.trace() - 1.0).abs() > 1e-9 {
            return Err(QedError::InvalidState(format!("trace {}", self.trace())));
        }
        Ok(())
    }
}

/// A quantum jump `|to⟩⟨from|` at `rate` (1/ns).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jump {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

/// Time-dependent Lindblad generator for one trigger pulse.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: QedParams,
    pub pulse: PulseShape,
    coupling: f64,
    e_energy: f64,
    g1_energy: f64,
    jumps: [Jump; 3],
}

pub fn build_model(params: QedParams, pulse: PulseShape) -> Result<Model, QedError> {
    params.validate()?;
    pulse.validate()?;
    let kappa = rad_per_ns(params.kappa_mhz);
    let gamma = rad_per_ns(params.gamma_mhz);
    let d_trig = rad_per_ns(params.delta_trigger_mhz);
    let d_cav = rad_per_ns(params.delta_cavity_mhz);
    Ok(Model {
        params,
        pulse,
        coupling: params.coupling_scale * rad_per_ns(params.g_mhz),
        e_energy: -d_trig,
        g1_energy: -(d_trig - d_cav),
        jumps: [
            Jump { from: G1, to: G0, rate: 2.0 * kappa },
            Jump { from: EE, to: UU, rate: 2.0 * gamma * params.branch_u },
            Jump { from: EE, to: G0, rate: 2.0 * gamma * (1.0 - params.branch_u) },
        ],
    })
}

impl Model {
    /// Hamiltonian in the frame rotating with the trigger laser, rad/ns.
    pub fn hamiltonian(&self, t: f64) -> Matrix {
        let half_omega = Complex64::new(0.5 * self.pulse.rabi(t), 0.0);
        let g = Complex64::new(self.coupling, 0.0);
        let mut h = [[ZERO; DIM]; DIM];
        h[UU][EE] = half_omega;
        h[EE][UU] = half_omega;
        h[EE][G1] = g;
        h[G1][EE] = g;
        h[EE][EE] = Complex64::new(self.e_energy, 0.0);
        h[G1][G1] = Complex64::new(self.g1_energy, 0.0);
        h
    }

    pub fn jumps(&self) -> &[Jump; 3] {
        &self.jumps
    }

    /// Cavity-emission rate 2κ, 1/ns.
    pub fn cavity_rate(&self) -> f64 {
        self.jumps[0].rate
    }

    /// Rate of spontaneous emission ending in |g,0⟩, 1/ns.
    pub fn free_g0_rate(&self) -> f64 {
        self.jumps[2].rate
    }

    /// dρ/dt = −i[H, ρ] + Σ_k D[L_k]ρ
    pub fn rhs(&self, t: f64, rho: &Matrix) -> Matrix {
        let h = self.hamiltonian(t);
        let mut out = [[ZERO; DIM]; DIM];
        for i in 0..DIM {
            for j in 0..DIM {
                let mut acc = ZERO;
                for k in 0..DIM {
                    acc += h[i][k] * rho[k][j] - rho[i][k] * h[k][j];
                }
                out[i][j] = MINUS_I * acc;
            }
        }
        for jump in &self.jumps {
            let b = jump.from;
            let half = 0.5 * jump.rate;
            out[jump.to][jump.to] += rho[b][b] * jump.rate;
            for j in 0..DIM {
                out[b][j] -= rho[b][j] * half;
                out[j][b] -= rho[j][b] * half;
            }
        }
        out
    }
}

/// Integrated trajectory of one trigger pulse.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times_ns: Vec<f64>,
    pub populations: Vec<[f64; DIM]>,
    /// Cavity emission flux 2κ·ρ(g,1) per ns.
    pub flux: Vec<f64>,
    /// Spontaneous-emission flux into |g,0⟩ per ns.
    pub free_flux_g0: Vec<f64>,
    /// Cavity emission integrated alongside the state by the same stepper.
    pub cumulative_cavity: f64,
    /// Free-space emission into |g,0⟩, integrated alongside the state.
    pub cumulative_free_g0: f64,
    pub max_trace_drift: f64,
    pub final_state: DensityState,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t_ns,rho_uu,rho_ee,rho_g1,rho_g0,flux_per_ns")?;
        for ((t, p), f) in self.times_ns.iter().zip(&self.populations).zip(&self.flux) {
            writeln!(w, "{t},{:e},{:e},{:e},{:e},{:e}", p[0], p[1], p[2], p[3], f)?;
        }
        w.flush()
    }
}

// ρ plus the two emission accumulators.
#[derive(Clone, Copy)]
struct Augmented {
    rho: Matrix,
    cavity: f64,
    free_g0: f64,
}

impl Augmented {
    fn axpy(&self, h: f64, k: &Augmented) -> Augmented {
        let mut rho = self.rho;
        for (row, krow) in rho.iter_mut().zip(&k.rho) {
            for (x, kx) in row.iter_mut().zip(krow) {
                *x += kx * h;
            }
        }
        Augmented { rho, cavity: self.cavity + h * k.cavity, free_g0: self.free_g0 + h * k.free_g0 }
    }
}

fn derivative(model: &Model, t: f64, s: &Augmented) -> Augmented {
    Augmented {
        rho: model.rhs(t, &s.rho),
        cavity: model.cavity_rate() * s.rho[G1][G1].re,
        free_g0: model.free_g0_rate() * s.rho[EE][EE].re,
    }
}

/// Fixed-step classical Runge–Kutta integration from `rho0` over `[0, total_ns]`.
pub fn propagate(model: &Model, rho0: DensityState, dt_ns: f64, total_ns: f64) -> Result<Trajectory, QedError> {
    rho0.validate()?;
    if !(dt_ns > 0.0 && total_ns > 0.0) {
        return Err(QedError::BadStep { dt: dt_ns, total: total_ns });
    }
    let steps_f = total_ns / dt_ns;
    let steps = steps_f.round();
    if (steps_f - steps).abs() > 1e-9 * steps.max(1.0) {
        return Err(QedError::BadStep { dt: dt_ns, total: total_ns });
    }
    let steps = steps as usize;

    let mut traj = Trajectory {
        times_ns: Vec::with_capacity(steps + 1),
        populations: Vec::with_capacity(steps + 1),
        flux: Vec::with_capacity(steps + 1),
        free_flux_g0: Vec::with_capacity(steps + 1),
        cumulative_cavity: 0.0,
        cumulative_free_g0: 0.0,
        max_trace_drift: 0.0,
        final_state: rho0,
    };
    let mut s = Augmented { rho: rho0.0, cavity: 0.0, free_g0: 0.0 };
    let record = |traj: &mut Trajectory, t: f64, s: &Augmented| {
        let pops: [f64; DIM] = std::array::from_fn(|i| s.rho[i][i].re);
        traj.times_ns.push(t);
        traj.flux.push(model.cavity_rate() * pops[G1]);
        traj.free_flux_g0.push(model.free_g0_rate() * pops[EE]);
        traj.populations.push(pops);
    };
    record(&mut traj, 0.0, &s);
    for n in 0..steps {
        let t = n as f64 * dt_ns;
        let k1 = derivative(model, t, &s);
        let k2 = derivative(model, t + 0.5 * dt_ns, &s.axpy(0.5 * dt_ns, &k1));
        let k3 = derivative(model, t + 0.5 * dt_ns, &s.axpy(0.5 * dt_ns, &k2));
        let k4 = derivative(model, t + dt_ns, &s.axpy(dt_ns, &k3));
        s = s.axpy(dt_ns / 6.0, &k1).axpy(dt_ns / 3.0, &k2).axpy(dt_ns / 3.0, &k3).axpy(dt_ns / 6.0, &k4);
        let trace: f64 = (0..DIM).map(|i| s.rho[i][i].re).sum();
        let drift = (trace - 1.0).abs();
        if !drift.is_finite() || drift > MAX_TRACE_DRIFT {
            return Err(QedError::IntegrationFailure { step: n + 1, drift });
        }
        traj.max_trace_drift = traj.max_trace_drift.max(drift);
        record(&mut traj, (n + 1) as f64 * dt_ns, &s);
    }
    traj.cumulative_cavity = s.cavity;
    traj.cumulative_free_g0 = s.free_g0;
    traj.final_state = DensityState(s.rho);
    Ok(traj)
}

/// Probability that the pulse put a photon out of the cavity:
/// trapezoid-rule integral of the emission flux over the trajectory grid.
pub fn emission_probability(traj: &Trajectory) -> f64 {
    let p: f64 =
        traj.times_ns.windows(2).zip(traj.flux.windows(2)).map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1])).sum();
    p.clamp(0.0, 1.0)
}

/// Emission probability of one pulse started in `|u,0⟩`, integrated over the
/// pulse duration at step `dt_ns`.
pub fn pulse_emission_probability(params: QedParams, pulse: PulseShape, dt_ns: f64) -> Result<f64, QedError> {
    let model = build_model(params, pulse)?;
    let traj = propagate(&model, DensityState::basis(UU), dt_ns, pulse.duration_ns)?;
    Ok(emission_probability(&traj))
}

/// Bisects on `coupling_scale` until the pulse emission probability is
/// within [`FIT_TOLERANCE`] of `target`.
pub fn fit_coupling_scale(params: QedParams, pulse: PulseShape, target: f64, dt_ns: f64) -> Result<f64, QedError> {
    let at = |s: f64| pulse_emission_probability(params.with_coupling_scale(s), pulse, dt_ns);
    let p_max = at(1.0)?;
    if (p_max - target).abs() < FIT_TOLERANCE {
        return Ok(1.0);
    }
    if !(target > 0.0 && target < p_max) {
        return Err(QedError::Unreachable { target, max: p_max });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        let p = at(mid)?;
        if (p - target).abs() < FIT_TOLERANCE {
            return Ok(mid);
        }
        if p < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(QedError::NoConvergence)
}
