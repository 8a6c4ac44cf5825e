//! Forced viscous Burgers on a periodic interval,
//! `u_t + u u_x = nu u_xx + f(x, t)`.
//!
//! Pseudo-spectral in space with 2/3 dealiasing of the quadratic term and a
//! fourth-order integrating-factor Runge-Kutta step in time. Frames are
//! sampled at `n_space` equispaced points by evaluating the Fourier series of
//! the solver state, so the output grid need not be a power of two.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{trajectory_rng, Trajectories};
use crate::error::{Error, Result};
use crate::fft::{wavenumber, Fft};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BurgersConfig {
    pub domain_length: f64,
    /// Saved points per frame.
    pub n_space: usize,
    /// Points of the internal spectral grid (power of two, at least `n_space`).
    pub solver_resolution: usize,
    pub n_time: usize,
    pub dt_save: f64,
    pub inner_steps: usize,
    pub viscosity: f64,
    pub forcing_terms: usize,
    pub amplitude_range: (f64, f64),
    pub frequency_range: (f64, f64),
    pub phase_range: (f64, f64),
    pub wavenumber_set: Vec<u32>,
    pub seed: u64,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            domain_length: 16.0,
            n_space: 100,
            solver_resolution: 256,
            n_time: 250,
            dt_save: 4.0 / 249.0,
            inner_steps: 8,
            viscosity: 0.1,
            forcing_terms: 5,
            amplitude_range: (-0.5, 0.5),
            frequency_range: (-0.4, 0.4),
            phase_range: (0.0, 2.0 * math::PI),
            wavenumber_set: vec![1, 2, 3],
            seed: 0,
        }
    }
}

impl BurgersConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("burgers: {m}")));
        if !(self.domain_length > 0.0) {
            return bad("domain_length must be positive");
        }
        if self.n_space < 16 {
            return bad("n_space must be at least 16");
        }
        if !self.solver_resolution.is_power_of_two() || self.solver_resolution < self.n_space {
            return bad("solver_resolution must be a power of two no smaller than n_space");
        }
        if !(self.viscosity > 0.0) {
            return bad("viscosity must be positive");
        }
        if !(self.dt_save > 0.0) || self.inner_steps == 0 {
            return bad("dt_save and inner_steps must be positive");
        }
        if self.n_time == 0 {
            return bad("n_time must be positive");
        }
        if self.forcing_terms > 0 && self.wavenumber_set.is_empty() {
            return bad("wavenumber_set is empty");
        }
        Ok(())
    }

    /// Saved coordinates rescaled to `[0, 1)`.
    pub fn unit_coords(&self) -> Vec<f64> {
        (0..self.n_space).map(|i| i as f64 / self.n_space as f64).collect()
    }
}

/// `A sin(omega t + 2 pi l x / L + phi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineTerm {
    pub amplitude: f64,
    pub omega: f64,
    pub wavenumber: u32,
    pub phase: f64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_terms<R: Rng + ?Sized>(config: &BurgersConfig, rng: &mut R) -> Vec<SineTerm> {
    (0..config.forcing_terms)
        .map(|_| SineTerm {
            amplitude: uniform(rng, config.amplitude_range),
            omega: uniform(rng, config.frequency_range),
            wavenumber: config.wavenumber_set[rng.random_range(0..config.wavenumber_set.len())],
            phase: uniform(rng, config.phase_range),
        })
        .collect()
}

/// Evaluates `sum_j A_j sin(omega_j t + 2 pi l_j x / L + phi_j)` at `x`.
pub fn eval_terms(terms: &[SineTerm], length: f64, x: f64, t: f64) -> f64 {
    terms
        .iter()
        .map(|s| s.amplitude * math::sin(s.omega * t + 2.0 * math::PI * s.wavenumber as f64 * x / length + s.phase))
        .sum()
}

struct Spectral {
    n: usize,
    fft: Fft,
    /// Physical wavenumbers `2 pi j / L`.
    k: Vec<f64>,
    dealias: Vec<bool>,
}

impl Spectral {
    fn new(n: usize, length: f64) -> Self {
        let cutoff = n / 3;
        Self {
            n,
            fft: Fft::new(n),
            k: (0..n).map(|j| 2.0 * math::PI * wavenumber(j, n) as f64 / length).collect(),
            dealias: (0..n).map(|j| wavenumber(j, n).unsigned_abs() as usize <= cutoff).collect(),
        }
    }

    /// Right-hand side without the viscous term: `-(u^2/2)_x + f`. The
    /// forcing is added directly in spectral space, one bin pair per term.
    fn nonlinear(&self, u_hat: &[Complex64], forcing: &[SineTerm], t: f64, out: &mut [Complex64], buf: &mut [Complex64]) {
        buf.copy_from_slice(u_hat);
        self.fft.inverse(buf);
        for b in buf.iter_mut() {
            let u = b.re;
            *b = Complex64::new(0.5 * u * u, 0.0);
        }
        self.fft.forward(buf);
        for j in 0..self.n {
            out[j] = if self.dealias[j] {
                -Complex64::new(0.0, self.k[j]) * buf[j]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        let n = self.n as f64;
        for s in forcing {
            let l = s.wavenumber as usize % self.n;
            if l == 0 {
                continue;
            }
            // A sin(theta + k x) = A/(2i) (e^{i theta} e^{ikx} - e^{-i theta} e^{-ikx})
            let theta = s.omega * t + s.phase;
            let c = Complex64::new(0.0, -0.5 * s.amplitude * n) * Complex64::new(math::cos(theta), math::sin(theta));
            out[l] += c;
            out[self.n - l] += c.conj();
        }
    }
}

/// Integrates one trajectory from `initial` (values on the solver grid).
/// Returns `n_time x n_space` saved frames, the first being the initial state.
pub fn integrate_burgers(config: &BurgersConfig, initial: &[f64], forcing: &[SineTerm]) -> Result<Vec<f64>> {
    config.validate()?;
    let n = config.solver_resolution;
    assert_eq!(initial.len(), n, "initial state must live on the solver grid");
    let sp = Spectral::new(n, config.domain_length);
    let dt = config.dt_save / config.inner_steps as f64;
    let e_half: Vec<f64> = sp.k.iter().map(|k| math::exp(-config.viscosity * k * k * dt / 2.0)).collect();
    let e_full: Vec<f64> = e_half.iter().map(|e| e * e).collect();

    let mut u_hat: Vec<Complex64> = initial.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    sp.fft.forward(&mut u_hat);
    let zero = Complex64::new(0.0, 0.0);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n]);
    let mut stage = vec![zero; n];
    let mut buf = vec![zero; n];

    let sampler = FourierSampler::new(n, config.n_space);
    let mut frames = Vec::with_capacity(config.n_time * config.n_space);
    sampler.sample(&u_hat, &mut frames);
    let mut t = 0.0;
    for _ in 1..config.n_time {
        for _ in 0..config.inner_steps {
            sp.nonlinear(&u_hat, forcing, t, &mut k1, &mut buf);
            for j in 0..n {
                stage[j] = e_half[j] * (u_hat[j] + 0.5 * dt * k1[j]);
            }
            sp.nonlinear(&stage, forcing, t + dt / 2.0, &mut k2, &mut buf);
            for j in 0..n {
                stage[j] = e_half[j] * u_hat[j] + 0.5 * dt * k2[j];
            }
            sp.nonlinear(&stage, forcing, t + dt / 2.0, &mut k3, &mut buf);
            for j in 0..n {
                stage[j] = e_full[j] * u_hat[j] + dt * e_half[j] * k3[j];
            }
            sp.nonlinear(&stage, forcing, t + dt, &mut k4, &mut buf);
            for j in 0..n {
                u_hat[j] = e_full[j] * u_hat[j]
                    + dt / 6.0 * (e_full[j] * k1[j] + 2.0 * e_half[j] * (k2[j] + k3[j]) + k4[j]);
            }
            t += dt;
        }
        if u_hat.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::SolverDiverged { trajectory: 0, time: t });
        }
        sampler.sample(&u_hat, &mut frames);
    }
    Ok(frames)
}

/// Evaluates a real Fourier series given by FFT coefficients at `m`
/// equispaced points. The Nyquist bin is dropped.
struct FourierSampler {
    n: usize,
    basis: Vec<Complex64>,
    m: usize,
}

impl FourierSampler {
    fn new(n: usize, m: usize) -> Self {
        let mut basis = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let a = 2.0 * math::PI * wavenumber(j, n) as f64 * i as f64 / m as f64;
                basis.push(Complex64::new(math::cos(a), math::sin(a)));
            }
        }
        Self { n, basis, m }
    }

    fn sample(&self, coeffs: &[Complex64], out: &mut Vec<f64>) {
        let nyquist = self.n / 2;
        for i in 0..self.m {
            let row = &self.basis[i * self.n..(i + 1) * self.n];
            let mut s = 0.0;
            for (j, (c, b)) in coeffs.iter().zip(row).enumerate() {
                if j != nyquist || self.n == 1 {
                    s += (c * b).re;
                }
            }
            out.push(s / self.n as f64);
        }
    }
}

/// Draws the terms of trajectory `index` and integrates it. The initial
/// state is the forcing field at `t = 0`.
pub fn solve_burgers_trajectory(config: &BurgersConfig, index: u64) -> Result<Vec<f64>> {
    config.validate()?;
    let mut rng: ChaCha8Rng = trajectory_rng(config.seed, index);
    let terms = sample_terms(config, &mut rng);
    let n = config.solver_resolution;
    let initial: Vec<f64> = (0..n)
        .map(|i| eval_terms(&terms, config.domain_length, config.domain_length * i as f64 / n as f64, 0.0))
        .collect();
    integrate_burgers(config, &initial, &terms).map_err(|e| match e {
        Error::SolverDiverged { time, .. } => Error::SolverDiverged {
            trajectory: index as usize,
            time,
        },
        other => other,
    })
}

pub fn solve_burgers(config: &BurgersConfig, n_trajectories: usize) -> Result<Trajectories> {
    config.validate()?;
    let mut u = Vec::with_capacity(n_trajectories * config.n_time * config.n_space);
    for i in 0..n_trajectories {
        u.extend(solve_burgers_trajectory(config, i as u64)?);
    }
    Ok(Trajectories {
        n_traj: n_trajectories,
        n_time: config.n_time,
        n_points: config.n_space,
        spatial_dim: 1,
        channels: 1,
        u,
        coords: config.unit_coords(),
        times: (0..config.n_time).map(|i| i as f64 * config.dt_save).collect(),
    })
}
