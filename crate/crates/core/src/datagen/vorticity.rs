//! Incompressible Navier-Stokes in vorticity form on the unit torus,
//! `w_t + u . grad w = nu lap w + f`, with `u` recovered from the
//! streamfunction `-lap psi = w`, `u = (psi_y, -psi_x)`.
//!
//! Same scheme as the Burgers solver: dealiased pseudo-spectral advection and
//! integrating-factor RK4 for the viscous term.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{trajectory_rng, Trajectories};
use crate::error::{Error, Result};
use crate::fft::{wavenumber, Fft2};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Vorticity2DConfig {
    /// Points per axis.
    pub n_space: usize,
    pub n_time: usize,
    pub dt_save: f64,
    pub inner_steps: usize,
    pub viscosity: f64,
    /// Amplitude `a` of `f = a (sin(2 pi (x + y)) + cos(2 pi (x + y)))`.
    pub forcing_amplitude: f64,
    /// Initial-condition spectrum `sigma (4 pi^2 |k|^2 + tau^2)^(-alpha/2)`.
    pub ic_alpha: f64,
    pub ic_tau: f64,
    pub ic_sigma: f64,
    pub seed: u64,
}

impl Default for Vorticity2DConfig {
    fn default() -> Self {
        Self {
            n_space: 64,
            n_time: 40,
            dt_save: 1.0,
            inner_steps: 50,
            viscosity: 1e-3,
            forcing_amplitude: 0.1,
            ic_alpha: 2.5,
            ic_tau: 7.0,
            ic_sigma: math::powf(7.0, 1.5),
            seed: 0,
        }
    }
}

impl Vorticity2DConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ns2d: {m}")));
        if !self.n_space.is_power_of_two() || self.n_space < 4 {
            return bad("n_space must be a power of two and at least 4");
        }
        if !(self.viscosity > 0.0) {
            return bad("viscosity must be positive");
        }
        if !(self.dt_save > 0.0) || self.inner_steps == 0 || self.n_time == 0 {
            return bad("dt_save, inner_steps and n_time must be positive");
        }
        Ok(())
    }

    /// Row-major grid coordinates `(x, y)` with `x` varying along rows.
    pub fn unit_coords(&self) -> Vec<f64> {
        let n = self.n_space;
        let mut c = Vec::with_capacity(2 * n * n);
        for i in 0..n {
            for j in 0..n {
                c.push(i as f64 / n as f64);
                c.push(j as f64 / n as f64);
            }
        }
        c
    }
}

struct Spectral2 {
    n: usize,
    fft: Fft2,
    /// `2 pi k_x`, `2 pi k_y` per bin, row index is `x`.
    kx: Vec<f64>,
    ky: Vec<f64>,
    lap: Vec<f64>,
    dealias: Vec<bool>,
    forcing_hat: Vec<Complex64>,
    scratch: [Vec<Complex64>; 4],
}

impl Spectral2 {
    fn new(config: &Vorticity2DConfig) -> Self {
        let n = config.n_space;
        let cutoff = (n / 3) as u64;
        let mut kx = Vec::with_capacity(n * n);
        let mut ky = Vec::with_capacity(n * n);
        let mut dealias = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (wavenumber(i, n), wavenumber(j, n));
                kx.push(2.0 * math::PI * a as f64);
                ky.push(2.0 * math::PI * b as f64);
                dealias.push(a.unsigned_abs() <= cutoff && b.unsigned_abs() <= cutoff);
            }
        }
        let lap = kx.iter().zip(&ky).map(|(a, b)| -(a * a + b * b)).collect();
        let mut fft = Fft2::new(n);
        let mut forcing_hat: Vec<Complex64> = (0..n * n)
            .map(|p| {
                let (x, y) = ((p / n) as f64 / n as f64, (p % n) as f64 / n as f64);
                let s = 2.0 * math::PI * (x + y);
                Complex64::new(config.forcing_amplitude * (math::sin(s) + math::cos(s)), 0.0)
            })
            .collect();
        fft.forward(&mut forcing_hat);
        let zero = Complex64::new(0.0, 0.0);
        Self {
            n,
            fft,
            kx,
            ky,
            lap,
            dealias,
            forcing_hat,
            scratch: [vec![zero; n * n], vec![zero; n * n], vec![zero; n * n], vec![zero; n * n]],
        }
    }

    /// `-u . grad w + f` in spectral space.
    fn rhs(&mut self, w_hat: &[Complex64], out: &mut [Complex64]) {
        let nn = self.n * self.n;
        let i = Complex64::new(0.0, 1.0);
        let [ux, uy, wx, wy] = &mut self.scratch;
        for p in 0..nn {
            let psi = if self.lap[p] == 0.0 { Complex64::new(0.0, 0.0) } else { -w_hat[p] / self.lap[p] };
            ux[p] = i * self.ky[p] * psi;
            uy[p] = -i * self.kx[p] * psi;
            wx[p] = i * self.kx[p] * w_hat[p];
            wy[p] = i * self.ky[p] * w_hat[p];
        }
        self.fft.inverse(ux);
        self.fft.inverse(uy);
        self.fft.inverse(wx);
        self.fft.inverse(wy);
        for p in 0..nn {
            ux[p] = Complex64::new(ux[p].re * wx[p].re + uy[p].re * wy[p].re, 0.0);
        }
        self.fft.forward(ux);
        for p in 0..nn {
            out[p] = self.forcing_hat[p] - if self.dealias[p] { ux[p] } else { Complex64::new(0.0, 0.0) };
        }
    }
}

/// Integrates from an initial vorticity on the `n x n` grid. Returns
/// `n_time x n^2` frames, the first being the initial state.
pub fn integrate_vorticity(config: &Vorticity2DConfig, initial: &[f64]) -> Result<Vec<f64>> {
    config.validate()?;
    let n = config.n_space;
    let nn = n * n;
    assert_eq!(initial.len(), nn);
    let mut sp = Spectral2::new(config);
    let dt = config.dt_save / config.inner_steps as f64;
    let e_half: Vec<f64> = sp.lap.iter().map(|l| math::exp(config.viscosity * l * dt / 2.0)).collect();
    let e_full: Vec<f64> = e_half.iter().map(|e| e * e).collect();

    let mut w_hat: Vec<Complex64> = initial.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    sp.fft.forward(&mut w_hat);
    let zero = Complex64::new(0.0, 0.0);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![zero; nn], vec![zero; nn], vec![zero; nn], vec![zero; nn]);
    let mut stage = vec![zero; nn];
    let mut phys = vec![zero; nn];

    let mut frames = Vec::with_capacity(config.n_time * nn);
    frames.extend_from_slice(initial);
    let mut t = 0.0;
    for _ in 1..config.n_time {
        for _ in 0..config.inner_steps {
            sp.rhs(&w_hat, &mut k1);
            for p in 0..nn {
                stage[p] = e_half[p] * (w_hat[p] + 0.5 * dt * k1[p]);
            }
            sp.rhs(&stage, &mut k2);
            for p in 0..nn {
                stage[p] = e_half[p] * w_hat[p] + 0.5 * dt * k2[p];
            }
            sp.rhs(&stage, &mut k3);
            for p in 0..nn {
                stage[p] = e_full[p] * w_hat[p] + dt * e_half[p] * k3[p];
            }
            sp.rhs(&stage, &mut k4);
            for p in 0..nn {
                w_hat[p] = e_full[p] * w_hat[p]
                    + dt / 6.0 * (e_full[p] * k1[p] + 2.0 * e_half[p] * (k2[p] + k3[p]) + k4[p]);
            }
            t += dt;
        }
        phys.copy_from_slice(&w_hat);
        sp.fft.inverse(&mut phys);
        if phys.iter().any(|c| !c.re.is_finite()) {
            return Err(Error::SolverDiverged { trajectory: 0, time: t });
        }
        frames.extend(phys.iter().map(|c| c.re));
    }
    Ok(frames)
}

/// Gaussian random field with spectrum `sigma (4 pi^2 |k|^2 + tau^2)^(-alpha/2)`
/// and zero mean.
pub fn gaussian_random_field<R: Rng + ?Sized>(config: &Vorticity2DConfig, rng: &mut R) -> Vec<f64> {
    let n = config.n_space;
    let mut coeffs: Vec<Complex64> = (0..n * n)
        .map(|p| {
            let (a, b) = (wavenumber(p / n, n) as f64, wavenumber(p % n, n) as f64);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            if a == 0.0 && b == 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            let k2 = 4.0 * math::PI * math::PI * (a * a + b * b);
            let amp = math::sqrt(2.0) * config.ic_sigma * math::powf(k2 + config.ic_tau * config.ic_tau, -config.ic_alpha / 2.0);
            Complex64::new(re, im) * amp * (n * n) as f64
        })
        .collect();
    Fft2::new(n).inverse(&mut coeffs);
    coeffs.iter().map(|c| c.re).collect()
}

pub fn solve_vorticity2d_trajectory(config: &Vorticity2DConfig, index: u64) -> Result<Vec<f64>> {
    config.validate()?;
    let mut rng: ChaCha8Rng = trajectory_rng(config.seed, index);
    let initial = gaussian_random_field(config, &mut rng);
    integrate_vorticity(config, &initial).map_err(|e| match e {
        Error::SolverDiverged { time, .. } => Error::SolverDiverged {
            trajectory: index as usize,
            time,
        },
        other => other,
    })
}

pub fn solve_vorticity2d(config: &Vorticity2DConfig, n_trajectories: usize) -> Result<Trajectories> {
    config.validate()?;
    let nn = config.n_space * config.n_space;
    let mut u = Vec::with_capacity(n_trajectories * config.n_time * nn);
    for i in 0..n_trajectories {
        u.extend(solve_vorticity2d_trajectory(config, i as u64)?);
    }
    Ok(Trajectories {
        n_traj: n_trajectories,
        n_time: config.n_time,
        n_points: nn,
        spatial_dim: 2,
        channels: 1,
        u,
        coords: config.unit_coords(),
        times: (0..config.n_time).map(|i| i as f64 * config.dt_save).collect(),
    })
}
