//! Spin Hamiltonians (drift, control coupling, Heisenberg coupling), time
//! grids, and control fields in time-sample or Fourier parametrization.
//!
//! Conventions: H(t) = Σ_i (ω_i/2)σ_z^(i) + Σ_i ε_i(t)σ_x^(i)
//! + J σ⃗^(1)·σ⃗^(2), with ħ = 1 and everything dimensionless.

use num_complex::Complex64 as C64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{pauli, CMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub total_time: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(total_time: f64, n_steps: usize) -> Self {
        TimeGrid {
            total_time,
            dt: total_time / n_steps as f64,
            n_steps,
        }
    }

    /// Two-level default: T = 1, dt = 0.01.
    pub fn two_level_default() -> Self {
        Self::new(1.0, 100)
    }

    /// Four-level default: T = 6, dt = 0.06.
    pub fn four_level_default() -> Self {
        Self::new(6.0, 100)
    }

    /// Right endpoint of step m (1-based): t_m = m·dt. Sample index m-1.
    pub fn sample_time(&self, index: usize) -> f64 {
        (index + 1) as f64 * self.dt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    pub n_spins: usize,
    pub omegas: Vec<f64>,
    pub coupling: f64,
}

impl SpinSystem {
    pub fn single(omega: f64) -> Self {
        SpinSystem {
            n_spins: 1,
            omegas: vec![omega],
            coupling: 0.0,
        }
    }

    /// Paper defaults: ω₁ = 20 (and ω₂ = 24, J = 0.2 for two spins).
    pub fn default_two_level() -> Self {
        Self::single(20.0)
    }

    pub fn default_four_level() -> Self {
        SpinSystem {
            n_spins: 2,
            omegas: vec![20.0, 24.0],
            coupling: 0.2,
        }
    }

    pub fn dim(&self) -> usize {
        1 << self.n_spins
    }

    /// Max Fourier mode index: ω_k = kπ capped at 10π (1 spin) / 20π (2 spins).
    pub fn max_fourier_modes(&self) -> usize {
        if self.n_spins == 1 {
            10
        } else {
            20
        }
    }
}

/// Place a single-spin operator on spin `index`, identity elsewhere.
fn embed(op: &CMatrix, index: usize, n_spins: usize) -> CMatrix {
    let mut out = if index == 0 {
        op.clone()
    } else {
        CMatrix::identity(2)
    };
    for i in 1..n_spins {
        let factor = if i == index {
            op.clone()
        } else {
            CMatrix::identity(2)
        };
        out = out.kron(&factor);
    }
    out
}

pub fn build_drift(sys: &SpinSystem) -> CMatrix {
    let mut h = CMatrix::zeros(sys.dim());
    for (i, &omega) in sys.omegas.iter().enumerate() {
        h = h.add(&embed(&pauli::sigma_z(), i, sys.n_spins).scale(C64::new(omega / 2.0, 0.0)));
    }
    if sys.n_spins == 2 && sys.coupling != 0.0 {
        for op in [pauli::sigma_x(), pauli::sigma_y(), pauli::sigma_z()] {
            h = h.add(&op.kron(&op).scale(C64::new(sys.coupling, 0.0)));
        }
    }
    h
}

pub fn control_operator(sys: &SpinSystem, spin_index: usize) -> Result<CMatrix> {
    if spin_index >= sys.n_spins {
        return Err(Error::IndexOutOfRange(format!(
            "spin {spin_index} of {}",
            sys.n_spins
        )));
    }
    Ok(embed(&pauli::sigma_x(), spin_index, sys.n_spins))
}

/// Which Hamiltonian parameter carries the stochastic disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseChannel {
    /// Control-field noise: δε(t) through σ_x^(i).
    Field,
    /// Transition-energy noise: δω(t) through σ_z^(i)/2.
    Detuning,
}

pub fn noise_operator(sys: &SpinSystem, spin_index: usize, channel: NoiseChannel) -> Result<CMatrix> {
    if spin_index >= sys.n_spins {
        return Err(Error::IndexOutOfRange(format!(
            "spin {spin_index} of {}",
            sys.n_spins
        )));
    }
    let op = match channel {
        NoiseChannel::Field => pauli::sigma_x(),
        NoiseChannel::Detuning => pauli::sigma_z().scale(C64::new(0.5, 0.0)),
    };
    Ok(embed(&op, spin_index, sys.n_spins))
}

/// Fourier parameters for one spin's field: ε(t) = Σ_k a_k sin(kπ t + φ_k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    pub amps: Vec<f64>,
    pub phases: Vec<f64>,
}

impl FourierSpec {
    pub fn eval(&self, t: f64) -> f64 {
        self.amps
            .iter()
            .zip(&self.phases)
            .enumerate()
            .map(|(k, (&a, &phi))| a * ((k + 1) as f64 * std::f64::consts::PI * t + phi).sin())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Parametrization {
    /// One sample per step per spin, at the right endpoints t_m = m·dt.
    TimeSamples(Vec<Vec<f64>>),
    Fourier(Vec<FourierSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlField {
    pub grid: TimeGrid,
    pub parametrization: Parametrization,
}

impl ControlField {
    pub fn zero(grid: TimeGrid, n_spins: usize) -> Self {
        ControlField {
            grid,
            parametrization: Parametrization::TimeSamples(vec![vec![0.0; grid.n_steps]; n_spins]),
        }
    }

    pub fn from_samples(grid: TimeGrid, samples: Vec<Vec<f64>>) -> Self {
        ControlField {
            grid,
            parametrization: Parametrization::TimeSamples(samples),
        }
    }

    pub fn n_spins(&self) -> usize {
        match &self.parametrization {
            Parametrization::TimeSamples(s) => s.len(),
            Parametrization::Fourier(f) => f.len(),
        }
    }

    /// Convert to the TimeSamples form on the field's grid.
    pub fn to_samples(&self) -> ControlField {
        match &self.parametrization {
            Parametrization::TimeSamples(_) => self.clone(),
            Parametrization::Fourier(specs) => {
                let samples = specs
                    .iter()
                    .map(|spec| {
                        (0..self.grid.n_steps)
                            .map(|m| spec.eval(self.grid.sample_time(m)))
                            .collect()
                    })
                    .collect();
                ControlField::from_samples(self.grid, samples)
            }
        }
    }

    pub fn samples(&self) -> Vec<Vec<f64>> {
        match self.to_samples().parametrization {
            Parametrization::TimeSamples(s) => s,
            Parametrization::Fourier(_) => unreachable!(),
        }
    }
}

/// Draw a random Fourier field: amplitudes uniform in `amp_range`, phases
/// uniform in [0, 2π). Deterministic for a fixed seed.
pub fn sample_random_field(
    amp_range: (f64, f64),
    grid: TimeGrid,
    n_spins: usize,
    n_modes: usize,
    seed: u64,
) -> Result<ControlField> {
    if amp_range.1 < amp_range.0 {
        return Err(Error::EmptyInterval);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = (0..n_spins)
        .map(|_| {
            let amps = (0..n_modes)
                .map(|_| {
                    if amp_range.0 == amp_range.1 {
                        amp_range.0
                    } else {
                        rng.gen_range(amp_range.0..amp_range.1)
                    }
                })
                .collect();
            let phases = (0..n_modes)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            FourierSpec { amps, phases }
        })
        .collect();
    Ok(ControlField {
        grid,
        parametrization: Parametrization::Fourier(specs),
    })
}

/// Initial-amplitude regimes used for random starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluenceRegime {
    /// a_k ∈ [0, 0.05]
    Low,
    /// a_k ∈ [0, 50]
    High,
    /// Each run draws low or high with equal probability.
    Mixed,
}

impl FluenceRegime {
    pub fn amp_range(self) -> (f64, f64) {
        match self {
            FluenceRegime::Low => (0.0, 0.05),
            FluenceRegime::High | FluenceRegime::Mixed => (0.0, 50.0),
        }
    }

    /// Collapse `Mixed` to a concrete regime using one bit of `key`
    /// (deterministic per run); `Low` and `High` pass through.
    pub fn resolve(self, key: u64) -> FluenceRegime {
        match self {
            FluenceRegime::Mixed => {
                if key.count_ones() & 1 == 0 {
                    FluenceRegime::Low
                } else {
                    FluenceRegime::High
                }
            }
            r => r,
        }
    }
}
