//! Secondary objectives: the Hessian-kernel noise robustness K_β and the
//! field fluence, plus a Gaussian-process Monte-Carlo estimator that serves
//! as an end-to-end oracle for K_β.

use num_complex::Complex64 as C64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evaluate, propagate, Objective, ObjectiveKind, PropagatorHistory};
use crate::linalg::{
    eig_hermitian, expm_frechet2_from_eig, expm_frechet_from_eig, expm_unitary_from_eig, CMatrix,
};
use crate::par;
use crate::spin::{noise_operator, ControlField, NoiseChannel, SpinSystem, TimeGrid};
use crate::{Error, Result};

/// Stationary noise correlation kernel R(t, t').
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum CorrelationKernel {
    /// R(t,t') = A² exp(-|t-t'|/α).
    ExpDecay { a2: f64, alpha: f64 },
    /// Diagonal A² at coincident sample times, zero elsewhere.
    White { a2: f64 },
    /// Explicit n×n table at the grid's sample times, row-major.
    Custom { table: Vec<f64>, n: usize },
}

impl CorrelationKernel {
    /// Paper default: A² = 1e-4, α = 1.
    pub fn default_exp() -> Self {
        CorrelationKernel::ExpDecay { a2: 1e-4, alpha: 1.0 }
    }

    /// Re-engineered correlation time: A² = 1e-4, α = 2.
    pub fn reengineered_exp() -> Self {
        CorrelationKernel::ExpDecay { a2: 1e-4, alpha: 2.0 }
    }

    /// R evaluated at all sample-time pairs of `grid`, row-major n×n.
    pub fn matrix(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let n = grid.n_steps;
        match self {
            CorrelationKernel::ExpDecay { a2, alpha } => Ok((0..n * n)
                .map(|idx| {
                    let (j, k) = (idx / n, idx % n);
                    let tau = (grid.sample_time(j) - grid.sample_time(k)).abs();
                    a2 * (-tau / alpha).exp()
                })
                .collect()),
            CorrelationKernel::White { a2 } => Ok((0..n * n)
                .map(|idx| if idx / n == idx % n { *a2 } else { 0.0 })
                .collect()),
            CorrelationKernel::Custom { table, n: tn } => {
                if *tn != n || table.len() != n * n {
                    return Err(Error::GridMismatch(format!(
                        "custom kernel is {tn}x{tn}, grid has {n} steps"
                    )));
                }
                Ok(table.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub channel: NoiseChannel,
    pub kernel: CorrelationKernel,
}

/// Per-sample mixed partials ∂²J/∂β_j∂β_k for one (spin, channel). The
/// continuum kernel is this matrix divided by dt², so the dt² quadrature
/// weights in K_β cancel exactly.
#[derive(Debug, Clone)]
pub struct HessianKernel {
    pub grid: TimeGrid,
    /// Row-major n×n, symmetric.
    pub matrix: Vec<f64>,
}

impl HessianKernel {
    pub fn entry(&self, j: usize, k: usize) -> f64 {
        self.matrix[j * self.grid.n_steps + k]
    }
}

/// Second partials of J with respect to per-step noise amplitudes on one
/// spin's channel operator, evaluated at zero noise.
pub fn hessian(
    obj: &Objective,
    sys: &SpinSystem,
    field: &ControlField,
    channel: NoiseChannel,
    spin_index: usize,
) -> Result<HessianKernel> {
    let hist = propagate(sys, field)?;
    hessian_from_history(obj, sys, &hist, channel, spin_index)
}

pub fn hessian_from_history(
    obj: &Objective,
    sys: &SpinSystem,
    hist: &PropagatorHistory,
    channel: NoiseChannel,
    spin_index: usize,
) -> Result<HessianKernel> {
    let b = noise_operator(sys, spin_index, channel)?;
    let n = hist.grid.n_steps;
    let dt = hist.grid.dt;
    let dim = b.dim();
    let u_final = hist.final_unitary();

    // Per-step pieces: L_m = F1_m · U(t_m, 0), RB_m = U(T, t_{m+1}) · F1_m,
    // first derivatives U_m = RB_m-style product, and the F2 diagonal terms.
    let mut l = Vec::with_capacity(n);
    let mut rb = Vec::with_capacity(n);
    let mut first = Vec::with_capacity(n);
    let mut diag_second = Vec::with_capacity(n);
    for m in 0..n {
        let f1 = expm_frechet_from_eig(&hist.eigs[m], &b, dt);
        let f2 = expm_frechet2_from_eig(&hist.eigs[m], &b, dt);
        let bwd = u_final.matmul(&hist.cumulative[m + 1].adjoint());
        let lm = f1.matmul(&hist.cumulative[m]);
        first.push(bwd.matmul(&lm));
        diag_second.push(bwd.matmul(&f2.matmul(&hist.cumulative[m])));
        l.push(lm);
        rb.push(bwd.matmul(&f1));
    }

    // Objective-specific contraction of dU and d²U terms.
    enum Contraction {
        State {
            z: C64,
            z_first: Vec<C64>,
            initial: Vec<C64>,
            target: Vec<C64>,
        },
        Obs {
            x: CMatrix,          // ρ U† O
            y: Vec<CMatrix>,     // ρ U_k† O per k
            firsts: Vec<CMatrix>,
            slope: f64,
        },
        Gate {
            w_adj: CMatrix,
            norm: f64,
        },
    }

    let contraction = match &obj.kind {
        ObjectiveKind::StateTransfer { initial, target } => {
            let amp = |u: &CMatrix| -> C64 {
                let ui = u.matvec(initial);
                target.iter().zip(&ui).map(|(f, x)| f.conj() * x).sum()
            };
            Contraction::State {
                z: amp(u_final),
                z_first: first.iter().map(amp).collect(),
                initial: initial.clone(),
                target: target.clone(),
            }
        }
        ObjectiveKind::Observable {
            operator,
            initial_state,
            slope,
            ..
        } => {
            let mut rho = CMatrix::zeros(dim);
            for a in 0..dim {
                for c in 0..dim {
                    rho[(a, c)] = initial_state[a] * initial_state[c].conj();
                }
            }
            let x = rho.matmul(&u_final.adjoint().matmul(operator));
            let y = first
                .iter()
                .map(|uk| rho.matmul(&uk.adjoint().matmul(operator)))
                .collect();
            Contraction::Obs {
                x,
                y,
                firsts: first.clone(),
                slope: *slope,
            }
        }
        ObjectiveKind::GateFidelity { target } => Contraction::Gate {
            w_adj: target.adjoint(),
            norm: 1.0 / (2.0 * dim as f64),
        },
    };

    let contract = |j: usize, k: usize, u_jk: &CMatrix| -> f64 {
        match &contraction {
            Contraction::State {
                z,
                z_first,
                initial,
                target,
            } => {
                let ui = u_jk.matvec(initial);
                let z_jk: C64 = target.iter().zip(&ui).map(|(f, x)| f.conj() * x).sum();
                2.0 * (z.conj() * z_jk + z_first[k].conj() * z_first[j]).re
            }
            Contraction::Obs { x, y, firsts, slope } => {
                slope * 2.0 * (u_jk.trace_mul(x).re + firsts[j].trace_mul(&y[k]).re)
            }
            Contraction::Gate { w_adj, norm } => norm * w_adj.trace_mul(u_jk).re,
        }
    };

    let mut matrix = vec![0.0; n * n];
    for j in 0..n {
        // Diagonal: second Fréchet term plus the first-derivative cross term.
        matrix[j * n + j] = contract(j, j, &diag_second[j]);
        // Off-diagonal: walk k upward, carrying U(t_k, t_{j+1}) incrementally.
        let mut mid = CMatrix::identity(dim);
        for k in (j + 1)..n {
            let u_jk = rb[k].matmul(&mid.matmul(&l[j]));
            let h_jk = contract(j, k, &u_jk);
            matrix[j * n + k] = h_jk;
            matrix[k * n + j] = h_jk;
            mid = hist.steps[k].matmul(&mid);
        }
    }
    Ok(HessianKernel {
        grid: hist.grid,
        matrix,
    })
}

/// K_β = ½ Σ_jk (∂²J/∂β_j∂β_k) R(t_j, t_k) for one spin's Hessian.
pub fn k_beta(hess: &HessianKernel, kernel: &CorrelationKernel) -> Result<f64> {
    let r = kernel.matrix(&hess.grid)?;
    Ok(0.5
        * hess
            .matrix
            .iter()
            .zip(&r)
            .map(|(h, rv)| h * rv)
            .sum::<f64>())
}

/// Total K_β summed over spins (each spin subject to independent, identical
/// noise statistics).
pub fn k_beta_total(
    obj: &Objective,
    sys: &SpinSystem,
    hist: &PropagatorHistory,
    model: &NoiseModel,
) -> Result<f64> {
    let mut total = 0.0;
    for spin in 0..sys.n_spins {
        let hess = hessian_from_history(obj, sys, hist, model.channel, spin)?;
        total += k_beta(&hess, &model.kernel)?;
    }
    Ok(total)
}

/// Fluence K_f = ∫ ε²(t) dt summed over spins. Fourier fields use the
/// trapezoid rule over the n+1 grid points including t = 0; time-sampled
/// fields use the right-endpoint sum matching their piecewise-constant
/// propagation model.
pub fn fluence(field: &ControlField) -> f64 {
    let dt = field.grid.dt;
    let n = field.grid.n_steps;
    match &field.parametrization {
        crate::spin::Parametrization::Fourier(specs) => specs
            .iter()
            .map(|spec| {
                let sq = |t: f64| {
                    let v = spec.eval(t);
                    v * v
                };
                let mut acc = 0.5 * (sq(0.0) + sq(field.grid.total_time));
                for m in 0..n.saturating_sub(1) {
                    acc += sq(field.grid.sample_time(m));
                }
                acc * dt
            })
            .sum(),
        crate::spin::Parametrization::TimeSamples(samples) => samples
            .iter()
            .map(|spin| spin.iter().map(|&x| x * x * dt).sum::<f64>())
            .sum(),
    }
}

/// Eigendecomposition of a real symmetric matrix via cyclic Jacobi.
/// Returns (eigenvalues, eigenvectors flattened row-major; column c of V is
/// the c-th eigenvector).
fn sym_eig(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..50 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-18 * scale {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Factor L with L ξ ~ N(0, R) for standard normal ξ, via eigendecomposition
/// with small negative eigenvalues clipped to zero.
pub struct GaussianProcessSampler {
    n: usize,
    factor: Vec<f64>, // n×n, row-major: draw = factor · ξ
}

impl GaussianProcessSampler {
    pub fn new(kernel: &CorrelationKernel, grid: &TimeGrid) -> Result<Self> {
        let n = grid.n_steps;
        let r = kernel.matrix(grid)?;
        let (vals, vecs) = sym_eig(r, n);
        let max = vals.iter().cloned().fold(0.0_f64, f64::max);
        let mut factor = vec![0.0; n * n];
        for c in 0..n {
            let lam = vals[c];
            if lam < -1e-12 * max.max(1e-300) && lam < -1e-14 {
                return Err(Error::InvalidKernel(format!(
                    "kernel not positive semidefinite (eigenvalue {lam})"
                )));
            }
            let root = lam.max(0.0).sqrt();
            for row in 0..n {
                factor[row * n + c] = vecs[row * n + c] * root;
            }
        }
        Ok(GaussianProcessSampler { n, factor })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let xi: Vec<f64> = (0..self.n)
            .map(|_| {
                // Box-Muller.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        (0..self.n)
            .map(|row| {
                (0..self.n)
                    .map(|c| self.factor[row * self.n + c] * xi[c])
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseLossEstimate {
    pub mean_loss: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Monte-Carlo estimate of E[J_noisy] - J_clean with δβ(t) drawn as a
/// Gaussian process with covariance R, independently per spin. Deterministic
/// for a fixed seed regardless of thread count (per-sample counter seeds).
pub fn expected_noise_loss_mc(
    obj: &Objective,
    sys: &SpinSystem,
    field: &ControlField,
    model: &NoiseModel,
    n_samples: usize,
    seed: u64,
) -> Result<NoiseLossEstimate> {
    let field = field.to_samples();
    let hs = crate::dynamics::step_hamiltonians(sys, &field)?;
    let clean_hist = propagate(sys, &field)?;
    let j_clean = evaluate(obj, &clean_hist)?;
    let sampler = GaussianProcessSampler::new(&model.kernel, &field.grid)?;
    let ops: Vec<CMatrix> = (0..sys.n_spins)
        .map(|i| noise_operator(sys, i, model.channel))
        .collect::<Result<_>>()?;
    let dt = field.grid.dt;
    let dim = sys.dim();
    let n_spins = sys.n_spins;

    let losses: Vec<Result<f64>> = par::run_indexed(n_samples, |sample| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample as u64 + 1);
        let draws: Vec<Vec<f64>> = (0..n_spins).map(|_| sampler.draw(&mut rng)).collect();
        let mut u = CMatrix::identity(dim);
        for (m, h) in hs.iter().enumerate() {
            let mut h_noisy = h.clone();
            for (i, op) in ops.iter().enumerate() {
                h_noisy.add_scaled(op, draws[i][m]);
            }
            let eig = eig_hermitian(&h_noisy)?;
            u = expm_unitary_from_eig(&eig, dt).matmul(&u);
        }
        Ok(crate::dynamics::evaluate_unitary(obj, &u)? - j_clean)
    });

    let mut vals = Vec::with_capacity(n_samples);
    for l in losses {
        vals.push(l?);
    }
    let mean = vals.iter().sum::<f64>() / n_samples as f64;
    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
        / (n_samples.saturating_sub(1)).max(1) as f64;
    Ok(NoiseLossEstimate {
        mean_loss: mean,
        std_error: (var / n_samples as f64).sqrt(),
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::test_support::random_sample_field;
    use crate::spin::Parametrization;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_hessian(
        obj: &Objective,
        sys: &SpinSystem,
        field: &ControlField,
        channel: NoiseChannel,
        spin: usize,
        h: f64,
    ) -> Vec<f64> {
        // Second-order central differences of J in the noise amplitudes.
        let b = noise_operator(sys, spin, channel).unwrap();
        let hs = crate::dynamics::step_hamiltonians(sys, field).unwrap();
        let dt = field.grid.dt;
        let n = field.grid.n_steps;
        let dim = sys.dim();
        let eval = |beta: &[f64]| -> f64 {
            let mut u = CMatrix::identity(dim);
            for (m, hm) in hs.iter().enumerate() {
                let mut hn = hm.clone();
                hn.add_scaled(&b, beta[m]);
                let eig = eig_hermitian(&hn).unwrap();
                u = expm_unitary_from_eig(&eig, dt).matmul(&u);
            }
            crate::dynamics::evaluate_unitary(obj, &u).unwrap()
        };
        let j0 = eval(&vec![0.0; n]);
        let mut out = vec![0.0; n * n];
        for j in 0..n {
            for k in j..n {
                let val = if j == k {
                    let mut bp = vec![0.0; n];
                    bp[j] = h;
                    let mut bm = vec![0.0; n];
                    bm[j] = -h;
                    (eval(&bp) - 2.0 * j0 + eval(&bm)) / (h * h)
                } else {
                    let mut bpp = vec![0.0; n];
                    bpp[j] = h;
                    bpp[k] = h;
                    let mut bpm = vec![0.0; n];
                    bpm[j] = h;
                    bpm[k] = -h;
                    let mut bmp = vec![0.0; n];
                    bmp[j] = -h;
                    bmp[k] = h;
                    let mut bmm = vec![0.0; n];
                    bmm[j] = -h;
                    bmm[k] = -h;
                    (eval(&bpp) - eval(&bpm) - eval(&bmp) + eval(&bmm)) / (4.0 * h * h)
                };
                out[j * n + k] = val;
                out[k * n + j] = val;
            }
        }
        out
    }

    #[test]
    fn hessian_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = SpinSystem::single(20.0);
        let grid = TimeGrid::new(1.0, 20);
        let field = random_sample_field(grid, 1, 1.0, &mut rng);
        let hess = hessian(&Objective::p12(&sys), &sys, &field, NoiseChannel::Field, 0).unwrap();
        let n = grid.n_steps;
        for j in 0..n {
            for k in 0..n {
                assert!((hess.matrix[j * n + k] - hess.matrix[k * n + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hessian_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = SpinSystem::single(20.0);
        let grid = TimeGrid::new(1.0, 12);
        let field = random_sample_field(grid, 1, 1.0, &mut rng);
        for channel in [NoiseChannel::Field, NoiseChannel::Detuning] {
            for obj in [Objective::p12(&sys), Objective::sigma_x(), Objective::hadamard()] {
                let hess = hessian(&obj, &sys, &field, channel, 0).unwrap();
                let fd = fd_hessian(&obj, &sys, &field, channel, 0, 1e-3);
                for (a, b) in hess.matrix.iter().zip(&fd) {
                    let err = (a - b).abs() / a.abs().max(1e-8 / 1e-4);
                    assert!(
                        err < 1e-4 || (a - b).abs() < 1e-8,
                        "{}: analytic {a} vs fd {b}",
                        obj.label
                    );
                }
            }
        }
    }

    #[test]
    fn k_beta_zero_strength() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = SpinSystem::single(20.0);
        let grid = TimeGrid::new(1.0, 10);
        let field = random_sample_field(grid, 1, 1.0, &mut rng);
        let hess = hessian(&Objective::p12(&sys), &sys, &field, NoiseChannel::Field, 0).unwrap();
        let k = k_beta(&hess, &CorrelationKernel::ExpDecay { a2: 0.0, alpha: 1.0 }).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn k_beta_diagonal_custom_matches_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let sys = SpinSystem::single(20.0);
        let grid = TimeGrid::new(1.0, 5);
        let field = random_sample_field(grid, 1, 1.0, &mut rng);
        let hess = hessian(&Objective::p12(&sys), &sys, &field, NoiseChannel::Field, 0).unwrap();
        let a2 = 1e-4;
        let n = 5;
        let mut table = vec![0.0; n * n];
        for j in 0..n {
            table[j * n + j] = a2 * grid.dt;
        }
        let k = k_beta(&hess, &CorrelationKernel::Custom { table, n }).unwrap();
        let hand: f64 = (0..n).map(|j| 0.5 * a2 * grid.dt * hess.entry(j, j)).sum();
        assert!((k - hand).abs() < 1e-15 * hand.abs().max(1.0));
    }

    #[test]
    fn k_beta_linear_in_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let sys = SpinSystem::single(20.0);
        let grid = TimeGrid::new(1.0, 10);
        let field = random_sample_field(grid, 1, 1.0, &mut rng);
        let hess = hessian(&Objective::p12(&sys), &sys, &field, NoiseChannel::Field, 0).unwrap();
        let k1 = CorrelationKernel::ExpDecay { a2: 1e-4, alpha: 1.0 };
        let k2 = CorrelationKernel::ExpDecay { a2: 3e-4, alpha: 0.5 };
        let sum_table: Vec<f64> = k1
            .matrix(&grid)
            .unwrap()
            .iter()
            .zip(&k2.matrix(&grid).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        let ks = k_beta(
            &hess,
            &CorrelationKernel::Custom { table: sum_table, n: 10 },
        )
        .unwrap();
        let ka = k_beta(&hess, &k1).unwrap();
        let kb = k_beta(&hess, &k2).unwrap();
        assert!((ks - ka - kb).abs() < 1e-12);
    }

    #[test]
    fn fluence_basics() {
        let grid = TimeGrid::two_level_default();
        assert_eq!(fluence(&ControlField::zero(grid, 1)), 0.0);
        // ε(t) = a sin(2πt): fluence = a²/2 at integer mode count.
        let a = 1.7;
        let samples: Vec<f64> = (0..grid.n_steps)
            .map(|m| a * (std::f64::consts::TAU * grid.sample_time(m)).sin())
            .collect();
        let f = fluence(&ControlField::from_samples(grid, vec![samples]));
        assert!((f - a * a / 2.0).abs() < 1e-3 * a * a);
    }

    #[test]
    fn fluence_matches_refined_riemann_sum() {
        let grid = TimeGrid::two_level_default();
        let fine = TimeGrid::new(1.0, 1000);
        let field = crate::spin::sample_random_field((0.0, 1.0), grid, 1, 6, 12).unwrap();
        let coarse = fluence(&field);
        let fine_field = ControlField {
            grid: fine,
            parametrization: field.parametrization.clone(),
        };
        let refined = fluence(&fine_field);
        assert!((coarse - refined).abs() / refined.abs() < 1e-3);
    }

    #[test]
    fn fluence_single_sine_mode_exact() {
        // a sin(kπt) with even k on T = 1: right-endpoint sum is exactly a²/2.
        let grid = TimeGrid::two_level_default();
        let field = ControlField {
            grid,
            parametrization: Parametrization::Fourier(vec![crate::spin::FourierSpec {
                amps: vec![0.0, 3.0],
                phases: vec![0.0, 0.0],
            }]),
        };
        let f = fluence(&field);
        assert!((f - 4.5).abs() < 1e-12, "fluence {f}");
    }

    #[test]
    fn gp_sampler_covariance() {
        let grid = TimeGrid::new(1.0, 20);
        let kernel = CorrelationKernel::ExpDecay { a2: 1e-2, alpha: 0.5 };
        let sampler = GaussianProcessSampler::new(&kernel, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = grid.n_steps;
        let draws: Vec<Vec<f64>> = (0..5000).map(|_| sampler.draw(&mut rng)).collect();
        let r = kernel.matrix(&grid).unwrap();
        for j in 0..n {
            let sample_var: f64 =
                draws.iter().map(|d| d[j] * d[j]).sum::<f64>() / draws.len() as f64;
            let rel = (sample_var - r[j * n + j]).abs() / r[j * n + j];
            assert!(rel < 0.05, "diagonal covariance off by {rel}");
        }
    }

    #[test]
    fn gp_sampler_rejects_indefinite_kernel() {
        let grid = TimeGrid::new(1.0, 2);
        let kernel = CorrelationKernel::Custom {
            table: vec![0.0, 1.0, 1.0, 0.0],
            n: 2,
        };
        assert!(matches!(
            GaussianProcessSampler::new(&kernel, &grid),
            Err(Error::InvalidKernel(_))
        ));
    }

    #[test]
    fn noise_loss_zero_strength_is_zero() {
        let sys = SpinSystem::single(20.0);
        let grid = TimeGrid::new(1.0, 20);
        let field = ControlField::zero(grid, 1);
        let model = NoiseModel {
            channel: NoiseChannel::Field,
            kernel: CorrelationKernel::ExpDecay { a2: 0.0, alpha: 1.0 },
        };
        let est =
            expected_noise_loss_mc(&Objective::p12(&sys), &sys, &field, &model, 50, 1).unwrap();
        assert_eq!(est.mean_loss, 0.0);
    }

    #[test]
    fn noise_loss_matches_k_beta_and_scales() {
        // Second-order validation on an arbitrary (not converged) field:
        // K_β should predict the MC loss, and doubling A² doubles it.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let sys = SpinSystem::single(20.0);
        let grid = TimeGrid::new(1.0, 30);
        let field = random_sample_field(grid, 1, 0.8, &mut rng);
        let obj = Objective::p12(&sys);
        let kernel = CorrelationKernel::ExpDecay { a2: 1e-6, alpha: 1.0 };
        let model = NoiseModel {
            channel: NoiseChannel::Field,
            kernel: kernel.clone(),
        };
        let hist = propagate(&sys, &field).unwrap();
        let k = k_beta_total(&obj, &sys, &hist, &model).unwrap();
        let est = expected_noise_loss_mc(&obj, &sys, &field, &model, 4000, 9).unwrap();
        // Away from an optimum the loss has a first-order component too, so
        // allow a generous band: the estimate must at least be within
        // 5 standard errors + second-order remainder of K_β.
        assert!(
            (est.mean_loss - k).abs() < 5.0 * est.std_error + 1e-7,
            "K_beta {k} vs MC {} ± {}",
            est.mean_loss,
            est.std_error
        );
        let model2 = NoiseModel {
            channel: NoiseChannel::Field,
            kernel: CorrelationKernel::ExpDecay { a2: 2e-6, alpha: 1.0 },
        };
        let k2 = k_beta_total(&obj, &sys, &hist, &model2).unwrap();
        assert!((k2 - 2.0 * k).abs() < 1e-12 * k.abs().max(1.0));
    }

    #[test]
    fn noise_loss_deterministic_for_seed() {
        let sys = SpinSystem::single(20.0);
        let grid = TimeGrid::new(1.0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let field = random_sample_field(grid, 1, 0.5, &mut rng);
        let model = NoiseModel {
            channel: NoiseChannel::Detuning,
            kernel: CorrelationKernel::default_exp(),
        };
        let obj = Objective::p12(&sys);
        let a = expected_noise_loss_mc(&obj, &sys, &field, &model, 100, 7).unwrap();
        let b = expected_noise_loss_mc(&obj, &sys, &field, &model, 100, 7).unwrap();
        assert_eq!(a.mean_loss, b.mean_loss);
    }
}
