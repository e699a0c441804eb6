//! Gradient flow of the control field in a progress variable s:
//! ∂ε(s,t)/∂s = ∂J/∂ε(t), integrated with an adaptive embedded
//! Dormand-Prince 4(5) scheme, recording fidelity error and secondary
//! objective diagnostics along the trajectory.

use serde::{Deserialize, Serialize};

use crate::dynamics::{gradient_from_history, propagate, Objective};
use crate::robustness::{fluence, k_beta_total, NoiseModel};
use crate::spin::{ControlField, SpinSystem};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Stop when E_J = 1 - J drops to this value.
    pub target_error: f64,
    pub s_max: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// 0: adaptive recording on log10(E_J) decrements of 0.05;
    /// k > 0: record every k accepted steps.
    pub record_stride: usize,
    /// Gradient norm below which the run is declared stalled.
    pub stall_grad_norm: f64,
    pub max_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            target_error: 10f64.powf(-7.5),
            s_max: 1e6,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            record_stride: 0,
            stall_grad_norm: 1e-12,
            max_steps: 500_000,
        }
    }
}

/// A secondary objective tracked along the flow.
#[derive(Debug, Clone)]
pub enum Secondary {
    KBeta { label: String, model: NoiseModel },
    Fluence,
}

impl Secondary {
    pub fn label(&self) -> &str {
        match self {
            Secondary::KBeta { label, .. } => label,
            Secondary::Fluence => "fluence",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplePoint {
    pub s: f64,
    pub e_j: f64,
    pub grad_norm: f64,
    /// Secondary values in the order of the requested diagnostics.
    pub secondaries: Vec<f64>,
    pub snapshot: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub secondary_labels: Vec<String>,
    pub samples: Vec<SamplePoint>,
    pub converged: bool,
    pub stalled: bool,
    pub final_field: ControlField,
    /// Accepted steps where J decreased by more than the allowed slack.
    pub uphill_violations: usize,
    pub accepted_steps: usize,
}

impl TrajectoryRecord {
    pub fn final_error(&self) -> f64 {
        self.samples.last().map(|p| p.e_j).unwrap_or(1.0)
    }

    /// Secondary value interpolated at fidelity error `e_j`, linear in
    /// log10(E_J). Returns None when the trajectory never reached `e_j`.
    pub fn secondary_at(&self, idx: usize, e_j: f64) -> Option<f64> {
        let target = e_j.log10();
        let pts: Vec<(f64, f64)> = self
            .samples
            .iter()
            .filter(|p| p.e_j > 0.0)
            .map(|p| (p.e_j.log10(), p.secondaries[idx]))
            .collect();
        interpolate_descending(&pts, target)
    }
}

/// Interpolate f(x) from (x, f) points with non-increasing x, at `target`.
pub(crate) fn interpolate_descending(pts: &[(f64, f64)], target: f64) -> Option<f64> {
    if pts.is_empty() {
        return None;
    }
    if target > pts[0].0 {
        return None; // trajectory starts below the requested error
    }
    for w in pts.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if target <= x0 && target >= x1 {
            if (x0 - x1).abs() < 1e-300 {
                return Some(y1);
            }
            let f = (target - x1) / (x0 - x1);
            return Some(y1 + f * (y0 - y1));
        }
    }
    if target < pts.last().unwrap().0 {
        None // never reached
    } else {
        Some(pts.last().unwrap().1)
    }
}

/// Extract the (s, ‖gradient‖) profile of a recorded run.
pub fn gradient_norm_profile(record: &TrajectoryRecord) -> Result<Vec<(f64, f64)>> {
    if record.samples.is_empty() {
        return Err(Error::InsufficientData("empty trajectory record".into()));
    }
    Ok(record.samples.iter().map(|p| (p.s, p.grad_norm)).collect())
}

const DP_A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct FlowState<'a> {
    obj: &'a Objective,
    sys: &'a SpinSystem,
    template: ControlField,
    n_steps: usize,
    evals: usize,
}

impl FlowState<'_> {
    fn unflatten(&self, y: &[f64]) -> ControlField {
        let samples: Vec<Vec<f64>> = (0..self.sys.n_spins)
            .map(|i| y[i * self.n_steps..(i + 1) * self.n_steps].to_vec())
            .collect();
        ControlField::from_samples(self.template.grid, samples)
    }

    /// Returns (J, gradient) at the field defined by y.
    fn eval(&mut self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evals += 1;
        let field = self.unflatten(y);
        let hist = propagate(self.sys, &field)?;
        gradient_from_history(self.obj, self.sys, &hist)
    }
}

/// Run the gradient flow from `initial`, recording E_J, gradient norm and
/// the requested secondary diagnostics along the way.
pub fn flow(
    obj: &Objective,
    sys: &SpinSystem,
    initial: &ControlField,
    cfg: &FlowConfig,
    diagnostics: &[Secondary],
) -> Result<TrajectoryRecord> {
    let initial = initial.to_samples();
    let n = initial.grid.n_steps;
    let mut state = FlowState {
        obj,
        sys,
        template: initial.clone(),
        n_steps: n,
        evals: 0,
    };
    let mut y: Vec<f64> = initial.samples().concat();
    let dim = y.len();

    let secondary_labels: Vec<String> = diagnostics.iter().map(|d| d.label().into()).collect();
    let eval_secondaries = |field: &ControlField| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(diagnostics.len());
        if diagnostics.is_empty() {
            return Ok(out);
        }
        let hist = propagate(sys, field)?;
        for d in diagnostics {
            out.push(match d {
                Secondary::KBeta { model, .. } => k_beta_total(obj, sys, &hist, model)?,
                Secondary::Fluence => fluence(field),
            });
        }
        Ok(out)
    };

    let (mut j, mut grad) = state.eval(&y)?;
    let mut gnorm = norm(&grad);
    let mut samples = Vec::new();
    let next_snapshot_decade = std::cell::Cell::new(-2.0); // E_J = 1e-2, 1e-3, ...
    let last_logged_e = std::cell::Cell::new(f64::INFINITY);

    let record =
        |s: f64, e: f64, gn: f64, field: &ControlField, samples: &mut Vec<SamplePoint>| -> Result<()> {
            let snapshot = if e > 0.0 && e.log10() <= next_snapshot_decade.get() {
                next_snapshot_decade.set(e.log10().floor() - 1.0);
                Some(field.samples())
            } else {
                None
            };
            samples.push(SamplePoint {
                s,
                e_j: e,
                grad_norm: gn,
                secondaries: eval_secondaries(field)?,
                snapshot,
            });
            last_logged_e.set(e.max(1e-300).log10());
            Ok(())
        };

    record(0.0, 1.0 - j, gnorm, &initial, &mut samples)?;

    let mut s = 0.0;
    let mut converged = 1.0 - j <= cfg.target_error;
    let mut stalled = !converged && gnorm < cfg.stall_grad_norm;
    let mut uphill_violations = 0usize;
    let mut accepted = 0usize;

    if !converged && !stalled {
        // Initial step size from the gradient scale.
        let mut h = (1e-3 * norm(&y).max(1e-3) / gnorm.max(1e-12)).min(1.0);
        let mut k: Vec<Vec<f64>> = vec![vec![0.0; dim]; 7];
        k[0] = grad.clone();
        let mut steps_taken = 0usize;

        loop {
            if steps_taken >= cfg.max_steps || s >= cfg.s_max {
                break;
            }
            if h < 1e-12 * s.max(1.0) {
                return Err(Error::StepUnderflow(s));
            }
            steps_taken += 1;
            // Stages 2..7 (k[6] is the FSAL stage at the candidate point).
            let mut j_new = j;
            for stage in 0..6 {
                let mut ys = y.clone();
                for (l, kl) in k.iter().enumerate().take(stage + 1) {
                    let a = DP_A[stage][l];
                    if a != 0.0 {
                        for i in 0..dim {
                            ys[i] += h * a * kl[i];
                        }
                    }
                }
                let (js, g) = state.eval(&ys)?;
                k[stage + 1] = g;
                if stage == 5 {
                    j_new = js;
                }
            }
            // Candidate y_new is the stage-7 point (b row equals a[5]).
            let mut y_new = y.clone();
            for (l, kl) in k.iter().enumerate().take(6) {
                let a = DP_A[5][l];
                if a != 0.0 {
                    for i in 0..dim {
                        y_new[i] += h * a * kl[i];
                    }
                }
            }
            // Error estimate.
            let mut err_acc = 0.0;
            for i in 0..dim {
                let mut e = 0.0;
                for (l, kl) in k.iter().enumerate() {
                    e += DP_E[l] * kl[i];
                }
                e *= h;
                let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
                err_acc += (e / sc) * (e / sc);
            }
            let err = (err_acc / dim as f64).sqrt();

            if err <= 1.0 {
                // Accept.
                accepted += 1;
                s += h;
                y = y_new;
                if j_new < j - 10.0 * cfg.rel_tol {
                    uphill_violations += 1;
                }
                j = j_new;
                grad = k[6].clone();
                gnorm = norm(&grad);
                let e = 1.0 - j;
                let should_record = if cfg.record_stride == 0 {
                    e.max(1e-300).log10() <= last_logged_e.get() - 0.05
                } else {
                    accepted % cfg.record_stride == 0
                };
                let done = e <= cfg.target_error
                    || gnorm < cfg.stall_grad_norm
                    || s >= cfg.s_max;
                if should_record || done {
                    let field = state.unflatten(&y);
                    record(s, e, gnorm, &field, &mut samples)?;
                }
                k[0] = grad.clone(); // FSAL
                if e <= cfg.target_error {
                    converged = true;
                    break;
                }
                if gnorm < cfg.stall_grad_norm {
                    stalled = true;
                    break;
                }
            }
            let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
            h = (h * fac).min(cfg.s_max - s).max(0.0).max(1e-300);
        }
    }

    Ok(TrajectoryRecord {
        secondary_labels,
        samples,
        converged,
        stalled,
        final_field: state.unflatten(&y),
        uphill_violations,
        accepted_steps: accepted,
    })
}
