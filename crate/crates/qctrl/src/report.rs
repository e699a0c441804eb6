//! Experiment orchestration and artifact emission: every run stages its
//! tables in memory first and only touches the filesystem once the whole
//! computation has succeeded, so a failed run leaves no partial output.
//! Also houses the self-check suites behind `verify` and front merging.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{Delimiter, ExperimentConfig, OptimizerBlock};
use crate::dynamics::{evaluate, gradient, propagate, Objective};
use crate::flow::{flow, Secondary, TrajectoryRecord};
use crate::fronts::{
    mc_ensemble, distribution_at_fidelity, run_seed, surface_3d, threshold_point,
    EnsembleConfig, EnsembleResult, FrontObjective, FrontPoint, nondominated_filter,
};
use crate::moea::{hypervolume_2d, moea_run};
use crate::robustness::{expected_noise_loss_mc, k_beta_total, NoiseModel};
use crate::spin::{sample_random_field, ControlField, FluenceRegime, SpinSystem, TimeGrid};
use crate::{Error, Result};

/// 17 significant digits, locale-independent.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, delimiter: Delimiter) -> String {
        let d = delimiter.as_str();
        let mut out = self.header.join(d);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(d));
            out.push('\n');
        }
        out
    }

    /// Parse a rendered table back; the delimiter is sniffed from the header.
    pub fn parse(text: &str) -> Result<(Self, Delimiter)> {
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::InsufficientData("empty table".into()))?;
        let delimiter = if header_line.contains('\t') {
            Delimiter::Tab
        } else {
            Delimiter::Comma
        };
        let d = delimiter.as_str();
        let header: Vec<String> = header_line.split(d).map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(d).map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(Error::InsufficientData(format!(
                    "row has {} fields, header has {}",
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok((Table { header, rows }, delimiter))
    }
}

/// In-memory artifact set: file name → contents.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<(String, String)>,
}

impl Artifacts {
    fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    fn add_table(&mut self, name: &str, table: &Table, delimiter: Delimiter) {
        self.add(name, table.render(delimiter));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_str())
    }

    /// Write every staged file under `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (name, contents) in &self.files {
            let path = dir.join(name);
            fs::write(&path, contents)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn manifest(cfg: &ExperimentConfig) -> String {
    format!(
        "# qctrl {}\n# resolved experiment configuration\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.to_toml()
    )
}

fn secondaries_for(cfg: &ExperimentConfig) -> Vec<Secondary> {
    let mut secs = vec![
        Secondary::KBeta {
            label: "k_beta".into(),
            model: cfg.noise.model(),
        },
        Secondary::Fluence,
    ];
    if let Some(model) = cfg.noise.overlay_model() {
        secs.push(Secondary::KBeta {
            label: "k_beta_overlay".into(),
            model,
        });
    }
    secs
}

/// Run the configured experiment and stage all artifacts in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let sys = cfg.system.system();
    let grid = cfg.system.grid();
    let obj = cfg.objective.kind.build(&sys);
    let delim = cfg.output.delimiter;
    let mut artifacts = Artifacts::default();
    artifacts.add("manifest.toml", manifest(cfg));

    match &cfg.optimizer {
        OptimizerBlock::Dmorph {
            regime,
            n_modes,
            flow: fb,
        } => {
            let field = sample_random_field(
                regime.amp_range(),
                grid,
                sys.n_spins,
                *n_modes,
                run_seed(cfg.seed, 0),
            )?;
            let record = flow(&obj, &sys, &field, &fb.flow_config(), &secondaries_for(cfg))?;
            artifacts.add_table("trajectory", &trajectory_table(&record), delim);
            emit_run_summary(&mut artifacts, &record);
        }
        OptimizerBlock::Mc {
            n_runs,
            regime,
            n_modes,
            flow: fb,
        } => {
            let ens_cfg = EnsembleConfig {
                n_runs: *n_runs,
                regime: *regime,
                n_modes: *n_modes,
                flow: fb.flow_config(),
                seed: cfg.seed,
            };
            let result = mc_ensemble(&obj, &sys, grid, &ens_cfg, &secondaries_for(cfg))?;
            emit_ensemble(&mut artifacts, cfg, &result, delim);
        }
        OptimizerBlock::Moea { .. } => {
            let moea_cfg = cfg.moea_config().expect("moea optimizer block");
            let result = moea_run(&obj, &sys, grid, &cfg.noise.model(), &moea_cfg)?;
            let mut front = Table::new(&["e_j", "k_beta", "step_size"]);
            for ind in &result.front {
                front.push(vec![
                    fmt17(ind.fitness[0]),
                    fmt17(-ind.fitness[1]),
                    fmt17(ind.step_size),
                ]);
            }
            artifacts.add_table("front", &front, delim);
            let mut history = Table::new(&["generation", "front_size", "hypervolume"]);
            let reference = moea_reference(&result.history);
            for (generation, snap) in &result.history {
                let hv = hypervolume_2d(snap, reference)?;
                history.push(vec![
                    generation.to_string(),
                    snap.len().to_string(),
                    fmt17(hv),
                ]);
            }
            artifacts.add_table("history", &history, delim);
            let mut pop = Table::new(&["e_j", "k_beta", "step_size", "success_stat"]);
            for ind in &result.population {
                pop.push(vec![
                    fmt17(ind.fitness[0]),
                    fmt17(-ind.fitness[1]),
                    fmt17(ind.step_size),
                    fmt17(ind.success_stat),
                ]);
            }
            artifacts.add_table("population", &pop, delim);
        }
    }
    if cfg.output.plot_scripts {
        artifacts.add("plot.py", plot_script(delim));
    }
    Ok(artifacts)
}

// Fixed hypervolume reference across a run's snapshot history.
fn moea_reference(history: &[(usize, Vec<[f64; 2]>)]) -> [f64; 2] {
    let mut r = [f64::NEG_INFINITY; 2];
    for (_, snap) in history {
        for p in snap {
            r[0] = r[0].max(p[0]);
            r[1] = r[1].max(p[1]);
        }
    }
    [r[0] + 0.1 * r[0].abs() + 1e-9, r[1] + 0.1 * r[1].abs() + 1e-9]
}

fn trajectory_table(record: &TrajectoryRecord) -> Table {
    let mut header = vec!["s", "e_j", "grad_norm"];
    for label in &record.secondary_labels {
        header.push(label);
    }
    let mut t = Table::new(&header);
    for p in &record.samples {
        let mut row = vec![fmt17(p.s), fmt17(p.e_j), fmt17(p.grad_norm)];
        row.extend(p.secondaries.iter().map(|&v| fmt17(v)));
        t.push(row);
    }
    t
}

fn emit_run_summary(artifacts: &mut Artifacts, record: &TrajectoryRecord) {
    let mut note = String::new();
    let _ = writeln!(note, "converged {}", record.converged);
    let _ = writeln!(note, "stalled {}", record.stalled);
    let _ = writeln!(note, "final_e_j {}", fmt17(record.final_error()));
    let _ = writeln!(note, "accepted_steps {}", record.accepted_steps);
    let _ = writeln!(note, "uphill_violations {}", record.uphill_violations);
    artifacts.add("summary.txt", note);
}

fn emit_ensemble(
    artifacts: &mut Artifacts,
    cfg: &ExperimentConfig,
    result: &EnsembleResult,
    delim: Delimiter,
) {
    let mut runs = Table::new(&[
        "run_id",
        "converged",
        "final_e_j",
        "accepted_steps",
        "uphill_violations",
    ]);
    for (id, t) in result.trajectories.iter().enumerate() {
        runs.push(vec![
            id.to_string(),
            (t.converged as u8).to_string(),
            fmt17(t.final_error()),
            t.accepted_steps.to_string(),
            t.uphill_violations.to_string(),
        ]);
    }
    artifacts.add_table("runs", &runs, delim);

    let env = &result.envelope;
    let mut header = vec!["e_j".to_string()];
    header.extend(env.secondary_labels.iter().cloned());
    let mut envelope = Table {
        header,
        rows: Vec::new(),
    };
    for (b, &e) in env.bins.iter().enumerate() {
        let mut row = vec![fmt17(e)];
        for sec in &env.values {
            row.push(sec[b].map(fmt17).unwrap_or_else(|| "nan".into()));
        }
        envelope.push(row);
    }
    artifacts.add_table("envelope", &envelope, delim);

    let mut threshold = Table::new(&["secondary", "e_star", "k_star"]);
    for (i, label) in env.secondary_labels.iter().enumerate() {
        if !label.starts_with("k_beta") {
            continue;
        }
        match threshold_point(&env.bins, &env.values[i]) {
            Some((e_star, k_star)) => {
                threshold.push(vec![label.clone(), fmt17(e_star), fmt17(k_star)])
            }
            None => threshold.push(vec![label.clone(), "none".into(), "none".into()]),
        }
    }
    artifacts.add_table("threshold", &threshold, delim);

    // Distribution of K_β across runs at the convergence target.
    let target = match &cfg.optimizer {
        OptimizerBlock::Mc { flow, .. } => flow.flow_config().target_error,
        _ => 10f64.powf(-7.5),
    };
    if let Ok(hist) = distribution_at_fidelity(result, 0, target) {
        let mut h = Table::new(&["bin_lo", "bin_hi", "count"]);
        for b in 0..hist.counts.len() {
            h.push(vec![
                fmt17(hist.bin_edges[b]),
                fmt17(hist.bin_edges[b + 1]),
                hist.counts[b].to_string(),
            ]);
        }
        artifacts.add_table("histogram", &h, delim);
    }

    // All recorded points plus the nondominated surface and projections,
    // over the first two secondaries (K_β, fluence).
    if env.secondary_labels.len() >= 2 {
        let surf = surface_3d(&result.trajectories);
        let point_table = |pts: &[FrontPoint]| {
            let mut t = Table::new(&["run_id", "s", "e_j", "k_beta", "fluence"]);
            for p in pts {
                t.push(vec![
                    p.run_id.to_string(),
                    fmt17(p.s),
                    fmt17(p.e_j),
                    fmt17(p.secondaries[0]),
                    fmt17(p.secondaries[1]),
                ]);
            }
            t
        };
        artifacts.add_table("points", &point_table(&surf.all_points), delim);
        artifacts.add_table("surface", &point_table(&surf.surface), delim);
        artifacts.add_table("proj_k", &point_table(&surf.projection_k), delim);
        artifacts.add_table("proj_fluence", &point_table(&surf.projection_fluence), delim);
    }
}

/// Resolve the output directory: explicit override, else the environment
/// default joined with the configured directory, else the configured
/// directory as-is.
pub fn resolve_output_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    match std::env::var_os("QCTRL_OUTPUT_DIR") {
        Some(base) => PathBuf::from(base).join(&cfg.output.directory),
        None => PathBuf::from(&cfg.output.directory),
    }
}

/// Merge front tables (as written by `run`) across files: concatenate,
/// re-filter for dominance, and emit one combined table.
pub fn merge_fronts(texts: &[String]) -> Result<Table> {
    let mut merged: Vec<FrontPoint> = Vec::new();
    let mut header: Option<Vec<String>> = None;
    for text in texts {
        let (table, _) = Table::parse(text)?;
        match &header {
            None => header = Some(table.header.clone()),
            Some(h) => {
                if *h != table.header {
                    return Err(Error::Config(format!(
                        "mismatched front headers: {:?} vs {:?}",
                        h, table.header
                    )));
                }
            }
        }
        let idx = |name: &str| {
            table
                .header
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("front table lacks column {name}")))
        };
        let e_col = idx("e_j")?;
        let k_col = idx("k_beta")?;
        let f_col = table.header.iter().position(|c| c == "fluence");
        for row in &table.rows {
            let num = |col: usize| {
                row[col]
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad number {:?}: {e}", row[col])))
            };
            let mut secondaries = vec![num(k_col)?];
            if let Some(fc) = f_col {
                secondaries.push(num(fc)?);
            }
            merged.push(FrontPoint {
                e_j: num(e_col)?,
                secondaries,
                run_id: 0,
                s: 0.0,
            });
        }
    }
    let header = header.ok_or_else(|| Error::InsufficientData("no input tables".into()))?;
    let has_fluence = header.iter().any(|c| c == "fluence");
    let mut objectives = vec![FrontObjective::FidelityError, FrontObjective::SecondaryMax(0)];
    if has_fluence {
        objectives.push(FrontObjective::SecondaryMin(1));
    }
    let kept = nondominated_filter(&merged, &objectives);
    let mut out = if has_fluence {
        Table::new(&["e_j", "k_beta", "fluence"])
    } else {
        Table::new(&["e_j", "k_beta"])
    };
    for p in kept {
        let mut row = vec![fmt17(p.e_j), fmt17(p.secondaries[0])];
        if has_fluence {
            row.push(fmt17(p.secondaries[1]));
        }
        out.push(row);
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// verify suites

#[derive(Debug, Clone)]
pub struct VerifyLine {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub lines: Vec<VerifyLine>,
}

impl VerifyReport {
    fn check(&mut self, name: &str, measured: f64, bound: f64) {
        self.lines.push(VerifyLine {
            name: name.to_string(),
            measured,
            bound,
            passed: measured.is_finite() && measured <= bound,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let _ = writeln!(
                out,
                "{}  measured {:.3e}  bound {:.3e}  {}",
                if l.passed { "PASS" } else { "FAIL" },
                l.measured,
                l.bound,
                l.name
            );
        }
        out
    }
}

fn fd_gradient(obj: &Objective, sys: &SpinSystem, field: &ControlField, h: f64) -> Result<Vec<f64>> {
    let base = field.to_samples();
    let samples = base.samples();
    let n = base.grid.n_steps;
    let mut grad = Vec::with_capacity(sys.n_spins * n);
    for spin in 0..sys.n_spins {
        for m in 0..n {
            let mut plus = samples.clone();
            plus[spin][m] += h;
            let mut minus = samples.clone();
            minus[spin][m] -= h;
            let jp = evaluate(obj, &propagate(sys, &ControlField::from_samples(base.grid, plus))?)?;
            let jm = evaluate(obj, &propagate(sys, &ControlField::from_samples(base.grid, minus))?)?;
            grad.push((jp - jm) / (2.0 * h));
        }
    }
    Ok(grad)
}

fn verify_gradients(report: &mut VerifyReport) -> Result<()> {
    let sys = SpinSystem::default_two_level();
    let grid = TimeGrid::two_level_default();
    let objectives = [Objective::p12(&sys), Objective::sigma_x(), Objective::hadamard()];
    for obj in &objectives {
        let mut worst = 0.0f64;
        for trial in 0..3 {
            let field = sample_random_field((0.0, 5.0), grid, 1, 8, 900 + trial)?;
            let analytic = gradient(obj, &sys, &field)?;
            let numeric = fd_gradient(obj, &sys, &field, 1e-5)?;
            for (a, f) in analytic.iter().zip(&numeric) {
                let err = (a - f).abs() / a.abs().max(1e-9);
                worst = worst.max(err);
            }
        }
        report.check(&format!("gradient fd, {}", obj.label), worst, 1e-5);
    }
    Ok(())
}

fn verify_unitarity(report: &mut VerifyReport) -> Result<()> {
    let sys = SpinSystem::default_two_level();
    let grid = TimeGrid::two_level_default();
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let amp = if trial % 2 == 0 { 0.05 } else { 50.0 };
        let field = sample_random_field((0.0, amp), grid, 1, 10, 1700 + trial)?;
        let hist = propagate(&sys, &field)?;
        let u = hist.cumulative.last().expect("propagation is nonempty");
        let gram = u.adjoint().matmul(u);
        let dev = gram.sub(&crate::linalg::CMatrix::identity(2)).frobenius_norm();
        worst = worst.max(dev);
    }
    report.check("unitarity, 100 random propagations", worst, 1e-10);
    Ok(())
}

fn verify_kbeta_oracle(report: &mut VerifyReport) -> Result<()> {
    let sys = SpinSystem::default_two_level();
    let grid = TimeGrid::two_level_default();
    let obj = Objective::p12(&sys);
    let model = NoiseModel {
        channel: crate::spin::NoiseChannel::Field,
        kernel: crate::robustness::CorrelationKernel::default_exp(),
    };
    // Converge first: the quadratic model is exact at a critical point up
    // to O(A^4), so 3 standard errors is a fair bound there.
    let start = sample_random_field(FluenceRegime::Low.amp_range(), grid, 1, 10, 4242)?;
    let record = flow(
        &obj,
        &sys,
        &start,
        &crate::flow::FlowConfig::default(),
        &[],
    )?;
    let hist = propagate(&sys, &record.final_field)?;
    let k = k_beta_total(&obj, &sys, &hist, &model)?;
    let mc = expected_noise_loss_mc(&obj, &sys, &record.final_field, &model, 2000, 4243)?;
    let gap_in_se = (k - mc.mean_loss).abs() / mc.std_error;
    report.check("k_beta vs 2000-sample MC (units of SE)", gap_in_se, 3.0);
    Ok(())
}

/// Run a named self-check suite: gradients | unitarity | kbeta-oracle | all.
pub fn verify(suite: &str) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    match suite {
        "gradients" => verify_gradients(&mut report)?,
        "unitarity" => verify_unitarity(&mut report)?,
        "kbeta-oracle" => verify_kbeta_oracle(&mut report)?,
        "all" => {
            verify_gradients(&mut report)?;
            verify_unitarity(&mut report)?;
            verify_kbeta_oracle(&mut report)?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown verify suite {other:?}; expected gradients, unitarity, kbeta-oracle or all"
            )))
        }
    }
    Ok(report)
}

fn plot_script(delimiter: Delimiter) -> String {
    let sep = match delimiter {
        Delimiter::Tab => "\\t",
        Delimiter::Comma => ",",
    };
    format!(
        r#"#!/usr/bin/env python3
"""Render whatever tables this run produced next to this script."""
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
SEP = "{sep}"


def load(name):
    path = os.path.join(HERE, name)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        header = fh.readline().strip().split(SEP)
        rows = [line.strip().split(SEP) for line in fh if line.strip()]
    cols = {{}}
    for i, key in enumerate(header):
        vals = []
        for row in rows:
            try:
                vals.append(float(row[i]))
            except ValueError:
                vals.append(np.nan)
        cols[key] = np.asarray(vals)
    return cols


def main():
    made = []
    env = load("envelope")
    if env is not None:
        fig, ax = plt.subplots()
        x = np.log10(env["e_j"])
        for key, vals in env.items():
            if key == "e_j":
                continue
            ax.plot(x, vals, marker=".", label=key)
        thr = load("threshold")
        ax.set_xlabel("log10 E_J")
        ax.legend()
        fig.savefig(os.path.join(HERE, "envelope.png"), dpi=150)
        made.append("envelope.png")
    tr = load("trajectory")
    if tr is not None:
        fig, ax = plt.subplots()
        x = np.log10(tr["e_j"])
        for key, vals in tr.items():
            if key in ("s", "e_j", "grad_norm"):
                continue
            ax.plot(x, vals, label=key)
        ax.set_xlabel("log10 E_J")
        ax.legend()
        fig.savefig(os.path.join(HERE, "trajectory.png"), dpi=150)
        made.append("trajectory.png")
    fr = load("front")
    if fr is not None:
        fig, ax = plt.subplots()
        ax.plot(np.log10(fr["e_j"]), fr["k_beta"], "o-")
        ax.set_xlabel("log10 E_J")
        ax.set_ylabel("K_beta")
        fig.savefig(os.path.join(HERE, "front.png"), dpi=150)
        made.append("front.png")
    surf = load("surface")
    if surf is not None:
        fig = plt.figure()
        ax = fig.add_subplot(projection="3d")
        ax.scatter(np.log10(surf["e_j"]), surf["k_beta"], surf["fluence"], s=4)
        ax.set_xlabel("log10 E_J")
        ax.set_ylabel("K_beta")
        ax.set_zlabel("fluence")
        fig.savefig(os.path.join(HERE, "surface.png"), dpi=150)
        made.append("surface.png")
    print("wrote", ", ".join(made) if made else "nothing (no tables found)")


if __name__ == "__main__":
    sys.exit(main())
"#
    )
}
