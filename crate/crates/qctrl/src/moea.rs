//! Steady-state multi-objective evolution strategy over Fourier control
//! parameters, minimizing (E_J, -K_β). Each individual carries its own
//! isotropic step size adapted by the smoothed 1/5-success rule;
//! environmental selection is nondominated rank followed by hypervolume
//! contribution. An external archive keeps every nondominated fitness pair
//! seen, so the reported front only improves.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evaluate, propagate, Objective};
use crate::par;
use crate::robustness::{k_beta_total, NoiseModel};
use crate::spin::{ControlField, FluenceRegime, FourierSpec, Parametrization, SpinSystem, TimeGrid};
use crate::{Error, Result};

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Genome layout: per spin, per mode, the pair (a_k, φ_k).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Vec<f64>,
    pub step_size: f64,
    /// Exponentially smoothed success rate of this individual's offspring.
    pub success_stat: f64,
    /// (E_J, -K_β), both minimized.
    pub fitness: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoeaConfig {
    pub population: usize,
    pub generations: usize,
    pub regime: FluenceRegime,
    pub n_modes: usize,
    pub seed: u64,
    /// Initial mutation step, as a fraction of the amplitude range.
    pub initial_step: f64,
    /// Record a front snapshot every this many generations (0 = final only).
    pub snapshot_stride: usize,
}

impl MoeaConfig {
    pub fn new(regime: FluenceRegime, n_modes: usize, generations: usize, seed: u64) -> Self {
        MoeaConfig {
            population: 100,
            generations,
            regime,
            n_modes,
            seed,
            initial_step: 0.1,
            snapshot_stride: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoeaResult {
    pub population: Vec<Individual>,
    /// Nondominated archive of all fitness pairs encountered, sorted by E_J.
    pub front: Vec<Individual>,
    /// (generation, archive fitness pairs) snapshots.
    pub history: Vec<(usize, Vec<[f64; 2]>)>,
    pub evaluations: usize,
}

pub fn genome_to_field(genome: &[f64], grid: TimeGrid, n_spins: usize, n_modes: usize) -> ControlField {
    let specs = (0..n_spins)
        .map(|i| {
            let base = i * n_modes * 2;
            FourierSpec {
                amps: (0..n_modes).map(|k| genome[base + 2 * k]).collect(),
                phases: (0..n_modes).map(|k| genome[base + 2 * k + 1]).collect(),
            }
        })
        .collect();
    ControlField {
        grid,
        parametrization: Parametrization::Fourier(specs),
    }
}

/// (E_J, -K_β) through the same propagate/evaluate/k_beta path as the
/// gradient-flow and Monte-Carlo ensembles.
pub fn evaluate_genome(
    genome: &[f64],
    obj: &Objective,
    sys: &SpinSystem,
    grid: TimeGrid,
    model: &NoiseModel,
    n_modes: usize,
) -> Result<[f64; 2]> {
    let field = genome_to_field(genome, grid, sys.n_spins, n_modes);
    let hist = propagate(sys, &field)?;
    let j = evaluate(obj, &hist)?;
    let k = k_beta_total(obj, sys, &hist, model)?;
    Ok([1.0 - j, -k])
}

fn enforce_bounds(genome: &mut [f64]) {
    for pair in genome.chunks_mut(2) {
        if pair[0] < 0.0 {
            pair[0] = -pair[0];
        }
        pair[1] = pair[1].rem_euclid(TAU);
    }
}

fn mutate(parent: &Individual, amp_scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut genome = parent.genome.clone();
    for pair in genome.chunks_mut(2) {
        let (g0, g1): (f64, f64) = (rng.sample(rand_distr_standard()), rng.sample(rand_distr_standard()));
        pair[0] += parent.step_size * amp_scale * g0;
        pair[1] += parent.step_size * TAU * g1;
    }
    enforce_bounds(&mut genome);
    genome
}

// Box-Muller standard normal, matching the draw style used elsewhere in
// the crate (no extra distribution dependency).
struct StdNormal;
fn rand_distr_standard() -> StdNormal {
    StdNormal
}
impl rand::distributions::Distribution<f64> for StdNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }
}

fn dominates(a: &[f64; 2], b: &[f64; 2]) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

/// Area dominated by `front` inside the box with corner `reference`,
/// by a sorted sweep over f1. Errors if any point falls outside the box.
pub fn hypervolume_2d(front: &[[f64; 2]], reference: [f64; 2]) -> Result<f64> {
    if front.iter().any(|p| p[0] > reference[0] || p[1] > reference[1]) {
        return Err(Error::OutsideReference);
    }
    let mut pts: Vec<[f64; 2]> = front.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut area = 0.0;
    let mut prev_f2 = reference[1];
    for p in pts {
        if p[1] < prev_f2 {
            area += (reference[0] - p[0]) * (prev_f2 - p[1]);
            prev_f2 = p[1];
        }
    }
    Ok(area)
}

fn nondominated_indices(fitness: &[[f64; 2]], pool: &[usize]) -> Vec<usize> {
    pool.iter()
        .copied()
        .filter(|&i| {
            !pool
                .iter()
                .any(|&j| j != i && dominates(&fitness[j], &fitness[i]))
        })
        .collect()
}

/// Rank-then-contribution environmental selection: fill by nondominated
/// rank, break the last rank by iteratively dropping the point with the
/// smallest hypervolume contribution.
fn select(fitness: &[[f64; 2]], target: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..fitness.len()).collect();
    let mut chosen = Vec::with_capacity(target);
    while chosen.len() < target {
        let mut front = nondominated_indices(fitness, &remaining);
        if chosen.len() + front.len() <= target {
            remaining.retain(|i| !front.contains(i));
            chosen.extend(front);
        } else {
            let need = target - chosen.len();
            let reference = reference_point(fitness, &front);
            while front.len() > need {
                let total = hv_of(fitness, &front, reference);
                let (worst_pos, _) = front
                    .iter()
                    .enumerate()
                    .map(|(pos, _)| {
                        let mut reduced = front.clone();
                        reduced.remove(pos);
                        (pos, total - hv_of(fitness, &reduced, reference))
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("front is nonempty");
                front.remove(worst_pos);
            }
            chosen.extend(front);
        }
    }
    chosen
}

fn reference_point(fitness: &[[f64; 2]], pool: &[usize]) -> [f64; 2] {
    let mut r = [f64::NEG_INFINITY; 2];
    for &i in pool {
        for d in 0..2 {
            r[d] = r[d].max(fitness[i][d]);
        }
    }
    [nudge_up(r[0]), nudge_up(r[1])]
}

fn nudge_up(x: f64) -> f64 {
    x + 0.1 * x.abs() + 1e-9
}

fn hv_of(fitness: &[[f64; 2]], pool: &[usize], reference: [f64; 2]) -> f64 {
    let pts: Vec<[f64; 2]> = pool.iter().map(|&i| fitness[i]).collect();
    hypervolume_2d(&pts, reference).unwrap_or(0.0)
}

fn archive_update(archive: &mut Vec<Individual>, candidates: &[Individual]) {
    for c in candidates {
        // Weak dominance, so fitness duplicates never enter the archive.
        if archive
            .iter()
            .any(|a| a.fitness[0] <= c.fitness[0] && a.fitness[1] <= c.fitness[1])
        {
            continue;
        }
        archive.retain(|a| !dominates(&c.fitness, &a.fitness));
        archive.push(c.clone());
    }
    archive.sort_by(|a, b| a.fitness[0].total_cmp(&b.fitness[0]));
}

fn gen_rng(seed: u64, generation: usize, slot: usize, population: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((generation * population + slot + 1) as u64);
    rng
}

// Smoothed 1/5-success step-size rule.
const P_TARGET: f64 = 0.2;
const SMOOTHING: f64 = 0.1;
const DAMPING: f64 = 2.0;

fn adapt_step(ind: &mut Individual, success: bool) {
    let s = if success { 1.0 } else { 0.0 };
    ind.success_stat = (1.0 - SMOOTHING) * ind.success_stat + SMOOTHING * s;
    ind.step_size *= ((ind.success_stat - P_TARGET) / (DAMPING * (1.0 - P_TARGET))).exp();
    // No lower clamp: zero stays zero (frozen clones), and a positive
    // step can only decay geometrically, never vanish.
    ind.step_size = ind.step_size.min(10.0);
}

pub fn moea_run(
    obj: &Objective,
    sys: &SpinSystem,
    grid: TimeGrid,
    model: &NoiseModel,
    cfg: &MoeaConfig,
) -> Result<MoeaResult> {
    if cfg.population < 2 {
        return Err(Error::Config("population must be >= 2".into()));
    }
    if cfg.n_modes == 0 || cfg.n_modes > sys.max_fourier_modes() {
        return Err(Error::Config(format!(
            "mode count {} outside 1..={}",
            cfg.n_modes,
            sys.max_fourier_modes()
        )));
    }
    let (lo, hi) = cfg.regime.amp_range();
    let amp_scale = hi - lo;
    let genome_len = sys.n_spins * cfg.n_modes * 2;

    // Initial population, fitness evaluated concurrently.
    let init: Vec<Result<Individual>> = par::run_indexed(cfg.population, |i| {
        let mut rng = gen_rng(cfg.seed, 0, i, cfg.population);
        let genome: Vec<f64> = (0..genome_len / 2)
            .flat_map(|_| {
                [
                    if hi > lo { rng.gen_range(lo..hi) } else { lo },
                    rng.gen_range(0.0..TAU),
                ]
            })
            .collect();
        let fitness = evaluate_genome(&genome, obj, sys, grid, model, cfg.n_modes)?;
        Ok(Individual {
            genome,
            step_size: cfg.initial_step,
            success_stat: P_TARGET,
            fitness,
        })
    });
    let mut population = Vec::with_capacity(cfg.population);
    for r in init {
        population.push(r?);
    }
    let mut evaluations = cfg.population;
    let mut archive: Vec<Individual> = Vec::new();
    archive_update(&mut archive, &population);
    let mut history = Vec::new();
    let snapshot = |archive: &[Individual]| archive.iter().map(|a| a.fitness).collect::<Vec<_>>();
    history.push((0, snapshot(&archive)));

    for generation in 1..=cfg.generations {
        let offspring: Vec<Result<Individual>> = par::run_indexed(cfg.population, |i| {
            let mut rng = gen_rng(cfg.seed, generation, i, cfg.population);
            let genome = mutate(&population[i], amp_scale, &mut rng);
            let fitness = evaluate_genome(&genome, obj, sys, grid, model, cfg.n_modes)?;
            Ok(Individual {
                genome,
                step_size: population[i].step_size,
                success_stat: population[i].success_stat,
                fitness,
            })
        });
        let mut offspring_v = Vec::with_capacity(cfg.population);
        for r in offspring {
            offspring_v.push(r?);
        }
        evaluations += cfg.population;

        // Success = the child is not dominated by its parent.
        let success: Vec<bool> = offspring_v
            .iter()
            .zip(&population)
            .map(|(c, p)| !dominates(&p.fitness, &c.fitness))
            .collect();
        archive_update(&mut archive, &offspring_v);

        let mut pool = population.clone();
        pool.extend(offspring_v);
        let fitness: Vec<[f64; 2]> = pool.iter().map(|ind| ind.fitness).collect();
        let keep = select(&fitness, cfg.population);
        let mut next: Vec<Individual> = keep.iter().map(|&i| pool[i].clone()).collect();
        // Parent slot i adapts from its own offspring's outcome; survivors
        // that were offspring inherit the parent's adapted step.
        for (slot, ind) in next.iter_mut().enumerate() {
            adapt_step(ind, success[slot % success.len()]);
        }
        population = next;

        if cfg.snapshot_stride > 0 && generation % cfg.snapshot_stride == 0 {
            history.push((generation, snapshot(&archive)));
        }
    }
    history.push((cfg.generations, snapshot(&archive)));
    Ok(MoeaResult {
        population,
        front: archive,
        history,
        evaluations,
    })
}
