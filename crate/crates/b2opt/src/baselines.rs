//! Classical comparators: DE/rand/1/bin, (mu,lambda)-ES, the canonical GA
//! operator set (uniform crossover, random-reset mutation, binary
//! tournament), bounded polynomial mutation, and uniform random search.
//!
//! Every operator charges its exact evaluation count to the shared
//! [`EvalCounter`] and is deterministic under a fixed RNG.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::Matrix;
use crate::model::Population;
use crate::objectives::{init_population, Bounds, EvalCounter, ObjectiveInstance};
use crate::Error;

// ── differential evolution ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DeConfig {
    /// Differential weight F.
    pub scale: f64,
    /// Per-coordinate crossover probability.
    pub crossover: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig { scale: 0.5, crossover: 0.5 }
    }
}

/// One synchronous DE/rand/1/bin generation: per row, a mutant from three
/// distinct other rows, binomial crossover with a guaranteed coordinate,
/// clamping, and greedy replacement (ties accept the trial). Charges `n`
/// evaluations.
pub fn de_step<R: Rng>(
    pop: &mut Population,
    config: &DeConfig,
    instance: &ObjectiveInstance,
    counter: &mut EvalCounter,
    rng: &mut R,
) -> Result<(), Error> {
    let n = pop.n();
    let d = pop.dim();
    if n < 4 {
        return Err(Error::InvalidConfig(format!("DE needs a population of at least 4, got {n}")));
    }
    let bounds = instance.bounds();
    let parents = pop.x().clone();

    let mut trials = Matrix::zeros(n, d);
    for i in 0..n {
        let mut pick = || loop {
            let r = rng.random_range(0..n);
            if r != i {
                return r;
            }
        };
        let r1 = pick();
        let r2 = loop {
            let r = pick();
            if r != r1 {
                break r;
            }
        };
        let r3 = loop {
            let r = pick();
            if r != r1 && r != r2 {
                break r;
            }
        };
        let j_rand = rng.random_range(0..d);
        let trial = trials.row_mut(i);
        for j in 0..d {
            let mutant = parents.get(r1, j) + config.scale * (parents.get(r2, j) - parents.get(r3, j));
            let take_mutant = rng.random_range(0.0..1.0) < config.crossover || j == j_rand;
            trial[j] = if take_mutant { mutant } else { parents.get(i, j) };
        }
        bounds.clamp_row(trial);
    }

    let trial_fitness = instance.evaluate(&trials, counter)?;
    for i in 0..n {
        if trial_fitness[i] <= pop.fitness()[i] {
            let row = trials.row(i).to_vec();
            pop.replace_row(i, &row, trial_fitness[i]);
        }
    }
    Ok(())
}

// ── evolution strategy ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EsConfig {
    /// mu: number of surviving parents.
    pub parents: usize,
    /// lambda: offspring per generation (also the population size).
    pub offspring: usize,
    /// Isotropic step as a fraction of each coordinate's box width.
    pub sigma_factor: f64,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig { parents: 50, offspring: 100, sigma_factor: 0.1 }
    }
}

/// One (mu, lambda)-ES generation: lambda offspring are Gaussian
/// perturbations of parents drawn uniformly from the mu best rows; comma
/// selection keeps offspring only. The population is replaced by the
/// sorted offspring. Charges `lambda` evaluations.
pub fn es_step<R: Rng>(
    pop: &mut Population,
    config: &EsConfig,
    instance: &ObjectiveInstance,
    counter: &mut EvalCounter,
    rng: &mut R,
) -> Result<(), Error> {
    if config.parents == 0 || config.parents > config.offspring {
        return Err(Error::InvalidConfig(format!(
            "ES needs 1 <= mu <= lambda, got mu={} lambda={}",
            config.parents, config.offspring
        )));
    }
    let d = pop.dim();
    let bounds = instance.bounds();
    let order = crate::model::argsort_stable(pop.fitness())?;
    let elite: Vec<usize> = order.into_iter().take(config.parents).collect();

    let sigmas: Vec<f64> = bounds
        .lower()
        .iter()
        .zip(bounds.upper())
        .map(|(l, u)| config.sigma_factor * (u - l))
        .collect();

    let mut offspring = Matrix::zeros(config.offspring, d);
    for k in 0..config.offspring {
        let parent = elite[rng.random_range(0..config.parents)];
        let row = offspring.row_mut(k);
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            row[j] = pop.x().get(parent, j) + sigmas[j] * noise;
        }
        bounds.clamp_row(row);
    }
    let fitness = instance.evaluate(&offspring, counter)?;
    let mut next = Population::from_parts(offspring, fitness)?;
    next.sort()?;
    *pop = next;
    Ok(())
}

// ── canonical GA operators ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GaConfig {
    /// Uniform-crossover donor probability per coordinate.
    pub crossover: f64,
    /// Random-reset mutation probability per coordinate.
    pub mutation: f64,
    /// Polynomial-mutation distribution index (used by the comparison
    /// operator, not by the canonical reset mutation).
    pub eta: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig { crossover: 0.5, mutation: 0.1, eta: 20.0 }
    }
}

/// Uniform crossover over random disjoint pairs: each child coordinate
/// comes from its partner with probability `cr`. An unpaired last row
/// passes through unchanged.
pub fn uniform_crossover<R: Rng>(x: &Matrix, cr: f64, rng: &mut R) -> Matrix {
    let n = x.rows();
    let d = x.cols();
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates pairing.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut out = x.clone();
    for pair in idx.chunks(2) {
        if let [a, b] = *pair {
            for k in 0..d {
                if rng.random_range(0.0..1.0) < cr {
                    out.set(a, k, x.get(b, k));
                }
            }
            for k in 0..d {
                if rng.random_range(0.0..1.0) < cr {
                    out.set(b, k, x.get(a, k));
                }
            }
        }
    }
    out
}

/// Random-reset mutation: with probability `mr` a coordinate is redrawn
/// uniformly from its box interval.
pub fn random_reset_mutation<R: Rng>(x: &Matrix, mr: f64, bounds: &Bounds, rng: &mut R) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            if rng.random_range(0.0..1.0) < mr {
                *v = rng.random_range(bounds.lower()[j]..bounds.upper()[j]);
            }
        }
    }
    out
}

/// Winner of one binary tournament: `true` selects the first entrant
/// (strictly lower fitness); ties go to the second.
pub fn tournament_pick(f_first: f64, f_second: f64) -> bool {
    f_first < f_second
}

/// Binary tournament over a pool: `n_out` slots, each comparing two
/// uniformly drawn pool members.
pub fn binary_tournament<R: Rng>(
    pool_x: &Matrix,
    pool_f: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Result<Population, Error> {
    let total = pool_x.rows();
    let mut out = Matrix::zeros(n_out, pool_x.cols());
    let mut fitness = Vec::with_capacity(n_out);
    for slot in 0..n_out {
        let i = rng.random_range(0..total);
        let k = rng.random_range(0..total);
        let winner = if tournament_pick(pool_f[i], pool_f[k]) { i } else { k };
        out.row_mut(slot).copy_from_slice(pool_x.row(winner));
        fitness.push(pool_f[winner]);
    }
    Population::from_parts(out, fitness)
}

/// The preliminary GA generation: uniform crossover, random-reset
/// mutation, then binary tournament over parents plus offspring. Charges
/// `n` evaluations (the offspring).
pub fn ga_operators<R: Rng>(
    pop: &Population,
    config: &GaConfig,
    instance: &ObjectiveInstance,
    counter: &mut EvalCounter,
    rng: &mut R,
) -> Result<Population, Error> {
    let crossed = uniform_crossover(pop.x(), config.crossover, rng);
    let mutated = random_reset_mutation(&crossed, config.mutation, instance.bounds(), rng);
    let offspring_fitness = instance.evaluate(&mutated, counter)?;

    // Union of parents and offspring.
    let n = pop.n();
    let d = pop.dim();
    let mut pool = Matrix::zeros(2 * n, d);
    for i in 0..n {
        pool.row_mut(i).copy_from_slice(pop.x().row(i));
        pool.row_mut(n + i).copy_from_slice(mutated.row(i));
    }
    let mut pool_f = pop.fitness().to_vec();
    pool_f.extend_from_slice(&offspring_fitness);
    binary_tournament(&pool, &pool_f, n, rng)
}

/// Bounded polynomial mutation with distribution index `eta`, applied per
/// coordinate with probability `mr`. Outputs always stay inside bounds.
pub fn polynomial_mutation<R: Rng>(x: &Matrix, eta: f64, mr: f64, bounds: &Bounds, rng: &mut R) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (j, gene) in row.iter_mut().enumerate() {
            if rng.random_range(0.0..1.0) >= mr {
                continue;
            }
            let (lo, hi) = (bounds.lower()[j], bounds.upper()[j]);
            let range = hi - lo;
            if range <= 0.0 {
                continue;
            }
            let delta1 = (*gene - lo) / range;
            let delta2 = (hi - *gene) / range;
            let u: f64 = rng.random_range(0.0..1.0);
            let delta_q = if u <= 0.5 {
                let val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - delta1).powf(eta + 1.0);
                val.powf(1.0 / (eta + 1.0)) - 1.0
            } else {
                let val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - delta2).powf(eta + 1.0);
                1.0 - val.powf(1.0 / (eta + 1.0))
            };
            *gene = (*gene + delta_q * range).clamp(lo, hi);
        }
    }
    out
}

// ── random search ───────────────────────────────────────────────────

/// Uniform random search over the box. Spends exactly `budget`
/// evaluations and returns the best solution, its fitness, and the
/// non-increasing best-so-far curve.
pub fn random_search<R: Rng>(
    bounds: &Bounds,
    budget: usize,
    instance: &ObjectiveInstance,
    counter: &mut EvalCounter,
    rng: &mut R,
) -> Result<(Vec<f64>, f64, Vec<f64>), Error> {
    if budget == 0 {
        return Err(Error::InvalidConfig("random search needs a budget of at least 1".into()));
    }
    let mut best_x = Vec::new();
    let mut best_f = f64::INFINITY;
    let mut curve = Vec::with_capacity(budget);
    for _ in 0..budget {
        let x = init_population(bounds, 1, rng);
        let f = instance.evaluate(&x, counter)?[0];
        if f < best_f {
            best_f = f;
            best_x = x.row(0).to_vec();
        }
        curve.push(best_f);
    }
    Ok((best_x, best_f, curve))
}
