//! Uniform run machinery: one entry point executes any algorithm on any
//! task for one seed, emitting a per-step curve and the exact evaluation
//! count. Grids fan seeds out across a thread pool and reassemble results
//! in grid order.

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use b2opt::baselines::{de_step, es_step, ga_operators, DeConfig, EsConfig, GaConfig};
use b2opt::model::{B2Opt, Population};
use b2opt::objectives::{init_population, ArmTask, EvalCounter, FunctionId, ObjectiveInstance};
use b2opt::split_seed;

/// What a single run optimizes. Function tasks draw a fresh shift from the
/// run's seed; arm tasks either carry an explicit target or draw one from
/// the configured disk.
#[derive(Debug, Clone)]
pub enum TaskTemplate {
    Function {
        id: FunctionId,
        d: usize,
        /// Optional uniform box override applied to every coordinate.
        bounds: Option<(f64, f64)>,
    },
    ArmFixed { task: ArmTask, target: [f64; 2] },
    ArmSampled { task: ArmTask, r_max: f64 },
}

impl TaskTemplate {
    pub fn label(&self) -> String {
        match self {
            TaskTemplate::Function { id, .. } => id.to_string(),
            TaskTemplate::ArmFixed { task, .. } | TaskTemplate::ArmSampled { task, .. } => {
                format!("ARM-{}", task.mode.label())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TaskTemplate::Function { d, .. } => *d,
            TaskTemplate::ArmFixed { task, .. } | TaskTemplate::ArmSampled { task, .. } => task.dim(),
        }
    }

    fn instantiate(&self, rng: &mut ChaCha8Rng) -> Result<ObjectiveInstance> {
        Ok(match self {
            TaskTemplate::Function { id, d, bounds } => {
                let instance = ObjectiveInstance::sample_shifted(*id, *d, rng);
                match bounds {
                    Some((lo, hi)) => instance.with_uniform_bounds(*lo, *hi).map_err(|e| anyhow::anyhow!("{e}"))?,
                    None => instance,
                }
            }
            TaskTemplate::ArmFixed { task, target } => ObjectiveInstance::arm(task.clone(), *target),
            TaskTemplate::ArmSampled { task, r_max } => {
                let target = b2opt::objectives::sample_arm_targets(*r_max, 1, rng)[0];
                ObjectiveInstance::arm(task.clone(), target)
            }
        })
    }
}

/// Algorithm selection for the runner.
pub enum Algo<'a> {
    B2Opt(&'a B2Opt),
    De(DeConfig),
    Es(EsConfig),
    Ga(GaConfig),
    Random,
}

impl Algo<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Algo::B2Opt(_) => "b2opt",
            Algo::De(_) => "de",
            Algo::Es(_) => "es",
            Algo::Ga(_) => "ga",
            Algo::Random => "random",
        }
    }
}

/// One completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    /// Best-so-far after 0, 1, ..., steps iterations (monotone).
    pub curve_best: Vec<f64>,
    /// Population mean fitness per step (sample-chunk mean for random
    /// search).
    pub curve_mean: Vec<f64>,
    pub final_best: f64,
    pub evals: u64,
    pub wall_ms: u128,
}

/// Runs one algorithm once. `steps` bounds the number of iterations for
/// baselines (the model's depth fixes its own); `max_evals > 0` caps the
/// total evaluation budget.
pub fn run_single(
    algo: &Algo,
    template: &TaskTemplate,
    n: usize,
    steps: usize,
    max_evals: u64,
    seed: u64,
) -> Result<RunOutcome> {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instance = template.instantiate(&mut rng)?;
    let mut counter = EvalCounter::new();

    let mut curve_best = Vec::new();
    let mut curve_mean = Vec::new();

    match algo {
        Algo::B2Opt(model) => {
            if model.n() != n {
                bail!("checkpoint population size {} does not match run n {}", model.n(), n);
            }
            if model.dim() != instance.dim() {
                bail!("checkpoint dimension {} does not match task dimension {}", model.dim(), instance.dim());
            }
            let budget = (model.t() as u64 + 1) * n as u64;
            if max_evals > 0 && budget > max_evals {
                bail!("model needs {budget} evaluations but max_evals is {max_evals}");
            }
            let x0 = init_population(instance.bounds(), n, &mut rng);
            let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter)?;
            let (_, record) = model.run(&pop0, &instance, &mut counter)?;
            curve_best = record.best;
            curve_mean = record.mean;
        }
        Algo::De(config) => {
            let x0 = init_population(instance.bounds(), n, &mut rng);
            let mut pop = Population::evaluated(x0, &instance, &mut counter)?;
            let mut best = pop.best();
            curve_best.push(best);
            curve_mean.push(pop.mean_fitness());
            for _ in 0..steps {
                if max_evals > 0 && counter.count() + n as u64 > max_evals {
                    break;
                }
                de_step(&mut pop, config, &instance, &mut counter, &mut rng)?;
                best = best.min(pop.best());
                curve_best.push(best);
                curve_mean.push(pop.mean_fitness());
            }
        }
        Algo::Es(config) => {
            let x0 = init_population(instance.bounds(), n, &mut rng);
            let mut pop = Population::evaluated(x0, &instance, &mut counter)?;
            let mut best = pop.best();
            curve_best.push(best);
            curve_mean.push(pop.mean_fitness());
            for _ in 0..steps {
                if max_evals > 0 && counter.count() + config.offspring as u64 > max_evals {
                    break;
                }
                es_step(&mut pop, config, &instance, &mut counter, &mut rng)?;
                best = best.min(pop.best());
                curve_best.push(best);
                curve_mean.push(pop.mean_fitness());
            }
        }
        Algo::Ga(config) => {
            let x0 = init_population(instance.bounds(), n, &mut rng);
            let mut pop = Population::evaluated(x0, &instance, &mut counter)?;
            let mut best = pop.best();
            curve_best.push(best);
            curve_mean.push(pop.mean_fitness());
            for _ in 0..steps {
                if max_evals > 0 && counter.count() + n as u64 > max_evals {
                    break;
                }
                pop = ga_operators(&pop, config, &instance, &mut counter, &mut rng)?;
                best = best.min(pop.best());
                curve_best.push(best);
                curve_mean.push(pop.mean_fitness());
            }
        }
        Algo::Random => {
            // Generation-structured uniform sampling keeps curves
            // comparable: n draws per step, steps + 1 chunks total.
            let total = if max_evals > 0 {
                max_evals.min((steps as u64 + 1) * n as u64)
            } else {
                (steps as u64 + 1) * n as u64
            };
            let gens = (total / n as u64).max(1);
            let mut best = f64::INFINITY;
            for _ in 0..gens {
                let x = init_population(instance.bounds(), n, &mut rng);
                let pop = Population::evaluated(x, &instance, &mut counter)?;
                best = best.min(pop.best());
                curve_best.push(best);
                curve_mean.push(pop.mean_fitness());
            }
        }
    }

    let final_best = curve_best.last().copied().context("empty run curve")?;
    Ok(RunOutcome {
        seed,
        curve_best,
        curve_mean,
        final_best,
        evals: counter.count(),
        wall_ms: start.elapsed().as_millis(),
    })
}

/// Per-run seeds: a task-level stream derived from the master seed, then
/// one split per repetition. Identical across algorithms so comparisons
/// share instances and initial populations.
pub fn seeds_for(master: u64, task_index: u64, count: usize) -> Vec<u64> {
    let task_stream = split_seed(master, task_index);
    (0..count).map(|i| split_seed(task_stream, i as u64)).collect()
}

/// Mean and population standard deviation of final-best values.
#[derive(Debug, Clone, Copy)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    Summary { mean, std: var.sqrt(), count }
}
