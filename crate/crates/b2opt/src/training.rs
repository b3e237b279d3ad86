//! Training: normalized improvement loss, batched objective, Adam with
//! gradient clipping and step-decayed learning rate, and the epoch loop.
//!
//! Each epoch draws fresh shifted objective instances and a fresh minibatch
//! of `K` random populations, pushes every population through the model on
//! its own tape, and applies one Adam update to the mean over functions of
//! the negated mean improvement. Per-population gradients accumulate in a
//! fixed (instance-major, then population) order, so a fixed seed gives a
//! bit-identical loss stream.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::model::{sort_on_tape, B2Opt, TapedPopulation};
use crate::objectives::{
    init_population, sample_arm_targets, ArmMode, ArmTask, Bounds, EvalCounter, FunctionId, ObjectiveInstance,
};
use crate::tape::{NodeId, ParamSet, Tape};
use crate::Error;

/// Guard for the improvement-loss denominator.
const DENOM_EPS: f64 = 1e-8;

// ── improvement loss ────────────────────────────────────────────────

/// Normalized mean-fitness improvement of the output population over the
/// input population:
/// `(mean(f_in) - mean(f_out)) / max(|mean(f_in)|, 1e-8)`.
///
/// Positive when the population improved; invariant under positive scaling
/// of the objective.
pub fn improvement_loss(fitness_in: &[f64], fitness_out: &[f64]) -> Result<f64, Error> {
    if fitness_in.iter().chain(fitness_out).any(|f| !f.is_finite()) {
        return Err(Error::NonFinite { context: "improvement_loss input".into() });
    }
    let mean_in = fitness_in.iter().sum::<f64>() / fitness_in.len() as f64;
    let mean_out = fitness_out.iter().sum::<f64>() / fitness_out.len() as f64;
    Ok((mean_in - mean_out) / mean_in.abs().max(DENOM_EPS))
}

/// On-tape version of [`improvement_loss`], differentiable with respect to
/// the output fitness. The denominator is a constant of the op: the input
/// population never depends on model parameters during training.
pub fn improvement_loss_on_tape(tape: &mut Tape, fitness_in: NodeId, fitness_out: NodeId) -> Result<NodeId, Error> {
    let mean_in = tape.mean(fitness_in)?;
    let mean_out = tape.mean(fitness_out)?;
    let numerator = tape.sub(mean_in, mean_out)?;
    let denom_value = tape.scalar_value(mean_in)?.abs().max(DENOM_EPS);
    let denom = tape.scalar(denom_value)?;
    tape.div(numerator, denom)
}

/// Negated mean over already-built improvement-loss nodes.
fn negated_mean(tape: &mut Tape, losses: &[NodeId]) -> Result<NodeId, Error> {
    let mut sum = losses[0];
    for l in &losses[1..] {
        sum = tape.add(sum, *l)?;
    }
    tape.scale(sum, -1.0 / losses.len() as f64)
}

/// Builds the batch objective on the tape: runs the model over every
/// population and returns the node for `-(1/K) Σ improvement`, together
/// with the individual improvement values.
pub fn build_batch_loss(
    tape: &mut Tape,
    model: &B2Opt,
    params: &ParamSet,
    populations: &[Matrix],
    instance: &ObjectiveInstance,
    counter: &mut EvalCounter,
) -> Result<(NodeId, Vec<f64>), Error> {
    let mut losses = Vec::with_capacity(populations.len());
    let mut values = Vec::with_capacity(populations.len());
    for pop in populations {
        let x0 = tape.constant(pop.clone())?;
        let f0 = instance.evaluate_on_tape(tape, x0, counter)?;
        let (sorted0, _) = sort_on_tape(tape, &TapedPopulation { x: x0, fitness: f0 })?;
        let out = model.forward_on_tape(tape, params, sorted0, instance, counter, None, None)?;
        let l = improvement_loss_on_tape(tape, sorted0.fitness, out.fitness)?;
        values.push(tape.scalar_value(l)?);
        losses.push(l);
    }
    let loss = negated_mean(tape, &losses)?;
    Ok((loss, values))
}

/// Value of the batch objective for a frozen model.
pub fn batch_loss(
    model: &B2Opt,
    populations: &[Matrix],
    instance: &ObjectiveInstance,
    counter: &mut EvalCounter,
) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let (loss, _) = build_batch_loss(&mut tape, model, model.params(), populations, instance, counter)?;
    tape.scalar_value(loss)
}

// ── Adam ────────────────────────────────────────────────────────────

/// Bias-corrected Adam moment accumulators, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zero_like = |p: &ParamSet| {
            p.ids()
                .map(|id| {
                    let (r, c) = p.value(id).shape();
                    Matrix::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        AdamState { first: zero_like(params), second: zero_like(params), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the gradients currently held by `params`.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (idx, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let grad = params.grad(id).clone();
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        for ((g, m), v) in grad.as_slice().iter().zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        }
        let value = params.value_mut(id);
        for ((p, m), v) in value.as_mut_slice().iter_mut().zip(m.as_slice()).zip(v.as_slice()) {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}

/// Scales all gradients so their global 2-norm is at most `clip_norm`.
/// Returns (pre-clip norm, post-clip norm).
pub fn clip_gradients(params: &mut ParamSet, clip_norm: f64) -> (f64, f64) {
    let pre = params.grad_norm();
    if pre > clip_norm {
        params.scale_grads(clip_norm / pre);
    }
    (pre, params.grad_norm())
}

// ── configuration ───────────────────────────────────────────────────

/// What family of objectives an epoch draws its instances from.
#[derive(Debug, Clone)]
pub enum TrainTask {
    /// Shifted synthetic functions; one fresh instance per id per epoch.
    Functions { ids: Vec<FunctionId> },
    /// Planar arm targets drawn from a fixed pool.
    Arm {
        mode: ArmMode,
        segments: usize,
        /// Pool targets are sampled from the disk of this radius.
        r_train: f64,
        /// Size of the fixed target pool.
        pool_size: usize,
        /// Targets (= instances) per epoch.
        targets_per_epoch: usize,
        /// The working subset is redrawn every this many epochs.
        resample_every: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    /// K: populations per minibatch.
    pub batch_populations: usize,
    pub clip_norm: f64,
    pub task: TrainTask,
    /// Decision dimension for function tasks (the arm dictates its own).
    pub d: usize,
    /// Population size; must match the model.
    pub n: usize,
    pub seed: u64,
    /// Dataset-size knob: draw all shifts from a pre-sampled pool of this
    /// many instances per function instead of fresh ones every epoch.
    pub shift_pool: Option<usize>,
}

impl TrainConfig {
    pub fn new(task: TrainTask, d: usize, n: usize, seed: u64) -> Self {
        TrainConfig {
            lr0: 0.01,
            lr_decay: 0.9,
            lr_decay_every: 100,
            epochs: 1000,
            batch_populations: 16,
            clip_norm: 10.0,
            task,
            d,
            n,
            seed,
            shift_pool: None,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_populations == 0 {
            return Err(Error::InvalidConfig("batch_populations (K) must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        match &self.task {
            TrainTask::Functions { ids } => {
                if ids.is_empty() {
                    return Err(Error::InvalidConfig("no training functions configured".into()));
                }
                for id in ids {
                    if !id.differentiable() {
                        return Err(Error::InvalidConfig(format!("{id} is not differentiable; cannot train on it")));
                    }
                }
            }
            TrainTask::Arm { pool_size, targets_per_epoch, resample_every, segments, .. } => {
                if *pool_size == 0 || *targets_per_epoch == 0 || *resample_every == 0 || *segments == 0 {
                    return Err(Error::InvalidConfig("arm task sizes must all be positive".into()));
                }
                if targets_per_epoch > pool_size {
                    return Err(Error::InvalidConfig("targets_per_epoch cannot exceed pool_size".into()));
                }
            }
        }
        Ok(())
    }

    /// Decision dimension implied by the task.
    pub fn dim(&self) -> usize {
        match &self.task {
            TrainTask::Functions { .. } => self.d,
            TrainTask::Arm { mode, segments, .. } => match mode {
                ArmMode::Simple => *segments,
                ArmMode::Complex => 2 * segments,
            },
        }
    }
}

/// Step-decayed learning rate for a 1-indexed epoch.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch - 1) / config.lr_decay_every;
    config.lr0 * config.lr_decay.powi(steps as i32)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub function: String,
    /// Mean improvement over the minibatch for this function.
    pub l_mean: f64,
    /// Negated mean improvement (the minimized quantity).
    pub l_omega: f64,
    /// Global gradient 2-norm before clipping (per epoch).
    pub grad_pre: f64,
    /// Global gradient 2-norm after clipping.
    pub grad_post: f64,
    pub lr: f64,
}

// ── the loop ────────────────────────────────────────────────────────

/// Trains the model in place. Per epoch: fresh instances, a fresh
/// minibatch, one clipped Adam update on the mean objective over all
/// (instance, population) pairs. Emits one [`LossRecord`] per instance per
/// epoch through `sink` and returns the full log.
pub fn train(
    model: &mut B2Opt,
    config: &TrainConfig,
    mut sink: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>, Error> {
    config.validate()?;
    let d = config.dim();
    if model.dim() != d {
        return Err(Error::Mismatch { what: "model dimension vs training task", expected: d, got: model.dim() });
    }
    if model.n() != config.n {
        return Err(Error::Mismatch { what: "model population size vs training config", expected: config.n, got: model.n() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params());
    let mut records = Vec::new();

    // Fixed pools drawn up front so the per-epoch stream is stable.
    let shift_pools: Option<Vec<Vec<ObjectiveInstance>>> = match (&config.task, config.shift_pool) {
        (TrainTask::Functions { ids }, Some(size)) => Some(
            ids.iter()
                .map(|id| (0..size).map(|_| ObjectiveInstance::sample_shifted(*id, d, &mut rng)).collect())
                .collect(),
        ),
        _ => None,
    };
    let arm_pool: Option<Vec<[f64; 2]>> = match &config.task {
        TrainTask::Arm { r_train, pool_size, .. } => Some(sample_arm_targets(*r_train, *pool_size, &mut rng)),
        _ => None,
    };
    let mut arm_working: Vec<[f64; 2]> = Vec::new();

    for epoch in 1..=config.epochs {
        let lr = learning_rate(config, epoch);

        // Instances for this epoch.
        let instances: Vec<ObjectiveInstance> = match &config.task {
            TrainTask::Functions { ids } => ids
                .iter()
                .enumerate()
                .map(|(f, id)| match &shift_pools {
                    Some(pools) => {
                        let pick = rng.random_range(0..pools[f].len());
                        pools[f][pick].clone()
                    }
                    None => ObjectiveInstance::sample_shifted(*id, d, &mut rng),
                })
                .collect(),
            TrainTask::Arm { mode, segments, targets_per_epoch, resample_every, .. } => {
                if (epoch - 1) % resample_every == 0 {
                    let pool = arm_pool.as_ref().expect("arm pool exists for arm task");
                    arm_working = (0..*targets_per_epoch)
                        .map(|_| pool[rng.random_range(0..pool.len())])
                        .collect();
                }
                arm_working
                    .iter()
                    .map(|target| {
                        let mut task = ArmTask::new(*mode);
                        task.segments = *segments;
                        ObjectiveInstance::arm(task, *target)
                    })
                    .collect()
            }
        };

        let bounds: &Bounds = instances[0].bounds();
        for inst in &instances[1..] {
            if inst.bounds() != bounds {
                return Err(Error::InvalidConfig(
                    "training instances must share identical bounds for a shared minibatch".into(),
                ));
            }
        }

        // Step 1: one minibatch of K populations shared across instances.
        let minibatch: Vec<Matrix> =
            (0..config.batch_populations).map(|_| init_population(bounds, config.n, &mut rng)).collect();

        // Steps 2-3 collapsed: one update on the mean over all
        // (instance, population) pairs.
        let m = instances.len();
        let k = config.batch_populations;
        let share = -1.0 / (m * k) as f64;
        model.params_mut().zero_grads();
        let mut per_instance_mean = Vec::with_capacity(m);
        let mut scratch = EvalCounter::new();
        for instance in &instances {
            let mut sum = 0.0;
            for pop in &minibatch {
                let mut tape = Tape::new();
                let x0 = tape.constant(pop.clone())?;
                let f0 = instance.evaluate_on_tape(&mut tape, x0, &mut scratch)?;
                let (sorted0, _) = sort_on_tape(&mut tape, &TapedPopulation { x: x0, fitness: f0 })?;
                let out = model
                    .forward_on_tape(&mut tape, model.params(), sorted0, instance, &mut scratch, None, None)?;
                let l = improvement_loss_on_tape(&mut tape, sorted0.fitness, out.fitness)?;
                let value = tape.scalar_value(l)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!(
                            "training loss at epoch {epoch}, function {}, seed {}",
                            instance.label(),
                            config.seed
                        ),
                    });
                }
                sum += value;
                let contribution = tape.scale(l, share)?;
                tape.backward(contribution, model.params_mut())?;
            }
            per_instance_mean.push(sum / k as f64);
        }

        let (grad_pre, grad_post) = clip_gradients(model.params_mut(), config.clip_norm);
        adam_step(model.params_mut(), &mut adam, lr);

        for (instance, l_mean) in instances.iter().zip(&per_instance_mean) {
            let record = LossRecord {
                epoch,
                function: instance.label(),
                l_mean: *l_mean,
                l_omega: -l_mean,
                grad_pre,
                grad_post,
                lr,
            };
            sink(&record);
            records.push(record);
        }
    }
    Ok(records)
}
