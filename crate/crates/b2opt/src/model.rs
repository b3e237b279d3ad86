//! The block-stack optimizer: attention-based crossover, feed-forward
//! mutation, and residual pairwise selection, applied to a sorted
//! population `t` times.
//!
//! Every forward pass is recorded on a [`Tape`], whether or not gradients
//! are needed, so training and inference share one code path. Objective
//! values of non-differentiable functions enter the tape as constants.
//!
//! A model is immutable during inference and may be shared across threads
//! for concurrent independent runs; training mutates parameters via the
//! owning [`ParamSet`] and is single-writer.

use std::io::Read;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::matrix::Matrix;
use crate::objectives::{EvalCounter, ObjectiveInstance};
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::Error;

// ── populations ─────────────────────────────────────────────────────

/// A candidate-solution matrix paired with fresh fitness values.
///
/// `fitness[i]` always belongs to row `i`; any row change goes through
/// methods that re-establish that pairing.
#[derive(Debug, Clone)]
pub struct Population {
    x: Matrix,
    fitness: Vec<f64>,
    sorted: bool,
}

impl Population {
    /// Evaluates `x` under the objective (charging `n` evaluations).
    pub fn evaluated(x: Matrix, instance: &ObjectiveInstance, counter: &mut EvalCounter) -> Result<Self, Error> {
        let fitness = instance.evaluate(&x, counter)?;
        Ok(Population { x, fitness, sorted: false })
    }

    /// Evaluates and sorts in one step.
    pub fn evaluated_sorted(x: Matrix, instance: &ObjectiveInstance, counter: &mut EvalCounter) -> Result<Self, Error> {
        let mut pop = Self::evaluated(x, instance, counter)?;
        pop.sort()?;
        Ok(pop)
    }

    /// Builds a population from existing parts; the caller vouches that
    /// `fitness[i]` matches row `i`.
    pub fn from_parts(x: Matrix, fitness: Vec<f64>) -> Result<Self, Error> {
        if fitness.len() != x.rows() {
            return Err(Error::Mismatch { what: "fitness length", expected: x.rows(), got: fitness.len() });
        }
        Ok(Population { x, fitness, sorted: false })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn fitness(&self) -> &[f64] {
        &self.fitness
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    pub fn best(&self) -> f64 {
        self.fitness.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_fitness(&self) -> f64 {
        self.fitness.iter().sum::<f64>() / self.fitness.len() as f64
    }

    /// Replaces row `i` together with its fitness; clears the sorted flag.
    pub fn replace_row(&mut self, i: usize, row: &[f64], fitness: f64) {
        self.x.row_mut(i).copy_from_slice(row);
        self.fitness[i] = fitness;
        self.sorted = false;
    }

    /// Sorts rows into non-descending fitness order (stable: ties keep
    /// their original relative order) and returns the permutation, where
    /// `perm[k]` is the original index of the row now at rank `k`.
    pub fn sort(&mut self) -> Result<Vec<usize>, Error> {
        let perm = argsort_stable(&self.fitness)?;
        let mut x = Matrix::zeros(self.x.rows(), self.x.cols());
        let mut fitness = Vec::with_capacity(self.fitness.len());
        for (k, &src) in perm.iter().enumerate() {
            x.row_mut(k).copy_from_slice(self.x.row(src));
            fitness.push(self.fitness[src]);
        }
        self.x = x;
        self.fitness = fitness;
        self.sorted = true;
        Ok(perm)
    }
}

/// Stable argsort by fitness; NaN anywhere is an error naming the row.
pub fn argsort_stable(fitness: &[f64]) -> Result<Vec<usize>, Error> {
    if let Some(row) = fitness.iter().position(|f| f.is_nan()) {
        return Err(Error::NanFitness { row });
    }
    let mut idx: Vec<usize> = (0..fitness.len()).collect();
    idx.sort_by(|&a, &b| fitness[a].partial_cmp(&fitness[b]).expect("NaN already rejected"));
    Ok(idx)
}

/// Min-max normalization to [0, 1]; a constant vector maps to all zeros.
pub fn normalize_fitness(fitness: &[f64]) -> Result<Vec<f64>, Error> {
    if fitness.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite { context: "normalize_fitness input".into() });
    }
    let min = fitness.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = fitness.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; fitness.len()]);
    }
    let span = max - min;
    Ok(fitness.iter().map(|f| (f - min) / span).collect())
}

// ── parameters ──────────────────────────────────────────────────────

/// Crossover: a learned rank-based mixing matrix plus fitness attention.
#[derive(Debug, Clone, Copy)]
pub struct CrossoverParams {
    /// n x n mixing matrix applied to the ranked population.
    pub mix: ParamId,
    /// 1 x d_k query projection of the normalized fitness column.
    pub w_query: ParamId,
    /// 1 x d_k key projection of the normalized fitness column.
    pub w_key: ParamId,
    /// n x 1 gain on the mixing term.
    pub gain_mix: ParamId,
    /// n x 1 gain on the fitness-attention term.
    pub gain_attn: ParamId,
}

/// Mutation: a two-layer feed-forward map applied row-wise.
#[derive(Debug, Clone, Copy)]
pub struct MutationParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Residual selection weights for input, crossover, and mutation terms.
#[derive(Debug, Clone, Copy)]
pub struct SelectionParams {
    pub w_input: ParamId,
    pub w_cross: ParamId,
    pub w_mut: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub crossover: CrossoverParams,
    pub mutation: MutationParams,
    pub selection: SelectionParams,
}

/// Which block stage to bypass, for ablation runs. At most one flag is set
/// in an ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Crossover output becomes the input population.
    pub disable_crossover: bool,
    /// Mutation output becomes the crossover output.
    pub disable_mutation: bool,
    /// Drop the input term from the residual candidate.
    pub disable_residual: bool,
    /// Skip pairwise selection; the sorted candidate replaces the population.
    pub disable_selection: bool,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn active(&self) -> usize {
        [self.disable_crossover, self.disable_mutation, self.disable_residual, self.disable_selection]
            .iter()
            .filter(|b| **b)
            .count()
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Population size the model is built for (the mixing matrix is n x n).
    pub n: usize,
    /// Decision-vector dimension.
    pub d: usize,
    /// Number of stacked blocks.
    pub t: usize,
    /// Fitness-attention projection width.
    pub d_k: usize,
    /// Mutation hidden width; 0 picks the default 2d.
    pub hidden: usize,
    pub weight_sharing: bool,
    pub ablation: Ablation,
    /// Uniform init noise half-width. Zero gives the exact identity model.
    pub init_noise: f64,
}

impl ModelConfig {
    pub fn new(n: usize, d: usize, t: usize, weight_sharing: bool) -> Self {
        ModelConfig { n, d, t, d_k: 16, hidden: 0, weight_sharing, ablation: Ablation::none(), init_noise: 0.01 }
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            2 * self.d
        } else {
            self.hidden
        }
    }

    fn validate(&self) -> Result<(), Error> {
        if self.n < 2 || self.d == 0 || self.d_k == 0 {
            return Err(Error::InvalidConfig(format!(
                "model needs n >= 2, d >= 1, d_k >= 1 (got n={}, d={}, d_k={})",
                self.n, self.d, self.d_k
            )));
        }
        Ok(())
    }
}

enum InitKind {
    IdentityPlusNoise,
    OnePlusNoise,
    Noise,
}

/// One entry per stored tensor, in storage order.
fn tensor_layout(config: &ModelConfig) -> Vec<(String, usize, usize, InitKind)> {
    let (n, d) = (config.n, config.d);
    let h = config.hidden_width();
    let stored = if config.weight_sharing { 1 } else { config.t };
    let mut layout = Vec::new();
    for b in 0..stored {
        let p = |field: &str| format!("block{b}.{field}");
        layout.push((p("crossover.mix"), n, n, InitKind::IdentityPlusNoise));
        layout.push((p("crossover.w_query"), 1, config.d_k, InitKind::Noise));
        layout.push((p("crossover.w_key"), 1, config.d_k, InitKind::Noise));
        layout.push((p("crossover.gain_mix"), n, 1, InitKind::OnePlusNoise));
        layout.push((p("crossover.gain_attn"), n, 1, InitKind::Noise));
        layout.push((p("mutation.w1"), d, h, InitKind::Noise));
        layout.push((p("mutation.b1"), 1, h, InitKind::Noise));
        layout.push((p("mutation.w2"), h, d, InitKind::Noise));
        layout.push((p("mutation.b2"), 1, d, InitKind::Noise));
        layout.push((p("selection.w_input"), n, 1, InitKind::OnePlusNoise));
        layout.push((p("selection.w_cross"), n, 1, InitKind::Noise));
        layout.push((p("selection.w_mut"), n, 1, InitKind::Noise));
    }
    layout
}

const TENSORS_PER_BLOCK: usize = 12;

// ── the model ───────────────────────────────────────────────────────

/// The stacked-block optimizer model.
#[derive(Debug)]
pub struct B2Opt {
    params: ParamSet,
    blocks: Vec<BlockParams>,
    config: ModelConfig,
}

impl B2Opt {
    /// Random initialization near the identity map: the mixing matrix
    /// starts at I, input gains at 1, everything else at small uniform
    /// noise. Tensors are drawn in [`tensor_layout`] order, so a fixed seed
    /// gives a bit-identical model.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, Error> {
        config.validate()?;
        let noise = config.init_noise;
        Self::build(config, |_, rows, cols, kind| {
            let mut m = match kind {
                InitKind::IdentityPlusNoise => Matrix::identity(rows),
                InitKind::OnePlusNoise => Matrix::filled(rows, cols, 1.0),
                InitKind::Noise => Matrix::zeros(rows, cols),
            };
            if noise > 0.0 {
                for v in m.as_mut_slice() {
                    *v += rng.random_range(-noise..noise);
                }
            }
            Ok(m)
        })
    }

    fn build(
        config: ModelConfig,
        mut tensor: impl FnMut(&str, usize, usize, InitKind) -> Result<Matrix, Error>,
    ) -> Result<Self, Error> {
        let layout = tensor_layout(&config);
        let mut params = ParamSet::new();
        let mut ids = Vec::with_capacity(layout.len());
        for (name, rows, cols, kind) in layout {
            let value = tensor(&name, rows, cols, kind)?;
            if value.shape() != (rows, cols) {
                return Err(Error::ShapeMismatch { op: "model tensor", lhs: (rows, cols), rhs: value.shape() });
            }
            ids.push(params.add(name, value));
        }
        let stored = if config.weight_sharing { 1 } else { config.t };
        let blocks = (0..stored)
            .map(|b| {
                let at = |i: usize| ids[b * TENSORS_PER_BLOCK + i];
                BlockParams {
                    crossover: CrossoverParams {
                        mix: at(0),
                        w_query: at(1),
                        w_key: at(2),
                        gain_mix: at(3),
                        gain_attn: at(4),
                    },
                    mutation: MutationParams { w1: at(5), b1: at(6), w2: at(7), b2: at(8) },
                    selection: SelectionParams { w_input: at(9), w_cross: at(10), w_mut: at(11) },
                }
            })
            .collect();
        Ok(B2Opt { params, blocks, config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn t(&self) -> usize {
        self.config.t
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Parameters of block `i` (the single stored block under weight
    /// sharing).
    pub fn block(&self, i: usize) -> &BlockParams {
        if self.config.weight_sharing {
            &self.blocks[0]
        } else {
            &self.blocks[i]
        }
    }

    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.config.ablation = ablation;
    }
}

// ── forward passes ──────────────────────────────────────────────────

/// A population living on a tape: matrix node plus fitness node (n x 1).
#[derive(Debug, Clone, Copy)]
pub struct TapedPopulation {
    pub x: NodeId,
    pub fitness: NodeId,
}

impl TapedPopulation {
    /// Lifts an evaluated population onto the tape as constants.
    pub fn constant(tape: &mut Tape, pop: &Population) -> Result<Self, Error> {
        let x = tape.constant(pop.x().clone())?;
        let fitness = tape.constant(Matrix::from_vec(pop.n(), 1, pop.fitness().to_vec())?)?;
        Ok(TapedPopulation { x, fitness })
    }
}

/// On-tape min-max fitness normalization; constant fitness maps to zeros.
pub fn normalize_fitness_node(tape: &mut Tape, fitness: NodeId) -> Result<NodeId, Error> {
    let (n, _) = tape.shape(fitness);
    let values = tape.value(fitness);
    let min = values.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return tape.constant(Matrix::zeros(n, 1));
    }
    let min_node = tape.min_entry(fitness)?;
    let max_node = tape.max_entry(fitness)?;
    let span = tape.sub(max_node, min_node)?;
    let inv_span = tape.recip(span)?;
    let min_b = tape.broadcast_rows(min_node, n)?;
    let shifted = tape.sub(fitness, min_b)?;
    let inv_b = tape.broadcast_rows(inv_span, n)?;
    tape.hadamard(shifted, inv_b)
}

/// Crossover: `Xc = tile(g_mix) ⊙ (Mix · X) + tile(g_attn) ⊙ (A_F · X)`,
/// where `A_F` is row-softmax fitness attention over the normalized
/// fitness column. Also returns the effective n x n attention
/// (`diag(g_mix)·Mix + diag(g_attn)·A_F`) for inspection.
pub fn crossover_forward(
    tape: &mut Tape,
    params: &ParamSet,
    cross: &CrossoverParams,
    pop: &TapedPopulation,
    d_k: usize,
) -> Result<(NodeId, Matrix), Error> {
    let (n, d) = tape.shape(pop.x);
    let fnorm = normalize_fitness_node(tape, pop.fitness)?;
    let w_query = tape.param(params, cross.w_query)?;
    let w_key = tape.param(params, cross.w_key)?;
    let queries = tape.matmul(fnorm, w_query)?;
    let keys = tape.matmul(fnorm, w_key)?;
    let keys_t = tape.transpose(keys)?;
    let logits = tape.matmul(queries, keys_t)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let attn = tape.row_softmax(scaled)?;

    let mix = tape.param(params, cross.mix)?;
    let mixed = tape.matmul(mix, pop.x)?;
    let attended = tape.matmul(attn, pop.x)?;
    let gain_mix = tape.param(params, cross.gain_mix)?;
    let gain_attn = tape.param(params, cross.gain_attn)?;
    let g1 = tape.tile_cols(gain_mix, d)?;
    let g2 = tape.tile_cols(gain_attn, d)?;
    let term_mix = tape.hadamard(g1, mixed)?;
    let term_attn = tape.hadamard(g2, attended)?;
    let xc = tape.add(term_mix, term_attn)?;

    // Effective attention from forward values, for the visualization dump.
    let mut effective = Matrix::zeros(n, n);
    let mix_v = tape.value(mix);
    let attn_v = tape.value(attn);
    let g1_v = tape.value(gain_mix);
    let g2_v = tape.value(gain_attn);
    for i in 0..n {
        for j in 0..n {
            effective.set(i, j, g1_v.get(i, 0) * mix_v.get(i, j) + g2_v.get(i, 0) * attn_v.get(i, j));
        }
    }
    Ok((xc, effective))
}

/// Mutation: `Xm = ReLU(Xc · W1 + b1) · W2 + b2` with row-wise biases.
pub fn mutation_forward(
    tape: &mut Tape,
    params: &ParamSet,
    mutation: &MutationParams,
    xc: NodeId,
) -> Result<NodeId, Error> {
    let (n, _) = tape.shape(xc);
    let w1 = tape.param(params, mutation.w1)?;
    let b1 = tape.param(params, mutation.b1)?;
    let w2 = tape.param(params, mutation.w2)?;
    let b2 = tape.param(params, mutation.b2)?;
    let h_pre = tape.matmul(xc, w1)?;
    let b1_b = tape.broadcast_rows(b1, n)?;
    let h_in = tape.add(h_pre, b1_b)?;
    let h = tape.relu(h_in)?;
    let out_pre = tape.matmul(h, w2)?;
    let b2_b = tape.broadcast_rows(b2, n)?;
    tape.add(out_pre, b2_b)
}

/// Pairwise keep-the-better selection between the current population and a
/// candidate. Row `i` keeps the input when `f_cand[i] - f_x[i] > 0`; ties
/// go to the candidate. The mask is a constant of the op (no gradient).
pub fn pairwise_select(
    tape: &mut Tape,
    x: NodeId,
    fx: NodeId,
    cand: NodeId,
    fcand: NodeId,
) -> Result<(NodeId, NodeId, Vec<bool>), Error> {
    let n = tape.shape(x).0;
    let mask: Vec<bool> = (0..n)
        .map(|i| tape.value(fcand).get(i, 0) - tape.value(fx).get(i, 0) > 0.0)
        .collect();
    let sel_x = tape.select_rows(x, cand, &mask)?;
    let sel_f = tape.select_rows(fx, fcand, &mask)?;
    Ok((sel_x, sel_f, mask))
}

/// Sorts a taped population into non-descending fitness order. The
/// permutation is a constant of the op; gradients flow through the moved
/// rows.
pub fn sort_on_tape(tape: &mut Tape, pop: &TapedPopulation) -> Result<(TapedPopulation, Vec<usize>), Error> {
    let perm = argsort_stable(tape.value(pop.fitness).as_slice())?;
    let x = tape.permute_rows(pop.x, &perm)?;
    let fitness = tape.permute_rows(pop.fitness, &perm)?;
    Ok((TapedPopulation { x, fitness }, perm))
}

/// Result of one residual-selection stage, with the diagnostics needed to
/// judge whether the discrete decisions are locally stable.
pub struct ResidualOutcome {
    pub pop: TapedPopulation,
    /// Clamped candidate population node (pre-selection).
    pub candidate: NodeId,
    /// Smallest |f_candidate - f_input| over rows; infinity when selection
    /// is disabled.
    pub selection_margin: f64,
    /// Whether clamping changed any candidate entry.
    pub clamped: bool,
}

/// Residual selection: forms the candidate
/// `C = w_in ⊙ X + w_cross ⊙ Xc + w_mut ⊙ Xm`, clamps it to the bounds,
/// evaluates it (one n-row charge), compares pairwise against the input,
/// and re-sorts.
#[allow(clippy::too_many_arguments)]
pub fn residual_select_forward(
    tape: &mut Tape,
    params: &ParamSet,
    selection: &SelectionParams,
    pop: &TapedPopulation,
    xc: NodeId,
    xm: NodeId,
    instance: &ObjectiveInstance,
    counter: &mut EvalCounter,
    ablation: Ablation,
) -> Result<ResidualOutcome, Error> {
    // Accumulate the candidate left to right so values match a scalar
    // reading of the residual sum term for term.
    let d = tape.shape(pop.x).1;
    let w_cross = tape.param(params, selection.w_cross)?;
    let w_mut = tape.param(params, selection.w_mut)?;
    let wc = tape.tile_cols(w_cross, d)?;
    let wm = tape.tile_cols(w_mut, d)?;
    let term_cross = tape.hadamard(wc, xc)?;
    let term_mut = tape.hadamard(wm, xm)?;
    let cand = if ablation.disable_residual {
        tape.add(term_cross, term_mut)?
    } else {
        let w_input = tape.param(params, selection.w_input)?;
        let wi = tape.tile_cols(w_input, d)?;
        let term_input = tape.hadamard(wi, pop.x)?;
        let partial = tape.add(term_input, term_cross)?;
        tape.add(partial, term_mut)?
    };

    let bounds = instance.bounds();
    let clipped = tape.clamp_cols(cand, bounds.lower(), bounds.upper())?;
    let clamped = tape.value(cand) != tape.value(clipped);
    let f_cand = instance.evaluate_on_tape(tape, clipped, counter)?;

    let (selected, selection_margin) = if ablation.disable_selection {
        (TapedPopulation { x: clipped, fitness: f_cand }, f64::INFINITY)
    } else {
        let margin = (0..tape.shape(pop.x).0)
            .map(|i| (tape.value(f_cand).get(i, 0) - tape.value(pop.fitness).get(i, 0)).abs())
            .fold(f64::INFINITY, f64::min);
        let (sx, sf, _) = pairwise_select(tape, pop.x, pop.fitness, clipped, f_cand)?;
        (TapedPopulation { x: sx, fitness: sf }, margin)
    };
    let pop = sort_on_tape(tape, &selected)?.0;
    Ok(ResidualOutcome { pop, candidate: clipped, selection_margin, clamped })
}

/// Per-block data captured for visualization dumps and stability probes.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Effective n x n crossover attention (identity when crossover is
    /// disabled).
    pub attention: Matrix,
    /// Population entering mutation (crossover output).
    pub pre_mutation: Matrix,
    /// Population leaving mutation.
    pub post_mutation: Matrix,
    /// Clamped candidate population (pre-selection).
    pub candidate: Matrix,
    /// Smallest pairwise-selection fitness margin in this block.
    pub selection_margin: f64,
    /// Whether bound clamping was active in this block.
    pub clamped: bool,
}

/// Full forward trace: per-block population snapshots plus block details.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    /// t + 1 population snapshots: input first, then each block output.
    pub snapshots: Vec<Matrix>,
    /// Fitness vectors matching `snapshots`.
    pub fitness: Vec<Vec<f64>>,
    pub blocks: Vec<BlockTrace>,
}

impl RunTrace {
    /// Smallest adjacent fitness gap over all sorted snapshots; tiny gaps
    /// mean sort order is unstable under perturbation.
    pub fn min_sort_gap(&self) -> f64 {
        self.fitness
            .iter()
            .flat_map(|f| f.windows(2).map(|w| (w[1] - w[0]).abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest pairwise-selection margin over all blocks.
    pub fn min_selection_margin(&self) -> f64 {
        self.blocks.iter().map(|b| b.selection_margin).fold(f64::INFINITY, f64::min)
    }

    /// Whether any block clamped its candidate.
    pub fn any_clamped(&self) -> bool {
        self.blocks.iter().any(|b| b.clamped)
    }
}

/// One block: crossover, mutation, then residual selection, honoring
/// ablation switches. Charges exactly `n` evaluations.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    params: &ParamSet,
    block: &BlockParams,
    pop: &TapedPopulation,
    instance: &ObjectiveInstance,
    counter: &mut EvalCounter,
    config: &ModelConfig,
    trace: Option<&mut RunTrace>,
) -> Result<TapedPopulation, Error> {
    let ablation = config.ablation;
    let (xc, attention) = if ablation.disable_crossover {
        (pop.x, Matrix::identity(config.n))
    } else {
        crossover_forward(tape, params, &block.crossover, pop, config.d_k)?
    };
    let xm = if ablation.disable_mutation {
        xc
    } else {
        mutation_forward(tape, params, &block.mutation, xc)?
    };
    let outcome = residual_select_forward(tape, params, &block.selection, pop, xc, xm, instance, counter, ablation)?;
    if let Some(trace) = trace {
        trace.blocks.push(BlockTrace {
            attention,
            pre_mutation: tape.value(xc).clone(),
            post_mutation: tape.value(xm).clone(),
            candidate: tape.value(outcome.candidate).clone(),
            selection_margin: outcome.selection_margin,
            clamped: outcome.clamped,
        });
        trace.snapshots.push(tape.value(outcome.pop.x).clone());
        trace.fitness.push(tape.value(outcome.pop.fitness).as_slice().to_vec());
    }
    Ok(outcome.pop)
}

/// Summary of one optimization run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Best fitness after 0, 1, ..., t blocks (length t + 1).
    pub best: Vec<f64>,
    /// Mean fitness after 0, 1, ..., t blocks.
    pub mean: Vec<f64>,
    /// Total evaluations for the run, including the initial population.
    pub evals: u64,
    pub wall: Duration,
}

impl B2Opt {
    /// Applies all `t` blocks to a sorted taped population. Works against
    /// any parameter set with this model's layout, which lets gradient
    /// checks re-run the same graph from perturbed parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pop0: TapedPopulation,
        instance: &ObjectiveInstance,
        counter: &mut EvalCounter,
        record: Option<&mut RunRecord>,
        mut trace: Option<&mut RunTrace>,
    ) -> Result<TapedPopulation, Error> {
        let (n, d) = tape.shape(pop0.x);
        if n != self.config.n {
            return Err(Error::Mismatch { what: "population size vs model", expected: self.config.n, got: n });
        }
        if d != self.config.d {
            return Err(Error::Mismatch { what: "population dimension vs model", expected: self.config.d, got: d });
        }
        let mut stats: Vec<(f64, f64)> = Vec::with_capacity(self.config.t + 1);
        let fit0 = tape.value(pop0.fitness).as_slice();
        stats.push((fit0.iter().cloned().fold(f64::INFINITY, f64::min), fit0.iter().sum::<f64>() / n as f64));
        if let Some(trace) = trace.as_deref_mut() {
            trace.snapshots.push(tape.value(pop0.x).clone());
            trace.fitness.push(tape.value(pop0.fitness).as_slice().to_vec());
        }
        let mut pop = pop0;
        for i in 0..self.config.t {
            pop = block_forward(
                tape,
                params,
                self.block(i),
                &pop,
                instance,
                counter,
                &self.config,
                trace.as_deref_mut(),
            )?;
            let fit = tape.value(pop.fitness).as_slice();
            stats.push((fit.iter().cloned().fold(f64::INFINITY, f64::min), fit.iter().sum::<f64>() / n as f64));
        }
        if let Some(record) = record {
            record.best = stats.iter().map(|s| s.0).collect();
            record.mean = stats.iter().map(|s| s.1).collect();
        }
        Ok(pop)
    }

    /// Runs the model on an evaluated, sorted population and returns the
    /// final population plus the run record. Charges `t * n` evaluations on
    /// top of the `n` already spent on `pop0`.
    pub fn run(
        &self,
        pop0: &Population,
        instance: &ObjectiveInstance,
        counter: &mut EvalCounter,
    ) -> Result<(Population, RunRecord), Error> {
        self.run_traced(pop0, instance, counter, None)
    }

    /// [`B2Opt::run`] with an optional visualization trace.
    pub fn run_traced(
        &self,
        pop0: &Population,
        instance: &ObjectiveInstance,
        counter: &mut EvalCounter,
        trace: Option<&mut RunTrace>,
    ) -> Result<(Population, RunRecord), Error> {
        if !pop0.is_sorted() {
            return Err(Error::InvalidConfig("run requires an evaluated, sorted population".into()));
        }
        let start = Instant::now();
        let before = counter.count();
        let mut tape = Tape::new();
        let taped = TapedPopulation::constant(&mut tape, pop0)?;
        let mut record = RunRecord { best: Vec::new(), mean: Vec::new(), evals: 0, wall: Duration::ZERO };
        let out = self.forward_on_tape(&mut tape, &self.params, taped, instance, counter, Some(&mut record), trace)?;
        record.evals = (counter.count() - before) + pop0.n() as u64;
        record.wall = start.elapsed();

        let x = tape.value(out.x).clone();
        let fitness = tape.value(out.fitness).as_slice().to_vec();
        let mut pop = Population::from_parts(x, fitness)?;
        pop.sorted = true;
        Ok((pop, record))
    }
}

// ── checkpoints ─────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"B2OPTCKP";
const CKPT_VERSION: u32 = 1;

impl B2Opt {
    /// Writes the model to a self-describing binary checkpoint
    /// (little-endian, bit-exact round trip). Layout is documented in the
    /// repository README.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.n, c.d, c.t, c.d_k, c.hidden_width()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(c.weight_sharing as u8);
        out.push(c.ablation.disable_crossover as u8);
        out.push(c.ablation.disable_mutation as u8);
        out.push(c.ablation.disable_residual as u8);
        out.push(c.ablation.disable_selection as u8);
        let layout = tensor_layout(c);
        out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
        for (id, (name, _, _, _)) in self.params.ids().zip(&layout) {
            let value = self.params.value(id);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(value.cols() as u32).to_le_bytes());
            for v in value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a checkpoint, verifying magic, version, and every tensor's
    /// name and shape. A malformed or truncated file yields an error and no
    /// partial model.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut cur = std::io::Cursor::new(bytes.as_slice());

        let mut magic = [0u8; 8];
        read_exact(&mut cur, &mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = read_u32(&mut cur)?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {CKPT_VERSION})")));
        }
        let n = read_u32(&mut cur)? as usize;
        let d = read_u32(&mut cur)? as usize;
        let t = read_u32(&mut cur)? as usize;
        let d_k = read_u32(&mut cur)? as usize;
        let hidden = read_u32(&mut cur)? as usize;
        let mut flags = [0u8; 5];
        read_exact(&mut cur, &mut flags)?;
        let config = ModelConfig {
            n,
            d,
            t,
            d_k,
            hidden,
            weight_sharing: flags[0] != 0,
            ablation: Ablation {
                disable_crossover: flags[1] != 0,
                disable_mutation: flags[2] != 0,
                disable_residual: flags[3] != 0,
                disable_selection: flags[4] != 0,
            },
            init_noise: 0.0,
        };
        config.validate().map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;

        let count = read_u32(&mut cur)? as usize;
        let layout = tensor_layout(&config);
        if count != layout.len() {
            return Err(Error::Checkpoint(format!("tensor count {count} does not match layout {}", layout.len())));
        }
        let model = B2Opt::build(config, |name, rows, cols, _| {
            let name_len = read_u16(&mut cur)? as usize;
            let mut raw = vec![0u8; name_len];
            read_exact(&mut cur, &mut raw)?;
            let found = String::from_utf8(raw).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if found != name {
                return Err(Error::Checkpoint(format!("tensor order mismatch: expected `{name}`, found `{found}`")));
            }
            let r = read_u32(&mut cur)? as usize;
            let c = read_u32(&mut cur)? as usize;
            if (r, c) != (rows, cols) {
                return Err(Error::Checkpoint(format!("tensor `{name}`: expected {rows}x{cols}, found {r}x{c}")));
            }
            let mut data = vec![0.0f64; r * c];
            for v in &mut data {
                let mut b = [0u8; 8];
                read_exact(&mut cur, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
            Matrix::from_vec(r, c, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
        })?;
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - cur.position() as usize
            )));
        }
        Ok(model)
    }
}

fn read_exact(cur: &mut std::io::Cursor<&[u8]>, buf: &mut [u8]) -> Result<(), Error> {
    cur.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file (truncated checkpoint)".into()))
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32, Error> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(cur: &mut std::io::Cursor<&[u8]>) -> Result<u16, Error> {
    let mut b = [0u8; 2];
    read_exact(cur, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{init_population, FunctionId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sphere_instance(d: usize, seed: u64) -> ObjectiveInstance {
        ObjectiveInstance::sample_shifted(FunctionId::F4, d, &mut rng(seed))
    }

    /// Identity-configured model: init with zero noise.
    fn identity_model(n: usize, d: usize, t: usize) -> B2Opt {
        let mut config = ModelConfig::new(n, d, t, true);
        config.init_noise = 0.0;
        B2Opt::init(config, &mut rng(0)).unwrap()
    }

    #[test]
    fn sort_returns_expected_permutation() {
        let x = Matrix::from_vec(3, 2, vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1]).unwrap();
        let mut pop = Population::from_parts(x, vec![3.0, 1.0, 2.0]).unwrap();
        let perm = pop.sort().unwrap();
        assert_eq!(perm, vec![1, 2, 0]);
        assert_eq!(pop.fitness(), &[1.0, 2.0, 3.0]);
        assert_eq!(pop.x().row(0), &[1.0, 1.1]);
    }

    #[test]
    fn sort_is_stable_and_identity_when_sorted() {
        let x = Matrix::zeros(3, 1);
        let mut pop = Population::from_parts(x.clone(), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pop.sort().unwrap(), vec![0, 1, 2]);

        let mut ties = Population::from_parts(x, vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(ties.sort().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn sort_rejects_nan_naming_row() {
        let x = Matrix::zeros(3, 1);
        let mut pop = Population::from_parts(x, vec![1.0, f64::NAN, 3.0]).unwrap();
        let err = pop.sort().unwrap_err();
        assert!(matches!(err, Error::NanFitness { row: 1 }));
    }

    #[test]
    fn normalize_fitness_examples() {
        assert_eq!(normalize_fitness(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_fitness(&[7.0, 7.0]).unwrap(), vec![0.0, 0.0]);
        let out = normalize_fitness(&[-3.0, 10.0, 2.0, 2.0]).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(normalize_fitness(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn identity_block_is_a_fixed_point() {
        let instance = sphere_instance(4, 21);
        let model = identity_model(6, 4, 3);
        let mut counter = EvalCounter::new();
        let x0 = init_population(instance.bounds(), 6, &mut rng(22));
        let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();
        let (out, record) = model.run(&pop0, &instance, &mut counter).unwrap();
        assert_eq!(out.x(), pop0.x(), "population changed under identity configuration");
        assert_eq!(out.fitness(), pop0.fitness());
        assert_eq!(record.evals, (3 + 1) * 6);
    }

    #[test]
    fn crossover_identity_and_zero_settings() {
        let instance = sphere_instance(3, 23);
        let mut counter = EvalCounter::new();
        let x0 = init_population(instance.bounds(), 4, &mut rng(24));
        let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();

        let model = identity_model(4, 3, 1);
        let mut tape = Tape::new();
        let taped = TapedPopulation::constant(&mut tape, &pop0).unwrap();
        let (xc, _) = crossover_forward(&mut tape, model.params(), &model.block(0).crossover, &taped, 16).unwrap();
        assert_eq!(tape.value(xc), pop0.x(), "identity crossover must pass the population through");

        // Zero gains produce the zero matrix.
        let mut zeroed = model.params().clone();
        zeroed.value_mut(model.block(0).crossover.gain_mix).as_mut_slice().fill(0.0);
        let mut tape = Tape::new();
        let taped = TapedPopulation::constant(&mut tape, &pop0).unwrap();
        let (xc, _) = crossover_forward(&mut tape, &zeroed, &model.block(0).crossover, &taped, 16).unwrap();
        assert!(tape.value(xc).as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn crossover_matches_scalar_loop() {
        let mut r = rng(25);
        for _ in 0..100 {
            let n = r.random_range(2..8usize);
            let d = r.random_range(1..5usize);
            let mut config = ModelConfig::new(n, d, 1, true);
            config.d_k = 4;
            config.init_noise = 0.3;
            let model = B2Opt::init(config, &mut r).unwrap();
            let instance = ObjectiveInstance::sample_shifted(FunctionId::F4, d, &mut r);
            let mut counter = EvalCounter::new();
            let x0 = init_population(instance.bounds(), n, &mut r);
            let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();

            let mut tape = Tape::new();
            let taped = TapedPopulation::constant(&mut tape, &pop0).unwrap();
            let cross = &model.block(0).crossover;
            let (xc, _) = crossover_forward(&mut tape, model.params(), cross, &taped, 4).unwrap();

            // Independent scalar computation.
            let p = model.params();
            let fnorm = normalize_fitness(pop0.fitness()).unwrap();
            let wq = p.value(cross.w_query);
            let wk = p.value(cross.w_key);
            let dk = 4.0f64;
            let mut attn = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let mut dot = 0.0;
                    for k in 0..4 {
                        dot += fnorm[i] * wq.get(0, k) * fnorm[j] * wk.get(0, k);
                    }
                    attn[i][j] = dot / dk.sqrt();
                }
            }
            for row in attn.iter_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let mix = p.value(cross.mix);
            let g1 = p.value(cross.gain_mix);
            let g2 = p.value(cross.gain_attn);
            for i in 0..n {
                for j in 0..d {
                    let mut ax = 0.0;
                    let mut afx = 0.0;
                    for k in 0..n {
                        ax += mix.get(i, k) * pop0.x().get(k, j);
                        afx += attn[i][k] * pop0.x().get(k, j);
                    }
                    let expect = g1.get(i, 0) * ax + g2.get(i, 0) * afx;
                    let got = tape.value(xc).get(i, j);
                    assert!((got - expect).abs() <= 1e-12, "({i},{j}): {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn mutation_zero_map_and_scalar_loop() {
        let mut r = rng(26);
        // Zero first layer and biases put every output at zero, whatever w2 is.
        let mut config = ModelConfig::new(3, 2, 1, true);
        config.init_noise = 0.0;
        let model = B2Opt::init(config, &mut r).unwrap();
        let mut params = model.params().clone();
        for v in params.value_mut(model.block(0).mutation.w2).as_mut_slice() {
            *v = r.random_range(-2.0..2.0);
        }
        let mut tape = Tape::new();
        let x = tape
            .constant(Matrix::from_vec(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25]).unwrap())
            .unwrap();
        let xm = mutation_forward(&mut tape, &params, &model.block(0).mutation, x).unwrap();
        assert!(tape.value(xm).as_slice().iter().all(|v| *v == 0.0));

        // Random instances against a scalar two-layer loop.
        for _ in 0..100 {
            let n = r.random_range(2..6usize);
            let d = r.random_range(1..5usize);
            let mut config = ModelConfig::new(n, d, 1, true);
            config.init_noise = 0.4;
            let model = B2Opt::init(config, &mut r).unwrap();
            let h = model.config().hidden_width();
            let x = Matrix::from_vec(n, d, (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone()).unwrap();
            let m = &model.block(0).mutation;
            let xm = mutation_forward(&mut tape, model.params(), m, xn).unwrap();

            let p = model.params();
            let (w1, b1, w2, b2) = (p.value(m.w1), p.value(m.b1), p.value(m.w2), p.value(m.b2));
            for i in 0..n {
                let mut hidden = vec![0.0; h];
                for (k, hv) in hidden.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += x.get(i, j) * w1.get(j, k);
                    }
                    *hv = (s + b1.get(0, k)).max(0.0);
                }
                for j in 0..d {
                    let mut s = 0.0;
                    for (k, hv) in hidden.iter().enumerate() {
                        s += hv * w2.get(k, j);
                    }
                    let expect = s + b2.get(0, j);
                    let got = tape.value(xm).get(i, j);
                    assert!((got - expect).abs() <= 1e-12, "({i},{j}): {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn pairwise_select_examples_and_brute_force() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let fx = tape.constant(Matrix::from_vec(2, 1, vec![1.0, 5.0]).unwrap()).unwrap();
        let cand = tape.constant(Matrix::from_vec(2, 2, vec![9.0, 9.0, 8.0, 8.0]).unwrap()).unwrap();
        let fc = tape.constant(Matrix::from_vec(2, 1, vec![2.0, 3.0]).unwrap()).unwrap();
        let (sx, sf, mask) = pairwise_select(&mut tape, x, fx, cand, fc).unwrap();
        assert_eq!(mask, vec![true, false]);
        assert_eq!(tape.value(sx).row(0), &[1.0, 2.0]);
        assert_eq!(tape.value(sx).row(1), &[8.0, 8.0]);
        assert_eq!(tape.value(sf).as_slice(), &[1.0, 3.0]);

        // Ties keep the candidate.
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::filled(2, 1, 1.0)).unwrap();
        let cand = tape.constant(Matrix::filled(2, 1, 7.0)).unwrap();
        let f = tape.constant(Matrix::filled(2, 1, 4.0)).unwrap();
        let (sx, _, mask) = pairwise_select(&mut tape, x, f, cand, f).unwrap();
        assert_eq!(mask, vec![false, false]);
        assert_eq!(tape.value(sx).as_slice(), &[7.0, 7.0]);

        // Brute-force row-min over random instances.
        let mut r = rng(27);
        for _ in 0..1000 {
            let n = r.random_range(1..6usize);
            let fx_v: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
            let fc_v: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Matrix::filled(n, 1, 0.0)).unwrap();
            let c = tape.constant(Matrix::filled(n, 1, 1.0)).unwrap();
            let fxn = tape.constant(Matrix::from_vec(n, 1, fx_v.clone()).unwrap()).unwrap();
            let fcn = tape.constant(Matrix::from_vec(n, 1, fc_v.clone()).unwrap()).unwrap();
            let (_, sf, _) = pairwise_select(&mut tape, x, fxn, c, fcn).unwrap();
            for i in 0..n {
                assert_eq!(tape.value(sf).get(i, 0), fx_v[i].min(fc_v[i]));
            }
        }
    }

    #[test]
    fn block_charges_exactly_n_evaluations() {
        let instance = sphere_instance(3, 30);
        for ablation in [
            Ablation::none(),
            Ablation { disable_selection: true, ..Ablation::none() },
            Ablation { disable_crossover: true, ..Ablation::none() },
        ] {
            let mut config = ModelConfig::new(5, 3, 1, true);
            config.ablation = ablation;
            let model = B2Opt::init(config, &mut rng(31)).unwrap();
            let mut counter = EvalCounter::new();
            let x0 = init_population(instance.bounds(), 5, &mut rng(32));
            let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();
            assert_eq!(counter.count(), 5);
            model.run(&pop0, &instance, &mut counter).unwrap();
            assert_eq!(counter.count(), 10, "block with {ablation:?} must charge n evals");
        }
    }

    #[test]
    fn run_zero_blocks_is_identity_with_n_evals() {
        let instance = sphere_instance(4, 33);
        let model = identity_model(5, 4, 0);
        let mut counter = EvalCounter::new();
        let x0 = init_population(instance.bounds(), 5, &mut rng(34));
        let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();
        let (out, record) = model.run(&pop0, &instance, &mut counter).unwrap();
        assert_eq!(out.x(), pop0.x());
        assert_eq!(record.evals, 5);
        assert_eq!(record.best.len(), 1);
    }

    #[test]
    fn trained_shape_run_budget() {
        // 30 blocks with weight sharing over n = 100: (30 + 1) * 100 evals.
        let instance = sphere_instance(4, 35);
        let config = ModelConfig::new(100, 4, 30, true);
        let model = B2Opt::init(config, &mut rng(36)).unwrap();
        let mut counter = EvalCounter::new();
        let x0 = init_population(instance.bounds(), 100, &mut rng(37));
        let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();
        let (_, record) = model.run(&pop0, &instance, &mut counter).unwrap();
        assert_eq!(record.evals, 3100);
        assert_eq!(counter.count(), 3100);
        assert_eq!(record.best.len(), 31);
    }

    #[test]
    fn elitism_and_sorted_output_over_random_blocks() {
        let mut r = rng(38);
        for trial in 0..200 {
            let n = r.random_range(2..8usize);
            let d = r.random_range(1..5usize);
            let mut config = ModelConfig::new(n, d, 1, true);
            config.init_noise = 0.5; // far from identity on purpose
            let model = B2Opt::init(config, &mut r).unwrap();
            let instance = ObjectiveInstance::sample_shifted(FunctionId::F4, d, &mut r);
            let mut counter = EvalCounter::new();
            let x0 = init_population(instance.bounds(), n, &mut r);
            let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();
            let (out, _) = model.run(&pop0, &instance, &mut counter).unwrap();
            assert!(out.best() <= pop0.best(), "trial {trial}: elitism violated");
            let f = out.fitness();
            assert!(f.windows(2).all(|w| w[0] <= w[1]), "trial {trial}: output not sorted");
        }
    }

    #[test]
    fn untrained_model_is_near_identity() {
        let instance = sphere_instance(6, 39);
        let mut counter = EvalCounter::new();
        let x0 = init_population(instance.bounds(), 8, &mut rng(41));
        let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();

        // Sorting reorders rows, so compare populations as sets: every
        // output row should sit close to some input row.
        let rel_change = |noise: f64| {
            let mut config = ModelConfig::new(8, 6, 1, true);
            config.init_noise = noise;
            let model = B2Opt::init(config, &mut rng(40)).unwrap();
            let mut counter = EvalCounter::new();
            let (out, _) = model.run(&pop0, &instance, &mut counter).unwrap();
            assert!(out.best() <= pop0.best());
            let mut total = 0.0;
            for i in 0..out.n() {
                let nearest = (0..pop0.n())
                    .map(|j| {
                        out.x()
                            .row(i)
                            .iter()
                            .zip(pop0.x().row(j))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                total += nearest;
            }
            total.sqrt() / pop0.x().norm()
        };

        let small = rel_change(0.01);
        let large = rel_change(0.5);
        assert!(small < 0.1, "default init wandered too far: {small}");
        assert!(small < 0.25 * large, "small {small} vs large {large}");
    }

    #[test]
    fn permutation_invariance_up_to_sorting() {
        let mut r = rng(42);
        let instance = sphere_instance(3, 43);
        let mut config = ModelConfig::new(5, 3, 2, true);
        config.init_noise = 0.3;
        let model = B2Opt::init(config, &mut r).unwrap();

        let x0 = init_population(instance.bounds(), 5, &mut r);
        let mut c1 = EvalCounter::new();
        let pop_a = Population::evaluated_sorted(x0.clone(), &instance, &mut c1).unwrap();
        let (out_a, _) = model.run(&pop_a, &instance, &mut c1).unwrap();

        // Shuffle rows, then evaluate and sort again: same sorted input.
        let perm = [3usize, 0, 4, 1, 2];
        let mut shuffled = Matrix::zeros(5, 3);
        for (k, &s) in perm.iter().enumerate() {
            shuffled.row_mut(k).copy_from_slice(x0.row(s));
        }
        let mut c2 = EvalCounter::new();
        let pop_b = Population::evaluated_sorted(shuffled, &instance, &mut c2).unwrap();
        let (out_b, _) = model.run(&pop_b, &instance, &mut c2).unwrap();

        assert_eq!(out_a.x(), out_b.x());
        assert_eq!(out_a.fitness(), out_b.fitness());
    }

    #[test]
    fn init_is_deterministic() {
        let config = ModelConfig::new(6, 4, 2, false);
        let a = B2Opt::init(config.clone(), &mut rng(44)).unwrap();
        let b = B2Opt::init(config, &mut rng(44)).unwrap();
        for (ia, ib) in a.params().ids().zip(b.params().ids()) {
            assert_eq!(a.params().value(ia), b.params().value(ib));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let second = dir.path().join("model2.ckpt");

        let mut config = ModelConfig::new(5, 3, 4, false);
        config.d_k = 8;
        let model = B2Opt::init(config, &mut rng(45)).unwrap();
        model.save(&path).unwrap();
        let loaded = B2Opt::load(&path).unwrap();
        loaded.save(&second).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&second).unwrap());
        assert_eq!(loaded.config().n, 5);
        assert!(!loaded.config().weight_sharing);
        for (ia, ib) in model.params().ids().zip(loaded.params().ids()) {
            assert_eq!(model.params().value(ia), loaded.params().value(ib));
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = B2Opt::init(ModelConfig::new(4, 3, 2, true), &mut rng(46)).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = B2Opt::load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // Trailing garbage is also rejected.
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, extended).unwrap();
        let err = B2Opt::load(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn ablation_switches_change_the_block_wiring() {
        let instance = sphere_instance(3, 47);
        let mut counter = EvalCounter::new();
        let x0 = init_population(instance.bounds(), 4, &mut rng(48));
        let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();

        // disable_crossover with an identity-configured rest behaves like
        // the identity block even when crossover params are garbage.
        let mut config = ModelConfig::new(4, 3, 1, true);
        config.init_noise = 0.0;
        config.ablation = Ablation { disable_crossover: true, ..Ablation::none() };
        let mut model = B2Opt::init(config, &mut rng(49)).unwrap();
        let mix = model.block(0).crossover.mix;
        for v in model.params_mut().value_mut(mix).as_mut_slice() {
            *v = 123.0;
        }
        let (out, _) = model.run(&pop0, &instance, &mut counter).unwrap();
        assert_eq!(out.x(), pop0.x());

        // disable_selection: the sorted clipped candidate replaces the
        // population, so a worsening candidate survives.
        let mut config = ModelConfig::new(4, 3, 1, true);
        config.init_noise = 0.0;
        config.ablation = Ablation { disable_selection: true, ..Ablation::none() };
        let mut model = B2Opt::init(config, &mut rng(50)).unwrap();
        let b2 = model.block(0).mutation.b2;
        for v in model.params_mut().value_mut(b2).as_mut_slice() {
            *v = 30.0;
        }
        let w_mut = model.block(0).selection.w_mut;
        for v in model.params_mut().value_mut(w_mut).as_mut_slice() {
            *v = 1.0;
        }
        let (out, _) = model.run(&pop0, &instance, &mut counter).unwrap();
        assert_ne!(out.x(), pop0.x());
    }

    #[test]
    fn taped_population_size_mismatch_is_hard_error() {
        let instance = sphere_instance(3, 51);
        let model = identity_model(6, 3, 1);
        let mut counter = EvalCounter::new();
        let x0 = init_population(instance.bounds(), 4, &mut rng(52));
        let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).unwrap();
        let err = model.run(&pop0, &instance, &mut counter).unwrap_err();
        assert!(err.to_string().contains("expected 6, got 4"), "{err}");
    }
}
