//! End-to-end differentiability: analytic gradients of the batch objective
//! through the full block stack (sort, selection, clamping included) must
//! match central finite differences wherever the discrete decisions are
//! locally stable.

use b2opt::model::{B2Opt, ModelConfig, RunRecord, RunTrace, TapedPopulation};
use b2opt::objectives::{init_population, sample_training_instance, EvalCounter, FunctionId, ObjectiveInstance};
use b2opt::tape::{grad_check, Tape};
use b2opt::training::build_batch_loss;
use b2opt::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Verifies the discrete decisions have comfortable margins: selection
/// fitness gaps and sort gaps above `margin`, no clamping, and (for the
/// shifted absolute-value surrogates) every evaluation point clear of the
/// kink at z = 0.
fn margins_hold(model: &B2Opt, pops: &[Matrix], instance: &ObjectiveInstance, margin: f64) -> bool {
    for pop in pops {
        let mut tape = Tape::new();
        let mut counter = EvalCounter::new();
        let x0 = tape.constant(pop.clone()).unwrap();
        let f0 = instance.evaluate_on_tape(&mut tape, x0, &mut counter).unwrap();
        let (sorted0, _) = b2opt::model::sort_on_tape(&mut tape, &TapedPopulation { x: x0, fitness: f0 }).unwrap();
        let mut trace = RunTrace::default();
        let mut record = RunRecord { best: vec![], mean: vec![], evals: 0, wall: Default::default() };
        model
            .forward_on_tape(
                &mut tape,
                model.params(),
                sorted0,
                instance,
                &mut counter,
                Some(&mut record),
                Some(&mut trace),
            )
            .unwrap();

        if trace.min_selection_margin() <= margin || trace.min_sort_gap() <= margin || trace.any_clamped() {
            return false;
        }
        if let Some(shift) = instance.shift() {
            let kink_ok = |m: &Matrix| {
                (0..m.rows()).all(|i| m.row(i).iter().zip(shift).all(|(x, b)| (x - b).abs() > margin))
            };
            if !kink_ok(pop) || !trace.blocks.iter().all(|b| kink_ok(&b.candidate)) {
                return false;
            }
        }
    }
    true
}

#[test]
fn batch_objective_gradients_match_finite_differences() {
    // F3, d = 4, n = 6, t = 1, weight sharing: a smaller sibling of the
    // acceptance-gate configuration, exercising the same mechanics.
    let mut picked = None;
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instance = sample_training_instance(FunctionId::F3, 4, &mut rng).unwrap();
        let mut config = ModelConfig::new(6, 4, 1, true);
        config.init_noise = 0.05;
        config.d_k = 4;
        let model = B2Opt::init(config, &mut rng).unwrap();
        let pops: Vec<Matrix> = (0..2).map(|_| init_population(instance.bounds(), 6, &mut rng)).collect();
        if margins_hold(&model, &pops, &instance, 1e-3) {
            picked = Some((model, pops, instance, seed));
            break;
        }
    }
    let (model, pops, instance, seed) = picked.expect("no seed with stable margins found in 60 tries");
    println!("margin-stable seed: {seed}");

    let worst = grad_check(
        model.params(),
        |tape, params| {
            let mut counter = EvalCounter::new();
            let (loss, _) = build_batch_loss(tape, &model, params, &pops, &instance, &mut counter)?;
            Ok(loss)
        },
        1e-5,
    )
    .unwrap();
    assert!(worst <= 1e-4, "full-model gradient error {worst} (seed {seed})");
}

#[test]
fn gradients_flow_through_moved_rows_not_permutations() {
    // A model whose only non-identity piece is the crossover mixing keeps
    // gradients flowing into the mixing matrix even though sampling, sort,
    // and selection all happen around it.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let instance = sample_training_instance(FunctionId::F2, 3, &mut rng).unwrap();
    let mut config = ModelConfig::new(5, 3, 1, true);
    config.init_noise = 0.08;
    let model = B2Opt::init(config, &mut rng).unwrap();
    let pops: Vec<Matrix> = (0..2).map(|_| init_population(instance.bounds(), 5, &mut rng)).collect();

    let mut grads = model.params().clone();
    grads.zero_grads();
    let mut tape = Tape::new();
    let mut counter = EvalCounter::new();
    let (loss, _) = build_batch_loss(&mut tape, &model, model.params(), &pops, &instance, &mut counter).unwrap();
    tape.backward(loss, &mut grads).unwrap();

    let mix_grad = grads.grad(model.block(0).crossover.mix);
    assert!(mix_grad.as_slice().iter().any(|g| g.abs() > 0.0), "no gradient reached the mixing matrix");
}
