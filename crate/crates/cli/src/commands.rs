//! The six subcommands: train, optimize, bench, arm, ablate, export-viz.
//!
//! Every command writes its data CSVs plus a manifest sidecar into the
//! output directory. Grid execution is parallel across a worker pool, with
//! results assembled in grid order so reruns are byte-identical.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use b2opt::model::{B2Opt, ModelConfig, Population, RunTrace};
use b2opt::objectives::{init_population, sample_arm_targets, EvalCounter, ObjectiveInstance};
use b2opt::split_seed;
use b2opt::training::{train, TrainConfig, TrainTask};

use crate::config::{parse_variant, AlgoKind, AlgoSection, ExperimentConfig, TaskKind, TaskSection};
use crate::output::{config_hash, format_mean_std, full, CsvFile, Manifest};
use crate::runner::{run_single, seeds_for, summarize, Algo, RunOutcome, TaskTemplate};

/// Everything a command needs: parsed config, provenance, output target.
pub struct Ctx {
    pub config: ExperimentConfig,
    pub raw: Vec<u8>,
    pub config_dir: PathBuf,
    pub out_dir: PathBuf,
    pub master_seed: u64,
}

impl Ctx {
    pub fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, config_hash(&self.raw), self.master_seed)
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.config_dir.join(path)
        }
    }

    fn load_checkpoint(&self, algo: &AlgoSection) -> Result<B2Opt> {
        let path = algo.checkpoint.as_ref().context("[algo] b2opt needs `checkpoint`")?;
        let resolved = self.resolve(path);
        B2Opt::load(&resolved).map_err(|e| anyhow!("loading checkpoint {}: {e}", resolved.display()))
    }

    /// Builds the run template for the configured task; function tasks
    /// shift per run, arm tasks sample a fresh target per run inside the
    /// configured radius.
    fn template(&self, task: &TaskSection) -> Result<TaskTemplate> {
        match task.kind {
            TaskKind::Function => Ok(TaskTemplate::Function {
                id: task.function_id()?,
                d: task.dim()?,
                bounds: match (task.lower, task.upper) {
                    (Some(lo), Some(hi)) => Some((lo, hi)),
                    (None, None) => None,
                    _ => bail!("[task] bound overrides need both `lower` and `upper`"),
                },
            }),
            TaskKind::Arm => {
                let r_max = task.r_max.unwrap_or(100.0);
                Ok(TaskTemplate::ArmSampled { task: task.arm_task()?, r_max })
            }
        }
    }
}

/// Builds the runnable algorithm, loading the checkpoint when needed.
fn build_algo<'a>(
    ctx: &Ctx,
    section: &AlgoSection,
    n: usize,
    model_slot: &'a mut Option<B2Opt>,
) -> Result<Algo<'a>> {
    Ok(match section.kind {
        AlgoKind::B2opt => {
            *model_slot = Some(ctx.load_checkpoint(section)?);
            Algo::B2Opt(model_slot.as_ref().expect("just set"))
        }
        AlgoKind::De => Algo::De(section.de_config()),
        AlgoKind::Es => Algo::Es(section.es_config(n)),
        AlgoKind::Ga => Algo::Ga(section.ga_config()),
        AlgoKind::Random => Algo::Random,
    })
}

// ── train ───────────────────────────────────────────────────────────

pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let task = ctx.config.task()?;
    let section = ctx.config.train()?;
    let run = &ctx.config.run;

    let train_task = match task.kind {
        TaskKind::Function => {
            let ids = section.function_ids()?;
            if ids.is_empty() {
                bail!("[train] function training needs a non-empty `functions` list");
            }
            TrainTask::Functions { ids }
        }
        TaskKind::Arm => TrainTask::Arm {
            mode: task.arm_mode()?,
            segments: task.arm_task()?.segments,
            r_train: section.r_train,
            pool_size: section.pool_size,
            targets_per_epoch: section.targets_per_epoch,
            resample_every: section.resample_every,
        },
    };

    let d = match task.kind {
        TaskKind::Function => task.dim()?,
        TaskKind::Arm => 0, // derived from the task below
    };
    let mut config = TrainConfig::new(train_task, d, run.n, split_seed(ctx.master_seed, 2));
    config.lr0 = section.lr0;
    config.lr_decay = section.lr_decay;
    config.lr_decay_every = section.lr_decay_every;
    config.epochs = section.epochs;
    config.batch_populations = section.batch_k;
    config.clip_norm = section.clip_norm;
    config.d = config.dim();
    config.shift_pool = if section.shift_pool == 0 { None } else { Some(section.shift_pool) };
    config.validate().map_err(|e| anyhow!("{e}"))?;

    let mut model_config = ModelConfig::new(run.n, config.dim(), section.t, section.weight_sharing);
    model_config.d_k = section.d_k;
    model_config.hidden = section.hidden;
    let mut init_rng = ChaCha8Rng::seed_from_u64(split_seed(ctx.master_seed, 1));
    let mut model = B2Opt::init(model_config, &mut init_rng).map_err(|e| anyhow!("{e}"))?;

    let mut loss_csv = CsvFile::create(
        ctx.out_dir.join("loss.csv"),
        &["epoch", "function", "l_mean", "l_omega", "grad_norm_pre", "grad_norm_post", "lr"],
    )?;
    let mut sink_err = None;
    train(&mut model, &config, |r| {
        if sink_err.is_none() {
            if let Err(e) = loss_csv.row(&[
                r.epoch.to_string(),
                r.function.clone(),
                full(r.l_mean),
                full(r.l_omega),
                full(r.grad_pre),
                full(r.grad_post),
                full(r.lr),
            ]) {
                sink_err = Some(e);
            }
        }
    })
    .map_err(|e| anyhow!("{e}"))?;
    if let Some(e) = sink_err {
        return Err(e);
    }

    let mut manifest = ctx.manifest("train");
    manifest.seeds = vec![config.seed];
    let loss_path = loss_csv.finish()?;
    manifest.record_file(&loss_path);

    let ckpt_path = ctx.out_dir.join(&section.checkpoint_out);
    model.save(&ckpt_path).map_err(|e| anyhow!("{e}"))?;
    manifest.record_file(&ckpt_path);

    manifest.elapsed_ms = started.elapsed().as_millis();
    manifest.write(&ctx.out_dir)?;
    println!("trained {} epochs; checkpoint at {}", section.epochs, ckpt_path.display());
    Ok(())
}

// ── optimize ────────────────────────────────────────────────────────

pub fn cmd_optimize(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let task = ctx.config.task()?;
    let algo_section = ctx.config.algo()?;
    let run = &ctx.config.run;
    let template = ctx.template(task)?;

    let mut slot = None;
    let algo = build_algo(ctx, algo_section, run.n, &mut slot)?;
    let seeds = seeds_for(ctx.master_seed, 0, run.seeds);

    let outcomes: Vec<RunOutcome> = seeds
        .par_iter()
        .map(|&seed| run_single(&algo, &template, run.n, run.steps, run.max_evals, seed))
        .collect::<Result<_>>()?;

    let label = algo.label();
    let task_label = template.label();
    let d = template.dim();

    let mut curves = CsvFile::create(
        ctx.out_dir.join("curves.csv"),
        &["algo", "task", "d", "seed", "step", "best", "mean"],
    )?;
    let mut runs = CsvFile::create(
        ctx.out_dir.join("runs.csv"),
        &["algo", "task", "d", "seed", "final_best", "evals"],
    )?;
    for o in &outcomes {
        for (step, (b, m)) in o.curve_best.iter().zip(&o.curve_mean).enumerate() {
            curves.row(&[
                label.into(),
                task_label.clone(),
                d.to_string(),
                o.seed.to_string(),
                step.to_string(),
                full(*b),
                full(*m),
            ])?;
        }
        runs.row(&[
            label.into(),
            task_label.clone(),
            d.to_string(),
            o.seed.to_string(),
            full(o.final_best),
            o.evals.to_string(),
        ])?;
    }

    let summary = summarize(&outcomes.iter().map(|o| o.final_best).collect::<Vec<_>>());
    let mut summary_csv = CsvFile::create(
        ctx.out_dir.join("summary.csv"),
        &["algo", "task", "d", "runs", "mean_best", "std_best", "formatted"],
    )?;
    summary_csv.row(&[
        label.into(),
        task_label.clone(),
        d.to_string(),
        summary.count.to_string(),
        full(summary.mean),
        full(summary.std),
        format_mean_std(&summary),
    ])?;

    let mut manifest = ctx.manifest("optimize");
    manifest.seeds = seeds;
    for file in [curves.finish()?, runs.finish()?, summary_csv.finish()?] {
        manifest.record_file(&file);
    }
    manifest.elapsed_ms = started.elapsed().as_millis();
    manifest.write(&ctx.out_dir)?;
    let wall: u128 = outcomes.iter().map(|o| o.wall_ms).sum();
    println!("{label} on {task_label} d={d}: {} ({} runs, {wall} ms run time)", format_mean_std(&summary), summary.count);
    Ok(())
}

// ── bench ───────────────────────────────────────────────────────────

pub fn cmd_bench(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let bench = ctx.config.bench.as_ref().context("config needs a [bench] section")?;
    let run = &ctx.config.run;

    // Pre-load models; a missing checkpoint marks the algo's cells absent.
    let mut models: Vec<Option<B2Opt>> = Vec::new();
    let mut absent: Vec<bool> = Vec::new();
    for section in &bench.algos {
        if section.kind == AlgoKind::B2opt {
            match ctx.load_checkpoint(section) {
                Ok(model) => {
                    models.push(Some(model));
                    absent.push(false);
                }
                Err(_) => {
                    models.push(None);
                    absent.push(true);
                }
            }
        } else {
            models.push(None);
            absent.push(false);
        }
    }

    struct Cell {
        algo_idx: usize,
        function: String,
        d: usize,
        task_index: u64,
    }
    let mut cells = Vec::new();
    let mut task_index = 0u64;
    for (fi, function) in bench.functions.iter().enumerate() {
        for (di, d) in bench.dims.iter().enumerate() {
            let _ = (fi, di);
            for algo_idx in 0..bench.algos.len() {
                cells.push(Cell { algo_idx, function: function.clone(), d: *d, task_index });
            }
            task_index += 1;
        }
    }

    let results: Vec<(usize, Option<(Vec<RunOutcome>, Vec<u64>)>)> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| -> Result<_> {
            let section = &bench.algos[cell.algo_idx];
            if absent[cell.algo_idx] {
                return Ok((i, None));
            }
            let id = cell.function.parse().map_err(|e| anyhow!("{e}"))?;
            let template = TaskTemplate::Function { id, d: cell.d, bounds: None };
            let algo = match section.kind {
                AlgoKind::B2opt => Algo::B2Opt(models[cell.algo_idx].as_ref().expect("loaded")),
                AlgoKind::De => Algo::De(section.de_config()),
                AlgoKind::Es => Algo::Es(section.es_config(run.n)),
                AlgoKind::Ga => Algo::Ga(section.ga_config()),
                AlgoKind::Random => Algo::Random,
            };
            let seeds = seeds_for(ctx.master_seed, cell.task_index, run.seeds);
            let outcomes: Vec<RunOutcome> = seeds
                .iter()
                .map(|&seed| run_single(&algo, &template, run.n, run.steps, run.max_evals, seed))
                .collect::<Result<_>>()?;
            Ok((i, Some((outcomes, seeds))))
        })
        .collect::<Result<_>>()?;

    let mut table = CsvFile::create(
        ctx.out_dir.join("bench.csv"),
        &["algo", "function", "d", "status", "runs", "mean_best", "std_best", "formatted"],
    )?;
    let mut per_seed = CsvFile::create(
        ctx.out_dir.join("bench_runs.csv"),
        &["algo", "function", "d", "seed", "final_best", "evals"],
    )?;
    let mut manifest = ctx.manifest("bench");
    for (i, payload) in &results {
        let cell = &cells[*i];
        let label = bench.algos[cell.algo_idx].kind.label();
        match payload {
            None => {
                table.row(&[
                    label.into(),
                    cell.function.clone(),
                    cell.d.to_string(),
                    "absent".into(),
                    "0".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
            Some((outcomes, seeds)) => {
                manifest.seeds.extend_from_slice(seeds);
                for o in outcomes {
                    per_seed.row(&[
                        label.into(),
                        cell.function.clone(),
                        cell.d.to_string(),
                        o.seed.to_string(),
                        full(o.final_best),
                        o.evals.to_string(),
                    ])?;
                }
                let summary = summarize(&outcomes.iter().map(|o| o.final_best).collect::<Vec<_>>());
                table.row(&[
                    label.into(),
                    cell.function.clone(),
                    cell.d.to_string(),
                    "ok".into(),
                    summary.count.to_string(),
                    full(summary.mean),
                    full(summary.std),
                    format_mean_std(&summary),
                ])?;
            }
        }
    }

    for file in [table.finish()?, per_seed.finish()?] {
        manifest.record_file(&file);
    }
    manifest.elapsed_ms = started.elapsed().as_millis();
    manifest.write(&ctx.out_dir)?;
    println!("bench grid complete: {} cells", cells.len());
    Ok(())
}

// ── arm ─────────────────────────────────────────────────────────────

pub fn cmd_arm(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let arm = ctx.config.arm.clone().unwrap_or_else(|| {
        toml::from_str("").expect("arm defaults")
    });
    let algo_section = ctx.config.algo()?;
    let run = &ctx.config.run;
    let task = ctx.config.task()?;

    let mut slot = None;
    let algo = build_algo(ctx, algo_section, run.n, &mut slot)?;

    let mut summary_csv = CsvFile::create(
        ctx.out_dir.join("arm.csv"),
        &["mode", "r", "algo", "targets", "mean_best", "std_best", "formatted"],
    )?;
    let mut per_target = CsvFile::create(
        ctx.out_dir.join("arm_runs.csv"),
        &["mode", "r", "target", "seed", "final_best", "evals"],
    )?;

    let mut manifest = ctx.manifest("arm");
    let mut grid_index = 0u64;
    for mode_name in &arm.modes {
        for &r in &arm.r_values {
            let mut section = task.clone();
            section.mode = Some(mode_name.clone());
            let arm_task = section.arm_task()?;
            let mode_label = arm_task.mode.label().to_string();

            // Fixed target set for this (mode, r) cell.
            let target_stream = split_seed(ctx.master_seed, 1_000_000 + grid_index);
            let mut target_rng = ChaCha8Rng::seed_from_u64(target_stream);
            let targets = sample_arm_targets(r, arm.targets, &mut target_rng);
            let seeds = seeds_for(ctx.master_seed, grid_index, arm.targets);
            manifest.seeds.extend_from_slice(&seeds);

            let outcomes: Vec<RunOutcome> = targets
                .par_iter()
                .zip(&seeds)
                .map(|(target, &seed)| {
                    let template = TaskTemplate::ArmFixed { task: arm_task.clone(), target: *target };
                    run_single(&algo, &template, run.n, run.steps, run.max_evals, seed)
                })
                .collect::<Result<_>>()?;

            for (ti, o) in outcomes.iter().enumerate() {
                per_target.row(&[
                    mode_label.clone(),
                    full(r),
                    ti.to_string(),
                    o.seed.to_string(),
                    full(o.final_best),
                    o.evals.to_string(),
                ])?;
            }
            let summary = summarize(&outcomes.iter().map(|o| o.final_best).collect::<Vec<_>>());
            summary_csv.row(&[
                mode_label.clone(),
                full(r),
                algo.label().into(),
                arm.targets.to_string(),
                full(summary.mean),
                full(summary.std),
                format_mean_std(&summary),
            ])?;
            println!("{mode_label} r={r}: {}", format_mean_std(&summary));
            grid_index += 1;
        }
    }

    for file in [summary_csv.finish()?, per_target.finish()?] {
        manifest.record_file(&file);
    }
    manifest.elapsed_ms = started.elapsed().as_millis();
    manifest.write(&ctx.out_dir)?;
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────

pub fn cmd_ablate(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let ablate = ctx.config.ablate.as_ref().context("config needs an [ablate] section")?;
    let task = ctx.config.task()?;
    let section = ctx.config.train()?;
    let run = &ctx.config.run;

    let ids = section.function_ids()?;
    if ids.is_empty() {
        bail!("[train] needs `functions` for the ablation study");
    }
    let d = task.dim()?;
    let dims = if ablate.dims.is_empty() { vec![d] } else { ablate.dims.clone() };

    let mut table = CsvFile::create(
        ctx.out_dir.join("ablate.csv"),
        &["variant", "function", "d", "runs", "mean_best", "std_best", "formatted"],
    )?;
    let mut per_seed = CsvFile::create(
        ctx.out_dir.join("ablate_runs.csv"),
        &["variant", "function", "d", "seed", "final_best", "evals"],
    )?;
    let mut manifest = ctx.manifest("ablate");

    for variant in &ablate.variants {
        let ablation = parse_variant(variant)?;
        if ablation.active() > 1 {
            bail!("variant {variant} sets more than one ablation flag");
        }

        // Identical init/config/seed for every variant; only wiring differs.
        let mut model_config = ModelConfig::new(run.n, d, section.t, section.weight_sharing);
        model_config.d_k = section.d_k;
        model_config.hidden = section.hidden;
        model_config.ablation = ablation;
        let mut init_rng = ChaCha8Rng::seed_from_u64(split_seed(ctx.master_seed, 1));
        let mut model = B2Opt::init(model_config, &mut init_rng).map_err(|e| anyhow!("{e}"))?;

        let mut config = TrainConfig::new(TrainTask::Functions { ids: ids.clone() }, d, run.n, split_seed(ctx.master_seed, 2));
        config.lr0 = section.lr0;
        config.lr_decay = section.lr_decay;
        config.lr_decay_every = section.lr_decay_every;
        config.epochs = section.epochs;
        config.batch_populations = section.batch_k;
        config.clip_norm = section.clip_norm;
        config.validate().map_err(|e| anyhow!("{e}"))?;
        train(&mut model, &config, |_| {}).map_err(|e| anyhow!("{e}"))?;

        let ckpt = ctx.out_dir.join(format!("ablate_{variant}.ckpt"));
        model.save(&ckpt).map_err(|e| anyhow!("{e}"))?;
        manifest.record_file(&ckpt);

        let mut task_index = 0u64;
        for function in &ablate.functions {
            for &dim in &dims {
                if dim != d {
                    bail!("ablation evaluates at the trained dimension {d}, config asked for {dim}");
                }
                let id = function.parse().map_err(|e| anyhow!("{e}"))?;
                let template = TaskTemplate::Function { id, d: dim, bounds: None };
                let algo = Algo::B2Opt(&model);
                let seeds = seeds_for(ctx.master_seed, task_index, run.seeds);
                let outcomes: Vec<RunOutcome> = seeds
                    .par_iter()
                    .map(|&seed| run_single(&algo, &template, run.n, run.steps, run.max_evals, seed))
                    .collect::<Result<_>>()?;
                for o in &outcomes {
                    per_seed.row(&[
                        variant.clone(),
                        function.clone(),
                        dim.to_string(),
                        o.seed.to_string(),
                        full(o.final_best),
                        o.evals.to_string(),
                    ])?;
                }
                let summary = summarize(&outcomes.iter().map(|o| o.final_best).collect::<Vec<_>>());
                table.row(&[
                    variant.clone(),
                    function.clone(),
                    dim.to_string(),
                    summary.count.to_string(),
                    full(summary.mean),
                    full(summary.std),
                    format_mean_std(&summary),
                ])?;
                task_index += 1;
            }
        }
        println!("variant {variant} done");
    }

    for file in [table.finish()?, per_seed.finish()?] {
        manifest.record_file(&file);
    }
    manifest.elapsed_ms = started.elapsed().as_millis();
    manifest.write(&ctx.out_dir)?;
    Ok(())
}

// ── export-viz ──────────────────────────────────────────────────────

pub fn cmd_export_viz(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let task = ctx.config.task()?;
    let algo_section = ctx.config.algo()?;
    let run = &ctx.config.run;
    if algo_section.kind != AlgoKind::B2opt {
        bail!("export-viz needs [algo] kind = \"b2opt\"");
    }
    let model = ctx.load_checkpoint(algo_section)?;

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(ctx.master_seed, 0));
    let instance: ObjectiveInstance = match task.kind {
        TaskKind::Function => ObjectiveInstance::sample_shifted(task.function_id()?, task.dim()?, &mut rng),
        TaskKind::Arm => {
            let r_max = task.r_max.unwrap_or(100.0);
            let target = sample_arm_targets(r_max, 1, &mut rng)[0];
            ObjectiveInstance::arm(task.arm_task()?, target)
        }
    };
    if model.dim() != instance.dim() {
        bail!("checkpoint dimension {} does not match task dimension {}", model.dim(), instance.dim());
    }

    let mut counter = EvalCounter::new();
    let x0 = init_population(instance.bounds(), run.n, &mut rng);
    let pop0 = Population::evaluated_sorted(x0, &instance, &mut counter).map_err(|e| anyhow!("{e}"))?;
    let mut trace = RunTrace::default();
    model.run_traced(&pop0, &instance, &mut counter, Some(&mut trace)).map_err(|e| anyhow!("{e}"))?;

    let mut manifest = ctx.manifest("export-viz");
    manifest.seeds = vec![split_seed(ctx.master_seed, 0)];

    // Effective attention per block: n x n.
    let n = model.n();
    for (bi, block) in trace.blocks.iter().enumerate() {
        let header: Vec<String> = (0..n).map(|j| format!("c{j}")).collect();
        let mut csv = CsvFile::create(
            ctx.out_dir.join(format!("attention_block{bi}.csv")),
            &header.iter().map(String::as_str).collect::<Vec<_>>(),
        )?;
        for i in 0..n {
            csv.row(&(0..n).map(|j| full(block.attention.get(i, j))).collect::<Vec<_>>())?;
        }
        manifest.record_file(&csv.finish()?);
    }

    // Population snapshots: t + 1 blocks of n x d.
    let d = model.dim();
    let mut header = vec!["block".to_string(), "row".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    let mut snaps = CsvFile::create(
        ctx.out_dir.join("snapshots.csv"),
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
    )?;
    for (bi, snap) in trace.snapshots.iter().enumerate() {
        for i in 0..snap.rows() {
            let mut row = vec![bi.to_string(), i.to_string()];
            row.extend(snap.row(i).iter().map(|v| full(*v)));
            snaps.row(&row)?;
        }
    }
    manifest.record_file(&snaps.finish()?);

    // Populations before/after the mutation stage, per block.
    let mut header = vec!["stage".to_string(), "row".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    for (bi, block) in trace.blocks.iter().enumerate() {
        let mut csv = CsvFile::create(
            ctx.out_dir.join(format!("mutation_block{bi}.csv")),
            &header.iter().map(String::as_str).collect::<Vec<_>>(),
        )?;
        for (stage, m) in [("pre", &block.pre_mutation), ("post", &block.post_mutation)] {
            for i in 0..m.rows() {
                let mut row = vec![stage.to_string(), i.to_string()];
                row.extend(m.row(i).iter().map(|v| full(*v)));
                csv.row(&row)?;
            }
        }
        manifest.record_file(&csv.finish()?);
    }

    manifest.elapsed_ms = started.elapsed().as_millis();
    manifest.write(&ctx.out_dir)?;
    println!("exported {} blocks of attention and populations", trace.blocks.len());
    Ok(())
}
