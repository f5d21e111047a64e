use std::fmt::Write as _;

use anyhow::{anyhow, Context};
use rand::{Rng, SeedableRng};

use control_llm::checkpoint::{load, save, write_atomic, Checkpoint};
use control_llm::expansion::{
    apply_trainable, build_expansion_plan, expand_model, merge_blocks, trainable_set, ControlModel,
    ExpansionPlan, Strategy, TrainMode,
};
use control_llm::experiment::{pretrain, run_cf, Method};
use control_llm::interpolators::{DivergenceConfig, DivergenceKind, InterpolatorConfig, InterpolatorKind};
use control_llm::probe::{alignment_metrics, emit_probe_report, extract_states, ProbeSet};
use control_llm::training::{
    evaluate_task, select_checkpoint, train, Record, Split, TaskKind, TaskSpec, TrainConfig, TrainTarget,
};
use control_llm::transformer::{forward, ModelSpec, ModelView, ParameterStore, TokenBatch};

use crate::{Cli, Command, Failure, PlanArgs, TrainArgs};

/// Largest logit change an expansion may introduce.
const IDENTITY_TOLERANCE: f64 = 1e-5;

type Outcome = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

pub fn run(cli: &Cli) -> Outcome {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Pretrain(a) => {
            let spec = ModelSpec {
                n_layers: a.n_layers,
                seed: cli.seed,
                ..ModelSpec::default()
            };
            spec.validate()?;
            let cfg = train_config(&a.train, cli.seed)?;
            let (store, log) = pretrain(&spec, a.task, &cfg, &mut progress(a.task))?;
            let mut ckpt = Checkpoint::plain(spec, store);
            ckpt.meta.insert("task".into(), a.task.to_string());
            ckpt.meta.insert("steps".into(), cfg.steps.to_string());
            save(&cli.out, &ckpt)?;
            log.save(&cli.out.join("metrics.csv"))?;
            let acc = log.last().map_or(0.0, |r| r.accuracy(a.task));
            println!("{} accuracy {acc:.4}", a.task);
            if cli.strict && acc < a.gate {
                return Err(Failure::Runtime(anyhow!(
                    "{} accuracy {acc:.4} is below the gate {}",
                    a.task,
                    a.gate
                )));
            }
            Ok(())
        }
        Command::Expand(a) => {
            let base = load(&a.base)?;
            if base.plan.is_some() {
                return Err(usage("base checkpoint is already expanded"));
            }
            let plan = plan_from(&a.plan, base.spec.n_layers)?;
            let model = expand_model(&base.spec, &base.store, &plan)?;
            let residual = identity_residual(&base.spec, &base.store, &model, cli.seed)?;
            println!("identity residual (max |logit difference|): {residual:.3e}");
            if !(residual <= IDENTITY_TOLERANCE) {
                return Err(Failure::Runtime(anyhow!(
                    "expanded model differs from its base by {residual:e}, above {IDENTITY_TOLERANCE:e}"
                )));
            }
            let mut ckpt = Checkpoint::plain(model.spec, model.store);
            ckpt.plan = Some(model.plan);
            ckpt.meta = base.meta;
            save(&cli.out, &ckpt)?;
            Ok(())
        }
        Command::Finetune(a) => {
            let ckpt = load(&a.model)?;
            let mode = match a.mode.as_deref() {
                None if ckpt.plan.is_some() => TrainMode::Control,
                None | Some("full_param") => TrainMode::FullParam,
                Some("control") => TrainMode::Control,
                Some("partial_param") => TrainMode::PartialParam,
                Some(other) => return Err(usage(format!("unknown mode `{other}`"))),
            };
            let index_plan = match (mode, &ckpt.plan) {
                (TrainMode::Control, None) => return Err(usage("control mode needs an expanded checkpoint")),
                (TrainMode::Control, Some(p)) => Some(p.clone()),
                (_, Some(_)) => return Err(usage("full and partial modes need a plain checkpoint")),
                (TrainMode::PartialParam, None) => Some(build_expansion_plan(
                    ckpt.spec.n_layers,
                    a.period,
                    Strategy::Concat,
                    InterpolatorConfig::new(InterpolatorKind::Lerp),
                    DivergenceConfig::none(),
                )?),
                (TrainMode::FullParam, None) => None,
            };
            let mut store = ckpt.store;
            let trainable = trainable_set(&store, index_plan.as_ref(), mode)?;
            apply_trainable(&mut store, &trainable);
            let forward_plan = ckpt.plan.clone();
            let cfg = train_config(&a.train, cli.seed)?;
            let method = format!("{mode:?}").to_lowercase();
            let out = cli.out.clone();
            let mut show = progress(a.task);
            let log = {
                let spec = &ckpt.spec;
                let plan = forward_plan.as_ref();
                let mut on_record = |r: &Record, s: &ParameterStore| -> control_llm::Result<()> {
                    show(r, s)?;
                    if a.save_checkpoints {
                        let mut c = Checkpoint::plain(spec.clone(), s.clone());
                        c.plan = plan.cloned();
                        c.meta.insert("step".into(), r.step.to_string());
                        save(&out.join(format!("step-{}", r.step)), &c)?;
                    }
                    Ok(())
                };
                let mut target = TrainTarget {
                    spec,
                    store: &mut store,
                    plan,
                    trainable: &trainable,
                };
                train(&mut target, a.task, &cfg, &method, &mut on_record)?
            };
            log.save(&cli.out.join("metrics.csv"))?;
            let best = select_checkpoint(&log, &[], a.task)?;
            println!("best {} step: {best}", a.task);
            let mut c = Checkpoint::plain(ckpt.spec, store);
            c.plan = forward_plan;
            c.meta = ckpt.meta;
            c.meta.insert("finetuned_on".into(), a.task.to_string());
            save(&cli.out, &c)?;
            Ok(())
        }
        Command::Eval(a) => {
            let ckpt = load(&a.model)?;
            let view = ModelView::base(&ckpt.spec, &ckpt.store).with_plan(ckpt.plan.as_ref());
            let (ta, tb) = both_tasks(&view, a.split, a.examples)?;
            let line = format!("task_a_acc,task_b_acc\n{ta:.6},{tb:.6}\n");
            print!("{line}");
            write_atomic(&cli.out.join("eval.csv"), line.as_bytes())?;
            Ok(())
        }
        Command::Probe(a) => {
            let model = control_model(load(&a.model)?)?;
            let probes = match &a.probes {
                Some(p) => ProbeSet::load(p, model.spec.vocab_size)?,
                None => ProbeSet::synthetic(a.categories, a.per_category, cli.seed),
            };
            let states = extract_states(&model, &probes)?;
            let report = alignment_metrics(&states)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for d in &report.drift {
                println!(
                    "layer {}: pre/exp cosine {:.6}, distance {:.6}",
                    d.layer, d.mean_cosine, d.mean_distance
                );
            }
            let (json, svg) = emit_probe_report(&report, &cli.out.join("probe_report"))?;
            println!("wrote {} and {}", json.display(), svg.display());
            Ok(())
        }
        Command::Merge(a) => {
            let model = control_model(load(&a.model)?)?;
            if model.plan.has_stack() {
                return Err(usage(
                    "merge needs concat branches; stacked layers add depth and have no counterpart in the base",
                ));
            }
            let store = merge_blocks(&model, a.alpha)?;
            let mut c = Checkpoint::plain(model.spec, store);
            c.meta.insert("merged_alpha".into(), a.alpha.to_string());
            save(&cli.out, &c)?;
            Ok(())
        }
        Command::Sweep(a) => {
            let model = control_model(load(&a.model)?)?;
            let alphas = parse_list::<f64>(&a.alphas, "alphas")?;
            let mut csv = String::from("alpha,task_a_acc,task_b_acc\n");
            for alpha in alphas {
                let view = model.alpha_sweep(alpha)?;
                let (ta, tb) = both_tasks(&view, a.split, a.examples)?;
                let _ = writeln!(csv, "{alpha},{ta:.6},{tb:.6}");
            }
            print!("{csv}");
            write_atomic(&cli.out.join("sweep.csv"), csv.as_bytes())?;
            Ok(())
        }
        Command::CfExperiment(a) => {
            let methods = parse_list::<Method>(&a.methods, "methods")?;
            let seeds = parse_list::<u64>(&a.seeds, "seeds")?;
            let cfg = train_config(&a.train, cli.seed)?;
            let (spec, base) = match &a.base {
                Some(p) => {
                    let c = load(p)?;
                    if c.plan.is_some() {
                        return Err(usage("the shared base must be a plain checkpoint"));
                    }
                    (c.spec, c.store)
                }
                None => {
                    let spec = ModelSpec {
                        seed: cli.seed,
                        ..ModelSpec::default()
                    };
                    let pre = TrainConfig {
                        steps: a.pretrain_steps,
                        ..cfg.clone()
                    };
                    eprintln!("pretraining the shared base on copy_reverse");
                    let (store, log) = pretrain(&spec, TaskKind::CopyReverse, &pre, &mut progress(TaskKind::CopyReverse))?;
                    save(&cli.out.join("base"), &Checkpoint::plain(spec.clone(), store.clone()))?;
                    log.save(&cli.out.join("base").join("metrics.csv"))?;
                    (spec, store)
                }
            };
            let (curve, result) = run_cf(&spec, &base, &methods, &seeds, a.period, &cfg, |m, s, r| {
                eprintln!(
                    "{m} seed {s} step {}: task_a {:.4} task_b {:.4} loss {:.4}",
                    r.step, r.task_a_acc, r.task_b_acc, r.task_loss
                );
            });
            curve.save(&cli.out.join("cf_curve.csv"), &cli.out.join("cf_curve.svg"))?;
            for &seed in &seeds {
                for m in &methods {
                    if let Some(r) = curve.last(m.as_str(), seed) {
                        println!(
                            "seed {seed} {m}: task_a {:.4} task_b {:.4}",
                            r.task_a_acc, r.task_b_acc
                        );
                    }
                }
            }
            result.map_err(|e| Failure::Runtime(anyhow::Error::new(e).context("partial results written")))
        }
    }
}

fn progress(task: TaskKind) -> impl FnMut(&Record, &ParameterStore) -> control_llm::Result<()> {
    move |r, _| {
        eprintln!(
            "step {}: loss {:.4} lr {:.2e} {task} {:.4} (copy_reverse {:.4}, sort {:.4})",
            r.step,
            r.task_loss,
            r.lr,
            r.accuracy(task),
            r.task_a_acc,
            r.task_b_acc
        );
        Ok(())
    }
}

fn train_config(a: &TrainArgs, seed: u64) -> Result<TrainConfig, Failure> {
    let mut cfg = match a.scale.as_str() {
        "desk" => TrainConfig::desk(a.steps),
        "reference" => TrainConfig::reference(a.steps),
        other => return Err(usage(format!("unknown scale `{other}`; use desk or reference"))),
    };
    cfg.batch_size = a.batch_size;
    cfg.eval_examples = a.eval_examples;
    cfg.seed = seed;
    if let Some(e) = a.eval_every {
        cfg.eval_every = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn plan_from(a: &PlanArgs, n_layers: usize) -> Result<ExpansionPlan, Failure> {
    if let Some(m) = a.method {
        if !m.is_expanded() {
            return Err(usage(format!("{m} does not expand the model")));
        }
        return Ok(m.plan(n_layers, a.period)?.expect("expanding method has a plan"));
    }
    let interpolator = InterpolatorConfig {
        fixed_alpha: a.alpha,
        learnable_alpha: a.learnable_alpha,
        freeze_bias: !a.train_bias,
        ..InterpolatorConfig::new(a.interpolator)
    };
    let divergence = match a.divergence {
        DivergenceKind::None => DivergenceConfig::none(),
        k => DivergenceConfig::for_interpolator(k, a.interpolator),
    };
    let divergence = DivergenceConfig {
        lambda: a.lambda,
        ..divergence
    };
    Ok(build_expansion_plan(n_layers, a.period, a.strategy, interpolator, divergence)?)
}

fn control_model(c: Checkpoint) -> Result<ControlModel, Failure> {
    let plan = c.plan.ok_or_else(|| usage("checkpoint has no expansion plan"))?;
    Ok(ControlModel {
        spec: c.spec,
        plan,
        store: c.store,
    })
}

fn both_tasks(view: &ModelView<'_>, split: Split, n: usize) -> Result<(f64, f64), Failure> {
    let a = evaluate_task(view, &TaskSpec::new(TaskKind::CopyReverse, 0), split, n)?;
    let b = evaluate_task(view, &TaskSpec::new(TaskKind::Sort, 0), split, n)?;
    Ok((a, b))
}

/// Max |logit difference| between the base and the expanded model on a
/// seeded batch of random tokens.
fn identity_residual(spec: &ModelSpec, base: &ParameterStore, model: &ControlModel, seed: u64) -> Result<f64, Failure> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (batch, seq) = (8, spec.max_seq_len);
    let ids = (0..batch * seq).map(|_| rng.gen_range(0..spec.vocab_size as u32)).collect();
    let tokens = TokenBatch::new(batch, seq, ids)?;
    let (want, _) = forward(&ModelView::base(spec, base), &tokens, false)?;
    let (got, _) = forward(&model.view(), &tokens, false)?;
    Ok(want.max_abs_diff(&got)?)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    let items: Result<Vec<T>, _> = s.split(',').map(|p| p.trim().parse::<T>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(usage(format!("could not parse --{what} `{s}`"))),
    }
}
