use std::path::Path;
use std::process::{Command, Output};

use control_llm::checkpoint::load;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_control-llm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: [&str; 8] = ["--steps", "4", "--batch-size", "4", "--eval-every", "2", "--eval-examples", "4"];

fn pretrain(out: &Path) {
    let mut args = vec!["pretrain", "--n-layers", "2", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn expand(base: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "expand",
        "--base",
        base.to_str().unwrap(),
        "--period",
        "1",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(extra);
    run(&args)
}

#[test]
fn pretrain_is_reproducible_and_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a/nested"), dir.path().join("b"));
    pretrain(&a);
    pretrain(&b);
    assert!(load(&a).unwrap().store.bit_eq(&load(&b).unwrap().store));
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,method,task_loss,div_loss,lr,task_a_acc,task_b_acc\n"));
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn strict_gate_fails_an_undertrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["--strict", "pretrain", "--n-layers", "2", "--out", dir.path().to_str().unwrap()];
    args.extend(TINY);
    assert_eq!(code(&run(&args)), 3);
}

#[test]
fn expand_reports_identity_and_records_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    pretrain(&base);
    for (i, extra) in [
        vec!["--strategy", "concat", "--interpolator", "dlerp"],
        vec!["--strategy", "stack"],
        vec!["--strategy", "hybrid", "--interpolator", "moe"],
        vec!["--method", "concat_plerp"],
    ]
    .into_iter()
    .enumerate()
    {
        let out = dir.path().join(format!("x{i}"));
        let o = expand(&base, &out, &extra);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let line = stdout(&o);
        let residual: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
        assert!(residual <= 1e-5, "{line}");
        assert!(load(&out).unwrap().plan.is_some());
    }
    let o = expand(&base, &dir.path().join("bad"), &["--period", "9"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn merge_sweep_probe_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    pretrain(&base);
    let lerp = dir.path().join("lerp");
    assert_eq!(code(&expand(&base, &lerp, &["--method", "concat_lerp_mse"])), 0);

    let merged = dir.path().join("merged");
    let o = run(&["merge", "--model", lerp.to_str().unwrap(), "--alpha", "0", "--out", merged.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(load(&merged).unwrap().store.bit_eq(&load(&base).unwrap().store));

    let o = run(&[
        "sweep", "--model", lerp.to_str().unwrap(), "--alphas", "0,0.5,1", "--examples", "4",
        "--out", dir.path().join("sweep").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = run(&["probe", "--model", lerp.to_str().unwrap(), "--out", dir.path().join("probe").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for line in stdout(&o).lines().filter(|l| l.starts_with("layer")) {
        assert!(line.contains("cosine 1.000000") && line.contains("distance 0.000000"), "{line}");
    }
    assert!(dir.path().join("probe/probe_report.svg").exists());

    let o = run(&["eval", "--model", base.to_str().unwrap(), "--examples", "4", "--out", dir.path().join("eval").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("task_a_acc,task_b_acc\n"));

    let stack = dir.path().join("stack");
    assert_eq!(code(&expand(&base, &stack, &["--strategy", "stack"])), 0);
    let o = run(&["merge", "--model", stack.to_str().unwrap(), "--out", dir.path().join("m2").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stack"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nsteps=2\nbatch_size=2\neval_every=1\neval_examples=2\nn_layers=1\n").unwrap();
    let out = dir.path().join("o");
    let o = run(&["--config", cfg.to_str().unwrap(), "pretrain", "--steps", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    // evaluations at steps 0, 1, 2 and the final 3
    assert_eq!(csv.lines().count(), 1 + 4);
    assert_eq!(load(&out).unwrap().spec.n_layers, 1);

    std::fs::write(&cfg, "no_such_flag=1\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "pretrain", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn finetune_and_cf_experiment_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    pretrain(&base);
    let ft = dir.path().join("ft");
    let mut args = vec![
        "finetune", "--model", base.to_str().unwrap(), "--mode", "partial_param", "--period", "1",
        "--save-checkpoints", "--out", ft.to_str().unwrap(),
    ];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ft.join("step-2/manifest.json").exists());
    assert!(stdout(&o).contains("best sort step"));

    let cf = dir.path().join("cf");
    let mut args = vec![
        "cf-experiment", "--base", base.to_str().unwrap(), "--methods", "full_param,stack",
        "--seeds", "0,1", "--period", "1", "--out", cf.to_str().unwrap(),
    ];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(cf.join("cf_curve.csv")).unwrap();
    assert!(csv.starts_with("step,method,seed,task_a_acc,task_b_acc\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    assert!(std::fs::read_to_string(cf.join("cf_curve.svg")).unwrap().contains("<polyline"));

    let o = run(&["cf-experiment", "--methods", "nonsense", "--out", cf.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
