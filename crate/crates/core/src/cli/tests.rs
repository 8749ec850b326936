use super::config::{ablation_overrides, RunConfig};
use super::*;
use crate::losses::TdKind;

fn tiny_overrides() -> Vec<String> {
    [
        "env.tasks=[\"twin_goals\", \"cliff\"]",
        "env.held_out=[\"coin_ring\"]",
        "data.episodes=12",
        "data.fraction=0.5",
        "net.conv_channels=[4]",
        "net.group_size=4",
        "net.trunk_width=16",
        "net.hidden_width=16",
        "net.hidden_layers=1",
        "train.steps=20",
        "train.m_tasks=2",
        "train.k_per_task=4",
        "train.lr=1e-3",
        "train.target_sync=5",
        "train.eval_interval=10",
        "train.checkpoint_every=10",
        "eval.episodes=3",
        "finetune.offline_steps=10",
        "finetune.online_reference_frames=64",
        "finetune.budget_divisor=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn tiny() -> RunConfig {
    RunConfig::default().with_overrides(&tiny_overrides()).unwrap()
}

fn cli(root: &Path, args: &[&str]) -> i32 {
    let mut all = vec!["scaledql".to_string(), "--root".into(), root.display().to_string()];
    all.extend(args.iter().map(|s| s.to_string()));
    run(all)
}

#[test]
fn defaults_round_trip_through_toml() {
    let cfg = RunConfig::default();
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    // an empty document is the defaults
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn shipped_quick_config_is_valid() {
    let cfg = RunConfig::from_toml(include_str!("../../../../configs/quick.toml")).unwrap();
    assert_eq!(cfg.env.tasks.len(), 6);
    assert_eq!(cfg.net.conv_channels, vec![8, 8]);
    assert_eq!(cfg.train.target_sync, 250);
}

#[test]
fn default_config_carries_the_desk_hyperparameters() {
    let cfg = RunConfig::default();
    let t = cfg.train_config().unwrap();
    assert_eq!(t.batch_size(), 64);
    assert!((t.lr - 1e-4).abs() < 1e-15);
    assert_eq!(t.target_sync, 2000);
    let l = cfg.loss_config();
    assert_eq!(l.td, TdKind::C51);
    assert_eq!(l.alpha, 0.05);
    assert_eq!(l.n_step, 3);
    assert_eq!(cfg.net.atoms, 51);
    assert_eq!((cfg.net.v_min, cfg.net.v_max), (-20.0, 20.0));
}

#[test]
fn unknown_keys_are_rejected() {
    let err = RunConfig::from_toml("[train]\nstepz = 3\n").unwrap_err();
    assert!(err.to_string().contains("stepz"), "{err}");
    assert_eq!(exit_code(&err), 2);
    assert!(RunConfig::from_toml("[trian]\nsteps = 3\n").is_err());
    assert!(RunConfig::default().with_overrides(&["train.nope=1"]).is_err());
}

#[test]
fn invalid_values_are_rejected() {
    for bad in [
        "train.lr=0",
        "data.fraction=1.5",
        "env.tasks=[\"no_such_task\"]",
        "env.held_out=[\"twin_goals\"]",
        "loss.td=huber",
        "net.conv_channels=[]",
    ] {
        assert!(RunConfig::default().with_overrides(&[bad]).is_err(), "{bad} accepted");
    }
}

#[test]
fn overrides_land_in_the_resolved_config_and_hash() {
    let base = RunConfig::default();
    let cfg = base
        .with_overrides(&["train.steps=1234", "td_mode=mse", "feature_norm=off", "report.dir=out"])
        .unwrap();
    assert_eq!(cfg.train.steps, 1234);
    assert_eq!(cfg.loss.td, TdKind::Mse);
    assert!(!cfg.net.feature_norm);
    assert_eq!(cfg.report.dir, "out");
    // the MSE preset weight applies when alpha is not pinned
    assert_eq!(cfg.loss_config().alpha, 0.1);
    assert_ne!(cfg.hash(), base.hash());
    let text = cfg.to_toml();
    assert!(text.contains("steps = 1234"), "{text}");
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn head_follows_objective_and_td() {
    let c51 = RunConfig::default();
    assert!(c51.head().unwrap().support().is_some());
    let mse = c51.with_overrides(&["loss.td=mse"]).unwrap();
    assert!(mse.head().unwrap().support().is_none());
    let bc = c51.with_overrides(&["train.objective=bc"]).unwrap();
    assert!(bc.head().unwrap().support().is_none());
    let net = bc.net_config(vec![4, 3]).unwrap();
    bc.train_config().unwrap().check_head(&net.head).unwrap();
}

#[test]
fn ablation_lists_expand_one_key() {
    let (key, arms) = ablation_overrides("td_mode=mse,c51").unwrap();
    assert_eq!(key, "loss.td");
    assert_eq!(arms, vec!["loss.td=mse", "loss.td=c51"]);
    let (key, arms) = ablation_overrides("feature_norm=on,off").unwrap();
    assert_eq!(key, "net.feature_norm");
    let cfgs: Vec<RunConfig> = arms.iter().map(|a| RunConfig::default().with_overrides(&[a]).unwrap()).collect();
    assert!(cfgs[0].net.feature_norm && !cfgs[1].net.feature_norm);
    assert!(ablation_overrides("td_mode=mse").is_err());
    assert!(ablation_overrides("td_mode").is_err());
}

#[test]
fn exit_codes_are_stable() {
    use std::path::PathBuf;
    assert_eq!(exit_code(&Error::invalid("x")), 2);
    assert_eq!(exit_code(&Error::OutOfRange("x".into())), 2);
    assert_eq!(exit_code(&Error::Format { offset: 0, msg: "x".into() }), 2);
    assert_eq!(
        exit_code(&Error::io("p", std::io::Error::new(std::io::ErrorKind::Other, "x"))),
        3
    );
    assert_eq!(exit_code(&Error::Diverged { step: 1, checkpoint: Some(PathBuf::from("c")) }), 4);
    assert_eq!(exit_code(&Error::NumericOverflow { op: "x" }), 4);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(cli(root, &["train"]), 2, "train without datasets");
    assert_eq!(cli(root, &["stats"]), 2);
    assert_eq!(cli(root, &["eval", "--run", "runs/none"]), 3, "missing run config is an I/O error");
    assert_eq!(cli(root, &["--config", "absent.toml", "list-envs"]), 3);
    assert_eq!(cli(root, &["--set", "train.bogus=1", "list-envs"]), 2);
    assert_eq!(cli(root, &["no-such-command"]), 2);
    std::fs::write(root.join("bad.toml"), "[net]\nwidth = 3\n").unwrap();
    assert_eq!(cli(root, &["--config", "bad.toml", "list-envs"]), 2);
}

#[test]
fn unwritable_data_dir_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // a regular file where the data directory should go
    std::fs::write(dir.path().join("blocked"), "").unwrap();
    let mut args: Vec<String> = vec!["gen-data".into(), "--set".into(), "data.dir=blocked/data".into()];
    for o in tiny_overrides() {
        args.push("--set".into());
        args.push(o);
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(cli(dir.path(), &refs), 3);
}

#[test]
fn lock_file_blocks_a_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    let lock = commands::DirLock::acquire(dir.path()).unwrap();
    let err = commands::DirLock::acquire(dir.path()).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    drop(lock);
    commands::DirLock::acquire(dir.path()).unwrap();
}

#[test]
fn config_env_var_names_the_default_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nsteps = 77\n").unwrap();
    let flag = load_config(dir.path(), Some(Path::new("c.toml")), &[]).unwrap();
    assert_eq!(flag.train.steps, 77);
    let over = load_config(dir.path(), Some(Path::new("c.toml")), &["train.steps=5".into()]).unwrap();
    assert_eq!(over.train.steps, 5);
}

#[test]
fn pipeline_runs_end_to_end_and_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny();
    let (_, manifest) = commands::gen_data(root, &cfg).unwrap();
    assert_eq!(manifest.tasks.len(), 3);
    for t in &manifest.tasks {
        assert!(root.join("data").join(&t.file).exists());
        assert_eq!(t.episodes, 12);
    }
    // regenerating gives byte-identical files
    let first = std::fs::read(root.join("data/twin_goals.sqd")).unwrap();
    commands::gen_data(root, &cfg).unwrap();
    assert_eq!(std::fs::read(root.join("data/twin_goals.sqd")).unwrap(), first);

    let store = commands::load_tasks(root, &cfg, &cfg.env.tasks).unwrap();
    assert_eq!(store.num_tasks(), 2);
    assert_eq!(store.tasks[1].task_id, 1);

    let a = commands::train(root, &cfg, "a").unwrap();
    let b = commands::train(root, &cfg, "b").unwrap();
    assert_ne!(a.run_dir, b.run_dir);
    assert_eq!(a.report.aggregates, b.report.aggregates, "same seed, same result");
    for f in ["config.toml", "meta.json", "log.jsonl", "report/report.json", "report/scores.csv", "report/profile.svg"] {
        assert!(a.run_dir.join(f).exists(), "{f} missing");
    }
    assert!(!a.run_dir.join(".lock").exists());
    let embedded = commands::read_run_config(&a.run_dir).unwrap();
    assert_eq!(embedded, cfg);

    // a single run's report repeats its final evaluation
    let single = commands::run_report(&a.run_dir).unwrap();
    assert_eq!(single.aggregates, a.report.aggregates);

    let (_, ev) = commands::eval(&a.run_dir, &cfg, None).unwrap();
    assert_eq!(ev.meta.step, 20);
    assert_eq!(ev.per_task.len(), 2);

    let runs = vec![a.run_dir.clone(), b.run_dir.clone()];
    let (out, _) = commands::report(root, &cfg, &runs).unwrap();
    let csv1 = std::fs::read(out.join("comparison.csv")).unwrap();
    let svg1 = std::fs::read(out.join("profile.svg")).unwrap();
    commands::report(root, &cfg, &runs).unwrap();
    assert_eq!(std::fs::read(out.join("comparison.csv")).unwrap(), csv1);
    assert_eq!(std::fs::read(out.join("profile.svg")).unwrap(), svg1);

    let (ft_dir, cmp) = commands::finetune(root, &a.run_dir, &cfg, FinetuneMode::Offline, None).unwrap();
    assert!(ft_dir.join("pretrained/log.jsonl").exists());
    assert!(ft_dir.join("comparison.csv").exists());
    assert_eq!(cmp.scratch.log.last().unwrap().per_task.len(), 1);

    let (_, online) = commands::finetune(root, &a.run_dir, &cfg, FinetuneMode::Online, Some("shifted_start")).unwrap();
    assert_eq!(online.pretrained.log.last().unwrap().step, 32);
    assert!(commands::finetune(root, &a.run_dir, &cfg, FinetuneMode::Online, Some("hazard_fast")).is_err());
}

#[test]
fn report_rejects_mismatched_suites() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny();
    commands::gen_data(root, &cfg).unwrap();
    let a = commands::train(root, &cfg, "a").unwrap();
    let other = cfg.with_overrides(&["env.tasks=[\"cliff\"]"]).unwrap();
    let b = commands::train(root, &other, "b").unwrap();
    let err = commands::report(root, &cfg, &[a.run_dir, b.run_dir]).unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn ablation_writes_one_run_per_value_and_a_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny();
    commands::gen_data(root, &cfg).unwrap();
    let (runs, cmp) = commands::train_ablation(root, &cfg, "td_mode=mse,c51").unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].report.meta.label, "loss.td=mse");
    assert_eq!(commands::read_run_config(&runs[0].run_dir).unwrap().loss.td, TdKind::Mse);
    assert_eq!(commands::read_run_config(&runs[1].run_dir).unwrap().loss.td, TdKind::C51);
    let csv = std::fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert!(csv.contains("loss.td=mse") && csv.contains("loss.td=c51"), "{csv}");
}

#[test]
fn cli_drives_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("tiny.toml");
    std::fs::write(&cfg_path, tiny().to_toml()).unwrap();
    assert_eq!(cli(root, &["--config", "tiny.toml", "gen-data", "--fraction", "0.5"]), 0);
    assert_eq!(cli(root, &["--config", "tiny.toml", "stats"]), 0);
    assert_eq!(cli(root, &["--config", "tiny.toml", "train"]), 0);
    let runs: Vec<_> = std::fs::read_dir(root.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = runs[0].display().to_string();
    assert_eq!(cli(root, &["eval", "--run", &run]), 0);
    assert_eq!(cli(root, &["--config", "tiny.toml", "report", &run]), 0);
    assert!(root.join("reports/comparison.csv").exists());
    // a changed fraction invalidates nothing: slicing happens at load time
    assert_eq!(cli(root, &["--config", "tiny.toml", "train", "--fraction", "1.0"]), 0);
    // but changed collection settings do
    assert_eq!(cli(root, &["--config", "tiny.toml", "--set", "data.episodes=13", "train"]), 2);
}
