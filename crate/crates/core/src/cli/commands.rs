//! The subcommands. Each returns what it wrote so callers and tests can
//! inspect the outcome without scraping stdout.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ablation_overrides, RunConfig};
use crate::datasets::{slice_fraction, TaskDatasetStore};
use crate::envs::{build_schedule, find_task, generate_dataset, make_variant, SolvedTask, VARIANTS};
use crate::error::{Error, Result};
use crate::evalstats::{comparison_csv, default_thresholds, profile_svg, EvalReport, RunMeta};
use crate::qnet::{Checkpoint, QNetwork};
use crate::trainer::{
    eval_seed, finetune_offline, finetune_online, ArmResult, EvalRecord, EvalSuite,
    FinetuneComparison, RunLog, Trainer,
};

/// Holds `<dir>/.lock` for as long as it lives.
#[derive(Debug)]
pub struct DirLock(PathBuf);

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidState(format!(
                "{} is locked by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Format {
        offset: 0,
        msg: format!("{}: {e}", path.display()),
    }
}

/// FNV-1a, used to give every task its own data seed independent of order.
fn name_salt(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn solve(cfg: &RunConfig, names: &[String]) -> Result<EvalSuite> {
    let tasks = names
        .iter()
        .map(|n| SolvedTask::new(find_task(n)?, cfg.loss.gamma))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSuite::new(tasks))
}

/// One generated task in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub actions: usize,
    pub episodes: usize,
    pub transitions: usize,
    pub weak_sweeps: usize,
    /// Normalized behavior score of the configured leading slice.
    pub slice_score: f64,
    /// Normalized behavior score of the whole collection.
    pub full_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the settings that determine the collections.
    pub data_hash: String,
    pub fraction: f64,
    pub tasks: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.tasks.iter().find(|t| t.name == name)
    }
}

/// Settings that change the generated data; the slice fraction and
/// training knobs do not.
fn data_hash(cfg: &RunConfig) -> String {
    let mut probe = RunConfig::default();
    probe.env.sticky = cfg.env.sticky;
    probe.env.seed = cfg.env.seed;
    probe.data = cfg.data.clone();
    probe.data.fraction = 1.0;
    probe.data.slice_unit = crate::datasets::SliceUnit::Episodes;
    probe.data.dir = String::new();
    probe.loss.gamma = cfg.loss.gamma;
    probe.hash()
}

/// Collects every pretraining and held-out task and writes one dataset
/// file per task plus `manifest.json` into the data directory.
pub fn gen_data(root: &Path, cfg: &RunConfig) -> Result<(PathBuf, Manifest)> {
    let dir = root.join(&cfg.data.dir);
    let _lock = DirLock::acquire(&dir)?;
    let schedule = cfg.schedule();
    let mut entries = Vec::new();
    for name in cfg.env.tasks.iter().chain(&cfg.env.held_out) {
        let task = SolvedTask::new(find_task(name)?, cfg.loss.gamma)?;
        let seed = cfg.env.seed ^ name_salt(name);
        let (policy, info) = build_schedule(&task.game, &task.oracle, &schedule, cfg.env.sticky, seed)?;
        let (data, _) = generate_dataset(
            &task.game,
            &task.oracle.space,
            &policy,
            0,
            cfg.data.episodes,
            cfg.env.sticky,
            seed.wrapping_add(1),
        )?;
        let store = TaskDatasetStore::new(vec![data])?;
        let file = format!("{name}.sqd");
        store.save(&dir.join(&file))?;
        let slice = slice_fraction(&store, cfg.data.fraction, cfg.data.slice_unit)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            file,
            actions: task.game.num_actions(),
            episodes: store.tasks[0].episodes().len(),
            transitions: store.num_transitions(),
            weak_sweeps: info.weak_sweeps,
            slice_score: task.normalize(slice.tasks[0].mean_return()),
            full_score: task.normalize(store.tasks[0].mean_return()),
        });
    }
    let manifest = Manifest {
        data_hash: data_hash(cfg),
        fraction: cfg.data.fraction,
        tasks: entries,
    };
    let path = dir.join("manifest.json");
    write_file(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    Ok((dir, manifest))
}

pub fn read_manifest(root: &Path, cfg: &RunConfig) -> Result<Manifest> {
    let path = root.join(&cfg.data.dir).join("manifest.json");
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no datasets at {}; run gen-data first",
            path.display()
        )));
    }
    let text = read_file(&path)?;
    serde_json::from_str(&text).map_err(|e| json_error(&path, e))
}

/// Loads `names` in order as one store, sliced per the config. Task ids
/// are renumbered to the load order.
pub fn load_tasks(root: &Path, cfg: &RunConfig, names: &[String]) -> Result<TaskDatasetStore> {
    let manifest = read_manifest(root, cfg)?;
    if manifest.data_hash != data_hash(cfg) {
        return Err(Error::invalid(
            "datasets were generated with different data settings; rerun gen-data",
        ));
    }
    let dir = root.join(&cfg.data.dir);
    let mut tasks = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let entry = manifest
            .entry(name)
            .ok_or_else(|| Error::invalid(format!("no dataset for task {name}; rerun gen-data")))?;
        let mut store = TaskDatasetStore::load(&dir.join(&entry.file))?;
        let mut t = store.tasks.pop().ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("{} holds no task", entry.file),
        })?;
        t.task_id = i as u32;
        tasks.push(t);
    }
    slice_fraction(&TaskDatasetStore::new(tasks)?, cfg.data.fraction, cfg.data.slice_unit)
}

/// Resolved config and hash, stored next to every run's artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetaFile {
    pub command: String,
    pub config_hash: String,
    pub created_unix: u64,
    pub config: RunConfig,
}

/// A fresh `runs/<unix-ts>-<hash16>` directory, locked while in use.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    _lock: DirLock,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &RunConfig, command: &str) -> Result<Self> {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let hash = cfg.hash();
        let runs = root.join("runs");
        std::fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        let base = format!("{created_unix}-{}", &hash[..16]);
        let mut path = runs.join(&base);
        let mut n = 1;
        loop {
            match std::fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    path = runs.join(format!("{base}-{n}"));
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        let lock = DirLock::acquire(&path)?;
        write_file(&path.join("config.toml"), cfg.to_toml())?;
        let meta = RunMetaFile {
            command: command.into(),
            config_hash: hash,
            created_unix,
            config: cfg.clone(),
        };
        write_file(
            &path.join("meta.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
        )?;
        Ok(RunDir { path, _lock: lock })
    }
}

pub fn read_run_config(run: &Path) -> Result<RunConfig> {
    RunConfig::from_toml(&read_file(&run.join("config.toml"))?)
}

fn report_from_record(record: &EvalRecord, meta: RunMeta) -> Result<EvalReport> {
    EvalReport::from_entries(meta, record.per_task.clone(), &default_thresholds())
}

/// What `train` produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub report: EvalReport,
}

/// Pretrains on the configured tasks, logging to `log.jsonl`, saving
/// checkpoints under `checkpoints/`, and writing the final report.
pub fn train(root: &Path, cfg: &RunConfig, label: &str) -> Result<TrainOutcome> {
    let store = load_tasks(root, cfg, &cfg.env.tasks)?;
    let suite = solve(cfg, &cfg.env.tasks)?;
    let run = RunDir::create(root, cfg, "train")?;
    let net = QNetwork::new(cfg.net_config(store.action_counts())?, cfg.env.seed)?;
    let mut trainer = Trainer::new(cfg.train_config()?, net)?;
    let mut log = RunLog::with_file(&run.path.join("log.jsonl"))?;
    trainer.run(&store, Some(&suite), &mut log, Some(&run.path.join("checkpoints")))?;
    let last = log.last().ok_or_else(|| Error::InvalidState("run recorded no evaluation".into()))?;
    let report = report_from_record(
        last,
        RunMeta {
            label: label.into(),
            config_hash: cfg.hash(),
            seed: cfg.env.seed,
            step: last.step,
        },
    )?;
    report.emit(&run.path.join("report"), &cfg.report.formats)?;
    Ok(TrainOutcome {
        run_dir: run.path.clone(),
        report,
    })
}

/// One run per value of a single key, plus a comparison of their final
/// reports under the report directory.
pub fn train_ablation(root: &Path, cfg: &RunConfig, spec: &str) -> Result<(Vec<TrainOutcome>, PathBuf)> {
    let (key, overrides) = ablation_overrides(spec)?;
    // resolve every arm before running any, so a bad value fails fast
    let arms = overrides
        .iter()
        .map(|o| Ok((o.split_once('=').expect("key=value").1.to_string(), cfg.with_overrides(&[o])?)))
        .collect::<Result<Vec<_>>>()?;
    let mut outcomes = Vec::new();
    for (value, arm_cfg) in &arms {
        outcomes.push(train(root, arm_cfg, &format!("{key}={value}"))?);
    }
    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let out = root
        .join(&cfg.report.dir)
        .join(format!("ablation-{}-{}", key.replace('.', "_"), &cfg.hash()[..16]));
    write_comparison(&out, &reports)?;
    Ok((outcomes, out))
}

fn write_comparison(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    write_file(&dir.join("comparison.csv"), comparison_csv(reports)?)?;
    let curves: Vec<(&str, &[(f64, f64)])> = reports
        .iter()
        .map(|r| (r.meta.label.as_str(), r.profile.as_slice()))
        .collect();
    write_file(&dir.join("profile.svg"), profile_svg(&curves))
}

/// Newest checkpoint of a run.
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = run.join("checkpoints");
    let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step-") && n.ends_with(".ckpt"))
        })
        .collect();
    // zero-padded step numbers sort lexicographically
    found.sort();
    found
        .pop()
        .ok_or_else(|| Error::invalid(format!("no checkpoints in {}", dir.display())))
}

fn load_network(path: &Path) -> Result<(QNetwork, u64)> {
    if !path.exists() {
        return Err(Error::invalid(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let step = ck.step;
    Ok((Trainer::from_checkpoint(ck)?.into_network(), step))
}

/// Evaluates a checkpoint of `run` on its pretraining suite and writes the
/// report to `<run>/eval-<step>/`.
pub fn eval(run: &Path, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(PathBuf, EvalReport)> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(run)?,
    };
    let (net, step) = load_network(&path)?;
    let suite = solve(cfg, &cfg.env.tasks)?;
    let matrix = suite.evaluate_net(&net, cfg.eval.episodes, cfg.eval.epsilon, eval_seed(cfg.env.seed, step))?;
    let report = EvalReport::from_matrix(
        &matrix,
        RunMeta {
            label: "eval".into(),
            config_hash: cfg.hash(),
            seed: cfg.env.seed,
            step,
        },
        &default_thresholds(),
    )?;
    let out = run.join(format!("eval-{step:08}"));
    let _lock = DirLock::acquire(&out)?;
    report.emit(&out, &cfg.report.formats)?;
    Ok((out, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FinetuneMode {
    Offline,
    Online,
}

fn arm_report(arm: &ArmResult, cfg: &RunConfig) -> Result<EvalReport> {
    let last = arm
        .log
        .last()
        .ok_or_else(|| Error::InvalidState(format!("arm {} has no evaluation", arm.label)))?;
    report_from_record(
        last,
        RunMeta {
            label: arm.label.clone(),
            config_hash: cfg.hash(),
            seed: cfg.env.seed,
            step: last.step,
        },
    )
}

/// Fine-tunes the latest checkpoint of a pretraining run against a scratch
/// control; writes both arms' logs and reports into a new run directory.
pub fn finetune(
    root: &Path,
    pretrain_run: &Path,
    cfg: &RunConfig,
    mode: FinetuneMode,
    variant: Option<&str>,
) -> Result<(PathBuf, FinetuneComparison)> {
    let (pretrained, _) = load_network(&latest_checkpoint(pretrain_run)?)?;
    let (cmp, command) = match mode {
        FinetuneMode::Offline => {
            if cfg.env.held_out.is_empty() {
                return Err(Error::invalid("env.held_out is empty"));
            }
            let store = load_tasks(root, &full_data(cfg), &cfg.env.held_out)?;
            let suite = solve(cfg, &cfg.env.held_out)?;
            let cmp = finetune_offline(&pretrained, &cfg.env.tasks, &suite, &store, &cfg.offline_finetune_config()?)?;
            (cmp, "finetune-offline".to_string())
        }
        FinetuneMode::Online => {
            let name = variant.ok_or_else(|| Error::invalid("online fine-tuning needs --variant"))?;
            let (_, base, id) = VARIANTS
                .iter()
                .find(|(v, _, _)| *v == name)
                .ok_or_else(|| Error::invalid(format!("unknown variant {name}")))?;
            let head = cfg
                .env
                .tasks
                .iter()
                .position(|t| t == base)
                .ok_or_else(|| Error::invalid(format!("variant {name} needs {base} among the pretraining tasks")))?;
            let spec = make_variant(&find_task(base)?, *id)?;
            let task = SolvedTask::new(spec, cfg.loss.gamma)?;
            let cmp = finetune_online(&pretrained, head, &task, &cfg.online_config()?)?;
            (cmp, format!("finetune-online-{name}"))
        }
    };
    let run = RunDir::create(root, cfg, &command)?;
    let mut reports = Vec::new();
    for arm in [&cmp.pretrained, &cmp.scratch] {
        let dir = run.path.join(&arm.label);
        let lines: String = arm
            .log
            .records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect();
        write_file(&dir.join("log.jsonl"), lines)?;
        let report = arm_report(arm, cfg)?;
        report.emit(&dir, &cfg.report.formats)?;
        reports.push(report);
    }
    write_comparison(&run.path, &reports)?;
    Ok((run.path.clone(), cmp))
}

/// Held-out fine-tuning subsamples the whole collection, not the slice.
fn full_data(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.data.fraction = 1.0;
    c
}

/// The final evaluation of a run directory as a report.
pub fn run_report(run: &Path) -> Result<EvalReport> {
    let meta_path = run.join("meta.json");
    let meta: RunMetaFile = serde_json::from_str(&read_file(&meta_path)?).map_err(|e| json_error(&meta_path, e))?;
    let records = RunLog::read(&run.join("log.jsonl"))?;
    let last = records
        .last()
        .ok_or_else(|| Error::invalid(format!("{} has no evaluation records", run.display())))?;
    let label = run
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    report_from_record(
        last,
        RunMeta {
            label,
            config_hash: meta.config_hash,
            seed: meta.config.env.seed,
            step: last.step,
        },
    )
}

/// Merges the final reports of several runs over the same suite.
pub fn report(root: &Path, cfg: &RunConfig, runs: &[PathBuf]) -> Result<(PathBuf, Vec<EvalReport>)> {
    if runs.is_empty() {
        return Err(Error::invalid("report needs at least one run directory"));
    }
    let reports = runs.iter().map(|r| run_report(r)).collect::<Result<Vec<_>>>()?;
    let names = |r: &EvalReport| r.per_task.iter().map(|t| t.name.clone()).collect::<Vec<_>>();
    let first = names(&reports[0]);
    if let Some(r) = reports.iter().find(|r| names(r) != first) {
        return Err(Error::invalid(format!(
            "run {} covers tasks {:?}, expected {:?}",
            r.meta.label,
            names(r),
            first
        )));
    }
    let out = root.join(&cfg.report.dir);
    let _lock = DirLock::acquire(&out)?;
    for r in &reports {
        r.emit(&out.join(&r.meta.label), &cfg.report.formats)?;
    }
    write_comparison(&out, &reports)?;
    Ok((out, reports))
}

/// `name, actions, raw reward scale, random and oracle return` per task.
pub fn list_envs(cfg: &RunConfig) -> Result<String> {
    let mut s = String::from("task\trole\tactions\treward_scale\trandom_return\toracle_return\n");
    let roles = cfg
        .env
        .tasks
        .iter()
        .map(|t| (t, "pretrain"))
        .chain(cfg.env.held_out.iter().map(|t| (t, "held_out")));
    for (name, role) in roles {
        let t = SolvedTask::new(find_task(name)?, cfg.loss.gamma)?;
        s.push_str(&format!(
            "{name}\t{role}\t{}\t{}\t{:.3}\t{:.3}\n",
            t.game.num_actions(),
            t.game.spec().scale,
            t.oracle.random_return,
            t.oracle.oracle_return
        ));
    }
    for (v, base, _) in VARIANTS {
        s.push_str(&format!("{v}\tvariant of {base}\n"));
    }
    Ok(s)
}

/// Per-task sizes and behavior scores of the generated data.
pub fn stats(root: &Path, cfg: &RunConfig) -> Result<String> {
    let manifest = read_manifest(root, cfg)?;
    let mut s = String::from("task\tepisodes\ttransitions\tweak_sweeps\tslice_score\tfull_score\n");
    for t in &manifest.tasks {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.3}\t{:.3}\n",
            t.name, t.episodes, t.transitions, t.weak_sweeps, t.slice_score, t.full_score
        ));
    }
    let pretrain: Vec<f64> = manifest
        .tasks
        .iter()
        .filter(|t| cfg.env.tasks.contains(&t.name))
        .map(|t| t.slice_score)
        .collect();
    if !pretrain.is_empty() {
        s.push_str(&format!(
            "pretraining slice IQM {:.3} (fraction {})\n",
            crate::evalstats::iqm(&pretrain)?,
            manifest.fraction
        ));
    }
    Ok(s)
}
