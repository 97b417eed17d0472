//! Executes a [`RunConfig`] and writes a self-describing run directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pocon_core::baselines::{run_cassle, run_finetune, run_joint, run_pfr};
use pocon_core::datastream::{
    load_image_dir, make_blurred_stream, make_class_splits, mask_labels, read_packed, synthetic_dataset, DataBundle,
    LabeledDataset, Split, StreamManifest,
};
use pocon_core::evaluation::{evaluate_run, EvalContext};
use pocon_core::pocon::{run_pocon, run_taskfree};
use pocon_core::record::{MetricRecord, RunCounters, RunRecord, SnapshotTrace, StageEvent};
use pocon_core::seeding::SeedBank;
use pocon_core::semisup::run_semisup;
use pocon_nn::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, Method, Precision, RunConfig};
use crate::results::{self, sha256_hex, ResultRow};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const OUTPUT_ROOT_VAR: &str = "POCON_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    /// Path relative to the run directory.
    pub file: String,
    /// One-based task (or stream segment) the checkpoint closes.
    pub task: usize,
    pub sha256: String,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub method: Method,
    pub seed: u64,
    /// Method whose checkpoints a semi-supervised run reads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Method>,
    pub stream: StreamManifest,
    pub stream_hash: String,
    pub counters: RunCounters,
    pub events: Vec<StageEvent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<SnapshotTrace>,
    pub checkpoints: Vec<CheckpointEntry>,
    /// Frozen networks are checked after every stage; a run that finishes passed them all.
    pub freeze_checks_passed: bool,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub runs: Vec<RunEntry>,
    pub results_sha256: String,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Serialize)]
struct SeededRecord<'a> {
    seed: u64,
    #[serde(flatten)]
    record: &'a MetricRecord,
}

/// `dir` if given, else `$POCON_OUTPUT_ROOT/<name>`, else `runs/<name>`.
pub fn output_dir(cfg: &RunConfig, dir: Option<PathBuf>) -> PathBuf {
    dir.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&cfg.name)
    })
}

/// Runs every method for every seed and writes the run directory.
pub fn execute(cfg: &RunConfig, dir: &Path, force: bool) -> Result<Manifest> {
    if dir.join(MANIFEST_FILE).exists() && !force {
        bail!("{} already holds a run; pass --force to overwrite it", dir.display());
    }
    std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    match cfg.precision {
        Precision::F32 => execute_typed::<f32>(cfg, dir),
        Precision::F64 => execute_typed::<f64>(cfg, dir),
    }
}

/// Methods in execution order: trained methods first, then readers of their checkpoints.
fn schedule(cfg: &RunConfig) -> Vec<Method> {
    let mut order: Vec<Method> = Vec::new();
    for &m in &cfg.methods {
        if m != Method::Semisup && !order.contains(&m) {
            order.push(m);
        }
    }
    if cfg.methods.contains(&Method::Semisup) {
        if !order.contains(&cfg.semisup.base) {
            order.push(cfg.semisup.base);
        }
        order.push(Method::Semisup);
    }
    order
}

fn load_data<T: Scalar>(cfg: &RunConfig) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let d = &cfg.data;
    Ok(match d.source {
        DataSource::Synthetic => synthetic_dataset::<T>(&d.synthetic).context("generating synthetic data")?,
        DataSource::Packed => {
            let read = |p: &Path, split| -> Result<LabeledDataset<T>> {
                let path = p.to_path_buf();
                let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                read_packed(std::io::BufReader::new(f), split).with_context(|| format!("reading {}", path.display()))
            };
            let train = read(d.train_path.as_deref().context("data.train_path")?, Split::Train)?;
            let test = read(d.test_path.as_deref().context("data.test_path")?, Split::Test)?;
            (train, test)
        }
        DataSource::ImageDir => {
            let root = d.root.clone().context("data.root")?;
            let (train, names) = load_image_dir(&root.join("train"), Split::Train)
                .with_context(|| format!("loading {}", root.join("train").display()))?;
            let (test, test_names) = load_image_dir(&root.join("test"), Split::Test)
                .with_context(|| format!("loading {}", root.join("test").display()))?;
            if names != test_names {
                bail!("train and test class directories differ under {}", root.display());
            }
            (train, test)
        }
    })
}

fn execute_typed<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    let config_hash = cfg.hash();
    let pcfg = cfg.pocon();
    let (train, test) = load_data::<T>(cfg)?;
    let tasks = cfg.data.num_tasks;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);

    for &seed in &cfg.seeds {
        let bank = SeedBank::new(seed);
        let bundle = DataBundle::new(train.clone(), None, test.clone(), bank.data())?;
        let stream = make_class_splits(&bundle.train, tasks, bank.data())?;
        let ctx = EvalContext { bundle: &bundle, stream: &stream, probe: &cfg.eval.probe, seed: bank.probe() };
        let mut records: BTreeMap<Method, RunRecord<T>> = BTreeMap::new();

        for method in schedule(cfg) {
            log::info!("seed {seed}: running {method}");
            let t0 = Instant::now();
            if method == Method::Semisup {
                let base = records.get(&cfg.semisup.base).context("semi-supervised base run missing")?;
                let sc = cfg.semisup.core();
                let masked = mask_labels(&bundle.train, sc.label_fraction, bank.derive("labels"))?;
                let res = run_semisup(base, &stream, &masked, &bundle.test, &bundle.normalization, &sc)
                    .with_context(|| format!("seed {seed}: semisup"))?;
                for (t, acc) in res.seen_accuracy.iter().enumerate() {
                    rows.push(ResultRow::new(method.name(), tasks, seed, t + 1, "semisup_seen_accuracy", *acc));
                }
                rows.push(ResultRow::new(method.name(), tasks, seed, tasks, "final_accuracy", res.final_accuracy));
                runs.push(RunEntry {
                    method,
                    seed,
                    base: Some(cfg.semisup.base),
                    stream: stream.manifest(),
                    stream_hash: stream.manifest().hash(),
                    counters: RunCounters::default(),
                    events: Vec::new(),
                    trace: Vec::new(),
                    checkpoints: Vec::new(),
                    freeze_checks_passed: true,
                    wall_seconds: t0.elapsed().as_secs_f64(),
                });
                continue;
            }

            let mut stream_manifest = stream.manifest();
            let normalization = &bundle.normalization;
            let rec = match method {
                Method::Pocon => run_pocon(&bundle.train, &stream, &pcfg, normalization, &bank),
                Method::Ft => run_finetune(&bundle.train, &stream, &pcfg, normalization, &bank),
                Method::Pfr => run_pfr(&bundle.train, &stream, &pcfg, &cfg.baselines, normalization, &bank),
                Method::Cassle => run_cassle(&bundle.train, &stream, &pcfg, &cfg.baselines, normalization, &bank),
                Method::Joint => run_joint(&bundle.train, &stream, &pcfg, normalization, &bank),
                Method::PoconTaskfree => {
                    let tf = cfg.taskfree.as_ref().context("taskfree section missing")?;
                    let blurred = make_blurred_stream(&stream, tf.beta, tf.iterations, bank.derive("blurred"))?;
                    stream_manifest = blurred.manifest(&stream);
                    run_taskfree(&bundle.train, &stream, &blurred, &tf.core(), &pcfg, normalization, &bank)
                }
                Method::Semisup => unreachable!(),
            }
            .with_context(|| format!("seed {seed}: {method}"))?;

            for r in &rec.log.records {
                serde_json::to_writer(&mut metrics, &SeededRecord { seed, record: r })?;
                metrics.write_all(b"\n")?;
            }
            let checkpoints = write_checkpoints(dir, method, seed, &rec, &config_hash)?;
            rows.extend(evaluate(&rec, &ctx, method, cfg, seed).with_context(|| format!("seed {seed}: evaluating {method}"))?);
            runs.push(RunEntry {
                method,
                seed,
                base: None,
                stream_hash: stream_manifest.hash(),
                stream: stream_manifest,
                counters: rec.counters.clone(),
                events: rec.events.clone(),
                trace: rec.trace.clone(),
                checkpoints,
                freeze_checks_passed: true,
                wall_seconds: t0.elapsed().as_secs_f64(),
            });
            records.insert(method, rec);
        }
    }
    metrics.flush()?;

    let rows = results::sorted(rows);
    let results_sha256 = results::write_results(dir, &rows)?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        config_hash,
        runs,
        results_sha256,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn checkpoint_name(method: Method, seed: u64, task: usize) -> String {
    format!("{CHECKPOINT_DIR}/{method}_seed{seed}_task{task}.ckpt")
}

fn write_checkpoints<T: Scalar>(
    dir: &Path,
    method: Method,
    seed: u64,
    rec: &RunRecord<T>,
    config_hash: &str,
) -> Result<Vec<CheckpointEntry>> {
    rec.checkpoints
        .iter()
        .enumerate()
        .map(|(t, snap)| {
            let file = checkpoint_name(method, seed, t + 1);
            let bytes = snap.to_checkpoint(config_hash).to_bytes();
            std::fs::write(dir.join(&file), &bytes).with_context(|| format!("writing {file}"))?;
            Ok(CheckpointEntry { file, task: t + 1, sha256: sha256_hex(&bytes), fingerprint: snap.fingerprint() })
        })
        .collect()
}

fn evaluate<T: Scalar>(
    rec: &RunRecord<T>,
    ctx: &EvalContext<'_, T>,
    method: Method,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let tasks = cfg.data.num_tasks;
    let name = method.name();
    let sequential = method != Method::Joint;
    let anchors: &[usize] = if sequential { &cfg.eval.anchors } else { &[] };
    let summary = evaluate_run(rec, ctx, anchors)?;
    let mut rows = vec![ResultRow::new(name, tasks, seed, tasks, "final_accuracy", summary.final_accuracy)];
    if sequential {
        for (t, v) in summary.plasticity.iter().enumerate() {
            rows.push(ResultRow::new(name, tasks, seed, t + 1, "plasticity", *v));
        }
        for curve in &summary.stability {
            let metric = format!("stability_a{}", curve.anchor_task);
            for (i, v) in curve.accuracies.iter().enumerate() {
                rows.push(ResultRow::new(name, tasks, seed, curve.anchor_task + i, metric.clone(), *v));
            }
        }
    }
    Ok(rows)
}
