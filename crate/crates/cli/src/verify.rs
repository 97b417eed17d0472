//! Consistency checks over a finished run directory.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::Result;
use pocon_core::datastream::TaskStream;
use pocon_core::models::{build_encoder, restore, snapshot, ParamSnapshot};
use pocon_nn::{Checkpoint, Scalar};

use crate::config::{Method, Precision};
use crate::results::{self, sha256_hex, RESULTS_FILE};
use crate::runner::{Manifest, RunEntry};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn record(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let manifest = Manifest::read(dir)?;
    let cfg = &manifest.config;
    let mut rep = VerifyReport::default();

    let valid = cfg.validate();
    rep.record("config valid", valid.is_ok(), valid.err().map(|e| e.to_string()).unwrap_or_default());
    let hash = cfg.hash();
    rep.record("config hash", hash == manifest.config_hash, format!("recomputed {hash}"));

    match std::fs::read(dir.join(RESULTS_FILE)) {
        Ok(bytes) => {
            let h = sha256_hex(&bytes);
            rep.record("results hash", h == manifest.results_sha256, format!("recomputed {h}"));
        }
        Err(e) => rep.record("results hash", false, format!("{RESULTS_FILE}: {e}")),
    }
    let rows = results::read_results(dir)?;
    let bad: Vec<_> = rows.iter().filter(|r| !(0.0..=1.0).contains(&r.value)).collect();
    rep.record("metric range", bad.is_empty(), format!("{} values outside [0, 1]", bad.len()));
    let with_final: BTreeSet<(String, u64)> =
        rows.iter().filter(|r| r.metric == "final_accuracy").map(|r| (r.method.clone(), r.seed)).collect();
    let expected: BTreeSet<(String, u64)> = manifest.runs.iter().map(|r| (r.method.name().to_string(), r.seed)).collect();
    rep.record("results coverage", with_final == expected, format!("{} runs, {} with final accuracy", expected.len(), with_final.len()));

    for run in &manifest.runs {
        let label = format!("{} seed {}", run.method, run.seed);
        let h = run.stream.hash();
        rep.record(format!("{label}: stream hash"), h == run.stream_hash, format!("recomputed {h}"));
        if run.stream.kind != "blurred" {
            let ok = TaskStream::from_manifest(&run.stream).map(|s| s.num_tasks() == cfg.data.num_tasks);
            rep.record(format!("{label}: stream replay"), matches!(ok, Ok(true)), format!("{ok:?}"));
        }
        rep.record(format!("{label}: freeze checks"), run.freeze_checks_passed, "");
        let (ok, detail) = counters_ok(run, cfg.data.num_tasks, cfg.taskfree.as_ref().map(|t| (t.s, t.iterations)));
        rep.record(format!("{label}: counters"), ok, detail);
        for ck in &run.checkpoints {
            let res = match cfg.precision {
                Precision::F32 => check_checkpoint::<f32>(dir, cfg, run, ck, &manifest.config_hash),
                Precision::F64 => check_checkpoint::<f64>(dir, cfg, run, ck, &manifest.config_hash),
            };
            rep.record(format!("{label}: {}", ck.file), res.is_ok(), res.err().map(|e| format!("{e:#}")).unwrap_or_default());
        }
    }
    Ok(rep)
}

fn counters_ok(run: &RunEntry, tasks: usize, taskfree: Option<(usize, usize)>) -> (bool, String) {
    let c = &run.counters;
    let n = run.checkpoints.len();
    let (ok, expect) = match run.method {
        Method::Pocon => (
            n == tasks && c.train_expert == tasks && c.train_integration == tasks && c.init_expert == tasks - 1,
            format!("{tasks} checkpoints, expert and integration stages, {} re-inits", tasks - 1),
        ),
        Method::Ft | Method::Pfr | Method::Cassle => (n == tasks && c.train_expert == tasks, format!("{tasks} checkpoints and stages")),
        Method::Joint => (n == 1 && c.train_expert == 1, "1 checkpoint and stage".to_string()),
        Method::PoconTaskfree => {
            let (s, iters) = taskfree.unwrap_or((1, 0));
            (n == tasks && c.expert_snapshots == iters / s && run.trace.len() == iters / s, format!("{tasks} checkpoints, {} snapshots", iters / s))
        }
        Method::Semisup => (n == 0 && run.base.is_some(), "no checkpoints of its own".to_string()),
    };
    (ok, format!("expected {expect}; found {n} checkpoints, {c:?}"))
}

fn check_checkpoint<T: Scalar>(
    dir: &Path,
    cfg: &crate::config::RunConfig,
    run: &RunEntry,
    ck: &crate::runner::CheckpointEntry,
    config_hash: &str,
) -> Result<()> {
    let bytes = std::fs::read(dir.join(&ck.file))?;
    let h = sha256_hex(&bytes);
    anyhow::ensure!(h == ck.sha256, "sha256 {h} differs from manifest {}", ck.sha256);
    let parsed = Checkpoint::<T>::from_bytes(&bytes)?;
    anyhow::ensure!(parsed.config_hash == config_hash, "written under config {}", parsed.config_hash);
    let snap = ParamSnapshot::from_checkpoint(&parsed, ck.task as u64 - 1);
    anyhow::ensure!(snap.fingerprint() == ck.fingerprint, "fingerprint {} differs from manifest", snap.fingerprint());
    // weights must load into a freshly built main encoder and serialize back unchanged
    let mut enc = build_encoder::<T>(&cfg.model.main, run.seed)?;
    restore(&mut enc, &snap)?;
    let again = snapshot(&enc, snap.step).to_checkpoint(config_hash).to_bytes();
    anyhow::ensure!(again == bytes, "restored weights do not round-trip");
    Ok(())
}
