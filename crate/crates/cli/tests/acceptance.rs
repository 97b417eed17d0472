//! Acceptance checks, one PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pocon_cli::config::{DataSource, Method, RunConfig};
use pocon_cli::results::{read_results, sha256_hex, ResultRow, RESULTS_FILE};
use pocon_cli::runner::execute;
use pocon_core::datastream::{
    blurred_schedule, make_blurred_stream, split_classes, synthetic_dataset, AugConfig, LabeledDataset, Normalization,
    Split, SyntheticSpec,
};
use pocon_core::models::{build_encoder, snapshot, Encoder, EncoderSpec, ProjectorSpec};
use pocon_core::pocon::{init_expert, run_taskfree, train_integration, InitStrategy, StageConfig, TaskFreeConfig, TaskState};
use pocon_core::record::MetricLog;
use pocon_core::seeding::SeedBank;
use pocon_core::semisup::{prototypes_from_features, refine_prototypes, sdc_compensate, PrototypeSet};
use pocon_core::ssl_losses::{barlow_loss, barlow_twins, cross_correlation, BarlowConfig, CrossCorrMatrix};
use pocon_core::train::{BatchSource, OptimConfig};
use pocon_nn::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn encoder_bytes<T: Scalar>(e: &Encoder<T>) -> Vec<u8> {
    snapshot(e, 0).to_checkpoint("").to_bytes()
}

fn toy_data(classes: usize, per_class: usize, seed: u64) -> (LabeledDataset<f32>, Normalization) {
    let spec = SyntheticSpec { num_classes: classes, train_per_class: per_class, test_per_class: 1, seed, ..Default::default() };
    let (train, _) = synthetic_dataset::<f32>(&spec).unwrap();
    let norm = train.channel_stats();
    (train, norm)
}

fn loss_correctness() -> Outcome {
    let cfg = BarlowConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let za = Tensor::<f64>::randn(&[8, 4], &mut rng);
    let zb = Tensor::<f64>::randn(&[8, 4], &mut rng);
    let (_, da, db) = barlow_twins(&za, &zb, &cfg).unwrap();
    let loss = |a: &Tensor<f64>, b: &Tensor<f64>| barlow_twins(a, b, &cfg).unwrap().0.total;
    let eps = 1e-6;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (which, grad) in [(0, &da), (1, &db)] {
        for k in 0..32 {
            let (mut p, mut m) = ([za.clone(), zb.clone()], [za.clone(), zb.clone()]);
            p[which].data_mut()[k] += eps;
            m[which].data_mut()[k] -= eps;
            let fd = (loss(&p[0], &p[1]) - loss(&m[0], &m[1])) / (2.0 * eps);
            num += (fd - grad.data()[k]).powi(2);
            den += fd.powi(2);
        }
    }
    let rel = (num / den).sqrt();

    let eye = Tensor::<f64>::from_f64(&[4, 4], &(0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect::<Vec<_>>()).unwrap();
    let identity_loss = barlow_loss(&CrossCorrMatrix { c: eye, batch_size: 8, embedding_dim: 4 }, cfg.lambda_bt).total;

    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let b = rng.random_range(2..16);
        let d = rng.random_range(1..9);
        let scale = 10f64.powi(rng.random_range(-6..6));
        let mut a = Tensor::<f64>::randn(&[b, d], &mut rng);
        let mut z = Tensor::<f64>::randn(&[b, d], &mut rng);
        a.data_mut().iter_mut().for_each(|v| *v *= scale);
        if i % 7 == 0 {
            // constant and perfectly correlated columns
            z = a.clone();
            a.data_mut()[..d].copy_from_slice(&vec![1.0; d]);
        }
        let (c, _) = cross_correlation(&a, &z).unwrap();
        worst = c.c.data().iter().fold(worst, |w, v| w.max(v.abs()));
    }
    check(
        rel < 1e-4 && identity_loss == 0.0 && worst <= 1.0 + 1e-5,
        format!("gradient rel err {rel:.2e}, identity loss {identity_loss}, max |C| {worst:.8} over 1e4 inputs"),
    )
}

fn integration_contract() -> Outcome {
    let mut halved = 0;
    let mut frozen = true;
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let (train, norm) = toy_data(4, 40, seed);
        let spec = EncoderSpec::tiny_conv(4, 32);
        let expert = build_encoder::<f32>(&spec, 3 * seed + 1).unwrap();
        let main_prev = build_encoder::<f32>(&spec, 3 * seed + 2).unwrap();
        let mut state = TaskState::new(1, &expert, Some(&main_prev), main_prev.clone(), seed).unwrap();
        let expert_before = encoder_bytes(&state.expert);
        let prev_before = encoder_bytes(state.main_prev.as_ref().unwrap());

        let cfg = StageConfig { batch_size: 16, optimizer: OptimConfig { lr: 0.05, ..Default::default() }, ..Default::default() };
        let x = norm.apply(&train.images).unwrap();
        let initial = state.clone().loss(&x, cfg.distance).unwrap().total;
        let aug = AugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut src = BatchSource { aug: &aug, normalization: &norm, rng: &mut rng };
        let mut log = MetricLog::new("integration");
        // 160 samples in batches of 16 for 20 epochs: 200 steps
        train_integration(&mut state, &train, &cfg, 20, &mut src, &mut log).unwrap();
        assert_eq!(log.records.len(), 200);
        let fin = state.clone().loss(&x, cfg.distance).unwrap().total;

        frozen &= encoder_bytes(&state.expert) == expert_before && encoder_bytes(state.main_prev.as_ref().unwrap()) == prev_before;
        ratios.push(fin / initial);
        halved += usize::from(fin < 0.5 * initial);
    }
    check(
        frozen && halved >= 9,
        format!("frozen snapshots byte-identical: {frozen}; loss < 50% of initial on {halved}/10 seeds; ratios {ratios:.3?}"),
    )
}

fn expert_init() -> Outcome {
    let (train, norm) = toy_data(4, 40, 5);
    let spec = EncoderSpec::tiny_conv(4, 32);
    let main = build_encoder::<f32>(&spec, 1).unwrap();
    let old = build_encoder::<f32>(&spec, 2).unwrap();
    let cfg = StageConfig {
        batch_size: 16,
        d2e_epochs: Some(40),
        optimizer: OptimConfig { lr: 0.05, ..Default::default() },
        ..Default::default()
    };
    let aug = AugConfig::default();
    let init = |strategy, new_spec: &EncoderSpec, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut src = BatchSource { aug: &aug, normalization: &norm, rng: &mut rng };
        init_expert(strategy, &main, &old, new_spec, &train, &cfg, &mut src, seed, 1, &mut MetricLog::new("init")).unwrap()
    };

    let probes = Tensor::<f32>::randn(&[100, 3, 16, 16], &mut ChaCha8Rng::seed_from_u64(9));
    let copy = init(InitStrategy::CopyOp, &spec, 7).expert;
    let a = main.infer(&probes).unwrap();
    let b = copy.infer(&probes).unwrap();
    let copy_diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);

    let small = EncoderSpec::tiny_conv(2, 16);
    let d2e = init(InitStrategy::D2eOp, &small, 7);
    let (d0, d1) = (d2e.distill_initial.unwrap(), d2e.distill_final.unwrap());

    let scratch_same = encoder_bytes(&init(InitStrategy::ScratchOp, &spec, 3).expert) == encoder_bytes(&init(InitStrategy::ScratchOp, &spec, 3).expert);
    let scratch_seeded = encoder_bytes(&init(InitStrategy::ScratchOp, &spec, 3).expert) != encoder_bytes(&init(InitStrategy::ScratchOp, &spec, 4).expert);
    let ft = encoder_bytes(&init(InitStrategy::FtOp, &spec, 3).expert);
    let ft_same = ft == encoder_bytes(&init(InitStrategy::FtOp, &spec, 8).expert) && ft == encoder_bytes(&old);
    check(
        copy_diff == 0.0 && d1 < 0.1 * d0 && scratch_same && scratch_seeded && ft_same,
        format!(
            "CopyOP max diff {copy_diff}; D2eOP {d0:.4} -> {d1:.4} ({:.3}x); ScratchOP deterministic {scratch_same}, seed-dependent {scratch_seeded}; FtOP deterministic {ft_same}",
            d1 / d0
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn value(rows: &[ResultRow], method: &str, seed: u64, metric: &str, task: usize) -> f64 {
    rows.iter()
        .find(|r| r.method == method && r.seed == seed && r.metric == metric && r.task == task)
        .unwrap_or_else(|| panic!("missing {method} seed {seed} {metric} task {task}"))
        .value
}

fn directional() -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("directional.toml")).map_err(|e| e.to_string())?;
    let spec_ok = cfg.data.num_tasks == 5
        && cfg.data.synthetic.num_classes == 10
        && cfg.seeds.len() == 5
        && cfg.stages.stage1_epochs == 20
        && cfg.stages.stage2_epochs == 20
        && cfg.model.main.arch.to_string() == "tiny_conv"
        && [Method::Pocon, Method::Ft, Method::Joint].iter().all(|m| cfg.methods.contains(m));
    let tmp = tempfile::tempdir().unwrap();
    execute(&cfg, tmp.path(), false).map_err(|e| format!("{e:#}"))?;
    let rows = read_results(tmp.path()).unwrap();
    let t = cfg.data.num_tasks;
    let col = |m: &str, metric: &str| cfg.seeds.iter().map(|&s| value(&rows, m, s, metric, t)).collect::<Vec<_>>();
    let (p, f, j) = (col("pocon", "final_accuracy"), col("ft", "final_accuracy"), col("joint", "final_accuracy"));
    let (ps, fs) = (col("pocon", "stability_a1"), col("ft", "stability_a1"));
    let n = cfg.seeds.len();
    let count = |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x > y).count();
    let count_ge = |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x >= y).count();
    let gap = mean(&p) - mean(&f);
    let joint_gap = mean(&j) - mean(&p);
    let stab_gap = mean(&ps) - mean(&fs);
    let (pf, jp, sf) = (count(&p, &f), count_ge(&j, &p), count(&ps, &fs));
    check(
        spec_ok && gap >= 0.02 && joint_gap >= 0.0 && stab_gap >= 0.02 && pf * 5 >= 4 * n && jp * 5 >= 4 * n && sf * 5 >= 4 * n,
        format!(
            "final POCON {:.3} FT {:.3} joint {:.3}; POCON-FT {:+.3} ({pf}/{n} seeds), joint-POCON {:+.3} ({jp}/{n}); task-1 stability end POCON-FT {:+.3} ({sf}/{n})",
            mean(&p),
            mean(&f),
            mean(&j),
            gap,
            joint_gap,
            stab_gap
        ),
    )
}

fn blurred_stream() -> Outcome {
    let s = blurred_schedule(3, 4.0, 3000, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for &i in &[100usize, 950, 1000, 1300, 2050] {
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[s.sample_task(i, &mut rng)] += 1;
        }
        for (t, &c) in counts.iter().enumerate() {
            worst = worst.max((c as f64 / 1e5 - s.row(i)[t]).abs());
        }
    }
    let hard = blurred_schedule(4, 1e6, 400, 0).unwrap();
    let one_hot = hard.schedule.iter().enumerate().all(|(i, r)| (0..4).all(|t| r[t] == if t == i / 100 { 1.0 } else { 0.0 }));

    let (train, norm) = toy_data(4, 20, 3);
    let stream = split_classes(4, 2, 0).unwrap();
    let (iters, s_steps) = (25, 4);
    let blurred = make_blurred_stream(&stream, 4.0, iters, 0).unwrap();
    let mut cfg = pocon_core::pocon::PoconConfig {
        model: pocon_core::pocon::ModelConfig { main: EncoderSpec::tiny_conv(2, 8), expert: None, projector_dim: 16 },
        stages: StageConfig::default(),
        aug: AugConfig::default(),
    };
    cfg.stages.batch_size = 8;
    let rec = run_taskfree(&train, &stream, &blurred, &TaskFreeConfig { s: s_steps, ds: 2 }, &cfg, &norm, &SeedBank::new(0)).unwrap();
    let snaps = rec.counters.expert_snapshots;
    check(
        worst < 0.01 && one_hot && snaps == iters / s_steps && rec.trace.len() == snaps,
        format!("max frequency error {worst:.4} over 1e5 draws; large-beta rows one-hot {one_hot}; snapshots {snaps} for I={iters}, s={s_steps}"),
    )
}

fn semisup_oracles() -> Outcome {
    let sigma = 0.5;
    let means = [[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]];
    let per = 3000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Tensor::<f64>::randn(&[3 * per, 2], &mut rng);
    let mut values = Vec::with_capacity(6 * per);
    let mut labels = Vec::with_capacity(3 * per);
    for c in 0..3 {
        for i in 0..per {
            let r = noise.row(c * per + i);
            values.extend([means[c][0] + sigma * r[0], means[c][1] + sigma * r[1]]);
            labels.push(c);
        }
    }
    let images = Tensor::<f64>::from_f64(&[3 * per, 2, 1, 1], &values).unwrap();
    let data = LabeledDataset::new(images, labels.clone(), 3, Split::Train).unwrap();
    let flat = |x: &Tensor<f64>| Ok(x.clone().reshape(&[x.dim(0), 2])?);
    let shift = [0.37, -1.25];
    let shifted = move |x: &Tensor<f64>| {
        let mut f = x.clone().reshape(&[x.dim(0), 2])?;
        for r in 0..f.rows() {
            f.data_mut()[2 * r] += shift[0];
            f.data_mut()[2 * r + 1] += shift[1];
        }
        Ok(f)
    };

    // one labeled seed per class: the first sample of each blob
    let seeds: Vec<usize> = (0..3).map(|c| c * per).collect();
    let labeled = data.subset(&seeds);
    let feats = flat(&labeled.images).unwrap();
    let init = prototypes_from_features(&feats, &labeled.labels, &[0, 1, 2], 0).unwrap();
    let rest: Vec<usize> = (0..3 * per).filter(|i| !seeds.contains(i)).collect();
    let refined = refine_prototypes(&init, &flat, &data.subset(&rest), &[0, 1, 2], 1).unwrap();
    let mut worst_mean = 0.0f64;
    for c in 0..3 {
        let p = &refined.prototypes[&c];
        worst_mean = worst_mean.max(((p[0] - means[c][0]).powi(2) + (p[1] - means[c][1]).powi(2)).sqrt() / sigma);
    }

    let moved = sdc_compensate(&refined, &flat, &shifted, &data, None).unwrap();
    let worst_shift = (0..3)
        .map(|c| {
            let (a, b) = (&refined.prototypes[&c], &moved.prototypes[&c]);
            (b[0] - a[0] - shift[0]).abs().max((b[1] - a[1] - shift[1]).abs())
        })
        .fold(0.0f64, f64::max);
    let same: PrototypeSet = sdc_compensate(&refined, &flat, &flat, &data, None).unwrap();
    let identity = same.prototypes == refined.prototypes;
    check(
        worst_mean < 0.1 && worst_shift < 1e-6 && identity,
        format!("worst prototype error {worst_mean:.4} sigma; translation error {worst_shift:.2e}; identical encoders leave prototypes unchanged {identity}"),
    )
}

fn reproducibility() -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("toy.toml")).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().unwrap();
    let hashes: Vec<String> = ["a", "b"]
        .iter()
        .map(|d| {
            let dir = tmp.path().join(d);
            execute(&cfg, &dir, false).unwrap();
            sha256_hex(&std::fs::read(dir.join(RESULTS_FILE)).unwrap())
        })
        .collect();
    check(hashes[0] == hashes[1], format!("results.csv sha256 {} vs {}", &hashes[0][..16], &hashes[1][..16]))
}

fn full_scale_audit() -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("full_scale.toml")).map_err(|e| e.to_string())?;
    let o = &cfg.stages.optimizer;
    let d = cfg.model.main.feature_dim;
    let adaptors = [ProjectorSpec::adaptation(d, cfg.model.expert_spec().feature_dim), ProjectorSpec::retrospection(d)];
    let four_layers = adaptors.iter().all(|p| p.layer_dims.len() - 1 == 4 && p.validate().is_ok());
    let checks = [
        ("SGD lr 0.01", o.lr == 0.01),
        ("weight decay 1e-4", o.weight_decay == 1e-4),
        ("stage 1 epochs 250", cfg.stages.stage1_epochs == 250),
        ("stage 2 epochs 500", cfg.stages.stage2_epochs == 500),
        ("probe lr 5e-2", cfg.eval.probe.lr0 == 5e-2),
        ("probe patience factors 0.3, 0.06, three drops", cfg.eval.probe.patience_factors == [0.3, 0.06] && cfg.eval.probe.max_drops == 3),
        ("PFR lambda 25", cfg.baselines.pfr_lambda == 25.0),
        ("4-layer adaptation and retrospection MLPs", four_layers),
        ("ResNet-18 main network", cfg.model.main.arch.to_string() == "large_resnet" && cfg.model.main.width == 64),
        ("packed dataset source", cfg.data.source == DataSource::Packed),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    check(failed.is_empty(), if failed.is_empty() { format!("{} values match", checks.len()) } else { format!("mismatched: {failed:?}") })
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("loss correctness", loss_correctness),
        ("integration freeze and loss decrease", integration_contract),
        ("expert initialization strategies", expert_init),
        ("directional continual result", directional),
        ("blurred stream and task-free snapshots", blurred_stream),
        ("semi-supervised prototype oracles", semisup_oracles),
        ("reproducible results table", reproducibility),
        ("full-scale config audit", full_scale_audit),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {}: FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
