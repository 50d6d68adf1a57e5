//! Acceptance criteria. Prints one `criterion N: PASS|FAIL` line each and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fatnet::aggregation::{Aggregation, GlobalAggregator};
use fatnet::alignment::TransformerKind;
use fatnet::autodiff::Tape;
use fatnet::checkpoint;
use fatnet::config::{DataConfig, RunConfig};
use fatnet::data::load_splits;
use fatnet::experiments::{run_ablation_suite, run_dropout_experiment, Variant};
use fatnet::geometry::{knn_graph, PointCloud};
use fatnet::gradcheck::{self, GradcheckSpec};
use fatnet::metrics::{accuracy_metrics, part_miou};
use fatnet::model::{Model, ModelConfig};
use fatnet::params::{Ctx, Mode, ParamStore};
use fatnet::train::{evaluate, train, TrainConfig};
use fatnet::{rng, Error, Task, Tensor};
use rand::Rng as _;

type Outcome = (bool, String);

/// Epoch budget of the desk-scale learning run.
const DESK_EPOCHS: usize = 200;
/// Per-run epoch budget of each ablation training.
const ABLATION_EPOCHS: usize = 40;
/// Epoch budget of the 256-point model used for dropout.
const DROPOUT_EPOCHS: usize = 60;
/// Largest fraction of points removed per training batch for that model.
const TRAIN_POINT_DROPOUT: f64 = 0.875;

fn desk_model() -> ModelConfig {
    let mut c = ModelConfig::classifier(4);
    c.widths = vec![16, 16, 32];
    c.final_width = 64;
    c.head = vec![32];
    c.k = 10;
    c.tnet_widths = vec![16, 32];
    c.tnet_head = vec![16];
    c
}

fn desk_run(points: usize, epochs: usize) -> RunConfig {
    RunConfig {
        model: desk_model(),
        train: TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
        data: DataConfig {
            points,
            samples_per_class: 50,
            test_per_class: 20,
            ..DataConfig::default()
        },
    }
}

fn tiny(task: Task, outputs: usize) -> ModelConfig {
    let mut c = gradcheck::tiny_config();
    c.task = task;
    c.outputs = outputs;
    c
}

fn random_cloud(seed: u64, name: &str, n: usize) -> PointCloud {
    let mut r = rng::substream(seed, name);
    PointCloud::new((0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.0f32..1.0))).collect()).unwrap()
}

fn bits(t: &[f32]) -> Vec<u32> {
    t.iter().map(|v| v.to_bits()).collect()
}

fn gradients() -> fatnet::Result<Outcome> {
    let start = Instant::now();
    let r = gradcheck::run(&GradcheckSpec::tiny(0))?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        r.passed() && secs < 60.0,
        format!(
            "max rel err {:.2e} at {} over {} scalars ({} kinks), {secs:.1}s",
            r.max_rel_err, r.worst, r.checked, r.kinks
        ),
    ))
}

/// Lexicographic successor; false after the last permutation.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn permutations() -> fatnet::Result<Outcome> {
    let start = Instant::now();
    let pc = random_cloud(0, "perm/cloud", 6);
    let mut perms = vec![(0..6).collect::<Vec<_>>()];
    loop {
        let mut p = perms.last().unwrap().clone();
        if !next_permutation(&mut p) {
            break;
        }
        perms.push(p);
    }
    let clouds: Vec<PointCloud> = perms.iter().map(|p| pc.permuted(p)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();

    let mut classifier = Model::<f32>::new(tiny(Task::Classification, 3), 1)?;
    classifier.store.perturb(11, 0.2);
    let mut segmenter = Model::<f32>::new(tiny(Task::Segmentation, 4), 1)?;
    segmenter.store.perturb(12, 0.2);

    let base_c = classifier.predict(&[&pc])?;
    let base_s = segmenter.predict(&[&pc])?;
    let (mut cls_bad, mut seg_bad) = (0, 0);
    for (chunk_p, chunk_c) in perms.chunks(120).zip(refs.chunks(120)) {
        let c = classifier.predict(chunk_c)?;
        let s = segmenter.predict(chunk_c)?;
        for (b, p) in chunk_p.iter().enumerate() {
            if bits(&c.data()[b * 3..b * 3 + 3]) != bits(base_c.data()) {
                cls_bad += 1;
            }
            let ok = p.iter().enumerate().all(|(new_i, &old_i)| {
                let row = (b * 6 + new_i) * 4;
                bits(&s.data()[row..row + 4]) == bits(&base_s.data()[old_i * 4..old_i * 4 + 4])
            });
            if !ok {
                seg_bad += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        perms.len() == 720 && cls_bad == 0 && seg_bad == 0 && secs < 30.0,
        format!(
            "{} permutations, classifier mismatches {cls_bad}, segmenter mismatches {seg_bad}, {secs:.1}s",
            perms.len()
        ),
    ))
}

fn knn_oracle(pts: &[[f32; 3]], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let mut c: Vec<(f32, usize)> = pts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| ((0..3).fold(0.0f32, |a, t| a + (p[t] - q[t]) * (p[t] - q[t])), j))
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(c[..k].iter().map(|&(_, j)| j));
    }
    out
}

fn knn() -> fatnet::Result<Outcome> {
    let mut r = rng::substream(0, "knn/sizes");
    let mut failures = 0;
    for case in 0..100 {
        let n = r.random_range(2..=64);
        let k = r.random_range(1..n);
        let mut pts = random_cloud(case, "knn/cloud", n).points;
        // Every fourth cloud is snapped to a coarse grid to force ties.
        if case % 4 == 0 {
            for p in &mut pts {
                for v in p.iter_mut() {
                    *v = (*v * 2.0).round() / 2.0;
                }
            }
        }
        let flat: Vec<f32> = pts.iter().flatten().copied().collect();
        if knn_graph(&flat, n, 3, k)?.indices != knn_oracle(&pts, k) {
            failures += 1;
        }
    }
    Ok((failures == 0, format!("100 clouds, {failures} mismatches")))
}

fn gfa() -> fatnet::Result<Outcome> {
    let c = 64;
    let mut r = rng::substream(0, "gfa/input");
    let x = Tensor::<f32>::from_fn(&[3, 20, c], |_| r.random_range(-2.0..2.0));
    let mut store = ParamStore::new(0);
    let agg = GlobalAggregator::new(&mut store, "agg", c, Aggregation::Gfa);
    let plain = GlobalAggregator::new(&mut store, "plain", c, Aggregation::MaxPool);
    store.perturb(3, 0.5);

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let xi = ctx.input(x.clone());
    let forced = agg.forward_with_gates(&ctx, xi, Some((1.0, 0.0)))?.value();
    let max = plain.forward(&ctx, xi)?.value();
    let forced_ok = bits(forced.data()) == bits(max.data());

    let att = agg.attention.clone().expect("gfa owns an attention block");
    store.get_mut(att.encoder).data_mut().fill(0.0);
    store.get_mut(att.decoder).data_mut().fill(0.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let xi = ctx.input(x);
    let y = agg.forward(&ctx, xi)?.value();
    let mx = xi.reduce_max(1)?.value();
    let mean = xi.reduce_mean(1)?.value();
    let zero_bad = (0..y.len())
        .filter(|&i| y.data()[i] != 0.5 * mx.data()[i] + 0.5 * mean.data()[i])
        .count();
    Ok((
        forced_ok && zero_bad == 0,
        format!("forced (1,0) equals max-pool: {forced_ok}; zeroed attention mismatches: {zero_bad}"),
    ))
}

fn tnet_identity() -> fatnet::Result<Outcome> {
    let clouds: Vec<PointCloud> = (0..4).map(|i| random_cloud(i, "tnet/cloud", 32)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let eye: Vec<f32> = (0..4).flat_map(|_| [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).collect();
    let mut notes = Vec::new();
    let mut ok = true;
    for kind in [TransformerKind::Fat, TransformerKind::PointNet] {
        let cfg = ModelConfig {
            transformer: kind,
            ..desk_model()
        };
        let aligned = Model::<f32>::new(cfg.clone(), 5)?;
        let plain = Model::<f32>::new(
            ModelConfig {
                transformer: TransformerKind::None,
                ..cfg
            },
            5,
        )?;
        let t = aligned.transforms(&refs)?.expect("aligned model has a transformer");
        let identity = bits(t.data()) == bits(&eye);
        let same = bits(aligned.predict(&refs)?.data()) == bits(plain.predict(&refs)?.data());
        ok &= identity && same;
        notes.push(format!("{kind:?}: identity {identity}, logits bit-identical {same}"));
    }
    Ok((ok, notes.join("; ")))
}

fn desk_learning() -> fatnet::Result<Outcome> {
    let start = Instant::now();
    let cfg = desk_run(64, DESK_EPOCHS);
    let (train_set, test_set) = load_splits(&cfg)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(&mut model, &train_set, None, &cfg.train, |_| {})?;
    let train_acc = evaluate(&model, &train_set, 32)?.metric();
    let test_acc = evaluate(&model, &test_set, 32)?.metric();
    let elapsed = start.elapsed();
    Ok((
        train_set.len() == 200
            && test_set.len() == 80
            && train_acc >= 0.95
            && test_acc >= 0.85
            && elapsed < Duration::from_secs(30 * 60),
        format!(
            "train acc {train_acc:.4}, test acc {test_acc:.4} after {} epochs, {:.0}s",
            outcome.history.epochs.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn ablation() -> fatnet::Result<Outcome> {
    let start = Instant::now();
    let cfg = desk_run(64, ABLATION_EPOCHS);
    let (train_set, test_set) = load_splits(&cfg)?;
    let variants = [Variant::Full, Variant::NoAttention, Variant::MaxPool];
    let report = run_ablation_suite(&cfg.model, &train_set, &test_set, &variants, &[0, 1, 2], &cfg.train, |_, _, _| {})?;
    let med = |v| report.row(v).map(|r| r.median).unwrap_or(f64::NAN);
    let (full, no_att, mp) = (med(Variant::Full), med(Variant::NoAttention), med(Variant::MaxPool));
    let per_seed = report
        .rows
        .iter()
        .map(|r| format!("{} {:?}", r.variant, r.metrics.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>()))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        full >= no_att && full >= mp,
        format!(
            "medians full {full:.4}, no-attention {no_att:.4}, mp {mp:.4} ({per_seed}), {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn dropout() -> fatnet::Result<Outcome> {
    let start = Instant::now();
    let mut cfg = desk_run(256, DROPOUT_EPOCHS);
    cfg.train.point_dropout = TRAIN_POINT_DROPOUT;
    let (train_set, test_set) = load_splits(&cfg)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    train(&mut model, &train_set, None, &cfg.train, |_| {})?;
    let full = evaluate(&model, &test_set, 32)?.metric();
    let table = run_dropout_experiment(&model, &test_set, &[64], 5, 0)?;
    let kept = table.rows[0].mean;
    let drop = (full - kept) * 100.0;
    Ok((
        drop <= 10.0,
        format!(
            "acc at 256 points {full:.4}, at 64 points {kept:.4} (mean of 5), drop {drop:.2} points, {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn metrics() -> fatnet::Result<Outcome> {
    let miou = part_miou(&[vec![0, 1, 1, 1]], &[vec![0, 0, 1, 1]], &[&[0, 1]])?;
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
    let acc = accuracy_metrics(&[0; 100], &labels)?;
    let miou_ok = (miou - 7.0 / 12.0).abs() <= 1e-9;
    let acc_ok = acc.instance == 0.9 && acc.class == 0.5;
    Ok((
        miou_ok && acc_ok,
        format!("part mIoU {miou:.12}, accuracy (instance {}, class {})", acc.instance, acc.class),
    ))
}

type ErrorCheck = fn(&Error) -> bool;

fn persistence() -> fatnet::Result<Outcome> {
    let cfg = desk_model();
    let mut model = Model::<f32>::new(cfg.clone(), 9)?;
    model.store.perturb(9, 0.3);
    let clouds: Vec<PointCloud> = (0..3).map(|i| random_cloud(i, "ckpt/cloud", 48)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path)?;
    let loaded = checkpoint::load(&path)?;
    let round_trip = bits(model.predict(&refs)?.data()) == bits(loaded.predict(&refs)?.data());

    let bytes = checkpoint::encode(&model);
    let mut cases: Vec<(&str, Vec<u8>, ErrorCheck)> = vec![
        ("empty", Vec::new(), |e| matches!(e, Error::BadMagic { .. })),
        ("magic", [b"XATCKPT1", &bytes[8..]].concat(), |e| matches!(e, Error::BadMagic { .. })),
        ("header", bytes[..10].to_vec(), |e| matches!(e, Error::Truncated(_))),
        ("body", bytes[..bytes.len() / 2].to_vec(), |e| matches!(e, Error::Truncated(_))),
        ("tail", bytes[..bytes.len() - 1].to_vec(), |e| matches!(e, Error::Truncated(_))),
        ("trailing", [&bytes[..], &[0u8]].concat(), |e| matches!(e, Error::TrailingBytes(1))),
    ];
    // The tensor count is read right after the config text.
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count_at = 12 + cfg_len;
    let count = u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap());
    let mut fewer = bytes.clone();
    fewer[count_at..count_at + 4].copy_from_slice(&(count - 1).to_le_bytes());
    let last_start = {
        // Walk the tensor records to find where the last one begins.
        let mut at = count_at + 4;
        let mut start = at;
        for _ in 0..count {
            start = at;
            let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
            let name_len = rd(at);
            at += 4 + name_len;
            let rank = rd(at);
            let numel: usize = (0..rank).map(|i| rd(at + 4 + 4 * i)).product();
            at += 4 + 4 * rank + 4 * numel;
        }
        start
    };
    fewer.truncate(last_start);
    cases.push(("missing", fewer, |e| matches!(e, Error::MissingTensor(_))));
    let mut renamed = bytes.clone();
    let name_at = count_at + 8;
    renamed[name_at] = b'#';
    cases.push(("renamed", renamed, |e| matches!(e, Error::UnexpectedTensor(_))));
    let mut bad_cfg = bytes.clone();
    let key_at = 12 + std::str::from_utf8(&bytes[12..count_at]).unwrap().find("widths").unwrap();
    bad_cfg[key_at] = b'v';
    cases.push(("config", bad_cfg, |e| matches!(e, Error::Config(_))));

    let mut notes = Vec::new();
    let mut typed = true;
    for (name, data, expected) in &cases {
        match checkpoint::decode(data) {
            Ok(_) => {
                typed = false;
                notes.push(format!("{name}: accepted"));
            }
            Err(e) if expected(&e) => {}
            Err(e) => {
                typed = false;
                notes.push(format!("{name}: {e}"));
            }
        }
    }
    let other = ModelConfig {
        final_width: 32,
        ..cfg
    };
    let mismatch = matches!(
        checkpoint::load_as(&path, &other),
        Err(Error::TensorMismatch { ref name, .. }) if name.starts_with("final.")
    );
    Ok((
        round_trip && typed && mismatch,
        format!(
            "logits bit-identical {round_trip}; {} corrupt variants rejected with typed errors {typed}{}; shape mismatch {mismatch}",
            cases.len(),
            if notes.is_empty() { String::new() } else { format!(" ({})", notes.join(", ")) }
        ),
    ))
}

type Criterion = (usize, &'static str, fn() -> fatnet::Result<Outcome>);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient correctness", gradients),
    (2, "permutation invariance and equivariance", permutations),
    (3, "kNN oracle equivalence", knn),
    (4, "GFA degeneracies", gfa),
    (5, "T-Net identity at init", tnet_identity),
    (6, "desk-scale learning", desk_learning),
    (7, "ablation direction", ablation),
    (8, "dropout robustness", dropout),
    (9, "metric oracles", metrics),
    (10, "persistence", persistence),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("criterion {n}: {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
