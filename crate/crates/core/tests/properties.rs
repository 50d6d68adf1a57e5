use fatnet::aggregation::{Aggregation, GlobalAggregator};
use fatnet::alignment::{apply_transform, TransformerKind};
use fatnet::autodiff::{BnMode, Tape};
use fatnet::data::{gen_synthetic, CloudFile, SyntheticSpec};
use fatnet::geometry::{knn_graph, normalize_unit_sphere, PointCloud};
use fatnet::layers::{AttentionBlock, EdgeMode, SharedMap, SharedMlp, ATTENTION_RATIO};
use fatnet::model::{Combine, Model, ModelConfig};
use fatnet::optim::AdamState;
use fatnet::params::{Ctx, Mode, ParamStore};
use fatnet::{Tensor, Task};
use proptest::prelude::*;

fn small(task: Task, outputs: usize) -> ModelConfig {
    let mut c = match task {
        Task::Classification => ModelConfig::classifier(outputs),
        Task::Segmentation => ModelConfig::segmenter(outputs),
    };
    c.widths = vec![8, 8, 16];
    c.final_width = 32;
    c.head = vec![16];
    c.k = 3;
    c.tnet_widths = vec![8, 16];
    c.tnet_head = vec![8];
    c
}

fn cloud_strategy(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = PointCloud> {
    n.prop_flat_map(|n| prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), n))
        .prop_map(|p| PointCloud::new(p).unwrap())
}

/// Sorts all other points by (distance, index) and keeps the first `k`.
fn knn_oracle(pts: &[[f32; 3]], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let mut c: Vec<(f32, usize)> = pts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| {
                let d = (0..3).fold(0.0f32, |a, t| a + (p[t] - q[t]) * (p[t] - q[t]));
                (d, j)
            })
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(c[..k].iter().map(|&(_, j)| j));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_oracle(pc in cloud_strategy(2..=64), k_frac in 0.0f64..1.0, dup in any::<bool>()) {
        let mut pts = pc.points.clone();
        if dup && pts.len() > 3 {
            // Exact duplicates force distance ties.
            pts[1] = pts[0];
            pts[3] = pts[2];
        }
        let n = pts.len();
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        let flat: Vec<f32> = pts.iter().flatten().copied().collect();
        let g = knn_graph(&flat, n, 3, k).unwrap();
        prop_assert_eq!(g.indices, knn_oracle(&pts, k));
    }

    #[test]
    fn cloud_file_round_trip(pc in cloud_strategy(1..=40), labels in prop::option::of(prop::collection::vec(any::<u32>(), 0..10))) {
        let f = CloudFile::from_cloud(&pc, labels);
        let back = CloudFile::decode(&f.encode()).unwrap();
        prop_assert_eq!(back.to_cloud().unwrap().points.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        pc.points.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, f);
    }

    #[test]
    fn normalization_is_idempotent(pc in cloud_strategy(2..=40)) {
        let once = normalize_unit_sphere(&pc);
        let twice = normalize_unit_sphere(&once);
        for (a, b) in once.points.iter().zip(&twice.points) {
            for d in 0..3 {
                prop_assert!((a[d] - b[d]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn transform_composition(pc in cloud_strategy(1..=20), a in prop::array::uniform9(-1.0f64..1.0), b in prop::array::uniform9(-1.0f64..1.0)) {
        let m = |v: [f64; 9]| -> [[f64; 3]; 3] { std::array::from_fn(|i| std::array::from_fn(|j| v[3 * i + j])) };
        let (a, b) = (m(a), m(b));
        let ab: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|t| a[i][t] * b[t][j]).sum()));
        let lhs = apply_transform(&apply_transform(&pc, &a), &b);
        let rhs = apply_transform(&pc, &ab);
        for (p, q) in lhs.points.iter().zip(&rhs.points) {
            for d in 0..3 {
                prop_assert!((p[d] - q[d]).abs() < 1e-5);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn classifier_is_permutation_invariant(pc in cloud_strategy(8..=12), perm_seed in any::<u64>(), model_seed in 0u64..4) {
        let mut m = Model::<f32>::new(small(Task::Classification, 3), model_seed).unwrap();
        m.store.perturb(model_seed, 0.2);
        let mut perm: Vec<usize> = (0..pc.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut fatnet::rng::substream(perm_seed, "perm"));
        let a = m.predict(&[&pc]).unwrap();
        let b = m.predict(&[&pc.permuted(&perm)]).unwrap();
        prop_assert!(a.bit_eq(&b));
        let ta = m.transforms(&[&pc]).unwrap().unwrap();
        let tb = m.transforms(&[&pc.permuted(&perm)]).unwrap().unwrap();
        prop_assert!(ta.bit_eq(&tb));
    }

    #[test]
    fn segmenter_is_permutation_equivariant(pc in cloud_strategy(8..=12), perm_seed in any::<u64>()) {
        let mut m = Model::<f32>::new(small(Task::Segmentation, 4), 1).unwrap();
        m.store.perturb(2, 0.2);
        let mut perm: Vec<usize> = (0..pc.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut fatnet::rng::substream(perm_seed, "perm"));
        let a = m.predict(&[&pc]).unwrap();
        let b = m.predict(&[&pc.permuted(&perm)]).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            prop_assert_eq!(
                b.data()[new_i * 4..new_i * 4 + 4].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                a.data()[old_i * 4..old_i * 4 + 4].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn batch_norm_train_statistics(b in 8usize..12, c in 1usize..5, seed in any::<u64>()) {
        use rand::Rng as _;
        let mut r = fatnet::rng::substream(seed, "bn");
        let x = Tensor::<f64>::from_fn(&[b, 3, c], |_| r.random_range(-5.0..5.0));
        let tape = Tape::new();
        let (y, _) = tape
            .constant(x)
            .batch_norm(tape.constant(Tensor::full(&[c], 1.0)), tape.constant(Tensor::zeros(&[c])), BnMode::Train)
            .unwrap();
        let y = y.value();
        for ch in 0..c {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(c).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn max_backward_conserves_mass(seed in any::<u64>(), axis in 0usize..3) {
        use rand::Rng as _;
        let mut r = fatnet::rng::substream(seed, "max");
        // Coarse values make ties common.
        let x = Tensor::<f64>::from_fn(&[3, 4, 5], |_| r.random_range(0..4) as f64);
        let g = Tensor::<f64>::from_fn(&[3, 4, 5], |_| r.random_range(-1.0..1.0));
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let y = xv.reduce_max(axis).unwrap();
        let gy = Tensor::from_fn(&y.shape(), |i| g.data()[i]);
        let loss = y.mul(tape.constant(gy.clone())).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let routed: f64 = grads.wrt(xv).data().iter().sum();
        let incoming: f64 = gy.data().iter().sum();
        prop_assert!((routed - incoming).abs() < 1e-12);
    }
}

#[test]
fn adam_with_zero_gradients_is_bit_stable() {
    let mut p = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32 * 0.37 - 1.0);
    let orig = p.clone();
    let g = Tensor::zeros(&[3, 2]);
    let mut s = AdamState::new(0.001);
    for _ in 0..25 {
        s.step(&mut [("p", &mut p, &g)]).unwrap();
    }
    assert!(p.bit_eq(&orig));
    assert_eq!(s.step, 25);
}

#[test]
fn parameter_count_examples() {
    let mut store = ParamStore::<f32>::new(0);
    SharedMap::new(&mut store, "m", 3, 4, true);
    assert_eq!(store.count_trainable(), 16);
    let mut store = ParamStore::<f32>::new(0);
    SharedMlp::new(&mut store, "m", 3, 4, true);
    assert_eq!(store.count_trainable(), 24);
}

/// Independent per-layer ledger of trainable scalars.
fn mlp(i: usize, o: usize) -> usize {
    i * o + o + 2 * o
}

fn fat(d_in: usize, d_edge: usize, d_out: usize, attention: bool, residual: Option<usize>, center: bool) -> usize {
    let h = d_out / 2;
    let mut n = mlp(d_in, h) + mlp(h, h) + (d_edge * h + h) + 2 * h + mlp(h, h);
    if center {
        n += d_edge * h;
    }
    if attention {
        n += 2 * h * h.div_ceil(ATTENTION_RATIO);
    }
    if let Some(r) = residual.filter(|&r| r != h) {
        n += r * h + h;
    }
    n
}

fn ledger(c: &ModelConfig) -> usize {
    let mut n = 0;
    if c.transformer == TransformerKind::Fat {
        let mut d = 3;
        for &w in &c.tnet_widths {
            n += fat(d, d, w, false, None, false);
            d = w;
        }
        for &w in &c.tnet_head {
            n += mlp(d, w);
            d = w;
        }
        n += d * 9 + 9;
    }
    let (mut dp, mut de) = (3, 3);
    let mut prev = None;
    for &w in &c.widths {
        n += fat(dp, de, w, c.attention, prev.filter(|_| c.residual), c.edge_mode == EdgeMode::CenterDifference);
        (dp, de) = match c.combine {
            Combine::PerLayer => (w, w),
            Combine::AtEnd => (w / 2, w / 2),
        };
        prev = Some(w / 2);
    }
    let skip: usize = c.widths.iter().sum();
    let fin = match c.combine {
        Combine::PerLayer => skip,
        Combine::AtEnd => skip / 2,
    };
    n += fat(fin, fin, c.final_width, c.attention, prev.filter(|_| c.residual), c.edge_mode == EdgeMode::CenterDifference);
    if c.aggregation != Aggregation::MaxPool {
        n += 2 * c.final_width * c.final_width.div_ceil(16);
    }
    let mut d = if c.aggregation == Aggregation::ConcatAttention { 2 * c.final_width } else { c.final_width };
    if c.task == Task::Segmentation {
        d += skip;
    }
    for &w in &c.head {
        n += mlp(d, w);
        d = w;
    }
    n + d * c.outputs + c.outputs
}

#[test]
fn parameter_count_matches_ledger() {
    let mut configs = vec![ModelConfig::classifier(40), ModelConfig::segmenter(50), small(Task::Classification, 3)];
    let mut c = ModelConfig::classifier(40);
    c.combine = Combine::AtEnd;
    c.aggregation = Aggregation::ConcatAttention;
    c.edge_mode = EdgeMode::CenterDifference;
    configs.push(c);
    for c in configs {
        let m = Model::<f32>::new(c.clone(), 0).unwrap();
        assert_eq!(m.count_parameters(), ledger(&c), "{c:?}");
    }
    let full = Model::<f32>::new(ModelConfig::classifier(40), 0).unwrap().count_parameters();
    eprintln!("default classifier parameters: {full}");
}

#[test]
fn vanilla_differs_by_attention_ledger() {
    let full_cfg = ModelConfig::classifier(40);
    let full = Model::<f32>::new(full_cfg.clone(), 0).unwrap().count_parameters();
    let vanilla = Model::<f32>::new(full_cfg.clone().vanilla(), 0).unwrap().count_parameters();
    let mut attention = 0;
    for &w in full_cfg.widths.iter().chain([&full_cfg.final_width]) {
        let h = w / 2;
        attention += 2 * h * AttentionBlock::bottleneck(h, ATTENTION_RATIO);
    }
    attention += 2 * 1024 * AttentionBlock::bottleneck(1024, 16);
    assert_eq!(full - vanilla, attention);
}

#[test]
fn tnet_is_identity_at_init() {
    let pc = PointCloud::new((0..10).map(|i| [i as f32 * 0.1, (i as f32).sin(), 0.5 - i as f32 * 0.05]).collect()).unwrap();
    let cfg = small(Task::Classification, 3);
    let with = Model::<f32>::new(cfg.clone(), 3).unwrap();
    let t = with.transforms(&[&pc]).unwrap().unwrap();
    assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let without = Model::<f32>::new(ModelConfig { transformer: TransformerKind::None, ..cfg }, 3).unwrap();
    assert!(with.predict(&[&pc]).unwrap().bit_eq(&without.predict(&[&pc]).unwrap()));
}

#[test]
fn softmax_rows_sum_to_one() {
    let pc = PointCloud::new((0..9).map(|i| [(i as f32).cos(), i as f32 * 0.2, (i as f32 * 0.7).sin()]).collect()).unwrap();
    for (task, outputs) in [(Task::Classification, 3), (Task::Segmentation, 4)] {
        let mut m = Model::<f32>::new(small(task, outputs), 1).unwrap();
        m.store.perturb(1, 0.3);
        let logits = m.predict(&[&pc, &pc]).unwrap();
        let rows = if task == Task::Classification { 2 } else { 18 };
        assert_eq!(logits.len(), rows * outputs);
        for row in logits.data().chunks(outputs) {
            let mx = row.iter().copied().fold(f32::MIN, f32::max);
            let z: f64 = row.iter().map(|&v| f64::from(v - mx).exp()).sum();
            let s: f64 = row.iter().map(|&v| f64::from(v - mx).exp() / z).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn gfa_zero_weights_is_half_sum() {
    let x = Tensor::<f32>::from_fn(&[2, 7, 16], |i| ((i * 37 % 19) as f32 - 9.0) * 0.13);
    let mut store = ParamStore::new(0);
    let agg = GlobalAggregator::new(&mut store, "agg", 16, Aggregation::Gfa);
    let att = agg.attention.clone().unwrap();
    store.get_mut(att.encoder).data_mut().fill(0.0);
    store.get_mut(att.decoder).data_mut().fill(0.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let xi = ctx.input(x);
    let y = agg.forward(&ctx, xi).unwrap().value();
    let mx = xi.reduce_max(1).unwrap().value();
    let mean = xi.reduce_mean(1).unwrap().value();
    for i in 0..y.len() {
        assert_eq!(y.data()[i], 0.5 * mx.data()[i] + 0.5 * mean.data()[i]);
    }
}

#[test]
fn synthetic_data_is_normalised_and_stable() {
    let ds = gen_synthetic(&SyntheticSpec::new(4, 3, 50, 11).unwrap()).unwrap();
    for s in &ds.samples {
        let again = normalize_unit_sphere(&s.cloud);
        for (a, b) in s.cloud.points.iter().zip(&again.points) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-5);
            }
        }
        let r = s.cloud.points.iter().map(|p| p.iter().map(|v| v * v).sum::<f32>().sqrt()).fold(0.0, f32::max);
        assert!((r - 1.0).abs() < 1e-5);
    }
}
