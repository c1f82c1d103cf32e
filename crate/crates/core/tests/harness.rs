use std::path::Path;

use bayeseg::bayes::cross_entropy_graph;
use bayeseg::config::{AblationFlags, RunConfig};
use bayeseg::grid::stack_grids;
use bayeseg::harness::*;
use bayeseg::networks::Networks;
use bayeseg::synth::{build_benchmark, case_rng, Dataset, DomainSpec, SplitCounts};
use bayeseg::LabelMap;
use bayeseg_tensor::Graph;
use proptest::prelude::*;

const TOY: &[&str] = &[
    "scene.height=32",
    "scene.width=32",
    "scene.center_jitter=3",
    "scene.inner_radius=3:5",
    "scene.ring_thickness=2:3",
    "net.width=4",
    "net.res_blocks_shape=1",
    "net.res_blocks_app=1",
    "train.batch_size=4",
    "hyper.lambda=1e-5",
];

fn toy_config(dir: &Path, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(TOY).unwrap();
    cfg.apply_overrides(&[
        format!("train.steps={steps}"),
        format!("train.eval_every={steps}"),
        "train.log_every=10".to_string(),
        format!("output.dir={}", dir.join("run").display()),
    ])
    .unwrap();
    cfg
}

fn toy_data(dir: &Path, cfg: &RunConfig) -> Dataset {
    let counts = SplitCounts {
        train: 20,
        val: 0,
        test: 10,
        target: 4,
    };
    let root = dir.join("data");
    build_benchmark(&root, &cfg.data.scene, &DomainSpec::default_targets(), counts, 5).unwrap();
    Dataset::load(&root, cfg.data.scene.classes).unwrap()
}

fn label_map(bits: &[u8]) -> LabelMap {
    LabelMap::new(1, bits.len(), 2, bits.to_vec()).unwrap()
}

#[test]
fn dice_worked_example() {
    let mut g = vec![0u8; 32];
    let mut p = vec![0u8; 32];
    g[..16].fill(1);
    p[..8].fill(1);
    let d = dice(&label_map(&p), &label_map(&g), 1).unwrap();
    assert!((d - 200.0 / 3.0).abs() < 1e-12);
    assert!((d - 66.67).abs() < 0.005);
}

#[test]
fn dice_edge_cases() {
    let a = label_map(&[1, 1, 0, 0]);
    let b = label_map(&[0, 0, 1, 1]);
    let empty = label_map(&[0, 0, 0, 0]);
    assert_eq!(dice(&a, &a, 1).unwrap(), 100.0);
    assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    assert_eq!(dice(&empty, &empty, 1).unwrap(), 100.0);
    assert!(dice(&a, &label_map(&[0, 1]), 1).is_err());
}

#[test]
fn erm_flags_reduce_to_plain_cross_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path(), 1);
    cfg.ablation = AblationFlags::erm();
    let data = toy_data(dir.path(), &cfg);
    let case = &data.split("train", "source")[0];
    let nets = Networks::<f64>::new(cfg.net.clone()).unwrap();
    let (h, w) = case.image.dims();
    let n1 = ItemNoise::draw(h, w, 3, &mut case_rng(1, 0));
    let n2 = ItemNoise::draw(h, w, 3, &mut case_rng(2, 0));
    let (g1, l1) = item_gradients(&nets, &cfg.ablation, &cfg.hyper, &case.image, &case.labels, &n1, 1.0).unwrap();
    let (g2, _) = item_gradients(&nets, &cfg.ablation, &cfg.hyper, &case.image, &case.labels, &n2, 1.0).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(l1.var, 0.0);
    assert_eq!(l1.total, l1.ce);

    let mut g = Graph::new();
    let p = nets.bind(&mut g, true);
    let f = forward(&nets, &mut g, &p, &case.image, None).unwrap();
    let oh = g.constant(stack_grids(&[case.labels.one_hot().iter().collect()]).unwrap());
    let ce = cross_entropy_graph(&mut g, oh, f.mu_z).unwrap();
    assert_eq!(g.value(ce).item(), l1.ce);
    g.backward(ce).unwrap();
    let reference: Vec<_> = p.iter().map(|&v| g.grad_or_zeros(v)).collect();
    assert_eq!(g1, reference);
}

#[test]
fn metrics_are_byte_identical_across_reruns_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 20);
    let data = toy_data(dir.path(), &cfg);
    let mut outputs = Vec::new();
    for (i, threads) in [1, 1, 3].into_iter().enumerate() {
        let mut c = cfg.clone();
        c.train.threads = threads;
        c.output = dir.path().join(format!("run{i}"));
        let a = run_training(&c, &data, |_| {}).unwrap();
        outputs.push((
            std::fs::read(a.dir.join(METRICS_FILE)).unwrap(),
            std::fs::read(a.dir.join(CHECKPOINT_FILE)).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let text = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(text.starts_with(
        "step,split,domain,cases,dice_mean,dice_std,dice_class1,dice_class2,dice_drop,L_ce,L_var,L_total,"
    ));
}

#[test]
fn short_training_lowers_loss_and_segments_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 200);
    let data = toy_data(dir.path(), &cfg);
    let mut first = None;
    let out = train::<f32>(&cfg, &data, |p| {
        if let Progress::Step { step: 1, losses, .. } = p {
            first = Some(losses.total);
        }
    })
    .unwrap();
    let last = out
        .rows
        .iter()
        .rev()
        .find_map(|r| r.losses.as_ref().map(|l| l.total))
        .unwrap();
    let first = first.unwrap();
    assert!(last < first, "loss {first} -> {last}");
    let source = out.scores.iter().find(|s| s.domain == "source").unwrap();
    assert!(source.mean() > 50.0, "source Dice {}", source.mean());
    assert_eq!(source.per_case.len(), 10);
}

#[test]
fn evaluation_is_deterministic_and_source_drop_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 5);
    let data = toy_data(dir.path(), &cfg);
    let nets = Networks::<f32>::new(cfg.net.clone()).unwrap();
    let a = evaluate(&nets, &data, &data.domains(), 1).unwrap();
    let b = evaluate(&nets, &data, &data.domains(), 2).unwrap();
    assert_eq!(a, b);
    let rows = dice_rows(0, "test", &a);
    assert_eq!(rows[0].dice.as_ref().unwrap().drop, 0.0);
    assert_eq!(
        metrics_csv(&rows, 3).unwrap(),
        metrics_csv(&dice_rows(0, "test", &b), 3).unwrap()
    );
}

#[test]
fn missing_domain_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 5);
    let data = toy_data(dir.path(), &cfg);
    let nets = Networks::<f32>::new(cfg.net.clone()).unwrap();
    let e = evaluate(&nets, &data, &["nowhere".to_string()], 1).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn prediction_follows_the_larger_raw_mean() {
    let t = bayeseg_tensor::Tensor::<f64>::from_fn(&[1, 2, 2, 3], |i| if i < 6 { 1.0 } else { -1.0 });
    let l = argmax_map(&t).unwrap();
    assert!(l.labels().iter().all(|&v| v == 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dice_is_symmetric_and_bounded(a in proptest::collection::vec(0u8..3, 1..64), seed in 0u64..1000) {
        let b: Vec<u8> = a.iter().enumerate().map(|(i, &v)| ((v as u64 + seed * (i as u64 + 1)) % 3) as u8).collect();
        let pa = LabelMap::new(1, a.len(), 3, a.clone()).unwrap();
        let pb = LabelMap::new(1, b.len(), 3, b).unwrap();
        for k in 0..3 {
            let d = dice(&pa, &pb, k).unwrap();
            prop_assert_eq!(d, dice(&pb, &pa, k).unwrap());
            prop_assert!((0.0..=100.0).contains(&d));
        }
    }
}
