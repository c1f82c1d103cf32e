use bayeseg::grid::ImageGrid;
use bayeseg::synth::*;
use proptest::prelude::*;

#[test]
fn pixel_counts_match_analytic_areas() {
    let scene = SceneSpec::default();
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let mut rng = case_rng(11, i);
        let pose = sample_pose(&scene, &mut rng).unwrap();
        let l = rasterize(&scene, &pose);
        for (class, area) in [(DISK, pose.disk_area()), (ANNULUS, pose.annulus_area())] {
            let rel = (l.count(class as usize) as f64 - area).abs() / area;
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 0.03, "worst relative area error {worst:.4}");
}

#[test]
fn annulus_encloses_disk() {
    let scene = SceneSpec::default();
    for i in 0..50 {
        let pose = sample_pose(&scene, &mut case_rng(5, i)).unwrap();
        let l = rasterize(&scene, &pose);
        let (h, w) = l.dims();
        for y in 0..h {
            for x in 0..w {
                if l.get(y, x) == DISK {
                    for (ny, nx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
                        assert_ne!(l.get(ny, nx), BACKGROUND, "disk touches background at {y},{x}");
                    }
                }
                if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    assert_eq!(l.get(y, x), BACKGROUND);
                }
            }
        }
    }
}

#[test]
fn noiseless_base_render_has_exact_class_means() {
    let scene = SceneSpec::default();
    let domain = DomainSpec {
        class_stds: vec![0.0; 3],
        ..DomainSpec::source()
    };
    let mut rng = case_rng(2, 0);
    let pose = sample_pose(&scene, &mut rng).unwrap();
    let labels = rasterize(&scene, &pose);
    let base = render_base(&labels, &domain, &mut rng);
    for k in 0..3 {
        let vals: Vec<f64> = base
            .data()
            .iter()
            .zip(labels.labels())
            .filter(|(_, &l)| l as usize == k)
            .map(|(v, _)| *v)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - [0.2, 0.5, 0.8][k]).abs() < 1e-12);
    }
}

#[test]
fn same_seed_same_case_bytes() {
    let scene = SceneSpec::default();
    for d in DomainSpec::default_targets() {
        let (a, la) = generate_case(&scene, &d, &mut case_rng(9, 4)).unwrap();
        let (b, lb) = generate_case(&scene, &d, &mut case_rng(9, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }
}

#[test]
fn labels_do_not_depend_on_domain() {
    let scene = SceneSpec::default();
    let (_, source) = generate_case(&scene, &DomainSpec::source(), &mut case_rng(21, 3)).unwrap();
    for d in DomainSpec::default_targets() {
        let (_, l) = generate_case(&scene, &d, &mut case_rng(21, 3)).unwrap();
        assert_eq!(l, source, "{}", d.name);
    }
}

#[test]
fn bias_field_spreads_row_means() {
    let img = ImageGrid::from_fn(64, 64, |_, x| x as f64 / 63.0);
    let domain = DomainSpec {
        bias_amplitude: 0.3,
        ..DomainSpec::source()
    };
    for seed in 0..20 {
        let out = apply_domain_shift(&img, &domain, &mut case_rng(seed, 0));
        let rows: Vec<f64> = (0..64)
            .map(|y| (0..64).map(|x| out.get(y, x)).sum::<f64>() / 64.0)
            .collect();
        let spread = rows.iter().cloned().fold(f64::MIN, f64::max) - rows.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread >= 0.1, "seed {seed}: spread {spread}");
    }
}

#[test]
fn contrast_inversion_negates_z_scored_source() {
    let scene = SceneSpec::default();
    let mut rng = case_rng(4, 0);
    let pose = sample_pose(&scene, &mut rng).unwrap();
    let base = render_base(&rasterize(&scene, &pose), &DomainSpec::source(), &mut rng);
    let src = apply_domain_shift(&base, &DomainSpec::source(), &mut case_rng(0, 0));
    let inv = apply_domain_shift(&base, &DomainSpec::contrast_inverted(), &mut case_rng(0, 0));
    for (a, b) in src.data().iter().zip(inv.data()) {
        assert!((a + b).abs() < 1e-12);
    }
}

#[test]
fn benchmark_is_reproducible_and_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let counts = SplitCounts {
        train: 3,
        val: 1,
        test: 2,
        target: 2,
    };
    let scene = SceneSpec::default();
    let targets = DomainSpec::default_targets();
    let rows = build_benchmark(a.path(), &scene, &targets, counts, 17).unwrap();
    build_benchmark(b.path(), &scene, &targets, counts, 17).unwrap();
    assert_eq!(rows.len(), 3 + 1 + 2 + 4 * 2);
    for dir in ["images", "labels"] {
        assert_eq!(std::fs::read_dir(a.path().join(dir)).unwrap().count(), rows.len());
    }
    for r in &rows {
        for p in [&r.image_path, &r.label_path] {
            assert_eq!(
                std::fs::read(a.path().join(p)).unwrap(),
                std::fs::read(b.path().join(p)).unwrap()
            );
        }
    }
    assert_eq!(
        std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    let header = std::fs::read_to_string(a.path().join(MANIFEST_FILE)).unwrap();
    assert!(header.starts_with("case_id,split,domain,seed,image_path,label_path\n"));

    let ds = Dataset::load(a.path(), 3).unwrap();
    assert_eq!(ds.cases.len(), rows.len());
    assert_eq!(ds.domains()[0], "source");
    assert_eq!(ds.split("train", "source").len(), 3);
    for c in &ds.cases {
        assert!(c.image.mean().abs() < 1e-12);
        assert!((c.image.std() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn missing_manifest_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let e = Dataset::load(d.path(), 3).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn z_score_removes_positive_affine_maps(scale in 0.01f64..100.0, offset in -50.0f64..50.0, seed in 0u64..1000) {
        let scene = SceneSpec::default();
        let (img, _) = generate_case(&scene, &DomainSpec::source(), &mut case_rng(seed, 1)).unwrap();
        let moved = img.map(|v| scale * v + offset);
        let a = apply_domain_shift(&img, &DomainSpec::source(), &mut case_rng(seed, 2));
        let b = apply_domain_shift(&moved, &DomainSpec::source(), &mut case_rng(seed, 2));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn every_domain_output_is_finite_and_one_hot(seed in 0u64..10_000, which in 0usize..4) {
        let d = &DomainSpec::default_targets()[which];
        let (img, l) = generate_case(&SceneSpec::default(), d, &mut case_rng(seed, 0)).unwrap();
        prop_assert!(img.data().iter().all(|v| v.is_finite()));
        let oh = l.one_hot();
        for i in 0..img.len() {
            let s: f64 = oh.iter().map(|g| g.data()[i]).sum();
            prop_assert_eq!(s, 1.0);
        }
    }
}
