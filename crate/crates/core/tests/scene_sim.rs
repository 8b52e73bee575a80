use mmcrf::format::{parse_scene, scene_to_string};
use mmcrf::graph::CUT_LABEL;
use mmcrf::inference::TrwConfig;
use mmcrf::learning::{train, TrainConfig};
use mmcrf::potentials::{init_parameters, InitMode};
use mmcrf::preset::{predict, Preset};
use mmcrf::scene_sim::{
    generate_scene, generate_scene_detailed, inconsistent_fraction, ingest_features, inject_misalignment,
    MisalignmentMode, ModalityConfig, SceneConfig, OVERLAP_MAX, OVERLAP_MIN,
};
use std::path::Path;

fn config(rate: f64) -> SceneConfig {
    let mut c = SceneConfig::two_modality(4, 5, 30, 20);
    c.misalignment_rate = rate;
    c
}

fn latent_labels(c: &SceneConfig) -> Vec<usize> {
    let s = generate_scene(c).unwrap();
    let aug = s.graph.augment_with_latent().unwrap();
    aug.latent_nodes().iter().map(|l| l.gt.unwrap()).collect()
}

#[test]
fn rate_zero_keeps_every_link() {
    for seed in 0..10 {
        let labels = latent_labels(&config(0.0).with_seed(seed));
        assert_eq!(labels.len(), 20);
        assert!(labels.iter().all(|&l| l != CUT_LABEL));
    }
}

#[test]
fn rate_one_cuts_every_link() {
    for seed in 0..10 {
        let labels = latent_labels(&config(1.0).with_seed(seed));
        assert!(labels.iter().all(|&l| l == CUT_LABEL));
    }
}

#[test]
fn misalignment_rate_within_binomial_interval() {
    let mut c = SceneConfig::two_modality(6, 4, 1000, 1000);
    c.misalignment_rate = 0.17;
    c.intra_edge_density = 0.002;
    let mean: f64 = (0..50)
        .map(|seed| inconsistent_fraction(&generate_scene(&c.with_seed(seed)).unwrap()))
        .sum::<f64>()
        / 50.0;
    assert!((0.14..=0.20).contains(&mean), "mean inconsistent fraction {mean}");
}

#[test]
fn same_seed_same_bytes() {
    let c = config(0.3).with_seed(77);
    let a = scene_to_string(&generate_scene(&c).unwrap()).unwrap();
    let b = scene_to_string(&generate_scene(&c).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = scene_to_string(&generate_scene(&c.with_seed(78)).unwrap()).unwrap();
    assert_ne!(a, other);
}

#[test]
fn generated_scene_shape() {
    let c = config(0.2).with_seed(1);
    let s = generate_scene(&c).unwrap();
    let g = &s.graph;
    assert_eq!(g.node_count(), 60);
    assert_eq!(g.correspondences().len(), 20);
    assert!(g.diagnostics().is_empty());
    for n in g.nodes() {
        assert_eq!(n.feature.len(), 5);
        assert_eq!(*n.feature.last().unwrap(), 1.0);
    }
    for k in g.correspondences() {
        assert!(k.overlap >= OVERLAP_MIN && k.overlap < OVERLAP_MAX);
        assert_ne!(g.nodes()[k.a].modality, g.nodes()[k.b].modality);
    }
    for e in g.intra_edges() {
        let (a, b) = (&g.nodes()[e.a], &g.nodes()[e.b]);
        let d: f64 = a.feature[..4]
            .iter()
            .zip(&b.feature[..4])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!((e.feature[0] - d).abs() < 1e-12);
    }
}

#[test]
fn flipped_links_keep_truthful_features_and_others_agree() {
    let mut nearest_ok = 0;
    let mut flipped = 0;
    for seed in 0..20 {
        let mut c = config(0.3).with_seed(seed);
        c.class_separation = 8.0;
        let gen = generate_scene_detailed(&c).unwrap();
        let g = &gen.sample.graph;
        let flipped_links: Vec<usize> = gen.misaligned.iter().map(|&(k, _)| k).collect();
        for (k, corr) in g.correspondences().iter().enumerate() {
            let agree = g.nodes()[corr.a].gt == g.nodes()[corr.b].gt;
            assert_eq!(agree, !flipped_links.contains(&k), "seed {seed} link {k}");
        }
        for &(_, node) in &gen.misaligned {
            let n = &g.nodes()[node];
            let protos = &gen.prototypes[n.modality];
            let dist = |p: &Vec<f64>| p.iter().zip(&n.feature).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..protos.len())
                .min_by(|&i, &j| dist(&protos[i]).total_cmp(&dist(&protos[j])))
                .unwrap();
            flipped += 1;
            if best + 1 == n.gt.unwrap() {
                nearest_ok += 1;
            }
        }
    }
    assert!(flipped > 50);
    let frac = nearest_ok as f64 / flipped as f64;
    assert!(frac >= 0.95, "nearest-prototype agreement {frac}");
}

#[test]
fn corrupt_features_mode_keeps_labels_consistent() {
    let mut c = config(0.5).with_seed(4);
    c.mode = MisalignmentMode::CorruptFeatures;
    c.class_separation = 8.0;
    let gen = generate_scene_detailed(&c).unwrap();
    assert!(!gen.misaligned.is_empty());
    assert_eq!(inconsistent_fraction(&gen.sample), 0.0);
    // The corrupted endpoint looks like some other class.
    let (_, node) = gen.misaligned[0];
    let n = &gen.sample.graph.nodes()[node];
    let own = &gen.prototypes[n.modality][n.gt.unwrap() - 1];
    let d: f64 = own
        .iter()
        .zip(&n.feature)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(d > 3.0);
}

#[test]
fn infeasible_configs_are_rejected() {
    let mut c = config(0.1);
    c.correspondences = 30 * 30 + 1;
    assert!(generate_scene(&c).is_err());
    let mut c = config(0.1);
    c.intra_edge_density = 1.5;
    assert!(generate_scene(&c).is_err());
    let mut c = config(1.0);
    c.modalities = vec![ModalityConfig::new("a", 1, 3, 5), ModalityConfig::new("b", 1, 3, 5)];
    c.correspondences = 3;
    assert!(generate_scene(&c).is_err());
}

#[test]
fn inject_rate_zero_is_identity() {
    let s = generate_scene(&config(0.0).with_seed(3)).unwrap();
    let t = inject_misalignment(&s, 0.0, 9).unwrap();
    assert_eq!(s, t);
}

#[test]
fn inject_leaves_input_untouched_and_adds_inconsistency() {
    let s = generate_scene(&config(0.0).with_seed(3)).unwrap();
    let before = s.clone();
    let t = inject_misalignment(&s, 0.5, 9).unwrap();
    assert_eq!(s, before);
    assert_eq!(inconsistent_fraction(&s), 0.0);
    assert!(inconsistent_fraction(&t) > 0.2);
    assert!(t.graph.diagnostics().is_empty());
}

#[test]
fn inject_twice_does_not_lower_inconsistency() {
    let mut c = SceneConfig::two_modality(5, 4, 200, 200);
    c.misalignment_rate = 0.0;
    c.intra_edge_density = 0.02;
    let mut once = 0.0;
    let mut twice = 0.0;
    for seed in 0..20 {
        let s = generate_scene(&c.with_seed(seed)).unwrap();
        let a = inject_misalignment(&s, 0.1, 1000 + seed).unwrap();
        let b = inject_misalignment(&a, 0.2, 2000 + seed).unwrap();
        once += inconsistent_fraction(&a);
        twice += inconsistent_fraction(&b);
    }
    assert!(twice >= once, "{twice} < {once}");
    assert!(twice / 20.0 >= 0.2 - 0.05);
}

#[test]
fn inject_single_label_fails() {
    let mut c = config(0.0);
    c.modalities = vec![ModalityConfig::new("a", 1, 3, 5), ModalityConfig::new("b", 1, 3, 5)];
    c.correspondences = 3;
    let s = generate_scene(&c).unwrap();
    assert!(inject_misalignment(&s, 1.0, 0).is_err());
    assert!(inject_misalignment(&s, 1.5, 0).is_err());
}

#[test]
fn export_ingest_round_trip() {
    let dir = std::env::temp_dir().join(format!("mmcrf-scene-sim-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let s = generate_scene(&config(0.2).with_seed(12)).unwrap();
    let path = dir.join("a.scene");
    mmcrf::format::write_scene(&path, &s).unwrap();
    let back = ingest_features(&path).unwrap();
    assert_eq!(back, s);
    std::fs::remove_dir_all(&dir).unwrap();
}

fn data61_text() -> String {
    let f = |d: usize, base: f64| {
        (0..d)
            .map(|i| format!("{:?}", base + i as f64 * 0.1))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let labels2: Vec<String> = (1..=14).map(|i| format!("s{i}")).collect();
    let labels3: Vec<String> = (1..=13).map(|i| format!("s{i}")).collect();
    format!(
        "mmcrf-scene 1\nid data61-like\n[modalities]\n\
         2d dim=23 edge_dim=1 subset=20,21,22 labels={}\n\
         3d dim=17 edge_dim=1 subset=13,14,15,16 labels={}\n\
         [label_maps]\n[nodes]\n\
         0 2d s3 0 {}\n1 2d - 0 {}\n2 3d s3 0 {}\n\
         [intra_edges]\n0 1 0.5\n[correspondences]\n0 2 0.6 true -\n",
        labels2.join(","),
        labels3.join(","),
        f(23, 0.0),
        f(23, 1.0),
        f(17, 2.0)
    )
}

#[test]
fn data61_shaped_features_accepted() {
    let s = parse_scene(&data61_text(), Path::new("data61.scene")).unwrap();
    let g = &s.graph;
    assert_eq!(g.modalities()[0].feature_dim, 23);
    assert_eq!(g.modalities()[1].feature_dim, 17);
    let aug = g.augment_with_latent().unwrap();
    assert_eq!(aug.latent_nodes()[0].feature.len(), 41);
    assert_eq!(aug.latent_nodes()[0].gt, Some(3));

    // Missing ground truth: inference works, training does not.
    let prepared = Preset::Latent.prepare(&s).unwrap();
    let layout = Preset::Latent.layout(&prepared).unwrap();
    let p = init_parameters(&layout, InitMode::Zero);
    let pred = predict(&p, &prepared, &TrwConfig::default()).unwrap();
    assert_eq!(pred.nodes, vec![1, 1, 1]);
    let err = train(&p, &[prepared], &TrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains("node 1"), "{err}");
}

#[test]
fn wrong_feature_length_reports_line() {
    let text = data61_text().replace("\n2 3d s3 0 ", "\n2 3d s3 0 9.0 ");
    let err = parse_scene(&text, Path::new("bad.scene")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("bad.scene:"), "{msg}");
    assert!(msg.contains(":10:"), "{msg}");
}
