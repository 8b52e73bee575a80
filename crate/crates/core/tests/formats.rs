mod common;

use std::path::Path;

use common::{random_params, sample_for, small_scene, SmallScene};
use mmcrf::format::{
    labels_to_string, marginals_to_string, model_to_string, parse_labels, parse_model, parse_scene, scene_to_string,
    Prediction, StoredModel, MARGINALS_MAGIC,
};
use mmcrf::inference::{trw_marginals, TrwConfig};
use mmcrf::potentials::{ground, InterFeaturePolicy, Mode};
use mmcrf::preset::{predict, preset_semgeo, Preset, SemgeoMapping};
use mmcrf::scene_sim::{generate_scene, SceneConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn p(name: &str) -> &Path {
    Path::new(name)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_scene_export_is_byte_stable(seed in any::<u64>(), rate in 0.0f64..1.0) {
        let mut c = SceneConfig::two_modality(4, 5, 15, 10);
        c.misalignment_rate = rate;
        let s = generate_scene(&c.with_seed(seed)).unwrap();
        let text = scene_to_string(&s).unwrap();
        let back = parse_scene(&text, p("x.scene")).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(scene_to_string(&back).unwrap(), text);
    }

    #[test]
    fn model_round_trip_is_bit_exact(seed in any::<u64>(), mode in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = small_scene(&mut rng, &SmallScene { labels: [3, 3], dims: [2, 3], nodes: [3, 3], intra: 2, links: 2 });
        let (mode, policy) = match mode {
            0 => (Mode::Latent, InterFeaturePolicy::Constant),
            1 => (Mode::NoLatent, InterFeaturePolicy::Constant),
            _ => (Mode::NoLatent, InterFeaturePolicy::Concat { first: vec![1], second: vec![0, 2] }),
        };
        let (_, layout) = sample_for(&g, mode, policy);
        let model = StoredModel {
            params: random_params(&layout, &mut rng, 1e3).with_penalty(1234.5),
            messages: Some(7),
            preset: Some(if mode == Mode::Latent { Preset::Latent } else { Preset::NoLatent }),
        };
        let text = model_to_string(&model).unwrap();
        let back = parse_model(&text, p("m.model")).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(model_to_string(&back).unwrap(), text);
    }
}

#[test]
fn semgeo_scene_and_model_round_trip() {
    let s = generate_scene(&SceneConfig::two_modality(6, 4, 10, 6).with_seed(2)).unwrap();
    let mapping = SemgeoMapping::grouped(&s.graph.modalities()[0].labels, 3).unwrap();
    let ex = preset_semgeo(&s, &mapping).unwrap();
    let text = scene_to_string(&ex).unwrap();
    let back = parse_scene(&text, p("sg.scene")).unwrap();
    assert_eq!(back, ex);
    assert_eq!(scene_to_string(&back).unwrap(), text);

    let prepared = Preset::Semgeo.prepare(&back).unwrap();
    let layout = Preset::Semgeo.layout(&prepared).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = StoredModel {
        params: random_params(&layout, &mut rng, 1.0),
        messages: None,
        preset: None,
    };
    let mtext = model_to_string(&model).unwrap();
    assert!(mtext.contains("\nmessages -\n"));
    assert_eq!(parse_model(&mtext, p("sg.model")).unwrap(), model);
}

#[test]
fn labels_round_trip_with_cuts() {
    let s = generate_scene(&SceneConfig::two_modality(3, 4, 8, 5).with_seed(5)).unwrap();
    let prepared = Preset::Latent.prepare(&s).unwrap();
    let pred = Prediction {
        id: s.id.clone(),
        nodes: (0..16).map(|i| 1 + i % 3).collect(),
        latent: vec![(0, 0), (1, 2), (2, 0), (3, 3), (4, 1)],
    };
    let text = labels_to_string(&pred, &prepared).unwrap();
    assert!(text.contains("\n0 cut\n"));
    assert!(text.contains("\n1 class2\n"));
    let back = parse_labels(&text, p("a.labels"), &s).unwrap();
    assert_eq!(back, pred);
    assert_eq!(labels_to_string(&back, &s).unwrap(), text);
}

#[test]
fn malformed_inputs_name_file_and_line() {
    let err = parse_scene("mmcrf-scene 2\n", p("v.scene")).unwrap_err().to_string();
    assert!(err.starts_with("v.scene:1:"), "{err}");

    let s = generate_scene(&SceneConfig::two_modality(3, 4, 4, 2).with_seed(1)).unwrap();
    let text = scene_to_string(&s).unwrap().replace("\n3 m2d ", "\n9 m2d ");
    let err = parse_scene(&text, p("ids.scene")).unwrap_err().to_string();
    assert!(err.starts_with("ids.scene:"), "{err}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = small_scene(
        &mut rng,
        &SmallScene {
            labels: [2, 2],
            dims: [2, 2],
            nodes: [2, 2],
            intra: 1,
            links: 1,
        },
    );
    let (_, layout) = sample_for(&g, Mode::Latent, InterFeaturePolicy::Constant);
    let model = StoredModel {
        params: random_params(&layout, &mut rng, 1.0),
        messages: Some(10),
        preset: Some(Preset::Latent),
    };
    let text = model_to_string(&model).unwrap();
    let truncated: String = text
        .lines()
        .take(text.lines().count() - 1)
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(parse_model(&truncated, p("t.model")).is_err());
    let bad_preset = text.replace("preset latent", "preset fancy");
    let err = parse_model(&bad_preset, p("t.model")).unwrap_err().to_string();
    assert!(err.contains("t.model:") && err.contains("fancy"), "{err}");
    let bad_value = text.replacen("\n0.", "\nx.", 1);
    assert!(parse_model(&bad_value, p("t.model")).is_err());
}

#[test]
fn labels_for_wrong_scene_rejected() {
    let s = generate_scene(&SceneConfig::two_modality(3, 4, 8, 5).with_seed(5)).unwrap();
    let small = generate_scene(&SceneConfig::two_modality(3, 4, 4, 2).with_seed(5)).unwrap();
    let pred = Prediction {
        id: s.id.clone(),
        nodes: vec![1; 16],
        latent: vec![],
    };
    let text = labels_to_string(&pred, &s).unwrap();
    assert!(parse_labels(&text, p("w.labels"), &small).is_err());
}

#[test]
fn marginals_export_lists_every_variable_and_clique() {
    let s = generate_scene(&SceneConfig::two_modality(3, 4, 6, 3).with_seed(8)).unwrap();
    let prepared = Preset::Latent.prepare(&s).unwrap();
    let layout = Preset::Latent.layout(&prepared).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = random_params(&layout, &mut rng, 0.3);
    let tables = ground(&prepared.graph, &params).unwrap();
    let m = trw_marginals(&tables, &TrwConfig::default()).unwrap();
    let text = marginals_to_string(&prepared.id, &tables, &m).unwrap();
    assert!(text.starts_with(MARGINALS_MAGIC));
    let nodes_at = text.find("[nodes]\n").unwrap();
    let edges_at = text.find("[edges]\n").unwrap();
    assert_eq!(
        text[nodes_at..edges_at].lines().count() - 1,
        prepared.graph.variable_count()
    );
    assert_eq!(text[edges_at..].matches("edge ").count(), tables.edges.len());
    let pred = predict(&params, &prepared, &TrwConfig::default()).unwrap();
    assert_eq!(pred.latent.len(), 3);
}
