mod common;

use common::{naive_marginals, random_params, sample_for, small_scene, SmallScene};
use mmcrf::error::Error;
use mmcrf::format::block_names;
use mmcrf::graph::CUT_LABEL;
use mmcrf::inference::{brute_force_marginals, TrwConfig};
use mmcrf::learning::{
    clique_marginal_loss, empirical_risk, latent_gt, risk_and_gradient, risk_gradient, train, InnerOptimizer,
    Preconditioner, TrainConfig, TrainSample,
};
use mmcrf::potentials::{ground, init_parameters, InitMode, InterFeaturePolicy, Mode, ParameterBundle};
use mmcrf::scene_sim::{generate_scene, SceneConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(k: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        trw: TrwConfig::with_iterations(k),
        lambda,
        ..TrainConfig::default()
    }
}

/// Small instance: at most 6 variables including latent nodes, L ≤ 3.
fn tiny_instance(seed: u64) -> (Vec<TrainSample>, ParameterBundle, TrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(2..=3);
    let latent = rng.random_bool(0.5);
    let n0 = rng.random_range(1..=3);
    let n1 = rng.random_range(1..=3);
    let max_links = n0.min(n1).min(6 - n0 - n1);
    let s = SmallScene {
        labels: [l, l],
        dims: [rng.random_range(1..=3), rng.random_range(1..=3)],
        nodes: [n0, n1],
        intra: rng.random_range(0..=2),
        links: rng.random_range(0..=max_links),
    };
    let g = small_scene(&mut rng, &s);
    let mode = if latent { Mode::Latent } else { Mode::NoLatent };
    let (sample, layout) = sample_for(&g, mode, InterFeaturePolicy::Constant);
    let params = random_params(&layout, &mut rng, 0.5);
    let k = rng.random_range(1..=5);
    let lambda = if rng.random_bool(0.5) { 0.0 } else { 1e-3 };
    (vec![sample], params, config(k, lambda))
}

fn gradient_agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-8 || diff <= 1e-4 * analytic.abs().max(numeric.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let (samples, params, cfg) = tiny_instance(seed);
        let (_, grad) = risk_and_gradient(&params, &samples, &cfg).unwrap();
        let g = grad.blocks.to_vec();
        let theta = params.blocks.to_vec();
        let h = 1e-5;
        for i in 0..theta.len() {
            let at = |delta: f64| {
                let mut t = theta.clone();
                t[i] += delta;
                let mut b = params.blocks.clone();
                b.set_from(&t);
                empirical_risk(&params.with_blocks(b), &samples, &cfg).unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            prop_assert!(gradient_agrees(g[i], numeric), "coordinate {}: analytic {} numeric {}", i, g[i], numeric);
        }
    }

    #[test]
    fn loss_matches_enumerated_clique_marginals(seed in any::<u64>()) {
        let (samples, params, _) = tiny_instance(seed);
        let s = &samples[0];
        let tables = ground(&s.graph, &params).unwrap();
        let exact = brute_force_marginals(&tables).unwrap();
        let got = clique_marginal_loss(&exact, s).unwrap();
        let naive = naive_marginals(&tables);
        let gt = s.gt_labeling().unwrap();
        let mut want = 0.0;
        for (k, e) in tables.edges.iter().enumerate() {
            let a = gt[e.u] - s.graph.label_base(e.u);
            let b = gt[e.v] - s.graph.label_base(e.v);
            want -= naive.edges[k][a][b].ln();
        }
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn unary_gradient_columns_sum_to_zero(seed in any::<u64>(), zero in any::<bool>()) {
        let (samples, mut params, cfg) = tiny_instance(seed);
        if zero {
            params = init_parameters(&params.layout, InitMode::Zero);
        }
        let grad = risk_gradient(&params, &samples, &TrainConfig { lambda: 0.0, ..cfg }).unwrap();
        let names = block_names(&params.layout);
        for ((name, rows, cols), g) in names.iter().zip(grad.blocks.slices()) {
            if !name.starts_with("unary ") {
                continue;
            }
            for c in 0..*cols {
                let s: f64 = (0..*rows).map(|r| g[r * cols + c]).sum();
                prop_assert!(s.abs() <= 1e-9, "{} column {}: {}", name, c, s);
            }
        }
    }

    #[test]
    fn risk_is_additive_over_samples(a in any::<u64>(), b in any::<u64>()) {
        let (s1, p, cfg) = tiny_instance(a);
        let mut rng = ChaCha8Rng::seed_from_u64(b);
        // A second scene with the same layout.
        let g = s1[0].graph.clone();
        let mut parts = g.to_parts();
        for n in &mut parts.nodes {
            for x in &mut n.feature {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let g2 = mmcrf::graph::build_graph(parts).unwrap();
        let g2 = if g.is_augmented() { g2.augment_with_latent().unwrap() } else { g2 };
        let s2 = TrainSample::new("t", g2);
        let both = vec![s1[0].clone(), s2.clone()];
        let reg = cfg.lambda * p.blocks.norm_sq();
        let r = empirical_risk(&p, &both, &cfg).unwrap();
        let r1 = empirical_risk(&p, &s1, &cfg).unwrap() - reg;
        let r2 = empirical_risk(&p, &[s2], &cfg).unwrap() - reg;
        prop_assert!((r - (r1 + r2 + reg)).abs() <= 1e-9 * r.abs().max(1.0));
    }
}

#[test]
fn latent_gt_examples() {
    assert_eq!(latent_gt(3, 3, true).unwrap(), 3);
    assert_eq!(latent_gt(2, 5, true).unwrap(), CUT_LABEL);
    for a in 1..=3 {
        for b in 1..=3 {
            let want = if a == b { a } else { 0 };
            assert_eq!(latent_gt(a, b, true).unwrap(), want);
        }
    }
    assert_eq!(latent_gt(2, 2, false).unwrap(), 2);
    assert!(matches!(
        latent_gt(1, 2, false),
        Err(Error::GroundTruthContradiction { .. })
    ));
}

#[test]
fn zero_params_give_ln4_per_clique() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = small_scene(
        &mut rng,
        &SmallScene {
            labels: [2, 2],
            dims: [2, 2],
            nodes: [4, 3],
            intra: 4,
            links: 3,
        },
    );
    let (s, layout) = sample_for(&g, Mode::NoLatent, InterFeaturePolicy::Constant);
    let cliques = s.graph.factor_edges().len();
    assert_eq!(cliques, 7);
    let p = init_parameters(&layout, InitMode::Zero);
    let r = empirical_risk(&p, &[s], &config(10, 0.0)).unwrap();
    assert!((r - cliques as f64 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn empty_sample_set_is_regularizer_only() {
    let (_, p, _) = tiny_instance(4);
    let cfg = config(5, 0.3);
    let r = empirical_risk(&p, &[], &cfg).unwrap();
    assert!((r - 0.3 * p.blocks.norm_sq()).abs() < 1e-12);
    let g = risk_gradient(&p, &[], &cfg).unwrap();
    let want: Vec<f64> = p.blocks.to_vec().iter().map(|x| 0.6 * x).collect();
    assert!(common::max_abs_diff(&g.blocks.to_vec(), &want) < 1e-15);
}

#[test]
fn penalty_does_not_move_the_zero_model_loss() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = small_scene(
            &mut rng,
            &SmallScene {
                labels: [3, 3],
                dims: [2, 2],
                nodes: [4, 4],
                intra: 3,
                links: 4,
            },
        );
        let (s, layout) = sample_for(&g, Mode::Latent, InterFeaturePolicy::Constant);
        let p = init_parameters(&layout, InitMode::Zero);
        let cfg = config(10, 0.0);
        let a = empirical_risk(&p, std::slice::from_ref(&s), &cfg).unwrap();
        let b = empirical_risk(&p.clone().with_penalty(2000.0), &[s], &cfg).unwrap();
        assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
    }
}

fn separable_scene() -> TrainSample {
    let mut c = SceneConfig::two_modality(3, 4, 12, 8);
    c.misalignment_rate = 0.0;
    c.class_separation = 8.0;
    c.feature_noise = 0.5;
    c.intra_edge_density = 0.3;
    generate_scene(&c).unwrap()
}

#[test]
fn training_reaches_a_tenth_of_the_initial_loss_on_separable_scene() {
    let raw = separable_scene();
    let sample = TrainSample::new(raw.id.clone(), raw.graph.augment_with_latent().unwrap());
    let layout =
        mmcrf::potentials::ModelLayout::for_graph(&sample.graph, Mode::Latent, InterFeaturePolicy::Constant).unwrap();
    let p = init_parameters(&layout, InitMode::Zero);
    let cfg = TrainConfig {
        outer_iterations: 30,
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&p, &[sample], &cfg).unwrap();
    let first = out.trace[0].risk;
    assert!(out.best_risk < 0.1 * first, "{} vs initial {}", out.best_risk, first);
}

#[test]
fn training_trace_properties() {
    let raw = separable_scene();
    let (s, layout) = sample_for(&raw.graph, Mode::NoLatent, InterFeaturePolicy::Constant);
    let p = init_parameters(&layout, InitMode::Zero);
    for pre in [Preconditioner::FeatureScale, Preconditioner::Identity] {
        for opt in [InnerOptimizer::LineSearch, InnerOptimizer::FixedStep] {
            let cfg = TrainConfig {
                optimizer: opt,
                preconditioner: pre,
                step_size: if opt == InnerOptimizer::FixedStep { 1e-3 } else { 1.0 },
                ..TrainConfig::default()
            };
            let a = train(&p, std::slice::from_ref(&s), &cfg).unwrap();
            let b = train(&p, std::slice::from_ref(&s), &cfg).unwrap();
            assert_eq!(a.trace, b.trace);
            assert!(a.trace.len() <= cfg.outer_iterations + 1);
            let min = a.trace.iter().map(|e| e.risk).fold(f64::INFINITY, f64::min);
            assert_eq!(a.best_risk, min);
            assert!(a.best_risk <= a.trace[0].risk);
            let again = empirical_risk(&a.params, std::slice::from_ref(&s), &cfg).unwrap();
            assert_eq!(again.to_bits(), a.best_risk.to_bits());
        }
    }
}

#[test]
fn huge_fixed_step_diverges_with_trace() {
    let raw = separable_scene();
    let (s, layout) = sample_for(&raw.graph, Mode::NoLatent, InterFeaturePolicy::Constant);
    let p = init_parameters(&layout, InitMode::Zero);
    let cfg = TrainConfig {
        optimizer: InnerOptimizer::FixedStep,
        preconditioner: Preconditioner::Identity,
        step_size: 1e306,
        ..TrainConfig::default()
    };
    match train(&p, &[s], &cfg) {
        Err(Error::Diverged { iteration, trace }) => {
            assert_eq!(iteration, 1);
            assert_eq!(trace.len(), 1);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn missing_ground_truth_is_rejected() {
    let raw = separable_scene();
    let mut parts = raw.graph.to_parts();
    parts.nodes[3].gt = None;
    let g = mmcrf::graph::build_graph(parts).unwrap();
    let (s, layout) = sample_for(&g, Mode::NoLatent, InterFeaturePolicy::Constant);
    let p = init_parameters(&layout, InitMode::Zero);
    let err = train(&p, &[s], &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::MissingGroundTruth { node: 3 }), "{err}");
}
