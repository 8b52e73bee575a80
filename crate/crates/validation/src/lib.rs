//! Benchmark scenes, random instances and scoring used by the acceptance run.

use mmcrf::eval::{CutCounts, EvalReport};
use mmcrf::inference::{EdgeAppearance, TrwConfig};
use mmcrf::learning::{empirical_risk, train, TrainConfig, TrainSample};
use mmcrf::matrix::Matrix;
use mmcrf::potentials::{init_parameters, EdgeTable, InitMode, ParameterBundle, PotentialTables};
use mmcrf::preset::{predict, preset_semgeo, Preset, SemgeoMapping};
use mmcrf::scene_sim::{generate_scene, SceneConfig};
use mmcrf::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const TRAIN_SEEDS: std::ops::Range<u64> = 0..40;
pub const TEST_SEEDS: std::ops::Range<u64> = 1000..1020;

/// Two modalities, 6 labels, 60 nodes each, 50 links per scene.
pub fn benchmark_config(misalignment_rate: f64) -> SceneConfig {
    let mut c = SceneConfig::two_modality(6, 7, 60, 50);
    c.misalignment_rate = misalignment_rate;
    c.class_separation = 4.0;
    c.feature_noise = 1.0;
    c.intra_edge_density = 0.2;
    c.cross_label_factor = 0.1;
    c
}

pub struct Benchmark {
    pub train: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
}

impl Benchmark {
    pub fn generate(config: &SceneConfig) -> Result<Self> {
        let make = |seeds: std::ops::Range<u64>| -> Result<Vec<TrainSample>> {
            seeds
                .into_par_iter()
                .map(|s| generate_scene(&config.with_seed(s)))
                .collect()
        };
        Ok(Benchmark {
            train: make(TRAIN_SEEDS)?,
            test: make(TEST_SEEDS)?,
        })
    }

    pub fn semgeo(&self, groups: usize) -> Result<Self> {
        let labels = &self.train[0].graph.modalities()[0].labels;
        let mapping = SemgeoMapping::grouped(labels, groups)?;
        let expand = |v: &[TrainSample]| -> Result<Vec<TrainSample>> {
            v.par_iter().map(|s| preset_semgeo(s, &mapping)).collect()
        };
        Ok(Benchmark {
            train: expand(&self.train)?,
            test: expand(&self.test)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TestScore {
    /// Correct over all test nodes of the first two modalities.
    pub accuracy: f64,
    pub cuts: Option<CutCounts>,
    /// Test links that may not be cut but were decoded to the cut label.
    pub forbidden_cuts: usize,
}

#[derive(Debug, Clone)]
pub struct PresetRun {
    pub preset: Preset,
    pub test: TestScore,
    pub initial_risk: f64,
    pub final_risk: f64,
}

/// Train `preset` from zero on the benchmark and score it on the test set.
pub fn run_preset(bench: &Benchmark, preset: Preset, config: &TrainConfig) -> Result<PresetRun> {
    let prep = |v: &[TrainSample]| -> Result<Vec<TrainSample>> { v.par_iter().map(|s| preset.prepare(s)).collect() };
    let train_set = prep(&bench.train)?;
    let test_set = prep(&bench.test)?;
    let layout = preset.layout(&train_set[0])?;
    let zero = init_parameters(&layout, InitMode::Zero);
    let outcome = train(&zero, &train_set, config)?;
    Ok(PresetRun {
        preset,
        test: score(&outcome.params, &test_set, &config.trw)?,
        initial_risk: outcome.trace[0].risk,
        final_risk: empirical_risk(&outcome.params, &train_set, config)?,
    })
}

pub fn score(params: &ParameterBundle, test: &[TrainSample], trw: &TrwConfig) -> Result<TestScore> {
    let results: Vec<(EvalReport, usize)> = test
        .par_iter()
        .map(|s| {
            let pred = predict(params, s, trw)?;
            let forbidden = pred
                .latent
                .iter()
                .filter(|&&(k, l)| l == 0 && !s.graph.correspondences()[k].cuttable)
                .count();
            Ok((EvalReport::evaluate(s, &pred)?, forbidden))
        })
        .collect::<Result<_>>()?;
    let reports: Vec<EvalReport> = results.iter().map(|r| r.0.clone()).collect();
    let all = EvalReport::aggregate(&reports)?;
    let (correct, total) = all.modalities[..2].iter().fold((0u64, 0u64), |(c, t), m| {
        let k = &m.confusion;
        let diag: u64 = (0..k.labels.len()).map(|l| k.counts[l][l]).sum();
        (c + diag, t + k.total())
    });
    Ok(TestScore {
        accuracy: correct as f64 / total as f64,
        cuts: all.cuts,
        forbidden_cuts: results.iter().map(|r| r.1).sum(),
    })
}

/// A random tree of 2 to 8 variables with 2 to 4 states each and costs
/// uniform in `[-2, 2]`, together with its diameter.
pub fn random_tree_tables(seed: u64) -> (PotentialTables, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let states: Vec<usize> = (0..n).map(|_| rng.random_range(2..=4)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let pairs: Vec<(usize, usize)> = (1..n)
        .map(|i| {
            let (a, b) = (order[i], order[rng.random_range(0..i)]);
            if rng.random_bool(0.5) {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    let mut cost = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-2.0..=2.0)).collect() };
    let unary = states.iter().map(|&s| cost(s)).collect();
    let edges = pairs
        .iter()
        .map(|&(u, v)| EdgeTable {
            u,
            v,
            costs: Matrix::from_vec(states[u], states[v], cost(states[u] * states[v])),
        })
        .collect();
    let tables = PotentialTables {
        label_base: vec![1; n],
        unary,
        edges,
    };
    (tables, diameter(n, &pairs))
}

fn diameter(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let farthest = |start: usize| {
        let mut dist = vec![usize::MAX; n];
        dist[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(x) = queue.pop_front() {
            for &y in &adj[x] {
                if dist[y] == usize::MAX {
                    dist[y] = dist[x] + 1;
                    queue.push_back(y);
                }
            }
        }
        (0..n).max_by_key(|&i| dist[i]).map(|i| (i, dist[i])).unwrap_or((0, 0))
    };
    let (a, _) = farthest(0);
    farthest(a).1
}

/// TRW schedule that is exact on a tree: ρ = 1 and `diameter` rounds.
pub fn tree_schedule(diameter: usize) -> TrwConfig {
    TrwConfig {
        iterations: diameter,
        edge_appearance: EdgeAppearance::Constant(1.0),
        ..TrwConfig::default()
    }
}

pub struct GradientInstance {
    pub samples: Vec<TrainSample>,
    pub params: ParameterBundle,
    pub config: TrainConfig,
}

/// A generated scene of at most 6 variables (latent nodes included) with
/// L ≤ 3, K ≤ 5, λ ∈ {0, 1e-3} and random parameters.
pub fn gradient_instance(seed: u64) -> Result<GradientInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = rng.random_bool(0.5);
    let n0 = rng.random_range(1..=3);
    let n1 = rng.random_range(1..=3);
    let links = if latent {
        rng.random_range(0..=n0.min(n1).min(6 - n0 - n1))
    } else {
        rng.random_range(0..=n0.min(n1))
    };
    let mut config = SceneConfig::two_modality(rng.random_range(2..=3), rng.random_range(2..=4), n0, links);
    config.modalities[1].nodes = n1;
    config.intra_edge_density = 0.5;
    config.cross_label_factor = 1.0;
    config.misalignment_rate = 0.5;
    config.class_separation = 1.0;
    let preset = if latent { Preset::Latent } else { Preset::NoLatent };
    // Tiny scenes may lack a label-compatible pair to link; draw again.
    let scene = loop {
        config.seed = rng.random();
        match generate_scene(&config) {
            Ok(s) => break s,
            Err(mmcrf::Error::Config(_)) => continue,
            Err(e) => return Err(e),
        }
    };
    let sample = preset.prepare(&scene)?;
    let layout = preset.layout(&sample)?;
    let params = init_parameters(
        &layout,
        InitMode::Random {
            seed: rng.random(),
            scale: 0.5,
        },
    );
    let config = TrainConfig {
        trw: TrwConfig::with_iterations(rng.random_range(1..=5)),
        lambda: if rng.random_bool(0.5) { 0.0 } else { 1e-3 },
        ..TrainConfig::default()
    };
    Ok(GradientInstance {
        samples: vec![sample],
        params,
        config,
    })
}
