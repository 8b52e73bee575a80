//! Builders and naive oracles shared by the integration tests.
#![allow(dead_code)]

use mmcrf::graph::{
    build_graph, Correspondence, GraphNode, GraphParts, IntraEdge, LabelSpace, ModalitySpec, MultimodalGraph,
};
use mmcrf::learning::TrainSample;
use mmcrf::matrix::Matrix;
use mmcrf::potentials::{
    init_parameters, EdgeTable, InitMode, InterFeaturePolicy, Mode, ModelLayout, ParameterBundle, PotentialTables,
};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

/// Tables over regular variables with uniform random costs in `[-scale, scale]`.
pub fn random_tables(rng: &mut impl Rng, states: &[usize], edges: &[(usize, usize)], scale: f64) -> PotentialTables {
    let unary = states
        .iter()
        .map(|&s| (0..s).map(|_| rng.random_range(-scale..=scale)).collect())
        .collect();
    let edges = edges
        .iter()
        .map(|&(u, v)| {
            let data = (0..states[u] * states[v])
                .map(|_| rng.random_range(-scale..=scale))
                .collect();
            EdgeTable {
                u,
                v,
                costs: Matrix::from_vec(states[u], states[v], data),
            }
        })
        .collect();
    PotentialTables {
        label_base: vec![1; states.len()],
        unary,
        edges,
    }
}

/// Random labeled tree on `n` vertices with randomly oriented edges.
pub fn random_tree(rng: &mut impl Rng, n: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    (1..n)
        .map(|i| {
            let (a, b) = (order[i], order[rng.random_range(0..i)]);
            if rng.random_bool(0.5) {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect()
}

/// Longest shortest path of a tree, in edges.
pub fn tree_diameter(n: usize, edges: &[(usize, usize)]) -> usize {
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
        (0..n).max_by_key(|&i| dist[i]).map(|i| (i, dist[i])).unwrap()
    };
    let (a, _) = farthest(0);
    farthest(a).1
}

pub struct NaiveMarginals {
    pub nodes: Vec<Vec<f64>>,
    pub edges: Vec<Vec<Vec<f64>>>,
    pub log_z: f64,
}

/// Exact marginals by plain enumeration with `exp`, independent of the
/// library's log-domain oracle.
pub fn naive_marginals(t: &PotentialTables) -> NaiveMarginals {
    let states: Vec<usize> = t.unary.iter().map(Vec::len).collect();
    let mut nodes: Vec<Vec<f64>> = states.iter().map(|&s| vec![0.0; s]).collect();
    let mut edges: Vec<Vec<Vec<f64>>> = t
        .edges
        .iter()
        .map(|e| vec![vec![0.0; states[e.v]]; states[e.u]])
        .collect();
    let mut z = 0.0;
    let mut x = vec![0usize; states.len()];
    'outer: loop {
        let mut e = 0.0;
        for (v, &xv) in x.iter().enumerate() {
            e += t.unary[v][xv];
        }
        for et in &t.edges {
            e += et.costs[(x[et.u], x[et.v])];
        }
        let w = (-e).exp();
        z += w;
        for (v, &xv) in x.iter().enumerate() {
            nodes[v][xv] += w;
        }
        for (k, et) in t.edges.iter().enumerate() {
            edges[k][x[et.u]][x[et.v]] += w;
        }
        for v in 0..x.len() {
            x[v] += 1;
            if x[v] < states[v] {
                continue 'outer;
            }
            x[v] = 0;
        }
        break;
    }
    nodes.iter_mut().flatten().for_each(|p| *p /= z);
    edges.iter_mut().flatten().flatten().for_each(|p| *p /= z);
    NaiveMarginals {
        nodes,
        edges,
        log_z: z.ln(),
    }
}

pub struct SmallScene {
    pub labels: [usize; 2],
    pub dims: [usize; 2],
    pub nodes: [usize; 2],
    pub intra: usize,
    pub links: usize,
}

/// Two-modality scene with random features, ground truth, intra edges and
/// node-disjoint links. Label spaces are `c1..cL` in both modalities, so
/// equal indices are compatible.
pub fn small_scene(rng: &mut impl Rng, s: &SmallScene) -> MultimodalGraph {
    let modalities: Vec<ModalitySpec> = (0..2)
        .map(|m| {
            ModalitySpec::new(
                format!("m{m}"),
                LabelSpace::numbered(s.labels[m], "c").unwrap(),
                s.dims[m],
            )
        })
        .collect();
    let mut nodes = Vec::new();
    for m in 0..2 {
        for _ in 0..s.nodes[m] {
            nodes.push(GraphNode {
                modality: m,
                instance: 0,
                feature: (0..s.dims[m]).map(|_| rng.random_range(-1.0..1.0)).collect(),
                gt: Some(rng.random_range(1..=s.labels[m])),
            });
        }
    }
    let mut pairs = Vec::new();
    for m in 0..2 {
        let base = if m == 0 { 0 } else { s.nodes[0] };
        for i in 0..s.nodes[m] {
            for j in i + 1..s.nodes[m] {
                pairs.push((base + i, base + j));
            }
        }
    }
    pairs.shuffle(rng);
    let intra_edges = pairs
        .into_iter()
        .take(s.intra)
        .map(|(a, b)| IntraEdge {
            a,
            b,
            feature: vec![rng.random_range(0.0..2.0)],
        })
        .collect();
    let mut left: Vec<usize> = (0..s.nodes[0]).collect();
    let mut right: Vec<usize> = (s.nodes[0]..s.nodes[0] + s.nodes[1]).collect();
    left.shuffle(rng);
    right.shuffle(rng);
    let correspondences = left
        .into_iter()
        .zip(right)
        .take(s.links)
        .map(|(a, b)| Correspondence {
            a,
            b,
            overlap: rng.random_range(0.2..1.0),
            cuttable: true,
            latent_gt: None,
        })
        .collect();
    build_graph(GraphParts {
        modalities,
        label_maps: vec![],
        nodes,
        intra_edges,
        correspondences,
    })
    .unwrap()
}

/// Layout with one pair and the given mode; augments the graph for latent mode.
pub fn sample_for(graph: &MultimodalGraph, mode: Mode, policy: InterFeaturePolicy) -> (TrainSample, ModelLayout) {
    let g = match mode {
        Mode::Latent => graph.augment_with_latent().unwrap(),
        Mode::NoLatent => graph.clone(),
    };
    let layout = ModelLayout::for_graph(&g, mode, policy).unwrap();
    (TrainSample::new("s", g), layout)
}

pub fn random_params(layout: &ModelLayout, rng: &mut impl RngCore, scale: f64) -> ParameterBundle {
    init_parameters(
        layout,
        InitMode::Random {
            seed: rng.next_u64(),
            scale,
        },
    )
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
