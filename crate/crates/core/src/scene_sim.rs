//! Synthetic multimodal scenes with controllable cross-modality misalignment.
//!
//! Every node feature is a class prototype plus isotropic Gaussian noise,
//! followed by a constant bias entry. Modality 0 acts as a hub: each other
//! modality receives `correspondences` links to it. Links are first drawn
//! between regions with compatible labels; a Bernoulli subset is then made
//! inconsistent.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_graph, compatibility, Correspondence, GraphNode, GraphParts, IntraEdge, LabelSpace, ModalitySpec,
};
use crate::learning::TrainSample;
use crate::potentials::edge_feature_intra;

pub const OVERLAP_MIN: f64 = 0.2;
pub const OVERLAP_MAX: f64 = 1.0;

/// How an inconsistent link is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisalignmentMode {
    /// One endpoint takes a different label and features drawn from that
    /// label's prototype. The link's latent ground truth becomes the cut.
    #[default]
    FlipLabels,
    /// Labels stay consistent; one endpoint's features are drawn from the
    /// prototype of a wrong label.
    CorruptFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub id: String,
    /// Number of labels. Ignored when `label_names` is given.
    #[serde(default)]
    pub labels: usize,
    /// Explicit label names. Modalities agree on labels with equal names.
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
    /// Feature length including the trailing bias entry.
    pub feature_dim: usize,
    pub nodes: usize,
}

impl ModalityConfig {
    pub fn new(id: impl Into<String>, labels: usize, feature_dim: usize, nodes: usize) -> Self {
        ModalityConfig {
            id: id.into(),
            labels,
            label_names: None,
            feature_dim,
            nodes,
        }
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        match &self.label_names {
            Some(names) => LabelSpace::new(names.iter().cloned()),
            None => LabelSpace::numbered(self.labels, "class"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub modalities: Vec<ModalityConfig>,
    /// Connection probability of two same-label nodes of one modality.
    pub intra_edge_density: f64,
    /// Connection probability of differently labeled nodes, relative to
    /// `intra_edge_density`.
    #[serde(default = "default_cross_label_factor")]
    pub cross_label_factor: f64,
    /// Links between modality 0 and each other modality.
    pub correspondences: usize,
    pub misalignment_rate: f64,
    /// Distance between any two class means.
    pub class_separation: f64,
    /// Per-coordinate standard deviation of the feature noise.
    pub feature_noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: MisalignmentMode,
}

fn default_cross_label_factor() -> f64 {
    0.1
}

impl SceneConfig {
    /// Two modalities with equal label spaces.
    pub fn two_modality(labels: usize, feature_dim: usize, nodes: usize, correspondences: usize) -> Self {
        SceneConfig {
            modalities: vec![
                ModalityConfig::new("m2d", labels, feature_dim, nodes),
                ModalityConfig::new("m3d", labels, feature_dim, nodes),
            ],
            intra_edge_density: 0.1,
            cross_label_factor: default_cross_label_factor(),
            correspondences,
            misalignment_rate: 0.17,
            class_separation: 4.0,
            feature_noise: 1.0,
            seed: 0,
            mode: MisalignmentMode::FlipLabels,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SceneConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<Vec<ModalitySpec>> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("intra_edge_density", self.intra_edge_density)?;
        unit("misalignment_rate", self.misalignment_rate)?;
        if !(self.cross_label_factor >= 0.0 && self.intra_edge_density * self.cross_label_factor <= 1.0) {
            return Err(Error::Config(format!(
                "cross_label_factor {} gives a connection probability outside [0, 1]",
                self.cross_label_factor
            )));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config(format!(
                "class_separation must be positive, got {}",
                self.class_separation
            )));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config(format!(
                "feature_noise must be non-negative, got {}",
                self.feature_noise
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let mut specs = Vec::with_capacity(self.modalities.len());
        let mut ids = HashSet::new();
        for m in &self.modalities {
            if !ids.insert(m.id.as_str()) {
                return Err(Error::Config(format!("duplicate modality id {:?}", m.id)));
            }
            if m.feature_dim < 2 {
                return Err(Error::Config(format!(
                    "modality {:?}: feature_dim must be at least 2 (features plus bias)",
                    m.id
                )));
            }
            let labels = m.label_space()?;
            specs.push(
                ModalitySpec::new(m.id.clone(), labels, m.feature_dim)
                    .with_edge_subset((0..m.feature_dim - 1).collect()),
            );
        }
        if self.correspondences > 0 {
            if self.modalities.len() < 2 {
                return Err(Error::Config("correspondences need at least two modalities".into()));
            }
            let hub = self.modalities[0].nodes;
            for m in &self.modalities[1..] {
                if self.correspondences > hub * m.nodes {
                    return Err(Error::Config(format!(
                        "{} correspondences exceed the {} possible links between {:?} and {:?}",
                        self.correspondences,
                        hub * m.nodes,
                        self.modalities[0].id,
                        m.id
                    )));
                }
            }
        }
        Ok(specs)
    }
}

/// A generated scene together with its hidden generation state.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub sample: TrainSample,
    /// Class means per modality, indexed by label - 1, without the bias entry.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// `(correspondence, node)` for every link made inconsistent.
    pub misaligned: Vec<(usize, usize)>,
}

/// Class means with pairwise distance at least `separation`. Axis-aligned
/// when the dimension allows it, random directions otherwise.
pub fn class_prototypes(labels: usize, dim: usize, separation: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if labels == 1 {
        return vec![vec![0.0; dim]];
    }
    if dim >= labels {
        let r = separation / std::f64::consts::SQRT_2;
        return (0..labels)
            .map(|l| {
                let mut p = vec![0.0; dim];
                p[l] = r;
                p
            })
            .collect();
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let protos: Vec<Vec<f64>> = (0..labels)
        .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..labels {
        for j in i + 1..labels {
            let d: f64 = protos[i]
                .iter()
                .zip(&protos[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let scale = if min_dist > 0.0 { separation / min_dist } else { 1.0 };
    protos
        .into_iter()
        .map(|p| p.into_iter().map(|v| v * scale).collect())
        .collect()
}

fn sample_feature(proto: &[f64], noise: &Normal<f64>, rng: &mut impl Rng) -> Vec<f64> {
    let mut x: Vec<f64> = proto.iter().map(|&p| p + noise.sample(rng)).collect();
    x.push(1.0);
    x
}

fn incompatible_labels(compat: &[Vec<bool>], flip_first: bool, other: usize) -> Vec<usize> {
    if flip_first {
        (1..=compat.len()).filter(|&l| !compat[l - 1][other - 1]).collect()
    } else {
        (1..=compat[0].len()).filter(|&s| !compat[other - 1][s - 1]).collect()
    }
}

/// Draw `count` distinct links between nodes `a_nodes` and `b_nodes` whose
/// labels are compatible. Node-disjoint links are preferred.
fn draw_links(
    a_nodes: &[usize],
    b_nodes: &[usize],
    labels: &[usize],
    compat: &[Vec<bool>],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let mut links = Vec::with_capacity(count);
    let mut used_pairs = HashSet::new();
    let mut used_b = HashSet::new();
    let mut order: Vec<usize> = a_nodes.to_vec();
    order.shuffle(rng);
    for &a in &order {
        if links.len() == count {
            break;
        }
        let cands: Vec<usize> = b_nodes
            .iter()
            .copied()
            .filter(|b| !used_b.contains(b) && compat[labels[a] - 1][labels[*b] - 1])
            .collect();
        if let Some(&b) = cands.get(rng.random_range(0..cands.len().max(1))) {
            used_b.insert(b);
            used_pairs.insert((a, b));
            links.push((a, b));
        }
    }
    if links.len() < count {
        let mut rest: Vec<(usize, usize)> = a_nodes
            .iter()
            .flat_map(|&a| b_nodes.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| !used_pairs.contains(&(a, b)) && compat[labels[a] - 1][labels[b] - 1])
            .collect();
        if rest.len() < count - links.len() {
            return Err(Error::Config(format!(
                "cannot place {count} correspondences: only {} label-compatible links exist",
                links.len() + rest.len()
            )));
        }
        let need = count - links.len();
        let (chosen, _) = rest.partial_shuffle(rng, need);
        links.extend_from_slice(chosen);
    }
    Ok(links)
}

pub fn generate_scene(config: &SceneConfig) -> Result<TrainSample> {
    generate_scene_detailed(config).map(|g| g.sample)
}

pub fn generate_scene_detailed(config: &SceneConfig) -> Result<GeneratedScene> {
    let specs = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.feature_noise).map_err(|e| Error::Config(e.to_string()))?;

    let prototypes: Vec<Vec<Vec<f64>>> = specs
        .iter()
        .map(|s| class_prototypes(s.num_labels(), s.feature_dim - 1, config.class_separation, &mut rng))
        .collect();

    let mut node_modality = Vec::new();
    let mut labels = Vec::new();
    let mut ranges = Vec::with_capacity(specs.len());
    for (m, (mc, spec)) in config.modalities.iter().zip(&specs).enumerate() {
        let start = labels.len();
        for _ in 0..mc.nodes {
            node_modality.push(m);
            labels.push(rng.random_range(1..=spec.num_labels()));
        }
        ranges.push(start..labels.len());
    }

    // Consistent links first.
    let mut links: Vec<(usize, usize, usize)> = Vec::new();
    let hub: Vec<usize> = ranges[0].clone().collect();
    for (m, range) in ranges.iter().enumerate().skip(1) {
        if config.correspondences == 0 {
            break;
        }
        let compat = compatibility(&specs, &[], 0, m);
        let others: Vec<usize> = range.clone().collect();
        let chosen = draw_links(&hub, &others, &labels, &compat, config.correspondences, &mut rng)?;
        links.extend(chosen.into_iter().map(|(a, b)| (a, b, m)));
    }

    let mut degree = vec![0usize; labels.len()];
    for &(a, b, _) in &links {
        degree[a] += 1;
        degree[b] += 1;
    }

    // Feature source label; differs from the label only for corrupted features.
    let mut feature_label = labels.clone();
    let mut misaligned = Vec::new();
    for (k, &(a, b, m)) in links.iter().enumerate() {
        if !rng.random_bool(config.misalignment_rate) {
            continue;
        }
        let compat = compatibility(&specs, &[], 0, m);
        let flip_first = match (degree[a] == 1, degree[b] == 1) {
            (true, false) => true,
            (false, true) => false,
            _ => rng.random_bool(0.5),
        };
        let (target, other) = if flip_first { (a, b) } else { (b, a) };
        let cands = incompatible_labels(&compat, flip_first, labels[other]);
        if cands.is_empty() {
            return Err(Error::Config(format!(
                "label {} of modality {:?} has no incompatible alternative to misalign with",
                labels[other], specs[node_modality[other]].id
            )));
        }
        let new = cands[rng.random_range(0..cands.len())];
        match config.mode {
            MisalignmentMode::FlipLabels => {
                labels[target] = new;
                feature_label[target] = new;
            }
            MisalignmentMode::CorruptFeatures => feature_label[target] = new,
        }
        misaligned.push((k, target));
    }

    let nodes: Vec<GraphNode> = (0..labels.len())
        .map(|i| {
            let m = node_modality[i];
            GraphNode {
                modality: m,
                instance: 0,
                feature: sample_feature(&prototypes[m][feature_label[i] - 1], &noise, &mut rng),
                gt: Some(labels[i]),
            }
        })
        .collect();

    let p_same = config.intra_edge_density;
    let p_cross = config.intra_edge_density * config.cross_label_factor;
    let mut intra_edges = Vec::new();
    for (m, range) in ranges.iter().enumerate() {
        let subset = specs[m].edge_subset.as_deref().unwrap_or(&[]);
        for a in range.clone() {
            for b in a + 1..range.end {
                let p = if labels[a] == labels[b] { p_same } else { p_cross };
                if rng.random_bool(p) {
                    intra_edges.push(IntraEdge {
                        a,
                        b,
                        feature: edge_feature_intra(&nodes[a].feature, &nodes[b].feature, subset)?,
                    });
                }
            }
        }
    }

    let correspondences = links
        .iter()
        .map(|&(a, b, _)| Correspondence {
            a,
            b,
            overlap: rng.random_range(OVERLAP_MIN..OVERLAP_MAX),
            cuttable: true,
            latent_gt: None,
        })
        .collect();

    let graph = build_graph(GraphParts {
        modalities: specs,
        label_maps: Vec::new(),
        nodes,
        intra_edges,
        correspondences,
    })?;
    Ok(GeneratedScene {
        sample: TrainSample::new(format!("synthetic-{}", config.seed), graph),
        prototypes,
        misaligned,
    })
}

/// Make a Bernoulli(`rate`) subset of the cuttable links inconsistent by
/// relabeling one endpoint. The relabeled node's features are shifted from
/// the empirical mean of its old class to that of its new class, keeping its
/// residual. Returns a new sample; the input is untouched.
pub fn inject_misalignment(sample: &TrainSample, rate: f64, seed: u64) -> Result<TrainSample> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "misalignment rate must lie in [0, 1], got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(sample.clone());
    }
    let g = &sample.graph;
    let mut parts = g.to_parts();
    let n = parts.nodes.len();
    let mut labels = Vec::with_capacity(n);
    for (i, node) in parts.nodes.iter().enumerate() {
        labels.push(node.gt.ok_or(Error::MissingGroundTruth { node: i })?);
    }

    // Empirical class means, per modality.
    let means: Vec<Vec<Option<Vec<f64>>>> = parts
        .modalities
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            (1..=spec.num_labels())
                .map(|l| {
                    let members: Vec<&GraphNode> = parts
                        .nodes
                        .iter()
                        .filter(|nd| nd.modality == m && nd.gt == Some(l))
                        .collect();
                    if members.is_empty() {
                        return None;
                    }
                    let mut mean = vec![0.0; spec.feature_dim];
                    for nd in &members {
                        for (s, v) in mean.iter_mut().zip(&nd.feature) {
                            *s += v;
                        }
                    }
                    mean.iter_mut().for_each(|s| *s /= members.len() as f64);
                    Some(mean)
                })
                .collect()
        })
        .collect();

    let mut pinned = vec![false; n];
    for c in parts.correspondences.iter().filter(|c| !c.cuttable) {
        pinned[c.a] = true;
        pinned[c.b] = true;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut touched = vec![false; n];
    for k in 0..parts.correspondences.len() {
        let c = &parts.correspondences[k];
        if !c.cuttable || !rng.random_bool(rate) {
            continue;
        }
        let eligible: Vec<usize> = [c.a, c.b].into_iter().filter(|&v| !pinned[v]).collect();
        if eligible.is_empty() {
            continue;
        }
        let target = eligible[rng.random_range(0..eligible.len())];
        let other = if target == c.a { c.b } else { c.a };
        let (mt, mo) = (parts.nodes[target].modality, parts.nodes[other].modality);
        let compat = compatibility(&parts.modalities, &parts.label_maps, mt, mo);
        let mut cands: Vec<usize> = (1..=parts.modalities[mt].num_labels())
            .filter(|&l| !compat[l - 1][labels[other] - 1])
            .collect();
        if cands.is_empty() {
            return Err(Error::Config(format!(
                "node {target}: no label of modality {:?} disagrees with label {} of node {other}",
                parts.modalities[mt].id, labels[other]
            )));
        }
        let with_mean: Vec<usize> = cands.iter().copied().filter(|&l| means[mt][l - 1].is_some()).collect();
        if !with_mean.is_empty() {
            cands = with_mean;
        }
        let new = cands[rng.random_range(0..cands.len())];
        if let (Some(old_mean), Some(new_mean)) = (&means[mt][labels[target] - 1], &means[mt][new - 1]) {
            for ((x, o), nm) in parts.nodes[target].feature.iter_mut().zip(old_mean).zip(new_mean) {
                *x += nm - o;
            }
        }
        labels[target] = new;
        parts.nodes[target].gt = Some(new);
        touched[target] = true;
    }

    for e in &mut parts.intra_edges {
        if !(touched[e.a] || touched[e.b]) {
            continue;
        }
        if let Some(subset) = &parts.modalities[parts.nodes[e.a].modality].edge_subset {
            e.feature = edge_feature_intra(&parts.nodes[e.a].feature, &parts.nodes[e.b].feature, subset)?;
        }
    }
    // Explicit latent labels must follow the new endpoint labels.
    for c in &mut parts.correspondences {
        if c.latent_gt.is_some() && (touched[c.a] || touched[c.b]) {
            c.latent_gt = None;
        }
    }

    let graph = build_graph(parts)?;
    let graph = if g.is_augmented() {
        graph.augment_with_latent()?
    } else {
        graph
    };
    Ok(TrainSample::new(sample.id.clone(), graph))
}

/// Read a scene file exactly as written.
pub fn ingest_features(path: &Path) -> Result<TrainSample> {
    crate::format::read_scene(path)
}

/// Fraction of links whose endpoint labels are incompatible.
pub fn inconsistent_fraction(sample: &TrainSample) -> f64 {
    let g = &sample.graph;
    let total = g.correspondences().len();
    if total == 0 {
        return 0.0;
    }
    let bad = (0..total)
        .filter(|&k| {
            let (f, s) = g.canonical_endpoints(k);
            match (g.nodes()[f].gt, g.nodes()[s].gt) {
                (Some(yf), Some(ys)) => !g.pairs()[g.pair_of(k)].is_compatible(yf, ys),
                _ => false,
            }
        })
        .count();
    bad as f64 / total as f64
}
