//! Multimodal factor graphs and latent-node augmentation.
//!
//! A [`MultimodalGraph`] holds nodes from several modalities, intra-modality
//! edges and cross-modality correspondences. Augmentation replaces every
//! correspondence by a latent node that is linked to each endpoint.
//!
//! Node ids are dense indices in insertion order. Latent nodes occupy the
//! variable indices `nodes.len()..nodes.len() + correspondences.len()`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use thiserror::Error as ThisError;

use crate::error::{Error, Result};
use crate::learning::latent_gt_compatible;

/// The label reserved for a cut (broken) link in latent label spaces.
pub const CUT_LABEL: usize = 0;

/// Ordered, unique label names. Regular labels are indexed `1..=len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("label space must contain at least one label".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.chars().any(char::is_whitespace) || n.contains(',') || n.contains(':') {
                return Err(Error::Config(format!("invalid label name {n:?}")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate label name {n:?}")));
            }
        }
        Ok(LabelSpace { names })
    }

    /// Labels named `{prefix}1 .. {prefix}L`.
    pub fn numbered(count: usize, prefix: &str) -> Result<Self> {
        Self::new((1..=count).map(|i| format!("{prefix}{i}")))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Name of a regular label (1-based).
    pub fn name(&self, label: usize) -> Option<&str> {
        label.checked_sub(1).and_then(|i| self.names.get(i)).map(String::as_str)
    }

    /// 1-based index of `name`.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub id: String,
    pub labels: LabelSpace,
    pub feature_dim: usize,
    /// Length of every intra-edge feature vector in this modality.
    pub edge_feature_dim: usize,
    /// Feature indices whose l2 difference forms the intra-edge feature, when
    /// edge features are derived rather than supplied.
    pub edge_subset: Option<Vec<usize>>,
}

impl ModalitySpec {
    pub fn new(id: impl Into<String>, labels: LabelSpace, feature_dim: usize) -> Self {
        ModalitySpec {
            id: id.into(),
            labels,
            feature_dim,
            edge_feature_dim: 1,
            edge_subset: None,
        }
    }

    pub fn with_edge_subset(mut self, subset: Vec<usize>) -> Self {
        self.edge_feature_dim = 1;
        self.edge_subset = Some(subset);
        self
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }
}

/// Declares which labels of modality `from` are compatible with which labels
/// of modality `to` (1-based pairs). Used when two modalities do not share
/// label names, e.g. semantic and geometric classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub from: usize,
    pub to: usize,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub modality: usize,
    /// Distinguishes instances (e.g. image frames) within one modality.
    pub instance: u32,
    pub feature: Vec<f64>,
    pub gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntraEdge {
    pub a: usize,
    pub b: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
    pub cuttable: bool,
    /// Ground truth of the latent node placed on this link, when supplied
    /// explicitly. Derived from the endpoint labels otherwise.
    pub latent_gt: Option<usize>,
}

/// Raw, unvalidated graph input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphParts {
    pub modalities: Vec<ModalitySpec>,
    pub label_maps: Vec<LabelMap>,
    pub nodes: Vec<GraphNode>,
    pub intra_edges: Vec<IntraEdge>,
    pub correspondences: Vec<Correspondence>,
}

#[derive(Debug, Clone, PartialEq, ThisError)]
pub enum Diagnostic {
    #[error("duplicate modality id {0:?}")]
    DuplicateModality(String),
    #[error("modality {0:?} has feature-dim 0")]
    ZeroFeatureDim(String),
    #[error("modality {modality:?}: edge subset index {index} out of range")]
    BadEdgeSubset { modality: String, index: usize },
    #[error("dangling id: {context} references {id}")]
    DanglingId { context: String, id: usize },
    #[error("dimension mismatch: {context} has length {actual}, expected {expected}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} out of range 1..={max} for node {node}")]
    LabelOutOfRange { node: usize, label: usize, max: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("cross-modality intra-edge between nodes {0} and {1}")]
    CrossModalityIntraEdge(usize, usize),
    #[error("duplicate edge between nodes {0} and {1}")]
    DuplicateEdge(usize, usize),
    #[error("duplicate correspondence between nodes {0} and {1}")]
    DuplicateCorrespondence(usize, usize),
    #[error("correspondence {index} links nodes {a} and {b} of the same modality instance")]
    SameInstanceCorrespondence { index: usize, a: usize, b: usize },
    #[error("overlap out of range on correspondence {index}: {overlap}")]
    OverlapOutOfRange { index: usize, overlap: f64 },
    #[error("non-cuttable correspondence {0} has latent ground truth 0")]
    NonCuttableCut(usize),
    #[error("latent label {label} out of range 0..={max} on correspondence {index}")]
    LatentLabelOutOfRange { index: usize, label: usize, max: usize },
    #[error("label map {0}: {1}")]
    BadLabelMap(usize, String),
}

/// Check every structural invariant of `parts`; one diagnostic per violation.
pub fn validate(parts: &GraphParts) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mods = &parts.modalities;

    let mut ids = HashSet::new();
    for m in mods {
        if !ids.insert(m.id.as_str()) {
            diags.push(Diagnostic::DuplicateModality(m.id.clone()));
        }
        if m.feature_dim == 0 {
            diags.push(Diagnostic::ZeroFeatureDim(m.id.clone()));
        }
        if let Some(subset) = &m.edge_subset {
            for &i in subset {
                if i >= m.feature_dim {
                    diags.push(Diagnostic::BadEdgeSubset {
                        modality: m.id.clone(),
                        index: i,
                    });
                }
            }
        }
    }

    for (k, map) in parts.label_maps.iter().enumerate() {
        let (Some(from), Some(to)) = (mods.get(map.from), mods.get(map.to)) else {
            diags.push(Diagnostic::BadLabelMap(k, "unknown modality".into()));
            continue;
        };
        if map.from == map.to {
            diags.push(Diagnostic::BadLabelMap(k, "maps a modality onto itself".into()));
        }
        for &(l, s) in &map.pairs {
            if l == 0 || l > from.num_labels() || s == 0 || s > to.num_labels() {
                diags.push(Diagnostic::BadLabelMap(
                    k,
                    format!("label pair ({l}, {s}) out of range"),
                ));
            }
        }
    }

    for (i, n) in parts.nodes.iter().enumerate() {
        let Some(m) = mods.get(n.modality) else {
            diags.push(Diagnostic::DanglingId {
                context: format!("node {i}"),
                id: n.modality,
            });
            continue;
        };
        if n.feature.len() != m.feature_dim {
            diags.push(Diagnostic::Dimension {
                context: format!("feature of node {i}"),
                expected: m.feature_dim,
                actual: n.feature.len(),
            });
        }
        if n.feature.iter().any(|v| !v.is_finite()) {
            diags.push(Diagnostic::NonFinite(format!("feature of node {i}")));
        }
        if let Some(l) = n.gt {
            if l == 0 || l > m.num_labels() {
                diags.push(Diagnostic::LabelOutOfRange {
                    node: i,
                    label: l,
                    max: m.num_labels(),
                });
            }
        }
    }

    let node_count = parts.nodes.len();
    let modality_of = |id: usize| parts.nodes.get(id).map(|n| n.modality);

    let mut seen_edges = HashSet::new();
    for (k, e) in parts.intra_edges.iter().enumerate() {
        let mut dangling = false;
        for id in [e.a, e.b] {
            if id >= node_count {
                diags.push(Diagnostic::DanglingId {
                    context: format!("intra-edge {k}"),
                    id,
                });
                dangling = true;
            }
        }
        if dangling {
            continue;
        }
        if e.a == e.b {
            diags.push(Diagnostic::SelfLoop(e.a));
            continue;
        }
        let (ma, mb) = (modality_of(e.a).unwrap(), modality_of(e.b).unwrap());
        if ma != mb {
            diags.push(Diagnostic::CrossModalityIntraEdge(e.a, e.b));
            continue;
        }
        if !seen_edges.insert((e.a.min(e.b), e.a.max(e.b))) {
            diags.push(Diagnostic::DuplicateEdge(e.a, e.b));
        }
        if let Some(m) = mods.get(ma) {
            if e.feature.len() != m.edge_feature_dim {
                diags.push(Diagnostic::Dimension {
                    context: format!("feature of intra-edge {k}"),
                    expected: m.edge_feature_dim,
                    actual: e.feature.len(),
                });
            }
        }
        if e.feature.iter().any(|v| !v.is_finite()) {
            diags.push(Diagnostic::NonFinite(format!("feature of intra-edge {k}")));
        }
    }

    let mut seen_corr = HashSet::new();
    for (k, c) in parts.correspondences.iter().enumerate() {
        let mut dangling = false;
        for id in [c.a, c.b] {
            if id >= node_count {
                diags.push(Diagnostic::DanglingId {
                    context: format!("correspondence {k}"),
                    id,
                });
                dangling = true;
            }
        }
        if !(0.0..=1.0).contains(&c.overlap) {
            diags.push(Diagnostic::OverlapOutOfRange {
                index: k,
                overlap: c.overlap,
            });
        }
        if dangling {
            continue;
        }
        if c.a == c.b {
            diags.push(Diagnostic::SelfLoop(c.a));
            continue;
        }
        let (na, nb) = (&parts.nodes[c.a], &parts.nodes[c.b]);
        if na.modality == nb.modality && na.instance == nb.instance {
            diags.push(Diagnostic::SameInstanceCorrespondence {
                index: k,
                a: c.a,
                b: c.b,
            });
        }
        if !seen_corr.insert((c.a.min(c.b), c.a.max(c.b))) {
            diags.push(Diagnostic::DuplicateCorrespondence(c.a, c.b));
        }
        if let Some(l) = c.latent_gt {
            let (first, _) = canonical_endpoints(&parts.nodes, c);
            let max = mods
                .get(parts.nodes[first].modality)
                .map_or(0, ModalitySpec::num_labels);
            if l > max {
                diags.push(Diagnostic::LatentLabelOutOfRange {
                    index: k,
                    label: l,
                    max,
                });
            }
            if l == CUT_LABEL && !c.cuttable {
                diags.push(Diagnostic::NonCuttableCut(k));
            }
        }
    }

    diags
}

/// Endpoints ordered so the first lies in the lower-indexed modality.
fn canonical_endpoints(nodes: &[GraphNode], c: &Correspondence) -> (usize, usize) {
    if nodes[c.b].modality < nodes[c.a].modality {
        (c.b, c.a)
    } else {
        (c.a, c.b)
    }
}

/// An unordered modality pair carrying at least one correspondence.
///
/// Latent nodes of the pair take labels from the `first` modality's label
/// space (plus the cut label).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityPair {
    pub first: usize,
    pub second: usize,
    /// `compatible[l - 1][s - 1]`: label `l` of `first` agrees with label `s`
    /// of `second`.
    pub compatible: Vec<Vec<bool>>,
}

impl ModalityPair {
    pub fn is_compatible(&self, first_label: usize, second_label: usize) -> bool {
        first_label >= 1
            && second_label >= 1
            && self
                .compatible
                .get(first_label - 1)
                .and_then(|r| r.get(second_label - 1))
                .copied()
                .unwrap_or(false)
    }
}

/// Compatibility between the label spaces of two modalities: identity for a
/// modality with itself, declared label maps when present, name equality
/// otherwise.
pub fn compatibility(
    modalities: &[ModalitySpec],
    label_maps: &[LabelMap],
    first: usize,
    second: usize,
) -> Vec<Vec<bool>> {
    let (lf, ls) = (modalities[first].num_labels(), modalities[second].num_labels());
    let mut compat = vec![vec![false; ls]; lf];
    if first == second {
        for (l, row) in compat.iter_mut().enumerate() {
            row[l] = true;
        }
        return compat;
    }
    let relevant: Vec<&LabelMap> = label_maps
        .iter()
        .filter(|m| (m.from, m.to) == (first, second) || (m.from, m.to) == (second, first))
        .collect();
    if relevant.is_empty() {
        for (l, row) in compat.iter_mut().enumerate() {
            let name = &modalities[first].labels.names()[l];
            if let Some(s) = modalities[second].labels.index_of(name) {
                row[s - 1] = true;
            }
        }
    } else {
        for m in relevant {
            for &(a, b) in &m.pairs {
                let (l, s) = if m.from == first { (a, b) } else { (b, a) };
                compat[l - 1][s - 1] = true;
            }
        }
    }
    compat
}

/// Which endpoint of its correspondence a latent edge attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    First,
    Second,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::First => 0,
            Side::Second => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentNode {
    pub correspondence: usize,
    /// Index into [`MultimodalGraph::pairs`].
    pub pair: usize,
    pub first_node: usize,
    pub second_node: usize,
    pub cuttable: bool,
    /// `[x_first, x_second, overlap]`.
    pub feature: Vec<f64>,
    pub gt: Option<usize>,
}

/// A pairwise factor of the grounded model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorEdge {
    Intra {
        edge: usize,
    },
    /// Orientation: (regular node, latent node).
    Latent {
        latent: usize,
        node: usize,
        side: Side,
    },
    /// Direct cross-modality link, used only when not augmented.
    /// Orientation: (first endpoint, second endpoint).
    Direct {
        correspondence: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalGraph {
    modalities: Vec<ModalitySpec>,
    label_maps: Vec<LabelMap>,
    nodes: Vec<GraphNode>,
    intra_edges: Vec<IntraEdge>,
    correspondences: Vec<Correspondence>,
    pairs: Vec<ModalityPair>,
    /// Pair index of every correspondence.
    corr_pair: Vec<usize>,
    latent: Option<Vec<LatentNode>>,
}

/// Validate `parts` and freeze them into a graph.
pub fn build_graph(parts: GraphParts) -> Result<MultimodalGraph> {
    let diags = validate(&parts);
    if !diags.is_empty() {
        return Err(Error::InvalidGraph(diags));
    }
    let GraphParts {
        modalities,
        label_maps,
        nodes,
        intra_edges,
        correspondences,
    } = parts;

    let keys: BTreeSet<(usize, usize)> = correspondences.iter().map(|c| pair_key(&nodes, c)).collect();
    let pairs: Vec<ModalityPair> = keys
        .iter()
        .map(|&(first, second)| ModalityPair {
            first,
            second,
            compatible: compatibility(&modalities, &label_maps, first, second),
        })
        .collect();
    let keys: Vec<(usize, usize)> = keys.into_iter().collect();
    let corr_pair = correspondences
        .iter()
        .map(|c| keys.binary_search(&pair_key(&nodes, c)).unwrap())
        .collect();

    Ok(MultimodalGraph {
        modalities,
        label_maps,
        nodes,
        intra_edges,
        correspondences,
        pairs,
        corr_pair,
        latent: None,
    })
}

fn pair_key(nodes: &[GraphNode], c: &Correspondence) -> (usize, usize) {
    let (ma, mb) = (nodes[c.a].modality, nodes[c.b].modality);
    (ma.min(mb), ma.max(mb))
}

impl MultimodalGraph {
    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.modalities
    }

    pub fn label_maps(&self) -> &[LabelMap] {
        &self.label_maps
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn intra_edges(&self) -> &[IntraEdge] {
        &self.intra_edges
    }

    pub fn correspondences(&self) -> &[Correspondence] {
        &self.correspondences
    }

    pub fn pairs(&self) -> &[ModalityPair] {
        &self.pairs
    }

    pub fn pair_of(&self, correspondence: usize) -> usize {
        self.corr_pair[correspondence]
    }

    pub fn latent_nodes(&self) -> &[LatentNode] {
        self.latent.as_deref().unwrap_or(&[])
    }

    pub fn is_augmented(&self) -> bool {
        self.latent.is_some()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Regular plus latent variables.
    pub fn variable_count(&self) -> usize {
        self.nodes.len() + self.latent_nodes().len()
    }

    /// Variable index of latent node `t`.
    pub fn latent_variable(&self, t: usize) -> usize {
        self.nodes.len() + t
    }

    /// Endpoints of a correspondence with the lower-modality endpoint first.
    pub fn canonical_endpoints(&self, correspondence: usize) -> (usize, usize) {
        canonical_endpoints(&self.nodes, &self.correspondences[correspondence])
    }

    /// Number of states of variable `v`: `L` for regular nodes, `L + 1` for
    /// latent nodes.
    pub fn states(&self, v: usize) -> usize {
        if v < self.nodes.len() {
            self.modalities[self.nodes[v].modality].num_labels()
        } else {
            let lat = &self.latent_nodes()[v - self.nodes.len()];
            self.modalities[self.pairs[lat.pair].first].num_labels() + 1
        }
    }

    /// Smallest label value of variable `v` (1 for regular, 0 for latent).
    pub fn label_base(&self, v: usize) -> usize {
        usize::from(v < self.nodes.len())
    }

    /// Ground-truth label per variable, if every variable has one.
    pub fn gt_labeling(&self) -> Option<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| n.gt)
            .chain(self.latent_nodes().iter().map(|l| l.gt))
            .collect()
    }

    /// Pairwise factors in a fixed order: intra edges, then either latent
    /// edges (first side, second side per latent node) or direct links.
    pub fn factor_edges(&self) -> Vec<FactorEdge> {
        let mut out: Vec<FactorEdge> = (0..self.intra_edges.len())
            .map(|edge| FactorEdge::Intra { edge })
            .collect();
        match &self.latent {
            Some(latent) => {
                for (t, l) in latent.iter().enumerate() {
                    out.push(FactorEdge::Latent {
                        latent: t,
                        node: l.first_node,
                        side: Side::First,
                    });
                    out.push(FactorEdge::Latent {
                        latent: t,
                        node: l.second_node,
                        side: Side::Second,
                    });
                }
            }
            None => {
                out.extend((0..self.correspondences.len()).map(|correspondence| FactorEdge::Direct { correspondence }))
            }
        }
        out
    }

    /// Variable endpoints of a factor edge, in table orientation.
    pub fn factor_endpoints(&self, f: FactorEdge) -> (usize, usize) {
        match f {
            FactorEdge::Intra { edge } => (self.intra_edges[edge].a, self.intra_edges[edge].b),
            FactorEdge::Latent { latent, node, .. } => (node, self.latent_variable(latent)),
            FactorEdge::Direct { correspondence } => self.canonical_endpoints(correspondence),
        }
    }

    /// Build a copy with one latent node per correspondence. Latent ground
    /// truth is taken from the correspondence when given, else derived from
    /// the endpoint labels.
    pub fn augment_with_latent(&self) -> Result<MultimodalGraph> {
        if self.latent.is_some() {
            return Err(Error::AlreadyAugmented);
        }
        let mut latent = Vec::with_capacity(self.correspondences.len());
        for (k, c) in self.correspondences.iter().enumerate() {
            let (first, second) = self.canonical_endpoints(k);
            let pair = self.corr_pair[k];
            let (xf, xs) = (&self.nodes[first].feature, &self.nodes[second].feature);
            let mut feature = Vec::with_capacity(xf.len() + xs.len() + 1);
            feature.extend_from_slice(xf);
            feature.extend_from_slice(xs);
            feature.push(c.overlap);
            let gt = match (c.latent_gt, self.nodes[first].gt, self.nodes[second].gt) {
                (Some(l), _, _) => Some(l),
                (None, Some(yf), Some(ys)) => Some(latent_gt_compatible(
                    yf,
                    self.pairs[pair].is_compatible(yf, ys),
                    c.cuttable,
                    ys,
                )?),
                _ => None,
            };
            latent.push(LatentNode {
                correspondence: k,
                pair,
                first_node: first,
                second_node: second,
                cuttable: c.cuttable,
                feature,
                gt,
            });
        }
        let mut out = self.clone();
        out.latent = Some(latent);
        Ok(out)
    }

    /// Same nodes and intra edges, no correspondences.
    pub fn without_correspondences(&self) -> MultimodalGraph {
        MultimodalGraph {
            modalities: self.modalities.clone(),
            label_maps: self.label_maps.clone(),
            nodes: self.nodes.clone(),
            intra_edges: self.intra_edges.clone(),
            correspondences: Vec::new(),
            pairs: Vec::new(),
            corr_pair: Vec::new(),
            latent: None,
        }
    }

    /// Raw parts of the un-augmented graph.
    pub fn to_parts(&self) -> GraphParts {
        GraphParts {
            modalities: self.modalities.clone(),
            label_maps: self.label_maps.clone(),
            nodes: self.nodes.clone(),
            intra_edges: self.intra_edges.clone(),
            correspondences: self.correspondences.clone(),
        }
    }

    /// Invariant diagnostics of the built graph, including latent nodes.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut diags = validate(&self.to_parts());
        for l in self.latent_nodes() {
            if !l.cuttable && l.gt == Some(CUT_LABEL) {
                diags.push(Diagnostic::NonCuttableCut(l.correspondence));
            }
        }
        diags
    }

    /// Number of pairwise factors joining regular nodes of different modalities.
    pub fn direct_cross_edges(&self) -> usize {
        self.factor_edges()
            .into_iter()
            .filter(|&f| {
                let (u, v) = self.factor_endpoints(f);
                u < self.nodes.len() && v < self.nodes.len() && self.nodes[u].modality != self.nodes[v].modality
            })
            .count()
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::First => "first",
            Side::Second => "second",
        })
    }
}
