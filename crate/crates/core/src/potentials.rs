//! Parameter matrices and grounding of a graph into energy tables.
//!
//! Every unary and pairwise energy is linear in the parameters:
//!
//! * node unary: `A^m x`, one row per label;
//! * intra pairwise: `B^m v`, row `(l-1)·L + (s-1)` for the label pair `(l, s)`;
//! * latent unary: `A^Δ x^Δ`, row 0 is the cut label;
//! * latent pairwise: one free cost per compatible (node label, latent label)
//!   cell and one cut cost per node label; every other cell is the fixed
//!   penalty `P`;
//! * direct inter-modality pairwise (no-latent model): `B^{m-i} v`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{FactorEdge, LabelMap, ModalitySpec, MultimodalGraph, Side};
use crate::matrix::{dot, Matrix};

pub const DEFAULT_PENALTY: f64 = 1000.0;

/// Row-order convention of pairwise `B` matrices, written into model files.
pub const ROW_ORDER: &str = "(l-1)*L_cols+(s-1)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Cross-modality links go through latent nodes.
    Latent,
    /// Cross-modality links are direct pairwise factors (or absent).
    NoLatent,
}

/// Edge feature of direct cross-modality factors in the no-latent model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InterFeaturePolicy {
    /// The scalar 1; `B^{m-i}` reduces to a label-compatibility table.
    Constant,
    /// Selected features of the first endpoint, then of the second, then the
    /// overlap.
    Concat { first: Vec<usize>, second: Vec<usize> },
}

impl InterFeaturePolicy {
    pub fn dim(&self) -> usize {
        match self {
            InterFeaturePolicy::Constant => 1,
            InterFeaturePolicy::Concat { first, second } => first.len() + second.len() + 1,
        }
    }

    /// All features of both endpoints plus the overlap.
    pub fn full(first_dim: usize, second_dim: usize) -> Self {
        InterFeaturePolicy::Concat {
            first: (0..first_dim).collect(),
            second: (0..second_dim).collect(),
        }
    }
}

/// One modality pair of the model with its latent-pairwise cell layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLayout {
    pub first: usize,
    pub second: usize,
    pub compatible: Vec<Vec<bool>>,
    /// Per side, `cell[(l - 1) * L_first + (s - 1)]` is the index of the free
    /// "same" parameter for node label `l` and latent label `s`.
    cells: [Vec<Option<usize>>; 2],
    same_counts: [usize; 2],
}

impl PairLayout {
    fn new(first: usize, second: usize, compatible: Vec<Vec<bool>>) -> Self {
        let lf = compatible.len();
        let ls = compatible.first().map_or(0, Vec::len);
        let mut first_cells = vec![None; lf * lf];
        for l in 0..lf {
            first_cells[l * lf + l] = Some(l);
        }
        let mut second_cells = vec![None; ls * lf];
        let mut n = 0;
        for s in 0..lf {
            for l in 0..ls {
                if compatible[s][l] {
                    second_cells[l * lf + s] = Some(n);
                    n += 1;
                }
            }
        }
        PairLayout {
            first,
            second,
            compatible,
            cells: [first_cells, second_cells],
            same_counts: [lf, n],
        }
    }

    pub fn latent_labels(&self) -> usize {
        self.compatible.len()
    }

    pub fn side_modality(&self, side: Side) -> usize {
        match side {
            Side::First => self.first,
            Side::Second => self.second,
        }
    }

    /// Number of free "same" costs on one side.
    pub fn same_count(&self, side: Side) -> usize {
        self.same_counts[side.index()]
    }

    /// Index of the free cost of node label `l` against latent label `s`
    /// (both 1-based), if that cell is a compatible one.
    pub fn same_cell(&self, side: Side, l: usize, s: usize) -> Option<usize> {
        let lf = self.latent_labels();
        self.cells[side.index()][(l - 1) * lf + (s - 1)]
    }
}

/// What a latent pairwise cell is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentCell {
    Same(usize),
    Cut(usize),
    Penalty,
}

/// Classify cell `(l, s)` of a latent table (`l` 1-based node label, `s`
/// latent label with 0 = cut).
pub fn latent_cell(pair: &PairLayout, side: Side, l: usize, s: usize, cuttable: bool) -> LatentCell {
    if s == 0 {
        if cuttable {
            LatentCell::Cut(l - 1)
        } else {
            LatentCell::Penalty
        }
    } else {
        pair.same_cell(side, l, s).map_or(LatentCell::Penalty, LatentCell::Same)
    }
}

/// Shapes and label structure every bundle for a given model agrees on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub modalities: Vec<ModalitySpec>,
    pub label_maps: Vec<LabelMap>,
    pub pairs: Vec<PairLayout>,
    pub mode: Mode,
    pub inter_policy: InterFeaturePolicy,
}

impl ModelLayout {
    /// `pair_keys` are `(first, second)` modality indices with `first <= second`.
    pub fn new(
        modalities: Vec<ModalitySpec>,
        label_maps: Vec<LabelMap>,
        pair_keys: &[(usize, usize)],
        mode: Mode,
        inter_policy: InterFeaturePolicy,
    ) -> Result<Self> {
        let mut keys = pair_keys.to_vec();
        keys.sort_unstable();
        keys.dedup();
        let mut pairs = Vec::with_capacity(keys.len());
        for (first, second) in keys {
            if first > second || second >= modalities.len() {
                return Err(Error::Config(format!("invalid modality pair ({first}, {second})")));
            }
            let compat = crate::graph::compatibility(&modalities, &label_maps, first, second);
            pairs.push(PairLayout::new(first, second, compat));
        }
        if let InterFeaturePolicy::Concat { first, second } = &inter_policy {
            for p in &pairs {
                let (df, ds) = (modalities[p.first].feature_dim, modalities[p.second].feature_dim);
                if let Some(&i) = first.iter().find(|&&i| i >= df) {
                    return Err(Error::IndexOutOfRange {
                        context: "inter feature subset".into(),
                        index: i,
                        len: df,
                    });
                }
                if let Some(&i) = second.iter().find(|&&i| i >= ds) {
                    return Err(Error::IndexOutOfRange {
                        context: "inter feature subset".into(),
                        index: i,
                        len: ds,
                    });
                }
            }
        }
        Ok(ModelLayout {
            modalities,
            label_maps,
            pairs,
            mode,
            inter_policy,
        })
    }

    /// Layout covering the modalities and modality pairs of `graph`.
    pub fn for_graph(graph: &MultimodalGraph, mode: Mode, inter_policy: InterFeaturePolicy) -> Result<Self> {
        let keys: Vec<(usize, usize)> = graph.pairs().iter().map(|p| (p.first, p.second)).collect();
        Self::new(
            graph.modalities().to_vec(),
            graph.label_maps().to_vec(),
            &keys,
            mode,
            inter_policy,
        )
    }

    pub fn pair_index(&self, first: usize, second: usize) -> Option<usize> {
        self.pairs.iter().position(|p| p.first == first && p.second == second)
    }

    pub fn latent_feature_dim(&self, pair: usize) -> usize {
        let p = &self.pairs[pair];
        self.modalities[p.first].feature_dim + self.modalities[p.second].feature_dim + 1
    }

    /// Shape of the full latent pairwise matrix `B^{m-Δ}` this side's free
    /// costs stand for: `L_side · (L_latent + 1)` rows, one column.
    pub fn latent_pairwise_shape(&self, pair: usize, side: Side) -> (usize, usize) {
        let p = &self.pairs[pair];
        let l_side = self.modalities[p.side_modality(side)].num_labels();
        (l_side * (p.latent_labels() + 1), 1)
    }

    /// Check that `graph` can be grounded with bundles of this layout.
    pub fn check_graph(&self, graph: &MultimodalGraph) -> Result<()> {
        if graph.modalities().len() != self.modalities.len() {
            return Err(Error::Shape(format!(
                "graph has {} modalities, model has {}",
                graph.modalities().len(),
                self.modalities.len()
            )));
        }
        for (g, m) in graph.modalities().iter().zip(&self.modalities) {
            if g.id != m.id
                || g.labels != m.labels
                || g.feature_dim != m.feature_dim
                || g.edge_feature_dim != m.edge_feature_dim
            {
                return Err(Error::Shape(format!(
                    "modality {:?} (L={}, D={}, E={}) does not match model modality {:?} (L={}, D={}, E={})",
                    g.id,
                    g.num_labels(),
                    g.feature_dim,
                    g.edge_feature_dim,
                    m.id,
                    m.num_labels(),
                    m.feature_dim,
                    m.edge_feature_dim
                )));
            }
        }
        if graph.is_augmented() != (self.mode == Mode::Latent) && !graph.correspondences().is_empty() {
            return Err(Error::Shape(match self.mode {
                Mode::Latent => "latent model requires an augmented graph".into(),
                Mode::NoLatent => "no-latent model requires an un-augmented graph".into(),
            }));
        }
        for p in graph.pairs() {
            let Some(k) = self.pair_index(p.first, p.second) else {
                return Err(Error::Shape(format!(
                    "modality pair ({}, {}) not present in model",
                    self.modalities[p.first].id, self.modalities[p.second].id
                )));
            };
            if self.pairs[k].compatible != p.compatible {
                return Err(Error::Shape(format!(
                    "label compatibility of pair ({}, {}) differs from model",
                    self.modalities[p.first].id, self.modalities[p.second].id
                )));
            }
        }
        Ok(())
    }
}

/// The learnable entries of a model, block by block. Also used as the
/// gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    /// Per modality, `L × D`.
    pub unary: Vec<Matrix>,
    /// Per modality, `L² × E`.
    pub intra: Vec<Matrix>,
    /// Per pair (latent mode), `(L + 1) × (D_first + D_second + 1)`.
    pub latent_unary: Vec<Matrix>,
    /// Per pair and side (latent mode), free costs of compatible cells.
    pub latent_same: Vec<[Vec<f64>; 2]>,
    /// Per pair and side (latent mode), cut cost per node label.
    pub latent_cut: Vec<[Vec<f64>; 2]>,
    /// Per pair (no-latent mode), `(L_first · L_second) × E_inter`.
    pub direct: Vec<Matrix>,
}

impl Blocks {
    pub fn zeros(layout: &ModelLayout) -> Self {
        let mods = &layout.modalities;
        let unary = mods
            .iter()
            .map(|m| Matrix::zeros(m.num_labels(), m.feature_dim))
            .collect();
        let intra = mods
            .iter()
            .map(|m| Matrix::zeros(m.num_labels() * m.num_labels(), m.edge_feature_dim))
            .collect();
        let (mut latent_unary, mut latent_same, mut latent_cut, mut direct) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (k, p) in layout.pairs.iter().enumerate() {
            let (lf, ls) = (mods[p.first].num_labels(), mods[p.second].num_labels());
            match layout.mode {
                Mode::Latent => {
                    latent_unary.push(Matrix::zeros(p.latent_labels() + 1, layout.latent_feature_dim(k)));
                    latent_same.push([
                        vec![0.0; p.same_count(Side::First)],
                        vec![0.0; p.same_count(Side::Second)],
                    ]);
                    latent_cut.push([vec![0.0; lf], vec![0.0; ls]]);
                }
                Mode::NoLatent => direct.push(Matrix::zeros(lf * ls, layout.inter_policy.dim())),
            }
        }
        Blocks {
            unary,
            intra,
            latent_unary,
            latent_same,
            latent_cut,
            direct,
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.extend(self.unary.iter().map(Matrix::as_slice));
        out.extend(self.intra.iter().map(Matrix::as_slice));
        out.extend(self.latent_unary.iter().map(Matrix::as_slice));
        for [a, b] in &self.latent_same {
            out.push(a);
            out.push(b);
        }
        for [a, b] in &self.latent_cut {
            out.push(a);
            out.push(b);
        }
        out.extend(self.direct.iter().map(Matrix::as_slice));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.unary.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.intra.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.latent_unary.iter_mut().map(Matrix::as_mut_slice));
        for [a, b] in &mut self.latent_same {
            out.push(a);
            out.push(b);
        }
        for [a, b] in &mut self.latent_cut {
            out.push(a);
            out.push(b);
        }
        out.extend(self.direct.iter_mut().map(Matrix::as_mut_slice));
        out
    }

    /// Total number of learnable scalars.
    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Overwrite every entry from a flat vector in [`Blocks::to_vec`] order.
    pub fn set_from(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "flat parameter length");
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Blocks) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn dot(&self, other: &Blocks) -> f64 {
        self.slices()
            .into_iter()
            .zip(other.slices())
            .map(|(a, b)| dot(a, b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// All parameters of a model: learnable blocks plus the fixed penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBundle {
    pub layout: ModelLayout,
    pub penalty: f64,
    pub blocks: Blocks,
}

/// Gradient with respect to the learnable blocks; penalty cells are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub blocks: Blocks,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Zero,
    /// Entries uniform in `[-scale, scale]`.
    Random {
        seed: u64,
        scale: f64,
    },
}

/// Fresh bundle for `layout` with `P` = [`DEFAULT_PENALTY`].
pub fn init_parameters(layout: &ModelLayout, init: InitMode) -> ParameterBundle {
    let mut blocks = Blocks::zeros(layout);
    if let InitMode::Random { seed, scale } = init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in blocks.slices_mut() {
            for x in s.iter_mut() {
                *x = rng.random_range(-scale..=scale);
            }
        }
    }
    ParameterBundle {
        layout: layout.clone(),
        penalty: DEFAULT_PENALTY,
        blocks,
    }
}

impl ParameterBundle {
    pub fn with_blocks(&self, blocks: Blocks) -> Self {
        ParameterBundle {
            layout: self.layout.clone(),
            penalty: self.penalty,
            blocks,
        }
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.penalty = penalty;
        self
    }
}

/// Cost of each label: `A_l · x`.
pub fn unary_cost(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols() != x.len() {
        return Err(Error::dims("unary feature", a.cols(), x.len()));
    }
    Ok(a.mul_vec(x))
}

/// `L × L` table with entry `(l, s) = B_{(l-1)L + (s-1)} · v`.
pub fn intra_pairwise_cost(b: &Matrix, v: &[f64]) -> Result<Matrix> {
    let l = (b.rows() as f64).sqrt().round() as usize;
    if l * l != b.rows() {
        return Err(Error::Shape(format!(
            "intra pairwise matrix has {} rows, not a square",
            b.rows()
        )));
    }
    inter_pairwise_cost(b, v, l, l)
}

/// `L_a × L_b` table with entry `(l, s) = B_{(l-1)L_b + (s-1)} · v`.
pub fn inter_pairwise_cost(b: &Matrix, v: &[f64], la: usize, lb: usize) -> Result<Matrix> {
    if b.rows() != la * lb {
        return Err(Error::dims("pairwise matrix rows", la * lb, b.rows()));
    }
    if b.cols() != v.len() {
        return Err(Error::dims("pairwise edge feature", b.cols(), v.len()));
    }
    Ok(Matrix::from_vec(la, lb, b.mul_vec(v)))
}

/// Latent pairwise table for a shared label space: `L × (L + 1)`, column 0
/// is the cut label.
pub fn latent_pairwise_cost(same: &[f64], cut: &[f64], penalty: f64, cuttable: bool) -> Result<Matrix> {
    if same.len() != cut.len() {
        return Err(Error::dims("latent cut costs", same.len(), cut.len()));
    }
    let l = same.len();
    let mut m = Matrix::filled(l, l + 1, penalty);
    for i in 0..l {
        if cuttable {
            m[(i, 0)] = cut[i];
        }
        m[(i, i + 1)] = same[i];
    }
    Ok(m)
}

/// `[ ||x_j[subset] - x_k[subset]||_2 ]`.
pub fn edge_feature_intra(xj: &[f64], xk: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
    let len = xj.len().min(xk.len());
    let mut sq = 0.0;
    for &i in subset {
        if i >= len {
            return Err(Error::IndexOutOfRange {
                context: "edge feature subset".into(),
                index: i,
                len,
            });
        }
        let d = xj[i] - xk[i];
        sq += d * d;
    }
    Ok(vec![sq.sqrt()])
}

/// A grounded graph: per-variable cost vectors and per-edge cost matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTables {
    /// Smallest label value of each variable (1 regular, 0 latent).
    pub label_base: Vec<usize>,
    pub unary: Vec<Vec<f64>>,
    pub edges: Vec<EdgeTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTable {
    pub u: usize,
    pub v: usize,
    /// `states(u) × states(v)`.
    pub costs: Matrix,
}

impl PotentialTables {
    pub fn num_vars(&self) -> usize {
        self.unary.len()
    }

    pub fn states(&self, v: usize) -> usize {
        self.unary[v].len()
    }

    /// Check shapes and finiteness.
    pub fn check(&self) -> Result<()> {
        if self.label_base.len() != self.unary.len() {
            return Err(Error::dims("label bases", self.unary.len(), self.label_base.len()));
        }
        for (v, u) in self.unary.iter().enumerate() {
            if u.is_empty() {
                return Err(Error::Shape(format!("variable {v} has no states")));
            }
            if u.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("unary table of variable {v}")));
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.u >= self.num_vars() || e.v >= self.num_vars() || e.u == e.v {
                return Err(Error::Shape(format!(
                    "edge {k} has invalid endpoints ({}, {})",
                    e.u, e.v
                )));
            }
            if e.costs.shape() != (self.states(e.u), self.states(e.v)) {
                return Err(Error::Shape(format!(
                    "edge {k} table is {:?}, expected {:?}",
                    e.costs.shape(),
                    (self.states(e.u), self.states(e.v))
                )));
            }
            if e.costs.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("pairwise table of edge {k}")));
            }
        }
        Ok(())
    }
}

fn direct_feature(graph: &MultimodalGraph, policy: &InterFeaturePolicy, correspondence: usize) -> Vec<f64> {
    match policy {
        InterFeaturePolicy::Constant => vec![1.0],
        InterFeaturePolicy::Concat { first, second } => {
            let (f, s) = graph.canonical_endpoints(correspondence);
            let (xf, xs) = (&graph.nodes()[f].feature, &graph.nodes()[s].feature);
            let mut v: Vec<f64> = first.iter().map(|&i| xf[i]).collect();
            v.extend(second.iter().map(|&i| xs[i]));
            v.push(graph.correspondences()[correspondence].overlap);
            v
        }
    }
}

fn layout_pair(params: &ParameterBundle, graph: &MultimodalGraph, graph_pair: usize) -> usize {
    let p = &graph.pairs()[graph_pair];
    params
        .layout
        .pair_index(p.first, p.second)
        .expect("pair checked by check_graph")
}

/// Ground `graph` into energy tables. The graph must be augmented iff the
/// bundle is a latent model.
pub fn ground(graph: &MultimodalGraph, params: &ParameterBundle) -> Result<PotentialTables> {
    let layout = &params.layout;
    layout.check_graph(graph)?;
    if params.penalty.is_nan() || params.penalty <= 0.0 {
        return Err(Error::Config(format!(
            "penalty must be positive, got {}",
            params.penalty
        )));
    }
    let b = &params.blocks;
    let n = graph.node_count();
    let nv = graph.variable_count();
    let mut unary = Vec::with_capacity(nv);
    let mut max_cost: f64 = 0.0;

    for node in graph.nodes() {
        let c = unary_cost(&b.unary[node.modality], &node.feature)?;
        unary.push(c);
    }
    for lat in graph.latent_nodes() {
        let k = layout_pair(params, graph, lat.pair);
        unary.push(unary_cost(&b.latent_unary[k], &lat.feature)?);
    }
    for u in &unary {
        max_cost = u.iter().fold(max_cost, |m, x| m.max(x.abs()));
    }

    let factors = graph.factor_edges();
    let mut edges = Vec::with_capacity(factors.len());
    for f in factors {
        let (u, v) = graph.factor_endpoints(f);
        let costs = match f {
            FactorEdge::Intra { edge } => {
                let e = &graph.intra_edges()[edge];
                let m = graph.nodes()[e.a].modality;
                let c = intra_pairwise_cost(&b.intra[m], &e.feature)?;
                max_cost = max_cost.max(c.max_abs());
                c
            }
            FactorEdge::Direct { correspondence } => {
                let k = layout_pair(params, graph, graph.pair_of(correspondence));
                let p = &layout.pairs[k];
                let (lf, ls) = (
                    layout.modalities[p.first].num_labels(),
                    layout.modalities[p.second].num_labels(),
                );
                let feat = direct_feature(graph, &layout.inter_policy, correspondence);
                let c = inter_pairwise_cost(&b.direct[k], &feat, lf, ls)?;
                max_cost = max_cost.max(c.max_abs());
                c
            }
            FactorEdge::Latent { latent, side, .. } => {
                let lat = &graph.latent_nodes()[latent];
                let k = layout_pair(params, graph, lat.pair);
                let p = &layout.pairs[k];
                let l_side = layout.modalities[p.side_modality(side)].num_labels();
                let lf = p.latent_labels();
                let same = &b.latent_same[k][side.index()];
                let cut = &b.latent_cut[k][side.index()];
                let mut c = Matrix::zeros(l_side, lf + 1);
                for l in 1..=l_side {
                    for s in 0..=lf {
                        c[(l - 1, s)] = match latent_cell(p, side, l, s, lat.cuttable) {
                            LatentCell::Same(i) => {
                                max_cost = max_cost.max(same[i].abs());
                                same[i]
                            }
                            LatentCell::Cut(i) => {
                                max_cost = max_cost.max(cut[i].abs());
                                cut[i]
                            }
                            LatentCell::Penalty => params.penalty,
                        };
                    }
                }
                c
            }
        };
        edges.push(EdgeTable { u, v, costs });
    }

    if !max_cost.is_finite() {
        return Err(Error::NonFinite("grounded costs".into()));
    }
    if graph.is_augmented() && !graph.latent_nodes().is_empty() && max_cost >= params.penalty {
        return Err(Error::PenaltyTooSmall {
            penalty: params.penalty,
            max_cost,
        });
    }

    Ok(PotentialTables {
        label_base: (0..nv).map(|v| usize::from(v < n)).collect(),
        unary,
        edges,
    })
}

/// Adjoint of [`ground`]: accumulate `∂loss/∂Θ` into `grad` given the
/// derivatives of the loss with respect to every grounded cost entry.
/// Penalty cells receive no gradient.
pub fn accumulate_gradient(
    graph: &MultimodalGraph,
    params: &ParameterBundle,
    d_unary: &[Vec<f64>],
    d_edges: &[Matrix],
    grad: &mut Blocks,
) {
    let layout = &params.layout;
    for (node, d) in graph.nodes().iter().zip(d_unary) {
        add_outer(&mut grad.unary[node.modality], d, &node.feature);
    }
    let n = graph.node_count();
    for (lat, d) in graph.latent_nodes().iter().zip(&d_unary[n..]) {
        let k = layout_pair(params, graph, lat.pair);
        add_outer(&mut grad.latent_unary[k], d, &lat.feature);
    }
    for (f, d) in graph.factor_edges().into_iter().zip(d_edges) {
        match f {
            FactorEdge::Intra { edge } => {
                let e = &graph.intra_edges()[edge];
                let m = graph.nodes()[e.a].modality;
                add_outer(&mut grad.intra[m], d.as_slice(), &e.feature);
            }
            FactorEdge::Direct { correspondence } => {
                let k = layout_pair(params, graph, graph.pair_of(correspondence));
                let feat = direct_feature(graph, &layout.inter_policy, correspondence);
                add_outer(&mut grad.direct[k], d.as_slice(), &feat);
            }
            FactorEdge::Latent { latent, side, .. } => {
                let lat = &graph.latent_nodes()[latent];
                let k = layout_pair(params, graph, lat.pair);
                let p = &layout.pairs[k];
                for l in 1..=d.rows() {
                    for s in 0..d.cols() {
                        match latent_cell(p, side, l, s, lat.cuttable) {
                            LatentCell::Same(i) => grad.latent_same[k][side.index()][i] += d[(l - 1, s)],
                            LatentCell::Cut(i) => grad.latent_cut[k][side.index()][i] += d[(l - 1, s)],
                            LatentCell::Penalty => {}
                        }
                    }
                }
            }
        }
    }
}

/// Add a diagonal curvature estimate of the clique-marginal loss of `graph`
/// to `out`: every coordinate receives the sum, over the cliques it enters,
/// of its squared input feature. Node unaries count once per incident
/// clique.
pub fn accumulate_feature_moments(graph: &MultimodalGraph, params: &ParameterBundle, out: &mut Blocks) {
    let layout = &params.layout;
    let factors = graph.factor_edges();
    let mut degree = vec![0.0; graph.variable_count()];
    for &f in &factors {
        let (u, v) = graph.factor_endpoints(f);
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let add_sq = |m: &mut Matrix, w: f64, x: &[f64]| {
        for r in 0..m.rows() {
            for (acc, &xi) in m.row_mut(r).iter_mut().zip(x) {
                *acc += w * xi * xi;
            }
        }
    };
    for (node, &d) in graph.nodes().iter().zip(&degree) {
        add_sq(&mut out.unary[node.modality], d, &node.feature);
    }
    let n = graph.node_count();
    for (lat, &d) in graph.latent_nodes().iter().zip(&degree[n..]) {
        let k = layout_pair(params, graph, lat.pair);
        add_sq(&mut out.latent_unary[k], d, &lat.feature);
    }
    for f in factors {
        match f {
            FactorEdge::Intra { edge } => {
                let e = &graph.intra_edges()[edge];
                add_sq(&mut out.intra[graph.nodes()[e.a].modality], 1.0, &e.feature);
            }
            FactorEdge::Direct { correspondence } => {
                let k = layout_pair(params, graph, graph.pair_of(correspondence));
                let feat = direct_feature(graph, &layout.inter_policy, correspondence);
                add_sq(&mut out.direct[k], 1.0, &feat);
            }
            FactorEdge::Latent { latent, side, .. } => {
                let lat = &graph.latent_nodes()[latent];
                let k = layout_pair(params, graph, lat.pair);
                let p = &layout.pairs[k];
                let l_side = layout.modalities[p.side_modality(side)].num_labels();
                for l in 1..=l_side {
                    for s in 0..=p.latent_labels() {
                        match latent_cell(p, side, l, s, lat.cuttable) {
                            LatentCell::Same(i) => out.latent_same[k][side.index()][i] += 1.0,
                            LatentCell::Cut(i) => out.latent_cut[k][side.index()][i] += 1.0,
                            LatentCell::Penalty => {}
                        }
                    }
                }
            }
        }
    }
}

/// `m += d ⊗ x` (row `r` gains `d[r] · x`).
fn add_outer(m: &mut Matrix, d: &[f64], x: &[f64]) {
    for (r, &dr) in d.iter().enumerate() {
        if dr != 0.0 {
            for (w, &xi) in m.row_mut(r).iter_mut().zip(x) {
                *w += dr * xi;
            }
        }
    }
}
