//! Model variants and the semantic-geometric scene expansion.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::format::Prediction;
use crate::graph::{build_graph, Correspondence, GraphNode, GraphParts, IntraEdge, LabelMap, LabelSpace, ModalitySpec};
use crate::inference::{map_decode, trw_marginals, TrwConfig};
use crate::learning::TrainSample;
use crate::potentials::{ground, InterFeaturePolicy, Mode, ModelLayout, ParameterBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Each modality on its own; correspondences are dropped.
    SingleDomain,
    /// Correspondences become direct pairwise factors.
    NoLatent,
    /// Correspondences go through latent nodes.
    Latent,
    /// Latent model over a scene produced by [`preset_semgeo`].
    Semgeo,
}

pub const PRESET_NAMES: [&str; 4] = ["single-domain", "no-latent", "latent", "semgeo"];

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::SingleDomain, Preset::NoLatent, Preset::Latent, Preset::Semgeo];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SingleDomain => "single-domain",
            Preset::NoLatent => "no-latent",
            Preset::Latent => "latent",
            Preset::Semgeo => "semgeo",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Preset::SingleDomain | Preset::NoLatent => Mode::NoLatent,
            Preset::Latent | Preset::Semgeo => Mode::Latent,
        }
    }

    /// Turn a stored scene into the graph this variant trains and infers on.
    pub fn prepare(self, sample: &TrainSample) -> Result<TrainSample> {
        let g = &sample.graph;
        let graph = match self {
            Preset::SingleDomain => g.without_correspondences(),
            Preset::NoLatent => {
                if g.is_augmented() {
                    build_graph(g.to_parts())?
                } else {
                    g.clone()
                }
            }
            Preset::Latent => {
                if g.is_augmented() {
                    g.clone()
                } else {
                    g.augment_with_latent()?
                }
            }
            Preset::Semgeo => {
                if g.correspondences().iter().all(|c| c.cuttable) {
                    return Err(Error::Config(format!(
                        "scene {:?} has no same-region links; expand it with semgeo-expand first",
                        sample.id
                    )));
                }
                if g.is_augmented() {
                    g.clone()
                } else {
                    g.augment_with_latent()?
                }
            }
        };
        Ok(TrainSample::new(sample.id.clone(), graph))
    }

    /// Model layout for prepared samples of this variant.
    pub fn layout(self, prepared: &TrainSample) -> Result<ModelLayout> {
        ModelLayout::for_graph(&prepared.graph, self.mode(), InterFeaturePolicy::Constant)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {s:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            ))
        })
    }
}

/// A function from semantic label names to geometric classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemgeoMapping {
    pub geometric: LabelSpace,
    /// `(semantic name, geometric name)`.
    pub map: Vec<(String, String)>,
}

impl SemgeoMapping {
    pub fn new(geometric: LabelSpace, map: Vec<(String, String)>) -> Result<Self> {
        for (i, (s, geo)) in map.iter().enumerate() {
            if geometric.index_of(geo).is_none() {
                return Err(Error::Config(format!(
                    "mapping targets unknown geometric class {geo:?}"
                )));
            }
            if map[..i].iter().any(|(t, _)| t == s) {
                return Err(Error::Config(format!("semantic class {s:?} is mapped more than once")));
            }
        }
        Ok(SemgeoMapping { geometric, map })
    }

    /// Groups of semantic names, one group per geometric class.
    pub fn from_groups(groups: &[(&str, &[&str])]) -> Result<Self> {
        let geometric = LabelSpace::new(groups.iter().map(|(g, _)| *g))?;
        let map = groups
            .iter()
            .flat_map(|(g, members)| members.iter().map(move |s| (s.to_string(), g.to_string())))
            .collect();
        Self::new(geometric, map)
    }

    /// The DATA61/2D3D semantic-geometric table.
    pub fn data61() -> Self {
        Self::from_groups(&[
            ("Horizontal-Plane", &["Grass", "Road", "Sidewalk"]),
            ("Vertical-Plane", &["Building", "Vehicle"]),
            ("Cylindrical", &["Tree-Trunk", "Pole", "Sign", "Post", "Barrier"]),
            ("Scattered", &["Tree-Leaves", "Bush"]),
            ("Sky", &["Sky"]),
            ("Wire", &["Wire"]),
        ])
        .expect("built-in mapping is valid")
    }

    /// The CMU/VMR semantic-geometric table.
    pub fn cmu() -> Self {
        Self::from_groups(&[
            ("Horizontal-Plane", &["Road", "Sidewalk", "Ground", "Stairs"]),
            ("Vertical-Plane", &["Building", "Small-Vehicle", "Big-Vehicle"]),
            (
                "Cylindrical",
                &[
                    "Barrier",
                    "Bus-Stop",
                    "Tree-Trunk",
                    "Tall-Light",
                    "Post",
                    "Sign",
                    "Utility-Pole",
                    "Traffic-Signal",
                ],
            ),
            ("Scattered", &["Shrub", "Tree-Top"]),
            ("Person", &["Person"]),
            ("Wire", &["Wire"]),
        ])
        .expect("built-in mapping is valid")
    }

    /// Consecutive semantic labels split into `groups` nearly equal blocks,
    /// named `geo1 .. geoG`.
    pub fn grouped(semantic: &LabelSpace, groups: usize) -> Result<Self> {
        if groups == 0 || groups > semantic.len() {
            return Err(Error::Config(format!(
                "cannot split {} semantic classes into {groups} geometric classes",
                semantic.len()
            )));
        }
        let geometric = LabelSpace::numbered(groups, "geo")?;
        let map = semantic
            .names()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), format!("geo{}", i * groups / semantic.len() + 1)))
            .collect();
        Self::new(geometric, map)
    }

    /// Geometric label (1-based) of a semantic label name.
    pub fn geometric_of(&self, semantic: &str) -> Option<usize> {
        self.map
            .iter()
            .find(|(s, _)| s == semantic)
            .and_then(|(_, g)| self.geometric.index_of(g))
    }

    fn table(&self, space: &LabelSpace) -> Result<Vec<usize>> {
        space
            .names()
            .iter()
            .map(|n| {
                self.geometric_of(n)
                    .ok_or_else(|| Error::Config(format!("semantic label {n:?} has no geometric class")))
            })
            .collect()
    }
}

/// Expand a two-modality semantic scene into semantic and geometric copies
/// of both modalities.
///
/// Output modalities are `[a, b, a_geo, b_geo]`. Every region is duplicated
/// as a geometric node with the same features and the mapped label. Each
/// region is tied to its copy by a non-cuttable link, and each original
/// link is repeated, cuttable, between every other cross-modality pairing
/// of its two regions.
pub fn preset_semgeo(sample: &TrainSample, mapping: &SemgeoMapping) -> Result<TrainSample> {
    let parts = sample.graph.to_parts();
    if parts.modalities.len() != 2 {
        return Err(Error::Config(format!(
            "semgeo expansion needs a scene with 2 modalities, {:?} has {}",
            sample.id,
            parts.modalities.len()
        )));
    }
    let tables = [
        mapping.table(&parts.modalities[0].labels)?,
        mapping.table(&parts.modalities[1].labels)?,
    ];
    let n = parts.nodes.len();

    let geo_spec = |m: &ModalitySpec| ModalitySpec {
        id: format!("{}_geo", m.id),
        labels: mapping.geometric.clone(),
        ..m.clone()
    };
    let mut modalities = parts.modalities.clone();
    modalities.push(geo_spec(&parts.modalities[0]));
    modalities.push(geo_spec(&parts.modalities[1]));

    let map_pairs =
        |m: usize| -> Vec<(usize, usize)> { tables[m].iter().enumerate().map(|(l, &g)| (l + 1, g)).collect() };
    let mut label_maps = parts.label_maps.clone();
    for (from, to) in [(0, 2), (1, 3), (0, 3), (1, 2)] {
        label_maps.push(LabelMap {
            from,
            to,
            pairs: map_pairs(from),
        });
    }

    let mut nodes = parts.nodes.clone();
    for nd in &parts.nodes {
        nodes.push(GraphNode {
            modality: nd.modality + 2,
            instance: nd.instance,
            feature: nd.feature.clone(),
            gt: nd.gt.map(|l| tables[nd.modality][l - 1]),
        });
    }

    let mut intra_edges = parts.intra_edges.clone();
    intra_edges.extend(parts.intra_edges.iter().map(|e| IntraEdge {
        a: e.a + n,
        b: e.b + n,
        feature: e.feature.clone(),
    }));

    let link = |a: usize, b: usize, overlap: f64, cuttable: bool| Correspondence {
        a,
        b,
        overlap,
        cuttable,
        latent_gt: None,
    };
    let mut correspondences = parts.correspondences.clone();
    for i in 0..n {
        correspondences.push(link(i, i + n, 1.0, false));
    }
    for c in &parts.correspondences {
        correspondences.push(link(c.a + n, c.b + n, c.overlap, true));
        correspondences.push(link(c.a, c.b + n, c.overlap, true));
        correspondences.push(link(c.b, c.a + n, c.overlap, true));
    }

    let graph = build_graph(GraphParts {
        modalities,
        label_maps,
        nodes,
        intra_edges,
        correspondences,
    })?;
    Ok(TrainSample::new(sample.id.clone(), graph))
}

/// Decode the most likely label of every variable of a prepared sample.
pub fn predict(params: &ParameterBundle, prepared: &TrainSample, trw: &TrwConfig) -> Result<Prediction> {
    let g = &prepared.graph;
    let tables = ground(g, params)?;
    let marginals = trw_marginals(&tables, trw)?;
    let labels = map_decode(&marginals);
    let n = g.node_count();
    Ok(Prediction {
        id: prepared.id.clone(),
        nodes: labels[..n].to_vec(),
        latent: labels[n..].iter().copied().enumerate().collect(),
    })
}
