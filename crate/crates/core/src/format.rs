//! UTF-8 text formats for scenes, models and predicted labelings.
//!
//! All floats are written with the shortest representation that parses back
//! to the same value, so every format round-trips bit-exactly. The layouts
//! are documented in `docs/FORMATS.md`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{
    build_graph, Correspondence, GraphNode, GraphParts, IntraEdge, LabelMap, LabelSpace, ModalitySpec, CUT_LABEL,
};
use crate::inference::Marginals;
use crate::learning::TrainSample;
use crate::potentials::{Blocks, InterFeaturePolicy, Mode, ModelLayout, ParameterBundle, PotentialTables, ROW_ORDER};
use crate::preset::Preset;

pub const SCENE_MAGIC: &str = "mmcrf-scene 1";
pub const MODEL_MAGIC: &str = "mmcrf-model 1";
pub const LABELS_MAGIC: &str = "mmcrf-labels 1";
pub const MARGINALS_MAGIC: &str = "mmcrf-marginals 1";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Identifiers must survive whitespace and punctuation based tokenizing.
fn check_id(kind: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{kind} {id:?} may only contain letters, digits, '_', '-' and '.'"
        )))
    }
}

fn join_f64(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
    }
}

fn join_usize(values: &[usize]) -> String {
    if values.is_empty() {
        "-".into()
    } else {
        values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

/// Line cursor that reports errors with a path and 1-based line number.
struct Reader<'a> {
    path: PathBuf,
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str, path: &Path) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Reader {
            path: path.to_path_buf(),
            lines,
            pos: 0,
        }
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let l = self.peek();
        self.pos += 1;
        l
    }

    fn last_line(&self) -> usize {
        self.lines.last().map_or(0, |l| l.0)
    }

    fn expect(&mut self, want: &str) -> Result<usize> {
        match self.next() {
            Some((n, l)) if l == want => Ok(n),
            Some((n, l)) => Err(self.err(n, format!("expected {want:?}, found {l:?}"))),
            None => Err(self.err(self.last_line(), format!("expected {want:?}, found end of file"))),
        }
    }

    /// Value of a `key value...` line.
    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        match self.next() {
            Some((n, l)) => match l.split_once(char::is_whitespace) {
                Some((k, v)) if k == key => Ok((n, v.trim())),
                _ => Err(self.err(n, format!("expected field {key:?}, found {l:?}"))),
            },
            None => Err(self.err(self.last_line(), format!("expected field {key:?}, found end of file"))),
        }
    }

    /// Lines up to the next section header.
    fn section_body(&mut self) -> Vec<(usize, &'a str)> {
        let mut out = Vec::new();
        while let Some((n, l)) = self.peek() {
            if l.starts_with('[') {
                break;
            }
            out.push((n, l));
            self.pos += 1;
        }
        out
    }

    fn parse<T: std::str::FromStr>(&self, line: usize, field: &str, tok: &str) -> Result<T> {
        tok.parse()
            .map_err(|_| self.err(line, format!("field {field}: cannot parse {tok:?}")))
    }

    fn parse_list(&self, line: usize, field: &str, tok: &str) -> Result<Vec<usize>> {
        if tok == "-" {
            return Ok(Vec::new());
        }
        tok.split(',').map(|t| self.parse(line, field, t)).collect()
    }

    fn parse_floats(&self, line: usize, field: &str, toks: &[&str]) -> Result<Vec<f64>> {
        toks.iter().map(|t| self.parse::<f64>(line, field, t)).collect()
    }

    fn modality_index(&self, line: usize, mods: &[ModalitySpec], id: &str) -> Result<usize> {
        mods.iter()
            .position(|m| m.id == id)
            .ok_or_else(|| self.err(line, format!("unknown modality {id:?}")))
    }

    fn label_index(&self, line: usize, space: &LabelSpace, name: &str) -> Result<usize> {
        space
            .index_of(name)
            .ok_or_else(|| self.err(line, format!("unknown label {name:?}")))
    }
}

fn modality_line(m: &ModalitySpec) -> Result<String> {
    check_id("modality id", &m.id)?;
    Ok(format!(
        "{} dim={} edge_dim={} subset={} labels={}",
        m.id,
        m.feature_dim,
        m.edge_feature_dim,
        m.edge_subset.as_deref().map_or_else(|| "none".to_string(), join_usize),
        m.labels.names().join(",")
    ))
}

fn parse_modality(r: &Reader, line: usize, text: &str) -> Result<ModalitySpec> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 5 {
        return Err(r.err(line, "modality: expected `id dim= edge_dim= subset= labels=`"));
    }
    let field = |i: usize, key: &str| -> Result<&str> {
        toks[i]
            .strip_prefix(key)
            .and_then(|t| t.strip_prefix('='))
            .ok_or_else(|| r.err(line, format!("modality: expected field {key}= in {:?}", toks[i])))
    };
    let dim = r.parse(line, "dim", field(1, "dim")?)?;
    let edge_dim = r.parse(line, "edge_dim", field(2, "edge_dim")?)?;
    let subset = match field(3, "subset")? {
        "none" => None,
        t => Some(r.parse_list(line, "subset", t)?),
    };
    let labels = LabelSpace::new(field(4, "labels")?.split(',')).map_err(|e| r.err(line, format!("labels: {e}")))?;
    Ok(ModalitySpec {
        id: toks[0].to_string(),
        labels,
        feature_dim: dim,
        edge_feature_dim: edge_dim,
        edge_subset: subset,
    })
}

fn label_map_line(mods: &[ModalitySpec], m: &LabelMap) -> String {
    let pairs = m
        .pairs
        .iter()
        .map(|&(a, b)| {
            format!(
                "{}:{}",
                mods[m.from].labels.name(a).unwrap_or("?"),
                mods[m.to].labels.name(b).unwrap_or("?")
            )
        })
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{} {} {}",
        mods[m.from].id,
        mods[m.to].id,
        if pairs.is_empty() { "-".into() } else { pairs }
    )
}

fn parse_label_map(r: &Reader, line: usize, text: &str, mods: &[ModalitySpec]) -> Result<LabelMap> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(r.err(line, "label map: expected `from to a:b,...`"));
    }
    let from = r.modality_index(line, mods, toks[0])?;
    let to = r.modality_index(line, mods, toks[1])?;
    let mut pairs = Vec::new();
    if toks[2] != "-" {
        for p in toks[2].split(',') {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| r.err(line, format!("label map: malformed pair {p:?}")))?;
            pairs.push((
                r.label_index(line, &mods[from].labels, a)?,
                r.label_index(line, &mods[to].labels, b)?,
            ));
        }
    }
    Ok(LabelMap { from, to, pairs })
}

fn modalities_and_maps(out: &mut String, mods: &[ModalitySpec], maps: &[LabelMap]) -> Result<()> {
    out.push_str("[modalities]\n");
    for m in mods {
        out.push_str(&modality_line(m)?);
        out.push('\n');
    }
    out.push_str("[label_maps]\n");
    for m in maps {
        out.push_str(&label_map_line(mods, m));
        out.push('\n');
    }
    Ok(())
}

fn parse_modalities_and_maps(r: &mut Reader) -> Result<(Vec<ModalitySpec>, Vec<LabelMap>)> {
    r.expect("[modalities]")?;
    let mods = r
        .section_body()
        .into_iter()
        .map(|(n, l)| parse_modality(r, n, l))
        .collect::<Result<Vec<_>>>()?;
    r.expect("[label_maps]")?;
    let maps = r
        .section_body()
        .into_iter()
        .map(|(n, l)| parse_label_map(r, n, l, &mods))
        .collect::<Result<Vec<_>>>()?;
    Ok((mods, maps))
}

// ---------------------------------------------------------------- scenes

/// Serialize the un-augmented content of `sample`.
pub fn scene_to_string(sample: &TrainSample) -> Result<String> {
    check_id("scene id", &sample.id)?;
    let g = &sample.graph;
    let parts = g.to_parts();
    let mods = &parts.modalities;
    let mut out = String::new();
    let _ = writeln!(out, "{SCENE_MAGIC}");
    let _ = writeln!(out, "id {}", sample.id);
    modalities_and_maps(&mut out, mods, &parts.label_maps)?;

    out.push_str("[nodes]\n");
    for (i, n) in parts.nodes.iter().enumerate() {
        let m = &mods[n.modality];
        let gt = n.gt.map_or("-", |l| m.labels.name(l).unwrap_or("-"));
        let _ = write!(out, "{i} {} {gt} {} ", m.id, n.instance);
        join_f64(&mut out, &n.feature);
        out.push('\n');
    }
    out.push_str("[intra_edges]\n");
    for e in &parts.intra_edges {
        let _ = write!(out, "{} {} ", e.a, e.b);
        join_f64(&mut out, &e.feature);
        out.push('\n');
    }
    out.push_str("[correspondences]\n");
    for (k, c) in parts.correspondences.iter().enumerate() {
        let latent = match c.latent_gt {
            None => "-".to_string(),
            Some(CUT_LABEL) => "cut".to_string(),
            Some(l) => {
                let first = g.canonical_endpoints(k).0;
                mods[parts.nodes[first].modality]
                    .labels
                    .name(l)
                    .unwrap_or("?")
                    .to_string()
            }
        };
        let _ = writeln!(out, "{} {} {:?} {} {latent}", c.a, c.b, c.overlap, c.cuttable);
    }
    Ok(out)
}

pub fn parse_scene(text: &str, path: &Path) -> Result<TrainSample> {
    let mut r = Reader::new(text, path);
    r.expect(SCENE_MAGIC)?;
    let (_, id) = r.keyed("id")?;
    let id = id.to_string();
    let (mods, maps) = parse_modalities_and_maps(&mut r)?;

    r.expect("[nodes]")?;
    let mut nodes = Vec::new();
    for (n, l) in r.section_body() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(r.err(n, "node: expected `id modality gt instance features...`"));
        }
        let nid: usize = r.parse(n, "id", toks[0])?;
        if nid != nodes.len() {
            return Err(r.err(
                n,
                format!(
                    "node ids must be dense and ordered: expected {}, found {nid}",
                    nodes.len()
                ),
            ));
        }
        let m = r.modality_index(n, &mods, toks[1])?;
        let gt = match toks[2] {
            "-" => None,
            name => Some(r.label_index(n, &mods[m].labels, name)?),
        };
        let instance = r.parse(n, "instance", toks[3])?;
        let feature = r.parse_floats(n, "feature", &toks[4..])?;
        if feature.len() != mods[m].feature_dim {
            return Err(r.err(
                n,
                format!(
                    "feature-dim mismatch: node {nid} has {} values, modality {:?} expects {}",
                    feature.len(),
                    mods[m].id,
                    mods[m].feature_dim
                ),
            ));
        }
        nodes.push(GraphNode {
            modality: m,
            instance,
            feature,
            gt,
        });
    }

    r.expect("[intra_edges]")?;
    let mut intra_edges = Vec::new();
    for (n, l) in r.section_body() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 2 {
            return Err(r.err(n, "intra edge: expected `a b features...`"));
        }
        intra_edges.push(IntraEdge {
            a: r.parse(n, "a", toks[0])?,
            b: r.parse(n, "b", toks[1])?,
            feature: r.parse_floats(n, "feature", &toks[2..])?,
        });
    }

    r.expect("[correspondences]")?;
    let mut correspondences = Vec::new();
    for (n, l) in r.section_body() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(r.err(n, "correspondence: expected `a b overlap cuttable latent`"));
        }
        let a: usize = r.parse(n, "a", toks[0])?;
        let b: usize = r.parse(n, "b", toks[1])?;
        let latent_gt = match toks[4] {
            "-" => None,
            "cut" => Some(CUT_LABEL),
            name => {
                let (Some(na), Some(nb)) = (nodes.get(a), nodes.get(b)) else {
                    return Err(r.err(n, "latent: correspondence endpoints must exist"));
                };
                let first = na.modality.min(nb.modality);
                Some(r.label_index(n, &mods[first].labels, name)?)
            }
        };
        correspondences.push(Correspondence {
            a,
            b,
            overlap: r.parse(n, "overlap", toks[2])?,
            cuttable: r.parse(n, "cuttable", toks[3])?,
            latent_gt,
        });
    }
    if let Some((n, l)) = r.next() {
        return Err(r.err(n, format!("unexpected content {l:?}")));
    }

    let graph = build_graph(GraphParts {
        modalities: mods,
        label_maps: maps,
        nodes,
        intra_edges,
        correspondences,
    })?;
    Ok(TrainSample::new(id, graph))
}

pub fn write_scene(path: &Path, sample: &TrainSample) -> Result<()> {
    write_text(path, &scene_to_string(sample)?)
}

pub fn read_scene(path: &Path) -> Result<TrainSample> {
    parse_scene(&read_text(path)?, path)
}

// ---------------------------------------------------------------- models

/// A parameter bundle plus the message-passing iteration count and preset
/// it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub params: ParameterBundle,
    pub messages: Option<usize>,
    pub preset: Option<Preset>,
}

/// `(name, rows, cols)` of every learnable block, in [`Blocks::slices`] order.
pub fn block_names(layout: &ModelLayout) -> Vec<(String, usize, usize)> {
    let mods = &layout.modalities;
    let mut out = Vec::new();
    for m in mods {
        out.push((format!("unary {}", m.id), m.num_labels(), m.feature_dim));
    }
    for m in mods {
        out.push((
            format!("intra {}", m.id),
            m.num_labels() * m.num_labels(),
            m.edge_feature_dim,
        ));
    }
    let key = |k: usize| {
        let p = &layout.pairs[k];
        format!("{}:{}", mods[p.first].id, mods[p.second].id)
    };
    match layout.mode {
        Mode::Latent => {
            for k in 0..layout.pairs.len() {
                let p = &layout.pairs[k];
                out.push((
                    format!("latent_unary {}", key(k)),
                    p.latent_labels() + 1,
                    layout.latent_feature_dim(k),
                ));
            }
            for k in 0..layout.pairs.len() {
                let p = &layout.pairs[k];
                out.push((
                    format!("latent_same {} first", key(k)),
                    p.same_count(crate::graph::Side::First),
                    1,
                ));
                out.push((
                    format!("latent_same {} second", key(k)),
                    p.same_count(crate::graph::Side::Second),
                    1,
                ));
            }
            for k in 0..layout.pairs.len() {
                let p = &layout.pairs[k];
                out.push((format!("latent_cut {} first", key(k)), mods[p.first].num_labels(), 1));
                out.push((format!("latent_cut {} second", key(k)), mods[p.second].num_labels(), 1));
            }
        }
        Mode::NoLatent => {
            for k in 0..layout.pairs.len() {
                let p = &layout.pairs[k];
                let rows = mods[p.first].num_labels() * mods[p.second].num_labels();
                out.push((format!("direct {}", key(k)), rows, layout.inter_policy.dim()));
            }
        }
    }
    out
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Latent => "latent",
        Mode::NoLatent => "no-latent",
    }
}

pub fn model_to_string(model: &StoredModel) -> Result<String> {
    let p = &model.params;
    let layout = &p.layout;
    let mods = &layout.modalities;
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_MAGIC}");
    let _ = writeln!(out, "row_order {ROW_ORDER}");
    let _ = writeln!(out, "mode {}", mode_name(layout.mode));
    let _ = writeln!(out, "penalty {:?}", p.penalty);
    match &layout.inter_policy {
        InterFeaturePolicy::Constant => out.push_str("inter_feature constant\n"),
        InterFeaturePolicy::Concat { first, second } => {
            let _ = writeln!(out, "inter_feature concat {} {}", join_usize(first), join_usize(second));
        }
    }
    match model.messages {
        Some(k) => {
            let _ = writeln!(out, "messages {k}");
        }
        None => out.push_str("messages -\n"),
    }
    match model.preset {
        Some(p) => {
            let _ = writeln!(out, "preset {p}");
        }
        None => out.push_str("preset -\n"),
    }
    modalities_and_maps(&mut out, mods, &layout.label_maps)?;
    out.push_str("[pairs]\n");
    for pair in &layout.pairs {
        let _ = writeln!(out, "{} {}", mods[pair.first].id, mods[pair.second].id);
    }
    out.push_str("[matrices]\n");
    for ((name, rows, cols), values) in block_names(layout).into_iter().zip(p.blocks.slices()) {
        let _ = writeln!(out, "matrix {name} {rows} {cols}");
        for r in 0..rows {
            join_f64(&mut out, &values[r * cols..(r + 1) * cols]);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn parse_model(text: &str, path: &Path) -> Result<StoredModel> {
    let mut r = Reader::new(text, path);
    r.expect(MODEL_MAGIC)?;
    let (n, order) = r.keyed("row_order")?;
    if order != ROW_ORDER {
        return Err(r.err(n, format!("unsupported row order {order:?}, expected {ROW_ORDER:?}")));
    }
    let (n, mode) = r.keyed("mode")?;
    let mode = match mode {
        "latent" => Mode::Latent,
        "no-latent" => Mode::NoLatent,
        m => return Err(r.err(n, format!("unknown mode {m:?}"))),
    };
    let (n, pen) = r.keyed("penalty")?;
    let penalty: f64 = r.parse(n, "penalty", pen)?;
    let (n, pol) = r.keyed("inter_feature")?;
    let toks: Vec<&str> = pol.split_whitespace().collect();
    let inter_policy = match toks.as_slice() {
        ["constant"] => InterFeaturePolicy::Constant,
        ["concat", a, b] => InterFeaturePolicy::Concat {
            first: r.parse_list(n, "inter_feature", a)?,
            second: r.parse_list(n, "inter_feature", b)?,
        },
        _ => return Err(r.err(n, format!("malformed inter_feature {pol:?}"))),
    };
    let (n, msg) = r.keyed("messages")?;
    let messages = match msg {
        "-" => None,
        t => Some(r.parse(n, "messages", t)?),
    };
    let (n, pre) = r.keyed("preset")?;
    let preset = match pre {
        "-" => None,
        t => Some(t.parse::<Preset>().map_err(|e| r.err(n, e.to_string()))?),
    };
    let (mods, maps) = parse_modalities_and_maps(&mut r)?;
    let n_pairs = r.expect("[pairs]")?;
    let mut keys = Vec::new();
    for (n, l) in r.section_body() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(r.err(n, "pair: expected `first second`"));
        }
        keys.push((
            r.modality_index(n, &mods, toks[0])?,
            r.modality_index(n, &mods, toks[1])?,
        ));
    }
    let layout = ModelLayout::new(mods, maps, &keys, mode, inter_policy).map_err(|e| r.err(n_pairs, e.to_string()))?;

    r.expect("[matrices]")?;
    let mut blocks = Blocks::zeros(&layout);
    let names = block_names(&layout);
    for ((name, rows, cols), dst) in names.into_iter().zip(blocks.slices_mut()) {
        let want = format!("matrix {name} {rows} {cols}");
        match r.next() {
            Some((_, l)) if l == want => {}
            Some((n, l)) => return Err(r.err(n, format!("expected {want:?}, found {l:?}"))),
            None => return Err(r.err(r.last_line(), format!("expected {want:?}, found end of file"))),
        }
        for row in 0..rows {
            let Some((n, l)) = r.next() else {
                return Err(r.err(r.last_line(), format!("{name}: missing row {row}")));
            };
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != cols {
                return Err(r.err(
                    n,
                    format!("{name}: row {row} has {} values, expected {cols}", toks.len()),
                ));
            }
            let vals = r.parse_floats(n, &name, &toks)?;
            dst[row * cols..(row + 1) * cols].copy_from_slice(&vals);
        }
    }
    if let Some((n, l)) = r.next() {
        return Err(r.err(n, format!("unexpected content {l:?}")));
    }
    Ok(StoredModel {
        params: ParameterBundle {
            layout,
            penalty,
            blocks,
        },
        messages,
        preset,
    })
}

pub fn write_model(path: &Path, model: &StoredModel) -> Result<()> {
    write_text(path, &model_to_string(model)?)
}

pub fn read_model(path: &Path) -> Result<StoredModel> {
    parse_model(&read_text(path)?, path)
}

// ---------------------------------------------------------------- labelings

/// Decoded labels of one scene. `latent` pairs a correspondence index with
/// its decoded latent label (0 for a cut).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub id: String,
    pub nodes: Vec<usize>,
    pub latent: Vec<(usize, usize)>,
}

/// Label names are resolved against the scene the labels belong to.
pub fn labels_to_string(pred: &Prediction, sample: &TrainSample) -> Result<String> {
    let g = &sample.graph;
    check_id("scene id", &pred.id)?;
    if pred.nodes.len() != g.node_count() {
        return Err(Error::dims("predicted node labels", g.node_count(), pred.nodes.len()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{LABELS_MAGIC}");
    let _ = writeln!(out, "id {}", pred.id);
    out.push_str("[nodes]\n");
    for (i, (&l, n)) in pred.nodes.iter().zip(g.nodes()).enumerate() {
        let name = g.modalities()[n.modality]
            .labels
            .name(l)
            .ok_or(Error::IndexOutOfRange {
                context: format!("labels of node {i}"),
                index: l,
                len: g.modalities()[n.modality].num_labels(),
            })?;
        let _ = writeln!(out, "{i} {name}");
    }
    out.push_str("[latent]\n");
    for &(k, l) in &pred.latent {
        if k >= g.correspondences().len() {
            return Err(Error::IndexOutOfRange {
                context: "correspondences".into(),
                index: k,
                len: g.correspondences().len(),
            });
        }
        if l == CUT_LABEL {
            let _ = writeln!(out, "{k} cut");
        } else {
            let first = g.canonical_endpoints(k).0;
            let space = &g.modalities()[g.nodes()[first].modality].labels;
            let name = space.name(l).ok_or(Error::IndexOutOfRange {
                context: format!("latent labels of correspondence {k}"),
                index: l,
                len: space.len() + 1,
            })?;
            let _ = writeln!(out, "{k} {name}");
        }
    }
    Ok(out)
}

pub fn parse_labels(text: &str, path: &Path, sample: &TrainSample) -> Result<Prediction> {
    let g = &sample.graph;
    let mut r = Reader::new(text, path);
    r.expect(LABELS_MAGIC)?;
    let (_, id) = r.keyed("id")?;
    let id = id.to_string();
    r.expect("[nodes]")?;
    let mut nodes = Vec::new();
    for (n, l) in r.section_body() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(r.err(n, "node label: expected `id label`"));
        }
        let i: usize = r.parse(n, "id", toks[0])?;
        if i != nodes.len() || i >= g.node_count() {
            return Err(r.err(
                n,
                format!("node ids must be dense, ordered and below {}", g.node_count()),
            ));
        }
        let space = &g.modalities()[g.nodes()[i].modality].labels;
        nodes.push(r.label_index(n, space, toks[1])?);
    }
    let ln = r.expect("[latent]")?;
    if nodes.len() != g.node_count() {
        return Err(r.err(
            ln,
            format!("{} node labels for a scene with {} nodes", nodes.len(), g.node_count()),
        ));
    }
    let mut latent = Vec::new();
    for (n, l) in r.section_body() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(r.err(n, "latent label: expected `correspondence cut|label`"));
        }
        let k: usize = r.parse(n, "correspondence", toks[0])?;
        if k >= g.correspondences().len() {
            return Err(r.err(n, format!("correspondence {k} does not exist")));
        }
        let label = if toks[1] == "cut" {
            CUT_LABEL
        } else {
            let first = g.canonical_endpoints(k).0;
            r.label_index(n, &g.modalities()[g.nodes()[first].modality].labels, toks[1])?
        };
        latent.push((k, label));
    }
    if let Some((n, l)) = r.next() {
        return Err(r.err(n, format!("unexpected content {l:?}")));
    }
    Ok(Prediction { id, nodes, latent })
}

pub fn write_labels(path: &Path, pred: &Prediction, sample: &TrainSample) -> Result<()> {
    write_text(path, &labels_to_string(pred, sample)?)
}

pub fn read_labels(path: &Path, sample: &TrainSample) -> Result<Prediction> {
    parse_labels(&read_text(path)?, path, sample)
}

// ---------------------------------------------------------------- marginals

/// Node marginals (`var base p...`, probabilities in label order from
/// `base`) and clique marginals (`u v` header, then one row per state of `u`).
pub fn marginals_to_string(id: &str, tables: &PotentialTables, marginals: &Marginals) -> Result<String> {
    check_id("scene id", id)?;
    if marginals.edges.len() != tables.edges.len() || marginals.nodes.len() != tables.num_vars() {
        return Err(Error::Shape("marginals do not match the potential tables".into()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{MARGINALS_MAGIC}");
    let _ = writeln!(out, "id {id}");
    let _ = writeln!(out, "log_partition {:?}", marginals.log_partition);
    out.push_str("[nodes]\n");
    for (v, p) in marginals.nodes.iter().enumerate() {
        let _ = write!(out, "{v} {} ", marginals.label_base[v]);
        join_f64(&mut out, p);
        out.push('\n');
    }
    out.push_str("[edges]\n");
    for (e, mu) in tables.edges.iter().zip(&marginals.edges) {
        let _ = writeln!(out, "edge {} {}", e.u, e.v);
        for r in 0..mu.rows() {
            join_f64(&mut out, mu.row(r));
            out.push('\n');
        }
    }
    Ok(out)
}
