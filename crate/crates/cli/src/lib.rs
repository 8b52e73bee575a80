//! Command-line front end of `mmcrf`: generate synthetic scenes, train and
//! apply multimodal CRFs, and score the predictions.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod paths;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mmcrf::eval::EvalReport;
use mmcrf::format::{
    labels_to_string, marginals_to_string, parse_labels, read_model, read_scene, scene_to_string, write_model,
    StoredModel,
};
use mmcrf::graph::LabelSpace;
use mmcrf::inference::{map_decode, trw_marginals, TrwConfig, DEFAULT_ITERATIONS};
use mmcrf::learning::{train, InnerOptimizer, Preconditioner, TrainConfig, TrainSample, DEFAULT_LEARNING_ITERATIONS};
use mmcrf::potentials::{ground, init_parameters, InitMode, DEFAULT_PENALTY};
use mmcrf::preset::{preset_semgeo, Preset, SemgeoMapping};
use mmcrf::scene_sim::{generate_scene, SceneConfig};

use paths::{create_dir, expand_inputs, output_for, read_file, write_file};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mmcrf::Error),

    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: mmcrf::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) | CliError::InFile { source: e, .. } if e.is_numerical() => 3,
            _ => 2,
        }
    }

    fn in_file(path: &Path) -> impl FnOnce(mmcrf::Error) -> CliError + '_ {
        move |source| match source {
            e @ (mmcrf::Error::Io { .. } | mmcrf::Error::Parse { .. }) => CliError::Core(e),
            source => CliError::InFile {
                path: path.to_path_buf(),
                source,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "mmcrf",
    version,
    about = "Multimodal CRF labeling with latent correspondence nodes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scenes scene_0000.scene, scene_0001.scene, ...
    Generate(GenerateArgs),
    /// Fit a model to labeled scenes.
    Train(TrainArgs),
    /// Label scenes with a trained model.
    Infer(InferArgs),
    /// Score predicted labels against scene ground truth.
    Eval(EvalArgs),
    /// Add geometric copies of both modalities to two-modality scenes.
    SemgeoExpand(SemgeoArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// TOML scene configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    count: usize,
    /// Seed of the first scene; scene i uses seed + i. Defaults to the
    /// configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    LineSearch,
    FixedStep,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PreconditionerArg {
    FeatureScale,
    Identity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Zero,
    Random,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: mmcrf::Error| e.to_string())
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// single-domain, no-latent, latent or semgeo.
    #[arg(long, value_parser = parse_preset)]
    preset: Preset,
    #[arg(long)]
    model_out: PathBuf,
    /// Also write the configuration and risk trace to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Maximum number of accepted descent steps.
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Message-passing rounds inside the risk.
    #[arg(long, default_value_t = DEFAULT_LEARNING_ITERATIONS)]
    k_messages: usize,
    /// L2 regularization strength.
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    /// Cost of latent states incompatible with a linked node label.
    #[arg(long, default_value_t = DEFAULT_PENALTY)]
    penalty: f64,
    /// Fixed step, or first trial step of the line search.
    #[arg(long, default_value_t = 1.0)]
    step_size: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::LineSearch)]
    optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = PreconditionerArg::FeatureScale)]
    preconditioner: PreconditionerArg,
    #[arg(long, value_enum, default_value_t = InitArg::Zero)]
    init: InitArg,
    /// Half-width of the uniform random initialization.
    #[arg(long, default_value_t = 0.01)]
    init_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene files, directories or glob patterns.
    #[arg(required = true)]
    scenes: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the preset recorded in the model.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Labels file, for a single scene.
    #[arg(long, conflicts_with = "out_dir", required_unless_present = "out_dir")]
    out: Option<PathBuf>,
    /// Directory receiving `<scene stem>.labels`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory receiving `<scene stem>.marginals`.
    #[arg(long)]
    marginals_dir: Option<PathBuf>,
    /// Message-passing rounds. Defaults to the count the model was trained
    /// with.
    #[arg(long)]
    k_messages: Option<usize>,
    #[arg(required = true)]
    scenes: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    scenes: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    predictions: Vec<PathBuf>,
    /// Human-readable report; printed to stdout as well.
    #[arg(long)]
    report: Option<PathBuf>,
    /// One key=value record per modality and class.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SemgeoArgs {
    /// data61, cmu, or a TOML file with `geometric = [...]` and a `[map]`
    /// table from semantic to geometric class.
    #[arg(
        long,
        conflicts_with = "geometric_groups",
        required_unless_present = "geometric_groups"
    )]
    mapping: Option<String>,
    /// Split the semantic classes of the first modality into this many
    /// consecutive geometric classes.
    #[arg(long)]
    geometric_groups: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(required = true)]
    scenes: Vec<PathBuf>,
}

/// Run one command line (program name first) and return its exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::SemgeoExpand(a) => cmd_semgeo(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let text = read_file(&a.config)?;
    let config: SceneConfig =
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.config.display())))?;
    config.validate().map_err(CliError::in_file(&a.config))?;
    let base = a.seed.unwrap_or(config.seed);
    let scenes: Vec<CliResult<String>> = (0..a.count)
        .into_par_iter()
        .map(|i| {
            let seed = base
                .checked_add(i as u64)
                .ok_or_else(|| CliError::Usage("seed overflow".into()))?;
            let sample = generate_scene(&config.with_seed(seed))?;
            Ok(scene_to_string(&sample)?)
        })
        .collect();
    create_dir(&a.out_dir)?;
    for (i, s) in scenes.into_iter().enumerate() {
        write_file(&a.out_dir.join(format!("scene_{i:04}.scene")), &s?)?;
    }
    Ok(())
}

fn load_scenes(args: &[PathBuf]) -> CliResult<Vec<(PathBuf, TrainSample)>> {
    let files = expand_inputs(args, "scene")?;
    files
        .into_par_iter()
        .map(|p| {
            let s = read_scene(&p)?;
            Ok((p, s))
        })
        .collect()
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let scenes = load_scenes(&a.scenes)?;
    let mut samples = Vec::with_capacity(scenes.len());
    for (p, s) in &scenes {
        let prepared = a.preset.prepare(s).map_err(CliError::in_file(p))?;
        prepared.gt_labeling().map_err(CliError::in_file(p))?;
        samples.push(prepared);
    }
    let layout = a.preset.layout(&samples[0]).map_err(CliError::in_file(&scenes[0].0))?;
    for ((p, _), s) in scenes.iter().zip(&samples) {
        layout.check_graph(&s.graph).map_err(CliError::in_file(p))?;
    }
    let init = match a.init {
        InitArg::Zero => InitMode::Zero,
        InitArg::Random => InitMode::Random {
            seed: a.seed,
            scale: a.init_scale,
        },
    };
    let params = init_parameters(&layout, init).with_penalty(a.penalty);
    let config = TrainConfig {
        outer_iterations: a.iterations,
        trw: TrwConfig::with_iterations(a.k_messages),
        lambda: a.lambda,
        optimizer: match a.optimizer {
            OptimizerArg::LineSearch => InnerOptimizer::LineSearch,
            OptimizerArg::FixedStep => InnerOptimizer::FixedStep,
        },
        preconditioner: match a.preconditioner {
            PreconditionerArg::FeatureScale => Preconditioner::FeatureScale,
            PreconditionerArg::Identity => Preconditioner::Identity,
        },
        step_size: a.step_size,
        seed: a.seed,
    };

    let mut log = String::new();
    let _ = writeln!(
        log,
        "# preset={} iterations={} k_messages={} lambda={:?} penalty={:?} step_size={:?} optimizer={} \
         preconditioner={} init={} init_scale={:?} seed={} scenes={} parameters={}",
        a.preset,
        a.iterations,
        a.k_messages,
        a.lambda,
        a.penalty,
        a.step_size,
        a.optimizer.to_possible_value().expect("not skipped").get_name(),
        a.preconditioner.to_possible_value().expect("not skipped").get_name(),
        a.init.to_possible_value().expect("not skipped").get_name(),
        a.init_scale,
        a.seed,
        samples.len(),
        params.blocks.len(),
    );
    for (p, _) in &scenes {
        let _ = writeln!(log, "# scene {}", p.display());
    }
    eprint!("{log}");

    let outcome = train(&params, &samples, &config);
    let trace = match &outcome {
        Ok(o) => &o.trace,
        Err(mmcrf::Error::Diverged { trace, .. }) => trace,
        Err(_) => &Vec::new(),
    };
    let mut lines = String::new();
    for entry in trace {
        let _ = writeln!(lines, "{entry}");
    }
    if let Ok(o) = &outcome {
        let _ = writeln!(lines, "best_risk={:?}", o.best_risk);
    }
    eprint!("{lines}");
    log.push_str(&lines);
    if let Some(path) = &a.log {
        write_file(path, &log)?;
    }
    let outcome = outcome?;
    write_model(
        &a.model_out,
        &StoredModel {
            params: outcome.params,
            messages: Some(a.k_messages),
            preset: Some(a.preset),
        },
    )?;
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> CliResult<()> {
    let model = read_model(&a.model)?;
    let preset = match a.preset.or(model.preset) {
        Some(p) => p,
        None => match model.params.layout.mode {
            mmcrf::potentials::Mode::Latent => Preset::Latent,
            mmcrf::potentials::Mode::NoLatent => Preset::NoLatent,
        },
    };
    if preset.mode() != model.params.layout.mode {
        return Err(CliError::Data(format!(
            "{}: preset {preset} does not match the model's mode",
            a.model.display()
        )));
    }
    let scenes = load_scenes(&a.scenes)?;
    if a.out.is_some() && scenes.len() != 1 {
        return Err(CliError::Usage(format!(
            "--out takes a single scene, got {}; use --out-dir",
            scenes.len()
        )));
    }
    let trw = TrwConfig::with_iterations(a.k_messages.or(model.messages).unwrap_or(DEFAULT_ITERATIONS));
    let want_marginals = a.marginals_dir.is_some();
    let results: Vec<CliResult<(String, Option<String>)>> = scenes
        .par_iter()
        .map(|(p, s)| {
            let run = || -> mmcrf::Result<(String, Option<String>)> {
                let prepared = preset.prepare(s)?;
                model.params.layout.check_graph(&prepared.graph)?;
                let tables = ground(&prepared.graph, &model.params)?;
                let marginals = trw_marginals(&tables, &trw)?;
                let labels = map_decode(&marginals);
                let n = prepared.graph.node_count();
                let pred = mmcrf::format::Prediction {
                    id: prepared.id.clone(),
                    nodes: labels[..n].to_vec(),
                    latent: labels[n..].iter().copied().enumerate().collect(),
                };
                let m = if want_marginals {
                    Some(marginals_to_string(&prepared.id, &tables, &marginals)?)
                } else {
                    None
                };
                Ok((labels_to_string(&pred, &prepared)?, m))
            };
            run().map_err(CliError::in_file(p))
        })
        .collect();
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
    }
    if let Some(dir) = &a.marginals_dir {
        create_dir(dir)?;
    }
    for ((p, _), r) in scenes.iter().zip(results) {
        let (labels, marginals) = r?;
        match (&a.out, &a.out_dir) {
            (Some(out), _) => write_file(out, &labels)?,
            (None, Some(dir)) => write_file(&output_for(dir, p, "labels"), &labels)?,
            (None, None) => unreachable!("clap requires one of --out and --out-dir"),
        }
        if let (Some(dir), Some(m)) = (&a.marginals_dir, marginals) {
            write_file(&output_for(dir, p, "marginals"), &m)?;
        }
    }
    Ok(())
}

/// Scene id declared by a labels file, read without a scene to resolve
/// label names against.
fn labels_id(text: &str) -> Option<&str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .nth(1)
        .and_then(|l| l.strip_prefix("id "))
        .map(str::trim)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let scenes = load_scenes(&a.scenes)?;
    let preds = expand_inputs(&a.predictions, "labels")?;
    if preds.len() != scenes.len() {
        return Err(CliError::Data(format!(
            "{} prediction files for {} scenes",
            preds.len(),
            scenes.len()
        )));
    }
    let mut texts = Vec::with_capacity(preds.len());
    for p in &preds {
        let t = read_file(p)?;
        let id = labels_id(&t)
            .ok_or_else(|| CliError::Data(format!("{}: missing `id` line", p.display())))?
            .to_string();
        texts.push((p, id, t));
    }
    let mut pairs = Vec::with_capacity(scenes.len());
    for (sp, s) in &scenes {
        let mut matching = texts.iter().filter(|(_, id, _)| *id == s.id);
        let found = matching
            .next()
            .ok_or_else(|| CliError::Data(format!("{}: no prediction for scene {:?}", sp.display(), s.id)))?;
        if let Some((p, _, _)) = matching.next() {
            return Err(CliError::Data(format!(
                "{}: second prediction for scene {:?}",
                p.display(),
                s.id
            )));
        }
        pairs.push((s, found));
    }
    let reports: Vec<CliResult<EvalReport>> = pairs
        .par_iter()
        .map(|(s, (p, _, text))| {
            let pred = parse_labels(text, p, s)?;
            EvalReport::evaluate(s, &pred).map_err(CliError::in_file(p))
        })
        .collect();
    let reports = reports.into_iter().collect::<CliResult<Vec<_>>>()?;
    let total = EvalReport::aggregate(&reports)?;
    let text = total.to_text();
    print!("{text}");
    if let Some(path) = &a.report {
        write_file(path, &text)?;
    }
    if let Some(path) = &a.records {
        write_file(path, &total.to_records())?;
    }
    Ok(())
}

fn mapping_from_toml(path: &Path) -> CliResult<SemgeoMapping> {
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let table: toml::Table = read_file(path)?
        .parse()
        .map_err(|e: toml::de::Error| bad(e.to_string()))?;
    let geometric = table
        .get("geometric")
        .and_then(|v| v.as_array())
        .ok_or_else(|| bad("expected an array `geometric`".into()))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| bad("geometric names must be strings".into()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let map = table
        .get("map")
        .and_then(|v| v.as_table())
        .ok_or_else(|| bad("expected a table [map]".into()))?
        .iter()
        .map(|(k, v)| {
            v.as_str()
                .map(|g| (k.clone(), g.to_string()))
                .ok_or_else(|| bad(format!("map entry {k:?} must be a string")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let space = LabelSpace::new(geometric).map_err(CliError::in_file(path))?;
    SemgeoMapping::new(space, map).map_err(CliError::in_file(path))
}

fn cmd_semgeo(a: &SemgeoArgs) -> CliResult<()> {
    let fixed = match a.mapping.as_deref() {
        Some("data61") => Some(SemgeoMapping::data61()),
        Some("cmu") => Some(SemgeoMapping::cmu()),
        Some(file) => Some(mapping_from_toml(Path::new(file))?),
        None => None,
    };
    let scenes = load_scenes(&a.scenes)?;
    let out: Vec<CliResult<String>> = scenes
        .par_iter()
        .map(|(p, s)| {
            let run = || -> mmcrf::Result<String> {
                let mapping = match (&fixed, a.geometric_groups) {
                    (Some(m), _) => m.clone(),
                    (None, Some(g)) => {
                        let mods = s.graph.modalities();
                        let first = mods
                            .first()
                            .ok_or_else(|| mmcrf::Error::Config("scene has no modalities".into()))?;
                        SemgeoMapping::grouped(&first.labels, g)?
                    }
                    (None, None) => unreachable!("clap requires a mapping"),
                };
                scene_to_string(&preset_semgeo(s, &mapping)?)
            };
            run().map_err(CliError::in_file(p))
        })
        .collect();
    create_dir(&a.out_dir)?;
    for ((p, _), text) in scenes.iter().zip(out) {
        write_file(&output_for(&a.out_dir, p, "scene"), &text?)?;
    }
    Ok(())
}
