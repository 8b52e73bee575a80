//! Parameter learning by minimizing a clique-marginal loss.
//!
//! The risk of a parameter bundle is the sum over training samples of
//! `-Σ_c log μ_c(ỹ_c)` over every pairwise clique, where `μ_c` comes from
//! truncated TRW, plus `λ‖Θ‖²`. Its gradient is obtained by differentiating
//! the unrolled message rounds (see [`TrwRun::backward`]) and the linear
//! grounding map.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{MultimodalGraph, CUT_LABEL};
use crate::inference::{Marginals, TrwConfig, TrwRun};
use crate::matrix::Matrix;
use crate::potentials::{
    accumulate_feature_moments, accumulate_gradient, ground, Blocks, GradientBundle, ParameterBundle,
};

/// Marginals are floored at this value before taking logs.
pub const MARGINAL_FLOOR: f64 = 1e-300;

/// Armijo sufficient-decrease constant of the line search.
pub const ARMIJO_C: f64 = 1e-4;

const MAX_HALVINGS: usize = 40;

/// Latent ground truth for endpoints sharing a label space: the common
/// label when they agree, the cut label otherwise.
pub fn latent_gt(y_a: usize, y_b: usize, cuttable: bool) -> Result<usize> {
    latent_gt_compatible(y_a, y_a == y_b, cuttable, y_b)
}

/// Latent ground truth when compatibility is decided by a label mapping.
/// Compatible endpoints give the latent node the label of the side whose
/// label space it uses (`y_first`).
pub fn latent_gt_compatible(y_first: usize, compatible: bool, cuttable: bool, y_second: usize) -> Result<usize> {
    if compatible {
        Ok(y_first)
    } else if cuttable {
        Ok(CUT_LABEL)
    } else {
        Err(Error::GroundTruthContradiction {
            label_a: y_first,
            label_b: y_second,
        })
    }
}

/// One labeled scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub graph: MultimodalGraph,
}

impl TrainSample {
    pub fn new(id: impl Into<String>, graph: MultimodalGraph) -> Self {
        TrainSample { id: id.into(), graph }
    }

    /// Ground truth per variable, or the first variable lacking one.
    pub fn gt_labeling(&self) -> Result<Vec<usize>> {
        let g = &self.graph;
        let mut out = Vec::with_capacity(g.variable_count());
        for (i, n) in g.nodes().iter().enumerate() {
            out.push(n.gt.ok_or(Error::MissingGroundTruth { node: i })?);
        }
        for (t, l) in g.latent_nodes().iter().enumerate() {
            out.push(l.gt.ok_or(Error::MissingGroundTruth {
                node: g.latent_variable(t),
            })?);
        }
        Ok(out)
    }

    /// State index of the ground-truth label of every variable.
    fn gt_states(&self) -> Result<Vec<usize>> {
        let g = &self.graph;
        Ok(self
            .gt_labeling()?
            .into_iter()
            .enumerate()
            .map(|(v, l)| l - g.label_base(v))
            .collect())
    }
}

/// `-Σ_c ln max(μ_c(ỹ_c), floor)` over all pairwise cliques.
pub fn clique_marginal_loss(marginals: &Marginals, sample: &TrainSample) -> Result<f64> {
    let g = &sample.graph;
    let factors = g.factor_edges();
    if marginals.edges.len() != factors.len() || marginals.nodes.len() != g.variable_count() {
        return Err(Error::Shape(format!(
            "marginals ({} variables, {} cliques) do not match sample {} ({} variables, {} cliques)",
            marginals.nodes.len(),
            marginals.edges.len(),
            sample.id,
            g.variable_count(),
            factors.len()
        )));
    }
    let gt = sample.gt_states()?;
    let mut loss = 0.0;
    for (f, mu) in factors.into_iter().zip(&marginals.edges) {
        let (u, v) = g.factor_endpoints(f);
        loss -= mu[(gt[u], gt[v])].max(MARGINAL_FLOOR).ln();
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerOptimizer {
    /// `Θ ← Θ - step · ∇r`.
    FixedStep,
    /// Backtracking by halving until the Armijo condition holds. The first
    /// trial step of every iteration is twice the last accepted one.
    LineSearch,
}

/// Metric in which the descent direction is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    /// Plain gradient.
    Identity,
    /// Gradient divided coordinate-wise by a feature second-moment estimate
    /// of the loss curvature (see [`feature_preconditioner`]).
    FeatureScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    /// Message passing used inside the risk.
    pub trw: TrwConfig,
    /// L2 strength λ.
    pub lambda: f64,
    pub optimizer: InnerOptimizer,
    pub preconditioner: Preconditioner,
    /// Fixed step, or the initial trial step of the line search.
    pub step_size: f64,
    pub seed: u64,
}

pub const DEFAULT_LEARNING_ITERATIONS: usize = 10;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer_iterations: 5,
            trw: TrwConfig::with_iterations(DEFAULT_LEARNING_ITERATIONS),
            lambda: 1e-3,
            optimizer: InnerOptimizer::LineSearch,
            preconditioner: Preconditioner::FeatureScale,
            step_size: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.trw.validate()?;
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be nonnegative", self.lambda)));
        }
        if self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        Ok(())
    }
}

/// Loss of one sample and, optionally, its gradient.
fn sample_objective(
    params: &ParameterBundle,
    sample: &TrainSample,
    trw: &TrwConfig,
    with_gradient: bool,
) -> Result<(f64, Option<Blocks>)> {
    let g = &sample.graph;
    let gt = sample.gt_states()?;
    let tables = ground(g, params)?;
    let run = TrwRun::forward(&tables, trw, with_gradient)?;
    let log_floor = MARGINAL_FLOOR.ln();
    let mut loss = 0.0;
    let mut d_edges: Vec<Matrix> = Vec::new();
    if with_gradient {
        d_edges = tables
            .edges
            .iter()
            .map(|e| Matrix::zeros(e.costs.rows(), e.costs.cols()))
            .collect();
    }
    for (c, (edge, lb)) in tables.edges.iter().zip(run.edge_log_beliefs()).enumerate() {
        let (i, j) = (gt[edge.u], gt[edge.v]);
        let l = lb[(i, j)];
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "marginal of clique {c} in sample {}",
                sample.id
            )));
        }
        if l > log_floor {
            loss -= l;
            if with_gradient {
                d_edges[c][(i, j)] = -1.0;
            }
        } else {
            loss -= log_floor;
        }
    }
    if !with_gradient {
        return Ok((loss, None));
    }
    let (d_unary, d_costs) = run.backward(&tables, None, &d_edges);
    for (c, d) in d_costs.iter().enumerate() {
        if d.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of clique {c} in sample {}",
                sample.id
            )));
        }
    }
    let mut grad = Blocks::zeros(&params.layout);
    accumulate_gradient(g, params, &d_unary, &d_costs, &mut grad);
    Ok((loss, Some(grad)))
}

/// `Σ_i loss_i + λ‖Θ‖²`.
pub fn empirical_risk(params: &ParameterBundle, samples: &[TrainSample], config: &TrainConfig) -> Result<f64> {
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| sample_objective(params, s, &config.trw, false).map(|(l, _)| l))
        .collect();
    let mut risk = 0.0;
    for l in losses {
        risk += l?;
    }
    Ok(risk + config.lambda * params.blocks.norm_sq())
}

/// Risk and its exact gradient through the truncated message rounds.
pub fn risk_and_gradient(
    params: &ParameterBundle,
    samples: &[TrainSample],
    config: &TrainConfig,
) -> Result<(f64, GradientBundle)> {
    let parts: Vec<Result<(f64, Option<Blocks>)>> = samples
        .par_iter()
        .map(|s| sample_objective(params, s, &config.trw, true))
        .collect();
    let mut risk = 0.0;
    let mut grad = Blocks::zeros(&params.layout);
    // Summed in sample order so results do not depend on scheduling.
    for p in parts {
        let (l, g) = p?;
        risk += l;
        grad.axpy(1.0, &g.expect("gradient requested"));
    }
    risk += config.lambda * params.blocks.norm_sq();
    grad.axpy(2.0 * config.lambda, &params.blocks);
    Ok((risk, GradientBundle { blocks: grad }))
}

pub fn risk_gradient(
    params: &ParameterBundle,
    samples: &[TrainSample],
    config: &TrainConfig,
) -> Result<GradientBundle> {
    risk_and_gradient(params, samples, config).map(|(_, g)| g)
}

/// Inverse diagonal curvature estimate `1 / (Σ_samples moments + 2λ)`,
/// shaped like the learnable blocks. Coordinates no clique touches get the
/// inverse of the regularizer curvature alone, or 1 when λ = 0.
pub fn feature_preconditioner(params: &ParameterBundle, samples: &[TrainSample], lambda: f64) -> Blocks {
    let mut moments = Blocks::zeros(&params.layout);
    for s in samples {
        accumulate_feature_moments(&s.graph, params, &mut moments);
    }
    for x in moments.slices_mut().into_iter().flatten() {
        let c = *x + 2.0 * lambda;
        *x = if c > 0.0 { 1.0 / c } else { 1.0 };
    }
    moments
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub risk: f64,
    /// Step taken to reach this point (0 for the initial point).
    pub step: f64,
    /// Gradient norm at the point the step was taken from.
    pub grad_norm: f64,
}

impl std::fmt::Display for TrainLogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iteration={} risk={:?} step={:?} grad_norm={:?}",
            self.iteration, self.risk, self.step, self.grad_norm
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Bundle with the lowest recorded risk.
    pub params: ParameterBundle,
    pub best_risk: f64,
    /// Initial point first, then one entry per accepted step.
    pub trace: Vec<TrainLogEntry>,
}

fn trial_risk(params: &ParameterBundle, samples: &[TrainSample], config: &TrainConfig) -> Result<f64> {
    match empirical_risk(params, samples, config) {
        Ok(r) => Ok(r),
        Err(e) if e.is_numerical() => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Full-batch gradient descent for at most `outer_iterations` accepted steps.
pub fn train(params: &ParameterBundle, samples: &[TrainSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training requires at least one sample".into()));
    }
    for s in samples {
        s.gt_labeling()?;
        params.layout.check_graph(&s.graph)?;
    }

    let mut current = params.clone();
    let (mut risk, mut grad) = risk_and_gradient(&current, samples, config)?;
    let mut trace = vec![TrainLogEntry {
        iteration: 0,
        risk,
        step: 0.0,
        grad_norm: grad.blocks.norm_sq().sqrt(),
    }];
    if !risk.is_finite() {
        return Err(Error::Diverged { iteration: 0, trace });
    }
    let mut best = (risk, current.clone());
    let mut step = config.step_size;
    let scale = match config.preconditioner {
        Preconditioner::Identity => None,
        Preconditioner::FeatureScale => Some(feature_preconditioner(&current, samples, config.lambda)),
    };

    for iteration in 1..=config.outer_iterations {
        let mut direction = grad.blocks.clone();
        if let Some(scale) = &scale {
            for (d, p) in direction.slices_mut().into_iter().zip(scale.slices()) {
                d.iter_mut().zip(p).for_each(|(x, y)| *x *= y);
            }
        }
        let gnorm_sq = grad.blocks.norm_sq();
        let slope = grad.blocks.dot(&direction);
        if gnorm_sq == 0.0 {
            break;
        }
        let candidate_at = |t: f64| {
            let mut b = current.blocks.clone();
            b.axpy(-t, &direction);
            current.with_blocks(b)
        };
        let accepted = match config.optimizer {
            InnerOptimizer::FixedStep => {
                let cand = candidate_at(config.step_size);
                let r = trial_risk(&cand, samples, config)?;
                if !r.is_finite() {
                    return Err(Error::Diverged { iteration, trace });
                }
                Some((config.step_size, cand))
            }
            InnerOptimizer::LineSearch => {
                let mut t = step;
                let mut found = None;
                for _ in 0..MAX_HALVINGS {
                    let cand = candidate_at(t);
                    let r = trial_risk(&cand, samples, config)?;
                    if r.is_finite() && r <= risk - ARMIJO_C * t * slope {
                        found = Some((t, cand));
                        break;
                    }
                    t *= 0.5;
                }
                found
            }
        };
        let Some((t, next)) = accepted else {
            break;
        };
        let (r, g) = risk_and_gradient(&next, samples, config)?;
        if !r.is_finite() {
            return Err(Error::Diverged { iteration, trace });
        }
        trace.push(TrainLogEntry {
            iteration,
            risk: r,
            step: t,
            grad_norm: gnorm_sq.sqrt(),
        });
        current = next;
        risk = r;
        grad = g;
        if r < best.0 {
            best = (r, current.clone());
        }
        if config.optimizer == InnerOptimizer::LineSearch {
            step = 2.0 * t;
        }
    }

    Ok(TrainOutcome {
        params: best.1,
        best_risk: best.0,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_gt_rule() {
        assert_eq!(latent_gt(3, 3, true).unwrap(), 3);
        assert_eq!(latent_gt(2, 5, true).unwrap(), 0);
        for a in 1..=3 {
            for b in 1..=3 {
                let expected = if a == b { a } else { 0 };
                assert_eq!(latent_gt(a, b, true).unwrap(), expected);
            }
        }
        assert!(matches!(
            latent_gt(1, 2, false),
            Err(Error::GroundTruthContradiction { .. })
        ));
        assert_eq!(latent_gt_compatible(4, true, false, 1).unwrap(), 4);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lambda = -1.0;
        assert!(c.validate().is_err());
    }
}
