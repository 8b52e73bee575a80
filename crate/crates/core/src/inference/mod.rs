//! Marginal inference on grounded tables.
//!
//! [`trw_marginals`] runs a fixed number of synchronous tree-reweighted
//! sum-product rounds in the log domain. [`brute_force_marginals`] and
//! [`brute_force_energy`] enumerate the joint distribution exactly and serve
//! as oracles on small graphs.

mod exact;
mod trw;

pub use exact::{brute_force_energy, brute_force_marginals, MAX_ENUMERATED_STATES};
pub use trw::{edge_appearance, TrwRun};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::potentials::PotentialTables;

pub const DEFAULT_ITERATIONS: usize = 20;

/// Probabilities closer than this are treated as tied when decoding.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// How edge appearance probabilities ρ are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeAppearance {
    /// `ρ = (n_c - 1) / m_c` on every edge of a connected component with
    /// `n_c` variables and `m_c` edges, capped at 1.
    UniformSpanning,
    /// The same ρ on every edge; 1 gives loopy belief propagation.
    Constant(f64),
    PerEdge(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrwConfig {
    /// Number of message rounds `K`.
    pub iterations: usize,
    pub edge_appearance: EdgeAppearance,
    /// Weight of the previous message in each update, in `[0, 1)`.
    pub damping: f64,
    /// Stop early when the largest message change falls below this value;
    /// 0 always runs all rounds.
    pub tolerance: f64,
}

impl Default for TrwConfig {
    fn default() -> Self {
        TrwConfig {
            iterations: DEFAULT_ITERATIONS,
            edge_appearance: EdgeAppearance::UniformSpanning,
            damping: 0.0,
            tolerance: 0.0,
        }
    }
}

impl TrwConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        TrwConfig {
            iterations,
            ..Self::default()
        }
    }

    /// Loopy BP schedule (ρ = 1).
    pub fn loopy(iterations: usize) -> Self {
        TrwConfig {
            iterations,
            edge_appearance: EdgeAppearance::Constant(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("message iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config(format!("damping {} not in [0, 1)", self.damping)));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Config(format!(
                "tolerance {} must be nonnegative",
                self.tolerance
            )));
        }
        let bad_rho = |r: f64| !(r > 0.0 && r <= 1.0);
        match &self.edge_appearance {
            EdgeAppearance::Constant(r) if bad_rho(*r) => {
                Err(Error::Config(format!("edge appearance {r} not in (0, 1]")))
            }
            EdgeAppearance::PerEdge(rs) if rs.iter().copied().any(bad_rho) => {
                Err(Error::Config("edge appearance values must lie in (0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Node and edge marginals of a grounded graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub label_base: Vec<usize>,
    pub nodes: Vec<Vec<f64>>,
    /// Joint distribution per edge, in table orientation.
    pub edges: Vec<Matrix>,
    pub log_partition: f64,
}

/// Truncated TRW marginals.
pub fn trw_marginals(tables: &PotentialTables, config: &TrwConfig) -> Result<Marginals> {
    Ok(TrwRun::forward(tables, config, false)?.marginals())
}

/// Per-variable argmax of the node marginals as label values (1-based for
/// regular nodes, 0 = cut for latent nodes). Ties go to the lowest label.
pub fn map_decode(marginals: &Marginals) -> Vec<usize> {
    marginals
        .nodes
        .iter()
        .zip(&marginals.label_base)
        .map(|(p, &base)| base + argmax_lowest(p))
        .collect()
}

fn argmax_lowest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] + TIE_TOLERANCE {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::EdgeTable;

    #[test]
    fn decode_examples() {
        let m = Marginals {
            label_base: vec![1, 1, 0, 0],
            nodes: vec![
                vec![0.1, 0.7, 0.2],
                vec![0.5, 0.5],
                vec![0.9, 0.05, 0.05],
                vec![0.2, 0.8],
            ],
            edges: vec![],
            log_partition: 0.0,
        };
        assert_eq!(map_decode(&m), vec![2, 1, 0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(TrwConfig::default().validate().is_ok());
        assert!(TrwConfig::with_iterations(0).validate().is_err());
        let mut c = TrwConfig::loopy(3);
        c.edge_appearance = EdgeAppearance::Constant(1.5);
        assert!(c.validate().is_err());
        c.edge_appearance = EdgeAppearance::Constant(1.0);
        c.damping = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_node_softmax() {
        let t = PotentialTables {
            label_base: vec![1],
            unary: vec![vec![0.0, 3f64.ln()]],
            edges: vec![],
        };
        let m = trw_marginals(&t, &TrwConfig::default()).unwrap();
        assert!((m.nodes[0][0] - 0.75).abs() < 1e-15);
        assert!((m.nodes[0][1] - 0.25).abs() < 1e-15);
        assert!((m.log_partition - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_tables_are_uniform() {
        let t = PotentialTables {
            label_base: vec![1, 1, 1],
            unary: vec![vec![0.0; 3], vec![0.0; 2], vec![0.0; 3]],
            edges: vec![
                EdgeTable {
                    u: 0,
                    v: 1,
                    costs: Matrix::zeros(3, 2),
                },
                EdgeTable {
                    u: 1,
                    v: 2,
                    costs: Matrix::zeros(2, 3),
                },
                EdgeTable {
                    u: 0,
                    v: 2,
                    costs: Matrix::zeros(3, 3),
                },
            ],
        };
        let m = trw_marginals(&t, &TrwConfig::default()).unwrap();
        for (p, k) in m.nodes.iter().zip([3.0, 2.0, 3.0]) {
            assert!(p.iter().all(|&x| (x - 1.0 / k).abs() < 1e-14));
        }
        for e in &m.edges {
            let k = (e.rows() * e.cols()) as f64;
            assert!(e.as_slice().iter().all(|&x| (x - 1.0 / k).abs() < 1e-14));
        }
        assert_eq!(map_decode(&m), vec![1, 1, 1]);
    }

    #[test]
    fn rejects_non_finite_tables() {
        let t = PotentialTables {
            label_base: vec![1],
            unary: vec![vec![0.0, f64::NAN]],
            edges: vec![],
        };
        assert!(matches!(
            trw_marginals(&t, &TrwConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }
}
