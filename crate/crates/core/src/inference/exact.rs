use crate::error::{Error, Result};
use crate::inference::Marginals;
use crate::matrix::Matrix;
use crate::potentials::PotentialTables;

pub const MAX_ENUMERATED_STATES: f64 = 1e7;

/// Sum of the selected unary and pairwise costs. `labeling` holds state
/// indices (0-based per variable).
pub fn brute_force_energy(tables: &PotentialTables, labeling: &[usize]) -> Result<f64> {
    if labeling.len() != tables.num_vars() {
        return Err(Error::IncompleteLabeling {
            expected: tables.num_vars(),
            actual: labeling.len(),
        });
    }
    for (v, &x) in labeling.iter().enumerate() {
        if x >= tables.states(v) {
            return Err(Error::IndexOutOfRange {
                context: format!("states of variable {v}"),
                index: x,
                len: tables.states(v),
            });
        }
    }
    Ok(energy(tables, labeling))
}

fn energy(tables: &PotentialTables, x: &[usize]) -> f64 {
    let mut e: f64 = tables.unary.iter().zip(x).map(|(u, &xi)| u[xi]).sum();
    for t in &tables.edges {
        e += t.costs[(x[t.u], x[t.v])];
    }
    e
}

fn for_each_state(states: &[usize], mut f: impl FnMut(&[usize])) {
    let mut x = vec![0usize; states.len()];
    loop {
        f(&x);
        let mut i = 0;
        loop {
            if i == states.len() {
                return;
            }
            x[i] += 1;
            if x[i] < states[i] {
                break;
            }
            x[i] = 0;
            i += 1;
        }
    }
}

/// Exact marginals and `ln Z` by enumerating every joint state.
pub fn brute_force_marginals(tables: &PotentialTables) -> Result<Marginals> {
    tables.check()?;
    let states: Vec<usize> = (0..tables.num_vars()).map(|v| tables.states(v)).collect();
    let count: f64 = states.iter().map(|&s| s as f64).product();
    if count > MAX_ENUMERATED_STATES {
        return Err(Error::StateSpaceTooLarge {
            states: count,
            limit: MAX_ENUMERATED_STATES,
        });
    }

    // Streaming log-sum-exp of -E.
    let (mut max, mut sum) = (f64::NEG_INFINITY, 0.0);
    for_each_state(&states, |x| {
        let s = -energy(tables, x);
        if s > max {
            sum = sum * (max - s).exp() + 1.0;
            max = s;
        } else {
            sum += (s - max).exp();
        }
    });
    let log_z = max + sum.ln();

    let mut nodes: Vec<Vec<f64>> = states.iter().map(|&s| vec![0.0; s]).collect();
    let mut edges: Vec<Matrix> = tables
        .edges
        .iter()
        .map(|e| Matrix::zeros(e.costs.rows(), e.costs.cols()))
        .collect();
    for_each_state(&states, |x| {
        let p = (-energy(tables, x) - log_z).exp();
        for (nv, &xi) in nodes.iter_mut().zip(x) {
            nv[xi] += p;
        }
        for (m, t) in edges.iter_mut().zip(&tables.edges) {
            m[(x[t.u], x[t.v])] += p;
        }
    });

    Ok(Marginals {
        label_base: tables.label_base.clone(),
        nodes,
        edges,
        log_partition: log_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::EdgeTable;

    #[test]
    fn two_node_zero_costs() {
        let t = PotentialTables {
            label_base: vec![1, 1],
            unary: vec![vec![0.0; 2], vec![0.0; 2]],
            edges: vec![EdgeTable {
                u: 0,
                v: 1,
                costs: Matrix::zeros(2, 2),
            }],
        };
        let m = brute_force_marginals(&t).unwrap();
        assert!(m.edges[0].as_slice().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert_eq!(m.nodes[0], vec![0.5, 0.5]);
        assert!((m.log_partition - 4f64.ln()).abs() < 1e-15);
        assert_eq!(brute_force_energy(&t, &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn single_node_closed_form() {
        let t = PotentialTables {
            label_base: vec![1],
            unary: vec![vec![0.0, 3f64.ln()]],
            edges: vec![],
        };
        let m = brute_force_marginals(&t).unwrap();
        assert!((m.nodes[0][0] - 0.75).abs() < 1e-15);
        assert!((m.log_partition - (4.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn penalty_cell_energy() {
        let t = PotentialTables {
            label_base: vec![1, 0],
            unary: vec![vec![0.0; 2], vec![0.0; 3]],
            edges: vec![EdgeTable {
                u: 0,
                v: 1,
                costs: Matrix::from_rows(&[vec![0.0, 0.0, 1000.0], vec![0.0, 1000.0, 0.0]]),
            }],
        };
        assert!(brute_force_energy(&t, &[0, 2]).unwrap() >= 1000.0);
        assert!(matches!(
            brute_force_energy(&t, &[0]),
            Err(Error::IncompleteLabeling { .. })
        ));
    }

    #[test]
    fn state_space_limit() {
        let t = PotentialTables {
            label_base: vec![1; 8],
            unary: vec![vec![0.0; 10]; 8],
            edges: vec![],
        };
        assert!(matches!(
            brute_force_marginals(&t),
            Err(Error::StateSpaceTooLarge { .. })
        ));
    }
}
