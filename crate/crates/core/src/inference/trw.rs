//! Synchronous tree-reweighted sum-product with an unrolled reverse pass.
//!
//! Messages live in the log domain and are normalized with log-sum-exp after
//! every update. With `θ = -cost`, `ρ_e` the edge appearance probability and
//! `A_s = θ_s + Σ_{d→s} ρ_d M_d` the unnormalized log node belief, one update
//! of the message `s → t` along edge `e` is
//!
//! ```text
//! raw(x_t) = logsumexp_{x_s} ( θ_e(x_s, x_t) / ρ_e + A_s(x_s) - M_{t→s}(x_s) )
//! M_{s→t}  = (1 - α) · (raw - logsumexp(raw)) + α · M_{s→t}
//! ```
//!
//! and the edge belief is `θ_e / ρ_e + (A_u - M_{v→u}) + (A_v - M_{u→v})`,
//! normalized. The reverse pass differentiates exactly this truncated
//! computation, round by round.

use crate::error::{Error, Result};
use crate::inference::{EdgeAppearance, Marginals, TrwConfig};
use crate::matrix::{log_sum_exp, Matrix};
use crate::potentials::PotentialTables;

/// Directed message bookkeeping for one set of tables.
#[derive(Debug, Clone)]
struct Messages {
    /// Source and target variable of message `d`; edge is `d / 2`,
    /// `d = 2e` runs `u → v`, `d = 2e + 1` runs `v → u`.
    src: Vec<usize>,
    dst: Vec<usize>,
    offset: Vec<usize>,
    total: usize,
    incoming: Vec<Vec<usize>>,
}

impl Messages {
    fn new(tables: &PotentialTables) -> Self {
        let m = tables.edges.len();
        let mut src = Vec::with_capacity(2 * m);
        let mut dst = Vec::with_capacity(2 * m);
        let mut offset = Vec::with_capacity(2 * m);
        let mut incoming = vec![Vec::new(); tables.num_vars()];
        let mut total = 0;
        for e in &tables.edges {
            for (s, t) in [(e.u, e.v), (e.v, e.u)] {
                incoming[t].push(src.len());
                src.push(s);
                dst.push(t);
                offset.push(total);
                total += tables.states(t);
            }
        }
        Messages {
            src,
            dst,
            offset,
            total,
            incoming,
        }
    }

    #[inline]
    fn range(&self, d: usize, tables: &PotentialTables) -> std::ops::Range<usize> {
        let o = self.offset[d];
        o..o + tables.states(self.dst[d])
    }
}

/// Edge appearance probabilities for `tables` under `mode`.
pub fn edge_appearance(tables: &PotentialTables, mode: &EdgeAppearance) -> Result<Vec<f64>> {
    let m = tables.edges.len();
    match mode {
        EdgeAppearance::Constant(r) => Ok(vec![*r; m]),
        EdgeAppearance::PerEdge(rs) => {
            if rs.len() != m {
                return Err(Error::dims("edge appearance values", m, rs.len()));
            }
            Ok(rs.clone())
        }
        EdgeAppearance::UniformSpanning => {
            let n = tables.num_vars();
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(p: &mut [usize], mut x: usize) -> usize {
                while p[x] != x {
                    p[x] = p[p[x]];
                    x = p[x];
                }
                x
            }
            for e in &tables.edges {
                let (a, b) = (find(&mut parent, e.u), find(&mut parent, e.v));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
            let mut nodes = vec![0usize; n];
            let mut edges = vec![0usize; n];
            for v in 0..n {
                let r = find(&mut parent, v);
                nodes[r] += 1;
            }
            for e in &tables.edges {
                let r = find(&mut parent, e.u);
                edges[r] += 1;
            }
            Ok(tables
                .edges
                .iter()
                .map(|e| {
                    let r = find(&mut parent, e.u);
                    ((nodes[r] - 1) as f64 / edges[r] as f64).min(1.0)
                })
                .collect())
        }
    }
}

/// One forward run, optionally keeping every round's messages for the
/// reverse pass.
#[derive(Debug, Clone)]
pub struct TrwRun {
    msgs: Messages,
    rho: Vec<f64>,
    damping: f64,
    /// `θ_e / ρ_e` per edge, in table orientation.
    scaled: Vec<Matrix>,
    /// Messages after each round, starting with the initial ones. Only the
    /// final state is kept when the history is not requested.
    history: Vec<Vec<f64>>,
    rounds: usize,
    label_base: Vec<usize>,
    node_log: Vec<Vec<f64>>,
    edge_log: Vec<Matrix>,
    log_partition: f64,
}

impl TrwRun {
    pub fn forward(tables: &PotentialTables, config: &TrwConfig, keep_history: bool) -> Result<Self> {
        config.validate()?;
        tables.check()?;
        let rho = edge_appearance(tables, &config.edge_appearance)?;
        let msgs = Messages::new(tables);
        let scaled: Vec<Matrix> = tables
            .edges
            .iter()
            .zip(&rho)
            .map(|(e, &r)| {
                let data = e.costs.as_slice().iter().map(|c| -c / r).collect();
                Matrix::from_vec(e.costs.rows(), e.costs.cols(), data)
            })
            .collect();

        let mut current = vec![0.0; msgs.total];
        let mut history = Vec::new();
        if keep_history {
            history.push(current.clone());
        }
        let mut next = vec![0.0; msgs.total];
        let mut rounds = 0;
        let alpha = config.damping;
        let mut scratch = Scratch::default();
        for _ in 0..config.iterations {
            let beliefs = node_potentials(tables, &msgs, &rho, &current);
            let mut change: f64 = 0.0;
            for d in 0..msgs.src.len() {
                update_message(tables, &msgs, &scaled, &beliefs, &current, d, &mut scratch);
                let range = msgs.range(d, tables);
                for (i, &new) in range.clone().zip(&scratch.new) {
                    let v = (1.0 - alpha) * new + alpha * current[i];
                    change = change.max((v - current[i]).abs());
                    next[i] = v;
                }
            }
            std::mem::swap(&mut current, &mut next);
            rounds += 1;
            if keep_history {
                history.push(current.clone());
            }
            if !change.is_finite() {
                return Err(Error::NonFinite(format!("messages after round {rounds}")));
            }
            if config.tolerance > 0.0 && change < config.tolerance {
                break;
            }
        }
        if !keep_history {
            history.push(current.clone());
        }

        let beliefs = node_potentials(tables, &msgs, &rho, &current);
        let node_log: Vec<Vec<f64>> = beliefs
            .iter()
            .map(|a| {
                let z = log_sum_exp(a);
                a.iter().map(|x| x - z).collect()
            })
            .collect();
        let edge_log: Vec<Matrix> = (0..tables.edges.len())
            .map(|e| edge_log_belief(tables, &msgs, &scaled, &beliefs, &current, e).0)
            .collect();

        let mut run = TrwRun {
            msgs,
            rho,
            damping: alpha,
            scaled,
            history,
            rounds,
            label_base: tables.label_base.clone(),
            node_log,
            edge_log,
            log_partition: 0.0,
        };
        run.log_partition = run.free_energy(tables);
        Ok(run)
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn node_log_beliefs(&self) -> &[Vec<f64>] {
        &self.node_log
    }

    pub fn edge_log_beliefs(&self) -> &[Matrix] {
        &self.edge_log
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn marginals(&self) -> Marginals {
        Marginals {
            label_base: self.label_base.clone(),
            nodes: self
                .node_log
                .iter()
                .map(|l| l.iter().map(|x| x.exp()).collect())
                .collect(),
            edges: self
                .edge_log
                .iter()
                .map(|m| Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|x| x.exp()).collect()))
                .collect(),
            log_partition: self.log_partition,
        }
    }

    /// TRW variational estimate of `ln Z` evaluated at the returned beliefs:
    /// average energy plus node entropies minus ρ-weighted mutual
    /// informations. Exact on trees with ρ = 1 at convergence.
    fn free_energy(&self, tables: &PotentialTables) -> f64 {
        let mut total = 0.0;
        for (lb, cost) in self.node_log.iter().zip(&tables.unary) {
            for (&l, &c) in lb.iter().zip(cost) {
                let p = l.exp();
                if p > 0.0 {
                    total += p * (-c - l);
                }
            }
        }
        for ((e, lb), &r) in tables.edges.iter().zip(&self.edge_log).zip(&self.rho) {
            let (lu, lv) = (&self.node_log[e.u], &self.node_log[e.v]);
            for i in 0..lb.rows() {
                for j in 0..lb.cols() {
                    let l = lb[(i, j)];
                    let p = l.exp();
                    if p > 0.0 {
                        total += p * (-e.costs[(i, j)] - r * (l - lu[i] - lv[j]));
                    }
                }
            }
        }
        total
    }

    /// Reverse pass. Given `∂L/∂ log b_v` for node beliefs (optional) and
    /// `∂L/∂ log b_e` for edge beliefs, return `∂L/∂cost` for every unary
    /// and pairwise entry of the tables. Requires a run with history.
    pub fn backward(
        &self,
        tables: &PotentialTables,
        d_node_log: Option<&[Vec<f64>]>,
        d_edge_log: &[Matrix],
    ) -> (Vec<Vec<f64>>, Vec<Matrix>) {
        assert_eq!(
            self.history.len(),
            self.rounds + 1,
            "backward requires a forward run with history"
        );
        let msgs = &self.msgs;
        let n = tables.num_vars();
        let mut g_theta: Vec<Vec<f64>> = tables.unary.iter().map(|u| vec![0.0; u.len()]).collect();
        let mut g_scaled: Vec<Matrix> = tables
            .edges
            .iter()
            .map(|e| Matrix::zeros(e.costs.rows(), e.costs.cols()))
            .collect();
        let mut g_msg = vec![0.0; msgs.total];

        // Beliefs at the final messages.
        let last = &self.history[self.rounds];
        let beliefs = node_potentials(tables, msgs, &self.rho, last);
        let mut g_a: Vec<Vec<f64>> = beliefs.iter().map(|a| vec![0.0; a.len()]).collect();
        for (e, g) in d_edge_log.iter().enumerate() {
            let edge = &tables.edges[e];
            let lb = &self.edge_log[e];
            let gsum = g.sum();
            let (du, dv) = (2 * e + 1, 2 * e);
            let ru = msgs.range(du, tables);
            let rv = msgs.range(dv, tables);
            for i in 0..lb.rows() {
                for j in 0..lb.cols() {
                    let graw = g[(i, j)] - lb[(i, j)].exp() * gsum;
                    if graw == 0.0 {
                        continue;
                    }
                    g_scaled[e][(i, j)] += graw;
                    g_a[edge.u][i] += graw;
                    g_msg[ru.start + i] -= graw;
                    g_a[edge.v][j] += graw;
                    g_msg[rv.start + j] -= graw;
                }
            }
        }
        if let Some(d_nodes) = d_node_log {
            for (s, g) in d_nodes.iter().enumerate() {
                let gsum: f64 = g.iter().sum();
                for (x, &gx) in g.iter().enumerate() {
                    g_a[s][x] += gx - self.node_log[s][x].exp() * gsum;
                }
            }
        }
        push_node_gradient(tables, msgs, &self.rho, &g_a, &mut g_theta, &mut g_msg);

        let alpha = self.damping;
        let mut scratch = Scratch::default();
        for t in (1..=self.rounds).rev() {
            let prev = &self.history[t - 1];
            let beliefs = node_potentials(tables, msgs, &self.rho, prev);
            let mut g_prev: Vec<f64> = g_msg.iter().map(|g| alpha * g).collect();
            let mut g_a: Vec<Vec<f64>> = beliefs.iter().map(|a| vec![0.0; a.len()]).collect();
            for d in 0..msgs.src.len() {
                let range = msgs.range(d, tables);
                let g_new = &g_msg[range];
                if g_new.iter().all(|&g| g == 0.0) {
                    continue;
                }
                update_message(tables, msgs, &self.scaled, &beliefs, prev, d, &mut scratch);
                let gsum: f64 = g_new.iter().sum::<f64>() * (1.0 - alpha);
                let graw: Vec<f64> = g_new
                    .iter()
                    .zip(&scratch.new)
                    .map(|(&g, &l)| (1.0 - alpha) * g - l.exp() * gsum)
                    .collect();
                let (s, e) = (msgs.src[d], d / 2);
                let forward = d.is_multiple_of(2);
                let rev = msgs.range(d ^ 1, tables);
                let ls = scratch.pre.len();
                for xs in 0..ls {
                    let mut gpre = 0.0;
                    for (xt, &gr) in graw.iter().enumerate() {
                        let w = (scratch.arg[xs * graw.len() + xt] - scratch.raw[xt]).exp();
                        let ga = gr * w;
                        gpre += ga;
                        let idx = if forward { (xs, xt) } else { (xt, xs) };
                        g_scaled[e][idx] += ga;
                    }
                    g_a[s][xs] += gpre;
                    g_prev[rev.start + xs] -= gpre;
                }
            }
            push_node_gradient(tables, msgs, &self.rho, &g_a, &mut g_theta, &mut g_prev);
            g_msg = g_prev;
        }
        debug_assert_eq!(g_theta.len(), n);

        let d_unary = g_theta
            .into_iter()
            .map(|g| g.into_iter().map(|x| -x).collect())
            .collect();
        let d_edges = g_scaled
            .into_iter()
            .zip(&self.rho)
            .map(|(m, &r)| {
                let (rows, cols) = m.shape();
                Matrix::from_vec(rows, cols, m.into_vec().into_iter().map(|x| -x / r).collect())
            })
            .collect();
        (d_unary, d_edges)
    }
}

/// `A_s = θ_s + Σ_{d→s} ρ_d M_d` for every variable.
fn node_potentials(tables: &PotentialTables, msgs: &Messages, rho: &[f64], m: &[f64]) -> Vec<Vec<f64>> {
    tables
        .unary
        .iter()
        .enumerate()
        .map(|(s, cost)| {
            let mut a: Vec<f64> = cost.iter().map(|c| -c).collect();
            for &d in &msgs.incoming[s] {
                let r = rho[d / 2];
                for (x, v) in a.iter_mut().zip(&m[msgs.range(d, tables)]) {
                    *x += r * v;
                }
            }
            a
        })
        .collect()
}

/// Route `∂L/∂A_s` to `θ_s` and the incoming messages.
fn push_node_gradient(
    tables: &PotentialTables,
    msgs: &Messages,
    rho: &[f64],
    g_a: &[Vec<f64>],
    g_theta: &mut [Vec<f64>],
    g_msg: &mut [f64],
) {
    for (s, ga) in g_a.iter().enumerate() {
        for (t, &g) in g_theta[s].iter_mut().zip(ga) {
            *t += g;
        }
        for &d in &msgs.incoming[s] {
            let r = rho[d / 2];
            for (gm, &g) in g_msg[msgs.range(d, tables)].iter_mut().zip(ga) {
                *gm += r * g;
            }
        }
    }
}

#[derive(Default)]
struct Scratch {
    pre: Vec<f64>,
    /// `arg[xs * L_t + xt]`.
    arg: Vec<f64>,
    raw: Vec<f64>,
    new: Vec<f64>,
}

/// Compute the normalized update of message `d` from messages `m`.
fn update_message(
    tables: &PotentialTables,
    msgs: &Messages,
    scaled: &[Matrix],
    beliefs: &[Vec<f64>],
    m: &[f64],
    d: usize,
    sc: &mut Scratch,
) {
    let (s, t, e) = (msgs.src[d], msgs.dst[d], d / 2);
    let forward = d.is_multiple_of(2);
    let rev = &m[msgs.range(d ^ 1, tables)];
    let (ls, lt) = (tables.states(s), tables.states(t));
    sc.pre.clear();
    sc.pre.extend(beliefs[s].iter().zip(rev).map(|(a, r)| a - r));
    sc.arg.clear();
    sc.arg.resize(ls * lt, 0.0);
    let te = &scaled[e];
    for xs in 0..ls {
        for xt in 0..lt {
            let v = if forward { te[(xs, xt)] } else { te[(xt, xs)] };
            sc.arg[xs * lt + xt] = v + sc.pre[xs];
        }
    }
    sc.raw.clear();
    for xt in 0..lt {
        let mut max = f64::NEG_INFINITY;
        for xs in 0..ls {
            max = max.max(sc.arg[xs * lt + xt]);
        }
        let mut sum = 0.0;
        for xs in 0..ls {
            sum += (sc.arg[xs * lt + xt] - max).exp();
        }
        sc.raw.push(max + sum.ln());
    }
    let z = log_sum_exp(&sc.raw);
    sc.new.clear();
    sc.new.extend(sc.raw.iter().map(|r| r - z));
}

/// Normalized log belief of edge `e` and its log normalizer.
fn edge_log_belief(
    tables: &PotentialTables,
    msgs: &Messages,
    scaled: &[Matrix],
    beliefs: &[Vec<f64>],
    m: &[f64],
    e: usize,
) -> (Matrix, f64) {
    let edge = &tables.edges[e];
    let into_u = &m[msgs.range(2 * e + 1, tables)];
    let into_v = &m[msgs.range(2 * e, tables)];
    let (lu, lv) = edge.costs.shape();
    let mut out = Matrix::zeros(lu, lv);
    for i in 0..lu {
        let pu = beliefs[edge.u][i] - into_u[i];
        for j in 0..lv {
            out[(i, j)] = scaled[e][(i, j)] + pu + beliefs[edge.v][j] - into_v[j];
        }
    }
    let z = log_sum_exp(out.as_slice());
    out.as_mut_slice().iter_mut().for_each(|x| *x -= z);
    (out, z)
}
