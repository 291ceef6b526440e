//! Leader-follower average consensus over a directed sensor graph.
//!
//! Leaders hold fixed values; followers run Push-Sum. Each follower keeps a
//! value sum `s` and a weight `w`, mixes them with the column-stochastic
//! matrix `A1 = I - alpha L1`, and reports `beta = s / w`. Leaders inject
//! their values (and unit weight) once through the column-stochastic `A2`,
//! so every follower's ratio tends to the arithmetic mean of the leaders.

use std::collections::{BTreeSet, VecDeque};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Directed graph with a designated leader set. An edge `(j, i)` means `j`
/// sends to `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub leaders: Vec<usize>,
}

impl DiGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, leaders: Vec<usize>) -> Result<Self> {
        let g = DiGraph { n, edges, leaders };
        g.check_indices()?;
        Ok(g)
    }

    fn check_indices(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Topology("graph has no nodes".into()));
        }
        for &(a, b) in &self.edges {
            if a >= self.n || b >= self.n {
                return Err(Error::Topology(format!("edge {a} -> {b} outside 0..{}", self.n)));
            }
        }
        let unique: BTreeSet<_> = self.leaders.iter().copied().collect();
        if unique.len() != self.leaders.len() {
            return Err(Error::Topology("duplicate leader index".into()));
        }
        if let Some(&l) = self.leaders.iter().find(|&&l| l >= self.n) {
            return Err(Error::Topology(format!("leader {l} outside 0..{}", self.n)));
        }
        if self.leaders.is_empty() {
            return Err(Error::Topology("no leaders".into()));
        }
        if self.leaders.len() == self.n {
            return Err(Error::Topology("no followers".into()));
        }
        Ok(())
    }

    pub fn followers(&self) -> Vec<usize> {
        let leaders: BTreeSet<_> = self.leaders.iter().copied().collect();
        (0..self.n).filter(|i| !leaders.contains(i)).collect()
    }
}

impl FromStr for DiGraph {
    type Err = Error;

    /// Edge-list text: one `src dst` pair per line and one
    /// `leaders: i,j,k` line. Blank lines and `#` comments are skipped.
    fn from_str(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut leaders: Option<Vec<usize>> = None;
        let mut max_index = None::<usize>;
        let bad = |line: usize, msg: &str| Error::Topology(format!("line {line}: {msg}"));
        for (k, raw) in text.lines().enumerate() {
            let lineno = k + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("leaders:") {
                if leaders.is_some() {
                    return Err(bad(lineno, "second leaders line"));
                }
                let list = rest
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad(lineno, &format!("bad leader index `{s}`"))))
                    .collect::<Result<Vec<_>>>()?;
                for &l in &list {
                    max_index = Some(max_index.map_or(l, |m| m.max(l)));
                }
                leaders = Some(list);
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(lineno, "expected `src dst`"));
            };
            let a: usize = a.parse().map_err(|_| bad(lineno, &format!("bad node index `{a}`")))?;
            let b: usize = b.parse().map_err(|_| bad(lineno, &format!("bad node index `{b}`")))?;
            max_index = Some(max_index.map_or(a.max(b), |m| m.max(a).max(b)));
            edges.push((a, b));
        }
        let leaders = leaders.ok_or_else(|| Error::Topology("missing `leaders:` line".into()))?;
        let n = max_index.map_or(0, |m| m + 1);
        DiGraph::new(n, edges, leaders)
    }
}

/// Consensus weights in follower/leader block form.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusNetwork {
    pub n_total: usize,
    pub leaders: Vec<usize>,
    pub followers: Vec<usize>,
    pub alpha: f64,
    /// Out-degree Laplacian of the follower subgraph (zero column sums).
    pub l1: DMatrix<f64>,
    /// Leader-to-follower coupling, `(n-m) x m`, entries `-1` per edge.
    pub l2: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    /// `-alpha L2` with each column rescaled to sum to 1.
    pub a2: DMatrix<f64>,
    /// Stability bound on `alpha`; `None` when the follower subgraph has no
    /// edges (single follower).
    pub bound: Option<f64>,
}

impl ConsensusNetwork {
    pub fn n_followers(&self) -> usize {
        self.followers.len()
    }

    pub fn n_leaders(&self) -> usize {
        self.leaders.len()
    }

    /// Full `n x n` weight matrix in original node order; leader rows are
    /// unit rows.
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_total, self.n_total);
        for (r, &fi) in self.followers.iter().enumerate() {
            for (c, &fj) in self.followers.iter().enumerate() {
                a[(fi, fj)] = self.a1[(r, c)];
            }
            for (c, &lj) in self.leaders.iter().enumerate() {
                a[(fi, lj)] = self.a2[(r, c)];
            }
        }
        for &l in &self.leaders {
            a[(l, l)] = 1.0;
        }
        a
    }

    /// `10 n^2` rounds: a generous margin over the graph diameter.
    pub fn max_rounds_default(&self) -> usize {
        10 * self.n_total * self.n_total
    }
}

/// `min 2 Re(l) / |l|^2` over eigenvalues of `l1` with positive real part:
/// the largest `alpha` for which `|1 - alpha l| < 1` on those modes.
pub fn step_size_bound(l1: &DMatrix<f64>) -> Result<f64> {
    if l1.nrows() != l1.ncols() || l1.nrows() == 0 {
        return Err(Error::Dimension(format!("L1 is {:?}", l1.shape())));
    }
    let eig = l1.clone().complex_eigenvalues();
    let scale = l1.amax().max(1.0);
    let bound = eig
        .iter()
        .filter(|l| l.re > 1e-12 * scale)
        .map(|l| 2.0 * l.re / l.norm_sqr())
        .fold(f64::INFINITY, f64::min);
    if bound.is_finite() {
        Ok(bound)
    } else {
        Err(Error::Topology("L1 has no eigenvalue with positive real part".into()))
    }
}

fn strongly_connected(n: usize, adj: &[Vec<usize>]) -> bool {
    if n <= 1 {
        return true;
    }
    let reach = |adj: &[Vec<usize>]| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    let mut rev = vec![Vec::new(); n];
    for (u, outs) in adj.iter().enumerate() {
        for &v in outs {
            rev[v].push(u);
        }
    }
    reach(adj) && reach(&rev)
}

/// Builds `A1`, `A2` and validates topology and step size.
pub fn build_weights(graph: &DiGraph, alpha: f64) -> Result<ConsensusNetwork> {
    let net = build_weights_unchecked(graph, alpha)?;
    if let Some(bound) = net.bound {
        if alpha >= bound {
            return Err(Error::StepSize { alpha, bound });
        }
    }
    Ok(net)
}

/// As [`build_weights`] but without the step-size check; used to probe the
/// stability boundary.
pub fn build_weights_unchecked(graph: &DiGraph, alpha: f64) -> Result<ConsensusNetwork> {
    graph.check_indices()?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::param(format!("alpha = {alpha} must be positive")));
    }
    let followers = graph.followers();
    let leaders = graph.leaders.clone();
    let nf = followers.len();
    let nl = leaders.len();
    let mut f_pos = vec![None; graph.n];
    for (k, &f) in followers.iter().enumerate() {
        f_pos[f] = Some(k);
    }
    let mut l_pos = vec![None; graph.n];
    for (k, &l) in leaders.iter().enumerate() {
        l_pos[l] = Some(k);
    }

    let mut l1 = DMatrix::zeros(nf, nf);
    let mut l2 = DMatrix::zeros(nf, nl);
    let mut f_adj = vec![Vec::new(); nf];
    let mut seen = BTreeSet::new();
    for &(src, dst) in &graph.edges {
        if src == dst || !seen.insert((src, dst)) {
            continue;
        }
        // edges into leaders carry nothing: leaders are stationary
        let Some(i) = f_pos[dst] else { continue };
        match (f_pos[src], l_pos[src]) {
            (Some(j), _) => {
                l1[(i, j)] -= 1.0;
                l1[(j, j)] += 1.0;
                f_adj[j].push(i);
            }
            (None, Some(l)) => l2[(i, l)] -= 1.0,
            (None, None) => unreachable!("node is neither leader nor follower"),
        }
    }

    for (k, &l) in leaders.iter().enumerate() {
        if l2.column(k).iter().all(|&v| v == 0.0) {
            return Err(Error::Topology(format!("leader {l} has no follower out-neighbour")));
        }
    }
    // every follower must be reachable from some leader
    let mut reached = vec![false; nf];
    let mut queue: VecDeque<usize> = (0..nf).filter(|&i| l2.row(i).iter().any(|&v| v != 0.0)).collect();
    for &i in &queue {
        reached[i] = true;
    }
    while let Some(u) = queue.pop_front() {
        for &v in &f_adj[u] {
            if !reached[v] {
                reached[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(k) = reached.iter().position(|r| !r) {
        return Err(Error::Topology(format!("follower {} is unreachable from every leader", followers[k])));
    }
    if !strongly_connected(nf, &f_adj) {
        return Err(Error::Topology("follower subgraph is not strongly connected".into()));
    }

    let bound = if nf == 1 { None } else { Some(step_size_bound(&l1)?) };
    let a1 = DMatrix::identity(nf, nf) - &l1 * alpha;
    let mut a2 = &l2 * (-alpha);
    for mut col in a2.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }

    Ok(ConsensusNetwork {
        n_total: graph.n,
        leaders,
        followers,
        alpha,
        l1,
        l2,
        a1,
        a2,
        bound,
    })
}

/// Follower-side Push-Sum state for `k` parallel scalar problems.
#[derive(Debug, Clone, PartialEq)]
pub struct PushSumState {
    /// `(n-m) x k` value sums.
    pub s: DMatrix<f64>,
    /// Per-follower weights.
    pub w: DVector<f64>,
    /// `s / w`; rows of followers not yet reached are NaN.
    pub beta: DMatrix<f64>,
    pub round: usize,
}

impl PushSumState {
    pub fn new(n_followers: usize, k: usize) -> Self {
        PushSumState {
            s: DMatrix::zeros(n_followers, k),
            w: DVector::zeros(n_followers),
            beta: DMatrix::from_element(n_followers, k, f64::NAN),
            round: 0,
        }
    }

    /// Whether every follower has received leader mass.
    pub fn all_reached(&self) -> bool {
        self.w.iter().all(|&w| w != 0.0)
    }
}

/// One synchronous round. The first round injects the leader values through
/// `A2`; later rounds mix the follower sums through `A1`.
pub fn lfac_round(state: &PushSumState, net: &ConsensusNetwork, leader_values: &DMatrix<f64>) -> Result<PushSumState> {
    let nf = net.n_followers();
    let k = state.s.ncols();
    if leader_values.shape() != (net.n_leaders(), k) || state.s.nrows() != nf || state.w.len() != nf {
        return Err(Error::Dimension(format!(
            "leader values {:?}, state {:?}, network {} followers / {} leaders",
            leader_values.shape(),
            state.s.shape(),
            nf,
            net.n_leaders()
        )));
    }
    let round = state.round + 1;
    let (s, w) = if state.round == 0 {
        (
            &net.a2 * leader_values,
            &net.a2 * DVector::from_element(net.n_leaders(), 1.0),
        )
    } else {
        (&net.a1 * &state.s, &net.a1 * &state.w)
    };
    if s.iter().chain(w.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Protocol {
            round,
            detail: "non-finite sum or weight".into(),
        });
    }
    let mut beta = DMatrix::from_element(nf, k, f64::NAN);
    for i in 0..nf {
        if w[i] != 0.0 {
            for c in 0..k {
                beta[(i, c)] = s[(i, c)] / w[i];
            }
        }
    }
    Ok(PushSumState { s, w, beta, round })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfacOutcome {
    /// `(n-m) x k` follower values at the last round.
    pub beta: DMatrix<f64>,
    pub rounds: usize,
    pub converged: bool,
    pub state: PushSumState,
}

/// Runs rounds until every follower and component moves by at most `gamma`
/// in one round, or `max_rounds` is reached.
pub fn run_lfac(
    net: &ConsensusNetwork,
    leader_values: &DMatrix<f64>,
    gamma: f64,
    max_rounds: usize,
) -> Result<LfacOutcome> {
    run_lfac_observed(net, leader_values, gamma, max_rounds, |_| {})
}

/// As [`run_lfac`], calling `observe` after every round (for traces).
pub fn run_lfac_observed(
    net: &ConsensusNetwork,
    leader_values: &DMatrix<f64>,
    gamma: f64,
    max_rounds: usize,
    mut observe: impl FnMut(&PushSumState),
) -> Result<LfacOutcome> {
    if !(gamma > 0.0) {
        return Err(Error::param(format!("gamma = {gamma} must be positive")));
    }
    if max_rounds == 0 {
        return Err(Error::param("max_rounds must be at least 1"));
    }
    let mut state = PushSumState::new(net.n_followers(), leader_values.ncols());
    let mut converged = false;
    while state.round < max_rounds {
        let next = lfac_round(&state, net, leader_values)?;
        observe(&next);
        let settled = state.all_reached()
            && next.all_reached()
            && next
                .beta
                .iter()
                .zip(state.beta.iter())
                .all(|(a, b)| (a - b).abs() <= gamma);
        state = next;
        if settled {
            converged = true;
            break;
        }
    }
    Ok(LfacOutcome {
        beta: state.beta.clone(),
        rounds: state.round,
        converged,
        state,
    })
}
