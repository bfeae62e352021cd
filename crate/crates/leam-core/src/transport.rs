//! Exact solver for the balanced transportation problem.
//!
//! Minimizes `sum f_ij c_ij` subject to row sums equal to the supplies,
//! column sums equal to the demands, and `f >= 0`, using the network simplex
//! method on the complete bipartite graph: a spanning-tree basis, block
//! pricing over reduced costs, and cycle pivots. Degeneracy is handled by a
//! stall detector that switches to Bland's rule, which cannot cycle.
//!
//! Every returned solution is certified before it leaves this module: flow
//! conservation, dual feasibility of the tree potentials, complementary
//! slackness on all carrying arcs, and primal/dual objective agreement. A
//! solution that fails any of these is reported as an error, never returned.

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TransportSolution {
    /// Optimal total transport cost.
    pub cost: f64,
    /// Carrying arcs `(source, sink, mass)`; zero-flow basic arcs are omitted.
    pub flows: Vec<(usize, usize, f64)>,
    /// Dual potentials for sources and sinks (the optimality certificate).
    pub source_potentials: Vec<f64>,
    pub sink_potentials: Vec<f64>,
}

struct BasicArc {
    source: usize,
    sink: usize,
    flow: f64,
}

struct Simplex<'a, C: Fn(usize, usize) -> f64> {
    n: usize,
    m: usize,
    cost: &'a C,
    basis: Vec<BasicArc>,
    /// Node -> indices into `basis`; sources are nodes `0..n`, sinks `n..n+m`.
    adjacency: Vec<Vec<usize>>,
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
}

const NO_NODE: usize = usize::MAX;

impl<'a, C: Fn(usize, usize) -> f64> Simplex<'a, C> {
    fn new(supplies: &[f64], demands: &[f64], cost: &'a C) -> Self {
        let (n, m) = (supplies.len(), demands.len());
        // Northwest-corner starting basis: a staircase of n+m-1 arcs that is
        // always a spanning tree, possibly with zero flows.
        let mut a = supplies.to_vec();
        let mut b = demands.to_vec();
        let mut basis = Vec::with_capacity(n + m - 1);
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let f = a[i].min(b[j]).max(0.0);
            basis.push(BasicArc {
                source: i,
                sink: j,
                flow: f,
            });
            a[i] -= f;
            b[j] -= f;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if i == n - 1 {
                j += 1;
            } else if j == m - 1 {
                i += 1;
            } else if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        let nodes = n + m;
        let mut solver = Self {
            n,
            m,
            cost,
            basis,
            adjacency: vec![Vec::new(); nodes],
            parent: vec![NO_NODE; nodes],
            parent_arc: vec![usize::MAX; nodes],
            depth: vec![0; nodes],
            potential: vec![0.0; nodes],
        };
        solver.rebuild_tree();
        solver
    }

    fn sink_node(&self, sink: usize) -> usize {
        self.n + sink
    }

    /// Recompute adjacency, parents, depths, and dual potentials from the
    /// current basis by a DFS rooted at source 0.
    fn rebuild_tree(&mut self) {
        for list in &mut self.adjacency {
            list.clear();
        }
        for (idx, arc) in self.basis.iter().enumerate() {
            self.adjacency[arc.source].push(idx);
            let sink_node = self.n + arc.sink;
            self.adjacency[sink_node].push(idx);
        }
        let nodes = self.n + self.m;
        self.parent.fill(NO_NODE);
        self.parent_arc.fill(usize::MAX);
        self.depth.fill(0);
        self.potential.fill(0.0);
        let mut visited = vec![false; nodes];
        let mut stack = vec![0usize];
        visited[0] = true;
        while let Some(node) = stack.pop() {
            for &arc_idx in &self.adjacency[node] {
                let arc = &self.basis[arc_idx];
                let other = if node < self.n {
                    self.sink_node(arc.sink)
                } else {
                    arc.source
                };
                if visited[other] {
                    continue;
                }
                visited[other] = true;
                self.parent[other] = node;
                self.parent_arc[other] = arc_idx;
                self.depth[other] = self.depth[node] + 1;
                let c = (self.cost)(arc.source, arc.sink);
                // u_i + v_j = c_ij on basic arcs.
                self.potential[other] = c - self.potential[node];
                stack.push(other);
            }
        }
        debug_assert!(visited.iter().all(|&v| v), "basis must span all nodes");
    }

    fn reduced_cost(&self, source: usize, sink: usize) -> f64 {
        (self.cost)(source, sink) - self.potential[source] - self.potential[self.sink_node(sink)]
    }

    /// Most negative reduced cost within a block of arcs starting at
    /// `start`, cycling over the whole arc set.
    fn price_block(&self, start: usize, block: usize, tol: f64) -> Option<(usize, f64)> {
        let total = self.n * self.m;
        let mut best: Option<(usize, f64)> = None;
        for offset in 0..block {
            let arc = (start + offset) % total;
            let r = self.reduced_cost(arc / self.m, arc % self.m);
            if r < -tol && best.map_or(true, |(_, br)| r < br) {
                best = Some((arc, r));
            }
        }
        best
    }

    /// First arc with negative reduced cost (Bland's rule).
    fn price_bland(&self, tol: f64) -> Option<(usize, f64)> {
        for arc in 0..self.n * self.m {
            let r = self.reduced_cost(arc / self.m, arc % self.m);
            if r < -tol {
                return Some((arc, r));
            }
        }
        None
    }

    /// Pivot the entering arc into the basis. Returns the change in cost.
    fn pivot(&mut self, entering_source: usize, entering_sink: usize, bland: bool) -> f64 {
        // Collect the unique tree path between the entering arc's endpoints.
        let mut x = entering_source;
        let mut y = self.sink_node(entering_sink);
        let mut path_x: Vec<usize> = Vec::new(); // arcs from source side up
        let mut path_y: Vec<usize> = Vec::new(); // arcs from sink side up
        while self.depth[x] > self.depth[y] {
            path_x.push(self.parent_arc[x]);
            x = self.parent[x];
        }
        while self.depth[y] > self.depth[x] {
            path_y.push(self.parent_arc[y]);
            y = self.parent[y];
        }
        while x != y {
            path_x.push(self.parent_arc[x]);
            path_y.push(self.parent_arc[y]);
            x = self.parent[x];
            y = self.parent[y];
        }

        // Traverse the cycle in flow-increase direction: entering arc
        // (source -> sink), then sink-side path up to the apex, then the
        // source-side path back down. An arc traversed from its source
        // endpoint toward its sink endpoint gains theta, otherwise it loses.
        // Walking "up" from a node, the parent arc is traversed away from
        // that node; its sign follows from which endpoint the node is.
        let mut deltas: Vec<(usize, f64)> = Vec::with_capacity(path_x.len() + path_y.len());
        let mut node = self.sink_node(entering_sink);
        for &arc_idx in &path_y {
            let arc = &self.basis[arc_idx];
            // Traversed from `node` toward its parent.
            let with_flow = arc.source == node; // leaving a source endpoint
            deltas.push((arc_idx, if with_flow { 1.0 } else { -1.0 }));
            node = self.parent[node];
        }
        let mut down: Vec<(usize, f64)> = Vec::with_capacity(path_x.len());
        let mut node = entering_source;
        for &arc_idx in &path_x {
            let arc = &self.basis[arc_idx];
            // Traversed from the parent toward `node`: opposite of walking up.
            let with_flow = self.sink_node(arc.sink) == node; // entering a sink endpoint
            down.push((arc_idx, if with_flow { 1.0 } else { -1.0 }));
            node = self.parent[node];
        }
        down.reverse();
        deltas.extend(down);

        // Ratio test over arcs that lose flow.
        let mut theta = f64::INFINITY;
        let mut leaving: Option<usize> = None;
        for &(arc_idx, sign) in &deltas {
            if sign < 0.0 {
                let f = self.basis[arc_idx].flow;
                let better = f < theta - 1e-15
                    || (f <= theta + 1e-15
                        && leaving.map_or(true, |l| {
                            if bland {
                                let a = &self.basis[arc_idx];
                                let b = &self.basis[l];
                                (a.source, a.sink) < (b.source, b.sink)
                            } else {
                                false
                            }
                        }));
                if better {
                    theta = f;
                    leaving = Some(arc_idx);
                }
            }
        }
        let leaving = leaving.expect("transportation cycles always contain a reverse arc");
        let theta = theta.max(0.0);
        let reduced = self.reduced_cost(entering_source, entering_sink);

        for (arc_idx, sign) in deltas {
            let arc = &mut self.basis[arc_idx];
            arc.flow = (arc.flow + sign * theta).max(0.0);
        }
        self.basis[leaving] = BasicArc {
            source: entering_source,
            sink: entering_sink,
            flow: theta,
        };
        self.rebuild_tree();
        reduced * theta
    }
}

/// Solve the balanced transportation problem exactly.
///
/// Supplies and demands must be nonnegative with equal positive totals
/// (totals are reconciled internally to machine precision).
pub fn solve_transportation<C: Fn(usize, usize) -> f64>(
    supplies: &[f64],
    demands: &[f64],
    cost: C,
) -> Result<TransportSolution> {
    if supplies.is_empty() || demands.is_empty() {
        return Err(Error::Empty("transportation needs both sides".into()));
    }
    if supplies.iter().chain(demands).any(|&v| !(v >= 0.0)) {
        return Err(Error::Shape("negative or NaN mass".into()));
    }
    let total_supply: f64 = supplies.iter().sum();
    let total_demand: f64 = demands.iter().sum();
    if total_supply <= 0.0 || total_demand <= 0.0 {
        return Err(Error::DegenerateDistribution);
    }
    if (total_supply - total_demand).abs() > 1e-6 * total_supply.max(total_demand) {
        return Err(Error::Shape(format!(
            "unbalanced problem: supply {total_supply} vs demand {total_demand}"
        )));
    }
    let (n, m) = (supplies.len(), demands.len());

    // Generic perturbation: grid transportation problems are massively
    // degenerate (equal masses tie every ratio test and stall the simplex on
    // zero-flow pivots). Distinct sub-ulp-scale offsets put the marginals in
    // general position; the cost shift is bounded by delta * index-sum * the
    // dual range, far below the 1e-9 tolerances used anywhere downstream.
    let delta = total_supply * 1e-13 / (n + m + 1) as f64;
    const SPREAD: f64 = 1.618_033_988_749_895;
    let supplies: Vec<f64> = supplies
        .iter()
        .enumerate()
        .map(|(i, &a)| a + delta * (i + 1) as f64)
        .collect();
    let mut demands: Vec<f64> = demands
        .iter()
        .enumerate()
        .map(|(j, &b)| b + delta * SPREAD * (j + 1) as f64)
        .collect();
    // Absorb the residual into the final demand so the equality system is
    // consistent to machine precision.
    let perturbed_supply: f64 = supplies.iter().sum();
    let perturbed_demand: f64 = demands.iter().sum();
    let last = demands.len() - 1;
    demands[last] = (demands[last] + (perturbed_supply - perturbed_demand)).max(0.0);
    // Materialize the cost matrix: pricing sweeps it millions of times, so
    // recomputing (say) Euclidean distances per probe would dominate the
    // solve. 2^23 entries caps the cache at 64 MB.
    let arcs = n * m;
    let cached: Option<Vec<f64>> = if arcs <= 1 << 23 {
        Some((0..arcs).map(|a| cost(a / m, a % m)).collect())
    } else {
        None
    };
    let mut max_cost = 0.0f64;
    for a in 0..arcs {
        let c = match &cached {
            Some(table) => table[a],
            None => cost(a / m, a % m),
        };
        if !c.is_finite() {
            return Err(Error::Shape(format!(
                "non-finite cost at ({}, {})",
                a / m,
                a % m
            )));
        }
        max_cost = max_cost.max(c.abs());
    }
    let tol = 1e-11 * (1.0 + max_cost);

    match &cached {
        Some(table) => solve_prepared(&supplies, &demands, &|i, j| table[i * m + j], tol, max_cost),
        None => solve_prepared(&supplies, &demands, &cost, tol, max_cost),
    }
}

fn solve_prepared<C: Fn(usize, usize) -> f64>(
    supplies: &[f64],
    demands: &[f64],
    cost: &C,
    tol: f64,
    max_cost: f64,
) -> Result<TransportSolution> {
    let (n, m) = (supplies.len(), demands.len());
    let mut simplex = Simplex::new(supplies, demands, cost);
    let arcs = n * m;
    let block = (((arcs as f64).sqrt() as usize) * 4).clamp(64.min(arcs), arcs);
    let mut cursor = 0usize;
    let mut bland = false;
    let mut stalled = 0usize;
    let stall_limit = 4 * (n + m) + 64;
    let iteration_cap = 200 * (n + m) * (n + m) + 100_000;
    let mut pivots = 0usize;
    let mut degenerate = 0usize;

    for iteration in 0.. {
        if iteration > iteration_cap {
            return Err(Error::Certification(
                "network simplex exceeded its iteration cap".into(),
            ));
        }
        let entering = if bland {
            simplex.price_bland(tol)
        } else {
            // Scan blocks until one yields a candidate or we wrap around.
            let mut found = None;
            let mut scanned = 0;
            while scanned < arcs {
                if let Some(hit) = simplex.price_block(cursor, block.min(arcs - scanned), tol) {
                    found = Some(hit);
                    break;
                }
                cursor = (cursor + block) % arcs;
                scanned += block;
            }
            found
        };
        let Some((arc, _)) = entering else {
            break; // optimal
        };
        let delta = simplex.pivot(arc / m, arc % m, bland);
        pivots += 1;
        if delta >= -tol {
            degenerate += 1;
            stalled += 1;
            if stalled > stall_limit {
                bland = true;
            }
        } else {
            stalled = 0;
        }
    }
    if std::env::var_os("LEAM_EMD_DEBUG").is_some() {
        eprintln!("transport: n={n} m={m} pivots={pivots} degenerate={degenerate} bland={bland}");
    }

    let flows: Vec<(usize, usize, f64)> = simplex
        .basis
        .iter()
        .filter(|a| a.flow > 0.0)
        .map(|a| (a.source, a.sink, a.flow))
        .collect();
    let cost_total: f64 = flows.iter().map(|&(i, j, f)| f * cost(i, j)).sum();
    let solution = TransportSolution {
        cost: cost_total,
        flows,
        source_potentials: simplex.potential[..n].to_vec(),
        sink_potentials: simplex.potential[n..].to_vec(),
    };
    certify(&solution, supplies, demands, cost, max_cost)?;
    Ok(solution)
}

/// Complementary-slackness certificate: conservation, dual feasibility,
/// slackness on carrying arcs, and primal/dual objective agreement.
fn certify<C: Fn(usize, usize) -> f64>(
    solution: &TransportSolution,
    supplies: &[f64],
    demands: &[f64],
    cost: &C,
    max_cost: f64,
) -> Result<()> {
    let (n, m) = (supplies.len(), demands.len());
    let mass_scale: f64 = supplies.iter().sum();
    let eps_mass = 1e-9 * (1.0 + mass_scale);
    let eps_cost = 1e-7 * (1.0 + max_cost);

    let mut row = vec![0.0; n];
    let mut col = vec![0.0; m];
    for &(i, j, f) in &solution.flows {
        if f < -1e-12 {
            return Err(Error::Certification(format!("negative flow on ({i}, {j})")));
        }
        row[i] += f;
        col[j] += f;
    }
    for i in 0..n {
        if (row[i] - supplies[i]).abs() > eps_mass {
            return Err(Error::Certification(format!(
                "supply {i} ships {} of {}",
                row[i], supplies[i]
            )));
        }
    }
    for j in 0..m {
        if (col[j] - demands[j]).abs() > eps_mass {
            return Err(Error::Certification(format!(
                "demand {j} receives {} of {}",
                col[j], demands[j]
            )));
        }
    }
    for i in 0..n {
        for j in 0..m {
            let r = cost(i, j) - solution.source_potentials[i] - solution.sink_potentials[j];
            if r < -eps_cost {
                return Err(Error::Certification(format!(
                    "dual infeasible at ({i}, {j}): reduced cost {r}"
                )));
            }
        }
    }
    for &(i, j, f) in &solution.flows {
        let r = cost(i, j) - solution.source_potentials[i] - solution.sink_potentials[j];
        if f > eps_mass && r.abs() > eps_cost {
            return Err(Error::Certification(format!(
                "slackness violated on ({i}, {j}): flow {f}, reduced cost {r}"
            )));
        }
    }
    let dual: f64 = supplies
        .iter()
        .zip(&solution.source_potentials)
        .map(|(a, u)| a * u)
        .sum::<f64>()
        + demands
            .iter()
            .zip(&solution.sink_potentials)
            .map(|(b, v)| b * v)
            .sum::<f64>();
    if (dual - solution.cost).abs() > eps_cost * (1.0 + mass_scale) {
        return Err(Error::Certification(format!(
            "duality gap: primal {} vs dual {dual}",
            solution.cost
        )));
    }
    Ok(())
}
