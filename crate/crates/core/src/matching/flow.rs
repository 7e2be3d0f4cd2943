//! Exact transportation problem via successive shortest paths.

struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
}

struct Network {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl Network {
    fn new(n: usize) -> Self {
        Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: f64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(Edge {
            to: from,
            cap: 0,
            cost: -cost,
        });
    }

    /// Sends `demand` units from `s` to `t` at minimum cost. Dijkstra with
    /// Johnson potentials; all forward costs are non-negative so zero initial
    /// potentials are feasible.
    fn min_cost_flow(&mut self, s: usize, t: usize, mut demand: i64) -> f64 {
        let n = self.adj.len();
        let mut potential = vec![0.0; n];
        let mut total = 0.0;
        while demand > 0 {
            let mut dist = vec![f64::INFINITY; n];
            let mut prev_edge = vec![usize::MAX; n];
            let mut done = vec![false; n];
            dist[s] = 0.0;
            loop {
                let mut u = usize::MAX;
                let mut best = f64::INFINITY;
                for v in 0..n {
                    if !done[v] && dist[v] < best {
                        best = dist[v];
                        u = v;
                    }
                }
                if u == usize::MAX {
                    break;
                }
                done[u] = true;
                for &e in &self.adj[u] {
                    let edge = &self.edges[e];
                    if edge.cap <= 0 || done[edge.to] {
                        continue;
                    }
                    let reduced = (edge.cost + potential[u] - potential[edge.to]).max(0.0);
                    let nd = dist[u] + reduced;
                    if nd < dist[edge.to] {
                        dist[edge.to] = nd;
                        prev_edge[edge.to] = e;
                    }
                }
            }
            assert!(dist[t].is_finite(), "transport network is infeasible");
            for v in 0..n {
                if dist[v].is_finite() {
                    potential[v] += dist[v];
                }
            }
            let mut push = demand;
            let mut v = t;
            while v != s {
                let e = prev_edge[v];
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let e = prev_edge[v];
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                total += push as f64 * self.edges[e].cost;
                v = self.edges[e ^ 1].to;
            }
            demand -= push;
        }
        total
    }
}

/// Minimum transport cost moving integer `supply[i]` out of each source to
/// integer `demand[j]` at each sink, with `cost(i, j)` per unit.
///
/// Supplies and demands must have equal totals.
pub fn transport_cost(supply: &[i64], demand: &[i64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let total: i64 = supply.iter().sum();
    assert_eq!(total, demand.iter().sum::<i64>(), "unbalanced transport problem");
    let (n, m) = (supply.len(), demand.len());
    let s = n + m;
    let t = s + 1;
    let mut net = Network::new(n + m + 2);
    for (i, &a) in supply.iter().enumerate() {
        net.add_edge(s, i, a, 0.0);
    }
    for (j, &b) in demand.iter().enumerate() {
        net.add_edge(n + j, t, b, 0.0);
    }
    for i in 0..n {
        for j in 0..m {
            net.add_edge(i, n + j, total, cost(i, j));
        }
    }
    net.min_cost_flow(s, t, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sources_one_sink() {
        let c = [[1.0], [3.0]];
        assert_eq!(transport_cost(&[1, 1], &[2], |i, j| c[i][j]), 4.0);
    }

    #[test]
    fn prefers_cheap_routes() {
        let c = [[1.0, 10.0], [10.0, 1.0]];
        assert_eq!(transport_cost(&[2, 3], &[2, 3], |i, j| c[i][j]), 5.0);
        assert_eq!(transport_cost(&[3, 2], &[2, 3], |i, j| c[i][j]), 2.0 + 10.0 + 2.0);
    }
}
