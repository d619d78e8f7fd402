//! Exact transportation-problem solver.
//!
//! Network simplex specialized to the dense transport polytope: basic
//! solutions are spanning trees of the bipartite supply/demand graph, so
//! the returned plan is always a vertex with at most N1+N2-1 positive
//! entries and exact marginals up to accumulated float error.

use ndarray::Array2;

use crate::error::{Error, Result};

const MARGINAL_TOL: f64 = 1e-9;
const REDUCED_COST_TOL: f64 = 1e-11;

/// Optimal transport plan between two discrete distributions under the
/// given cost matrix. Marginals match the inputs within 1e-8 and the
/// support has at most `rows + cols - 1` positive entries.
pub fn solve_transport_lp(
    cost: &Array2<f64>,
    w_start: &[f64],
    w_goal: &[f64],
) -> Result<Array2<f64>> {
    solve_transport_lp_with_duals(cost, w_start, w_goal).map(|(psi, _, _)| psi)
}

/// Same as [`solve_transport_lp`] but also returns the optimal dual
/// potentials (u, v), one per row and column. At optimality every cell
/// satisfies cost[i][j] - u[i] - v[j] >= -1e-11, so
/// sum(u*w_start) + sum(v*w_goal) is a certified lower bound.
pub fn solve_transport_lp_with_duals(
    cost: &Array2<f64>,
    w_start: &[f64],
    w_goal: &[f64],
) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    let m = w_start.len();
    let n = w_goal.len();
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter(
            "transport needs at least one supply and one demand".to_string(),
        ));
    }
    if cost.nrows() != m || cost.ncols() != n {
        return Err(Error::InvalidParameter(format!(
            "cost matrix is {}x{}, weights demand {m}x{n}",
            cost.nrows(),
            cost.ncols()
        )));
    }
    for &c in cost.iter() {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "transport costs must be finite and nonnegative, got {c}"
            )));
        }
    }
    for (name, w) in [("start", w_start), ("goal", w_goal)] {
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InfeasibleMarginals(format!(
                "{name} weights must be nonnegative and finite"
            )));
        }
    }
    let sa: f64 = w_start.iter().sum();
    let sb: f64 = w_goal.iter().sum();
    if (sa - sb).abs() > MARGINAL_TOL {
        return Err(Error::InfeasibleMarginals(format!(
            "start weights sum to {sa}, goal weights to {sb}"
        )));
    }

    // North-west corner initial basis: advance one index per step, which
    // yields exactly m+n-1 basic cells (some possibly zero).
    let mut ra = w_start.to_vec();
    let mut rb = w_goal.to_vec();
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(m + n - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(m + n - 1);
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let t = ra[i].min(rb[j]);
        basis.push((i, j));
        flow.push(t);
        ra[i] -= t;
        rb[j] -= t;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i < m - 1 && (ra[i] <= rb[j] || j == n - 1) {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), m + n - 1);

    // Node ids: rows 0..m, columns m..m+n.
    let nodes = m + n;
    let mut u = vec![0.0f64; m];
    let mut v = vec![0.0f64; n];
    let max_iters = 200 * nodes * nodes + 2000;
    let bland_after = max_iters / 2;

    for iter in 0..max_iters {
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        for (e, &(r, c)) in basis.iter().enumerate() {
            adj[r].push((e, m + c));
            adj[m + c].push((e, r));
        }

        // Duals from the basis tree: u[r] + v[c] = cost[r][c] on basic cells.
        let mut known = vec![false; nodes];
        known[0] = true;
        u[0] = 0.0;
        let mut stack = vec![0usize];
        while let Some(x) = stack.pop() {
            for &(e, y) in &adj[x] {
                if !known[y] {
                    known[y] = true;
                    let (r, c) = basis[e];
                    if y >= m {
                        v[y - m] = cost[(r, c)] - u[r];
                    } else {
                        u[y] = cost[(r, c)] - v[c];
                    }
                    stack.push(y);
                }
            }
        }
        debug_assert!(known.iter().all(|&k| k));

        // Entering cell: most negative reduced cost, or first negative once
        // the iteration budget suggests degenerate cycling.
        let bland = iter >= bland_after;
        let mut entering: Option<(usize, usize, f64)> = None;
        'scan: for r in 0..m {
            for c in 0..n {
                let red = cost[(r, c)] - u[r] - v[c];
                if red < -REDUCED_COST_TOL {
                    match entering {
                        Some((_, _, best)) if !bland && red >= best => {}
                        _ => entering = Some((r, c, red)),
                    }
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some((er, ec, _)) = entering else {
            break;
        };

        // The unique tree path from the entering row to the entering column;
        // edges alternate signs starting negative at the column end.
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes];
        let mut seen = vec![false; nodes];
        seen[er] = true;
        let mut queue = std::collections::VecDeque::from([er]);
        while let Some(x) = queue.pop_front() {
            if x == m + ec {
                break;
            }
            for &(e, y) in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    parent[y] = Some((e, x));
                    queue.push_back(y);
                }
            }
        }

        let mut path = Vec::new();
        let mut node = m + ec;
        while node != er {
            let (e, prev) = parent[node].expect("basis tree is connected");
            path.push(e);
            node = prev;
        }

        // path[0] touches the entering column: it loses flow, then signs
        // alternate back toward the entering row.
        // Deterministic tie-break on theta: smallest basis index leaves.
        let mut theta = f64::INFINITY;
        let mut leave_pos = usize::MAX;
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 && (flow[e] < theta || (flow[e] == theta && e < leave_pos)) {
                theta = flow[e];
                leave_pos = e;
            }
        }
        let theta = theta.max(0.0);
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[e] -= theta;
            } else {
                flow[e] += theta;
            }
        }
        basis[leave_pos] = (er, ec);
        flow[leave_pos] = theta;
    }

    let mut psi = Array2::zeros((m, n));
    for (e, &(r, c)) in basis.iter().enumerate() {
        psi[(r, c)] = flow[e].max(0.0);
    }
    Ok((psi, u, v))
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Independent exact solvers used only to cross-check the simplex.

    use ndarray::Array2;

    /// Successive shortest augmenting paths with Dijkstra potentials.
    /// Independent of the simplex implementation above.
    pub fn min_cost_flow(cost: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
        let m = a.len();
        let n = b.len();
        // Node ids: 0 source, 1..=m rows, m+1..=m+n cols, m+n+1 sink.
        let nodes = m + n + 2;
        let sink = m + n + 1;
        #[derive(Clone)]
        struct Arc {
            to: usize,
            cap: f64,
            cost: f64,
            rev: usize,
        }
        let mut g: Vec<Vec<Arc>> = vec![Vec::new(); nodes];
        let mut add = |g: &mut Vec<Vec<Arc>>, from: usize, to: usize, cap: f64, cost: f64| {
            let rf = g[to].len();
            let rt = g[from].len();
            g[from].push(Arc { to, cap, cost, rev: rf });
            g[to].push(Arc { to: from, cap: 0.0, cost: -cost, rev: rt });
        };
        for (i, &ai) in a.iter().enumerate() {
            add(&mut g, 0, 1 + i, ai, 0.0);
        }
        for (j, &bj) in b.iter().enumerate() {
            add(&mut g, 1 + m + j, sink, bj, 0.0);
        }
        for i in 0..m {
            for j in 0..n {
                add(&mut g, 1 + i, 1 + m + j, f64::INFINITY, cost[(i, j)]);
            }
        }

        let mut potential = vec![0.0f64; nodes];
        let mut total = 0.0;
        loop {
            let mut dist = vec![f64::INFINITY; nodes];
            let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
            dist[0] = 0.0;
            let mut heap = std::collections::BinaryHeap::new();
            heap.push((std::cmp::Reverse(Key(0.0)), 0usize));
            while let Some((std::cmp::Reverse(Key(d)), x)) = heap.pop() {
                if d > dist[x] + 1e-15 {
                    continue;
                }
                for (k, arc) in g[x].iter().enumerate() {
                    if arc.cap <= 1e-15 {
                        continue;
                    }
                    let nd = dist[x] + arc.cost + potential[x] - potential[arc.to];
                    if nd < dist[arc.to] - 1e-15 {
                        dist[arc.to] = nd;
                        prev[arc.to] = Some((x, k));
                        heap.push((std::cmp::Reverse(Key(nd)), arc.to));
                    }
                }
            }
            if !dist[sink].is_finite() {
                break;
            }
            for x in 0..nodes {
                if dist[x].is_finite() {
                    potential[x] += dist[x];
                }
            }
            let mut theta = f64::INFINITY;
            let mut node = sink;
            while let Some((px, k)) = prev[node] {
                theta = theta.min(g[px][k].cap);
                node = px;
            }
            if !(theta > 1e-12) {
                break;
            }
            let mut node = sink;
            while let Some((px, k)) = prev[node] {
                let rev = g[px][k].rev;
                g[px][k].cap -= theta;
                total += theta * g[px][k].cost;
                g[node][rev].cap += theta;
                node = px;
            }
        }
        total
    }

    #[derive(PartialEq)]
    struct Key(f64);
    impl Eq for Key {}
    impl Ord for Key {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0)
        }
    }
    impl PartialOrd for Key {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    /// Enumerates every basic solution (spanning tree of the bipartite
    /// graph) and returns the minimum objective over feasible ones.
    /// Exponential: use only for small instances.
    pub fn enumerate_vertices(cost: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
        let m = a.len();
        let n = b.len();
        let cells: Vec<(usize, usize)> =
            (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let need = m + n - 1;
        let mut best = f64::INFINITY;
        let mut chosen = Vec::with_capacity(need);
        fn rec(
            cells: &[(usize, usize)],
            from: usize,
            need: usize,
            chosen: &mut Vec<(usize, usize)>,
            m: usize,
            n: usize,
            a: &[f64],
            b: &[f64],
            cost: &Array2<f64>,
            best: &mut f64,
        ) {
            if chosen.len() == need {
                if let Some(obj) = tree_objective(chosen, m, n, a, b, cost) {
                    *best = best.min(obj);
                }
                return;
            }
            if cells.len() - from < need - chosen.len() {
                return;
            }
            for k in from..cells.len() {
                chosen.push(cells[k]);
                rec(cells, k + 1, need, chosen, m, n, a, b, cost, best);
                chosen.pop();
            }
        }
        rec(&cells, 0, need, &mut chosen, m, n, a, b, cost, &mut best);
        best
    }

    /// Solves the unique flow on a candidate basis by leaf peeling; returns
    /// None when the cells do not form a spanning tree or the flow goes
    /// negative.
    fn tree_objective(
        cells: &[(usize, usize)],
        m: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
        cost: &Array2<f64>,
    ) -> Option<f64> {
        let nodes = m + n;
        let mut deg = vec![0usize; nodes];
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for (e, &(i, j)) in cells.iter().enumerate() {
            deg[i] += 1;
            deg[m + j] += 1;
            incident[i].push(e);
            incident[m + j].push(e);
        }
        let mut supply: Vec<f64> = a.iter().copied().chain(b.iter().map(|&x| -x)).collect();
        let mut used = vec![false; cells.len()];
        let mut flow = vec![0.0f64; cells.len()];
        let mut leaves: Vec<usize> = (0..nodes).filter(|&x| deg[x] == 1).collect();
        let mut remaining = cells.len();
        while let Some(x) = leaves.pop() {
            let Some(&e) = incident[x].iter().find(|&&e| !used[e]) else {
                continue;
            };
            used[e] = true;
            remaining -= 1;
            let (i, j) = cells[e];
            let (this, other) = if x < m { (x, m + j) } else { (x, i) };
            // Flow on a row leaf equals its remaining supply; on a column
            // leaf, its remaining demand.
            let f = if this < m { supply[this] } else { -supply[this] };
            flow[e] = f;
            supply[this] = 0.0;
            if this < m {
                supply[other] += f;
            } else {
                supply[other] -= f;
            }
            deg[this] -= 1;
            deg[other] -= 1;
            if deg[other] == 1 {
                leaves.push(other);
            }
        }
        if remaining != 0 {
            return None;
        }
        if supply.iter().any(|&s| s.abs() > 1e-7) {
            return None;
        }
        if flow.iter().any(|&f| f < -1e-9) {
            return None;
        }
        Some(
            cells
                .iter()
                .zip(&flow)
                .map(|(&(i, j), &f)| cost[(i, j)] * f.max(0.0))
                .sum(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn random_instance(
        rng: &mut rand_chacha::ChaCha8Rng,
        max_side: usize,
    ) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let m = rng.gen_range(1..=max_side);
        let n = rng.gen_range(1..=max_side);
        let cost = Array2::from_shape_fn((m, n), |_| rng.gen_range(0.0..10.0));
        let mut a: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        a.iter_mut().for_each(|x| *x /= sa);
        b.iter_mut().for_each(|x| *x /= sb);
        // Exact balance: make the sums bit-identical.
        let diff: f64 = a.iter().sum::<f64>() - b.iter().sum::<f64>();
        b[0] += diff;
        (cost, a, b)
    }

    fn marginal_residual(psi: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            worst = worst.max((psi.row(i).sum() - ai).abs());
        }
        for (j, &bj) in b.iter().enumerate() {
            worst = worst.max((psi.column(j).sum() - bj).abs());
        }
        worst
    }

    #[test]
    fn single_cell_is_forced() {
        let cost = Array2::from_shape_vec((1, 1), vec![3.7]).unwrap();
        let psi = solve_transport_lp(&cost, &[1.0], &[1.0]).unwrap();
        assert_eq!(psi[(0, 0)], 1.0);
    }

    #[test]
    fn two_by_one_is_forced() {
        let cost = Array2::from_shape_vec((2, 1), vec![1.0, 9.0]).unwrap();
        let psi = solve_transport_lp(&cost, &[0.5, 0.5], &[1.0]).unwrap();
        assert_eq!(psi[(0, 0)], 0.5);
        assert_eq!(psi[(1, 0)], 0.5);
    }

    #[test]
    fn identity_costs_pick_the_diagonal() {
        let mut cost = Array2::from_elem((3, 3), 1.0);
        for i in 0..3 {
            cost[(i, i)] = 0.0;
        }
        let w = [0.2, 0.3, 0.5];
        let psi = solve_transport_lp(&cost, &w, &w).unwrap();
        for i in 0..3 {
            assert!((psi[(i, i)] - w[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn matches_vertex_enumeration_on_small_instances() {
        let mut rng = stream_rng(41, Stream::Generic, 0);
        for _ in 0..60 {
            let (cost, a, b) = random_instance(&mut rng, 4);
            let (psi, _, _) = solve_transport_lp_with_duals(&cost, &a, &b).unwrap();
            let obj: f64 = cost.iter().zip(psi.iter()).map(|(c, p)| c * p).sum();
            let brute = oracle::enumerate_vertices(&cost, &a, &b);
            assert!(
                (obj - brute).abs() <= 1e-7 * (1.0 + brute.abs()),
                "simplex {obj} vs enumeration {brute}"
            );
        }
    }

    #[test]
    fn matches_min_cost_flow_up_to_eight_by_eight() {
        let mut rng = stream_rng(42, Stream::Generic, 1);
        for trial in 0..100 {
            let (cost, a, b) = random_instance(&mut rng, 8);
            let (psi, _, _) = solve_transport_lp_with_duals(&cost, &a, &b).unwrap();
            let obj: f64 = cost.iter().zip(psi.iter()).map(|(c, p)| c * p).sum();
            let flow = oracle::min_cost_flow(&cost, &a, &b);
            assert!(
                (obj - flow).abs() <= 1e-7 * (1.0 + flow.abs()),
                "trial {trial}: simplex {obj} vs flow {flow}"
            );
            assert!(marginal_residual(&psi, &a, &b) <= 1e-8);
        }
    }

    #[test]
    fn support_is_a_vertex() {
        let mut rng = stream_rng(43, Stream::Generic, 2);
        for _ in 0..100 {
            let (cost, a, b) = random_instance(&mut rng, 8);
            let psi = solve_transport_lp(&cost, &a, &b).unwrap();
            let positive = psi.iter().filter(|&&p| p > 0.0).count();
            assert!(positive <= a.len() + b.len() - 1);
        }
    }

    #[test]
    fn duality_gap_is_tight() {
        let mut rng = stream_rng(44, Stream::Generic, 3);
        for _ in 0..100 {
            let (cost, a, b) = random_instance(&mut rng, 8);
            let (psi, u, v) = solve_transport_lp_with_duals(&cost, &a, &b).unwrap();
            let primal: f64 = cost.iter().zip(psi.iter()).map(|(c, p)| c * p).sum();
            let dual: f64 = u.iter().zip(&a).map(|(x, w)| x * w).sum::<f64>()
                + v.iter().zip(&b).map(|(x, w)| x * w).sum::<f64>();
            assert!(primal - dual <= 1e-7 * (1.0 + primal.abs()), "{primal} vs {dual}");
            // Dual feasibility up to the pivot tolerance.
            for i in 0..a.len() {
                for j in 0..b.len() {
                    assert!(cost[(i, j)] - u[i] - v[j] >= -1e-9);
                }
            }
        }
    }

    #[test]
    fn mismatched_marginals_are_rejected() {
        let cost = Array2::zeros((2, 2));
        let err = solve_transport_lp(&cost, &[0.6, 0.6], &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleMarginals(_)));
    }

    #[test]
    fn zero_weight_rows_carry_no_mass() {
        let cost = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let psi = solve_transport_lp(&cost, &[0.0, 1.0], &[0.4, 0.6]).unwrap();
        assert_eq!(psi.row(0).sum(), 0.0);
        assert!((psi[(1, 0)] - 0.4).abs() <= 1e-12);
        assert!((psi[(1, 1)] - 0.6).abs() <= 1e-12);
    }

    #[test]
    fn constant_cost_shift_preserves_the_plan_exactly() {
        let mut rng = stream_rng(45, Stream::Generic, 4);
        for _ in 0..20 {
            let (cost, a, b) = random_instance(&mut rng, 6);
            let shifted = cost.mapv(|c| c + 7.25);
            let p1 = solve_transport_lp(&cost, &a, &b).unwrap();
            let p2 = solve_transport_lp(&shifted, &a, &b).unwrap();
            assert_eq!(p1, p2);
        }
    }
}
