//! DAG representation, Erdős–Rényi sampling over a random causal order,
//! cycle checking, and the SHD/TPR evaluation metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::ndtensor::{Matrix, SplitRng};
use crate::{Error, Result};

/// Directed acyclic graph over `d` nodes with a stored topological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    d: usize,
    edges: BTreeSet<(usize, usize)>,
    order: Vec<usize>,
}

impl Dag {
    /// Build a DAG from an edge set, computing a topological order.
    /// Fails if the edges contain a directed cycle.
    pub fn new(d: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Dag> {
        let edges: BTreeSet<(usize, usize)> = edges.into_iter().collect();
        for &(a, b) in &edges {
            if a >= d || b >= d {
                return Err(Error::Contract(format!("edge ({a},{b}) out of range for d={d}")));
            }
            if a == b {
                return Err(Error::Contract(format!("self-loop at node {a}")));
            }
        }
        let order = topological_order(d, &edges)
            .ok_or_else(|| Error::Contract("edge set contains a directed cycle".into()))?;
        Ok(Dag { d, edges, order })
    }

    pub fn empty(d: usize) -> Dag {
        Dag { d, edges: BTreeSet::new(), order: (0..d).collect() }
    }

    pub fn node_count(&self) -> usize {
        self.d
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.edges.contains(&(parent, child))
    }

    pub fn parents(&self, node: usize) -> Vec<usize> {
        self.edges.iter().filter(|&&(_, c)| c == node).map(|&(p, _)| p).collect()
    }

    /// 0/1 adjacency matrix; entry (i,j) = 1 iff edge i -> j.
    pub fn adjacency(&self) -> Matrix {
        let mut m = Matrix::zeros(self.d, self.d);
        for &(p, c) in &self.edges {
            m.set(p, c, 1.0);
        }
        m
    }
}

fn topological_order(d: usize, edges: &BTreeSet<(usize, usize)>) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; d];
    for &(_, c) in edges {
        indeg[c] += 1;
    }
    let mut queue: Vec<usize> = (0..d).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(d);
    let mut head = 0;
    while head < queue.len() {
        let n = queue[head];
        head += 1;
        order.push(n);
        for &(p, c) in edges {
            if p == n {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
    }
    (order.len() == d).then_some(order)
}

/// Erdős–Rényi DAG: draw a uniform random causal order, then include each
/// order-respecting pair independently with p = min(1, 2k/(d-1)) so the
/// expected edge count is k*d.
pub fn sample_er(d: usize, k: f64, rng: &mut SplitRng) -> Result<Dag> {
    if d < 2 {
        return Err(Error::Contract("sample_er requires d >= 2".into()));
    }
    if k < 0.0 {
        return Err(Error::Contract("sample_er requires k >= 0".into()));
    }
    let p = (2.0 * k / (d as f64 - 1.0)).min(1.0);
    let mut order: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut order);
    let mut edges = BTreeSet::new();
    for i in 0..d {
        for j in (i + 1)..d {
            if rng.uniform() < p {
                edges.insert((order[i], order[j]));
            }
        }
    }
    Ok(Dag { d, edges, order })
}

/// True iff the nonzero support of a square matrix has no directed cycle.
/// Three-color depth-first search.
pub fn is_dag(adjacency: &Matrix) -> bool {
    assert!(adjacency.is_square(), "is_dag needs a square matrix");
    let d = adjacency.rows();
    // 0 = white, 1 = gray (on stack), 2 = black
    let mut color = vec![0u8; d];
    for start in 0..d {
        if color[start] != 0 {
            continue;
        }
        // iterative DFS with explicit stack of (node, next-child)
        let mut stack = vec![(start, 0usize)];
        color[start] = 1;
        while !stack.is_empty() {
            let top = stack.len() - 1;
            let (node, child) = stack[top];
            if child >= d {
                color[node] = 2;
                stack.pop();
                continue;
            }
            stack[top].1 += 1;
            if adjacency.get(node, child) == 0.0 {
                continue;
            }
            if node == child {
                // explicit self-loop counts as a cycle
                return false;
            }
            match color[child] {
                1 => return false,
                0 => {
                    color[child] = 1;
                    stack.push((child, 0));
                }
                _ => {}
            }
        }
    }
    true
}

/// SHD/TPR comparison of a predicted graph against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub shd: usize,
    pub tpr: f64,
    pub predicted_edges: usize,
    pub reversed: usize,
    pub missing: usize,
    pub extra: usize,
}

/// Structural Hamming distance with reversal cost 1, plus TPR
/// (correctly-oriented true edges over true edge count).
pub fn shd(pred: &Dag, truth: &Dag) -> Result<Metrics> {
    if pred.node_count() != truth.node_count() {
        return Err(Error::Contract(format!(
            "node count mismatch: pred {} vs truth {}",
            pred.node_count(),
            truth.node_count()
        )));
    }
    let mut reversed = 0;
    let mut missing = 0;
    let mut extra = 0;
    let mut correct = 0;
    for &(p, c) in truth.edges() {
        if pred.has_edge(p, c) {
            correct += 1;
        } else if pred.has_edge(c, p) {
            reversed += 1;
        } else {
            missing += 1;
        }
    }
    for &(p, c) in pred.edges() {
        if !truth.has_edge(p, c) && !truth.has_edge(c, p) {
            extra += 1;
        }
    }
    let tpr = if truth.edge_count() == 0 {
        if pred.edge_count() == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        correct as f64 / truth.edge_count() as f64
    };
    Ok(Metrics {
        shd: reversed + missing + extra,
        tpr,
        predicted_edges: pred.edge_count(),
        reversed,
        missing,
        extra,
    })
}

/// Serialize a DAG as the edge-list text format: one `PARENT<TAB>CHILD` line
/// per edge, `#` comments allowed.
pub fn write_edge_list(dag: &Dag, names: &[String]) -> String {
    let mut out = String::new();
    for &(p, c) in dag.edges() {
        let _ = writeln!(out, "{}\t{}", names[p], names[c]);
    }
    out
}

/// Parse the edge-list format. Returns the node names in first-appearance
/// order together with the graph. `extra_names` seeds the node set so
/// isolated nodes can participate.
pub fn parse_edge_list(text: &str, extra_names: &[String]) -> Result<(Vec<String>, Dag)> {
    let mut names: Vec<String> = extra_names.to_vec();
    let index = |name: &str, names: &mut Vec<String>| -> usize {
        if let Some(i) = names.iter().position(|n| n == name) {
            i
        } else {
            names.push(name.to_string());
            names.len() - 1
        }
    };
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (p, c) = match (parts.next(), parts.next()) {
            (Some(p), Some(c)) if !p.trim().is_empty() && !c.trim().is_empty() => {
                (p.trim(), c.trim())
            }
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected PARENT<TAB>CHILD, got {line:?}"),
                })
            }
        };
        let pi = index(p, &mut names);
        let ci = index(c, &mut names);
        edges.push((pi, ci));
    }
    let dag = Dag::new(names.len(), edges)?;
    Ok((names, dag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acyclicity;

    #[test]
    fn empty_adjacency_is_dag() {
        assert!(is_dag(&Matrix::zeros(4, 4)));
    }

    #[test]
    fn two_cycle_is_not_dag() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        assert!(!is_dag(&m));
    }

    #[test]
    fn er_k0_is_empty() {
        let mut rng = SplitRng::new(1);
        let g = sample_er(10, 0.0, &mut rng).unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn er_expected_edge_count() {
        // d=10, k=1: mean edge count over 10_000 samples within 10 +/- 0.5
        let mut rng = SplitRng::new(7);
        let mut total = 0usize;
        let n = 10_000;
        for _ in 0..n {
            total += sample_er(10, 1.0, &mut rng).unwrap().edge_count();
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 10.0).abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn er_samples_are_dags() {
        let mut rng = SplitRng::new(3);
        for _ in 0..10_000 {
            let g = sample_er(8, 2.0, &mut rng).unwrap();
            assert!(is_dag(&g.adjacency()));
        }
    }

    #[test]
    fn is_dag_agrees_with_constraint_sign() {
        // h(W) = 0 iff the 0/1 support is acyclic, 1000 random 5-node matrices
        let mut rng = SplitRng::new(11);
        for _ in 0..1000 {
            let mut m = Matrix::zeros(5, 5);
            for i in 0..5 {
                for j in 0..5 {
                    if i != j && rng.uniform() < 0.3 {
                        m.set(i, j, 1.0);
                    }
                }
            }
            let h = acyclicity::h_exp(&m).unwrap().h;
            assert_eq!(is_dag(&m), h < 1e-8, "disagreement on {m:?} (h={h})");
        }
    }

    #[test]
    fn shd_identical_graphs() {
        let g = Dag::new(3, [(0, 1), (1, 2)]).unwrap();
        let m = shd(&g, &g).unwrap();
        assert_eq!(m.shd, 0);
        assert_eq!(m.tpr, 1.0);
    }

    #[test]
    fn shd_reversal_costs_one() {
        let truth = Dag::new(2, [(0, 1)]).unwrap();
        let pred = Dag::new(2, [(1, 0)]).unwrap();
        let m = shd(&pred, &truth).unwrap();
        assert_eq!(m.shd, 1);
        assert_eq!(m.reversed, 1);
        assert_eq!(m.tpr, 0.0);
    }

    #[test]
    fn shd_edit_cases() {
        let truth = Dag::new(3, [(0, 1)]).unwrap();
        let m = shd(&Dag::empty(3), &truth).unwrap();
        assert_eq!((m.shd, m.tpr), (1, 0.0));
        let pred = Dag::new(3, [(0, 1), (0, 2)]).unwrap();
        let m = shd(&pred, &truth).unwrap();
        assert_eq!((m.shd, m.tpr), (1, 1.0));
    }

    #[test]
    fn shd_symmetric() {
        let mut rng = SplitRng::new(5);
        for _ in 0..50 {
            let a = sample_er(6, 1.5, &mut rng).unwrap();
            let b = sample_er(6, 1.5, &mut rng).unwrap();
            assert_eq!(shd(&a, &b).unwrap().shd, shd(&b, &a).unwrap().shd);
        }
    }

    #[test]
    fn shd_node_count_mismatch() {
        let a = Dag::empty(3);
        let b = Dag::empty(4);
        assert!(shd(&a, &b).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let g = Dag::new(3, [(0, 1), (2, 1)]).unwrap();
        let text = write_edge_list(&g, &names);
        let (parsed_names, parsed) = parse_edge_list(&text, &names).unwrap();
        assert_eq!(parsed_names, names);
        assert_eq!(parsed.edges(), g.edges());
    }

    #[test]
    fn edge_list_rejects_garbage() {
        let err = parse_edge_list("A\tB\njust-one-token\n", &[]).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
