//! Joint graphs, hop distances, and partition masks for graph convolution.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::skeleton::NUM_JOINTS;

/// Undirected COCO-17 skeleton tree (16 edges).
///
/// Head: nose-eye, eye-ear. Torso: left ear to left shoulder, shoulder-shoulder,
/// shoulder-hip. Limbs: shoulder-elbow-wrist and hip-knee-ankle chains.
pub const COCO_EDGES: [(usize, usize); 16] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

pub const UNREACHABLE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointGraph {
    /// Original joint index for each dense node index.
    pub joints: Vec<usize>,
    /// Edges over dense node indices, each stored once with `a < b`.
    pub edges: Vec<(usize, usize)>,
}

impl JointGraph {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut norm: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b || a >= n || b >= n {
                return Err(Error::Config(format!("invalid edge ({a}, {b}) for {n} nodes")));
            }
            let e = (a.min(b), a.max(b));
            if norm.contains(&e) {
                return Err(Error::Config(format!("duplicate edge ({a}, {b})")));
            }
            norm.push(e);
        }
        Ok(Self {
            joints: (0..n).collect(),
            edges: norm,
        })
    }

    pub fn node_count(&self) -> usize {
        self.joints.len()
    }

    /// Raw adjacency `A` without self-loops.
    pub fn adjacency(&self) -> Tensor {
        let n = self.node_count();
        let mut a = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.edges {
            a.data_mut()[i * n + j] = 1.0;
            a.data_mut()[j * n + i] = 1.0;
        }
        a
    }

    fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Connected components as sorted dense index lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let d = shortest_paths(self);
        let mut seen = vec![false; self.node_count()];
        let mut out = Vec::new();
        for i in 0..self.node_count() {
            if seen[i] {
                continue;
            }
            let comp: Vec<usize> = (0..self.node_count())
                .filter(|&j| d.get(i, j) != UNREACHABLE)
                .collect();
            for &j in &comp {
                seen[j] = true;
            }
            out.push(comp);
        }
        out
    }
}

/// Induced subgraph of the COCO skeleton on `subset`, reindexed densely in the
/// order given.
pub fn build_part_graph(subset: &[usize]) -> Result<JointGraph> {
    if subset.is_empty() {
        return Err(Error::Config("joint subset is empty".into()));
    }
    if let Some(&j) = subset.iter().find(|&&j| j >= NUM_JOINTS) {
        return Err(Error::Config(format!("joint {j} is not a COCO-17 index")));
    }
    let pos = |j: usize| subset.iter().position(|&s| s == j);
    let edges: Vec<(usize, usize)> = COCO_EDGES
        .iter()
        .filter_map(|&(a, b)| Some((pos(a)?, pos(b)?)))
        .collect();
    let mut g = JointGraph::new(subset.len(), &edges)?;
    g.joints = subset.to_vec();
    let comps = g.components();
    if comps.len() > 1 {
        return Err(Error::Topology {
            components: comps
                .into_iter()
                .map(|c| c.into_iter().map(|i| subset[i]).collect())
                .collect(),
        });
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<usize>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.d[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Breadth-first hop distances; unreachable pairs hold [`UNREACHABLE`].
pub fn shortest_paths(g: &JointGraph) -> DistanceMatrix {
    let n = g.node_count();
    let adj = g.neighbours();
    let mut d = vec![UNREACHABLE; n * n];
    for s in 0..n {
        d[s * n + s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if d[s * n + v] == UNREACHABLE {
                    d[s * n + v] = d[s * n + u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    DistanceMatrix { n, d }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "scales")]
pub enum Strategy {
    /// Self and 1-hop subsets (K = 2).
    Distance,
    /// Clamped powers of the normalised self-looped adjacency, `k = 1..=K`.
    Multiscale(usize),
    /// Masks selecting `d(i,j) == k` plus the diagonal, `k = 1..=K`.
    ExactDistance(usize),
}

impl Strategy {
    pub fn num_partitions(self) -> usize {
        match self {
            Strategy::Distance => 2,
            Strategy::Multiscale(k) | Strategy::ExactDistance(k) => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedGraph {
    pub strategy: Strategy,
    /// Normalised masks `Â_k`, each `N×N`.
    pub masks: Vec<Tensor>,
    /// Unnormalised `A_k`, kept for distance partitioning.
    pub raw: Option<Vec<Tensor>>,
}

impl PartitionedGraph {
    pub fn node_count(&self) -> usize {
        self.masks[0].dims2().0
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn build(g: &JointGraph, strategy: Strategy) -> Result<Self> {
        match strategy {
            Strategy::Distance => Ok(distance_partition(g)),
            Strategy::Multiscale(k) => multiscale_partition(g, k),
            Strategy::ExactDistance(k) => exact_distance_partition(g, k),
        }
    }
}

/// `Λ^{-1/2} M Λ^{-1/2}` with `Λ` the row sums of `M`; zero-degree rows stay zero.
pub fn symmetric_normalize(m: &Tensor) -> Tensor {
    let (n, _) = m.dims2();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = m.data()[i * n..(i + 1) * n].iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = m.clone();
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    out
}

/// Two subsets: the root itself (`A_1 = I`) and its 1-hop neighbours (`A_2 = A`).
pub fn distance_partition(g: &JointGraph) -> PartitionedGraph {
    let n = g.node_count();
    let raw = vec![Tensor::eye(n), g.adjacency()];
    PartitionedGraph {
        strategy: Strategy::Distance,
        masks: raw.iter().map(symmetric_normalize).collect(),
        raw: Some(raw),
    }
}

/// `Â = D^{-1/2}(A+I)D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalized_self_loop_adjacency(g: &JointGraph) -> Tensor {
    let n = g.node_count();
    let mut a = g.adjacency();
    for i in 0..n {
        a.data_mut()[i * n + i] += 1.0;
    }
    symmetric_normalize(&a)
}

/// `Â_k = min(Â^k, 1)` for `k = 1..=scales`.
pub fn multiscale_partition(g: &JointGraph, scales: usize) -> Result<PartitionedGraph> {
    if scales == 0 {
        return Err(Error::Parameter("multi-scale partitioning needs K >= 1".into()));
    }
    let a_hat = normalized_self_loop_adjacency(g);
    let mut masks = Vec::with_capacity(scales);
    let mut power = a_hat.clone();
    for k in 1..=scales {
        if k > 1 {
            power = power.matmul(&a_hat)?;
        }
        // Â^k is symmetric; average out rounding so the mask is exactly so
        let n = power.dims2().0;
        let mut m = power.map(|v| v.min(1.0));
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (m.data()[i * n + j] + m.data()[j * n + i]);
                m.data_mut()[i * n + j] = v;
                m.data_mut()[j * n + i] = v;
            }
        }
        masks.push(m);
    }
    Ok(PartitionedGraph {
        strategy: Strategy::Multiscale(scales),
        masks,
        raw: None,
    })
}

/// Indicator masks `d(i,j) == k or i == j`, symmetrically normalised.
pub fn exact_distance_partition(g: &JointGraph, scales: usize) -> Result<PartitionedGraph> {
    if scales == 0 {
        return Err(Error::Parameter("exact-distance partitioning needs K >= 1".into()));
    }
    let n = g.node_count();
    let d = shortest_paths(g);
    let raw: Vec<Tensor> = (1..=scales)
        .map(|k| {
            let mut m = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    if i == j || d.get(i, j) == k {
                        m.data_mut()[i * n + j] = 1.0;
                    }
                }
            }
            m
        })
        .collect();
    Ok(PartitionedGraph {
        strategy: Strategy::ExactDistance(scales),
        masks: raw.iter().map(symmetric_normalize).collect(),
        raw: Some(raw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> JointGraph {
        JointGraph::new(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn head_subgraph() {
        let g = build_part_graph(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (1, 3), (2, 4)]);
        assert_eq!(shortest_paths(&g).get(3, 4), 4);
    }

    #[test]
    fn single_joint_is_trivial() {
        let g = build_part_graph(&[9]).unwrap();
        assert_eq!(g.node_count(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn full_skeleton_is_a_tree() {
        let all: Vec<usize> = (0..17).collect();
        let g = build_part_graph(&all).unwrap();
        assert_eq!(g.edges.len(), 16);
        assert_eq!(g.components().len(), 1);
    }

    #[test]
    fn disconnected_subset_lists_components() {
        match build_part_graph(&[9, 10, 0]) {
            Err(Error::Topology { components }) => {
                assert_eq!(components, vec![vec![9], vec![10], vec![0]]);
            }
            other => panic!("expected topology error, got {other:?}"),
        }
    }

    #[test]
    fn path_distances() {
        let d = shortest_paths(&path3());
        assert_eq!(d.get(0, 2), 2);
        assert!((0..3).all(|i| d.get(i, i) == 0));
    }

    #[test]
    fn distance_masks_on_path() {
        let pg = distance_partition(&path3());
        assert_eq!(pg.masks[0], Tensor::eye(3));
        let v = pg.masks[1].at(0, 1);
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn multiscale_on_path() {
        let g = path3();
        let one = multiscale_partition(&g, 1).unwrap();
        assert_eq!(one.masks[0], normalized_self_loop_adjacency(&g));
        let pg = multiscale_partition(&g, 2).unwrap();
        let a = &pg.masks[0];
        assert!((a.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.at(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.at(2, 2) - 0.5).abs() < 1e-15);
        assert!((pg.masks[1].at(0, 2) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn zero_scales_rejected() {
        assert!(multiscale_partition(&path3(), 0).is_err());
        assert!(exact_distance_partition(&path3(), 0).is_err());
    }

    #[test]
    fn exact_distance_masks() {
        let pg = exact_distance_partition(&path3(), 2).unwrap();
        let raw = pg.raw.unwrap();
        assert_eq!(raw[1].at(0, 2), 1.0);
        assert_eq!(raw[1].at(0, 1), 0.0);
        assert_eq!(raw[1].at(1, 1), 1.0);
    }

    #[test]
    fn strategy_serde() {
        let s = serde_json::to_string(&Strategy::Multiscale(3)).unwrap();
        assert_eq!(s, r#"{"kind":"multiscale","scales":3}"#);
        let back: Strategy = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Strategy::Multiscale(3));
    }
}
