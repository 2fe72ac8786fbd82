//! Deployment generation, shortest-hop routing tree and activity queries.
//!
//! Nodes live on a 2-D field and talk over unit-disk links: two nodes are
//! neighbors iff their Euclidean distance is within the transmission range,
//! which makes every link symmetric. Node 0 is always the sink.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Node identifier; index 0 is reserved for the sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const SINK: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("could not produce a connected deployment within {retries} retries")]
    ConnectivityUnachievable { retries: u32 },
    #[error("deployment is disconnected; stranded nodes: {0:?}")]
    Disconnected(Vec<NodeId>),
}

/// Positions of all nodes plus the radio range that induces the link graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub positions: Vec<(f64, f64)>,
    pub field: (f64, f64),
    pub tx_range: f64,
}

impl Deployment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        let (ax, ay) = self.positions[a.index()];
        let (bx, by) = self.positions[b.index()];
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    pub fn in_range(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.distance(a, b) <= self.tx_range
    }

    pub fn neighbors(&self, a: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.len() as u32)
            .map(NodeId)
            .filter(move |&b| self.in_range(a, b))
    }

    /// Hop distance from every node to the sink; `None` for stranded nodes.
    fn hops_to_sink(&self) -> Vec<Option<u32>> {
        let mut depth = vec![None; self.len()];
        depth[0] = Some(0);
        let mut frontier = VecDeque::from([NodeId::SINK]);
        while let Some(node) = frontier.pop_front() {
            let d = depth[node.index()].unwrap();
            for nb in self.neighbors(node) {
                if depth[nb.index()].is_none() {
                    depth[nb.index()] = Some(d + 1);
                    frontier.push_back(nb);
                }
            }
        }
        depth
    }

    pub fn is_connected(&self) -> bool {
        self.hops_to_sink().iter().all(|d| d.is_some())
    }
}

/// Static parent/child structure rooted at the sink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTree {
    /// `parent[i]` is `None` exactly for the sink.
    pub parent: Vec<Option<NodeId>>,
    pub children: Vec<Vec<NodeId>>,
    pub depth: Vec<u32>,
}

impl RoutingTree {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent_of(&self, node: NodeId) -> Option<NodeId> {
        self.parent[node.index()]
    }

    pub fn children_of(&self, node: NodeId) -> &[NodeId] {
        &self.children[node.index()]
    }

    pub fn child_count(&self, node: NodeId) -> usize {
        self.children[node.index()].len()
    }
}

/// Per-node idle intervals; a node is asleep while inside one of its
/// intervals. The sink has none.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivitySchedule {
    pub idle_intervals: Vec<Vec<(f64, f64)>>,
}

impl ActivitySchedule {
    pub fn always_active(n_nodes: usize) -> Self {
        ActivitySchedule {
            idle_intervals: vec![Vec::new(); n_nodes],
        }
    }

    pub fn set_idle(&mut self, node: NodeId, start: f64, end: f64) {
        assert!(node != NodeId::SINK, "sink is never idle");
        assert!(start < end);
        self.idle_intervals[node.index()].push((start, end));
    }

    pub fn is_active(&self, node: NodeId, t: f64) -> bool {
        self.idle_intervals
            .get(node.index())
            .map_or(true, |iv| !iv.iter().any(|&(s, e)| t >= s && t < e))
    }
}

/// Randomly place `n_nodes` (sink included) in the field, resampling the
/// positions of stranded nodes until every node has a path to the sink.
pub fn generate_deployment(
    n_nodes: usize,
    field: (f64, f64),
    tx_range: f64,
    seed: u64,
) -> Result<Deployment, TopologyError> {
    assert!(n_nodes >= 1);
    assert!(tx_range > 0.0);
    const MAX_RETRIES: u32 = 1000;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<(f64, f64)> = (0..n_nodes)
        .map(|_| (rng.gen::<f64>() * field.0, rng.gen::<f64>() * field.1))
        .collect();

    for _ in 0..MAX_RETRIES {
        let deployment = Deployment {
            positions: positions.clone(),
            field,
            tx_range,
        };
        let hops = deployment.hops_to_sink();
        let stranded: Vec<usize> = (0..n_nodes).filter(|&i| hops[i].is_none()).collect();
        if stranded.is_empty() {
            return Ok(deployment);
        }
        for i in stranded {
            positions[i] = (rng.gen::<f64>() * field.0, rng.gen::<f64>() * field.1);
        }
    }
    Err(TopologyError::ConnectivityUnachievable {
        retries: MAX_RETRIES,
    })
}

/// Build the single-path routing tree: each node's parent is a minimum-hop
/// neighbor toward the sink, ties broken by distance to the sink, then id.
pub fn build_tree(deployment: &Deployment) -> Result<RoutingTree, TopologyError> {
    let n = deployment.len();
    let hops = deployment.hops_to_sink();
    let stranded: Vec<NodeId> = (0..n as u32)
        .map(NodeId)
        .filter(|id| hops[id.index()].is_none())
        .collect();
    if !stranded.is_empty() {
        return Err(TopologyError::Disconnected(stranded));
    }

    let mut parent = vec![None; n];
    let mut children = vec![Vec::new(); n];
    let mut depth = vec![0u32; n];
    for i in 1..n {
        let id = NodeId(i as u32);
        let my_hops = hops[i].unwrap();
        let best = deployment
            .neighbors(id)
            .filter(|nb| hops[nb.index()] == Some(my_hops - 1))
            .min_by(|&a, &b| {
                deployment
                    .distance(a, NodeId::SINK)
                    .partial_cmp(&deployment.distance(b, NodeId::SINK))
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .expect("connected node has an upstream neighbor");
        parent[i] = Some(best);
        children[best.index()].push(id);
        depth[i] = my_hops;
    }
    for c in &mut children {
        c.sort();
    }
    Ok(RoutingTree {
        parent,
        children,
        depth,
    })
}

/// The children of `node` that are awake at time `t`.
pub fn active_children(
    tree: &RoutingTree,
    schedule: &ActivitySchedule,
    node: NodeId,
    t: f64,
) -> Vec<NodeId> {
    tree.children_of(node)
        .iter()
        .copied()
        .filter(|&c| schedule.is_active(c, t))
        .collect()
}
