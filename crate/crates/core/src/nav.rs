//! Navigation graph and episode metrics: success, SPL, nDTW and goal
//! progress, all measured with geodesic (shortest-path) distances.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default success radius in meters.
pub const SUCCESS_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {0:?} defined twice")]
    DuplicateNode(String),
    #[error("edge {0:?}-{1:?} has zero length")]
    ZeroLengthEdge(String, String),
    #[error("node {0:?} has a non-finite position")]
    BadPosition(String),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory steps from {0:?} to non-adjacent {1:?}")]
    NotAdjacent(String, String),
    #[error("trajectory starts at {found:?}, expected {expected:?}")]
    TrajectoryStartMismatch { expected: String, found: String },
    #[error("no episodes to aggregate")]
    EmptyResultSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub xyz: [f64; 3],
}

/// Line shape of `graph.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[String; 2]>,
}

/// Undirected viewpoint graph weighted by Euclidean edge length.
///
/// Single-source distance tables are computed on first use and cached; the
/// cache is safe to fill from several threads.
#[derive(Debug, Clone)]
pub struct NavGraph {
    graph: UnGraph<String, f64>,
    index: HashMap<String, NodeIndex>,
    positions: Vec<[f64; 3]>,
    edges: Vec<[String; 2]>,
    distances: Vec<OnceLock<Arc<[f64]>>>,
}

fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl NavGraph {
    pub fn from_record(record: GraphRecord) -> Result<Self, GraphError> {
        let mut graph = UnGraph::with_capacity(record.nodes.len(), record.edges.len());
        let mut index = HashMap::with_capacity(record.nodes.len());
        let mut positions = Vec::with_capacity(record.nodes.len());
        for node in record.nodes {
            if node.xyz.iter().any(|v| !v.is_finite()) {
                return Err(GraphError::BadPosition(node.id));
            }
            if index.contains_key(&node.id) {
                return Err(GraphError::DuplicateNode(node.id));
            }
            let ix = graph.add_node(node.id.clone());
            index.insert(node.id, ix);
            positions.push(node.xyz);
        }
        for [a, b] in &record.edges {
            let ia = *index
                .get(a)
                .ok_or_else(|| GraphError::UnknownNode(a.clone()))?;
            let ib = *index
                .get(b)
                .ok_or_else(|| GraphError::UnknownNode(b.clone()))?;
            let w = euclidean(positions[ia.index()], positions[ib.index()]);
            if w <= 0.0 {
                return Err(GraphError::ZeroLengthEdge(a.clone(), b.clone()));
            }
            graph.update_edge(ia, ib, w);
        }
        let distances = (0..graph.node_count()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            graph,
            index,
            positions,
            edges: record.edges,
            distances,
        })
    }

    pub fn to_record(&self) -> GraphRecord {
        GraphRecord {
            nodes: self
                .graph
                .node_indices()
                .map(|ix| NodeRecord {
                    id: self.graph[ix].clone(),
                    xyz: self.positions[ix.index()],
                })
                .collect(),
            edges: self.edges.clone(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn ix(&self, id: &str) -> Result<NodeIndex, GraphError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Result<[f64; 3], GraphError> {
        Ok(self.positions[self.ix(id)?.index()])
    }

    /// Neighbor ids, sorted.
    pub fn neighbors(&self, id: &str) -> Result<Vec<&str>, GraphError> {
        let ix = self.ix(id)?;
        let mut out: Vec<&str> = self
            .graph
            .neighbors(ix)
            .map(|n| self.graph[n].as_str())
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    pub fn adjacent(&self, a: &str, b: &str) -> Result<bool, GraphError> {
        Ok(self.graph.contains_edge(self.ix(a)?, self.ix(b)?))
    }

    fn distances_from(&self, source: NodeIndex) -> &Arc<[f64]> {
        self.distances[source.index()].get_or_init(|| {
            let reached = dijkstra(&self.graph, source, None, |e| *e.weight());
            let mut table = vec![f64::INFINITY; self.graph.node_count()];
            for (ix, d) in reached {
                table[ix.index()] = d;
            }
            table.into()
        })
    }

    /// Shortest-path length; infinite between disconnected components.
    pub fn geodesic(&self, a: &str, b: &str) -> Result<f64, GraphError> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        Ok(self.distances_from(ia)[ib.index()])
    }

    /// Checks that `nodes` is non-empty, known, and steps only along edges.
    pub fn check_trajectory(&self, nodes: &[String]) -> Result<(), GraphError> {
        let first = nodes.first().ok_or(GraphError::EmptyTrajectory)?;
        self.ix(first)?;
        for pair in nodes.windows(2) {
            if !self.adjacent(&pair[0], &pair[1])? {
                return Err(GraphError::NotAdjacent(pair[0].clone(), pair[1].clone()));
            }
        }
        Ok(())
    }

    /// Length of a validated trajectory.
    pub fn path_length(&self, nodes: &[String]) -> Result<f64, GraphError> {
        self.check_trajectory(nodes)?;
        let mut total = 0.0;
        for pair in nodes.windows(2) {
            let (a, b) = (self.ix(&pair[0])?, self.ix(&pair[1])?);
            let e = self.graph.find_edge(a, b).expect("checked adjacency");
            total += self.graph[e];
        }
        Ok(total)
    }
}

/// Free-function form of [`NavGraph::geodesic`].
pub fn geodesic(graph: &NavGraph, a: &str, b: &str) -> Result<f64, GraphError> {
    graph.geodesic(a, b)
}

fn last(traj: &[String]) -> Result<&str, GraphError> {
    traj.last()
        .map(String::as_str)
        .ok_or(GraphError::EmptyTrajectory)
}

fn check_start(traj: &[String], start: &str) -> Result<(), GraphError> {
    match traj.first() {
        None => Err(GraphError::EmptyTrajectory),
        Some(first) if first != start => Err(GraphError::TrajectoryStartMismatch {
            expected: start.to_string(),
            found: first.clone(),
        }),
        Some(_) => Ok(()),
    }
}

/// Stopped within `threshold` meters (inclusive) of the goal.
pub fn success(
    graph: &NavGraph,
    traj: &[String],
    goal: &str,
    threshold: f64,
) -> Result<bool, GraphError> {
    graph.check_trajectory(traj)?;
    Ok(graph.geodesic(last(traj)?, goal)? <= threshold)
}

/// Success weighted by `d* / max(d*, traversed length)`.
pub fn spl(
    graph: &NavGraph,
    traj: &[String],
    start: &str,
    goal: &str,
    threshold: f64,
) -> Result<f64, GraphError> {
    check_start(traj, start)?;
    let ok = success(graph, traj, goal, threshold)?;
    if !ok {
        return Ok(0.0);
    }
    let shortest = graph.geodesic(start, goal)?;
    if shortest == 0.0 {
        return Ok(1.0);
    }
    let length = graph.path_length(traj)?;
    Ok(shortest / shortest.max(length))
}

/// Dynamic time warping cost between two node sequences under geodesic
/// distance, with both sequences fully consumed.
pub fn dtw(graph: &NavGraph, query: &[String], reference: &[String]) -> Result<f64, GraphError> {
    if query.is_empty() || reference.is_empty() {
        return Err(GraphError::EmptyTrajectory);
    }
    let q: Vec<NodeIndex> = query
        .iter()
        .map(|id| graph.ix(id))
        .collect::<Result<_, _>>()?;
    let tables: Vec<&Arc<[f64]>> = reference
        .iter()
        .map(|id| graph.ix(id).map(|ix| graph.distances_from(ix)))
        .collect::<Result<_, _>>()?;
    let m = reference.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut row = vec![0.0; m];
    for (i, qi) in q.iter().enumerate() {
        for j in 0..m {
            let cost = tables[j][qi.index()];
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => row[j - 1],
                (_, 0) => prev[0],
                _ => prev[j - 1].min(prev[j]).min(row[j - 1]),
            };
            row[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut row);
    }
    Ok(prev[m - 1])
}

/// `exp(-DTW / (|reference| * threshold))`.
pub fn ndtw(
    graph: &NavGraph,
    traj: &[String],
    reference: &[String],
    threshold: f64,
) -> Result<f64, GraphError> {
    graph.check_trajectory(traj)?;
    graph.check_trajectory(reference)?;
    let cost = dtw(graph, traj, reference)?;
    Ok((-cost / (reference.len() as f64 * threshold)).exp())
}

/// Reduction in geodesic distance to the goal between the start and the
/// stopping node.
pub fn goal_progress(
    graph: &NavGraph,
    traj: &[String],
    start: &str,
    goal: &str,
) -> Result<f64, GraphError> {
    check_start(traj, start)?;
    graph.check_trajectory(traj)?;
    Ok(graph.geodesic(start, goal)? - graph.geodesic(last(traj)?, goal)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub spl: f64,
    pub ndtw: f64,
    pub gp: f64,
}

pub fn evaluate_episode(
    graph: &NavGraph,
    traj: &[String],
    start: &str,
    goal: &str,
    reference: &[String],
    threshold: f64,
) -> Result<EpisodeResult, GraphError> {
    Ok(EpisodeResult {
        success: success(graph, traj, goal, threshold)?,
        spl: spl(graph, traj, start, goal, threshold)?,
        ndtw: ndtw(graph, traj, reference, threshold)?,
        gp: goal_progress(graph, traj, start, goal)?,
    })
}

/// Mean metrics over episodes; `sr` is a percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub gp: f64,
}

pub fn aggregate(results: &[EpisodeResult]) -> Result<MetricSummary, GraphError> {
    if results.is_empty() {
        return Err(GraphError::EmptyResultSet);
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(MetricSummary {
        episodes: results.len(),
        sr: 100.0 * mean(&|r| if r.success { 1.0 } else { 0.0 }),
        spl: mean(&|r| r.spl),
        ndtw: mean(&|r| r.ndtw),
        gp: mean(&|r| r.gp),
    })
}

/// Line shape of `trajectories.jsonl`. `reference`, when present, is the
/// ground-truth path used for nDTW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub instruction_id: String,
    pub nodes: Vec<String>,
    pub start: String,
    pub goal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<String>>,
}
