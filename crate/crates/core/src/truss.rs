//! Truss graphs, channel assignments and the mirror-symmetry machinery.
//!
//! A [`TrussGraph`] is immutable once built. Edge adjacency (two beams share a
//! joint) is what "connected" means for a channel throughout this crate.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Default tolerance for matching a reflected vertex to its partner (m).
pub const MIRROR_TOLERANCE: f64 = 1e-6;

/// Channel label used for edges that have not been assigned yet.
pub const UNASSIGNED: i32 = -1;

#[derive(Debug, Error)]
pub enum TrussError {
    #[error("vertex {vertex} has no mirror partner within {tol} m")]
    UnmatchedVertex { vertex: usize, tol: f64 },
    #[error("edge {0} has no mirrored counterpart")]
    UnmatchedEdge(usize),
    #[error("mirror plane normal has zero length")]
    DegenerateNormal,
    #[error("edge {edge} references invalid vertices ({a}, {b})")]
    InvalidEdge { edge: usize, a: usize, b: usize },
    #[error("edges {first} and {second} connect the same vertices")]
    DuplicateEdge { first: usize, second: usize },
    #[error("truss graph is not connected")]
    Disconnected,
    #[error("n_channels must be positive")]
    NoChannels,
    #[error("invalid channel mirror map: {0}")]
    InvalidChannelMirror(String),
    #[error("fixed group {group} references vertex {vertex} out of range")]
    InvalidFixedGroup { group: usize, vertex: usize },
    #[error("center edge {0} out of range")]
    InvalidCenterEdge(usize),
    #[error("no edge carries channel {0}")]
    EmptyChannel(usize),
    #[error("failed to read truss file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse truss file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A plane given by a point on it and a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorPlane {
    pub point: Vec3,
    pub normal: Vec3,
}

impl MirrorPlane {
    pub fn new(point: Vec3, normal: Vec3) -> Result<Self, TrussError> {
        let len = normal.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(TrussError::DegenerateNormal);
        }
        Ok(Self {
            point,
            normal: normal / len,
        })
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.point).dot(&self.normal)
    }

    pub fn reflect_point(&self, p: &Vec3) -> Vec3 {
        p - self.normal * (2.0 * self.signed_distance(p))
    }

    /// Reflects a direction (velocity, displacement); the plane offset drops out.
    pub fn reflect_vector(&self, v: &Vec3) -> Vec3 {
        v - self.normal * (2.0 * v.dot(&self.normal))
    }
}

/// Mirror maps derived from geometry. Indices refer to the owning graph.
#[derive(Debug, Clone)]
pub struct MirrorMaps {
    pub plane: MirrorPlane,
    pub vertex_mirror: Vec<usize>,
    pub edge_mirror: Vec<usize>,
    pub channel_mirror: Vec<usize>,
    pub self_mirrored_edges: Vec<usize>,
    pub half_edges: Vec<usize>,
}

/// Truss structure: rest-pose geometry, beams, channel count and constraints.
#[derive(Debug, Clone)]
pub struct TrussGraph {
    vertices: Vec<Vec3>,
    edges: Vec<[usize; 2]>,
    n_channels: usize,
    mirror: Option<MirrorMaps>,
    fixed_groups: Vec<Vec<usize>>,
    center_edge: usize,
    // derived
    vertex_edges: Vec<Vec<usize>>,
    edge_neighbors: Vec<Vec<usize>>,
    all_edges: Vec<usize>,
}

/// Unvalidated truss description, as read from disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrussFile {
    pub vertices: Vec<[f64; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub n_channels: usize,
    #[serde(default)]
    pub mirror_plane: Option<PlaneSpec>,
    #[serde(default)]
    pub fixed_groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub center_edge: usize,
    #[serde(default)]
    pub channel_mirror: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl TrussFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrussError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn build(&self) -> Result<TrussGraph, TrussError> {
        let vertices = self.vertices.iter().map(|p| Vec3::from(*p)).collect();
        let graph = TrussGraph::new(
            vertices,
            self.edges.clone(),
            self.n_channels,
            self.fixed_groups.clone(),
            self.center_edge,
        )?;
        match &self.mirror_plane {
            Some(spec) => {
                let plane = MirrorPlane::new(spec.point.into(), spec.normal.into())?;
                graph.with_mirror(plane, MIRROR_TOLERANCE, self.channel_mirror.clone())
            }
            None => Ok(graph),
        }
    }
}

impl TrussGraph {
    /// Builds a graph without mirror symmetry. Edges are stored with the lower
    /// vertex index first.
    pub fn new(
        vertices: Vec<Vec3>,
        edges: Vec<[usize; 2]>,
        n_channels: usize,
        fixed_groups: Vec<Vec<usize>>,
        center_edge: usize,
    ) -> Result<Self, TrussError> {
        if n_channels == 0 {
            return Err(TrussError::NoChannels);
        }
        let n_v = vertices.len();
        let mut canonical = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashMap::new();
        for (i, &[a, b]) in edges.iter().enumerate() {
            if a >= n_v || b >= n_v || a == b {
                return Err(TrussError::InvalidEdge { edge: i, a, b });
            }
            let key = [a.min(b), a.max(b)];
            if let Some(&first) = seen.get(&key) {
                return Err(TrussError::DuplicateEdge { first, second: i });
            }
            seen.insert(key, i);
            canonical.push(key);
        }
        for (g, group) in fixed_groups.iter().enumerate() {
            if let Some(&v) = group.iter().find(|&&v| v >= n_v) {
                return Err(TrussError::InvalidFixedGroup { group: g, vertex: v });
            }
        }
        if !canonical.is_empty() && center_edge >= canonical.len() {
            return Err(TrussError::InvalidCenterEdge(center_edge));
        }

        let mut vertex_edges = vec![Vec::new(); n_v];
        for (i, &[a, b]) in canonical.iter().enumerate() {
            vertex_edges[a].push(i);
            vertex_edges[b].push(i);
        }
        let edge_neighbors = canonical
            .iter()
            .enumerate()
            .map(|(i, &[a, b])| {
                let mut n: Vec<usize> = vertex_edges[a]
                    .iter()
                    .chain(&vertex_edges[b])
                    .copied()
                    .filter(|&j| j != i)
                    .collect();
                n.sort_unstable();
                n.dedup();
                n
            })
            .collect();

        let graph = Self {
            vertices,
            all_edges: (0..canonical.len()).collect(),
            edges: canonical,
            n_channels,
            mirror: None,
            fixed_groups,
            center_edge,
            vertex_edges,
            edge_neighbors,
        };
        if !graph.is_connected() {
            return Err(TrussError::Disconnected);
        }
        Ok(graph)
    }

    /// Derives vertex, edge and channel mirror maps from a plane. `channel_mirror`
    /// overrides the default pairing (2k ↔ 2k+1, odd leftover self-mirrored).
    pub fn with_mirror(
        mut self,
        plane: MirrorPlane,
        tol: f64,
        channel_mirror: Option<Vec<usize>>,
    ) -> Result<Self, TrussError> {
        let n_v = self.vertices.len();
        let mut vertex_mirror = Vec::with_capacity(n_v);
        for (v, p) in self.vertices.iter().enumerate() {
            let r = plane.reflect_point(p);
            let partner = self
                .vertices
                .iter()
                .enumerate()
                .map(|(u, q)| (u, (q - r).norm()))
                .filter(|&(_, d)| d <= tol)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(u, _)| u)
                .ok_or(TrussError::UnmatchedVertex { vertex: v, tol })?;
            vertex_mirror.push(partner);
        }
        if let Some(v) = (0..n_v).find(|&v| vertex_mirror[vertex_mirror[v]] != v) {
            return Err(TrussError::UnmatchedVertex { vertex: v, tol });
        }

        let index: std::collections::HashMap<[usize; 2], usize> = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i))
            .collect();
        let mut edge_mirror = Vec::with_capacity(self.edges.len());
        for &[a, b] in &self.edges {
            let (ma, mb) = (vertex_mirror[a], vertex_mirror[b]);
            let key = [ma.min(mb), ma.max(mb)];
            let m = *index
                .get(&key)
                .ok_or(TrussError::UnmatchedEdge(edge_mirror.len()))?;
            edge_mirror.push(m);
        }

        let channel_mirror = match channel_mirror {
            Some(map) => {
                validate_involution(&map, self.n_channels)?;
                map
            }
            None => default_channel_mirror(self.n_channels),
        };

        let self_mirrored_edges: Vec<usize> = (0..self.edges.len())
            .filter(|&e| edge_mirror[e] == e)
            .collect();
        let half_edges = (0..self.edges.len())
            .filter(|&e| {
                let m = edge_mirror[e];
                if m == e {
                    return true;
                }
                let side = plane.signed_distance(&self.edge_midpoint(e));
                if side.abs() > tol {
                    side > 0.0
                } else {
                    e < m
                }
            })
            .collect();

        self.mirror = Some(MirrorMaps {
            plane,
            vertex_mirror,
            edge_mirror,
            channel_mirror,
            self_mirrored_edges,
            half_edges,
        });
        Ok(self)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn mirror(&self) -> Option<&MirrorMaps> {
        self.mirror.as_ref()
    }

    pub fn fixed_groups(&self) -> &[Vec<usize>] {
        &self.fixed_groups
    }

    pub fn center_edge(&self) -> usize {
        self.center_edge
    }

    /// Edges sharing a vertex with `edge`, excluding itself.
    pub fn edge_neighbors(&self, edge: usize) -> &[usize] {
        &self.edge_neighbors[edge]
    }

    pub fn vertex_edges(&self, vertex: usize) -> &[usize] {
        &self.vertex_edges[vertex]
    }

    pub fn edge_mirror(&self, edge: usize) -> usize {
        self.mirror.as_ref().map_or(edge, |m| m.edge_mirror[edge])
    }

    pub fn channel_mirror(&self, channel: usize) -> usize {
        self.mirror.as_ref().map_or(channel, |m| m.channel_mirror[channel])
    }

    pub fn vertex_mirror(&self, vertex: usize) -> usize {
        self.mirror.as_ref().map_or(vertex, |m| m.vertex_mirror[vertex])
    }

    /// Edges the GA operators act on: the half graph when mirrored, every edge otherwise.
    pub fn half_edges(&self) -> &[usize] {
        self.mirror.as_ref().map_or(&self.all_edges, |m| &m.half_edges)
    }

    pub fn is_self_mirrored_edge(&self, edge: usize) -> bool {
        self.edge_mirror(edge) == edge
    }

    pub fn is_self_mirrored_channel(&self, channel: usize) -> bool {
        self.channel_mirror(channel) == channel
    }

    pub fn edge_midpoint(&self, edge: usize) -> Vec3 {
        let [a, b] = self.edges[edge];
        (self.vertices[a] + self.vertices[b]) * 0.5
    }

    pub fn rest_length(&self, edge: usize) -> f64 {
        let [a, b] = self.edges[edge];
        (self.vertices[b] - self.vertices[a]).norm()
    }

    /// Same topology with new vertex positions; mirror maps are rebuilt from
    /// `plane` when given.
    pub fn with_vertices(
        &self,
        vertices: Vec<Vec3>,
        plane: Option<MirrorPlane>,
    ) -> Result<Self, TrussError> {
        let graph = Self::new(
            vertices,
            self.edges.clone(),
            self.n_channels,
            self.fixed_groups.clone(),
            self.center_edge,
        )?;
        match (plane, &self.mirror) {
            (Some(plane), Some(m)) => {
                graph.with_mirror(plane, MIRROR_TOLERANCE, Some(m.channel_mirror.clone()))
            }
            (Some(plane), None) => graph.with_mirror(plane, MIRROR_TOLERANCE, None),
            (None, _) => Ok(graph),
        }
    }

    fn is_connected(&self) -> bool {
        if self.edges.is_empty() {
            return self.vertices.len() <= 1;
        }
        let mut seen = vec![false; self.vertices.len()];
        let mut queue = VecDeque::from([self.edges[0][0]]);
        seen[self.edges[0][0]] = true;
        while let Some(v) = queue.pop_front() {
            for &e in &self.vertex_edges[v] {
                for &u in &self.edges[e] {
                    if !seen[u] {
                        seen[u] = true;
                        queue.push_back(u);
                    }
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Default channel pairing: 2k ↔ 2k+1, with the last channel self-mirrored when
/// the count is odd.
pub fn default_channel_mirror(n_channels: usize) -> Vec<usize> {
    (0..n_channels)
        .map(|c| {
            let partner = c ^ 1;
            if partner < n_channels {
                partner
            } else {
                c
            }
        })
        .collect()
}

fn validate_involution(map: &[usize], n: usize) -> Result<(), TrussError> {
    if map.len() != n {
        return Err(TrussError::InvalidChannelMirror(format!(
            "expected {n} entries, got {}",
            map.len()
        )));
    }
    for (c, &m) in map.iter().enumerate() {
        if m >= n || map[m] != c {
            return Err(TrussError::InvalidChannelMirror(format!(
                "channel {c} maps to {m}, which is not an involution"
            )));
        }
    }
    Ok(())
}

/// Per-edge channel labels `C`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelAssignment {
    channels: Vec<usize>,
}

impl ChannelAssignment {
    pub fn new(channels: Vec<usize>) -> Self {
        Self { channels }
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn channel(&self, edge: usize) -> usize {
        self.channels[edge]
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Image of this assignment under the mirror: edge ψ(e) receives φ(c_e).
    pub fn mirrored(&self, graph: &TrussGraph) -> Self {
        let mut out = self.channels.clone();
        for (e, &c) in self.channels.iter().enumerate() {
            out[graph.edge_mirror(e)] = graph.channel_mirror(c);
        }
        Self { channels: out }
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.channels
    }
}

/// Label lookup shared by full assignments and partially built ones.
pub trait ChannelLabels {
    /// Channel carried by `edge`, or `None` if unassigned.
    fn label(&self, edge: usize) -> Option<usize>;
}

impl ChannelLabels for ChannelAssignment {
    fn label(&self, edge: usize) -> Option<usize> {
        Some(self.channels[edge])
    }
}

impl ChannelLabels for [i32] {
    fn label(&self, edge: usize) -> Option<usize> {
        usize::try_from(self[edge]).ok()
    }
}

impl ChannelLabels for Vec<i32> {
    fn label(&self, edge: usize) -> Option<usize> {
        self.as_slice().label(edge)
    }
}

impl ChannelLabels for [usize] {
    fn label(&self, edge: usize) -> Option<usize> {
        Some(self[edge])
    }
}

/// Channels carried by assigned edges that share a vertex with `edge`.
/// Returned sorted and deduplicated.
pub fn channels_incident_edge<L: ChannelLabels + ?Sized>(
    graph: &TrussGraph,
    labels: &L,
    edge: usize,
) -> Vec<usize> {
    let mut out: Vec<usize> = graph
        .edge_neighbors(edge)
        .iter()
        .filter_map(|&n| labels.label(n))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Breadth-first search over the edges carrying `channel`, using shared-vertex
/// adjacency.
pub fn channel_subgraph_connected<L: ChannelLabels + ?Sized>(
    graph: &TrussGraph,
    labels: &L,
    channel: usize,
) -> Result<bool, TrussError> {
    let members: Vec<usize> = (0..graph.n_edges())
        .filter(|&e| labels.label(e) == Some(channel))
        .collect();
    let Some(&start) = members.first() else {
        return Err(TrussError::EmptyChannel(channel));
    };
    let mut visited = vec![false; graph.n_edges()];
    visited[start] = true;
    let mut reached = 1;
    let mut queue = VecDeque::from([start]);
    while let Some(e) = queue.pop_front() {
        for &n in graph.edge_neighbors(e) {
            if !visited[n] && labels.label(n) == Some(channel) {
                visited[n] = true;
                reached += 1;
                queue.push_back(n);
            }
        }
    }
    Ok(reached == members.len())
}

/// One named check of the assignment invariant suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        if self.detail.is_empty() {
            write!(f, "{tag} {}", self.name)
        } else {
            write!(f, "{tag} {}: {}", self.name, self.detail)
        }
    }
}

/// Runs every assignment invariant: length, label range, channel coverage,
/// per-channel connectivity and mirror symmetry.
pub fn check_assignment(graph: &TrussGraph, channels: &[usize]) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let length_ok = channels.len() == graph.n_edges();
    out.push(CheckResult {
        name: "length",
        passed: length_ok,
        detail: if length_ok {
            String::new()
        } else {
            format!("expected {} entries, got {}", graph.n_edges(), channels.len())
        },
    });
    let bad: Vec<usize> = channels
        .iter()
        .copied()
        .filter(|&c| c >= graph.n_channels())
        .collect();
    out.push(CheckResult {
        name: "channel_range",
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            String::new()
        } else {
            format!("labels out of range: {bad:?}")
        },
    });
    if !length_ok || !bad.is_empty() {
        return out;
    }

    let missing: Vec<usize> = (0..graph.n_channels())
        .filter(|c| !channels.contains(c))
        .collect();
    out.push(CheckResult {
        name: "coverage",
        passed: missing.is_empty(),
        detail: if missing.is_empty() {
            String::new()
        } else {
            format!("channels without edges: {missing:?}")
        },
    });

    let split: Vec<usize> = (0..graph.n_channels())
        .filter(|&c| matches!(channel_subgraph_connected(graph, channels, c), Ok(false)))
        .collect();
    out.push(CheckResult {
        name: "connectivity",
        passed: split.is_empty(),
        detail: if split.is_empty() {
            String::new()
        } else {
            format!("disconnected channels: {split:?}")
        },
    });

    let asym: Vec<usize> = (0..graph.n_edges())
        .filter(|&e| channels[graph.edge_mirror(e)] != graph.channel_mirror(channels[e]))
        .collect();
    out.push(CheckResult {
        name: "symmetry",
        passed: asym.is_empty(),
        detail: if asym.is_empty() {
            String::new()
        } else {
            format!("edges violating mirror symmetry: {asym:?}")
        },
    });
    out
}

pub fn is_valid_assignment(graph: &TrussGraph, channels: &[usize]) -> bool {
    check_assignment(graph, channels).iter().all(|c| c.passed)
}
