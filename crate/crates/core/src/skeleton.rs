//! Skeleton topology, the three hypergraph orders over it, and the pose
//! sequence container every other module exchanges.
//!
//! Joints follow the COCO-17 ordering used by common 2D pose detectors.

use std::collections::{HashSet, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COCO_JOINTS: usize = 17;

/// Smallest accepted |w| when dividing out the homogeneous coordinate.
pub const W_MIN: f64 = 1e-6;

pub const COCO_JOINT_NAMES: [&str; COCO_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const COCO_BONES: [(usize, usize); 19] = [
    (0, 1),
    (0, 2),
    (1, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

pub const PART_HYPEREDGES: [(&str, &[usize]); 6] = [
    ("head", &[0, 1, 2, 3, 4]),
    ("torso", &[5, 6, 11, 12]),
    ("left_arm", &[5, 7, 9]),
    ("right_arm", &[6, 8, 10]),
    ("left_leg", &[11, 13, 15]),
    ("right_leg", &[12, 14, 16]),
];

pub const BODY_HYPEREDGES: [(&str, &[usize]); 3] = [
    ("upper", &[0, 1, 2, 3, 4, 5, 6]),
    ("mid", &[5, 6, 7, 8, 9, 10, 11, 12]),
    ("lower", &[11, 12, 13, 14, 15, 16]),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub joint_names: Vec<String>,
    pub bones: Vec<(usize, usize)>,
}

impl SkeletonTopology {
    pub fn new(joint_names: Vec<String>, bones: Vec<(usize, usize)>) -> Result<Self> {
        let topo = SkeletonTopology { joint_names, bones };
        topo.validate()?;
        Ok(topo)
    }

    pub fn coco17() -> Self {
        SkeletonTopology {
            joint_names: COCO_JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            bones: COCO_BONES.to_vec(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joint_count();
        if n == 0 {
            return Err(Error::Topology("no joints".into()));
        }
        let mut seen = HashSet::new();
        for &(a, b) in &self.bones {
            if a == b {
                return Err(Error::Topology(format!("self-loop bone ({a},{b})")));
            }
            if a >= n || b >= n {
                return Err(Error::Topology(format!("bone ({a},{b}) out of range for {n} joints")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Topology(format!("duplicate bone ({a},{b})")));
            }
        }
        let adj = self.adjacency_lists();
        let mut visited = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(j) = visited.iter().position(|v| !v) {
            return Err(Error::Topology(format!("joint {j} unreachable from joint 0")));
        }
        Ok(())
    }

    fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.joint_count()];
        for &(a, b) in &self.bones {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Dense symmetric 0/1 bone adjacency A.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let n = self.joint_count();
        let mut a = DMatrix::zeros(n, n);
        for &(i, j) in &self.bones {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }
}

/// Node-hyperedge incidence matrix for one correlation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypergraphSpec {
    pub order: u8,
    pub hyperedge_names: Vec<String>,
    nodes: usize,
    /// Row-major N x M, entries 0 or 1.
    incidence: Vec<u8>,
}

impl HypergraphSpec {
    /// Builds from per-hyperedge member lists and checks every invariant.
    pub fn from_members(order: u8, nodes: usize, edges: &[(String, Vec<usize>)]) -> Result<Self> {
        let m = edges.len();
        let mut incidence = vec![0u8; nodes * m];
        for (e, (name, members)) in edges.iter().enumerate() {
            for &i in members {
                if i >= nodes {
                    return Err(Error::Hypergraph(format!("hyperedge {name} references node {i} >= {nodes}")));
                }
                incidence[i * m + e] = 1;
            }
        }
        let spec = HypergraphSpec {
            order,
            hyperedge_names: edges.iter().map(|(n, _)| n.clone()).collect(),
            nodes,
            incidence,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(Error::Hypergraph(format!("order {} not in 1..=3", self.order)));
        }
        for e in 0..self.hyperedge_count() {
            let size = self.hyperedge_size(e);
            if size < 2 {
                return Err(Error::Hypergraph(format!("hyperedge {e} has {size} members")));
            }
            if self.order == 1 && size != 2 {
                return Err(Error::Hypergraph(format!("order-1 hyperedge {e} has {size} members")));
            }
        }
        for i in 0..self.nodes {
            if self.node_degree(i) == 0 {
                return Err(Error::IsolatedElement { kind: "node", index: i });
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn hyperedge_count(&self) -> usize {
        self.hyperedge_names.len()
    }

    pub fn get(&self, node: usize, edge: usize) -> u8 {
        self.incidence[node * self.hyperedge_count() + edge]
    }

    pub fn node_degree(&self, node: usize) -> usize {
        (0..self.hyperedge_count()).map(|e| self.get(node, e) as usize).sum()
    }

    pub fn hyperedge_size(&self, edge: usize) -> usize {
        (0..self.nodes).map(|i| self.get(i, edge) as usize).sum()
    }

    pub fn members(&self, edge: usize) -> Vec<usize> {
        (0..self.nodes).filter(|&i| self.get(i, edge) == 1).collect()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.nodes, self.hyperedge_count(), |i, e| self.get(i, e) as f64)
    }

    /// Unchecked construction from a raw 0/1 matrix, used to exercise the
    /// degree computations on invalid inputs.
    pub fn from_raw(order: u8, nodes: usize, hyperedges: usize, incidence: Vec<u8>) -> Self {
        assert_eq!(incidence.len(), nodes * hyperedges);
        HypergraphSpec {
            order,
            hyperedge_names: (0..hyperedges).map(|e| format!("e{e}")).collect(),
            nodes,
            incidence,
        }
    }
}

pub fn build_bone_graph(topology: &SkeletonTopology) -> Result<HypergraphSpec> {
    topology.validate()?;
    let edges: Vec<(String, Vec<usize>)> = topology
        .bones
        .iter()
        .map(|&(a, b)| (format!("{}-{}", topology.joint_names[a], topology.joint_names[b]), vec![a, b]))
        .collect();
    HypergraphSpec::from_members(1, topology.joint_count(), &edges)
}

fn require_coco(topology: &SkeletonTopology) -> Result<()> {
    if topology.joint_count() != COCO_JOINTS {
        return Err(Error::UnsupportedTopology { expected: COCO_JOINTS, got: topology.joint_count() });
    }
    Ok(())
}

fn preset(order: u8, table: &[(&str, &[usize])]) -> Result<HypergraphSpec> {
    let edges: Vec<(String, Vec<usize>)> = table.iter().map(|(n, m)| (n.to_string(), m.to_vec())).collect();
    HypergraphSpec::from_members(order, COCO_JOINTS, &edges)
}

pub fn build_part_hypergraph(topology: &SkeletonTopology) -> Result<HypergraphSpec> {
    require_coco(topology)?;
    preset(2, &PART_HYPEREDGES)
}

pub fn build_body_hypergraph(topology: &SkeletonTopology) -> Result<HypergraphSpec> {
    require_coco(topology)?;
    preset(3, &BODY_HYPEREDGES)
}

/// The joint, part and body hypergraphs in order.
pub fn canonical_hypergraphs(topology: &SkeletonTopology) -> Result<[HypergraphSpec; 3]> {
    Ok([build_bone_graph(topology)?, build_part_hypergraph(topology)?, build_body_hypergraph(topology)?])
}

/// T frames of N homogeneous image points `(x, y, w)` plus per-joint
/// detector confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    joints: usize,
    coords: Vec<[f64; 3]>,
    confidence: Vec<f64>,
}

impl PoseSequence {
    pub fn new(joints: usize, coords: Vec<[f64; 3]>, confidence: Vec<f64>) -> Result<Self> {
        if joints == 0 || coords.is_empty() || coords.len() % joints != 0 {
            return Err(Error::Contract(format!(
                "pose sequence needs T >= 1 frames of {joints} joints, got {} points",
                coords.len()
            )));
        }
        if confidence.len() != coords.len() {
            return Err(Error::Contract("confidence length differs from coordinate length".into()));
        }
        if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Contract(format!("confidence {c} outside [0, 1]")));
        }
        Ok(PoseSequence { joints, coords, confidence })
    }

    /// Confidence defaults to 1.
    pub fn from_coords(joints: usize, coords: Vec<[f64; 3]>) -> Result<Self> {
        let conf = vec![1.0; coords.len()];
        Self::new(joints, coords, conf)
    }

    /// From `(x, y)` image points; w = 1.
    pub fn from_xy(joints: usize, xy: &[[f64; 2]], confidence: Option<Vec<f64>>) -> Result<Self> {
        let coords = xy.iter().map(|p| [p[0], p[1], 1.0]).collect::<Vec<_>>();
        let conf = confidence.unwrap_or_else(|| vec![1.0; coords.len()]);
        Self::new(joints, coords, conf)
    }

    pub fn frames(&self) -> usize {
        self.coords.len() / self.joints
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn point(&self, t: usize, i: usize) -> [f64; 3] {
        self.coords[t * self.joints + i]
    }

    pub fn conf(&self, t: usize, i: usize) -> f64 {
        self.confidence[t * self.joints + i]
    }

    pub fn frame(&self, t: usize) -> &[[f64; 3]] {
        &self.coords[t * self.joints..(t + 1) * self.joints]
    }

    pub fn is_normalized(&self) -> bool {
        self.coords.iter().all(|p| p[2] == 1.0)
    }

    /// Frames `start..start + len`, wrapping around the end of the sequence.
    pub fn window_looped(&self, start: usize, len: usize) -> PoseSequence {
        let t_total = self.frames();
        let n = self.joints;
        let mut coords = Vec::with_capacity(len * n);
        let mut conf = Vec::with_capacity(len * n);
        for k in 0..len {
            let t = (start + k) % t_total;
            coords.extend_from_slice(self.frame(t));
            conf.extend_from_slice(&self.confidence[t * n..(t + 1) * n]);
        }
        PoseSequence { joints: n, coords, confidence: conf }
    }

    pub fn map_coords(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> PoseSequence {
        PoseSequence {
            joints: self.joints,
            coords: self.coords.iter().map(|&p| f(p)).collect(),
            confidence: self.confidence.clone(),
        }
    }
}

/// Divides every point by its homogeneous coordinate.
pub fn normalize_homogeneous(seq: &PoseSequence) -> Result<PoseSequence> {
    let n = seq.joints;
    let mut coords = Vec::with_capacity(seq.coords.len());
    for (k, p) in seq.coords.iter().enumerate() {
        let w = p[2];
        if !(w.abs() > W_MIN) {
            return Err(Error::DegenerateDepth { frame: k / n, joint: k % n, w });
        }
        if w == 1.0 {
            coords.push(*p);
        } else {
            coords.push([p[0] / w, p[1] / w, 1.0]);
        }
    }
    Ok(PoseSequence { joints: n, coords, confidence: seq.confidence.clone() })
}

#[derive(Debug, Serialize, Deserialize)]
struct HyperedgeEntry {
    name: String,
    members: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HypergraphEntry {
    order: u8,
    hyperedges: Vec<HyperedgeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TopologyFile {
    joint_names: Vec<String>,
    bones: Vec<[usize; 2]>,
    hypergraphs: Vec<HypergraphEntry>,
}

/// Human-readable TOML dump of a topology and its hypergraph presets.
pub fn topology_to_toml(topology: &SkeletonTopology, hypergraphs: &[HypergraphSpec]) -> String {
    let file = TopologyFile {
        joint_names: topology.joint_names.clone(),
        bones: topology.bones.iter().map(|&(a, b)| [a, b]).collect(),
        hypergraphs: hypergraphs
            .iter()
            .map(|h| HypergraphEntry {
                order: h.order,
                hyperedges: (0..h.hyperedge_count())
                    .map(|e| HyperedgeEntry { name: h.hyperedge_names[e].clone(), members: h.members(e) })
                    .collect(),
            })
            .collect(),
    };
    toml::to_string(&file).expect("topology serializes")
}

pub fn topology_from_toml(text: &str) -> Result<(SkeletonTopology, Vec<HypergraphSpec>)> {
    let file: TopologyFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let topo = SkeletonTopology::new(file.joint_names, file.bones.iter().map(|b| (b[0], b[1])).collect())?;
    let n = topo.joint_count();
    let hgs = file
        .hypergraphs
        .iter()
        .map(|h| {
            let edges: Vec<(String, Vec<usize>)> =
                h.hyperedges.iter().map(|e| (e.name.clone(), e.members.clone())).collect();
            HypergraphSpec::from_members(h.order, n, &edges)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((topo, hgs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("j{i}")).collect()
    }

    #[test]
    fn single_edge_bone_graph() {
        let topo = SkeletonTopology::new(names(2), vec![(0, 1)]).unwrap();
        let h = build_bone_graph(&topo).unwrap();
        assert_eq!(h.matrix(), DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
    }

    #[test]
    fn canonical_bone_graph_shape() {
        let h = build_bone_graph(&SkeletonTopology::coco17()).unwrap();
        assert_eq!((h.node_count(), h.hyperedge_count()), (17, 19));
        assert!((0..19).all(|e| h.hyperedge_size(e) == 2));
        for (e, &(a, b)) in COCO_BONES.iter().enumerate() {
            assert_eq!(h.members(e), vec![a.min(b), a.max(b)]);
        }
    }

    #[test]
    fn rejects_bad_topologies() {
        assert!(matches!(SkeletonTopology::new(names(2), vec![(0, 0)]), Err(Error::Topology(_))));
        assert!(matches!(SkeletonTopology::new(names(3), vec![(0, 1)]), Err(Error::Topology(_))));
        assert!(matches!(SkeletonTopology::new(names(2), vec![(0, 1), (1, 0)]), Err(Error::Topology(_))));
        assert!(matches!(SkeletonTopology::new(names(2), vec![(0, 2)]), Err(Error::Topology(_))));
        let disconnected = SkeletonTopology { joint_names: names(3), bones: vec![(0, 1)] };
        assert!(build_bone_graph(&disconnected).is_err());
    }

    #[test]
    fn bone_graph_reproduces_adjacency() {
        let topo = SkeletonTopology::coco17();
        let h = build_bone_graph(&topo).unwrap().matrix();
        let hht = &h * h.transpose();
        let a = &hht - DMatrix::from_diagonal(&hht.diagonal());
        assert_eq!(a, topo.adjacency());
    }

    #[test]
    fn part_hypergraph() {
        let h = build_part_hypergraph(&SkeletonTopology::coco17()).unwrap();
        assert_eq!((h.node_count(), h.hyperedge_count()), (17, 6));
        assert!((0..17).all(|i| h.node_degree(i) >= 1));
        let left_leg = h.hyperedge_names.iter().position(|n| n == "left_leg").unwrap();
        assert_eq!(h.members(left_leg), vec![11, 13, 15]);
    }

    #[test]
    fn body_hypergraph() {
        let h = build_body_hypergraph(&SkeletonTopology::coco17()).unwrap();
        assert_eq!((h.node_count(), h.hyperedge_count()), (17, 3));
        assert_eq!(h.hyperedge_size(0), 7);
        assert!((0..17).all(|i| h.node_degree(i) >= 1));
    }

    #[test]
    fn presets_need_17_joints() {
        let topo = SkeletonTopology::new(names(2), vec![(0, 1)]).unwrap();
        assert!(matches!(build_part_hypergraph(&topo), Err(Error::UnsupportedTopology { .. })));
        assert!(matches!(build_body_hypergraph(&topo), Err(Error::UnsupportedTopology { .. })));
    }

    #[test]
    fn normalization_cases() {
        let seq = PoseSequence::from_coords(1, vec![[2.0, 4.0, 2.0]]).unwrap();
        assert_eq!(normalize_homogeneous(&seq).unwrap().point(0, 0), [1.0, 2.0, 1.0]);

        let unit = PoseSequence::from_coords(1, vec![[3.5, -1.25, 1.0]]).unwrap();
        assert_eq!(normalize_homogeneous(&unit).unwrap(), unit);

        let bad = PoseSequence::from_coords(2, vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1e-12]])
            .unwrap();
        match normalize_homogeneous(&bad) {
            Err(Error::DegenerateDepth { frame, joint, .. }) => assert_eq!((frame, joint), (1, 1)),
            other => panic!("expected degenerate depth, got {other:?}"),
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let seq = PoseSequence::from_coords(2, vec![[1.0, 2.0, 3.0], [-4.0, 5.0, -0.5]]).unwrap();
        let once = normalize_homogeneous(&seq).unwrap();
        assert_eq!(normalize_homogeneous(&once).unwrap(), once);
    }

    #[test]
    fn topology_file_round_trip() {
        let topo = SkeletonTopology::coco17();
        let hgs = canonical_hypergraphs(&topo).unwrap();
        let text = topology_to_toml(&topo, &hgs);
        let (topo2, hgs2) = topology_from_toml(&text).unwrap();
        assert_eq!(topo, topo2);
        assert_eq!(hgs.to_vec(), hgs2);
        assert_eq!(topology_to_toml(&topo2, &hgs2), text);
    }
}
