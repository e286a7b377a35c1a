//! The directed skeleton graph: joints are nodes, bones are edges directed
//! parent → child, rooted at the hip.
//!
//! Edges are indexed by the dense index of their child node among non-root
//! nodes, giving a canonical, invertible node ↔ edge correspondence.
//! [`IncidenceMaps`] precomputes the gather patterns the graph convolutions
//! need: each node's incoming edge and outgoing edge set, and each edge's
//! source/target node.

use std::rc::Rc;

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// A rooted directed tree over named joints.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectedSkeleton {
    joint_names: Vec<String>,
    parent: Vec<Option<usize>>,
    root: usize,
}

impl DirectedSkeleton {
    /// Validates a parent array: exactly one root, no cycles, every joint
    /// reachable from the root. Errors name the offending joint.
    pub fn from_parents(joint_names: Vec<String>, parent: Vec<Option<usize>>) -> Result<Self> {
        let j = parent.len();
        if j == 0 {
            return Err(Error::Skeleton("no joints".into()));
        }
        if joint_names.len() != j {
            return Err(Error::Skeleton(format!(
                "{} joint names for {} joints",
                joint_names.len(),
                j
            )));
        }
        let mut root = None;
        for (i, p) in parent.iter().enumerate() {
            match p {
                None => match root {
                    None => root = Some(i),
                    Some(_) => {
                        return Err(Error::Skeleton(format!(
                            "multiple roots: joint {} also has no parent",
                            joint_names[i]
                        )))
                    }
                },
                Some(p) if *p >= j => {
                    return Err(Error::Skeleton(format!(
                        "joint {} has out-of-range parent index {p}",
                        joint_names[i]
                    )))
                }
                Some(_) => {}
            }
        }
        let Some(root) = root else {
            return Err(Error::Skeleton(format!(
                "no root: every joint has a parent (cycle through joint {})",
                joint_names[0]
            )));
        };
        // Every joint must reach the root in at most J-1 parent hops;
        // otherwise it sits on or hangs off a cycle.
        for i in 0..j {
            let mut cur = i;
            let mut hops = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                hops += 1;
                if hops >= j {
                    return Err(Error::Skeleton(format!(
                        "cycle: joint {} never reaches the root",
                        joint_names[i]
                    )));
                }
            }
            if cur != root {
                return Err(Error::Skeleton(format!(
                    "joint {} is disconnected from the root",
                    joint_names[i]
                )));
            }
        }
        Ok(DirectedSkeleton { joint_names, parent, root })
    }

    /// Built-in layouts by name; currently `"h36m17"`.
    pub fn layout(name: &str) -> Result<Self> {
        match name {
            "h36m17" => Ok(Self::h36m17()),
            other => Err(Error::Skeleton(format!("unknown layout {other:?}"))),
        }
    }

    /// The 17-joint layout: hip root; hip → {right hip, left hip, spine};
    /// legs chain to the ankles, spine → thorax → {neck, shoulders},
    /// neck → head, shoulders chain to the wrists.
    pub fn h36m17() -> Self {
        let names = [
            "hip", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine", "thorax",
            "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
        ];
        let parent = [
            None,
            Some(0),
            Some(1),
            Some(2),
            Some(0),
            Some(4),
            Some(5),
            Some(0),
            Some(7),
            Some(8),
            Some(9),
            Some(8),
            Some(11),
            Some(12),
            Some(8),
            Some(14),
            Some(15),
        ];
        DirectedSkeleton::from_parents(
            names.iter().map(|s| s.to_string()).collect(),
            parent.to_vec(),
        )
        .expect("built-in layout is a valid tree")
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn edge_count(&self) -> usize {
        self.parent.len() - 1
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }
}

/// Incidence structures of a [`DirectedSkeleton`], plus the gather groups the
/// graph-convolution kernels consume directly.
#[derive(Clone, Debug)]
pub struct IncidenceMaps {
    /// Per node: index of its single incoming edge (`None` for the root).
    pub in_edge: Vec<Option<usize>>,
    /// Per node: indices of its outgoing edges.
    pub out_edges: Vec<Vec<usize>>,
    /// Per edge: its parent-side node.
    pub edge_source: Vec<usize>,
    /// Per edge: its child-side node.
    pub edge_target: Vec<usize>,
    /// Per-node singleton group of its in-edge (empty for the root);
    /// gathers edge features (length E) to nodes (length J).
    pub in_edge_groups: Rc<Vec<Vec<usize>>>,
    /// Per-node group of outgoing edges; averaging gathers edge features
    /// to nodes.
    pub out_edge_groups: Rc<Vec<Vec<usize>>>,
    /// Per-edge singleton group of its source node; gathers node features
    /// (length J) to edges (length E).
    pub source_groups: Rc<Vec<Vec<usize>>>,
    /// Per-edge singleton group of its target node.
    pub target_groups: Rc<Vec<Vec<usize>>>,
}

/// Builds incidence maps; edge `e`'s index equals the dense index of its
/// child node among non-root nodes in joint order.
pub fn incidence(skel: &DirectedSkeleton) -> IncidenceMaps {
    let j = skel.joint_count();
    let mut in_edge = vec![None; j];
    let mut out_edges = vec![Vec::new(); j];
    let mut edge_source = Vec::with_capacity(j - 1);
    let mut edge_target = Vec::with_capacity(j - 1);
    for node in 0..j {
        let Some(p) = skel.parent(node) else { continue };
        let e = edge_source.len();
        edge_source.push(p);
        edge_target.push(node);
        in_edge[node] = Some(e);
        out_edges[p].push(e);
    }
    let in_edge_groups =
        Rc::new(in_edge.iter().map(|e| e.map(|e| vec![e]).unwrap_or_default()).collect());
    let out_edge_groups = Rc::new(out_edges.clone());
    let source_groups = Rc::new(edge_source.iter().map(|&s| vec![s]).collect());
    let target_groups = Rc::new(edge_target.iter().map(|&t| vec![t]).collect());
    IncidenceMaps {
        in_edge,
        out_edges,
        edge_source,
        edge_target,
        in_edge_groups,
        out_edge_groups,
        source_groups,
        target_groups,
    }
}

/// Initial node and edge feature tensors built from a 2D pose batch.
#[derive(Clone, Debug)]
pub struct GraphFeatures {
    /// `(B, 2, T, J)`: per-joint x/y.
    pub node_feats: Tensor,
    /// `(B, 2, T, E)`: per-bone child − parent coordinate difference.
    pub edge_feats: Tensor,
}

/// Builds initial features from a `(B, T, J, 2)` batch of 2D poses: node
/// channels are the joint coordinates, edge channels are first-order
/// differences along each bone (child minus parent).
pub fn init_features(pose2d: &Tensor, skel: &DirectedSkeleton) -> Result<GraphFeatures> {
    let s = pose2d.shape();
    if s.len() != 4 || s[3] != 2 {
        return Err(Error::Shape {
            op: "init_features",
            detail: format!("expected (B, T, J, 2), got {s:?}"),
        });
    }
    let (b, t, j) = (s[0], s[1], s[2]);
    if j != skel.joint_count() {
        return Err(Error::Shape {
            op: "init_features",
            detail: format!("pose has {} joints, skeleton has {}", j, skel.joint_count()),
        });
    }
    let inc = incidence(skel);
    let e = skel.edge_count();
    let xd = pose2d.data();
    let mut node = vec![0.0; b * 2 * t * j];
    let mut edge = vec![0.0; b * 2 * t * e];
    for bi in 0..b {
        for ti in 0..t {
            let frame = &xd[(bi * t + ti) * j * 2..(bi * t + ti + 1) * j * 2];
            for c in 0..2 {
                let nrow = &mut node[((bi * 2 + c) * t + ti) * j..((bi * 2 + c) * t + ti) * j + j];
                for ji in 0..j {
                    nrow[ji] = frame[ji * 2 + c];
                }
                let erow = &mut edge[((bi * 2 + c) * t + ti) * e..((bi * 2 + c) * t + ti) * e + e];
                for ei in 0..e {
                    let (src, tgt) = (inc.edge_source[ei], inc.edge_target[ei]);
                    erow[ei] = frame[tgt * 2 + c] - frame[src * 2 + c];
                }
            }
        }
    }
    Ok(GraphFeatures {
        node_feats: Tensor::new(&[b, 2, t, j], node)?,
        edge_feats: Tensor::new(&[b, 2, t, e], edge)?,
    })
}
