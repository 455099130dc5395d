//! Joint layouts, hop-distance partitions and the normalized adjacency stack.
//!
//! A layout is a rooted tree over `V` joints. Partition `k` of the adjacency
//! holds the joint pairs whose shortest-path distance is exactly `k`
//! (`k = 1..=max_hop`); partition 0 is the zero matrix, so after the `+ I` of
//! normalization it reduces to self-connections.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::sym_normalize;
use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Supported joint configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutVariant {
    /// 25 upper-body and hand keypoints.
    Basic25,
    /// `Basic25` plus a middle-finger base joint on each hand.
    Extended27,
    /// Any other validated tree, e.g. loaded from a layout file.
    Custom,
}

impl LayoutVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Basic25 => "basic25",
            Self::Extended27 => "extended27",
            Self::Custom => "custom",
        }
    }
}

impl fmt::Display for LayoutVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic25" => Ok(Self::Basic25),
            "extended27" => Ok(Self::Extended27),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown layout variant `{other}`"))),
        }
    }
}

const BASIC25_JOINTS: [&str; 25] = [
    "pelvis",
    "neck",
    "nose",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_thumb_base",
    "left_thumb_tip",
    "left_index_base",
    "left_index_tip",
    "left_middle_tip",
    "left_ring_tip",
    "left_pinky_tip",
    "right_thumb_base",
    "right_thumb_tip",
    "right_index_base",
    "right_index_tip",
    "right_middle_tip",
    "right_ring_tip",
    "right_pinky_tip",
];

const BASIC25_EDGES: [(usize, usize); 24] = [
    (0, 1),
    (1, 2),
    (1, 3),
    (1, 4),
    (3, 5),
    (4, 6),
    (5, 7),
    (6, 8),
    (0, 9),
    (0, 10),
    (7, 11),
    (11, 12),
    (7, 13),
    (13, 14),
    (7, 15),
    (7, 16),
    (7, 17),
    (8, 18),
    (18, 19),
    (8, 20),
    (20, 21),
    (8, 22),
    (8, 23),
    (8, 24),
];

/// Named joints plus the (parent, child) edges of a rooted tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointLayout {
    pub variant: LayoutVariant,
    pub joints: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
    /// Joint whose distance from the root defines the torso length.
    pub neck: Option<usize>,
}

impl JointLayout {
    /// Builds the documented joint list and tree for `variant`.
    pub fn build(variant: LayoutVariant) -> Result<Self> {
        let mut joints: Vec<String> = BASIC25_JOINTS.iter().map(|s| s.to_string()).collect();
        let mut edges = BASIC25_EDGES.to_vec();
        match variant {
            LayoutVariant::Basic25 => {}
            LayoutVariant::Extended27 => {
                joints.push("left_middle_base".into());
                joints.push("right_middle_base".into());
                // wrist -> middle_base -> middle_tip replaces wrist -> middle_tip
                for e in edges.iter_mut() {
                    if *e == (7, 15) {
                        *e = (25, 15);
                    } else if *e == (8, 22) {
                        *e = (26, 22);
                    }
                }
                edges.push((7, 25));
                edges.push((8, 26));
            }
            LayoutVariant::Custom => {
                return Err(Error::Config(
                    "custom layouts are constructed with JointLayout::custom".into(),
                ))
            }
        }
        let layout = Self {
            variant,
            joints,
            edges,
            root: 0,
            neck: Some(1),
        };
        layout.validate()?;
        Ok(layout)
    }

    /// A validated user-defined tree.
    pub fn custom(joints: Vec<String>, edges: Vec<(usize, usize)>, root: usize, neck: Option<usize>) -> Result<Self> {
        let layout = Self {
            variant: LayoutVariant::Custom,
            joints,
            edges,
            root,
            neck,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// A chain `0 - 1 - ... - (n-1)` rooted at 0.
    pub fn chain(n: usize) -> Result<Self> {
        let joints = (0..n).map(|i| format!("j{i}")).collect();
        let edges = (1..n).map(|i| (i - 1, i)).collect();
        Self::custom(joints, edges, 0, (n > 1).then_some(1))
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == name)
    }

    /// Checks index bounds and that the edges form a spanning tree.
    pub fn validate(&self) -> Result<()> {
        let v = self.num_joints();
        if v == 0 {
            return Err(Error::Graph("layout has no joints".into()));
        }
        if self.root >= v || self.neck.is_some_and(|n| n >= v) {
            return Err(Error::Graph(format!("root/neck index out of range for {v} joints")));
        }
        for &(a, b) in &self.edges {
            if a >= v || b >= v || a == b {
                return Err(Error::Graph(format!("invalid edge ({a}, {b}) for {v} joints")));
            }
        }
        if self.edges.len() != v - 1 {
            return Err(Error::Graph(format!(
                "a tree on {v} joints needs {} edges, found {}",
                v - 1,
                self.edges.len()
            )));
        }
        let dist = bfs(&self.adjacency_lists(), self.root);
        if let Some(j) = dist.iter().position(Option::is_none) {
            return Err(Error::Graph(format!(
                "joint {j} (`{}`) is not connected to the root",
                self.joints[j]
            )));
        }
        Ok(())
    }

    pub(crate) fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// All-pairs shortest-path hop counts.
    pub fn hop_distances(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency_lists();
        (0..self.num_joints())
            .map(|s| bfs(&adj, s).into_iter().map(|d| d.unwrap_or(usize::MAX)).collect())
            .collect()
    }

    /// Relabels joints so that new joint `i` is old joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let inverse = invert_permutation(perm, self.num_joints())?;
        Ok(Self {
            variant: LayoutVariant::Custom,
            joints: perm.iter().map(|&p| self.joints[p].clone()).collect(),
            edges: self.edges.iter().map(|&(a, b)| (inverse[a], inverse[b])).collect(),
            root: inverse[self.root],
            neck: self.neck.map(|n| inverse[n]),
        })
    }
}

fn bfs(adj: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    let mut queue = VecDeque::new();
    dist[start] = Some(0);
    queue.push_back(start);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap_or(0);
        for &w in &adj[u] {
            if dist[w].is_none() {
                dist[w] = Some(d + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Inverse of a permutation given as `perm[new] = old`.
pub fn invert_permutation(perm: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut inverse = vec![usize::MAX; n];
    if perm.len() != n {
        return Err(Error::Config(format!(
            "permutation of length {} for {n} joints",
            perm.len()
        )));
    }
    for (new, &old) in perm.iter().enumerate() {
        if old >= n || inverse[old] != usize::MAX {
            return Err(Error::Config(format!("not a permutation: {perm:?}")));
        }
        inverse[old] = new;
    }
    Ok(inverse)
}

/// Binary hop-distance partitions `A_0 ..= A_max_hop`, each `V × V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedAdjacency {
    pub max_hop: usize,
    pub partitions: Vec<NdArray>,
}

impl PartitionedAdjacency {
    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn num_joints(&self) -> usize {
        self.partitions.first().map_or(0, |p| p.shape()[0])
    }

    /// Same relabeling as [`JointLayout::permuted`].
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let v = self.num_joints();
        invert_permutation(perm, v)?;
        Ok(Self {
            max_hop: self.max_hop,
            partitions: self.partitions.iter().map(|a| permute_square(a, perm)).collect(),
        })
    }
}

/// `P A Pᵀ` for `perm[new] = old`.
pub fn permute_square(a: &NdArray, perm: &[usize]) -> NdArray {
    let v = perm.len();
    NdArray::from_fn(&[v, v], |idx| a.get(&[perm[idx / v], perm[idx % v]]))
}

/// `A_k[i][j] = 1` iff the hop distance between `i` and `j` is exactly `k`,
/// for `k = 1..=max_hop`; `A_0` is zero.
pub fn build_partitions(layout: &JointLayout, max_hop: usize) -> Result<PartitionedAdjacency> {
    if max_hop == 0 {
        return Err(Error::Config("max_hop must be at least 1".into()));
    }
    let v = layout.num_joints();
    let dist = layout.hop_distances();
    let partitions = (0..=max_hop)
        .map(|k| {
            NdArray::from_fn(&[v, v], |idx| {
                let d = dist[idx / v][idx % v];
                if k > 0 && d == k {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(PartitionedAdjacency { max_hop, partitions })
}

/// Per partition: `D^{-1/2}(A_k ⊙ E_k + I)D^{-1/2}`, degrees from row sums.
pub fn normalize(adj: &PartitionedAdjacency, masks: &[NdArray]) -> Result<Vec<NdArray>> {
    if masks.len() != adj.partitions.len() {
        return Err(Error::Config(format!(
            "{} masks for {} partitions",
            masks.len(),
            adj.partitions.len()
        )));
    }
    adj.partitions
        .iter()
        .zip(masks)
        .map(|(a, e)| {
            if !e.is_finite() {
                return Err(Error::Numeric("adjacency mask contains non-finite values".into()));
            }
            let mut b = a.zip_map(e, |x, y| x * y)?;
            let v = a.shape()[0];
            for i in 0..v {
                b.data_mut()[i * v + i] += 1.0;
            }
            sym_normalize(&b)
        })
        .collect()
}

/// All-ones masks, one per partition.
pub fn unit_masks(adj: &PartitionedAdjacency) -> Vec<NdArray> {
    adj.partitions.iter().map(|a| NdArray::ones(a.shape())).collect()
}
