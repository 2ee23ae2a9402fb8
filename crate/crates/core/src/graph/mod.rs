//! Attributed-graph data model: a shared node table over two modalities,
//! two intra-modality edge lists, and one bipartite inter edge list.
//!
//! Node ids are global: modality-1 nodes occupy `0..n1`, modality-2 nodes
//! occupy `n1..n1+n2`. Edge lists store global ids plus cached local ids for
//! gathering from the per-modality raw feature tables.

pub mod io;

use std::rc::Rc;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{0}")]
    State(String),
    #[error("{what}: index {index} out of range for {bound}")]
    Bounds {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("labels: {0}")]
    Labels(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeRole {
    Intra1,
    Intra2,
    Inter,
}

impl EdgeRole {
    pub fn name(self) -> &'static str {
        match self {
            EdgeRole::Intra1 => "intra1",
            EdgeRole::Intra2 => "intra2",
            EdgeRole::Inter => "inter",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "intra1" => Some(EdgeRole::Intra1),
            "intra2" => Some(EdgeRole::Intra2),
            "inter" => Some(EdgeRole::Inter),
            _ => None,
        }
    }
}

/// Shared node table: raw per-modality attribute blocks.
pub struct NodeTable {
    raw1: Tensor,
    raw2: Tensor,
}

impl NodeTable {
    pub fn n1(&self) -> usize {
        self.raw1.rows()
    }

    pub fn n2(&self) -> usize {
        self.raw2.rows()
    }

    pub fn n(&self) -> usize {
        self.n1() + self.n2()
    }

    pub fn modality(&self, node: usize) -> Modality {
        if node < self.n1() {
            Modality::One
        } else {
            Modality::Two
        }
    }

    pub fn raw1(&self) -> &Tensor {
        &self.raw1
    }

    pub fn raw2(&self) -> &Tensor {
        &self.raw2
    }
}

/// Edge-attribute lifecycle. Attributes are defined as the concatenation of
/// the endpoint node attributes; the concrete buffer is only materialized on
/// demand so that very large inter graphs never hold a `|E| x (d1+d2)` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeAttrState {
    Unset,
    ConcatOfEndpoints,
}

/// Directed edges with sender/receiver roles over the shared node table.
pub struct EdgeList {
    senders: Rc<Vec<usize>>,
    receivers: Rc<Vec<usize>>,
    /// Endpoint ids relative to the owning modality's raw table.
    senders_local: Rc<Vec<usize>>,
    receivers_local: Rc<Vec<usize>>,
    attr_state: EdgeAttrState,
}

impl EdgeList {
    fn new(senders: Vec<usize>, receivers: Vec<usize>, sender_offset: usize, receiver_offset: usize) -> Self {
        let senders_local = if sender_offset == 0 {
            None
        } else {
            Some(senders.iter().map(|s| s - sender_offset).collect())
        };
        let receivers_local = if receiver_offset == 0 {
            None
        } else {
            Some(receivers.iter().map(|r| r - receiver_offset).collect())
        };
        let senders = Rc::new(senders);
        let receivers = Rc::new(receivers);
        EdgeList {
            senders_local: senders_local.map_or_else(|| Rc::clone(&senders), Rc::new),
            receivers_local: receivers_local.map_or_else(|| Rc::clone(&receivers), Rc::new),
            senders,
            receivers,
            attr_state: EdgeAttrState::Unset,
        }
    }

    pub fn len(&self) -> usize {
        self.senders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }

    pub fn senders(&self) -> &[usize] {
        &self.senders
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    pub fn senders_shared(&self) -> Rc<Vec<usize>> {
        Rc::clone(&self.senders)
    }

    pub fn receivers_shared(&self) -> Rc<Vec<usize>> {
        Rc::clone(&self.receivers)
    }

    pub fn senders_local(&self) -> Rc<Vec<usize>> {
        Rc::clone(&self.senders_local)
    }

    pub fn receivers_local(&self) -> Rc<Vec<usize>> {
        Rc::clone(&self.receivers_local)
    }
}

/// First-class invariant violation reported by [`GraphBundle::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    InterModality,
    IntraModality,
    DuplicateEdge,
    SelfLoop,
    IndexRange,
    LabelLength,
    LabelRange,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::InterModality => "inter-modality",
            ViolationKind::IntraModality => "intra-modality",
            ViolationKind::DuplicateEdge => "duplicate-edge",
            ViolationKind::SelfLoop => "self-loop",
            ViolationKind::IndexRange => "index-range",
            ViolationKind::LabelLength => "label-length",
            ViolationKind::LabelRange => "label-range",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.detail)
    }
}

/// The one object the network consumes: node table, both intra edge lists,
/// the inter edge list, and optional labels over inter-edges.
pub struct GraphBundle {
    nodes: NodeTable,
    intra1: EdgeList,
    intra2: EdgeList,
    inter: EdgeList,
    labels: Option<Vec<f64>>,
}

impl GraphBundle {
    /// Assemble from per-modality raw features and edge pairs in local
    /// (per-modality) indices. Inter pairs are `(modality-1 id, modality-2 id)`.
    pub fn new(
        raw1: Tensor,
        raw2: Tensor,
        intra1_pairs: &[(usize, usize)],
        intra2_pairs: &[(usize, usize)],
        inter_pairs: &[(usize, usize)],
    ) -> Result<Self, GraphError> {
        let n1 = raw1.rows();
        let n2 = raw2.rows();
        check_pairs("intra1 edge", intra1_pairs, n1, n1)?;
        check_pairs("intra2 edge", intra2_pairs, n2, n2)?;
        check_pairs("inter edge", inter_pairs, n1, n2)?;
        let intra1 = EdgeList::new(
            intra1_pairs.iter().map(|p| p.0).collect(),
            intra1_pairs.iter().map(|p| p.1).collect(),
            0,
            0,
        );
        let intra2 = EdgeList::new(
            intra2_pairs.iter().map(|p| p.0 + n1).collect(),
            intra2_pairs.iter().map(|p| p.1 + n1).collect(),
            n1,
            n1,
        );
        let inter = EdgeList::new(
            inter_pairs.iter().map(|p| p.0).collect(),
            inter_pairs.iter().map(|p| p.1 + n1).collect(),
            0,
            n1,
        );
        Ok(GraphBundle {
            nodes: NodeTable { raw1, raw2 },
            intra1,
            intra2,
            inter,
            labels: None,
        })
    }

    pub fn nodes(&self) -> &NodeTable {
        &self.nodes
    }

    pub fn edges(&self, role: EdgeRole) -> &EdgeList {
        match role {
            EdgeRole::Intra1 => &self.intra1,
            EdgeRole::Intra2 => &self.intra2,
            EdgeRole::Inter => &self.inter,
        }
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    /// Attach ground-truth labels over inter-edges, one value in `[0, 1]`
    /// per edge, in inter-edge order.
    pub fn set_labels(&mut self, labels: Vec<f64>) -> Result<(), GraphError> {
        if labels.len() != self.inter.len() {
            return Err(GraphError::Labels(format!(
                "expected {} labels (one per inter-edge), got {}",
                self.inter.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GraphError::Labels(format!("label {bad} outside [0, 1]")));
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Mark every edge attribute as the concatenation of its endpoint
    /// attributes (`sender (c) receiver`). Buffers are materialized lazily
    /// via [`GraphBundle::raw_edge_attrs`].
    pub fn init_edge_attrs(&mut self) -> Result<(), GraphError> {
        for role in [EdgeRole::Intra1, EdgeRole::Intra2, EdgeRole::Inter] {
            if self.edges(role).attr_state != EdgeAttrState::Unset {
                return Err(GraphError::State(format!(
                    "{} edge attributes already initialized",
                    role.name()
                )));
            }
        }
        self.intra1.attr_state = EdgeAttrState::ConcatOfEndpoints;
        self.intra2.attr_state = EdgeAttrState::ConcatOfEndpoints;
        self.inter.attr_state = EdgeAttrState::ConcatOfEndpoints;
        Ok(())
    }

    pub fn edge_attrs_initialized(&self) -> bool {
        self.inter.attr_state == EdgeAttrState::ConcatOfEndpoints
    }

    /// Materialize the raw edge-attribute block for one edge list: row `i`
    /// is `sender-attrs (c) receiver-attrs`, width `d_sender + d_receiver`.
    pub fn raw_edge_attrs(&self, role: EdgeRole) -> Result<Tensor, GraphError> {
        let list = self.edges(role);
        if list.attr_state != EdgeAttrState::ConcatOfEndpoints {
            return Err(GraphError::State(format!(
                "{} edge attributes not initialized; call init_edge_attrs first",
                role.name()
            )));
        }
        let (src_s, src_r) = match role {
            EdgeRole::Intra1 => (&self.nodes.raw1, &self.nodes.raw1),
            EdgeRole::Intra2 => (&self.nodes.raw2, &self.nodes.raw2),
            EdgeRole::Inter => (&self.nodes.raw1, &self.nodes.raw2),
        };
        let (ds, dr) = (src_s.cols(), src_r.cols());
        let sv = src_s.value();
        let rv = src_r.value();
        let mut data = Vec::with_capacity(list.len() * (ds + dr));
        for (&s, &r) in list.senders_local.iter().zip(list.receivers_local.iter()) {
            data.extend_from_slice(&sv[s * ds..s * ds + ds]);
            data.extend_from_slice(&rv[r * dr..r * dr + dr]);
        }
        drop(sv);
        drop(rv);
        Ok(Tensor::new(list.len(), ds + dr, data, false).expect("sized above"))
    }

    /// All edge indices in `role` where `node` appears as sender or
    /// receiver, in ascending order.
    pub fn incident_edges(&self, node: usize, role: EdgeRole) -> Result<Vec<usize>, GraphError> {
        if node >= self.nodes.n() {
            return Err(GraphError::Bounds {
                what: "incident_edges node",
                index: node,
                bound: self.nodes.n(),
            });
        }
        let list = self.edges(role);
        Ok(list
            .senders
            .iter()
            .zip(list.receivers.iter())
            .enumerate()
            .filter(|(_, (&s, &r))| s == node || r == node)
            .map(|(i, _)| i)
            .collect())
    }

    /// Check every structural invariant and return the violations found.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n1 = self.nodes.n1();
        let n = self.nodes.n();
        for role in [EdgeRole::Intra1, EdgeRole::Intra2, EdgeRole::Inter] {
            let list = self.edges(role);
            let mut seen = std::collections::HashSet::new();
            for (i, (&s, &r)) in list.senders.iter().zip(list.receivers.iter()).enumerate() {
                if s >= n || r >= n {
                    out.push(Violation {
                        kind: ViolationKind::IndexRange,
                        detail: format!("{} edge {i} endpoint out of range", role.name()),
                    });
                    continue;
                }
                if s == r {
                    out.push(Violation {
                        kind: ViolationKind::SelfLoop,
                        detail: format!("{} edge {i} is a self-loop on node {s}", role.name()),
                    });
                }
                if !seen.insert((s, r)) {
                    out.push(Violation {
                        kind: ViolationKind::DuplicateEdge,
                        detail: format!("{} edge {i} duplicates ({s}, {r})", role.name()),
                    });
                }
                match role {
                    EdgeRole::Intra1 => {
                        if s >= n1 || r >= n1 {
                            out.push(Violation {
                                kind: ViolationKind::IntraModality,
                                detail: format!("intra1 edge {i} touches a modality-2 node"),
                            });
                        }
                    }
                    EdgeRole::Intra2 => {
                        if s < n1 || r < n1 {
                            out.push(Violation {
                                kind: ViolationKind::IntraModality,
                                detail: format!("intra2 edge {i} touches a modality-1 node"),
                            });
                        }
                    }
                    EdgeRole::Inter => {
                        if s >= n1 || r < n1 {
                            out.push(Violation {
                                kind: ViolationKind::InterModality,
                                detail: format!(
                                    "inter edge {i} must run modality-1 -> modality-2, got ({s}, {r})"
                                ),
                            });
                        }
                    }
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.inter.len() {
                out.push(Violation {
                    kind: ViolationKind::LabelLength,
                    detail: format!("{} labels for {} inter-edges", labels.len(), self.inter.len()),
                });
            }
            for (i, v) in labels.iter().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    out.push(Violation {
                        kind: ViolationKind::LabelRange,
                        detail: format!("label {i} = {v} outside [0, 1]"),
                    });
                }
            }
        }
        out
    }
}

fn check_pairs(
    what: &'static str,
    pairs: &[(usize, usize)],
    sender_bound: usize,
    receiver_bound: usize,
) -> Result<(), GraphError> {
    for &(s, r) in pairs {
        if s >= sender_bound {
            return Err(GraphError::Bounds { what, index: s, bound: sender_bound });
        }
        if r >= receiver_bound {
            return Err(GraphError::Bounds { what, index: r, bound: receiver_bound });
        }
    }
    Ok(())
}
