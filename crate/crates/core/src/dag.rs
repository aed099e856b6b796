//! Relation DAG over source errors.
//!
//! Nodes are admitted source paragraphs in admission order; an edge links an
//! earlier source to a later one whose retrieval it contributed to. Node
//! indices therefore form a topological order, which the descendant
//! computation relies on.

use std::collections::{HashMap, HashSet};

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ParaIdx};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DagError {
    #[error("paragraph {0} is already a source error")]
    Duplicate(String),
    #[error("paragraph {0} is not a node of the relation DAG")]
    UnknownNode(String),
    #[error("edge {from} -> {to} does not point forward in admission step")]
    StepOrder { from: String, to: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub para: ParaIdx,
    pub para_id: String,
    pub step: u64,
    pub error: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagEdge {
    pub from: u32,
    pub to: u32,
    pub step: u64,
}

/// A paragraph about to enter the source set.
#[derive(Debug, Clone, PartialEq)]
pub struct NewSource {
    pub para: ParaIdx,
    pub para_id: String,
    pub error: f64,
    pub provenance: Vec<ParaIdx>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CumulativeError {
    Value(f64),
    /// No descendants: the mean is undefined and the node is never pruned.
    Exempt,
}

impl CumulativeError {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(v),
            Self::Exempt => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationDag {
    nodes: Vec<DagNode>,
    edges: Vec<DagEdge>,
    children: Vec<Vec<u32>>,
    by_para: HashMap<ParaIdx, u32>,
}

impl RelationDag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[DagNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[DagEdge] {
        &self.edges
    }

    pub fn node_index(&self, para: ParaIdx) -> Option<usize> {
        self.by_para.get(&para).map(|i| *i as usize)
    }

    pub fn contains(&self, para: ParaIdx) -> bool {
        self.by_para.contains_key(&para)
    }

    /// Active sources in admission order.
    pub fn active_sources(&self) -> Vec<ParaIdx> {
        self.nodes
            .iter()
            .filter(|n| n.active)
            .map(|n| n.para)
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.active).count()
    }

    /// Insert sources admitted at step `t`. Edges come from every provenance
    /// paragraph that is already a node. Nothing changes if any insertion is
    /// invalid.
    pub fn add_sources(&mut self, new: &[NewSource], t: u64) -> Result<usize, DagError> {
        let mut batch = HashSet::new();
        for s in new {
            if self.by_para.contains_key(&s.para) || !batch.insert(s.para) {
                return Err(DagError::Duplicate(s.para_id.clone()));
            }
            for p in &s.provenance {
                if let Some(&from) = self.by_para.get(p) {
                    if self.nodes[from as usize].step >= t {
                        return Err(DagError::StepOrder {
                            from: self.nodes[from as usize].para_id.clone(),
                            to: s.para_id.clone(),
                        });
                    }
                }
            }
        }
        let mut added = 0;
        for s in new {
            let to = self.nodes.len() as u32;
            self.nodes.push(DagNode {
                para: s.para,
                para_id: s.para_id.clone(),
                step: t,
                error: s.error,
                active: true,
            });
            self.children.push(Vec::new());
            self.by_para.insert(s.para, to);
            let mut parents: Vec<u32> = s
                .provenance
                .iter()
                .filter_map(|p| self.by_para.get(p).copied())
                .collect();
            parents.sort_unstable();
            parents.dedup();
            parents.retain(|p| *p != to);
            for from in parents {
                self.children[from as usize].push(to);
                self.edges.push(DagEdge { from, to, step: t });
                added += 1;
            }
        }
        debug_assert!(self.is_acyclic());
        Ok(added)
    }

    /// Descendant sets of every node (nodes reachable through at least one edge).
    pub fn descendant_sets(&self) -> Vec<FixedBitSet> {
        let n = self.nodes.len();
        let mut desc = vec![FixedBitSet::with_capacity(n); n];
        for v in (0..n).rev() {
            let mut acc = FixedBitSet::with_capacity(n);
            for &c in &self.children[v] {
                acc.insert(c as usize);
                acc.union_with(&desc[c as usize]);
            }
            desc[v] = acc;
        }
        desc
    }

    fn mean_over(&self, set: &FixedBitSet) -> CumulativeError {
        let count = set.count_ones(..);
        if count == 0 {
            return CumulativeError::Exempt;
        }
        let sum: f64 = set.ones().map(|i| self.nodes[i].error).sum();
        CumulativeError::Value(sum / count as f64)
    }

    /// Mean error over the descendants of `para`, summed in admission order.
    pub fn cumulative_error(&self, para: ParaIdx) -> Result<CumulativeError, DagError> {
        let start = self
            .node_index(para)
            .ok_or_else(|| DagError::UnknownNode(format!("#{}", para.0)))?;
        let mut seen = FixedBitSet::with_capacity(self.nodes.len());
        let mut stack: Vec<u32> = self.children[start].clone();
        while let Some(v) = stack.pop() {
            if !seen.put(v as usize) {
                stack.extend(&self.children[v as usize]);
            }
        }
        Ok(self.mean_over(&seen))
    }

    pub fn cumulative_errors(&self) -> Vec<CumulativeError> {
        self.descendant_sets()
            .iter()
            .map(|d| self.mean_over(d))
            .collect()
    }

    /// Deactivate every active node whose cumulative error is below `gamma`,
    /// judged on the values before this call. Returns the pruned paragraphs.
    pub fn prune(&mut self, gamma: f64) -> Vec<ParaIdx> {
        let values = self.cumulative_errors();
        let mut pruned = Vec::new();
        for (node, value) in self.nodes.iter_mut().zip(values) {
            if let CumulativeError::Value(v) = value {
                if node.active && v < gamma {
                    node.active = false;
                    pruned.push(node.para);
                }
            }
        }
        pruned
    }

    /// Kahn's algorithm over the edge list.
    pub fn is_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            indeg[e.to as usize] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut visited = 0;
        while let Some(v) = queue.pop() {
            visited += 1;
            for &c in &self.children[v] {
                indeg[c as usize] -= 1;
                if indeg[c as usize] == 0 {
                    queue.push(c as usize);
                }
            }
        }
        visited == n
    }

    pub fn export(&self) -> DagExport {
        DagExport {
            nodes: self
                .nodes
                .iter()
                .map(|n| ExportNode {
                    id: n.para_id.clone(),
                    step: n.step,
                    error: n.error,
                    active: n.active,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| ExportEdge {
                    from: self.nodes[e.from as usize].para_id.clone(),
                    to: self.nodes[e.to as usize].para_id.clone(),
                    step: e.step,
                })
                .collect(),
        }
    }

    /// Rebuild from an export, resolving paragraph ids against `corpus`.
    pub fn from_export(export: &DagExport, corpus: &Corpus) -> Result<Self, DagError> {
        let mut dag = Self::new();
        for n in &export.nodes {
            let para = corpus
                .para_idx(&n.id)
                .ok_or_else(|| DagError::UnknownNode(n.id.clone()))?;
            if dag.by_para.contains_key(&para) {
                return Err(DagError::Duplicate(n.id.clone()));
            }
            dag.by_para.insert(para, dag.nodes.len() as u32);
            dag.nodes.push(DagNode {
                para,
                para_id: n.id.clone(),
                step: n.step,
                error: n.error,
                active: n.active,
            });
            dag.children.push(Vec::new());
        }
        for e in &export.edges {
            let idx = |id: &str| {
                corpus
                    .para_idx(id)
                    .and_then(|p| dag.by_para.get(&p).copied())
                    .ok_or_else(|| DagError::UnknownNode(id.to_string()))
            };
            let (from, to) = (idx(&e.from)?, idx(&e.to)?);
            if from >= to || dag.nodes[from as usize].step >= dag.nodes[to as usize].step {
                return Err(DagError::StepOrder {
                    from: e.from.clone(),
                    to: e.to.clone(),
                });
            }
            dag.children[from as usize].push(to);
            dag.edges.push(DagEdge {
                from,
                to,
                step: e.step,
            });
        }
        Ok(dag)
    }
}

/// `dag.json` layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DagExport {
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: String,
    pub step: u64,
    pub error: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEdge {
    pub from: String,
    pub to: String,
    pub step: u64,
}
