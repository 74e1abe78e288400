// SPDX-License-Identifier: MIT OR Apache-2.0

//! Node/edge view of the transformer.
//!
//! Nodes are the embedding input, every attention head, every MLP and the
//! logits. A destination *slot* is one place a node reads the residual stream:
//! each head has separate query, key and value slots; each MLP and the logits
//! have one. An edge connects a node to a slot that comes after it in the
//! forward order, and a slot's input is the sum of its incoming edges.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Input,
    Head { layer: usize, head: usize },
    Mlp(usize),
    Logits,
}

impl NodeId {
    pub fn layer(self) -> Option<usize> {
        match self {
            NodeId::Head { layer, .. } | NodeId::Mlp(layer) => Some(layer),
            NodeId::Input | NodeId::Logits => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Input => write!(f, "input"),
            NodeId::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            NodeId::Mlp(layer) => write!(f, "m{layer}"),
            NodeId::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("unrecognized node name `{s}`"));
        match s {
            "input" => Ok(NodeId::Input),
            "logits" => Ok(NodeId::Logits),
            _ if s.starts_with('a') => {
                let (l, h) = s[1..].split_once(".h").ok_or_else(bad)?;
                Ok(NodeId::Head {
                    layer: l.parse().map_err(|_| bad())?,
                    head: h.parse().map_err(|_| bad())?,
                })
            }
            _ if s.starts_with('m') => Ok(NodeId::Mlp(s[1..].parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Qkv {
    Q,
    K,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Head {
        layer: usize,
        head: usize,
        input: Qkv,
    },
    MlpIn(usize),
    LogitsIn,
}

impl Slot {
    /// The node that owns this slot.
    pub fn node(self) -> NodeId {
        match self {
            Slot::Head { layer, head, .. } => NodeId::Head { layer, head },
            Slot::MlpIn(l) => NodeId::Mlp(l),
            Slot::LogitsIn => NodeId::Logits,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Head { layer, head, input } => {
                let suffix = match input {
                    Qkv::Q => "q",
                    Qkv::K => "k",
                    Qkv::V => "v",
                };
                write!(f, "a{layer}.h{head}.{suffix}")
            }
            Slot::MlpIn(l) => write!(f, "m{l}"),
            Slot::LogitsIn => write!(f, "logits"),
        }
    }
}

impl FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let head_slot = |base: &str, input| match base.parse()? {
            NodeId::Head { layer, head } => Ok(Slot::Head { layer, head, input }),
            _ => Err(Error::Input(format!("unrecognized slot name `{s}`"))),
        };
        if let Some(base) = s.strip_suffix(".q") {
            return head_slot(base, Qkv::Q);
        }
        if let Some(base) = s.strip_suffix(".k") {
            return head_slot(base, Qkv::K);
        }
        if let Some(base) = s.strip_suffix(".v") {
            return head_slot(base, Qkv::V);
        }
        match s.parse()? {
            NodeId::Mlp(l) => Ok(Slot::MlpIn(l)),
            NodeId::Logits => Ok(Slot::LogitsIn),
            _ => Err(Error::Input(format!("unrecognized slot name `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: NodeId,
    pub dst: Slot,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

impl FromStr for Edge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (src, dst) = s
            .split_once("->")
            .ok_or_else(|| Error::Input(format!("edge `{s}` is missing `->`")))?;
        Ok(Edge {
            src: src.parse()?,
            dst: dst.parse()?,
        })
    }
}

impl Serialize for Edge {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Edge {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Whether `src` writes to the residual stream before `dst` reads it.
pub fn precedes(src: NodeId, dst: Slot) -> bool {
    match (src, dst) {
        (NodeId::Logits, _) => false,
        (NodeId::Input, _) => true,
        (_, Slot::LogitsIn) => true,
        (NodeId::Head { layer: s, .. }, Slot::Head { layer: d, .. }) => s < d,
        (NodeId::Mlp(s), Slot::Head { layer: d, .. }) => s < d,
        (NodeId::Head { layer: s, .. }, Slot::MlpIn(d)) => s <= d,
        (NodeId::Mlp(s), Slot::MlpIn(d)) => s < d,
    }
}

/// Edge count from the closed form, independent of enumeration.
pub fn closed_form_edge_count(n_layers: usize, n_heads: usize) -> usize {
    let heads: usize = (0..n_layers)
        .map(|l| 3 * n_heads * (1 + (n_heads + 1) * l))
        .sum();
    let mlps: usize = (0..n_layers).map(|l| 1 + n_heads * (l + 1) + l).sum();
    heads + mlps + 1 + n_layers * (n_heads + 1)
}

#[derive(Clone, Debug)]
pub struct ComputationalGraph {
    config: ModelConfig,
    nodes: Vec<NodeId>,
    slots: Vec<Slot>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
    edge_index: HashMap<Edge, usize>,
}

impl ComputationalGraph {
    pub fn build(config: &ModelConfig) -> Self {
        let (nl, nh) = (config.n_layers, config.n_heads);
        let mut nodes = vec![NodeId::Input];
        let mut slots = Vec::new();
        for layer in 0..nl {
            for head in 0..nh {
                nodes.push(NodeId::Head { layer, head });
                for input in [Qkv::Q, Qkv::K, Qkv::V] {
                    slots.push(Slot::Head { layer, head, input });
                }
            }
            nodes.push(NodeId::Mlp(layer));
            slots.push(Slot::MlpIn(layer));
        }
        nodes.push(NodeId::Logits);
        slots.push(Slot::LogitsIn);

        let mut edges = Vec::new();
        let mut incoming = Vec::with_capacity(slots.len());
        for &dst in &slots {
            let mut into = Vec::new();
            for &src in &nodes {
                if precedes(src, dst) {
                    into.push(edges.len());
                    edges.push(Edge { src, dst });
                }
            }
            incoming.push(into);
        }
        let edge_index = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        ComputationalGraph {
            config: config.clone(),
            nodes,
            slots,
            edges,
            incoming,
            edge_index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edge indices feeding slot `slot_idx`, in node order.
    pub fn incoming(&self, slot_idx: usize) -> &[usize] {
        &self.incoming[slot_idx]
    }

    pub fn edge_position(&self, e: &Edge) -> Option<usize> {
        self.edge_index.get(e).copied()
    }

    pub fn node_position(&self, n: NodeId) -> usize {
        let h = self.config.n_heads;
        match n {
            NodeId::Input => 0,
            NodeId::Head { layer, head } => 1 + layer * (h + 1) + head,
            NodeId::Mlp(layer) => 1 + layer * (h + 1) + h,
            NodeId::Logits => 1 + self.config.n_layers * (h + 1),
        }
    }

    pub fn slot_position(&self, s: Slot) -> usize {
        let h = self.config.n_heads;
        match s {
            Slot::Head { layer, head, input } => {
                layer * (3 * h + 1)
                    + 3 * head
                    + match input {
                        Qkv::Q => 0,
                        Qkv::K => 1,
                        Qkv::V => 2,
                    }
            }
            Slot::MlpIn(layer) => layer * (3 * h + 1) + 3 * h,
            Slot::LogitsIn => self.config.n_layers * (3 * h + 1),
        }
    }

    pub fn contains_node(&self, n: NodeId) -> bool {
        match n {
            NodeId::Head { layer, head } => {
                layer < self.config.n_layers && head < self.config.n_heads
            }
            NodeId::Mlp(layer) => layer < self.config.n_layers,
            NodeId::Input | NodeId::Logits => true,
        }
    }
}

/// Membership of each graph edge (by position) in a circuit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask(Vec<bool>);

impl EdgeMask {
    pub fn all(graph: &ComputationalGraph) -> Self {
        EdgeMask(vec![true; graph.edges().len()])
    }

    pub fn none(graph: &ComputationalGraph) -> Self {
        EdgeMask(vec![false; graph.edges().len()])
    }

    pub fn from_positions(
        graph: &ComputationalGraph,
        positions: impl IntoIterator<Item = usize>,
    ) -> Self {
        let mut m = Self::none(graph);
        for p in positions {
            m.0[p] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.0[position]
    }

    pub fn set(&mut self, position: usize, included: bool) {
        self.0[position] = included;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n_layers: usize, n_heads: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            n_heads,
            d_model: 4 * n_heads,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 10,
            max_seq_len: 8,
        }
    }

    #[test]
    fn gpt2_small_shape() {
        let g = ComputationalGraph::build(&ModelConfig::gpt2_small());
        assert_eq!(g.nodes().len(), 158);
        assert_eq!(g.edges().len(), 32_491);
    }

    #[test]
    fn single_layer_single_head_has_eight_edges() {
        let g = ComputationalGraph::build(&config(1, 1));
        let names: Vec<String> = g.nodes().iter().map(ToString::to_string).collect();
        assert_eq!(names, ["input", "a0.h0", "m0", "logits"]);
        let edges: Vec<String> = g.edges().iter().map(ToString::to_string).collect();
        assert_eq!(
            edges,
            [
                "input->a0.h0.q",
                "input->a0.h0.k",
                "input->a0.h0.v",
                "input->m0",
                "a0.h0->m0",
                "input->logits",
                "a0.h0->logits",
                "m0->logits",
            ]
        );
    }

    #[test]
    fn closed_form_matches_enumeration() {
        for l in 1..=4 {
            for h in 1..=4 {
                let g = ComputationalGraph::build(&config(l, h));
                assert_eq!(g.edges().len(), closed_form_edge_count(l, h), "({l}, {h})");
                assert_eq!(g.nodes().len(), 2 + l * (h + 1));
            }
        }
    }

    #[test]
    fn edges_are_unique_and_topological() {
        let g = ComputationalGraph::build(&config(3, 2));
        let mut seen = std::collections::HashSet::new();
        let mut last_slot = 0;
        for e in g.edges() {
            assert!(seen.insert(*e));
            assert!(g.node_position(e.src) < g.node_position(e.dst.node()));
            let s = g.slot_position(e.dst);
            assert!(s >= last_slot);
            last_slot = s;
        }
        for (i, s) in g.slots().iter().enumerate() {
            assert_eq!(g.slot_position(*s), i);
        }
        for (i, n) in g.nodes().iter().enumerate() {
            assert_eq!(g.node_position(*n), i);
        }
    }

    #[test]
    fn names_round_trip() {
        assert_eq!(NodeId::Head { layer: 9, head: 3 }.to_string(), "a9.h3");
        assert_eq!(NodeId::Mlp(11).to_string(), "m11");
        let g = ComputationalGraph::build(&config(2, 3));
        for e in g.edges() {
            let parsed: Edge = e.to_string().parse().unwrap();
            assert_eq!(parsed, *e);
        }
        assert!("a1h2".parse::<NodeId>().is_err());
        assert!("input->a0.h1.x".parse::<Edge>().is_err());
    }
}
