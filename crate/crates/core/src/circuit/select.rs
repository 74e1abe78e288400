// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::scores::{EdgeScores, Method};
use crate::error::{Error, Result};
use crate::model::{ComputationalGraph, Edge, EdgeMask, NodeId};

/// A subgraph chosen from edge scores. `edges` is the pruned set; `raw_edges`
/// holds the top-`n_requested` edges before pruning. Edge lists follow graph
/// edge order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub method: Option<Method>,
    pub n_requested: usize,
    pub edges: Vec<Edge>,
    pub raw_edges: Vec<Edge>,
    pub nodes: Vec<NodeId>,
    pub faithfulness_raw: Option<f64>,
    pub faithfulness_normalized: Option<f64>,
}

/// Input first, then heads by layer and head, then MLPs by layer, then logits.
pub fn listing_order(n: &NodeId) -> (u8, usize, usize) {
    match *n {
        NodeId::Input => (0, 0, 0),
        NodeId::Head { layer, head } => (1, layer, head),
        NodeId::Mlp(layer) => (2, layer, 0),
        NodeId::Logits => (3, 0, 0),
    }
}

fn induced_nodes(edges: &[Edge]) -> Vec<NodeId> {
    let mut nodes: BTreeSet<(u8, usize, usize)> = BTreeSet::new();
    let mut out = vec![NodeId::Input, NodeId::Logits];
    for e in edges {
        out.push(e.src);
        out.push(e.dst.node());
    }
    out.retain(|n| nodes.insert(listing_order(n)));
    out.sort_by_key(listing_order);
    out
}

/// Repeatedly drops interior nodes missing an incoming or an outgoing edge,
/// along with every edge touching them.
pub fn prune(edges: &[Edge]) -> Vec<Edge> {
    let mut kept: Vec<Edge> = edges.to_vec();
    loop {
        let has_in: BTreeSet<(u8, usize, usize)> =
            kept.iter().map(|e| listing_order(&e.dst.node())).collect();
        let has_out: BTreeSet<(u8, usize, usize)> =
            kept.iter().map(|e| listing_order(&e.src)).collect();
        let dead = |n: &NodeId| {
            matches!(n, NodeId::Head { .. } | NodeId::Mlp(_))
                && !(has_in.contains(&listing_order(n)) && has_out.contains(&listing_order(n)))
        };
        let before = kept.len();
        kept.retain(|e| !dead(&e.src) && !dead(&e.dst.node()));
        if kept.len() == before {
            return kept;
        }
    }
}

impl Circuit {
    /// Builds a circuit from an explicit edge set; no pruning is applied.
    pub fn from_edges(graph: &ComputationalGraph, edges: &[Edge]) -> Result<Self> {
        let mut positions = Vec::with_capacity(edges.len());
        for e in edges {
            positions.push(
                graph
                    .edge_position(e)
                    .ok_or_else(|| Error::Input(format!("edge `{e}` is not in the graph")))?,
            );
        }
        positions.sort_unstable();
        positions.dedup();
        let edges: Vec<Edge> = positions.iter().map(|&i| graph.edges()[i]).collect();
        Ok(Circuit {
            method: None,
            n_requested: edges.len(),
            nodes: induced_nodes(&edges),
            raw_edges: edges.clone(),
            edges,
            faithfulness_raw: None,
            faithfulness_normalized: None,
        })
    }

    pub fn full(graph: &ComputationalGraph) -> Self {
        Self::from_edges(graph, graph.edges()).expect("graph edges belong to the graph")
    }

    pub fn empty() -> Self {
        Circuit {
            method: None,
            n_requested: 0,
            edges: Vec::new(),
            raw_edges: Vec::new(),
            nodes: induced_nodes(&[]),
            faithfulness_raw: None,
            faithfulness_normalized: None,
        }
    }

    pub fn mask(&self, graph: &ComputationalGraph) -> Result<EdgeMask> {
        let mut positions = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            positions.push(
                graph
                    .edge_position(e)
                    .ok_or_else(|| Error::Input(format!("edge `{e}` is not in the graph")))?,
            );
        }
        Ok(EdgeMask::from_positions(graph, positions))
    }

    /// Nodes of the circuit that sit in `layer` (heads and the MLP).
    pub fn nodes_in_layer(&self, layer: usize) -> Vec<NodeId> {
        self.nodes
            .iter()
            .copied()
            .filter(|n| n.layer() == Some(layer))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks that the node list is the one the edges induce.
    pub fn from_json(text: &str, graph: &ComputationalGraph) -> Result<Self> {
        let c: Circuit = serde_json::from_str(text)?;
        for e in c.edges.iter().chain(&c.raw_edges) {
            if graph.edge_position(e).is_none() {
                return Err(Error::Input(format!("edge `{e}` is not in the graph")));
            }
        }
        if c.nodes != induced_nodes(&c.edges) {
            return Err(Error::Input(
                "circuit node list does not match its edges".into(),
            ));
        }
        Ok(c)
    }
}

/// Takes the `n` edges of largest |score| (ties by graph edge order), then
/// prunes nodes that do not lie on an input-to-logits path.
pub fn select_circuit(
    scores: &EdgeScores,
    n: usize,
    graph: &ComputationalGraph,
) -> Result<Circuit> {
    let total = graph.edges().len();
    if scores.scores.len() != total {
        return Err(Error::Input(format!(
            "{} scores for a graph with {total} edges",
            scores.scores.len()
        )));
    }
    if n == 0 || n > total {
        return Err(Error::Input(format!(
            "circuit size {n} outside 1..={total}"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .abs()
            .total_cmp(&scores.scores[a].abs())
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order[..n].to_vec();
    chosen.sort_unstable();
    let raw_edges: Vec<Edge> = chosen.iter().map(|&i| graph.edges()[i]).collect();
    let edges = prune(&raw_edges);
    Ok(Circuit {
        method: Some(scores.method),
        n_requested: n,
        nodes: induced_nodes(&edges),
        raw_edges,
        edges,
        faithfulness_raw: None,
        faithfulness_normalized: None,
    })
}
