// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-layernorm decoder-only transformer whose heads and MLPs are
//! the nodes of a [`ComputationalGraph`].

pub(crate) mod forward;
pub mod graph;
mod objective;
mod params;
pub(crate) mod train;

use serde::{Deserialize, Serialize};

pub(crate) use forward::interpolate;
pub use forward::{
    node_input_gradients, run_patched, run_with_cache, slot_gradients_from_embedding,
    ActivationCache, InputPoint, LinearSite, ModelRun,
};
pub use graph::{closed_form_edge_count, ComputationalGraph, Edge, EdgeMask, NodeId, Qkv, Slot};
pub use objective::{final_distribution, Objective};
pub use params::ModelParams;
pub use train::{learning_rate_at, mean_logit_diff, train_toy_model, TrainConfig, TrainReport};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// GPT-2 small dimensions.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            vocab_size: 50257,
            max_seq_len: 1024,
        }
    }

    /// Default toy model trained in-repo: 4 layers, 4 heads, width 64.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size,
            max_seq_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.d_mlp,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Input(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::Input(format!(
                "d_head ({}) * n_heads ({}) must equal d_model ({})",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}
