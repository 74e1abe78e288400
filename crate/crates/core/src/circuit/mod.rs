// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge attribution, greedy circuit selection and faithfulness.

mod faithfulness;
mod scores;
mod select;

pub use faithfulness::{faithfulness, normalize, Faithfulness, FaithfulnessEvaluator};
pub use scores::{
    attribution_scores, eap_ig_kl_scores, eap_ig_scores, eap_scores, riemann_average, score,
    EdgeScores, LossKind, Method,
};
pub use select::{listing_order, prune, select_circuit, Circuit};
