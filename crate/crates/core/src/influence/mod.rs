// SPDX-License-Identifier: MIT OR Apache-2.0

//! Damped inverse-Hessian influence over the parameters of circuit nodes.

mod curvature;
mod slice;
mod table;

pub use curvature::{estimate_scale, hvp, inverse_hvp, DIVERGENCE_PATIENCE, NEUMANN_TOLERANCE};
pub use slice::{per_token_gradients, InfluenceModel, ParamSlice, TransformerSlice};
pub use table::{
    cross_influence, self_influence_column, self_influence_table, self_influence_table_from_models,
    InfluenceOptions, InfluenceTable, QuadraticSurrogate,
};
