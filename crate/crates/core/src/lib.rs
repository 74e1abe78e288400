// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod autodiff;
pub mod circuit;
pub mod error;
pub mod influence;
pub mod ioi;
pub mod model;
pub mod report;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
