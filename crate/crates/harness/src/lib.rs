// SPDX-License-Identifier: Apache-2.0

//! Command-line harness around the detection head: synthetic scene generation,
//! end-to-end runs with metric reports, attention image dumps and oracle checks.

pub mod attention;
pub mod config;
pub mod error;
pub mod json;
pub mod oracles;
pub mod pipeline;
pub mod report;
pub mod scene;

pub use error::{HarnessError, Result};
