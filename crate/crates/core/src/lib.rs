// SPDX-License-Identifier: Apache-2.0

//! Forward computations for a DETR-style BEV 3D detection head: dual query
//! selection, deformable grid attention, an iterative-refinement decoder and
//! quality-aware Hungarian matching.

pub mod bev;
pub mod boxgeom;
pub mod decoder;
pub mod dga;
pub mod dqs;
pub mod error;
pub mod matcher;
pub mod nn;
pub mod params;

pub use error::{Error, Result, TensorFileError};
