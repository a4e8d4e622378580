//! Deformation-aware 3D shape retrieval.
//!
//! The engine precomputes an asymmetric *fitting gap* between shapes by
//! deforming one toward the other under a rigidity-regularized energy,
//! learns a non-metric embedding whose per-shape egocentric distance fields
//! encode that asymmetry, and retrieves the database shape that best fits a
//! query *after* deformation.
//!
//! Module map:
//! - [`geometry`]: meshes, point clouds, sampling, KD-tree, BVH, Chamfer.
//! - [`distance_field`]: voxelized unsigned distance grids.
//! - [`deform`]: the deformation solver (UDF fit + edge rigidity).
//! - [`fitgap`]: pair sampling and fitting-gap tables.
//! - [`embed`]: the embedding and egocentric-field networks.
//! - [`train`]: margin and regression training strategies.
//! - [`reteval`]: retrieval, baselines, metrics, synthetic families.
//! - [`store`]: the on-disk shape store used by the CLI.

pub mod cli;
pub mod deform;
pub mod distance_field;
pub mod embed;
pub mod fitgap;
pub mod geometry;
pub mod reteval;
pub mod seed;
pub mod store;
pub mod train;
