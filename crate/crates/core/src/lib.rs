//! Training pipeline for patch-pair vulnerability detection.
//!
//! Stages: teacher-driven reasoning synthesis over vulnerable/fixed code
//! pairs ([`bvd`]), triplet supervised fine-tuning ([`tsft`]), and curriculum
//! preference optimization with an identity preference loss ([`copo`]), all
//! run against a small exact-gradient policy ([`toymodel`]) and scored with
//! pairwise detection metrics ([`eval`]).

pub mod corpus;
pub mod toymodel;
pub mod eval;
pub mod genclient;
pub mod bvd;
pub mod optim;
pub mod tsft;
pub mod copo;
pub mod minicorpus;

/// Backend registry with the transport backends and the offline template
/// teacher.
pub fn default_registry() -> genclient::BackendRegistry {
    let mut registry = genclient::BackendRegistry::with_transport_backends();
    bvd::register_backends(&mut registry);
    registry
}
