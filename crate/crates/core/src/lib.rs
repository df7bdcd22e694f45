//! Directional self-supervised pretraining toolkit.
//!
//! Training views of one image form a small partially ordered set: two
//! standard (lightly augmented) views connected symmetrically, and heavier
//! views derived from them connected by directed edges. The directional
//! objective pulls each heavy view toward its own parent's target while the
//! usual symmetric term acts between the standard views only, which keeps
//! heavy augmentation policies (RandAugment, Jigsaw, UniformAugment) from
//! collapsing negative-pair-free frameworks such as SimSiam and BYOL.
//!
//! The crate is organized around that pipeline:
//!
//! - [`augment`]: seeded standard and heavy augmentation policies
//! - [`views`]: partially ordered view-set construction with provenance
//! - [`frameworks`]: SimSiam / BYOL / SimCLR encoder stacks and target rules
//! - [`objectives`]: symmetric, asymmetric, generalized, and NT-Xent losses
//! - [`trainer`]: the pretraining loop with kNN and collapse monitoring
//! - [`eval`]: frozen-backbone linear evaluation and offline kNN scoring
//! - [`data`]: CIFAR-10 ingestion and a deterministic synthetic dataset
//!
//! Everything runs on a small f64 reverse-mode autodiff engine ([`tensor`],
//! [`nn`]) so stop-gradient semantics, EMA updates, and determinism are
//! exactly controlled.

pub mod augment;
pub mod config;
pub mod data;
pub mod eval;
pub mod frameworks;
pub mod nn;
pub mod objectives;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod views;
