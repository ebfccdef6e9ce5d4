//! Group convolutions over the finite 3D rotation groups that act exactly on
//! a voxel lattice: the Klein four-group `V`, the rotational tetrahedral
//! group `T4`, and the full cube group `S4`.
//!
//! The crate is organized as a pipeline:
//!
//! - [`symmetry`] enumerates the groups as integer signed-permutation
//!   matrices and derives their Cayley tables, inverses, and permutation
//!   representations.
//! - [`voxel`] holds dense feature maps and filter banks, performs
//!   interpolation-free lattice rotations and translations, and reads/writes
//!   the VOXT binary format.
//! - [`gconv`] implements the roto-translational group convolution (lifting
//!   and hidden layers, forward and backward) plus a numerical equivariance
//!   audit.
//! - [`network`] adds the layers, loss, initialization, and optimizer needed
//!   to train small equivariant voxel classifiers.
//! - [`polycube`] generates a synthetic polycube classification benchmark
//!   designed to expose rotation generalization.
//! - [`harness`] exposes everything as CLI subcommands with JSON reports;
//!   the `cubekit` binary is a thin wrapper around it.
//!
//! Runnable demonstrations of each capability live under `examples/`.

pub mod gconv;
pub mod harness;
pub mod network;
pub mod polycube;
pub mod scalar;
pub mod symmetry;
pub mod voxel;

pub use scalar::Scalar;
pub use symmetry::{FiniteRotationGroup, GroupKind, RotationElement};
pub use voxel::{FeatureMap, FilterBank, LatticeOffset, MapShape};
