//! Region-aware cluster discrimination for vision encoders.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! 1. **Region data** ([`region`], [`manifest`], [`synth`]) — region-annotated
//!    image records, balanced per-image region sampling, tokenization, and a
//!    deterministic synthetic dataset generator.
//! 2. **Encoder** ([`encoder`], [`mask`]) — a compact vision transformer whose
//!    final layers attend region queries over patch tokens under a visibility
//!    mask, emitting one embedding per region.
//! 3. **Pseudo-labeling** ([`cluster`], [`features`]) — spherical k-means over
//!    unit-norm features, with optional two-level hierarchical fitting and
//!    exact nearest-centroid assignment.
//! 4. **Cluster-discrimination losses** ([`loss`], [`shard`]) — margin-scaled
//!    cosine logits with uniformly sampled negative classes, a single-positive
//!    object loss, a multi-positive OCR loss, and a sharded-classifier
//!    evaluation path that matches the unsharded one.
//! 5. **Training** ([`trainer`], [`optim`], [`checkpoint`], [`gradcheck`]) —
//!    a deterministic AdamW loop with JSONL metrics, bit-exact checkpoint
//!    round trips, and finite-difference gradient verification.
//!
//! All randomness flows through [`rng::derive_seed`] so every pipeline stage
//! is reproducible from a single base seed, independent of thread count.

mod binio;
pub mod checkpoint;
pub mod cluster;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod manifest;
pub mod mask;
pub mod optim;
pub mod real;
pub mod region;
pub mod rng;
pub mod shard;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
