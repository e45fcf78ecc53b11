//! Taxonomy-constrained segmentation of multi-scale pathology patches.
//!
//! A class taxonomy (regions ⊇ functional units ⊇ cells, plus mutual
//! exclusions) is compiled into a relation matrix. Dataset area statistics
//! give a matching scale matrix. Both weight a relation-aware loss that lets
//! a single token-prompted network learn from patches that each carry a label
//! for only one class.
//!
//! The modules, bottom up:
//!
//! * [`taxonomy`]: tree files, the relation matrix and its audit;
//! * [`scale`]: area rates and the scale matrix;
//! * [`losses`]: Dice, cross-entropy and the taxonomy loss with analytic gradients;
//! * [`tape`]: the reverse-mode autodiff the network runs on;
//! * [`model`]: token bank, encoder, mask decoder and dynamic head;
//! * [`synthdata`]: a synthetic, taxonomy-consistent multi-scale dataset;
//! * [`trainer`]: two-phase training with partial labels;
//! * [`eval`]: Dice, violation metrics, reports and the signed-rank test;
//! * [`experiment`]: the loss-term ablation.

pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod scale;
pub mod seeds;
pub mod synthdata;
pub mod tape;
pub mod taxonomy;
pub mod trainer;

pub use losses::{LossValue, MaskTensor};
pub use scale::{DatasetManifest, Magnification, ScaleMatrix};
pub use taxonomy::{ClassId, Relation, TaxonomyMatrix, TaxonomyTree};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/taxonomy.md")]
    mod taxonomy {}
    #[doc = include_str!("../../../book/src/scale.md")]
    mod scale {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
