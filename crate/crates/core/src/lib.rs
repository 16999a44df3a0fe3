//! Form-structure extraction from elementary form elements.
//!
//! Pages of textruns and widgets go through two association passes. The
//! first groups textruns into textblocks; the second groups textblocks and
//! widgets into text fields, choice fields and choice groups. Each pass
//! builds a patch around every reference element, scores its neighbours
//! with a multi-modal network ([`mmpan`]) and reads the connected
//! components of the resulting graphs ([`grouper`]).
//!
//! ```
//! use formgraph::doc_model::GroupKind;
//! use formgraph::synthgen::{generate_pages, GenConfig};
//!
//! let pages = generate_pages(&GenConfig { pages: 1, seed: 0, ..GenConfig::default() })?;
//! assert!(pages[0].annotations_of(GroupKind::TextField).count() >= 2);
//! # Ok::<(), formgraph::Error>(())
//! ```
//!
//! The guide in `book/` walks through each stage with runnable examples.

pub mod doc_model;
pub mod error;
pub mod evaluator;
pub mod grouper;
pub mod netcore;
pub mod mmpan;
pub mod patcher;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pages.md")]
    mod pages {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/patches.md")]
    mod patches {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/grouping.md")]
    mod grouping {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
