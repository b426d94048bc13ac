#![doc = include_str!("../../../book/src/introduction.md")]
// `!(x > 0.0)` also rejects NaN; index loops mirror the math.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod config;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

// Book chapters compile and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/desk.md")]
    mod desk {}
}
