// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod elliptic;
pub mod error;
pub mod gsa;
pub mod hdsa;
pub mod linops;
pub mod model;
pub mod oracle;
pub mod prior;
pub mod twobytwo;

pub use error::{Error, Result};
