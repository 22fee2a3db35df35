//! Attention focusing for generalized category discovery.
//!
//! A desk-scale ViT encoder whose intermediate blocks are scored by learnable
//! queries ([`time`]), whose low-importance patch tokens are pruned before the
//! last block ([`tap`]), and whose pooled output feeds the parametric GCD
//! objective ([`gcd_head`]). [`metrics`] covers matched accuracy, attention
//! masks and cost accounting; [`synthdata`] generates the benchmark and
//! [`experiment`] drives training, evaluation and ablations.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gcd_head;
pub mod metrics;
pub mod numcore;
pub mod synthdata;
pub mod tap;
pub mod time;

pub use error::{AfError, Result};
pub use numcore::{Graph, Matrix, ParamStore, Var};
