//! Nonlinear independent component analysis by generalized contrastive
//! learning: a discriminator learns to tell true `(x, u)` pairs from pairs
//! whose auxiliary variable `u` was shuffled, and its hidden features recover
//! the independent components.

pub mod numerics;
pub mod synthdata;
pub mod contrastive;
pub mod model;
pub mod trainer;
pub mod linear_ica;
pub mod evalmetrics;
pub mod theorycheck;
