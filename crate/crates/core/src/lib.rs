//! Deep convolutional set functions for classifying asynchronous
//! multivariate time series.

pub mod asts;
pub mod tensor;
pub mod model;
pub mod datagen;
pub mod diagnostics;
pub mod train;
