//! Minimal dense/convolutional network building blocks on `ndarray`.

mod layers;

pub use layers::{column, sigmoid, Conv2d, Init, Layer, Linear, Residual, Saved, Sequential, Tensor, Trace};
